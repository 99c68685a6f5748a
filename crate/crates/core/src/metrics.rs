//! Regression and ordinal-classification metrics.
//!
//! The sliding-window metric averages k×k kernels anchored at every pixel
//! of the bounding box (reflect padding where a window overhangs the mask),
//! aggregates the kernel means with mean/min/max, and rounds half away from
//! zero to a class. Threshold accuracy compares per-pixel ratios of the
//! (+1-shifted) predicted and true values against a cutoff.

use crate::dataset::BBox;
use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::ops::reflect_index;

pub const CLASS_MAX: f32 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregator {
    Mean,
    Min,
    Max,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [Aggregator::Mean, Aggregator::Min, Aggregator::Max];

    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Min => "min",
            Aggregator::Max => "max",
        }
    }
}

/// Sliding-window configuration. Windows overhanging the mask borders read
/// reflected values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlidingWindowCfg {
    pub k: usize,
    pub stride: usize,
    pub aggregator: Aggregator,
}

impl Default for SlidingWindowCfg {
    fn default() -> Self {
        SlidingWindowCfg {
            k: 5,
            stride: 1,
            aggregator: Aggregator::Min,
        }
    }
}

impl SlidingWindowCfg {
    pub fn with_aggregator(self, aggregator: Aggregator) -> Self {
        SlidingWindowCfg { aggregator, ..self }
    }

    fn validate(&self, mask: &Mask) -> Result<()> {
        if self.k % 2 == 0 || self.k == 0 {
            return Err(Error::InvalidArgument(format!(
                "window size must be odd, got {}",
                self.k
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".to_string()));
        }
        if mask.h < self.k || mask.w < self.k {
            return Err(Error::InvalidArgument(format!(
                "mask {}x{} smaller than {}x{} window even after reflect padding",
                mask.h, mask.w, self.k, self.k
            )));
        }
        Ok(())
    }
}

fn clip_bbox(mask: &Mask, bbox: &BBox) -> Result<BBox> {
    bbox.clip(mask.h, mask.w).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "bbox ({}, {}, {}, {}) does not intersect the {}x{} mask",
            bbox.x, bbox.y, bbox.w, bbox.h, mask.h, mask.w
        ))
    })
}

/// Mean of every k×k window whose top-left anchor walks the (clipped) box.
/// One value per anchor: stride 1 yields bbox.w × bbox.h values in row-major
/// anchor order.
pub fn kernel_means(mask: &Mask, bbox: &BBox, cfg: &SlidingWindowCfg) -> Result<Vec<f32>> {
    cfg.validate(mask)?;
    let inside = clip_bbox(mask, bbox)?;
    let inv = 1.0 / (cfg.k * cfg.k) as f64;
    let mut out = Vec::with_capacity(inside.w as usize * inside.h as usize);
    let mut y = inside.y as usize;
    while y < inside.y as usize + inside.h as usize {
        let mut x = inside.x as usize;
        while x < inside.x as usize + inside.w as usize {
            let mut acc = 0.0f64;
            for i in 0..cfg.k {
                let sy = reflect_index((y + i) as isize, mask.h);
                for j in 0..cfg.k {
                    let sx = reflect_index((x + j) as isize, mask.w);
                    acc += mask.at(sy, sx) as f64;
                }
            }
            out.push((acc * inv) as f32);
            x += cfg.stride;
        }
        y += cfg.stride;
    }
    Ok(out)
}

/// Pre-rounding aggregate of the kernel means.
pub fn sliding_window_aggregate(mask: &Mask, bbox: &BBox, cfg: &SlidingWindowCfg) -> Result<f32> {
    let means = kernel_means(mask, bbox, cfg)?;
    Ok(aggregate(&means, cfg.aggregator))
}

fn aggregate(means: &[f32], aggregator: Aggregator) -> f32 {
    debug_assert!(!means.is_empty());
    match aggregator {
        Aggregator::Mean => {
            let sum: f64 = means.iter().map(|&v| v as f64).sum();
            (sum / means.len() as f64) as f32
        }
        Aggregator::Min => means.iter().copied().fold(f32::INFINITY, f32::min),
        Aggregator::Max => means.iter().copied().fold(f32::NEG_INFINITY, f32::max),
    }
}

/// Final class: aggregate, round half away from zero, clamp to `[0, 4]`.
pub fn sliding_window_class(mask: &Mask, bbox: &BBox, cfg: &SlidingWindowCfg) -> Result<u8> {
    let value = sliding_window_aggregate(mask, bbox, cfg)?;
    Ok(round_to_class(value))
}

pub fn round_to_class(value: f32) -> u8 {
    value.round().clamp(0.0, CLASS_MAX) as u8
}

fn clamp_class(v: f32) -> f32 {
    v.clamp(0.0, CLASS_MAX)
}

/// Pixelwise mean absolute error in class units; predictions are clamped to
/// `[0, 4]` first.
pub fn mae(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same("mae", pred, gt)?;
    let n = pred.data().len() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (clamp_class(p) - g).abs() as f64)
        .sum();
    Ok(sum / n)
}

/// Pixelwise root mean square error in class units; predictions clamped to
/// `[0, 4]` first.
pub fn rmse(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same("rmse", pred, gt)?;
    let n = pred.data().len() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let d = (clamp_class(p) - g) as f64;
            d * d
        })
        .sum();
    Ok((sum / n).sqrt())
}

/// Fraction of pixels whose shifted ratio stays strictly under `thr`:
/// with p' = clamp(p, 0, 4) + 1 and g' = g + 1, a pixel is correct iff
/// max(p'/g', g'/p') < thr. The +1 shift keeps the ratio defined at class 0.
pub fn threshold_accuracy(pred: &Mask, gt: &Mask, thr: f32) -> Result<f64> {
    check_same("threshold_accuracy", pred, gt)?;
    if thr <= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "threshold must exceed 1, got {thr}"
        )));
    }
    let correct = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(&p, &g)| {
            let ps = clamp_class(p) + 1.0;
            let gs = g + 1.0;
            (ps / gs).max(gs / ps) < thr
        })
        .count();
    Ok(correct as f64 / pred.data().len() as f64)
}

fn check_same(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{}x{}", a.h, a.w),
            actual: format!("{}x{}", b.h, b.w),
        });
    }
    Ok(())
}

/// One evaluation sample: a predicted mask against its ground truth.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub pred: Mask,
    pub gt_mask: Mask,
    pub gt_class: u8,
    pub bbox: BBox,
}

/// Aggregated evaluation results.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub sw_acc_mean: f64,
    pub sw_acc_min: f64,
    pub sw_acc_max: f64,
    pub threshold_acc: f64,
    pub n_samples: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "mae,rmse,sw_mean,sw_min,sw_max,thr_acc,n";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.mae,
            self.rmse,
            self.sw_acc_mean,
            self.sw_acc_min,
            self.sw_acc_max,
            self.threshold_acc,
            self.n_samples
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "n={} mae={:.4} rmse={:.4} sw(mean/min/max)={:.3}/{:.3}/{:.3} thr_acc={:.3}",
            self.n_samples,
            self.mae,
            self.rmse,
            self.sw_acc_mean,
            self.sw_acc_min,
            self.sw_acc_max,
            self.threshold_acc
        )
    }
}

/// Pool pixel metrics over all samples (against unsmoothed ground truth)
/// and score each aggregator's sliding-window class against the object's
/// distance class.
pub fn evaluate(samples: &[EvalSample], cfg: &SlidingWindowCfg, thr: f32) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluate needs at least one sample".to_string(),
        ));
    }
    let mut abs_sum = 0.0f64;
    let mut sq_sum = 0.0f64;
    let mut thr_correct = 0.0f64;
    let mut pixels = 0usize;
    let mut sw_correct = [0usize; 3];

    for s in samples {
        check_same("evaluate", &s.pred, &s.gt_mask)?;
        let n = s.pred.data().len();
        for (&p, &g) in s.pred.data().iter().zip(s.gt_mask.data()) {
            let d = (clamp_class(p) - g) as f64;
            abs_sum += d.abs();
            sq_sum += d * d;
        }
        thr_correct += threshold_accuracy(&s.pred, &s.gt_mask, thr)? * n as f64;
        pixels += n;

        let means = kernel_means(&s.pred, &s.bbox, cfg)?;
        for (i, agg) in Aggregator::ALL.iter().enumerate() {
            if round_to_class(aggregate(&means, *agg)) == s.gt_class {
                sw_correct[i] += 1;
            }
        }
    }
    let n = samples.len() as f64;
    Ok(MetricReport {
        mae: abs_sum / pixels as f64,
        rmse: (sq_sum / pixels as f64).sqrt(),
        sw_acc_mean: sw_correct[0] as f64 / n,
        sw_acc_min: sw_correct[1] as f64 / n,
        sw_acc_max: sw_correct[2] as f64 / n,
        threshold_acc: thr_correct / pixels as f64,
        n_samples: samples.len(),
    })
}
