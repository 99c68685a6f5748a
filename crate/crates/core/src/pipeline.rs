//! End-to-end drivers: synthetic dataset generation, the training loop and
//! checkpoint evaluation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{
    bin_distance, build_mask, center_crop, frame_rng, gaussian_smooth, synth_scene,
    write_manifest, AnnotatedFrame, BBox, ClassBins, SynthParams,
};
use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::io;
use crate::losses::{combined_loss, LossWeights, SsimConfig, BERHU_C_FRAC};
use crate::metrics::{evaluate, EvalSample, MetricReport, SlidingWindowCfg};
use crate::model::{Model, ModelConfig};
use crate::optim::{adam_step, l2_penalty, AdamConfig, AdamState, WarmupSchedule};
use crate::tensor::Tensor;

/// Render `n` frames to `out_dir/images/`, write `out_dir/manifest.tsv` and
/// return the frames. Per-frame RNG streams keep the output independent of
/// scheduling.
pub fn generate_dataset(
    params: &SynthParams,
    n: usize,
    out_dir: &Path,
    dump_masks: bool,
) -> Result<Vec<AnnotatedFrame>> {
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let masks_dir = out_dir.join("masks");
    if dump_masks {
        std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    }
    let bins = ClassBins::default();
    let frames: Vec<AnnotatedFrame> = (0..n)
        .into_par_iter()
        .map(|i| {
            let frame_id = format!("frame_{i:06}");
            let mut rng = frame_rng(params.seed, i as u64);
            let (img, frame) = synth_scene(params, &frame_id, &mut rng)?;
            io::write_image(&img, &images.join(format!("{frame_id}.pgm")))?;
            if dump_masks {
                let mask = build_mask(&frame, img.h, img.w, &bins)?;
                io::write_class_mask(&mask, &masks_dir.join(format!("{frame_id}.pgm")))?;
            }
            Ok(frame)
        })
        .collect::<Result<_>>()?;
    write_manifest(&frames, &out_dir.join("manifest.tsv"))?;
    Ok(frames)
}

/// Everything the training loop needs about one frame, prepared once.
struct TrainSample {
    frame_id: String,
    image: Tensor<f32>,
    image_crop: Image,
    target: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub crop: usize,
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub berhu_c_frac: f32,
    pub base_lr: f32,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub smooth_sigma: f32,
    pub smooth_ksize: usize,
    pub bins: ClassBins,
    /// Shuffle / init seed; the model seed is taken from `model.seed`.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            crop: 128,
            weights: LossWeights::default(),
            ssim: SsimConfig::default(),
            berhu_c_frac: BERHU_C_FRAC,
            base_lr: 1e-3,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            smooth_sigma: 2.0,
            smooth_ksize: 9,
            bins: ClassBins::default(),
            seed: 0,
        }
    }
}

/// Per-epoch progress handed to the logging callback.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Warmup multiplier at the epoch's first iteration.
    pub lr_multiplier: f32,
    /// Explicit-penalty equivalent of the coupled weight decay.
    pub l2_penalty: f64,
}

fn prepare_sample(
    frame: &AnnotatedFrame,
    manifest_dir: &Path,
    cfg: &TrainConfig,
) -> Result<TrainSample> {
    let img = io::read_image(&frame.resolve_image_path(manifest_dir))?;
    let mask = build_mask(frame, img.h, img.w, &cfg.bins)?;
    let (crop_img, crop_mask, _) = center_crop(&img, &mask, &frame.bbox, cfg.crop)?;
    let smoothed = gaussian_smooth(&crop_mask, cfg.smooth_sigma, cfg.smooth_ksize)?;
    if crop_img.channels != cfg.model.in_channels {
        return Err(Error::InvalidArgument(format!(
            "frame {}: image has {} channels, model expects {}",
            frame.frame_id, crop_img.channels, cfg.model.in_channels
        )));
    }
    let image = Tensor::new(
        vec![1, crop_img.channels, cfg.crop, cfg.crop],
        crop_img.data().to_vec(),
    )?;
    Ok(TrainSample {
        frame_id: frame.frame_id.clone(),
        image,
        image_crop: crop_img,
        target: smoothed.to_tensor(),
    })
}

/// Train a fresh model: per iteration, center-crop, build and smooth the
/// target mask, run the forward pass, take the combined loss and apply a
/// warmup-scaled Adam step. Returns the model and final optimizer state.
pub fn train(
    frames: &[AnnotatedFrame],
    manifest_dir: &Path,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, AdamState)> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs at least one frame".to_string(),
        ));
    }
    cfg.weights.validate()?;
    let divisor = 1usize << cfg.model.levels;
    if cfg.crop % divisor != 0 {
        return Err(Error::InvalidArgument(format!(
            "crop {} must be divisible by 2^levels = {divisor}",
            cfg.crop
        )));
    }

    let samples: Vec<TrainSample> = frames
        .par_iter()
        .map(|f| prepare_sample(f, manifest_dir, cfg))
        .collect::<Result<_>>()?;

    let mut model = Model::init(cfg.model.clone())?;
    let mut state = AdamState::new(model.params());
    let schedule = WarmupSchedule::for_dataset(cfg.base_lr, frames.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut iteration = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let epoch_multiplier = schedule.multiplier(iteration);
        let mut loss_sum = 0.0f64;
        for &idx in &order {
            let sample = &samples[idx];
            let mut g = crate::graph::Graph::<f32>::new();
            let image = g.constant(sample.image.clone());
            let traced = model.forward_traced(&mut g, image)?;
            let target = g.constant(sample.target.clone());
            let loss = combined_loss(
                &mut g,
                traced.output,
                target,
                &sample.image_crop,
                &cfg.weights,
                &cfg.ssim,
                cfg.berhu_c_frac,
            )?;
            let loss_value = g.item(loss);
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss on frame {} (epoch {epoch}, iteration {iteration})",
                    sample.frame_id
                )));
            }
            loss_sum += loss_value as f64;

            let grads = g.backward(loss)?;
            for ((_, var), (_, param)) in traced.params.iter().zip(model.params_mut()) {
                let grad = grads
                    .get(*var)
                    .expect("every parameter requires a gradient");
                param.set_grad(grad.data().to_vec());
            }
            adam_step(
                model.params_mut(),
                &mut state,
                schedule.lr(iteration),
                &cfg.adam,
            )?;
            iteration += 1;
        }
        on_epoch(&EpochLog {
            epoch,
            mean_loss: loss_sum / samples.len() as f64,
            lr_multiplier: epoch_multiplier,
            l2_penalty: l2_penalty(model.params(), cfg.adam.weight_decay),
        });
    }
    Ok((model, state))
}

/// Where evaluation predictions come from.
pub enum Predictor<'a> {
    Model(&'a Model),
    /// Directory of `<frame_id>.pfm` float maps.
    Directory(&'a Path),
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub crop: usize,
    pub window: SlidingWindowCfg,
    pub threshold: f32,
    pub bins: ClassBins,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            crop: 128,
            window: SlidingWindowCfg::default(),
            threshold: 1.25,
            bins: ClassBins::default(),
        }
    }
}

/// Evaluate predictions against unsmoothed ground-truth masks; optionally
/// dump each predicted mask as a float map.
pub fn evaluate_frames(
    frames: &[AnnotatedFrame],
    manifest_dir: &Path,
    predictor: Predictor<'_>,
    cfg: &EvalConfig,
    dump_dir: Option<&Path>,
) -> Result<MetricReport> {
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut samples = Vec::with_capacity(frames.len());
    for frame in frames {
        let img = io::read_image(&frame.resolve_image_path(manifest_dir))?;
        let mask = build_mask(frame, img.h, img.w, &cfg.bins)?;
        let (crop_img, crop_mask, crop_bbox) = center_crop(&img, &mask, &frame.bbox, cfg.crop)?;
        let pred = predict(&crop_img, frame, &predictor, cfg)?;
        if pred.h != cfg.crop || pred.w != cfg.crop {
            return Err(Error::InvalidArgument(format!(
                "prediction for frame {} is {}x{}, expected {}x{}",
                frame.frame_id, pred.h, pred.w, cfg.crop, cfg.crop
            )));
        }
        if let Some(dir) = dump_dir {
            io::write_float_map(&pred, &dir.join(format!("{}.pfm", frame.frame_id)))?;
        }
        samples.push(EvalSample {
            pred,
            gt_mask: crop_mask,
            gt_class: bin_distance(frame.distance_m, &cfg.bins)?,
            bbox: crop_bbox,
        });
    }
    evaluate(&samples, &cfg.window, cfg.threshold)
}

fn predict(
    crop_img: &Image,
    frame: &AnnotatedFrame,
    predictor: &Predictor<'_>,
    cfg: &EvalConfig,
) -> Result<Mask> {
    match predictor {
        Predictor::Model(model) => {
            let input = Tensor::new(
                vec![1, crop_img.channels, cfg.crop, cfg.crop],
                crop_img.data().to_vec(),
            )?;
            Mask::from_tensor(&model.forward(&input)?)
        }
        Predictor::Directory(dir) => io::read_float_map(&dir.join(format!("{}.pfm", frame.frame_id))),
    }
}

/// Center-crop inference on one image; returns the continuous mask and the
/// bbox in crop coordinates when a bbox was supplied.
pub fn infer(
    model: &Model,
    image: &Image,
    bbox: Option<&BBox>,
    crop: Option<usize>,
) -> Result<(Mask, Option<BBox>)> {
    let (work, local_bbox) = match (bbox, crop) {
        (Some(b), Some(c)) => {
            let dummy = Mask::filled(image.h, image.w, 0.0);
            let (crop_img, _, local) = center_crop(image, &dummy, b, c)?;
            (crop_img, Some(local))
        }
        (None, Some(c)) => {
            let center = BBox::new((image.w / 2) as i32, (image.h / 2) as i32, 1, 1)?;
            let dummy = Mask::filled(image.h, image.w, 0.0);
            let (crop_img, _, _) = center_crop(image, &dummy, &center, c)?;
            (crop_img, None)
        }
        (Some(b), None) => (image.clone(), b.clip(image.h, image.w)),
        (None, None) => (image.clone(), None),
    };
    let input = Tensor::new(vec![1, work.channels, work.h, work.w], work.data().to_vec())?;
    let pred = Mask::from_tensor(&model.forward(&input)?)?;
    Ok((pred, local_bbox))
}

/// Resolve frames for dataset paths: convenience used by the CLI.
pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."))
}
