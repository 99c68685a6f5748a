//! The four training losses and their weighted combination.
//!
//! Every loss is built as graph primitives on the active tape, so gradients
//! flow through the same engine the model uses. Losses are generic over the
//! scalar type; the gradient-check harness runs them at f64.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grid::Image;
use crate::ops::PadMode;
use crate::tensor::{fmt_shape, Real, Tensor};

/// Combination weights of the hybrid loss, in edge/SSIM/L1/BerHu order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_edge: f32,
    pub w_ssim: f32,
    pub w_l1: f32,
    pub w_berhu: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_edge: 1.0,
            w_ssim: 1.0,
            w_l1: 1.0,
            w_berhu: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_edge, self.w_ssim, self.w_l1, self.w_berhu];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidArgument(
                "at least one loss weight must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// SSIM window and stabilisation constants. `c1`/`c2` derive from the
/// dynamic range `L` as `(0.01 L)^2` and `(0.03 L)^2`; masks span 4 class
/// units, so the defaults use `L = 4`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub c1: f32,
    pub c2: f32,
    pub dynamic_range: f32,
}

impl SsimConfig {
    pub fn with_range(window: usize, dynamic_range: f32) -> Self {
        let c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
        let c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
        SsimConfig {
            window,
            c1,
            c2,
            dynamic_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::InvalidArgument(format!(
                "ssim window must be odd, got {}",
                self.window
            )));
        }
        if self.c1 <= 0.0 || self.c2 <= 0.0 {
            return Err(Error::InvalidArgument(
                "ssim constants must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig::with_range(7, 4.0)
    }
}

/// Fraction of the batch-max absolute error used as the BerHu threshold.
pub const BERHU_C_FRAC: f32 = 0.2;

fn check_same_shape<T: Real>(op: &'static str, g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: fmt_shape(g.value(a).shape()),
            actual: fmt_shape(g.value(b).shape()),
        });
    }
    Ok(())
}

/// Mean absolute error.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    check_same_shape("l1_loss", g, pred, target)?;
    let e = g.sub(pred, target)?;
    let a = g.abs(e)?;
    g.mean(a)
}

/// Reversed Huber: |e| below the threshold c, (e² + c²) / 2c above, with
/// c = c_frac · max|e| over the batch. The threshold is detached: gradients
/// treat c as a constant. Zero error yields an exact zero.
pub fn berhu_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, c_frac: f32) -> Result<Var> {
    check_same_shape("berhu_loss", g, pred, target)?;
    if c_frac <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "berhu c fraction must be positive, got {c_frac}"
        )));
    }
    let max_abs = g
        .value(pred)
        .data()
        .iter()
        .zip(g.value(target).data())
        .map(|(&p, &t)| (p - t).abs())
        .fold(T::zero(), |m, v| if v > m { v } else { m });
    if max_abs == T::zero() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let c = T::from_f64(c_frac as f64) * max_abs;
    berhu_loss_with_threshold(g, pred, target, c)
}

/// BerHu at a fixed, externally supplied threshold. Also the form the
/// finite-difference check probes, since the batch-derived threshold itself
/// is not differentiated through.
pub fn berhu_loss_with_threshold<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    c: T,
) -> Result<Var> {
    check_same_shape("berhu_loss", g, pred, target)?;
    if c <= T::zero() {
        return Err(Error::InvalidArgument(
            "berhu threshold must be positive".to_string(),
        ));
    }
    let e = g.sub(pred, target)?;
    let a = g.abs(e)?;
    let shape = g.value(a).shape().to_vec();
    let c_t = g.constant(Tensor::full(shape, c));
    // |e| <= c: contributes |e|; above: |e| + (|e|-c)^2 / 2c = (e^2+c^2) / 2c.
    let excess = g.sub(a, c_t)?;
    let over = g.relu(excess)?;
    let quad = g.square(over)?;
    let half_inv_c = T::one() / (T::from_f64(2.0) * c);
    let scaled = g.scalar_mul(quad, half_inv_c)?;
    let per_elem = g.add(a, scaled)?;
    g.mean(per_elem)
}

/// Edge-aware smoothness: per axis, the mean absolute forward difference of
/// the prediction scaled by exp(-mean |gradient of the image|) for that
/// axis, summed over x and y. Multichannel images are channel-averaged
/// before their gradients are taken.
pub fn edge_loss<T: Real>(g: &mut Graph<T>, pred: Var, image: &Image) -> Result<Var> {
    let shape = g.value(pred).shape().to_vec();
    let (h, w) = match shape.as_slice() {
        [1, 1, h, w] => (*h, *w),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "edge_loss",
                expected: "1x1xHxW prediction".to_string(),
                actual: fmt_shape(&shape),
            })
        }
    };
    if image.h != h || image.w != w {
        return Err(Error::ShapeMismatch {
            op: "edge_loss",
            expected: format!("{}x{} image", h, w),
            actual: format!("{}x{}", image.h, image.w),
        });
    }
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(
            "edge_loss needs at least 2x2 inputs".to_string(),
        ));
    }

    // Per-axis scalar attenuation from the image, computed off-graph: the
    // image carries no gradient.
    let luma = image.luma();
    let mut sx = 0.0f64;
    for y in 0..h {
        for x in 0..w - 1 {
            sx += (luma.at(y, x + 1) - luma.at(y, x)).abs() as f64;
        }
    }
    let lambda_x = (-(sx / ((w - 1) as f64 * h as f64))).exp();
    let mut sy = 0.0f64;
    for y in 0..h - 1 {
        for x in 0..w {
            sy += (luma.at(y + 1, x) - luma.at(y, x)).abs() as f64;
        }
    }
    let lambda_y = (-(sy / ((h - 1) as f64 * w as f64))).exp();

    // Forward differences via fixed [-1, 1] kernels (the valid region drops
    // the last column / row).
    let kx = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![-T::one(), T::one()])?);
    let ky = g.constant(Tensor::new(vec![1, 1, 2, 1], vec![-T::one(), T::one()])?);
    let gx = g.conv2d(pred, kx, None, 1, 0, PadMode::Zero)?;
    let gy = g.conv2d(pred, ky, None, 1, 0, PadMode::Zero)?;
    let ax = g.abs(gx)?;
    let ay = g.abs(gy)?;
    let mx = g.mean(ax)?;
    let my = g.mean(ay)?;
    let tx = g.scalar_mul(mx, T::from_f64(lambda_x))?;
    let ty = g.scalar_mul(my, T::from_f64(lambda_y))?;
    g.add(tx, ty)
}

/// 1 − mean SSIM over all valid (unpadded) uniform-window positions.
pub fn ssim_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, cfg: &SsimConfig) -> Result<Var> {
    check_same_shape("ssim_loss", g, pred, target)?;
    cfg.validate()?;
    let shape = g.value(pred).shape().to_vec();
    let (h, w) = match shape.as_slice() {
        [1, 1, h, w] => (*h, *w),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "ssim_loss",
                expected: "1x1xHxW masks".to_string(),
                actual: fmt_shape(&shape),
            })
        }
    };
    if h < cfg.window || w < cfg.window {
        return Err(Error::ShapeMismatch {
            op: "ssim_loss",
            expected: format!("spatial extent of at least {}", cfg.window),
            actual: format!("{}x{}", h, w),
        });
    }

    let k = cfg.window;
    let inv_k2 = T::from_f64(1.0 / (k * k) as f64);
    let box_kernel = g.constant(Tensor::full(vec![1, 1, k, k], inv_k2));
    let mut windowed = |v: Var, g: &mut Graph<T>| -> Result<Var> {
        g.conv2d(v, box_kernel, None, 1, 0, PadMode::Zero)
    };

    let mu_p = windowed(pred, g)?;
    let mu_t = windowed(target, g)?;
    let pp = g.mul(pred, pred)?;
    let tt = g.mul(target, target)?;
    let pt = g.mul(pred, target)?;
    let m_pp = windowed(pp, g)?;
    let m_tt = windowed(tt, g)?;
    let m_pt = windowed(pt, g)?;

    let mu_p2 = g.mul(mu_p, mu_p)?;
    let mu_t2 = g.mul(mu_t, mu_t)?;
    let mu_pt = g.mul(mu_p, mu_t)?;
    let var_p = g.sub(m_pp, mu_p2)?;
    let var_t = g.sub(m_tt, mu_t2)?;
    let cov = g.sub(m_pt, mu_pt)?;

    let map_shape = g.value(mu_p).shape().to_vec();
    let c1 = g.constant(Tensor::full(map_shape.clone(), T::from_f64(cfg.c1 as f64)));
    let c2 = g.constant(Tensor::full(map_shape, T::from_f64(cfg.c2 as f64)));

    let two = T::from_f64(2.0);
    let mu_pt2 = g.scalar_mul(mu_pt, two)?;
    let num1 = g.add(mu_pt2, c1)?;
    let cov2 = g.scalar_mul(cov, two)?;
    let num2 = g.add(cov2, c2)?;
    let mu_sum = g.add(mu_p2, mu_t2)?;
    let den1 = g.add(mu_sum, c1)?;
    let var_sum = g.add(var_p, var_t)?;
    let den2 = g.add(var_sum, c2)?;

    let num = g.mul(num1, num2)?;
    let den = g.mul(den1, den2)?;
    let ssim_map = g.div(num, den)?;
    let mean_ssim = g.mean(ssim_map)?;
    let one = g.constant(Tensor::scalar(T::one()));
    g.sub(one, mean_ssim)
}

/// Weighted sum of the four losses. Zero-weight components are skipped, not
/// evaluated.
pub fn combined_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    image: &Image,
    weights: &LossWeights,
    ssim_cfg: &SsimConfig,
    c_frac: f32,
) -> Result<Var> {
    weights.validate()?;
    let mut total: Option<Var> = None;
    let mut push = |g: &mut Graph<T>, term: Var, weight: f32| -> Result<()> {
        let scaled = g.scalar_mul(term, T::from_f64(weight as f64))?;
        total = Some(match total {
            Some(acc) => g.add(acc, scaled)?,
            None => scaled,
        });
        Ok(())
    };
    if weights.w_edge > 0.0 {
        let t = edge_loss(g, pred, image)?;
        push(g, t, weights.w_edge)?;
    }
    if weights.w_ssim > 0.0 {
        let t = ssim_loss(g, pred, target, ssim_cfg)?;
        push(g, t, weights.w_ssim)?;
    }
    if weights.w_l1 > 0.0 {
        let t = l1_loss(g, pred, target)?;
        push(g, t, weights.w_l1)?;
    }
    if weights.w_berhu > 0.0 {
        let t = berhu_loss(g, pred, target, c_frac)?;
        push(g, t, weights.w_berhu)?;
    }
    Ok(total.expect("validated weights have a positive entry"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_rng, grad_check, sample_tensor};
    use rand::Rng;

    fn eval_loss<F>(build: F) -> f32
    where
        F: FnOnce(&mut Graph<f32>) -> Result<Var>,
    {
        let mut g = Graph::<f32>::new();
        let loss = build(&mut g).unwrap();
        g.item(loss)
    }

    fn const_mask(g: &mut Graph<f32>, h: usize, w: usize, data: Vec<f32>) -> Var {
        g.constant(Tensor::new(vec![1, 1, h, w], data).unwrap())
    }

    #[test]
    fn l1_simple_values() {
        let v = eval_loss(|g| {
            let p = const_mask(g, 1, 2, vec![0.0, 2.0]);
            let t = const_mask(g, 1, 2, vec![1.0, 1.0]);
            l1_loss(g, p, t)
        });
        assert_eq!(v, 1.0);

        let zero = eval_loss(|g| {
            let p = const_mask(g, 2, 2, vec![1.0; 4]);
            let t = const_mask(g, 2, 2, vec![1.0; 4]);
            l1_loss(g, p, t)
        });
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn berhu_zero_error_is_zero() {
        let v = eval_loss(|g| {
            let p = const_mask(g, 2, 2, vec![2.0; 4]);
            let t = const_mask(g, 2, 2, vec![2.0; 4]);
            berhu_loss(g, p, t, BERHU_C_FRAC)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn berhu_equals_l1_inside_threshold() {
        // All |e| equal, so c = 0.2 max|e| < |e|... use varied errors
        // below c instead: max|e| = 1, c = 0.2; keep others under 0.2.
        let p = vec![0.1, 0.15, 0.05, 1.0];
        let t = vec![0.0; 4];
        let berhu = eval_loss(|g| {
            let p = const_mask(g, 2, 2, p.clone());
            let t = const_mask(g, 2, 2, t.clone());
            berhu_loss(g, p, t, 2.0) // c = 2 max|e| covers everything
        });
        let l1 = eval_loss(|g| {
            let p = const_mask(g, 2, 2, p.clone());
            let t = const_mask(g, 2, 2, t.clone());
            l1_loss(g, p, t)
        });
        assert_eq!(berhu, l1);
    }

    #[test]
    fn berhu_matches_hand_evaluation() {
        // e = [0.1, 1.0], c_frac 0.2 => c = 0.2; elementwise [0.1, 2.6].
        let v = eval_loss(|g| {
            let p = const_mask(g, 1, 2, vec![0.1, 1.0]);
            let t = const_mask(g, 1, 2, vec![0.0, 0.0]);
            berhu_loss(g, p, t, 0.2)
        });
        assert!((v - 1.35).abs() < 1e-6, "berhu {v}");
    }

    #[test]
    fn edge_loss_zero_for_constant_prediction() {
        let img = Image::new(4, 4, 1, (0..16).map(|i| i as f32 / 16.0).collect()).unwrap();
        let v = eval_loss(|g| {
            let p = const_mask(g, 4, 4, vec![2.5; 16]);
            edge_loss(g, p, &img)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn edge_loss_constant_image_passes_gradients_through() {
        // lambda = exp(0) = 1; ramp prediction has |dx| = 1, dy = 0.
        let img = Image::new(2, 3, 1, vec![0.5; 6]).unwrap();
        let v = eval_loss(|g| {
            let p = const_mask(g, 2, 3, vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
            edge_loss(g, p, &img)
        });
        assert!((v - 1.0).abs() < 1e-6, "edge {v}");
    }

    #[test]
    fn edge_loss_matches_scalar_oracle() {
        let mut rng = check_rng(5, 0);
        let h = 8;
        let w = 8;
        let pred: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..4.0)).collect();
        let img_data: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::new(h, w, 1, img_data.clone()).unwrap();

        let v = eval_loss(|g| {
            let p = const_mask(g, h, w, pred.clone());
            edge_loss(g, p, &img)
        });

        // Hand-rolled: per-axis scalar factors and mean |forward diff|.
        let at = |buf: &[f32], y: usize, x: usize| buf[y * w + x] as f64;
        let mut gx_img = 0.0;
        let mut gx_pred = 0.0;
        for y in 0..h {
            for x in 0..w - 1 {
                gx_img += (at(&img_data, y, x + 1) - at(&img_data, y, x)).abs();
                gx_pred += (at(&pred, y, x + 1) - at(&pred, y, x)).abs();
            }
        }
        let mut gy_img = 0.0;
        let mut gy_pred = 0.0;
        for y in 0..h - 1 {
            for x in 0..w {
                gy_img += (at(&img_data, y + 1, x) - at(&img_data, y, x)).abs();
                gy_pred += (at(&pred, y + 1, x) - at(&pred, y, x)).abs();
            }
        }
        let m = (h * (w - 1)) as f64;
        let expected = (-(gx_img / m)).exp() * (gx_pred / m) + (-(gy_img / m)).exp() * (gy_pred / m);
        assert!((v as f64 - expected).abs() < 1e-5, "{v} vs {expected}");
    }

    #[test]
    fn ssim_identical_masks_score_zero() {
        let data: Vec<f32> = (0..81).map(|i| (i % 5) as f32).collect();
        let v = eval_loss(|g| {
            let p = const_mask(g, 9, 9, data.clone());
            let t = const_mask(g, 9, 9, data.clone());
            ssim_loss(g, p, t, &SsimConfig::default())
        });
        assert!(v.abs() < 1e-6, "ssim loss {v}");
    }

    #[test]
    fn ssim_single_window_matches_direct_formula() {
        let mut rng = check_rng(6, 0);
        let k = 9;
        let p_data: Vec<f32> = (0..k * k).map(|_| rng.gen_range(0.0f32..4.0)).collect();
        let t_data: Vec<f32> = (0..k * k).map(|_| rng.gen_range(0.0f32..4.0)).collect();
        let cfg = SsimConfig::with_range(9, 4.0);
        let v = eval_loss(|g| {
            let p = const_mask(g, k, k, p_data.clone());
            let t = const_mask(g, k, k, t_data.clone());
            ssim_loss(g, p, t, &cfg)
        });

        let n = (k * k) as f64;
        let mean = |d: &[f32]| d.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mp = mean(&p_data);
        let mt = mean(&t_data);
        let var = |d: &[f32], m: f64| d.iter().map(|&x| x as f64 * x as f64).sum::<f64>() / n - m * m;
        let vp = var(&p_data, mp);
        let vt = var(&t_data, mt);
        let cov = p_data
            .iter()
            .zip(&t_data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>()
            / n
            - mp * mt;
        let (c1, c2) = (cfg.c1 as f64, cfg.c2 as f64);
        let ssim = ((2.0 * mp * mt + c1) * (2.0 * cov + c2))
            / ((mp * mp + mt * mt + c1) * (vp + vt + c2));
        assert!(
            (v as f64 - (1.0 - ssim)).abs() < 1e-6,
            "{v} vs {}",
            1.0 - ssim
        );
    }

    #[test]
    fn ssim_loss_rejects_small_masks() {
        let err = {
            let mut g = Graph::<f32>::new();
            let p = const_mask(&mut g, 4, 4, vec![0.0; 16]);
            let t = const_mask(&mut g, 4, 4, vec![0.0; 16]);
            ssim_loss(&mut g, p, t, &SsimConfig::default()).unwrap_err()
        };
        assert!(err.to_string().contains("at least 7"), "{err}");
    }

    #[test]
    fn combined_with_only_l1_weight_equals_l1() {
        let mut rng = check_rng(8, 0);
        let p_data: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0f32..4.0)).collect();
        let t_data: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0f32..4.0)).collect();
        let img = Image::new(8, 8, 1, vec![0.3; 64]).unwrap();
        let weights = LossWeights {
            w_edge: 0.0,
            w_ssim: 0.0,
            w_l1: 1.0,
            w_berhu: 0.0,
        };
        let combined = eval_loss(|g| {
            let p = const_mask(g, 8, 8, p_data.clone());
            let t = const_mask(g, 8, 8, t_data.clone());
            combined_loss(g, p, t, &img, &weights, &SsimConfig::default(), BERHU_C_FRAC)
        });
        let l1 = eval_loss(|g| {
            let p = const_mask(g, 8, 8, p_data.clone());
            let t = const_mask(g, 8, 8, t_data.clone());
            l1_loss(g, p, t)
        });
        assert_eq!(combined, l1);
    }

    #[test]
    fn combined_equals_sum_of_components() {
        let mut rng = check_rng(9, 0);
        let p_data: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0f32..4.0)).collect();
        let t_data: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0f32..4.0)).collect();
        let img_data: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let img = Image::new(8, 8, 1, img_data).unwrap();
        let cfg = SsimConfig::default();

        let combined = eval_loss(|g| {
            let p = const_mask(g, 8, 8, p_data.clone());
            let t = const_mask(g, 8, 8, t_data.clone());
            combined_loss(g, p, t, &img, &LossWeights::default(), &cfg, BERHU_C_FRAC)
        });

        let mut sum = 0.0f64;
        for part in 0..4 {
            let v = eval_loss(|g| {
                let p = const_mask(g, 8, 8, p_data.clone());
                let t = const_mask(g, 8, 8, t_data.clone());
                match part {
                    0 => edge_loss(g, p, &img),
                    1 => ssim_loss(g, p, t, &cfg),
                    2 => l1_loss(g, p, t),
                    _ => berhu_loss(g, p, t, BERHU_C_FRAC),
                }
            });
            sum += v as f64;
        }
        assert!(
            (combined as f64 - sum).abs() < 1e-6,
            "combined {combined} vs sum {sum}"
        );
    }

    #[test]
    fn combined_is_linear_in_weights() {
        let mut rng = check_rng(10, 0);
        let p_data: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0f32..4.0)).collect();
        let t_data: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0f32..4.0)).collect();
        let img = Image::new(8, 8, 1, vec![0.4; 64]).unwrap();
        let run = |weights: LossWeights| {
            eval_loss(|g| {
                let p = const_mask(g, 8, 8, p_data.clone());
                let t = const_mask(g, 8, 8, t_data.clone());
                combined_loss(g, p, t, &img, &weights, &SsimConfig::default(), BERHU_C_FRAC)
            })
        };
        let single = run(LossWeights::default());
        let double = run(LossWeights {
            w_edge: 2.0,
            w_ssim: 2.0,
            w_l1: 2.0,
            w_berhu: 2.0,
        });
        let rel = ((double as f64) - 2.0 * (single as f64)).abs() / (2.0 * single as f64);
        assert!(rel < 1e-6, "doubling weights: {single} -> {double}");
    }

    #[test]
    fn berhu_dominates_l1_on_random_masks() {
        let mut rng = check_rng(12, 0);
        for _ in 0..200 {
            let p_data: Vec<f32> = (0..36).map(|_| rng.gen_range(0.0f32..4.0)).collect();
            let t_data: Vec<f32> = (0..36).map(|_| rng.gen_range(0.0f32..4.0)).collect();
            let berhu = eval_loss(|g| {
                let p = const_mask(g, 6, 6, p_data.clone());
                let t = const_mask(g, 6, 6, t_data.clone());
                berhu_loss(g, p, t, BERHU_C_FRAC)
            });
            let l1 = eval_loss(|g| {
                let p = const_mask(g, 6, 6, p_data.clone());
                let t = const_mask(g, 6, 6, t_data.clone());
                l1_loss(g, p, t)
            });
            assert!(berhu >= l1, "berhu {berhu} < l1 {l1}");
        }
    }

    #[test]
    fn losses_pass_gradient_checks_away_from_kinks() {
        // Sampled so no |e| sits near 0 or near the BerHu threshold.
        let mut rng = check_rng(13, 0);
        for trial in 0..5 {
            let shape = vec![1, 1, 8, 8];
            let target = sample_tensor(&mut rng, shape.clone(), 0.0, 4.0);
            let mut pred = sample_tensor(&mut rng, shape.clone(), 0.0, 4.0);
            // Recompute berhu threshold and nudge elements off both kinks.
            loop {
                let max_e = pred
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| (p - t).abs())
                    .fold(0.0f64, f64::max);
                let c = BERHU_C_FRAC as f64 * max_e;
                let bad = pred
                    .data()
                    .iter()
                    .zip(target.data())
                    .any(|(&p, &t)| (p - t).abs() < 1e-3 || ((p - t).abs() - c).abs() < 1e-3);
                if !bad {
                    break;
                }
                pred = sample_tensor(&mut rng, shape.clone(), 0.0, 4.0);
            }
            let img_data: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            let img = Image::new(8, 8, 1, img_data).unwrap();
            let t_fixed = target.clone();
            // Freeze the data-derived threshold; it is detached in backward,
            // so the probed function must hold it fixed as well.
            let c_fixed = BERHU_C_FRAC as f64
                * pred
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| (p - t).abs())
                    .fold(0.0f64, f64::max);

            let checks: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, Var, Var) -> Result<Var>>)> = vec![
                ("l1", Box::new(|g, p, t| l1_loss(g, p, t))),
                (
                    "berhu",
                    Box::new(move |g, p, t| berhu_loss_with_threshold(g, p, t, c_fixed)),
                ),
                (
                    "ssim",
                    Box::new(|g, p, t| ssim_loss(g, p, t, &SsimConfig::default())),
                ),
                ("edge", Box::new(move |g, p, _t| edge_loss(g, p, &img))),
            ];
            for (name, build) in checks {
                let err = grad_check(
                    |g, vars| {
                        let t = g.constant(t_fixed.clone());
                        build(g, vars[0], t)
                    },
                    &[pred.clone()],
                    1e-3,
                )
                .unwrap();
                assert!(err < 1e-3, "trial {trial} {name}: max rel err {err}");
            }
        }
    }
}
