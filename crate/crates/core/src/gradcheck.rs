//! Central finite-difference verification of analytic gradients.
//!
//! Checks run at `f64`, instantiating the same generic kernels the `f32`
//! training path uses; at `f32` the difference quotient itself drowns in
//! rounding noise long before it says anything about the backward formulas.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative-error floor; below this magnitude differences count as zero.
pub const ABS_FLOOR: f64 = 1e-8;

/// Compare analytic gradients of `builder`'s scalar output against central
/// finite differences. Returns the maximum relative error over every element
/// of every input.
pub fn grad_check<F>(builder: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "grad_check: eps must be positive, got {eps}"
        )));
    }

    // Analytic pass.
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().requires_grad(true)))
        .collect();
    let loss = builder(&mut g, &vars)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::InvalidArgument(
            "grad_check: builder must produce a scalar".to_string(),
        ));
    }
    if !g.item(loss).is_finite() {
        return Err(Error::NonFinite("grad_check forward value".to_string()));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| grads.get(*v).expect("input gradient").data().to_vec())
        .collect();

    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = points.iter().map(|t| g.constant(t.clone())).collect();
        let loss = builder(&mut g, &vars)?;
        let v = g.item(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check probe value".to_string()));
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j];
            probe[i].data_mut()[j] = x + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = x - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = x;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite("grad_check gradient".to_string()));
            }
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(ABS_FLOOR);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Outcome of one named gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Uniform sample in `[lo, hi)`.
pub fn sample_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("sampled tensor")
}

/// Uniform sample in `[lo, hi)` with every element kept at least `margin`
/// away from each value in `kinks`; finite differences are invalid at
/// non-smooth points, so samples landing near one are redrawn.
pub fn sample_tensor_avoiding(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
    kinks: &[f64],
    margin: f64,
) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| loop {
            let x = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (x - k).abs() >= margin) {
                break x;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("sampled tensor")
}

/// Redraw 2x2 pool windows until the two largest entries are separated,
/// keeping max-pool differentiable at the sample point.
pub fn sample_pool_input(rng: &mut ChaCha8Rng, shape: Vec<usize>, margin: f64) -> Tensor<f64> {
    assert_eq!(shape.len(), 4);
    let (h, w) = (shape[2], shape[3]);
    assert!(h % 2 == 0 && w % 2 == 0);
    let mut t = sample_tensor(rng, shape.clone(), -1.0, 1.0);
    let planes = shape[0] * shape[1];
    for nc in 0..planes {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                loop {
                    let base = nc * h * w + 2 * oy * w + 2 * ox;
                    let idx = [base, base + 1, base + w, base + w + 1];
                    let mut vals: Vec<f64> = idx.iter().map(|&i| t.data()[i]).collect();
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals[0] - vals[1] >= margin {
                        break;
                    }
                    for &i in &idx {
                        t.data_mut()[i] = rng.gen_range(-1.0..1.0);
                    }
                }
            }
        }
    }
    t
}

/// Deterministic RNG for a named check within a seeded suite.
pub fn check_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

// ── Standard verification suite ─────────────────────────────────────────

/// Margin kept between sampled points and the nearest non-smooth point;
/// must exceed the probe step.
const KINK_MARGIN: f64 = 5e-3;
const SUITE_EPS: f64 = 1e-3;
const SUITE_TOL: f64 = 1e-3;
const TRIALS: usize = 10;

/// Gradient-check every differentiable primitive and all four losses
/// (10 seeded trials each, inputs up to 2x4x8x8), plus an end-to-end check
/// of a tiny network under L1.
pub fn standard_suite(seed: u64) -> Result<Vec<CheckReport>> {
    use crate::graph::Op;
    use crate::grid::Image;
    use crate::losses;
    use crate::model::{build_unet_graph, ModelConfig};
    use crate::ops::PadMode;

    let mut reports = Vec::new();
    let mut salt = 0u64;
    let mut next_rng = || {
        salt += 1;
        check_rng(seed, salt)
    };

    // Elementwise binary primitives.
    for (name, op) in [
        ("primitive.add", Op::Add),
        ("primitive.sub", Op::Sub),
        ("primitive.mul", Op::Mul),
    ] {
        let mut worst = 0.0f64;
        for _ in 0..TRIALS {
            let mut rng = next_rng();
            let a = sample_tensor(&mut rng, vec![2, 4, 8, 8], -2.0, 2.0);
            let b = sample_tensor(&mut rng, vec![2, 4, 8, 8], -2.0, 2.0);
            let op = op.clone();
            let err = grad_check(
                move |g, v| {
                    let out = g.apply(op.clone(), &[v[0], v[1]])?;
                    let sq = g.square(out)?;
                    g.mean(sq)
                },
                &[a, b],
                SUITE_EPS,
            )?;
            worst = worst.max(err);
        }
        reports.push(CheckReport {
            name: name.to_string(),
            max_rel_err: worst,
            tolerance: SUITE_TOL,
        });
    }

    // Division: denominators kept away from zero.
    reports.push(run_trials("primitive.div", TRIALS, &mut next_rng, |rng| {
        let a = sample_tensor(rng, vec![2, 4, 8, 8], -2.0, 2.0);
        let b = sample_tensor_avoiding(rng, vec![2, 4, 8, 8], -2.0, 2.0, &[0.0], 0.5);
        (
            vec![a, b],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| {
                let out = g.div(v[0], v[1])?;
                g.mean(out)
            }),
        )
    })?);

    reports.push(run_trials("primitive.scalar_mul", TRIALS, &mut next_rng, |rng| {
        let a = sample_tensor(rng, vec![2, 4, 8, 8], -2.0, 2.0);
        (
            vec![a],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| {
                let out = g.scalar_mul(v[0], 1.7)?;
                let sq = g.square(out)?;
                g.mean(sq)
            }),
        )
    })?);

    // Unary primitives with kinks sampled away from the kink.
    let unary: Vec<(&str, Vec<f64>, (f64, f64), Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>)> = vec![
        ("primitive.relu", vec![0.0], (-2.0, 2.0), Box::new(|g, x| g.relu(x))),
        ("primitive.abs", vec![0.0], (-2.0, 2.0), Box::new(|g, x| g.abs(x))),
        ("primitive.square", vec![], (-2.0, 2.0), Box::new(|g, x| g.square(x))),
        ("primitive.sqrt", vec![], (0.25, 4.0), Box::new(|g, x| g.sqrt(x))),
        ("primitive.exp", vec![], (-2.0, 2.0), Box::new(|g, x| g.exp(x))),
        (
            "primitive.clamp",
            vec![-0.5, 0.5],
            (-2.0, 2.0),
            Box::new(|g, x| g.clamp(x, -0.5, 0.5)),
        ),
    ];
    for (name, kinks, (lo, hi), build) in unary {
        let mut worst = 0.0f64;
        for _ in 0..TRIALS {
            let mut rng = next_rng();
            let x = sample_tensor_avoiding(&mut rng, vec![2, 4, 8, 8], lo, hi, &kinks, KINK_MARGIN);
            let err = grad_check(
                |g, v| {
                    let out = build(g, v[0])?;
                    g.mean(out)
                },
                &[x],
                SUITE_EPS,
            )?;
            worst = worst.max(err);
        }
        reports.push(CheckReport {
            name: name.to_string(),
            max_rel_err: worst,
            tolerance: SUITE_TOL,
        });
    }

    // Convolution variants exercise stride, both pad modes and the bias path.
    for (name, stride, padding, mode) in [
        ("primitive.conv2d_s1_zero", 1usize, 1usize, PadMode::Zero),
        ("primitive.conv2d_s2_zero", 2, 1, PadMode::Zero),
        ("primitive.conv2d_s1_reflect", 1, 2, PadMode::Reflect),
    ] {
        reports.push(run_trials(name, TRIALS, &mut next_rng, |rng| {
            let x = sample_tensor(rng, vec![1, 2, 8, 8], -1.0, 1.0);
            let w = sample_tensor(rng, vec![4, 2, 3, 3], -0.5, 0.5);
            let b = sample_tensor(rng, vec![4], -0.5, 0.5);
            (
                vec![x, w, b],
                Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                    let out = g.conv2d(v[0], v[1], Some(v[2]), stride, padding, mode)?;
                    g.mean(out)
                }),
            )
        })?);
    }

    reports.push(run_trials("primitive.max_pool2", TRIALS, &mut next_rng, |rng| {
        let x = sample_pool_input(rng, vec![2, 2, 8, 8], KINK_MARGIN);
        (
            vec![x],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| {
                let out = g.max_pool2(v[0])?;
                g.mean(out)
            }),
        )
    })?);

    reports.push(run_trials("primitive.upsample2", TRIALS, &mut next_rng, |rng| {
        let x = sample_tensor(rng, vec![2, 2, 4, 4], -2.0, 2.0);
        (
            vec![x],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| {
                let out = g.upsample2(v[0])?;
                let sq = g.square(out)?;
                g.mean(sq)
            }),
        )
    })?);

    reports.push(run_trials("primitive.concat_channels", TRIALS, &mut next_rng, |rng| {
        let a = sample_tensor(rng, vec![1, 2, 4, 4], -2.0, 2.0);
        let b = sample_tensor(rng, vec![1, 3, 4, 4], -2.0, 2.0);
        (
            vec![a, b],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| {
                let out = g.concat_channels(v[0], v[1])?;
                let sq = g.square(out)?;
                g.mean(sq)
            }),
        )
    })?);

    reports.push(run_trials("primitive.mean", TRIALS, &mut next_rng, |rng| {
        let x = sample_tensor(rng, vec![2, 4, 8, 8], -2.0, 2.0);
        (
            vec![x],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.mean(v[0])),
        )
    })?);

    // The four losses, sampled away from their kinks.
    reports.push(run_trials("loss.l1", TRIALS, &mut next_rng, |rng| {
        let (pred, target) = loss_pair(rng, 0.0);
        let t = target.clone();
        (
            vec![pred],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let tv = g.constant(t.clone());
                losses::l1_loss(g, v[0], tv)
            }),
        )
    })?);

    reports.push(run_trials("loss.berhu", TRIALS, &mut next_rng, |rng| {
        let (pred, target) = loss_pair(rng, losses::BERHU_C_FRAC as f64);
        let c = losses::BERHU_C_FRAC as f64
            * pred
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| (p - t).abs())
                .fold(0.0f64, f64::max);
        let t = target.clone();
        (
            vec![pred],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let tv = g.constant(t.clone());
                losses::berhu_loss_with_threshold(g, v[0], tv, c)
            }),
        )
    })?);

    reports.push(run_trials("loss.ssim", TRIALS, &mut next_rng, |rng| {
        let pred = sample_tensor(rng, vec![1, 1, 8, 8], 0.0, 4.0);
        let target = sample_tensor(rng, vec![1, 1, 8, 8], 0.0, 4.0);
        let t = target.clone();
        (
            vec![pred],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let tv = g.constant(t.clone());
                losses::ssim_loss(g, v[0], tv, &losses::SsimConfig::default())
            }),
        )
    })?);

    reports.push(run_trials("loss.edge", TRIALS, &mut next_rng, |rng| {
        let pred = sample_tensor(rng, vec![1, 1, 8, 8], 0.0, 4.0);
        let img_data: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0) as f32).collect();
        let image = Image::new(8, 8, 1, img_data).expect("image");
        // Forward differences of the prediction must stay off zero.
        let mut pred = pred;
        loop {
            let d = pred.data();
            let near = (0..8)
                .flat_map(|y| (0..7).map(move |x| (y, x)))
                .any(|(y, x)| (d[y * 8 + x + 1] - d[y * 8 + x]).abs() < KINK_MARGIN)
                || (0..7)
                    .flat_map(|y| (0..8).map(move |x| (y, x)))
                    .any(|(y, x)| (d[(y + 1) * 8 + x] - d[y * 8 + x]).abs() < KINK_MARGIN);
            if !near {
                break;
            }
            pred = sample_tensor(rng, vec![1, 1, 8, 8], 0.0, 4.0);
        }
        (
            vec![pred],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| losses::edge_loss(g, v[0], &image)),
        )
    })?);

    // End-to-end tiny network. At eps 1e-5 kink-crossing windows are narrow;
    // a trial that still lands near a network kink is redrawn (up to 3
    // sub-seeds) since finite differences are invalid there.
    {
        let cfg = ModelConfig {
            levels: 1,
            base_channels: 2,
            in_channels: 1,
            out_channels: 1,
            seed,
        };
        let mut best = f64::INFINITY;
        for attempt in 0..3 {
            let mut rng = check_rng(seed, 1000 + attempt);
            let inputs: Vec<Tensor<f64>> = cfg
                .param_specs()
                .iter()
                .map(|(_, shape)| {
                    if shape.len() == 4 {
                        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                        let std = (2.0 / fan_in).sqrt();
                        sample_tensor(&mut rng, shape.clone(), -std, std)
                    } else {
                        sample_tensor(&mut rng, shape.clone(), -0.05, 0.05)
                    }
                })
                .collect();
            let image = sample_tensor(&mut rng, vec![1, 1, 8, 8], 0.0, 1.0);
            let target = sample_tensor(&mut rng, vec![1, 1, 8, 8], 0.0, 4.0);
            let err = grad_check(
                |g, vars| {
                    let image = g.constant(image.clone());
                    let out = build_unet_graph(g, &cfg, image, vars)?;
                    let t = g.constant(target.clone());
                    losses::l1_loss(g, out, t)
                },
                &inputs,
                1e-5,
            )?;
            best = best.min(err);
            if best < 1e-2 {
                break;
            }
        }
        reports.push(CheckReport {
            name: "model.tiny_unet_e2e".to_string(),
            max_rel_err: best,
            tolerance: 1e-2,
        });
    }

    Ok(reports)
}

type TrialBuilder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn run_trials(
    name: &str,
    trials: usize,
    next_rng: &mut impl FnMut() -> ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, TrialBuilder),
) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut rng = next_rng();
        let (inputs, builder) = make(&mut rng);
        let err = grad_check(|g, v| builder(g, v), &inputs, SUITE_EPS)?;
        worst = worst.max(err);
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: SUITE_TOL,
    })
}

/// Prediction/target pair in class units with every |error| kept away from
/// zero and, when `c_frac > 0`, away from the BerHu threshold.
fn loss_pair(rng: &mut ChaCha8Rng, c_frac: f64) -> (Tensor<f64>, Tensor<f64>) {
    let shape = vec![1, 1, 8, 8];
    let target = sample_tensor(rng, shape.clone(), 0.0, 4.0);
    loop {
        let pred = sample_tensor(rng, shape.clone(), 0.0, 4.0);
        let abs_e: Vec<f64> = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t).abs())
            .collect();
        let max_e = abs_e.iter().copied().fold(0.0f64, f64::max);
        let c = c_frac * max_e;
        let bad = abs_e
            .iter()
            .any(|&e| e < KINK_MARGIN || (c_frac > 0.0 && (e - c).abs() < KINK_MARGIN));
        if !bad {
            return (pred, target);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_squares_checks_tightly() {
        let mut rng = check_rng(7, 0);
        let x = sample_tensor(&mut rng, vec![2, 4, 4], 0.5, 1.5);
        let err = grad_check(
            |g, vars| {
                let sq = g.square(vars[0])?;
                g.mean(sq)
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn constant_builder_reports_zero_error() {
        let mut rng = check_rng(7, 1);
        let x = sample_tensor(&mut rng, vec![3], -1.0, 1.0);
        let err = grad_check(
            |g, _vars| Ok(g.constant(Tensor::scalar(1.25))),
            &[x],
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::<f64>::zeros(vec![1]);
        assert!(grad_check(|g, v| Ok(v[0]).map(|x| x).and_then(|x| g.mean(x)), &[x], 0.0).is_err());
    }
}
