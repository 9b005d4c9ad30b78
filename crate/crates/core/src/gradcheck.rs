//! Double-precision central finite-difference checks for every backward
//! pass. Each check projects the op's output onto a random tensor `r`, so
//! the scalar under test is `<r, f(x)>` and its analytic gradient is the
//! op's backward applied to `r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{self, ModelConfig, ModelParams};
use crate::ops::{self, ConvLayerParams};
use crate::tensor::{Shape, Tensor};
use crate::wavelet::{self, SubbandStack};

pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so components whose true
/// gradient is ~0 are compared in absolute terms.
pub const DENOM_FLOOR: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub evaluated: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares `analytic` to central differences of `f` around `x`.
pub fn compare(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe);
        probe[i] = x[i] - STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * STEP);
        let e = rel_err(analytic[i], numeric);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    worst
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Uniform in ±[0.05, 1], away from the ReLU kink.
fn random_off_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.05..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn check(name: &str, tolerance: f64, errs: &[f64], evaluated: usize) -> GradCheck {
    GradCheck {
        name: name.to_string(),
        max_rel_err: errs.iter().copied().fold(0.0, f64::max),
        tolerance,
        evaluated,
    }
}

pub fn check_conv(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(Shape::new(2, 2, 4, 5), &mut rng);
    let p = ConvLayerParams {
        weights: random(Shape::new(3, 2, 3, 3), &mut rng),
        bias: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let r = random(Shape::new(2, 3, 4, 5), &mut rng);
    let g = ops::conv2d_backward(&x, &p, &r)?;

    let e_in = compare(x.data(), g.input.data(), |v| {
        let t = Tensor::from_vec(x.shape(), v.to_vec()).expect("same shape");
        dot(&r, &ops::conv2d_forward(&t, &p).expect("valid conv"))
    });
    let e_w = compare(p.weights.data(), g.weights.data(), |v| {
        let q = ConvLayerParams {
            weights: Tensor::from_vec(p.weights.shape(), v.to_vec()).expect("same shape"),
            bias: p.bias.clone(),
        };
        dot(&r, &ops::conv2d_forward(&x, &q).expect("valid conv"))
    });
    let e_b = compare(&p.bias, &g.bias, |v| {
        let q = ConvLayerParams {
            weights: p.weights.clone(),
            bias: v.to_vec(),
        };
        dot(&r, &ops::conv2d_forward(&x, &q).expect("valid conv"))
    });
    Ok(check("conv2d", OP_TOLERANCE, &[e_in, e_w, e_b], x.len() + p.num_params()))
}

pub fn check_relu(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_off_zero(Shape::new(2, 3, 4, 4), &mut rng);
    let r = random(x.shape(), &mut rng);
    let g = ops::relu_backward(&x, &r)?;
    let e = compare(x.data(), g.data(), |v| {
        let t = Tensor::from_vec(x.shape(), v.to_vec()).expect("same shape");
        dot(&r, &ops::relu_forward(&t))
    });
    Ok(check("relu", OP_TOLERANCE, &[e], x.len()))
}

pub fn check_add(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(Shape::new(2, 2, 3, 3), &mut rng);
    let b = random(a.shape(), &mut rng);
    let r = random(a.shape(), &mut rng);
    let (ga, gb) = ops::add_backward(&r);
    let e_a = compare(a.data(), ga.data(), |v| {
        let t = Tensor::from_vec(a.shape(), v.to_vec()).expect("same shape");
        dot(&r, &ops::add_forward(&t, &b).expect("same shape"))
    });
    let e_b = compare(b.data(), gb.data(), |v| {
        let t = Tensor::from_vec(b.shape(), v.to_vec()).expect("same shape");
        dot(&r, &ops::add_forward(&a, &t).expect("same shape"))
    });
    Ok(check("add", OP_TOLERANCE, &[e_a, e_b], 2 * a.len()))
}

pub fn check_mse(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = random(Shape::new(3, 1, 4, 4), &mut rng);
    let target = random(pred.shape(), &mut rng);
    let (_, g) = ops::mse_loss(&pred, &target)?;
    let e = compare(pred.data(), g.data(), |v| {
        let t = Tensor::from_vec(pred.shape(), v.to_vec()).expect("same shape");
        ops::mse_loss(&t, &target).expect("same shape").0
    });
    Ok(check("mse", OP_TOLERANCE, &[e], pred.len()))
}

pub fn check_dwt(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(Shape::new(1, 2, 4, 4), &mut rng);
    let r = random(Shape::new(1, 8, 2, 2), &mut rng);
    let g = wavelet::dwt_backward(&SubbandStack::from_tensor(r.clone())?)?;
    let e = compare(x.data(), g.data(), |v| {
        let t = Tensor::from_vec(x.shape(), v.to_vec()).expect("same shape");
        dot(&r, wavelet::dwt_forward(&t).expect("even dims").tensor())
    });
    Ok(check("dwt", OP_TOLERANCE, &[e], x.len()))
}

pub fn check_iwt(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = random(Shape::new(1, 8, 2, 2), &mut rng);
    let r = random(Shape::new(1, 2, 4, 4), &mut rng);
    let g = wavelet::iwt_backward(&r)?;
    let e = compare(s.data(), g.tensor().data(), |v| {
        let t = SubbandStack::from_tensor(Tensor::from_vec(s.shape(), v.to_vec()).expect("same shape")).expect("channels divisible by 4");
        dot(&r, &wavelet::iwt_forward(&t).expect("valid stack"))
    });
    Ok(check("iwt", OP_TOLERANCE, &[e], s.len()))
}

/// End-to-end check of every parameter of a small network against the
/// scalar MSE loss on random data.
pub fn check_model(config: &ModelConfig, height: usize, width: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ModelParams<f64> = model::build_model(config.clone(), seed)?.cast();
    for layer in &mut params.layers {
        for b in &mut layer.bias {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    let shape = Shape::new(2, config.input_channels, height, width);
    let x = Tensor::from_fn(shape, |_| rng.gen::<f64>());
    let y = Tensor::from_fn(shape, |_| rng.gen::<f64>());
    let (_, grads) = model::forward_backward(&params, &x, |out| ops::mse_loss(out, &y))?;

    let mut errs = Vec::new();
    let mut evaluated = 0;
    for (li, grad) in grads.iter().enumerate() {
        let base = params.clone();
        let loss_with = |p: &ModelParams<f64>| {
            ops::mse_loss(&model::forward(p, &x).expect("valid model"), &y)
                .expect("same shape")
                .0
        };
        let wshape = base.layers[li].weights.shape();
        errs.push(compare(base.layers[li].weights.data(), grad.weights.data(), |v| {
            let mut p = base.clone();
            p.layers[li].weights = Tensor::from_vec(wshape, v.to_vec()).expect("same shape");
            loss_with(&p)
        }));
        errs.push(compare(&base.layers[li].bias, &grad.bias, |v| {
            let mut p = base.clone();
            p.layers[li].bias = v.to_vec();
            loss_with(&p)
        }));
        evaluated += base.layers[li].num_params();
    }
    Ok(check("mwcnn end-to-end", MODEL_TOLERANCE, &errs, evaluated))
}

/// Tiny network used for the end-to-end check: 296 parameters.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        levels: 1,
        convs_per_block: 1,
        channel_schedule: vec![4],
        input_channels: 1,
        residual: false,
    }
}

/// Two-level tiny network that exercises a skip connection: 448 parameters.
pub fn tiny_skip_config() -> ModelConfig {
    ModelConfig {
        levels: 2,
        convs_per_block: 1,
        channel_schedule: vec![2, 2],
        input_channels: 1,
        residual: true,
    }
}

/// Runs every op check over `seeds` and the end-to-end model checks.
pub fn full_suite(seeds: std::ops::Range<u64>) -> Result<Vec<GradCheck>> {
    type OpCheck = fn(u64) -> Result<GradCheck>;
    let ops: [OpCheck; 6] = [check_conv, check_relu, check_add, check_mse, check_dwt, check_iwt];
    let mut out = Vec::new();
    for op in ops {
        let mut worst: Option<GradCheck> = None;
        for seed in seeds.clone() {
            let c = op(seed)?;
            worst = Some(match worst {
                Some(w) if w.max_rel_err >= c.max_rel_err => GradCheck {
                    evaluated: w.evaluated + c.evaluated,
                    ..w
                },
                Some(w) => GradCheck {
                    evaluated: w.evaluated + c.evaluated,
                    ..c
                },
                None => c,
            });
        }
        out.extend(worst);
    }
    out.push(check_model(&tiny_config(), 4, 4, seeds.start)?);
    let mut skip = check_model(&tiny_skip_config(), 8, 8, seeds.start)?;
    skip.name = "mwcnn end-to-end (skip, residual)".into();
    out.push(skip);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_configs_fit_budget() {
        assert_eq!(tiny_config().num_params(), 296);
        assert_eq!(tiny_skip_config().num_params(), 448);
    }

    #[test]
    fn op_checks_pass_on_twenty_seeds() {
        for seed in 0..20 {
            for c in [
                check_conv(seed).unwrap(),
                check_relu(seed).unwrap(),
                check_add(seed).unwrap(),
                check_mse(seed).unwrap(),
                check_dwt(seed).unwrap(),
                check_iwt(seed).unwrap(),
            ] {
                assert!(c.passed(), "{} seed {seed}: {}", c.name, c.max_rel_err);
            }
        }
    }

    #[test]
    fn model_checks_pass() {
        for seed in 0..3 {
            let c = check_model(&tiny_config(), 4, 4, seed).unwrap();
            assert!(c.passed(), "seed {seed}: {}", c.max_rel_err);
            let c = check_model(&tiny_skip_config(), 8, 8, seed).unwrap();
            assert!(c.passed(), "skip seed {seed}: {}", c.max_rel_err);
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = [0.5, -1.0];
        let e = compare(&x, &[1.0, 2.0], |v| v[0] * v[0] + v[1]);
        assert!(e > 0.1);
    }
}
