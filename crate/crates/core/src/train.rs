//! Supervised training: per-image normalization, seeded train/test split,
//! ADAM, and the epoch loop over shuffled mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{self, ModelParams, ParamGradients};
use crate::ops;
use crate::tensor::{Scalar, Shape, Tensor};

/// Multiplies the learning rate by `factor` every `every_epochs` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub every_epochs: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub split_fraction: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub lr_decay: Option<StepDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.024e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 256,
            batch_size: 8,
            split_fraction: 0.85,
            seed: 0,
            checkpoint_every: 0,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must be in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if self.adam_epsilon <= 0.0 {
            return Err(Error::Config("adam_epsilon must be > 0".into()));
        }
        if let Some(d) = self.lr_decay {
            if d.every_epochs == 0 || d.factor <= 0.0 {
                return Err(Error::Config("lr decay needs every_epochs >= 1 and factor > 0".into()));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi(((epoch - 1) / d.every_epochs) as i32),
            None => self.learning_rate,
        }
    }
}

/// Rescales to `[0, 1]` by the image's own min and max. A constant image
/// maps to all zeros.
pub fn normalize(image: &Image) -> Image {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return image.map(|_| 0.0);
    }
    let range = hi - lo;
    image.map(|v| (v - lo) / range)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub noisy: Image,
    pub clean: Image,
    pub label: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedDataset {
    pub pairs: Vec<Pair>,
}

impl PairedDataset {
    pub fn new(pairs: Vec<Pair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if !p.noisy.same_dims(&p.clean) {
                return Err(Error::shape(
                    "paired dataset",
                    format!("{}x{}", p.clean.height(), p.clean.width()),
                    format!("pair {i}: {}x{}", p.noisy.height(), p.noisy.width()),
                ));
            }
            if !p.noisy.is_finite() || !p.clean.is_finite() {
                return Err(Error::Format(format!("pair {i} has non-finite pixels")));
            }
        }
        Ok(PairedDataset { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Both images of every pair normalized by their own range.
    pub fn normalized(&self) -> PairedDataset {
        PairedDataset {
            pairs: self
                .pairs
                .iter()
                .map(|p| Pair {
                    noisy: normalize(&p.noisy),
                    clean: normalize(&p.clean),
                    label: p.label.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: PairedDataset,
    pub test: PairedDataset,
    /// Set when one side of the split came out empty.
    pub warning: Option<String>,
}

/// Seeded shuffle, then the first `round(fraction * n)` pairs train.
pub fn split(dataset: &PairedDataset, fraction: f64, seed: u64) -> Result<Split> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let order = split_order(dataset.len(), seed);
    let n_train = ((fraction * dataset.len() as f64).round() as usize).clamp(1, dataset.len());
    let pick = |idx: &[usize]| PairedDataset {
        pairs: idx.iter().map(|&i| dataset.pairs[i].clone()).collect(),
    };
    let train = pick(&order[..n_train]);
    let test = pick(&order[n_train..]);
    let warning = test
        .is_empty()
        .then(|| format!("test split is empty ({} pair(s), fraction {fraction})", dataset.len()));
    Ok(Split { train, test, warning })
}

/// The permutation [`split`] uses.
pub fn split_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// First and second moment accumulators mirroring the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            lr: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            epsilon: c.adam_epsilon,
        }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let sizes: Vec<usize> = params.layers.iter().flat_map(|l| [l.weights.len(), l.bias.len()]).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }
}

/// One ADAM update of a flat parameter slice at (already incremented) step `t`.
pub fn adam_update<T: Scalar>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, h: &AdamHyper) {
    let b1 = T::from_f64_lossy(h.beta1);
    let b2 = T::from_f64_lossy(h.beta2);
    let one = T::one();
    let lr = T::from_f64_lossy(h.lr);
    let eps = T::from_f64_lossy(h.epsilon);
    let c1 = one - T::from_f64_lossy(h.beta1.powi(t as i32));
    let c2 = one - T::from_f64_lossy(h.beta2.powi(t as i32));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ParamGradients<T>,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.layers.len() || state.m.len() != 2 * params.layers.len() {
        return Err(Error::shape("adam_step", params.layers.len(), grads.len()));
    }
    state.t += 1;
    let t = state.t;
    for (i, (layer, grad)) in params.layers.iter_mut().zip(grads).enumerate() {
        if layer.weights.shape() != grad.weights.shape() || layer.bias.len() != grad.bias.len() {
            return Err(Error::shape("adam_step", layer.weights.shape(), grad.weights.shape()));
        }
        let (mw, rest) = state.m[2 * i..].split_at_mut(1);
        let (vw, vrest) = state.v[2 * i..].split_at_mut(1);
        adam_update(layer.weights.data_mut(), grad.weights.data(), &mut mw[0], &mut vw[0], t, hyper);
        adam_update(&mut layer.bias, &grad.bias, &mut rest[0], &mut vrest[0], t, hyper);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    /// `None` when the test split is empty.
    pub test: Option<f64>,
}

pub fn loss_log_csv(log: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,mean_train_loss,mean_test_loss\n");
    for e in log {
        let test = e.test.map(|v| format!("{v:.9e}")).unwrap_or_default();
        s.push_str(&format!("{},{:.9e},{}\n", e.epoch, e.train, test));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<EpochLoss>,
    pub split: Split,
}

fn batch_tensors(pairs: &[&Pair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = &pairs[0].noisy;
    let shape = Shape::new(pairs.len(), 1, first.height(), first.width());
    let mut x = Vec::with_capacity(shape.len());
    let mut y = Vec::with_capacity(shape.len());
    for p in pairs {
        if !p.noisy.same_dims(first) {
            return Err(Error::shape(
                "batch",
                format!("{}x{}", first.height(), first.width()),
                format!("{}x{}", p.noisy.height(), p.noisy.width()),
            ));
        }
        x.extend_from_slice(p.noisy.data());
        y.extend_from_slice(p.clean.data());
    }
    Ok((Tensor::from_vec(shape, x)?, Tensor::from_vec(shape, y)?))
}

/// Mean per-sample loss of `params` over `data`, evaluated in batches.
pub fn evaluate_loss(params: &ModelParams<f32>, data: &PairedDataset, batch_size: usize) -> Result<Option<f64>> {
    if data.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&Pair> = data.pairs.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, y) = batch_tensors(chunk)?;
        let out = model::forward(params, &x)?;
        let (loss, _) = ops::mse_loss(&out, &y)?;
        total += f64::from(loss) * chunk.len() as f64;
    }
    Ok(Some(total / data.len() as f64))
}

pub fn train(params: ModelParams<f32>, dataset: &PairedDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(params, dataset, config, |_, _| Ok(()))
}

/// Splits `dataset`, then runs `config.epochs` epochs of shuffled
/// mini-batch ADAM on the training part. `on_checkpoint` is called with the
/// epoch number and current parameters every `checkpoint_every` epochs.
///
/// Images are expected to be normalized already.
pub fn train_with(
    mut params: ModelParams<f32>,
    dataset: &PairedDataset,
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &ModelParams<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    params.shape_walk()?;
    let split = split(dataset, config.split_fraction, config.seed)?;
    for p in split.train.pairs.iter().chain(&split.test.pairs) {
        params.config.check_input(Shape::new(1, 1, p.noisy.height(), p.noisy.width()))?;
    }

    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0005_eed0_fba7_c4e5);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let hyper = AdamHyper {
            lr: config.lr_at(epoch),
            ..AdamHyper::from(config)
        };
        let mut total = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let pairs: Vec<&Pair> = idx.iter().map(|&i| &split.train.pairs[i]).collect();
            let (x, y) = batch_tensors(&pairs)?;
            let (loss, grads) = model::forward_backward(&params, &x, |out| ops::mse_loss(out, &y))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            total += f64::from(loss) * pairs.len() as f64;
            adam_step(&mut params, &grads, &mut state, &hyper)?;
        }
        let test = evaluate_loss(&params, &split.test, config.batch_size)?;
        log.push(EpochLoss {
            epoch,
            train: total / split.train.len() as f64,
            test,
        });
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            on_checkpoint(epoch, &params)?;
        }
    }
    Ok(TrainOutcome { params, log, split })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use rand::Rng;

    fn row(values: &[f32]) -> Image {
        Image::new(1, values.len(), 0.1, values.to_vec()).unwrap()
    }

    fn toy_dataset(n: usize) -> PairedDataset {
        let pairs = (0..n)
            .map(|i| Pair {
                noisy: Image::new(4, 4, 0.1, vec![i as f32; 16]).unwrap(),
                clean: Image::new(4, 4, 0.1, vec![i as f32; 16]).unwrap(),
                label: format!("p{i}"),
            })
            .collect();
        PairedDataset::new(pairs).unwrap()
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize(&row(&[0.0, 5.0, 10.0])).data(), &[0.0, 0.5, 1.0]);
        assert_eq!(normalize(&row(&[3.0, 3.0, 3.0])).data(), &[0.0, 0.0, 0.0]);
        let unit = row(&[0.0, 0.25, 1.0, 0.5]);
        assert_eq!(normalize(&unit), unit);
        let once = normalize(&row(&[-2.0, 7.0, 1.5]));
        assert_eq!(normalize(&once), once);
    }

    #[test]
    fn split_partitions() {
        let d = toy_dataset(100);
        let s = split(&d, 0.85, 7).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (85, 15));
        assert!(s.warning.is_none());
        let mut labels: Vec<String> = s.train.pairs.iter().chain(&s.test.pairs).map(|p| p.label.clone()).collect();
        labels.sort();
        let mut want: Vec<String> = d.pairs.iter().map(|p| p.label.clone()).collect();
        want.sort();
        assert_eq!(labels, want);

        assert_eq!(split(&d, 0.85, 7).unwrap(), s);
        assert_ne!(split_order(100, 7), split_order(100, 8));
    }

    #[test]
    fn split_edge_cases() {
        let s = split(&toy_dataset(1), 0.85, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 0));
        assert!(s.warning.is_some());
        assert!(matches!(split(&PairedDataset::default(), 0.85, 0), Err(Error::EmptyDataset)));
        assert!(split(&toy_dataset(3), 1.0, 0).is_err());
    }

    #[test]
    fn dataset_rejects_mismatched_pairs() {
        let p = Pair {
            noisy: row(&[1.0, 2.0]),
            clean: row(&[1.0]),
            label: String::new(),
        };
        assert!(PairedDataset::new(vec![p]).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let p = build_model(ModelConfig::desk(), 1).unwrap();
        let mut q = p.clone();
        let mut state = AdamState::new(&q);
        let grads = q.zero_grads();
        adam_step(&mut q, &grads, &mut state, &AdamHyper::from(&TrainConfig::default())).unwrap();
        assert_eq!(p, q);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_single_step() {
        let h = AdamHyper {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let (mut p, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &h);
        // m_hat = v_hat = 1
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - want).abs() < 1e-12);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let h = AdamHyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut p, mut m, mut v) = ([0.3f64], [0.0], [0.0]);
        let (mut theta, mut mm, mut vv) = (0.3f64, 0.0f64, 0.0f64);
        for t in 1..=100u64 {
            let g: f64 = rng.gen_range(-2.0..2.0);
            adam_update(&mut p, &[g], &mut m, &mut v, t, &h);
            mm = 0.9 * mm + 0.1 * g;
            vv = 0.999 * vv + 0.001 * g * g;
            let mh = mm / (1.0 - 0.9f64.powi(t as i32));
            let vh = vv / (1.0 - 0.999f64.powi(t as i32));
            theta -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - theta).abs() <= 1e-12 * theta.abs().max(1.0));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let cfg = ModelConfig {
            levels: 1,
            convs_per_block: 1,
            channel_schedule: vec![4],
            input_channels: 1,
            residual: false,
        };
        let p = build_model(cfg, 2).unwrap();
        let data = toy_dataset(5).normalized();
        let tc = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train(p.clone(), &data, &tc).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pairs = (0..6)
            .map(|i| {
                let clean = Image::new(8, 8, 0.1, (0..64).map(|_| rng.gen::<f32>()).collect()).unwrap();
                let noisy = clean.map(|v| v * 0.5 + 0.1);
                Pair {
                    noisy,
                    clean,
                    label: i.to_string(),
                }
            })
            .collect();
        let data = PairedDataset::new(pairs).unwrap().normalized();
        let tc = TrainConfig {
            epochs: 4,
            batch_size: 2,
            learning_rate: 1e-3,
            checkpoint_every: 2,
            ..TrainConfig::default()
        };
        let p = build_model(ModelConfig::desk(), 3).unwrap();
        let mut seen = Vec::new();
        let a = train_with(p.clone(), &data, &tc, |e, _| {
            seen.push(e);
            Ok(())
        })
        .unwrap();
        let b = train(p, &data, &tc).unwrap();
        assert_eq!(seen, vec![2, 4]);
        assert_eq!(a.params, b.params);
        assert_eq!(loss_log_csv(&a.log), loss_log_csv(&b.log));
        assert!(a.log.iter().all(|e| e.train.is_finite() && e.test.is_some()));
    }

    #[test]
    fn identity_task_loss_trends_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = (0..8)
            .map(|i| {
                let clean = Image::new(8, 8, 0.1, (0..64).map(|_| rng.gen::<f32>()).collect()).unwrap();
                Pair {
                    noisy: clean.clone(),
                    clean,
                    label: i.to_string(),
                }
            })
            .collect();
        let data = PairedDataset::new(pairs).unwrap().normalized();
        let tc = TrainConfig {
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut cfg = ModelConfig::desk();
        cfg.channel_schedule = vec![8, 16];
        let out = train(build_model(cfg, 5).unwrap(), &data, &tc).unwrap();
        let first = out.log[0].train;
        let last = out.log.last().unwrap().train;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn lr_decay_schedule() {
        let tc = TrainConfig {
            learning_rate: 1.0,
            lr_decay: Some(StepDecay {
                every_epochs: 10,
                factor: 0.5,
            }),
            ..TrainConfig::default()
        };
        assert_eq!(tc.lr_at(1), 1.0);
        assert_eq!(tc.lr_at(10), 1.0);
        assert_eq!(tc.lr_at(11), 0.5);
        assert_eq!(tc.lr_at(25), 0.25);
    }
}
