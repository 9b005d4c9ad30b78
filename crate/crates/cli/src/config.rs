//! `key = value` run configuration read by `train` (and by `gen` for the
//! manifest path).
//!
//! Blank lines and `#` comments are ignored, unknown or repeated keys are
//! errors, and every key may be omitted. [`KEYS`] lists the defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pawave::model::ModelConfig;
use pawave::train::{StepDecay, TrainConfig};

use crate::error::{CliError, CliResult};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("levels", "3", "wavelet levels of the network"),
    ("convs_per_block", "3", "3x3 convolutions per contracting/expanding block"),
    ("channel_schedule", "64,256,1024", "feature width of each level, comma separated"),
    ("input_channels", "1", "image channels"),
    ("residual", "false", "add the input to the network output"),
    ("learning_rate", "1.024e-4", "ADAM step size"),
    ("adam_beta1", "0.9", "ADAM first-moment decay"),
    ("adam_beta2", "0.999", "ADAM second-moment decay"),
    ("adam_epsilon", "1e-8", "ADAM denominator guard"),
    ("epochs", "256", "training epochs"),
    ("batch_size", "8", "pairs per minibatch"),
    ("split_fraction", "0.85", "fraction of pairs used for training, rest held out"),
    ("seed", "0", "weight init and shuffling seed (overridden by --seed)"),
    ("checkpoint_every", "0", "also save a checkpoint every N epochs, 0 disables"),
    (
        "lr_decay_every",
        "0",
        "multiply the learning rate by lr_decay_factor every N epochs, 0 disables",
    ),
    ("lr_decay_factor", "0.5", "learning rate decay factor"),
    ("manifest", "", "dataset manifest to build pairs from, relative to this file"),
    (
        "dataset",
        "",
        "directory written by `gen` (pairs.csv + images), relative to this file",
    ),
    ("checkpoint", "model.mwck", "final checkpoint path, relative to --out-dir"),
    ("loss_csv", "loss.csv", "per-epoch loss log, relative to --out-dir"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("defaults parse")
    }
}

fn bad(line: usize, msg: impl Into<String>) -> CliError {
    CliError::Usage(format!("config line {line}: {}", msg.into()))
}

impl RunConfig {
    /// Parses config text. Relative input paths are kept as written.
    pub fn parse(text: &str) -> CliResult<RunConfig> {
        let mut given: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(i + 1, format!("expected key = value, found {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(name, _, _)| *name == k) {
                return Err(bad(i + 1, format!("unknown key {k:?}")));
            }
            if given.insert(k, (i + 1, v)).is_some() {
                return Err(bad(i + 1, format!("duplicate key {k:?}")));
            }
        }

        let get = |k: &str| -> (usize, &str) {
            given
                .get(k)
                .copied()
                .unwrap_or_else(|| (0, KEYS.iter().find(|(n, _, _)| *n == k).map(|(_, d, _)| *d).unwrap_or("")))
        };
        fn num<T: std::str::FromStr>(k: &str, (line, v): (usize, &str)) -> CliResult<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| bad(line, format!("{k} = {v:?}: {e}")))
        }
        let flag = |k: &str| -> CliResult<bool> {
            let (line, v) = get(k);
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(bad(line, format!("{k} = {v:?}: expected true or false"))),
            }
        };
        let path = |k: &str| {
            let (_, v) = get(k);
            (!v.is_empty()).then(|| PathBuf::from(v))
        };

        let (sched_line, sched) = get("channel_schedule");
        let channel_schedule = sched
            .split(',')
            .map(|w| num("channel_schedule", (sched_line, w.trim())))
            .collect::<CliResult<Vec<usize>>>()?;
        let model = ModelConfig {
            levels: num("levels", get("levels"))?,
            convs_per_block: num("convs_per_block", get("convs_per_block"))?,
            channel_schedule,
            input_channels: num("input_channels", get("input_channels"))?,
            residual: flag("residual")?,
        };
        let decay_every: usize = num("lr_decay_every", get("lr_decay_every"))?;
        let decay_factor: f64 = num("lr_decay_factor", get("lr_decay_factor"))?;
        let train = TrainConfig {
            learning_rate: num("learning_rate", get("learning_rate"))?,
            adam_beta1: num("adam_beta1", get("adam_beta1"))?,
            adam_beta2: num("adam_beta2", get("adam_beta2"))?,
            adam_epsilon: num("adam_epsilon", get("adam_epsilon"))?,
            epochs: num("epochs", get("epochs"))?,
            batch_size: num("batch_size", get("batch_size"))?,
            split_fraction: num("split_fraction", get("split_fraction"))?,
            seed: num("seed", get("seed"))?,
            checkpoint_every: num("checkpoint_every", get("checkpoint_every"))?,
            lr_decay: (decay_every > 0).then_some(StepDecay {
                every_epochs: decay_every,
                factor: decay_factor,
            }),
        };

        let cfg = RunConfig {
            model,
            train,
            manifest: path("manifest"),
            dataset: path("dataset"),
            checkpoint: path("checkpoint").unwrap_or_default(),
            loss_csv: path("loss_csv").unwrap_or_default(),
        };
        if cfg.manifest.is_some() && cfg.dataset.is_some() {
            return Err(CliError::Usage("config sets both manifest and dataset; pick one".into()));
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative `manifest`/`dataset` paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.dataset].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// A commented config listing every key at its default.
    pub fn defaults_text() -> String {
        let mut s = String::new();
        for (k, d, doc) in KEYS {
            s.push_str(&format!("# {doc}\n"));
            if d.is_empty() {
                s.push_str(&format!("# {k} =\n"));
            } else {
                s.push_str(&format!("{k} = {d}\n"));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_library_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.checkpoint, PathBuf::from("model.mwck"));
        assert_eq!(c.loss_csv, PathBuf::from("loss.csv"));
        assert!(c.manifest.is_none() && c.dataset.is_none());
    }

    #[test]
    fn defaults_text_parses_back() {
        assert_eq!(RunConfig::parse(&RunConfig::defaults_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn parses_overrides() {
        let c = RunConfig::parse(
            "levels = 2\nconvs_per_block=2\nchannel_schedule = 16, 32 # desk\nresidual=true\n\
             epochs=3\nlr_decay_every=10\nlr_decay_factor=0.25\nmanifest=m.txt\n",
        )
        .unwrap();
        assert_eq!(
            c.model,
            ModelConfig {
                residual: true,
                ..ModelConfig::desk()
            }
        );
        assert_eq!(c.train.epochs, 3);
        assert_eq!(
            c.train.lr_decay,
            Some(StepDecay {
                every_epochs: 10,
                factor: 0.25
            })
        );
        assert_eq!(c.manifest, Some(PathBuf::from("m.txt")));
    }

    #[test]
    fn rejects_bad_input() {
        for (text, needle) in [
            ("colour = red", "unknown key"),
            ("epochs = 2\nepochs = 3", "duplicate"),
            ("epochs", "key = value"),
            ("epochs = many", "epochs"),
            ("residual = maybe", "true or false"),
            ("levels = 2", "channel_schedule"),
            ("manifest = a\ndataset = b", "pick one"),
        ] {
            let e = RunConfig::parse(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}");
            assert!(e.to_string().contains(needle), "{text}: {e}");
        }
    }
}
