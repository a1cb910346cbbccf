//! Flat `key=value` experiment configuration.
//!
//! The format is a text file of `section.key=value` lines with `#` comments;
//! nothing nests. Unknown keys are rejected so typos fail loudly, and every
//! key has a default, so the empty file is a valid configuration (except
//! that dataset generation also needs `data.generator`).
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `data.generator` | — | `colorblobs` or `attrblobs` (required by gen-data) |
//! | `data.num_classes` | 4 | classes |
//! | `data.per_class` | 100 | samples per class |
//! | `data.dim` | 2 | feature dims before any appended nuisance |
//! | `data.nuisance_dim` | 3 | colorblobs: nuisance color dims |
//! | `data.corr` | 0.9 | colorblobs: label-color correlation in [0,1) |
//! | `data.num_attrs` | 32 | attrblobs: binary attributes |
//! | `data.attr_noise` | 0.1 | attrblobs: per-bit flip probability |
//! | `data.seed` | 0 | generator seed |
//! | `data.noise_sigma` | 0.1 | view-augmentation Gaussian noise |
//! | `data.mask_prob` | 0.0 | view-augmentation masking probability |
//! | `kernel.kind` | rbf | rbf, laplacian, linear, cosine, polynomial, delta |
//! | `kernel.sigma2` | median | RBF bandwidth: `median` or a positive float |
//! | `kernel.gamma` | 1.0 | Laplacian scale |
//! | `kernel.degree` | 3 | polynomial degree |
//! | `kernel.coef` | 1.0 | polynomial offset |
//! | `loss.kind` | infonce | see `losses::LossKind` |
//! | `loss.tau` | 0.5 | score temperature |
//! | `loss.beta` | 1.0 | hard-negative concentration |
//! | `operator.lambda` | auto | `auto` (1e-3 · mean diag) or float ≥ 0 |
//! | `operator.clamp_eps` | 1e-8 | conditional-similarity floor |
//! | `train.steps` | 200 | minibatch iterations |
//! | `train.batch_size` | 32 | rows per batch |
//! | `train.learning_rate` | 0.05 | SGD step size |
//! | `train.momentum` | 0.9 | SGD momentum in [0,1) |
//! | `train.seed` | 0 | initialization/shuffle/view seed |
//! | `train.eval_every` | 100 | probe cadence in steps |
//! | `train.hidden` | 32 | comma-separated hidden widths; empty = linear |
//! | `train.embed_dim` | 16 | embedding width |
//! | `train.activation` | tanh | tanh or relu |
//! | `train.shared` | true | share the two towers |
//! | `train.split_seed` | 1 | probe split seed |
//! | `train.probe_ridge` | auto | `auto` (1e-3 · n_train) or positive float |

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{gen_attrblobs, gen_colorblobs, Dataset, ViewConfig};
use crate::error::{Error, Result};
use crate::kernels::{Bandwidth, KernelKind, KernelSpec, ScoreConfig};
use crate::losses::{LossConfig, LossKind};
use crate::model::Activation;
use crate::operator::{Lambda, OperatorConfig};
use crate::scalar::Scalar;
use crate::trainer::TrainConfig;

const KNOWN_KEYS: &[&str] = &[
    "data.generator",
    "data.num_classes",
    "data.per_class",
    "data.dim",
    "data.nuisance_dim",
    "data.corr",
    "data.num_attrs",
    "data.attr_noise",
    "data.seed",
    "data.noise_sigma",
    "data.mask_prob",
    "kernel.kind",
    "kernel.sigma2",
    "kernel.gamma",
    "kernel.degree",
    "kernel.coef",
    "loss.kind",
    "loss.tau",
    "loss.beta",
    "operator.lambda",
    "operator.clamp_eps",
    "train.steps",
    "train.batch_size",
    "train.learning_rate",
    "train.momentum",
    "train.seed",
    "train.eval_every",
    "train.hidden",
    "train.embed_dim",
    "train.activation",
    "train.shared",
    "train.split_seed",
    "train.probe_ridge",
];

/// Parsed but untyped configuration: the raw key/value map.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    map: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!("unknown config key '{key}' (line {lineno})")));
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(RawConfig { map })
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.map
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => {
                v.parse().map_err(|e| Error::Config(format!("bad {key} value '{v}': {e}")))
            }
        }
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => {
                v.parse().map_err(|e| Error::Config(format!("bad {key} value '{v}': {e}")))
            }
        }
    }

    fn float_or<T: Scalar>(&self, key: &str, default: f64) -> Result<T> {
        match self.get(key) {
            None => Ok(T::of(default)),
            Some(v) => v
                .parse::<f64>()
                .map(T::of)
                .map_err(|e| Error::Config(format!("bad {key} value '{v}': {e}"))),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::Config(format!("bad {key} value '{v}': expected true/false"))),
        }
    }

    /// Assemble the view-augmentation part (`data.noise_sigma`, `data.mask_prob`).
    pub fn view_config<T: Scalar>(&self) -> Result<ViewConfig<T>> {
        let cfg = ViewConfig {
            noise_sigma: self.float_or("data.noise_sigma", 0.1)?,
            mask_prob: self.float_or("data.mask_prob", 0.0)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assemble the conditioning-kernel part (`kernel.*`).
    pub fn kernel_spec<T: Scalar>(&self) -> Result<KernelSpec<T>> {
        let kind = match self.get("kernel.kind") {
            None => KernelKind::Rbf,
            Some(v) => KernelKind::parse(v)?,
        };
        let sigma2 = match self.get("kernel.sigma2") {
            None | Some("median") => Bandwidth::Median,
            Some(v) => Bandwidth::Fixed(
                v.parse::<f64>()
                    .map(T::of)
                    .map_err(|e| Error::Config(format!("bad kernel.sigma2 value '{v}': {e}")))?,
            ),
        };
        let spec = KernelSpec {
            kind,
            sigma2,
            gamma: self.float_or("kernel.gamma", 1.0)?,
            degree: self.usize_or("kernel.degree", 3)? as u32,
            coef: self.float_or("kernel.coef", 1.0)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Assemble the operator part (`operator.*`).
    pub fn operator_config<T: Scalar>(&self) -> Result<OperatorConfig<T>> {
        let lambda = match self.get("operator.lambda") {
            None | Some("auto") => Lambda::Auto,
            Some(v) => Lambda::Fixed(
                v.parse::<f64>()
                    .map(T::of)
                    .map_err(|e| Error::Config(format!("bad operator.lambda value '{v}': {e}")))?,
            ),
        };
        let cfg = OperatorConfig { lambda, clamp_eps: self.float_or("operator.clamp_eps", 1e-8)? };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assemble the loss part (`loss.*`).
    pub fn loss_config<T: Scalar>(&self) -> Result<LossConfig<T>> {
        let kind = match self.get("loss.kind") {
            None => LossKind::Infonce,
            Some(v) => LossKind::parse(v)?,
        };
        let cfg = LossConfig {
            kind,
            score: ScoreConfig { tau: self.float_or("loss.tau", 0.5)? },
            beta: self.float_or("loss.beta", 1.0)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assemble the full training configuration.
    pub fn train_config<T: Scalar>(&self) -> Result<TrainConfig<T>> {
        let hidden = match self.get("train.hidden") {
            None => vec![32],
            Some(v) => parse_hidden(v)?,
        };
        let activation = match self.get("train.activation") {
            None => Activation::Tanh,
            Some(v) => Activation::parse(v)?,
        };
        let probe_ridge = match self.get("train.probe_ridge") {
            None | Some("auto") => None,
            Some(v) => Some(
                v.parse::<f64>()
                    .map(T::of)
                    .map_err(|e| Error::Config(format!("bad train.probe_ridge value '{v}': {e}")))?,
            ),
        };
        let cfg = TrainConfig {
            loss: self.loss_config()?,
            kernel: self.kernel_spec()?,
            operator: self.operator_config()?,
            views: self.view_config()?,
            hidden,
            embed_dim: self.usize_or("train.embed_dim", 16)?,
            activation,
            shared: self.bool_or("train.shared", true)?,
            steps: self.usize_or("train.steps", 200)?,
            batch_size: self.usize_or("train.batch_size", 32)?,
            learning_rate: self.float_or("train.learning_rate", 0.05)?,
            momentum: self.float_or("train.momentum", 0.9)?,
            seed: self.u64_or("train.seed", 0)?,
            eval_every: self.usize_or("train.eval_every", 100)?,
            split_seed: self.u64_or("train.split_seed", 1)?,
            probe_ridge,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Run the configured generator (`data.*`). `data.generator` is required.
    pub fn generate_dataset<T: Scalar>(&self) -> Result<Dataset<T>> {
        let generator = self
            .get("data.generator")
            .ok_or_else(|| Error::Config("missing required key data.generator".into()))?;
        let num_classes = self.usize_or("data.num_classes", 4)?;
        let per_class = self.usize_or("data.per_class", 100)?;
        let dim = self.usize_or("data.dim", 2)?;
        let seed = self.u64_or("data.seed", 0)?;
        match generator {
            "colorblobs" => gen_colorblobs(
                num_classes,
                per_class,
                dim,
                self.usize_or("data.nuisance_dim", 3)?,
                self.float_or::<T>("data.corr", 0.9)?,
                seed,
            ),
            "attrblobs" => gen_attrblobs(
                num_classes,
                per_class,
                dim,
                self.usize_or("data.num_attrs", 32)?,
                self.float_or::<T>("data.attr_noise", 0.1)?,
                seed,
            ),
            other => Err(Error::Config(format!(
                "data.generator must be colorblobs or attrblobs, got '{other}'"
            ))),
        }
    }
}

fn parse_hidden(v: &str) -> Result<Vec<usize>> {
    let v = v.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad train.hidden entry '{part}': {e}")))
        })
        .collect()
}
