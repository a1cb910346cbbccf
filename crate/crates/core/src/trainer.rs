//! SGD training loop, experiment orchestration, and frozen-representation
//! probes.
//!
//! The loop is strictly sequential and fully deterministic per seed: every
//! epoch's shuffle, every batch's view noise, and the discrete baseline's
//! positive draws all derive from `TrainConfig::seed` through a splitmix
//! chain. Probe evaluation uses its own `split_seed`, so changing
//! `eval_every` can never perturb the trained parameters.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{batches, Dataset, ViewConfig};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{solve_spd, Matrix};
use crate::losses::{self, LossConfig};
use crate::model::{Activation, EncoderConfig, EncoderParams, Side};
use crate::operator::OperatorConfig;
use crate::scalar::Scalar;

/// Fraction of rows (per class, for the classification probe) used to fit
/// the ridge readout; the rest is held out for the metric.
pub const PROBE_TRAIN_FRACTION: f64 = 0.7;
/// Auto probe ridge: this factor times the number of fitted rows.
pub const PROBE_RIDGE_FACTOR: f64 = 1e-3;

/// Everything one training run needs besides the dataset itself.
#[derive(Debug, Clone)]
pub struct TrainConfig<T> {
    pub loss: LossConfig<T>,
    pub kernel: KernelSpec<T>,
    pub operator: OperatorConfig<T>,
    pub views: ViewConfig<T>,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub shared: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: T,
    pub momentum: T,
    pub seed: u64,
    pub eval_every: usize,
    pub split_seed: u64,
    /// `None` resolves to `PROBE_RIDGE_FACTOR * n_train` at probe time.
    pub probe_ridge: Option<T>,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            kernel: KernelSpec::default(),
            operator: OperatorConfig::default(),
            views: ViewConfig::default(),
            hidden: vec![32],
            embed_dim: 16,
            activation: Activation::Tanh,
            shared: true,
            steps: 200,
            batch_size: 32,
            learning_rate: T::of(0.05),
            momentum: T::of(0.9),
            seed: 0,
            eval_every: 100,
            split_seed: 1,
            probe_ridge: None,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.kernel.validate()?;
        self.operator.validate()?;
        self.views.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "train.batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        // 0 is allowed so a no-op optimizer run stays expressible.
        if !(self.learning_rate >= T::zero()) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "train.learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.momentum >= T::zero() && self.momentum < T::one()) {
            return Err(Error::Config(format!(
                "train.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("train.hidden and train.embed_dim must be positive".into()));
        }
        if let Some(r) = self.probe_ridge {
            if !(r > T::zero()) || !r.is_finite() {
                return Err(Error::Config(format!("train.probe_ridge must be > 0, got {r}")));
            }
        }
        Ok(())
    }

    fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            activation: self.activation,
            shared: self.shared,
        }
    }

    /// Flat key=value echo of this configuration, for the report.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("loss.kind".into(), self.loss.kind.name().into());
        m.insert("loss.tau".into(), format!("{}", self.loss.score.tau));
        m.insert("loss.beta".into(), format!("{}", self.loss.beta));
        m.insert("kernel.kind".into(), self.kernel.kind.name().into());
        m.insert("kernel.sigma2".into(), self.kernel.sigma2_echo());
        m.insert("kernel.gamma".into(), format!("{}", self.kernel.gamma));
        m.insert("kernel.degree".into(), self.kernel.degree.to_string());
        m.insert("kernel.coef".into(), format!("{}", self.kernel.coef));
        m.insert("operator.lambda".into(), self.operator.lambda_echo());
        m.insert("operator.clamp_eps".into(), format!("{}", self.operator.clamp_eps));
        m.insert("data.noise_sigma".into(), format!("{}", self.views.noise_sigma));
        m.insert("data.mask_prob".into(), format!("{}", self.views.mask_prob));
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        m.insert("train.hidden".into(), hidden.join(","));
        m.insert("train.embed_dim".into(), self.embed_dim.to_string());
        m.insert("train.activation".into(), self.activation.name().into());
        m.insert("train.shared".into(), self.shared.to_string());
        m.insert("train.steps".into(), self.steps.to_string());
        m.insert("train.batch_size".into(), self.batch_size.to_string());
        m.insert("train.learning_rate".into(), format!("{}", self.learning_rate));
        m.insert("train.momentum".into(), format!("{}", self.momentum));
        m.insert("train.seed".into(), self.seed.to_string());
        m.insert("train.eval_every".into(), self.eval_every.to_string());
        m.insert("train.split_seed".into(), self.split_seed.to_string());
        let ridge = match self.probe_ridge {
            Some(r) => format!("{r}"),
            None => "auto".into(),
        };
        m.insert("train.probe_ridge".into(), ridge);
        m
    }
}

/// Probe metrics captured at one point of the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbePoint {
    pub step: usize,
    pub probe_accuracy: f64,
    pub nuisance_mse: f64,
}

/// Outcome of one training run.
///
/// Everything serialized here is a pure function of config and dataset; the
/// wall time is kept out of the serialized form so reports stay byte-equal
/// across identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub loss_curve: Vec<(usize, f64)>,
    pub probe_accuracy: f64,
    pub nuisance_mse: f64,
    pub probe_history: Vec<ProbePoint>,
    pub config: BTreeMap<String, String>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl Report {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(out, self)
            .map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })
    }

    pub fn save_loss_curve_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "step,loss")?;
        for (step, loss) in &self.loss_curve {
            writeln!(out, "{step},{loss}")?;
        }
        Ok(())
    }
}

/// One momentum-SGD update, in place:
/// `velocity <- momentum * velocity + grads; params <- params - lr * velocity`.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Matrix<T>],
    velocity: &mut [Matrix<T>],
    grads: &[Matrix<T>],
    lr: T,
    momentum: T,
) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(Error::shape(format!(
            "sgd_step got {} params, {} velocities, {} grads",
            params.len(),
            velocity.len(),
            grads.len()
        )));
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        if p.rows() != g.rows() || p.cols() != g.cols() {
            return Err(Error::shape(format!(
                "sgd_step shape mismatch: param {}x{}, grad {}x{}",
                p.rows(),
                p.cols(),
                g.rows(),
                g.cols()
            )));
        }
        for i in 0..v.as_slice().len() {
            let vi = momentum * v.as_slice()[i] + g.as_slice()[i];
            v.as_mut_slice()[i] = vi;
            p.as_mut_slice()[i] = p.as_slice()[i] - lr * vi;
        }
    }
    Ok(())
}

/// Run the full training loop and final probes.
pub fn train<T: Scalar>(ds: &Dataset<T>, cfg: &TrainConfig<T>) -> Result<(EncoderParams<T>, Report)> {
    cfg.validate()?;
    ds.validate()?;
    let started = Instant::now();

    let mut params = EncoderParams::init(&cfg.encoder_config(ds.features.cols()), cfg.seed)?;
    let mut velocity: Vec<Matrix<T>> =
        params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();

    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut probe_history = Vec::new();
    let mut step = 0;
    let mut epoch = 0u64;
    while step < cfg.steps {
        let epoch_seed = mix(cfg.seed, epoch.wrapping_add(1));
        let epoch_batches = batches(ds, cfg.batch_size, &cfg.views, epoch_seed)?;
        if epoch_batches.is_empty() {
            return Err(Error::contract("dataset yields no usable batches"));
        }
        for batch in epoch_batches {
            if step >= cfg.steps {
                break;
            }
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let x = tape.constant(batch.x);
            let y = tape.constant(batch.y);
            let u = vars.forward(&mut tape, x, Side::X)?;
            let v = vars.forward(&mut tape, y, Side::Y)?;
            let pos_seed = mix(epoch_seed, step as u64 + 1);
            let lv = losses::compute(
                &mut tape,
                &cfg.loss,
                u,
                v,
                &batch.z,
                &cfg.kernel,
                &cfg.operator,
                pos_seed,
            )?;
            let loss_val = lv.loss_value(&tape);
            if !loss_val.is_finite() {
                return Err(Error::NonFinite { step, loss_kind: cfg.loss.kind.name().into() });
            }
            loss_curve.push((step, loss_val.lossy()));

            let grads = tape.backward(lv.loss)?;
            let grad_mats: Vec<Matrix<T>> =
                vars.flat().iter().map(|&var| grads.get_or_zeros(var)).collect();
            let mut tensors = params.tensors_mut();
            sgd_step(&mut tensors, &mut velocity, &grad_mats, cfg.learning_rate, cfg.momentum)?;

            step += 1;
            if step % cfg.eval_every == 0 && step < cfg.steps {
                let (acc, mse) = run_probes(&params, ds, cfg)?;
                probe_history.push(ProbePoint {
                    step: step - 1,
                    probe_accuracy: acc,
                    nuisance_mse: mse,
                });
            }
        }
        epoch += 1;
    }

    let (probe_accuracy, nuisance_mse) = run_probes(&params, ds, cfg)?;
    probe_history.push(ProbePoint { step: step - 1, probe_accuracy, nuisance_mse });

    let mut config = cfg.echo();
    for (k, v) in &ds.meta {
        config.insert(format!("data.{k}"), v.clone());
    }
    let report = Report {
        loss_curve,
        probe_accuracy,
        nuisance_mse,
        probe_history,
        config,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

fn run_probes<T: Scalar>(
    params: &EncoderParams<T>,
    ds: &Dataset<T>,
    cfg: &TrainConfig<T>,
) -> Result<(f64, f64)> {
    evaluate(params, ds, cfg.probe_ridge, cfg.split_seed)
}

/// Probe a trained encoder on a dataset: `(probe_accuracy, nuisance_mse)`,
/// computed exactly as the final entries of a training [`Report`].
pub fn evaluate<T: Scalar>(
    params: &EncoderParams<T>,
    ds: &Dataset<T>,
    probe_ridge: Option<T>,
    split_seed: u64,
) -> Result<(f64, f64)> {
    let emb = params.embed(&ds.features)?;
    let acc = linear_probe(&emb, &ds.labels, probe_ridge, split_seed)?;
    let mse = nuisance_mse(&emb, &ds.z, probe_ridge, split_seed)?;
    Ok((acc.lossy(), mse.lossy()))
}

/// Linear classification probe: class-stratified 70/30 split, one-vs-all
/// ridge regression (with intercept) to one-hot targets, held-out argmax
/// accuracy.
pub fn linear_probe<T: Scalar>(
    embeddings: &Matrix<T>,
    labels: &[usize],
    ridge: Option<T>,
    split_seed: u64,
) -> Result<T> {
    if embeddings.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} embedding rows for {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    let (train_idx, test_idx) = stratified_split(labels, split_seed)?;
    let num_classes = labels.iter().max().unwrap() + 1;

    let e_train = with_intercept(&gather(embeddings, &train_idx));
    let mut onehot = Matrix::zeros(train_idx.len(), num_classes);
    for (r, &i) in train_idx.iter().enumerate() {
        onehot[(r, labels[i])] = T::one();
    }
    let w = fit_ridge(&e_train, &onehot, resolve_ridge(ridge, train_idx.len()))?;

    let e_test = with_intercept(&gather(embeddings, &test_idx));
    let scores = e_test.matmul(&w)?;
    let mut hits = 0usize;
    for (r, &i) in test_idx.iter().enumerate() {
        let row = scores.row(r);
        let mut pred = 0;
        for (c, &s) in row.iter().enumerate() {
            if s > row[pred] {
                pred = c;
            }
        }
        hits += usize::from(pred == labels[i]);
    }
    Ok(T::of(hits as f64 / test_idx.len() as f64))
}

/// Nuisance regression probe: 70/30 split, ridge regression (with intercept)
/// from the embeddings to `z`, mean squared error on the held-out rows.
/// Higher means the representation retained less of the nuisance; a
/// representation independent of `z` bottoms out near `Var(z)` because the
/// intercept still carries the mean.
pub fn nuisance_mse<T: Scalar>(
    embeddings: &Matrix<T>,
    z: &Matrix<T>,
    ridge: Option<T>,
    split_seed: u64,
) -> Result<T> {
    if embeddings.rows() != z.rows() {
        return Err(Error::shape(format!(
            "{} embedding rows for {} z rows",
            embeddings.rows(),
            z.rows()
        )));
    }
    if embeddings.rows() < 2 {
        return Err(Error::contract("nuisance probe needs at least 2 rows"));
    }
    let (train_idx, test_idx) = plain_split(embeddings.rows(), split_seed);
    let e_train = with_intercept(&gather(embeddings, &train_idx));
    let z_train = gather(z, &train_idx);
    let w = fit_ridge(&e_train, &z_train, resolve_ridge(ridge, train_idx.len()))?;

    let e_test = with_intercept(&gather(embeddings, &test_idx));
    let pred = e_test.matmul(&w)?;
    let mut total = T::zero();
    for (r, &i) in test_idx.iter().enumerate() {
        for j in 0..z.cols() {
            let d = pred[(r, j)] - z[(i, j)];
            total += d * d;
        }
    }
    Ok(total / T::of((test_idx.len() * z.cols()) as f64))
}

/// Closed-form ridge fit `(EᵀE + ridge I)⁻¹ Eᵀ Y`, shared by both probes.
pub(crate) fn fit_ridge<T: Scalar>(
    e: &Matrix<T>,
    targets: &Matrix<T>,
    ridge: T,
) -> Result<Matrix<T>> {
    let et = e.transpose();
    let mut gram = et.matmul(e)?;
    for j in 0..gram.rows() {
        gram[(j, j)] += ridge;
    }
    let rhs = et.matmul(targets)?;
    solve_spd(&gram, &rhs, T::zero())
}

fn resolve_ridge<T: Scalar>(ridge: Option<T>, n_train: usize) -> T {
    ridge.unwrap_or_else(|| T::of(PROBE_RIDGE_FACTOR * n_train as f64))
}

/// Append a constant column so the ridge fit carries a bias term.
fn with_intercept<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), m.cols() + 1);
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out[(i, j)] = m[(i, j)];
        }
        out[(i, m.cols())] = T::one();
    }
    out
}

/// Class-stratified split: per class, a seeded shuffle of its rows, first
/// `max(1, floor(0.7 m))` into train, rest into test. Classes with fewer
/// than two rows cannot appear on both sides and are rejected.
fn stratified_split(labels: &[usize], split_seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(Error::contract("probe needs a nonempty dataset"));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let small: Vec<String> = members
        .iter()
        .enumerate()
        .filter(|(_, m)| m.len() < 2)
        .map(|(c, m)| format!("class {c} has {} samples", m.len()))
        .collect();
    if !small.is_empty() {
        return Err(Error::contract(format!(
            "probe split needs >= 2 samples per class: {}",
            small.join("; ")
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(split_seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut m in members {
        m.shuffle(&mut rng);
        let n_train = ((m.len() as f64 * PROBE_TRAIN_FRACTION).floor() as usize).max(1);
        train.extend_from_slice(&m[..n_train]);
        test.extend_from_slice(&m[n_train..]);
    }
    Ok((train, test))
}

/// Unstratified 70/30 split for the regression probe.
fn plain_split(n: usize, split_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha12Rng::seed_from_u64(split_seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = ((n as f64 * PROBE_TRAIN_FRACTION).floor() as usize).max(1).min(n - 1);
    let test = order.split_off(n_train);
    (order, test)
}

fn gather<T: Scalar>(m: &Matrix<T>, idx: &[usize]) -> Matrix<T> {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        for j in 0..m.cols() {
            out[(r, j)] = m[(i, j)];
        }
    }
    out
}

/// splitmix64-style mixer for deriving per-epoch and per-step seeds.
fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
