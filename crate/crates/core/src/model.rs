//! Two-tower MLP encoders producing unit-norm embeddings.
//!
//! An encoder is a stack of affine layers with a pointwise nonlinearity
//! between them and a row normalization at the end, so every embedding lands
//! on the unit sphere and cosine scores stay in [-1, 1]. The two views can
//! share one parameter stack (`shared = true`, the default) or train separate
//! x/y towers drawn from the same seeded stream.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Pointwise nonlinearity between hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Architecture description: layer widths plus the sharing mode.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub shared: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("encoder input and embedding dims must be positive".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    fn sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(self.input_dim);
        s.extend_from_slice(&self.hidden);
        s.push(self.embed_dim);
        s
    }
}

/// Which tower a batch runs through; with a shared stack both resolve to the
/// same parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    X,
    Y,
}

/// Concrete encoder parameters, outside any tape.
#[derive(Debug, Clone)]
pub struct EncoderParams<T> {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub shared: bool,
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Matrix<T>>,
    pub weights_y: Option<Vec<Matrix<T>>>,
    pub biases_y: Option<Vec<Matrix<T>>>,
}

/// Tape handles for one registration of the parameters.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Var>,
    biases: Vec<Var>,
    weights_y: Option<Vec<Var>>,
    biases_y: Option<Vec<Var>>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Glorot-uniform weights, zero biases, drawn from a seeded stream. With
    /// `shared = false` the y tower continues from the same stream, so the
    /// two towers start different but reproducibly so.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let sizes = cfg.sizes();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (weights, biases) = init_stack(&sizes, &mut rng);
        let (weights_y, biases_y) = if cfg.shared {
            (None, None)
        } else {
            let (w, b) = init_stack(&sizes, &mut rng);
            (Some(w), Some(b))
        };
        Ok(EncoderParams {
            sizes,
            activation: cfg.activation,
            shared: cfg.shared,
            weights,
            biases,
            weights_y,
            biases_y,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// All parameter tensors in canonical order: per layer weight then bias,
    /// x tower first, then the y tower if present.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w);
            out.push(b);
        }
        if let (Some(wy), Some(by)) = (&self.weights_y, &self.biases_y) {
            for (w, b) in wy.iter().zip(by) {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out: Vec<&mut Matrix<T>> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        if let (Some(wy), Some(by)) = (self.weights_y.as_mut(), self.biases_y.as_mut()) {
            for (w, b) in wy.iter_mut().zip(by.iter_mut()) {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    /// Register every tensor as a trainable leaf on `tape`.
    pub fn register(&self, tape: &mut Tape<T>) -> EncoderVars {
        let flat: Vec<Var> = self.tensors().iter().map(|m| tape.leaf((*m).clone(), true)).collect();
        self.vars_from_flat(&flat)
    }

    /// Reassemble tape handles laid out by [`Self::tensors`] into towers.
    pub fn vars_from_flat(&self, flat: &[Var]) -> EncoderVars {
        let layers = self.weights.len();
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            weights.push(flat[2 * l]);
            biases.push(flat[2 * l + 1]);
        }
        let (weights_y, biases_y) = if self.weights_y.is_some() {
            let mut wy = Vec::with_capacity(layers);
            let mut by = Vec::with_capacity(layers);
            for l in 0..layers {
                wy.push(flat[2 * layers + 2 * l]);
                by.push(flat[2 * layers + 2 * l + 1]);
            }
            (Some(wy), Some(by))
        } else {
            (None, None)
        };
        EncoderVars {
            sizes: self.sizes.clone(),
            activation: self.activation,
            weights,
            biases,
            weights_y,
            biases_y,
        }
    }

    /// Plain (tape-free) embedding of a feature matrix through the x tower.
    pub fn embed(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.embed_side(x, Side::X)
    }

    pub fn embed_side(&self, x: &Matrix<T>, side: Side) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.constant(x.clone());
        let out = vars.forward(&mut tape, xv, side)?;
        Ok(tape.value(out).clone())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            sizes: self.sizes.clone(),
            activation: self.activation.name().to_string(),
            shared: self.shared,
            weights: self.weights.iter().map(dump).collect(),
            biases: self.biases.iter().map(dump).collect(),
            weights_y: self.weights_y.as_ref().map(|v| v.iter().map(dump).collect()),
            biases_y: self.biases_y.as_ref().map(|v| v.iter().map(dump).collect()),
        };
        let out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(out, &file).map_err(json_err)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let input = BufReader::new(File::open(path)?);
        let file: CheckpointFile = serde_json::from_reader(input).map_err(json_err)?;
        let activation = Activation::parse(&file.activation)?;
        if file.sizes.len() < 2 {
            return Err(Error::contract("checkpoint must describe at least one layer"));
        }
        let layers = file.sizes.len() - 1;
        let (weights, biases) = restore_stack(&file.sizes, &file.weights, &file.biases, layers)?;
        let (weights_y, biases_y) = match (&file.weights_y, &file.biases_y) {
            (Some(wy), Some(by)) => {
                let (w, b) = restore_stack(&file.sizes, wy, by, layers)?;
                (Some(w), Some(b))
            }
            (None, None) => (None, None),
            _ => return Err(Error::contract("checkpoint has a partial y tower")),
        };
        if file.shared != weights_y.is_none() {
            return Err(Error::contract("checkpoint sharing flag contradicts stored towers"));
        }
        Ok(EncoderParams {
            sizes: file.sizes,
            activation,
            shared: file.shared,
            weights,
            biases,
            weights_y,
            biases_y,
        })
    }
}

impl EncoderVars {
    /// Flat handle list in the same order as [`EncoderParams::tensors`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(*w);
            out.push(*b);
        }
        if let (Some(wy), Some(by)) = (&self.weights_y, &self.biases_y) {
            for (w, b) in wy.iter().zip(by) {
                out.push(*w);
                out.push(*b);
            }
        }
        out
    }

    /// Run a batch through the requested tower: affine layers with the
    /// configured nonlinearity in between, then row normalization.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, side: Side) -> Result<Var> {
        let (_, d) = x.shape();
        if d != self.sizes[0] {
            return Err(Error::shape(format!(
                "encoder expects {} input features, got {d}",
                self.sizes[0]
            )));
        }
        let (weights, biases) = match (side, &self.weights_y, &self.biases_y) {
            (Side::Y, Some(wy), Some(by)) => (wy, by),
            _ => (&self.weights, &self.biases),
        };
        let layers = weights.len();
        let mut h = x;
        for l in 0..layers {
            let lin = tape.matmul(h, weights[l])?;
            h = tape.add(lin, biases[l])?;
            if l + 1 < layers {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(tape.row_normalize(h))
    }
}

fn init_stack<T: Scalar>(
    sizes: &[usize],
    rng: &mut ChaCha12Rng,
) -> (Vec<Matrix<T>>, Vec<Matrix<T>>) {
    let mut weights = Vec::with_capacity(sizes.len() - 1);
    let mut biases = Vec::with_capacity(sizes.len() - 1);
    for l in 0..sizes.len() - 1 {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut w = Matrix::zeros(fan_in, fan_out);
        for i in 0..fan_in {
            for j in 0..fan_out {
                w[(i, j)] = T::of(rng.gen_range(-bound..bound));
            }
        }
        weights.push(w);
        biases.push(Matrix::zeros(1, fan_out));
    }
    (weights, biases)
}

#[derive(Serialize, Deserialize)]
struct TensorDump {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    sizes: Vec<usize>,
    activation: String,
    shared: bool,
    weights: Vec<TensorDump>,
    biases: Vec<TensorDump>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights_y: Option<Vec<TensorDump>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    biases_y: Option<Vec<TensorDump>>,
}

fn dump<T: Scalar>(m: &Matrix<T>) -> TensorDump {
    TensorDump {
        rows: m.rows(),
        cols: m.cols(),
        data: m.as_slice().iter().map(|x| x.lossy()).collect(),
    }
}

fn restore<T: Scalar>(d: &TensorDump, rows: usize, cols: usize, what: &str) -> Result<Matrix<T>> {
    if d.rows != rows || d.cols != cols || d.data.len() != rows * cols {
        return Err(Error::contract(format!(
            "checkpoint {what} has shape {}x{} ({} values), expected {rows}x{cols}",
            d.rows,
            d.cols,
            d.data.len()
        )));
    }
    Matrix::from_vec(rows, cols, d.data.iter().map(|&x| T::of(x)).collect())
}

type Stack<T> = (Vec<Matrix<T>>, Vec<Matrix<T>>);

fn restore_stack<T: Scalar>(
    sizes: &[usize],
    weights: &[TensorDump],
    biases: &[TensorDump],
    layers: usize,
) -> Result<Stack<T>> {
    if weights.len() != layers || biases.len() != layers {
        return Err(Error::contract(format!(
            "checkpoint stores {} weight / {} bias tensors for {layers} layers",
            weights.len(),
            biases.len()
        )));
    }
    let mut ws = Vec::with_capacity(layers);
    let mut bs = Vec::with_capacity(layers);
    for l in 0..layers {
        ws.push(restore(&weights[l], sizes[l], sizes[l + 1], &format!("weight {l}"))?);
        bs.push(restore(&biases[l], 1, sizes[l + 1], &format!("bias {l}"))?);
    }
    Ok((ws, bs))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Parse { line: e.line(), msg: e.to_string() }
}
