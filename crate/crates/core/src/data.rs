//! Seeded synthetic datasets with controllable conditioning variables, view
//! augmentation, batching, and CSV interchange.
//!
//! Two generators cover the two experiment families:
//!
//! * [`gen_colorblobs`] — well-separated Gaussian class clusters with a
//!   continuous nuisance "color" `z` that correlates with the label and is
//!   appended to the input features, so an unconditioned encoder happily
//!   absorbs it. This is the fairness setup.
//! * [`gen_attrblobs`] — overlapping Gaussian clusters where each class owns
//!   a binary attribute vector and each sample's `z` is a noisy copy of it.
//!   This is the weak-supervision setup.
//!
//! Everything is a pure function of its arguments including the seed; the
//! same call always reproduces the same bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Distance between neighboring class centers in `gen_colorblobs`. At a
/// cluster std of 0.5 this keeps the classes linearly separable to well above
/// 95%, which the fairness experiment depends on.
pub const COLOR_SPACING: f64 = 3.0;
/// Per-coordinate std of the Gaussian clusters in `gen_colorblobs`.
pub const COLOR_STD: f64 = 0.5;
/// Scale of the class centers in `gen_attrblobs`. Deliberately close to the
/// cluster std so classes overlap and the attribute signal carries weight.
pub const ATTR_SPACING: f64 = 1.2;
/// Per-coordinate std of the Gaussian clusters in `gen_attrblobs`.
pub const ATTR_STD: f64 = 0.5;

/// One generated or loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    /// Encoder inputs, one row per sample.
    pub features: Matrix<T>,
    /// Class ids in `[0, num_classes)`.
    pub labels: Vec<usize>,
    /// Conditioning outcomes, aligned with `features` rows.
    pub z: Matrix<T>,
    /// Generator name, parameters, and seed.
    pub meta: BTreeMap<String, String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.features.rows() || self.z.rows() != self.features.rows() {
            return Err(Error::contract(format!(
                "misaligned dataset: {} feature rows, {} labels, {} z rows",
                self.features.rows(),
                self.labels.len(),
                self.z.rows()
            )));
        }
        Ok(())
    }
}

/// Strength of the two view corruptions.
#[derive(Debug, Clone, Copy)]
pub struct ViewConfig<T> {
    /// Std of additive Gaussian noise.
    pub noise_sigma: T,
    /// Probability of zeroing each coordinate, independently per view.
    pub mask_prob: T,
}

impl<T: Scalar> Default for ViewConfig<T> {
    fn default() -> Self {
        ViewConfig { noise_sigma: T::of(0.1), mask_prob: T::zero() }
    }
}

impl<T: Scalar> ViewConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= T::zero()) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "data.noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.mask_prob >= T::zero() && self.mask_prob < T::one()) {
            return Err(Error::Config(format!(
                "data.mask_prob must be in [0, 1), got {}",
                self.mask_prob
            )));
        }
        Ok(())
    }
}

/// One training batch: two views of the selected rows plus their `z`.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub x: Matrix<T>,
    pub y: Matrix<T>,
    pub z: Matrix<T>,
    pub labels: Vec<usize>,
}

/// Gaussian class clusters with a label-correlated continuous nuisance.
///
/// Class centers sit on a planar grid `COLOR_SPACING` apart with std
/// `COLOR_STD`. Each class owns an anchor color in `[0,1]^nuisance_dim`,
/// placed on stratified levels (a random permutation of `(c + 0.5)/C` per
/// dimension) so anchors never collide regardless of seed. A sample's
/// nuisance is `corr * anchor + (1 - corr) * uniform`, and it is appended to
/// the features so the returned inputs have `d + nuisance_dim` columns.
pub fn gen_colorblobs<T: Scalar>(
    num_classes: usize,
    per_class: usize,
    d: usize,
    nuisance_dim: usize,
    corr: T,
    seed: u64,
) -> Result<Dataset<T>> {
    if num_classes == 0 || d == 0 || nuisance_dim == 0 {
        return Err(Error::Config("colorblobs needs positive class count and dims".into()));
    }
    if per_class < 2 {
        return Err(Error::contract(format!("per_class must be >= 2, got {per_class}")));
    }
    if !(corr >= T::zero() && corr < T::one()) {
        return Err(Error::Config(format!("data.corr must be in [0, 1), got {corr}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Class geometry and anchor colors first, then samples, so the layout is
    // stable under per_class changes.
    let centers: Vec<Vec<f64>> = (0..num_classes).map(|c| grid_center(c, num_classes, d)).collect();
    let mut anchors = vec![vec![0.0f64; nuisance_dim]; num_classes];
    for j in 0..nuisance_dim {
        let mut levels: Vec<usize> = (0..num_classes).collect();
        levels.shuffle(&mut rng);
        for (c, anchor) in anchors.iter_mut().enumerate() {
            anchor[j] = (levels[c] as f64 + 0.5) / num_classes as f64;
        }
    }

    let n = num_classes * per_class;
    let mut features = Matrix::zeros(n, d + nuisance_dim);
    let mut z = Matrix::zeros(n, nuisance_dim);
    let mut labels = Vec::with_capacity(n);
    let corr_f = corr.lossy();
    for c in 0..num_classes {
        for s in 0..per_class {
            let row = c * per_class + s;
            for j in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                features[(row, j)] = T::of(centers[c][j] + COLOR_STD * noise);
            }
            for j in 0..nuisance_dim {
                let u = rng.gen::<f64>();
                let val = corr_f * anchors[c][j] + (1.0 - corr_f) * u;
                z[(row, j)] = T::of(val);
                features[(row, d + j)] = T::of(val);
            }
            labels.push(c);
            let _ = s;
        }
    }

    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), "colorblobs".into());
    meta.insert("num_classes".into(), num_classes.to_string());
    meta.insert("per_class".into(), per_class.to_string());
    meta.insert("dim".into(), d.to_string());
    meta.insert("nuisance_dim".into(), nuisance_dim.to_string());
    meta.insert("corr".into(), format!("{corr}"));
    meta.insert("seed".into(), seed.to_string());
    Ok(Dataset { features, labels, z, meta })
}

/// Overlapping Gaussian clusters with per-class binary attribute vectors.
///
/// Class `c` owns a ground-truth attribute vector drawn Bernoulli(0.5); each
/// sample's `z` flips every bit independently with probability `attr_noise`.
/// Attributes correlate with labels without equaling them.
pub fn gen_attrblobs<T: Scalar>(
    num_classes: usize,
    per_class: usize,
    d: usize,
    num_attrs: usize,
    attr_noise: T,
    seed: u64,
) -> Result<Dataset<T>> {
    if num_classes == 0 || per_class == 0 || d == 0 {
        return Err(Error::Config("attrblobs needs positive class count, size, and dim".into()));
    }
    if num_attrs == 0 {
        return Err(Error::contract("num_attrs must be >= 1"));
    }
    if !(attr_noise >= T::zero() && attr_noise <= T::one()) {
        return Err(Error::Config(format!("data.attr_noise must be in [0, 1], got {attr_noise}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Centers on the coordinate axes while they last, then random directions.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut center = vec![0.0; d];
        if c < d {
            center[c] = ATTR_SPACING;
        } else {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (dst, x) in center.iter_mut().zip(&dir) {
                *dst = ATTR_SPACING * x / norm;
            }
        }
        centers.push(center);
    }
    let attrs: Vec<Vec<bool>> = (0..num_classes)
        .map(|_| (0..num_attrs).map(|_| rng.gen_bool(0.5)).collect())
        .collect();

    let n = num_classes * per_class;
    let noise = attr_noise.lossy();
    let mut features = Matrix::zeros(n, d);
    let mut z = Matrix::zeros(n, num_attrs);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for s in 0..per_class {
            let row = c * per_class + s;
            for j in 0..d {
                let g: f64 = rng.sample(StandardNormal);
                features[(row, j)] = T::of(centers[c][j] + ATTR_STD * g);
            }
            for j in 0..num_attrs {
                let flip = noise > 0.0 && rng.gen_bool(noise);
                let bit = attrs[c][j] ^ flip;
                z[(row, j)] = if bit { T::one() } else { T::zero() };
            }
            labels.push(c);
            let _ = s;
        }
    }

    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), "attrblobs".into());
    meta.insert("num_classes".into(), num_classes.to_string());
    meta.insert("per_class".into(), per_class.to_string());
    meta.insert("dim".into(), d.to_string());
    meta.insert("num_attrs".into(), num_attrs.to_string());
    meta.insert("attr_noise".into(), format!("{attr_noise}"));
    meta.insert("seed".into(), seed.to_string());
    Ok(Dataset { features, labels, z, meta })
}

/// Two independent corruptions of each row: additive Gaussian noise then
/// coordinate masking. Row `i` of both views derives from source row `i`.
/// With `noise_sigma = 0` and `mask_prob = 0` both views equal the input.
pub fn make_views<T: Scalar>(
    features: &Matrix<T>,
    cfg: &ViewConfig<T>,
    seed: u64,
) -> Result<(Matrix<T>, Matrix<T>)> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x = corrupt(features, cfg, &mut rng);
    let y = corrupt(features, cfg, &mut rng);
    Ok((x, y))
}

fn corrupt<T: Scalar>(features: &Matrix<T>, cfg: &ViewConfig<T>, rng: &mut ChaCha12Rng) -> Matrix<T> {
    let mut out = features.clone();
    let sigma = cfg.noise_sigma.lossy();
    let mask = cfg.mask_prob.lossy();
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            if sigma > 0.0 {
                let g: f64 = rng.sample(StandardNormal);
                out[(i, j)] = out[(i, j)] + T::of(sigma * g);
            }
            if mask > 0.0 && rng.gen_bool(mask) {
                out[(i, j)] = T::zero();
            }
        }
    }
    out
}

/// Shuffle the dataset and cut it into batches of `batch_size`, keeping a
/// short final batch only if it still has at least 2 rows. Each batch carries
/// freshly drawn views of its rows (one view seed per batch, derived from
/// `epoch_seed`) and the rows' conditioning values.
pub fn batches<T: Scalar>(
    ds: &Dataset<T>,
    batch_size: usize,
    views: &ViewConfig<T>,
    epoch_seed: u64,
) -> Result<Vec<Batch<T>>> {
    ds.validate()?;
    views.validate()?;
    if batch_size < 2 {
        return Err(Error::contract(format!("batch_size must be >= 2, got {batch_size}")));
    }
    if ds.len() < 2 {
        return Err(Error::contract(format!("dataset has {} rows, need >= 2", ds.len())));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(epoch_seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);

    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 {
            break; // final remainder of one: drop it
        }
        let rows: Vec<Vec<T>> = chunk.iter().map(|&i| ds.features.row(i).to_vec()).collect();
        let feats = Matrix::from_rows(&rows)?;
        let zrows: Vec<Vec<T>> = chunk.iter().map(|&i| ds.z.row(i).to_vec()).collect();
        let z = Matrix::from_rows(&zrows)?;
        let view_seed = rng.gen::<u64>();
        let (x, y) = make_views(&feats, views, view_seed)?;
        out.push(Batch {
            indices: chunk.to_vec(),
            x,
            y,
            z,
            labels: chunk.iter().map(|&i| ds.labels[i]).collect(),
        });
    }
    Ok(out)
}

/// Write `x_0..x_{d-1}, z_0..z_{k-1}, label` rows with full float precision.
pub fn save_csv<T: Scalar>(ds: &Dataset<T>, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = Vec::with_capacity(ds.features.cols() + ds.z.cols() + 1);
    for j in 0..ds.features.cols() {
        header.push(format!("x_{j}"));
    }
    for j in 0..ds.z.cols() {
        header.push(format!("z_{j}"));
    }
    header.push("label".into());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..ds.len() {
        let mut fields = Vec::with_capacity(header.len());
        for &v in ds.features.row(i) {
            fields.push(format!("{v}"));
        }
        for &v in ds.z.row(i) {
            fields.push(format!("{v}"));
        }
        fields.push(ds.labels[i].to_string());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Parse a dataset written by [`save_csv`]. Errors carry 1-based line
/// numbers; the header is line 1.
pub fn load_csv<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let input = BufReader::new(File::open(path)?);
    let mut lines = input.lines().enumerate();

    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
    };
    let cols: Vec<&str> = header.split(',').collect();
    let d = cols.iter().take_while(|c| c.starts_with("x_")).count();
    let k = cols.iter().skip(d).take_while(|c| c.starts_with("z_")).count();
    if d == 0 || k == 0 || cols.len() != d + k + 1 || cols[d + k] != "label" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be x_0..x_{{d-1}},z_0..z_{{k-1}},label, got '{header}'"),
        });
    }
    for (j, c) in cols.iter().take(d).enumerate() {
        if **c != format!("x_{j}") {
            return Err(Error::Parse { line: 1, msg: format!("feature column {j} named '{c}'") });
        }
    }
    for (j, c) in cols.iter().skip(d).take(k).enumerate() {
        if **c != format!("z_{j}") {
            return Err(Error::Parse { line: 1, msg: format!("z column {j} named '{c}'") });
        }
    }

    let mut rows: Vec<Vec<T>> = Vec::new();
    let mut zrows: Vec<Vec<T>> = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + k + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, got {}", d + k + 1, fields.len()),
            });
        }
        let parse_float = |s: &str, what: &str| -> Result<T> {
            s.parse::<f64>().map(T::of).map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad {what} value '{s}': {e}"),
            })
        };
        let mut frow = Vec::with_capacity(d);
        for (j, s) in fields.iter().take(d).enumerate() {
            frow.push(parse_float(s, &format!("x_{j}"))?);
        }
        let mut zrow = Vec::with_capacity(k);
        for (j, s) in fields.iter().skip(d).take(k).enumerate() {
            zrow.push(parse_float(s, &format!("z_{j}"))?);
        }
        let label = fields[d + k].parse::<usize>().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad label '{}': {e}", fields[d + k]),
        })?;
        rows.push(frow);
        zrows.push(zrow);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }

    let features = Matrix::from_rows(&rows)?;
    let z = Matrix::from_rows(&zrows)?;
    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), "csv".into());
    meta.insert("num_classes".into(), (labels.iter().max().unwrap() + 1).to_string());
    Ok(Dataset { features, labels, z, meta })
}

fn grid_center(c: usize, num_classes: usize, d: usize) -> Vec<f64> {
    let mut center = vec![0.0; d];
    if d == 1 {
        center[0] = COLOR_SPACING * c as f64;
    } else {
        let side = (num_classes as f64).sqrt().ceil() as usize;
        center[0] = COLOR_SPACING * (c % side) as f64;
        center[1] = COLOR_SPACING * (c / side) as f64;
    }
    center
}
