//! Stacked extreme learning machine: random hidden layers with
//! closed-form ridge output weights, stacked through PCA. The first layer
//! is an ordinary ELM; every later layer keeps the top `l` principal
//! directions of the previous hidden output and appends `L - l` freshly
//! random neurons, so the network deepens without ever backpropagating.
//!
//! Inputs and targets are z-score normalized internally; recorded RMSEs
//! live in the normalized target space.

use crate::linalg::{cholesky_solve, symmetric_top_eigs, LinalgError};
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelmError {
    #[error("SingularSystem: ridge system could not be factorized ({0})")]
    SingularSystem(String),
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("NotAClassifier: model has no classification head")]
    NotAClassifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelmConfig {
    /// Hidden neurons L.
    pub hidden_neurons: usize,
    /// Neurons kept through PCA between iterations, l.
    pub reduced_neurons: usize,
    pub stack_iterations: usize,
    /// Ridge weight on the output-layer solve.
    pub ridge: f64,
    pub activation: Activation,
    pub weight_seed: u64,
}

impl Default for SelmConfig {
    fn default() -> Self {
        SelmConfig {
            hidden_neurons: 1000,
            reduced_neurons: 100,
            stack_iterations: 10,
            ridge: (2.0f64).powi(-30),
            activation: Activation::Sigmoid,
            weight_seed: 0,
        }
    }
}

impl SelmConfig {
    pub fn validate(&self) -> Result<(), SelmError> {
        if self.reduced_neurons < 1 || self.reduced_neurons > self.hidden_neurons {
            return Err(SelmError::InvalidConfig(format!(
                "need 1 <= reduced_neurons <= hidden_neurons, got l={} L={}",
                self.reduced_neurons, self.hidden_neurons
            )));
        }
        if self.stack_iterations < 1 {
            return Err(SelmError::InvalidConfig("stack_iterations must be >= 1".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(SelmError::InvalidConfig("ridge must be >= 0".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.weight_seed = seed;
        self
    }
}

/// Per-feature z-score statistics. Degenerate (zero-variance) columns keep
/// std 1 so they pass through as constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(m: &ArrayView2<f64>) -> (Normalization, Vec<usize>) {
        let n = m.nrows() as f64;
        let mut mean = Vec::with_capacity(m.ncols());
        let mut std = Vec::with_capacity(m.ncols());
        let mut degenerate = Vec::new();
        for c in 0..m.ncols() {
            let col = m.column(c);
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(mu);
            if sd > 0.0 {
                std.push(sd);
            } else {
                degenerate.push(c);
                std.push(1.0);
            }
        }
        (Normalization { mean, std }, degenerate)
    }

    pub fn apply(&self, m: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = m.to_owned();
        for mut row in out.rows_mut() {
            for c in 0..row.len() {
                row[c] = (row[c] - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn invert(&self, m: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = m.to_owned();
        for mut row in out.rows_mut() {
            for c in 0..row.len() {
                row[c] = row[c] * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

/// PCA carry-over from the previous layer: column means and the retained
/// orthonormal basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarryBasis {
    pub mean: Array1<f64>,
    pub basis: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelmLayer {
    /// Freshly random input weights: L rows on the first layer, L - l after.
    pub w_fresh: Array2<f64>,
    pub b_fresh: Array1<f64>,
    /// Projection of the previous hidden output; absent on the first layer.
    pub carry: Option<CarryBasis>,
    /// Output weights solved on this layer's hidden matrix.
    pub psi: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelmModel {
    pub config: SelmConfig,
    pub layers: Vec<SelmLayer>,
    pub x_norm: Normalization,
    pub t_norm: Normalization,
    /// Training RMSE (normalized target space) per stack iteration.
    pub train_rmse: Vec<f64>,
    pub warnings: Vec<String>,
    /// Number of classes for a classification head, None for regression.
    pub classes: Option<usize>,
}

const MODEL_MAGIC: &[u8; 8] = b"SELMMDL1";

impl SelmModel {
    pub fn d_in(&self) -> usize {
        self.x_norm.mean.len()
    }
    pub fn d_out(&self) -> usize {
        self.t_norm.mean.len()
    }

    /// Versioned binary serialization, round-trip exact.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MODEL_MAGIC.to_vec();
        out.extend(bincode::serialize(self).expect("model serialization cannot fail"));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SelmModel, SelmError> {
        if bytes.len() < 8 || &bytes[..8] != MODEL_MAGIC {
            return Err(SelmError::DimensionMismatch(
                "not a serialized SELM model (bad magic)".into(),
            ));
        }
        bincode::deserialize(&bytes[8..])
            .map_err(|e| SelmError::DimensionMismatch(format!("malformed model: {}", e)))
    }
}

/// Hidden-layer response `g(W x + b)` for every sample row of `x`.
pub fn hidden_layer(
    x: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    b: &Array1<f64>,
    activation: Activation,
) -> Result<Array2<f64>, SelmError> {
    if x.ncols() != w.ncols() {
        return Err(SelmError::DimensionMismatch(format!(
            "x has {} features, W expects {}",
            x.ncols(),
            w.ncols()
        )));
    }
    if w.nrows() != b.len() {
        return Err(SelmError::DimensionMismatch(format!(
            "W has {} neurons, b has {}",
            w.nrows(),
            b.len()
        )));
    }
    let mut h = x.dot(&w.t());
    for mut row in h.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = activation.apply(*v + b[j]);
        }
    }
    Ok(h)
}

/// Ridge output weights `psi = (ridge I + H'H)^-1 H'T` through a Cholesky
/// factorization.
pub fn solve_output_weights(
    h: &ArrayView2<f64>,
    t: &ArrayView2<f64>,
    ridge: f64,
) -> Result<Array2<f64>, SelmError> {
    if h.nrows() != t.nrows() {
        return Err(SelmError::DimensionMismatch(format!(
            "H has {} rows, T has {}",
            h.nrows(),
            t.nrows()
        )));
    }
    let hth = h.t().dot(h);
    let htt = h.t().dot(t);
    solve_output_weights_gram(hth, &htt, ridge)
}

fn solve_output_weights_gram(
    mut hth: Array2<f64>,
    htt: &Array2<f64>,
    ridge: f64,
) -> Result<Array2<f64>, SelmError> {
    let l = hth.nrows();
    if ridge > 0.0 {
        for d in 0..l {
            hth[[d, d]] += ridge;
        }
    }
    match cholesky_solve(&hth, htt) {
        Ok(psi) => Ok(psi),
        Err(LinalgError::NotPositiveDefinite(info)) if ridge == 0.0 => Err(
            SelmError::SingularSystem(format!("H'H singular with ridge 0 (info {})", info)),
        ),
        Err(LinalgError::NotPositiveDefinite(_)) => {
            // ridge below the roundoff floor of H'H; bump to the smallest
            // numerically effective value and retry once
            let trace: f64 = (0..l).map(|d| hth[[d, d]]).sum();
            let jitter = 1e-14 * trace / l as f64;
            for d in 0..l {
                hth[[d, d]] += jitter;
            }
            cholesky_solve(&hth, htt)
                .map_err(|e| SelmError::SingularSystem(e.to_string()))
        }
        Err(e) => Err(SelmError::SingularSystem(e.to_string())),
    }
}

/// Retained PCA basis of a hidden-layer output.
#[derive(Debug, Clone)]
pub struct PcaReduction {
    /// Projected data `(H - mean) * basis`.
    pub reduced: Array2<f64>,
    pub mean: Array1<f64>,
    /// Orthonormal columns, descending eigenvalue order, sign-fixed so the
    /// largest-magnitude component of each column is positive.
    pub basis: Array2<f64>,
    /// Top eigenvalues of the sample covariance (descending).
    pub eigenvalues: Array1<f64>,
}

/// Top-`l` principal directions of the column-centered covariance of `h`.
pub fn pca_reduce(h: &ArrayView2<f64>, l: usize) -> Result<PcaReduction, SelmError> {
    let hth = h.t().dot(h);
    let mean = column_means(h);
    pca_reduce_gram(h, &hth, &mean, l)
}

fn column_means(h: &ArrayView2<f64>) -> Array1<f64> {
    let n = h.nrows() as f64;
    let mut mean = Array1::zeros(h.ncols());
    for r in h.rows() {
        mean = mean + &r;
    }
    mean.mapv_into(|v| v / n)
}

fn pca_reduce_gram(
    h: &ArrayView2<f64>,
    hth: &Array2<f64>,
    mean: &Array1<f64>,
    l: usize,
) -> Result<PcaReduction, SelmError> {
    let cols = h.ncols();
    if l < 1 || l > cols {
        return Err(SelmError::InvalidConfig(format!(
            "need 1 <= l <= {}, got {}",
            cols, l
        )));
    }
    let ns = h.nrows() as f64;
    if h.nrows() < 2 {
        return Err(SelmError::DimensionMismatch("PCA needs at least 2 rows".into()));
    }
    // centered covariance from the gram matrix: (H'H - Ns m m') / (Ns - 1)
    let mut cov = hth.clone();
    for i in 0..cols {
        for j in 0..cols {
            cov[[i, j]] = (cov[[i, j]] - ns * mean[i] * mean[j]) / (ns - 1.0);
        }
    }
    let (eigenvalues, mut basis) =
        symmetric_top_eigs(&cov, l).map_err(|e| SelmError::SingularSystem(e.to_string()))?;
    // deterministic sign: largest-|component| entry positive, lowest index wins ties
    for mut col in basis.columns_mut() {
        let mut best = 0usize;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    // reduced = (H - 1 m') basis = H basis - 1 (m' basis)
    let mut reduced = h.dot(&basis);
    let shift = mean.dot(&basis);
    for mut row in reduced.rows_mut() {
        for c in 0..row.len() {
            row[c] -= shift[c];
        }
    }
    Ok(PcaReduction {
        reduced,
        mean: mean.clone(),
        basis,
        eigenvalues,
    })
}

fn sample_weights(
    rng: &mut ChaCha12Rng,
    rows: usize,
    cols: usize,
) -> (Array2<f64>, Array1<f64>) {
    let dist = Uniform::new_inclusive(-1.0, 1.0);
    let w = Array2::from_shape_fn((rows, cols), |_| dist.sample(rng));
    let b = Array1::from_shape_fn(rows, |_| dist.sample(rng));
    (w, b)
}

fn rmse(pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let n = (pred.nrows() * pred.ncols()) as f64;
    let ss: f64 = pred
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (ss / n).sqrt()
}

/// Train a stacked ELM regressor.
pub fn train_selm(
    x: &ArrayView2<f64>,
    t: &ArrayView2<f64>,
    cfg: &SelmConfig,
) -> Result<SelmModel, SelmError> {
    cfg.validate()?;
    if x.nrows() != t.nrows() {
        return Err(SelmError::DimensionMismatch(format!(
            "X has {} rows, T has {}",
            x.nrows(),
            t.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(SelmError::DimensionMismatch("training needs Ns >= 2".into()));
    }
    if !x.iter().chain(t.iter()).all(|v| v.is_finite()) {
        return Err(SelmError::DimensionMismatch("non-finite training data".into()));
    }

    let (x_norm, _) = Normalization::fit(x);
    let (t_norm, degenerate_t) = Normalization::fit(t);
    let mut warnings = Vec::new();
    for c in degenerate_t {
        warnings.push(format!("target column {} has zero variance; fit as a constant", c));
    }
    let xn = x_norm.apply(x);
    let tn = t_norm.apply(t);

    let l_full = cfg.hidden_neurons;
    let l_red = cfg.reduced_neurons;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.weight_seed);

    let mut layers: Vec<SelmLayer> = Vec::with_capacity(cfg.stack_iterations);
    let mut train_rmse = Vec::with_capacity(cfg.stack_iterations);

    let (w0, b0) = sample_weights(&mut rng, l_full, xn.ncols());
    let mut h = hidden_layer(&xn.view(), &w0.view(), &b0, cfg.activation)?;
    let mut pending_w = w0;
    let mut pending_b = b0;
    let mut pending_carry: Option<CarryBasis> = None;

    for iter in 0..cfg.stack_iterations {
        let hth = h.t().dot(&h);
        let htt = h.t().dot(&tn);
        let psi = solve_output_weights_gram(hth.clone(), &htt, cfg.ridge)?;
        train_rmse.push(rmse(&h.dot(&psi), &tn));
        layers.push(SelmLayer {
            w_fresh: pending_w.clone(),
            b_fresh: pending_b.clone(),
            carry: pending_carry.take(),
            psi,
        });
        if iter + 1 == cfg.stack_iterations {
            break;
        }
        let mean = column_means(&h.view());
        let pca = pca_reduce_gram(&h.view(), &hth, &mean, l_red)?;
        let (w_new, b_new) = sample_weights(&mut rng, l_full - l_red, xn.ncols());
        let h_new = hidden_layer(&xn.view(), &w_new.view(), &b_new, cfg.activation)?;
        h = concatenate(Axis(1), &[pca.reduced.view(), h_new.view()])
            .expect("row counts match");
        pending_w = w_new;
        pending_b = b_new;
        pending_carry = Some(CarryBasis {
            mean: pca.mean,
            basis: pca.basis,
        });
    }

    Ok(SelmModel {
        config: *cfg,
        layers,
        x_norm,
        t_norm,
        train_rmse,
        warnings,
        classes: None,
    })
}

/// Replay the layer recipe on new inputs and de-normalize the outputs.
///
/// Rows are processed one at a time through the same vector kernels, so a
/// batch prediction and the per-row predictions are bit-identical.
pub fn selm_predict(model: &SelmModel, x: &ArrayView2<f64>) -> Result<Array2<f64>, SelmError> {
    if x.ncols() != model.d_in() {
        return Err(SelmError::DimensionMismatch(format!(
            "model expects {} features, got {}",
            model.d_in(),
            x.ncols()
        )));
    }
    if model.layers.is_empty() {
        return Err(SelmError::DimensionMismatch("model has no layers".into()));
    }
    let xn = model.x_norm.apply(x);
    let act = model.config.activation;
    // per-layer projection shift (mean' basis), shared across rows
    let shifts: Vec<Option<Array1<f64>>> = model
        .layers
        .iter()
        .map(|l| l.carry.as_ref().map(|c| c.mean.dot(&c.basis)))
        .collect();
    let last = model.layers.last().expect("nonempty");
    let mut out = Array2::zeros((x.nrows(), model.d_out()));
    for r in 0..xn.nrows() {
        let x_r = xn.row(r);
        let mut h: Option<Array1<f64>> = None;
        for (layer, shift) in model.layers.iter().zip(&shifts) {
            let mut fresh = layer.w_fresh.dot(&x_r);
            for (j, v) in fresh.iter_mut().enumerate() {
                *v = act.apply(*v + layer.b_fresh[j]);
            }
            h = Some(match (&h, &layer.carry, shift) {
                (None, None, None) => fresh,
                (Some(prev), Some(carry), Some(shift)) => {
                    let mut reduced = carry.basis.t().dot(prev);
                    for (c, v) in reduced.iter_mut().enumerate() {
                        *v -= shift[c];
                    }
                    let mut joined = Array1::zeros(reduced.len() + fresh.len());
                    joined.slice_mut(ndarray::s![..reduced.len()]).assign(&reduced);
                    joined.slice_mut(ndarray::s![reduced.len()..]).assign(&fresh);
                    joined
                }
                _ => {
                    return Err(SelmError::DimensionMismatch(
                        "layer carry structure is inconsistent".into(),
                    ))
                }
            });
        }
        let h = h.expect("at least one layer");
        let y_n = last.psi.t().dot(&h);
        for c in 0..y_n.len() {
            out[[r, c]] = y_n[c] * model.t_norm.std[c] + model.t_norm.mean[c];
        }
    }
    Ok(out)
}

/// Train a classification head: targets are one-hot class rows.
pub fn train_classifier(
    x: &ArrayView2<f64>,
    labels: &[usize],
    cfg: &SelmConfig,
) -> Result<SelmModel, SelmError> {
    if labels.len() != x.nrows() {
        return Err(SelmError::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            x.nrows()
        )));
    }
    let m = labels.iter().copied().max().map(|v| v + 1).unwrap_or(0);
    if m == 0 {
        return Err(SelmError::DimensionMismatch("no labels".into()));
    }
    let mut onehot = Array2::zeros((x.nrows(), m));
    for (r, &c) in labels.iter().enumerate() {
        onehot[[r, c]] = 1.0;
    }
    let mut model = train_selm(x, &onehot.view(), cfg)?;
    model.classes = Some(m);
    Ok(model)
}

/// Argmax over class columns; ties break toward the lowest class index.
pub fn classify(model: &SelmModel, x: &ArrayView2<f64>) -> Result<Vec<usize>, SelmError> {
    let m = model.classes.ok_or(SelmError::NotAClassifier)?;
    let scores = selm_predict(model, x)?;
    Ok(scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for c in 1..m {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}
