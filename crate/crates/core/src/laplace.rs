//! Laplace approximation with layer-wise Kronecker-factored precision.
//!
//! A layer whose parameters form the `out x (in + 1)` matrix `X = [W | b]`
//! carries a precision `A ⊗ G` acting on `vec(X)` (column-major), with `A`
//! of size `(in + 1) x (in + 1)` on the input side and `G` of size
//! `out x out` on the output side.
//!
//! Likelihood curvature uses the generalized Gauss-Newton (Fisher) form of
//! the sigmoid-Bernoulli likelihood. Scaling convention: `A` is the *mean*
//! of the bias-augmented layer-input outer products and `G` is the *sum* of
//! `p (1 - p) g g^T` over examples, so `A ⊗ G` targets the curvature summed
//! over the dataset. With a single example the factorization is exact.
//!
//! Posterior assembly combines factors one by one:
//! `A = sqrt(tau beta) A_lik + sqrt(tau alpha) A_prior`, likewise for `G`.
//! An isotropic prior with variance `gamma` is the pair
//! `(gamma^-1/2 I, gamma^-1/2 I)`.

use std::io::{Read, Write};
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{FeatureVector, LabeledExample};
use crate::error::{Error, Result};
use crate::mlp::{
    self, forward_cached, layer_offsets, read_f64, read_u32, sigmoid, Batch, LayerShape, MlpArch,
    ParamVector,
};

/// Monte-Carlo samples used for predictions.
pub const DEFAULT_PREDICTIVE_SAMPLES: usize = 32;

/// Jitter ladder for Cholesky repair.
pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;

/// Largest layer (in parameters) the dense assembly path accepts.
pub const DENSE_LAYER_LIMIT: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerFactorPair {
    /// Input-side factor, `(in + 1) x (in + 1)`.
    pub a: DMatrix<f64>,
    /// Output-side factor, `out x out`.
    pub g: DMatrix<f64>,
}

impl KroneckerFactorPair {
    pub fn new(a: DMatrix<f64>, g: DMatrix<f64>) -> Self {
        Self { a, g }
    }

    /// `sqrt(precision) I` on both sides, i.e. `precision * I` overall.
    pub fn isotropic(shape: LayerShape, precision: f64) -> Self {
        let s = precision.sqrt();
        Self {
            a: DMatrix::identity(shape.cols, shape.cols) * s,
            g: DMatrix::identity(shape.rows, shape.rows) * s,
        }
    }

    pub fn zeros(shape: LayerShape) -> Self {
        Self {
            a: DMatrix::zeros(shape.cols, shape.cols),
            g: DMatrix::zeros(shape.rows, shape.rows),
        }
    }

    /// The dense `A ⊗ G` block.
    pub fn dense(&self) -> DMatrix<f64> {
        self.a.kronecker(&self.g)
    }

    fn matches(&self, shape: LayerShape) -> bool {
        self.a.shape() == (shape.cols, shape.cols) && self.g.shape() == (shape.rows, shape.rows)
    }

    fn scaled_add(&self, wa: f64, other: &Self, wb: f64) -> Self {
        Self {
            a: &self.a * wa + &other.a * wb,
            g: &self.g * wa + &other.g * wb,
        }
    }
}

/// Tempering of a posterior: `H = tau (beta H_likelihood + alpha H_prior)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tempering {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Tempering {
    pub const UNIT: Tempering = Tempering {
        tau: 1.0,
        alpha: 1.0,
        beta: 1.0,
    };

    pub fn new(tau: f64, alpha: f64, beta: f64) -> Result<Self> {
        let t = Self { tau, alpha, beta };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.tau.is_finite() && self.alpha.is_finite() && self.beta.is_finite();
        if !finite || self.tau <= 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "tempering needs tau > 0, alpha >= 0, beta >= 0 (got {self:?})"
            )));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::InvalidConfig("alpha + beta must be positive".into()));
        }
        Ok(())
    }
}

/// Cholesky factors `(L_A, L_G)` of one layer's precision factors.
#[derive(Debug, Clone)]
pub struct CholeskyPair {
    pub la: DMatrix<f64>,
    pub lg: DMatrix<f64>,
}

/// Gaussian over the network parameters with Kronecker-factored precision.
/// Used for priors and for assembled posteriors alike.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    shapes: Vec<LayerShape>,
    mean: ParamVector,
    factors: Vec<KroneckerFactorPair>,
    gamma: Option<f64>,
    tempering: Option<Tempering>,
    chol: OnceLock<Vec<CholeskyPair>>,
}

impl PartialEq for GaussianBelief {
    fn eq(&self, other: &Self) -> bool {
        self.shapes == other.shapes
            && self.mean == other.mean
            && self.factors == other.factors
            && self.gamma.map(f64::to_bits) == other.gamma.map(f64::to_bits)
            && self.tempering == other.tempering
    }
}

impl GaussianBelief {
    pub fn new(
        shapes: Vec<LayerShape>,
        mean: ParamVector,
        factors: Vec<KroneckerFactorPair>,
    ) -> Result<Self> {
        let total = *layer_offsets(&shapes).last().unwrap();
        if mean.len() != total {
            return Err(Error::DimensionMismatch {
                expected: total,
                got: mean.len(),
            });
        }
        if factors.len() != shapes.len() {
            return Err(Error::DimensionMismatch {
                expected: shapes.len(),
                got: factors.len(),
            });
        }
        for (l, (f, s)) in factors.iter().zip(&shapes).enumerate() {
            if !f.matches(*s) {
                return Err(Error::InvalidConfig(format!(
                    "layer {l}: factor shapes do not match a {}x{} layer",
                    s.rows, s.cols
                )));
            }
            let finite = f.a.iter().chain(f.g.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFinite(format!("layer {l} precision factor")));
            }
        }
        if mean.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("belief mean".into()));
        }
        Ok(Self {
            shapes,
            mean,
            factors,
            gamma: None,
            tempering: None,
            chol: OnceLock::new(),
        })
    }

    /// `N(mean, gamma I)`: isotropic prior with variance `gamma`.
    pub fn isotropic(shapes: Vec<LayerShape>, mean: ParamVector, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || gamma.is_nan() {
            return Err(Error::InvalidConfig(format!(
                "gamma must be > 0, got {gamma}"
            )));
        }
        let precision = if gamma.is_infinite() {
            0.0
        } else {
            1.0 / gamma
        };
        let factors = shapes
            .iter()
            .map(|s| KroneckerFactorPair::isotropic(*s, precision))
            .collect();
        let mut b = Self::new(shapes, mean, factors)?;
        b.gamma = Some(gamma);
        Ok(b)
    }

    /// Zero-mean isotropic prior for a fresh head.
    pub fn isotropic_zero(arch: &MlpArch, gamma: f64) -> Result<Self> {
        Self::isotropic(arch.shapes(), ParamVector::zeros(arch.n_params()), gamma)
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn mean(&self) -> &ParamVector {
        &self.mean
    }

    pub fn factors(&self) -> &[KroneckerFactorPair] {
        &self.factors
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma
    }

    pub fn tempering(&self) -> Option<Tempering> {
        self.tempering
    }

    pub fn with_gamma(mut self, gamma: Option<f64>) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn n_params(&self) -> usize {
        self.mean.len()
    }

    /// Cholesky factors of every layer's precision factors. Fails when a
    /// factor is not positive definite (no jitter is added here; assembled
    /// posteriors were already repaired).
    pub fn cholesky(&self) -> Result<&[CholeskyPair]> {
        if let Some(c) = self.chol.get() {
            return Ok(c);
        }
        let pairs = self
            .factors
            .iter()
            .enumerate()
            .map(|(l, f)| {
                let la = f.a.clone().cholesky().ok_or(Error::NotPositiveDefinite {
                    layer: l,
                    max_jitter: 0.0,
                })?;
                let lg = f.g.clone().cholesky().ok_or(Error::NotPositiveDefinite {
                    layer: l,
                    max_jitter: 0.0,
                })?;
                Ok(CholeskyPair {
                    la: la.l(),
                    lg: lg.l(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.chol.get_or_init(|| pairs))
    }

    pub fn is_positive_definite(&self) -> bool {
        self.cholesky().is_ok()
    }

    /// Dense precision of layer `l`.
    pub fn dense_precision(&self, l: usize) -> DMatrix<f64> {
        self.factors[l].dense()
    }

    /// Maps a standard-normal vector onto a draw from this belief. The
    /// transform is `X = M + L_G^{-T} Z L_A^{-1}` per layer, whose
    /// covariance is `A^{-1} ⊗ G^{-1}`.
    pub fn transform_standard(&self, z: &[f64]) -> Result<ParamVector> {
        if z.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: z.len(),
            });
        }
        let chol = self.cholesky()?;
        let offsets = layer_offsets(&self.shapes);
        let mut out = Vec::with_capacity(self.n_params());
        for (l, (s, c)) in self.shapes.iter().zip(chol).enumerate() {
            let range = offsets[l]..offsets[l + 1];
            let zm = DMatrix::from_column_slice(s.rows, s.cols, &z[range.clone()]);
            let y =
                c.lg.tr_solve_lower_triangular(&zm)
                    .ok_or(Error::NotPositiveDefinite {
                        layer: l,
                        max_jitter: 0.0,
                    })?;
            let xt = c.la.tr_solve_lower_triangular(&y.transpose()).ok_or(
                Error::NotPositiveDefinite {
                    layer: l,
                    max_jitter: 0.0,
                },
            )?;
            let x = xt.transpose();
            out.extend(
                x.as_slice()
                    .iter()
                    .zip(&self.mean.as_slice()[range])
                    .map(|(d, m)| m + d),
            );
        }
        Ok(ParamVector::new(out))
    }
}

/// `(A ⊗ G) v`, computed as `vec(G X A^T)` with `X` the column-major
/// reshape of `v`.
pub fn kron_matvec(a: &DMatrix<f64>, g: &DMatrix<f64>, v: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols) = (g.ncols(), a.ncols());
    if v.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            got: v.len(),
        });
    }
    let x = DMatrix::from_column_slice(rows, cols, v);
    let y = g * x * a.transpose();
    Ok(y.as_slice().to_vec())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky with the deterministic jitter ladder `1e-10, 1e-9, .., 1e-4`.
/// Returns the (possibly jittered) matrix and its lower factor.
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    layer: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let sym = symmetrize(m);
    if let Some(c) = sym.clone().cholesky() {
        return Ok((sym, c.l()));
    }
    let n = sym.nrows();
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let candidate = &sym + DMatrix::identity(n, n) * jitter;
        if let Some(c) = candidate.clone().cholesky() {
            return Ok((candidate, c.l()));
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        layer,
        max_jitter: JITTER_MAX,
    })
}

/// Kronecker factors of the likelihood curvature at `params`.
pub fn likelihood_curvature(
    data: &[LabeledExample],
    params: &ParamVector,
    arch: &MlpArch,
) -> Result<Vec<KroneckerFactorPair>> {
    if data.is_empty() {
        return Err(Error::InvalidConfig(
            "curvature needs at least one example".into(),
        ));
    }
    let batch = Batch::from_examples(data, arch.input_dim())?;
    let n = batch.len();
    let cache = forward_cached(&batch.inputs, params, arch)?;
    let shapes = arch.shapes();
    let layers = params.unflatten(&shapes)?;
    let weights: Vec<f64> = cache
        .logits()
        .iter()
        .map(|&z| {
            let p = sigmoid(z);
            (p * (1.0 - p)).sqrt()
        })
        .collect();

    // Backpropagate d logit / d z for every layer.
    let mut out = Vec::with_capacity(shapes.len());
    let mut g_mat = DMatrix::from_element(1, n, 1.0);
    for l in (0..shapes.len()).rev() {
        let mut scaled = g_mat.clone();
        for (mut col, w) in scaled.column_iter_mut().zip(&weights) {
            col *= *w;
        }
        let g_factor = &scaled * scaled.transpose();

        let a_in = &cache.inputs[l];
        let mut aug = DMatrix::from_element(a_in.nrows() + 1, n, 1.0);
        aug.rows_mut(0, a_in.nrows()).copy_from(a_in);
        let a_factor = (&aug * aug.transpose()) / n as f64;
        out.push(KroneckerFactorPair::new(
            symmetrize(&a_factor),
            symmetrize(&g_factor),
        ));

        if l > 0 {
            let w = layers[l].columns(0, shapes[l].cols - 1);
            let mut back = w.transpose() * &g_mat;
            let z_prev = &cache.preacts[l - 1];
            let act = arch.activation();
            back.zip_apply(z_prev, |b, z| {
                *b *= match act {
                    mlp::Activation::Relu => {
                        if z > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    mlp::Activation::Tanh => 1.0 - z.tanh().powi(2),
                }
            });
            g_mat = back;
        }
    }
    out.reverse();
    Ok(out)
}

/// Combines likelihood and prior factors into a posterior centred at
/// `map_params`, repairing each factor with the jitter ladder.
pub fn assemble_posterior(
    map_params: &ParamVector,
    likelihood: &[KroneckerFactorPair],
    prior: &GaussianBelief,
    tempering: Tempering,
) -> Result<GaussianBelief> {
    tempering.validate()?;
    if likelihood.len() != prior.shapes.len() {
        return Err(Error::DimensionMismatch {
            expected: prior.shapes.len(),
            got: likelihood.len(),
        });
    }
    let wl = (tempering.tau * tempering.beta).sqrt();
    let wp = (tempering.tau * tempering.alpha).sqrt();
    let mut factors = Vec::with_capacity(likelihood.len());
    let mut chol = Vec::with_capacity(likelihood.len());
    for (l, (lik, pri)) in likelihood.iter().zip(&prior.factors).enumerate() {
        if !lik.matches(prior.shapes[l]) {
            return Err(Error::InvalidConfig(format!(
                "layer {l}: likelihood factor shape mismatch"
            )));
        }
        let combined = lik.scaled_add(wl, pri, wp);
        let (a, la) = cholesky_with_jitter(&combined.a, l)?;
        let (g, lg) = cholesky_with_jitter(&combined.g, l)?;
        factors.push(KroneckerFactorPair::new(a, g));
        chol.push(CholeskyPair { la, lg });
    }
    let mut post = GaussianBelief::new(prior.shapes.clone(), map_params.clone(), factors)?;
    post.gamma = prior.gamma;
    post.tempering = Some(tempering);
    let _ = post.chol.set(chol);
    Ok(post)
}

/// Exact `tau (beta A_lik ⊗ G_lik + alpha A_prior ⊗ G_prior)` for a small
/// layer.
pub fn assemble_layer_dense(
    likelihood: &KroneckerFactorPair,
    prior: &KroneckerFactorPair,
    tempering: Tempering,
) -> Result<DMatrix<f64>> {
    tempering.validate()?;
    let size = likelihood.a.nrows() * likelihood.g.nrows();
    if size > DENSE_LAYER_LIMIT {
        return Err(Error::InvalidConfig(format!(
            "dense assembly limited to {DENSE_LAYER_LIMIT} parameters, layer has {size}"
        )));
    }
    Ok((likelihood.dense() * tempering.beta + prior.dense() * tempering.alpha) * tempering.tau)
}

/// `count` independent draws from `belief`.
pub fn sample_params(
    belief: &GaussianBelief,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ParamVector>> {
    if count == 0 {
        return Err(Error::InvalidConfig(
            "sample count must be at least 1".into(),
        ));
    }
    belief.cholesky()?;
    (0..count)
        .map(|_| {
            let z: Vec<f64> = (0..belief.n_params())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            belief.transform_standard(&z)
        })
        .collect()
}

/// Monte-Carlo average of sigmoid outputs over the given parameter draws.
pub fn predictive_from_samples(
    x: &FeatureVector,
    samples: &[ParamVector],
    arch: &MlpArch,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no parameter samples".into()));
    }
    let mut acc = 0.0;
    for s in samples {
        acc += mlp::predict_proba(x, s, arch)?;
    }
    Ok((acc / samples.len() as f64).clamp(0.0, 1.0))
}

/// Marginal probability of the positive label under `posterior`.
pub fn predictive(
    x: &FeatureVector,
    posterior: &GaussianBelief,
    arch: &MlpArch,
    count: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let samples = sample_params(posterior, count, rng)?;
    predictive_from_samples(x, &samples, arch)
}

/// The posterior of one task becomes the prior of the next, unchanged.
pub fn posterior_to_prior(posterior: &GaussianBelief) -> GaussianBelief {
    let mut prior = posterior.clone();
    prior.tempering = None;
    prior
}

const BELIEF_MAGIC: &[u8; 8] = b"SALBELF\0";
const BELIEF_VERSION: u32 = 1;

/// Writes a belief checkpoint (all numbers little-endian):
///
/// ```text
/// magic      8 bytes "SALBELF\0"
/// version    u32     1
/// n_layers   u32
/// shapes     n_layers x (rows u32, cols u32)
/// flags      u8      bit 0: tempering present, bit 1: gamma present
/// tau alpha beta gamma   4 x f64 (NaN when absent)
/// per layer: mean block rows*cols f64 (column-major [W | b]),
///            A cols*cols f64, G rows*rows f64 (column-major)
/// ```
pub fn write_belief(w: &mut impl Write, belief: &GaussianBelief) -> Result<()> {
    w.write_all(BELIEF_MAGIC)?;
    w.write_all(&BELIEF_VERSION.to_le_bytes())?;
    w.write_all(&(belief.shapes.len() as u32).to_le_bytes())?;
    for s in &belief.shapes {
        w.write_all(&(s.rows as u32).to_le_bytes())?;
        w.write_all(&(s.cols as u32).to_le_bytes())?;
    }
    let flags = u8::from(belief.tempering.is_some()) | (u8::from(belief.gamma.is_some()) << 1);
    w.write_all(&[flags])?;
    let t = belief.tempering;
    for v in [
        t.map_or(f64::NAN, |t| t.tau),
        t.map_or(f64::NAN, |t| t.alpha),
        t.map_or(f64::NAN, |t| t.beta),
        belief.gamma.unwrap_or(f64::NAN),
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let offsets = layer_offsets(&belief.shapes);
    for (l, f) in belief.factors.iter().enumerate() {
        let block = &belief.mean.as_slice()[offsets[l]..offsets[l + 1]];
        for v in block.iter().chain(f.a.as_slice()).chain(f.g.as_slice()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_belief(r: &mut impl Read) -> Result<GaussianBelief> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BELIEF_MAGIC {
        return Err(Error::Checkpoint("bad belief file magic".into()));
    }
    let version = read_u32(r)?;
    if version != BELIEF_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported belief version {version}"
        )));
    }
    let n = read_u32(r)? as usize;
    let shapes = (0..n)
        .map(|_| {
            Ok(LayerShape {
                rows: read_u32(r)? as usize,
                cols: read_u32(r)? as usize,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut flags = [0u8; 1];
    r.read_exact(&mut flags)?;
    let (tau, alpha, beta, gamma) = (read_f64(r)?, read_f64(r)?, read_f64(r)?, read_f64(r)?);
    let mut mean = Vec::new();
    let mut factors = Vec::with_capacity(n);
    for s in &shapes {
        for _ in 0..s.len() {
            mean.push(read_f64(r)?);
        }
        let a: Vec<f64> = (0..s.cols * s.cols)
            .map(|_| read_f64(r))
            .collect::<Result<_>>()?;
        let g: Vec<f64> = (0..s.rows * s.rows)
            .map(|_| read_f64(r))
            .collect::<Result<_>>()?;
        factors.push(KroneckerFactorPair::new(
            DMatrix::from_column_slice(s.cols, s.cols, &a),
            DMatrix::from_column_slice(s.rows, s.rows, &g),
        ));
    }
    let mut belief = GaussianBelief::new(shapes, ParamVector::new(mean), factors)?;
    if flags[0] & 1 != 0 {
        belief.tempering = Some(Tempering::new(tau, alpha, beta)?);
    }
    if flags[0] & 2 != 0 {
        belief.gamma = Some(gamma);
    }
    Ok(belief)
}
