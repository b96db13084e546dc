//! Small multilayer perceptron used as a binary classifier head.
//!
//! Parameters live in one flat [`ParamVector`]. Layers are stored in order;
//! layer `l` with `in` inputs and `out` outputs occupies `out * (in + 1)`
//! consecutive entries holding the augmented matrix `[W | b]` in
//! column-major order, so the bias is the last column. This is the same
//! `vec(.)` convention the Kronecker factors in [`crate::laplace`] use.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{FeatureVector, LabeledExample};
use crate::error::{Error, Result};
use crate::laplace::{kron_matvec, GaussianBelief};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Shape of one layer's augmented weight matrix `[W | b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    /// Output width.
    pub rows: usize,
    /// Input width plus one for the bias.
    pub cols: usize,
}

impl LayerShape {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            rows: outputs,
            cols: inputs + 1,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layer widths `[d, h1, .., 1]` and the hidden activation. The output is a
/// raw logit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    layer_sizes: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

impl MlpArch {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig(
                "an MLP needs an input width and an output width".into(),
            ));
        }
        if layer_sizes.last() != Some(&1) {
            return Err(Error::InvalidConfig(
                "output width must be exactly 1".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    /// Three weight layers: `d -> 64 -> 32 -> 1` with rectifiers.
    pub fn default_for(input_dim: usize) -> Result<Self> {
        Self::new(vec![input_dim, 64, 32, 1], Activation::Relu)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layer_sizes
            .windows(2)
            .map(|w| LayerShape::new(w[0], w[1]))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.shapes().iter().map(LayerShape::len).sum()
    }
}

/// Start offset of every layer block, plus the total length at the end.
pub fn layer_offsets(shapes: &[LayerShape]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(shapes.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for s in shapes {
        acc += s.len();
        offsets.push(acc);
    }
    offsets
}

/// All network parameters stacked into one vector (see module docs for the
/// ordering).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Splits into per-layer `[W | b]` matrices.
    pub fn unflatten(&self, shapes: &[LayerShape]) -> Result<Vec<DMatrix<f64>>> {
        let offsets = layer_offsets(shapes);
        let total = *offsets.last().unwrap();
        if total != self.len() {
            return Err(Error::DimensionMismatch {
                expected: total,
                got: self.len(),
            });
        }
        Ok(shapes
            .iter()
            .zip(offsets.windows(2))
            .map(|(s, w)| DMatrix::from_column_slice(s.rows, s.cols, &self.0[w[0]..w[1]]))
            .collect())
    }

    pub fn flatten(layers: &[DMatrix<f64>]) -> Self {
        Self(
            layers
                .iter()
                .flat_map(|m| m.as_slice().iter().copied())
                .collect(),
        )
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn layer_view<'a>(&'a self, shape: &LayerShape, offset: usize) -> DMatrixView<'a, f64> {
        DMatrixView::from_slice(
            &self.0[offset..offset + shape.len()],
            shape.rows,
            shape.cols,
        )
    }
}

const PARAM_MAGIC: &[u8; 8] = b"SALPARAM";
const FORMAT_VERSION: u32 = 1;

/// Writes a parameter checkpoint:
///
/// ```text
/// magic   8 bytes  "SALPARAM"
/// version u32 LE   1
/// n       u32 LE   number of layer sizes
/// sizes   n x u32 LE
/// count   u64 LE   number of parameters
/// values  count x f64 LE
/// ```
pub fn write_params(w: &mut impl Write, arch: &MlpArch, params: &ParamVector) -> Result<()> {
    if params.len() != arch.n_params() {
        return Err(Error::DimensionMismatch {
            expected: arch.n_params(),
            got: params.len(),
        });
    }
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(arch.layer_sizes.len() as u32).to_le_bytes())?;
    for &s in &arch.layer_sizes {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<(Vec<usize>, ParamVector)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PARAM_MAGIC {
        return Err(Error::Checkpoint("bad parameter file magic".into()));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = read_u32(r)? as usize;
    let sizes = (0..n)
        .map(|_| read_u32(r).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = read_u64(r)? as usize;
    let expected: usize = sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match layer sizes ({expected})"
        )));
    }
    let values = (0..count)
        .map(|_| read_f64(r))
        .collect::<Result<Vec<_>>>()?;
    Ok((sizes, ParamVector(values)))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against a 0/1 target.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// Column-stacked inputs and 0/1 targets of a dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: DMatrix<f64>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn from_examples(data: &[LabeledExample], dim: usize) -> Result<Self> {
        let mut inputs = DMatrix::zeros(dim, data.len());
        for (i, ex) in data.iter().enumerate() {
            if ex.x.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: ex.x.dim(),
                });
            }
            inputs.column_mut(i).copy_from_slice(ex.x.as_slice());
        }
        Ok(Self {
            inputs,
            targets: data.iter().map(LabeledExample::target).collect(),
        })
    }

    pub fn from_features(xs: &[&FeatureVector], dim: usize) -> Result<Self> {
        let mut inputs = DMatrix::zeros(dim, xs.len());
        for (i, x) in xs.iter().enumerate() {
            if x.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: x.dim(),
                });
            }
            inputs.column_mut(i).copy_from_slice(x.as_slice());
        }
        Ok(Self {
            inputs,
            targets: vec![0.0; xs.len()],
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Batch {
        let mut inputs = DMatrix::zeros(self.inputs.nrows(), idx.len());
        for (j, &i) in idx.iter().enumerate() {
            inputs.set_column(j, &self.inputs.column(i));
        }
        Batch {
            inputs,
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

/// Intermediate values of a batched forward pass.
pub(crate) struct ForwardCache {
    /// Input to each layer (without the bias row).
    pub inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of each layer.
    pub preacts: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &DMatrix<f64> {
        self.preacts.last().expect("at least one layer")
    }
}

fn check_params(arch: &MlpArch, params: &ParamVector) -> Result<()> {
    if params.len() != arch.n_params() {
        return Err(Error::DimensionMismatch {
            expected: arch.n_params(),
            got: params.len(),
        });
    }
    Ok(())
}

pub(crate) fn forward_cached(
    inputs: &DMatrix<f64>,
    params: &ParamVector,
    arch: &MlpArch,
) -> Result<ForwardCache> {
    check_params(arch, params)?;
    if inputs.nrows() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: arch.input_dim(),
            got: inputs.nrows(),
        });
    }
    let shapes = arch.shapes();
    let offsets = layer_offsets(&shapes);
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(shapes.len()),
        preacts: Vec::with_capacity(shapes.len()),
    };
    let mut a = inputs.clone();
    for (l, shape) in shapes.iter().enumerate() {
        let wb = params.layer_view(shape, offsets[l]);
        let w = wb.columns(0, shape.cols - 1);
        let b = wb.column(shape.cols - 1);
        let mut z = w * &a;
        for mut col in z.column_iter_mut() {
            col += &b;
        }
        let next = if l + 1 < shapes.len() {
            z.map(|v| arch.activation.apply(v))
        } else {
            DMatrix::zeros(0, 0)
        };
        cache.inputs.push(a);
        cache.preacts.push(z);
        a = next;
    }
    Ok(cache)
}

/// Logits for every column of `inputs`.
pub fn forward_batch(
    inputs: &DMatrix<f64>,
    params: &ParamVector,
    arch: &MlpArch,
) -> Result<DVector<f64>> {
    check_params(arch, params)?;
    if inputs.nrows() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: arch.input_dim(),
            got: inputs.nrows(),
        });
    }
    let shapes = arch.shapes();
    let offsets = layer_offsets(&shapes);
    let mut a = inputs.clone();
    for (l, shape) in shapes.iter().enumerate() {
        let wb = params.layer_view(shape, offsets[l]);
        let mut z = wb.columns(0, shape.cols - 1) * &a;
        let b = wb.column(shape.cols - 1);
        for mut col in z.column_iter_mut() {
            col += &b;
        }
        if l + 1 < shapes.len() {
            z.apply(|v| *v = arch.activation.apply(*v));
        }
        a = z;
    }
    Ok(DVector::from_iterator(a.ncols(), a.row(0).iter().copied()))
}

/// Logit of a single feature vector.
pub fn forward(x: &FeatureVector, params: &ParamVector, arch: &MlpArch) -> Result<f64> {
    check_params(arch, params)?;
    if x.dim() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: arch.input_dim(),
            got: x.dim(),
        });
    }
    let shapes = arch.shapes();
    let offsets = layer_offsets(&shapes);
    let p = params.as_slice();
    let mut a: Vec<f64> = x.as_slice().to_vec();
    for (l, shape) in shapes.iter().enumerate() {
        let block = &p[offsets[l]..offsets[l + 1]];
        let n_in = shape.cols - 1;
        let mut z: Vec<f64> = block[n_in * shape.rows..].to_vec();
        for (j, aj) in a.iter().enumerate() {
            let col = &block[j * shape.rows..(j + 1) * shape.rows];
            for (zi, w) in z.iter_mut().zip(col) {
                *zi += w * aj;
            }
        }
        if l + 1 < shapes.len() {
            z.iter_mut().for_each(|v| *v = arch.activation.apply(*v));
        }
        a = z;
    }
    Ok(a[0])
}

pub fn predict_proba(x: &FeatureVector, params: &ParamVector, arch: &MlpArch) -> Result<f64> {
    forward(x, params, arch).map(sigmoid)
}

fn check_prior(arch: &MlpArch, prior: &GaussianBelief) -> Result<()> {
    if prior.shapes() != arch.shapes().as_slice() {
        return Err(Error::InvalidConfig(
            "prior layer shapes do not match the architecture".into(),
        ));
    }
    Ok(())
}

/// `0.5 (theta - mu)^T H (theta - mu)` with the prior's Kronecker precision,
/// and its gradient `H (theta - mu)`.
pub fn prior_term(params: &ParamVector, prior: &GaussianBelief) -> Result<(f64, ParamVector)> {
    let shapes = prior.shapes();
    let offsets = layer_offsets(shapes);
    if params.len() != *offsets.last().unwrap() {
        return Err(Error::DimensionMismatch {
            expected: *offsets.last().unwrap(),
            got: params.len(),
        });
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(params.len());
    for (l, f) in prior.factors().iter().enumerate() {
        let range = offsets[l]..offsets[l + 1];
        let delta: Vec<f64> = params.as_slice()[range.clone()]
            .iter()
            .zip(&prior.mean().as_slice()[range])
            .map(|(a, b)| a - b)
            .collect();
        let hd = kron_matvec(&f.a, &f.g, &delta)?;
        value += 0.5 * delta.iter().zip(&hd).map(|(a, b)| a * b).sum::<f64>();
        grad.extend(hd);
    }
    Ok((value, ParamVector(grad)))
}

fn data_loss_and_grad(
    batch: &Batch,
    params: &ParamVector,
    arch: &MlpArch,
    want_grad: bool,
) -> Result<(f64, Option<ParamVector>)> {
    let cache = forward_cached(&batch.inputs, params, arch)?;
    let logits = cache.logits();
    let loss: f64 = logits
        .iter()
        .zip(&batch.targets)
        .map(|(&z, &y)| bce_with_logit(z, y))
        .sum();
    if !want_grad {
        return Ok((loss, None));
    }
    let shapes = arch.shapes();
    let mut grads: Vec<DMatrix<f64>> = Vec::with_capacity(shapes.len());
    let mut delta = DMatrix::from_iterator(
        1,
        batch.len(),
        logits
            .iter()
            .zip(&batch.targets)
            .map(|(&z, &y)| sigmoid(z) - y),
    );
    let layers = params.unflatten(&shapes)?;
    for l in (0..shapes.len()).rev() {
        let a = &cache.inputs[l];
        let mut g = DMatrix::zeros(shapes[l].rows, shapes[l].cols);
        let n_in = shapes[l].cols - 1;
        g.columns_mut(0, n_in).copy_from(&(&delta * a.transpose()));
        g.set_column(n_in, &delta.column_sum());
        grads.push(g);
        if l > 0 {
            let w = layers[l].columns(0, n_in);
            let mut back = w.transpose() * &delta;
            let z_prev = &cache.preacts[l - 1];
            back.zip_apply(z_prev, |b, z| *b *= arch.activation.derivative(z));
            delta = back;
        }
    }
    grads.reverse();
    Ok((loss, Some(ParamVector::flatten(&grads))))
}

/// MAP objective: summed binary cross-entropy plus the Gaussian prior's
/// quadratic term.
pub fn nll_map_loss(
    data: &[LabeledExample],
    params: &ParamVector,
    arch: &MlpArch,
    prior: &GaussianBelief,
) -> Result<f64> {
    check_prior(arch, prior)?;
    let batch = Batch::from_examples(data, arch.input_dim())?;
    let (data_loss, _) = data_loss_and_grad(&batch, params, arch, false)?;
    let (prior_loss, _) = prior_term(params, prior)?;
    Ok(data_loss + prior_loss)
}

/// Exact gradient of [`nll_map_loss`] by backpropagation.
pub fn gradient(
    data: &[LabeledExample],
    params: &ParamVector,
    arch: &MlpArch,
    prior: &GaussianBelief,
) -> Result<ParamVector> {
    check_prior(arch, prior)?;
    let batch = Batch::from_examples(data, arch.input_dim())?;
    loss_and_gradient(&batch, params, arch, prior, 1.0).map(|(_, g)| g)
}

fn loss_and_gradient(
    batch: &Batch,
    params: &ParamVector,
    arch: &MlpArch,
    prior: &GaussianBelief,
    data_weight: f64,
) -> Result<(f64, ParamVector)> {
    let (data_loss, data_grad) = data_loss_and_grad(batch, params, arch, true)?;
    let (prior_loss, mut grad) = prior_term(params, prior)?;
    for (g, d) in grad.0.iter_mut().zip(data_grad.unwrap().0) {
        *g += data_weight * d;
    }
    Ok((data_weight * data_loss + prior_loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains on the full batch every epoch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Scale of the symmetry-breaking perturbation used when the prior mean
    /// is exactly zero. Weights get `N(0, (init_scale / sqrt(fan_in))^2)`.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: None,
            seed: 0,
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector,
    /// Full-data objective before every epoch, followed by the final value.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub best_loss: f64,
}

/// Starting point of MAP training: the prior mean, perturbed only when the
/// mean is identically zero.
pub fn initial_params(arch: &MlpArch, prior: &GaussianBelief, cfg: &TrainConfig) -> ParamVector {
    let mut params = prior.mean().clone();
    if cfg.init_scale > 0.0 && params.as_slice().iter().all(|&v| v == 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shapes = arch.shapes();
        let offsets = layer_offsets(&shapes);
        for (l, s) in shapes.iter().enumerate() {
            let fan_in = (s.cols - 1) as f64;
            let std = cfg.init_scale / fan_in.sqrt();
            let weights = offsets[l]..offsets[l] + s.rows * (s.cols - 1);
            for v in &mut params.0[weights] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    params
}

/// Maximum-a-posteriori training initialised at the prior mean. Returns the
/// iterate with the lowest full-data objective seen.
pub fn train_map(
    data: &[LabeledExample],
    arch: &MlpArch,
    prior: &GaussianBelief,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("training data is empty".into()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::InvalidConfig(
            "learning rate must be positive".into(),
        ));
    }
    check_prior(arch, prior)?;
    let full = Batch::from_examples(data, arch.input_dim())?;
    let n = full.len();
    let batch_size = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5_5A5A);
    let mut params = initial_params(arch, prior, cfg);
    let p = params.len();

    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; p];
    let mut v = vec![0.0; p];
    let mut step = 0i32;

    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..=cfg.epochs {
        let full_batch = batch_size == n;
        let (loss, full_grad) = if full_batch {
            let (l, g) = loss_and_gradient(&full, &params, arch, prior, 1.0)?;
            (l, Some(g))
        } else {
            let (dl, _) = data_loss_and_grad(&full, &params, arch, false)?;
            let (pl, _) = prior_term(&params, prior)?;
            (dl + pl, None)
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        losses.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = params.clone();
        }
        if epoch == cfg.epochs {
            break;
        }

        let grads: Vec<ParamVector> = match full_grad {
            Some(g) => vec![g],
            None => {
                order.shuffle(&mut rng);
                order
                    .chunks(batch_size)
                    .map(|idx| {
                        let sub = full.select(idx);
                        let w = n as f64 / idx.len() as f64;
                        loss_and_gradient(&sub, &params, arch, prior, w).map(|(_, g)| g)
                    })
                    .collect::<Result<_>>()?
            }
        };
        for g in grads {
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (x, gi) in params.0.iter_mut().zip(&g.0) {
                        *x -= cfg.learning_rate * gi;
                    }
                }
                Optimizer::Adam => {
                    step += 1;
                    let bc1 = 1.0 - beta1.powi(step);
                    let bc2 = 1.0 - beta2.powi(step);
                    for i in 0..p {
                        let gi = g.0[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        params.0[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
    Ok(TrainOutcome {
        params: best,
        initial_loss: losses[0],
        best_loss,
        losses,
    })
}
