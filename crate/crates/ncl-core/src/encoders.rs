//! Feature-map parameterizations: a tabular encoder (one learnable row per
//! sample, the exact matrix-factorization view) and a small MLP over sample
//! coordinate embeddings, both with reverse-mode analytic gradients and an
//! optional non-negative output transform.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng as _ChaCha8RngUnused;
use serde::{Deserialize, Serialize};

use crate::error::{NclError, Result};
use crate::features::FeatureTable;
use crate::latent_model::seeded;
use crate::linalg::standard_normal;
use crate::reparam::NonNegTransform;

/// Weight initialization scheme. `Auto` follows the default rule: uniform
/// positive rows when a non-negative transform is present (keeps early
/// outputs alive), fan-scaled Gaussian otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInit {
    Auto,
    Gaussian,
    Uniform,
}

/// Cached forward pass; required by `grad_params`. Tied to the parameter
/// version so gradients against an outdated forward are rejected.
#[derive(Debug, Clone)]
pub struct ForwardState {
    version: u64,
    indices: Vec<usize>,
    /// Input to each affine layer (MLP only).
    layer_inputs: Vec<Array2<f64>>,
    /// Pre-activation of each affine layer (MLP only).
    layer_preacts: Vec<Array2<f64>>,
    /// Final pre-transform output rows.
    output_preact: Array2<f64>,
    /// Post-transform feature rows.
    features: Array2<f64>,
}

impl ForwardState {
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn output_preact(&self) -> &Array2<f64> {
        &self.output_preact
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// A differentiable feature map over sample indices.
pub trait Encoder {
    fn feature_dim(&self) -> usize;
    fn param_count(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    fn transform(&self) -> Option<NonNegTransform>;
    fn version(&self) -> u64;

    /// Forward pass with cached intermediates for the backward pass.
    fn forward(&self, indices: &[usize]) -> Result<ForwardState>;

    /// Chain an upstream feature gradient back to a flat parameter gradient
    /// (aligned with `params`). Requires a state from the current version.
    fn grad_params(&self, state: &ForwardState, upstream: &Array2<f64>) -> Result<Vec<f64>>;

    /// Give frozen units (parameters a plain relu output transform has
    /// permanently zeroed) an infinitesimal positive restart. Returns the
    /// number of revived entries; encoders without such absorbing states
    /// do nothing.
    fn revive_frozen(&mut self, _epsilon: f64, _rng: &mut rand_chacha::ChaCha8Rng) -> usize {
        0
    }
}

/// Feature table for a batch of indices (no cached state).
pub fn encode(enc: &dyn Encoder, indices: &[usize]) -> Result<FeatureTable> {
    let state = enc.forward(indices)?;
    Ok(FeatureTable::new(
        state.features,
        enc.transform().is_some(),
    ))
}

/// Feature table over the whole sample space `0..n`.
pub fn encode_all(enc: &dyn Encoder, n: usize) -> Result<FeatureTable> {
    let indices: Vec<usize> = (0..n).collect();
    encode(enc, &indices)
}

fn check_state(
    state: &ForwardState,
    version: u64,
    upstream: &Array2<f64>,
    k: usize,
) -> Result<()> {
    if state.version != version {
        return Err(NclError::StaleForwardState(format!(
            "state from parameter version {}, encoder at {}",
            state.version, version
        )));
    }
    if upstream.nrows() != state.indices.len() || upstream.ncols() != k {
        return Err(NclError::StaleForwardState(format!(
            "upstream {}x{} against a forward of {} rows x {} dims",
            upstream.nrows(),
            upstream.ncols(),
            state.indices.len(),
            k
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tabular encoder
// ---------------------------------------------------------------------------

/// One learnable row per sample; the identity parameterization of the
/// factor matrix up to the sqrt-marginal weighting.
#[derive(Debug, Clone)]
pub struct TabularEncoder {
    weights: Array2<f64>,
    transform: Option<NonNegTransform>,
    version: u64,
}

impl TabularEncoder {
    pub fn new(
        n_samples: usize,
        feature_dim: usize,
        transform: Option<NonNegTransform>,
        init: EncoderInit,
        seed: u64,
    ) -> Self {
        let mut rng = seeded(seed);
        let scale = 1.0 / (feature_dim as f64).sqrt();
        let gaussian = match init {
            EncoderInit::Auto => transform.is_none(),
            EncoderInit::Gaussian => true,
            EncoderInit::Uniform => false,
        };
        let weights = Array2::from_shape_fn((n_samples, feature_dim), |_| {
            if gaussian {
                scale * standard_normal(&mut rng)
            } else {
                scale * rng.random::<f64>()
            }
        });
        Self {
            weights,
            transform,
            version: 0,
        }
    }

    pub fn from_weights(weights: Array2<f64>, transform: Option<NonNegTransform>) -> Self {
        Self {
            weights,
            transform,
            version: 0,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }
}

impl Encoder for TabularEncoder {
    fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn param_count(&self) -> usize {
        self.weights.len()
    }

    fn params(&self) -> Vec<f64> {
        self.weights.iter().copied().collect()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(NclError::ShapeMismatch(format!(
                "{} params for a {}x{} table",
                params.len(),
                self.weights.nrows(),
                self.weights.ncols()
            )));
        }
        for (dst, &src) in self.weights.iter_mut().zip(params) {
            *dst = src;
        }
        self.version += 1;
        Ok(())
    }

    fn transform(&self) -> Option<NonNegTransform> {
        self.transform
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn forward(&self, indices: &[usize]) -> Result<ForwardState> {
        let n = self.weights.nrows();
        let k = self.feature_dim();
        let mut preact = Array2::zeros((indices.len(), k));
        for (r, &idx) in indices.iter().enumerate() {
            if idx >= n {
                return Err(NclError::IndexOutOfRange { index: idx, n });
            }
            preact.row_mut(r).assign(&self.weights.row(idx));
        }
        let mut features = preact.clone();
        if let Some(t) = self.transform {
            t.forward_inplace(&mut features);
        }
        Ok(ForwardState {
            version: self.version,
            indices: indices.to_vec(),
            layer_inputs: Vec::new(),
            layer_preacts: Vec::new(),
            output_preact: preact,
            features,
        })
    }

    fn grad_params(&self, state: &ForwardState, upstream: &Array2<f64>) -> Result<Vec<f64>> {
        check_state(state, self.version, upstream, self.feature_dim())?;
        let dz = match self.transform {
            Some(t) => upstream * &t.derivative_table(&state.output_preact),
            None => upstream.clone(),
        };
        let mut grad = Array2::<f64>::zeros(self.weights.dim());
        for (r, &idx) in state.indices.iter().enumerate() {
            for c in 0..self.feature_dim() {
                grad[[idx, c]] += dz[[r, c]];
            }
        }
        Ok(grad.iter().copied().collect())
    }

    fn revive_frozen(&mut self, epsilon: f64, rng: &mut rand_chacha::ChaCha8Rng) -> usize {
        // Only the plain relu freezes negative weights (zero gradient);
        // the gelu-backward trick keeps them trainable on its own.
        if self.transform != Some(NonNegTransform::Relu) {
            return 0;
        }
        let mut revived = 0;
        for w in self.weights.iter_mut() {
            if *w < 0.0 {
                *w = epsilon * rng.random::<f64>();
                revived += 1;
            }
        }
        if revived > 0 {
            self.version += 1;
        }
        revived
    }
}

// ---------------------------------------------------------------------------
// MLP encoder
// ---------------------------------------------------------------------------

/// Small MLP over a fixed coordinate embedding of the sample index.
/// Hidden activation is GELU throughout; the output layer is linear with
/// an optional non-negative transform on top.
#[derive(Debug, Clone)]
pub struct MlpEncoder {
    /// N x d_in coordinates, fixed (not trained).
    embedding: Array2<f64>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    transform: Option<NonNegTransform>,
    version: u64,
}

impl MlpEncoder {
    /// Encoder over explicit coordinates. `hidden` lists the hidden widths;
    /// the output layer has `feature_dim` units.
    pub fn new(
        embedding: Array2<f64>,
        hidden: &[usize],
        feature_dim: usize,
        transform: Option<NonNegTransform>,
        seed: u64,
    ) -> Result<Self> {
        if embedding.ncols() == 0 || feature_dim == 0 {
            return Err(NclError::ConfigInvalid(
                "embedding width and feature dimension must be positive".into(),
            ));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(NclError::ConfigInvalid(
                "hidden widths must be positive".into(),
            ));
        }
        let mut rng = seeded(seed);
        let mut sizes = vec![embedding.ncols()];
        sizes.extend_from_slice(hidden);
        sizes.push(feature_dim);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                scale * standard_normal(&mut rng)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            embedding,
            weights,
            biases,
            transform,
            version: 0,
        })
    }

    /// Encoder whose input coordinates are the one-hot embedding of the
    /// sample index.
    pub fn with_one_hot_input(
        n_samples: usize,
        hidden: &[usize],
        feature_dim: usize,
        transform: Option<NonNegTransform>,
        seed: u64,
    ) -> Result<Self> {
        let eye = Array2::from_shape_fn((n_samples, n_samples), |(i, j)| f64::from(i == j));
        Self::new(eye, hidden, feature_dim, transform, seed)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.embedding.ncols()];
        sizes.extend(self.weights.iter().map(|w| w.ncols()));
        sizes
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    /// Activations entering the final affine layer: the pre-projector tap.
    pub fn pre_projector_features(&self, indices: &[usize]) -> Result<Array2<f64>> {
        let state = self.forward(indices)?;
        Ok(state
            .layer_inputs
            .last()
            .expect("at least one layer")
            .clone())
    }

    fn input_rows(&self, indices: &[usize]) -> Result<Array2<f64>> {
        let n = self.embedding.nrows();
        let mut x = Array2::zeros((indices.len(), self.embedding.ncols()));
        for (r, &idx) in indices.iter().enumerate() {
            if idx >= n {
                return Err(NclError::IndexOutOfRange { index: idx, n });
            }
            x.row_mut(r).assign(&self.embedding.row(idx));
        }
        Ok(x)
    }
}

fn gelu_table(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(crate::reparam::gelu)
}

fn gelu_derivative_table(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(crate::reparam::gelu_derivative)
}

impl Encoder for MlpEncoder {
    fn feature_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").ncols()
    }

    fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(NclError::ShapeMismatch(format!(
                "{} params for an MLP with {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for dst in w.iter_mut() {
                *dst = params[offset];
                offset += 1;
            }
            for dst in b.iter_mut() {
                *dst = params[offset];
                offset += 1;
            }
        }
        self.version += 1;
        Ok(())
    }

    fn transform(&self) -> Option<NonNegTransform> {
        self.transform
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn forward(&self, indices: &[usize]) -> Result<ForwardState> {
        let mut x = self.input_rows(indices)?;
        let n_layers = self.weights.len();
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut layer_preacts = Vec::with_capacity(n_layers);
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            layer_inputs.push(x.clone());
            let mut z = x.dot(w);
            for mut row in z.rows_mut() {
                row += b;
            }
            layer_preacts.push(z.clone());
            x = if l + 1 < n_layers { gelu_table(&z) } else { z };
        }
        let output_preact = layer_preacts.last().expect("layers").clone();
        let mut features = output_preact.clone();
        if let Some(t) = self.transform {
            t.forward_inplace(&mut features);
        }
        Ok(ForwardState {
            version: self.version,
            indices: indices.to_vec(),
            layer_inputs,
            layer_preacts,
            output_preact,
            features,
        })
    }

    fn grad_params(&self, state: &ForwardState, upstream: &Array2<f64>) -> Result<Vec<f64>> {
        check_state(state, self.version, upstream, self.feature_dim())?;
        let n_layers = self.weights.len();
        let mut dz = match self.transform {
            Some(t) => upstream * &t.derivative_table(&state.output_preact),
            None => upstream.clone(),
        };
        let mut w_grads: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); n_layers];
        let mut b_grads: Vec<Array1<f64>> = vec![Array1::zeros(0); n_layers];
        for l in (0..n_layers).rev() {
            w_grads[l] = state.layer_inputs[l].t().dot(&dz);
            b_grads[l] = dz.sum_axis(ndarray::Axis(0));
            if l > 0 {
                let dx = dz.dot(&self.weights[l].t());
                dz = dx * gelu_derivative_table(&state.layer_preacts[l - 1]);
            }
        }
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in w_grads.iter().zip(&b_grads) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Encoder wrapper used by configs and checkpoints
// ---------------------------------------------------------------------------

/// Runtime-selected encoder.
#[derive(Debug, Clone)]
pub enum AnyEncoder {
    Tabular(TabularEncoder),
    Mlp(MlpEncoder),
}

impl AnyEncoder {
    pub fn as_dyn(&self) -> &dyn Encoder {
        match self {
            Self::Tabular(e) => e,
            Self::Mlp(e) => e,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn Encoder {
        match self {
            Self::Tabular(e) => e,
            Self::Mlp(e) => e,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Tabular(_) => "tabular",
            Self::Mlp(_) => "mlp",
        }
    }
}
