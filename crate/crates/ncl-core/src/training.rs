//! Optimization drivers: exact full-batch descent with backtracking,
//! mini-batch stochastic descent, projected-gradient symmetric and
//! asymmetric NMF, convergence detection, and dead-dimension accounting.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_all, Encoder};
use crate::error::{NclError, Result};
use crate::features::FeatureTable;
use crate::latent_model::{seeded, LatentClassModel, TwoViewModel};
use crate::linalg::{max_asymmetry, standard_normal};
use crate::objectives::{
    ce_loss, infonce_loss, l1_regularized_loss, mm_spectral_loss, nce_loss,
    spectral_loss_batch, spectral_loss_population, InfoNceConfig, LossGrads, LossReport,
};
use crate::reparam::NonNegTransform;
use rand::Rng;

/// Activation threshold shared by the dead-dimension accounting and the
/// sparsity metrics.
pub const ACTIVATION_THRESHOLD: f64 = 1e-5;

/// Revival mass for frozen units and zeroed factor entries. Escape
/// directions grow exponentially, so an infinitesimal seed suffices while
/// keeping the loss bump below the monotone-descent slack.
pub const REVIVE_EPSILON: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    MomentumGd,
    AdamLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

/// Training configuration. `batch_size = 0` selects full-batch exact
/// gradients; the convergence window counts consecutive small loss deltas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub steps: usize,
    pub batch_size: usize,
    /// Negatives per step in batch mode; 0 means `batch_size`.
    pub negatives: usize,
    pub tolerance: f64,
    pub convergence_window: usize,
    pub backtracking: bool,
    pub seed: u64,
    /// Checkpoint cadence used by the experiment runner; 0 disables.
    pub snapshot_every: usize,
    /// On convergence, revive frozen units / zeroed entries this many
    /// times before stopping (full-batch runs only).
    pub revive_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Gd,
            learning_rate: 0.5,
            schedule: Schedule::Constant,
            steps: 2000,
            batch_size: 0,
            negatives: 0,
            tolerance: 1e-13,
            convergence_window: 50,
            backtracking: true,
            seed: 0,
            snapshot_every: 0,
            revive_rounds: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(NclError::ConfigInvalid(
                "learning rate must be finite and >= 0".into(),
            ));
        }
        if self.steps == 0 {
            return Err(NclError::ConfigInvalid("step budget must be positive".into()));
        }
        if self.tolerance < 0.0 {
            return Err(NclError::ConfigInvalid("tolerance must be >= 0".into()));
        }
        if self.convergence_window == 0 {
            return Err(NclError::ConfigInvalid(
                "convergence window must be positive".into(),
            ));
        }
        Ok(())
    }

    fn rate_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = step as f64 / self.steps as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// What to optimize. The spectral objective serves both CL and NCL; the
/// non-negativity constraint is the encoder's output transform.
#[derive(Debug, Clone)]
pub enum ObjectiveSpec {
    Spectral {
        l1_lambda: f64,
    },
    InfoNce {
        temperature: f64,
        cosine: bool,
        l1_lambda: f64,
    },
    /// Supervised head training; `nonneg` selects the NCE variant, which
    /// transforms features and class embeddings inside the loss.
    CrossEntropy {
        labels: Vec<usize>,
        n_labels: usize,
        nonneg: Option<NonNegTransform>,
    },
}

/// One trace row per executed step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub dead_dims: usize,
    pub millis: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn final_dead_dims(&self) -> Option<usize> {
        self.rows.last().map(|r| r.dead_dims)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "step,loss,grad_norm,dead_dims,ms")?;
        for row in &self.rows {
            writeln!(
                w,
                "{},{:.16e},{:.16e},{},{:.3}",
                row.step, row.loss, row.grad_norm, row.dead_dims, row.millis
            )?;
        }
        Ok(())
    }
}

/// Result of a training run. `head` carries the class embeddings for the
/// supervised objectives.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: TrainTrace,
    pub head: Option<Array2<f64>>,
}

/// Dimensions with no activation above the threshold anywhere in the table.
pub fn dead_dimension_count(features: &Array2<f64>, threshold: f64) -> usize {
    (0..features.ncols())
        .filter(|&d| features.column(d).iter().all(|v| v.abs() <= threshold))
        .count()
}

struct Optimizer {
    kind: OptimizerKind,
    momentum: Vec<f64>,
    second: Vec<f64>,
    t: usize,
}

impl Optimizer {
    fn new(kind: OptimizerKind, dim: usize) -> Self {
        Self {
            kind,
            momentum: vec![0.0; dim],
            second: vec![0.0; dim],
            t: 0,
        }
    }

    /// Proposed parameter update for the given rate, without mutating the
    /// internal state (so backtracking can re-propose).
    fn propose(&self, params: &[f64], grad: &[f64], rate: f64) -> Vec<f64> {
        match self.kind {
            OptimizerKind::Gd => params
                .iter()
                .zip(grad)
                .map(|(p, g)| p - rate * g)
                .collect(),
            OptimizerKind::MomentumGd => {
                let beta = 0.9;
                params
                    .iter()
                    .zip(grad.iter().zip(&self.momentum))
                    .map(|(p, (g, m))| p - rate * (beta * m + g))
                    .collect()
            }
            OptimizerKind::AdamLike => {
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                let t = (self.t + 1) as f64;
                params
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let m = b1 * self.momentum[i] + (1.0 - b1) * grad[i];
                        let v = b2 * self.second[i] + (1.0 - b2) * grad[i] * grad[i];
                        let mh = m / (1.0 - b1.powf(t));
                        let vh = v / (1.0 - b2.powf(t));
                        p - rate * mh / (vh.sqrt() + eps)
                    })
                    .collect()
            }
        }
    }

    fn commit(&mut self, grad: &[f64]) {
        match self.kind {
            OptimizerKind::Gd => {}
            OptimizerKind::MomentumGd => {
                let beta = 0.9;
                for (m, g) in self.momentum.iter_mut().zip(grad) {
                    *m = beta * *m + g;
                }
            }
            OptimizerKind::AdamLike => {
                let (b1, b2) = (0.9, 0.999);
                for i in 0..grad.len() {
                    self.momentum[i] = b1 * self.momentum[i] + (1.0 - b1) * grad[i];
                    self.second[i] =
                        b2 * self.second[i] + (1.0 - b2) * grad[i] * grad[i];
                }
            }
        }
        self.t += 1;
    }
}

/// Shared convergence bookkeeping: a run stops early once the loss delta
/// stays under the tolerance for `window` consecutive checks.
struct ConvergenceWatch {
    tolerance: f64,
    window: usize,
    streak: usize,
    last: Option<f64>,
}

impl ConvergenceWatch {
    fn new(tolerance: f64, window: usize) -> Self {
        Self {
            tolerance,
            window,
            streak: 0,
            last: None,
        }
    }

    fn converged(&mut self, loss: f64) -> bool {
        if let Some(prev) = self.last {
            if (loss - prev).abs() < self.tolerance {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.last = Some(loss);
        self.streak >= self.window
    }
}

// ---------------------------------------------------------------------------
// Encoder training
// ---------------------------------------------------------------------------

/// Train an encoder (and, for the supervised objectives, a class-embedding
/// head) against the model. Full-batch mode uses population-exact losses
/// and optional backtracking; batch mode draws pairs and negatives from the
/// model with the seeded sampler.
pub fn train(
    enc: &mut dyn Encoder,
    objective: &ObjectiveSpec,
    model: &LatentClassModel,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = model.n_samples();
    let k = enc.feature_dim();

    let mut head = match objective {
        ObjectiveSpec::CrossEntropy {
            labels,
            n_labels,
            nonneg,
        } => {
            if labels.len() != n {
                return Err(NclError::ConfigInvalid(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    n
                )));
            }
            if *n_labels < 2 {
                return Err(NclError::DegenerateLabels);
            }
            Some(init_head(k, *n_labels, nonneg.is_some(), cfg.seed ^ 0x9e3779b9))
        }
        _ => None,
    };
    if matches!(objective, ObjectiveSpec::InfoNce { .. }) && cfg.batch_size == 0 {
        return Err(NclError::ConfigInvalid(
            "the InfoNCE objective requires batch mode (batch_size > 0)".into(),
        ));
    }

    let head_len = head.as_ref().map_or(0, |h| h.len());
    let mut params = enc.params();
    params.extend(head.as_ref().map(flatten).unwrap_or_default());
    let mut optimizer = Optimizer::new(cfg.optimizer, params.len());
    let mut watch = ConvergenceWatch::new(cfg.tolerance, cfg.convergence_window);
    let mut trace = TrainTrace::default();
    let mut rng = seeded(cfg.seed);
    let mut revive_rounds_left = cfg.revive_rounds;
    let all_indices: Vec<usize> = (0..n).collect();

    // Current loss and gradient, refreshed after each accepted update.
    let (mut loss, mut grad) = eval_objective(
        enc, &mut head, head_len, &params, objective, model, &all_indices, None,
    )?;

    for step in 0..cfg.steps {
        let started = std::time::Instant::now();
        if !loss.is_finite() {
            return Err(NclError::DivergenceDetected { step });
        }

        let batch = if cfg.batch_size > 0 {
            Some(draw_batch(model, cfg, &mut rng))
        } else {
            None
        };
        if batch.is_some() {
            // Stochastic mode: the gradient must come from this step's batch.
            let (batch_loss, batch_grad) = eval_objective(
                enc,
                &mut head,
                head_len,
                &params,
                objective,
                model,
                &all_indices,
                batch.as_ref(),
            )?;
            loss = batch_loss;
            grad = batch_grad;
            if !loss.is_finite() {
                return Err(NclError::DivergenceDetected { step });
            }
        }

        let mut rate = cfg.rate_at(step);
        let mut candidate = optimizer.propose(&params, &grad, rate);
        let use_backtracking =
            cfg.backtracking && cfg.batch_size == 0 && matches!(cfg.optimizer, OptimizerKind::Gd);
        let mut next = eval_objective(
            enc, &mut head, head_len, &candidate, objective, model, &all_indices, None,
        )?;
        if use_backtracking {
            let mut halvings = 0;
            while next.0 > loss + 1e-12 && halvings < 60 {
                rate *= 0.5;
                candidate = optimizer.propose(&params, &grad, rate);
                next = eval_objective(
                    enc, &mut head, head_len, &candidate, objective, model, &all_indices, None,
                )?;
                halvings += 1;
            }
        }
        if !next.0.is_finite() {
            return Err(NclError::DivergenceDetected { step });
        }
        optimizer.commit(&grad);
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        params = candidate;
        if cfg.batch_size == 0 {
            (loss, grad) = next;
        } else {
            loss = next.0;
        }

        let table = current_features(enc, &mut head, head_len, &params, n)?;
        trace.rows.push(TraceRow {
            step,
            loss,
            grad_norm,
            dead_dims: dead_dimension_count(&table, ACTIVATION_THRESHOLD),
            millis: started.elapsed().as_secs_f64() * 1e3,
        });

        if watch.converged(loss) {
            // Plain-relu runs can strand whole rows behind frozen negative
            // weights (a provably suboptimal absorbing state). Revive them
            // with infinitesimal positive mass and keep descending; the
            // loss bump is far below the monotone-descent resolution, and
            // a true optimum simply re-freezes the revived entries.
            if revive_rounds_left > 0 && cfg.batch_size == 0 {
                revive_rounds_left -= 1;
                apply_params(enc, &mut head, head_len, &params)?;
                let revived = enc.revive_frozen(REVIVE_EPSILON, &mut rng);
                if revived > 0 {
                    params = enc.params();
                    params.extend(head.as_ref().map(flatten).unwrap_or_default());
                    (loss, grad) = eval_objective(
                        enc, &mut head, head_len, &params, objective, model, &all_indices,
                        None,
                    )?;
                    watch = ConvergenceWatch::new(cfg.tolerance, cfg.convergence_window);
                    continue;
                }
            }
            break;
        }
    }

    apply_params(enc, &mut head, head_len, &params)?;
    Ok(TrainOutcome { trace, head })
}

fn init_head(k: usize, n_labels: usize, nonneg: bool, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    let scale = 1.0 / (k as f64).sqrt();
    Array2::from_shape_fn((k, n_labels), |_| {
        if nonneg {
            scale * rng.random::<f64>()
        } else {
            scale * standard_normal(&mut rng)
        }
    })
}

fn flatten(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

struct Batch {
    anchors: Vec<usize>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

fn draw_batch(model: &LatentClassModel, cfg: &TrainConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Batch {
    let b = cfg.batch_size;
    let m = if cfg.negatives == 0 { b } else { cfg.negatives };
    let mut anchors = Vec::with_capacity(b);
    let mut positives = Vec::with_capacity(b);
    for _ in 0..b {
        let (x, xp) = model.sample_pair(rng);
        anchors.push(x);
        positives.push(xp);
    }
    let negatives = (0..m).map(|_| model.sample_negative(rng)).collect();
    Batch {
        anchors,
        positives,
        negatives,
    }
}

fn apply_params(
    enc: &mut dyn Encoder,
    head: &mut Option<Array2<f64>>,
    head_len: usize,
    params: &[f64],
) -> Result<()> {
    let enc_len = params.len() - head_len;
    enc.set_params(&params[..enc_len])?;
    if let Some(h) = head {
        for (dst, &src) in h.iter_mut().zip(&params[enc_len..]) {
            *dst = src;
        }
    }
    Ok(())
}

fn current_features(
    enc: &mut dyn Encoder,
    head: &mut Option<Array2<f64>>,
    head_len: usize,
    params: &[f64],
    n: usize,
) -> Result<Array2<f64>> {
    apply_params(enc, head, head_len, params)?;
    Ok(encode_all(enc, n)?.values().clone())
}

/// Evaluate loss and flat gradient at `params`. In batch mode the three
/// index groups are encoded in one forward pass so the parameter gradient
/// accumulates all of them.
#[allow(clippy::too_many_arguments)]
fn eval_objective(
    enc: &mut dyn Encoder,
    head: &mut Option<Array2<f64>>,
    head_len: usize,
    params: &[f64],
    objective: &ObjectiveSpec,
    model: &LatentClassModel,
    all_indices: &[usize],
    batch: Option<&Batch>,
) -> Result<(f64, Vec<f64>)> {
    apply_params(enc, head, head_len, params)?;
    match batch {
        None => {
            let state = enc.forward(all_indices)?;
            let features = state.features().clone();
            let (report, head_grad) = full_batch_report(&features, head, objective, model)?;
            let upstream = match &report.grads {
                Some(LossGrads::Table(g)) => g.clone(),
                Some(LossGrads::Pair { primary, .. }) => primary.clone(),
                _ => {
                    return Err(NclError::ConfigInvalid(
                        "population objective produced no table gradient".into(),
                    ))
                }
            };
            let mut grad = enc.grad_params(&state, &upstream)?;
            grad.extend(head_grad.as_ref().map(flatten).unwrap_or_default());
            Ok((report.loss, grad))
        }
        Some(b) => {
            let mut joined = b.anchors.clone();
            joined.extend_from_slice(&b.positives);
            joined.extend_from_slice(&b.negatives);
            let state = enc.forward(&joined)?;
            let rows = state.features();
            let na = b.anchors.len();
            let nn = b.negatives.len();
            let anchors = rows.slice(ndarray::s![0..na, ..]).to_owned();
            let positives = rows.slice(ndarray::s![na..2 * na, ..]).to_owned();
            let negatives = rows.slice(ndarray::s![2 * na.., ..]).to_owned();

            let report = match objective {
                ObjectiveSpec::Spectral { l1_lambda } => {
                    let base = spectral_loss_batch(&anchors, &positives, &negatives, true)?;
                    l1_regularized_loss(base, &anchors, *l1_lambda, None)?
                }
                ObjectiveSpec::InfoNce {
                    temperature,
                    cosine,
                    l1_lambda,
                } => {
                    let config = InfoNceConfig {
                        temperature: *temperature,
                        cosine: *cosine,
                        mean_negatives: false,
                    };
                    let base = infonce_loss(&anchors, &positives, &negatives, &config, true)?;
                    l1_regularized_loss(base, &anchors, *l1_lambda, None)?
                }
                ObjectiveSpec::CrossEntropy { .. } => {
                    return Err(NclError::ConfigInvalid(
                        "supervised objectives run full-batch".into(),
                    ))
                }
            };
            let Some(LossGrads::Batch {
                anchor,
                positive,
                negative,
            }) = &report.grads
            else {
                return Err(NclError::ConfigInvalid(
                    "batch objective produced no batch gradient".into(),
                ));
            };
            let mut upstream = Array2::zeros((joined.len(), rows.ncols()));
            upstream
                .slice_mut(ndarray::s![0..na, ..])
                .assign(anchor);
            upstream
                .slice_mut(ndarray::s![na..2 * na, ..])
                .assign(positive);
            if nn > 0 {
                upstream
                    .slice_mut(ndarray::s![2 * na.., ..])
                    .assign(negative);
            }
            let grad = enc.grad_params(&state, &upstream)?;
            Ok((report.loss, grad))
        }
    }
}

/// Full-batch loss report plus the head gradient for supervised objectives.
fn full_batch_report(
    features: &Array2<f64>,
    head: &Option<Array2<f64>>,
    objective: &ObjectiveSpec,
    model: &LatentClassModel,
) -> Result<(LossReport, Option<Array2<f64>>)> {
    match objective {
        ObjectiveSpec::Spectral { l1_lambda } => {
            let table = FeatureTable::new(features.clone(), false);
            let base = spectral_loss_population(&table, model, true)?;
            let report =
                l1_regularized_loss(base, features, *l1_lambda, Some(model.marginal()))?;
            Ok((report, None))
        }
        ObjectiveSpec::InfoNce { .. } => Err(NclError::ConfigInvalid(
            "the InfoNCE objective requires batch mode".into(),
        )),
        ObjectiveSpec::CrossEntropy {
            labels, nonneg, ..
        } => {
            let w = head
                .as_ref()
                .expect("supervised training allocates a head");
            let report = match nonneg {
                Some(t) => nce_loss(features, w, *t, labels, true)?,
                None => ce_loss(features, w, labels, true)?,
            };
            let head_grad = match &report.grads {
                Some(LossGrads::Pair { secondary, .. }) => Some(secondary.clone()),
                _ => None,
            };
            Ok((report, head_grad))
        }
    }
}

// ---------------------------------------------------------------------------
// Projected-gradient symmetric NMF
// ---------------------------------------------------------------------------

/// Outcome of a factorization run: the factor as an unweighted feature
/// table plus the (monotone) residual trace.
#[derive(Debug, Clone)]
pub struct NmfOutcome {
    pub factor: FeatureTable,
    pub residuals: Vec<f64>,
}

/// Symmetric non-negative factorization of `a_normalized` by projected
/// gradient descent on `|A - F F^T|^2` with the update
/// `F <- max(0, F - eta * 4 (F F^T - A) F)` and backtracking on the step
/// size, so the residual trace is non-increasing.
pub fn projected_gradient_nmf(
    a_normalized: &Array2<f64>,
    marginal: &Array1<f64>,
    k: usize,
    cfg: &TrainConfig,
) -> Result<NmfOutcome> {
    cfg.validate()?;
    if k == 0 {
        return Err(NclError::ConfigInvalid("k must be >= 1".into()));
    }
    let n = a_normalized.nrows();
    if n != a_normalized.ncols() {
        return Err(NclError::DimensionMismatch(format!(
            "matrix is {}x{}",
            n,
            a_normalized.ncols()
        )));
    }
    if marginal.len() != n {
        return Err(NclError::DimensionMismatch(format!(
            "marginal has {} entries for an {n}x{n} matrix",
            marginal.len()
        )));
    }
    let asym = max_asymmetry(a_normalized);
    if asym > 1e-8 {
        return Err(NclError::NonSymmetricInput { max_delta: asym });
    }
    if a_normalized.iter().any(|&v| v < 0.0) {
        return Err(NclError::ConfigInvalid(
            "the factorized matrix must be entrywise non-negative".into(),
        ));
    }

    let mut rng = seeded(cfg.seed);
    let mean = a_normalized.iter().sum::<f64>() / (n * n) as f64;
    let scale = (mean.max(1e-12) / k as f64).sqrt();
    let mut f = Array2::from_shape_fn((n, k), |_| 2.0 * scale * rng.random::<f64>());

    let residual = |f: &Array2<f64>| -> f64 {
        let gram = f.dot(&f.t());
        a_normalized
            .iter()
            .zip(gram.iter())
            .map(|(a, g)| (a - g) * (a - g))
            .sum()
    };

    // Zeroed entries are fixed points of the projected update even when a
    // feasible second-order escape exists (the classic stuck states pair an
    // under-covered block with a redundant column). Perturb every zero
    // entry with infinitesimal positive mass at stagnation; escape
    // directions grow exponentially from any seed, a true optimum just
    // re-zeroes them, and the residual bump stays below the trace's
    // monotonicity resolution.
    let mut rescues_left = cfg.revive_rounds;
    let mut rescue = |f: &mut Array2<f64>, rng: &mut rand_chacha::ChaCha8Rng| -> bool {
        if rescues_left == 0 {
            return false;
        }
        rescues_left -= 1;
        let mut any = false;
        for v in f.iter_mut() {
            if *v == 0.0 {
                *v = REVIVE_EPSILON * rng.random::<f64>();
                any = true;
            }
        }
        any
    };

    let mut res = residual(&f);
    let mut eta = cfg.learning_rate;
    let mut residuals = Vec::with_capacity(cfg.steps);
    let mut watch = ConvergenceWatch::new(cfg.tolerance, cfg.convergence_window);
    let mut step = 0usize;
    while step < cfg.steps {
        let gram = f.dot(&f.t());
        let grad = (&gram - a_normalized).dot(&f).mapv(|v| 4.0 * v);
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = (&f - &grad.mapv(|g| eta * g)).mapv(|v| v.max(0.0));
            let cand_res = residual(&candidate);
            if cand_res <= res {
                f = candidate;
                res = cand_res;
                eta *= 1.1;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        residuals.push(res);
        step += 1;
        if !accepted || watch.converged(res) {
            if rescue(&mut f, &mut rng) {
                res = residual(&f);
                eta = eta.max(1e-3 * cfg.learning_rate);
                watch = ConvergenceWatch::new(cfg.tolerance, cfg.convergence_window);
                continue;
            }
            break;
        }
    }

    let sqrt_marginal = marginal.mapv(f64::sqrt);
    Ok(NmfOutcome {
        factor: FeatureTable::from_weighted(f, sqrt_marginal, true),
        residuals,
    })
}

// ---------------------------------------------------------------------------
// Asymmetric (two-view) training
// ---------------------------------------------------------------------------

/// Jointly train two encoders against the multi-modal spectral loss,
/// full-batch exact. Both parameter sets move in one optimizer step.
pub fn train_asymmetric(
    enc_visual: &mut dyn Encoder,
    enc_language: &mut dyn Encoder,
    model: &TwoViewModel,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if enc_visual.feature_dim() != enc_language.feature_dim() {
        return Err(NclError::ConfigInvalid(format!(
            "view feature dimensions differ: {} vs {}",
            enc_visual.feature_dim(),
            enc_language.feature_dim()
        )));
    }
    let nv = model.n_visual();
    let nl = model.n_language();
    let split = enc_visual.param_count();
    let mut params = enc_visual.params();
    params.extend(enc_language.params());

    let eval = |ev: &mut dyn Encoder,
                el: &mut dyn Encoder,
                p: &[f64]|
     -> Result<(f64, Vec<f64>)> {
        ev.set_params(&p[..split])?;
        el.set_params(&p[split..])?;
        let sv = ev.forward(&(0..nv).collect::<Vec<_>>())?;
        let sl = el.forward(&(0..nl).collect::<Vec<_>>())?;
        let report = mm_spectral_loss(sv.features(), sl.features(), model, true)?;
        let Some(LossGrads::Pair { primary, secondary }) = &report.grads else {
            return Err(NclError::ConfigInvalid("missing gradients".into()));
        };
        let mut grad = ev.grad_params(&sv, primary)?;
        grad.extend(el.grad_params(&sl, secondary)?);
        Ok((report.loss, grad))
    };

    let mut optimizer = Optimizer::new(cfg.optimizer, params.len());
    let mut watch = ConvergenceWatch::new(cfg.tolerance, cfg.convergence_window);
    let mut trace = TrainTrace::default();
    let (mut loss, mut grad) = eval(enc_visual, enc_language, &params)?;
    for step in 0..cfg.steps {
        let started = std::time::Instant::now();
        if !loss.is_finite() {
            return Err(NclError::DivergenceDetected { step });
        }
        let mut rate = cfg.rate_at(step);
        let mut candidate = optimizer.propose(&params, &grad, rate);
        let mut next = eval(enc_visual, enc_language, &candidate)?;
        if cfg.backtracking && matches!(cfg.optimizer, OptimizerKind::Gd) {
            let mut halvings = 0;
            while next.0 > loss + 1e-12 && halvings < 60 {
                rate *= 0.5;
                candidate = optimizer.propose(&params, &grad, rate);
                next = eval(enc_visual, enc_language, &candidate)?;
                halvings += 1;
            }
        }
        if !next.0.is_finite() {
            return Err(NclError::DivergenceDetected { step });
        }
        optimizer.commit(&grad);
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        params = candidate;
        (loss, grad) = next;

        let fv = encode_all(enc_visual, nv)?;
        let dead = dead_dimension_count(fv.values(), ACTIVATION_THRESHOLD);
        trace.rows.push(TraceRow {
            step,
            loss,
            grad_norm,
            dead_dims: dead,
            millis: started.elapsed().as_secs_f64() * 1e3,
        });
        if watch.converged(loss) {
            break;
        }
    }
    enc_visual.set_params(&params[..split])?;
    enc_language.set_params(&params[split..])?;
    Ok(trace)
}
