//! Every training objective, in population-exact and mini-batch form, with
//! analytic gradients with respect to the feature tables.
//!
//! Losses never enforce non-negativity; that constraint lives in the
//! encoder's output transform. The factorization-side objectives are the
//! one exception: `nmf_objective` validates the factor's non-negativity
//! because it is the matrix-side view of the same problem.

use ndarray::{Array1, Array2};

use crate::error::{NclError, Result};
use crate::features::FeatureTable;
use crate::latent_model::{cooccurrence, LatentClassModel, TwoViewModel};
use crate::reparam::NonNegTransform;

/// A loss value, its alignment/uniformity decomposition, and optional
/// gradients. `loss = alignment + uniformity + penalty` exactly.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    pub alignment: f64,
    pub uniformity: f64,
    /// Regularization terms (zero unless an l1 penalty was applied).
    pub penalty: f64,
    pub grads: Option<LossGrads>,
}

/// Gradient bundles for the different loss arities.
#[derive(Debug, Clone)]
pub enum LossGrads {
    /// d loss / d feature-table rows (population losses).
    Table(Array2<f64>),
    /// Two-table losses: (visual / feature side, language / head side).
    Pair {
        primary: Array2<f64>,
        secondary: Array2<f64>,
    },
    /// Mini-batch losses with separate anchor, positive, negative groups.
    Batch {
        anchor: Array2<f64>,
        positive: Array2<f64>,
        negative: Array2<f64>,
    },
}

impl LossReport {
    fn new(alignment: f64, uniformity: f64, grads: Option<LossGrads>) -> Self {
        Self {
            loss: alignment + uniformity,
            alignment,
            uniformity,
            penalty: 0.0,
            grads,
        }
    }

    pub fn table_grad(&self) -> Option<&Array2<f64>> {
        match &self.grads {
            Some(LossGrads::Table(g)) => Some(g),
            _ => None,
        }
    }

    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        let mut add = |g: &Array2<f64>| acc += g.iter().map(|v| v * v).sum::<f64>();
        match &self.grads {
            None => {}
            Some(LossGrads::Table(g)) => add(g),
            Some(LossGrads::Pair { primary, secondary }) => {
                add(primary);
                add(secondary);
            }
            Some(LossGrads::Batch {
                anchor,
                positive,
                negative,
            }) => {
                add(anchor);
                add(positive);
                add(negative);
            }
        }
        acc.sqrt()
    }

    /// The JSON shape used by reports: {loss, alignment, uniformity, grad_norm}.
    pub fn to_fragment(&self) -> serde_json::Value {
        let mut obj = serde_json::json!({
            "loss": self.loss,
            "alignment": self.alignment,
            "uniformity": self.uniformity,
            "grad_norm": self.grad_norm(),
        });
        if self.penalty != 0.0 {
            obj["penalty"] = serde_json::json!(self.penalty);
        }
        obj
    }
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(NclError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Spectral contrastive loss
// ---------------------------------------------------------------------------

/// Exact population spectral contrastive loss
/// `-2 sum_{x,x'} P(x,x') f(x).f(x') + sum_{x,x'} P(x)P(x') (f(x).f(x'))^2`.
///
/// Serves both the unconstrained and the non-negative variant: the
/// constraint lives in the encoder, not here.
pub fn spectral_loss_population(
    features: &FeatureTable,
    model: &LatentClassModel,
    with_grad: bool,
) -> Result<LossReport> {
    let f = features.values();
    if f.nrows() != model.n_samples() {
        return Err(NclError::DimensionMismatch(format!(
            "{} feature rows for {} samples",
            f.nrows(),
            model.n_samples()
        )));
    }
    let raw = cooccurrence(model);
    let a = raw.raw();
    let p = model.marginal();

    let gram = f.dot(&f.t());
    let mut alignment = 0.0;
    let mut uniformity = 0.0;
    for x in 0..f.nrows() {
        for xp in 0..f.nrows() {
            let g = gram[[x, xp]];
            alignment += a[[x, xp]] * g;
            uniformity += p[x] * p[xp] * g * g;
        }
    }
    alignment *= -2.0;

    let grads = with_grad.then(|| {
        // S = f^T diag(p) f; grad = -4 A f + 4 diag(p) f S.
        let weighted = weight_rows(f, p);
        let s = f.t().dot(&weighted);
        let mut grad = f.dot(&s);
        for (x, mut row) in grad.rows_mut().into_iter().enumerate() {
            let px = p[x];
            row.mapv_inplace(|v| 4.0 * px * v);
        }
        grad -= &a.dot(f).mapv(|v| 4.0 * v);
        LossGrads::Table(grad)
    });
    Ok(LossReport::new(alignment, uniformity, grads))
}

fn weight_rows(f: &Array2<f64>, w: &Array1<f64>) -> Array2<f64> {
    let mut out = f.clone();
    for (x, mut row) in out.rows_mut().into_iter().enumerate() {
        let s = w[x];
        row.mapv_inplace(|v| v * s);
    }
    out
}

/// Unbiased mini-batch estimate of the spectral loss: mean of
/// `-2 a_i.p_i` over pairs plus the mean of `(a_i.n_j)^2` over all
/// anchor x negative combinations. Negatives may be empty (uniformity 0).
pub fn spectral_loss_batch(
    anchors: &Array2<f64>,
    positives: &Array2<f64>,
    negatives: &Array2<f64>,
    with_grad: bool,
) -> Result<LossReport> {
    if anchors.nrows() == 0 {
        return Err(NclError::EmptyBatch);
    }
    check_same_shape(anchors, positives, "anchors vs positives")?;
    if negatives.nrows() > 0 && negatives.ncols() != anchors.ncols() {
        return Err(NclError::ShapeMismatch(format!(
            "negative width {} vs anchor width {}",
            negatives.ncols(),
            anchors.ncols()
        )));
    }
    let b = anchors.nrows() as f64;
    let m = negatives.nrows() as f64;

    let mut alignment = 0.0;
    for (a, p) in anchors.rows().into_iter().zip(positives.rows()) {
        alignment += a.dot(&p);
    }
    alignment *= -2.0 / b;

    let cross = anchors.dot(&negatives.t());
    let uniformity = if negatives.nrows() == 0 {
        0.0
    } else {
        cross.iter().map(|v| v * v).sum::<f64>() / (b * m)
    };

    let grads = with_grad.then(|| {
        let grad_anchor_align = positives.mapv(|v| -2.0 * v / b);
        let grad_positive = anchors.mapv(|v| -2.0 * v / b);
        let (grad_anchor, grad_negative) = if negatives.nrows() == 0 {
            (grad_anchor_align, Array2::zeros(negatives.dim()))
        } else {
            let scale = 2.0 / (b * m);
            let ga = grad_anchor_align + cross.dot(negatives).mapv(|v| scale * v);
            let gn = cross.t().dot(anchors).mapv(|v| scale * v);
            (ga, gn)
        };
        LossGrads::Batch {
            anchor: grad_anchor,
            positive: grad_positive,
            negative: grad_negative,
        }
    });
    Ok(LossReport::new(alignment, uniformity, grads))
}

// ---------------------------------------------------------------------------
// InfoNCE
// ---------------------------------------------------------------------------

/// InfoNCE configuration. `mean_negatives` switches the denominator to the
/// `1/M`-weighted negative sum used by the mutual-information estimator;
/// training uses the plain sum.
#[derive(Debug, Clone, Copy)]
pub struct InfoNceConfig {
    pub temperature: f64,
    pub cosine: bool,
    pub mean_negatives: bool,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            cosine: false,
            mean_negatives: false,
        }
    }
}

/// InfoNCE over a batch: each anchor is scored against its positive and the
/// shared negative rows.
pub fn infonce_loss(
    anchors: &Array2<f64>,
    positives: &Array2<f64>,
    negatives: &Array2<f64>,
    config: &InfoNceConfig,
    with_grad: bool,
) -> Result<LossReport> {
    if config.temperature <= 0.0 {
        return Err(NclError::ConfigInvalid(
            "temperature must be positive".into(),
        ));
    }
    if anchors.nrows() == 0 {
        return Err(NclError::EmptyBatch);
    }
    check_same_shape(anchors, positives, "anchors vs positives")?;
    if negatives.nrows() == 0 {
        return Err(NclError::EmptyNegatives);
    }
    if negatives.ncols() != anchors.ncols() {
        return Err(NclError::ShapeMismatch(format!(
            "negative width {} vs anchor width {}",
            negatives.ncols(),
            anchors.ncols()
        )));
    }

    let sim = Similarity::build(config.cosine, anchors, positives, negatives)?;
    let b = anchors.nrows();
    let m = negatives.nrows();
    let tau = config.temperature;
    let log_w = if config.mean_negatives {
        -(m as f64).ln()
    } else {
        0.0
    };

    let mut alignment = 0.0;
    let mut uniformity = 0.0;
    // Softmax weights per anchor over [positive, negatives...], saved for
    // the backward pass.
    let mut q_pos = vec![0.0; b];
    let mut q_neg = Array2::<f64>::zeros((b, m));
    for i in 0..b {
        let z0 = sim.pos[i] / tau;
        let mut zmax = z0;
        for j in 0..m {
            zmax = zmax.max(sim.neg[[i, j]] / tau + log_w);
        }
        let mut denom = (z0 - zmax).exp();
        for j in 0..m {
            denom += (sim.neg[[i, j]] / tau + log_w - zmax).exp();
        }
        let lse = zmax + denom.ln();
        alignment -= z0;
        uniformity += lse;
        if with_grad {
            q_pos[i] = (z0 - lse).exp();
            for j in 0..m {
                q_neg[[i, j]] = (sim.neg[[i, j]] / tau + log_w - lse).exp();
            }
        }
    }
    alignment /= b as f64;
    uniformity /= b as f64;

    let grads = with_grad.then(|| {
        let mut ga = Array2::zeros(anchors.dim());
        let mut gp = Array2::zeros(positives.dim());
        let mut gn = Array2::zeros(negatives.dim());
        let scale = 1.0 / (tau * b as f64);
        for i in 0..b {
            let coeff_pos = (q_pos[i] - 1.0) * scale;
            sim.accumulate_pair_grad(i, coeff_pos, &mut ga, &mut gp);
            for j in 0..m {
                let coeff = q_neg[[i, j]] * scale;
                sim.accumulate_neg_grad(i, j, coeff, &mut ga, &mut gn);
            }
        }
        LossGrads::Batch {
            anchor: ga,
            positive: gp,
            negative: gn,
        }
    });
    Ok(LossReport::new(alignment, uniformity, grads))
}

/// Similarities plus whatever the backward pass needs. Dot-product mode
/// keeps raw rows; cosine mode keeps normalized rows and norms.
struct Similarity {
    cosine: bool,
    pos: Vec<f64>,
    neg: Array2<f64>,
    anchors: Array2<f64>,
    positives: Array2<f64>,
    negatives: Array2<f64>,
    anchor_norms: Vec<f64>,
    positive_norms: Vec<f64>,
    negative_norms: Vec<f64>,
}

impl Similarity {
    fn build(
        cosine: bool,
        anchors: &Array2<f64>,
        positives: &Array2<f64>,
        negatives: &Array2<f64>,
    ) -> Result<Self> {
        let (a, p, n, an, pn, nn) = if cosine {
            let (a, an) = normalize_rows(anchors)?;
            let (p, pn) = normalize_rows(positives)?;
            let (n, nn) = normalize_rows(negatives)?;
            (a, p, n, an, pn, nn)
        } else {
            (
                anchors.clone(),
                positives.clone(),
                negatives.clone(),
                vec![],
                vec![],
                vec![],
            )
        };
        let pos = a
            .rows()
            .into_iter()
            .zip(p.rows())
            .map(|(x, y)| x.dot(&y))
            .collect();
        let neg = a.dot(&n.t());
        Ok(Self {
            cosine,
            pos,
            neg,
            anchors: a,
            positives: p,
            negatives: n,
            anchor_norms: an,
            positive_norms: pn,
            negative_norms: nn,
        })
    }

    /// Add `coeff * d sim(a_i, p_i) / d {a_i, p_i}`.
    fn accumulate_pair_grad(
        &self,
        i: usize,
        coeff: f64,
        ga: &mut Array2<f64>,
        gp: &mut Array2<f64>,
    ) {
        let k = ga.ncols();
        if !self.cosine {
            for c in 0..k {
                ga[[i, c]] += coeff * self.positives[[i, c]];
                gp[[i, c]] += coeff * self.anchors[[i, c]];
            }
        } else {
            let s = self.pos[i];
            for c in 0..k {
                ga[[i, c]] += coeff * (self.positives[[i, c]] - s * self.anchors[[i, c]])
                    / self.anchor_norms[i];
                gp[[i, c]] += coeff * (self.anchors[[i, c]] - s * self.positives[[i, c]])
                    / self.positive_norms[i];
            }
        }
    }

    /// Add `coeff * d sim(a_i, n_j) / d {a_i, n_j}`.
    fn accumulate_neg_grad(
        &self,
        i: usize,
        j: usize,
        coeff: f64,
        ga: &mut Array2<f64>,
        gn: &mut Array2<f64>,
    ) {
        let k = ga.ncols();
        if !self.cosine {
            for c in 0..k {
                ga[[i, c]] += coeff * self.negatives[[j, c]];
                gn[[j, c]] += coeff * self.anchors[[i, c]];
            }
        } else {
            let s = self.neg[[i, j]];
            for c in 0..k {
                ga[[i, c]] += coeff * (self.negatives[[j, c]] - s * self.anchors[[i, c]])
                    / self.anchor_norms[i];
                gn[[j, c]] += coeff * (self.anchors[[i, c]] - s * self.negatives[[j, c]])
                    / self.negative_norms[j];
            }
        }
    }
}

fn normalize_rows(a: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = a.clone();
    let mut norms = Vec::with_capacity(a.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(NclError::ZeroNormFeature { index: i });
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

// ---------------------------------------------------------------------------
// Matrix-factorization objectives
// ---------------------------------------------------------------------------

/// `|A_normalized - F F^T|_F^2` with the non-negativity of the factor
/// enforced. The gradient (with respect to the weighted factor F) is
/// `4 (F F^T - A) F`.
pub fn nmf_objective(
    a_normalized: &Array2<f64>,
    factor: &FeatureTable,
    with_grad: bool,
) -> Result<LossReport> {
    factor.check_nonneg()?;
    mf_objective(a_normalized, factor, with_grad)
}

/// Same residual without the non-negativity check.
pub fn mf_objective(
    a_normalized: &Array2<f64>,
    factor: &FeatureTable,
    with_grad: bool,
) -> Result<LossReport> {
    let f = factor.weighted()?;
    if f.nrows() != a_normalized.nrows() || a_normalized.nrows() != a_normalized.ncols() {
        return Err(NclError::DimensionMismatch(format!(
            "factor {}x{} against matrix {}x{}",
            f.nrows(),
            f.ncols(),
            a_normalized.nrows(),
            a_normalized.ncols()
        )));
    }
    let gram = f.dot(&f.t());
    let a_sq: f64 = a_normalized.iter().map(|v| v * v).sum();
    let cross: f64 = a_normalized
        .iter()
        .zip(gram.iter())
        .map(|(a, g)| a * g)
        .sum();
    let gram_sq: f64 = gram.iter().map(|v| v * v).sum();
    let alignment = a_sq - 2.0 * cross;
    let uniformity = gram_sq;

    let grads = with_grad.then(|| {
        let resid = &gram - a_normalized;
        LossGrads::Table(resid.dot(&f).mapv(|v| 4.0 * v))
    });
    Ok(LossReport::new(alignment, uniformity, grads))
}

/// The constant linking the factorization residual to the spectral loss:
/// `|A_normalized|_F^2 = sum_{x,x'} P(x,x')^2 / (P(x) P(x'))`, so that
/// `nmf_objective(F) = spectral_loss_population(f) + const` for any
/// weighted/unweighted pair.
pub fn equivalence_constant(model: &LatentClassModel) -> f64 {
    let co = cooccurrence(model);
    co.normalized().iter().map(|v| v * v).sum()
}

// ---------------------------------------------------------------------------
// l1 regularization
// ---------------------------------------------------------------------------

/// Add `lambda * E_x |f(x)|_1` to a base loss report. `row_weights` carries
/// the expectation weights (marginal probabilities for population losses,
/// `1/B` uniform when `None`). The subgradient at exact zeros is 0, so
/// zeroed features stay zeroed.
pub fn l1_regularized_loss(
    base: LossReport,
    features: &Array2<f64>,
    lambda: f64,
    row_weights: Option<&Array1<f64>>,
    ) -> Result<LossReport> {
    if lambda < 0.0 {
        return Err(NclError::ConfigInvalid("lambda must be >= 0".into()));
    }
    if let Some(w) = row_weights {
        if w.len() != features.nrows() {
            return Err(NclError::DimensionMismatch(format!(
                "{} weights for {} rows",
                w.len(),
                features.nrows()
            )));
        }
    }
    let uniform = 1.0 / features.nrows() as f64;
    let weight = |x: usize| row_weights.map_or(uniform, |w| w[x]);

    let mut penalty = 0.0;
    for (x, row) in features.rows().into_iter().enumerate() {
        penalty += weight(x) * row.iter().map(|v| v.abs()).sum::<f64>();
    }
    penalty *= lambda;

    let mut report = base;
    report.penalty += penalty;
    report.loss += penalty;
    if lambda > 0.0 {
        if let Some(grads) = &mut report.grads {
            let target = match grads {
                LossGrads::Table(g) => Some(g),
                LossGrads::Batch { anchor, .. } => Some(anchor),
                LossGrads::Pair { primary, .. } => Some(primary),
            };
            if let Some(g) = target {
                if g.dim() != features.dim() {
                    return Err(NclError::ShapeMismatch(
                        "l1 features do not match the base gradient table".into(),
                    ));
                }
                for ((x, c), val) in features.indexed_iter() {
                    g[[x, c]] += lambda * weight(x) * val.signum() * f64::from(*val != 0.0);
                }
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Multi-modal (two-view) losses
// ---------------------------------------------------------------------------

/// Population-exact multi-modal spectral loss
/// `-2 E f_V(x_v).f_L(x_l) + E (f_V(x_v^-).f_L(x_l^-))^2` over a two-view
/// model. Gradients cover both feature tables.
pub fn mm_spectral_loss(
    visual: &Array2<f64>,
    language: &Array2<f64>,
    model: &TwoViewModel,
    with_grad: bool,
) -> Result<LossReport> {
    if visual.nrows() != model.n_visual() || language.nrows() != model.n_language() {
        return Err(NclError::DimensionMismatch(format!(
            "views {}x{} for model with {} visual / {} language samples",
            visual.nrows(),
            language.nrows(),
            model.n_visual(),
            model.n_language()
        )));
    }
    if visual.ncols() != language.ncols() {
        return Err(NclError::DimensionMismatch(
            "view feature dimensions differ".into(),
        ));
    }
    let joint = model.joint();
    let pv = model.marginal_visual();
    let pl = model.marginal_language();

    let cross = visual.dot(&language.t());
    let mut alignment = 0.0;
    let mut uniformity = 0.0;
    for v in 0..visual.nrows() {
        for l in 0..language.nrows() {
            let g = cross[[v, l]];
            alignment += joint[[v, l]] * g;
            uniformity += pv[v] * pl[l] * g * g;
        }
    }
    alignment *= -2.0;

    let grads = with_grad.then(|| {
        let sl = language.t().dot(&weight_rows(language, pl));
        let sv = visual.t().dot(&weight_rows(visual, pv));
        let mut gv = visual.dot(&sl);
        for (v, mut row) in gv.rows_mut().into_iter().enumerate() {
            let w = pv[v];
            row.mapv_inplace(|x| 2.0 * w * x);
        }
        gv -= &joint.dot(language).mapv(|x| 2.0 * x);
        let mut gl = language.dot(&sv);
        for (l, mut row) in gl.rows_mut().into_iter().enumerate() {
            let w = pl[l];
            row.mapv_inplace(|x| 2.0 * w * x);
        }
        gl -= &joint.t().dot(visual).mapv(|x| 2.0 * x);
        LossGrads::Pair {
            primary: gv,
            secondary: gl,
        }
    });
    Ok(LossReport::new(alignment, uniformity, grads))
}

/// `|A_M_normalized - F_V F_L^T|_F^2` with both factors non-negative.
/// Gradients are with respect to the weighted factors.
pub fn asymmetric_nmf_objective(
    a_normalized: &Array2<f64>,
    visual_factor: &FeatureTable,
    language_factor: &FeatureTable,
    with_grad: bool,
) -> Result<LossReport> {
    visual_factor.check_nonneg()?;
    language_factor.check_nonneg()?;
    let fv = visual_factor.weighted()?;
    let fl = language_factor.weighted()?;
    if fv.nrows() != a_normalized.nrows() || fl.nrows() != a_normalized.ncols() {
        return Err(NclError::DimensionMismatch(format!(
            "factors {}x{} / {}x{} against matrix {}x{}",
            fv.nrows(),
            fv.ncols(),
            fl.nrows(),
            fl.ncols(),
            a_normalized.nrows(),
            a_normalized.ncols()
        )));
    }
    if fv.ncols() != fl.ncols() {
        return Err(NclError::DimensionMismatch(
            "factor widths differ".into(),
        ));
    }
    let prod = fv.dot(&fl.t());
    let a_sq: f64 = a_normalized.iter().map(|v| v * v).sum();
    let cross: f64 = a_normalized
        .iter()
        .zip(prod.iter())
        .map(|(a, g)| a * g)
        .sum();
    let prod_sq: f64 = prod.iter().map(|v| v * v).sum();
    let alignment = a_sq - 2.0 * cross;
    let uniformity = prod_sq;

    let grads = with_grad.then(|| {
        let resid = &prod - a_normalized;
        LossGrads::Pair {
            primary: resid.dot(&fl).mapv(|v| 2.0 * v),
            secondary: resid.t().dot(&fv).mapv(|v| 2.0 * v),
        }
    });
    Ok(LossReport::new(alignment, uniformity, grads))
}

/// `|A_M_normalized|_F^2`, the constant linking the asymmetric residual to
/// the multi-modal spectral loss.
pub fn mm_equivalence_constant(model: &TwoViewModel) -> f64 {
    model.normalized().iter().map(|v| v * v).sum()
}

// ---------------------------------------------------------------------------
// Cross-entropy and its non-negative variant
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy of `features . class_embeddings` against the
/// labels. Gradients cover the features and the embeddings.
pub fn ce_loss(
    features: &Array2<f64>,
    class_embeddings: &Array2<f64>,
    labels: &[usize],
    with_grad: bool,
) -> Result<LossReport> {
    if features.nrows() == 0 {
        return Err(NclError::EmptyBatch);
    }
    if features.nrows() != labels.len() {
        return Err(NclError::ShapeMismatch(format!(
            "{} feature rows for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if features.ncols() != class_embeddings.nrows() {
        return Err(NclError::DimensionMismatch(format!(
            "feature dim {} vs embedding rows {}",
            features.ncols(),
            class_embeddings.nrows()
        )));
    }
    let n_labels = class_embeddings.ncols();
    if n_labels < 2 {
        return Err(NclError::DegenerateLabels);
    }
    for &y in labels {
        if y >= n_labels {
            return Err(NclError::LabelOutOfRange { label: y, n_labels });
        }
    }

    let logits = features.dot(class_embeddings);
    let b = features.nrows();
    let mut alignment = 0.0;
    let mut uniformity = 0.0;
    let mut dlogits = with_grad.then(|| Array2::<f64>::zeros(logits.dim()));
    for i in 0..b {
        let row = logits.row(i);
        let zmax = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&z| (z - zmax).exp()).sum();
        let lse = zmax + denom.ln();
        alignment -= logits[[i, labels[i]]];
        uniformity += lse;
        if let Some(d) = dlogits.as_mut() {
            for y in 0..n_labels {
                d[[i, y]] = ((logits[[i, y]] - lse).exp()
                    - f64::from(y == labels[i]))
                    / b as f64;
            }
        }
    }
    alignment /= b as f64;
    uniformity /= b as f64;

    let grads = dlogits.map(|d| LossGrads::Pair {
        primary: d.dot(&class_embeddings.t()),
        secondary: features.t().dot(&d),
    });
    Ok(LossReport::new(alignment, uniformity, grads))
}

/// Non-negative cross-entropy: the transform is applied to both the
/// features and the class embeddings before the inner product, and
/// gradients are chained back through it on both sides.
pub fn nce_loss(
    features: &Array2<f64>,
    class_embeddings: &Array2<f64>,
    transform: NonNegTransform,
    labels: &[usize],
    with_grad: bool,
) -> Result<LossReport> {
    let mut f_plus = features.clone();
    transform.forward_inplace(&mut f_plus);
    let mut w_plus = class_embeddings.clone();
    transform.forward_inplace(&mut w_plus);
    let mut report = ce_loss(&f_plus, &w_plus, labels, with_grad)?;
    if let Some(LossGrads::Pair { primary, secondary }) = &mut report.grads {
        *primary = primary.clone() * transform.derivative_table(features);
        *secondary = secondary.clone() * transform.derivative_table(class_embeddings);
    }
    Ok(report)
}
