//! Finite latent-class generative models with every population quantity
//! computed exactly: co-occurrence matrices, marginals, posteriors, the
//! closed-form optimal features, and the Bayes-optimal linear classifier.
//!
//! Samples are abstract indices `0..N`. A model is immutable once built;
//! sampling takes an explicit rng.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NclError, Result};
use crate::features::FeatureTable;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Latent-class model: class priors, class-conditional sample distributions,
/// and the derived marginal / posterior tables.
#[derive(Debug, Clone)]
pub struct LatentClassModel {
    class_prior: Array1<f64>,
    /// m x N, row c = P(.|c).
    conditional: Array2<f64>,
    /// length N, P(x).
    marginal: Array1<f64>,
    /// N x m, row x = P(.|x).
    posterior: Array2<f64>,
    /// Cumulative distributions for sampling, precomputed.
    prior_cdf: Vec<f64>,
    conditional_cdf: Vec<Vec<f64>>,
    marginal_cdf: Vec<f64>,
}

impl LatentClassModel {
    /// Build a model from explicit priors and conditionals, validating every
    /// distribution and deriving the cached marginal/posterior tables.
    pub fn new(class_prior: Array1<f64>, conditional: Array2<f64>) -> Result<Self> {
        let m = class_prior.len();
        if m == 0 {
            return Err(NclError::ConfigInvalid("at least one latent class".into()));
        }
        if conditional.nrows() != m {
            return Err(NclError::DimensionMismatch(format!(
                "prior has {} classes but conditional has {} rows",
                m,
                conditional.nrows()
            )));
        }
        let n = conditional.ncols();
        if n == 0 {
            return Err(NclError::ConfigInvalid("at least one sample".into()));
        }

        let prior_sum: f64 = class_prior.sum();
        if (prior_sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(NclError::NonStochastic {
                context: "class prior".into(),
                sum: prior_sum,
            });
        }
        if class_prior.iter().any(|&p| p <= 0.0) {
            return Err(NclError::NonStochastic {
                context: "class prior has a non-positive entry; every class needs support".into(),
                sum: prior_sum,
            });
        }
        for (c, row) in conditional.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(NclError::NonStochastic {
                    context: format!("conditional row {c}"),
                    sum: s,
                });
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(NclError::NonStochastic {
                    context: format!("conditional row {c} has a negative entry"),
                    sum: s,
                });
            }
        }

        let marginal = class_prior.dot(&conditional);
        if let Some(idx) = marginal.iter().position(|&p| p <= 0.0) {
            return Err(NclError::ZeroMarginal { index: idx });
        }

        let mut posterior = Array2::zeros((n, m));
        for x in 0..n {
            for c in 0..m {
                posterior[[x, c]] = class_prior[c] * conditional[[c, x]] / marginal[x];
            }
        }

        let prior_cdf = cumulative(class_prior.iter().copied());
        let conditional_cdf = (0..m)
            .map(|c| cumulative(conditional.row(c).iter().copied()))
            .collect();
        let marginal_cdf = cumulative(marginal.iter().copied());

        Ok(Self {
            class_prior,
            conditional,
            marginal,
            posterior,
            prior_cdf,
            conditional_cdf,
            marginal_cdf,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_prior.len()
    }

    pub fn n_samples(&self) -> usize {
        self.conditional.ncols()
    }

    pub fn class_prior(&self) -> &Array1<f64> {
        &self.class_prior
    }

    pub fn conditional(&self) -> &Array2<f64> {
        &self.conditional
    }

    pub fn marginal(&self) -> &Array1<f64> {
        &self.marginal
    }

    pub fn posterior(&self) -> &Array2<f64> {
        &self.posterior
    }

    /// sqrt(P(x)) per sample, the row weighting that turns f into F.
    pub fn sqrt_marginal(&self) -> Array1<f64> {
        self.marginal.mapv(f64::sqrt)
    }

    pub fn min_class_prior(&self) -> f64 {
        self.class_prior.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Draw a positive pair: c ~ P(c), then x and x+ independently from P(.|c).
    pub fn sample_pair(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let c = sample_cdf(&self.prior_cdf, rng);
        let x = sample_cdf(&self.conditional_cdf[c], rng);
        let xp = sample_cdf(&self.conditional_cdf[c], rng);
        (x, xp)
    }

    /// Draw a negative sample from the marginal P(x).
    pub fn sample_negative(&self, rng: &mut ChaCha8Rng) -> usize {
        sample_cdf(&self.marginal_cdf, rng)
    }
}

fn cumulative(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = values
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    cdf
}

fn sample_cdf(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    match cdf.binary_search_by(|v| v.partial_cmp(&u).expect("finite cdf")) {
        Ok(i) => (i + 1).min(cdf.len() - 1),
        Err(i) => i.min(cdf.len() - 1),
    }
}

/// Exact co-occurrence matrix A with A[x,x'] = P(x,x') and its
/// degree-normalized form D^{-1/2} A D^{-1/2}.
#[derive(Debug, Clone)]
pub struct CooccurrenceMatrix {
    raw: Array2<f64>,
    normalized: Array2<f64>,
}

impl CooccurrenceMatrix {
    pub fn raw(&self) -> &Array2<f64> {
        &self.raw
    }

    pub fn normalized(&self) -> &Array2<f64> {
        &self.normalized
    }
}

/// A[x,x'] = sum_c P(c) P(x|c) P(x'|c), plus the normalized form.
pub fn cooccurrence(model: &LatentClassModel) -> CooccurrenceMatrix {
    let cond = model.conditional();
    // A = C^T diag(prior) C, symmetrized explicitly so the invariant holds
    // to the last bit.
    let weighted = {
        let mut w = cond.clone();
        for (c, mut row) in w.rows_mut().into_iter().enumerate() {
            let p = model.class_prior()[c];
            row.mapv_inplace(|v| v * p);
        }
        w
    };
    let mut raw = cond.t().dot(&weighted);
    let n = raw.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (raw[[i, j]] + raw[[j, i]]);
            raw[[i, j]] = v;
            raw[[j, i]] = v;
        }
    }

    let inv_sqrt = model.marginal().mapv(|p| 1.0 / p.sqrt());
    let mut normalized = raw.clone();
    for i in 0..n {
        for j in 0..n {
            normalized[[i, j]] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    CooccurrenceMatrix { raw, normalized }
}

/// Closed-form optimal non-negative features: row x holds
/// P(pi_j | x) / sqrt(P(pi_j)) for the permuted class order. The row
/// weighting sqrt(P(x)) is attached so the weighted table is the exact
/// factor of the normalized co-occurrence matrix.
pub fn ground_truth_phi(model: &LatentClassModel, permutation: &[usize]) -> Result<FeatureTable> {
    ground_truth_phi_padded(model, permutation, model.n_classes())
}

/// Same as [`ground_truth_phi`] but padded with zero columns up to `k >= m`.
pub fn ground_truth_phi_padded(
    model: &LatentClassModel,
    permutation: &[usize],
    k: usize,
) -> Result<FeatureTable> {
    let m = model.n_classes();
    validate_permutation(permutation, m)?;
    if k < m {
        return Err(NclError::DimensionMismatch(format!(
            "feature dimension {k} is smaller than the class count {m}"
        )));
    }
    let n = model.n_samples();
    let mut values = Array2::zeros((n, k));
    for x in 0..n {
        for (j, &pi) in permutation.iter().enumerate() {
            values[[x, j]] = model.posterior()[[x, pi]] / model.class_prior()[pi].sqrt();
        }
    }
    Ok(FeatureTable::new(values, true).with_weighting(model.sqrt_marginal()))
}

fn validate_permutation(perm: &[usize], m: usize) -> Result<()> {
    if perm.len() != m {
        return Err(NclError::InvalidPermutation(format!(
            "length {} does not match class count {}",
            perm.len(),
            m
        )));
    }
    let mut seen = vec![false; m];
    for &p in perm {
        if p >= m || seen[p] {
            return Err(NclError::InvalidPermutation(format!(
                "indices must be a bijection of 0..{m}"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Partition of latent classes into observed labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelMap {
    n_labels: usize,
    /// class index -> label index
    assignment: Vec<usize>,
}

impl LabelMap {
    /// `assignment[c]` is the label of class c; every label in `0..n_labels`
    /// must own at least one class.
    pub fn new(n_labels: usize, assignment: Vec<usize>) -> Result<Self> {
        if n_labels == 0 {
            return Err(NclError::LabelMapMismatch("no labels".into()));
        }
        let mut seen = vec![false; n_labels];
        for &y in &assignment {
            if y >= n_labels {
                return Err(NclError::LabelOutOfRange {
                    label: y,
                    n_labels,
                });
            }
            seen[y] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(NclError::LabelMapMismatch(
                "every label must contain at least one latent class".into(),
            ));
        }
        Ok(Self {
            n_labels,
            assignment,
        })
    }

    /// One label per latent class.
    pub fn identity(m: usize) -> Self {
        Self {
            n_labels: m,
            assignment: (0..m).collect(),
        }
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn n_classes(&self) -> usize {
        self.assignment.len()
    }

    pub fn label_of_class(&self, c: usize) -> usize {
        self.assignment[c]
    }

    /// P(y|x) for every sample: posterior mass summed within each label.
    pub fn label_posterior(&self, model: &LatentClassModel) -> Result<Array2<f64>> {
        if self.n_classes() != model.n_classes() {
            return Err(NclError::LabelMapMismatch(format!(
                "{} classes in the map, {} in the model",
                self.n_classes(),
                model.n_classes()
            )));
        }
        let n = model.n_samples();
        let mut out = Array2::zeros((n, self.n_labels));
        for x in 0..n {
            for c in 0..model.n_classes() {
                out[[x, self.assignment[c]]] += model.posterior()[[x, c]];
            }
        }
        Ok(out)
    }

    /// Hard label per sample: argmax_y P(y|x), ties to the lowest index.
    pub fn hard_labels(&self, model: &LatentClassModel) -> Result<Vec<usize>> {
        let post = self.label_posterior(model)?;
        Ok(post
            .rows()
            .into_iter()
            .map(|row| argmax_lowest(row.iter().copied()))
            .collect())
    }
}

pub(crate) fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut idx = 0;
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            idx = i;
        }
    }
    idx
}

/// Bayes-optimal linear head: column y holds sqrt(P(pi_j)) on the classes
/// belonging to label y. Scores against `ground_truth_phi` rows reproduce
/// P(y|x) exactly.
pub fn bayes_classifier_weights(
    model: &LatentClassModel,
    labels: &LabelMap,
    permutation: &[usize],
) -> Result<Array2<f64>> {
    let m = model.n_classes();
    validate_permutation(permutation, m)?;
    if labels.n_classes() != m {
        return Err(NclError::LabelMapMismatch(format!(
            "{} classes in the map, {} in the model",
            labels.n_classes(),
            m
        )));
    }
    let mut w = Array2::zeros((m, labels.n_labels()));
    for (j, &pi) in permutation.iter().enumerate() {
        let y = labels.label_of_class(pi);
        w[[j, y]] = model.class_prior()[pi].sqrt();
    }
    Ok(w)
}

/// Maximum pairwise class overlap: max_{i != j} sum_x P(x) P(c_i|x) P(c_j|x).
pub fn class_overlap(model: &LatentClassModel) -> Result<f64> {
    let m = model.n_classes();
    if m < 2 {
        return Err(NclError::RequiresAtLeastTwoClasses);
    }
    let mut worst = 0.0_f64;
    for i in 0..m {
        for j in (i + 1)..m {
            let mut acc = 0.0;
            for x in 0..model.n_samples() {
                acc += model.marginal()[x]
                    * model.posterior()[[x, i]]
                    * model.posterior()[[x, j]];
            }
            worst = worst.max(acc);
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Model specifications and presets
// ---------------------------------------------------------------------------

/// Declarative model description, loadable from config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(PresetSpec),
    Explicit(ExplicitSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PresetSpec {
    pub preset: String,
    pub m: usize,
    pub n_samples: usize,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplicitSpec {
    pub class_prior: Vec<f64>,
    pub conditional: Vec<Vec<f64>>,
}

/// Build a model from a specification (preset name or explicit arrays).
pub fn build_model(spec: &ModelSpec) -> Result<LatentClassModel> {
    match spec {
        ModelSpec::Explicit(e) => {
            let m = e.class_prior.len();
            let n = e.conditional.first().map_or(0, |r| r.len());
            if e.conditional.len() != m || e.conditional.iter().any(|r| r.len() != n) {
                return Err(NclError::DimensionMismatch(
                    "conditional rows must match the prior length and share one width".into(),
                ));
            }
            let prior = Array1::from_vec(e.class_prior.clone());
            let cond = Array2::from_shape_fn((m, n), |(c, x)| e.conditional[c][x]);
            LatentClassModel::new(prior, cond)
        }
        ModelSpec::Preset(p) => match p.preset.as_str() {
            "one_hot" => one_hot_model(p.m, p.n_samples),
            "one_hot_random" => {
                one_hot_random_model(p.m, p.n_samples, p.seed.unwrap_or(0))
            }
            "overlap" => overlap_model(p.m, p.n_samples, p.epsilon.unwrap_or(0.0)),
            "random" => random_model(p.m, p.n_samples, p.seed.unwrap_or(0)),
            other => Err(NclError::ConfigInvalid(format!(
                "unknown model preset `{other}`"
            ))),
        },
    }
}

/// Disjoint class supports with uniform priors and uniform within-block
/// conditionals. Every sample belongs to exactly one class.
pub fn one_hot_model(m: usize, n: usize) -> Result<LatentClassModel> {
    if m == 0 || n < m {
        return Err(NclError::ConfigInvalid(format!(
            "one_hot needs 1 <= m <= n, got m={m}, n={n}"
        )));
    }
    let blocks = block_partition(m, n);
    let prior = Array1::from_elem(m, 1.0 / m as f64);
    let mut cond = Array2::zeros((m, n));
    for (c, block) in blocks.iter().enumerate() {
        let p = 1.0 / block.len() as f64;
        for &x in block {
            cond[[c, x]] = p;
        }
    }
    LatentClassModel::new(prior, cond)
}

/// One-hot supports with random priors and random within-block masses.
pub fn one_hot_random_model(m: usize, n: usize, seed: u64) -> Result<LatentClassModel> {
    if m == 0 || n < m {
        return Err(NclError::ConfigInvalid(format!(
            "one_hot_random needs 1 <= m <= n, got m={m}, n={n}"
        )));
    }
    let mut rng = seeded(seed);
    let blocks = block_partition(m, n);
    let prior = random_simplex(m, &mut rng);
    let mut cond = Array2::zeros((m, n));
    for (c, block) in blocks.iter().enumerate() {
        let mass = random_simplex(block.len(), &mut rng);
        for (i, &x) in block.iter().enumerate() {
            cond[[c, x]] = mass[i];
        }
    }
    LatentClassModel::new(prior, cond)
}

/// Controlled-overlap model: each class leaks a fraction of its mass
/// uniformly over the whole sample space; the leak is bisected so the
/// realized maximal class overlap equals `epsilon`.
pub fn overlap_model(m: usize, n: usize, epsilon: f64) -> Result<LatentClassModel> {
    if m < 2 || n < m {
        return Err(NclError::ConfigInvalid(format!(
            "overlap needs 2 <= m <= n, got m={m}, n={n}"
        )));
    }
    if epsilon < 0.0 {
        return Err(NclError::ConfigInvalid("epsilon must be >= 0".into()));
    }
    if epsilon == 0.0 {
        return one_hot_model(m, n);
    }
    let max_eps = realized_overlap(m, n, 1.0)?;
    if epsilon > max_eps + 1e-12 {
        return Err(NclError::ConfigInvalid(format!(
            "epsilon {epsilon} exceeds the maximum {max_eps:.6} reachable with m={m}"
        )));
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if realized_overlap(m, n, mid)? < epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mixed_block_model(m, n, 0.5 * (lo + hi))
}

fn realized_overlap(m: usize, n: usize, delta: f64) -> Result<f64> {
    class_overlap(&mixed_block_model(m, n, delta)?)
}

fn mixed_block_model(m: usize, n: usize, delta: f64) -> Result<LatentClassModel> {
    let blocks = block_partition(m, n);
    let prior = Array1::from_elem(m, 1.0 / m as f64);
    let mut cond = Array2::from_elem((m, n), delta / n as f64);
    for (c, block) in blocks.iter().enumerate() {
        let p = (1.0 - delta) / block.len() as f64;
        for &x in block {
            cond[[c, x]] += p;
        }
    }
    LatentClassModel::new(prior, cond)
}

/// Dense random model: Dirichlet-style priors and conditionals with a floor
/// that keeps every probability comfortably positive.
pub fn random_model(m: usize, n: usize, seed: u64) -> Result<LatentClassModel> {
    if m == 0 || n == 0 {
        return Err(NclError::ConfigInvalid("m and n must be positive".into()));
    }
    let mut rng = seeded(seed);
    let prior = random_simplex(m, &mut rng);
    let mut cond = Array2::zeros((m, n));
    for c in 0..m {
        let row = random_simplex(n, &mut rng);
        for x in 0..n {
            cond[[c, x]] = row[x];
        }
    }
    LatentClassModel::new(prior, cond)
}

fn block_partition(m: usize, n: usize) -> Vec<Vec<usize>> {
    // Distribute n samples over m contiguous blocks as evenly as possible.
    let base = n / m;
    let extra = n % m;
    let mut blocks = Vec::with_capacity(m);
    let mut next = 0;
    for c in 0..m {
        let len = base + usize::from(c < extra);
        blocks.push((next..next + len).collect());
        next += len;
    }
    blocks
}

fn random_simplex(len: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    // Floored exponential draws: strictly positive, well away from zero.
    let mut v = Array1::from_shape_fn(len, |_| {
        let u: f64 = rng.random();
        -(1.0 - u).ln() + 0.05
    });
    let total = v.sum();
    v.mapv_inplace(|x| x / total);
    let s = v.sum();
    // Renormalize the largest entry so the sum is exactly 1.0 in floats.
    let imax = argmax_lowest(v.iter().copied());
    v[imax] += 1.0 - s;
    v
}

/// Deterministic rng for a seed; the single entropy source everywhere.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Two-view models for the multi-modal losses
// ---------------------------------------------------------------------------

/// Asymmetric two-view model: one latent class variable generating a visual
/// and a language view with separate sample spaces.
#[derive(Debug, Clone)]
pub struct TwoViewModel {
    class_prior: Array1<f64>,
    cond_visual: Array2<f64>,
    cond_language: Array2<f64>,
    marginal_visual: Array1<f64>,
    marginal_language: Array1<f64>,
    /// Joint P_M(x_v, x_l), Nv x Nl.
    joint: Array2<f64>,
    /// Normalized joint Dv^{-1/2} A_M Dl^{-1/2}.
    normalized: Array2<f64>,
}

impl TwoViewModel {
    pub fn new(
        class_prior: Array1<f64>,
        cond_visual: Array2<f64>,
        cond_language: Array2<f64>,
    ) -> Result<Self> {
        let visual = LatentClassModel::new(class_prior.clone(), cond_visual.clone())?;
        let language = LatentClassModel::new(class_prior.clone(), cond_language.clone())?;
        let weighted = {
            let mut w = cond_visual.clone();
            for (c, mut row) in w.rows_mut().into_iter().enumerate() {
                let p = class_prior[c];
                row.mapv_inplace(|v| v * p);
            }
            w
        };
        let joint = weighted.t().dot(&cond_language);
        let inv_v = visual.marginal().mapv(|p| 1.0 / p.sqrt());
        let inv_l = language.marginal().mapv(|p| 1.0 / p.sqrt());
        let mut normalized = joint.clone();
        for i in 0..normalized.nrows() {
            for j in 0..normalized.ncols() {
                normalized[[i, j]] *= inv_v[i] * inv_l[j];
            }
        }
        Ok(Self {
            class_prior,
            cond_visual,
            cond_language,
            marginal_visual: visual.marginal().clone(),
            marginal_language: language.marginal().clone(),
            joint,
            normalized,
        })
    }

    /// One-hot two-view toy: the c-th visual and language sample each belong
    /// exclusively to class c.
    pub fn one_hot(m: usize) -> Result<Self> {
        let prior = Array1::from_elem(m, 1.0 / m as f64);
        let eye = Array2::from_shape_fn((m, m), |(i, j)| f64::from(i == j));
        Self::new(prior, eye.clone(), eye)
    }

    pub fn n_classes(&self) -> usize {
        self.class_prior.len()
    }

    pub fn n_visual(&self) -> usize {
        self.cond_visual.ncols()
    }

    pub fn n_language(&self) -> usize {
        self.cond_language.ncols()
    }

    pub fn joint(&self) -> &Array2<f64> {
        &self.joint
    }

    pub fn normalized(&self) -> &Array2<f64> {
        &self.normalized
    }

    pub fn marginal_visual(&self) -> &Array1<f64> {
        &self.marginal_visual
    }

    pub fn marginal_language(&self) -> &Array1<f64> {
        &self.marginal_language
    }

    /// Per-view closed-form optimal features, sharing one class permutation.
    pub fn ground_truth_pair(&self, permutation: &[usize]) -> Result<(FeatureTable, FeatureTable)> {
        let visual =
            LatentClassModel::new(self.class_prior.clone(), self.cond_visual.clone())?;
        let language =
            LatentClassModel::new(self.class_prior.clone(), self.cond_language.clone())?;
        Ok((
            ground_truth_phi(&visual, permutation)?,
            ground_truth_phi(&language, permutation)?,
        ))
    }
}
