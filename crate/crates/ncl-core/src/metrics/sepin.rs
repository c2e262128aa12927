//! SEPIN@k disentanglement: per-dimension conditional mutual information
//! `I(x, f_i(x) | f_{!=i}(x))` estimated through the decomposition
//! `I(x, f(x)) - I(x, f_{!=i}(x))`, each term bounded from below with the
//! 1/M-denominator InfoNCE estimator. The two terms use independent draws,
//! so the reported standard error reflects the full estimator uncertainty.
//!
//! `exact_mutual_information` / `exact_conditional_mi` enumerate the finite
//! sample space directly and serve as the independent reference for the
//! estimator; they never touch the InfoNCE path.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{NclError, Result};
use crate::features::FeatureTable;
use crate::latent_model::{seeded, LatentClassModel};
use crate::objectives::{infonce_loss, InfoNceConfig};

#[derive(Debug, Clone)]
pub struct SepinConfig {
    /// Positive pairs per replicate.
    pub batch_size: usize,
    /// Negatives per replicate (the M of the 1/M denominator).
    pub negatives: usize,
    /// Independent replicates; the standard error comes from their spread.
    pub replicates: usize,
    pub temperature: f64,
    /// Row-normalize features (zero rows stay zero) before the estimator.
    pub normalize_rows: bool,
    pub seed: u64,
}

impl Default for SepinConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            negatives: 128,
            replicates: 32,
            temperature: 1.0,
            normalize_rows: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DimensionEstimate {
    pub dim: usize,
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone)]
pub struct SepinResult {
    /// Per-dimension estimates in dimension order.
    pub per_dim: Vec<DimensionEstimate>,
    pub k: usize,
    /// Mean of the k largest per-dimension estimates.
    pub top_k_mean: f64,
    pub top_k_stderr: f64,
    /// Estimated I(x, f(x)) with all dimensions present.
    pub full_mi_estimate: f64,
}

/// SEPIN@k over a feature table defined on the model's sample space.
pub fn sepin_at_k(
    features: &FeatureTable,
    model: &LatentClassModel,
    k: usize,
    cfg: &SepinConfig,
) -> Result<SepinResult> {
    if cfg.replicates < 2 {
        return Err(NclError::InsufficientDraws(
            "at least two replicates are required for a standard error".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.negatives == 0 {
        return Err(NclError::InsufficientDraws(
            "batch size and negative count must be positive".into(),
        ));
    }
    let f = prepare_rows(features, cfg.normalize_rows);
    if f.nrows() != model.n_samples() {
        return Err(NclError::DimensionMismatch(format!(
            "{} feature rows for {} samples",
            f.nrows(),
            model.n_samples()
        )));
    }
    let dims = f.ncols();
    if k == 0 || k > dims {
        return Err(NclError::ConfigInvalid(format!(
            "k must be in 1..={dims}"
        )));
    }

    let mut rng = seeded(cfg.seed);
    let mut draw = |rng: &mut rand_chacha::ChaCha8Rng| -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut anchors = Vec::with_capacity(cfg.batch_size);
        let mut positives = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (x, xp) = model.sample_pair(rng);
            anchors.push(x);
            positives.push(xp);
        }
        let negatives: Vec<usize> = (0..cfg.negatives)
            .map(|_| model.sample_negative(rng))
            .collect();
        (anchors, positives, negatives)
    };
    let mut deltas: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.replicates); dims];
    let mut full_estimates = Vec::with_capacity(cfg.replicates);
    for _ in 0..cfg.replicates {
        // Independent draws for the full-feature term and each
        // leave-one-out term.
        let (a, p, n) = draw(&mut rng);
        let full_loss = bound_loss(&f, &a, &p, &n, None, cfg)?;
        full_estimates.push(-full_loss);
        for (d, sink) in deltas.iter_mut().enumerate() {
            let (a, p, n) = draw(&mut rng);
            let wo_loss = bound_loss(&f, &a, &p, &n, Some(d), cfg)?;
            // I(x, f) - I(x, f_without_d) = loss_without_d - loss_full.
            sink.push(wo_loss - full_loss);
        }
    }

    let per_dim: Vec<DimensionEstimate> = deltas
        .iter()
        .enumerate()
        .map(|(dim, samples)| {
            let (mean, se) = mean_stderr(samples);
            DimensionEstimate {
                dim,
                estimate: mean,
                stderr: se,
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..dims).collect();
    order.sort_by(|&a, &b| {
        per_dim[b]
            .estimate
            .partial_cmp(&per_dim[a].estimate)
            .expect("finite estimates")
            .then(a.cmp(&b))
    });
    let top: Vec<&DimensionEstimate> = order[..k].iter().map(|&d| &per_dim[d]).collect();
    let top_k_mean = top.iter().map(|e| e.estimate).sum::<f64>() / k as f64;
    let top_k_stderr =
        top.iter().map(|e| e.stderr * e.stderr).sum::<f64>().sqrt() / k as f64;
    let (full_mi_estimate, _) = mean_stderr(&full_estimates);

    Ok(SepinResult {
        per_dim,
        k,
        top_k_mean,
        top_k_stderr,
        full_mi_estimate,
    })
}

fn prepare_rows(features: &FeatureTable, normalize: bool) -> Array2<f64> {
    let mut f = features.values().clone();
    if normalize {
        for mut row in f.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
    }
    f
}

/// The 1/M-denominator InfoNCE loss on the drawn batch, optionally with one
/// dimension removed from every row.
fn bound_loss(
    f: &Array2<f64>,
    anchors: &[usize],
    positives: &[usize],
    negatives: &[usize],
    drop_dim: Option<usize>,
    cfg: &SepinConfig,
) -> Result<f64> {
    let gather = |indices: &[usize]| -> Array2<f64> {
        let cols: Vec<usize> = (0..f.ncols()).filter(|&c| Some(c) != drop_dim).collect();
        let mut out = Array2::zeros((indices.len(), cols.len()));
        for (r, &idx) in indices.iter().enumerate() {
            for (w, &c) in cols.iter().enumerate() {
                out[[r, w]] = f[[idx, c]];
            }
        }
        out
    };
    let a = gather(anchors);
    let p = gather(positives);
    let n = gather(negatives);
    let config = InfoNceConfig {
        temperature: cfg.temperature,
        cosine: false,
        mean_negatives: true,
    };
    Ok(infonce_loss(&a, &p, &n, &config, false)?.loss)
}

fn mean_stderr(samples: &[f64]) -> (f64, f64) {
    let t = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / t;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (t - 1.0);
    (mean, (var / t).sqrt())
}

// ---------------------------------------------------------------------------
// Exact enumeration reference
// ---------------------------------------------------------------------------

/// Exact `I(x, g(x))` for a deterministic feature map over the finite
/// sample space: the entropy of the row-value partition under P(x).
/// Rows are grouped by quantizing entries at `tolerance`.
pub fn exact_mutual_information(
    features: &FeatureTable,
    model: &LatentClassModel,
    tolerance: f64,
) -> Result<f64> {
    group_entropy(features.values(), model, None, tolerance)
}

/// Exact conditional mutual information `I(x, f_d(x) | f_{!=d}(x))`
/// via the same decomposition the estimator uses, but with exact entropies.
pub fn exact_conditional_mi(
    features: &FeatureTable,
    model: &LatentClassModel,
    dim: usize,
    tolerance: f64,
) -> Result<f64> {
    if dim >= features.feature_dim() {
        return Err(NclError::IndexOutOfRange {
            index: dim,
            n: features.feature_dim(),
        });
    }
    let full = group_entropy(features.values(), model, None, tolerance)?;
    let without = group_entropy(features.values(), model, Some(dim), tolerance)?;
    Ok(full - without)
}

fn group_entropy(
    f: &Array2<f64>,
    model: &LatentClassModel,
    drop_dim: Option<usize>,
    tolerance: f64,
) -> Result<f64> {
    if f.nrows() != model.n_samples() {
        return Err(NclError::DimensionMismatch(format!(
            "{} feature rows for {} samples",
            f.nrows(),
            model.n_samples()
        )));
    }
    let mut mass: HashMap<Vec<i64>, f64> = HashMap::new();
    for (x, row) in f.rows().into_iter().enumerate() {
        let key: Vec<i64> = row
            .iter()
            .enumerate()
            .filter(|(c, _)| Some(*c) != drop_dim)
            .map(|(_, &v)| (v / tolerance).round() as i64)
            .collect();
        *mass.entry(key).or_insert(0.0) += model.marginal()[x];
    }
    Ok(-mass
        .values()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_model::one_hot_model;

    /// Four samples, each its own latent class; two independent binary
    /// dimensions valued {0, scale}.
    fn two_bit_features(scale: f64, extra: ExtraDim) -> (FeatureTable, LatentClassModel) {
        let model = one_hot_model(4, 4).unwrap();
        let bits = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
        let cols = match extra {
            ExtraDim::None => 2,
            _ => 3,
        };
        let mut values = Array2::zeros((4, cols));
        for (x, &(b1, b2)) in bits.iter().enumerate() {
            values[[x, 0]] = scale * b1;
            values[[x, 1]] = scale * b2;
            match extra {
                ExtraDim::None => {}
                ExtraDim::Constant => values[[x, 2]] = scale,
                ExtraDim::DuplicateFirst => values[[x, 2]] = scale * b1,
            }
        }
        (FeatureTable::new(values, true), model)
    }

    enum ExtraDim {
        None,
        Constant,
        DuplicateFirst,
    }

    fn config(seed: u64) -> SepinConfig {
        SepinConfig {
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn constant_dimension_scores_zero_within_error() {
        let (features, model) = two_bit_features(2.0, ExtraDim::Constant);
        let result = sepin_at_k(&features, &model, 3, &config(5)).unwrap();
        let constant_dim = &result.per_dim[2];
        assert!(
            constant_dim.estimate.abs() <= 3.0 * constant_dim.stderr,
            "estimate {} +- {}",
            constant_dim.estimate,
            constant_dim.stderr
        );
    }

    #[test]
    fn duplicated_dimension_scores_near_zero() {
        // Removing either copy loses no information, so the conditional
        // estimate is pure estimator noise.
        let (features, model) = two_bit_features(2.0, ExtraDim::DuplicateFirst);
        let result = sepin_at_k(&features, &model, 3, &config(7)).unwrap();
        for d in [0usize, 2] {
            let est = &result.per_dim[d];
            assert!(
                est.estimate.abs() <= 3.0 * est.stderr,
                "dim {d}: {} +- {}",
                est.estimate,
                est.stderr
            );
        }
    }

    #[test]
    fn informative_dimensions_beat_the_constant_control() {
        let (features, model) = two_bit_features(2.0, ExtraDim::Constant);
        let result = sepin_at_k(&features, &model, 1, &config(11)).unwrap();
        let informative = &result.per_dim[0];
        let control = &result.per_dim[2];
        let gap = informative.estimate - control.estimate;
        let se = (informative.stderr.powi(2) + control.stderr.powi(2)).sqrt();
        assert!(gap > 3.0 * se, "gap {gap} vs 3se {}", 3.0 * se);
        assert!(result.top_k_mean >= informative.estimate - 1e-12);
    }

    #[test]
    fn estimates_stay_below_the_enumeration_oracle() {
        let (features, model) = two_bit_features(2.0, ExtraDim::DuplicateFirst);
        let result = sepin_at_k(&features, &model, 3, &config(13)).unwrap();
        for est in &result.per_dim {
            let oracle =
                exact_conditional_mi(&features, &model, est.dim, 1e-9).unwrap();
            assert!(
                est.estimate <= oracle + 3.0 * est.stderr,
                "dim {}: estimate {} oracle {oracle}",
                est.dim,
                est.estimate
            );
        }
        // The full-feature MI estimate is a lower bound of H(f(x)) = ln 4.
        let full_oracle = exact_mutual_information(&features, &model, 1e-9).unwrap();
        assert!((full_oracle - 4.0_f64.ln()).abs() < 1e-12);
        assert!(result.full_mi_estimate <= full_oracle + 0.05);
    }

    #[test]
    fn oracle_entropies_are_exact() {
        let (features, model) = two_bit_features(1.0, ExtraDim::None);
        let full = exact_mutual_information(&features, &model, 1e-9).unwrap();
        assert!((full - 4.0_f64.ln()).abs() < 1e-12);
        // Each bit carries ln 2 of conditional information.
        for d in 0..2 {
            let cmi = exact_conditional_mi(&features, &model, d, 1e-9).unwrap();
            assert!((cmi - 2.0_f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn insufficient_draws_are_rejected() {
        let (features, model) = two_bit_features(1.0, ExtraDim::None);
        let bad = SepinConfig {
            replicates: 1,
            ..Default::default()
        };
        assert!(matches!(
            sepin_at_k(&features, &model, 1, &bad),
            Err(NclError::InsufficientDraws(_))
        ));
    }

    #[test]
    fn normalized_variant_runs_with_zero_rows() {
        let (features, model) = two_bit_features(2.0, ExtraDim::None);
        let cfg = SepinConfig {
            normalize_rows: true,
            ..config(3)
        };
        // Sample (0,0) has a zero row; the guard keeps it at zero.
        let result = sepin_at_k(&features, &model, 2, &cfg).unwrap();
        assert!(result.top_k_mean.is_finite());
    }
}
