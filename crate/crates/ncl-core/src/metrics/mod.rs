//! Feature measurements: sparsity, dimensional correlation, class
//! consistency, expected activation and selection, retrieval precision,
//! eigen-spectra, activated-dimension histograms, and the pairwise
//! orthogonality bound.

pub mod align;
pub mod probe;
pub mod sepin;

use ndarray::{Array1, Array2};

use crate::error::{NclError, Result};
use crate::features::FeatureTable;
use crate::latent_model::LatentClassModel;
use crate::linalg::symmetric_eigenvalues;

pub use align::{
    identifiability_align, rotation_check_with, rotation_symmetry_check, AlignmentResult,
    RotationCheck,
};
pub use probe::{bayes_agreement, linear_probe, ProbeConfig};
pub use sepin::{exact_conditional_mi, sepin_at_k, SepinConfig, SepinResult};

/// Default activation / zero threshold used across the metrics.
pub const DEFAULT_THRESHOLD: f64 = 1e-5;

/// Per-row fraction of entries with |value| < threshold, plus the mean.
#[derive(Debug, Clone)]
pub struct SparsityReport {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

pub fn sparsity(features: &FeatureTable, threshold: f64) -> Result<SparsityReport> {
    let f = features.values();
    if f.nrows() == 0 || f.ncols() == 0 {
        return Err(NclError::EmptyBatch);
    }
    let k = f.ncols() as f64;
    let per_sample: Vec<f64> = f
        .rows()
        .into_iter()
        .map(|row| row.iter().filter(|v| v.abs() < threshold).count() as f64 / k)
        .collect();
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(SparsityReport { per_sample, mean })
}

/// Dimensional correlation matrix over live dimensions. Columns are
/// normalized by the sum convention sqrt(sum_x f_i(x)^2) so the diagonal is
/// exactly 1; all-zero columns are excluded and reported.
#[derive(Debug, Clone)]
pub struct CorrelationReport {
    /// Indices of the live (non-dead) dimensions, in order.
    pub live_dims: Vec<usize>,
    pub dead_dims: Vec<usize>,
    /// live x live correlation matrix.
    pub matrix: Array2<f64>,
}

impl CorrelationReport {
    /// Largest |C_ij| off the diagonal; 0 for a single live dimension.
    pub fn max_offdiag(&self) -> f64 {
        let k = self.matrix.nrows();
        let mut worst = 0.0_f64;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    worst = worst.max(self.matrix[[i, j]].abs());
                }
            }
        }
        worst
    }

    pub fn mean_offdiag_abs(&self) -> f64 {
        let k = self.matrix.nrows();
        if k < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    acc += self.matrix[[i, j]].abs();
                }
            }
        }
        acc / (k * (k - 1)) as f64
    }
}

pub fn correlation_matrix(features: &FeatureTable) -> Result<CorrelationReport> {
    let f = features.values();
    if f.nrows() == 0 {
        return Err(NclError::EmptyBatch);
    }
    let mut live = Vec::new();
    let mut dead = Vec::new();
    let mut norms = Vec::new();
    for d in 0..f.ncols() {
        let sq: f64 = f.column(d).iter().map(|v| v * v).sum();
        if sq > 0.0 {
            live.push(d);
            norms.push(sq.sqrt());
        } else {
            dead.push(d);
        }
    }
    if live.is_empty() {
        return Err(NclError::AllDimensionsDead);
    }
    let mut matrix = Array2::zeros((live.len(), live.len()));
    for (a, &i) in live.iter().enumerate() {
        for (b, &j) in live.iter().enumerate() {
            let dot: f64 = f
                .column(i)
                .iter()
                .zip(f.column(j).iter())
                .map(|(x, y)| x * y)
                .sum();
            matrix[[a, b]] = dot / (norms[a] * norms[b]);
        }
    }
    Ok(CorrelationReport {
        live_dims: live,
        dead_dims: dead,
        matrix,
    })
}

/// Per-dimension fraction of activated samples that carry the dimension's
/// most frequent label. Dimensions with no activated samples are excluded.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    /// (dimension, consistency rate) for dimensions with activations.
    pub per_dim: Vec<(usize, f64)>,
    pub empty_dims: Vec<usize>,
    pub mean: f64,
}

pub fn class_consistency(
    features: &FeatureTable,
    labels: &[usize],
    activation_threshold: f64,
) -> Result<ConsistencyReport> {
    let f = features.values();
    if labels.len() != f.nrows() {
        return Err(NclError::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            f.nrows()
        )));
    }
    let n_labels = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_dim = Vec::new();
    let mut empty = Vec::new();
    for d in 0..f.ncols() {
        let mut counts = vec![0usize; n_labels];
        let mut total = 0usize;
        for (x, &v) in f.column(d).iter().enumerate() {
            if v > activation_threshold {
                counts[labels[x]] += 1;
                total += 1;
            }
        }
        if total == 0 {
            empty.push(d);
        } else {
            let modal = counts.into_iter().max().unwrap_or(0);
            per_dim.push((d, modal as f64 / total as f64));
        }
    }
    let mean = if per_dim.is_empty() {
        0.0
    } else {
        per_dim.iter().map(|(_, r)| r).sum::<f64>() / per_dim.len() as f64
    };
    Ok(ConsistencyReport {
        per_dim,
        empty_dims: empty,
        mean,
    })
}

/// Expected activation per dimension: the mean over samples of the
/// row-normalized feature. Zero-norm rows are skipped and counted.
#[derive(Debug, Clone)]
pub struct ActivationReport {
    pub ea: Array1<f64>,
    pub skipped_rows: usize,
}

pub fn expected_activation(features: &FeatureTable) -> Result<ActivationReport> {
    let f = features.values();
    let mut ea = Array1::zeros(f.ncols());
    let mut used = 0usize;
    let mut skipped = 0usize;
    for row in f.rows() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            skipped += 1;
            continue;
        }
        used += 1;
        for (d, &v) in row.iter().enumerate() {
            ea[d] += v / norm;
        }
    }
    if used == 0 {
        return Err(NclError::AllRowsZero);
    }
    ea.mapv_inplace(|v| v / used as f64);
    Ok(ActivationReport {
        ea,
        skipped_rows: skipped,
    })
}

/// Top-n dimension indices by expected activation, descending; ties break
/// toward the lower index.
pub fn select_top(ea: &Array1<f64>, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ea.len()).collect();
    order.sort_by(|&a, &b| {
        ea[b].partial_cmp(&ea[a])
            .expect("finite activations")
            .then(a.cmp(&b))
    });
    order.truncate(n);
    order
}

/// Retrieval quality: mean average precision at k under cosine similarity,
/// each row queried against all the others.
#[derive(Debug, Clone)]
pub struct RetrievalReport {
    pub map: f64,
    pub per_query: Vec<f64>,
    /// Queries whose class has no other member; they contribute AP 0.
    pub zero_relevant_queries: usize,
}

pub fn retrieval_map(
    features: &FeatureTable,
    labels: &[usize],
    k: usize,
) -> Result<RetrievalReport> {
    retrieval_map_impl(features, labels, k, false)
}

/// Selection-protocol variant: rows zeroed out by a dimension subset score
/// similarity 0 instead of failing the cosine normalization.
pub fn retrieval_map_tolerant(
    features: &FeatureTable,
    labels: &[usize],
    k: usize,
) -> Result<RetrievalReport> {
    retrieval_map_impl(features, labels, k, true)
}

fn retrieval_map_impl(
    features: &FeatureTable,
    labels: &[usize],
    k: usize,
    allow_zero_rows: bool,
) -> Result<RetrievalReport> {
    let f = features.values();
    let n = f.nrows();
    if labels.len() != n {
        return Err(NclError::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if k == 0 {
        return Err(NclError::ConfigInvalid("k must be >= 1".into()));
    }
    // Cosine similarity needs nonzero rows.
    let mut normalized = f.clone();
    for (i, mut row) in normalized.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            if !allow_zero_rows {
                return Err(NclError::ZeroNormFeature { index: i });
            }
            continue;
        }
        row.mapv_inplace(|v| v / norm);
    }
    let sims = normalized.dot(&normalized.t());

    let mut per_query = Vec::with_capacity(n);
    let mut zero_relevant = 0usize;
    for q in 0..n {
        let mut gallery: Vec<usize> = (0..n).filter(|&g| g != q).collect();
        // Ties in similarity break toward the lower gallery index.
        gallery.sort_by(|&a, &b| {
            sims[[q, b]]
                .partial_cmp(&sims[[q, a]])
                .expect("finite similarity")
                .then(a.cmp(&b))
        });
        let any_relevant = gallery.iter().any(|&g| labels[g] == labels[q]);
        if !any_relevant {
            zero_relevant += 1;
            per_query.push(0.0);
            continue;
        }
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &g) in gallery.iter().take(k).enumerate() {
            if labels[g] == labels[q] {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        per_query.push(if hits == 0 {
            0.0
        } else {
            precision_sum / hits as f64
        });
    }
    let map = per_query.iter().sum::<f64>() / n as f64;
    Ok(RetrievalReport {
        map,
        per_query,
        zero_relevant_queries: zero_relevant,
    })
}

/// Descending eigenvalues of the weighted second moment
/// `sum_x P(x) f(x) f(x)^T`.
pub fn eigen_spectrum(features: &FeatureTable, model: &LatentClassModel) -> Result<Vec<f64>> {
    let f = features.values();
    if f.nrows() != model.n_samples() {
        return Err(NclError::DimensionMismatch(format!(
            "{} rows for {} samples",
            f.nrows(),
            model.n_samples()
        )));
    }
    let k = f.ncols();
    let mut second = Array2::zeros((k, k));
    for (x, row) in f.rows().into_iter().enumerate() {
        let p = model.marginal()[x];
        for i in 0..k {
            for j in 0..k {
                second[[i, j]] += p * row[i] * row[j];
            }
        }
    }
    Ok(symmetric_eigenvalues(&second))
}

/// Number of dimensions above the threshold, per sample.
pub fn activated_dim_histogram(features: &FeatureTable, threshold: f64) -> Vec<usize> {
    features
        .values()
        .rows()
        .into_iter()
        .map(|row| row.iter().filter(|&&v| v > threshold).count())
        .collect()
}

/// Largest off-diagonal of the P(x)-weighted feature Gram matrix
/// `sum_x P(x) f_i(x) f_j(x)`; with `normalized` the columns are first
/// scaled to unit weighted norm. The raw form is the left side of the
/// pairwise orthogonality bound `<= eps / min_c P(c)`.
pub fn weighted_offdiag_max(
    features: &FeatureTable,
    model: &LatentClassModel,
    normalized: bool,
) -> Result<f64> {
    let f = features.values();
    if f.nrows() != model.n_samples() {
        return Err(NclError::DimensionMismatch(format!(
            "{} rows for {} samples",
            f.nrows(),
            model.n_samples()
        )));
    }
    let k = f.ncols();
    let p = model.marginal();
    let mut gram = Array2::<f64>::zeros((k, k));
    for (x, row) in f.rows().into_iter().enumerate() {
        for i in 0..k {
            for j in 0..k {
                gram[[i, j]] += p[x] * row[i] * row[j];
            }
        }
    }
    let mut worst = 0.0_f64;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let value = if normalized {
                let denom = (gram[[i, i]] * gram[[j, j]]).sqrt();
                if denom == 0.0 {
                    continue;
                }
                gram[[i, j]] / denom
            } else {
                gram[[i, j]]
            };
            worst = worst.max(value.abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_model::{ground_truth_phi, one_hot_model, LabelMap};
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn sparsity_counts_below_threshold() {
        let table = FeatureTable::new(array![[0.3, 0.0, 0.0, 1e-7]], true);
        let report = sparsity(&table, 1e-5).unwrap();
        assert!((report.per_sample[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sparsity_of_ground_truth_is_m_minus_one_over_m() {
        let model = one_hot_model(5, 50).unwrap();
        let phi = ground_truth_phi(&model, &[0, 1, 2, 3, 4]).unwrap();
        let report = sparsity(&phi, 1e-5).unwrap();
        assert!((report.mean - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sparsity_of_dense_table_is_zero() {
        let table = FeatureTable::new(Array2::ones((3, 4)), true);
        assert_eq!(sparsity(&table, 1e-5).unwrap().mean, 0.0);
    }

    #[test]
    fn correlation_of_disjoint_supports_is_identity() {
        let table = FeatureTable::new(
            array![[1.0, 0.0], [2.0, 0.0], [0.0, 3.0], [0.0, 0.5]],
            true,
        );
        let report = correlation_matrix(&table).unwrap();
        assert!((report.matrix[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((report.matrix[[1, 1]] - 1.0).abs() < 1e-15);
        assert!(report.matrix[[0, 1]].abs() < 1e-15);
    }

    #[test]
    fn correlation_of_duplicated_dimension_is_one() {
        let table = FeatureTable::new(array![[1.0, 1.0], [0.5, 0.5]], true);
        let report = correlation_matrix(&table).unwrap();
        assert!((report.matrix[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_excludes_dead_dimensions() {
        let table = FeatureTable::new(array![[1.0, 0.0], [2.0, 0.0]], true);
        let report = correlation_matrix(&table).unwrap();
        assert_eq!(report.live_dims, vec![0]);
        assert_eq!(report.dead_dims, vec![1]);

        let all_dead = FeatureTable::new(Array2::zeros((2, 2)), true);
        assert!(matches!(
            correlation_matrix(&all_dead),
            Err(NclError::AllDimensionsDead)
        ));
    }

    #[test]
    fn correlation_of_phi_on_one_hot_model_is_identity() {
        let model = one_hot_model(4, 16).unwrap();
        let phi = ground_truth_phi(&model, &[0, 1, 2, 3]).unwrap();
        let report = correlation_matrix(&phi).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = f64::from(i == j);
                assert!((report.matrix[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn consistency_of_phi_is_one() {
        let model = one_hot_model(3, 9).unwrap();
        let phi = ground_truth_phi(&model, &[0, 1, 2]).unwrap();
        let labels = LabelMap::identity(3).hard_labels(&model).unwrap();
        let report = class_consistency(&phi, &labels, 1e-5).unwrap();
        assert!((report.mean - 1.0).abs() < 1e-15);
        for (_, rate) in report.per_dim {
            assert_eq!(rate, 1.0);
        }
    }

    #[test]
    fn consistency_of_uniform_activation_across_two_classes() {
        let table = FeatureTable::new(
            array![[1.0], [1.0], [1.0], [1.0]],
            true,
        );
        let labels = vec![0, 0, 1, 1];
        let report = class_consistency(&table, &labels, 1e-5).unwrap();
        assert!((report.mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn consistency_of_random_features_matches_null_rate() {
        let mut rng = crate::latent_model::seeded(9);
        let n = 5000;
        let values = Array2::from_shape_fn((n, 8), |_| {
            crate::linalg::standard_normal(&mut rng)
        });
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let table = FeatureTable::new(values, false);
        let report = class_consistency(&table, &labels, 1e-5).unwrap();
        assert!((report.mean - 0.1).abs() < 0.05, "mean {}", report.mean);
    }

    #[test]
    fn expected_activation_of_unit_rows() {
        let table = FeatureTable::new(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], true);
        let report = expected_activation(&table).unwrap();
        assert!((report.ea[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((report.ea[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(select_top(&report.ea, 1), vec![0]);
    }

    #[test]
    fn expected_activation_skips_zero_rows() {
        let table = FeatureTable::new(array![[0.0, 0.0], [3.0, 0.0]], true);
        let report = expected_activation(&table).unwrap();
        assert_eq!(report.skipped_rows, 1);
        assert!((report.ea[0] - 1.0).abs() < 1e-15);

        let zeros = FeatureTable::new(Array2::zeros((2, 2)), true);
        assert!(matches!(
            expected_activation(&zeros),
            Err(NclError::AllRowsZero)
        ));
    }

    #[test]
    fn ea_ordering_follows_class_frequency() {
        // 3 samples in class 0, 2 in class 1: EA_0 > EA_1.
        let prior = array![0.6, 0.4];
        let cond = Array2::from_shape_vec(
            (2, 5),
            vec![
                1.0 / 3.0,
                1.0 / 3.0,
                1.0 / 3.0,
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
                0.5,
                0.5,
            ],
        )
        .unwrap();
        let model = crate::latent_model::LatentClassModel::new(prior, cond).unwrap();
        let phi = ground_truth_phi(&model, &[0, 1]).unwrap();
        let report = expected_activation(&phi).unwrap();
        assert!(report.ea[0] > report.ea[1]);
    }

    #[test]
    fn retrieval_is_perfect_for_one_hot_phi_with_large_classes() {
        let model = one_hot_model(3, 36).unwrap(); // 12 per class >= k+1
        let phi = ground_truth_phi(&model, &[0, 1, 2]).unwrap();
        let labels = LabelMap::identity(3).hard_labels(&model).unwrap();
        let report = retrieval_map(&phi, &labels, 10).unwrap();
        assert!((report.map - 1.0).abs() < 1e-12);
        assert_eq!(report.zero_relevant_queries, 0);
    }

    #[test]
    fn retrieval_with_singleton_classes_is_zero() {
        let table = FeatureTable::new(
            Array2::from_shape_fn((4, 4), |(i, j)| f64::from(i == j)),
            true,
        );
        let labels = vec![0, 1, 2, 3];
        let report = retrieval_map(&table, &labels, 10).unwrap();
        assert_eq!(report.map, 0.0);
        assert_eq!(report.zero_relevant_queries, 4);
    }

    #[test]
    fn retrieval_rejects_zero_rows() {
        let table = FeatureTable::new(array![[0.0, 0.0], [1.0, 0.0]], true);
        assert!(matches!(
            retrieval_map(&table, &[0, 0], 10),
            Err(NclError::ZeroNormFeature { index: 0 })
        ));
    }

    #[test]
    fn ea_selected_dims_of_padded_phi_keep_retrieval_intact() {
        let model = one_hot_model(3, 36).unwrap();
        let k = 6;
        let phi = crate::latent_model::ground_truth_phi_padded(&model, &[0, 1, 2], k).unwrap();
        let labels = LabelMap::identity(3).hard_labels(&model).unwrap();
        let ea = expected_activation(&phi).unwrap();
        let top = select_top(&ea.ea, 3);
        let selected = phi.select_dims(&top).unwrap();
        let full = retrieval_map(&phi, &labels, 10).unwrap();
        let sub = retrieval_map(&selected, &labels, 10).unwrap();
        assert!((full.map - sub.map).abs() < 1e-12);
    }

    #[test]
    fn eigen_spectrum_of_phi_is_indicator() {
        let model = one_hot_model(3, 12).unwrap();
        let phi = crate::latent_model::ground_truth_phi_padded(&model, &[0, 1, 2], 5).unwrap();
        let eig = eigen_spectrum(&phi, &model).unwrap();
        for (i, &lambda) in eig.iter().enumerate() {
            let expect = f64::from(i < 3);
            assert!((lambda - expect).abs() < 1e-10, "eig[{i}] = {lambda}");
        }
    }

    #[test]
    fn histogram_counts_active_dims() {
        let model = one_hot_model(3, 9).unwrap();
        let phi = ground_truth_phi(&model, &[0, 1, 2]).unwrap();
        let hist = activated_dim_histogram(&phi, 1e-5);
        assert!(hist.iter().all(|&c| c == 1));
        let zeros = FeatureTable::new(Array2::zeros((3, 2)), true);
        assert!(activated_dim_histogram(&zeros, 1e-5).iter().all(|&c| c == 0));
    }

    #[test]
    fn weighted_offdiag_bound_on_overlap_models() {
        for &eps in &[0.0, 0.01, 0.05] {
            let model = if eps == 0.0 {
                one_hot_model(4, 16).unwrap()
            } else {
                crate::latent_model::overlap_model(4, 16, eps).unwrap()
            };
            let phi = ground_truth_phi(&model, &[0, 1, 2, 3]).unwrap();
            let lhs = weighted_offdiag_max(&phi, &model, false).unwrap();
            let realized = if eps == 0.0 {
                0.0
            } else {
                crate::latent_model::class_overlap(&model).unwrap()
            };
            let bound = realized / model.min_class_prior();
            assert!(
                lhs <= bound + 1e-9,
                "eps={eps}: lhs {lhs} > bound {bound}"
            );
        }
    }
}
