//! `evaluate`: compute the requested metrics over checkpoint features (or
//! the closed-form optimal features when no checkpoint exists) and emit an
//! experiment report.

use std::path::Path;

use ncl_core::config::ExperimentConfig;
use ncl_core::encoders::encode_all;
use ncl_core::features::FeatureTable;
use ncl_core::io::load_checkpoint;
use ncl_core::latent_model::{
    class_overlap, cooccurrence, ground_truth_phi, LabelMap, LatentClassModel,
};
use ncl_core::metrics as m;
use ncl_core::objectives::{equivalence_constant, nmf_objective, spectral_loss_population};
use ncl_core::report::{ExperimentReport, MetricFragment};
use ncl_core::training::{dead_dimension_count, ACTIVATION_THRESHOLD};
use ncl_core::NclError;

use crate::{unix_ms, write_report, RunContext, EXIT_OK};

pub fn run(ctx: &RunContext, checkpoint: Option<&Path>) -> Result<i32, NclError> {
    let started = std::time::Instant::now();
    let started_ms = unix_ms();
    let model = ctx.config.model.build()?;
    let labels = ctx.config.label_map(&model)?;

    let (features, source) = feature_source(ctx, &model, checkpoint)?;
    let mut report = ExperimentReport::new(ctx.config_text.clone(), &[]);
    for name in &ctx.config.metrics.names {
        let fragment = compute_metric(name, &features, &model, &labels, &ctx.config, ctx.seed)?;
        report.push_metric(fragment)?;
    }

    write_report(ctx, "report.json", &report, started, started_ms)?;
    println!(
        "evaluated {} metrics on {source} features -> {}",
        report.metrics.len(),
        ctx.out("report.json").display()
    );
    Ok(EXIT_OK)
}

fn feature_source(
    ctx: &RunContext,
    model: &LatentClassModel,
    checkpoint: Option<&Path>,
) -> Result<(FeatureTable, &'static str), NclError> {
    let default_path = ctx.out("checkpoint.ckpt");
    let path = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| default_path.exists().then_some(default_path));
    match path {
        Some(p) => {
            let (enc, _) = load_checkpoint(&p)?;
            let mut table = encode_all(enc.as_dyn(), model.n_samples())?;
            table = table.with_weighting(model.sqrt_marginal());
            Ok((table, "checkpoint"))
        }
        None => {
            let perm: Vec<usize> = (0..model.n_classes()).collect();
            Ok((ground_truth_phi(model, &perm)?, "ground-truth"))
        }
    }
}

/// Compute one named metric fragment; unknown names are a config error
/// that names the offending metric.
pub fn compute_metric(
    name: &str,
    features: &FeatureTable,
    model: &LatentClassModel,
    labels: &LabelMap,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<MetricFragment, NclError> {
    let ms = &config.metrics;
    let hard_labels = labels.hard_labels(model)?;
    match name {
        "sparsity" => {
            let r = m::sparsity(features, ms.sparsity_threshold)?;
            Ok(MetricFragment::scalar(name, r.mean)
                .with_per_item(r.per_sample)
                .with_config(serde_json::json!({ "threshold": ms.sparsity_threshold })))
        }
        "correlation" => {
            let r = m::correlation_matrix(features)?;
            Ok(MetricFragment::scalar(name, r.max_offdiag()).with_config(serde_json::json!({
                "mean_offdiag_abs": r.mean_offdiag_abs(),
                "dead_dims": r.dead_dims,
            })))
        }
        "class_consistency" => {
            let r = m::class_consistency(features, &hard_labels, ms.activation_threshold)?;
            Ok(MetricFragment::scalar(name, r.mean)
                .with_per_item(r.per_dim.iter().map(|(_, v)| *v).collect())
                .with_config(serde_json::json!({
                    "threshold": ms.activation_threshold,
                    "empty_dims": r.empty_dims,
                })))
        }
        "expected_activation" => {
            let r = m::expected_activation(features)?;
            let mean = r.ea.sum() / r.ea.len() as f64;
            Ok(MetricFragment::scalar(name, mean)
                .with_per_item(r.ea.to_vec())
                .with_config(serde_json::json!({ "skipped_rows": r.skipped_rows })))
        }
        "retrieval_map" => {
            let r = m::retrieval_map(features, &hard_labels, ms.retrieval_k)?;
            Ok(MetricFragment::scalar(name, r.map).with_config(serde_json::json!({
                "k": ms.retrieval_k,
                "zero_relevant_queries": r.zero_relevant_queries,
            })))
        }
        "sepin" => {
            let cfg = m::SepinConfig {
                batch_size: ms.sepin_batch,
                negatives: ms.sepin_negatives,
                replicates: ms.sepin_replicates,
                temperature: 1.0,
                normalize_rows: ms.sepin_normalize_rows,
                seed,
            };
            let r = m::sepin_at_k(features, model, ms.sepin_k, &cfg)?;
            Ok(MetricFragment::scalar(name, r.top_k_mean)
                .with_stderr(r.top_k_stderr)
                .with_per_item(r.per_dim.iter().map(|e| e.estimate).collect())
                .with_config(serde_json::json!({
                    "k": ms.sepin_k,
                    "batch_size": ms.sepin_batch,
                    "negatives": ms.sepin_negatives,
                    "replicates": ms.sepin_replicates,
                    "normalize_rows": ms.sepin_normalize_rows,
                    "mean_negative_denominator": true,
                })))
        }
        "eigen_spectrum" => {
            let eig = m::eigen_spectrum(features, model)?;
            Ok(MetricFragment::scalar(name, eig[0]).with_per_item(eig))
        }
        "activated_dims" => {
            let hist = m::activated_dim_histogram(features, ms.activation_threshold);
            let mean = hist.iter().sum::<usize>() as f64 / hist.len() as f64;
            Ok(MetricFragment::scalar(name, mean)
                .with_per_item(hist.into_iter().map(|c| c as f64).collect()))
        }
        "linear_probe" => {
            let cfg = m::ProbeConfig {
                learning_rate: ms.probe_learning_rate,
                max_steps: ms.probe_max_steps,
                ..Default::default()
            };
            let r = m::linear_probe(features, &hard_labels, features, &hard_labels, &cfg)?;
            Ok(MetricFragment::scalar(name, r.accuracy).with_config(serde_json::json!({
                "train_accuracy": r.train_accuracy,
                "steps_run": r.steps_run,
            })))
        }
        "bayes_agreement" => {
            let perm: Vec<usize> = (0..model.n_classes()).collect();
            let w = ncl_core::latent_model::bayes_classifier_weights(model, labels, &perm)?;
            let phi = ground_truth_phi(model, &perm)?;
            let agreement = m::bayes_agreement(&w, &phi, model, labels)?;
            Ok(MetricFragment::scalar(name, agreement))
        }
        "spectral_loss" => {
            let r = spectral_loss_population(features, model, false)?;
            Ok(MetricFragment::scalar(name, r.loss).with_config(r.to_fragment()))
        }
        "nmf_residual" => {
            let co = cooccurrence(model);
            let r = nmf_objective(co.normalized(), features, false)?;
            Ok(MetricFragment::scalar(name, r.loss))
        }
        "equivalence_gap" => {
            let co = cooccurrence(model);
            let constant = equivalence_constant(model);
            let factorization = ncl_core::objectives::mf_objective(co.normalized(), features, false)?;
            let spectral = spectral_loss_population(features, model, false)?;
            Ok(MetricFragment::scalar(
                name,
                (factorization.loss - spectral.loss - constant).abs(),
            ))
        }
        "alignment" => {
            let perm: Vec<usize> = (0..model.n_classes()).collect();
            let phi = ground_truth_phi(model, &perm)?;
            let (subject, kept) = strongest_columns(features, model.n_classes())?;
            let r = m::identifiability_align(&subject, &phi)?;
            Ok(MetricFragment::scalar(name, r.residual).with_config(serde_json::json!({
                "permutation": r.permutation,
                "scalings": r.scalings,
                "exact_assignment": r.exact,
                "columns_used": kept,
            })))
        }
        "class_overlap" => Ok(MetricFragment::scalar(name, class_overlap(model)?)),
        "dead_dims" => Ok(MetricFragment::scalar(
            name,
            dead_dimension_count(features.values(), ACTIVATION_THRESHOLD) as f64,
        )),
        "eq8_offdiag" => {
            let lhs = m::weighted_offdiag_max(features, model, false)?;
            let eps = class_overlap(model).unwrap_or(0.0);
            let bound = eps / model.min_class_prior();
            Ok(MetricFragment::scalar(name, lhs)
                .with_config(serde_json::json!({ "bound": bound, "epsilon": eps })))
        }
        other => Err(NclError::UnknownMetric(other.to_string())),
    }
}

/// Alignment against the m-column ground truth: wider encoders keep their
/// m strongest columns (by L2 norm), so padding dimensions drop out.
fn strongest_columns(
    features: &FeatureTable,
    m: usize,
) -> Result<(FeatureTable, Vec<usize>), NclError> {
    let k = features.feature_dim();
    if k < m {
        return Err(NclError::DimensionMismatch(format!(
            "encoder has {k} dims but the model needs {m}"
        )));
    }
    if k == m {
        return Ok((features.clone(), (0..m).collect()));
    }
    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<f64> = (0..k)
        .map(|d| features.values().column(d).iter().map(|v| v * v).sum())
        .collect();
    order.sort_by(|&a, &b| {
        norms[b]
            .partial_cmp(&norms[a])
            .expect("finite norms")
            .then(a.cmp(&b))
    });
    let mut kept = order[..m].to_vec();
    kept.sort_unstable();
    Ok((features.select_dims(&kept)?, kept))
}
