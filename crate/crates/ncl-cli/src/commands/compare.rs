//! `compare`: paired unconstrained-vs-non-negative training over shared
//! seeds, reporting the interpretability metrics side by side.

use ncl_core::encoders::{encode_all, EncoderInit, TabularEncoder};
use ncl_core::latent_model::ground_truth_phi;
use ncl_core::metrics::{
    class_consistency, correlation_matrix, identifiability_align, sparsity,
};
use ncl_core::report::{ExperimentReport, MetricFragment};
use ncl_core::reparam::NonNegTransform;
use ncl_core::training::{train, ObjectiveSpec};
use ncl_core::NclError;

use crate::{unix_ms, write_csv_table, write_report, RunContext, EXIT_OK};

#[derive(Default, Clone)]
struct ArmStats {
    final_loss: Vec<f64>,
    sparsity: Vec<f64>,
    consistency: Vec<f64>,
    correlation_offdiag: Vec<f64>,
    dead_dims: Vec<f64>,
    align_residual: Vec<f64>,
}

impl ArmStats {
    fn means(&self) -> Vec<f64> {
        [
            &self.final_loss,
            &self.sparsity,
            &self.consistency,
            &self.correlation_offdiag,
            &self.dead_dims,
            &self.align_residual,
        ]
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect()
    }
}

pub fn run(ctx: &RunContext, seeds: usize) -> Result<i32, NclError> {
    let started = std::time::Instant::now();
    let started_ms = unix_ms();
    if seeds == 0 {
        return Err(NclError::ConfigInvalid("need at least one seed".into()));
    }
    let model = ctx.config.model.build()?;
    let labels = ctx.config.label_map(&model)?;
    let hard = labels.hard_labels(&model)?;
    let perm: Vec<usize> = (0..model.n_classes()).collect();
    let phi = ground_truth_phi(&model, &perm)?;
    let k = ctx
        .config
        .encoder
        .feature_dim
        .unwrap_or(model.n_classes());

    let mut unconstrained = ArmStats::default();
    let mut nonneg = ArmStats::default();
    for s in 0..seeds as u64 {
        let seed = ctx.seed ^ (s + 1);
        for (transform, stats) in [
            (None, &mut unconstrained),
            (Some(NonNegTransform::Relu), &mut nonneg),
        ] {
            let mut enc = TabularEncoder::new(
                model.n_samples(),
                k,
                transform,
                EncoderInit::Auto,
                seed,
            );
            let outcome = train(
                &mut enc,
                &ObjectiveSpec::Spectral {
                    l1_lambda: ctx.config.objective.l1_lambda,
                },
                &model,
                &ctx.config.train.build(seed),
            )?;
            let features = encode_all(&enc, model.n_samples())?;
            stats.final_loss.push(outcome.trace.final_loss().unwrap());
            stats
                .dead_dims
                .push(outcome.trace.final_dead_dims().unwrap() as f64);
            stats.sparsity.push(
                sparsity(&features, ctx.config.metrics.sparsity_threshold)?.mean,
            );
            stats.consistency.push(
                class_consistency(
                    &features,
                    &hard,
                    ctx.config.metrics.activation_threshold,
                )?
                .mean,
            );
            stats
                .correlation_offdiag
                .push(correlation_matrix(&features)?.mean_offdiag_abs());
            if k == model.n_classes() {
                stats
                    .align_residual
                    .push(identifiability_align(&features, &phi)?.residual);
            } else {
                stats.align_residual.push(f64::NAN);
            }
        }
    }

    let metric_names = [
        "final_loss",
        "sparsity",
        "class_consistency",
        "correlation_offdiag",
        "dead_dims",
        "align_residual",
    ];
    let cl_means = unconstrained.means();
    let ncl_means = nonneg.means();

    let mut report = ExperimentReport::new(ctx.config_text.clone(), &[]);
    for (i, name) in metric_names.iter().enumerate() {
        report.push_metric(
            MetricFragment::scalar(format!("cl_{name}"), cl_means[i])
                .with_config(serde_json::json!({ "seeds": seeds })),
        )?;
        report.push_metric(
            MetricFragment::scalar(format!("ncl_{name}"), ncl_means[i])
                .with_config(serde_json::json!({ "seeds": seeds })),
        )?;
    }
    write_report(ctx, "report.json", &report, started, started_ms)?;

    let fmt = |v: f64| format!("{v:.16e}");
    let rows: Vec<Vec<String>> = metric_names
        .iter()
        .enumerate()
        .map(|(i, name)| vec![name.to_string(), fmt(cl_means[i]), fmt(ncl_means[i])])
        .collect();
    write_csv_table(
        &ctx.out("compare.csv"),
        &["metric", "cl", "ncl"],
        &rows,
    )?;

    println!(
        "compared CL vs NCL over {seeds} seeds: sparsity {:.3} vs {:.3}, consistency {:.3} vs {:.3}",
        cl_means[1], ncl_means[1], cl_means[2], ncl_means[2]
    );
    Ok(EXIT_OK)
}
