//! `select`: expected-activation feature selection. Trains the configured
//! encoder, ranks dimensions by EA, and compares retrieval and probing
//! over all dimensions vs a random subset vs the EA-selected subset.

use ncl_core::encoders::encode_all;
use ncl_core::features::FeatureTable;
use ncl_core::latent_model::seeded;
use ncl_core::metrics::{
    expected_activation, linear_probe, retrieval_map_tolerant, select_top, ProbeConfig,
};
use ncl_core::report::{ExperimentReport, MetricFragment};
use ncl_core::training::train;
use ncl_core::NclError;
use rand::Rng;

use crate::{unix_ms, write_csv_table, write_report, RunContext, EXIT_OK};

pub fn run(ctx: &RunContext, keep: Option<usize>, random_seeds: usize) -> Result<i32, NclError> {
    let started = std::time::Instant::now();
    let started_ms = unix_ms();
    let model = ctx.config.model.build()?;
    let labels = ctx.config.label_map(&model)?;
    let hard = labels.hard_labels(&model)?;

    let mut encoder = super::build_encoder(&ctx.config, &model, ctx.seed)?;
    let transform = ctx.config.encoder.parse_transform()?;
    let objective = ctx
        .config
        .objective
        .build(&model, Some(&labels), transform)?;
    train(
        encoder.as_dyn_mut(),
        &objective,
        &model,
        &ctx.config.train.build(ctx.seed),
    )?;
    let features =
        encode_all(encoder.as_dyn(), model.n_samples())?.with_weighting(model.sqrt_marginal());
    let k = features.feature_dim();
    let keep = keep.unwrap_or(model.n_classes()).min(k);

    let activation = expected_activation(&features)?;
    let ea_dims = select_top(&activation.ea, keep);

    let probe_cfg = ProbeConfig {
        learning_rate: ctx.config.metrics.probe_learning_rate,
        max_steps: ctx.config.metrics.probe_max_steps,
        ..Default::default()
    };
    let retrieval_k = ctx.config.metrics.retrieval_k;
    let score = |table: &FeatureTable| -> Result<(f64, f64), NclError> {
        let map = retrieval_map_tolerant(table, &hard, retrieval_k)?.map;
        let acc = linear_probe(table, &hard, table, &hard, &probe_cfg)?.accuracy;
        Ok((map, acc))
    };

    let (map_all, acc_all) = score(&features)?;
    let (map_ea, acc_ea) = score(&features.select_dims(&ea_dims)?)?;

    let mut rng = seeded(ctx.seed ^ 0x5e1ec7);
    let mut map_random_sum = 0.0;
    let mut acc_random_sum = 0.0;
    for _ in 0..random_seeds {
        let mut dims: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            let j = rng.random_range(0..=i);
            dims.swap(i, j);
        }
        dims.truncate(keep);
        dims.sort_unstable();
        let (map_r, acc_r) = score(&features.select_dims(&dims)?)?;
        map_random_sum += map_r;
        acc_random_sum += acc_r;
    }
    let map_random = map_random_sum / random_seeds as f64;
    let acc_random = acc_random_sum / random_seeds as f64;

    let mut report = ExperimentReport::new(ctx.config_text.clone(), &[]);
    report.push_metric(
        MetricFragment::scalar("ea_ranking", activation.ea.sum() / k as f64)
            .with_per_item(activation.ea.to_vec())
            .with_config(serde_json::json!({ "selected": ea_dims })),
    )?;
    report.push_metric(MetricFragment::scalar("map_all", map_all))?;
    report.push_metric(MetricFragment::scalar("map_ea", map_ea))?;
    report.push_metric(MetricFragment::scalar("map_random", map_random))?;
    report.push_metric(MetricFragment::scalar("probe_all", acc_all))?;
    report.push_metric(MetricFragment::scalar("probe_ea", acc_ea))?;
    report.push_metric(MetricFragment::scalar("probe_random", acc_random))?;
    write_report(ctx, "report.json", &report, started, started_ms)?;

    let fmt = |v: f64| format!("{v:.16e}");
    write_csv_table(
        &ctx.out("selection.csv"),
        &["selection", "dims", "retrieval_map", "probe_accuracy"],
        &[
            vec!["all".into(), k.to_string(), fmt(map_all), fmt(acc_all)],
            vec![
                format!("random_{keep}"),
                keep.to_string(),
                fmt(map_random),
                fmt(acc_random),
            ],
            vec![
                format!("ea_{keep}"),
                keep.to_string(),
                fmt(map_ea),
                fmt(acc_ea),
            ],
        ],
    )?;

    println!(
        "selection over {k} dims (keep {keep}): mAP all={map_all:.4} ea={map_ea:.4} random={map_random:.4}"
    );
    Ok(EXIT_OK)
}
