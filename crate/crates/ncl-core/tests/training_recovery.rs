//! Recovery and identifiability behavior of actual training runs: the
//! unique-solution property on one-hot models, the dead-dimension
//! comparison between plain relu and the gelu-backward trick, the
//! constrained-vs-unconstrained loss ordering, and the orthogonality bound
//! on trained features.

use ncl_core::encoders::{encode_all, Encoder, EncoderInit, TabularEncoder};
use ncl_core::features::FeatureTable;
use ncl_core::latent_model::{
    class_overlap, cooccurrence, ground_truth_phi, one_hot_model, overlap_model,
};
use ncl_core::metrics::identifiability_align;
use ncl_core::objectives::equivalence_constant;
use ncl_core::reparam::NonNegTransform;
use ncl_core::training::{
    dead_dimension_count, projected_gradient_nmf, train, ObjectiveSpec, TrainConfig,
    ACTIVATION_THRESHOLD,
};

fn cfg(lr: f64, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        steps,
        seed,
        ..Default::default()
    }
}

#[test]
fn ncl_training_recovers_ground_truth_up_to_permutation_and_scale() {
    let model = one_hot_model(5, 50).unwrap();
    let perm: Vec<usize> = (0..5).collect();
    let phi = ground_truth_phi(&model, &perm).unwrap();
    for seed in 0..5u64 {
        let mut enc = TabularEncoder::new(
            50,
            5,
            Some(NonNegTransform::Relu),
            EncoderInit::Auto,
            seed,
        );
        train(
            &mut enc,
            &ObjectiveSpec::Spectral { l1_lambda: 0.0 },
            &model,
            &cfg(0.5, 4000, seed),
        )
        .unwrap();
        let features = encode_all(&enc, 50).unwrap();
        let result = identifiability_align(&features, &phi).unwrap();
        assert!(
            result.residual < 1e-3,
            "seed {seed}: residual {}",
            result.residual
        );
    }
}

#[test]
fn unconstrained_training_matches_loss_but_can_rotate_away() {
    // CL reaches the same optimal loss value; its features need not align
    // with the axis-aligned ground truth (rotation symmetry).
    let model = one_hot_model(5, 50).unwrap();
    let constant = equivalence_constant(&model);
    let perm: Vec<usize> = (0..5).collect();
    let phi = ground_truth_phi(&model, &perm).unwrap();
    let mut worst_residual = 0.0_f64;
    for seed in 0..6u64 {
        let mut enc = TabularEncoder::new(50, 5, None, EncoderInit::Auto, seed);
        let outcome = train(
            &mut enc,
            &ObjectiveSpec::Spectral { l1_lambda: 0.0 },
            &model,
            &cfg(0.5, 4000, seed),
        )
        .unwrap();
        let final_loss = outcome.trace.final_loss().unwrap();
        assert!((final_loss + constant).abs() < 1e-3, "seed {seed}");
        let features = encode_all(&enc, 50).unwrap();
        let result = identifiability_align(&features, &phi).unwrap();
        worst_residual = worst_residual.max(result.residual);
    }
    assert!(
        worst_residual > 1e-2,
        "every unconstrained run landed axis-aligned (worst {worst_residual})"
    );
}

#[test]
fn nmf_restarts_recover_the_unique_factorization() {
    let model = one_hot_model(5, 50).unwrap();
    let co = cooccurrence(&model);
    let perm: Vec<usize> = (0..5).collect();
    let phi = ground_truth_phi(&model, &perm).unwrap();
    for seed in 0..5u64 {
        let outcome = projected_gradient_nmf(
            co.normalized(),
            model.marginal(),
            5,
            &cfg(0.25, 6000, seed),
        )
        .unwrap();
        let result = identifiability_align(&outcome.factor, &phi).unwrap();
        assert!(
            result.residual < 1e-4,
            "seed {seed}: residual {}",
            result.residual
        );
    }
}

#[test]
fn trick_runs_keep_at_most_as_many_dead_dimensions() {
    // Gaussian init with excess dimensions: plain relu strands some of
    // them, the gelu-backward trick can pull them back.
    let model = one_hot_model(4, 24).unwrap();
    let mut dead_relu = 0usize;
    let mut dead_trick = 0usize;
    for seed in 0..10u64 {
        for (transform, sink) in [
            (NonNegTransform::Relu, &mut dead_relu),
            (NonNegTransform::ReluForwardGeluBackward, &mut dead_trick),
        ] {
            let mut enc = TabularEncoder::new(
                24,
                8,
                Some(transform),
                EncoderInit::Gaussian,
                seed,
            );
            let outcome = train(
                &mut enc,
                &ObjectiveSpec::Spectral { l1_lambda: 0.0 },
                &model,
                &cfg(0.5, 800, seed),
            )
            .unwrap();
            *sink += outcome.trace.final_dead_dims().unwrap();
        }
    }
    assert!(
        dead_trick <= dead_relu,
        "trick {dead_trick} vs relu {dead_relu} dead dimensions over 10 seeds"
    );
}

#[test]
fn negative_preactivations_receive_gradient_only_under_the_trick() {
    let model = one_hot_model(2, 8).unwrap();
    for (transform, expect_movement) in [
        (NonNegTransform::Relu, false),
        (NonNegTransform::ReluForwardGeluBackward, true),
    ] {
        let mut enc =
            TabularEncoder::new(8, 2, Some(transform), EncoderInit::Gaussian, 3);
        let negative_entries: Vec<(usize, f64)> = enc
            .weights()
            .iter()
            .enumerate()
            .filter(|(_, &w)| w < -0.05)
            .map(|(i, &w)| (i, w))
            .collect();
        assert!(!negative_entries.is_empty(), "need negative starts");
        train(
            &mut enc,
            &ObjectiveSpec::Spectral { l1_lambda: 0.0 },
            &model,
            &cfg(0.5, 3, 3),
        )
        .unwrap();
        let after = enc.params();
        let moved = negative_entries
            .iter()
            .any(|&(i, before)| (after[i] - before).abs() > 1e-12);
        assert_eq!(moved, expect_movement, "transform {transform:?}");
    }
}

#[test]
fn constrained_loss_is_at_least_the_unconstrained_loss() {
    // On an overlap model the normalized co-occurrence has negative
    // eigenvector components, so NCL genuinely cannot do better than CL.
    let model = overlap_model(3, 12, 0.02).unwrap();
    let constant = equivalence_constant(&model);
    let run = |transform| {
        let mut enc = TabularEncoder::new(12, 3, transform, EncoderInit::Auto, 11);
        train(
            &mut enc,
            &ObjectiveSpec::Spectral { l1_lambda: 0.0 },
            &model,
            &cfg(0.5, 5000, 11),
        )
        .unwrap()
        .trace
        .final_loss()
        .unwrap()
    };
    let ncl_loss = run(Some(NonNegTransform::Relu));
    let cl_loss = run(None);
    assert!(
        ncl_loss >= cl_loss - 1e-9,
        "constrained {ncl_loss} beat unconstrained {cl_loss}"
    );
    assert!(ncl_loss >= -constant - 1e-9);
    assert!(cl_loss >= -constant - 1e-9);
}

#[test]
fn l1_regularization_increases_sparsity_of_unconstrained_runs() {
    let model = one_hot_model(4, 24).unwrap();
    let run = |lambda: f64| {
        let mut enc = TabularEncoder::new(24, 4, None, EncoderInit::Auto, 13);
        train(
            &mut enc,
            &ObjectiveSpec::Spectral { l1_lambda: lambda },
            &model,
            &cfg(0.5, 2500, 13),
        )
        .unwrap();
        let features = encode_all(&enc, 24).unwrap();
        ncl_core::metrics::sparsity(&features, 1e-5).unwrap().mean
    };
    let plain = run(0.0);
    let regularized = run(0.01);
    assert!(
        regularized >= plain,
        "l1 run is denser: {regularized} < {plain}"
    );
}

#[test]
fn trained_ncl_features_respect_the_orthogonality_bound() {
    // Mild overlap only: past roughly a third of the maximum overlap the
    // factorization manifold widens and trained features legitimately
    // drift off the axis-aligned solution.
    for &eps in &[0.005, 0.01, 0.02] {
        let model = overlap_model(4, 16, eps).unwrap();
        let realized = class_overlap(&model).unwrap();
        let mut enc = TabularEncoder::new(
            16,
            4,
            Some(NonNegTransform::Relu),
            EncoderInit::Auto,
            19,
        );
        train(
            &mut enc,
            &ObjectiveSpec::Spectral { l1_lambda: 0.0 },
            &model,
            &cfg(0.5, 5000, 19),
        )
        .unwrap();
        let features = encode_all(&enc, 16).unwrap();
        let lhs =
            ncl_core::metrics::weighted_offdiag_max(&features, &model, true).unwrap();
        let bound = realized / model.min_class_prior() + 0.05;
        assert!(lhs <= bound, "eps {eps}: {lhs} > {bound}");
    }
}

#[test]
fn dead_dimension_count_reads_the_full_table() {
    let values = ndarray::array![[0.0, 1.0], [0.0, 2.0], [0.0, 0.0]];
    assert_eq!(dead_dimension_count(&values, ACTIVATION_THRESHOLD), 1);
    let table = FeatureTable::new(values, true);
    assert!(table.check_nonneg().is_ok());
}
