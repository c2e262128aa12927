use ndarray::Array2;
use ncl_core::encoders::{encode_all, TabularEncoder};
use ncl_core::features::FeatureTable;
use ncl_core::latent_model::{cooccurrence, ground_truth_phi, one_hot_model, seeded};
use ncl_core::metrics::identifiability_align;
use ncl_core::reparam::NonNegTransform;
use ncl_core::training::{train, ObjectiveSpec, TrainConfig};
use rand::Rng;
use std::time::Instant;

fn pgd(a: &Array2<f64>, k: usize, seed: u64, eta0: f64, steps: usize, scale_mult: f64) -> Array2<f64> {
    let n = a.nrows();
    let mut rng = seeded(seed);
    let mean = a.iter().sum::<f64>() / (n * n) as f64;
    let scale = scale_mult * (mean / k as f64).sqrt();
    let mut f = Array2::from_shape_fn((n, k), |_| 2.0 * scale * rng.random::<f64>());
    let residual = |f: &Array2<f64>| -> f64 {
        let g = f.dot(&f.t());
        a.iter().zip(g.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut res = residual(&f);
    let mut eta = eta0;
    for _ in 0..steps {
        let gram = f.dot(&f.t());
        let grad = (&gram - a).dot(&f).mapv(|v| 4.0 * v);
        for _ in 0..60 {
            let cand = (&f - &grad.mapv(|g| eta * g)).mapv(|v: f64| v.max(0.0));
            let r = residual(&cand);
            if r <= res { f = cand; res = r; eta *= 1.1; break; }
            eta *= 0.5;
        }
    }
    f
}

fn main() {
    let model = one_hot_model(5, 50).unwrap();
    let perm: Vec<usize> = (0..5).collect();
    let phi = ground_truth_phi(&model, &perm).unwrap();
    let co = cooccurrence(&model);

    for scale_mult in [0.01f64, 0.001] {
        let t0 = Instant::now();
        let mut fails = 0; let mut worst = 0.0f64;
        for seed in 0..40u64 {
            let mut rng = seeded(seed);
            let scale = scale_mult / (5.0f64).sqrt();
            let w = Array2::from_shape_fn((50, 5), |_| scale * rng.random::<f64>());
            let mut enc = TabularEncoder::from_weights(w, Some(NonNegTransform::Relu));
            let cfg = TrainConfig { learning_rate: 0.5, steps: 8000, seed, ..Default::default() };
            train(&mut enc, &ObjectiveSpec::Spectral { l1_lambda: 0.0 }, &model, &cfg).unwrap();
            let f = encode_all(&enc, 50).unwrap();
            let r = identifiability_align(&f, &phi).unwrap().residual;
            worst = worst.max(r);
            if r >= 1e-3 { fails += 1; }
        }
        println!("train init x{scale_mult}: {fails}/40 fail worst {worst:.3e} ({:.1}s)", t0.elapsed().as_secs_f64());
    }
    for scale_mult in [0.01f64, 0.001] {
        let t0 = Instant::now();
        let mut fails = 0; let mut worst = 0.0f64;
        for seed in 0..60u64 {
            let f = pgd(co.normalized(), 5, 7000 + seed, 0.25, 12000, scale_mult);
            let table = FeatureTable::from_weighted(f, model.sqrt_marginal(), true);
            let r = identifiability_align(&table, &phi).unwrap().residual;
            worst = worst.max(r);
            if r >= 1e-3 { fails += 1; }
        }
        println!("nmf init x{scale_mult}: {fails}/60 fail worst {worst:.3e} ({:.1}s)", t0.elapsed().as_secs_f64());
    }
}
