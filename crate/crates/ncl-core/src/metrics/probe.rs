//! Linear probing and Bayes-agreement evaluation.

use ndarray::Array2;

use crate::error::{NclError, Result};
use crate::features::FeatureTable;
use crate::latent_model::{argmax_lowest, LabelMap, LatentClassModel};

/// Full-batch multinomial logistic regression settings.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Stop once the loss delta falls below this.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            max_steps: 3000,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub steps_run: usize,
}

/// Train a multinomial logistic head (with bias) on the train split by
/// full-batch gradient descent with backtracking, then report accuracy on
/// the test split.
pub fn linear_probe(
    train_features: &FeatureTable,
    train_labels: &[usize],
    test_features: &FeatureTable,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let xtr = train_features.values();
    let xte = test_features.values();
    if xtr.nrows() != train_labels.len() || xte.nrows() != test_labels.len() {
        return Err(NclError::ShapeMismatch(
            "feature/label row counts differ".into(),
        ));
    }
    if xtr.ncols() != xte.ncols() {
        return Err(NclError::ShapeMismatch(
            "train and test feature widths differ".into(),
        ));
    }
    let distinct: std::collections::BTreeSet<usize> = train_labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(NclError::DegenerateLabels);
    }
    let n_labels = train_labels
        .iter()
        .chain(test_labels)
        .copied()
        .max()
        .unwrap_or(0)
        + 1;

    let k = xtr.ncols();
    // Weights plus a bias row; features are augmented with a 1 column.
    let mut w = Array2::<f64>::zeros((k + 1, n_labels));
    let aug = |x: &Array2<f64>| -> Array2<f64> {
        let mut out = Array2::ones((x.nrows(), k + 1));
        out.slice_mut(ndarray::s![.., 0..k]).assign(x);
        out
    };
    let xtr_aug = aug(xtr);
    let xte_aug = aug(xte);

    let eval = |w: &Array2<f64>| -> (f64, Array2<f64>) {
        let logits = xtr_aug.dot(w);
        let b = xtr_aug.nrows() as f64;
        let mut loss = 0.0;
        let mut dlogits = Array2::<f64>::zeros(logits.dim());
        for (i, row) in logits.rows().into_iter().enumerate() {
            let zmax = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&z| (z - zmax).exp()).sum();
            let lse = zmax + denom.ln();
            loss += lse - row[train_labels[i]];
            for y in 0..n_labels {
                dlogits[[i, y]] =
                    ((row[y] - lse).exp() - f64::from(y == train_labels[i])) / b;
            }
        }
        (loss / b, xtr_aug.t().dot(&dlogits))
    };

    let (mut loss, mut grad) = eval(&w);
    let mut rate = cfg.learning_rate;
    let mut steps_run = 0;
    for _ in 0..cfg.max_steps {
        let mut candidate = &w - &grad.mapv(|g| rate * g);
        let (mut new_loss, mut new_grad) = eval(&candidate);
        let mut halvings = 0;
        while new_loss > loss && halvings < 50 {
            rate *= 0.5;
            candidate = &w - &grad.mapv(|g| rate * g);
            (new_loss, new_grad) = eval(&candidate);
            halvings += 1;
        }
        w = candidate;
        steps_run += 1;
        let delta = (loss - new_loss).abs();
        loss = new_loss;
        grad = new_grad;
        rate *= 1.05;
        if delta < cfg.tolerance {
            break;
        }
    }

    let acc = |x: &Array2<f64>, labels: &[usize]| -> f64 {
        let logits = x.dot(&w);
        let hits = logits
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &y)| argmax_lowest(row.iter().copied()) == y)
            .count();
        hits as f64 / labels.len() as f64
    };
    Ok(ProbeReport {
        accuracy: acc(&xte_aug, test_labels),
        train_accuracy: acc(&xtr_aug, train_labels),
        steps_run,
    })
}

/// Fraction of samples where `argmax_y (W*^T f(x))_y` agrees with the Bayes
/// prediction `argmax_y P(y|x)`, both under the lowest-index tie-break.
pub fn bayes_agreement(
    weights: &Array2<f64>,
    features: &FeatureTable,
    model: &LatentClassModel,
    labels: &LabelMap,
) -> Result<f64> {
    let f = features.values();
    if f.nrows() != model.n_samples() {
        return Err(NclError::DimensionMismatch(format!(
            "{} feature rows for {} samples",
            f.nrows(),
            model.n_samples()
        )));
    }
    if weights.nrows() != f.ncols() || weights.ncols() != labels.n_labels() {
        return Err(NclError::LabelMapMismatch(format!(
            "weights are {}x{}, expected {}x{}",
            weights.nrows(),
            weights.ncols(),
            f.ncols(),
            labels.n_labels()
        )));
    }
    let scores = f.dot(weights);
    let label_post = labels.label_posterior(model)?;
    let mut hits = 0usize;
    for x in 0..model.n_samples() {
        let predicted = argmax_lowest(scores.row(x).iter().copied());
        let bayes = argmax_lowest(label_post.row(x).iter().copied());
        hits += usize::from(predicted == bayes);
    }
    Ok(hits as f64 / model.n_samples() as f64)
}

/// Convenience: P-weighted expectation is not needed for the probe; hard
/// labels for each sample come from the label map's Bayes assignment.
pub fn probe_labels(model: &LatentClassModel, labels: &LabelMap) -> Result<Vec<usize>> {
    labels.hard_labels(model)
}
