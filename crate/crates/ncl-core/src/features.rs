//! Per-sample feature tables: the common currency between encoders, losses,
//! factorization, and metrics.

use ndarray::{Array1, Array2};

use crate::error::{NclError, Result};

/// N x k matrix of feature rows f(x), with a non-negativity claim and an
/// optional per-row sqrt-marginal weighting that turns f rows into the
/// factor rows F = sqrt(P(x)) f(x).
#[derive(Debug, Clone)]
pub struct FeatureTable {
    values: Array2<f64>,
    nonneg: bool,
    weighting: Option<Array1<f64>>,
}

impl FeatureTable {
    pub fn new(values: Array2<f64>, nonneg: bool) -> Self {
        Self {
            values,
            nonneg,
            weighting: None,
        }
    }

    pub fn with_weighting(mut self, sqrt_marginal: Array1<f64>) -> Self {
        self.weighting = Some(sqrt_marginal);
        self
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_nonneg(&self) -> bool {
        self.nonneg
    }

    pub fn weighting(&self) -> Option<&Array1<f64>> {
        self.weighting.as_ref()
    }

    /// Verify the non-negativity claim entrywise (tolerance zero).
    pub fn check_nonneg(&self) -> Result<()> {
        for ((row, col), &v) in self.values.indexed_iter() {
            if v < 0.0 {
                return Err(NclError::NegativeEntry {
                    row,
                    col,
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// The weighted rows F with F[x,:] = sqrt(P(x)) f(x).
    pub fn weighted(&self) -> Result<Array2<f64>> {
        let w = self.weighting.as_ref().ok_or_else(|| {
            NclError::ConfigInvalid("feature table has no sqrt-marginal weighting".into())
        })?;
        if w.len() != self.n_samples() {
            return Err(NclError::DimensionMismatch(format!(
                "weighting has {} entries for {} rows",
                w.len(),
                self.n_samples()
            )));
        }
        let mut out = self.values.clone();
        for (x, mut row) in out.rows_mut().into_iter().enumerate() {
            let s = w[x];
            row.mapv_inplace(|v| v * s);
        }
        Ok(out)
    }

    /// Rebuild a table of unweighted rows f from a weighted factor F.
    pub fn from_weighted(weighted: Array2<f64>, sqrt_marginal: Array1<f64>, nonneg: bool) -> Self {
        let mut values = weighted;
        for (x, mut row) in values.rows_mut().into_iter().enumerate() {
            let s = sqrt_marginal[x];
            row.mapv_inplace(|v| v / s);
        }
        Self {
            values,
            nonneg,
            weighting: Some(sqrt_marginal),
        }
    }

    /// Restrict to a subset of feature dimensions, preserving order.
    pub fn select_dims(&self, dims: &[usize]) -> Result<Self> {
        let k = self.feature_dim();
        for &d in dims {
            if d >= k {
                return Err(NclError::IndexOutOfRange { index: d, n: k });
            }
        }
        let values = Array2::from_shape_fn((self.n_samples(), dims.len()), |(x, j)| {
            self.values[[x, dims[j]]]
        });
        Ok(Self {
            values,
            nonneg: self.nonneg,
            weighting: self.weighting.clone(),
        })
    }
}
