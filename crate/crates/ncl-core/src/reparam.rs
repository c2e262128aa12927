//! Non-negative output transforms, including the dead-neuron trick that
//! forwards as ReLU while taking gradients from the exact Gaussian GELU.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{NclError, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Elementwise non-negative transform applied to encoder outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonNegTransform {
    Relu,
    Softplus,
    Sigmoid,
    /// Forwards exactly as ReLU; the backward pass uses the GELU derivative
    /// so negative pre-activations keep receiving gradient.
    ReluForwardGeluBackward,
}

impl NonNegTransform {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Self::Relu),
            "softplus" => Ok(Self::Softplus),
            "sigmoid" => Ok(Self::Sigmoid),
            "relu_forward_gelu_backward" | "relu_gelu" => Ok(Self::ReluForwardGeluBackward),
            other => Err(NclError::ConfigInvalid(format!(
                "unknown transform `{other}`"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Softplus => "softplus",
            Self::Sigmoid => "sigmoid",
            Self::ReluForwardGeluBackward => "relu_forward_gelu_backward",
        }
    }

    fn forward_scalar(&self, z: f64) -> f64 {
        match self {
            Self::Relu | Self::ReluForwardGeluBackward => z.max(0.0),
            Self::Softplus => softplus(z),
            Self::Sigmoid => sigmoid(z),
        }
    }

    /// d(forward)/dz for the plain kinds; the GELU derivative for the trick.
    /// The ReLU derivative at exactly 0 is taken as 0.
    fn derivative_scalar(&self, z: f64) -> f64 {
        match self {
            Self::Relu => f64::from(z > 0.0),
            Self::Softplus => sigmoid(z),
            Self::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Self::ReluForwardGeluBackward => gelu_derivative(z),
        }
    }

    /// The scalar map whose derivative `backward` actually computes. Equals
    /// the forward map for every kind except the trick, where it is GELU.
    /// Finite-difference oracles differentiate this function.
    pub fn gradient_surrogate_scalar(&self, z: f64) -> f64 {
        match self {
            Self::ReluForwardGeluBackward => gelu(z),
            _ => self.forward_scalar(z),
        }
    }

    /// Elementwise forward map; output is entrywise >= 0 for every kind.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_finite(z)?;
        Ok(z.iter().map(|&v| self.forward_scalar(v)).collect())
    }

    /// Elementwise `upstream * derivative(z)`.
    pub fn backward(&self, z: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        check_finite(z)?;
        check_finite(upstream)?;
        if z.len() != upstream.len() {
            return Err(NclError::ShapeMismatch(format!(
                "pre-activation length {} vs upstream length {}",
                z.len(),
                upstream.len()
            )));
        }
        Ok(z.iter()
            .zip(upstream)
            .map(|(&v, &u)| u * self.derivative_scalar(v))
            .collect())
    }

    /// Apply the forward map to a whole table in place.
    pub fn forward_inplace(&self, z: &mut ndarray::Array2<f64>) {
        z.mapv_inplace(|v| self.forward_scalar(v));
    }

    pub(crate) fn derivative_table(&self, z: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
        z.mapv(|v| self.derivative_scalar(v))
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(NclError::NonFiniteInput { index }),
        None => Ok(()),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Exact Gaussian GELU: z * Phi(z), with Phi the standard normal CDF.
pub fn gelu(z: f64) -> f64 {
    z * normal_cdf(z)
}

/// d/dz [z * Phi(z)] = Phi(z) + z * pdf(z).
pub fn gelu_derivative(z: f64) -> f64 {
    normal_cdf(z) + z * normal_pdf(z)
}

pub fn normal_cdf(z: f64) -> f64 {
    // erfc keeps full relative precision in the left tail, which the
    // finite-difference checks of the gelu trick exercise.
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}
