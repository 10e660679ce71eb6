//! Dense nd-array storage and reverse-mode automatic differentiation.
//!
//! This is not a general autodiff engine: it records exactly the
//! operations the generator forward pass and the fitting loss need
//! (transposed convolution, pointwise activations, concatenation and
//! element selection for latent assembly, subtraction, squared-norm
//! reduction). Gradients are propagated over a flat tape in reverse
//! recording order. Accumulation order inside every reduction is
//! fixed, so gradients are bit-identical across runs and thread
//! counts.

mod conv;
mod gradcheck;
mod graph;

pub use gradcheck::gradcheck;
pub use graph::{Graph, NodeId};

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Scalar types the engine runs on: f32 for fitting, f64 for
/// gradient checking.
pub trait Real:
    num_traits::Float + fmt::Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("conv_transpose2d: input has {input_channels} channels, weight expects {weight_channels}")]
    ChannelMismatch {
        input_channels: usize,
        weight_channels: usize,
    },
    #[error("conv_transpose2d: non-positive output extent for input extent {input}, stride {stride}, padding {padding}, kernel {kernel}")]
    NonPositiveOutput {
        input: usize,
        stride: usize,
        padding: usize,
        kernel: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    BackwardNonScalar { shape: Vec<usize> },
    #[error("backward called twice without reset")]
    DoubleBackward,
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("leaky_relu slope {slope} outside (0, 1)")]
    InvalidSlope { slope: f64 },
    #[error("invalid stride {stride} (must be >= 1)")]
    InvalidStride { stride: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Pointwise nonlinearity. `LeakyRelu` carries its negative-side
/// slope; the conventional default is 0.01.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub fn leaky_relu_default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }

    pub fn validate(&self) -> Result<()> {
        if let Activation::LeakyRelu { slope } = self {
            if !(*slope > 0.0 && *slope < 1.0) {
                return Err(TensorError::InvalidSlope { slope: *slope });
            }
        }
        Ok(())
    }

    pub fn apply<T: Real>(&self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > T::zero() {
                    x
                } else {
                    x * T::from_f64(*slope)
                }
            }
        }
    }

    /// Derivative expressed through the input value.
    pub fn derivative<T: Real>(&self, x: T) -> T {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64(*slope)
                }
            }
        }
    }
}

/// Immutable dense array. Data is shared behind an `Arc`, so cloning
/// a tensor (e.g. inserting the same weights into many graphs) does
/// not copy the buffer.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking the shape/length invariant and
    /// rejecting non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite {
                context: "tensor construction",
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for op outputs whose finiteness is
    /// checked by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![T::zero(); n])
    }

    pub fn scalar(v: T) -> Result<Self> {
        Self::new(vec![], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&e| e == 1)
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_extent(
    input: usize,
    stride: usize,
    padding: usize,
    kernel: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::InvalidStride { stride });
    }
    let grown = (input - 1) * stride + kernel;
    if grown <= 2 * padding {
        return Err(TensorError::NonPositiveOutput {
            input,
            stride,
            padding,
            kernel,
        });
    }
    Ok(grown - 2 * padding)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::ShapeDataMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
        assert!(matches!(
            Tensor::<f64>::new(vec![1], vec![f64::INFINITY]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn activation_definitions() {
        assert_eq!(Activation::Tanh.apply(0.0_f64), 0.0);
        assert_eq!(Activation::Relu.apply(-3.5_f64), 0.0);
        assert_eq!(Activation::Relu.apply(2.0_f64), 2.0);
        let lrelu = Activation::LeakyRelu { slope: 0.01 };
        assert!((lrelu.apply(-1.0_f64) + 0.01).abs() < 1e-15);
        assert!(Activation::LeakyRelu { slope: 1.5 }.validate().is_err());
        assert!(Activation::LeakyRelu { slope: 0.0 }.validate().is_err());
    }

    #[test]
    fn output_extent_formula() {
        // (1-1)*1 - 0 + 4 = 4
        assert_eq!(conv_transpose_extent(1, 1, 0, 4).unwrap(), 4);
        // (4-1)*2 - 2 + 4 = 8
        assert_eq!(conv_transpose_extent(4, 2, 1, 4).unwrap(), 8);
        assert!(conv_transpose_extent(1, 1, 2, 4).is_err());
    }
}
