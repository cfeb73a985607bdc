use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor, TensorError};

/// Slope on the non-positive side of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Leaky,
    Linear,
    Logistic,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Leaky => "leaky",
            Self::Linear => "linear",
            Self::Logistic => "logistic",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "leaky" => Some(Self::Leaky),
            "linear" => Some(Self::Linear),
            "logistic" => Some(Self::Logistic),
            _ => None,
        }
    }

    pub fn apply_in_place<T: Element>(self, x: &mut Tensor<T>) {
        match self {
            Self::Linear => {}
            Self::Leaky => x.data_mut().iter_mut().for_each(|v| *v = leaky(*v)),
            Self::Logistic => x.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
    }

    /// Gradient through the activation given its *output*. Valid because the
    /// leaky rectifier preserves sign and the logistic derivative is `y (1 - y)`.
    pub fn backward_from_output<T: Element>(
        self,
        output: &Tensor<T>,
        grad: &mut Tensor<T>,
    ) -> Result<(), TensorError> {
        grad.ensure_shape(output.shape())?;
        match self {
            Self::Linear => {}
            Self::Leaky => {
                let slope = T::from_f64(LEAKY_SLOPE);
                grad.data_mut()
                    .iter_mut()
                    .zip(output.data())
                    .for_each(|(g, &y)| if y <= T::zero() { *g = *g * slope });
            }
            Self::Logistic => grad
                .data_mut()
                .iter_mut()
                .zip(output.data())
                .for_each(|(g, &y)| *g = *g * y * (T::one() - y)),
        }
        Ok(())
    }
}

#[inline]
pub fn leaky<T: Element>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::from_f64(LEAKY_SLOPE)
    }
}

/// Overflow-free logistic function.
#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn leaky_relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(leaky)
}

pub fn logistic<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

/// Subgradient 0.1 at `x = 0`.
pub fn leaky_relu_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    grad_out.ensure_shape(x.shape())?;
    let slope = T::from_f64(LEAKY_SLOPE);
    let mut g = grad_out.clone();
    g.data_mut()
        .iter_mut()
        .zip(x.data())
        .for_each(|(g, &v)| if v <= T::zero() { *g = *g * slope });
    Ok(g)
}

pub fn logistic_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    grad_out.ensure_shape(x.shape())?;
    let mut g = grad_out.clone();
    g.data_mut().iter_mut().zip(x.data()).for_each(|(g, &v)| {
        let s = sigmoid(v);
        *g = *g * s * (T::one() - s);
    });
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn t(v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v).unwrap()
    }

    #[test]
    fn leaky_values() {
        assert_eq!(leaky_relu(&t(vec![2.0, -2.0, 0.0])).data(), &[2.0, -0.2, 0.0]);
    }

    #[test]
    fn leaky_backward_slope() {
        let g = leaky_relu_backward(&t(vec![-2.0, 0.0, 3.0]), &t(vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.1, 0.1, 1.0]);
    }

    #[test]
    fn logistic_saturates_without_overflow() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert!(sigmoid(88.0f32).is_finite());
    }

    #[test]
    fn names_round_trip() {
        for a in [Activation::Leaky, Activation::Linear, Activation::Logistic] {
            assert_eq!(Activation::from_name(a.name()), Some(a));
        }
        assert_eq!(Activation::from_name("relu"), None);
    }
}
