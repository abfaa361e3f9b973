use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{Bound, ParamId, ParamStore, Parameter};
use super::tape::{Tape, Var};
use super::tensor::{matmul, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    LeakyRelu(f64),
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
        }
    }

    pub(crate) fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
        }
    }
}

/// `activation(x·W + bias)` evaluated directly on parameter values.
pub fn linear_layer(x: &Tensor, w: &Parameter, bias: Option<&Parameter>, activation: Activation) -> Result<Tensor> {
    let mut y = matmul(x, &w.value)?;
    if let Some(b) = bias {
        if b.value.shape() != (1, y.cols()) {
            return Err(Error::dim("linear_layer bias", (1, y.cols()), b.value.shape()));
        }
        for r in 0..y.rows() {
            for (o, bv) in y.row_mut(r).iter_mut().zip(b.value.data()) {
                *o += bv;
            }
        }
    }
    Ok(y.map(|v| activation.apply(v)))
}

/// Glorot-uniform weight matrix.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(fan_in, fan_out, -limit, limit, rng)
}

/// A fully connected layer registered in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(in_dim, out_dim, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, bound.var(self.weight))?;
        let y = match self.bias {
            Some(b) => tape.add_row(xw, bound.var(b))?,
            None => xw,
        };
        Ok(self.activation.on_tape(tape, y))
    }
}

/// Builds a stack of dense layers `in_dim → dims[0] → … → dims[last]`, with
/// `hidden` activation between layers and `output` on the last one.
#[allow(clippy::too_many_arguments)]
pub fn dense_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    dims: &[usize],
    bias: bool,
    hidden: Activation,
    output: Activation,
    rng: &mut R,
) -> Vec<Dense> {
    let mut prev = in_dim;
    dims.iter()
        .enumerate()
        .map(|(i, &d)| {
            let act = if i + 1 == dims.len() { output } else { hidden };
            let layer = Dense::new(store, &format!("{prefix}.{i}"), prev, d, bias, act, rng);
            prev = d;
            layer
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_layer_is_identity() {
        let x = Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let w = Parameter::new("w", Tensor::identity(2));
        let b = Parameter::new("b", Tensor::zeros(1, 2));
        assert_eq!(linear_layer(&x, &w, Some(&b), Activation::Linear).unwrap(), x);
    }

    #[test]
    fn leaky_relu_slope() {
        let x = Tensor::from_rows(&[[-1.0, 2.0]]);
        let w = Parameter::new("w", Tensor::identity(2));
        let y = linear_layer(&x, &w, None, Activation::leaky()).unwrap();
        assert!((y.get(0, 0) + 0.2).abs() < 1e-15);
        assert_eq!(y.get(0, 1), 2.0);
    }

    #[test]
    fn bias_broadcasts_per_row() {
        let x = Tensor::zeros(2, 2);
        let w = Parameter::new("w", Tensor::identity(2));
        let b = Parameter::new("b", Tensor::from_rows(&[[1.0, 2.0]]));
        let y = linear_layer(&x, &w, Some(&b), Activation::Linear).unwrap();
        assert_eq!(y, Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0]]));
    }

    #[test]
    fn mismatched_input_is_rejected() {
        let x = Tensor::zeros(2, 3);
        let w = Parameter::new("w", Tensor::identity(2));
        assert!(matches!(
            linear_layer(&x, &w, None, Activation::Linear),
            Err(Error::Dimension { .. })
        ));
    }
}
