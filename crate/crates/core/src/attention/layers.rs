use rand::Rng;

use crate::error::Result;
use crate::numeric::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Uniform bound for Xavier/Glorot initialization.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Dense affine map `x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f64>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = xavier_bound(in_dim, out_dim);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[in_dim, out_dim], bound, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-point positional embedding: `3 → C → C` perceptron with a rectifier
/// after the hidden layer.
#[derive(Clone, Debug)]
pub struct PosEmbed {
    pub hidden: Linear,
    pub out: Linear,
}

impl PosEmbed {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f64>,
        name: &str,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(PosEmbed {
            hidden: Linear::new(store, &format!("{name}.hidden"), 3, width, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng)?,
        })
    }

    pub fn width(&self) -> usize {
        self.out.out_dim
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, coords: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, coords)?;
        let h = tape.relu(h);
        self.out.forward(tape, h)
    }
}
