use rand::Rng;

use super::Linear;
use crate::error::{Error, Result};
use crate::geometry::NeighborGraph;
use crate::numeric::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Post-residual layer normalization.
    pub layer_norm: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 2,
            layer_norm: true,
        }
    }
}

/// Multi-head linear attention block.
///
/// Queries have width `dim`; keys and values may have a different width
/// `kv_dim` and are projected to `dim`. Head outputs are concatenated and
/// mixed by `w_o`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub norm: Option<(ParamId, ParamId)>,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f64>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.heads == 0 || dim % cfg.heads != 0 {
            return Err(Error::Parameter(format!(
                "width {dim} is not divisible by {} heads",
                cfg.heads
            )));
        }
        let w_q = Linear::new(store, &format!("{name}.w_q"), dim, dim, false, rng)?;
        let w_k = Linear::new(store, &format!("{name}.w_k"), kv_dim, dim, false, rng)?;
        let w_v = Linear::new(store, &format!("{name}.w_v"), kv_dim, dim, false, rng)?;
        let w_o = Linear::new(store, &format!("{name}.w_o"), dim, dim, false, rng)?;
        let norm = if cfg.layer_norm {
            let g = store.add(format!("{name}.norm.gamma"), Tensor::filled(&[dim], 1.0))?;
            let b = store.add(format!("{name}.norm.beta"), Tensor::zeros(&[dim]))?;
            Some((g, b))
        } else {
            None
        };
        Ok(Attention {
            w_q,
            w_k,
            w_v,
            w_o,
            norm,
            heads: cfg.heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.out_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.w_k.in_dim
    }

    /// Kernelized attention without residual: per head,
    /// `φ(q_i)ᵀ Σ_j φ(k_j) v_jᵀ / φ(q_i)ᵀ Σ_j φ(k_j)` with `φ = elu + 1`,
    /// then the output projection.
    pub fn linear_attention<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<Var> {
        if tape.rows(key) == 0 {
            return Err(Error::Precondition("attention over an empty key set".into()));
        }
        if tape.rows(key) != tape.rows(value) {
            return Err(Error::dim("linear_attention", tape.shape(key), tape.shape(value)));
        }
        let q = self.w_q.forward(tape, query)?;
        let q = tape.elu1(q);
        let k = self.w_k.forward(tape, key)?;
        let k = tape.elu1(k);
        let v = self.w_v.forward(tape, value)?;
        let d = self.dim() / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * d, (h + 1) * d)?,
                    tape.slice_cols(k, h * d, (h + 1) * d)?,
                    tape.slice_cols(v, h * d, (h + 1) * d)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let kv = tape.matmul(kt, vh)?;
            let num = tape.matmul(qh, kv)?;
            let ksum = tape.sum_rows(kh)?;
            let ksum = tape.transpose(ksum)?;
            let den = tape.matmul(qh, ksum)?;
            outs.push(tape.div_rows(num, den)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.w_o.forward(tape, cat)
    }

    fn finish<T: Scalar>(&self, tape: &mut Tape<'_, T>, residual: Var, attended: Var) -> Result<Var> {
        let x = tape.add(residual, attended)?;
        match self.norm {
            Some((g, b)) => {
                let g = tape.param(g);
                let b = tape.param(b);
                tape.layer_norm(x, g, b, T::from_f64c(LN_EPS))
            }
            None => Ok(x),
        }
    }

    /// Query, key and value all equal `tokens + pos`; residual on `tokens`.
    pub fn self_attention<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var, pos: Var) -> Result<Var> {
        let x = tape.add(tokens, pos)?;
        let a = self.linear_attention(tape, x, x, x)?;
        self.finish(tape, tokens, a)
    }

    /// Positional terms enter through the value only; residual on the query.
    pub fn cross_attention<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        query_tokens: Var,
        kv_tokens: Var,
        value_pos: Var,
    ) -> Result<Var> {
        let value = tape.add(kv_tokens, value_pos)?;
        let a = self.linear_attention(tape, query_tokens, kv_tokens, value)?;
        self.finish(tape, query_tokens, a)
    }

    /// Attention of each point over its own neighbor set. Every token is
    /// `features + pos`; the query of point `i` is its token and the keys and
    /// values are the tokens of its neighbors. Residual on `features`.
    pub fn local_attention<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        features: Var,
        pos: Var,
        graph: &NeighborGraph,
    ) -> Result<Var> {
        if graph.n != tape.rows(features) {
            return Err(Error::dim("local_attention", tape.shape(features), &[graph.n, graph.k]));
        }
        if self.kv_dim() != self.dim() {
            return Err(Error::Parameter("local attention needs equal query and key widths".into()));
        }
        let x = tape.add(features, pos)?;
        let q = self.w_q.forward(tape, x)?;
        let q = tape.elu1(q);
        let k = self.w_k.forward(tape, x)?;
        let k = tape.elu1(k);
        let v = self.w_v.forward(tape, x)?;
        let a = tape.graph_attention(q, k, v, &graph.indices, graph.k, self.heads)?;
        let a = self.w_o.forward(tape, a)?;
        self.finish(tape, features, a)
    }
}
