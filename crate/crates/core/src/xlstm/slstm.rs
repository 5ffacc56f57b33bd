//! Scalar-memory cell with exponential gating and a log-space stabilizer.
//! Recurrent weights are block-diagonal over heads, so each head's lanes
//! only see their own previous hidden values.

use rand_chacha::ChaCha8Rng;

use super::layers::{block_diagonal_mask, BoundLinear, Linear};
use super::mlstm::{ForcedGates, FORGET_BIAS_INIT};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SlstmCell {
    /// `[z | o]` from the raw input.
    cell_input: Linear,
    /// `[i | f]` from the mixed input.
    gate_input: Linear,
    /// `[d x 4d]` recurrent weights, column groups `[z | i | f | o]`.
    pub recurrent: ParamId,
    recurrent_mask: Tensor,
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
}

impl SlstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::usage(format!("dim {dim} not divisible by {heads} heads")));
        }
        let cell_input = Linear::new(store, &format!("{name}.cell_input"), input_dim, 2 * dim, true, rng)?;
        let gate_input = Linear::new(store, &format!("{name}.gate_input"), input_dim, 2 * dim, true, rng)?;
        if let Some(b) = gate_input.bias {
            store.get_mut(b).data_mut()[dim..].fill(FORGET_BIAS_INIT);
        }

        let head_mask = block_diagonal_mask(dim, dim, heads)?;
        let mut mask = vec![0.0; dim * 4 * dim];
        for r in 0..dim {
            for gate in 0..4 {
                for c in 0..dim {
                    mask[r * 4 * dim + gate * dim + c] = head_mask.get(r, c);
                }
            }
        }
        let recurrent_mask = Tensor::matrix(dim, 4 * dim, mask)?;
        let template = Linear::new(store, &format!("{name}.recurrent"), dim, 4 * dim, false, rng)?;
        // only the in-head entries survive; rescale them to the head fan-in
        let mut w = store.get(template.weight).clone();
        let scale = (dim as f64 / (dim / heads) as f64).sqrt();
        for (v, m) in w.data_mut().iter_mut().zip(recurrent_mask.data()) {
            *v *= m * scale * 0.5;
        }
        *store.get_mut(template.weight) = w;
        Ok(SlstmCell {
            cell_input,
            gate_input,
            recurrent: template.weight,
            recurrent_mask,
            input_dim,
            dim,
            heads,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<BoundSlstm> {
        let raw = g.param(store, self.recurrent);
        let mask = g.input(self.recurrent_mask.clone());
        Ok(BoundSlstm {
            cell_input: self.cell_input.bind(g, store)?,
            gate_input: self.gate_input.bind(g, store)?,
            recurrent: g.mul(raw, mask)?,
            input_dim: self.input_dim,
            dim: self.dim,
        })
    }
}

/// All fields are `[B x d]`.
#[derive(Clone, Debug)]
pub struct SlstmState {
    pub cell: Var,
    pub normalizer: Var,
    pub stabilizer: Var,
    pub hidden: Var,
}

impl SlstmState {
    pub fn zeros(g: &mut Graph, batch: usize, dim: usize) -> Self {
        let mut z = || g.input(Tensor::zeros(&[batch, dim]));
        SlstmState {
            cell: z(),
            normalizer: z(),
            stabilizer: z(),
            hidden: z(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SlstmStep {
    pub state: SlstmState,
    pub hidden: Var,
    /// Stabilized gate values actually applied, for inspection.
    pub input_gate: Var,
    pub forget_gate: Var,
}

#[derive(Clone, Debug)]
pub struct BoundSlstm {
    cell_input: BoundLinear,
    gate_input: BoundLinear,
    recurrent: Var,
    input_dim: usize,
    dim: usize,
}

impl BoundSlstm {
    pub fn step(&self, g: &mut Graph, state: &SlstmState, x: Var) -> Result<SlstmStep> {
        self.step_with(g, state, x, x, None)
    }

    pub fn step_forced(
        &self,
        g: &mut Graph,
        state: &SlstmState,
        x: Var,
        forced: ForcedGates,
    ) -> Result<SlstmStep> {
        self.step_with(g, state, x, x, Some(forced))
    }

    /// Input and forget gates read `mix`; the cell input and output gate
    /// read `raw`.
    pub fn step_with(
        &self,
        g: &mut Graph,
        state: &SlstmState,
        mix: Var,
        raw: Var,
        forced: Option<ForcedGates>,
    ) -> Result<SlstmStep> {
        for x in [mix, raw] {
            if g.value(x).cols() != self.input_dim {
                return Err(Error::dim(
                    "slstm_step",
                    format!("input has {} columns, expected {}", g.value(x).cols(), self.input_dim),
                ));
            }
        }
        let d = self.dim;
        let zo = self.cell_input.apply(g, raw)?;
        let if_ = self.gate_input.apply(g, mix)?;
        let rec = g.matmul(state.hidden, self.recurrent)?;
        let part = |g: &mut Graph, src: Var, at: usize, rec_at: usize| -> Result<Var> {
            let a = g.slice_cols(src, at * d, d)?;
            let b = g.slice_cols(rec, rec_at * d, d)?;
            g.add(a, b)
        };
        let z_pre = part(g, zo, 0, 0)?;
        let i_pre = part(g, if_, 0, 1)?;
        let f_pre = part(g, if_, 1, 2)?;
        let o_pre = part(g, zo, 1, 3)?;

        let z = g.tanh(z_pre);
        let o = g.sigmoid(o_pre);
        let (i_gate, f_gate, m_new) = match forced {
            Some(f) => {
                let batch = g.value(z).rows();
                let i = g.input(Tensor::full(&[batch, d], f.input));
                let fg = g.input(Tensor::full(&[batch, d], f.forget));
                (i, fg, state.stabilizer)
            }
            None => {
                let log_f = g.log_sigmoid(f_pre);
                let carried = g.add(log_f, state.stabilizer)?;
                let m_new = g.maximum(carried, i_pre)?;
                let i_log = g.sub(i_pre, m_new)?;
                let f_log = g.sub(carried, m_new)?;
                (g.exp(i_log), g.exp(f_log), m_new)
            }
        };

        let kept = g.mul(state.cell, f_gate)?;
        let written = g.mul(z, i_gate)?;
        let cell = g.add(kept, written)?;
        let nkept = g.mul(state.normalizer, f_gate)?;
        let normalizer = g.add(nkept, i_gate)?;
        let ratio = g.div(cell, normalizer)?;
        let hidden = g.mul(o, ratio)?;
        Ok(SlstmStep {
            state: SlstmState {
                cell,
                normalizer,
                stabilizer: m_new,
                hidden,
            },
            hidden,
            input_gate: i_gate,
            forget_gate: f_gate,
        })
    }
}
