//! Matrix-memory cell: per head, a `dh x dh` memory written by gated rank-1
//! updates `v kᵀ` and read by the query through a clamped normalizer.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BoundLinear, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// How the input and forget gates are activated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    /// Exponential input gate, sigmoid forget gate, log-space stabilizer.
    #[default]
    Exponential,
    /// Plain sigmoid input and forget gates.
    Sigmoid,
}

/// Effective gate values imposed on every head and batch row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForcedGates {
    pub input: f64,
    pub forget: f64,
}

impl ForcedGates {
    /// Input closed, forget open: the state passes through unchanged.
    pub const CARRY: ForcedGates = ForcedGates {
        input: 0.0,
        forget: 1.0,
    };
}

pub(crate) const FORGET_BIAS_INIT: f64 = 3.0;

#[derive(Clone, Debug)]
pub struct MlstmCell {
    query: Linear,
    key: Linear,
    value: Linear,
    /// `[input | forget]` pre-activations, one column per head each.
    gates: Linear,
    output: Linear,
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub activation: GateActivation,
}

impl MlstmCell {
    /// `qkv_blocks = 1` gives dense projections.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        dim: usize,
        heads: usize,
        qkv_blocks: usize,
        activation: GateActivation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::usage(format!("dim {dim} not divisible by {heads} heads")));
        }
        let proj = |store: &mut ParamStore, rng: &mut ChaCha8Rng, tag: &str| {
            Linear::block_diagonal(store, &format!("{name}.{tag}"), input_dim, dim, qkv_blocks, true, rng)
        };
        let query = proj(store, rng, "query")?;
        let key = proj(store, rng, "key")?;
        let value = proj(store, rng, "value")?;
        let gates = Linear::new(store, &format!("{name}.gates"), input_dim, 2 * heads, true, rng)?;
        if let Some(b) = gates.bias {
            store.get_mut(b).data_mut()[heads..].fill(FORGET_BIAS_INIT);
        }
        let output = Linear::new(store, &format!("{name}.output"), input_dim, dim, true, rng)?;
        Ok(MlstmCell {
            query,
            key,
            value,
            gates,
            output,
            input_dim,
            dim,
            heads,
            activation,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<BoundMlstm> {
        Ok(BoundMlstm {
            query: self.query.bind(g, store)?,
            key: self.key.bind(g, store)?,
            value: self.value.bind(g, store)?,
            gates: self.gates.bind(g, store)?,
            output: self.output.bind(g, store)?,
            input_dim: self.input_dim,
            heads: self.heads,
            head_dim: self.head_dim(),
            activation: self.activation,
        })
    }
}

/// Per-head memory `[B x dh*dh]` (row-major `dh x dh`), normalizer `[B x dh]`
/// and stabilizer `[B x 1]`.
#[derive(Clone, Debug)]
pub struct MlstmState {
    pub memory: Vec<Var>,
    pub normalizer: Vec<Var>,
    pub stabilizer: Vec<Var>,
}

impl MlstmState {
    pub fn zeros(g: &mut Graph, batch: usize, dim: usize, heads: usize) -> Self {
        let dh = dim / heads;
        let mut mk = |cols: usize| -> Vec<Var> {
            (0..heads).map(|_| g.input(Tensor::zeros(&[batch, cols]))).collect()
        };
        MlstmState {
            memory: mk(dh * dh),
            normalizer: mk(dh),
            stabilizer: mk(1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlstmStep {
    pub state: MlstmState,
    pub hidden: Var,
    /// `max(nᵀq, 1)` per head, `[B x 1]` each.
    pub denominators: Vec<Var>,
}

/// An [`MlstmCell`] with its parameters on a graph.
#[derive(Clone, Debug)]
pub struct BoundMlstm {
    query: BoundLinear,
    key: BoundLinear,
    value: BoundLinear,
    gates: BoundLinear,
    output: BoundLinear,
    input_dim: usize,
    heads: usize,
    head_dim: usize,
    activation: GateActivation,
}

impl BoundMlstm {
    pub fn step(&self, g: &mut Graph, state: &MlstmState, x: Var) -> Result<MlstmStep> {
        self.step_with(g, state, x, x, None)
    }

    pub fn step_forced(
        &self,
        g: &mut Graph,
        state: &MlstmState,
        x: Var,
        forced: ForcedGates,
    ) -> Result<MlstmStep> {
        self.step_with(g, state, x, x, Some(forced))
    }

    /// Queries, keys and gates read `mix`; values and the output gate read
    /// `raw`. Inside a block `mix` is the convolved signal.
    pub fn step_with(
        &self,
        g: &mut Graph,
        state: &MlstmState,
        mix: Var,
        raw: Var,
        forced: Option<ForcedGates>,
    ) -> Result<MlstmStep> {
        for x in [mix, raw] {
            if g.value(x).cols() != self.input_dim {
                return Err(Error::dim(
                    "mlstm_step",
                    format!("input has {} columns, expected {}", g.value(x).cols(), self.input_dim),
                ));
            }
        }
        let (h, dh) = (self.heads, self.head_dim);
        let batch = g.value(mix).rows();
        let q = self.query.apply(g, mix)?;
        let k = self.key.apply_scaled(g, mix, 1.0 / (dh as f64).sqrt())?;
        let v = self.value.apply(g, raw)?;
        let gate_pre = self.gates.apply(g, mix)?;
        let o_pre = self.output.apply(g, raw)?;
        let o = g.sigmoid(o_pre);

        let forced_vars = forced.map(|f| {
            (
                g.input(Tensor::full(&[batch, 1], f.input)),
                g.input(Tensor::full(&[batch, 1], f.forget)),
            )
        });

        let mut next = MlstmState {
            memory: Vec::with_capacity(h),
            normalizer: Vec::with_capacity(h),
            stabilizer: Vec::with_capacity(h),
        };
        let mut reads = Vec::with_capacity(h);
        let mut denominators = Vec::with_capacity(h);
        for head in 0..h {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let m_prev = state.stabilizer[head];

            let (i_gate, f_gate, m_new) = match (forced_vars, self.activation) {
                (Some((i, f)), _) => (i, f, m_prev),
                (None, GateActivation::Exponential) => {
                    let i_pre = g.slice_cols(gate_pre, head, 1)?;
                    let f_pre = g.slice_cols(gate_pre, h + head, 1)?;
                    let log_f = g.log_sigmoid(f_pre);
                    let carried = g.add(log_f, m_prev)?;
                    let m_new = g.maximum(carried, i_pre)?;
                    let i_log = g.sub(i_pre, m_new)?;
                    let f_log = g.sub(carried, m_new)?;
                    (g.exp(i_log), g.exp(f_log), m_new)
                }
                (None, GateActivation::Sigmoid) => {
                    let i_pre = g.slice_cols(gate_pre, head, 1)?;
                    let f_pre = g.slice_cols(gate_pre, h + head, 1)?;
                    (g.sigmoid(i_pre), g.sigmoid(f_pre), m_prev)
                }
            };

            let write = g.outer_rows(vh, kh)?;
            let write = g.mul(write, i_gate)?;
            let kept = g.mul(state.memory[head], f_gate)?;
            let memory = g.add(kept, write)?;

            let nk = g.mul(kh, i_gate)?;
            let nkept = g.mul(state.normalizer[head], f_gate)?;
            let normalizer = g.add(nkept, nk)?;

            let numer = g.matvec_rows(memory, qh)?;
            let nq = g.mul(normalizer, qh)?;
            let nq = g.sum_cols(nq);
            let one = g.input(Tensor::scalar(1.0));
            let denom = g.maximum(nq, one)?;
            debug_assert!(g.value(denom).data().iter().all(|&d| d >= 1.0 || d.is_nan()));
            reads.push(g.div(numer, denom)?);
            denominators.push(denom);

            next.memory.push(memory);
            next.normalizer.push(normalizer);
            next.stabilizer.push(m_new);
        }
        let read = g.concat_cols(&reads)?;
        let hidden = g.mul(o, read)?;
        Ok(MlstmStep {
            state: next,
            hidden,
            denominators,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad_check, GradCheckConfig};
    use rand::{Rng, SeedableRng};

    fn cell(store: &mut ParamStore, activation: GateActivation) -> MlstmCell {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        MlstmCell::new(store, "m", 6, 8, 4, 2, activation, &mut rng).unwrap()
    }

    fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn random_state(g: &mut Graph, rng: &mut ChaCha8Rng, batch: usize) -> MlstmState {
        let mut mk = |cols: usize| -> Vec<Var> {
            (0..4).map(|_| g.input(random_input(rng, batch, cols))).collect()
        };
        MlstmState {
            memory: mk(4),
            normalizer: mk(2),
            stabilizer: mk(1),
        }
    }

    #[test]
    fn carry_through_preserves_state_exactly() {
        let mut store = ParamStore::new();
        let c = cell(&mut store, GateActivation::Exponential);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let b = c.bind(&mut g, &store).unwrap();
        let start = random_state(&mut g, &mut rng, 3);
        let mut st = start.clone();
        for _ in 0..100 {
            let x = g.input(random_input(&mut rng, 3, 6));
            st = b.step_forced(&mut g, &st, x, ForcedGates::CARRY).unwrap().state;
        }
        for head in 0..4 {
            assert_eq!(g.value(st.memory[head]), g.value(start.memory[head]));
            assert_eq!(g.value(st.normalizer[head]), g.value(start.normalizer[head]));
        }
    }

    #[test]
    fn first_step_memory_is_rank_one_per_head() {
        let mut store = ParamStore::new();
        let c = cell(&mut store, GateActivation::Exponential);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let b = c.bind(&mut g, &store).unwrap();
        let st = MlstmState::zeros(&mut g, 1, 8, 4);
        let x = g.input(random_input(&mut rng, 1, 6));
        let out = b.step(&mut g, &st, x).unwrap();
        for head in 0..4 {
            let m = g.value(out.state.memory[head]).data().to_vec();
            // a 2x2 matrix is rank <= 1 iff its determinant vanishes
            let det = m[0] * m[3] - m[1] * m[2];
            assert!(det.abs() < 1e-12 * (1.0 + m.iter().map(|v| v * v).sum::<f64>()), "{det}");
            assert!(m.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn first_step_matches_direct_formula() {
        // Recompute C_1 = i' v kᵀ independently from the parameter values.
        let mut store = ParamStore::new();
        let c = cell(&mut store, GateActivation::Sigmoid);
        let x: Vec<f64> = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7];
        let lin = |name: &str| -> Vec<f64> {
            let w = store.get(store.id(&format!("m.{name}.weight")).unwrap());
            let b = store.get(store.id(&format!("m.{name}.bias")).unwrap());
            (0..w.cols())
                .map(|j| (0..6).map(|i| x[i] * w.get(i, j)).sum::<f64>() + b.data()[j])
                .collect()
        };
        let key_raw: Vec<f64> = {
            let w = store.get(store.id("m.key.weight").unwrap());
            let b = store.get(store.id("m.key.bias").unwrap());
            (0..8)
                .map(|j| (0..6).map(|i| x[i] * w.get(i, j)).sum::<f64>() / 2f64.sqrt() + b.data()[j])
                .collect()
        };
        let v = lin("value");
        let gates = lin("gates");
        let mut g = Graph::new();
        let b = c.bind(&mut g, &store).unwrap();
        let st = MlstmState::zeros(&mut g, 1, 8, 4);
        let xv = g.input(Tensor::row(x.clone()));
        let out = b.step(&mut g, &st, xv).unwrap();
        for head in 0..4 {
            let i_gate = 1.0 / (1.0 + (-gates[head]).exp());
            let m = g.value(out.state.memory[head]).data();
            for r in 0..2 {
                for col in 0..2 {
                    let expect = i_gate * v[head * 2 + r] * key_raw[head * 2 + col];
                    assert!((m[r * 2 + col] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn denominators_never_below_one() {
        let mut store = ParamStore::new();
        let c = cell(&mut store, GateActivation::Exponential);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let b = c.bind(&mut g, &store).unwrap();
        let mut st = MlstmState::zeros(&mut g, 4, 8, 4);
        for _ in 0..50 {
            let x = g.input(random_input(&mut rng, 4, 6).map(|v| 3.0 * v));
            let out = b.step(&mut g, &st, x).unwrap();
            for d in &out.denominators {
                assert!(g.value(*d).data().iter().all(|&v| v >= 1.0));
            }
            assert!(g.value(out.hidden).is_finite());
            st = out.state;
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut store = ParamStore::new();
        let c = cell(&mut store, GateActivation::Exponential);
        let mut g = Graph::new();
        let b = c.bind(&mut g, &store).unwrap();
        let st = MlstmState::zeros(&mut g, 1, 8, 4);
        let x = g.input(Tensor::zeros(&[1, 5]));
        assert!(matches!(b.step(&mut g, &st, x), Err(Error::Dimension { .. })));
    }

    fn rollout_grad_check(activation: GateActivation) {
        let mut store = ParamStore::new();
        let c = cell(&mut store, activation);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Tensor> = (0..3).map(|_| random_input(&mut rng, 2, 6)).collect();
        let report = finite_diff_grad_check(
            &store,
            |g, s| {
                let b = c.bind(g, s)?;
                let mut st = MlstmState::zeros(g, 2, 8, 4);
                let mut total = None;
                for x in &xs {
                    let xv = g.input(x.clone());
                    let out = b.step(g, &st, xv)?;
                    let s = g.sum_all(out.hidden);
                    total = Some(match total {
                        Some(t) => g.add(t, s)?,
                        None => s,
                    });
                    st = out.state;
                }
                Ok(total.unwrap())
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn three_step_gradients_match_finite_differences() {
        rollout_grad_check(GateActivation::Exponential);
        rollout_grad_check(GateActivation::Sigmoid);
    }
}
