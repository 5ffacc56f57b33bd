use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BoundConv, BoundLayerNorm, BoundLinear, CausalConv, LayerNorm, Linear};
use super::mlstm::{BoundMlstm, GateActivation, MlstmCell, MlstmState};
use super::slstm::{BoundSlstm, SlstmCell, SlstmState};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XlstmConfig {
    /// Width of each input step (segment size).
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub kernel: usize,
    /// Diagonal blocks in the q/k/v projections; 1 means dense.
    pub qkv_blocks: usize,
    pub ff_factor: f64,
    /// Cell kinds, repeated cyclically over the layers: `m` or `s`.
    pub pattern: String,
    pub gates: GateActivation,
    pub max_seq_len: usize,
}

impl Default for XlstmConfig {
    fn default() -> Self {
        XlstmConfig {
            input_dim: 32,
            hidden_dim: 32,
            layers: 8,
            heads: 4,
            kernel: 4,
            qkv_blocks: 4,
            ff_factor: 1.3,
            pattern: "ms".into(),
            gates: GateActivation::Exponential,
            max_seq_len: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Mlstm,
    Slstm,
}

impl XlstmConfig {
    pub fn cell_kinds(&self) -> Result<Vec<CellKind>> {
        let kinds: Vec<CellKind> = self
            .pattern
            .chars()
            .map(|c| match c {
                'm' | 'M' => Ok(CellKind::Mlstm),
                's' | 'S' => Ok(CellKind::Slstm),
                other => Err(Error::usage(format!("unknown cell kind {other:?} in pattern"))),
            })
            .collect::<Result<_>>()?;
        if kinds.is_empty() {
            return Err(Error::usage("empty block pattern"));
        }
        Ok((0..self.layers).map(|l| kinds[l % kinds.len()]).collect())
    }

    pub fn ff_hidden(&self) -> usize {
        ((self.hidden_dim as f64 * self.ff_factor).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return Err(Error::usage("xlstm dims and layer count must be positive"));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::usage(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.qkv_blocks == 0 || !self.hidden_dim.is_multiple_of(self.qkv_blocks) {
            return Err(Error::usage(format!(
                "hidden_dim {} not divisible into {} qkv blocks",
                self.hidden_dim, self.qkv_blocks
            )));
        }
        if self.kernel == 0 || self.max_seq_len == 0 {
            return Err(Error::usage("kernel and max_seq_len must be positive"));
        }
        if !(self.ff_factor > 0.0 && self.ff_factor.is_finite()) {
            return Err(Error::usage(format!("ff_factor {} must be > 0", self.ff_factor)));
        }
        self.cell_kinds().map(|_| ())
    }
}

#[derive(Clone, Debug)]
enum Cell {
    M(MlstmCell),
    S(SlstmCell),
}

/// Pre-norm residual block: norm, causal conv, cell, residual; then norm,
/// GELU-gated feed-forward, residual.
#[derive(Clone, Debug)]
pub struct Block {
    cell: Cell,
    cell_norm: LayerNorm,
    conv: CausalConv,
    ff_norm: LayerNorm,
    /// `[gate | value]`, `ff_hidden` each.
    ff_up: Linear,
    ff_down: Linear,
    ff_hidden: usize,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        config: &XlstmConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = config.hidden_dim;
        let cell = match kind {
            CellKind::Mlstm => Cell::M(MlstmCell::new(
                store,
                &format!("{name}.mlstm"),
                d,
                d,
                config.heads,
                config.qkv_blocks,
                config.gates,
                rng,
            )?),
            CellKind::Slstm => Cell::S(SlstmCell::new(store, &format!("{name}.slstm"), d, d, config.heads, rng)?),
        };
        let f = config.ff_hidden();
        Ok(Block {
            cell,
            cell_norm: LayerNorm::new(store, &format!("{name}.cell_norm"), d)?,
            conv: CausalConv::new(store, &format!("{name}.conv"), d, config.kernel, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d)?,
            ff_up: Linear::new(store, &format!("{name}.ff_up"), d, 2 * f, true, rng)?,
            ff_down: Linear::new(store, &format!("{name}.ff_down"), f, d, true, rng)?,
            ff_hidden: f,
        })
    }

    pub fn kind(&self) -> CellKind {
        match self.cell {
            Cell::M(_) => CellKind::Mlstm,
            Cell::S(_) => CellKind::Slstm,
        }
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<BoundBlock> {
        Ok(BoundBlock {
            cell: match &self.cell {
                Cell::M(c) => BoundCell::M(c.bind(g, store)?, c.dim, c.heads),
                Cell::S(c) => BoundCell::S(c.bind(g, store)?, c.dim),
            },
            cell_norm: self.cell_norm.bind(g, store),
            conv: self.conv.bind(g, store)?,
            ff_norm: self.ff_norm.bind(g, store),
            ff_up: self.ff_up.bind(g, store)?,
            ff_down: self.ff_down.bind(g, store)?,
            ff_hidden: self.ff_hidden,
        })
    }
}

#[derive(Clone, Debug)]
enum BoundCell {
    M(BoundMlstm, usize, usize),
    S(BoundSlstm, usize),
}

#[derive(Clone, Debug)]
struct BoundBlock {
    cell: BoundCell,
    cell_norm: BoundLayerNorm,
    conv: BoundConv,
    ff_norm: BoundLayerNorm,
    ff_up: BoundLinear,
    ff_down: BoundLinear,
    ff_hidden: usize,
}

impl BoundBlock {
    fn feed_forward(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let u = self.ff_norm.apply(g, y)?;
        let up = self.ff_up.apply(g, u)?;
        let gate = g.slice_cols(up, 0, self.ff_hidden)?;
        let value = g.slice_cols(up, self.ff_hidden, self.ff_hidden)?;
        let gate = g.gelu(gate);
        let mixed = g.mul(gate, value)?;
        let down = self.ff_down.apply(g, mixed)?;
        g.add(y, down)
    }

    /// Runs the block over a whole sequence, one causal step at a time.
    fn run(&self, g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
        let batch = g.value(xs[0]).rows();
        let mut normed = Vec::with_capacity(xs.len());
        let mut outs = Vec::with_capacity(xs.len());
        let mut m_state = None;
        let mut s_state = None;
        match &self.cell {
            BoundCell::M(_, d, h) => m_state = Some(MlstmState::zeros(g, batch, *d, *h)),
            BoundCell::S(_, d) => s_state = Some(SlstmState::zeros(g, batch, *d)),
        }
        for (t, &x) in xs.iter().enumerate() {
            let u = self.cell_norm.apply(g, x)?;
            normed.push(u);
            let mix = self.conv.apply(g, &normed)?;
            let h = match &self.cell {
                BoundCell::M(cell, ..) => {
                    let st = m_state.as_ref().expect("mlstm state");
                    let out = cell.step_with(g, st, mix, u, None)?;
                    m_state = Some(out.state);
                    out.hidden
                }
                BoundCell::S(cell, _) => {
                    let st = s_state.as_ref().expect("slstm state");
                    let out = cell.step_with(g, st, mix, u, None)?;
                    s_state = Some(out.state);
                    out.hidden
                }
            };
            let y = g.add(x, h)?;
            let out = self.feed_forward(g, y)?;
            g.check_finite().map_err(|e| e.with_context(format!("step {t}")))?;
            outs.push(out);
        }
        Ok(outs)
    }
}

/// Input projection followed by the configured blocks.
#[derive(Clone, Debug)]
pub struct BlockStack {
    input: Linear,
    blocks: Vec<Block>,
    pub config: XlstmConfig,
}

impl BlockStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &XlstmConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let input = Linear::new(store, &format!("{name}.input"), config.input_dim, config.hidden_dim, true, rng)?;
        let blocks = config
            .cell_kinds()?
            .into_iter()
            .enumerate()
            .map(|(l, kind)| Block::new(store, &format!("{name}.block{l}"), kind, config, rng))
            .collect::<Result<_>>()?;
        Ok(BlockStack {
            input,
            blocks,
            config: config.clone(),
        })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Top-layer outputs at every step, `[B x hidden_dim]` each.
    pub fn forward_all(&self, g: &mut Graph, store: &ParamStore, seq: &[Var]) -> Result<Vec<Var>> {
        if seq.is_empty() {
            return Err(Error::usage("xlstm forward over an empty sequence"));
        }
        if seq.len() > self.config.max_seq_len {
            return Err(Error::usage(format!(
                "sequence length {} exceeds max_seq_len {}",
                seq.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = seq.iter().position(|&x| !g.value(x).is_finite()) {
            return Err(Error::NonFinite {
                op: "input",
                context: Some(format!("step {t}")),
            });
        }
        let input = self.input.bind(g, store)?;
        let mut xs = seq
            .iter()
            .map(|&x| {
                if g.value(x).cols() != self.config.input_dim {
                    return Err(Error::dim(
                        "xlstm_forward",
                        format!("step width {} vs input_dim {}", g.value(x).cols(), self.config.input_dim),
                    ));
                }
                input.apply(g, x)
            })
            .collect::<Result<Vec<_>>>()?;
        for block in &self.blocks {
            let bound = block.bind(g, store)?;
            xs = bound.run(g, &xs)?;
        }
        Ok(xs)
    }
}

/// The final step's top-layer state: the sequence representation.
pub fn xlstm_forward(g: &mut Graph, store: &ParamStore, stack: &BlockStack, seq: &[Var]) -> Result<Var> {
    let outs = stack.forward_all(g, store, seq)?;
    Ok(*outs.last().expect("non-empty by construction"))
}
