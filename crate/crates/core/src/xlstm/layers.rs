//! Small parameterized building blocks shared by the cells and blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// 0/1 mask for a block-diagonal `[rows x cols]` matrix with `blocks` blocks.
pub fn block_diagonal_mask(rows: usize, cols: usize, blocks: usize) -> Result<Tensor> {
    if blocks == 0 || !rows.is_multiple_of(blocks) || !cols.is_multiple_of(blocks) {
        return Err(Error::usage(format!(
            "{rows}x{cols} cannot be split into {blocks} diagonal blocks"
        )));
    }
    let (rb, cb) = (rows / blocks, cols / blocks);
    let data = (0..rows * cols)
        .map(|k| if (k / cols) / rb == (k % cols) / cb { 1.0 } else { 0.0 })
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// `x W + b` with `W: [in x out]`, optionally restricted by a fixed mask.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    mask: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = normal_matrix(rng, d_in, d_out, 1.0 / (d_in as f64).sqrt());
        let weight = store.add(format!("{name}.weight"), Tensor::matrix(d_in, d_out, w)?)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            mask: None,
        })
    }

    /// Block-diagonal variant: entries outside the blocks start at zero and
    /// never receive gradient.
    pub fn block_diagonal(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        blocks: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mask = block_diagonal_mask(d_in, d_out, blocks)?;
        let fan_in = d_in / blocks;
        let w: Vec<f64> = normal_matrix(rng, d_in, d_out, 1.0 / (fan_in as f64).sqrt())
            .into_iter()
            .zip(mask.data())
            .map(|(w, m)| w * m)
            .collect();
        let weight = store.add(format!("{name}.weight"), Tensor::matrix(d_in, d_out, w)?)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            mask: Some(mask),
        })
    }

    pub fn set_bias(&self, store: &mut ParamStore, value: f64) {
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(value);
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<BoundLinear> {
        let mut w = g.param(store, self.weight);
        if let Some(mask) = &self.mask {
            let m = g.input(mask.clone());
            w = g.mul(w, m)?;
        }
        let b = self.bias.map(|b| g.param(store, b));
        Ok(BoundLinear { w, b })
    }
}

/// A [`Linear`] whose parameters are already on the graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    w: Var,
    b: Option<Var>,
}

impl BoundLinear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        match self.b {
            Some(b) => g.add(y, b),
            None => Ok(y),
        }
    }

    /// `factor * (x W) + b`: the scale applies before the bias.
    pub fn apply_scaled(&self, g: &mut Graph, x: Var, factor: f64) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        let y = g.scale(y, factor);
        match self.b {
            Some(b) => g.add(y, b),
            None => Ok(y),
        }
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[1, dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]))?,
            eps: 1e-5,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundLayerNorm {
        BoundLayerNorm {
            gamma: g.param(store, self.gamma),
            beta: g.param(store, self.beta),
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl BoundLayerNorm {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mean = g.mean_cols(x);
        let centered = g.sub(x, mean)?;
        let sq = g.mul(centered, centered)?;
        let var = g.mean_cols(sq);
        let var = g.add_scalar(var, self.eps);
        let inv = g.powf(var, -0.5);
        let normed = g.mul(centered, inv)?;
        let scaled = g.mul(normed, self.gamma)?;
        g.add(scaled, self.beta)
    }
}

/// Causal depthwise 1-D convolution over time: each channel mixes its own
/// last `kernel` values, zero-padded at the start of the sequence.
#[derive(Clone, Debug)]
pub struct CausalConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl CausalConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::usage("convolution kernel must be >= 1"));
        }
        // row k weights the input k steps back; start close to identity
        let mut w = normal_matrix(rng, kernel, dim, 0.1 / (kernel as f64).sqrt());
        for v in &mut w[..dim] {
            *v += 1.0;
        }
        Ok(CausalConv {
            weight: store.add(format!("{name}.weight"), Tensor::matrix(kernel, dim, w)?)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim]))?,
            kernel,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<BoundConv> {
        let w = g.param(store, self.weight);
        let taps = (0..self.kernel)
            .map(|k| pick_row(g, w, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundConv {
            taps,
            bias: g.param(store, self.bias),
        })
    }
}

/// Row `row` of `w` as a `[1 x cols]` node, via a one-hot selector.
fn pick_row(g: &mut Graph, w: Var, row: usize) -> Result<Var> {
    let k = g.value(w).rows();
    let mut sel = vec![0.0; k];
    sel[row] = 1.0;
    let selector = g.input(Tensor::matrix(1, k, sel)?);
    g.matmul(selector, w)
}

#[derive(Clone, Debug)]
pub struct BoundConv {
    taps: Vec<Var>,
    bias: Var,
}

impl BoundConv {
    /// Output at the last position of `history` (most recent last).
    pub fn apply(&self, g: &mut Graph, history: &[Var]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (k, tap) in self.taps.iter().enumerate() {
            if k >= history.len() {
                break;
            }
            let x = history[history.len() - 1 - k];
            let term = g.mul(x, *tap)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        let acc = acc.ok_or_else(|| Error::usage("convolution over empty history"))?;
        g.add(acc, self.bias)
    }
}
