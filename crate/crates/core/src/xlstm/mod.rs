//! Recurrent encoders: mLSTM and sLSTM cells, residual blocks around them,
//! and the stacked encoder applied to a segmented embedding.

mod block;
mod layers;
mod mlstm;
mod slstm;

pub use block::{xlstm_forward, Block, BlockStack, CellKind, XlstmConfig};
pub use layers::{block_diagonal_mask, BoundLinear, Linear};
pub use mlstm::{BoundMlstm, ForcedGates, GateActivation, MlstmCell, MlstmState, MlstmStep};
pub use slstm::{BoundSlstm, SlstmCell, SlstmState, SlstmStep};

use crate::error::{Error, Result};

/// Splits `e` into `steps` contiguous chunks of equal width.
pub fn segment_embedding<T: Clone>(e: &[T], steps: usize) -> Result<Vec<Vec<T>>> {
    if steps == 0 || !e.len().is_multiple_of(steps) {
        return Err(Error::usage(format!(
            "cannot segment {} values into {steps} equal steps",
            e.len()
        )));
    }
    Ok(e.chunks(e.len() / steps).map(<[T]>::to_vec).collect())
}
