//! Vector quantization, attention-based quantization, and their residual
//! composition.
//!
//! Every assigner has a tape form used during training and a pure form that
//! runs the same code on a throwaway tape. Hard codes reach downstream
//! consumers through [`straight_through`]; the soft attention read-out is
//! the path by which the query and key projections learn.

mod attention;
mod grid;
mod residual;
mod vq;

pub use attention::{attn_assign, AttentionQuantizer, NormKind};
pub use grid::{read_grids, write_grids, CodeGrid};
pub(crate) use residual::split_grids as residual_grids;
pub use residual::{
    rq_decode, rq_encode, Assigner, AssignmentRecord, LevelTrace, ResidualQuantizer, RqEncoding, RqTrace,
};
pub use vq::{nearest_codes, vq_assign};

use crate::error::{ensure, Result};
use crate::numkit::{Tape, Tensor, Var};

/// Default softmax temperature of attention assignment.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// `f + sg[z − f]`: forward value `z`, gradient passed to `f` unchanged.
pub fn straight_through(tape: &mut Tape, f: Var, z: Var) -> Result<Var> {
    tape.straight_through(f, z)
}

/// Mean over positions of `‖f_i − f̂_i‖² / d`.
pub fn quantization_error(f: &Tensor, f_hat: &Tensor) -> Result<f64> {
    ensure!(
        f.shape() == f_hat.shape(),
        "quantization_error shape mismatch: {:?} vs {:?}",
        f.shape(),
        f_hat.shape()
    );
    let sq = crate::numkit::kernels::squared_distance(f.values(), f_hat.values());
    Ok(sq / f.numel() as f64)
}
