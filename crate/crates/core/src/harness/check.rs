use crate::config::Topology;
use crate::error::Result;
use crate::gradcheck::{ladder_diff_check, GradCheckReport};
use crate::tasks::Clip;
use crate::tensor::{Precision, Tensor};

use super::assembly::Assembly;

pub const LADDER_RATIO: f64 = 5.0;
pub const LADDER_RUNGS: usize = 6;

/// Finite-difference check of the training loss on `clip` against every
/// trainable parameter of `asm`, at 64-bit precision.
pub fn assembly_gradcheck(asm: &Assembly, clip: &Clip, step: f64, rungs: usize) -> Result<GradCheckReport> {
    let cached = match asm.topology {
        Topology::Mettle => Some(asm.cache(clip, Precision::F64)?),
        Topology::Adapter => None,
    };
    let ids = asm.store.trainable();
    let params: Vec<Tensor> = ids.iter().map(|&id| asm.store.get(id).clone()).collect();
    ladder_diff_check(
        |g, leaves| {
            let bind = asm.store.bind_with(g, &ids, leaves);
            let out = asm.forward(g, &bind, clip, cached.as_ref())?;
            asm.loss(g, &out, clip)
        },
        &params,
        step,
        LADDER_RATIO,
        rungs,
    )
}
