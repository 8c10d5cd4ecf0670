//! Sub-pixel refinement unit S.

use crate::error::{Error, Result};
use crate::pipeline::arch::{self, run_stack};
use crate::pipeline::{ModelConfig, ModelWeights};
use crate::tensor::{Element, Tape, Var};

/// Warps `f2` by `flow_m`, concatenates `[f1, warped f2, flow_m]` and adds
/// the stack's residual to `flow_m`.
pub fn refinement_unit<E: Element>(
    tape: &mut Tape<E>,
    weights: &ModelWeights<E>,
    cfg: &ModelConfig,
    level: usize,
    f1: Var,
    f2: Var,
    flow_m: Var,
) -> Result<Var> {
    let (c, _, _) = tape.value(flow_m).dims3()?;
    if c != 2 {
        return Err(Error::ShapeMismatch { op: "refinement_unit", dim: "flow channels", expected: 2, actual: c });
    }
    let warped = tape.f_warp(f2, flow_m)?;
    tape.label(warped, format!("f-warp{level}_S"));
    let input = tape.concat(&[f1, warped, flow_m])?;
    tape.label(input, format!("concat{level}_S"));
    let residual = run_stack(tape, weights, &arch::refiner_layers(cfg, level), input, cfg.leaky_slope)?;
    let flow = tape.add(flow_m, residual)?;
    tape.label(flow, format!("flow{level}_S"));
    Ok(flow)
}
