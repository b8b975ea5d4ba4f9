//! End-to-end generation: reshape, plan, assemble, build and optimize.

use crate::error::{Error, Result};
use crate::ir::{build_ir, optimize, IrProgram};
use crate::machine::MachineConfig;
use crate::planner::{decompose_pow2, merge_dimensions, select_block, BlockPlan};
use crate::shuffle::{assemble_block, BlockKernel, ConstPool};
use crate::tensor::{check_rank, PermutationMap, TensorLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Fuse adjacent dimensions that stay adjacent and drop unit dimensions.
    pub merge: bool,
    /// Split power-of-two dimensions into factors of two when every
    /// dimension is a power of two.
    pub decompose: bool,
    pub optimize: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            merge: true,
            decompose: true,
            optimize: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub layout: TensorLayout,
    pub map: PermutationMap,
    /// Reshaped problem the plan refers to; same element order in memory.
    pub planned_layout: TensorLayout,
    pub planned_map: PermutationMap,
    pub plan: BlockPlan,
    pub kernel: BlockKernel,
    pub ir: IrProgram,
    /// Optimized program, or a copy of `ir` when optimization is off.
    pub program: IrProgram,
}

/// Reshapes the problem as the options allow.
pub fn reshape(layout: &TensorLayout, map: &PermutationMap, opts: &GenerateOptions) -> Result<(TensorLayout, PermutationMap)> {
    check_rank(layout, map)?;
    let (mut l, mut m) = (layout.clone(), map.clone());
    if opts.merge {
        (l, m) = merge_dimensions(&l, &m)?;
    }
    if opts.decompose && l.dims().iter().all(|d| d.is_power_of_two()) && l.num_elements() > 1 {
        (l, m) = decompose_pow2(&l, &m)?;
    }
    Ok((l, m))
}

/// Generates the vector program for permuting `layout` by `map`.
pub fn generate(layout: &TensorLayout, map: &PermutationMap, machine: &MachineConfig, opts: &GenerateOptions) -> Result<Generated> {
    if layout.elem_width() != machine.elem_width {
        return Err(Error::Inconsistent(format!(
            "layout element width {} differs from machine element width {}",
            layout.elem_width(),
            machine.elem_width
        )));
    }
    let (pl, pm) = reshape(layout, map, opts)?;
    let plan = select_block(&pl, &pm, machine)?;
    let mut pool = ConstPool::new();
    let kernel = assemble_block(&plan, &mut pool)?;
    let ir = build_ir(&plan, &kernel, pool, machine)?;
    let program = if opts.optimize { optimize(&ir, machine)? } else { ir.clone() };
    Ok(Generated {
        layout: layout.clone(),
        map: map.clone(),
        planned_layout: pl,
        planned_map: pm,
        plan,
        kernel,
        ir,
        program,
    })
}
