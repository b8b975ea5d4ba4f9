//! Planning, code generation and a validating SIMD virtual machine for
//! out-of-place tensor permutation.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`planner`] reshapes the problem (dimension merging, power-of-two
//!    decomposition) and picks the intra-block row and column index sets.
//! 2. [`shuffle`] derives the butterfly exchange schedule, the shuffle index
//!    tables, padding pruning and the load/store plan for one block.
//! 3. [`ir`] assembles a hardware-independent loop program and optimizes it
//!    (register reuse, unrolling, reordering).
//! 4. [`vm`] executes the program lane-exactly and audits instruction counts.
//! 5. [`emit`] lowers the program to C source for a concrete target.
//!
//! Everything is checked against [`tensor::naive_permute`].
//!
//! ```
//! use permgen_core::{generate, naive_permute, vm, GenerateOptions, Isa, MachineConfig, PermutationMap, TensorLayout};
//!
//! let layout = TensorLayout::from_shape(&[64, 32, 32, 4], 4)?;
//! let map = PermutationMap::from_numpy_convention(&[2, 1, 0, 3])?;
//! let machine = MachineConfig::new(Isa::X86Avx, 512, 4, 32)?;
//! let g = generate(&layout, &map, &machine, &GenerateOptions::default())?;
//!
//! let input: Vec<u8> = (0..layout.num_bytes()).map(|i| i as u8).collect();
//! let (output, counters) = vm::execute(&g.program, &input)?;
//! assert_eq!(output, naive_permute(&input, &layout, &map)?);
//! println!("{}\n{counters:?}", g.plan);
//! # Ok::<(), permgen_core::Error>(())
//! ```

pub mod campaign;
pub mod emit;
pub mod error;
pub mod ir;
pub mod machine;
pub mod pipeline;
pub mod planner;
pub mod shuffle;
pub mod tensor;
pub mod vm;

pub use emit::{emit_for, emit_source, kernel_name, verify_native, NativeOutcome, Target, Toolchain};
pub use error::{Error, Result};
pub use machine::{Isa, MachineConfig};
pub use pipeline::{generate, Generated, GenerateOptions};
pub use planner::BlockPlan;
pub use tensor::{naive_permute, ElementBijection, PermutationMap, TensorLayout};
