use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Target instruction-set family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Isa {
    X86Avx,
    ArmSve,
    SunwaySimd,
    Abstract,
}

impl Isa {
    pub const ALL: [Isa; 4] = [Isa::X86Avx, Isa::ArmSve, Isa::SunwaySimd, Isa::Abstract];

    pub fn tag(self) -> &'static str {
        match self {
            Isa::X86Avx => "x86-avx",
            Isa::ArmSve => "arm-sve",
            Isa::SunwaySimd => "sunway-simd",
            Isa::Abstract => "abstract",
        }
    }
}

impl fmt::Display for Isa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Isa {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Isa::ALL
            .into_iter()
            .find(|i| i.tag() == s)
            .ok_or_else(|| Error::UnsupportedMachine(format!("unknown isa '{s}'")))
    }
}

/// Vector machine parameters. The lane count `w` is the only quantity the
/// planner and IR depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MachineConfig {
    pub isa: Isa,
    pub bit_width: usize,
    pub elem_width: usize,
    pub num_vector_registers: usize,
}

impl MachineConfig {
    pub fn new(isa: Isa, bit_width: usize, elem_width: usize, num_vector_registers: usize) -> Result<Self> {
        if ![128, 256, 512].contains(&bit_width) {
            return Err(Error::UnsupportedMachine(format!(
                "bit width {bit_width} not in {{128, 256, 512}}"
            )));
        }
        if elem_width != 4 && elem_width != 8 {
            return Err(Error::UnsupportedMachine(format!(
                "element width {elem_width} bytes; only 32- and 64-bit elements are supported"
            )));
        }
        if num_vector_registers == 0 {
            return Err(Error::UnsupportedMachine("zero vector registers".into()));
        }
        let m = MachineConfig {
            isa,
            bit_width,
            elem_width,
            num_vector_registers,
        };
        debug_assert!(m.lanes().is_power_of_two() && m.lanes() >= 2);
        Ok(m)
    }

    /// Abstract 512-bit machine with 32 registers for the given element width.
    pub fn abstract_512(elem_width: usize) -> Self {
        Self::new(Isa::Abstract, 512, elem_width, 32).expect("valid default machine")
    }

    /// Abstract machine with `lanes` lanes of `elem_width` bytes.
    pub fn with_lanes(lanes: usize, elem_width: usize) -> Result<Self> {
        Self::new(Isa::Abstract, lanes * elem_width * 8, elem_width, 32)
    }

    /// Lane count `w`.
    pub fn lanes(&self) -> usize {
        self.bit_width / (8 * self.elem_width)
    }

    pub fn log2_lanes(&self) -> usize {
        self.lanes().trailing_zeros() as usize
    }

    pub fn with_isa(mut self, isa: Isa) -> Self {
        self.isa = isa;
        self
    }

    pub fn with_registers(mut self, n: usize) -> Self {
        self.num_vector_registers = n;
        self
    }
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self::abstract_512(4)
    }
}

impl fmt::Display for MachineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "isa={} bits={} elem={} regs={} w={}",
            self.isa,
            self.bit_width,
            self.elem_width,
            self.num_vector_registers,
            self.lanes()
        )
    }
}
