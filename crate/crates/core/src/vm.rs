//! Lane-exact virtual vector machine.
//!
//! Lanes are opaque bit patterns. Both buffers carry a guard band of `w`
//! elements on each side; accesses beyond the guard band, reads of
//! uninitialized registers and misaligned accesses flagged aligned are
//! errors. Destination guard cells must hold their sentinels at the end.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::ir::{Buf, IrOp, IrProgram};
use crate::machine::MachineConfig;
use crate::tensor::TensorLayout;

/// Executed instruction counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VmCounters {
    pub vload: u64,
    pub vstore: u64,
    pub vshuf: u64,
    pub vselfshuf: u64,
    pub unaligned_load: u64,
    pub unaligned_store: u64,
    pub addr: u64,
}

impl VmCounters {
    pub fn vector_ops(&self) -> u64 {
        self.vload + self.vstore + self.vshuf + self.vselfshuf
    }

    /// Share of loads and stores issued unaligned, over all vector ops.
    pub fn unaligned_share(&self) -> f64 {
        let ops = self.vector_ops();
        if ops == 0 {
            0.0
        } else {
            (self.unaligned_load + self.unaligned_store) as f64 / ops as f64
        }
    }

    /// `name value` pairs in a fixed order.
    pub fn to_map(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("addr", self.addr),
            ("unaligned_load", self.unaligned_load),
            ("unaligned_store", self.unaligned_store),
            ("vector_ops", self.vector_ops()),
            ("vload", self.vload),
            ("vselfshuf", self.vselfshuf),
            ("vshuf", self.vshuf),
            ("vstore", self.vstore),
        ])
    }
}

impl fmt::Display for VmCounters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.to_map().iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join("\n"))
    }
}

#[derive(Clone, Debug, Default)]
pub struct VmOptions {
    /// Record one line per executed op (bounded by `trace_limit`).
    pub trace: bool,
    pub trace_limit: usize,
}

/// Result of one execution.
#[derive(Clone, Debug)]
pub struct VmRun {
    pub output: Vec<u8>,
    pub counters: VmCounters,
    /// Destination cells (guard bands excluded) never stored to.
    pub uncovered: usize,
    /// Largest number of stores to a single destination cell.
    pub max_writes: u32,
    pub trace: Vec<String>,
}

/// Sentinel pattern of guard cell `i` for the given element width.
pub fn guard_sentinel(i: usize, elem_width: usize) -> u64 {
    let v = 0xA5C3_0000_5A3C_0000u64 ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    if elem_width == 4 {
        v & 0xFFFF_FFFF
    } else {
        v
    }
}

struct Memory {
    cells: Vec<u64>,
    guard: usize,
}

impl Memory {
    fn new(data: Vec<u64>, guard: usize, ew: usize) -> Memory {
        let n = data.len();
        let mut cells = Vec::with_capacity(n + 2 * guard);
        cells.extend((0..guard).map(|i| guard_sentinel(i, ew)));
        cells.extend(data);
        cells.extend((0..guard).map(|i| guard_sentinel(guard + n + i, ew)));
        Memory { cells, guard }
    }

    /// Cell index of element `addr`, checking the `w`-wide span.
    fn span(&self, addr: i64, w: usize, what: &str) -> Result<usize> {
        let lo = addr + self.guard as i64;
        if lo < 0 || lo as usize + w > self.cells.len() {
            return Err(Error::Vm(format!("{what} at element {addr} leaves the guard band")));
        }
        Ok(lo as usize)
    }
}

struct Machine<'a> {
    ir: &'a IrProgram,
    w: usize,
    regs: Vec<Option<Vec<u64>>>,
    slots: Vec<(i64, i64)>,
    src: Memory,
    dst: Memory,
    writes: Vec<u32>,
    counters: VmCounters,
    pinned: BTreeMap<u32, usize>,
    deltas: Vec<Vec<crate::planner::DigitDeltas>>,
    opts: &'a VmOptions,
    trace: Vec<String>,
}

impl Machine<'_> {
    fn read(&self, r: usize) -> Result<&Vec<u64>> {
        self.regs
            .get(r)
            .ok_or_else(|| Error::Vm(format!("register v{r} out of range")))?
            .as_ref()
            .ok_or_else(|| Error::Vm(format!("read of uninitialized register v{r}")))
    }

    fn write(&mut self, r: usize, v: Vec<u64>) -> Result<()> {
        *self
            .regs
            .get_mut(r)
            .ok_or_else(|| Error::Vm(format!("register v{r} out of range")))? = Some(v);
        Ok(())
    }

    fn table(&self, id: u32) -> Result<&[u32]> {
        let t = self
            .ir
            .constants
            .get(id)
            .ok_or_else(|| Error::Vm(format!("unresolved constant t{id}")))?;
        if let Some(&r) = self.pinned.get(&id) {
            let resident = self.read(r)?;
            if resident.iter().zip(&t.lanes).any(|(&a, &b)| a != b as u64) {
                return Err(Error::Vm(format!("index register v{r} for t{id} was overwritten")));
            }
        }
        Ok(&t.lanes)
    }

    fn slot(&self, s: usize) -> Result<(i64, i64)> {
        self.slots
            .get(s)
            .copied()
            .ok_or_else(|| Error::Vm(format!("address slot s{s} never set")))
    }

    fn check_aligned(&self, addr: i64, aligned: bool, what: &str) -> Result<()> {
        if aligned && addr.rem_euclid(self.w as i64) != 0 {
            return Err(Error::Vm(format!("{what} flagged aligned at element {addr}")));
        }
        Ok(())
    }

    fn step(&mut self, op: &IrOp, counter: &mut crate::planner::Counter, nest: usize) -> Result<()> {
        if self.opts.trace && self.trace.len() < self.opts.trace_limit {
            self.trace.push(format!("{op:?}"));
        }
        let w = self.w;
        match *op {
            IrOp::Addr { slot } => {
                if self.slots.len() <= slot {
                    self.slots.resize(slot + 1, (0, 0));
                }
                self.slots[slot] = (counter.src, counter.dst);
                counter.advance(&self.ir.nests[nest].counter, &self.deltas[nest]);
                self.counters.addr += 1;
            }
            IrOp::Load { dst, buf, slot, offset, aligned } => {
                let (sb, db) = self.slot(slot)?;
                let addr = if buf == Buf::Src { sb } else { db } + offset as i64;
                self.check_aligned(addr, aligned, "load")?;
                let mem = if buf == Buf::Src { &self.src } else { &self.dst };
                let at = mem.span(addr, w, "load")?;
                let v = mem.cells[at..at + w].to_vec();
                self.write(dst, v)?;
                self.counters.vload += 1;
                if !aligned {
                    self.counters.unaligned_load += 1;
                }
            }
            IrOp::Store { src, slot, offset, aligned } => {
                let addr = self.slot(slot)?.1 + offset as i64;
                self.check_aligned(addr, aligned, "store")?;
                let at = self.dst.span(addr, w, "store")?;
                let v = self.read(src)?.clone();
                self.dst.cells[at..at + w].copy_from_slice(&v);
                for c in &mut self.writes[at..at + w] {
                    *c += 1;
                }
                self.counters.vstore += 1;
                if !aligned {
                    self.counters.unaligned_store += 1;
                }
            }
            IrOp::Shuf { a, b, table, dst } => {
                let t = self.table(table)?;
                let (va, vb) = (self.read(a)?, self.read(b)?);
                let out = t
                    .iter()
                    .map(|&s| {
                        let s = s as usize;
                        if s < w {
                            va[s]
                        } else {
                            vb[s - w]
                        }
                    })
                    .collect();
                self.write(dst, out)?;
                self.counters.vshuf += 1;
            }
            IrOp::SelfShuf { src, table, dst } => {
                let t = self.table(table)?;
                let v = self.read(src)?;
                let mut out = Vec::with_capacity(w);
                for &s in t {
                    out.push(*v.get(s as usize).ok_or_else(|| Error::Vm(format!("self-shuffle t{table} selects lane {s}")))?);
                }
                self.write(dst, out)?;
                self.counters.vselfshuf += 1;
            }
            IrOp::Const { table, reg } => {
                let t = self
                    .ir
                    .constants
                    .get(table)
                    .ok_or_else(|| Error::Vm(format!("unresolved constant t{table}")))?;
                let v = t.lanes.iter().map(|&s| s as u64).collect();
                self.write(reg, v)?;
            }
        }
        Ok(())
    }
}

fn decode(buf: &[u8], ew: usize) -> Vec<u64> {
    buf.chunks_exact(ew)
        .map(|c| {
            let mut b = [0u8; 8];
            b[..ew].copy_from_slice(c);
            u64::from_le_bytes(b)
        })
        .collect()
}

/// Runs the program on `input` (little-endian elements).
pub fn execute(ir: &IrProgram, input: &[u8]) -> Result<(Vec<u8>, VmCounters)> {
    let run = execute_with(ir, input, &VmOptions::default())?;
    Ok((run.output, run.counters))
}

pub fn execute_with(ir: &IrProgram, input: &[u8], opts: &VmOptions) -> Result<VmRun> {
    ir.validate()?;
    let ew = ir.machine.elem_width;
    let n = ir.elements;
    if input.len() != n * ew {
        return Err(Error::BufferSize {
            expected: n * ew,
            actual: input.len(),
        });
    }
    let w = ir.lanes();
    let src = Memory::new(decode(input, ew), w, ew);
    let dst = Memory::new(vec![0; n], w, ew);
    let mut m = Machine {
        ir,
        w,
        regs: vec![None; ir.num_vregs],
        slots: Vec::new(),
        writes: vec![0; dst.cells.len()],
        src,
        dst,
        counters: VmCounters::default(),
        pinned: ir.pinned(),
        deltas: ir.nests.iter().map(|n| n.counter.deltas()).collect(),
        opts,
        trace: Vec::new(),
    };
    let mut dummy = crate::planner::CounterSpec::default().start();
    for op in &ir.preamble {
        m.step(op, &mut dummy, 0)?;
    }
    for (i, nest) in ir.nests.iter().enumerate() {
        let mut counter = nest.counter.start();
        let trips = nest.trips();
        for _ in 0..trips / nest.unroll {
            for op in &nest.body {
                m.step(op, &mut counter, i)?;
            }
        }
        for _ in 0..trips % nest.unroll {
            for op in &nest.remainder {
                m.step(op, &mut counter, i)?;
            }
        }
    }
    let g = m.dst.guard;
    for (i, &c) in m.dst.cells.iter().enumerate() {
        if (i < g || i >= g + n) && c != guard_sentinel(i, ew) {
            return Err(Error::Vm(format!("destination guard cell {} overwritten", i as i64 - g as i64)));
        }
    }
    let data = &m.dst.cells[g..g + n];
    let mut output = Vec::with_capacity(n * ew);
    for &v in data {
        output.extend_from_slice(&v.to_le_bytes()[..ew]);
    }
    let writes = &m.writes[g..g + n];
    Ok(VmRun {
        output,
        counters: m.counters,
        uncovered: writes.iter().filter(|&&c| c == 0).count(),
        max_writes: writes.iter().copied().max().unwrap_or(0),
        trace: m.trace,
    })
}

/// Vector op count against `(2 + log2 w) / utilization` per `w` elements.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub vector_ops: u64,
    pub elements: u64,
    pub lanes: u64,
    /// `vector_ops * w / N`.
    pub ops_per_vector: Ratio<u64>,
    pub bound: Ratio<u64>,
    pub within_bound: bool,
    pub unaligned_share: Ratio<u64>,
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ops_per_vector={} bound={} within_bound={} unaligned_share={}",
            self.ops_per_vector, self.bound, self.within_bound, self.unaligned_share
        )
    }
}

/// Audits counters of a completed run; `utilization` is the lane
/// utilization the bound is scaled by.
pub fn audit_complexity(
    counters: &VmCounters,
    layout: &TensorLayout,
    machine: &MachineConfig,
    utilization: Ratio<u64>,
) -> ComplexityReport {
    let w = machine.lanes() as u64;
    let n = layout.num_elements() as u64;
    let ops = counters.vector_ops();
    let ops_per_vector = Ratio::new(ops * w, n.max(1));
    let base = Ratio::from_integer(2 + machine.log2_lanes() as u64);
    let bound = if *utilization.numer() == 0 { base } else { base / utilization };
    ComplexityReport {
        vector_ops: ops,
        elements: n,
        lanes: w,
        ops_per_vector,
        bound,
        within_bound: ops_per_vector <= bound,
        unaligned_share: Ratio::new(counters.unaligned_load + counters.unaligned_store, ops.max(1)),
    }
}
