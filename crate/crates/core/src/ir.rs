//! Hardware-independent vector program.
//!
//! A program is a list of loop nests over the block counter. Each nest body is
//! straight-line vector code for one block (or `unroll` blocks); offsets are
//! relative to scalar base registers filled by `Addr`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::machine::{Isa, MachineConfig};
use crate::planner::{BlockPlan, CounterSpec, Digit, DigitKind};
use crate::shuffle::{format_const, BlockKernel, ConstPool, MicroOp, ShuffleIndexVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Buf {
    Src,
    Dst,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IrOp {
    /// Copies the current block base offsets into scalar slot `slot` and
    /// advances the counter.
    Addr { slot: usize },
    Load { dst: usize, buf: Buf, slot: usize, offset: usize, aligned: bool },
    Store { src: usize, slot: usize, offset: usize, aligned: bool },
    Shuf { a: usize, b: usize, table: u32, dst: usize },
    SelfShuf { src: usize, table: u32, dst: usize },
    /// Keeps index table `table` resident in register `reg`.
    Const { table: u32, reg: usize },
}

impl IrOp {
    pub fn reads(&self) -> Vec<usize> {
        match *self {
            IrOp::Store { src, .. } | IrOp::SelfShuf { src, .. } => vec![src],
            IrOp::Shuf { a, b, .. } => vec![a, b],
            _ => Vec::new(),
        }
    }

    pub fn writes(&self) -> Option<usize> {
        match *self {
            IrOp::Load { dst, .. } | IrOp::Shuf { dst, .. } | IrOp::SelfShuf { dst, .. } => Some(dst),
            IrOp::Const { reg, .. } => Some(reg),
            _ => None,
        }
    }

    fn map_regs(&self, f: &mut impl FnMut(usize) -> usize) -> IrOp {
        match *self {
            IrOp::Load { dst, buf, slot, offset, aligned } => IrOp::Load { dst: f(dst), buf, slot, offset, aligned },
            IrOp::Store { src, slot, offset, aligned } => IrOp::Store { src: f(src), slot, offset, aligned },
            IrOp::Shuf { a, b, table, dst } => IrOp::Shuf { a: f(a), b: f(b), table, dst: f(dst) },
            IrOp::SelfShuf { src, table, dst } => IrOp::SelfShuf { src: f(src), table, dst: f(dst) },
            ref op => op.clone(),
        }
    }

    fn with_slot(&self, s: usize) -> IrOp {
        match *self {
            IrOp::Addr { .. } => IrOp::Addr { slot: s },
            IrOp::Load { dst, buf, offset, aligned, .. } => IrOp::Load { dst, buf, slot: s, offset, aligned },
            IrOp::Store { src, offset, aligned, .. } => IrOp::Store { src, slot: s, offset, aligned },
            ref op => op.clone(),
        }
    }
}

/// Static op counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub vload: usize,
    pub vstore: usize,
    pub vshuf: usize,
    pub vselfshuf: usize,
    pub addr: usize,
}

impl OpCounts {
    pub fn of(ops: &[IrOp]) -> OpCounts {
        let mut c = OpCounts::default();
        for op in ops {
            match op {
                IrOp::Addr { .. } => c.addr += 1,
                IrOp::Load { .. } => c.vload += 1,
                IrOp::Store { .. } => c.vstore += 1,
                IrOp::Shuf { .. } => c.vshuf += 1,
                IrOp::SelfShuf { .. } => c.vselfshuf += 1,
                IrOp::Const { .. } => {}
            }
        }
        c
    }

    pub fn vector_ops(&self) -> usize {
        self.vload + self.vstore + self.vshuf + self.vselfshuf
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoopNest {
    pub counter: CounterSpec,
    /// Blocks per body execution; the body holds `unroll` copies.
    pub unroll: usize,
    pub body: Vec<IrOp>,
    /// One copy, run for the `trips % unroll` leftover blocks.
    pub remainder: Vec<IrOp>,
}

impl LoopNest {
    pub fn trips(&self) -> usize {
        self.counter.trips()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrMeta {
    pub shuffle_steps: usize,
    pub block_registers: usize,
    pub utilization: Ratio<u64>,
    pub effective_utilization: Ratio<u64>,
    /// Value count before register allocation.
    pub virtual_registers: usize,
    /// Registers live during one block after allocation, pinned tables
    /// included; zero before optimization.
    pub iteration_registers: usize,
    pub optimized: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrProgram {
    pub machine: MachineConfig,
    pub elements: usize,
    pub constants: ConstPool,
    pub preamble: Vec<IrOp>,
    pub nests: Vec<LoopNest>,
    /// Size of the register file the program addresses.
    pub num_vregs: usize,
    pub meta: IrMeta,
}

impl IrProgram {
    pub fn lanes(&self) -> usize {
        self.machine.lanes()
    }

    /// Tables kept resident in registers.
    pub fn pinned(&self) -> BTreeMap<u32, usize> {
        self.preamble
            .iter()
            .filter_map(|op| match *op {
                IrOp::Const { table, reg } => Some((table, reg)),
                _ => None,
            })
            .collect()
    }

    /// Dynamic op counts implied by trip counts.
    pub fn expected_counts(&self) -> OpCounts {
        let mut c = OpCounts::default();
        for n in &self.nests {
            let full = n.trips() / n.unroll;
            let rem = n.trips() % n.unroll;
            for (ops, times) in [(&n.body, full), (&n.remainder, rem)] {
                let k = OpCounts::of(ops);
                c.vload += k.vload * times;
                c.vstore += k.vstore * times;
                c.vshuf += k.vshuf * times;
                c.vselfshuf += k.vselfshuf * times;
                c.addr += k.addr * times;
            }
        }
        c
    }

    /// Checks register and constant references.
    pub fn validate(&self) -> Result<()> {
        let w = self.lanes();
        for c in self.constants.entries() {
            if c.lanes.len() != w || c.lanes.iter().any(|&s| s as usize >= 2 * w) {
                return Err(Error::Inconsistent(format!("constant {} does not match {w} lanes", c.id)));
            }
        }
        let check = |op: &IrOp| -> Result<()> {
            for r in op.reads().into_iter().chain(op.writes()) {
                if r >= self.num_vregs {
                    return Err(Error::Inconsistent(format!("register {r} beyond {}", self.num_vregs)));
                }
            }
            if let IrOp::Shuf { table, .. } | IrOp::SelfShuf { table, .. } | IrOp::Const { table, .. } = op {
                let t = self
                    .constants
                    .get(*table)
                    .ok_or_else(|| Error::Inconsistent(format!("unknown constant {table}")))?;
                if matches!(op, IrOp::SelfShuf { .. }) && !t.is_self_shuffle() {
                    return Err(Error::Inconsistent(format!("constant {table} is not a self-shuffle")));
                }
            }
            Ok(())
        };
        for op in &self.preamble {
            check(op)?;
        }
        for n in &self.nests {
            if n.unroll == 0 {
                return Err(Error::Inconsistent("zero unroll".into()));
            }
            for op in n.body.iter().chain(&n.remainder) {
                check(op)?;
            }
        }
        Ok(())
    }
}

/// Which partial stores of a block go through destination read-modify-write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StoreMode {
    /// None: every overhang is rewritten by a later block.
    Plain,
    /// Those whose overhang may leave the destination index range.
    Crossing,
    All,
}

/// One block of the kernel, as a single-copy op list over SSA values.
fn block_ops(kernel: &BlockKernel, pool: &mut ConstPool, mode: StoreMode) -> (Vec<IrOp>, usize) {
    let w = kernel.lanes;
    let mut next = kernel.num_values;
    let mut ops = vec![IrOp::Addr { slot: 0 }];
    for op in &kernel.ops {
        match *op {
            MicroOp::Load { dst, offset, aligned } => ops.push(IrOp::Load {
                dst,
                buf: Buf::Src,
                slot: 0,
                offset,
                aligned,
            }),
            MicroOp::Shuf { a, b, table, dst } => ops.push(IrOp::Shuf { a, b, table, dst }),
            MicroOp::SelfShuf { src, table, dst } => ops.push(IrOp::SelfShuf { src, table, dst }),
            MicroOp::Store { src, store } => {
                let rec = &kernel.io.stores[store];
                let rmw = rec.valid_lanes < w
                    && match mode {
                        StoreMode::Plain => false,
                        StoreMode::Crossing => rec.tail_safe,
                        StoreMode::All => true,
                    };
                let mut data = src;
                if rmw {
                    let blend = kernel.io.blend.unwrap_or_else(|| {
                        pool.intern(
                            (0..w)
                                .map(|j| if j < rec.valid_lanes { j as u32 } else { (w + j) as u32 })
                                .collect(),
                        )
                    });
                    let reserve = next;
                    let merged = next + 1;
                    next += 2;
                    ops.push(IrOp::Load {
                        dst: reserve,
                        buf: Buf::Dst,
                        slot: 0,
                        offset: rec.offset,
                        aligned: rec.aligned,
                    });
                    ops.push(IrOp::Shuf {
                        a: src,
                        b: reserve,
                        table: blend,
                        dst: merged,
                    });
                    data = merged;
                }
                ops.push(IrOp::Store {
                    src: data,
                    slot: 0,
                    offset: rec.offset,
                    aligned: rec.aligned,
                });
            }
        }
    }
    (ops, next)
}

/// Builds the program: block loop nest(s) from the counter, per-block load,
/// shuffle and store sequence from the kernel, tail-safe stores where the
/// store plan requires them, constants from the pool.
pub fn build_ir(plan: &BlockPlan, kernel: &BlockKernel, pool: ConstPool, machine: &MachineConfig) -> Result<IrProgram> {
    if machine.lanes() != plan.lanes || kernel.lanes != plan.lanes {
        return Err(Error::Inconsistent(format!(
            "machine has {} lanes, plan {}",
            machine.lanes(),
            plan.lanes
        )));
    }
    if machine.elem_width != plan.layout.elem_width() {
        return Err(Error::Inconsistent("element width differs between machine and layout".into()));
    }
    let mut pool = pool;
    let io = &kernel.io;
    // Regions of the counter, in execution order. A region executes after
    // every block its plain stores spill into would otherwise have run.
    type Region = (Vec<(usize, usize, usize)>, StoreMode);
    let split = |r: &[(usize, usize, usize)], digit: usize, at: usize| {
        let dg = &plan.counter.digits[digit];
        let at = at.clamp(dg.lo, dg.hi);
        let mut lo = r.to_vec();
        lo.push((digit, dg.lo, at));
        let mut hi = r.to_vec();
        hi.push((digit, at, dg.hi));
        (lo, hi)
    };
    let regions: Vec<Region> = if let Some(t) = io.tail_split {
        let inner = |r: &[(usize, usize, usize)]| {
            let (a, b) = split(r, t.digit, t.split_at);
            vec![(a, StoreMode::Plain), (b, StoreMode::All)]
        };
        match io.carry_split {
            Some(c) => {
                let (x, y) = split(&[], c.digit, c.split_at);
                let mut v = vec![(x, StoreMode::Plain)];
                v.extend(inner(&y));
                v
            }
            None => inner(&[]),
        }
    } else if let Some(c) = io.carry_split {
        let (x, y) = split(&[], c.digit, c.split_at);
        vec![(x, StoreMode::Plain), (y, StoreMode::Crossing)]
    } else if let Some(d) = io.chunk_tail {
        let (x, y) = split(&[], d, plan.counter.digits[d].hi - 1);
        vec![(x, StoreMode::Plain), (y, StoreMode::Crossing)]
    } else {
        vec![(Vec::new(), StoreMode::Crossing)]
    };
    let mut bodies: Vec<(StoreMode, Vec<IrOp>)> = Vec::new();
    let mut vregs = 0;
    let mut nests = Vec::new();
    for (limits, mode) in regions {
        let mut counter = plan.counter.clone();
        for &(d, lo, hi) in &limits {
            let dg = &mut counter.digits[d];
            if hi < dg.hi {
                // the overriding offset belongs to the original final value
                dg.last = None;
            }
            dg.lo = lo;
            dg.hi = hi;
        }
        if counter.digits.iter().any(|d| d.is_empty()) {
            continue;
        }
        let body = match bodies.iter().find(|(m, _)| *m == mode) {
            Some((_, b)) => b.clone(),
            None => {
                let (b, n) = block_ops(kernel, &mut pool, mode);
                vregs = vregs.max(n);
                bodies.push((mode, b.clone()));
                b
            }
        };
        nests.push(LoopNest {
            counter,
            unroll: 1,
            body: body.clone(),
            remainder: body,
        });
    }
    let prog = IrProgram {
        machine: *machine,
        elements: plan.layout.num_elements(),
        constants: pool,
        preamble: Vec::new(),
        nests,
        num_vregs: vregs,
        meta: IrMeta {
            shuffle_steps: plan.shuffle_steps,
            block_registers: plan.num_registers,
            utilization: plan.utilization,
            effective_utilization: plan.effective_utilization,
            virtual_registers: vregs,
            iteration_registers: 0,
            optimized: false,
        },
    };
    prog.validate()?;
    Ok(prog)
}

/// Reorders `u` renamed copies of a block: addresses, then source loads, then
/// shuffles by earliest-ready inputs, then the store phase of every copy in
/// original order.
fn reorder(copies: &[Vec<IrOp>]) -> Vec<IrOp> {
    let mut addrs = Vec::new();
    let mut loads = Vec::new();
    let mut shufs = Vec::new();
    let mut stores = Vec::new();
    for ops in copies {
        let split = ops
            .iter()
            .position(|o| matches!(o, IrOp::Store { .. } | IrOp::Load { buf: Buf::Dst, .. }))
            .unwrap_or(ops.len());
        for (i, op) in ops.iter().enumerate() {
            match op {
                _ if i >= split => stores.push(op.clone()),
                IrOp::Addr { .. } => addrs.push(op.clone()),
                IrOp::Load { .. } => loads.push(op.clone()),
                _ => shufs.push(op.clone()),
            }
        }
    }
    let mut ready: HashMap<usize, usize> = HashMap::new();
    let mut out: Vec<IrOp> = addrs;
    for op in loads {
        ready.insert(op.writes().unwrap(), out.len());
        out.push(op);
    }
    // list scheduling: repeatedly pick the op whose inputs became ready first
    let mut pending = shufs;
    while !pending.is_empty() {
        let mut best: Option<(usize, usize)> = None;
        for (i, op) in pending.iter().enumerate() {
            let Some(t) = op.reads().iter().map(|r| ready.get(r).copied()).collect::<Option<Vec<_>>>() else {
                continue;
            };
            let t = t.into_iter().max().unwrap_or(0);
            if best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
        let (_, i) = best.expect("shuffle inputs are defined");
        let op = pending.remove(i);
        ready.insert(op.writes().unwrap(), out.len());
        out.push(op);
    }
    out.extend(stores);
    out
}

/// Linear-scan allocation; inputs dying at an op are released before its
/// output is assigned. Returns the rewritten ops and the register count.
fn allocate(ops: &[IrOp]) -> (Vec<IrOp>, usize) {
    let mut last_use: HashMap<usize, usize> = HashMap::new();
    for (i, op) in ops.iter().enumerate() {
        for r in op.reads() {
            last_use.insert(r, i);
        }
    }
    let mut free: BTreeSet<usize> = BTreeSet::new();
    let mut next = 0usize;
    let mut assign: HashMap<usize, usize> = HashMap::new();
    let mut out = Vec::with_capacity(ops.len());
    for (i, op) in ops.iter().enumerate() {
        let reads: Vec<usize> = op.reads().iter().map(|r| assign[r]).collect();
        for r in op.reads() {
            if last_use.get(&r) == Some(&i) {
                free.insert(assign[&r]);
            }
        }
        if let Some(w) = op.writes() {
            let reg = match free.pop_first() {
                Some(r) => r,
                None => {
                    next += 1;
                    next - 1
                }
            };
            assign.insert(w, reg);
            if !last_use.contains_key(&w) {
                free.insert(reg);
            }
        }
        let _ = reads;
        out.push(op.map_regs(&mut |v| assign[&v]));
    }
    (out, next)
}

fn copies(ops: &[IrOp], u: usize, stride: usize) -> Vec<Vec<IrOp>> {
    (0..u)
        .map(|c| ops.iter().map(|op| op.map_regs(&mut |v| v + c * stride).with_slot(c)).collect())
        .collect()
}

/// Uses of each table in one block.
fn table_uses(ops: &[IrOp], uses: &mut BTreeMap<u32, usize>) {
    for op in ops {
        if let IrOp::Shuf { table, .. } | IrOp::SelfShuf { table, .. } = op {
            *uses.entry(*table).or_insert(0) += 1;
        }
    }
}

/// Register reuse, unrolling and reordering. Index tables shared by several
/// shuffles of a block are kept in registers, most used first, up to two per
/// exchange step and as long as they fit next to the unrolled data
/// registers; the rest are read from memory by the shuffle itself.
pub fn optimize(ir: &IrProgram, machine: &MachineConfig) -> Result<IrProgram> {
    if ir.meta.optimized {
        return Ok(ir.clone());
    }
    if machine.lanes() != ir.lanes() {
        return Err(Error::Inconsistent("machine lane count differs from program".into()));
    }
    let budget = machine.num_vector_registers;
    let stride = ir.meta.virtual_registers;
    let mut nests = Vec::new();
    let mut peak = 0usize;
    let mut single_peak = 0usize;
    let mut uses = BTreeMap::new();
    for n in &ir.nests {
        let one = &n.remainder;
        let mut here = BTreeMap::new();
        table_uses(one, &mut here);
        for (t, c) in here {
            let e = uses.entry(t).or_insert(0);
            *e = c.max(*e);
        }
        let (rem, p) = allocate(&reorder(&copies(one, 1, stride)));
        if p > budget {
            return Err(Error::RegisterBudget { demand: p, budget });
        }
        let mut u = budget / p.max(1);
        let (body, pu) = loop {
            let (body, pu) = allocate(&reorder(&copies(one, u, stride)));
            if pu <= budget || u == 1 {
                break (body, pu);
            }
            u -= 1;
        };
        peak = peak.max(pu).max(p);
        single_peak = single_peak.max(p);
        nests.push(LoopNest {
            counter: n.counter.clone(),
            unroll: u,
            body,
            remainder: rem,
        });
    }
    let mut shared: Vec<(u32, usize)> = uses.into_iter().filter(|&(_, c)| c >= 2).collect();
    shared.sort_by_key(|&(t, c)| (std::cmp::Reverse(c), t));
    // one resident pair per exchange step; padding tables stay in memory
    shared.truncate(budget.saturating_sub(peak).min(2 * ir.meta.shuffle_steps.max(1)));
    let preamble: Vec<IrOp> = shared
        .iter()
        .enumerate()
        .map(|(i, &(table, _))| IrOp::Const { table, reg: peak + i })
        .collect();
    let pinned = preamble.len();
    let out = IrProgram {
        machine: *machine,
        elements: ir.elements,
        constants: ir.constants.clone(),
        preamble,
        nests,
        num_vregs: (peak + pinned).max(1),
        meta: IrMeta {
            iteration_registers: single_peak + pinned,
            optimized: true,
            ..ir.meta.clone()
        },
    };
    out.validate()?;
    Ok(out)
}

fn ratio_str(r: &Ratio<u64>) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

fn fmt_op(f: &mut String, op: &IrOp) {
    let al = |a: bool| if a { "a" } else { "u" };
    let _ = match *op {
        IrOp::Addr { slot } => writeln!(f, "addr s{slot}"),
        IrOp::Load { dst, buf, slot, offset, aligned } => {
            let b = if buf == Buf::Src { "src" } else { "dst" };
            writeln!(f, "vload v{dst} {b} s{slot}+{offset} {}", al(aligned))
        }
        IrOp::Store { src, slot, offset, aligned } => writeln!(f, "vstore v{src} s{slot}+{offset} {}", al(aligned)),
        IrOp::Shuf { a, b, table, dst } => writeln!(f, "vshuf v{dst} = v{a} v{b} t{table}"),
        IrOp::SelfShuf { src, table, dst } => writeln!(f, "vselfshuf v{dst} = v{src} t{table}"),
        IrOp::Const { table, reg } => writeln!(f, "pin t{table} v{reg}"),
    };
}

impl fmt::Display for IrProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        let m = &self.machine;
        let _ = writeln!(s, "permgen-ir v1");
        let _ = writeln!(
            s,
            "machine isa={} bits={} elem={} regs={} lanes={}",
            m.isa.tag(),
            m.bit_width,
            m.elem_width,
            m.num_vector_registers,
            m.lanes()
        );
        let _ = writeln!(s, "elements {}", self.elements);
        let _ = writeln!(s, "vregs {}", self.num_vregs);
        let meta = &self.meta;
        let _ = writeln!(
            s,
            "meta steps={} block_registers={} utilization={} effective={} virtual={} iteration={} optimized={}",
            meta.shuffle_steps,
            meta.block_registers,
            ratio_str(&meta.utilization),
            ratio_str(&meta.effective_utilization),
            meta.virtual_registers,
            meta.iteration_registers,
            meta.optimized
        );
        for c in self.constants.entries() {
            s.push_str(&format_const(c));
            s.push('\n');
        }
        for op in &self.preamble {
            fmt_op(&mut s, op);
        }
        for n in &self.nests {
            let _ = writeln!(s, "nest unroll={}", n.unroll);
            for d in &n.counter.digits {
                let kind = match d.kind {
                    DigitKind::Outer => "outer",
                    DigitKind::Chunk => "chunk",
                };
                let last = d.last.map_or("none".to_string(), |(a, b)| format!("{a},{b}"));
                let _ = writeln!(
                    s,
                    "  digit index={} kind={kind} lo={} hi={} src={} dst={} last={last}",
                    d.index, d.lo, d.hi, d.src_step, d.dst_step
                );
            }
            for (name, ops) in [("body", &n.body), ("remainder", &n.remainder)] {
                let _ = writeln!(s, "  {name}");
                for op in ops {
                    s.push_str("    ");
                    fmt_op(&mut s, op);
                }
            }
            let _ = writeln!(s, "end");
        }
        f.write_str(&s)
    }
}

struct Parser<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn kv<'a>(line: usize, tok: &'a str, key: &str) -> Result<&'a str> {
    tok.strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| perr(line, format!("expected {key}=..., got {tok:?}")))
}

fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| perr(line, format!("bad number {s:?}")))
}

fn reg(line: usize, s: &str, prefix: char) -> Result<usize> {
    let r = s.strip_prefix(prefix).ok_or_else(|| perr(line, format!("expected {prefix}<n>, got {s:?}")))?;
    num(line, r)
}

fn ratio(line: usize, s: &str) -> Result<Ratio<u64>> {
    let (a, b) = s.split_once('/').ok_or_else(|| perr(line, "bad ratio"))?;
    let d: u64 = num(line, b)?;
    if d == 0 {
        return Err(perr(line, "zero denominator"));
    }
    Ok(Ratio::new(num(line, a)?, d))
}

fn parse_op(ln: usize, line: &str) -> Result<IrOp> {
    let t: Vec<&str> = line.split_whitespace().collect();
    let aligned = |s: &str| match s {
        "a" => Ok(true),
        "u" => Ok(false),
        _ => Err(perr(ln, "alignment flag must be a or u")),
    };
    let addr = |s: &str| -> Result<(usize, usize)> {
        let (sl, off) = s.split_once('+').ok_or_else(|| perr(ln, "expected s<n>+<offset>"))?;
        Ok((reg(ln, sl, 's')?, num(ln, off)?))
    };
    match t.as_slice() {
        ["addr", s] => Ok(IrOp::Addr { slot: reg(ln, s, 's')? }),
        ["vload", d, b, a, al] => {
            let buf = match *b {
                "src" => Buf::Src,
                "dst" => Buf::Dst,
                _ => return Err(perr(ln, "buffer must be src or dst")),
            };
            let (slot, offset) = addr(a)?;
            Ok(IrOp::Load { dst: reg(ln, d, 'v')?, buf, slot, offset, aligned: aligned(al)? })
        }
        ["vstore", v, a, al] => {
            let (slot, offset) = addr(a)?;
            Ok(IrOp::Store { src: reg(ln, v, 'v')?, slot, offset, aligned: aligned(al)? })
        }
        ["vshuf", d, "=", a, b, tb] => Ok(IrOp::Shuf {
            a: reg(ln, a, 'v')?,
            b: reg(ln, b, 'v')?,
            table: reg(ln, tb, 't')? as u32,
            dst: reg(ln, d, 'v')?,
        }),
        ["vselfshuf", d, "=", a, tb] => Ok(IrOp::SelfShuf {
            src: reg(ln, a, 'v')?,
            table: reg(ln, tb, 't')? as u32,
            dst: reg(ln, d, 'v')?,
        }),
        ["pin", tb, r] => Ok(IrOp::Const { table: reg(ln, tb, 't')? as u32, reg: reg(ln, r, 'v')? }),
        _ => Err(perr(ln, format!("unknown op {line:?}"))),
    }
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<(usize, &'a str)> {
        self.lines.get(self.pos).copied()
    }

    fn next(&mut self) -> Result<(usize, &'a str)> {
        let l = self.peek().ok_or_else(|| perr(self.lines.last().map_or(0, |l| l.0), "unexpected end"))?;
        self.pos += 1;
        Ok(l)
    }
}

/// Parses the text form produced by `Display`.
pub fn parse_ir(text: &str) -> Result<IrProgram> {
    let mut p = Parser {
        lines: text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#') && !l.starts_with("//"))
            .collect(),
        pos: 0,
    };
    let (ln, head) = p.next()?;
    if head != "permgen-ir v1" {
        return Err(perr(ln, "missing header"));
    }
    let (ln, m) = p.next()?;
    let t: Vec<&str> = m.split_whitespace().collect();
    if t.len() != 6 || t[0] != "machine" {
        return Err(perr(ln, "bad machine line"));
    }
    let isa: Isa = kv(ln, t[1], "isa")?.parse().map_err(|e: Error| perr(ln, e.to_string()))?;
    let machine = MachineConfig::new(
        isa,
        num(ln, kv(ln, t[2], "bits")?)?,
        num(ln, kv(ln, t[3], "elem")?)?,
        num(ln, kv(ln, t[4], "regs")?)?,
    )
    .map_err(|e| perr(ln, e.to_string()))?;
    let (ln, e) = p.next()?;
    let elements = num(ln, e.strip_prefix("elements ").ok_or_else(|| perr(ln, "expected elements"))?)?;
    let (ln, v) = p.next()?;
    let num_vregs = num(ln, v.strip_prefix("vregs ").ok_or_else(|| perr(ln, "expected vregs"))?)?;
    let (ln, m) = p.next()?;
    let t: Vec<&str> = m.split_whitespace().collect();
    if t.len() != 8 || t[0] != "meta" {
        return Err(perr(ln, "bad meta line"));
    }
    let meta = IrMeta {
        shuffle_steps: num(ln, kv(ln, t[1], "steps")?)?,
        block_registers: num(ln, kv(ln, t[2], "block_registers")?)?,
        utilization: ratio(ln, kv(ln, t[3], "utilization")?)?,
        effective_utilization: ratio(ln, kv(ln, t[4], "effective")?)?,
        virtual_registers: num(ln, kv(ln, t[5], "virtual")?)?,
        iteration_registers: num(ln, kv(ln, t[6], "iteration")?)?,
        optimized: num(ln, kv(ln, t[7], "optimized")?)?,
    };
    let mut consts = Vec::new();
    let mut preamble = Vec::new();
    let mut nests = Vec::new();
    while let Some((ln, l)) = p.peek() {
        p.pos += 1;
        if let Some(rest) = l.strip_prefix("const ") {
            let (head, sels) = rest.split_once(':').ok_or_else(|| perr(ln, "expected ':'"))?;
            let h: Vec<&str> = head.split_whitespace().collect();
            if h.len() != 2 {
                return Err(perr(ln, "bad const header"));
            }
            let id: u32 = num(ln, h[0])?;
            let w: usize = num(ln, kv(ln, h[1], "w")?)?;
            let lanes: Vec<u32> = sels.split_whitespace().map(|s| num(ln, s)).collect::<Result<_>>()?;
            if lanes.len() != w {
                return Err(perr(ln, format!("const {id} has {} selectors, expected {w}", lanes.len())));
            }
            consts.push(ShuffleIndexVector { id, lanes });
        } else if l.starts_with("pin ") {
            preamble.push(parse_op(ln, l)?);
        } else if let Some(rest) = l.strip_prefix("nest ") {
            let unroll = num(ln, kv(ln, rest.trim(), "unroll")?)?;
            let mut digits = Vec::new();
            let mut body = Vec::new();
            let mut remainder = Vec::new();
            let mut section = 0;
            loop {
                let (ln, l) = p.next()?;
                match l {
                    "end" => break,
                    "body" => section = 1,
                    "remainder" => section = 2,
                    _ if l.starts_with("digit ") => {
                        let t: Vec<&str> = l.split_whitespace().collect();
                        if t.len() != 8 {
                            return Err(perr(ln, "bad digit line"));
                        }
                        let kind = match kv(ln, t[2], "kind")? {
                            "outer" => DigitKind::Outer,
                            "chunk" => DigitKind::Chunk,
                            k => return Err(perr(ln, format!("unknown digit kind {k}"))),
                        };
                        let last = match kv(ln, t[7], "last")? {
                            "none" => None,
                            s => {
                                let (a, b) = s.split_once(',').ok_or_else(|| perr(ln, "bad last"))?;
                                Some((num(ln, a)?, num(ln, b)?))
                            }
                        };
                        let d = Digit {
                            index: num(ln, kv(ln, t[1], "index")?)?,
                            kind,
                            lo: num(ln, kv(ln, t[3], "lo")?)?,
                            hi: num(ln, kv(ln, t[4], "hi")?)?,
                            src_step: num(ln, kv(ln, t[5], "src")?)?,
                            dst_step: num(ln, kv(ln, t[6], "dst")?)?,
                            last,
                        };
                        if d.is_empty() {
                            return Err(perr(ln, "empty digit range"));
                        }
                        digits.push(d);
                    }
                    _ => match section {
                        1 => body.push(parse_op(ln, l)?),
                        2 => remainder.push(parse_op(ln, l)?),
                        _ => return Err(perr(ln, "op outside body")),
                    },
                }
            }
            nests.push(LoopNest {
                counter: CounterSpec { digits },
                unroll,
                body,
                remainder,
            });
        } else {
            return Err(perr(ln, format!("unexpected line {l:?}")));
        }
    }
    let prog = IrProgram {
        machine,
        elements,
        constants: ConstPool::from_entries(consts)?,
        preamble,
        nests,
        num_vregs,
        meta,
    };
    prog.validate()?;
    Ok(prog)
}
