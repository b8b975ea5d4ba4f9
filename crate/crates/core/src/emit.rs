//! Lowering of IR programs to target source text, and native verification.
//!
//! Every target except `abstract` shares one C skeleton: a counter per loop
//! nest that advances exactly as the VM's does, and one statement per vector
//! op rendered from the target's lowering table. Shuffle tables are expanded
//! to 32-bit word selectors so that 8-byte elements use the same interface.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::hash::Hasher;
use std::path::PathBuf;
use std::process::Command;
use std::str::FromStr;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::ir::{Buf, IrOp, IrProgram, LoopNest, OpCounts};
use crate::machine::{Isa, MachineConfig};
use crate::tensor::{naive_permute, PermutationMap, TensorLayout};

/// Emission target: one of the vector ISAs, the IR text itself, or portable
/// scalar C.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    Isa(Isa),
    Scalar,
}

impl Target {
    pub const ALL: [Target; 5] = [
        Target::Isa(Isa::X86Avx),
        Target::Isa(Isa::ArmSve),
        Target::Isa(Isa::SunwaySimd),
        Target::Isa(Isa::Abstract),
        Target::Scalar,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Target::Isa(isa) => isa.tag(),
            Target::Scalar => "scalar",
        }
    }
}

impl From<Isa> for Target {
    fn from(isa: Isa) -> Self {
        Target::Isa(isa)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "scalar" {
            return Ok(Target::Scalar);
        }
        s.parse::<Isa>().map(Target::Isa)
    }
}

/// Statement classes a lowering table provides templates for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpClass {
    Load,
    Store,
    Shuf,
    SelfShuf,
    /// Expression reading one index table from memory.
    Table,
}

impl OpClass {
    pub fn tag(self) -> &'static str {
        match self {
            OpClass::Load => "vload",
            OpClass::Store => "vstore",
            OpClass::Shuf => "vshuf",
            OpClass::SelfShuf => "vselfshuf",
            OpClass::Table => "table",
        }
    }
}

/// Template key: op class, alignment and element width in bytes.
pub type TemplateKey = (OpClass, bool, usize);

/// Statement patterns for one target and register width. Placeholders:
/// `{d}` destination register, `{a}` and `{b}` operands, `{t}` index table,
/// `{p}` address expression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoweringTable {
    pub target: Target,
    pub bit_width: usize,
    pub headers: Vec<&'static str>,
    pub vector_type: String,
    /// Declared type of a register holding a resident index table.
    pub table_type: String,
    /// Extra declarations at the top of the kernel body.
    pub prologue: Vec<String>,
    pub templates: BTreeMap<TemplateKey, String>,
    pub experimental: bool,
}

impl LoweringTable {
    pub fn for_machine(target: Target, machine: &MachineConfig) -> Result<LoweringTable> {
        let bits = machine.bit_width;
        let words = bits / 32;
        let mut t = LoweringTable {
            target,
            bit_width: bits,
            headers: vec!["<stdint.h>", "<stddef.h>"],
            vector_type: String::new(),
            table_type: String::new(),
            prologue: Vec::new(),
            templates: BTreeMap::new(),
            experimental: false,
        };
        let add = |t: &mut LoweringTable, class: OpClass, aligned: Option<bool>, pat: &str| {
            for ew in [4, 8] {
                for a in aligned.map_or(vec![false, true], |a| vec![a]) {
                    t.templates.insert((class, a, ew), pat.to_string());
                }
            }
        };
        match target {
            Target::Isa(Isa::X86Avx) => {
                let (p, ty, si) = match bits {
                    512 => ("_mm512", "__m512i", "si512"),
                    256 => ("_mm256", "__m256i", "si256"),
                    _ => ("_mm", "__m128i", "si128"),
                };
                t.headers.push("<immintrin.h>");
                t.vector_type = ty.to_string();
                add(&mut t, OpClass::Load, Some(false), &format!("{{d}} = {p}_loadu_epi32({{p}});"));
                add(&mut t, OpClass::Load, Some(true), &format!("{{d}} = {p}_load_epi32({{p}});"));
                add(&mut t, OpClass::Store, Some(false), &format!("{p}_storeu_epi32({{p}}, {{a}});"));
                add(&mut t, OpClass::Store, Some(true), &format!("{p}_store_epi32({{p}}, {{a}});"));
                add(&mut t, OpClass::Shuf, None, &format!("{{d}} = {p}_permutex2var_epi32({{a}}, {{t}}, {{b}});"));
                let selfshuf = if bits == 128 {
                    // no 128-bit single-source word permute in the integer domain
                    "{d} = _mm_castps_si128(_mm_permutevar_ps(_mm_castsi128_ps({a}), {t}));".to_string()
                } else {
                    format!("{{d}} = {p}_permutexvar_epi32({{t}}, {{a}});")
                };
                add(&mut t, OpClass::SelfShuf, None, &selfshuf);
                add(&mut t, OpClass::Table, None, &format!("{p}_loadu_{si}((const void *)({{p}}))"));
            }
            Target::Isa(Isa::ArmSve) => {
                t.headers.push("<arm_sve.h>");
                t.vector_type = "svuint32_t".into();
                t.prologue = vec![
                    format!("if (svcntw() != {words}) return -1;"),
                    format!("const svbool_t pg = svwhilelt_b32(0, {words});"),
                ];
                add(&mut t, OpClass::Load, None, "{d} = svld1_u32(pg, (const uint32_t *)({p}));");
                add(&mut t, OpClass::Store, None, "svst1_u32(pg, (uint32_t *)({p}), {a});");
                add(&mut t, OpClass::Shuf, None, "{d} = svtbl2_u32(svcreate2_u32({a}, {b}), {t});");
                add(&mut t, OpClass::SelfShuf, None, "{d} = svtbl_u32({a}, {t});");
                add(&mut t, OpClass::Table, None, "svld1_u32(pg, {p})");
            }
            Target::Isa(Isa::SunwaySimd) => {
                // stub: shuffle primitives have no published names
                t.headers.push("<simd.h>");
                t.vector_type = if bits == 256 { "intv8".into() } else { format!("intv{words}") };
                t.experimental = true;
                add(&mut t, OpClass::Load, None, "simd_loadu({d}, (const int *)({p}));");
                add(&mut t, OpClass::Store, None, "simd_storeu({a}, (int *)({p}));");
            }
            Target::Scalar => {
                t.headers.push("<string.h>");
                t.vector_type = "pg_vec".into();
                t.table_type = "const uint32_t *".into();
                add(&mut t, OpClass::Load, None, "{d} = pg_load({p});");
                add(&mut t, OpClass::Store, None, "pg_store({p}, {a});");
                add(&mut t, OpClass::Shuf, None, "{d} = pg_shuf({a}, {b}, {t});");
                add(&mut t, OpClass::SelfShuf, None, "{d} = pg_self({a}, {t});");
                add(&mut t, OpClass::Table, None, "({p})");
            }
            Target::Isa(Isa::Abstract) => {
                return Err(Error::UnsupportedTarget {
                    isa: target.tag().into(),
                    op: "c-lowering".into(),
                })
            }
        }
        if t.table_type.is_empty() {
            t.table_type = format!("const {}", t.vector_type);
        }
        Ok(t)
    }

    pub fn template(&self, class: OpClass, aligned: bool, ew: usize) -> Result<&str> {
        self.templates
            .get(&(class, aligned, ew))
            .map(String::as_str)
            .ok_or_else(|| Error::UnsupportedTarget {
                isa: self.target.tag().into(),
                op: format!("{}{} elem={ew}", class.tag(), if aligned { " aligned" } else { "" }),
            })
    }

    /// Intrinsic or helper name that identifies statements of one class.
    pub fn marker(&self, class: OpClass, aligned: bool, ew: usize) -> Option<String> {
        let pat = self.templates.get(&(class, aligned, ew))?;
        let body = pat.split_once(" = ").map_or(pat.as_str(), |(_, r)| r);
        body.split('(').next().map(|s| format!("{s}("))
    }
}

/// Emitted compilation unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmittedSource {
    pub target: Target,
    /// Kernel function name; empty for the abstract target.
    pub function: String,
    pub text: String,
}

/// Stable kernel name `permute_<fnv1a>` over shape, map and machine.
pub fn kernel_name(layout: &TensorLayout, map: &PermutationMap, machine: &MachineConfig) -> String {
    let key = format!(
        "dims={:?};sigma={:?};isa={};bits={};elem={};regs={}",
        layout.dims(),
        map.sigma(),
        machine.isa,
        machine.bit_width,
        machine.elem_width,
        machine.num_vector_registers
    );
    let mut h = FnvHasher::default();
    h.write(key.as_bytes());
    format!("permute_{:016x}", h.finish())
}

/// Lowers `ir` for the machine's own ISA.
pub fn emit_source(ir: &IrProgram, machine: &MachineConfig, function: &str) -> Result<EmittedSource> {
    emit_for(ir, Target::Isa(machine.isa), function)
}

/// Lowers `ir` for `target`. The abstract target yields the IR text.
pub fn emit_for(ir: &IrProgram, target: Target, function: &str) -> Result<EmittedSource> {
    if target == Target::Isa(Isa::Abstract) {
        return Ok(EmittedSource {
            target,
            function: String::new(),
            text: ir.to_string(),
        });
    }
    ir.validate()?;
    let table = LoweringTable::for_machine(target, &ir.machine)?;
    let text = CEmitter::new(ir, &table, function).emit()?;
    Ok(EmittedSource {
        target,
        function: function.to_string(),
        text,
    })
}

/// Tables as 32-bit word selectors; element selector `s` of an 8-byte
/// element becomes words `2s` and `2s + 1`.
pub fn word_selectors(lanes: &[u32], elem_width: usize) -> Vec<u32> {
    let k = (elem_width / 4) as u32;
    lanes.iter().flat_map(|&s| (0..k).map(move |h| s * k + h)).collect()
}

struct CEmitter<'a> {
    ir: &'a IrProgram,
    table: &'a LoweringTable,
    function: &'a str,
    ew: usize,
    elem: &'static str,
    pinned: BTreeMap<u32, usize>,
}

impl<'a> CEmitter<'a> {
    fn new(ir: &'a IrProgram, table: &'a LoweringTable, function: &'a str) -> Self {
        let ew = ir.machine.elem_width;
        CEmitter {
            ir,
            table,
            function,
            ew,
            elem: if ew == 8 { "uint64_t" } else { "uint32_t" },
            pinned: ir.pinned(),
        }
    }

    fn ops(&self) -> impl Iterator<Item = &IrOp> {
        self.ir
            .preamble
            .iter()
            .chain(self.ir.nests.iter().flat_map(|n| n.body.iter().chain(&n.remainder)))
    }

    fn used_tables(&self) -> BTreeSet<u32> {
        self.ops()
            .filter_map(|op| match *op {
                IrOp::Shuf { table, .. } | IrOp::SelfShuf { table, .. } | IrOp::Const { table, .. } => Some(table),
                _ => None,
            })
            .collect()
    }

    fn slots(&self) -> usize {
        self.ops()
            .filter_map(|op| match *op {
                IrOp::Addr { slot } | IrOp::Load { slot, .. } | IrOp::Store { slot, .. } => Some(slot + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    fn words(&self) -> usize {
        self.ir.machine.bit_width / 32
    }

    fn emit(&self) -> Result<String> {
        let ir = self.ir;
        let m = &ir.machine;
        let mut out = String::new();
        let meta = &ir.meta;
        let _ = writeln!(out, "/* permgen kernel");
        let _ = writeln!(out, " * target={} bits={} elem={} lanes={}", self.table.target, m.bit_width, m.elem_width, ir.lanes());
        let _ = writeln!(
            out,
            " * elements={} steps={} block_registers={} utilization={} iteration_registers={} nests={}",
            ir.elements,
            meta.shuffle_steps,
            meta.block_registers,
            meta.utilization,
            meta.iteration_registers,
            ir.nests.len()
        );
        if self.table.experimental {
            let _ = writeln!(out, " * EXPERIMENTAL lowering table");
        }
        let _ = writeln!(
            out,
            " * src and dst need {} elements of slack past the end; aligned accesses assume {}-byte aligned buffers",
            ir.lanes(),
            m.bit_width / 8
        );
        let _ = writeln!(out, " */");
        for h in &self.table.headers {
            let _ = writeln!(out, "#include {h}");
        }
        out.push('\n');
        out.push_str(COUNTER_HELPERS);
        if self.table.target == Target::Scalar {
            out.push_str(&scalar_helpers(self.words()));
        }
        out.push('\n');
        let words = self.words();
        for id in self.used_tables() {
            let t = ir
                .constants
                .get(id)
                .ok_or_else(|| Error::Inconsistent(format!("unknown constant {id}")))?;
            let sel = word_selectors(&t.lanes, self.ew);
            let list: Vec<String> = sel.iter().map(u32::to_string).collect();
            let _ = writeln!(out, "static const uint32_t pg_t{id}[{words}] = {{{}}};", list.join(", "));
        }
        let _ = writeln!(out, "\nint {}(const void *src, void *dst)\n{{", self.function);
        let _ = writeln!(out, "    const {} *s = (const {} *)src;", self.elem, self.elem);
        let _ = writeln!(out, "    {} *d = ({} *)dst;", self.elem, self.elem);
        for line in &self.table.prologue {
            let _ = writeln!(out, "    {line}");
        }
        for slot in 0..self.slots() {
            let _ = writeln!(out, "    const {} *s{slot} = s;", self.elem);
            let _ = writeln!(out, "    {} *d{slot} = d;", self.elem);
        }
        if ir.num_vregs > 0 {
            let regs: Vec<String> = (0..ir.num_vregs)
                .filter(|r| !self.pinned.values().any(|p| p == r))
                .map(|r| format!("v{r}"))
                .collect();
            if !regs.is_empty() {
                let _ = writeln!(out, "    {} {};", self.table.vector_type, regs.join(", "));
            }
        }
        for op in &ir.preamble {
            if let IrOp::Const { table, reg } = *op {
                let expr = self.table_expr_mem(table)?;
                let _ = writeln!(out, "    {} v{reg} = {expr};", self.table.table_type);
            }
        }
        for (i, nest) in ir.nests.iter().enumerate() {
            self.emit_nest(&mut out, i, nest)?;
        }
        let _ = writeln!(out, "    (void)s;\n    (void)d;\n    return 0;\n}}");
        Ok(out)
    }

    fn table_expr_mem(&self, id: u32) -> Result<String> {
        let pat = self.table.template(OpClass::Table, false, self.ew)?;
        Ok(pat.replace("{p}", &format!("pg_t{id}")))
    }

    fn table_operand(&self, id: u32) -> Result<String> {
        match self.pinned.get(&id) {
            Some(r) => Ok(format!("v{r}")),
            None => self.table_expr_mem(id),
        }
    }

    fn emit_nest(&self, out: &mut String, i: usize, nest: &LoopNest) -> Result<()> {
        let trips = nest.trips();
        let full = trips / nest.unroll;
        let rem = trips % nest.unroll;
        let digits = &nest.counter.digits;
        let deltas = nest.counter.deltas();
        let start = nest.counter.start();
        let _ = writeln!(out, "    /* nest {i}: {trips} blocks, unroll {} */", nest.unroll);
        let _ = writeln!(out, "    {{");
        let nd = digits.len();
        if nd > 0 {
            let rows: Vec<String> = digits
                .iter()
                .zip(&deltas)
                .map(|(dg, dl)| {
                    format!(
                        "{{{}, {}, {}, {}, {}, {}, {}, {}}}",
                        dg.lo, dg.hi, dl.step.0, dl.step.1, dl.into_last.0, dl.into_last.1, dl.wrap.0, dl.wrap.1
                    )
                })
                .collect();
            let _ = writeln!(out, "        static const pg_digit dg[{nd}] = {{{}}};", rows.join(", "));
            let vals: Vec<String> = start.values.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "        size_t cv[{nd}] = {{{}}};", vals.join(", "));
        }
        let _ = writeln!(out, "        int64_t cs = {}, cd = {};", start.src, start.dst);
        for (ops, times) in [(&nest.body, full), (&nest.remainder, rem)] {
            if times == 0 {
                continue;
            }
            let _ = writeln!(out, "        for (size_t it = 0; it < {times}; ++it) {{");
            for op in ops {
                let line = self.statement(op, nd)?;
                let _ = writeln!(out, "            {line}");
            }
            let _ = writeln!(out, "        }}");
        }
        let _ = writeln!(out, "        (void)cs;\n        (void)cd;");
        let _ = writeln!(out, "    }}");
        Ok(())
    }

    fn statement(&self, op: &IrOp, nd: usize) -> Result<String> {
        let ew = self.ew;
        let fill = |pat: &str, pairs: &[(&str, String)]| {
            let mut s = pat.to_string();
            for (k, v) in pairs {
                s = s.replace(k, v);
            }
            s
        };
        Ok(match *op {
            IrOp::Addr { slot } => {
                let adv = if nd > 0 {
                    format!(" pg_advance(dg, {nd}, cv, &cs, &cd);")
                } else {
                    String::new()
                };
                format!("s{slot} = s + cs; d{slot} = d + cd;{adv}")
            }
            IrOp::Load { dst, buf, slot, offset, aligned } => {
                let base = match buf {
                    Buf::Src => "s",
                    Buf::Dst => "d",
                };
                let pat = self.table.template(OpClass::Load, aligned, ew)?;
                fill(
                    pat,
                    &[("{d}", format!("v{dst}")), ("{p}", format!("(const void *)({base}{slot} + {offset})"))],
                )
            }
            IrOp::Store { src, slot, offset, aligned } => {
                let pat = self.table.template(OpClass::Store, aligned, ew)?;
                fill(pat, &[("{a}", format!("v{src}")), ("{p}", format!("(void *)(d{slot} + {offset})"))])
            }
            IrOp::Shuf { a, b, table, dst } => {
                let pat = self.table.template(OpClass::Shuf, false, ew)?;
                let t = self.table_operand(table)?;
                fill(
                    pat,
                    &[("{d}", format!("v{dst}")), ("{a}", format!("v{a}")), ("{b}", format!("v{b}")), ("{t}", t)],
                )
            }
            IrOp::SelfShuf { src, table, dst } => {
                let pat = self.table.template(OpClass::SelfShuf, false, ew)?;
                let t = self.table_operand(table)?;
                fill(pat, &[("{d}", format!("v{dst}")), ("{a}", format!("v{src}")), ("{t}", t)])
            }
            IrOp::Const { .. } => return Err(Error::Inconsistent("table pin inside a loop body".into())),
        })
    }
}

const COUNTER_HELPERS: &str = "\
typedef struct {
    size_t lo, hi;
    int64_t step_s, step_d, into_s, into_d, wrap_s, wrap_d;
} pg_digit;

static inline void pg_advance(const pg_digit *dg, size_t n, size_t *v, int64_t *cs, int64_t *cd)
{
    for (size_t i = 0; i < n; ++i) {
        size_t x = v[i] + 1;
        if (x < dg[i].hi) {
            int last = x + 1 == dg[i].hi;
            v[i] = x;
            *cs += last ? dg[i].into_s : dg[i].step_s;
            *cd += last ? dg[i].into_d : dg[i].step_d;
            return;
        }
        v[i] = dg[i].lo;
        *cs += dg[i].wrap_s;
        *cd += dg[i].wrap_d;
    }
}
";

fn scalar_helpers(words: usize) -> String {
    format!(
        "
typedef struct {{
    uint32_t w[{words}];
}} pg_vec;

static inline pg_vec pg_load(const void *p)
{{
    pg_vec v;
    memcpy(v.w, p, sizeof v.w);
    return v;
}}

static inline void pg_store(void *p, pg_vec v)
{{
    memcpy(p, v.w, sizeof v.w);
}}

static inline pg_vec pg_shuf(pg_vec a, pg_vec b, const uint32_t *t)
{{
    pg_vec r;
    for (int j = 0; j < {words}; ++j)
        r.w[j] = t[j] < {words} ? a.w[t[j]] : b.w[t[j] - {words}];
    return r;
}}

static inline pg_vec pg_self(pg_vec a, const uint32_t *t)
{{
    pg_vec r;
    for (int j = 0; j < {words}; ++j)
        r.w[j] = a.w[t[j] % {words}];
    return r;
}}
"
    )
}

/// Counts lowered vector statements per IR op class.
pub fn statement_counts(src: &EmittedSource, machine: &MachineConfig) -> Result<OpCounts> {
    let table = LoweringTable::for_machine(src.target, machine)?;
    let ew = machine.elem_width;
    let body = src.text.split_once(&format!("{}(", src.function)).map_or("", |(_, b)| b);
    let mut c = OpCounts::default();
    for line in body.lines() {
        let line = line.trim();
        let has = |class: OpClass| {
            [false, true]
                .iter()
                .filter_map(|&a| table.marker(class, a, ew))
                .any(|m| line.contains(&m))
        };
        if line.contains(" = s + cs;") {
            c.addr += 1;
        }
        // table reads inside shuffles are operands, not statements
        if has(OpClass::Shuf) {
            c.vshuf += 1;
        } else if has(OpClass::SelfShuf) {
            c.vselfshuf += 1;
        } else if has(OpClass::Store) {
            c.vstore += 1;
        } else if has(OpClass::Load) && !line.starts_with("const ") {
            c.vload += 1;
        }
    }
    Ok(c)
}

/// Result of a native compile-and-run check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NativeOutcome {
    Pass,
    Fail(String),
    Skipped(String),
}

impl NativeOutcome {
    pub fn tag(&self) -> &'static str {
        match self {
            NativeOutcome::Pass => "pass",
            NativeOutcome::Fail(_) => "fail",
            NativeOutcome::Skipped(_) => "skipped",
        }
    }
}

impl fmt::Display for NativeOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NativeOutcome::Pass => f.write_str("pass"),
            NativeOutcome::Fail(m) => write!(f, "fail: {m}"),
            NativeOutcome::Skipped(m) => write!(f, "skipped: {m}"),
        }
    }
}

/// Host C toolchain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Toolchain {
    pub cc: Option<PathBuf>,
}

impl Toolchain {
    /// Uses `$CC`, else `cc`, if it answers `--version`.
    pub fn detect() -> Toolchain {
        let cc = std::env::var_os("CC").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("cc"));
        let ok = Command::new(&cc)
            .arg("--version")
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false);
        Toolchain { cc: ok.then_some(cc) }
    }

    pub fn none() -> Toolchain {
        Toolchain { cc: None }
    }

    /// Whether the host can run code for `target`, with the extra compiler
    /// flags it needs.
    pub fn host_flags(target: Target, machine: &MachineConfig) -> std::result::Result<Vec<&'static str>, String> {
        match target {
            Target::Scalar => Ok(Vec::new()),
            Target::Isa(Isa::X86Avx) => host_x86(machine),
            Target::Isa(isa) => Err(format!("no native runner for {isa} on this host")),
        }
    }
}

#[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
fn host_x86(machine: &MachineConfig) -> std::result::Result<Vec<&'static str>, String> {
    let f = is_x86_feature_detected!("avx512f");
    let vl = is_x86_feature_detected!("avx512vl");
    match (f, vl || machine.bit_width == 512) {
        (true, true) => Ok(vec!["-mavx512f", "-mavx512vl"]),
        _ => Err("host lacks the 512-bit vector extension".into()),
    }
}

#[cfg(not(any(target_arch = "x86", target_arch = "x86_64")))]
fn host_x86(_: &MachineConfig) -> std::result::Result<Vec<&'static str>, String> {
    Err("host is not x86".into())
}

const GUARD_BYTE: u8 = 0xa5;

fn harness(function: &str, n: usize, ew: usize, guard: usize, align: usize) -> String {
    format!(
        "\
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

int {function}(const void *src, void *dst);

int main(int argc, char **argv)
{{
    const size_t n = {n}, ew = {ew}, g = {guard}, al = {align};
    size_t bytes = (n + 2 * g) * ew;
    bytes = (bytes + al - 1) / al * al;
    unsigned char *src = aligned_alloc(al, bytes), *dst = aligned_alloc(al, bytes);
    if (!src || !dst || argc != 3)
        return 2;
    memset(src, {GUARD_BYTE}, bytes);
    for (size_t i = 0; i < bytes; ++i)
        dst[i] = (unsigned char)(i * 131 + 7);
    FILE *f = fopen(argv[1], \"rb\");
    if (!f || fread(src + g * ew, 1, n * ew, f) != n * ew)
        return 2;
    fclose(f);
    if ({function}(src + g * ew, dst + g * ew) != 0)
        return 3;
    for (size_t i = 0; i < bytes; ++i)
        if ((i < g * ew || i >= (g + n) * ew) && dst[i] != (unsigned char)(i * 131 + 7))
            return 4;
    f = fopen(argv[2], \"wb\");
    if (!f || fwrite(dst + g * ew, 1, n * ew, f) != n * ew)
        return 2;
    fclose(f);
    return 0;
}}
"
    )
}

/// Compiles `source` with a guard-padded harness, runs it on a seeded random
/// input and compares the output bitwise with the naive permutation.
pub fn verify_native(
    source: &EmittedSource,
    layout: &TensorLayout,
    map: &PermutationMap,
    machine: &MachineConfig,
    toolchain: &Toolchain,
    seed: u64,
) -> NativeOutcome {
    let Some(cc) = &toolchain.cc else {
        return NativeOutcome::Skipped("no C compiler found".into());
    };
    if source.function.is_empty() {
        return NativeOutcome::Skipped(format!("{} target has no native form", source.target));
    }
    let flags = match Toolchain::host_flags(source.target, machine) {
        Ok(f) => f,
        Err(why) => return NativeOutcome::Skipped(why),
    };
    match run_native(cc, &flags, source, layout, map, machine, seed) {
        Ok(o) => o,
        Err(e) => NativeOutcome::Fail(e.to_string()),
    }
}

fn run_native(
    cc: &PathBuf,
    flags: &[&str],
    source: &EmittedSource,
    layout: &TensorLayout,
    map: &PermutationMap,
    machine: &MachineConfig,
    seed: u64,
) -> Result<NativeOutcome> {
    let dir = tempfile::tempdir()?;
    let p = |name: &str| dir.path().join(name);
    let ew = layout.elem_width();
    let n = layout.num_elements();
    std::fs::write(p("kernel.c"), &source.text)?;
    std::fs::write(
        p("main.c"),
        harness(&source.function, n, ew, machine.lanes(), machine.bit_width / 8),
    )?;
    let out = Command::new(cc)
        .args(["-std=c11", "-O1", "-w"])
        .args(flags)
        .arg(p("kernel.c"))
        .arg(p("main.c"))
        .arg("-o")
        .arg(p("kernel"))
        .output()?;
    if !out.status.success() {
        let diag = String::from_utf8_lossy(&out.stderr);
        return Ok(NativeOutcome::Fail(format!(
            "compile error: {}",
            diag.lines().take(8).collect::<Vec<_>>().join(" | ")
        )));
    }
    let input = crate::campaign::random_input(n, ew, seed);
    std::fs::write(p("in.bin"), &input)?;
    let run = Command::new(p("kernel")).arg(p("in.bin")).arg(p("out.bin")).output()?;
    match run.status.code() {
        Some(0) => {}
        Some(4) => return Ok(NativeOutcome::Fail("destination guard band overwritten".into())),
        Some(3) => return Ok(NativeOutcome::Skipped("kernel rejected the host vector length".into())),
        other => return Ok(NativeOutcome::Fail(format!("harness exited with {other:?}"))),
    }
    let got = std::fs::read(p("out.bin"))?;
    let want = naive_permute(&input, layout, map)?;
    if got == want {
        return Ok(NativeOutcome::Pass);
    }
    let first = got.iter().zip(&want).position(|(a, b)| a != b).unwrap_or(0) / ew;
    Ok(NativeOutcome::Fail(format!("output differs from the oracle at element {first}")))
}
