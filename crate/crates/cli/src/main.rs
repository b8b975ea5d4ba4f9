//! `permgen`: plan, generate, run and validate SIMD tensor permutation kernels.

mod tensor_file;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use permgen_core::campaign::{generate_cases, run_campaign, CampaignConfig, ShapeFamily};
use permgen_core::emit::statement_counts;
use permgen_core::vm::{audit_complexity, execute_with, VmOptions};
use permgen_core::{
    emit_for, generate, kernel_name, naive_permute, verify_native, GenerateOptions, Generated, Isa, MachineConfig,
    NativeOutcome, PermutationMap, Target, TensorLayout, Toolchain,
};

use tensor_file::TensorFile;

/// Error carrying a stable machine-parsable code.
#[derive(Debug)]
pub struct Coded {
    pub code: &'static str,
    pub msg: String,
}

impl Coded {
    pub fn new(code: &'static str, msg: &str) -> Coded {
        Coded { code, msg: msg.to_string() }
    }
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Coded {}

#[derive(Parser, Debug)]
#[command(name = "permgen", version, about = "SIMD tensor permutation kernel generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Show the block plan.
    Plan(JobArgs),
    /// Print the IR program and/or target source.
    Gen(GenArgs),
    /// Permute a tensor file (or a seeded random tensor) on the VM.
    Run(RunArgs),
    /// Randomized validation campaign against the naive oracle.
    Check(CheckArgs),
    /// Op-count report and host timings.
    Bench(JobArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Convention {
    /// Axis order as passed to numpy.transpose, outer to inner.
    Numpy,
    /// sigma listed from the outermost destination index down to the innermost.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EmitKind {
    Ir,
    Source,
    Both,
}

#[derive(Args, Debug, Clone, Default)]
struct MachineArgs {
    /// Key=value file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// x86-avx, arm-sve, sunway-simd or abstract.
    #[arg(long)]
    isa: Option<String>,
    /// Register width: 128, 256 or 512.
    #[arg(long)]
    bits: Option<usize>,
    /// Element width in bytes: 4 or 8.
    #[arg(long)]
    elem: Option<usize>,
    /// Vector register budget.
    #[arg(long)]
    regs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct JobArgs {
    /// Outer-to-inner shape, e.g. 7,32,32,3.
    #[arg(long)]
    shape: Option<String>,
    /// Permutation, e.g. 0,2,3,1.
    #[arg(long)]
    map: Option<String>,
    #[arg(long, value_enum)]
    convention: Option<Convention>,
    #[command(flatten)]
    machine: MachineArgs,
    /// Print statistics.
    #[arg(long)]
    stats: bool,
    /// Compile and run the emitted kernel on the host.
    #[arg(long)]
    native_verify: bool,
    /// Skip optimization passes.
    #[arg(long)]
    no_optimize: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    job: JobArgs,
    #[arg(long, value_enum, default_value = "ir")]
    emit: EmitKind,
    /// Source target; defaults to the machine ISA. `scalar` gives portable C.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    job: JobArgs,
    /// Input tensor file; a seeded random tensor when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reference tensor file the output must equal.
    #[arg(long)]
    expect: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[command(flatten)]
    machine: MachineArgs,
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long)]
    max_rank: Option<usize>,
    #[arg(long)]
    min_rank: Option<usize>,
    /// Element limit per case.
    #[arg(long)]
    max_elements: Option<usize>,
    /// Shape families: all-2, pow2, general (comma separated).
    #[arg(long)]
    families: Option<String>,
    #[arg(long)]
    stats: bool,
    /// Also compile and run kernels natively for the first cases.
    #[arg(long)]
    native_verify: bool,
    /// Native target for --native-verify.
    #[arg(long, default_value = "x86-avx")]
    target: String,
    /// Cases checked natively.
    #[arg(long, default_value_t = 20)]
    native_cases: usize,
}

/// Settings after merging the config file with flags.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Settings {
    values: BTreeMap<String, String>,
}

const CONFIG_KEYS: [&str; 13] = [
    "shape",
    "map",
    "convention",
    "isa",
    "bits",
    "elem",
    "regs",
    "seed",
    "cases",
    "max-rank",
    "min-rank",
    "max-elements",
    "families",
];

fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Coded::new("E_CONFIG", &format!("line {}: expected key=value", i + 1)))?;
        let k = k.trim().replace('_', "-");
        if !CONFIG_KEYS.contains(&k.as_str()) {
            return Err(Coded::new("E_CONFIG", &format!("line {}: unknown key '{k}'", i + 1)).into());
        }
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    fn load(machine: &MachineArgs, flags: &[(&str, Option<String>)]) -> Result<Settings> {
        let mut values = match &machine.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Coded::new("E_IO", &format!("{}: {e}", p.display())))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        let machine_flags = [
            ("isa", machine.isa.clone()),
            ("bits", machine.bits.map(|v| v.to_string())),
            ("elem", machine.elem.map(|v| v.to_string())),
            ("regs", machine.regs.map(|v| v.to_string())),
            ("seed", machine.seed.map(|v| v.to_string())),
        ];
        for (k, v) in machine_flags.iter().chain(flags) {
            if let Some(v) = v {
                values.insert(k.to_string(), v.clone());
            }
        }
        Ok(Settings { values })
    }

    fn get(&self, k: &str) -> Option<&str> {
        self.values.get(k).map(String::as_str)
    }

    fn num<T: std::str::FromStr>(&self, k: &str) -> Result<Option<T>> {
        self.get(k)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Coded::new("E_CONFIG", &format!("{k}: '{v}' is not a valid number")).into())
            })
            .transpose()
    }

    fn machine(&self) -> Result<MachineConfig> {
        let isa: Isa = self.get("isa").unwrap_or("abstract").parse()?;
        let bits = self.num("bits")?.unwrap_or(512);
        let elem = self.num("elem")?.unwrap_or(4);
        let regs = self.num("regs")?.unwrap_or(32);
        Ok(MachineConfig::new(isa, bits, elem, regs)?)
    }

    fn seed(&self) -> Result<u64> {
        Ok(self.num("seed")?.unwrap_or(0))
    }
}

fn parse_list(what: &str, s: &str) -> Result<Vec<usize>> {
    let s = s.trim().trim_start_matches(['(', '[']).trim_end_matches([')', ']']);
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Coded::new("E_CONFIG", &format!("{what}: '{}' is not a non-negative integer", x.trim())).into())
        })
        .collect()
}

/// A fully resolved permutation job.
struct Job {
    layout: TensorLayout,
    map: PermutationMap,
    machine: MachineConfig,
    seed: u64,
    stats: bool,
    native_verify: bool,
    options: GenerateOptions,
}

impl Job {
    fn resolve(args: &JobArgs) -> Result<Job> {
        let s = Settings::load(
            &args.machine,
            &[
                ("shape", args.shape.clone()),
                ("map", args.map.clone()),
                ("convention", args.convention.map(|c| format!("{c:?}").to_lowercase())),
            ],
        )?;
        let machine = s.machine()?;
        let shape = parse_list("shape", s.get("shape").ok_or_else(|| Coded::new("E_CONFIG", "missing --shape"))?)?;
        let layout = TensorLayout::from_shape(&shape, machine.elem_width)?;
        let list = match s.get("map") {
            Some(m) => parse_list("map", m)?,
            None => (0..shape.len()).collect(),
        };
        let map = match s.get("convention").unwrap_or("numpy") {
            "numpy" => PermutationMap::from_numpy_convention(&list)?,
            "paper" => PermutationMap::from_listing(&list)?,
            other => bail!(Coded::new("E_CONFIG", &format!("unknown convention '{other}'"))),
        };
        Ok(Job {
            layout,
            map,
            machine,
            seed: s.seed()?,
            stats: args.stats,
            native_verify: args.native_verify,
            options: GenerateOptions {
                optimize: !args.no_optimize,
                ..GenerateOptions::default()
            },
        })
    }

    fn generate(&self) -> Result<Generated> {
        Ok(generate(&self.layout, &self.map, &self.machine, &self.options)?)
    }

    fn name(&self) -> String {
        kernel_name(&self.layout, &self.map, &self.machine)
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Coded::new("E_IO", &format!("{}: {e}", p.display())).into()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn native_target(job: &Job, explicit: Option<&str>) -> Result<Target> {
    match explicit {
        Some(t) => Ok(t.parse()?),
        None => Ok(Target::Isa(job.machine.isa)),
    }
}

fn report_native(job: &Job, g: &Generated, target: Target) -> Result<NativeOutcome> {
    let target = if target == Target::Isa(Isa::Abstract) { Target::Scalar } else { target };
    let src = emit_for(&g.program, target, &job.name())?;
    let o = verify_native(&src, &job.layout, &job.map, &job.machine, &Toolchain::detect(), job.seed);
    println!("native {target}: {o}");
    if let NativeOutcome::Fail(m) = &o {
        bail!(Coded::new("E_NATIVE", m));
    }
    Ok(o)
}

fn cmd_plan(args: &JobArgs) -> Result<()> {
    let job = Job::resolve(args)?;
    let g = job.generate()?;
    println!("{}", g.plan);
    if job.stats {
        println!("dest_run      {}", g.plan.dest_run);
        println!("kernel_ops    {}", g.kernel.ops.len());
        println!("nests         {}", g.program.nests.len());
    }
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let job = Job::resolve(&args.job)?;
    let g = job.generate()?;
    let target = native_target(&job, args.target.as_deref())?;
    let mut text = String::new();
    if matches!(args.emit, EmitKind::Ir | EmitKind::Both) {
        text.push_str(&g.program.to_string());
    }
    if matches!(args.emit, EmitKind::Source | EmitKind::Both) {
        let src = emit_for(&g.program, target, &job.name())?;
        text.push_str(&src.text);
        if job.stats && !src.function.is_empty() {
            let c = statement_counts(&src, &job.machine)?;
            eprintln!(
                "statements vload={} vstore={} vshuf={} vselfshuf={}",
                c.vload, c.vstore, c.vshuf, c.vselfshuf
            );
        }
    }
    write_or_print(args.out.as_deref(), &text)?;
    if job.stats {
        let m = &g.program.meta;
        eprintln!(
            "steps={} block_registers={} iteration_registers={} utilization={} nests={}",
            m.shuffle_steps,
            m.block_registers,
            m.iteration_registers,
            m.utilization,
            g.program.nests.len()
        );
    }
    if job.native_verify {
        report_native(&job, &g, target)?;
    }
    Ok(())
}

fn load_input(job: &Job, input: Option<&Path>) -> Result<Vec<u8>> {
    match input {
        Some(p) => {
            let t = TensorFile::read(p)?;
            if t.shape != job.layout.shape() || t.elem_width != job.layout.elem_width() {
                bail!(Coded::new(
                    "E_FORMAT",
                    &format!(
                        "input is {:?} x{} bytes, job expects {:?} x{}",
                        t.shape,
                        t.elem_width,
                        job.layout.shape(),
                        job.layout.elem_width()
                    )
                ));
            }
            Ok(t.data)
        }
        None => Ok(permgen_core::campaign::random_input(
            job.layout.num_elements(),
            job.layout.elem_width(),
            job.seed,
        )),
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let job = Job::resolve(&args.job)?;
    let g = job.generate()?;
    let input = load_input(&job, args.input.as_deref())?;
    let run = execute_with(&g.program, &input, &VmOptions::default())?;
    let want = naive_permute(&input, &job.layout, &job.map)?;
    if run.output != want || run.uncovered != 0 {
        bail!(Coded::new("E_MISMATCH", "vm output differs from the naive permutation"));
    }
    let out_shape = permgen_core::tensor::permuted_layout(&job.layout, &job.map)?.shape();
    if let Some(p) = &args.out {
        TensorFile {
            elem_width: job.layout.elem_width(),
            shape: out_shape.clone(),
            data: run.output.clone(),
        }
        .write(p)?;
    }
    if let Some(p) = &args.expect {
        let e = TensorFile::read(p)?;
        if e.data != run.output || e.shape != out_shape {
            bail!(Coded::new("E_MISMATCH", &format!("output differs from {}", p.display())));
        }
        println!("matches {}", p.display());
    }
    println!("output shape {:?}: exact match with oracle", out_shape);
    if job.stats {
        println!("{}", run.counters);
        let r = audit_complexity(&run.counters, &job.layout, &job.machine, g.plan.effective_utilization);
        println!("{}", r.to_string().replace(' ', "\n"));
    }
    if job.native_verify {
        report_native(&job, &g, Target::Isa(job.machine.isa))?;
    }
    Ok(())
}

fn parse_families(s: &str) -> Result<Vec<ShapeFamily>> {
    s.split(',')
        .map(|f| match f.trim() {
            "all-2" => Ok(ShapeFamily::AllTwo),
            "pow2" => Ok(ShapeFamily::PowerOfTwo),
            "general" => Ok(ShapeFamily::General),
            other => Err(Coded::new("E_CONFIG", &format!("unknown shape family '{other}'")).into()),
        })
        .collect()
}

fn cmd_check(args: &CheckArgs) -> Result<()> {
    let s = Settings::load(
        &args.machine,
        &[
            ("cases", args.cases.map(|v| v.to_string())),
            ("max-rank", args.max_rank.map(|v| v.to_string())),
            ("min-rank", args.min_rank.map(|v| v.to_string())),
            ("max-elements", args.max_elements.map(|v| v.to_string())),
            ("families", args.families.clone()),
        ],
    )?;
    let mut cfg = CampaignConfig {
        seed: s.seed()?,
        ..CampaignConfig::default()
    };
    if let Some(c) = s.num("cases")? {
        cfg.cases = c;
    }
    if let Some(r) = s.num("max-rank")? {
        cfg.max_rank = r;
    }
    if let Some(r) = s.num("min-rank")? {
        cfg.min_rank = r;
    }
    if cfg.min_rank == 0 || cfg.min_rank > cfg.max_rank {
        bail!(Coded::new("E_CONFIG", "rank range must satisfy 1 <= min-rank <= max-rank"));
    }
    if let Some(n) = s.num("max-elements")? {
        cfg.max_elements = n;
    }
    if let Some(f) = s.get("families") {
        cfg.families = parse_families(f)?;
    }
    if let Some(r) = s.num("regs")? {
        cfg.registers = r;
    }
    if let Some(e) = s.num::<usize>("elem")? {
        cfg.elem_widths = vec![e];
    }
    if let Some(b) = s.num::<usize>("bits")? {
        let ew: Vec<usize> = cfg.elem_widths.clone();
        cfg.lanes = ew.iter().map(|e| b / (8 * e)).collect();
    }
    for &e in &cfg.elem_widths {
        for &w in &cfg.lanes {
            if [128, 256, 512].contains(&(w * e * 8)) {
                MachineConfig::with_lanes(w, e)?;
            }
        }
    }
    let start = Instant::now();
    let summary = run_campaign(&cfg);
    let secs = start.elapsed().as_secs_f64();
    for r in summary.failures().take(10) {
        eprintln!("FAIL {}: {}", r.spec, r.error.as_deref().unwrap_or("mismatch"));
    }
    println!("{summary}");
    if args.stats {
        let within = summary.total - summary.bound_violations;
        println!("complexity bound respected in {within}/{} cases", summary.total);
        println!("elapsed {secs:.2}s");
    }
    if args.native_verify {
        let target: Target = args.target.parse()?;
        let tc = Toolchain::detect();
        let mut tally = BTreeMap::new();
        for case in generate_cases(&cfg).into_iter().take(args.native_cases) {
            let machine = case.machine.with_isa(match target {
                Target::Isa(i) => i,
                Target::Scalar => Isa::Abstract,
            });
            let layout = TensorLayout::from_shape(&case.shape, machine.elem_width)?;
            let map = PermutationMap::from_numpy_convention(&case.axes)?;
            let g = generate(&layout, &map, &machine, &cfg.options)?;
            let src = emit_for(&g.program, target, &kernel_name(&layout, &map, &machine))?;
            let o = verify_native(&src, &layout, &map, &machine, &tc, case.seed);
            if let NativeOutcome::Fail(m) = &o {
                eprintln!("NATIVE FAIL {case}: {m}");
            }
            *tally.entry(o.tag()).or_insert(0usize) += 1;
        }
        let line: Vec<String> = tally.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("native {target}: {}", line.join(" "));
        if tally.contains_key("fail") {
            bail!(Coded::new("E_NATIVE", "native kernels differ from the oracle"));
        }
    }
    if !summary.all_passed() {
        bail!(Coded::new(
            "E_MISMATCH",
            &format!("{} of {} cases differ from the oracle", summary.total - summary.passed, summary.total)
        ));
    }
    Ok(())
}

fn cmd_bench(args: &JobArgs) -> Result<()> {
    let job = Job::resolve(args)?;
    let g = job.generate()?;
    let input = permgen_core::campaign::random_input(job.layout.num_elements(), job.layout.elem_width(), job.seed);
    let t0 = Instant::now();
    let want = naive_permute(&input, &job.layout, &job.map)?;
    let naive = t0.elapsed();
    let t1 = Instant::now();
    let run = execute_with(&g.program, &input, &VmOptions::default())?;
    let vm = t1.elapsed();
    if run.output != want {
        bail!(Coded::new("E_MISMATCH", "vm output differs from the naive permutation"));
    }
    let r = audit_complexity(&run.counters, &job.layout, &job.machine, g.plan.effective_utilization);
    println!("elements={}", job.layout.num_elements());
    println!("lanes={}", job.machine.lanes());
    println!("{}", run.counters);
    println!("vector_ops={}", run.counters.vector_ops());
    println!("{}", r.to_string().replace(' ', "\n"));
    println!("host_naive_us={}", naive.as_micros());
    println!("vm_us={}", vm.as_micros());
    if job.native_verify {
        report_native(&job, &g, Target::Isa(job.machine.isa))?;
    }
    Ok(())
}

fn error_code(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<Coded>() {
            return c.code;
        }
        if let Some(c) = cause.downcast_ref::<permgen_core::Error>() {
            return c.code();
        }
    }
    "E_INTERNAL"
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error E_USAGE: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Check(a) => cmd_check(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error {}: {}", error_code(&e), one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn config_parsing() {
        let c = parse_config("# job\nshape = 7,32,32,3\nmap=0,2,3,1\nmax_rank=4\n").unwrap();
        assert_eq!(c["shape"], "7,32,32,3");
        assert_eq!(c["max-rank"], "4");
        assert!(parse_config("bogus=1").is_err());
        assert!(parse_config("shape").is_err());
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list("shape", "(2, 3,4)").unwrap(), [2, 3, 4]);
        assert!(parse_list("shape", "2,x").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("job.cfg");
        std::fs::write(&p, "elem=8\nregs=16\n").unwrap();
        let m = MachineArgs {
            config: Some(p),
            regs: Some(24),
            ..MachineArgs::default()
        };
        let s = Settings::load(&m, &[]).unwrap();
        let mc = s.machine().unwrap();
        assert_eq!((mc.elem_width, mc.num_vector_registers), (8, 24));
    }

    #[test]
    fn error_codes_propagate() {
        let e: anyhow::Error = permgen_core::Error::InvalidMap("x".into()).into();
        assert_eq!(error_code(&e.context("while resolving")), "E_MAP");
        assert_eq!(error_code(&anyhow!(Coded::new("E_IO", "x"))), "E_IO");
        assert_eq!(error_code(&anyhow!("plain")), "E_INTERNAL");
    }
}
