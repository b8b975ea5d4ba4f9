//! Seeded randomized validation against the naive oracle.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::machine::MachineConfig;
use crate::pipeline::{generate, GenerateOptions};
use crate::tensor::{naive_permute, PermutationMap, TensorLayout};
use crate::vm::{audit_complexity, execute_with, ComplexityReport, VmCounters, VmOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    AllTwo,
    PowerOfTwo,
    /// Every dimension in `1..=9`.
    General,
}

impl ShapeFamily {
    pub fn tag(self) -> &'static str {
        match self {
            ShapeFamily::AllTwo => "all-2",
            ShapeFamily::PowerOfTwo => "pow2",
            ShapeFamily::General => "general",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CampaignConfig {
    pub cases: usize,
    pub min_rank: usize,
    pub max_rank: usize,
    pub seed: u64,
    pub max_elements: usize,
    pub lanes: Vec<usize>,
    pub elem_widths: Vec<usize>,
    pub families: Vec<ShapeFamily>,
    pub registers: usize,
    pub options: GenerateOptions,
    pub parallel: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            cases: 1000,
            min_rank: 2,
            max_rank: 16,
            seed: 0,
            max_elements: 1 << 20,
            lanes: vec![4, 8, 16],
            elem_widths: vec![4, 8],
            families: vec![ShapeFamily::AllTwo, ShapeFamily::PowerOfTwo, ShapeFamily::General],
            registers: 32,
            options: GenerateOptions::default(),
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseSpec {
    pub id: usize,
    pub family: ShapeFamily,
    /// Outer-to-inner shape.
    pub shape: Vec<usize>,
    /// Axis order in the outer-to-inner convention.
    pub axes: Vec<usize>,
    pub machine: MachineConfig,
    pub seed: u64,
}

impl fmt::Display for CaseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "case {} {} shape={:?} axes={:?} w={} elem={}",
            self.id,
            self.family.tag(),
            self.shape,
            self.axes,
            self.machine.lanes(),
            self.machine.elem_width
        )
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub spec: CaseSpec,
    pub passed: bool,
    pub error: Option<String>,
    pub counters: VmCounters,
    pub report: Option<ComplexityReport>,
    pub shuffle_steps: usize,
    pub common_indices: usize,
}

#[derive(Clone, Debug)]
pub struct CampaignSummary {
    pub total: usize,
    pub passed: usize,
    pub bound_violations: usize,
    pub results: Vec<CaseResult>,
}

impl CampaignSummary {
    pub fn all_passed(&self) -> bool {
        self.passed == self.total
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

impl fmt::Display for CampaignSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} exact matches", self.passed, self.total)
    }
}

/// Reduces random dimensions until the element count fits, halving to keep
/// powers of two or decrementing otherwise.
fn shrink(dims: &mut [usize], max: usize, rng: &mut impl Rng, halve: bool) {
    while dims.iter().product::<usize>() > max {
        let big: Vec<usize> = (0..dims.len()).filter(|&i| dims[i] > 1).collect();
        let Some(&i) = big.choose(rng) else { break };
        dims[i] = if halve { dims[i] / 2 } else { dims[i] - 1 };
    }
}

fn draw_case(id: usize, cfg: &CampaignConfig, rng: &mut ChaCha8Rng) -> CaseSpec {
    let family = *cfg.families.choose(rng).expect("at least one family");
    let ew = *cfg.elem_widths.choose(rng).expect("at least one element width");
    let fits: Vec<usize> = cfg.lanes.iter().copied().filter(|&w| [128, 256, 512].contains(&(w * ew * 8))).collect();
    let lanes = *fits.choose(rng).unwrap_or(&(512 / (8 * ew)));
    let max_log = usize::BITS as usize - 1 - cfg.max_elements.max(2).leading_zeros() as usize;
    let mut rank = rng.gen_range(cfg.min_rank..=cfg.max_rank.max(cfg.min_rank));
    let shape = match family {
        ShapeFamily::AllTwo => {
            rank = rank.min(max_log);
            vec![2; rank]
        }
        ShapeFamily::PowerOfTwo => {
            let mut d: Vec<usize> = (0..rank).map(|_| 1 << rng.gen_range(0..=4)).collect();
            shrink(&mut d, cfg.max_elements, rng, true);
            d
        }
        ShapeFamily::General => {
            let mut d: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=9)).collect();
            shrink(&mut d, cfg.max_elements, rng, false);
            d
        }
    };
    let mut axes: Vec<usize> = (0..shape.len()).collect();
    axes.shuffle(rng);
    let bits = lanes * ew * 8;
    let machine = MachineConfig::new(crate::machine::Isa::Abstract, bits, ew, cfg.registers).expect("valid campaign machine");
    CaseSpec {
        id,
        family,
        shape,
        axes,
        machine,
        seed: rng.next_u64(),
    }
}

/// Deterministic case list for the configuration.
pub fn generate_cases(cfg: &CampaignConfig) -> Vec<CaseSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.cases).map(|id| draw_case(id, cfg, &mut rng)).collect()
}

/// Random element buffer for a case.
pub fn random_input(n: usize, ew: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0u8; n * ew];
    rng.fill_bytes(&mut buf);
    buf
}

pub fn run_case(case: &CaseSpec, options: &GenerateOptions) -> CaseResult {
    let fail = |msg: String| CaseResult {
        spec: case.clone(),
        passed: false,
        error: Some(msg),
        counters: VmCounters::default(),
        report: None,
        shuffle_steps: 0,
        common_indices: 0,
    };
    let ew = case.machine.elem_width;
    let layout = match TensorLayout::from_shape(&case.shape, ew) {
        Ok(l) => l,
        Err(e) => return fail(e.to_string()),
    };
    let map = match PermutationMap::from_numpy_convention(&case.axes) {
        Ok(m) => m,
        Err(e) => return fail(e.to_string()),
    };
    let g = match generate(&layout, &map, &case.machine, options) {
        Ok(g) => g,
        Err(e) => return fail(format!("{}: {e}", e.code())),
    };
    let input = random_input(layout.num_elements(), ew, case.seed);
    let want = naive_permute(&input, &layout, &map).expect("valid oracle input");
    let run = match execute_with(&g.program, &input, &VmOptions::default()) {
        Ok(r) => r,
        Err(e) => return fail(format!("{}: {e}", e.code())),
    };
    let report = audit_complexity(&run.counters, &layout, &case.machine, g.plan.effective_utilization);
    let passed = run.output == want && run.uncovered == 0;
    CaseResult {
        spec: case.clone(),
        passed,
        error: (!passed).then(|| "output differs from oracle".to_string()),
        counters: run.counters,
        report: Some(report),
        shuffle_steps: g.plan.shuffle_steps,
        common_indices: g.plan.common_indices.len(),
    }
}

pub fn run_campaign(cfg: &CampaignConfig) -> CampaignSummary {
    let cases = generate_cases(cfg);
    let results: Vec<CaseResult> = if cfg.parallel {
        cases.par_iter().map(|c| run_case(c, &cfg.options)).collect()
    } else {
        cases.iter().map(|c| run_case(c, &cfg.options)).collect()
    };
    CampaignSummary {
        total: results.len(),
        passed: results.iter().filter(|r| r.passed).count(),
        bound_violations: results
            .iter()
            .filter(|r| r.report.as_ref().is_some_and(|rep| !rep.within_bound))
            .count(),
        results,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CampaignConfig {
        CampaignConfig {
            cases: 40,
            seed,
            max_elements: 1 << 12,
            parallel: false,
            ..CampaignConfig::default()
        }
    }

    #[test]
    fn same_seed_same_cases() {
        assert_eq!(generate_cases(&small(7)), generate_cases(&small(7)));
        assert_ne!(generate_cases(&small(7)), generate_cases(&small(8)));
    }

    #[test]
    fn cases_respect_limits() {
        for c in generate_cases(&small(3)) {
            assert!(c.shape.iter().product::<usize>() <= 1 << 12);
            assert!(c.shape.len() >= 2 && c.shape.len() <= 16);
            assert!([4, 8, 16].contains(&c.machine.lanes()));
            if c.family == ShapeFamily::PowerOfTwo {
                assert!(c.shape.iter().all(|d| d.is_power_of_two()));
            }
        }
    }

    #[test]
    fn small_campaign_passes() {
        let s = run_campaign(&small(11));
        let bad: Vec<String> = s.failures().map(|r| format!("{} {:?}", r.spec, r.error)).collect();
        assert!(s.all_passed(), "{bad:#?}");
        assert_eq!(s.to_string(), "40/40 exact matches");
    }

    #[test]
    fn parallel_matches_serial() {
        let a = run_campaign(&small(5));
        let b = run_campaign(&CampaignConfig { parallel: true, ..small(5) });
        let ca: Vec<_> = a.results.iter().map(|r| r.counters).collect();
        let cb: Vec<_> = b.results.iter().map(|r| r.counters).collect();
        assert_eq!(ca, cb);
    }
}
