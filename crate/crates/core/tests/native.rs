use permgen_core::campaign::{generate_cases, CampaignConfig};
use permgen_core::*;

#[test]
fn x86_kernels_match_oracle() {
    let tc = Toolchain::detect();
    let cfg = CampaignConfig {
        cases: 24,
        seed: 21,
        max_rank: 6,
        max_elements: 1 << 14,
        ..CampaignConfig::default()
    };
    let mut outcomes = Vec::new();
    for c in generate_cases(&cfg) {
        let mc = c.machine.with_isa(Isa::X86Avx);
        let l = TensorLayout::from_shape(&c.shape, mc.elem_width).unwrap();
        let m = PermutationMap::from_numpy_convention(&c.axes).unwrap();
        let g = generate(&l, &m, &mc, &GenerateOptions::default()).unwrap();
        let src = emit_source(&g.program, &mc, &kernel_name(&l, &m, &mc)).unwrap();
        let o = verify_native(&src, &l, &m, &mc, &tc, c.seed);
        assert!(!matches!(o, NativeOutcome::Fail(_)), "{c}: {o}");
        outcomes.push(o);
    }
    eprintln!("{:?}", outcomes.iter().map(|o| o.tag()).collect::<Vec<_>>());
}
