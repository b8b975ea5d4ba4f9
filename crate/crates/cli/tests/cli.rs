use std::path::Path;
use std::process::{Command, Output};

use permgen_core::{naive_permute, PermutationMap, TensorLayout};

fn permgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permgen")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tensor_file(path: &Path, shape: &[usize], ew: usize, data: &[u8]) {
    let mut b = b"PERMTNSR".to_vec();
    b.extend_from_slice(&(ew as u32).to_le_bytes());
    b.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        b.extend_from_slice(&(d as u64).to_le_bytes());
    }
    b.extend_from_slice(data);
    std::fs::write(path, b).unwrap();
}

#[test]
fn plan_identity_has_no_steps() {
    let o = permgen(&["plan", "--shape", "8,16", "--map", "0,1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("shuffle_steps 0"), "{}", stdout(&o));
}

#[test]
fn run_matches_oracle_file() {
    let dir = tempfile::tempdir().unwrap();
    let shape = [7, 32, 32, 3];
    let layout = TensorLayout::from_shape(&shape, 4).unwrap();
    let map = PermutationMap::from_numpy_convention(&[0, 2, 3, 1]).unwrap();
    let input: Vec<u8> = (0..layout.num_bytes()).map(|i| (i * 7 % 251) as u8).collect();
    let want = naive_permute(&input, &layout, &map).unwrap();
    let (inp, oracle, out) = (dir.path().join("in.bin"), dir.path().join("oracle.bin"), dir.path().join("out.bin"));
    tensor_file(&inp, &shape, 4, &input);
    tensor_file(&oracle, &[7, 32, 3, 32], 4, &want);
    let args = [
        "run", "--shape", "7,32,32,3", "--map", "0,2,3,1", "--input", inp.to_str().unwrap(), "--out",
        out.to_str().unwrap(), "--expect", oracle.to_str().unwrap(), "--stats",
    ];
    let o = permgen(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("vshuf="));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&oracle).unwrap());
}

#[test]
fn run_detects_wrong_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let oracle = dir.path().join("oracle.bin");
    tensor_file(&oracle, &[3, 2], 4, &[0; 24]);
    let o = permgen(&["run", "--shape", "2,3", "--map", "1,0", "--seed", "5", "--expect", oracle.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error E_MISMATCH:"), "{}", stderr(&o));
}

#[test]
fn paper_convention_is_reversed_listing() {
    // numpy axes (1, 0, 2) on rank 3 is the sigma listing (1, 2, 0)
    let a = permgen(&["plan", "--shape", "3,4,5", "--map", "1,0,2"]);
    let b = permgen(&["plan", "--shape", "3,4,5", "--map", "1,2,0", "--convention", "paper"]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn gen_emits_ir_and_source() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k.c");
    let o = permgen(&[
        "gen", "--shape", "16,16", "--map", "1,0", "--isa", "x86-avx", "--emit", "both", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("permgen-ir v1"));
    assert!(text.contains("_mm512_permutex2var_epi32("));
    assert!(text.contains("int permute_"));
    let again = permgen(&["gen", "--shape", "16,16", "--map", "1,0", "--isa", "x86-avx", "--emit", "source"]);
    assert!(text.ends_with(&stdout(&again)));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("job.cfg");
    std::fs::write(&cfg, "shape = 4,6\nmap = 1,0\nelem = 8\nbits = 256\n").unwrap();
    let o = permgen(&["plan", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("lanes         4"));
    let o = permgen(&["plan", "--config", cfg.to_str().unwrap(), "--elem", "4"]);
    assert!(stdout(&o).contains("lanes         8"));
}

#[test]
fn check_small_campaign() {
    let o = permgen(&["check", "--cases", "30", "--max-rank", "6", "--seed", "7", "--max-elements", "4096"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "30/30 exact matches");
}

#[test]
fn failures_are_single_line_codes() {
    let cases: [(&[&str], &str); 6] = [
        (&["plan", "--shape", "2,3", "--map", "0,0"], "E_MAP"),
        (&["plan", "--shape", "2,3", "--map", "0,1,2"], "E_RANK"),
        (&["plan", "--shape", "2,3", "--bits", "384"], "E_MACHINE"),
        (&["plan", "--map", "0"], "E_CONFIG"),
        (&["plan", "--shape", "2,x"], "E_CONFIG"),
        (&["frobnicate"], "E_USAGE"),
    ];
    for (args, code) in cases {
        let o = permgen(args);
        assert!(!o.status.success(), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error {code}:")), "{args:?}: {err}");
    }
}

#[test]
fn missing_input_file() {
    let o = permgen(&["run", "--shape", "2,3", "--input", "/nonexistent/in.bin"]);
    assert!(stderr(&o).starts_with("error E_IO:"), "{}", stderr(&o));
}

#[test]
fn bench_reports_counts() {
    let o = permgen(&["bench", "--shape", "64,64", "--map", "1,0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("vector_ops=") && s.contains("within_bound=true") && s.contains("vm_us="), "{s}");
}
