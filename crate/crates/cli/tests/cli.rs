use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_mfcrand"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .expect("run mfcrand")
}

const SMALL: &str = r#"
[run]
seed = 7

[instances]
count = 1

[mc]
particles = 200
reps = 8
lambda_per_mark = 0.5
pilot_levels = [10.0]
pilot_floor = 0.01
consistency_controls = 1
consistency_particles = 2000
consistency_reps = 8
"#;

#[test]
fn missing_key_exits_two_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), "[run]\nseed = 1\n[instances]\n", &["bsde"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("instances.count"), "{err}");
}

#[test]
fn unknown_family_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"
[run]
seed = 1
[instances]
count = 0
[[instance]]
label = "x"
steps = 1
w_lattice = "none"
b_lattice = "none"
atom_weights = [1.0]
xi = [0.0]
actions = [[0.0], [1.0]]
coefficients = { name = "nope" }
reward = { name = "linear" }
"#;
    let out = run(tmp.path(), cfg, &["bsde"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("instance[0].coefficients.name"), "{err}");
}

#[test]
fn bsde_roots_increase_with_the_level() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}\n[bsde]\nlevels = [1.0, 2.0, 4.0, 8.0]\nrepresentation_levels = [1.0]\n");
    let out = run(tmp.path(), &cfg, &["bsde"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = std::fs::read_to_string(tmp.path().join("out/bsde/bsde_summary.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let level = header.iter().position(|c| *c == "level").unwrap();
    let root = header.iter().position(|c| *c == "y_root").unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let finite: Vec<f64> = rows
        .iter()
        .filter(|r| r[level].parse::<f64>().unwrap().is_finite())
        .map(|r| r[root].parse().unwrap())
        .collect();
    assert_eq!(finite.len(), 4);
    assert!(finite.windows(2).all(|w| w[0] <= w[1]), "{finite:?}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("out/bsde/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["pass"], true);
}

#[test]
fn equivalence_on_one_instance_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), SMALL, &["equivalence"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.lines().all(|l| l.contains("PASS")));
    assert!(tmp.path().join("out/equivalence/equivalence.csv").exists());
}
