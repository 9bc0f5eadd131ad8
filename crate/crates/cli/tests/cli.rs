use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fedgan");

fn tiny(iterations: usize, extra: &str) -> String {
    format!(
        r#"name = "tiny"
seed = 3
num_clients = 3
strategy = "f2a"
iterations = {iterations}
batch_size = 16
{extra}

[generator]
noise_dim = 4
hidden = [16]

[discriminator]
hidden = [16]

[metrics]
every = 10
eval_samples = 1000

[scenario]
partition = "non_overlapping"
classes = [
  {{ mean = [-4.0], std = 0.5 }},
  {{ mean = [0.0], std = 0.5 }},
  {{ mean = [4.0], std = 0.5 }},
]
"#
    )
}

fn fedgan(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(25, ""));
    let out = tmp.path().join("out");
    let o = fedgan(&["run", &cfg, "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert!(lines[0].starts_with("iteration,lambda,generator_loss"));
    assert_eq!(lines.len(), 1 + 3);
    let last: Vec<&str> = lines[3].split(',').collect();
    assert_eq!(last[0], "25");
    let covered: usize = last[5].parse().unwrap();
    assert!(covered <= 3);

    let lambda = fs::read_to_string(out.join("lambda.csv")).unwrap();
    assert_eq!(lambda.lines().count(), 1 + 25);

    let samples = fs::read_to_string(out.join("samples.ndjson")).unwrap();
    let mut iters = std::collections::BTreeSet::new();
    for line in samples.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["x"].as_array().unwrap().len(), 1);
        iters.insert(v["iter"].as_u64().unwrap());
    }
    assert_eq!(iters.into_iter().collect::<Vec<_>>(), vec![0, 12, 25]);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["schema_version"], 1);
    assert!(manifest["config_hash"].as_str().unwrap().starts_with("sha256:"));
    assert!(out.join("config.toml").exists());
    assert!(out.join("timing.csv").exists());
}

#[test]
fn same_config_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(20, ""));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(fedgan(&["run", &cfg, "--out", s(&a)]).status.success());
    assert!(fedgan(&["run", &cfg, "--out", s(&b)]).status.success());
    for f in ["metrics.csv", "lambda.csv", "samples.ndjson", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_changes_the_run_and_the_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(10, ""));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(fedgan(&["run", &cfg, "--out", s(&a)]).status.success());
    assert!(fedgan(&["run", &cfg, "--out", s(&b), "--seed", "99"]).status.success());
    let hash = |d: &Path| {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
        (m["config_hash"].clone(), m["seed"].clone())
    };
    assert_ne!(hash(&a).0, hash(&b).0);
    assert_eq!(hash(&b).1, 99);
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn zero_iterations_give_a_header_only_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(0, ""));
    let out = tmp.path().join("out");
    assert!(fedgan(&["run", &cfg, "--out", s(&out)]).status.success());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn bad_config_exits_2_with_a_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let text = tiny(10, "").replace("batch_size = 16", "batch_size = \"many\"");
    let cfg = write_config(tmp.path(), &text);
    let o = fedgan(&["run", &cfg, "--out", s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 6"), "{err}");

    let text = tiny(10, "").replace("num_clients = 3", "num_clients = 0");
    let cfg = write_config(tmp.path(), &text);
    let o = fedgan(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("num_clients"), "{err}");
}

#[test]
fn blow_up_exits_3_with_the_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(50, "[optimizer]\neta = 1e150\n"));
    let out = tmp.path().join("out");
    let o = fedgan(&["run", &cfg, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("iteration"), "{err}");
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("non_finite"));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(!metrics.contains("NaN") && !metrics.contains("inf"));
}

#[test]
fn verify_passes_and_reports_every_check() {
    let o = fedgan(&["verify"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() >= 15);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    assert!(text.contains("measured") && text.contains("tolerance"));
}

#[test]
fn verify_strict_flags_quadrature_checks() {
    let o = fedgan(&["verify", "--profile", "strict"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("quadrature-bound"));
    let json = fedgan(&["verify", "--profile", "strict", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["profile"], "strict");
}

#[test]
fn strategy_sweep_makes_one_directory_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(10, ""));
    let out = tmp.path().join("sweep");
    let o = fedgan(&["sweep", &cfg, "--axis", "strategy", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for v in ["f2u", "f2a", "mdgan", "gman0"] {
        assert!(out.join(format!("strategy={v}")).join("seed-3").join("metrics.csv").exists(), "{v}");
    }
    let table = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
    assert!(table.lines().skip(1).all(|l| l.contains(",ok,")));
}

#[test]
fn sweep_records_failures_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    // two clients cannot split three classes without overlap
    let text = tiny(10, "") + "\n[sweep]\nnum_clients = [2, 3]\nseeds = [1, 2]\n";
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("sweep");
    let o = fedgan(&["sweep", &cfg, "--axis", "num_clients", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let table = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].contains("config_error") && rows[1].contains("config_error"));
    assert!(rows[2].contains(",ok,") && rows[3].contains(",ok,"));
    assert!(out.join("num_clients=n3").join("seed-2").join("manifest.json").exists());
}

#[test]
fn lambda_sweep_mirrors_fixed_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(5, ""));
    let out = tmp.path().join("sweep");
    assert!(fedgan(&["sweep", &cfg, "--axis", "lambda_fixed", "--out", s(&out)]).status.success());
    assert!(out.join("lambda_fixed=fixed_lambda_0").exists());
    assert!(out.join("lambda_fixed=fixed_lambda_3.6").exists());
}
