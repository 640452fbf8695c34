use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tnaf_core::flow::{FlowConfig, HeadType};

fn tnaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tnaf")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(head: &str, toy: &str) -> String {
    format!(
        r#"{{
  "model": {{"E": 8, "heads": 2, "layers": 1, "mlp_hidden": 8, "head_type": "{head}", "H": 8, "K": 4}},
  "train": {{"max_steps": 60, "eval_every": 20, "batch_size": 64, "seed": 1}},
  "data": {{"toy": "{toy}", "n": 600, "seed": 3}}
}}"#
    )
}

struct Run {
    dir: TempDir,
    ckpt: PathBuf,
    out: String,
}

fn trained(head: &str) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, small_config(head, "gauss_mixture_8")).unwrap();
    let ckpt = dir.path().join("run.ckpt");
    let o = tnaf(&["train", "-c", s(&config), "-o", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    Run {
        out: stdout(&o),
        dir,
        ckpt,
    }
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in `{line}`"))
}

#[test]
fn train_reports_metrics_and_closed_form_count() {
    let run = trained("cdf");
    assert!(run.ckpt.exists());
    let lines: Vec<&str> = run.out.lines().collect();
    assert_eq!(lines.len(), 4, "three validation records and a summary");
    assert!(lines[0].starts_with("step=20 train_nll="));
    let last = lines.last().unwrap();
    assert!(last.contains(" ± "));
    field(last, "test_ll").parse::<f64>().unwrap();
    let cfg = FlowConfig {
        embed: 8,
        heads: 2,
        layers: 1,
        mlp_hidden: 8,
        cdf_hidden: 8,
        ..FlowConfig::new(2, HeadType::Cdf)
    };
    let (e, m, d, h) = (8, 8, 2, 8);
    let expected = 3 * e + d * e + (4 * e + 4 * (e * e + e) + 2 * e * m + m + e) + (e + 1) * (3 * h + 1);
    assert_eq!(cfg.param_count(), expected);
    assert_eq!(field(last, "param_count"), expected.to_string());
}

#[test]
fn malformed_or_unknown_config_exits_2_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("never.ckpt");
    for (i, text) in ["{\"data\": {\"toy\": ", r#"{"data": {"toy": "ring"}, "model": {"depth": 3}}"#]
        .iter()
        .enumerate()
    {
        let config = dir.path().join(format!("bad{i}.json"));
        fs::write(&config, text).unwrap();
        let o = tnaf(&["train", "-c", s(&config), "-o", s(&ckpt)]);
        assert_eq!(code(&o), 2, "{}", stderr(&o));
        assert!(!stderr(&o).is_empty());
        assert!(!ckpt.exists());
    }
}

#[test]
fn eval_matches_train_and_rejects_bad_inputs() {
    let run = trained("affine");
    let trained_ll: f64 = field(run.out.lines().last().unwrap(), "test_ll").parse().unwrap();
    let o = tnaf(&["eval", "-m", s(&run.ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ll: f64 = field(&stdout(&o), "test_ll").parse().unwrap();
    assert!((ll - trained_ll).abs() <= 1e-4);

    let wide = run.dir.path().join("wide.csv");
    fs::write(&wide, "a,b,c\n1,2,3\n4,5,6\n").unwrap();
    assert_eq!(code(&tnaf(&["eval", "-m", s(&run.ckpt), "-d", s(&wide)])), 3);
    let empty = run.dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&tnaf(&["eval", "-m", s(&run.ckpt), "-d", s(&empty)])), 3);

    let bytes = fs::read(&run.ckpt).unwrap();
    let cut = run.dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = tnaf(&["eval", "-m", s(&cut)]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("checkpoint corrupt"));
}

#[test]
fn eval_reads_raw_f32_data() {
    let run = trained("cdf");
    let csv = run.dir.path().join("points.csv");
    fs::write(&csv, "x,y\n0.5,1.5\n-3.0,2.0\n4.0,0.0\n").unwrap();
    let matrix = tnaf_core::data::load_matrix(&csv, tnaf_core::data::Format::Csv).unwrap();
    let raw = run.dir.path().join("points.f32");
    tnaf_core::data::save_raw_f32(&matrix, &raw).unwrap();
    let a = stdout(&tnaf(&["eval", "-m", s(&run.ckpt), "-d", s(&csv)]));
    let b = stdout(&tnaf(&["eval", "-m", s(&run.ckpt), "-d", s(&raw), "--format", "raw_f32"]));
    let (a, b): (f64, f64) = (field(&a, "test_ll").parse().unwrap(), field(&b, "test_ll").parse().unwrap());
    assert!((a - b).abs() < 1e-4);
}

#[test]
fn sampling_is_deterministic_and_validates_count() {
    let run = trained("spline");
    let a = run.dir.path().join("a.csv");
    let b = run.dir.path().join("b.csv");
    for path in [&a, &b] {
        let o = tnaf(&["sample", "-m", s(&run.ckpt), "-n", "1", "--seed", "9", "-o", s(path)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let many = run.dir.path().join("many.csv");
    assert_eq!(code(&tnaf(&["sample", "-m", s(&run.ckpt), "-n", "50", "--seed", "2", "-o", s(&many)])), 0);
    let text = fs::read_to_string(&many).unwrap();
    assert_eq!(text.lines().next(), Some("x1,x2"));
    assert_eq!(text.lines().count(), 51);
    let o = tnaf(&["sample", "-m", s(&run.ckpt), "-n", "0", "-o", s(&many)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invert_maps_base_points_to_data_space() {
    let run = trained("affine");
    let base = run.dir.path().join("base.csv");
    fs::write(&base, "0,0\n1,-1\n").unwrap();
    let out = run.dir.path().join("x.csv");
    let o = tnaf(&["invert", "-m", s(&run.ckpt), "-i", s(&base), "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 3);
}

#[test]
fn check_passes_on_fresh_models_of_every_head() {
    let dir = tempfile::tempdir().unwrap();
    for head in HeadType::ALL {
        let config = dir.path().join(format!("{head}.json"));
        fs::write(&config, small_config(head.name(), "two_moons")).unwrap();
        let o = tnaf(&["check", "-c", s(&config)]);
        assert_eq!(code(&o), 0, "{head}: {}{}", stdout(&o), stderr(&o));
        let out = stdout(&o);
        for name in ["triangularity", "log_det", "gradient", "inversion"] {
            assert!(out.contains(&format!("oracle={name} status=pass")), "{out}");
        }
    }
}

#[test]
fn check_handles_one_dimensional_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("line.csv");
    let rows: String = (0..200).map(|i| format!("{}\n", (i as f64 * 0.37).sin() * 2.0)).collect();
    fs::write(&data, format!("v\n{rows}")).unwrap();
    for head in HeadType::ALL {
        let config = dir.path().join("line.json");
        fs::write(
            &config,
            format!(
                r#"{{"model": {{"E": 8, "heads": 2, "layers": 1, "mlp_hidden": 8, "head_type": "{head}", "H": 8}},
                    "data": {{"path": "line.csv"}}}}"#
            ),
        )
        .unwrap();
        let o = tnaf(&["check", "-c", s(&config)]);
        assert_eq!(code(&o), 0, "{head}: {}{}", stdout(&o), stderr(&o));
    }
}

#[test]
fn check_rejects_corrupted_checkpoint_and_missing_source() {
    let run = trained("cdf");
    let o = tnaf(&["check", "-m", s(&run.ckpt)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let mut bytes = fs::read(&run.ckpt).unwrap();
    let at = bytes.len() - 7;
    bytes[at] ^= 0x10;
    let bad = run.dir.path().join("bad.ckpt");
    fs::write(&bad, &bytes).unwrap();
    assert_ne!(code(&tnaf(&["check", "-m", s(&bad)])), 0);
    assert_eq!(code(&tnaf(&["check"])), 2);
}

#[test]
fn inspect_counts_pseudo_parameters_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("paper.json");
    let count = |dim: usize, psi: bool| -> usize {
        fs::write(&config, format!(r#"{{"model": {{"D": {dim}}}, "data": {{"toy": "ring"}}}}"#)).unwrap();
        let mut args = vec!["inspect", "-c", s(&config)];
        if psi {
            args.push("--count-with-psi");
        }
        let o = tnaf(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        field(stdout(&o).lines().last().unwrap(), "param_count").parse().unwrap()
    };
    assert_eq!(count(6, false), 38_625);
    assert_eq!(count(6, true), 38_625 + 6 * 385);
    let minib = count(43, false);
    assert!(minib < 100_000);
    assert_eq!(count(44, false) - minib, 32);
}

#[test]
fn ablate_prints_a_row_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("ablate.json");
    fs::write(&config, small_config("cdf", "ring").replace("\"max_steps\": 60", "\"max_steps\": 20")).unwrap();
    let o = tnaf(&["ablate", "-c", s(&config), "--head-types", "cdf,spline", "--layers", "1,2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("| cdf | 1 |"));
    assert!(rows[3].starts_with("| spline | 2 |"));
}
