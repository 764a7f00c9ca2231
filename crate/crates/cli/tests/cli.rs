use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lfhj(args: &[&str], config: &str, out: &Path) -> Output {
    let cfg = out.with_extension("toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_lfhj"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

const MINIMAL: &str = "[grid]\nn = 8\nk = 8\n[solve]\nsteps = 16\n";

#[test]
fn minimal_solve_writes_one_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = lfhj(&["solve"], MINIMAL, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_files(&out), vec!["u_k000016.csv"]);
    let s = summary(&out);
    assert_eq!(s["passed"], true);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean_conserved"));
}

#[test]
fn cfl_violation_aborts_naming_the_column() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lfhj(&["solve"], "[grid]\nn = 8\nk = 8\n[solve]\nc = 1.0\nsteps = 4\n", &tmp.path().join("run"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("column"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lfhj(&["solve"], "[grid]\nn = 8\nsize = 3\n", &tmp.path().join("run"));
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("size") && err.contains("line 3"), "{err}");
}

#[test]
fn config_echo_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let cfg = "seed = 3\n[grid]\nn = 16\nk = 32\n[initial]\nkind = \"sine\"\namplitude = 0.3\nmode = 1\n[solve]\nsteps = 40\nrecord_every = 10\n";
    assert_eq!(lfhj(&["solve"], cfg, &a).status.code(), Some(0));
    let echo = fs::read_to_string(a.join("config.toml")).unwrap();
    let b = tmp.path().join("b");
    assert_eq!(lfhj(&["solve"], &echo, &b).status.code(), Some(0));
    for f in csv_files(&a) {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_on_quadratic_model_is_half_c_squared() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = lfhj(&["sweep"], "[grid]\nn = 8\nk = 16\n[sweep]\npoints = 5\n", &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("c,h_bar,gap,second_difference"));
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let (c, h): (f64, f64) = (cols[0].parse().unwrap(), cols[1].parse().unwrap());
        assert!((h - 0.5 * c * c).abs() < 1e-10, "{line}");
    }
}

#[test]
fn converge_reports_a_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = "[initial]\nkind = \"sine\"\namplitude = 0.2\nmode = 1\n[converge]\nmeshes = [8, 16, 32]\nt = 0.5\n";
    let o = lfhj(&["converge"], cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("converge.json")).unwrap()).unwrap();
    assert!(json["fit"]["slope"].as_f64().unwrap() > 0.5);
    assert!(fs::read_to_string(out.join("converge.csv")).unwrap().starts_with("mesh,dx,error,order\n"));
}

#[test]
fn walk_without_samples_is_exact_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = "[grid]\nn = 16\nk = 16\n[initial]\nkind = \"sine\"\namplitude = 0.3\nmode = 1\n[walk]\napex = 3\ndepth = 8\nn_samples = 0\n";
    let o = lfhj(&["walk"], cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(csv_files(&out).is_empty());
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("walk_deviation.json")).unwrap()).unwrap();
    assert_eq!(rep["d_method"], "exact");
}

#[test]
fn stability_failure_is_an_assertion_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = "[grid]\nn = 8\nk = 8\n[initial]\nkind = \"sine\"\namplitude = 0.3\nmode = 1\n[stability]\nperiods = 2\nmargin_fraction = 5.0\n";
    let o = lfhj(&["stability"], cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(summary(&out)["assertions"][0]["passed"], false);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "seed = 11\nmodel = { id = \"separable\", amplitude = 0.25 }\n[grid]\nn = 8\nk = 16\n\
[initial]\nkind = \"sine\"\namplitude = 0.3\nmode = 1\n\
[sweep]\npoints = 5\nc_min = -0.5\nc_max = 0.5\n\
[walk]\napex = 1\ndepth = 8\nn_samples = 500\n";
    for cmd in ["sweep", "walk"] {
        let one = tmp.path().join(format!("{cmd}1"));
        let many = tmp.path().join(format!("{cmd}4"));
        assert_eq!(lfhj(&[cmd, "--threads", "1"], cfg, &one).status.code(), Some(0));
        assert_eq!(lfhj(&[cmd, "--threads", "4"], cfg, &many).status.code(), Some(0));
        let files = csv_files(&one);
        assert!(!files.is_empty());
        assert_eq!(files, csv_files(&many));
        for f in files {
            assert_eq!(fs::read(one.join(&f)).unwrap(), fs::read(many.join(&f)).unwrap(), "{cmd}/{f}");
        }
    }
}
