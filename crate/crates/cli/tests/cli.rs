use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_retrain-audit"));
    c.env("RUST_LOG", "warn").env_remove("RETRAIN_AUDIT_OUT");
    c
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Relative path -> bytes for every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn assert_same_tree(a: &Path, b: &Path) {
    let (sa, sb) = (snapshot(a), snapshot(b));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{k} differs between {} and {}", a.display(), b.display());
    }
}

const SMALL_RUN: &str = "\
synth.n_patients = 30
synth.weeks_max = 10
synth.seed = 4
strategies = none,last,subset,full
n_batches = 3
holdout_fraction = 0.2
n_seeds = 2
bootstrap = 4
rashomon.m = 3
seed = 8
";

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.kv", &format!("{SMALL_RUN}foo = 1\n"));
    let out = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`foo`"), "{err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn missing_files_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["run", "--config"]).arg(tmp.path().join("absent.kv")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let cfg = write_config(tmp.path(), "run.kv", "input.weekly = nowhere.csv\n");
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));

    let out = bin().args(["featurize", "--input"]).arg(tmp.path().join("cgm.csv")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().args(["report", "--ledger"]).arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_usage_exits_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["run", "--threads", "2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupted_ledger_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ledger");
    fs::create_dir(&dir).unwrap();
    for f in ["ledger.json", "instances.csv", "phases.csv"] {
        fs::copy(fixtures().join("ledger").join(f), dir.join(f)).unwrap();
    }
    let text = fs::read_to_string(fixtures().join("ledger").join("ledger.csv")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let dup = lines[1];
    lines.insert(1, dup);
    fs::write(dir.join("ledger.csv"), lines.join("\n") + "\n").unwrap();
    let out = bin().args(["report", "--ledger"]).arg(&dir).arg("--out").arg(tmp.path().join("r")).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn report_on_fixture_has_table1_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("report");
    run_ok(bin().args(["report", "--ledger"]).arg(fixtures().join("ledger")).arg("--out").arg(&out_dir));
    let text = fs::read_to_string(out_dir.join("table1.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[3..8], &["av_auc", "delta_auc", "eo", "dp", "oa"]);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    for schema in ["prospective", "retrospective"] {
        let strategies: Vec<&str> = rows.iter().filter(|r| r[0] == schema && r[1] == "sex").map(|r| r[2]).collect();
        assert_eq!(strategies, ["none", "last", "subset", "full"]);
    }
    for r in &rows {
        for cell in &r[3..8] {
            assert!(cell.parse::<f64>().is_ok() || cell.starts_with("undefined:"), "{cell}");
        }
    }
    for f in ["table2.csv", "summary.csv", "plot_data.csv", "phase_reports.json", "individuals.csv"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    let plot = fs::read_to_string(out_dir.join("plot_data.csv")).unwrap();
    assert!(plot.starts_with("schema,attribute,phase,strategy,metric,mean,ci_lo,ci_hi"));
    assert!(!plot.contains('\r'));
    // prospective flip rate is not defined and must not read as zero
    assert!(plot.lines().any(|l| l.contains(",flip_rate,undefined:")));
}

#[test]
fn fixture_is_reproduced_and_report_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    run_ok(
        bin()
            .args(["run", "--config"])
            .arg(fixtures().join("fixture_run.kv"))
            .arg("--out")
            .arg(&run_dir),
    );
    assert_same_tree(&run_dir.join("ledger"), &fixtures().join("ledger"));
    let again = tmp.path().join("again");
    run_ok(bin().args(["report", "--ledger"]).arg(&run_dir).arg("--out").arg(&again));
    assert_same_tree(&run_dir.join("report"), &again);
}

#[test]
fn runs_are_identical_across_repeats_threads_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.kv", SMALL_RUN);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    let m = tmp.path().join("m");
    run_ok(bin().args(["run", "--threads", "1", "--config"]).arg(&cfg).arg("--out").arg(&a));
    run_ok(bin().args(["run", "--threads", "1", "--config"]).arg(&cfg).arg("--out").arg(&b));
    run_ok(bin().args(["run", "--threads", "3", "--config"]).arg(&cfg).arg("--out").arg(&c));
    assert_same_tree(&a, &b);
    assert_same_tree(&a, &c);
    run_ok(bin().args(["run", "--manifest"]).arg(a.join("manifest.json")).arg("--out").arg(&m));
    assert_same_tree(&a, &m);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], "8");
    assert_eq!(manifest["config"]["protected"], "sex");
    assert_eq!(manifest["config"]["synth.n_patients"], "30");
    assert!(manifest["input"]["ground_truth"]["coefficients"].is_array());
}

#[test]
fn env_var_sets_default_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.kv", SMALL_RUN);
    let target = tmp.path().join("from_env");
    run_ok(bin().args(["run", "--config"]).arg(&cfg).env("RETRAIN_AUDIT_OUT", &target));
    assert!(target.join("manifest.json").is_file());
    assert!(target.join("ledger").join("ledger.csv").is_file());
}

#[test]
fn synth_then_run_on_weekly_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_config(tmp.path(), "spec.kv", "n_patients = 30\nweeks_max = 10\nseed = 4\n");
    let synth = tmp.path().join("synth");
    run_ok(bin().args(["synth", "--config"]).arg(&spec).arg("--out").arg(&synth));
    for f in ["weekly.csv", "meta.csv", "manifest.json"] {
        assert!(synth.join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(synth.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["ground_truth"]["coefficients"].as_array().unwrap().len(), 9);

    let body = SMALL_RUN
        .lines()
        .filter(|l| !l.starts_with("synth."))
        .collect::<Vec<_>>()
        .join("\n");
    let cfg = write_config(tmp.path(), "run.kv", &format!("input.weekly = synth/weekly.csv\nprotected = sex,age\n{}\n", body.replace("protected = sex\n", "")));
    let out = tmp.path().join("out");
    run_ok(bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out));
    let t1 = fs::read_to_string(out.join("report").join("table1.csv")).unwrap();
    assert!(t1.lines().any(|l| l.starts_with("retrospective,age,full,")));
    assert!(out.join("report").join("equity_age.csv").is_file());
}

#[test]
fn synth_cgm_then_featurize() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_config(
        tmp.path(),
        "spec.kv",
        "n_patients = 3\nweeks_min = 2\nweeks_max = 2\noutput = cgm\nseed = 2\n",
    );
    let synth = tmp.path().join("synth");
    run_ok(bin().args(["synth", "--config"]).arg(&spec).arg("--out").arg(&synth));
    assert!(synth.join("cgm.csv").is_file());
    let weekly = tmp.path().join("w").join("weekly.csv");
    run_ok(
        bin()
            .args(["featurize", "--input"])
            .arg(synth.join("cgm.csv"))
            .arg("--meta")
            .arg(synth.join("meta.csv"))
            .arg("--out")
            .arg(&weekly)
            .args(["--severe-hyper", "240"]),
    );
    let text = fs::read_to_string(&weekly).unwrap();
    assert!(text.starts_with("patient_id,week_start,tir,"));
    assert!(text.lines().count() >= 4, "{text}");
}
