use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_birdnet");

/// Three classes; class `c` drives features `2c` and `2c+1` high, the rest
/// is deterministic clutter.
fn write_dataset(dir: &Path) -> PathBuf {
    let d = 8;
    let mut text = String::from("id");
    for j in 0..d {
        let _ = write!(text, ",f{j}");
    }
    text.push_str(",site,class\n");
    for i in 0..180usize {
        let c = i % 3;
        let _ = write!(text, "m{i}");
        for j in 0..d {
            let jitter = ((i * 7919 + j * 104_729) % 997) as f64 / 997.0;
            let v = if j < 6 {
                let high = j / 2 == c;
                if high { 1.0 + jitter } else { -1.0 - jitter }
            } else {
                4.0 * jitter - 2.0
            };
            let _ = write!(text, ",{v:.6}");
        }
        let _ = writeln!(text, ",lab{},{}", i % 2, ["north", "south", "east"][c]);
    }
    let path = dir.join("data.csv");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: String,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = write_dataset(&root).display().to_string();
        Fixture { _dir: dir, root, data }
    }

    fn out(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    /// Common flags for a quick run.
    fn args<'a>(&'a self, cmd: &'a str, out: &'a str) -> Vec<&'a str> {
        vec![
            cmd, "--data", &self.data, "--id-column", "id", "--drop", "site", "--mu", "3", "--epochs", "25",
            "--learning-rate", "0.01", "--out", out,
        ]
    }
}

#[test]
fn mine_writes_edges_dot_and_a_reusable_manifest() {
    let fx = Fixture::new();
    let out = fx.out("mine");
    let stdout = ok(&fx.args("mine", &out));
    assert!(stdout.contains("implications among 8 features"), "{stdout}");
    let edges = read(format!("{out}/edges.tsv"));
    assert!(edges.starts_with("source\ttarget\ttype\tlog_p"));
    assert!(edges.lines().count() > 1);
    assert!(read(format!("{out}/graph.dot")).starts_with("digraph"));
    assert!(read(format!("{out}/thresholds.tsv")).contains("f0\t"));

    // Re-running from the manifest alone reproduces the run.
    let manifest = format!("{out}/manifest.txt");
    let again = fx.out("mine-again");
    ok(&["mine", "--config", &manifest, "--out", &again]);
    assert_eq!(edges, read(format!("{again}/edges.tsv")));
}

#[test]
fn flags_override_config_values() {
    let fx = Fixture::new();
    let cfg = fx.root.join("run.cfg");
    std::fs::write(&cfg, format!("data = {}\nid_column = id\ndrop = site\nseed = 5\nmu = 4\n", fx.data)).unwrap();
    let out = fx.out("cfg");
    ok(&["mine", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", &out]);
    let manifest = read(format!("{out}/manifest.txt"));
    assert!(manifest.contains("# command: mine"));
    assert!(manifest.contains("\nseed = 7\n"), "{manifest}");
    assert!(manifest.contains("\nmu = 4\n"), "{manifest}");
    assert!(manifest.contains("\np_star = 1e-6\n"), "{manifest}");
}

#[test]
fn train_explain_and_export() {
    let fx = Fixture::new();
    let out = fx.out("train");
    let mut args = fx.args("train", &out);
    args.push("--matched-mlp");
    let stdout = ok(&args);
    assert!(stdout.contains("birdnet: best epoch"), "{stdout}");
    assert!(stdout.contains("matched mlp:"), "{stdout}");
    let model = format!("{out}/model.json");
    assert!(read(format!("{out}/history.csv")).starts_with("epoch,train_loss,val_loss,val_acc\n"));
    assert!(read(format!("{out}/construction.txt")).contains("yes"));
    assert!(Path::new(&format!("{out}/matched_model.json")).exists());

    let ex = fx.out("explain");
    let text = ok(&[
        "explain", "--data", &fx.data, "--id-column", "id", "--drop", "site", "--model", &model, "--instance", "m4",
        "--class", "south", "--out", &ex,
    ]);
    assert!(text.contains("instance: m4"), "{text}");
    assert!(text.contains("⇝ class = south ("), "{text}");
    assert_eq!(text, read(format!("{ex}/trace.txt")));
    // A row number works when no id matches.
    ok(&["explain", "--data", &fx.data, "--drop", "site,id", "--model", &model, "--instance", "4", "--out", &ex]);

    let g = fx.out("graphs");
    let listing = ok(&["export-graph", "--model", &model, "--out", &g]);
    assert!(listing.contains("layer0.dot"));
    assert!(read(format!("{g}/layer0.dot")).starts_with("digraph"));

    let mm = fx.out("mm");
    let table = ok(&["matched-mlp", "--model", &model, "--out", &mm]);
    assert!(table.contains("model,width,bir_active,total_active\n"), "{table}");
    assert!(Path::new(&format!("{mm}/matched_model.json")).exists());
}

#[test]
fn eval_is_reproducible() {
    let fx = Fixture::new();
    let a = fx.out("eval-a");
    let b = fx.out("eval-b");
    let mut args = fx.args("eval", &a);
    args.extend(["--cv", "3"]);
    let table = ok(&args);
    assert!(table.contains("BIRDNet"), "{table}");
    let mut args = fx.args("eval", &b);
    args.extend(["--cv", "3", "--threads", "2"]);
    ok(&args);
    let csv = read(format!("{a}/cv_metrics.csv"));
    assert_eq!(csv, read(format!("{b}/cv_metrics.csv")));
    assert_eq!(read(format!("{a}/folds.txt")).lines().count(), 180);
}

#[test]
fn rules_are_written_per_class() {
    let fx = Fixture::new();
    let out = fx.out("rules");
    let stdout = ok(&fx.args("rules", &out));
    assert!(stdout.contains("held-out rows"), "{stdout}");
    let csv = read(format!("{out}/rules.csv"));
    assert!(csv.starts_with("class,unit,rule,type,precision,recall,lift,support\n"));
    for class in ["north", "south", "east"] {
        assert!(csv.contains(&format!("\n{class},")), "no rule for {class}");
    }
}

fn assert_one_line_failure(out: &Output, needle: &str) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains(needle), "{err}");
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let fx = Fixture::new();
    let out = fx.out("fail");
    assert_one_line_failure(&run(&["mine", "--data", "/no/such/file.csv", "--out", &out]), "file.csv");
    assert_one_line_failure(&run(&["mine", "--out", &out]), "--data");
    assert_one_line_failure(&run(&["mine", "--data", &fx.data, "--out", &out]), "non-numeric");
    assert_one_line_failure(
        &run(&["mine", "--data", &fx.data, "--drop", "site,id", "--pi", "0.7", "--out", &out]),
        "pi",
    );

    let bad_flag = run(&["mine", "--no-such-flag"]);
    assert!(!bad_flag.status.success());
    assert!(String::from_utf8_lossy(&bad_flag.stderr).contains("Usage"));

    let cfg = fx.root.join("bad.cfg");
    std::fs::write(&cfg, "mu = 3\nwidth = 9\n").unwrap();
    assert_one_line_failure(&run(&["mine", "--config", cfg.to_str().unwrap(), "--out", &out]), "width");
}
