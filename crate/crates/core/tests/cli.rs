use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dgp-rtn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn dgp-rtn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, text).unwrap();
        path
    }

    fn gen(&self, name: &str, count: usize, seed: u64, config: Option<&Path>) -> PathBuf {
        let out = self.path(name);
        let (count, seed) = (count.to_string(), seed.to_string());
        let mut args = vec!["gen", "--out", p(&out), "--count", &count, "--seed", &seed];
        if let Some(c) = config {
            args.extend(["--config", p(c)]);
        }
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    }
}

const SHORT_TRAIN: &str = "[train]\nlr = 0.05\nmomentum = 0.9\nclip_norm = 1.0\nbeta = 1.0\nepochs = 2\nbatch_size = 4\n";

#[test]
fn gen_is_deterministic_and_writes_a_manifest() {
    let f = Fixture::new();
    let a = f.gen("a.jsonl", 5, 3, None);
    let b = f.gen("b.jsonl", 5, 3, None);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("a.jsonl.run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["seed"], 3);
}

#[test]
fn gen_rejects_zero_count() {
    let f = Fixture::new();
    let out = f.path("x.jsonl");
    let o = run(&["gen", "--out", p(&out), "--count", "0"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["train", "--bogus"])), 2);
    assert_eq!(code(&run(&["nonsense"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn unknown_config_key_is_refused() {
    let f = Fixture::new();
    let cfg = f.write("c.toml", "[train]\nlearning_rate = 0.1\n");
    let o = run(&["gen", "--config", p(&cfg), "--out", p(&f.path("d.jsonl")), "--count", "1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn missing_or_corrupt_files_exit_3() {
    let f = Fixture::new();
    let data = f.gen("d.jsonl", 2, 1, None);
    let missing = f.path("none.json");
    let o = run(&["eval", "--ckpt", p(&missing), "--data", p(&data), "--out", p(&f.path("e.csv"))]);
    assert_eq!(code(&o), 3);

    let broken = f.write("broken.jsonl", "{\"id\": \"x\"\n");
    let o = run(&["train", "--data", p(&broken), "--out", p(&f.path("run"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn verify_reports_every_check() {
    let f = Fixture::new();
    let out = f.path("v.csv");
    let o = run(&["verify", "--out", p(&out), "--n", "1000000", "--n", "100000"]);
    let text = fs::read_to_string(&out).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rows.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 30 + 4 + 2 + 2 + 3);
    let failed: Vec<_> = rows.iter().filter(|r| &r[4] == "false").map(|r| r[1].to_owned()).collect();
    // The proxy at m = 0.4 is a known miss; everything else holds.
    assert_eq!(failed, ["m=0.4 n=10000 continuity-corrected"]);
    assert_eq!(code(&o), 1);
    assert!(f.path("v.csv.run.json").exists());
}

#[test]
fn verify_perturbation_fails_theorem1_rows() {
    let f = Fixture::new();
    let out = f.path("v.csv");
    let o = run(&["verify", "--out", p(&out), "--perturb", "0.001"]);
    assert_eq!(code(&o), 1);
    let text = fs::read_to_string(&out).unwrap();
    let t1: Vec<_> = text.lines().filter(|l| l.starts_with("theorem1_argmin")).collect();
    assert_eq!(t1.len(), 30);
    assert!(t1.iter().all(|l| l.ends_with(",false")));
}

fn metrics(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn eval_rows(path: &Path) -> Vec<(String, String)> {
    metrics(path).iter().map(|r| (r[0].to_owned(), r[1].to_owned())).collect()
}

#[test]
fn train_then_eval_reproduces_logged_metrics() {
    let f = Fixture::new();
    let cfg = f.write("c.toml", SHORT_TRAIN);
    let train = f.gen("train.jsonl", 8, 1, None);
    let test = f.gen("test.jsonl", 4, 2, None);
    let run_dir = f.path("run");
    let o = run(&[
        "train", "--config", p(&cfg), "--data", p(&train), "--test", p(&test), "--out", p(&run_dir), "--threads", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = metrics(&run_dir.join("metrics.csv"));
    assert_eq!(rows.len(), 3);
    for e in 0..3 {
        assert!(run_dir.join(format!("checkpoints/epoch-{e:03}.json")).exists());
        assert!(run_dir.join(format!("checkpoints/epoch-{e:03}.bin")).exists());
    }
    assert!(run_dir.join("run.json").exists());

    let last = &rows[2];
    let ckpt = run_dir.join(&last[15]);
    let out = f.path("eval.csv");
    let o = run(&["eval", "--ckpt", p(&ckpt), "--data", p(&test), "--mode", "frames", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let got = eval_rows(&out);
    let want = [("ce", 7), ("kl_edges", 8), ("kl_transform", 9), ("total", 10), ("accuracy", 11)];
    for (name, col) in want {
        let row = got.iter().find(|(k, _)| k == name).unwrap();
        assert_eq!(row.1, last[col], "{name}");
    }

    // A second identical run gives identical metrics.
    let again = f.path("run2");
    let o = run(&["train", "--config", p(&cfg), "--data", p(&train), "--test", p(&test), "--out", p(&again)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(run_dir.join("metrics.csv")).unwrap(), fs::read(again.join("metrics.csv")).unwrap());
    assert_eq!(
        fs::read(run_dir.join("checkpoints/epoch-002.bin")).unwrap(),
        fs::read(again.join("checkpoints/epoch-002.bin")).unwrap()
    );
}

#[test]
fn eval_refuses_mismatched_data() {
    let f = Fixture::new();
    let cfg = f.write("c.toml", "[train]\nepochs = 0\n");
    let train = f.gen("train.jsonl", 2, 1, None);
    let run_dir = f.path("run");
    assert_eq!(code(&run(&["train", "--config", p(&cfg), "--data", p(&train), "--out", p(&run_dir)])), 0);
    let wide = f.write("wide.toml", "[data]\ndim = 5\n");
    let other = f.gen("other.jsonl", 2, 1, Some(&wide));
    let ckpt = run_dir.join("checkpoints/epoch-000.json");
    let o = run(&["eval", "--ckpt", p(&ckpt), "--data", p(&other), "--out", p(&f.path("e.csv"))]);
    assert_eq!(code(&o), 2);
    assert!(!f.path("e.csv").exists());
}

#[test]
fn eval_relations_on_an_untrained_model_is_near_chance() {
    let f = Fixture::new();
    let cfg = f.write("c.toml", "[train]\nepochs = 0\n");
    let data = f.gen("d.jsonl", 200, 9, None);
    let run_dir = f.path("run");
    assert_eq!(code(&run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run_dir)])), 0);
    let out = f.path("rel.csv");
    let ckpt = run_dir.join("checkpoints/epoch-000.json");
    let o = run(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--mode", "relations", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let rows = eval_rows(&out);
    let err: f64 = rows.iter().find(|(k, _)| k == "balanced_error").unwrap().1.parse().unwrap();
    assert!((err - 0.5).abs() < 0.06, "balanced error {err}");
}

#[test]
fn export_two_utterance_window() {
    let f = Fixture::new();
    let two = f.write("two.toml", "[data]\nutterances = 2\n");
    let data = f.gen("d.jsonl", 1, 1, Some(&two));
    let cfg = f.write("c.toml", "[train]\nepochs = 0\n");
    let run_dir = f.path("run");
    assert_eq!(code(&run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run_dir)])), 0);
    let ckpt = run_dir.join("checkpoints/epoch-000.json");
    let dot = f.path("g.dot");
    let o = run(&["export-graph", "--ckpt", p(&ckpt), "--data", p(&data), "--conversation", "s1-00000", "--out", p(&dot)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&dot).unwrap();
    assert_eq!(text.matches("label=\"u").count(), 2);
    assert_eq!(text.matches("->").count(), 1);

    let json = f.path("g.json");
    let o = run(&[
        "export-graph", "--ckpt", p(&ckpt), "--data", p(&data), "--conversation", "s1-00000", "--format", "json", "--out",
        p(&json),
    ]);
    assert_eq!(code(&o), 0);
    let g: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let edge = &g["edges"][0];
    for key in ["m", "m0", "alpha_mean", "s_mean", "alpha_bar_mean"] {
        assert!(edge[key].is_f64(), "{key}");
    }
    assert_eq!(g["nodes"].as_array().unwrap().len(), 2);

    let o = run(&["export-graph", "--ckpt", p(&ckpt), "--data", p(&data), "--conversation", "nope", "--out", p(&dot)]);
    assert_eq!(code(&o), 2);
}
