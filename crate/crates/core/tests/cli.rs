use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use abe_core::evaluation::MetricsRecord;
use abe_core::experiment::read_metrics;

const TINY: &str = "\
synth.classes = 8
synth.samples_per_class = 8
synth.grid = 8x8
synth.site_size = 3
trunk = conv:4:3:relu,pool,conv:4:3:relu,pool
branch_point = 2
learners = 2
embedding_dim = 16
batch_size = 8
iterations = 20
eval_every = 10
recall_ks = 1,2
";

fn abe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abe"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run abe")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn trained(dir: &Path) -> PathBuf {
    let o = abe(dir, &["--config", "tiny.cfg", "--out", "run", "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("run")
}

#[test]
fn generate_is_deterministic_and_reports_census() {
    let (dir, _) = setup();
    fs::write(dir.path().join("spec.txt"), "classes = 4\nsamples_per_class = 5\n").unwrap();
    let a = abe(dir.path(), &["generate", "spec.txt", "a.abeds"]);
    let b = abe(dir.path(), &["generate", "spec.txt", "b.abeds"]);
    assert_eq!(code(&a), 0);
    assert_eq!(code(&b), 0);
    assert_eq!(fs::read(dir.path().join("a.abeds")).unwrap(), fs::read(dir.path().join("b.abeds")).unwrap());
    let text = stdout(&a);
    assert!(text.contains("N=20"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("census") && l.contains("0:5") && l.contains("3:5")), "{text}");
    let c = abe(dir.path(), &["--seed", "9", "generate", "spec.txt", "c.abeds"]);
    assert_eq!(code(&c), 0);
    assert_ne!(fs::read(dir.path().join("a.abeds")).unwrap(), fs::read(dir.path().join("c.abeds")).unwrap());
}

#[test]
fn train_then_eval_reproduces_best_record() {
    let (dir, _) = setup();
    let run = trained(dir.path());
    for f in ["config.cfg", "metrics.jsonl", "best.ckpt", "last.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let records = read_metrics(run.join("metrics.jsonl")).unwrap();
    assert_eq!(records.iter().map(|r| r.iter).collect::<Vec<_>>(), [0, 10, 20]);
    let best = abe_core::evaluation::best_checkpoint_selection(&records).unwrap().clone();

    for threads in ["1", "3"] {
        let out = format!("eval{threads}");
        let o = abe(dir.path(), &["--threads", threads, "--out", &out, "eval", "run/best.ckpt"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let text = fs::read_to_string(dir.path().join(&out).join("eval.json")).unwrap();
        let rec: MetricsRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(rec, best);
    }
}

#[test]
fn histogram_and_masks_write_files() {
    let (dir, _) = setup();
    trained(dir.path());
    let o = abe(dir.path(), &["histogram", "run/best.ckpt", "--prefix", "h/cos", "--bins", "8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for kind in ["pos", "neg", "self"] {
        let csv = fs::read_to_string(dir.path().join(format!("h/cos_{kind}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 9);
    }
    assert!(stdout(&o).contains("mean cosine"));

    let o = abe(dir.path(), &["--out", "m", "masks", "run/best.ckpt", "--samples", "0,5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let files = fs::read_dir(dir.path().join("m")).unwrap().count();
    assert_eq!(files, 2 * 2 + 2);
    let pgm = fs::read(dir.path().join("m/mean_l0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    // Test split: 4 classes x 8 samples.
    let o = abe(dir.path(), &["--out", "m", "masks", "run/best.ckpt", "--samples", "32"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn compare_writes_table() {
    let (dir, _) = setup();
    let o = abe(dir.path(), &["--config", "tiny.cfg", "--out", "cmp", "compare", "--variants", "single,abe"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("variant,learners,lambda_div,recall@1"));
    assert!(lines[1].starts_with("single,1,0,"));
    assert!(lines[2].starts_with("abe,2,1,"));
    assert!(dir.path().join("cmp/abe/metrics.jsonl").exists());
}

#[test]
fn exit_codes() {
    let (dir, _) = setup();
    let d = dir.path();
    assert_eq!(code(&abe(d, &["train"])), 2);
    assert_eq!(code(&abe(d, &["--config", "missing.cfg", "train"])), 2);
    assert_eq!(code(&abe(d, &["--config", "tiny.cfg", "--threads", "2", "train"])), 2);
    assert_eq!(code(&abe(d, &["--config", "tiny.cfg", "--threads", "0", "train"])), 2);
    assert_eq!(code(&abe(d, &["frobnicate"])), 2);
    fs::write(d.join("bad.cfg"), "learners = 3\n").unwrap();
    assert_eq!(code(&abe(d, &["--config", "bad.cfg", "train"])), 2);
    assert_eq!(code(&abe(d, &["eval", "none.ckpt"])), 3);
    fs::write(d.join("junk.ckpt"), b"junk").unwrap();
    let o = abe(d, &["eval", "junk.ckpt"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("abe: "));
    assert_eq!(code(&abe(d, &["--seed", "1", "eval", "junk.ckpt"])), 2);
    fs::write(d.join("nan.cfg"), format!("{TINY}learning_rate = 1e30\nnormalize = false\n")).unwrap();
    assert_eq!(code(&abe(d, &["--config", "nan.cfg", "--out", "nan", "train"])), 4);
}
