use std::path::Path;

use nsqt::cli::{run_command, CHECKPOINT_FILE, CONFIG_FILE, CURVE_FILE, METRICS_FILE, SENTENCES_FILE, VARIANCE_FILE};

const SMALL: &str = "d_model = 8\nd_hidden = 16\nvocab_size = 12\ntrain_size = 40\nvalid_size = 10\ntest_size = 5\n\
task_min_len = 2\ntask_max_len = 5\nmax_steps = 6\neval_every = 3\nbatch_size = 8\nwarmup = 2\n";

fn run(line: &str) -> i32 {
    let argv: Vec<String> = line.split_whitespace().map(String::from).collect();
    run_command(&argv)
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    std::fs::write(&path, SMALL).unwrap();
    path.display().to_string()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn train_ce_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&format!("train-ce --config {cfg} --seed 1 --out {}", a.display())), 0);
    assert_eq!(run(&format!("train-ce --config {cfg} --seed 1 --out {}", b.display())), 0);
    assert_eq!(read(a.join(METRICS_FILE)), read(b.join(METRICS_FILE)));
    assert!(read(a.join(CONFIG_FILE)).contains("d_model = 8"));
}

#[test]
fn finetune_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let ce = dir.path().join("ce");
    let rl = dir.path().join("rl");
    assert_eq!(run(&format!("train-ce --config {cfg} --out {}", ce.display())), 0);
    let ckpt = ce.join(CHECKPOINT_FILE);
    assert_eq!(
        run(&format!("finetune-rl --config {cfg} --checkpoint {} --n 2 --out {}", ckpt.display(), rl.display())),
        0
    );
    assert!(rl.join(SENTENCES_FILE).is_file());
    assert_eq!(run(&format!("report --out {}", rl.display())), 0);
    let curve = read(rl.join(CURVE_FILE));
    let evals = read(rl.join(METRICS_FILE)).lines().filter(|l| l.contains(",valid,gleu,")).count();
    assert_eq!(curve.lines().count(), evals + 1);

    let before: Vec<String> = ["curve.csv", "buckets.csv", "variance_sweep.csv", "summary.txt"]
        .iter()
        .map(|f| read(rl.join(f)))
        .collect();
    assert_eq!(run(&format!("report --out {}", rl.display())), 0);
    for (f, old) in ["curve.csv", "buckets.csv", "variance_sweep.csv", "summary.txt"].iter().zip(before) {
        assert_eq!(read(rl.join(f)), old, "{f} changed");
    }
    let buckets = read(rl.join("buckets.csv"));
    let covered: usize = buckets
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(covered, 10);
}

#[test]
fn decode_evaluate_distill_topk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let ar = dir.path().join("ar");
    assert_eq!(run(&format!("train-ce --config {cfg} --model ar --out {}", ar.display())), 0);
    let ckpt = ar.join(CHECKPOINT_FILE).display().to_string();
    let out = dir.path().join("x").display().to_string();
    assert_eq!(run(&format!("decode --config {cfg} --checkpoint {ckpt} --out {out}")), 0);
    assert_eq!(read(Path::new(&out).join("hypotheses.txt")).lines().count(), 10);
    assert_eq!(run(&format!("evaluate --config {cfg} --checkpoint {ckpt} --eval_split test --out {out}")), 0);
    assert_eq!(read(Path::new(&out).join(SENTENCES_FILE)).lines().count(), 6);
    assert_eq!(run(&format!("distill --config {cfg} --teacher {ckpt} --out {out}")), 0);
    assert_eq!(read(Path::new(&out).join("distill.tgt")).lines().count(), 40);
    assert_eq!(run(&format!("topk-stats --config {cfg} --checkpoint {ckpt} --k 1,5,12 --out {out}")), 0);
    let table = read(Path::new(&out).join("topk.csv"));
    assert!(table.lines().last().unwrap().starts_with("12,1,"));
    assert_eq!(run(&format!("finetune-rl --config {cfg} --checkpoint {ckpt} --out {out}")), 2);
}

#[test]
fn estimator_bench_has_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display();
    assert_eq!(run(&format!("estimator-bench --k 0,1,5,10 --repetitions 20 --n 2 --out {out}")), 0);
    let csv = read(dir.path().join(VARIANCE_FILE));
    let ks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["0", "1", "5", "10"]);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run("bogus"), 1);
    assert_eq!(run("train-ce --config /no/such/file.cfg"), 1);
    assert_eq!(run("train-ce --learning_rate 3"), 1);
}
