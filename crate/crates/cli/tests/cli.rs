use std::path::Path;
use std::process::{Command, Output};

fn glcon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glcon"))
        .args(args)
        .env_remove("GLCON_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "model.image_size=16",
    "--set",
    "model.image_stages=[4, 8]",
    "--set",
    "model.d_enc=8",
    "--set",
    "model.d_proj=8",
    "--set",
    "model.d_ss=8",
    "--set",
    "synthetic.train_samples=24",
    "--set",
    "synthetic.eval_samples=16",
    "--set",
    "train.batch_size=8",
    "--set",
    "train.epochs=1",
];

fn with_tiny<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(TINY).chain(tail).copied().collect()
}

fn mean_auroc(text: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix("mean AUROC"))
        .unwrap_or_else(|| panic!("no mean AUROC line in {text}"))
        .trim()
        .to_string()
}

#[test]
fn gradcheck_exits_zero() {
    let o = glcon(&["gradcheck", "--trials", "5"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains(", 0 failed"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(glcon(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(glcon(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let o = glcon(&["eval", "--predictions", "/nonexistent/p.csv", "--labels", "/nonexistent/l.csv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn promptgen_lists_both_query_sets() {
    let o = glcon(&["promptgen", "--scheme", "basic", "--class", "beta-mass"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "beta-mass\tpositive\tbeta-mass\nbeta-mass\tnegative\tNo beta-mass\n");
    assert_eq!(glcon(&["promptgen", "--class", "nope"]).status.code(), Some(1));
}

#[test]
fn synthesize_prints_one_sentence_per_mention() {
    let o = glcon(&["synthesize", "--labels", "1,0,-1,-2,-2,-2", "--seed", "4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().all(|l| l.ends_with('.')));
    assert_eq!(glcon(&["synthesize", "--labels", "1,0"]).status.code(), Some(1));
}

fn generate(dir: &Path) {
    let out = dir.join("data");
    let args = with_tiny(&["generate-synthetic"], &["--out", out.to_str().unwrap()]);
    let o = glcon(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_after_infer_reproduces_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let data = dir.path().join("data");
    let train_set = format!("data.train={}", data.join("train.jsonl").display());
    let run = dir.path().join("run");
    let o = glcon(&with_tiny(&["train", "--set", &train_set], &["--out", run.to_str().unwrap()]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let checkpoint = run.join("checkpoints").join("epoch_001");
    let preds = dir.path().join("preds.csv");
    let eval_set = data.join("eval.jsonl");
    let combined = glcon(&[
        "infer",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--dataset",
        eval_set.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
        "--eval",
    ]);
    assert!(combined.status.success(), "{}", String::from_utf8_lossy(&combined.stderr));

    for labels in [data.join("eval_labels.csv"), eval_set.clone()] {
        let separate = glcon(&[
            "eval",
            "--predictions",
            preds.to_str().unwrap(),
            "--labels",
            labels.to_str().unwrap(),
        ]);
        assert!(separate.status.success(), "{}", String::from_utf8_lossy(&separate.stderr));
        assert_eq!(mean_auroc(&stdout(&separate)), mean_auroc(&stdout(&combined)));
    }
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_glcon"))
        .args(with_tiny(&["generate-synthetic"], &[]))
        .env("GLCON_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(target.join("train.jsonl").exists());
    assert!(target.join("eval_labels.csv").exists());
}

#[test]
fn ablation_recipe_has_five_distinct_runs() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes/ablation.toml");
    let recipe = glcon_core::config::Recipe::load(&path).unwrap();
    let names: Vec<&str> = recipe.runs.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(
        names,
        ["global_only", "local_global", "local_global_simsiam", "local_global_mirrored", "full"]
    );
    let mut weights: Vec<String> = recipe.runs.iter().map(|r| format!("{:?}", r.weights)).collect();
    assert_eq!(recipe.runs[0].weights, [0.0, 1.0, 0.0, 0.0]);
    assert_eq!(recipe.runs[4].weights, [0.5, 0.5, 0.5, 0.25]);
    weights.sort();
    weights.dedup();
    assert_eq!(weights.len(), 5);
}
