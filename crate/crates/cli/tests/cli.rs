use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
normals_per_texture = 3
anomalies_per_category = 3
pretrain_steps = 4
adapter_steps = 2
batch_size = 4
samples = 12
sweep_samples = 2
segmenter_steps = 2
eval_sweep = false
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defectsynth"))
        .args(args)
        .arg("--out")
        .arg(dir.join("run"))
        .arg("--config")
        .arg(dir.join("tiny.conf"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn defectsynth")
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.conf"), format!("{TINY}{extra}")).unwrap();
    dir
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let dir = setup("");
    assert_eq!(code(&run(dir.path(), &["gen-data"])), 0);
    let refused = run(dir.path(), &["gen-data"]);
    assert_eq!(code(&refused), 2);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    assert_eq!(code(&run(dir.path(), &["gen-data", "--force"])), 0);
}

#[test]
fn missing_dataset_is_a_validation_error() {
    let dir = setup("");
    assert_eq!(code(&run(dir.path(), &["pretrain-base"])), 2);
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = setup("no_such_key = 1\n");
    assert_eq!(code(&run(dir.path(), &["config"])), 2);
    let dir = setup("dropout = 0.5\n");
    assert_eq!(code(&run(dir.path(), &["config"])), 2);
}

#[test]
fn printed_config_loads_back() {
    let dir = setup("");
    let out = run(dir.path(), &["config", "--seed", "17"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 17") && text.contains("samples = 12"));
    fs::write(dir.path().join("tiny.conf"), &text).unwrap();
    let again = run(dir.path(), &["config"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn sampling_with_gamma_but_no_adapter_is_rejected() {
    let dir = setup("");
    assert_eq!(code(&run(dir.path(), &["gen-data"])), 0);
    assert_eq!(code(&run(dir.path(), &["pretrain-base"])), 0);
    let out = run(dir.path(), &["sample"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = setup("");
    for stage in [
        "gen-data",
        "pretrain-base",
        "train-adapter",
        "sample",
        "eval",
    ] {
        let out = run(dir.path(), &[stage]);
        assert_eq!(
            code(&out),
            0,
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let root = dir.path().join("run");
    for file in [
        "base.ckpt",
        "adapter.ckpt",
        "adapter_log.tsv",
        "samples/manifest.tsv",
        "samples/contact_sheet.png",
        "report.txt",
        "report.tsv",
    ] {
        assert!(root.join(file).exists(), "missing {file}");
    }
    let report = fs::read_to_string(root.join("report.txt")).unwrap();
    assert!(report.contains("pixel_auroc"));
}

#[test]
fn thread_flag_does_not_change_checkpoints() {
    let dir = setup("");
    let bytes = |threads: &str| {
        let root = dir.path().join(format!("run{threads}"));
        for stage in ["gen-data", "pretrain-base", "train-adapter"] {
            let out = Command::new(env!("CARGO_BIN_EXE_defectsynth"))
                .args([stage, "--threads", threads, "--config"])
                .arg(dir.path().join("tiny.conf"))
                .arg("--out")
                .arg(&root)
                .env("RUST_LOG", "warn")
                .output()
                .unwrap();
            assert_eq!(code(&out), 0);
        }
        (
            fs::read(root.join("base.ckpt")).unwrap(),
            fs::read(root.join("adapter.ckpt")).unwrap(),
        )
    };
    assert!(bytes("1") == bytes("3"));
}
