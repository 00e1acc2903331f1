use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use defectsynth::commands::{self, RunDir};
use defectsynth::config::RunConfig;

fn tiny() -> RunConfig {
    RunConfig {
        normals_per_texture: 3,
        anomalies_per_category: 3,
        pretrain_steps: 6,
        adapter_steps: 3,
        batch_size: 4,
        samples: 12,
        sweep_samples: 2,
        segmenter_steps: 3,
        eval_sweep: false,
        ..RunConfig::default()
    }
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

/// Whole pipeline in a pool of `threads` workers; returns every file it
/// wrote except the step logs, whose last column is wall time.
fn run_with(threads: usize) -> BTreeMap<PathBuf, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny();
    let run = RunDir::new(dir.path());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    pool.install(|| {
        commands::gen_data(&config, &run, false).unwrap();
        commands::pretrain_base(&config, &run).unwrap();
        commands::train_adapter_stage(&config, &run).unwrap();
        commands::sample_stage(&config, &run).unwrap();
        commands::eval_stage(&config, &run).unwrap();
    });
    let mut out = files(dir.path());
    out.retain(|p, _| !p.to_string_lossy().ends_with("_log.tsv"));
    out
}

#[test]
fn thread_count_does_not_change_any_output() {
    let serial = run_with(1);
    let parallel = run_with(4);
    assert_eq!(
        serial.keys().collect::<Vec<_>>(),
        parallel.keys().collect::<Vec<_>>()
    );
    for (path, bytes) in &serial {
        assert!(
            bytes == &parallel[path],
            "{} differs between thread counts",
            path.display()
        );
    }
    for expected in [
        "base.ckpt",
        "adapter.ckpt",
        "report.txt",
        "samples/00000.png",
        "data/manifest.tsv",
    ] {
        assert!(
            serial.contains_key(Path::new(expected)),
            "missing {expected}"
        );
    }
}
