use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output};

use msgdas::config::{DatasetKind, SearchConfig};
use msgdas::persist::{read_genotype, read_metrics, Checkpoint};
use msgdas::run::{search_to_dir, OutputMode};
use msgdas_core::engine::SearchState;
use msgdas_core::searchspace::{Genotype, OpKind};

fn msgdas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msgdas")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A search small enough to finish in seconds.
fn small_config() -> SearchConfig {
    let mut cfg = SearchConfig::desk();
    cfg.data.synthetic.n = 32;
    cfg.data.synthetic.hw = 8;
    cfg.network.num_cells = 3;
    cfg.network.init_channels = 2;
    cfg.network.stem_multiplier = 1;
    cfg.search.batch_size = 8;
    cfg.search.epochs = 3;
    cfg.eval.epochs = 2;
    cfg.eval.batch_size = 8;
    cfg
}

fn write_config(dir: &Path, cfg: &SearchConfig) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&msgdas(&[])), 2);
    assert_eq!(code(&msgdas(&["frobnicate"])), 2);
    assert_eq!(code(&msgdas(&["search", "--bogus"])), 2);
    assert_eq!(code(&msgdas(&["search", "--dataset", "mnist"])), 2);
    assert_eq!(code(&msgdas(&["search", "--resume", "--force"])), 2);
    let help = msgdas(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["search", "derive", "inspect", "selftest", "eval"] {
        assert!(text.contains(sub), "{text}");
    }
}

#[test]
fn selftest_passes_on_a_correct_build() {
    let o = msgdas(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("PASS sampler exclusivity"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn search_writes_only_under_out_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    let out = tmp.path().join("runs").join("a");
    let o = msgdas(&["search", "--config", &cfg, "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["checkpoint.bin", "config.toml", "genotype.json", "metrics.csv"]);
    let mut top: Vec<String> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, ["runs", "small.toml"]);

    read_genotype(&out.join("genotype.json")).unwrap();
    let rows = read_metrics(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.iter().map(|m| m.epoch).collect::<Vec<_>>(), [1, 2, 3]);
    assert!(rows.iter().all(|m| m.skip_count_normal <= 8 && m.skip_count_reduce <= 8));

    let again = msgdas(&["search", "--config", &cfg, "--out", p(&out)]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    let forced = msgdas(&["search", "--config", &cfg, "--out", p(&out), "--force"]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));

    let o = msgdas(&["eval", "--config", &cfg, "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    let acc = eval["val_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(eval["train_loss"].as_array().unwrap().len(), 2);
    assert_eq!(code(&msgdas(&["eval", "--config", &cfg, "--out", p(&out)])), 1);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    let out = tmp.path().join("run");
    let o = msgdas(&["search", "--config", &cfg, "--k", "3", "--epochs", "1", "--seed", "7", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let used = SearchConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!((used.search.k, used.search.epochs, used.search.seed), (3, 1, 7));
    assert_eq!(used.out.as_deref(), Some(out.as_path()));
    assert_eq!(read_metrics(&out.join("metrics.csv")).unwrap().len(), 1);
}

#[test]
fn runtime_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = msgdas(&["search", "--dataset", "cifar10", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("cifar"), "{}", stderr(&o));
    let o = msgdas(&["search", "--k", "9", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    let o = msgdas(&["search", "--epochs", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--out"));
    let o = msgdas(&["inspect", "--checkpoint", p(&tmp.path().join("missing.bin"))]);
    assert_eq!(code(&o), 1);
}

fn zero_alpha_checkpoint(path: &Path) {
    let cfg = small_config();
    let spec = cfg.network.spec(2, 3);
    let state = SearchState::<f32>::new(spec, cfg.search.clone(), 2).unwrap();
    Checkpoint { config: cfg, state }.save(path).unwrap();
}

#[test]
fn derive_on_zero_logits_gives_the_tie_break_genotype() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("checkpoint.bin");
    zero_alpha_checkpoint(&ckpt);
    let out = tmp.path().join("derived");
    let o = msgdas(&["derive", "--checkpoint", p(&ckpt), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let g = read_genotype(&out.join("genotype.json")).unwrap();
    assert_eq!(g, Genotype::uniform([(0, OpKind::SkipConnect), (1, OpKind::SkipConnect)]));
    assert_eq!(code(&msgdas(&["derive", "--checkpoint", p(&ckpt), "--out", p(&out)])), 1);
    assert_eq!(code(&msgdas(&["derive", "--checkpoint", p(&ckpt), "--out", p(&out), "--force"])), 0);
}

#[test]
fn inspect_prints_counts_and_heat_map() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("checkpoint.bin");
    zero_alpha_checkpoint(&ckpt);

    let o = msgdas(&["inspect", "--checkpoint", p(&ckpt)]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("skip_connect normal 8 reduce 8"), "{text}");
    assert!(text.contains("0.1250"));

    let o = msgdas(&["inspect", "--checkpoint", p(&ckpt), "--format", "csv"]);
    assert_eq!(code(&o), 0);
    let csv = String::from_utf8_lossy(&o.stdout);
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 3 + 8 + 1);
    assert_eq!(header[3], "Zero");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 28);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let sum: f64 = f[3..11].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(f[11], "8");
    }
}

#[test]
fn resumed_search_matches_an_uninterrupted_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let cfg_path = write_config(tmp.path(), &cfg);
    let full = tmp.path().join("full");
    let cut = tmp.path().join("cut");
    assert_eq!(code(&msgdas(&["search", "--config", &cfg_path, "--out", p(&full)])), 0);

    // stop right after the first epoch's checkpoint
    let mut run_cfg = cfg.clone();
    run_cfg.out = Some(cut.clone());
    let stopped = catch_unwind(AssertUnwindSafe(|| {
        search_to_dir(&run_cfg, &cut, OutputMode::Fresh, |m| {
            if m.epoch == 1 {
                panic!("interrupted");
            }
        })
    }));
    assert!(stopped.is_err());
    assert_eq!(read_metrics(&cut.join("metrics.csv")).unwrap().len(), 1);
    assert!(!cut.join("genotype.json").exists());

    let o = msgdas(&["search", "--config", &cfg_path, "--out", p(&cut), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let strip = |dir: &Path| -> Vec<String> {
        read_metrics(&dir.join("metrics.csv"))
            .unwrap()
            .into_iter()
            .map(|mut m| {
                m.seconds = 0.0;
                format!("{m:?}")
            })
            .collect()
    };
    assert_eq!(strip(&full), strip(&cut));
    assert_eq!(
        fs::read(full.join("genotype.json")).unwrap(),
        fs::read(cut.join("genotype.json")).unwrap()
    );
    let (a, b) = (
        Checkpoint::load(&full.join("checkpoint.bin")).unwrap(),
        Checkpoint::load(&cut.join("checkpoint.bin")).unwrap(),
    );
    assert_eq!(a.state, b.state);

    let mut other = cfg.clone();
    other.search.k = 3;
    let other_path = tmp.path().join("other.toml");
    fs::write(&other_path, other.to_toml().unwrap()).unwrap();
    let o = msgdas(&["search", "--config", p(&other_path), "--out", p(&cut), "--resume"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn synthetic_is_the_default_dataset() {
    assert_eq!(SearchConfig::desk().data.dataset, DatasetKind::Synthetic);
}
