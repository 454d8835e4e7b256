//! End-to-end behaviour of the staged pipeline on the default configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use cope_core::corpus;
use cope_core::pipeline::{
    ablation_sweep, file_hash, DpoSummary, Pipeline, PipelineConfig, RunManifest, Stage,
    SweepAxis, TrainLog,
};
use tempfile::TempDir;

struct Shared {
    _tmp: TempDir,
    cfg: PipelineConfig,
    dir: PathBuf,
}

fn shared() -> &'static Shared {
    static RUN: OnceLock<Shared> = OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            run_root: tmp.path().display().to_string(),
            ..PipelineConfig::default()
        };
        let dir = tmp.path().join("main");
        Pipeline::open_at(cfg.clone(), dir.clone()).unwrap().run_all().unwrap();
        Shared { _tmp: tmp, cfg, dir }
    })
}

fn open_shared() -> Pipeline {
    let s = shared();
    Pipeline::open_at(s.cfg.clone(), s.dir.clone()).unwrap()
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A private copy of the shared run that a test may tamper with.
fn scratch_copy() -> (TempDir, Pipeline) {
    let s = shared();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("copy");
    copy_dir(&s.dir, &dir);
    let p = Pipeline::open_at(s.cfg.clone(), dir).unwrap();
    (tmp, p)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn shipped_config_is_the_default() {
    let cfg = PipelineConfig::load(&workspace_root().join("configs/default.conf")).unwrap();
    assert_eq!(cfg, PipelineConfig::default());
}

#[test]
fn shipped_corpus_matches_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let specs = corpus::default_user_specs(&PipelineConfig::default().corpus_config()).unwrap();
    corpus::gen_corpus(&specs, tmp.path()).unwrap();
    let fresh = files_under(tmp.path());
    let shipped = files_under(&workspace_root().join("data/corpus"));
    assert_eq!(fresh.keys().collect::<Vec<_>>(), shipped.keys().collect::<Vec<_>>());
    for (k, v) in &fresh {
        assert!(v == &shipped[k], "{} differs from the generator output", k.display());
    }
}

#[test]
fn sft_losses_do_not_increase() {
    let p = open_shared();
    let read = |name: &str| std::fs::read_to_string(p.report(name)).unwrap();
    let task: TrainLog = serde_json::from_str(&read("train_task.json")).unwrap();
    let users: BTreeMap<String, TrainLog> = serde_json::from_str(&read("train_user.json")).unwrap();
    assert_eq!(users.len(), 10);
    for (who, log) in std::iter::once(("tam".to_string(), &task)).chain(users.iter().map(|(k, v)| (k.clone(), v))) {
        for w in log.epoch_losses.windows(2) {
            assert!(w[1] <= w[0], "{who}: epoch loss rose {} -> {}", w[0], w[1]);
        }
    }
    assert!(task.epoch_losses.last().unwrap() < &task.epoch_losses[0]);
}

#[test]
fn dpo_increases_every_margin() {
    let p = open_shared();
    let text = std::fs::read_to_string(p.report("train_dpo.json")).unwrap();
    let summary: BTreeMap<String, DpoSummary> = serde_json::from_str(&text).unwrap();
    assert_eq!(summary.len(), 10);
    for (u, s) in &summary {
        assert!(s.triples > 0, "{u} has no preference pairs");
        assert!(s.margin_after > s.margin_before, "{u}: {} -> {}", s.margin_before, s.margin_after);
    }
}

#[test]
fn rerun_is_a_no_op() {
    let s = shared();
    // Sweep tests write under sweeps/ concurrently; stage outputs live elsewhere.
    let stage_files = || {
        let mut f = files_under(&s.dir);
        f.retain(|k, _| !k.starts_with("sweeps"));
        f
    };
    let before = stage_files();
    let mut p = open_shared();
    let m = p.run_all().unwrap();
    assert_eq!(Some(m), RunManifest::load(&s.dir).unwrap());
    assert_eq!(stage_files(), before);
}

#[test]
fn decode_rerun_leaves_checkpoints_alone() {
    let (_tmp, mut p) = scratch_copy();
    let ckpt_before = p.manifest().checkpoint_hashes();
    let users = p.users().unwrap();
    let decoded: Vec<Vec<u8>> = users.iter().map(|u| std::fs::read(p.decode_path(&u.user_id)).unwrap()).collect();
    for u in &users {
        std::fs::remove_file(p.decode_path(&u.user_id)).unwrap();
        std::fs::remove_file(p.trace_path(&u.user_id)).unwrap();
    }
    p.run_stage(Stage::Decode).unwrap();
    assert_eq!(p.manifest().checkpoint_hashes(), ckpt_before);
    for (k, h) in &ckpt_before {
        assert_eq!(&file_hash(&p.run_dir().join(k)).unwrap(), h);
    }
    for (u, bytes) in users.iter().zip(&decoded) {
        assert_eq!(&std::fs::read(p.decode_path(&u.user_id)).unwrap(), bytes);
    }
}

#[test]
fn tampered_checkpoint_is_detected() {
    let (_tmp, mut p) = scratch_copy();
    let tam = p.checkpoint("tam.bin");
    let mut bytes = std::fs::read(&tam).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&tam, bytes).unwrap();
    let err = p.run_stage(Stage::Decode).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn tampered_corpus_is_detected() {
    let (_tmp, mut p) = scratch_copy();
    let user = p.users().unwrap()[0].user_id.clone();
    let path = corpus::user_file(&p.corpus_dir(), &user, "test");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push('\n');
    std::fs::write(&path, text).unwrap();
    assert_eq!(p.run_stage(Stage::Eval).unwrap_err().exit_code(), 4);
}

#[test]
fn missing_upstream_is_a_stage_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        run_root: tmp.path().display().to_string(),
        ..PipelineConfig::default()
    };
    let mut p = Pipeline::open(cfg).unwrap();
    assert!(p.run_dir().starts_with(tmp.path()));
    p.run_stage(Stage::GenCorpus).unwrap();
    assert_eq!(p.run_stage(Stage::Decode).unwrap_err().exit_code(), 3);
}

#[test]
fn foreign_run_directory_is_rejected() {
    let s = shared();
    let cfg = PipelineConfig {
        decode_alpha: 0.5,
        ..s.cfg.clone()
    };
    let err = Pipeline::open_at(cfg, s.dir.clone()).err().unwrap();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn alpha_sweep_only_redecodes() {
    let mut p = open_shared();
    let values: Vec<String> = ["0", "0.1", "0.3"].map(String::from).to_vec();
    let rep = ablation_sweep(&mut p, SweepAxis::Alpha, &values).unwrap();
    assert_eq!(rep.rows.len(), 3);
    assert!(rep.rows.iter().all(|r| r.checkpoints == rep.rows[0].checkpoints));
    assert_eq!(rep.rows[0].checkpoints, p.manifest().checkpoint_hashes()
        .into_iter()
        .filter(|(k, _)| !k.contains("init") && !k.contains("vocab"))
        .map(|(k, v)| (k.trim_start_matches("checkpoints/").trim_end_matches(".bin").to_string(), v))
        .collect());

    let eval = p.eval_report().unwrap();
    // α = 0 with no penalty is greedy decoding of the DPO adapter.
    let mut dpo = eval.method("dpo").unwrap().clone();
    dpo.method = "cope".into();
    assert_eq!(rep.rows[0].aggregate, dpo);
    // The configured α reproduces the main evaluation.
    assert_eq!(&rep.rows[2].aggregate, eval.method("cope").unwrap());
    assert!(p.run_dir().join("sweeps/alpha.csv").exists());
}

#[test]
fn beta_sweep_retrains_dpo() {
    let mut p = open_shared();
    let values: Vec<String> = ["0.1", "3.0"].map(String::from).to_vec();
    let rep = ablation_sweep(&mut p, SweepAxis::Beta, &values).unwrap();
    assert_eq!(rep.rows.len(), 2);
    let dpo_hashes = |i: usize| -> Vec<&String> {
        rep.rows[i]
            .checkpoints
            .iter()
            .filter(|(k, _)| k.starts_with("dpo/"))
            .map(|(_, v)| v)
            .collect()
    };
    assert_eq!(dpo_hashes(0).len(), 10);
    assert!(dpo_hashes(0).iter().zip(dpo_hashes(1)).all(|(a, b)| *a != b));
    // Upstream checkpoints are shared by every row.
    for (k, v) in &rep.rows[0].checkpoints {
        if !k.starts_with("dpo/") {
            assert_eq!(&rep.rows[1].checkpoints[k], v);
        }
    }
    // β = 3.0 retrains with the configured seed and matches the main adapters.
    for (k, v) in rep.rows[1].checkpoints.iter().filter(|(k, _)| k.starts_with("dpo/")) {
        assert_eq!(&file_hash(&p.run_dir().join(format!("checkpoints/{k}.bin"))).unwrap(), v);
    }
}

#[test]
fn base_contrast_sweep_reports_every_base() {
    let mut p = open_shared();
    let values: Vec<String> = ["init", "tam", "oppu"].map(String::from).to_vec();
    let rep = ablation_sweep(&mut p, SweepAxis::BaseContrast, &values).unwrap();
    let names: Vec<&str> = rep.rows.iter().map(|r| r.value.as_str()).collect();
    assert_eq!(names, ["init", "tam", "oppu"]);
    assert_eq!(&rep.rows[1].aggregate, p.eval_report().unwrap().method("cope").unwrap());
    let csv = std::fs::read_to_string(p.run_dir().join("sweeps/base_contrast.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().any(|l| l.starts_with("base_contrast,oppu,")));
}

#[test]
fn bad_sweep_values_are_config_errors() {
    let mut p = open_shared();
    for (axis, v) in [
        (SweepAxis::Alpha, "x"),
        (SweepAxis::Alpha, "-1"),
        (SweepAxis::Beta, "0"),
        (SweepAxis::BaseContrast, "gpt"),
    ] {
        let err = ablation_sweep(&mut p, axis, &[v.to_string()]).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{axis:?} {v}");
    }
    assert_eq!(ablation_sweep(&mut p, SweepAxis::Alpha, &[]).unwrap_err().exit_code(), 2);
}

#[test]
fn separation_report_is_written() {
    let p = open_shared();
    let csv = std::fs::read_to_string(p.report("reward_separation.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("user_id,score_own,score_others_mean"));
    assert_eq!(csv.lines().count(), 12);
    let rep = p.reward_separation().unwrap();
    let last = csv.lines().last().unwrap();
    assert_eq!(last, format!("global,{},{}", rep.global_own, rep.global_others));
}
