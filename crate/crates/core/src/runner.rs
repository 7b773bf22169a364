//! End-to-end runs: teacher training, distillation and evaluation.
//!
//! A distillation run directory holds
//!
//! ```text
//! config.toml      resolved configuration after overrides
//! checkpoint.json  trainable state, rewritten after every epoch
//! metrics.jsonl    one line per step and per epoch
//! result.json      final summary (RunResult)
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{derive_rng, load_dataset, Dataset};
use crate::engine::{
    evaluate, train_supervised, AccuracyReport, DistillCheckpoint, Distiller, EpochStats,
    StepMetrics, SupervisedEpoch,
};
use crate::error::{CrcdError, Result};
use crate::models::{build_model, Model, ModelSpec};
use crate::nn::ParamStore;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESULT_FILE: &str = "result.json";
pub const TEACHER_FILE: &str = "teacher.json";

pub const TEACHER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherCheckpoint {
    pub version: u32,
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub seed: u64,
    pub epochs: usize,
    pub test: AccuracyReport,
    pub history: Vec<SupervisedEpoch>,
}

impl TeacherCheckpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(&self.spec, self.params.clone())
    }
}

/// Name for a loss-weight setting: `crcd` uses both relation terms, `frcd`
/// and `grcd` one each, `kd` only soft targets, `student` plain cross-entropy.
/// Contrastive baselines get their loss appended, e.g. `frcd+info_nce`.
pub fn method_name(cfg: &crate::engine::DistillConfig) -> String {
    use crate::engine::ContrastiveLoss;
    let base = match (cfg.beta1 > 0.0, cfg.beta2 > 0.0) {
        (true, true) => "crcd",
        (true, false) => "frcd",
        (false, true) => "grcd",
        (false, false) if cfg.alpha > 0.0 => "kd",
        _ => "student",
    };
    let uses_relations = cfg.beta1 > 0.0 || cfg.beta2 > 0.0;
    match cfg.contrastive_loss {
        ContrastiveLoss::Relation => base.to_string(),
        other if uses_relations => format!(
            "{base}+{}",
            serde_json::to_value(other).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
        ),
        _ => base.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stats: EpochStats,
    pub test: AccuracyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub name: String,
    pub method: String,
    pub teacher: String,
    pub student: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub overrides: Vec<String>,
    pub teacher_top1: f64,
    /// Untrained student.
    pub initial: AccuracyReport,
    pub history: Vec<EpochRecord>,
    pub final_top1: f64,
    pub final_top5: Option<f64>,
    pub best_top1: f64,
    /// Epoch the run resumed from, if any.
    pub resumed_from: Option<usize>,
    /// Always false: after a resume the replay queue warms up again.
    pub queue_restored: bool,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunCheckpoint {
    distill: DistillCheckpoint,
    initial: AccuracyReport,
    history: Vec<EpochRecord>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MetricLine<'a> {
    Step(&'a StepMetrics),
    Epoch(&'a EpochRecord),
}

fn io_err(path: &Path, e: std::io::Error) -> CrcdError {
    CrcdError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Writes via a temporary file and rename so a crash never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CrcdError::Ingestion(format!("{}: {e}", path.display())))
}

pub fn load_teacher(path: &Path) -> Result<TeacherCheckpoint> {
    if !path.exists() {
        return Err(CrcdError::config(format!(
            "teacher checkpoint {} not found; run train-teacher first",
            path.display()
        )));
    }
    let ckpt: TeacherCheckpoint = read_json(path)?;
    if ckpt.version != TEACHER_VERSION {
        return Err(CrcdError::Ingestion(format!(
            "teacher checkpoint version {} unsupported",
            ckpt.version
        )));
    }
    Ok(ckpt)
}

/// Trains the configured teacher and writes its checkpoint to `out`.
pub fn run_teacher(
    cfg: &RunConfig,
    out: &Path,
    on_epoch: &mut dyn FnMut(&SupervisedEpoch),
) -> Result<TeacherCheckpoint> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;
    let spec = cfg.teacher.spec(&cfg.data)?;
    let mut model = build_model(&spec, derive_rng(cfg.seed, "teacher-init", 0).next_u64())?;
    let history = train_supervised(
        &mut model,
        &data.train,
        &data.test,
        &cfg.teacher.optimizer,
        cfg.teacher.epochs,
        cfg.teacher.batch_size,
        cfg.seed,
        cfg.data.augment,
        on_epoch,
    )?;
    let test = match history.last() {
        Some(h) => h.test,
        None => evaluate(&model, &data.test)?,
    };
    let ckpt = TeacherCheckpoint {
        version: TEACHER_VERSION,
        spec,
        params: model.params,
        seed: cfg.seed,
        epochs: cfg.teacher.epochs,
        test,
        history,
    };
    write_json(out, &ckpt)?;
    Ok(ckpt)
}

/// Keeps metric lines from epochs before `epochs_completed`.
fn truncate_metrics(path: &Path, epochs_completed: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        let v: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let epoch = v
            .get("epoch")
            .or_else(|| v.get("stats").and_then(|s| s.get("epoch")))
            .and_then(|e| e.as_u64());
        if matches!(epoch, Some(e) if (e as usize) < epochs_completed) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

fn build_distiller(cfg: &RunConfig, teacher: Model) -> Result<Distiller> {
    let spec = cfg.student.spec(&cfg.data)?;
    let student = build_model(&spec, derive_rng(cfg.seed, "student-init", 0).next_u64())?;
    Distiller::new(cfg.distill.clone(), teacher, student, cfg.seed)
}

/// Distills the configured student into `out`. With `resume`, continues
/// from `out/checkpoint.json` when present.
pub fn run_distill(
    cfg: &RunConfig,
    out: &Path,
    overrides: &[String],
    resume: bool,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunResult> {
    let started = Instant::now();
    cfg.validate()?;
    let teacher_ckpt = load_teacher(&cfg.teacher_checkpoint())?;
    let expected = cfg.teacher.spec(&cfg.data)?;
    if teacher_ckpt.spec != expected {
        return Err(CrcdError::config(format!(
            "teacher checkpoint holds {} but the config asks for {}",
            teacher_ckpt.spec.name, expected.name
        )));
    }
    let data = load_dataset(&cfg.data)?;
    let mut distiller = build_distiller(cfg, teacher_ckpt.model()?)?;
    let hash = cfg.config_hash();

    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);

    let (initial, mut history, start, resumed_from) = if resume && ckpt_path.exists() {
        let ck: RunCheckpoint = read_json(&ckpt_path)?;
        if ck.distill.config_hash != hash {
            return Err(CrcdError::config(
                "checkpoint was written by a different configuration",
            ));
        }
        distiller.restore(&ck.distill)?;
        let done = ck.distill.epochs_completed;
        truncate_metrics(&metrics_path, done)?;
        (ck.initial, ck.history, done, Some(done))
    } else {
        if metrics_path.exists() {
            fs::remove_file(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
        }
        (evaluate(&distiller.student, &data.test)?, Vec::new(), 0, None)
    };

    let mut metrics = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| io_err(&metrics_path, e))?,
    );
    for epoch in start..cfg.distill.epochs {
        let mut write_err = None;
        let stats = distiller.run_epoch(&data.train, epoch, cfg.data.augment, &mut |m| {
            if let Err(e) = serde_json::to_writer(&mut metrics, &MetricLine::Step(m))
                .map_err(CrcdError::from)
                .and_then(|_| metrics.write_all(b"\n").map_err(CrcdError::from))
            {
                write_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(e);
        }
        let record = EpochRecord {
            stats,
            test: evaluate(&distiller.student, &data.test)?,
        };
        serde_json::to_writer(&mut metrics, &MetricLine::Epoch(&record))?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        history.push(record);
        write_json(
            &ckpt_path,
            &RunCheckpoint {
                distill: distiller.checkpoint(epoch + 1, &hash),
                initial,
                history: history.clone(),
            },
        )?;
        on_epoch(history.last().expect("just pushed"));
    }
    metrics.flush()?;

    let last = history.last().map(|r| r.test).unwrap_or(initial);
    let best = history
        .iter()
        .map(|r| r.test.top1)
        .fold(initial.top1, f64::max);
    let result = RunResult {
        run_id: format!("{}-s{}-{}", cfg.name, cfg.seed, &hash[..8]),
        name: cfg.name.clone(),
        method: method_name(&cfg.distill),
        teacher: teacher_ckpt.spec.name.clone(),
        student: distiller.student.spec.name.clone(),
        seed: cfg.seed,
        config_hash: hash,
        config: cfg.clone(),
        overrides: overrides.to_vec(),
        teacher_top1: teacher_ckpt.test.top1,
        initial,
        history,
        final_top1: last.top1,
        final_top5: last.top5,
        best_top1: best,
        resumed_from,
        queue_restored: false,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join(RESULT_FILE), &result)?;
    Ok(result)
}

pub fn load_result(path: &Path) -> Result<RunResult> {
    read_json(path)
}

/// Which network `evaluate_run` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    Teacher,
    Student,
}

/// Scores the teacher checkpoint, or the student in `run_dir/checkpoint.json`
/// (the untrained student when there is no checkpoint yet).
pub fn evaluate_run(cfg: &RunConfig, run_dir: &Path, target: EvalTarget) -> Result<AccuracyReport> {
    cfg.validate()?;
    let teacher = load_teacher(&cfg.teacher_checkpoint())?;
    let data = load_dataset(&cfg.data)?;
    let test: &Dataset = &data.test;
    match target {
        EvalTarget::Teacher => evaluate(&teacher.model()?, test),
        EvalTarget::Student => {
            let mut d = build_distiller(cfg, teacher.model()?)?;
            let path = run_dir.join(CHECKPOINT_FILE);
            if path.exists() {
                let ck: RunCheckpoint = read_json(&path)?;
                d.restore(&ck.distill)?;
            }
            evaluate(&d.student, test)
        }
    }
}

/// Default output directory for a run.
pub fn default_run_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-s{}", cfg.name, cfg.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ContrastiveLoss;

    fn tiny(dir: &Path) -> RunConfig {
        let mut c = RunConfig::new("tiny");
        c.data.num_classes = 3;
        c.data.sample_shape = vec![6];
        c.data.train_per_class = 12;
        c.data.test_per_class = 6;
        c.teacher.hidden = vec![8];
        c.teacher.feature_dim = Some(6);
        c.teacher.epochs = 2;
        c.teacher.batch_size = 8;
        c.teacher.checkpoint = Some(dir.join("teacher.json"));
        c.student.feature_dim = Some(4);
        c.distill.negatives = 8;
        c.distill.batch_size = 6;
        c.distill.relation_dim = 8;
        c.distill.proj_dim = 4;
        c.distill.epochs = 2;
        c
    }

    #[test]
    fn method_names() {
        let mut c = RunConfig::new("m").distill;
        assert_eq!(method_name(&c), "crcd");
        c.beta2 = 0.0;
        assert_eq!(method_name(&c), "frcd");
        c.contrastive_loss = ContrastiveLoss::InfoNce;
        assert_eq!(method_name(&c), "frcd+info_nce");
        c.beta1 = 0.0;
        assert_eq!(method_name(&c), "kd");
        c.alpha = 0.0;
        assert_eq!(method_name(&c), "student");
        c.beta2 = 1.0;
        c.contrastive_loss = ContrastiveLoss::Relation;
        assert_eq!(method_name(&c), "grcd");
    }

    #[test]
    fn missing_teacher_is_a_startup_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let err = run_distill(&cfg, &dir.path().join("run"), &[], false, &mut |_| {}).unwrap_err();
        assert!(err.to_string().contains("train-teacher"), "{err}");
        assert!(!dir.path().join("run").exists());
    }

    #[test]
    fn zero_epochs_reports_untrained_student() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        run_teacher(&cfg, &cfg.teacher_checkpoint(), &mut |_| {}).unwrap();
        cfg.distill.epochs = 0;
        let r = run_distill(&cfg, &dir.path().join("run"), &[], false, &mut |_| {}).unwrap();
        assert!(r.history.is_empty());
        assert_eq!(r.final_top1, r.initial.top1);
        assert!(dir.path().join("run").join(RESULT_FILE).exists());
    }

    #[test]
    fn same_seed_same_result_and_resume_matches() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        run_teacher(&cfg, &cfg.teacher_checkpoint(), &mut |_| {}).unwrap();
        let a = run_distill(&cfg, &dir.path().join("a"), &[], false, &mut |_| {}).unwrap();
        let b = run_distill(&cfg, &dir.path().join("b"), &[], false, &mut |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_top1, b.final_top1);

        let mut other = cfg.clone();
        other.distill.tau = 0.1;
        let err = run_distill(&other, &dir.path().join("a"), &[], true, &mut |_| {}).unwrap_err();
        assert!(err.to_string().contains("different configuration"), "{err}");

        let lines = fs::read_to_string(dir.path().join("a").join(METRICS_FILE)).unwrap();
        assert!(lines.lines().any(|l| l.contains("\"kind\":\"epoch\"")));
        assert!(lines.lines().any(|l| l.contains("\"kind\":\"step\"")));

        // Resuming a finished run recomputes nothing and keeps the history.
        let again = run_distill(&cfg, &dir.path().join("a"), &[], true, &mut |_| {}).unwrap();
        assert_eq!(again.resumed_from, Some(2));
        assert_eq!(again.history, a.history);
        let after = fs::read_to_string(dir.path().join("a").join(METRICS_FILE)).unwrap();
        assert_eq!(after, lines);
    }

    #[test]
    fn resume_from_mid_run_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        run_teacher(&cfg, &cfg.teacher_checkpoint(), &mut |_| {}).unwrap();
        let full = run_distill(&cfg, &dir.path().join("full"), &[], false, &mut |_| {}).unwrap();

        // Save the run directory as it stood after epoch 1, as if interrupted there.
        let run = dir.path().join("run");
        let saved = dir.path().join("saved");
        fs::create_dir_all(&saved).unwrap();
        run_distill(&cfg, &run, &[], false, &mut |rec| {
            if rec.stats.epoch == 0 {
                for f in [CHECKPOINT_FILE, METRICS_FILE, CONFIG_FILE] {
                    fs::copy(run.join(f), saved.join(f)).unwrap();
                }
            }
        })
        .unwrap();
        let ck: RunCheckpoint = read_json(&saved.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.distill.epochs_completed, 1);
        let run = saved;
        let resumed = run_distill(&cfg, &run, &[], true, &mut |_| {}).unwrap();
        assert_eq!(resumed.resumed_from, Some(1));
        assert!(!resumed.queue_restored);
        assert_eq!(resumed.history[0], full.history[0]);
        // Epoch 1 differs only by the empty queue re-warming.
        let (r1, f1) = (&resumed.history[1], &full.history[1]);
        assert!(r1.stats.skipped_steps > f1.stats.skipped_steps);
        let one_sample = 100.0 / r1.test.samples as f64;
        assert!((r1.test.top1 - f1.test.top1).abs() <= 2.0 * one_sample + 1e-9);
        let lines = fs::read_to_string(run.join(METRICS_FILE)).unwrap();
        let epochs: Vec<_> = lines.lines().filter(|l| l.contains("\"kind\":\"epoch\"")).collect();
        assert_eq!(epochs.len(), 2);
    }

    #[test]
    fn eval_targets() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let t = run_teacher(&cfg, &cfg.teacher_checkpoint(), &mut |_| {}).unwrap();
        let rt = evaluate_run(&cfg, dir.path(), EvalTarget::Teacher).unwrap();
        assert_eq!(rt.top1, t.test.top1);
        let r = run_distill(&cfg, &dir.path().join("run"), &[], false, &mut |_| {}).unwrap();
        let rs = evaluate_run(&cfg, &dir.path().join("run"), EvalTarget::Student).unwrap();
        assert_eq!(rs.top1, r.final_top1);
    }
}
