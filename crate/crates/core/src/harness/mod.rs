//! Run configuration, the two training loops, evaluation and file plumbing.

mod config;
mod data;
mod eval;
mod export;
mod stage1;
mod stage2;

#[cfg(test)]
mod tests;

use std::path::{Path, PathBuf};

pub use config::{Ablation, PathsConfig, RunConfig, Stage1Config, Stage2Config};
pub use data::{is_held_out, motion_feature, split_indices, stream_rng, CentroidClassifier, CLASSIFIER_FRAMES};
pub use eval::{evaluate, AblationDelta, EvalReport, EVAL_GENERATIONS, EVAL_VERSION};
pub use export::{export_motion, CodesFile, ExportFormat, CODES_VERSION};
pub use stage1::{partition_for, write_curve, FeatureNorm, Stage1Model, Stage1Record, Stage1Trainer, NORM_STD_FLOOR};
pub use stage2::{encode_examples, Stage2Example, Stage2Model, Stage2Record, Stage2Trainer};

use crate::autodiff::Checkpoint;
use crate::error::{Error, Result};
use crate::motion::{generate_synthetic_corpus, load_corpus, write_corpus, CorpusSample};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Synthesizes the corpus and writes it under the run directory.
pub fn gen_corpus(cfg: &RunConfig) -> Result<PathBuf> {
    let samples = generate_synthetic_corpus(cfg.seed, &cfg.corpus)?;
    ensure_dir(&cfg.corpus_dir())?;
    write_corpus(&samples, &cfg.corpus_dir())
}

pub fn load_samples(cfg: &RunConfig) -> Result<Vec<CorpusSample>> {
    let manifest = cfg.manifest_path();
    if !manifest.exists() {
        return Err(Error::MissingInput(manifest));
    }
    load_corpus(&manifest)
}

/// Trained models of both stages, kept in memory.
#[derive(Debug, Clone)]
pub struct Trained {
    pub stage1: Stage1Trainer,
    pub stage2: Stage2Trainer,
}

/// Both stages at their configured schedules without touching the disk.
pub fn fit(cfg: &RunConfig, samples: &[CorpusSample]) -> Result<Trained> {
    let mut s1 = Stage1Trainer::new(&cfg.stage1, samples, cfg.seed)?;
    s1.train_until(samples, cfg.stage1.steps)?;
    let mut s2 = Stage2Trainer::new(&cfg.stage2, &s1.model, samples, cfg.seed)?;
    s2.train_until(cfg.stage2.steps)?;
    Ok(Trained { stage1: s1, stage2: s2 })
}

/// Trains Stage 1, resuming from an existing checkpoint in the run directory.
pub fn run_stage1(cfg: &RunConfig, samples: &[CorpusSample]) -> Result<Stage1Trainer> {
    ensure_dir(cfg.out_dir())?;
    let path = cfg.stage1_path();
    let mut t = if path.exists() {
        let t = Stage1Trainer::resume(&Checkpoint::load(&path)?, samples)?;
        log::info!("resuming stage1 from step {}", t.step);
        t
    } else {
        Stage1Trainer::new(&cfg.stage1, samples, cfg.seed)?
    };
    let first = t.step;
    t.train_until(samples, cfg.stage1.steps)?;
    t.checkpoint().save(&path)?;
    if t.step > first || !cfg.stage1_curve_path().exists() {
        write_curve(&t.curve, &cfg.stage1_curve_path())?;
    }
    Ok(t)
}

/// Trains Stage 2 on the codes of the saved Stage-1 checkpoint.
pub fn run_stage2(cfg: &RunConfig, samples: &[CorpusSample]) -> Result<Stage2Trainer> {
    let stage1 = Stage1Model::load(&cfg.stage1_path())?;
    let mut t = Stage2Trainer::new(&cfg.stage2, &stage1, samples, cfg.seed)?;
    t.train_until(cfg.stage2.steps)?;
    ensure_dir(cfg.out_dir())?;
    t.checkpoint().save(&cfg.stage2_path())?;
    write_curve(&t.curve, &cfg.stage2_curve_path())?;
    Ok(t)
}

/// Loads both checkpoints of a run directory.
pub fn load_models(cfg: &RunConfig) -> Result<(Stage1Model, Stage2Model)> {
    let s1 = Stage1Model::load(&cfg.stage1_path())?;
    let s2 = Stage2Model::load(&cfg.stage2_path())?;
    Ok((s1, s2))
}

pub fn run_eval(cfg: &RunConfig, samples: &[CorpusSample]) -> Result<EvalReport> {
    let (s1, s2) = load_models(cfg)?;
    let report = evaluate(&s1, &s2, samples, cfg.seed)?;
    report.save(&cfg.eval_path())?;
    Ok(report)
}

/// Corpus, both stages and eval into the run directory.
pub fn run_all(cfg: &RunConfig) -> Result<EvalReport> {
    gen_corpus(cfg)?;
    let samples = load_samples(cfg)?;
    run_stage1(cfg, &samples)?;
    run_stage2(cfg, &samples)?;
    run_eval(cfg, &samples)
}

/// Evaluates the run directory, then trains (or resumes) each ablation under
/// `<out>/ablate-<name>` on the same corpus and records ablated-minus-full deltas.
pub fn run_ablations(cfg: &RunConfig, samples: &[CorpusSample], ablations: &[Ablation]) -> Result<EvalReport> {
    let mut full = run_eval(cfg, samples)?;
    for &a in ablations {
        let sub = ablation_config(cfg, a);
        run_stage1(&sub, samples)?;
        if !sub.stage2_path().exists() {
            run_stage2(&sub, samples)?;
        }
        let report = run_eval(&sub, samples)?;
        full.ablation_deltas.insert(a.name().to_string(), report.delta_from(&full));
    }
    full.save(&cfg.eval_path())?;
    Ok(full)
}

/// Config of an ablation run, writing under `<out>/ablate-<name>`.
pub fn ablation_config(cfg: &RunConfig, a: Ablation) -> RunConfig {
    let mut sub = cfg.clone().with_ablation(a);
    sub.paths.out_dir = cfg.out_dir().join(format!("ablate-{}", a.name()));
    sub
}
