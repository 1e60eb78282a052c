//! Training, sampling, ablation, sweep and audit runs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use evd_core::backbone::{EventHead, MicroDiT};
use evd_core::latent::LatentVideo;
use evd_core::pseudo::{audit_clip, ClipAudit, MotionMaskActivity};
use evd_core::rng::{derive_seed, STREAM_TRAJECTORY};
use evd_core::sampling::{sample, ActivitySource, HeadActivity, SamplerConfig, Trajectory};
use evd_core::scene::ContactScene;
use evd_core::train::{StepReport, TrainExample, Trainer};

use crate::config::RunConfig;
use crate::dataset::{conditioning, train_examples, Dataset};
use crate::metrics::{mean_metrics, scene_metrics, tsv_table, MetricsRecord, SceneMetrics};
use crate::variant::{Activity, Variant};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// A backbone and event head, as used for sampling.
#[derive(Debug, Clone)]
pub struct Models {
    pub dit: MicroDiT,
    pub head: EventHead,
}

impl Models {
    /// Zero-impact initialization from the run seed.
    pub fn init(cfg: &RunConfig) -> anyhow::Result<Self> {
        let mut dit = MicroDiT::new(cfg.dit_config())?;
        dit.init_zero_impact(cfg.seed);
        let mut head = EventHead::new(cfg.model.d_model, cfg.model.head_hidden);
        head.init_zero_impact(cfg.seed);
        Ok(Models { dit, head })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub verb: String,
    pub variant: String,
    pub seed: u64,
    pub data_seed: u64,
    /// Full configuration echo in TOML.
    pub config: String,
}

impl Manifest {
    pub fn new(verb: &str, variant: Variant, cfg: &RunConfig) -> Self {
        Manifest {
            code_version: CODE_VERSION.to_string(),
            verb: verb.to_string(),
            variant: variant.id().to_string(),
            seed: cfg.seed,
            data_seed: cfg.data.seed,
            config: cfg.to_toml(),
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

pub fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    match &cfg.paths.dataset {
        Some(dir) => Dataset::load(dir),
        None => Dataset::generate(&cfg.data),
    }
}

/// Trains the checkpoint used by `variant`. `on_step` sees every report.
pub fn train_models(
    cfg: &RunConfig,
    variant: Variant,
    data: &[TrainExample],
    mut on_step: impl FnMut(&StepReport) -> anyhow::Result<()>,
) -> anyhow::Result<Trainer> {
    cfg.validate()?;
    let init = Models::init(cfg)?;
    let mut train = cfg.train_config();
    train.freeze_event_head |= variant.freezes_head();
    let loss = variant.train_loss(&cfg.loss);
    let mut trainer = Trainer::new(init.dit, init.head, train, loss)?;
    for _ in 0..train.steps {
        let report = trainer.train_step(data)?;
        on_step(&report)?;
    }
    Ok(trainer)
}

pub fn checkpoint_dir(out: &Path, variant: Variant) -> PathBuf {
    out.join("checkpoints").join(variant.checkpoint().id())
}

const CHECKPOINT_FILES: [&str; 4] = ["model.bin", "head.bin", "model_ema.bin", "head_ema.bin"];

pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    trainer.dit.params.save(&dir.join("model.bin"))?;
    trainer.head.params.save(&dir.join("head.bin"))?;
    trainer.ema_dit.save(&dir.join("model_ema.bin"))?;
    trainer.ema_head.save(&dir.join("head_ema.bin"))?;
    Ok(())
}

/// Loads the EMA weights of `variant`'s checkpoint.
pub fn load_models(cfg: &RunConfig, variant: Variant) -> anyhow::Result<Models> {
    let dir = checkpoint_dir(&cfg.paths.out_dir, variant);
    for f in CHECKPOINT_FILES {
        if !dir.join(f).is_file() {
            bail!(
                "missing checkpoint for variant `{}`: {} not found (run `evd train --variant {}`)",
                variant,
                dir.join(f).display(),
                variant.checkpoint()
            );
        }
    }
    let mut m = Models::init(cfg)?;
    m.dit.params.load_into(&dir.join("model_ema.bin"))?;
    m.head.params.load_into(&dir.join("head_ema.bin"))?;
    Ok(m)
}

pub struct TrainSummary {
    pub dir: PathBuf,
    pub initial_base: f64,
    pub final_base: f64,
}

/// Mean base loss over a window of reports.
pub fn mean_base(reports: &[StepReport]) -> f64 {
    reports.iter().map(|r| r.loss.base).sum::<f64>() / reports.len().max(1) as f64
}

pub fn run_train(
    cfg: &RunConfig,
    mut progress: impl FnMut(&StepReport),
) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    let variant = cfg.variant.checkpoint();
    let dir = checkpoint_dir(&cfg.paths.out_dir, variant);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Manifest::new("train", variant, cfg).write(&dir)?;
    let ds = load_dataset(cfg)?;
    if cfg.paths.dataset.is_none() {
        let export = cfg.paths.out_dir.join("dataset");
        if !export.exists() {
            ds.save(&export)?;
        }
    }
    let data = train_examples(&ds.train);
    let mut log = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut reports = Vec::with_capacity(cfg.train.steps);
    let trainer = train_models(cfg, variant, &data, |r| {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n")?;
        progress(r);
        reports.push(r.clone());
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&trainer, &dir)?;
    let w = (reports.len() / 20).max(1);
    Ok(TrainSummary {
        dir,
        initial_base: mean_base(&reports[..w.min(reports.len())]),
        final_base: mean_base(&reports[reports.len().saturating_sub(w)..]),
    })
}

/// The activity source a variant gates with, if any.
fn activity_source<'a>(
    variant: Variant,
    models: &'a Models,
    cfg: &RunConfig,
    sampler: &SamplerConfig,
) -> Option<Box<dyn ActivitySource + 'a>> {
    match variant.activity() {
        Activity::None => None,
        Activity::Head => Some(Box::new(HeadActivity {
            head: &models.head,
            branch: sampler.event_branch,
        })),
        Activity::Motion(signal) => Some(Box::new(MotionMaskActivity {
            spec: sampler.spec,
            cfg: cfg.pseudo,
            signal,
        })),
    }
}

/// Samples every scene with its conditioning. Scene `i` uses the noise seed
/// `derive_seed(cfg.seed, STREAM_TRAJECTORY, i)` for every variant.
pub fn sample_scenes<T: Send>(
    models: &Models,
    variant: Variant,
    cfg: &RunConfig,
    sampler: &SamplerConfig,
    scenes: &[ContactScene],
    per_scene: impl Fn(&ContactScene, Trajectory) -> T + Sync,
) -> anyhow::Result<Vec<T>> {
    let sampler = variant.sampler(sampler);
    let source = activity_source(variant, models, cfg, &sampler);
    let source = source.as_deref();
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = derive_seed(cfg.seed, STREAM_TRAJECTORY, i as u64);
            let traj = sample(
                &models.dit,
                source,
                &conditioning(s),
                s.params.shape,
                &sampler,
                seed,
            )?;
            Ok(per_scene(s, traj))
        })
        .collect()
}

/// Metrics of `variant` over `scenes` with the given sampler settings.
pub fn evaluate(
    models: &Models,
    variant: Variant,
    cfg: &RunConfig,
    sampler: &SamplerConfig,
    scenes: &[ContactScene],
) -> anyhow::Result<(MetricsRecord, Vec<SceneMetrics>)> {
    let t_star = sampler.gate.t_star;
    let rows = sample_scenes(models, variant, cfg, sampler, scenes, |s, tr| {
        (scene_metrics(&tr, s, t_star), tr.nfe)
    })?;
    let per: Vec<SceneMetrics> = rows.iter().map(|r| r.0).collect();
    let record = MetricsRecord {
        variant: variant.id().to_string(),
        scenes: scenes.len(),
        steps: sampler.steps,
        w_cfg: sampler.w_cfg,
        nfe_per_scene: rows.first().map_or(0, |r| r.1),
        mean: mean_metrics(&per),
    };
    if !record.is_valid() {
        bail!("variant `{variant}` produced non-finite or negative metrics");
    }
    Ok((record, per))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Final latents: `u64` count, four `u64` shape words, then every latent's
/// `f64` values, all little endian.
fn write_latents(path: &Path, latents: &[LatentVideo]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let shape = latents.first().map(|z| z.shape);
    let dims = shape.map_or([0; 4], |s| [s.t, s.h, s.w, s.c]);
    w.write_all(&(latents.len() as u64).to_le_bytes())?;
    for d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for z in latents {
        for v in &z.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run_sample(cfg: &RunConfig) -> anyhow::Result<MetricsRecord> {
    cfg.validate()?;
    let variant = cfg.variant;
    let models = load_models(cfg, variant)?;
    let dir = cfg.paths.out_dir.join("sample").join(variant.id());
    Manifest::new("sample", variant, cfg).write(&dir)?;
    let scenes = load_dataset(cfg)?.eval;
    let t_star = cfg.sampler.gate.t_star;
    let rows = sample_scenes(&models, variant, cfg, &cfg.sampler, &scenes, |s, tr| {
        (
            scene_metrics(&tr, s, t_star),
            tr.nfe,
            tr.final_latent().clone(),
        )
    })?;
    let per: Vec<SceneMetrics> = rows.iter().map(|r| r.0).collect();
    let nfe = rows.first().map_or(0, |r| r.1);
    let finals: Vec<LatentVideo> = rows.into_iter().map(|r| r.2).collect();
    let record = MetricsRecord {
        variant: variant.id().to_string(),
        scenes: scenes.len(),
        steps: cfg.sampler.steps,
        w_cfg: cfg.sampler.w_cfg,
        nfe_per_scene: nfe,
        mean: mean_metrics(&per),
    };
    write_jsonl(&dir.join("scenes.jsonl"), &per)?;
    write_jsonl(&dir.join("metrics.jsonl"), std::slice::from_ref(&record))?;
    write_latents(&dir.join("samples.bin"), &finals)?;
    Ok(record)
}

/// Evaluates every variant on the held-out scenes with identical sampler
/// settings and noise seeds. Requires all four checkpoints.
pub fn run_ablation(cfg: &RunConfig) -> anyhow::Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let missing: Vec<_> = Variant::checkpoints_for(&Variant::ALL)
        .into_iter()
        .filter(|v| {
            !checkpoint_dir(&cfg.paths.out_dir, *v)
                .join("model_ema.bin")
                .is_file()
        })
        .map(|v| v.id())
        .collect();
    if !missing.is_empty() {
        bail!("missing variant checkpoints: {}", missing.join(", "));
    }
    let scenes = load_dataset(cfg)?.eval;
    let dir = cfg.paths.out_dir.join("ablation");
    Manifest::new("ablate", cfg.variant, cfg).write(&dir)?;
    let mut records = Vec::new();
    for v in Variant::ALL {
        let models = load_models(cfg, v)?;
        let (rec, _) = evaluate(&models, v, cfg, &cfg.sampler, &scenes)?;
        records.push(rec);
    }
    write_jsonl(&dir.join("ablation.jsonl"), &records)?;
    fs::write(dir.join("ablation.tsv"), tsv_table(&records))?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub steps: usize,
    pub w_cfg: f64,
    pub beta: f64,
    pub tau_on: f64,
    pub tau_off: f64,
    pub t_star: f64,
    pub metrics: MetricsRecord,
}

/// Sampler settings for every point of the sweep grid, in row-major order
/// over (steps, w_cfg, beta, band, t_star).
pub fn sweep_grid(cfg: &RunConfig) -> anyhow::Result<Vec<SamplerConfig>> {
    let s = &cfg.sweep;
    let mut out = Vec::new();
    for &steps in &s.steps {
        for &w in &s.w_cfg {
            for &beta in &s.beta {
                for &[on, off] in &s.bands {
                    for &ts in &s.t_star {
                        let mut c = cfg.sampler.clone();
                        c.steps = steps;
                        c.grid = None;
                        c.w_cfg = w;
                        c.gate.beta = beta;
                        c.gate.tau_on = on;
                        c.gate.tau_off = off;
                        c.gate.t_star = ts;
                        c.validate().with_context(|| {
                            format!(
                                "sweep point K={steps} w={w} beta={beta} band=({on},{off}) t*={ts}"
                            )
                        })?;
                        out.push(c);
                    }
                }
            }
        }
    }
    if out.is_empty() {
        bail!("sweep grid is empty: every [sweep] list needs at least one value");
    }
    Ok(out)
}

pub fn run_sweep(cfg: &RunConfig) -> anyhow::Result<Vec<SweepRecord>> {
    cfg.validate()?;
    let grid = sweep_grid(cfg)?;
    let models = load_models(cfg, cfg.variant)?;
    let scenes = load_dataset(cfg)?.eval;
    let dir = cfg.paths.out_dir.join("sweep").join(cfg.variant.id());
    Manifest::new("sweep", cfg.variant, cfg).write(&dir)?;
    let mut records = Vec::with_capacity(grid.len());
    for s in &grid {
        let (metrics, _) = evaluate(&models, cfg.variant, cfg, s, &scenes)?;
        records.push(SweepRecord {
            steps: s.steps,
            w_cfg: s.w_cfg,
            beta: s.gate.beta,
            tau_on: s.gate.tau_on,
            tau_off: s.gate.tau_off,
            t_star: s.gate.t_star,
            metrics,
        });
    }
    write_jsonl(&dir.join("sweep.jsonl"), &records)?;
    let mut tsv = String::from(
        "steps\tw_cfg\tbeta\ttau_on\ttau_off\tt_star\te_pre\te_in\te_post\tfinal_mse\n",
    );
    for r in &records {
        let m = &r.metrics.mean;
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.steps,
            r.w_cfg,
            r.beta,
            r.tau_on,
            r.tau_off,
            r.t_star,
            m.e_pre,
            m.e_in,
            m.e_post,
            m.final_mse
        ));
    }
    fs::write(dir.join("sweep.tsv"), tsv)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub split: String,
    pub index: usize,
    pub tau_e: usize,
    pub tau_s: usize,
    #[serde(flatten)]
    pub audit: ClipAudit,
}

pub fn run_audit(cfg: &RunConfig) -> anyhow::Result<Vec<AuditRecord>> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let dir = cfg.paths.out_dir.join("audit");
    Manifest::new("audit", cfg.variant, cfg).write(&dir)?;
    let mut records = Vec::new();
    for (split, scenes) in [("train", &ds.train), ("eval", &ds.eval)] {
        let audits: Vec<ClipAudit> = scenes
            .par_iter()
            .map(|s| audit_clip(&s.clean_latent, s.params.spec, &cfg.pseudo))
            .collect::<Result<_, _>>()?;
        for (i, (s, a)) in scenes.iter().zip(audits).enumerate() {
            records.push(AuditRecord {
                split: split.to_string(),
                index: i,
                tau_e: s.params.tau_e,
                tau_s: s.params.tau_s,
                audit: a,
            });
        }
    }
    write_jsonl(&dir.join("audit.jsonl"), &records)?;
    Ok(records)
}
