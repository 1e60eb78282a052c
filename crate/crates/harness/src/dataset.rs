//! Training and held-out scene sets.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};

use evd_core::backbone::Conditioning;
use evd_core::rng::{derive_seed, STREAM_SCENE};
use evd_core::scene::{make_contact_scene, read_scene, scene_embedding, write_scene, ContactScene};
use evd_core::train::TrainExample;

use crate::config::DataConfig;

/// Held-out scenes draw from indices starting here, so they never collide
/// with training scenes.
pub const EVAL_INDEX_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<ContactScene>,
    pub eval: Vec<ContactScene>,
}

fn generate(cfg: &DataConfig, first: u64, count: usize) -> anyhow::Result<Vec<ContactScene>> {
    (0..count as u64)
        .map(|i| {
            let seed = derive_seed(cfg.seed, STREAM_SCENE, first + i);
            let params = cfg.scenes.sample_params(seed)?;
            Ok(make_contact_scene(&params)?)
        })
        .collect()
}

impl Dataset {
    pub fn generate(cfg: &DataConfig) -> anyhow::Result<Self> {
        Ok(Dataset {
            train: generate(cfg, 0, cfg.train_scenes)?,
            eval: generate(cfg, EVAL_INDEX_OFFSET, cfg.eval_scenes)?,
        })
    }

    /// Writes `train/NNNNN.bin` and `eval/NNNNN.bin`, each with its sidecar.
    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        for (split, scenes) in [("train", &self.train), ("eval", &self.eval)] {
            let d = dir.join(split);
            fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
            for (i, s) in scenes.iter().enumerate() {
                write_scene(s, &d.join(format!("{i:05}.bin")))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let read_split = |split: &str| -> anyhow::Result<Vec<ContactScene>> {
            let d = dir.join(split);
            let mut files: Vec<_> = fs::read_dir(&d)
                .with_context(|| format!("reading dataset split {}", d.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "bin"))
                .collect();
            files.sort();
            files
                .iter()
                .map(|p| read_scene(p).with_context(|| format!("loading {}", p.display())))
                .collect()
        };
        let ds = Dataset {
            train: read_split("train")?,
            eval: read_split("eval")?,
        };
        if ds.train.is_empty() || ds.eval.is_empty() {
            bail!("dataset at {} has an empty split", dir.display());
        }
        Ok(ds)
    }
}

pub fn conditioning(scene: &ContactScene) -> Conditioning {
    Conditioning::new(scene_embedding(&scene.params))
}

pub fn train_examples(scenes: &[ContactScene]) -> Vec<TrainExample> {
    scenes
        .iter()
        .map(|s| TrainExample {
            z1: s.clean_latent.clone(),
            y: conditioning(s),
        })
        .collect()
}
