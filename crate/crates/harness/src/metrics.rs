//! Update-energy metrics of sampling trajectories, split by the ground-truth
//! event window of each scene.
//!
//! For a trajectory `z_0 .. z_K` and a frame set `R`,
//! `E_R = sum_k mean_{elements of frames in R} (z_{k+1} - z_k)^2`.
//! Regions: pre `[0, tau_e)`, in `[tau_e, tau_s)`, post `[tau_s, T)`.
//! The `*_early` fields restrict the sum to steps starting before the gate
//! cutoff `t_star`.

use serde::{Deserialize, Serialize};

use evd_core::latent::LatentVideo;
use evd_core::sampling::Trajectory;
use evd_core::scene::ContactScene;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Pre,
    In,
    Post,
}

impl Region {
    pub fn of(frame: usize, tau_e: usize, tau_s: usize) -> Region {
        if frame < tau_e {
            Region::Pre
        } else if frame < tau_s {
            Region::In
        } else {
            Region::Post
        }
    }
}

/// Metrics of one trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub e_pre: f64,
    pub e_in: f64,
    pub e_post: f64,
    pub e_pre_early: f64,
    pub e_in_early: f64,
    pub e_post_early: f64,
    /// Mean scheduled gate over early steps and region elements.
    pub gate_pre: f64,
    pub gate_in: f64,
    pub gate_post: f64,
    pub final_mse: f64,
}

/// Per-region means of squared entries; `None` for an empty region.
fn region_means(d: &LatentVideo, tau_e: usize, tau_s: usize) -> [Option<f64>; 3] {
    let fl = d.shape.frame_len();
    let mut sum = [0.0; 3];
    let mut n = [0usize; 3];
    for f in 0..d.shape.t {
        let r = Region::of(f, tau_e, tau_s) as usize;
        sum[r] += d.frame(f).iter().map(|x| x * x).sum::<f64>();
        n[r] += fl;
    }
    [0, 1, 2].map(|r| (n[r] > 0).then(|| sum[r] / n[r] as f64))
}

pub fn scene_metrics(traj: &Trajectory, scene: &ContactScene, t_star: f64) -> SceneMetrics {
    let p = &scene.params;
    let (tau_e, tau_s) = (p.tau_e, p.tau_s);
    let shape = p.shape;
    let spec = p.spec;
    let nh = shape.h / spec.ph;
    let nw = shape.w / spec.pw;
    let slice = nh * nw;

    let mut e = [0.0; 3];
    let mut early = [0.0; 3];
    let mut gate_sum = [0.0; 3];
    let mut gate_n = [0usize; 3];
    for k in 0..traj.latents.len() - 1 {
        let d = traj.latents[k + 1].sub(&traj.latents[k]);
        let is_early = traj.times[k] < t_star;
        for (r, m) in region_means(&d, tau_e, tau_s).into_iter().enumerate() {
            let m = m.unwrap_or(0.0);
            e[r] += m;
            if is_early {
                early[r] += m;
            }
        }
        if is_early {
            let g = &traj.gates[k];
            for f in 0..shape.t {
                let r = Region::of(f, tau_e, tau_s) as usize;
                let tt = f / spec.pt;
                gate_sum[r] += g[tt * slice..(tt + 1) * slice].iter().sum::<f64>();
                gate_n[r] += slice;
            }
        }
    }
    let gate = |r: usize| {
        if gate_n[r] == 0 {
            0.0
        } else {
            gate_sum[r] / gate_n[r] as f64
        }
    };
    let diff = traj.final_latent().sub(&scene.clean_latent);
    SceneMetrics {
        e_pre: e[0],
        e_in: e[1],
        e_post: e[2],
        e_pre_early: early[0],
        e_in_early: early[1],
        e_post_early: early[2],
        gate_pre: gate(0),
        gate_in: gate(1),
        gate_post: gate(2),
        final_mse: diff.data.iter().map(|x| x * x).sum::<f64>() / diff.data.len() as f64,
    }
}

/// Aggregates of one variant over a scene set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: String,
    pub scenes: usize,
    pub steps: usize,
    pub w_cfg: f64,
    pub nfe_per_scene: usize,
    #[serde(flatten)]
    pub mean: SceneMetrics,
}

impl MetricsRecord {
    pub fn is_valid(&self) -> bool {
        let m = &self.mean;
        let es = [
            m.e_pre,
            m.e_in,
            m.e_post,
            m.e_pre_early,
            m.e_in_early,
            m.e_post_early,
        ];
        es.iter().all(|e| e.is_finite() && *e >= 0.0) && m.final_mse.is_finite()
    }
}

pub fn mean_metrics(items: &[SceneMetrics]) -> SceneMetrics {
    let n = items.len().max(1) as f64;
    let mut m = SceneMetrics::default();
    for s in items {
        m.e_pre += s.e_pre / n;
        m.e_in += s.e_in / n;
        m.e_post += s.e_post / n;
        m.e_pre_early += s.e_pre_early / n;
        m.e_in_early += s.e_in_early / n;
        m.e_post_early += s.e_post_early / n;
        m.gate_pre += s.gate_pre / n;
        m.gate_in += s.gate_in / n;
        m.gate_post += s.gate_post / n;
        m.final_mse += s.final_mse / n;
    }
    m
}

pub const TABLE_COLUMNS: [&str; 15] = [
    "variant",
    "scenes",
    "steps",
    "w_cfg",
    "nfe_per_scene",
    "e_pre",
    "e_in",
    "e_post",
    "e_pre_early",
    "e_in_early",
    "e_post_early",
    "gate_pre",
    "gate_in",
    "gate_post",
    "final_mse",
];

/// Tab-separated table with a header row. Floats use Rust's shortest
/// round-trip formatting.
pub fn tsv_table(records: &[MetricsRecord]) -> String {
    let mut out = TABLE_COLUMNS.join("\t");
    out.push('\n');
    for r in records {
        let m = &r.mean;
        let row = [
            r.variant.clone(),
            r.scenes.to_string(),
            r.steps.to_string(),
            r.w_cfg.to_string(),
            r.nfe_per_scene.to_string(),
            m.e_pre.to_string(),
            m.e_in.to_string(),
            m.e_post.to_string(),
            m.e_pre_early.to_string(),
            m.e_in_early.to_string(),
            m.e_post_early.to_string(),
            m.gate_pre.to_string(),
            m.gate_in.to_string(),
            m.gate_post.to_string(),
            m.final_mse.to_string(),
        ];
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}
