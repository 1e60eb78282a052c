//! Linear flow-matching path, sampling grids and the auxiliary time weight.
//!
//! Time runs from noise (`t = 0`) to data (`t = 1`).

use serde::{Deserialize, Serialize};

use crate::error::{EvdError, Result};
use crate::latent::LatentVideo;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub z0: LatentVideo,
    pub z1: LatentVideo,
    pub t: f64,
    pub z_t: LatentVideo,
    pub v_t: LatentVideo,
}

fn check_unit(t: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(EvdError::config(what, format!("{t} outside [0, 1]")));
    }
    Ok(())
}

pub fn interpolate(z0: &LatentVideo, z1: &LatentVideo, t: f64) -> Result<FlowSample> {
    z0.check_same_shape(z1, "z0/z1")?;
    check_unit(t, "t")?;
    let z_t = LatentVideo {
        shape: z0.shape,
        data: z0
            .data
            .iter()
            .zip(&z1.data)
            .map(|(a, b)| t * b + (1.0 - t) * a)
            .collect(),
    };
    Ok(FlowSample {
        z0: z0.clone(),
        z1: z1.clone(),
        t,
        z_t,
        v_t: z1.sub(z0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub points: Vec<f64>,
}

impl TimeGrid {
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    /// Accepts any strictly increasing grid from exactly 0 to exactly 1.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(EvdError::config("grid", "need at least two points"));
        }
        if points[0] != 0.0 || *points.last().unwrap() != 1.0 {
            return Err(EvdError::config("grid", "must start at 0 and end at 1"));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(EvdError::config("grid", "must be strictly increasing"));
        }
        Ok(TimeGrid { points })
    }
}

pub fn uniform_time_grid(k: usize) -> Result<TimeGrid> {
    if k == 0 {
        return Err(EvdError::config("steps", "K must be at least 1"));
    }
    Ok(TimeGrid {
        points: (0..=k).map(|i| i as f64 / k as f64).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeWeightConfig {
    pub t_star_loss: f64,
    pub kappa: f64,
}

impl Default for TimeWeightConfig {
    fn default() -> Self {
        TimeWeightConfig {
            t_star_loss: 0.6,
            kappa: 6.0,
        }
    }
}

/// Full weight up to `t_star_loss`, exponential decay after it.
pub fn time_weight(t: f64, cfg: &TimeWeightConfig) -> f64 {
    if t <= cfg.t_star_loss {
        1.0
    } else {
        (-cfg.kappa * (t - cfg.t_star_loss)).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::Shape;

    fn lv(vals: &[f64]) -> LatentVideo {
        LatentVideo::from_vec(Shape::new(1, 1, vals.len(), 1), vals.to_vec()).unwrap()
    }

    #[test]
    fn endpoints_and_zero_noise() {
        let z0 = lv(&[1.0, -2.0, 0.5]);
        let z1 = lv(&[3.0, 4.0, -1.0]);
        assert_eq!(interpolate(&z0, &z1, 0.0).unwrap().z_t, z0);
        assert_eq!(interpolate(&z0, &z1, 1.0).unwrap().z_t, z1);
        let zero = lv(&[0.0; 3]);
        let s = interpolate(&zero, &z1, 0.25).unwrap();
        assert_eq!(s.z_t, z1.scale(0.25));
        assert_eq!(s.v_t, z1);
    }

    #[test]
    fn out_of_range_time_rejected() {
        let z = lv(&[0.0]);
        assert!(interpolate(&z, &z, 1.5).is_err());
        assert!(interpolate(&z, &lv(&[0.0, 1.0]), 0.5).is_err());
    }

    #[test]
    fn grids() {
        assert_eq!(uniform_time_grid(1).unwrap().points, vec![0.0, 1.0]);
        assert_eq!(
            uniform_time_grid(4).unwrap().points,
            vec![0.0, 0.25, 0.5, 0.75, 1.0]
        );
        let g = uniform_time_grid(50).unwrap();
        assert_eq!(g.points.len(), 51);
        assert!((g.points[30] - 0.6).abs() < 1e-15);
        assert!(uniform_time_grid(0).is_err());
        assert!(TimeGrid::from_points(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    }

    #[test]
    fn weight_values() {
        let cfg = TimeWeightConfig::default();
        assert_eq!(time_weight(0.3, &cfg), 1.0);
        assert_eq!(time_weight(0.6, &cfg), 1.0);
        assert!((time_weight(0.6 + 1e-12, &cfg) - 1.0).abs() < 1e-10);
        assert!((time_weight(1.0, &cfg) - (-2.4f64).exp()).abs() < 1e-12);
    }
}
