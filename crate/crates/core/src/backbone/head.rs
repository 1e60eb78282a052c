//! Token-wise event head: `logit_i = MLP([s_i ; gamma(t)])`, activity
//! `a_i = sigmoid(logit_i)`.

use super::check_width;
use super::dit::{fill_fan_in, fill_normal};
use crate::error::Result;
use crate::params::{Grads, ParamId, ParamStore};
use crate::rng::{derive_seed, rng_from_seed, STREAM_INIT};
use crate::tensor::{
    add_row_bias, col_sum_into, gelu, gelu_grad, gemm, gemm_nt, gemm_tn, sigmoid, time_embedding,
    Mat,
};

/// Activity-logit bias after zero-impact init; `sigmoid(-6) ~= 0.00247`.
pub const ACTIVITY_INIT_BIAS: f64 = -6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EventHead {
    pub width: usize,
    pub hidden: usize,
    pub params: ParamStore,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

pub struct HeadCache {
    input: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    pub logits: Vec<f64>,
    pub activity: Vec<f64>,
}

impl EventHead {
    /// Head over final tokens of width `width`; the time embedding has the
    /// same width, so the first layer maps `2*width -> hidden`.
    pub fn new(width: usize, hidden: usize) -> Self {
        let mut p = ParamStore::new();
        let fc1_w = p.add("head.fc1.w", &[2 * width, hidden]);
        let fc1_b = p.add("head.fc1.b", &[hidden]);
        let fc2_w = p.add("head.fc2.w", &[hidden, 1]);
        let fc2_b = p.add("head.fc2.b", &[1]);
        EventHead {
            width,
            hidden,
            params: p,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        }
    }

    /// Random first layer, zero final weights, activity bias at
    /// [`ACTIVITY_INIT_BIAS`].
    pub fn init_zero_impact(&mut self, seed: u64) {
        let mut rng = rng_from_seed(derive_seed(seed, STREAM_INIT, 2));
        self.params.data.iter_mut().for_each(|v| *v = 0.0);
        fill_fan_in(&mut self.params, self.fc1_w, &mut rng);
        self.params.get_mut(self.fc2_b)[0] = ACTIVITY_INIT_BIAS;
    }

    pub fn init_random(&mut self, seed: u64) {
        let mut rng = rng_from_seed(derive_seed(seed, STREAM_INIT, 3));
        fill_fan_in(&mut self.params, self.fc1_w, &mut rng);
        fill_normal(&mut self.params, self.fc1_b, 0.1, &mut rng);
        fill_fan_in(&mut self.params, self.fc2_w, &mut rng);
        fill_normal(&mut self.params, self.fc2_b, 0.5, &mut rng);
    }

    pub fn set_bias(&mut self, b: f64) {
        self.params.get_mut(self.fc2_b)[0] = b;
    }

    pub fn forward_cached(&self, final_tokens: &Mat, t: f64) -> Result<HeadCache> {
        check_width(final_tokens.cols, self.width, "event head input")?;
        let n = final_tokens.rows;
        let w = self.width;
        let hid = self.hidden;
        let temb = time_embedding(t, w);
        let mut input = vec![0.0; n * 2 * w];
        for i in 0..n {
            input[i * 2 * w..i * 2 * w + w].copy_from_slice(final_tokens.row(i));
            input[i * 2 * w + w..(i + 1) * 2 * w].copy_from_slice(&temb);
        }
        let p = &self.params;
        let mut u = vec![0.0; n * hid];
        gemm(&input, p.get(self.fc1_w), &mut u, n, 2 * w, hid);
        add_row_bias(&mut u, p.get(self.fc1_b));
        let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
        let mut logits = vec![0.0; n];
        gemm(&g, p.get(self.fc2_w), &mut logits, n, hid, 1);
        add_row_bias(&mut logits, p.get(self.fc2_b));
        let activity = logits.iter().map(|&l| sigmoid(l)).collect();
        Ok(HeadCache {
            input,
            u,
            g,
            logits,
            activity,
        })
    }

    pub fn activity(&self, final_tokens: &Mat, t: f64) -> Result<Vec<f64>> {
        self.forward_cached(final_tokens, t).map(|c| c.activity)
    }

    /// Backward from `d_activity` (gradient w.r.t. the sigmoid output).
    /// Accumulates head gradients and returns the gradient w.r.t. the final
    /// tokens (`N x width`).
    pub fn backward(&self, cache: &HeadCache, d_activity: &[f64], grads: &mut Grads) -> Vec<f64> {
        let n = d_activity.len();
        let w = self.width;
        let hid = self.hidden;
        let p = &self.params;
        let dlogit: Vec<f64> = d_activity
            .iter()
            .zip(&cache.activity)
            .map(|(da, a)| da * a * (1.0 - a))
            .collect();
        gemm_tn(&cache.g, &dlogit, grads.slot(p, self.fc2_w), n, hid, 1);
        col_sum_into(&dlogit, grads.slot(p, self.fc2_b));
        let mut du = vec![0.0; n * hid];
        gemm_nt(&dlogit, p.get(self.fc2_w), &mut du, n, 1, hid);
        for (x, &u) in du.iter_mut().zip(&cache.u) {
            *x *= gelu_grad(u);
        }
        gemm_tn(&cache.input, &du, grads.slot(p, self.fc1_w), n, 2 * w, hid);
        col_sum_into(&du, grads.slot(p, self.fc1_b));
        let mut dinput = vec![0.0; n * 2 * w];
        gemm_nt(&du, p.get(self.fc1_w), &mut dinput, n, hid, 2 * w);
        let mut ds = vec![0.0; n * w];
        for i in 0..n {
            ds[i * w..(i + 1) * w].copy_from_slice(&dinput[i * 2 * w..i * 2 * w + w]);
        }
        ds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normals;

    fn tokens(seed: u64, n: usize, w: usize) -> Mat {
        Mat::from_vec(n, w, standard_normals(&mut rng_from_seed(seed), n * w))
    }

    #[test]
    fn bias_sets_activity_when_weights_are_zero() {
        let mut h = EventHead::new(4, 6);
        let s = tokens(1, 5, 4);
        assert!(h.activity(&s, 0.2).unwrap().iter().all(|&a| a == 0.5));
        h.set_bias(-6.0);
        for a in h.activity(&s, 0.2).unwrap() {
            assert!((a - 1.0 / (1.0 + 6f64.exp())).abs() < 1e-15);
        }
        h.set_bias(6.0);
        for a in h.activity(&s, 0.2).unwrap() {
            assert!((a - 0.997_527_376_6).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_impact_activity_is_tiny() {
        let mut h = EventHead::new(4, 6);
        h.init_zero_impact(9);
        for seed in 0..5 {
            let s = tokens(seed, 7, 4);
            assert!(h.activity(&s, 0.9).unwrap().iter().all(|&a| a < 0.003));
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let h = EventHead::new(4, 6);
        assert!(h.activity(&tokens(0, 3, 5), 0.1).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut h = EventHead::new(4, 5);
        h.init_random(2);
        let s = tokens(3, 6, 4);
        let probe = standard_normals(&mut rng_from_seed(4), 6);
        let t = 0.41;
        let loss = |h: &EventHead, s: &Mat| -> f64 {
            h.activity(s, t)
                .unwrap()
                .iter()
                .zip(&probe)
                .map(|(a, p)| a * p)
                .sum()
        };
        let cache = h.forward_cached(&s, t).unwrap();
        let mut grads = h.params.zero_grads();
        let ds = h.backward(&cache, &probe, &mut grads);
        let eps = 1e-6;
        for i in 0..h.params.len() {
            let mut hp = h.clone();
            hp.params.data[i] += eps;
            let mut hm = h.clone();
            hm.params.data[i] -= eps;
            let fd = (loss(&hp, &s) - loss(&hm, &s)) / (2.0 * eps);
            assert!((fd - grads.data[i]).abs() < 1e-7, "param {i}");
        }
        for i in 0..s.data.len() {
            let mut sp = s.clone();
            sp.data[i] += eps;
            let mut sm = s.clone();
            sm.data[i] -= eps;
            let fd = (loss(&h, &sp) - loss(&h, &sm)) / (2.0 * eps);
            assert!((fd - ds[i]).abs() < 1e-7, "token {i}");
        }
    }
}
