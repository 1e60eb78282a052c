//! A small pre-norm transformer over spatiotemporal patch tokens with a
//! hand-written backward pass.
//!
//! ```text
//! h0 = Tok(z) Wp + bp + pos + (gamma(t) Wt + bt) + (y Wc + bc)
//! h  = h + Attn(LN1(h));  h = h + MLP(LN2(h))      (x layers)
//! s  = LNf(h)                                        final tokens
//! v  = UnTok(s Wo + bo)
//! ```

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_width, Conditioning, FieldOutput, VelocityField};
use crate::error::{EvdError, Result};
use crate::latent::{tokenize, untokenize, LatentVideo, PatchSpec, Shape, TokenField};
use crate::params::{Grads, ParamId, ParamStore};
use crate::rng::{derive_seed, rng_from_seed, Rng, STREAM_INIT};
use crate::tensor::{
    add_row_bias, col_sum_into, gelu, gelu_grad, gemm, gemm_nt, gemm_tn, layer_norm,
    layer_norm_backward, time_embedding, Mat, NormCache,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub shape: Shape,
    pub spec: PatchSpec,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_cond: usize,
    pub mlp_ratio: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            shape: Shape::new(16, 8, 8, 4),
            spec: PatchSpec::new(2, 2, 2),
            d_model: 32,
            layers: 2,
            heads: 4,
            d_cond: 8,
            mlp_ratio: 4,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.grid(self.shape)?;
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(EvdError::config("d_model", "must be positive and even"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(EvdError::config("heads", "must divide d_model"));
        }
        if self.layers == 0 || self.mlp_ratio == 0 || self.d_cond == 0 {
            return Err(EvdError::config(
                "model",
                "layers, mlp_ratio, d_cond must be positive",
            ));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.spec.grid(self.shape).map(|g| g.tokens()).unwrap_or(0)
    }

    pub fn token_width(&self) -> usize {
        self.spec.token_width(self.shape.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct DitIds {
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    time_w: ParamId,
    time_b: ParamId,
    cond_w: ParamId,
    cond_b: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroDiT {
    pub cfg: DitConfig,
    pub params: ParamStore,
    ids: DitIds,
}

struct BlockCache {
    ln1: NormCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    /// Attention probabilities, one `N x N` matrix per head.
    probs: Vec<Vec<f64>>,
    attn: Vec<f64>,
    ln2: NormCache,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Activations saved by [`MicroDiT::forward_cached`] for the backward pass.
pub struct DitCache {
    x: Vec<f64>,
    temb: Vec<f64>,
    cond: Vec<f64>,
    blocks: Vec<BlockCache>,
    lnf: NormCache,
    fin: Vec<f64>,
}

impl MicroDiT {
    /// Registers all parameters, zero valued.
    pub fn new(cfg: DitConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.tokens();
        let dt = cfg.token_width();
        let d = cfg.d_model;
        let hid = d * cfg.mlp_ratio;
        let mut p = ParamStore::new();
        let patch_w = p.add("dit.patch.w", &[dt, d]);
        let patch_b = p.add("dit.patch.b", &[d]);
        let pos = p.add("dit.pos", &[n, d]);
        let time_w = p.add("dit.time.w", &[d, d]);
        let time_b = p.add("dit.time.b", &[d]);
        let cond_w = p.add("dit.cond.w", &[cfg.d_cond, d]);
        let cond_b = p.add("dit.cond.b", &[d]);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let name = |s: &str| format!("dit.blocks.{l}.{s}");
                BlockIds {
                    ln1_g: p.add(name("ln1.g"), &[d]),
                    ln1_b: p.add(name("ln1.b"), &[d]),
                    qkv_w: p.add(name("attn.qkv.w"), &[d, 3 * d]),
                    qkv_b: p.add(name("attn.qkv.b"), &[3 * d]),
                    proj_w: p.add(name("attn.proj.w"), &[d, d]),
                    proj_b: p.add(name("attn.proj.b"), &[d]),
                    ln2_g: p.add(name("ln2.g"), &[d]),
                    ln2_b: p.add(name("ln2.b"), &[d]),
                    fc1_w: p.add(name("mlp.fc1.w"), &[d, hid]),
                    fc1_b: p.add(name("mlp.fc1.b"), &[hid]),
                    fc2_w: p.add(name("mlp.fc2.w"), &[hid, d]),
                    fc2_b: p.add(name("mlp.fc2.b"), &[d]),
                }
            })
            .collect();
        let lnf_g = p.add("dit.final_ln.g", &[d]);
        let lnf_b = p.add("dit.final_ln.b", &[d]);
        let out_w = p.add("dit.out.w", &[d, dt]);
        let out_b = p.add("dit.out.b", &[dt]);
        Ok(MicroDiT {
            cfg,
            params: p,
            ids: DitIds {
                patch_w,
                patch_b,
                pos,
                time_w,
                time_b,
                cond_w,
                cond_b,
                blocks,
                lnf_g,
                lnf_b,
                out_w,
                out_b,
            },
        })
    }

    /// Small seeded random weights, unit layer-norm gains, zero biases and a
    /// zero output projection so the predicted field starts at exactly zero.
    pub fn init_zero_impact(&mut self, seed: u64) {
        let mut rng = rng_from_seed(derive_seed(seed, STREAM_INIT, 0));
        let ids = self.ids.clone();
        let p = &mut self.params;
        p.data.iter_mut().for_each(|v| *v = 0.0);
        fill_fan_in(p, ids.patch_w, &mut rng);
        fill_normal(p, ids.pos, 0.1, &mut rng);
        fill_fan_in(p, ids.time_w, &mut rng);
        fill_fan_in(p, ids.cond_w, &mut rng);
        for b in &ids.blocks {
            p.get_mut(b.ln1_g).fill(1.0);
            p.get_mut(b.ln2_g).fill(1.0);
            fill_fan_in(p, b.qkv_w, &mut rng);
            fill_fan_in(p, b.proj_w, &mut rng);
            fill_fan_in(p, b.fc1_w, &mut rng);
            fill_fan_in(p, b.fc2_w, &mut rng);
        }
        p.get_mut(ids.lnf_g).fill(1.0);
    }

    /// Every parameter random, including biases, gains and the output
    /// projection. Used for gradient checks.
    pub fn init_random(&mut self, seed: u64) {
        let mut rng = rng_from_seed(derive_seed(seed, STREAM_INIT, 1));
        let ids = self.ids.clone();
        let entries: Vec<_> = (0..self.params.entries.len()).map(ParamId).collect();
        for id in entries {
            let dims = self.params.entry(id).dims.clone();
            if dims.len() == 2 {
                fill_fan_in(&mut self.params, id, &mut rng);
            } else {
                fill_normal(&mut self.params, id, 0.1, &mut rng);
            }
        }
        let mut gains = vec![ids.lnf_g];
        for b in &ids.blocks {
            gains.push(b.ln1_g);
            gains.push(b.ln2_g);
        }
        for g in gains {
            self.params.get_mut(g).iter_mut().for_each(|v| *v += 1.0);
        }
    }

    pub fn forward_cached(
        &self,
        z_t: &LatentVideo,
        y: &Conditioning,
        t: f64,
    ) -> Result<(FieldOutput, DitCache)> {
        if z_t.shape != self.cfg.shape {
            return Err(EvdError::shape(
                "latent",
                format!("model expects {:?}, got {:?}", self.cfg.shape, z_t.shape),
            ));
        }
        check_width(y.embedding.len(), self.cfg.d_cond, "conditioning")?;
        let p = &self.params;
        let ids = &self.ids;
        let d = self.cfg.d_model;
        let tok = tokenize(z_t, self.cfg.spec)?;
        let (n, dt) = (tok.n, tok.d);

        let mut h = p.get(ids.pos).to_vec();
        gemm(&tok.data, p.get(ids.patch_w), &mut h, n, dt, d);
        add_row_bias(&mut h, p.get(ids.patch_b));
        let temb = time_embedding(t, d);
        let mut trow = p.get(ids.time_b).to_vec();
        gemm(&temb, p.get(ids.time_w), &mut trow, 1, d, d);
        add_row_bias(&mut h, &trow);
        let mut crow = p.get(ids.cond_b).to_vec();
        gemm(
            &y.embedding,
            p.get(ids.cond_w),
            &mut crow,
            1,
            self.cfg.d_cond,
            d,
        );
        add_row_bias(&mut h, &crow);

        let mut blocks = Vec::with_capacity(ids.blocks.len());
        for b in &ids.blocks {
            blocks.push(self.block_forward(b, &mut h, n));
        }

        let mut fin = vec![0.0; n * d];
        let lnf = layer_norm(&h, p.get(ids.lnf_g), p.get(ids.lnf_b), &mut fin);
        let mut out = vec![0.0; n * dt];
        gemm(&fin, p.get(ids.out_w), &mut out, n, d, dt);
        add_row_bias(&mut out, p.get(ids.out_b));
        let v_hat = untokenize(&TokenField {
            data: out,
            ..tok.clone()
        })?;
        let cache = DitCache {
            x: tok.data,
            temb,
            cond: y.embedding.clone(),
            blocks,
            lnf,
            fin: fin.clone(),
        };
        Ok((
            FieldOutput {
                v_hat,
                final_tokens: Mat::from_vec(n, d, fin),
            },
            cache,
        ))
    }

    fn block_forward(&self, b: &BlockIds, h: &mut [f64], n: usize) -> BlockCache {
        let p = &self.params;
        let d = self.cfg.d_model;
        let nh = self.cfg.heads;
        let dh = d / nh;
        let hid = d * self.cfg.mlp_ratio;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut a = vec![0.0; n * d];
        let ln1 = layer_norm(h, p.get(b.ln1_g), p.get(b.ln1_b), &mut a);
        let mut qkv = vec![0.0; n * 3 * d];
        gemm(&a, p.get(b.qkv_w), &mut qkv, n, d, 3 * d);
        add_row_bias(&mut qkv, p.get(b.qkv_b));

        let mut attn = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(nh);
        for head in 0..nh {
            let (q, k, v) = split_head(&qkv, n, d, head, dh);
            let mut s = vec![0.0; n * n];
            gemm_nt(&q, &k, &mut s, n, dh, n);
            for row in s.chunks_exact_mut(n) {
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x * scale - mx).exp();
                    sum += *x;
                }
                row.iter_mut().for_each(|x| *x /= sum);
            }
            let mut o = vec![0.0; n * dh];
            gemm(&s, &v, &mut o, n, n, dh);
            for i in 0..n {
                attn[i * d + head * dh..i * d + (head + 1) * dh]
                    .copy_from_slice(&o[i * dh..(i + 1) * dh]);
            }
            probs.push(s);
        }
        gemm(&attn, p.get(b.proj_w), h, n, d, d);
        add_row_bias(h, p.get(b.proj_b));

        let mut bb = vec![0.0; n * d];
        let ln2 = layer_norm(h, p.get(b.ln2_g), p.get(b.ln2_b), &mut bb);
        let mut u = vec![0.0; n * hid];
        gemm(&bb, p.get(b.fc1_w), &mut u, n, d, hid);
        add_row_bias(&mut u, p.get(b.fc1_b));
        let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
        gemm(&g, p.get(b.fc2_w), h, n, hid, d);
        add_row_bias(h, p.get(b.fc2_b));

        BlockCache {
            ln1,
            a,
            qkv,
            probs,
            attn,
            ln2,
            b: bb,
            u,
            g,
        }
    }

    /// Accumulates parameter gradients given the gradient of a scalar with
    /// respect to the output tokens (`N x D`, token order of `Tok`) and,
    /// optionally, the final hidden tokens (`N x d_model`).
    pub fn backward(
        &self,
        cache: &DitCache,
        d_out_tokens: &[f64],
        d_final: Option<&[f64]>,
        grads: &mut Grads,
    ) {
        let p = &self.params;
        let ids = &self.ids;
        let d = self.cfg.d_model;
        let dt = self.cfg.token_width();
        let n = cache.fin.len() / d;

        gemm_tn(&cache.fin, d_out_tokens, grads.slot(p, ids.out_w), n, d, dt);
        col_sum_into(d_out_tokens, grads.slot(p, ids.out_b));
        let mut dfin = match d_final {
            Some(df) => df.to_vec(),
            None => vec![0.0; n * d],
        };
        gemm_nt(d_out_tokens, p.get(ids.out_w), &mut dfin, n, dt, d);

        let mut dh = vec![0.0; n * d];
        {
            let (dg, db) = two_slots(grads, p, ids.lnf_g, ids.lnf_b);
            layer_norm_backward(&dfin, &cache.lnf, p.get(ids.lnf_g), dg, db, &mut dh);
        }

        for (b, bc) in ids.blocks.iter().zip(&cache.blocks).rev() {
            self.block_backward(b, bc, &mut dh, n, grads);
        }

        gemm_tn(&cache.x, &dh, grads.slot(p, ids.patch_w), n, dt, d);
        let mut colsum = vec![0.0; d];
        col_sum_into(&dh, &mut colsum);
        for (g, c) in grads.slot(p, ids.patch_b).iter_mut().zip(&colsum) {
            *g += c;
        }
        for (g, v) in grads.slot(p, ids.pos).iter_mut().zip(&dh) {
            *g += v;
        }
        gemm(&cache.temb, &colsum, grads.slot(p, ids.time_w), d, 1, d);
        for (g, c) in grads.slot(p, ids.time_b).iter_mut().zip(&colsum) {
            *g += c;
        }
        gemm(
            &cache.cond,
            &colsum,
            grads.slot(p, ids.cond_w),
            self.cfg.d_cond,
            1,
            d,
        );
        for (g, c) in grads.slot(p, ids.cond_b).iter_mut().zip(&colsum) {
            *g += c;
        }
    }

    fn block_backward(
        &self,
        b: &BlockIds,
        c: &BlockCache,
        dh: &mut [f64],
        n: usize,
        grads: &mut Grads,
    ) {
        let p = &self.params;
        let d = self.cfg.d_model;
        let nh = self.cfg.heads;
        let dhd = d / nh;
        let hid = d * self.cfg.mlp_ratio;
        let scale = 1.0 / (dhd as f64).sqrt();

        // MLP branch
        gemm_tn(&c.g, dh, grads.slot(p, b.fc2_w), n, hid, d);
        col_sum_into(dh, grads.slot(p, b.fc2_b));
        let mut du = vec![0.0; n * hid];
        gemm_nt(dh, p.get(b.fc2_w), &mut du, n, d, hid);
        for (x, &u) in du.iter_mut().zip(&c.u) {
            *x *= gelu_grad(u);
        }
        gemm_tn(&c.b, &du, grads.slot(p, b.fc1_w), n, d, hid);
        col_sum_into(&du, grads.slot(p, b.fc1_b));
        let mut dbb = vec![0.0; n * d];
        gemm_nt(&du, p.get(b.fc1_w), &mut dbb, n, hid, d);
        {
            let (dg, db) = two_slots(grads, p, b.ln2_g, b.ln2_b);
            layer_norm_backward(&dbb, &c.ln2, p.get(b.ln2_g), dg, db, dh);
        }

        // attention branch
        gemm_tn(&c.attn, dh, grads.slot(p, b.proj_w), n, d, d);
        col_sum_into(dh, grads.slot(p, b.proj_b));
        let mut dattn = vec![0.0; n * d];
        gemm_nt(dh, p.get(b.proj_w), &mut dattn, n, d, d);

        let mut dqkv = vec![0.0; n * 3 * d];
        for head in 0..nh {
            let (q, k, v) = split_head(&c.qkv, n, d, head, dhd);
            let probs = &c.probs[head];
            let mut dout = vec![0.0; n * dhd];
            for i in 0..n {
                dout[i * dhd..(i + 1) * dhd]
                    .copy_from_slice(&dattn[i * d + head * dhd..i * d + (head + 1) * dhd]);
            }
            let mut dv = vec![0.0; n * dhd];
            gemm_tn(probs, &dout, &mut dv, n, n, dhd);
            let mut ds = vec![0.0; n * n];
            gemm_nt(&dout, &v, &mut ds, n, dhd, n);
            for (drow, prow) in ds.chunks_exact_mut(n).zip(probs.chunks_exact(n)) {
                let inner: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (x, &pv) in drow.iter_mut().zip(prow) {
                    *x = pv * (*x - inner) * scale;
                }
            }
            let mut dq = vec![0.0; n * dhd];
            gemm(&ds, &k, &mut dq, n, n, dhd);
            let mut dk = vec![0.0; n * dhd];
            gemm_tn(&ds, &q, &mut dk, n, n, dhd);
            for i in 0..n {
                let row = &mut dqkv[i * 3 * d..(i + 1) * 3 * d];
                let src = i * dhd..(i + 1) * dhd;
                row[head * dhd..(head + 1) * dhd].copy_from_slice(&dq[src.clone()]);
                row[d + head * dhd..d + (head + 1) * dhd].copy_from_slice(&dk[src.clone()]);
                row[2 * d + head * dhd..2 * d + (head + 1) * dhd].copy_from_slice(&dv[src]);
            }
        }
        gemm_tn(&c.a, &dqkv, grads.slot(p, b.qkv_w), n, d, 3 * d);
        col_sum_into(&dqkv, grads.slot(p, b.qkv_b));
        let mut da = vec![0.0; n * d];
        gemm_nt(&dqkv, p.get(b.qkv_w), &mut da, n, 3 * d, d);
        let (dg, db) = two_slots(grads, p, b.ln1_g, b.ln1_b);
        layer_norm_backward(&da, &c.ln1, p.get(b.ln1_g), dg, db, dh);
    }
}

impl VelocityField for MicroDiT {
    fn forward(&self, z_t: &LatentVideo, y: &Conditioning, t: f64) -> Result<FieldOutput> {
        self.forward_cached(z_t, y, t).map(|(out, _)| out)
    }
}

fn split_head(
    qkv: &[f64],
    n: usize,
    d: usize,
    head: usize,
    dh: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut q = vec![0.0; n * dh];
    let mut k = vec![0.0; n * dh];
    let mut v = vec![0.0; n * dh];
    for i in 0..n {
        let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
        let cols = head * dh..(head + 1) * dh;
        q[i * dh..(i + 1) * dh].copy_from_slice(&row[cols.clone()]);
        k[i * dh..(i + 1) * dh].copy_from_slice(&row[d + cols.start..d + cols.end]);
        v[i * dh..(i + 1) * dh].copy_from_slice(&row[2 * d + cols.start..2 * d + cols.end]);
    }
    (q, k, v)
}

/// Two disjoint gradient slots. `a` must be registered before `b`.
fn two_slots<'a>(
    grads: &'a mut Grads,
    store: &ParamStore,
    a: ParamId,
    b: ParamId,
) -> (&'a mut [f64], &'a mut [f64]) {
    let ea = store.entry(a);
    let eb = store.entry(b);
    assert!(ea.offset + ea.len <= eb.offset);
    let (lo, hi) = grads.data.split_at_mut(eb.offset);
    (&mut lo[ea.offset..ea.offset + ea.len], &mut hi[..eb.len])
}

pub(crate) fn fill_fan_in(p: &mut ParamStore, id: ParamId, rng: &mut Rng) {
    let fan_in = p.entry(id).dims[0];
    fill_normal(p, id, 1.0 / (fan_in as f64).sqrt(), rng);
}

pub(crate) fn fill_normal(p: &mut ParamStore, id: ParamId, std: f64, rng: &mut Rng) {
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in p.get_mut(id) {
        *v = dist.sample(rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normals;

    fn micro() -> DitConfig {
        DitConfig {
            shape: Shape::new(2, 4, 4, 1),
            spec: PatchSpec::new(1, 2, 2),
            d_model: 8,
            layers: 2,
            heads: 2,
            d_cond: 3,
            mlp_ratio: 2,
        }
    }

    fn input(cfg: &DitConfig, seed: u64) -> (LatentVideo, Conditioning) {
        let mut rng = rng_from_seed(seed);
        let z = LatentVideo::from_vec(cfg.shape, standard_normals(&mut rng, cfg.shape.numel()))
            .unwrap();
        let y = Conditioning::new(standard_normals(&mut rng, cfg.d_cond));
        (z, y)
    }

    #[test]
    fn all_zero_parameters_give_zero_field() {
        let cfg = micro();
        let m = MicroDiT::new(cfg).unwrap();
        let (z, y) = input(&cfg, 1);
        let out = m.forward(&z, &y, 0.3).unwrap();
        assert!(out.v_hat.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_impact_init_gives_zero_field_and_is_seeded() {
        let cfg = micro();
        let mut a = MicroDiT::new(cfg).unwrap();
        let mut b = MicroDiT::new(cfg).unwrap();
        a.init_zero_impact(5);
        b.init_zero_impact(5);
        assert_eq!(a.params, b.params);
        let (z, y) = input(&cfg, 2);
        let out = a.forward(&z, &y, 0.7).unwrap();
        assert!(out.v_hat.data.iter().all(|&v| v == 0.0));
        assert!(out.final_tokens.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn null_conditioning_equals_zero_embedding() {
        let cfg = micro();
        let mut m = MicroDiT::new(cfg).unwrap();
        m.init_random(3);
        let (z, _) = input(&cfg, 4);
        let a = m.forward(&z, &Conditioning::null(cfg.d_cond), 0.5).unwrap();
        let b = m
            .forward(&z, &Conditioning::new(vec![0.0; cfg.d_cond]), 0.5)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = micro();
        for seed in 0..3 {
            let mut m = MicroDiT::new(cfg).unwrap();
            m.init_random(seed);
            let (z, y) = input(&cfg, 100 + seed);
            let t = 0.37;
            let probe = standard_normals(&mut rng_from_seed(seed), cfg.tokens() * cfg.d_model);
            // scalar = |v|^2 + <probe, final tokens>
            let loss = |m: &MicroDiT| {
                let out = m.forward(&z, &y, t).unwrap();
                out.v_hat.data.iter().map(|v| v * v).sum::<f64>()
                    + out
                        .final_tokens
                        .data
                        .iter()
                        .zip(&probe)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            };
            let (out, cache) = m.forward_cached(&z, &y, t).unwrap();
            let dv = out.v_hat.scale(2.0);
            let dtok = tokenize(&dv, cfg.spec).unwrap();
            let mut grads = m.params.zero_grads();
            m.backward(&cache, &dtok.data, Some(&probe), &mut grads);

            let h = 1e-5;
            for i in 0..m.params.len() {
                let orig = m.params.data[i];
                m.params.data[i] = orig + h;
                let up = loss(&m);
                m.params.data[i] = orig - h;
                let dn = loss(&m);
                m.params.data[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads.data[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(err < 1e-4, "seed {seed} param {i}: fd {fd} analytic {an}");
            }
        }
    }
}
