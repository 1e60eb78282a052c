//! Latent video tensors and spatiotemporal patchification.
//!
//! A [`LatentVideo`] is stored row-major as `[T, H, W, C]`. Tokenization
//! walks patches in raster order (patch time, then patch row, then patch
//! column) and flattens each patch as `(dt, dh, dw, c)` with channel fastest.

use serde::{Deserialize, Serialize};

use crate::error::{EvdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(t: usize, h: usize, w: usize, c: usize) -> Self {
        Shape { t, h, w, c }
    }

    pub fn numel(&self) -> usize {
        self.t * self.h * self.w * self.c
    }

    #[inline]
    pub fn index(&self, t: usize, h: usize, w: usize, c: usize) -> usize {
        ((t * self.h + h) * self.w + w) * self.c + c
    }

    /// Elements in one frame.
    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl LatentVideo {
    pub fn zeros(shape: Shape) -> Self {
        LatentVideo {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.t == 0 || shape.h == 0 || shape.w == 0 || shape.c == 0 {
            return Err(EvdError::shape(
                "latent",
                format!("empty axis in {shape:?}"),
            ));
        }
        if data.len() != shape.numel() {
            return Err(EvdError::shape(
                "latent",
                format!("expected {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(LatentVideo { shape, data })
    }

    #[inline]
    pub fn at(&self, t: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.shape.index(t, h, w, c)]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, h: usize, w: usize, c: usize) -> &mut f64 {
        let i = self.shape.index(t, h, w, c);
        &mut self.data[i]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.shape.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &LatentVideo, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(EvdError::shape(
                what,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &LatentVideo) -> LatentVideo {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + alpha * b)
            .collect();
        LatentVideo {
            shape: self.shape,
            data,
        }
    }

    pub fn sub(&self, other: &LatentVideo) -> LatentVideo {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        LatentVideo {
            shape: self.shape,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> LatentVideo {
        LatentVideo {
            shape: self.shape,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &LatentVideo) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

/// Patch grid extents `(nt, nh, nw)` for a given latent shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub nt: usize,
    pub nh: usize,
    pub nw: usize,
}

impl PatchGrid {
    pub fn tokens(&self) -> usize {
        self.nt * self.nh * self.nw
    }

    pub fn slice_len(&self) -> usize {
        self.nh * self.nw
    }

    #[inline]
    pub fn token(&self, tt: usize, hh: usize, ww: usize) -> usize {
        (tt * self.nh + hh) * self.nw + ww
    }
}

impl PatchSpec {
    pub fn new(pt: usize, ph: usize, pw: usize) -> Self {
        PatchSpec { pt, ph, pw }
    }

    pub fn grid(&self, shape: Shape) -> Result<PatchGrid> {
        for (axis, extent, p) in [
            ("t", shape.t, self.pt),
            ("h", shape.h, self.ph),
            ("w", shape.w, self.pw),
        ] {
            if p == 0 {
                return Err(EvdError::shape(axis, "patch extent must be positive"));
            }
            if extent % p != 0 {
                return Err(EvdError::shape(
                    axis,
                    format!("extent {extent} not divisible by patch size {p}"),
                ));
            }
        }
        Ok(PatchGrid {
            nt: shape.t / self.pt,
            nh: shape.h / self.ph,
            nw: shape.w / self.pw,
        })
    }

    pub fn token_width(&self, channels: usize) -> usize {
        self.pt * self.ph * self.pw * channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenField {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub spec: PatchSpec,
    pub latent_shape: Shape,
}

impl TokenField {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        self.spec.grid(self.latent_shape)
    }

    fn check(&self) -> Result<()> {
        let grid = self.grid()?;
        if grid.tokens() != self.n {
            return Err(EvdError::shape(
                "tokens",
                format!(
                    "spec implies {} tokens, field has {}",
                    grid.tokens(),
                    self.n
                ),
            ));
        }
        let d = self.spec.token_width(self.latent_shape.c);
        if d != self.d {
            return Err(EvdError::shape(
                "width",
                format!("spec implies width {d}, field has {}", self.d),
            ));
        }
        if self.data.len() != self.n * self.d {
            return Err(EvdError::shape("data", "length is not n*d"));
        }
        Ok(())
    }
}

/// Calls `f(token, offset, latent_index)` for every element, in token order.
fn for_each_patch_element(
    shape: Shape,
    spec: PatchSpec,
    grid: PatchGrid,
    mut f: impl FnMut(usize, usize, usize),
) {
    for tt in 0..grid.nt {
        for hh in 0..grid.nh {
            for ww in 0..grid.nw {
                let tok = grid.token(tt, hh, ww);
                let mut off = 0;
                for dt in 0..spec.pt {
                    for dh in 0..spec.ph {
                        for dw in 0..spec.pw {
                            let base = shape.index(
                                tt * spec.pt + dt,
                                hh * spec.ph + dh,
                                ww * spec.pw + dw,
                                0,
                            );
                            for c in 0..shape.c {
                                f(tok, off, base + c);
                                off += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn tokenize(z: &LatentVideo, spec: PatchSpec) -> Result<TokenField> {
    let grid = spec.grid(z.shape)?;
    let n = grid.tokens();
    let d = spec.token_width(z.shape.c);
    let mut data = vec![0.0; n * d];
    for_each_patch_element(z.shape, spec, grid, |tok, off, src| {
        data[tok * d + off] = z.data[src];
    });
    Ok(TokenField {
        n,
        d,
        data,
        spec,
        latent_shape: z.shape,
    })
}

pub fn untokenize(tok: &TokenField) -> Result<LatentVideo> {
    tok.check()?;
    let grid = tok.grid()?;
    let mut out = LatentVideo::zeros(tok.latent_shape);
    let d = tok.d;
    for_each_patch_element(tok.latent_shape, tok.spec, grid, |t, off, dst| {
        out.data[dst] = tok.data[t * d + off];
    });
    Ok(out)
}

/// Token index covering latent position `(t, h, w)`.
pub fn token_of(spec: PatchSpec, grid: PatchGrid, t: usize, h: usize, w: usize) -> usize {
    grid.token(t / spec.pt, h / spec.ph, w / spec.pw)
}
