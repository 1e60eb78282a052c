//! Velocity-field interface and its implementations.

mod dit;
mod head;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use dit::{DitCache, DitConfig, MicroDiT};
pub use head::{EventHead, HeadCache, ACTIVITY_INIT_BIAS};

use crate::error::{EvdError, Result};
use crate::latent::{tokenize, LatentVideo, PatchSpec};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub embedding: Vec<f64>,
    pub is_null: bool,
}

impl Conditioning {
    pub fn new(embedding: Vec<f64>) -> Self {
        Conditioning {
            embedding,
            is_null: false,
        }
    }

    /// The all-zero embedding used for the unconditional branch.
    pub fn null(width: usize) -> Self {
        Conditioning {
            embedding: vec![0.0; width],
            is_null: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub v_hat: LatentVideo,
    /// Last hidden state per token, `N x width`.
    pub final_tokens: Mat,
}

pub trait VelocityField: Sync {
    fn forward(&self, z_t: &LatentVideo, y: &Conditioning, t: f64) -> Result<FieldOutput>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn forward(&self, z_t: &LatentVideo, y: &Conditioning, t: f64) -> Result<FieldOutput> {
        (**self).forward(z_t, y, t)
    }
}

/// Returns `z1 - z0` for every input. Final tokens are the tokenized target.
#[derive(Debug, Clone)]
pub struct OracleField {
    target: LatentVideo,
    tokens: Mat,
}

pub fn oracle_velocity_field(
    z0: &LatentVideo,
    z1: &LatentVideo,
    spec: PatchSpec,
) -> Result<OracleField> {
    z0.check_same_shape(z1, "oracle z0/z1")?;
    let target = z1.sub(z0);
    let tok = tokenize(&target, spec)?;
    Ok(OracleField {
        target,
        tokens: Mat::from_vec(tok.n, tok.d, tok.data),
    })
}

impl VelocityField for OracleField {
    fn forward(&self, z_t: &LatentVideo, _y: &Conditioning, _t: f64) -> Result<FieldOutput> {
        z_t.check_same_shape(&self.target, "oracle input")?;
        Ok(FieldOutput {
            v_hat: self.target.clone(),
            final_tokens: self.tokens.clone(),
        })
    }
}

/// Wraps a field and counts forward evaluations.
#[derive(Debug)]
pub struct CountingField<F> {
    pub inner: F,
    count: AtomicUsize,
}

impl<F> CountingField<F> {
    pub fn new(inner: F) -> Self {
        CountingField {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::SeqCst);
    }
}

impl<F: VelocityField> VelocityField for CountingField<F> {
    fn forward(&self, z_t: &LatentVideo, y: &Conditioning, t: f64) -> Result<FieldOutput> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.forward(z_t, y, t)
    }
}

pub(crate) fn check_width(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(EvdError::shape(
            what,
            format!("expected width {want}, got {got}"),
        ));
    }
    Ok(())
}
