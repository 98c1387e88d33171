use rand::Rng;

use super::layers::{Init, Linear, Mlp};
use crate::error::{Error, Result};
use crate::numeric::{Bound, ParamId, ParamStore, Tensor, Var};

/// Upper bound on the inverse temperature.
pub const MAX_INV_TAU: f64 = 100.0;

/// The six projection heads.
///
/// `global`/`local` both read the image embedding, `sentence`/`report` read
/// text embeddings, `encoder` (3 layers) and `predictor` (2 layers) form the
/// self-supervised branch on top of the image embedding.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub global: Linear,
    pub local: Linear,
    pub sentence: Linear,
    pub report: Linear,
    pub encoder: Mlp,
    pub predictor: Mlp,
}

impl ProjectionHeads {
    pub fn new(
        store: &mut ParamStore,
        d_enc: usize,
        d_proj: usize,
        d_ss: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            global: Linear::new(store, "head.global", d_enc, d_proj, init, rng)?,
            local: Linear::new(store, "head.local", d_enc, d_proj, init, rng)?,
            sentence: Linear::new(store, "head.sentence", d_enc, d_proj, init, rng)?,
            report: Linear::new(store, "head.report", d_enc, d_proj, init, rng)?,
            encoder: Mlp::new(store, "head.ss_encoder", &[d_enc, d_ss, d_ss, d_ss], rng)?,
            predictor: Mlp::new(store, "head.ss_predictor", &[d_ss, d_ss, d_ss], rng)?,
        })
    }
}

/// Learned log inverse temperatures of the local and global spaces.
#[derive(Clone, Debug)]
pub struct Temperatures {
    pub local: ParamId,
    pub global: ParamId,
}

impl Temperatures {
    pub fn new(store: &mut ParamStore, initial_tau: f64) -> Result<Self> {
        if !(initial_tau > 0.0 && 1.0 / initial_tau <= MAX_INV_TAU) {
            return Err(Error::Config(format!(
                "initial temperature {initial_tau} must lie in [{}, inf)",
                1.0 / MAX_INV_TAU
            )));
        }
        let lit = Tensor::scalar(-initial_tau.ln());
        Ok(Self {
            local: store.register("temperature.local", lit.clone())?,
            global: store.register("temperature.global", lit)?,
        })
    }

    pub fn local_var<'t>(&self, p: &Bound<'t>) -> Var<'t> {
        p.var(self.local)
    }

    pub fn global_var<'t>(&self, p: &Bound<'t>) -> Var<'t> {
        p.var(self.global)
    }

    /// `τ_L`, from the stored log inverse.
    pub fn tau_local(&self, store: &ParamStore) -> f64 {
        (-store.get(self.local).tensor.item()).exp()
    }

    pub fn tau_global(&self, store: &ParamStore) -> f64 {
        (-store.get(self.global).tensor.item()).exp()
    }

    /// Caps `1/τ` at [`MAX_INV_TAU`].
    pub fn clamp(&self, store: &mut ParamStore) {
        let cap = MAX_INV_TAU.ln();
        for id in [self.local, self.global] {
            for v in store.get_mut(id).tensor.data_mut() {
                *v = v.min(cap);
            }
        }
    }
}
