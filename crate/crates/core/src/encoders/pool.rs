use rand::Rng;

use super::layers::{Init, Linear};
use crate::error::Result;
use crate::numeric::{Bound, ParamId, ParamStore, Segments, Tensor, Var};

/// Single-head attention pooling with a learned query vector.
///
/// For sentence embeddings `Z` of one report, the weights are
/// `softmax((Z W_k + b_k) q / sqrt(d))` and the pooled vector is the
/// weighted sum of `Z W_v + b_v`.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub query: ParamId,
    pub key: Linear,
    pub value: Linear,
    pub dim: usize,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let q = (0..dim).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        Ok(Self {
            query: store.register("pool.query", Tensor::row(&q))?,
            key: Linear::new(store, "pool.key", dim, dim, Init::Uniform, rng)?,
            value: Linear::new(store, "pool.value", dim, dim, Init::Uniform, rng)?,
            dim,
        })
    }

    /// Pools each segment of `sentences` (`[M, d]`) into one row.
    /// Returns `(pooled [S, d], weights [M, 1])`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        sentences: &Var<'t>,
        segments: &Segments,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let keys = self.key.forward(p, sentences)?;
        let scores = keys
            .matmul(&p.var(self.query).transpose()?)?
            .scale(1.0 / (self.dim as f64).sqrt());
        let weights = scores.segment_softmax(segments)?;
        let values = self.value.forward(p, sentences)?;
        let pooled = values.mul_col(&weights)?.segment_sum(segments)?;
        Ok((pooled, weights))
    }
}
