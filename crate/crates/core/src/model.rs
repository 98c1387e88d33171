//! The full dual-encoder model and its training objective.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Image};
use crate::encoders::{AttentionPool, ImageEncoder, Init, ProjectionHeads, Temperatures, TextEncoder, Vocab};
use crate::error::{Error, Result};
use crate::losses::{
    global_loss, local_objective_loss, mirrored_loss, simsiam_loss, LocalObjective, LossBreakdown,
    LossWeights, SentenceReduction, ViewProjections,
};
use crate::numeric::checkpoint::{self, Precision};
use crate::numeric::{Bound, ParamStore, Segments, Tape, Tensor, Var};

pub const VOCAB_FILE: &str = "vocab.txt";
const MODEL_META_KEY: &str = "model";

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Output channels of each stride-2 convolution stage; the last one is `d_enc`.
    pub image_stages: Vec<usize>,
    pub d_enc: usize,
    pub d_proj: usize,
    pub d_ss: usize,
    pub initial_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            image_stages: vec![16, 32, 64],
            d_enc: 64,
            d_proj: 32,
            d_ss: 32,
            initial_temperature: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("d_enc", self.d_enc),
            ("d_proj", self.d_proj),
            ("d_ss", self.d_ss),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.image_stages.is_empty() || self.image_stages.contains(&0) {
            return Err(Error::Config("model.image_stages must be non-empty and positive".into()));
        }
        if self.image_stages.last() != Some(&self.d_enc) {
            return Err(Error::Config(format!(
                "last image stage ({}) must equal d_enc ({})",
                self.image_stages.last().unwrap(),
                self.d_enc
            )));
        }
        Ok(())
    }
}

/// Which terms the objective uses and how.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveSettings {
    pub weights: LossWeights,
    pub local_objective: LocalObjective,
    pub sentence_reduction: SentenceReduction,
}

/// Projected embeddings of a batch.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingBundle<'t> {
    /// `p_G(z_I)`, `[N, d_proj]`.
    pub global: Var<'t>,
    /// `p_L(z_I)`, `[N, d_proj]`.
    pub local: Var<'t>,
    /// `p_S(z_s)` for every sentence, `[M, d_proj]`.
    pub sentences: Var<'t>,
    /// `p_R(z_R)`, `[N, d_proj]`.
    pub reports: Var<'t>,
    /// Attention-pool weights of every sentence, `[M, 1]`.
    pub pool_weights: Var<'t>,
}

/// Image encoder, text encoder, pooling, heads and temperatures over one
/// parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub pool: AttentionPool,
    pub heads: ProjectionHeads,
    pub temps: Temperatures,
}

impl Model {
    pub fn new(config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        Self::with_head_init(config, vocab, seed, Init::Uniform)
    }

    pub fn with_head_init(config: &ModelConfig, vocab: Vocab, seed: u64, head_init: Init) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let image = ImageEncoder::new(
            &mut params,
            config.image_size,
            config.channels,
            &config.image_stages,
            &mut rng,
        )?;
        let text = TextEncoder::new(&mut params, vocab, config.d_enc, &mut rng)?;
        let pool = AttentionPool::new(&mut params, config.d_enc, &mut rng)?;
        let heads = ProjectionHeads::new(
            &mut params,
            config.d_enc,
            config.d_proj,
            config.d_ss,
            head_init,
            &mut rng,
        )?;
        let temps = Temperatures::new(&mut params, config.initial_temperature)?;
        Ok(Self {
            config: config.clone(),
            params,
            image,
            text,
            pool,
            heads,
            temps,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.text.vocab
    }

    /// Writes parameters, vocabulary and architecture to `dir`.
    pub fn save(&self, dir: &Path, precision: Precision, meta: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = meta.clone();
        let arch = serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        meta.insert(MODEL_META_KEY.into(), arch);
        checkpoint::save(dir, &self.params, precision, &meta)?;
        self.vocab().save(&dir.join(VOCAB_FILE))
    }

    /// Rebuilds a model saved with [`Model::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let arch = ck
            .meta
            .get(MODEL_META_KEY)
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks model architecture".into()))?;
        let config: ModelConfig =
            serde_json::from_str(arch).map_err(|e| Error::Checkpoint(format!("model architecture: {e}")))?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let mut model = Self::new(&config, vocab, 0)?;
        if ck.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, architecture expects {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        for p in model.params.iter_mut() {
            let saved = ck
                .params
                .by_name(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if saved.tensor.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    saved.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = saved.tensor.clone();
        }
        Ok(model)
    }

    /// `z_I` for each image, `[N, d_enc]`.
    pub fn encode_images<'t>(&self, p: &Bound<'t>, tape: &'t Tape, images: &[&Image]) -> Result<Var<'t>> {
        let x = self.image.input(tape, images)?;
        self.image.forward(p, &x)
    }

    /// `z_s` for each sentence, `[M, d_enc]`.
    pub fn encode_sentences<'t>(&self, p: &Bound<'t>, tape: &'t Tape, sentences: &[&str]) -> Result<Var<'t>> {
        self.text.forward(p, tape, sentences)
    }

    /// `(z_R [S, d_enc], weights [M, 1])`.
    pub fn pool<'t>(&self, p: &Bound<'t>, sentences: &Var<'t>, segs: &Segments) -> Result<(Var<'t>, Var<'t>)> {
        self.pool.forward(p, sentences, segs)
    }

    /// Projects image, sentence and pooled report embeddings.
    pub fn project<'t>(
        &self,
        p: &Bound<'t>,
        z_images: &Var<'t>,
        z_sentences: &Var<'t>,
        segs: &Segments,
    ) -> Result<EmbeddingBundle<'t>> {
        let (z_reports, pool_weights) = self.pool(p, z_sentences, segs)?;
        Ok(EmbeddingBundle {
            global: self.heads.global.forward(p, z_images)?,
            local: self.heads.local.forward(p, z_images)?,
            sentences: self.heads.sentence.forward(p, z_sentences)?,
            reports: self.heads.report.forward(p, &z_reports)?,
            pool_weights,
        })
    }

    /// Full forward pass over a batch.
    pub fn embed<'t>(&self, p: &Bound<'t>, tape: &'t Tape, batch: &Batch<'_>) -> Result<EmbeddingBundle<'t>> {
        let images: Vec<&Image> = batch.records.iter().map(|r| &r.image).collect();
        let z_i = self.encode_images(p, tape, &images)?;
        let z_s = self.encode_sentences(p, tape, &batch.flat_sentences())?;
        self.project(p, &z_i, &z_s, &batch.segments)
    }

    fn local_term<'t>(
        &self,
        settings: &ObjectiveSettings,
        local: &Var<'t>,
        sentences: &Var<'t>,
        segs: &Segments,
        lit: &Var<'t>,
    ) -> Result<Var<'t>> {
        local_objective_loss(
            settings.local_objective,
            settings.sentence_reduction,
            local,
            sentences,
            segs,
            lit,
        )
    }

    /// Weighted training objective on `batch`. `views` holds the two
    /// augmented versions of the batch images and is required when the
    /// self-supervised or mirrored term is active.
    pub fn objective<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        batch: &Batch<'_>,
        views: Option<(&[Image], &[Image])>,
        settings: &ObjectiveSettings,
    ) -> Result<(Var<'t>, LossBreakdown)> {
        let w = settings.weights;
        w.validate()?;
        let segs = &batch.segments;
        let mut total = tape.constant(Tensor::scalar(0.0));
        let mut parts = LossBreakdown::default();
        let needs_text = w.local > 0.0 || w.global > 0.0 || w.mirrored > 0.0;
        let lit_l = self.temps.local_var(p);
        let lit_g = self.temps.global_var(p);

        let text = if needs_text {
            let z_s = self.encode_sentences(p, tape, &batch.flat_sentences())?;
            let (z_r, _) = self.pool(p, &z_s, segs)?;
            Some((
                self.heads.sentence.forward(p, &z_s)?,
                self.heads.report.forward(p, &z_r)?,
            ))
        } else {
            None
        };

        if w.local > 0.0 || w.global > 0.0 {
            let images: Vec<&Image> = batch.records.iter().map(|r| &r.image).collect();
            let z_i = self.encode_images(p, tape, &images)?;
            let (p_s, p_r) = text.as_ref().expect("text embedded");
            if w.local > 0.0 {
                let l = self.local_term(settings, &self.heads.local.forward(p, &z_i)?, p_s, segs, &lit_l)?;
                parts.local = l.item();
                total = total.add(&l.scale(w.local))?;
            }
            if w.global > 0.0 {
                let g = global_loss(&self.heads.global.forward(p, &z_i)?, p_r, &lit_g)?;
                parts.global = g.item();
                total = total.add(&g.scale(w.global))?;
            }
        }

        if w.needs_views() {
            let (v1, v2) = views.ok_or_else(|| {
                Error::Validation("augmented views are required by the active loss terms".into())
            })?;
            if v1.len() != batch.len() || v2.len() != batch.len() {
                return Err(Error::shape("objective views", &[v1.len(), v2.len()], &[batch.len()]));
            }
            let z1 = self.encode_images(p, tape, &v1.iter().collect::<Vec<_>>())?;
            let z2 = self.encode_images(p, tape, &v2.iter().collect::<Vec<_>>())?;
            if w.simsiam > 0.0 {
                let e1 = self.heads.encoder.forward(p, &z1)?;
                let e2 = self.heads.encoder.forward(p, &z2)?;
                let pr1 = self.heads.predictor.forward(p, &e1)?;
                let pr2 = self.heads.predictor.forward(p, &e2)?;
                let s = simsiam_loss(&pr1, &e1, &pr2, &e2)?;
                parts.simsiam = s.item();
                total = total.add(&s.scale(w.simsiam))?;
            }
            if w.mirrored > 0.0 {
                let (p_s, p_r) = text.as_ref().expect("text embedded");
                let views = [&z1, &z2]
                    .into_iter()
                    .map(|z| {
                        Ok(ViewProjections {
                            global: self.heads.global.forward(p, z)?,
                            local: self.heads.local.forward(p, z)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let m = mirrored_loss(
                    &views,
                    p_s,
                    p_r,
                    segs,
                    &lit_l,
                    &lit_g,
                    settings.local_objective,
                    settings.sentence_reduction,
                )?;
                parts.mirrored = m.item();
                total = total.add(&m.scale(w.mirrored))?;
            }
        }
        parts.total = total.item();
        Ok((total, parts))
    }

    /// Local and global image projections as plain tensors, computed in
    /// independent chunks.
    pub fn image_projections(&self, images: &[&Image], chunk: usize) -> Result<(Tensor, Tensor)> {
        if images.is_empty() {
            return Err(Error::Validation("no images to project".into()));
        }
        let parts: Vec<(Vec<f64>, Vec<f64>)> = images
            .par_chunks(chunk.max(1))
            .map(|c| {
                let tape = Tape::new();
                let p = self.params.bind_frozen(&tape);
                let z = self.encode_images(&p, &tape, c)?;
                let l = self.heads.local.forward(&p, &z)?.value().data().to_vec();
                let g = self.heads.global.forward(&p, &z)?.value().data().to_vec();
                Ok((l, g))
            })
            .collect::<Result<_>>()?;
        let (mut l, mut g) = (Vec::new(), Vec::new());
        for (a, b) in parts {
            l.extend(a);
            g.extend(b);
        }
        let d = self.config.d_proj;
        Ok((Tensor::new(&[images.len(), d], l)?, Tensor::new(&[images.len(), d], g)?))
    }

    /// `p_S(θ(q))` for each query, `[Q, d_proj]`.
    pub fn sentence_projections(&self, queries: &[&str]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let z = self.encode_sentences(&p, &tape, queries)?;
        Ok((*self.heads.sentence.forward(&p, &z)?.value()).clone())
    }

    /// `p_R(pool([θ(q)]))`: each query as a one-sentence report, `[Q, d_proj]`.
    pub fn report_projections(&self, queries: &[&str]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let z = self.encode_sentences(&p, &tape, queries)?;
        let segs = Segments::from_lengths(&vec![1; queries.len()])?;
        let (z_r, _) = self.pool(&p, &z, &segs)?;
        Ok((*self.heads.report.forward(&p, &z_r)?.value()).clone())
    }
}
