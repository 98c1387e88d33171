//! Contrastive, multiple-instance and self-supervised objectives.
//!
//! All losses are averaged over the images of a batch. Similarities are
//! cosine similarities scaled by `exp(log_inv_tau)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cosine_matrix, cosine_rows, Segments, Tensor, Var};

/// Term weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub local: f64,
    pub global: f64,
    pub simsiam: f64,
    pub mirrored: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            local: 0.5,
            global: 0.5,
            simsiam: 0.5,
            mirrored: 0.25,
        }
    }
}

impl LossWeights {
    pub fn new(local: f64, global: f64, simsiam: f64, mirrored: f64) -> Result<Self> {
        let w = Self {
            local,
            global,
            simsiam,
            mirrored,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight `{name}` must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("local", self.local),
            ("global", self.global),
            ("simsiam", self.simsiam),
            ("mirrored", self.mirrored),
        ]
    }

    /// Whether the augmented views are needed at all.
    pub fn needs_views(&self) -> bool {
        self.simsiam > 0.0 || self.mirrored > 0.0
    }
}

/// How the per-sentence term of the local loss is reduced over a report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceReduction {
    #[default]
    Sum,
    Mean,
}

/// Which objective drives the local branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalObjective {
    #[default]
    Asymmetric,
    Milnce,
}

/// Per-term values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub local: f64,
    pub global: f64,
    pub simsiam: f64,
    pub mirrored: f64,
    pub total: f64,
}

/// `cos(a_i, b_j) * exp(log_inv_tau)`, `[N, d] x [M, d] -> [N, M]`.
pub fn scaled_similarity<'t>(a: &Var<'t>, b: &Var<'t>, log_inv_tau: &Var<'t>) -> Result<Var<'t>> {
    cosine_matrix(a, b)?.mul_scalar(&log_inv_tau.exp())
}

fn check_partition(images: &Var<'_>, sentences: &Var<'_>, segs: &Segments) -> Result<()> {
    let (n, m) = (images.shape()[0], sentences.shape()[0]);
    if n != segs.len() || m != segs.total() {
        return Err(Error::Validation(format!(
            "sentence partition covers {} reports / {} sentences, embeddings have {n} / {m}",
            segs.len(),
            segs.total()
        )));
    }
    Ok(())
}

fn ownership_mask(segs: &Segments) -> Vec<bool> {
    let owners = segs.owners();
    let (n, m) = (segs.len(), segs.total());
    let mut mask = vec![false; n * m];
    for (c, &i) in owners.iter().enumerate() {
        mask[i * m + c] = true;
    }
    mask
}

/// Image-to-sentence term shared by both local objectives: for each image,
/// `-log(sum_own exp(S) / sum_all exp(S))`. Returns `[N, 1]`.
fn image_to_sentences<'t>(s: &Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
    s.logsumexp_rows()?.sub(&s.logsumexp_rows_masked(mask)?)
}

/// Per-sentence `-log(exp(S[owner, c]) / sum_j exp(S[j, c]))`, `[M, 1]`.
fn sentence_to_images<'t>(s: &Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
    let m = s.shape()[1];
    let posmask = Tensor::new(
        &s.shape(),
        mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    let positives = s
        .mul(&s.tape().constant(posmask))?
        .sum_axis0()?
        .reshape(&[m, 1])?;
    s.transpose()?.logsumexp_rows()?.sub(&positives)
}

/// Local image-sentence loss with the split symmetry: the image side uses a
/// multi-positive numerator, the sentence side one InfoNCE per sentence.
pub fn local_loss<'t>(
    local: &Var<'t>,
    sentences: &Var<'t>,
    segs: &Segments,
    log_inv_tau: &Var<'t>,
    reduction: SentenceReduction,
) -> Result<Var<'t>> {
    check_partition(local, sentences, segs)?;
    let s = scaled_similarity(local, sentences, log_inv_tau)?;
    let mask = ownership_mask(segs);
    let a = image_to_sentences(&s, &mask)?;
    let per_sentence = sentence_to_images(&s, &mask)?;
    let b = match reduction {
        SentenceReduction::Sum => per_sentence.segment_sum(segs)?,
        SentenceReduction::Mean => per_sentence.segment_mean(segs)?,
    };
    Ok(a.add(&b)?.mean())
}

/// Symmetric multi-positive NCE: both directions pool the report's
/// sentences in the numerator.
pub fn milnce_loss<'t>(
    local: &Var<'t>,
    sentences: &Var<'t>,
    segs: &Segments,
    log_inv_tau: &Var<'t>,
) -> Result<Var<'t>> {
    check_partition(local, sentences, segs)?;
    let s = scaled_similarity(local, sentences, log_inv_tau)?;
    let mask = ownership_mask(segs);
    let a = image_to_sentences(&s, &mask)?;
    let column_lse = s.transpose()?.logsumexp_rows()?;
    let b = column_lse
        .segment_logsumexp(segs)?
        .sub(&s.logsumexp_rows_masked(&mask)?)?;
    Ok(a.add(&b)?.mean())
}

/// Symmetric InfoNCE between images and pooled reports.
pub fn global_loss<'t>(global: &Var<'t>, reports: &Var<'t>, log_inv_tau: &Var<'t>) -> Result<Var<'t>> {
    let (n, r) = (global.shape()[0], reports.shape()[0]);
    if n != r {
        return Err(Error::shape("global_loss", &global.shape(), &reports.shape()));
    }
    let s = scaled_similarity(global, reports, log_inv_tau)?;
    let eye = s.tape().constant(Tensor::identity(n));
    let diag = s.mul(&eye)?.sum_axis1()?;
    let rows = s.logsumexp_rows()?;
    let cols = s.transpose()?.logsumexp_rows()?;
    Ok(rows.add(&cols)?.sub(&diag.scale(2.0))?.mean())
}

/// Negative symmetrized cosine between each view's prediction and the
/// other view's detached projection, averaged over the batch.
pub fn simsiam_loss<'t>(
    pred1: &Var<'t>,
    proj1: &Var<'t>,
    pred2: &Var<'t>,
    proj2: &Var<'t>,
) -> Result<Var<'t>> {
    let a = cosine_rows(pred1, &proj2.detach())?;
    let b = cosine_rows(pred2, &proj1.detach())?;
    Ok(a.add(&b)?.mean().neg())
}

/// Image-side projections of one augmented view.
#[derive(Clone, Copy, Debug)]
pub struct ViewProjections<'t> {
    pub global: Var<'t>,
    pub local: Var<'t>,
}

/// Local objective selected by `objective`.
pub fn local_objective_loss<'t>(
    objective: LocalObjective,
    reduction: SentenceReduction,
    local: &Var<'t>,
    sentences: &Var<'t>,
    segs: &Segments,
    log_inv_tau: &Var<'t>,
) -> Result<Var<'t>> {
    match objective {
        LocalObjective::Asymmetric => local_loss(local, sentences, segs, log_inv_tau, reduction),
        LocalObjective::Milnce => milnce_loss(local, sentences, segs, log_inv_tau),
    }
}

/// Global plus local loss of every augmented view against the clean-pass
/// text embeddings, with the clean-pass temperatures.
#[allow(clippy::too_many_arguments)]
pub fn mirrored_loss<'t>(
    views: &[ViewProjections<'t>],
    sentences: &Var<'t>,
    reports: &Var<'t>,
    segs: &Segments,
    log_inv_tau_local: &Var<'t>,
    log_inv_tau_global: &Var<'t>,
    objective: LocalObjective,
    reduction: SentenceReduction,
) -> Result<Var<'t>> {
    let mut total = sentences.tape().constant(Tensor::scalar(0.0));
    for v in views {
        let g = global_loss(&v.global, reports, log_inv_tau_global)?;
        let l = local_objective_loss(objective, reduction, &v.local, sentences, segs, log_inv_tau_local)?;
        total = total.add(&g)?.add(&l)?;
    }
    Ok(total)
}
