use rand::Rng;

use super::layers::ConvBlock;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::numeric::{Bound, ParamStore, Tape, Tensor, Var};

/// Strided convolution stages followed by global average pooling.
/// The last stage's channel count is the embedding width.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub stages: Vec<ConvBlock>,
    pub input_size: usize,
    pub channels: usize,
    pub out_dim: usize,
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        input_size: usize,
        channels: usize,
        stage_channels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let out_dim = *stage_channels
            .last()
            .ok_or_else(|| Error::Config("image encoder needs at least one stage".into()))?;
        let mut stages = Vec::with_capacity(stage_channels.len());
        let mut prev = channels;
        for (i, &c) in stage_channels.iter().enumerate() {
            stages.push(ConvBlock::new(store, &format!("image.conv{i}"), prev, c, 3, 2, 1, rng)?);
            prev = c;
        }
        Ok(Self {
            stages,
            input_size,
            channels,
            out_dim,
        })
    }

    /// Packs images into an `[N, C, H, W]` constant.
    pub fn input<'t>(&self, tape: &'t Tape, images: &[&Image]) -> Result<Var<'t>> {
        if images.is_empty() {
            return Err(Error::Validation("no images to encode".into()));
        }
        let (s, c) = (self.input_size, self.channels);
        let mut data = Vec::with_capacity(images.len() * c * s * s);
        for img in images {
            if img.height() != s || img.width() != s || img.channels() != c {
                return Err(Error::shape(
                    "encode_image",
                    &[img.height(), img.width(), img.channels()],
                    &[s, s, c],
                ));
            }
            data.extend(img.to_chw());
        }
        Ok(tape.constant(Tensor::new(&[images.len(), c, s, s], data)?))
    }

    /// `[N, C, H, W] -> [N, d_enc]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let mut h = *x;
        for stage in &self.stages {
            h = stage.forward(p, &h)?;
        }
        h.global_avg_pool()
    }
}
