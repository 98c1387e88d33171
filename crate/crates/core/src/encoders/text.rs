use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;

use super::layers::{Init, Linear};
use crate::error::{Error, Result};
use crate::numeric::{Bound, ParamId, ParamStore, Segments, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Lowercases and splits on anything that is not alphanumeric, `-` or `'`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .map(|t| t.trim_matches(|c| c == '-' || c == '\''))
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Token table. Id 0 is padding, id 1 the unknown token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != "<pad>" || tokens[UNK] != "<unk>" {
            return Err(Error::Validation(
                "vocabulary must start with <pad> and <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary from a corpus, most frequent tokens first
    /// (ties broken alphabetically).
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for t in tokenize(text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens).expect("corpus tokens are unique and never reserved")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids of `text`. Text with no tokens maps to a single UNK.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        if text.trim().is_empty() {
            return Err(Error::Validation("cannot encode empty text".into()));
        }
        let ids: Vec<usize> = tokenize(text).iter().map(|t| self.id(t)).collect();
        Ok(if ids.is_empty() { vec![UNK] } else { ids })
    }

    /// One token per line; line index is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(String::from).collect())
    }
}

/// Token embedding, fixed sinusoidal positions, one residual self-attention
/// block, then the mean over tokens.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: Vocab,
    pub embedding: ParamId,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub dim: usize,
}

fn sinusoid(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, vocab: Vocab, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let table = (0..vocab.len() * dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Ok(Self {
            embedding: store.register("text.embedding", Tensor::new(&[vocab.len(), dim], table)?)?,
            query: Linear::new(store, "text.query", dim, dim, Init::Uniform, rng)?,
            key: Linear::new(store, "text.key", dim, dim, Init::Uniform, rng)?,
            value: Linear::new(store, "text.value", dim, dim, Init::Uniform, rng)?,
            output: Linear::new(store, "text.output", dim, dim, Init::Uniform, rng)?,
            vocab,
            dim,
        })
    }

    /// Encodes pre-tokenized sentences into `[sentences, d]`.
    pub fn forward_ids<'t>(&self, p: &Bound<'t>, tape: &'t Tape, ids: &[Vec<usize>]) -> Result<Var<'t>> {
        let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
        let segments = Segments::from_lengths(&lengths)?;
        let flat: Vec<usize> = ids.concat();
        let mut pos = Vec::with_capacity(flat.len() * self.dim);
        for &l in &lengths {
            for i in 0..l {
                pos.extend(sinusoid(i, self.dim));
            }
        }
        let positions = tape.constant(Tensor::new(&[flat.len(), self.dim], pos)?);
        let x = p.var(self.embedding).gather_rows(&flat)?.add(&positions)?;
        let q = self.query.forward(p, &x)?;
        let k = self.key.forward(p, &x)?;
        let v = self.value.forward(p, &x)?;
        let attended = q.block_attention(&k, &v, &segments, 1.0 / (self.dim as f64).sqrt())?;
        let h = x.add(&self.output.forward(p, &attended)?)?;
        h.segment_mean(&segments)
    }

    /// Encodes sentences, computing each distinct text once.
    pub fn forward<'t>(&self, p: &Bound<'t>, tape: &'t Tape, sentences: &[&str]) -> Result<Var<'t>> {
        if sentences.is_empty() {
            return Err(Error::Validation("no sentences to encode".into()));
        }
        let mut unique: Vec<&str> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        let mut rows = Vec::with_capacity(sentences.len());
        for &s in sentences {
            let i = *slot.entry(s).or_insert_with(|| {
                unique.push(s);
                unique.len() - 1
            });
            rows.push(i);
        }
        let ids = unique
            .iter()
            .map(|s| self.vocab.encode(s))
            .collect::<Result<Vec<_>>>()?;
        let encoded = self.forward_ids(p, tape, &ids)?;
        if unique.len() == sentences.len() {
            Ok(encoded)
        } else {
            encoded.gather_rows(&rows)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_keeps_hyphens() {
        assert_eq!(
            tokenize("Shows small Alpha-Opacity; no effusion."),
            vec!["shows", "small", "alpha-opacity", "no", "effusion"]
        );
        assert!(tokenize("...").is_empty());
    }

    #[test]
    fn vocab_reserves_pad_and_unk() {
        let v = Vocab::build(["b a a", "c"]);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.encode("...").unwrap(), vec![UNK]);
        assert!(v.encode("  ").is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::build(["alpha beta", "beta gamma"]);
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }
}
