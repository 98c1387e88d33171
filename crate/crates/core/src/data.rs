//! Dataset records, line-delimited ingestion, sentence splitting and batching.
//!
//! A dataset file holds one JSON object per line:
//!
//! ```text
//! {"id": "s0001", "image": "images/s0001.pgm", "report": "Shows alpha-opacity.", "labels": [1, 0, -2]}
//! ```
//!
//! `image` is either a path (relative to the dataset file) to a portable
//! graymap, or an inline nested array of values in `[0, 1]`. At least one of
//! `report` and `labels` must be present; label-only records get a
//! synthesized report.

use std::collections::{HashSet, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Segments;
use crate::prompt::ReportSynthesizer;

/// Class label sentinels.
pub const PRESENT: i8 = 1;
pub const ABSENT: i8 = 0;
pub const UNCERTAIN: i8 = -1;
pub const MISSING: i8 = -2;

/// Per-class labels over {1, 0, -1, -2}.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct LabelVector(Vec<i8>);

impl LabelVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if let Some(bad) = values
            .iter()
            .find(|v| ![PRESENT, ABSENT, UNCERTAIN, MISSING].contains(v))
        {
            return Err(Error::Validation(format!("label value {bad} is not one of 1, 0, -1, -2")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when at least one class is definitely present or absent.
    pub fn has_certain(&self) -> bool {
        self.0.iter().any(|&v| v == PRESENT || v == ABSENT)
    }
}

impl TryFrom<Vec<i8>> for LabelVector {
    type Error = Error;
    fn try_from(v: Vec<i8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelVector> for Vec<i8> {
    fn from(v: LabelVector) -> Self {
        v.0
    }
}

/// Channel-last image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Validation("image dimensions must be positive".into()));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape(
                "Image::new",
                &[height, width, channels],
                &[pixels.len()],
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Pixels reordered channel-first (`[C, H, W]`), as the encoder consumes them.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.pixels.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out
    }

    /// Bilinear resampling with pixel-center alignment; resizing to the
    /// current size returns an identical image.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        self.resample_region(0.0, 0.0, self.height as f64, self.width as f64, height, width)
    }

    /// Bilinear resampling of the window starting at `(top, left)` with the
    /// given extent into a `height x width` image.
    pub fn resample_region(
        &self,
        top: f64,
        left: f64,
        region_h: f64,
        region_w: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation("target size must be positive".into()));
        }
        let sy = region_h / height as f64;
        let sx = region_w / width as f64;
        let c = self.channels;
        let mut out = vec![0.0; height * width * c];
        for y in 0..height {
            let fy = (top + (y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = (left + (x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for ch in 0..c {
                    let v00 = self.get(y0, x0, ch);
                    let v01 = self.get(y0, x1, ch);
                    let v10 = self.get(y1, x0, ch);
                    let v11 = self.get(y1, x1, ch);
                    let top_row = v00 + (v01 - v00) * wx;
                    let bottom_row = v10 + (v11 - v10) * wx;
                    let v = top_row + (bottom_row - top_row) * wy;
                    out[(y * width + x) * c + ch] = v.clamp(0.0, 1.0);
                }
            }
        }
        Self::new(height, width, c, out)
    }
}

/// An image paired with its report sentences and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRecord {
    pub id: String,
    pub image: Image,
    pub sentences: Vec<String>,
    pub labels: Option<LabelVector>,
}

impl ReportRecord {
    pub fn new(
        id: impl Into<String>,
        image: Image,
        sentences: Vec<String>,
        labels: Option<LabelVector>,
    ) -> Result<Self> {
        let id = id.into();
        if sentences.is_empty() {
            return Err(Error::Validation(format!("record `{id}` has no sentences")));
        }
        if sentences.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::Validation(format!("record `{id}` has a blank sentence")));
        }
        Ok(Self {
            id,
            image,
            sentences,
            labels,
        })
    }

    /// Report text: sentences joined by single spaces.
    pub fn report_text(&self) -> String {
        self.sentences.join(" ")
    }
}

/// Sentence segmentation rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SentenceConfig {
    /// Lowercase words (including their trailing period) that never end a sentence.
    pub abbreviations: Vec<String>,
    pub split_on_semicolon: bool,
}

impl Default for SentenceConfig {
    fn default() -> Self {
        Self {
            abbreviations: ["dr.", "e.g.", "i.e.", "vs.", "approx.", "cf."]
                .map(String::from)
                .to_vec(),
            split_on_semicolon: false,
        }
    }
}

/// Splits `report` into sentences on `.`, `!`, `?` (and optionally `;`)
/// followed by whitespace. Whitespace inside sentences is collapsed.
pub fn split_sentences(report: &str, config: &SentenceConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for word in report.split_whitespace() {
        current.push(word);
        let ends = word.ends_with(['.', '!', '?']) || (config.split_on_semicolon && word.ends_with(';'));
        let guarded = config
            .abbreviations
            .iter()
            .any(|a| a.eq_ignore_ascii_case(word));
        if ends && !guarded {
            out.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        out.push(current.join(" "));
    }
    out
}

/// Dataset ingestion settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub sentences: SentenceConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            sentences: SentenceConfig::default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ImageField {
    Path(String),
    Gray(Vec<Vec<f64>>),
    Multi(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    image: ImageField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    report: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<LabelVector>,
}

fn inline_image(field: ImageField) -> Result<Image> {
    let (rows, channels): (Vec<Vec<Vec<f64>>>, usize) = match field {
        ImageField::Gray(rows) => (
            rows.into_iter()
                .map(|r| r.into_iter().map(|v| vec![v]).collect())
                .collect(),
            1,
        ),
        ImageField::Multi(rows) => {
            let c = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
            (rows, c)
        }
        ImageField::Path(_) => unreachable!("path images are read from disk"),
    };
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || channels == 0 {
        return Err(Error::Validation("inline image is empty".into()));
    }
    let mut pixels = Vec::with_capacity(h * w * channels);
    for row in &rows {
        if row.len() != w {
            return Err(Error::Validation("inline image rows differ in length".into()));
        }
        for px in row {
            if px.len() != channels {
                return Err(Error::Validation("inline image channels differ".into()));
            }
            pixels.extend_from_slice(px);
        }
    }
    Image::new(h, w, channels, pixels)
}

/// Reads a portable graymap (or any luma image the decoder understands).
pub fn read_gray_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma16();
    let (w, h) = img.dimensions();
    let pixels = img
        .into_raw()
        .into_iter()
        .map(|v| f64::from(v) / f64::from(u16::MAX))
        .collect();
    Image::new(h as usize, w as usize, 1, pixels)
}

/// Writes the first channel of `image` as an 8-bit binary graymap.
pub fn write_gray_image(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = (0..img.height() * img.width())
        .map(|i| (img.pixels()[i * img.channels()] * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::Validation("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Pnm)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn fit_image(img: Image, config: &DatasetConfig) -> Result<Image> {
    let img = if img.height() != config.image_size || img.width() != config.image_size {
        img.resize(config.image_size, config.image_size)?
    } else {
        img
    };
    match (img.channels(), config.channels) {
        (a, b) if a == b => Ok(img),
        (1, c) => {
            let pixels = img
                .pixels()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, c))
                .collect();
            Image::new(img.height(), img.width(), c, pixels)
        }
        (a, b) => Err(Error::Validation(format!(
            "image has {a} channels, configuration expects {b}"
        ))),
    }
}

fn parse_line(
    line: &str,
    lineno: usize,
    base: &Path,
    config: &DatasetConfig,
    synth: Option<&ReportSynthesizer>,
    seed: u64,
) -> Result<ReportRecord> {
    let at = |e: Error| match e {
        Error::Parse { .. } => e,
        other => Error::Validation(format!("line {lineno}: {other}")),
    };
    let rec: RecordLine = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: lineno,
        msg: e.to_string(),
    })?;
    let image = match rec.image {
        ImageField::Path(p) => read_gray_image(&base.join(p)).map_err(at)?,
        inline => inline_image(inline).map_err(at)?,
    };
    let image = fit_image(image, config).map_err(at)?;
    let report = rec.report.filter(|r| !r.trim().is_empty());
    let sentences = match (&report, &rec.labels) {
        (Some(text), _) => split_sentences(text, &config.sentences),
        (None, Some(labels)) => {
            let synth = synth.ok_or_else(|| {
                Error::Validation(format!(
                    "line {lineno}: label-only record needs a prompt grammar to synthesize a report"
                ))
            })?;
            synth
                .synthesize(labels, seed.wrapping_add(lineno as u64))
                .map_err(at)?
        }
        (None, None) => {
            return Err(Error::Validation(format!(
                "line {lineno}: record `{}` has neither report nor labels",
                rec.id
            )))
        }
    };
    ReportRecord::new(rec.id, image, sentences, rec.labels).map_err(at)
}

/// Loads every record of a dataset file, in file order.
///
/// `synth` turns label-only records into reports; `seed` fixes its sampling.
pub fn load_dataset(
    path: &Path,
    config: &DatasetConfig,
    synth: Option<&ReportSynthesizer>,
    seed: u64,
) -> Result<Vec<ReportRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let records: Vec<ReportRecord> = lines
        .par_iter()
        .map(|&(n, l)| parse_line(l, n, &base, config, synth, seed))
        .collect::<Result<_>>()?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Validation(format!("duplicate record id `{}`", r.id)));
        }
    }
    Ok(records)
}

/// How images are written by [`write_dataset`].
#[derive(Clone, Debug)]
pub enum ImageStorage {
    /// Nested arrays inside each line (lossless).
    Inline,
    /// 8-bit graymaps in the given directory, relative to the dataset file.
    Files(PathBuf),
}

/// Writes records in the line-delimited dataset format.
pub fn write_dataset(path: &Path, records: &[ReportRecord], storage: &ImageStorage) -> Result<()> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for r in records {
        let image = match storage {
            ImageStorage::Inline => {
                let img = &r.image;
                let rows = (0..img.height())
                    .map(|y| {
                        (0..img.width())
                            .map(|x| (0..img.channels()).map(|c| img.get(y, x, c)).collect())
                            .collect()
                    })
                    .collect();
                ImageField::Multi(rows)
            }
            ImageStorage::Files(dir) => {
                let rel = dir.join(format!("{}.pgm", r.id));
                let full = base.join(&rel);
                if let Some(parent) = full.parent() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                write_gray_image(&full, &r.image)?;
                ImageField::Path(rel.to_string_lossy().into_owned())
            }
        };
        let line = RecordLine {
            id: r.id.clone(),
            image,
            report: Some(r.report_text()),
            labels: r.labels.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::Validation(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// One training batch: records plus the flattened sentence layout.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub records: Vec<&'a ReportRecord>,
    /// Rows of the flattened sentence list owned by each record.
    pub segments: Segments,
    /// `N x n_max`, true where record `i` has a sentence at slot `k`.
    pub sentence_mask: Vec<Vec<bool>>,
}

impl<'a> Batch<'a> {
    pub fn new(records: Vec<&'a ReportRecord>) -> Result<Self> {
        let lengths: Vec<usize> = records.iter().map(|r| r.sentences.len()).collect();
        let segments = Segments::from_lengths(&lengths)?;
        let n_max = lengths.iter().copied().max().unwrap_or(0);
        let sentence_mask = lengths
            .iter()
            .map(|&l| (0..n_max).map(|k| k < l).collect())
            .collect();
        Ok(Self {
            records,
            segments,
            sentence_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sentence_offsets(&self) -> &[usize] {
        self.segments.starts()
    }

    /// All sentences in record order.
    pub fn flat_sentences(&self) -> Vec<&'a str> {
        self.records
            .iter()
            .flat_map(|r| r.sentences.iter().map(String::as_str))
            .collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }
}

/// Shuffles under `seed` and cuts batches of `batch_size`, deferring any
/// record whose report text already occurs in the batch being filled.
pub fn make_batches(records: &[ReportRecord], batch_size: usize, seed: u64) -> Result<Vec<Batch<'_>>> {
    if batch_size == 0 || batch_size > records.len() {
        return Err(Error::Validation(format!(
            "batch size {batch_size} must be in 1..={}",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let texts: Vec<String> = records.iter().map(ReportRecord::report_text).collect();

    let mut pending: VecDeque<usize> = order.into();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut taken = Vec::with_capacity(batch_size);
        let mut seen: HashSet<&str> = HashSet::new();
        let mut deferred = VecDeque::new();
        while let Some(i) = pending.pop_front() {
            if taken.len() == batch_size {
                deferred.push_back(i);
                continue;
            }
            if seen.insert(texts[i].as_str()) {
                taken.push(i);
            } else {
                deferred.push_back(i);
            }
        }
        pending = deferred;
        batches.push(Batch::new(taken.into_iter().map(|i| &records[i]).collect())?);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, report: &str) -> ReportRecord {
        ReportRecord::new(
            id,
            Image::filled(4, 4, 1, 0.5).unwrap(),
            split_sentences(report, &SentenceConfig::default()),
            None,
        )
        .unwrap()
    }

    #[test]
    fn splits_terminated_sentences() {
        let cfg = SentenceConfig::default();
        assert_eq!(
            split_sentences("The lungs are clear. No effusion.", &cfg),
            vec!["The lungs are clear.", "No effusion."]
        );
        assert_eq!(split_sentences("No acute findings", &cfg), vec!["No acute findings"]);
    }

    #[test]
    fn semicolons_split_only_when_enabled() {
        let text = "Stable appearance; no pneumothorax. Compared to prior.";
        let mut cfg = SentenceConfig::default();
        assert_eq!(
            split_sentences(text, &cfg),
            vec!["Stable appearance; no pneumothorax.", "Compared to prior."]
        );
        cfg.split_on_semicolon = true;
        assert_eq!(split_sentences(text, &cfg).len(), 3);
    }

    #[test]
    fn abbreviation_guard_suppresses_split() {
        let cfg = SentenceConfig::default();
        assert_eq!(
            split_sentences("Seen by Dr. Smith today. Stable.", &cfg),
            vec!["Seen by Dr. Smith today.", "Stable."]
        );
    }

    #[test]
    fn splitting_is_idempotent() {
        let cfg = SentenceConfig::default();
        for s in split_sentences("A b.  C  d!   E? f g", &cfg) {
            assert_eq!(split_sentences(&s, &cfg), vec![s.clone()]);
        }
    }

    #[test]
    fn batches_keep_partial_tail() {
        let recs: Vec<_> = (0..10).map(|i| record(&format!("r{i}"), &format!("Finding {i}."))).collect();
        let sizes: Vec<_> = make_batches(&recs, 4, 1).unwrap().iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn duplicate_reports_land_in_different_batches() {
        let recs = vec![record("a", "Same text."), record("b", "Same text.")];
        for seed in 0..5 {
            let batches = make_batches(&recs, 2, seed).unwrap();
            assert_eq!(batches.len(), 2);
            assert!(batches.iter().all(|b| b.len() == 1));
        }
    }

    #[test]
    fn batching_is_deterministic() {
        let recs: Vec<_> = (0..17).map(|i| record(&format!("r{i}"), &format!("Finding {i}."))).collect();
        let a: Vec<Vec<String>> = make_batches(&recs, 5, 9).unwrap().iter().map(Batch::ids).collect();
        let b: Vec<Vec<String>> = make_batches(&recs, 5, 9).unwrap().iter().map(Batch::ids).collect();
        assert_eq!(a, b);
        let c: Vec<Vec<String>> = make_batches(&recs, 5, 10).unwrap().iter().map(Batch::ids).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn batch_layout() {
        let recs = [record("a", "One. Two."), record("b", "Three.")];
        let b = Batch::new(recs.iter().collect()).unwrap();
        assert_eq!(b.sentence_offsets(), &[0, 2]);
        assert_eq!(b.flat_sentences().len(), 3);
        assert_eq!(b.sentence_mask, vec![vec![true, true], vec![true, false]]);
    }

    #[test]
    fn rejects_bad_batch_size() {
        let recs = vec![record("a", "One.")];
        assert!(make_batches(&recs, 2, 0).is_err());
        assert!(make_batches(&recs, 0, 0).is_err());
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let px: Vec<f64> = (0..30).map(|i| i as f64 / 30.0).collect();
        let img = Image::new(5, 6, 1, px).unwrap();
        assert_eq!(img.resize(5, 6).unwrap(), img);
    }

    #[test]
    fn label_vector_rejects_unknown_values() {
        assert!(LabelVector::new(vec![1, 0, -1, -2]).is_ok());
        assert!(LabelVector::new(vec![2]).is_err());
    }
}
