//! Procedural image/report/label triples with class motifs drawn in
//! disjoint image regions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_dataset, Image, ImageStorage, LabelVector, ReportRecord, ABSENT, PRESENT};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::prompt::{PromptGrammar, ReportSynthesizer};

/// Drawable primitive of a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motif {
    BrightDisk,
    DarkBlob,
    HorizontalBar,
    VerticalBar,
    CheckerPatch,
    Cross,
}

/// Sub-rectangle as fractions of the image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClassSpec {
    pub name: String,
    pub motif: Motif,
    pub region: Region,
}

/// Six classes on a 2 x 3 grid of regions, one motif family each. Names
/// match the bundled prompt grammar.
pub fn default_class_specs() -> Vec<SyntheticClassSpec> {
    let names = [
        ("alpha-opacity", Motif::BrightDisk),
        ("beta-mass", Motif::DarkBlob),
        ("gamma-streak", Motif::HorizontalBar),
        ("delta-band", Motif::VerticalBar),
        ("epsilon-texture", Motif::CheckerPatch),
        ("zeta-cross", Motif::Cross),
    ];
    names
        .iter()
        .enumerate()
        .map(|(i, &(name, motif))| SyntheticClassSpec {
            name: name.to_string(),
            motif,
            region: Region {
                top: (i / 3) as f64 / 2.0,
                left: (i % 3) as f64 / 3.0,
                height: 0.5,
                width: 1.0 / 3.0,
            },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub presence_probability: f64,
    pub background: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            presence_probability: 0.35,
            background: 0.35,
            noise_sigma: 0.05,
        }
    }
}

struct Canvas {
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn add(&mut self, y: i64, x: i64, v: f64) {
        let s = self.size as i64;
        if (0..s).contains(&y) && (0..s).contains(&x) {
            self.data[(y * s + x) as usize] += v;
        }
    }
}

/// Random center `(cy, cx)` in pixels such that a motif of the given
/// extent stays inside the region.
fn place(region: &Region, size: usize, extent: f64, rng: &mut impl Rng) -> (f64, f64) {
    let s = size as f64;
    let (top, left) = (region.top * s, region.left * s);
    let (h, w) = (region.height * s, region.width * s);
    let half = (extent / 2.0).min(h / 2.0).min(w / 2.0);
    let cy = top + half + rng.random::<f64>() * (h - 2.0 * half).max(0.0);
    let cx = left + half + rng.random::<f64>() * (w - 2.0 * half).max(0.0);
    (cy, cx)
}

fn draw(canvas: &mut Canvas, spec: &SyntheticClassSpec, rng: &mut impl Rng) {
    let scale = canvas.size as f64 / 64.0;
    let r = &spec.region;
    match spec.motif {
        Motif::BrightDisk => {
            let radius = rng.random_range(3.5..6.0) * scale;
            let (cy, cx) = place(r, canvas.size, 2.0 * radius + 2.0, rng);
            let reach = radius.ceil() as i64 + 1;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (y, x) = (cy.round() as i64 + dy, cx.round() as i64 + dx);
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    if d <= radius {
                        canvas.add(y, x, 0.5);
                    }
                }
            }
        }
        Motif::DarkBlob => {
            let sigma = rng.random_range(2.5..4.0) * scale;
            let (cy, cx) = place(r, canvas.size, 5.0 * sigma, rng);
            let reach = (3.0 * sigma).ceil() as i64;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (y, x) = (cy.round() as i64 + dy, cx.round() as i64 + dx);
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    canvas.add(y, x, -0.3 * (-d2 / (2.0 * sigma * sigma)).exp());
                }
            }
        }
        Motif::HorizontalBar | Motif::VerticalBar => {
            let len = (rng.random_range(12.0..18.0) * scale).round() as i64;
            let thick = (rng.random_range(2.0..3.5) * scale).round().max(1.0) as i64;
            let (cy, cx) = place(r, canvas.size, len as f64 + 2.0, rng);
            let (y0, x0) = (cy.round() as i64, cx.round() as i64);
            for a in -len / 2..len - len / 2 {
                for b in -thick / 2..thick - thick / 2 {
                    if spec.motif == Motif::HorizontalBar {
                        canvas.add(y0 + b, x0 + a, 0.45);
                    } else {
                        canvas.add(y0 + a, x0 + b, 0.45);
                    }
                }
            }
        }
        Motif::CheckerPatch => {
            let side = (rng.random_range(10.0..14.0) * scale).round() as i64;
            let cell = (2.0 * scale).round().max(1.0) as i64;
            let (cy, cx) = place(r, canvas.size, side as f64 + 2.0, rng);
            let (y0, x0) = (cy.round() as i64 - side / 2, cx.round() as i64 - side / 2);
            for dy in 0..side {
                for dx in 0..side {
                    let v = if (dy / cell + dx / cell) % 2 == 0 { 0.3 } else { -0.2 };
                    canvas.add(y0 + dy, x0 + dx, v);
                }
            }
        }
        Motif::Cross => {
            let side = (rng.random_range(10.0..14.0) * scale).round() as i64;
            let (cy, cx) = place(r, canvas.size, side as f64 + 2.0, rng);
            let (y0, x0) = (cy.round() as i64, cx.round() as i64);
            for dy in -side / 2..=side / 2 {
                for dx in -side / 2..=side / 2 {
                    if dy == dx || dy == -dx {
                        canvas.add(y0 + dy, x0 + dx, 0.45);
                    }
                }
            }
        }
    }
}

/// Renders one image with the motifs of the present classes; pixel values
/// are quantized to 8 bits so the image survives a graymap round trip.
pub fn render(
    specs: &[SyntheticClassSpec],
    labels: &LabelVector,
    config: &SyntheticConfig,
    rng: &mut impl Rng,
) -> Result<Image> {
    let s = config.image_size;
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut canvas = Canvas {
        size: s,
        data: (0..s * s).map(|_| config.background + noise.sample(rng)).collect(),
    };
    for (spec, &v) in specs.iter().zip(labels.values()) {
        if v == PRESENT {
            draw(&mut canvas, spec, rng);
        }
    }
    let pixels = canvas
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Image::new(s, s, 1, pixels)
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `num_samples` records with independent per-class presence,
/// ids `{prefix}{index:06}`.
pub fn generate(
    num_samples: usize,
    specs: &[SyntheticClassSpec],
    synth: &ReportSynthesizer,
    config: &SyntheticConfig,
    seed: u64,
    prefix: &str,
) -> Result<Vec<ReportRecord>> {
    if specs.len() < 2 {
        return Err(Error::Validation(format!(
            "synthetic task needs at least 2 classes, got {}",
            specs.len()
        )));
    }
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    if names != synth.grammar().class_names() {
        return Err(Error::Validation(format!(
            "synthetic classes {names:?} do not match grammar classes {:?}",
            synth.grammar().class_names()
        )));
    }
    if !(0.0..=1.0).contains(&config.presence_probability) || config.image_size < 16 {
        return Err(Error::Config(
            "synthetic presence_probability must lie in [0, 1] and image_size be >= 16".into(),
        ));
    }
    (0..num_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let labels: Vec<i8> = (0..specs.len())
                .map(|_| {
                    if rng.random::<f64>() < config.presence_probability {
                        PRESENT
                    } else {
                        ABSENT
                    }
                })
                .collect();
            let labels = LabelVector::new(labels)?;
            let image = render(specs, &labels, config, &mut rng)?;
            let sentences = synth.synthesize(&labels, rng.random())?;
            ReportRecord::new(format!("{prefix}{i:06}"), image, sentences, Some(labels))
        })
        .collect()
}

/// Mixed into the run seed for the evaluation split.
pub const EVAL_SEED_SALT: u64 = 0xE7A1;

/// Train and eval splits of the default synthetic task as configured by
/// `config`; the grammar must cover the default classes.
pub fn generate_splits(
    config: &RunConfig,
    grammar: &PromptGrammar,
) -> Result<(Vec<ReportRecord>, Vec<ReportRecord>)> {
    let synth = ReportSynthesizer::new(grammar.clone(), config.synthesis)?;
    let specs = default_class_specs();
    let render = config.synthetic.render_config(config.model.image_size);
    let s = &config.synthetic;
    let train = generate(s.train_samples, &specs, &synth, &render, config.seed, "train")?;
    let eval = generate(s.eval_samples, &specs, &synth, &render, config.seed ^ EVAL_SEED_SALT, "eval")?;
    Ok((train, eval))
}

/// Writes `records` as `<dir>/<name>.jsonl` with graymaps under
/// `<dir>/images/` and a sidecar `<dir>/<name>_labels.csv`.
pub fn write_split(dir: &Path, name: &str, records: &[ReportRecord], classes: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_dataset(
        &dir.join(format!("{name}.jsonl")),
        records,
        &ImageStorage::Files("images".into()),
    )?;
    write_labels_csv(&dir.join(format!("{name}_labels.csv")), records, classes)
}

/// `id,<class...>` with the label sentinels as values.
pub fn write_labels_csv(path: &Path, records: &[ReportRecord], classes: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header: Vec<&str> = std::iter::once("id").chain(classes.iter().map(String::as_str)).collect();
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for r in records {
        let labels = r
            .labels
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("record `{}` has no labels", r.id)))?;
        let row: Vec<String> = std::iter::once(r.id.clone())
            .chain(labels.values().iter().map(i8::to_string))
            .collect();
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
