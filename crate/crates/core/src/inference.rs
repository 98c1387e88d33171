//! Dual-query presence scoring and head fusion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Image, ReportRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompt::{PromptGrammar, PromptScheme};
use crate::numeric::{cosine, Tensor};
use crate::prompt::PromptQueries;

/// How local-space and global-space scores are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Local,
    Global,
    Max,
    Cat,
    #[default]
    Mean,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Local,
        FusionMode::Global,
        FusionMode::Max,
        FusionMode::Cat,
        FusionMode::Mean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Local => "local",
            FusionMode::Global => "global",
            FusionMode::Max => "max",
            FusionMode::Cat => "cat",
            FusionMode::Mean => "mean",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}`")))
    }
}

/// `exp(σ⁺/τ) / (exp(σ⁺/τ) + exp(σ⁻/τ))`, evaluated as a logistic of the
/// similarity gap.
pub fn dual_query_score(image: &[f64], q_pos: &[f64], q_neg: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::NumericDomain(format!("temperature {tau} must be positive")));
    }
    let gap = cosine(image, q_pos)? - cosine(image, q_neg)?;
    Ok(1.0 / (1.0 + (-gap / tau).exp()))
}

/// Averaged query embeddings of one class in both spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedPromptSet {
    pub local_pos: Vec<f64>,
    pub local_neg: Vec<f64>,
    pub global_pos: Vec<f64>,
    pub global_neg: Vec<f64>,
}

/// Embedding space a query set is averaged in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    /// `p_S(θ(q))`.
    Local,
    /// `p_R(pool([θ(q)]))`.
    Global,
}

fn column_mean(t: &Tensor) -> Vec<f64> {
    let (m, k) = t.dims2().expect("projection matrices are 2-D");
    let mut out = vec![0.0; k];
    for i in 0..m {
        out.iter_mut().zip(t.row_slice(i)).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= m as f64);
    out
}

/// Mean projection of a query set in `space`.
pub fn embed_prompt_set(model: &Model, queries: &[String], space: Space) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::Validation("empty query set".into()));
    }
    let texts: Vec<&str> = queries.iter().map(String::as_str).collect();
    let proj = match space {
        Space::Local => model.sentence_projections(&texts)?,
        Space::Global => model.report_projections(&texts)?,
    };
    Ok(column_mean(&proj))
}

pub fn embed_prompt_sets(model: &Model, sets: &[PromptQueries]) -> Result<Vec<EmbeddedPromptSet>> {
    sets.iter()
        .map(|q| {
            Ok(EmbeddedPromptSet {
                local_pos: embed_prompt_set(model, &q.positive, Space::Local)?,
                local_neg: embed_prompt_set(model, &q.negative, Space::Local)?,
                global_pos: embed_prompt_set(model, &q.positive, Space::Global)?,
                global_neg: embed_prompt_set(model, &q.negative, Space::Global)?,
            })
        })
        .collect()
}

/// Temperatures of the two spaces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taus {
    pub local: f64,
    pub global: f64,
}

impl Taus {
    pub fn of(model: &Model) -> Self {
        Self {
            local: model.temps.tau_local(&model.params),
            global: model.temps.tau_global(&model.params),
        }
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

/// Fused presence probability for one image and one class.
pub fn fused_score(
    local: &[f64],
    global: &[f64],
    set: &EmbeddedPromptSet,
    taus: Taus,
    mode: FusionMode,
) -> Result<f64> {
    let l = || dual_query_score(local, &set.local_pos, &set.local_neg, taus.local);
    let g = || dual_query_score(global, &set.global_pos, &set.global_neg, taus.global);
    Ok(match mode {
        FusionMode::Local => l()?,
        FusionMode::Global => g()?,
        FusionMode::Max => l()?.max(g()?),
        FusionMode::Mean => (l()? + g()?) / 2.0,
        FusionMode::Cat => dual_query_score(
            &concat(local, global),
            &concat(&set.local_pos, &set.global_pos),
            &concat(&set.local_neg, &set.global_neg),
            taus.global,
        )?,
    })
}

/// Presence probabilities, samples x classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    pub ids: Vec<String>,
    pub classes: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl PredictionMatrix {
    pub fn new(ids: Vec<String>, classes: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != values.len() {
            return Err(Error::shape("PredictionMatrix", &[ids.len()], &[values.len()]));
        }
        for row in &values {
            if row.len() != classes.len() {
                return Err(Error::shape("PredictionMatrix", &[row.len()], &[classes.len()]));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Validation(format!("prediction {v} outside [0, 1]")));
            }
        }
        Ok(Self { ids, classes, values })
    }

    /// Header `id,<class...>`, one row per sample.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header: Vec<&str> = std::iter::once("id").chain(self.classes.iter().map(String::as_str)).collect();
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        for (id, row) in self.ids.iter().zip(&self.values) {
            let rec: Vec<String> = std::iter::once(id.clone())
                .chain(row.iter().map(f64::to_string))
                .collect();
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header = r.headers().map_err(|e| Error::csv(path, e))?.clone();
        if header.get(0) != Some("id") {
            return Err(Error::Validation(format!("{}: first column must be `id`", path.display())));
        }
        let classes: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let (mut ids, mut values) = (Vec::new(), Vec::new());
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            ids.push(rec.get(0).unwrap_or_default().to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 2,
                    msg: e.to_string(),
                })?;
            values.push(row);
        }
        Self::new(ids, classes, values)
    }
}

/// Scores precomputed image projections (`[N, d]` each) against prompt sets.
pub fn predict_from_features(
    local: &Tensor,
    global: &Tensor,
    sets: &[EmbeddedPromptSet],
    taus: Taus,
    mode: FusionMode,
) -> Result<Vec<Vec<f64>>> {
    let (n, _) = local.dims2()?;
    if global.dims2()?.0 != n {
        return Err(Error::shape("predict", local.shape(), global.shape()));
    }
    (0..n)
        .map(|i| {
            sets.iter()
                .map(|s| fused_score(local.row_slice(i), global.row_slice(i), s, taus, mode))
                .collect()
        })
        .collect()
}

/// Predictions for `images` with the given fusion mode.
pub fn predict(
    model: &Model,
    ids: &[String],
    images: &[&Image],
    classes: &[String],
    sets: &[EmbeddedPromptSet],
    mode: FusionMode,
) -> Result<PredictionMatrix> {
    if sets.len() != classes.len() {
        return Err(Error::Validation(format!(
            "{} prompt sets for {} classes",
            sets.len(),
            classes.len()
        )));
    }
    let (local, global) = model.image_projections(images, 64)?;
    let values = predict_from_features(&local, &global, sets, Taus::of(model), mode)?;
    PredictionMatrix::new(ids.to_vec(), classes.to_vec(), values)
}

/// Predictions for every record with prompts expanded from `grammar`.
pub fn predict_records(
    model: &Model,
    records: &[ReportRecord],
    grammar: &PromptGrammar,
    scheme: PromptScheme,
    mode: FusionMode,
) -> Result<PredictionMatrix> {
    let sets = embed_prompt_sets(model, &grammar.expand(scheme)?)?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let images: Vec<&Image> = records.iter().map(|r| &r.image).collect();
    predict(model, &ids, &images, &grammar.class_names(), &sets, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        let p = [1.0, 0.0];
        let q = [0.6, 0.8];
        assert_eq!(dual_query_score(&p, &q, &q, 0.3).unwrap(), 0.5);
        // cosines 0.8 and 0.2
        let pos = [0.8, 0.6];
        let neg = [0.2, (1.0f64 - 0.04).sqrt()];
        let s = dual_query_score(&p, &pos, &neg, 1.0).unwrap();
        assert!((s - 0.645656).abs() < 1e-6);
    }

    #[test]
    fn fusion_mode_names_round_trip() {
        for m in FusionMode::ALL {
            assert_eq!(m.as_str().parse::<FusionMode>().unwrap(), m);
        }
        assert!("sum".parse::<FusionMode>().is_err());
    }
}
