//! Multi-label AUROC with uncertain and missing labels ignored.

use std::path::Path;

use std::collections::HashMap;

use crate::data::{LabelVector, ReportRecord, ABSENT, PRESENT};
use crate::error::{Error, Result};
use crate::inference::PredictionMatrix;

/// Mann-Whitney AUROC: the probability that a random positive outranks a
/// random negative, ties counting one half. `None` when either class is
/// absent.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<Option<f64>> {
    if scores.len() != positive.len() {
        return Err(Error::shape("auroc", &[scores.len()], &[positive.len()]));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s} in AUROC input")));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank of the tie block
        let midrank = (i + j + 1) as f64 / 2.0;
        rank_sum += midrank * order[i..j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(Some(u / (p * n)))
}

/// Result for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassResult {
    pub name: String,
    pub auroc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl ClassResult {
    pub fn counted_samples(&self) -> usize {
        self.n_pos + self.n_neg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub classes: Vec<ClassResult>,
    /// Mean over classes with a defined AUROC.
    pub mean_auroc: f64,
}

impl EvaluationReport {
    pub fn auroc_of(&self, name: &str) -> Option<f64> {
        self.classes.iter().find(|c| c.name == name).and_then(|c| c.auroc)
    }

    /// `class,auroc,n_pos,n_neg`; undefined AUROC is left empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["class", "auroc", "n_pos", "n_neg"])
            .map_err(|e| Error::csv(path, e))?;
        for c in &self.classes {
            let a = c.auroc.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([c.name.clone(), a, c.n_pos.to_string(), c.n_neg.to_string()])
                .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> String {
        let defined = self.classes.iter().filter(|c| c.auroc.is_some()).count();
        format!(
            "mean AUROC {:.6} over {defined}/{} classes",
            self.mean_auroc,
            self.classes.len()
        )
    }
}

/// Per-class AUROC of `scores` (samples x classes) against `labels`.
/// Entries labelled uncertain or missing are skipped without being read.
pub fn evaluate(scores: &[Vec<f64>], labels: &[LabelVector], classes: &[String]) -> Result<EvaluationReport> {
    if scores.len() != labels.len() {
        return Err(Error::shape("evaluate", &[scores.len()], &[labels.len()]));
    }
    let k = classes.len();
    for (row, lab) in scores.iter().zip(labels) {
        if row.len() != k || lab.len() != k {
            return Err(Error::shape("evaluate", &[row.len(), lab.len()], &[k]));
        }
    }
    let mut results = Vec::with_capacity(k);
    for (c, name) in classes.iter().enumerate() {
        let (mut s, mut y) = (Vec::new(), Vec::new());
        for (row, lab) in scores.iter().zip(labels) {
            match lab.values()[c] {
                PRESENT => y.push(true),
                ABSENT => y.push(false),
                _ => continue,
            }
            s.push(row[c]);
        }
        let n_pos = y.iter().filter(|&&b| b).count();
        results.push(ClassResult {
            name: name.clone(),
            auroc: auroc(&s, &y)?,
            n_pos,
            n_neg: y.len() - n_pos,
        });
    }
    let defined: Vec<f64> = results.iter().filter_map(|r| r.auroc).collect();
    if defined.is_empty() {
        return Err(Error::Validation("no class has both positive and negative labels".into()));
    }
    Ok(EvaluationReport {
        mean_auroc: defined.iter().sum::<f64>() / defined.len() as f64,
        classes: results,
    })
}

/// Ground-truth labels keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTable {
    pub classes: Vec<String>,
    pub ids: Vec<String>,
    pub labels: Vec<LabelVector>,
}

impl LabelTable {
    /// Labels of every record; unlabelled records are an error.
    pub fn from_records(records: &[ReportRecord], classes: &[String]) -> Result<Self> {
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            let l = r
                .labels
                .clone()
                .ok_or_else(|| Error::Validation(format!("record `{}` has no labels", r.id)))?;
            if l.len() != classes.len() {
                return Err(Error::shape("LabelTable", &[l.len()], &[classes.len()]));
            }
            labels.push(l);
        }
        Ok(Self {
            classes: classes.to_vec(),
            ids: records.iter().map(|r| r.id.clone()).collect(),
            labels,
        })
    }

    /// Reads `id,<class...>` with sentinel values, as written alongside
    /// synthetic splits.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header = r.headers().map_err(|e| Error::csv(path, e))?.clone();
        if header.get(0) != Some("id") {
            return Err(Error::Validation(format!("{}: first column must be `id`", path.display())));
        }
        let classes: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let (mut ids, mut labels) = (Vec::new(), Vec::new());
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let parse_err = |msg: String| Error::Parse { line: i + 2, msg };
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<i8>().map_err(|e| parse_err(format!("`{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            ids.push(rec.get(0).unwrap_or_default().to_string());
            labels.push(LabelVector::new(values).map_err(|e| parse_err(e.to_string()))?);
        }
        Ok(Self { classes, ids, labels })
    }
}

/// Evaluates predictions against labels matched by sample id. Every
/// predicted id must be labelled and the class lists must agree.
pub fn evaluate_predictions(predictions: &PredictionMatrix, truth: &LabelTable) -> Result<EvaluationReport> {
    if predictions.classes != truth.classes {
        return Err(Error::Validation(format!(
            "prediction classes {:?} differ from label classes {:?}",
            predictions.classes, truth.classes
        )));
    }
    let index: HashMap<&str, usize> = truth.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let labels = predictions
        .ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| truth.labels[i].clone())
                .ok_or_else(|| Error::Validation(format!("no labels for sample `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&predictions.values, &labels, &predictions.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let a = auroc(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, false]).unwrap();
        assert_eq!(a, Some(0.75));
    }

    #[test]
    fn ties_and_degenerate_inputs() {
        assert_eq!(auroc(&[0.5; 4], &[true, false, true, false]).unwrap(), Some(0.5));
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]).unwrap(), None);
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]).unwrap(), Some(1.0));
    }

    #[test]
    fn fully_masked_class_is_excluded() {
        let labels = vec![
            LabelVector::new(vec![1, -2]).unwrap(),
            LabelVector::new(vec![0, -2]).unwrap(),
        ];
        let scores = vec![vec![0.9, f64::NAN], vec![0.1, f64::NAN]];
        let r = evaluate(&scores, &labels, &["a".into(), "b".into()]).unwrap();
        assert_eq!(r.classes[1].auroc, None);
        assert_eq!(r.mean_auroc, 1.0);
    }
}
