//! Training loop: AdamW with cosine decay, per-epoch checkpoints and a
//! per-step loss log.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::augment::{make_views, sample_key};
use crate::config::{RunConfig, Schedule};
use crate::data::{make_batches, Image, ReportRecord};
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::Model;
use crate::numeric::{ParamStore, Tape, Tensor};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,L_L,L_G,L_S,L_M,total,tau_L,tau_G";
pub const CONFIG_FILE: &str = "config.toml";

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBreakdown,
    pub tau_local: f64,
    pub tau_global: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, l.local, l.global, l.simsiam, l.mirrored, l.total, self.tau_local, self.tau_global
        )
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    /// Biases and temperatures are not decayed.
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = |p: &crate::numeric::Parameter| Tensor::zeros(p.tensor.shape());
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            decay: params
                .iter()
                .map(|p| !(p.name.ends_with(".bias") || p.name.starts_with("temperature.")))
                .collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("AdamW::step", &[grads.len()], &[self.m.len()]));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if self.decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grads[i].data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= lr * (update + decay * *w);
            }
        }
        Ok(())
    }
}

/// Learning rate after `step` of `total` steps.
pub fn learning_rate(base: f64, schedule: Schedule, step: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let frac = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
            0.5 * base * (1.0 + (PI * frac).cos())
        }
    }
}

/// Sizes the global worker pool; `None` keeps the default. Must run
/// before any parallel work.
pub fn configure_threads(threads: Option<usize>) -> Result<()> {
    match threads {
        None => Ok(()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size worker pool: {e}"))),
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:03}"))
}

fn write_checkpoint(model: &Model, config: &RunConfig, dir: &Path, epoch: usize, step: usize) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("epoch".to_string(), epoch.to_string());
    meta.insert("step".to_string(), step.to_string());
    meta.insert("seed".to_string(), config.seed.to_string());
    model.save(dir, config.precision, &meta)?;
    config.save(&dir.join(CONFIG_FILE))
}

/// Trains on `records`, writing checkpoints and the loss log under
/// `out_dir`. `on_step` sees every logged row.
pub fn train(
    config: &RunConfig,
    records: &[ReportRecord],
    out_dir: &Path,
    mut on_step: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vocab = Vocab::build(records.iter().flat_map(|r| r.sentences.iter().map(String::as_str)));
    let mut model = Model::new(&config.model, vocab, config.seed)?;
    let o = &config.optim;
    let mut opt = AdamW::new(&model.params, o.beta1, o.beta2, o.eps, o.weight_decay);
    let settings = config.objective();
    let batch_size = config.train.batch_size.min(records.len());
    let total_steps = config.train.epochs * records.len().div_ceil(batch_size);

    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log_file, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;

    let first = checkpoint_dir(out_dir, 0);
    write_checkpoint(&model, config, &first, 0, 0)?;
    let mut checkpoints = vec![first];
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.train.epochs {
        let batches = make_batches(records, batch_size, config.seed.wrapping_add(epoch as u64))?;
        for batch in &batches {
            let views = if settings.weights.needs_views() {
                let images: Vec<&Image> = batch.records.iter().map(|r| &r.image).collect();
                let keys: Vec<u64> = batch.records.iter().map(|r| sample_key(&r.id)).collect();
                Some(make_views(&images, &keys, &config.augmentation, config.seed, epoch as u64)?)
            } else {
                None
            };
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let view_refs = views.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()));
            let (loss, parts) = model.objective(&p, &tape, batch, view_refs, &settings)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    batch_ids: batch.ids(),
                });
            }
            let grads = p.gradients(&tape.backward(loss)?);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    batch_ids: batch.ids(),
                });
            }
            drop(p);
            drop(tape);
            let lr = learning_rate(o.learning_rate, o.schedule, step, total_steps);
            opt.step(&mut model.params, &grads, lr)?;
            model.temps.clamp(&mut model.params);
            let row = LogRow {
                epoch,
                step,
                losses: parts,
                tau_local: model.temps.tau_local(&model.params),
                tau_global: model.temps.tau_global(&model.params),
            };
            writeln!(log_file, "{}", row.csv()).map_err(|e| Error::io(&log_path, e))?;
            on_step(&row);
            log.push(row);
            step += 1;
        }
        let dir = checkpoint_dir(out_dir, epoch);
        write_checkpoint(&model, config, &dir, epoch, step)?;
        checkpoints.push(dir);
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        model,
        log,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(learning_rate(1.0, Schedule::Cosine, 0, 10), 1.0);
        assert!(learning_rate(1.0, Schedule::Cosine, 10, 10).abs() < 1e-15);
        assert!((learning_rate(1.0, Schedule::Cosine, 5, 10) - 0.5).abs() < 1e-15);
        assert_eq!(learning_rate(0.3, Schedule::Constant, 7, 10), 0.3);
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::row(&[1.0, -1.0])).unwrap();
        store.register("w.bias", Tensor::row(&[0.5])).unwrap();
        let mut opt = AdamW::new(&store, 0.9, 0.999, 0.0, 0.0);
        let g = vec![Tensor::row(&[2.0, -3.0]), Tensor::row(&[0.1])];
        opt.step(&mut store, &g, 0.01).unwrap();
        let w = store.by_name("w").unwrap().tensor.data().to_vec();
        assert!((w[0] - 0.99).abs() < 1e-12 && (w[1] + 0.99).abs() < 1e-12);
    }
}
