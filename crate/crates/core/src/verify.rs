//! Gradient and oracle verification of the differentiable operations and
//! the training losses.
//!
//! Every loss has a plain nested-loop counterpart here that shares no code
//! with the batched implementation. The suite compares the two, checks
//! analytic gradients against central differences, and probes the fixed
//! values and contracts the losses must satisfy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::{
    global_loss, local_loss, milnce_loss, mirrored_loss, simsiam_loss, LocalObjective, LossWeights,
    SentenceReduction, ViewProjections,
};
use crate::numeric::gradcheck::{check_gradient, DEFAULT_STEP};
use crate::numeric::{cosine_matrix, cosine_rows, cosine_similarity, Segments, Tape, Tensor, Var};

/// Bound on the relative gradient error.
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
/// Bound on the difference between a batched loss and its loop oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-10;
/// `2 ln(1 + e^-1)`: two-pair batch with identity similarities at unit temperature.
pub const IDENTITY_PAIR_LOSS: f64 = 0.626_523_375_036_445_7;

fn gaussian(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Embeddings for every loss input of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBatch {
    /// Sentences per report.
    pub lengths: Vec<usize>,
    pub local: Tensor,
    pub sentences: Tensor,
    pub global: Tensor,
    pub reports: Tensor,
    /// `(global, local)` projections of the two augmented views.
    pub views: [(Tensor, Tensor); 2],
    pub predictions: [Tensor; 2],
    pub projections: [Tensor; 2],
    pub log_inv_tau_local: f64,
    pub log_inv_tau_global: f64,
}

/// Index of each tensor in [`LossBatch::inputs`].
pub mod input {
    pub const LOCAL: usize = 0;
    pub const SENTENCES: usize = 1;
    pub const GLOBAL: usize = 2;
    pub const REPORTS: usize = 3;
    pub const VIEW1_GLOBAL: usize = 4;
    pub const VIEW1_LOCAL: usize = 5;
    pub const VIEW2_GLOBAL: usize = 6;
    pub const VIEW2_LOCAL: usize = 7;
    pub const PRED1: usize = 8;
    pub const PROJ1: usize = 9;
    pub const PRED2: usize = 10;
    pub const PROJ2: usize = 11;
    pub const LIT_LOCAL: usize = 12;
    pub const LIT_GLOBAL: usize = 13;
    pub const NAMES: [&str; 14] = [
        "local", "sentences", "global", "reports", "view1.global", "view1.local", "view2.global",
        "view2.local", "pred1", "proj1", "pred2", "proj2", "log_inv_tau_local", "log_inv_tau_global",
    ];
}

impl LossBatch {
    /// Random batch with `N` in 1..=5, `n_i` in 1..=4, `d` in {4, 32} and
    /// temperatures in [0.1, 1].
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=5);
        let d = if rng.random::<bool>() { 4 } else { 32 };
        let lengths: Vec<usize> = (0..n).map(|_| rng.random_range(1..=4)).collect();
        Self::gaussian(&mut rng, lengths, d)
    }

    /// Gaussian embeddings for the given partition and width.
    pub fn gaussian(rng: &mut impl Rng, lengths: Vec<usize>, d: usize) -> Self {
        let n = lengths.len();
        let m = lengths.iter().sum();
        let mut g = |rows: usize| gaussian(rng, &[rows, d]);
        let (local, sentences, global, reports) = (g(n), g(m), g(n), g(n));
        let views = [(g(n), g(n)), (g(n), g(n))];
        let predictions = [g(n), g(n)];
        let projections = [g(n), g(n)];
        Self {
            lengths,
            local,
            sentences,
            global,
            reports,
            views,
            predictions,
            projections,
            log_inv_tau_local: rng.random_range(0.0..10f64.ln()),
            log_inv_tau_global: rng.random_range(0.0..10f64.ln()),
        }
    }

    pub fn segments(&self) -> Result<Segments> {
        Segments::from_lengths(&self.lengths)
    }

    /// All inputs in the order of [`input`].
    pub fn inputs(&self) -> Vec<Tensor> {
        vec![
            self.local.clone(),
            self.sentences.clone(),
            self.global.clone(),
            self.reports.clone(),
            self.views[0].0.clone(),
            self.views[0].1.clone(),
            self.views[1].0.clone(),
            self.views[1].1.clone(),
            self.predictions[0].clone(),
            self.projections[0].clone(),
            self.predictions[1].clone(),
            self.projections[1].clone(),
            Tensor::scalar(self.log_inv_tau_local),
            Tensor::scalar(self.log_inv_tau_global),
        ]
    }
}

type Rows = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Rows {
    (0..t.shape()[0]).map(|i| t.row_slice(i).to_vec()).collect()
}

fn plain_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn similarity(a: &Rows, b: &Rows, log_inv_tau: f64) -> Rows {
    let scale = log_inv_tau.exp();
    a.iter()
        .map(|x| b.iter().map(|y| plain_cosine(x, y) * scale).collect())
        .collect()
}

fn owner_table(lengths: &[usize]) -> Vec<usize> {
    let mut owners = Vec::new();
    for (i, &n) in lengths.iter().enumerate() {
        for _ in 0..n {
            owners.push(i);
        }
    }
    owners
}

/// Image-side term shared by both local objectives.
fn loop_image_term(s: &Rows, owners: &[usize], i: usize) -> f64 {
    let mut all = 0.0;
    let mut own = 0.0;
    for (c, &o) in owners.iter().enumerate() {
        all += s[i][c].exp();
        if o == i {
            own += s[i][c].exp();
        }
    }
    all.ln() - own.ln()
}

fn loop_column_sum(s: &Rows, c: usize) -> f64 {
    let mut total = 0.0;
    for row in s {
        total += row[c].exp();
    }
    total
}

/// Loop form of the local loss.
pub fn oracle_local(
    local: &Tensor,
    sentences: &Tensor,
    lengths: &[usize],
    log_inv_tau: f64,
    reduction: SentenceReduction,
) -> f64 {
    let s = similarity(&rows(local), &rows(sentences), log_inv_tau);
    let owners = owner_table(lengths);
    let n = lengths.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut b = 0.0;
        for (c, &o) in owners.iter().enumerate() {
            if o == i {
                b += loop_column_sum(&s, c).ln() - s[i][c];
            }
        }
        if reduction == SentenceReduction::Mean {
            b /= lengths[i] as f64;
        }
        total += loop_image_term(&s, &owners, i) + b;
    }
    total / n as f64
}

/// Loop form of the symmetric multi-positive objective.
pub fn oracle_milnce(local: &Tensor, sentences: &Tensor, lengths: &[usize], log_inv_tau: f64) -> f64 {
    let s = similarity(&rows(local), &rows(sentences), log_inv_tau);
    let owners = owner_table(lengths);
    let n = lengths.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        let mut numer = 0.0;
        for (c, &o) in owners.iter().enumerate() {
            if o == i {
                denom += loop_column_sum(&s, c);
                numer += s[i][c].exp();
            }
        }
        total += loop_image_term(&s, &owners, i) + denom.ln() - numer.ln();
    }
    total / n as f64
}

/// Loop form of the global loss.
pub fn oracle_global(global: &Tensor, reports: &Tensor, log_inv_tau: f64) -> f64 {
    let s = similarity(&rows(global), &rows(reports), log_inv_tau);
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut over_reports = 0.0;
        let mut over_images = 0.0;
        for j in 0..n {
            over_reports += s[i][j].exp();
            over_images += s[j][i].exp();
        }
        total += over_reports.ln() + over_images.ln() - 2.0 * s[i][i];
    }
    total / n as f64
}

/// Loop form of the self-supervised loss.
pub fn oracle_simsiam(pred: &[Tensor; 2], proj: &[Tensor; 2]) -> f64 {
    let (p1, p2, z1, z2) = (rows(&pred[0]), rows(&pred[1]), rows(&proj[0]), rows(&proj[1]));
    let mut total = 0.0;
    for i in 0..p1.len() {
        total -= plain_cosine(&p1[i], &z2[i]) + plain_cosine(&p2[i], &z1[i]);
    }
    total / p1.len() as f64
}

fn oracle_local_objective(
    objective: LocalObjective,
    reduction: SentenceReduction,
    local: &Tensor,
    b: &LossBatch,
) -> f64 {
    match objective {
        LocalObjective::Asymmetric => {
            oracle_local(local, &b.sentences, &b.lengths, b.log_inv_tau_local, reduction)
        }
        LocalObjective::Milnce => oracle_milnce(local, &b.sentences, &b.lengths, b.log_inv_tau_local),
    }
}

/// Sum of four independent oracle evaluations on the augmented views.
pub fn oracle_mirrored(b: &LossBatch, objective: LocalObjective, reduction: SentenceReduction) -> f64 {
    b.views
        .iter()
        .map(|(g, l)| {
            oracle_global(g, &b.reports, b.log_inv_tau_global)
                + oracle_local_objective(objective, reduction, l, b)
        })
        .sum()
}

/// Weighted sum of the four oracles.
pub fn oracle_total(b: &LossBatch, w: &LossWeights) -> f64 {
    let (obj, red) = (LocalObjective::Asymmetric, SentenceReduction::Sum);
    w.local * oracle_local_objective(obj, red, &b.local, b)
        + w.global * oracle_global(&b.global, &b.reports, b.log_inv_tau_global)
        + w.simsiam * oracle_simsiam(&b.predictions, &b.projections)
        + w.mirrored * oracle_mirrored(b, obj, red)
}

/// Batched loss over the vars of [`LossBatch::inputs`].
pub type TapeLoss = for<'t> fn(&[Var<'t>], &Segments) -> Result<Var<'t>>;

fn views<'t>(x: &[Var<'t>]) -> [ViewProjections<'t>; 2] {
    use input::*;
    [
        ViewProjections {
            global: x[VIEW1_GLOBAL],
            local: x[VIEW1_LOCAL],
        },
        ViewProjections {
            global: x[VIEW2_GLOBAL],
            local: x[VIEW2_LOCAL],
        },
    ]
}

fn tape_local<'t>(x: &[Var<'t>], segs: &Segments) -> Result<Var<'t>> {
    use input::*;
    local_loss(&x[LOCAL], &x[SENTENCES], segs, &x[LIT_LOCAL], SentenceReduction::Sum)
}

fn tape_local_mean<'t>(x: &[Var<'t>], segs: &Segments) -> Result<Var<'t>> {
    use input::*;
    local_loss(&x[LOCAL], &x[SENTENCES], segs, &x[LIT_LOCAL], SentenceReduction::Mean)
}

fn tape_milnce<'t>(x: &[Var<'t>], segs: &Segments) -> Result<Var<'t>> {
    use input::*;
    milnce_loss(&x[LOCAL], &x[SENTENCES], segs, &x[LIT_LOCAL])
}

fn tape_global<'t>(x: &[Var<'t>], _: &Segments) -> Result<Var<'t>> {
    use input::*;
    global_loss(&x[GLOBAL], &x[REPORTS], &x[LIT_GLOBAL])
}

fn tape_simsiam<'t>(x: &[Var<'t>], _: &Segments) -> Result<Var<'t>> {
    use input::*;
    simsiam_loss(&x[PRED1], &x[PROJ1], &x[PRED2], &x[PROJ2])
}

fn tape_mirrored<'t>(x: &[Var<'t>], segs: &Segments) -> Result<Var<'t>> {
    use input::*;
    mirrored_loss(
        &views(x),
        &x[SENTENCES],
        &x[REPORTS],
        segs,
        &x[LIT_LOCAL],
        &x[LIT_GLOBAL],
        LocalObjective::Asymmetric,
        SentenceReduction::Sum,
    )
}

fn tape_total<'t>(x: &[Var<'t>], segs: &Segments) -> Result<Var<'t>> {
    let w = LossWeights::default();
    let terms = [
        (w.local, tape_local(x, segs)?),
        (w.global, tape_global(x, segs)?),
        (w.simsiam, tape_simsiam(x, segs)?),
        (w.mirrored, tape_mirrored(x, segs)?),
    ];
    let mut total = x[0].tape().constant(Tensor::scalar(0.0));
    for (weight, term) in terms {
        total = total.add(&term.scale(weight))?;
    }
    Ok(total)
}

/// One loss with its oracle and the inputs it is differentiable in.
#[derive(Clone, Copy)]
pub struct LossCase {
    pub name: &'static str,
    pub tape: TapeLoss,
    pub oracle: fn(&LossBatch) -> f64,
    /// Inputs checked against finite differences.
    pub differentiable: &'static [usize],
    /// Inputs whose analytic gradient must be exactly zero.
    pub detached: &'static [usize],
}

/// Every training loss.
pub fn loss_cases() -> Vec<LossCase> {
    use input::*;
    const LOCAL_INPUTS: &[usize] = &[LOCAL, SENTENCES, LIT_LOCAL];
    const MIRRORED_INPUTS: &[usize] = &[
        SENTENCES,
        REPORTS,
        VIEW1_GLOBAL,
        VIEW1_LOCAL,
        VIEW2_GLOBAL,
        VIEW2_LOCAL,
        LIT_LOCAL,
        LIT_GLOBAL,
    ];
    vec![
        LossCase {
            name: "local_loss",
            tape: tape_local,
            oracle: |b| oracle_local(&b.local, &b.sentences, &b.lengths, b.log_inv_tau_local, SentenceReduction::Sum),
            differentiable: LOCAL_INPUTS,
            detached: &[],
        },
        LossCase {
            name: "local_loss_mean",
            tape: tape_local_mean,
            oracle: |b| oracle_local(&b.local, &b.sentences, &b.lengths, b.log_inv_tau_local, SentenceReduction::Mean),
            differentiable: LOCAL_INPUTS,
            detached: &[],
        },
        LossCase {
            name: "milnce_loss",
            tape: tape_milnce,
            oracle: |b| oracle_milnce(&b.local, &b.sentences, &b.lengths, b.log_inv_tau_local),
            differentiable: LOCAL_INPUTS,
            detached: &[],
        },
        LossCase {
            name: "global_loss",
            tape: tape_global,
            oracle: |b| oracle_global(&b.global, &b.reports, b.log_inv_tau_global),
            differentiable: &[GLOBAL, REPORTS, LIT_GLOBAL],
            detached: &[],
        },
        LossCase {
            name: "simsiam_loss",
            tape: tape_simsiam,
            oracle: |b| oracle_simsiam(&b.predictions, &b.projections),
            differentiable: &[PRED1, PRED2],
            detached: &[PROJ1, PROJ2],
        },
        LossCase {
            name: "mirrored_loss",
            tape: tape_mirrored,
            oracle: |b| oracle_mirrored(b, LocalObjective::Asymmetric, SentenceReduction::Sum),
            differentiable: MIRRORED_INPUTS,
            detached: &[],
        },
        LossCase {
            name: "total_loss",
            tape: tape_total,
            oracle: |b| oracle_total(b, &LossWeights::default()),
            differentiable: &[
                LOCAL,
                SENTENCES,
                GLOBAL,
                REPORTS,
                VIEW1_GLOBAL,
                VIEW1_LOCAL,
                VIEW2_GLOBAL,
                VIEW2_LOCAL,
                PRED1,
                PRED2,
                LIT_LOCAL,
                LIT_GLOBAL,
            ],
            detached: &[PROJ1, PROJ2],
        },
    ]
}

/// Batched value of `case` on `batch`.
pub fn evaluate_case(case: &LossCase, batch: &LossBatch) -> Result<f64> {
    let segs = batch.segments()?;
    let tape = Tape::new();
    let vars: Vec<Var> = batch.inputs().into_iter().map(|t| tape.constant(t)).collect();
    Ok((case.tape)(&vars, &segs)?.item())
}

/// Worst relative gradient error of `case` with respect to input `k`.
pub fn gradient_error(case: &LossCase, batch: &LossBatch, k: usize) -> Result<f64> {
    let segs = batch.segments()?;
    let inputs = batch.inputs();
    let f = case.tape;
    check_gradient(
        |x| {
            let tape = x.tape();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| if i == k { x } else { tape.constant(t.clone()) })
                .collect();
            f(&vars, &segs)
        },
        &inputs[k],
        DEFAULT_STEP,
    )
}

/// Largest absolute analytic gradient entry over the detached inputs of
/// `case`; zero when the stop-gradient holds.
pub fn detached_gradient(case: &LossCase, batch: &LossBatch) -> Result<f64> {
    let segs = batch.segments()?;
    let tape = Tape::new();
    let vars: Vec<Var> = batch.inputs().into_iter().map(|t| tape.leaf(t)).collect();
    let grads = tape.backward((case.tape)(&vars, &segs)?)?;
    Ok(case
        .detached
        .iter()
        .flat_map(|&k| grads.wrt(vars[k]).into_data())
        .fold(0.0, |m: f64, g| m.max(g.abs())))
}

/// Scalar probe `sum(y * W)` with a fixed random `W`, so every output
/// entry contributes to the gradient with a distinct weight.
fn probe<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w = gaussian(&mut rng, &y.shape());
    Ok(y.mul(&y.tape().constant(w))?.sum())
}

/// Gradient check of a single differentiable operation.
pub struct OpCase {
    pub name: &'static str,
    pub check: fn(u64) -> Result<f64>,
}

macro_rules! op_case {
    ($name:expr, |$rng:ident, $seed:ident| $body:block) => {
        OpCase {
            name: $name,
            check: |$seed| {
                let mut $rng = ChaCha8Rng::seed_from_u64($seed);
                let $rng = &mut $rng;
                $body
            },
        }
    };
}

fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn lengths(rng: &mut impl Rng, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(1..=3)).collect()
}

/// Every differentiable operation, checked against each of its inputs.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        op_case!("add", |rng, seed| {
            let b = gaussian(rng, &[3, 4]);
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.add(&v.tape().constant(b.clone()))?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("sub", |rng, seed| {
            let b = gaussian(rng, &[3, 4]);
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.tape().constant(b.clone()).sub(&v)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("mul", |rng, seed| {
            let b = gaussian(rng, &[3, 4]);
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.mul(&v.tape().constant(b.clone()))?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("mul_self", |rng, seed| {
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.mul(&v)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("scale_neg_add_const", |rng, seed| {
            let x = gaussian(rng, &[2, 5]);
            check_gradient(|v| probe(v.scale(-1.7).neg().add_const(0.3), seed), &x, DEFAULT_STEP)
        }),
        op_case!("add_row.matrix", |rng, seed| {
            let r = gaussian(rng, &[1, 4]);
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.add_row(&v.tape().constant(r.clone()))?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("add_row.row", |rng, seed| {
            let m = gaussian(rng, &[3, 4]);
            let x = gaussian(rng, &[1, 4]);
            check_gradient(|v| probe(v.tape().constant(m.clone()).add_row(&v)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("mul_scalar.matrix", |rng, seed| {
            let s = Tensor::scalar(rng.random_range(-2.0..2.0));
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.mul_scalar(&v.tape().constant(s.clone()))?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("mul_scalar.scalar", |rng, seed| {
            let m = gaussian(rng, &[3, 4]);
            let x = Tensor::scalar(rng.random_range(-2.0..2.0));
            check_gradient(|v| probe(v.tape().constant(m.clone()).mul_scalar(&v)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("mul_col.matrix", |rng, seed| {
            let c = gaussian(rng, &[3, 1]);
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.mul_col(&v.tape().constant(c.clone()))?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("mul_col.column", |rng, seed| {
            let m = gaussian(rng, &[3, 4]);
            let x = gaussian(rng, &[3, 1]);
            check_gradient(|v| probe(v.tape().constant(m.clone()).mul_col(&v)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("matmul.left", |rng, seed| {
            let b = gaussian(rng, &[4, 2]);
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.matmul(&v.tape().constant(b.clone()))?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("matmul.right", |rng, seed| {
            let a = gaussian(rng, &[3, 4]);
            let x = gaussian(rng, &[4, 2]);
            check_gradient(|v| probe(v.tape().constant(a.clone()).matmul(&v)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("transpose_reshape", |rng, seed| {
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.transpose()?.reshape(&[2, 6])?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("exp", |rng, seed| {
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.exp(), seed), &x, DEFAULT_STEP)
        }),
        op_case!("log", |rng, seed| {
            let x = gaussian(rng, &[3, 4]).map(|v| v.abs() + 0.5);
            check_gradient(|v| probe(v.log()?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("relu", |rng, seed| {
            let x = away_from_zero(gaussian(rng, &[3, 4]));
            check_gradient(|v| probe(v.relu(), seed), &x, DEFAULT_STEP)
        }),
        op_case!("softmax_rows", |rng, seed| {
            let x = gaussian(rng, &[3, 5]);
            check_gradient(|v| probe(v.softmax_rows()?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("logsumexp_rows", |rng, seed| {
            let x = gaussian(rng, &[3, 5]);
            check_gradient(|v| probe(v.logsumexp_rows()?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("logsumexp_rows_masked", |rng, seed| {
            let x = gaussian(rng, &[3, 5]);
            let mut mask: Vec<bool> = (0..15).map(|_| rng.random()).collect();
            for r in 0..3 {
                mask[r * 5 + rng.random_range(0..5)] = true;
            }
            check_gradient(|v| probe(v.logsumexp_rows_masked(&mask)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("segment_logsumexp", |rng, seed| {
            let segs = Segments::from_lengths(&lengths(rng, 3))?;
            let x = gaussian(rng, &[segs.total(), 1]);
            check_gradient(|v| probe(v.segment_logsumexp(&segs)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("segment_softmax", |rng, seed| {
            let segs = Segments::from_lengths(&lengths(rng, 3))?;
            let x = gaussian(rng, &[segs.total(), 1]);
            check_gradient(|v| probe(v.segment_softmax(&segs)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("segment_sum", |rng, seed| {
            let segs = Segments::from_lengths(&lengths(rng, 3))?;
            let x = gaussian(rng, &[segs.total(), 3]);
            check_gradient(|v| probe(v.segment_sum(&segs)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("segment_mean", |rng, seed| {
            let segs = Segments::from_lengths(&lengths(rng, 3))?;
            let x = gaussian(rng, &[segs.total(), 3]);
            check_gradient(|v| probe(v.segment_mean(&segs)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("block_attention.query", |rng, seed| {
            let segs = Segments::from_lengths(&lengths(rng, 3))?;
            let (k, val) = (gaussian(rng, &[segs.total(), 4]), gaussian(rng, &[segs.total(), 4]));
            let x = gaussian(rng, &[segs.total(), 4]);
            check_gradient(
                |v| {
                    let t = v.tape();
                    probe(v.block_attention(&t.constant(k.clone()), &t.constant(val.clone()), &segs, 0.5)?, seed)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        op_case!("block_attention.key", |rng, seed| {
            let segs = Segments::from_lengths(&lengths(rng, 3))?;
            let (q, val) = (gaussian(rng, &[segs.total(), 4]), gaussian(rng, &[segs.total(), 4]));
            let x = gaussian(rng, &[segs.total(), 4]);
            check_gradient(
                |v| {
                    let t = v.tape();
                    probe(t.constant(q.clone()).block_attention(&v, &t.constant(val.clone()), &segs, 0.5)?, seed)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        op_case!("block_attention.value", |rng, seed| {
            let segs = Segments::from_lengths(&lengths(rng, 3))?;
            let (q, k) = (gaussian(rng, &[segs.total(), 4]), gaussian(rng, &[segs.total(), 4]));
            let x = gaussian(rng, &[segs.total(), 4]);
            check_gradient(
                |v| {
                    let t = v.tape();
                    probe(t.constant(q.clone()).block_attention(&t.constant(k.clone()), &v, &segs, 0.5)?, seed)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        op_case!("sum_mean", |rng, seed| {
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.sum().add(&v.mean().scale(3.0))?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("sum_axis0", |rng, seed| {
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.sum_axis0()?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("sum_axis1", |rng, seed| {
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.sum_axis1()?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("concat_cols", |rng, seed| {
            let b = gaussian(rng, &[3, 2]);
            let x = gaussian(rng, &[3, 4]);
            check_gradient(
                |v| {
                    let b = v.tape().constant(b.clone());
                    probe(v.concat_cols(&b)?.add(&b.concat_cols(&v)?)?, seed)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        op_case!("concat_rows", |rng, seed| {
            let b = gaussian(rng, &[2, 4]);
            let x = gaussian(rng, &[3, 4]);
            check_gradient(
                |v| probe(Var::concat_rows(&[v, v.tape().constant(b.clone()), v])?, seed),
                &x,
                DEFAULT_STEP,
            )
        }),
        op_case!("gather_rows", |rng, seed| {
            let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
            let x = gaussian(rng, &[4, 3]);
            check_gradient(|v| probe(v.gather_rows(&idx)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("slice_rows", |rng, seed| {
            let x = gaussian(rng, &[5, 3]);
            check_gradient(|v| probe(v.slice_rows(1, 4)?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("l2_normalize_rows", |rng, seed| {
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.l2_normalize_rows()?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("detach_passes_forward", |rng, seed| {
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(v.add(&v.detach().scale(0.0))?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("conv2d.input", |rng, seed| {
            let (w, b) = (gaussian(rng, &[3, 2, 3, 3]), gaussian(rng, &[3]));
            let x = gaussian(rng, &[2, 2, 5, 5]);
            check_gradient(
                |v| {
                    let t = v.tape();
                    probe(v.conv2d(&t.constant(w.clone()), &t.constant(b.clone()), 2, 1)?, seed)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        op_case!("conv2d.weight", |rng, seed| {
            let (input, b) = (gaussian(rng, &[2, 2, 5, 5]), gaussian(rng, &[3]));
            let x = gaussian(rng, &[3, 2, 3, 3]);
            check_gradient(
                |v| {
                    let t = v.tape();
                    probe(t.constant(input.clone()).conv2d(&v, &t.constant(b.clone()), 2, 1)?, seed)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        op_case!("conv2d.bias", |rng, seed| {
            let (input, w) = (gaussian(rng, &[2, 2, 5, 5]), gaussian(rng, &[3, 2, 3, 3]));
            let x = gaussian(rng, &[3]);
            check_gradient(
                |v| {
                    let t = v.tape();
                    probe(t.constant(input.clone()).conv2d(&t.constant(w.clone()), &v, 1, 0)?, seed)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        op_case!("global_avg_pool", |rng, seed| {
            let x = gaussian(rng, &[2, 3, 4, 4]);
            check_gradient(|v| probe(v.global_avg_pool()?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("cosine_similarity", |rng, seed| {
            let b = gaussian(rng, &[1, 6]);
            let x = gaussian(rng, &[1, 6]);
            check_gradient(
                |v| probe(cosine_similarity(&v, &v.tape().constant(b.clone()))?, seed),
                &x,
                DEFAULT_STEP,
            )
        }),
        op_case!("cosine_rows", |rng, seed| {
            let b = gaussian(rng, &[3, 4]);
            let x = gaussian(rng, &[3, 4]);
            check_gradient(|v| probe(cosine_rows(&v, &v.tape().constant(b.clone()))?, seed), &x, DEFAULT_STEP)
        }),
        op_case!("cosine_matrix", |rng, seed| {
            let b = gaussian(rng, &[4, 5]);
            let x = gaussian(rng, &[3, 5]);
            check_gradient(
                |v| probe(cosine_matrix(&v, &v.tape().constant(b.clone()))?, seed),
                &x,
                DEFAULT_STEP,
            )
        }),
    ]
}

/// Direction of the comparison against the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    Above,
}

/// Aggregate outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst observed value over all trials.
    pub worst: f64,
    pub threshold: f64,
    pub bound: Bound,
    pub trials: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst.is_finite()
            && match self.bound {
                Bound::AtMost => self.worst <= self.threshold,
                Bound::Above => self.worst > self.threshold,
            }
    }

    pub fn line(&self) -> String {
        let op = match self.bound {
            Bound::AtMost => "<=",
            Bound::Above => ">",
        };
        format!(
            "{} {:<40} {:.3e} (need {op} {:.0e}, {} trials)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.threshold,
            self.trials
        )
    }
}

/// Outcome of [`run_suite`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: impl Into<String>, worst: f64, threshold: f64, trials: usize) {
        self.push_bound(name, worst, threshold, Bound::AtMost, trials);
    }

    fn push_bound(&mut self, name: impl Into<String>, worst: f64, threshold: f64, bound: Bound, trials: usize) {
        self.checks.push(CheckOutcome {
            name: name.into(),
            worst,
            threshold,
            bound,
            trials,
        });
    }
}

fn unit_rows(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).expect("rectangular rows")
}

/// Two reports with one sentence each and identity similarities at unit
/// temperature.
pub fn identity_pair_batch() -> LossBatch {
    let e = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    LossBatch {
        lengths: vec![1, 1],
        local: e.clone(),
        sentences: e.clone(),
        global: e.clone(),
        reports: e.clone(),
        views: [(e.clone(), e.clone()), (e.clone(), e.clone())],
        predictions: [e.clone(), e.clone()],
        projections: [e.clone(), e],
        log_inv_tau_local: 0.0,
        log_inv_tau_global: 0.0,
    }
}

/// Fixed batch whose first report has three sentences.
pub fn asymmetry_batch() -> LossBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = LossBatch::gaussian(&mut rng, vec![3, 1, 2], 4);
    b.log_inv_tau_local = 0.5;
    b
}

/// Single-pair batches `N = 1, n = 1` across seeds.
pub fn single_pair_batch(seed: u64) -> LossBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = if seed.is_multiple_of(2) { 4 } else { 32 };
    LossBatch::gaussian(&mut rng, vec![1], d)
}

/// Runs the loss oracles and gradient checks on `trials` random batches
/// plus the per-operation gradient checks on `trials` seeds.
pub fn run_suite(trials: usize) -> Result<SuiteReport> {
    if trials == 0 {
        return Err(Error::Validation("verification needs at least one trial".into()));
    }
    let mut report = SuiteReport::default();
    let cases = loss_cases();
    let batches: Vec<LossBatch> = (0..trials as u64).map(LossBatch::random).collect();

    for case in &cases {
        let mut oracle: f64 = 0.0;
        let mut grad: f64 = 0.0;
        let mut detached: f64 = 0.0;
        for b in &batches {
            oracle = oracle.max((evaluate_case(case, b)? - (case.oracle)(b)).abs());
            for &k in case.differentiable {
                grad = grad.max(gradient_error(case, b, k)?);
            }
            if !case.detached.is_empty() {
                detached = detached.max(detached_gradient(case, b)?);
            }
        }
        report.push(format!("oracle {}", case.name), oracle, ORACLE_TOLERANCE, trials);
        report.push(format!("gradient {}", case.name), grad, GRADIENT_TOLERANCE, trials);
        if !case.detached.is_empty() {
            report.push(format!("stop-gradient {}", case.name), detached, 0.0, trials);
        }
    }

    let single = ["local_loss", "local_loss_mean", "milnce_loss", "global_loss", "mirrored_loss"];
    let mut worst: f64 = 0.0;
    for seed in 0..trials as u64 {
        let b = single_pair_batch(seed);
        for case in cases.iter().filter(|c| single.contains(&c.name)) {
            worst = worst.max(evaluate_case(case, &b)?.abs());
        }
    }
    report.push("single pair losses are zero", worst, ORACLE_TOLERANCE, trials);

    let b = identity_pair_batch();
    for case in cases.iter().filter(|c| c.name == "local_loss" || c.name == "global_loss") {
        let v = evaluate_case(case, &b)?;
        report.push(
            format!("identity pair {}", case.name),
            (v - IDENTITY_PAIR_LOSS).abs(),
            1e-6,
            1,
        );
    }

    let b = asymmetry_batch();
    let find = |name: &str| cases.iter().find(|c| c.name == name).expect("known case");
    let (local, milnce) = (find("local_loss"), find("milnce_loss"));
    let (lv, mv) = (evaluate_case(local, &b)?, evaluate_case(milnce, &b)?);
    let oracle_gap = (lv - (local.oracle)(&b)).abs().max((mv - (milnce.oracle)(&b)).abs());
    report.push("asymmetry oracles", oracle_gap, ORACLE_TOLERANCE, 1);
    report.push_bound("asymmetry |local - milnce|", (lv - mv).abs(), 1e-6, Bound::Above, 1);

    for op in op_cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..trials as u64 {
            worst = worst.max((op.check)(seed)?);
        }
        report.push(format!("op {}", op.name), worst, GRADIENT_TOLERANCE, trials);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pair_constant_matches_closed_form() {
        let exact = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((exact - IDENTITY_PAIR_LOSS).abs() < 1e-15);
    }

    #[test]
    fn random_batches_respect_bounds() {
        for seed in 0..50 {
            let b = LossBatch::random(seed);
            assert!((1..=5).contains(&b.lengths.len()));
            assert!(b.lengths.iter().all(|n| (1..=4).contains(n)));
            assert!([4, 32].contains(&b.local.shape()[1]));
        }
    }

    #[test]
    fn small_suite_passes() {
        let report = run_suite(3).unwrap();
        for c in &report.checks {
            assert!(c.passed(), "{}", c.line());
        }
    }
}
