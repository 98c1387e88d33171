//! Dense arrays, reverse-mode differentiation, parameters and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod segments;
pub mod tape;
pub mod tensor;

pub use gradcheck::check_gradient;
pub use params::{Bound, ParamId, ParamStore, Parameter};
pub use segments::Segments;
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Cosine similarity of two vectors (any shape, compared element-wise).
pub fn cosine_similarity<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    let (na, nb) = (sa.iter().product::<usize>(), sb.iter().product::<usize>());
    if na != nb {
        return Err(Error::shape("cosine_similarity", &sa, &sb));
    }
    let a = a.reshape(&[1, na])?.l2_normalize_rows()?;
    let b = b.reshape(&[1, nb])?.l2_normalize_rows()?;
    Ok(a.mul(&b)?.sum())
}

/// Row-wise cosine similarity of two `[M, K]` matrices, giving `[M, 1]`.
pub fn cosine_rows<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    a.l2_normalize_rows()?
        .mul(&b.l2_normalize_rows()?)?
        .sum_axis1()
}

/// All-pairs cosine similarity, `[M, K] x [N, K] -> [M, N]`.
pub fn cosine_matrix<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    a.l2_normalize_rows()?
        .matmul(&b.l2_normalize_rows()?.transpose()?)
}

/// Plain-value cosine similarity used outside of differentiation.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > NORM_EPS && nb > NORM_EPS) {
        return Err(Error::NumericDomain(format!(
            "cosine of vector with norm at or below {NORM_EPS:e}"
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}
