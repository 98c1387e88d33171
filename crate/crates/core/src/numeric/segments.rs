use std::sync::Arc;

use crate::error::{Error, Result};

/// Partition of `total` consecutive rows into non-empty segments.
///
/// Stored as `len + 1` boundaries: segment `i` covers rows
/// `bounds[i]..bounds[i + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    bounds: Arc<[usize]>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Validation("segment list is empty".into()));
        }
        if let Some(i) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::Validation(format!("segment {i} is empty")));
        }
        let mut bounds = Vec::with_capacity(lengths.len() + 1);
        bounds.push(0);
        let mut acc = 0;
        for &l in lengths {
            acc += l;
            bounds.push(acc);
        }
        Ok(Self {
            bounds: bounds.into(),
        })
    }

    /// Single segment spanning `len` rows.
    pub fn single(len: usize) -> Result<Self> {
        Self::from_lengths(&[len])
    }

    pub fn len(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> usize {
        self.bounds[self.bounds.len() - 1]
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.bounds[i]..self.bounds[i + 1]
    }

    pub fn starts(&self) -> &[usize] {
        &self.bounds[..self.bounds.len() - 1]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.bounds.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.bounds.windows(2).map(|w| w[0]..w[1])
    }

    /// Segment index owning each row.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for (i, r) in self.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, r.len()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_rows() {
        let s = Segments::from_lengths(&[2, 1, 3]).unwrap();
        assert_eq!(s.total(), 6);
        assert_eq!(s.range(2), 3..6);
        assert_eq!(s.owners(), vec![0, 0, 1, 2, 2, 2]);
        assert_eq!(s.starts(), &[0, 2, 3]);
    }

    #[test]
    fn rejects_empty_segment() {
        assert!(Segments::from_lengths(&[1, 0]).is_err());
        assert!(Segments::from_lengths(&[]).is_err());
    }
}
