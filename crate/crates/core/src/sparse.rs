//! Compressed sparse row index patterns.
//!
//! A [`Pattern`] fixes the set of stored `(row, col)` positions; values live
//! elsewhere (in a [`crate::views::View`] or a tape tensor) in the same order.
//! Columns inside each row are strictly increasing.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl Pattern {
    /// Builds a pattern from per-row column lists. Lists are sorted and
    /// deduplicated.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        let n_rows = rows.len();
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for (i, mut cols) in rows.into_iter().enumerate() {
            cols.sort_unstable();
            cols.dedup();
            if let Some(&c) = cols.last() {
                if c >= n_cols {
                    return Err(Error::Validation(format!("column {c} out of range in row {i} (n_cols = {n_cols})")));
                }
            }
            col_idx.extend(cols);
            row_ptr.push(col_idx.len());
        }
        Ok(Self { n_rows, n_cols, row_ptr, col_idx })
    }

    /// Builds a pattern from coordinates. Duplicates collapse into one slot.
    pub fn from_coords(n_rows: usize, n_cols: usize, coords: &[(usize, usize)]) -> Result<Self> {
        let mut rows = vec![Vec::new(); n_rows];
        for &(r, c) in coords {
            if r >= n_rows {
                return Err(Error::Validation(format!("row {r} out of range (n_rows = {n_rows})")));
            }
            rows[r].push(c);
        }
        Self::from_rows(n_cols, rows)
    }

    pub fn identity(n: usize) -> Self {
        Self { n_rows: n, n_cols: n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect() }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    /// Row index of every stored entry, in storage order.
    pub fn row_of_entries(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for i in 0..self.n_rows {
            out.extend(std::iter::repeat_n(i, self.row_ptr[i + 1] - self.row_ptr[i]));
        }
        out
    }

    /// Storage slot of `(r, c)`, if present.
    pub fn find(&self, r: usize, c: usize) -> Option<usize> {
        let range = self.row_range(r);
        self.col_idx[range.clone()].binary_search(&c).ok().map(|k| range.start + k)
    }

    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_rows).flat_map(move |i| self.row(i).iter().map(move |&j| (i, j)))
    }

    /// Union of two patterns with the slot maps from each input into the union.
    pub fn union(&self, other: &Pattern) -> Result<(Pattern, Vec<usize>, Vec<usize>)> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(Error::Shape(format!("pattern union {}x{} vs {}x{}", self.n_rows, self.n_cols, other.n_rows, other.n_cols)));
        }
        let mut row_ptr = Vec::with_capacity(self.n_rows + 1);
        let mut col_idx = Vec::with_capacity(self.nnz().max(other.nnz()));
        let mut map_a = vec![0; self.nnz()];
        let mut map_b = vec![0; other.nnz()];
        row_ptr.push(0);
        for i in 0..self.n_rows {
            let (ra, rb) = (self.row_range(i), other.row_range(i));
            let (mut a, mut b) = (ra.start, rb.start);
            while a < ra.end || b < rb.end {
                let ca = if a < ra.end { self.col_idx[a] } else { usize::MAX };
                let cb = if b < rb.end { other.col_idx[b] } else { usize::MAX };
                let slot = col_idx.len();
                if ca <= cb {
                    col_idx.push(ca);
                    map_a[a] = slot;
                    a += 1;
                    if ca == cb {
                        map_b[b] = slot;
                        b += 1;
                    }
                } else {
                    col_idx.push(cb);
                    map_b[b] = slot;
                    b += 1;
                }
            }
            row_ptr.push(col_idx.len());
        }
        let union = Pattern { n_rows: self.n_rows, n_cols: self.n_cols, row_ptr, col_idx };
        Ok((union, map_a, map_b))
    }

    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols && self.coords().all(|(i, j)| self.find(j, i).is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_maps_point_at_matching_columns() {
        let a = Pattern::from_rows(4, vec![vec![0, 2], vec![], vec![3]]).unwrap();
        let b = Pattern::from_rows(4, vec![vec![1, 2], vec![0], vec![]]).unwrap();
        let (u, ma, mb) = a.union(&b).unwrap();
        assert_eq!(u.row(0), &[0, 1, 2]);
        assert_eq!(u.row(1), &[0]);
        assert_eq!(u.row(2), &[3]);
        for (k, (r, c)) in a.coords().enumerate() {
            assert_eq!(u.find(r, c), Some(ma[k]));
        }
        for (k, (r, c)) in b.coords().enumerate() {
            assert_eq!(u.find(r, c), Some(mb[k]));
        }
    }

    #[test]
    fn from_rows_rejects_out_of_range() {
        assert!(Pattern::from_rows(2, vec![vec![2]]).is_err());
    }
}
