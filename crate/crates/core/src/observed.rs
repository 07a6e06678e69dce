//! Sparse observed rating matrix with row (CSR) and column (CSC) adjacency.
//!
//! Entries are stored in row-major order, so the entry ids of one row form a
//! contiguous range. The column view keeps its own slot order; slot `j` of the
//! column view refers back to entry `col_entry(j)`.

use std::ops::Range;

use crate::error::{Error, Result};

/// One observed value `y[row, col]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// A neighbor seen from one side of the bipartite graph: the index on the other
/// side, the entry id, and the observed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub entry: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedMatrix {
    n_rows: usize,
    n_cols: usize,
    // row-major entry storage
    row_ptr: Vec<usize>,
    entry_rows: Vec<usize>,
    entry_cols: Vec<usize>,
    values: Vec<f64>,
    // column view
    col_ptr: Vec<usize>,
    col_rows: Vec<usize>,
    col_entries: Vec<usize>,
    col_values: Vec<f64>,
}

impl ObservedMatrix {
    /// Builds both adjacency views from `(row, col, value)` triples.
    ///
    /// Rejects out-of-range indices, non-finite values and duplicate positions.
    pub fn from_triples<I>(n_rows: usize, n_cols: usize, triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut triples: Vec<(usize, usize, f64)> = triples.into_iter().collect();
        for (k, &(r, c, v)) in triples.iter().enumerate() {
            if r >= n_rows || c >= n_cols {
                return Err(Error::data(
                    None,
                    format!("triple {k}: index ({r}, {c}) outside {n_rows}x{n_cols}"),
                ));
            }
            if !v.is_finite() {
                return Err(Error::data(None, format!("triple {k}: non-finite value {v}")));
            }
        }
        triples.sort_unstable_by_key(|&(r, c, _)| (r, c));
        if let Some(w) = triples
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(Error::data(
                None,
                format!("duplicate entry at ({}, {})", w[0].0, w[0].1),
            ));
        }

        let nnz = triples.len();
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_ptr = vec![0usize; n_cols + 1];
        for &(r, c, _) in &triples {
            row_ptr[r + 1] += 1;
            col_ptr[c + 1] += 1;
        }
        for k in 0..n_rows {
            row_ptr[k + 1] += row_ptr[k];
        }
        for k in 0..n_cols {
            col_ptr[k + 1] += col_ptr[k];
        }

        let entry_rows: Vec<usize> = triples.iter().map(|t| t.0).collect();
        let entry_cols: Vec<usize> = triples.iter().map(|t| t.1).collect();
        let values: Vec<f64> = triples.iter().map(|t| t.2).collect();

        let mut col_rows = vec![0usize; nnz];
        let mut col_entries = vec![0usize; nnz];
        let mut col_values = vec![0.0; nnz];
        let mut cursor = col_ptr.clone();
        // entries are row-sorted, so every column slot list comes out row-sorted too
        for (e, &(r, c, v)) in triples.iter().enumerate() {
            let slot = cursor[c];
            cursor[c] += 1;
            col_rows[slot] = r;
            col_entries[slot] = e;
            col_values[slot] = v;
        }

        Ok(Self {
            n_rows,
            n_cols,
            row_ptr,
            entry_rows,
            entry_cols,
            values,
            col_ptr,
            col_rows,
            col_entries,
            col_values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Number of observed entries, |Ω|.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, id: usize) -> Entry {
        Entry {
            row: self.entry_rows[id],
            col: self.entry_cols[id],
            value: self.values[id],
        }
    }

    /// All entries in entry-id (row-major) order.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = Entry> + '_ {
        (0..self.len()).map(move |e| self.entry(e))
    }

    pub fn triples(&self) -> Vec<(usize, usize, f64)> {
        self.entries().map(|e| (e.row, e.col, e.value)).collect()
    }

    /// Entry ids belonging to `row`.
    pub fn row_range(&self, row: usize) -> Range<usize> {
        self.row_ptr[row]..self.row_ptr[row + 1]
    }

    /// Column-view slots belonging to `col`.
    pub fn col_range(&self, col: usize) -> Range<usize> {
        self.col_ptr[col]..self.col_ptr[col + 1]
    }

    pub fn row_degree(&self, row: usize) -> usize {
        self.row_ptr[row + 1] - self.row_ptr[row]
    }

    pub fn col_degree(&self, col: usize) -> usize {
        self.col_ptr[col + 1] - self.col_ptr[col]
    }

    /// Offsets of each row's entry range (length `n_rows + 1`).
    pub fn row_offsets(&self) -> &[usize] {
        &self.row_ptr
    }

    /// Offsets of each column's slot range (length `n_cols + 1`).
    pub fn col_offsets(&self) -> &[usize] {
        &self.col_ptr
    }

    /// `(col, entry id, value)` for every observation in `row`.
    pub fn row(&self, row: usize) -> impl ExactSizeIterator<Item = Neighbor> + '_ {
        self.row_range(row).map(move |e| Neighbor {
            index: self.entry_cols[e],
            entry: e,
            value: self.values[e],
        })
    }

    /// `(row, entry id, value)` for every observation in `col`, in slot order.
    pub fn col(&self, col: usize) -> impl ExactSizeIterator<Item = Neighbor> + '_ {
        self.col_range(col).map(move |s| Neighbor {
            index: self.col_rows[s],
            entry: self.col_entries[s],
            value: self.col_values[s],
        })
    }

    /// Column indices and values of `row`'s observations, aligned with `row_range(row)`.
    pub fn row_slices(&self, row: usize) -> (&[usize], &[f64]) {
        let r = self.row_range(row);
        (&self.entry_cols[r.clone()], &self.values[r])
    }

    /// Row indices and values of `col`'s observations, aligned with `col_range(col)`.
    pub fn col_slices(&self, col: usize) -> (&[usize], &[f64]) {
        let r = self.col_range(col);
        (&self.col_rows[r.clone()], &self.col_values[r])
    }

    /// Row index of column-view slot `slot`.
    pub fn col_slot_row(&self, slot: usize) -> usize {
        self.col_rows[slot]
    }

    /// Entry id of column-view slot `slot`.
    pub fn col_entry(&self, slot: usize) -> usize {
        self.col_entries[slot]
    }

    pub fn col_slot_value(&self, slot: usize) -> f64 {
        self.col_values[slot]
    }

    pub fn col_of_entry(&self, entry: usize) -> usize {
        self.entry_cols[entry]
    }

    pub fn row_of_entry(&self, entry: usize) -> usize {
        self.entry_rows[entry]
    }

    pub fn value(&self, entry: usize) -> f64 {
        self.values[entry]
    }

    /// The same observations with rows and columns exchanged.
    pub fn transpose(&self) -> Self {
        Self::from_triples(
            self.n_cols,
            self.n_rows,
            self.entries().map(|e| (e.col, e.row, e.value)),
        )
        .expect("transpose of a valid matrix is valid")
    }
}

/// `build_observed` under its operation name.
pub fn build_observed(
    triples: &[(usize, usize, f64)],
    n_rows: usize,
    n_cols: usize,
) -> Result<ObservedMatrix> {
    ObservedMatrix::from_triples(n_rows, n_cols, triples.iter().copied())
}
