//! Row-compressed operators acting on grid functions.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Which piece of the split operator a matrix represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorPart {
    Ar,
    Ir,
    Jr,
    ArStar,
    IrStar,
    JrStar,
    /// `A_r + I_r`
    LocalAndSmall,
    L,
    LStar,
    Other,
}

impl fmt::Display for OperatorPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OperatorPart::Ar => "A_r",
            OperatorPart::Ir => "I_r",
            OperatorPart::Jr => "J_r",
            OperatorPart::ArStar => "A_r*",
            OperatorPart::IrStar => "I_r*",
            OperatorPart::JrStar => "J_r*",
            OperatorPart::LocalAndSmall => "A_r+I_r",
            OperatorPart::L => "L",
            OperatorPart::LStar => "L*",
            OperatorPart::Other => "other",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    pub part: OperatorPart,
    pub r: Option<f64>,
}

impl SparseOperator {
    pub fn zero(n: usize, part: OperatorPart) -> Self {
        SparseOperator { n, row_ptr: vec![0; n + 1], col_idx: Vec::new(), values: Vec::new(), part, r: None }
    }

    /// Builds an n×n matrix from per-row entry lists; duplicates are summed
    /// and columns sorted.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>, part: OperatorPart) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::Dimension { expected: n, got: rows.len() });
        }
        let merged: Vec<Vec<(usize, f64)>> = rows
            .into_par_iter()
            .map(|mut row| {
                row.sort_by_key(|e| e.0);
                let mut out: Vec<(usize, f64)> = Vec::with_capacity(row.len());
                for (c, v) in row {
                    match out.last_mut() {
                        Some(last) if last.0 == c => last.1 += v,
                        _ => out.push((c, v)),
                    }
                }
                out
            })
            .collect();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let nnz: usize = merged.iter().map(Vec::len).sum();
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for row in merged {
            for (c, v) in row {
                if c >= n {
                    return Err(Error::invalid(format!("column {c} out of range for n={n}")));
                }
                if !v.is_finite() {
                    return Err(Error::invalid(format!("non-finite matrix entry in column {c}")));
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseOperator { n, row_ptr, col_idx, values, part, r: None })
    }

    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)], part: OperatorPart) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i >= n {
                return Err(Error::invalid(format!("row {i} out of range for n={n}")));
            }
            rows[i].push((j, v));
        }
        SparseOperator::from_rows(n, rows, part)
    }

    pub fn with_radius(mut self, r: f64) -> Self {
        self.r = Some(r);
        self
    }

    pub fn with_part(mut self, part: OperatorPart) -> Self {
        self.part = part;
        self
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[span.clone()].binary_search(&j) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.apply_into(u, &mut out);
        out
    }

    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        assert_eq!(u.len(), self.n, "operand length");
        out.par_iter_mut().enumerate().with_min_len(256).for_each(|(i, o)| {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * u[self.col_idx[k]];
            }
            *o = acc;
        });
    }

    pub fn transpose(&self) -> SparseOperator {
        let n = self.n;
        let mut counts = vec![0usize; n + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let c = self.col_idx[k];
                let dst = next[c];
                col_idx[dst] = i;
                values[dst] = self.values[k];
                next[c] += 1;
            }
        }
        SparseOperator { n, row_ptr, col_idx, values, part: self.part, r: self.r }
    }

    /// Entrywise sum; the result keeps the `r` of `self`.
    pub fn add(&self, other: &SparseOperator, part: OperatorPart) -> Result<SparseOperator> {
        if self.n != other.n {
            return Err(Error::Dimension { expected: self.n, got: other.n });
        }
        let rows = (0..self.n).map(|i| self.row(i).chain(other.row(i)).collect()).collect();
        let mut out = SparseOperator::from_rows(self.n, rows, part)?;
        out.r = self.r.or(other.r);
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> SparseOperator {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `c·I + self`
    pub fn shift_identity(&self, c: f64) -> SparseOperator {
        let rows = (0..self.n)
            .map(|i| self.row(i).chain(std::iter::once((i, c))).collect())
            .collect();
        SparseOperator::from_rows(self.n, rows, self.part).expect("shape preserved")
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Induced ℓ¹ norm: largest absolute column sum. With uniform cell
    /// weights this equals the induced norm of the h^d-weighted L¹ norm.
    pub fn norm_l1(&self) -> f64 {
        let mut col = vec![0.0; self.n];
        for (c, v) in self.col_idx.iter().zip(&self.values) {
            col[*c] += v.abs();
        }
        col.into_iter().fold(0.0, f64::max)
    }

    /// Induced ℓ^∞ norm: largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut col = vec![0.0; self.n];
        for (c, v) in self.col_idx.iter().zip(&self.values) {
            col[*c] += v;
        }
        col
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// Largest |entry| (scale reference for roundoff tolerances).
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Coordinate text format: one `row col value` triple per line, values
    /// with 17 significant digits.
    pub fn write_coo<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                writeln!(w, "{i} {j} {v:.16e}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> SparseOperator {
        SparseOperator::from_triplets(
            3,
            &[(0, 0, 1.0), (0, 2, -2.0), (1, 1, 3.0), (2, 0, 4.0), (2, 0, 0.5), (2, 2, -1.0)],
            OperatorPart::Other,
        )
        .unwrap()
    }

    #[test]
    fn duplicates_are_summed_and_apply_works() {
        let a = small();
        assert_eq!(a.get(2, 0), 4.5);
        assert_eq!(a.apply(&[1.0, 1.0, 1.0]), vec![-1.0, 3.0, 3.5]);
        assert_eq!(a.nnz(), 5);
    }

    #[test]
    fn norms() {
        let a = small();
        assert_eq!(a.norm_l1(), 5.5);
        assert_eq!(a.norm_inf(), 5.5);
        assert_eq!(a.column_sums(), vec![5.5, 3.0, -3.0]);
        assert_eq!(a.transpose().get(0, 2), 4.5);
    }

    #[test]
    fn coo_dump_has_seventeen_digits() {
        let mut buf = Vec::new();
        small().write_coo(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "0 0 1.0000000000000000e0");
        assert_eq!(text.lines().count(), 5);
    }

    fn arb_matrix() -> impl Strategy<Value = (usize, Vec<(usize, usize, f64)>)> {
        (1usize..12).prop_flat_map(|n| {
            (Just(n), prop::collection::vec((0..n, 0..n, -10.0f64..10.0), 0..40))
        })
    }

    proptest! {
        #[test]
        fn transpose_is_an_involution((n, t) in arb_matrix()) {
            let a = SparseOperator::from_triplets(n, &t, OperatorPart::Other).unwrap();
            prop_assert_eq!(a.transpose().transpose(), a);
        }

        #[test]
        fn apply_is_linear((n, t) in arb_matrix(), alpha in -3.0f64..3.0, seed in 0u64..1000) {
            let a = SparseOperator::from_triplets(n, &t, OperatorPart::Other).unwrap();
            let u: Vec<f64> = (0..n).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
            let v: Vec<f64> = (0..n).map(|i| ((i as u64 * 7 + seed) % 13) as f64 * 0.5).collect();
            let comb: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + b).collect();
            let lhs = a.apply(&comb);
            let au = a.apply(&u);
            let av = a.apply(&v);
            for i in 0..n {
                prop_assert!((lhs[i] - (alpha * au[i] + av[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn transpose_pairing_identity((n, t) in arb_matrix()) {
            let a = SparseOperator::from_triplets(n, &t, OperatorPart::Other).unwrap();
            let u: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let f: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos()).collect();
            let lhs: f64 = a.apply(&u).iter().zip(&f).map(|(x, y)| x * y).sum();
            let rhs: f64 = u.iter().zip(a.transpose().apply(&f)).map(|(x, y)| x * y).sum();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
