//! Cross-classification of transformed responses and covariates into an
//! `L x J` contingency table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Covariates;
use crate::partition::Partition;

/// Grid `0 = t_0 < t_1 < ... < t_L = 1` on the unit interval. Bin `l` is
/// `(t_{l-1}, t_l]`, except that the first bin also holds `0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UGrid {
    thresholds: Vec<f64>,
    widths: Vec<f64>,
}

impl UGrid {
    /// Balanced grid with `t_l = l / L`.
    pub fn balanced(l: usize) -> Result<Self> {
        if l < 1 {
            return Err(Error::InvalidArgument("grid size L must be >= 1".into()));
        }
        let thresholds = (0..=l).map(|i| i as f64 / l as f64).collect();
        Ok(Self { thresholds, widths: vec![1.0 / l as f64; l] })
    }

    pub fn from_thresholds(thresholds: Vec<f64>) -> Result<Self> {
        let ok = thresholds.len() >= 2
            && thresholds[0] == 0.0
            && *thresholds.last().unwrap() == 1.0
            && thresholds.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidArgument(
                "grid thresholds must increase strictly from 0 to 1".into(),
            ));
        }
        let widths = thresholds.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self { thresholds, widths })
    }

    /// Number of bins `L`.
    pub fn len(&self) -> usize {
        self.thresholds.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Bin widths `|U_l|`; exactly `1/L` for balanced grids.
    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    /// 0-based bin index of `v`.
    pub fn bin(&self, v: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("transformed value {v} is outside [0, 1]")));
        }
        let upper = &self.thresholds[1..];
        Ok(upper.partition_point(|&t| t < v).min(upper.len() - 1))
    }
}

/// Per-observation bin and cell labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    pub bins: Vec<usize>,
    pub cells: Vec<usize>,
}

/// Observed counts `O[l][j]` with their margins.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    counts: Vec<u64>,
    l: usize,
    j: usize,
    column_counts: Vec<u64>,
    n: u64,
    widths: Vec<f64>,
    q_hat: Vec<f64>,
}

impl Serialize for ContingencyTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_doc().serialize(s)
    }
}

/// Serialized form of a table: `O` as nested rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDoc {
    #[serde(rename = "O")]
    pub observed: Vec<Vec<u64>>,
    pub column_counts: Vec<u64>,
    pub n: u64,
    pub widths: Vec<f64>,
    pub q_hat: Vec<f64>,
}

impl ContingencyTable {
    /// Builds a table from row-major counts (`L` rows, `J` columns).
    pub fn from_counts(observed: &[Vec<u64>], widths: Vec<f64>) -> Result<Self> {
        let l = observed.len();
        let j = observed.first().map_or(0, Vec::len);
        if l == 0 || j == 0 || observed.iter().any(|r| r.len() != j) {
            return Err(Error::InvalidArgument("table must be a non-empty L x J matrix".into()));
        }
        if widths.len() != l || widths.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidArgument("need one positive width per row".into()));
        }
        let counts = observed.concat();
        Ok(Self::assemble(counts, l, j, widths))
    }

    fn assemble(counts: Vec<u64>, l: usize, j: usize, widths: Vec<f64>) -> Self {
        let mut column_counts = vec![0u64; j];
        for row in counts.chunks_exact(j) {
            for (c, o) in column_counts.iter_mut().zip(row) {
                *c += o;
            }
        }
        let n: u64 = column_counts.iter().sum();
        let q_hat = column_counts
            .iter()
            .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect();
        Self { counts, l, j, column_counts, n, widths, q_hat }
    }

    /// Number of bins `L`.
    pub fn rows(&self) -> usize {
        self.l
    }

    /// Number of covariate cells `J`.
    pub fn cols(&self) -> usize {
        self.j
    }

    #[inline]
    pub fn observed(&self, l: usize, j: usize) -> u64 {
        self.counts[l * self.j + j]
    }

    /// Expected count `N_j |U_l|` under the null.
    #[inline]
    pub fn expected(&self, l: usize, j: usize) -> f64 {
        self.column_counts[j] as f64 * self.widths[l]
    }

    /// Counts in row-major order.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn column_counts(&self) -> &[u64] {
        &self.column_counts
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn q_hat(&self) -> &[f64] {
        &self.q_hat
    }

    pub fn to_doc(&self) -> TableDoc {
        TableDoc {
            observed: self.counts.chunks_exact(self.j).map(<[u64]>::to_vec).collect(),
            column_counts: self.column_counts.clone(),
            n: self.n,
            widths: self.widths.clone(),
            q_hat: self.q_hat.clone(),
        }
    }
}

/// Labels every observation with its bin and covariate cell.
pub fn classify(v: &[f64], x: &Covariates, grid: &UGrid, partition: &Partition) -> Result<Classification> {
    if v.len() != x.n() {
        return Err(Error::InvalidArgument(format!(
            "{} transformed values but {} covariate rows",
            v.len(),
            x.n()
        )));
    }
    let bins = v.iter().map(|&vi| grid.bin(vi)).collect::<Result<Vec<_>>>()?;
    let cells = partition.assign(x)?;
    Ok(Classification { bins, cells })
}

/// Table of a classification.
pub fn tabulate(labels: &Classification, grid: &UGrid, n_cells: usize) -> ContingencyTable {
    let l = grid.len();
    let mut counts = vec![0u64; l * n_cells];
    for (&b, &c) in labels.bins.iter().zip(&labels.cells) {
        counts[b * n_cells + c] += 1;
    }
    ContingencyTable::assemble(counts, l, n_cells, grid.widths().to_vec())
}

/// `O[l][j] = #{i : v_i in U_l, x_i in A_j}`.
pub fn cross_classify(v: &[f64], x: &Covariates, grid: &UGrid, partition: &Partition) -> Result<ContingencyTable> {
    let labels = classify(v, x, grid, partition)?;
    Ok(tabulate(&labels, grid, partition.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_grids() {
        assert_eq!(UGrid::balanced(1).unwrap().thresholds(), &[0.0, 1.0]);
        assert_eq!(UGrid::balanced(4).unwrap().thresholds(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = UGrid::balanced(3).unwrap();
        let w = g.widths();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(UGrid::balanced(0).is_err());
    }

    #[test]
    fn bin_boundaries() {
        let g = UGrid::balanced(4).unwrap();
        assert_eq!(g.bin(0.25).unwrap(), 0);
        assert_eq!(g.bin(0.250_001).unwrap(), 1);
        assert_eq!(g.bin(0.0).unwrap(), 0);
        assert_eq!(g.bin(1.0).unwrap(), 3);
        assert!(g.bin(-1e-9).is_err());
        assert!(g.bin(1.000_001).is_err());
        assert!(g.bin(f64::NAN).is_err());
        // 0.3 sits exactly on a threshold of the L = 10 grid.
        assert_eq!(UGrid::balanced(10).unwrap().bin(0.3).unwrap(), 2);
    }

    #[test]
    fn single_cell_table() {
        let x = Covariates::new(vec![0.0; 4], 1).unwrap();
        let t = cross_classify(
            &[0.1, 0.6, 0.4, 0.9],
            &x,
            &UGrid::balanced(2).unwrap(),
            &Partition::single(1),
        )
        .unwrap();
        assert_eq!(t.to_doc().observed, vec![vec![2], vec![2]]);
        assert_eq!(t.column_counts(), &[4]);
        assert_eq!(t.q_hat(), &[1.0]);
    }

    #[test]
    fn two_by_two_table() {
        let x = Covariates::new(vec![-1.0, -1.0, 1.0, 1.0], 1).unwrap();
        let p = Partition::grid(&[vec![0.0]]).unwrap();
        let t = cross_classify(&[0.1, 0.9, 0.1, 0.9], &x, &UGrid::balanced(2).unwrap(), &p).unwrap();
        assert_eq!(t.to_doc().observed, vec![vec![1, 1], vec![1, 1]]);
        assert_eq!(t.expected(0, 1), 1.0);
    }

    #[test]
    fn length_mismatch() {
        let x = Covariates::new(vec![0.0; 3], 1).unwrap();
        let g = UGrid::balanced(2).unwrap();
        assert!(cross_classify(&[0.5], &x, &g, &Partition::single(1)).is_err());
    }
}
