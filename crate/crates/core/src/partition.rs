//! Partitions of covariate space into axis-aligned rectangles.
//!
//! Cells are half-open on the left and closed on the right in every
//! coordinate, `lower_d < x_d <= upper_d`, with infinite bounds on the outer
//! cells so that a partition always covers `R^k`. Three constructions are
//! provided: a fixed product grid, Gessaman's recursive equal-count rule
//! and the random tree partition (RTP), which grows a tree by repeatedly
//! splitting the most populated terminal cell along a randomly drawn axis.
//!
//! Cell indices are 0-based throughout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Covariates;
use crate::rng;

/// Axis-aligned rectangle `{x : lower_d < x_d <= upper_d for all d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(with = "bounds")]
    pub lower: Vec<f64>,
    #[serde(with = "bounds")]
    pub upper: Vec<f64>,
}

impl Cell {
    /// The whole of `R^k`.
    pub fn whole(k: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; k],
            upper: vec![f64::INFINITY; k],
        }
    }

    pub fn k(&self) -> usize {
        self.lower.len()
    }

    #[inline]
    pub fn contains(&self, x: &[f64]) -> bool {
        self.lower
            .iter()
            .zip(&self.upper)
            .zip(x)
            .all(|((&lo, &hi), &v)| lo < v && v <= hi)
    }

    fn with_axis(&self, axis: usize, lower: f64, upper: f64) -> Self {
        let mut cell = self.clone();
        cell.lower[axis] = lower;
        cell.upper[axis] = upper;
        cell
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Fixed,
    Gessaman,
    Rtp,
}

/// A finite collection of disjoint cells whose union is `R^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr")]
pub struct Partition {
    origin: Origin,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    t: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r: Option<usize>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    equal_depth: bool,
    cells: Vec<Cell>,
}

#[derive(Deserialize)]
struct PartitionRepr {
    origin: Origin,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(rename = "T", default)]
    t: Option<usize>,
    #[serde(default)]
    r: Option<usize>,
    #[serde(default)]
    equal_depth: bool,
    cells: Vec<Cell>,
}

impl TryFrom<PartitionRepr> for Partition {
    type Error = Error;

    fn try_from(repr: PartitionRepr) -> Result<Self> {
        validate_cells(&repr.cells)?;
        Ok(Partition {
            origin: repr.origin,
            seed: repr.seed,
            t: repr.t,
            r: repr.r,
            equal_depth: repr.equal_depth,
            cells: repr.cells,
        })
    }
}

/// Upper limit on elementary boxes enumerated by the exact cover check.
const COVER_CHECK_LIMIT: usize = 1 << 24;

fn validate_cells(cells: &[Cell]) -> Result<()> {
    let k = match cells.first() {
        Some(c) => c.k(),
        None => return Err(Error::InvalidArgument("a partition needs at least one cell".into())),
    };
    if k == 0 {
        return Err(Error::InvalidArgument("cells must have dimension >= 1".into()));
    }
    for (j, c) in cells.iter().enumerate() {
        if c.lower.len() != k || c.upper.len() != k {
            return Err(Error::InvalidArgument(format!("cell {j} has the wrong dimension")));
        }
        for d in 0..k {
            let (lo, hi) = (c.lower[d], c.upper[d]);
            if lo.is_nan() || hi.is_nan() || !(lo < hi) || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(format!(
                    "cell {j} has an empty or invalid interval ({lo}, {hi}] on axis {d}"
                )));
            }
        }
    }
    check_cover(cells, k)
}

/// Exact cover/disjointness check: every elementary box cut out by the
/// cells' finite bounds must lie in exactly one cell. Skipped when the box
/// count is too large to enumerate.
fn check_cover(cells: &[Cell], k: usize) -> Result<()> {
    let probes: Vec<Vec<f64>> = (0..k)
        .map(|d| {
            let mut b: Vec<f64> = cells
                .iter()
                .flat_map(|c| [c.lower[d], c.upper[d]])
                .filter(|v| v.is_finite())
                .collect();
            b.sort_by(f64::total_cmp);
            b.dedup();
            let mut p = b.clone();
            let last = b.last().copied().unwrap_or(0.0);
            p.push(last + last.abs().max(1.0));
            p
        })
        .collect();
    let boxes = probes
        .iter()
        .try_fold(1usize, |acc, p| acc.checked_mul(p.len()));
    match boxes.and_then(|b| b.checked_mul(cells.len())) {
        Some(work) if work <= COVER_CHECK_LIMIT => {}
        _ => return Ok(()),
    }
    let mut idx = vec![0usize; k];
    let mut point = vec![0.0; k];
    loop {
        for d in 0..k {
            point[d] = probes[d][idx[d]];
        }
        let hits = cells.iter().filter(|c| c.contains(&point)).count();
        if hits != 1 {
            return Err(Error::InvalidArgument(format!(
                "cells are not a partition: point {point:?} lies in {hits} cells"
            )));
        }
        let mut d = 0;
        loop {
            if d == k {
                return Ok(());
            }
            idx[d] += 1;
            if idx[d] < probes[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

impl Partition {
    /// Validates user-supplied cells (structure and, when tractable, exact cover).
    pub fn from_cells(cells: Vec<Cell>) -> Result<Self> {
        validate_cells(&cells)?;
        Ok(Self {
            origin: Origin::Fixed,
            seed: None,
            t: None,
            r: None,
            equal_depth: false,
            cells,
        })
    }

    /// The trivial partition `{R^k}`.
    pub fn single(k: usize) -> Self {
        Self {
            origin: Origin::Fixed,
            seed: None,
            t: None,
            r: None,
            equal_depth: false,
            cells: vec![Cell::whole(k)],
        }
    }

    /// Fixed product grid from per-axis cut points; axis 0 varies slowest.
    pub fn grid(cuts: &[Vec<f64>]) -> Result<Self> {
        if cuts.is_empty() {
            return Err(Error::InvalidArgument("grid needs cut points for at least one axis".into()));
        }
        for (d, c) in cuts.iter().enumerate() {
            if c.iter().any(|v| !v.is_finite()) || c.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidArgument(format!(
                    "grid cuts on axis {d} must be finite and strictly increasing"
                )));
            }
        }
        let mut cells = vec![Cell::whole(cuts.len())];
        for (d, c) in cuts.iter().enumerate() {
            let mut edges = vec![f64::NEG_INFINITY];
            edges.extend_from_slice(c);
            edges.push(f64::INFINITY);
            cells = cells
                .iter()
                .flat_map(|cell| edges.windows(2).map(move |w| cell.with_axis(d, w[0], w[1])))
                .collect();
        }
        Ok(Self {
            origin: Origin::Fixed,
            seed: None,
            t: None,
            r: None,
            equal_depth: false,
            cells,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("bad partition document: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serialization cannot fail")
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Number of cells `J`.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn k(&self) -> usize {
        self.cells[0].k()
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn t(&self) -> Option<usize> {
        self.t
    }

    pub fn r(&self) -> Option<usize> {
        self.r
    }

    /// Index of the cell containing `x`.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        self.cells.iter().position(|c| c.contains(x))
    }

    /// Cell index for every row of `x`.
    pub fn assign(&self, x: &Covariates) -> Result<Vec<usize>> {
        if x.k() != self.k() {
            return Err(Error::InvalidArgument(format!(
                "partition has dimension {}, covariates have {}",
                self.k(),
                x.k()
            )));
        }
        x.rows()
            .enumerate()
            .map(|(row, xi)| self.locate(xi).ok_or(Error::UncoveredPoint { row }))
            .collect()
    }

    /// Points per cell, `N_j`.
    pub fn cell_counts(&self, x: &Covariates) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.len()];
        for j in self.assign(x)? {
            counts[j] += 1;
        }
        Ok(counts)
    }
}

/// Max/min cell-count diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    pub max: usize,
    pub min: usize,
    pub spread: usize,
    pub ratio: f64,
}

impl Balance {
    pub fn of(counts: &[usize]) -> Self {
        let max = counts.iter().copied().max().unwrap_or(0);
        let min = counts.iter().copied().min().unwrap_or(0);
        Self {
            max,
            min,
            spread: max - min,
            ratio: if min == 0 { f64::INFINITY } else { max as f64 / min as f64 },
        }
    }
}

/// A value strictly inside `(a, b)`.
fn between(a: f64, b: f64) -> Result<f64> {
    let v = match (a.is_finite(), b.is_finite()) {
        (false, false) => 0.0,
        (false, true) => b - b.abs().max(1.0),
        (true, false) => a + a.abs().max(1.0),
        (true, true) => a + 0.5 * (b - a),
    };
    if a < v && v < b {
        Ok(v)
    } else {
        Err(Error::InvalidData(format!("cannot place a split threshold inside ({a}, {b}]")))
    }
}

struct Split {
    thresholds: Vec<f64>,
    groups: Vec<Vec<usize>>,
}

/// Splits `points` (rows of `x` inside `(lower, upper]` on `axis`) into `t`
/// groups of sizes `ceil(m/t)` (first `m mod t` groups) and `floor(m/t)`.
///
/// Each threshold is the coordinate of the last point of its left group, so
/// membership stays right-closed. Tied coordinates cannot be separated;
/// thresholds then move to the distinct value whose cumulative count is
/// closest to the target.
fn equal_count_split(x: &Covariates, points: &[usize], axis: usize, t: usize, lower: f64, upper: f64) -> Result<Split> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|&a, &b| x.get(a, axis).total_cmp(&x.get(b, axis)).then(a.cmp(&b)));
    let m = sorted.len();
    let (q, rem) = (m / t, m % t);

    // (distinct value, number of points <= value)
    let mut steps: Vec<(f64, usize)> = Vec::new();
    for (i, &p) in sorted.iter().enumerate() {
        let v = x.get(p, axis);
        match steps.last_mut() {
            Some(last) if last.0 == v => last.1 = i + 1,
            _ => steps.push((v, i + 1)),
        }
    }

    let mut thresholds = Vec::with_capacity(t - 1);
    let mut prev = lower;
    let mut target = 0;
    for g in 0..t - 1 {
        target += q + usize::from(g < rem);
        let best = steps
            .iter()
            .filter(|(v, _)| *v > prev && *v < upper)
            .min_by_key(|(_, c)| c.abs_diff(target));
        let thr = match best {
            Some(&(v, _)) => v,
            None => between(prev, upper)?,
        };
        thresholds.push(thr);
        prev = thr;
    }

    let mut groups = vec![Vec::new(); t];
    let mut g = 0;
    for &p in &sorted {
        let v = x.get(p, axis);
        while g < t - 1 && v > thresholds[g] {
            g += 1;
        }
        groups[g].push(p);
    }
    Ok(Split { thresholds, groups })
}

fn child_cells(cell: &Cell, axis: usize, thresholds: &[f64]) -> Vec<Cell> {
    let mut edges = Vec::with_capacity(thresholds.len() + 2);
    edges.push(cell.lower[axis]);
    edges.extend_from_slice(thresholds);
    edges.push(cell.upper[axis]);
    edges.windows(2).map(|w| cell.with_axis(axis, w[0], w[1])).collect()
}

/// Gessaman's rule: split along axis 1 into `t` equal-count slabs, each slab
/// along axis 2, and so on, giving `t^k` cells whose counts differ by at
/// most one when coordinates are distinct.
pub fn gessaman_partition(x: &Covariates, t: usize) -> Result<Partition> {
    if t < 2 {
        return Err(Error::InvalidArgument("gessaman T must be >= 2".into()));
    }
    let k = x.k();
    let required = u32::try_from(k)
        .ok()
        .and_then(|k| t.checked_pow(k))
        .ok_or_else(|| Error::InvalidArgument(format!("T^k overflows for T = {t}, k = {k}")))?;
    if x.n() < required {
        return Err(Error::InsufficientData { required, available: x.n() });
    }

    fn recurse(x: &Covariates, t: usize, cell: Cell, points: Vec<usize>, axis: usize, out: &mut Vec<Cell>) -> Result<()> {
        if axis == x.k() {
            out.push(cell);
            return Ok(());
        }
        let split = equal_count_split(x, &points, axis, t, cell.lower[axis], cell.upper[axis])?;
        for (child, group) in child_cells(&cell, axis, &split.thresholds).into_iter().zip(split.groups) {
            recurse(x, t, child, group, axis + 1, out)?;
        }
        Ok(())
    }

    let mut cells = Vec::with_capacity(required);
    recurse(x, t, Cell::whole(k), (0..x.n()).collect(), 0, &mut cells)?;
    Ok(Partition {
        origin: Origin::Gessaman,
        seed: None,
        t: Some(t),
        r: None,
        equal_depth: false,
        cells,
    })
}

/// Settings for [`rtp_partition_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtpOptions {
    #[serde(rename = "T")]
    pub t: usize,
    pub r: usize,
    pub seed: u64,
    /// Replace the `r`-per-axis multiset by one of length `(T^q - 1)/(T - 1)`
    /// (smallest such length `>= k r`), cycling through the axes, so that all
    /// terminal nodes end at the same depth.
    #[serde(default)]
    pub equal_depth: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtpSplit {
    pub axis: usize,
    pub thresholds: Vec<f64>,
    pub children: Vec<usize>,
}

/// A tree node; its creation index is its position in [`RtpTree::nodes`].
#[derive(Debug, Clone, PartialEq)]
pub struct RtpNode {
    pub cell: Cell,
    pub count: usize,
    pub depth: usize,
    pub split: Option<RtpSplit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtpTree {
    pub t: usize,
    /// Initial multiplicity of each axis in the split multiset.
    pub axis_multiplicity: Vec<usize>,
    pub nodes: Vec<RtpNode>,
}

impl RtpTree {
    pub fn terminals(&self) -> impl Iterator<Item = &RtpNode> {
        self.nodes.iter().filter(|n| n.split.is_none())
    }

    /// How many times each axis was used as a split axis.
    pub fn axis_split_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.axis_multiplicity.len()];
        for s in self.nodes.iter().filter_map(|n| n.split.as_ref()) {
            counts[s.axis] += 1;
        }
        counts
    }
}

/// Output of the random tree partition.
#[derive(Debug, Clone, PartialEq)]
pub struct RtpPartition {
    pub partition: Partition,
    pub tree: RtpTree,
}

/// Number of terminal cells the RTP produces.
pub fn rtp_cell_count(k: usize, opts: &RtpOptions) -> usize {
    1 + axis_multiset(k, opts).iter().sum::<usize>() * (opts.t - 1)
}

fn axis_multiset(k: usize, opts: &RtpOptions) -> Vec<usize> {
    if !opts.equal_depth {
        return vec![opts.r; k];
    }
    let splits = k * opts.r;
    let mut len = 1;
    while len < splits {
        len = len * opts.t + 1;
    }
    (0..k).map(|d| len / k + usize::from(d < len % k)).collect()
}

/// Random tree partition with the `r`-per-axis multiset.
pub fn rtp_partition(x: &Covariates, t: usize, r: usize, seed: u64) -> Result<RtpPartition> {
    rtp_partition_with(x, &RtpOptions { t, r, seed, equal_depth: false })
}

/// Random tree partition.
///
/// Starting from the root cell `R^k`, each round draws an axis uniformly from
/// the remaining multiset (so weighted by multiplicity), splits the current
/// cell into `T` equal-count children perpendicular to that axis, removes
/// one instance of the axis, and moves to the terminal node holding the
/// most points (lowest creation index on ties). The result has
/// `1 + (multiset size)(T - 1)` cells and is a pure function of `(x, opts)`.
pub fn rtp_partition_with(x: &Covariates, opts: &RtpOptions) -> Result<RtpPartition> {
    if opts.t < 2 {
        return Err(Error::InvalidArgument("RTP T must be >= 2".into()));
    }
    if opts.r < 1 {
        return Err(Error::InvalidArgument("RTP r must be >= 1".into()));
    }
    let k = x.k();
    let multiplicity = axis_multiset(k, opts);
    let mut left: usize = multiplicity.iter().sum();
    let required = 1 + left * (opts.t - 1);
    if x.n() < required {
        return Err(Error::InsufficientData { required, available: x.n() });
    }

    let mut rng = rng::substream(opts.seed, 0);
    let mut remaining = multiplicity.clone();
    let mut nodes = vec![RtpNode {
        cell: Cell::whole(k),
        count: x.n(),
        depth: 0,
        split: None,
    }];
    let mut members: Vec<Vec<usize>> = vec![(0..x.n()).collect()];
    let mut current = 0;

    loop {
        let mut draw = rng.random_range(0..left);
        let axis = remaining
            .iter()
            .position(|&c| {
                if draw < c {
                    true
                } else {
                    draw -= c;
                    false
                }
            })
            .expect("draw is below the multiset size");

        let points = std::mem::take(&mut members[current]);
        let cell = nodes[current].cell.clone();
        let split = equal_count_split(x, &points, axis, opts.t, cell.lower[axis], cell.upper[axis])?;
        let depth = nodes[current].depth + 1;
        let first_child = nodes.len();
        for (child, group) in child_cells(&cell, axis, &split.thresholds).into_iter().zip(split.groups) {
            nodes.push(RtpNode {
                cell: child,
                count: group.len(),
                depth,
                split: None,
            });
            members.push(group);
        }
        nodes[current].split = Some(RtpSplit {
            axis,
            thresholds: split.thresholds,
            children: (first_child..nodes.len()).collect(),
        });

        remaining[axis] -= 1;
        left -= 1;
        if left == 0 {
            break;
        }
        current = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.split.is_none())
            .fold(None::<(usize, usize)>, |best, (i, n)| match best {
                Some((_, c)) if c >= n.count => best,
                _ => Some((i, n.count)),
            })
            .map(|(i, _)| i)
            .expect("a tree always has a terminal node");
    }

    let tree = RtpTree {
        t: opts.t,
        axis_multiplicity: multiplicity,
        nodes,
    };
    let partition = Partition {
        origin: Origin::Rtp,
        seed: Some(opts.seed),
        t: Some(opts.t),
        r: Some(opts.r),
        equal_depth: opts.equal_depth,
        cells: tree.terminals().map(|n| n.cell.clone()).collect(),
    };
    Ok(RtpPartition { partition, tree })
}

/// Serde adapter writing infinite bounds as the strings `"-inf"` / `"inf"`.
mod bounds {
    use serde::de::Error as _;
    use serde::ser::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Bound {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let reprs = v
            .iter()
            .map(|&b| {
                if b == f64::INFINITY {
                    Ok(Bound::Text("inf".into()))
                } else if b == f64::NEG_INFINITY {
                    Ok(Bound::Text("-inf".into()))
                } else if b.is_nan() {
                    Err(S::Error::custom("NaN cell bound"))
                } else {
                    Ok(Bound::Num(b))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        reprs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Bound>::deserialize(d)?
            .into_iter()
            .map(|b| match b {
                Bound::Num(v) => Ok(v),
                Bound::Text(s) if s == "inf" => Ok(f64::INFINITY),
                Bound::Text(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
                Bound::Text(s) => Err(D::Error::custom(format!("unknown bound {s:?}"))),
            })
            .collect()
    }
}
