//! Discrete measurement operators: ray-traced CT projectors, Gaussian maps,
//! angle-subset partitioning, filtered backprojection and operator norms.
//!
//! Operators are assembled once into explicit sparse matrices so that the
//! adjoint is the exact transpose of the stored matrix. Weights are stored in
//! single precision; all dot products accumulate in double precision.

mod fbp;
mod projector;

pub use fbp::{fbp, FbpFilter, FbpPlan};
pub use projector::assemble_projector;

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Beam geometry of the scanner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryMode {
    Parallel,
    Fan,
}

/// Discretized scan geometry on a square pixel grid.
///
/// Angles are `k * angle_range / n_angles` for `k = 0..n_angles`, i.e.
/// strictly increasing and equally spaced, excluding the endpoint.
/// `source_distance` is measured in image widths and only used in fan mode.
/// `detector_spacing` is in pixel units at the isocenter (fan rays are traced
/// through a virtual detector line through the origin).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    pub mode: GeometryMode,
    pub image_size: usize,
    pub n_angles: usize,
    pub n_rays: usize,
    pub angle_range: f64,
    #[serde(default = "default_source_distance")]
    pub source_distance: f64,
    #[serde(default = "default_detector_spacing")]
    pub detector_spacing: f64,
}

fn default_source_distance() -> f64 {
    2.0
}

fn default_detector_spacing() -> f64 {
    1.0
}

impl ScanGeometry {
    /// Parallel-beam geometry over `[0, pi)` with unit detector spacing.
    pub fn parallel(image_size: usize, n_angles: usize, n_rays: usize) -> Self {
        Self {
            mode: GeometryMode::Parallel,
            image_size,
            n_angles,
            n_rays,
            angle_range: std::f64::consts::PI,
            source_distance: default_source_distance(),
            detector_spacing: default_detector_spacing(),
        }
    }

    /// Fan-beam geometry over `[0, 2*pi)` with unit detector spacing.
    pub fn fan(image_size: usize, n_angles: usize, n_rays: usize, source_distance: f64) -> Self {
        Self {
            mode: GeometryMode::Fan,
            image_size,
            n_angles,
            n_rays,
            angle_range: 2.0 * std::f64::consts::PI,
            source_distance,
            detector_spacing: default_detector_spacing(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Geometry("image_size must be >= 1".into()));
        }
        if self.n_angles == 0 || self.n_rays == 0 {
            return Err(Error::Geometry("n_angles and n_rays must be >= 1".into()));
        }
        if !(self.angle_range > 0.0) || !self.angle_range.is_finite() {
            return Err(Error::Geometry("angle_range must be positive".into()));
        }
        if !(self.detector_spacing > 0.0) {
            return Err(Error::Geometry("detector_spacing must be positive".into()));
        }
        if self.mode == GeometryMode::Fan && self.source_distance <= 0.5 * 2f64.sqrt() {
            return Err(Error::Geometry("source inside field of view".into()));
        }
        Ok(())
    }

    /// Projection angles in radians.
    pub fn angles(&self) -> Vec<f64> {
        (0..self.n_angles)
            .map(|k| k as f64 * self.angle_range / self.n_angles as f64)
            .collect()
    }

    pub fn n_measurements(&self) -> usize {
        self.n_angles * self.n_rays
    }

    pub fn n_pixels(&self) -> usize {
        self.image_size * self.image_size
    }
}

/// Row layout metadata for operators whose rows are grouped by angle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AngleBlocks {
    pub n_angles: usize,
    pub n_rays: usize,
}

/// Sparse linear operator in CSR form with an exact transpose adjoint.
#[derive(Clone, Debug)]
pub struct LinearOperator {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    weights: Vec<f32>,
    angle_blocks: Option<AngleBlocks>,
}

impl LinearOperator {
    /// Builds an operator from per-row triplet lists. Rows must be supplied in
    /// order; entries inside a row keep their given order.
    pub fn from_rows(
        rows: usize,
        cols: usize,
        row_entries: Vec<Vec<(u32, f32)>>,
        angle_blocks: Option<AngleBlocks>,
    ) -> Result<Self> {
        if row_entries.len() != rows {
            return Err(Error::DimMismatch {
                expected: rows,
                got: row_entries.len(),
                context: "operator row count",
            });
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for entries in &row_entries {
            for &(c, w) in entries {
                if c as usize >= cols {
                    return Err(Error::DimMismatch {
                        expected: cols,
                        got: c as usize,
                        context: "operator column index",
                    });
                }
                if !w.is_finite() {
                    return Err(Error::Geometry("non-finite operator weight".into()));
                }
                col_idx.push(c);
                weights.push(w);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            weights,
            angle_blocks,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    pub fn angle_blocks(&self) -> Option<AngleBlocks> {
        self.angle_blocks
    }

    /// Column indices and weights of one row.
    pub fn row(&self, i: usize) -> (&[u32], &[f32]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col_idx[lo..hi], &self.weights[lo..hi])
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut dense = vec![0.0f32; self.rows * self.cols];
        for r in 0..self.rows {
            let (cols, ws) = self.row(r);
            for (&c, &w) in cols.iter().zip(ws) {
                dense[r * self.cols + c as usize] += w;
            }
        }
        dense
    }

    fn check_cols(&self, len: usize) -> Result<()> {
        if len != self.cols {
            return Err(Error::DimMismatch {
                expected: self.cols,
                got: len,
                context: "apply input length",
            });
        }
        Ok(())
    }

    fn dot_row_f32(&self, r: usize, x: &[f32]) -> f64 {
        let (cols, ws) = self.row(r);
        let mut acc = 0.0f64;
        for (&c, &w) in cols.iter().zip(ws) {
            acc += w as f64 * x[c as usize] as f64;
        }
        acc
    }

    fn dot_row_f64(&self, r: usize, x: &[f64]) -> f64 {
        let (cols, ws) = self.row(r);
        let mut acc = 0.0f64;
        for (&c, &w) in cols.iter().zip(ws) {
            acc += w as f64 * x[c as usize];
        }
        acc
    }

    /// `A x`.
    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_cols(x.len())?;
        Ok((0..self.rows).map(|r| self.dot_row_f32(r, x) as f32).collect())
    }

    /// `S_i A x` over the rows of subset `i`, in partition row order.
    pub fn apply_subset(
        &self,
        x: &[f32],
        part: &SubsetPartition,
        subset: usize,
    ) -> Result<Vec<f32>> {
        self.check_cols(x.len())?;
        let rows = part.rows_of(subset)?;
        Ok(rows.iter().map(|&r| self.dot_row_f32(r, x) as f32).collect())
    }

    /// `A^T y`.
    pub fn adjoint(&self, y: &[f32]) -> Result<Vec<f32>> {
        if y.len() != self.rows {
            return Err(Error::DimMismatch {
                expected: self.rows,
                got: y.len(),
                context: "adjoint input length",
            });
        }
        let mut acc = vec![0.0f64; self.cols];
        for r in 0..self.rows {
            let yr = y[r] as f64;
            if yr == 0.0 {
                continue;
            }
            let (cols, ws) = self.row(r);
            for (&c, &w) in cols.iter().zip(ws) {
                acc[c as usize] += w as f64 * yr;
            }
        }
        Ok(acc.into_iter().map(|v| v as f32).collect())
    }

    /// `(S_i A)^T y` for a subset-shaped `y`, scattered into image space.
    pub fn adjoint_subset(
        &self,
        y: &[f32],
        part: &SubsetPartition,
        subset: usize,
    ) -> Result<Vec<f32>> {
        let rows = part.rows_of(subset)?;
        if y.len() != rows.len() {
            return Err(Error::DimMismatch {
                expected: rows.len(),
                got: y.len(),
                context: "subset adjoint input length",
            });
        }
        let mut acc = vec![0.0f64; self.cols];
        for (&r, &yv) in rows.iter().zip(y) {
            let yr = yv as f64;
            if yr == 0.0 {
                continue;
            }
            let (cols, ws) = self.row(r);
            for (&c, &w) in cols.iter().zip(ws) {
                acc[c as usize] += w as f64 * yr;
            }
        }
        Ok(acc.into_iter().map(|v| v as f32).collect())
    }

    /// Double-precision `A x`; the stored single-precision weights are exact
    /// operands, so this path supports the theory harness's f64 iterations.
    pub fn apply_f64(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_cols(x.len())?;
        Ok((0..self.rows).map(|r| self.dot_row_f64(r, x)).collect())
    }

    pub fn apply_subset_f64(
        &self,
        x: &[f64],
        part: &SubsetPartition,
        subset: usize,
    ) -> Result<Vec<f64>> {
        self.check_cols(x.len())?;
        let rows = part.rows_of(subset)?;
        Ok(rows.iter().map(|&r| self.dot_row_f64(r, x)).collect())
    }

    pub fn adjoint_f64(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::DimMismatch {
                expected: self.rows,
                got: y.len(),
                context: "adjoint input length",
            });
        }
        let mut acc = vec![0.0f64; self.cols];
        for r in 0..self.rows {
            let yr = y[r];
            if yr == 0.0 {
                continue;
            }
            let (cols, ws) = self.row(r);
            for (&c, &w) in cols.iter().zip(ws) {
                acc[c as usize] += w as f64 * yr;
            }
        }
        Ok(acc)
    }

    pub fn adjoint_subset_f64(
        &self,
        y: &[f64],
        part: &SubsetPartition,
        subset: usize,
    ) -> Result<Vec<f64>> {
        let rows = part.rows_of(subset)?;
        if y.len() != rows.len() {
            return Err(Error::DimMismatch {
                expected: rows.len(),
                got: y.len(),
                context: "subset adjoint input length",
            });
        }
        let mut acc = vec![0.0f64; self.cols];
        for (&r, &yv) in rows.iter().zip(y) {
            if yv == 0.0 {
                continue;
            }
            let (cols, ws) = self.row(r);
            for (&c, &w) in cols.iter().zip(ws) {
                acc[c as usize] += w as f64 * yv;
            }
        }
        Ok(acc)
    }

    /// Power-method estimate of the largest singular value. The estimate is a
    /// Rayleigh quotient of `A^T A` and is nondecreasing in `iters`.
    pub fn operator_norm(&self, iters: usize) -> f64 {
        assert!(iters >= 1, "operator_norm requires iters >= 1");
        let d = self.cols;
        let mut v = vec![1.0f64 / (d as f64).sqrt(); d];
        let mut sigma = 0.0f64;
        for _ in 0..iters {
            let u = self.apply_f64(&v).expect("dims fixed");
            let norm_u = l2_norm(&u);
            if norm_u == 0.0 {
                return 0.0;
            }
            sigma = norm_u;
            let w = self.adjoint_f64(&u).expect("dims fixed");
            let norm_w = l2_norm(&w);
            if norm_w == 0.0 {
                return 0.0;
            }
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / norm_w;
            }
        }
        sigma
    }

    /// Largest singular value of the subset view `S_i A`.
    pub fn subset_operator_norm(&self, part: &SubsetPartition, subset: usize, iters: usize) -> f64 {
        let rows = part.rows_of(subset).expect("valid subset");
        let d = self.cols;
        let mut v = vec![1.0f64 / (d as f64).sqrt(); d];
        let mut sigma = 0.0f64;
        for _ in 0..iters {
            let u: Vec<f64> = rows.iter().map(|&r| self.dot_row_f64(r, &v)).collect();
            let norm_u = l2_norm(&u);
            if norm_u == 0.0 {
                return 0.0;
            }
            sigma = norm_u;
            let mut w = vec![0.0f64; d];
            for (&r, &uv) in rows.iter().zip(&u) {
                let (cols, ws) = self.row(r);
                for (&c, &wt) in cols.iter().zip(ws) {
                    w[c as usize] += wt as f64 * uv;
                }
            }
            let norm_w = l2_norm(&w);
            if norm_w == 0.0 {
                return 0.0;
            }
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / norm_w;
            }
        }
        sigma
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dense Gaussian map `G B` with `G_ij ~ N(0, 1/n)`; with `B = None` this is
/// a plain Gaussian map. Stored like any other operator (dense rows), so all
/// subset and adjoint machinery applies. Rows are treated as single-ray
/// angles for partitioning purposes.
pub fn gaussian_operator(
    n: usize,
    d: usize,
    b: Option<&LinearOperator>,
    seed: u64,
) -> Result<LinearOperator> {
    assert!(n >= 1 && d >= 1);
    if let Some(bm) = b {
        if bm.rows() != d || bm.cols() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: bm.rows(),
                context: "gaussian map B must be d x d",
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, (1.0 / n as f64).sqrt()).expect("valid std");
    let b_dense = b.map(|bm| bm.to_dense());
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let g_row: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let entries: Vec<(u32, f32)> = match &b_dense {
            None => g_row
                .iter()
                .enumerate()
                .map(|(j, &v)| (j as u32, v as f32))
                .collect(),
            Some(bd) => (0..d)
                .map(|j| {
                    let mut acc = 0.0f64;
                    for (k, &g) in g_row.iter().enumerate() {
                        acc += g * bd[k * d + j] as f64;
                    }
                    (j as u32, acc as f32)
                })
                .collect(),
        };
        rows.push(entries);
    }
    LinearOperator::from_rows(
        n,
        d,
        rows,
        Some(AngleBlocks {
            n_angles: n,
            n_rays: 1,
        }),
    )
}

/// How angles are grouped into subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Contiguous,
    Interleaved,
}

/// Disjoint angle-block partition of an operator's rows into `m` subsets of
/// equal size `q`.
#[derive(Clone, Debug)]
pub struct SubsetPartition {
    m: usize,
    assignment: Vec<usize>,
    rows: Vec<Vec<usize>>,
    angles: Vec<Vec<usize>>,
    q: usize,
    n_rows: usize,
}

impl SubsetPartition {
    pub fn m(&self) -> usize {
        self.m
    }

    /// Rows per subset.
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Subset id of each angle.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Row indices owned by a subset, ascending.
    pub fn rows_of(&self, subset: usize) -> Result<&[usize]> {
        self.rows
            .get(subset)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Partition(format!("subset {subset} out of range")))
    }

    /// Angle indices owned by a subset, ascending.
    pub fn angles_of(&self, subset: usize) -> &[usize] {
        &self.angles[subset]
    }
}

/// Partitions the operator's angle blocks into `m` subsets.
pub fn partition(
    op: &LinearOperator,
    m: usize,
    scheme: PartitionScheme,
) -> Result<SubsetPartition> {
    let blocks = op.angle_blocks().ok_or_else(|| {
        Error::Partition("operator carries no angle layout; cannot partition".into())
    })?;
    if m == 0 {
        return Err(Error::Partition("subset count must be >= 1".into()));
    }
    if blocks.n_angles % m != 0 {
        return Err(Error::Partition(format!(
            "m = {m} does not divide n_angles = {}",
            blocks.n_angles
        )));
    }
    let per = blocks.n_angles / m;
    let mut assignment = vec![0usize; blocks.n_angles];
    for a in 0..blocks.n_angles {
        assignment[a] = match scheme {
            PartitionScheme::Contiguous => a / per,
            PartitionScheme::Interleaved => a % m,
        };
    }
    let mut angles = vec![Vec::with_capacity(per); m];
    for (a, &s) in assignment.iter().enumerate() {
        angles[s].push(a);
    }
    let rows: Vec<Vec<usize>> = angles
        .iter()
        .map(|subset_angles| {
            subset_angles
                .iter()
                .flat_map(|&a| (a * blocks.n_rays)..((a + 1) * blocks.n_rays))
                .collect()
        })
        .collect();
    Ok(SubsetPartition {
        m,
        assignment,
        rows,
        angles,
        q: per * blocks.n_rays,
        n_rows: op.rows(),
    })
}

/// Counts rows touched by forward and adjoint applications, in units
/// convertible to full-operator equivalents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounter {
    pub forward_rows: u64,
    pub adjoint_rows: u64,
}

impl CallCounter {
    pub fn count_forward(&mut self, rows: usize) {
        self.forward_rows += rows as u64;
    }

    pub fn count_adjoint(&mut self, rows: usize) {
        self.adjoint_rows += rows as u64;
    }

    /// Combined forward+adjoint work in full-operator equivalents, i.e. the
    /// "# calls on A and A^T" accounting.
    pub fn full_equivalents(&self, n_rows: usize) -> f64 {
        (self.forward_rows + self.adjoint_rows) as f64 / n_rows as f64
    }
}
