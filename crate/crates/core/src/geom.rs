//! Ball tree ordering of point clouds.
//!
//! The tree is built by recursive median bisection along the axis of largest
//! spread. Only the leaf level is kept: a permutation that lays every leaf
//! ("ball") out as a contiguous range of exactly `ball_size` slots. When the
//! point count is not a multiple of the ball size, the tree is built over a
//! virtual capacity of `ceil(N / m) * m` slots and the missing slots become
//! padding at the end of the final ball.

use std::io::BufRead;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{shape_err, BsaError, Result};
use crate::real::Real;

/// Sentinel stored in [`BallTree::permutation`] for padded slots.
pub const PAD: usize = usize::MAX;

/// `N` points in `R^D`, row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Array2<f64>,
}

impl PointCloud {
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        if coords.nrows() == 0 {
            return Err(BsaError::InvalidInput("point cloud is empty".into()));
        }
        if coords.ncols() == 0 {
            return Err(BsaError::InvalidInput("point dimension is zero".into()));
        }
        if let Some(((i, j), v)) = coords.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(BsaError::InvalidInput(format!(
                "non-finite coordinate {v} at point {i}, axis {j}"
            )));
        }
        Ok(Self { coords })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(shape_err("ragged point rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let coords = Array2::from_shape_vec((rows.len(), dim), flat).map_err(|e| shape_err(e.to_string()))?;
        Self::new(coords)
    }

    pub fn coords(&self) -> ArrayView2<'_, f64> {
        self.coords.view()
    }

    pub fn n_points(&self) -> usize {
        self.coords.nrows()
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }
}

/// Leaf partition of a ball tree plus the padding bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BallTree {
    permutation: Vec<usize>,
    inverse: Vec<usize>,
    ball_size: usize,
    n_valid: usize,
    valid_mask: Vec<bool>,
}

impl BallTree {
    /// Position `j` in tree order holds original point `permutation()[j]`,
    /// or [`PAD`] for a padded slot.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Original index `i < N` sits at tree position `inverse_permutation()[i]`.
    /// Entries at `i >= N` are [`PAD`].
    pub fn inverse_permutation(&self) -> &[usize] {
        &self.inverse
    }

    pub fn ball_size(&self) -> usize {
        self.ball_size
    }

    pub fn n_valid(&self) -> usize {
        self.n_valid
    }

    pub fn n_padded(&self) -> usize {
        self.permutation.len()
    }

    pub fn n_balls(&self) -> usize {
        self.n_padded() / self.ball_size
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid_mask
    }

    pub fn ball_range(&self, ball: usize) -> Range<usize> {
        ball * self.ball_size..(ball + 1) * self.ball_size
    }

    pub fn ball_ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.n_balls()).map(move |b| self.ball_range(b))
    }

    /// Ball containing tree position `pos`.
    pub fn ball_of(&self, pos: usize) -> usize {
        pos / self.ball_size
    }

    /// A tree over `n` points kept in their given order.
    pub fn sequential(n: usize, ball_size: usize) -> Result<Self> {
        if n == 0 {
            return Err(BsaError::InvalidInput("point cloud is empty".into()));
        }
        Self::from_order((0..n).collect(), ball_size)
    }

    fn from_order(order: Vec<usize>, ball_size: usize) -> Result<Self> {
        if ball_size == 0 {
            return Err(BsaError::InvalidArgument("ball_size must be >= 1".into()));
        }
        let n = order.len();
        let n_pad = n.div_ceil(ball_size) * ball_size;
        let mut permutation = order;
        permutation.resize(n_pad, PAD);
        let mut inverse = vec![PAD; n_pad];
        for (pos, &orig) in permutation.iter().enumerate() {
            if orig != PAD {
                inverse[orig] = pos;
            }
        }
        let valid_mask = permutation.iter().map(|&p| p != PAD).collect();
        Ok(Self {
            permutation,
            inverse,
            ball_size,
            n_valid: n,
            valid_mask,
        })
    }
}

/// Builds the leaf partition of a median-split ball tree.
///
/// Each node covers a whole number of balls. A node with `b > 1` balls sends
/// the `ceil(b / 2) * m` points with the smallest coordinate along its widest
/// axis to the left child (ties by original index) and the rest to the right.
pub fn build_ball_tree(points: &PointCloud, ball_size: usize) -> Result<BallTree> {
    if ball_size == 0 {
        return Err(BsaError::InvalidArgument("ball_size must be >= 1".into()));
    }
    let n = points.n_points();
    let n_balls = n.div_ceil(ball_size);
    let mut order: Vec<usize> = (0..n).collect();
    split_node(points.coords(), &mut order, n_balls, ball_size);
    BallTree::from_order(order, ball_size)
}

fn split_node(coords: ArrayView2<'_, f64>, idx: &mut [usize], n_balls: usize, m: usize) {
    if n_balls <= 1 || idx.len() <= m {
        return;
    }
    let axis = widest_axis(coords, idx);
    idx.sort_by(|&a, &b| coords[[a, axis]].total_cmp(&coords[[b, axis]]).then(a.cmp(&b)));
    let left_balls = n_balls.div_ceil(2);
    let left_len = (left_balls * m).min(idx.len());
    let (left, right) = idx.split_at_mut(left_len);
    split_node(coords, left, left_balls, m);
    split_node(coords, right, n_balls - left_balls, m);
}

fn widest_axis(coords: ArrayView2<'_, f64>, idx: &[usize]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for axis in 0..coords.ncols() {
        let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = coords[[i, axis]];
            (lo.min(v), hi.max(v))
        });
        if hi - lo > best.1 {
            best = (axis, hi - lo);
        }
    }
    best.0
}

/// Reorders rows into tree order; padded rows are filled with `fill`.
pub fn permute_features<T: Real>(tree: &BallTree, features: ArrayView2<'_, T>, fill: T) -> Result<Array2<T>> {
    if features.nrows() != tree.n_valid() {
        return Err(shape_err(format!(
            "features have {} rows, tree has {} points",
            features.nrows(),
            tree.n_valid()
        )));
    }
    let mut out = Array2::from_elem((tree.n_padded(), features.ncols()), fill);
    for (pos, &orig) in tree.permutation().iter().enumerate() {
        if orig != PAD {
            out.row_mut(pos).assign(&features.row(orig));
        }
    }
    Ok(out)
}

/// Inverse of [`permute_features`]: restores the original row order and
/// drops padded rows.
pub fn unpermute_features<T: Real>(tree: &BallTree, features: ArrayView2<'_, T>) -> Result<Array2<T>> {
    if features.nrows() != tree.n_padded() {
        return Err(shape_err(format!(
            "features have {} rows, tree has {} slots",
            features.nrows(),
            tree.n_padded()
        )));
    }
    let mut out = Array2::zeros((tree.n_valid(), features.ncols()));
    for (orig, &pos) in tree.inverse_permutation()[..tree.n_valid()].iter().enumerate() {
        out.row_mut(orig).assign(&features.row(pos));
    }
    Ok(out)
}

/// Parses whitespace separated point rows. The first `dim` columns are
/// coordinates; any further columns are returned as extras (rows without
/// extras yield an empty extras matrix). Blank lines and `#` comments are
/// skipped.
pub fn read_points<R: BufRead>(reader: R, dim: usize) -> Result<(PointCloud, Array2<f64>)> {
    if dim == 0 {
        return Err(BsaError::InvalidArgument("dim must be >= 1".into()));
    }
    let mut coords = Vec::new();
    let mut extras = Vec::new();
    let mut n_extra = None;
    let mut rows = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| BsaError::InvalidInput(format!("line {}: {e}", lineno + 1)))?;
        if vals.len() < dim {
            return Err(BsaError::InvalidInput(format!(
                "line {}: expected at least {dim} columns, found {}",
                lineno + 1,
                vals.len()
            )));
        }
        let extra = vals.len() - dim;
        match n_extra {
            None => n_extra = Some(extra),
            Some(e) if e != extra => {
                return Err(BsaError::InvalidInput(format!(
                    "line {}: {} columns, earlier rows had {}",
                    lineno + 1,
                    vals.len(),
                    dim + e
                )))
            }
            _ => {}
        }
        coords.extend_from_slice(&vals[..dim]);
        extras.extend_from_slice(&vals[dim..]);
        rows += 1;
    }
    let n_extra = n_extra.unwrap_or(0);
    let coords = Array2::from_shape_vec((rows, dim), coords).map_err(|e| shape_err(e.to_string()))?;
    let extras = Array2::from_shape_vec((rows, n_extra), extras).map_err(|e| shape_err(e.to_string()))?;
    Ok((PointCloud::new(coords)?, extras))
}

pub fn read_points_file(path: &Path, dim: usize) -> Result<(PointCloud, Array2<f64>)> {
    let file = std::fs::File::open(path)?;
    read_points(std::io::BufReader::new(file), dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cloud_1d(xs: &[f64]) -> PointCloud {
        PointCloud::from_rows(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn two_clusters_on_a_line() {
        let tree = build_ball_tree(&cloud_1d(&[0.0, 10.0, 1.0, 11.0]), 2).unwrap();
        assert_eq!(tree.permutation(), &[0, 2, 1, 3]);
        assert_eq!(tree.inverse_permutation(), &[0, 2, 1, 3]);
        assert_eq!(tree.n_balls(), 2);
    }

    #[test]
    fn sorted_points_keep_order() {
        let tree = build_ball_tree(&cloud_1d(&[0.0, 1.0, 2.0, 3.0]), 2).unwrap();
        assert_eq!(tree.permutation(), &[0, 1, 2, 3]);
    }

    #[test]
    fn single_ball_keeps_every_point() {
        let tree = build_ball_tree(&cloud_1d(&[5.0, -1.0, 3.0]), 3).unwrap();
        assert_eq!(tree.n_balls(), 1);
        let mut p = tree.permutation().to_vec();
        p.sort();
        assert_eq!(p, vec![0, 1, 2]);
    }

    #[test]
    fn single_point_is_padded_to_a_ball() {
        let tree = build_ball_tree(&cloud_1d(&[1.0]), 4).unwrap();
        assert_eq!(tree.n_padded(), 4);
        assert_eq!(tree.permutation(), &[0, PAD, PAD, PAD]);
        assert_eq!(tree.valid_mask(), &[true, false, false, false]);
    }

    #[test]
    fn padding_lands_in_the_last_ball() {
        let xs: Vec<f64> = (0..13).map(|i| ((i * 7) % 13) as f64).collect();
        let tree = build_ball_tree(&cloud_1d(&xs), 4).unwrap();
        assert_eq!(tree.n_padded(), 16);
        assert!(tree.valid_mask()[..13].iter().all(|&v| v));
        assert!(tree.valid_mask()[13..].iter().all(|&v| !v));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            build_ball_tree(&cloud_1d(&[0.0, 1.0]), 0),
            Err(BsaError::InvalidArgument(_))
        ));
        assert!(matches!(
            PointCloud::new(array![[0.0], [f64::NAN]]),
            Err(BsaError::InvalidInput(_))
        ));
        assert!(matches!(
            PointCloud::new(array![[0.0, f64::INFINITY]]),
            Err(BsaError::InvalidInput(_))
        ));
    }

    #[test]
    fn permute_pads_with_fill() {
        let tree = build_ball_tree(&cloud_1d(&[0.0, 1.0, 2.0]), 2).unwrap();
        let x = array![[1.0f64, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let p = permute_features(&tree, x.view(), 0.0).unwrap();
        assert_eq!(p, array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [0.0, 0.0]]);
        assert_eq!(unpermute_features(&tree, p.view()).unwrap(), x);
    }

    #[test]
    fn permute_follows_tree_order() {
        let tree = build_ball_tree(&cloud_1d(&[0.0, 10.0, 1.0, 11.0]), 2).unwrap();
        let x = array![[0.0f64], [1.0], [2.0], [3.0]];
        let p = permute_features(&tree, x.view(), -1.0).unwrap();
        assert_eq!(p, array![[0.0], [2.0], [1.0], [3.0]]);
        assert_eq!(unpermute_features(&tree, p.view()).unwrap(), x);
    }

    #[test]
    fn permute_checks_rows() {
        let tree = build_ball_tree(&cloud_1d(&[0.0, 1.0, 2.0]), 2).unwrap();
        let x = Array2::<f64>::zeros((4, 1));
        assert!(matches!(
            permute_features(&tree, x.view(), 0.0),
            Err(BsaError::Shape(_))
        ));
        let y = Array2::<f64>::zeros((3, 1));
        assert!(matches!(unpermute_features(&tree, y.view()), Err(BsaError::Shape(_))));
    }

    #[test]
    fn parses_points_with_extras() {
        let text = "# x y z p\n0 0 0 1.5\n1 2 3 -2\n\n";
        let (cloud, extra) = read_points(text.as_bytes(), 3).unwrap();
        assert_eq!(cloud.n_points(), 2);
        assert_eq!(extra, array![[1.5], [-2.0]]);
        assert!(read_points("1 2\n".as_bytes(), 3).is_err());
        assert!(read_points("1 2 x\n".as_bytes(), 3).is_err());
    }
}
