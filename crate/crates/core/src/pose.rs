//! Gram-matrix lifting of planar point sets, fixed-length constraints on the lifted outputs and
//! coordinate recovery by spectral factorization plus anchor alignment.

use nalgebra::{DMatrix, DVector};

use crate::constraint::ConstraintSpec;
use crate::data::TaskedData;
use crate::error::{Error, Result};
use crate::linalg::sorted_eigen;

/// Number of points in the lifted pose (three corners plus the anchor).
pub const N_POINTS: usize = 4;
/// Length of the upper-triangular Gram vector.
pub const GRAM_LEN: usize = 10;
/// Spectral rank kept for planar data.
pub const PLANAR_RANK: usize = 2;

/// Fraction of the trace the kept eigenvalues must carry before a warning is raised.
const SPECTRAL_MASS_WARN: f64 = 0.9;

/// Known point appended to every pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorPoint {
    pub position: [f64; 2],
}

impl Default for AnchorPoint {
    fn default() -> Self {
        AnchorPoint { position: [4.0, 4.0] }
    }
}

impl AnchorPoint {
    pub fn norm_sq(&self) -> f64 {
        self.position[0].powi(2) + self.position[1].powi(2)
    }
}

/// `(row, col)` of each Gram-vector entry: `[Q11,Q12,Q13,Q14,Q22,Q23,Q24,Q33,Q34,Q44]`.
pub fn gram_index() -> [(usize, usize); GRAM_LEN] {
    let mut out = [(0, 0); GRAM_LEN];
    let mut k = 0;
    for i in 0..N_POINTS {
        for j in i..N_POINTS {
            out[k] = (i, j);
            k += 1;
        }
    }
    out
}

pub fn gram_names() -> Vec<String> {
    gram_index().iter().map(|(i, j)| format!("Q{}{}", i + 1, j + 1)).collect()
}

/// Upper triangle of `ZᵀZ` for a 2×4 coordinate matrix whose last column is the anchor.
pub fn lift_to_gram(z: &DMatrix<f64>) -> Result<DVector<f64>> {
    if z.shape() != (2, N_POINTS) {
        return Err(Error::input(format!("expected a 2x{N_POINTS} coordinate matrix, got {}x{}", z.nrows(), z.ncols())));
    }
    let q = z.transpose() * z;
    Ok(DVector::from_iterator(GRAM_LEN, gram_index().iter().map(|&(i, j)| q[(i, j)])))
}

/// Symmetric 4×4 matrix from a Gram vector.
pub fn gram_matrix(q: &DVector<f64>) -> Result<DMatrix<f64>> {
    if q.len() != GRAM_LEN {
        return Err(Error::input(format!("Gram vector must have {GRAM_LEN} entries")));
    }
    let mut m = DMatrix::zeros(N_POINTS, N_POINTS);
    for (k, &(i, j)) in gram_index().iter().enumerate() {
        m[(i, j)] = q[k];
        m[(j, i)] = q[k];
    }
    Ok(m)
}

/// Constant constraint `F q = [L12², L13², L23², |anchor|²]` on the Gram vector.
pub fn triangle_constraints(lengths: [f64; 3], anchor: &AnchorPoint) -> Result<ConstraintSpec> {
    if lengths.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::input("edge lengths must be positive"));
    }
    let pos = |i: usize, j: usize| gram_index().iter().position(|&p| p == (i.min(j), i.max(j))).expect("valid index");
    let mut f = DMatrix::zeros(4, GRAM_LEN);
    for (row, &(l, m)) in [(0, 1), (0, 2), (1, 2)].iter().enumerate() {
        f[(row, pos(l, l))] = 1.0;
        f[(row, pos(l, m))] = -2.0;
        f[(row, pos(m, m))] = 1.0;
    }
    f[(3, pos(3, 3))] = 1.0;
    let s = DVector::from_vec(vec![lengths[0].powi(2), lengths[1].powi(2), lengths[2].powi(2), anchor.norm_sq()]);
    ConstraintSpec::constant(f, s)
}

/// Lifts 6-task corner data `[z1x, z1y, z2x, z2y, z3x, z3y]` to 10-task Gram data.
pub fn lift_dataset(data: &TaskedData, anchor: &AnchorPoint) -> Result<TaskedData> {
    if data.n_tasks() != 6 {
        return Err(Error::input("Gram lifting expects six coordinate tasks"));
    }
    let n = data.n_points();
    let mut values = DMatrix::zeros(n, GRAM_LEN);
    let mut observed = DMatrix::from_element(n, GRAM_LEN, false);
    for i in 0..n {
        let z = corners_with_anchor(&data.values.row(i).iter().copied().collect::<Vec<_>>(), anchor);
        let q = lift_to_gram(&z)?;
        let obs = |c: usize| c == 3 || (data.observed[(i, 2 * c)] && data.observed[(i, 2 * c + 1)]);
        for (k, &(a, b)) in gram_index().iter().enumerate() {
            values[(i, k)] = q[k];
            observed[(i, k)] = obs(a) && obs(b);
        }
    }
    Ok(TaskedData::new(data.inputs.clone(), values, observed)?.with_names(gram_names()))
}

/// 2×4 matrix of the three corners from a flat `[x1, y1, x2, y2, x3, y3]` plus the anchor.
pub fn corners_with_anchor(flat: &[f64], anchor: &AnchorPoint) -> DMatrix<f64> {
    DMatrix::from_fn(2, N_POINTS, |r, c| if c == 3 { anchor.position[r] } else { flat[2 * c + r] })
}

/// Result of [`recover_coordinates`].
#[derive(Clone, Debug, PartialEq)]
pub struct Recovery {
    /// 2×4 coordinates including the aligned anchor.
    pub coords: DMatrix<f64>,
    /// Kept eigenvalues that were negative and set to zero.
    pub clamped: usize,
    /// Kept eigenvalues carry less than 90% of the trace.
    pub low_rank_warning: bool,
}

/// Top-`rank` spectral factor `Z̃` (`rank × 4`) with `Z̃ᵀZ̃ ≈ Q̃`, clamping negative eigenvalues.
pub fn gram_factor(q: &DMatrix<f64>, rank: usize) -> (DMatrix<f64>, usize, f64) {
    let (vals, vecs) = sorted_eigen(q);
    let mut clamped = 0;
    let mut factor = DMatrix::zeros(rank, q.nrows());
    let mut kept = 0.0;
    for r in 0..rank.min(vals.len()) {
        let lam = if vals[r] < 0.0 {
            clamped += 1;
            0.0
        } else {
            vals[r]
        };
        kept += lam;
        for c in 0..q.nrows() {
            factor[(r, c)] = lam.sqrt() * vecs[(c, r)];
        }
    }
    let trace: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let mass = if trace > 0.0 { kept / trace } else { 1.0 };
    (factor, clamped, mass)
}

/// Twice the signed area of the first three points.
pub fn signed_area(z: &DMatrix<f64>) -> f64 {
    let (a, b, c) = (z.column(0), z.column(1), z.column(2));
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn rotate_to_anchor(z: &DMatrix<f64>, anchor: &AnchorPoint) -> DMatrix<f64> {
    let a = z.column(3);
    let theta = anchor.position[1].atan2(anchor.position[0]) - a[1].atan2(a[0]);
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c]) * z
}

/// Recovers planar coordinates from a (possibly noisy) Gram vector.
///
/// The rotation is fixed by the anchor. The reflection left open by the anchor is resolved by
/// `orientation` (the sign of the expected signed area of the first three points) when given,
/// otherwise by closeness to `previous`.
pub fn recover_coordinates(
    q: &DVector<f64>,
    anchor: &AnchorPoint,
    orientation: Option<f64>,
    previous: Option<&DMatrix<f64>>,
) -> Result<Recovery> {
    let qm = gram_matrix(q)?;
    if qm.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Gram matrix".into()));
    }
    let (factor, clamped, mass) = gram_factor(&qm, PLANAR_RANK);
    let plain = rotate_to_anchor(&factor, anchor);
    let mut flipped = factor.clone();
    flipped.row_mut(1).neg_mut();
    let flipped = rotate_to_anchor(&flipped, anchor);
    let anchor_err = |z: &DMatrix<f64>| (z[(0, 3)] - anchor.position[0]).hypot(z[(1, 3)] - anchor.position[1]);
    let (ep, ef) = (anchor_err(&plain), anchor_err(&flipped));
    let tie = (ep - ef).abs() <= 1e-9 * (1.0 + ep.max(ef));
    let pick_flipped = if !tie {
        ef < ep
    } else if let Some(sign) = orientation.filter(|s| *s != 0.0) {
        signed_area(&plain) * sign < 0.0 && signed_area(&flipped) * sign >= 0.0
    } else if let Some(prev) = previous {
        (&flipped - prev).norm() < (&plain - prev).norm()
    } else {
        false
    };
    let coords = if pick_flipped { flipped } else { plain };
    if mass < SPECTRAL_MASS_WARN {
        eprintln!("warning: kept spectral mass {mass:.3} is below {SPECTRAL_MASS_WARN}");
    }
    Ok(Recovery { coords, clamped, low_rank_warning: mass < SPECTRAL_MASS_WARN })
}
