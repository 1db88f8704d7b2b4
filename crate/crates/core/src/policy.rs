//! Disturbance-feedback policies: piecewise-affine input laws over a
//! partition of the disturbance domain, causality masks, piecewise-constant
//! recourse assignments, and partition refinement.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

const PIECE_TOL: f64 = 1e-9;

/// One partition piece: an axis-aligned box over the stacked disturbance
/// (with `±inf` bounds allowed) intersected with extra halfspaces
/// `a . w <= b`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Piece {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
    #[serde(default)]
    pub halfspaces: Vec<Halfspace>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Halfspace {
    pub a: Vec<f64>,
    pub b: f64,
}

impl Piece {
    pub fn whole(dim: usize) -> Self {
        Piece { lower: vec![None; dim], upper: vec![None; dim], halfspaces: Vec::new() }
    }

    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Piece {
            lower: lower
                .into_iter()
                .map(|v| if v.is_finite() { Some(v) } else { None })
                .collect(),
            upper: upper
                .into_iter()
                .map(|v| if v.is_finite() { Some(v) } else { None })
                .collect(),
            halfspaces: Vec::new(),
        }
    }

    pub fn lower_at(&self, i: usize) -> f64 {
        self.lower[i].unwrap_or(f64::NEG_INFINITY)
    }

    pub fn upper_at(&self, i: usize) -> f64 {
        self.upper[i].unwrap_or(f64::INFINITY)
    }

    pub fn contains(&self, w: &DVector<f64>, tol: f64) -> bool {
        let in_box = (0..self.lower.len())
            .all(|i| w[i] >= self.lower_at(i) - tol && w[i] <= self.upper_at(i) + tol);
        in_box
            && self
                .halfspaces
                .iter()
                .all(|h| h.a.iter().zip(w.iter()).map(|(a, w)| a * w).sum::<f64>() <= h.b + tol)
    }

    /// Infinity-norm distance from `w` to the bounding box (halfspaces are
    /// ignored; only used for nearest-piece fallback).
    fn box_distance(&self, w: &DVector<f64>) -> f64 {
        (0..self.lower.len())
            .map(|i| {
                let v = w[i];
                (self.lower_at(i) - v).max(v - self.upper_at(i)).max(0.0)
            })
            .fold(0.0, f64::max)
    }
}

/// A partition of the stacked disturbance domain into `pieces.len()` pieces.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Partition {
    pub dim: usize,
    pub pieces: Vec<Piece>,
}

impl Partition {
    /// The trivial single-piece partition covering the whole domain.
    pub fn trivial(dim: usize) -> Self {
        Partition { dim, pieces: vec![Piece::whole(dim)] }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Locates `w` in the partition. Boundary ties resolve to the
    /// lowest-index piece. When `w` lies in no piece, the piece whose
    /// bounding box is nearest in the infinity norm is returned with the
    /// out-of-partition flag set.
    pub fn locate(&self, w: &DVector<f64>) -> (usize, bool) {
        assert_eq!(w.len(), self.dim, "point dimension mismatch");
        for (i, piece) in self.pieces.iter().enumerate() {
            if piece.contains(w, PIECE_TOL) {
                return (i, false);
            }
        }
        let nearest = self
            .pieces
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                a.box_distance(w).partial_cmp(&b.box_distance(w)).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        (nearest, true)
    }
}

/// Structure of a piecewise-affine disturbance-feedback policy
/// `u = H kappa(w)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicySpec {
    pub n_u: usize,
    pub n_w: usize,
    /// Number of inputs `u_0, ..., u_{horizon-1}`. The stacked disturbance
    /// has `horizon + 1` stages.
    pub horizon: usize,
    /// `u_k` may depend on `w_j` for `max(0, k - memory + 1) <= j <= k`;
    /// `memory = 0` yields a piecewise open-loop policy.
    pub memory: usize,
    pub partition: Partition,
}

impl PolicySpec {
    pub fn new(n_u: usize, n_w: usize, horizon: usize, memory: usize, partition: Partition) -> Result<Self> {
        let dim = (horizon + 1) * n_w;
        if partition.dim != dim {
            return Err(Error::Dimension(format!(
                "partition dimension {} does not match stacked disturbance dimension {dim}",
                partition.dim
            )));
        }
        Ok(PolicySpec { n_u, n_w, horizon, memory, partition })
    }

    /// Length of the feature vector `kappa(w)`: one constant plus the full
    /// stacked disturbance, replicated per piece.
    pub fn n_kappa(&self) -> usize {
        self.partition.len() * (self.partition.dim + 1)
    }

    pub fn n_inputs_stacked(&self) -> usize {
        self.horizon * self.n_u
    }

    /// Feature vector for `w`: the block of the active piece carries
    /// `(1, w)`, all other blocks are zero. Also returns the piece index
    /// and the out-of-partition flag from [`Partition::locate`].
    pub fn kappa(&self, w: &DVector<f64>) -> (DVector<f64>, usize, bool) {
        let (piece, flagged) = self.partition.locate(w);
        let block = self.partition.dim + 1;
        let mut k = DVector::zeros(self.n_kappa());
        k[piece * block] = 1.0;
        k.rows_mut(piece * block + 1, self.partition.dim).copy_from(w);
        (k, piece, flagged)
    }

    /// Boolean mask over `H` (rows: stacked inputs, columns: features).
    /// `true` marks a free parameter; constants are always free, and the
    /// coefficient of `w_j` in `u_k` is free only inside the memory window.
    pub fn causality_mask(&self) -> DMatrix<bool> {
        let mut mask = DMatrix::from_element(self.n_inputs_stacked(), self.n_kappa(), false);
        let block = self.partition.dim + 1;
        for p in 0..self.partition.len() {
            for k in 0..self.horizon {
                for row in k * self.n_u..(k + 1) * self.n_u {
                    mask[(row, p * block)] = true;
                    if self.memory == 0 {
                        continue;
                    }
                    for j in (k + 1).saturating_sub(self.memory)..=k {
                        for c in 0..self.n_w {
                            mask[(row, p * block + 1 + j * self.n_w + c)] = true;
                        }
                    }
                }
            }
        }
        mask
    }

    /// Number of free policy parameters under the causality mask.
    pub fn free_parameters(&self) -> usize {
        self.causality_mask().iter().filter(|&&b| b).count()
    }
}

/// A synthesized policy: the parameter matrix together with its structure.
#[derive(Clone, Debug)]
pub struct PolicyParam {
    pub spec: PolicySpec,
    pub h: DMatrix<f64>,
}

impl PolicyParam {
    /// Checks `h` against the causality mask; any nonzero entry outside the
    /// mask is a violation.
    pub fn new(spec: PolicySpec, h: DMatrix<f64>) -> Result<Self> {
        if (h.nrows(), h.ncols()) != (spec.n_inputs_stacked(), spec.n_kappa()) {
            return Err(Error::Dimension(format!(
                "policy matrix is {}x{}, expected {}x{}",
                h.nrows(),
                h.ncols(),
                spec.n_inputs_stacked(),
                spec.n_kappa()
            )));
        }
        let mask = spec.causality_mask();
        for r in 0..h.nrows() {
            for c in 0..h.ncols() {
                if !mask[(r, c)] && h[(r, c)] != 0.0 {
                    return Err(Error::MaskViolation { row: r, col: c });
                }
            }
        }
        Ok(PolicyParam { spec, h })
    }

    /// Evaluates the input sequence `(u_0, ..., u_{N-1})` for a stacked
    /// disturbance realization. Returns the inputs together with the
    /// out-of-partition flag.
    pub fn evaluate(&self, w: &DVector<f64>) -> (Vec<DVector<f64>>, bool) {
        let (kappa, _, flagged) = self.spec.kappa(w);
        let ubold = &self.h * kappa;
        let us = (0..self.spec.horizon)
            .map(|k| ubold.rows(k * self.spec.n_u, self.spec.n_u).into_owned())
            .collect();
        (us, flagged)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<f64>> = (0..self.h.nrows())
            .map(|r| self.h.row(r).iter().copied().collect())
            .collect();
        serde_json::json!({ "spec": self.spec, "h": rows })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let spec: PolicySpec = serde_json::from_value(v["spec"].clone())?;
        let rows: Vec<Vec<f64>> = serde_json::from_value(v["h"].clone())?;
        let nrows = rows.len();
        let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
        let h = DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]);
        PolicyParam::new(spec, h)
    }
}

/// How a recourse vector is shared across scenario samples: one block of
/// `n_c` continuous and `n_b` binary recourse variables per partition piece,
/// common to every sample located in that piece.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecourseSpec {
    pub partition: Partition,
}

impl RecourseSpec {
    pub fn trivial(dim: usize) -> Self {
        RecourseSpec { partition: Partition::trivial(dim) }
    }

    pub fn pieces(&self) -> usize {
        self.partition.len()
    }

    pub fn locate(&self, w: &DVector<f64>) -> (usize, bool) {
        self.partition.locate(w)
    }
}

/// Splits one partition piece in half, guided by binding sample points.
///
/// Among `eligible` pieces holding at least two binding points, the piece
/// and splittable coordinate with the largest point separation is chosen;
/// the piece's box is cut at the midpoint of the two extreme values. The
/// lower half replaces the original piece and the upper half is appended,
/// so existing piece indices stay valid. Fails with [`Error::SplitRefused`]
/// when no eligible piece can be separated.
pub fn refine_partition(
    partition: &Partition,
    binding: &[(usize, DVector<f64>)],
    eligible: &[usize],
    coords: &[usize],
) -> Result<Partition> {
    let mut best: Option<(f64, usize, usize, f64)> = None; // (sep, piece, coord, midpoint)
    for &p in eligible {
        let pts: Vec<&DVector<f64>> =
            binding.iter().filter(|(i, _)| *i == p).map(|(_, w)| w).collect();
        if pts.len() < 2 {
            continue;
        }
        for &c in coords {
            let lo = pts.iter().map(|w| w[c]).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|w| w[c]).fold(f64::NEG_INFINITY, f64::max);
            let sep = hi - lo;
            if sep > PIECE_TOL && best.map(|(s, _, _, _)| sep > s).unwrap_or(true) {
                best = Some((sep, p, c, 0.5 * (lo + hi)));
            }
        }
    }
    let (_, piece, coord, mid) = best.ok_or_else(|| Error::SplitRefused("no eligible piece has separated binding points".into()))?;
    let mut out = partition.clone();
    let mut upper_half = out.pieces[piece].clone();
    out.pieces[piece].upper[coord] = Some(mid);
    upper_half.lower[coord] = Some(mid);
    out.pieces.push(upper_half);
    Ok(out)
}
