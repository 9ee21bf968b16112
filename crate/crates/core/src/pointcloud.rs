//! Point-cloud primitives: sampling, neighborhoods, set aggregation, cost
//! volumes, warping, interpolation and scene-flow metrics.
//!
//! Neighbor searches are brute force; the clouds handled here hold at most
//! a few thousand points.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Bindings, Init, Mlp, ParamStore};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

/// Added to distances before inverting them in [`upsample`].
pub const UPSAMPLE_EPS: f64 = 1e-8;

fn check_coords(name: &'static str, t: &Tensor) -> Result<usize> {
    if t.rank() != 2 || t.cols() != 3 {
        return Err(Error::dim(name, t.shape(), &[t.rows(), 3]));
    }
    Ok(t.rows())
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn lexicographic_min(coords: &Tensor) -> usize {
    (0..coords.rows())
        .min_by(|&a, &b| {
            let (ra, rb) = (coords.row(a), coords.row(b));
            ra[0]
                .total_cmp(&rb[0])
                .then(ra[1].total_cmp(&rb[1]))
                .then(ra[2].total_cmp(&rb[2]))
                .then(a.cmp(&b))
        })
        .unwrap_or(0)
}

/// Greedy max-min subsampling of `m` points, seeded with the
/// lexicographically smallest point. Ties go to the lower index.
pub fn farthest_point_sample(coords: &Tensor, m: usize) -> Result<Vec<usize>> {
    let n = check_coords("farthest_point_sample", coords)?;
    if m == 0 || m > n {
        return Err(Error::Domain(alloc::format!("cannot sample {m} of {n} points")));
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = lexicographic_min(coords);
    selected.push(current);
    while selected.len() < m {
        let c = coords.row(current);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = sq_dist(coords.row(i), c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// The `k` nearest reference points of every query, nearest first, ties
/// broken by index. Returned flat, `M×k`.
pub fn knn(query: &Tensor, reference: &Tensor, k: usize) -> Result<Vec<usize>> {
    let m = check_coords("knn", query)?;
    let n = check_coords("knn", reference)?;
    if k == 0 || k > n {
        return Err(Error::Domain(alloc::format!("cannot take {k} neighbors of {n} points")));
    }
    let mut out = Vec::with_capacity(m * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..m {
        let qr = query.row(i);
        cand.clear();
        cand.extend((0..n).map(|j| (sq_dist(qr, reference.row(j)), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(cmp);
        out.extend(head.iter().map(|&(_, j)| j));
    }
    Ok(out)
}

/// How per-neighbor features are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Learned per-channel weights from the neighbor offsets, then a sum.
    WeightedSum,
    /// Elementwise max.
    MaxPool,
}

/// Set aggregation over local neighborhoods: a shared MLP over
/// `[feature, neighbor - center]` followed by a weighted sum or max-pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SetConv {
    pub mlp: Mlp,
    /// Only for [`Aggregation::WeightedSum`]: offset → per-channel weight.
    pub weight_mlp: Option<Mlp>,
    pub mode: Aggregation,
    pub feat_channels: usize,
}

impl SetConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        feat_channels: usize,
        out_channels: usize,
        mode: Aggregation,
        rng: &mut R,
    ) -> Self {
        let mlp = Mlp::new(
            store,
            &alloc::format!("{name}.mlp"),
            &[feat_channels + 3, out_channels, out_channels],
            Some(Activation::Silu),
            mode == Aggregation::MaxPool,
            Init::FanIn,
            rng,
        );
        let weight_mlp = (mode == Aggregation::WeightedSum).then(|| {
            Mlp::new(
                store,
                &alloc::format!("{name}.weight"),
                &[3, 8, out_channels],
                Some(Activation::Silu),
                false,
                Init::FanIn,
                rng,
            )
        });
        SetConv {
            mlp,
            weight_mlp,
            mode,
            feat_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.mlp.outputs()
    }

    /// Aggregates, for every center, the `k` source points listed in
    /// `nbr_idx` (flat, `M×k`).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        centers: Var,
        src_coords: Var,
        src_feats: Option<Var>,
        nbr_idx: &[usize],
        k: usize,
    ) -> Result<Var> {
        if k == 0 {
            return Err(Error::Contract("set aggregation needs at least one neighbor".into()));
        }
        let m = tape.value(centers).rows();
        if nbr_idx.len() != m * k {
            return Err(Error::dim("set_aggregate", &[m, k], &[nbr_idx.len()]));
        }
        let feat_c = src_feats.map_or(0, |f| tape.value(f).cols());
        if feat_c != self.feat_channels {
            return Err(Error::dim("set_aggregate", &[self.feat_channels], &[feat_c]));
        }
        let offsets = neighbor_offsets(tape, centers, src_coords, nbr_idx, k)?;
        let input = match src_feats {
            Some(f) => {
                let nf = tape.gather_rows(f, nbr_idx)?;
                tape.concat_cols(&[nf, offsets])?
            }
            None => offsets,
        };
        let h = self.mlp.forward(tape, p, input)?;
        match (self.mode, &self.weight_mlp) {
            (Aggregation::MaxPool, _) => tape.group_max(h, k),
            (Aggregation::WeightedSum, Some(wm)) => {
                let w = wm.forward(tape, p, offsets)?;
                let hw = tape.mul(h, w)?;
                tape.group_sum(hw, k)
            }
            (Aggregation::WeightedSum, None) => tape.group_sum(h, k),
        }
    }
}

/// `src[nbr] - center` for every (center, neighbor) pair, `(M·k)×3`.
fn neighbor_offsets(tape: &mut Tape, centers: Var, src_coords: Var, nbr_idx: &[usize], k: usize) -> Result<Var> {
    let m = tape.value(centers).rows();
    let rep: Vec<usize> = (0..m).flat_map(|i| core::iter::repeat_n(i, k)).collect();
    let c = tape.gather_rows(centers, &rep)?;
    let nb = tape.gather_rows(src_coords, nbr_idx)?;
    tape.sub(nb, c)
}

/// Local cost volume: for each (warped) source point, a shared MLP over
/// `[f_i, g_j, q_j - p_i]` for its `k` nearest target points, max-pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub mlp: Mlp,
    pub k: usize,
}

impl CostVolume {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        feat_channels: usize,
        out_channels: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        CostVolume {
            mlp: Mlp::new(
                store,
                name,
                &[2 * feat_channels + 3, out_channels, out_channels],
                Some(Activation::Silu),
                true,
                Init::FanIn,
                rng,
            ),
            k,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, src: Var, f: Var, tgt: Var, g: Var) -> Result<Var> {
        let n2 = tape.value(tgt).rows();
        let k = self.k.min(n2);
        let idx = knn(tape.value(src), tape.value(tgt), k)?;
        self.forward_with_neighbors(tape, p, src, f, tgt, g, &idx, k)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_neighbors(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        src: Var,
        f: Var,
        tgt: Var,
        g: Var,
        idx: &[usize],
        k: usize,
    ) -> Result<Var> {
        let n1 = tape.value(src).rows();
        if tape.value(f).rows() != n1 || tape.value(g).rows() != tape.value(tgt).rows() {
            return Err(Error::dim("cost_volume", tape.value(f).shape(), tape.value(g).shape()));
        }
        let rep: Vec<usize> = (0..n1).flat_map(|i| core::iter::repeat_n(i, k)).collect();
        let fi = tape.gather_rows(f, &rep)?;
        let gj = tape.gather_rows(g, idx)?;
        let offsets = neighbor_offsets(tape, src, tgt, idx, k)?;
        let pair = tape.concat_cols(&[fi, gj, offsets])?;
        let h = self.mlp.forward(tape, p, pair)?;
        tape.group_max(h, k)
    }
}

/// `p + sf`.
pub fn warp(tape: &mut Tape, p: Var, sf: Var) -> Result<Var> {
    tape.add(p, sf)
}

/// Neighbor indices and normalized inverse-distance weights for
/// interpolating from `sparse` onto `dense` with `k` neighbors.
pub fn upsample_weights(sparse: &Tensor, dense: &Tensor, k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let idx = knn(dense, sparse, k)?;
    let mut w = Vec::with_capacity(idx.len());
    for i in 0..dense.rows() {
        let row = &idx[i * k..(i + 1) * k];
        let start = w.len();
        let mut total = 0.0;
        for &j in row {
            let inv = 1.0 / (math::sqrt(sq_dist(dense.row(i), sparse.row(j))) + UPSAMPLE_EPS);
            total += inv;
            w.push(inv);
        }
        for v in &mut w[start..] {
            *v /= total;
        }
    }
    Ok((idx, w))
}

/// Inverse-distance-weighted interpolation of `values` (one row per sparse
/// point) onto the dense points.
pub fn upsample(tape: &mut Tape, sparse: &Tensor, dense: &Tensor, values: Var, k: usize) -> Result<Var> {
    if tape.value(values).rows() != sparse.rows() {
        return Err(Error::dim("upsample", sparse.shape(), tape.value(values).shape()));
    }
    let (idx, w) = upsample_weights(sparse, dense, k)?;
    tape.interpolate_rows(values, &idx, &w, k)
}

/// Standard scene-flow metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    /// Mean end-point error, scene units.
    pub epe3d: f64,
    /// Fraction with error < 0.05 or relative error < 5%.
    pub acc3ds: f64,
    /// Fraction with error < 0.1 or relative error < 10%.
    pub acc3dr: f64,
    /// Fraction with error > 0.3 or relative error > 10%.
    pub outliers: f64,
}

/// Added to the ground-truth magnitude in the relative error.
pub const RELATIVE_ERROR_EPS: f64 = 1e-4;

pub fn evaluate(pred: &Tensor, gt: &Tensor) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() || pred.rank() != 2 || pred.cols() != 3 {
        return Err(Error::dim("evaluate", pred.shape(), gt.shape()));
    }
    let n = pred.rows();
    let (mut epe_sum, mut s, mut r, mut o) = (0.0, 0usize, 0usize, 0usize);
    for i in 0..n {
        let epe = math::sqrt(sq_dist(pred.row(i), gt.row(i)));
        let gt_norm = math::sqrt(sq_dist(gt.row(i), &[0.0; 3]));
        let rel = epe / (gt_norm + RELATIVE_ERROR_EPS);
        epe_sum += epe;
        s += usize::from(epe < 0.05 || rel < 0.05);
        r += usize::from(epe < 0.1 || rel < 0.1);
        o += usize::from(epe > 0.3 || rel > 0.1);
    }
    let n_f = n as f64;
    Ok(MetricsReport {
        epe3d: epe_sum / n_f,
        acc3ds: s as f64 / n_f,
        acc3dr: r as f64 / n_f,
        outliers: o as f64 / n_f,
    })
}
