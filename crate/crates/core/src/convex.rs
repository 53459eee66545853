//! Coupled convex discrete optimization over a control-point lattice.
//!
//! A dense SSD cost volume is built for every control point and integer
//! displacement candidate. The field is then alternately smoothed and
//! re-matched with an increasing coupling weight.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::grid::{linear_index, resample_field, voxel_count, Dims, DisplacementField, FeatureVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvexConfig {
    pub grid_spacing: usize,
    pub search_radius: usize,
    pub search_step: usize,
    pub theta_schedule: Vec<f64>,
    pub smooth_radius: usize,
    /// Run the local pass on the moving features warped by the global result.
    pub local_on_warped: bool,
}

impl Default for ConvexConfig {
    fn default() -> Self {
        ConvexConfig {
            grid_spacing: 2,
            search_radius: 8,
            search_step: 1,
            theta_schedule: vec![0.3, 1.0, 3.0, 10.0],
            smooth_radius: 1,
            local_on_warped: false,
        }
    }
}

impl ConvexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_spacing < 1 || self.search_radius < 1 || self.search_step < 1 {
            return Err(invalid("grid_spacing, search_radius and search_step must be >= 1"));
        }
        if self.theta_schedule.is_empty() {
            return Err(invalid("theta_schedule must not be empty"));
        }
        if self.theta_schedule.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(invalid("theta values must be finite and >= 0"));
        }
        if self.theta_schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("theta_schedule must be strictly increasing"));
        }
        Ok(())
    }
}

/// Integer displacement candidates ordered by squared length, then
/// lexicographically by (x, y, z). Earlier candidates win ties.
pub fn candidates(q: usize, step: usize) -> Vec<[i32; 3]> {
    let q = q as i32;
    let vals: Vec<i32> = (-q..=q).step_by(step).collect();
    let mut out = Vec::with_capacity(vals.len().pow(3));
    for &x in &vals {
        for &y in &vals {
            for &z in &vals {
                out.push([x, y, z]);
            }
        }
    }
    out.sort_by_key(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], d[0], d[1], d[2]));
    out
}

/// Number of control points along an axis of length `n`.
pub fn control_count(n: usize, spacing: usize) -> usize {
    (n / spacing).max(1)
}

/// Voxel coordinates of the control points along one axis, aligned with the
/// endpoints so that [`resample_field`] interpolates between them exactly.
pub fn control_positions(n: usize, spacing: usize) -> Vec<usize> {
    let m = control_count(n, spacing);
    if m == 1 {
        return vec![(n - 1) / 2];
    }
    (0..m).map(|i| ((i * (n - 1)) as f64 / (m - 1) as f64).round() as usize).collect()
}

/// Clamped voxel coordinates of the cell around each control position.
pub fn cell_coords(n: usize, spacing: usize) -> Vec<Vec<usize>> {
    control_positions(n, spacing)
        .into_iter()
        .map(|c| {
            (0..spacing)
                .map(|j| (c as isize - (spacing / 2) as isize + j as isize).clamp(0, n as isize - 1) as usize)
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    /// Dims of the feature grid the costs were measured on.
    pub feature_dims: Dims,
    pub grid_dims: Dims,
    pub candidates: Vec<[i32; 3]>,
    /// Candidate-major: `cost[k * points + p]`.
    pub cost: Vec<f64>,
}

impl CostVolume {
    pub fn points(&self) -> usize {
        voxel_count(self.grid_dims)
    }

    pub fn cost(&self, point: usize, candidate: usize) -> f64 {
        self.cost[candidate * self.points() + point]
    }
}

fn check_pair(f_fix: &FeatureVolume, f_mov: &FeatureVolume, cfg: &ConvexConfig) -> Result<()> {
    cfg.validate()?;
    if f_fix.dims() != f_mov.dims() || f_fix.channels() != f_mov.channels() {
        return Err(mismatch(format!(
            "feature pair differs: {:?}x{} vs {:?}x{}",
            f_fix.dims(),
            f_fix.channels(),
            f_mov.dims(),
            f_mov.channels()
        )));
    }
    if f_fix.dims().iter().any(|&n| n < cfg.grid_spacing) {
        return Err(invalid(format!(
            "dims {:?} smaller than one grid cell of {}",
            f_fix.dims(),
            cfg.grid_spacing
        )));
    }
    Ok(())
}

/// Mean squared feature difference over each control cell for every
/// candidate shift, sampling the moving features at `x + delta` (clamped).
pub fn build_cost_volume(f_fix: &FeatureVolume, f_mov: &FeatureVolume, cfg: &ConvexConfig) -> Result<CostVolume> {
    check_pair(f_fix, f_mov, cfg)?;
    let dims = f_fix.dims();
    let ch = f_fix.channels();
    let g = cfg.grid_spacing;
    let cells: Vec<Vec<Vec<usize>>> = (0..3).map(|a| cell_coords(dims[a], g)).collect();
    let grid_dims = [cells[0].len(), cells[1].len(), cells[2].len()];
    let points = voxel_count(grid_dims);
    let cands = candidates(cfg.search_radius, cfg.search_step);
    let norm = (g * g * g * ch) as f64;

    let n = voxel_count(dims);
    // Channel-planar copies so the per-row loop runs over contiguous voxels.
    let planar = |src: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * ch];
        for (i, v) in src.chunks_exact(ch).enumerate() {
            for (c, &x) in v.iter().enumerate() {
                out[c * n + i] = x;
            }
        }
        out
    };
    let (fix, mov) = (planar(f_fix.data()), planar(f_mov.data()));
    let [nx, ny, _] = dims;

    // Candidates sharing (dy, dz) read the same moving rows, so they are
    // evaluated together one control plane at a time while the rows are hot.
    let mut cost = vec![0.0; cands.len() * points];
    let mut groups: std::collections::BTreeMap<(i32, i32), Vec<(i32, &mut [f64])>> = Default::default();
    for (out, d) in cost.chunks_mut(points).zip(&cands) {
        groups.entry((d[1], d[2])).or_default().push((d[0], out));
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let plane = g * ny * nx;
    groups.into_par_iter().for_each(|((dy, dz), mut outs)| {
        let clamp = |c: usize, o: i32, a: usize| (c as i64 + o as i64).clamp(0, dims[a] as i64 - 1) as usize;
        let mut ssd = vec![0.0; outs.len() * plane];
        for k in 0..grid_dims[2] {
            for (zi, &z) in cells[2][k].iter().enumerate() {
                let zz = clamp(z, dz, 2);
                for y in 0..ny {
                    let row = linear_index(dims, 0, y, z);
                    let mrow = linear_index(dims, 0, clamp(y, dy, 1), zz);
                    for (di, (dx, _)) in outs.iter().enumerate() {
                        let at = di * plane + (zi * ny + y) * nx;
                        row_ssd(&mut ssd[at..at + nx], &fix, &mov, n, ch, row, mrow, *dx);
                    }
                }
            }
            for (di, (_, out)) in outs.iter_mut().enumerate() {
                let buf = &ssd[di * plane..(di + 1) * plane];
                for j in 0..grid_dims[1] {
                    for i in 0..grid_dims[0] {
                        let mut acc = 0.0;
                        for zi in 0..g {
                            for &y in &cells[1][j] {
                                for &x in &cells[0][i] {
                                    acc += buf[(zi * ny + y) * nx + x];
                                }
                            }
                        }
                        out[i + grid_dims[0] * (j + grid_dims[1] * k)] = acc / norm;
                    }
                }
            }
        }
    });
    Ok(CostVolume { feature_dims: dims, grid_dims, candidates: cands, cost })
}

/// Per-voxel channel SSD between fixed row `row` and moving row `mrow`
/// shifted by `dx` (clamped), channels summed in order.
#[allow(clippy::too_many_arguments)]
fn row_ssd(o: &mut [f64], fix: &[f64], mov: &[f64], n: usize, ch: usize, row: usize, mrow: usize, dx: i32) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2. Wider lanes do not change the
        // result since no multiply-add is fused.
        unsafe { row_ssd_avx2(o, fix, mov, n, ch, row, mrow, dx) };
        return;
    }
    row_ssd_generic(o, fix, mov, n, ch, row, mrow, dx);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn row_ssd_avx2(o: &mut [f64], fix: &[f64], mov: &[f64], n: usize, ch: usize, row: usize, mrow: usize, dx: i32) {
    row_ssd_generic(o, fix, mov, n, ch, row, mrow, dx);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn row_ssd_generic(o: &mut [f64], fix: &[f64], mov: &[f64], n: usize, ch: usize, row: usize, mrow: usize, dx: i32) {
    let nx = o.len();
    let clamp = |x: usize| (x as i64 + dx as i64).clamp(0, nx as i64 - 1) as usize;
    let shift = |x: usize| (x as i64 + dx as i64) as usize;
    // x range whose shifted sample needs no clamping
    let lo = (-(dx as i64)).clamp(0, nx as i64) as usize;
    let hi = (nx as i64 - dx as i64).clamp(lo as i64, nx as i64) as usize;
    o.fill(0.0);
    let mut c = 0;
    // Four channels per pass; each voxel still adds them in channel order.
    while c + 4 <= ch {
        let f: [&[f64]; 4] = [0, 1, 2, 3].map(|k| &fix[(c + k) * n + row..(c + k) * n + row + nx]);
        let m: [&[f64]; 4] = [0, 1, 2, 3].map(|k| &mov[(c + k) * n + mrow..(c + k) * n + mrow + nx]);
        if hi > lo {
            let (s0, s1) = (shift(lo), shift(hi));
            let len = hi - lo;
            let (m0, m1, m2, m3) = (&m[0][s0..s1], &m[1][s0..s1], &m[2][s0..s1], &m[3][s0..s1]);
            let (f0, f1, f2, f3) = (&f[0][lo..hi], &f[1][lo..hi], &f[2][lo..hi], &f[3][lo..hi]);
            let (m0, m1, m2, m3) = (&m0[..len], &m1[..len], &m2[..len], &m3[..len]);
            let (f0, f1, f2, f3) = (&f0[..len], &f1[..len], &f2[..len], &f3[..len]);
            for (x, o) in o[lo..hi].iter_mut().enumerate() {
                let e0 = f0[x] - m0[x];
                let e1 = f1[x] - m1[x];
                let e2 = f2[x] - m2[x];
                let e3 = f3[x] - m3[x];
                *o = *o + e0 * e0 + e1 * e1 + e2 * e2 + e3 * e3;
            }
        }
        for x in (0..lo).chain(hi..nx) {
            let xx = clamp(x);
            let mut s = o[x];
            for k in 0..4 {
                let e = f[k][x] - m[k][xx];
                s += e * e;
            }
            o[x] = s;
        }
        c += 4;
    }
    while c < ch {
        let f = &fix[c * n + row..c * n + row + nx];
        let m = &mov[c * n + mrow..c * n + mrow + nx];
        if hi > lo {
            let ms = &m[shift(lo)..shift(hi)];
            for ((o, &a), &b) in o[lo..hi].iter_mut().zip(&f[lo..hi]).zip(ms) {
                let e = a - b;
                *o += e * e;
            }
        }
        for x in (0..lo).chain(hi..nx) {
            let e = f[x] - m[clamp(x)];
            o[x] += e * e;
        }
        c += 1;
    }
}

/// Box mean of radius `r` over a 3-channel control grid, clamped borders.
fn box_smooth(d: &[f64], dims: Dims, r: usize) -> Vec<f64> {
    let mut cur = d.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        let n = dims[axis] as isize;
        for p in 0..voxel_count(dims) {
            let c = crate::grid::unravel(dims, p);
            let mut acc = [0.0; 3];
            for o in -(r as isize)..=r as isize {
                let mut q = c;
                q[axis] = (c[axis] as isize + o).clamp(0, n - 1) as usize;
                let qi = linear_index(dims, q[0], q[1], q[2]);
                for a in 0..3 {
                    acc[a] += cur[qi * 3 + a];
                }
            }
            for a in 0..3 {
                next[p * 3 + a] = acc[a] / (2 * r + 1) as f64;
            }
        }
        cur = next;
    }
    cur
}

/// Per-point argmin of `cost + weight * |delta - target|^2`; earlier
/// candidates win ties.
fn argmin(cv: &CostVolume, weight: f64, target: Option<&[f64]>) -> Vec<usize> {
    let points = cv.points();
    let mut best = vec![f64::INFINITY; points];
    let mut arg = vec![0usize; points];
    for (k, (d, row)) in cv.candidates.iter().zip(cv.cost.chunks_exact(points)).enumerate() {
        let df = [d[0] as f64, d[1] as f64, d[2] as f64];
        for p in 0..points {
            let mut v = row[p];
            if let Some(s) = target {
                let e = [df[0] - s[p * 3], df[1] - s[p * 3 + 1], df[2] - s[p * 3 + 2]];
                v += weight * (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]);
            }
            if v < best[p] {
                best[p] = v;
                arg[p] = k;
            }
        }
    }
    arg
}

/// Alternate smoothing and coupled argmin over the theta schedule.
///
/// Costs are treated as normalized by their global maximum, so theta is
/// scale-free. Returns a field on the control grid whose values are the
/// chosen candidates in feature-grid voxels.
pub fn coupled_convex(cv: &CostVolume, cfg: &ConvexConfig) -> Result<DisplacementField> {
    cfg.validate()?;
    let max = cv.cost.iter().copied().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { max } else { 1.0 };
    let mut choice = argmin(cv, 0.0, None);
    let to_field = |choice: &[usize]| -> Vec<f64> {
        choice.iter().flat_map(|&k| cv.candidates[k].map(|v| v as f64)).collect()
    };
    for &theta in &cfg.theta_schedule {
        let s = box_smooth(&to_field(&choice), cv.grid_dims, cfg.smooth_radius);
        choice = argmin(cv, theta * scale, Some(&s));
    }
    DisplacementField::new(cv.grid_dims, [1.0; 3], to_field(&choice))
}

/// Convert a control-grid field in feature voxels into control-grid units and
/// resample it onto `out_dims` (whose voxels span the same extent).
pub fn control_to_dense(control: &DisplacementField, feature_dims: Dims, out_dims: Dims) -> Result<DisplacementField> {
    let gd = control.dims();
    let f = crate::grid::rescale_factors(feature_dims, gd);
    let mut data = control.data().to_vec();
    for v in data.chunks_exact_mut(3) {
        for a in 0..3 {
            v[a] *= f[a];
        }
    }
    let spacing = [1.0; 3];
    resample_field(&DisplacementField::new(gd, spacing, data)?, out_dims)
}

/// Cost volume, coupling and resampling in one call.
pub fn convex_register(
    f_fix: &FeatureVolume,
    f_mov: &FeatureVolume,
    cfg: &ConvexConfig,
    out_dims: Dims,
) -> Result<DisplacementField> {
    let cv = build_cost_volume(f_fix, f_mov, cfg)?;
    let control = coupled_convex(&cv, cfg)?;
    drop(cv);
    let mut u = control_to_dense(&control, f_fix.dims(), out_dims)?;
    let sp = f_fix.spacing();
    let fd = f_fix.dims();
    let spacing = [0, 1, 2].map(|a| {
        if out_dims[a] > 1 && fd[a] > 1 {
            sp[a] * (fd[a] - 1) as f64 / (out_dims[a] - 1) as f64
        } else {
            sp[a]
        }
    });
    u = DisplacementField::new(out_dims, spacing, u.into_data())?;
    Ok(u)
}
