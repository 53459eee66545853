//! Voxel grids, trilinear sampling, warping and displacement-field algebra.
//!
//! Every buffer is linearized x-fastest, then y, then z. Multi-channel grids
//! store their channels contiguously per voxel (channel-fastest). Sampling
//! clamps coordinates to the grid (border replication) everywhere.
//!
//! Displacements are stored in voxel units of the grid they are defined on;
//! [`resample_field`] rescales the values when the grid changes so that the
//! field describes the same motion.

use rayon::prelude::*;

use crate::error::{invalid, mismatch, Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// Inverse of [`linear_index`].
#[inline]
pub fn unravel(dims: Dims, i: usize) -> [usize; 3] {
    let x = i % dims[0];
    let r = i / dims[0];
    [x, r % dims[1], r / dims[1]]
}

fn check_geometry(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(invalid(format!("dims must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(invalid(format!("spacing must be > 0, got {spacing:?}")));
    }
    Ok(())
}

fn check_len(dims: Dims, channels: usize, len: usize) -> Result<()> {
    let want = voxel_count(dims) * channels;
    if len != want {
        return Err(mismatch(format!(
            "data length {len} != {want} for dims {dims:?} x {channels} channels"
        )));
    }
    Ok(())
}

/// Borrowed view of any channel-interleaved grid.
#[derive(Clone, Copy, Debug)]
pub struct GridView<'a> {
    pub dims: Dims,
    pub channels: usize,
    pub data: &'a [f64],
}

impl GridView<'_> {
    #[inline]
    fn voxel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// Interpolate every channel with a precomputed stencil.
    #[inline]
    pub(crate) fn interpolate(&self, st: &Stencil, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..8 {
            let w = st.w[k];
            if w == 0.0 {
                continue;
            }
            let v = self.voxel(st.idx[k]);
            for (o, &val) in out.iter_mut().zip(v) {
                *o += w * val;
            }
        }
    }
}

/// Anything that can be sampled with [`trilinear_sample`].
pub trait Grid {
    fn view(&self) -> GridView<'_>;
}

/// The eight corners and weights of a trilinear interpolation.
///
/// Corner `k` has offsets `(k & 1, (k >> 1) & 1, (k >> 2) & 1)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    /// d w / d p per axis; zero along axes where the point was clamped.
    pub dw: [[f64; 8]; 3],
}

#[inline]
fn axis_cell(n: usize, p: f64) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let hi = (n - 1) as f64;
    let inside = (0.0..=hi).contains(&p);
    let pc = p.clamp(0.0, hi);
    let i0 = (pc.floor() as usize).min(n - 2);
    (i0, i0 + 1, pc - i0 as f64, inside)
}

impl Stencil {
    #[inline]
    pub(crate) fn new(dims: Dims, p: [f64; 3]) -> Self {
        let (x0, x1, tx, ix) = axis_cell(dims[0], p[0]);
        let (y0, y1, ty, iy) = axis_cell(dims[1], p[1]);
        let (z0, z1, tz, iz) = axis_cell(dims[2], p[2]);
        let xs = [x0, x1];
        let ys = [y0, y1];
        let zs = [z0, z1];
        let wx = [1.0 - tx, tx];
        let wy = [1.0 - ty, ty];
        let wz = [1.0 - tz, tz];
        // Derivative of the 1D weights; zero where the coordinate was clamped.
        let dx = if ix { [-1.0, 1.0] } else { [0.0, 0.0] };
        let dy = if iy { [-1.0, 1.0] } else { [0.0, 0.0] };
        let dz = if iz { [-1.0, 1.0] } else { [0.0, 0.0] };
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        let mut dw = [[0.0; 8]; 3];
        for k in 0..8 {
            let (a, b, c) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            idx[k] = linear_index(dims, xs[a], ys[b], zs[c]);
            w[k] = wx[a] * wy[b] * wz[c];
            dw[0][k] = dx[a] * wy[b] * wz[c];
            dw[1][k] = wx[a] * dy[b] * wz[c];
            dw[2][k] = wx[a] * wy[b] * dz[c];
        }
        Stencil { idx, w, dw }
    }

    /// Corners and weights only.
    #[inline]
    pub(crate) fn weights(dims: Dims, p: [f64; 3]) -> ([usize; 8], [f64; 8]) {
        let (x0, x1, tx, _) = axis_cell(dims[0], p[0]);
        let (y0, y1, ty, _) = axis_cell(dims[1], p[1]);
        let (z0, z1, tz, _) = axis_cell(dims[2], p[2]);
        let (xs, ys, zs) = ([x0, x1], [y0, y1], [z0, z1]);
        let (wx, wy, wz) = ([1.0 - tx, tx], [1.0 - ty, ty], [1.0 - tz, tz]);
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        for k in 0..8 {
            let (a, b, c) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            idx[k] = linear_index(dims, xs[a], ys[b], zs[c]);
            w[k] = wx[a] * wy[b] * wz[c];
        }
        (idx, w)
    }
}

#[inline]
fn nearest_index(dims: Dims, p: [f64; 3]) -> usize {
    let r = |n: usize, v: f64| v.round().clamp(0.0, (n - 1) as f64) as usize;
    linear_index(dims, r(dims[0], p[0]), r(dims[1], p[1]), r(dims[2], p[2]))
}

fn check_point(p: [f64; 3]) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidCoordinate)
    }
}

/// Trilinear interpolation of every channel of `grid` at voxel coordinate `p`.
pub fn trilinear_sample<G: Grid + ?Sized>(grid: &G, p: [f64; 3]) -> Result<Vec<f64>> {
    check_point(p)?;
    let v = grid.view();
    let mut out = vec![0.0; v.channels];
    v.interpolate(&Stencil::new(v.dims, p), &mut out);
    Ok(out)
}

/// Scalar intensity or mask volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        check_len(dims, 1, data.len())?;
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f64) -> Result<Self> {
        Self::new(dims, spacing, vec![value; voxel_count(dims)])
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let data = (0..voxel_count(dims))
            .map(|i| {
                let [x, y, z] = unravel(dims, i);
                f(x, y, z)
            })
            .collect();
        Ok(Volume { dims, spacing, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = linear_index(self.dims, x, y, z);
        self.data[i] = v;
    }

    pub fn sample(&self, p: [f64; 3]) -> Result<f64> {
        check_point(p)?;
        let mut out = [0.0];
        self.view().interpolate(&Stencil::new(self.dims, p), &mut out);
        Ok(out[0])
    }

    /// (min, max) of the data.
    pub fn range(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

impl Grid for Volume {
    fn view(&self) -> GridView<'_> {
        GridView { dims: self.dims, channels: 1, data: &self.data }
    }
}

/// Multi-channel grid (MIND descriptors, embeddings, reduced features).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    dims: Dims,
    channels: usize,
    spacing: Spacing,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(dims: Dims, channels: usize, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if channels == 0 {
            return Err(invalid("channels must be >= 1"));
        }
        check_len(dims, channels, data.len())?;
        Ok(FeatureVolume { dims, channels, spacing, data })
    }

    pub fn zeros(dims: Dims, channels: usize, spacing: Spacing) -> Result<Self> {
        Self::new(dims, channels, spacing, vec![0.0; voxel_count(dims) * channels])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn voxel(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let i = linear_index(self.dims, x, y, z);
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn sample(&self, p: [f64; 3]) -> Result<Vec<f64>> {
        trilinear_sample(self, p)
    }

    /// Copy out a single channel as a scalar volume.
    pub fn channel(&self, c: usize) -> Result<Volume> {
        if c >= self.channels {
            return Err(invalid(format!("channel {c} out of range ({})", self.channels)));
        }
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Volume::new(self.dims, self.spacing, data)
    }

    pub fn from_volume(v: &Volume) -> Self {
        FeatureVolume { dims: v.dims, channels: 1, spacing: v.spacing, data: v.data.clone() }
    }
}

impl Grid for FeatureVolume {
    fn view(&self) -> GridView<'_> {
        GridView { dims: self.dims, channels: self.channels, data: &self.data }
    }
}

/// Dense displacement field `u` such that the warped image at `X` samples the
/// moving image at `X + u(X)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        check_len(dims, 3, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(DisplacementField { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; voxel_count(dims) * 3])
    }

    pub fn constant(dims: Dims, spacing: Spacing, v: [f64; 3]) -> Result<Self> {
        Self::from_fn(dims, spacing, |_, _, _| v)
    }

    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        f: impl Fn(usize, usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let mut data = Vec::with_capacity(voxel_count(dims) * 3);
        for i in 0..voxel_count(dims) {
            let [x, y, z] = unravel(dims, i);
            data.extend_from_slice(&f(x, y, z));
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let i = 3 * linear_index(self.dims, x, y, z);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: [f64; 3]) {
        let i = 3 * linear_index(self.dims, x, y, z);
        self.data[i..i + 3].copy_from_slice(&v);
    }

    pub fn sample(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        check_point(p)?;
        let mut out = [0.0; 3];
        self.view().interpolate(&Stencil::new(self.dims, p), &mut out);
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Mean Euclidean length of the displacement vectors.
    pub fn mean_norm(&self) -> f64 {
        let sum: f64 = self
            .data
            .chunks_exact(3)
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .sum();
        sum / voxel_count(self.dims) as f64
    }

    pub fn as_features(&self) -> FeatureVolume {
        FeatureVolume { dims: self.dims, channels: 3, spacing: self.spacing, data: self.data.clone() }
    }
}

impl Grid for DisplacementField {
    fn view(&self) -> GridView<'_> {
        GridView { dims: self.dims, channels: 3, data: &self.data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Trilinear,
    Nearest,
}

fn check_field_finite(u: &DisplacementField) -> Result<()> {
    if u.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidCoordinate)
    }
}

fn warp_buffer(moving: GridView<'_>, u: &DisplacementField, mode: Interpolation) -> Vec<f64> {
    let dims = u.dims;
    let ch = moving.channels;
    let slice_len = dims[0] * dims[1] * ch;
    let mut out = vec![0.0; voxel_count(dims) * ch];
    out.par_chunks_mut(slice_len).enumerate().for_each(|(z, slab)| {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d = u.at(x, y, z);
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let o = (x + dims[0] * y) * ch;
                let dst = &mut slab[o..o + ch];
                match mode {
                    Interpolation::Trilinear => moving.interpolate(&Stencil::new(moving.dims, p), dst),
                    Interpolation::Nearest => dst.copy_from_slice(moving.voxel(nearest_index(moving.dims, p))),
                }
            }
        }
    });
    out
}

/// Warp a scalar volume: `out(X) = moving(X + u(X))` on the grid of `u`.
pub fn warp_volume(moving: &Volume, u: &DisplacementField, mode: Interpolation) -> Result<Volume> {
    check_field_finite(u)?;
    let data = warp_buffer(moving.view(), u, mode);
    Volume::new(u.dims, u.spacing, data)
}

/// Warp every channel of a feature volume.
pub fn warp_features(
    moving: &FeatureVolume,
    u: &DisplacementField,
    mode: Interpolation,
) -> Result<FeatureVolume> {
    check_field_finite(u)?;
    let data = warp_buffer(moving.view(), u, mode);
    FeatureVolume::new(u.dims, moving.channels, u.spacing, data)
}

/// `result(X) = outer(X) + inner(X + outer(X))`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    if outer.dims != inner.dims {
        return Err(mismatch(format!("compose: {:?} vs {:?}", outer.dims, inner.dims)));
    }
    let moved = warp_buffer(inner.view(), outer, Interpolation::Trilinear);
    let data = outer.data.iter().zip(&moved).map(|(a, b)| a + b).collect();
    DisplacementField::new(outer.dims, outer.spacing, data)
}

/// 1D linear interpolation table mapping `n_dst` samples onto `n_src`
/// (grid end points aligned).
struct AxisTable {
    i0: Vec<usize>,
    i1: Vec<usize>,
    t: Vec<f64>,
}

impl AxisTable {
    fn new(n_src: usize, n_dst: usize) -> Self {
        let mut tab = AxisTable { i0: vec![0; n_dst], i1: vec![0; n_dst], t: vec![0.0; n_dst] };
        if n_src == 1 {
            return tab;
        }
        for j in 0..n_dst {
            let pos = if n_dst == 1 {
                0.0
            } else {
                j as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64
            };
            let i0 = (pos.floor() as usize).min(n_src - 2);
            tab.i0[j] = i0;
            tab.i1[j] = i0 + 1;
            tab.t[j] = pos - i0 as f64;
        }
        tab
    }
}

fn pass_dims(dims: Dims, axis: usize, n: usize) -> Dims {
    let mut d = dims;
    d[axis] = n;
    d
}

fn resample_axis(src: &[f64], dims: Dims, ch: usize, axis: usize, n_dst: usize) -> Vec<f64> {
    let tab = AxisTable::new(dims[axis], n_dst);
    let out_dims = pass_dims(dims, axis, n_dst);
    let mut out = vec![0.0; voxel_count(out_dims) * ch];
    out.par_chunks_mut(out_dims[0] * out_dims[1] * ch).enumerate().for_each(|(z, slab)| {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let mut c = [x, y, z];
                let j = c[axis];
                c[axis] = tab.i0[j];
                let a = linear_index(dims, c[0], c[1], c[2]) * ch;
                c[axis] = tab.i1[j];
                let b = linear_index(dims, c[0], c[1], c[2]) * ch;
                let t = tab.t[j];
                let o = (x + out_dims[0] * y) * ch;
                for k in 0..ch {
                    slab[o + k] = (1.0 - t) * src[a + k] + t * src[b + k];
                }
            }
        }
    });
    out
}

fn resample_axis_adjoint(grad: &[f64], src_dims: Dims, ch: usize, axis: usize, n_dst: usize) -> Vec<f64> {
    let tab = AxisTable::new(src_dims[axis], n_dst);
    let dst_dims = pass_dims(src_dims, axis, n_dst);
    let mut out = vec![0.0; voxel_count(src_dims) * ch];
    for i in 0..voxel_count(dst_dims) {
        let mut c = unravel(dst_dims, i);
        let j = c[axis];
        let t = tab.t[j];
        c[axis] = tab.i0[j];
        let a = linear_index(src_dims, c[0], c[1], c[2]) * ch;
        c[axis] = tab.i1[j];
        let b = linear_index(src_dims, c[0], c[1], c[2]) * ch;
        for k in 0..ch {
            let g = grad[i * ch + k];
            out[a + k] += (1.0 - t) * g;
            out[b + k] += t * g;
        }
    }
    out
}

/// Separable trilinear resampling of a channel-interleaved buffer.
pub(crate) fn resample_buffer(src: &[f64], dims: Dims, ch: usize, new_dims: Dims) -> Vec<f64> {
    let mut cur = src.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        if d[axis] != new_dims[axis] {
            cur = resample_axis(&cur, d, ch, axis, new_dims[axis]);
            d[axis] = new_dims[axis];
        }
    }
    cur
}

/// Transpose of [`resample_buffer`]: maps a gradient on `new_dims` back to `dims`.
pub(crate) fn resample_buffer_adjoint(grad: &[f64], dims: Dims, ch: usize, new_dims: Dims) -> Vec<f64> {
    // Forward applies x, y, z in order, so the adjoint runs z, y, x.
    let mut inter = [dims; 4];
    for axis in 0..3 {
        inter[axis + 1] = inter[axis];
        inter[axis + 1][axis] = new_dims[axis];
    }
    let mut cur = grad.to_vec();
    for axis in (0..3).rev() {
        if dims[axis] != new_dims[axis] {
            cur = resample_axis_adjoint(&cur, inter[axis], ch, axis, new_dims[axis]);
        }
    }
    cur
}

/// Per-axis factor converting displacement values from a grid of `from`
/// voxels to a grid of `to` voxels spanning the same extent.
pub fn rescale_factors(from: Dims, to: Dims) -> [f64; 3] {
    let mut s = [1.0; 3];
    for a in 0..3 {
        if from[a] > 1 && to[a] > 1 {
            s[a] = (to[a] - 1) as f64 / (from[a] - 1) as f64;
        }
    }
    s
}

fn rescaled_spacing(spacing: Spacing, from: Dims, to: Dims) -> Spacing {
    let s = rescale_factors(from, to);
    [spacing[0] / s[0], spacing[1] / s[1], spacing[2] / s[2]]
}

/// Resample a displacement field onto `new_dims`, rescaling the values so the
/// field represents the same motion on the new grid.
pub fn resample_field(u: &DisplacementField, new_dims: Dims) -> Result<DisplacementField> {
    if new_dims.iter().any(|&d| d == 0) {
        return Err(invalid(format!("new dims must be >= 1, got {new_dims:?}")));
    }
    if new_dims == u.dims {
        return Ok(u.clone());
    }
    let scale = rescale_factors(u.dims, new_dims);
    let mut data = resample_buffer(&u.data, u.dims, 3, new_dims);
    for v in data.chunks_exact_mut(3) {
        for a in 0..3 {
            v[a] *= scale[a];
        }
    }
    DisplacementField::new(new_dims, rescaled_spacing(u.spacing, u.dims, new_dims), data)
}

/// Gradient of a scalar w.r.t. `u` given its gradient w.r.t. `resample_field(u, new_dims)`.
pub(crate) fn resample_field_adjoint(grad: &[f64], dims: Dims, new_dims: Dims) -> Vec<f64> {
    if dims == new_dims {
        return grad.to_vec();
    }
    let scale = rescale_factors(dims, new_dims);
    let mut g = grad.to_vec();
    for v in g.chunks_exact_mut(3) {
        for a in 0..3 {
            v[a] *= scale[a];
        }
    }
    resample_buffer_adjoint(&g, dims, 3, new_dims)
}

/// Trilinear resampling of features onto `new_dims` (values unchanged).
pub fn resample_features(f: &FeatureVolume, new_dims: Dims) -> Result<FeatureVolume> {
    if new_dims.iter().any(|&d| d == 0) {
        return Err(invalid(format!("new dims must be >= 1, got {new_dims:?}")));
    }
    if new_dims == f.dims {
        return Ok(f.clone());
    }
    let data = resample_buffer(&f.data, f.dims, f.channels, new_dims);
    FeatureVolume::new(new_dims, f.channels, rescaled_spacing(f.spacing, f.dims, new_dims), data)
}

#[inline]
fn axis_derivative(u: &DisplacementField, x: usize, y: usize, z: usize, axis: usize) -> [f64; 3] {
    let n = u.dims[axis];
    if n == 1 {
        return [0.0; 3];
    }
    let c = [x, y, z];
    let i = c[axis];
    let (lo, hi, h) = if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 2.0)
    };
    let mut a = c;
    a[axis] = lo;
    let mut b = c;
    b[axis] = hi;
    let ua = u.at(a[0], a[1], a[2]);
    let ub = u.at(b[0], b[1], b[2]);
    [(ub[0] - ua[0]) / h, (ub[1] - ua[1]) / h, (ub[2] - ua[2]) / h]
}

/// `det(I + grad u)` at every voxel: central differences in the interior,
/// one-sided at the boundary.
pub fn jacobian_determinant(u: &DisplacementField) -> Volume {
    let dims = u.dims;
    let mut out = vec![0.0; voxel_count(dims)];
    out.par_chunks_mut(dims[0] * dims[1]).enumerate().for_each(|(z, slab)| {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                // Column a holds d u / d x_a.
                let gx = axis_derivative(u, x, y, z, 0);
                let gy = axis_derivative(u, x, y, z, 1);
                let gz = axis_derivative(u, x, y, z, 2);
                let m = [
                    [1.0 + gx[0], gy[0], gz[0]],
                    [gx[1], 1.0 + gy[1], gz[1]],
                    [gx[2], gy[2], 1.0 + gz[2]],
                ];
                slab[x + dims[0] * y] = det3(&m);
            }
        }
    });
    Volume { dims, spacing: u.spacing, data: out }
}

#[inline]
pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// True when every coordinate is at least one voxel away from the border.
#[inline]
pub fn is_interior(dims: Dims, x: usize, y: usize, z: usize) -> bool {
    let ok = |c: usize, n: usize| c >= 1 && c + 1 < n;
    ok(x, dims[0]) && ok(y, dims[1]) && ok(z, dims[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    const ISO: Spacing = [1.0, 1.0, 1.0];

    fn ramp(dims: Dims) -> Volume {
        Volume::from_fn(dims, ISO, |x, y, z| (x * 7 + y * 13 + z * 29) as f64 % 11.0).unwrap()
    }

    #[test]
    fn integer_point_returns_stored_value() {
        let mut v = Volume::filled([4, 5, 6], ISO, 0.0).unwrap();
        v.set(1, 2, 3, 7.0);
        assert_eq!(v.sample([1.0, 2.0, 3.0]).unwrap(), 7.0);
    }

    #[test]
    fn linear_along_x() {
        let v = Volume::from_fn([2, 1, 1], ISO, |x, _, _| 10.0 * x as f64).unwrap();
        assert_eq!(v.sample([0.25, 0.0, 0.0]).unwrap(), 2.5);
    }

    #[test]
    fn cube_center_is_corner_average() {
        let v = Volume::new([2, 2, 2], ISO, (0..8).map(f64::from).collect()).unwrap();
        // (1-t)^3 expansion at t = 0.5 weights every corner by 1/8.
        let expected = (0..8).map(|c| c as f64 / 8.0).sum::<f64>();
        assert_eq!(expected, 3.5);
        assert!((v.sample([0.5, 0.5, 0.5]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_point_is_rejected() {
        let v = ramp([3, 3, 3]);
        assert!(matches!(v.sample([f64::NAN, 0.0, 0.0]), Err(Error::InvalidCoordinate)));
        assert!(trilinear_sample(&v, [0.0, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn out_of_grid_clamps_to_border() {
        let v = ramp([4, 4, 4]);
        assert_eq!(v.sample([-3.0, 1.0, 2.0]).unwrap(), v.get(0, 1, 2));
        assert_eq!(v.sample([9.5, 3.0, 0.0]).unwrap(), v.get(3, 3, 0));
    }

    #[test]
    fn zero_field_warp_is_identity() {
        let v = ramp([5, 6, 7]);
        let u = DisplacementField::zeros(v.dims(), ISO).unwrap();
        assert_eq!(warp_volume(&v, &u, Interpolation::Trilinear).unwrap(), v);
        assert_eq!(warp_volume(&v, &u, Interpolation::Nearest).unwrap(), v);
    }

    #[test]
    fn shifted_pair_is_recovered_on_interior() {
        let f = |x: f64, y: f64, z: f64| (0.3 * x).sin() + 0.1 * y * y - 0.2 * z;
        let dims = [12, 6, 6];
        let moving = Volume::from_fn(dims, ISO, |x, y, z| f(x as f64 - 2.0, y as f64, z as f64)).unwrap();
        let u = DisplacementField::constant(dims, ISO, [2.0, 0.0, 0.0]).unwrap();
        let w = warp_volume(&moving, &u, Interpolation::Trilinear).unwrap();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] - 2 {
                    assert!((w.get(x, y, z) - f(x as f64, y as f64, z as f64)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn nearest_warp_preserves_mask_values() {
        let dims = [8, 8, 8];
        let mask = Volume::from_fn(dims, ISO, |x, y, _| if x + y > 7 { 1.0 } else { 0.0 }).unwrap();
        let u = DisplacementField::from_fn(dims, ISO, |x, y, z| {
            [0.37 * (y as f64).sin(), 0.61 * (z as f64 * 0.5).cos(), 0.13 * x as f64]
        })
        .unwrap();
        let w = warp_volume(&mask, &u, Interpolation::Nearest).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn compose_identity_and_constants() {
        let dims = [6, 5, 4];
        let u = DisplacementField::from_fn(dims, ISO, |x, y, z| [x as f64 * 0.1, y as f64, -(z as f64)]).unwrap();
        let zero = DisplacementField::zeros(dims, ISO).unwrap();
        assert_eq!(compose(&zero, &u).unwrap(), u);
        assert_eq!(compose(&u, &zero).unwrap(), u);
        let a = DisplacementField::constant(dims, ISO, [1.0, 0.0, 0.0]).unwrap();
        let b = DisplacementField::constant(dims, ISO, [0.0, 2.0, 0.0]).unwrap();
        let c = compose(&a, &b).unwrap();
        assert!(c.data().chunks(3).all(|v| v == [1.0, 2.0, 0.0]));
    }

    #[test]
    fn compose_samples_inner_at_moved_point() {
        let dims = [10, 4, 4];
        let outer = DisplacementField::constant(dims, ISO, [1.0, 0.0, 0.0]).unwrap();
        let inner = DisplacementField::from_fn(dims, ISO, |x, _, _| [x as f64, 0.0, 0.0]).unwrap();
        let c = compose(&outer, &inner).unwrap();
        for x in 0..dims[0] - 1 {
            assert!((c.at(x, 1, 1)[0] - (x as f64 + 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_rejects_mismatched_dims() {
        let a = DisplacementField::zeros([3, 3, 3], ISO).unwrap();
        let b = DisplacementField::zeros([3, 3, 4], ISO).unwrap();
        assert!(matches!(compose(&a, &b), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn compose_is_associative_for_constants() {
        let dims = [5, 5, 5];
        let a = DisplacementField::constant(dims, ISO, [0.5, -0.25, 1.0]).unwrap();
        let b = DisplacementField::constant(dims, ISO, [0.1, 0.2, -0.3]).unwrap();
        let c = DisplacementField::constant(dims, ISO, [-0.7, 0.0, 0.4]).unwrap();
        let l = compose(&compose(&a, &b).unwrap(), &c).unwrap();
        let r = compose(&a, &compose(&b, &c).unwrap()).unwrap();
        for (x, y) in l.data().iter().zip(r.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_same_dims_is_identity() {
        let u = DisplacementField::from_fn([4, 5, 6], ISO, |x, y, z| [x as f64, 0.5 * y as f64, z as f64 * 0.1]).unwrap();
        assert_eq!(resample_field(&u, [4, 5, 6]).unwrap(), u);
    }

    #[test]
    fn resample_rescales_constant_field() {
        let u = DisplacementField::constant([8, 8, 8], ISO, [2.0, 0.0, 0.0]).unwrap();
        let r = resample_field(&u, [15, 15, 15]).unwrap();
        let expected = (15.0 - 1.0) / (8.0 - 1.0) * 2.0;
        assert_eq!(expected, 4.0);
        assert!(r.data().chunks(3).all(|v| (v[0] - 4.0).abs() < 1e-12 && v[1] == 0.0));
        assert!((r.spacing()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resample_degenerate_axis_keeps_scale() {
        let u = DisplacementField::constant([1, 4, 4], ISO, [3.0, 1.0, 1.0]).unwrap();
        let r = resample_field(&u, [1, 7, 7]).unwrap();
        assert!(r.data().chunks(3).all(|v| (v[0] - 3.0).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12));
    }

    #[test]
    fn resample_adjoint_matches_dot_product() {
        let dims = [4, 3, 5];
        let new_dims = [7, 6, 9];
        let src: Vec<f64> = (0..voxel_count(dims) * 3).map(|i| ((i * 37) % 17) as f64 - 8.0).collect();
        let g: Vec<f64> = (0..voxel_count(new_dims) * 3).map(|i| ((i * 11) % 13) as f64 * 0.1).collect();
        let u = DisplacementField::new(dims, ISO, src.clone()).unwrap();
        let fwd = resample_field(&u, new_dims).unwrap();
        let lhs: f64 = fwd.data().iter().zip(&g).map(|(a, b)| a * b).sum();
        let adj = resample_field_adjoint(&g, dims, new_dims);
        let rhs: f64 = src.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn jacobian_of_zero_and_linear_fields() {
        let dims = [5, 5, 5];
        let zero = DisplacementField::zeros(dims, ISO).unwrap();
        assert!(jacobian_determinant(&zero).data().iter().all(|&d| d == 1.0));
        let u = DisplacementField::from_fn(dims, ISO, |x, _, _| [0.5 * x as f64, 0.0, 0.0]).unwrap();
        let j = jacobian_determinant(&u);
        assert!(j.data().iter().all(|&d| (d - 1.5).abs() < 1e-12));
    }

    #[test]
    fn jacobian_of_affine_field_is_det_of_i_plus_a() {
        let a = [[0.1, -0.3, 0.05], [0.2, 0.15, -0.1], [-0.05, 0.4, -0.2]];
        let dims = [6, 7, 5];
        let u = DisplacementField::from_fn(dims, ISO, |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            let mut v = [0.3, -1.0, 2.0];
            for r in 0..3 {
                for c in 0..3 {
                    v[r] += a[r][c] * p[c];
                }
            }
            v
        })
        .unwrap();
        let mut m = a;
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += 1.0;
        }
        let expected = det3(&m);
        let j = jacobian_determinant(&u);
        for z in 1..dims[2] - 1 {
            for y in 1..dims[1] - 1 {
                for x in 1..dims[0] - 1 {
                    assert!((j.get(x, y, z) - expected).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn jacobian_detects_slab_fold() {
        // u_x = -2x for x >= 4: analytic 1 + du_x/dx = -1 inside the slab.
        let dims = [10, 5, 5];
        let u = DisplacementField::from_fn(dims, ISO, |x, _, _| {
            let xf = x as f64;
            [if x >= 4 { -2.0 * (xf - 4.0) } else { 0.0 }, 0.0, 0.0]
        })
        .unwrap();
        let j = jacobian_determinant(&u);
        for x in 1..dims[0] - 1 {
            let analytic_left = if x >= 5 { -1.0 } else { 1.0 };
            let d = j.get(x, 2, 2);
            if x == 4 {
                // The central difference straddles the kink.
                assert_eq!(d, 0.0);
            } else {
                assert_eq!(d, analytic_left);
            }
        }
    }
}
