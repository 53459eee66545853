//! 12-channel MIND descriptors over the self-similarity-context neighbourhood.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{linear_index, voxel_count, Dims, FeatureVolume, Volume};

pub const MIND_CHANNELS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MindConfig {
    /// Patch radius for the patch SSD (0 compares single voxels).
    pub radius: usize,
    /// Distance of the six neighbourhood offsets from the centre voxel.
    pub dilation: usize,
    /// Variance floor relative to the squared intensity range of the volume.
    pub epsilon: f64,
}

impl Default for MindConfig {
    fn default() -> Self {
        MindConfig { radius: 0, dilation: 2, epsilon: 1e-6 }
    }
}

impl MindConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation < 1 {
            return Err(invalid("MIND dilation must be >= 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("MIND epsilon must be > 0"));
        }
        Ok(())
    }
}

/// The twelve offset pairs: every pair of six-neighbourhood offsets that are
/// not opposite each other.
pub fn offset_pairs(dilation: usize) -> [([isize; 3], [isize; 3]); MIND_CHANNELS] {
    let d = dilation as isize;
    let six = [[d, 0, 0], [-d, 0, 0], [0, d, 0], [0, -d, 0], [0, 0, d], [0, 0, -d]];
    let mut pairs = [([0; 3], [0; 3]); MIND_CHANNELS];
    let mut k = 0;
    for i in 0..6 {
        for j in i + 1..6 {
            let opposite = (0..3).all(|a| six[i][a] == -six[j][a]);
            if !opposite {
                pairs[k] = (six[i], six[j]);
                k += 1;
            }
        }
    }
    debug_assert_eq!(k, MIND_CHANNELS);
    pairs
}

#[inline]
fn clamped(c: usize, off: isize, n: usize) -> usize {
    (c as isize + off).clamp(0, n as isize - 1) as usize
}

/// In-place box sum of radius `r` along `axis` with border replication.
fn box_sum_axis(buf: &mut [f64], dims: Dims, axis: usize, r: usize) {
    let n = dims[axis];
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut line = vec![0.0; n];
    let r = r as isize;
    for start in 0..voxel_count(dims) {
        let c = crate::grid::unravel(dims, start);
        if c[axis] != 0 {
            continue;
        }
        for (i, v) in line.iter_mut().enumerate() {
            *v = buf[start + i * stride];
        }
        let at = |i: isize| line[i.clamp(0, n as isize - 1) as usize];
        let mut acc: f64 = (-r..=r).map(at).sum();
        for i in 0..n as isize {
            buf[start + i as usize * stride] = acc;
            acc += at(i + r + 1) - at(i - r);
        }
    }
}

/// Extract the 12-channel descriptor volume.
///
/// Each channel is `exp(-D_k / V)` where `D_k` is the patch SSD between the
/// two offsets of pair `k` and `V` is the mean of the twelve distances,
/// floored at `epsilon * range^2`. Every voxel is then divided by its largest
/// channel, so values lie in `(0, 1]`.
pub fn extract_mind(vol: &Volume, cfg: &MindConfig) -> Result<FeatureVolume> {
    cfg.validate()?;
    let dims = vol.dims();
    let reach = 2 * (cfg.radius + cfg.dilation);
    if dims.iter().any(|&n| n <= reach) {
        return Err(Error::MindTooSmall);
    }
    let (lo, hi) = vol.range();
    let floor = (cfg.epsilon * (hi - lo) * (hi - lo)).max(f64::MIN_POSITIVE);
    let data = vol.data();
    let n = voxel_count(dims);

    let mut dist = vec![0.0; n * MIND_CHANNELS];
    let mut plane = vec![0.0; n];
    for (k, (a, b)) in offset_pairs(cfg.dilation).iter().enumerate() {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let pa = linear_index(
                        dims,
                        clamped(x, a[0], dims[0]),
                        clamped(y, a[1], dims[1]),
                        clamped(z, a[2], dims[2]),
                    );
                    let pb = linear_index(
                        dims,
                        clamped(x, b[0], dims[0]),
                        clamped(y, b[1], dims[1]),
                        clamped(z, b[2], dims[2]),
                    );
                    let d = data[pa] - data[pb];
                    plane[linear_index(dims, x, y, z)] = d * d;
                }
            }
        }
        if cfg.radius > 0 {
            for axis in 0..3 {
                box_sum_axis(&mut plane, dims, axis, cfg.radius);
            }
        }
        for (i, &v) in plane.iter().enumerate() {
            dist[i * MIND_CHANNELS + k] = v;
        }
    }

    for voxel in dist.chunks_exact_mut(MIND_CHANNELS) {
        let var = (voxel.iter().sum::<f64>() / MIND_CHANNELS as f64).max(floor);
        let mut top = 0.0f64;
        for v in voxel.iter_mut() {
            *v = (-*v / var).exp();
            top = top.max(*v);
        }
        for v in voxel.iter_mut() {
            *v /= top;
        }
    }
    FeatureVolume::new(dims, MIND_CHANNELS, vol.spacing(), dist)
}
