//! Synthetic registration pairs with known ground truth, plus a brute-force
//! matcher used to check the convex optimizer.
//!
//! The fixed image is an analytic texture. The moving image is built so that
//! `moving(x + u(x)) == fixed(x)` by inverting `y = x + u(x)` with a
//! fixed-point iteration and evaluating the texture analytically.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::grid::{linear_index, rescale_factors, unravel, voxel_count, Dims, DisplacementField, FeatureVolume, Spacing, Volume};
use crate::io::{self, Frame, Kind, LandmarkSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    #[default]
    Blobs,
    Bands,
    Checker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub seed: u64,
    pub texture: Texture,
    /// Bound on the displacement magnitude in voxels.
    pub warp_amplitude: f64,
    /// Cycles per volume extent.
    pub warp_frequency: f64,
    /// Sinusoids summed per displacement component.
    pub warp_terms: usize,
    pub n_landmarks: usize,
    pub embed_dim: usize,
    /// In-plane coarsening of the mock embedding grid (z is kept).
    pub embed_coarsen: [usize; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dims: [48, 48, 48],
            spacing_mm: [1.0; 3],
            seed: 0,
            texture: Texture::Blobs,
            warp_amplitude: 5.0,
            warp_frequency: 1.0,
            warp_terms: 1,
            n_landmarks: 24,
            embed_dim: 32,
            embed_coarsen: [4, 4, 1],
        }
    }
}

/// Bound on the induced infinity norm of the warp Jacobian; below 1 the map
/// `x + u(x)` is invertible with positive determinant everywhere.
pub const JACOBIAN_BOUND: f64 = 0.9;

impl SynthSpec {
    pub fn jacobian_bound(&self) -> f64 {
        let n = *self.dims.iter().min().unwrap_or(&1) as f64;
        self.warp_amplitude.abs() / 3f64.sqrt() * std::f64::consts::TAU * self.warp_frequency.abs() / n
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n < 8) {
            return Err(invalid(format!("synth dims must be >= 8, got {:?}", self.dims)));
        }
        if self.jacobian_bound() > JACOBIAN_BOUND {
            return Err(invalid(format!(
                "warp amplitude {} at frequency {} may fold (bound {:.3} > {JACOBIAN_BOUND})",
                self.warp_amplitude,
                self.warp_frequency,
                self.jacobian_bound()
            )));
        }
        if self.warp_terms < 1 || self.embed_dim < 1 || self.embed_coarsen.iter().any(|&c| c < 1) {
            return Err(invalid("warp_terms, embed_dim and embed_coarsen must be >= 1"));
        }
        Ok(())
    }

    pub fn embed_dims(&self) -> Dims {
        [0, 1, 2].map(|a| (self.dims[a] / self.embed_coarsen[a]).max(1))
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Blob {
    c: [f64; 3],
    inv2s2: f64,
    cutoff2: f64,
    amp: f64,
}

/// Analytic intensity pattern faded to zero towards the border.
struct TextureFn {
    dims: Dims,
    kind: Texture,
    blobs: Vec<Blob>,
    waves: Vec<([f64; 3], f64, f64)>,
    period: f64,
}

impl TextureFn {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let dims = spec.dims;
        let n_blobs = (voxel_count(dims) / 1500).max(8);
        let margin = 4.0;
        let blobs = (0..n_blobs)
            .map(|_| {
                let c = [0, 1, 2].map(|a| {
                    let hi = dims[a] as f64 - 1.0 - margin;
                    if hi > margin {
                        rng.gen_range(margin..hi)
                    } else {
                        (dims[a] as f64 - 1.0) / 2.0
                    }
                });
                let s: f64 = rng.gen_range(2.0..3.5);
                Blob { c, inv2s2: 1.0 / (2.0 * s * s), cutoff2: (4.0 * s) * (4.0 * s), amp: rng.gen_range(0.5..1.0) }
            })
            .collect();
        let waves = (0..3)
            .map(|_| {
                let k = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
                (k, rng.gen_range(0.15..0.35), rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        TextureFn { dims, kind: spec.texture, blobs, waves, period: rng.gen_range(7.0..10.0) }
    }

    fn window(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let d = p[a].min(self.dims[a] as f64 - 1.0 - p[a]);
                smoothstep((d - 1.0) / 5.0)
            })
            .product()
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        let raw = match self.kind {
            Texture::Blobs => self
                .blobs
                .iter()
                .map(|b| {
                    let d2: f64 = (0..3).map(|a| (p[a] - b.c[a]).powi(2)).sum();
                    if d2 > b.cutoff2 {
                        0.0
                    } else {
                        b.amp * (-d2 * b.inv2s2).exp()
                    }
                })
                .sum(),
            Texture::Bands => {
                0.5 + self
                    .waves
                    .iter()
                    .map(|(k, f, ph)| (f * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) + ph).sin() / 6.0)
                    .sum::<f64>()
            }
            Texture::Checker => {
                let w = std::f64::consts::TAU / self.period;
                let s = (w * p[0]).sin() * (w * p[1]).sin() * (w * p[2]).sin();
                0.5 + 0.5 * (3.0 * s).tanh()
            }
        };
        raw * self.window(p)
    }
}

/// Each component is an independent sum of sinusoids
/// `u_a(x) = A / sqrt(3) sum_t w_t sin(2 pi f <k_at, x / n> + phi_at)`
/// with L1-normalized `k_at` and weights summing to one, so `|u| <= A`.
#[derive(Clone, Debug, PartialEq)]
pub struct SinusoidWarp {
    dims: Dims,
    amplitude: f64,
    frequency: f64,
    /// Per component: (wave vector, phase, weight).
    terms: [Vec<([f64; 3], f64, f64)>; 3],
}

fn l1_normalized(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [0, 1, 2].map(|_| StandardNormal.sample(&mut *rng));
        let n: f64 = v.iter().map(|x: &f64| x.abs()).sum();
        if n > 1e-3 {
            return v.map(|x| x / n);
        }
    }
}

impl SinusoidWarp {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let terms = [0, 1, 2].map(|_| {
            let raw: Vec<f64> = (0..spec.warp_terms).map(|_| rng.gen_range(0.5..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter()
                .map(|w| (l1_normalized(rng), rng.gen_range(0.0..std::f64::consts::TAU), w / total))
                .collect()
        });
        SinusoidWarp { dims: spec.dims, amplitude: spec.warp_amplitude, frequency: spec.warp_frequency, terms }
    }

    pub fn eval(&self, p: [f64; 3]) -> [f64; 3] {
        let a = self.amplitude / 3f64.sqrt();
        [0, 1, 2].map(|c| {
            self.terms[c]
                .iter()
                .map(|(k, phase, w)| {
                    let arg: f64 = (0..3).map(|b| k[b] * p[b] / self.dims[b] as f64).sum();
                    a * w * (std::f64::consts::TAU * self.frequency * arg + phase).sin()
                })
                .sum()
        })
    }

    /// Solve `x + u(x) = y` for `x`.
    pub fn invert(&self, y: [f64; 3]) -> [f64; 3] {
        let mut x = y;
        for _ in 0..200 {
            let u = self.eval(x);
            let next = [y[0] - u[0], y[1] - u[1], y[2] - u[2]];
            let step = (0..3).map(|a| (next[a] - x[a]).abs()).fold(0.0, f64::max);
            x = next;
            if step < 1e-9 {
                break;
            }
        }
        x
    }

    pub fn field(&self, spacing: Spacing) -> Result<DisplacementField> {
        DisplacementField::from_fn(self.dims, spacing, |x, y, z| self.eval([x as f64, y as f64, z as f64]))
    }
}

struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct SynthPair {
    pub fixed: Volume,
    pub moving: Volume,
    pub u_true: DisplacementField,
    pub landmarks_fixed: LandmarkSet,
    pub landmarks_moving: LandmarkSet,
    pub mask_fixed: Volume,
    pub mask_moving: Volume,
    pub gf_fixed: FeatureVolume,
    pub gf_moving: FeatureVolume,
}

fn grid_points(dims: Dims) -> Vec<[f64; 3]> {
    (0..voxel_count(dims)).map(|i| unravel(dims, i).map(|c| c as f64)).collect()
}

/// Generate a synthetic pair from a spec; every output is a deterministic
/// function of the spec.
pub fn make_pair(spec: &SynthSpec) -> Result<SynthPair> {
    spec.validate()?;
    let dims = spec.dims;
    let sp = spec.spacing_mm;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tex = TextureFn::new(spec, &mut rng);
    let warp = SinusoidWarp::new(spec, &mut rng);
    let ellipsoids: Vec<Ellipsoid> = (0..3)
        .map(|_| Ellipsoid {
            c: dims.map(|n| rng.gen_range(0.3 * n as f64..0.7 * n as f64)),
            r: dims.map(|n| rng.gen_range(0.12 * n as f64..0.25 * n as f64)),
        })
        .collect();
    let label = |p: [f64; 3]| {
        let mut l = 0.0;
        for (i, e) in ellipsoids.iter().enumerate() {
            let q: f64 = (0..3).map(|a| ((p[a] - e.c[a]) / e.r[a]).powi(2)).sum();
            if q <= 1.0 {
                l = (i + 1) as f64;
            }
        }
        l
    };

    let pts = grid_points(dims);
    let fixed_data: Vec<f64> = pts.par_iter().map(|&p| tex.eval(p)).collect();
    let sources: Vec<[f64; 3]> = pts.par_iter().map(|&y| warp.invert(y)).collect();
    let moving_data: Vec<f64> = sources.par_iter().map(|&x| tex.eval(x)).collect();
    let mask_fixed: Vec<f64> = pts.iter().map(|&p| label(p)).collect();
    let mask_moving: Vec<f64> = sources.iter().map(|&x| label(x)).collect();
    let fixed = Volume::new(dims, sp, fixed_data)?;
    let moving = Volume::new(dims, sp, moving_data)?;

    let margin = (spec.warp_amplitude.abs().ceil() as usize + 2).max(6);
    let lm_fix = landmark_maxima(&fixed, margin, spec.n_landmarks);
    let lm_mov = lm_fix
        .iter()
        .map(|&p| {
            let u = warp.eval(p);
            [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
        })
        .collect();

    let gf_fixed = mock_embeddings(&fixed, spec.embed_dim, spec.embed_dims(), spec.seed)?;
    let gf_moving = mock_embeddings(&moving, spec.embed_dim, spec.embed_dims(), spec.seed)?;
    Ok(SynthPair {
        u_true: warp.field(sp)?,
        fixed,
        moving,
        landmarks_fixed: LandmarkSet::new(lm_fix, Frame::Fixed),
        landmarks_moving: LandmarkSet::new(lm_mov, Frame::Moving),
        mask_fixed: Volume::new(dims, sp, mask_fixed)?,
        mask_moving: Volume::new(dims, sp, mask_moving)?,
        gf_fixed,
        gf_moving,
    })
}

/// Strict 26-neighbourhood maxima at least `margin` voxels from the border,
/// brightest first (ties by index), at most `count` of them.
pub fn landmark_maxima(v: &Volume, margin: usize, count: usize) -> Vec<[f64; 3]> {
    let d = v.dims();
    let mut found: Vec<(f64, usize)> = vec![];
    if d.iter().any(|&n| n <= 2 * margin) {
        return vec![];
    }
    for z in margin..d[2] - margin {
        for y in margin..d[1] - margin {
            for x in margin..d[0] - margin {
                let c = v.get(x, y, z);
                let mut is_max = c > 0.0;
                'scan: for dz in 0..3 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            if (dx, dy, dz) != (1, 1, 1) && v.get(x + dx - 1, y + dy - 1, z + dz - 1) >= c {
                                is_max = false;
                                break 'scan;
                            }
                        }
                    }
                }
                if is_max {
                    found.push((c, linear_index(d, x, y, z)));
                }
            }
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    found.into_iter().take(count).map(|(_, i)| unravel(d, i).map(|c| c as f64)).collect()
}

const STATS: usize = 8;

/// Deterministic stand-in for slice-wise foundation-model embeddings:
/// local intensity statistics around each coarse grid point, lifted to
/// `embed_dim` channels by a seeded random layer with a tanh.
pub fn mock_embeddings(v: &Volume, embed_dim: usize, grid: Dims, seed: u64) -> Result<FeatureVolume> {
    if embed_dim == 0 || grid.iter().any(|&g| g == 0) {
        return Err(invalid("embedding dim and grid must be >= 1"));
    }
    let dims = v.dims();
    if (0..3).any(|a| grid[a] > dims[a]) {
        return Err(mismatch(format!("embedding grid {grid:?} finer than volume {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xe3b);
    let scale = 1.5 / (STATS as f64).sqrt();
    let w: Vec<f64> = (0..embed_dim * STATS).map(|_| { let g: f64 = StandardNormal.sample(&mut rng); scale * g }).collect();
    let b: Vec<f64> = (0..embed_dim).map(|_| { let g: f64 = StandardNormal.sample(&mut rng); 0.3 * g }).collect();
    let centre = |a: usize, i: usize| -> usize {
        if grid[a] == 1 {
            (dims[a] - 1) / 2
        } else {
            ((i * (dims[a] - 1)) as f64 / (grid[a] - 1) as f64).round() as usize
        }
    };
    let at = |x: isize, y: isize, z: isize| {
        let c = |p: isize, n: usize| p.clamp(0, n as isize - 1) as usize;
        v.get(c(x, dims[0]), c(y, dims[1]), c(z, dims[2]))
    };
    let mut data = vec![0.0; voxel_count(grid) * embed_dim];
    data.par_chunks_mut(embed_dim).enumerate().for_each(|(gi, out)| {
        let g = unravel(grid, gi);
        let c = [centre(0, g[0]) as isize, centre(1, g[1]) as isize, centre(2, g[2]) as isize];
        let (mut sum, mut sq, mut hi, mut n) = (0.0, 0.0, f64::MIN, 0.0);
        let mut grad = [0.0; 3];
        let mut wide = 0.0;
        let mut wide_n = 0.0;
        for dz in -1..=1isize {
            for dy in -4..=4isize {
                for dx in -4..=4isize {
                    let (x, y, z) = (c[0] + dx, c[1] + dy, c[2] + dz);
                    let val = at(x, y, z);
                    wide += val;
                    wide_n += 1.0;
                    if dx.abs() <= 2 && dy.abs() <= 2 {
                        sum += val;
                        sq += val * val;
                        hi = f64::max(hi, val);
                        n += 1.0;
                        grad[0] += 0.5 * (at(x + 1, y, z) - at(x - 1, y, z));
                        grad[1] += 0.5 * (at(x, y + 1, z) - at(x, y - 1, z));
                        grad[2] += 0.5 * (at(x, y, z + 1) - at(x, y, z - 1));
                    }
                }
            }
        }
        let mean = sum / n;
        let s = [
            mean,
            (sq / n - mean * mean).max(0.0).sqrt(),
            grad[0] / n,
            grad[1] / n,
            grad[2] / n,
            wide / wide_n,
            at(c[0], c[1], c[2]),
            hi,
        ];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &w[k * STATS..(k + 1) * STATS];
            *o = (b[k] + row.iter().zip(&s).map(|(a, x)| a * x).sum::<f64>()).tanh();
        }
    });
    let f = rescale_factors(grid, dims);
    let sp = v.spacing();
    FeatureVolume::new(grid, embed_dim, [sp[0] * f[0], sp[1] * f[1], sp[2] * f[2]], data)
}

/// Largest instance [`brute_force_discrete_match`] accepts along any axis.
pub const BRUTE_FORCE_MAX: usize = 16;

/// Exhaustive per-control-point argmin of the convex data cost (no
/// coupling). Ties go to the smaller `|delta|^2`, then the lexicographically
/// smaller `(x, y, z)`. Returns a control-grid field in feature voxels.
pub fn brute_force_discrete_match(
    f_fix: &FeatureVolume,
    f_mov: &FeatureVolume,
    q: usize,
    step: usize,
    grid_spacing: usize,
) -> Result<DisplacementField> {
    let dims = f_fix.dims();
    if dims.iter().any(|&n| n > BRUTE_FORCE_MAX) {
        return Err(Error::TooLarge(format!("brute force is limited to {BRUTE_FORCE_MAX}^3, got {dims:?}")));
    }
    if f_mov.dims() != dims || f_mov.channels() != f_fix.channels() {
        return Err(mismatch("feature pair differs"));
    }
    let g = grid_spacing;
    if g < 1 || step < 1 || dims.iter().any(|&n| n < g) {
        return Err(invalid("invalid grid spacing or step for this instance"));
    }
    let ch = f_fix.channels();
    let axis_cells = |n: usize| -> Vec<Vec<usize>> {
        let m = (n / g).max(1);
        (0..m)
            .map(|i| {
                let c = if m == 1 { (n - 1) / 2 } else { ((i * (n - 1)) as f64 / (m - 1) as f64).round() as usize };
                (0..g).map(|j| (c as isize - (g / 2) as isize + j as isize).clamp(0, n as isize - 1) as usize).collect()
            })
            .collect()
    };
    let cells = [axis_cells(dims[0]), axis_cells(dims[1]), axis_cells(dims[2])];
    let grid = [cells[0].len(), cells[1].len(), cells[2].len()];
    let qi = q as i32;
    let vals: Vec<i32> = (-qi..=qi).step_by(step).collect();
    let key = |d: [i32; 3]| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], d[0], d[1], d[2]);
    let mut out = vec![0.0; voxel_count(grid) * 3];
    for p in 0..voxel_count(grid) {
        let [i, j, k] = unravel(grid, p);
        let mut best: Option<(f64, [i32; 3])> = None;
        for &dx in &vals {
            for &dy in &vals {
                for &dz in &vals {
                    let d = [dx, dy, dz];
                    let mut acc = 0.0;
                    for &z in &cells[2][k] {
                        for &y in &cells[1][j] {
                            for &x in &cells[0][i] {
                                let m = [x, y, z].map(|c| c as i64);
                                let mx = (m[0] + dx as i64).clamp(0, dims[0] as i64 - 1) as usize;
                                let my = (m[1] + dy as i64).clamp(0, dims[1] as i64 - 1) as usize;
                                let mz = (m[2] + dz as i64).clamp(0, dims[2] as i64 - 1) as usize;
                                let a = f_fix.voxel(x, y, z);
                                let b = f_mov.voxel(mx, my, mz);
                                let mut s = 0.0;
                                for c in 0..ch {
                                    let e = a[c] - b[c];
                                    s += e * e;
                                }
                                acc += s;
                            }
                        }
                    }
                    let cost = acc / (g * g * g * ch) as f64;
                    let better = match best {
                        None => true,
                        Some((bc, bd)) => cost < bc || (cost == bc && key(d) < key(bd)),
                    };
                    if better {
                        best = Some((cost, d));
                    }
                }
            }
        }
        let d = best.map(|b| b.1).unwrap_or([0; 3]);
        for a in 0..3 {
            out[p * 3 + a] = d[a] as f64;
        }
    }
    DisplacementField::new(grid, [1.0; 3], out)
}

/// `u_x = -2 (x - split)` for `x >= split`, zero elsewhere, together with
/// the percentage of interior voxels it folds (`x >= split`).
pub fn half_fold_field(dims: Dims, split: usize) -> Result<(DisplacementField, f64)> {
    let u = DisplacementField::from_fn(dims, [1.0; 3], |x, _, _| {
        [if x >= split { -2.0 * (x - split) as f64 } else { 0.0 }, 0.0, 0.0]
    })?;
    let interior = dims[0].saturating_sub(2);
    let folded = (1..dims[0].saturating_sub(1)).filter(|&x| x >= split).count();
    let pct = if interior == 0 { 0.0 } else { 100.0 * folded as f64 / interior as f64 };
    Ok((u, pct))
}

/// File names inside a synth bundle directory.
pub mod bundle {
    pub const MANIFEST: &str = "manifest.json";
    pub const FIXED: &str = "fixed.gvol";
    pub const MOVING: &str = "moving.gvol";
    pub const U_TRUE: &str = "u_true.gvol";
    pub const LANDMARKS_FIXED: &str = "landmarks_fixed.csv";
    pub const LANDMARKS_MOVING: &str = "landmarks_moving.csv";
    pub const MASK_FIXED: &str = "mask_fixed.gvol";
    pub const MASK_MOVING: &str = "mask_moving.gvol";
    pub const GF_FIXED: &str = "gf_fixed.gvol";
    pub const GF_MOVING: &str = "gf_moving.gvol";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub spec: SynthSpec,
    pub files: std::collections::BTreeMap<String, String>,
}

/// Write every part of a pair plus a manifest into `dir`.
pub fn write_bundle(dir: impl AsRef<Path>, spec: &SynthSpec, pair: &SynthPair) -> Result<PathBuf> {
    use bundle::*;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    io::write_volume(dir.join(FIXED), &pair.fixed, Kind::Intensity)?;
    io::write_volume(dir.join(MOVING), &pair.moving, Kind::Intensity)?;
    io::write_field(dir.join(U_TRUE), &pair.u_true)?;
    pair.landmarks_fixed.write(dir.join(LANDMARKS_FIXED))?;
    pair.landmarks_moving.write(dir.join(LANDMARKS_MOVING))?;
    io::write_volume(dir.join(MASK_FIXED), &pair.mask_fixed, Kind::Mask)?;
    io::write_volume(dir.join(MASK_MOVING), &pair.mask_moving, Kind::Mask)?;
    io::write_features(dir.join(GF_FIXED), &pair.gf_fixed)?;
    io::write_features(dir.join(GF_MOVING), &pair.gf_moving)?;
    let files = [
        ("fixed", FIXED),
        ("moving", MOVING),
        ("u_true", U_TRUE),
        ("landmarks_fixed", LANDMARKS_FIXED),
        ("landmarks_moving", LANDMARKS_MOVING),
        ("mask_fixed", MASK_FIXED),
        ("mask_moving", MASK_MOVING),
        ("gf_fixed", GF_FIXED),
        ("gf_moving", GF_MOVING),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let manifest = BundleManifest { spec: spec.clone(), files };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
