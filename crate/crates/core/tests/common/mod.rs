#![allow(dead_code)]

use glide::dimred::{vae_backward, vae_forward, vae_loss, Block, VaeParams, VaeShape};
use glide::grid::{DisplacementField, FeatureVolume};
use glide::instance_opt::{bending_energy, fused_loss, FeaturePair, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

/// Relative error between two gradient vectors, measured on their norms.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let fp = f(&x);
            x[i] = x0 - h;
            let fm = f(&x);
            x[i] = x0;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// One seeded VAE case: analytic gradient of loss + <upstream, mu> against
/// central differences with step 1e-4. Returns the worst relative error over
/// the parameter blocks.
pub fn vae_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = VaeShape { d_in: 8, hidden: 6, latent: 3 };
    let p = VaeParams::init(shape, seed);
    let mut p = p;
    for v in p.data_mut() {
        *v += r.gen_range(-0.05..0.05);
    }
    let x = uniform(&mut r, 8, 1.0);
    let eps = uniform(&mut r, 3, 1.0);
    let up = uniform(&mut r, 3, 1.0);
    let (d1, d2) = (r.gen_range(0.5..5.0), r.gen_range(0.1..2.0));
    let g = vae_backward(&p, &x, &eps, &up, d1, d2).unwrap();
    let numeric = central_diff(p.data(), 1e-4, |theta| {
        let q = VaeParams::from_data(shape, theta.to_vec()).unwrap();
        let fw = vae_forward(&q, &x, &eps).unwrap();
        vae_loss(&x, &fw.recon, &fw.mu, &fw.logvar, d1, d2) + fw.mu.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
    });
    Block::ALL
        .iter()
        .map(|&b| {
            let (o, n) = (shape.offset(b), shape.block_len(b));
            rel_err(&g.data()[o..o + n], &numeric[o..o + n])
        })
        .fold(0.0, f64::max)
}

pub fn bending_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dims = [4 + (seed % 3) as usize, 5, 4 + (seed % 2) as usize];
    let data = uniform(&mut r, dims.iter().product::<usize>() * 3, 2.0);
    let u = DisplacementField::new(dims, [1.0; 3], data.clone()).unwrap();
    let (_, g) = bending_energy(&u);
    let numeric = central_diff(&data, 1e-5, |d| {
        bending_energy(&DisplacementField::new(dims, [1.0; 3], d.to_vec()).unwrap()).0
    });
    rel_err(&g, &numeric)
}

/// Smooth random features: a few sinusoids per channel.
pub fn smooth_features(r: &mut ChaCha8Rng, dims: [usize; 3], ch: usize) -> FeatureVolume {
    let waves: Vec<([f64; 3], f64)> =
        (0..ch).map(|_| ([0, 1, 2].map(|_| r.gen_range(0.2..0.9)), r.gen_range(0.0..std::f64::consts::TAU))).collect();
    let mut data = Vec::with_capacity(dims.iter().product::<usize>() * ch);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                for (k, ph) in &waves {
                    data.push((k[0] * x as f64 + k[1] * y as f64 + k[2] * z as f64 + ph).sin());
                }
            }
        }
    }
    FeatureVolume::new(dims, ch, [1.0; 3], data).unwrap()
}

fn fused_setup(r: &mut ChaCha8Rng) -> ([FeatureVolume; 4], LossWeights) {
    let work = [12; 3];
    let f = [
        smooth_features(r, work, 3),
        smooth_features(r, work, 3),
        smooth_features(r, work, 4),
        smooth_features(r, work, 4),
    ];
    let w = LossWeights { alpha: r.gen_range(0.1..1.0), beta: r.gen_range(0.5..4.0), lambda: r.gen_range(0.1..2.0) };
    (f, w)
}

/// Relative error of `grad_u` against central differences on the listed
/// components (all of them when `picks` is `None`).
fn fused_error(
    f: &[FeatureVolume; 4],
    w: LossWeights,
    pdims: [usize; 3],
    data: &[f64],
    h: f64,
    picks: Option<Vec<usize>>,
) -> f64 {
    let eval = |d: &[f64]| {
        let u = DisplacementField::new(pdims, [1.0; 3], d.to_vec()).unwrap();
        fused_loss(Some(FeaturePair::new(&f[0], &f[1])), Some(FeaturePair::new(&f[2], &f[3])), &u, w, false).unwrap()
    };
    let analytic = eval(data).grad_u;
    let picks = picks.unwrap_or_else(|| (0..data.len()).collect());
    let mut x = data.to_vec();
    let numeric: Vec<f64> = picks
        .iter()
        .map(|&i| {
            x[i] = data[i] + h;
            let fp = eval(&x).total;
            x[i] = data[i] - h;
            let fm = eval(&x).total;
            x[i] = data[i];
            (fp - fm) / (2.0 * h)
        })
        .collect();
    let analytic: Vec<f64> = picks.iter().map(|&i| analytic[i]).collect();
    rel_err(&analytic, &numeric)
}

/// Fused loss on a 12^3 grid, displacement parameters on the same grid;
/// 240 randomly drawn components are each perturbed by 1e-3.
///
/// Trilinear sampling is only piecewise linear, so displacements are drawn
/// to keep every sampled position at least 0.05 voxel from a cell face (and
/// inside the grid); a 1e-3 step then never crosses a kink.
pub fn fused_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (f, w) = fused_setup(&mut r);
    let n = 12usize;
    let mut data = Vec::with_capacity(n * n * n * 3);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                for p in [x, y, z] {
                    let lo = p.saturating_sub(2) as f64;
                    let hi = (p + 2).min(n - 1) as f64;
                    let cell = r.gen_range(lo as usize..hi as usize) as f64;
                    data.push(cell + r.gen_range(0.05..0.95) - p as f64);
                }
            }
        }
    }
    let picks = (0..240).map(|_| r.gen_range(0..data.len())).collect();
    fused_error(&f, w, [n; 3], &data, 1e-3, Some(picks))
}

/// Same loss with a 6^3 parameter grid resampled to the 12^3 working grid,
/// checking the chain through the resampling with a step small enough that
/// crossing a cell face is rare.
pub fn fused_resampled_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (f, w) = fused_setup(&mut r);
    let data = uniform(&mut r, 6 * 6 * 6 * 3, 1.5);
    fused_error(&f, w, [6; 3], &data, 1e-6, None)
}
