//! Shared-basis PCA over the pooled voxels of a feature pair.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, mismatch, Result};
use crate::grid::FeatureVolume;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `k` rows of length `d`, unit norm, by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Set when the pooled samples have (numerically) zero variance; the
    /// projections are then all zero.
    pub degenerate: bool,
}

impl PcaBasis {
    pub fn project(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.iter().zip(x).zip(&self.mean).map(|((w, v), m)| w * (v - m)).sum();
        }
    }

    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (coef, c) in y.iter().zip(&self.components) {
            for (xi, ci) in x.iter_mut().zip(c) {
                *xi += coef * ci;
            }
        }
        x
    }
}

/// Fit the top-`k` principal axes of the rows of `samples` (row length `d`).
pub fn fit_pca(samples: &[f64], d: usize, k: usize) -> Result<PcaBasis> {
    if d == 0 || samples.len() % d != 0 || samples.is_empty() {
        return Err(mismatch(format!("{} values do not form rows of {d}", samples.len())));
    }
    if k == 0 || k > d {
        return Err(invalid(format!("PCA needs 1 <= k <= d, got k={k}, d={d}")));
    }
    let n = samples.len() / d;
    let mut mean = vec![0.0; d];
    for row in samples.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0; d * d];
    let mut c = vec![0.0; d];
    for row in samples.chunks_exact(d) {
        for i in 0..d {
            c[i] = row[i] - mean[i];
        }
        for i in 0..d {
            let ci = c[i];
            let dst = &mut cov[i * d..i * d + i + 1];
            for (o, cj) in dst.iter_mut().zip(&c[..=i]) {
                *o += ci * cj;
            }
        }
    }
    let cov = DMatrix::from_fn(d, d, |i, j| {
        let (a, b) = if i >= j { (i, j) } else { (j, i) };
        cov[a * d + b] / n as f64
    });
    let trace: f64 = (0..d).map(|i| cov[(i, i)]).sum();
    let scale = mean.iter().map(|m| m * m).sum::<f64>().max(1.0);
    if !(trace > 1e-20 * scale) {
        return Ok(PcaBasis {
            mean,
            components: (0..k).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect(),
            eigenvalues: vec![0.0; k],
            degenerate: true,
        });
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        eigenvalues.push(eig.eigenvalues[i].max(0.0));
    }
    Ok(PcaBasis { mean, components, eigenvalues, degenerate: false })
}

fn project_volume(basis: &PcaBasis, f: &FeatureVolume) -> Result<FeatureVolume> {
    let k = basis.components.len();
    let d = f.channels();
    let mut out = vec![0.0; f.data().len() / d * k];
    if !basis.degenerate {
        for (o, x) in out.chunks_exact_mut(k).zip(f.data().chunks_exact(d)) {
            basis.project(x, o);
        }
    }
    FeatureVolume::new(f.dims(), k, f.spacing(), out)
}

/// Project both volumes onto the top-`k` axes of their pooled voxels.
pub fn pca_reduce(
    f_fix: &FeatureVolume,
    f_mov: &FeatureVolume,
    k: usize,
) -> Result<(FeatureVolume, FeatureVolume, PcaBasis)> {
    if f_fix.channels() != f_mov.channels() {
        return Err(mismatch(format!("channel counts differ: {} vs {}", f_fix.channels(), f_mov.channels())));
    }
    let d = f_fix.channels();
    if k > d {
        return Err(invalid(format!("cannot keep {k} components of {d} channels")));
    }
    let mut pooled = Vec::with_capacity(f_fix.data().len() + f_mov.data().len());
    pooled.extend_from_slice(f_fix.data());
    pooled.extend_from_slice(f_mov.data());
    let basis = fit_pca(&pooled, d, k)?;
    if basis.degenerate {
        log::warn!("PCA input has zero variance; projections are zero");
    }
    Ok((project_volume(&basis, f_fix)?, project_volume(&basis, f_mov)?, basis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn feats(n: usize, d: usize, data: Vec<f64>) -> FeatureVolume {
        FeatureVolume::new([n, 1, 1], d, [1.0; 3], data).unwrap()
    }

    #[test]
    fn rank_k_data_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, k, n) = (10, 3, 200);
        let basis: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| gauss(&mut rng)).collect()).collect();
        let offset: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        let mut data = vec![];
        for _ in 0..n {
            let coef: Vec<f64> = (0..k).map(|_| gauss(&mut rng)).collect();
            for j in 0..d {
                data.push(offset[j] + (0..k).map(|i| coef[i] * basis[i][j]).sum::<f64>());
            }
        }
        let f = feats(n, d, data.clone());
        let (a, _, b) = pca_reduce(&f, &f, k).unwrap();
        for (row, y) in data.chunks_exact(d).zip(a.data().chunks_exact(k)) {
            for (p, q) in row.iter().zip(b.reconstruct(y)) {
                assert!((p - q).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn full_basis_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, n) = (6, 300);
        let data: Vec<f64> = (0..n * d).map(|_| gauss(&mut rng)).collect();
        let f = feats(n, d, data.clone());
        let (a, _, _) = pca_reduce(&f, &f, d).unwrap();
        for (i, j) in [(0, 1), (5, 200), (17, 299)] {
            let dist = |v: &[f64], w: usize| {
                (0..w).map(|c| (v[i * w + c] - v[j * w + c]).powi(2)).sum::<f64>().sqrt()
            };
            assert!((dist(&data, d) - dist(a.data(), d)).abs() < 1e-6);
        }
    }

    #[test]
    fn first_component_separates_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, n) = (8, 200);
        let dir: Vec<f64> = (0..d).map(|j| if j % 2 == 0 { 1.0 } else { -0.5 }).collect();
        let mut data = vec![];
        for s in 0..n {
            let sign = if s < n / 2 { -1.0 } else { 1.0 };
            for j in 0..d {
                data.push(sign * 10.0 * dir[j] + 0.3 * gauss(&mut rng));
            }
        }
        let f = feats(n, d, data);
        let (a, _, _) = pca_reduce(&f, &f, 1).unwrap();
        let p = a.data();
        let stats = |s: &[f64]| {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            (m, (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.len() as f64).sqrt())
        };
        let (m1, s1) = stats(&p[..n / 2]);
        let (m2, s2) = stats(&p[n / 2..]);
        assert!((m1 - m2).abs() > 5.0 * s1.max(s2));
    }

    #[test]
    fn sign_convention_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..500 * 5).map(|i| gauss(&mut rng) * (1.0 + (i % 5) as f64)).collect();
        let b = fit_pca(&data, 5, 5).unwrap();
        for w in b.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for c in &b.components {
            let lead = c.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn invariant_to_sample_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let data: Vec<f64> = (0..100 * d).map(|_| gauss(&mut rng)).collect();
        let mut rev: Vec<f64> = vec![];
        for row in data.chunks_exact(d).rev() {
            rev.extend_from_slice(row);
        }
        let a = fit_pca(&data, d, 3).unwrap();
        let b = fit_pca(&rev, d, 3).unwrap();
        for (ca, cb) in a.components.iter().zip(&b.components) {
            for (x, y) in ca.iter().zip(cb) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_input_returns_zeros() {
        let f = feats(10, 3, vec![2.5; 30]);
        let (a, b, basis) = pca_reduce(&f, &f, 2).unwrap();
        assert!(basis.degenerate);
        assert!(a.data().iter().chain(b.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn k_larger_than_d_is_an_error() {
        let f = feats(4, 2, vec![0.0; 8]);
        assert!(pca_reduce(&f, &f, 3).is_err());
    }
}
