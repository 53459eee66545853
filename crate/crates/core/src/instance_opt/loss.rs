//! Fused global/local feature SSD with bending regularization.

use rayon::prelude::*;

use crate::error::{mismatch, Result};
use crate::grid::{
    resample_field, resample_field_adjoint, voxel_count, Dims, DisplacementField, FeatureVolume, Grid, Stencil,
};

use super::bending::bending_energy;

/// A fixed/moving feature pair on the working grid.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePair<'a> {
    pub fix: &'a FeatureVolume,
    pub mov: &'a FeatureVolume,
}

impl<'a> FeaturePair<'a> {
    pub fn new(fix: &'a FeatureVolume, mov: &'a FeatureVolume) -> Self {
        FeaturePair { fix, mov }
    }

    fn check(&self, dims: Dims) -> Result<()> {
        if self.fix.dims() != dims || self.mov.dims() != dims {
            return Err(mismatch(format!(
                "features {:?}/{:?} are not on the working grid {dims:?}",
                self.fix.dims(),
                self.mov.dims()
            )));
        }
        if self.fix.channels() != self.mov.channels() {
            return Err(mismatch("feature pair channel counts differ"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedLoss {
    pub total: f64,
    /// Unweighted terms.
    pub global: f64,
    pub local: f64,
    pub bending: f64,
    /// Gradient w.r.t. the parameter grid displacement.
    pub grad_u: Vec<f64>,
    /// Gradient of `alpha * global` w.r.t. the fixed and moving global
    /// features, when requested.
    pub grad_global: Option<(Vec<f64>, Vec<f64>)>,
}

struct SimTerm {
    value: f64,
    grad_mov_pos: Vec<f64>,
    grad_fix: Option<Vec<f64>>,
    grad_mov: Option<Vec<f64>>,
}

/// Mean squared channel difference between `fix` and `mov` warped by `du`,
/// with the gradient w.r.t. every displacement vector of `du` (scaled by
/// `weight`) and optionally w.r.t. both feature volumes.
fn similarity(pair: FeaturePair<'_>, du: &DisplacementField, weight: f64, feature_grad: bool) -> SimTerm {
    let dims = du.dims();
    let ch = pair.fix.channels();
    let n = voxel_count(dims);
    let norm = (n * ch) as f64;
    let mov = pair.mov.view();
    let fix = pair.fix.data();
    let u = du.data();
    let slab = dims[0] * dims[1];

    let mut grad = vec![0.0; n * 3];
    let mut resid = if feature_grad { vec![0.0; n * ch] } else { Vec::new() };
    let mut resid_slabs: Vec<&mut [f64]> = if feature_grad {
        resid.chunks_mut(slab * ch).collect()
    } else {
        (0..dims[2]).map(|_| &mut [][..]).collect()
    };
    let partial: Vec<f64> = grad
        .par_chunks_mut(slab * 3)
        .zip(resid_slabs.par_iter_mut())
        .enumerate()
        .map(|(z, (g_slab, r_slab))| {
            let mut acc = vec![0.0; 4 * ch];
            let mut sum = 0.0;
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = x + dims[0] * (y + dims[1] * z);
                    let p = [x as f64 + u[i * 3], y as f64 + u[i * 3 + 1], z as f64 + u[i * 3 + 2]];
                    let st = Stencil::new(mov.dims, p);
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    let (val, rest) = acc.split_at_mut(ch);
                    let (dx, rest) = rest.split_at_mut(ch);
                    let (dy, dz) = rest.split_at_mut(ch);
                    for k in 0..8 {
                        let m = &mov.data[st.idx[k] * ch..(st.idx[k] + 1) * ch];
                        let (w, wx, wy, wz) = (st.w[k], st.dw[0][k], st.dw[1][k], st.dw[2][k]);
                        for ((((v, gx), gy), gz), &mm) in
                            val.iter_mut().zip(dx.iter_mut()).zip(dy.iter_mut()).zip(dz.iter_mut()).zip(m)
                        {
                            *v += w * mm;
                            *gx += wx * mm;
                            *gy += wy * mm;
                            *gz += wz * mm;
                        }
                    }
                    let dval = &acc[ch..];
                    let val = &acc[..ch];
                    let f = &fix[i * ch..(i + 1) * ch];
                    let local = x + dims[0] * y;
                    let mut g = [0.0; 3];
                    for c in 0..ch {
                        let r = f[c] - val[c];
                        sum += r * r;
                        g[0] += r * dval[c];
                        g[1] += r * dval[ch + c];
                        g[2] += r * dval[2 * ch + c];
                        if feature_grad {
                            r_slab[local * ch + c] = 2.0 * weight * r / norm;
                        }
                    }
                    for a in 0..3 {
                        g_slab[local * 3 + a] = -2.0 * weight * g[a] / norm;
                    }
                }
            }
            sum
        })
        .collect();
    drop(resid_slabs);
    let value = partial.iter().sum::<f64>() / norm;

    let (grad_fix, grad_mov) = if feature_grad {
        // Serial scatter so the accumulation order into the moving grid is fixed.
        let mut grad_mov = vec![0.0; pair.mov.data().len()];
        let mut i = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x as f64 + u[i * 3], y as f64 + u[i * 3 + 1], z as f64 + u[i * 3 + 2]];
                    let (idx, w) = Stencil::weights(mov.dims, p);
                    let r = &resid[i * ch..(i + 1) * ch];
                    for k in 0..8 {
                        if w[k] == 0.0 {
                            continue;
                        }
                        let dst = &mut grad_mov[idx[k] * ch..(idx[k] + 1) * ch];
                        for (d, &rc) in dst.iter_mut().zip(r) {
                            *d -= w[k] * rc;
                        }
                    }
                    i += 1;
                }
            }
        }
        (Some(resid), Some(grad_mov))
    } else {
        (None, None)
    };
    SimTerm { value, grad_mov_pos: grad, grad_fix, grad_mov }
}

/// `alpha * L_global + beta * L_local + lambda * bending(u)`.
///
/// `u` lives on the parameter grid and is resampled to the working grid of
/// the features for the similarity terms; its gradient is pulled back through
/// that resampling exactly. A pair passed as `None` contributes nothing.
pub fn fused_loss(
    global: Option<FeaturePair<'_>>,
    local: Option<FeaturePair<'_>>,
    u: &DisplacementField,
    weights: LossWeights,
    want_global_grad: bool,
) -> Result<FusedLoss> {
    let work = match (global, local) {
        (Some(g), _) => g.fix.dims(),
        (None, Some(l)) => l.fix.dims(),
        (None, None) => u.dims(),
    };
    for p in [global, local].into_iter().flatten() {
        p.check(work)?;
    }
    let du = resample_field(u, work)?;
    let mut grad_work = vec![0.0; voxel_count(work) * 3];
    let mut out = FusedLoss {
        total: 0.0,
        global: 0.0,
        local: 0.0,
        bending: 0.0,
        grad_u: Vec::new(),
        grad_global: None,
    };
    if let Some(g) = global {
        let t = similarity(g, &du, weights.alpha, want_global_grad);
        out.global = t.value;
        grad_work.iter_mut().zip(&t.grad_mov_pos).for_each(|(a, b)| *a += b);
        if let (Some(f), Some(m)) = (t.grad_fix, t.grad_mov) {
            out.grad_global = Some((f, m));
        }
    }
    if let Some(l) = local {
        let t = similarity(l, &du, weights.beta, false);
        out.local = t.value;
        grad_work.iter_mut().zip(&t.grad_mov_pos).for_each(|(a, b)| *a += b);
    }
    let mut grad_u = resample_field_adjoint(&grad_work, u.dims(), work);
    let (bend, bend_grad) = bending_energy(u);
    out.bending = bend;
    grad_u.iter_mut().zip(&bend_grad).for_each(|(a, b)| *a += weights.lambda * b);
    out.grad_u = grad_u;
    out.total = weights.alpha * out.global + weights.beta * out.local + weights.lambda * out.bending;
    Ok(out)
}
