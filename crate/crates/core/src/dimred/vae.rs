//! Single-hidden-layer VAE with hand-written forward and reverse passes.
//!
//! All weights live in one flat buffer so the optimizer can treat them as a
//! single vector. Matrices are row-major `[out][in]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeShape {
    pub d_in: usize,
    pub hidden: usize,
    pub latent: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    EncW1,
    EncB1,
    EncWMu,
    EncBMu,
    EncWLv,
    EncBLv,
    DecW1,
    DecB1,
    DecW2,
    DecB2,
}

impl Block {
    pub const ALL: [Block; 10] = [
        Block::EncW1,
        Block::EncB1,
        Block::EncWMu,
        Block::EncBMu,
        Block::EncWLv,
        Block::EncBLv,
        Block::DecW1,
        Block::DecB1,
        Block::DecW2,
        Block::DecB2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::EncW1 => "enc_w1",
            Block::EncB1 => "enc_b1",
            Block::EncWMu => "enc_w_mu",
            Block::EncBMu => "enc_b_mu",
            Block::EncWLv => "enc_w_lv",
            Block::EncBLv => "enc_b_lv",
            Block::DecW1 => "dec_w1",
            Block::DecB1 => "dec_b1",
            Block::DecW2 => "dec_w2",
            Block::DecB2 => "dec_b2",
        }
    }

    pub fn is_decoder(self) -> bool {
        matches!(self, Block::DecW1 | Block::DecB1 | Block::DecW2 | Block::DecB2)
    }
}

impl VaeShape {
    pub fn block_len(&self, b: Block) -> usize {
        let (d, h, l) = (self.d_in, self.hidden, self.latent);
        match b {
            Block::EncW1 => h * d,
            Block::EncB1 => h,
            Block::EncWMu | Block::EncWLv => l * h,
            Block::EncBMu | Block::EncBLv => l,
            Block::DecW1 => h * l,
            Block::DecB1 => h,
            Block::DecW2 => d * h,
            Block::DecB2 => d,
        }
    }

    pub fn offset(&self, b: Block) -> usize {
        Block::ALL.iter().take_while(|&&x| x != b).map(|&x| self.block_len(x)).sum()
    }

    pub fn total(&self) -> usize {
        Block::ALL.iter().map(|&b| self.block_len(b)).sum()
    }
}

/// VAE weights (or gradients with the same layout).
#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    shape: VaeShape,
    data: Vec<f64>,
}

impl VaeParams {
    pub fn zeros(shape: VaeShape) -> Self {
        VaeParams { shape, data: vec![0.0; shape.total()] }
    }

    pub fn from_data(shape: VaeShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.total() {
            return Err(mismatch(format!("VAE buffer has {} values, shape needs {}", data.len(), shape.total())));
        }
        Ok(VaeParams { shape, data })
    }

    /// He-uniform hidden layers, Glorot-uniform heads, zero biases. The
    /// log-variance head starts small so the initial posterior is near unit.
    pub fn init(shape: VaeShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(shape);
        let (d, h, l) = (shape.d_in, shape.hidden, shape.latent);
        let mut fill = |p: &mut VaeParams, b: Block, bound: f64| {
            for w in p.block_mut(b) {
                *w = rng.gen_range(-bound..bound);
            }
        };
        fill(&mut p, Block::EncW1, (6.0 / d as f64).sqrt());
        fill(&mut p, Block::EncWMu, (6.0 / (h + l) as f64).sqrt());
        fill(&mut p, Block::EncWLv, 0.1 * (6.0 / (h + l) as f64).sqrt());
        fill(&mut p, Block::DecW1, (6.0 / l as f64).sqrt());
        fill(&mut p, Block::DecW2, (6.0 / (h + d) as f64).sqrt());
        p
    }

    pub fn shape(&self) -> VaeShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block(&self, b: Block) -> &[f64] {
        let o = self.shape.offset(b);
        &self.data[o..o + self.shape.block_len(b)]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        let o = self.shape.offset(b);
        let n = self.shape.block_len(b);
        &mut self.data[o..o + n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &VaeParams) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VaeForward {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
    pub dec_hidden_pre: Vec<f64>,
    pub dec_hidden: Vec<f64>,
    pub recon: Vec<f64>,
}

#[inline]
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let n_in = x.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(o, &bias)| {
        let row = &w[o * n_in..(o + 1) * n_in];
        bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
    }));
}

#[inline]
fn relu(x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }));
}

fn encode_into(p: &VaeParams, f_in: &[f64], fw: &mut VaeForward) {
    affine(p.block(Block::EncW1), p.block(Block::EncB1), f_in, &mut fw.hidden_pre);
    relu(&fw.hidden_pre.clone(), &mut fw.hidden);
    affine(p.block(Block::EncWMu), p.block(Block::EncBMu), &fw.hidden, &mut fw.mu);
}

fn forward_into(p: &VaeParams, f_in: &[f64], noise: &[f64], fw: &mut VaeForward) {
    encode_into(p, f_in, fw);
    affine(p.block(Block::EncWLv), p.block(Block::EncBLv), &fw.hidden, &mut fw.logvar);
    fw.z.clear();
    fw.z.extend(fw.mu.iter().zip(&fw.logvar).zip(noise).map(|((m, lv), e)| m + (0.5 * lv).exp() * e));
    affine(p.block(Block::DecW1), p.block(Block::DecB1), &fw.z, &mut fw.dec_hidden_pre);
    relu(&fw.dec_hidden_pre.clone(), &mut fw.dec_hidden);
    affine(p.block(Block::DecW2), p.block(Block::DecB2), &fw.dec_hidden, &mut fw.recon);
}

fn check_shapes(p: &VaeParams, f_in: &[f64], noise: &[f64]) -> Result<()> {
    let s = p.shape;
    if f_in.len() != s.d_in || noise.len() != s.latent {
        return Err(mismatch(format!(
            "VAE expects input {} / noise {}, got {} / {}",
            s.d_in,
            s.latent,
            f_in.len(),
            noise.len()
        )));
    }
    if !p.is_finite() {
        return Err(Error::NonFinite("VAE parameters".into()));
    }
    Ok(())
}

/// Forward pass with the reparameterization `z = mu + exp(logvar / 2) * noise`.
pub fn vae_forward(p: &VaeParams, f_in: &[f64], noise: &[f64]) -> Result<VaeForward> {
    check_shapes(p, f_in, noise)?;
    let mut fw = VaeForward::default();
    forward_into(p, f_in, noise, &mut fw);
    Ok(fw)
}

/// Weighted reconstruction MSE plus mean KL to the standard normal.
pub fn vae_loss(f_in: &[f64], recon: &[f64], mu: &[f64], logvar: &[f64], delta1: f64, delta2: f64) -> f64 {
    let mse = f_in.iter().zip(recon).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / f_in.len() as f64;
    delta1 * mse + delta2 * kl_mean(mu, logvar)
}

pub fn kl_mean(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum::<f64>()
        / mu.len() as f64
}

/// Reverse pass: adds `scale * dL/dparams` plus the vector-Jacobian product
/// of `upstream_mu` (already scaled by the caller) into `grad`.
fn accumulate(
    p: &VaeParams,
    f_in: &[f64],
    noise: &[f64],
    fw: &VaeForward,
    upstream_mu: Option<&[f64]>,
    delta1: f64,
    delta2: f64,
    scale: f64,
    grad: &mut VaeParams,
) {
    let s = p.shape;
    let (d, h, l) = (s.d_in, s.hidden, s.latent);

    // Decoder.
    let g_recon: Vec<f64> =
        fw.recon.iter().zip(f_in).map(|(r, x)| scale * 2.0 * delta1 / d as f64 * (r - x)).collect();
    let mut g_dh = vec![0.0; h];
    {
        let w2 = p.block(Block::DecW2);
        let gw2 = grad.block_mut(Block::DecW2);
        for o in 0..d {
            let g = g_recon[o];
            if g == 0.0 {
                continue;
            }
            for j in 0..h {
                gw2[o * h + j] += g * fw.dec_hidden[j];
                g_dh[j] += w2[o * h + j] * g;
            }
        }
    }
    for (gb, g) in grad.block_mut(Block::DecB2).iter_mut().zip(&g_recon) {
        *gb += g;
    }
    let g_dh_pre: Vec<f64> =
        g_dh.iter().zip(&fw.dec_hidden_pre).map(|(g, &a)| if a > 0.0 { *g } else { 0.0 }).collect();
    let mut g_z = vec![0.0; l];
    {
        let w1 = p.block(Block::DecW1);
        let gw1 = grad.block_mut(Block::DecW1);
        for j in 0..h {
            let g = g_dh_pre[j];
            if g == 0.0 {
                continue;
            }
            for k in 0..l {
                gw1[j * l + k] += g * fw.z[k];
                g_z[k] += w1[j * l + k] * g;
            }
        }
    }
    for (gb, g) in grad.block_mut(Block::DecB1).iter_mut().zip(&g_dh_pre) {
        *gb += g;
    }

    // Reparameterization and KL.
    let kl = scale * delta2 / l as f64;
    let mut g_mu = vec![0.0; l];
    let mut g_lv = vec![0.0; l];
    for k in 0..l {
        let sd = (0.5 * fw.logvar[k]).exp();
        g_mu[k] = g_z[k] + kl * fw.mu[k] + upstream_mu.map_or(0.0, |u| u[k]);
        g_lv[k] = g_z[k] * 0.5 * sd * noise[k] + kl * 0.5 * (sd * sd - 1.0);
    }

    // Encoder heads.
    let mut g_hidden = vec![0.0; h];
    for (wb, bb, g) in [(Block::EncWMu, Block::EncBMu, &g_mu), (Block::EncWLv, Block::EncBLv, &g_lv)] {
        let w = p.block(wb);
        let gw = grad.block_mut(wb);
        for k in 0..l {
            let gk = g[k];
            if gk == 0.0 {
                continue;
            }
            for j in 0..h {
                gw[k * h + j] += gk * fw.hidden[j];
                g_hidden[j] += w[k * h + j] * gk;
            }
        }
        for (gb, gk) in grad.block_mut(bb).iter_mut().zip(g) {
            *gb += gk;
        }
    }
    encoder_input_grad(p, f_in, fw, &g_hidden, grad);
}

fn encoder_input_grad(p: &VaeParams, f_in: &[f64], fw: &VaeForward, g_hidden: &[f64], grad: &mut VaeParams) {
    let d = p.shape.d_in;
    let g_pre: Vec<f64> = g_hidden.iter().zip(&fw.hidden_pre).map(|(g, &a)| if a > 0.0 { *g } else { 0.0 }).collect();
    let gw = grad.block_mut(Block::EncW1);
    for (j, &g) in g_pre.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for i in 0..d {
            gw[j * d + i] += g * f_in[i];
        }
    }
    for (gb, g) in grad.block_mut(Block::EncB1).iter_mut().zip(&g_pre) {
        *gb += g;
    }
}

/// Exact gradients of `vae_loss` plus `<upstream_mu, mu>` for one sample.
pub fn vae_backward(
    p: &VaeParams,
    f_in: &[f64],
    noise: &[f64],
    upstream_mu: &[f64],
    delta1: f64,
    delta2: f64,
) -> Result<VaeParams> {
    check_shapes(p, f_in, noise)?;
    if upstream_mu.len() != p.shape.latent {
        return Err(mismatch("upstream gradient must have latent length"));
    }
    let mut fw = VaeForward::default();
    forward_into(p, f_in, noise, &mut fw);
    let mut grad = VaeParams::zeros(p.shape);
    accumulate(p, f_in, noise, &fw, Some(upstream_mu), delta1, delta2, 1.0, &mut grad);
    Ok(grad)
}

const CHUNK: usize = 256;

/// Posterior means for every row of `samples` (row length `d_in`).
pub fn encode_mu(p: &VaeParams, samples: &[f64]) -> Vec<f64> {
    let (d, l) = (p.shape.d_in, p.shape.latent);
    let n = samples.len() / d;
    let mut out = vec![0.0; n * l];
    out.par_chunks_mut(CHUNK * l).zip(samples.par_chunks(CHUNK * d)).for_each(|(dst, src)| {
        let mut fw = VaeForward::default();
        for (o, x) in dst.chunks_exact_mut(l).zip(src.chunks_exact(d)) {
            encode_into(p, x, &mut fw);
            o.copy_from_slice(&fw.mu);
        }
    });
    out
}

/// Mean loss and mean gradient over the rows `indices` of `samples`.
/// `noise` holds one latent vector per index.
pub fn batch_loss_grad(
    p: &VaeParams,
    samples: &[f64],
    indices: &[usize],
    noise: &[f64],
    delta1: f64,
    delta2: f64,
) -> (f64, VaeParams) {
    let (d, l) = (p.shape.d_in, p.shape.latent);
    let scale = 1.0 / indices.len().max(1) as f64;
    let partials: Vec<(f64, VaeParams)> = indices
        .par_chunks(CHUNK)
        .zip(noise.par_chunks(CHUNK * l))
        .map(|(idx, eps)| {
            let mut grad = VaeParams::zeros(p.shape);
            let mut fw = VaeForward::default();
            let mut loss = 0.0;
            for (&i, e) in idx.iter().zip(eps.chunks_exact(l)) {
                let x = &samples[i * d..(i + 1) * d];
                forward_into(p, x, e, &mut fw);
                loss += vae_loss(x, &fw.recon, &fw.mu, &fw.logvar, delta1, delta2);
                accumulate(p, x, e, &fw, None, delta1, delta2, scale, &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut total = VaeParams::zeros(p.shape);
    let mut loss = 0.0;
    for (lp, g) in &partials {
        loss += lp;
        total.add_assign(g);
    }
    (loss * scale, total)
}

/// Summed vector-Jacobian product of `mu` for every row of `samples`.
pub fn mu_vjp(p: &VaeParams, samples: &[f64], upstream: &[f64]) -> VaeParams {
    let (d, h, l) = (p.shape.d_in, p.shape.hidden, p.shape.latent);
    let partials: Vec<VaeParams> = samples
        .par_chunks(CHUNK * d)
        .zip(upstream.par_chunks(CHUNK * l))
        .map(|(src, up)| {
            let mut grad = VaeParams::zeros(p.shape);
            let mut fw = VaeForward::default();
            let w = p.block(Block::EncWMu).to_vec();
            for (x, g) in src.chunks_exact(d).zip(up.chunks_exact(l)) {
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                encode_into(p, x, &mut fw);
                let mut g_hidden = vec![0.0; h];
                {
                    let gw = grad.block_mut(Block::EncWMu);
                    for k in 0..l {
                        for j in 0..h {
                            gw[k * h + j] += g[k] * fw.hidden[j];
                            g_hidden[j] += w[k * h + j] * g[k];
                        }
                    }
                }
                for (gb, gk) in grad.block_mut(Block::EncBMu).iter_mut().zip(g) {
                    *gb += gk;
                }
                encoder_input_grad(p, x, &fw, &g_hidden, &mut grad);
            }
            grad
        })
        .collect();
    let mut total = VaeParams::zeros(p.shape);
    for g in &partials {
        total.add_assign(g);
    }
    total
}
