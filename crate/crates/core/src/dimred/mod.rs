//! Reduction of high-dimensional global embeddings to a few channels.

pub mod adam;
pub mod pca;
pub mod vae;

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, mismatch, Error, Result};
use crate::grid::FeatureVolume;
use crate::io::{DType, Gvol, Header, Kind};

pub use adam::{adam_step, AdamState};
pub use pca::{fit_pca, pca_reduce, PcaBasis};
pub use vae::{
    batch_loss_grad, encode_mu, kl_mean, mu_vjp, vae_backward, vae_forward, vae_loss, Block, VaeForward,
    VaeParams, VaeShape,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimredMethod {
    Pca,
    Sdr,
    Ddr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DimredConfig {
    pub method: DimredMethod,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub delta1: f64,
    pub delta2: f64,
    pub lr_vae: f64,
    pub seed: u64,
    /// Voxel samples per VAE step.
    pub batch_size: usize,
    /// Pretraining steps for the static variant.
    pub sdr_steps: usize,
    /// Route the registration similarity gradient into the VAE.
    pub ddr_reg_grad: bool,
    /// Recompute the reduced features every this many iterations.
    pub ddr_refresh_every: usize,
}

impl Default for DimredConfig {
    fn default() -> Self {
        DimredConfig {
            method: DimredMethod::Ddr,
            latent_dim: 12,
            hidden_dim: 64,
            delta1: 7.5e4,
            delta2: 20.0,
            lr_vae: 1e-3,
            seed: 0,
            batch_size: 4096,
            sdr_steps: 500,
            ddr_reg_grad: true,
            ddr_refresh_every: 1,
        }
    }
}

impl DimredConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 || self.hidden_dim < 1 {
            return Err(invalid("latent_dim and hidden_dim must be >= 1"));
        }
        if !(self.delta1 >= 0.0) || !(self.delta2 >= 0.0) {
            return Err(invalid("delta1 and delta2 must be >= 0"));
        }
        if !(self.lr_vae > 0.0) {
            return Err(invalid("lr_vae must be > 0"));
        }
        if self.batch_size < 1 || self.ddr_refresh_every < 1 {
            return Err(invalid("batch_size and ddr_refresh_every must be >= 1"));
        }
        Ok(())
    }

    pub fn shape(&self, d_in: usize) -> VaeShape {
        VaeShape { d_in, hidden: self.hidden_dim, latent: self.latent_dim }
    }
}

/// Stack every voxel of both volumes into one `2n x d` sample matrix.
pub fn stack_pair(f_fix: &FeatureVolume, f_mov: &FeatureVolume) -> Result<Vec<f64>> {
    if f_fix.dims() != f_mov.dims() || f_fix.channels() != f_mov.channels() {
        return Err(mismatch(format!(
            "feature pair differs: {:?}x{} vs {:?}x{}",
            f_fix.dims(),
            f_fix.channels(),
            f_mov.dims(),
            f_mov.channels()
        )));
    }
    let mut out = Vec::with_capacity(2 * f_fix.data().len());
    out.extend_from_slice(f_fix.data());
    out.extend_from_slice(f_mov.data());
    Ok(out)
}

/// Split stacked per-sample codes back into a fixed and a moving volume.
pub fn split_codes(codes: Vec<f64>, like: &FeatureVolume, channels: usize) -> Result<(FeatureVolume, FeatureVolume)> {
    let half = codes.len() / 2;
    let mut fix = codes;
    let mov = fix.split_off(half);
    Ok((
        FeatureVolume::new(like.dims(), channels, like.spacing(), fix)?,
        FeatureVolume::new(like.dims(), channels, like.spacing(), mov)?,
    ))
}

/// VAE parameters, optimizer state and the sample pool they train on.
#[derive(Clone, Debug)]
pub struct VaeTrainer {
    pub params: VaeParams,
    adam: AdamState,
    rng: ChaCha8Rng,
    samples: Vec<f64>,
    cfg: DimredConfig,
}

impl VaeTrainer {
    pub fn new(samples: Vec<f64>, d_in: usize, cfg: &DimredConfig, params: Option<VaeParams>) -> Result<Self> {
        cfg.validate()?;
        if d_in == 0 || samples.is_empty() || samples.len() % d_in != 0 {
            return Err(mismatch("sample buffer is not a whole number of rows"));
        }
        let shape = cfg.shape(d_in);
        let params = match params {
            Some(p) if p.shape() != shape => {
                return Err(mismatch(format!("checkpoint shape {:?} != configured {:?}", p.shape(), shape)))
            }
            Some(p) => p,
            None => VaeParams::init(shape, cfg.seed),
        };
        let adam = AdamState::new(shape.total());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7ae);
        Ok(VaeTrainer { params, adam, rng, samples, cfg: cfg.clone() })
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len() / self.params.shape().d_in
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    fn draw_batch(&mut self) -> (Vec<usize>, Vec<f64>) {
        let n = self.sample_count();
        let idx = if self.cfg.batch_size >= n {
            (0..n).collect()
        } else {
            sample_indices(&mut self.rng, n, self.cfg.batch_size).into_vec()
        };
        let l = self.params.shape().latent;
        let noise = (0..idx.len() * l).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        (idx, noise)
    }

    /// One Adam step on the minibatch loss plus an optional extra gradient
    /// (already in parameter layout). Returns the minibatch loss.
    pub fn step(&mut self, extra: Option<&VaeParams>) -> Result<f64> {
        let (idx, noise) = self.draw_batch();
        let (loss, mut grad) =
            batch_loss_grad(&self.params, &self.samples, &idx, &noise, self.cfg.delta1, self.cfg.delta2);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("VAE loss at step {}", self.adam.step)));
        }
        if let Some(e) = extra {
            for (g, x) in grad.data_mut().iter_mut().zip(e.data()) {
                *g += x;
            }
        }
        adam_step(self.params.data_mut(), grad.data(), &mut self.adam, self.cfg.lr_vae)?;
        Ok(loss)
    }

    pub fn pretrain(&mut self, steps: usize) -> Result<f64> {
        let mut last = f64::NAN;
        for _ in 0..steps {
            last = self.step(None)?;
        }
        Ok(last)
    }

    /// Posterior means for every sample, in sample order.
    pub fn encode(&self) -> Vec<f64> {
        encode_mu(&self.params, &self.samples)
    }

    /// Mean squared reconstruction error over all samples with zero noise.
    pub fn reconstruction_mse(&self) -> f64 {
        let d = self.params.shape().d_in;
        let l = self.params.shape().latent;
        let zero = vec![0.0; l];
        let mut fw = VaeForward::default();
        let mut total = 0.0;
        for x in self.samples.chunks_exact(d) {
            fw = vae_forward(&self.params, x, &zero).unwrap_or(fw);
            total += fw.recon.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        total / self.samples.len() as f64
    }
}

/// Per-channel variance of the pooled samples, averaged over channels.
pub fn mean_channel_variance(samples: &[f64], d: usize) -> f64 {
    let n = (samples.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for row in samples.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut var = 0.0;
    for row in samples.chunks_exact(d) {
        var += row.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>();
    }
    var / (n * d as f64)
}

#[derive(Clone, Debug)]
pub struct ReducedPair {
    pub fix: FeatureVolume,
    pub mov: FeatureVolume,
    /// The VAE used for the VAE methods (pretrained for the static one).
    pub params: Option<VaeParams>,
    pub degenerate: bool,
}

/// Reduce a global feature pair to `latent_dim` channels on its own grid.
///
/// `params` overrides the seeded initialization (or, for the static method,
/// the pretraining) with a given checkpoint.
pub fn reduce_pair(
    f_fix: &FeatureVolume,
    f_mov: &FeatureVolume,
    cfg: &DimredConfig,
    params: Option<&VaeParams>,
) -> Result<ReducedPair> {
    cfg.validate()?;
    let samples = stack_pair(f_fix, f_mov)?;
    let d = f_fix.channels();
    match cfg.method {
        DimredMethod::Pca => {
            let (fix, mov, basis) = pca_reduce(f_fix, f_mov, cfg.latent_dim)?;
            Ok(ReducedPair { fix, mov, params: None, degenerate: basis.degenerate })
        }
        DimredMethod::Sdr | DimredMethod::Ddr => {
            let pretrain = cfg.method == DimredMethod::Sdr && params.is_none();
            let mut trainer = VaeTrainer::new(samples, d, cfg, params.cloned())?;
            if pretrain {
                trainer.pretrain(cfg.sdr_steps)?;
            }
            let (fix, mov) = split_codes(trainer.encode(), f_fix, cfg.latent_dim)?;
            Ok(ReducedPair { fix, mov, params: Some(trainer.params), degenerate: false })
        }
    }
}

/// Write VAE weights as a `vae_params` GVOL with the block table and config.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &VaeParams, cfg: &DimredConfig) -> Result<()> {
    let shape = params.shape();
    let blocks: Vec<_> = Block::ALL
        .iter()
        .map(|&b| json!({"name": b.name(), "offset": shape.offset(b), "len": shape.block_len(b)}))
        .collect();
    let header = Header {
        dims: [shape.total(), 1, 1],
        channels: 1,
        dtype: DType::F64,
        spacing_mm: [1.0; 3],
        kind: Kind::VaeParams,
        extra: Some(json!({"shape": shape, "blocks": blocks, "config": cfg})),
    };
    Gvol { header, payload: params.data().to_vec() }.write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(VaeParams, Option<DimredConfig>)> {
    let g = Gvol::read(path)?;
    if g.header.kind != Kind::VaeParams {
        return Err(Error::Format(format!("expected kind vae_params, found {:?}", g.header.kind)));
    }
    let extra = g.header.extra.ok_or_else(|| Error::Format("checkpoint has no shape block".into()))?;
    let shape: VaeShape = serde_json::from_value(extra["shape"].clone())
        .map_err(|e| Error::Format(format!("checkpoint shape: {e}")))?;
    let cfg = serde_json::from_value(extra["config"].clone()).ok();
    Ok((VaeParams::from_data(shape, g.payload)?, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock_pair(d: usize) -> (FeatureVolume, FeatureVolume) {
        let dims = [6, 5, 4];
        let make = |shift: f64| {
            let data: Vec<f64> = (0..120 * d)
                .map(|i| {
                    let (v, c) = ((i / d) as f64, (i % d) as f64);
                    (0.13 * v * (1.0 + c) + shift).sin() * (0.5 + 0.1 * c)
                })
                .collect();
            FeatureVolume::new(dims, d, [1.0; 3], data).unwrap()
        };
        (make(0.0), make(0.4))
    }

    fn small_cfg(method: DimredMethod) -> DimredConfig {
        DimredConfig { method, latent_dim: 3, hidden_dim: 8, batch_size: 64, sdr_steps: 20, seed: 9, ..Default::default() }
    }

    #[test]
    fn stacking_puts_fixed_first() {
        let (a, b) = mock_pair(4);
        let s = stack_pair(&a, &b).unwrap();
        assert_eq!(&s[..a.data().len()], a.data());
        assert_eq!(&s[a.data().len()..], b.data());
    }

    #[test]
    fn ddr_initialization_is_deterministic() {
        let (a, b) = mock_pair(5);
        let cfg = small_cfg(DimredMethod::Ddr);
        let r1 = reduce_pair(&a, &b, &cfg, None).unwrap();
        let r2 = reduce_pair(&a, &b, &cfg, None).unwrap();
        assert_eq!(r1.fix, r2.fix);
        assert_eq!(r1.mov, r2.mov);
        assert_eq!(r1.fix.channels(), 3);
        assert_eq!(r1.fix.dims(), a.dims());
    }

    #[test]
    fn sdr_training_is_reproducible_and_reduces_loss() {
        let (a, b) = mock_pair(5);
        let cfg = small_cfg(DimredMethod::Sdr);
        let s = stack_pair(&a, &b).unwrap();
        let mut t1 = VaeTrainer::new(s.clone(), 5, &cfg, None).unwrap();
        let mut t2 = VaeTrainer::new(s, 5, &cfg, None).unwrap();
        let before = t1.reconstruction_mse();
        t1.pretrain(50).unwrap();
        t2.pretrain(50).unwrap();
        assert_eq!(t1.params, t2.params);
        assert!(t1.reconstruction_mse() < before);
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let (a, _) = mock_pair(5);
        let (b, _) = mock_pair(4);
        assert!(reduce_pair(&a, &b, &small_cfg(DimredMethod::Pca), None).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_cfg(DimredMethod::Sdr);
        let p = VaeParams::init(cfg.shape(7), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.gvol");
        save_checkpoint(&path, &p, &cfg).unwrap();
        let (q, c) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(c, Some(cfg));
    }
}
