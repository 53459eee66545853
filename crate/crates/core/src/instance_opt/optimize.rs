use serde::Serialize;

use crate::dimred::{adam_step, mu_vjp, AdamState, VaeTrainer};
use crate::error::{Error, Result};
use crate::grid::{resample_buffer, resample_buffer_adjoint, Dims, DisplacementField, FeatureVolume, Spacing};

use super::loss::{fused_loss, FeaturePair, FusedLoss};
use super::RegConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub total: f64,
    #[serde(rename = "L_global")]
    pub global: f64,
    #[serde(rename = "L_local")]
    pub local: f64,
    pub bending: f64,
    #[serde(rename = "L_vae")]
    pub vae: f64,
}

impl TraceRow {
    fn new(iteration: usize, ev: &FusedLoss, vae: f64) -> Self {
        TraceRow { iteration, total: ev.total, global: ev.global, local: ev.local, bending: ev.bending, vae }
    }
}

/// A VAE that is trained jointly with the displacement. Its posterior means
/// on the embedding grid, upsampled to the working grid, are the global
/// features.
pub struct DdrCoupling<'a> {
    pub trainer: &'a mut VaeTrainer,
    pub embed_dims: Dims,
    pub embed_spacing: Spacing,
    pub work_dims: Dims,
    pub work_spacing: Spacing,
    pub reg_grad: bool,
    pub refresh_every: usize,
}

impl DdrCoupling<'_> {
    fn latent(&self) -> usize {
        self.trainer.params.shape().latent
    }

    pub fn features(&self) -> Result<(FeatureVolume, FeatureVolume)> {
        let l = self.latent();
        let mut fix = self.trainer.encode();
        let mov = fix.split_off(fix.len() / 2);
        let up = |codes: Vec<f64>| {
            let data = resample_buffer(&codes, self.embed_dims, l, self.work_dims);
            FeatureVolume::new(self.work_dims, l, self.work_spacing, data)
        };
        Ok((up(fix)?, up(mov)?))
    }

    /// Pull a working-grid feature gradient back onto the VAE parameters.
    fn parameter_grad(&self, grad_fix: &[f64], grad_mov: &[f64]) -> crate::dimred::VaeParams {
        let l = self.latent();
        let mut up = resample_buffer_adjoint(grad_fix, self.embed_dims, l, self.work_dims);
        up.extend(resample_buffer_adjoint(grad_mov, self.embed_dims, l, self.work_dims));
        mu_vjp(&self.trainer.params, self.trainer.samples(), &up)
    }
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    /// Optimized displacement on the parameter grid.
    pub u: DisplacementField,
    /// One row per iteration plus a final row evaluated after the last step.
    pub trace: Vec<TraceRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Global features at the end (changes over time only when coupled).
    pub global_features: Option<(FeatureVolume, FeatureVolume)>,
}

/// Trace rows as CSV with a header line.
pub fn trace_csv(rows: &[TraceRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn check_finite(ev: &FusedLoss, vae: f64, iteration: usize, rows: &[TraceRow]) -> Result<()> {
    if ev.total.is_finite() && vae.is_finite() && ev.grad_u.iter().all(|g| g.is_finite()) {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        iteration,
        breakdown: format!(
            "total={} L_global={} L_local={} bending={} L_vae={}",
            ev.total, ev.global, ev.local, ev.bending, vae
        ),
        trace: trace_csv(rows).unwrap_or_default(),
    })
}

/// Adam on the parameter-grid displacement. Pairs not used by `cfg.mode`
/// are ignored. With `ddr`, the global features come from the coupled VAE,
/// which takes one step per iteration before the displacement does.
pub fn optimize(
    global: Option<FeaturePair<'_>>,
    local: Option<FeaturePair<'_>>,
    u_init: &DisplacementField,
    cfg: &RegConfig,
    mut ddr: Option<DdrCoupling<'_>>,
) -> Result<OptimizeResult> {
    cfg.validate()?;
    let weights = cfg.weights();
    let use_global = cfg.mode.uses_global();
    let local = if cfg.mode.uses_local() { local } else { None };
    if !use_global {
        ddr = None;
    }
    let fixed_global = if use_global { global } else { None };
    let mut owned: Option<(FeatureVolume, FeatureVolume)> = None;

    let mut u = u_init.clone();
    let mut adam = AdamState::new(u.data().len());
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    for it in 0..cfg.iters {
        if let Some(d) = &ddr {
            if it % d.refresh_every.max(1) == 0 || owned.is_none() {
                owned = Some(d.features()?);
            }
        }
        let gp = owned.as_ref().map(|(f, m)| FeaturePair::new(f, m)).or(fixed_global);
        let coupled = ddr.as_ref().is_some_and(|d| d.reg_grad);
        let ev = fused_loss(gp, local, &u, weights, coupled)?;
        check_finite(&ev, 0.0, it, &trace)?;
        let mut vae = 0.0;
        if let Some(d) = ddr.as_mut() {
            let extra = match &ev.grad_global {
                Some((gf, gm)) if d.reg_grad => Some(d.parameter_grad(gf, gm)),
                _ => None,
            };
            vae = d.trainer.step(extra.as_ref())?;
            check_finite(&ev, vae, it, &trace)?;
        }
        trace.push(TraceRow::new(it, &ev, vae));
        adam_step(u.data_mut(), &ev.grad_u, &mut adam, cfg.lr_disp)?;
    }

    if let Some(d) = &ddr {
        owned = Some(d.features()?);
    }
    let gp = owned.as_ref().map(|(f, m)| FeaturePair::new(f, m)).or(fixed_global);
    let ev = fused_loss(gp, local, &u, weights, false)?;
    check_finite(&ev, 0.0, cfg.iters, &trace)?;
    trace.push(TraceRow::new(cfg.iters, &ev, 0.0));

    let initial_loss = trace[0].total;
    let final_loss = ev.total;
    let global_features = owned.or_else(|| fixed_global.map(|p| (p.fix.clone(), p.mov.clone())));
    Ok(OptimizeResult { u, trace, initial_loss, final_loss, global_features })
}
