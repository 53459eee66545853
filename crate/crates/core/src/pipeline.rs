//! End-to-end pairwise registration.

use crate::convex::{convex_register, ConvexConfig};
use crate::dimred::{reduce_pair, stack_pair, DimredMethod, VaeParams, VaeTrainer};
use crate::error::{invalid, mismatch, Result};
use crate::grid::{
    compose, resample_features, resample_field, warp_features, warp_volume, DisplacementField, FeatureVolume,
    Interpolation, Volume,
};
use crate::instance_opt::{optimize, DdrCoupling, FeaturePair, Mode, RegConfig, TraceRow};
use crate::mind::{extract_mind, MindConfig};

/// Intermediate products kept for inspection.
#[derive(Clone, Debug, Default)]
pub struct Intermediates {
    /// Reduced global features on the working grid, before optimization.
    pub global_features: Option<(FeatureVolume, FeatureVolume)>,
    pub local_features: Option<(FeatureVolume, FeatureVolume)>,
    pub u_global: Option<DisplacementField>,
    pub u_local: Option<DisplacementField>,
    pub u_init: Option<DisplacementField>,
}

#[derive(Clone, Debug)]
pub struct Registration {
    /// Displacement on the fixed image grid, in voxels.
    pub u: DisplacementField,
    pub warped: Volume,
    pub trace: Vec<TraceRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Final VAE weights for the VAE-based reductions.
    pub vae: Option<VaeParams>,
    pub intermediates: Intermediates,
}

/// One image pair with the products that do not depend on the global
/// feature path cached, so several configurations can share them.
pub struct PairContext {
    fixed: Volume,
    moving: Volume,
    global: Option<(FeatureVolume, FeatureVolume)>,
    mind: Option<(MindConfig, FeatureVolume, FeatureVolume)>,
    local_convex: Option<(MindConfig, ConvexConfig, DisplacementField)>,
}

impl PairContext {
    pub fn new(fixed: Volume, moving: Volume, global: Option<(FeatureVolume, FeatureVolume)>) -> Result<Self> {
        if fixed.dims() != moving.dims() {
            return Err(mismatch(format!("fixed {:?} vs moving {:?}", fixed.dims(), moving.dims())));
        }
        if let Some((f, m)) = &global {
            if f.dims() != m.dims() || f.channels() != m.channels() {
                return Err(mismatch("global feature pair differs in shape"));
            }
        }
        Ok(PairContext { fixed, moving, global, mind: None, local_convex: None })
    }

    pub fn fixed(&self) -> &Volume {
        &self.fixed
    }

    pub fn moving(&self) -> &Volume {
        &self.moving
    }

    fn mind(&mut self, cfg: &MindConfig) -> Result<(FeatureVolume, FeatureVolume)> {
        match &self.mind {
            Some((c, f, m)) if c == cfg => Ok((f.clone(), m.clone())),
            _ => {
                let f = extract_mind(&self.fixed, cfg)?;
                let m = extract_mind(&self.moving, cfg)?;
                self.mind = Some((cfg.clone(), f.clone(), m.clone()));
                Ok((f, m))
            }
        }
    }

    fn local_convex(&mut self, lf: (&FeatureVolume, &FeatureVolume), cfg: &RegConfig) -> Result<DisplacementField> {
        if let Some((m, c, u)) = &self.local_convex {
            if *m == cfg.mind && *c == cfg.convex {
                return Ok(u.clone());
            }
        }
        let u = convex_register(lf.0, lf.1, &cfg.convex, self.fixed.dims())?;
        self.local_convex = Some((cfg.mind.clone(), cfg.convex.clone(), u.clone()));
        Ok(u)
    }

    /// Run the whole pipeline: local descriptors, global reduction, the two
    /// convex passes and their composition, then instance optimization.
    pub fn register(&mut self, cfg: &RegConfig, vae_init: Option<&VaeParams>) -> Result<Registration> {
        cfg.validate()?;
        let work = self.fixed.dims();
        let spacing = self.fixed.spacing();
        let mode = cfg.mode;
        let mut inter = Intermediates::default();

        let lf = if mode.uses_local() { Some(self.mind(&cfg.mind)?) } else { None };

        let mut reduced = None;
        let mut gf_work = None;
        if mode.uses_global() {
            let (raw_fix, raw_mov) = self.global.as_ref().ok_or_else(|| {
                invalid(format!("mode {mode:?} needs global features for both images"))
            })?;
            let r = reduce_pair(raw_fix, raw_mov, &cfg.dimred, vae_init)?;
            gf_work = Some((resample_features(&r.fix, work)?, resample_features(&r.mov, work)?));
            reduced = Some(r);
        }

        let u_global = match &gf_work {
            Some((f, m)) => Some(convex_register(f, m, &cfg.convex, work)?),
            None => None,
        };
        let u_local = match (&lf, &u_global) {
            (Some((f, m)), Some(ug)) if cfg.convex.local_on_warped => {
                let mw = warp_features(m, ug, Interpolation::Trilinear)?;
                Some(convex_register(f, &mw, &cfg.convex, work)?)
            }
            (Some((f, m)), _) => Some(self.local_convex((f, m), cfg)?),
            (None, _) => None,
        };
        let u_init = match (mode, &u_global, &u_local) {
            (Mode::Glide, Some(g), Some(l)) if cfg.convex.local_on_warped => compose(l, g)?,
            (Mode::Glide, Some(g), Some(l)) => compose(g, l)?,
            (Mode::GlobalOnly, Some(g), _) => g.clone(),
            (Mode::LocalOnly, _, Some(l)) => l.clone(),
            _ => unreachable!("mode requirements checked above"),
        };
        let u0 = resample_field(&u_init, cfg.down_dims(work))?;

        let global_pair = gf_work.as_ref().map(|(f, m)| FeaturePair::new(f, m));
        let local_pair = lf.as_ref().map(|(f, m)| FeaturePair::new(f, m));
        let mut trainer = None;
        if let (Some(r), true) = (&reduced, cfg.dimred.method == DimredMethod::Ddr) {
            let (raw_fix, raw_mov) = self.global.as_ref().expect("global features present");
            let samples = stack_pair(raw_fix, raw_mov)?;
            trainer = Some(VaeTrainer::new(samples, raw_fix.channels(), &cfg.dimred, r.params.clone())?);
        }
        let ddr = match (&mut trainer, &self.global) {
            (Some(t), Some((raw_fix, _))) => Some(DdrCoupling {
                trainer: t,
                embed_dims: raw_fix.dims(),
                embed_spacing: raw_fix.spacing(),
                work_dims: work,
                work_spacing: spacing,
                reg_grad: cfg.dimred.ddr_reg_grad,
                refresh_every: cfg.dimred.ddr_refresh_every,
            }),
            _ => None,
        };
        let res = optimize(global_pair, local_pair, &u0, cfg, ddr)?;

        let u = resample_field(&res.u, work)?;
        let u = DisplacementField::new(work, spacing, u.into_data())?;
        let warped = warp_volume(&self.moving, &u, Interpolation::Trilinear)?;
        let vae = match trainer {
            Some(t) => Some(t.params),
            None => reduced.and_then(|r| r.params),
        };
        inter.global_features = gf_work;
        inter.local_features = lf;
        inter.u_global = u_global;
        inter.u_local = u_local;
        inter.u_init = Some(u_init);
        Ok(Registration {
            u,
            warped,
            trace: res.trace,
            initial_loss: res.initial_loss,
            final_loss: res.final_loss,
            vae,
            intermediates: inter,
        })
    }
}

/// Register `moving` onto `fixed`. Global features are required unless the
/// mode is local-only.
pub fn register_pair(
    fixed: &Volume,
    moving: &Volume,
    global_fixed: Option<&FeatureVolume>,
    global_moving: Option<&FeatureVolume>,
    cfg: &RegConfig,
) -> Result<Registration> {
    let global = match (global_fixed, global_moving) {
        (Some(f), Some(m)) => Some((f.clone(), m.clone())),
        (None, None) => None,
        _ => return Err(invalid("global features must be given for both images or neither")),
    };
    PairContext::new(fixed.clone(), moving.clone(), global)?.register(cfg, None)
}
