mod common;

use std::process::Command;
use std::time::Instant;

use common::{bending_case, fused_case, vae_case};
use glide::convex::{build_cost_volume, coupled_convex, ConvexConfig};
use glide::dimred::DimredMethod;
use glide::grid::{voxel_count, DisplacementField, FeatureVolume, Volume};
use glide::instance_opt::{Mode, RegConfig};
use glide::io::{Frame, LandmarkSet};
use glide::metrics::{cpm, dice, evaluate, nonpositive_jacobian_pct, tre, LabelMask, LandmarkPair, DEFAULT_CPM_THRESHOLDS};
use glide::mind::{extract_mind, MindConfig};
use glide::pipeline::{register_pair, PairContext};
use glide::synth::{brute_force_discrete_match, half_fold_field, make_pair, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, ok: bool, name: &str, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed += 1;
        }
    }
}

// Settings used for every registration below: 200 iterations and VAE hidden
// size 16, everything else at its default.
fn desk() -> RegConfig {
    let mut c = RegConfig { iters: 200, ..Default::default() };
    c.dimred.hidden_dim = 16;
    c
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn gradients(rep: &mut Report) {
    let t = Instant::now();
    let vae = (0..20).map(vae_case).fold(0.0, f64::max);
    let bend = (0..20).map(bending_case).fold(0.0, f64::max);
    let fused = (0..20).map(fused_case).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    rep.line(
        vae < 1e-4 && bend < 1e-6 && fused < 1e-3 && secs < 30.0,
        "gradient correctness",
        format!("worst rel err vae {vae:.2e} (<1e-4), bending {bend:.2e} (<1e-6), fused 12^3 {fused:.2e} (<1e-3), 20 cases each, {secs:.1}s (<30s)"),
    );
}

fn identity(rep: &mut Report) {
    let p = make_pair(&SynthSpec::default()).unwrap();
    let t = Instant::now();
    let r = register_pair(&p.fixed, &p.fixed, Some(&p.gf_fixed), Some(&p.gf_fixed), &desk()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let n = voxel_count(r.u.dims()) as f64;
    let mean = r.u.data().chunks_exact(3).map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).sum::<f64>() / n;
    let jac = nonpositive_jacobian_pct(&r.u);
    rep.line(
        mean < 0.1 && jac == 0.0 && secs < 60.0,
        "identity registration",
        format!("48^3 mean |u| {mean:.2e} (<0.1), pct_nonpos_jac {jac} (==0), {secs:.1}s (<60s)"),
    );
}

// TRE per seed for each of the five configurations, glide/ddr first.
fn recovery_and_ablation(rep: &mut Report) {
    let configs: [(&str, Mode, DimredMethod); 5] = [
        ("ddr", Mode::Glide, DimredMethod::Ddr),
        ("pca", Mode::Glide, DimredMethod::Pca),
        ("sdr", Mode::Glide, DimredMethod::Sdr),
        ("global_only", Mode::GlobalOnly, DimredMethod::Ddr),
        ("local_only", Mode::LocalOnly, DimredMethod::Ddr),
    ];
    let mut sums = [0.0; 5];
    let mut recovery_ok = true;
    let mut detail = Vec::new();
    for seed in 0..SEEDS {
        let p = make_pair(&SynthSpec { seed, ..Default::default() }).unwrap();
        let lm = LandmarkPair { fixed: &p.landmarks_fixed, moving: &p.landmarks_moving };
        let zero = DisplacementField::zeros(p.fixed.dims(), [1.0; 3]).unwrap();
        let t0 = evaluate(&zero, [1.0; 3], None, Some(lm), &DEFAULT_CPM_THRESHOLDS).unwrap().tre_mean_mm.unwrap();
        let global = Some((p.gf_fixed.clone(), p.gf_moving.clone()));
        let mut ctx = PairContext::new(p.fixed.clone(), p.moving.clone(), global).unwrap();
        let mut row = Vec::new();
        for (i, (name, mode, method)) in configs.iter().enumerate() {
            let mut cfg = desk();
            cfg.mode = *mode;
            cfg.dimred.method = *method;
            let t = Instant::now();
            let r = ctx.register(&cfg, None).unwrap();
            let secs = t.elapsed().as_secs_f64();
            let tre = evaluate(&r.u, [1.0; 3], None, Some(lm), &DEFAULT_CPM_THRESHOLDS).unwrap().tre_mean_mm.unwrap();
            sums[i] += tre;
            row.push(format!("{name} {tre:.3}"));
            if i == 0 {
                let ok = (3.0..=4.0).contains(&t0) && tre < 1.0 && r.final_loss <= r.initial_loss && secs < 120.0;
                recovery_ok &= ok;
                detail.push(format!(
                    "seed {seed}: tre {t0:.2} -> {tre:.3}, loss {:.4} -> {:.4}, {secs:.1}s",
                    r.initial_loss, r.final_loss
                ));
            }
        }
        println!("  seed {seed}: {}", row.join(", "));
    }
    rep.line(
        recovery_ok,
        "synthetic recovery",
        format!("initial TRE in [3,4], glide TRE < 1.0, final loss <= initial, < 120s per seed; {}", detail.join("; ")),
    );
    let m = sums.map(|s| s / SEEDS as f64);
    let ok = m[0] <= m[3] && m[0] <= m[4] && m[0] <= m[1] && m[0] <= m[2];
    rep.line(
        ok,
        "ablation ordering",
        format!(
            "mean TRE over {SEEDS} seeds: ddr {:.4}, pca {:.4}, sdr {:.4}, global_only {:.4}, local_only {:.4}; need ddr <= each",
            m[0], m[1], m[2], m[3], m[4]
        ),
    );
}

fn random_features(r: &mut ChaCha8Rng, dims: [usize; 3], ch: usize) -> FeatureVolume {
    let n = voxel_count(dims) * ch;
    FeatureVolume::new(dims, ch, [1.0; 3], (0..n).map(|_| r.gen::<f64>()).collect()).unwrap()
}

fn convex(rep: &mut Report) {
    let mut exact = 0;
    for seed in 0..10 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let dims = [r.gen_range(6..=16), r.gen_range(6..=16), r.gen_range(6..=16)];
        let ch = r.gen_range(1..=4);
        let (f, m) = (random_features(&mut r, dims, ch), random_features(&mut r, dims, ch));
        let radius = r.gen_range(1..=3);
        let cfg = ConvexConfig { search_radius: radius, theta_schedule: vec![0.0], ..Default::default() };
        let fast = coupled_convex(&build_cost_volume(&f, &m, &cfg).unwrap(), &cfg).unwrap();
        let slow = brute_force_discrete_match(&f, &m, radius, 1, cfg.grid_spacing).unwrap();
        exact += usize::from(fast == slow);
    }
    // Large-θ limit: with one huge-θ round every control point lands within
    // one step of the clamped box mean of the unregularized match.
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (f, m) = (random_features(&mut r, [8; 3], 3), random_features(&mut r, [8; 3], 3));
        let cfg = ConvexConfig { search_radius: 2, theta_schedule: vec![1000.0], ..Default::default() };
        let d0 = brute_force_discrete_match(&f, &m, 2, 1, cfg.grid_spacing).unwrap();
        let out = coupled_convex(&build_cost_volume(&f, &m, &cfg).unwrap(), &cfg).unwrap();
        let d = d0.dims();
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let mut s = [0.0; 3];
                    for (dx, dy, dz) in (-1..=1).flat_map(|a| (-1..=1).flat_map(move |b| (-1..=1).map(move |c| (a, b, c)))) {
                        let c = |v: usize, o: isize, n: usize| (v as isize + o).clamp(0, n as isize - 1) as usize;
                        let v = d0.at(c(x, dx, d[0]), c(y, dy, d[1]), c(z, dz, d[2]));
                        (0..3).for_each(|a| s[a] += v[a] / 27.0);
                    }
                    let o = out.at(x, y, z);
                    worst = (0..3).map(|a| (o[a] - s[a]).abs()).fold(worst, f64::max);
                }
            }
        }
    }
    rep.line(
        exact == 10 && worst <= 1.0,
        "convex oracle equivalence",
        format!("theta [0] bit-exact on {exact}/10 random <=16^3 instances; theta [1000] max deviation from smoothed match {worst:.3} (<=1 step)"),
    );
}

fn mind(rep: &mut Report) {
    let g = |x: f64, y: f64, z: f64| (0.7 * x + 0.3 * y).sin() * (0.5 * z).cos() + 0.2 * (1.3 * y - 0.4 * z).sin() + 0.05 * x;
    let dims = [20, 18, 16];
    let v = Volume::from_fn(dims, [1.0; 3], |x, y, z| g(x as f64, y as f64, z as f64)).unwrap();
    let w = Volume::new(dims, [1.0; 3], v.data().iter().map(|x| 3.7 * x - 12.0).collect()).unwrap();
    let mut affine = 0.0f64;
    let mut channels = true;
    for radius in [0, 1] {
        let cfg = MindConfig { radius, ..Default::default() };
        let (a, b) = (extract_mind(&v, &cfg).unwrap(), extract_mind(&w, &cfg).unwrap());
        channels &= a.channels() == 12;
        affine = affine.max(max_abs(a.data(), b.data()));
    }
    let t = [3usize, 1, 2];
    let s = Volume::from_fn(dims, [1.0; 3], |x, y, z| g((x + t[0]) as f64, (y + t[1]) as f64, (z + t[2]) as f64)).unwrap();
    let cfg = MindConfig::default();
    let (a, b) = (extract_mind(&v, &cfg).unwrap(), extract_mind(&s, &cfg).unwrap());
    let m = cfg.dilation + cfg.radius;
    let mut trans = 0.0f64;
    for z in m..dims[2] - m - t[2] {
        for y in m..dims[1] - m - t[1] {
            for x in m..dims[0] - m - t[0] {
                trans = trans.max(max_abs(b.voxel(x, y, z), a.voxel(x + t[0], y + t[1], z + t[2])));
            }
        }
    }
    rep.line(
        affine < 1e-5 && channels && trans < 1e-10,
        "MIND invariances",
        format!("affine intensity {affine:.2e} (<1e-5), 12 channels {channels}, translation on interior {trans:.2e} (<1e-10)"),
    );
}

fn metric_closed_forms(rep: &mut Report) {
    let mask = |on: &[usize]| {
        let mut d = vec![0.0; 8];
        on.iter().for_each(|&i| d[i] = 1.0);
        LabelMask::new(Volume::new([4, 2, 1], [1.0; 3], d).unwrap(), None).unwrap()
    };
    let d = dice(&mask(&[0, 1, 2, 3]), &mask(&[2, 3, 4, 5])).unwrap().mean;
    let f = LandmarkSet::new(vec![[10.0, 10.0, 10.0]], Frame::Fixed);
    let m = LandmarkSet::new(vec![[13.0, 10.0, 10.0]], Frame::Moving);
    let shift = DisplacementField::constant([20; 3], [1.0; 3], [3.0, 0.0, 0.0]).unwrap();
    let zero = DisplacementField::zeros([20; 3], [1.0; 3]).unwrap();
    let t_corrected = tre(&f, &m, &shift, [1.0; 3]).unwrap();
    let t_offset = tre(&f, &m, &zero, [1.0; 3]).unwrap();
    let c = cpm(&[0.4, 0.9, 1.5, 6.0], &DEFAULT_CPM_THRESHOLDS).unwrap();
    let fold = DisplacementField::from_fn([6; 3], [1.0; 3], |x, _, _| [-2.0 * x as f64, 0.0, 0.0]).unwrap();
    let uniform_fold = nonpositive_jacobian_pct(&fold);
    let (half, expect) = half_fold_field([12, 8, 8], 6).unwrap();
    let half_pct = nonpositive_jacobian_pct(&half);
    let ok = d == Some(0.5)
        && t_corrected == [0.0]
        && t_offset == [3.0]
        && c == [(0.5, 25.0), (1.0, 50.0), (2.0, 75.0), (5.0, 75.0)]
        && uniform_fold == 100.0
        && half_pct == expect;
    rep.line(
        ok,
        "metric closed forms",
        format!(
            "dice {d:?} (0.5), tre corrected {t_corrected:?} (0), tre offset {t_offset:?} (3), cpm {c:?}, uniform fold {uniform_fold}% (100), half fold {half_pct:.3}% ({expect:.3})"
        ),
    );
}

fn determinism(rep: &mut Report) {
    let t = tempfile::tempdir().unwrap();
    let b = t.path().join("bundle");
    let exe = env!("CARGO_BIN_EXE_glide");
    let status = Command::new(exe).env_remove("GLIDE_SEED").args(["synth", "--seed", "7"]).arg("--out").arg(&b).status().unwrap();
    let mut outs = Vec::new();
    let mut ok = status.success();
    for run in ["a", "b"] {
        let o = t.path().join(run);
        let s = Command::new(exe)
            .env_remove("GLIDE_SEED")
            .arg("register")
            .arg("--bundle")
            .arg(&b)
            .arg("--out")
            .arg(&o)
            .args(["--iters", "200", "--hidden-dim", "16", "--seed", "7"])
            .status()
            .unwrap();
        ok &= s.success();
        let read = |f: &str| std::fs::read(o.join(f)).unwrap_or_default();
        outs.push((read("u.gvol"), read("report.json")));
    }
    let same_u = !outs[0].0.is_empty() && outs[0].0 == outs[1].0;
    let same_report = !outs[0].1.is_empty() && outs[0].1 == outs[1].1;
    rep.line(
        ok && same_u && same_report,
        "determinism",
        format!("two CLI runs on a 48^3 synth bundle: u.gvol identical {same_u}, report.json identical {same_report}"),
    );
}

fn main() {
    let mut rep = Report { failed: 0 };
    metric_closed_forms(&mut rep);
    mind(&mut rep);
    convex(&mut rep);
    gradients(&mut rep);
    identity(&mut rep);
    determinism(&mut rep);
    recovery_and_ablation(&mut rep);
    println!("{} criteria failed", rep.failed);
    if rep.failed > 0 {
        std::process::exit(1);
    }
}
