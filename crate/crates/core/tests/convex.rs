use glide::convex::{build_cost_volume, convex_register, coupled_convex, ConvexConfig};
use glide::grid::{voxel_count, DisplacementField, FeatureVolume, Volume};
use glide::metrics::tre;
use glide::mind::{extract_mind, MindConfig};
use glide::synth::{brute_force_discrete_match, make_pair, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_features(r: &mut ChaCha8Rng, dims: [usize; 3], ch: usize) -> FeatureVolume {
    let n = voxel_count(dims) * ch;
    FeatureVolume::new(dims, ch, [1.0; 3], (0..n).map(|_| r.gen::<f64>()).collect()).unwrap()
}

// separable clamped box mean over the control grid
fn box_mean(u: &DisplacementField, r: isize) -> Vec<[f64; 3]> {
    let d = u.dims();
    let mut out = Vec::new();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let mut s = [0.0; 3];
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let c = |v: usize, o: isize, n: usize| (v as isize + o).clamp(0, n as isize - 1) as usize;
                            let v = u.at(c(x, dx, d[0]), c(y, dy, d[1]), c(z, dz, d[2]));
                            for a in 0..3 {
                                s[a] += v[a];
                            }
                        }
                    }
                }
                let w = ((2 * r + 1) as f64).powi(3);
                out.push(s.map(|v| v / w));
            }
        }
    }
    out
}

#[test]
fn large_theta_pins_to_the_smoothed_initial_match() {
    for seed in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let f = random_features(&mut r, [8; 3], 3);
        let m = random_features(&mut r, [8; 3], 3);
        let cfg = ConvexConfig { search_radius: 2, search_step: 1, theta_schedule: vec![1000.0], ..Default::default() };
        let d0 = brute_force_discrete_match(&f, &m, 2, 1, cfg.grid_spacing).unwrap();
        let s = box_mean(&d0, cfg.smooth_radius as isize);
        let out = coupled_convex(&build_cost_volume(&f, &m, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(out.dims(), d0.dims());
        for (v, t) in out.data().chunks_exact(3).zip(&s) {
            for a in 0..3 {
                assert!((v[a] - t[a]).abs() <= 1.0, "seed {seed}: {v:?} vs {t:?}");
            }
        }
    }
}

#[test]
fn zero_theta_matches_brute_force() {
    for seed in 0..3 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let dims = [9 + seed as usize, 8, 10];
        let f = random_features(&mut r, dims, 2);
        let m = random_features(&mut r, dims, 2);
        let cfg = ConvexConfig { search_radius: 2, theta_schedule: vec![0.0], ..Default::default() };
        let fast = coupled_convex(&build_cost_volume(&f, &m, &cfg).unwrap(), &cfg).unwrap();
        let slow = brute_force_discrete_match(&f, &m, 2, 1, 2).unwrap();
        assert_eq!(fast, slow);
    }
}

fn shifted(dims: [usize; 3], shift: [f64; 3]) -> Volume {
    Volume::from_fn(dims, [1.0; 3], |x, y, z| {
        let p = [x as f64 - shift[0], y as f64 - shift[1], z as f64 - shift[2]];
        (0.9 * p[0]).sin() * (0.7 * p[1]).cos() + (0.5 * p[2] + 0.3 * p[0]).sin() + 0.4 * (1.3 * p[1] - 0.6 * p[2]).cos()
    })
    .unwrap()
}

#[test]
fn constant_shift_is_recovered_after_resampling() {
    // moving content sits at x + (3, 1, 0), so u = (3, 1, 0)
    let dims = [20, 18, 16];
    let fix = shifted(dims, [0.0; 3]);
    let mov = shifted(dims, [3.0, 1.0, 0.0]);
    let mind = MindConfig::default();
    let (f, m) = (extract_mind(&fix, &mind).unwrap(), extract_mind(&mov, &mind).unwrap());
    let cfg = ConvexConfig { search_radius: 4, ..Default::default() };
    let u = convex_register(&f, &m, &cfg, dims).unwrap();
    // clamped border matches spread a few control points inward under coupling
    for z in 2..dims[2] - 2 {
        for y in 2..10 {
            for x in 2..12 {
                let v = u.at(x, y, z);
                assert!((v[0] - 3.0).abs() < 0.5 && (v[1] - 1.0).abs() < 0.5 && v[2].abs() < 0.5, "{x},{y},{z}: {v:?}");
            }
        }
    }
}

#[test]
fn sinusoidal_warp_tre_drops_by_sixty_percent() {
    let spec = SynthSpec { warp_amplitude: 4.0, seed: 1, ..Default::default() };
    let p = make_pair(&spec).unwrap();
    let mind = MindConfig::default();
    let f = extract_mind(&p.fixed, &mind).unwrap();
    let m = extract_mind(&p.moving, &mind).unwrap();
    let u = convex_register(&f, &m, &ConvexConfig::default(), p.fixed.dims()).unwrap();
    let zero = DisplacementField::zeros(p.fixed.dims(), [1.0; 3]).unwrap();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let before = mean(tre(&p.landmarks_fixed, &p.landmarks_moving, &zero, [1.0; 3]).unwrap());
    let after = mean(tre(&p.landmarks_fixed, &p.landmarks_moving, &u, [1.0; 3]).unwrap());
    assert!(after <= 0.4 * before, "{before} -> {after}");
}
