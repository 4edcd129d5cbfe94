//! Independent oracles and Monte Carlo audits against the library.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcmlab::environment::{
    edge_uniform, pi_field, sample_environment, BoxSpec, ConductanceLaw, Cube, Environment,
};
use rcmlab::experiments::{run, Experiment, ExperimentConfig};
use rcmlab::extremes::{c_gamma, ks_distance, sample_chi, spacing_diagnostics, TailModel};
use rcmlab::paths::{build_detour_paths, pathvsrw_bound};
use rcmlab::percolation::{
    build_dn, build_dn_at, build_hole_map, clusters, edge_boundary_ratio, is_b_sparse,
    threshold_open, xi_for_open_probability,
};
use rcmlab::spectral::{assemble_dirichlet_operator, dense_oracle, principal_eigenpair};
use rcmlab::traps::{bad_edge_census, find_traps_with, ThresholdFamily};

fn env(d: usize, n: usize, pad: usize, law: ConductanceLaw, seed: u64) -> Environment {
    sample_environment(BoxSpec::new(d, n, pad), law, seed).unwrap()
}

fn corr(a: &[bool], b: &[bool]) -> (f64, f64) {
    let m = a.len() as f64;
    let pa = a.iter().filter(|x| **x).count() as f64 / m;
    let pb = b.iter().filter(|x| **x).count() as f64 / m;
    let pab = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64 / m;
    let c = (pab - pa * pb) / (pa * (1.0 - pa) * pb * (1.0 - pb)).sqrt();
    (c, 1.0 / m.sqrt())
}

#[test]
fn weight_cdf_matches_polynomial_law() {
    let gamma = 0.2;
    let e = env(2, 360, 1, ConductanceLaw::polynomial(gamma), 1);
    let w = e.weights();
    assert!(w.len() >= 1_000_000);
    let w = &w[..1_000_000];
    for a in [0.01f64, 0.1, 0.5] {
        let p = a.powf(gamma);
        let frac = w.iter().filter(|&&x| x <= a).count() as f64 / w.len() as f64;
        assert!(
            (frac - p).abs() <= 4.0 * (p * (1.0 - p) / w.len() as f64).sqrt(),
            "a={a}: {frac} vs {p}"
        );
    }
    let xi = xi_for_open_probability(&ConductanceLaw::polynomial(gamma), 0.9).unwrap();
    let open = w.iter().filter(|&&x| x > xi).count() as f64 / w.len() as f64;
    assert!((open - 0.9).abs() <= 4.0 * (0.09 / w.len() as f64).sqrt());
}

#[test]
fn weights_do_not_depend_on_enumeration_order() {
    let law = ConductanceLaw::polynomial(0.3);
    let e = env(3, 3, 1, law.clone(), 42);
    let mut keys = e.edge_keys();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in (1..keys.len()).rev() {
        keys.swap(i, rng.random_range(0..=i));
    }
    for (x, a) in keys {
        let direct = law.sample(edge_uniform(42, &x, a)).max(f64::MIN_POSITIVE);
        assert_eq!(e.weight(&x, a).unwrap().to_bits(), direct.to_bits());
    }
}

#[test]
fn even_sublattice_speeds_uncorrelated() {
    let law = ConductanceLaw::polynomial(0.3);
    let a = 1.0;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for seed in 0..10_000 {
        let f = pi_field(&env(2, 2, 1, law.clone(), seed)).unwrap();
        x.push(f.get(&[0, 0]).unwrap() <= a);
        y.push(f.get(&[2, 0]).unwrap() <= a);
    }
    let (c, s) = corr(&x, &y);
    assert!(c.abs() <= 4.0 * s, "corr {c}");
}

#[test]
fn edge_sum_form_oracle() {
    let n = 4;
    let e = env(2, n, 1, ConductanceLaw::polynomial(0.5), 11);
    let op = assemble_dirichlet_operator::<f64>(&e, n).unwrap();
    let inner = Cube::new(2, n as i64);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let f: Vec<f64> = (0..op.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let val = |x: &[i64]| inner.index(x).map_or(0.0, |i| f[i]);
        let mut sum = 0.0;
        for (x, a) in e.edge_keys() {
            let mut y = x.clone();
            y[a] += 1;
            let diff = val(&x) - val(&y);
            sum += e.weight(&x, a).unwrap() * diff * diff;
        }
        let q = op.quadratic_form(&f);
        assert!((q - sum).abs() <= 1e-12 * sum);
    }
}

#[test]
fn homogeneous_small_boxes() {
    let e = env(2, 1, 1, ConductanceLaw::constant(1.0), 0);
    let l = principal_eigenpair(
        &assemble_dirichlet_operator::<f64>(&e, 1).unwrap(),
        1e-12,
        1000,
    )
    .unwrap()
    .lambda1;
    assert!((l - 1.171_572_875_253_809_9).abs() < 1e-9);
}

#[test]
fn sparse_matches_dense_seed5() {
    let e = env(2, 5, 1, ConductanceLaw::polynomial(0.3), 5);
    let op = assemble_dirichlet_operator::<f64>(&e, 5).unwrap();
    let p = principal_eigenpair(&op, 1e-12, 10_000).unwrap();
    let d = dense_oracle(&op).unwrap();
    assert!((p.lambda1 - d.values[0]).abs() <= 1e-8 * d.values[0]);
    let dot: f64 = (0..op.dim()).map(|i| p.psi1[i] * d.vectors[(i, 0)]).sum();
    assert!(dot.abs() >= 1.0 - 1e-8);
}

#[test]
fn domain_monotonicity_and_rayleigh() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10 {
        let e = env(2, 12, 2, ConductanceLaw::polynomial(0.25), seed);
        let mut prev = f64::INFINITY;
        for n in [3usize, 6, 9, 12] {
            let op = assemble_dirichlet_operator::<f64>(&e, n).unwrap();
            let l = principal_eigenpair(&op, 1e-12, 10_000).unwrap().lambda1;
            assert!(l > 0.0);
            assert!(
                l <= prev * (1.0 + 1e-10),
                "seed {seed}, n {n}: {l} > {prev}"
            );
            prev = l;
            for _ in 0..5 {
                let f: Vec<f64> = (0..op.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let rq = op.quadratic_form(&f) / f.iter().map(|v| v * v).sum::<f64>();
                assert!(rq >= l * (1.0 - 1e-10));
            }
        }
    }
}

#[test]
fn census_matches_brute_force() {
    let (n, b) = (6usize, 2usize);
    let e = env(2, n, 2 * b + 1, ConductanceLaw::polynomial(0.5), 3);
    let alpha = 0.05;
    let mut best = 0;
    for z in Cube::new(2, (n + b) as i64).sites() {
        let mut c = 0;
        for (x, a) in e.edge_keys() {
            if x.iter().zip(&z).all(|(p, q)| (p - q).abs() <= b as i64)
                && e.weight(&x, a).unwrap() <= alpha
            {
                c += 1;
            }
        }
        best = best.max(c);
    }
    assert_eq!(bad_edge_census(&e, n, b, alpha).unwrap(), best);
}

#[test]
fn trap_count_mean_and_fluctuation() {
    let law = ConductanceLaw::polynomial(0.2);
    let g = ThresholdFamily::critical(0.2, 2);
    let n = 64;
    let alpha = g.eval(&law, n as f64);
    let counts: Vec<f64> = (0..200)
        .map(|s| {
            find_traps_with(&env(2, n, 1, law.clone(), s), n, alpha, 2, 6)
                .unwrap()
                .traps
                .len() as f64
        })
        .collect();
    let mean = counts.iter().sum::<f64>() / 200.0;
    let sd = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
    let expected = (129.0f64).powi(2) * law.cdf(alpha).powi(4);
    assert!(
        (mean - expected).abs() <= 4.0 * sd / 200f64.sqrt(),
        "{mean} vs {expected}"
    );

    // the mean count on [-n, n]^d is about 2^d, so presence is near 1 - e^{-4}
    for n in [32usize, 64] {
        let alpha = g.eval(&law, n as f64);
        let mean = ((2 * n + 1) as f64).powi(2) * law.cdf(alpha).powi(4);
        let p = 1.0 - (-mean).exp();
        let hit = (0..400)
            .filter(|&s| {
                !find_traps_with(&env(2, n, 1, law.clone(), 10_000 + s), n, alpha, 2, 6)
                    .unwrap()
                    .traps
                    .is_empty()
            })
            .count() as f64
            / 400.0;
        assert!(hit > 0.05, "n={n}: {hit}");
        assert!(
            (hit - p).abs() <= 4.0 * (p * (1.0 - p) / 400.0).sqrt(),
            "n={n}: {hit} vs {p}"
        );
    }
}

#[test]
fn even_sublattice_traps_uncorrelated() {
    let law = ConductanceLaw::polynomial(0.5);
    let alpha = 0.669f64.powi(2);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for seed in 0..10_000 {
        let r = find_traps_with(&env(2, 2, 1, law.clone(), seed), 2, alpha, 2, 6).unwrap();
        x.push(r.traps.contains(&vec![0, 0]));
        y.push(r.traps.contains(&vec![0, 2]));
    }
    let (c, s) = corr(&x, &y);
    assert!(c.abs() <= 4.0 * s, "corr {c}");
}

#[test]
fn hand_drawn_clusters() {
    // component A: columns x1 = -2, -1 plus (0, -2..=1); component B: (2, 0..=2)
    let mut edits = Vec::new();
    for x1 in [-2i64, -1] {
        for x2 in -2..2 {
            edits.push((vec![x1, x2], 1, 2.0));
        }
    }
    for x2 in -2..=2 {
        edits.push((vec![-2, x2], 0, 2.0));
    }
    for x2 in -2..=1 {
        edits.push((vec![-1, x2], 0, 2.0));
    }
    for x2 in -2..1 {
        edits.push((vec![0, x2], 1, 2.0));
    }
    edits.push((vec![2, 0], 1, 2.0));
    edits.push((vec![2, 1], 1, 2.0));
    let e = env(2, 2, 1, ConductanceLaw::constant(0.5), 0)
        .with_edits(&edits)
        .unwrap();
    let lab = clusters(&e, &threshold_open(&e, 1.0).unwrap(), 2).unwrap();
    let mut sizes: Vec<usize> = lab.in_box.iter().copied().filter(|&s| s > 0).collect();
    sizes.sort_unstable();
    let mut expected = vec![1; 8];
    expected.extend([3, 14]);
    assert_eq!(sizes, expected);
    assert!(lab.in_giant(&[0, 1]) && lab.in_giant(&[-2, 2]));
    assert!(!lab.in_giant(&[0, 2]));
    assert_eq!(lab.label_of(&[2, 0]), lab.label_of(&[2, 2]));
    assert_ne!(lab.label_of(&[2, 0]), lab.label_of(&[1, 0]));
}

#[test]
fn dn_monotone_in_threshold() {
    let law = ConductanceLaw::polynomial(0.2);
    for seed in 0..10 {
        let e = env(2, 32, 2, law.clone(), seed);
        let hi = build_dn_at(&e, law.inverse_cdf(0.3).unwrap(), 32).unwrap();
        let lo = build_dn_at(&e, law.inverse_cdf(0.1).unwrap(), 32).unwrap();
        for x in Cube::new(2, 32).sites() {
            assert!(!hi.contains(&x) || lo.contains(&x));
        }
    }
}

#[test]
fn xi_weighted_form_dominates_unit_form() {
    let law = ConductanceLaw::polynomial(0.3);
    let e = env(2, 16, 2, law.clone(), 4);
    let xi = xi_for_open_probability(&law, 0.8).unwrap();
    let lab = clusters(&e, &threshold_open(&e, xi).unwrap(), 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cube = e.cube();
    for _ in 0..100 {
        let f: Vec<f64> = (0..cube.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (mut unit, mut weighted) = (0.0, 0.0);
        for (x, a) in e.edge_keys() {
            let mut y = x.clone();
            y[a] += 1;
            if lab.in_giant(&x) && lab.is_open(&x, &y) == Some(true) {
                let diff = f[cube.index(&x).unwrap()] - f[cube.index(&y).unwrap()];
                unit += diff * diff;
                weighted += e.weight(&x, a).unwrap() * diff * diff;
            }
        }
        assert!(xi * unit <= weighted * (1.0 + 1e-12));
    }
}

#[test]
fn holes_sparse_under_census() {
    let law = ConductanceLaw::polynomial(0.2);
    let g = ThresholdFamily::critical(0.2, 2);
    let (n, b) = (64usize, 6usize);
    let mut applicable = 0;
    for seed in 0..50 {
        let e = env(2, n, 2 * b + 1, law.clone(), seed);
        let dn = build_dn(&e, &g, 0.25, n).unwrap();
        if bad_edge_census(&e, n, b, dn.threshold).unwrap() <= 5 {
            assert!(is_b_sparse(&dn.holes, b).0, "seed {seed}");
        }
        let nu = law.inverse_cdf(1e-3).unwrap();
        if bad_edge_census(&e, n, b, nu).unwrap() <= 5 {
            applicable += 1;
            assert!(
                is_b_sparse(&build_dn_at(&e, nu, n).unwrap().holes, b).0,
                "seed {seed} at nu"
            );
        }
    }
    assert!(applicable > 0);
}

#[test]
fn composed_path_bound_against_log_power_form() {
    // (2^{d+1}(log n)^{4d^2}/g + 3 c1 n^2/xi)^{-1} with L = (log n)^{2d}, mu = xi/(c1 n^2);
    // (2L)^{d+1} has exponent 2d(d+1) <= 4d^2, tight only for d = 1
    let (n, g, xi, c1) = (1000f64, 1e-7, 0.3, 2.0);
    for d in [1usize, 2, 3] {
        let l = n.ln().powi(2 * d as i32);
        let lhs = pathvsrw_bound(g, l, xi / (c1 * n * n), d).unwrap();
        let rhs = 1.0
            / (2f64.powi(d as i32 + 1) * n.ln().powi(4 * (d * d) as i32) / g
                + 3.0 * c1 * n * n / xi);
        if d == 1 {
            assert!((lhs - rhs).abs() <= 1e-12 * rhs);
        } else {
            assert!(lhs > rhs);
        }
    }
}

#[test]
fn quotient_gap_is_usually_large() {
    // limit: P[gap <= t] = 1 - (1 - t)^{2d gamma}
    let law = ConductanceLaw::polynomial(0.2);
    let n = 64;
    let t = (n as f64).powf(-0.5);
    let big = (0..300)
        .filter(|&s| {
            let f = pi_field(&env(2, n, 1, law.clone(), s)).unwrap();
            rcmlab::extremes::quotient_statistic(&f, n, 1).unwrap() > t
        })
        .count() as f64
        / 300.0;
    let p = (1.0 - t).powf(0.8);
    assert!(big >= 0.85, "{big}");
    assert!(
        (big - p).abs() <= 4.0 * (p * (1.0 - p) / 300.0).sqrt(),
        "{big} vs {p}"
    );
}

#[test]
fn chi_translates_uncorrelated() {
    let law = ConductanceLaw::polynomial(0.5);
    let a = 0.3;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for seed in 0..10_000 {
        let chi = sample_chi(&law, 2, 1, 4, seed).unwrap();
        x.push(chi[0] <= a);
        y.push(chi[1] <= a);
    }
    let (c, s) = corr(&x, &y);
    assert!(c.abs() <= 4.0 * s, "corr {c}");
}

#[test]
fn f_pi_index_and_scaling_inequality() {
    for gamma in [0.2, 0.5] {
        let m = TailModel::new(ConductanceLaw::polynomial(gamma), 2).unwrap();
        let (a1, a2) = (1e-4, 1e-2);
        let slope = (m.f_pi_table(a2).unwrap() / m.f_pi_table(a1).unwrap()).ln() / (a2 / a1).ln();
        assert!(
            (slope - 4.0 * gamma).abs() <= 0.02 * 4.0 * gamma,
            "gamma {gamma}: slope {slope}"
        );
        for a in [0.01, 0.1, 0.5, 1.0] {
            for b in [0.0, 0.1, 0.5, 0.9, 1.0] {
                assert!(m.f_pi(a * b).unwrap() >= b.powi(4) * m.f_pi(a).unwrap() - 1e-12);
            }
        }
    }
    assert!((c_gamma(0.5, 2) - std::f64::consts::PI.powi(2) / 32.0).abs() < 1e-14);
}

#[test]
fn exponential_spacings() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let reps: Vec<Vec<f64>> = (0..10_000)
        .map(|_| {
            (0..100)
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect()
        })
        .collect();
    let s1 = spacing_diagnostics(&reps, 1).unwrap();
    assert!(ks_distance(&s1, |x| -(-x.max(0.0)).exp_m1()).unwrap() <= 0.02);
    let s2 = spacing_diagnostics(&reps, 2).unwrap();
    let mut sorted = s2.clone();
    sorted.sort_by(f64::total_cmp);
    let med = sorted[sorted.len() / 2];
    let big1: Vec<bool> = s1.iter().map(|v| *v > std::f64::consts::LN_2).collect();
    let small2: Vec<bool> = s2.iter().map(|v| *v <= med).collect();
    let (c, s) = corr(&big1, &small2);
    assert!(c.abs() <= 4.0 * s, "corr {c}");
}

#[test]
fn f_pi_sandwich() {
    let law = ConductanceLaw::polynomial(0.3);
    let m = TailModel::new(law.clone(), 2).unwrap();
    let lower = 4f64.powi(-4) * law.cdf(0.2).powi(4);
    assert!(lower <= m.f_pi(0.2).unwrap());
    assert!(m.f_pi(0.2).unwrap() <= law.cdf(0.2));
}

#[test]
fn bfs_grown_sets_have_boundary() {
    let n = 64;
    let law = ConductanceLaw::polynomial(0.2);
    let xi = xi_for_open_probability(&law, 0.9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tested = 0;
    for seed in 0..10 {
        let e = env(2, n, 2, law.clone(), seed);
        let lab = clusters(&e, &threshold_open(&e, xi).unwrap(), n).unwrap();
        let giant = lab.giant_sites(n);
        for _ in 0..10 {
            let start = giant[rng.random_range(0..giant.len())].clone();
            let mut set = vec![start.clone()];
            let mut seen = std::collections::HashSet::from([start]);
            let mut i = 0;
            while set.len() < 50 && i < set.len() {
                let x = set[i].clone();
                i += 1;
                for a in 0..2 {
                    for s in [-1, 1] {
                        let mut y = x.clone();
                        y[a] += s;
                        if set.len() < 50
                            && y.iter().all(|c| c.abs() <= n as i64)
                            && lab.in_giant(&y)
                            && lab.is_open(&x, &y) == Some(true)
                            && seen.insert(y.clone())
                        {
                            set.push(y);
                        }
                    }
                }
            }
            if set.len() == 50 {
                tested += 1;
                assert!(edge_boundary_ratio(&lab, &set, n).unwrap() * n as f64 >= 0.5);
            }
        }
    }
    assert!(tested >= 90);
}

#[test]
fn detour_certificates_validate() {
    let (n, d) = (32usize, 2usize);
    let law = ConductanceLaw::polynomial(0.2);
    let nu = law.inverse_cdf(1e-3).unwrap();
    for (p, nonvacuous) in [(0.95, false), (0.7, true)] {
        let xi = xi_for_open_probability(&law, p).unwrap();
        let mut ok = 0;
        let mut sources = 0;
        for seed in 0..60 {
            if ok == 20 {
                break;
            }
            let e = env(d, n, 6 * d + 1, law.clone(), seed);
            let lab = clusters(&e, &threshold_open(&e, xi).unwrap(), n).unwrap();
            let Ok(hm) = build_hole_map(&lab, n) else {
                continue;
            };
            let src: Vec<_> = hm.phi.iter().map(|(x, _)| x.clone()).collect();
            let Ok(pm) = build_detour_paths(&e, &src, &hm, nu) else {
                continue;
            };
            pm.validate(&e).unwrap();
            assert!(pm.min_weight > nu);
            sources += src.len();
            ok += 1;
        }
        assert_eq!(ok, 20);
        assert!(!nonvacuous || sources > 0);
    }
}

#[test]
fn paths_experiment_with_holes() {
    let mut cfg = ExperimentConfig::new(Experiment::Paths);
    cfg.gamma = Some(0.2);
    cfg.n_grid = vec![16];
    cfg.seeds = 6;
    cfg.p = Some(0.7);
    cfg.threads = Some(1);
    let out = run(&cfg).unwrap();
    let audits: Vec<_> = out
        .runs
        .iter()
        .filter_map(|r| r.extras.paths.clone())
        .filter(|a| a.status == "ok")
        .collect();
    assert!(!audits.is_empty());
    assert!(audits.iter().any(|a| a.sources > 0));
    for a in &audits {
        assert!(a.min_rel_slack >= 0.0);
        assert!(a.bound <= a.lambda_g);
    }
}
