//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Every criterion is evaluated even when an earlier one fails. The process
//! exits nonzero on a failure only when `ACCEPTANCE_STRICT=1`, so the rest of
//! the workspace tests stay usable while a stochastic criterion misses.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ipsattn::bspline::{build_knots, Interval, SplineKernel};
use ipsattn::datagen::{generate_dataset, sample_ground_truth, sample_tokens, InteractionMatrix, MatrixScheme};
use ipsattn::estimator::{design_matrix, loss_and_grad_a, ridge_solve, select_hyperparams};
use ipsattn::evaluation::{composed_mse, theoretical_slope, PairInteraction, RateStudyReport};
use ipsattn::experiment::theory_check::{coercivity_trials, theory_matrix, theory_report, MARGIN_Z};
use ipsattn::experiment::{run_rate_study_in, ExperimentConfig};
use ipsattn::theory::{
    build_hypotheses, coercivity_check, estimate_pu, kl_budget, LowerBoundConstants, LowerBoundParams,
};

const SLOPE_TOL: f64 = 0.15;
const TARGET_SLOPE: f64 = -0.800;
const SMOOTHNESS_GAP: f64 = 0.05;
const STABILITY_TOL: f64 = 0.10;

struct Outcome {
    failures: usize,
}

impl Outcome {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn hyperparameter_rule(out: &mut Outcome) {
    let expected = [(20_000, 73), (27_355, 78), (37_416, 82), (51_177, 87), (70_000, 92)];
    let got: Vec<usize> = expected.iter().map(|&(m, _)| select_hyperparams(m, 3, 2.0, 16.0, 2.0).unwrap().0).collect();
    let pass = expected.iter().zip(&got).all(|(&(_, k), &g)| k == g);
    out.record("hyperparameter rule", pass, format!("K_est = {got:?}, expected [73, 78, 82, 87, 92]"));
}

fn spline_suite(out: &mut Outcome) {
    let mut r = rng(101);
    let mut pou: f64 = 0.0;
    for _ in 0..60 {
        let p = r.random_range(0..=8);
        let k = r.random_range(p + 1..p + 40);
        let lo = r.random_range(-3.0..0.0);
        let kv = build_knots(p, k, Interval::new(lo, lo + r.random_range(0.1..4.0))).unwrap();
        for _ in 0..1000 {
            let u = r.random_range(kv.domain().lo..=kv.domain().hi);
            pou = pou.max((kv.eval_basis(u).iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut deriv: f64 = 0.0;
    let h = 1e-6;
    for p in 3..=8 {
        for _ in 0..5 {
            let kv = build_knots(p, 16, Interval::symmetric(1.0)).unwrap();
            let theta: Vec<f64> = (0..16).map(|_| r.sample(StandardNormal)).collect();
            let s = SplineKernel::new(kv, theta).unwrap();
            for _ in 0..200 {
                let u = r.random_range(-1.0 + 2.0 * h..1.0 - 2.0 * h);
                let fd = (s.eval(u + h) - s.eval(u - h)) / (2.0 * h);
                let d = s.eval_deriv(u).unwrap();
                deriv = deriv.max((d - fd).abs() / d.abs().max(1.0));
            }
        }
    }

    let mut poly_err: f64 = 0.0;
    for (p, k) in [(1, 6), (2, 9), (3, 16), (5, 20), (8, 30)] {
        let kv = build_knots(p, k, Interval::new(-1.5, 0.75)).unwrap();
        let coeffs: Vec<f64> = (0..=p).map(|_| r.random_range(-1.0..1.0)).collect();
        let poly = |u: f64| coeffs.iter().rev().fold(0.0, |acc, c| acc * u + c);
        let t = kv.knots();
        let sites: Vec<f64> = (0..k).map(|i| t[i + 1..=i + p].iter().sum::<f64>() / p as f64).collect();
        let colloc = DMatrix::from_fn(k, k, |row, col| kv.eval_basis(sites[row])[col]);
        let rhs = nalgebra::DVector::from_iterator(k, sites.iter().map(|&s| poly(s)));
        let theta = colloc.lu().solve(&rhs).unwrap();
        let s = SplineKernel::new(kv, theta.iter().copied().collect()).unwrap();
        for _ in 0..1000 {
            let u = r.random_range(-1.5..=0.75);
            poly_err = poly_err.max((s.eval(u) - poly(u)).abs());
        }
    }
    out.record(
        "spline property suite",
        pou <= 1e-12 && deriv <= 1e-6 && poly_err <= 1e-9,
        format!("partition of unity {pou:.1e} (<= 1e-12), derivative {deriv:.1e} (<= 1e-6), reproduction {poly_err:.1e} (<= 1e-9)"),
    );
}

fn brute_forward(kernel: &SplineKernel, a: &InteractionMatrix, x: &[f64], n: usize, d: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let mut u = 0.0;
                for p in 0..d {
                    for q in 0..d {
                        u += x[i * d + p] * a.get(p, q) * x[j * d + q];
                    }
                }
                s += kernel.eval(u);
            }
            s / (n - 1) as f64
        })
        .collect()
}

fn oracle_suite(out: &mut Outcome) {
    let mut r = rng(202);

    // Ridge against an explicit inverse.
    let mut ridge_err: f64 = 0.0;
    for _ in 0..10 {
        let (rows, cols) = (30, 6);
        let u = DMatrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..rows).map(|_| r.sample(StandardNormal)).collect();
        let lambda = r.random_range(1e-3..1.0);
        let got = ridge_solve(&u, &y, lambda).unwrap();
        let inv = (u.transpose() * &u + DMatrix::identity(cols, cols) * lambda).try_inverse().unwrap();
        let want = inv * u.transpose() * nalgebra::DVector::from_column_slice(&y);
        for (g, w) in got.iter().zip(want.iter()) {
            ridge_err = ridge_err.max((g - w).abs());
        }
    }

    // Design matrix and composed error against pair loops.
    let (d, n, m) = (3, 4, 25);
    let truth = sample_ground_truth(&mut r, d, 3, 10, MatrixScheme::Diagonal, 1.0).unwrap();
    let ds = generate_dataset(&mut r, &truth, m, n, 0.05).unwrap();
    let kv = build_knots(3, 8, Interval::symmetric(1.0)).unwrap();
    let design = design_matrix(&ds, &truth.matrix, &kv).unwrap();
    let mut design_err: f64 = 0.0;
    for s in 0..m {
        let x = ds.tokens.sample(s);
        for k in 0..8 {
            let mut e = vec![0.0; 8];
            e[k] = 1.0;
            let basis = SplineKernel::new(kv.clone(), e).unwrap();
            let col = brute_forward(&basis, &truth.matrix, x, n, d);
            for i in 0..n {
                design_err = design_err.max((design[(s * n + i, k)] - col[i]).abs());
            }
        }
    }
    let other = sample_ground_truth(&mut r, d, 3, 10, MatrixScheme::Diagonal, 1.0).unwrap();
    let est = PairInteraction { kernel: other.kernel.clone(), matrix: other.matrix.clone() };
    let tokens = sample_tokens(&mut r, 40, n, d).unwrap();
    let got = composed_mse(&est, &truth, &tokens).unwrap();
    let mut sum = 0.0;
    for s in 0..40 {
        let a = brute_forward(&est.kernel, &est.matrix, tokens.sample(s), n, d);
        let b = brute_forward(&truth.kernel, &truth.matrix, tokens.sample(s), n, d);
        sum += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    let composed_err = (got - sum / (40 * n) as f64).abs();

    // Gradient against central differences.
    let mut grad_err: f64 = 0.0;
    for inst in 0..10 {
        let d = 2 + inst % 3;
        let t = sample_ground_truth(&mut r, d, 3, 12, MatrixScheme::Diagonal, 1.0).unwrap();
        let ds = generate_dataset(&mut r, &t, 40, 3, 0.05).unwrap();
        let entries: Vec<f64> = (0..d * d).map(|_| 0.4 * r.random_range(-1.0..1.0) / d as f64).collect();
        let a = InteractionMatrix::unconstrained(d, entries.clone(), 1.0).unwrap();
        let penalty = 1e-3;
        let (_, g) = loss_and_grad_a(&ds, &a, &t.kernel, penalty).unwrap();
        let h = 1e-6;
        let mut fd = vec![0.0; d * d];
        for e in 0..d * d {
            let mut plus = entries.clone();
            let mut minus = entries.clone();
            plus[e] += h;
            minus[e] -= h;
            let lp = loss_and_grad_a(&ds, &InteractionMatrix::unconstrained(d, plus, 1.0).unwrap(), &t.kernel, penalty).unwrap().0;
            let lm = loss_and_grad_a(&ds, &InteractionMatrix::unconstrained(d, minus, 1.0).unwrap(), &t.kernel, penalty).unwrap().0;
            fd[e] = (lp - lm) / (2.0 * h);
        }
        let scale = g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let diff = g.iter().zip(&fd).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
        grad_err = grad_err.max(diff / scale);
    }
    out.record(
        "oracle equivalences",
        ridge_err <= 1e-10 && design_err <= 1e-12 && composed_err <= 1e-12 && grad_err <= 1e-5,
        format!(
            "ridge {ridge_err:.1e} (<= 1e-10), design {design_err:.1e} (<= 1e-12), composed {composed_err:.1e} (<= 1e-12), gradient {grad_err:.1e} rel (<= 1e-5)"
        ),
    );
}

fn coercivity_suite(out: &mut Outcome, config: &ExperimentConfig) {
    let checks = coercivity_trials(config).unwrap();
    let passed = checks.iter().filter(|c| c.holds_within(MARGIN_Z)).count();
    let worst = checks.iter().map(|c| c.margin / c.se).fold(f64::INFINITY, f64::min);
    let t = &config.theory;
    let knots = build_knots(3, 16, Interval::symmetric(1.0)).unwrap();
    let c = 0.37;
    let shifted = PairInteraction { kernel: SplineKernel::constant(knots.clone(), c), matrix: theory_matrix(config).unwrap() };
    let zero = PairInteraction { kernel: SplineKernel::constant(knots, 0.0), matrix: theory_matrix(config).unwrap() };
    let tokens = sample_tokens(&mut rng(303), t.coercivity_samples, config.tokens, t.dim).unwrap();
    let k = coercivity_check(&shifted, &zero, &tokens).unwrap();
    let nm1 = (config.tokens - 1) as f64;
    let const_err = (k.lhs - c * c / nm1).abs().max((k.rhs - c * c).abs());
    out.record(
        "coercivity suite",
        checks.len() == 50 && passed == 50 && const_err <= 1e-10,
        format!(
            "{passed}/{} pairs (N={}, d={}, {} tokens) with margin >= -3 se, worst {worst:.2} se; constant case error {const_err:.1e} (<= 1e-10)",
            checks.len(),
            config.tokens,
            t.dim,
            t.coercivity_samples
        ),
    );
}

fn lower_bound_suite(out: &mut Outcome, config: &ExperimentConfig) {
    let mut quiet = config.clone();
    quiet.theory.coercivity_trials = 0;
    let report = theory_report(&quiet).unwrap();
    let mut pass = report.lower_bound.len() == 2;
    let mut parts = Vec::new();
    for e in &report.lower_bound {
        let c = &e.check;
        pass &= c.sup_ok && c.separation_ok && c.hamming_ok && c.inside_super_level && c.hypotheses > 1 << (c.kbar / 8);
        parts.push(format!(
            "K̄={}: sup {:.2e}<={:.2e}, sep {:.2e}>={:.2e}, hamming {}>={}, K={}",
            c.kbar,
            c.max_sup_norm,
            c.amplitude,
            c.min_separation,
            c.required_separation,
            c.min_hamming,
            c.hamming_floor,
            c.hypotheses - 1
        ));
    }
    pass &= report.lower_bound.iter().map(|e| e.check.kbar).eq([16, 32]);

    // KL scales exactly with the squared amplitude.
    let t = &config.theory;
    let a = theory_matrix(config).unwrap();
    let density_tokens = sample_tokens(&mut rng(404), t.density_samples, config.tokens, t.dim).unwrap();
    let density = estimate_pu(&density_tokens, &a, t.bins).unwrap();
    let params = LowerBoundParams { tokens: config.tokens, beta: t.beta, holder: t.holder, noise_sd: config.noise_sd, floor: t.floor };
    let constants = LowerBoundConstants::new(&density, params).unwrap();
    let kl_tokens = sample_tokens(&mut rng(405), 500, config.tokens, t.dim).unwrap();
    let mut ratio_err: f64 = 0.0;
    for kbar in [16, 32] {
        let set = build_hypotheses(&constants, constants.sample_size_for(kbar), None, &mut rng(406)).unwrap();
        for k in 1..set.count() {
            let base = kl_budget(&set, k, &a, &kl_tokens, config.noise_sd).unwrap();
            for scale in [0.5, 2.0, 3.7] {
                let scaled = kl_budget(&set.rescaled(scale), k, &a, &kl_tokens, config.noise_sd).unwrap();
                ratio_err = ratio_err.max((scaled / (scale * scale * base) - 1.0).abs());
            }
        }
    }
    pass &= ratio_err <= 1e-10;
    parts.push(format!("KL ratio error {ratio_err:.1e} (<= 1e-10)"));
    out.record("lower-bound construction suite", pass, parts.join("; "));
}

fn study(config: &ExperimentConfig, name: &str) -> RateStudyReport {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let start = Instant::now();
    let report = run_rate_study_in(config, None, &dir).unwrap();
    eprintln!("  {name}: {} cells in {:.0}s -> {}", report.records.len(), start.elapsed().as_secs_f64(), dir.display());
    report
}

fn slope(report: &RateStudyReport, d: usize, beta: f64) -> f64 {
    report.slope(d, beta).map(|s| s.fit.slope).unwrap_or(f64::NAN)
}

fn rate_suite(out: &mut Outcome, base: &ExperimentConfig) {
    let mut dims = base.clone();
    dims.dims = vec![1, 5, 30];
    let beta2 = study(&dims, "beta2");
    let s5 = slope(&beta2, 5, 2.0);
    out.record(
        "rate reproduction (d=5, beta=2)",
        (s5 - TARGET_SLOPE).abs() <= SLOPE_TOL,
        format!("slope {s5:.3}, target {TARGET_SLOPE:.3} +/- {SLOPE_TOL}"),
    );

    let slopes: Vec<(usize, f64)> = [1, 5, 30].iter().map(|&d| (d, slope(&beta2, d, 2.0))).collect();
    let spread = slopes.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max) - slopes.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let each = slopes.iter().all(|s| (s.1 - TARGET_SLOPE).abs() <= SLOPE_TOL);
    out.record(
        "dimension independence (d in {1, 5, 30})",
        each && spread <= SLOPE_TOL,
        format!(
            "slopes {}; max pairwise gap {spread:.3} (<= {SLOPE_TOL}); each within {SLOPE_TOL} of {TARGET_SLOPE:.3}: {each}",
            slopes.iter().map(|(d, s)| format!("d={d} {s:.3}")).collect::<Vec<_>>().join(", ")
        ),
    );

    let mut smooth = base.clone();
    smooth.degrees = vec![8];
    let beta7 = study(&smooth, "beta7");
    let s7 = slope(&beta7, 5, 7.0);
    out.record(
        "smoothness ordering (beta=7 vs beta=2)",
        s7 <= s5 - SMOOTHNESS_GAP,
        format!(
            "beta=7 slope {s7:.3} (theory {:.3}) vs beta=2 slope {s5:.3}; required gap {SMOOTHNESS_GAP}",
            theoretical_slope(7.0).unwrap()
        ),
    );

    let mut block = base.clone();
    block.seed_offset = base.seed_offset + base.seeds;
    let replicate = study(&block, "beta2_block2");
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (a, b) in beta2.cells_for(5, 2.0).iter().zip(replicate.cells_for(5, 2.0)) {
        let change = (b.median_composed - a.median_composed).abs() / a.median_composed;
        worst = worst.max(change);
        parts.push(format!("M={} {:+.1}%", a.m, 100.0 * (b.median_composed / a.median_composed - 1.0)));
    }
    out.record(
        "seed stability (d=5, disjoint block of 20 seeds)",
        worst < STABILITY_TOL,
        format!("median changes {}; max {:.1}% (< 10%); replicate slope {:.3}", parts.join(", "), 100.0 * worst, slope(&replicate, 5, 2.0)),
    );
}

fn main() {
    let start = Instant::now();
    let mut out = Outcome { failures: 0 };
    let config = ExperimentConfig::default();
    hyperparameter_rule(&mut out);
    spline_suite(&mut out);
    oracle_suite(&mut out);
    coercivity_suite(&mut out, &config);
    lower_bound_suite(&mut out, &config);
    rate_suite(&mut out, &config);
    println!("acceptance: {} failing criteria, {:.0}s", out.failures, start.elapsed().as_secs_f64());
    if out.failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
