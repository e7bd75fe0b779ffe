//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p midterm --test acceptance`.

use std::path::Path;
use std::time::{Duration, Instant};

use midterm::evaluation::{
    area_between, concentration_lorenz, default_m_grid, murphy_curve, murphy_dominates, normalized_deviance, score,
    DatasetTag,
};
use midterm::fit::{
    bootstrap_curve_difference, consistency_gradient_sum, fit, search_cutpoint, BmsGrouping, FitResult, FitSpec,
    WeightScheme,
};
use midterm::penalty::{adjust, constrain, constrain_fit, constrain_values, penalty, refit_with_offset, schedule_grid};
use midterm::portfolio::{simulate, split, DeltaLaw, GroupLaw, Portfolio, SyntheticSpec};
use midterm::spline::{ExposureCurve, KnotGrid};
use midterm::tweedie::TweedieParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 2024;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Portfolio shared by criteria 3, 4, 5, 7 and 8.
fn criterion3_data(delta: DeltaLaw) -> Portfolio {
    let spec = SyntheticSpec { n: 100_000, delta, xo_fraction: 0.65, seed: SEED, ..SyntheticSpec::default() };
    simulate(&spec).expect("valid spec")
}

fn truth() -> Vec<f64> {
    let s = SyntheticSpec::default();
    let mut b = s.beta_true.clone();
    b.push(s.beta_bms);
    b
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c1_sampler_moments() -> Outcome {
    let start = Instant::now();
    let params = TweedieParams::new(2.0, 1.0, 1.0, 1.42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let n = 200_000;
    let draws: Vec<f64> = (0..n).map(|_| params.sample(&mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let zeros = draws.iter().filter(|&&y| y == 0.0).count() as f64 / n as f64;
    let p0 = params.to_compound().zero_mass();
    let se0 = (p0 * (1.0 - p0) / n as f64).sqrt();
    let target_var = 2f64.powf(1.42);
    let elapsed = start.elapsed();
    let pass = (mean - 2.0).abs() / 2.0 < 0.01
        && (var - target_var).abs() / target_var < 0.05
        && (zeros - p0).abs() <= 3.0 * se0
        && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!(
            "mean {mean:.4} (2 +/- 1%), variance {var:.4} ({target_var:.4} +/- 5%), zero mass {zeros:.4} vs {p0:.4} (+/- {:.4}), {:.2}s (< 10s)",
            3.0 * se0,
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_compound_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let mu = 10f64.powf(rng.random_range(-3.0..3.0));
        let phi = 10f64.powf(rng.random_range(-2.0..2.0));
        let w = 10f64.powf(rng.random_range(-2.0..2.0));
        let p = rng.random_range(1.01..1.99);
        let c = TweedieParams::new(mu, phi, w, p).unwrap().to_compound();
        let product = c.poisson_mean * c.gamma_shape * c.gamma_scale();
        worst = worst.max((product - mu).abs() / mu).max((c.poisson_mean * c.gamma_mean - mu).abs() / mu);
    }
    outcome(
        worst <= 1e-12,
        format!("max relative error of poisson_mean * shape * scale (= poisson_mean * severity mean) vs mu: {worst:.2e} (<= 1e-12)"),
    )
}

fn c3_consistency(data: &Portfolio) -> Outcome {
    let start = Instant::now();
    let beta_true = truth();
    let ewm = fit(data, &FitSpec::new(WeightScheme::Ewm)).unwrap();
    let ratio = fit(data, &FitSpec::new(WeightScheme::TraditionalRatio)).unwrap();
    let ewm_err = max_abs_diff(&ewm.beta, &beta_true);
    let (j, ratio_err) = ratio
        .beta
        .iter()
        .zip(&beta_true)
        .map(|(b, t)| (b - t).abs())
        .enumerate()
        .fold((0, 0.0), |acc, (j, e)| if e > acc.1 { (j, e) } else { acc });
    let weights = ratio.weights.weights(&data.exposures());
    let delta = DeltaLaw::Power { alpha: 0.6 };
    let identity = |t: f64| t;
    let grad =
        consistency_gradient_sum(data, &ratio.design, &beta_true, &beta_true, &delta, &identity, &weights, 1.42).unwrap();
    let bias = ratio.beta[j] - beta_true[j];
    let sign_ok = grad[j].signum() == bias.signum();

    let control = fit(&criterion3_data(DeltaLaw::Identity), &FitSpec::new(WeightScheme::TraditionalRatio)).unwrap();
    let control_err = max_abs_diff(&control.beta, &beta_true);
    let elapsed = start.elapsed();
    let pass = ewm_err <= 0.05 && ratio_err > 0.1 && sign_ok && control_err <= 0.05 && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "EWM max |beta - truth| {ewm_err:.4} (<= 0.05); ratio max error {ratio_err:.4} on {} (> 0.1), bias {bias:+.4} with gradient {:+.4}; control ratio max error {control_err:.4} (<= 0.05); {:.1}s (< 300s)",
            ratio.names()[j],
            grad[j],
            elapsed.as_secs_f64()
        ),
    )
}

fn c4_gwm(data: &Portfolio) -> Outcome {
    let f = fit(data, &FitSpec::new(WeightScheme::Gwm)).unwrap();
    let iterations = f.trace.len();
    let last = f.trace.last().and_then(|s| s.weight_change).unwrap_or(f64::INFINITY);
    let changes: Vec<f64> = f.trace.iter().skip(1).filter_map(|s| s.change).collect();
    let decreasing = changes.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = changes.iter().map(|c| format!("{c:.2e}")).collect();
    outcome(
        iterations <= 10 && last < 1e-4 && decreasing && f.converged,
        format!(
            "{iterations} iterations (<= 10), final weight change {last:.2e} (< 1e-4), changes [{}] decreasing: {decreasing}",
            shown.join(", ")
        ),
    )
}

fn c5_deviance_ordering(train: &Portfolio, test: &Portfolio) -> Outcome {
    let dev = |f: &FitResult, d: &Portfolio| score("m", f, d, DatasetTag::Test, None).unwrap().0.deviance;
    let ratio = fit(train, &FitSpec::new(WeightScheme::TraditionalRatio)).unwrap();
    let ratio_test = dev(&ratio, test);
    let mut pass = true;
    let mut parts = vec![format!("ratio test {ratio_test:.5}")];
    for scheme in [WeightScheme::Cwm, WeightScheme::Gwm, WeightScheme::Ewm] {
        let f = fit(train, &FitSpec::new(scheme)).unwrap();
        let (tr, te) = (dev(&f, train), dev(&f, test));
        let gap = (te - tr).abs() / tr;
        pass &= te < ratio_test && gap < 0.02;
        parts.push(format!("{scheme} test {te:.5} gap {:.2}%", 100.0 * gap));
    }
    outcome(pass, format!("{} (flexible < ratio, gap < 2%)", parts.join(", ")))
}

/// Hildreth dual coordinate ascent for the 20-point projection problem.
/// Stationarity holds by construction, so it stops on the remaining KKT
/// conditions: primal feasibility and complementary slackness.
fn qp_oracle(grid: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    for j in 0..n - 1 {
        rows.push((vec![(j, 1.0), (j + 1, -1.0)], 0.0));
    }
    for j in 0..n {
        rows.push((vec![(j, -1.0)], -grid[j]));
        rows.push((vec![(j, 1.0)], 1.0));
    }
    rows.push((vec![(n - 1, -1.0)], -1.0));
    let mut lambda = vec![0.0; rows.len()];
    let mut g = y.to_vec();
    for _ in 0..5_000_000 {
        let mut worst: f64 = 0.0;
        for (k, (a, b)) in rows.iter().enumerate() {
            let ag: f64 = a.iter().map(|&(j, c)| c * g[j]).sum();
            let norm: f64 = a.iter().map(|(_, c)| c * c).sum();
            let new = (lambda[k] + (ag - b) / norm).max(0.0);
            let d = new - lambda[k];
            for &(j, c) in a {
                g[j] -= d * c;
            }
            lambda[k] = new;
            worst = worst.max(ag - b);
            if new > 0.0 {
                worst = worst.max((ag - b).abs());
            }
        }
        if worst < 1e-13 {
            break;
        }
    }
    g
}

fn random_log_curve(rng: &mut ChaCha8Rng) -> ExposureCurve {
    let grid = KnotGrid::default_exposure();
    let alpha = rng.random_range(0.1..1.2);
    let bump = rng.random_range(-0.4..0.6);
    let centre = rng.random_range(0.2..0.9);
    let c: Vec<f64> = grid
        .knots()
        .iter()
        .map(|&t| {
            let shape = alpha * t.ln() + bump * (-(t - centre).powi(2) / 0.02).exp() - bump * (-(1.0 - centre).powi(2) / 0.02).exp();
            shape + rng.random_range(-0.1..0.1)
        })
        .collect();
    let mut c = c;
    let last = *c.last().unwrap();
    c.iter_mut().for_each(|v| *v -= last);
    ExposureCurve::new(grid, c).unwrap()
}

fn c6_constraints() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let grid20 = schedule_grid(20);
    let (mut exact, mut idempotent, mut worst_oracle, mut above_one) = (true, true, 0.0f64, 0);
    for _ in 0..100 {
        let s = random_log_curve(&mut rng);
        let gamma = |t: f64| s.evaluate(t.max(s.grid().first())).unwrap().exp();
        let sched = constrain(&gamma).unwrap();
        let (g, t) = (sched.gamma_con(), sched.grid());
        exact &= g.windows(2).all(|w| w[1] >= w[0])
            && g.iter().zip(t).all(|(v, x)| v >= x && *v <= 1.0)
            && *g.last().unwrap() == 1.0;
        idempotent &= constrain_values(t, g).unwrap() == g;
        let y: Vec<f64> = grid20.iter().map(|&x| gamma(x)).collect();
        above_one += y.iter().any(|&v| v > 1.0) as usize;
        let proj = constrain_values(&grid20, &y).unwrap();
        worst_oracle = worst_oracle.max(max_abs_diff(&proj, &qp_oracle(&grid20, &y)));
    }
    outcome(
        exact && idempotent && worst_oracle <= 1e-6,
        format!(
            "invariants exact: {exact}, idempotent: {idempotent}, max deviation from QP oracle {worst_oracle:.2e} (<= 1e-6); {above_one}/100 curves exceed 1 somewhere"
        ),
    )
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

fn c7_smoothing(train: &Portfolio, test: &Portfolio) -> Outcome {
    let ewm = fit(train, &FitSpec::new(WeightScheme::Ewm)).unwrap();
    let sched = constrain_fit(&ewm).unwrap();
    let endpoints = adjust(&sched, 0.0).unwrap().gamma_adj() == sched.grid()
        && adjust(&sched, 1.0).unwrap().gamma_adj() == sched.gamma_con();
    let mut increasing = true;
    for (&t, &g) in sched.grid().iter().zip(sched.gamma_con()) {
        let pens: Vec<f64> = (0..=20).map(|k| penalty(&adjust(&sched, k as f64 / 20.0).unwrap(), t, 1.0).unwrap()).collect();
        if g > t {
            increasing &= pens.windows(2).all(|w| w[1] > w[0]);
        }
    }
    let a_values = [0.0, 0.25, 0.5, 0.75, 1.0];
    let spec = FitSpec::new(WeightScheme::Ewm);
    let (mut devs, mut areas) = (Vec::new(), Vec::new());
    for &a in &a_values {
        let r = refit_with_offset(train, &adjust(&sched, a).unwrap(), &spec, &ewm.weights).unwrap();
        let rep = score("a", &r, test, DatasetTag::Test, None).unwrap().0;
        devs.push(rep.deviance);
        areas.push(rep.area);
    }
    // improvement = lower score
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    let (rho_dev, rho_area) = (spearman(&a_values, &neg(&devs)), spearman(&a_values, &neg(&areas)));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(", ");
    outcome(
        endpoints && increasing && rho_dev == 1.0 && rho_area == 1.0,
        format!(
            "endpoints exact: {endpoints}, penalty strictly increasing in a: {increasing}; test deviance [{}] Spearman {rho_dev}; area [{}] Spearman {rho_area} (both +1)",
            fmt(&devs),
            fmt(&areas)
        ),
    )
}

fn c8_murphy(data: &Portfolio) -> Outcome {
    let ewm = fit(data, &FitSpec::new(WeightScheme::Ewm)).unwrap();
    let sched = constrain_fit(&ewm).unwrap();
    let refit = refit_with_offset(data, &sched, &FitSpec::new(WeightScheme::Ewm), &ewm.weights).unwrap();
    let y = data.losses();
    let (mu_u, mu_c) = (ewm.predict(data), refit.predict(data));
    let grid = default_m_grid(&mu_u.iter().chain(&mu_c).copied().collect::<Vec<_>>());
    let d = murphy_dominates(&grid, &murphy_curve(&y, &mu_u, &grid).unwrap(), &murphy_curve(&y, &mu_c, &grid).unwrap(), 0.0)
        .unwrap();
    outcome(
        d.fraction >= 0.95,
        format!("unconstrained EWM at or below the constrained refit at {:.1}% of {} grid points (>= 95%)", 100.0 * d.fraction, grid.len()),
    )
}

fn c9_evaluation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut murphy_err: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=100);
        let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.6) { 0.0 } else { rng.random_range(0.0..20.0) }).collect();
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(1..40) as f64 * 0.1).collect();
        let mut m = default_m_grid(&mu);
        m.extend(&mu);
        let fast = murphy_curve(&y, &mu, &m).unwrap();
        for (v, &mm) in fast.iter().zip(&m) {
            let mut s = 0.0;
            for i in 0..n {
                if mu[i] > mm {
                    s += mm - y[i];
                }
            }
            murphy_err = murphy_err.max((v - s / (2.0 * n as f64)).abs());
        }
    }
    let (mut prop_err, mut triangle) = (0.0f64, true);
    for _ in 0..100 {
        let n = rng.random_range(1..=200);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
        let c = rng.random_range(0.1..10.0);
        let mu: Vec<f64> = y.iter().map(|v| c * v).collect();
        let cl = concentration_lorenz(&y, &mu).unwrap();
        prop_err = prop_err.max(max_abs_diff(&cl.cc, &cl.lc)).max(area_between(&cl).unwrap().area);
        let y2: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..10.0) }).collect();
        if y2.iter().sum::<f64>() > 0.0 {
            let mu2: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
            let s = area_between(&concentration_lorenz(&y2, &mu2).unwrap()).unwrap();
            triangle &= s.area >= s.abc.abs();
        }
    }
    let dev_zero = normalized_deviance(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0], 1.42).unwrap() == 0.0;
    outcome(
        murphy_err <= 1e-12 && prop_err <= 1e-12 && triangle && dev_zero,
        format!(
            "Murphy vs brute force max error {murphy_err:.2e} (<= 1e-12); proportional premiums max |cc - lc| or area {prop_err:.2e}; Area >= |ABC| on all: {triangle}"
        ),
    )
}

fn c10_cutpoint() -> Outcome {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let (hits, coverage) = pool.install(|| {
        let mut hits = 0;
        for k in 0..20 {
            let spec = SyntheticSpec {
                n: 50_000,
                xo_fraction: 0.65,
                seed: SEED + k,
                group_law: Some(GroupLaw { cut: 99, delta_high: DeltaLaw::Identity }),
                ..SyntheticSpec::default()
            };
            let s = search_cutpoint(&simulate(&spec).unwrap(), &FitSpec::new(WeightScheme::Ewm)).unwrap();
            hits += (s.best_cut == 99) as usize;
        }
        let null = simulate(&SyntheticSpec { n: 50_000, xo_fraction: 0.65, seed: SEED, ..SyntheticSpec::default() }).unwrap();
        let band =
            bootstrap_curve_difference(&null, &FitSpec::new(WeightScheme::Ewm), &BmsGrouping::cut(99), 50, SEED).unwrap();
        (hits, band.zero_inside_fraction())
    });
    let elapsed = start.elapsed();
    outcome(
        hits >= 18 && coverage >= 0.9 && elapsed < Duration::from_secs(900),
        format!(
            "cut 99 recovered in {hits}/20 seeds (>= 18); null band covers zero at {:.1}% of the grid (>= 90%, B = 50); {:.0}s on 4 workers (< 900s)",
            100.0 * coverage,
            elapsed.as_secs_f64()
        ),
    )
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c11_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let args = ["midterm", "report", "--n", "20000", "--bootstrap", "10", "--seed", "7", "--out-dir"];
        let code = midterm::cli::run(args.iter().map(|s| s.to_string()).chain([dir.to_string_lossy().into_owned()]));
        if code != std::process::ExitCode::SUCCESS {
            return outcome(false, format!("report run {run} failed"));
        }
        trees.push(read_tree(&dir));
    }
    let files = trees[0].len();
    outcome(
        files > 0 && trees[0] == trees[1],
        format!("{files} files, bundles byte-identical: {}", trees[0] == trees[1]),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failures += !o.pass as usize;
    };
    report(1, "sampler moments", c1_sampler_moments());
    report(2, "compound identity", c2_compound_identity());
    let data = criterion3_data(DeltaLaw::Power { alpha: 0.6 });
    report(3, "consistency", c3_consistency(&data));
    report(4, "GWM convergence", c4_gwm(&data));
    let (train, test) = split(&data, 0.75, SEED).unwrap();
    report(5, "deviance ordering", c5_deviance_ordering(&train, &test));
    report(6, "constraint suite", c6_constraints());
    report(7, "smoothing family", c7_smoothing(&train, &test));
    report(8, "Murphy dominance", c8_murphy(&data));
    report(9, "evaluation exactness", c9_evaluation());
    report(10, "cut-point recovery", c10_cutpoint());
    report(11, "end-to-end determinism", c11_determinism());
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
