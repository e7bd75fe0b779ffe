use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{default_m_grid, murphy_curve, murphy_dominates, score, write_curves, write_murphy, DatasetTag, ScoreReport};
use crate::fit::{
    bootstrap_curve_difference, difference_grid, fit, fit_group_splines, search_cutpoint, BmsGrouping, BootstrapBand,
    CutpointSearch, ExposureEffect, FitResult, FitSpec, WeightScheme,
};
use crate::penalty::{adjust, constrain_fit, premium_decomposition, refit_with_offset, PenaltySchedule, PremiumDecomposition};
use crate::portfolio::{exploratory_summary, simulate, split, write_csv, ExploratorySummary, GroupLaw, Portfolio, SyntheticSpec};
use crate::spline::KnotGrid;

use super::output::{a_label, load, Out};
use super::{report, Cli, Command, GlobalArgs, GroupScheme, SchemeArg, Tag};

pub(crate) fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let out = Out::new(g);
    match &cli.command {
        Command::Simulate(a) => {
            let spec = SyntheticSpec {
                n: a.n,
                delta: a.delta,
                xo_fraction: a.xo_fraction,
                phi: a.phi,
                power: g.power,
                seed: g.seed,
                group_law: a.group_cut.zip(a.delta_high).map(|(cut, delta_high)| GroupLaw { cut, delta_high }),
                ..SyntheticSpec::default()
            };
            let p = simulate(&spec)?;
            if p.is_empty() {
                eprintln!("warning: n = 0, writing a header-only file");
            }
            let data = out.with_file(&format!("{}.csv", a.name), |buf| write_csv(&p, buf))?;
            out.json(&format!("{}.truth.json", a.name), &spec)?;
            println!("simulated {} contracts -> {}", p.len(), data.display());
        }
        Command::Split(a) => {
            let p = load(&a.data, g.lenient)?;
            let (train, test) = split(&p, a.train_fraction, g.seed)?;
            out.with_file("train.csv", |buf| write_csv(&train, buf))?;
            out.with_file("test.csv", |buf| write_csv(&test, buf))?;
            println!("train {} / test {}", train.len(), test.len());
        }
        Command::Summary(a) => {
            let s = write_summary(&out, &load(&a.data, g.lenient)?)?;
            println!("{} contracts, annualized loss cost {:.4}", s.contracts, s.overall.annualized_loss_cost);
        }
        Command::Fit(a) => {
            let p = load(&a.data, g.lenient)?;
            let base = FitSpec { lambda: a.lambda, max_iter: a.max_iter, tol: a.tol, ..base_spec(g, WeightScheme::Cwm) };
            for f in fit_schemes(&out, &p, &SchemeArg::expand(&a.scheme), &base)? {
                println!(
                    "{}: lambda {:.4e} converged {} beta [{}]",
                    f.scheme,
                    f.lambda,
                    f.converged,
                    f.beta.iter().map(|b| format!("{b:.4}")).collect::<Vec<_>>().join(", ")
                );
            }
        }
        Command::Score(a) => {
            let mut models = Vec::new();
            for path in &a.fits {
                models.push((model_name(path), read_fit(path)?));
            }
            let data = load(&a.data, g.lenient)?;
            let tag = match a.tag {
                Tag::Train => DatasetTag::Train,
                Tag::Test => DatasetTag::Test,
            };
            let refs: Vec<(&str, &FitResult)> = models.iter().map(|(n, f)| (n.as_str(), f)).collect();
            for r in score_models(&out, &refs, &data, tag)? {
                println!("{} [{}]: deviance {:.4} area {:.4}", r.model, tag.as_str(), r.deviance_display, r.area);
            }
        }
        Command::Penalty(a) => {
            let f = read_fit(&a.fit)?;
            let data = load(&a.data, g.lenient)?;
            let test = a.test.as_deref().map(|t| load(t, g.lenient)).transpose()?;
            let o = penalty_sweep(&out, &f, &data, test.as_ref(), &a.a)?;
            for r in &o.scores {
                println!("a = {}: deviance {:.4} area {:.4}", r.a, r.deviance * 100.0, r.area);
            }
            println!("Murphy dominance of the unconstrained fit: {:.3}", o.dominance_fraction);
        }
        Command::Groupsplit(a) => {
            let p = load(&a.data, g.lenient)?;
            let scheme = match a.scheme {
                GroupScheme::Cwm => WeightScheme::Cwm,
                GroupScheme::Ewm => WeightScheme::Ewm,
            };
            let o = group_split(&out, &p, &base_spec(g, scheme), a.cut, a.bootstrap as usize, g.seed)?;
            println!("cut {}: zero inside the 2-SE band at {:.3} of the grid", o.cut, o.band.zero_inside_fraction());
        }
        Command::Report(a) => report::run(g, &out, a)?,
    }
    Ok(())
}

pub(crate) fn base_spec(g: &GlobalArgs, scheme: WeightScheme) -> FitSpec {
    FitSpec {
        power: g.power,
        grid: g.knots.clone().unwrap_or_else(KnotGrid::default_exposure),
        ..FitSpec::new(scheme)
    }
}

fn model_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn read_fit(path: &Path) -> Result<FitResult> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    FitResult::from_json(&text)
}

pub(crate) fn write_summary(out: &Out, p: &Portfolio) -> Result<ExploratorySummary> {
    let s = exploratory_summary(p)?;
    out.json("summary.json", &s)?;
    out.table("summary_contract_type", &s.by_contract_type)?;
    out.table("summary_exposure_bins", &s.exposure_bins)?;
    out.table("summary_bms", &s.by_bms)?;
    for n in &s.notices {
        eprintln!("notice: {n}");
    }
    Ok(s)
}

#[derive(Serialize)]
pub(crate) struct CoefRow<'a> {
    pub scheme: &'a str,
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    change: Option<f64>,
    weight_change: Option<f64>,
    irls_iterations: usize,
    damped: bool,
}

/// Fits each scheme with `base` as template; writes `fit_<s>.json`,
/// `curve_<s>.csv`, `trace_gwm.csv` and the coefficient table.
pub(crate) fn fit_schemes(out: &Out, p: &Portfolio, schemes: &[WeightScheme], base: &FitSpec) -> Result<Vec<FitResult>> {
    let mut fits = Vec::new();
    for &scheme in schemes {
        let f = fit(p, &FitSpec { scheme, ..base.clone() })?;
        out.write(&format!("fit_{scheme}.json"), f.to_json()? + "\n")?;
        out.with_file(&format!("curve_{scheme}.csv"), |buf| write_gamma_curve(&f, buf))?;
        if scheme == WeightScheme::Gwm {
            let rows: Vec<TraceRow> = f
                .trace
                .iter()
                .map(|s| TraceRow {
                    iteration: s.iteration,
                    change: s.change,
                    weight_change: s.weight_change,
                    irls_iterations: s.irls_iterations,
                    damped: s.damped,
                })
                .collect();
            out.with_file("trace_gwm.csv", |buf| {
                let mut w = csv::Writer::from_writer(buf);
                for r in &rows {
                    w.serialize(r)?;
                }
                w.flush()?;
                Ok(())
            })?;
        }
        fits.push(f);
    }
    let rows: Vec<CoefRow> = fits
        .iter()
        .flat_map(|f| {
            f.names().into_iter().zip(f.beta.iter().zip(&f.std_errors)).map(|(term, (&estimate, &std_error))| CoefRow {
                scheme: f.scheme.as_str(),
                term,
                estimate,
                std_error,
            })
        })
        .collect();
    out.table("coefficients", &rows)?;
    Ok(fits)
}

fn write_gamma_curve(f: &FitResult, buf: &mut Vec<u8>) -> Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["t", "gamma"])?;
    for t in difference_grid() {
        w.write_record([t.to_string(), f.gamma(t).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
pub(crate) struct ScoreRow {
    pub model: String,
    pub dataset_tag: DatasetTag,
    pub deviance: f64,
    pub deviance_display: f64,
    pub area: f64,
    pub abc: f64,
}

/// Scores every model on `data` over a shared Murphy grid; writes the score
/// table, full reports, curve pairs and the Murphy table.
pub(crate) fn score_models(out: &Out, models: &[(&str, &FitResult)], data: &Portfolio, tag: DatasetTag) -> Result<Vec<ScoreReport>> {
    if data.is_empty() {
        return Err(Error::EmptyPortfolio);
    }
    let all_mu: Vec<f64> = models.iter().flat_map(|(_, f)| f.predict(data)).collect();
    let grid = default_m_grid(&all_mu);
    let t = tag.as_str();
    let mut reports = Vec::new();
    for (name, f) in models {
        let (r, curves) = score(name, f, data, tag, Some(&grid))?;
        out.with_file(&format!("curves_{name}_{t}.csv"), |buf| write_curves(&curves, buf))?;
        reports.push(r);
    }
    let losses: Vec<Vec<f64>> = reports.iter().map(|r| r.murphy.iter().map(|&(_, l)| l).collect()).collect();
    let cols: Vec<(&str, &[f64])> = reports.iter().zip(&losses).map(|(r, l)| (r.model.as_str(), l.as_slice())).collect();
    out.with_file(&format!("murphy_{t}.csv"), |buf| write_murphy(&grid, &cols, buf))?;
    let rows: Vec<ScoreRow> = reports
        .iter()
        .map(|r| ScoreRow {
            model: r.model.clone(),
            dataset_tag: r.dataset_tag,
            deviance: r.deviance,
            deviance_display: r.deviance_display,
            area: r.area,
            abc: r.abc,
        })
        .collect();
    out.table(&format!("scores_{t}"), &rows)?;
    out.json(&format!("score_reports_{t}.json"), &reports)?;
    Ok(reports)
}

#[derive(Serialize)]
pub(crate) struct ABetaRow {
    pub a: f64,
    pub term: String,
    pub estimate: f64,
}

#[derive(Serialize)]
pub(crate) struct AScoreRow {
    pub a: f64,
    pub dataset_tag: DatasetTag,
    pub deviance: f64,
    pub area: f64,
}

#[derive(Serialize)]
pub(crate) struct ADecompositionRow {
    pub a: f64,
    pub penalty_share: f64,
    pub penalty_share_xo: f64,
    pub xo_uplift_vs_traditional: Option<f64>,
}

pub(crate) struct PenaltyOutcome {
    pub schedule: PenaltySchedule,
    pub betas: Vec<ABetaRow>,
    pub scores: Vec<AScoreRow>,
    pub decompositions: Vec<(f64, PremiumDecomposition)>,
    /// Share of the Murphy grid where the unconstrained fit is no worse than
    /// the refit at the largest `a`.
    pub dominance_fraction: f64,
}

/// Constrains the fitted curve, then for each `a` writes the penalty table,
/// the refit and its decomposition; scores on `test` when given, else on
/// `data`.
pub(crate) fn penalty_sweep(out: &Out, f: &FitResult, data: &Portfolio, test: Option<&Portfolio>, a_list: &[f64]) -> Result<PenaltyOutcome> {
    if !matches!(f.exposure, ExposureEffect::Smooth { .. }) {
        return Err(Error::UnsupportedScheme(format!("penalty schedules need a smooth single-curve fit, got {}", f.scheme)));
    }
    if a_list.is_empty() {
        return Err(Error::InvalidParameter("no smoothing level given".into()));
    }
    let schedule = constrain_fit(f)?;
    out.write("schedule.json", schedule.to_json()? + "\n")?;
    out.with_file("penalty_curve.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["t", "gamma", "gamma_con"])?;
        for (t, c) in schedule.grid().iter().zip(schedule.gamma_con()) {
            w.write_record([t.to_string(), f.gamma(*t).to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let spec = FitSpec { power: f.power, design: f.design.clone(), ..FitSpec::new(f.scheme) };
    let traditional = refit_with_offset(data, &adjust(&schedule, 0.0)?, &spec, &f.weights)?;
    let (eval, tag) = match test {
        Some(t) => (t, DatasetTag::Test),
        None => (data, DatasetTag::Train),
    };
    let mut betas = Vec::new();
    let mut scores = Vec::new();
    let mut decompositions = Vec::new();
    let mut last_refit = None;
    let mut sorted = a_list.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    for &a in &sorted {
        let label = a_label(a);
        let s = adjust(&schedule, a)?;
        out.with_file(&format!("penalty_a{label}.csv"), |buf| s.write_table(buf))?;
        let r = refit_with_offset(data, &s, &spec, &f.weights)?;
        out.write(&format!("refit_a{label}.json"), r.to_json()? + "\n")?;
        betas.extend(r.names().into_iter().zip(&r.beta).map(|(term, &estimate)| ABetaRow { a, term, estimate }));
        let (rep, _) = score(&format!("a{label}"), &r, eval, tag, None)?;
        scores.push(AScoreRow { a, dataset_tag: tag, deviance: rep.deviance, area: rep.area });
        let d = premium_decomposition(&r, &s, data, Some(&traditional))?;
        decompositions.push((a, d));
        last_refit = Some(r);
    }
    let top = last_refit.expect("non-empty a list");
    let (a_top, d_top) = decompositions.last().unwrap();
    out.with_file("cumulative.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        for c in &d_top.cumulative {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    })?;
    let rows: Vec<ADecompositionRow> = decompositions
        .iter()
        .map(|(a, d)| ADecompositionRow {
            a: *a,
            penalty_share: d.penalty_share,
            penalty_share_xo: d.penalty_share_xo,
            xo_uplift_vs_traditional: d.xo_uplift_vs_traditional,
        })
        .collect();
    out.table("decomposition_by_a", &rows)?;
    out.table("beta_by_a", &betas)?;
    out.table("scores_by_a", &scores)?;

    let y = eval.losses();
    let (mu_u, mu_c) = (f.predict(eval), top.predict(eval));
    let grid = default_m_grid(&mu_u.iter().chain(&mu_c).copied().collect::<Vec<_>>());
    let (lu, lc) = (murphy_curve(&y, &mu_u, &grid)?, murphy_curve(&y, &mu_c, &grid)?);
    let constrained = format!("constrained_a{}", a_label(*a_top));
    out.with_file("murphy_constrained.csv", |buf| write_murphy(&grid, &[("unconstrained", &lu), (&constrained, &lc)], buf))?;
    let dominance_fraction = murphy_dominates(&grid, &lu, &lc, 0.0)?.fraction;
    Ok(PenaltyOutcome { schedule, betas, scores, decompositions, dominance_fraction })
}

pub(crate) struct GroupOutcome {
    pub cut: u8,
    pub search: Option<CutpointSearch>,
    pub band: BootstrapBand,
}

/// Cut-point search (unless `cut` is given), group curves at the cut and the
/// bootstrap band of their difference.
pub(crate) fn group_split(out: &Out, p: &Portfolio, spec: &FitSpec, cut: Option<u8>, replicates: usize, seed: u64) -> Result<GroupOutcome> {
    let (cut, search, spec) = match cut {
        Some(c) => (c, None, spec.clone()),
        None => {
            let s = search_cutpoint(p, spec)?;
            out.table("cutpoint_scores", &s.scores)?;
            out.json("cutpoint.json", &s)?;
            let fixed = FitSpec { lambda: Some(s.lambda), ..spec.clone() };
            (s.best_cut, Some(s), fixed)
        }
    };
    let grouping = BmsGrouping::cut(cut);
    let gf = fit_group_splines(p, &spec, &grouping)?;
    out.write("fit_groups.json", gf.to_json()? + "\n")?;
    out.with_file("group_curves.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["t", "gamma_low", "gamma_high"])?;
        for t in difference_grid() {
            let (lo, hi) = (gf.exposure.gamma(t, cut), gf.exposure.gamma(t, cut + 1));
            w.write_record([t.to_string(), lo.to_string(), hi.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let band = bootstrap_curve_difference(p, &spec, &grouping, replicates, seed)?;
    out.with_file("bootstrap_band.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["t", "estimate", "mean", "std_error", "lower", "upper"])?;
        for j in 0..band.grid.len() {
            let (e, s) = (band.estimate[j], band.std_error[j]);
            w.write_record([band.grid[j], e, band.mean[j], s, e - 2.0 * s, e + 2.0 * s].map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(GroupOutcome { cut, search, band })
}
