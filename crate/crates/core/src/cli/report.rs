use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::evaluation::DatasetTag;
use crate::fit::{difference_grid, fit, FitResult, FitSpec, WeightScheme};
use crate::portfolio::{simulate, split, write_csv, SyntheticSpec};
use crate::spline::KnotGrid;

use super::commands::{base_spec, fit_schemes, group_split, penalty_sweep, score_models, write_summary};
use super::output::{load, Out};
use super::{GlobalArgs, ReportArgs};

#[derive(Serialize)]
struct SensitivityRow {
    knots: String,
    count: usize,
    lambda: f64,
    max_gamma_difference: f64,
    max_beta_difference: f64,
}

/// Full pipeline: summary, split, five fits, scores, penalty sweep on the
/// EWM fit, BMS group split, knot sensitivity, then `report.md` and
/// `manifest.txt` listing every file of the bundle.
pub(crate) fn run(g: &GlobalArgs, out: &Out, args: &ReportArgs) -> Result<()> {
    let data_out = out.sub("data");
    let portfolio = match (&args.data, args.n) {
        (Some(path), _) => load(path, g.lenient)?,
        (None, Some(n)) => {
            let spec = SyntheticSpec { n, xo_fraction: 0.65, power: g.power, seed: g.seed, ..SyntheticSpec::default() };
            let p = simulate(&spec)?;
            data_out.with_file("portfolio.csv", |buf| write_csv(&p, buf))?;
            data_out.json("portfolio.truth.json", &spec)?;
            p
        }
        (None, None) => unreachable!("clap requires an input"),
    };
    let summary = write_summary(&out.sub("summary"), &portfolio)?;
    let (train, test) = split(&portfolio, args.train_fraction, g.seed)?;
    data_out.with_file("train.csv", |buf| write_csv(&train, buf))?;
    data_out.with_file("test.csv", |buf| write_csv(&test, buf))?;

    let base = base_spec(g, WeightScheme::Cwm);
    let fits = fit_schemes(&out.sub("fits"), &train, &WeightScheme::ALL, &base)?;
    let models: Vec<(&str, &FitResult)> = fits.iter().map(|f| (f.scheme.as_str(), f)).collect();
    let scores_out = out.sub("scores");
    let train_scores = score_models(&scores_out, &models, &train, DatasetTag::Train)?;
    let test_scores = score_models(&scores_out, &models, &test, DatasetTag::Test)?;

    let ewm = fits.iter().find(|f| f.scheme == WeightScheme::Ewm).expect("all schemes fitted");
    let pen = penalty_sweep(&out.sub("penalty"), ewm, &train, Some(&test), &[0.0, 0.25, 0.5, 0.75, 1.0])?;
    let groups = group_split(&out.sub("groups"), &train, &base_spec(g, WeightScheme::Ewm), None, args.bootstrap as usize, g.seed)?;
    let sensitivity = knot_sensitivity(&out.sub("sensitivity"), &train, &base_spec(g, WeightScheme::Ewm), ewm)?;

    let mut md = String::new();
    let _ = writeln!(md, "# Ratemaking report\n");
    let source = match &args.data {
        Some(p) => format!("`{}`", p.display()),
        None => format!("simulated, n = {}, seed {}", portfolio.len(), g.seed),
    };
    let _ = writeln!(md, "Data: {source}. Power p = {}. Train {} / test {}.\n", g.power, train.len(), test.len());

    let _ = writeln!(md, "## Portfolio\n");
    let _ = writeln!(md, "| type | contracts | exposure | frequency | mean severity | annualized loss cost |");
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    for c in summary.by_contract_type.iter().chain(std::iter::once(&summary.overall)) {
        let name = c.contract_type.map(|t| t.as_str()).unwrap_or("all");
        let _ = writeln!(
            md,
            "| {name} | {} | {:.1} | {} | {} | {:.4} |",
            c.count,
            c.exposure,
            opt(c.frequency),
            opt(c.mean_severity),
            c.annualized_loss_cost
        );
    }

    let _ = writeln!(md, "\n## Coefficients (train)\n");
    let names = fits[0].names();
    let _ = writeln!(md, "| term | {} |", fits.iter().map(|f| f.scheme.as_str()).collect::<Vec<_>>().join(" | "));
    let _ = writeln!(md, "|---|{}", "---|".repeat(fits.len()));
    for (j, n) in names.iter().enumerate() {
        let cells: Vec<String> = fits.iter().map(|f| format!("{:.4} ({:.4})", f.beta[j], f.std_errors[j])).collect();
        let _ = writeln!(md, "| {n} | {} |", cells.join(" | "));
    }
    let _ = writeln!(md, "\n| scheme | lambda | edf | converged |");
    let _ = writeln!(md, "|---|---|---|---|");
    for f in &fits {
        let _ = writeln!(md, "| {} | {:.4e} | {:.2} | {} |", f.scheme, f.lambda, f.edf, f.converged);
    }
    if let Some(gwm) = fits.iter().find(|f| f.scheme == WeightScheme::Gwm) {
        let changes: Vec<String> = gwm.trace.iter().filter_map(|s| s.change).map(|c| format!("{c:.2e}")).collect();
        let _ = writeln!(md, "\nGWM refits: {} (changes {}).", gwm.trace.len() - 1, changes.join(", "));
    }

    let _ = writeln!(md, "\n## Scores\n");
    let _ = writeln!(md, "| model | deviance train | deviance test | area train | area test |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    for (tr, te) in train_scores.iter().zip(&test_scores) {
        let _ = writeln!(
            md,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            tr.model, tr.deviance_display, te.deviance_display, tr.area, te.area
        );
    }

    let _ = writeln!(md, "\n## Penalties (EWM curve)\n");
    let _ = writeln!(md, "| a | deviance test | area test | penalty share | XO penalty share |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    for (s, (_, d)) in pen.scores.iter().zip(&pen.decompositions) {
        let _ = writeln!(
            md,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            s.a,
            s.deviance * 100.0,
            s.area,
            d.penalty_share,
            d.penalty_share_xo
        );
    }
    let quarter = pen.schedule.value(0.25)?;
    let _ = writeln!(
        md,
        "\nConstrained curve at t = 0.25: {quarter:.4}. Murphy curve of the unconstrained fit at or below the a = 1 refit at {:.1}% of the grid.",
        100.0 * pen.dominance_fraction
    );
    let intercepts: Vec<String> =
        pen.betas.iter().filter(|b| b.term == "intercept").map(|b| format!("{:.4} (a = {})", b.estimate, b.a)).collect();
    let _ = writeln!(md, "Intercept by a: {}.", intercepts.join(", "));

    let _ = writeln!(md, "\n## BMS groups\n");
    if let Some(s) = &groups.search {
        let _ = writeln!(md, "| cut | score | unweighted score | low | high |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for c in &s.scores {
            let _ = writeln!(
                md,
                "| {} | {:.4e} | {:.4e} | {} | {} |",
                c.cut, c.score, c.unweighted_score, c.low_count, c.high_count
            );
        }
        for (cut, why) in &s.skipped {
            let _ = writeln!(md, "\nCut {cut} skipped: {why}.");
        }
    }
    let _ = writeln!(
        md,
        "\nChosen cut {}. Zero inside the 2-SE bootstrap band ({} replicates) at {:.1}% of the grid.",
        groups.cut,
        groups.band.replicates,
        100.0 * groups.band.zero_inside_fraction()
    );

    let _ = writeln!(md, "\n## Knot sensitivity (EWM)\n");
    let _ = writeln!(md, "| knots | count | lambda | max gamma difference | max beta difference |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    for r in &sensitivity {
        let _ = writeln!(
            md,
            "| {} | {} | {:.4e} | {:.4} | {:.4} |",
            r.knots, r.count, r.lambda, r.max_gamma_difference, r.max_beta_difference
        );
    }

    out.write("report.md", &md)?;
    let mut files = Vec::new();
    collect_files(&out.dir, &out.dir, &mut files)?;
    files.retain(|f| f != "manifest.txt");
    files.push("manifest.txt".into());
    files.sort();
    out.write("manifest.txt", files.join("\n") + "\n")?;
    println!("report written to {}", out.dir.join("report.md").display());
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Refits EWM on coarser and finer uniform grids and compares with `base`.
fn knot_sensitivity(out: &Out, p: &crate::portfolio::Portfolio, spec: &FitSpec, base: &FitResult) -> Result<Vec<SensitivityRow>> {
    let first = spec.grid.first();
    let k = spec.grid.len();
    let mut rows = Vec::new();
    for count in [k.saturating_sub(3).max(4), k + 4] {
        let grid = KnotGrid::uniform(first, count)?;
        let f = fit(p, &FitSpec { grid, ..spec.clone() })?;
        let max_gamma_difference = difference_grid().into_iter().map(|t| (f.gamma(t) - base.gamma(t)).abs()).fold(0.0, f64::max);
        let max_beta_difference = f.beta.iter().zip(&base.beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rows.push(SensitivityRow {
            knots: format!("uniform from {first}"),
            count,
            lambda: f.lambda,
            max_gamma_difference,
            max_beta_difference,
        });
    }
    out.table("knot_sensitivity", &rows)?;
    Ok(rows)
}

fn collect_files(root: &Path, dir: &Path, files: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, files)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            files.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
