//! `stratify`, `pool` and `report`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use prognos_core::coxfit::{dichotomized_hr, fit_cox_multivariate, CoxFitResult, MultivariateDesign};
use prognos_core::domain::{Observation, Race, SubjectRecord};
use prognos_core::ensemble::{stratify as classify, RiskCutoff, RiskGroup};
use prognos_core::meta::{forest_rows, forest_svg, forest_tsv, pool_random_effects, MetricKind, PooledEstimate, StudyEstimate};
use prognos_core::metrics::{kaplan_meier, KmCurve};
use prognos_core::stats::two_sided_p;

use crate::artifacts::{parse_f64, parse_tsv, Context, StageWriter};
use crate::commands::evaluate::{read_metrics, read_scores, test_groups, ScoreRow, EVALUATE_STAGE, SCORES_FILE};
use crate::data::load_ingested;
use crate::error::{CliError, Result};

pub const STRATIFY_STAGE: &str = "stratify";
pub const POOL_STAGE: &str = "pool";
pub const REPORT_STAGE: &str = "report";
pub const HR_HEADER: &str =
    "dataset\tn\tn_high\tn_low\tevents\thr\tlower\tupper\tlog_hr\tse\tlogrank_chi2\tlogrank_p";
pub const POOLED_HEADER: &str = "metric\tstudies\testimate\tlower\tupper\tse\ttau2\tnull\tp";

fn read_cutoff(ctx: &Context) -> Result<(std::path::PathBuf, RiskCutoff)> {
    let (path, text) = ctx.read_upstream(STRATIFY_STAGE, "cutoff.toml")?;
    let c = toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok((path, c))
}

/// Fixes the risk cutoff on the reference population and reports
/// high-versus-low hazard ratios on each test dataset.
pub fn stratify(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut w = StageWriter::begin(ctx, STRATIFY_STAGE)?;
    let rows = read_scores(ctx)?;
    w.input(&ctx.stage_dir(EVALUATE_STAGE).join(SCORES_FILE))?;
    let population = if cfg.cutoff.population.is_empty() { cfg.partition.training() } else { cfg.cutoff.population.clone() };
    let pop: Vec<f64> = rows.iter().filter(|r| population.contains(&r.dataset_id)).map(|r| r.fused).collect();
    if pop.is_empty() {
        return Err(CliError::Validation(format!("cutoff population {population:?} has no scored subjects")));
    }
    let cutoff = RiskCutoff::from_population(&pop, cfg.cutoff.percentile, &population.join("+"))?;
    w.write_stamped("cutoff.toml", &toml::to_string(&cutoff).expect("cutoff serializes"))?;

    let mut groups = String::from("subject_id\tdataset_id\trole\tfused\tgroup\n");
    for r in &rows {
        let _ = writeln!(groups, "{}\t{}\t{}\t{}\t{}", r.subject_id, r.dataset_id, r.role, r.fused, classify(r.fused, &cutoff).as_str());
    }
    w.write_stamped("groups.tsv", &groups)?;

    let mut hr = format!("{HR_HEADER}\n");
    for (label, group) in test_groups(ctx, &rows) {
        let risks: Vec<f64> = group.iter().map(|r| r.fused).collect();
        let obs: Vec<Observation> = group.iter().map(|r| r.obs).collect();
        let n_high = risks.iter().filter(|&&r| r > cutoff.value).count();
        let events = obs.iter().filter(|o| o.event).count();
        let head = format!("{label}\t{}\t{n_high}\t{}\t{events}", group.len(), group.len() - n_high);
        match dichotomized_hr(&risks, cutoff.value, &obs) {
            Ok(d) => {
                let _ = writeln!(
                    hr,
                    "{head}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    d.fit.hr[0], d.fit.ci[0].0, d.fit.ci[0].1, d.fit.beta[0], d.fit.se[0], d.logrank.chi_square, d.logrank.p
                );
            }
            Err(e) => {
                log::warn!("hazard ratio for `{label}`: {e}");
                let _ = writeln!(hr, "{head}\tNA\tNA\tNA\tNA\tNA\tNA\tNA");
            }
        }
    }
    w.write_stamped("hr.tsv", &hr)?;
    w.note("cutoff", cutoff.value.to_string());
    w.note("population", population.join(","));
    w.finish()?;
    Ok(())
}

/// Per-dataset estimates from evaluate and stratify, test datasets only.
fn study_estimates(ctx: &Context) -> Result<(Vec<StudyEstimate>, Vec<StudyEstimate>, Vec<std::path::PathBuf>)> {
    let (mpath, metrics) = read_metrics(ctx)?;
    let tests = &ctx.cfg.partition.test;
    let mut c = Vec::new();
    for m in metrics.iter().filter(|m| tests.contains(&m.dataset)) {
        match (m.c_index, m.c_index_se) {
            (Some(v), Some(se)) if se > 0.0 => c.push(StudyEstimate {
                dataset_id: m.dataset.clone(),
                kind: MetricKind::CIndex,
                value: v,
                se,
                n: m.n,
                events: m.events,
            }),
            _ => log::warn!("dataset `{}` has no usable C-index; left out of pooling", m.dataset),
        }
    }
    let (hpath, text) = ctx.read_upstream(STRATIFY_STAGE, "hr.tsv")?;
    let mut h = Vec::new();
    for cols in parse_tsv(&hpath, &text, HR_HEADER)? {
        if !tests.iter().any(|t| t == cols[0]) || cols[8] == "NA" {
            continue;
        }
        let se = parse_f64(&hpath, cols[9])?;
        if !(se > 0.0 && se.is_finite()) {
            continue;
        }
        h.push(StudyEstimate {
            dataset_id: cols[0].to_string(),
            kind: MetricKind::LogHazardRatio,
            value: parse_f64(&hpath, cols[8])?,
            se,
            n: cols[1].parse().unwrap_or(0),
            events: cols[4].parse().unwrap_or(0),
        });
    }
    Ok((c, h, vec![mpath, hpath]))
}

fn pooled_line(metric: &str, studies: usize, p: &PooledEstimate, null: f64, exp: bool) -> String {
    let z = (p.mu - null) / p.se;
    let pval = two_sided_p(z);
    let t = |v: f64| if exp { v.exp() } else { v };
    let shown_null = if exp { null.exp() } else { null };
    format!("{metric}\t{studies}\t{}\t{}\t{}\t{}\t{}\t{shown_null}\t{pval}\n", t(p.mu), t(p.ci95.0), t(p.ci95.1), p.se, p.tau2)
}

/// Random-effects pooling of C-index and log hazard ratio across test
/// datasets, with forest tables and plots.
pub fn pool(ctx: &Context) -> Result<()> {
    let mut w = StageWriter::begin(ctx, POOL_STAGE)?;
    let (c, h, inputs) = study_estimates(ctx)?;
    for p in &inputs {
        w.input(p)?;
    }
    let mut out = format!("{POOLED_HEADER}\n");
    for (studies, metric, null, title) in
        [(&c, "c_index", 0.5, "C-index"), (&h, "hazard_ratio", 0.0, "Hazard ratio (high vs low)")]
    {
        if studies.is_empty() {
            let _ = writeln!(out, "{metric}\t0\tNA\tNA\tNA\tNA\tNA\tNA\tNA");
            continue;
        }
        let pooled = pool_random_effects(studies)?;
        let log_scale = metric == "hazard_ratio";
        out.push_str(&pooled_line(metric, studies.len(), &pooled, null, log_scale));
        let rows = forest_rows(studies, &pooled)?;
        w.write_stamped(&format!("forest_{metric}.tsv"), &forest_tsv(&rows))?;
        let reference = if log_scale { 1.0 } else { 0.5 };
        w.write_svg(&format!("forest_{metric}.svg"), &forest_svg(&rows, title, reference, log_scale))?;
    }
    w.write_stamped("pooled.tsv", &out)?;
    w.note("c_index_scale", "raw");
    w.note("c_index_se", "bootstrap");
    w.note("hazard_ratio_scale", "log");
    w.finish()?;
    Ok(())
}

/// Pooled fused C-index and hazard ratio rows as `(metric, estimate, p)`.
pub fn read_pooled(ctx: &Context) -> Result<Vec<(String, Option<f64>, Option<f64>)>> {
    let (path, text) = ctx.read_upstream(POOL_STAGE, "pooled.tsv")?;
    parse_tsv(&path, &text, POOLED_HEADER)?
        .into_iter()
        .map(|c| {
            let f = |s: &str| if s == "NA" { Ok(None) } else { parse_f64(&path, s).map(Some) };
            Ok((c[0].to_string(), f(c[2])?, f(c[8])?))
        })
        .collect()
}

fn km_svg(curves: &[(&str, &KmCurve)], horizon: f64) -> String {
    let (w, h) = (640.0, 400.0);
    let (x0, x1, y0, y1) = (60.0, 600.0, 360.0, 40.0);
    let tmax = curves.iter().map(|(_, c)| c.last_time).fold(horizon, f64::max);
    let sx = |t: f64| x0 + (x1 - x0) * t / tmax;
    let sy = |s: f64| y0 + (y1 - y0) * s;
    let mut svg = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(svg, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(svg, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for k in 0..=4 {
        let s = k as f64 / 4.0;
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{s:.2}</text>", x0 - 6.0, sy(s) + 4.0);
    }
    let ticks = tmax.ceil() as usize;
    let step = (ticks / 8).max(1);
    for t in (0..=ticks).step_by(step) {
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{t}</text>", sx(t as f64), y0 + 18.0);
    }
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">Years</text>", (x0 + x1) / 2.0, y0 + 36.0);
    for (i, (label, c)) in curves.iter().enumerate() {
        let color = ["#c0392b", "#2471a3"][i % 2];
        let mut d = format!("M{:.2},{:.2}", sx(0.0), sy(1.0));
        let mut s = 1.0;
        for (&t, &v) in c.times.iter().zip(&c.survival) {
            let _ = write!(d, " L{:.2},{:.2} L{:.2},{:.2}", sx(t), sy(s), sx(t), sy(v));
            s = v;
        }
        let _ = write!(d, " L{:.2},{:.2}", sx(c.last_time), sy(s));
        let _ = writeln!(svg, "<path d=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>");
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>", x1 - 80.0, y1 + 16.0 * (i as f64 + 1.0));
    }
    svg.push_str("</svg>\n");
    svg
}

fn multivariate_lines(out: &mut String, model: &str, fit: &CoxFitResult) {
    for (k, name) in fit.names.iter().enumerate() {
        let _ = writeln!(
            out,
            "{model}\t{name}\t{}\t{}\t{}\t{}\t{}\t{}",
            fit.hr[k], fit.ci[k].0, fit.ci[k].1, fit.wald_p[k], fit.n, fit.events
        );
    }
}

/// Kaplan-Meier curves by risk group, quartile tables per test dataset and
/// multivariate Cox models on the pooled test population.
pub fn report(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut w = StageWriter::begin(ctx, REPORT_STAGE)?;
    let rows = read_scores(ctx)?;
    w.input(&ctx.stage_dir(EVALUATE_STAGE).join(SCORES_FILE))?;
    let (cpath, cutoff) = read_cutoff(ctx)?;
    w.input(&cpath)?;
    let (cohort_path, subjects) = load_ingested(ctx)?;
    w.input(&cohort_path)?;
    let by_id: BTreeMap<&str, &SubjectRecord> = subjects.iter().map(|s| (s.subject_id.as_str(), s)).collect();
    let test: Vec<&ScoreRow> = rows.iter().filter(|r| r.role == "test").collect();

    let mut km = String::from("group\ttime\tsurvival\tlower\tupper\tat_risk\tevents\n");
    let mut curves = Vec::new();
    for g in [RiskGroup::High, RiskGroup::Low] {
        let obs: Vec<Observation> = test.iter().filter(|r| classify(r.fused, &cutoff) == g).map(|r| r.obs).collect();
        let Ok(curve) = kaplan_meier(&obs) else { continue };
        for k in 0..curve.times.len() {
            let _ = writeln!(
                km,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                g.as_str(),
                curve.times[k],
                curve.survival[k],
                curve.ci_lower[k],
                curve.ci_upper[k],
                curve.at_risk[k],
                curve.events[k]
            );
        }
        curves.push((g.as_str(), curve));
    }
    w.write_stamped("km.tsv", &km)?;
    let refs: Vec<(&str, &KmCurve)> = curves.iter().map(|(l, c)| (*l, c)).collect();
    w.write_svg("km.svg", &km_svg(&refs, cfg.report.quartile_horizon))?;

    let mut quart = String::from("dataset\tquartile\tn\tscore_mean\tevent_rate\tlower\tupper\tevaluated_at\ttruncated\n");
    for (label, group) in test_groups(ctx, &rows) {
        let scored: Vec<_> =
            group.iter().map(|r| prognos_core::ScoredObservation::new(r.fused, r.obs)).collect();
        match prognos_core::metrics::recurrence_rate_by_quartile(&scored, cfg.report.quartile_horizon) {
            Ok(q) => {
                for r in q {
                    let _ = writeln!(
                        quart,
                        "{label}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                        r.quartile, r.n, r.score_mean, r.km_event_rate, r.ci_lower, r.ci_upper, r.evaluated_at, r.truncated
                    );
                }
            }
            Err(e) => log::warn!("quartiles for `{label}`: {e}"),
        }
    }
    w.write_stamped("quartiles.tsv", &quart)?;

    let mut multi = String::from("model\tterm\thr\tlower\tupper\tp\tn\tevents\n");
    let reference = cfg.partition.test.first().cloned().unwrap_or_default();
    let obs: Vec<Observation> = test.iter().map(|r| r.obs).collect();
    let ids: Vec<String> = test.iter().map(|r| r.dataset_id.clone()).collect();
    let fused: Vec<f64> = test.iter().map(|r| r.fused).collect();
    let ai = MultivariateDesign::new(test.len()).ai_score(&fused).and_then(|d| d.datasets(&ids, &reference));
    match ai.and_then(|d| fit_cox_multivariate(&d, &obs)) {
        Ok(fit) => multivariate_lines(&mut multi, "ai_score", &fit),
        Err(e) => log::warn!("ai_score model: {e}"),
    }
    let both: Vec<&&ScoreRow> = test.iter().filter(|r| r.clinical.is_some() && r.pathology.is_some()).collect();
    if !both.is_empty() {
        let yc: Vec<f64> = both.iter().map(|r| r.clinical.unwrap_or(0.0) * 5.0).collect();
        let yp: Vec<f64> = both.iter().map(|r| r.pathology.unwrap_or(0.0) * 5.0).collect();
        let ids: Vec<String> = both.iter().map(|r| r.dataset_id.clone()).collect();
        let obs: Vec<Observation> = both.iter().map(|r| r.obs).collect();
        let d = MultivariateDesign::new(both.len())
            .numeric("Clinical score", &yc)
            .and_then(|d| d.numeric("Pathology score", &yp))
            .and_then(|d| d.datasets(&ids, &reference));
        match d.and_then(|d| fit_cox_multivariate(&d, &obs)) {
            Ok(fit) => multivariate_lines(&mut multi, "modalities", &fit),
            Err(e) => log::warn!("modalities model: {e}"),
        }
    }
    // Restricted to subjects with every covariate recorded.
    let full: Vec<(&ScoreRow, &SubjectRecord)> = test
        .iter()
        .filter_map(|r| by_id.get(r.subject_id.as_str()).map(|s| (*r, *s)))
        .filter(|(_, s)| s.clinical.oncotype_score.is_some() && s.clinical.grade.is_some() && s.clinical.race.is_some())
        .collect();
    if full.len() >= 10 {
        let fused: Vec<f64> = full.iter().map(|(r, _)| r.fused).collect();
        let onco: Vec<f64> = full.iter().filter_map(|(_, s)| s.clinical.oncotype_score).collect();
        let grade: Vec<u8> = full.iter().filter_map(|(_, s)| s.clinical.grade).collect();
        let age: Vec<f64> = full.iter().map(|(_, s)| s.clinical.age / 10.0).collect();
        let race: Vec<Race> = full.iter().filter_map(|(_, s)| s.clinical.race).collect();
        let obs: Vec<Observation> = full.iter().map(|(r, _)| r.obs).collect();
        let d = MultivariateDesign::new(full.len())
            .ai_score(&fused)
            .and_then(|d| d.oncotype(&onco))
            .and_then(|d| d.grade(&grade))
            .and_then(|d| d.numeric("Age (per 10 years)", &age))
            .and_then(|d| d.race(&race));
        match d.and_then(|d| fit_cox_multivariate(&d, &obs)) {
            Ok(fit) => multivariate_lines(&mut multi, "oncotype", &fit),
            Err(e) => log::warn!("oncotype model: {e}"),
        }
    }
    w.write_stamped("multivariate.tsv", &multi)?;
    w.note("cutoff", cutoff.value.to_string());
    w.note("score_scaling", "AI, clinical and pathology scores times 5; oncotype / 20");
    w.finish()?;
    Ok(())
}
