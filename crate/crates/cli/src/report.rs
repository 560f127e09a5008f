//! `ordsim report`: tidy tables and static SVG plots from aggregate files
//! and case-study results.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use ordsim_core::simstudy::{format_sig6, read_aggregate_csv, AggregateRow, Manifest};
use ordsim_core::trialio::CaseAnalysisResult;
use ordsim_core::AnalysisModel;
use serde::{Deserialize, Serialize};

use crate::svg::{tick_label, Scale, Svg, PALETTE};
use crate::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Bias,
    Relbias,
    Coverage,
    Mse,
    Forest,
}

impl ReportKind {
    pub fn label(&self) -> &'static str {
        match self {
            ReportKind::Bias => "bias",
            ReportKind::Relbias => "relbias",
            ReportKind::Coverage => "coverage",
            ReportKind::Mse => "mse",
            ReportKind::Forest => "forest",
        }
    }

    fn axis_title(&self) -> &'static str {
        match self {
            ReportKind::Bias => "bias (log-OR)",
            ReportKind::Relbias => "relative bias in OR (%)",
            ReportKind::Coverage => "95% CrI coverage",
            ReportKind::Mse => "MSE (log-OR)",
            ReportKind::Forest => "log odds ratio",
        }
    }

    /// Estimate and its MCSE from one aggregate row.
    fn pick(&self, r: &AggregateRow) -> (f64, f64) {
        match self {
            ReportKind::Bias => (r.bias, r.bias_mcse),
            ReportKind::Relbias => (r.relbias_pct, r.relbias_mcse),
            ReportKind::Coverage => (r.coverage, r.coverage_mcse),
            ReportKind::Mse => (r.mse, r.mse_mcse),
            ReportKind::Forest => (f64::NAN, f64::NAN),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Svg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A run directory or `aggregate.csv` for metric reports; a directory
    /// of `*.fit.json` files or one such file for forest reports.
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ReportKind,
    #[arg(long, value_enum, default_value = "svg")]
    pub format: ReportFormat,
    /// CSV: output file (standard output when absent). SVG: output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One metric value in long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub scenario_id: String,
    pub model: AnalysisModel,
    pub cutpoint: usize,
    pub metric: String,
    pub value: f64,
    pub mcse: f64,
    pub n_effective_reps: usize,
}

pub const LONG_HEADER: [&str; 7] = ["scenario_id", "model", "cutpoint", "metric", "value", "mcse", "n_effective_reps"];

pub fn long_rows(rows: &[AggregateRow], kind: ReportKind) -> Vec<LongRow> {
    rows.iter()
        .map(|r| {
            let (value, mcse) = kind.pick(r);
            LongRow {
                scenario_id: r.scenario_id.clone(),
                model: r.model,
                cutpoint: r.cutpoint,
                metric: kind.label().into(),
                value,
                mcse,
                n_effective_reps: r.n_effective_reps,
            }
        })
        .collect()
}

pub fn emit_long_csv(rows: &[LongRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LONG_HEADER)?;
    for r in rows {
        w.write_record([
            r.scenario_id.clone(),
            r.model.to_string(),
            r.cutpoint.to_string(),
            r.metric.clone(),
            format_sig6(r.value),
            format_sig6(r.mcse),
            r.n_effective_reps.to_string(),
        ])?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

pub fn parse_long_csv(text: &str) -> Result<Vec<LongRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers = rd.headers()?.clone();
    let missing: Vec<&str> = LONG_HEADER.iter().copied().filter(|h| !headers.iter().any(|x| x == *h)).collect();
    if !missing.is_empty() {
        bail!("missing columns: {}", missing.join(", "));
    }
    let mut out = Vec::new();
    for (i, rec) in rd.deserialize::<LongRow>().enumerate() {
        out.push(rec.with_context(|| format!("row {}", i + 2))?);
    }
    Ok(out)
}

fn aggregate_path(input: &Path) -> PathBuf {
    if input.is_dir() { input.join("aggregate.csv") } else { input.to_path_buf() }
}

/// Scenario labels from a manifest next to the aggregate file, when present.
fn scenario_labels(aggregate: &Path) -> BTreeMap<String, String> {
    let manifest = aggregate.with_file_name("manifest.json");
    std::fs::read_to_string(manifest)
        .ok()
        .and_then(|t| serde_json::from_str::<Manifest>(&t).ok())
        .map(|m| m.scenarios.iter().map(|s| (s.scenario_id.clone(), s.label())).collect())
        .unwrap_or_default()
}

/// Nominal coverage and its binomial MCSE at `n` replicates.
pub fn coverage_band(n: usize) -> (f64, f64) {
    let p = 0.95;
    (p, (p * (1.0 - p) / n.max(1) as f64).sqrt())
}

/// Metric-vs-cut-point panels, one per model, for one scenario.
pub fn metric_svg(kind: ReportKind, title: &str, rows: &[&AggregateRow]) -> String {
    let models: Vec<AnalysisModel> = AnalysisModel::ALL.into_iter().filter(|m| rows.iter().any(|r| r.model == *m)).collect();
    let cuts: Vec<usize> = {
        let mut c: Vec<usize> = rows.iter().map(|r| r.cutpoint).collect();
        c.sort();
        c.dedup();
        c
    };
    let n_min = rows.iter().map(|r| r.n_effective_reps).min().unwrap_or(1);
    let reference = match kind {
        ReportKind::Coverage => Some(0.95),
        ReportKind::Bias | ReportKind::Relbias => Some(0.0),
        _ => None,
    };
    let band = (kind == ReportKind::Coverage).then(|| {
        let (p, se) = coverage_band(n_min);
        (p - 2.0 * se, p + 2.0 * se)
    });

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut grow = |v: f64| {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    };
    for r in rows {
        let (v, m) = kind.pick(r);
        let m = if m.is_finite() { m } else { 0.0 };
        grow(v - 2.0 * m);
        grow(v + 2.0 * m);
    }
    if let Some(x) = reference {
        grow(x);
    }
    if let Some((a, b)) = band {
        grow(a);
        grow(b);
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if kind == ReportKind::Coverage {
        hi = hi.min(1.0);
    }
    let pad = if hi > lo { 0.06 * (hi - lo) } else { 0.5 * lo.abs().max(1e-3) };
    let (lo, hi) = (lo - pad, hi + pad);

    let (panel_w, panel_h, left, top, bottom) = (200.0, 240.0, 64.0, 48.0, 44.0);
    let width = left + panel_w * models.len().max(1) as f64 + 16.0;
    let height = top + panel_h + bottom;
    let mut svg = Svg::new(width, height);
    svg.text(width / 2.0, 20.0, 14.0, "middle", &format!("{} - {title}", kind.axis_title()));
    let y = Scale { d0: lo, d1: hi, p0: top + panel_h, p1: top };
    for t in y.ticks(6) {
        let py = y.map(t);
        svg.line(left - 4.0, py, left, py, "#333", 1.0, false);
        svg.text(left - 6.0, py + 4.0, 10.0, "end", &tick_label(t));
    }
    svg.text(left, top - 8.0, 10.0, "start", kind.axis_title());

    for (p, model) in models.iter().enumerate() {
        let x0 = left + panel_w * p as f64;
        let x = Scale {
            d0: *cuts.first().unwrap_or(&2) as f64 - 0.5,
            d1: *cuts.last().unwrap_or(&2) as f64 + 0.5,
            p0: x0 + 8.0,
            p1: x0 + panel_w - 8.0,
        };
        svg.group_start("panel", model.label());
        svg.rect(x0, top, panel_w, panel_h, "none", 0.0, Some("#999"));
        if let Some((a, b)) = band {
            svg.rect(x0, y.map(b), panel_w, y.map(a) - y.map(b), "#888", 0.2, None);
        }
        if let Some(r0) = reference {
            svg.line(x0, y.map(r0), x0 + panel_w, y.map(r0), "#444", 1.0, true);
        }
        svg.text(x0 + panel_w / 2.0, top + panel_h + 34.0, 11.0, "middle", model.label());
        let color = PALETTE[AnalysisModel::ALL.iter().position(|m| m == model).unwrap_or(0)];
        for &k in &cuts {
            svg.text(x.map(k as f64), top + panel_h + 16.0, 9.0, "middle", &k.to_string());
        }
        for r in rows.iter().filter(|r| r.model == *model) {
            let (v, m) = kind.pick(r);
            if !v.is_finite() {
                continue;
            }
            let px = x.map(r.cutpoint as f64);
            if m.is_finite() {
                svg.line(px, y.map(v - 2.0 * m), px, y.map(v + 2.0 * m), color, 1.5, false);
            }
            svg.circle(px, y.map(v), 3.5, color);
        }
        svg.group_end();
    }
    svg.text(left + panel_w * models.len() as f64 / 2.0, height - 4.0, 10.0, "middle", "cut-point k (bars: +/- 2 MCSE)");
    svg.finish()
}

pub fn load_case_results(input: &Path) -> Result<Vec<CaseAnalysisResult>> {
    let files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)
            .with_context(|| format!("reading {}", input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".fit.json"))
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() {
        bail!("no *.fit.json case results in {}", input.display());
    }
    files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("{}: not a case result", p.display()))
        })
        .collect()
}

/// Forest plot: per cut-point, one point-and-interval track per model.
pub fn forest_svg(r: &CaseAnalysisResult) -> String {
    const LIMIT: f64 = 3.0;
    let cuts: Vec<usize> = (2..=r.labels.len()).collect();
    let (left, top, track, gap, plot_w) = (190.0, 70.0, 8.0, 12.0, 420.0);
    let row_h = track * AnalysisModel::ALL.len() as f64 + gap;
    let height = top + row_h * cuts.len() as f64 + 56.0;
    let width = left + plot_w + 30.0;

    let mut lo: f64 = -0.5;
    let mut hi: f64 = 0.5;
    for m in &r.models {
        for c in &m.cutpoints {
            for v in [c.summary.ci_low, c.summary.ci_high] {
                if v.is_finite() {
                    lo = lo.min(v.max(-LIMIT));
                    hi = hi.max(v.min(LIMIT));
                }
            }
        }
    }
    let x = Scale { d0: lo, d1: hi, p0: left, p1: left + plot_w };
    let mut svg = Svg::new(width, height);
    svg.text(width / 2.0, 20.0, 14.0, "middle", &format!("{}: posterior median and 95% CrI by cut-point", r.endpoint));
    for (i, model) in AnalysisModel::ALL.iter().enumerate() {
        let lx = 20.0 + 125.0 * i as f64;
        svg.circle(lx, 40.0, 4.0, PALETTE[i]);
        let note = match r.model(*model) {
            Some(m) if m.error.is_some() => " (failed)",
            Some(m) if !m.converged => " (degraded)",
            _ => "",
        };
        svg.text(lx + 8.0, 44.0, 10.0, "start", &format!("{model}{note}"));
    }
    let bottom = top + row_h * cuts.len() as f64;
    svg.line(x.map(0.0), top - 6.0, x.map(0.0), bottom, "#444", 1.0, true);
    for t in x.ticks(8) {
        svg.line(x.map(t), bottom, x.map(t), bottom + 4.0, "#333", 1.0, false);
        svg.text(x.map(t), bottom + 16.0, 9.0, "middle", &tick_label(t));
    }
    svg.text(left + plot_w / 2.0, bottom + 32.0, 10.0, "middle", "log odds ratio, treatment vs control (clipped at +/-3)");
    for (row, &k) in cuts.iter().enumerate() {
        let y0 = top + row_h * row as f64;
        if row % 2 == 1 {
            svg.rect(0.0, y0 - gap / 2.0, width, row_h, "#f2f2f2", 1.0, None);
        }
        let label = r.labels.get(k - 1).map_or(String::new(), |l| l.chars().take(18).collect());
        svg.text(left - 8.0, y0 + row_h / 2.0, 9.0, "end", &format!("k={k} (>= {label})"));
    }
    for (i, model) in AnalysisModel::ALL.iter().enumerate() {
        let Some(m) = r.model(*model) else { continue };
        svg.group_start("track", model.label());
        for c in &m.cutpoints {
            let Some(row) = cuts.iter().position(|&k| k == c.cutpoint) else { continue };
            let py = top + row_h * row as f64 + track * (i as f64 + 0.5);
            let (a, b, med) = (c.summary.ci_low, c.summary.ci_high, c.summary.median);
            if !(a.is_finite() && b.is_finite() && med.is_finite()) {
                continue;
            }
            let (ca, cb) = (a.clamp(lo, hi), b.clamp(lo, hi));
            svg.line(x.map(ca), py, x.map(cb), py, PALETTE[i], 1.5, false);
            if a < lo {
                svg.polygon(&[(x.map(lo), py), (x.map(lo) + 5.0, py - 3.0), (x.map(lo) + 5.0, py + 3.0)], PALETTE[i]);
            }
            if b > hi {
                svg.polygon(&[(x.map(hi), py), (x.map(hi) - 5.0, py - 3.0), (x.map(hi) - 5.0, py + 3.0)], PALETTE[i]);
            }
            if (lo..=hi).contains(&med) {
                svg.circle(x.map(med), py, 2.8, PALETTE[i]);
            }
        }
        svg.group_end();
    }
    if !r.sparse_categories.is_empty() {
        let list: Vec<String> = r.sparse_categories.iter().map(|k| k.to_string()).collect();
        svg.text(10.0, height - 8.0, 9.0, "start", &format!("sparse categories (< {} in an arm): {}", r.sparse_threshold, list.join(", ")));
    }
    svg.finish()
}

fn write_csv_out(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

/// Returns the paths written (empty when the CSV went to standard output).
pub fn run(args: &ReportArgs) -> Result<Vec<PathBuf>> {
    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let mut written = Vec::new();
    if args.kind == ReportKind::Forest {
        let results = load_case_results(&args.input)?;
        match args.format {
            ReportFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(crate::fit::FIT_CSV_HEADER)?;
                for r in &results {
                    for row in crate::fit::result_rows(r) {
                        w.write_record(&row)?;
                    }
                }
                write_csv_out(args.out.as_deref(), &w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?;
                written.extend(args.out.clone());
            }
            ReportFormat::Svg => {
                std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
                for r in &results {
                    let p = out_dir.join(format!("forest_{}.svg", r.endpoint));
                    write_atomic(&p, forest_svg(r).as_bytes())?;
                    written.push(p);
                }
            }
        }
        return Ok(written);
    }

    let path = aggregate_path(&args.input);
    if !path.exists() {
        bail!("aggregate file not found: {}", path.display());
    }
    let rows = read_aggregate_csv(&path)?;
    match args.format {
        ReportFormat::Csv => {
            write_csv_out(args.out.as_deref(), &emit_long_csv(&long_rows(&rows, args.kind))?)?;
            written.extend(args.out.clone());
        }
        ReportFormat::Svg => {
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let labels = scenario_labels(&path);
            let mut by_scenario: BTreeMap<&str, Vec<&AggregateRow>> = BTreeMap::new();
            for r in &rows {
                by_scenario.entry(r.scenario_id.as_str()).or_default().push(r);
            }
            for (id, rs) in by_scenario {
                let title = labels.get(id).map_or_else(|| id.to_string(), |l| format!("{l} [{id}]"));
                let p = out_dir.join(format!("{}_{id}.svg", args.kind.label()));
                write_atomic(&p, metric_svg(args.kind, &title, &rs).as_bytes())?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: AnalysisModel, k: usize, cov: f64) -> AggregateRow {
        AggregateRow {
            scenario_id: "00ff00ff00ff00ff".into(),
            model,
            cutpoint: k,
            bias: 0.0123456789,
            bias_mcse: 0.001,
            relbias_pct: -1.5,
            relbias_mcse: 0.25,
            coverage: cov,
            coverage_mcse: 0.0154,
            mse: 0.004,
            mse_mcse: 0.0003,
            n_effective_reps: 200,
            mcse_upper: [0.0; 4],
            relbias_pct_alt: 0.0,
        }
    }

    #[test]
    fn long_csv_round_trips() {
        let rows = vec![row(AnalysisModel::Po, 2, 0.95), row(AnalysisModel::PpoU, 3, 0.935)];
        for kind in [ReportKind::Bias, ReportKind::Relbias, ReportKind::Coverage, ReportKind::Mse] {
            let x = parse_long_csv(std::str::from_utf8(&emit_long_csv(&long_rows(&rows, kind)).unwrap()).unwrap()).unwrap();
            let again = parse_long_csv(std::str::from_utf8(&emit_long_csv(&x).unwrap()).unwrap()).unwrap();
            assert_eq!(x, again);
            assert_eq!(x.len(), 2);
        }
    }

    #[test]
    fn missing_columns_are_reported() {
        let err = parse_long_csv("scenario_id,model\nx,po\n").unwrap_err();
        assert!(err.to_string().contains("missing columns"));
    }

    #[test]
    fn coverage_svg_has_band_and_panels() {
        let rows = [row(AnalysisModel::Po, 2, 0.95), row(AnalysisModel::SepLogistic, 2, 0.9)];
        let refs: Vec<&AggregateRow> = rows.iter().collect();
        let a = metric_svg(ReportKind::Coverage, "t", &refs);
        assert_eq!(a, metric_svg(ReportKind::Coverage, "t", &refs));
        assert_eq!(a.matches("class=\"panel\"").count(), 2);
        assert!(a.contains("fill-opacity=\"0.20\""));
    }
}
