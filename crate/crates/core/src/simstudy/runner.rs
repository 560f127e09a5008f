//! Resumable grid execution and the on-disk layout:
//!
//! ```text
//! <out>/records/<scenario_id>.ndjson   one MetricRecord per line
//! <out>/aggregate.csv                  one row per scenario x model x cut-point
//! <out>/relbias_audit.csv              both relative-bias definitions
//! <out>/manifest.json                  plan, seed, version, timestamps
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{aggregate_cells, AggregateOptions, AggregateRow, CellKey};
use super::{run_replicate, MetricRecord, ScenarioConfig};
use crate::{Error, Result};

pub const AGGREGATE_HEADER: [&str; 12] = [
    "scenario_id",
    "model",
    "cutpoint",
    "bias",
    "bias_mcse",
    "relbias_pct",
    "relbias_mcse",
    "coverage",
    "coverage_mcse",
    "mse",
    "mse_mcse",
    "n_effective_reps",
];

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Reuse complete replicates found in existing record files.
    pub resume: bool,
    pub aggregate: AggregateOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub scenarios: Vec<ScenarioConfig>,
    pub aggregate: AggregateOptions,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone)]
pub struct GridRunSummary {
    pub n_records: usize,
    pub n_failed: usize,
    pub n_replicates_run: usize,
    pub rows: Vec<AggregateRow>,
    /// Cells without enough usable replicates, with the reason.
    pub skipped_cells: Vec<(CellKey, String)>,
}

impl GridRunSummary {
    pub fn is_partial(&self) -> bool {
        self.n_failed > 0 || !self.skipped_cells.is_empty()
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Write `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Six significant digits, printed in the shortest form that round-trips.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let r: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{r}")
}

fn records_path(out: &Path, id: &str) -> PathBuf {
    out.join("records").join(format!("{id}.ndjson"))
}

/// Read a record file. A truncated final line (interrupted write) is ignored.
pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(f).lines().collect::<std::io::Result<_>>().map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(Error::Json { context: format!("{}: line {}", path.display(), i + 1), source: e }),
        }
    }
    Ok(out)
}

fn encode_records(records: &[MetricRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Json { context: "record".into(), source: e })?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Replicates whose full record set is present.
fn complete_replicates(sc: &ScenarioConfig, records: &[MetricRecord]) -> BTreeSet<usize> {
    let mut per_rep: BTreeMap<usize, BTreeSet<(crate::AnalysisModel, usize)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.scenario_id == sc.scenario_id) {
        per_rep.entry(r.replicate).or_default().insert((r.model, r.cutpoint));
    }
    per_rep
        .into_iter()
        .filter(|(rep, set)| *rep < sc.n_sim && set.len() == sc.records_per_replicate())
        .map(|(rep, _)| rep)
        .collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(AGGREGATE_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.scenario_id.clone(),
            r.model.label().to_string(),
            r.cutpoint.to_string(),
            format_sig6(r.bias),
            format_sig6(r.bias_mcse),
            format_sig6(r.relbias_pct),
            format_sig6(r.relbias_mcse),
            format_sig6(r.coverage),
            format_sig6(r.coverage_mcse),
            format_sig6(r.mse),
            format_sig6(r.mse_mcse),
            r.n_effective_reps.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}

fn write_relbias_audit(path: &Path, rows: &[AggregateRow], opts: &AggregateOptions) -> Result<()> {
    let (primary, alt) = match opts.relbias {
        super::RelbiasDefinition::MeanRatio => ("relbias_pct_mean_ratio", "relbias_pct_ratio_of_means"),
        super::RelbiasDefinition::RatioOfMeans => ("relbias_pct_ratio_of_means", "relbias_pct_mean_ratio"),
    };
    let mut s = format!("scenario_id,model,cutpoint,{primary},{alt}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scenario_id,
            r.model,
            r.cutpoint,
            format_sig6(r.relbias_pct),
            format_sig6(r.relbias_pct_alt)
        ));
    }
    write_atomic(path, s.as_bytes())
}

fn parse_f64(path: &Path, row: usize, col: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Parse { path: path.into(), row, column: col.into(), message: format!("not a number: {v:?}") })
}

/// Read an aggregate CSV written by [`write_aggregate_csv`]. Columns outside
/// the CSV are left at their defaults.
pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let headers = rd.headers().map_err(|e| Error::io(path, std::io::Error::other(e)))?.clone();
    let idx = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.into(),
            row: 1,
            column: name.into(),
            message: "missing column".into(),
        })
    };
    let cols: Vec<usize> = AGGREGATE_HEADER.iter().map(|h| idx(h)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let get = |c: usize| rec.get(cols[c]).unwrap_or("");
        let f = |c: usize| parse_f64(path, row, AGGREGATE_HEADER[c], get(c));
        let model = get(1)
            .parse()
            .map_err(|m: String| Error::Parse { path: path.into(), row, column: "model".into(), message: m })?;
        let int = |c: usize| {
            get(c).parse::<usize>().map_err(|_| Error::Parse {
                path: path.into(),
                row,
                column: AGGREGATE_HEADER[c].into(),
                message: format!("not an integer: {:?}", get(c)),
            })
        };
        out.push(AggregateRow {
            scenario_id: get(0).to_string(),
            model,
            cutpoint: int(2)?,
            bias: f(3)?,
            bias_mcse: f(4)?,
            relbias_pct: f(5)?,
            relbias_mcse: f(6)?,
            coverage: f(7)?,
            coverage_mcse: f(8)?,
            mse: f(9)?,
            mse_mcse: f(10)?,
            n_effective_reps: int(11)?,
            mcse_upper: [f64::NAN; 4],
            relbias_pct_alt: f64::NAN,
        });
    }
    Ok(out)
}

/// Run (or resume) every replicate of every scenario, then rewrite record
/// files in canonical order and write aggregates and the manifest.
///
/// `progress` is called after each finished replicate with
/// `(scenario, replicate, records)`.
pub fn run_grid<P>(scenarios: &[ScenarioConfig], out: &Path, opts: &RunOptions, progress: P) -> Result<GridRunSummary>
where
    P: Fn(&ScenarioConfig, usize, &[MetricRecord]) + Sync,
{
    let started = now_unix();
    fs::create_dir_all(out.join("records")).map_err(|e| Error::io(out, e))?;
    let manifest_path = out.join("manifest.json");
    if opts.resume && manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let old: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Json { context: manifest_path.display().to_string(), source: e })?;
        let seed = scenarios.first().map_or(old.seed, |s| s.seed);
        if old.seed != seed {
            return Err(Error::InvalidScenario(format!(
                "cannot resume: {} was produced with seed {}, not {}",
                out.display(),
                old.seed,
                seed
            )));
        }
    }

    // Existing records, per scenario.
    let mut existing: Vec<Vec<MetricRecord>> = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        let p = records_path(out, &sc.scenario_id);
        let recs = if opts.resume && p.exists() { read_records(&p)? } else { Vec::new() };
        existing.push(recs);
    }
    let mut work = Vec::new();
    let mut kept: Vec<Vec<MetricRecord>> = Vec::with_capacity(scenarios.len());
    for (s, sc) in scenarios.iter().enumerate() {
        let done = complete_replicates(sc, &existing[s]);
        kept.push(existing[s].iter().filter(|r| done.contains(&r.replicate)).cloned().collect());
        work.extend((0..sc.n_sim).filter(|rep| !done.contains(rep)).map(|rep| (s, rep)));
        // Start each file from its complete replicates only.
        write_atomic(&records_path(out, &sc.scenario_id), &encode_records(&kept[s])?)?;
    }

    let files: Vec<Mutex<File>> = scenarios
        .iter()
        .map(|sc| {
            let p = records_path(out, &sc.scenario_id);
            OpenOptions::new().append(true).open(&p).map(Mutex::new).map_err(|e| Error::io(&p, e))
        })
        .collect::<Result<_>>()?;

    let fresh: Vec<(usize, Vec<MetricRecord>)> = work
        .par_iter()
        .map(|&(s, rep)| {
            let sc = &scenarios[s];
            let recs = run_replicate(sc, rep)?;
            let bytes = encode_records(&recs)?;
            {
                let mut f = files[s].lock().expect("record file lock");
                f.write_all(&bytes).and_then(|_| f.flush()).map_err(|e| Error::io(records_path(out, &sc.scenario_id), e))?;
            }
            progress(sc, rep, &recs);
            Ok((s, recs))
        })
        .collect::<Result<_>>()?;
    drop(files);

    let n_replicates_run = fresh.len();
    for (s, recs) in fresh {
        kept[s].extend(recs);
    }
    let mut all = Vec::new();
    for (s, sc) in scenarios.iter().enumerate() {
        kept[s].sort_by_key(MetricRecord::sort_key);
        write_atomic(&records_path(out, &sc.scenario_id), &encode_records(&kept[s])?)?;
        all.append(&mut kept[s]);
    }

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (k, r) in aggregate_cells(&all, &opts.aggregate) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => skipped.push((k, e.to_string())),
        }
    }
    write_aggregate_csv(&out.join("aggregate.csv"), &rows)?;
    write_relbias_audit(&out.join("relbias_audit.csv"), &rows, &opts.aggregate)?;

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: scenarios.first().map_or(0, |s| s.seed),
        scenarios: scenarios.to_vec(),
        aggregate: opts.aggregate,
        started_unix: started,
        finished_unix: now_unix(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Json { context: "manifest".into(), source: e })?;
    write_atomic(&manifest_path, &json)?;

    Ok(GridRunSummary {
        n_records: all.len(),
        n_failed: all.iter().filter(|r| r.failure.is_some()).count(),
        n_replicates_run,
        rows,
        skipped_cells: skipped,
    })
}
