//! QPS sweeps and cross-run comparison.
//!
//! Sweep files:
//!
//! ```text
//! [sweep]
//! name = one_server
//! scenario = one_server.scenario   # relative to the sweep file
//! qps = 200, 300, 400
//! repetitions = 5                  # default: the scenario's
//! duration_s = 5                   # optional; budgets become qps * duration_s
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::stats::{
    confidence_interval, quartiles, welch_t, write_ttest_row, LatencySummary, Metric, TTestResult,
    BOXPLOT_HEADER, MIN_BOXPLOT_REPS, TTEST_HEADER,
};

use super::run::{run_scenario, RunOptions};
use super::scenario::{parse_scenario, parse_sections, ParseError, ScenarioSpec};
use super::OrchestratorError;

pub const SWEEP_HEADER: &str = "qps,metric,mean,ci_low,ci_high";
pub const CELLS_HEADER: &str = "qps,rep,ok,n,mean_ms,p95_ms,p99_ms,error";
pub const CI_LEVEL: f64 = 0.95;
/// Seed stride between repetitions.
const REP_SEED_STRIDE: u64 = 1_000_003;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub name: String,
    pub base: ScenarioSpec,
    pub qps: Vec<f64>,
    pub repetitions: u32,
    pub duration_s: Option<f64>,
}

impl SweepSpec {
    pub fn new(
        name: impl Into<String>,
        base: ScenarioSpec,
        qps: Vec<f64>,
        repetitions: u32,
        duration_s: Option<f64>,
    ) -> Result<Self, ParseError> {
        validate_qps(&qps).map_err(|msg| ParseError::new(0, msg))?;
        if repetitions == 0 {
            return Err(ParseError::new(0, "repetitions must be positive"));
        }
        Ok(SweepSpec {
            name: name.into(),
            base,
            qps,
            repetitions,
            duration_s,
        })
    }

    /// The scenario for one cell.
    pub fn cell_scenario(&self, qps: f64, rep: u32, seed_offset: u64) -> ScenarioSpec {
        self.base
            .with_uniform_qps(qps, self.duration_s)
            .reseeded(seed_offset.wrapping_add(rep as u64 * REP_SEED_STRIDE))
    }
}

fn validate_qps(qps: &[f64]) -> Result<(), String> {
    if qps.is_empty() {
        return Err("qps list is empty".into());
    }
    if let Some(q) = qps.iter().find(|q| !(**q > 0.0 && q.is_finite())) {
        return Err(format!("qps values must be positive, got {q}"));
    }
    if qps.windows(2).any(|w| w[1] <= w[0]) {
        return Err("qps list must be strictly increasing".into());
    }
    Ok(())
}

pub fn parse_sweep_str(text: &str, base_dir: &Path) -> Result<SweepSpec, ParseError> {
    let sections = parse_sections(text)?;
    let [s] = sections.as_slice() else {
        return Err(ParseError::new(
            sections.get(1).map_or(0, |s| s.line),
            "a sweep file holds exactly one [sweep] section",
        ));
    };
    if s.kind != "sweep" {
        return Err(ParseError::new(
            s.line,
            format!("unknown section [{}]", s.kind),
        ));
    }
    s.check_keys(&["name", "scenario", "qps", "repetitions", "duration_s"])?;
    let (scn, _) = s.required("scenario")?;
    let base = parse_scenario(&base_dir.join(scn))?;
    let (qps_text, qline) = s.required("qps")?;
    let qps = qps_text
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse::<f64>()
                .map_err(|_| ParseError::new(qline, format!("invalid qps value `{x}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    validate_qps(&qps).map_err(|msg| ParseError::new(qline, msg))?;
    let repetitions: u32 = s.parse_or("repetitions", base.repetitions)?;
    if repetitions == 0 {
        return Err(ParseError::new(
            s.get("repetitions").map_or(s.line, |x| x.1),
            "repetitions must be positive",
        ));
    }
    let duration_s = match s.get("duration_s") {
        None => None,
        Some((v, line)) => match v.parse::<f64>() {
            Ok(d) if d > 0.0 && d.is_finite() => Some(d),
            _ => {
                return Err(ParseError::new(
                    line,
                    format!("duration_s must be positive, got `{v}`"),
                ))
            }
        },
    };
    let name = s.get("name").map_or(base.name.clone(), |x| x.0.to_string());
    Ok(SweepSpec {
        name,
        base,
        qps,
        repetitions,
        duration_s,
    })
}

pub fn parse_sweep(path: &Path) -> Result<SweepSpec, ParseError> {
    let text =
        fs::read_to_string(path).map_err(|e| ParseError::new(0, e.to_string()).in_file(path))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    parse_sweep_str(&text, dir).map_err(|e| e.in_file(path))
}

/// One (QPS, repetition) run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub qps: f64,
    pub rep: u32,
    /// Whole-run summary over all clients; `None` if nothing completed.
    pub summary: Option<LatencySummary>,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn ok(&self) -> bool {
        self.error.is_none() && self.summary.is_some()
    }
}

/// Aggregate of one metric at one QPS point across successful repetitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub qps: f64,
    pub metric: Metric,
    pub mean: f64,
    /// 95% Student-t interval; `None` with fewer than two repetitions.
    pub ci: Option<(f64, f64)>,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub name: String,
    pub qps: Vec<f64>,
    pub repetitions: u32,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn values(&self, qps: f64, metric: Metric) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.qps == qps && c.ok())
            .filter_map(|c| c.summary.as_ref().map(|s| metric.of(s)))
            .collect()
    }

    pub fn incomplete_qps(&self) -> Vec<f64> {
        self.qps
            .iter()
            .copied()
            .filter(|&q| self.values(q, Metric::Mean).len() < self.repetitions as usize)
            .collect()
    }

    pub fn complete(&self) -> bool {
        self.incomplete_qps().is_empty()
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &qps in &self.qps {
            for metric in Metric::ALL {
                let v = self.values(qps, metric);
                if v.is_empty() {
                    continue;
                }
                out.push(SweepPoint {
                    qps,
                    metric,
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    ci: confidence_interval(&v, CI_LEVEL).ok(),
                    reps: v.len(),
                });
            }
        }
        out
    }

    pub fn to_table(&self) -> SweepTable {
        SweepTable::from_points(&self.name, &self.points())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{SWEEP_HEADER}")?;
        for p in self.points() {
            match p.ci {
                Some((lo, hi)) => writeln!(
                    w,
                    "{},{},{:.6},{lo:.6},{hi:.6}",
                    p.qps,
                    p.metric.name(),
                    p.mean
                )?,
                None => writeln!(w, "{},{},{:.6},,", p.qps, p.metric.name(), p.mean)?,
            }
        }
        Ok(())
    }

    pub fn write_cells_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CELLS_HEADER}")?;
        for c in &self.cells {
            let err = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            match &c.summary {
                Some(s) => writeln!(
                    w,
                    "{},{},{},{},{:.6},{:.6},{:.6},{err}",
                    c.qps,
                    c.rep,
                    c.ok(),
                    s.n,
                    s.mean_ms,
                    s.p95_ms,
                    s.p99_ms
                )?,
                None => writeln!(w, "{},{},false,0,,,,{err}", c.qps, c.rep)?,
            }
        }
        Ok(())
    }

    /// Per-QPS five-number summaries; empty unless enough repetitions ran.
    pub fn write_boxplot_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{BOXPLOT_HEADER}")?;
        for &qps in &self.qps {
            for metric in Metric::ALL {
                if let Ok(q) = quartiles(&self.values(qps, metric)) {
                    writeln!(
                        w,
                        "qps_{qps},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                        metric.name(),
                        q.min,
                        q.q1,
                        q.median,
                        q.q3,
                        q.max
                    )?;
                }
            }
        }
        Ok(())
    }

    /// `sweep.csv`, `cells.csv` and (with enough repetitions) `boxplot.csv`.
    pub fn save(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(File::create(dir.join("sweep.csv"))?);
        self.write_csv(&mut f)?;
        f.flush()?;
        let mut f = BufWriter::new(File::create(dir.join("cells.csv"))?);
        self.write_cells_csv(&mut f)?;
        f.flush()?;
        if self.repetitions as usize >= MIN_BOXPLOT_REPS {
            let mut f = BufWriter::new(File::create(dir.join("boxplot.csv"))?);
            self.write_boxplot_csv(&mut f)?;
            f.flush()?;
        }
        Ok(())
    }
}

/// Run every (QPS, repetition) cell. Failed cells are recorded and the
/// sweep carries on. `progress` sees each finished cell.
pub fn run_sweep(
    sweep: &SweepSpec,
    opts: &RunOptions,
    seed_offset: u64,
    mut progress: impl FnMut(&SweepCell),
) -> Result<SweepReport, OrchestratorError> {
    if sweep.repetitions < 2 {
        warn!(
            "sweep `{}`: one repetition, confidence intervals will be empty",
            sweep.name
        );
    }
    let mut cells = Vec::new();
    for &qps in &sweep.qps {
        for rep in 0..sweep.repetitions {
            let scenario = sweep.cell_scenario(qps, rep, seed_offset);
            let mut cell_opts = opts.clone();
            cell_opts.out_dir = opts
                .out_dir
                .as_ref()
                .map(|d| d.join(format!("qps_{qps}")).join(format!("rep_{rep}")));
            let cell = match run_scenario(&scenario, &cell_opts) {
                Ok(r) => SweepCell {
                    qps,
                    rep,
                    summary: r.summary(),
                    error: (!r.ok()).then(|| r.failures.join("; ")),
                },
                Err(e) => SweepCell {
                    qps,
                    rep,
                    summary: None,
                    error: Some(e.to_string()),
                },
            };
            if let Some(e) = &cell.error {
                warn!("sweep `{}` qps {qps} rep {rep} failed: {e}", sweep.name);
            } else {
                info!("sweep `{}` qps {qps} rep {rep} done", sweep.name);
            }
            progress(&cell);
            cells.push(cell);
        }
    }
    let report = SweepReport {
        name: sweep.name.clone(),
        qps: sweep.qps.clone(),
        repetitions: sweep.repetitions,
        cells,
    };
    if let Some(dir) = &opts.out_dir {
        report.save(dir)?;
    }
    let missing = report.incomplete_qps();
    if !missing.is_empty() {
        warn!(
            "sweep `{}` has incomplete cells at qps {missing:?}",
            sweep.name
        );
    }
    Ok(report)
}

/// Per-QPS, per-metric means; what `sweep.csv` holds and what
/// `compare_runs` consumes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub name: String,
    /// Keyed by the QPS value's bit pattern so identical grids line up
    /// exactly; iteration is in increasing QPS order for positive values.
    rows: BTreeMap<(u64, Metric), f64>,
}

impl SweepTable {
    pub fn from_points(name: &str, points: &[SweepPoint]) -> Self {
        SweepTable {
            name: name.to_string(),
            rows: points
                .iter()
                .map(|p| ((p.qps.to_bits(), p.metric), p.mean))
                .collect(),
        }
    }

    pub fn qps(&self) -> Vec<f64> {
        let mut q: Vec<f64> = self.rows.keys().map(|(b, _)| f64::from_bits(*b)).collect();
        q.dedup();
        q
    }

    pub fn get(&self, qps: f64, metric: Metric) -> Option<f64> {
        self.rows.get(&(qps.to_bits(), metric)).copied()
    }

    pub fn read_csv<R: BufRead>(name: &str, r: R) -> Result<Self, OrchestratorError> {
        let bad = |line: usize, msg: String| {
            OrchestratorError::Report(format!("{name}: line {line}: {msg}"))
        };
        let mut rows = BTreeMap::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim() != SWEEP_HEADER {
                    return Err(bad(1, format!("expected header `{SWEEP_HEADER}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected 5 fields".into()));
            }
            let qps: f64 = f[0]
                .parse()
                .map_err(|_| bad(i + 1, format!("bad qps `{}`", f[0])))?;
            let metric =
                Metric::parse(f[1]).ok_or_else(|| bad(i + 1, format!("bad metric `{}`", f[1])))?;
            let mean: f64 = f[2]
                .parse()
                .map_err(|_| bad(i + 1, format!("bad mean `{}`", f[2])))?;
            rows.insert((qps.to_bits(), metric), mean);
        }
        Ok(SweepTable {
            name: name.to_string(),
            rows,
        })
    }

    /// Load `sweep.csv`, or `<dir>/sweep.csv` when given a directory.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let file: PathBuf = if path.is_dir() {
            path.join("sweep.csv")
        } else {
            path.to_path_buf()
        };
        let f = File::open(&file)
            .map_err(|e| OrchestratorError::Report(format!("{}: {e}", file.display())))?;
        SweepTable::read_csv(&path.display().to_string(), BufReader::new(f))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub rows: Vec<(Metric, TTestResult)>,
}

impl Comparison {
    pub fn get(&self, metric: Metric) -> Option<&TTestResult> {
        self.rows.iter().find(|(m, _)| *m == metric).map(|(_, r)| r)
    }

    pub fn all_indistinguishable(&self) -> bool {
        self.rows
            .iter()
            .all(|(_, r)| r.t_statistic.abs() < 2.0 && r.p_value > 0.05)
    }

    /// `metric  T-statistic / P-value` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} vs {}\n", self.a, self.b);
        for (m, r) in &self.rows {
            let _ = writeln!(s, "{:<5} {r}", m.name());
        }
        s
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{TTEST_HEADER}")?;
        for (m, r) in &self.rows {
            write_ttest_row(&mut w, *m, r)?;
        }
        Ok(())
    }
}

/// Welch's t-test per metric over the per-QPS mean vectors of two sweeps
/// with identical grids.
pub fn compare_runs(
    a: &SweepTable,
    b: &SweepTable,
    metrics: &[Metric],
) -> Result<Comparison, OrchestratorError> {
    let qa = a.qps();
    let qb = b.qps();
    let only_a: Vec<f64> = qa.iter().copied().filter(|q| !qb.contains(q)).collect();
    let only_b: Vec<f64> = qb.iter().copied().filter(|q| !qa.contains(q)).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(OrchestratorError::GridMismatch {
            missing_in_a: only_b,
            missing_in_b: only_a,
        });
    }
    let mut rows = Vec::with_capacity(metrics.len());
    for &m in metrics {
        let mut x = Vec::with_capacity(qa.len());
        let mut y = Vec::with_capacity(qa.len());
        for &q in &qa {
            match (a.get(q, m), b.get(q, m)) {
                (Some(va), Some(vb)) => {
                    x.push(va);
                    y.push(vb);
                }
                (va, _) => {
                    let (missing_in_a, missing_in_b) = if va.is_none() {
                        (vec![q], vec![])
                    } else {
                        (vec![], vec![q])
                    };
                    return Err(OrchestratorError::GridMismatch {
                        missing_in_a,
                        missing_in_b,
                    });
                }
            }
        }
        rows.push((m, welch_t(&x, &y)?));
    }
    Ok(Comparison {
        a: a.name.clone(),
        b: b.name.clone(),
        rows,
    })
}
