//! Latency aggregation and statistical validation.
//!
//! Percentiles use the nearest-rank rule: the `ceil(q * n)`-th smallest
//! sample (1-based). Time-series windows are keyed by completion time.

pub mod tdist;

use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use crate::client::ClientLog;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no samples")]
    Empty,
    #[error("percentile must be in (0, 1], got {0}")]
    BadQuantile(f64),
    #[error("no samples in window [{0}, {1})")]
    EmptyWindow(f64, f64),
    #[error("{what} needs at least {need} values, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("both samples have zero variance but different means")]
    Degenerate,
    #[error("confidence level must be in (0, 1), got {0}")]
    BadLevel(f64),
}

/// One request's latency decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySample {
    pub sojourn_ns: u64,
    pub queue_ns: u64,
    pub service_ns: u64,
    /// Completion time relative to the scenario start.
    pub completion_offset_s: f64,
    /// Planned send time relative to the scenario start.
    pub send_offset_s: f64,
    pub client_id: u64,
    pub server_id: u32,
}

/// Convert a client log into samples, with offsets relative to `origin_ns`.
pub fn samples_from_log(log: &ClientLog, origin_ns: u64) -> Vec<LatencySample> {
    let off = |ns: u64| (ns as f64 - origin_ns as f64) / 1e9;
    log.entries
        .iter()
        .map(|e| LatencySample {
            sojourn_ns: e.sojourn_ns(),
            queue_ns: e
                .timings
                .service_start_ns
                .saturating_sub(e.timings.server_recv_ns),
            service_ns: e
                .timings
                .service_end_ns
                .saturating_sub(e.timings.service_start_ns),
            completion_offset_s: off(e.recv_ns),
            send_offset_s: off(e.planned_ns),
            client_id: log.client_id,
            server_id: e.timings.server_id,
        })
        .collect()
}

/// Which timestamp places a sample in a time-series window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowKey {
    #[default]
    Completion,
    Send,
}

impl LatencySample {
    pub fn offset(&self, key: WindowKey) -> f64 {
        match key {
            WindowKey::Completion => self.completion_offset_s,
            WindowKey::Send => self.send_offset_s,
        }
    }
}

fn nearest_rank(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    let mut r = x.ceil();
    // q * n that should be an exact integer can land a hair above it
    if r - x > 1.0 - 1e-9 {
        r -= 1.0;
    }
    (r as usize).clamp(1, n)
}

/// Nearest-rank percentile of an already sorted slice.
pub fn percentile_sorted<T: Copy>(sorted: &[T], q: f64) -> Result<T, StatsError> {
    if sorted.is_empty() {
        return Err(StatsError::Empty);
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(StatsError::BadQuantile(q));
    }
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}

/// Nearest-rank percentile of unsorted durations.
pub fn percentile(samples: &[u64], q: f64) -> Result<u64, StatsError> {
    let mut v = samples.to_vec();
    v.sort_unstable();
    percentile_sorted(&v, q)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySummary {
    pub n: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    /// Summary of sojourn times in nanoseconds.
    pub fn from_ns(values: &[u64]) -> Result<Self, StatsError> {
        if values.is_empty() {
            return Err(StatsError::Empty);
        }
        let mut v = values.to_vec();
        v.sort_unstable();
        let ms = |ns: u64| ns as f64 / 1e6;
        let sum: u128 = v.iter().map(|&x| x as u128).sum();
        let min = ms(v[0]);
        let max = ms(v[v.len() - 1]);
        let mean = (sum as f64 / v.len() as f64 / 1e6).clamp(min, max);
        Ok(LatencySummary {
            n: v.len(),
            mean_ms: mean,
            p95_ms: ms(percentile_sorted(&v, 0.95)?),
            p99_ms: ms(percentile_sorted(&v, 0.99)?),
            min_ms: min,
            max_ms: max,
        })
    }

    pub fn is_consistent(&self) -> bool {
        self.n >= 1
            && self.min_ms <= self.mean_ms
            && self.mean_ms <= self.max_ms
            && self.p95_ms <= self.p99_ms
            && self.p99_ms <= self.max_ms
    }
}

/// Summarize sojourn times, optionally restricted to samples completing in
/// `[start_s, end_s)`.
pub fn summarize(
    samples: &[LatencySample],
    window: Option<(f64, f64)>,
) -> Result<LatencySummary, StatsError> {
    summarize_keyed(samples, window, WindowKey::Completion)
}

pub fn summarize_keyed(
    samples: &[LatencySample],
    window: Option<(f64, f64)>,
    key: WindowKey,
) -> Result<LatencySummary, StatsError> {
    let v: Vec<u64> = samples
        .iter()
        .filter(|s| window.is_none_or(|(a, b)| s.offset(key) >= a && s.offset(key) < b))
        .map(|s| s.sojourn_ns)
        .collect();
    match (v.is_empty(), window) {
        (true, Some((a, b))) => Err(StatsError::EmptyWindow(a, b)),
        (true, None) => Err(StatsError::Empty),
        _ => LatencySummary::from_ns(&v),
    }
}

/// One time-series bucket; `summary` is `None` for an empty window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSummary {
    pub start_s: f64,
    pub end_s: f64,
    pub summary: Option<LatencySummary>,
}

/// Consecutive `width_s` windows covering `[from_s, to_s)`.
pub fn windowed(
    samples: &[LatencySample],
    from_s: f64,
    to_s: f64,
    width_s: f64,
    key: WindowKey,
) -> Vec<WindowSummary> {
    assert!(width_s > 0.0, "window width must be positive");
    let count = ((to_s - from_s) / width_s).ceil().max(0.0) as usize;
    let mut buckets: Vec<Vec<u64>> = vec![Vec::new(); count];
    for s in samples {
        let off = s.offset(key);
        if off >= from_s && off < to_s {
            let i = (((off - from_s) / width_s) as usize).min(count - 1);
            buckets[i].push(s.sojourn_ns);
        }
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, b)| WindowSummary {
            start_s: from_s + i as f64 * width_s,
            end_s: (from_s + (i + 1) as f64 * width_s).min(to_s),
            summary: LatencySummary::from_ns(&b).ok(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Mean,
    P95,
    P99,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mean, Metric::P95, Metric::P99];

    pub fn of(self, s: &LatencySummary) -> f64 {
        match self {
            Metric::Mean => s.mean_ms,
            Metric::P95 => s.p95_ms,
            Metric::P99 => s.p99_ms,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mean => "mean",
            Metric::P95 => "p95",
            Metric::P99 => "p99",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    /// Two-sided.
    pub p_value: f64,
    pub reject_at_0_05: bool,
}

impl fmt::Display for TTestResult {
    /// `T-statistic / P-value`, two decimals each.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} / {:.2}", self.t_statistic, self.p_value)
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance two-sample t-test.
pub fn welch_t(x: &[f64], y: &[f64]) -> Result<TTestResult, StatsError> {
    for v in [x, y] {
        if v.len() < 2 {
            return Err(StatsError::TooFew {
                what: "welch_t",
                need: 2,
                got: v.len(),
            });
        }
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let (a, b) = (vx / nx, vy / ny);
    if a + b == 0.0 {
        return if mx == my {
            Ok(TTestResult {
                t_statistic: 0.0,
                degrees_of_freedom: nx + ny - 2.0,
                p_value: 1.0,
                reject_at_0_05: false,
            })
        } else {
            Err(StatsError::Degenerate)
        };
    }
    let t = (mx - my) / (a + b).sqrt();
    let dof = (a + b) * (a + b) / (a * a / (nx - 1.0) + b * b / (ny - 1.0));
    let p = tdist::two_sided_p(t, dof);
    Ok(TTestResult {
        t_statistic: t,
        degrees_of_freedom: dof,
        p_value: p,
        reject_at_0_05: p < 0.05,
    })
}

/// Student-t confidence interval for the mean.
pub fn confidence_interval(values: &[f64], level: f64) -> Result<(f64, f64), StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew {
            what: "confidence_interval",
            need: 2,
            got: values.len(),
        });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::BadLevel(level));
    }
    let (mean, var) = mean_var(values);
    let n = values.len() as f64;
    let mult = tdist::quantile(1.0 - (1.0 - level) / 2.0, n - 1.0);
    let half = mult * var.sqrt() / n.sqrt();
    Ok((mean - half, mean + half))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub const MIN_BOXPLOT_REPS: usize = 5;

/// Five-number summary of one metric across repetitions (nearest rank).
pub fn boxplot_export(runs: &[LatencySummary], metric: Metric) -> Result<Quartiles, StatsError> {
    let values: Vec<f64> = runs.iter().map(|r| metric.of(r)).collect();
    quartiles(&values)
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles, StatsError> {
    if values.len() < MIN_BOXPLOT_REPS {
        return Err(StatsError::TooFew {
            what: "boxplot (run more repetitions)",
            need: MIN_BOXPLOT_REPS,
            got: values.len(),
        });
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Quartiles {
        min: v[0],
        q1: percentile_sorted(&v, 0.25)?,
        median: percentile_sorted(&v, 0.5)?,
        q3: percentile_sorted(&v, 0.75)?,
        max: v[v.len() - 1],
    })
}

pub const SUMMARY_HEADER: &str = "scope,window_start_s,window_end_s,n,mean_ms,p95_ms,p99_ms";
pub const TTEST_HEADER: &str = "metric,t,dof,p,reject";
pub const BOXPLOT_HEADER: &str = "scope,metric,min,q1,median,q3,max";

/// One row of the summary CSV. Empty windows print `n = 0` and blank
/// statistics.
pub fn write_summary_row<W: Write>(
    w: &mut W,
    scope: &str,
    start_s: f64,
    end_s: f64,
    s: Option<&LatencySummary>,
) -> io::Result<()> {
    match s {
        Some(s) => writeln!(
            w,
            "{scope},{start_s:.3},{end_s:.3},{},{:.6},{:.6},{:.6}",
            s.n, s.mean_ms, s.p95_ms, s.p99_ms
        ),
        None => writeln!(w, "{scope},{start_s:.3},{end_s:.3},0,,,"),
    }
}

pub fn write_ttest_row<W: Write>(w: &mut W, metric: Metric, r: &TTestResult) -> io::Result<()> {
    writeln!(
        w,
        "{},{:.6},{:.6},{:.6},{}",
        metric.name(),
        r.t_statistic,
        r.degrees_of_freedom,
        r.p_value,
        r.reject_at_0_05
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: &[u64]) -> Vec<u64> {
        v.iter().map(|x| x * 1_000_000).collect()
    }

    fn sample(sojourn_ms: u64, at_s: f64) -> LatencySample {
        LatencySample {
            sojourn_ns: sojourn_ms * 1_000_000,
            queue_ns: 0,
            service_ns: 0,
            completion_offset_s: at_s,
            send_offset_s: at_s,
            client_id: 0,
            server_id: 0,
        }
    }

    #[test]
    fn nearest_rank_examples() {
        let hundred: Vec<u64> = ms(&(1..=100).collect::<Vec<_>>());
        assert_eq!(percentile(&hundred, 0.95).unwrap(), 95_000_000);
        let twenty: Vec<u64> = (1..=20).collect();
        assert_eq!(percentile(&twenty, 0.99).unwrap(), 20);
        for q in [0.01, 0.5, 1.0] {
            assert_eq!(percentile(&[42], q).unwrap(), 42);
        }
        assert_eq!(percentile(&[], 0.5), Err(StatsError::Empty));
        assert_eq!(percentile(&[1], 0.0), Err(StatsError::BadQuantile(0.0)));
        // 0.07 * 100 is 7.000000000000001 in binary floating point
        assert_eq!(percentile(&(1..=100).collect::<Vec<_>>(), 0.07).unwrap(), 7);
    }

    #[test]
    fn summary_of_three() {
        let s = summarize(&[sample(10, 0.1), sample(20, 0.2), sample(30, 0.3)], None).unwrap();
        assert_eq!(s.n, 3);
        assert!((s.mean_ms - 20.0).abs() < 1e-12);
        assert_eq!(s.p95_ms, 30.0);
        assert_eq!(s.p99_ms, 30.0);
        assert!(s.is_consistent());
    }

    #[test]
    fn windows_partition_samples() {
        let samples: Vec<_> = (0..500)
            .map(|i| sample(i % 17 + 1, i as f64 * 0.013))
            .collect();
        let all = summarize(&samples, None).unwrap();
        let covering = summarize(&samples, Some((0.0, 100.0))).unwrap();
        assert_eq!(all, covering);
        let w = windowed(&samples, 0.0, 7.0, 1.0, WindowKey::Completion);
        let total: usize = w.iter().map(|w| w.summary.map_or(0, |s| s.n)).sum();
        assert_eq!(total, samples.len());
        assert!(matches!(
            summarize(&samples, Some((50.0, 51.0))),
            Err(StatsError::EmptyWindow(..))
        ));
    }

    #[test]
    fn welch_identical_lists() {
        let x = [1.0, 4.0, 2.5, 8.0];
        let r = welch_t(&x, &x).unwrap();
        assert_eq!(r.t_statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.reject_at_0_05);
    }

    #[test]
    fn welch_small_example() {
        let r = welch_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((r.t_statistic + 1.0).abs() < 1e-12);
        assert!((r.degrees_of_freedom - 8.0).abs() < 1e-12);
        assert!((r.p_value - 0.3466).abs() < 1e-4);
        assert_eq!(r.to_string(), "-1.00 / 0.35");
    }

    #[test]
    fn welch_degenerate_inputs() {
        let r = welch_t(&[3.0, 3.0], &[3.0, 3.0, 3.0]).unwrap();
        assert_eq!((r.t_statistic, r.p_value), (0.0, 1.0));
        assert_eq!(
            welch_t(&[3.0, 3.0], &[4.0, 4.0]),
            Err(StatsError::Degenerate)
        );
        assert!(matches!(
            welch_t(&[1.0], &[1.0, 2.0]),
            Err(StatsError::TooFew { .. })
        ));
    }

    #[test]
    fn ci_examples() {
        let (lo, hi) = confidence_interval(&[10.0, 20.0], 0.95).unwrap();
        let half = 12.706204736174705 * (50.0f64.sqrt() / 2.0f64.sqrt());
        assert!((lo - (15.0 - half)).abs() < 1e-9);
        assert!((hi - (15.0 + half)).abs() < 1e-9);
        assert_eq!(confidence_interval(&[7.0; 13], 0.95).unwrap(), (7.0, 7.0));
        assert!(confidence_interval(&[1.0], 0.95).is_err());
    }

    #[test]
    fn quartile_examples() {
        let v: Vec<f64> = (1..=13).map(f64::from).collect();
        let q = quartiles(&v).unwrap();
        assert_eq!(q.median, 7.0);
        assert_eq!(q.q1, 4.0);
        assert_eq!(q.q3, 10.0);
        assert_eq!((q.min, q.max), (1.0, 13.0));
        let same = quartiles(&[2.5; 13]).unwrap();
        assert!([same.min, same.q1, same.median, same.q3, same.max]
            .iter()
            .all(|&x| x == 2.5));
        assert!(matches!(
            quartiles(&[1.0; 4]),
            Err(StatsError::TooFew { .. })
        ));
    }

    #[test]
    fn boxplot_by_metric() {
        let runs: Vec<_> = (1..=5)
            .map(|i| LatencySummary::from_ns(&[i * 1_000_000, i * 3_000_000]).unwrap())
            .collect();
        let q = boxplot_export(&runs, Metric::P99).unwrap();
        assert_eq!(q.max, 15.0);
        assert_eq!(q.median, 9.0);
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        write_summary_row(&mut buf, "client1", 0.0, 1.0, None).unwrap();
        let s = LatencySummary::from_ns(&[1_000_000]).unwrap();
        write_summary_row(&mut buf, "all", 0.0, 1.0, Some(&s)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "client1,0.000,1.000,0,,,\nall,0.000,1.000,1,1.000000,1.000000,1.000000\n"
        );
    }
}
