//! Piecewise-constant QPS schedules and open-loop arrival planning.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule has no intervals")]
    Empty,
    #[error("first interval must start at 0, got {0}")]
    FirstNotZero(f64),
    #[error("interval starts must be strictly increasing ({prev} then {next})")]
    NotIncreasing { prev: f64, next: f64 },
    #[error("qps must be positive and finite, got {0}")]
    BadRate(f64),
    #[error("malformed schedule entry `{0}` (expected start_s:qps)")]
    Syntax(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start_s: f64,
    pub qps: f64,
}

/// Ordered `(start_offset_s, qps)` intervals. Interval i covers
/// `[start_i, start_{i+1})`; the last one never ends.
#[derive(Debug, Clone, PartialEq)]
pub struct QpsSchedule {
    intervals: Vec<Interval>,
}

impl QpsSchedule {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self, ScheduleError> {
        let first = intervals.first().ok_or(ScheduleError::Empty)?;
        if first.0 != 0.0 {
            return Err(ScheduleError::FirstNotZero(first.0));
        }
        for w in intervals.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(ScheduleError::NotIncreasing {
                    prev: w[0].0,
                    next: w[1].0,
                });
            }
        }
        if let Some(&(_, q)) = intervals.iter().find(|(_, q)| !(*q > 0.0 && q.is_finite())) {
            return Err(ScheduleError::BadRate(q));
        }
        Ok(QpsSchedule {
            intervals: intervals
                .into_iter()
                .map(|(start_s, qps)| Interval { start_s, qps })
                .collect(),
        })
    }

    pub fn constant(qps: f64) -> Result<Self, ScheduleError> {
        Self::new(vec![(0.0, qps)])
    }

    /// Parse `start:qps, start:qps, ...`.
    pub fn parse(text: &str) -> Result<Self, ScheduleError> {
        let mut v = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (s, q) = part
                .split_once(':')
                .ok_or_else(|| ScheduleError::Syntax(part.to_string()))?;
            let s: f64 = s
                .trim()
                .parse()
                .map_err(|_| ScheduleError::Syntax(part.to_string()))?;
            let q: f64 = q
                .trim()
                .parse()
                .map_err(|_| ScheduleError::Syntax(part.to_string()))?;
            v.push((s, q));
        }
        Self::new(v)
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    fn index_at(&self, elapsed_s: f64) -> usize {
        self.intervals
            .partition_point(|iv| iv.start_s <= elapsed_s)
            .saturating_sub(1)
    }

    /// Target rate at `elapsed_s` seconds into the client's run.
    pub fn current_rate(&self, elapsed_s: f64) -> f64 {
        self.intervals[self.index_at(elapsed_s.max(0.0))].qps
    }

    /// Expected number of requests issued in `[0, t)`.
    pub fn cumulative(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for (i, iv) in self.intervals.iter().enumerate() {
            if t <= iv.start_s {
                break;
            }
            let end = self
                .intervals
                .get(i + 1)
                .map_or(t, |next| next.start_s.min(t));
            acc += (end - iv.start_s) * iv.qps;
        }
        acc
    }

    /// Inverse of `cumulative`: the time by which `count` requests are due.
    pub fn time_for_count(&self, count: f64) -> f64 {
        let mut acc = 0.0;
        for (i, iv) in self.intervals.iter().enumerate() {
            let span = self
                .intervals
                .get(i + 1)
                .map(|next| (next.start_s - iv.start_s) * iv.qps);
            match span {
                Some(s) if acc + s < count => acc += s,
                _ => return iv.start_s + (count - acc) / iv.qps,
            }
        }
        unreachable!("last interval is unbounded")
    }
}

impl fmt::Display for QpsSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, iv) in self.intervals.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}:{}", iv.start_s, iv.qps)?;
        }
        Ok(())
    }
}

/// How unit-rate exponential gaps are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArrivalProcess {
    /// Independent exponential gaps (a Poisson process).
    Poisson,
    /// Exponential gaps drawn by Latin-hypercube stratification in blocks of
    /// `STRATA`: every gap is still Exp(1) distributed, but block sums have
    /// far lower variance, so per-interval counts track the schedule closely.
    #[default]
    Stratified,
}

impl ArrivalProcess {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "poisson" => Some(ArrivalProcess::Poisson),
            "stratified" => Some(ArrivalProcess::Stratified),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ArrivalProcess::Poisson => "poisson",
            ArrivalProcess::Stratified => "stratified",
        }
    }
}

pub const STRATA: usize = 64;

fn unit_gaps(process: ArrivalProcess, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = |u: f64| -(1.0 - u).ln();
    match process {
        ArrivalProcess::Poisson => (0..n).map(|_| exp(rng.random::<f64>())).collect(),
        ArrivalProcess::Stratified => {
            let mut out = Vec::with_capacity(n);
            let mut strata: Vec<usize> = (0..STRATA).collect();
            while out.len() < n {
                strata.shuffle(&mut rng);
                for &s in &strata {
                    let u = (s as f64 + rng.random::<f64>()) / STRATA as f64;
                    out.push(exp(u));
                }
            }
            out.truncate(n);
            out
        }
    }
}

/// Planned send offsets (seconds from the client's start) for `n` requests.
///
/// Unit-rate gaps are accumulated and mapped through the inverse cumulative
/// rate, so within an interval consecutive sends are `Exp(rate)` apart and
/// rate switches happen exactly at interval boundaries. Deterministic in
/// `(schedule, n, seed, process)`.
pub fn plan_send_offsets(
    schedule: &QpsSchedule,
    n: usize,
    seed: u64,
    process: ArrivalProcess,
) -> Vec<f64> {
    let mut acc = 0.0;
    unit_gaps(process, n, seed)
        .into_iter()
        .map(|g| {
            acc += g;
            schedule.time_for_count(acc)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table3() -> QpsSchedule {
        QpsSchedule::parse("0:100, 10:300, 20:500, 30:600, 40:800, 50:100").unwrap()
    }

    #[test]
    fn current_rate_follows_intervals() {
        let s = table3();
        assert_eq!(s.current_rate(15.0), 300.0);
        assert_eq!(s.current_rate(0.0), 100.0);
        assert_eq!(s.current_rate(9.999), 100.0);
        assert_eq!(s.current_rate(10.0), 300.0);
        assert_eq!(s.current_rate(45.0), 800.0);
        // last interval persists
        assert_eq!(s.current_rate(1e6), 100.0);
        let single = QpsSchedule::constant(200.0).unwrap();
        for t in [0.0, 3.3, 1e5] {
            assert_eq!(single.current_rate(t), 200.0);
        }
    }

    #[test]
    fn invalid_schedules() {
        assert_eq!(QpsSchedule::new(vec![]), Err(ScheduleError::Empty));
        assert_eq!(
            QpsSchedule::new(vec![(1.0, 5.0)]),
            Err(ScheduleError::FirstNotZero(1.0))
        );
        assert!(matches!(
            QpsSchedule::new(vec![(0.0, 5.0), (0.0, 6.0)]),
            Err(ScheduleError::NotIncreasing { .. })
        ));
        assert_eq!(
            QpsSchedule::new(vec![(0.0, 0.0)]),
            Err(ScheduleError::BadRate(0.0))
        );
        assert!(QpsSchedule::parse("0-100").is_err());
    }

    #[test]
    fn cumulative_and_inverse_agree() {
        let s = table3();
        assert!((s.cumulative(10.0) - 1000.0).abs() < 1e-9);
        assert!((s.cumulative(60.0) - 24000.0).abs() < 1e-9);
        for c in [0.5, 999.0, 1000.0, 4000.0, 23999.0, 30000.0] {
            let t = s.time_for_count(c);
            assert!((s.cumulative(t) - c).abs() < 1e-6, "{c}");
        }
    }

    #[test]
    fn planning_is_deterministic_and_sorted() {
        let s = table3();
        for p in [ArrivalProcess::Poisson, ArrivalProcess::Stratified] {
            let a = plan_send_offsets(&s, 5000, 9, p);
            let b = plan_send_offsets(&s, 5000, 9, p);
            assert_eq!(a, b);
            assert!(a.windows(2).all(|w| w[0] <= w[1]));
            assert_ne!(a, plan_send_offsets(&s, 5000, 10, p));
        }
    }

    #[test]
    fn mean_gap_matches_rate() {
        let s = QpsSchedule::constant(200.0).unwrap();
        for p in [ArrivalProcess::Poisson, ArrivalProcess::Stratified] {
            let offs = plan_send_offsets(&s, 200_000, 1, p);
            let mean_gap = offs.last().unwrap() / offs.len() as f64;
            assert!((mean_gap - 0.005).abs() / 0.005 < 0.01, "{p:?} {mean_gap}");
        }
    }

    #[test]
    fn stratified_gaps_keep_exponential_marginal() {
        let gaps = unit_gaps(ArrivalProcess::Stratified, 256_000, 3);
        // compare the empirical CDF at a few points with 1 - e^{-x}
        for x in [0.1, 0.5, 1.0, 2.0, 4.0] {
            let frac = gaps.iter().filter(|&&g| g <= x).count() as f64 / gaps.len() as f64;
            assert!(
                (frac - (1.0 - (-x).exp())).abs() < 0.005,
                "x={x}: {frac}"
            );
        }
    }

    #[test]
    fn stratified_counts_conform_per_interval() {
        let s = table3();
        let n = s.cumulative(60.0) as usize;
        let ivs = s.intervals();
        for seed in 0..20 {
            let offs = plan_send_offsets(&s, n, seed, ArrivalProcess::Stratified);
            let last_send = *offs.last().unwrap();
            for (i, iv) in ivs.iter().enumerate() {
                // the last interval never ends; the budget closes it
                let end = ivs.get(i + 1).map_or(last_send, |next| next.start_s);
                let count = offs
                    .iter()
                    .filter(|&&t| t >= iv.start_s && t <= end)
                    .count();
                let rate = count as f64 / (end - iv.start_s);
                assert!(
                    (rate - iv.qps).abs() / iv.qps < 0.025,
                    "seed {seed} interval {i}: {rate}"
                );
            }
        }
    }
}
