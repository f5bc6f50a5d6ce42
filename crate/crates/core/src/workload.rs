//! Synthetic service-time models and the busy-spin executor.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp, LogNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("unknown workload distribution `{0}` (expected fixed, exponential, lognormal or zipf-items)")]
    UnknownDistribution(String),
    #[error("mean_service_us must be positive, got {0}")]
    NonPositiveMean(f64),
    #[error("lognormal sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("zipf_exponent must be positive, got {0}")]
    BadZipfExponent(f64),
    #[error("item_count must be at least 1")]
    NoItems,
    #[error("service time must be positive")]
    ZeroServiceTime,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Fixed,
    Exponential,
    LogNormal { sigma: f64 },
    ZipfItems { item_count: u32, zipf_exponent: f64 },
}

impl Distribution {
    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Fixed => "fixed",
            Distribution::Exponential => "exponential",
            Distribution::LogNormal { .. } => "lognormal",
            Distribution::ZipfItems { .. } => "zipf-items",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub distribution: Distribution,
    pub mean_service_us: f64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn fixed(mean_service_us: f64) -> Self {
        WorkloadSpec {
            distribution: Distribution::Fixed,
            mean_service_us,
            seed: 0,
        }
    }

    /// Build a spec from its textual form. `param` looks up optional
    /// distribution parameters (`sigma`, `item_count`, `zipf_exponent`).
    pub fn from_name(
        name: &str,
        mean_service_us: f64,
        seed: u64,
        param: impl Fn(&str) -> Option<f64>,
    ) -> Result<Self, WorkloadError> {
        let distribution = match name {
            "fixed" => Distribution::Fixed,
            "exponential" => Distribution::Exponential,
            "lognormal" => Distribution::LogNormal {
                sigma: param("sigma").unwrap_or(1.0),
            },
            "zipf-items" => Distribution::ZipfItems {
                item_count: param("item_count").unwrap_or(1000.0) as u32,
                zipf_exponent: param("zipf_exponent").unwrap_or(1.0),
            },
            other => return Err(WorkloadError::UnknownDistribution(other.to_string())),
        };
        let spec = WorkloadSpec {
            distribution,
            mean_service_us,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.mean_service_us > 0.0 && self.mean_service_us.is_finite()) {
            return Err(WorkloadError::NonPositiveMean(self.mean_service_us));
        }
        match self.distribution {
            Distribution::LogNormal { sigma } if !(sigma > 0.0) => {
                Err(WorkloadError::BadSigma(sigma))
            }
            Distribution::ZipfItems { item_count: 0, .. } => Err(WorkloadError::NoItems),
            Distribution::ZipfItems { zipf_exponent, .. } if !(zipf_exponent > 0.0) => {
                Err(WorkloadError::BadZipfExponent(zipf_exponent))
            }
            _ => Ok(()),
        }
    }
}

/// Zipf item table: cumulative mass for sampling plus per-item service scale.
#[derive(Debug)]
struct ZipfTable {
    cdf: Vec<f64>,
    /// Service time of item i as a multiple of the mean: p_i / sum_j p_j^2,
    /// so that the expected multiple over the Zipf mass is exactly 1.
    scale: Vec<f64>,
}

impl ZipfTable {
    fn new(item_count: u32, exponent: f64) -> Self {
        let weights: Vec<f64> = (1..=item_count)
            .map(|i| (i as f64).powf(-exponent))
            .collect();
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let sum_sq: f64 = probs.iter().map(|p| p * p).sum();
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let scale = probs.iter().map(|p| p / sum_sq).collect();
        ZipfTable { cdf, scale }
    }

    /// 1-based item rank for a uniform draw.
    fn item(&self, u: f64) -> usize {
        let idx = self.cdf.partition_point(|&c| c < u);
        idx.min(self.cdf.len() - 1) + 1
    }
}

/// Deterministic service-time source: one per connection, owned by a single
/// execution context.
#[derive(Debug)]
pub struct ServiceSampler {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    zipf: Option<Arc<ZipfTable>>,
}

impl ServiceSampler {
    /// `stream` separates independent sequences that share one spec seed
    /// (the server uses the client id).
    pub fn new(spec: &WorkloadSpec, stream: u64) -> Result<Self, WorkloadError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let zipf = match spec.distribution {
            Distribution::ZipfItems {
                item_count,
                zipf_exponent,
            } => Some(Arc::new(ZipfTable::new(item_count, zipf_exponent))),
            _ => None,
        };
        Ok(ServiceSampler {
            spec: spec.clone(),
            rng,
            zipf,
        })
    }

    /// Draw the next item rank (zipf-items only; other models return 1).
    pub fn sample_item(&mut self) -> usize {
        match &self.zipf {
            Some(t) => t.item(self.rng.random::<f64>()),
            None => 1,
        }
    }

    pub fn sample_us(&mut self) -> f64 {
        let mean = self.spec.mean_service_us;
        match self.spec.distribution {
            Distribution::Fixed => mean,
            Distribution::Exponential => Exp::new(1.0 / mean).unwrap().sample(&mut self.rng),
            Distribution::LogNormal { sigma } => {
                let mu = mean.ln() - sigma * sigma / 2.0;
                LogNormal::new(mu, sigma).unwrap().sample(&mut self.rng)
            }
            Distribution::ZipfItems { .. } => {
                let table = self.zipf.clone().expect("zipf table");
                let item = table.item(self.rng.random::<f64>());
                mean * table.scale[item - 1]
            }
        }
    }

    /// Next service time; always at least one nanosecond.
    pub fn sample_service_time(&mut self) -> Duration {
        let ns = (self.sample_us() * 1_000.0).round().max(1.0);
        Duration::from_nanos(ns as u64)
    }
}

/// Calibrated busy-spin executor.
///
/// The worker stays runnable for the whole service time and checks the
/// monotonic clock between calibrated chunks of arithmetic. Between chunks
/// it yields, so co-located spinners and I/O threads interleave at a fine
/// grain instead of at scheduler-slice granularity.
#[derive(Debug, Clone, Copy)]
pub struct Spinner {
    iters_per_chunk: u64,
}

/// Target wall time of one spin chunk.
const CHUNK: Duration = Duration::from_micros(5);

impl Spinner {
    /// Measure how many spin iterations fit in one chunk on this machine.
    pub fn calibrate() -> Self {
        let mut best = u64::MAX;
        let probe = 20_000u64;
        for _ in 0..5 {
            let t = Instant::now();
            spin_iters(probe);
            let ns = t.elapsed().as_nanos().max(1) as u64;
            best = best.min(ns);
        }
        let per_chunk = (probe as u128 * CHUNK.as_nanos() / best as u128) as u64;
        Spinner {
            iters_per_chunk: per_chunk.max(1),
        }
    }

    pub fn iters_per_chunk(&self) -> u64 {
        self.iters_per_chunk
    }

    /// Occupy the calling thread for `service_time`.
    pub fn execute(&self, service_time: Duration) -> Result<(), WorkloadError> {
        if service_time.is_zero() {
            return Err(WorkloadError::ZeroServiceTime);
        }
        let deadline = Instant::now() + service_time;
        loop {
            spin_iters(self.iters_per_chunk);
            if Instant::now() >= deadline {
                return Ok(());
            }
            std::thread::yield_now();
        }
    }
}

#[inline(never)]
fn spin_iters(n: u64) {
    let mut x = 0x9e37_79b9_7f4a_7c15u64;
    for i in 0..n {
        x = x.rotate_left(5) ^ i.wrapping_mul(0x2545_f491_4f6c_dd1d);
    }
    std::hint::black_box(x);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_of(spec: &WorkloadSpec, n: usize) -> f64 {
        let mut s = ServiceSampler::new(spec, 0).unwrap();
        (0..n).map(|_| s.sample_us()).sum::<f64>() / n as f64
    }

    #[test]
    fn fixed_is_constant() {
        let mut s = ServiceSampler::new(&WorkloadSpec::fixed(500.0), 3).unwrap();
        for _ in 0..100 {
            assert_eq!(s.sample_service_time(), Duration::from_micros(500));
        }
    }

    #[test]
    fn unknown_name_rejected() {
        let err = WorkloadSpec::from_name("pareto", 10.0, 0, |_| None).unwrap_err();
        assert_eq!(err, WorkloadError::UnknownDistribution("pareto".into()));
        assert!(WorkloadSpec::from_name("fixed", 0.0, 0, |_| None).is_err());
        assert!(
            WorkloadSpec::from_name("zipf-items", 1.0, 0, |k| (k == "item_count").then_some(0.0))
                .is_err()
        );
        assert!(
            WorkloadSpec::from_name("zipf-items", 1.0, 0, |k| (k == "zipf_exponent")
                .then_some(-1.0))
            .is_err()
        );
    }

    #[test]
    fn means_converge_at_one_million_draws() {
        let specs = [
            WorkloadSpec::from_name("exponential", 1000.0, 7, |_| None).unwrap(),
            WorkloadSpec::from_name("lognormal", 250.0, 7, |_| Some(1.0)).unwrap(),
            WorkloadSpec::from_name("zipf-items", 400.0, 7, |k| match k {
                "item_count" => Some(100.0),
                _ => Some(1.0),
            })
            .unwrap(),
        ];
        for spec in &specs {
            let m = mean_of(spec, 1_000_000);
            let rel = (m - spec.mean_service_us).abs() / spec.mean_service_us;
            assert!(rel < 0.01, "{:?}: mean {m}", spec.distribution);
        }
    }

    #[test]
    fn zipf_item_frequencies_match_mass_function() {
        let spec = WorkloadSpec::from_name("zipf-items", 100.0, 11, |k| match k {
            "item_count" => Some(100.0),
            _ => Some(1.0),
        })
        .unwrap();
        let mut s = ServiceSampler::new(&spec, 0).unwrap();
        let n = 1_000_000;
        let mut counts = vec![0u64; 101];
        for _ in 0..n {
            counts[s.sample_item()] += 1;
        }
        // brute-force harmonic number H_100
        let h: f64 = (1..=100).map(|i| 1.0 / i as f64).sum();
        for (i, &c) in counts.iter().enumerate().take(11).skip(1) {
            let want = (1.0 / i as f64) / h;
            let got = c as f64 / n as f64;
            assert!(
                ((got - want) / want).abs() < 0.02,
                "item {i}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let spec = WorkloadSpec::from_name("lognormal", 100.0, 42, |_| Some(0.5)).unwrap();
        let mut a = ServiceSampler::new(&spec, 5).unwrap();
        let mut b = ServiceSampler::new(&spec, 5).unwrap();
        let mut c = ServiceSampler::new(&spec, 6).unwrap();
        let xa: Vec<_> = (0..1000).map(|_| a.sample_service_time()).collect();
        let xb: Vec<_> = (0..1000).map(|_| b.sample_service_time()).collect();
        let xc: Vec<_> = (0..1000).map(|_| c.sample_service_time()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn spin_duration_within_five_percent() {
        let spinner = Spinner::calibrate();
        for _ in 0..5 {
            let t = Instant::now();
            spinner.execute(Duration::from_millis(1)).unwrap();
            let took = t.elapsed().as_secs_f64();
            assert!((took - 1e-3).abs() / 1e-3 < 0.05, "took {took}");
        }
    }

    #[test]
    fn zero_service_rejected() {
        let spinner = Spinner::calibrate();
        assert_eq!(
            spinner.execute(Duration::ZERO),
            Err(WorkloadError::ZeroServiceTime)
        );
    }
}
