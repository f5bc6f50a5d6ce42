//! Process-wide monotonic nanosecond clock.
//!
//! All timestamps recorded by the harness are nanoseconds since a lazily
//! initialised process epoch. Values are only compared within one process.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

static EPOCH: OnceLock<Instant> = OnceLock::new();

fn epoch() -> Instant {
    *EPOCH.get_or_init(Instant::now)
}

/// Nanoseconds elapsed since the process epoch.
pub fn now_ns() -> u64 {
    epoch().elapsed().as_nanos() as u64
}

/// The `Instant` corresponding to a `now_ns`-style timestamp.
pub fn instant_at(ns: u64) -> Instant {
    epoch() + Duration::from_nanos(ns)
}

/// Sleep until the clock reads at least `ns`. Returns immediately if the
/// deadline has already passed.
pub fn sleep_until(ns: u64) {
    let deadline = instant_at(ns);
    let now = Instant::now();
    if deadline > now {
        std::thread::sleep(deadline - now);
    }
}

pub fn secs_to_ns(s: f64) -> u64 {
    (s * 1e9).round().max(0.0) as u64
}
