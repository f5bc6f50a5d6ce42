use proptest::prelude::*;
use serde_json::Value;
use tailbench::stats::{
    confidence_interval, percentile, quartiles, tdist, welch_t, LatencySummary,
};

fn oracle() -> Value {
    serde_json::from_str(include_str!("data/welch_oracle.json")).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

/// Brute force: the smallest value with at least ceil(q n) values <= it.
fn brute_percentile(v: &[u64], q: f64) -> u64 {
    let n = v.len();
    let mut candidates = v.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    for c in candidates {
        let at_most = v.iter().filter(|&&x| x <= c).count();
        // at_most / n >= q, compared in integers where q is a whole percent
        if (at_most as f64) >= q * n as f64 - 1e-9 {
            return c;
        }
    }
    unreachable!()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn percentile_matches_brute_force(
        v in prop::collection::vec(0u64..10_000, 1..400),
        pct in 1u32..=100,
    ) {
        let q = pct as f64 / 100.0;
        prop_assert_eq!(percentile(&v, q).unwrap(), brute_percentile(&v, q));
    }

    #[test]
    fn summary_is_ordered(v in prop::collection::vec(1u64..1_000_000_000, 1..300)) {
        let s = LatencySummary::from_ns(&v).unwrap();
        prop_assert!(s.is_consistent());
        prop_assert_eq!(s.n, v.len());
    }

    #[test]
    fn welch_is_antisymmetric_and_scale_free(
        x in prop::collection::vec(-100.0f64..100.0, 2..15),
        y in prop::collection::vec(-100.0f64..100.0, 2..15),
        scale in 0.01f64..100.0,
        shift in -50.0f64..50.0,
    ) {
        let Ok(a) = welch_t(&x, &y) else { return Ok(()) };
        let b = welch_t(&y, &x).unwrap();
        prop_assert!((a.t_statistic + b.t_statistic).abs() <= 1e-9 * a.t_statistic.abs().max(1.0));
        prop_assert!((a.p_value - b.p_value).abs() < 1e-12);
        let xs: Vec<f64> = x.iter().map(|v| v * scale + shift).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * scale + shift).collect();
        let c = welch_t(&xs, &ys).unwrap();
        prop_assert!((a.t_statistic - c.t_statistic).abs() <= 1e-6 * a.t_statistic.abs().max(1.0));
        prop_assert!((a.degrees_of_freedom - c.degrees_of_freedom).abs() <= 1e-6 * a.degrees_of_freedom);
        prop_assert!((0.0..=1.0).contains(&a.p_value));
    }
}

#[test]
fn welch_example_matches_oracle() {
    let o = oracle();
    let ex = &o["example"];
    let r = welch_t(&floats(&ex["x"]), &floats(&ex["y"])).unwrap();
    assert!((r.t_statistic - ex["t"].as_f64().unwrap()).abs() < 1e-12);
    assert!((r.degrees_of_freedom - ex["dof"].as_f64().unwrap()).abs() < 1e-12);
    assert!((r.p_value - ex["p"].as_f64().unwrap()).abs() < 1e-6);
    assert!(!r.reject_at_0_05);
}

#[test]
fn welch_random_pairs_match_oracle() {
    let o = oracle();
    let cases = o["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 100);
    for (i, c) in cases.iter().enumerate() {
        let r = welch_t(&floats(&c["x"]), &floats(&c["y"])).unwrap();
        let t = c["t"].as_f64().unwrap();
        let dof = c["dof"].as_f64().unwrap();
        let p = c["p"].as_f64().unwrap();
        assert!((r.t_statistic - t).abs() <= 1e-9 * t.abs().max(1.0), "case {i} t");
        assert!((r.degrees_of_freedom - dof).abs() <= 1e-9 * dof, "case {i} dof");
        assert!((r.p_value - p).abs() < 1e-9, "case {i}: p {} vs {p}", r.p_value);
    }
}

#[test]
fn t_quantiles_match_oracle() {
    for q in oracle()["quantiles"].as_array().unwrap() {
        let df = q["df"].as_f64().unwrap();
        let p = q["p"].as_f64().unwrap();
        let t = q["t"].as_f64().unwrap();
        assert!((tdist::quantile(p, df) - t).abs() < 1e-9, "df {df}");
    }
}

#[test]
fn confidence_interval_uses_student_t() {
    let v = [10.0, 12.0, 11.0, 13.0, 9.0];
    let (lo, hi) = confidence_interval(&v, 0.95).unwrap();
    // mean 11, s = sqrt(2.5), t(0.975, 4) from the oracle file
    let half = 2.7764451051977943 * 2.5f64.sqrt() / 5f64.sqrt();
    assert!((lo - (11.0 - half)).abs() < 1e-9);
    assert!((hi - (11.0 + half)).abs() < 1e-9);
    assert!(confidence_interval(&[1.0], 0.95).is_err());
}

#[test]
fn quartiles_need_five_values() {
    assert!(quartiles(&[1.0, 2.0, 3.0, 4.0]).is_err());
    let q = quartiles(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
    assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 2.0, 3.0, 4.0, 5.0));
}
