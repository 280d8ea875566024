//! Nominal behaviour of the detection suite on Kalman innovations of the
//! maritime scenario. Rates for the Mardia and portmanteau tests are compared
//! with frozen Monte Carlo values of the same statistics on i.i.d. N(0, I₂)
//! data (20 000 replications), since their asymptotic references are not
//! exact at these lengths.

use std::sync::OnceLock;

use innoguard::scenario::{run_experiment, AttackWindow, ExperimentResult, ScenarioConfig};
use innoguard::sds::SdsReport;

const SEEDS: u64 = 1000;
const ALPHA: f64 = 0.05;
/// 1% Kolmogorov–Smirnov critical value at 1000 samples.
const KS_CRIT: f64 = 0.05148;

// (length, Mardia rate, portmanteau rate) on i.i.d. data
const ORACLE_RATES: [(usize, f64, f64); 2] = [(31, 0.01235, 0.17485), (301, 0.0440, 0.0751)];

fn nominal() -> &'static ExperimentResult {
    static RES: OnceLock<ExperimentResult> = OnceLock::new();
    RES.get_or_init(|| {
        let mut cfg = ScenarioConfig::default().with_seeds(0..SEEDS);
        cfg.window = AttackWindow { start: 100, len: 31 };
        run_experiment(&cfg).unwrap()
    })
}

fn reports(full: bool) -> Vec<&'static SdsReport> {
    nominal().outcomes.iter().map(|o| if full { &o.full } else { &o.window }).collect()
}

fn rate(reports: &[&SdsReport], test: usize) -> f64 {
    reports.iter().filter(|r| r.p_values()[test] < ALPHA).count() as f64 / reports.len() as f64
}

fn ks_uniform(mut p: Vec<f64>) -> f64 {
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    p.iter()
        .enumerate()
        .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
        .fold(0.0, f64::max)
}

fn binomial_band(p: f64) -> f64 {
    // 4 standard errors at 1000 seeds
    4.0 * (p * (1.0 - p) / SEEDS as f64).sqrt()
}

#[test]
fn bias_and_nis_calibrated() {
    for full in [false, true] {
        let r = reports(full);
        for test in [0, 1] {
            let rate = rate(&r, test);
            assert!((0.03..=0.07).contains(&rate), "test {test} full={full}: rate {rate}");
            let ks = ks_uniform(r.iter().map(|x| x.p_values()[test]).collect());
            assert!(ks < KS_CRIT, "test {test} full={full}: KS {ks}");
        }
    }
}

#[test]
fn nominal_nis_mean() {
    let r = reports(false);
    let mean = r.iter().map(|x| x.nis.q_nis).sum::<f64>() / r.len() as f64;
    // sd of a χ²₆₂ draw is √124, so 4 standard errors ≈ 1.41
    assert!((mean - 62.0).abs() < 4.0 * (124.0f64 / SEEDS as f64).sqrt(), "mean NIS {mean}");
}

#[test]
fn mardia_and_portmanteau_match_iid_oracle() {
    for (len, mardia, port) in ORACLE_RATES {
        let r = reports(len == 301);
        let (m, w) = (rate(&r, 2), rate(&r, 3));
        assert!((m - mardia).abs() <= binomial_band(mardia), "len {len}: Mardia rate {m} vs {mardia}");
        assert!((w - port).abs() <= binomial_band(port), "len {len}: portmanteau rate {w} vs {port}");
    }
}

#[test]
fn full_horizon_p_values_uniform() {
    let r = reports(true);
    for (test, relax) in [(0, 1.0), (1, 1.0), (2, 1.5), (3, 1.5)] {
        let ks = ks_uniform(r.iter().map(|x| x.p_values()[test]).collect());
        assert!(ks < relax * KS_CRIT, "test {test}: KS {ks}");
    }
}

#[test]
fn reports_are_consistent() {
    for r in reports(true).into_iter().chain(reports(false)) {
        for p in r.p_values() {
            assert!((0.0..=1.0).contains(&p));
        }
        assert_eq!(r.reject.nis, r.nis.p_nis < r.alpha);
        assert_eq!(r.reject.whiteness, r.whiteness.p_white < r.alpha);
        assert_eq!(r.reject.fused, r.fused.p_fused < r.alpha);
    }
}
