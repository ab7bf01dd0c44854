//! Summary statistics for repeated benchmark runs.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Mean with a two-sided 95% Student-t confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    /// Half-width of the interval; zero for fewer than two samples.
    pub ci95: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn of(xs: &[f64]) -> Estimate {
        let n = xs.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, ci95: f64::NAN, samples: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Estimate { mean, ci95: 0.0, samples: n };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        Estimate { mean, ci95: t * (var / n as f64).sqrt(), samples: n }
    }

    pub fn low(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn high(&self) -> f64 {
        self.mean + self.ci95
    }

    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.low() <= other.high() && other.low() <= self.high()
    }
}

impl std::fmt::Display for Estimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.ci95)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Nearest-rank percentile, `p` in [0, 100].
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_interval_for_five_runs() {
        // mean 3, sample sd sqrt(2.5), t(0.975, 4) = 2.776445
        let e = Estimate::of(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(e.mean, 3.0);
        let expected = 2.776_445 * (2.5f64 / 5.0).sqrt();
        assert!((e.ci95 - expected).abs() < 1e-5, "{}", e.ci95);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(Estimate::of(&[7.0]).ci95, 0.0);
        assert!(Estimate::of(&[]).mean.is_nan());
        assert_eq!(Estimate::of(&[2.0, 2.0, 2.0]).ci95, 0.0);
    }

    #[test]
    fn percentiles() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 50.0), 50.0);
        assert_eq!(percentile(&xs, 99.0), 99.0);
        assert_eq!(percentile(&xs, 0.0), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn interval_brackets_the_mean(xs in proptest::collection::vec(-1e6f64..1e6, 2..40)) {
            let e = Estimate::of(&xs);
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(e.ci95 >= 0.0);
            proptest::prop_assert!(e.mean >= lo - 1e-6 && e.mean <= hi + 1e-6);
            proptest::prop_assert!(e.overlaps(&e));
        }

        #[test]
        fn shift_moves_only_the_mean(xs in proptest::collection::vec(0f64..1e3, 2..20), k in -1e3f64..1e3) {
            let a = Estimate::of(&xs);
            let shifted: Vec<f64> = xs.iter().map(|x| x + k).collect();
            let b = Estimate::of(&shifted);
            proptest::prop_assert!((b.mean - a.mean - k).abs() < 1e-6);
            proptest::prop_assert!((b.ci95 - a.ci95).abs() < 1e-6);
        }

        #[test]
        fn percentile_is_a_sample(xs in proptest::collection::vec(-1e3f64..1e3, 1..50), p in 0f64..=100.0) {
            let v = percentile(&xs, p);
            proptest::prop_assert!(xs.contains(&v));
            proptest::prop_assert!(percentile(&xs, 100.0) >= v);
        }
    }
}
