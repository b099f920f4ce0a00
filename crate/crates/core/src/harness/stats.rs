use serde::{Deserialize, Serialize};

/// Spread of one metric over seeds. Variance and standard deviation both use
/// the `n - 1` denominator and are `None` below two values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n: usize,
    pub median: Option<f64>,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub std_dev: Option<f64>,
}

impl SeedSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                n,
                median: None,
                mean: None,
                variance: None,
                std_dev: None,
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean = values.iter().sum::<f64>() / n as f64;
        let variance = (n > 1).then(|| values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64);
        Self {
            n,
            median: Some(median),
            mean: Some(mean),
            variance,
            std_dev: variance.map(f64::sqrt),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_seeds() {
        let s = SeedSummary::of(&[3.0, 1.0, 2.0]);
        assert_eq!(s.median, Some(2.0));
        assert_eq!(s.mean, Some(2.0));
        assert_eq!(s.variance, Some(1.0));
        assert_eq!(s.std_dev, Some(1.0));
    }

    #[test]
    fn even_count_and_degenerate() {
        assert_eq!(SeedSummary::of(&[4.0, 1.0, 2.0, 3.0]).median, Some(2.5));
        let one = SeedSummary::of(&[5.0]);
        assert_eq!((one.median, one.variance), (Some(5.0), None));
        assert_eq!(SeedSummary::of(&[]).median, None);
    }
}
