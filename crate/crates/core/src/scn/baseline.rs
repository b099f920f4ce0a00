use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use super::ScnError;
use crate::rng::seeded;

fn normalized(h: &[f64]) -> Result<Vec<f64>, ScnError> {
    if h.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(ScnError::Input("histogram has negative or non-finite mass".into()));
    }
    let total: f64 = h.iter().sum();
    if total <= 0.0 {
        return Err(ScnError::Input("histogram has no mass".into()));
    }
    Ok(h.iter().map(|v| v / total).collect())
}

/// `n` labels drawn independently from `histogram` (indexed by label).
pub fn random_predictions(histogram: &[f64], n: usize, seed: u64) -> Result<Vec<usize>, ScnError> {
    let p = normalized(histogram)?;
    let dist = WeightedIndex::new(&p).map_err(|e| ScnError::Input(e.to_string()))?;
    let mut rng = seeded(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

/// Expected accuracy in percent of guessing from `guess` on data distributed
/// as `truth`: `100 Σ_k p(k) q(k)`.
pub fn expected_random_accuracy(guess: &[f64], truth: &[f64]) -> Result<f64, ScnError> {
    let (p, q) = (normalized(guess)?, normalized(truth)?);
    Ok(100.0 * p.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>())
}
