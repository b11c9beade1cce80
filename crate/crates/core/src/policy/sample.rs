use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::router::TokenId;

/// How the next token is chosen from a logit row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, top_p: f64 },
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding::Sample {
            temperature: 1.0,
            top_p: 1.0,
        }
    }
}

impl Decoding {
    pub fn validate(&self) -> Result<()> {
        if let Decoding::Sample { temperature, top_p } = *self {
            if temperature.is_nan() || temperature <= 0.0 {
                return Err(Error::contract(format!("temperature must be > 0, got {temperature}")));
            }
            if !(top_p > 0.0 && top_p <= 1.0) {
                return Err(Error::contract(format!("top_p must be in (0, 1], got {top_p}")));
            }
        }
        Ok(())
    }

    pub fn choose<R: Rng + ?Sized>(&self, logits: &[f64], rng: &mut R) -> Result<TokenId> {
        match *self {
            Decoding::Greedy => Ok(argmax(logits)),
            Decoding::Sample { temperature, top_p } => sample_step(logits, temperature, top_p, rng),
        }
    }
}

/// First index of the maximum.
pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Temperature-scaled, nucleus-truncated distribution over the vocabulary.
pub fn sampling_distribution(logits: &[f64], temperature: f64, top_p: f64) -> Result<Vec<f64>> {
    Decoding::Sample { temperature, top_p }.validate()?;
    let mut p: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    kernels::softmax_in_place(&mut p);
    if top_p < 1.0 {
        let mut order: Vec<usize> = (0..p.len()).collect();
        // Stable: ties keep the lower id first.
        order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal));
        let mut cum = 0.0;
        let mut keep = 0;
        for &i in &order {
            cum += p[i];
            keep += 1;
            if cum >= top_p {
                break;
            }
        }
        if keep == 0 {
            return Err(Error::contract("empty nucleus"));
        }
        let mut out = vec![0.0; p.len()];
        let mass: f64 = order[..keep].iter().map(|&i| p[i]).sum();
        for &i in &order[..keep] {
            out[i] = p[i] / mass;
        }
        p = out;
    }
    Ok(p)
}

/// Draws one token id. With `temperature = 1` and `top_p = 1` this is a
/// draw from `softmax(logits)`.
pub fn sample_step<R: Rng + ?Sized>(logits: &[f64], temperature: f64, top_p: f64, rng: &mut R) -> Result<TokenId> {
    let p = sampling_distribution(logits, temperature, top_p)?;
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, pi) in p.iter().enumerate() {
        if *pi > 0.0 {
            last_nonzero = i;
        }
        cum += pi;
        if u < cum {
            return Ok(i as TokenId);
        }
    }
    Ok(last_nonzero as TokenId)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empirical_frequencies_match_softmax() {
        let logits = [0.5, -1.0, 1.25];
        // exp(0.5), exp(-1), exp(1.25) normalized.
        let e: Vec<f64> = logits.iter().map(|l: &f64| l.exp()).collect();
        let z: f64 = e.iter().sum();
        let exact: Vec<f64> = e.iter().map(|v| v / z).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_step(&logits, 1.0, 1.0, &mut rng).unwrap() as usize] += 1;
        }
        for i in 0..3 {
            let f = counts[i] as f64 / n as f64;
            assert!((f - exact[i]).abs() < 0.01, "{i}: {f} vs {}", exact[i]);
        }
    }

    #[test]
    fn dominant_logit_wins() {
        let mut logits = vec![0.0; 10];
        logits[4] = 100.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..1000)
            .filter(|_| sample_step(&logits, 1.0, 1.0, &mut rng).unwrap() == 4)
            .count();
        assert!(hits as f64 / 1000.0 > 0.99);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let logits = [0.1, 0.2, 0.3, -0.4];
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_step(&logits, 0.7, 0.9, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn nucleus_keeps_smallest_covering_prefix() {
        let logits = [2.0f64.ln(), 1.0f64.ln(), 1.0f64.ln()];
        // p = [0.5, 0.25, 0.25]; top_p 0.5 keeps only the first.
        let p = sampling_distribution(&logits, 1.0, 0.5).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = sampling_distribution(&logits, 1.0, 0.6).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12 && p[2] == 0.0);
    }

    #[test]
    fn bad_temperature_and_top_p_rejected() {
        assert!(sampling_distribution(&[0.0], 0.0, 1.0).is_err());
        assert!(sampling_distribution(&[0.0], 1.0, 0.0).is_err());
        assert!(sampling_distribution(&[0.0], 1.0, 1.5).is_err());
    }
}
