use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Intervention, ToyTransformer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
    /// Argmax decoding; the sampling parameters are ignored.
    #[serde(default)]
    pub greedy: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_p: 0.7,
            temperature: 1.27,
            max_len: 36,
            seed: 0,
            greedy: false,
        }
    }
}

fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Nucleus sampling over one logit vector.
pub fn sample_next(logits: &[f32], cfg: &SamplerConfig, rng: &mut impl Rng) -> u32 {
    if cfg.greedy || cfg.temperature <= 0.0 {
        return argmax(logits);
    }
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| (i, ((x as f64 - max) / cfg.temperature).exp()))
        .collect();
    let total: f64 = probs.iter().map(|p| p.1).sum();
    for p in &mut probs {
        p.1 /= total;
    }
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = 0;
    let mut cum = 0.0;
    for p in &probs {
        cum += p.1;
        kept += 1;
        if cum >= cfg.top_p {
            break;
        }
    }
    let nucleus = &probs[..kept];
    let mass: f64 = nucleus.iter().map(|p| p.1).sum();
    let mut u = rng.gen::<f64>() * mass;
    for &(i, p) in nucleus {
        if u < p {
            return i as u32;
        }
        u -= p;
    }
    nucleus[kept - 1].0 as u32
}

/// Autoregressive generation; interventions are applied at every step.
/// Returns only the generated continuation.
pub fn generate(
    model: &ToyTransformer,
    prompt: &[u32],
    cfg: &SamplerConfig,
    interventions: &[&dyn Intervention],
) -> Result<Vec<u32>> {
    if cfg.max_len == 0 {
        return Err(Error::invalid("max_len must be >= 1"));
    }
    if !(cfg.top_p > 0.0 && cfg.top_p <= 1.0) {
        return Err(Error::invalid(format!("top_p must lie in (0, 1], got {}", cfg.top_p)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = prompt.to_vec();
    let limit = model.config().max_positions;
    let mut out = Vec::with_capacity(cfg.max_len);
    for _ in 0..cfg.max_len {
        if tokens.len() >= limit {
            break;
        }
        let rec = model.forward(&tokens, interventions)?;
        let last = rec.logits.row(tokens.len() - 1);
        let next = sample_next(last.as_slice().expect("logits are contiguous"), cfg, &mut rng);
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{tokenize, ToyConfig};

    #[test]
    fn greedy_is_argmax_and_seed_free() {
        let m = ToyTransformer::random(ToyConfig { seed: 2, ..Default::default() }).unwrap();
        let prompt = tokenize("I think ");
        let a = generate(&m, &prompt, &SamplerConfig { greedy: true, seed: 1, max_len: 8, ..Default::default() }, &[]).unwrap();
        let b = generate(&m, &prompt, &SamplerConfig { greedy: true, seed: 99, max_len: 8, ..Default::default() }, &[]).unwrap();
        assert_eq!(a, b);
        let rec = m.forward(&prompt, &[]).unwrap();
        assert_eq!(a[0], argmax(rec.logits.row(prompt.len() - 1).as_slice().unwrap()));
    }

    #[test]
    fn zero_max_len_rejected() {
        let m = ToyTransformer::random(ToyConfig::default()).unwrap();
        let cfg = SamplerConfig { max_len: 0, ..Default::default() };
        assert!(generate(&m, &[1], &cfg, &[]).is_err());
    }

    #[test]
    fn plain_categorical_matches_softmax() {
        let logits = [0.5f32, -0.3, 1.2, 0.0, -1.0];
        let cfg = SamplerConfig { top_p: 1.0, temperature: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sample_next(&logits, &cfg, &mut rng) as usize] += 1;
        }
        let z: f64 = logits.iter().map(|&x| (x as f64).exp()).sum();
        for (i, &c) in counts.iter().enumerate() {
            let p = (logits[i] as f64).exp() / z;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "token {i}: {c} vs {}", n as f64 * p);
        }
    }

    #[test]
    fn nucleus_excludes_tail() {
        // probabilities ≈ (0.64, 0.24, 0.09, 0.03); top_p = 0.7 keeps two tokens
        let logits = [2.0f32, 1.0, 0.0, -1.0];
        let cfg = SamplerConfig { top_p: 0.7, temperature: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            assert!(sample_next(&logits, &cfg, &mut rng) < 2);
        }
    }

    #[test]
    fn same_seed_same_output() {
        let m = ToyTransformer::random(ToyConfig { seed: 4, ..Default::default() }).unwrap();
        let cfg = SamplerConfig { seed: 5, max_len: 10, ..Default::default() };
        let p = tokenize("abc");
        assert_eq!(generate(&m, &p, &cfg, &[]).unwrap(), generate(&m, &p, &cfg, &[]).unwrap());
    }
}
