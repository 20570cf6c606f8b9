use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::score::{GenerationScore, ScoreMode, Scorer, ThemeSpec};
use super::{apply_steering, LayerStrategy, Schedule, SteeringPlan};
use crate::error::{Error, Result};
use crate::tensors::{FeatureId, ModelBundle};
use crate::toymodel::{detokenize, tokenize, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepStrategy {
    Single,
    Cumulative,
}

/// Grid over layers × coefficients × strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub features: Vec<FeatureId>,
    pub layers: Vec<usize>,
    /// Values of `s`, or of `r` when `rescale` is set.
    pub coefficients: Vec<f64>,
    #[serde(default)]
    pub rescale: bool,
    pub strategies: Vec<SweepStrategy>,
    /// First layer of cumulative plans; defaults to the lowest feature layer.
    #[serde(default)]
    pub cumulative_start: Option<usize>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub fold: bool,
    pub prompt: String,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Generations per cell; generation `i` uses seed `sampler.seed + i`.
    pub n_generations: usize,
    pub theme: ThemeSpec,
    pub mode: ScoreMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub strategy: SweepStrategy,
    pub coefficient: f64,
    pub rescale: bool,
    /// Mean combined score over scored generations.
    pub mean_combined: Option<f64>,
    pub n_scored: usize,
    pub n_missing: usize,
    pub texts: Vec<String>,
    /// `None` marks a missing score.
    pub scores: Vec<Option<GenerationScore>>,
    /// Best layer for this (strategy, coefficient).
    pub best_layer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub baseline_texts: Vec<String>,
    pub baseline_scores: Vec<Option<GenerationScore>>,
    pub baseline_mean: Option<f64>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, layer: usize, strategy: SweepStrategy, coefficient: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.strategy == strategy && r.coefficient == coefficient)
    }

    /// Best mean combined score across layers for one strategy and coefficient.
    pub fn best(&self, strategy: SweepStrategy, coefficient: f64) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.strategy == strategy && r.coefficient == coefficient)
            .filter_map(|r| r.mean_combined)
            .reduce(f64::max)
    }

    /// One JSON record per row.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn mean_combined(scores: &[Option<GenerationScore>]) -> Option<f64> {
    let got: Vec<f64> = scores.iter().flatten().map(|s| s.combined).collect();
    (!got.is_empty()).then(|| got.iter().sum::<f64>() / got.len() as f64)
}

fn run_cell(
    bundle: &ModelBundle,
    plan: &SteeringPlan,
    spec: &SweepSpec,
    scorer: &dyn Scorer,
    fold_corpus: Option<&[Vec<u32>]>,
) -> Result<(Vec<String>, Vec<Option<GenerationScore>>)> {
    let prompt = tokenize(&spec.prompt);
    let mut texts = Vec::with_capacity(spec.n_generations);
    let mut scores = Vec::with_capacity(spec.n_generations);
    for i in 0..spec.n_generations {
        let sampler = SamplerConfig {
            seed: spec.sampler.seed.wrapping_add(i as u64),
            ..spec.sampler.clone()
        };
        let text = detokenize(&apply_steering(bundle, plan, &prompt, &sampler, fold_corpus)?);
        let score = match scorer.score(&text, &spec.theme, spec.mode) {
            Ok(s) => Some(s),
            Err(Error::Judge(msg)) => {
                tracing::warn!(%msg, "score missing");
                None
            }
            Err(e) => return Err(e),
        };
        texts.push(text);
        scores.push(score);
    }
    Ok((texts, scores))
}

pub fn steering_sweep(
    bundle: &ModelBundle,
    spec: &SweepSpec,
    scorer: &dyn Scorer,
    fold_corpus: Option<&[Vec<u32>]>,
) -> Result<SweepReport> {
    if spec.layers.is_empty() || spec.coefficients.is_empty() || spec.strategies.is_empty() {
        return Err(Error::invalid("a sweep needs at least one layer, coefficient and strategy"));
    }
    if spec.n_generations == 0 {
        return Err(Error::invalid("n_generations must be >= 1"));
    }
    let start = spec
        .cumulative_start
        .or_else(|| spec.features.iter().map(|f| f.layer).min())
        .unwrap_or(0);
    let mut cells = Vec::new();
    for &strategy in &spec.strategies {
        for &coefficient in &spec.coefficients {
            for &layer in &spec.layers {
                let ls = match strategy {
                    SweepStrategy::Single => LayerStrategy::Single { layer },
                    SweepStrategy::Cumulative => LayerStrategy::Cumulative {
                        start: start.min(layer),
                        end: layer,
                    },
                };
                let plan = SteeringPlan {
                    features: spec.features.clone(),
                    s: if spec.rescale { 0.0 } else { coefficient },
                    r: spec.rescale.then_some(coefficient),
                    schedule: spec.schedule,
                    strategy: ls,
                    fold: spec.fold,
                    all_tokens: true,
                };
                plan.validate(bundle)?;
                cells.push((layer, strategy, coefficient, plan));
            }
        }
    }
    let baseline_plan = SteeringPlan {
        features: Vec::new(),
        s: 0.0,
        r: None,
        schedule: Schedule::Constant,
        strategy: LayerStrategy::Single { layer: 0 },
        fold: false,
        all_tokens: true,
    };
    let (baseline_texts, baseline_scores) = run_cell(bundle, &baseline_plan, spec, scorer, None)?;
    let results: Vec<Result<SweepRow>> = cells
        .par_iter()
        .map(|(layer, strategy, coefficient, plan)| {
            let (texts, scores) = run_cell(bundle, plan, spec, scorer, fold_corpus)?;
            Ok(SweepRow {
                layer: *layer,
                strategy: *strategy,
                coefficient: *coefficient,
                rescale: spec.rescale,
                mean_combined: mean_combined(&scores),
                n_scored: scores.iter().filter(|s| s.is_some()).count(),
                n_missing: scores.iter().filter(|s| s.is_none()).count(),
                texts,
                scores,
                best_layer: false,
            })
        })
        .collect();
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    for &strategy in &spec.strategies {
        for &coefficient in &spec.coefficients {
            let best = rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.strategy == strategy && r.coefficient == coefficient)
                .filter_map(|(i, r)| r.mean_combined.map(|m| (i, m)))
                // first layer wins ties
                .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
                    Some((_, bm)) if bm >= m => acc,
                    _ => Some((i, m)),
                });
            if let Some((i, _)) = best {
                rows[i].best_layer = true;
            }
        }
    }
    Ok(SweepReport {
        baseline_mean: mean_combined(&baseline_scores),
        baseline_texts,
        baseline_scores,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steering::{score_generation, BuiltinScorer};
    use crate::toymodel::{synth_planted_bundle, PlantedConfig};

    fn setup() -> (ModelBundle, Vec<FeatureId>) {
        let (b, t) = synth_planted_bundle(&PlantedConfig::default()).unwrap();
        (b, t.theme.unwrap().features)
    }

    fn spec(features: Vec<FeatureId>) -> SweepSpec {
        SweepSpec {
            features,
            layers: vec![1],
            coefficients: vec![2.0],
            rescale: false,
            strategies: vec![SweepStrategy::Single],
            cumulative_start: None,
            schedule: Schedule::Constant,
            fold: false,
            prompt: "I think ".into(),
            sampler: SamplerConfig { seed: 9, ..Default::default() },
            n_generations: 1,
            theme: ThemeSpec::digits(),
            mode: ScoreMode::Activation,
        }
    }

    #[test]
    fn single_cell_equals_direct_scoring() {
        let (bundle, theme) = setup();
        let sp = spec(theme.clone());
        let rep = steering_sweep(&bundle, &sp, &BuiltinScorer, None).unwrap();
        assert_eq!(rep.rows.len(), 1);
        let plan = SteeringPlan {
            features: theme,
            s: 2.0,
            r: None,
            schedule: Schedule::Constant,
            strategy: LayerStrategy::Single { layer: 1 },
            fold: false,
            all_tokens: true,
        };
        let text = detokenize(&apply_steering(&bundle, &plan, &tokenize("I think "), &sp.sampler, None).unwrap());
        let direct = score_generation(&text, &sp.theme, sp.mode, &BuiltinScorer).unwrap();
        assert_eq!(rep.rows[0].scores[0], Some(direct));
        assert_eq!(rep.rows[0].mean_combined, Some(direct.combined));
        assert!(rep.rows[0].best_layer);
    }

    #[test]
    fn r_one_row_equals_baseline() {
        let (bundle, theme) = setup();
        let mut sp = spec(theme);
        sp.rescale = true;
        sp.coefficients = vec![0.0, 0.5, 1.0];
        sp.layers = vec![1, 2, 3];
        sp.strategies = vec![SweepStrategy::Single, SweepStrategy::Cumulative];
        sp.n_generations = 3;
        let rep = steering_sweep(&bundle, &sp, &BuiltinScorer, None).unwrap();
        assert_eq!(rep.rows.len(), 18);
        for r in rep.rows.iter().filter(|r| r.coefficient == 1.0) {
            assert_eq!(r.texts, rep.baseline_texts);
            assert_eq!(r.scores, rep.baseline_scores);
        }
    }

    #[test]
    fn deterministic_and_jsonl() {
        let (bundle, theme) = setup();
        let mut sp = spec(theme);
        sp.layers = vec![0, 1, 2];
        sp.strategies = vec![SweepStrategy::Single, SweepStrategy::Cumulative];
        sp.n_generations = 2;
        let a = steering_sweep(&bundle, &sp, &BuiltinScorer, None).unwrap();
        let b = steering_sweep(&bundle, &sp, &BuiltinScorer, None).unwrap();
        assert_eq!(a, b);
        let lines = a.to_jsonl().unwrap();
        assert_eq!(lines.lines().count(), 6);
        for l in lines.lines() {
            let _: SweepRow = serde_json::from_str(l).unwrap();
        }
        assert_eq!(a.rows.iter().filter(|r| r.best_layer).count(), 2);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let (bundle, theme) = setup();
        let mut sp = spec(theme);
        sp.layers.clear();
        assert!(steering_sweep(&bundle, &sp, &BuiltinScorer, None).is_err());
    }

    struct Down;
    impl Scorer for Down {
        fn score(&self, _: &str, _: &ThemeSpec, _: ScoreMode) -> Result<GenerationScore> {
            Err(Error::Judge("down".into()))
        }
    }

    #[test]
    fn missing_scores_are_not_zeros() {
        let (bundle, theme) = setup();
        let rep = steering_sweep(&bundle, &spec(theme), &Down, None).unwrap();
        assert_eq!(rep.rows[0].mean_combined, None);
        assert_eq!(rep.rows[0].n_missing, 1);
        assert_eq!(rep.rows[0].scores, vec![None]);
        assert!(!rep.rows[0].best_layer);
    }
}
