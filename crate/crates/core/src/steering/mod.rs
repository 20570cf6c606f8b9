//! Multi-layer steering of residual features.
//!
//! A [`SteeringPlan`] names residual features across layers and how strongly
//! to push each layer. Compiling it against a bundle yields a [`Steering`]
//! intervention that rewrites `Resid(l)` hooks on every token:
//!
//! * additive mode: `h ← h + Σ s'_l · v`
//! * rescale mode: `h ← h + (r − 1) Σ a · v`, with `a` encoded from `h` itself
//!
//! Per-layer coefficients `s'_l` come from a [`Schedule`].

mod judge;
mod score;
mod sweep;

pub use judge::{
    activation_input, deactivation_input, JudgeClient, JudgeConfig, ACTIVATION_SYSTEM_PROMPT,
    DEACTIVATION_SUBJECTS, DEACTIVATION_SYSTEM_PROMPT,
};
pub use score::{score_generation, BuiltinScorer, GenerationScore, ScoreMode, Scorer, ThemeSpec};
pub use sweep::{steering_sweep, SweepReport, SweepRow, SweepSpec, SweepStrategy};

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgraph::FlowGraph;
use crate::matching::{typical_activation, FoldStatistic};
use crate::tensors::{FeatureDictionary, FeatureId, ModelBundle, Site, SitePosition};
use crate::toymodel::{generate, sae_encode_batch, sample_activations, Hook, Intervention, SamplerConfig};

pub const DEFAULT_ALPHA: f64 = -0.05;
pub const DEFAULT_S_STAR: f64 = 1.0;

/// Rule distributing one coefficient `s` over layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// `s · e^{α l}`
    Exponential { alpha: f64 },
    /// Straight line through `(l_start, s)` and `(l_end, s_star)`.
    Linear { s_star: f64, l_start: usize, l_end: usize },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Constant
    }
}

impl Schedule {
    pub fn exponential() -> Self {
        Schedule::Exponential { alpha: DEFAULT_ALPHA }
    }

    pub fn linear(l_start: usize, l_end: usize) -> Self {
        Schedule::Linear {
            s_star: DEFAULT_S_STAR,
            l_start,
            l_end,
        }
    }

    /// Linear schedule spanning a flow graph.
    pub fn linear_over(graph: &FlowGraph, s_star: f64) -> Self {
        Schedule::Linear {
            s_star,
            l_start: graph.span[0],
            l_end: graph.span[1],
        }
    }

    pub fn coefficient(&self, s: f64, layer: usize) -> Result<f64> {
        let l = layer as f64;
        let v = match *self {
            Schedule::Constant => s,
            Schedule::Exponential { alpha } => s * (alpha * l).exp(),
            Schedule::Linear { s_star, l_start, l_end } => {
                if l_end == l_start {
                    return Err(Error::invalid("linear schedule needs l_end != l_start"));
                }
                let k = (s_star - s) / (l_end as f64 - l_start as f64);
                let b = s - k * l_start as f64;
                k * l + b
            }
        };
        if !v.is_finite() {
            return Err(Error::invalid(format!("non-finite coefficient at layer {layer}")));
        }
        Ok(v)
    }
}

pub fn schedule_coefficients(schedule: &Schedule, s: f64, layers: &[usize]) -> Result<Vec<f64>> {
    layers.iter().map(|&l| schedule.coefficient(s, l)).collect()
}

/// Which layers of the plan are steered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerStrategy {
    Single { layer: usize },
    Cumulative { start: usize, end: usize },
}

impl LayerStrategy {
    pub fn layers(&self) -> RangeInclusive<usize> {
        match *self {
            LayerStrategy::Single { layer } => layer..=layer,
            LayerStrategy::Cumulative { start, end } => start..=end,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    /// Residual features; only those inside the strategy's layers are steered.
    pub features: Vec<FeatureId>,
    #[serde(default)]
    pub s: f64,
    /// Rescale mode when set; `s` and the schedule are then ignored.
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub schedule: Schedule,
    pub strategy: LayerStrategy,
    /// Pre-scale each direction by its mean nonzero activation.
    #[serde(default)]
    pub fold: bool,
    #[serde(default = "yes")]
    pub all_tokens: bool,
}

impl SteeringPlan {
    /// Additive plan over every residual node of a flow graph.
    pub fn from_graph(graph: &FlowGraph, s: f64, schedule: Schedule, strategy: LayerStrategy) -> Self {
        Self {
            features: graph.spine().iter().map(|n| n.feature()).collect(),
            s,
            r: None,
            schedule,
            strategy,
            fold: false,
            all_tokens: true,
        }
    }

    pub fn validate(&self, bundle: &ModelBundle) -> Result<()> {
        if !self.all_tokens {
            return Err(Error::invalid("steering always applies to all tokens"));
        }
        if !self.s.is_finite() {
            return Err(Error::invalid("steering coefficient s must be finite"));
        }
        if let Some(r) = self.r {
            if !r.is_finite() {
                return Err(Error::invalid("rescale factor r must be finite"));
            }
        }
        let range = self.strategy.layers();
        if range.is_empty() {
            return Err(Error::invalid("strategy layer range is empty"));
        }
        if *range.end() >= bundle.layer_count {
            return Err(Error::OutOfRange {
                what: "steering layer",
                index: *range.end(),
                limit: bundle.layer_count,
            });
        }
        for f in &self.features {
            if f.site != Site::Res {
                return Err(Error::invalid(format!("{f}: only residual features can be steered")));
            }
            let dict = bundle.dictionary(f.position())?;
            if f.index >= dict.n_features() {
                return Err(Error::OutOfRange {
                    what: "feature index",
                    index: f.index,
                    limit: dict.n_features(),
                });
            }
        }
        Ok(())
    }

    /// Features this plan actually touches, grouped by layer.
    pub fn steered(&self) -> BTreeMap<usize, Vec<usize>> {
        let range = self.strategy.layers();
        let mut by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for f in self.features.iter().filter(|f| range.contains(&f.layer)) {
            let v = by_layer.entry(f.layer).or_default();
            if !v.contains(&f.index) {
                v.push(f.index);
            }
        }
        by_layer
    }

    pub fn is_identity(&self) -> bool {
        match self.r {
            Some(r) => r == 1.0,
            None => self.s == 0.0,
        }
    }
}

#[derive(Debug, Clone)]
enum LayerEdit<'a> {
    Add(Array1<f32>),
    Rescale {
        dict: &'a FeatureDictionary,
        features: Vec<usize>,
        /// `d × f`
        directions: Array2<f32>,
        r: f32,
    },
}

/// A compiled plan; implements [`Intervention`] at `Resid` hooks.
#[derive(Debug, Clone)]
pub struct Steering<'a> {
    edits: BTreeMap<usize, LayerEdit<'a>>,
}

/// Mean nonzero activation of each feature over `corpus` (BOS skipped).
pub fn fold_scales(bundle: &ModelBundle, features: &[FeatureId], corpus: &[Vec<u32>]) -> Result<BTreeMap<FeatureId, f64>> {
    if corpus.is_empty() {
        return Err(Error::invalid("folding needs a non-empty corpus"));
    }
    let acts = sample_activations(bundle, bundle.model()?, corpus, true)?;
    let mut out = BTreeMap::new();
    for f in features {
        let m = acts
            .get(f.position())
            .ok_or(Error::MissingDictionary(f.position()))?;
        let col = m.column(f.index);
        let typical = typical_activation(col.insert_axis(ndarray::Axis(1)), FoldStatistic::Mean)[0];
        out.insert(*f, f64::from(typical));
    }
    Ok(out)
}

impl<'a> Steering<'a> {
    /// `fold_corpus` is required when the plan folds.
    pub fn compile(bundle: &'a ModelBundle, plan: &SteeringPlan, fold_corpus: Option<&[Vec<u32>]>) -> Result<Self> {
        plan.validate(bundle)?;
        let mut edits = BTreeMap::new();
        if plan.is_identity() {
            return Ok(Self { edits });
        }
        let steered = plan.steered();
        let scales = if plan.fold && plan.r.is_none() {
            let corpus = fold_corpus.ok_or_else(|| Error::invalid("plan folds but no corpus was given"))?;
            let feats: Vec<FeatureId> = steered
                .iter()
                .flat_map(|(&l, idx)| idx.iter().map(move |&i| FeatureId::new(SitePosition::res(l), i)))
                .collect();
            Some(fold_scales(bundle, &feats, corpus)?)
        } else {
            None
        };
        for (layer, idx) in steered {
            let dict = bundle.dictionary(SitePosition::res(layer))?;
            match plan.r {
                Some(r) => {
                    let mut directions = Array2::zeros((dict.dim(), idx.len()));
                    for (c, &i) in idx.iter().enumerate() {
                        directions.column_mut(c).assign(&dict.decoder().column(i));
                    }
                    edits.insert(
                        layer,
                        LayerEdit::Rescale {
                            dict,
                            features: idx,
                            directions,
                            r: r as f32,
                        },
                    );
                }
                None => {
                    let coef = plan.schedule.coefficient(plan.s, layer)?;
                    if coef == 0.0 {
                        continue;
                    }
                    let mut delta = vec![0.0f64; dict.dim()];
                    for &i in &idx {
                        let fold = scales
                            .as_ref()
                            .map_or(1.0, |s| s[&FeatureId::new(SitePosition::res(layer), i)]);
                        for (x, &v) in delta.iter_mut().zip(dict.decoder().column(i)) {
                            *x += coef * fold * f64::from(v);
                        }
                    }
                    edits.insert(layer, LayerEdit::Add(delta.into_iter().map(|x| x as f32).collect()));
                }
            }
        }
        Ok(Self { edits })
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    /// Layers with a non-trivial edit.
    pub fn layers(&self) -> Vec<usize> {
        self.edits.keys().copied().collect()
    }
}

impl Intervention for Steering<'_> {
    fn hooks(&self) -> Vec<Hook> {
        self.edits.keys().map(|&l| Hook::Resid(l)).collect()
    }

    fn apply(&self, hook: Hook, hidden: &mut Array2<f32>) {
        let Hook::Resid(l) = hook else { return };
        let Some(edit) = self.edits.get(&l) else { return };
        match edit {
            LayerEdit::Add(delta) => {
                for mut row in hidden.rows_mut() {
                    row += delta;
                }
            }
            LayerEdit::Rescale {
                dict,
                features,
                directions,
                r,
            } => {
                let z = sae_encode_batch(dict, hidden.view()).expect("dictionary width matches the model");
                let gain = r - 1.0;
                for (t, mut row) in hidden.rows_mut().into_iter().enumerate() {
                    for (c, &i) in features.iter().enumerate() {
                        let a = z[[t, i]];
                        if a != 0.0 {
                            row.scaled_add(gain * a, &directions.column(c));
                        }
                    }
                }
            }
        }
    }
}

/// Generate a continuation of `prompt` under `plan`. Returns the new tokens.
pub fn apply_steering(
    bundle: &ModelBundle,
    plan: &SteeringPlan,
    prompt: &[u32],
    sampler: &SamplerConfig,
    fold_corpus: Option<&[Vec<u32>]>,
) -> Result<Vec<u32>> {
    let steering = Steering::compile(bundle, plan, fold_corpus)?;
    let model = bundle.model()?;
    if steering.is_empty() {
        return generate(model, prompt, sampler, &[]);
    }
    generate(model, prompt, sampler, &[&steering])
}
