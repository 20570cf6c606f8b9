//! The boundary scripts and the explorer UI talk to.
//!
//! Every operation exposed over HTTP is a plain function here taking a
//! request struct and returning the artifact bytes or a response struct. The
//! CLI calls the same functions, which is what makes CLI and HTTP output
//! byte-identical for the same config and seed.

pub mod cli;
pub mod http;
pub mod runs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgraph::{build_flow_graph, export_graph, ExportFormat, GraphThresholds};
use crate::intervention::{
    eligible_targets, run_deactivation, summarize, Baseline, DeactivationRecord, LayerMatchers,
    Strategy, StrategySummary,
};
use crate::matching::{best_match, site_scores, SiteMatch, SiteScores};
use crate::steering::{apply_steering, GenerationScore, ScoreMode, Scorer, SteeringPlan, ThemeSpec};
use crate::tensors::{FeatureId, ModelBundle, Site, SitePosition};
use crate::toymodel::{detokenize, generate, tokenize, SamplerConfig};

pub use runs::{RunError, RunKind, RunRecord, RunRegistry, RunStatus};

pub const DEFAULT_PORT: u16 = 7431;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionarySummary {
    pub position: SitePosition,
    pub d: usize,
    pub n_features: usize,
    pub activation_kind: String,
    pub k: Option<usize>,
    pub degenerate: usize,
    pub match_compatible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub name: String,
    pub seed: Option<u64>,
    pub provenance: String,
    pub model_dim: usize,
    pub layer_count: usize,
    pub has_model: bool,
    pub dictionaries: Vec<DictionarySummary>,
}

pub fn bundle_summary(bundle: &ModelBundle) -> BundleSummary {
    BundleSummary {
        name: bundle.name.clone(),
        seed: bundle.seed,
        provenance: bundle.provenance.clone(),
        model_dim: bundle.model_dim,
        layer_count: bundle.layer_count,
        has_model: bundle.model.is_some(),
        dictionaries: bundle
            .dictionaries
            .values()
            .map(|d| DictionarySummary {
                position: d.position(),
                d: d.dim(),
                n_features: d.n_features(),
                activation_kind: d.activation().name().to_owned(),
                k: d.activation().k(),
                degenerate: d.degenerate_count(),
                match_compatible: bundle.is_match_compatible(d.position()),
            })
            .collect(),
    }
}

/// Scores shown when hovering a node: predecessor scores for residual
/// features, the closest same-layer residual feature for module features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScores {
    pub feature: FeatureId,
    pub interpretation: Option<String>,
    pub predecessors: Option<SiteScores>,
    pub residual_match: Option<SiteMatch>,
}

pub fn feature_scores(bundle: &ModelBundle, feature: FeatureId) -> Result<FeatureScores> {
    let dict = bundle.dictionary(feature.position())?;
    if feature.index >= dict.n_features() {
        return Err(Error::OutOfRange {
            what: "feature index",
            index: feature.index,
            limit: dict.n_features(),
        });
    }
    let (predecessors, residual_match) = match feature.site {
        Site::Res if feature.layer > 0 => (Some(site_scores(feature.index, feature.layer, bundle)?), None),
        Site::Res => (None, None),
        _ => {
            let res = SitePosition::res(feature.layer);
            let m = match bundle.get(res) {
                Some(rd) if bundle.is_match_compatible(feature.position()) => best_match(&dict.unit_column(feature.index), rd)?
                    .map(|(index, score)| SiteMatch { position: res, index, score }),
                _ => None,
            };
            (None, m)
        }
    };
    Ok(FeatureScores {
        feature,
        interpretation: bundle.annotation(&feature).map(str::to_owned),
        predecessors,
        residual_match,
    })
}

fn default_t_res() -> f64 {
    GraphThresholds::default().t_res
}

fn default_t_module() -> f64 {
    GraphThresholds::default().t_module
}

fn default_format() -> ExportFormat {
    ExportFormat::Json
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowRequest {
    /// `layer:site:index`, e.g. `3:res:14`.
    pub seed_feature: String,
    #[serde(default = "default_t_res")]
    pub t_res: f64,
    #[serde(default = "default_t_module")]
    pub t_module: f64,
    #[serde(default = "default_format")]
    pub format: ExportFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

/// The exported graph document, exactly as written to disk.
pub fn flow_artifact(bundle: &ModelBundle, req: &FlowRequest) -> Result<Vec<u8>> {
    let seed: FeatureId = req.seed_feature.parse()?;
    let thresholds = GraphThresholds {
        t_res: req.t_res,
        t_module: req.t_module,
    };
    export_graph(&build_flow_graph(seed, bundle, thresholds)?, req.format)
}

fn zero() -> f32 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeactivateRequest {
    pub text: String,
    /// Restrict to one target layer (default: every layer ≥ 1).
    #[serde(default)]
    pub layer: Option<usize>,
    /// Restrict to one token position (default: every position ≥ 1).
    #[serde(default)]
    pub token: Option<usize>,
    pub strategy: Strategy,
    #[serde(default = "zero")]
    pub r: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeactivateReport {
    pub strategy: Strategy,
    pub r: f32,
    /// Number of (target, token) pairs considered; equals `rows.len()`.
    pub eligible: usize,
    pub rows: Vec<DeactivationRecord>,
    pub summary: Vec<StrategySummary>,
}

/// One report row per eligible target: every residual feature active at a
/// chosen (layer, token).
pub fn deactivate(bundle: &ModelBundle, req: &DeactivateRequest) -> Result<DeactivateReport> {
    let tokens = tokenize(&req.text);
    let max = bundle.model()?.config().max_positions;
    if tokens.len() > max {
        return Err(Error::invalid(format!("text is {} tokens, the model takes {max}", tokens.len())));
    }
    let baseline = Baseline::compute(bundle, &tokens)?;
    let layers: Vec<usize> = match req.layer {
        Some(0) => return Err(Error::invalid("layer 0 has no predecessors to deactivate")),
        Some(l) if l >= bundle.layer_count => {
            return Err(Error::OutOfRange {
                what: "layer",
                index: l,
                limit: bundle.layer_count,
            })
        }
        Some(l) => vec![l],
        None => (1..bundle.layer_count).collect(),
    };
    let positions: Vec<usize> = match req.token {
        Some(t) if t == 0 || t >= tokens.len() => {
            return Err(Error::OutOfRange {
                what: "token",
                index: t,
                limit: tokens.len(),
            })
        }
        Some(t) => vec![t],
        None => (1..tokens.len()).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut rows = Vec::new();
    for &layer in &layers {
        let matchers = LayerMatchers::cosine(bundle, layer, 5, req.strategy == Strategy::Permutation)?;
        for &t in &positions {
            for target in eligible_targets(&baseline, layer, t) {
                rows.push(run_deactivation(bundle, &baseline, target, t, req.strategy, req.r, &matchers, &mut rng)?);
            }
        }
    }
    Ok(DeactivateReport {
        strategy: req.strategy,
        r: req.r,
        eligible: rows.len(),
        summary: summarize(&rows),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

fn prompt_tokens(bundle: &ModelBundle, prompt: &str, sampler: &SamplerConfig) -> Result<Vec<u32>> {
    let tokens = tokenize(prompt);
    let max = bundle.model()?.config().max_positions;
    if tokens.len() + sampler.max_len > max {
        return Err(Error::invalid(format!(
            "prompt ({} tokens) plus max_len {} exceeds the model's {max} positions",
            tokens.len(),
            sampler.max_len
        )));
    }
    Ok(tokens)
}

pub fn generate_text(bundle: &ModelBundle, req: &GenerateRequest) -> Result<GenerateResponse> {
    let tokens = prompt_tokens(bundle, &req.prompt, &req.sampler)?;
    let out = generate(bundle.model()?, &tokens, &req.sampler, &[])?;
    Ok(GenerateResponse { text: detokenize(&out) })
}

fn activation_mode() -> ScoreMode {
    ScoreMode::Activation
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerRequest {
    pub plan: SteeringPlan,
    pub prompt: String,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Score the steered text against this theme; no scoring when absent.
    #[serde(default)]
    pub theme: Option<ThemeSpec>,
    #[serde(default = "activation_mode")]
    pub mode: ScoreMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerResponse {
    pub text: String,
    /// Unsteered generation with the same prompt and sampler.
    pub baseline_text: String,
    pub score: Option<GenerationScore>,
    pub baseline_score: Option<GenerationScore>,
    /// Scoring was requested but the scorer failed; scores are missing, not zero.
    pub degraded: bool,
    pub error: Option<String>,
}

/// Generate with and without the plan, then score both when a theme is set.
/// Generation failures are errors; scoring failures only degrade the result.
pub fn steer(
    bundle: &ModelBundle,
    req: &SteerRequest,
    scorer: &dyn Scorer,
    fold_corpus: Option<&[Vec<u32>]>,
) -> Result<SteerResponse> {
    req.plan.validate(bundle)?;
    let tokens = prompt_tokens(bundle, &req.prompt, &req.sampler)?;
    let steered = apply_steering(bundle, &req.plan, &tokens, &req.sampler, fold_corpus)?;
    let baseline = generate(bundle.model()?, &tokens, &req.sampler, &[])?;
    let (text, baseline_text) = (detokenize(&steered), detokenize(&baseline));
    let mut resp = SteerResponse {
        text,
        baseline_text,
        score: None,
        baseline_score: None,
        degraded: false,
        error: None,
    };
    if let Some(theme) = &req.theme {
        let mut errors = Vec::new();
        match scorer.score(&resp.text, theme, req.mode) {
            Ok(s) => resp.score = Some(s),
            Err(e) => errors.push(e.to_string()),
        }
        match scorer.score(&resp.baseline_text, theme, req.mode) {
            Ok(s) => resp.baseline_score = Some(s),
            Err(e) => errors.push(e.to_string()),
        }
        if !errors.is_empty() {
            resp.degraded = true;
            resp.error = Some(errors.join("; "));
        }
    }
    Ok(resp)
}

/// Pretty JSON with a trailing newline, the on-disk format of every JSON
/// artifact and response body.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// Config snapshot stored with a run: the request minus its run id.
pub(crate) fn run_config<T: Serialize>(req: &T) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(req)?;
    if let Some(map) = v.as_object_mut() {
        map.remove("run_id");
    }
    Ok(v)
}
