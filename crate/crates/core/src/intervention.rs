//! Rescaling interventions and the predecessor-deactivation protocol.
//!
//! A deactivation run picks predecessor features of an active residual
//! target by one of four strategies, rescales them at one token, recomputes
//! the forward pass from the target's layer and reports how much the target
//! activation dropped.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgraph::{active_predecessors, classify_origin, OriginGroup, OriginMode, PredecessorMaps};
use crate::matching::{pearson_top_k, permutation_match, TransitionMap, DEFAULT_MIN_COUNT};
use crate::tensors::{FeatureId, ModelBundle, Site, SitePosition};
use crate::toymodel::{encode_positions, ActivationRecord, Hook, Intervention, SaeActivations};

fn check_rescale_dims(h: usize, v: (usize, usize), a: usize) -> Result<()> {
    if v.0 != h || v.1 != a {
        return Err(Error::ShapeMismatch {
            tensor: "rescale operands".into(),
            expected: h * a,
            found: v.0 * v.1,
        });
    }
    Ok(())
}

/// `h + (r − 1)·V a` in double precision, with `V` holding one feature
/// direction per column. For `r = 1` the input is returned unchanged.
pub fn rescale_f64(h: &[f64], v: ArrayView2<'_, f64>, a: &[f64], r: f64) -> Result<Vec<f64>> {
    check_rescale_dims(h.len(), v.dim(), a.len())?;
    if r == 1.0 {
        return Ok(h.to_vec());
    }
    let c = r - 1.0;
    Ok(h.iter()
        .enumerate()
        .map(|(i, &x)| x + c * v.row(i).iter().zip(a).map(|(vi, ai)| vi * ai).sum::<f64>())
        .collect())
}

/// Hidden-state version of [`rescale_f64`]: accumulates in `f64`, rounds once.
pub fn rescale(h: &[f32], v: ArrayView2<'_, f32>, a: &[f32], r: f32) -> Result<Vec<f32>> {
    check_rescale_dims(h.len(), v.dim(), a.len())?;
    if r == 1.0 {
        return Ok(h.to_vec());
    }
    let c = f64::from(r) - 1.0;
    Ok(h.iter()
        .enumerate()
        .map(|(i, &x)| {
            let va: f64 = v.row(i).iter().zip(a).map(|(&vi, &ai)| f64::from(vi) * f64::from(ai)).sum();
            (f64::from(x) + c * va) as f32
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScope {
    One(usize),
    All,
}

/// Rescale a fixed set of features at one hook. Activations `a` are pinned
/// from the baseline run.
#[derive(Debug, Clone)]
pub struct InterventionSpec {
    pub position: SitePosition,
    pub token: TokenScope,
    /// `d × f` feature directions.
    pub directions: Array2<f32>,
    pub activations: Vec<f32>,
    pub r: f32,
}

impl InterventionSpec {
    pub fn from_features(bundle: &ModelBundle, position: SitePosition, token: usize, features: &[(usize, f32)], r: f32) -> Result<Self> {
        let dict = bundle.dictionary(position)?;
        let mut directions = Array2::zeros((dict.dim(), features.len()));
        for (c, &(i, _)) in features.iter().enumerate() {
            if i >= dict.n_features() {
                return Err(Error::OutOfRange {
                    what: "feature index",
                    index: i,
                    limit: dict.n_features(),
                });
            }
            directions.column_mut(c).assign(&dict.decoder().column(i));
        }
        Ok(Self {
            position,
            token: TokenScope::One(token),
            directions,
            activations: features.iter().map(|f| f.1).collect(),
            r,
        })
    }
}

impl Intervention for InterventionSpec {
    fn hooks(&self) -> Vec<Hook> {
        vec![Hook::for_site(self.position)]
    }

    fn apply(&self, _hook: Hook, hidden: &mut Array2<f32>) {
        if self.r == 1.0 {
            return;
        }
        let rows: Vec<usize> = match self.token {
            TokenScope::One(t) if t < hidden.nrows() => vec![t],
            TokenScope::One(_) => Vec::new(),
            TokenScope::All => (0..hidden.nrows()).collect(),
        };
        for t in rows {
            let h = hidden.row(t).to_vec();
            let out = rescale(&h, self.directions.view(), &self.activations, self.r).expect("dimensions checked at construction");
            hidden.row_mut(t).assign(&ndarray::ArrayView1::from(&out));
        }
    }
}

/// `1 − z_new / z_old`; `None` when `z_old` is not positive.
pub fn activation_change(z_old: f64, z_new: f64) -> Option<f64> {
    (z_old > 0.0).then(|| 1.0 - z_new / z_old)
}

/// `(L_new − L_old) / L_old`; `None` when `L_old` is not positive.
pub fn relative_loss_change(l_old: f64, l_new: f64) -> Option<f64> {
    (l_old > 0.0).then(|| (l_new - l_old) / l_old)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Permutation,
    Top1,
    Top5,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Permutation, Strategy::Top1, Strategy::Top5, Strategy::Random];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Permutation => "permutation",
            Strategy::Top1 => "top1",
            Strategy::Top5 => "top5",
            Strategy::Random => "random",
        }
    }

    fn origin_mode(self) -> OriginMode {
        match self {
            Strategy::Top5 => OriginMode::TopkAllInactive,
            _ => OriginMode::Top1,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown strategy '{s}' (permutation, top1, top5, random)")))
    }
}

/// Predecessor maps for one layer: top-`k` candidates (k ≥ 5 for the top5
/// and random strategies) and, optionally, a one-to-one permutation.
#[derive(Debug, Clone)]
pub struct LayerMatchers {
    pub topk: PredecessorMaps,
    pub permutation: Option<PredecessorMaps>,
}

fn permutation_map(bundle: &ModelBundle, from: SitePosition, to: SitePosition) -> Result<Option<TransitionMap>> {
    let (Some(a), Some(b)) = (bundle.get(from), bundle.get(to)) else {
        return Ok(None);
    };
    if !bundle.is_match_compatible(to) || a.n_features() != b.n_features() {
        return Ok(None);
    }
    let p = permutation_match(a, b)?;
    let sim_of = |i: usize, j: usize| -> f64 {
        let (x, y) = (a.unit_column(i), b.unit_column(j));
        x.iter().zip(&y).map(|(p, q)| p * q).sum()
    };
    Ok(Some(TransitionMap {
        source: from,
        target: to,
        k: 1,
        entries: p.mapping.iter().enumerate().map(|(i, &j)| vec![(j, sim_of(i, j))]).collect(),
    }))
}

impl LayerMatchers {
    /// Cosine maps; the permutation map is built when `with_permutation`.
    pub fn cosine(bundle: &ModelBundle, layer: usize, k: usize, with_permutation: bool) -> Result<Self> {
        let topk = PredecessorMaps::cosine(bundle, layer, k)?;
        let permutation = if with_permutation {
            let target = SitePosition::res(layer);
            let res = permutation_map(bundle, target, SitePosition::res(layer - 1))?
                .ok_or_else(|| Error::invalid("permutation matching needs equal-sized residual dictionaries"))?;
            Some(PredecessorMaps {
                layer,
                res,
                mlp: permutation_map(bundle, target, SitePosition::mlp(layer))?,
                att: permutation_map(bundle, target, SitePosition::att(layer))?,
            })
        } else {
            None
        };
        Ok(Self { topk, permutation })
    }

    /// Pearson maps from paired activation samples (`N × D` per site).
    pub fn pearson(samples: &SaeActivations, layer: usize, k: usize, min_count: Option<usize>) -> Result<Self> {
        if layer == 0 {
            return Err(Error::invalid("layer 0 has no previous residual"));
        }
        let min_count = min_count.unwrap_or(DEFAULT_MIN_COUNT);
        let target = SitePosition::res(layer);
        let acts_t = samples.get(target).ok_or(Error::MissingDictionary(target))?;
        let map = |pos: SitePosition| -> Result<Option<TransitionMap>> {
            match samples.get(pos) {
                Some(acts_p) => Ok(Some(pearson_top_k(acts_t.view(), acts_p.view(), k, min_count, target, pos)?)),
                None => Ok(None),
            }
        };
        let res = map(SitePosition::res(layer - 1))?.ok_or(Error::MissingDictionary(SitePosition::res(layer - 1)))?;
        Ok(Self {
            topk: PredecessorMaps {
                layer,
                res,
                mlp: map(SitePosition::mlp(layer))?,
                att: map(SitePosition::att(layer))?,
            },
            permutation: None,
        })
    }

    pub fn layer(&self) -> usize {
        self.topk.layer
    }
}

/// Baseline forward pass and SAE activations for one token sequence.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub record: ActivationRecord,
    pub acts: SaeActivations,
    pub loss: f64,
}

impl Baseline {
    pub fn compute(bundle: &ModelBundle, tokens: &[u32]) -> Result<Self> {
        let record = bundle.model()?.forward(tokens, &[])?;
        let acts = crate::toymodel::encode_record(bundle, &record)?;
        let loss = record.next_token_loss();
        Ok(Self { record, acts, loss })
    }
}

/// One row of the deactivation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeactivationRecord {
    pub target: FeatureId,
    pub token: usize,
    pub strategy: Strategy,
    pub r: f32,
    pub origin_group: OriginGroup,
    pub predecessors: Vec<FeatureId>,
    pub z_old: f32,
    pub z_new: Option<f32>,
    pub activation_change: Option<f64>,
    pub success: Option<bool>,
    pub relative_loss_change: Option<f64>,
    pub post_hoc_group: Option<OriginGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl DeactivationRecord {
    pub fn had_active_predecessor(&self) -> bool {
        !self.predecessors.is_empty()
    }
}

fn sites_of(layer: usize) -> [SitePosition; 3] {
    [SitePosition::res(layer - 1), SitePosition::mlp(layer), SitePosition::att(layer)]
}

/// Which predecessor features a strategy would rescale.
fn select_predecessors(
    target: usize,
    token: usize,
    strategy: Strategy,
    baseline: &Baseline,
    matchers: &LayerMatchers,
    rng: &mut impl Rng,
) -> Result<Vec<FeatureId>> {
    let layer = matchers.layer();
    let sites = sites_of(layer);
    let mut chosen = Vec::new();
    match strategy {
        Strategy::Top1 | Strategy::Top5 | Strategy::Permutation => {
            let maps = if strategy == Strategy::Permutation {
                matchers
                    .permutation
                    .as_ref()
                    .ok_or_else(|| Error::invalid("permutation strategy needs permutation maps"))?
            } else {
                &matchers.topk
            };
            let active = active_predecessors(target, token, &baseline.acts, maps, strategy.origin_mode());
            for (pos, feats) in sites.iter().zip(active) {
                chosen.extend(feats.into_iter().map(|j| FeatureId::new(*pos, j)));
            }
        }
        Strategy::Random => {
            for (pos, site) in sites.iter().zip([Site::Res, Site::Mlp, Site::Att]) {
                let cands: Vec<(usize, f64)> = matchers.topk.candidates(site, target, OriginMode::TopkAllInactive).into_iter().take(5).collect();
                if cands.is_empty() {
                    continue;
                }
                let (j, _) = cands[rng.gen_range(0..cands.len())];
                if baseline.acts.is_active(*pos, token, j) {
                    chosen.push(FeatureId::new(*pos, j));
                }
            }
        }
    }
    Ok(chosen)
}

/// Rescale `features` at `token` and recompute from the target layer.
pub fn intervene(bundle: &ModelBundle, baseline: &Baseline, layer: usize, token: usize, features: &[FeatureId], r: f32) -> Result<ActivationRecord> {
    let mut specs = Vec::new();
    for pos in sites_of(layer) {
        let here: Vec<(usize, f32)> = features
            .iter()
            .filter(|f| f.position() == pos)
            .map(|f| (f.index, baseline.acts.value(pos, token, f.index)))
            .collect();
        if !here.is_empty() {
            specs.push(InterventionSpec::from_features(bundle, pos, token, &here, r)?);
        }
    }
    let refs: Vec<&dyn Intervention> = specs.iter().map(|s| s as &dyn Intervention).collect();
    bundle.model()?.forward_from(&baseline.record, layer, &refs)
}

fn encode_layer(bundle: &ModelBundle, record: &ActivationRecord, layer: usize) -> Result<SaeActivations> {
    let mut positions = sites_of(layer).to_vec();
    positions.push(SitePosition::res(layer));
    encode_positions(bundle, record, &positions)
}

/// Run the deactivation protocol for one residual target at one token.
pub fn run_deactivation(
    bundle: &ModelBundle,
    baseline: &Baseline,
    target: FeatureId,
    token: usize,
    strategy: Strategy,
    r: f32,
    matchers: &LayerMatchers,
    rng: &mut impl Rng,
) -> Result<DeactivationRecord> {
    let layer = target.layer;
    if target.site != Site::Res || layer != matchers.layer() {
        return Err(Error::invalid(format!("target {target} does not match the layer-{} matchers", matchers.layer())));
    }
    let z_old = baseline.acts.value(target.position(), token, target.index);
    let origin_maps = match strategy {
        Strategy::Permutation => matchers.permutation.as_ref().unwrap_or(&matchers.topk),
        _ => &matchers.topk,
    };
    let origin_group = classify_origin(target.index, token, &baseline.acts, origin_maps, strategy.origin_mode())?;
    let predecessors = select_predecessors(target.index, token, strategy, baseline, matchers, rng)?;
    if predecessors.is_empty() {
        return Ok(DeactivationRecord {
            target,
            token,
            strategy,
            r,
            origin_group,
            predecessors,
            z_old,
            z_new: None,
            activation_change: None,
            success: None,
            relative_loss_change: None,
            post_hoc_group: None,
            note: Some("no active predecessor selected".into()),
        });
    }
    let record = intervene(bundle, baseline, layer, token, &predecessors, r)?;
    let acts = encode_layer(bundle, &record, layer)?;
    let z_new = acts.value(target.position(), token, target.index);
    let post_hoc_group = if z_new > 0.0 {
        Some(classify_origin(target.index, token, &acts, origin_maps, strategy.origin_mode())?)
    } else {
        None
    };
    Ok(DeactivationRecord {
        target,
        token,
        strategy,
        r,
        origin_group,
        predecessors,
        z_old,
        z_new: Some(z_new),
        activation_change: activation_change(f64::from(z_old), f64::from(z_new)),
        success: Some(z_new == 0.0),
        relative_loss_change: relative_loss_change(baseline.loss, record.next_token_loss()),
        post_hoc_group,
        note: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub best: Option<FeatureId>,
    pub best_activation_change: Option<f64>,
    pub tried: usize,
}

/// Rescale every active predecessor feature on its own and keep the largest
/// activation change.
pub fn exhaustive_oracle(bundle: &ModelBundle, baseline: &Baseline, target: FeatureId, token: usize, r: f32) -> Result<OracleResult> {
    let layer = target.layer;
    if layer == 0 || target.site != Site::Res {
        return Err(Error::invalid("oracle targets are residual features at layer >= 1"));
    }
    let z_old = baseline.acts.value(target.position(), token, target.index);
    if z_old <= 0.0 {
        return Err(Error::InactiveTarget {
            position: target.position(),
            index: target.index,
            token,
        });
    }
    let mut best: Option<(FeatureId, f64)> = None;
    let mut tried = 0;
    for pos in sites_of(layer) {
        for j in baseline.acts.active_features(pos, token) {
            let f = FeatureId::new(pos, j);
            let record = intervene(bundle, baseline, layer, token, &[f], r)?;
            let acts = encode_positions(bundle, &record, &[target.position()])?;
            let z_new = acts.value(target.position(), token, target.index);
            let ac = activation_change(f64::from(z_old), f64::from(z_new)).expect("z_old > 0");
            tried += 1;
            if best.is_none_or(|(_, b)| ac > b) {
                best = Some((f, ac));
            }
        }
    }
    Ok(OracleResult {
        best: best.map(|b| b.0),
        best_activation_change: best.map(|b| b.1),
        tried,
    })
}

/// Active residual features at `token`, i.e. the eligible targets.
pub fn eligible_targets(baseline: &Baseline, layer: usize, token: usize) -> Vec<FeatureId> {
    let pos = SitePosition::res(layer);
    baseline
        .acts
        .active_features(pos, token)
        .into_iter()
        .map(|i| FeatureId::new(pos, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub instances: usize,
    /// Denominator of the success rate.
    pub with_active_predecessor: usize,
    pub successes: usize,
    pub success_rate: Option<f64>,
    pub mean_activation_change: Option<f64>,
}

pub fn summarize(records: &[DeactivationRecord]) -> Vec<StrategySummary> {
    Strategy::ALL
        .into_iter()
        .filter_map(|s| {
            let rows: Vec<&DeactivationRecord> = records.iter().filter(|r| r.strategy == s).collect();
            if rows.is_empty() {
                return None;
            }
            let eligible: Vec<&&DeactivationRecord> = rows.iter().filter(|r| r.had_active_predecessor()).collect();
            let successes = eligible.iter().filter(|r| r.success == Some(true)).count();
            let acs: Vec<f64> = eligible.iter().filter_map(|r| r.activation_change).collect();
            Some(StrategySummary {
                strategy: s,
                instances: rows.len(),
                with_active_predecessor: eligible.len(),
                successes,
                success_rate: (!eligible.is_empty()).then(|| successes as f64 / eligible.len() as f64),
                mean_activation_change: (!acs.is_empty()).then(|| acs.iter().sum::<f64>() / acs.len() as f64),
            })
        })
        .collect()
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
