//! Origin groups, evolution categories and layered flow graphs.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{best_match, match_top_k, SiteScores, TransitionMap, DEFAULT_BLOCK};
use crate::tensors::{FeatureId, ModelBundle, Site, SitePosition};
use crate::toymodel::SaeActivations;

/// Which predecessor sites carry an active match of a residual feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OriginGroup {
    FromNowhere,
    FromRes,
    FromMlp,
    FromAtt,
    FromResMlp,
    FromResAtt,
    FromMlpAtt,
    FromResMlpAtt,
}

impl OriginGroup {
    pub const ALL: [OriginGroup; 8] = [
        OriginGroup::FromNowhere,
        OriginGroup::FromRes,
        OriginGroup::FromMlp,
        OriginGroup::FromAtt,
        OriginGroup::FromResMlp,
        OriginGroup::FromResAtt,
        OriginGroup::FromMlpAtt,
        OriginGroup::FromResMlpAtt,
    ];

    pub fn from_sites(res: bool, mlp: bool, att: bool) -> Self {
        match (res, mlp, att) {
            (false, false, false) => OriginGroup::FromNowhere,
            (true, false, false) => OriginGroup::FromRes,
            (false, true, false) => OriginGroup::FromMlp,
            (false, false, true) => OriginGroup::FromAtt,
            (true, true, false) => OriginGroup::FromResMlp,
            (true, false, true) => OriginGroup::FromResAtt,
            (false, true, true) => OriginGroup::FromMlpAtt,
            (true, true, true) => OriginGroup::FromResMlpAtt,
        }
    }

    /// `(res, mlp, att)` membership.
    pub fn sites(self) -> (bool, bool, bool) {
        match self {
            OriginGroup::FromNowhere => (false, false, false),
            OriginGroup::FromRes => (true, false, false),
            OriginGroup::FromMlp => (false, true, false),
            OriginGroup::FromAtt => (false, false, true),
            OriginGroup::FromResMlp => (true, true, false),
            OriginGroup::FromResAtt => (true, false, true),
            OriginGroup::FromMlpAtt => (false, true, true),
            OriginGroup::FromResMlpAtt => (true, true, true),
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&g| g == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            OriginGroup::FromNowhere => "From nowhere",
            OriginGroup::FromRes => "From RES",
            OriginGroup::FromMlp => "From MLP",
            OriginGroup::FromAtt => "From ATT",
            OriginGroup::FromResMlp => "From RES & MLP",
            OriginGroup::FromResAtt => "From RES & ATT",
            OriginGroup::FromMlpAtt => "From MLP & ATT",
            OriginGroup::FromResMlpAtt => "From RES & MLP & ATT",
        }
    }
}

impl fmt::Display for OriginGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Evolution {
    Translated,
    Processed,
    Newborn,
    Unexplained,
}

/// High/low cut-offs, global with optional per-layer overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionThresholds {
    pub t_high: f64,
    pub t_low: f64,
    #[serde(default)]
    pub per_layer: BTreeMap<usize, (f64, f64)>,
}

impl Default for EvolutionThresholds {
    fn default() -> Self {
        Self {
            t_high: 0.5,
            t_low: 0.15,
            per_layer: BTreeMap::new(),
        }
    }
}

impl EvolutionThresholds {
    pub fn for_layer(&self, layer: usize) -> (f64, f64) {
        self.per_layer.get(&layer).copied().unwrap_or((self.t_high, self.t_low))
    }
}

/// Place a feature in one of the four evolution cases from its site scores.
///
/// Each case is a pair of threshold conditions. Scores that satisfy no case
/// exactly go to the case they violate by the smallest total margin, with
/// precedence Processed, Translated, Newborn, Unexplained on equal margins.
/// Missing module sites count as score 0.
pub fn classify_evolution(s_res: f64, s_mlp: Option<f64>, s_att: Option<f64>, t_high: f64, t_low: f64) -> Result<Evolution> {
    if !(t_low <= t_high) {
        return Err(Error::invalid(format!("t_low ({t_low}) must not exceed t_high ({t_high})")));
    }
    let module = s_mlp.unwrap_or(0.0).max(s_att.unwrap_or(0.0));
    let above = |s: f64, t: f64| (t - s).max(0.0);
    let below = |s: f64, t: f64| (s - t).max(0.0);
    let candidates = [
        (Evolution::Processed, above(s_res, t_high) + above(module, t_high)),
        (Evolution::Translated, above(s_res, t_high) + below(module, t_low)),
        (Evolution::Newborn, below(s_res, t_low) + above(module, t_high)),
        (Evolution::Unexplained, below(s_res, t_low) + below(module, t_low)),
    ];
    let mut best = candidates[0];
    for c in &candidates[1..] {
        if c.1 < best.1 {
            best = *c;
        }
    }
    Ok(best.0)
}

pub fn classify_site_scores(scores: &SiteScores, thresholds: &EvolutionThresholds) -> Result<Evolution> {
    let (t_high, t_low) = thresholds.for_layer(scores.layer);
    classify_evolution(scores.s_res().unwrap_or(0.0), scores.s_mlp(), scores.s_att(), t_high, t_low)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginMode {
    /// A site contributes iff its best match is active.
    #[default]
    Top1,
    /// A site is inactive only if every one of its `k` matches is inactive.
    TopkAllInactive,
}

/// Transition maps from `R_L` into its three predecessor sites.
#[derive(Debug, Clone)]
pub struct PredecessorMaps {
    pub layer: usize,
    pub res: TransitionMap,
    pub mlp: Option<TransitionMap>,
    pub att: Option<TransitionMap>,
}

impl PredecessorMaps {
    /// Cosine top-`k` maps; module sites that are absent or dimension
    /// incompatible are left out.
    pub fn cosine(bundle: &ModelBundle, layer: usize, k: usize) -> Result<Self> {
        if layer == 0 {
            return Err(Error::invalid("layer 0 has no previous residual"));
        }
        let target = bundle.dictionary(SitePosition::res(layer))?;
        let module = |pos: SitePosition| -> Result<Option<TransitionMap>> {
            match bundle.get(pos) {
                Some(d) if bundle.is_match_compatible(pos) => Ok(Some(match_top_k(target, d, k, DEFAULT_BLOCK)?)),
                _ => Ok(None),
            }
        };
        Ok(Self {
            layer,
            res: match_top_k(target, bundle.dictionary(SitePosition::res(layer - 1))?, k, DEFAULT_BLOCK)?,
            mlp: module(SitePosition::mlp(layer))?,
            att: module(SitePosition::att(layer))?,
        })
    }

    pub fn site(&self, site: Site) -> Option<&TransitionMap> {
        match site {
            Site::Res => Some(&self.res),
            Site::Mlp => self.mlp.as_ref(),
            Site::Att => self.att.as_ref(),
        }
    }

    /// Matched predecessor candidates for `target` at one site under `mode`.
    pub fn candidates(&self, site: Site, target: usize, mode: OriginMode) -> Vec<(usize, f64)> {
        let Some(map) = self.site(site) else { return Vec::new() };
        let row = map.row(target);
        match mode {
            OriginMode::Top1 => row.iter().take(1).copied().collect(),
            OriginMode::TopkAllInactive => row.to_vec(),
        }
    }
}

/// Active matched predecessors per site, in `(res, mlp, att)` order.
pub fn active_predecessors(
    target: usize,
    token: usize,
    acts: &SaeActivations,
    maps: &PredecessorMaps,
    mode: OriginMode,
) -> [Vec<usize>; 3] {
    let layer = maps.layer;
    let at = |site: Site| -> Vec<usize> {
        let pos = SitePosition::new(if site == Site::Res { layer - 1 } else { layer }, site);
        maps.candidates(site, target, mode)
            .into_iter()
            .filter(|&(j, _)| acts.is_active(pos, token, j))
            .map(|(j, _)| j)
            .collect()
    };
    [at(Site::Res), at(Site::Mlp), at(Site::Att)]
}

/// Origin group of an active residual feature at one token.
pub fn classify_origin(
    target: usize,
    token: usize,
    acts: &SaeActivations,
    maps: &PredecessorMaps,
    mode: OriginMode,
) -> Result<OriginGroup> {
    let pos = SitePosition::res(maps.layer);
    if !acts.is_active(pos, token, target) {
        return Err(Error::InactiveTarget {
            position: pos,
            index: target,
            token,
        });
    }
    let [r, m, a] = active_predecessors(target, token, acts, maps, mode);
    Ok(OriginGroup::from_sites(!r.is_empty(), !m.is_empty(), !a.is_empty()))
}

pub const DEFAULT_T_RES: f64 = 0.5;
pub const DEFAULT_T_MODULE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphThresholds {
    pub t_res: f64,
    pub t_module: f64,
}

impl Default for GraphThresholds {
    fn default() -> Self {
        Self {
            t_res: DEFAULT_T_RES,
            t_module: DEFAULT_T_MODULE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub layer: usize,
    pub site: Site,
    pub index: usize,
    /// Similarity to the node it was reached from; `None` for the seed.
    pub score_to_parent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpretation: Option<String>,
}

impl GraphNode {
    pub fn feature(&self) -> FeatureId {
        FeatureId {
            layer: self.layer,
            site: self.site,
            index: self.index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
    pub score: f64,
    /// Forward (downstream) steps are advisory; backward matching is primary.
    pub advisory: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGraph {
    pub seed: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub span: [usize; 2],
    pub thresholds: GraphThresholds,
}

impl FlowGraph {
    pub fn node(&self, id: &str) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Residual nodes ordered by layer.
    pub fn spine(&self) -> Vec<&GraphNode> {
        let mut s: Vec<&GraphNode> = self.nodes.iter().filter(|n| n.site == Site::Res).collect();
        s.sort_by_key(|n| n.layer);
        s
    }

    pub fn residual_at(&self, layer: usize) -> Option<FeatureId> {
        self.nodes
            .iter()
            .find(|n| n.site == Site::Res && n.layer == layer)
            .map(GraphNode::feature)
    }

    /// Nodes of one layer, residual first.
    pub fn layer_nodes(&self, layer: usize) -> Vec<&GraphNode> {
        self.nodes.iter().filter(|n| n.layer == layer).collect()
    }
}

fn node_for(bundle: &ModelBundle, f: FeatureId, score: Option<f64>) -> GraphNode {
    GraphNode {
        id: f.to_string(),
        layer: f.layer,
        site: f.site,
        index: f.index,
        score_to_parent: score,
        interpretation: bundle.annotation(&f).map(str::to_owned),
    }
}

/// One top-1 residual step from `from` into the residual dictionary at `layer`.
pub fn residual_step(bundle: &ModelBundle, from: FeatureId, layer: usize) -> Result<Option<(usize, f64)>> {
    let src = bundle.dictionary(from.position())?;
    let Some(dst) = bundle.get(SitePosition::res(layer)) else {
        return Ok(None);
    };
    best_match(&src.unit_column(from.index), dst)
}

/// Trace a residual feature backward and forward through the layers and
/// attach module features to each residual node.
pub fn build_flow_graph(seed: FeatureId, bundle: &ModelBundle, thresholds: GraphThresholds) -> Result<FlowGraph> {
    if seed.site != Site::Res {
        return Err(Error::invalid("flow graphs are seeded from residual features"));
    }
    if seed.layer >= bundle.layer_count {
        return Err(Error::OutOfRange {
            what: "seed layer",
            index: seed.layer,
            limit: bundle.layer_count,
        });
    }
    let dict = bundle.dictionary(seed.position())?;
    if seed.index >= dict.n_features() {
        return Err(Error::OutOfRange {
            what: "seed feature",
            index: seed.index,
            limit: dict.n_features(),
        });
    }
    let mut nodes = vec![node_for(bundle, seed, None)];
    let mut edges = Vec::new();
    let mut spine = vec![seed];

    let mut cur = seed;
    while cur.layer > 0 {
        match residual_step(bundle, cur, cur.layer - 1)? {
            Some((j, s)) if s >= thresholds.t_res => {
                let prev = FeatureId::new(SitePosition::res(cur.layer - 1), j);
                nodes.push(node_for(bundle, prev, Some(s)));
                edges.push(GraphEdge {
                    from: prev.to_string(),
                    to: cur.to_string(),
                    score: s,
                    advisory: false,
                });
                spine.push(prev);
                cur = prev;
            }
            _ => break,
        }
    }
    let l_start = cur.layer;
    cur = seed;
    while cur.layer + 1 < bundle.layer_count {
        match residual_step(bundle, cur, cur.layer + 1)? {
            Some((j, s)) if s >= thresholds.t_res => {
                let next = FeatureId::new(SitePosition::res(cur.layer + 1), j);
                nodes.push(node_for(bundle, next, Some(s)));
                edges.push(GraphEdge {
                    from: cur.to_string(),
                    to: next.to_string(),
                    score: s,
                    advisory: true,
                });
                spine.push(next);
                cur = next;
            }
            _ => break,
        }
    }
    let l_end = cur.layer;

    for node in &spine {
        let unit = bundle.dictionary(node.position())?.unit_column(node.index);
        for site in [Site::Mlp, Site::Att] {
            let pos = SitePosition::new(node.layer, site);
            let Some(module) = bundle.get(pos) else { continue };
            if !bundle.is_match_compatible(pos) {
                continue;
            }
            if let Some((j, s)) = best_match(&unit, module)? {
                if s >= thresholds.t_module {
                    let m = FeatureId::new(pos, j);
                    nodes.push(node_for(bundle, m, Some(s)));
                    edges.push(GraphEdge {
                        from: m.to_string(),
                        to: node.to_string(),
                        score: s,
                        advisory: node.layer > seed.layer,
                    });
                }
            }
        }
    }
    let key = |id: &str| id.parse::<FeatureId>().expect("node ids are feature ids");
    nodes.sort_by_key(|n| n.feature());
    edges.sort_by(|a, b| (key(&a.to), key(&a.from)).cmp(&(key(&b.to), key(&b.from))));
    Ok(FlowGraph {
        seed: seed.to_string(),
        nodes,
        edges,
        span: [l_start, l_end],
        thresholds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Json,
    Dot,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ExportFormat::Json),
            "dot" | "graphviz" => Ok(ExportFormat::Dot),
            other => Err(Error::invalid(format!("unknown graph export format '{other}'"))),
        }
    }
}

pub fn export_graph(g: &FlowGraph, format: ExportFormat) -> Result<Vec<u8>> {
    match format {
        ExportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(g)?;
            out.push(b'\n');
            Ok(out)
        }
        ExportFormat::Dot => Ok(to_dot(g).into_bytes()),
    }
}

pub fn import_graph(bytes: &[u8]) -> Result<FlowGraph> {
    Ok(serde_json::from_slice(bytes)?)
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn to_dot(g: &FlowGraph) -> String {
    let mut out = String::new();
    out.push_str("digraph flow {\n  rankdir=LR;\n  node [shape=box, fontname=\"Helvetica\"];\n");
    let mut layers: Vec<usize> = g.nodes.iter().map(|n| n.layer).collect();
    layers.dedup();
    for layer in layers {
        let _ = writeln!(out, "  subgraph layer_{layer} {{\n    rank=same;");
        for n in g.layer_nodes(layer) {
            let mut label = n.id.clone();
            if let Some(text) = &n.interpretation {
                label.push_str("\\n");
                label.push_str(&dot_escape(text));
            }
            let style = if n.site == Site::Res { "bold" } else { "solid" };
            let _ = writeln!(out, "    \"{}\" [label=\"{}\", style={}];", n.id, label, style);
        }
        out.push_str("  }\n");
    }
    for e in &g.edges {
        let style = if e.advisory { ", style=dashed" } else { "" };
        let _ = writeln!(out, "  \"{}\" -> \"{}\" [label=\"{:.3}\"{}];", e.from, e.to, e.score, style);
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::{ActivationKind, FeatureDictionary};
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;

    fn dict(pos: SitePosition, dec: Array2<f32>) -> FeatureDictionary {
        let (d, n) = dec.dim();
        let enc = dec.t().to_owned();
        FeatureDictionary::new(pos, dec, enc, Array1::zeros(n), Array1::zeros(d), None, ActivationKind::Relu).unwrap()
    }

    fn basis(d: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    /// Spine direction copied through 4 residual layers with cosine `sims[l]`
    /// between layers l and l+1; every other column is orthogonal.
    fn spine_bundle(sims: &[f64], mlp_at: Option<(usize, f64)>) -> ModelBundle {
        let d = 8;
        let layers = sims.len() + 1;
        let mut b = ModelBundle::new("spine", d, layers);
        let mut dir: Vec<f64> = basis(d, 0).iter().map(|&x| x as f64).collect();
        for l in 0..layers {
            if l > 0 {
                // rotate within the (0, l) plane so the cosine to the previous layer is sims[l-1]
                let c = sims[l - 1];
                let sn = (1.0 - c * c).sqrt();
                let mut next = vec![0.0; d];
                for i in 0..d {
                    next[i] = c * dir[i];
                }
                // orthogonal partner: a basis vector not yet used
                next[l] += sn;
                let n = next.iter().map(|x| x * x).sum::<f64>().sqrt();
                dir = next.iter().map(|x| x / n).collect();
            }
            let mut dec = Array2::<f32>::zeros((d, 3));
            for i in 0..d {
                dec[[i, 1]] = dir[i] as f32;
            }
            dec[[d - 1, 0]] = 1.0;
            dec[[d - 2, 2]] = 1.0;
            b.insert(dict(SitePosition::res(l), dec)).unwrap();
            let mut mdec = Array2::<f32>::zeros((d, 2));
            mdec[[d - 3, 0]] = 1.0;
            if let Some((ml, s)) = mlp_at {
                if ml == l {
                    for i in 0..d {
                        mdec[[i, 1]] = (s * dir[i]) as f32;
                    }
                    mdec[[d - 3, 1]] = (1.0 - s * s).sqrt() as f32;
                }
            }
            b.insert(dict(SitePosition::mlp(l), mdec)).unwrap();
        }
        b
    }

    #[test]
    fn evolution_cases() {
        assert_eq!(classify_evolution(0.95, Some(0.05), Some(0.02), 0.5, 0.15).unwrap(), Evolution::Translated);
        assert_eq!(classify_evolution(0.9, Some(0.8), Some(0.1), 0.5, 0.15).unwrap(), Evolution::Processed);
        assert_eq!(classify_evolution(0.1, Some(0.85), Some(0.1), 0.5, 0.15).unwrap(), Evolution::Newborn);
        assert_eq!(classify_evolution(0.1, Some(0.1), Some(0.05), 0.5, 0.15).unwrap(), Evolution::Unexplained);
        assert_eq!(classify_evolution(0.1, None, None, 0.5, 0.15).unwrap(), Evolution::Unexplained);
        assert!(classify_evolution(0.1, None, None, 0.1, 0.5).is_err());
    }

    #[test]
    fn evolution_intermediate_uses_nearest_case() {
        // module sits exactly midway between the cut-offs: Processed wins the tie
        assert_eq!(classify_evolution(0.9, Some(0.325), None, 0.5, 0.15).unwrap(), Evolution::Processed);
        assert_eq!(classify_evolution(0.9, Some(0.2), None, 0.5, 0.15).unwrap(), Evolution::Translated);
        assert_eq!(classify_evolution(0.05, Some(0.325), None, 0.5, 0.15).unwrap(), Evolution::Newborn);
        assert_eq!(classify_evolution(0.05, Some(0.2), None, 0.5, 0.15).unwrap(), Evolution::Unexplained);
    }

    #[test]
    fn groups_partition_site_subsets() {
        let mut seen = std::collections::BTreeSet::new();
        for bits in 0..8u8 {
            let g = OriginGroup::from_sites(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
            assert_eq!(g.sites(), (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0));
            seen.insert(g);
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn copied_direction_gives_four_node_spine() {
        let b = spine_bundle(&[0.99, 0.99, 0.99], None);
        let g = build_flow_graph(FeatureId::new(SitePosition::res(3), 1), &b, GraphThresholds::default()).unwrap();
        assert_eq!(g.nodes.len(), 4);
        assert_eq!(g.edges.len(), 3);
        assert_eq!(g.span, [0, 3]);
        for l in 0..4 {
            assert_eq!(g.layer_nodes(l).len(), 1);
        }
        for e in &g.edges {
            assert!((e.score - 0.99).abs() < 1e-6);
        }
    }

    #[test]
    fn weak_link_cuts_the_span() {
        let b = spine_bundle(&[0.99, 0.99, 0.4], None);
        let g = build_flow_graph(FeatureId::new(SitePosition::res(0), 1), &b, GraphThresholds::default()).unwrap();
        assert_eq!(g.span, [0, 2]);
        assert_eq!(g.spine().len(), 3);
        assert!(g.edges.iter().all(|e| e.advisory));
    }

    #[test]
    fn module_attaches_above_threshold() {
        let b = spine_bundle(&[0.99, 0.99, 0.99], Some((2, 0.8)));
        let g = build_flow_graph(FeatureId::new(SitePosition::res(3), 1), &b, GraphThresholds::default()).unwrap();
        let m = g.node("2/mlp/1").expect("mlp node attached");
        assert!((m.score_to_parent.unwrap() - 0.8).abs() < 1e-6);
        let e = g.edges.iter().find(|e| e.from == "2/mlp/1").unwrap();
        assert_eq!(e.to, g.residual_at(2).unwrap().to_string());
        assert_eq!(g.nodes.iter().filter(|n| n.site == Site::Mlp).count(), 1);
    }

    #[test]
    fn seed_validation() {
        let b = spine_bundle(&[0.99], None);
        assert!(build_flow_graph(FeatureId::new(SitePosition::res(5), 0), &b, GraphThresholds::default()).is_err());
        assert!(build_flow_graph(FeatureId::new(SitePosition::res(0), 9), &b, GraphThresholds::default()).is_err());
        assert!(build_flow_graph(FeatureId::new(SitePosition::mlp(0), 0), &b, GraphThresholds::default()).is_err());
    }

    #[test]
    fn seed_only_graph_exports_single_node() {
        let b = spine_bundle(&[0.99], None);
        let t = GraphThresholds { t_res: 1.5, t_module: 1.5 };
        let g = build_flow_graph(FeatureId::new(SitePosition::res(1), 1), &b, t).unwrap();
        assert_eq!(g.nodes.len(), 1);
        let dot = String::from_utf8(export_graph(&g, ExportFormat::Dot).unwrap()).unwrap();
        assert_eq!(dot.matches("[label=").count(), 1);
        let json: serde_json::Value = serde_json::from_slice(&export_graph(&g, ExportFormat::Json).unwrap()).unwrap();
        assert_eq!(json["nodes"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn exports_agree_on_counts_and_round_trip() {
        let b = spine_bundle(&[0.99, 0.97, 0.93], None);
        let g = build_flow_graph(FeatureId::new(SitePosition::res(1), 1), &b, GraphThresholds::default()).unwrap();
        let dot = String::from_utf8(export_graph(&g, ExportFormat::Dot).unwrap()).unwrap();
        assert_eq!(dot.matches(" -> ").count(), 3);
        assert_eq!(dot.matches("rank=same").count(), 4);
        let json = export_graph(&g, ExportFormat::Json).unwrap();
        let back = import_graph(&json).unwrap();
        assert_eq!(back, g);
        assert_eq!(export_graph(&back, ExportFormat::Json).unwrap(), json);
        assert!("svg".parse::<ExportFormat>().is_err());
    }

    #[test]
    fn spine_equals_independent_single_steps() {
        let b = spine_bundle(&[0.98, 0.9, 0.8], Some((1, 0.6)));
        let g = build_flow_graph(FeatureId::new(SitePosition::res(3), 1), &b, GraphThresholds::default()).unwrap();
        let mut cur = FeatureId::new(SitePosition::res(3), 1);
        for l in (0..3).rev() {
            let (j, _) = residual_step(&b, cur, l).unwrap().unwrap();
            cur = FeatureId::new(SitePosition::res(l), j);
            assert_eq!(g.residual_at(l), Some(cur));
        }
    }

    fn acts_with(entries: &[(SitePosition, usize)], n: usize) -> SaeActivations {
        let mut a = SaeActivations::default();
        for &(pos, i) in entries {
            a.by_site.entry(pos).or_insert_with(|| Array2::zeros((1, n)))[[0, i]] = 1.0;
        }
        for pos in [SitePosition::res(0), SitePosition::res(1), SitePosition::mlp(1), SitePosition::att(1)] {
            a.by_site.entry(pos).or_insert_with(|| Array2::zeros((1, n)));
        }
        a
    }

    fn maps_k(k: usize, rows: [Vec<(usize, f64)>; 3]) -> PredecessorMaps {
        let [r, m, a] = rows;
        let tm = |e: Vec<(usize, f64)>, target| TransitionMap {
            source: SitePosition::res(1),
            target,
            k,
            entries: vec![e],
        };
        PredecessorMaps {
            layer: 1,
            res: tm(r, SitePosition::res(0)),
            mlp: Some(tm(m, SitePosition::mlp(1))),
            att: Some(tm(a, SitePosition::att(1))),
        }
    }

    #[test]
    fn origin_from_nowhere_and_from_res() {
        let maps = maps_k(1, [vec![(2, 0.9)], vec![(1, 0.3)], vec![(0, 0.2)]]);
        let acts = acts_with(&[(SitePosition::res(1), 0)], 4);
        assert_eq!(classify_origin(0, 0, &acts, &maps, OriginMode::Top1).unwrap(), OriginGroup::FromNowhere);
        let acts = acts_with(&[(SitePosition::res(1), 0), (SitePosition::res(0), 2)], 4);
        assert_eq!(classify_origin(0, 0, &acts, &maps, OriginMode::Top1).unwrap(), OriginGroup::FromRes);
        let none = acts_with(&[], 4);
        assert!(matches!(classify_origin(0, 0, &none, &maps, OriginMode::Top1), Err(Error::InactiveTarget { .. })));
    }

    #[test]
    fn topk_counts_any_active_match() {
        let maps = maps_k(5, [vec![(2, 0.9), (3, 0.8)], vec![(1, 0.3), (0, 0.2)], vec![]]);
        let acts = acts_with(&[(SitePosition::res(1), 0), (SitePosition::mlp(1), 0)], 4);
        assert_eq!(classify_origin(0, 0, &acts, &maps, OriginMode::Top1).unwrap(), OriginGroup::FromNowhere);
        assert_eq!(classify_origin(0, 0, &acts, &maps, OriginMode::TopkAllInactive).unwrap(), OriginGroup::FromMlp);
    }

    proptest! {
        #[test]
        fn top1_equals_topk_with_k1(active in proptest::collection::vec(any::<bool>(), 12), rows in proptest::collection::vec(0usize..4, 3)) {
            let maps = maps_k(1, [vec![(rows[0], 0.9)], vec![(rows[1], 0.5)], vec![(rows[2], 0.4)]]);
            let mut entries = vec![(SitePosition::res(1), 0)];
            let sites = [SitePosition::res(0), SitePosition::mlp(1), SitePosition::att(1)];
            for (k, &on) in active.iter().enumerate() {
                if on { entries.push((sites[k / 4], k % 4)); }
            }
            let acts = acts_with(&entries, 4);
            prop_assert_eq!(
                classify_origin(0, 0, &acts, &maps, OriginMode::Top1).unwrap(),
                classify_origin(0, 0, &acts, &maps, OriginMode::TopkAllInactive).unwrap()
            );
        }

        #[test]
        fn topology_invariant_under_column_scaling(scale in 0.05f32..20.0, col in 0usize..3, layer in 0usize..4) {
            let b = spine_bundle(&[0.99, 0.9, 0.8], Some((2, 0.7)));
            let seed = FeatureId::new(SitePosition::res(3), 1);
            let g = build_flow_graph(seed, &b, GraphThresholds::default()).unwrap();
            let mut b2 = b.clone();
            let pos = SitePosition::res(layer);
            let d = b2.dictionary(pos).unwrap();
            let mut dec = d.decoder().clone();
            dec.column_mut(col).mapv_inplace(|x| x * scale);
            b2.insert(dict(pos, dec)).unwrap();
            let g2 = build_flow_graph(seed, &b2, GraphThresholds::default()).unwrap();
            let ids = |g: &FlowGraph| g.nodes.iter().map(|n| n.id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&g), ids(&g2));
            prop_assert_eq!(g.edges.len(), g2.edges.len());
        }
    }
}
