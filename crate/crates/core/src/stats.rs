//! Corpus-driven group statistics.
//!
//! Sampling follows a fixed protocol (a few random non-BOS tokens from each
//! of a few hundred texts); every active residual feature at a sampled token
//! is assigned an origin group. The separation tests use Mann-Whitney U;
//! small samples get exact null distributions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::flowgraph::{classify_origin, OriginGroup, OriginMode, PredecessorMaps};
use crate::intervention::LayerMatchers;
use crate::matching::{site_scores, DEFAULT_MIN_COUNT};
use crate::tensors::{FeatureId, ModelBundle, Site, SitePosition};
use crate::toymodel::{encode_record, sample_activations, tokenize, SaeActivations};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleProtocol {
    pub texts: usize,
    pub tokens_per_text: usize,
    pub exclude_bos: bool,
    pub seed: u64,
}

impl Default for SampleProtocol {
    fn default() -> Self {
        Self {
            texts: 250,
            tokens_per_text: 5,
            exclude_bos: true,
            seed: 0,
        }
    }
}

/// Plain-text corpus: a directory holds one document per file, a file holds
/// one document per non-empty line.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let docs = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut docs = Vec::with_capacity(files.len());
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| Error::Io { path: f.clone(), source: e })?;
            if !text.trim().is_empty() {
                docs.push(text);
            }
        }
        docs
    } else {
        std::fs::read_to_string(path)
            .map_err(io)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_owned)
            .collect()
    };
    if docs.is_empty() {
        return Err(Error::invalid(format!("corpus {} is empty", path.display())));
    }
    Ok(docs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupMatcher {
    Cosine,
    Pearson,
}

/// One classified (feature, context) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub feature: FeatureId,
    pub text: usize,
    pub token: usize,
    pub group: OriginGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGroups {
    pub layer: usize,
    pub total: usize,
    /// Counts in [`OriginGroup::ALL`] order.
    pub counts: [usize; 8],
    /// Percentages in [`OriginGroup::ALL`] order.
    pub percent: [f64; 8],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDistribution {
    pub matcher: GroupMatcher,
    pub protocol: SampleProtocol,
    pub layers: Vec<LayerGroups>,
    /// "From nowhere" share over every layer, in percent.
    pub from_nowhere_percent: f64,
    pub assignments: Vec<GroupAssignment>,
}

impl GroupDistribution {
    /// One JSON record per layer.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for l in &self.layers {
            let groups: BTreeMap<&str, f64> = OriginGroup::ALL.iter().map(|g| (g.name(), l.percent[g.index()])).collect();
            out.push_str(&serde_json::to_string(&serde_json::json!({
                "matcher": self.matcher,
                "layer": l.layer,
                "total": l.total,
                "percent": groups,
            }))?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Texts chosen by the protocol and the token positions sampled in each.
fn sample_contexts(corpus: &[String], max_positions: usize, protocol: &SampleProtocol) -> Vec<(usize, Vec<u32>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let n = protocol.texts.min(corpus.len());
    let mut picked = sample(&mut rng, corpus.len(), n).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .filter_map(|ti| {
            let mut toks = tokenize(&corpus[ti]);
            toks.truncate(max_positions);
            // BOS sits at position 0 and is never sampled
            let first = 1;
            let avail = toks.len().saturating_sub(first);
            if avail == 0 {
                return None;
            }
            let k = protocol.tokens_per_text.min(avail);
            let mut pos: Vec<usize> = sample(&mut rng, avail, k).into_iter().map(|p| p + first).collect();
            pos.sort_unstable();
            Some((ti, toks, pos))
        })
        .collect()
}

pub fn group_distribution(
    corpus: &[String],
    bundle: &ModelBundle,
    protocol: &SampleProtocol,
    matcher: GroupMatcher,
) -> Result<GroupDistribution> {
    if corpus.is_empty() {
        return Err(Error::invalid("corpus is empty"));
    }
    if !protocol.exclude_bos {
        return Err(Error::invalid("BOS is always excluded from sampling"));
    }
    let model = bundle.model()?;
    let contexts = sample_contexts(corpus, model.config().max_positions, protocol);
    let layers: Vec<usize> = (1..bundle.layer_count)
        .filter(|&l| bundle.get(SitePosition::res(l)).is_some() && bundle.get(SitePosition::res(l - 1)).is_some())
        .collect();
    let maps: Vec<PredecessorMaps> = match matcher {
        GroupMatcher::Cosine => layers
            .iter()
            .map(|&l| PredecessorMaps::cosine(bundle, l, 1))
            .collect::<Result<_>>()?,
        GroupMatcher::Pearson => {
            let seqs: Vec<Vec<u32>> = contexts.iter().map(|c| c.1.clone()).collect();
            let samples = sample_activations(bundle, model, &seqs, true)?;
            layers
                .iter()
                .map(|&l| LayerMatchers::pearson(&samples, l, 1, Some(DEFAULT_MIN_COUNT)).map(|m| m.topk))
                .collect::<Result<_>>()?
        }
    };
    let per_text: Vec<Result<Vec<GroupAssignment>>> = contexts
        .par_iter()
        .map(|(ti, toks, positions)| {
            let rec = model.forward(toks, &[])?;
            let acts: SaeActivations = encode_record(bundle, &rec)?;
            let mut out = Vec::new();
            for m in &maps {
                let pos = SitePosition::res(m.layer);
                for &t in positions {
                    for f in acts.active_features(pos, t) {
                        out.push(GroupAssignment {
                            feature: FeatureId::new(pos, f),
                            text: *ti,
                            token: t,
                            group: classify_origin(f, t, &acts, m, OriginMode::Top1)?,
                        });
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut assignments = Vec::new();
    for r in per_text {
        assignments.extend(r?);
    }
    let mut by_layer: BTreeMap<usize, [usize; 8]> = layers.iter().map(|&l| (l, [0; 8])).collect();
    for a in &assignments {
        by_layer.get_mut(&a.feature.layer).expect("sampled layer")[a.group.index()] += 1;
    }
    let percent = |c: &[usize; 8]| -> [f64; 8] {
        let total: usize = c.iter().sum();
        let mut p = [0.0; 8];
        if total > 0 {
            for (x, &n) in p.iter_mut().zip(c) {
                *x = 100.0 * n as f64 / total as f64;
            }
        }
        p
    };
    let layers: Vec<LayerGroups> = by_layer
        .into_iter()
        .map(|(layer, counts)| LayerGroups {
            layer,
            total: counts.iter().sum(),
            percent: percent(&counts),
            counts,
        })
        .collect();
    let nowhere = assignments.iter().filter(|a| a.group == OriginGroup::FromNowhere).count();
    Ok(GroupDistribution {
        matcher,
        protocol: *protocol,
        layers,
        from_nowhere_percent: if assignments.is_empty() {
            0.0
        } else {
            100.0 * nowhere as f64 / assignments.len() as f64
        },
        assignments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Pairs with `x > y`, ties counting one half.
    pub u: f64,
    /// `P(U ≤ u)` under the null.
    pub p: f64,
    pub exact: bool,
}

/// Exact null distribution is used when the smaller sample has at most this
/// many values...
pub const EXACT_MAX_SMALL: usize = 8;
/// ...and the pooled sample is no larger than this.
pub const EXACT_MAX_TOTAL: usize = 400;

fn u_statistic(x: &[f64], y: &[f64]) -> f64 {
    let mut u = 0.0;
    for &a in x {
        for &b in y {
            if a > b {
                u += 1.0;
            } else if a == b {
                u += 0.5;
            }
        }
    }
    u
}

/// Pooled midranks doubled, so ties stay integral.
fn doubled_midranks(pool: &mut [f64]) -> (Vec<usize>, Vec<usize>) {
    pool.sort_by(f64::total_cmp);
    let mut ranks = Vec::with_capacity(pool.len());
    let mut ties = Vec::new();
    let mut i = 0;
    while i < pool.len() {
        let mut j = i;
        while j + 1 < pool.len() && pool[j + 1] == pool[i] {
            j += 1;
        }
        // ranks i+1..=j+1, doubled mean = i + j + 2
        ranks.extend(std::iter::repeat(i + j + 2).take(j - i + 1));
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// `P(U ≤ u)` by counting every way `n` of the pooled values can form `x`.
fn exact_lower_tail(x: &[f64], y: &[f64], u: f64) -> f64 {
    let n = x.len();
    let mut pool: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, _) = doubled_midranks(&mut pool);
    let max_sum: usize = {
        let mut r = ranks.clone();
        r.sort_unstable();
        r.iter().rev().take(n).sum()
    };
    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0.0f64; max_sum + 1]; n + 1];
    ways[0][0] = 1.0;
    for (seen, &r) in ranks.iter().enumerate() {
        for k in (1..=n.min(seen + 1)).rev() {
            let (lo, hi) = ways.split_at_mut(k);
            let prev = &lo[k - 1];
            let cur = &mut hi[0];
            for s in (r..=max_sum).rev() {
                let w = prev[s - r];
                if w != 0.0 {
                    cur[s] += w;
                }
            }
        }
    }
    // U = R_x − n(n+1)/2, so 2U = S − n(n+1)
    let offset = n * (n + 1);
    let total: f64 = ways[n].iter().sum();
    let limit = 2.0 * u + 1e-9;
    let hit: f64 = ways[n]
        .iter()
        .enumerate()
        .filter(|&(s, _)| s as f64 - offset as f64 <= limit)
        .map(|(_, w)| w)
        .sum();
    (hit / total).min(1.0)
}

/// Normal approximation to `P(U ≤ u)` with tie and continuity corrections.
fn approx_lower_tail(x: &[f64], y: &[f64], u: f64) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let total = n + m;
    let mut pool: Vec<f64> = x.iter().chain(y).copied().collect();
    let (_, ties) = doubled_midranks(&mut pool);
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = n * m / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
    let mean = n * m / 2.0;
    if !(var > 0.0) {
        return 1.0;
    }
    let z = (u + 0.5 - mean) / var.sqrt();
    Normal::standard().cdf(z).min(1.0)
}

pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("Mann-Whitney needs two non-empty samples"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::invalid("Mann-Whitney samples contain NaN"));
    }
    let u = u_statistic(x, y);
    let exact = x.len().min(y.len()) <= EXACT_MAX_SMALL && x.len() + y.len() <= EXACT_MAX_TOTAL;
    let p = if exact {
        // enumerate over the smaller sample; U(x,y) = nm − U(y,x)
        if x.len() <= y.len() {
            exact_lower_tail(x, y, u)
        } else {
            let nm = (x.len() * y.len()) as f64;
            // P(U ≤ u) = P(U' ≥ nm − u) = 1 − P(U' < nm − u)
            1.0 - exact_strictly_below(y, x, nm - u)
        }
    } else {
        approx_lower_tail(x, y, u)
    };
    Ok(MannWhitney { u, p, exact })
}

/// Normal-approximation p regardless of sample size.
pub fn mann_whitney_approx(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("Mann-Whitney needs two non-empty samples"));
    }
    let u = u_statistic(x, y);
    Ok(MannWhitney {
        u,
        p: approx_lower_tail(x, y, u),
        exact: false,
    })
}

/// `P(U < u)`: half-integer lattice, so step down by a quarter.
fn exact_strictly_below(x: &[f64], y: &[f64], u: f64) -> f64 {
    exact_lower_tail(x, y, u - 0.25)
}

/// Two-sided p from the one-sided machinery.
pub fn mann_whitney_two_sided(x: &[f64], y: &[f64]) -> Result<f64> {
    let lower = mann_whitney_u(x, y)?.p;
    let upper = mann_whitney_u(y, x)?.p;
    Ok((2.0 * lower.min(upper)).min(1.0))
}

/// One-sided two-proportion z-test of `p1 > p2`. Returns `(z, p)`.
pub fn two_proportion_test(x1: usize, n1: usize, x2: usize, n2: usize) -> Result<(f64, f64)> {
    if n1 == 0 || n2 == 0 || x1 > n1 || x2 > n2 {
        return Err(Error::invalid("two-proportion test needs 0 <= x <= n and n >= 1"));
    }
    let (p1, p2) = (x1 as f64 / n1 as f64, x2 as f64 / n2 as f64);
    let pooled = (x1 + x2) as f64 / (n1 + n2) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return Ok((0.0, if p1 > p2 { 0.0 } else { 1.0 }));
    }
    let z = (p1 - p2) / se;
    Ok((z, 1.0 - Normal::standard().cdf(z)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    SRes,
    SMlp,
    SAtt,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::SRes, ScoreKind::SMlp, ScoreKind::SAtt];

    fn site(self) -> Site {
        match self {
            ScoreKind::SRes => Site::Res,
            ScoreKind::SMlp => Site::Mlp,
            ScoreKind::SAtt => Site::Att,
        }
    }
}

/// Module-activity relation of a group pair for one score kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    /// Active in only one of the two groups.
    AO,
    /// Active in both.
    AB,
    /// Inactive in both.
    IB,
}

pub fn bucket(a: OriginGroup, b: OriginGroup, kind: ScoreKind) -> Bucket {
    let active = |g: OriginGroup| {
        let (r, m, at) = g.sites();
        match kind.site() {
            Site::Res => r,
            Site::Mlp => m,
            Site::Att => at,
        }
    };
    match (active(a), active(b)) {
        (true, true) => Bucket::AB,
        (false, false) => Bucket::IB,
        _ => Bucket::AO,
    }
}

/// Similarity scores of one classified feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub group: OriginGroup,
    pub layer: usize,
    pub corpus: String,
    pub s_res: Option<f64>,
    pub s_mlp: Option<f64>,
    pub s_att: Option<f64>,
}

impl ScoreSample {
    fn get(&self, kind: ScoreKind) -> Option<f64> {
        match kind {
            ScoreKind::SRes => self.s_res,
            ScoreKind::SMlp => self.s_mlp,
            ScoreKind::SAtt => self.s_att,
        }
    }
}

/// Attach site scores to group assignments (scores cached per feature).
pub fn score_samples(bundle: &ModelBundle, assignments: &[GroupAssignment], corpus: &str) -> Result<Vec<ScoreSample>> {
    let feats: BTreeSet<FeatureId> = assignments.iter().map(|a| a.feature).collect();
    let scored: Vec<Result<(FeatureId, [Option<f64>; 3])>> = feats
        .into_par_iter()
        .map(|f| {
            let s = site_scores(f.index, f.layer, bundle)?;
            Ok((f, [s.s_res(), s.s_mlp(), s.s_att()]))
        })
        .collect();
    let mut cache = BTreeMap::new();
    for r in scored {
        let (f, s) = r?;
        cache.insert(f, s);
    }
    Ok(assignments
        .iter()
        .map(|a| {
            let [r, m, at] = cache[&a.feature];
            ScoreSample {
                group: a.group,
                layer: a.feature.layer,
                corpus: corpus.to_owned(),
                s_res: r,
                s_mlp: m,
                s_att: at,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationEntry {
    pub group_a: OriginGroup,
    pub group_b: OriginGroup,
    pub score: ScoreKind,
    pub bucket: Bucket,
    pub tests: usize,
    pub significant: usize,
    pub fraction: f64,
}

pub const DEFAULT_P_THRESHOLD: f64 = 0.001;

/// For every group pair and score kind, the fraction of (layer, corpus)
/// cells where a two-sided Mann-Whitney test rejects at `p_threshold`.
pub fn group_separation_report(samples: &[ScoreSample], p_threshold: f64) -> Result<Vec<SeparationEntry>> {
    let mut cells: BTreeMap<(usize, &str), BTreeMap<OriginGroup, Vec<&ScoreSample>>> = BTreeMap::new();
    for s in samples {
        cells
            .entry((s.layer, s.corpus.as_str()))
            .or_default()
            .entry(s.group)
            .or_default()
            .push(s);
    }
    let groups: BTreeSet<OriginGroup> = samples.iter().map(|s| s.group).collect();
    let groups: Vec<OriginGroup> = groups.into_iter().collect();
    let mut out = Vec::new();
    for (i, &a) in groups.iter().enumerate() {
        for &b in &groups[i + 1..] {
            for kind in ScoreKind::ALL {
                let mut tests = 0;
                let mut significant = 0;
                for by_group in cells.values() {
                    let values = |g: OriginGroup| -> Vec<f64> {
                        by_group
                            .get(&g)
                            .map(|v| v.iter().filter_map(|s| s.get(kind)).collect())
                            .unwrap_or_default()
                    };
                    let (xa, xb) = (values(a), values(b));
                    if xa.is_empty() || xb.is_empty() {
                        continue;
                    }
                    tests += 1;
                    if mann_whitney_two_sided(&xa, &xb)? < p_threshold {
                        significant += 1;
                    }
                }
                if tests > 0 {
                    out.push(SeparationEntry {
                        group_a: a,
                        group_b: b,
                        score: kind,
                        bucket: bucket(a, b, kind),
                        tests,
                        significant,
                        fraction: significant as f64 / tests as f64,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionMatrix {
    pub groups: Vec<String>,
    /// Features ever labeled with each group.
    pub support: [usize; 8],
    /// `entries[a][b]`: share of features labeled `a` that are also labeled
    /// `b` in another context.
    pub entries: [[f64; 8]; 8],
}

pub fn intersection_matrix(assignments: &[(FeatureId, OriginGroup)]) -> IntersectionMatrix {
    let mut labels: BTreeMap<FeatureId, [usize; 8]> = BTreeMap::new();
    for (f, g) in assignments {
        labels.entry(*f).or_insert([0; 8])[g.index()] += 1;
    }
    let mut support = [0usize; 8];
    let mut both = [[0usize; 8]; 8];
    for counts in labels.values() {
        for a in 0..8 {
            if counts[a] == 0 {
                continue;
            }
            support[a] += 1;
            for b in 0..8 {
                if b != a && counts[b] > 0 {
                    both[a][b] += 1;
                }
            }
        }
    }
    let mut entries = [[0.0; 8]; 8];
    for a in 0..8 {
        if support[a] == 0 {
            continue;
        }
        for b in 0..8 {
            entries[a][b] = if a == b { 1.0 } else { both[a][b] as f64 / support[a] as f64 };
        }
    }
    IntersectionMatrix {
        groups: OriginGroup::ALL.iter().map(|g| g.name().to_owned()).collect(),
        support,
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// `P(U ≤ u)` by listing every subset of pooled indices.
    fn brute_force_p(x: &[f64], y: &[f64]) -> f64 {
        let pool: Vec<f64> = x.iter().chain(y).copied().collect();
        let n = x.len();
        let u_obs = u_statistic(x, y);
        let (mut hit, mut total) = (0usize, 0usize);
        for mask in 0u32..(1 << pool.len()) {
            if mask.count_ones() as usize != n {
                continue;
            }
            let (xs, ys): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
                pool.iter().copied().enumerate().partition(|(i, _)| mask & (1 << i) != 0);
            let xs: Vec<f64> = xs.into_iter().map(|p| p.1).collect();
            let ys: Vec<f64> = ys.into_iter().map(|p| p.1).collect();
            total += 1;
            if u_statistic(&xs, &ys) <= u_obs + 1e-9 {
                hit += 1;
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn two_by_two_example() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert!((r.p - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn identical_multisets_give_half() {
        let x = [3.0, 1.0, 4.0, 1.0, 5.0];
        let r = mann_whitney_u(&x, &x).unwrap();
        assert_eq!(r.u, 12.5);
    }

    #[test]
    fn exact_matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(1..=7);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.gen_range(0..5) as f64).collect();
            let got = mann_whitney_u(&x, &y).unwrap();
            assert!(got.exact);
            let want = brute_force_p(&x, &y);
            assert!((got.p - want).abs() < 1e-12, "{x:?} {y:?}: {} vs {want}", got.p);
        }
    }

    proptest! {
        #[test]
        fn u_complementarity(x in proptest::collection::vec(-5i32..5, 1..20), y in proptest::collection::vec(-5i32..5, 1..20)) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let y: Vec<f64> = y.into_iter().map(f64::from).collect();
            let a = mann_whitney_u(&x, &y).unwrap().u;
            let b = mann_whitney_u(&y, &x).unwrap().u;
            prop_assert_eq!(a + b, (x.len() * y.len()) as f64);
        }

        #[test]
        fn p_is_a_probability(x in proptest::collection::vec(-50.0f64..50.0, 1..30), y in proptest::collection::vec(-50.0f64..50.0, 1..30)) {
            let r = mann_whitney_u(&x, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.p));
        }
    }

    #[test]
    fn eight_by_eight_exact_and_approx_agree_mid_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        for _ in 0..500 {
            let x: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..8).map(|_| 0.5 + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
            let e = mann_whitney_u(&x, &y).unwrap();
            if (0.05..=0.95).contains(&e.p) {
                let a = mann_whitney_approx(&x, &y).unwrap();
                assert!((e.p - a.p).abs() <= 0.01, "{} vs {}", e.p, a.p);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn large_samples_use_the_approximation() {
        let x: Vec<f64> = (0..30).map(f64::from).collect();
        let y: Vec<f64> = (10..40).map(f64::from).collect();
        let r = mann_whitney_u(&x, &y).unwrap();
        assert!(!r.exact);
        assert!(r.p < 0.01);
        assert!(mann_whitney_u(&[], &y).is_err());
    }

    #[test]
    fn exact_when_other_side_is_large_but_total_small() {
        let x = [0.5, 1.5];
        let y: Vec<f64> = (0..50).map(f64::from).collect();
        let r = mann_whitney_u(&x, &y).unwrap();
        assert!(r.exact);
        // reversed roles go through the complement path
        let r2 = mann_whitney_u(&y, &x).unwrap();
        assert!(r2.exact);
        assert_eq!(r.u + r2.u, 100.0);
    }

    #[test]
    fn complement_path_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let x: Vec<f64> = (0..rng.gen_range(3..=7)).map(|_| rng.gen_range(0..4) as f64).collect();
            let y: Vec<f64> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..4) as f64).collect();
            let got = mann_whitney_u(&x, &y).unwrap().p;
            assert!((got - brute_force_p(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn proportion_test() {
        let (z, p) = two_proportion_test(60, 100, 40, 100).unwrap();
        assert!(z > 2.8 && z < 2.9);
        assert!(p < 0.01);
        let (_, p) = two_proportion_test(40, 100, 60, 100).unwrap();
        assert!(p > 0.99);
        assert!(two_proportion_test(3, 2, 1, 1).is_err());
    }

    fn sample(group: OriginGroup, layer: usize, s_mlp: f64) -> ScoreSample {
        ScoreSample {
            group,
            layer,
            corpus: "c".into(),
            s_res: Some(0.5),
            s_mlp: Some(s_mlp),
            s_att: None,
        }
    }

    #[test]
    fn single_group_gives_empty_report() {
        let s: Vec<ScoreSample> = (0..10).map(|i| sample(OriginGroup::FromRes, 1, i as f64)).collect();
        assert!(group_separation_report(&s, 0.001).unwrap().is_empty());
    }

    #[test]
    fn separated_groups_are_significant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = Vec::new();
        for layer in 1..6 {
            for _ in 0..40 {
                let z: f64 = StandardNormal.sample(&mut rng);
                s.push(sample(OriginGroup::FromRes, layer, z));
                let z: f64 = StandardNormal.sample(&mut rng);
                s.push(sample(OriginGroup::FromMlp, layer, 5.0 + z));
            }
        }
        let rep = group_separation_report(&s, 0.001).unwrap();
        let mlp = rep.iter().find(|e| e.score == ScoreKind::SMlp).unwrap();
        assert_eq!(mlp.tests, 5);
        assert_eq!(mlp.fraction, 1.0);
        assert_eq!(mlp.bucket, Bucket::AO);
        // constant s_res in both groups never separates
        let res = rep.iter().find(|e| e.score == ScoreKind::SRes).unwrap();
        assert_eq!(res.fraction, 0.0);
        assert_eq!(res.bucket, Bucket::AO);
        assert!(rep.iter().all(|e| e.score != ScoreKind::SAtt));
    }

    #[test]
    fn buckets() {
        assert_eq!(bucket(OriginGroup::FromResMlp, OriginGroup::FromMlp, ScoreKind::SMlp), Bucket::AB);
        assert_eq!(bucket(OriginGroup::FromRes, OriginGroup::FromNowhere, ScoreKind::SAtt), Bucket::IB);
        assert_eq!(bucket(OriginGroup::FromAtt, OriginGroup::FromRes, ScoreKind::SAtt), Bucket::AO);
    }

    fn fid(i: usize) -> FeatureId {
        FeatureId::new(SitePosition::res(1), i)
    }

    #[test]
    fn one_group_per_feature_is_identity() {
        let a: Vec<(FeatureId, OriginGroup)> = OriginGroup::ALL
            .iter()
            .enumerate()
            .flat_map(|(i, &g)| [(fid(i), g), (fid(i), g)])
            .collect();
        let m = intersection_matrix(&a);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(m.entries[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn alternating_feature() {
        let a = vec![
            (fid(0), OriginGroup::FromAtt),
            (fid(0), OriginGroup::FromResAtt),
            (fid(0), OriginGroup::FromAtt),
        ];
        let m = intersection_matrix(&a);
        assert_eq!(m.entries[OriginGroup::FromAtt.index()][OriginGroup::FromResAtt.index()], 1.0);
        assert_eq!(m.entries[OriginGroup::FromResAtt.index()][OriginGroup::FromAtt.index()], 1.0);
    }

    #[test]
    fn matches_direct_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a: Vec<(FeatureId, OriginGroup)> = (0..400)
            .map(|_| (fid(rng.gen_range(0..40)), OriginGroup::ALL[rng.gen_range(0..8)]))
            .collect();
        let m = intersection_matrix(&a);
        for (ia, &ga) in OriginGroup::ALL.iter().enumerate() {
            let with_a: BTreeSet<FeatureId> = a.iter().filter(|p| p.1 == ga).map(|p| p.0).collect();
            for (ib, &gb) in OriginGroup::ALL.iter().enumerate() {
                if with_a.is_empty() {
                    assert_eq!(m.entries[ia][ib], 0.0);
                    continue;
                }
                let also = with_a
                    .iter()
                    .filter(|f| ia == ib || a.iter().any(|p| p.0 == **f && p.1 == gb))
                    .count();
                assert!((m.entries[ia][ib] - also as f64 / with_a.len() as f64).abs() < 1e-15);
                assert!((0.0..=1.0).contains(&m.entries[ia][ib]));
            }
        }
    }

    #[test]
    fn sampling_respects_protocol() {
        let corpus: Vec<String> = (0..20).map(|i| format!("text number {i} with words")).collect();
        let p = SampleProtocol { texts: 10, tokens_per_text: 5, exclude_bos: true, seed: 4 };
        let ctx = sample_contexts(&corpus, 64, &p);
        assert_eq!(ctx.len(), 10);
        for (_, toks, pos) in &ctx {
            assert_eq!(pos.len(), 5);
            assert!(pos.iter().all(|&t| t >= 1 && t < toks.len()));
            let uniq: BTreeSet<_> = pos.iter().collect();
            assert_eq!(uniq.len(), 5);
        }
        assert_eq!(ctx, sample_contexts(&corpus, 64, &p));
    }
}
