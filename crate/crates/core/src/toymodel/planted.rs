//! Synthetic bundles with known feature provenance.
//!
//! Every hidden state of the generated model is a non-negative combination
//! of orthonormal "concept" directions that are orthogonal to the all-ones
//! vector, so layer norm only rescales them. Token embeddings carry base
//! concepts; MLP and attention blocks write new concepts when they read a
//! trigger concept. Each dictionary holds one live column per concept present
//! at its site plus dead columns (near-duplicate decoys, random distractors,
//! filler) in a shuffled order.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{ActivationKind, FeatureDictionary, FeatureId, ModelBundle, SitePosition};

use super::{encode_record, NormKind, ToyConfig, ToyTransformer, BOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Translated,
    MlpWritten,
    AttWritten,
    CoWritten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub layers: usize,
    pub d: usize,
    /// Dictionary size; `None` picks the smallest size that fits every site.
    pub n_features: Option<usize>,
    pub base_concepts: usize,
    pub mlp_written_per_layer: usize,
    pub att_written_per_layer: usize,
    pub co_written_per_layer: usize,
    pub decoys_per_feature: usize,
    /// Cosine of decoys to their concept lies in `[decoy_cosine_min, decoy_cosine_max]`.
    pub decoy_cosine_min: f64,
    pub decoy_cosine_max: f64,
    pub distractors: usize,
    pub noise_sigma: f64,
    pub threshold: f32,
    pub theme: bool,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d: 64,
            n_features: None,
            base_concepts: 16,
            mlp_written_per_layer: 2,
            att_written_per_layer: 1,
            co_written_per_layer: 1,
            decoys_per_feature: 0,
            decoy_cosine_min: 0.80,
            decoy_cosine_max: 0.92,
            distractors: 16,
            noise_sigma: 0.0,
            threshold: 0.5,
            theme: true,
            seed: 0,
        }
    }
}

/// A RES feature with a known origin at its layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFeature {
    pub feature: FeatureId,
    pub mechanism: Mechanism,
    pub concept: usize,
    /// Token sequence on which the mechanism fires at position `probe_position`.
    pub probe: Vec<u32>,
    pub probe_position: usize,
    /// Live columns carrying the same concept at the predecessor sites.
    pub sources: Vec<FeatureId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedMatch {
    pub target: FeatureId,
    pub source: FeatureId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theme {
    pub concept: usize,
    pub token_class: Vec<u32>,
    /// RES column carrying the theme direction, one per layer.
    pub features: Vec<FeatureId>,
}

/// Where a concept is live: used by probes and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSite {
    pub concept: usize,
    pub feature: FeatureId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub features: Vec<PlantedFeature>,
    /// Ground-truth RES(L) → RES(L−1) correspondences.
    pub matches: Vec<PlantedMatch>,
    /// Every live column in the bundle.
    pub live: Vec<ProbeSite>,
    pub theme: Option<Theme>,
}

impl PlantedTruth {
    pub fn live_concept(&self, feature: FeatureId) -> Option<usize> {
        self.live.iter().find(|p| p.feature == feature).map(|p| p.concept)
    }
}

#[derive(Debug, Clone)]
enum ConceptRole {
    Base,
    Written {
        layer: usize,
        mechanism: Mechanism,
        mlp_trigger: Option<usize>,
        att_trigger: Option<usize>,
    },
    Theme,
}

#[derive(Debug, Clone, Copy)]
enum ColumnKind {
    Live(usize),
    Dead,
}

const MLP_READ_GAIN: f32 = 0.5;
const MLP_BIAS: f32 = -0.25;
const MLP_WRITE_GAIN: f32 = 1.0;
const ATT_READ_GAIN: f32 = 1.0;
const ATT_WRITE_GAIN: f32 = 1.0;
const THEME_LOGIT_GAIN: f32 = 1.5;

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Orthonormal vectors orthogonal to the all-ones direction.
fn concept_basis(rng: &mut impl Rng, d: usize, count: usize) -> Vec<Vec<f64>> {
    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let mut basis: Vec<Vec<f64>> = vec![ones];
    while basis.len() < count + 1 {
        let mut v = random_unit(rng, d);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        if dot(&v, &v) > 1e-6 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis.remove(0);
    basis
}

fn primary_concept(token: u32, k: usize) -> usize {
    token as usize % k
}

fn secondary_concept(token: u32, k: usize) -> Option<usize> {
    if token % 2 == 1 && k > 1 {
        let s = (token as usize * 7 + 3) % k;
        (s != primary_concept(token, k)).then_some(s)
    } else {
        None
    }
}

fn token_magnitude(token: u32, k: usize) -> f32 {
    2.0 + ((token as usize / k) % 4) as f32 * 0.5
}

/// Smallest non-BOS token whose primary concept is `c`.
fn probe_token_for(c: usize, k: usize) -> u32 {
    (c..256).step_by(k).find(|&t| t as u32 != BOS).expect("k < 256") as u32
}

/// Generate a bundle with planted mechanisms and its ground truth.
pub fn synth_planted_bundle(cfg: &PlantedConfig) -> Result<(ModelBundle, PlantedTruth)> {
    if !(cfg.noise_sigma >= 0.0) {
        return Err(Error::invalid("noise sigma must be >= 0"));
    }
    if cfg.layers == 0 || cfg.base_concepts == 0 {
        return Err(Error::invalid("need at least one layer and one base concept"));
    }
    if cfg.base_concepts >= 256 {
        return Err(Error::invalid("base_concepts must be < 256 (byte vocabulary)"));
    }
    if cfg.d % 2 != 0 {
        return Err(Error::invalid("planted models use 2 heads; d must be even"));
    }
    if !(0.0..1.0).contains(&cfg.decoy_cosine_min) || cfg.decoy_cosine_max < cfg.decoy_cosine_min || cfg.decoy_cosine_max >= 1.0 {
        return Err(Error::invalid("decoy cosines must satisfy 0 <= min <= max < 1"));
    }
    let k = cfg.base_concepts;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // concept roles
    let mut roles: Vec<ConceptRole> = vec![ConceptRole::Base; k];
    let mut att_rows = vec![0usize; cfg.layers];
    let mut writers_per_layer = vec![Vec::new(); cfg.layers];
    for layer in 1..cfg.layers {
        let push = |roles: &mut Vec<ConceptRole>, mech: Mechanism, rng: &mut ChaCha8Rng| {
            let (mlp_trigger, att_trigger) = match mech {
                Mechanism::MlpWritten => (Some(rng.gen_range(0..k)), None),
                Mechanism::AttWritten => (None, Some(rng.gen_range(0..k))),
                Mechanism::CoWritten => {
                    // both triggers from one token so a single probe fires both
                    let odd: Vec<u32> = (1..256u32)
                        .filter(|&t| secondary_concept(t, k).is_some())
                        .collect();
                    let t = *odd.choose(rng).expect("k > 1 for co-written");
                    (Some(primary_concept(t, k)), secondary_concept(t, k))
                }
                Mechanism::Translated => unreachable!(),
            };
            roles.push(ConceptRole::Written {
                layer,
                mechanism: mech,
                mlp_trigger,
                att_trigger,
            });
            roles.len() - 1
        };
        for _ in 0..cfg.mlp_written_per_layer {
            let c = push(&mut roles, Mechanism::MlpWritten, &mut rng);
            writers_per_layer[layer].push(c);
        }
        for _ in 0..cfg.att_written_per_layer {
            let c = push(&mut roles, Mechanism::AttWritten, &mut rng);
            writers_per_layer[layer].push(c);
        }
        if k > 1 {
            for _ in 0..cfg.co_written_per_layer {
                let c = push(&mut roles, Mechanism::CoWritten, &mut rng);
                writers_per_layer[layer].push(c);
            }
        }
    }
    let theme_concept = cfg.theme.then(|| {
        roles.push(ConceptRole::Theme);
        roles.len() - 1
    });
    let n_concepts = roles.len();
    if n_concepts > cfg.d - 1 {
        return Err(Error::invalid(format!(
            "mechanism unrealizable: {n_concepts} concepts need d > {n_concepts}, got d = {}",
            cfg.d
        )));
    }
    let concepts = concept_basis(&mut rng, cfg.d, n_concepts);

    // which concepts are live at each site
    let mut live_at: BTreeMap<SitePosition, Vec<usize>> = BTreeMap::new();
    for layer in 0..cfg.layers {
        let mut res: Vec<usize> = Vec::new();
        let mut mlp = Vec::new();
        let mut att = Vec::new();
        for (c, role) in roles.iter().enumerate() {
            match role {
                ConceptRole::Base | ConceptRole::Theme => res.push(c),
                ConceptRole::Written {
                    layer: wl,
                    mlp_trigger,
                    att_trigger,
                    ..
                } => {
                    if *wl <= layer {
                        res.push(c);
                    }
                    if *wl == layer {
                        if mlp_trigger.is_some() {
                            mlp.push(c);
                        }
                        if att_trigger.is_some() {
                            att.push(c);
                        }
                    }
                }
            }
        }
        live_at.insert(SitePosition::res(layer), res);
        live_at.insert(SitePosition::mlp(layer), mlp);
        live_at.insert(SitePosition::att(layer), att);
    }

    let needed = live_at
        .values()
        .map(|v| v.len() * (1 + cfg.decoys_per_feature) + cfg.distractors)
        .max()
        .unwrap_or(1)
        .max(1);
    let n_features = match cfg.n_features {
        Some(n) if n < needed => {
            return Err(Error::invalid(format!(
                "n_features = {n} is too small; the planted layout needs {needed}"
            )))
        }
        Some(n) => n,
        None => needed,
    };

    let mut bundle = ModelBundle::new(format!("planted-{}", cfg.seed), cfg.d, cfg.layers);
    bundle.seed = Some(cfg.seed);
    bundle.provenance = format!("synth_planted_bundle {}", serde_json::to_string(cfg)?);
    let mut index_of: BTreeMap<(SitePosition, usize), usize> = BTreeMap::new();
    let mut live_sites = Vec::new();

    for (&pos, live) in &live_at {
        let mut drng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(1 + pos.layer as u64 * 3 + pos.site as u64)),
        );
        let perturb = |v: &[f64], r: &mut ChaCha8Rng| -> Vec<f64> {
            let mut out: Vec<f64> = v
                .iter()
                .map(|&x| x + cfg.noise_sigma * Distribution::<f64>::sample(&StandardNormal, r))
                .collect();
            normalize(&mut out);
            out
        };
        let mut columns: Vec<(ColumnKind, Vec<f64>)> = Vec::with_capacity(n_features);
        for &c in live {
            let base = &concepts[c];
            columns.push((ColumnKind::Live(c), perturb(base, &mut drng)));
            for _ in 0..cfg.decoys_per_feature {
                let rho = drng.gen_range(cfg.decoy_cosine_min..=cfg.decoy_cosine_max);
                let mut g = random_unit(&mut drng, cfg.d);
                let p = dot(&g, base);
                g.iter_mut().zip(base).for_each(|(x, y)| *x -= p * y);
                normalize(&mut g);
                let decoy: Vec<f64> = base
                    .iter()
                    .zip(&g)
                    .map(|(b, o)| rho * b + (1.0 - rho * rho).sqrt() * o)
                    .collect();
                columns.push((ColumnKind::Dead, perturb(&decoy, &mut drng)));
            }
        }
        while columns.len() < n_features {
            columns.push((ColumnKind::Dead, random_unit(&mut drng, cfg.d)));
        }
        columns.shuffle(&mut drng);

        let mut decoder = Array2::<f32>::zeros((cfg.d, n_features));
        let mut encoder = Array2::<f32>::zeros((n_features, cfg.d));
        for (j, (kind, v)) in columns.iter().enumerate() {
            for i in 0..cfg.d {
                decoder[[i, j]] = v[i] as f32;
            }
            if let ColumnKind::Live(c) = kind {
                for i in 0..cfg.d {
                    encoder[[j, i]] = v[i] as f32;
                }
                index_of.insert((pos, *c), j);
                live_sites.push(ProbeSite {
                    concept: *c,
                    feature: FeatureId::new(pos, j),
                });
                let label = match &roles[*c] {
                    ConceptRole::Base => format!("base concept {c}"),
                    ConceptRole::Theme => format!("theme concept {c}"),
                    ConceptRole::Written { layer, mechanism, .. } => {
                        format!("concept {c} written at layer {layer} ({mechanism:?})")
                    }
                };
                bundle.annotations.insert(FeatureId::new(pos, j).to_string(), label);
            }
        }
        let dict = FeatureDictionary::new(
            pos,
            decoder,
            encoder,
            Array1::zeros(n_features),
            Array1::zeros(cfg.d),
            Some(Array1::from_elem(n_features, cfg.threshold)),
            ActivationKind::JumpRelu,
        )?;
        bundle.insert(dict)?;
    }

    // model weights
    let writers: usize = writers_per_layer.iter().map(Vec::len).max().unwrap_or(0);
    let toy = ToyConfig {
        layer_count: cfg.layers,
        d: cfg.d,
        head_count: 2,
        vocab_size: 256,
        mlp_dim: writers.max(1),
        max_positions: 512,
        norm: NormKind::LayerNorm,
        ln_eps: 1e-5,
        seed: cfg.seed,
    };
    let mut model = ToyTransformer::zeros(toy)?;
    for t in 1..256u32 {
        let mut e = vec![0.0f64; cfg.d];
        let p = primary_concept(t, k);
        let mag = token_magnitude(t, k) as f64;
        e.iter_mut().zip(&concepts[p]).for_each(|(x, y)| *x += mag * y);
        if let Some(s) = secondary_concept(t, k) {
            e.iter_mut().zip(&concepts[s]).for_each(|(x, y)| *x += y);
        }
        for (i, v) in e.into_iter().enumerate() {
            model.embed[[t as usize, i]] = v as f32;
        }
    }
    for (layer, ws) in writers_per_layer.iter().enumerate() {
        let w = &mut model.layers[layer];
        let mut unit = 0;
        for &c in ws {
            let ConceptRole::Written { mlp_trigger, att_trigger, .. } = &roles[c] else {
                unreachable!()
            };
            if let Some(u) = mlp_trigger {
                for i in 0..cfg.d {
                    w.w_in[[unit, i]] = MLP_READ_GAIN * concepts[*u][i] as f32;
                    w.w_out[[i, unit]] = MLP_WRITE_GAIN * concepts[c][i] as f32;
                }
                w.b_in[unit] = MLP_BIAS;
                unit += 1;
            }
            if let Some(u) = att_trigger {
                let r = att_rows[layer];
                att_rows[layer] += 1;
                for i in 0..cfg.d {
                    w.w_v[[r, i]] = ATT_READ_GAIN * concepts[*u][i] as f32;
                    w.w_o[[i, r]] = ATT_WRITE_GAIN * concepts[c][i] as f32;
                }
            }
        }
    }
    let mut urng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xabcdef));
    let theme_tokens: Vec<u32> = (b'0'..=b'9').map(u32::from).collect();
    for t in 0..256usize {
        let mut row = vec![0.0f64; cfg.d];
        for c in 0..n_concepts {
            if Some(c) == theme_concept {
                continue;
            }
            let w: f64 = 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut urng);
            row.iter_mut().zip(&concepts[c]).for_each(|(x, y)| *x += w * y);
        }
        if let Some(tc) = theme_concept {
            if theme_tokens.contains(&(t as u32)) {
                row.iter_mut()
                    .zip(&concepts[tc])
                    .for_each(|(x, y)| *x += THEME_LOGIT_GAIN as f64 * y);
            }
        }
        for (i, v) in row.into_iter().enumerate() {
            model.unembed[[t, i]] = v as f32;
        }
    }

    // ground truth
    let feature_at = |pos: SitePosition, c: usize| index_of.get(&(pos, c)).map(|&j| FeatureId::new(pos, j));
    let mut matches = Vec::new();
    for layer in 1..cfg.layers {
        for &c in &live_at[&SitePosition::res(layer)] {
            if let (Some(t), Some(s)) = (feature_at(SitePosition::res(layer), c), feature_at(SitePosition::res(layer - 1), c)) {
                matches.push(PlantedMatch { target: t, source: s });
            }
        }
    }
    let mut features = Vec::new();
    for layer in 1..cfg.layers {
        for &c in &live_at[&SitePosition::res(layer)] {
            let target = feature_at(SitePosition::res(layer), c).expect("live res column");
            let (mechanism, probe_tok) = match &roles[c] {
                ConceptRole::Theme => continue,
                ConceptRole::Base => (Mechanism::Translated, probe_token_for(c, k)),
                ConceptRole::Written {
                    layer: wl,
                    mechanism,
                    mlp_trigger,
                    att_trigger,
                } => {
                    let trig = mlp_trigger.or(*att_trigger).expect("writer has a trigger");
                    let tok = match mechanism {
                        Mechanism::CoWritten => (1..256u32)
                            .find(|&t| {
                                primary_concept(t, k) == mlp_trigger.unwrap()
                                    && secondary_concept(t, k) == *att_trigger
                            })
                            .expect("co-written trigger token exists"),
                        _ => probe_token_for(trig, k),
                    };
                    if *wl == layer {
                        (*mechanism, tok)
                    } else {
                        (Mechanism::Translated, tok)
                    }
                }
            };
            let mut sources = Vec::new();
            let pred_sites: &[SitePosition] = match mechanism {
                Mechanism::Translated => &[SitePosition::res(layer - 1)],
                Mechanism::MlpWritten => &[SitePosition::mlp(layer)],
                Mechanism::AttWritten => &[SitePosition::att(layer)],
                Mechanism::CoWritten => &[SitePosition::mlp(layer), SitePosition::att(layer)],
            };
            for &p in pred_sites {
                sources.extend(feature_at(p, c));
            }
            features.push(PlantedFeature {
                feature: target,
                mechanism,
                concept: c,
                probe: vec![BOS, probe_tok],
                probe_position: 1,
                sources,
            });
        }
    }
    let theme = theme_concept.map(|tc| Theme {
        concept: tc,
        token_class: theme_tokens.clone(),
        features: (0..cfg.layers)
            .filter_map(|l| feature_at(SitePosition::res(l), tc))
            .collect(),
    });

    bundle.model = Some(model);
    let truth = PlantedTruth {
        features,
        matches,
        live: live_sites,
        theme,
    };
    verify(&bundle, &truth)?;
    Ok((bundle, truth))
}

/// One forward pass per distinct probe; every planted mechanism must fire.
fn verify(bundle: &ModelBundle, truth: &PlantedTruth) -> Result<()> {
    let model = bundle.model()?;
    let mut cache: BTreeMap<Vec<u32>, super::SaeActivations> = BTreeMap::new();
    for pf in &truth.features {
        if !cache.contains_key(&pf.probe) {
            let rec = model.forward(&pf.probe, &[])?;
            cache.insert(pf.probe.clone(), encode_record(bundle, &rec)?);
        }
        let acts = &cache[&pf.probe];
        let t = pf.probe_position;
        let ok = acts.is_active(pf.feature.position(), t, pf.feature.index)
            && pf
                .sources
                .iter()
                .all(|s| acts.is_active(s.position(), t, s.index));
        if !ok {
            return Err(Error::invalid(format!(
                "mechanism unrealizable: {:?} feature {} does not fire on its probe",
                pf.mechanism, pf.feature
            )));
        }
    }
    Ok(())
}
