//! Desk-scale pre-norm decoder-only transformer with hook points.
//!
//! Hooks per layer `l`: the layer input (`res_pre`), attention output,
//! MLP output and the residual stream after the layer. Interventions can
//! rewrite any hook value; the residual identity
//! `res_post = res_pre + att_out + mlp_out` holds on the (possibly modified)
//! values at every layer.

mod planted;
pub mod sae;
mod sampling;
mod training;

pub use planted::{
    synth_planted_bundle, Mechanism, PlantedConfig, PlantedFeature, PlantedMatch, PlantedTruth,
    ProbeSite, Theme as PlantedTheme,
};
pub use sae::{encode_positions, encode_record, sample_activations, sae_decode, sae_encode, sae_encode_batch, SaeActivations};
pub use sampling::{generate, sample_next, SamplerConfig};
pub use training::{gradient_check, train_sae, train_transcoder, TrainConfig, TrainedDictionary};

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{Site, SitePosition};

/// Byte-level vocabulary; token 0 doubles as BOS.
pub const BOS: u32 = 0;

pub fn tokenize(text: &str) -> Vec<u32> {
    std::iter::once(BOS)
        .chain(text.bytes().map(u32::from))
        .collect()
}

pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| (t & 0xff) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub layer_count: usize,
    pub d: usize,
    pub head_count: usize,
    pub vocab_size: usize,
    pub mlp_dim: usize,
    pub max_positions: usize,
    pub norm: NormKind,
    pub ln_eps: f32,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            layer_count: 4,
            d: 32,
            head_count: 2,
            vocab_size: 256,
            mlp_dim: 128,
            max_positions: 512,
            norm: NormKind::LayerNorm,
            ln_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ToyConfig {
    fn validate(&self) -> Result<()> {
        if self.layer_count == 0 || self.d == 0 || self.vocab_size == 0 || self.head_count == 0 {
            return Err(Error::invalid("toy config dimensions must be >= 1"));
        }
        if self.d % self.head_count != 0 {
            return Err(Error::invalid(format!(
                "d = {} is not divisible by head_count = {}",
                self.d, self.head_count
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.head_count
    }
}

/// Weights of one block. Matrices map column vectors: `y = W x`, so shapes
/// are `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Array2<f32>,
    pub w_k: Array2<f32>,
    pub w_v: Array2<f32>,
    pub w_o: Array2<f32>,
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

impl LayerWeights {
    fn zeros(c: &ToyConfig) -> Self {
        Self {
            w_q: Array2::zeros((c.d, c.d)),
            w_k: Array2::zeros((c.d, c.d)),
            w_v: Array2::zeros((c.d, c.d)),
            w_o: Array2::zeros((c.d, c.d)),
            w_in: Array2::zeros((c.mlp_dim, c.d)),
            b_in: Array1::zeros(c.mlp_dim),
            w_out: Array2::zeros((c.d, c.mlp_dim)),
            b_out: Array1::zeros(c.d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    config: ToyConfig,
    pub embed: Array2<f32>,
    pub pos_embed: Array2<f32>,
    pub layers: Vec<LayerWeights>,
    pub unembed: Array2<f32>,
}

/// Where an intervention acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Hook {
    /// Token + position embedding, before layer 0.
    Embed,
    AttOut(usize),
    MlpOut(usize),
    /// Residual stream leaving layer `l` (input of layer `l + 1`).
    Resid(usize),
}

impl Hook {
    pub fn for_site(pos: SitePosition) -> Hook {
        match pos.site {
            Site::Res => Hook::Resid(pos.layer),
            Site::Mlp => Hook::MlpOut(pos.layer),
            Site::Att => Hook::AttOut(pos.layer),
        }
    }

    /// First layer whose computation depends on this hook.
    pub fn entry_layer(self) -> usize {
        match self {
            Hook::Embed => 0,
            Hook::AttOut(l) | Hook::MlpOut(l) => l,
            Hook::Resid(l) => l + 1,
        }
    }
}

/// Rewrites a hook value in place. `hidden` is `T × d` (all positions).
pub trait Intervention: Send + Sync {
    fn hooks(&self) -> Vec<Hook>;
    fn apply(&self, hook: Hook, hidden: &mut Array2<f32>);
}

fn apply_all(interventions: &[&dyn Intervention], hook: Hook, hidden: &mut Array2<f32>) {
    for iv in interventions {
        if iv.hooks().contains(&hook) {
            iv.apply(hook, hidden);
        }
    }
}

/// Hidden states captured at every hook for one token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub tokens: Vec<u32>,
    /// `L × T × d`: input of each layer.
    pub res_pre: Array3<f32>,
    pub att_out: Array3<f32>,
    pub mlp_out: Array3<f32>,
    /// Layer output as computed, before any `Resid` intervention.
    pub res_post: Array3<f32>,
    /// Residual stream after `Resid` interventions; what flows onward.
    pub resid: Array3<f32>,
    /// `T × vocab`.
    pub logits: Array2<f32>,
}

impl ActivationRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn layer_count(&self) -> usize {
        self.res_pre.len_of(Axis(0))
    }

    /// Hidden states (`T × d`) read by the dictionary at `pos`.
    pub fn hidden(&self, pos: SitePosition) -> ArrayView2<'_, f32> {
        let l = pos.layer;
        match pos.site {
            Site::Res => self.resid.index_axis(Axis(0), l),
            Site::Mlp => self.mlp_out.index_axis(Axis(0), l),
            Site::Att => self.att_out.index_axis(Axis(0), l),
        }
    }

    /// Largest deviation from `res_post = res_pre + att_out + mlp_out`.
    pub fn residual_identity_error(&self) -> f32 {
        let sum = &self.res_pre + &self.att_out + &self.mlp_out;
        sum.iter()
            .zip(self.res_post.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Mean next-token cross-entropy over the recorded continuation.
    pub fn next_token_loss(&self) -> f64 {
        let t = self.tokens.len();
        if t < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for pos in 0..t - 1 {
            let row = self.logits.row(pos);
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
            let lse = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[self.tokens[pos + 1] as usize] as f64;
        }
        total / (t - 1) as f64
    }
}

impl ToyTransformer {
    pub fn zeros(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layer_count).map(|_| LayerWeights::zeros(&config)).collect();
        Ok(Self {
            embed: Array2::zeros((config.vocab_size, config.d)),
            pos_embed: Array2::zeros((config.max_positions, config.d)),
            unembed: Array2::zeros((config.vocab_size, config.d)),
            layers,
            config,
        })
    }

    /// Gaussian initialization, deterministic in `config.seed`.
    pub fn random(config: ToyConfig) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(m.config.seed);
        let d = m.config.d as f32;
        let mut fill = |a: &mut Array2<f32>, std: f32| {
            let n = Normal::new(0.0, std).expect("finite std");
            a.mapv_inplace(|_| n.sample(&mut rng));
        };
        fill(&mut m.embed, 1.0);
        fill(&mut m.pos_embed, 0.1);
        fill(&mut m.unembed, 1.0 / d.sqrt());
        let mlp = m.config.mlp_dim as f32;
        for layer in &mut m.layers {
            fill(&mut layer.w_q, 1.0 / d.sqrt());
            fill(&mut layer.w_k, 1.0 / d.sqrt());
            fill(&mut layer.w_v, 1.0 / d.sqrt());
            fill(&mut layer.w_o, 0.5 / d.sqrt());
            fill(&mut layer.w_in, 1.0 / d.sqrt());
            fill(&mut layer.w_out, 0.5 / mlp.sqrt());
        }
        Ok(m)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        fn mat(name: String, a: &Array2<f32>) -> (String, Vec<usize>, Vec<f32>) {
            (name, a.shape().to_vec(), a.iter().copied().collect())
        }
        fn vec1(name: String, a: &Array1<f32>) -> (String, Vec<usize>, Vec<f32>) {
            (name, vec![a.len()], a.to_vec())
        }
        let mut out = vec![
            mat("embed".into(), &self.embed),
            mat("pos_embed".into(), &self.pos_embed),
            mat("unembed".into(), &self.unembed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(mat(format!("l{i}_w_q"), &l.w_q));
            out.push(mat(format!("l{i}_w_k"), &l.w_k));
            out.push(mat(format!("l{i}_w_v"), &l.w_v));
            out.push(mat(format!("l{i}_w_o"), &l.w_o));
            out.push(mat(format!("l{i}_w_in"), &l.w_in));
            out.push(vec1(format!("l{i}_b_in"), &l.b_in));
            out.push(mat(format!("l{i}_w_out"), &l.w_out));
            out.push(vec1(format!("l{i}_b_out"), &l.b_out));
        }
        out
    }

    pub fn from_named_tensors(
        config: ToyConfig,
        tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    ) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let expected: Vec<(String, Vec<usize>)> = m
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Manifest(format!(
                "model expects {} tensors, manifest lists {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, got_shape, data)) in expected.into_iter().zip(tensors) {
            if name != got_name || shape != got_shape {
                return Err(Error::ShapeMismatch {
                    tensor: format!("model_{got_name}"),
                    expected: shape.iter().product(),
                    found: got_shape.iter().product(),
                });
            }
            m.set_tensor(&name, data);
        }
        Ok(m)
    }

    fn set_tensor(&mut self, name: &str, data: Vec<f32>) {
        let assign2 = |dst: &mut Array2<f32>, data: Vec<f32>| {
            let shape = dst.raw_dim();
            *dst = Array2::from_shape_vec(shape, data).expect("shape checked");
        };
        match name {
            "embed" => assign2(&mut self.embed, data),
            "pos_embed" => assign2(&mut self.pos_embed, data),
            "unembed" => assign2(&mut self.unembed, data),
            _ => {
                let (idx, field) = name[1..].split_once('_').expect("layer tensor name");
                let l = &mut self.layers[idx.parse::<usize>().expect("layer index")];
                match field {
                    "w_q" => assign2(&mut l.w_q, data),
                    "w_k" => assign2(&mut l.w_k, data),
                    "w_v" => assign2(&mut l.w_v, data),
                    "w_o" => assign2(&mut l.w_o, data),
                    "w_in" => assign2(&mut l.w_in, data),
                    "w_out" => assign2(&mut l.w_out, data),
                    "b_in" => l.b_in = Array1::from(data),
                    "b_out" => l.b_out = Array1::from(data),
                    other => unreachable!("unknown layer tensor {other}"),
                }
            }
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_positions {
            return Err(Error::OutOfRange {
                what: "sequence length",
                index: tokens.len(),
                limit: self.config.max_positions,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token id",
                index: t as usize,
                limit: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Full forward pass with interventions applied at their hooks.
    pub fn forward(
        &self,
        tokens: &[u32],
        interventions: &[&dyn Intervention],
    ) -> Result<ActivationRecord> {
        self.check_tokens(tokens)?;
        let (l, t, d) = (self.config.layer_count, tokens.len(), self.config.d);
        let mut rec = ActivationRecord {
            tokens: tokens.to_vec(),
            res_pre: Array3::zeros((l, t, d)),
            att_out: Array3::zeros((l, t, d)),
            mlp_out: Array3::zeros((l, t, d)),
            res_post: Array3::zeros((l, t, d)),
            resid: Array3::zeros((l, t, d)),
            logits: Array2::zeros((t, self.config.vocab_size)),
        };
        let mut x = Array2::zeros((t, d));
        for (i, &tok) in tokens.iter().enumerate() {
            let e = &self.embed.row(tok as usize) + &self.pos_embed.row(i);
            x.row_mut(i).assign(&e);
        }
        apply_all(interventions, Hook::Embed, &mut x);
        self.run_layers(&mut rec, 0, x, interventions);
        Ok(rec)
    }

    /// Re-run from `start_layer`, reusing everything below it from `base`.
    /// Interventions may only touch hooks at or above `start_layer`
    /// (`Resid(start_layer - 1)` included). Bit-identical to [`Self::forward`]
    /// with the same interventions.
    pub fn forward_from(
        &self,
        base: &ActivationRecord,
        start_layer: usize,
        interventions: &[&dyn Intervention],
    ) -> Result<ActivationRecord> {
        if start_layer >= self.config.layer_count {
            return Err(Error::OutOfRange {
                what: "start layer",
                index: start_layer,
                limit: self.config.layer_count,
            });
        }
        for iv in interventions {
            for h in iv.hooks() {
                if h.entry_layer() < start_layer {
                    return Err(Error::invalid(format!(
                        "intervention at {h:?} precedes start layer {start_layer}"
                    )));
                }
            }
        }
        if start_layer == 0 {
            return self.forward(&base.tokens, interventions);
        }
        let mut rec = base.clone();
        let prev = start_layer - 1;
        let mut x = base.res_post.index_axis(Axis(0), prev).to_owned();
        apply_all(interventions, Hook::Resid(prev), &mut x);
        rec.resid.index_axis_mut(Axis(0), prev).assign(&x);
        self.run_layers(&mut rec, start_layer, x, interventions);
        Ok(rec)
    }

    fn run_layers(
        &self,
        rec: &mut ActivationRecord,
        start: usize,
        mut x: Array2<f32>,
        interventions: &[&dyn Intervention],
    ) {
        let c = &self.config;
        for (li, w) in self.layers.iter().enumerate().skip(start) {
            rec.res_pre.index_axis_mut(Axis(0), li).assign(&x);

            let normed = self.norm(&x);
            let mut att = self.attention(w, &normed);
            apply_all(interventions, Hook::AttOut(li), &mut att);
            let mid = &x + &att;

            let normed_mid = self.norm(&mid);
            let mut hidden = normed_mid.dot(&w.w_in.t());
            hidden += &w.b_in;
            hidden.mapv_inplace(|v| v.max(0.0));
            let mut mlp = hidden.dot(&w.w_out.t());
            mlp += &w.b_out;
            apply_all(interventions, Hook::MlpOut(li), &mut mlp);
            let post = &mid + &mlp;

            rec.att_out.index_axis_mut(Axis(0), li).assign(&att);
            rec.mlp_out.index_axis_mut(Axis(0), li).assign(&mlp);
            rec.res_post.index_axis_mut(Axis(0), li).assign(&post);

            x = post;
            apply_all(interventions, Hook::Resid(li), &mut x);
            rec.resid.index_axis_mut(Axis(0), li).assign(&x);
        }
        let last = self.norm(&x);
        rec.logits = last.dot(&self.unembed.t());
        debug_assert_eq!(rec.logits.ncols(), c.vocab_size);
    }

    fn norm(&self, x: &Array2<f32>) -> Array2<f32> {
        match self.config.norm {
            NormKind::None => x.clone(),
            NormKind::LayerNorm => {
                let eps = self.config.ln_eps;
                let mut out = x.clone();
                for mut row in out.rows_mut() {
                    let n = row.len() as f32;
                    let mean = row.sum() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    row.mapv_inplace(|v| (v - mean) * inv);
                }
                out
            }
        }
    }

    fn attention(&self, w: &LayerWeights, x: &Array2<f32>) -> Array2<f32> {
        let c = &self.config;
        let t = x.nrows();
        let hd = c.head_dim();
        let q = x.dot(&w.w_q.t());
        let k = x.dot(&w.w_k.t());
        let v = x.dot(&w.w_v.t());
        let scale = 1.0 / (hd as f32).sqrt();
        let mut mixed = Array2::<f32>::zeros((t, c.d));
        let mut weights = vec![0.0f32; t];
        for h in 0..c.head_count {
            let cols = s![.., h * hd..(h + 1) * hd];
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            for i in 0..t {
                let qi = qh.row(i);
                let mut max = f32::NEG_INFINITY;
                for j in 0..=i {
                    let sc = qi.dot(&kh.row(j)) * scale;
                    weights[j] = sc;
                    max = max.max(sc);
                }
                let mut total = 0.0;
                for wj in weights.iter_mut().take(i + 1) {
                    *wj = (*wj - max).exp();
                    total += *wj;
                }
                let mut out = mixed.slice_mut(s![i, h * hd..(h + 1) * hd]);
                for j in 0..=i {
                    out.scaled_add(weights[j] / total, &vh.row(j));
                }
            }
        }
        mixed.dot(&w.w_o.t())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Slow reference forward pass in f64 with explicit loops.
    fn reference_forward(m: &ToyTransformer, tokens: &[u32]) -> Vec<Vec<Vec<f64>>> {
        let c = m.config();
        let d = c.d;
        let to64 = |a: &Array2<f32>| -> Vec<Vec<f64>> {
            a.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
        };
        let matvec = |w: &Vec<Vec<f64>>, x: &[f64]| -> Vec<f64> {
            w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
        };
        let ln = |x: &[f64]| -> Vec<f64> {
            if c.norm == NormKind::None {
                return x.to_vec();
            }
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            x.iter().map(|v| (v - mean) / (var + c.ln_eps as f64).sqrt()).collect()
        };
        let mut xs: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| (0..d).map(|j| (m.embed[[t as usize, j]] + m.pos_embed[[i, j]]) as f64).collect())
            .collect();
        let mut posts = Vec::new();
        for w in &m.layers {
            let (wq, wk, wv, wo) = (to64(&w.w_q), to64(&w.w_k), to64(&w.w_v), to64(&w.w_o));
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| ln(x)).collect();
            let q: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&wq, x)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&wk, x)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&wv, x)).collect();
            let hd = c.head_dim();
            let mut mids = Vec::new();
            for i in 0..xs.len() {
                let mut concat = vec![0.0; d];
                for h in 0..c.head_count {
                    let r = h * hd..(h + 1) * hd;
                    let sc: Vec<f64> = (0..=i)
                        .map(|j| {
                            q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = sc.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..=i {
                        for (o, idx) in r.clone().enumerate() {
                            concat[h * hd + o] += e[j] / z * v[j][idx];
                        }
                    }
                }
                let att = matvec(&wo, &concat);
                mids.push(xs[i].iter().zip(&att).map(|(a, b)| a + b).collect::<Vec<f64>>());
            }
            let (win, wout) = (to64(&w.w_in), to64(&w.w_out));
            let mut next = Vec::new();
            for mid in &mids {
                let nm = ln(mid);
                let hidden: Vec<f64> = matvec(&win, &nm)
                    .iter()
                    .zip(w.b_in.iter())
                    .map(|(a, &b)| (a + b as f64).max(0.0))
                    .collect();
                let out = matvec(&wout, &hidden);
                next.push(
                    mid.iter()
                        .zip(&out)
                        .zip(w.b_out.iter())
                        .map(|((m, o), &b)| m + o + b as f64)
                        .collect::<Vec<f64>>(),
                );
            }
            posts.push(next.clone());
            xs = next;
        }
        posts
    }

    #[test]
    fn zeroed_weights_keep_embedding() {
        let mut m = ToyTransformer::zeros(ToyConfig { norm: NormKind::LayerNorm, ..Default::default() }).unwrap();
        m.embed.row_mut(65).fill(0.25);
        m.embed[[65, 0]] = 1.0;
        let rec = m.forward(&[65], &[]).unwrap();
        for l in 0..m.config().layer_count {
            for j in 0..m.config().d {
                assert_eq!(rec.resid[[l, 0, j]], m.embed[[65, j]]);
            }
        }
    }

    #[test]
    fn residual_identity_every_layer() {
        let m = ToyTransformer::random(ToyConfig { seed: 3, ..Default::default() }).unwrap();
        let rec = m.forward(&tokenize("hello world"), &[]).unwrap();
        assert!(rec.residual_identity_error() < 1e-5);
    }

    #[test]
    fn matches_slow_reference() {
        let m = ToyTransformer::random(ToyConfig { seed: 9, ..Default::default() }).unwrap();
        let tokens = tokenize("the cat sat");
        let rec = m.forward(&tokens, &[]).unwrap();
        let reference = reference_forward(&m, &tokens);
        let mut worst = 0.0f64;
        for (l, layer) in reference.iter().enumerate() {
            for (t, row) in layer.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    worst = worst.max((rec.res_post[[l, t, j]] as f64 - v).abs());
                }
            }
        }
        assert!(worst < 1e-5, "max deviation {worst}");
    }

    #[test]
    fn empty_sequence_rejected() {
        let m = ToyTransformer::random(ToyConfig::default()).unwrap();
        assert!(m.forward(&[], &[]).is_err());
        assert!(m.forward(&[300], &[]).is_err());
    }

    struct AddAt {
        hook: Hook,
        token: usize,
        delta: f32,
    }

    impl Intervention for AddAt {
        fn hooks(&self) -> Vec<Hook> {
            vec![self.hook]
        }
        fn apply(&self, _hook: Hook, hidden: &mut Array2<f32>) {
            hidden.row_mut(self.token).mapv_inplace(|v| v + self.delta);
        }
    }

    #[test]
    fn forward_from_is_bit_identical_to_full_run() {
        let m = ToyTransformer::random(ToyConfig { seed: 5, ..Default::default() }).unwrap();
        let tokens = tokenize("abcdefg");
        let base = m.forward(&tokens, &[]).unwrap();
        for hook in [Hook::Resid(1), Hook::AttOut(2), Hook::MlpOut(2), Hook::Resid(2)] {
            let iv = AddAt { hook, token: 3, delta: 0.3 };
            let full = m.forward(&tokens, &[&iv]).unwrap();
            let partial = m.forward_from(&base, hook.entry_layer().min(2), &[&iv]).unwrap();
            assert_eq!(full, partial, "{hook:?}");
            assert!(full.residual_identity_error() < 1e-5);
        }
    }

    #[test]
    fn forward_from_rejects_earlier_hooks() {
        let m = ToyTransformer::random(ToyConfig::default()).unwrap();
        let base = m.forward(&tokenize("ab"), &[]).unwrap();
        let iv = AddAt { hook: Hook::MlpOut(0), token: 0, delta: 1.0 };
        assert!(m.forward_from(&base, 2, &[&iv]).is_err());
    }

    #[test]
    fn named_tensor_round_trip() {
        let m = ToyTransformer::random(ToyConfig { seed: 1, layer_count: 2, ..Default::default() }).unwrap();
        let back = ToyTransformer::from_named_tensors(m.config().clone(), m.named_tensors()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn loss_is_positive_and_finite() {
        let m = ToyTransformer::random(ToyConfig::default()).unwrap();
        let rec = m.forward(&tokenize("some text"), &[]).unwrap();
        let loss = rec.next_token_loss();
        assert!(loss.is_finite() && loss > 0.0);
    }
}
