use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::tensors::{ActivationKind, FeatureDictionary, ModelBundle, SitePosition};

use super::ActivationRecord;

fn pre_activation(dict: &FeatureDictionary, h: &[f32]) -> Vec<f64> {
    let enc = dict.encoder();
    let bias = dict.enc_bias();
    (0..dict.n_features())
        .map(|i| {
            let row = enc.row(i);
            let acc: f64 = row.iter().zip(h).map(|(&w, &x)| w as f64 * x as f64).sum();
            acc + bias[i] as f64
        })
        .collect()
}

/// Indices of the `k` largest values, ties to the lower index.
fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn activate_single(dict: &FeatureDictionary, pre: &[f64]) -> Result<Vec<f32>> {
    Ok(match dict.activation() {
        ActivationKind::Relu => pre.iter().map(|&p| p.max(0.0) as f32).collect(),
        ActivationKind::JumpRelu => {
            let theta = dict.thresholds();
            pre.iter()
                .enumerate()
                .map(|(i, &p)| {
                    let t = theta.map_or(0.0, |t| t[i] as f64);
                    if p > t {
                        p as f32
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        ActivationKind::TopK(k) => {
            let mut z = vec![0.0f32; pre.len()];
            for i in top_k_indices(pre, k) {
                if pre[i] > 0.0 {
                    z[i] = pre[i] as f32;
                }
            }
            z
        }
        ActivationKind::BatchTopK(_) => {
            return Err(Error::invalid(
                "BatchTopK needs batch context; use sae_encode_batch",
            ))
        }
    })
}

/// Encode one hidden state: `σ(W_enc h + b_enc)`.
pub fn sae_encode(dict: &FeatureDictionary, h: &[f32]) -> Result<Vec<f32>> {
    if h.len() != dict.dim() {
        return Err(Error::ShapeMismatch {
            tensor: format!("hidden state for {}", dict.position()),
            expected: dict.dim(),
            found: h.len(),
        });
    }
    activate_single(dict, &pre_activation(dict, h))
}

/// Encode a batch (`N × d` → `N × D`). BatchTopK keeps the `k × N` largest
/// pre-activations over the whole batch.
pub fn sae_encode_batch(dict: &FeatureDictionary, h: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
    if h.ncols() != dict.dim() {
        return Err(Error::ShapeMismatch {
            tensor: format!("hidden batch for {}", dict.position()),
            expected: dict.dim(),
            found: h.ncols(),
        });
    }
    let n = h.nrows();
    let feats = dict.n_features();
    let pres: Vec<Vec<f64>> = h
        .rows()
        .into_iter()
        .map(|row| match row.as_slice() {
            Some(s) => pre_activation(dict, s),
            None => pre_activation(dict, &row.to_vec()),
        })
        .collect();
    let mut out = Array2::zeros((n, feats));
    match dict.activation() {
        ActivationKind::BatchTopK(k) => {
            let flat: Vec<f64> = pres.iter().flatten().copied().collect();
            for idx in top_k_indices(&flat, k * n) {
                if flat[idx] > 0.0 {
                    out[[idx / feats, idx % feats]] = flat[idx] as f32;
                }
            }
        }
        _ => {
            for (r, pre) in pres.iter().enumerate() {
                let z = activate_single(dict, pre)?;
                out.row_mut(r).assign(&ndarray::ArrayView1::from(&z));
            }
        }
    }
    Ok(out)
}

/// `W_dec z + b_dec`.
pub fn sae_decode(dict: &FeatureDictionary, z: &[f32]) -> Result<Vec<f32>> {
    if z.len() != dict.n_features() {
        return Err(Error::ShapeMismatch {
            tensor: format!("activations for {}", dict.position()),
            expected: dict.n_features(),
            found: z.len(),
        });
    }
    let dec = dict.decoder();
    let bias = dict.dec_bias();
    Ok((0..dict.dim())
        .map(|r| {
            let acc: f64 = dec
                .row(r)
                .iter()
                .zip(z)
                .filter(|(_, &zi)| zi != 0.0)
                .map(|(&w, &zi)| w as f64 * zi as f64)
                .sum();
            (acc + bias[r] as f64) as f32
        })
        .collect())
}

/// SAE activations (`T × D`) for every match-compatible dictionary.
#[derive(Debug, Clone, Default)]
pub struct SaeActivations {
    pub by_site: BTreeMap<SitePosition, Array2<f32>>,
}

impl SaeActivations {
    pub fn get(&self, pos: SitePosition) -> Option<&Array2<f32>> {
        self.by_site.get(&pos)
    }

    pub fn value(&self, pos: SitePosition, token: usize, feature: usize) -> f32 {
        self.by_site
            .get(&pos)
            .map_or(0.0, |z| z[[token, feature]])
    }

    pub fn is_active(&self, pos: SitePosition, token: usize, feature: usize) -> bool {
        self.value(pos, token, feature) > 0.0
    }

    pub fn active_features(&self, pos: SitePosition, token: usize) -> Vec<usize> {
        self.by_site.get(&pos).map_or_else(Vec::new, |z| {
            z.row(token)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(i, _)| i)
                .collect()
        })
    }
}

pub fn encode_record(bundle: &ModelBundle, record: &ActivationRecord) -> Result<SaeActivations> {
    let mut by_site = BTreeMap::new();
    for (pos, dict) in &bundle.dictionaries {
        if !bundle.is_match_compatible(*pos) || pos.layer >= record.layer_count() {
            continue;
        }
        by_site.insert(*pos, sae_encode_batch(dict, record.hidden(*pos))?);
    }
    Ok(SaeActivations { by_site })
}

/// Encode only the listed positions.
pub fn encode_positions(
    bundle: &ModelBundle,
    record: &ActivationRecord,
    positions: &[SitePosition],
) -> Result<SaeActivations> {
    let mut by_site = BTreeMap::new();
    for &pos in positions {
        if let Some(dict) = bundle.get(pos) {
            if bundle.is_match_compatible(pos) {
                by_site.insert(pos, sae_encode_batch(dict, record.hidden(pos))?);
            }
        }
    }
    Ok(SaeActivations { by_site })
}

/// Stack per-token activations of many sequences into one `N × D` table per
/// site, rows paired across sites. Position 0 is skipped when `skip_first`
/// (the BOS token).
pub fn sample_activations(
    bundle: &ModelBundle,
    model: &super::ToyTransformer,
    sequences: &[Vec<u32>],
    skip_first: bool,
) -> Result<SaeActivations> {
    let mut parts: BTreeMap<SitePosition, Vec<Array2<f32>>> = BTreeMap::new();
    for seq in sequences {
        let rec = model.forward(seq, &[])?;
        let acts = encode_record(bundle, &rec)?;
        let from = usize::from(skip_first).min(seq.len());
        for (pos, z) in acts.by_site {
            parts
                .entry(pos)
                .or_default()
                .push(z.slice(ndarray::s![from.., ..]).to_owned());
        }
    }
    let mut by_site = BTreeMap::new();
    for (pos, blocks) in parts {
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::invalid(format!("stacking samples for {pos}: {e}")))?;
        by_site.insert(pos, stacked);
    }
    Ok(SaeActivations { by_site })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn identity_dict(kind: ActivationKind, thresholds: Option<Vec<f32>>, n: usize) -> FeatureDictionary {
        let eye = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 });
        FeatureDictionary::new(
            SitePosition::res(0),
            eye.clone(),
            eye,
            Array1::zeros(n),
            Array1::zeros(n),
            thresholds.map(Array1::from),
            kind,
        )
        .unwrap()
    }

    #[test]
    fn jumprelu_gate() {
        let dict = identity_dict(ActivationKind::JumpRelu, Some(vec![0.3, 0.3]), 2);
        let z = sae_encode(&dict, &[0.5, 0.25]).unwrap();
        assert_eq!(z, vec![0.5, 0.0]);
    }

    #[test]
    fn topk_keeps_largest() {
        let dict = identity_dict(ActivationKind::TopK(2), None, 3);
        assert_eq!(sae_encode(&dict, &[3.0, 1.0, 2.0]).unwrap(), vec![3.0, 0.0, 2.0]);
    }

    #[test]
    fn topk_nonzero_count_is_min_k_positive() {
        let dict = identity_dict(ActivationKind::TopK(3), None, 5);
        let z = sae_encode(&dict, &[-1.0, 2.0, -3.0, 0.0, -0.5]).unwrap();
        assert_eq!(z.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn batch_topk_over_batch() {
        // 4 candidates: (2, 0.5) and (1.8, 0.1); k=1 with 2 samples keeps 2 values
        let dict = identity_dict(ActivationKind::BatchTopK(1), None, 2);
        let h = array![[2.0f32, 0.5], [1.8, 0.1]];
        let z = sae_encode_batch(&dict, h.view()).unwrap();
        assert_eq!(z, array![[2.0f32, 0.0], [1.8, 0.0]]);
        assert!(sae_encode(&dict, &[2.0, 0.5]).is_err());
    }

    #[test]
    fn zero_in_zero_out_with_zero_biases() {
        let dict = identity_dict(ActivationKind::Relu, None, 3);
        let z = sae_encode(&dict, &[0.0; 3]).unwrap();
        assert_eq!(sae_decode(&dict, &z).unwrap(), vec![0.0; 3]);
    }
}
