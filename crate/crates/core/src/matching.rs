//! Cross-dictionary feature matching.
//!
//! The data-free matchers compare unit-norm decoder columns by cosine
//! similarity. Tiles are multiplied with `f64` accumulation and rows of the
//! source dictionary are spread over the rayon pool, so the full `D_a × D_b`
//! matrix never has to exist unless a caller asks for it.

use std::cmp::Ordering;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{FeatureDictionary, FeatureId, ModelBundle, NormalizedColumns, SitePosition};

pub const DEFAULT_BLOCK: usize = 1024;
/// Largest dictionary the exact assignment solver accepts by default.
pub const PERMUTATION_LIMIT: usize = 4096;
pub const DEFAULT_MIN_COUNT: usize = 10;

fn check_compatible(a: &FeatureDictionary, b: &FeatureDictionary) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::MatchIncompatible {
            a: a.position(),
            b: b.position(),
            dim_a: a.dim(),
            dim_b: b.dim(),
        });
    }
    Ok(())
}

/// `out = a_rows · b_rowsᵀ`.
fn tile_product(a_rows: ArrayView2<'_, f64>, b_rows: ArrayView2<'_, f64>, out: &mut Array2<f64>) {
    general_mat_mul(1.0, &a_rows, &b_rows.t(), 0.0, out);
}

/// Full cosine-similarity matrix `D_a × D_b`, computed in `block × block`
/// tiles. Entries involving a degenerate column are `-∞`.
pub fn similarity_matrix(a: &FeatureDictionary, b: &FeatureDictionary, block: usize) -> Result<Array2<f64>> {
    check_compatible(a, b)?;
    let (na, nb) = (a.normalized(), b.normalized());
    let block = block.max(1);
    let mut sim = Array2::<f64>::zeros((na.n_features(), nb.n_features()));
    sim.axis_chunks_iter_mut(Axis(0), block)
        .into_par_iter()
        .enumerate()
        .for_each(|(bi, mut rows_out)| {
            let r0 = bi * block;
            let ra = rows_out.nrows();
            let a_rows = na.rows.slice(s![r0..r0 + ra, ..]);
            let mut scratch = Array2::zeros((ra, block.min(nb.n_features())));
            for c0 in (0..nb.n_features()).step_by(block) {
                let cb = block.min(nb.n_features() - c0);
                if scratch.ncols() != cb {
                    scratch = Array2::zeros((ra, cb));
                }
                tile_product(a_rows, nb.rows.slice(s![c0..c0 + cb, ..]), &mut scratch);
                rows_out.slice_mut(s![.., c0..c0 + cb]).assign(&scratch);
            }
            for (i, mut row) in rows_out.outer_iter_mut().enumerate() {
                if na.degenerate[r0 + i] {
                    row.fill(f64::NEG_INFINITY);
                } else {
                    for (j, v) in row.iter_mut().enumerate() {
                        if nb.degenerate[j] {
                            *v = f64::NEG_INFINITY;
                        }
                    }
                }
            }
        });
    Ok(sim)
}

/// Similarities of one unit vector against every column of `dict`
/// (`-∞` at degenerate columns).
pub fn similarity_to(unit: &[f64], dict: &FeatureDictionary) -> Result<Vec<f64>> {
    if unit.len() != dict.dim() {
        return Err(Error::ShapeMismatch {
            tensor: format!("query vector for {}", dict.position()),
            expected: dict.dim(),
            found: unit.len(),
        });
    }
    let n = dict.normalized();
    let q = ndarray::ArrayView1::from(unit);
    let mut out = n.rows.dot(&q).to_vec();
    for (v, &deg) in out.iter_mut().zip(&n.degenerate) {
        if deg {
            *v = f64::NEG_INFINITY;
        }
    }
    Ok(out)
}

/// Descending by score, ascending by index on ties.
fn rank(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Keep the `k` best of `row`, then drop scores that are not strictly positive.
pub fn top_k_row(row: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<(usize, f64)> = row
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, v)| *v != f64::NEG_INFINITY && !v.is_nan())
        .collect();
    idx.sort_by(rank);
    idx.truncate(k);
    idx.retain(|e| e.1 > 0.0);
    idx
}

/// Sparse map `T^{A→B}`: for each source feature at most `k` target features
/// with strictly positive scores, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMap {
    pub source: SitePosition,
    pub target: SitePosition,
    pub k: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

#[derive(Serialize, Deserialize)]
struct TransitionRecord {
    source: SitePosition,
    target: SitePosition,
    k: usize,
    n_sources: usize,
    /// `(source index, target index, score)` triples.
    entries: Vec<(usize, usize, f64)>,
}

impl TransitionMap {
    pub fn n_sources(&self) -> usize {
        self.entries.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[i]
    }

    pub fn top1(&self, i: usize) -> Option<(usize, f64)> {
        self.entries.get(i).and_then(|r| r.first().copied())
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = TransitionRecord {
            source: self.source,
            target: self.target,
            k: self.k,
            n_sources: self.entries.len(),
            entries: self
                .entries
                .iter()
                .enumerate()
                .flat_map(|(i, row)| row.iter().map(move |&(j, s)| (i, j, s)))
                .collect(),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: TransitionRecord = serde_json::from_str(text)?;
        let mut entries = vec![Vec::new(); rec.n_sources];
        for (i, j, s) in rec.entries {
            let row = entries.get_mut(i).ok_or(Error::OutOfRange {
                what: "transition source",
                index: i,
                limit: rec.n_sources,
            })?;
            row.push((j, s));
        }
        Ok(Self {
            source: rec.source,
            target: rec.target,
            k: rec.k,
            entries,
        })
    }
}

/// Sparsify a materialized similarity matrix.
pub fn top_k_transition(sim: ArrayView2<'_, f64>, k: usize, source: SitePosition, target: SitePosition) -> TransitionMap {
    let k = k.max(1);
    let entries = sim
        .outer_iter()
        .map(|row| match row.as_slice() {
            Some(r) => top_k_row(r, k),
            None => top_k_row(&row.to_vec(), k),
        })
        .collect();
    TransitionMap { source, target, k, entries }
}

/// Insert into a best-first list of capacity `k`. Columns arrive in
/// ascending index order, so an equal score never displaces an earlier one.
fn push_candidate(list: &mut Vec<(usize, f64)>, k: usize, j: usize, v: f64) {
    if list.len() == k && v <= list[k - 1].1 {
        return;
    }
    let pos = list.partition_point(|e| e.1 >= v);
    list.insert(pos, (j, v));
    list.truncate(k);
}

fn streaming_top_k(na: &NormalizedColumns, nb: &NormalizedColumns, k: usize, block: usize) -> Vec<Vec<(usize, f64)>> {
    let block = block.max(1);
    let n_a = na.n_features();
    let n_b = nb.n_features();
    let row_blocks: Vec<usize> = (0..n_a).step_by(block).collect();
    let per_block: Vec<Vec<Vec<(usize, f64)>>> = row_blocks
        .par_iter()
        .map(|&r0| {
            let ra = block.min(n_a - r0);
            let a_rows = na.rows.slice(s![r0..r0 + ra, ..]);
            let mut best: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(k + 1); ra];
            let mut tile = Array2::zeros((ra, block.min(n_b)));
            for c0 in (0..n_b).step_by(block) {
                let cb = block.min(n_b - c0);
                if tile.ncols() != cb {
                    tile = Array2::zeros((ra, cb));
                }
                tile_product(a_rows, nb.rows.slice(s![c0..c0 + cb, ..]), &mut tile);
                for (i, row) in tile.outer_iter().enumerate() {
                    if na.degenerate[r0 + i] {
                        continue;
                    }
                    let list = &mut best[i];
                    for (jj, &v) in row.iter().enumerate() {
                        let j = c0 + jj;
                        if !nb.degenerate[j] && !v.is_nan() {
                            push_candidate(list, k, j, v);
                        }
                    }
                }
            }
            for list in &mut best {
                list.retain(|e| e.1 > 0.0);
            }
            best
        })
        .collect();
    per_block.into_iter().flatten().collect()
}

/// Top-`k` transition from `a` to `b` without materializing the similarity
/// matrix; memory is one `block × block` tile per worker.
pub fn match_top_k(a: &FeatureDictionary, b: &FeatureDictionary, k: usize, block: usize) -> Result<TransitionMap> {
    check_compatible(a, b)?;
    let k = k.max(1);
    Ok(TransitionMap {
        source: a.position(),
        target: b.position(),
        k,
        entries: streaming_top_k(a.normalized(), b.normalized(), k, block),
    })
}

/// Best match of one feature at one predecessor site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteMatch {
    pub position: SitePosition,
    pub index: usize,
    pub score: f64,
}

/// `s^(P)` for the three predecessor sites of a residual feature. A site whose
/// dictionary is absent is `None`; a site whose columns are all degenerate is
/// also `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteScores {
    pub feature: FeatureId,
    pub layer: usize,
    pub res: Option<SiteMatch>,
    pub mlp: Option<SiteMatch>,
    pub att: Option<SiteMatch>,
}

impl SiteScores {
    pub fn s_res(&self) -> Option<f64> {
        self.res.map(|m| m.score)
    }

    pub fn s_mlp(&self) -> Option<f64> {
        self.mlp.map(|m| m.score)
    }

    pub fn s_att(&self) -> Option<f64> {
        self.att.map(|m| m.score)
    }
}

/// Argmax over valid columns, lowest index on ties.
pub fn best_match(unit: &[f64], dict: &FeatureDictionary) -> Result<Option<(usize, f64)>> {
    Ok(top_k_of(&similarity_to(unit, dict)?, 1).first().copied())
}

/// Top `k` valid columns without the positivity filter.
pub fn top_k_of(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, s)| *s != f64::NEG_INFINITY && !s.is_nan())
        .collect();
    v.sort_by(rank);
    v.truncate(k);
    v
}

fn site_match(unit: &[f64], bundle: &ModelBundle, pos: SitePosition, required: bool) -> Result<Option<SiteMatch>> {
    let Some(dict) = bundle.get(pos) else {
        return if required { Err(Error::MissingDictionary(pos)) } else { Ok(None) };
    };
    if dict.dim() != unit.len() {
        return Err(Error::MatchIncompatible {
            a: pos,
            b: pos,
            dim_a: dict.dim(),
            dim_b: unit.len(),
        });
    }
    Ok(best_match(unit, dict)?.map(|(index, score)| SiteMatch { position: pos, index, score }))
}

/// Compare residual feature `f` at `layer` with `R_{L−1}`, `M_L` and `A_L`.
pub fn site_scores(f: usize, layer: usize, bundle: &ModelBundle) -> Result<SiteScores> {
    if layer == 0 {
        return Err(Error::invalid("layer 0 has no previous residual"));
    }
    let target = bundle.dictionary(SitePosition::res(layer))?;
    if f >= target.n_features() {
        return Err(Error::OutOfRange {
            what: "feature index",
            index: f,
            limit: target.n_features(),
        });
    }
    let unit = target.unit_column(f);
    Ok(SiteScores {
        feature: FeatureId::new(SitePosition::res(layer), f),
        layer,
        res: site_match(&unit, bundle, SitePosition::res(layer - 1), true)?,
        mlp: site_match(&unit, bundle, SitePosition::mlp(layer), false)?,
        att: site_match(&unit, bundle, SitePosition::att(layer), false)?,
    })
}

/// A bijection `i → mapping[i]` with its summed similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Permutation {
    pub mapping: Vec<usize>,
    pub objective: f64,
}

pub fn permutation_match(a: &FeatureDictionary, b: &FeatureDictionary) -> Result<Permutation> {
    permutation_match_with_limit(a, b, Some(PERMUTATION_LIMIT))
}

/// `limit = None` lifts the size gate; the solver is cubic in `D`.
pub fn permutation_match_with_limit(a: &FeatureDictionary, b: &FeatureDictionary, limit: Option<usize>) -> Result<Permutation> {
    check_compatible(a, b)?;
    if a.n_features() != b.n_features() {
        return Err(Error::invalid(format!(
            "permutation matching needs equal dictionary sizes, got {} and {}",
            a.n_features(),
            b.n_features()
        )));
    }
    if let Some(limit) = limit {
        if a.n_features() > limit {
            return Err(Error::invalid(format!(
                "D = {} exceeds the assignment solver limit {limit}; pass an explicit limit to override",
                a.n_features()
            )));
        }
    }
    let mut sim = similarity_matrix(a, b, DEFAULT_BLOCK)?;
    // a degenerate column still has to be assigned somewhere; it is worth nothing
    sim.mapv_inplace(|v| if v == f64::NEG_INFINITY { 0.0 } else { v });
    Ok(assignment_max(sim.view()))
}

const TIE_TOL: f64 = 1e-9;

/// Maximum-weight perfect assignment on a square matrix, lexicographically
/// smallest among optimal assignments.
pub fn assignment_max(sim: ArrayView2<'_, f64>) -> Permutation {
    let n = sim.nrows();
    assert_eq!(n, sim.ncols(), "assignment needs a square matrix");
    if n == 0 {
        return Permutation { mapping: Vec::new(), objective: 0.0 };
    }
    let cost = |i: usize, j: usize| -sim[[i, j]];
    // shortest augmenting path with potentials, 1-based with a sentinel column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    let mut col_to_row = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
        col_to_row[j - 1] = p[j] - 1;
    }

    // Every optimal assignment lives in the equality subgraph of the dual
    // potentials. Walk rows in order and give each the smallest column that
    // still admits a perfect matching of the unfixed rows.
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| (cost(i, j) - u[i + 1] - v[j + 1]).abs() <= TIE_TOL)
                .collect()
        })
        .collect();
    let mut row_fixed = vec![false; n];
    let mut col_fixed = vec![false; n];
    for i in 0..n {
        for &j in &tight[i] {
            if col_fixed[j] {
                continue;
            }
            if row_to_col[i] == j {
                break;
            }
            // try to hand column j to row i by rerouting j's owner to i's column
            let owner = col_to_row[j];
            let freed = row_to_col[i];
            let mut visited = vec![false; n];
            visited[j] = true;
            let mut path: Vec<(usize, usize)> = Vec::new();
            if reroute(owner, freed, &tight, &row_fixed, &col_fixed, &col_to_row, &mut visited, &mut path, i) {
                for &(r, c) in &path {
                    row_to_col[r] = c;
                    col_to_row[c] = r;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
        row_fixed[i] = true;
        col_fixed[row_to_col[i]] = true;
    }
    let objective = (0..n).map(|i| sim[[i, row_to_col[i]]]).sum();
    Permutation { mapping: row_to_col, objective }
}

/// Depth-first alternating path from `row` to the column `goal`, using only
/// tight edges among unfixed rows and columns.
#[allow(clippy::too_many_arguments)]
fn reroute(
    row: usize,
    goal: usize,
    tight: &[Vec<usize>],
    row_fixed: &[bool],
    col_fixed: &[bool],
    col_to_row: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
    skip_row: usize,
) -> bool {
    for &c in &tight[row] {
        if visited[c] || col_fixed[c] {
            continue;
        }
        visited[c] = true;
        if c == goal {
            path.push((row, c));
            return true;
        }
        let next = col_to_row[c];
        if next == skip_row || row_fixed[next] {
            continue;
        }
        if reroute(next, goal, tight, row_fixed, col_fixed, col_to_row, visited, path, skip_row) {
            path.push((row, c));
            return true;
        }
    }
    false
}

/// Column-standardized copy; `None` for columns excluded from correlation.
fn standardize(acts: ArrayView2<'_, f32>, min_count: usize) -> (Array2<f64>, Vec<bool>) {
    let n = acts.nrows() as f64;
    let mut z = acts.mapv(f64::from);
    let mut valid = vec![true; acts.ncols()];
    for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        let fired = acts.column(j).iter().filter(|&&x| x > 0.0).count();
        let mean = col.sum() / n;
        col.mapv_inplace(|x| x - mean);
        let ss = col.iter().map(|x| x * x).sum::<f64>();
        if fired < min_count || ss <= 0.0 || !ss.is_finite() {
            valid[j] = false;
            col.fill(0.0);
        } else {
            let norm = ss.sqrt();
            col.mapv_inplace(|x| x / norm);
        }
    }
    (z, valid)
}

/// Pearson correlation between the columns of two activation tables with
/// paired rows (`N × D_a`, `N × D_b`).
pub fn pearson_matrix(acts_a: ArrayView2<'_, f32>, acts_b: ArrayView2<'_, f32>, min_count: usize) -> Result<Array2<f64>> {
    if acts_a.nrows() != acts_b.nrows() {
        return Err(Error::ShapeMismatch {
            tensor: "paired activation samples".into(),
            expected: acts_a.nrows(),
            found: acts_b.nrows(),
        });
    }
    if acts_a.nrows() < 2 {
        return Err(Error::invalid("Pearson matching needs at least 2 samples"));
    }
    let (za, va) = standardize(acts_a, min_count);
    let (zb, vb) = standardize(acts_b, min_count);
    let mut corr = za.t().dot(&zb);
    for (i, mut row) in corr.outer_iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            if !va[i] || !vb[j] {
                *x = f64::NEG_INFINITY;
            }
        }
    }
    Ok(corr)
}

/// Data-driven baseline: top-`k` positive Pearson correlations per source
/// feature. Features firing fewer than `min_count` times are excluded.
pub fn pearson_top_k(
    acts_a: ArrayView2<'_, f32>,
    acts_b: ArrayView2<'_, f32>,
    k: usize,
    min_count: usize,
    source: SitePosition,
    target: SitePosition,
) -> Result<TransitionMap> {
    let corr = pearson_matrix(acts_a, acts_b, min_count)?;
    Ok(top_k_transition(corr.view(), k, source, target))
}

pub fn pearson_match(
    acts_a: ArrayView2<'_, f32>,
    acts_b: ArrayView2<'_, f32>,
    min_count: usize,
    source: SitePosition,
    target: SitePosition,
) -> Result<TransitionMap> {
    pearson_top_k(acts_a, acts_b, 1, min_count, source, target)
}

/// Statistic used to summarize a feature's nonzero activations for folding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldStatistic {
    #[default]
    Mean,
    Median,
}

/// Per-feature mean (or median) over strictly positive activations; zero for
/// features that never fire.
pub fn typical_activation(acts: ArrayView2<'_, f32>, stat: FoldStatistic) -> Vec<f32> {
    acts.axis_iter(Axis(1))
        .map(|col| {
            let mut fired: Vec<f64> = col.iter().filter(|&&x| x > 0.0).map(|&x| f64::from(x)).collect();
            if fired.is_empty() {
                return 0.0;
            }
            match stat {
                FoldStatistic::Mean => (fired.iter().sum::<f64>() / fired.len() as f64) as f32,
                FoldStatistic::Median => {
                    fired.sort_by(f64::total_cmp);
                    let m = fired.len() / 2;
                    if fired.len() % 2 == 1 {
                        fired[m] as f32
                    } else {
                        ((fired[m - 1] + fired[m]) / 2.0) as f32
                    }
                }
            }
        })
        .collect()
}

/// Scale decoder column `i` by `mean_acts[i]`; zero leaves the column as is.
pub fn fold_dictionary(dict: &FeatureDictionary, mean_acts: &[f32]) -> Result<FeatureDictionary> {
    if mean_acts.len() != dict.n_features() {
        return Err(Error::ShapeMismatch {
            tensor: "mean activations".into(),
            expected: dict.n_features(),
            found: mean_acts.len(),
        });
    }
    if let Some(i) = mean_acts.iter().position(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(Error::invalid(format!(
            "mean activation of feature {i} is {}; folding needs finite values >= 0",
            mean_acts[i]
        )));
    }
    let mut decoder = dict.decoder().clone();
    for (mut col, &m) in decoder.axis_iter_mut(Axis(1)).zip(mean_acts) {
        if m != 0.0 {
            col.mapv_inplace(|x| x * m);
        }
    }
    let mut out = dict.clone();
    out.replace_decoder(decoder);
    out.set_folded(true);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::ActivationKind;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn dict_from_columns(pos: SitePosition, decoder: Array2<f32>) -> FeatureDictionary {
        let (d, n) = decoder.dim();
        let encoder = decoder.t().to_owned();
        FeatureDictionary::new(pos, decoder, encoder, Array1::zeros(n), Array1::zeros(d), None, ActivationKind::Relu).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Array2<f32> {
        Array2::from_shape_fn((d, n), |_| rng.gen_range(-1.0f32..1.0))
    }

    fn naive_cos(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn self_similarity_diagonal_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = dict_from_columns(SitePosition::res(0), random_matrix(&mut rng, 6, 9));
        let sim = similarity_matrix(&a, &a, 4).unwrap();
        for i in 0..9 {
            assert_abs_diff_eq!(sim[[i, i]], 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn orthogonal_columns_score_zero() {
        let a = dict_from_columns(SitePosition::res(0), array![[1.0f32], [0.0]]);
        let b = dict_from_columns(SitePosition::res(1), array![[0.0f32], [1.0]]);
        assert_eq!(similarity_matrix(&a, &b, 8).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn similarity_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let da = random_matrix(&mut rng, 5, 3);
        let db = random_matrix(&mut rng, 5, 4);
        let a = dict_from_columns(SitePosition::res(0), da.clone());
        let b = dict_from_columns(SitePosition::res(1), db.clone());
        let sim = similarity_matrix(&a, &b, 2).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let oracle = naive_cos(&da.column(i).to_vec(), &db.column(j).to_vec());
                assert_abs_diff_eq!(sim[[i, j]], oracle, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn mismatched_dims_are_incompatible() {
        let a = dict_from_columns(SitePosition::res(0), Array2::ones((4, 2)));
        let b = dict_from_columns(SitePosition::att(1), Array2::ones((3, 2)));
        assert!(matches!(similarity_matrix(&a, &b, 8), Err(Error::MatchIncompatible { .. })));
        assert!(matches!(match_top_k(&a, &b, 1, 8), Err(Error::MatchIncompatible { .. })));
    }

    #[test]
    fn degenerate_columns_never_win() {
        let a = dict_from_columns(SitePosition::res(1), array![[1.0f32], [0.0]]);
        let b = dict_from_columns(SitePosition::res(0), array![[0.0f32, 0.5], [0.0, 0.5]]);
        let sim = similarity_matrix(&a, &b, 8).unwrap();
        assert_eq!(sim[[0, 0]], f64::NEG_INFINITY);
        assert_eq!(match_top_k(&a, &b, 2, 8).unwrap().row(0).len(), 1);
    }

    #[test]
    fn top_k_indicator_drops_negative() {
        let sim = array![[0.9, 0.1], [-0.2, -0.5]];
        let t = top_k_transition(sim.view(), 1, SitePosition::res(1), SitePosition::res(0));
        assert_eq!(t.row(0), &[(0, 0.9)]);
        assert!(t.row(1).is_empty());
    }

    #[test]
    fn identity_similarity_gives_identity_map() {
        let sim = Array2::<f64>::eye(5);
        let t = top_k_transition(sim.view(), 1, SitePosition::res(1), SitePosition::res(0));
        for i in 0..5 {
            assert_eq!(t.top1(i), Some((i, 1.0)));
        }
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sim = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-1.0..1.0));
        let t = top_k_transition(sim.view(), 3, SitePosition::res(1), SitePosition::res(0));
        for i in 0..5 {
            let mut all: Vec<(usize, f64)> = (0..5).map(|j| (j, sim[[i, j]])).collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let expect: Vec<_> = all.into_iter().take(3).filter(|e| e.1 > 0.0).collect();
            assert_eq!(t.row(i), expect.as_slice());
        }
    }

    #[test]
    fn ties_go_to_lower_index() {
        let sim = array![[0.5, 0.7, 0.7, 0.5]];
        let t = top_k_transition(sim.view(), 3, SitePosition::res(1), SitePosition::res(0));
        assert_eq!(t.row(0), &[(1, 0.7), (2, 0.7), (0, 0.5)]);
        let mut list = Vec::new();
        for (j, &v) in [0.5, 0.7, 0.7, 0.5].iter().enumerate() {
            push_candidate(&mut list, 3, j, v);
        }
        assert_eq!(list, vec![(1, 0.7), (2, 0.7), (0, 0.5)]);
    }

    #[test]
    fn streaming_equals_materialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = dict_from_columns(SitePosition::res(1), random_matrix(&mut rng, 7, 23));
        let b = dict_from_columns(SitePosition::res(0), random_matrix(&mut rng, 7, 31));
        let sim = similarity_matrix(&a, &b, 5).unwrap();
        for k in [1, 3, 5] {
            let dense = top_k_transition(sim.view(), k, a.position(), b.position());
            let stream = match_top_k(&a, &b, k, 6).unwrap();
            assert_eq!(dense.entries.len(), stream.entries.len());
            for i in 0..23 {
                let (x, y) = (dense.row(i), stream.row(i));
                assert_eq!(x.iter().map(|e| e.0).collect::<Vec<_>>(), y.iter().map(|e| e.0).collect::<Vec<_>>());
                for (p, q) in x.iter().zip(y) {
                    assert_abs_diff_eq!(p.1, q.1, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn transition_json_round_trip() {
        let sim = array![[0.9, 0.3, 0.0], [0.0, 0.0, 0.0], [0.1, 0.2, 0.4]];
        let t = top_k_transition(sim.view(), 2, SitePosition::res(2), SitePosition::mlp(2));
        let back = TransitionMap::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    fn three_site_bundle() -> ModelBundle {
        let mut b = ModelBundle::new("t", 3, 2);
        b.insert(dict_from_columns(SitePosition::res(0), array![[1.0f32, 0.0], [0.0, 1.0], [0.0, 0.0]])).unwrap();
        b.insert(dict_from_columns(SitePosition::res(1), array![[0.0f32, 0.0], [2.0, 0.0], [0.0, 1.0]])).unwrap();
        b.insert(dict_from_columns(SitePosition::mlp(1), array![[0.0f32], [0.6], [0.8]])).unwrap();
        b
    }

    #[test]
    fn duplicated_residual_column_scores_one() {
        let s = site_scores(0, 1, &three_site_bundle()).unwrap();
        let res = s.res.unwrap();
        assert_eq!((res.index, res.score), (1, 1.0));
        assert!(s.att.is_none());
        assert_abs_diff_eq!(s.s_mlp().unwrap(), 0.6, epsilon = 1e-6);
    }

    #[test]
    fn orthogonal_target_scores_zero() {
        let s = site_scores(1, 1, &three_site_bundle()).unwrap();
        assert_eq!(s.s_res(), Some(0.0));
        assert_abs_diff_eq!(s.s_mlp().unwrap(), 0.8, epsilon = 1e-6);
    }

    #[test]
    fn site_scores_errors() {
        let b = three_site_bundle();
        assert!(matches!(site_scores(5, 1, &b), Err(Error::OutOfRange { .. })));
        assert!(site_scores(0, 0, &b).is_err());
    }

    #[test]
    fn permutation_of_self_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = dict_from_columns(SitePosition::res(0), random_matrix(&mut rng, 8, 6));
        let p = permutation_match(&a, &a).unwrap();
        assert_eq!(p.mapping, (0..6).collect::<Vec<_>>());
        assert_abs_diff_eq!(p.objective, 6.0, epsilon = 1e-9);
    }

    #[test]
    fn permutation_two_by_two() {
        let p = assignment_max(array![[0.9, 0.2], [0.3, 0.8]].view());
        assert_eq!(p.mapping, vec![0, 1]);
        assert_abs_diff_eq!(p.objective, 1.7, epsilon = 1e-12);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force(sim: &Array2<f64>) -> (f64, Vec<usize>) {
        let n = sim.nrows();
        let mut all = permutations(n);
        all.sort();
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for p in all {
            let v: f64 = p.iter().enumerate().map(|(i, &j)| sim[[i, j]]).sum();
            if v > best.0 + 1e-12 {
                best = (v, p);
            }
        }
        best
    }

    #[test]
    fn permutation_five_matches_enumeration_and_random_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = dict_from_columns(SitePosition::res(0), random_matrix(&mut rng, 4, 5));
        let b = dict_from_columns(SitePosition::res(1), random_matrix(&mut rng, 4, 5));
        let sim = similarity_matrix(&a, &b, 8).unwrap();
        let p = permutation_match(&a, &b).unwrap();
        let (best, _) = brute_force(&sim);
        assert_abs_diff_eq!(p.objective, best, epsilon = 1e-9);
        for _ in 0..1000 {
            let mut perm: Vec<usize> = (0..5).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let v: f64 = perm.iter().enumerate().map(|(i, &j)| sim[[i, j]]).sum();
            assert!(p.objective >= v - 1e-12);
        }
    }

    #[test]
    fn permutation_ties_resolve_lexicographically() {
        // every permutation is optimal
        let p = assignment_max(Array2::<f64>::ones((4, 4)).view());
        assert_eq!(p.mapping, vec![0, 1, 2, 3]);
        // two optimal assignments: (1,0,2) and (0,1,2) → the smaller wins
        let sim = array![[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(assignment_max(sim.view()).mapping, vec![0, 1, 2]);
        let sim = array![[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
        assert_eq!(assignment_max(sim.view()).mapping, vec![1, 2, 0]);
    }

    #[test]
    fn permutation_rejects_unequal_sizes_and_gate() {
        let a = dict_from_columns(SitePosition::res(0), Array2::eye(3));
        let b = dict_from_columns(SitePosition::res(1), Array2::ones((3, 2)));
        assert!(permutation_match(&a, &b).is_err());
        assert!(permutation_match_with_limit(&a, &a, Some(2)).is_err());
        assert!(permutation_match_with_limit(&a, &a, None).is_ok());
    }

    #[test]
    fn pearson_copy_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let acts = Array2::from_shape_fn((200, 6), |_| if rng.gen_bool(0.3) { rng.gen_range(0.5f32..3.0) } else { 0.0 });
        let t = pearson_match(acts.view(), acts.view(), 10, SitePosition::res(1), SitePosition::res(0)).unwrap();
        for i in 0..6 {
            let (j, c) = t.top1(i).unwrap();
            assert_eq!(j, i);
            assert_abs_diff_eq!(c, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn pearson_hand_values() {
        let x = array![[1.0f32], [2.0], [3.0]];
        let anti = array![[3.0f32], [2.0], [1.0]];
        let t = pearson_match(x.view(), anti.view(), 0, SitePosition::res(1), SitePosition::res(0)).unwrap();
        assert!(t.row(0).is_empty());
        let y = array![[1.0f32], [3.0], [2.0]];
        // cov = (−1)(−1) + 0 + (1)(0) = 1; var_x = var_y = 2 → r = 0.5
        let c = pearson_matrix(x.view(), y.view(), 0).unwrap();
        assert_abs_diff_eq!(c[[0, 0]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn pearson_excludes_rare_and_constant() {
        let a = array![[1.0f32, 2.0], [0.0, 2.0], [0.0, 2.0], [2.0, 2.0]];
        let c = pearson_matrix(a.view(), a.view(), 2).unwrap();
        assert_eq!(c[[1, 1]], f64::NEG_INFINITY);
        let c = pearson_matrix(a.view(), a.view(), 3).unwrap();
        assert_eq!(c[[0, 0]], f64::NEG_INFINITY);
        assert!(pearson_matrix(a.slice(s![..1, ..]), a.slice(s![..1, ..]), 0).is_err());
    }

    #[test]
    fn folding_scales_columns() {
        let d = dict_from_columns(SitePosition::res(0), array![[1.0f32, 0.6], [0.0, 0.8]]);
        let same = fold_dictionary(&d, &[1.0, 1.0]).unwrap();
        assert_eq!(same.decoder(), d.decoder());
        assert!(same.is_folded());
        let f = fold_dictionary(&d, &[2.5, 0.0]).unwrap();
        assert_abs_diff_eq!(f.decoder()[[0, 0]], 2.5);
        assert_eq!(f.decoder().column(1), d.decoder().column(1));
        assert!(fold_dictionary(&d, &[-1.0, 1.0]).is_err());
    }

    #[test]
    fn folded_similarity_equals_unfolded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = dict_from_columns(SitePosition::res(1), random_matrix(&mut rng, 6, 7));
        let b = dict_from_columns(SitePosition::res(0), random_matrix(&mut rng, 6, 5));
        let ma: Vec<f32> = (0..7).map(|_| rng.gen_range(0.1..4.0)).collect();
        let mb: Vec<f32> = (0..5).map(|_| rng.gen_range(0.1..4.0)).collect();
        let plain = similarity_matrix(&a, &b, 3).unwrap();
        let folded = similarity_matrix(&fold_dictionary(&a, &ma).unwrap(), &fold_dictionary(&b, &mb).unwrap(), 3).unwrap();
        for (x, y) in plain.iter().zip(folded.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn typical_activation_statistics() {
        let acts = array![[0.0f32, 1.0], [2.0, 3.0], [4.0, 8.0], [0.0, 0.0]];
        assert_eq!(typical_activation(acts.view(), FoldStatistic::Mean), vec![3.0, 4.0]);
        assert_eq!(typical_activation(acts.view(), FoldStatistic::Median), vec![3.0, 3.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn similarity_is_transpose_symmetric(seed in any::<u64>(), na in 1usize..9, nb in 1usize..9, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = dict_from_columns(SitePosition::res(0), random_matrix(&mut rng, d, na));
            let b = dict_from_columns(SitePosition::res(1), random_matrix(&mut rng, d, nb));
            let ab = similarity_matrix(&a, &b, 3).unwrap();
            let ba = similarity_matrix(&b, &a, 4).unwrap();
            for i in 0..na {
                for j in 0..nb {
                    prop_assert!((ab[[i, j]] - ba[[j, i]]).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn transition_rows_positive_and_bounded(seed in any::<u64>(), k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim = Array2::from_shape_fn((6, 9), |_| rng.gen_range(-1.0..1.0));
            let t = top_k_transition(sim.view(), k, SitePosition::res(1), SitePosition::res(0));
            for row in &t.entries {
                prop_assert!(row.len() <= k);
                prop_assert!(row.iter().all(|e| e.1 > 0.0));
                prop_assert!(row.windows(2).all(|w| w[0].1 >= w[1].1));
            }
        }

        #[test]
        fn permutation_optimal_on_small_instances(seed in any::<u64>(), n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
            let p = assignment_max(sim.view());
            let mut seen = vec![false; n];
            for &j in &p.mapping { prop_assert!(!seen[j]); seen[j] = true; }
            let (best, _) = brute_force(&sim);
            prop_assert!((p.objective - best).abs() < 1e-9);
            let trace: f64 = (0..n).map(|i| sim[[i, i]]).sum();
            prop_assert!(p.objective >= trace - 1e-12);
        }

        #[test]
        fn permutation_lexicographic_on_quantized_ties(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim = Array2::from_shape_fn((n, n), |_| rng.gen_range(0..3) as f64);
            let (best, lex) = brute_force(&sim);
            let p = assignment_max(sim.view());
            prop_assert!((p.objective - best).abs() < 1e-9);
            prop_assert_eq!(p.mapping, lex);
        }

        #[test]
        fn argmax_invariant_under_positive_column_scaling(seed in any::<u64>(), scale in 0.01f32..100.0, col in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ModelBundle::new("p", 5, 2);
            let r0 = random_matrix(&mut rng, 5, 6);
            let r1 = random_matrix(&mut rng, 5, 4);
            let m1 = random_matrix(&mut rng, 5, 6);
            b.insert(dict_from_columns(SitePosition::res(0), r0.clone())).unwrap();
            b.insert(dict_from_columns(SitePosition::res(1), r1.clone())).unwrap();
            b.insert(dict_from_columns(SitePosition::mlp(1), m1.clone())).unwrap();
            let before: Vec<_> = (0..4).map(|f| site_scores(f, 1, &b).unwrap()).collect();
            let mut r0s = r0.clone();
            r0s.column_mut(col).mapv_inplace(|x| x * scale);
            let mut m1s = m1.clone();
            m1s.column_mut(col).mapv_inplace(|x| x * scale);
            b.insert(dict_from_columns(SitePosition::res(0), r0s)).unwrap();
            b.insert(dict_from_columns(SitePosition::mlp(1), m1s)).unwrap();
            for f in 0..4 {
                let after = site_scores(f, 1, &b).unwrap();
                prop_assert_eq!(after.res.unwrap().index, before[f].res.unwrap().index);
                prop_assert_eq!(after.mlp.unwrap().index, before[f].mlp.unwrap().index);
            }
        }

        #[test]
        fn pearson_affine_invariant(seed in any::<u64>(), slope in 0.1f32..10.0, shift in -5.0f32..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((40, 4), |_| rng.gen_range(0.0f32..1.0));
            let b = Array2::from_shape_fn((40, 5), |_| rng.gen_range(0.0f32..1.0));
            let a2 = a.mapv(|x| slope * x + shift);
            let c1 = pearson_matrix(a.view(), b.view(), 0).unwrap();
            let c2 = pearson_matrix(a2.view(), b.view(), 0).unwrap();
            for (x, y) in c1.iter().zip(c2.iter()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
            let t1 = top_k_transition(c1.view(), 1, SitePosition::res(1), SitePosition::res(0));
            let t2 = top_k_transition(c2.view(), 1, SitePosition::res(1), SitePosition::res(0));
            for i in 0..4 {
                prop_assert_eq!(t1.top1(i).map(|e| e.0), t2.top1(i).map(|e| e.0));
            }
        }
    }
}
