//! TopK SAE / transcoder training with hand-written gradients and
//! momentum SGD. Parameters live in `f64` during training.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{ActivationKind, FeatureDictionary, SitePosition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_features: usize,
    pub k: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Initialize decoder columns from (normalized) training targets.
    #[serde(default)]
    pub init_from_data: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_features: 64,
            k: 4,
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 64,
            steps: 1000,
            seed: 0,
            init_from_data: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDictionary {
    pub dictionary: FeatureDictionary,
    /// Mean squared reconstruction error of every optimization step (before
    /// the update).
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Params {
    pub w_dec: Array2<f64>,
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub b_dec: Array1<f64>,
}

impl Params {
    fn zeros_like(&self) -> Self {
        Self {
            w_dec: Array2::zeros(self.w_dec.raw_dim()),
            w_enc: Array2::zeros(self.w_enc.raw_dim()),
            b_enc: Array1::zeros(self.b_enc.raw_dim()),
            b_dec: Array1::zeros(self.b_dec.raw_dim()),
        }
    }

    fn renormalize_decoder(&mut self) {
        for mut col in self.w_dec.axis_iter_mut(Axis(1)) {
            let n = col.dot(&col).sqrt();
            if n > 1e-12 {
                col.mapv_inplace(|v| v / n);
            }
        }
    }
}

fn topk_mask(pre: &Array1<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pre.len()).collect();
    idx.sort_by(|&a, &b| pre[b].total_cmp(&pre[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).filter(|&i| pre[i] > 0.0).collect()
}

/// Mean (over samples) squared reconstruction error and its gradient.
pub(crate) fn loss_and_grad(
    p: &Params,
    k: usize,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> (f64, Params) {
    let b = inputs.nrows() as f64;
    let mut g = p.zeros_like();
    let mut loss = 0.0;
    for (x, y) in inputs.rows().into_iter().zip(targets.rows()) {
        let pre = p.w_enc.dot(&x) + &p.b_enc;
        let active = topk_mask(&pre, k);
        let mut yhat = p.b_dec.clone();
        for &i in &active {
            yhat.scaled_add(pre[i], &p.w_dec.column(i));
        }
        let r = &yhat - &y;
        loss += r.dot(&r);
        let g_out = r.mapv(|v| 2.0 * v / b);
        g.b_dec += &g_out;
        for &i in &active {
            g.w_dec.column_mut(i).scaled_add(pre[i], &g_out);
            let g_pre = p.w_dec.column(i).dot(&g_out);
            g.w_enc.row_mut(i).scaled_add(g_pre, &x);
            g.b_enc[i] += g_pre;
        }
    }
    (loss / b, g)
}

/// Decoder columns start as random unit vectors, or as sampled target rows
/// when `init_from_data` is set. The encoder starts as the decoder transpose
/// for SAEs; for transcoders sampled from data it starts at the matching
/// input rows so each feature reads the input that produced its output.
pub(crate) fn init_params(
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
) -> Params {
    let (d_in, d_out) = (inputs.ncols(), targets.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w_dec = Array2::from_shape_fn((d_out, cfg.n_features), |_| {
        StandardNormal.sample(&mut rng)
    });
    let mut picked = Vec::new();
    if cfg.init_from_data && targets.nrows() > 0 {
        let mut rows: Vec<usize> = (0..targets.nrows()).collect();
        rows.shuffle(&mut rng);
        for (j, &r) in rows.iter().cycle().take(cfg.n_features).enumerate() {
            w_dec.column_mut(j).assign(&targets.row(r));
            picked.push(r);
        }
    }
    let mut p = Params {
        w_enc: Array2::zeros((cfg.n_features, d_in)),
        b_enc: Array1::zeros(cfg.n_features),
        b_dec: Array1::zeros(d_out),
        w_dec,
    };
    p.renormalize_decoder();
    let same_space = d_in == d_out && inputs == targets;
    if same_space || (d_in == d_out && picked.is_empty()) {
        p.w_enc = p.w_dec.t().to_owned();
    } else if !picked.is_empty() {
        for (j, &r) in picked.iter().enumerate() {
            let row = inputs.row(r);
            let norm = row.dot(&row).sqrt().max(1e-12);
            p.w_enc.row_mut(j).assign(&row.mapv(|v| v / norm));
        }
    } else {
        p.w_enc = Array2::from_shape_fn((cfg.n_features, d_in), |_| {
            StandardNormal.sample(&mut rng)
        }) / (d_in as f64).sqrt();
    }
    p
}

/// Shortest resampling window, in steps.
const RESAMPLE_MIN_WINDOW: usize = 25;

fn count_firing(p: &Params, k: usize, inputs: ArrayView2<'_, f64>, fired: &mut [usize]) {
    for x in inputs.rows() {
        let pre = p.w_enc.dot(&x) + &p.b_enc;
        for i in topk_mask(&pre, k) {
            fired[i] += 1;
        }
    }
}

/// Features that never fired during the last window restart on the samples
/// reconstructed worst in the current batch: the decoder column takes the
/// normalized residual, the encoder row the normalized input (or the same
/// residual when input and target share a space).
fn resample_dead(
    p: &mut Params,
    velocity: &mut Params,
    k: usize,
    fired: &[usize],
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) {
    let dead: Vec<usize> = (0..fired.len()).filter(|&i| fired[i] == 0).collect();
    if dead.is_empty() {
        return;
    }
    let mut residuals: Vec<(f64, usize, Array1<f64>)> = inputs
        .rows()
        .into_iter()
        .zip(targets.rows())
        .enumerate()
        .map(|(r, (x, y))| {
            let pre = p.w_enc.dot(&x) + &p.b_enc;
            let mut yhat = p.b_dec.clone();
            for i in topk_mask(&pre, k) {
                yhat.scaled_add(pre[i], &p.w_dec.column(i));
            }
            let res = &y - &yhat;
            (res.dot(&res), r, res)
        })
        .collect();
    residuals.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let same_space = inputs == targets;
    for (&j, (err, r, res)) in dead.iter().zip(&residuals) {
        if *err <= 1e-24 {
            break;
        }
        let norm = err.sqrt();
        p.w_dec.column_mut(j).assign(&res.mapv(|v| v / norm));
        if same_space {
            p.w_enc.row_mut(j).assign(&res.mapv(|v| v / norm));
        } else {
            let x = inputs.row(*r);
            let xn = x.dot(&x).sqrt().max(1e-12);
            p.w_enc.row_mut(j).assign(&x.mapv(|v| v / xn));
        }
        p.b_enc[j] = 0.0;
        velocity.w_dec.column_mut(j).fill(0.0);
        velocity.w_enc.row_mut(j).fill(0.0);
        velocity.b_enc[j] = 0.0;
    }
}

fn train(
    inputs: ArrayView2<'_, f32>,
    targets: ArrayView2<'_, f32>,
    cfg: &TrainConfig,
    position: SitePosition,
) -> Result<TrainedDictionary> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::invalid("training set is empty (N = 0)"));
    }
    if targets.nrows() != n {
        return Err(Error::invalid(format!(
            "input/target sample counts differ: {n} vs {}",
            targets.nrows()
        )));
    }
    if cfg.n_features == 0 || cfg.k == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("n_features, k and batch_size must be >= 1"));
    }
    let xs = inputs.mapv(f64::from);
    let ys = targets.mapv(f64::from);
    let mut p = init_params(xs.view(), ys.view(), cfg);
    let mut velocity = p.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut history = Vec::with_capacity(cfg.steps);
    let full_batch = cfg.batch_size >= n;
    let (mut batch_x, mut batch_y);

    let window = (cfg.steps / 25).max(RESAMPLE_MIN_WINDOW);
    let last_resample = cfg.steps * 4 / 5;
    let mut fired = vec![0usize; cfg.n_features];

    for step in 0..cfg.steps {
        let (bx, by) = if full_batch {
            (xs.view(), ys.view())
        } else {
            if cursor + cfg.batch_size > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + cfg.batch_size];
            cursor += cfg.batch_size;
            batch_x = xs.select(Axis(0), idx);
            batch_y = ys.select(Axis(0), idx);
            (batch_x.view(), batch_y.view())
        };
        let (loss, g) = loss_and_grad(&p, cfg.k, bx, by);
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        history.push(loss);
        count_firing(&p, cfg.k, bx, &mut fired);
        if (step + 1) % window == 0 && step < last_resample {
            resample_dead(&mut p, &mut velocity, cfg.k, &fired, bx, by);
            fired.iter_mut().for_each(|f| *f = 0);
            continue;
        }
        let mu = cfg.momentum;
        let lr = cfg.learning_rate;
        velocity.w_dec = &velocity.w_dec * mu + &g.w_dec;
        velocity.w_enc = &velocity.w_enc * mu + &g.w_enc;
        velocity.b_enc = &velocity.b_enc * mu + &g.b_enc;
        velocity.b_dec = &velocity.b_dec * mu + &g.b_dec;
        p.w_dec.scaled_add(-lr, &velocity.w_dec);
        p.w_enc.scaled_add(-lr, &velocity.w_enc);
        p.b_enc.scaled_add(-lr, &velocity.b_enc);
        p.b_dec.scaled_add(-lr, &velocity.b_dec);
        p.renormalize_decoder();
    }

    let dictionary = FeatureDictionary::new(
        position,
        p.w_dec.mapv(|v| v as f32),
        p.w_enc.mapv(|v| v as f32),
        p.b_enc.mapv(|v| v as f32),
        p.b_dec.mapv(|v| v as f32),
        None,
        ActivationKind::TopK(cfg.k),
    )?;
    Ok(TrainedDictionary {
        dictionary,
        loss_history: history,
    })
}

/// Worst relative error between the analytic gradient and central finite
/// differences (step `eps`) at the initial parameters of `cfg`, with the
/// biases moved off zero so their gradients are exercised too.
pub fn gradient_check(inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, cfg: &TrainConfig, eps: f64) -> Result<f64> {
    if inputs.nrows() == 0 || inputs.nrows() != targets.nrows() {
        return Err(Error::invalid("gradient check needs paired, non-empty samples"));
    }
    let mut p = init_params(inputs, targets, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    p.b_enc.mapv_inplace(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    p.b_dec.mapv_inplace(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    let (_, g) = loss_and_grad(&p, cfg.k, inputs, targets);
    let loss_at = |q: &Params| loss_and_grad(q, cfg.k, inputs, targets).0;
    let mut worst: f64 = 0.0;
    let mut probe = |get: &dyn Fn(&mut Params) -> &mut f64, analytic: f64| {
        let (mut plus, mut minus) = (p.clone(), p.clone());
        *get(&mut plus) += eps;
        *get(&mut minus) -= eps;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max(rel);
    };
    let (d_out, n) = g.w_dec.dim();
    let d_in = g.w_enc.ncols();
    for j in 0..n {
        for i in 0..d_out {
            probe(&|q: &mut Params| &mut q.w_dec[[i, j]], g.w_dec[[i, j]]);
        }
        for i in 0..d_in {
            probe(&|q: &mut Params| &mut q.w_enc[[j, i]], g.w_enc[[j, i]]);
        }
        probe(&|q: &mut Params| &mut q.b_enc[j], g.b_enc[j]);
    }
    for i in 0..d_out {
        probe(&|q: &mut Params| &mut q.b_dec[i], g.b_dec[i]);
    }
    Ok(worst)
}

/// Train a TopK SAE reconstructing `acts` (`N × d`).
pub fn train_sae(
    acts: ArrayView2<'_, f32>,
    cfg: &TrainConfig,
    position: SitePosition,
) -> Result<TrainedDictionary> {
    train(acts, acts, cfg, position)
}

/// Train a TopK transcoder mapping `pre_acts` to `post_acts`.
pub fn train_transcoder(
    pre_acts: ArrayView2<'_, f32>,
    post_acts: ArrayView2<'_, f32>,
    cfg: &TrainConfig,
    position: SitePosition,
) -> Result<TrainedDictionary> {
    train(pre_acts, post_acts, cfg, position)
}
