//! Pairwise sigmoid loss and the softmax contrastive baseline, with analytic
//! gradients and negative masking.
//!
//! Logits follow `logit_ij = t·(x_i·y_j) + b` with `t = exp(t′)`. The sigmoid
//! loss sums `−log σ(z_ij·logit_ij)` over every (image, text) pair, `z_ij = +1`
//! on the diagonal and `−1` elsewhere, then divides by the batch size `n`.
//! Masking drops negative terms from the sum but leaves the divisor at `n`.
//!
//! Gradients are taken with respect to the already-normalized embeddings; see
//! [`crate::model::normalize_with_grad`] for the step back through
//! normalization.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sigmoid, norm, row_log_softmax, sigmoid, Matrix};

/// Allowed deviation of a row norm from 1 before a batch is rejected.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Learnable log-temperature `t′` and bias `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub t_prime: f64,
    pub bias: f64,
}

impl LossParams {
    pub fn new(t_prime: f64, bias: f64) -> Self {
        LossParams { t_prime, bias }
    }

    /// `t = exp(t′)`, always positive.
    pub fn temperature(&self) -> f64 {
        self.t_prime.exp()
    }
}

impl Default for LossParams {
    /// `t′ = ln 10` (so `t = 10`) and `b = −10`.
    fn default() -> Self {
        LossParams {
            t_prime: 10f64.ln(),
            bias: -10.0,
        }
    }
}

/// ±1 labels for every (image, text) pair of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLabelMatrix {
    n: usize,
    labels: Vec<i8>,
}

impl PairLabelMatrix {
    /// `2·I − 1`: positives on the diagonal, negatives elsewhere.
    pub fn aligned(n: usize) -> Self {
        let mut labels = vec![-1i8; n * n];
        for i in 0..n {
            labels[i * n + i] = 1;
        }
        PairLabelMatrix { n, labels }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        f64::from(self.labels[i * self.n + j])
    }
}

/// Result of a loss forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Per-pair terms. For the sigmoid loss entry `(i, j)` is `L_ij`; for the
    /// softmax loss the diagonal carries each pair's averaged cross-entropy
    /// and the off-diagonal is zero. In both cases `value = Σ pair_losses / n`
    /// over unmasked entries.
    pub pair_losses: Matrix,
    pub positive_logit_mean: f64,
    /// Zero when the batch has no negatives (`n = 1`).
    pub negative_logit_mean: f64,
}

/// Gradients of a loss with respect to its inputs and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub d_zimg: Matrix,
    pub d_ztxt: Matrix,
    pub d_t_prime: f64,
    pub d_bias: f64,
}

impl LossGrads {
    pub fn zeros(n: usize, d: usize) -> Self {
        LossGrads {
            d_zimg: Matrix::zeros(n, d),
            d_ztxt: Matrix::zeros(n, d),
            d_t_prime: 0.0,
            d_bias: 0.0,
        }
    }

    /// Largest absolute difference over every gradient entry.
    pub fn max_abs_diff(&self, other: &LossGrads) -> f64 {
        self.d_zimg
            .max_abs_diff(&other.d_zimg)
            .max(self.d_ztxt.max_abs_diff(&other.d_ztxt))
            .max((self.d_t_prime - other.d_t_prime).abs())
            .max((self.d_bias - other.d_bias).abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    None,
    Random,
    /// Keep the highest-loss negatives.
    Hard,
    /// Keep the lowest-loss negatives.
    Easy,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskStrategy::None),
            "random" => Ok(MaskStrategy::Random),
            "hard" => Ok(MaskStrategy::Hard),
            "easy" => Ok(MaskStrategy::Easy),
            other => Err(Error::config("mask.strategy", format!("unknown `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskStrategy::None => "none",
            MaskStrategy::Random => "random",
            MaskStrategy::Hard => "hard",
            MaskStrategy::Easy => "easy",
        })
    }
}

/// How to thin out negatives: a strategy plus a `1 : negatives_per_positive`
/// target ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub negatives_per_positive: f64,
    /// Only used by [`MaskStrategy::Random`].
    pub seed: u64,
}

impl MaskSpec {
    pub fn none() -> Self {
        MaskSpec {
            strategy: MaskStrategy::None,
            negatives_per_positive: 1.0,
            seed: 0,
        }
    }

    pub fn new(strategy: MaskStrategy, negatives_per_positive: f64, seed: u64) -> Self {
        MaskSpec {
            strategy,
            negatives_per_positive,
            seed,
        }
    }

    /// Number of negatives kept in a batch of `n`, validating the ratio.
    pub fn kept_negatives(&self, n: usize) -> Result<usize> {
        let total = n * n - n;
        if self.strategy == MaskStrategy::None {
            return Ok(total);
        }
        let r = self.negatives_per_positive;
        if !r.is_finite() || r < 1.0 || r > (n as f64 - 1.0) {
            return Err(Error::InvalidRatio(format!(
                "1:{r} is outside 1:1 ..= 1:{} for a batch of {n}",
                n.saturating_sub(1)
            )));
        }
        Ok(((n as f64 * r).round() as usize).min(total))
    }
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec::none()
    }
}

/// Which pairs of an `n × n` batch take part in the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMask {
    n: usize,
    keep: Vec<bool>,
}

impl PairMask {
    pub fn all(n: usize) -> Self {
        PairMask {
            n,
            keep: vec![true; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn kept(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.n + j]
    }

    pub fn kept_positives(&self) -> usize {
        (0..self.n).filter(|&i| self.kept(i, i)).count()
    }

    pub fn kept_negatives(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count() - self.kept_positives()
    }
}

/// Chooses which negatives survive masking. Positives are always kept.
///
/// Hard and easy selection sort the off-diagonal losses (descending and
/// ascending respectively) and break ties by `(row, col)`.
pub fn build_mask(pair_losses: &Matrix, spec: &MaskSpec) -> Result<PairMask> {
    let n = pair_losses.rows();
    if pair_losses.cols() != n {
        return Err(Error::ShapeMismatch(format!(
            "pair losses must be square, got {}x{}",
            n,
            pair_losses.cols()
        )));
    }
    let k = spec.kept_negatives(n)?;
    if spec.strategy == MaskStrategy::None {
        return Ok(PairMask::all(n));
    }
    let negatives: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = match spec.strategy {
        MaskStrategy::None => unreachable!(),
        MaskStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            sample(&mut rng, negatives.len(), k)
                .into_iter()
                .map(|idx| negatives[idx])
                .collect()
        }
        MaskStrategy::Hard | MaskStrategy::Easy => {
            let mut order = negatives;
            let hard = spec.strategy == MaskStrategy::Hard;
            // Stable sort keeps (row, col) order among equal losses.
            order.sort_by(|&(a, b), &(c, d)| {
                let (x, y) = (pair_losses[(a, b)], pair_losses[(c, d)]);
                if hard {
                    y.total_cmp(&x)
                } else {
                    x.total_cmp(&y)
                }
            });
            order.truncate(k);
            order
        }
    };
    let mut keep = vec![false; n * n];
    for i in 0..n {
        keep[i * n + i] = true;
    }
    for (i, j) in chosen {
        keep[i * n + j] = true;
    }
    Ok(PairMask { n, keep })
}

fn check_pair(zimg: &Matrix, ztxt: &Matrix) -> Result<()> {
    if zimg.shape() != ztxt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image batch {}x{} vs text batch {}x{}",
            zimg.rows(),
            zimg.cols(),
            ztxt.rows(),
            ztxt.cols()
        )));
    }
    Ok(())
}

/// Rejects rows whose norm deviates from one by more than [`NORM_TOLERANCE`].
pub fn check_normalized(m: &Matrix) -> Result<()> {
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !((n - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::NotNormalized { row: i, norm: n });
        }
    }
    Ok(())
}

fn check_inputs(zimg: &Matrix, ztxt: &Matrix) -> Result<()> {
    check_pair(zimg, ztxt)?;
    check_normalized(zimg)?;
    check_normalized(ztxt)
}

/// Partial sums for one rectangular block of the sigmoid loss. The chunked
/// simulator and the monolithic loss share this kernel so that a single block
/// covering the whole batch reproduces the monolithic result bit for bit.
#[derive(Debug, Clone)]
pub(crate) struct SigmoidBlock {
    pub loss_sum: f64,
    /// `Σ_j g_ij·y_j` per local row, without the factor `t`.
    pub d_x: Matrix,
    /// `Σ_i g_ij·x_i` per local column, without the factor `t`.
    pub d_y: Matrix,
    pub g_sum: f64,
    /// `Σ g_ij·(x_i·y_j)`, without the factor `t`.
    pub g_dot_sum: f64,
    pub pos_logit_sum: f64,
    pub pos_count: usize,
    pub neg_logit_sum: f64,
    pub neg_count: usize,
}

/// Evaluates the block `x × yᵀ` where `x` holds global rows
/// `row_offset..row_offset + x.rows()` and `y` global columns
/// `col_offset..`. `n_global` is the divisor of the full loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sigmoid_block(
    x: &Matrix,
    y: &Matrix,
    row_offset: usize,
    col_offset: usize,
    n_global: usize,
    params: &LossParams,
    mask: Option<&PairMask>,
    mut pair_losses: Option<&mut Matrix>,
) -> SigmoidBlock {
    let t = params.temperature();
    let inv_n = 1.0 / n_global as f64;
    // The b×b similarity block this device materializes.
    let sims = x.matmul_transposed(y).expect("block shapes checked by caller");
    let mut out = SigmoidBlock {
        loss_sum: 0.0,
        d_x: Matrix::zeros(x.rows(), x.cols()),
        d_y: Matrix::zeros(y.rows(), y.cols()),
        g_sum: 0.0,
        g_dot_sum: 0.0,
        pos_logit_sum: 0.0,
        pos_count: 0,
        neg_logit_sum: 0.0,
        neg_count: 0,
    };
    for i in 0..x.rows() {
        let gi = row_offset + i;
        for j in 0..y.rows() {
            let gj = col_offset + j;
            let s = sims[(i, j)];
            let logit = t * s + params.bias;
            let z = if gi == gj { 1.0 } else { -1.0 };
            let term = -log_sigmoid(z * logit);
            if let Some(pl) = pair_losses.as_deref_mut() {
                pl[(gi, gj)] = term;
            }
            if gi == gj {
                out.pos_logit_sum += logit;
                out.pos_count += 1;
            } else {
                out.neg_logit_sum += logit;
                out.neg_count += 1;
            }
            if mask.is_some_and(|m| !m.kept(gi, gj)) {
                continue;
            }
            out.loss_sum += term;
            let g = -inv_n * z * sigmoid(-z * logit);
            out.g_sum += g;
            out.g_dot_sum += g * s;
            for (d, &yv) in out.d_x.row_mut(i).iter_mut().zip(y.row(j)) {
                *d += g * yv;
            }
            for (d, &xv) in out.d_y.row_mut(j).iter_mut().zip(x.row(i)) {
                *d += g * xv;
            }
        }
    }
    out
}

fn mean_or_zero(sum: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Sigmoid loss and its gradients on arbitrary (not necessarily unit-norm)
/// rows. The checked entry points add the unit-norm precondition on top.
pub fn sigmoid_loss_and_grads_unchecked(
    zimg: &Matrix,
    ztxt: &Matrix,
    params: &LossParams,
    mask: Option<&PairMask>,
) -> Result<(LossOutput, LossGrads)> {
    check_pair(zimg, ztxt)?;
    let n = zimg.rows();
    if let Some(m) = mask {
        if m.n() != n {
            return Err(Error::ShapeMismatch(format!(
                "mask for {} rows applied to a batch of {n}",
                m.n()
            )));
        }
    }
    let mut pair_losses = Matrix::zeros(n, n);
    let block = sigmoid_block(zimg, ztxt, 0, 0, n, params, mask, Some(&mut pair_losses));
    let t = params.temperature();
    let output = LossOutput {
        value: block.loss_sum / n as f64,
        pair_losses,
        positive_logit_mean: mean_or_zero(block.pos_logit_sum, block.pos_count),
        negative_logit_mean: mean_or_zero(block.neg_logit_sum, block.neg_count),
    };
    let grads = LossGrads {
        d_zimg: block.d_x.scale(t),
        d_ztxt: block.d_y.scale(t),
        d_t_prime: t * block.g_dot_sum,
        d_bias: block.g_sum,
    };
    Ok((output, grads))
}

/// `−(1/n) Σ_i Σ_j log σ(z_ij·(t·x_i·y_j + b))` over unit-norm rows.
pub fn sigmoid_loss(zimg: &Matrix, ztxt: &Matrix, params: &LossParams) -> Result<LossOutput> {
    check_inputs(zimg, ztxt)?;
    Ok(sigmoid_loss_and_grads_unchecked(zimg, ztxt, params, None)?.0)
}

/// Forward pass with an explicit pair mask.
pub fn sigmoid_loss_masked(
    zimg: &Matrix,
    ztxt: &Matrix,
    params: &LossParams,
    mask: &PairMask,
) -> Result<(LossOutput, LossGrads)> {
    check_inputs(zimg, ztxt)?;
    sigmoid_loss_and_grads_unchecked(zimg, ztxt, params, Some(mask))
}

/// Gradients of the sigmoid loss. With a mask spec, the mask is built from
/// the pair losses of this same forward pass.
pub fn sigmoid_loss_grads(
    zimg: &Matrix,
    ztxt: &Matrix,
    params: &LossParams,
    mask: Option<&MaskSpec>,
) -> Result<LossGrads> {
    check_inputs(zimg, ztxt)?;
    let (out, grads) = sigmoid_loss_and_grads_unchecked(zimg, ztxt, params, None)?;
    match mask {
        Some(spec) if spec.strategy != MaskStrategy::None => {
            let pair_mask = build_mask(&out.pair_losses, spec)?;
            Ok(sigmoid_loss_and_grads_unchecked(zimg, ztxt, params, Some(&pair_mask))?.1)
        }
        _ => Ok(grads),
    }
}

/// Softmax loss and gradients on arbitrary rows; see
/// [`sigmoid_loss_and_grads_unchecked`].
pub fn softmax_loss_and_grads_unchecked(zimg: &Matrix, ztxt: &Matrix, t_prime: f64) -> Result<(LossOutput, LossGrads)> {
    check_pair(zimg, ztxt)?;
    let n = zimg.rows();
    let t = t_prime.exp();
    let logits = zimg.matmul_transposed(ztxt)?.scale(t);
    let img_to_txt = row_log_softmax(&logits);
    let txt_to_img = row_log_softmax(&logits.transpose());

    let mut pair_losses = Matrix::zeros(n, n);
    let mut total = 0.0;
    for i in 0..n {
        let term = -0.5 * (img_to_txt[(i, i)] + txt_to_img[(i, i)]);
        pair_losses[(i, i)] = term;
        total += term;
    }

    // dℓ/dlogit_ij = (P_ij + Q_ji − 2δ_ij) / 2n, with P, Q the two softmaxes.
    let scale = 0.5 / n as f64;
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 2.0 } else { 0.0 };
            g[(i, j)] = scale * (img_to_txt[(i, j)].exp() + txt_to_img[(j, i)].exp() - delta);
        }
    }
    // Σ G∘logits with each softmax measured against its own positive logit:
    // rows of P − I and columns of Qᵀ − I sum to zero, and the offsets keep
    // the products O(1) when t is large.
    let mut g_dot = 0.0;
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            let p = img_to_txt[(i, j)].exp() - delta;
            let q = txt_to_img[(j, i)].exp() - delta;
            g_dot += scale * (p * (logits[(i, j)] - logits[(i, i)]) + q * (logits[(i, j)] - logits[(j, j)]));
            if i == j {
                pos += logits[(i, j)];
            } else {
                neg += logits[(i, j)];
            }
        }
    }
    let output = LossOutput {
        value: total / n as f64,
        pair_losses,
        positive_logit_mean: mean_or_zero(pos, n),
        negative_logit_mean: mean_or_zero(neg, n * n - n),
    };
    let grads = LossGrads {
        d_zimg: g.matmul(ztxt)?.scale(t),
        d_ztxt: g.transposed_matmul(zimg)?.scale(t),
        d_t_prime: g_dot,
        d_bias: 0.0,
    };
    Ok((output, grads))
}

/// Symmetric softmax cross-entropy over images→texts and texts→images.
pub fn softmax_loss(zimg: &Matrix, ztxt: &Matrix, t_prime: f64) -> Result<LossOutput> {
    check_inputs(zimg, ztxt)?;
    Ok(softmax_loss_and_grads_unchecked(zimg, ztxt, t_prime)?.0)
}

pub fn softmax_loss_grads(zimg: &Matrix, ztxt: &Matrix, t_prime: f64) -> Result<LossGrads> {
    check_inputs(zimg, ztxt)?;
    Ok(softmax_loss_and_grads_unchecked(zimg, ztxt, t_prime)?.1)
}

/// Image and text batches whose cross dot products are all exactly zero:
/// images live in the first `d/2` coordinates, texts in the rest.
pub fn orthogonal_batch(n: usize, d: usize) -> (Matrix, Matrix) {
    assert!(d >= 2 * n, "need d >= 2n for {n} mutually orthogonal pairs");
    let half = d / 2;
    let zimg = Matrix::from_fn(n, d, |i, j| if j == i { 1.0 } else { 0.0 });
    let ztxt = Matrix::from_fn(n, d, |i, j| if j == half + i { 1.0 } else { 0.0 });
    (zimg, ztxt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::l2_normalize_rows;
    use rand::Rng;

    fn random_unit(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        l2_normalize_rows(&m).unwrap()
    }

    /// Evaluates the sigmoid loss term by term, independent of the block kernel.
    fn scalar_sigmoid_oracle(x: &Matrix, y: &Matrix, p: &LossParams) -> f64 {
        let n = x.rows();
        let t = p.t_prime.exp();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..x.cols() {
                    s += x[(i, k)] * y[(j, k)];
                }
                let z = if i == j { 1.0 } else { -1.0 };
                total += (1.0 + (-z * (t * s + p.bias)).exp()).ln();
            }
        }
        total / n as f64
    }

    #[test]
    fn singleton_positive_at_defaults_is_ln2() {
        let x = random_unit(1, 4, 1);
        let out = sigmoid_loss(&x, &x, &LossParams::default()).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_dot_batch_closed_form() {
        let (x, y) = orthogonal_batch(16, 32);
        let p = LossParams::default();
        let out = sigmoid_loss(&x, &y, &p).unwrap();
        // mpmath, 40 digits: -log σ(-10) - 15 log σ(10).
        assert!((out.value - 10.00072638238747).abs() < 1e-12);
        let g = sigmoid_loss_grads(&x, &y, &p, None).unwrap();
        assert!((g.d_bias - (-0.999273634100761)).abs() < 1e-12);
        assert_eq!(g.d_t_prime, 0.0);
        assert_eq!(out.positive_logit_mean, -10.0);
        assert_eq!(out.negative_logit_mean, -10.0);
    }

    #[test]
    fn matches_scalar_oracle() {
        for seed in 0..5 {
            let x = random_unit(8, 5, seed);
            let y = random_unit(8, 5, seed + 100);
            let p = LossParams::new(0.7, -1.3);
            let out = sigmoid_loss(&x, &y, &p).unwrap();
            assert!((out.value - scalar_sigmoid_oracle(&x, &y, &p)).abs() < 1e-12);
            assert_eq!(out.value, out.pair_losses.sum() / 8.0);
            assert!(out.pair_losses.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn sigmoid_loss_is_symmetric() {
        let x = random_unit(7, 4, 3);
        let y = random_unit(7, 4, 4);
        let p = LossParams::default();
        let a = sigmoid_loss(&x, &y, &p).unwrap().value;
        let b = sigmoid_loss(&y, &x, &p).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = random_unit(4, 3, 0);
        let y = random_unit(5, 3, 0);
        assert!(matches!(
            sigmoid_loss(&x, &y, &LossParams::default()),
            Err(Error::ShapeMismatch(_))
        ));
        let raw = x.scale(1.01);
        assert!(matches!(
            sigmoid_loss(&raw, &x, &LossParams::default()),
            Err(Error::NotNormalized { row: 0, .. })
        ));
        assert!(softmax_loss(&x, &raw, 0.0).is_err());
    }

    #[test]
    fn saturated_logits_give_zero_gradient() {
        // Positives pushed to +∞ and negatives to −∞.
        let x = Matrix::identity(4);
        let p = LossParams::new(1e3f64.ln(), -500.0);
        let g = sigmoid_loss_grads(&x, &x, &p, None).unwrap();
        assert!(g.d_zimg.as_slice().iter().all(|v| v.abs() < 1e-12));
        assert!(g.d_ztxt.as_slice().iter().all(|v| v.abs() < 1e-12));
        assert!(g.d_bias.abs() < 1e-12 && g.d_t_prime.abs() < 1e-12);
    }

    #[test]
    fn bias_init_reduces_initial_bias_gradient() {
        for n in [4, 8, 16] {
            let (x, y) = orthogonal_batch(n, 2 * n);
            let at = |b: f64| {
                sigmoid_loss_grads(&x, &y, &LossParams::new(10f64.ln(), b), None)
                    .unwrap()
                    .d_bias
            };
            assert!(at(-10.0).abs() < at(0.0).abs());
        }
        let (x, y) = orthogonal_batch(16, 32);
        let g0 = sigmoid_loss_grads(&x, &y, &LossParams::new(10f64.ln(), 0.0), None).unwrap();
        assert!((g0.d_bias - 7.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let x = random_unit(1, 3, 9);
        let y = random_unit(1, 3, 10);
        assert_eq!(softmax_loss(&x, &y, 2.0).unwrap().value, 0.0);
        let g = softmax_loss_grads(&x, &y, 2.0).unwrap();
        assert_eq!(g.max_abs_diff(&LossGrads::zeros(1, 3)), 0.0);

        // Logit matrix [[s, 0], [0, s]] with t = 1: x_i·y_i = s.
        let s: f64 = 0.8;
        let c = (1.0 - s * s).sqrt();
        let x = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![s, 0.0, c], vec![0.0, s, c]]).unwrap();
        let v = softmax_loss(&x, &y, 0.0).unwrap().value;
        assert!((v - (1.0 + (-s).exp()).ln()).abs() < 1e-14);

        let x = random_unit(5, 4, 11);
        let y = random_unit(5, 4, 12);
        let out = softmax_loss(&x, &y, 1e4f64.ln()).unwrap();
        assert!(out.value.is_finite());
        assert!(softmax_loss_grads(&x, &y, 1e4f64.ln()).unwrap().d_zimg.is_finite());
    }

    #[test]
    fn softmax_swap_symmetry() {
        let x = random_unit(6, 5, 21);
        let g = softmax_loss_grads(&x, &x, 1.1).unwrap();
        assert!(g.d_zimg.max_abs_diff(&g.d_ztxt) <= 1e-12);
    }

    #[test]
    fn no_mask_keeps_everything() {
        let pl = Matrix::zeros(4, 4);
        let m = build_mask(&pl, &MaskSpec::none()).unwrap();
        assert_eq!((m.kept_positives(), m.kept_negatives()), (4, 12));
        // 16k-sized batch: 16384 positives against n² − n negatives.
        let n: u64 = 16384;
        assert_eq!(n * n - n, 268_419_072);
    }

    #[test]
    fn hard_mask_matches_repeated_argmax() {
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pl = Matrix::from_fn(n, n, |_, _| rng.random::<f64>());
        let mask = build_mask(&pl, &MaskSpec::new(MaskStrategy::Hard, 1.0, 0)).unwrap();
        // Oracle: pick the largest remaining off-diagonal loss n times.
        let mut taken = vec![vec![false; n]; n];
        for _ in 0..n {
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for i in 0..n {
                for j in 0..n {
                    if i != j && !taken[i][j] && pl[(i, j)] > best.0 {
                        best = (pl[(i, j)], i, j);
                    }
                }
            }
            taken[best.1][best.2] = true;
        }
        for (i, row) in taken.iter().enumerate() {
            for (j, &t) in row.iter().enumerate() {
                assert_eq!(mask.kept(i, j), i == j || t, "({i},{j})");
            }
        }
    }

    #[test]
    fn mask_counts_and_ratio_validation() {
        let n = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pl = Matrix::from_fn(n, n, |_, _| rng.random::<f64>());
        for strategy in [MaskStrategy::Random, MaskStrategy::Hard, MaskStrategy::Easy] {
            let m = build_mask(&pl, &MaskSpec::new(strategy, 2.5, 3)).unwrap();
            assert_eq!(m.kept_positives(), n);
            assert_eq!(m.kept_negatives(), 25);
        }
        for bad in [0.5, 9.5, f64::NAN] {
            assert!(matches!(
                build_mask(&pl, &MaskSpec::new(MaskStrategy::Hard, bad, 0)),
                Err(Error::InvalidRatio(_))
            ));
        }
        let a = build_mask(&pl, &MaskSpec::new(MaskStrategy::Random, 3.0, 42)).unwrap();
        let b = build_mask(&pl, &MaskSpec::new(MaskStrategy::Random, 3.0, 42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn easy_mask_ties_break_by_position() {
        let pl = Matrix::zeros(3, 3);
        let m = build_mask(&pl, &MaskSpec::new(MaskStrategy::Easy, 1.0, 0)).unwrap();
        let kept: Vec<_> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && m.kept(i, j))
            .collect();
        assert_eq!(kept, vec![(0, 1), (0, 2), (1, 0)]);
    }

    #[test]
    fn hard_masked_loss_dominates_easy() {
        for seed in 0..10 {
            let x = random_unit(8, 4, seed);
            let y = random_unit(8, 4, seed + 50);
            let p = LossParams::new(1.0, -2.0);
            let out = sigmoid_loss(&x, &y, &p).unwrap();
            let value = |s| {
                let m = build_mask(&out.pair_losses, &MaskSpec::new(s, 2.0, seed)).unwrap();
                sigmoid_loss_masked(&x, &y, &p, &m).unwrap().0.value
            };
            assert!(value(MaskStrategy::Hard) >= value(MaskStrategy::Random));
            assert!(value(MaskStrategy::Random) >= value(MaskStrategy::Easy));
        }
    }
}
