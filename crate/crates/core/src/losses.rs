//! Training objectives.
//!
//! Each loss returns its value together with the gradient with respect to its
//! input matrix so it can be attached to a [`Graph`](crate::numerics::Graph)
//! through `scalar_loss`.

use crate::error::{Error, Result};
use crate::lexicon::SememeLexicon;
use crate::numerics::kernels::{lse, lse2, softmax_in_place};
use crate::numerics::{sigmoid, Tensor};
use serde::{Deserialize, Serialize};

pub const BLANK: usize = 0;
const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient of `loss` with respect to the input matrix.
    pub grad: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutput {
    /// Negative log-likelihood; `+inf` when no alignment exists.
    pub loss: f64,
    pub grad: Tensor,
    pub feasible: bool,
}

/// Minimum number of frames that can emit `labels`.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `labels` under per-frame log-distributions
/// `logprobs` (`T × V`, blank = 0), with its gradient w.r.t. `logprobs`.
pub fn ctc_loss(logprobs: &Tensor, labels: &[usize]) -> Result<CtcOutput> {
    let (t_len, v) = (logprobs.rows(), logprobs.cols());
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= v) {
        return Err(Error::arg(format!("CTC label {bad} is blank or out of range {v}")));
    }
    if t_len < ctc_min_frames(labels) {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad: Tensor::zeros(logprobs.shape()),
            feasible: false,
        });
    }
    if t_len == 0 {
        return Ok(CtcOutput {
            loss: 0.0,
            grad: Tensor::zeros(logprobs.shape()),
            feasible: true,
        });
    }
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let lp = |t: usize, s: usize| logprobs.data()[t * v + ext[s]];
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if skip(s) {
                a = lse2(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }
    // beta[t][s]: log-probability of emitting frames t+1.. from state s at t.
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, s2);
            let mut b = next(s);
            if s + 1 < s_len {
                b = lse2(b, next(s + 1));
            }
            if s + 2 < s_len && skip(s + 2) {
                b = lse2(b, next(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }
    let mut total = alpha[last + s_len - 1];
    if s_len > 1 {
        total = lse2(total, alpha[last + s_len - 2]);
    }
    if total == ninf {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad: Tensor::zeros(logprobs.shape()),
            feasible: false,
        });
    }
    let mut grad = vec![0.0; t_len * v];
    let mut per_class = vec![ninf; v];
    for t in 0..t_len {
        per_class.fill(ninf);
        for s in 0..s_len {
            let x = alpha[t * s_len + s] + beta[t * s_len + s];
            per_class[ext[s]] = lse2(per_class[ext[s]], x);
        }
        for (k, &pc) in per_class.iter().enumerate() {
            if pc != ninf {
                grad[t * v + k] = -(pc - total).exp();
            }
        }
    }
    Ok(CtcOutput {
        loss: -total,
        grad: Tensor::new(logprobs.shape().to_vec(), grad)?,
        feasible: true,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeOutput {
    pub loss: f64,
    pub grad: Tensor,
    /// Set when every position was masked (the loss is then 0).
    pub all_masked: bool,
}

/// Label-smoothed cross-entropy averaged over unmasked positions. The target
/// keeps `1 − ε`; `ε/(V−1)` goes to every other class.
pub fn label_smoothed_ce(logits: &Tensor, targets: &[usize], eps: f64, mask: &[bool]) -> Result<CeOutput> {
    let (n, v) = (logits.rows(), logits.cols());
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::arg(format!("label smoothing {eps} outside [0, 1)")));
    }
    if targets.len() != n || mask.len() != n {
        return Err(Error::arg(format!(
            "{n} logit rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    if v < 2 {
        return Err(Error::arg("label smoothing needs at least two classes"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::arg(format!("target {t} out of range {v}")));
    }
    let count = mask.iter().filter(|m| **m).count();
    let mut grad = vec![0.0; n * v];
    if count == 0 {
        return Ok(CeOutput {
            loss: 0.0,
            grad: Tensor::new(logits.shape().to_vec(), grad)?,
            all_masked: true,
        });
    }
    let off = eps / (v - 1) as f64;
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for i in (0..n).filter(|&i| mask[i]) {
        let row = logits.row(i);
        let z = lse(row);
        let mut loss = 0.0;
        for (k, &x) in row.iter().enumerate() {
            let q = if k == targets[i] { 1.0 - eps } else { off };
            loss -= q * (x - z);
        }
        total += loss;
        let g = &mut grad[i * v..(i + 1) * v];
        g.copy_from_slice(row);
        softmax_in_place(g);
        for (k, gk) in g.iter_mut().enumerate() {
            let q = if k == targets[i] { 1.0 - eps } else { off };
            *gk = (*gk - q) * inv;
        }
    }
    Ok(CeOutput {
        loss: total * inv,
        grad: Tensor::new(logits.shape().to_vec(), grad)?,
        all_masked: false,
    })
}

fn check_bce_shapes(x: &Tensor, targets: &Tensor, mask: &[bool]) -> Result<()> {
    if x.shape() != targets.shape() || mask.len() != x.rows() {
        return Err(Error::arg(format!(
            "sememe BCE shapes {:?} / {:?} / mask {}",
            x.shape(),
            targets.shape(),
            mask.len()
        )));
    }
    Ok(())
}

/// Binary cross-entropy averaged over unmasked positions and sememe columns.
/// Probabilities are clamped to `[1e-7, 1 − 1e-7]`.
pub fn sememe_bce(probs: &Tensor, targets: &Tensor, mask: &[bool]) -> Result<f64> {
    check_bce_shapes(probs, targets, mask)?;
    let s = probs.cols();
    let rows: Vec<usize> = (0..probs.rows()).filter(|&i| mask[i]).collect();
    if rows.is_empty() || s == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &i in &rows {
        for (p, y) in probs.row(i).iter().zip(targets.row(i)) {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
    }
    Ok(total / (rows.len() * s) as f64)
}

/// [`sememe_bce`] of `sigmoid(logits)` with the gradient w.r.t. `logits`
/// (zero wherever the clamp is active).
pub fn sememe_bce_logits(logits: &Tensor, targets: &Tensor, mask: &[bool]) -> Result<LossOutput> {
    check_bce_shapes(logits, targets, mask)?;
    let probs = Tensor::new(
        logits.shape().to_vec(),
        logits.data().iter().map(|z| sigmoid(*z)).collect(),
    )?;
    let loss = sememe_bce(&probs, targets, mask)?;
    let s = logits.cols();
    let count = mask.iter().filter(|m| **m).count();
    let mut grad = vec![0.0; logits.len()];
    if count > 0 && s > 0 {
        let inv = 1.0 / (count * s) as f64;
        for i in (0..logits.rows()).filter(|&i| mask[i]) {
            for k in 0..s {
                let p = probs.at(i, k);
                if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                    grad[i * s + k] = (p - targets.at(i, k)) * inv;
                }
            }
        }
    }
    Ok(LossOutput {
        loss,
        grad: Tensor::new(logits.shape().to_vec(), grad)?,
    })
}

/// Row `i` marks the sememes of `next_tokens[i]` (the token the decoder
/// predicts at position `i`); eos and other reserved ids give zero rows.
pub fn sememe_targets(lexicon: &SememeLexicon, next_tokens: &[usize], eos: usize) -> Result<Tensor> {
    let s = lexicon.sememe_count();
    let mut data = Vec::with_capacity(next_tokens.len() * s);
    for &t in next_tokens {
        if t == eos {
            data.extend(std::iter::repeat_n(0.0, s));
        } else {
            data.extend(lexicon.multihot(t)?);
        }
    }
    Tensor::matrix(next_tokens.len(), s, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub aed: f64,
    pub se: f64,
    pub combined: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    /// Coefficients of `(ctc, aed, se)` in `combined`.
    pub fn weights(&self) -> (f64, f64, f64) {
        mixer_weights(self.lambda, self.alpha)
    }
}

fn mixer_weights(lambda: f64, alpha: f64) -> (f64, f64, f64) {
    (lambda, (1.0 - lambda) * alpha, (1.0 - lambda) * (1.0 - alpha))
}

/// Resolves the effective α (1 when sememe prediction is off) and validates both weights.
pub fn effective_alpha(lambda: f64, alpha: f64, sp_enabled: bool) -> Result<f64> {
    for (name, w) in [("lambda", lambda), ("alpha", alpha)] {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::config(format!("{name} = {w} outside [0, 1]")));
        }
    }
    Ok(if sp_enabled { alpha } else { 1.0 })
}

/// `λ·L_CTC + (1−λ)·(α·L_AED + (1−α)·L_SE)`.
pub fn combined_loss(ctc: f64, aed: f64, se: f64, lambda: f64, alpha: f64, sp_enabled: bool) -> Result<LossBreakdown> {
    let alpha = effective_alpha(lambda, alpha, sp_enabled)?;
    for (name, l) in [("ctc", ctc), ("aed", aed), ("se", se)] {
        if l.is_nan() || l < 0.0 {
            return Err(Error::arg(format!("{name} loss {l} must be non-negative")));
        }
    }
    let (wc, wa, ws) = mixer_weights(lambda, alpha);
    let tail = if ws == 0.0 { wa * aed } else { wa * aed + ws * se };
    let head = if wc == 0.0 { 0.0 } else { wc * ctc };
    Ok(LossBreakdown {
        ctc,
        aed,
        se,
        combined: head + tail,
        lambda,
        alpha,
    })
}
