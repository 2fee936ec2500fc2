//! CTC loss (forward–backward in log space) and greedy decoding.
//!
//! The loss marginalizes over all monotonic alignments between frames and
//! the blank-extended target; its gradient w.r.t. the input log-probs is
//! the negative state-occupancy posterior, computed from the alpha/beta
//! lattices and attached to the autograd graph as a custom op.

use crate::encoder::Alphabet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// CTC loss value plus the per-frame log-posteriors it was computed from.
pub struct CtcResult<E: Scalar> {
    /// Scalar `-log P(target | log_probs)`, non-negative in probability
    /// terms (total alignment mass <= 1).
    pub loss: Tensor<E>,
    /// The `[T × V]` log-probs the loss marginalized over.
    pub log_posteriors: Tensor<E>,
}

fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.into_iter().collect();
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Minimum frame count that admits any alignment: target length plus one
/// extra frame per adjacent repeat (a blank must separate them).
fn min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// CTC loss over normalized per-frame log-probabilities.
///
/// `target` must not contain the blank symbol.  Targets that cannot be
/// aligned within `T` frames are rejected (the caller excludes them from
/// batch averages rather than clamping).
pub fn ctc_loss<E: Scalar>(
    log_probs: &Tensor<E>,
    target: &[usize],
    blank: usize,
) -> Result<CtcResult<E>> {
    let (t_len, v) = log_probs.dims2();
    if v < 2 {
        return Err(Error::Input(format!("ctc needs >= 2 symbols, got {}", v)));
    }
    if blank >= v {
        return Err(Error::Input(format!("blank {} out of vocabulary {}", blank, v)));
    }
    for &s in target {
        if s == blank {
            return Err(Error::Data("target contains the blank symbol".into()));
        }
        if s >= v {
            return Err(Error::Data(format!("target symbol {} out of vocabulary {}", s, v)));
        }
    }
    if t_len < min_frames(target) {
        return Err(Error::Data(format!(
            "infeasible ctc target: needs {} frames, got {}",
            min_frames(target),
            t_len
        )));
    }

    // Blank-extended label sequence l'.
    let mut ext = vec![blank];
    for &s in target {
        ext.push(s);
        ext.push(blank);
    }
    let s_len = ext.len();
    let lp: Vec<f64> = log_probs.data().iter().map(|x| x.to_f64()).collect();
    let at = |t: usize, sym: usize| lp[t * v + sym];

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut terms = vec![alpha[(t - 1) * s_len + s]];
            if s >= 1 {
                terms.push(alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                terms.push(alpha[(t - 1) * s_len + s - 2]);
            }
            let best = log_sum_exp(terms);
            alpha[t * s_len + s] = if best == neg { neg } else { best + at(t, ext[s]) };
        }
    }
    let mut finals = vec![alpha[(t_len - 1) * s_len + s_len - 1]];
    if s_len > 1 {
        finals.push(alpha[(t_len - 1) * s_len + s_len - 2]);
    }
    let log_z = log_sum_exp(finals);
    if !log_z.is_finite() {
        return Err(Error::Data("no feasible ctc alignment".into()));
    }

    // Beta lattice (emission at t included), then occupancy posteriors.
    let mut beta = vec![neg; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = at(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = at(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut terms = vec![beta[(t + 1) * s_len + s]];
            if s + 1 < s_len {
                terms.push(beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                terms.push(beta[(t + 1) * s_len + s + 2]);
            }
            let best = log_sum_exp(terms);
            beta[t * s_len + s] = if best == neg { neg } else { best + at(t, ext[s]) };
        }
    }

    // gamma[t][sym] = sum over states s with label sym of the posterior.
    let mut gamma = vec![0.0f64; t_len * v];
    for t in 0..t_len {
        for (s, &sym) in ext.iter().enumerate() {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == neg || b == neg {
                continue;
            }
            gamma[t * v + sym] += (a + b - at(t, sym) - log_z).exp();
        }
    }

    let need = log_probs.requires_grad();
    let loss = Tensor::from_op(
        vec![1],
        vec![E::from_f64(-log_z)],
        vec![log_probs.clone()],
        Box::new(move |g| {
            vec![need.then(|| {
                let gv = g[0].to_f64();
                gamma.iter().map(|&p| E::from_f64(-p * gv)).collect()
            })]
        }),
    );
    Ok(CtcResult { loss, log_posteriors: log_probs.clone() })
}

/// Greedy CTC decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_decode<E: Scalar>(log_probs: &Tensor<E>, alphabet: &Alphabet) -> String {
    let frames = log_probs.argmax_last();
    let mut out = Vec::new();
    let mut last = None;
    for &sym in &frames {
        if Some(sym) != last && sym != alphabet.blank_index {
            out.push(sym);
        }
        last = Some(sym);
    }
    alphabet.decode(&out)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Exhaustive alignment enumeration, independent of the lattice code:
    //! walks every one of the V^T frame-label paths, collapses it, and sums
    //! the probability of the paths whose collapse equals the target.

    pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut last = None;
        for &sym in path {
            if Some(sym) != last && sym != blank {
                out.push(sym);
            }
            last = Some(sym);
        }
        out
    }

    /// `-ln` of the total probability over all matching paths, or None if
    /// no path matches.
    pub fn brute_force_loss(
        log_probs: &[f64],
        t_len: usize,
        v: usize,
        target: &[usize],
        blank: usize,
    ) -> Option<f64> {
        let mut total = 0.0f64;
        let mut path = vec![0usize; t_len];
        loop {
            if collapse(&path, blank) == target {
                let logp: f64 = path
                    .iter()
                    .enumerate()
                    .map(|(t, &sym)| log_probs[t * v + sym])
                    .sum();
                total += logp.exp();
            }
            // Odometer increment over V^T.
            let mut i = 0;
            loop {
                if i == t_len {
                    return (total > 0.0).then(|| -total.ln());
                }
                path[i] += 1;
                if path[i] < v {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }
}
