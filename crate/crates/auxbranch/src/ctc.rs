//! CTC head: per-frame posteriors, the marginal path loss, greedy path
//! extraction and collapse.
//!
//! The loss is computed by the usual forward-backward recursion over the
//! blank-interleaved extended target, entirely in log space (no per-frame
//! renormalization). Its analytic gradient is derived from frame posteriors
//! and registered as a single cached-gradient graph node. A brute-force
//! enumeration oracle over all |V|^T paths checks both on small instances.

use crate::error::{Error, Result};
use crate::graph::{DiffGraph, NodeId};
use crate::tensor::{logaddexp, logsumexp, Tensor2D};

/// Per-frame log-distributions over the blank-extended vocabulary.
#[derive(Debug, Clone)]
pub struct CtcPosterior {
    pub logp: Tensor2D,
    pub blank: usize,
}

impl CtcPosterior {
    pub fn new(logp: Tensor2D, blank: usize) -> Result<Self> {
        if blank >= logp.cols() {
            return Err(Error::IdOutOfRange {
                id: blank,
                vocab: logp.cols(),
            });
        }
        let p = CtcPosterior { logp, blank };
        p.validate()?;
        Ok(p)
    }

    /// Every row must be a normalized log-distribution (logsumexp 0 +- 1e-6).
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.logp.rows() {
            let lse = logsumexp(self.logp.row(i));
            if lse.abs() > 1e-6 {
                return Err(Error::Unnormalized {
                    row: i,
                    sum: lse.exp(),
                });
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.logp.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.logp.cols()
    }
}

/// A maximal run of one label in a frame-level path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Run {
    pub label: usize,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

/// Frame-level label path with its run-length structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    pub labels: Vec<usize>,
    pub runs: Vec<Run>,
}

impl AlignmentPath {
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < labels.len() {
            let mut j = i;
            while j + 1 < labels.len() && labels[j + 1] == labels[i] {
                j += 1;
            }
            runs.push(Run {
                label: labels[i],
                start: i,
                end: j,
            });
            i = j + 1;
        }
        AlignmentPath { labels, runs }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Projects encoder output to per-frame log-posteriors: log-softmax(h W + b).
pub fn ctc_project(graph: &mut DiffGraph, h: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let d = graph.value(h).cols();
    if graph.value(w).rows() != d {
        return Err(Error::shape(
            "ctc_project",
            format!(
                "h is {} but projection is {}",
                graph.value(h).shape_str(),
                graph.value(w).shape_str()
            ),
        ));
    }
    let logits = graph.matmul(h, w)?;
    let logits = graph.add_row(logits, b)?;
    Ok(graph.log_softmax(logits))
}

/// Minimal frame count admitting a valid path: one frame per token plus a
/// separating blank between adjacent equal labels.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(target: &[usize], blank: usize, vocab: usize, frames: usize) -> Result<()> {
    if let Some(pos) = target.iter().position(|&t| t == blank) {
        return Err(Error::BlankInTarget { blank, pos });
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= vocab) {
        return Err(Error::IdOutOfRange { id: bad, vocab });
    }
    let needed = min_frames(target);
    if needed > frames {
        return Err(Error::CtcInfeasible { frames, needed });
    }
    Ok(())
}

/// Forward-backward CTC loss and its gradient w.r.t. the log-posteriors.
///
/// Returns `(-log p(target | logp), d loss / d logp)`.
pub fn ctc_forward_backward(logp: &Tensor2D, target: &[usize], blank: usize) -> Result<(f64, Tensor2D)> {
    let t_max = logp.rows();
    let vocab = logp.cols();
    if target.is_empty() {
        return Err(Error::EmptyInput("CTC target".into()));
    }
    check_target(target, blank, vocab, t_max)?;

    // Extended target: blank, x1, blank, x2, ..., xn, blank.
    let s_len = 2 * target.len() + 1;
    let ext_label = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            target[s / 2]
        }
    };

    let ninf = f64::NEG_INFINITY;
    // alpha[t][s]: log prob of prefixes ending in state s at frame t,
    // including the emission at t.
    let mut alpha = vec![vec![ninf; s_len]; t_max];
    alpha[0][0] = logp.get(0, blank);
    if s_len > 1 {
        alpha[0][1] = logp.get(0, ext_label(1));
    }
    for t in 1..t_max {
        for s in 0..s_len {
            let lab = ext_label(s);
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = logaddexp(acc, alpha[t - 1][s - 1]);
            }
            // Skip transition: forbidden into blanks and between equal labels.
            if s >= 2 && lab != blank && lab != ext_label(s - 2) {
                acc = logaddexp(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if acc == ninf { ninf } else { acc + logp.get(t, lab) };
        }
    }
    let mut total = alpha[t_max - 1][s_len - 1];
    if s_len > 1 {
        total = logaddexp(total, alpha[t_max - 1][s_len - 2]);
    }
    if total == ninf {
        // Unreachable for feasible targets with finite log-posteriors.
        return Err(Error::CtcInfeasible {
            frames: t_max,
            needed: s_len,
        });
    }

    // beta[t][s]: log prob of suffixes starting in state s at frame t,
    // including the emission at t.
    let mut beta = vec![vec![ninf; s_len]; t_max];
    beta[t_max - 1][s_len - 1] = logp.get(t_max - 1, blank);
    if s_len > 1 {
        beta[t_max - 1][s_len - 2] = logp.get(t_max - 1, ext_label(s_len - 2));
    }
    for t in (0..t_max - 1).rev() {
        for s in 0..s_len {
            let lab = ext_label(s);
            let mut acc = beta[t + 1][s];
            if s + 1 < s_len {
                acc = logaddexp(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len {
                let nxt = ext_label(s + 2);
                if nxt != blank && nxt != lab {
                    acc = logaddexp(acc, beta[t + 1][s + 2]);
                }
            }
            beta[t][s] = if acc == ninf { ninf } else { acc + logp.get(t, lab) };
        }
    }

    // Posterior mass through (t, s) is alpha + beta minus the emission
    // counted twice; gradient of -log p w.r.t. logp[t][k] is minus the summed
    // state posterior for label k at t.
    let mut grad = Tensor2D::zeros(t_max, vocab);
    for t in 0..t_max {
        for s in 0..s_len {
            let a = alpha[t][s];
            let b = beta[t][s];
            if a == ninf || b == ninf {
                continue;
            }
            let lab = ext_label(s);
            let w = (a + b - logp.get(t, lab) - total).exp();
            let g = grad.row_mut(t);
            g[lab] -= w;
        }
    }

    Ok((-total, grad))
}

/// CTC loss as a graph node: the analytic gradient from the forward-backward
/// pass is registered on the log-posterior input.
pub fn ctc_loss(graph: &mut DiffGraph, logp: NodeId, target: &[usize], blank: usize) -> Result<NodeId> {
    let (loss, grad) = ctc_forward_backward(graph.value(logp), target, blank)?;
    graph.cached_grad_loss(logp, loss, grad)
}

/// Plain (non-graph) CTC loss value.
pub fn ctc_loss_value(post: &CtcPosterior, target: &[usize]) -> Result<f64> {
    ctc_forward_backward(&post.logp, target, post.blank).map(|(l, _)| l)
}

/// Collapses a frame path: merge maximal runs, then delete blanks.
pub fn collapse_beta(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &l in labels {
        if prev != Some(l) && l != blank {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Brute-force enumeration of all |V|^T frame paths whose collapse equals the
/// target. Returns +inf when no such path carries probability mass.
pub fn ctc_loss_oracle(post: &CtcPosterior, target: &[usize]) -> Result<f64> {
    let t_max = post.frames();
    let vocab = post.vocab_size();
    if t_max > 8 || vocab > 5 {
        return Err(Error::OracleTooLarge {
            frames: t_max,
            vocab,
        });
    }
    if target.is_empty() {
        return Err(Error::EmptyInput("CTC target".into()));
    }
    if let Some(pos) = target.iter().position(|&t| t == post.blank) {
        return Err(Error::BlankInTarget {
            blank: post.blank,
            pos,
        });
    }

    let mut terms = Vec::new();
    let mut path = vec![0usize; t_max];
    loop {
        if collapse_beta(&path, post.blank) == target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| post.logp.get(t, k)).sum();
            terms.push(lp);
        }
        // Odometer increment.
        let mut pos = 0;
        loop {
            if pos == t_max {
                let total = logsumexp(&terms);
                return Ok(-total); // -logsumexp([]) = +inf: unreachable target.
            }
            path[pos] += 1;
            if path[pos] < vocab {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Per-frame argmax path; exact ties break toward the smaller id.
pub fn greedy_path(logp: &Tensor2D) -> AlignmentPath {
    let labels = (0..logp.rows())
        .map(|t| {
            let row = logp.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    AlignmentPath::from_labels(labels)
}
