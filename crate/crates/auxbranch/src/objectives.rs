//! Training objectives: label-smoothed cross-entropy per branch, consistency
//! divergences between branch output distributions, normalized-entropy
//! uncertainty, and the composite loss.

use crate::error::{Error, Result};
use crate::graph::{DiffGraph, NodeId};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceKind {
    None,
    Jsd,
    KlOrigToAux,
    KlAuxToOrig,
    BiKl,
}

impl DivergenceKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DivergenceKind::None),
            "jsd" => Ok(DivergenceKind::Jsd),
            "kl_orig_to_aux" => Ok(DivergenceKind::KlOrigToAux),
            "kl_aux_to_orig" => Ok(DivergenceKind::KlAuxToOrig),
            "bi_kl" => Ok(DivergenceKind::BiKl),
            other => Err(Error::Config(format!("unknown divergence '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DivergenceKind::None => "none",
            DivergenceKind::Jsd => "jsd",
            DivergenceKind::KlOrigToAux => "kl_orig_to_aux",
            DivergenceKind::KlAuxToOrig => "kl_aux_to_orig",
            DivergenceKind::BiKl => "bi_kl",
        }
    }

    pub fn all() -> [DivergenceKind; 5] {
        [
            DivergenceKind::None,
            DivergenceKind::Jsd,
            DivergenceKind::KlOrigToAux,
            DivergenceKind::KlAuxToOrig,
            DivergenceKind::BiKl,
        ]
    }
}

/// Which side of the consistency loss carries gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsGradFlow {
    Both,
    OrigOnly,
    AuxOnly,
}

impl ConsGradFlow {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ConsGradFlow::Both),
            "orig_only" => Ok(ConsGradFlow::OrigOnly),
            "aux_only" => Ok(ConsGradFlow::AuxOnly),
            other => Err(Error::Config(format!("unknown cons_grad_flow '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConsGradFlow::Both => "both",
            ConsGradFlow::OrigOnly => "orig_only",
            ConsGradFlow::AuxOnly => "aux_only",
        }
    }
}

fn check_distribution(row: &[f64], idx: usize) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
        return Err(Error::Unnormalized { row: idx, sum });
    }
    Ok(())
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi.ln() - qi.ln()) } else { 0.0 })
        .sum()
}

/// Divergence between two probability rows.
pub fn divergence(p: &[f64], q: &[f64], kind: DivergenceKind) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("divergence", format!("{} vs {}", p.len(), q.len())));
    }
    check_distribution(p, 0)?;
    check_distribution(q, 1)?;
    Ok(match kind {
        DivergenceKind::None => 0.0,
        DivergenceKind::KlOrigToAux => kl(p, q),
        DivergenceKind::KlAuxToOrig => kl(q, p),
        DivergenceKind::BiKl => 0.5 * (kl(p, q) + kl(q, p)),
        DivergenceKind::Jsd => {
            let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
            0.5 * (kl(p, &m) + kl(q, &m))
        }
    })
}

/// Builds a scalar node: sum_i w_i * sum_j P_ij * (lp_ij - lq_ij), i.e. a
/// row-weighted KL(P || Q) from log-prob nodes.
fn weighted_kl_node(
    graph: &mut DiffGraph,
    lp: NodeId,
    lq: NodeId,
    weights: NodeId,
) -> Result<NodeId> {
    let p = graph.exp(lp);
    let diff = graph.sub(lp, lq)?;
    let terms = graph.mul(p, diff)?;
    let row_sums = graph.sum_cols(terms);
    let weighted = graph.matmul(weights, row_sums)?;
    Ok(weighted)
}

/// JSD variant of the above. M = (P + Q) / 2 is built explicitly.
fn weighted_jsd_node(
    graph: &mut DiffGraph,
    lp: NodeId,
    lq: NodeId,
    weights: NodeId,
) -> Result<NodeId> {
    let p = graph.exp(lp);
    let q = graph.exp(lq);
    let sum = graph.add(p, q)?;
    let m = graph.scale(sum, 0.5);
    let log_m = graph.log(m);
    let dp = graph.sub(lp, log_m)?;
    let dq = graph.sub(lq, log_m)?;
    let tp = graph.mul(p, dp)?;
    let tq = graph.mul(q, dq)?;
    let both = graph.add(tp, tq)?;
    let half = graph.scale(both, 0.5);
    let row_sums = graph.sum_cols(half);
    graph.matmul(weights, row_sums)
}

/// Mean-over-positions consistency loss between two teacher-forced log-prob
/// matrices. `mask[j] == false` rows are excluded. Returns `None` for
/// `DivergenceKind::None` without touching the graph.
pub fn consistency_loss(
    graph: &mut DiffGraph,
    lp: NodeId,
    lq: NodeId,
    mask: &[bool],
    kind: DivergenceKind,
) -> Result<Option<NodeId>> {
    if kind == DivergenceKind::None {
        return Ok(None);
    }
    let (pr, pc) = graph.value(lp).shape();
    let (qr, qc) = graph.value(lq).shape();
    if (pr, pc) != (qr, qc) {
        return Err(Error::shape(
            "consistency_loss",
            format!("{pr}x{pc} vs {qr}x{qc}"),
        ));
    }
    if mask.len() != pr {
        return Err(Error::shape(
            "consistency_loss",
            format!("mask length {} for {pr} rows", mask.len()),
        ));
    }
    let n_active = mask.iter().filter(|&&m| m).count();
    if n_active == 0 {
        return Err(Error::EmptyInput("consistency_loss with all positions masked".into()));
    }
    let w = 1.0 / n_active as f64;
    let weights: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
    let weights = graph.constant(Tensor2D::row_vec(weights));

    let node = match kind {
        DivergenceKind::None => unreachable!(),
        DivergenceKind::KlOrigToAux => weighted_kl_node(graph, lp, lq, weights)?,
        DivergenceKind::KlAuxToOrig => weighted_kl_node(graph, lq, lp, weights)?,
        DivergenceKind::BiKl => {
            let a = weighted_kl_node(graph, lp, lq, weights)?;
            let b = weighted_kl_node(graph, lq, lp, weights)?;
            let s = graph.add(a, b)?;
            graph.scale(s, 0.5)
        }
        DivergenceKind::Jsd => weighted_jsd_node(graph, lp, lq, weights)?,
    };
    Ok(Some(node))
}

/// Label-smoothed cross-entropy over teacher-forced log-probs, averaged over
/// unmasked positions: (1-eps) * NLL(gold) + eps * mean-over-vocab NLL.
pub fn ce_label_smoothed(
    graph: &mut DiffGraph,
    logp: NodeId,
    targets: &[usize],
    mask: &[bool],
    smoothing: f64,
) -> Result<NodeId> {
    let (rows, vocab) = graph.value(logp).shape();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape(
            "ce_label_smoothed",
            format!("{rows} rows vs {} targets, {} mask", targets.len(), mask.len()),
        ));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArg(format!("smoothing {smoothing} not in [0, 1)")));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::IdOutOfRange { id: bad, vocab });
    }
    let active: Vec<usize> = (0..rows).filter(|&j| mask[j]).collect();
    if active.is_empty() {
        return Err(Error::EmptyInput("ce_label_smoothed with all positions masked".into()));
    }
    // Gold entries are picked structurally (not by a one-hot product), so
    // exact one-hot predictions with -inf log-probs stay well defined.
    let w = 1.0 / active.len() as f64;
    let gold_coords: Vec<(usize, usize)> = active.iter().map(|&j| (j, targets[j])).collect();
    let gold = graph.gather_entries(logp, &gold_coords)?;
    let gold_w = graph.constant(Tensor2D::row_vec(vec![-w * (1.0 - smoothing); active.len()]));
    let mut loss = graph.matmul(gold_w, gold)?;
    if smoothing > 0.0 {
        let row_sums = graph.sum_cols(logp);
        let sum_coords: Vec<(usize, usize)> = active.iter().map(|&j| (j, 0)).collect();
        let active_sums = graph.gather_entries(row_sums, &sum_coords)?;
        let smooth_w = graph.constant(Tensor2D::row_vec(vec![
            -w * smoothing / vocab as f64;
            active.len()
        ]));
        let smooth_term = graph.matmul(smooth_w, active_sums)?;
        loss = graph.add(loss, smooth_term)?;
    }
    Ok(loss)
}

/// Mean normalized entropy of teacher-forced probability rows, in [0, 1].
pub fn normalized_entropy(probs: &Tensor2D, vocab_size: usize) -> Result<f64> {
    if vocab_size < 2 {
        return Err(Error::InvalidArg(format!("vocab size {vocab_size} < 2")));
    }
    if probs.rows() == 0 {
        return Err(Error::EmptyInput("normalized_entropy with no rows".into()));
    }
    let mut total = 0.0;
    for i in 0..probs.rows() {
        check_distribution(probs.row(i), i)?;
        let h: f64 = probs
            .row(i)
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum();
        total += h;
    }
    Ok(total / (probs.rows() as f64 * (vocab_size as f64).ln()))
}

/// Literal gold-token reading of the uncertainty: -(1/log V)(1/|y|) sum_j
/// P_j(y_j) log P_j(y_j). Kept as a config alternative; unlike
/// `normalized_entropy` it is not an entropy and not bounded by 1.
pub fn gold_scalar_uncertainty(probs: &Tensor2D, targets: &[usize], vocab_size: usize) -> Result<f64> {
    if vocab_size < 2 {
        return Err(Error::InvalidArg(format!("vocab size {vocab_size} < 2")));
    }
    if targets.len() != probs.rows() {
        return Err(Error::shape(
            "gold_scalar_uncertainty",
            format!("{} rows vs {} targets", probs.rows(), targets.len()),
        ));
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= probs.cols() {
            return Err(Error::IdOutOfRange { id: t, vocab: probs.cols() });
        }
        let p = probs.get(i, t);
        if p > 0.0 {
            total += -p * p.ln();
        }
    }
    Ok(total / (targets.len() as f64 * (vocab_size as f64).ln()))
}

/// The components of one training step's loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce_o: f64,
    pub ce_a: f64,
    pub ctc: f64,
    pub cons: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Absolute decomposition error; must be ~0 (<= 1e-9) by construction.
    pub fn decomposition_error(&self) -> f64 {
        (self.total - (self.ce_o + self.ce_a + self.lambda * self.ctc + self.alpha * self.cons)).abs()
    }
}

/// Assembles total = ce_o + ce_a + lambda*ctc + alpha*cons as a graph node
/// plus the value-level breakdown. Absent components contribute zero.
pub fn total_loss(
    graph: &mut DiffGraph,
    ce_o: NodeId,
    ce_a: Option<NodeId>,
    ctc: Option<NodeId>,
    cons: Option<NodeId>,
    lambda: f64,
    alpha: f64,
) -> Result<(NodeId, LossBreakdown)> {
    if lambda < 0.0 || alpha < 0.0 {
        return Err(Error::InvalidArg(format!(
            "loss weights must be non-negative (lambda {lambda}, alpha {alpha})"
        )));
    }
    let mut node = ce_o;
    if let Some(a) = ce_a {
        node = graph.add(node, a)?;
    }
    if let Some(c) = ctc {
        let scaled = graph.scale(c, lambda);
        node = graph.add(node, scaled)?;
    }
    if alpha > 0.0 {
        if let Some(c) = cons {
            let scaled = graph.scale(c, alpha);
            node = graph.add(node, scaled)?;
        }
    }
    let breakdown = LossBreakdown {
        ce_o: graph.value(ce_o).item(),
        ce_a: ce_a.map(|n| graph.value(n).item()).unwrap_or(0.0),
        ctc: ctc.map(|n| graph.value(n).item()).unwrap_or(0.0),
        cons: cons.map(|n| graph.value(n).item()).unwrap_or(0.0),
        lambda,
        alpha,
        total: graph.value(node).item(),
    };
    Ok((node, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::rowwise_log_softmax;
    use crate::params::ParamSet;
    use crate::tensor::Precision;
    use rand::Rng;

    fn graph() -> DiffGraph {
        DiffGraph::new(Precision::F64)
    }

    #[test]
    fn ce_zero_when_certain() {
        let mut g = graph();
        // log p(gold) = 0 on both positions.
        let lp = g.constant(
            Tensor2D::from_vec(
                2,
                3,
                vec![
                    0.0,
                    f64::NEG_INFINITY,
                    f64::NEG_INFINITY,
                    f64::NEG_INFINITY,
                    0.0,
                    f64::NEG_INFINITY,
                ],
            )
            .unwrap(),
        );
        let loss = ce_label_smoothed(&mut g, lp, &[0, 1], &[true, true], 0.0).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn ce_half_prob_is_ln2() {
        let mut g = graph();
        let lp = g.constant(Tensor2D::row_vec(vec![(0.5f64).ln(), (0.5f64).ln()]));
        let loss = ce_label_smoothed(&mut g, lp, &[0], &[true], 0.0).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_uniform_prediction_is_ln_v() {
        for eps in [0.0, 0.1, 0.5] {
            let mut g = graph();
            let v = 7;
            let lp = g.constant(Tensor2D::filled(3, v, -(v as f64).ln()));
            let loss = ce_label_smoothed(&mut g, lp, &[0, 3, 6], &[true; 3], eps).unwrap();
            assert!((g.value(loss).item() - (v as f64).ln()).abs() < 1e-12, "eps={eps}");
        }
    }

    #[test]
    fn ce_masked_rows_do_not_contribute() {
        let mut rng = crate::rng::stream(3, &[0]);
        let logits =
            Tensor2D::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let lp_vals = rowwise_log_softmax(&logits);
        let mut g = graph();
        let lp = g.constant(lp_vals.clone());
        let full = ce_label_smoothed(&mut g, lp, &[1, 2, 3], &[true, true, false], 0.1).unwrap();
        // Same computation on only the first two rows.
        let mut g2 = graph();
        let lp2 = g2.constant(lp_vals.slice_rows(0, 2));
        let trimmed = ce_label_smoothed(&mut g2, lp2, &[1, 2], &[true, true], 0.1).unwrap();
        assert!((g.value(full).item() - g2.value(trimmed).item()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_range_target() {
        let mut g = graph();
        let lp = g.constant(Tensor2D::filled(1, 3, -(3f64).ln()));
        assert!(matches!(
            ce_label_smoothed(&mut g, lp, &[3], &[true], 0.0),
            Err(Error::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn divergence_zero_for_equal_inputs() {
        let p = vec![0.2, 0.5, 0.3];
        for kind in DivergenceKind::all() {
            assert!(divergence(&p, &p, kind).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn jsd_bounded_by_ln2() {
        let p = vec![1.0 - 1e-9, 1e-9];
        let q = vec![1e-9, 1.0 - 1e-9];
        let j = divergence(&p, &q, DivergenceKind::Jsd).unwrap();
        assert!(j <= std::f64::consts::LN_2 + 1e-12);
        assert!(j > std::f64::consts::LN_2 - 1e-6);
    }

    #[test]
    fn bi_kl_matches_hand_sum() {
        let p = vec![0.9, 0.1];
        let q = vec![0.6, 0.4];
        let klpq = 0.9 * (0.9f64 / 0.6).ln() + 0.1 * (0.1f64 / 0.4).ln();
        let klqp = 0.6 * (0.6f64 / 0.9).ln() + 0.4 * (0.4f64 / 0.1).ln();
        let bi = divergence(&p, &q, DivergenceKind::BiKl).unwrap();
        assert!((bi - 0.5 * (klpq + klqp)).abs() < 1e-12);
        // Direction check for the unidirectional kinds.
        assert!((divergence(&p, &q, DivergenceKind::KlOrigToAux).unwrap() - klpq).abs() < 1e-12);
        assert!((divergence(&p, &q, DivergenceKind::KlAuxToOrig).unwrap() - klqp).abs() < 1e-12);
    }

    #[test]
    fn divergence_rejects_unnormalized() {
        let p = vec![0.9, 0.3];
        let q = vec![0.5, 0.5];
        assert!(matches!(
            divergence(&p, &q, DivergenceKind::BiKl),
            Err(Error::Unnormalized { .. })
        ));
    }

    #[test]
    fn consistency_none_creates_no_nodes() {
        let mut g = graph();
        let lp = g.constant(Tensor2D::filled(2, 3, -(3f64).ln()));
        let lq = g.constant(Tensor2D::filled(2, 3, -(3f64).ln()));
        let before = g.len();
        let out = consistency_loss(&mut g, lp, lq, &[true, true], DivergenceKind::None).unwrap();
        assert!(out.is_none());
        assert_eq!(g.len(), before);
    }

    #[test]
    fn consistency_matches_divergence_on_single_row() {
        let mut rng = crate::rng::stream(5, &[0]);
        let la = rowwise_log_softmax(
            &Tensor2D::from_vec(1, 4, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let lb = rowwise_log_softmax(
            &Tensor2D::from_vec(1, 4, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let pa: Vec<f64> = la.row(0).iter().map(|&v| v.exp()).collect();
        let pb: Vec<f64> = lb.row(0).iter().map(|&v| v.exp()).collect();
        for kind in [
            DivergenceKind::Jsd,
            DivergenceKind::KlOrigToAux,
            DivergenceKind::KlAuxToOrig,
            DivergenceKind::BiKl,
        ] {
            let mut g = graph();
            let lp = g.constant(la.clone());
            let lq = g.constant(lb.clone());
            let node = consistency_loss(&mut g, lp, lq, &[true], kind).unwrap().unwrap();
            let direct = divergence(&pa, &pb, kind).unwrap();
            assert!(
                (g.value(node).item() - direct).abs() < 1e-10,
                "{kind:?}: {} vs {direct}",
                g.value(node).item()
            );
        }
    }

    #[test]
    fn consistency_zero_on_identical_branches() {
        let mut g = graph();
        let vals = rowwise_log_softmax(
            &Tensor2D::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        );
        let lp = g.constant(vals.clone());
        let lq = g.constant(vals);
        for kind in [DivergenceKind::Jsd, DivergenceKind::BiKl] {
            let node = consistency_loss(&mut g, lp, lq, &[true; 3], kind).unwrap().unwrap();
            assert!(g.value(node).item().abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_rejects_length_mismatch() {
        let mut g = graph();
        let lp = g.constant(Tensor2D::filled(2, 3, -(3f64).ln()));
        let lq = g.constant(Tensor2D::filled(3, 3, -(3f64).ln()));
        assert!(consistency_loss(&mut g, lp, lq, &[true, true], DivergenceKind::BiKl).is_err());
    }

    #[test]
    fn all_divergence_gradients_pass_finite_differences() {
        for kind in [
            DivergenceKind::Jsd,
            DivergenceKind::KlOrigToAux,
            DivergenceKind::KlAuxToOrig,
            DivergenceKind::BiKl,
        ] {
            let mut rng = crate::rng::stream(7, &[kind as u64]);
            let mut params = ParamSet::new(0);
            params
                .insert(
                    "a",
                    Tensor2D::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap(),
                )
                .unwrap();
            params
                .insert(
                    "b",
                    Tensor2D::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap(),
                )
                .unwrap();
            let report = crate::gradcheck::grad_check(
                |g, ps| {
                    let a = g.param(ps, "a")?;
                    let b = g.param(ps, "b")?;
                    let lp = g.log_softmax(a);
                    let lq = g.log_softmax(b);
                    Ok(consistency_loss(g, lp, lq, &[true, true, false], kind)?
                        .expect("kind is not none"))
                },
                &mut params,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{kind:?}:\n{}", report.summary());
        }
    }

    #[test]
    fn entropy_uniform_is_one() {
        let p = Tensor2D::filled(3, 5, 0.2);
        assert!((normalized_entropy(&p, 5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        let mut p = Tensor2D::zeros(2, 4);
        p.set(0, 1, 1.0);
        p.set(1, 3, 1.0);
        assert_eq!(normalized_entropy(&p, 4).unwrap(), 0.0);
    }

    #[test]
    fn entropy_closed_form_binary_case() {
        let p = Tensor2D::from_vec(2, 2, vec![0.75, 0.25, 0.75, 0.25]).unwrap();
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let expected = h / std::f64::consts::LN_2;
        let got = normalized_entropy(&p, 2).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.8113).abs() < 1e-4);
    }

    #[test]
    fn entropy_rejects_tiny_vocab() {
        let p = Tensor2D::filled(1, 1, 1.0);
        assert!(normalized_entropy(&p, 1).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = graph();
        let ce_o = g.scalar(1.0);
        let ce_a = g.scalar(1.0);
        let ctc = g.scalar(2.0);
        let cons = g.scalar(0.5);
        let (node, bd) = total_loss(&mut g, ce_o, Some(ce_a), Some(ctc), Some(cons), 0.3, 1.0).unwrap();
        assert!((g.value(node).item() - 3.1).abs() < 1e-12);
        assert!(bd.decomposition_error() <= 1e-9);
    }

    #[test]
    fn total_loss_alpha_zero_ignores_cons() {
        let mut g = graph();
        let ce_o = g.scalar(1.0);
        let cons = g.scalar(123.0);
        let (node, bd) = total_loss(&mut g, ce_o, None, None, Some(cons), 0.3, 0.0).unwrap();
        assert_eq!(g.value(node).item(), 1.0);
        assert_eq!(bd.alpha, 0.0);
        assert!(bd.decomposition_error() <= 1e-9);
    }

    #[test]
    fn total_loss_rejects_negative_weights() {
        let mut g = graph();
        let ce_o = g.scalar(1.0);
        assert!(total_loss(&mut g, ce_o, None, None, None, -0.1, 0.0).is_err());
        let ce_o = g.scalar(1.0);
        assert!(total_loss(&mut g, ce_o, None, None, None, 0.0, -1.0).is_err());
    }

    #[test]
    fn ce_gradient_passes_finite_differences() {
        let mut rng = crate::rng::stream(9, &[0]);
        let mut params = ParamSet::new(0);
        params
            .insert(
                "logits",
                Tensor2D::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
            )
            .unwrap();
        let report = crate::gradcheck::grad_check(
            |g, ps| {
                let logits = g.param(ps, "logits")?;
                let lp = g.log_softmax(logits);
                ce_label_smoothed(g, lp, &[0, 2, 1, 1], &[true, true, true, false], 0.1)
            },
            &mut params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }
}
