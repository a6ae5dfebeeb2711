//! Original and auxiliary branch construction.
//!
//! Shrink averages each maximal run of one CTC-predicted label into a single
//! position; Copy & Replace duplicates the shrunk sequence and swaps
//! non-blank positions for their predicted-token embeddings with probability
//! p*. Replacement is a discrete choice: gradients flow into the embedding
//! rows at replaced positions and into the original features elsewhere,
//! never through the choice itself.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::AlignmentPath;
use crate::error::{Error, Result};
use crate::graph::{DiffGraph, NodeId};

/// Shrunk original branch `o` and auxiliary branch `a`.
#[derive(Debug, Clone)]
pub struct BranchPair {
    pub o: NodeId,
    pub a: NodeId,
    /// Run label per position (blank included).
    pub labels: Vec<usize>,
    pub replace_mask: Vec<bool>,
    pub p_star_used: f64,
}

impl BranchPair {
    pub fn replaced_count(&self) -> usize {
        self.replace_mask.iter().filter(|&&m| m).count()
    }
}

/// How the replacement probability is chosen each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplacePolicy {
    Fixed { p_star: f64 },
    /// p* = clamp(gamma * upsilon, 0, 1) from the original branch's
    /// normalized-entropy uncertainty.
    Dynamic { gamma: f64 },
}

impl ReplacePolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            ReplacePolicy::Fixed { p_star } => {
                if !(0.0..=1.0).contains(p_star) {
                    return Err(Error::InvalidArg(format!("p* {p_star} not in [0, 1]")));
                }
            }
            ReplacePolicy::Dynamic { gamma } => {
                if *gamma < 0.0 {
                    return Err(Error::InvalidArg(format!("gamma {gamma} must be >= 0")));
                }
            }
        }
        Ok(())
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            ReplacePolicy::Fixed { .. } => "fixed",
            ReplacePolicy::Dynamic { .. } => "dynamic",
        }
    }
}

/// Resolves the replacement probability for one step. Dynamic mode needs the
/// uncertainty of the original branch from the same step.
pub fn resolve_p_star(policy: &ReplacePolicy, upsilon: Option<f64>) -> Result<f64> {
    policy.validate()?;
    match policy {
        ReplacePolicy::Fixed { p_star } => Ok(*p_star),
        ReplacePolicy::Dynamic { gamma } => {
            let u = upsilon.ok_or_else(|| {
                Error::InvalidArg("dynamic replacement policy needs upsilon".into())
            })?;
            if !(0.0..=1.0).contains(&u) {
                return Err(Error::InvalidArg(format!("upsilon {u} not in [0, 1]")));
            }
            Ok((gamma * u).clamp(0.0, 1.0))
        }
    }
}

/// Averages each run of the alignment path over the speech output rows.
/// Blank runs are kept as single averaged positions.
pub fn shrink(graph: &mut DiffGraph, h: NodeId, path: &AlignmentPath) -> Result<(NodeId, Vec<usize>)> {
    if path.len() != graph.value(h).rows() {
        return Err(Error::shape(
            "shrink",
            format!("path length {} vs {} frames", path.len(), graph.value(h).rows()),
        ));
    }
    let segments: Vec<(usize, usize)> = path.runs.iter().map(|r| (r.start, r.end)).collect();
    let labels: Vec<usize> = path.runs.iter().map(|r| r.label).collect();
    let o = graph.segment_mean(h, &segments)?;
    Ok((o, labels))
}

/// Copies the original branch and replaces non-blank positions with the
/// (scaled) embedding of their run label with probability `p_star`.
///
/// `embed_scale` matches whatever scaling the shared encoder applies to text
/// embeddings, so replaced positions look exactly like pre-training inputs.
#[allow(clippy::too_many_arguments)]
pub fn copy_replace(
    graph: &mut DiffGraph,
    o: NodeId,
    labels: &[usize],
    embedding_table: NodeId,
    embed_scale: f64,
    blank: usize,
    p_star: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BranchPair> {
    if !(0.0..=1.0).contains(&p_star) {
        return Err(Error::InvalidArg(format!("p* {p_star} not in [0, 1]")));
    }
    let k = graph.value(o).rows();
    if labels.len() != k {
        return Err(Error::shape(
            "copy_replace",
            format!("{} labels for {k} positions", labels.len()),
        ));
    }
    let n_embed = graph.value(embedding_table).rows();
    let mask: Vec<bool> = labels
        .iter()
        .map(|&l| l != blank && rng.gen::<f64>() < p_star)
        .collect();
    // Unreplaced rows gather a dummy id; their rows are masked out below and
    // their gather gradient is exactly zero.
    let gather_ids: Vec<usize> = labels
        .iter()
        .zip(&mask)
        .map(|(&l, &m)| if m { l } else { 0 })
        .collect();
    if let Some(&bad) = gather_ids.iter().find(|&&id| id >= n_embed) {
        return Err(Error::IdOutOfRange { id: bad, vocab: n_embed });
    }
    let gathered = graph.gather_rows(embedding_table, &gather_ids)?;
    let replacements = graph.scale(gathered, embed_scale);
    if graph.value(replacements).cols() != graph.value(o).cols() {
        return Err(Error::shape(
            "copy_replace",
            format!(
                "embedding width {} vs branch width {}",
                graph.value(replacements).cols(),
                graph.value(o).cols()
            ),
        ));
    }
    let a = graph.select_rows(o, replacements, &mask)?;
    Ok(BranchPair {
        o,
        a,
        labels: labels.to_vec(),
        replace_mask: mask,
        p_star_used: p_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::AlignmentPath;
    use crate::rng::stream;
    use crate::tensor::{Precision, Tensor2D};
    use rand::Rng;

    fn graph() -> DiffGraph {
        DiffGraph::new(Precision::F64)
    }

    #[test]
    fn shrink_averages_runs() {
        let mut g = graph();
        let h = g.constant(
            Tensor2D::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap(),
        );
        // path labels [c, c, blank, d] with c=1, blank=0, d=2
        let path = AlignmentPath::from_labels(vec![1, 1, 0, 2]);
        let (o, labels) = shrink(&mut g, h, &path).unwrap();
        assert_eq!(labels, vec![1, 0, 2]);
        assert_eq!(g.value(o).row(0), &[2.0, 3.0]);
        assert_eq!(g.value(o).row(1), &[5.0, 6.0]);
        assert_eq!(g.value(o).row(2), &[7.0, 8.0]);
    }

    #[test]
    fn shrink_identity_when_all_labels_distinct() {
        let mut g = graph();
        let h = g.constant(Tensor2D::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let path = AlignmentPath::from_labels(vec![2, 0, 1]);
        let (o, _) = shrink(&mut g, h, &path).unwrap();
        assert_eq!(g.value(o).data(), g.value(h).data());
    }

    #[test]
    fn shrink_conserves_weighted_row_sums() {
        let mut rng = stream(31, &[0]);
        for _ in 0..20 {
            let t = rng.gen_range(1..10usize);
            let labels: Vec<usize> = (0..t).map(|_| rng.gen_range(0..3usize)).collect();
            let path = AlignmentPath::from_labels(labels);
            let mut g = graph();
            let data: Vec<f64> = (0..t * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let h = g.constant(Tensor2D::from_vec(t, 3, data).unwrap());
            let (o, _) = shrink(&mut g, h, &path).unwrap();
            for c in 0..3 {
                let weighted: f64 = path
                    .runs
                    .iter()
                    .enumerate()
                    .map(|(k, r)| g.value(o).get(k, c) * (r.end - r.start + 1) as f64)
                    .sum();
                let direct: f64 = (0..t).map(|r| g.value(h).get(r, c)).sum();
                assert!((weighted - direct).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shrink_rejects_length_mismatch() {
        let mut g = graph();
        let h = g.constant(Tensor2D::zeros(3, 2));
        let path = AlignmentPath::from_labels(vec![1, 1]);
        assert!(shrink(&mut g, h, &path).is_err());
    }

    fn setup_branch(
        g: &mut DiffGraph,
        k: usize,
        blank: usize,
        seed: u64,
    ) -> (NodeId, Vec<usize>, NodeId) {
        let mut rng = stream(seed, &[1]);
        let o_data: Vec<f64> = (0..k * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let o = g.constant(Tensor2D::from_vec(k, 4, o_data).unwrap());
        let labels: Vec<usize> = (0..k).map(|_| rng.gen_range(0..=blank)).collect();
        let emb_data: Vec<f64> = (0..blank * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let emb = g.constant(Tensor2D::from_vec(blank, 4, emb_data).unwrap());
        (o, labels, emb)
    }

    #[test]
    fn p_star_zero_copies_bitwise() {
        let mut g = graph();
        let (o, labels, emb) = setup_branch(&mut g, 6, 3, 41);
        let mut rng = stream(1, &[2]);
        let pair = copy_replace(&mut g, o, &labels, emb, 1.0, 3, 0.0, &mut rng).unwrap();
        assert!(pair.replace_mask.iter().all(|&m| !m));
        let ov: Vec<u64> = g.value(o).data().iter().map(|v| v.to_bits()).collect();
        let av: Vec<u64> = g.value(pair.a).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ov, av);
    }

    #[test]
    fn p_star_one_replaces_all_non_blank() {
        let mut g = graph();
        let (o, labels, emb) = setup_branch(&mut g, 6, 3, 43);
        let mut rng = stream(2, &[2]);
        let scale = 2.0;
        let pair = copy_replace(&mut g, o, &labels, emb, scale, 3, 1.0, &mut rng).unwrap();
        for (k, &l) in labels.iter().enumerate() {
            if l == 3 {
                assert!(!pair.replace_mask[k]);
                assert_eq!(g.value(pair.a).row(k), g.value(o).row(k));
            } else {
                assert!(pair.replace_mask[k]);
                let expected: Vec<f64> = g.value(emb).row(l).iter().map(|&v| v * scale).collect();
                assert_eq!(g.value(pair.a).row(k), &expected[..]);
            }
        }
    }

    #[test]
    fn replacement_fraction_within_binomial_ci() {
        // ~10^4 non-blank positions at p* = 0.5; 99% CI half-width is
        // 2.576 * sqrt(0.25 / n).
        let mut g = graph();
        let n = 10_000usize;
        let o = g.constant(Tensor2D::zeros(n, 2));
        let labels = vec![1usize; n];
        let emb = g.constant(Tensor2D::zeros(2, 2));
        let mut rng = stream(7, &[3]);
        let pair = copy_replace(&mut g, o, &labels, emb, 1.0, 9, 0.5, &mut rng).unwrap();
        let frac = pair.replaced_count() as f64 / n as f64;
        let half = 2.576 * (0.25 / n as f64).sqrt();
        assert!(
            (frac - 0.5).abs() < half,
            "fraction {frac} outside 99% CI +-{half}"
        );
    }

    #[test]
    fn same_seed_same_mask() {
        let build = |seed: u64| {
            let mut g = graph();
            let (o, labels, emb) = setup_branch(&mut g, 8, 3, 47);
            let mut rng = stream(seed, &[4]);
            copy_replace(&mut g, o, &labels, emb, 1.0, 3, 0.5, &mut rng)
                .unwrap()
                .replace_mask
        };
        assert_eq!(build(5), build(5));
    }

    #[test]
    fn aux_differs_only_on_masked_positions() {
        let mut g = graph();
        let (o, labels, emb) = setup_branch(&mut g, 10, 4, 53);
        let mut rng = stream(11, &[5]);
        let pair = copy_replace(&mut g, o, &labels, emb, 1.0, 4, 0.6, &mut rng).unwrap();
        for k in 0..10 {
            let same = g.value(pair.a).row(k) == g.value(o).row(k);
            if !pair.replace_mask[k] {
                assert!(same);
            }
            if pair.replace_mask[k] {
                assert!(labels[k] != 4, "blank must never be replaced");
            }
        }
    }

    #[test]
    fn invalid_p_star_rejected() {
        let mut g = graph();
        let (o, labels, emb) = setup_branch(&mut g, 3, 2, 59);
        let mut rng = stream(1, &[6]);
        assert!(copy_replace(&mut g, o, &labels, emb, 1.0, 2, 1.5, &mut rng).is_err());
        assert!(copy_replace(&mut g, o, &labels, emb, 1.0, 2, -0.1, &mut rng).is_err());
    }

    #[test]
    fn resolve_p_star_rules() {
        let dynamic = ReplacePolicy::Dynamic { gamma: 0.5 };
        assert_eq!(resolve_p_star(&dynamic, Some(0.6)).unwrap(), 0.3);
        assert_eq!(resolve_p_star(&dynamic, Some(0.0)).unwrap(), 0.0);
        assert!(resolve_p_star(&dynamic, None).is_err());
        let fixed = ReplacePolicy::Fixed { p_star: 0.2 };
        assert_eq!(resolve_p_star(&fixed, Some(0.9)).unwrap(), 0.2);
        assert_eq!(resolve_p_star(&fixed, None).unwrap(), 0.2);
    }

    #[test]
    fn dynamic_p_star_bounded_by_gamma() {
        let policy = ReplacePolicy::Dynamic { gamma: 0.5 };
        let mut rng = stream(3, &[7]);
        for _ in 0..50 {
            let u: f64 = rng.gen();
            let p = resolve_p_star(&policy, Some(u)).unwrap();
            assert!((0.0..=0.5).contains(&p));
        }
    }

    #[test]
    fn replaced_positions_route_gradient_to_embeddings() {
        let mut g = graph();
        let o = g.constant(Tensor2D::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let emb = g.constant(Tensor2D::from_vec(2, 2, vec![0.5, 0.5, 0.25, 0.25]).unwrap());
        let labels = vec![1usize, 1];
        let mut rng = stream(1, &[8]);
        let pair = copy_replace(&mut g, o, &labels, emb, 1.0, 2, 1.0, &mut rng).unwrap();
        let loss = g.sum_all(pair.a);
        let grads = g.backward(loss).unwrap();
        // Both rows replaced by embedding row 1: its grad is 2 per column.
        assert_eq!(grads.get(emb).unwrap().row(1), &[2.0, 2.0]);
        assert_eq!(grads.get(emb).unwrap().row(0), &[0.0, 0.0]);
        // Nothing flows into o.
        assert!(grads.get(o).is_none() || grads.get(o).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
