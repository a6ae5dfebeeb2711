//! Self-check suites shared by the CLI and the acceptance tests: CTC
//! loss-vs-enumeration equivalence and gradient validation of every
//! objective, including the full two-branch composite.

use rand::Rng;

use crate::branch::ReplacePolicy;
use crate::corpus::{build_corpus, CorpusConfig, UtteranceTriple};
use crate::ctc::{ctc_loss, ctc_loss_oracle, ctc_loss_value, CtcPosterior};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::rowwise_log_softmax;
use crate::model::{forward_tab, EntropyMode, ModelConfig, StModel, TabSettings};
use crate::objectives::{ce_label_smoothed, consistency_loss, ConsGradFlow, DivergenceKind};
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::Tensor2D;

/// Randomized equivalence of the forward-backward CTC loss against the path
/// enumeration oracle. Returns (instances checked, max abs difference).
pub fn ctc_oracle_suite(cases: usize, seed: u64) -> Result<(usize, f64)> {
    let mut rng = rng::stream(seed, &[70]);
    let mut max_diff: f64 = 0.0;
    let mut checked = 0;
    while checked < cases {
        let v = rng.gen_range(2..=4usize);
        let t = rng.gen_range(1..=6usize);
        let xlen = rng.gen_range(1..=3usize);
        let target: Vec<usize> = (0..xlen).map(|_| rng.gen_range(1..v)).collect();
        if crate::ctc::min_frames(&target) > t {
            continue;
        }
        let logits =
            Tensor2D::from_vec(t, v, (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect())?;
        let post = CtcPosterior::new(rowwise_log_softmax(&logits), 0)?;
        let fast = ctc_loss_value(&post, &target)?;
        let slow = ctc_loss_oracle(&post, &target)?;
        max_diff = max_diff.max((fast - slow).abs());
        checked += 1;
    }
    Ok((checked, max_diff))
}

const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn ce_check(seed: u64) -> Result<(String, GradCheckReport)> {
    let mut rng = rng::stream(seed, &[71]);
    let mut params = ParamSet::new(seed);
    params.insert(
        "logits",
        Tensor2D::from_vec(4, 5, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect())?,
    )?;
    let report = grad_check(
        |g, ps| {
            let logits = g.param(ps, "logits")?;
            let lp = g.log_softmax(logits);
            ce_label_smoothed(g, lp, &[0, 2, 4, 1], &[true, true, true, false], 0.1)
        },
        &mut params,
        GRAD_EPS,
        GRAD_TOL,
    )?;
    Ok(("ce_label_smoothed".into(), report))
}

fn divergence_check(kind: DivergenceKind, seed: u64) -> Result<(String, GradCheckReport)> {
    let mut rng = rng::stream(seed, &[72, kind as u64]);
    let mut params = ParamSet::new(seed);
    for name in ["a", "b"] {
        params.insert(
            name,
            Tensor2D::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())?,
        )?;
    }
    let report = grad_check(
        |g, ps| {
            let a = g.param(ps, "a")?;
            let b = g.param(ps, "b")?;
            let lp = g.log_softmax(a);
            let lq = g.log_softmax(b);
            Ok(consistency_loss(g, lp, lq, &[true, true, true], kind)?.expect("non-none kind"))
        },
        &mut params,
        GRAD_EPS,
        GRAD_TOL,
    )?;
    Ok((format!("divergence_{}", kind.name()), report))
}

fn ctc_check(seed: u64) -> Result<(String, GradCheckReport)> {
    let mut rng = rng::stream(seed, &[73]);
    let mut params = ParamSet::new(seed);
    params.insert(
        "logits",
        Tensor2D::from_vec(6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())?,
    )?;
    let report = grad_check(
        |g, ps| {
            let logits = g.param(ps, "logits")?;
            let lp = g.log_softmax(logits);
            ctc_loss(g, lp, &[1, 3], 0)
        },
        &mut params,
        GRAD_EPS,
        GRAD_TOL,
    )?;
    Ok(("ctc_loss".into(), report))
}

fn micro_corpus(seed: u64) -> Result<(ModelConfig, Vec<UtteranceTriple>, crate::corpus::CorpusBundle)> {
    let corpus_cfg = CorpusConfig {
        n_source: 4,
        n_target: 5,
        d_feat: 4,
        min_len: 2,
        max_len: 2,
        asr_size: 1,
        mt_size: 1,
        st_train_size: 2,
        st_dev_size: 1,
        st_test_size: 1,
        ..CorpusConfig::default()
    };
    let corpus = build_corpus(&corpus_cfg, seed)?;
    let model_cfg = ModelConfig {
        d_model: 8,
        d_feat: 4,
        speech_layers: 1,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_dim: 12,
        dropout_pretrain: 0.1,
        dropout_finetune: 0.1,
        downsample_factor: 4,
    };
    let batch = corpus.st_train.clone();
    Ok((model_cfg, batch, corpus))
}

/// Gradient check of the full two-branch composite on a 2-utterance batch.
/// Dropout stays on but frozen: the builder derives all masks from a fixed
/// step seed, so they replay across the finite-difference evaluations.
fn composite_check(seed: u64) -> Result<(String, GradCheckReport)> {
    let (model_cfg, batch, corpus) = micro_corpus(seed)?;
    let model = StModel::new(&model_cfg, &corpus.vocab, seed)?;
    let settings = TabSettings {
        policy: ReplacePolicy::Fixed { p_star: 0.5 },
        divergence: DivergenceKind::BiKl,
        label_smoothing: 0.1,
        lambda: 0.3,
        alpha: 1.0,
        single_branch: false,
        entropy_mode: EntropyMode::FullDistribution,
        upsilon_ema: 0.0,
        dropout: 0.1,
        cons_grad_flow: ConsGradFlow::Both,
    };
    let refs: Vec<&UtteranceTriple> = batch.iter().collect();
    // Parameters owned by the checker; the model is rebuilt around them.
    let mut params = model.params.clone();
    let template = model;
    let report = grad_check(
        |g, ps| {
            let mut m = template.clone();
            m.params = ps.clone();
            let out = forward_tab(g, &m, &refs, &settings, None, true, 12345)?;
            Ok(out.total)
        },
        &mut params,
        GRAD_EPS,
        GRAD_TOL,
    )?;
    Ok(("forward_tab_composite".into(), report))
}

/// The standard gradient validation suite: CE, every divergence kind, CTC,
/// and the full fine-tuning composite.
pub fn grad_check_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    out.push(ce_check(seed)?);
    for kind in [
        DivergenceKind::Jsd,
        DivergenceKind::KlOrigToAux,
        DivergenceKind::KlAuxToOrig,
        DivergenceKind::BiKl,
    ] {
        out.push(divergence_check(kind, seed)?);
    }
    out.push(ctc_check(seed)?);
    out.push(composite_check(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suite_agrees() {
        let (n, max_diff) = ctc_oracle_suite(50, 99).unwrap();
        assert_eq!(n, 50);
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn composite_gradient_check_passes() {
        let (name, report) = composite_check(7).unwrap();
        assert_eq!(name, "forward_tab_composite");
        assert!(report.passed(), "{}", report.summary());
    }
}
