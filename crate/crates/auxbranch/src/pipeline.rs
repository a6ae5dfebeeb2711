//! The pre-train / fine-tune pipeline: ASR pre-training (CTC), MT
//! pre-training (CE), ST fine-tuning with the auxiliary branch, early
//! stopping on dev metrics, and best-k checkpoint tracking.

use std::path::Path;

use crate::branch::ReplacePolicy;
use crate::checkpoint::{average_checkpoints, Checkpoint};
use crate::config::{Config, PStarMode};
use crate::corpus::CorpusBundle;
use crate::decode::{mt_token_accuracy, translate_bleu};
use crate::error::{Error, Result};
use crate::graph::DiffGraph;
use crate::model::{
    asr_forward, forward_tab, init_from_pretrained, mt_forward, EntropyMode, FwdCtx, ModelConfig,
    StModel, TabSettings,
};
use crate::objectives::{ConsGradFlow, DivergenceKind};
use crate::optim::{adam_step, lr_at, AdamState, Schedule};
use crate::rng::{self, tags};
use crate::tensor::Precision;

const TAG_STEP: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Asr,
    Mt,
    St,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Asr => "asr",
            Stage::Mt => "mt",
            Stage::St => "st",
        }
    }
}

/// Stage-resolved training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    pub beta1: f64,
    pub beta2: f64,
    pub peak_lr: f64,
    pub warmup: u64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub max_epochs: u64,
    pub patience: u64,
    pub label_smoothing: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub divergence: DivergenceKind,
    pub policy: ReplacePolicy,
    pub single_branch: bool,
    pub entropy_mode: EntropyMode,
    pub upsilon_ema: f64,
    pub cons_grad_flow: ConsGradFlow,
    pub precision: Precision,
    pub ckpt_keep: usize,
    pub seed: u64,
    pub beam_size: usize,
    pub max_decode_len: usize,
}

impl TrainConfig {
    pub fn from_config(cfg: &Config, stage: Stage) -> TrainConfig {
        let beta2 = match stage {
            Stage::Asr => cfg.beta2_asr,
            Stage::Mt => cfg.beta2_mt,
            Stage::St => cfg.beta2_st,
        };
        TrainConfig {
            stage,
            beta1: cfg.beta1,
            beta2,
            peak_lr: cfg.peak_lr,
            warmup: cfg.warmup_steps,
            schedule: cfg.schedule,
            batch_size: cfg.batch_size,
            max_epochs: cfg.max_epochs,
            patience: cfg.patience,
            label_smoothing: cfg.label_smoothing,
            lambda: cfg.lambda,
            alpha: cfg.alpha,
            divergence: cfg.divergence,
            policy: cfg.replace_policy(),
            single_branch: cfg.single_branch,
            entropy_mode: cfg.entropy_mode,
            upsilon_ema: cfg.upsilon_ema,
            cons_grad_flow: cfg.cons_grad_flow,
            precision: cfg.precision,
            ckpt_keep: cfg.ckpt_keep,
            seed: cfg.seed,
            beam_size: cfg.beam_size,
            max_decode_len: cfg.max_decode_len,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.warmup < 1 || self.patience < 1 || self.alpha < 0.0 {
            return Err(Error::InvalidArg(
                "train config needs warmup >= 1, patience >= 1, alpha >= 0".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArg("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn tab_settings(&self, model_cfg: &ModelConfig) -> TabSettings {
        TabSettings {
            policy: self.policy,
            divergence: self.divergence,
            label_smoothing: self.label_smoothing,
            lambda: self.lambda,
            alpha: self.alpha,
            single_branch: self.single_branch,
            entropy_mode: self.entropy_mode,
            upsilon_ema: self.upsilon_ema,
            dropout: model_cfg.dropout_for_stage(true),
            cons_grad_flow: self.cons_grad_flow,
        }
    }
}

pub const METRICS_HEADER: &str = "step,epoch,stage,loss_ce_o,loss_ce_a,loss_ctc,loss_cons,loss_total,ratio_aux_orig,upsilon,p_star,lr,acc_o,acc_a";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: u64,
    pub stage: Stage,
    pub ce_o: f64,
    pub ce_a: f64,
    pub ctc: f64,
    pub cons: f64,
    pub total: f64,
    pub ratio_aux_orig: f64,
    pub upsilon: f64,
    pub p_star: f64,
    pub lr: f64,
    pub acc_o: f64,
    pub acc_a: f64,
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.stage.name(),
            self.ce_o,
            self.ce_a,
            self.ctc,
            self.cons,
            self.total,
            self.ratio_aux_orig,
            self.upsilon,
            self.p_star,
            self.lr,
            self.acc_o,
            self.acc_a
        )
    }

    /// Loss decomposition residual; zero (<= 1e-9) on every logged row.
    pub fn decomposition_error(&self, lambda: f64, alpha: f64) -> f64 {
        (self.total - (self.ce_o + self.ce_a + lambda * self.ctc + alpha * self.cons)).abs()
    }
}

/// One training run's log: per-step metric rows, per-epoch dev scores, and
/// the stopping bookkeeping. The convergence epoch is the best-dev epoch;
/// when early stopping fires, the run halts `patience` epochs later.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub stage: Stage,
    pub rows: Vec<MetricRow>,
    pub dev_scores: Vec<(u64, f64)>,
    pub best_epoch: u64,
    pub stopped_epoch: u64,
    pub early_stopped: bool,
    pub best_dev: f64,
    pub skipped_utterances: usize,
    pub manifest: Vec<(String, String)>,
}

impl RunRecord {
    pub fn convergence_epoch(&self) -> u64 {
        self.best_epoch
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.manifest {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str(&format!("run.stage = {}\n", self.stage.name()));
        s.push_str(&format!("run.best_epoch = {}\n", self.best_epoch));
        s.push_str(&format!("run.stopped_epoch = {}\n", self.stopped_epoch));
        s.push_str(&format!("run.early_stopped = {}\n", self.early_stopped));
        s.push_str(&format!("run.best_dev = {}\n", self.best_dev));
        s.push_str(&format!("run.skipped_utterances = {}\n", self.skipped_utterances));
        s
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        std::fs::write(dir.join("manifest.txt"), self.manifest_text())?;
        Ok(())
    }
}

struct EarlyStopper {
    higher_better: bool,
    patience: u64,
    best: f64,
    best_epoch: u64,
}

impl EarlyStopper {
    fn new(higher_better: bool, patience: u64) -> Self {
        EarlyStopper {
            higher_better,
            patience,
            best: if higher_better { f64::NEG_INFINITY } else { f64::INFINITY },
            best_epoch: 0,
        }
    }

    fn observe(&mut self, epoch: u64, score: f64) -> bool {
        let improved = if self.higher_better {
            score > self.best
        } else {
            score < self.best
        };
        if improved {
            self.best = score;
            self.best_epoch = epoch;
        }
        improved
    }

    fn should_stop(&self, epoch: u64) -> bool {
        epoch >= self.best_epoch + self.patience
    }
}

/// Keeps the best-k checkpoints by dev score.
struct CkptRing {
    k: usize,
    higher_better: bool,
    entries: Vec<(f64, u64, Checkpoint)>,
}

impl CkptRing {
    fn new(k: usize, higher_better: bool) -> Self {
        CkptRing {
            k,
            higher_better,
            entries: Vec::new(),
        }
    }

    fn offer(&mut self, score: f64, epoch: u64, ckpt: Checkpoint) {
        self.entries.push((score, epoch, ckpt));
        self.entries.sort_by(|a, b| {
            let ord = a.0.total_cmp(&b.0);
            if self.higher_better {
                ord.reverse()
            } else {
                ord
            }
        });
        self.entries.truncate(self.k);
    }

    fn best(&self) -> Option<&Checkpoint> {
        self.entries.first().map(|(_, _, c)| c)
    }

    fn average(&self) -> Result<Checkpoint> {
        let ckpts: Vec<Checkpoint> = self.entries.iter().map(|(_, _, c)| c.clone()).collect();
        average_checkpoints(&ckpts)
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    /// Best single checkpoint by dev score.
    pub best: Checkpoint,
    /// Elementwise mean of the best-k checkpoints.
    pub averaged: Checkpoint,
    pub model: StModel,
}

fn run_manifest(cfg: &Config, stage: Stage) -> Vec<(String, String)> {
    let mut m = cfg.to_manifest();
    m.push(("stage".into(), stage.name().into()));
    m
}

/// ASR pre-training: speech encoder + CTC head, early-stopped on dev CTC
/// loss. The checkpoint holds only the speech/CTC parameter groups.
pub fn pretrain_asr(corpus: &CorpusBundle, cfg: &Config) -> Result<TrainOutcome> {
    let tc = TrainConfig::from_config(cfg, Stage::Asr);
    tc.validate()?;
    let model_cfg = cfg.model_config();
    let mut model = StModel::new(&model_cfg, &corpus.vocab, tc.seed)?;
    let mut adam = AdamState::new(&model.params, tc.beta1, tc.beta2);
    let mut stopper = EarlyStopper::new(false, tc.patience);
    let mut ring = CkptRing::new(tc.ckpt_keep, false);
    let subset = model.speech_ctc_param_names();
    let dropout = model_cfg.dropout_for_stage(false);

    let dev: Vec<(usize, &[usize])> = corpus
        .st_dev
        .iter()
        .enumerate()
        .map(|(i, u)| (i, u.transcript.as_slice()))
        .collect();

    let mut rows = Vec::new();
    let mut step = 0u64;
    let mut dev_scores = Vec::new();
    let mut stopped_epoch = 0;
    let mut early_stopped = false;

    for epoch in 1..=tc.max_epochs {
        let order = shuffled_indices(corpus.asr.len(), tc.seed, epoch);
        for chunk in order.chunks(tc.batch_size) {
            step += 1;
            let step_seed = rng::derive_seed(tc.seed, &[TAG_STEP, step]);
            let mut g = DiffGraph::new(tc.precision);
            let mut ctc_acc = None;
            for (bi, &idx) in chunk.iter().enumerate() {
                let (speech, x) = &corpus.asr[idx];
                let mut drop_rng = rng::stream(step_seed, &[tags::DROPOUT, bi as u64]);
                let mut ctx = FwdCtx {
                    train: true,
                    dropout,
                    rng: &mut drop_rng,
                };
                let loss = asr_forward(&mut g, &model, speech, x, &mut ctx)?;
                let scaled = g.scale(loss, 1.0 / chunk.len() as f64);
                ctc_acc = Some(match ctc_acc {
                    Some(acc) => g.add(acc, scaled)?,
                    None => scaled,
                });
            }
            let ctc_node = ctc_acc.expect("non-empty batch");
            let total = g.scale(ctc_node, tc.lambda);
            let ctc_val = g.value(ctc_node).item();
            let total_val = g.value(total).item();
            if !total_val.is_finite() {
                return Err(Error::NanLoss { step });
            }
            model.params.zero_grads();
            g.backward_into(total, &mut model.params)?;
            let lr = lr_at(step, tc.peak_lr, tc.warmup, tc.schedule);
            adam_step(&mut model.params, &mut adam, lr, tc.precision)?;
            rows.push(MetricRow {
                step,
                epoch,
                stage: Stage::Asr,
                ce_o: 0.0,
                ce_a: 0.0,
                ctc: ctc_val,
                cons: 0.0,
                total: total_val,
                ratio_aux_orig: 0.0,
                upsilon: 0.0,
                p_star: 0.0,
                lr,
                acc_o: 0.0,
                acc_a: 0.0,
            });
        }

        // Dev CTC loss in eval mode.
        let mut dev_loss = 0.0;
        for &(i, x) in &dev {
            let mut g = DiffGraph::new(tc.precision);
            let mut rng0 = rng::stream(0, &[tags::DROPOUT]);
            let mut ctx = FwdCtx::eval(&mut rng0);
            let loss = asr_forward(&mut g, &model, &corpus.st_dev[i].speech, x, &mut ctx)?;
            dev_loss += g.value(loss).item();
        }
        dev_loss /= dev.len().max(1) as f64;
        dev_scores.push((epoch, dev_loss));
        if stopper.observe(epoch, dev_loss) {
            let ckpt = Checkpoint::from_params(
                &model.params,
                Some(&subset),
                tc.seed,
                model_cfg.to_config_map(),
                "f64",
            )?;
            ring.offer(dev_loss, epoch, ckpt);
        }
        stopped_epoch = epoch;
        if stopper.should_stop(epoch) {
            early_stopped = true;
            break;
        }
    }

    let best = ring
        .best()
        .cloned()
        .ok_or_else(|| Error::EmptyInput("no checkpoint survived ASR pre-training".into()))?;
    let averaged = ring.average()?;
    let record = RunRecord {
        stage: Stage::Asr,
        rows,
        dev_scores,
        best_epoch: stopper.best_epoch,
        stopped_epoch,
        early_stopped,
        best_dev: stopper.best,
        skipped_utterances: 0,
        manifest: run_manifest(cfg, Stage::Asr),
    };
    Ok(TrainOutcome {
        record,
        best,
        averaged,
        model,
    })
}

/// MT pre-training: shared transformer on (transcript, translation) pairs,
/// early-stopped on dev CE. The checkpoint holds the shared parameter group.
pub fn pretrain_mt(corpus: &CorpusBundle, cfg: &Config) -> Result<TrainOutcome> {
    let tc = TrainConfig::from_config(cfg, Stage::Mt);
    tc.validate()?;
    let model_cfg = cfg.model_config();
    let mut model = StModel::new(&model_cfg, &corpus.vocab, tc.seed)?;
    let mut adam = AdamState::new(&model.params, tc.beta1, tc.beta2);
    let mut stopper = EarlyStopper::new(false, tc.patience);
    let mut ring = CkptRing::new(tc.ckpt_keep, false);
    let subset = model.shared_param_names();
    let dropout = model_cfg.dropout_for_stage(false);

    let dev_pairs: Vec<(Vec<usize>, Vec<usize>)> = corpus
        .st_dev
        .iter()
        .map(|u| (u.transcript.clone(), u.translation.clone()))
        .collect();

    let mut rows = Vec::new();
    let mut step = 0u64;
    let mut dev_scores = Vec::new();
    let mut stopped_epoch = 0;
    let mut early_stopped = false;

    for epoch in 1..=tc.max_epochs {
        let order = shuffled_indices(corpus.mt.len(), tc.seed, epoch);
        for chunk in order.chunks(tc.batch_size) {
            step += 1;
            let step_seed = rng::derive_seed(tc.seed, &[TAG_STEP, step]);
            let mut g = DiffGraph::new(tc.precision);
            let mut ce_acc = None;
            let total_tokens: usize = chunk.iter().map(|&i| corpus.mt[i].1.len() + 1).sum();
            let mut correct = 0usize;
            for (bi, &idx) in chunk.iter().enumerate() {
                let (x, y) = &corpus.mt[idx];
                let mut drop_rng = rng::stream(step_seed, &[tags::DROPOUT, bi as u64]);
                let mut ctx = FwdCtx {
                    train: true,
                    dropout,
                    rng: &mut drop_rng,
                };
                let (ce, lp, targets) = mt_forward(&mut g, &model, x, y, tc.label_smoothing, &mut ctx)?;
                let w = targets.len() as f64 / total_tokens as f64;
                let scaled = g.scale(ce, w);
                ce_acc = Some(match ce_acc {
                    Some(acc) => g.add(acc, scaled)?,
                    None => scaled,
                });
                correct += argmax_matches(g.value(lp), &targets);
            }
            let total = ce_acc.expect("non-empty batch");
            let total_val = g.value(total).item();
            if !total_val.is_finite() {
                return Err(Error::NanLoss { step });
            }
            model.params.zero_grads();
            g.backward_into(total, &mut model.params)?;
            let lr = lr_at(step, tc.peak_lr, tc.warmup, tc.schedule);
            adam_step(&mut model.params, &mut adam, lr, tc.precision)?;
            rows.push(MetricRow {
                step,
                epoch,
                stage: Stage::Mt,
                ce_o: total_val,
                ce_a: 0.0,
                ctc: 0.0,
                cons: 0.0,
                total: total_val,
                ratio_aux_orig: 0.0,
                upsilon: 0.0,
                p_star: 0.0,
                lr,
                acc_o: correct as f64 / total_tokens as f64,
                acc_a: 0.0,
            });
        }

        let dev_loss = mt_dev_loss(&model, &dev_pairs, tc.label_smoothing, tc.precision)?;
        dev_scores.push((epoch, dev_loss));
        if stopper.observe(epoch, dev_loss) {
            let ckpt = Checkpoint::from_params(
                &model.params,
                Some(&subset),
                tc.seed,
                model_cfg.to_config_map(),
                "f64",
            )?;
            ring.offer(dev_loss, epoch, ckpt);
        }
        stopped_epoch = epoch;
        if stopper.should_stop(epoch) {
            early_stopped = true;
            break;
        }
    }

    let best = ring
        .best()
        .cloned()
        .ok_or_else(|| Error::EmptyInput("no checkpoint survived MT pre-training".into()))?;
    let averaged = ring.average()?;
    let record = RunRecord {
        stage: Stage::Mt,
        rows,
        dev_scores,
        best_epoch: stopper.best_epoch,
        stopped_epoch,
        early_stopped,
        best_dev: stopper.best,
        skipped_utterances: 0,
        manifest: run_manifest(cfg, Stage::Mt),
    };
    Ok(TrainOutcome {
        record,
        best,
        averaged,
        model,
    })
}

fn argmax_matches(lp: &crate::tensor::Tensor2D, targets: &[usize]) -> usize {
    let mut correct = 0;
    for (j, &t) in targets.iter().enumerate() {
        let row = lp.row(j);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
            }
        }
        correct += usize::from(best == t);
    }
    correct
}

fn mt_dev_loss(
    model: &StModel,
    pairs: &[(Vec<usize>, Vec<usize>)],
    smoothing: f64,
    precision: Precision,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (x, y) in pairs {
        let mut g = DiffGraph::new(precision);
        let mut rng0 = rng::stream(0, &[tags::DROPOUT]);
        let mut ctx = FwdCtx::eval(&mut rng0);
        let (ce, _, targets) = mt_forward(&mut g, model, x, y, smoothing, &mut ctx)?;
        total += g.value(ce).item() * targets.len() as f64;
        tokens += targets.len();
    }
    Ok(total / tokens.max(1) as f64)
}

/// Convenience probe: MT dev token accuracy of a model.
pub fn mt_dev_accuracy(model: &StModel, corpus: &CorpusBundle, precision: Precision) -> Result<f64> {
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = corpus
        .st_dev
        .iter()
        .map(|u| (u.transcript.clone(), u.translation.clone()))
        .collect();
    mt_token_accuracy(model, &pairs, precision)
}

/// ST fine-tuning with the auxiliary branch, early-stopped on greedy dev
/// BLEU. Checkpoints hold the full parameter set.
pub fn finetune_st(
    corpus: &CorpusBundle,
    asr_ckpt: &Checkpoint,
    mt_ckpt: &Checkpoint,
    cfg: &Config,
) -> Result<TrainOutcome> {
    let tc = TrainConfig::from_config(cfg, Stage::St);
    tc.validate()?;
    let model_cfg = cfg.model_config();
    let (mut model, _report) =
        init_from_pretrained(&model_cfg, &corpus.vocab, tc.seed, asr_ckpt, mt_ckpt)?;
    let settings = tc.tab_settings(&model_cfg);
    let mut adam = AdamState::new(&model.params, tc.beta1, tc.beta2);
    let mut stopper = EarlyStopper::new(true, tc.patience);
    let mut ring = CkptRing::new(tc.ckpt_keep, true);

    let mut rows = Vec::new();
    let mut step = 0u64;
    let mut dev_scores = Vec::new();
    let mut stopped_epoch = 0;
    let mut early_stopped = false;
    let mut skipped = 0usize;
    let mut prev_upsilon: Option<f64> = None;

    for epoch in 1..=tc.max_epochs {
        let order = shuffled_indices(corpus.st_train.len(), tc.seed, epoch);
        for chunk in order.chunks(tc.batch_size) {
            step += 1;
            let step_seed = rng::derive_seed(tc.seed, &[TAG_STEP, step]);
            let batch: Vec<&crate::corpus::UtteranceTriple> =
                chunk.iter().map(|&i| &corpus.st_train[i]).collect();
            let mut g = DiffGraph::new(tc.precision);
            let out = forward_tab(&mut g, &model, &batch, &settings, prev_upsilon, true, step_seed)?;
            if !out.breakdown.total.is_finite() {
                return Err(Error::NanLoss { step });
            }
            prev_upsilon = Some(out.upsilon_used);
            skipped += out.skipped;
            model.params.zero_grads();
            g.backward_into(out.total, &mut model.params)?;
            let lr = lr_at(step, tc.peak_lr, tc.warmup, tc.schedule);
            adam_step(&mut model.params, &mut adam, lr, tc.precision)?;
            let bd = out.breakdown;
            rows.push(MetricRow {
                step,
                epoch,
                stage: Stage::St,
                ce_o: bd.ce_o,
                ce_a: bd.ce_a,
                ctc: bd.ctc,
                cons: bd.cons,
                total: bd.total,
                ratio_aux_orig: if bd.ce_o > 0.0 { bd.ce_a / bd.ce_o } else { 0.0 },
                upsilon: out.upsilon_raw,
                p_star: out.p_star,
                lr,
                acc_o: out.acc_o,
                acc_a: out.acc_a,
            });
        }

        // Greedy dev BLEU (beam search is reserved for final evaluation).
        let dev_bleu = translate_bleu(&model, &corpus.st_dev, 1, tc.max_decode_len, tc.precision)?;
        dev_scores.push((epoch, dev_bleu));
        if stopper.observe(epoch, dev_bleu) {
            let ckpt = Checkpoint::from_params(
                &model.params,
                None,
                tc.seed,
                model_cfg.to_config_map(),
                "f64",
            )?;
            ring.offer(dev_bleu, epoch, ckpt);
        }
        stopped_epoch = epoch;
        if stopper.should_stop(epoch) {
            early_stopped = true;
            break;
        }
    }

    let best = ring
        .best()
        .cloned()
        .ok_or_else(|| Error::EmptyInput("no checkpoint survived fine-tuning".into()))?;
    let averaged = ring.average()?;
    let record = RunRecord {
        stage: Stage::St,
        rows,
        dev_scores,
        best_epoch: stopper.best_epoch,
        stopped_epoch,
        early_stopped,
        best_dev: stopper.best,
        skipped_utterances: skipped,
        manifest: run_manifest(cfg, Stage::St),
    };
    Ok(TrainOutcome {
        record,
        best,
        averaged,
        model,
    })
}

fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, &[tags::EPOCH_SHUFFLE, epoch]);
    order.shuffle(&mut rng);
    order
}

/// Loads a checkpoint into a fresh model built from the recorded config.
pub fn model_from_checkpoint(ckpt: &Checkpoint, cfg: &Config, corpus: &CorpusBundle) -> Result<StModel> {
    let mut model = StModel::new(&cfg.model_config(), &corpus.vocab, cfg.seed)?;
    crate::checkpoint::load_into_params(ckpt, &mut model.params, "checkpoint")?;
    Ok(model)
}

/// Resolves p*-mode plus divergence/alpha overrides into a config (used by
/// the sweep grid).
pub fn cell_config(base: &Config, divergence: DivergenceKind, alpha: f64, p_star: Option<f64>) -> Config {
    let mut cfg = base.clone();
    cfg.divergence = divergence;
    cfg.alpha = alpha;
    match p_star {
        Some(v) => {
            cfg.p_star_mode = PStarMode::Fixed;
            cfg.p_star = v;
        }
        None => {
            cfg.p_star_mode = PStarMode::Dynamic;
        }
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_corpus;
    use crate::model::tests_support::{tiny_corpus_config, tiny_model_config};

    fn tiny_train_config(seed: u64) -> Config {
        let cc = tiny_corpus_config();
        let mc = tiny_model_config();
        let mut cfg = Config::default();
        cfg.n_source = cc.n_source;
        cfg.n_target = cc.n_target;
        cfg.d_feat = cc.d_feat;
        cfg.min_len = cc.min_len;
        cfg.max_len = cc.max_len;
        cfg.asr_size = 6;
        cfg.mt_size = 8;
        cfg.st_train_size = 6;
        cfg.st_dev_size = 3;
        cfg.st_test_size = 3;
        cfg.d_model = mc.d_model;
        cfg.speech_layers = mc.speech_layers;
        cfg.encoder_layers = mc.encoder_layers;
        cfg.decoder_layers = mc.decoder_layers;
        cfg.heads = mc.heads;
        cfg.ffn_dim = mc.ffn_dim;
        cfg.batch_size = 3;
        cfg.max_epochs = 2;
        cfg.patience = 1;
        cfg.ckpt_keep = 2;
        cfg.warmup_steps = 4;
        cfg.max_decode_len = 10;
        cfg.seed = seed;
        cfg
    }

    fn tiny_corpus(seed: u64) -> crate::corpus::CorpusBundle {
        let cfg = tiny_train_config(seed);
        build_corpus(&cfg.corpus_config(), seed).unwrap()
    }

    #[test]
    fn asr_pretrain_runs_and_logs() {
        let cfg = tiny_train_config(3);
        let corpus = tiny_corpus(3);
        let out = pretrain_asr(&corpus, &cfg).unwrap();
        assert!(!out.record.rows.is_empty());
        for r in &out.record.rows {
            assert!(r.decomposition_error(cfg.lambda, cfg.alpha) <= 1e-9);
            assert_eq!(r.stage, Stage::Asr);
        }
        // Checkpoint carries only speech/CTC tensors.
        assert!(out.best.get("ctc.proj.w").is_some());
        assert!(out.best.get("shared.src_emb").is_none());
    }

    #[test]
    fn mt_pretrain_runs_and_logs() {
        let cfg = tiny_train_config(4);
        let corpus = tiny_corpus(4);
        let out = pretrain_mt(&corpus, &cfg).unwrap();
        assert!(!out.record.rows.is_empty());
        assert!(out.best.get("shared.src_emb").is_some());
        assert!(out.best.get("ctc.proj.w").is_none());
        // Steps strictly increase.
        for w in out.record.rows.windows(2) {
            assert!(w[1].step > w[0].step);
        }
    }

    #[test]
    fn finetune_runs_and_metrics_are_consistent() {
        let cfg = tiny_train_config(5);
        let corpus = tiny_corpus(5);
        let asr = pretrain_asr(&corpus, &cfg).unwrap();
        let mt = pretrain_mt(&corpus, &cfg).unwrap();
        let st = finetune_st(&corpus, &asr.best, &mt.best, &cfg).unwrap();
        assert!(!st.record.rows.is_empty());
        for r in &st.record.rows {
            assert!(r.decomposition_error(cfg.lambda, cfg.alpha) <= 1e-9);
            let recomputed = if r.ce_o > 0.0 { r.ce_a / r.ce_o } else { 0.0 };
            assert!((r.ratio_aux_orig - recomputed).abs() <= 1e-9);
        }
        // Manifest echoes the resolved config.
        let m = &st.record.manifest;
        assert!(m.iter().any(|(k, v)| k == "lambda" && v == "0.3"));
        assert!(m.iter().any(|(k, v)| k == "label_smoothing" && v == "0.1"));
    }

    #[test]
    fn finetune_is_deterministic() {
        let run = || {
            let cfg = tiny_train_config(6);
            let corpus = tiny_corpus(6);
            let asr = pretrain_asr(&corpus, &cfg).unwrap();
            let mt = pretrain_mt(&corpus, &cfg).unwrap();
            finetune_st(&corpus, &asr.best, &mt.best, &cfg)
                .unwrap()
                .record
                .metrics_csv()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn early_stop_after_exact_patience() {
        let mut stopper = EarlyStopper::new(false, 3);
        assert!(stopper.observe(1, 1.0));
        assert!(!stopper.observe(2, 1.5));
        assert!(!stopper.should_stop(2));
        assert!(!stopper.observe(3, 1.2));
        assert!(!stopper.should_stop(3));
        assert!(!stopper.observe(4, 1.1));
        assert!(stopper.should_stop(4));
        assert_eq!(stopper.best_epoch, 1);
    }

    #[test]
    fn ckpt_ring_keeps_best_k() {
        use std::collections::BTreeMap;
        let mut ring = CkptRing::new(2, true);
        for (score, epoch) in [(1.0, 1u64), (3.0, 2), (2.0, 3)] {
            let mut ps = crate::params::ParamSet::new(0);
            ps.insert("w", crate::tensor::Tensor2D::filled(1, 1, epoch as f64))
                .unwrap();
            let ck = Checkpoint::from_params(&ps, None, 0, BTreeMap::new(), "f64").unwrap();
            ring.offer(score, epoch, ck);
        }
        assert_eq!(ring.entries.len(), 2);
        assert_eq!(ring.entries[0].0, 3.0);
        assert_eq!(ring.entries[1].0, 2.0);
        assert_eq!(ring.best().unwrap().get("w").unwrap().data(), &[2.0]);
    }
}
