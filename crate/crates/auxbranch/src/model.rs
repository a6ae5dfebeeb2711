//! Toy speech encoder and shared transformer.
//!
//! The speech encoder is a stack of stride-2 temporal convolutions (factor-4
//! downsampling by default) followed by pre-norm self-attention layers. The
//! shared transformer (text encoder + causal decoder) consumes either
//! embedded source text (MT pre-training) or a shrunk speech branch (ST), so
//! its parameters transfer across stages unchanged. Position encodings are
//! sinusoidal; residual blocks are pre-norm.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::branch::{copy_replace, resolve_p_star, shrink, BranchPair, ReplacePolicy};
use crate::checkpoint::{load_into_params, Checkpoint};
use crate::corpus::UtteranceTriple;
use crate::ctc::{ctc_loss, ctc_project, greedy_path, CtcPosterior};
use crate::error::{Error, Result};
use crate::graph::{DiffGraph, NodeId, ATTN_MASK_NEG};
use crate::objectives::{
    ce_label_smoothed, consistency_loss, gold_scalar_uncertainty, normalized_entropy, total_loss,
    ConsGradFlow, DivergenceKind, LossBreakdown,
};
use crate::params::{embedding_init, xavier, ParamSet};
use crate::rng::{self, tags};
use crate::tensor::{Precision, Tensor2D};
use crate::vocab::ExtendedVocab;

pub const CONV_KERNEL: usize = 3;
const MAX_POSITIONS: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_feat: usize,
    pub speech_layers: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout_pretrain: f64,
    pub dropout_finetune: f64,
    pub downsample_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_feat: 16,
            speech_layers: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            dropout_pretrain: 0.1,
            dropout_finetune: 0.15,
            downsample_factor: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidArg(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        for (name, v) in [
            ("dropout_pretrain", self.dropout_pretrain),
            ("dropout_finetune", self.dropout_finetune),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArg(format!("{name} {v} not in [0, 1)")));
            }
        }
        if self.conv_layers().is_none() {
            return Err(Error::InvalidArg(format!(
                "downsample_factor {} must be a power of two >= 2",
                self.downsample_factor
            )));
        }
        Ok(())
    }

    /// Number of stride-2 convolutions implementing the downsample factor.
    pub fn conv_layers(&self) -> Option<usize> {
        let f = self.downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return None;
        }
        Some(f.trailing_zeros() as usize)
    }

    pub fn dropout_for_stage(&self, finetune: bool) -> f64 {
        if finetune {
            self.dropout_finetune
        } else {
            self.dropout_pretrain
        }
    }

    pub fn to_config_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("d_model".into(), self.d_model.to_string());
        m.insert("d_feat".into(), self.d_feat.to_string());
        m.insert("speech_layers".into(), self.speech_layers.to_string());
        m.insert("encoder_layers".into(), self.encoder_layers.to_string());
        m.insert("decoder_layers".into(), self.decoder_layers.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("ffn_dim".into(), self.ffn_dim.to_string());
        m.insert("dropout_pretrain".into(), self.dropout_pretrain.to_string());
        m.insert("dropout_finetune".into(), self.dropout_finetune.to_string());
        m.insert("downsample_factor".into(), self.downsample_factor.to_string());
        m
    }
}

/// Which uncertainty statistic drives the dynamic replacement probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyMode {
    /// Mean normalized full-distribution entropy (bounded in [0, 1]).
    FullDistribution,
    /// Gold-token scalar reading, kept for comparison.
    GoldScalar,
}

impl EntropyMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(EntropyMode::FullDistribution),
            "gold_scalar" => Ok(EntropyMode::GoldScalar),
            other => Err(Error::Config(format!("unknown entropy_mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EntropyMode::FullDistribution => "full",
            EntropyMode::GoldScalar => "gold_scalar",
        }
    }
}

/// Parameter groups: `speech.*` is the speech encoder, `ctc.*` its
/// projection, `shared.*` the shared transformer (embeddings included).
#[derive(Debug, Clone)]
pub struct StModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub n_source: usize,
    pub blank: usize,
    pub v_plus: usize,
    pub v_out: usize,
    pub bos: usize,
    pub eos: usize,
    pos_table: Tensor2D,
}

fn sinusoidal_table(max_len: usize, d: usize) -> Tensor2D {
    let mut t = Tensor2D::zeros(max_len, d);
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            t.set(pos, 2 * i, rate.sin());
            if 2 * i + 1 < d {
                t.set(pos, 2 * i + 1, rate.cos());
            }
        }
    }
    t
}

fn causal_mask(n: usize) -> Tensor2D {
    let mut m = Tensor2D::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, ATTN_MASK_NEG);
        }
    }
    m
}

fn attn_param_names(prefix: &str) -> Vec<String> {
    ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect()
}

impl StModel {
    pub fn new(config: &ModelConfig, vocab: &ExtendedVocab, seed: u64) -> Result<StModel> {
        config.validate()?;
        let mut params = ParamSet::new(seed);
        let mut rng = rng::stream(seed, &[tags::MODEL_INIT]);
        let d = config.d_model;

        let add_matrix = |params: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            params.insert(name, xavier(rows, cols, rng)).expect("unique names");
        };
        let add_bias = |params: &mut ParamSet, name: &str, cols: usize| {
            params.insert(name, Tensor2D::zeros(1, cols)).expect("unique names");
        };
        let add_ln = |params: &mut ParamSet, prefix: &str, cols: usize| {
            params
                .insert(&format!("{prefix}.g"), Tensor2D::filled(1, cols, 1.0))
                .expect("unique names");
            params
                .insert(&format!("{prefix}.b"), Tensor2D::zeros(1, cols))
                .expect("unique names");
        };

        let add_attn = |params: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng| {
            for w in ["wq", "wk", "wv", "wo"] {
                add_matrix(params, &format!("{prefix}.{w}"), d, d, rng);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                add_bias(params, &format!("{prefix}.{b}"), d);
            }
        };
        let add_ffn = |params: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng| {
            add_matrix(params, &format!("{prefix}.w1"), d, config.ffn_dim, rng);
            add_bias(params, &format!("{prefix}.b1"), config.ffn_dim);
            add_matrix(params, &format!("{prefix}.w2"), config.ffn_dim, d, rng);
            add_bias(params, &format!("{prefix}.b2"), d);
        };

        // Speech encoder: convolutions + self-attention layers.
        let n_convs = config.conv_layers().expect("validated");
        for c in 0..n_convs {
            let d_in = if c == 0 { config.d_feat } else { d };
            add_matrix(&mut params, &format!("speech.conv{c}.w"), CONV_KERNEL * d_in, d, &mut rng);
            add_bias(&mut params, &format!("speech.conv{c}.b"), d);
        }
        for l in 0..config.speech_layers {
            let p = format!("speech.layer{l}");
            add_ln(&mut params, &format!("{p}.ln1"), d);
            add_attn(&mut params, &format!("{p}.attn"), &mut rng);
            add_ln(&mut params, &format!("{p}.ln2"), d);
            add_ffn(&mut params, &format!("{p}.ffn"), &mut rng);
        }
        add_ln(&mut params, "speech.ln_out", d);

        // CTC projection over the blank-extended source vocabulary.
        add_matrix(&mut params, "ctc.proj.w", d, vocab.source_extended(), &mut rng);
        add_bias(&mut params, "ctc.proj.b", vocab.source_extended());

        // Shared transformer. The source embedding is the same tensor the
        // auxiliary branch replacement reads from.
        params
            .insert("shared.src_emb", embedding_init(vocab.n_source(), d, &mut rng))
            .expect("unique names");
        for l in 0..config.encoder_layers {
            let p = format!("shared.enc.layer{l}");
            add_ln(&mut params, &format!("{p}.ln1"), d);
            add_attn(&mut params, &format!("{p}.attn"), &mut rng);
            add_ln(&mut params, &format!("{p}.ln2"), d);
            add_ffn(&mut params, &format!("{p}.ffn"), &mut rng);
        }
        add_ln(&mut params, "shared.enc.ln_out", d);

        params
            .insert("shared.dec.tgt_emb", embedding_init(vocab.target_total(), d, &mut rng))
            .expect("unique names");
        for l in 0..config.decoder_layers {
            let p = format!("shared.dec.layer{l}");
            add_ln(&mut params, &format!("{p}.ln1"), d);
            add_attn(&mut params, &format!("{p}.attn"), &mut rng);
            add_ln(&mut params, &format!("{p}.ln_cross"), d);
            add_attn(&mut params, &format!("{p}.cross_attn"), &mut rng);
            add_ln(&mut params, &format!("{p}.ln2"), d);
            add_ffn(&mut params, &format!("{p}.ffn"), &mut rng);
        }
        add_ln(&mut params, "shared.dec.ln_out", d);
        add_matrix(&mut params, "shared.dec.out.w", d, vocab.target_total(), &mut rng);
        add_bias(&mut params, "shared.dec.out.b", vocab.target_total());

        Ok(StModel {
            config: config.clone(),
            params,
            n_source: vocab.n_source(),
            blank: vocab.blank(),
            v_plus: vocab.source_extended(),
            v_out: vocab.target_total(),
            bos: vocab.bos(),
            eos: vocab.eos(),
            pos_table: sinusoidal_table(MAX_POSITIONS, d),
        })
    }

    pub fn embed_scale(&self) -> f64 {
        (self.config.d_model as f64).sqrt()
    }

    pub fn speech_ctc_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .into_iter()
            .filter(|n| n.starts_with("speech.") || n.starts_with("ctc."))
            .collect()
    }

    pub fn shared_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .into_iter()
            .filter(|n| n.starts_with("shared."))
            .collect()
    }

    fn positions(&self, g: &mut DiffGraph, len: usize) -> Result<NodeId> {
        if len > MAX_POSITIONS {
            return Err(Error::InvalidArg(format!(
                "sequence length {len} exceeds position table ({MAX_POSITIONS})"
            )));
        }
        Ok(g.constant(self.pos_table.slice_rows(0, len)))
    }
}

/// Per-forward dropout context: an explicit stream and the drop rate.
pub struct FwdCtx<'a> {
    pub train: bool,
    pub dropout: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> FwdCtx<'a> {
    pub fn eval(rng: &'a mut ChaCha8Rng) -> Self {
        FwdCtx {
            train: false,
            dropout: 0.0,
            rng,
        }
    }
}

fn maybe_dropout(g: &mut DiffGraph, x: NodeId, ctx: &mut FwdCtx) -> Result<NodeId> {
    if ctx.train && ctx.dropout > 0.0 {
        g.dropout(x, 1.0 - ctx.dropout, ctx.rng)
    } else {
        Ok(x)
    }
}

fn linear(g: &mut DiffGraph, x: NodeId, params: &ParamSet, w: &str, b: &str) -> Result<NodeId> {
    let w = g.param(params, w)?;
    let b = g.param(params, b)?;
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

/// Multi-head attention of `queries` over `keys_values`, with an optional
/// additive score mask.
fn attention(
    g: &mut DiffGraph,
    model: &StModel,
    prefix: &str,
    queries: NodeId,
    keys_values: NodeId,
    score_mask: Option<&Tensor2D>,
) -> Result<NodeId> {
    let names = attn_param_names(prefix);
    let (wq, bq, wk, bk, wv, bv, wo, bo) = (
        &names[0], &names[1], &names[2], &names[3], &names[4], &names[5], &names[6], &names[7],
    );
    let q = linear(g, queries, &model.params, wq, bq)?;
    let k = linear(g, keys_values, &model.params, wk, bk)?;
    let v = linear(g, keys_values, &model.params, wv, bv)?;
    let heads = model.config.heads;
    let dk = model.config.d_model / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mask_node = score_mask.map(|m| g.constant(m.clone()));

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let scores = match mask_node {
            Some(m) => g.add(scores, m)?,
            None => scores,
        };
        let weights = g.softmax(scores);
        head_outputs.push(g.matmul(weights, vh)?);
    }
    let concat = g.concat_cols(&head_outputs)?;
    linear(g, concat, &model.params, wo, bo)
}

fn self_attn_block(
    g: &mut DiffGraph,
    model: &StModel,
    x: NodeId,
    prefix: &str,
    causal: bool,
    ctx: &mut FwdCtx,
) -> Result<NodeId> {
    let normed = {
        let gamma = g.param(&model.params, &format!("{prefix}.ln1.g"))?;
        let beta = g.param(&model.params, &format!("{prefix}.ln1.b"))?;
        g.layer_norm(x, gamma, beta)?
    };
    let mask = causal.then(|| causal_mask(g.value(x).rows()));
    let attn = attention(g, model, &format!("{prefix}.attn"), normed, normed, mask.as_ref())?;
    let attn = maybe_dropout(g, attn, ctx)?;
    g.add(x, attn)
}

fn cross_attn_block(
    g: &mut DiffGraph,
    model: &StModel,
    x: NodeId,
    memory: NodeId,
    prefix: &str,
    ctx: &mut FwdCtx,
) -> Result<NodeId> {
    let normed = {
        let gamma = g.param(&model.params, &format!("{prefix}.ln_cross.g"))?;
        let beta = g.param(&model.params, &format!("{prefix}.ln_cross.b"))?;
        g.layer_norm(x, gamma, beta)?
    };
    let attn = attention(g, model, &format!("{prefix}.cross_attn"), normed, memory, None)?;
    let attn = maybe_dropout(g, attn, ctx)?;
    g.add(x, attn)
}

fn ffn_block(g: &mut DiffGraph, model: &StModel, x: NodeId, prefix: &str, ctx: &mut FwdCtx) -> Result<NodeId> {
    let normed = {
        let gamma = g.param(&model.params, &format!("{prefix}.ln2.g"))?;
        let beta = g.param(&model.params, &format!("{prefix}.ln2.b"))?;
        g.layer_norm(x, gamma, beta)?
    };
    let h = linear(g, normed, &model.params, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"))?;
    let h = g.relu(h);
    let h = linear(g, h, &model.params, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"))?;
    let h = maybe_dropout(g, h, ctx)?;
    g.add(x, h)
}

fn final_ln(g: &mut DiffGraph, model: &StModel, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gamma = g.param(&model.params, &format!("{prefix}.g"))?;
    let beta = g.param(&model.params, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

/// Speech frames -> downsampled hidden states (T' = ceil(T / factor)).
pub fn encode_speech(g: &mut DiffGraph, model: &StModel, speech: &Tensor2D, ctx: &mut FwdCtx) -> Result<NodeId> {
    if speech.rows() < model.config.downsample_factor {
        return Err(Error::InvalidArg(format!(
            "speech too short: {} frames, need at least {}",
            speech.rows(),
            model.config.downsample_factor
        )));
    }
    if speech.cols() != model.config.d_feat {
        return Err(Error::shape(
            "encode_speech",
            format!("{} features, model expects {}", speech.cols(), model.config.d_feat),
        ));
    }
    let mut x = g.constant(speech.clone());
    for c in 0..model.config.conv_layers().expect("validated") {
        let unfolded = g.unfold(x, CONV_KERNEL, 2, 1)?;
        let h = linear(
            g,
            unfolded,
            &model.params,
            &format!("speech.conv{c}.w"),
            &format!("speech.conv{c}.b"),
        )?;
        x = g.relu(h);
    }
    let pos = model.positions(g, g.value(x).rows())?;
    x = g.add(x, pos)?;
    x = maybe_dropout(g, x, ctx)?;
    for l in 0..model.config.speech_layers {
        let prefix = format!("speech.layer{l}");
        x = self_attn_block(g, model, x, &prefix, false, ctx)?;
        x = ffn_block(g, model, x, &prefix, ctx)?;
    }
    final_ln(g, model, x, "speech.ln_out")
}

/// CTC log-posteriors for a speech input (adds nodes to the graph).
pub fn ctc_logprobs(g: &mut DiffGraph, model: &StModel, h: NodeId) -> Result<NodeId> {
    let w = g.param(&model.params, "ctc.proj.w")?;
    let b = g.param(&model.params, "ctc.proj.b")?;
    ctc_project(g, h, w, b)
}

/// Embeds source token ids at the shared-encoder input scale.
pub fn embed_source(g: &mut DiffGraph, model: &StModel, ids: &[usize]) -> Result<NodeId> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("source token sequence".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= model.n_source) {
        return Err(Error::IdOutOfRange {
            id: bad,
            vocab: model.n_source,
        });
    }
    let table = g.param(&model.params, "shared.src_emb")?;
    let e = g.gather_rows(table, ids)?;
    Ok(g.scale(e, model.embed_scale()))
}

/// Shared text encoder over an already-embedded input sequence.
pub fn encode_shared(g: &mut DiffGraph, model: &StModel, input: NodeId, ctx: &mut FwdCtx) -> Result<NodeId> {
    let pos = model.positions(g, g.value(input).rows())?;
    let mut x = g.add(input, pos)?;
    x = maybe_dropout(g, x, ctx)?;
    for l in 0..model.config.encoder_layers {
        let prefix = format!("shared.enc.layer{l}");
        x = self_attn_block(g, model, x, &prefix, false, ctx)?;
        x = ffn_block(g, model, x, &prefix, ctx)?;
    }
    final_ln(g, model, x, "shared.enc.ln_out")
}

/// Teacher-forced decoder pass over `prefix` (which must start with bos).
/// Row j of the result is the next-token log-distribution after
/// `prefix[..=j]`.
pub fn decode(g: &mut DiffGraph, model: &StModel, prefix: &[usize], memory: NodeId, ctx: &mut FwdCtx) -> Result<NodeId> {
    if prefix.is_empty() {
        return Err(Error::EmptyInput("decoder prefix".into()));
    }
    if let Some(&bad) = prefix.iter().find(|&&t| t >= model.v_out) {
        return Err(Error::IdOutOfRange {
            id: bad,
            vocab: model.v_out,
        });
    }
    let table = g.param(&model.params, "shared.dec.tgt_emb")?;
    let e = g.gather_rows(table, prefix)?;
    let e = g.scale(e, model.embed_scale());
    let pos = model.positions(g, prefix.len())?;
    let mut x = g.add(e, pos)?;
    x = maybe_dropout(g, x, ctx)?;
    for l in 0..model.config.decoder_layers {
        let prefix_name = format!("shared.dec.layer{l}");
        x = self_attn_block(g, model, x, &prefix_name, true, ctx)?;
        x = cross_attn_block(g, model, x, memory, &prefix_name, ctx)?;
        x = ffn_block(g, model, x, &prefix_name, ctx)?;
    }
    let x = final_ln(g, model, x, "shared.dec.ln_out")?;
    let logits = linear(g, x, &model.params, "shared.dec.out.w", "shared.dec.out.b")?;
    Ok(g.log_softmax(logits))
}

/// Decoder input and gold targets for teacher forcing: input is
/// `[bos, y...]`, targets are `[y..., eos]`.
pub fn teacher_forcing_pair(model: &StModel, y: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(y.len() + 1);
    input.push(model.bos);
    input.extend_from_slice(y);
    let mut targets = Vec::with_capacity(y.len() + 1);
    targets.extend_from_slice(y);
    targets.push(model.eos);
    (input, targets)
}

fn argmax_accuracy(lp: &Tensor2D, targets: &[usize]) -> (usize, usize) {
    let mut correct = 0;
    for (j, &t) in targets.iter().enumerate() {
        let row = lp.row(j);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
            }
        }
        if best == t {
            correct += 1;
        }
    }
    (correct, targets.len())
}

/// ASR forward: speech encoder + CTC loss. Returns the loss node whose value
/// is the CTC negative log-likelihood for this utterance.
pub fn asr_forward(g: &mut DiffGraph, model: &StModel, speech: &Tensor2D, x: &[usize], ctx: &mut FwdCtx) -> Result<NodeId> {
    let h = encode_speech(g, model, speech, ctx)?;
    let lp = ctc_logprobs(g, model, h)?;
    ctc_loss(g, lp, x, model.blank)
}

/// MT forward: embedded transcript through the shared transformer. Returns
/// the smoothed CE node and the teacher-forced log-probs.
pub fn mt_forward(
    g: &mut DiffGraph,
    model: &StModel,
    x: &[usize],
    y: &[usize],
    smoothing: f64,
    ctx: &mut FwdCtx,
) -> Result<(NodeId, NodeId, Vec<usize>)> {
    let e = embed_source(g, model, x)?;
    let memory = encode_shared(g, model, e, ctx)?;
    let (input, targets) = teacher_forcing_pair(model, y);
    let lp = decode(g, model, &input, memory, ctx)?;
    let mask = vec![true; targets.len()];
    let ce = ce_label_smoothed(g, lp, &targets, &mask, smoothing)?;
    Ok((ce, lp, targets))
}

/// Settings for one fine-tuning forward pass.
#[derive(Debug, Clone)]
pub struct TabSettings {
    pub policy: ReplacePolicy,
    pub divergence: DivergenceKind,
    pub label_smoothing: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub single_branch: bool,
    pub entropy_mode: EntropyMode,
    /// EMA coefficient applied to the uncertainty before resolving a dynamic
    /// p*; 0 uses the same-step raw value.
    pub upsilon_ema: f64,
    pub dropout: f64,
    pub cons_grad_flow: ConsGradFlow,
}

/// Everything one fine-tuning step produces besides gradients.
pub struct TabOutput {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// Raw batch-mean uncertainty of the original branch (this step).
    pub upsilon_raw: f64,
    /// Value actually used to resolve p* (after optional smoothing).
    pub upsilon_used: f64,
    pub p_star: f64,
    pub skipped: usize,
    pub acc_o: f64,
    pub acc_a: f64,
    pub p_nodes: Vec<NodeId>,
    pub q_nodes: Vec<NodeId>,
    pub pairs: Vec<BranchPair>,
}

/// Two-branch fine-tuning forward pass over a batch of utterances.
///
/// Pass 1 runs the original branch for every utterance and measures the
/// batch uncertainty; p* is then resolved once for the step; pass 2 builds
/// the auxiliary branch with independent dropout streams. Utterances whose
/// CTC target does not fit the downsampled frame count are skipped and
/// counted.
pub fn forward_tab(
    g: &mut DiffGraph,
    model: &StModel,
    batch: &[&UtteranceTriple],
    settings: &TabSettings,
    prev_upsilon: Option<f64>,
    train: bool,
    step_seed: u64,
) -> Result<TabOutput> {
    settings.policy.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("fine-tuning batch".into()));
    }

    struct Pass1 {
        ctc: NodeId,
        o: NodeId,
        labels: Vec<usize>,
        lp_o: NodeId,
        input: Vec<usize>,
        targets: Vec<usize>,
        y_len: usize,
    }

    let mut skipped = 0usize;
    let mut pass1: Vec<Pass1> = Vec::with_capacity(batch.len());
    let mut upsilon_sum = 0.0;
    let mut acc_o_counts = (0usize, 0usize);

    for (u_idx, utt) in batch.iter().enumerate() {
        let mut drop_rng = rng::stream(step_seed, &[tags::DROPOUT, 1, u_idx as u64]);
        let mut ctx = FwdCtx {
            train,
            dropout: settings.dropout,
            rng: &mut drop_rng,
        };
        let h = encode_speech(g, model, &utt.speech, &mut ctx)?;
        if crate::ctc::min_frames(&utt.transcript) > g.value(h).rows() {
            skipped += 1;
            continue;
        }
        let lp_ctc = ctc_logprobs(g, model, h)?;
        let ctc = ctc_loss(g, lp_ctc, &utt.transcript, model.blank)?;
        let path = greedy_path(g.value(lp_ctc));
        let (o, labels) = shrink(g, h, &path)?;
        let memory = encode_shared(g, model, o, &mut ctx)?;
        let (input, targets) = teacher_forcing_pair(model, &utt.translation);
        let lp_o = decode(g, model, &input, memory, &mut ctx)?;

        let probs = g.value(lp_o).map(f64::exp);
        let u = match settings.entropy_mode {
            EntropyMode::FullDistribution => normalized_entropy(&probs, model.v_out)?,
            EntropyMode::GoldScalar => gold_scalar_uncertainty(&probs, &targets, model.v_out)?,
        };
        upsilon_sum += u;
        let (c, n) = argmax_accuracy(g.value(lp_o), &targets);
        acc_o_counts.0 += c;
        acc_o_counts.1 += n;

        pass1.push(Pass1 {
            ctc,
            o,
            labels,
            lp_o,
            input,
            y_len: targets.len(),
            targets,
        });
    }

    if pass1.is_empty() {
        return Err(Error::CtcInfeasible {
            frames: 0,
            needed: 0,
        });
    }

    let n_utts = pass1.len();
    let upsilon_raw = upsilon_sum / n_utts as f64;
    let upsilon_used = match prev_upsilon {
        Some(prev) if settings.upsilon_ema > 0.0 => {
            settings.upsilon_ema * prev + (1.0 - settings.upsilon_ema) * upsilon_raw
        }
        _ => upsilon_raw,
    };
    let p_star = resolve_p_star(&settings.policy, Some(upsilon_used.clamp(0.0, 1.0)))?;

    let total_tokens: usize = pass1.iter().map(|p| p.y_len).sum();

    // Batch token-mean CE over the original branch.
    let mut ce_o_node: Option<NodeId> = None;
    for p in &pass1 {
        let mask = vec![true; p.y_len];
        let ce = ce_label_smoothed(g, p.lp_o, &p.targets, &mask, settings.label_smoothing)?;
        let w = p.y_len as f64 / total_tokens as f64;
        let scaled = g.scale(ce, w);
        ce_o_node = Some(match ce_o_node {
            Some(acc) => g.add(acc, scaled)?,
            None => scaled,
        });
    }
    let ce_o = ce_o_node.expect("non-empty batch");

    // Utterance-mean CTC.
    let mut ctc_node: Option<NodeId> = None;
    for p in &pass1 {
        let scaled = g.scale(p.ctc, 1.0 / n_utts as f64);
        ctc_node = Some(match ctc_node {
            Some(acc) => g.add(acc, scaled)?,
            None => scaled,
        });
    }

    // Pass 2: auxiliary branch with its own dropout streams.
    let mut ce_a_node: Option<NodeId> = None;
    let mut cons_node: Option<NodeId> = None;
    let mut acc_a_counts = (0usize, 0usize);
    let mut pairs = Vec::new();
    let mut q_nodes = Vec::new();
    if !settings.single_branch {
        let emb_table = g.param(&model.params, "shared.src_emb")?;
        for (u_idx, p) in pass1.iter().enumerate() {
            let mut replace_rng = rng::stream(step_seed, &[tags::REPLACE_MASK, u_idx as u64]);
            let pair = copy_replace(
                g,
                p.o,
                &p.labels,
                emb_table,
                model.embed_scale(),
                model.blank,
                p_star,
                &mut replace_rng,
            )?;
            let mut drop_rng = rng::stream(step_seed, &[tags::DROPOUT, 2, u_idx as u64]);
            let mut ctx = FwdCtx {
                train,
                dropout: settings.dropout,
                rng: &mut drop_rng,
            };
            let memory = encode_shared(g, model, pair.a, &mut ctx)?;
            let lp_a = decode(g, model, &p.input, memory, &mut ctx)?;
            let mask = vec![true; p.y_len];
            let ce = ce_label_smoothed(g, lp_a, &p.targets, &mask, settings.label_smoothing)?;
            let w = p.y_len as f64 / total_tokens as f64;
            let scaled = g.scale(ce, w);
            ce_a_node = Some(match ce_a_node {
                Some(acc) => g.add(acc, scaled)?,
                None => scaled,
            });
            let (c, n) = argmax_accuracy(g.value(lp_a), &p.targets);
            acc_a_counts.0 += c;
            acc_a_counts.1 += n;
            if settings.alpha > 0.0 {
                // Optional stop-gradient through one side: detach by
                // re-entering the values as a constant.
                let (side_o, side_a) = match settings.cons_grad_flow {
                    ConsGradFlow::Both => (p.lp_o, lp_a),
                    ConsGradFlow::OrigOnly => {
                        let vals = g.value(lp_a).clone();
                        (p.lp_o, g.constant(vals))
                    }
                    ConsGradFlow::AuxOnly => {
                        let vals = g.value(p.lp_o).clone();
                        (g.constant(vals), lp_a)
                    }
                };
                if let Some(cons) =
                    consistency_loss(g, side_o, side_a, &mask, settings.divergence)?
                {
                    let scaled = g.scale(cons, w);
                    cons_node = Some(match cons_node {
                        Some(acc) => g.add(acc, scaled)?,
                        None => scaled,
                    });
                }
            }
            q_nodes.push(lp_a);
            pairs.push(pair);
        }
    }

    let (total, breakdown) = total_loss(
        g,
        ce_o,
        ce_a_node,
        ctc_node,
        cons_node,
        settings.lambda,
        settings.alpha,
    )?;

    Ok(TabOutput {
        total,
        breakdown,
        upsilon_raw,
        upsilon_used,
        p_star,
        skipped,
        acc_o: acc_o_counts.0 as f64 / acc_o_counts.1.max(1) as f64,
        acc_a: if acc_a_counts.1 > 0 {
            acc_a_counts.0 as f64 / acc_a_counts.1 as f64
        } else {
            0.0
        },
        p_nodes: pass1.iter().map(|p| p.lp_o).collect(),
        q_nodes,
        pairs,
    })
}

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub transferred: Vec<String>,
}

impl TransferReport {
    pub fn count(&self) -> usize {
        self.transferred.len()
    }
}

/// Builds an ST model whose speech/CTC parameters come from the ASR
/// checkpoint and whose shared-transformer parameters come from the MT
/// checkpoint.
pub fn init_from_pretrained(
    config: &ModelConfig,
    vocab: &ExtendedVocab,
    seed: u64,
    asr: &Checkpoint,
    mt: &Checkpoint,
) -> Result<(StModel, TransferReport)> {
    let mut model = StModel::new(config, vocab, seed)?;
    let expected_speech = model.speech_ctc_param_names();
    let expected_shared = model.shared_param_names();
    for name in &expected_speech {
        if asr.get(name).is_none() {
            return Err(Error::MissingTensor {
                name: name.clone(),
                source_name: "ASR checkpoint".into(),
            });
        }
    }
    for name in &expected_shared {
        if mt.get(name).is_none() {
            return Err(Error::MissingTensor {
                name: name.clone(),
                source_name: "MT checkpoint".into(),
            });
        }
    }
    let mut transferred = load_into_params(asr, &mut model.params, "ASR checkpoint")?;
    transferred.extend(load_into_params(mt, &mut model.params, "MT checkpoint")?);
    Ok((model, TransferReport { transferred }))
}

/// Eval-mode CTC posterior for decoding and error-rate probes.
pub fn ctc_posterior_for(model: &StModel, speech: &Tensor2D, precision: Precision) -> Result<CtcPosterior> {
    let mut g = DiffGraph::new(precision);
    let mut rng = rng::stream(0, &[tags::DROPOUT]);
    let mut ctx = FwdCtx::eval(&mut rng);
    let h = encode_speech(&mut g, model, speech, &mut ctx)?;
    let lp = ctc_logprobs(&mut g, model, h)?;
    CtcPosterior::new(g.value(lp).clone(), model.blank)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::corpus::{build_corpus, CorpusBundle, CorpusConfig};

    pub(crate) fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_feat: 8,
            speech_layers: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn_dim: 24,
            dropout_pretrain: 0.1,
            dropout_finetune: 0.15,
            downsample_factor: 4,
        }
    }

    pub(crate) fn tiny_corpus_config() -> CorpusConfig {
        CorpusConfig {
            n_source: 6,
            n_target: 7,
            d_feat: 8,
            asr_size: 4,
            mt_size: 6,
            st_train_size: 4,
            st_dev_size: 3,
            st_test_size: 3,
            min_len: 2,
            max_len: 4,
            ..CorpusConfig::default()
        }
    }

    pub(crate) fn tiny_model_with_corpus(seed: u64) -> (StModel, CorpusBundle) {
        let corpus = build_corpus(&tiny_corpus_config(), seed).unwrap();
        let model = StModel::new(&tiny_model_config(), &corpus.vocab, seed).unwrap();
        (model, corpus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusConfig};
    use crate::vocab::make_vocab;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_feat: 8,
            speech_layers: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn_dim: 24,
            dropout_pretrain: 0.1,
            dropout_finetune: 0.15,
            downsample_factor: 4,
        }
    }

    fn tiny_model(seed: u64) -> StModel {
        let vocab = make_vocab(6, 7, seed).unwrap();
        StModel::new(&tiny_config(), &vocab, seed).unwrap()
    }

    fn random_speech(t: usize, d: usize, seed: u64) -> Tensor2D {
        let mut rng = rng::stream(seed, &[50]);
        Tensor2D::from_vec(t, d, (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.validate().unwrap();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.downsample_factor = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.dropout_finetune = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn speech_encoder_downsamples_by_factor() {
        let model = tiny_model(1);
        for t in [8usize, 9, 12, 15] {
            let mut g = DiffGraph::new(Precision::F64);
            let mut rng = rng::stream(0, &[0]);
            let mut ctx = FwdCtx::eval(&mut rng);
            let h = encode_speech(&mut g, &model, &random_speech(t, 8, t as u64), &mut ctx).unwrap();
            assert_eq!(g.value(h).rows(), t.div_ceil(4), "T={t}");
            assert_eq!(g.value(h).cols(), 16);
            assert!(g.value(h).is_finite());
        }
    }

    #[test]
    fn speech_encoder_rejects_short_input() {
        let model = tiny_model(1);
        let mut g = DiffGraph::new(Precision::F64);
        let mut rng = rng::stream(0, &[0]);
        let mut ctx = FwdCtx::eval(&mut rng);
        assert!(encode_speech(&mut g, &model, &random_speech(3, 8, 1), &mut ctx).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = tiny_model(2);
        let speech = random_speech(10, 8, 3);
        let run = || {
            let mut g = DiffGraph::new(Precision::F64);
            let mut rng = rng::stream(0, &[0]);
            let mut ctx = FwdCtx::eval(&mut rng);
            let h = encode_speech(&mut g, &model, &speech, &mut ctx).unwrap();
            g.value(h).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decoder_rows_are_log_distributions() {
        let model = tiny_model(4);
        let mut g = DiffGraph::new(Precision::F64);
        let mut rng = rng::stream(0, &[0]);
        let mut ctx = FwdCtx::eval(&mut rng);
        let e = embed_source(&mut g, &model, &[0, 1, 2]).unwrap();
        let mem = encode_shared(&mut g, &model, e, &mut ctx).unwrap();
        let (input, _) = teacher_forcing_pair(&model, &[3, 4]);
        let lp = decode(&mut g, &model, &input, mem, &mut ctx).unwrap();
        for i in 0..g.value(lp).rows() {
            assert!(crate::tensor::logsumexp(g.value(lp).row(i)).abs() < 1e-6);
        }
    }

    #[test]
    fn decoder_rejects_empty_prefix() {
        let model = tiny_model(4);
        let mut g = DiffGraph::new(Precision::F64);
        let mut rng = rng::stream(0, &[0]);
        let mut ctx = FwdCtx::eval(&mut rng);
        let e = embed_source(&mut g, &model, &[0]).unwrap();
        let mem = encode_shared(&mut g, &model, e, &mut ctx).unwrap();
        assert!(decode(&mut g, &model, &[], mem, &mut ctx).is_err());
    }

    #[test]
    fn causal_masking_blocks_future_positions() {
        // Changing a later prefix token must not change earlier rows.
        let model = tiny_model(5);
        let run = |prefix: &[usize]| {
            let mut g = DiffGraph::new(Precision::F64);
            let mut rng = rng::stream(0, &[0]);
            let mut ctx = FwdCtx::eval(&mut rng);
            let e = embed_source(&mut g, &model, &[0, 1]).unwrap();
            let mem = encode_shared(&mut g, &model, e, &mut ctx).unwrap();
            let lp = decode(&mut g, &model, prefix, mem, &mut ctx).unwrap();
            (0..2).map(|i| g.value(lp).row(i).to_vec()).collect::<Vec<_>>()
        };
        let a = run(&[model.bos, 1, 2, 3]);
        let b = run(&[model.bos, 1, 5, 6]);
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
    }

    #[test]
    fn tab_p_star_zero_no_dropout_makes_branches_identical() {
        let corpus = build_corpus(
            &CorpusConfig {
                n_source: 6,
                n_target: 7,
                d_feat: 8,
                asr_size: 1,
                mt_size: 1,
                st_train_size: 2,
                st_dev_size: 1,
                st_test_size: 1,
                min_len: 2,
                max_len: 3,
                ..CorpusConfig::default()
            },
            8,
        )
        .unwrap();
        let model = StModel::new(&tiny_config(), &corpus.vocab, 8).unwrap();
        let settings = TabSettings {
            policy: ReplacePolicy::Fixed { p_star: 0.0 },
            divergence: DivergenceKind::BiKl,
            label_smoothing: 0.1,
            lambda: 0.3,
            alpha: 1.0,
            single_branch: false,
            entropy_mode: EntropyMode::FullDistribution,
            upsilon_ema: 0.0,
            dropout: 0.0,
            cons_grad_flow: ConsGradFlow::Both,
        };
        let batch: Vec<&UtteranceTriple> = corpus.st_train.iter().collect();
        let mut g = DiffGraph::new(Precision::F64);
        let out = forward_tab(&mut g, &model, &batch, &settings, None, false, 7).unwrap();
        assert_eq!(out.skipped, 0);
        for (p, q) in out.p_nodes.iter().zip(&out.q_nodes) {
            let pb: Vec<u64> = g.value(*p).data().iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u64> = g.value(*q).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(pb, qb);
        }
        assert_eq!(out.breakdown.cons, 0.0);
        assert!(out.breakdown.decomposition_error() <= 1e-9);
    }

    #[test]
    fn tab_dropout_separates_branches() {
        let corpus = build_corpus(
            &CorpusConfig {
                n_source: 6,
                n_target: 7,
                d_feat: 8,
                asr_size: 1,
                mt_size: 1,
                st_train_size: 1,
                st_dev_size: 1,
                st_test_size: 1,
                min_len: 2,
                max_len: 3,
                ..CorpusConfig::default()
            },
            9,
        )
        .unwrap();
        let model = StModel::new(&tiny_config(), &corpus.vocab, 9).unwrap();
        let settings = TabSettings {
            policy: ReplacePolicy::Fixed { p_star: 0.0 },
            divergence: DivergenceKind::BiKl,
            label_smoothing: 0.1,
            lambda: 0.3,
            alpha: 1.0,
            single_branch: false,
            entropy_mode: EntropyMode::FullDistribution,
            upsilon_ema: 0.0,
            dropout: 0.15,
            cons_grad_flow: ConsGradFlow::Both,
        };
        let batch: Vec<&UtteranceTriple> = corpus.st_train.iter().collect();
        let mut g = DiffGraph::new(Precision::F64);
        let out = forward_tab(&mut g, &model, &batch, &settings, None, true, 3).unwrap();
        let p = g.value(out.p_nodes[0]).data().to_vec();
        let q = g.value(out.q_nodes[0]).data().to_vec();
        assert_ne!(p, q, "independent dropout masks must separate the branches");
        assert!(out.breakdown.cons > 0.0);
    }

    #[test]
    fn init_from_pretrained_transfers_everything() {
        let vocab = make_vocab(6, 7, 1).unwrap();
        let config = tiny_config();
        let asr_model = StModel::new(&config, &vocab, 11).unwrap();
        let mt_model = StModel::new(&config, &vocab, 12).unwrap();
        let asr_ck = Checkpoint::from_params(
            &asr_model.params,
            Some(&asr_model.speech_ctc_param_names()),
            11,
            config.to_config_map(),
            "f64",
        )
        .unwrap();
        let mt_ck = Checkpoint::from_params(
            &mt_model.params,
            Some(&mt_model.shared_param_names()),
            12,
            config.to_config_map(),
            "f64",
        )
        .unwrap();
        let (st, report) = init_from_pretrained(&config, &vocab, 13, &asr_ck, &mt_ck).unwrap();
        assert_eq!(report.count(), st.params.len());
        // Transfer identity: the ST model's CTC posterior equals the ASR
        // model's on the same input.
        let speech = random_speech(12, 8, 2);
        let a = ctc_posterior_for(&asr_model, &speech, Precision::F64).unwrap();
        let b = ctc_posterior_for(&st, &speech, Precision::F64).unwrap();
        assert_eq!(a.logp.data(), b.logp.data());
    }

    #[test]
    fn init_reports_missing_tensor() {
        let vocab = make_vocab(6, 7, 1).unwrap();
        let config = tiny_config();
        let m = StModel::new(&config, &vocab, 11).unwrap();
        let partial_names: Vec<String> = m.speech_ctc_param_names().into_iter().skip(1).collect();
        let asr_ck = Checkpoint::from_params(&m.params, Some(&partial_names), 11, BTreeMap::new(), "f64").unwrap();
        let mt_ck = Checkpoint::from_params(&m.params, Some(&m.shared_param_names()), 11, BTreeMap::new(), "f64").unwrap();
        assert!(matches!(
            init_from_pretrained(&config, &vocab, 1, &asr_ck, &mt_ck),
            Err(Error::MissingTensor { .. })
        ));
    }
}
