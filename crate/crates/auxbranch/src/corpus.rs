//! Synthetic tri-modal corpus: speech features, transcripts, translations.
//!
//! The corpus mirrors the resource asymmetry of real speech translation
//! setups: a large ASR split (speech, transcript), a large MT split
//! (transcript, translation) and a small ST split (all three). Speech is
//! synthesized from per-token acoustic templates; translations come from a
//! substitution cipher with adjacent-pair reordering, so the task requires
//! genuine (if simple) reordering while remaining exactly invertible.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::tensor::Tensor2D;
use crate::vocab::{make_vocab, ExtendedVocab};

/// How many raw frames per downsampled frame the speech encoder removes.
pub const DOWNSAMPLE_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub d_feat: usize,
    pub noise_sigma: f64,
    pub silence_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub asr_size: usize,
    pub mt_size: usize,
    pub st_train_size: usize,
    pub st_dev_size: usize,
    pub st_test_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_source: 40,
            n_target: 40,
            d_feat: 16,
            noise_sigma: 0.1,
            silence_prob: 0.3,
            min_len: 3,
            max_len: 12,
            asr_size: 5000,
            mt_size: 20000,
            st_train_size: 1000,
            st_dev_size: 200,
            st_test_size: 200,
        }
    }
}

/// One utterance with all three modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceTriple {
    pub speech: Tensor2D,
    pub transcript: Vec<usize>,
    pub translation: Vec<usize>,
}

/// Per-token acoustic template vectors, drawn once per corpus seed.
#[derive(Debug, Clone)]
pub struct AcousticTemplates {
    pub vectors: Tensor2D,
}

impl AcousticTemplates {
    pub fn generate(n_source: usize, d_feat: usize, corpus_seed: u64) -> Self {
        let mut rng = rng::stream(corpus_seed, &[tags::CORPUS_TEMPLATES]);
        let data = (0..n_source * d_feat)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z as f32 as f64
            })
            .collect();
        AcousticTemplates {
            vectors: Tensor2D::from_vec(n_source, d_feat, data).expect("sized above"),
        }
    }

    pub fn d_feat(&self) -> usize {
        self.vectors.cols()
    }
}

/// Substitution cipher plus adjacent-pair swap; the deterministic ground
/// truth translation function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cipher {
    map: Vec<usize>,
    inverse: Vec<Option<usize>>,
}

impl Cipher {
    pub fn generate(n_source: usize, n_target: usize, corpus_seed: u64) -> Result<Self> {
        if n_target < n_source {
            return Err(Error::InvalidArg(format!(
                "cipher needs n_target >= n_source ({n_target} < {n_source})"
            )));
        }
        let mut rng = rng::stream(corpus_seed, &[tags::CORPUS_CIPHER]);
        let mut targets: Vec<usize> = (0..n_target).collect();
        targets.shuffle(&mut rng);
        let map: Vec<usize> = targets[..n_source].to_vec();
        let mut inverse = vec![None; n_target];
        for (s, &t) in map.iter().enumerate() {
            inverse[t] = Some(s);
        }
        Ok(Cipher { map, inverse })
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }
}

fn swap_adjacent<T: Copy>(xs: &[T]) -> Vec<T> {
    let mut out = xs.to_vec();
    let mut i = 0;
    while i + 1 < out.len() {
        out.swap(i, i + 1);
        i += 2;
    }
    out
}

/// y = cipher(x) with adjacent pairs swapped (odd tail left in place).
pub fn translate_reference(x: &[usize], cipher: &Cipher) -> Vec<usize> {
    let mapped: Vec<usize> = x.iter().map(|&t| cipher.map[t]).collect();
    swap_adjacent(&mapped)
}

/// Inverse of `translate_reference`.
pub fn translate_reference_inverse(y: &[usize], cipher: &Cipher) -> Result<Vec<usize>> {
    let unswapped = swap_adjacent(y);
    unswapped
        .iter()
        .map(|&t| {
            cipher
                .inverse
                .get(t)
                .copied()
                .flatten()
                .ok_or(Error::IdOutOfRange {
                    id: t,
                    vocab: cipher.inverse.len(),
                })
        })
        .collect()
}

/// Token-frame construction only: each token's template repeated `r` frames
/// with additive Gaussian noise, optional single silence frames at internal
/// boundaries. No feasibility fill.
pub fn synth_token_frames(
    x: &[usize],
    templates: &AcousticTemplates,
    noise_sigma: f64,
    silence_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("transcript for speech synthesis".into()));
    }
    let d = templates.d_feat();
    let mut frames: Vec<Vec<f64>> = Vec::new();
    let noisy_frame = |base: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        base.iter()
            .map(|&b| {
                let z: f64 = rng.sample(StandardNormal);
                (b + noise_sigma * z) as f32 as f64
            })
            .collect()
    };
    let zero = vec![0.0; d];
    for (i, &tok) in x.iter().enumerate() {
        if tok >= templates.vectors.rows() {
            return Err(Error::IdOutOfRange {
                id: tok,
                vocab: templates.vectors.rows(),
            });
        }
        let r = rng.gen_range(2..=4usize);
        let base = templates.vectors.row(tok).to_vec();
        for _ in 0..r {
            frames.push(noisy_frame(&base, rng));
        }
        if i + 1 < x.len() && rng.gen::<f64>() < silence_prob {
            frames.push(noisy_frame(&zero, rng));
        }
    }
    Ok(frames)
}

/// Synthesizes the speech features for one transcript. Guarantees CTC
/// feasibility after downsampling (ceil(T / 4) >= 2|x|+1) by inserting extra
/// silence frames at random token boundaries.
pub fn synthesize_speech(
    x: &[usize],
    templates: &AcousticTemplates,
    noise_sigma: f64,
    silence_prob: f64,
    seed: u64,
) -> Result<Tensor2D> {
    let mut rng = rng::stream(seed, &[tags::CORPUS_SPEECH]);
    let mut frames = synth_token_frames(x, templates, noise_sigma, silence_prob, &mut rng)?;
    let d = templates.d_feat();
    let needed = DOWNSAMPLE_FACTOR * (2 * x.len() + 1);
    let zero = vec![0.0; d];
    while frames.len() < needed {
        let pos = rng.gen_range(0..=frames.len());
        let frame: Vec<f64> = zero
            .iter()
            .map(|&b| {
                let z: f64 = rng.sample(StandardNormal);
                (b + noise_sigma * z) as f32 as f64
            })
            .collect();
        frames.insert(pos, frame);
    }
    let t = frames.len();
    Tensor2D::from_vec(t, d, frames.into_iter().flatten().collect())
}

/// Speech+transcript pair for ASR.
pub type AsrPair = (Tensor2D, Vec<usize>);
/// Transcript+translation pair for MT.
pub type MtPair = (Vec<usize>, Vec<usize>);

#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub vocab: ExtendedVocab,
    pub asr: Vec<AsrPair>,
    pub mt: Vec<MtPair>,
    pub st_train: Vec<UtteranceTriple>,
    pub st_dev: Vec<UtteranceTriple>,
    pub st_test: Vec<UtteranceTriple>,
    pub seed: u64,
    pub cipher: Cipher,
    pub templates: AcousticTemplates,
    pub config: CorpusConfig,
}

/// Generates the full corpus as a pure function of (config, seed).
///
/// Held-out transcripts (st-dev, st-test) are excluded from every training
/// split by transcript identity, so the deterministic translation function
/// cannot leak targets into evaluation.
pub fn build_corpus(config: &CorpusConfig, seed: u64) -> Result<CorpusBundle> {
    let vocab = make_vocab(config.n_source, config.n_target, seed)?;
    if config.min_len < 1 || config.max_len < config.min_len {
        return Err(Error::InvalidArg(format!(
            "bad length range [{}, {}]",
            config.min_len, config.max_len
        )));
    }
    let templates = AcousticTemplates::generate(config.n_source, config.d_feat, seed);
    let cipher = Cipher::generate(config.n_source, config.n_target, seed)?;

    let mut trng = rng::stream(seed, &[tags::CORPUS_TRANSCRIPTS]);
    let sample_transcript = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.gen_range(config.min_len..=config.max_len);
        (0..len).map(|_| rng.gen_range(0..config.n_source)).collect()
    };

    // Held-out transcripts first, unique among themselves.
    let mut held_out: HashSet<Vec<usize>> = HashSet::new();
    let mut dev_x = Vec::new();
    let mut test_x = Vec::new();
    while dev_x.len() < config.st_dev_size {
        let x = sample_transcript(&mut trng);
        if held_out.insert(x.clone()) {
            dev_x.push(x);
        }
    }
    while test_x.len() < config.st_test_size {
        let x = sample_transcript(&mut trng);
        if held_out.insert(x.clone()) {
            test_x.push(x);
        }
    }

    let sample_train = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        loop {
            let x = sample_transcript(rng);
            if !held_out.contains(&x) {
                return x;
            }
        }
    };

    let asr_x: Vec<Vec<usize>> = (0..config.asr_size).map(|_| sample_train(&mut trng)).collect();
    let mt_x: Vec<Vec<usize>> = (0..config.mt_size).map(|_| sample_train(&mut trng)).collect();
    let st_x: Vec<Vec<usize>> = (0..config.st_train_size).map(|_| sample_train(&mut trng)).collect();

    let synth = |x: &[usize], split: u64, idx: u64| -> Result<Tensor2D> {
        let utt_seed = rng::derive_seed(seed, &[tags::CORPUS_SPEECH, split, idx]);
        synthesize_speech(x, &templates, config.noise_sigma, config.silence_prob, utt_seed)
    };

    let mut asr = Vec::with_capacity(asr_x.len());
    for (i, x) in asr_x.into_iter().enumerate() {
        let speech = synth(&x, 0, i as u64)?;
        asr.push((speech, x));
    }
    let mt: Vec<MtPair> = mt_x
        .into_iter()
        .map(|x| {
            let y = translate_reference(&x, &cipher);
            (x, y)
        })
        .collect();

    let triples = |xs: Vec<Vec<usize>>, split: u64| -> Result<Vec<UtteranceTriple>> {
        xs.into_iter()
            .enumerate()
            .map(|(i, x)| {
                let speech = synth(&x, split, i as u64)?;
                let translation = translate_reference(&x, &cipher);
                Ok(UtteranceTriple {
                    speech,
                    transcript: x,
                    translation,
                })
            })
            .collect()
    };

    let st_train = triples(st_x, 1)?;
    let st_dev = triples(dev_x, 2)?;
    let st_test = triples(test_x, 3)?;

    Ok(CorpusBundle {
        vocab,
        asr,
        mt,
        st_train,
        st_dev,
        st_test,
        seed,
        cipher,
        templates,
        config: config.clone(),
    })
}

/// A batch of padded token id rows plus validity masks and true lengths.
/// Padding positions carry `pad_id` and `mask == false`; consumers must use
/// the mask (or lengths) so padding never reaches a loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub lens: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_seqs(seqs: &[Vec<usize>], pad_id: usize) -> Self {
        Self::from_seqs_with_width(seqs, pad_id, 0)
    }

    /// Pads to at least `min_width` columns (used by the padding-invariance
    /// checks to add pure padding).
    pub fn from_seqs_with_width(seqs: &[Vec<usize>], pad_id: usize, min_width: usize) -> Self {
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0).max(min_width);
        let mut ids = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut row = s.clone();
            let mut m = vec![true; s.len()];
            row.resize(width, pad_id);
            m.resize(width, false);
            ids.push(row);
            mask.push(m);
            lens.push(s.len());
        }
        PaddedBatch { ids, mask, lens }
    }

    /// The unpadded sequence in row `i`.
    pub fn seq(&self, i: usize) -> &[usize] {
        &self.ids[i][..self.lens[i]]
    }

    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }
}

/// Splits `n` items into consecutive index chunks of `batch_size`.
pub fn batch_indices(n: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::InvalidArg("batch_size must be >= 1".into()));
    }
    Ok((0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

const SPLIT_FILES: [(&str, bool); 5] = [
    ("asr", true),
    ("mt", false),
    ("st_train", true),
    ("st_dev", true),
    ("st_test", true),
];

fn ids_to_line(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

fn line_to_ids(line: &str) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|e| Error::Config(format!("bad token id '{t}': {e}")))
        })
        .collect()
}

fn write_speech_sidecar(path: &Path, utts: &[&Tensor2D], d_feat: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let mut header: Vec<u8> = Vec::new();
    header.extend_from_slice(&(utts.len() as u32).to_le_bytes());
    header.extend_from_slice(&(d_feat as u32).to_le_bytes());
    for u in utts {
        header.extend_from_slice(&(u.rows() as u32).to_le_bytes());
    }
    f.write_all(&header)?;
    let mut payload: Vec<u8> = Vec::new();
    for u in utts {
        for &v in u.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    f.write_all(&payload)?;
    Ok(())
}

fn read_speech_sidecar(path: &Path) -> Result<Vec<Tensor2D>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let read_u32 = |off: &mut usize| -> Result<u32> {
        let end = *off + 4;
        if end > bytes.len() {
            return Err(Error::CheckpointFormat("speech sidecar truncated".into()));
        }
        let v = u32::from_le_bytes(bytes[*off..end].try_into().expect("4 bytes"));
        *off = end;
        Ok(v)
    };
    let n_utts = read_u32(&mut off)? as usize;
    let d_feat = read_u32(&mut off)? as usize;
    let counts: Vec<usize> = (0..n_utts)
        .map(|_| read_u32(&mut off).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(n_utts);
    for t in counts {
        let mut data = Vec::with_capacity(t * d_feat);
        for _ in 0..t * d_feat {
            let end = off + 4;
            if end > bytes.len() {
                return Err(Error::CheckpointFormat("speech sidecar truncated".into()));
            }
            let v = f32::from_le_bytes(bytes[off..end].try_into().expect("4 bytes"));
            off = end;
            data.push(v as f64);
        }
        out.push(Tensor2D::from_vec(t, d_feat, data)?);
    }
    Ok(out)
}

/// Exports the corpus to `dir`: one text record per utterance (space
/// separated ids; transcript and translation tab separated), with speech in a
/// per-split binary sidecar of 32-bit floats.
pub fn export_corpus(corpus: &CorpusBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut meta = String::new();
    meta.push_str(&format!("seed = {}\n", corpus.seed));
    meta.push_str(&format!("n_source = {}\n", corpus.config.n_source));
    meta.push_str(&format!("n_target = {}\n", corpus.config.n_target));
    meta.push_str(&format!("d_feat = {}\n", corpus.config.d_feat));
    meta.push_str(&format!(
        "cipher = {}\n",
        ids_to_line(corpus.cipher.map())
    ));
    std::fs::write(dir.join("corpus_meta.txt"), meta)?;

    for (name, _) in SPLIT_FILES {
        let mut text = String::new();
        let mut speech: Vec<&Tensor2D> = Vec::new();
        match name {
            "asr" => {
                for (s, x) in &corpus.asr {
                    text.push_str(&ids_to_line(x));
                    text.push('\n');
                    speech.push(s);
                }
            }
            "mt" => {
                for (x, y) in &corpus.mt {
                    text.push_str(&format!("{}\t{}\n", ids_to_line(x), ids_to_line(y)));
                }
            }
            _ => {
                let split = match name {
                    "st_train" => &corpus.st_train,
                    "st_dev" => &corpus.st_dev,
                    _ => &corpus.st_test,
                };
                for u in split {
                    text.push_str(&format!(
                        "{}\t{}\n",
                        ids_to_line(&u.transcript),
                        ids_to_line(&u.translation)
                    ));
                    speech.push(&u.speech);
                }
            }
        }
        std::fs::write(dir.join(format!("{name}.txt")), text)?;
        if name != "mt" {
            write_speech_sidecar(&dir.join(format!("{name}.feat")), &speech, corpus.config.d_feat)?;
        }
    }
    Ok(())
}

/// Imports a corpus previously written by `export_corpus`. The returned
/// bundle regenerates templates from the recorded seed; split contents come
/// from the files.
pub fn import_corpus(dir: &Path, config: &CorpusConfig) -> Result<CorpusBundle> {
    let meta_text = std::fs::read_to_string(dir.join("corpus_meta.txt"))?;
    let mut seed = None;
    let mut cipher_ids = None;
    let mut n_source = None;
    let mut n_target = None;
    for line in meta_text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        let (k, v) = (k.trim(), v.trim());
        match k {
            "seed" => seed = Some(v.parse::<u64>().map_err(|e| Error::Config(e.to_string()))?),
            "cipher" => cipher_ids = Some(line_to_ids(v)?),
            "n_source" => n_source = Some(v.parse::<usize>().map_err(|e| Error::Config(e.to_string()))?),
            "n_target" => n_target = Some(v.parse::<usize>().map_err(|e| Error::Config(e.to_string()))?),
            _ => {}
        }
    }
    let seed = seed.ok_or_else(|| Error::Config("corpus_meta.txt missing seed".into()))?;
    let n_source = n_source.ok_or_else(|| Error::Config("corpus_meta.txt missing n_source".into()))?;
    let n_target = n_target.ok_or_else(|| Error::Config("corpus_meta.txt missing n_target".into()))?;
    let map = cipher_ids.ok_or_else(|| Error::Config("corpus_meta.txt missing cipher".into()))?;
    let mut inverse = vec![None; n_target];
    for (s, &t) in map.iter().enumerate() {
        if t >= n_target {
            return Err(Error::IdOutOfRange { id: t, vocab: n_target });
        }
        inverse[t] = Some(s);
    }
    let cipher = Cipher { map, inverse };
    let vocab = make_vocab(n_source, n_target, seed)?;
    let templates = AcousticTemplates::generate(n_source, config.d_feat, seed);

    let read_text = |name: &str| -> Result<Vec<Vec<Vec<usize>>>> {
        let text = std::fs::read_to_string(dir.join(format!("{name}.txt")))?;
        text.lines()
            .map(|l| l.split('\t').map(line_to_ids).collect::<Result<Vec<_>>>())
            .collect()
    };

    let asr_text = read_text("asr")?;
    let asr_speech = read_speech_sidecar(&dir.join("asr.feat"))?;
    if asr_text.len() != asr_speech.len() {
        return Err(Error::Config("asr split: text/speech record counts differ".into()));
    }
    let asr: Vec<AsrPair> = asr_speech
        .into_iter()
        .zip(asr_text)
        .map(|(s, mut fields)| (s, fields.remove(0)))
        .collect();

    let mt: Vec<MtPair> = read_text("mt")?
        .into_iter()
        .map(|mut fields| {
            if fields.len() != 2 {
                return Err(Error::Config("mt split: expected transcript<TAB>translation".into()));
            }
            let y = fields.remove(1);
            let x = fields.remove(0);
            Ok((x, y))
        })
        .collect::<Result<_>>()?;

    let read_st = |name: &str| -> Result<Vec<UtteranceTriple>> {
        let text = read_text(name)?;
        let speech = read_speech_sidecar(&dir.join(format!("{name}.feat")))?;
        if text.len() != speech.len() {
            return Err(Error::Config(format!("{name}: text/speech record counts differ")));
        }
        speech
            .into_iter()
            .zip(text)
            .map(|(s, mut fields)| {
                if fields.len() != 2 {
                    return Err(Error::Config(format!("{name}: expected transcript<TAB>translation")));
                }
                let translation = fields.remove(1);
                let transcript = fields.remove(0);
                Ok(UtteranceTriple {
                    speech: s,
                    transcript,
                    translation,
                })
            })
            .collect()
    };

    Ok(CorpusBundle {
        vocab,
        asr,
        mt,
        st_train: read_st("st_train")?,
        st_dev: read_st("st_dev")?,
        st_test: read_st("st_test")?,
        seed,
        cipher,
        templates,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            asr_size: 12,
            mt_size: 20,
            st_train_size: 8,
            st_dev_size: 4,
            st_test_size: 4,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn default_sizes_echo_config() {
        let c = CorpusConfig::default();
        assert_eq!((c.asr_size, c.mt_size, c.st_train_size), (5000, 20000, 1000));
    }

    #[test]
    fn cipher_translation_rules() {
        let cipher = Cipher {
            map: vec![10, 11, 12, 13],
            inverse: {
                let mut v = vec![None; 14];
                v[10] = Some(0);
                v[11] = Some(1);
                v[12] = Some(2);
                v[13] = Some(3);
                v
            },
        };
        assert_eq!(translate_reference(&[0, 1, 2, 3], &cipher), vec![11, 10, 13, 12]);
        assert_eq!(translate_reference(&[0], &cipher), vec![10]);
        let x = vec![3, 1, 0, 2, 1];
        let y = translate_reference(&x, &cipher);
        assert_eq!(translate_reference_inverse(&y, &cipher).unwrap(), x);
    }

    #[test]
    fn zero_noise_frames_are_template_repeats() {
        let templates = AcousticTemplates::generate(5, 4, 1);
        let mut rng = rng::stream(2, &[0]);
        let frames = synth_token_frames(&[1, 3], &templates, 0.0, 0.0, &mut rng).unwrap();
        for f in &frames {
            let is_template = (0..5).any(|tok| templates.vectors.row(tok) == &f[..]);
            assert!(is_template);
        }
    }

    #[test]
    fn token_frame_count_bounds() {
        let templates = AcousticTemplates::generate(6, 4, 3);
        for seed in 0..10 {
            let mut rng = rng::stream(seed, &[1]);
            let frames = synth_token_frames(&[0, 1, 2], &templates, 0.0, 0.0, &mut rng).unwrap();
            assert!((6..=12).contains(&frames.len()), "got {}", frames.len());
        }
    }

    #[test]
    fn speech_is_deterministic_per_seed() {
        let templates = AcousticTemplates::generate(6, 4, 3);
        let a = synthesize_speech(&[0, 1, 2], &templates, 0.1, 0.3, 99).unwrap();
        let b = synthesize_speech(&[0, 1, 2], &templates, 0.1, 0.3, 99).unwrap();
        assert_eq!(a, b);
        let c = synthesize_speech(&[0, 1, 2], &templates, 0.1, 0.3, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_transcript_rejected() {
        let templates = AcousticTemplates::generate(6, 4, 3);
        assert!(synthesize_speech(&[], &templates, 0.1, 0.3, 1).is_err());
    }

    #[test]
    fn corpus_feasible_after_downsampling() {
        let corpus = build_corpus(&small_config(), 5).unwrap();
        for u in corpus
            .st_train
            .iter()
            .chain(&corpus.st_dev)
            .chain(&corpus.st_test)
        {
            let t = u.speech.rows();
            let t_down = t.div_ceil(DOWNSAMPLE_FACTOR);
            assert!(t_down >= 2 * u.transcript.len() + 1);
            assert!(t >= 2 * u.transcript.len() + 1);
        }
        for (s, x) in &corpus.asr {
            assert!(s.rows().div_ceil(DOWNSAMPLE_FACTOR) >= 2 * x.len() + 1);
        }
    }

    #[test]
    fn corpus_is_pure_function_of_config_and_seed() {
        let a = build_corpus(&small_config(), 7).unwrap();
        let b = build_corpus(&small_config(), 7).unwrap();
        assert_eq!(a.st_train, b.st_train);
        assert_eq!(a.mt, b.mt);
        assert_eq!(a.asr, b.asr);
    }

    #[test]
    fn held_out_transcripts_not_in_training_splits() {
        let corpus = build_corpus(&small_config(), 9).unwrap();
        let mut held = HashSet::new();
        for u in corpus.st_dev.iter().chain(&corpus.st_test) {
            held.insert(u.transcript.clone());
        }
        for u in &corpus.st_train {
            assert!(!held.contains(&u.transcript));
        }
        for (_, x) in &corpus.asr {
            assert!(!held.contains(x));
        }
        for (x, _) in &corpus.mt {
            assert!(!held.contains(x));
        }
    }

    #[test]
    fn translations_match_reference_function() {
        let corpus = build_corpus(&small_config(), 11).unwrap();
        for u in &corpus.st_train {
            assert_eq!(u.translation, translate_reference(&u.transcript, &corpus.cipher));
        }
    }

    #[test]
    fn padded_batch_masks() {
        let batch = PaddedBatch::from_seqs(&[vec![1, 2, 3], vec![4]], 0);
        assert_eq!(batch.lens, vec![3, 1]);
        assert_eq!(batch.mask[1], vec![true, false, false]);
        assert_eq!(batch.seq(1), &[4]);
        let same = PaddedBatch::from_seqs(&[vec![1, 2], vec![3, 4]], 0);
        assert!(same.mask.iter().flatten().all(|&m| m));
    }

    #[test]
    fn batch_size_zero_rejected() {
        assert!(batch_indices(10, 0).is_err());
        assert_eq!(batch_indices(5, 2).unwrap(), vec![vec![0, 1], vec![2, 3], vec![4]]);
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let corpus = build_corpus(&config, 21).unwrap();
        export_corpus(&corpus, dir.path()).unwrap();
        let back = import_corpus(dir.path(), &config).unwrap();
        assert_eq!(back.seed, corpus.seed);
        assert_eq!(back.cipher, corpus.cipher);
        assert_eq!(back.mt, corpus.mt);
        assert_eq!(back.st_train, corpus.st_train);
        assert_eq!(back.st_dev, corpus.st_dev);
        assert_eq!(back.asr, corpus.asr);
    }
}
