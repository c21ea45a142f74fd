//! Spatial-logic model: an LSTM encoder-decoder over category sequences.
//!
//! Superpixels are read top-to-bottom inside vertical strips, giving short
//! sequences of voted categories per image. Training repeatedly hides one
//! maximal run of equal categories behind a mask token and asks the decoder
//! to reproduce the full sequence; a prediction layout that follows the
//! scene's vertical logic is then easy to reconstruct. Scoring masks each
//! run in turn and reads, at every hidden position, the probability of the
//! category that was actually predicted there — an unlikely category in
//! that spatial context earns a low score.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RptError};
use crate::lstm::{softmax_vec, Linear, LinearGrads, LstmCell, LstmGrads};
use crate::slic::SuperpixelMap;
use crate::stats::{RetainedSet, SuperpixelStats};

/// A strip of superpixels in spatial order with their voted categories.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// Voted category per position, each `< classes`.
    pub tokens: Vec<u8>,
    /// Superpixel id at each position.
    pub superpixels: Vec<u16>,
}

/// A maximal run of equal tokens: `tokens[start..start+len]` are equal and
/// the positions just outside (if any) differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Run {
    pub start: usize,
    pub len: usize,
}

/// Decompose a sequence into its maximal runs, in order.
pub fn maximal_runs(tokens: &[u8]) -> Vec<Run> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=tokens.len() {
        if i == tokens.len() || tokens[i] != tokens[start] {
            runs.push(Run {
                start,
                len: i - start,
            });
            start = i;
        }
    }
    runs
}

/// Replace one maximal run with the mask token (index `classes`), returning
/// token indices in the extended alphabet. Rejects ranges that are not
/// maximal runs so scores are always computed under the training regime.
pub fn mask_run(tokens: &[u8], run: &Run, classes: usize) -> Result<Vec<usize>> {
    if run.len == 0 || run.start + run.len > tokens.len() {
        return Err(RptError::Invalid(format!(
            "run {}+{} out of bounds for sequence of {}",
            run.start,
            run.len,
            tokens.len()
        )));
    }
    let v = tokens[run.start];
    if tokens[run.start..run.start + run.len]
        .iter()
        .any(|&t| t != v)
    {
        return Err(RptError::Invalid("run spans unequal tokens".into()));
    }
    if run.start > 0 && tokens[run.start - 1] == v {
        return Err(RptError::Invalid("run is not maximal on the left".into()));
    }
    let end = run.start + run.len;
    if end < tokens.len() && tokens[end] == v {
        return Err(RptError::Invalid("run is not maximal on the right".into()));
    }
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if i >= run.start && i < end {
                classes
            } else {
                t as usize
            }
        })
        .collect())
}

/// Encoder-decoder over category tokens plus one mask token.
#[derive(Debug, Clone, PartialEq)]
pub struct LogicModel {
    pub classes: usize,
    pub hidden: usize,
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    pub proj: Linear,
}

impl LogicModel {
    pub fn zeros(classes: usize, hidden: usize) -> LogicModel {
        LogicModel {
            classes,
            hidden,
            encoder: LstmCell::zeros(classes + 1, hidden),
            decoder: LstmCell::zeros(classes + 1, hidden),
            proj: Linear::zeros(hidden, classes),
        }
    }

    /// Uniform initialization in `[-scale, scale]` from a seeded generator.
    pub fn init(classes: usize, hidden: usize, scale: f64, rng: &mut ChaCha8Rng) -> LogicModel {
        LogicModel {
            classes,
            hidden,
            encoder: LstmCell::init_uniform(classes + 1, hidden, scale, rng),
            decoder: LstmCell::init_uniform(classes + 1, hidden, scale, rng),
            proj: Linear::init_uniform(hidden, classes, scale, rng),
        }
    }

    /// Write the model into a directory: a plain-text `model.txt` with the
    /// dimensions plus one tensor file per parameter block (f32 on disk).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| RptError::io(dir, e))?;
        let index = format!("classes {}\nhidden {}\n", self.classes, self.hidden);
        fs::write(dir.join("model.txt"), index).map_err(|e| RptError::io(dir, e))?;
        let blocks: [(&str, &[f64], Vec<u32>); 6] = [
            (
                "encoder_w",
                &self.encoder.w,
                vec![4 * self.hidden as u32, (self.classes + 1 + self.hidden) as u32],
            ),
            ("encoder_b", &self.encoder.b, vec![4 * self.hidden as u32]),
            (
                "decoder_w",
                &self.decoder.w,
                vec![4 * self.hidden as u32, (self.classes + 1 + self.hidden) as u32],
            ),
            ("decoder_b", &self.decoder.b, vec![4 * self.hidden as u32]),
            (
                "proj_w",
                &self.proj.w,
                vec![self.classes as u32, self.hidden as u32],
            ),
            ("proj_b", &self.proj.b, vec![self.classes as u32]),
        ];
        for (name, data, dims) in blocks {
            let t = crate::tensor::Tensor::f32(
                dims,
                data.iter().map(|&v| v as f32).collect(),
            )?;
            t.write(&dir.join(format!("{name}.rptt")))?;
        }
        Ok(())
    }

    /// Load a model previously written by [`LogicModel::save`].
    pub fn load(dir: &Path) -> Result<LogicModel> {
        let index_path = dir.join("model.txt");
        let text = fs::read_to_string(&index_path).map_err(|e| RptError::io(&index_path, e))?;
        let mut classes = None;
        let mut hidden = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let value: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| RptError::Format(format!("bad model index line: {line}")))?;
            match key {
                "classes" => classes = Some(value),
                "hidden" => hidden = Some(value),
                other => {
                    return Err(RptError::Format(format!("unknown model index key: {other}")))
                }
            }
        }
        let classes =
            classes.ok_or_else(|| RptError::Format("model index missing classes".into()))?;
        let hidden =
            hidden.ok_or_else(|| RptError::Format("model index missing hidden".into()))?;
        if classes == 0 || hidden == 0 {
            return Err(RptError::Invalid("model dimensions must be nonzero".into()));
        }
        let mut model = LogicModel::zeros(classes, hidden);
        let blocks: [(&str, &mut Vec<f64>, Vec<u32>); 6] = [
            (
                "encoder_w",
                &mut model.encoder.w,
                vec![4 * hidden as u32, (classes + 1 + hidden) as u32],
            ),
            ("encoder_b", &mut model.encoder.b, vec![4 * hidden as u32]),
            (
                "decoder_w",
                &mut model.decoder.w,
                vec![4 * hidden as u32, (classes + 1 + hidden) as u32],
            ),
            ("decoder_b", &mut model.decoder.b, vec![4 * hidden as u32]),
            ("proj_w", &mut model.proj.w, vec![classes as u32, hidden as u32]),
            ("proj_b", &mut model.proj.b, vec![classes as u32]),
        ];
        for (name, slot, dims) in blocks {
            let path = dir.join(format!("{name}.rptt"));
            let t = crate::tensor::Tensor::read(&path)?;
            if t.dims != dims {
                return Err(RptError::Format(format!(
                    "{name} has dims {:?}, expected {dims:?}",
                    t.dims
                )));
            }
            let crate::tensor::TensorData::F32(data) = &t.data else {
                return Err(RptError::Format(format!("{name} is not an f32 tensor")));
            };
            *slot = data.iter().map(|&v| v as f64).collect();
        }
        Ok(model)
    }
}

fn one_hot(index: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[index] = 1.0;
    v
}

/// Per-position posteriors for a masked sequence: encoder reads the whole
/// masked sequence, the decoder starts from the encoder's final state and
/// reads it again, and each decoder output is projected to class scores.
pub fn encdec_forward(model: &LogicModel, masked: &[usize]) -> Vec<Vec<f64>> {
    forward_traced(model, masked).0
}

struct ForwardTrace {
    xs: Vec<Vec<f64>>,
    enc: crate::lstm::LstmTrace,
    dec: crate::lstm::LstmTrace,
}

fn forward_traced(model: &LogicModel, masked: &[usize]) -> (Vec<Vec<f64>>, ForwardTrace) {
    let dim = model.classes + 1;
    let xs: Vec<Vec<f64>> = masked.iter().map(|&t| one_hot(t, dim)).collect();
    let zeros = vec![0.0; model.hidden];
    let enc = model.encoder.forward(&xs, &zeros, &zeros);
    let dec = model.decoder.forward(&xs, &enc.h_final, &enc.c_final);
    let probs = dec
        .hs
        .iter()
        .map(|h| softmax_vec(&model.proj.forward(h)))
        .collect();
    (probs, ForwardTrace { xs, enc, dec })
}

struct ModelGrads {
    encoder: LstmGrads,
    decoder: LstmGrads,
    proj: LinearGrads,
}

/// One training step on a single masked sequence: mean cross-entropy over
/// every position against the original tokens. Returns the loss.
fn train_step(model: &mut LogicModel, tokens: &[u8], masked: &[usize], lr: f64) -> f64 {
    let (probs, trace) = forward_traced(model, masked);
    let len = tokens.len();
    let inv = 1.0 / len as f64;
    let mut grads = ModelGrads {
        encoder: model.encoder.grads(),
        decoder: model.decoder.grads(),
        proj: model.proj.grads(),
    };
    let mut loss = 0.0;
    let mut dhs: Vec<Vec<f64>> = Vec::with_capacity(len);
    for t in 0..len {
        let y = tokens[t] as usize;
        loss -= probs[t][y].max(1e-15).ln() * inv;
        let dlogits: Vec<f64> = probs[t]
            .iter()
            .enumerate()
            .map(|(c, &p)| (p - if c == y { 1.0 } else { 0.0 }) * inv)
            .collect();
        dhs.push(model.proj.backward(&trace.dec.hs[t], &dlogits, &mut grads.proj));
    }
    let zeros = vec![0.0; model.hidden];
    let (dh0, dc0) =
        model
            .decoder
            .backward(&trace.dec, Some(&dhs), &zeros, &zeros, &mut grads.decoder);
    // The decoder's initial state is the encoder's final state.
    model
        .encoder
        .backward(&trace.enc, None, &dh0, &dc0, &mut grads.encoder);
    let _ = &trace.xs;
    model.encoder.sgd(&grads.encoder, lr);
    model.decoder.sgd(&grads.decoder, lr);
    model.proj.sgd(&grads.proj, lr);
    loss
}

/// Training summary: mean masked-sequence loss per epoch.
#[derive(Debug, Clone)]
pub struct LogicTrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Train the model: each epoch visits every sequence once, hides one
/// maximal run chosen by the seeded generator, and takes one SGD step.
pub fn train_logic(
    model: &mut LogicModel,
    sequences: &[TokenSequence],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<LogicTrainReport> {
    if sequences.is_empty() {
        return Err(RptError::Invalid("no sequences to train on".into()));
    }
    for s in sequences {
        validate_sequence(s, model.classes)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        for seq in sequences {
            let runs = maximal_runs(&seq.tokens);
            let run = runs[rng.gen_range(0..runs.len())];
            let masked = mask_run(&seq.tokens, &run, model.classes)?;
            total += train_step(model, &seq.tokens, &masked, lr);
        }
        epoch_losses.push(total / sequences.len() as f64);
    }
    Ok(LogicTrainReport { epoch_losses })
}

/// Spatial-logic score per superpixel; `None` where no sequence covers it.
#[derive(Debug, Clone, PartialEq)]
pub struct LogicScores {
    pub scores: Vec<Option<f64>>,
}

/// Score every superpixel covered by the sequences: mask the maximal run it
/// belongs to and read the model's probability for its own voted category
/// at its own position.
pub fn score_logic(
    model: &LogicModel,
    sequences: &[TokenSequence],
    superpixel_count: usize,
) -> Result<LogicScores> {
    let mut scores = vec![None; superpixel_count];
    for seq in sequences {
        validate_sequence(seq, model.classes)?;
        for run in maximal_runs(&seq.tokens) {
            let masked = mask_run(&seq.tokens, &run, model.classes)?;
            let probs = encdec_forward(model, &masked);
            for t in run.start..run.start + run.len {
                let id = seq.superpixels[t] as usize;
                if id >= superpixel_count {
                    return Err(RptError::Invalid(format!(
                        "sequence references superpixel {id}, map has {superpixel_count}"
                    )));
                }
                if scores[id].is_some() {
                    return Err(RptError::Invalid(format!(
                        "superpixel {id} appears in more than one sequence position"
                    )));
                }
                scores[id] = Some(probs[t][seq.tokens[t] as usize]);
            }
        }
    }
    Ok(LogicScores { scores })
}

/// Fraction of masked positions whose most likely category equals the
/// original token, across every maximal run of every sequence.
pub fn recovery_accuracy(model: &LogicModel, sequences: &[TokenSequence]) -> Result<(usize, usize)> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for seq in sequences {
        validate_sequence(seq, model.classes)?;
        for run in maximal_runs(&seq.tokens) {
            let masked = mask_run(&seq.tokens, &run, model.classes)?;
            let probs = encdec_forward(model, &masked);
            for t in run.start..run.start + run.len {
                let best = probs[t]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(c, _)| c)
                    .unwrap();
                if best == seq.tokens[t] as usize {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    Ok((correct, total))
}

fn validate_sequence(seq: &TokenSequence, classes: usize) -> Result<()> {
    if seq.tokens.len() != seq.superpixels.len() {
        return Err(RptError::Invalid(format!(
            "sequence tokens ({}) and superpixels ({}) differ",
            seq.tokens.len(),
            seq.superpixels.len()
        )));
    }
    if seq.tokens.len() < 2 {
        return Err(RptError::Invalid(
            "sequences must have at least two tokens".into(),
        ));
    }
    if let Some(&t) = seq.tokens.iter().find(|&&t| t as usize >= classes) {
        return Err(RptError::Invalid(format!(
            "token {t} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Build one token sequence per vertical strip: superpixels are binned by
/// centroid column, ordered by centroid row (id breaks ties), and only
/// retained superpixels with a voted category are kept. Strips that end up
/// with fewer than two tokens are dropped.
pub fn build_column_sequences(
    sp: &SuperpixelMap,
    stats: &SuperpixelStats,
    retained: &RetainedSet,
    n_strips: usize,
) -> Result<Vec<TokenSequence>> {
    if stats.count != sp.count || retained.retained.len() != sp.count {
        return Err(RptError::Invalid(format!(
            "stats ({}) and retained ({}) must cover {} superpixels",
            stats.count,
            retained.retained.len(),
            sp.count
        )));
    }
    if n_strips == 0 {
        return Err(RptError::Invalid("need at least one strip".into()));
    }
    let mut strips: Vec<Vec<u16>> = vec![Vec::new(); n_strips];
    for id in 0..sp.count {
        if !retained.contains(id) || stats.dominative[id].is_none() {
            continue;
        }
        let (_, col) = stats.centroid[id];
        let mut strip = ((col * n_strips as f64) / sp.width as f64).floor() as usize;
        if strip >= n_strips {
            strip = n_strips - 1;
        }
        strips[strip].push(id as u16);
    }
    let mut sequences = Vec::new();
    for mut ids in strips {
        ids.sort_by(|&a, &b| {
            let ra = stats.centroid[a as usize].0;
            let rb = stats.centroid[b as usize].0;
            ra.partial_cmp(&rb).unwrap().then(a.cmp(&b))
        });
        if ids.len() < 2 {
            continue;
        }
        let tokens = ids
            .iter()
            .map(|&id| stats.dominative[id as usize].unwrap())
            .collect();
        sequences.push(TokenSequence {
            tokens,
            superpixels: ids,
        });
    }
    Ok(sequences)
}
