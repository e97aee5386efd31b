use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::sample::MultimodalSample;
use crate::autodiff::Tape;
use crate::error::{contract, Result};
use crate::model::ModelParams;
use crate::scene::vocab;
use crate::scene::QaKind;

const EVAL_CHUNK: usize = 32;

/// Longest answer greedy decoding may produce before it counts as wrong.
pub const DEFAULT_DECODE_CAP: usize = 8;

/// Mean cross-entropy over all answer targets of `samples`, weighted per
/// token, with no blanking and no gradient.
pub fn eval_ntp(params: &ModelParams, samples: &[MultimodalSample]) -> Result<f32> {
    if samples.is_empty() {
        return Err(contract("evaluation set is empty"));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, &[]);
        let patches: Vec<f32> = chunk.iter().flat_map(|s| s.patches.iter().copied()).collect();
        let texts: Vec<&[usize]> = chunk.iter().map(|s| s.input.as_slice()).collect();
        let f = params.forward(&mut tape, &b, Some(&patches), &texts)?;
        let targets: Vec<usize> = chunk.iter().flat_map(|s| s.target.iter().copied()).collect();
        let mask: Vec<bool> = chunk.iter().flat_map(|s| s.loss_mask.iter().copied()).collect();
        let kept = mask.iter().filter(|&&m| m).count();
        let logits = params.lm_head(&mut tape, &b, f.t_feat.expect("text present"))?;
        let ce = tape.cross_entropy(logits, &targets, &mask)?;
        sum += tape.scalar(ce) as f64 * kept as f64;
        count += kept;
    }
    Ok((sum / count.max(1) as f64) as f32)
}

/// Per-sample cross-entropy of every answer target, computed from the logits
/// with a float64 log-sum-exp.
pub fn answer_token_losses(params: &ModelParams, samples: &[MultimodalSample]) -> Result<Vec<Vec<f32>>> {
    let v = params.config().vocab_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, &[]);
        let patches: Vec<f32> = chunk.iter().flat_map(|s| s.patches.iter().copied()).collect();
        let texts: Vec<&[usize]> = chunk.iter().map(|s| s.input.as_slice()).collect();
        let f = params.forward(&mut tape, &b, Some(&patches), &texts)?;
        let logits = params.lm_head(&mut tape, &b, f.t_feat.expect("text present"))?;
        let l = tape.value(logits);
        for (s, rows) in chunk.iter().zip(&f.text_rows) {
            let mut losses = Vec::new();
            for (i, r) in rows.clone().enumerate() {
                if !s.loss_mask[i] {
                    continue;
                }
                let row = &l[r * v..(r + 1) * v];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
                losses.push((lse - row[s.target[i]] as f64) as f32);
            }
            out.push(losses);
        }
    }
    Ok(out)
}

/// Greedy continuation of each prompt until `<eos>`. `None` marks a decode
/// that hit `cap` tokens or the context limit without finishing.
pub fn greedy_decode(params: &ModelParams, samples: &[&MultimodalSample], cap: usize) -> Result<Vec<Option<Vec<usize>>>> {
    let max_len = params.config().max_text_len;
    let mut seqs: Vec<Vec<usize>> = samples.iter().map(|s| s.prompt().to_vec()).collect();
    let mut done: Vec<Option<Option<Vec<usize>>>> = vec![None; samples.len()];
    for _ in 0..=cap {
        let active: Vec<usize> = (0..samples.len()).filter(|&i| done[i].is_none()).collect();
        if active.is_empty() {
            break;
        }
        for chunk in active.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, &[]);
            let patches: Vec<f32> = chunk.iter().flat_map(|&i| samples[i].patches.iter().copied()).collect();
            let texts: Vec<&[usize]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            let f = params.forward(&mut tape, &b, Some(&patches), &texts)?;
            let logits = params.lm_head(&mut tape, &b, f.t_feat.expect("prompt present"))?;
            let v = params.config().vocab_size;
            let l = tape.value(logits);
            let mut next = Vec::with_capacity(chunk.len());
            for rows in &f.text_rows {
                let last = rows.end - 1;
                let row = &l[last * v..(last + 1) * v];
                let best = (0..v).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                next.push(best);
            }
            for (&i, tok) in chunk.iter().zip(next) {
                let generated = seqs[i].len() - samples[i].prompt().len();
                if tok == vocab::EOS {
                    done[i] = Some(Some(seqs[i][samples[i].prompt().len()..].to_vec()));
                } else if generated >= cap || seqs[i].len() >= max_len {
                    done[i] = Some(None);
                } else {
                    seqs[i].push(tok);
                }
            }
        }
    }
    Ok(done.into_iter().map(|d| d.unwrap_or(None)).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub per_kind: BTreeMap<QaKind, KindScore>,
    /// Unweighted mean of the per-kind accuracies.
    pub mean: f64,
}

/// Exact-match accuracy of greedy answers, per question kind.
pub fn eval_qa_accuracy(params: &ModelParams, samples: &[MultimodalSample], cap: usize) -> Result<QaReport> {
    if samples.is_empty() {
        return Err(contract("evaluation set is empty"));
    }
    let refs: Vec<&MultimodalSample> = samples.iter().collect();
    let decoded = greedy_decode(params, &refs, cap)?;
    let mut per_kind: BTreeMap<QaKind, KindScore> = BTreeMap::new();
    for (s, d) in samples.iter().zip(decoded) {
        let e = per_kind.entry(s.kind).or_default();
        e.total += 1;
        if d.as_deref() == Some(s.answer()) {
            e.correct += 1;
        }
    }
    for e in per_kind.values_mut() {
        e.accuracy = e.correct as f64 / e.total as f64;
    }
    let mean = per_kind.values().map(|e| e.accuracy).sum::<f64>() / per_kind.len() as f64;
    Ok(QaReport { per_kind, mean })
}
