//! Reading visual tokens through the language head, and per-token loss
//! comparisons between model variants.

mod font;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{contract, Result};
use crate::model::{patchify, ModelParams};
use crate::scene::vocab::Vocab;
use crate::scene::{render, Image, Rgb, Scene};
use crate::train::{answer_token_losses, MultimodalSample};

/// Token that labels unoccupied cells when scoring probes.
pub const BACKGROUND_TOKEN: &str = "background";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchProbe {
    pub patch: usize,
    /// `(token id, probability)`, most likely first.
    pub top: Vec<(usize, f32)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMap {
    pub scene_id: Option<u64>,
    pub patch_grid: usize,
    pub patches: Vec<PatchProbe>,
}

/// Language-head logits for every patch of each image, with no text input.
fn patch_logits(params: &ModelParams, images: &[&Image]) -> Result<Vec<f32>> {
    let patches: Vec<f32> = images
        .iter()
        .map(|i| patchify(params, i))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &[]);
    let empty: Vec<&[usize]> = vec![&[]; images.len()];
    let f = params.forward(&mut tape, &b, Some(&patches), &empty)?;
    let logits = params.lm_head(&mut tape, &b, f.v_feat.expect("images present"))?;
    Ok(tape.value(logits).to_vec())
}

fn argmax(row: &[f32]) -> usize {
    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
}

/// Top-`k` language-head predictions for every patch of `image`.
pub fn probe_patches(params: &ModelParams, image: &Image, k: usize, scene_id: Option<u64>) -> Result<ProbeMap> {
    let v = params.config().vocab_size;
    if k == 0 {
        return Err(contract("probe needs k >= 1"));
    }
    let k = if k > v {
        log::warn!("k = {k} exceeds the vocabulary of {v}; using {v}");
        v
    } else {
        k
    };
    let logits = patch_logits(params, &[image])?;
    let patches = logits
        .chunks_exact(v)
        .enumerate()
        .map(|(patch, row)| {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = row.iter().map(|&x| ((x - max) as f64).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut order: Vec<usize> = (0..v).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            PatchProbe {
                patch,
                top: order[..k].iter().map(|&t| (t, (exps[t] / z) as f32)).collect(),
            }
        })
        .collect();
    Ok(ProbeMap {
        scene_id,
        patch_grid: params.config().patch_grid(),
        patches,
    })
}

/// Ground-truth token per patch: the object's name for occupied cells and
/// [`BACKGROUND_TOKEN`] elsewhere. Requires the patch grid to match the
/// scene grid.
pub fn patch_labels(params: &ModelParams, scene: &Scene) -> Result<Vec<usize>> {
    let g = params.config().patch_grid();
    if scene.grid_n != g {
        return Err(contract(format!(
            "scene grid {0}x{0} does not match the {1}x{1} patch grid",
            scene.grid_n, g
        )));
    }
    let vocab = Vocab::standard();
    let bg = vocab.id(BACKGROUND_TOKEN).expect("background token in vocabulary");
    let mut labels = vec![bg; g * g];
    for p in &scene.placements {
        labels[p.row * g + p.col] = vocab.id(&p.object.name()).expect("object names are tokens");
    }
    Ok(labels)
}

/// Share of patches whose top-1 probe token equals their label.
pub fn patch_label_accuracy(params: &ModelParams, scenes: &[Scene]) -> Result<f64> {
    Ok(patch_label_scores(params, scenes)?.all)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchScores {
    pub all: f64,
    pub occupied: f64,
    pub background: f64,
}

/// Probe accuracy over all patches, occupied patches, and background patches.
pub fn patch_label_scores(params: &ModelParams, scenes: &[Scene]) -> Result<PatchScores> {
    if scenes.is_empty() {
        return Err(contract("no scenes to score"));
    }
    let v = params.config().vocab_size;
    let size = params.config().image_size;
    let bg = Vocab::standard().id(BACKGROUND_TOKEN).expect("background token");
    let (mut hit, mut n) = ([0usize; 2], [0usize; 2]);
    for chunk in scenes.chunks(32) {
        let labels: Vec<Vec<usize>> = chunk.iter().map(|s| patch_labels(params, s)).collect::<Result<_>>()?;
        let images: Vec<Image> = chunk.iter().map(|s| render(s, size)).collect::<Result<_>>()?;
        let refs: Vec<&Image> = images.iter().collect();
        let logits = patch_logits(params, &refs)?;
        for (row, &label) in logits.chunks_exact(v).zip(labels.iter().flatten()) {
            let occupied = usize::from(label != bg);
            n[occupied] += 1;
            hit[occupied] += usize::from(argmax(row) == label);
        }
    }
    let rate = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(PatchScores {
        all: rate(hit[0] + hit[1], n[0] + n[1]),
        occupied: rate(hit[1], n[1]),
        background: rate(hit[0], n[0]),
    })
}

const CELL_SCALE: usize = 8;
const INK: Rgb = [255, 255, 255];
const SHADOW: Rgb = [0, 0, 0];

fn draw_text(img: &mut Image, top: usize, left: usize, text: &str) {
    for (ci, ch) in text.chars().enumerate() {
        let rows = font::glyph(ch);
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..font::WIDTH {
                if bits & (1 << (font::WIDTH - 1 - dx)) == 0 {
                    continue;
                }
                let (y, x) = (top + dy, left + ci * (font::WIDTH + 1) + dx);
                if y + 1 < img.size() && x + 1 < img.size() {
                    img.set(y + 1, x + 1, SHADOW);
                    img.set(y, x, INK);
                }
            }
        }
    }
}

/// Upscaled copy of `image` with each patch's top-1 token written over it.
/// Hyphenated tokens break onto two lines.
pub fn overlay(image: &Image, map: &ProbeMap) -> Result<Image> {
    let g = map.patch_grid;
    if g == 0 || image.size() % g != 0 || map.patches.len() != g * g {
        return Err(contract("probe map does not fit the image"));
    }
    let size = image.size() * CELL_SCALE;
    let mut raw = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            raw.extend_from_slice(&image.pixel(y / CELL_SCALE, x / CELL_SCALE));
        }
    }
    let mut out = Image::from_raw(size, raw)?;
    let cell = size / g;
    let vocab = Vocab::standard();
    for p in &map.patches {
        let (row, col) = (p.patch / g, p.patch % g);
        let token = p.top.first().and_then(|&(t, _)| vocab.token(t)).unwrap_or("?");
        for (line, part) in token.split('-').enumerate() {
            let text: String = part.chars().take((cell - 2) / (font::WIDTH + 1)).collect();
            draw_text(&mut out, row * cell + 2 + line * (font::HEIGHT + 2), col * cell + 2, &text);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLossRow {
    pub sample: usize,
    pub token: String,
    pub losses: Vec<f32>,
    /// Index of the lowest loss; ties go to the earliest variant.
    pub best: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLossReport {
    pub variants: Vec<String>,
    pub rows: Vec<TokenLossRow>,
}

/// Cross-entropy of every answer token under each variant.
pub fn token_loss_report(variants: &[(&str, &ModelParams)], samples: &[MultimodalSample]) -> Result<TokenLossReport> {
    if variants.len() < 2 {
        return Err(contract("token loss report needs at least two variants"));
    }
    let vocab = Vocab::standard();
    for (name, p) in variants {
        if p.config().vocab_size != vocab.len() {
            return Err(contract(format!(
                "variant {name} has a vocabulary of {} tokens, expected {}",
                p.config().vocab_size,
                vocab.len()
            )));
        }
    }
    let per_variant: Vec<Vec<Vec<f32>>> = variants
        .iter()
        .map(|(_, p)| answer_token_losses(p, samples))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        let targets: Vec<usize> = s.target.iter().zip(&s.loss_mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
        for (j, &t) in targets.iter().enumerate() {
            let losses: Vec<f32> = per_variant.iter().map(|v| v[si][j]).collect();
            let best = (0..losses.len()).fold(0, |b, i| if losses[i] < losses[b] { i } else { b });
            rows.push(TokenLossRow {
                sample: si,
                token: vocab.token(t).unwrap_or("?").to_string(),
                losses,
                best,
            });
        }
    }
    Ok(TokenLossReport {
        variants: variants.iter().map(|(n, _)| n.to_string()).collect(),
        rows,
    })
}

impl TokenLossReport {
    /// Markdown table with the lowest loss of each row in bold.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| sample | token | {} |", self.variants.join(" | "));
        let _ = writeln!(s, "|---|---|{}", "---|".repeat(self.variants.len()));
        for r in &self.rows {
            let cells: Vec<String> = r
                .losses
                .iter()
                .enumerate()
                .map(|(i, l)| if i == r.best { format!("**{l:.4}**") } else { format!("{l:.4}") })
                .collect();
            let _ = writeln!(s, "| {} | {} | {} |", r.sample, r.token, cells.join(" | "));
        }
        s
    }
}

#[cfg(test)]
mod tests;
