use std::ops::Range;
use std::sync::Arc;

use super::params::{Block, Bound, Lin, ModelParams, Norm};
use crate::autodiff::{AttentionLayout, AttentionSpan, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{contract, Result};
use crate::scene::Image;

/// Backbone outputs for a stacked batch.
pub struct Features {
    /// `n_images·n_patches × d_model`, sample-major; absent for text-only input.
    pub v_feat: Option<Var>,
    /// All text rows stacked; absent when every text is empty.
    pub t_feat: Option<Var>,
    /// Rows of `t_feat` belonging to each sample.
    pub text_rows: Vec<Range<usize>>,
    pub n_images: usize,
}

/// Splits an image into flattened patches, row-major over the patch grid.
/// Pixels are scaled to [-0.5, 0.5].
pub fn patchify(params: &ModelParams, image: &Image) -> Result<Vec<f32>> {
    let c = params.config();
    if image.size() != c.image_size {
        return Err(contract(format!(
            "image is {0}x{0}, model expects {1}x{1}",
            image.size(),
            c.image_size
        )));
    }
    let (p, g) = (c.patch_size, c.patch_grid());
    let mut out = Vec::with_capacity(c.n_patches() * c.patch_dim());
    for pr in 0..g {
        for pc in 0..g {
            for y in 0..p {
                for x in 0..p {
                    let px = image.pixel(pr * p + y, pc * p + x);
                    out.extend(px.iter().map(|&v| v as f32 / 255.0 - 0.5));
                }
            }
        }
    }
    Ok(out)
}

fn linear(tape: &mut Tape, b: &Bound, lin: Lin, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b[lin.w])?;
    match lin.b {
        Some(bias) => tape.add_bias(y, b[bias]),
        None => Ok(y),
    }
}

fn norm(tape: &mut Tape, b: &Bound, n: Norm, x: Var) -> Result<Var> {
    tape.layer_norm(x, b[n.g], b[n.b], LAYER_NORM_EPS)
}

fn feed_forward(tape: &mut Tape, b: &Bound, blk: &Block, x: Var) -> Result<Var> {
    let h = norm(tape, b, blk.ln2, x)?;
    let h = linear(tape, b, blk.ff1, h)?;
    let h = tape.gelu(h);
    let h = linear(tape, b, blk.ff2, h)?;
    tape.add(x, h)
}

fn concat(tape: &mut Tape, parts: &[Option<Var>]) -> Result<Var> {
    let present: Vec<Var> = parts.iter().flatten().copied().collect();
    if present.len() == 1 {
        Ok(present[0])
    } else {
        tape.concat_rows(&present)
    }
}

/// One pre-norm layer over an image part and a text part, each with its own
/// block weights, joined only inside attention.
fn layer(
    tape: &mut Tape,
    b: &Bound,
    blocks: (&Block, &Block),
    parts: (Option<Var>, Option<Var>),
    heads: usize,
    layout: &Arc<AttentionLayout>,
) -> Result<(Option<Var>, Option<Var>)> {
    let (bi, bt) = blocks;
    let (xi, xt) = parts;
    let proj = |w: fn(&Block) -> Lin, tape: &mut Tape| -> Result<Var> {
        let qi = match xi {
            Some(x) => {
                let h = norm(tape, b, bi.ln1, x)?;
                Some(linear(tape, b, w(bi), h)?)
            }
            None => None,
        };
        let qt = match xt {
            Some(x) => {
                let h = norm(tape, b, bt.ln1, x)?;
                Some(linear(tape, b, w(bt), h)?)
            }
            None => None,
        };
        concat(tape, &[qi, qt])
    };
    let q = proj(|k| k.q, tape)?;
    let k = proj(|k| k.k, tape)?;
    let v = proj(|k| k.v, tape)?;
    let a = tape.attention(q, k, v, heads, Arc::clone(layout))?;
    let ni = xi.map_or(0, |x| tape.shape(x)[0]);
    let total = tape.shape(a)[0];
    let finish = |x: Option<Var>, blk: &Block, rows: Range<usize>, tape: &mut Tape| -> Result<Option<Var>> {
        let Some(x) = x else { return Ok(None) };
        let part = if rows.len() == total { a } else { tape.slice_rows(a, rows)? };
        let o = linear(tape, b, blk.o, part)?;
        let x = tape.add(x, o)?;
        Ok(Some(feed_forward(tape, b, blk, x)?))
    };
    let yi = finish(xi, bi, 0..ni, tape)?;
    let yt = finish(xt, bt, ni..total, tape)?;
    Ok((yi, yt))
}

impl ModelParams {
    /// Vision encoder over `n` stacked images of flattened patches.
    pub fn vision(&self, tape: &mut Tape, b: &Bound, patches: &[f32], n: usize) -> Result<Var> {
        let c = self.config();
        let np = c.n_patches();
        if n == 0 || patches.len() != n * np * c.patch_dim() {
            return Err(contract(format!(
                "{} patch values do not form {n} images of {np}x{}",
                patches.len(),
                c.patch_dim()
            )));
        }
        let l = self.layout();
        let x = tape.constant(vec![n * np, c.patch_dim()], patches.to_vec())?;
        let h = linear(tape, b, l.patch, x)?;
        let spans = (0..n)
            .map(|i| AttentionSpan {
                image: i * np..(i + 1) * np,
                text: 0..0,
            })
            .collect();
        let layout = Arc::new(AttentionLayout::new(spans, n * np)?);
        let blk = l.vision_block;
        let (h, _) = layer(tape, b, (&blk, &blk), (Some(h), None), c.vision_heads, &layout)?;
        norm(tape, b, l.vision_ln, h.expect("image part present"))
    }

    /// Two-layer MLP from vision width to backbone width.
    pub fn connector(&self, tape: &mut Tape, b: &Bound, g: Var) -> Result<Var> {
        let l = self.layout();
        let h = linear(tape, b, l.conn1, g)?;
        let h = tape.gelu(h);
        linear(tape, b, l.conn2, h)
    }

    /// Runs G, M and the backbone over a stacked batch. `patches` holds one
    /// image per text when present; pass `None` for text-only input.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, patches: Option<&[f32]>, texts: &[&[usize]]) -> Result<Features> {
        let c = self.config();
        let l = self.layout();
        let np = c.n_patches();
        let n = texts.len();
        if n == 0 {
            return Err(contract("forward needs at least one sample"));
        }
        for t in texts {
            if t.len() > c.max_text_len {
                return Err(contract(format!("text of {} tokens exceeds max_text_len {}", t.len(), c.max_text_len)));
            }
        }
        let image_part = match patches {
            Some(p) => {
                let g = self.vision(tape, b, p, n)?;
                let m = self.connector(tape, b, g)?;
                let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..np).collect();
                let pos = tape.embedding(b[l.img_pos], &pos_ids)?;
                Some(tape.add(m, pos)?)
            }
            None => None,
        };
        let ni = if image_part.is_some() { n * np } else { 0 };

        let mut text_rows = Vec::with_capacity(n);
        let mut ids = Vec::new();
        let mut pos_ids = Vec::new();
        for t in texts {
            text_rows.push(ids.len()..ids.len() + t.len());
            ids.extend_from_slice(t);
            pos_ids.extend(0..t.len());
        }
        let text_part = if ids.is_empty() {
            None
        } else {
            let e = tape.embedding(b[l.tok_emb], &ids)?;
            let p = tape.embedding(b[l.txt_pos], &pos_ids)?;
            Some(tape.add(e, p)?)
        };
        if image_part.is_none() && text_part.is_none() {
            return Err(contract("forward input has neither image nor text rows"));
        }

        let spans = (0..n)
            .map(|i| AttentionSpan {
                image: if ni > 0 { i * np..(i + 1) * np } else { 0..0 },
                text: ni + text_rows[i].start..ni + text_rows[i].end,
            })
            .collect();
        let layout = Arc::new(AttentionLayout::new(spans, ni + ids.len())?);

        let (mut xi, mut xt) = (image_part, text_part);
        for (bi, bt) in l.image_blocks.iter().zip(&l.text_blocks) {
            (xi, xt) = layer(tape, b, (bi, bt), (xi, xt), c.n_heads, &layout)?;
        }
        let v_feat = xi.map(|x| norm(tape, b, l.image_ln_f, x)).transpose()?;
        let t_feat = xt.map(|x| norm(tape, b, l.text_ln_f, x)).transpose()?;
        Ok(Features {
            v_feat,
            t_feat,
            text_rows,
            n_images: if ni > 0 { n } else { 0 },
        })
    }

    /// Vocabulary logits; the output map is the transposed token embedding.
    pub fn lm_head(&self, tape: &mut Tape, b: &Bound, feat: Var) -> Result<Var> {
        tape.matmul_t(feat, b[self.layout().tok_emb])
    }

    /// Biasless projection of visual features into the auxiliary target space.
    pub fn visual_head(&self, tape: &mut Tape, b: &Bound, v_feat: Var) -> Result<Var> {
        tape.matmul(v_feat, b[self.layout().visual_head])
    }

    /// Frozen auxiliary targets for stacked patches: `patches · P · Q`.
    pub fn aux_targets(&self, patches: &[f32]) -> Result<Tensor> {
        let c = self.config();
        let pd = c.patch_dim();
        if patches.is_empty() || patches.len() % pd != 0 {
            return Err(contract(format!("{} values are not whole patches of {pd}", patches.len())));
        }
        let rows = patches.len() / pd;
        let mut tape = Tape::new();
        let x = tape.constant(vec![rows, pd], patches.to_vec())?;
        let p = tape.leaf_with(self.tensor(self.layout().aux_proj), false);
        let q = tape.leaf_with(self.tensor(self.layout().aux_mix), false);
        let h = tape.matmul(x, p)?;
        let out = tape.matmul(h, q)?;
        Ok(tape.tensor(out))
    }

    pub fn aux_encode(&self, image: &Image) -> Result<Tensor> {
        self.aux_targets(&patchify(self, image)?)
    }

    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        let patches = patchify(self, image)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, &[]);
        let g = self.vision(&mut tape, &b, &patches, 1)?;
        Ok(tape.tensor(g))
    }
}
