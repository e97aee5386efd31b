//! Fused multi-head attention over a stacked batch with a prefix-LM mask.
//!
//! Every sample contributes an image span and a text span of rows in the
//! stacked `N × d` matrices. Keys of a sample are ordered image rows first,
//! then text rows. Image queries see every image key of their sample and no
//! text key; text query `j` sees every image key plus text keys `0..=j`.
//! Each query therefore attends a prefix of its sample's key list, which is
//! what the kernels below exploit: masked keys are never read.

use std::ops::Range;

use crate::error::{contract, Result};

use super::kernels::{axpy, dot, softmax_prefix};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionSpan {
    pub image: Range<usize>,
    pub text: Range<usize>,
}

impl AttentionSpan {
    fn len(&self) -> usize {
        self.image.len() + self.text.len()
    }

    fn key_rows(&self) -> Vec<usize> {
        self.image.clone().chain(self.text.clone()).collect()
    }

    /// Number of keys visible to the `l`-th query of this span.
    fn visible(&self, l: usize) -> usize {
        let ni = self.image.len();
        if l < ni {
            ni
        } else {
            l + 1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    spans: Vec<AttentionSpan>,
    rows: usize,
}

impl AttentionLayout {
    pub fn new(spans: Vec<AttentionSpan>, rows: usize) -> Result<Self> {
        let mut seen = vec![false; rows];
        for s in &spans {
            if s.len() == 0 {
                return Err(contract("attention span with no rows"));
            }
            for r in s.image.clone().chain(s.text.clone()) {
                match seen.get_mut(r) {
                    Some(f) if !*f => *f = true,
                    Some(_) => return Err(contract(format!("row {r} in two attention spans"))),
                    None => return Err(contract(format!("row {r} outside {rows}-row input"))),
                }
            }
        }
        Ok(Self { spans, rows })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn spans(&self) -> &[AttentionSpan] {
        &self.spans
    }

    pub(crate) fn prob_len(&self, heads: usize) -> usize {
        self.spans.iter().map(|s| s.len() * s.len() * heads).sum()
    }

    /// Whether query row `q` may attend key row `k`.
    pub fn allows(&self, q: usize, k: usize) -> bool {
        for s in &self.spans {
            let keys = s.key_rows();
            if let Some(l) = keys.iter().position(|&r| r == q) {
                return keys.iter().position(|&r| r == k).is_some_and(|j| j < s.visible(l));
            }
        }
        false
    }
}

pub(crate) fn forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    d: usize,
    heads: usize,
    layout: &AttentionLayout,
) -> (Vec<f32>, Vec<f32>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; layout.rows * d];
    let mut probs = vec![0.0f32; layout.prob_len(heads)];
    let mut off = 0;
    for span in &layout.spans {
        let rows = span.key_rows();
        let len = rows.len();
        for h in 0..heads {
            let col = h * dh;
            for (l, &qr) in rows.iter().enumerate() {
                let vis = span.visible(l);
                let p = &mut probs[off + l * len..off + (l + 1) * len];
                let qv = &q[qr * d + col..qr * d + col + dh];
                for (j, &kr) in rows[..vis].iter().enumerate() {
                    p[j] = dot(qv, &k[kr * d + col..kr * d + col + dh]) * scale;
                }
                softmax_prefix(p, vis);
                let o = &mut out[qr * d + col..qr * d + col + dh];
                for (j, &kr) in rows[..vis].iter().enumerate() {
                    axpy(p[j], &v[kr * d + col..kr * d + col + dh], o);
                }
            }
            off += len * len;
        }
    }
    (out, probs)
}

pub(crate) struct Grads<'a> {
    pub q: Option<&'a mut [f32]>,
    pub k: Option<&'a mut [f32]>,
    pub v: Option<&'a mut [f32]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    d: usize,
    heads: usize,
    layout: &AttentionLayout,
    probs: &[f32],
    g: &[f32],
    mut grads: Grads<'_>,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dp = Vec::new();
    let mut off = 0;
    for span in &layout.spans {
        let rows = span.key_rows();
        let len = rows.len();
        dp.resize(len, 0.0);
        for h in 0..heads {
            let col = h * dh;
            for (l, &qr) in rows.iter().enumerate() {
                let vis = span.visible(l);
                let p = &probs[off + l * len..off + l * len + vis];
                let go = &g[qr * d + col..qr * d + col + dh];
                for (j, &kr) in rows[..vis].iter().enumerate() {
                    dp[j] = dot(go, &v[kr * d + col..kr * d + col + dh]);
                    if let Some(dv) = grads.v.as_deref_mut() {
                        axpy(p[j], go, &mut dv[kr * d + col..kr * d + col + dh]);
                    }
                }
                if grads.q.is_none() && grads.k.is_none() {
                    continue;
                }
                let inner: f32 = p.iter().zip(&dp[..vis]).map(|(a, b)| a * b).sum();
                let qv = &q[qr * d + col..qr * d + col + dh];
                for (j, &kr) in rows[..vis].iter().enumerate() {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    if let Some(dq) = grads.q.as_deref_mut() {
                        axpy(ds, &k[kr * d + col..kr * d + col + dh], &mut dq[qr * d + col..qr * d + col + dh]);
                    }
                    if let Some(dk) = grads.k.as_deref_mut() {
                        axpy(ds, qv, &mut dk[kr * d + col..kr * d + col + dh]);
                    }
                }
            }
            off += len * len;
        }
    }
}
