//! Forward constructors for every recorded operation.

use std::sync::Arc;

use crate::error::{contract, Result};

use super::attention::{self, AttentionLayout};
use super::kernels::{gelu, gemm, softmax_prefix, MatRef};
use super::tape::{shape_err, Node, Op, Tape, Var};

pub const LAYER_NORM_EPS: f32 = 1e-5;

impl Tape {
    fn record(&mut self, shape: Vec<usize>, value: Vec<f32>, inputs: &[Var], op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = self.any_grad(inputs);
        self.push_node(Node {
            shape,
            value: Arc::new(value),
            requires_grad,
            op,
        })
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(contract(format!("{op}: expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (br, bc) = self.matrix("matmul", b)?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0f32; m * n];
        let bm = if trans_b {
            MatRef::new(self.value(b), n, k).t()
        } else {
            MatRef::new(self.value(b), k, n)
        };
        gemm(MatRef::new(self.value(a), m, k), bm, 0.0, &mut out);
        Ok(self.record(vec![m, n], out, &[a, b], Op::MatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.record(self.shape(a).to_vec(), out, &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.record(self.shape(a).to_vec(), out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.record(self.shape(a).to_vec(), out, &[a], Op::Scale { a, factor })
    }

    /// Adds a length-`c` bias to every row of an `r × c` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.matrix("add_bias", a)?;
        if self.shape(bias) != [c] {
            return Err(shape_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(self.record(self.shape(a).to_vec(), out, &[a, bias], Op::AddBias { a, bias }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.record(self.shape(a).to_vec(), out, &[a], Op::Gelu { a })
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let c = *self.shape(a).last().unwrap_or(&1);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_prefix(row, c);
        }
        self.record(self.shape(a).to_vec(), out, &[a], Op::Softmax { a })
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).len() / d;
        let mut xhat = vec![0.0f32; rows * d];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; rows * d];
        let (gv, bv) = (self.value(gain), self.value(bias));
        for (r, row) in self.value(x).chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.record(
            self.shape(x).to_vec(),
            out,
            &[x, gain, bias],
            Op::LayerNorm { x, gain, bias, xhat, rstd },
        ))
    }

    /// Gathers rows of a `vocab × d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix("embedding", table)?;
        if ids.is_empty() {
            return Err(contract("embedding: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(contract(format!("embedding: token id {bad} outside vocabulary of {vocab}")));
        }
        let t = self.value(table);
        let out = ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        Ok(self.record(vec![ids.len(), d], out, &[table], Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat_rows: nothing to concatenate"))?;
        let (_, c) = self.matrix("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.matrix("concat_rows", p)?;
            if pc != c {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.record(vec![rows, c], out, parts, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Selects rows by position; positions may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix("gather_rows", a)?;
        if rows.is_empty() {
            return Err(contract("gather_rows: empty position set"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(contract(format!("gather_rows: row {bad} outside {r} rows")));
        }
        let src = self.value(a);
        let out = rows.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        Ok(self.record(vec![rows.len(), c], out, &[a], Op::GatherRows { a, rows: rows.to_vec() }))
    }

    /// Contiguous row range; shorthand for [`Tape::gather_rows`].
    pub fn slice_rows(&mut self, a: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let rows: Vec<usize> = range.collect();
        self.gather_rows(a, &rows)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix("transpose", a)?;
        let src = self.value(a);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.record(vec![c, r], out, &[a], Op::Transpose { a }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.record(Vec::new(), vec![s], &[a], Op::Sum { a })
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` holds.
    /// An all-false mask yields 0 with no gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.matrix("cross_entropy", logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len(), mask.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(contract(format!("cross_entropy: target {bad} outside vocabulary of {v}")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f32;
        let mut kept = 0;
        for (r, row) in probs.chunks_exact_mut(v).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f32>().ln();
            if mask[r] {
                total += lse - row[targets[r]];
                kept += 1;
            }
            softmax_prefix(row, v);
        }
        let value = if kept > 0 { total / kept as f32 } else { 0.0 };
        Ok(self.record(
            Vec::new(),
            vec![value],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                kept,
            },
        ))
    }

    /// Mean squared difference over the `mask`-true rows and all columns.
    pub fn mse_masked(&mut self, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
        let (t, d) = self.matrix("mse_masked", pred)?;
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err("mse_masked", self.shape(pred), self.shape(target)));
        }
        if mask.len() != t {
            return Err(shape_err("mse_masked", self.shape(pred), &[mask.len()]));
        }
        let (p, q) = (self.value(pred), self.value(target));
        let mut total = 0.0f32;
        let mut kept = 0;
        for r in (0..t).filter(|&r| mask[r]) {
            kept += 1;
            for j in r * d..(r + 1) * d {
                let e = p[j] - q[j];
                total += e * e;
            }
        }
        let value = if kept > 0 { total / (kept * d) as f32 } else { 0.0 };
        Ok(self.record(
            Vec::new(),
            vec![value],
            &[pred, target],
            Op::MseMasked {
                pred,
                target,
                mask: mask.to_vec(),
                kept,
            },
        ))
    }

    /// Multi-head scaled dot-product attention under `layout`'s mask.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttentionLayout>,
    ) -> Result<Var> {
        let (n, d) = self.matrix("attention", q)?;
        for other in [k, v] {
            if self.shape(other) != [n, d] {
                return Err(shape_err("attention", self.shape(q), self.shape(other)));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(contract(format!("attention: width {d} not divisible by {heads} heads")));
        }
        if layout.rows() != n {
            return Err(contract(format!(
                "attention: layout covers {} rows, input has {n}",
                layout.rows()
            )));
        }
        let (out, probs) = attention::forward(self.value(q), self.value(k), self.value(v), d, heads, &layout);
        Ok(self.record(
            vec![n, d],
            out,
            &[q, k, v],
            Op::Attention { q, k, v, heads, layout, probs },
        ))
    }
}
