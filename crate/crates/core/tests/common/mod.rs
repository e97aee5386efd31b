//! Double-precision reference implementations used as oracles: naive
//! matrix ops, a from-scratch forward pass of the model, and central finite
//! differences.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::ops::Range;

use plab::model::ModelParams;

#[derive(Clone, Debug, PartialEq)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn new(r: usize, c: usize, d: Vec<f64>) -> M {
        assert_eq!(d.len(), r * c);
        M { r, c, d }
    }

    pub fn zeros(r: usize, c: usize) -> M {
        M::new(r, c, vec![0.0; r * c])
    }

    pub fn from_f32(r: usize, c: usize, d: &[f32]) -> M {
        M::new(r, c, d.iter().map(|&x| x as f64).collect())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.c..(i + 1) * self.c]
    }
}

pub fn matmul(a: &M, b: &M) -> M {
    assert_eq!(a.c, b.r);
    let mut out = M::zeros(a.r, b.c);
    for i in 0..a.r {
        for j in 0..b.c {
            out.d[i * b.c + j] = (0..a.c).map(|k| a.at(i, k) * b.at(k, j)).sum();
        }
    }
    out
}

pub fn transpose(a: &M) -> M {
    let mut out = M::zeros(a.c, a.r);
    for i in 0..a.r {
        for j in 0..a.c {
            out.d[j * a.r + i] = a.at(i, j);
        }
    }
    out
}

pub fn matmul_t(a: &M, b: &M) -> M {
    matmul(a, &transpose(b))
}

pub fn zip(a: &M, b: &M, f: impl Fn(f64, f64) -> f64) -> M {
    assert_eq!((a.r, a.c), (b.r, b.c));
    M::new(a.r, a.c, a.d.iter().zip(&b.d).map(|(&x, &y)| f(x, y)).collect())
}

pub fn map(a: &M, f: impl Fn(f64) -> f64) -> M {
    M::new(a.r, a.c, a.d.iter().map(|&x| f(x)).collect())
}

pub fn add(a: &M, b: &M) -> M {
    zip(a, b, |x, y| x + y)
}

pub fn mul(a: &M, b: &M) -> M {
    zip(a, b, |x, y| x * y)
}

pub fn add_bias(a: &M, bias: &[f64]) -> M {
    assert_eq!(bias.len(), a.c);
    let mut out = a.clone();
    for i in 0..a.r {
        for j in 0..a.c {
            out.d[i * a.c + j] += bias[j];
        }
    }
    out
}

pub fn gelu(a: &M) -> M {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    map(a, |x| 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh()))
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn softmax_rows(a: &M) -> M {
    M::new(a.r, a.c, (0..a.r).flat_map(|i| softmax(a.row(i))).collect())
}

pub fn layer_norm(x: &M, g: &[f64], b: &[f64], eps: f64) -> M {
    let mut out = M::zeros(x.r, x.c);
    for i in 0..x.r {
        let row = x.row(i);
        let n = x.c as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for j in 0..x.c {
            out.d[i * x.c + j] = (row[j] - mean) / (var + eps).sqrt() * g[j] + b[j];
        }
    }
    out
}

pub fn gather_rows(a: &M, rows: &[usize]) -> M {
    M::new(rows.len(), a.c, rows.iter().flat_map(|&r| a.row(r).to_vec()).collect())
}

pub fn slice_rows(a: &M, r: Range<usize>) -> M {
    gather_rows(a, &r.collect::<Vec<_>>())
}

pub fn concat_rows(parts: &[&M]) -> M {
    let c = parts[0].c;
    M::new(parts.iter().map(|p| p.r).sum(), c, parts.iter().flat_map(|p| p.d.clone()).collect())
}

pub fn sum(a: &M) -> f64 {
    a.d.iter().sum()
}

pub fn cross_entropy(logits: &M, targets: &[usize], mask: &[bool]) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for i in (0..logits.r).filter(|&i| mask[i]) {
        total -= softmax(logits.row(i))[targets[i]].ln();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

pub fn mse_masked(p: &M, t: &M, mask: &[bool]) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for i in (0..p.r).filter(|&i| mask[i]) {
        for j in 0..p.c {
            total += (p.at(i, j) - t.at(i, j)).powi(2);
        }
        n += p.c;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Row-level visibility for a stacked batch: image rows see their own
/// image; text row `j` of a sample sees that sample's image and text rows
/// `0..=j`.
pub fn allowed(spans: &[(Range<usize>, Range<usize>)], n: usize) -> Vec<Vec<bool>> {
    let mut ok = vec![vec![false; n]; n];
    for (img, txt) in spans {
        for q in img.clone() {
            for k in img.clone() {
                ok[q][k] = true;
            }
        }
        for q in txt.clone() {
            for k in img.clone() {
                ok[q][k] = true;
            }
            for k in txt.start..=q {
                ok[q][k] = true;
            }
        }
    }
    ok
}

pub fn attention(q: &M, k: &M, v: &M, heads: usize, spans: &[(Range<usize>, Range<usize>)]) -> M {
    let (n, d) = (q.r, q.c);
    let dh = d / heads;
    let ok = allowed(spans, n);
    let mut out = M::zeros(n, d);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let keys: Vec<usize> = (0..n).filter(|&j| ok[i][j]).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| cols.clone().map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for (w, &j) in p.iter().zip(&keys) {
                for c in cols.clone() {
                    out.d[i * d + c] += w * v.at(j, c);
                }
            }
        }
    }
    out
}

/// Central differences of `f` at `x` for the coordinates in `which`.
pub fn fd_grad(x: &[f64], which: &[usize], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    which
        .iter()
        .map(|&i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// One training example as the reference model sees it.
#[derive(Clone, Debug)]
pub struct RefSample {
    pub patches: Vec<f64>,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub mask: Vec<bool>,
}

/// The model rebuilt from parameter names in double precision.
#[derive(Clone, Debug)]
pub struct RefModel {
    pub p: BTreeMap<String, M>,
    pub heads: usize,
    pub vision_heads: usize,
    pub layers: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub eps: f64,
}

impl RefModel {
    pub fn new(params: &ModelParams) -> RefModel {
        let p = params
            .params()
            .iter()
            .map(|q| {
                let s = q.tensor.shape();
                let (r, c) = if s.len() == 2 { (s[0], s[1]) } else { (1, s[0]) };
                (q.name.clone(), M::from_f32(r, c, q.tensor.data()))
            })
            .collect();
        let c = params.config();
        RefModel {
            p,
            heads: c.n_heads,
            vision_heads: c.vision_heads,
            layers: c.n_layers,
            n_patches: c.n_patches(),
            patch_dim: c.patch_dim(),
            eps: plab::autodiff::LAYER_NORM_EPS as f64,
        }
    }

    fn get(&self, name: &str) -> &M {
        self.p.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    fn lin(&self, name: &str, x: &M) -> M {
        let y = matmul(x, self.get(&format!("{name}.w")));
        match self.p.get(&format!("{name}.b")) {
            Some(b) => add_bias(&y, &b.d),
            None => y,
        }
    }

    fn ln(&self, name: &str, x: &M) -> M {
        layer_norm(x, &self.get(&format!("{name}.g")).d, &self.get(&format!("{name}.b")).d, self.eps)
    }

    fn ffn(&self, pre: &str, x: &M) -> M {
        let h = self.ln(&format!("{pre}.ln2"), x);
        let h = gelu(&self.lin(&format!("{pre}.ff1"), &h));
        add(x, &self.lin(&format!("{pre}.ff2"), &h))
    }

    /// One layer over an image part and a text part.
    fn layer(
        &self,
        pre: (&str, &str),
        xi: Option<&M>,
        xt: Option<&M>,
        heads: usize,
        spans: &[(Range<usize>, Range<usize>)],
    ) -> (Option<M>, Option<M>) {
        let proj = |w: &str| {
            let parts: Vec<M> = [(pre.0, xi), (pre.1, xt)]
                .iter()
                .filter_map(|(p, x)| x.map(|x| self.lin(&format!("{p}.attn.{w}"), &self.ln(&format!("{p}.ln1"), x))))
                .collect();
            concat_rows(&parts.iter().collect::<Vec<_>>())
        };
        let a = attention(&proj("q"), &proj("k"), &proj("v"), heads, spans);
        let ni = xi.map_or(0, |x| x.r);
        let yi = xi.map(|x| {
            let x = add(x, &self.lin(&format!("{}.attn.o", pre.0), &slice_rows(&a, 0..ni)));
            self.ffn(pre.0, &x)
        });
        let yt = xt.map(|x| {
            let x = add(x, &self.lin(&format!("{}.attn.o", pre.1), &slice_rows(&a, ni..a.r)));
            self.ffn(pre.1, &x)
        });
        (yi, yt)
    }

    fn disentangled(&self) -> bool {
        self.p.contains_key("backbone.ln_f.image.g")
    }

    /// Visual and text features for a batch; `None` parts are absent.
    pub fn forward(&self, patches: Option<&[f64]>, texts: &[Vec<usize>]) -> (Option<M>, Option<M>) {
        let n = texts.len();
        let np = self.n_patches;
        let xi = patches.map(|p| {
            let x = M::new(n * np, self.patch_dim, p.to_vec());
            let h = self.lin("vision.patch", &x);
            let spans: Vec<_> = (0..n).map(|i| (i * np..(i + 1) * np, 0..0)).collect();
            let (h, _) = self.layer(("vision.block", "vision.block"), Some(&h), None, self.vision_heads, &spans);
            let g = self.ln("vision.ln_out", &h.unwrap());
            let m = self.lin("connector.fc2", &gelu(&self.lin("connector.fc1", &g)));
            let pos: Vec<usize> = (0..n).flat_map(|_| 0..np).collect();
            add(&m, &gather_rows(self.get("backbone.img_pos"), &pos))
        });
        let ni = if xi.is_some() { n * np } else { 0 };
        let ids: Vec<usize> = texts.iter().flatten().copied().collect();
        let pos: Vec<usize> = texts.iter().flat_map(|t| 0..t.len()).collect();
        let xt = (!ids.is_empty()).then(|| {
            add(
                &gather_rows(self.get("backbone.tok_emb"), &ids),
                &gather_rows(self.get("backbone.txt_pos"), &pos),
            )
        });
        let mut spans = Vec::new();
        let mut off = ni;
        for (i, t) in texts.iter().enumerate() {
            let img = if ni > 0 { i * np..(i + 1) * np } else { 0..0 };
            spans.push((img, off..off + t.len()));
            off += t.len();
        }
        let (mut xi, mut xt) = (xi, xt);
        let d = self.disentangled();
        for l in 0..self.layers {
            let (pi, pt) = if d {
                (format!("backbone.layer{l}.image"), format!("backbone.layer{l}.text"))
            } else {
                (format!("backbone.layer{l}"), format!("backbone.layer{l}"))
            };
            (xi, xt) = self.layer((&pi, &pt), xi.as_ref(), xt.as_ref(), self.heads, &spans);
        }
        let (fi, ft) = if d {
            ("backbone.ln_f.image", "backbone.ln_f.text")
        } else {
            ("backbone.ln_f", "backbone.ln_f")
        };
        (xi.map(|x| self.ln(fi, &x)), xt.map(|x| self.ln(ft, &x)))
    }

    pub fn aux_targets(&self, patches: &[f64]) -> M {
        let x = M::new(patches.len() / self.patch_dim, self.patch_dim, patches.to_vec());
        matmul(&matmul(&x, self.get("aux.proj")), self.get("aux.mix"))
    }

    /// `(ntp, visual)` losses of a batch.
    pub fn losses(&self, batch: &[RefSample]) -> (f64, f64) {
        let patches: Vec<f64> = batch.iter().flat_map(|s| s.patches.clone()).collect();
        let texts: Vec<Vec<usize>> = batch.iter().map(|s| s.input.clone()).collect();
        let (v, t) = self.forward(Some(&patches), &texts);
        let (v, t) = (v.unwrap(), t.unwrap());
        let logits = matmul_t(&t, self.get("backbone.tok_emb"));
        let targets: Vec<usize> = batch.iter().flat_map(|s| s.target.clone()).collect();
        let mask: Vec<bool> = batch.iter().flat_map(|s| s.mask.clone()).collect();
        let ntp = cross_entropy(&logits, &targets, &mask);
        let pred = matmul(&v, self.get("visual_head.w"));
        let visual = mse_masked(&pred, &self.aux_targets(&patches), &vec![true; pred.r]);
        (ntp, visual)
    }

    pub fn total(&self, batch: &[RefSample], beta: f64) -> f64 {
        let (n, v) = self.losses(batch);
        n + beta * v
    }
}
