use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Pathways};
use crate::autodiff::{Tape, Tensor, Var};
use crate::autodiff::Fnv;
use crate::error::Result;
use crate::rng;

const INIT_STD: f32 = 0.02;
/// The auxiliary encoder is the same for every run.
const AUX_SEED: u64 = 0xa0c5_1e55;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Vision,
    Connector,
    Backbone,
    VisualHead,
    Aux,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Vision, Group::Connector, Group::Backbone, Group::VisualHead, Group::Aux];
}

#[derive(Clone, Copy, Debug)]
pub struct Lin {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub ln1: Norm,
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
    pub ln2: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
}

/// Indices of every parameter tensor, by role.
#[derive(Clone, Debug)]
pub struct Layout {
    pub patch: Lin,
    pub vision_block: Block,
    pub vision_ln: Norm,
    pub conn1: Lin,
    pub conn2: Lin,
    pub tok_emb: usize,
    pub img_pos: usize,
    pub txt_pos: usize,
    pub image_blocks: Vec<Block>,
    pub text_blocks: Vec<Block>,
    pub image_ln_f: Norm,
    pub text_ln_f: Norm,
    pub visual_head: usize,
    pub aux_proj: usize,
    pub aux_mix: usize,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

/// Tape handles for every parameter, indexed like [`ModelParams::params`].
pub struct Bound(Vec<Var>);

impl std::ops::Index<usize> for Bound {
    type Output = Var;
    fn index(&self, i: usize) -> &Var {
        &self.0[i]
    }
}

struct Builder {
    params: Vec<Param>,
    rng: rng::Rng,
    normal: Normal<f32>,
}

impl Builder {
    fn push(&mut self, name: String, group: Group, tensor: Tensor) -> usize {
        self.params.push(Param { name, group, tensor });
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, group: Group, shape: Vec<usize>) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        let t = Tensor::new(shape, data).expect("nonzero shape");
        self.push(name, group, t)
    }

    fn lin(&mut self, name: &str, group: Group, d_in: usize, d_out: usize, bias: bool) -> Lin {
        let w = self.normal(format!("{name}.w"), group, vec![d_in, d_out]);
        let b = bias.then(|| self.push(format!("{name}.b"), group, Tensor::zeros(vec![d_out])));
        Lin { w, b }
    }

    fn norm(&mut self, name: &str, group: Group, d: usize) -> Norm {
        Norm {
            g: self.push(format!("{name}.g"), group, Tensor::filled(vec![d], 1.0)),
            b: self.push(format!("{name}.b"), group, Tensor::zeros(vec![d])),
        }
    }

    fn copy(&mut self, i: usize, from: &str, to: &str) -> usize {
        let p = &self.params[i];
        let (name, group, tensor) = (p.name.replace(from, to), p.group, p.tensor.clone());
        self.push(name, group, tensor)
    }

    fn copy_lin(&mut self, l: &Lin, from: &str, to: &str) -> Lin {
        Lin {
            w: self.copy(l.w, from, to),
            b: l.b.map(|b| self.copy(b, from, to)),
        }
    }

    fn copy_norm(&mut self, n: &Norm, from: &str, to: &str) -> Norm {
        Norm {
            g: self.copy(n.g, from, to),
            b: self.copy(n.b, from, to),
        }
    }

    /// Duplicate of an existing block under a renamed prefix.
    fn copy_block(&mut self, blk: &Block, from: &str, to: &str) -> Block {
        Block {
            ln1: self.copy_norm(&blk.ln1, from, to),
            q: self.copy_lin(&blk.q, from, to),
            k: self.copy_lin(&blk.k, from, to),
            v: self.copy_lin(&blk.v, from, to),
            o: self.copy_lin(&blk.o, from, to),
            ln2: self.copy_norm(&blk.ln2, from, to),
            ff1: self.copy_lin(&blk.ff1, from, to),
            ff2: self.copy_lin(&blk.ff2, from, to),
        }
    }

    fn block(&mut self, name: &str, group: Group, d: usize, ff: usize) -> Block {
        Block {
            ln1: self.norm(&format!("{name}.ln1"), group, d),
            q: self.lin(&format!("{name}.attn.q"), group, d, d, true),
            k: self.lin(&format!("{name}.attn.k"), group, d, d, true),
            v: self.lin(&format!("{name}.attn.v"), group, d, d, true),
            o: self.lin(&format!("{name}.attn.o"), group, d, d, true),
            ln2: self.norm(&format!("{name}.ln2"), group, d),
            ff1: self.lin(&format!("{name}.ff1"), group, d, ff, true),
            ff2: self.lin(&format!("{name}.ff2"), group, ff, d, true),
        }
    }
}

/// Orthonormalizes the columns of a `rows × cols` matrix (f64 Gram-Schmidt,
/// applied twice for stability).
fn orthonormal_columns(rows: usize, cols: usize, r: &mut rng::Rng) -> Vec<f32> {
    let normal = Normal::new(0.0f64, 1.0).expect("valid normal");
    let mut m: Vec<Vec<f64>> = (0..cols).map(|_| (0..rows).map(|_| normal.sample(r)).collect()).collect();
    for j in 0..cols {
        for _ in 0..2 {
            for i in 0..j {
                let d: f64 = (0..rows).map(|k| m[j][k] * m[i][k]).sum();
                for k in 0..rows {
                    m[j][k] -= d * m[i][k];
                }
            }
        }
        let n = m[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        m[j].iter_mut().for_each(|x| *x /= n);
    }
    let mut out = vec![0.0f32; rows * cols];
    for (j, col) in m.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            out[i * cols + j] = x as f32;
        }
    }
    out
}

impl ModelParams {
    /// Seeded initialization. With disentangled pathways both weight sets
    /// start as copies of the weights the shared model would receive.
    pub fn init(config: &ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let c = config;
        let mut b = Builder {
            params: Vec::new(),
            rng: rng::rng(c.init_seed, &[0x1417]),
            normal: Normal::new(0.0, INIT_STD).expect("valid normal"),
        };
        let patch = b.lin("vision.patch", Group::Vision, c.patch_dim(), c.d_vision, true);
        let vision_block = b.block("vision.block", Group::Vision, c.d_vision, c.vision_ff);
        let vision_ln = b.norm("vision.ln_out", Group::Vision, c.d_vision);
        let conn1 = b.lin("connector.fc1", Group::Connector, c.d_vision, c.d_model, true);
        let conn2 = b.lin("connector.fc2", Group::Connector, c.d_model, c.d_model, true);
        let tok_emb = b.normal("backbone.tok_emb".into(), Group::Backbone, vec![c.vocab_size, c.d_model]);
        let img_pos = b.normal("backbone.img_pos".into(), Group::Backbone, vec![c.n_patches(), c.d_model]);
        let txt_pos = b.normal("backbone.txt_pos".into(), Group::Backbone, vec![c.max_text_len, c.d_model]);
        let mut image_blocks = Vec::with_capacity(c.n_layers);
        let mut text_blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            match c.pathways {
                Pathways::Shared => {
                    let blk = b.block(&format!("backbone.layer{l}"), Group::Backbone, c.d_model, c.d_ff);
                    image_blocks.push(blk);
                    text_blocks.push(blk);
                }
                Pathways::Disentangled => {
                    let img = b.block(&format!("backbone.layer{l}.image"), Group::Backbone, c.d_model, c.d_ff);
                    image_blocks.push(img);
                    text_blocks.push(b.copy_block(&img, "image", "text"));
                }
            }
        }
        let (image_ln_f, text_ln_f) = match c.pathways {
            Pathways::Shared => {
                let n = b.norm("backbone.ln_f", Group::Backbone, c.d_model);
                (n, n)
            }
            Pathways::Disentangled => {
                let n = b.norm("backbone.ln_f.image", Group::Backbone, c.d_model);
                (n, b.copy_norm(&n, "image", "text"))
            }
        };
        let visual_head = b.normal("visual_head.w".into(), Group::VisualHead, vec![c.d_model, c.d_aux]);

        let mut ar = rng::rng(AUX_SEED, &[c.patch_dim() as u64, c.d_aux as u64]);
        // burn one draw so the mixing stream differs from the projection stream
        let _: u64 = ar.random();
        let proj = orthonormal_columns(c.patch_dim(), c.d_aux, &mut ar);
        let mix = orthonormal_columns(c.d_aux, c.d_aux, &mut ar);
        let aux_proj = b.push(
            "aux.proj".into(),
            Group::Aux,
            Tensor::new(vec![c.patch_dim(), c.d_aux], proj)?,
        );
        let aux_mix = b.push("aux.mix".into(), Group::Aux, Tensor::new(vec![c.d_aux, c.d_aux], mix)?);

        Ok(ModelParams {
            config: config.clone(),
            params: b.params,
            layout: Layout {
                patch,
                vision_block,
                vision_ln,
                conn1,
                conn2,
                tok_emb,
                img_pos,
                txt_pos,
                image_blocks,
                text_blocks,
                image_ln_f,
                text_ln_f,
                visual_head,
                aux_proj,
                aux_mix,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.params[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].tensor
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// FNV digest over names and value bits of one group.
    pub fn group_checksum(&self, group: Group) -> u64 {
        let mut h = Fnv::default();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.write(p.name.as_bytes());
            h.write(&p.tensor.checksum().to_le_bytes());
        }
        h.0
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for g in Group::ALL {
            h.write(&self.group_checksum(g).to_le_bytes());
        }
        h.0
    }

    /// Records every parameter on `tape`; members of `trainable` get gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &[Group]) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf_with(&p.tensor, p.group != Group::Aux && trainable.contains(&p.group)))
                .collect(),
        )
    }

    /// Parameters that belong to the text pathway only (empty when shared).
    pub fn text_only(&self) -> Vec<usize> {
        self.pathway_only("text")
    }

    /// Parameters that belong to the image pathway only (empty when shared).
    pub fn image_only(&self) -> Vec<usize> {
        self.pathway_only("image")
    }

    fn pathway_only(&self, tag: &str) -> Vec<usize> {
        let inner = format!(".{tag}.");
        let suffix = format!(".{tag}");
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.group == Group::Backbone && (p.name.contains(&inner) || p.name.ends_with(&suffix)))
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aux_matrices_are_orthonormal() {
        let p = ModelParams::init(&ModelConfig::default()).unwrap();
        let c = p.config().clone();
        for (idx, rows, cols) in [
            (p.layout().aux_proj, c.patch_dim(), c.d_aux),
            (p.layout().aux_mix, c.d_aux, c.d_aux),
        ] {
            let m = p.tensor(idx).data();
            for i in 0..cols {
                for j in 0..cols {
                    let d: f32 = (0..rows).map(|k| m[k * cols + i] * m[k * cols + j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-5, "({i},{j}) = {d}");
                }
            }
        }
    }

    #[test]
    fn pathway_sets_mirror_each_other() {
        let cfg = ModelConfig {
            pathways: Pathways::Disentangled,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg).unwrap();
        let img = p.image_only();
        let txt = p.text_only();
        assert_eq!(img.len(), txt.len());
        assert!(!img.is_empty());
        for (&i, &t) in img.iter().zip(&txt) {
            assert_eq!(p.tensor(i).shape(), p.tensor(t).shape());
            assert_eq!(p.params()[i].name.replace("image", "text"), p.params()[t].name);
        }
        let shared = ModelParams::init(&ModelConfig::default()).unwrap();
        assert!(shared.text_only().is_empty());
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&ModelConfig::default()).unwrap();
        let b = ModelParams::init(&ModelConfig::default()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = ModelParams::init(&ModelConfig {
            init_seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.group_checksum(Group::Aux), c.group_checksum(Group::Aux));
    }
}
