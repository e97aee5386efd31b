use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::scene::vocab::{self, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathways {
    /// One weight set serves image and text positions.
    Shared,
    /// Image and text positions each have their own weights.
    Disentangled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub d_aux: usize,
    pub d_vision: usize,
    pub vision_ff: usize,
    pub vision_heads: usize,
    pub max_text_len: usize,
    pub blank_token_id: usize,
    pub pad_token_id: usize,
    pub pathways: Pathways,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            vocab_size: Vocab::standard().len(),
            patch_size: 8,
            image_size: 32,
            d_aux: 32,
            d_vision: 64,
            vision_ff: 128,
            vision_heads: 4,
            max_text_len: 24,
            blank_token_id: vocab::BLANK,
            pad_token_id: vocab::PAD,
            pathways: Pathways::Shared,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn patch_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("d_aux", self.d_aux),
            ("d_vision", self.d_vision),
            ("vision_ff", self.vision_ff),
            ("vision_heads", self.vision_heads),
            ("max_text_len", self.max_text_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(contract(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_vision % self.vision_heads != 0 {
            return Err(contract(format!(
                "d_vision {} not divisible by vision_heads {}",
                self.d_vision, self.vision_heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(contract(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.blank_token_id == self.pad_token_id {
            return Err(contract("blank and pad token ids must differ"));
        }
        for (name, id) in [("blank", self.blank_token_id), ("pad", self.pad_token_id)] {
            if id >= self.vocab_size {
                return Err(contract(format!("{name} token id {id} outside vocabulary of {}", self.vocab_size)));
            }
        }
        if self.d_aux > self.patch_dim() {
            return Err(contract(format!(
                "d_aux {} exceeds patch dimension {}",
                self.d_aux,
                self.patch_dim()
            )));
        }
        Ok(())
    }
}
