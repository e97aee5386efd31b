use std::sync::Arc;

use crate::error::{contract, Result};
use crate::model::{patchify, ModelParams};
use crate::par;
use crate::scene::vocab::{self, Vocab, HEADER};
use crate::scene::{build_records, render, DatasetRecord, DatasetSpec, QaKind, Split};

/// One image plus its teacher-forced text.
///
/// The full sequence is `<bos> header question <sep> answer <eos>`; `input`
/// drops the last token and `target` drops the first. The loss covers the
/// answer and `<eos>` targets only.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub scene_id: u64,
    pub kind: QaKind,
    pub patches: Arc<Vec<f32>>,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub loss_mask: Vec<bool>,
    /// Input positions never blanked: `<bos>` and `<sep>`.
    pub protected: Vec<bool>,
    /// Index of `<sep>` in `input`.
    pub sep: usize,
}

impl MultimodalSample {
    pub fn from_record(params: &ModelParams, rec: &DatasetRecord) -> Result<MultimodalSample> {
        let c = params.config();
        if c.image_size % rec.scene.grid_n != 0 {
            return Err(contract(format!(
                "image size {} does not divide into a {}x{} grid",
                c.image_size, rec.scene.grid_n, rec.scene.grid_n
            )));
        }
        let image = render(&rec.scene, c.image_size)?;
        let patches = Arc::new(patchify(params, &image)?);
        Self::from_parts(params, rec.scene_id, rec.kind, patches, &rec.question, &rec.answer)
    }

    pub fn from_parts(
        params: &ModelParams,
        scene_id: u64,
        kind: QaKind,
        patches: Arc<Vec<f32>>,
        question: &[String],
        answer: &[String],
    ) -> Result<MultimodalSample> {
        let v = Vocab::standard();
        let mut seq = vec![vocab::BOS];
        seq.extend(v.encode(&HEADER)?);
        seq.extend(v.encode(question)?);
        let sep = seq.len();
        seq.push(vocab::SEP);
        seq.extend(v.encode(answer)?);
        seq.push(vocab::EOS);
        let input = seq[..seq.len() - 1].to_vec();
        let target = seq[1..].to_vec();
        if input.len() > params.config().max_text_len {
            return Err(contract(format!(
                "sequence of {} tokens exceeds max_text_len {}",
                input.len(),
                params.config().max_text_len
            )));
        }
        if seq.iter().any(|&id| id >= params.config().vocab_size) {
            return Err(contract("token id outside the model vocabulary"));
        }
        let loss_mask = (0..input.len()).map(|i| i >= sep).collect();
        let protected = input.iter().map(|&t| t == vocab::BOS || t == vocab::SEP).collect();
        Ok(MultimodalSample {
            scene_id,
            kind,
            patches,
            input,
            target,
            loss_mask,
            protected,
            sep,
        })
    }

    /// Tokens fed to greedy decoding: everything up to and including `<sep>`.
    pub fn prompt(&self) -> &[usize] {
        &self.input[..=self.sep]
    }

    /// Gold answer tokens, without `<eos>`.
    pub fn answer(&self) -> &[usize] {
        &self.target[self.sep..self.target.len() - 1]
    }
}

/// Builds `count` samples of the given kinds from one split and seed.
pub fn build_pool(params: &ModelParams, kinds: &[QaKind], grid_n: usize, count: usize, split: Split, seed: u64) -> Result<Vec<MultimodalSample>> {
    build_pool_with(params, kinds, grid_n, count, split, seed, 1)
}

/// [`build_pool`] with rendering spread over `workers` threads.
pub fn build_pool_with(
    params: &ModelParams,
    kinds: &[QaKind],
    grid_n: usize,
    count: usize,
    split: Split,
    seed: u64,
    workers: usize,
) -> Result<Vec<MultimodalSample>> {
    let spec = DatasetSpec {
        grid_n,
        image_size: params.config().image_size,
        kinds: kinds.to_vec(),
        ..DatasetSpec::default()
    };
    let records = build_records(&spec, count, split, seed, "")?;
    samples_from_records(params, &records, workers)
}

/// Converts records to samples in order, rendering on `workers` threads.
pub fn samples_from_records(params: &ModelParams, records: &[DatasetRecord], workers: usize) -> Result<Vec<MultimodalSample>> {
    par::ordered_map(records, workers, |r| MultimodalSample::from_record(params, r))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn sequence_layout() {
        let p = ModelParams::init(&ModelConfig::default()).unwrap();
        let pool = build_pool(&p, &[QaKind::Directional], 4, 3, Split::Train, 0).unwrap();
        let s = &pool[0];
        let v = Vocab::standard();
        assert_eq!(s.input[0], vocab::BOS);
        assert_eq!(v.decode(&s.input[1..5]), HEADER);
        assert_eq!(s.input[s.sep], vocab::SEP);
        assert_eq!(*s.target.last().unwrap(), vocab::EOS);
        assert_eq!(s.input[1..], s.target[..s.target.len() - 1]);
        assert_eq!(s.loss_mask.iter().filter(|&&m| m).count(), 2);
        assert_eq!(s.answer().len(), 1);
        assert!(crate::scene::COMPASS.contains(&v.token(s.answer()[0]).unwrap()));
        assert_eq!(s.protected.iter().filter(|&&p| p).count(), 2);
        assert_eq!(s.patches.len(), 16 * 192);
    }

    #[test]
    fn longest_sequences_fit() {
        let p = ModelParams::init(&ModelConfig::default()).unwrap();
        for grid in [4, 8] {
            let cfg = ModelConfig {
                image_size: 8 * grid,
                ..ModelConfig::default()
            };
            let q = ModelParams::init(&cfg).unwrap();
            build_pool(&q, &QaKind::ALL, grid, 200, Split::Train, 1).unwrap();
        }
        assert!(build_pool(&p, &QaKind::ALL, 8, 4, Split::Train, 1).is_ok());
    }
}
