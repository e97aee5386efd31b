use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::qa::gen_question_with;
use super::{render, sample_scene, DistanceMetric, QaKind, QaPair, Scene};
use crate::error::{contract, io_err, Error, Result};
use crate::{par, rng};

const HELD_OUT_BIT: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "held-out" | "heldout" | "test" => Some(Split::HeldOut),
            _ => None,
        }
    }
}

/// Scene seed for sample `index` of a split. Held-out seeds have the top bit
/// set and training seeds have it clear, so the two ranges never meet.
pub fn scene_seed(seed: u64, split: Split, index: u64) -> u64 {
    let s = rng::derive(seed, &[0xda7a, index]);
    match split {
        Split::Train => s & !HELD_OUT_BIT,
        Split::HeldOut => s | HELD_OUT_BIT,
    }
}

pub fn is_held_out(scene_id: u64) -> bool {
    scene_id & HELD_OUT_BIT != 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub grid_n: usize,
    pub image_size: usize,
    pub kinds: Vec<QaKind>,
    pub metric: DistanceMetric,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            grid_n: 4,
            image_size: 32,
            kinds: QaKind::ALL.to_vec(),
            metric: DistanceMetric::Chebyshev,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub scene_id: u64,
    pub split: Split,
    pub scene: Scene,
    /// Raster sidecar, relative to the JSONL file's directory.
    pub image: String,
    pub kind: QaKind,
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

impl DatasetRecord {
    pub fn qa(&self) -> QaPair {
        QaPair {
            kind: self.kind,
            question: self.question.clone(),
            answer: self.answer.clone(),
            scene_ref: self.scene_id,
        }
    }
}

/// Generates `count` records in memory; kinds cycle through `spec.kinds`.
pub fn build_records(spec: &DatasetSpec, count: usize, split: Split, seed: u64, sidecar_dir: &str) -> Result<Vec<DatasetRecord>> {
    if spec.kinds.is_empty() {
        return Err(contract("dataset needs at least one question kind"));
    }
    (0..count)
        .map(|i| {
            let scene_id = scene_seed(seed, split, i as u64);
            let scene = sample_scene(spec.grid_n, scene_id)?;
            let kind = spec.kinds[i % spec.kinds.len()];
            let qa = gen_question_with(&scene, kind, spec.metric, rng::derive(seed, &[0x9a, i as u64]))?;
            Ok(DatasetRecord {
                scene_id,
                split,
                scene,
                image: format!("{sidecar_dir}/{scene_id:016x}.ppm"),
                kind,
                question: qa.question,
                answer: qa.answer,
            })
        })
        .collect()
}

fn sidecar_dir_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    format!("{stem}_images")
}

/// Writes `count` records as JSON Lines at `path` plus one PPM per scene in a
/// sibling `<stem>_images` directory. Rendering runs on `workers` threads.
pub fn emit_dataset(
    spec: &DatasetSpec,
    count: usize,
    split: Split,
    seed: u64,
    path: &Path,
    workers: usize,
) -> Result<Vec<DatasetRecord>> {
    if count == 0 {
        return Err(contract("dataset count must be positive"));
    }
    let dir_name = sidecar_dir_name(path);
    let records = build_records(spec, count, split, seed, &dir_name)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let img_dir = base.join(&dir_name);
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let images = par::ordered_map(&records, workers, |r| render(&r.scene, spec.image_size));
    for (rec, image) in records.iter().zip(images) {
        image?.write_ppm(&base.join(&rec.image))?;
        let line = serde_json::to_string(rec).map_err(|e| contract(e.to_string()))?;
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))?;
    Ok(records)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.scene.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn sidecar_path(dataset: &Path, rec: &DatasetRecord) -> PathBuf {
    dataset.parent().map(Path::to_path_buf).unwrap_or_default().join(&rec.image)
}
