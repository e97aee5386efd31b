//! Procedural grid scenes: objects on distinct cells of an N×N grid, their
//! rasterization, template questions, and an independent answer oracle.
//!
//! Coordinates: row 0 is the top (north) edge, rows grow southward and
//! columns grow eastward.

mod dataset;
mod qa;
mod raster;
pub mod vocab;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng;

pub use dataset::{
    build_records, emit_dataset, is_held_out, read_dataset, scene_seed, sidecar_path, DatasetRecord, DatasetSpec, Split,
};
pub use qa::{gen_question, gen_question_with, verify_answer, verify_answer_with, Direction, DistanceMetric, QaKind, QaPair};
pub use raster::{render, Image, Rgb};
pub use vocab::Vocab;

pub const COMPASS: [&str; 8] = [
    "north",
    "northeast",
    "east",
    "southeast",
    "south",
    "southwest",
    "west",
    "northwest",
];

pub const MAX_OBJECTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Glyph {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl Glyph {
    pub const ALL: [Glyph; 5] = [Glyph::Circle, Glyph::Square, Glyph::Triangle, Glyph::Cross, Glyph::Ring];

    pub fn as_str(self) -> &'static str {
        match self {
            Glyph::Circle => "circle",
            Glyph::Square => "square",
            Glyph::Triangle => "triangle",
            Glyph::Cross => "cross",
            Glyph::Ring => "ring",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    Orange,
    Purple,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Magenta,
        Color::Cyan,
        Color::Orange,
        Color::Purple,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
            Color::Orange => "orange",
            Color::Purple => "purple",
        }
    }

    pub fn rgb(self) -> Rgb {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 170, 60],
            Color::Blue => [40, 80, 225],
            Color::Yellow => [235, 210, 40],
            Color::Magenta => [210, 50, 200],
            Color::Cyan => [40, 200, 215],
            Color::Orange => [245, 140, 30],
            Color::Purple => [115, 45, 160],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    White,
    Gray,
    Beige,
    Black,
}

impl Background {
    pub const ALL: [Background; 4] = [Background::White, Background::Gray, Background::Beige, Background::Black];

    pub fn rgb(self) -> Rgb {
        match self {
            Background::White => [245, 245, 245],
            Background::Gray => [150, 150, 150],
            Background::Beige => [225, 210, 170],
            Background::Black => [20, 20, 20],
        }
    }
}

pub fn object_name(color: Color, glyph: Glyph) -> String {
    format!("{}-{}", color.as_str(), glyph.as_str())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub glyph: Glyph,
    pub color: Color,
}

impl ObjectSpec {
    pub fn name(&self) -> String {
        object_name(self.color, self.glyph)
    }

    pub fn all() -> impl Iterator<Item = ObjectSpec> {
        Color::ALL
            .into_iter()
            .flat_map(|color| Glyph::ALL.into_iter().map(move |glyph| ObjectSpec { glyph, color }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub object: ObjectSpec,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub grid_n: usize,
    pub background: Background,
    pub placements: Vec<Placement>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let n = self.grid_n;
        let max = MAX_OBJECTS.min(n * n);
        if !(2..=max).contains(&self.placements.len()) {
            return Err(contract(format!(
                "scene {} has {} objects, expected 2..={max}",
                self.id,
                self.placements.len()
            )));
        }
        for (i, p) in self.placements.iter().enumerate() {
            if p.row >= n || p.col >= n {
                return Err(contract(format!("placement ({}, {}) outside {n}x{n} grid", p.row, p.col)));
            }
            for q in &self.placements[..i] {
                if (q.row, q.col) == (p.row, p.col) {
                    return Err(contract(format!("two objects share cell ({}, {})", p.row, p.col)));
                }
                if q.object == p.object {
                    return Err(contract(format!("object {} placed twice", p.object.name())));
                }
            }
        }
        Ok(())
    }

    /// Placements sorted row-major.
    pub fn raster_order(&self) -> Vec<Placement> {
        let mut v = self.placements.clone();
        v.sort_by_key(|p| (p.row, p.col));
        v
    }

    pub fn at(&self, row: usize, col: usize) -> Option<&Placement> {
        self.placements.iter().find(|p| p.row == row && p.col == col)
    }

    pub fn find(&self, name: &str) -> Option<&Placement> {
        self.placements.iter().find(|p| p.object.name() == name)
    }
}

/// Draws a scene with 2..=5 objects on distinct cells, each object used once.
pub fn sample_scene(grid_n: usize, seed: u64) -> Result<Scene> {
    if grid_n != 4 && grid_n != 8 {
        return Err(contract(format!("grid size {grid_n} not supported (4 or 8)")));
    }
    let mut r = rng::rng(seed, &[0x5ce4e]);
    let max = MAX_OBJECTS.min(grid_n * grid_n);
    let count = r.random_range(2..=max);
    let background = Background::ALL[r.random_range(0..Background::ALL.len())];
    let catalogue: Vec<ObjectSpec> = ObjectSpec::all().collect();
    let cells = sample(&mut r, grid_n * grid_n, count);
    let objects = sample(&mut r, catalogue.len(), count);
    let placements = cells
        .iter()
        .zip(objects.iter())
        .map(|(cell, obj)| Placement {
            object: catalogue[obj],
            row: cell / grid_n,
            col: cell % grid_n,
        })
        .collect();
    Ok(Scene {
        id: seed,
        grid_n,
        background,
        placements,
    })
}
