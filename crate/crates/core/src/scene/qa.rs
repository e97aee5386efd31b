use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{Placement, Scene, COMPASS};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaKind {
    Describe,
    Directional,
    Distance,
    Location,
}

impl QaKind {
    pub const ALL: [QaKind; 4] = [QaKind::Describe, QaKind::Directional, QaKind::Distance, QaKind::Location];
    pub const SPATIAL: [QaKind; 3] = [QaKind::Directional, QaKind::Distance, QaKind::Location];

    pub fn as_str(self) -> &'static str {
        match self {
            QaKind::Describe => "describe",
            QaKind::Directional => "directional",
            QaKind::Distance => "distance",
            QaKind::Location => "location",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    #[default]
    Chebyshev,
    Manhattan,
    EuclideanRounded,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub kind: QaKind,
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub scene_ref: u64,
}

/// Compass directions, clockwise from north; indices match `COMPASS`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    North,
    NorthEast,
    East,
    SouthEast,
    South,
    SouthWest,
    West,
    NorthWest,
}

impl Direction {
    const ALL: [Direction; 8] = [
        Direction::North,
        Direction::NorthEast,
        Direction::East,
        Direction::SouthEast,
        Direction::South,
        Direction::SouthWest,
        Direction::West,
        Direction::NorthWest,
    ];

    /// Direction of A as seen from B, given the cell of each.
    /// Uses an exact integer test against the 22.5° sector edges.
    pub fn between(a: (usize, usize), b: (usize, usize)) -> Option<Direction> {
        let east = a.1 as i64 - b.1 as i64;
        let north = b.0 as i64 - a.0 as i64;
        if east == 0 && north == 0 {
            return None;
        }
        let (ax, ay) = (east.abs(), north.abs());
        let (major, minor) = (ax.max(ay), ax.min(ay));
        // minor/major < tan 22.5° = √2 − 1, squared without roots
        let cardinal = (minor + major) * (minor + major) < 2 * major * major;
        Some(if cardinal {
            if ax > ay {
                if east > 0 { Direction::East } else { Direction::West }
            } else if north > 0 {
                Direction::North
            } else {
                Direction::South
            }
        } else {
            match (north > 0, east > 0) {
                (true, true) => Direction::NorthEast,
                (true, false) => Direction::NorthWest,
                (false, true) => Direction::SouthEast,
                (false, false) => Direction::SouthWest,
            }
        })
    }

    pub fn word(self) -> &'static str {
        COMPASS[self as usize]
    }

    pub fn opposite(self) -> Direction {
        Direction::ALL[(self as usize + 4) % 8]
    }

    pub fn is_cardinal(self) -> bool {
        (self as usize) % 2 == 0
    }
}

impl DistanceMetric {
    pub fn cells(self, a: (usize, usize), b: (usize, usize)) -> usize {
        let dr = a.0.abs_diff(b.0);
        let dc = a.1.abs_diff(b.1);
        match self {
            DistanceMetric::Chebyshev => dr.max(dc),
            DistanceMetric::Manhattan => dr + dc,
            DistanceMetric::EuclideanRounded => ((dr * dr + dc * dc) as f64).sqrt().round() as usize,
        }
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn cell(p: &Placement) -> (usize, usize) {
    (p.row, p.col)
}

/// Builds a question of the given kind about `scene` with the default metric.
pub fn gen_question(scene: &Scene, kind: QaKind, seed: u64) -> Result<QaPair> {
    gen_question_with(scene, kind, DistanceMetric::default(), seed)
}

pub fn gen_question_with(scene: &Scene, kind: QaKind, metric: DistanceMetric, seed: u64) -> Result<QaPair> {
    let need = match kind {
        QaKind::Describe | QaKind::Location => 1,
        QaKind::Directional | QaKind::Distance => 2,
    };
    if scene.placements.len() < need {
        return Err(Error::Infeasible(format!(
            "{} needs {need} objects, scene {} has {}",
            kind.as_str(),
            scene.id,
            scene.placements.len()
        )));
    }
    let mut r = rng::rng(seed, &[scene.id, kind.tag()]);
    let picks = sample(&mut r, scene.placements.len(), need).into_vec();
    let a = &scene.placements[picks[0]];
    let (question, answer) = match kind {
        QaKind::Describe => (
            words("what are the objects in the image ?"),
            scene.raster_order().iter().map(|p| p.object.name()).collect(),
        ),
        QaKind::Location => (
            words(&format!("which cell contains {} ?", a.object.name())),
            words(&format!("row {} col {}", a.row, a.col)),
        ),
        QaKind::Directional => {
            let b = &scene.placements[picks[1]];
            let dir = Direction::between(cell(a), cell(b)).expect("placements occupy distinct cells");
            (
                words(&format!("in which direction is {} from {} ?", a.object.name(), b.object.name())),
                vec![dir.word().to_string()],
            )
        }
        QaKind::Distance => {
            let b = &scene.placements[picks[1]];
            let d = metric.cells(cell(a), cell(b));
            if d > super::vocab::MAX_NUMERAL {
                return Err(Error::Infeasible(format!("distance {d} has no numeral token")));
            }
            (
                words(&format!("what is the distance between {} and {} ?", a.object.name(), b.object.name())),
                vec![d.to_string()],
            )
        }
    };
    Ok(QaPair {
        kind,
        question,
        answer,
        scene_ref: scene.id,
    })
}

/// Recomputes the answer from the scene layout and compares token-exactly.
pub fn verify_answer(scene: &Scene, qa: &QaPair) -> bool {
    verify_answer_with(scene, qa, DistanceMetric::default())
}

pub fn verify_answer_with(scene: &Scene, qa: &QaPair, metric: DistanceMetric) -> bool {
    if qa.scene_ref != scene.id {
        return false;
    }
    let q: Vec<&str> = qa.question.iter().map(String::as_str).collect();
    let expected: Option<Vec<String>> = match (qa.kind, q.as_slice()) {
        (QaKind::Describe, ["what", "are", "the", "objects", "in", "the", "image", "?"]) => {
            let mut cells: Vec<&Placement> = scene.placements.iter().collect();
            cells.sort_by(|x, y| (x.row * scene.grid_n + x.col).cmp(&(y.row * scene.grid_n + y.col)));
            Some(cells.iter().map(|p| p.object.name()).collect())
        }
        (QaKind::Location, ["which", "cell", "contains", a, "?"]) => scene
            .find(a)
            .map(|p| vec!["row".into(), p.row.to_string(), "col".into(), p.col.to_string()]),
        (QaKind::Directional, ["in", "which", "direction", "is", a, "from", b, "?"]) => {
            match (scene.find(a), scene.find(b)) {
                (Some(pa), Some(pb)) if a != b => oracle_direction(pa, pb).map(|w| vec![w.to_string()]),
                _ => None,
            }
        }
        (QaKind::Distance, ["what", "is", "the", "distance", "between", a, "and", b, "?"]) => {
            match (scene.find(a), scene.find(b)) {
                (Some(pa), Some(pb)) => Some(vec![oracle_distance(pa, pb, metric).to_string()]),
                _ => None,
            }
        }
        _ => None,
    };
    expected.is_some_and(|e| e == qa.answer)
}

/// Classifies the angle of (Δcol, −Δrow) into 8 sectors of 45° centered on
/// the compass directions, measured counter-clockwise from east.
fn oracle_direction(a: &Placement, b: &Placement) -> Option<&'static str> {
    let x = a.col as f64 - b.col as f64;
    let y = -(a.row as f64 - b.row as f64);
    if x == 0.0 && y == 0.0 {
        return None;
    }
    let deg = y.atan2(x).to_degrees();
    let sector = ((deg / 45.0).round() as i64).rem_euclid(8) as usize;
    const CCW_FROM_EAST: [&str; 8] = [
        "east",
        "northeast",
        "north",
        "northwest",
        "west",
        "southwest",
        "south",
        "southeast",
    ];
    Some(CCW_FROM_EAST[sector])
}

fn oracle_distance(a: &Placement, b: &Placement, metric: DistanceMetric) -> usize {
    let dr = (a.row as i64 - b.row as i64).abs();
    let dc = (a.col as i64 - b.col as i64).abs();
    let d = match metric {
        DistanceMetric::Chebyshev => {
            if dr > dc {
                dr
            } else {
                dc
            }
        }
        DistanceMetric::Manhattan => dr + dc,
        DistanceMetric::EuclideanRounded => (dr as f64).hypot(dc as f64).round() as i64,
    };
    d as usize
}
