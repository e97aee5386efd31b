use std::fs;
use std::path::Path;

use super::{Glyph, Scene};
use crate::error::{contract, io_err, Error, Result};

pub type Rgb = [u8; 3];

const GRID_LINE: Rgb = [96, 96, 110];

/// Square RGB raster, row-major, three bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    size: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn filled(size: usize, rgb: Rgb) -> Image {
        let data = rgb.iter().copied().cycle().take(size * size * 3).collect();
        Image { size, data }
    }

    pub fn from_raw(size: usize, data: Vec<u8>) -> Result<Image> {
        if size == 0 || data.len() != size * size * 3 {
            return Err(contract(format!("{} bytes is not a {size}x{size} RGB image", data.len())));
        }
        Ok(Image { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> Rgb {
        let i = (row * self.size + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: Rgb) {
        let i = (row * self.size + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Image> {
        let bad = |m: &str| contract(format!("malformed PPM: {m}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ASCII"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("expected P6 magic"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if w != h || max != 255 {
            return Err(bad("expected a square 8-bit image"));
        }
        let body = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
        Image::from_raw(w, body.to_vec())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(io_err(path))
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Image::from_ppm(&bytes).map_err(|e| match e {
            Error::Contract(msg) => Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg,
            },
            other => other,
        })
    }
}

/// Whether a glyph covers offset (dy, dx) from its center, at radius r.
fn covers(glyph: Glyph, dy: i64, dx: i64, r: i64) -> bool {
    let d2 = dy * dy + dx * dx;
    let disk = 2 * d2 <= 2 * r * r + r;
    match glyph {
        Glyph::Circle => disk,
        Glyph::Square => dy.abs() <= r && dx.abs() <= r,
        Glyph::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
        Glyph::Cross => dy.abs() == dx.abs(),
        Glyph::Ring => d2 == 0 || (disk && d2 > (r - 1) * (r - 1)),
    }
}

/// Rasterizes a scene: background fill, one-pixel grid lines along each
/// cell's top row and left column, and each glyph centered in its cell.
pub fn render(scene: &Scene, image_size: usize) -> Result<Image> {
    let n = scene.grid_n;
    if n == 0 || image_size == 0 || image_size % n != 0 {
        return Err(contract(format!("image size {image_size} is not divisible by grid size {n}")));
    }
    let cell = image_size / n;
    let mut img = Image::filled(image_size, scene.background.rgb());
    for y in 0..image_size {
        for x in 0..image_size {
            if y % cell == 0 || x % cell == 0 {
                img.set(y, x, GRID_LINE);
            }
        }
    }
    let c = (cell / 2) as i64;
    let r = (c - 1).max(0);
    for p in &scene.placements {
        if p.row >= n || p.col >= n {
            return Err(contract(format!("placement ({}, {}) outside {n}x{n} grid", p.row, p.col)));
        }
        let rgb = p.object.color.rgb();
        for y in 1..cell {
            for x in 1..cell {
                if covers(p.object.glyph, y as i64 - c, x as i64 - c, r) {
                    img.set(p.row * cell + y, p.col * cell + x, rgb);
                }
            }
        }
    }
    Ok(img)
}
