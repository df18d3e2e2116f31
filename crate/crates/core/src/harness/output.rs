//! Sample dumps: CSV for low-dimensional points, binary PGM grids for images.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::svgd::ParticleSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeHint {
    Columns,
    Image { height: usize, width: usize },
}

pub fn samples_csv(particles: &ParticleSet) -> String {
    let mut s = (0..particles.d()).map(|k| format!("x{k}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for i in 0..particles.n() {
        let row = particles.row(i);
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Grey image holding one tile per particle, laid out row-major on a
/// `⌈√n⌉`-wide grid. Values in [0, 1] map affinely onto [0, 255].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GreyImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    /// Pixels whose value fell outside [0, 1].
    pub clamped: usize,
}

impl GreyImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn tile_grid(particles: &ParticleSet, height: usize, width: usize) -> Result<GreyImage> {
    if height * width != particles.d() || height == 0 {
        return Err(Error::dim(format!("{height}×{width} tiles need dimension {}, got {}", height * width, particles.d())));
    }
    let n = particles.n();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (w, h) = (cols * width, rows * height);
    let mut pixels = vec![0u8; w * h];
    let mut clamped = 0;
    for t in 0..n {
        let (ty, tx) = (t / cols, t % cols);
        for (k, &v) in particles.row(t).iter().enumerate() {
            let scaled = v * 255.0;
            if !(0.0..=255.0).contains(&scaled) {
                clamped += 1;
            }
            let y = ty * height + k / width;
            let x = tx * width + k % width;
            pixels[y * w + x] = scaled.clamp(0.0, 255.0).round() as u8;
        }
    }
    Ok(GreyImage { width: w, height: h, pixels, clamped })
}

pub fn write_samples(particles: &ParticleSet, hint: ShapeHint, path: &Path) -> Result<()> {
    match hint {
        ShapeHint::Columns => std::fs::write(path, samples_csv(particles))?,
        ShapeHint::Image { height, width } => {
            let img = tile_grid(particles, height, width)?;
            if img.clamped > 0 {
                log::warn!("{}: clamped {} pixel values to [0, 255]", path.display(), img.clamped);
            }
            std::fs::write(path, img.to_pgm())?;
        }
    }
    Ok(())
}
