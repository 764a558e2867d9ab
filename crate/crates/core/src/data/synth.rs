//! Procedural scenes with large amorphous regions and thin or tiny details.
//!
//! Background and blob colours come from the same distribution, so a patch
//! inside a large region cannot be classified from its own colour; dots and
//! lines use saturated or near-black colours that never occur in stuff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::pnm::Raster;
use super::sample::{raster_to_image, LabelMap, SegmentationSample};
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 5] = ["background", "blob", "dot", "line", "grid"];
pub const BACKGROUND: u8 = 0;
pub const BLOB: u8 = 1;
pub const DOT: u8 = 2;
pub const LINE: u8 = 3;
pub const GRID: u8 = 4;

const MAX_ATTEMPTS: usize = 500;
/// Largest fraction of a new blob that may cover earlier blobs or the grid.
const MAX_OVERLAP: f64 = 0.25;
const MAX_LAYOUTS: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub blobs: (usize, usize),
    /// Fraction of the canvas covered by each blob.
    pub blob_area: (f64, f64),
    pub dots: (usize, usize),
    pub lines: (usize, usize),
    pub line_width: (usize, usize),
    /// Fraction of the canvas covered by the grid region.
    pub grid_area: (f64, f64),
    pub grid_period: usize,
    /// Peak-to-peak amplitude of the background colour gradient.
    pub gradient: f64,
    /// Minimum RGB distance between background and blob colours.
    pub min_contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            blobs: (1, 3),
            blob_area: (0.15, 0.2),
            dots: (3, 10),
            lines: (1, 4),
            line_width: (1, 2),
            grid_area: (0.06, 0.12),
            grid_period: 4,
            gradient: 0.2,
            min_contrast: 0.25,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, d: &str| Err(Error::config(format!("synth.{key}"), d));
        if self.height < 32 || self.width < 32 || self.height % 16 != 0 || self.width % 16 != 0 {
            return bad("size", "canvas must be at least 32x32 and divisible by 16");
        }
        for (key, (lo, hi)) in [("blobs", self.blobs), ("dots", self.dots), ("lines", self.lines)] {
            if lo == 0 || lo > hi {
                return bad(key, "range must satisfy 1 <= lo <= hi");
            }
        }
        if self.line_width.0 == 0 || self.line_width.0 > self.line_width.1 {
            return bad("line_width", "range must satisfy 1 <= lo <= hi");
        }
        for (key, (lo, hi)) in [("blob_area", self.blob_area), ("grid_area", self.grid_area)] {
            if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                return bad(key, "range must satisfy 0 < lo <= hi < 1");
            }
        }
        if self.grid_period < 2 {
            return bad("grid_period", "must be at least 2");
        }
        if !(self.noise_sigma >= 0.0) || !(self.gradient >= 0.0) || !(self.min_contrast >= 0.0) {
            return bad("noise_sigma", "noise, gradient and contrast must be non-negative");
        }
        Ok(())
    }

    /// Largest dot radius whose disc stays within 0.2% of the canvas.
    pub fn dot_radius(&self) -> usize {
        let limit = 0.002 * (self.height * self.width) as f64;
        (1..).take_while(|&r| disc_offsets(r).len() as f64 <= limit).last().unwrap_or(1).max(1)
    }
}

/// Samples `start..start + count`. Each sample depends only on the config and
/// its index.
pub fn synth_generate_range(cfg: &SynthConfig, start: usize, count: usize) -> Result<Vec<SegmentationSample>> {
    cfg.validate()?;
    (start..start + count).map(|i| generate_one(cfg, i)).collect()
}

pub fn synth_generate(cfg: &SynthConfig, n: usize) -> Result<Vec<SegmentationSample>> {
    synth_generate_range(cfg, 0, n)
}

type Rgb = [f64; 3];

fn stuff_colour(rng: &mut ChaCha8Rng) -> Rgb {
    [0; 3].map(|_| rng.random_range(0.15..0.85))
}

fn distance(a: Rgb, b: Rgb) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn disc_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                v.push((dy, dx));
            }
        }
    }
    v
}

struct Canvas {
    w: usize,
    colour: Vec<Rgb>,
    label: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, mask: &[bool], label: u8, colour: impl Fn(usize, usize) -> Rgb) {
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            self.label[i] = label;
            self.colour[i] = colour(i / self.w, i % self.w);
        }
    }
}

fn generate_one(cfg: &SynthConfig, index: usize) -> Result<SegmentationSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((crate::STREAM_SYNTH << 40) | index as u64);
    let (h, w) = (cfg.height, cfg.width);
    let area = (h * w) as f64;
    let fail = |what: &str| Error::Generation(format!("sample {index}: could not place {what}"));

    let bg = stuff_colour(&mut rng);
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (dir.sin() * cfg.gradient, dir.cos() * cfg.gradient);
    let mut canvas = Canvas {
        w,
        colour: (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64 / h as f64 - 0.5, (i % w) as f64 / w as f64 - 0.5);
                bg.map(|c| c + gy * y + gx * x)
            })
            .collect(),
        label: vec![BACKGROUND; h * w],
    };

    let blob_colour = (0..MAX_ATTEMPTS)
        .map(|_| stuff_colour(&mut rng))
        .find(|c| distance(*c, bg) >= cfg.min_contrast)
        .ok_or_else(|| fail("a contrasting blob colour"))?;
    let (ga, gb) = (stuff_colour(&mut rng), stuff_colour(&mut rng));
    let period = cfg.grid_period;
    let frac = rng.random_range(cfg.grid_area.0..=cfg.grid_area.1);
    let aspect: f64 = rng.random_range(0.5..2.0);
    let rh = ((frac * area * aspect).sqrt().round() as usize).clamp(period, h);
    let rw = ((frac * area / rh as f64).round() as usize).clamp(period, w);
    let (y0, x0) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
    let grid: Vec<bool> =
        (0..h * w).map(|i| (y0..y0 + rh).contains(&(i / w)) && (x0..x0 + rw).contains(&(i % w))).collect();
    canvas.paint(&grid, GRID, |y, x| if y % period == 0 || x % period == 0 { ga } else { gb });

    let nblobs = rng.random_range(cfg.blobs.0..=cfg.blobs.1);
    let blobs = (0..MAX_LAYOUTS)
        .find_map(|_| {
            let mut occupied = grid.clone();
            let mut masks = Vec::with_capacity(nblobs);
            for _ in 0..nblobs {
                let mask = (0..MAX_ATTEMPTS / MAX_LAYOUTS).find_map(|_| {
                    let mask = blob_mask(cfg, &mut rng);
                    let n = mask.iter().filter(|m| **m).count() as f64;
                    let overlap = mask.iter().zip(&occupied).filter(|(m, o)| **m && **o).count() as f64;
                    (n >= cfg.blob_area.0 * area && overlap <= MAX_OVERLAP * n).then_some(mask)
                })?;
                for (o, m) in occupied.iter_mut().zip(&mask) {
                    *o |= *m;
                }
                masks.push(mask);
            }
            Some(masks)
        })
        .ok_or_else(|| fail("the blobs"))?;
    for mask in &blobs {
        canvas.paint(mask, BLOB, |_, _| blob_colour);
    }

    let min_len = 0.5 * h.min(w) as f64;
    for _ in 0..rng.random_range(cfg.lines.0..=cfg.lines.1) {
        let half = rng.random_range(cfg.line_width.0..=cfg.line_width.1) as f64 / 2.0;
        let (p, q) = (0..MAX_ATTEMPTS)
            .map(|_| {
                let p = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
                let q = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
                (p, q)
            })
            .find(|(p, q)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() >= min_len)
            .ok_or_else(|| fail("a line"))?;
        let shade = rng.random_range(0.0..0.08);
        let mask: Vec<bool> = (0..h * w)
            .map(|i| segment_distance(((i / w) as f64 + 0.5, (i % w) as f64 + 0.5), p, q) <= half)
            .collect();
        canvas.paint(&mask, LINE, |_, _| [shade; 3]);
    }

    let offsets = disc_offsets(cfg.dot_radius());
    for _ in 0..rng.random_range(cfg.dots.0..=cfg.dots.1) {
        let (cy, cx) = (rng.random_range(0..h) as isize, rng.random_range(0..w) as isize);
        let channels: u8 = rng.random_range(1..8);
        let colour: Rgb = [0, 1, 2].map(|c| {
            if channels >> c & 1 == 1 { rng.random_range(0.92..1.0) } else { rng.random_range(0.0..0.08) }
        });
        let mut mask = vec![false; h * w];
        for (dy, dx) in &offsets {
            let (y, x) = (cy + dy, cx + dx);
            if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
                mask[y as usize * w + x as usize] = true;
            }
        }
        canvas.paint(&mask, DOT, |_, _| colour);
    }

    if !canvas.label.contains(&BACKGROUND) {
        return Err(fail("any background"));
    }
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut bytes = Vec::with_capacity(h * w * 3);
    for c in &canvas.colour {
        for v in c {
            let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            bytes.push(((v + n).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let image = raster_to_image(&Raster::new(w, h, 3, bytes));
    SegmentationSample::new(format!("s{index:05}"), image, LabelMap::new(h, w, canvas.label))
}

/// An ellipse of the configured area whose centre keeps at least half of
/// each bounding-box half-extent inside the canvas.
fn blob_mask(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (h, w) = (cfg.height, cfg.width);
    let target = rng.random_range(cfg.blob_area.0..=cfg.blob_area.1) * (h * w) as f64;
    let aspect: f64 = rng.random_range(0.6..1.6);
    let a = (target / std::f64::consts::PI * aspect).sqrt();
    let b = target / std::f64::consts::PI / a;
    let (s, c) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
    let ey = (0.5 * ((a * s).powi(2) + (b * c).powi(2)).sqrt()).min(h as f64 / 2.0);
    let ex = (0.5 * ((a * c).powi(2) + (b * s).powi(2)).sqrt()).min(w as f64 / 2.0);
    let cy = rng.random_range(ey..=h as f64 - ey);
    let cx = rng.random_range(ex..=w as f64 - ex);
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 + 0.5 - cy, (i % w) as f64 + 0.5 - cx);
            let (u, v) = (c * x + s * y, -s * x + c * y);
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        })
        .collect()
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((p.0 - a.0 - t * dy).powi(2) + (p.1 - a.1 - t * dx).powi(2)).sqrt()
}
