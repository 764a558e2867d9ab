use std::path::{Path, PathBuf};

use super::pnm::{self, Raster};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "label map size");
        LabelMap { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap { height, width, data: vec![value; height * width] }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn hflip(&self) -> LabelMap {
        let data = self.data.chunks(self.width).flat_map(|row| row.iter().rev().copied()).collect();
        LabelMap { data, ..*self }
    }
}

/// An RGB image in `[0, 1]` with shape `(1,3,h,w)` and its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Tensor,
    pub labels: LabelMap,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Tensor, labels: LabelMap) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 || (s.h, s.w) != (labels.height, labels.width) {
            return Err(Error::Dimension(format!(
                "image {s} does not match labels {}x{}",
                labels.height, labels.width
            )));
        }
        Ok(SegmentationSample { id: id.into(), image, labels })
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    /// Labels must lie in `[0, num_classes)` or equal [`IGNORE_INDEX`].
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.data.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= num_classes) {
            Some(l) => Err(Error::Data(format!("sample {}: label {l} outside 0..{num_classes}", self.id))),
            None => Ok(()),
        }
    }
}

pub fn image_to_raster(image: &Tensor) -> Raster {
    let s = image.shape();
    let plane = s.plane();
    let d = image.data();
    let mut out = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Raster::new(s.w, s.h, 3, out)
}

pub fn raster_to_image(r: &Raster) -> Tensor {
    Tensor::from_fn([1, 3, r.height, r.width], |_, c, y, x| {
        r.data[(y * r.width + x) * 3 + c] as f64 / 255.0
    })
}

pub fn save_sample(sample: &SegmentationSample, image_path: &Path, label_path: &Path) -> Result<()> {
    pnm::write(image_path, &image_to_raster(&sample.image))?;
    let l = &sample.labels;
    pnm::write(label_path, &Raster::new(l.width, l.height, 1, l.data.clone()))
}

pub fn load_sample(id: &str, image_path: &Path, label_path: &Path) -> Result<SegmentationSample> {
    let img = pnm::read(image_path)?;
    if img.channels != 3 {
        return Err(Error::format(image_path, "expected a PPM image"));
    }
    let lab = pnm::read(label_path)?;
    if lab.channels != 1 {
        return Err(Error::format(label_path, "expected a PGM label map"));
    }
    if (img.width, img.height) != (lab.width, lab.height) {
        return Err(Error::format(
            label_path,
            format!("label size {}x{} differs from image {}x{}", lab.width, lab.height, img.width, img.height),
        ));
    }
    SegmentationSample::new(id, raster_to_image(&img), LabelMap::new(lab.height, lab.width, lab.data))
}

/// Writes `images/<id>.ppm`, `labels/<id>.pgm` and a `manifest.txt` listing
/// `id image label` with paths relative to `dir`.
pub fn save_dataset(dir: &Path, samples: &[SegmentationSample]) -> Result<PathBuf> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for s in samples {
        let (img, lab) = (format!("images/{}.ppm", s.id), format!("labels/{}.pgm", s.id));
        save_sample(s, &dir.join(&img), &dir.join(&lab))?;
        manifest.push_str(&format!("{} {img} {lab}\n", s.id));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_manifest(path: &Path) -> Result<Vec<SegmentationSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, img, lab] = fields[..] else {
            return Err(Error::format(path, format!("line {}: expected `id image_path label_path`", i + 1)));
        };
        out.push(load_sample(id, &base.join(img), &base.join(lab))?);
    }
    Ok(out)
}
