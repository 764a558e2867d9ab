use rand::Rng;

use crate::data::{LabelMap, SegmentationSample, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::tensor::kernels::{bilinear_resize, nearest_resize_u8};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub hflip_prob: f64,
    /// Uniform random rescale factor range, if any.
    pub scale_range: Option<(f64, f64)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { crop_size: 64, hflip_prob: 0.5, scale_range: None }
    }
}

/// The range used when scale augmentation is switched on.
pub const SCALE_AUG_RANGE: (f64, f64) = (0.5, 2.2);

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::config("augment.crop_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("augment.hflip_prob", "must lie in [0, 1]"));
        }
        if let Some((lo, hi)) = self.scale_range {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::config("augment.scale_range", format!("invalid range ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// Random rescale, pad to the crop size, random crop and random horizontal
/// flip. Images are resampled bilinearly and padded with zeros; labels are
/// resampled by nearest neighbour and padded with [`IGNORE_INDEX`].
pub fn augment(sample: &SegmentationSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<SegmentationSample> {
    let (mut image, mut labels) = (sample.image.clone(), sample.labels.clone());
    if let Some((lo, hi)) = cfg.scale_range {
        let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let h = ((labels.height as f64 * s).round() as usize).max(1);
        let w = ((labels.width as f64 * s).round() as usize).max(1);
        if (h, w) != (labels.height, labels.width) {
            image = bilinear_resize(&image, h, w)?;
            labels = LabelMap::new(h, w, nearest_resize_u8(&labels.data, labels.height, labels.width, h, w));
        }
    }
    let c = cfg.crop_size;
    let (ph, pw) = (labels.height.max(c), labels.width.max(c));
    let y0 = rng.random_range(0..=ph - c);
    let x0 = rng.random_range(0..=pw - c);
    let flip = rng.random::<f64>() < cfg.hflip_prob;

    let mut out_img = Tensor::zeros([1, 3, c, c]);
    let mut out_lab = LabelMap::filled(c, c, IGNORE_INDEX);
    let (h, w) = (labels.height, labels.width);
    for y in 0..c {
        let sy = y + y0;
        if sy >= h {
            continue;
        }
        for x in 0..c {
            let sx = x + x0;
            if sx >= w {
                continue;
            }
            let dx = if flip { c - 1 - x } else { x };
            out_lab.data[y * c + dx] = labels.at(sy, sx);
            for ch in 0..3 {
                out_img.set(0, ch, y, dx, image.at(0, ch, sy, sx));
            }
        }
    }
    SegmentationSample::new(sample.id.clone(), out_img, out_lab)
}
