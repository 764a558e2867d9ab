use super::loss::{argmax, softmax};
use crate::data::{ConfusionMatrix, LabelMap, SegmentationSample, Scores};
use crate::error::{Error, Result};
use crate::network::{Model, OUTPUT_STRIDE};
use crate::tensor::kernels::bilinear_resize;
use crate::tensor::Tensor;

/// Scale set for multi-scale testing.
pub const MS_SCALES: [f64; 8] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25];

/// Anything that maps a `(1,3,h,w)` image to `(1,K,h,w)` class probabilities.
pub trait Predictor {
    fn predict_proba(&mut self, image: &Tensor) -> Result<Tensor>;
}

impl Predictor for Model {
    /// Zero-pads to a multiple of the output stride, runs inference and crops
    /// the softmax back.
    fn predict_proba(&mut self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        let round = |v: usize| v.div_ceil(OUTPUT_STRIDE) * OUTPUT_STRIDE;
        let (ph, pw) = (round(s.h), round(s.w));
        let padded = if (ph, pw) == (s.h, s.w) {
            image.clone()
        } else {
            Tensor::from_fn([s.n, s.c, ph, pw], |n, c, y, x| if y < s.h && x < s.w { image.at(n, c, y, x) } else { 0.0 })
        };
        let probs = softmax(&self.infer(&padded)?.logits);
        if (ph, pw) == (s.h, s.w) {
            return Ok(probs);
        }
        let k = probs.shape().c;
        Ok(Tensor::from_fn([s.n, k, s.h, s.w], |n, c, y, x| probs.at(n, c, y, x)))
    }
}

/// Class probabilities averaged over every scale and, optionally, the mirror
/// of each scaled input. Each variant is resized back bilinearly.
pub fn predict_multiscale(pred: &mut dyn Predictor, image: &Tensor, scales: &[f64], mirror: bool) -> Result<Tensor> {
    if scales.is_empty() || scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Parameter(format!("scales must be a nonempty list of positive numbers, got {scales:?}")));
    }
    let s = image.shape();
    let mut sum: Option<Tensor> = None;
    let mut count = 0.0;
    for &scale in scales {
        let h = ((s.h as f64 * scale).round() as usize).max(1);
        let w = ((s.w as f64 * scale).round() as usize).max(1);
        let scaled = if (h, w) == (s.h, s.w) { image.clone() } else { bilinear_resize(image, h, w)? };
        for flip in [false, true] {
            if flip && !mirror {
                continue;
            }
            let input = if flip { scaled.hflip() } else { scaled.clone() };
            let mut p = pred.predict_proba(&input)?;
            if flip {
                p = p.hflip();
            }
            if (h, w) != (s.h, s.w) {
                p = bilinear_resize(&p, s.h, s.w)?;
            }
            match &mut sum {
                Some(acc) => {
                    if acc.shape() != p.shape() {
                        return Err(Error::Dimension(format!("prediction {} vs {}", p.shape(), acc.shape())));
                    }
                    acc.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
                }
                None => sum = Some(p),
            }
            count += 1.0;
        }
    }
    let sum = sum.expect("at least one variant");
    Ok(sum.map(|v| v / count))
}

/// Per-pixel labels from [`predict_multiscale`].
pub fn predict_labels(pred: &mut dyn Predictor, image: &Tensor, scales: &[f64], mirror: bool) -> Result<LabelMap> {
    let probs = predict_multiscale(pred, image, scales, mirror)?;
    let s = probs.shape();
    Ok(LabelMap::new(s.h, s.w, argmax(&probs)))
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub scores: Scores,
}

/// Accumulates a confusion matrix over `samples`.
pub fn evaluate(
    pred: &mut dyn Predictor,
    samples: &[SegmentationSample],
    num_classes: usize,
    scales: &[f64],
    mirror: bool,
) -> Result<EvalReport> {
    let mut confusion = ConfusionMatrix::new(num_classes);
    for sample in samples {
        let labels = predict_labels(pred, &sample.image, scales, mirror)?;
        confusion.update(&labels, &sample.labels)?;
    }
    let scores = confusion.scores()?;
    Ok(EvalReport { confusion, scores })
}
