use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OhemConfig {
    /// Pixels whose true-class probability is below this are hard.
    pub threshold: f64,
    /// Lower bound on the number of pixels averaged.
    pub min_kept: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub ignore_index: u8,
    pub aux_weight: f64,
    pub ohem: Option<OhemConfig>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { ignore_index: crate::data::IGNORE_INDEX, aux_weight: 0.4, ohem: None }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the logits.
    pub grad: Vec<f64>,
    pub kept: usize,
}

/// Per-pixel softmax over the channel axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let plane = s.plane();
    let mut out = logits.clone();
    let d = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for i in 0..plane {
            let idx = |k: usize| base + k * plane + i;
            let m = (0..s.c).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..s.c {
                let e = (d[idx(k)] - m).exp();
                d[idx(k)] = e;
                z += e;
            }
            for k in 0..s.c {
                d[idx(k)] /= z;
            }
        }
    }
    out
}

/// Argmax over the channel axis, first maximum on ties.
pub fn argmax(scores: &Tensor) -> Vec<u8> {
    let s = scores.shape();
    let plane = s.plane();
    let d = scores.data();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for i in 0..plane {
            let mut best = 0;
            for k in 1..s.c {
                if d[(n * s.c + k) * plane + i] > d[(n * s.c + best) * plane + i] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

struct PixelTerms {
    probs: Tensor,
    /// `(pixel index, label, -log p_label)` for every non-ignored pixel.
    valid: Vec<(usize, usize, f64)>,
}

fn pixel_terms(logits: &Tensor, labels: &[u8], ignore: u8) -> Result<PixelTerms> {
    let s = logits.shape();
    if labels.len() != s.n * s.plane() {
        return Err(Error::Dimension(format!("{} labels for logits {s}", labels.len())));
    }
    let plane = s.plane();
    let probs = softmax(logits);
    let d = logits.data();
    let mut valid = Vec::new();
    for (p, &l) in labels.iter().enumerate() {
        if l == ignore {
            continue;
        }
        let l = l as usize;
        if l >= s.c {
            return Err(Error::Data(format!("label {l} outside 0..{}", s.c)));
        }
        let (n, i) = (p / plane, p % plane);
        let at = |k: usize| d[(n * s.c + k) * plane + i];
        let m = (0..s.c).map(at).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..s.c).map(|k| (at(k) - m).exp()).sum::<f64>().ln();
        valid.push((p, l, lse - at(l)));
    }
    if valid.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    Ok(PixelTerms { probs, valid })
}

fn average(logits: &Tensor, probs: &Tensor, kept: &[(usize, usize, f64)]) -> LossOutput {
    let s = logits.shape();
    let plane = s.plane();
    let count = kept.len() as f64;
    let mut grad = vec![0.0; logits.numel()];
    let mut loss = 0.0;
    for &(p, l, nll) in kept {
        loss += nll;
        let (n, i) = (p / plane, p % plane);
        for k in 0..s.c {
            let idx = (n * s.c + k) * plane + i;
            grad[idx] = (probs.data()[idx] - (k == l) as u8 as f64) / count;
        }
    }
    LossOutput { loss: loss / count, grad, kept: kept.len() }
}

/// Mean cross-entropy over non-ignored pixels.
pub fn ce_loss(logits: &Tensor, labels: &[u8], ignore: u8) -> Result<LossOutput> {
    let t = pixel_terms(logits, labels, ignore)?;
    Ok(average(logits, &t.probs, &t.valid))
}

/// Cross-entropy over the hard pixels only: those whose true-class
/// probability is below the threshold, topped up to `min_kept` with the
/// lowest-probability pixels (raster order on ties). A threshold of 1 or
/// more keeps every pixel.
pub fn ohem_loss(logits: &Tensor, labels: &[u8], cfg: &LossConfig) -> Result<LossOutput> {
    let Some(ohem) = cfg.ohem else {
        return ce_loss(logits, labels, cfg.ignore_index);
    };
    if !(ohem.threshold > 0.0) || ohem.min_kept == 0 {
        return Err(Error::Parameter(format!(
            "OHEM needs threshold > 0 and min_kept >= 1, got {} and {}",
            ohem.threshold, ohem.min_kept
        )));
    }
    let t = pixel_terms(logits, labels, cfg.ignore_index)?;
    if ohem.threshold >= 1.0 {
        return Ok(average(logits, &t.probs, &t.valid));
    }
    let s = logits.shape();
    let plane = s.plane();
    let prob = |p: usize, l: usize| t.probs.data()[((p / plane) * s.c + l) * plane + p % plane];
    let hard: Vec<_> = t.valid.iter().copied().filter(|&(p, l, _)| prob(p, l) < ohem.threshold).collect();
    let kept = if hard.len() >= ohem.min_kept {
        hard
    } else {
        let mut order = t.valid.clone();
        order.sort_by(|a, b| prob(a.0, a.1).total_cmp(&prob(b.0, b.1)).then(a.0.cmp(&b.0)));
        order.truncate(ohem.min_kept);
        order.sort_by_key(|e| e.0);
        order
    };
    Ok(average(logits, &t.probs, &kept))
}
