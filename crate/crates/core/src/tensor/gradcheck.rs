//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How a tensor-valued function is reduced to the scalar being checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Plain sum of all output elements.
    Sum,
    /// Sum of the output weighted by a fixed random tensor in `[-1, 1)`. Plain
    /// sums have identically zero gradient through normalisations.
    RandomProjection,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Inputs larger than this are checked on a random coordinate subset.
    pub max_coords: usize,
    pub seed: u64,
    pub reduction: Reduction,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: 48,
            seed: 0,
            reduction: Reduction::RandomProjection,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU and were excluded.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|r| r.skipped).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape's analytic gradient of `f` against central differences
/// `(L(x+eps) - L(x-eps)) / 2eps` for every input.
///
/// Stop-gradient values captured by [`Tape::detach`] during the reference
/// pass are replayed in the perturbed passes, so the numeric derivative is
/// taken of the same function the tape differentiates.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if cfg.eps <= 0.0 {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {}", cfg.eps)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let out_len = tape.shape(out).numel();
    if !tape.value(out).is_finite() {
        return Err(Error::Evaluation("reference forward pass".into()));
    }
    let weights: Vec<f64> = match cfg.reduction {
        Reduction::Sum => vec![1.0; out_len],
        Reduction::RandomProjection => {
            (0..out_len).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()
        }
    };
    let detached = tape.detached_values();
    let signature = tape.kink_signature();
    tape.backward_with(&[(out, weights.clone())])?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let evaluate = |perturbed: &[Tensor]| -> Result<(f64, u64)> {
        let mut t = Tape::replaying(detached.clone());
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = f(&mut t, &vs)?;
        let value = t.value(o);
        if !value.is_finite() {
            return Err(Error::Evaluation("perturbed forward pass".into()));
        }
        let loss = value.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok((loss, t.kink_signature()))
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut rep = InputReport { checked: 0, skipped: 0, max_rel_error: 0.0, worst_coord: None };
        for i in coords {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + cfg.eps;
            let (plus, sig_p) = evaluate(&work)?;
            work[k].data_mut()[i] = orig - cfg.eps;
            let (minus, sig_m) = evaluate(&work)?;
            work[k].data_mut()[i] = orig;
            if sig_p != signature || sig_m != signature {
                rep.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let err = relative_error(analytic[k][i], numeric, cfg.abs_floor);
            rep.checked += 1;
            if rep.worst_coord.is_none() || err > rep.max_rel_error {
                rep.max_rel_error = err;
                rep.worst_coord = Some(i);
            }
        }
        reports.push(rep);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { inputs: reports, max_rel_error, tol: cfg.tol, passed: max_rel_error < cfg.tol })
}
