//! Central finite-difference gradient checking.
//!
//! Used by unit tests and the acceptance suite. The derivative is estimated
//! from the double-precision loss shadow at `w ± h`; sampled coordinates are
//! restricted to those whose reverse-mode gradient is not negligibly small
//! relative to the largest one, since the quotient is dominated by f32
//! rounding noise below that.

use super::params::{ParamId, ParamSet};
use super::tape::{NodeId, Tape};
use crate::error::Result;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub autodiff: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_err(&self) -> f64 {
        (self.autodiff - self.numeric).abs() / self.autodiff.abs().max(self.numeric.abs())
    }
}

pub fn worst_rel_err(checks: &[GradCheck]) -> f64 {
    checks.iter().map(|c| c.rel_err()).fold(0.0, f64::max)
}

/// Compares reverse-mode gradients against central finite differences for up
/// to `n_samples` randomly chosen parameter coordinates.
pub fn check_gradients<F>(
    params: &ParamSet,
    build_loss: F,
    n_samples: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradCheck>>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<NodeId>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build_loss(p, &mut tape)?;
        Ok(tape.scalar_f64(loss))
    };

    // Reverse-mode gradients.
    let mut work = params.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let loss = build_loss(&work, &mut tape)?;
    let grads = tape.backward(loss)?;
    tape.accumulate_param_grads(&grads, &mut work);

    let mut coords: Vec<(ParamId, usize, f64)> = Vec::new();
    let mut max_abs = 0.0f64;
    for (id, entry) in work.iter() {
        for (idx, &g) in entry.grad.data().iter().enumerate() {
            let ga = g.abs() as f64;
            max_abs = max_abs.max(ga);
            coords.push((id, idx, g as f64));
        }
    }
    let floor = (max_abs * 1e-3).max(1e-9);
    let mut candidates: Vec<(ParamId, usize, f64)> = coords
        .into_iter()
        .filter(|&(_, _, g)| g.abs() >= floor)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(n_samples);

    let mut out = Vec::with_capacity(candidates.len());
    for (id, idx, ad) in candidates {
        let mut plus = params.clone();
        plus.value_mut(id).data_mut()[idx] += h as f32;
        let lp = eval(&plus)?;
        let mut minus = params.clone();
        minus.value_mut(id).data_mut()[idx] -= h as f32;
        let lm = eval(&minus)?;
        out.push(GradCheck {
            name: params.entry(id).name.clone(),
            index: idx,
            autodiff: ad,
            numeric: (lp - lm) / (2.0 * h),
        });
    }
    Ok(out)
}
