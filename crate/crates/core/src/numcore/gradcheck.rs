//! Central finite-difference gradient checking.
//!
//! The function under test maps inputs to an output tensor of any shape. It is
//! reduced to a scalar with a fixed random weighting: on the tape for the
//! analytic gradient, and in f64 outside the tape for the numeric estimate, so
//! the reduction itself adds no rounding to the difference quotient.

use rand::seq::index::sample;
use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f32,
    /// Coordinates sampled per input tensor (all of them when smaller).
    pub samples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            samples: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl InputReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the sampled
    /// coordinates; zero when both vanish.
    pub fn rel_error(&self) -> f64 {
        let diff = norm(self.analytic.iter().zip(&self.numeric).map(|(a, n)| a - n));
        let scale = norm(self.analytic.iter().copied()).max(norm(self.numeric.iter().copied()));
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    pub fn max_abs_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max)
    }
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|v| v * v).sum::<f64>().sqrt()
}

/// Compare tape gradients against central differences for every input whose
/// `requires_grad` flag is set.
pub fn check<F, R>(inputs: &[Tensor], f: F, cfg: GradCheckConfig, rng: &mut R) -> Result<Vec<InputReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |inputs: &[Tensor]| -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    };

    let probe = eval(inputs)?;
    let weights: Vec<f32> = (0..probe.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weigh = |t: &Tensor| -> f64 {
        t.data()
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| f64::from(x) * f64::from(w))
            .sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let w = tape.constant(Tensor::new(probe.shape().to_vec(), weights.clone())?);
    let weighted = tape.mul(out, w)?;
    let loss = tape.sum(weighted)?;
    let grads = tape.backward(loss)?;

    let mut reports = Vec::new();
    for (index, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let n = input.numel();
        let coords: Vec<usize> = if n <= cfg.samples {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, cfg.samples).into_vec();
            c.sort_unstable();
            c
        };
        let zeros = vec![0.0; n];
        let g = grads.get(vars[index]).unwrap_or(&zeros);
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let mut shifted = inputs.to_vec();
            let base = input.data()[c];
            shifted[index].data_mut()[c] = base + cfg.eps;
            let plus = weigh(&eval(&shifted)?);
            shifted[index].data_mut()[c] = base - cfg.eps;
            let minus = weigh(&eval(&shifted)?);
            analytic.push(f64::from(g[c]));
            numeric.push((plus - minus) / (2.0 * f64::from(cfg.eps)));
        }
        reports.push(InputReport {
            index,
            coords,
            analytic,
            numeric,
        });
    }
    Ok(reports)
}
