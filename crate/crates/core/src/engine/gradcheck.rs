use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Parameter;

/// A differentiable model fragment in 64-bit precision.
pub trait GradCheck {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>>;

    /// Loss value without touching gradients.
    fn loss(&mut self) -> f64;

    /// Loss value with gradients accumulated into the parameters.
    fn loss_and_grad(&mut self) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Base step; the step for an entry is `step * max(1, |value|)`.
    pub step: f64,
    /// Gradients below this magnitude are compared in absolute terms.
    pub abs_floor: f64,
    /// Entries checked per parameter; `None` checks all of them.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            abs_floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

/// Compares analytic gradients with central differences. Failures show up
/// in the report; nothing panics on a mismatch.
pub fn finite_difference_check<M: GradCheck + ?Sized>(
    model: &mut M,
    opts: GradCheckOptions,
) -> GradReport {
    for p in model.parameters_mut() {
        p.zero_grad();
    }
    model.loss_and_grad();
    let analytic: Vec<Vec<f64>> = model
        .parameters_mut()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradReport::default();
    for (pi, grads) in analytic.iter().enumerate() {
        if grads.is_empty() {
            continue;
        }
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < grads.len() => {
                let mut e = sample(&mut rng, grads.len(), k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..grads.len()).collect(),
        };
        let name = model.parameters_mut()[pi].name.clone();
        let mut worst = (0.0f64, entries[0]);
        for &i in &entries {
            let orig = model.parameters_mut()[pi].value.data()[i];
            let h = opts.step * orig.abs().max(1.0);
            model.parameters_mut()[pi].value.data_mut()[i] = orig + h;
            let up = model.loss();
            model.parameters_mut()[pi].value.data_mut()[i] = orig - h;
            let down = model.loss();
            model.parameters_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            if rel > worst.0 || rel.is_nan() {
                worst = (if rel.is_nan() { f64::INFINITY } else { rel }, i);
            }
        }
        report.params.push(ParamReport {
            name,
            checked: entries.len(),
            max_rel_err: worst.0,
            worst_index: worst.1,
        });
    }
    report
}
