//! Central finite-difference check of analytic gradients.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Objective value at the current tensors plus a signature of the
/// piecewise-linear regime (ReLU masks, pooling argmaxes) it was computed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub pattern: u64,
}

/// Anything that exposes a scalar objective over a set of tensors along
/// with its analytic gradient.
pub trait GradCheckable {
    fn tensors(&self) -> &[Tensor];
    fn tensors_mut(&mut self) -> &mut [Tensor];
    fn evaluate(&self) -> Result<Probe>;
    /// One gradient per entry of [`tensors`](Self::tensors), same shapes.
    fn gradients(&self) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub epsilon: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            epsilon: 1e-4,
            max_entries_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose perturbation crossed a ReLU or pooling kink; excluded
    /// because the central difference is not a derivative there.
    pub skipped_kinks: usize,
    /// `(tensor index, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn finite_difference_gradcheck<F: GradCheckable + ?Sized>(
    fragment: &mut F,
    options: &GradcheckOptions,
) -> Result<GradcheckReport> {
    if !(options.epsilon > 0.0) {
        return Err(Error::Argument("gradcheck epsilon must be positive".into()));
    }
    let analytic = fragment.gradients()?;
    if analytic.len() != fragment.tensors().len() {
        return Err(Error::dim(format!(
            "{} gradients for {} tensors",
            analytic.len(),
            fragment.tensors().len()
        )));
    }
    for (t, g) in fragment.tensors().iter().zip(&analytic) {
        t.same_shape(g, "analytic gradient")?;
    }
    let base = fragment.evaluate()?;
    let mut rng = Rng::new(options.seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    let eps = options.epsilon;
    for ti in 0..analytic.len() {
        let len = analytic[ti].len();
        let entries = pick_entries(len, options.max_entries_per_tensor, &mut rng);
        for idx in entries {
            let original = fragment.tensors()[ti].data()[idx];
            fragment.tensors_mut()[ti].data_mut()[idx] = original + eps;
            let plus = fragment.evaluate();
            fragment.tensors_mut()[ti].data_mut()[idx] = original - eps;
            let minus = fragment.evaluate();
            fragment.tensors_mut()[ti].data_mut()[idx] = original;
            let (plus, minus) = (plus?, minus?);
            if plus.pattern != base.pattern || minus.pattern != base.pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * eps);
            let err = relative_error(analytic[ti].data()[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, idx));
            }
        }
    }
    Ok(report)
}

fn pick_entries(len: usize, limit: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    match limit {
        Some(k) if k < len => {
            // Partial Fisher-Yates: the first k slots become a uniform sample.
            for i in 0..k {
                let j = i + rng.below((len - i) as u64) as usize;
                all.swap(i, j);
            }
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => all,
    }
}

/// Feeds a stable 64-bit FNV-1a hash, used for activation-pattern signatures.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PatternHasher(u64);

impl PatternHasher {
    pub(crate) fn new() -> Self {
        PatternHasher(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, value: u64) {
        for byte in value.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(x) = sum(x^3), gradient 3x^2.
    struct Cubic(Vec<Tensor>);

    impl GradCheckable for Cubic {
        fn tensors(&self) -> &[Tensor] {
            &self.0
        }
        fn tensors_mut(&mut self) -> &mut [Tensor] {
            &mut self.0
        }
        fn evaluate(&self) -> Result<Probe> {
            Ok(Probe {
                loss: self.0[0].data().iter().map(|v| v * v * v).sum(),
                pattern: 0,
            })
        }
        fn gradients(&self) -> Result<Vec<Tensor>> {
            let d = self.0[0].data().iter().map(|v| 3.0 * v * v).collect();
            Ok(vec![Tensor::new(self.0[0].shape().to_vec(), d)?])
        }
    }

    #[test]
    fn cubic_passes() {
        let mut f = Cubic(vec![Tensor::new(vec![3], vec![0.5, -0.3, 0.9]).unwrap()]);
        let r = finite_difference_gradcheck(&mut f, &GradcheckOptions::default()).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        // tensors restored
        assert_eq!(f.0[0].data(), &[0.5, -0.3, 0.9]);
    }

    #[test]
    fn entry_sampling_is_bounded_and_distinct() {
        let mut rng = Rng::new(5);
        let picked = pick_entries(100, Some(10), &mut rng);
        assert_eq!(picked.len(), 10);
        let mut d = picked.clone();
        d.dedup();
        assert_eq!(d.len(), 10);
        assert_eq!(pick_entries(4, Some(10), &mut rng), vec![0, 1, 2, 3]);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
