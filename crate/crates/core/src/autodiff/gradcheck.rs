use super::{Gradients, ParameterSet};

/// Largest relative disagreement between analytic and central-difference gradients.
///
/// `eval` must be deterministic and return the loss together with its analytic
/// gradients for the current parameter values. Every entry of every parameter
/// present in the returned gradients is perturbed by `±step`. The relative
/// error per entry is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(params: &mut ParameterSet, step: f64, mut eval: F) -> f64
where
    F: FnMut(&ParameterSet) -> (f64, Gradients),
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let (_, analytic) = eval(params);
    let mut worst: f64 = 0.0;
    for (id, grad) in analytic.iter() {
        for k in 0..grad.len() {
            let orig = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = orig + step;
            let (up, _) = eval(params);
            params.value_mut(id).data_mut()[k] = orig - step;
            let (down, _) = eval(params);
            params.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
