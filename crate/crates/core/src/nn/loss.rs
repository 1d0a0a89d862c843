//! Smooth L1 (Huber with unit transition) regression loss.

/// Mean smooth-L1 over all elements, accumulated in `f64`.
pub fn smooth_l1(pred: &[f32], target: &[f32]) -> f64 {
    smooth_l1_value(pred, target)
}

pub(crate) fn smooth_l1_value(pred: &[f32], target: &[f32]) -> f64 {
    assert_eq!(pred.len(), target.len(), "smooth_l1 length mismatch");
    if pred.is_empty() {
        return 0.0;
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = (p as f64 - t as f64).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum();
    sum / pred.len() as f64
}

/// Gradient of the mean loss with respect to `pred`, scaled by `upstream`.
pub fn smooth_l1_grad(pred: &[f32], target: &[f32], upstream: f32) -> Vec<f32> {
    let n = pred.len().max(1) as f32;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            let g = if d.abs() < 1.0 { d } else { d.signum() };
            g * upstream / n
        })
        .collect()
}
