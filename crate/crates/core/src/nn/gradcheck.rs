use super::params::NetParams;

/// Denominator floor so near-zero gradients are compared absolutely.
const RELATIVE_FLOOR: f64 = 1e-6;

/// Compare analytic gradients against central finite differences.
///
/// `f` must return the loss and add its analytic gradient into the buffers of
/// `params` (which are zeroed before each call). Every trainable scalar is probed.
/// Returns the largest `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(mut f: F, params: &mut NetParams, eps: f64) -> f64
where
    F: FnMut(&mut NetParams) -> f64,
{
    params.zero_grad();
    f(params);
    let ids: Vec<_> = params.ids().filter(|&id| params.is_trainable(id)).collect();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| params.grad(id).data().to_vec()).collect();
    let mut worst: f64 = 0.0;
    for (id, grads) in ids.into_iter().zip(analytic) {
        for (k, a) in grads.into_iter().enumerate() {
            let orig = params.value(id).data()[k];
            params.value_mut_unchecked(id).data_mut()[k] = orig + eps;
            params.zero_grad();
            let up = f(params);
            params.value_mut_unchecked(id).data_mut()[k] = orig - eps;
            params.zero_grad();
            let down = f(params);
            params.value_mut_unchecked(id).data_mut()[k] = orig;
            let n = (up - down) / (2.0 * eps);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR);
            worst = worst.max(err);
        }
    }
    params.zero_grad();
    worst
}
