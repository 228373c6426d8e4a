//! Finite-difference oracles for the analytic gradients.

use super::network::ChildNetwork;
use super::tensor::Tensor;
use crate::error::Result;

/// Central differences `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let plus = f(&probe);
            probe[i] = x[i] - eps;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Largest elementwise `|a − n| / max(|a|, |n|, floor)`. The floor keeps
/// coordinates whose true gradient is (numerically) zero from dividing by noise.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs()).max(floor);
            if scale == 0.0 {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub params_checked: usize,
}

/// Deterministic probe weights in [-1, 1) for the scalar loss `Σ r ⊙ logits`.
fn probe_weights(len: usize) -> Vec<f64> {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    (0..len)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Compares the `f32` backward pass of `net` against central differences of the
/// same network evaluated in `f64`, for the loss `Σ r ⊙ logits` with fixed
/// pseudo-random `r`.
pub fn check_network(
    net: &ChildNetwork<f32>,
    x: &Tensor<f32>,
    eps: f64,
    floor: f64,
) -> Result<NetworkGradCheck> {
    let mut analytic_net = net.clone();
    let logits = analytic_net.forward(x)?;
    let r = probe_weights(logits.len());
    let r32: Vec<f32> = r.iter().map(|&v| v as f32).collect();
    let grads = analytic_net.backward(&Tensor::from_vec(logits.shape(), r32)?)?;
    let analytic: Vec<f64> = grads.flatten().iter().map(|&g| g as f64).collect();

    let base = net.cast::<f64>();
    let x64 = x.cast::<f64>();
    let flat: Vec<f64> = base.params().iter().flatten().copied().collect();
    let sizes: Vec<usize> = base.params().iter().map(Vec::len).collect();
    let mut probe_net = base.clone();
    let mut failure = None;
    let numeric = central_difference(
        |theta| {
            let mut it = theta.iter();
            for (p, &len) in probe_net.params_mut().iter_mut().zip(&sizes) {
                for (v, t) in p.iter_mut().zip(it.by_ref().take(len)) {
                    *v = *t;
                }
            }
            match probe_net.forward(&x64) {
                Ok(l) => l.data().iter().zip(&r).map(|(a, b)| a * b).sum(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &flat,
        eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let max_abs_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    Ok(NetworkGradCheck {
        max_rel_error: max_relative_error(&analytic, &numeric, floor),
        max_abs_error,
        params_checked: flat.len(),
    })
}
