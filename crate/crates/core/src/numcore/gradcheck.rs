//! Central finite differences, the gradient oracle for every differentiable
//! path in the crate.

use super::Tensor;

/// Step used by the gradient checks throughout the crate.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Relative error accepted between analytic and finite-difference gradients.
pub const GRAD_REL_TOL: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to every coordinate of
/// every tensor in `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].numel() {
            g.data_mut()[i] = central_difference(&mut f, &mut work, p, i, h);
        }
        out.push(g);
    }
    out
}

/// Central differences for a chosen subset of `(tensor, flat index)`
/// coordinates, in the order given.
pub fn finite_diff_coords<F>(
    mut f: F,
    params: &[Tensor],
    coords: &[(usize, usize)],
    h: f64,
) -> Vec<f64>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work: Vec<Tensor> = params.to_vec();
    coords
        .iter()
        .map(|&(p, i)| central_difference(&mut f, &mut work, p, i, h))
        .collect()
}

fn central_difference<F>(f: &mut F, work: &mut [Tensor], p: usize, i: usize, h: f64) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    let orig = work[p].data()[i];
    work[p].data_mut()[i] = orig + h;
    let up = f(work);
    work[p].data_mut()[i] = orig - h;
    let down = f(work);
    work[p].data_mut()[i] = orig;
    (up - down) / (2.0 * h)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`, the comparison used by all gradient
/// checks. The floor keeps checks meaningful when both gradients vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|p| p[0].item() * p[0].item(), &[x], 1e-5);
        assert!((g[0].item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn linear_function_is_exact_for_any_step() {
        let x = Tensor::from_vec(vec![0.25, -1.5]).unwrap();
        for h in [1e-1, 1e-3, 0.5] {
            let g = finite_diff_grad(
                |p| 2.0 * p[0].data()[0] - 4.0 * p[0].data()[1],
                &[x.clone()],
                h,
            );
            assert!((g[0].data()[0] - 2.0).abs() < 1e-12);
            assert!((g[0].data()[1] + 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coordinate_subset_matches_full_sweep() {
        let x = Tensor::from_vec(vec![0.3, 0.7, -0.2]).unwrap();
        let f = |p: &[Tensor]| p[0].data().iter().map(|v| v.sin()).sum::<f64>();
        let full = finite_diff_grad(f, &[x.clone()], 1e-6);
        let part = finite_diff_coords(f, &[x], &[(0, 2), (0, 0)], 1e-6);
        assert_eq!(part, vec![full[0].data()[2], full[0].data()[0]]);
    }
}
