//! Central finite differences, used as an independent gradient oracle.

/// Central-difference gradient of `f` at `point` with step `h`.
///
/// Panics if `h` is not positive.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = point.to_vec();
    (0..point.len())
        .map(|i| {
            let x = point[i];
            probe[i] = x + h;
            let up = f(&probe);
            probe[i] = x - h;
            let down = f(&probe);
            probe[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Second derivative of a scalar function by the three-point stencil.
pub fn second_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    assert!(h > 0.0, "finite-difference step must be positive");
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

/// `|a - b| <= rel * max(|a|, |b|) + abs_floor`
pub fn rel_close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs_floor
}

/// Error of `a` against `b` measured on the same scale as [`rel_close`]:
/// the smallest `rel` for which `rel_close(a, b, rel, abs_floor)` holds.
pub fn rel_error(a: f64, b: f64, abs_floor: f64) -> f64 {
    let excess = ((a - b).abs() - abs_floor).max(0.0);
    let scale = a.abs().max(b.abs());
    if excess == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        excess / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let g = central_difference(|x| x[0] * x[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_form_matches_analytic() {
        // symmetric A: grad of x^T A x is 2 A x
        let a = [[2.0, 0.5, -1.0], [0.5, 1.0, 0.25], [-1.0, 0.25, 3.0]];
        let x = [0.3, -1.2, 0.7];
        let f = |p: &[f64]| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += p[i] * a[i][j] * p[j];
                }
            }
            s
        };
        let g = central_difference(f, &x, 1e-5);
        for i in 0..3 {
            let analytic: f64 = 2.0 * (0..3).map(|j| a[i][j] * x[j]).sum::<f64>();
            assert!((g[i] - analytic).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_function() {
        let g = central_difference(|_| 4.2, &[1.0, -2.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn second_difference_of_cubic() {
        let d2 = second_difference(|x| x * x * x, 2.0, 1e-4);
        assert!((d2 - 12.0).abs() < 1e-5);
    }
}
