//! Adaptive numerical quadrature, used as an independent cross-check for the
//! closed-form integration and expectation operators.

/// Adaptive Simpson quadrature on [a, b] to ~1e-11 absolute tolerance.
pub fn quad_1d(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), fm)
    }
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (left, flm) = simpson(f, a, fa, m, fm);
        let (right, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, flm, tol / 2.0, depth - 1)
                + recurse(f, m, fm, b, fb, right, frm, tol / 2.0, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, fm) = simpson(&f, a, fa, b, fb);
    recurse(&f, a, fa, b, fb, whole, fm, 1e-11, 40)
}

/// Iterated quadrature over a 2-D box.
pub fn quad_2d(f: impl Fn(f64, f64) -> f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    quad_1d(|x| quad_1d(|y| f(x, y), a.1, b.1), a.0, b.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_cubic_exactly() {
        let got = quad_1d(|x| x * x * x - 2.0 * x + 1.0, -1.0, 2.0);
        // antiderivative x^4/4 - x^2 + x
        let want = (4.0 - 4.0 + 2.0) - (0.25 - 1.0 - 1.0);
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn integrates_2d_product() {
        let got = quad_2d(|x, y| x * x * y * y, (-1.0, -1.0), (1.0, 1.0));
        assert!((got - 4.0 / 9.0).abs() < 1e-9);
    }
}
