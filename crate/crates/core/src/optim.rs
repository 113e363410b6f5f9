//! Small derivative-free minimisers used by the NGR and variogram fits.

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section search for a minimum of `f` on `[lo, hi]`.
/// Stops when the bracket is narrower than `tol · max(1, |hi − lo|)`.
pub fn golden_section(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    if !(hi > lo) {
        return lo;
    }
    let (mut a, mut b) = (lo, hi);
    let width = (hi - lo).max(f64::MIN_POSITIVE);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a) <= tol * width {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    // the interior optimum may still lose to an endpoint for monotone objectives
    let mid = 0.5 * (a + b);
    let mut best = (mid, f(mid));
    for x in [lo, hi] {
        let fx = f(x);
        if fx < best.1 {
            best = (x, fx);
        }
    }
    best.0
}

/// Minimises `f(x, y)` over a box: golden-section along each axis with three
/// alternations, then a shrinking 5×5 grid around the incumbent until the
/// objective improves by less than `tol`.
pub fn minimize_box_2d(
    f: &dyn Fn(f64, f64) -> f64,
    xb: (f64, f64),
    yb: (f64, f64),
    tol: f64,
) -> (f64, f64) {
    let mut x = 0.5 * (xb.0 + xb.1);
    let mut y = yb.0;
    for _ in 0..3 {
        x = golden_section(&|v| f(v, y), xb.0, xb.1, 1e-6);
        y = golden_section(&|v| f(x, v), yb.0, yb.1, 1e-6);
    }
    let mut best = f(x, y);
    let mut hx = (xb.1 - xb.0) / 20.0;
    let mut hy = (yb.1 - yb.0) / 20.0;
    for _ in 0..30 {
        let mut improved = 0.0;
        let (cx, cy) = (x, y);
        for i in -2..=2 {
            for j in -2..=2 {
                let px = (cx + i as f64 * hx).clamp(xb.0, xb.1);
                let py = (cy + j as f64 * hy).clamp(yb.0, yb.1);
                let v = f(px, py);
                if v < best {
                    improved += best - v;
                    best = v;
                    x = px;
                    y = py;
                }
            }
        }
        if improved < tol && (x, y) == (cx, cy) {
            hx *= 0.25;
            hy *= 0.25;
            if hx <= 1e-9 * (1.0 + x.abs()) && hy <= 1e-9 * (1.0 + y.abs()) {
                break;
            }
        } else if improved < tol {
            hx *= 0.5;
            hy *= 0.5;
        }
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_minimum() {
        let x = golden_section(&|x| (x - 1.3) * (x - 1.3), -5.0, 5.0, 1e-10);
        assert!((x - 1.3).abs() < 1e-6);
    }

    #[test]
    fn golden_prefers_boundary_for_monotone() {
        assert_eq!(golden_section(&|x| x, 2.0, 3.0, 1e-8), 2.0);
        assert_eq!(golden_section(&|x| -x, 2.0, 3.0, 1e-8), 3.0);
    }

    #[test]
    fn box_2d_quadratic() {
        let f = |x: f64, y: f64| {
            (x - 0.3).powi(2) + 2.0 * (y - 0.7).powi(2) + 0.5 * (x - 0.3) * (y - 0.7)
        };
        let (x, y) = minimize_box_2d(&f, (0.0, 1.0), (0.0, 1.0), 1e-12);
        assert!((x - 0.3).abs() < 1e-4 && (y - 0.7).abs() < 1e-4, "{x} {y}");
        let (x, y) = minimize_box_2d(&|x, y| x + y, (0.5, 1.0), (0.0, 1.0), 1e-12);
        assert_eq!((x, y), (0.5, 0.0));
    }
}
