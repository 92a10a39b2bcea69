//! Full-batch accelerated proximal gradient descent with backtracking.

/// Stopping tolerance on the (proximal) gradient norm.
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 10_000;

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Minimizes `smooth(x) + l1 * sum(|x_i|, i < penalized)`.
///
/// `smooth` returns the value and writes the gradient into its second
/// argument. Uses accelerated proximal steps with backtracking and a
/// momentum restart whenever the objective stops decreasing. Stops once the
/// gradient mapping norm drops below [`GRADIENT_TOLERANCE`] or after
/// [`MAX_ITERATIONS`] steps.
pub fn minimize<F>(smooth: F, init: Vec<f64>, l1: f64, penalized: usize) -> Vec<f64>
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    let n = init.len();
    let penalty = |p: &[f64]| l1 * p[..penalized].iter().map(|v| v.abs()).sum::<f64>();
    let mut x = init.clone();
    let mut x_prev = init;
    let mut y = x.clone();
    let mut grad = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut objective = smooth(&x, &mut scratch) + penalty(&x);
    let mut t = 1.0_f64;
    let mut step = 1.0;

    for _ in 0..MAX_ITERATIONS {
        let fy = smooth(&y, &mut grad);
        let mut accepted = false;
        let mut f_next = fy;
        for _ in 0..60 {
            for i in 0..n {
                let v = y[i] - step * grad[i];
                next[i] = if i < penalized {
                    soft_threshold(v, step * l1)
                } else {
                    v
                };
            }
            f_next = smooth(&next, &mut scratch);
            let (mut lin, mut sq) = (0.0, 0.0);
            for i in 0..n {
                let d = next[i] - y[i];
                lin += grad[i] * d;
                sq += d * d;
            }
            if f_next <= fy + lin + sq / (2.0 * step) + 1e-15 * fy.abs() {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        let mapping = y
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / step;
        let f_total = f_next + penalty(&next);
        if f_total > objective {
            // restart from the last iterate without momentum
            t = 1.0;
            y.copy_from_slice(&x);
            if mapping < GRADIENT_TOLERANCE {
                break;
            }
            continue;
        }
        std::mem::swap(&mut x_prev, &mut x);
        x.copy_from_slice(&next);
        objective = f_total;
        if mapping < GRADIENT_TOLERANCE {
            break;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        for i in 0..n {
            y[i] = x[i] + beta * (x[i] - x_prev[i]);
        }
        t = t_next;
        step *= 1.1;
    }
    x
}
