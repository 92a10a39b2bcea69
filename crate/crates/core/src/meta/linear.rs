use serde::{Deserialize, Serialize};

use super::optim;
use super::{Design, Penalty};

/// Relative diagonal jitter added to the normal equations.
const RIDGE_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    /// Least squares on standardized features. Without a penalty or with L2
    /// the normal equations are solved directly; L1 uses proximal gradient
    /// descent on the halved mean squared error.
    pub fn fit(x: &Design, y: &[f64], penalty: Penalty) -> Self {
        match penalty {
            Penalty::None => Self::normal_equations(x, y, 0.0),
            Penalty::L2(lambda) => Self::normal_equations(x, y, lambda),
            Penalty::L1(lambda) => Self::lasso(x, y, lambda),
        }
    }

    fn normal_equations(x: &Design, y: &[f64], lambda: f64) -> Self {
        let (n, d) = (x.rows, x.cols);
        let nf = n as f64;
        let y_mean = y.iter().sum::<f64>() / nf;
        let mut x_mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in x_mean.iter_mut().zip(x.row(i)) {
                *m += v / nf;
            }
        }
        // Centered gram matrix and right-hand side, scaled by 1/n.
        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        let mut centered = vec![0.0; d];
        for i in 0..n {
            for (c, (v, m)) in centered.iter_mut().zip(x.row(i).iter().zip(&x_mean)) {
                *c = v - m;
            }
            let dy = y[i] - y_mean;
            for a in 0..d {
                rhs[a] += centered[a] * dy / nf;
                for b in 0..=a {
                    gram[a * d + b] += centered[a] * centered[b] / nf;
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                gram[b * d + a] = gram[a * d + b];
            }
            gram[a * d + a] += lambda + RIDGE_JITTER;
        }
        let weights = cholesky_solve(&mut gram, &rhs, d);
        let bias = y_mean - weights.iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>();
        Self { weights, bias }
    }

    fn lasso(x: &Design, y: &[f64], lambda: f64) -> Self {
        let (n, d) = (x.rows, x.cols);
        let nf = n as f64;
        let loss = |p: &[f64], g: &mut [f64]| {
            g.iter_mut().for_each(|v| *v = 0.0);
            let mut total = 0.0;
            for i in 0..n {
                let row = x.row(i);
                let r = row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + p[d] - y[i];
                total += r * r;
                for j in 0..d {
                    g[j] += r * row[j] / nf;
                }
                g[d] += r / nf;
            }
            total / (2.0 * nf)
        };
        let p = optim::minimize(loss, vec![0.0; d + 1], lambda, d);
        Self {
            weights: p[..d].to_vec(),
            bias: p[d],
        }
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Solves `a x = b` for symmetric positive definite `a` (overwritten with
/// its Cholesky factor).
fn cholesky_solve(a: &mut [f64], b: &[f64], d: usize) -> Vec<f64> {
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        let diag = diag.max(f64::MIN_POSITIVE).sqrt();
        a[j * d + j] = diag;
        for i in j + 1..d {
            let mut v = a[i * d + j];
            for k in 0..j {
                v -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = v / diag;
        }
    }
    let mut z = vec![0.0; d];
    for i in 0..d {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * d + k] * z[k];
        }
        z[i] = v / a[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut v = z[i];
        for k in i + 1..d {
            v -= a[k * d + i] * x[k];
        }
        x[i] = v / a[i * d + i];
    }
    x
}
