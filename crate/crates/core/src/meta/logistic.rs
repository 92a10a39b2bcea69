use serde::{Deserialize, Serialize};

use super::optim;
use super::{sigmoid, softplus, Design, Penalty};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticModel {
    /// Minimizes the mean log loss (targets may be fractional) by full-batch
    /// gradient descent. L1 is applied through a proximal step, L2 as
    /// `lambda / 2 * |w|^2`; the bias is never penalized.
    pub fn fit(x: &Design, y: &[f64], penalty: Penalty) -> Self {
        let (n, d) = (x.rows, x.cols);
        let nf = n as f64;
        let l2 = match penalty {
            Penalty::L2(l) => l,
            _ => 0.0,
        };
        let l1 = match penalty {
            Penalty::L1(l) => l,
            _ => 0.0,
        };
        let loss = |p: &[f64], g: &mut [f64]| {
            g.iter_mut().for_each(|v| *v = 0.0);
            let mut total = 0.0;
            for i in 0..n {
                let row = x.row(i);
                let z = row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + p[d];
                total += softplus(z) - y[i] * z;
                let r = (sigmoid(z) - y[i]) / nf;
                for j in 0..d {
                    g[j] += r * row[j];
                }
                g[d] += r;
            }
            let mut value = total / nf;
            if l2 > 0.0 {
                for j in 0..d {
                    value += 0.5 * l2 * p[j] * p[j];
                    g[j] += l2 * p[j];
                }
            }
            value
        };
        let p = optim::minimize(loss, vec![0.0; d + 1], l1, d);
        Self {
            weights: p[..d].to_vec(),
            bias: p[d],
        }
    }

    pub fn logit(&self, z: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn probability(&self, z: &[f64]) -> f64 {
        sigmoid(self.logit(z))
    }
}
