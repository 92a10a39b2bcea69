use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, softplus, Design};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 50,
            epochs: 400,
            learning_rate: 0.01,
        }
    }
}

/// One hidden tanh layer. The output unit is linear for regression and a
/// sigmoid for classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub logistic: bool,
    /// `inputs x hidden`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub inputs: usize,
    /// Training objective after every epoch.
    pub train_loss: Vec<f64>,
}

fn tanh(x: f64) -> f64 {
    let t = (-2.0 * x.abs()).exp();
    ((1.0 - t) / (1.0 + t)).copysign(x)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], rate: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

impl MlpModel {
    /// Full-batch Adam on the mean loss plus `lambda/2 * |W|^2` over both
    /// weight matrices. Weights start from a seeded Xavier-uniform draw.
    pub fn fit(
        x: &Design,
        y: &[f64],
        logistic: bool,
        lambda: f64,
        config: &MlpConfig,
        seed: u64,
    ) -> Self {
        let (n, d, h) = (x.rows, x.cols, config.hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit1 = (6.0 / (d + h).max(1) as f64).sqrt();
        let limit2 = (6.0 / (h + 1) as f64).sqrt();
        let mut w1 = Array2::from_shape_fn((d, h), |_| rng.random_range(-limit1..=limit1));
        let mut w2 = Array1::from_shape_fn(h, |_| rng.random_range(-limit2..=limit2));
        let mut b1 = Array1::<f64>::zeros(h);
        let mean = y.iter().sum::<f64>() / n as f64;
        let mut b2 = if logistic {
            let p = mean.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        } else {
            mean
        };

        let xs = ArrayView2::from_shape((n, d), &x.x).expect("design shape");
        let ys = Array1::from_vec(y.to_vec());
        let mut opt_w1 = Adam::new(d * h);
        let mut opt_b1 = Adam::new(h);
        let mut opt_w2 = Adam::new(h);
        let mut opt_b2 = Adam::new(1);
        let mut train_loss = Vec::with_capacity(config.epochs);
        let inv_n = 1.0 / n as f64;

        for _ in 0..config.epochs {
            let mut hidden = xs.dot(&w1);
            for mut row in hidden.rows_mut() {
                row.zip_mut_with(&b1, |a, b| *a = tanh(*a + b));
            }
            let out = hidden.dot(&w2) + b2;
            // dL/d(out) for both losses is (prediction - target) / n.
            let (loss, delta) = if logistic {
                let loss = out
                    .iter()
                    .zip(&ys)
                    .map(|(z, t)| softplus(*z) - t * z)
                    .sum::<f64>()
                    * inv_n;
                (loss, (out.mapv(sigmoid) - &ys) * inv_n)
            } else {
                let r = &out - &ys;
                (0.5 * r.dot(&r) * inv_n, r * inv_n)
            };
            let penalty = 0.5 * lambda * (w1.iter().map(|v| v * v).sum::<f64>() + w2.dot(&w2));
            train_loss.push(loss + penalty);

            let g_w2 = hidden.t().dot(&delta) + &(&w2 * lambda);
            let g_b2 = delta.sum();
            let mut back = hidden;
            for (mut row, dl) in back.rows_mut().into_iter().zip(&delta) {
                row.zip_mut_with(&w2, |a, w| *a = dl * w * (1.0 - *a * *a));
            }
            let g_w1 = xs.t().dot(&back) + &(&w1 * lambda);
            let g_b1 = back.sum_axis(Axis(0));

            opt_w1.step(
                w1.as_slice_mut().expect("contiguous"),
                g_w1.as_standard_layout().as_slice().expect("contiguous"),
                config.learning_rate,
            );
            opt_b1.step(b1.as_slice_mut().expect("contiguous"), g_b1.as_slice().expect("contiguous"), config.learning_rate);
            opt_w2.step(w2.as_slice_mut().expect("contiguous"), g_w2.as_slice().expect("contiguous"), config.learning_rate);
            let mut b = [b2];
            opt_b2.step(&mut b, &[g_b2], config.learning_rate);
            b2 = b[0];
        }

        Self {
            logistic,
            w1: w1.into_raw_vec_and_offset().0,
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2,
            inputs: d,
            train_loss,
        }
    }

    pub fn raw(&self, z: &[f64]) -> f64 {
        let h = self.b1.len();
        let mut out = self.b2;
        for k in 0..h {
            let mut a = self.b1[k];
            for (i, zi) in z.iter().enumerate() {
                a += zi * self.w1[i * h + k];
            }
            out += self.w2[k] * tanh(a);
        }
        out
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        let raw = self.raw(z);
        if self.logistic {
            sigmoid(raw)
        } else {
            raw
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xor(n: usize) -> (Design, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let a = ((i * 37) % 17) as f64 / 8.0 - 1.0;
            let b = ((i * 11) % 13) as f64 / 6.0 - 1.0;
            x.extend([a, b]);
            y.push(if a * b > 0.0 { 1.0 } else { 0.0 });
        }
        (Design { rows: n, cols: 2, x }, y)
    }

    #[test]
    fn learns_a_nonlinear_boundary() {
        let (x, y) = xor(200);
        let config = MlpConfig {
            epochs: 600,
            ..MlpConfig::default()
        };
        let m = MlpModel::fit(&x, &y, true, 1e-4, &config, 3);
        let hits = (0..x.rows)
            .filter(|&i| (m.predict(x.row(i)) >= 0.5) == (y[i] == 1.0))
            .count();
        assert!(hits as f64 / x.rows as f64 > 0.9, "{hits}");
        assert!(m.train_loss.last().unwrap() < &m.train_loss[0]);
    }

    #[test]
    fn forward_pass_matches_batch_loss() {
        let (x, y) = xor(30);
        let config = MlpConfig {
            epochs: 1,
            hidden: 4,
            learning_rate: 0.0,
        };
        let m = MlpModel::fit(&x, &y, false, 0.0, &config, 1);
        let loss: f64 = (0..x.rows)
            .map(|i| 0.5 * (m.predict(x.row(i)) - y[i]).powi(2))
            .sum::<f64>()
            / x.rows as f64;
        assert!((loss - m.train_loss[0]).abs() < 1e-12);
    }

    #[test]
    fn seed_changes_initialization() {
        let (x, y) = xor(20);
        let config = MlpConfig {
            epochs: 2,
            ..MlpConfig::default()
        };
        let a = MlpModel::fit(&x, &y, true, 0.0, &config, 1);
        let b = MlpModel::fit(&x, &y, true, 0.0, &config, 2);
        assert_ne!(a.w1, b.w1);
        assert_eq!(a, MlpModel::fit(&x, &y, true, 0.0, &config, 1));
    }
}
