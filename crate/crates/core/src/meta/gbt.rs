use serde::{Deserialize, Serialize};

use super::{sigmoid, softplus, Design};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtConfig {
    pub stages: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            stages: 100,
            max_depth: 3,
            learning_rate: 0.1,
            min_samples_leaf: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

/// A least-squares regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, z: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if z[feature] <= threshold { left } else { right },
            }
        }
    }
}

/// Stagewise additive trees. Regression fits residuals under squared loss;
/// classification fits the negative log-loss gradient on the logit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub logistic: bool,
    /// Initial prediction: target mean (regression) or its log-odds.
    pub base: f64,
    pub learning_rate: f64,
    pub trees: Vec<RegressionTree>,
    /// Training loss after initialization and after every stage.
    pub train_loss: Vec<f64>,
}

struct TreeBuilder<'a> {
    x: &'a Design,
    /// Row indices sorted by each feature.
    sorted: Vec<Vec<u32>>,
    config: &'a GbtConfig,
}

impl<'a> TreeBuilder<'a> {
    fn new(x: &'a Design, config: &'a GbtConfig) -> Self {
        let sorted = (0..x.cols)
            .map(|j| {
                let mut idx: Vec<u32> = (0..x.rows as u32).collect();
                idx.sort_by(|&a, &b| {
                    x.row(a as usize)[j]
                        .total_cmp(&x.row(b as usize)[j])
                        .then(a.cmp(&b))
                });
                idx
            })
            .collect();
        Self { x, sorted, config }
    }

    fn build(&self, target: &[f64]) -> RegressionTree {
        let mut tree = RegressionTree { nodes: Vec::new() };
        let mut member = vec![u32::MAX; self.x.rows];
        let all: Vec<u32> = (0..self.x.rows as u32).collect();
        self.grow(&mut tree, &mut member, all, target, 0);
        tree
    }

    fn grow(
        &self,
        tree: &mut RegressionTree,
        member: &mut [u32],
        rows: Vec<u32>,
        target: &[f64],
        depth: usize,
    ) -> usize {
        let at = tree.nodes.len();
        let n = rows.len();
        let sum: f64 = rows.iter().map(|&i| target[i as usize]).sum();
        tree.nodes.push(Node::Leaf(sum / n as f64));
        let min_leaf = self.config.min_samples_leaf.max(1);
        if depth >= self.config.max_depth || n < 2 * min_leaf {
            return at;
        }
        for &i in &rows {
            member[i as usize] = at as u32;
        }
        let parent_score = sum * sum / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        for (j, order) in self.sorted.iter().enumerate() {
            let (mut left_n, mut left_sum) = (0usize, 0.0);
            let mut prev: Option<f64> = None;
            for &i in order {
                if member[i as usize] != at as u32 {
                    continue;
                }
                let v = self.x.row(i as usize)[j];
                if let Some(p) = prev {
                    if v > p && left_n >= min_leaf && n - left_n >= min_leaf {
                        let right_sum = sum - left_sum;
                        let score = left_sum * left_sum / left_n as f64
                            + right_sum * right_sum / (n - left_n) as f64;
                        let gain = score - parent_score;
                        if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                            best = Some((gain, j, 0.5 * (p + v)));
                        }
                    }
                }
                left_n += 1;
                left_sum += target[i as usize];
                prev = Some(v);
            }
        }
        let Some((_, feature, threshold)) = best else {
            return at;
        };
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows
            .into_iter()
            .partition(|&i| self.x.row(i as usize)[feature] <= threshold);
        let left = self.grow(tree, member, left_rows, target, depth + 1);
        let right = self.grow(tree, member, right_rows, target, depth + 1);
        tree.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

fn mean_loss(logistic: bool, f: &[f64], y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if logistic {
        f.iter().zip(y).map(|(z, t)| softplus(*z) - t * z).sum::<f64>() / n
    } else {
        f.iter().zip(y).map(|(z, t)| (t - z) * (t - z)).sum::<f64>() / n
    }
}

impl GbtModel {
    pub fn fit(x: &Design, y: &[f64], logistic: bool, config: &GbtConfig) -> Self {
        let n = y.len();
        let mean = y.iter().sum::<f64>() / n as f64;
        let base = if logistic {
            let p = mean.clamp(1e-12, 1.0 - 1e-12);
            (p / (1.0 - p)).ln()
        } else {
            mean
        };
        let mut f = vec![base; n];
        let mut train_loss = vec![mean_loss(logistic, &f, y)];
        let builder = TreeBuilder::new(x, config);
        let mut trees = Vec::with_capacity(config.stages);
        let mut residual = vec![0.0; n];
        for _ in 0..config.stages {
            for i in 0..n {
                residual[i] = if logistic { y[i] - sigmoid(f[i]) } else { y[i] - f[i] };
            }
            let tree = builder.build(&residual);
            for i in 0..n {
                f[i] += config.learning_rate * tree.predict(x.row(i));
            }
            train_loss.push(mean_loss(logistic, &f, y));
            trees.push(tree);
        }
        Self {
            logistic,
            base,
            learning_rate: config.learning_rate,
            trees,
            train_loss,
        }
    }

    pub fn raw(&self, z: &[f64]) -> f64 {
        self.base
            + self.learning_rate * self.trees.iter().map(|t| t.predict(z)).sum::<f64>()
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
