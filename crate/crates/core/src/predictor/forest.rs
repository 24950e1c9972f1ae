//! Bagged Gini decision trees with class weights.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PredictorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features tried per split; `None` means ⌈√d⌉.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    /// Weight of class 0 and class 1.
    pub class_weights: [f64; 2],
    pub min_samples_split: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 10,
            max_features: None,
            bootstrap: true,
            class_weights: [1.0, 2.0],
            min_samples_split: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        vote: u8,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn vote(&self, x: &[f64]) -> u8 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { vote } => return *vote,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub params: ForestParams,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl TreeEnsemble {
    /// Fraction of trees voting class 1.
    pub fn score(&self, x: &[f64]) -> f64 {
        let ones: usize = self.trees.iter().map(|t| t.vote(x) as usize).sum();
        ones as f64 / self.trees.len() as f64
    }
}

fn gini(w0: f64, w1: f64) -> f64 {
    let total = w0 + w1;
    if total <= 0.0 {
        return 0.0;
    }
    let p0 = w0 / total;
    let p1 = w1 / total;
    1.0 - p0 * p0 - p1 * p1
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [u8],
    params: &'a ForestParams,
    n_features: usize,
    mtry: usize,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    /// `rows` holds (row index, multiplicity) pairs.
    fn grow(&mut self, rows: &mut [(usize, u32)], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let (w0, w1) = self.weights(rows);
        let id = self.nodes.len();
        let leaf = TreeNode::Leaf {
            vote: u8::from(w1 >= w0),
        };
        self.nodes.push(leaf.clone());
        let count: u32 = rows.iter().map(|r| r.1).sum();
        if depth >= self.params.max_depth || w0 == 0.0 || w1 == 0.0 || (count as usize) < self.params.min_samples_split {
            return id;
        }
        let parent = (w0 + w1) * gini(w0, w1);
        let mut best: Option<(f64, usize, f64)> = None;
        for f in sample(rng, self.n_features, self.mtry).into_iter() {
            rows.sort_by(|a, b| self.x[a.0][f].total_cmp(&self.x[b.0][f]));
            let (mut l0, mut l1) = (0.0, 0.0);
            for i in 0..rows.len() - 1 {
                let (r, m) = rows[i];
                let w = self.params.class_weights[self.y[r] as usize] * m as f64;
                if self.y[r] == 1 {
                    l1 += w;
                } else {
                    l0 += w;
                }
                let a = self.x[r][f];
                let b = self.x[rows[i + 1].0][f];
                if a == b {
                    continue;
                }
                let (r0, r1) = (w0 - l0, w1 - l1);
                let impurity = (l0 + l1) * gini(l0, l1) + (r0 + r1) * gini(r0, r1);
                if best.is_none_or(|(bi, _, _)| impurity < bi) {
                    let mid = a + (b - a) / 2.0;
                    best = Some((impurity, f, if mid < b { mid } else { a }));
                }
            }
        }
        let Some((impurity, feature, threshold)) = best else {
            return id;
        };
        if impurity >= parent - 1e-12 {
            return id;
        }
        let mut left_rows: Vec<(usize, u32)> = rows.iter().copied().filter(|r| self.x[r.0][feature] <= threshold).collect();
        let mut right_rows: Vec<(usize, u32)> = rows.iter().copied().filter(|r| self.x[r.0][feature] > threshold).collect();
        let left = self.grow(&mut left_rows, depth + 1, rng);
        let right = self.grow(&mut right_rows, depth + 1, rng);
        self.nodes[id] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn weights(&self, rows: &[(usize, u32)]) -> (f64, f64) {
        let mut w = [0.0, 0.0];
        for &(r, m) in rows {
            let c = self.y[r] as usize;
            w[c] += self.params.class_weights[c] * m as f64;
        }
        (w[0], w[1])
    }
}

/// Trains one tree per derived seed, in parallel; results do not depend on
/// the thread schedule.
pub fn train_forest(x: &[Vec<f64>], y: &[u8], params: &ForestParams) -> Result<TreeEnsemble, PredictorError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(PredictorError::Data(format!("{} rows but {} labels", x.len(), y.len())));
    }
    let n_features = x[0].len();
    if x.iter().any(|r| r.len() != n_features) {
        return Err(PredictorError::Data("rows have differing widths".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PredictorError::Data("non-finite feature value".into()));
    }
    let ones = y.iter().filter(|&&c| c == 1).count();
    if ones == 0 || ones == y.len() {
        return Err(PredictorError::SingleClass);
    }
    if params.n_trees == 0 {
        return Err(PredictorError::Data("n_trees must be positive".into()));
    }
    let mtry = params
        .max_features
        .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
        .clamp(1, n_features);
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64);
            let mut rows: Vec<(usize, u32)> = if params.bootstrap {
                let mut counts = vec![0u32; x.len()];
                for _ in 0..x.len() {
                    counts[rng.random_range(0..x.len())] += 1;
                }
                counts.into_iter().enumerate().filter(|&(_, c)| c > 0).collect()
            } else {
                (0..x.len()).map(|i| (i, 1)).collect()
            };
            let mut builder = Builder {
                x,
                y,
                params,
                n_features,
                mtry,
                nodes: Vec::new(),
            };
            builder.grow(&mut rows, 0, &mut rng);
            Tree { nodes: builder.nodes }
        })
        .collect();
    Ok(TreeEnsemble {
        params: params.clone(),
        n_features,
        trees,
    })
}
