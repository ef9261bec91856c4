use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub bootstrap: bool,
    /// Features tried per split; `None` means `round(√d)`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 50,
            max_depth: 10,
            bootstrap: true,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(usize),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    root: Node,
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    crate::sane::argmax(counts)
}

struct Builder<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [usize],
    classes: usize,
    max_depth: usize,
    max_features: usize,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &i in idx {
            c[self.ys[i]] += 1;
        }
        c
    }

    /// Best `(feature, threshold, weighted impurity)` among the candidates;
    /// ties keep the lowest feature and threshold.
    fn best_split(&self, idx: &[usize], features: &[usize]) -> Option<(usize, f64, f64)> {
        let n = idx.len();
        let total = self.counts(idx);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut sorted = idx.to_vec();
        for &f in features {
            sorted.sort_by(|&a, &b| self.xs[a][f].total_cmp(&self.xs[b][f]));
            let mut left = vec![0usize; self.classes];
            for pos in 0..n - 1 {
                left[self.ys[sorted[pos]]] += 1;
                let (lo, hi) = (self.xs[sorted[pos]][f], self.xs[sorted[pos + 1]][f]);
                if lo == hi {
                    continue;
                }
                let nl = pos + 1;
                let right: Vec<usize> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
                let imp = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
                if best.is_none_or(|(_, _, b)| imp < b - 1e-12) {
                    best = Some((f, 0.5 * (lo + hi), imp));
                }
            }
        }
        best
    }

    fn build(&self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> Node {
        let counts = self.counts(idx);
        let parent = gini(&counts, idx.len());
        if depth >= self.max_depth || idx.len() < 2 || parent == 0.0 {
            return Node::Leaf(majority(&counts));
        }
        let dim = self.xs[idx[0]].len();
        let mut features = sample(rng, dim, self.max_features.min(dim)).into_vec();
        features.sort_unstable();
        match self.best_split(idx, &features) {
            Some((feature, threshold, imp)) if imp < parent - 1e-12 => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.xs[i][feature] <= threshold);
                Node::Split {
                    feature,
                    threshold,
                    left: Box::new(self.build(&l, depth + 1, rng)),
                    right: Box::new(self.build(&r, depth + 1, rng)),
                }
            }
            _ => Node::Leaf(majority(&counts)),
        }
    }
}

impl DecisionTree {
    /// Gini tree over the rows `idx` of `xs`.
    pub fn fit(
        xs: &[Vec<f64>],
        ys: &[usize],
        idx: &[usize],
        classes: usize,
        max_depth: usize,
        max_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let b = Builder {
            xs,
            ys,
            classes,
            max_depth,
            max_features: max_features.max(1),
        };
        DecisionTree {
            root: b.build(idx, 0, rng),
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf(c) => return *c,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub classes: usize,
}

impl RandomForest {
    pub fn fit(xs: &[Vec<f64>], ys: &[usize], config: &ForestConfig) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() || config.trees == 0 {
            return Err(Error::Invalid("random forest needs matching non-empty data and ≥ 1 tree".into()));
        }
        let classes = ys.iter().max().map_or(0, |m| m + 1);
        let dim = xs[0].len();
        let max_features = config
            .max_features
            .unwrap_or_else(|| ((dim as f64).sqrt().round() as usize).max(1));
        let trees = (0..config.trees)
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(t as u64 + 1);
                let idx: Vec<usize> = if config.bootstrap {
                    (0..xs.len()).map(|_| rng.random_range(0..xs.len())).collect()
                } else {
                    (0..xs.len()).collect()
                };
                DecisionTree::fit(xs, ys, &idx, classes, config.max_depth, max_features, &mut rng)
            })
            .collect();
        Ok(RandomForest { trees, classes })
    }

    /// Majority vote; ties go to the lowest class.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut votes = vec![0usize; self.classes];
        for t in &self.trees {
            votes[t.predict(x)] += 1;
        }
        majority(&votes)
    }
}
