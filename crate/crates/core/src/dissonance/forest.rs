use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::N_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestHyper {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
}

impl Default for ForestHyper {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            min_samples_split: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        probs: [f64; N_CLASSES],
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_proba(&self, x: &[f64]) -> [f64; N_CLASSES] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { probs } => return *probs,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    /// Mean impurity decrease per feature, normalized to sum to one.
    pub importances: Vec<f64>,
}

fn gini(counts: &[usize; N_CLASSES], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

fn class_counts(idx: &[usize], y: &[usize]) -> [usize; N_CLASSES] {
    let mut c = [0; N_CLASSES];
    for &i in idx {
        c[y[i]] += 1;
    }
    c
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    hyper: &'a ForestHyper,
    mtry: usize,
    n_total: usize,
    nodes: Vec<Node>,
    importances: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

impl Builder<'_> {
    fn leaf(&mut self, counts: &[usize; N_CLASSES], n: usize) -> usize {
        let mut probs = [0.0; N_CLASSES];
        for (p, &c) in probs.iter_mut().zip(counts) {
            *p = c as f64 / n as f64;
        }
        self.nodes.push(Node::Leaf { probs });
        self.nodes.len() - 1
    }

    fn best_split(&self, idx: &[usize], parent: f64, rng: &mut ChaCha8Rng) -> Option<BestSplit> {
        let n = idx.len();
        let n_features = self.x[0].len();
        let mut best: Option<BestSplit> = None;
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
        for feature in sample(rng, n_features, self.mtry) {
            order.clear();
            order.extend(idx.iter().map(|&i| (self.x[i][feature], self.y[i])));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = [0usize; N_CLASSES];
            let mut right = [0usize; N_CLASSES];
            for &(_, c) in &order {
                right[c] += 1;
            }
            for k in 0..n - 1 {
                let c = order[k].1;
                left[c] += 1;
                right[c] -= 1;
                if order[k].0 == order[k + 1].0 {
                    continue;
                }
                let nl = k + 1;
                let nr = n - nl;
                if nl < self.hyper.min_samples_leaf || nr < self.hyper.min_samples_leaf {
                    continue;
                }
                let child = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
                let decrease = parent - child;
                if best.as_ref().is_none_or(|b| decrease > b.decrease) {
                    best = Some(BestSplit {
                        feature,
                        threshold: 0.5 * (order[k].0 + order[k + 1].0),
                        decrease,
                    });
                }
            }
        }
        best.filter(|b| b.decrease > 0.0)
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = idx.len();
        let counts = class_counts(&idx, self.y);
        let impurity = gini(&counts, n);
        let depth_ok = self.hyper.max_depth.is_none_or(|d| depth < d);
        if impurity == 0.0 || !depth_ok || n < self.hyper.min_samples_split.max(2) {
            return self.leaf(&counts, n);
        }
        let Some(split) = self.best_split(&idx, impurity, rng) else {
            return self.leaf(&counts, n);
        };
        self.importances[split.feature] += n as f64 / self.n_total as f64 * split.decrease;
        let (l, r): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| self.x[i][split.feature] <= split.threshold);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf {
            probs: [0.0; N_CLASSES],
        });
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[at] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        at
    }
}

/// Bagged CART trees with Gini impurity and sqrt(d) features per split.
pub fn fit_forest(x: &[Vec<f64>], y: &[usize], hyper: &ForestHyper, seed: u64) -> Forest {
    let n = x.len();
    let d = x[0].len();
    let mtry = ((d as f64).sqrt().floor() as usize).clamp(1, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut importances = vec![0.0; d];
    let mut trees = Vec::with_capacity(hyper.n_trees);
    for _ in 0..hyper.n_trees {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut b = Builder {
            x,
            y,
            hyper,
            mtry,
            n_total: n,
            nodes: Vec::new(),
            importances: vec![0.0; d],
        };
        b.grow(idx, 0, &mut rng);
        let total: f64 = b.importances.iter().sum();
        if total > 0.0 {
            for (acc, v) in importances.iter_mut().zip(&b.importances) {
                *acc += v / total;
            }
        }
        trees.push(Tree { nodes: b.nodes });
    }
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        importances.iter_mut().for_each(|v| *v /= total);
    }
    Forest { trees, importances }
}

impl Forest {
    pub fn predict_proba(&self, x: &[f64]) -> [f64; N_CLASSES] {
        let mut acc = [0.0; N_CLASSES];
        for t in &self.trees {
            for (a, p) in acc.iter_mut().zip(t.predict_proba(x)) {
                *a += p;
            }
        }
        acc.iter_mut().for_each(|a| *a /= self.trees.len() as f64);
        acc
    }
}
