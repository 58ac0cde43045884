//! Random forest of Gini CART trees grown to purity.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{layout_hash, FEATURE_COUNT};
use crate::par::{derive_index_seed, Parallelism};
use crate::types::SegmentId;

pub const MODEL_VERSION: u32 = 1;

const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows until every leaf is pure.
    pub max_depth: Option<usize>,
    /// `None` means `floor(sqrt(n_features))`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: None, features_per_split: None, bootstrap: true, seed: 0 }
    }
}

/// A fitted tree in flat arrays. Node 0 is the root; `left[i] == u32::MAX` marks a leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub feature: Vec<u32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    /// Zero-based class of each leaf (majority of its samples); unused for internal nodes.
    pub class: Vec<u32>,
    pub depth: usize,
}

impl DecisionTree {
    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.left[node] == LEAF
    }

    /// Zero-based class for a feature row.
    pub fn predict_index(&self, v: &[f64]) -> u32 {
        let mut node = 0;
        while !self.is_leaf(node) {
            node = if v[self.feature[node] as usize] <= self.threshold[node] {
                self.left[node]
            } else {
                self.right[node]
            } as usize;
        }
        self.class[node]
    }

    fn push_node(&mut self) -> usize {
        self.feature.push(0);
        self.threshold.push(0.0);
        self.left.push(LEAF);
        self.right.push(LEAF);
        self.class.push(0);
        self.feature.len() - 1
    }

    fn validate(&self, n_features: usize, n_classes: usize) -> Result<()> {
        let n = self.n_nodes();
        let lens = [self.threshold.len(), self.left.len(), self.right.len(), self.class.len()];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(Error::InvalidInput("tree arrays are empty or of unequal length".into()));
        }
        let mut seen = vec![false; n];
        let mut stack = vec![(0usize, 1usize)];
        let mut depth = 0;
        while let Some((i, d)) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidInput(format!("tree node {i} reached twice")));
            }
            depth = depth.max(d);
            if self.is_leaf(i) {
                if self.right[i] != LEAF || self.class[i] as usize >= n_classes {
                    return Err(Error::InvalidInput(format!("malformed leaf {i}")));
                }
            } else {
                let (l, r) = (self.left[i] as usize, self.right[i] as usize);
                if l >= n || r >= n || self.feature[i] as usize >= n_features || !self.threshold[i].is_finite() {
                    return Err(Error::InvalidInput(format!("malformed internal node {i}")));
                }
                stack.push((l, d + 1));
                stack.push((r, d + 1));
            }
        }
        if seen.iter().any(|s| !s) || depth != self.depth {
            return Err(Error::InvalidInput("tree has unreachable nodes or a wrong depth".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub version: u32,
    pub config: ForestConfig,
    pub n_classes: usize,
    pub n_features: usize,
    /// Hash of the feature layout the model was trained on, when it used the full layout.
    pub layout_hash: Option<String>,
    pub trees: Vec<DecisionTree>,
}

/// Column-major training matrix with zero-based labels.
struct TrainSet<'a> {
    cols: &'a [f64],
    n_rows: usize,
    n_features: usize,
    labels: &'a [u32],
    n_classes: usize,
}

impl TrainSet<'_> {
    fn value(&self, row: u32, feature: usize) -> f64 {
        self.cols[feature * self.n_rows + row as usize]
    }
}

struct Split {
    feature: usize,
    threshold: f64,
    score: f64,
}

/// Fit a forest. Labels must lie in `[1, n_classes]`.
pub fn fit_forest<V: AsRef<[f64]> + Sync>(
    x: &[V],
    y: &[SegmentId],
    n_classes: usize,
    cfg: &ForestConfig,
    par: Parallelism,
) -> Result<ForestModel> {
    if x.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Shape { expected: format!("{} labels", x.len()), actual: y.len().to_string() });
    }
    if cfg.n_trees == 0 {
        return Err(Error::Config("n_trees must be at least 1".into()));
    }
    if n_classes == 0 {
        return Err(Error::InvalidInput("n_classes must be at least 1".into()));
    }
    let n_features = x[0].as_ref().len();
    if n_features == 0 {
        return Err(Error::InvalidInput("feature vectors are empty".into()));
    }
    let n_rows = x.len();
    let mut cols = vec![0.0; n_rows * n_features];
    for (r, row) in x.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != n_features {
            return Err(Error::Shape {
                expected: format!("{n_features} features"),
                actual: format!("{} features in row {r}", row.len()),
            });
        }
        for (f, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite feature {f} in row {r}")));
            }
            cols[f * n_rows + r] = v;
        }
    }
    let labels = y
        .iter()
        .map(|s| {
            if s.get() as usize > n_classes {
                Err(Error::InvalidInput(format!("label {s} exceeds {n_classes} classes")))
            } else {
                Ok(s.index() as u32)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let data = TrainSet { cols: &cols, n_rows, n_features, labels: &labels, n_classes };
    let mtry = cfg
        .features_per_split
        .unwrap_or_else(|| (n_features as f64).sqrt().floor() as usize)
        .clamp(1, n_features);
    let trees = par.map_range(cfg.n_trees, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_index_seed(cfg.seed, t as u64));
        fit_tree(&data, cfg, mtry, &mut rng)
    });
    Ok(ForestModel {
        version: MODEL_VERSION,
        config: cfg.clone(),
        n_classes,
        n_features,
        layout_hash: (n_features == FEATURE_COUNT).then(layout_hash),
        trees,
    })
}

fn majority(counts: &[u64]) -> u32 {
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best as u32
}

fn fit_tree(data: &TrainSet, cfg: &ForestConfig, mtry: usize, rng: &mut ChaCha8Rng) -> DecisionTree {
    let n = data.n_rows;
    let mut rows: Vec<u32> = if cfg.bootstrap {
        (0..n).map(|_| rng.random_range(0..n as u32)).collect()
    } else {
        (0..n as u32).collect()
    };
    let mut tree = DecisionTree {
        feature: Vec::new(),
        threshold: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
        class: Vec::new(),
        depth: 0,
    };
    let mut order: Vec<usize> = (0..data.n_features).collect();
    let mut buf: Vec<(f64, u32)> = Vec::with_capacity(n);
    let mut counts = vec![0u64; data.n_classes];

    tree.push_node();
    // (node, start, end, depth)
    let mut stack = vec![(0usize, 0usize, n, 1usize)];
    while let Some((node, lo, hi, depth)) = stack.pop() {
        tree.depth = tree.depth.max(depth);
        counts.iter_mut().for_each(|c| *c = 0);
        for &r in &rows[lo..hi] {
            counts[data.labels[r as usize] as usize] += 1;
        }
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = cfg.max_depth.is_some_and(|d| depth >= d);
        let split = if pure || depth_capped {
            None
        } else {
            best_split(data, &rows[lo..hi], &counts, &mut order, mtry, &mut buf, rng)
        };
        let Some(split) = split else {
            tree.class[node] = majority(&counts);
            continue;
        };
        let slice = &mut rows[lo..hi];
        let mut mid = 0;
        for i in 0..slice.len() {
            if data.value(slice[i], split.feature) <= split.threshold {
                slice.swap(i, mid);
                mid += 1;
            }
        }
        let (l, r) = (tree.push_node(), tree.push_node());
        tree.feature[node] = split.feature as u32;
        tree.threshold[node] = split.threshold;
        tree.left[node] = l as u32;
        tree.right[node] = r as u32;
        stack.push((r, lo + mid, hi, depth + 1));
        stack.push((l, lo, lo + mid, depth + 1));
    }
    tree
}

/// Best split over `mtry` randomly drawn features. When none of those has any
/// valid split (all constant in the node), further features are drawn until one
/// does or all are exhausted. Ties go to the lower feature index.
fn best_split(
    data: &TrainSet,
    rows: &[u32],
    parent: &[u64],
    order: &mut [usize],
    mtry: usize,
    buf: &mut Vec<(f64, u32)>,
    rng: &mut ChaCha8Rng,
) -> Option<Split> {
    let (drawn, _) = order.partial_shuffle(rng, order.len());
    let mut best: Option<Split> = None;
    let mut left = vec![0u64; parent.len()];
    for (k, &f) in drawn.iter().enumerate() {
        if k >= mtry && best.is_some() {
            break;
        }
        buf.clear();
        buf.extend(rows.iter().map(|&r| (data.value(r, f), data.labels[r as usize])));
        buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if buf[0].0 == buf[buf.len() - 1].0 {
            continue;
        }
        left.iter_mut().for_each(|c| *c = 0);
        let total = buf.len() as u64;
        let mut sum_l: u64 = 0;
        let mut sum_r: u64 = parent.iter().map(|c| c * c).sum();
        for i in 0..buf.len() - 1 {
            let c = buf[i].1 as usize;
            let right_c = parent[c] - left[c];
            sum_l += 2 * left[c] + 1;
            sum_r -= 2 * right_c - 1;
            left[c] += 1;
            let (lv, rv) = (buf[i].0, buf[i + 1].0);
            if lv == rv {
                continue;
            }
            let nl = (i + 1) as u64;
            let score = sum_l as f64 / nl as f64 + sum_r as f64 / (total - nl) as f64;
            let better = match &best {
                None => true,
                Some(b) => score > b.score || (score == b.score && f < b.feature),
            };
            if better {
                let mid = lv + (rv - lv) / 2.0;
                let threshold = if mid < rv { mid } else { lv };
                best = Some(Split { feature: f, threshold, score });
            }
        }
    }
    best
}

impl ForestModel {
    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_features {
            return Err(Error::Shape {
                expected: format!("{} features", self.n_features),
                actual: v.len().to_string(),
            });
        }
        Ok(())
    }

    /// Majority vote with its per-class histogram (index `i` counts segment `i + 1`).
    pub fn predict(&self, v: &[f64]) -> Result<(SegmentId, Vec<u32>)> {
        self.check(v)?;
        let mut hist = vec![0u32; self.n_classes];
        for t in &self.trees {
            hist[t.predict_index(v) as usize] += 1;
        }
        let mut best = 0;
        for (c, &n) in hist.iter().enumerate() {
            if n > hist[best] {
                best = c;
            }
        }
        Ok((SegmentId::from_index(best), hist))
    }

    pub fn predict_batch<V: AsRef<[f64]> + Sync>(&self, xs: &[V], par: Parallelism) -> Result<Vec<SegmentId>> {
        par.map(xs, |v| self.predict(v.as_ref()).map(|(s, _)| s)).into_iter().collect()
    }

    /// (mean, min, max) tree depth; a lone leaf has depth 1.
    pub fn depth_stats(&self) -> (f64, usize, usize) {
        let depths: Vec<usize> = self.trees.iter().map(|t| t.depth).collect();
        let mean = depths.iter().sum::<usize>() as f64 / depths.len().max(1) as f64;
        (mean, depths.iter().copied().min().unwrap_or(0), depths.iter().copied().max().unwrap_or(0))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::parse("<forest>", e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| Error::parse("<forest>", e))?;
        if m.version > MODEL_VERSION {
            return Err(Error::Version { path: "<forest>".into(), found: m.version, supported: MODEL_VERSION });
        }
        if m.trees.is_empty() {
            return Err(Error::InvalidInput("forest has no trees".into()));
        }
        for t in &m.trees {
            t.validate(m.n_features, m.n_classes)?;
        }
        Ok(m)
    }
}

/// Free-function form of [`ForestModel::depth_stats`].
pub fn depth_stats(m: &ForestModel) -> (f64, usize, usize) {
    m.depth_stats()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(v: u32) -> SegmentId {
        SegmentId::from_index(v as usize - 1)
    }

    fn leaf(class: u32) -> DecisionTree {
        DecisionTree {
            feature: vec![0],
            threshold: vec![0.0],
            left: vec![LEAF],
            right: vec![LEAF],
            class: vec![class],
            depth: 1,
        }
    }

    fn model(trees: Vec<DecisionTree>, n_classes: usize) -> ForestModel {
        ForestModel {
            version: MODEL_VERSION,
            config: ForestConfig { n_trees: trees.len(), ..Default::default() },
            n_classes,
            n_features: 1,
            layout_hash: None,
            trees,
        }
    }

    fn separable() -> (Vec<Vec<f64>>, Vec<SegmentId>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..50 {
            let t = i as f64 / 50.0;
            x.push(vec![-1.0 - t, (i % 7) as f64, t * t]);
            y.push(seg(1));
            x.push(vec![1.5 + t, (i % 5) as f64, -t]);
            y.push(seg(2));
        }
        (x, y)
    }

    #[test]
    fn separable_set_is_memorised() {
        let (x, y) = separable();
        let cfg = ForestConfig { n_trees: 20, seed: 3, ..Default::default() };
        let m = fit_forest(&x, &y, 2, &cfg, Parallelism::Sequential).unwrap();
        let pred = m.predict_batch(&x, Parallelism::Sequential).unwrap();
        assert_eq!(pred, y);
    }

    #[test]
    fn single_class_gives_single_leaves() {
        let x = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]];
        let y = vec![seg(3); 3];
        let m = fit_forest(&x, &y, 4, &ForestConfig { n_trees: 5, ..Default::default() }, Parallelism::Sequential)
            .unwrap();
        assert!(m.trees.iter().all(|t| t.n_nodes() == 1));
        assert_eq!(m.depth_stats(), (1.0, 1, 1));
    }

    #[test]
    fn conflicting_duplicates_take_majority_then_lower_class() {
        let x = vec![vec![1.0]; 4];
        let cfg = ForestConfig { n_trees: 1, bootstrap: false, ..Default::default() };
        let y = vec![seg(2), seg(1), seg(2), seg(2)];
        let m = fit_forest(&x, &y, 2, &cfg, Parallelism::Sequential).unwrap();
        assert_eq!(m.predict(&[1.0]).unwrap().0.get(), 2);
        let y = vec![seg(2), seg(1), seg(1), seg(2)];
        let m = fit_forest(&x, &y, 2, &cfg, Parallelism::Sequential).unwrap();
        assert_eq!(m.predict(&[1.0]).unwrap().0.get(), 1);
    }

    #[test]
    fn vote_examples() {
        let m = model(vec![leaf(2)], 3);
        assert_eq!(m.predict(&[0.0]).unwrap(), (seg(3), vec![0, 0, 1]));

        let mut trees = vec![leaf(1); 60];
        trees.extend(vec![leaf(4); 40]);
        let (s, h) = model(trees, 5).predict(&[0.0]).unwrap();
        assert_eq!(s.get(), 2);
        assert_eq!(h.iter().sum::<u32>(), 100);

        let mut trees = vec![leaf(6); 50];
        trees.extend(vec![leaf(3); 50]);
        assert_eq!(model(trees, 7).predict(&[0.0]).unwrap().0.get(), 4);
    }

    #[test]
    fn stump_depth_is_two() {
        let x = vec![vec![0.0], vec![1.0]];
        let y = vec![seg(1), seg(2)];
        let cfg = ForestConfig { n_trees: 1, bootstrap: false, ..Default::default() };
        let m = fit_forest(&x, &y, 2, &cfg, Parallelism::Sequential).unwrap();
        assert_eq!(m.depth_stats(), (2.0, 2, 2));
        assert_eq!(m.trees[0].threshold[0], 0.5);
    }

    #[test]
    fn xor_needs_zero_gain_split() {
        let x = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let y = vec![seg(1), seg(2), seg(2), seg(1)];
        let cfg = ForestConfig { n_trees: 1, bootstrap: false, seed: 9, ..Default::default() };
        let m = fit_forest(&x, &y, 2, &cfg, Parallelism::Sequential).unwrap();
        assert_eq!(m.predict_batch(&x, Parallelism::Sequential).unwrap(), y);
    }

    #[test]
    fn errors() {
        let cfg = ForestConfig::default();
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(fit_forest(&empty, &[], 2, &cfg, Parallelism::Sequential).is_err());
        let x = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(fit_forest(&x, &[seg(1), seg(2)], 2, &cfg, Parallelism::Sequential).is_err());
        let m = model(vec![leaf(0)], 1);
        assert!(m.predict(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (x, y) = separable();
        let cfg = ForestConfig { n_trees: 4, seed: 1, ..Default::default() };
        let m = fit_forest(&x, &y, 2, &cfg, Parallelism::Sequential).unwrap();
        let back = ForestModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let future = m.to_json().unwrap().replacen("\"version\":1", "\"version\":99", 1);
        assert!(matches!(ForestModel::from_json(&future), Err(Error::Version { .. })));
    }

    #[test]
    fn parallel_matches_sequential() {
        let (x, y) = separable();
        let cfg = ForestConfig { n_trees: 8, seed: 42, ..Default::default() };
        let a = fit_forest(&x, &y, 2, &cfg, Parallelism::Sequential).unwrap();
        let b = fit_forest(&x, &y, 2, &cfg, Parallelism::Parallel).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }
}
