//! CART regression trees, the bagged forest built from them, and severity grading.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container::{Container, DType, Kind};
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::rng::Rng;

const NUM_FEATURES: usize = FeatureVector::LEN;

/// Maintenance triage level. The code doubles as the regression target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SeverityGrade {
    Nil = 0,
    Minor = 1,
    Major = 2,
}

impl SeverityGrade {
    pub const ALL: [SeverityGrade; 3] = [SeverityGrade::Nil, SeverityGrade::Minor, SeverityGrade::Major];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn target(self) -> f64 {
        self as usize as f64
    }

    pub fn name(self) -> &'static str {
        match self {
            SeverityGrade::Nil => "nil",
            SeverityGrade::Minor => "minor",
            SeverityGrade::Major => "major",
        }
    }
}

impl fmt::Display for SeverityGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SeverityGrade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nil" | "0" => Ok(SeverityGrade::Nil),
            "minor" | "1" => Ok(SeverityGrade::Minor),
            "major" | "2" => Ok(SeverityGrade::Major),
            _ => Err(Error::Argument(format!("unknown severity grade `{s}`"))),
        }
    }
}

/// Score cut points: `score < nil_below` is nil, `score >= major_from` is major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradeThresholds {
    pub nil_below: f64,
    pub major_from: f64,
}

impl Default for GradeThresholds {
    fn default() -> Self {
        Self {
            nil_below: 0.5,
            major_from: 1.5,
        }
    }
}

pub fn grade(score: f64, thresholds: GradeThresholds) -> Result<SeverityGrade> {
    if !(thresholds.nil_below < thresholds.major_from) {
        return Err(Error::Argument(format!(
            "grade thresholds {} and {} are not increasing",
            thresholds.nil_below, thresholds.major_from
        )));
    }
    Ok(if score < thresholds.nil_below {
        SeverityGrade::Nil
    } else if score < thresholds.major_from {
        SeverityGrade::Minor
    } else {
        SeverityGrade::Major
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows until another stopping rule applies.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub features_per_split: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: Some(12),
            min_samples_leaf: 2,
            features_per_split: 3,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    /// One unbagged tree that considers every feature and grows to purity.
    pub fn exhaustive_single_tree() -> Self {
        Self {
            n_trees: 1,
            max_depth: None,
            min_samples_leaf: 1,
            features_per_split: NUM_FEATURES,
            bootstrap: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("n_trees must be at least 1".into()));
        }
        if !(1..=NUM_FEATURES).contains(&self.features_per_split) {
            return Err(Error::Config(format!(
                "features_per_split must lie in 1..={NUM_FEATURES}"
            )));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("min_samples_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

/// Regression tree node. Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64; NUM_FEATURES]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }
}

/// Best split of a node: feature, threshold, and the weighted child sum of squared errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub sse: f64,
}

fn validate_inputs(x: &[[f64; NUM_FEATURES]], y: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Argument("cannot fit on zero rows".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Argument(format!("{} rows but {} targets", x.len(), y.len())));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Argument("training data contains non-finite values".into()));
    }
    Ok(())
}

/// Greedy variance-reduction tree on rows `x` with targets `y`.
pub fn fit_tree(x: &[[f64; NUM_FEATURES]], y: &[f64], cfg: &ForestConfig, rng: &mut Rng) -> Result<TreeNode> {
    validate_inputs(x, y)?;
    cfg.validate()?;
    let rows: Vec<usize> = (0..x.len()).collect();
    Ok(grow(x, y, rows, 0, cfg, rng))
}

fn grow(
    x: &[[f64; NUM_FEATURES]],
    y: &[f64],
    rows: Vec<usize>,
    depth: usize,
    cfg: &ForestConfig,
    rng: &mut Rng,
) -> TreeNode {
    let pure = rows.iter().all(|&r| y[r] == y[rows[0]]);
    if pure {
        return TreeNode::Leaf { value: y[rows[0]] };
    }
    let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64;
    let leaf = TreeNode::Leaf { value: mean };
    if cfg.max_depth.is_some_and(|d| depth >= d) || rows.len() < 2 * cfg.min_samples_leaf {
        return leaf;
    }
    let features = rng.sample_indices(NUM_FEATURES, cfg.features_per_split);
    let Some(split) = best_split(x, y, &rows, &features, cfg.min_samples_leaf) else {
        return leaf;
    };
    let (left, right): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| x[r][split.feature] <= split.threshold);
    TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left: Box::new(grow(x, y, left, depth + 1, cfg, rng)),
        right: Box::new(grow(x, y, right, depth + 1, cfg, rng)),
    }
}

/// Scans midpoints between consecutive distinct values of each candidate feature.
/// Ties, up to rounding of the running sums, keep the earlier feature, then the
/// smaller threshold.
pub fn best_split(
    x: &[[f64; NUM_FEATURES]],
    y: &[f64],
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<SplitChoice> {
    let n = rows.len();
    let total: f64 = rows.iter().map(|&r| y[r]).sum();
    let total_sq: f64 = rows.iter().map(|&r| y[r] * y[r]).sum();
    let tie = 1e-12 * (1.0 + total_sq);
    let mut best: Option<SplitChoice> = None;
    let mut sorted = rows.to_vec();
    for &f in features {
        sorted.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += y[sorted[k]];
            let (lo, hi) = (x[sorted[k]][f], x[sorted[k + 1]][f]);
            let n_left = k + 1;
            if lo == hi || n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let sse = total_sq - left_sum * left_sum / n_left as f64 - right_sum * right_sum / (n - n_left) as f64;
            let threshold = lo + (hi - lo) / 2.0;
            if best.is_none_or(|b| sse < b.sse - tie) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold,
                    sse,
                });
            }
        }
    }
    best
}

/// Bagged ensemble of regression trees plus the grading cut points.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomForestModel {
    pub config: ForestConfig,
    pub trees: Vec<TreeNode>,
    pub thresholds: GradeThresholds,
}

/// Fits `n_trees` trees, each on a bootstrap resample (when enabled) and each
/// with its own generator seeded from `cfg.seed`.
pub fn fit_forest(x: &[[f64; NUM_FEATURES]], y: &[f64], cfg: &ForestConfig) -> Result<RandomForestModel> {
    validate_inputs(x, y)?;
    cfg.validate()?;
    let mut seeder = Rng::new(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.n_trees).map(|_| seeder.next_u64()).collect();
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for seed in seeds {
        let mut rng = Rng::new(seed);
        let tree = if cfg.bootstrap {
            let n = x.len();
            let picks: Vec<usize> = (0..n).map(|_| rng.int_inclusive(0, n - 1)).collect();
            let bx: Vec<_> = picks.iter().map(|&i| x[i]).collect();
            let by: Vec<_> = picks.iter().map(|&i| y[i]).collect();
            fit_tree(&bx, &by, cfg, &mut rng)?
        } else {
            fit_tree(x, y, cfg, &mut rng)?
        };
        trees.push(tree);
    }
    Ok(RandomForestModel {
        config: cfg.clone(),
        trees,
        thresholds: GradeThresholds::default(),
    })
}

impl RandomForestModel {
    /// Mean of the per-tree leaf values.
    pub fn predict_row(&self, x: &[f64; NUM_FEATURES]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_score(&self, f: &FeatureVector) -> f64 {
        self.predict_row(&f.to_array())
    }

    pub fn grade(&self, f: &FeatureVector) -> Result<(f64, SeverityGrade)> {
        let score = self.predict_score(f);
        Ok((score, grade(score, self.thresholds)?))
    }

    /// Number of splits on each feature across all trees.
    pub fn split_counts(&self) -> [usize; NUM_FEATURES] {
        fn walk(n: &TreeNode, counts: &mut [usize; NUM_FEATURES]) {
            if let TreeNode::Split {
                feature, left, right, ..
            } = n
            {
                counts[*feature] += 1;
                walk(left, counts);
                walk(right, counts);
            }
        }
        let mut counts = [0; NUM_FEATURES];
        self.trees.iter().for_each(|t| walk(t, &mut counts));
        counts
    }

    pub fn mse(&self, x: &[[f64; NUM_FEATURES]], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(row, t)| (self.predict_row(row) - t).powi(2))
            .sum::<f64>()
            / x.len().max(1) as f64
    }

    /// Flattens each tree in pre-order into parallel arrays
    /// `feature` (-1 for leaves), `threshold`, `value`, and `right` (index of the
    /// right child; the left child always follows its parent).
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(Kind::Forest);
        let cfg = &self.config;
        c.set("n_trees", cfg.n_trees);
        c.set("max_depth", cfg.max_depth.map_or("none".to_string(), |d| d.to_string()));
        c.set("min_samples_leaf", cfg.min_samples_leaf);
        c.set("features_per_split", cfg.features_per_split);
        c.set("bootstrap", cfg.bootstrap);
        c.set("seed", cfg.seed);
        c.set("nil_below", self.thresholds.nil_below);
        c.set("major_from", self.thresholds.major_from);
        c.set("features", FeatureVector::NAMES.join(","));
        for (i, tree) in self.trees.iter().enumerate() {
            let mut arrays = FlatTree::default();
            arrays.push(tree);
            let n = arrays.feature.len();
            c.push(&format!("tree.{i}.feature"), DType::F64, &[n], &arrays.feature);
            c.push(&format!("tree.{i}.threshold"), DType::F64, &[n], &arrays.threshold);
            c.push(&format!("tree.{i}.value"), DType::F64, &[n], &arrays.value);
            c.push(&format!("tree.{i}.right"), DType::F64, &[n], &arrays.right);
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind != Kind::Forest {
            return Err(Error::format(path, "container does not hold a forest"));
        }
        let get = |k: &str| {
            c.get(k)
                .ok_or_else(|| Error::format(path, format!("header lacks `{k}`")))
        };
        let parse_err = |k: &str| Error::format(path, format!("header `{k}` is malformed"));
        let int = |k: &str| get(k)?.parse::<usize>().map_err(|_| parse_err(k));
        let real = |k: &str| get(k)?.parse::<f64>().map_err(|_| parse_err(k));
        let config = ForestConfig {
            n_trees: int("n_trees")?,
            max_depth: match get("max_depth")? {
                "none" => None,
                d => Some(d.parse().map_err(|_| parse_err("max_depth"))?),
            },
            min_samples_leaf: int("min_samples_leaf")?,
            features_per_split: int("features_per_split")?,
            bootstrap: get("bootstrap")?.parse().map_err(|_| parse_err("bootstrap"))?,
            seed: get("seed")?.parse().map_err(|_| parse_err("seed"))?,
        };
        let thresholds = GradeThresholds {
            nil_below: real("nil_below")?,
            major_from: real("major_from")?,
        };
        let mut trees = Vec::with_capacity(config.n_trees);
        for i in 0..config.n_trees {
            let arr = |name: &str| {
                let key = format!("tree.{i}.{name}");
                c.entry(&key)
                    .map(|e| e.values.as_slice())
                    .ok_or_else(|| Error::format(path, format!("missing tensor `{key}`")))
            };
            let flat = FlatTreeRef {
                feature: arr("feature")?,
                threshold: arr("threshold")?,
                value: arr("value")?,
                right: arr("right")?,
            };
            let mut pos = 0;
            let tree = flat
                .build(&mut pos, 0)
                .ok_or_else(|| Error::format(path, format!("tree {i} is malformed")))?;
            if pos != flat.feature.len() {
                return Err(Error::format(path, format!("tree {i} has unused nodes")));
            }
            trees.push(tree);
        }
        Ok(Self {
            config,
            trees,
            thresholds,
        })
    }
}

#[derive(Default)]
struct FlatTree {
    feature: Vec<f64>,
    threshold: Vec<f64>,
    value: Vec<f64>,
    right: Vec<f64>,
}

impl FlatTree {
    fn push(&mut self, node: &TreeNode) {
        let at = self.feature.len();
        match node {
            TreeNode::Leaf { value } => {
                self.feature.push(-1.0);
                self.threshold.push(0.0);
                self.value.push(*value);
                self.right.push(-1.0);
            }
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                self.feature.push(*feature as f64);
                self.threshold.push(*threshold);
                self.value.push(0.0);
                self.right.push(-1.0);
                self.push(left);
                self.right[at] = self.feature.len() as f64;
                self.push(right);
            }
        }
    }
}

struct FlatTreeRef<'a> {
    feature: &'a [f64],
    threshold: &'a [f64],
    value: &'a [f64],
    right: &'a [f64],
}

impl FlatTreeRef<'_> {
    fn build(&self, pos: &mut usize, depth: usize) -> Option<TreeNode> {
        let i = *pos;
        if i >= self.feature.len() || depth > 10_000 {
            return None;
        }
        *pos += 1;
        let f = self.feature[i];
        if f < 0.0 {
            return Some(TreeNode::Leaf {
                value: *self.value.get(i)?,
            });
        }
        if f.fract() != 0.0 || f as usize >= NUM_FEATURES {
            return None;
        }
        let left = self.build(pos, depth + 1)?;
        if *self.right.get(i)? != *pos as f64 {
            return None;
        }
        let right = self.build(pos, depth + 1)?;
        Some(TreeNode::Split {
            feature: f as usize,
            threshold: *self.threshold.get(i)?,
            left: Box::new(left),
            right: Box::new(right),
        })
    }
}
