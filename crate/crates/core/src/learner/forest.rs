//! Weighted random forest with flat, array-backed trees.
//!
//! Feature values are bucketed once per training run. A feature with at most
//! `max_bins` distinct values gets one bin per value, so its splits are the
//! exact midpoints between adjacent observed values; wider features get
//! equal-count bins over their distinct values. Bins depend only on the set
//! of distinct values, never on weights or duplicate counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Hyperparams, LabeledExample, LearnerError};
use crate::event::Label;
use crate::features::CATALOG_VERSION;
use crate::time::Timestamp;

/// Version of the checkpoint layout written by [`ForestModel::to_json`].
pub const CHECKPOINT_FORMAT: u32 = 1;

const LEAF: i32 = -1;

/// One decision tree in structure-of-arrays form. Node 0 is the root; a node
/// with `feature == -1` is a leaf. Samples with `x[feature] <= threshold` go
/// left. `value` holds the weighted overuse probability at every node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
}

impl Tree {
    /// A single-leaf tree.
    pub fn constant(p_overuse: f64) -> Tree {
        Tree {
            feature: vec![LEAF],
            threshold: vec![0.0],
            left: vec![0],
            right: vec![0],
            value: vec![p_overuse],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            let f = self.feature[i];
            if f < 0 {
                return self.value[i];
            }
            i = if x[f as usize] <= self.threshold[i] {
                self.left[i]
            } else {
                self.right[i]
            } as usize;
        }
    }

    pub fn node_count(&self) -> usize {
        self.feature.len()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.feature[node] < 0
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            if t.is_leaf(i) {
                0
            } else {
                1 + go(t, t.left[i] as usize).max(go(t, t.right[i] as usize))
            }
        }
        go(self, 0)
    }

    /// Feature indices used by at least one split.
    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.feature.iter().filter(|&&f| f >= 0).map(|&f| f as usize)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub example_count: usize,
    pub overuse_count: usize,
    /// Share of total training weight carried by overuse examples.
    pub overuse_weight_share: f64,
    /// Hex SHA-256 of the training weights (little-endian f64 bytes).
    pub weights_digest: String,
    pub trained_at: Option<Timestamp>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub score: f64,
}

impl Prediction {
    /// Overuse iff `score >= 0.5`; a tie predicts overuse.
    pub fn from_score(score: f64) -> Prediction {
        let label = if score >= 0.5 {
            Label::Overuse
        } else {
            Label::NotOveruse
        };
        Prediction { label, score }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    pub catalog_version: u32,
    pub n_features: usize,
    pub hyperparams: Hyperparams,
    pub metadata: TrainingMeta,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    /// Assemble a model from prebuilt trees.
    pub fn from_trees(trees: Vec<Tree>, n_features: usize) -> ForestModel {
        ForestModel {
            format_version: CHECKPOINT_FORMAT,
            catalog_version: CATALOG_VERSION,
            n_features,
            hyperparams: Hyperparams {
                n_trees: trees.len().max(1),
                ..Hyperparams::default()
            },
            metadata: TrainingMeta::default(),
            trees,
        }
    }

    /// Mean overuse probability over trees. `x` must have `n_features` entries.
    pub fn score(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.n_features);
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        sum / self.trees.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction, LearnerError> {
        if x.len() != self.n_features {
            return Err(LearnerError::LengthMismatch {
                what: "feature vector",
                expected: self.n_features,
                found: x.len(),
            });
        }
        Ok(Prediction::from_score(self.score(x)))
    }

    pub fn check_catalog(&self, catalog_version: u32) -> Result<(), LearnerError> {
        if catalog_version == self.catalog_version {
            Ok(())
        } else {
            Err(LearnerError::CatalogMismatch {
                expected: self.catalog_version,
                found: catalog_version,
            })
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serializes")
    }

    pub fn from_json(s: &str) -> Result<ForestModel, LearnerError> {
        let model: ForestModel = serde_json::from_str(s)?;
        if model.format_version != CHECKPOINT_FORMAT {
            return Err(LearnerError::CheckpointFormat(model.format_version));
        }
        Ok(model)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

pub(crate) fn weights_digest(weights: &[f64]) -> String {
    let mut h = Sha256::new();
    for w in weights {
        h.update(w.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Train a forest on `dataset` with per-example `weights` in `(0, 1]`.
///
/// With bootstrap on, each tree draws `n` examples with replacement using the
/// normalized weights as draw probabilities, and a drawn example counts with
/// its draw multiplicity; weights therefore enter once, through the draw.
/// With bootstrap off every example enters every tree with its weight.
pub fn train_forest(
    dataset: &[LabeledExample],
    weights: &[f64],
    hp: &Hyperparams,
) -> Result<ForestModel, LearnerError> {
    hp.validate()?;
    if dataset.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    if weights.len() != dataset.len() {
        return Err(LearnerError::LengthMismatch {
            what: "weights",
            expected: dataset.len(),
            found: weights.len(),
        });
    }
    if dataset.len() < hp.min_samples_split {
        return Err(LearnerError::TooFewExamples {
            needed: hp.min_samples_split,
            found: dataset.len(),
        });
    }
    for (index, &weight) in weights.iter().enumerate() {
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(LearnerError::InvalidWeight { index, weight });
        }
    }
    let n_features = dataset[0].features.len();
    for e in dataset {
        if e.features.len() != n_features {
            return Err(LearnerError::LengthMismatch {
                what: "feature vector",
                expected: n_features,
                found: e.features.len(),
            });
        }
    }

    let binned = Binned::new(dataset, n_features, hp.max_bins);
    let y: Vec<bool> = dataset.iter().map(|e| e.label.is_overuse()).collect();
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cumulative.push(acc);
    }
    let ctx = GrowContext {
        binned: &binned,
        y: &y,
        weights,
        cumulative: &cumulative,
        hp,
        mtry: hp.max_features.resolve(n_features),
    };
    let trees: Vec<Tree> = (0..hp.n_trees)
        .into_par_iter()
        .map(|t| ctx.grow(t as u64))
        .collect();

    let total: f64 = weights.iter().sum();
    let overuse_w: f64 = weights.iter().zip(&y).filter(|(_, &y)| y).map(|(w, _)| w).sum();
    Ok(ForestModel {
        format_version: CHECKPOINT_FORMAT,
        catalog_version: CATALOG_VERSION,
        n_features,
        hyperparams: hp.clone(),
        metadata: TrainingMeta {
            example_count: dataset.len(),
            overuse_count: y.iter().filter(|&&y| y).count(),
            overuse_weight_share: overuse_w / total,
            weights_digest: weights_digest(weights),
            trained_at: None,
        },
        trees,
    })
}

/// Column-major bin codes plus each bin's observed value range.
struct Binned {
    n: usize,
    codes: Vec<u8>,
    lo: Vec<Vec<f64>>,
    hi: Vec<Vec<f64>>,
}

impl Binned {
    fn new(dataset: &[LabeledExample], n_features: usize, max_bins: usize) -> Binned {
        let n = dataset.len();
        let mut codes = vec![0u8; n * n_features];
        let mut lo = Vec::with_capacity(n_features);
        let mut hi = Vec::with_capacity(n_features);
        let mut uniq: Vec<f64> = Vec::with_capacity(n);
        for f in 0..n_features {
            uniq.clear();
            uniq.extend(dataset.iter().map(|e| e.features[f]));
            uniq.sort_unstable_by(f64::total_cmp);
            uniq.dedup();
            let u = uniq.len();
            let (flo, fhi): (Vec<f64>, Vec<f64>) = if u <= max_bins {
                (uniq.clone(), uniq.clone())
            } else {
                (0..max_bins)
                    .map(|b| (uniq[b * u / max_bins], uniq[(b + 1) * u / max_bins - 1]))
                    .unzip()
            };
            let col = &mut codes[f * n..(f + 1) * n];
            for (c, e) in col.iter_mut().zip(dataset) {
                let v = e.features[f];
                *c = (flo.partition_point(|&l| l <= v) - 1) as u8;
            }
            lo.push(flo);
            hi.push(fhi);
        }
        Binned { n, codes, lo, hi }
    }

    fn code(&self, f: usize, row: u32) -> u8 {
        self.codes[f * self.n + row as usize]
    }

    fn n_bins(&self, f: usize) -> usize {
        self.lo[f].len()
    }
}

struct GrowContext<'a> {
    binned: &'a Binned,
    y: &'a [bool],
    weights: &'a [f64],
    cumulative: &'a [f64],
    hp: &'a Hyperparams,
    mtry: usize,
}

struct Split {
    feature: usize,
    left_bin: u8,
    right_bin: u8,
    score: f64,
}

/// Scratch buffers reused across nodes of one tree.
struct Scratch {
    hist_w: Vec<f64>,
    hist_p: Vec<f64>,
    present: Vec<(u8, f64, f64)>,
    perm: Vec<usize>,
}

impl GrowContext<'_> {
    fn grow(&self, tree_index: u64) -> Tree {
        let mut rng = ChaCha8Rng::seed_from_u64(self.hp.seed);
        rng.set_stream(tree_index);
        let n = self.y.len();

        // Per-row node weight and sample count for this tree.
        let mut w_row = vec![0.0f64; n];
        let mut c_row = vec![0u32; n];
        if self.hp.bootstrap {
            let total = *self.cumulative.last().expect("non-empty");
            for _ in 0..n {
                let u = rng.random::<f64>() * total;
                let i = self.cumulative.partition_point(|&c| c <= u).min(n - 1);
                c_row[i] += 1;
            }
            for i in 0..n {
                w_row[i] = f64::from(c_row[i]);
            }
        } else {
            w_row.copy_from_slice(self.weights);
            c_row.fill(1);
        }
        let mut rows: Vec<u32> = (0..n as u32).filter(|&i| c_row[i as usize] > 0).collect();

        let n_features = self.binned.lo.len();
        let mut scratch = Scratch {
            hist_w: vec![0.0; 256],
            hist_p: vec![0.0; 256],
            present: Vec::new(),
            perm: (0..n_features).collect(),
        };
        let mut tree = Tree {
            feature: Vec::new(),
            threshold: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            value: Vec::new(),
        };
        let push_node = |tree: &mut Tree| {
            tree.feature.push(LEAF);
            tree.threshold.push(0.0);
            tree.left.push(0);
            tree.right.push(0);
            tree.value.push(0.0);
            (tree.feature.len() - 1) as u32
        };
        let root = push_node(&mut tree);
        let mut stack: Vec<(u32, usize, usize, usize)> = vec![(root, 0, rows.len(), 0)];
        while let Some((node, lo, hi, depth)) = stack.pop() {
            let node_rows = &rows[lo..hi];
            let (mut w, mut p, mut count) = (0.0, 0.0, 0u64);
            for &r in node_rows {
                let r = r as usize;
                w += w_row[r];
                if self.y[r] {
                    p += w_row[r];
                }
                count += u64::from(c_row[r]);
            }
            tree.value[node as usize] = if w > 0.0 { p / w } else { 0.0 };
            let pure = p <= 0.0 || p >= w;
            if depth >= self.hp.max_depth || count < self.hp.min_samples_split as u64 || pure {
                continue;
            }
            let Some(split) = self.best_split(node_rows, &w_row, w, p, &mut rng, &mut scratch)
            else {
                continue;
            };
            let f = split.feature;
            let left_hi = self.binned.hi[f][split.left_bin as usize];
            let right_lo = self.binned.lo[f][split.right_bin as usize];
            let mut threshold = left_hi + (right_lo - left_hi) / 2.0;
            if threshold >= right_lo {
                threshold = left_hi;
            }
            // Partition rows in place: left bins first.
            let seg = &mut rows[lo..hi];
            let mut mid = 0;
            for i in 0..seg.len() {
                if self.binned.code(f, seg[i]) <= split.left_bin {
                    seg.swap(i, mid);
                    mid += 1;
                }
            }
            let l = push_node(&mut tree);
            let r = push_node(&mut tree);
            let ni = node as usize;
            tree.feature[ni] = f as i32;
            tree.threshold[ni] = threshold;
            tree.left[ni] = l;
            tree.right[ni] = r;
            stack.push((r, lo + mid, hi, depth + 1));
            stack.push((l, lo, lo + mid, depth + 1));
        }
        tree
    }

    /// Examine features in random order until `mtry` non-constant ones have
    /// been scored; keep the best weighted-Gini split.
    fn best_split(
        &self,
        rows: &[u32],
        w_row: &[f64],
        w: f64,
        p: f64,
        rng: &mut ChaCha8Rng,
        s: &mut Scratch,
    ) -> Option<Split> {
        let n_features = s.perm.len();
        let tol = 1e-12 * (w + 1.0);
        let mut best: Option<Split> = None;
        let mut scored = 0;
        for k in 0..n_features {
            if scored == self.mtry {
                break;
            }
            let j = rng.random_range(k..n_features);
            s.perm.swap(k, j);
            let f = s.perm[k];
            self.collect_bins(f, rows, w_row, s);
            if s.present.len() < 2 {
                continue;
            }
            scored += 1;
            let (mut wl, mut pl) = (0.0, 0.0);
            for pair in s.present.windows(2) {
                let (bin, bw, bp) = pair[0];
                wl += bw;
                pl += bp;
                let (wr, pr) = (w - wl, p - pl);
                let nl = wl - pl;
                let nr = wr - pr;
                let score = (pl * pl + nl * nl) / wl + (pr * pr + nr * nr) / wr;
                if best.as_ref().is_none_or(|b| score > b.score + tol) {
                    best = Some(Split {
                        feature: f,
                        left_bin: bin,
                        right_bin: pair[1].0,
                        score,
                    });
                }
            }
        }
        best
    }

    /// Per-bin (weight, positive weight) for the node, ascending by bin,
    /// keeping only bins present in the node.
    fn collect_bins(&self, f: usize, rows: &[u32], w_row: &[f64], s: &mut Scratch) {
        s.present.clear();
        let nb = self.binned.n_bins(f);
        if rows.len() * 2 >= nb {
            for &r in rows {
                let c = self.binned.code(f, r) as usize;
                let wr = w_row[r as usize];
                s.hist_w[c] += wr;
                if self.y[r as usize] {
                    s.hist_p[c] += wr;
                }
            }
            for c in 0..nb {
                if s.hist_w[c] > 0.0 {
                    s.present.push((c as u8, s.hist_w[c], s.hist_p[c]));
                    s.hist_w[c] = 0.0;
                    s.hist_p[c] = 0.0;
                }
            }
        } else {
            for &r in rows {
                let wr = w_row[r as usize];
                let pr = if self.y[r as usize] { wr } else { 0.0 };
                s.present.push((self.binned.code(f, r), wr, pr));
            }
            s.present.sort_unstable_by_key(|e| e.0);
            let mut out = 0;
            for i in 0..s.present.len() {
                if out > 0 && s.present[out - 1].0 == s.present[i].0 {
                    s.present[out - 1].1 += s.present[i].1;
                    s.present[out - 1].2 += s.present[i].2;
                } else {
                    s.present[out] = s.present[i];
                    out += 1;
                }
            }
            s.present.truncate(out);
        }
    }
}
