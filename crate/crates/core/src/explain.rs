//! Exact category-level Shapley attribution and explanation cards.
//!
//! The five feature categories are the players. The value of a coalition is
//! the model's mean score over a background set, with coalition features
//! taken from the explained input and all others from the background sample.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Category, FeatureCatalog};
use crate::learner::{ForestModel, Tree};
use crate::time::Timestamp;

/// Number of players (categories).
pub const PLAYERS: usize = 5;
/// Number of coalitions, including the empty and the full one.
pub const COALITIONS: usize = 1 << PLAYERS;
/// Background vectors drawn per model.
pub const BACKGROUND_SIZE: usize = 64;
/// Low-level lines shown per category on a card.
pub const DEFAULT_DETAIL_BUDGET: usize = 3;

const FULL: usize = COALITIONS - 1;

#[derive(Debug, Error, PartialEq)]
pub enum ExplainError {
    #[error("background set is empty")]
    EmptyBackground,
    #[error("vector has {found} features, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Anything that maps a feature vector to an overuse score.
pub trait Scorer {
    fn score(&self, x: &[f64]) -> f64;
}

impl Scorer for ForestModel {
    fn score(&self, x: &[f64]) -> f64 {
        ForestModel::score(self, x)
    }
}

impl<F: Fn(&[f64]) -> f64> Scorer for F {
    fn score(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// A category bitmask; bit `c` is set when category index `c` is present.
pub type Coalition = usize;

pub fn coalition_of(categories: &[Category]) -> Coalition {
    categories.iter().fold(0, |m, c| m | (1 << c.index()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub decision_ts: Timestamp,
    pub base_value: f64,
    pub phi: BTreeMap<Category, f64>,
    pub score: f64,
    /// Mean absolute single-feature effect for features of the leading
    /// categories, keyed by feature id.
    #[serde(default)]
    pub feature_effects: BTreeMap<String, f64>,
}

impl ShapleyReport {
    pub fn phi_of(&self, c: Category) -> f64 {
        self.phi.get(&c).copied().unwrap_or(0.0)
    }

    /// Categories by descending phi, ties in category order.
    pub fn ranked(&self) -> Vec<Category> {
        let mut cats = Category::ALL.to_vec();
        cats.sort_by(|a, b| {
            self.phi_of(*b)
                .total_cmp(&self.phi_of(*a))
                .then(a.index().cmp(&b.index()))
        });
        cats
    }
}

fn hybrid(x: &[f64], b: &[f64], groups: &[u8], coalition: Coalition, out: &mut Vec<f64>) {
    out.clear();
    out.extend(
        x.iter()
            .zip(b)
            .zip(groups)
            .map(|((xv, bv), g)| if coalition & (1 << g) != 0 { *xv } else { *bv }),
    );
}

fn check(x: &[f64], background: &[Vec<f64>], groups: &[u8]) -> Result<(), ExplainError> {
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    for v in std::iter::once(x).chain(background.iter().map(Vec::as_slice)) {
        if v.len() != groups.len() {
            return Err(ExplainError::DimensionMismatch {
                expected: groups.len(),
                found: v.len(),
            });
        }
    }
    Ok(())
}

/// Mean score over `background` of the hybrid vector that takes coalition
/// features from `x`. The full coalition returns the score of `x` itself.
pub fn coalition_value<M: Scorer + ?Sized>(
    model: &M,
    x: &[f64],
    coalition: Coalition,
    background: &[Vec<f64>],
    groups: &[u8],
) -> Result<f64, ExplainError> {
    check(x, background, groups)?;
    if coalition & FULL == FULL {
        return Ok(model.score(x));
    }
    let mut buf = Vec::with_capacity(x.len());
    let scores: Vec<f64> = background
        .iter()
        .map(|b| {
            hybrid(x, b, groups, coalition, &mut buf);
            model.score(&buf)
        })
        .collect();
    Ok(mean_exact(&scores))
}

/// Arithmetic mean that returns the common value exactly when all inputs are
/// bit-identical, so coalitions the model cannot tell apart get equal values.
fn mean_exact(xs: &[f64]) -> f64 {
    let first = xs[0];
    if xs.iter().all(|x| x.to_bits() == first.to_bits()) {
        return first;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Shapley values from a complete table of coalition values.
pub fn shapley_from_values(v: &[f64; COALITIONS]) -> [f64; PLAYERS] {
    let n = PLAYERS;
    let fact = |k: usize| (1..=k).product::<usize>() as f64;
    let mut phi = [0.0; PLAYERS];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1 << i;
        for s in 0..COALITIONS {
            if s & bit != 0 {
                continue;
            }
            let k = s.count_ones() as usize;
            let w = fact(k) * fact(n - k - 1) / fact(n);
            *p += w * (v[s | bit] - v[s]);
        }
    }
    phi
}

/// Coalition values by direct hybrid evaluation, for any scorer.
pub fn coalition_table<M: Scorer + ?Sized>(
    model: &M,
    x: &[f64],
    background: &[Vec<f64>],
    groups: &[u8],
) -> Result<[f64; COALITIONS], ExplainError> {
    let mut v = [0.0; COALITIONS];
    for (s, slot) in v.iter_mut().enumerate() {
        *slot = coalition_value(model, x, s, background, groups)?;
    }
    Ok(v)
}

/// Coalition values for a forest in one pass per (tree, background) pair.
///
/// `x` and `b` are routed down the tree together; where they disagree on a
/// split of category `c`, the walk forks into an "x side" (requires `c` in
/// the coalition) and a "b side" (requires `c` out of it). Each reached leaf
/// adds its value to every coalition consistent with the fork constraints.
/// Leaves are summed in tree order, so the full coalition reproduces the
/// model score exactly.
pub fn forest_coalition_table(
    model: &ForestModel,
    x: &[f64],
    background: &[Vec<f64>],
    groups: &[u8],
) -> Result<[f64; COALITIONS], ExplainError> {
    check(x, background, groups)?;
    let trees = model.trees.len() as f64;
    let per_b: Vec<[f64; COALITIONS]> = background
        .iter()
        .map(|b| {
            let mut acc = [0.0; COALITIONS];
            for tree in &model.trees {
                walk(tree, 0, x, b, groups, 0, 0, &mut acc);
            }
            acc.map(|s| s / trees)
        })
        .collect();
    let mut v = [0.0; COALITIONS];
    let mut column = vec![0.0; per_b.len()];
    for (s, slot) in v.iter_mut().enumerate() {
        for (c, row) in column.iter_mut().zip(&per_b) {
            *c = row[s];
        }
        *slot = mean_exact(&column);
    }
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    tree: &Tree,
    node: usize,
    x: &[f64],
    b: &[f64],
    groups: &[u8],
    required_in: usize,
    required_out: usize,
    acc: &mut [f64; COALITIONS],
) {
    let f = tree.feature[node];
    if f < 0 {
        let value = tree.value[node];
        for (s, slot) in acc.iter_mut().enumerate() {
            if s & required_in == required_in && s & required_out == 0 {
                *slot += value;
            }
        }
        return;
    }
    let f = f as usize;
    let t = tree.threshold[node];
    let next = |goes_left: bool| {
        if goes_left {
            tree.left[node] as usize
        } else {
            tree.right[node] as usize
        }
    };
    let (gx, gb) = (x[f] <= t, b[f] <= t);
    if gx == gb {
        return walk(tree, next(gx), x, b, groups, required_in, required_out, acc);
    }
    let bit = 1 << groups[f];
    if required_in & bit != 0 {
        walk(tree, next(gx), x, b, groups, required_in, required_out, acc);
    } else if required_out & bit != 0 {
        walk(tree, next(gb), x, b, groups, required_in, required_out, acc);
    } else {
        walk(tree, next(gx), x, b, groups, required_in | bit, required_out, acc);
        walk(tree, next(gb), x, b, groups, required_in, required_out | bit, acc);
    }
}

fn report_from(
    v: &[f64; COALITIONS],
    score: f64,
    decision_ts: Timestamp,
) -> ShapleyReport {
    let phi = shapley_from_values(v);
    ShapleyReport {
        decision_ts,
        base_value: v[0],
        phi: Category::ALL.iter().map(|c| (*c, phi[c.index()])).collect(),
        score,
        feature_effects: BTreeMap::new(),
    }
}

/// Exact category Shapley values for any scorer, by direct enumeration.
pub fn shapley_categories<M: Scorer + ?Sized>(
    model: &M,
    x: &[f64],
    decision_ts: Timestamp,
    background: &[Vec<f64>],
    groups: &[u8],
) -> Result<ShapleyReport, ExplainError> {
    let v = coalition_table(model, x, background, groups)?;
    Ok(report_from(&v, v[FULL], decision_ts))
}

/// Draw up to [`BACKGROUND_SIZE`] vectors uniformly without replacement.
pub fn sample_background(vectors: &[Vec<f64>], seed: u64) -> Vec<Vec<f64>> {
    if vectors.len() <= BACKGROUND_SIZE {
        return vectors.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, vectors.len(), BACKGROUND_SIZE).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| vectors[i].clone()).collect()
}

/// Explains forest predictions against a fixed background set.
#[derive(Clone, Debug)]
pub struct Explainer {
    background: Vec<Vec<f64>>,
    groups: Vec<u8>,
    catalog: FeatureCatalog,
}

impl Explainer {
    pub fn new(background: Vec<Vec<f64>>, catalog: FeatureCatalog) -> Result<Self, ExplainError> {
        if background.is_empty() {
            return Err(ExplainError::EmptyBackground);
        }
        let groups = catalog.category_indices();
        for b in &background {
            if b.len() != groups.len() {
                return Err(ExplainError::DimensionMismatch {
                    expected: groups.len(),
                    found: b.len(),
                });
            }
        }
        Ok(Explainer {
            background,
            groups,
            catalog,
        })
    }

    pub fn background(&self) -> &[Vec<f64>] {
        &self.background
    }

    pub fn groups(&self) -> &[u8] {
        &self.groups
    }

    /// Shapley report plus per-feature effects for the top `top` categories.
    pub fn explain(
        &self,
        model: &ForestModel,
        x: &[f64],
        decision_ts: Timestamp,
        top: usize,
    ) -> Result<ShapleyReport, ExplainError> {
        let v = forest_coalition_table(model, x, &self.background, &self.groups)?;
        let mut report = report_from(&v, v[FULL], decision_ts);
        let wanted: Vec<usize> = report
            .ranked()
            .into_iter()
            .take(top)
            .map(|c| c.index())
            .collect();
        let effects = self.feature_effects(model, x, |f| wanted.contains(&(self.groups[f] as usize)));
        report.feature_effects = effects
            .into_iter()
            .map(|(f, e)| (self.catalog.features[f].feature_id.clone(), e))
            .collect();
        Ok(report)
    }

    /// Mean over background samples of `|f(x) - f(x with x_j := b_j)|` for
    /// each selected feature `j`. Only trees whose path for `x` tests `j`
    /// can change, so only those are re-evaluated.
    fn feature_effects(
        &self,
        model: &ForestModel,
        x: &[f64],
        selected: impl Fn(usize) -> bool,
    ) -> Vec<(usize, f64)> {
        let n_b = self.background.len();
        let n_f = self.groups.len();
        let mut delta = vec![0.0; n_f * n_b];
        let mut touched = vec![false; n_f];
        let mut path_features: Vec<usize> = Vec::new();
        let trees = model.trees.len() as f64;
        for tree in &model.trees {
            path_features.clear();
            let mut node = 0usize;
            while tree.feature[node] >= 0 {
                let f = tree.feature[node] as usize;
                if selected(f) && !path_features.contains(&f) {
                    path_features.push(f);
                }
                node = if x[f] <= tree.threshold[node] {
                    tree.left[node]
                } else {
                    tree.right[node]
                } as usize;
            }
            let base = tree.value[node];
            for &f in &path_features {
                touched[f] = true;
                for (bi, b) in self.background.iter().enumerate() {
                    if b[f] == x[f] {
                        continue;
                    }
                    let alt = predict_override(tree, x, f, b[f]);
                    delta[f * n_b + bi] += (alt - base) / trees;
                }
            }
        }
        (0..n_f)
            .filter(|&f| selected(f))
            .map(|f| {
                let e = if touched[f] {
                    delta[f * n_b..(f + 1) * n_b]
                        .iter()
                        .map(|d| d.abs())
                        .sum::<f64>()
                        / n_b as f64
                } else {
                    0.0
                };
                (f, e)
            })
            .collect()
    }
}

fn predict_override(tree: &Tree, x: &[f64], f: usize, value: f64) -> f64 {
    let mut node = 0usize;
    loop {
        let g = tree.feature[node];
        if g < 0 {
            return tree.value[node];
        }
        let g = g as usize;
        let xv = if g == f { value } else { x[g] };
        node = if xv <= tree.threshold[node] {
            tree.left[node]
        } else {
            tree.right[node]
        } as usize;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CardEntry {
    pub category: Category,
    /// High-level label, also the icon key.
    pub label: String,
    pub phi: f64,
    /// Distinct low-level descriptions of the most influential features.
    pub details: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationCard {
    pub entries: Vec<CardEntry>,
}

/// Top-three categories by phi (ties in category order), each with up to
/// `detail_budget` distinct low-level lines ranked by feature effect.
pub fn render_card(
    report: &ShapleyReport,
    catalog: &FeatureCatalog,
    detail_budget: usize,
) -> ExplanationCard {
    let entries = report
        .ranked()
        .into_iter()
        .take(3)
        .map(|category| {
            let mut feats: Vec<(usize, f64)> = catalog
                .indices_of(category)
                .into_iter()
                .filter_map(|i| {
                    let id = &catalog.features[i].feature_id;
                    report
                        .feature_effects
                        .get(id)
                        .filter(|e| **e > 0.0)
                        .map(|e| (i, *e))
                })
                .collect();
            feats.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut details: Vec<String> = Vec::new();
            for (i, _) in feats {
                let line = &catalog.features[i].low_level_description;
                if !details.contains(line) {
                    details.push(line.clone());
                }
                if details.len() == detail_budget {
                    break;
                }
            }
            CardEntry {
                category,
                label: category.high_level_label().to_string(),
                phi: report.phi_of(category),
                details,
            }
        })
        .collect();
    ExplanationCard { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups() -> Vec<u8> {
        vec![0, 1, 2, 3, 4]
    }

    #[test]
    fn additive_surrogate() {
        let weights = [1.0, -2.0, 0.5, 3.0, 0.0];
        let model = |x: &[f64]| x.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>();
        let x = vec![1.0, 1.0, 1.0, 1.0, 1.0];
        let bg = vec![vec![0.0; 5], vec![2.0, 0.0, 4.0, 1.0, 7.0]];
        let r = shapley_categories(&model, &x, 0, &bg, &groups()).unwrap();
        let means = [1.0, 0.0, 2.0, 0.5, 3.5];
        for c in Category::ALL {
            let i = c.index();
            let expected = weights[i] * (x[i] - means[i]);
            assert!((r.phi_of(c) - expected).abs() < 1e-12, "{c:?}");
        }
        let total: f64 = r.phi.values().sum();
        assert!((r.base_value + total - r.score).abs() < 1e-12);
    }

    #[test]
    fn empty_background_is_an_error() {
        let model = |_: &[f64]| 0.0;
        assert_eq!(
            coalition_value(&model, &[0.0; 5], 0, &[], &groups()),
            Err(ExplainError::EmptyBackground)
        );
    }

    #[test]
    fn full_and_empty_coalitions() {
        let model = |x: &[f64]| x[0] * x[1] + x[4];
        let x = vec![2.0, 3.0, 0.0, 0.0, 1.0];
        let bg = vec![vec![1.0; 5], vec![0.0; 5]];
        let g = groups();
        assert_eq!(coalition_value(&model, &x, FULL, &bg, &g).unwrap(), 7.0);
        assert_eq!(coalition_value(&model, &x, 0, &bg, &g).unwrap(), 1.0);
    }

    #[test]
    fn card_order_and_ties() {
        let catalog = FeatureCatalog::builtin();
        let mut report = ShapleyReport {
            decision_ts: 0,
            base_value: 0.3,
            phi: [
                (Category::PhoneAppUse, 0.30),
                (Category::Location, 0.20),
                (Category::Time, 0.05),
                (Category::Activity, -0.01),
                (Category::Social, -0.02),
            ]
            .into_iter()
            .collect(),
            score: 0.82,
            feature_effects: BTreeMap::new(),
        };
        report
            .feature_effects
            .insert("timeAtTopOneLocation".into(), 0.2);
        report
            .feature_effects
            .insert("timeAtTopTwoLocation".into(), 0.1);
        report.feature_effects.insert("timeAtHome".into(), 0.05);
        let card = render_card(&report, &catalog, 3);
        let order: Vec<_> = card.entries.iter().map(|e| e.category).collect();
        assert_eq!(
            order,
            vec![Category::PhoneAppUse, Category::Location, Category::Time]
        );
        assert_eq!(
            card.entries[1].details,
            vec!["Time at Frequent Locations", "Time at Home"]
        );
        assert_eq!(card.entries[1].label, "Location");

        for c in Category::ALL {
            report.phi.insert(c, 0.1);
        }
        let card = render_card(&report, &catalog, 3);
        let order: Vec<_> = card.entries.iter().map(|e| e.category).collect();
        assert_eq!(
            order,
            vec![Category::PhoneAppUse, Category::Activity, Category::Social]
        );
    }
}
