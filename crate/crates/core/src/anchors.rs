//! Feature-space anchor memory: projection, per-class selection strategies
//! and k-means.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::model::{class_means, cosine_distance, ModelState};
use crate::seed;

/// Embeddings of a dataset, one per sample, in sample order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub session: usize,
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        let s: BTreeSet<usize> = self.labels.iter().copied().collect();
        s.into_iter().collect()
    }

    fn members(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

pub fn project_features(state: &ModelState, data: &Dataset, session: usize) -> Result<FeatureSet> {
    let c = state.config();
    data.check_shape(c.channels, c.time_steps)?;
    Ok(FeatureSet {
        session,
        features: state.embed_all(data)?,
        labels: data.iter().map(|s| s.label).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    RandomSample,
    /// Centroids of `k` clusters per class; the per-class count becomes `k`.
    KMeansCentroids(usize),
    /// The members with the smallest cosine distance to the class mean.
    ClosestToPrototype,
    /// Uniform draws from the closest `⌈p · n⌉` members.
    RandomClosestPercent(f64),
    /// Every member; used for incremental classes.
    FullSet,
}

impl SelectionStrategy {
    pub fn label(&self) -> String {
        match self {
            Self::RandomSample => "random".into(),
            Self::KMeansCentroids(k) => format!("kmeans-{k}"),
            Self::ClosestToPrototype => "closest".into(),
            Self::RandomClosestPercent(p) => format!("random-closest-{:.0}", p * 100.0),
            Self::FullSet => "full".into(),
        }
    }

    /// Parses the labels produced by [`Self::label`].
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(Self::RandomSample),
            "closest" => Some(Self::ClosestToPrototype),
            "full" => Some(Self::FullSet),
            _ => {
                if let Some(k) = s.strip_prefix("kmeans-") {
                    k.parse().ok().filter(|&k| k >= 1).map(Self::KMeansCentroids)
                } else if let Some(p) = s.strip_prefix("random-closest-") {
                    let p: f64 = p.parse().ok()?;
                    (p > 0.0 && p <= 100.0).then(|| Self::RandomClosestPercent(p / 100.0))
                } else {
                    None
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::KMeansCentroids(0) => Err(CoreError::InvalidConfig("k-means needs k >= 1".into())),
            Self::RandomClosestPercent(p) if !(p > 0.0 && p <= 1.0) => Err(CoreError::InvalidConfig(
                format!("closest fraction must lie in (0, 1], got {p}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub feature: Vec<f32>,
    pub class: usize,
    pub session: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub dim: usize,
    pub strategy: SelectionStrategy,
    /// Anchors per class (`P`) chosen for the base selection.
    pub per_class: usize,
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            strategy: SelectionStrategy::FullSet,
            per_class: 0,
            anchors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        let s: BTreeSet<usize> = self.anchors.iter().map(|a| a.class).collect();
        s.into_iter().collect()
    }

    /// Anchors of one session, in stored order.
    pub fn of_session(&self, session: usize) -> AnchorSet {
        AnchorSet {
            anchors: self.anchors.iter().filter(|a| a.session == session).cloned().collect(),
            ..self.clone()
        }
    }

    /// Appends a later session's anchors. Class ids must be disjoint and
    /// dimensions equal; the base strategy tag and `P` are kept.
    pub fn append(&mut self, other: AnchorSet) -> Result<()> {
        if other.dim != self.dim {
            return Err(CoreError::Shape {
                what: "appended anchors",
                expected: vec![self.dim],
                got: vec![other.dim],
            });
        }
        let mine: BTreeSet<usize> = self.classes().into_iter().collect();
        if let Some(k) = other.classes().into_iter().find(|k| mine.contains(k)) {
            return Err(CoreError::DuplicateClass(k));
        }
        self.anchors.extend(other.anchors);
        Ok(())
    }
}

/// Applies `strategy` per class, in ascending class order. Each class gets
/// its own seed stream derived from `seed`.
pub fn select_anchors(
    features: &FeatureSet,
    strategy: &SelectionStrategy,
    per_class: usize,
    seed: u64,
) -> Result<AnchorSet> {
    strategy.validate()?;
    let dim = features.features.first().map(Vec::len).unwrap_or(0);
    let mut anchors = Vec::new();
    let mut p_out = per_class;
    for class in features.classes() {
        let members = features.members(class);
        let n = members.len();
        let class_seed = seed::derive(seed, class as u64);
        let mut rng = seed::rng(class_seed);
        let need = |p: usize| -> Result<()> {
            if n < p {
                Err(CoreError::InsufficientSamples { class, have: n, need: p })
            } else {
                Ok(())
            }
        };
        let chosen: Vec<Vec<f32>> = match *strategy {
            SelectionStrategy::FullSet => {
                p_out = n;
                members.iter().map(|&i| features.features[i].clone()).collect()
            }
            SelectionStrategy::RandomSample => {
                need(per_class)?;
                let mut idx = rand::seq::index::sample(&mut rng, n, per_class).into_vec();
                idx.sort_unstable();
                idx.iter().map(|&j| features.features[members[j]].clone()).collect()
            }
            SelectionStrategy::ClosestToPrototype => {
                need(per_class)?;
                let order = closest_order(features, &members, class)?;
                order[..per_class].iter().map(|&i| features.features[i].clone()).collect()
            }
            SelectionStrategy::RandomClosestPercent(p) => {
                let pool = ((p * n as f64) - 1e-9).ceil().max(1.0) as usize;
                need(per_class)?;
                if pool < per_class {
                    return Err(CoreError::InsufficientSamples { class, have: pool, need: per_class });
                }
                let order = closest_order(features, &members, class)?;
                let mut idx = rand::seq::index::sample(&mut rng, pool, per_class).into_vec();
                idx.sort_unstable();
                idx.iter().map(|&j| features.features[order[j]].clone()).collect()
            }
            SelectionStrategy::KMeansCentroids(k) => {
                p_out = k;
                let pts: Vec<Vec<f32>> = members.iter().map(|&i| features.features[i].clone()).collect();
                kmeans(&pts, k, class_seed, 100)?.centroids
            }
        };
        anchors.extend(chosen.into_iter().map(|feature| Anchor {
            feature,
            class,
            session: features.session,
        }));
    }
    Ok(AnchorSet {
        dim,
        strategy: strategy.clone(),
        per_class: p_out,
        anchors,
    })
}

/// Member indices sorted by cosine distance to the class mean; equal
/// distances keep sample order.
fn closest_order(features: &FeatureSet, members: &[usize], class: usize) -> Result<Vec<usize>> {
    let proto = class_means(&features.features, &features.labels, class)?;
    let mut keyed: Vec<(f64, usize)> = members
        .iter()
        .map(|&i| cosine_distance(&features.features[i], &proto).map(|d| (d, i)))
        .collect::<Result<_>>()?;
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f32>>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from k-means++ seeds. An empty cluster is reseeded to
/// the point farthest from its current centroid.
pub fn kmeans(points: &[Vec<f32>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(CoreError::Empty("k-means points"));
    }
    if k == 0 || k > points.len() {
        return Err(CoreError::InvalidConfig(format!(
            "k-means: k = {k} with {} points",
            points.len()
        )));
    }
    if max_iters == 0 {
        return Err(CoreError::InvalidConfig("k-means: max_iters must be >= 1".into()));
    }
    let pts: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().map(|&v| v as f64).collect())
        .collect();
    let mut rng = seed::rng(seed);
    let mut centroids = plus_plus(&pts, k, &mut rng);
    let n = pts.len();
    let mut assignment = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..max_iters {
        let mut changed = false;
        let mut total = 0.0;
        let mut dist = vec![0.0; n];
        for (i, p) in pts.iter().enumerate() {
            let (best, d) = nearest(p, &centroids);
            if assignment[i] != best {
                changed = true;
                assignment[i] = best;
            }
            dist[i] = d;
            total += d;
        }
        if let Some(&prev) = objective.last() {
            assert!(
                total <= prev * (1.0 + 1e-12) + 1e-12,
                "k-means objective rose from {prev} to {total}"
            );
        }
        objective.push(total);
        if !changed && objective.len() > 1 {
            break;
        }
        let mut sums = vec![vec![0.0; pts[0].len()]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in pts.iter().enumerate() {
            counts[assignment[i]] += 1;
            sums[assignment[i]].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids[c] = sums[c].iter().map(|s| s * inv).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("nonempty");
                centroids[c] = pts[far].clone();
                dist[far] = 0.0;
            }
        }
    }
    Ok(KMeansResult {
        centroids: centroids
            .into_iter()
            .map(|c| c.into_iter().map(|v| v as f32).collect())
            .collect(),
        assignment,
        objective,
    })
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus(pts: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = pts.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &pts[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // every point coincides with a centre: take unchosen ones in order
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in pts.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &pts[next]));
        }
    }
    chosen.into_iter().map(|i| pts[i].clone()).collect()
}
