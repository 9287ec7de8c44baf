//! Multi-trial evaluation: macro-F1 metrics, paired trials across methods,
//! summary statistics and the Wilcoxon signed-rank test.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{sample_few_shot, Dataset, SessionSplit};
use crate::error::{CoreError, Result};
use crate::model::ModelState;
use crate::seed::{self, stream};
use crate::trainer::{run_fscil, BaseMemory, FscilConfig, Method, SessionFeed};

/// Per-class F1 over the whole confusion matrix for each class of `subset`.
/// A class with no predictions and no positives scores 0.
pub fn per_class_f1(predictions: &[usize], labels: &[usize], subset: &[usize]) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(CoreError::Shape {
            what: "predictions",
            expected: vec![labels.len()],
            got: vec![predictions.len()],
        });
    }
    if subset.is_empty() {
        return Err(CoreError::Empty("class subset"));
    }
    let mut tp: BTreeMap<usize, usize> = BTreeMap::new();
    let mut fp: BTreeMap<usize, usize> = BTreeMap::new();
    let mut fne: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            *tp.entry(y).or_default() += 1;
        } else {
            *fp.entry(p).or_default() += 1;
            *fne.entry(y).or_default() += 1;
        }
    }
    Ok(subset
        .iter()
        .map(|k| {
            let tp = *tp.get(k).unwrap_or(&0) as f64;
            let fp = *fp.get(k).unwrap_or(&0) as f64;
            let fne = *fne.get(k).unwrap_or(&0) as f64;
            let denom = 2.0 * tp + fp + fne;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .collect())
}

/// Mean per-class F1 over `subset`, in percent.
pub fn macro_f1(predictions: &[usize], labels: &[usize], subset: &[usize]) -> Result<f64> {
    let f = per_class_f1(predictions, labels, subset)?;
    Ok(100.0 * f.iter().sum::<f64>() / f.len() as f64)
}

/// Expected macro-F1 of uniform guessing on a balanced set: `100 / C`.
pub fn random_chance_f1(classes: usize) -> Result<f64> {
    if classes == 0 {
        return Err(CoreError::Empty("class count"));
    }
    Ok(100.0 / classes as f64)
}

/// Mean and population standard deviation, two passes.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Largest sample size for which the exact null distribution is used.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided p-value of the signed-rank test on `a − b`. Zero differences
/// are dropped; if none remain the p-value is 1. Up to 25 differences the
/// null distribution of W+ is computed exactly by a subset-sum recurrence
/// over doubled ranks (exact under ties too); above that the normal
/// approximation with tie-corrected variance is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::Shape {
            what: "paired scores",
            expected: vec![a.len()],
            got: vec![b.len()],
        });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Ok(1.0);
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    if n <= WILCOXON_EXACT_MAX {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let w2 = (2.0 * w_plus).round() as usize;
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
        return Ok((2.0 * lower.min(upper)).min(1.0));
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (w_plus - mean) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok((2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0))
}

// ---------------------------------------------------------------------------
// trials

#[derive(Clone, Debug, PartialEq)]
pub struct TrialPlan {
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Worker threads; trials and methods run in parallel.
    pub workers: usize,
}

impl TrialPlan {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(CoreError::InvalidConfig("trial count must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(CoreError::Empty("method list"));
        }
        for m in &self.methods {
            m.validate()?;
        }
        Ok(())
    }
}

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    seed::derive(seed::derive(master, stream::TRIAL), trial as u64)
}

/// One few-shot training set per incremental session, drawn without
/// replacement from the session pools.
pub fn sample_trial_sets(split: &SessionSplit, trial_seed: u64) -> Result<Vec<Dataset>> {
    let few = seed::derive(trial_seed, stream::FEW_SHOT);
    split
        .pools
        .iter()
        .zip(&split.specs[1..])
        .map(|(pool, spec)| sample_few_shot(pool, spec.shot, seed::derive(few, spec.index as u64)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionScores {
    pub all: f64,
    pub base: f64,
    /// Absent for the base session.
    pub incremental: Option<f64>,
}

/// Macro-F1 of `state` on the test samples of the classes seen so far.
pub fn evaluate_session(state: &ModelState, test: &Dataset, seen: &[usize], base_classes: &[usize]) -> Result<SessionScores> {
    let subset = test.restrict(seen);
    if subset.is_empty() {
        return Err(CoreError::Empty("test set for seen classes"));
    }
    let labels: Vec<usize> = subset.iter().map(|s| s.label).collect();
    let pred = state.predict_all(&subset)?;
    let inc: Vec<usize> = seen.iter().copied().filter(|k| !base_classes.contains(k)).collect();
    let base: Vec<usize> = seen.iter().copied().filter(|k| base_classes.contains(k)).collect();
    Ok(SessionScores {
        all: macro_f1(&pred, &labels, seen)?,
        base: macro_f1(&pred, &labels, &base)?,
        incremental: if inc.is_empty() {
            None
        } else {
            Some(macro_f1(&pred, &labels, &inc)?)
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Self {
            mean,
            std,
            median: median(xs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: usize,
    pub all: Stat,
    pub base: Stat,
    pub incremental: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    /// `scores[trial][session]`, session 0 being the base model.
    pub scores: Vec<Vec<SessionScores>>,
    pub summary: Vec<SessionSummary>,
}

impl MethodReport {
    /// Per-trial values of one metric in the final session.
    pub fn final_metric(&self, metric: Metric) -> Vec<f64> {
        self.scores
            .iter()
            .map(|s| metric.pick(s.last().expect("at least the base session")))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    All,
    Base,
    Incremental,
}

impl Metric {
    pub fn pick(self, s: &SessionScores) -> f64 {
        match self {
            Self::All => s.all,
            Self::Base => s.base,
            Self::Incremental => s.incremental.unwrap_or(f64::NAN),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub a: String,
    pub b: String,
    pub metric: Metric,
    /// Median over trials of `a − b` in the final session.
    pub median_difference: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trials: usize,
    pub seed: u64,
    pub sessions: usize,
    pub methods: Vec<MethodReport>,
    pub tests: Vec<PairedTest>,
}

impl TrialReport {
    pub fn method(&self, label: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Text table: all-class macro-F1 per session as `mean ± std`, then the
    /// final-session base and incremental split, then the paired tests.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut header = format!("{:<14}{:>16}", "method", "base session");
        for t in 1..self.sessions {
            header += &format!("{:>16}", format!("session {t}"));
        }
        header += &format!("{:>16}{:>16}", "final base", "final incr");
        let _ = writeln!(out, "{header}");
        let _ = writeln!(out, "{}", "-".repeat(header.len()));
        let cell = |s: &Stat| format!("{:.2} ± {:.2}", s.mean, s.std);
        for m in &self.methods {
            let mut row = format!("{:<14}", m.method);
            for s in &m.summary {
                row += &format!("{:>16}", cell(&s.all));
            }
            let last = m.summary.last().expect("base session");
            row += &format!("{:>16}", cell(&last.base));
            row += &format!("{:>16}", last.incremental.as_ref().map(cell).unwrap_or_else(|| "-".into()));
            let _ = writeln!(out, "{row}");
        }
        if !self.tests.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "paired Wilcoxon signed-rank, final session, {} trials", self.trials);
            for t in &self.tests {
                let metric = match t.metric {
                    Metric::All => "all",
                    Metric::Base => "base",
                    Metric::Incremental => "incremental",
                };
                let _ = writeln!(
                    out,
                    "  {} vs {} ({metric}): median diff {:+.2}, p = {:.4}",
                    t.a, t.b, t.median_difference, t.p_value
                );
            }
        }
        out
    }
}

fn summarise(scores: &[Vec<SessionScores>]) -> Vec<SessionSummary> {
    let sessions = scores.first().map(Vec::len).unwrap_or(0);
    (0..sessions)
        .map(|t| {
            let col = |f: &dyn Fn(&SessionScores) -> Option<f64>| -> Option<Stat> {
                let v: Option<Vec<f64>> = scores.iter().map(|s| f(&s[t])).collect();
                v.map(|v| Stat::of(&v))
            };
            SessionSummary {
                session: t,
                all: col(&|s| Some(s.all)).expect("always present"),
                base: col(&|s| Some(s.base)).expect("always present"),
                incremental: col(&|s| s.incremental),
            }
        })
        .collect()
}

/// `M` paired adaptation chains per method from copies of `base`. Trial
/// `m` draws the same few-shot sets and sub-seeds for every method, so
/// scores pair up across methods. Aggregation follows trial index, so the
/// report does not depend on execution order.
pub fn run_trials(
    base: &ModelState,
    memory: &BaseMemory,
    split: &SessionSplit,
    test: &Dataset,
    plan: &TrialPlan,
    config: &FscilConfig,
) -> Result<TrialReport> {
    plan.validate()?;
    let sessions = split.specs.len();
    let base_classes = split.base_classes().to_vec();
    let base_scores = evaluate_session(base, test, &base_classes, &base_classes)?;
    let jobs: Vec<(usize, usize)> = (0..plan.trials)
        .flat_map(|m| (0..plan.methods.len()).map(move |j| (m, j)))
        .collect();
    let run = |&(m, j): &(usize, usize)| -> Result<Vec<SessionScores>> {
        let ts = trial_seed(plan.seed, m);
        let sets = sample_trial_sets(split, ts)?;
        let chain = run_fscil(base, memory, SessionFeed::new(sets), &plan.methods[j], config, ts)?;
        let mut out = vec![base_scores];
        for (t, state) in chain.states.iter().enumerate().skip(1) {
            out.push(evaluate_session(state, test, &split.seen_classes(t), &base_classes)?);
        }
        Ok(out)
    };
    let results: Vec<Result<Vec<SessionScores>>> = if plan.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(plan.workers)
            .build()
            .map_err(|e| CoreError::InvalidConfig(format!("worker pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };
    let mut per_method: Vec<Vec<Vec<SessionScores>>> = vec![Vec::with_capacity(plan.trials); plan.methods.len()];
    for ((m, j), r) in jobs.iter().zip(results) {
        let scores = r.map_err(|e| CoreError::Trial {
            trial: *m,
            method: plan.methods[*j].label(),
            source: Box::new(e),
        })?;
        per_method[*j].push(scores);
    }
    let methods: Vec<MethodReport> = plan
        .methods
        .iter()
        .zip(per_method)
        .map(|(method, scores)| MethodReport {
            method: method.label().to_string(),
            summary: summarise(&scores),
            scores,
        })
        .collect();
    let tests = paired_tests(&methods)?;
    Ok(TrialReport {
        trials: plan.trials,
        seed: plan.seed,
        sessions,
        methods,
        tests,
    })
}

/// The reference method (AnchorInv when present, else the first) against
/// every other method on all-class and base-class macro-F1.
fn paired_tests(methods: &[MethodReport]) -> Result<Vec<PairedTest>> {
    let Some(reference) = methods
        .iter()
        .find(|m| m.method == Method::AnchorInv.label())
        .or(methods.first())
    else {
        return Ok(Vec::new());
    };
    if reference.scores.first().map(Vec::len).unwrap_or(0) < 2 {
        return Ok(Vec::new());
    }
    let mut tests = Vec::new();
    for other in methods.iter().filter(|m| m.method != reference.method) {
        for metric in [Metric::All, Metric::Base] {
            let a = reference.final_metric(metric);
            let b = other.final_metric(metric);
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            tests.push(PairedTest {
                a: reference.method.clone(),
                b: other.method.clone(),
                metric,
                median_difference: median(&diffs),
                p_value: wilcoxon_signed_rank(&a, &b)?,
            });
        }
    }
    Ok(tests)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_hand_computed() {
        // class 0: TP 3, FP 1, FN 2
        let labels = [0, 0, 0, 0, 0, 1, 1];
        let pred = [0, 0, 0, 1, 1, 0, 1];
        let f = per_class_f1(&pred, &labels, &[0]).unwrap();
        assert!((f[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_f1(&labels, &labels, &[0, 1]).unwrap(), 100.0);
    }

    #[test]
    fn absent_class_scores_zero() {
        let f = per_class_f1(&[0, 0], &[0, 0], &[0, 5]).unwrap();
        assert_eq!(f, vec![1.0, 0.0]);
        assert!(macro_f1(&[0], &[0], &[]).is_err());
    }

    #[test]
    fn chance_levels() {
        assert_eq!(random_chance_f1(16).unwrap(), 6.25);
        assert!((random_chance_f1(14).unwrap() - 7.142857142857143).abs() < 1e-12);
        assert!(random_chance_f1(0).is_err());
    }

    #[test]
    fn wilcoxon_small_cases() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        assert!((wilcoxon_signed_rank(&a, &b).unwrap() - 2.0 / 32.0).abs() < 1e-15);
        assert_eq!(wilcoxon_signed_rank(&a, &a).unwrap(), 1.0);
        assert!(wilcoxon_signed_rank(&a, &b[..4]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert_eq!(s, 2.0);
    }
}
