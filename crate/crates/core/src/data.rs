//! Samples, synthetic generation, ingestion, standardization, segmentation
//! and session splitting.
//!
//! Sample payload files are raw little-endian `f32`, row-major `H x W`,
//! without a header; the shape lives in the manifest.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use anchorinv_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::seed::{self, stream};

/// One `H x W` time series with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Shape `[H, W]`.
    pub x: Tensor<f32>,
    pub label: usize,
    pub session: usize,
    /// Generator seed for synthetic samples, entry index for ingested ones.
    pub id: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.samples.iter().map(|s| s.label).collect();
        set.into_iter().collect()
    }

    pub fn count(&self, class: usize) -> usize {
        self.samples.iter().filter(|s| s.label == class).count()
    }

    pub fn of_class(&self, class: usize) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.label == class)
    }

    /// Samples whose label is in `classes`, order preserved.
    pub fn restrict(&self, classes: &[usize]) -> Dataset {
        Dataset::new(
            self.samples
                .iter()
                .filter(|s| classes.contains(&s.label))
                .cloned()
                .collect(),
        )
    }

    pub fn with_session(mut self, session: usize) -> Self {
        for s in &mut self.samples {
            s.session = session;
        }
        self
    }

    pub fn extend(&mut self, other: Dataset) {
        self.samples.extend(other.samples);
    }

    /// Checks every sample against `[channels, length]`.
    pub fn check_shape(&self, channels: usize, length: usize) -> Result<()> {
        for s in &self.samples {
            if s.x.shape() != [channels, length] {
                return Err(CoreError::Shape {
                    what: "sample",
                    expected: vec![channels, length],
                    got: s.x.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Sample;
    type IntoIter = std::slice::Iter<'a, Sample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

// ---------------------------------------------------------------------------
// standardization

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and population standard deviation over every training
/// timestep, accumulated with Welford's update.
pub fn zscore_fit(train: &Dataset) -> Result<StandardizationStats> {
    let first = train.samples.first().ok_or(CoreError::Empty("training set"))?;
    let (h, w) = (first.x.shape()[0], first.x.shape()[1]);
    train.check_shape(h, w)?;
    let mut mean = vec![0.0f64; h];
    let mut m2 = vec![0.0f64; h];
    let mut n = 0.0f64;
    for s in train {
        for t in 0..w {
            n += 1.0;
            for c in 0..h {
                let v = s.x.data()[c * w + t] as f64;
                let delta = v - mean[c];
                mean[c] += delta / n;
                m2[c] += delta * (v - mean[c]);
            }
        }
    }
    let std = m2.iter().map(|&m| (m / n).sqrt().max(STD_FLOOR)).collect();
    Ok(StandardizationStats { mean, std })
}

fn check_channels(sample: &Sample, stats: &StandardizationStats) -> Result<usize> {
    let h = sample.x.shape()[0];
    if h != stats.mean.len() {
        return Err(CoreError::Shape {
            what: "standardization channels",
            expected: vec![stats.mean.len()],
            got: vec![h],
        });
    }
    Ok(sample.x.shape()[1])
}

/// `(x - mean) / std` per channel.
pub fn zscore_apply(sample: &Sample, stats: &StandardizationStats) -> Result<Sample> {
    let w = check_channels(sample, stats)?;
    let mut out = sample.clone();
    for (i, v) in out.x.data_mut().iter_mut().enumerate() {
        let c = i / w;
        *v = ((*v as f64 - stats.mean[c]) / stats.std[c]) as f32;
    }
    Ok(out)
}

/// Inverse of [`zscore_apply`].
pub fn zscore_invert(sample: &Sample, stats: &StandardizationStats) -> Result<Sample> {
    let w = check_channels(sample, stats)?;
    let mut out = sample.clone();
    for (i, v) in out.x.data_mut().iter_mut().enumerate() {
        let c = i / w;
        *v = (*v as f64 * stats.std[c] + stats.mean[c]) as f32;
    }
    Ok(out)
}

pub fn zscore_apply_all(data: &Dataset, stats: &StandardizationStats) -> Result<Dataset> {
    Ok(Dataset::new(
        data.iter().map(|s| zscore_apply(s, stats)).collect::<Result<_>>()?,
    ))
}

// ---------------------------------------------------------------------------
// segmentation

/// Hop in timesteps for a window and overlap fraction, rounded down.
pub fn segment_hop(window: usize, overlap: f64) -> usize {
    // 10 * (1 - 0.7) evaluates to 2.9999999999999996
    ((window as f64 * (1.0 - overlap)) + 1e-9).floor().max(1.0) as usize
}

pub fn segment_count(length: usize, window: usize, overlap: f64) -> Result<usize> {
    check_segment_args(length, window, overlap)?;
    Ok((length - window) / segment_hop(window, overlap) + 1)
}

fn check_segment_args(length: usize, window: usize, overlap: f64) -> Result<()> {
    if window == 0 || !(0.0..1.0).contains(&overlap) {
        return Err(CoreError::InvalidConfig(format!(
            "segment: window {window} and overlap {overlap} must satisfy W > 0, 0 <= overlap < 1"
        )));
    }
    if length < window {
        return Err(CoreError::InvalidConfig(format!(
            "segment: recording length {length} shorter than window {window}"
        )));
    }
    Ok(())
}

/// Cuts an `[H, L]` recording into left-aligned `[H, W]` windows; the
/// trailing remainder is dropped.
pub fn segment(recording: &Tensor<f32>, window: usize, overlap: f64) -> Result<Vec<Tensor<f32>>> {
    let [h, l] = match recording.shape() {
        &[h, l] => [h, l],
        s => {
            return Err(CoreError::Shape {
                what: "recording",
                expected: vec![0, 0],
                got: s.to_vec(),
            })
        }
    };
    let count = segment_count(l, window, overlap)?;
    let hop = segment_hop(window, overlap);
    let src = recording.data();
    (0..count)
        .map(|i| {
            let start = i * hop;
            let mut data = Vec::with_capacity(h * window);
            for c in 0..h {
                data.extend_from_slice(&src[c * l + start..c * l + start + window]);
            }
            Ok(Tensor::new(vec![h, window], data)?)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// synthetic generation

/// Generative parameters of one class: a sum of sinusoids whose
/// frequencies are given in cycles per window, scaled per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    /// `(cycles per window, amplitude)` pairs.
    pub components: Vec<(f64, f64)>,
    /// Gain of every component on each channel.
    pub channel_gains: Vec<f64>,
    /// Random phase offsets are drawn from `[0, 2π · phase_jitter)`.
    pub phase_jitter: f64,
    /// White-noise standard deviation.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub channels: usize,
    pub length: usize,
    pub classes: Vec<ClassParams>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// A family of `num_classes` classes on an interleaved frequency grid.
    ///
    /// Class `k` carries a dominant component at a distinct frequency and a
    /// weaker shared-band component, with its own channel gain pattern.
    /// Frequencies of neighbouring class ids are far apart so the class
    /// order does not follow frequency order. With `noise` below about half
    /// the dominant amplitude the classes stay separable by spectral energy.
    pub fn family(
        channels: usize,
        length: usize,
        num_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        noise: f64,
        seed: u64,
    ) -> Self {
        let mut rng = seed::rng(seed::derive(seed, stream::SYNTH));
        let mut grid: Vec<usize> = (0..num_classes).collect();
        grid.shuffle(&mut rng);
        let lo = 2.0;
        let hi = (length as f64 / 4.0).max(lo + num_classes as f64);
        let step = (hi - lo) / num_classes.max(1) as f64;
        let classes = grid
            .iter()
            .map(|&slot| {
                let f = lo + step * (slot as f64 + 0.5);
                let shared = lo + rng.random_range(0.0..(hi - lo));
                let gains = (0..channels).map(|_| rng.random_range(0.2..1.0)).collect();
                ClassParams {
                    components: vec![(f, 1.0), (shared, 0.35)],
                    channel_gains: gains,
                    phase_jitter: 1.0,
                    noise,
                }
            })
            .collect();
        Self {
            channels,
            length,
            classes,
            train_per_class,
            test_per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.length == 0 || self.classes.is_empty() {
            return Err(CoreError::InvalidConfig(
                "synth: channels, length and class list must be nonempty".into(),
            ));
        }
        for (k, c) in self.classes.iter().enumerate() {
            if c.channel_gains.len() != self.channels {
                return Err(CoreError::InvalidConfig(format!(
                    "synth: class {k} has {} channel gains for {} channels",
                    c.channel_gains.len(),
                    self.channels
                )));
            }
            if c.noise < 0.0 || !c.noise.is_finite() {
                return Err(CoreError::InvalidConfig(format!("synth: class {k} noise must be >= 0")));
            }
        }
        for a in 0..self.classes.len() {
            for b in a + 1..self.classes.len() {
                if self.classes[a] == self.classes[b] {
                    return Err(CoreError::InvalidConfig(format!(
                        "synth: classes {a} and {b} have identical parameters"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Seed of sample `index` of `class` in `split` (0 = train, 1 = test).
pub fn synth_sample_seed(spec_seed: u64, class: usize, split: u64, index: usize) -> u64 {
    let s = seed::derive(spec_seed, stream::SYNTH);
    let s = seed::derive(s, split);
    let s = seed::derive(s, class as u64);
    seed::derive(s, index as u64)
}

/// Renders one sample of `params` from its seed.
pub fn synth_sample(channels: usize, length: usize, params: &ClassParams, seed: u64) -> Tensor<f32> {
    let mut rng = seed::rng(seed);
    let phases: Vec<f64> = params
        .components
        .iter()
        .map(|_| rng.random_range(0.0..1.0) * 2.0 * PI * params.phase_jitter)
        .collect();
    let mut data = Vec::with_capacity(channels * length);
    for c in 0..channels {
        let gain = params.channel_gains[c];
        for t in 0..length {
            let tt = t as f64 / length as f64;
            let clean: f64 = params
                .components
                .iter()
                .zip(&phases)
                .map(|(&(f, a), &p)| a * (2.0 * PI * f * tt + p).sin())
                .sum();
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((gain * clean + params.noise * z) as f32);
        }
    }
    Tensor::new(vec![channels, length], data).expect("shape matches data")
}

/// Generates `(train, test)`; the splits are disjoint by sample seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let split = |tag: u64, per_class: usize| {
        let mut samples = Vec::with_capacity(per_class * spec.classes.len());
        for (k, params) in spec.classes.iter().enumerate() {
            for i in 0..per_class {
                let id = synth_sample_seed(spec.seed, k, tag, i);
                samples.push(Sample {
                    x: synth_sample(spec.channels, spec.length, params, id),
                    label: k,
                    session: 0,
                    id,
                });
            }
        }
        Dataset::new(samples)
    };
    Ok((split(0, spec.train_per_class), split(1, spec.test_per_class)))
}

// ---------------------------------------------------------------------------
// manifest ingestion

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path of the payload, relative to the manifest root.
    pub file: String,
    pub class: usize,
    #[serde(default)]
    pub subject: usize,
    pub split: Split,
    #[serde(default)]
    pub synthetic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Payload root, relative to the manifest file's directory.
    pub root: String,
    pub channels: usize,
    pub length: usize,
    pub sample_rate: f64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let classes: BTreeSet<usize> = self.entries.iter().map(|e| e.class).collect();
        if let Some(&max) = classes.iter().next_back() {
            if classes.len() != max + 1 {
                return Err(CoreError::InvalidConfig(
                    "manifest: class ids must be contiguous from 0".into(),
                ));
            }
        }
        if self.channels == 0 || self.length == 0 {
            return Err(CoreError::InvalidConfig("manifest: empty sample shape".into()));
        }
        Ok(())
    }
}

fn read_payload(path: &Path, channels: usize, length: usize) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != channels * length * 4 {
        return Err(CoreError::Format {
            path: path.to_path_buf(),
            msg: format!(
                "payload has {} bytes, expected {} for {channels}x{length} f32",
                bytes.len(),
                channels * length * 4
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::new(vec![channels, length], data)?)
}

fn write_payload(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(x.numel() * 4);
    for v in x.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a manifest and decodes every payload into `(train, test)`.
pub fn read_manifest(path: &Path) -> Result<(DatasetManifest, Dataset, Dataset)> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| CoreError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    manifest.validate()?;
    let root = path.parent().unwrap_or(Path::new(".")).join(&manifest.root);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let sample = Sample {
            x: read_payload(&root.join(&e.file), manifest.channels, manifest.length)?,
            label: e.class,
            session: 0,
            id: i as u64,
        };
        match e.split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok((manifest, Dataset::new(train), Dataset::new(test)))
}

/// Writes `train` and `test` as payload files under `dir/samples` plus
/// `dir/manifest.json`. Returns the manifest path.
pub fn write_manifest(
    dir: &Path,
    train: &Dataset,
    test: &Dataset,
    sample_rate: f64,
    synthetic: bool,
) -> Result<PathBuf> {
    let first = train
        .samples
        .first()
        .or(test.samples.first())
        .ok_or(CoreError::Empty("dataset"))?;
    let (h, w) = (first.x.shape()[0], first.x.shape()[1]);
    let payload_dir = dir.join("samples");
    fs::create_dir_all(&payload_dir).map_err(io_err(&payload_dir))?;
    let mut entries = Vec::new();
    for (split, data) in [(Split::Train, train), (Split::Test, test)] {
        data.check_shape(h, w)?;
        for (i, s) in data.iter().enumerate() {
            let tag = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let file = format!("{tag}_{i:06}.f32");
            write_payload(&payload_dir.join(&file), &s.x)?;
            entries.push(ManifestEntry {
                file,
                class: s.label,
                subject: 0,
                split,
                synthetic,
            });
        }
    }
    let manifest = DatasetManifest {
        root: "samples".into(),
        channels: h,
        length: w,
        sample_rate,
        entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// sessions

/// Session index, its classes, and the few-shot shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub index: usize,
    pub classes: Vec<usize>,
    pub way: usize,
    pub shot: usize,
}

/// Session 0 holds all training data of the base classes; every later
/// session holds the pool of its `way` classes, from which trials draw
/// `shot` samples per class.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionSplit {
    pub base: Dataset,
    pub pools: Vec<Dataset>,
    pub specs: Vec<SessionSpec>,
}

impl SessionSplit {
    pub fn base_classes(&self) -> &[usize] {
        &self.specs[0].classes
    }

    /// Classes seen up to and including `session`.
    pub fn seen_classes(&self, session: usize) -> Vec<usize> {
        let mut all: Vec<usize> = self.specs[..=session]
            .iter()
            .flat_map(|s| s.classes.iter().copied())
            .collect();
        all.sort_unstable();
        all
    }

    pub fn incremental_sessions(&self) -> usize {
        self.pools.len()
    }
}

/// Assigns the remaining classes to incremental sessions in ascending id
/// order, `way` classes per session.
pub fn split_sessions(
    train: &Dataset,
    base_classes: &[usize],
    way: usize,
    shot: usize,
) -> Result<SessionSplit> {
    if way == 0 || shot == 0 {
        return Err(CoreError::InvalidConfig("way and shot must be positive".into()));
    }
    let all = train.classes();
    let base: BTreeSet<usize> = base_classes.iter().copied().collect();
    if base.len() != base_classes.len() {
        return Err(CoreError::InvalidConfig("base classes listed twice".into()));
    }
    for c in &base {
        if !all.contains(c) {
            return Err(CoreError::UnknownClass(*c));
        }
    }
    let rest: Vec<usize> = all.iter().copied().filter(|c| !base.contains(c)).collect();
    if rest.len() % way != 0 {
        return Err(CoreError::InvalidConfig(format!(
            "{} incremental classes do not divide into sessions of {way}",
            rest.len()
        )));
    }
    for &c in &rest {
        let have = train.count(c);
        if have < shot {
            return Err(CoreError::InsufficientSamples { class: c, have, need: shot });
        }
    }
    let base_ids: Vec<usize> = base.iter().copied().collect();
    let mut specs = vec![SessionSpec {
        index: 0,
        classes: base_ids.clone(),
        way: base_ids.len(),
        shot: 0,
    }];
    let mut pools = Vec::new();
    for (i, chunk) in rest.chunks(way).enumerate() {
        specs.push(SessionSpec {
            index: i + 1,
            classes: chunk.to_vec(),
            way,
            shot,
        });
        pools.push(train.restrict(chunk).with_session(i + 1));
    }
    Ok(SessionSplit {
        base: train.restrict(&base_ids).with_session(0),
        pools,
        specs,
    })
}

/// Draws `shot` samples per class from `pool` without replacement, in
/// pool order within each class.
pub fn sample_few_shot(pool: &Dataset, shot: usize, seed: u64) -> Result<Dataset> {
    let mut rng = seed::rng(seed);
    let mut out = Vec::new();
    for class in pool.classes() {
        let members: Vec<&Sample> = pool.of_class(class).collect();
        if members.len() < shot {
            return Err(CoreError::InsufficientSamples {
                class,
                have: members.len(),
                need: shot,
            });
        }
        let mut idx = rand::seq::index::sample(&mut rng, members.len(), shot).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| members[i].clone()));
    }
    Ok(Dataset::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, data: Vec<f32>, label: usize) -> Sample {
        Sample {
            x: Tensor::new(vec![h, w], data).unwrap(),
            label,
            session: 0,
            id: 0,
        }
    }

    #[test]
    fn zscore_constant_and_symmetric() {
        let d = Dataset::new(vec![sample(2, 2, vec![3.0, 3.0, -1.0, 1.0], 0)]);
        let s = zscore_fit(&d).unwrap();
        assert_eq!(s.mean, vec![3.0, 0.0]);
        assert_eq!(s.std, vec![STD_FLOOR, 1.0]);
    }

    #[test]
    fn zscore_identity_stats() {
        let x = sample(1, 3, vec![0.5, -2.0, 7.0], 0);
        let id = StandardizationStats { mean: vec![0.0], std: vec![1.0] };
        assert_eq!(zscore_apply(&x, &id).unwrap(), x);
    }

    #[test]
    fn zscore_rejects_channel_mismatch() {
        let x = sample(2, 1, vec![0.0, 1.0], 0);
        let stats = StandardizationStats { mean: vec![0.0], std: vec![1.0] };
        assert!(zscore_apply(&x, &stats).is_err());
        assert!(zscore_fit(&Dataset::default()).is_err());
    }

    #[test]
    fn segment_small_cases() {
        assert_eq!(segment_count(3600, 60, 0.5).unwrap(), 119);
        assert_eq!(segment_count(30, 10, 0.0).unwrap(), 3);
        assert_eq!(segment_count(10, 10, 0.3).unwrap(), 1);
        assert!(segment_count(9, 10, 0.0).is_err());
        let rec = Tensor::new(vec![1, 5], vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let parts = segment(&rec, 3, 0.5).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[1].data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn split_counts_sessions() {
        let mut samples = Vec::new();
        for k in 0..4 {
            for _ in 0..3 {
                samples.push(sample(1, 1, vec![k as f32], k));
            }
        }
        let d = Dataset::new(samples);
        let s = split_sessions(&d, &[0, 1], 1, 2).unwrap();
        assert_eq!(s.incremental_sessions(), 2);
        assert_eq!(s.specs[1].classes, vec![2]);
        assert_eq!(s.specs[2].classes, vec![3]);
        assert_eq!(s.seen_classes(1), vec![0, 1, 2]);
        assert!(split_sessions(&d, &[0, 1], 1, 4).is_err());
        assert!(split_sessions(&d, &[0, 7], 1, 1).is_err());
    }
}
