//! Versioned little-endian binary container for checkpoints and anchor
//! stores.
//!
//! ```text
//! header   "AINV" | version: u32 | kind: u8 (1 = checkpoint, 2 = anchors)
//!
//! checkpoint
//!   channels, time_steps, filters, temporal_kernel, temporal_stride,
//!   pool_kernel, pool_stride: u32 each | activation: u8 | temperature: f64
//!   tensor count: u32, then per tensor
//!     name length: u32 | name: utf-8 | rank: u32 | dims: u32 * rank | data: f32 * numel
//!   class count: u32, then per class
//!     class id: u32 | dim: u32 | data: f32 * dim
//!   stats flag: u8, then if 1
//!     dim: u32 | mean: f32 * dim | var: f32 * dim
//!
//! anchors
//!   dim: u32 | strategy tag: u8 | strategy parameter: f64 | per class: u32
//!   entry count: u32, then per entry
//!     class id: u32 | session: u32 | data: f32 * dim
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anchorinv_tensor::Tensor;

use crate::anchors::{Anchor, AnchorSet, SelectionStrategy};
use crate::error::{io_err, CoreError, Result};
use crate::model::{Activation, Backbone, BackboneConfig, FeatureStats, ModelState, PARAM_NAMES};

pub const MAGIC: &[u8; 4] = b"AINV";
pub const VERSION: u32 = 1;
pub const KIND_CHECKPOINT: u8 = 1;
pub const KIND_ANCHORS: u8 = 2;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(kind: u8) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u8(kind);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("container field exceeds u32"));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> CoreError {
        CoreError::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn header(&mut self, kind: u8) -> Result<()> {
        if self.take(4)? != MAGIC {
            return Err(self.err("not an AINV container"));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(self.err(format!("unsupported version {version}, expected {VERSION}")));
        }
        let k = self.u8()?;
        if k != kind {
            return Err(self.err(format!("container kind {k}, expected {kind}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let mut w = Writer::header(KIND_CHECKPOINT);
    let c = &state.backbone.config;
    for v in [
        c.channels,
        c.time_steps,
        c.filters,
        c.temporal_kernel,
        c.temporal_stride,
        c.pool_kernel,
        c.pool_stride,
    ] {
        w.usize(v);
    }
    w.u8(match c.activation {
        Activation::Relu => 0,
        Activation::Identity => 1,
    });
    w.f64(state.temperature);
    let params = state.backbone.named_params();
    w.usize(params.len());
    for (name, t) in params {
        w.usize(name.len());
        w.buf.extend_from_slice(name.as_bytes());
        w.usize(t.shape().len());
        for &d in t.shape() {
            w.usize(d);
        }
        w.f32s(t.data());
    }
    w.usize(state.phi.len());
    for (&k, t) in &state.phi {
        w.usize(k);
        w.usize(t.numel());
        w.f32s(t.data());
    }
    match &state.feature_stats {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.usize(s.mean.len());
            w.f32s(&s.mean);
            w.f32s(&s.var);
        }
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0, path };
    r.header(KIND_CHECKPOINT)?;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Identity,
        a => return Err(r.err(format!("unknown activation tag {a}"))),
    };
    let config = BackboneConfig {
        channels: dims[0],
        time_steps: dims[1],
        filters: dims[2],
        temporal_kernel: dims[3],
        temporal_stride: dims[4],
        pool_kernel: dims[5],
        pool_stride: dims[6],
        activation,
    };
    config.validate()?;
    let temperature = r.f64()?;
    let count = r.usize()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.usize()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("tensor name is not utf-8"))?;
        let rank = r.usize()?;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(shape.iter().product())?;
        let expected = Backbone::param_shape(&config, &name)
            .ok_or_else(|| r.err(format!("unknown tensor `{name}`")))?;
        if expected != shape {
            return Err(r.err(format!("tensor `{name}` has shape {shape:?}, expected {expected:?}")));
        }
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| CoreError::Format {
                path: path.to_path_buf(),
                msg: format!("missing tensor `{name}`"),
            })
    };
    let [tw, tb, sw, sb] = PARAM_NAMES;
    let backbone = Backbone {
        temporal_weight: take(tw)?,
        temporal_bias: take(tb)?,
        spatial_weight: take(sw)?,
        spatial_bias: take(sb)?,
        config,
    };
    let d = backbone.config.feature_dim();
    let mut state = ModelState::new(backbone, temperature)?;
    for _ in 0..r.usize()? {
        let k = r.usize()?;
        let dim = r.usize()?;
        if dim != d {
            return Err(r.err(format!("class {k} weight has dim {dim}, expected {d}")));
        }
        state.phi.insert(k, Tensor::vector(r.f32s(dim)?));
    }
    if r.u8()? == 1 {
        let dim = r.usize()?;
        let mean = r.f32s(dim)?;
        let var = r.f32s(dim)?;
        state.feature_stats = Some(FeatureStats { mean, var });
    }
    r.finish()?;
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(state)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, path)
}

fn strategy_code(s: &SelectionStrategy) -> (u8, f64) {
    match *s {
        SelectionStrategy::RandomSample => (0, 0.0),
        SelectionStrategy::KMeansCentroids(k) => (1, k as f64),
        SelectionStrategy::ClosestToPrototype => (2, 0.0),
        SelectionStrategy::RandomClosestPercent(p) => (3, p),
        SelectionStrategy::FullSet => (4, 0.0),
    }
}

pub fn encode_anchor_set(set: &AnchorSet) -> Vec<u8> {
    let mut w = Writer::header(KIND_ANCHORS);
    w.usize(set.dim);
    let (tag, param) = strategy_code(&set.strategy);
    w.u8(tag);
    w.f64(param);
    w.usize(set.per_class);
    w.usize(set.anchors.len());
    for a in &set.anchors {
        w.usize(a.class);
        w.usize(a.session);
        w.f32s(&a.feature);
    }
    w.buf
}

/// Decodes an anchor store; `expected_dim` guards against a store written
/// under a different backbone.
pub fn decode_anchor_set(bytes: &[u8], path: &Path, expected_dim: Option<usize>) -> Result<AnchorSet> {
    let mut r = Reader { bytes, pos: 0, path };
    r.header(KIND_ANCHORS)?;
    let dim = r.usize()?;
    if let Some(d) = expected_dim {
        if d != dim {
            return Err(CoreError::Shape {
                what: "anchor store dimension",
                expected: vec![d],
                got: vec![dim],
            });
        }
    }
    let tag = r.u8()?;
    let param = r.f64()?;
    let strategy = match tag {
        0 => SelectionStrategy::RandomSample,
        1 => SelectionStrategy::KMeansCentroids(param as usize),
        2 => SelectionStrategy::ClosestToPrototype,
        3 => SelectionStrategy::RandomClosestPercent(param),
        4 => SelectionStrategy::FullSet,
        t => return Err(r.err(format!("unknown strategy tag {t}"))),
    };
    let per_class = r.usize()?;
    let n = r.usize()?;
    let mut anchors = Vec::with_capacity(n);
    for _ in 0..n {
        let class = r.usize()?;
        let session = r.usize()?;
        anchors.push(Anchor {
            feature: r.f32s(dim)?,
            class,
            session,
        });
    }
    r.finish()?;
    Ok(AnchorSet {
        dim,
        strategy,
        per_class,
        anchors,
    })
}

pub fn save_anchor_set(set: &AnchorSet, path: &Path) -> Result<()> {
    fs::write(path, encode_anchor_set(set)).map_err(io_err(path))
}

pub fn load_anchor_set(path: &Path, expected_dim: Option<usize>) -> Result<AnchorSet> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_anchor_set(&bytes, path, expected_dim)
}
