//! Binary checkpoints.
//!
//! Layout: magic `SCKP`, version (u32), kind (u8), body length (u64), body,
//! CRC-32 of everything before it (u32). Integers and floats are little
//! endian; floats are stored bit-exact. Lattice survivor lists use LEB128
//! varints.

use std::fs;
use std::path::Path;

use structcascade_core::ensemble::{
    GridCascade, GridLevel, GridLevelMetrics, GridShape, LearnedEnsemble,
};
use structcascade_core::lattice::StateHierarchy;
use structcascade_core::model::State;
use structcascade_core::threshold::{FilterTarget, LossMeasure};
use structcascade_core::training::{Expansion, LevelMetrics, TrainedCascade, TrainedLevel};
use structcascade_core::{FeatureTemplate, LinearModel, SparseLattice};

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SCKP";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 1 + 8;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn varint(&mut self, mut v: u64) {
        while v >= 0x80 {
            self.buf.push((v as u8) | 0x80);
            v >>= 7;
        }
        self.buf.push(v as u8);
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    pub fn states(&mut self, v: &[State]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.u32(x));
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint body ends early".into()))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::Format("length does not fit in memory".into()))
    }

    /// A length that must be coverable by the remaining bytes at `min_size` each.
    fn len(&mut self, min_size: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(min_size) > self.data.len() - self.pos {
            return Err(Error::Format(format!("length {n} exceeds the checkpoint")));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn varint(&mut self) -> Result<u64> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            v |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(Error::Format("varint longer than 64 bits".into()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn states(&mut self) -> Result<Vec<State>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.u32()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(
                "trailing bytes after the checkpoint body".into(),
            ));
        }
        Ok(())
    }
}

/// A type stored in a checkpoint container.
pub trait Checkpoint: Sized {
    const KIND: u8;
    fn encode(&self, w: &mut Writer);
    fn decode(r: &mut Reader) -> Result<Self>;
}

pub fn to_bytes<T: Checkpoint>(value: &T) -> Vec<u8> {
    let mut body = Writer::default();
    value.encode(&mut body);
    let mut out = Vec::with_capacity(HEADER + body.buf.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::KIND);
    out.extend_from_slice(&(body.buf.len() as u64).to_le_bytes());
    out.extend_from_slice(&body.buf);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn from_bytes<T: Checkpoint>(bytes: &[u8]) -> Result<T> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    if bytes.len() < HEADER + 4 {
        return Err(Error::Checksum);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let body_len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
    if (bytes.len() - HEADER - 4) as u64 != body_len {
        return Err(Error::Checksum);
    }
    let (data, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(data) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(Error::Checksum);
    }
    if bytes[8] != T::KIND {
        return Err(Error::Format(format!(
            "checkpoint holds kind {}, expected {}",
            bytes[8],
            T::KIND
        )));
    }
    let mut r = Reader::new(&data[HEADER..]);
    let value = T::decode(&mut r)?;
    r.finish()?;
    Ok(value)
}

pub fn save<T: Checkpoint>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(value)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Checkpoint>(path: &Path) -> Result<T> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn encode_template(t: &FeatureTemplate, w: &mut Writer) {
    match *t {
        FeatureTemplate::Emission => w.u8(1),
        FeatureTemplate::Transition { span } => {
            w.u8(2);
            w.usize(span);
        }
        FeatureTemplate::GridUnary => w.u8(3),
        FeatureTemplate::GridPairwise => w.u8(4),
    }
}

fn decode_template(r: &mut Reader) -> Result<FeatureTemplate> {
    Ok(match r.u8()? {
        1 => FeatureTemplate::Emission,
        2 => FeatureTemplate::Transition { span: r.usize()? },
        3 => FeatureTemplate::GridUnary,
        4 => FeatureTemplate::GridPairwise,
        t => return Err(Error::Format(format!("unknown feature template tag {t}"))),
    })
}

impl Checkpoint for LinearModel {
    const KIND: u8 = 1;

    fn encode(&self, w: &mut Writer) {
        w.usize(self.templates().len());
        self.templates().iter().for_each(|t| encode_template(t, w));
        w.f64s(self.weights());
    }

    fn decode(r: &mut Reader) -> Result<Self> {
        let n = r.len(1)?;
        let templates = (0..n)
            .map(|_| decode_template(r))
            .collect::<Result<Vec<_>>>()?;
        let weights = r.f64s()?;
        if weights.is_empty() {
            return Err(Error::Format("model has no weights".into()));
        }
        Ok(LinearModel::from_weights(templates, weights))
    }
}

fn encode_hierarchy(h: &StateHierarchy, w: &mut Writer) {
    w.usize(h.coarse_size());
    for s in 0..h.coarse_size() as State {
        w.states(h.children(s));
    }
}

fn decode_hierarchy(r: &mut Reader) -> Result<StateHierarchy> {
    let n = r.len(8)?;
    let children = (0..n).map(|_| r.states()).collect::<Result<Vec<_>>>()?;
    Ok(StateHierarchy::new(children)?)
}

fn encode_level_metrics(m: &LevelMetrics, w: &mut Writer) {
    for v in [
        m.alpha,
        m.filter_loss,
        m.pruned_loss,
        m.efficiency_loss,
        m.density,
        m.token_accuracy,
        m.sequence_accuracy,
    ] {
        w.f64(v);
    }
    w.usize(m.examples);
    w.usize(m.truth_lost);
}

fn decode_level_metrics(r: &mut Reader) -> Result<LevelMetrics> {
    Ok(LevelMetrics {
        alpha: r.f64()?,
        filter_loss: r.f64()?,
        pruned_loss: r.f64()?,
        efficiency_loss: r.f64()?,
        density: r.f64()?,
        token_accuracy: r.f64()?,
        sequence_accuracy: r.f64()?,
        examples: r.usize()?,
        truth_lost: r.usize()?,
    })
}

impl Checkpoint for TrainedCascade {
    const KIND: u8 = 2;

    fn encode(&self, w: &mut Writer) {
        w.usize(self.num_states);
        w.usize(self.levels.len());
        for l in &self.levels {
            l.model.encode(w);
            w.f64(l.alpha);
            w.usize(l.order);
            w.usize(l.num_states);
            match &l.expansion {
                Expansion::IncreaseOrder => w.u8(0),
                Expansion::Refine(h) => {
                    w.u8(1);
                    encode_hierarchy(h, w);
                }
            }
            w.u8(match l.target {
                FilterTarget::Clique => 0,
                FilterTarget::SubClique => 1,
            });
            w.u8(match l.measure {
                LossMeasure::Bound => 0,
                LossMeasure::Pruned => 1,
            });
            w.states(&l.label_map);
            encode_level_metrics(&l.dev, w);
            w.usize(l.dropped);
        }
        self.final_model.encode(w);
        encode_level_metrics(&self.final_dev, w);
        w.usize(self.final_dropped);
    }

    fn decode(r: &mut Reader) -> Result<Self> {
        let num_states = r.usize()?;
        let n = r.len(1)?;
        let mut levels = Vec::with_capacity(n);
        for _ in 0..n {
            let model = LinearModel::decode(r)?;
            let alpha = r.f64()?;
            let order = r.usize()?;
            let level_states = r.usize()?;
            let expansion = match r.u8()? {
                0 => Expansion::IncreaseOrder,
                1 => Expansion::Refine(decode_hierarchy(r)?),
                t => return Err(Error::Format(format!("unknown expansion tag {t}"))),
            };
            let target = match r.u8()? {
                0 => FilterTarget::Clique,
                1 => FilterTarget::SubClique,
                t => return Err(Error::Format(format!("unknown filter target tag {t}"))),
            };
            let measure = match r.u8()? {
                0 => LossMeasure::Bound,
                1 => LossMeasure::Pruned,
                t => return Err(Error::Format(format!("unknown loss measure tag {t}"))),
            };
            levels.push(TrainedLevel {
                model,
                alpha,
                order,
                num_states: level_states,
                expansion,
                target,
                measure,
                label_map: r.states()?,
                dev: decode_level_metrics(r)?,
                dropped: r.usize()?,
            });
        }
        Ok(TrainedCascade {
            num_states,
            levels,
            final_model: LinearModel::decode(r)?,
            final_dev: decode_level_metrics(r)?,
            final_dropped: r.usize()?,
        })
    }
}

fn encode_shape(s: GridShape, w: &mut Writer) {
    w.usize(s.rows);
    w.usize(s.cols);
}

fn decode_shape(r: &mut Reader) -> Result<GridShape> {
    Ok(GridShape::new(r.usize()?, r.usize()?)?)
}

impl Checkpoint for GridCascade {
    const KIND: u8 = 3;

    fn encode(&self, w: &mut Writer) {
        encode_shape(self.shape, w);
        w.usize(self.hierarchies.len());
        self.hierarchies.iter().for_each(|h| encode_hierarchy(h, w));
        w.usize(self.levels.len());
        for l in &self.levels {
            let e = &l.ensemble;
            encode_shape(e.shape, w);
            w.usize(e.num_states);
            w.usize(e.dimension);
            w.usize(e.trees.len());
            for (tree, weights) in e.trees.iter().zip(&e.weights) {
                w.usize(tree.len());
                tree.iter().for_each(|&x| w.usize(x));
                w.f64s(weights);
            }
            w.f64(l.alpha);
            w.usize(l.num_states);
            w.states(&l.label_map);
            let m = &l.metrics;
            for v in [
                m.alpha,
                m.filter_loss,
                m.efficiency_loss,
                m.density,
                m.node_accuracy,
                m.grid_accuracy,
            ] {
                w.f64(v);
            }
            w.usize(m.examples);
            w.usize(m.breakdowns);
        }
    }

    fn decode(r: &mut Reader) -> Result<Self> {
        let shape = decode_shape(r)?;
        let nh = r.len(8)?;
        let hierarchies = (0..nh)
            .map(|_| decode_hierarchy(r))
            .collect::<Result<Vec<_>>>()?;
        let nl = r.len(1)?;
        let mut levels = Vec::with_capacity(nl);
        for _ in 0..nl {
            let eshape = decode_shape(r)?;
            let num_states = r.usize()?;
            let dimension = r.usize()?;
            let np = r.len(16)?;
            let (mut trees, mut weights) = (Vec::with_capacity(np), Vec::with_capacity(np));
            for _ in 0..np {
                let ne = r.len(8)?;
                trees.push((0..ne).map(|_| r.usize()).collect::<Result<Vec<_>>>()?);
                weights.push(r.f64s()?);
            }
            let ensemble = LearnedEnsemble {
                shape: eshape,
                num_states,
                dimension,
                trees,
                weights,
            };
            ensemble.validate()?;
            levels.push(GridLevel {
                ensemble,
                alpha: r.f64()?,
                num_states: r.usize()?,
                label_map: r.states()?,
                metrics: GridLevelMetrics {
                    alpha: r.f64()?,
                    filter_loss: r.f64()?,
                    efficiency_loss: r.f64()?,
                    density: r.f64()?,
                    node_accuracy: r.f64()?,
                    grid_accuracy: r.f64()?,
                    examples: r.usize()?,
                    breakdowns: r.usize()?,
                },
            });
        }
        if levels.is_empty() || hierarchies.len() + 1 != levels.len() {
            return Err(Error::Format(
                "grid cascade levels and refinements disagree".into(),
            ));
        }
        Ok(GridCascade {
            shape,
            levels,
            hierarchies,
        })
    }
}

/// Survivor lists of a set of lattices, e.g. the output of one cascade level
/// over a corpus.
impl Checkpoint for Vec<SparseLattice> {
    const KIND: u8 = 4;

    fn encode(&self, w: &mut Writer) {
        w.varint(self.len() as u64);
        for l in self {
            w.varint(l.length() as u64);
            w.varint(l.order() as u64);
            w.varint(l.num_states() as u64);
            for j in 0..l.num_anchors() {
                let codes = l.codes(j);
                w.varint(codes.len() as u64);
                codes.iter().for_each(|&c| w.varint(c));
            }
        }
    }

    fn decode(r: &mut Reader) -> Result<Self> {
        let small =
            |v: u64| usize::try_from(v).map_err(|_| Error::Format("value does not fit".into()));
        let n = small(r.varint()?)?;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let length = small(r.varint()?)?;
            let order = small(r.varint()?)?;
            let k = small(r.varint()?)?;
            if order == 0 || order > length.max(1) {
                return Err(Error::Format(format!(
                    "order {order} does not fit length {length}"
                )));
            }
            let anchors = length + 1 - order;
            let mut valid = Vec::with_capacity(anchors.min(1 << 16));
            for _ in 0..anchors {
                let m = small(r.varint()?)?;
                let codes = (0..m).map(|_| r.varint()).collect::<Result<Vec<_>>>()?;
                valid.push(codes);
            }
            out.push(SparseLattice::from_codes(length, order, k, valid)?);
        }
        Ok(out)
    }
}
