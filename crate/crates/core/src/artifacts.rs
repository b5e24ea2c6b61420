//! Checkpoints, PGM image tiles and embedding CSVs.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "NPVAE\0"  u32 version (=1)
//! repeated section:
//!   u16 name_len, name bytes (utf-8)
//!   u8 dtype (0 = f64, 1 = u64, 2 = u8), u8 rank, u32 dims[rank]
//!   payload (product of dims elements; rank 0 holds one element)
//!   u32 CRC32 of every preceding byte of the section
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::nn::Adam;
use crate::npvae::{LossBreakdown, ReferenceSet};
use crate::numcore::{Matrix, Rng};
use crate::train::{Optimizers, TrainState};
use crate::vae::NoiseStreams;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"NPVAE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub model: Model,
    pub optimizers: Optimizers,
    pub state: TrainState,
    pub reference: Option<ReferenceSet>,
    pub final_loss: Option<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::U64(_) => 1,
            Payload::Bytes(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Section {
    name: String,
    dims: Vec<u32>,
    payload: Payload,
}

impl Section {
    fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Section {
            name: name.into(),
            dims: vec![m.rows() as u32, m.cols() as u32],
            payload: Payload::F64(m.as_slice().to_vec()),
        }
    }

    fn f64_scalar(name: impl Into<String>, v: f64) -> Self {
        Section {
            name: name.into(),
            dims: vec![],
            payload: Payload::F64(vec![v]),
        }
    }

    fn u64_scalar(name: impl Into<String>, v: u64) -> Self {
        Section {
            name: name.into(),
            dims: vec![],
            payload: Payload::U64(vec![v]),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&(self.name.len() as u16).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.push(self.payload.tag());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Bytes(v) => out.extend_from_slice(v),
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::CheckpointTruncated {
                section: self.section.clone(),
                offset: self.pos,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

fn decode_sections(bytes: &[u8]) -> Result<Vec<Section>> {
    if bytes.len() < 10 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let mut r = Reader {
        bytes,
        pos: 10,
        section: String::new(),
    };
    let mut sections = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        r.section = format!("<header at {start}>");
        let name_len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        r.section = name.clone();
        let tag = r.u8()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::CheckpointShape {
                section: name.clone(),
                detail: format!("dimension product overflows: {dims:?}"),
            })?;
        let elem = match tag {
            0 | 1 => 8,
            2 => 1,
            t => {
                return Err(Error::CheckpointShape {
                    section: name,
                    detail: format!("unknown dtype tag {t}"),
                })
            }
        };
        let raw = r.take(count.checked_mul(elem).ok_or(Error::CheckpointTruncated {
            section: name.clone(),
            offset: r.pos,
        })?)?;
        let payload = match tag {
            0 => Payload::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => Payload::U64(
                raw.chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => Payload::Bytes(raw.to_vec()),
        };
        let body_end = r.pos;
        let stored = r.u32()?;
        if crc32fast::hash(&bytes[start..body_end]) != stored {
            return Err(Error::CheckpointCrc(name));
        }
        sections.push(Section { name, dims, payload });
    }
    Ok(sections)
}

/// Named sections with consumption tracking, so leftovers can be rejected.
struct SectionMap {
    sections: HashMap<String, Section>,
    order: Vec<String>,
}

impl SectionMap {
    fn new(list: Vec<Section>) -> Result<Self> {
        let mut sections = HashMap::new();
        let mut order = Vec::new();
        for s in list {
            if sections.contains_key(&s.name) {
                return Err(Error::CheckpointShape {
                    section: s.name,
                    detail: "duplicate section".into(),
                });
            }
            order.push(s.name.clone());
            sections.insert(s.name.clone(), s);
        }
        Ok(SectionMap { sections, order })
    }

    fn has(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    fn take(&mut self, name: &str) -> Result<Section> {
        self.sections
            .remove(name)
            .ok_or_else(|| Error::CheckpointMissing(name.to_string()))
    }

    fn shape_err(name: &str, detail: String) -> Error {
        Error::CheckpointShape {
            section: name.to_string(),
            detail,
        }
    }

    fn matrix(&mut self, name: &str, shape: (usize, usize)) -> Result<Matrix> {
        let s = self.take(name)?;
        let Payload::F64(v) = s.payload else {
            return Err(Self::shape_err(name, "expected f64 payload".into()));
        };
        if s.dims != [shape.0 as u32, shape.1 as u32] {
            return Err(Self::shape_err(name, format!("expected {shape:?}, found {:?}", s.dims)));
        }
        Matrix::from_vec(shape.0, shape.1, v)
    }

    fn matrix_any(&mut self, name: &str) -> Result<Matrix> {
        let s = self.take(name)?;
        match (s.payload, s.dims.as_slice()) {
            (Payload::F64(v), &[r, c]) => Matrix::from_vec(r as usize, c as usize, v),
            _ => Err(Self::shape_err(name, "expected rank-2 f64 array".into())),
        }
    }

    fn f64_vec(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let s = self.take(name)?;
        match s.payload {
            Payload::F64(v) if v.len() == len && s.dims.len() <= 1 => Ok(v),
            p => Err(Self::shape_err(name, format!("expected {len} f64 values, found {}", p.len()))),
        }
    }

    fn u64_vec(&mut self, name: &str) -> Result<(Vec<u32>, Vec<u64>)> {
        let s = self.take(name)?;
        match s.payload {
            Payload::U64(v) => Ok((s.dims, v)),
            _ => Err(Self::shape_err(name, "expected u64 payload".into())),
        }
    }

    fn u64_scalar(&mut self, name: &str) -> Result<u64> {
        let (dims, v) = self.u64_vec(name)?;
        if !dims.is_empty() || v.len() != 1 {
            return Err(Self::shape_err(name, "expected u64 scalar".into()));
        }
        Ok(v[0])
    }

    fn finish(self) -> Result<()> {
        match self.order.into_iter().find(|n| self.sections.contains_key(n)) {
            Some(name) => Err(Error::CheckpointUnknownSection(name)),
            None => Ok(()),
        }
    }
}

fn adam_sections(out: &mut Vec<Section>, net: &str, adam: &Adam) {
    out.push(Section::u64_scalar(format!("adam.{net}.t"), adam.t));
    for (i, m) in adam.m.iter().enumerate() {
        out.push(Section::matrix(format!("adam.{net}.m.{i}"), m));
    }
    for (i, v) in adam.v.iter().enumerate() {
        out.push(Section::matrix(format!("adam.{net}.v.{i}"), v));
    }
}

fn read_adam(map: &mut SectionMap, net: &str, template: &Adam) -> Result<Adam> {
    let mut adam = template.clone();
    adam.t = map.u64_scalar(&format!("adam.{net}.t"))?;
    for (i, m) in adam.m.iter_mut().enumerate() {
        *m = map.matrix(&format!("adam.{net}.m.{i}"), m.shape())?;
    }
    for (i, v) in adam.v.iter_mut().enumerate() {
        *v = map.matrix(&format!("adam.{net}.v.{i}"), v.shape())?;
    }
    Ok(adam)
}

impl Checkpoint {
    fn sections(&self) -> Result<Vec<Section>> {
        let mut out = Vec::new();
        let json = serde_json::to_vec(&self.config)?;
        out.push(Section {
            name: "config".into(),
            dims: vec![json.len() as u32],
            payload: Payload::Bytes(json),
        });
        for (name, block) in self.model.param_names().into_iter().zip(self.model.param_blocks()) {
            if name == "kernel.log_lengthscale" {
                out.push(Section::f64_scalar(name, block.as_slice()[0]));
            } else {
                out.push(Section::matrix(name, &block));
            }
        }
        adam_sections(&mut out, "z_encoder", &self.optimizers.z_encoder);
        if let Some(a) = &self.optimizers.x_encoder {
            adam_sections(&mut out, "x_encoder", a);
        }
        adam_sections(&mut out, "decoder", &self.optimizers.decoder);
        if let Some(a) = &self.optimizers.kernel {
            adam_sections(&mut out, "kernel", a);
        }
        if let Some(r) = &self.reference {
            out.push(Section::matrix("reference.x", &r.x_ref));
            out.push(Section::matrix("reference.z", &r.z_ref));
            if let Some(labels) = &r.labels {
                out.push(Section {
                    name: "reference.labels".into(),
                    dims: vec![labels.len() as u32],
                    payload: Payload::U64(labels.iter().map(|&l| l as u64).collect()),
                });
            }
        }
        let st = &self.state;
        out.push(Section::u64_scalar("train.epochs_done", st.epochs_done));
        out.push(Section::u64_scalar("train.batch_epoch", st.batch_epoch));
        out.push(Section::u64_scalar("train.batch_cursor", st.batch_cursor));
        let n = &st.noise;
        out.push(Section {
            name: "train.rng".into(),
            dims: vec![4, 4],
            payload: Payload::U64(
                [&n.eps, &n.dropout_z, &n.dropout_x, &n.dropout_dec]
                    .iter()
                    .flat_map(|r| r.state())
                    .collect(),
            ),
        });
        if let Some(l) = &self.final_loss {
            out.push(Section {
                name: "train.final_loss".into(),
                dims: vec![4],
                payload: Payload::F64(vec![l.neg_reconstruction, l.kl, l.penalty, l.total]),
            });
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.config.kind != self.model.kind() {
            return Err(Error::Invalid(format!(
                "config says {} but model is {}",
                self.config.kind,
                self.model.kind()
            )));
        }
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for s in self.sections()? {
            s.encode(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut map = SectionMap::new(decode_sections(bytes)?)?;
        let cfg = map.take("config")?;
        let Payload::Bytes(json) = cfg.payload else {
            return Err(SectionMap::shape_err("config", "expected utf-8 bytes".into()));
        };
        let config: ModelConfig = serde_json::from_slice(&json)?;
        config.validate()?;

        // Initialized skeleton supplies the expected shapes.
        let mut model = Model::init(&config)?;
        let names = model.param_names();
        let mut blocks = model.param_blocks();
        for (name, block) in names.iter().zip(blocks.iter_mut()) {
            if name == "kernel.log_lengthscale" {
                *block = Matrix::scalar(map.f64_vec(name, 1)?[0]);
            } else {
                *block = map.matrix(name, block.shape())?;
            }
        }
        model.set_param_blocks(&blocks)?;

        let template = Optimizers::new(&model, config.lr);
        let optimizers = Optimizers {
            z_encoder: read_adam(&mut map, "z_encoder", &template.z_encoder)?,
            x_encoder: template
                .x_encoder
                .as_ref()
                .map(|a| read_adam(&mut map, "x_encoder", a))
                .transpose()?,
            decoder: read_adam(&mut map, "decoder", &template.decoder)?,
            kernel: template
                .kernel
                .as_ref()
                .map(|a| read_adam(&mut map, "kernel", a))
                .transpose()?,
        };

        let reference = if config.kind == ModelKind::Npvae && map.has("reference.x") {
            let x_ref = map.matrix_any("reference.x")?;
            let z_ref = map.matrix_any("reference.z")?;
            if x_ref.rows() != z_ref.rows()
                || x_ref.cols() != config.x_dim
                || z_ref.cols() != config.z_dim
            {
                return Err(SectionMap::shape_err(
                    "reference.z",
                    format!("reference shapes {:?} / {:?} disagree with config", x_ref.shape(), z_ref.shape()),
                ));
            }
            let labels = if map.has("reference.labels") {
                let (_, v) = map.u64_vec("reference.labels")?;
                if v.len() != x_ref.rows() {
                    return Err(SectionMap::shape_err("reference.labels", "length differs from reference.x".into()));
                }
                Some(v.into_iter().map(|l| l as u32).collect())
            } else {
                None
            };
            Some(ReferenceSet { x_ref, z_ref, labels })
        } else {
            None
        };

        let epochs_done = map.u64_scalar("train.epochs_done")?;
        let batch_epoch = map.u64_scalar("train.batch_epoch")?;
        let batch_cursor = map.u64_scalar("train.batch_cursor")?;
        let (dims, rng) = map.u64_vec("train.rng")?;
        if dims != [4, 4] || rng.len() != 16 {
            return Err(SectionMap::shape_err("train.rng", format!("expected [4, 4], found {dims:?}")));
        }
        let st = |k: usize| Rng::from_state(rng[4 * k..4 * k + 4].try_into().unwrap());
        let state = TrainState {
            epochs_done,
            batch_epoch,
            batch_cursor,
            noise: NoiseStreams {
                eps: st(0),
                dropout_z: st(1),
                dropout_x: st(2),
                dropout_dec: st(3),
            },
        };
        let final_loss = if map.has("train.final_loss") {
            let v = map.f64_vec("train.final_loss", 4)?;
            Some(LossBreakdown {
                neg_reconstruction: v[0],
                kl: v[1],
                penalty: v[2],
                total: v[3],
            })
        } else {
            None
        };
        map.finish()?;
        Ok(Checkpoint {
            config,
            model,
            optimizers,
            state,
            reference,
            final_loss,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

/// Binary greyscale PGM of `rows × cols` square tiles (one per image row),
/// laid out row-major with 2-pixel white gutters between tiles.
pub fn encode_pgm(images: &Matrix, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if images.rows() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::Invalid(format!(
            "{} images do not fill a {rows}x{cols} layout",
            images.rows()
        )));
    }
    let side = (images.cols() as f64).sqrt().round() as usize;
    if side * side != images.cols() {
        return Err(Error::Invalid(format!(
            "image width {} is not a square tile",
            images.cols()
        )));
    }
    const GAP: usize = 2;
    let width = cols * side + (cols - 1) * GAP;
    let height = rows * side + (rows - 1) * GAP;
    let mut pixels = vec![255u8; width * height];
    for q in 0..images.rows() {
        let (tr, tc) = (q / cols, q % cols);
        let (oy, ox) = (tr * (side + GAP), tc * (side + GAP));
        for (p, &v) in images.row(q).iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::PixelRange {
                    value: v,
                    image: q,
                    pixel: p,
                });
            }
            let (y, x) = (p / side, p % side);
            pixels[(oy + y) * width + ox + x] = (v * 255.0).round() as u8;
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_pgm(images: &Matrix, layout: (usize, usize), path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(images, layout.0, layout.1)?)?;
    Ok(())
}

/// CSV with header `{prefix}0,...,{prefix}{d-1},label`; values use the
/// shortest representation that parses back to the same bits.
pub fn format_embedding_csv(points: &Matrix, labels: &[u32], prefix: &str) -> Result<String> {
    if labels.len() != points.rows() {
        return Err(Error::Invalid(format!(
            "{} points but {} labels",
            points.rows(),
            labels.len()
        )));
    }
    let mut s = String::new();
    for k in 0..points.cols() {
        let _ = write!(s, "{prefix}{k},");
    }
    s.push_str("label\n");
    for (i, label) in labels.iter().enumerate() {
        for v in points.row(i) {
            let _ = write!(s, "{v},");
        }
        let _ = writeln!(s, "{label}");
    }
    Ok(s)
}

pub fn write_embedding_csv(points: &Matrix, labels: &[u32], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_embedding_csv(points, labels, "x")?)?;
    Ok(())
}
