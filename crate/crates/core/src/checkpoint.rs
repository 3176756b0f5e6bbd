//! Single-file binary checkpoint container.
//!
//! Layout: magic `IEPK`, `u32` version, `u32` section count, a section
//! table (`u32` name length, name, `u8` kind, `u64` offset, `u64` length),
//! the payloads, and a trailing sha256 of everything before it. All
//! integers and floats are little-endian; sections are stored in name order
//! so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::mpnn::MpnnParams;
use crate::nets::{ConvNet, ConvNetSpec};
use crate::optim::Sgd;
use crate::params::ParamSet;
use crate::spca::IpcaState;
use crate::tensor::Tensor;
use crate::transfer::FrozenTeacherFrame;

pub const MAGIC: &[u8; 4] = b"IEPK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    F64(Tensor),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Section {
    fn kind(&self) -> u8 {
        match self {
            Section::F64(_) => 0,
            Section::U64(_) => 1,
            Section::Bytes(_) => 2,
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Section::F64(t) => {
                out.extend((t.ndim() as u64).to_le_bytes());
                t.shape().iter().for_each(|&d| out.extend((d as u64).to_le_bytes()));
                t.data().iter().for_each(|v| out.extend(v.to_le_bytes()));
            }
            Section::U64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Section::Bytes(b) => out.extend_from_slice(b),
        }
        out
    }

    fn decode(kind: u8, bytes: &[u8]) -> Result<Self> {
        let words = |b: &[u8]| -> Result<Vec<u64>> {
            if b.len() % 8 != 0 {
                return Err(Error::Checkpoint("payload is not a whole number of 64-bit words".into()));
            }
            Ok(b.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        };
        match kind {
            0 => {
                let w = words(bytes)?;
                let ndim = *w.first().ok_or_else(|| Error::Checkpoint("empty tensor payload".into()))? as usize;
                if w.len() < 1 + ndim {
                    return Err(Error::Checkpoint("truncated tensor header".into()));
                }
                let shape: Vec<usize> = w[1..1 + ndim].iter().map(|&d| d as usize).collect();
                let data: Vec<f64> = w[1 + ndim..].iter().map(|&b| f64::from_bits(b)).collect();
                if data.len() != shape.iter().product::<usize>() {
                    return Err(Error::Checkpoint(format!("tensor {shape:?} has {} values", data.len())));
                }
                Ok(Section::F64(Tensor::from_parts(shape, data)))
            }
            1 => Ok(Section::U64(words(bytes)?)),
            2 => Ok(Section::Bytes(bytes.to_vec())),
            k => Err(Error::Checkpoint(format!("unknown section kind {k}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    sections: BTreeMap<String, Section>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.sections.keys()
    }

    pub fn put(&mut self, name: impl Into<String>, s: Section) {
        self.sections.insert(name.into(), s);
    }

    pub fn get(&self, name: &str) -> Result<&Section> {
        self.sections
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name:?}")))
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.put(name, Section::F64(t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name)? {
            Section::F64(t) => Ok(t),
            _ => Err(Error::Checkpoint(format!("section {name:?} is not a tensor"))),
        }
    }

    pub fn put_vec(&mut self, name: impl Into<String>, v: &[f64]) {
        self.put_tensor(name, Tensor::from_parts(vec![v.len()], v.to_vec()));
    }

    pub fn vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.tensor(name)?.data().to_vec())
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, v: Vec<u64>) {
        self.put(name, Section::U64(v));
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Section::U64(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("section {name:?} is not an integer list"))),
        }
    }

    pub fn put_text(&mut self, name: impl Into<String>, s: &str) {
        self.put(name, Section::Bytes(s.as_bytes().to_vec()));
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match self.get(name)? {
            Section::Bytes(b) => {
                String::from_utf8(b.clone()).map_err(|_| Error::Checkpoint(format!("section {name:?} is not utf-8")))
            }
            _ => Err(Error::Checkpoint(format!("section {name:?} is not text"))),
        }
    }

    pub fn put_params(&mut self, prefix: &str, p: &ParamSet) {
        for (k, v) in p.iter() {
            self.put_tensor(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn params(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, s) in self.sections.range(prefix.to_string()..) {
            let Some(rest) = k.strip_prefix(prefix) else { break };
            if let Section::F64(t) = s {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payloads: Vec<(&String, u8, Vec<u8>)> =
            self.sections.iter().map(|(k, s)| (k, s.kind(), s.encode())).collect();
        let table_len: usize = payloads.iter().map(|(k, _, _)| 4 + k.len() + 1 + 16).sum();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((payloads.len() as u32).to_le_bytes());
        let mut offset = (out.len() + table_len) as u64;
        for (k, kind, p) in &payloads {
            out.extend((k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.push(*kind);
            out.extend(offset.to_le_bytes());
            out.extend((p.len() as u64).to_le_bytes());
            offset += p.len() as u64;
        }
        for (_, _, p) in &payloads {
            out.extend_from_slice(p);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not an IEPK container".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, at: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("section name is not utf-8".into()))?;
            let kind = r.take(1)?[0];
            let (offset, len) = (r.u64()? as usize, r.u64()? as usize);
            let payload = body
                .get(offset..offset.saturating_add(len))
                .ok_or_else(|| Error::Checkpoint(format!("section {name:?} out of bounds")))?;
            sections.insert(name, Section::decode(kind, payload)?);
        }
        Ok(Self { sections })
    }

    /// sha256 of the serialized container.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let unwritable = |source| Error::Unwritable {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(unwritable)?;
        }
        // write then rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(unwritable)?;
        std::fs::rename(&tmp, path).map_err(unwritable)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    // ---- typed contents ---------------------------------------------------

    pub fn put_config(&mut self, cfg: &TrainConfig) {
        self.put_text("config.text", &cfg.to_text());
        self.put_text("config.hash", &cfg.hash());
    }

    pub fn config_hash(&self) -> Result<String> {
        self.text("config.hash")
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::parse(&self.text("config.text")?)
    }

    pub fn kind(&self) -> Result<String> {
        self.text("kind")
    }

    pub fn expect_kind(&self, kinds: &[&str]) -> Result<()> {
        let k = self.kind()?;
        if kinds.contains(&k.as_str()) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a {} checkpoint, found {k}", kinds.join("/"))))
        }
    }

    pub fn put_net(&mut self, prefix: &str, net: &ConvNet) {
        let s = &net.spec;
        let as64 = |v: &[usize]| v.iter().map(|&x| x as u64).collect();
        self.put_u64s(format!("{prefix}spec.widths"), as64(&s.widths));
        self.put_u64s(format!("{prefix}spec.strides"), as64(&s.strides));
        self.put_u64s(
            format!("{prefix}spec.meta"),
            vec![s.blocks_per_stage as u64, s.num_classes as u64, s.in_channels as u64],
        );
        self.put_params(&format!("{prefix}param."), &net.params);
        self.put_params(&format!("{prefix}buffer."), &net.buffers);
    }

    pub fn net(&self, prefix: &str) -> Result<ConvNet> {
        let us = |name: &str| -> Result<Vec<usize>> {
            Ok(self.u64s(&format!("{prefix}{name}"))?.iter().map(|&x| x as usize).collect())
        };
        let meta = us("spec.meta")?;
        if meta.len() != 3 {
            return Err(Error::Checkpoint("bad network metadata".into()));
        }
        let spec = ConvNetSpec {
            widths: us("spec.widths")?,
            blocks_per_stage: meta[0],
            strides: us("spec.strides")?,
            num_classes: meta[1],
            in_channels: meta[2],
        };
        spec.validate()?;
        Ok(ConvNet {
            spec,
            params: self.params(&format!("{prefix}param.")),
            buffers: self.params(&format!("{prefix}buffer.")),
        })
    }

    pub fn put_ipca(&mut self, state: &IpcaState) {
        let p = format!("ipca{}.", state.layer);
        self.put_u64s(format!("{p}meta"), vec![state.layer as u64, state.dim as u64, state.updates_seen]);
        self.put_tensor(format!("{p}v"), state.v.clone());
        self.put_vec(format!("{p}s"), &state.s);
        self.put_vec(format!("{p}mu"), &state.mu);
    }

    pub fn ipca(&self, layer: usize) -> Result<IpcaState> {
        let p = format!("ipca{layer}.");
        let meta = self.u64s(&format!("{p}meta"))?;
        Ok(IpcaState {
            layer: meta[0] as usize,
            dim: meta[1] as usize,
            updates_seen: meta[2],
            v: self.tensor(&format!("{p}v"))?.clone(),
            s: self.vec(&format!("{p}s"))?,
            mu: self.vec(&format!("{p}mu"))?,
        })
    }

    pub fn put_mpnn(&mut self, m: &MpnnParams) {
        let p = format!("mpnn{}.", m.layer);
        self.put_u64s(
            format!("{p}meta"),
            [m.layer, m.in_width, m.node_width, m.edge_width, m.iterations].map(|x| x as u64).to_vec(),
        );
        self.put_params(&format!("{p}param."), &m.trainable);
        self.put_vec(format!("{p}running_mean"), &m.running_mean);
        self.put_vec(format!("{p}running_var"), &m.running_var);
    }

    pub fn mpnn(&self, layer: usize) -> Result<MpnnParams> {
        let p = format!("mpnn{layer}.");
        let meta = self.u64s(&format!("{p}meta"))?;
        if meta.len() != 5 {
            return Err(Error::Checkpoint("bad mpnn metadata".into()));
        }
        Ok(MpnnParams {
            layer: meta[0] as usize,
            in_width: meta[1] as usize,
            node_width: meta[2] as usize,
            edge_width: meta[3] as usize,
            iterations: meta[4] as usize,
            trainable: self.params(&format!("{p}param.")),
            running_mean: self.vec(&format!("{p}running_mean"))?,
            running_var: self.vec(&format!("{p}running_var"))?,
        })
    }

    pub fn put_optimizer(&mut self, prefix: &str, opt: &Sgd) {
        self.put_vec(format!("{prefix}hyper"), &[opt.momentum, opt.weight_decay, opt.nesterov as u8 as f64]);
        self.put_params(&format!("{prefix}velocity."), &opt.velocity);
    }

    pub fn optimizer(&self, prefix: &str) -> Result<Sgd> {
        let h = self.vec(&format!("{prefix}hyper"))?;
        let mut opt = Sgd::new(h[0], h[2] != 0.0, h[1]);
        opt.velocity = self.params(&format!("{prefix}velocity."));
        Ok(opt)
    }

    pub fn put_frame(&mut self, frame: &FrozenTeacherFrame) {
        self.put_net("teacher.", &frame.teacher);
        frame.ipca.iter().for_each(|s| self.put_ipca(s));
        frame.mpnn.iter().for_each(|m| self.put_mpnn(m));
    }

    pub fn frame(&self) -> Result<FrozenTeacherFrame> {
        let teacher = self.net("teacher.")?;
        let l = teacher.spec.sensing_points();
        let ipca = (0..l).map(|i| self.ipca(i)).collect::<Result<_>>()?;
        let mpnn = (0..l - 1).map(|i| self.mpnn(i)).collect::<Result<_>>()?;
        FrozenTeacherFrame::new(teacher, ipca, mpnn)
    }
}
