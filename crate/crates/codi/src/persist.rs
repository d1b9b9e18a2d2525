//! Binary checkpoint and dataset files.
//!
//! Every file is `magic[8] | version u32 | payload_len u64 | payload | crc32 u32`,
//! little-endian, with the CRC taken over the payload. Floats are stored as
//! raw IEEE-754 bits, so a save/load cycle is bit-exact.

use std::fmt;
use std::path::Path;

use codi_core::baselines::NoiseCondCostModel;
use codi_core::diffusion::ScoreField;
use codi_core::nn::{Activation, Mlp};
use codi_core::score_net::{DatasetMeta, DemoDataset, MlpScoreModel, Preconditioning};

use crate::error::{io_err, Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CODICKPT";
pub const DATASET_MAGIC: [u8; 8] = *b"CODIDSET";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 20;
const KIND_SCORE: u8 = 1;
const KIND_COST: u8 = 2;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("dimension fits in u32"));
    }
    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }
    fn net(&mut self, net: &Mlp) {
        self.u8(net.activation().tag());
        self.len(net.sizes().len());
        for s in net.sizes() {
            self.len(*s);
        }
        self.floats(net.params());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Malformed(format!("payload ends at byte {}", self.buf.len())))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = usize::try_from(self.u64()?).map_err(|_| Error::Malformed("float count overflows".into()))?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Malformed("float count overflows".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn net(&mut self) -> Result<Mlp> {
        let tag = self.u8()?;
        let activation = Activation::from_tag(tag).ok_or_else(|| Error::Malformed(format!("activation tag {tag}")))?;
        let layers = self.len()?;
        let sizes = (0..layers).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let params = self.floats()?;
        Ok(Mlp::from_params(&sizes, activation, params)?)
    }
    fn finish(self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Malformed(format!("{} trailing payload bytes", self.buf.len() - self.pos)))
        }
    }
}

fn seal(magic: [u8; 8], payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

fn label(magic: &[u8], version: Option<u32>) -> String {
    let m = String::from_utf8_lossy(magic).escape_debug().to_string();
    match version {
        Some(v) => format!("{m} v{v}"),
        None => m,
    }
}

/// Header fields of a sealed file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub magic: [u8; 8],
    pub version: u32,
    pub payload_len: u64,
    pub checksum: u32,
}

/// Check framing and checksum; returns the header and payload.
fn unseal(bytes: &[u8], magic: [u8; 8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Truncated { needed: HEADER_LEN, found: bytes.len() });
    }
    if bytes[..8] != magic {
        return Err(Error::VersionMismatch {
            expected: label(&magic, Some(FORMAT_VERSION)),
            found: label(&bytes[..8], None),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { needed: HEADER_LEN, found: bytes.len() });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: label(&magic, Some(FORMAT_VERSION)),
            found: label(&magic, Some(version)),
        });
    }
    let payload_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let needed = usize::try_from(payload_len)
        .ok()
        .and_then(|n| n.checked_add(HEADER_LEN + 4))
        .ok_or(Error::Truncated { needed: usize::MAX, found: bytes.len() })?;
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, found: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(Error::Malformed(format!("{} bytes after the checksum", bytes.len() - needed)));
    }
    let payload = &bytes[HEADER_LEN..needed - 4];
    let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok((Header { magic, version, payload_len, checksum: stored }, payload))
}

pub fn encode_score_model(model: &MlpScoreModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.u8(KIND_SCORE);
    w.u8(model.preconditioning().tag());
    w.len(model.action_dim());
    w.len(model.cond_dim());
    w.f64(model.data_std());
    w.net(model.net());
    seal(CHECKPOINT_MAGIC, w.0)
}

pub fn encode_cost_model(model: &NoiseCondCostModel) -> Vec<u8> {
    let (mean, scale) = model.cost_normalization();
    let mut w = Writer::default();
    w.u8(KIND_COST);
    w.len(model.action_dim());
    w.len(model.cond_dim());
    w.f64(model.data_std());
    w.f64(mean);
    w.f64(scale);
    w.net(model.net());
    seal(CHECKPOINT_MAGIC, w.0)
}

/// A decoded checkpoint of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Score(MlpScoreModel),
    Cost(NoiseCondCostModel),
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (_, payload) = unseal(bytes, CHECKPOINT_MAGIC)?;
    let mut r = Reader { buf: payload, pos: 0 };
    let ckpt = match r.u8()? {
        KIND_SCORE => {
            let tag = r.u8()?;
            let pre = Preconditioning::from_tag(tag).ok_or_else(|| Error::Malformed(format!("preconditioning tag {tag}")))?;
            let action_dim = r.len()?;
            let cond_dim = r.len()?;
            let data_std = r.f64()?;
            let net = r.net()?;
            Checkpoint::Score(MlpScoreModel::from_net(net, action_dim, cond_dim, data_std)?.with_preconditioning(pre))
        }
        KIND_COST => {
            let action_dim = r.len()?;
            let cond_dim = r.len()?;
            let data_std = r.f64()?;
            let mean = r.f64()?;
            let scale = r.f64()?;
            let net = r.net()?;
            Checkpoint::Cost(NoiseCondCostModel::from_parts(net, action_dim, cond_dim, data_std, mean, scale)?)
        }
        k => return Err(Error::Malformed(format!("checkpoint kind {k}"))),
    };
    r.finish()?;
    Ok(ckpt)
}

pub fn decode_score_model(bytes: &[u8]) -> Result<MlpScoreModel> {
    match decode_checkpoint(bytes)? {
        Checkpoint::Score(m) => Ok(m),
        Checkpoint::Cost(_) => Err(Error::Malformed("expected a score model, found a cost model".into())),
    }
}

pub fn decode_cost_model(bytes: &[u8]) -> Result<NoiseCondCostModel> {
    match decode_checkpoint(bytes)? {
        Checkpoint::Cost(m) => Ok(m),
        Checkpoint::Score(_) => Err(Error::Malformed("expected a cost model, found a score model".into())),
    }
}

pub fn encode_dataset(data: &DemoDataset) -> Vec<u8> {
    let m = data.meta();
    let mut w = Writer::default();
    w.len(m.state_dim);
    w.len(m.chunk_len);
    w.len(m.action_width);
    w.f64(m.control_rate);
    w.u32(m.agent);
    w.floats(data.states());
    w.floats(data.actions());
    seal(DATASET_MAGIC, w.0)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DemoDataset> {
    let (_, payload) = unseal(bytes, DATASET_MAGIC)?;
    let mut r = Reader { buf: payload, pos: 0 };
    let meta = DatasetMeta {
        state_dim: r.len()?,
        chunk_len: r.len()?,
        action_width: r.len()?,
        control_rate: r.f64()?,
        agent: r.u32()?,
    };
    let states = r.floats()?;
    let actions = r.floats()?;
    r.finish()?;
    Ok(DemoDataset::from_raw(meta, states, actions)?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    std::fs::read(path).map_err(io_err(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn save_score_model(path: &Path, model: &MlpScoreModel) -> Result<()> {
    write(path, &encode_score_model(model))
}

pub fn load_score_model(path: &Path) -> Result<MlpScoreModel> {
    decode_score_model(&read(path)?)
}

pub fn save_cost_model(path: &Path, model: &NoiseCondCostModel) -> Result<()> {
    write(path, &encode_cost_model(model))
}

pub fn load_cost_model(path: &Path) -> Result<NoiseCondCostModel> {
    decode_cost_model(&read(path)?)
}

pub fn save_dataset(path: &Path, data: &DemoDataset) -> Result<()> {
    write(path, &encode_dataset(data))
}

pub fn load_dataset(path: &Path) -> Result<DemoDataset> {
    decode_dataset(&read(path)?)
}

/// Human-readable summary of a checkpoint or dataset file.
pub struct Summary {
    pub header: Header,
    pub body: String,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = &self.header;
        writeln!(f, "format   {}", label(&h.magic, Some(h.version)))?;
        writeln!(f, "payload  {} bytes, crc32 {:#010x}", h.payload_len, h.checksum)?;
        write!(f, "{}", self.body)
    }
}

fn describe_net(net: &Mlp) -> String {
    let sizes: Vec<String> = net.sizes().iter().map(|s| s.to_string()).collect();
    format!("layers   {} ({:?}, {} parameters)\n", sizes.join("-"), net.activation(), net.params().len())
}

pub fn inspect_bytes(bytes: &[u8]) -> Result<Summary> {
    let magic = if bytes.len() >= 8 && bytes[..8] == DATASET_MAGIC { DATASET_MAGIC } else { CHECKPOINT_MAGIC };
    let (header, _) = unseal(bytes, magic)?;
    let body = if magic == DATASET_MAGIC {
        let d = decode_dataset(bytes)?;
        let m = d.meta();
        format!(
            "kind     dataset\nrecords  {}\nstate    {}\nchunk    {} x {} at {} Hz\nagent    {}\n",
            d.len(),
            m.state_dim,
            m.chunk_len,
            m.action_width,
            m.control_rate,
            m.agent
        )
    } else {
        match decode_checkpoint(bytes)? {
            Checkpoint::Score(s) => format!(
                "kind     score model ({:?})\naction   {}\ncond     {}\ndata std {}\n{}",
                s.preconditioning(),
                s.action_dim(),
                s.cond_dim(),
                s.data_std(),
                describe_net(s.net())
            ),
            Checkpoint::Cost(c) => {
                let (mean, scale) = c.cost_normalization();
                format!(
                    "kind     cost model\naction   {}\ncond     {}\ndata std {}\ncost     mean {mean}, scale {scale}\n{}",
                    c.action_dim(),
                    c.cond_dim(),
                    c.data_std(),
                    describe_net(c.net())
                )
            }
        }
    };
    Ok(Summary { header, body })
}

pub fn inspect(path: &Path) -> Result<Summary> {
    inspect_bytes(&read(path)?)
}
