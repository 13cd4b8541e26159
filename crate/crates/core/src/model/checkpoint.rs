use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::{EncoderConfig, ModelError, Network};
use crate::autodiff::{ParamMap, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
pub const CHECKPOINT_VERSION: u8 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Pretrain,
    Finetune,
    Distill,
    Supervised,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Distill => "distill",
            Stage::Supervised => "supervised",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            "distill" => Ok(Stage::Distill),
            "supervised" => Ok(Stage::Supervised),
            other => Err(ModelError::MalformedCheckpoint(format!("unknown stage `{other}`"))),
        }
    }
}

/// Legal stage histories, oldest first.
const LINEAGES: [&[Stage]; 4] = [
    &[Stage::Pretrain],
    &[Stage::Pretrain, Stage::Finetune],
    &[Stage::Pretrain, Stage::Finetune, Stage::Distill],
    &[Stage::Supervised],
];

/// Where a checkpoint came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    /// Stages that produced this checkpoint, oldest first; the last is its own stage.
    pub lineage: Vec<Stage>,
    pub seed: u64,
    pub epoch: u64,
    /// Id of the checkpoint this one was trained from, if any.
    pub source: Option<String>,
}

impl Provenance {
    pub fn stage(&self) -> Stage {
        *self.lineage.last().expect("lineage is never empty")
    }

    fn validate(&self) -> Result<(), ModelError> {
        if LINEAGES.iter().any(|l| *l == self.lineage.as_slice()) {
            Ok(())
        } else {
            let chain: Vec<&str> = self.lineage.iter().map(|s| s.name()).collect();
            Err(ModelError::StageViolation(format!("stage history {} is not allowed", chain.join("→"))))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TensorKind {
    Param = 0,
    Buffer = 1,
}

/// An immutable network snapshot with provenance and a SHA-256 digest of
/// its serialized form.
///
/// File layout: `"SCKP"` | u8 version | u32 LE header length | UTF-8 header
/// (`key=value` lines, including the encoder config as `config.*`) | u32 LE
/// tensor count | per tensor: u16 LE name length, name, u8 kind (0 param,
/// 1 buffer), u8 rank, rank × u32 LE extents, f32 LE values | 32-byte
/// SHA-256 of everything before it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    network: Network,
    provenance: Provenance,
    bytes: Vec<u8>,
}

impl Checkpoint {
    /// A root checkpoint (no source).
    pub fn new(network: &Network, stage: Stage, seed: u64, epoch: u64) -> Result<Self, ModelError> {
        Self::with_provenance(network, Provenance { lineage: vec![stage], seed, epoch, source: None })
    }

    /// A checkpoint trained from `self` in `stage`.
    pub fn derive(&self, network: &Network, stage: Stage, seed: u64, epoch: u64) -> Result<Self, ModelError> {
        let mut lineage = self.provenance.lineage.clone();
        lineage.push(stage);
        Self::with_provenance(network, Provenance { lineage, seed, epoch, source: Some(self.id()) })
    }

    pub fn with_provenance(network: &Network, provenance: Provenance) -> Result<Self, ModelError> {
        provenance.validate()?;
        let mut network = network.clone();
        network.round_to_storage();
        let bytes = serialize(&network, &provenance);
        Ok(Self { network, provenance, bytes })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn config(&self) -> &EncoderConfig {
        self.network.config()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn stage(&self) -> Stage {
        self.provenance.stage()
    }

    pub fn digest(&self) -> &[u8] {
        &self.bytes[self.bytes.len() - DIGEST_LEN..]
    }

    /// Lower-case hex digest.
    pub fn id(&self) -> String {
        hex::encode(self.digest())
    }

    pub fn to_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn require_stage(&self, allowed: &[Stage]) -> Result<(), ModelError> {
        if allowed.contains(&self.stage()) {
            Ok(())
        } else {
            let names: Vec<&str> = allowed.iter().map(|s| s.name()).collect();
            Err(ModelError::StageViolation(format!(
                "checkpoint stage is {}, expected {}",
                self.stage(),
                names.join(" or ")
            )))
        }
    }

    pub fn require_config(&self, config: &EncoderConfig) -> Result<(), ModelError> {
        if self.config() == config {
            Ok(())
        } else {
            Err(ModelError::ConfigMismatch(format!(
                "checkpoint encoder\n{}differs from requested\n{}",
                self.config(),
                config
            )))
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::MalformedCheckpoint(m.to_string());
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing SCKP magic"));
        }
        if bytes.len() < 4 + 1 + 4 + DIGEST_LEN {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ModelError::DigestMismatch);
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?).map_err(|_| bad("header is not UTF-8"))?;
        let (config, proj_dim, provenance) = parse_header(header)?;
        let count = r.u32()? as usize;
        let (mut params, mut buffers) = (ParamMap::new(), ParamMap::new());
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
            let kind = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data =
                r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            let tensor = Tensor::new(shape, data)?;
            let target = match kind {
                0 => &mut params,
                1 => &mut buffers,
                k => return Err(bad(&format!("unknown tensor kind {k}"))),
            };
            if target.insert(name.clone(), tensor).is_some() {
                return Err(bad(&format!("tensor `{name}` stored twice")));
            }
        }
        if r.pos != body.len() {
            return Err(bad("unexpected bytes after tensor table"));
        }
        provenance.validate()?;
        let network = Network::from_parts(config, proj_dim, params, buffers)?;
        Ok(Self { network, provenance, bytes: bytes.to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| ModelError::io(parent, e))?;
        }
        fs::write(path, &self.bytes).map_err(|e| ModelError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|e| ModelError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn header_text(network: &Network, p: &Provenance) -> String {
    let lineage: Vec<&str> = p.lineage.iter().map(|s| s.name()).collect();
    let mut out = format!(
        "digest=sha256\nproj_dim={}\nstage={}\nlineage={}\nseed={}\nepoch={}\nsource={}\n",
        network.proj_dim(),
        p.stage(),
        lineage.join(","),
        p.seed,
        p.epoch,
        p.source.as_deref().unwrap_or("-"),
    );
    for line in network.config().to_string().lines() {
        out.push_str(&format!("config.{line}\n"));
    }
    out
}

fn parse_header(text: &str) -> Result<(EncoderConfig, usize, Provenance), ModelError> {
    let bad = |m: String| ModelError::MalformedCheckpoint(m);
    let mut fields = BTreeMap::new();
    let mut config_text = String::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("header line `{line}`")))?;
        if let Some(ck) = k.strip_prefix("config.") {
            config_text.push_str(&format!("{ck}={v}\n"));
        } else if fields.insert(k, v).is_some() {
            return Err(bad(format!("header key `{k}` repeated")));
        }
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("header lacks `{k}`")));
    let num = |k: &str| -> Result<u64, ModelError> {
        get(k)?.parse().map_err(|_| bad(format!("header `{k}` is not a number")))
    };
    if get("digest")? != "sha256" {
        return Err(bad(format!("unsupported digest `{}`", get("digest")?)));
    }
    let lineage = get("lineage")?.split(',').map(str::parse).collect::<Result<Vec<Stage>, _>>()?;
    let stage: Stage = get("stage")?.parse()?;
    if lineage.last() != Some(&stage) {
        return Err(bad("stage disagrees with lineage".into()));
    }
    let source = match get("source")? {
        "-" => None,
        s => Some(s.to_string()),
    };
    let provenance = Provenance { lineage, seed: num("seed")?, epoch: num("epoch")?, source };
    let config: EncoderConfig = config_text.parse()?;
    Ok((config, num("proj_dim")? as usize, provenance))
}

fn serialize(network: &Network, provenance: &Provenance) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    let header = header_text(network, provenance);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let tensors: Vec<(&String, &Tensor, TensorKind)> = network
        .params()
        .iter()
        .map(|(k, v)| (k, v, TensorKind::Param))
        .chain(network.buffers().iter().map(|(k, v)| (k, v, TensorKind::Buffer)))
        .collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t, kind) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(kind as u8);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::MalformedCheckpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
