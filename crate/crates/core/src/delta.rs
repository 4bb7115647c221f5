//! Task deltas over a frozen base network, full checkpoints, and memory
//! footprint accounting.
//!
//! Both file kinds share one little-endian container:
//!
//! ```text
//! magic[4] version:u16 fingerprint[32] count:u32
//! count x { name_len:u16 name kind:u8 rank:u8 dims:u32[rank] data:f32[prod(dims)] }
//! ```
//!
//! Metadata travels as kind-0 entries whose name is `key=value`, with rank 1
//! and a zero extent.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{KmError, Result};
use crate::modulator::{InitMethod, KernelModulator, ModulatorStructure};
use crate::net::{
    build_network, Architecture, ModulatorConfig, Network, NetworkSpec, NormChoice, ParamGroupMask,
    ParamRef,
};
use crate::norm::NormLayer;
use crate::tensor::{Activation, Tensor};

pub const DELTA_MAGIC: [u8; 4] = *b"KMD1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KMC1";
/// Format version 1: SHA-256 fingerprint.
pub const FORMAT_VERSION: u16 = 1;
pub const FILE_HEADER_BYTES: usize = 4 + 2 + 32 + 4;
pub const CLASSIFIER_NAME: &str = "classifier";

pub type Fingerprint = [u8; 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PayloadKind {
    Metadata = 0,
    /// `[depth, s, s]` dense modulator matrices.
    Modulator = 1,
    /// `[depth, s]` diagonals of a diagonal modulator.
    DiagonalModulator = 2,
    NormGamma = 3,
    NormBeta = 4,
    ClassifierWeight = 5,
    ClassifierBias = 6,
    ConvWeight = 7,
    RunningMean = 8,
    RunningStd = 9,
}

impl PayloadKind {
    fn from_u8(v: u8) -> Result<Self> {
        use PayloadKind::*;
        [
            Metadata,
            Modulator,
            DiagonalModulator,
            NormGamma,
            NormBeta,
            ClassifierWeight,
            ClassifierBias,
            ConvWeight,
            RunningMean,
            RunningStd,
        ]
        .into_iter()
        .find(|k| *k as u8 == v)
        .ok_or_else(|| KmError::Decode(format!("unknown payload kind {v}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaEntry {
    pub name: String,
    pub kind: PayloadKind,
    pub tensor: Tensor,
}

/// Hash of all convolution weights, little-endian, in layer order.
pub fn fingerprint(net: &Network) -> Fingerprint {
    let mut h = Sha256::new();
    for conv in net.convs() {
        for v in conv.weight.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn fingerprint_hex(fp: &Fingerprint) -> String {
    fp.iter().map(|b| format!("{b:02x}")).collect()
}

struct Container {
    fingerprint: Fingerprint,
    metadata: Vec<(String, String)>,
    entries: Vec<DeltaEntry>,
}

fn entry_header_len(name: &str, rank: usize) -> usize {
    2 + name.len() + 1 + 1 + 4 * rank
}

fn encode(magic: [u8; 4], c: &Container) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&c.fingerprint);
    let count = u32::try_from(c.metadata.len() + c.entries.len())
        .map_err(|_| KmError::Contract("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    let put_header = |out: &mut Vec<u8>, name: &str, kind: PayloadKind, dims: &[usize]| -> Result<()> {
        let len = u16::try_from(name.len())
            .map_err(|_| KmError::Contract(format!("entry name of {} bytes is too long", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(kind as u8);
        out.push(dims.len() as u8);
        for &d in dims {
            let d = u32::try_from(d).map_err(|_| KmError::Contract(format!("extent {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        Ok(())
    };
    for (k, v) in &c.metadata {
        if k.contains('=') {
            return Err(KmError::Contract(format!("metadata key {k:?} contains '='")));
        }
        put_header(&mut out, &format!("{k}={v}"), PayloadKind::Metadata, &[0])?;
    }
    for e in &c.entries {
        put_header(&mut out, &e.name, e.kind, e.tensor.shape())?;
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            KmError::Decode(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { bytes, at: 0 };
    let found = r.take(4)?;
    if found != magic {
        return Err(KmError::Decode(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(KmError::Decode(format!("unsupported format version {version}")));
    }
    let fingerprint: Fingerprint = r.take(32)?.try_into().expect("32 bytes");
    let count = r.u32()?;
    let mut metadata = Vec::new();
    let mut entries = Vec::new();
    for i in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| KmError::Decode(format!("entry {i} name is not UTF-8")))?
            .to_string();
        let kind = PayloadKind::from_u8(r.u8()?)?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if kind == PayloadKind::Metadata {
            let (k, v) = name
                .split_once('=')
                .ok_or_else(|| KmError::Decode(format!("metadata entry {name:?} has no '='")))?;
            if dims != [0] {
                return Err(KmError::Decode(format!("metadata entry {name:?} carries a payload")));
            }
            metadata.push((k.to_string(), v.to_string()));
            continue;
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| KmError::Decode(format!("entry {name:?} has invalid dims {dims:?}")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| KmError::Decode("entry too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        entries.push(DeltaEntry {
            name,
            kind,
            tensor: Tensor::new(dims, data)?,
        });
    }
    if r.at != bytes.len() {
        return Err(KmError::Decode(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(Container {
        fingerprint,
        metadata,
        entries,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| KmError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| KmError::io(path, e))
}

fn decode_file(magic: [u8; 4], path: &Path) -> Result<Container> {
    decode(magic, &read_file(path)?).map_err(|e| match e {
        KmError::Decode(detail) => KmError::Format {
            path: path.to_path_buf(),
            detail,
        },
        other => other,
    })
}

/// The task-specific payload of a network trained over a frozen base.
#[derive(Clone, Debug, PartialEq)]
pub struct KmDelta {
    pub base_fingerprint: Fingerprint,
    pub metadata: Vec<(String, String)>,
    pub entries: Vec<DeltaEntry>,
}

impl KmDelta {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    pub fn task_name(&self) -> Option<&str> {
        self.meta("task")
    }

    pub fn payload_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Bytes that are not tensor values: file header, entry headers and
    /// metadata.
    pub fn header_bytes(&self) -> usize {
        FILE_HEADER_BYTES
            + self
                .metadata
                .iter()
                .map(|(k, v)| entry_header_len(&format!("{k}={v}"), 1))
                .sum::<usize>()
            + self
                .entries
                .iter()
                .map(|e| entry_header_len(&e.name, e.tensor.rank()))
                .sum::<usize>()
    }

    pub fn byte_len(&self) -> usize {
        self.header_bytes() + 4 * self.payload_values()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(
            DELTA_MAGIC,
            &Container {
                fingerprint: self.base_fingerprint,
                metadata: self.metadata.clone(),
                entries: self.entries.clone(),
            },
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = decode(DELTA_MAGIC, bytes)?;
        Ok(KmDelta {
            base_fingerprint: c.fingerprint,
            metadata: c.metadata,
            entries: c.entries,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let c = decode_file(DELTA_MAGIC, path.as_ref())?;
        Ok(KmDelta {
            base_fingerprint: c.fingerprint,
            metadata: c.metadata,
            entries: c.entries,
        })
    }
}

/// Capture the trainable groups of `net` as a delta over its frozen base.
///
/// Batch-norm layers are exported with their running statistics folded into
/// gamma/beta (and the statistics reset to mean 0, std 1 on apply), since
/// eval-mode behavior depends on the statistics even when the affine is
/// frozen. Group-norm affines are exported as is when the implicit group
/// trains.
pub fn export_delta(net: &Network, task_name: &str) -> Result<KmDelta> {
    let mask = net.mask();
    if mask.convolution {
        return Err(KmError::Contract(
            "convolution weights were trainable; a delta cannot carry them".into(),
        ));
    }
    let mut delta = KmDelta {
        base_fingerprint: fingerprint(net),
        metadata: vec![("task".into(), task_name.into()), ("mask".into(), mask.to_string())],
        entries: Vec::new(),
    };
    if mask.explicit {
        let mut activation = None;
        for conv in net.convs() {
            let Some(m) = &conv.modulator else { continue };
            if activation.is_some_and(|a| a != m.activation()) {
                return Err(KmError::Contract("modulators use mixed activations".into()));
            }
            activation = Some(m.activation());
            let s = m.side();
            let (kind, dims, data): (_, Vec<usize>, Vec<f32>) = match m.structure() {
                ModulatorStructure::Full => (
                    PayloadKind::Modulator,
                    vec![m.depth(), s, s],
                    m.layers().iter().flat_map(|u| u.data().iter().copied()).collect(),
                ),
                ModulatorStructure::Diagonal => (
                    PayloadKind::DiagonalModulator,
                    vec![m.depth(), s],
                    (0..m.depth()).flat_map(|j| m.layer_params(j).into_data()).collect(),
                ),
            };
            delta.entries.push(DeltaEntry {
                name: conv.name.clone(),
                kind,
                tensor: Tensor::new(dims, data)?,
            });
        }
        if let Some(a) = activation {
            delta.set_meta("activation", a.name());
        }
    }
    for n in net.norms() {
        let (gamma, beta) = if n.layer.has_fixed_eval_stats() {
            let (scale, offset) = n.layer.eval_affine()?;
            (Tensor::new([scale.len()], scale)?, Tensor::new([offset.len()], offset)?)
        } else if mask.implicit {
            (n.layer.gamma.clone(), n.layer.beta.clone())
        } else {
            continue;
        };
        delta.entries.push(DeltaEntry {
            name: n.name.clone(),
            kind: PayloadKind::NormGamma,
            tensor: gamma,
        });
        delta.entries.push(DeltaEntry {
            name: n.name.clone(),
            kind: PayloadKind::NormBeta,
            tensor: beta,
        });
    }
    if mask.classifier {
        let c = net.classifier();
        for (kind, t) in [
            (PayloadKind::ClassifierWeight, &c.weight),
            (PayloadKind::ClassifierBias, &c.bias),
        ] {
            delta.entries.push(DeltaEntry {
                name: CLASSIFIER_NAME.into(),
                kind,
                tensor: t.clone(),
            });
        }
    }
    Ok(delta)
}

fn lookup<T>(found: Option<T>, what: &str, name: &str) -> Result<T> {
    found.ok_or_else(|| KmError::Integrity(format!("delta names unknown {what} {name:?}")))
}

fn shape_error(name: &str, kind: PayloadKind, expected: &[usize], got: &[usize]) -> KmError {
    KmError::Integrity(format!(
        "{name} {kind:?}: base expects shape {expected:?}, delta has {got:?}"
    ))
}

/// Merge a delta into a copy of `base`. The base is never modified, and an
/// error leaves nothing half-applied.
pub fn apply_delta(base: &Network, delta: &KmDelta) -> Result<Network> {
    let found = fingerprint(base);
    if found != delta.base_fingerprint {
        return Err(KmError::Integrity(format!(
            "fingerprint mismatch: delta was made for base {}, this base is {}",
            fingerprint_hex(&delta.base_fingerprint),
            fingerprint_hex(&found)
        )));
    }
    let activation = match delta.meta("activation") {
        Some(a) => Some(a.parse::<Activation>()?),
        None => None,
    };
    let mut net = base.clone();
    let mut seen = HashSet::new();
    for e in &delta.entries {
        if !seen.insert((e.name.as_str(), e.kind)) {
            return Err(KmError::Integrity(format!("duplicate entry {} {:?}", e.name, e.kind)));
        }
        let shape = e.tensor.shape();
        match e.kind {
            PayloadKind::Modulator | PayloadKind::DiagonalModulator => {
                let i = lookup(net.conv_index(&e.name), "convolution", &e.name)?;
                let side = net.convs()[i].shape().side();
                let diagonal = e.kind == PayloadKind::DiagonalModulator;
                let ok = if diagonal {
                    shape.len() == 2 && shape[1] == side
                } else {
                    shape.len() == 3 && shape[1] == side && shape[2] == side
                };
                if !ok {
                    let expected = if diagonal { vec![shape[0], side] } else { vec![shape[0], side, side] };
                    return Err(shape_error(&e.name, e.kind, &expected, shape));
                }
                let activation = activation.ok_or_else(|| {
                    KmError::Integrity("delta carries modulators but no activation".into())
                })?;
                let per = e.tensor.numel() / shape[0];
                let layers = e
                    .tensor
                    .data()
                    .chunks(per)
                    .map(|chunk| {
                        if diagonal {
                            let mut m = vec![0.0; side * side];
                            for (k, &v) in chunk.iter().enumerate() {
                                m[k * side + k] = v;
                            }
                            Tensor::new([side, side], m)
                        } else {
                            Tensor::new([side, side], chunk.to_vec())
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let structure = if diagonal {
                    ModulatorStructure::Diagonal
                } else {
                    ModulatorStructure::Full
                };
                net.set_modulator(i, KernelModulator::from_layers(layers, activation, structure)?)?;
            }
            PayloadKind::NormGamma | PayloadKind::NormBeta => {
                let i = lookup(net.norm_index(&e.name), "normalization", &e.name)?;
                let c = net.norms()[i].layer.channels();
                if shape != [c] {
                    return Err(shape_error(&e.name, e.kind, &[c], shape));
                }
                let layer: &mut NormLayer = &mut net.norms_mut()[i].layer;
                if e.kind == PayloadKind::NormGamma {
                    layer.gamma = e.tensor.clone();
                } else {
                    layer.beta = e.tensor.clone();
                }
                if layer.has_fixed_eval_stats() {
                    layer.running_mean = Tensor::zeros([c]);
                    layer.running_std = Tensor::full([c], 1.0);
                }
            }
            PayloadKind::ClassifierWeight | PayloadKind::ClassifierBias => {
                if e.name != CLASSIFIER_NAME {
                    return Err(KmError::Integrity(format!("delta names unknown classifier {:?}", e.name)));
                }
                let r = if e.kind == PayloadKind::ClassifierWeight {
                    ParamRef::ClassifierWeight
                } else {
                    ParamRef::ClassifierBias
                };
                let expected = net.param(r).shape().to_vec();
                if shape != expected.as_slice() {
                    return Err(shape_error(&e.name, e.kind, &expected, shape));
                }
                net.set_param(r, &e.tensor)?;
            }
            other => {
                return Err(KmError::Integrity(format!(
                    "{} {other:?} does not belong in a delta",
                    e.name
                )))
            }
        }
    }
    if let Some(mask) = delta.meta("mask") {
        net.set_mask(mask.parse()?);
    }
    Ok(net)
}

/// Check that `delta` applies cleanly to `base` without keeping the result.
pub fn verify_delta(base: &Network, delta: &KmDelta) -> Result<()> {
    apply_delta(base, delta).map(|_| ())
}

fn spec_metadata(spec: &NetworkSpec, mask: ParamGroupMask) -> Vec<(String, String)> {
    let mut m = Vec::new();
    let mut put = |k: &str, v: String| m.push((k.to_string(), v));
    match spec.architecture {
        Architecture::ResnetMicro {
            n_blocks,
            base_width,
        } => {
            put("architecture", "resnet_micro".into());
            put("n_blocks", n_blocks.to_string());
            put("base_width", base_width.to_string());
        }
        Architecture::MlpHead => put("architecture", "mlp_head".into()),
    }
    let [c, h, w] = spec.input_shape;
    put("input_shape", format!("{c},{h},{w}"));
    put("class_count", spec.class_count.to_string());
    put(
        "norm",
        match spec.norm {
            NormChoice::Batch => "batch".into(),
            NormChoice::Group { groups: None } => "group".into(),
            NormChoice::Group { groups: Some(g) } => format!("group:{g}"),
        },
    );
    put("modulator_depth", spec.modulator.depth.to_string());
    put("modulator_activation", spec.modulator.activation.name());
    put("modulator_init", spec.modulator.init.name().into());
    if let InitMethod::IdentityNoise { sigma } | InitMethod::Diagonal { sigma } = spec.modulator.init {
        put("modulator_sigma", sigma.to_string());
    }
    put("mask", mask.to_string());
    m
}

fn spec_from_metadata(meta: &[(String, String)]) -> Result<(NetworkSpec, ParamGroupMask)> {
    let map: BTreeMap<&str, &str> = meta.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let get = |k: &str| {
        map.get(k)
            .copied()
            .ok_or_else(|| KmError::Decode(format!("checkpoint lacks {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| KmError::Decode(format!("checkpoint {k} is not an integer")))
    };
    let architecture = match get("architecture")? {
        "resnet_micro" => Architecture::ResnetMicro {
            n_blocks: num("n_blocks")?,
            base_width: num("base_width")?,
        },
        "mlp_head" => Architecture::MlpHead,
        other => return Err(KmError::Decode(format!("unknown architecture {other:?}"))),
    };
    let dims: Vec<usize> = get("input_shape")?
        .split(',')
        .map(|d| d.parse().map_err(|_| KmError::Decode("bad input_shape".into())))
        .collect::<Result<_>>()?;
    let input_shape: [usize; 3] = dims
        .try_into()
        .map_err(|_| KmError::Decode("input_shape needs three extents".into()))?;
    let norm = match get("norm")?.split_once(':') {
        None if get("norm")? == "batch" => NormChoice::Batch,
        None if get("norm")? == "group" => NormChoice::Group { groups: None },
        Some(("group", g)) => NormChoice::Group {
            groups: Some(g.parse().map_err(|_| KmError::Decode("bad group count".into()))?),
        },
        _ => return Err(KmError::Decode(format!("unknown norm {:?}", get("norm")?))),
    };
    let sigma = match map.get("modulator_sigma") {
        Some(s) => s.parse().map_err(|_| KmError::Decode("bad modulator_sigma".into()))?,
        None => InitMethod::DEFAULT_SIGMA,
    };
    let spec = NetworkSpec {
        architecture,
        input_shape,
        class_count: num("class_count")?,
        norm,
        modulator: ModulatorConfig {
            depth: num("modulator_depth")?,
            activation: get("modulator_activation")?.parse()?,
            init: InitMethod::parse(get("modulator_init")?, sigma)?,
        },
    };
    Ok((spec, get("mask")?.parse()?))
}

/// Serialize a complete network, frozen weights included.
pub fn checkpoint_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    for conv in net.convs() {
        entries.push(DeltaEntry {
            name: conv.name.clone(),
            kind: PayloadKind::ConvWeight,
            tensor: conv.weight.clone(),
        });
        if let Some(m) = &conv.modulator {
            let s = m.side();
            entries.push(DeltaEntry {
                name: conv.name.clone(),
                kind: PayloadKind::Modulator,
                tensor: Tensor::new(
                    [m.depth(), s, s],
                    m.layers().iter().flat_map(|u| u.data().iter().copied()).collect(),
                )?,
            });
        }
    }
    for n in net.norms() {
        let l = &n.layer;
        for (kind, t) in [
            (PayloadKind::NormGamma, &l.gamma),
            (PayloadKind::NormBeta, &l.beta),
            (PayloadKind::RunningMean, &l.running_mean),
            (PayloadKind::RunningStd, &l.running_std),
        ] {
            entries.push(DeltaEntry {
                name: n.name.clone(),
                kind,
                tensor: t.clone(),
            });
        }
    }
    let c = net.classifier();
    entries.push(DeltaEntry {
        name: CLASSIFIER_NAME.into(),
        kind: PayloadKind::ClassifierWeight,
        tensor: c.weight.clone(),
    });
    entries.push(DeltaEntry {
        name: CLASSIFIER_NAME.into(),
        kind: PayloadKind::ClassifierBias,
        tensor: c.bias.clone(),
    });
    let mut metadata = spec_metadata(net.spec(), net.mask());
    if let Some(m) = net.convs().iter().find_map(|c| c.modulator.as_ref()) {
        metadata.push(("modulator_structure".into(), format!("{:?}", m.structure()).to_lowercase()));
    }
    encode(
        CHECKPOINT_MAGIC,
        &Container {
            fingerprint: fingerprint(net),
            metadata,
            entries,
        },
    )
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Network> {
    network_from_container(decode(CHECKPOINT_MAGIC, bytes)?)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &checkpoint_bytes(net)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    network_from_container(decode_file(CHECKPOINT_MAGIC, path.as_ref())?)
}

fn network_from_container(c: Container) -> Result<Network> {
    let (spec, mask) = spec_from_metadata(&c.metadata)?;
    let structure = match c.metadata.iter().find(|(k, _)| k == "modulator_structure") {
        Some((_, v)) if v == "diagonal" => ModulatorStructure::Diagonal,
        _ => ModulatorStructure::Full,
    };
    let mut net = build_network(spec, ParamGroupMask { explicit: false, ..mask }, 0)?;
    for e in &c.entries {
        let bad_shape = |expected: &[usize]| shape_error(&e.name, e.kind, expected, e.tensor.shape());
        match e.kind {
            PayloadKind::ConvWeight => {
                let i = lookup(net.conv_index(&e.name), "convolution", &e.name)?;
                let expected = net.convs()[i].weight.shape().to_vec();
                if e.tensor.shape() != expected.as_slice() {
                    return Err(bad_shape(&expected));
                }
                net.set_param(ParamRef::ConvWeight(i), &e.tensor)?;
            }
            PayloadKind::Modulator => {
                let i = lookup(net.conv_index(&e.name), "convolution", &e.name)?;
                let side = net.convs()[i].shape().side();
                let s = e.tensor.shape();
                if s.len() != 3 || s[1] != side || s[2] != side {
                    return Err(bad_shape(&[s[0], side, side]));
                }
                let layers = e
                    .tensor
                    .data()
                    .chunks(side * side)
                    .map(|m| Tensor::new([side, side], m.to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                net.set_modulator(
                    i,
                    KernelModulator::from_layers(layers, spec.modulator.activation, structure)?,
                )?;
            }
            PayloadKind::NormGamma | PayloadKind::NormBeta | PayloadKind::RunningMean | PayloadKind::RunningStd => {
                let i = lookup(net.norm_index(&e.name), "normalization", &e.name)?;
                let layer = &mut net.norms_mut()[i].layer;
                let c = layer.channels();
                if e.tensor.shape() != [c] {
                    return Err(bad_shape(&[c]));
                }
                let slot = match e.kind {
                    PayloadKind::NormGamma => &mut layer.gamma,
                    PayloadKind::NormBeta => &mut layer.beta,
                    PayloadKind::RunningMean => &mut layer.running_mean,
                    _ => &mut layer.running_std,
                };
                *slot = e.tensor.clone();
            }
            PayloadKind::ClassifierWeight | PayloadKind::ClassifierBias => {
                let r = if e.kind == PayloadKind::ClassifierWeight {
                    ParamRef::ClassifierWeight
                } else {
                    ParamRef::ClassifierBias
                };
                let expected = net.param(r).shape().to_vec();
                if e.tensor.shape() != expected.as_slice() {
                    return Err(bad_shape(&expected));
                }
                net.set_param(r, &e.tensor)?;
            }
            other => return Err(KmError::Decode(format!("unexpected {other:?} entry in checkpoint"))),
        }
    }
    net.set_mask(mask);
    if fingerprint(&net) != c.fingerprint {
        return Err(KmError::Integrity("checkpoint fingerprint does not match its weights".into()));
    }
    Ok(net)
}

/// Storage of one shared base plus per-task deltas, against storing a full
/// network per task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryReport {
    pub base_bytes: u64,
    pub per_task_bytes: u64,
    pub task_count: u64,
    pub naive_total_bytes: u64,
    pub km_total_bytes: u64,
    /// `naive_total_bytes / km_total_bytes`.
    pub reduction_factor: f64,
    /// `base_bytes / per_task_bytes`, the saving for a single extra task.
    pub per_task_factor: f64,
}

pub fn memory_report(base_bytes: u64, per_task_bytes: u64, task_count: u64) -> Result<MemoryReport> {
    if base_bytes == 0 || per_task_bytes == 0 || task_count == 0 {
        return Err(KmError::Contract("memory report inputs must be positive".into()));
    }
    let overflow = || KmError::Contract("memory report overflows u64".into());
    let naive = base_bytes.checked_mul(task_count).ok_or_else(overflow)?;
    let km = per_task_bytes
        .checked_mul(task_count)
        .and_then(|t| t.checked_add(base_bytes))
        .ok_or_else(overflow)?;
    Ok(MemoryReport {
        base_bytes,
        per_task_bytes,
        task_count,
        naive_total_bytes: naive,
        km_total_bytes: km,
        reduction_factor: naive as f64 / km as f64,
        per_task_factor: base_bytes as f64 / per_task_bytes as f64,
    })
}
