//! Effective configuration: built-in defaults, then a flat `key=value`
//! config file, then command-line flags. Keys are the long flag names.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kmod::data::{load_cifar10_binary, synth_task, AugmentSpec, DatasetSplit, Split, SynthKind};
use kmod::modulator::InitMethod;
use kmod::net::{Architecture, ModulatorConfig, NetworkSpec, NormChoice, ParamGroup, ParamGroupMask};
use kmod::train::{LrSchedule, TrainConfig};
use kmod::{KmError, Result};
use sha2::{Digest, Sha256};

/// Every recognized key with its default; `None` means no default.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("mask", None),
    ("train-conv", Some("false")),
    ("train-implicit", Some("false")),
    ("train-explicit", Some("false")),
    ("train-classifier", Some("false")),
    ("data", Some("striped_textures")),
    ("data-dir", None),
    ("subset", None),
    ("test-subset", None),
    ("classes", Some("10")),
    ("n-per-class", Some("200")),
    ("image-size", Some("16")),
    ("data-seed", Some("0")),
    ("arch", Some("resnet_micro")),
    ("n-blocks", Some("1")),
    ("base-width", Some("8")),
    ("norm", Some("batch")),
    ("activation", Some("tanh")),
    ("init", Some("identity_noise")),
    ("sigma", Some("0.001")),
    ("depth", Some("2")),
    ("epochs", Some("20")),
    ("batch-size", Some("64")),
    ("lr", Some("0.05")),
    ("momentum", Some("0.9")),
    ("weight-decay", Some("0.0005")),
    ("lr-schedule", Some("step:12/16:0.1")),
    ("decay-all", Some("false")),
    ("augment", None),
    ("seed", Some("0")),
    ("task", None),
    ("axis", None),
    ("values", None),
    ("seeds", Some("5")),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn config_err(msg: impl Into<String>) -> KmError {
    KmError::Config(msg.into())
}

fn switch_key(group: ParamGroup) -> &'static str {
    match group {
        ParamGroup::Convolution => "train-conv",
        ParamGroup::Implicit => "train-implicit",
        ParamGroup::Explicit => "train-explicit",
        ParamGroup::Classifier => "train-classifier",
    }
}

/// Parse `key=value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("{origin}:{}: expected key=value", n + 1)))?;
        let k = k.trim();
        if !KEYS.iter().any(|(name, _)| *name == k) {
            return Err(config_err(format!("{origin}:{}: unknown key {k:?}", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn resolve(config: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let mut values: BTreeMap<String, String> = KEYS
            .iter()
            .filter_map(|(k, d)| d.map(|d| (k.to_string(), d.to_string())))
            .collect();
        if let Some(path) = config {
            let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
            values.extend(parse_config_text(&text, &path.display().to_string())?);
        }
        for (k, v) in flags {
            values.insert(k.clone(), v.clone());
        }
        Ok(Settings { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| config_err(format!("missing required setting {key}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| config_err(format!("{key}: cannot parse {raw:?}")))
    }

    fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.parse(key).map(Some),
        }
    }

    fn flag(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    /// The effective configuration, one `key=value` per line, sorted.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn digest(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Union of `mask` and the `train-*` switches; `default` applies when
    /// neither is given.
    pub fn mask(&self, default: ParamGroupMask) -> Result<ParamGroupMask> {
        let mut mask = match self.get("mask") {
            Some(m) => m.parse()?,
            None => ParamGroupMask::NONE,
        };
        let mut any_switch = false;
        for group in ParamGroup::ALL {
            if self.flag(switch_key(group))? {
                mask.set(group, true);
                any_switch = true;
            }
        }
        if self.get("mask").is_none() && !any_switch {
            return Ok(default);
        }
        if !mask.any() {
            return Err(config_err("the trainable mask is empty; enable at least one parameter group"));
        }
        Ok(mask)
    }

    pub fn network_spec(&self, input_shape: [usize; 3], class_count: usize) -> Result<NetworkSpec> {
        let architecture = match self.require("arch")? {
            "resnet_micro" => Architecture::ResnetMicro {
                n_blocks: self.parse("n-blocks")?,
                base_width: self.parse("base-width")?,
            },
            "mlp_head" => Architecture::MlpHead,
            other => return Err(config_err(format!("unknown architecture {other:?}"))),
        };
        let norm = match self.require("norm")? {
            "batch" => NormChoice::Batch,
            "group" => NormChoice::Group { groups: None },
            other => match other.strip_prefix("group:") {
                Some(g) => NormChoice::Group {
                    groups: Some(g.parse().map_err(|_| config_err(format!("bad group count {g:?}")))?),
                },
                None => return Err(config_err(format!("unknown norm {other:?}"))),
            },
        };
        let sigma: f64 = self.parse("sigma")?;
        Ok(NetworkSpec {
            architecture,
            input_shape,
            class_count,
            norm,
            modulator: ModulatorConfig {
                depth: self.parse("depth")?,
                activation: self.require("activation")?.parse()?,
                init: InitMethod::parse(self.require("init")?, sigma)?,
            },
        })
    }

    pub fn is_cifar(&self) -> bool {
        self.get("data") == Some("cifar10")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let augment: AugmentSpec = match self.get("augment") {
            Some(a) => a.parse()?,
            None if self.is_cifar() => AugmentSpec::CropFlip { pad: 4 },
            None => AugmentSpec::None,
        };
        let lr_schedule: LrSchedule = self.require("lr-schedule")?.parse()?;
        let cfg = TrainConfig {
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch-size")?,
            learning_rate: self.parse("lr")?,
            momentum: self.parse("momentum")?,
            weight_decay: self.parse("weight-decay")?,
            lr_schedule,
            decay_all: self.flag("decay-all")?,
            augment,
            seed: self.parse("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        self.get("data-dir")
            .map(PathBuf::from)
            .or_else(|| std::env::var_os("KM_CIFAR10_DIR").map(PathBuf::from))
    }

    /// Train and test splits. CIFAR-10 takes `subset` training samples and,
    /// unless `test-subset` is given, half as many test samples.
    pub fn datasets(&self) -> Result<(DatasetSplit, DatasetSplit)> {
        let seed: u64 = self.parse("data-seed")?;
        match self.require("data")? {
            "cifar10" => {
                let dir = self
                    .data_dir()
                    .ok_or_else(|| config_err("cifar10 needs data-dir (or KM_CIFAR10_DIR)"))?;
                let subset: Option<usize> = self.parse_opt("subset")?;
                let test_subset = match self.parse_opt::<usize>("test-subset")? {
                    Some(t) => Some(t),
                    None => subset.map(|s| s / 2),
                };
                Ok((
                    load_cifar10_binary(&dir, Split::Train, subset, seed)?,
                    load_cifar10_binary(&dir, Split::Test, test_subset, seed)?,
                ))
            }
            name => {
                let kind: SynthKind = name.parse()?;
                synth_task(
                    kind,
                    self.parse("classes")?,
                    self.parse("n-per-class")?,
                    self.parse("image-size")?,
                    seed,
                )
            }
        }
    }

    pub fn task_name(&self) -> String {
        self.get("task")
            .or(self.get("data"))
            .unwrap_or("task")
            .to_string()
    }
}
