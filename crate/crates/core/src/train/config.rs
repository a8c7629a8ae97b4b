use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::network::{EncoderSpec, NetworkConfig};

use super::OptimConfig;

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.root", ".", "dataset directory (images/, masks/, classes.txt)"),
    ("data.split_ratio", "0.8", "share of pairs in train+val; the rest is test"),
    ("data.val_fraction", "0.1", "share of the train portion held out for validation"),
    ("data.split_seed", "0", "seed of the train/val/test assignment"),
    ("net.preset", "micro", "tiny, micro, desk or full; explicit net.* keys override it"),
    ("net.num_classes", "0", "class count; 0 takes it from classes.txt"),
    ("net.stage_channels", "", "encoder widths at strides 4, 8, 16"),
    ("net.blocks_per_stage", "", "residual blocks per encoder stage"),
    ("net.aspp_branch_channels", "", "Mini-ASPP branch widths for levels 1, 2"),
    ("net.aspp_out_channels", "", "Mini-ASPP output widths for levels 1, 2"),
    ("net.psa_reduction", "", "PSA channel reduction for levels 1, 2"),
    ("net.sppm_branch_channels", "", "SPPM branch width"),
    ("net.sppm_out_channels", "", "SPPM output width"),
    ("net.pyramid_sizes", "", "SPPM pyramid bin counts, strictly increasing"),
    ("net.strip_branches", "", "SPPM row/column strip branches"),
    ("net.decoder_channels", "", "decoder fusion widths at strides 8, 4"),
    ("net.aux_channels", "", "width of the deep-supervision projections"),
    ("loss.gamma", "2", "focal exponent"),
    ("loss.dice_eps", "1", "dice smoothing"),
    ("loss.dice_squared", "false", "square probabilities in the dice denominator"),
    ("loss.alpha", "0.1", "offset in w_k = 1/(IoU_k + alpha)"),
    ("loss.levels", "3", "supervised outputs averaged by the loss"),
    ("loss.adaptive_weights", "true", "refresh class weights from validation IoU"),
    ("augment.crop", "256,256", "crop height,width or none"),
    ("augment.flip_prob", "0.5", "horizontal flip probability"),
    ("augment.scale", "0.75,1.25", "scale range min,max"),
    ("augment.rare_class", "none", "class id whose images are oversampled"),
    ("augment.rare_factor", "1", "copies of each rare-class training image"),
    ("optim.lr", "0.001", "learning rate"),
    ("optim.momentum", "0.9", "momentum"),
    ("optim.weight_decay", "0.0001", "L2 weight decay added to the gradient"),
    ("train.batch_size", "8", "samples per step"),
    ("train.epochs", "1", "passes over the training split"),
    ("train.drop_last", "false", "skip the final partial batch of each epoch"),
    ("train.validate_every", "1", "epochs between validations"),
    ("train.seed", "0", "seed for initialization, shuffling and augmentation"),
    ("train.checkpoint", "none", "checkpoint file written at every validation"),
    ("train.history", "none", "metric-history CSV"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    pub split_ratio: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub drop_last: bool,
    pub validate_every: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::from_pairs(&[], Path::new(".")).expect("defaults parse")
    }
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("key `{key}`: cannot parse {value:?} as {what}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, "a number"))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true/false")),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| p.trim().parse().map_err(|_| bad(key, v, "a comma-separated list"))).collect()
}

fn fixed<const N: usize, T: std::str::FromStr + Copy + Default>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = list(key, v)?;
    items.try_into().map_err(|_| bad(key, v, &format!("a list of {N} values")))
}

fn optional_path(key: &str, v: &str, base: &Path) -> Result<Option<PathBuf>> {
    match v {
        "none" | "" => Ok(None),
        p if p.contains(',') => Err(bad(key, v, "a path")),
        p => Ok(Some(base.join(p))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_pairs(&parse_pairs(&text)?, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?, base)
    }

    /// Builds a config from defaults overlaid with `pairs` (later pairs win).
    pub fn from_pairs(pairs: &[(String, String)], base: &Path) -> Result<Self> {
        let mut map: BTreeMap<&str, &str> = KEYS.iter().map(|(k, d, _)| (*k, *d)).collect();
        for (k, v) in pairs {
            match map.get_mut(k.as_str()) {
                Some(slot) => *slot = v.as_str(),
                None => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        let get = |k: &str| map[k];
        let set = |k: &str| !map[k].is_empty();

        let classes: usize = num("net.num_classes", get("net.num_classes"))?;
        let mut net = NetworkConfig::preset(get("net.preset"), classes)
            .map_err(|e| Error::Config(format!("key `net.preset`: {e}")))?;
        if set("net.stage_channels") || set("net.blocks_per_stage") {
            let mut enc: EncoderSpec = net.encoder.clone();
            if set("net.stage_channels") {
                enc.stage_channels = fixed("net.stage_channels", get("net.stage_channels"))?;
            }
            if set("net.blocks_per_stage") {
                enc.blocks_per_stage = fixed("net.blocks_per_stage", get("net.blocks_per_stage"))?;
            }
            let pyramid = net.sppm.pyramid_sizes.clone();
            net = NetworkConfig::from_encoder(enc, classes);
            net.sppm.pyramid_sizes = pyramid;
        }
        if set("net.aspp_branch_channels") {
            let b: [usize; 2] = fixed("net.aspp_branch_channels", get("net.aspp_branch_channels"))?;
            net.mini_aspp[0].branch_channels = b[0];
            net.mini_aspp[1].branch_channels = b[1];
        }
        if set("net.aspp_out_channels") {
            let o: [usize; 2] = fixed("net.aspp_out_channels", get("net.aspp_out_channels"))?;
            for l in 0..2 {
                net.mini_aspp[l].out_channels = o[l];
                net.psa[l].channels = o[l];
            }
        }
        if set("net.psa_reduction") {
            let r: [usize; 2] = fixed("net.psa_reduction", get("net.psa_reduction"))?;
            net.psa[0].reduction = r[0];
            net.psa[1].reduction = r[1];
        }
        if set("net.sppm_branch_channels") {
            net.sppm.branch_channels = num("net.sppm_branch_channels", get("net.sppm_branch_channels"))?;
        }
        if set("net.sppm_out_channels") {
            net.sppm.out_channels = num("net.sppm_out_channels", get("net.sppm_out_channels"))?;
        }
        if set("net.pyramid_sizes") {
            net.sppm.pyramid_sizes = list("net.pyramid_sizes", get("net.pyramid_sizes"))?;
        }
        if set("net.strip_branches") {
            net.sppm.strip_branches = boolean("net.strip_branches", get("net.strip_branches"))?;
        }
        if set("net.decoder_channels") {
            net.decoder_channels = fixed("net.decoder_channels", get("net.decoder_channels"))?;
        }
        if set("net.aux_channels") {
            net.aux_channels = num("net.aux_channels", get("net.aux_channels"))?;
        }

        let crop = match get("augment.crop") {
            "none" => None,
            v => {
                let [h, w]: [usize; 2] = fixed("augment.crop", v)?;
                Some((h, w))
            }
        };
        let [scale_min, scale_max]: [f64; 2] = fixed("augment.scale", get("augment.scale"))?;
        let rare_class = match get("augment.rare_class") {
            "none" => None,
            v => Some(num("augment.rare_class", v)?),
        };

        let cfg = Self {
            data: DataConfig {
                root: base.join(get("data.root")),
                split_ratio: num("data.split_ratio", get("data.split_ratio"))?,
                val_fraction: num("data.val_fraction", get("data.val_fraction"))?,
                split_seed: num("data.split_seed", get("data.split_seed"))?,
            },
            network: net,
            loss: LossConfig {
                gamma: num("loss.gamma", get("loss.gamma"))?,
                dice_eps: num("loss.dice_eps", get("loss.dice_eps"))?,
                dice_squared: boolean("loss.dice_squared", get("loss.dice_squared"))?,
                alpha: num("loss.alpha", get("loss.alpha"))?,
                deep_supervision_levels: num("loss.levels", get("loss.levels"))?,
                adaptive_weights: boolean("loss.adaptive_weights", get("loss.adaptive_weights"))?,
            },
            augment: AugmentPolicy {
                crop,
                flip_prob: num("augment.flip_prob", get("augment.flip_prob"))?,
                scale_min,
                scale_max,
                rare_class,
                rare_factor: num("augment.rare_factor", get("augment.rare_factor"))?,
            },
            optim: OptimConfig {
                lr: num("optim.lr", get("optim.lr"))?,
                momentum: num("optim.momentum", get("optim.momentum"))?,
                weight_decay: num("optim.weight_decay", get("optim.weight_decay"))?,
            },
            batch_size: num("train.batch_size", get("train.batch_size"))?,
            epochs: num("train.epochs", get("train.epochs"))?,
            drop_last: boolean("train.drop_last", get("train.drop_last"))?,
            validate_every: num("train.validate_every", get("train.validate_every"))?,
            seed: num("train.seed", get("train.seed"))?,
            checkpoint: optional_path("train.checkpoint", get("train.checkpoint"), base)?,
            history: optional_path("train.history", get("train.history"), base)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything except the class count, which may still be
    /// taken from the dataset.
    pub fn validate(&self) -> Result<()> {
        let key_err = |key: &str, e: Error| Error::Config(format!("key `{key}`: {e}"));
        if self.batch_size == 0 {
            return Err(Error::Config("key `train.batch_size`: must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("key `train.epochs`: must be >= 1".into()));
        }
        if self.validate_every == 0 {
            return Err(Error::Config("key `train.validate_every`: must be >= 1".into()));
        }
        self.optim.validate().map_err(|e| key_err("optim", e))?;
        self.loss.validate().map_err(|e| key_err("loss", e))?;
        if self.loss.deep_supervision_levels != 3 {
            return Err(Error::Config("key `loss.levels`: the network supervises exactly 3 outputs".into()));
        }
        self.augment.validate().map_err(|e| key_err("augment", e))?;
        if self.network.num_classes != 0 {
            self.network.validate().map_err(|e| key_err("net", e))?;
        }
        Ok(())
    }

    /// Fixes the class count (when left at 0) and validates the network.
    pub fn resolve_classes(&mut self, num_classes: usize) -> Result<()> {
        if self.network.num_classes == 0 {
            self.network.num_classes = num_classes;
        } else if self.network.num_classes != num_classes {
            return Err(Error::Config(format!(
                "key `net.num_classes`: config says {} but the dataset lists {num_classes}",
                self.network.num_classes
            )));
        }
        self.network.validate().map_err(|e| Error::Config(format!("key `net`: {e}")))
    }

    /// Every key with an explicit value, sorted; parsing it back (from any
    /// directory, since paths are written as stored) yields `self`.
    pub fn to_canonical_text(&self) -> String {
        let n = &self.network;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string());
        let mut entries: BTreeMap<&str, String> = BTreeMap::new();
        entries.insert("data.root", self.data.root.display().to_string());
        entries.insert("data.split_ratio", self.data.split_ratio.to_string());
        entries.insert("data.val_fraction", self.data.val_fraction.to_string());
        entries.insert("data.split_seed", self.data.split_seed.to_string());
        entries.insert("net.preset", "micro".into());
        entries.insert("net.num_classes", n.num_classes.to_string());
        entries.insert("net.stage_channels", join(&n.encoder.stage_channels));
        entries.insert("net.blocks_per_stage", join(&n.encoder.blocks_per_stage));
        entries.insert("net.aspp_branch_channels", join(&n.mini_aspp.each_ref().map(|a| a.branch_channels)));
        entries.insert("net.aspp_out_channels", join(&n.mini_aspp.each_ref().map(|a| a.out_channels)));
        entries.insert("net.psa_reduction", join(&n.psa.each_ref().map(|p| p.reduction)));
        entries.insert("net.sppm_branch_channels", n.sppm.branch_channels.to_string());
        entries.insert("net.sppm_out_channels", n.sppm.out_channels.to_string());
        entries.insert("net.pyramid_sizes", join(&n.sppm.pyramid_sizes));
        entries.insert("net.strip_branches", n.sppm.strip_branches.to_string());
        entries.insert("net.decoder_channels", join(&n.decoder_channels));
        entries.insert("net.aux_channels", n.aux_channels.to_string());
        entries.insert("loss.gamma", self.loss.gamma.to_string());
        entries.insert("loss.dice_eps", self.loss.dice_eps.to_string());
        entries.insert("loss.dice_squared", self.loss.dice_squared.to_string());
        entries.insert("loss.alpha", self.loss.alpha.to_string());
        entries.insert("loss.levels", self.loss.deep_supervision_levels.to_string());
        entries.insert("loss.adaptive_weights", self.loss.adaptive_weights.to_string());
        entries.insert("augment.crop", self.augment.crop.map_or_else(|| "none".into(), |(h, w)| format!("{h},{w}")));
        entries.insert("augment.flip_prob", self.augment.flip_prob.to_string());
        entries.insert("augment.scale", format!("{},{}", self.augment.scale_min, self.augment.scale_max));
        entries.insert("augment.rare_class", self.augment.rare_class.map_or_else(|| "none".into(), |c| c.to_string()));
        entries.insert("augment.rare_factor", self.augment.rare_factor.to_string());
        entries.insert("optim.lr", self.optim.lr.to_string());
        entries.insert("optim.momentum", self.optim.momentum.to_string());
        entries.insert("optim.weight_decay", self.optim.weight_decay.to_string());
        entries.insert("train.batch_size", self.batch_size.to_string());
        entries.insert("train.epochs", self.epochs.to_string());
        entries.insert("train.drop_last", self.drop_last.to_string());
        entries.insert("train.validate_every", self.validate_every.to_string());
        entries.insert("train.seed", self.seed.to_string());
        entries.insert("train.checkpoint", path(&self.checkpoint));
        entries.insert("train.history", path(&self.history));
        let mut s = String::new();
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
