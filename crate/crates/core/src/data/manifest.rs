use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{read_class_names, read_mask};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
    /// Pixel count per class; ignored pixels are not counted.
    pub histogram: Vec<u64>,
    pub extent: (usize, usize),
    /// 0 for the original entry, k for its k-th oversampled duplicate.
    pub replica: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestOptions {
    /// Share of pairs assigned to train+val; the rest is test.
    pub split_ratio: f64,
    /// Share of the train portion carved out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    /// Class names; read from `classes.txt` when `None`.
    pub classes: Option<Vec<String>>,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self { split_ratio: 0.8, val_fraction: 0.1, seed: 0, classes: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let listing = std::fs::read_dir(dir).map_err(|e| Error::Manifest(format!("cannot list {}: {e}", dir.display())))?;
    for item in listing {
        let path = item?.path();
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) != Some(true) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Pairs images with masks and assigns a deterministic split.
pub fn load_manifest(root: &Path, opts: &ManifestOptions) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&opts.split_ratio) || !(0.0..1.0).contains(&opts.val_fraction) {
        return Err(Error::Config(format!(
            "split_ratio must lie in [0,1] and val_fraction in [0,1), got {} and {}",
            opts.split_ratio, opts.val_fraction
        )));
    }
    let class_names = match &opts.classes {
        Some(c) => c.clone(),
        None => read_class_names(&root.join("classes.txt"))?,
    };
    let images = stems(&root.join("images"))?;
    let masks = stems(&root.join("masks"))?;
    let orphans: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .map(|k| format!("images/{k}.png (no mask)"))
        .chain(masks.keys().filter(|k| !images.contains_key(*k)).map(|k| format!("masks/{k}.png (no image)")))
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Manifest(format!("unpaired files: {}", orphans.join(", "))));
    }

    let n = class_names.len();
    let mut entries = Vec::with_capacity(images.len());
    for (id, image_path) in images {
        let mask_path = masks[&id].clone();
        let mask = read_mask(&mask_path)?;
        mask.check_classes(n).map_err(|e| Error::Data(format!("{}: {e}", mask_path.display())))?;
        let [_, h, w] = mask.shape();
        entries.push(ManifestEntry {
            id,
            image_path,
            mask_path,
            split: Split::Test,
            histogram: mask.histogram(n),
            extent: (h, w),
            replica: 0,
        });
    }

    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_train = (opts.split_ratio * entries.len() as f64).round() as usize;
    let n_val = (opts.val_fraction * n_train as f64).round() as usize;
    for (rank, &i) in order.iter().enumerate() {
        entries[i].split = if rank < n_val {
            Split::Val
        } else if rank < n_train {
            Split::Train
        } else {
            Split::Test
        };
    }
    if n_train == entries.len() {
        log::warn!("split ratio {} leaves the test split empty", opts.split_ratio);
    }
    Ok(DatasetManifest { root: root.to_path_buf(), class_names, entries, seed: opts.seed })
}

/// Adds `factor - 1` duplicates of every training entry whose mask
/// contains `class_id`.
pub fn oversample_rare(manifest: &DatasetManifest, class_id: usize, factor: usize) -> Result<DatasetManifest> {
    if factor == 0 {
        return Err(Error::Config("oversampling factor must be >= 1".into()));
    }
    if class_id >= manifest.num_classes() {
        return Err(Error::Config(format!("rare class {class_id} outside 0..{}", manifest.num_classes())));
    }
    let mut out = manifest.clone();
    let carriers: Vec<ManifestEntry> =
        manifest.split(Split::Train).filter(|e| e.replica == 0 && e.histogram[class_id] > 0).cloned().collect();
    if carriers.is_empty() {
        log::warn!("class {class_id} appears in no training mask; nothing oversampled");
        return Ok(out);
    }
    for k in 1..factor {
        out.entries.extend(carriers.iter().map(|e| ManifestEntry { replica: k, ..e.clone() }));
    }
    Ok(out)
}

/// Pixel share per class over one split (ignored pixels excluded).
pub fn class_frequency(manifest: &DatasetManifest, split: Option<Split>) -> Vec<f64> {
    let mut counts = vec![0u64; manifest.num_classes()];
    for e in manifest.entries.iter().filter(|e| split.is_none_or(|s| e.split == s)) {
        for (c, h) in counts.iter_mut().zip(&e.histogram) {
            *c += h;
        }
    }
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
}
