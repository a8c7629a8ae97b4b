use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{lookup, AnyTensor, CheckpointFile, Table};
use super::{sgd_step, OptimState, TrainConfig};
use crate::autograd::Tape;
use crate::data::{self, augment, load_manifest, oversample_rare, Batch, ManifestOptions, SegmentationSample, Split};
use crate::error::{Error, Result};
use crate::labels::argmax_classes;
use crate::loss::{combined_loss, ClassWeightState};
use crate::metrics::ConfusionMatrix;
use crate::network::Model;
use crate::nn::{Forward, Mode, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
    pub val_iou: Option<Vec<Option<f64>>>,
}

/// Metric history as CSV: `epoch,train_loss,val_miou,iou_<class>...`.
pub fn history_csv(records: &[EpochRecord], class_names: &[String]) -> String {
    let mut s = String::from("epoch,train_loss,val_miou");
    for name in class_names {
        let _ = write!(s, ",iou_{name}");
    }
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in records {
        let _ = write!(s, "{},{},{}", r.epoch, r.train_loss, opt(r.val_miou));
        for k in 0..class_names.len() {
            let _ = write!(s, ",{}", opt(r.val_iou.as_ref().and_then(|v| v[k])));
        }
        s.push('\n');
    }
    s
}

/// Everything a checkpoint carries.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optim: OptimState<f32>,
    pub weights: ClassWeightState,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochRecord>,
}

fn scalar(v: f64) -> AnyTensor {
    AnyTensor::F64(Tensor::scalar(v))
}

fn vector(v: &[f64]) -> Result<AnyTensor> {
    Ok(AnyTensor::F64(Tensor::new(&[v.len()], v.to_vec())?))
}

fn missing(name: &str) -> Error {
    Error::Format(format!("checkpoint lacks tensor {name}"))
}

/// Copies a parameter table into `store`; the first tensor that is missing,
/// misshapen or unexpected is named in the error.
pub fn restore_params<T: Element>(store: &mut ParamStore<T>, table: &Table) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in &ids {
        let name = store.name(*id).to_string();
        let t = lookup(table, &name).ok_or_else(|| missing(&name))?;
        if t.shape() != store.value(*id).shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?} in the checkpoint but {:?} in the model",
                t.shape(),
                store.value(*id).shape()
            )));
        }
        store.set_value(*id, t.to_tensor(&name)?)?;
    }
    if let Some((extra, _)) = table.iter().find(|(n, _)| store.find(n).is_none()) {
        return Err(Error::Format(format!("tensor {extra} in the checkpoint has no counterpart in the model")));
    }
    Ok(())
}

impl TrainState {
    /// Fresh state; `config.network.num_classes` must already be resolved.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.network.validate()?;
        let model = Model::new(&config.network, config.seed)?;
        let optim = OptimState::new(config.optim, &model.store)?;
        let weights = ClassWeightState::uniform(config.network.num_classes, config.loss.alpha);
        Ok(Self { config, model, optim, weights, epoch: 0, step: 0, history: Vec::new() })
    }

    pub fn to_checkpoint(&self) -> Result<CheckpointFile> {
        let store = &self.model.store;
        let params = store.entries().iter().map(|e| (e.name.clone(), AnyTensor::from_tensor(&e.value))).collect();
        let mut optimizer: Table = vec![
            ("optim.lr".into(), scalar(self.optim.config.lr)),
            ("optim.momentum".into(), scalar(self.optim.config.momentum)),
            ("optim.weight_decay".into(), scalar(self.optim.config.weight_decay)),
        ];
        for (id, v) in &self.optim.velocity {
            optimizer.push((format!("velocity.{}", store.name(*id)), AnyTensor::from_tensor(v)));
        }
        let mut state: Table = vec![
            ("state.epoch".into(), scalar(self.epoch as f64)),
            ("state.step".into(), scalar(self.step as f64)),
            ("rng.stream".into(), scalar(epoch_stream(self.epoch) as f64)),
            ("class_weights.weights".into(), vector(&self.weights.weights)?),
            ("class_weights.alpha".into(), scalar(self.weights.alpha)),
        ];
        if let Some(iou) = &self.weights.source_iou {
            state.push(("class_weights.source_iou".into(), vector(iou)?));
        }
        if !self.history.is_empty() {
            let n = self.config.network.num_classes;
            let h = &self.history;
            state.push(("history.train_loss".into(), vector(&h.iter().map(|r| r.train_loss).collect::<Vec<_>>())?));
            state.push((
                "history.val_miou".into(),
                vector(&h.iter().map(|r| r.val_miou.unwrap_or(f64::NAN)).collect::<Vec<_>>())?,
            ));
            let iou: Vec<f64> = h
                .iter()
                .flat_map(|r| (0..n).map(move |k| r.val_iou.as_ref().and_then(|v| v[k]).unwrap_or(f64::NAN)))
                .collect();
            state.push(("history.val_iou".into(), AnyTensor::F64(Tensor::new(&[h.len(), n], iou)?)));
            let validated: Vec<f64> = h.iter().map(|r| if r.val_iou.is_some() { 1.0 } else { 0.0 }).collect();
            state.push(("history.validated".into(), vector(&validated)?));
        }
        Ok(CheckpointFile { config_text: self.config.to_canonical_text(), params, optimizer, state })
    }

    pub fn from_checkpoint(file: &CheckpointFile) -> Result<Self> {
        let config = TrainConfig::parse(&file.config_text, Path::new(""))?;
        let mut st = Self::new(config)?;
        restore_params(&mut st.model.store, &file.params)?;
        for (id, v) in st.optim.velocity.iter_mut() {
            let name = format!("velocity.{}", st.model.store.name(*id));
            let t = lookup(&file.optimizer, &name).ok_or_else(|| missing(&name))?;
            if t.shape() != v.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    v.shape()
                )));
            }
            *v = t.to_tensor(&name)?;
        }
        let get = |table: &Table, name: &str| {
            lookup(table, name).ok_or_else(|| missing(name)).and_then(|t| t.scalar_f64(name))
        };
        st.optim.config.lr = get(&file.optimizer, "optim.lr")?;
        st.optim.config.momentum = get(&file.optimizer, "optim.momentum")?;
        st.optim.config.weight_decay = get(&file.optimizer, "optim.weight_decay")?;
        st.epoch = get(&file.state, "state.epoch")? as usize;
        st.step = get(&file.state, "state.step")? as u64;
        let vec_of = |name: &str| -> Result<Option<Vec<f64>>> {
            lookup(&file.state, name).map(|t| t.to_tensor::<f64>(name).map(Tensor::into_vec)).transpose()
        };
        let n = st.config.network.num_classes;
        let weights = vec_of("class_weights.weights")?.ok_or_else(|| missing("class_weights.weights"))?;
        if weights.len() != n {
            return Err(Error::Format(format!("class_weights.weights has {} entries for {n} classes", weights.len())));
        }
        st.weights = ClassWeightState {
            weights,
            source_iou: vec_of("class_weights.source_iou")?,
            alpha: get(&file.state, "class_weights.alpha")?,
        };
        if let Some(losses) = vec_of("history.train_loss")? {
            let miou = vec_of("history.val_miou")?.ok_or_else(|| missing("history.val_miou"))?;
            let iou = vec_of("history.val_iou")?.ok_or_else(|| missing("history.val_iou"))?;
            let validated = vec_of("history.validated")?.ok_or_else(|| missing("history.validated"))?;
            let some = |v: f64| (!v.is_nan()).then_some(v);
            st.history = (0..losses.len())
                .map(|i| EpochRecord {
                    epoch: i + 1,
                    train_loss: losses[i],
                    val_miou: some(miou[i]),
                    val_iou: (validated[i] == 1.0).then(|| iou[i * n..(i + 1) * n].iter().map(|&v| some(v)).collect()),
                })
                .collect();
        }
        Ok(st)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&CheckpointFile::load(path)?)
    }
}

/// ChaCha stream used for shuffling and augmentation in a given epoch
/// (stream 0 belongs to initialization).
fn epoch_stream(epoch: usize) -> u64 {
    epoch as u64 + 1
}

/// Eval-mode confusion matrix over `samples`, batching consecutive samples
/// of equal extent. Samples the network cannot take at their native extent
/// are edge-padded one at a time and the prediction cropped back.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    samples: &[SegmentationSample],
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::new(model.config().num_classes);
    let mut start = 0;
    while start < samples.len() {
        let extent = samples[start].extent();
        if (model.admissible_extent(extent.0), model.admissible_extent(extent.1)) != extent {
            let pred = model.predict_image(&samples[start].image.cast(), true)?;
            conf.accumulate(&pred, &samples[start].mask)?;
            start += 1;
            continue;
        }
        let mut end = start + 1;
        while end < samples.len() && end - start < batch_size.max(1) && samples[end].extent() == extent {
            end += 1;
        }
        let batch = Batch::stack(&samples[start..end])?;
        let pred = argmax_classes(&model.predict_logits(&batch.images.cast())?)?;
        conf.accumulate(&pred, &batch.masks)?;
        start = end;
    }
    Ok(conf)
}

/// Training loop over in-memory samples.
pub struct Trainer {
    pub state: TrainState,
    pub class_names: Vec<String>,
    /// Training entries, oversampled duplicates included.
    train: Vec<Arc<SegmentationSample>>,
    /// Validation samples; the training originals when the split is empty.
    val: Vec<SegmentationSample>,
}

impl Trainer {
    /// Loads the dataset named by the config.
    pub fn from_config(mut config: TrainConfig) -> Result<Self> {
        let manifest = load_manifest(
            &config.data.root,
            &ManifestOptions {
                split_ratio: config.data.split_ratio,
                val_fraction: config.data.val_fraction,
                seed: config.data.split_seed,
                classes: None,
            },
        )?;
        config.resolve_classes(manifest.num_classes())?;
        let manifest = match config.augment.rare_class {
            Some(c) => oversample_rare(&manifest, c, config.augment.rare_factor)?,
            None => manifest,
        };
        let mut loaded: Vec<(String, Arc<SegmentationSample>)> = Vec::new();
        let mut train = Vec::new();
        for e in manifest.split(Split::Train) {
            let s = match loaded.iter().find(|(id, _)| *id == e.id) {
                Some((_, s)) => s.clone(),
                None => {
                    let s = Arc::new(data::load_sample(e)?);
                    loaded.push((e.id.clone(), s.clone()));
                    s
                }
            };
            train.push(s);
        }
        let val = manifest.split(Split::Val).map(data::load_sample).collect::<Result<Vec<_>>>()?;
        let class_names = manifest.class_names.clone();
        Self::with_state(TrainState::new(config)?, class_names, train, val)
    }

    /// Trainer over samples already in memory. Oversampling is applied
    /// here when the config names a rare class.
    pub fn from_samples(
        mut config: TrainConfig,
        class_names: Vec<String>,
        train: Vec<SegmentationSample>,
        val: Vec<SegmentationSample>,
    ) -> Result<Self> {
        config.resolve_classes(class_names.len())?;
        let mut expanded: Vec<Arc<SegmentationSample>> = train.into_iter().map(Arc::new).collect();
        if let Some(c) = config.augment.rare_class {
            let carriers: Vec<_> =
                expanded.iter().filter(|s| s.mask.data().iter().any(|&v| v as usize == c)).cloned().collect();
            for _ in 1..config.augment.rare_factor {
                expanded.extend(carriers.iter().cloned());
            }
        }
        Self::with_state(TrainState::new(config)?, class_names, expanded, val)
    }

    /// Continues from `state` (e.g. a loaded checkpoint) on the given data.
    pub fn with_state(
        state: TrainState,
        class_names: Vec<String>,
        train: Vec<Arc<SegmentationSample>>,
        val: Vec<SegmentationSample>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("the training split has no samples".into()));
        }
        if class_names.len() != state.config.network.num_classes {
            return Err(Error::Config(format!(
                "dataset lists {} classes but the model predicts {}",
                class_names.len(),
                state.config.network.num_classes
            )));
        }
        Ok(Self { state, class_names, train, val })
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    /// Training entries, oversampled duplicates included.
    pub fn train_samples(&self) -> &[Arc<SegmentationSample>] {
        &self.train
    }

    fn validation_samples(&self) -> Vec<SegmentationSample> {
        if self.val.is_empty() {
            let mut seen: Vec<*const SegmentationSample> = Vec::new();
            self.train
                .iter()
                .filter(|s| {
                    let p = Arc::as_ptr(s);
                    let fresh = !seen.contains(&p);
                    seen.push(p);
                    fresh
                })
                .map(|s| (**s).clone())
                .collect()
        } else {
            self.val.clone()
        }
    }

    /// One optimization step; returns the batch loss.
    pub fn step(&mut self, batch: &Batch, batch_index: usize) -> Result<f64> {
        let st = &mut self.state;
        let tape = Tape::new();
        let (loss_value, grads, updates) = {
            let fwd = Forward::new(&tape, &st.model.store, Mode::Train);
            let outs = st.model.net.forward_deep(&fwd, tape.constant(batch.images.clone()))?;
            let loss = combined_loss(&outs, &batch.masks, &st.weights, &st.config.loss)?;
            let value = loss.value().item()? as f64;
            if !value.is_finite() {
                let (param_norm, worst_tensor, worst_norm) = st.model.store.norm_report();
                return Err(Error::NonFiniteLoss {
                    epoch: st.epoch + 1,
                    batch: batch_index,
                    param_norm,
                    worst_tensor,
                    worst_norm,
                });
            }
            tape.backward(loss)?;
            (value, fwd.param_grads(), fwd.take_updates())
        };
        st.model.store.apply_updates(updates)?;
        sgd_step(&mut st.model.store, &grads, &mut st.optim)?;
        st.step += 1;
        Ok(loss_value)
    }

    /// Runs the next epoch, validating when due.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let cfg = self.state.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch_stream(self.state.epoch));
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);

        let mut losses = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.drop_last && chunk.len() < cfg.batch_size {
                continue;
            }
            if chunk.len() == 1 && cfg.batch_size > 1 {
                // batch statistics of the 1x1 pooling branch need two samples
                log::debug!("skipping a trailing single-sample batch");
                continue;
            }
            let samples =
                chunk.iter().map(|&i| augment(&self.train[i], &cfg.augment, &mut rng)).collect::<Result<Vec<_>>>()?;
            losses.push(self.step(&Batch::stack(&samples)?, bi)?);
        }
        if losses.is_empty() {
            return Err(Error::Config(format!(
                "no full batch of size {} fits {} training samples",
                cfg.batch_size,
                self.train.len()
            )));
        }
        self.state.epoch += 1;
        let mut record = EpochRecord {
            epoch: self.state.epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_miou: None,
            val_iou: None,
        };
        if self.state.epoch.is_multiple_of(cfg.validate_every) || self.state.epoch == cfg.epochs {
            let conf = evaluate(&self.state.model, &self.validation_samples(), cfg.batch_size)?;
            let iou = conf.iou_per_class();
            record.val_miou = conf.miou();
            if cfg.loss.adaptive_weights {
                self.state.weights = self.state.weights.refreshed(&iou)?;
            }
            record.val_iou = Some(iou);
        }
        log::info!(
            "epoch {}/{} loss {:.6} {}",
            record.epoch,
            cfg.epochs,
            record.train_loss,
            record.val_miou.map_or_else(String::new, |m| format!("val mIoU {m:.4}"))
        );
        self.state.history.push(record.clone());
        if record.val_iou.is_some() {
            self.persist()?;
        }
        Ok(record)
    }

    /// Writes the checkpoint and history files named by the config.
    pub fn persist(&self) -> Result<()> {
        if let Some(path) = &self.state.config.checkpoint {
            self.state.save(path)?;
        }
        if let Some(path) = &self.state.config.history {
            std::fs::write(path, history_csv(&self.state.history, &self.class_names))?;
        }
        Ok(())
    }

    /// Trains until the configured epoch count.
    pub fn run(&mut self) -> Result<&[EpochRecord]> {
        while self.state.epoch < self.state.config.epochs {
            self.run_epoch()?;
        }
        Ok(&self.state.history)
    }

    /// Confusion matrix of the current model on the training originals.
    pub fn evaluate_train(&self) -> Result<ConfusionMatrix> {
        let samples: Vec<SegmentationSample> = {
            let mut seen = Vec::new();
            self.train
                .iter()
                .filter(|s| {
                    let p = Arc::as_ptr(s);
                    let fresh = !seen.contains(&p);
                    seen.push(p);
                    fresh
                })
                .map(|s| (**s).clone())
                .collect()
        };
        evaluate(&self.state.model, &samples, self.state.config.batch_size)
    }
}
