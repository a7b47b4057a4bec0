//! Extractor training: segmentation, slot assignment, PIT or fixed-order
//! loss, Adam with gradient clipping, and a patience-based learning-rate
//! schedule with best-validation checkpointing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cst, Float};
use crate::error::{Error, Result};
use crate::mixsim::dataset::LoadedExample;
use crate::mixsim::derive_seed;
use crate::model::layers::Builder;
use crate::model::network::forward_graph;
use crate::model::{init_params, model_layout, Conditioning, ModelConfig, ParameterSet};
use crate::objectives::best_assignment;
use crate::signals::{MultiChannelWaveform, Waveform};
use crate::speakers::{EmbeddingCache, SpeakerEmbedding};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &[Array2<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn gradient_step<T: Float>(
    params: &mut [Array2<T>],
    grads: &[Array2<T>],
    lr: f64,
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || p.dim() != state.m[i].dim() {
            return Err(Error::Shape(format!(
                "tensor {i}: parameter {:?}, gradient {:?}",
                p.dim(),
                g.dim()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1: T = cst(ADAM_BETA1);
    let b2: T = cst(ADAM_BETA2);
    let one = T::one();
    let bc1: T = cst(1.0 - ADAM_BETA1.powi(t));
    let bc2: T = cst(1.0 - ADAM_BETA2.powi(t));
    let lr: T = cst(lr);
    let eps: T = cst(ADAM_EPS);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients<T: Float>(grads: &mut [Array2<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s: T = cst(max_norm / norm);
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Pit,
    FixedOrder,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Pit => "pit",
            LossMode::FixedOrder => "fixed_order",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub segment_s: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_halving_factor: f64,
    pub loss_mode: LossMode,
    pub clip_norm: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            segment_s: 1.0,
            max_epochs: 60,
            patience: 3,
            lr_halving_factor: 0.5,
            loss_mode: LossMode::Pit,
            clip_norm: 5.0,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.patience == 0 || self.batch_size == 0 {
            return Err(Error::config("patience and batch size must be at least 1"));
        }
        if !(self.lr_halving_factor > 0.0 && self.lr_halving_factor <= 1.0) {
            return Err(Error::config("halving factor must lie in (0, 1]"));
        }
        if !(self.segment_s > 0.0) {
            return Err(Error::config("segment length must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation fraction must lie in [0, 1)"));
        }
        if self.loss_mode == LossMode::FixedOrder && model.conditioning == Conditioning::None {
            return Err(Error::config(
                "fixed-order loss needs a conditioned model; use pit for conditioning = none",
            ));
        }
        Ok(())
    }
}

/// JSON has no infinities; they are stored as strings.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v)
        } else {
            Repr::Text(v.to_string())
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub current_lr: f64,
    #[serde(with = "extended_float")]
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub halvings: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(lr: f64) -> Self {
        Self {
            epoch: 0,
            current_lr: lr,
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            halvings: 0,
            history: Vec::new(),
        }
    }

    /// Applies the patience rule to one validation loss. Returns whether
    /// it improved on the best so far.
    pub fn record_validation(&mut self, val_loss: f64, patience: usize, factor: f64) -> bool {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
            return true;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= patience {
            self.current_lr *= factor;
            self.halvings += 1;
            self.epochs_since_improvement = 0;
        }
        false
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.history {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
        s
    }
}

/// Sample offsets of the non-overlapping segments of an utterance; the
/// final partial segment is dropped.
pub fn segment_bounds(len: usize, segment: usize) -> Result<Vec<usize>> {
    if segment == 0 {
        return Err(Error::invalid("segment length must be positive"));
    }
    if segment > len {
        return Err(Error::invalid(format!(
            "segment of {segment} samples is longer than the {len}-sample utterance"
        )));
    }
    Ok((0..len / segment).map(|i| i * segment).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRef {
    pub example: usize,
    pub start: usize,
    pub len: usize,
    pub speaker_ids: Vec<u32>,
}

pub fn segment_dataset(examples: &[LoadedExample], segment_s: f64) -> Result<Vec<SegmentRef>> {
    let mut out = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let seg = (segment_s * ex.mixture.sample_rate() as f64).round() as usize;
        for start in segment_bounds(ex.mixture.len(), seg)? {
            out.push(SegmentRef {
                example: i,
                start,
                len: seg,
                speaker_ids: ex.row.speaker_ids.clone(),
            });
        }
    }
    Ok(out)
}

/// A training item with targets already in slot order.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub mixture: MultiChannelWaveform,
    pub targets: Vec<Waveform>,
    pub embeddings: Option<Vec<SpeakerEmbedding>>,
}

/// Slot order for an example: source indices sorted by speaker id.
pub fn slot_order(speaker_ids: &[u32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..speaker_ids.len()).collect();
    idx.sort_by_key(|&i| speaker_ids[i]);
    idx
}

fn make_item(
    ex: &LoadedExample,
    start: usize,
    len: usize,
    cfg: &ModelConfig,
    cache: Option<&EmbeddingCache>,
) -> Result<TrainItem> {
    let order = slot_order(&ex.row.speaker_ids);
    let targets = order
        .iter()
        .map(|&i| ex.clean_sources[i].slice(start, len))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = if cfg.conditioning.is_conditioned() {
        let cache = cache.ok_or_else(|| {
            Error::config(format!("{} conditioning needs speaker embeddings", cfg.conditioning))
        })?;
        let ids: Vec<u32> = order.iter().map(|&i| ex.row.speaker_ids[i]).collect();
        Some(cache.lookup(&ids)?)
    } else {
        None
    };
    Ok(TrainItem {
        mixture: ex.mixture.slice(start, len)?,
        targets,
        embeddings,
    })
}

/// Items for every segment whose targets all carry energy; a silent
/// target has no defined SI-SNR.
pub fn prepare_items(
    examples: &[LoadedExample],
    segment_s: f64,
    cfg: &ModelConfig,
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for seg in segment_dataset(examples, segment_s)? {
        let item = make_item(&examples[seg.example], seg.start, seg.len, cfg, cache)?;
        if item.targets.iter().all(|t| t.power() > 0.0) {
            items.push(item);
        }
    }
    Ok(items)
}

/// Loss of one item and, optionally, its parameter gradients.
pub fn item_loss<T: Float>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    item: &TrainItem,
    mode: LossMode,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Array2<T>>>)> {
    let mut b = Builder::new(params);
    let nodes = forward_graph(&mut b, cfg, &item.mixture, item.embeddings.as_deref(), false)?;
    let k = nodes.outputs.len();
    if item.targets.len() != k {
        return Err(Error::Shape(format!(
            "{k} outputs but {} targets",
            item.targets.len()
        )));
    }
    let w: T = cst(-1.0 / k as f64);
    let terms = match mode {
        LossMode::FixedOrder => nodes
            .outputs
            .iter()
            .zip(&item.targets)
            .map(|(&o, t)| Ok((b.graph.si_snr(o, t.samples())?, w)))
            .collect::<Result<Vec<_>>>()?,
        LossMode::Pit => {
            let mut pairs = Vec::with_capacity(k);
            for &o in &nodes.outputs {
                let row = item
                    .targets
                    .iter()
                    .map(|t| b.graph.si_snr(o, t.samples()))
                    .collect::<Result<Vec<_>>>()?;
                pairs.push(row);
            }
            let matrix = pairs
                .iter()
                .map(|r| r.iter().map(|&v| b.graph.scalar(v).to_f64_lossy()).collect())
                .collect();
            let a = best_assignment(matrix)?;
            // sum in reference order, matching the objective's convention
            let mut inverse = vec![0; k];
            for (slot, &j) in a.mapping.iter().enumerate() {
                inverse[j] = slot;
            }
            inverse
                .iter()
                .enumerate()
                .map(|(j, &slot)| (pairs[slot][j], w))
                .collect()
        }
    };
    let loss = b.graph.weighted_sum(&terms);
    let value = b.graph.scalar(loss).to_f64_lossy();
    let grads = with_grad.then(|| b.graph.backward(loss).into_param_grads(params.tensors()));
    Ok((value, grads))
}

fn mean_loss(params: &ParameterSet<f32>, cfg: &ModelConfig, items: &[TrainItem], mode: LossMode) -> Result<f64> {
    if items.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for it in items {
        total += item_loss(params, cfg, it, mode, false)?.0;
    }
    Ok(total / items.len() as f64)
}

/// Indices of the training mixtures held out for validation.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = if fraction > 0.0 && n > 1 {
        ((n as f64 * fraction).ceil() as usize).min(n - 1)
    } else {
        0
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7A1, 0)));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParameterSet<f32>,
    pub best_params: ParameterSet<f32>,
    pub adam: AdamState<f32>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn fresh(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        train.validate(model)?;
        let params = init_params::<f32>(model, derive_seed(train.seed, 0x1417, 0))?;
        Ok(Self {
            model: model.clone(),
            train: train.clone(),
            best_params: params.clone(),
            adam: AdamState::new(params.tensors()),
            params,
            state: TrainState::new(train.lr),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut named = Vec::new();
        for (prefix, set) in [("param/", &self.params), ("best/", &self.best_params)] {
            for (n, t) in set.names().iter().zip(set.tensors()) {
                named.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        for (prefix, ts) in [("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            for (n, t) in self.params.names().iter().zip(ts) {
                named.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        let meta = serde_json::json!({
            "kind": "training-checkpoint",
            "config": self.model,
            "train": self.train,
            "adam_step": self.adam.step,
            "state": self.state,
        });
        ParameterSet::from_named(named)?.save(path, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (set, meta) = ParameterSet::<f32>::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("training-checkpoint") {
            return Err(Error::Checkpoint("not a training checkpoint".into()));
        }
        let model: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        let train: TrainConfig = serde_json::from_value(meta["train"].clone())?;
        let state: TrainState = serde_json::from_value(meta["state"].clone())?;
        let step = meta["adam_step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?;
        let layout = model_layout(&model);
        let take = |prefix: &str| -> Result<Vec<(String, Array2<f32>)>> {
            layout
                .iter()
                .map(|s| {
                    let t = set.get(&format!("{prefix}{}", s.name)).ok_or_else(|| {
                        Error::Checkpoint(format!("missing tensor {prefix}{}", s.name))
                    })?;
                    Ok((s.name.clone(), t.clone()))
                })
                .collect()
        };
        let params = ParameterSet::from_named(take("param/")?)?;
        let best_params = ParameterSet::from_named(take("best/")?)?;
        params.check_layout(&layout)?;
        best_params.check_layout(&layout)?;
        let strip = |v: Vec<(String, Array2<f32>)>| v.into_iter().map(|(_, t)| t).collect();
        let adam = AdamState {
            step,
            m: strip(take("adam.m/")?),
            v: strip(take("adam.v/")?),
        };
        Ok(Self {
            model,
            train,
            params,
            best_params,
            adam,
            state,
        })
    }
}

/// Where a run writes its artifacts. All fields optional.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    /// Resumable checkpoint, rewritten after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Best-validation extractor parameters.
    pub best: Option<PathBuf>,
    pub log_csv: Option<PathBuf>,
    /// Written when training diverges.
    pub dump_dir: Option<PathBuf>,
}

fn dump_divergence(dir: &Path, ck: &Checkpoint, batch: usize, loss: f64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("divergence.json");
    let v = serde_json::json!({
        "epoch": ck.state.epoch + 1,
        "batch": batch,
        "loss": loss.to_string(),
        "state": ck.state,
        "adam_step": ck.adam.step,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&v)?)?;
    ck.save(dir.join("divergence.ckpt"))?;
    Ok(path)
}

/// Trains until `max_epochs` completed epochs, continuing from `ck`.
pub fn train_from(
    mut ck: Checkpoint,
    examples: &[LoadedExample],
    cache: Option<&EmbeddingCache>,
    out: &RunOutputs,
) -> Result<Checkpoint> {
    let cfg = ck.model.clone();
    let tc = ck.train.clone();
    tc.validate(&cfg)?;
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let (train_idx, val_idx) = validation_split(examples.len(), tc.validation_fraction, tc.seed);
    let pick = |idx: &[usize]| -> Vec<LoadedExample> { idx.iter().map(|&i| examples[i].clone()).collect() };
    let train_items = prepare_items(&pick(&train_idx), tc.segment_s, &cfg, cache)?;
    let val_items = prepare_items(&pick(&val_idx), tc.segment_s, &cfg, cache)?;
    if train_items.is_empty() {
        return Err(Error::invalid("no usable training segments"));
    }

    while ck.state.epoch < tc.max_epochs {
        let epoch = ck.state.epoch + 1;
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 0xE0C, epoch as u64)));
        let mut total = 0.0;
        for (bi, batch) in order.chunks(tc.batch_size).enumerate() {
            let mut acc: Option<Vec<Array2<f32>>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, grads) = item_loss(&ck.params, &cfg, &train_items[i], tc.loss_mode, true)?;
                batch_loss += loss;
                let grads = grads.expect("requested");
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| *a += g),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| *g *= scale);
            let norm = clip_gradients(&mut grads, tc.clip_norm);
            if !batch_loss.is_finite() || !norm.is_finite() {
                let detail = match &out.dump_dir {
                    Some(d) => format!(", state dumped to {}", dump_divergence(d, &ck, bi, batch_loss)?.display()),
                    None => String::new(),
                };
                return Err(Error::Diverged(format!(
                    "epoch {epoch} batch {bi}: loss {batch_loss}, gradient norm {norm}{detail}"
                )));
            }
            total += batch_loss;
            let lr = ck.state.current_lr;
            gradient_step(ck.params.tensors_mut(), &grads, lr, &mut ck.adam)?;
        }
        let train_loss = total / train_items.len() as f64;
        let val_loss = if val_items.is_empty() {
            train_loss
        } else {
            mean_loss(&ck.params, &cfg, &val_items, tc.loss_mode)?
        };
        let lr_used = ck.state.current_lr;
        if ck.state.record_validation(val_loss, tc.patience, tc.lr_halving_factor) {
            ck.best_params = ck.params.clone();
            if let Some(p) = &out.best {
                crate::model::save_params(p, &ck.best_params, &cfg)?;
            }
        }
        ck.state.epoch = epoch;
        ck.state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: lr_used,
        });
        log::info!(
            "epoch {epoch}: train {train_loss:.3} val {val_loss:.3} lr {lr_used:.2e}"
        );
        if let Some(p) = &out.checkpoint {
            ck.save(p)?;
        }
        if let Some(p) = &out.log_csv {
            std::fs::write(p, ck.state.log_csv())?;
        }
    }
    if let Some(p) = &out.best {
        if !p.exists() {
            crate::model::save_params(p, &ck.best_params, &cfg)?;
        }
    }
    Ok(ck)
}

/// Fresh run: initialize from the seed and train.
pub fn train(
    model: &ModelConfig,
    tc: &TrainConfig,
    examples: &[LoadedExample],
    cache: Option<&EmbeddingCache>,
    out: &RunOutputs,
) -> Result<Checkpoint> {
    train_from(Checkpoint::fresh(model, tc)?, examples, cache, out)
}
