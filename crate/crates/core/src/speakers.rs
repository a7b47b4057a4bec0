//! Speaker embeddings: a small convolutional encoder trained by speaker
//! classification, utterance-level averaging of segment vectors, and
//! enrollment averaging over several utterances.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cst, Float, Graph, Var};
use crate::error::{Error, Result};
use crate::mixsim::derive_seed;
use crate::model::params::{ParamSpec, ParameterSet};
use crate::signals::Waveform;
use crate::training::{clip_gradients, gradient_step, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    vector: Vec<f64>,
    speaker_id: Option<u32>,
    n_utterances_averaged: usize,
}

impl SpeakerEmbedding {
    pub fn new(vector: Vec<f64>, speaker_id: Option<u32>, n_utterances_averaged: usize) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::invalid("embedding must have at least one entry"));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        if n_utterances_averaged == 0 {
            return Err(Error::invalid("an embedding averages at least one utterance"));
        }
        Ok(Self {
            vector,
            speaker_id,
            n_utterances_averaged,
        })
    }

    /// One-hot of `speaker_id` in `dim` entries; bypasses the encoder.
    pub fn oracle(speaker_id: u32, dim: usize) -> Result<Self> {
        if speaker_id as usize >= dim {
            return Err(Error::invalid(format!(
                "oracle embedding of speaker {speaker_id} needs dimension > {speaker_id}, have {dim}"
            )));
        }
        let mut v = vec![0.0; dim];
        v[speaker_id as usize] = 1.0;
        Self::new(v, Some(speaker_id), 1)
    }

    /// All-zero vector, used to probe the speaker stack.
    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], None, 1)
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn speaker_id(&self) -> Option<u32> {
        self.speaker_id
    }

    pub fn n_utterances_averaged(&self) -> usize {
        self.n_utterances_averaged
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        dot / (self.norm() * other.norm()).max(f64::MIN_POSITIVE)
    }
}

fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EnrollmentSet {
    speaker_id: u32,
    utterances: Vec<Waveform>,
}

impl EnrollmentSet {
    pub fn new(speaker_id: u32, utterances: Vec<Waveform>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::invalid(format!(
                "enrollment of speaker {speaker_id} has no utterances"
            )));
        }
        Ok(Self {
            speaker_id,
            utterances,
        })
    }

    pub fn speaker_id(&self) -> u32 {
        self.speaker_id
    }

    pub fn utterances(&self) -> &[Waveform] {
        &self.utterances
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Samples per segment (200 ms at 8 kHz).
    pub segment: usize,
    /// Segment hop: 200 ms windows overlapping by 10 ms.
    pub segment_hop: usize,
    pub filters: usize,
    pub filter_len: usize,
    pub filter_hop: usize,
    pub hidden: usize,
    pub context: usize,
    pub embedding_dim: usize,
    /// Number of training speakers the classifier head covers.
    pub classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            segment: 1600,
            segment_hop: 1520,
            filters: 64,
            filter_len: 128,
            filter_hop: 32,
            hidden: 64,
            context: 3,
            embedding_dim: 32,
            classes: 24,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment == 0 || self.segment_hop == 0 || self.filter_hop == 0 {
            return Err(Error::config("segment, hops must be positive"));
        }
        if [self.filters, self.hidden, self.context, self.embedding_dim, self.classes]
            .contains(&0)
        {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.filter_len > self.segment {
            return Err(Error::config("filter longer than a segment"));
        }
        let frames = (self.segment - self.filter_len) / self.filter_hop + 1;
        if frames < 2 * (self.context - 1) + 1 {
            return Err(Error::config("segment too short for the encoder's context"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::conv("conv1.w", self.filters, self.filter_len),
            ParamSpec::constant("conv1.b", self.filters, 1, 0.0),
            ParamSpec::conv("conv2.w", self.hidden, self.filters * self.context),
            ParamSpec::constant("conv2.b", self.hidden, 1, 0.0),
            ParamSpec::conv("conv3.w", self.embedding_dim, self.hidden * self.context),
            ParamSpec::constant("conv3.b", self.embedding_dim, 1, 0.0),
            ParamSpec::conv("cls.w", self.classes, self.embedding_dim),
            ParamSpec::constant("cls.b", self.classes, 1, 0.0),
        ]
    }

    /// Start offsets of the segments an utterance of `len` samples is cut into.
    pub fn segment_starts(&self, len: usize) -> Vec<usize> {
        if len < self.segment {
            return Vec::new();
        }
        (0..=(len - self.segment) / self.segment_hop)
            .map(|i| i * self.segment_hop)
            .collect()
    }

    /// Segment starts whose energy is at least a fixed fraction of the
    /// utterance's mean segment energy. Pauses between syllables carry no
    /// identity, so they are skipped; an utterance with no segments at all
    /// still yields the plain segmentation.
    pub fn active_segment_starts(&self, samples: &[f64]) -> Vec<usize> {
        let starts = self.segment_starts(samples.len());
        let energy: Vec<f64> = starts
            .iter()
            .map(|&s| samples[s..s + self.segment].iter().map(|v| v * v).sum())
            .collect();
        let mean = energy.iter().sum::<f64>() / energy.len().max(1) as f64;
        let active: Vec<usize> = starts
            .iter()
            .zip(&energy)
            .filter(|(_, &e)| e > 0.0 && e >= ACTIVE_SEGMENT_FRACTION * mean)
            .map(|(&s, _)| s)
            .collect();
        if active.is_empty() {
            starts
        } else {
            active
        }
    }
}

const ACTIVE_SEGMENT_FRACTION: f64 = 0.25;

/// Trained encoder parameters plus the class index of each training speaker.
#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    pub config: EncoderConfig,
    pub params: ParameterSet<f32>,
    /// `classes[i]` is the speaker id of classifier output `i`.
    pub classes: Vec<u32>,
}

impl SpeakerEncoder {
    pub fn init(config: EncoderConfig, classes: Vec<u32>, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes.len() != config.classes {
            return Err(Error::config(format!(
                "{} class ids for {} classifier outputs",
                classes.len(),
                config.classes
            )));
        }
        let params = ParameterSet::init(&config.layout(), seed);
        Ok(Self {
            config,
            params,
            classes,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "speaker-encoder",
            "config": self.config,
            "classes": self.classes,
        });
        self.params.save(path, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (params, meta) = ParameterSet::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("speaker-encoder") {
            return Err(Error::Checkpoint("not a speaker-encoder checkpoint".into()));
        }
        let config: EncoderConfig = serde_json::from_value(meta["config"].clone())?;
        let classes: Vec<u32> = serde_json::from_value(meta["classes"].clone())?;
        params.check_layout(&config.layout())?;
        Ok(Self {
            config,
            params,
            classes,
        })
    }

    /// Frame-level vector of one segment (before normalization).
    pub fn segment_vector(&self, segment: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(self.params.tensors());
        let x = g.input(segment_input(segment, self.config.segment)?);
        let e = encoder_graph(&mut g, &self.params, &self.config, x);
        Ok(g.value(e).iter().map(|v| v.to_f64_lossy()).collect())
    }

    /// Segments the utterance, averages segment vectors, L2-normalizes.
    pub fn embed_utterance(&self, utt: &Waveform) -> Result<SpeakerEmbedding> {
        let starts = self.config.active_segment_starts(utt.samples());
        if starts.is_empty() {
            return Err(Error::invalid(format!(
                "utterance of {} samples is shorter than one {}-sample segment",
                utt.len(),
                self.config.segment
            )));
        }
        let mut acc = vec![0.0; self.config.embedding_dim];
        for &s in &starts {
            let v = self.segment_vector(&utt.samples()[s..s + self.config.segment])?;
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        }
        acc.iter_mut().for_each(|a| *a /= starts.len() as f64);
        l2_normalize(&mut acc)?;
        SpeakerEmbedding::new(acc, None, 1)
    }

    /// Mean of the normalized embeddings of `n_select` randomly chosen
    /// utterances (all of them for `None`), renormalized.
    pub fn global_embedding(
        &self,
        enroll: &EnrollmentSet,
        n_select: Option<usize>,
        seed: u64,
    ) -> Result<SpeakerEmbedding> {
        let utts = select_utterances(enroll, n_select, seed)?;
        let embs = utts
            .iter()
            .map(|u| self.embed_utterance(u))
            .collect::<Result<Vec<_>>>()?;
        average_embeddings(&embs, Some(enroll.speaker_id))
    }

    /// Index of the most likely training speaker for a segment.
    pub fn classify_segment(&self, segment: &[f64]) -> Result<usize> {
        let mut g = Graph::new(self.params.tensors());
        let x = g.input(segment_input(segment, self.config.segment)?);
        let e = encoder_graph(&mut g, &self.params, &self.config, x);
        let logits = classifier_graph(&mut g, &self.params, e);
        let v = g.value(logits);
        let mut best = 0;
        for i in 1..v.nrows() {
            if v[[i, 0]] > v[[best, 0]] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Utterances picked for enrollment averaging: a seeded sample without
/// replacement of `min(n, |utterances|)`, kept in enrollment order.
pub fn select_utterances(
    enroll: &EnrollmentSet,
    n_select: Option<usize>,
    seed: u64,
) -> Result<Vec<&Waveform>> {
    let total = enroll.utterances.len();
    let n = match n_select {
        None => total,
        Some(0) => return Err(Error::invalid("n_select must be at least 1")),
        Some(n) => n.min(total),
    };
    let mut idx: Vec<usize> = (0..total).collect();
    if n < total {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, enroll.speaker_id as u64, 0xE4));
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.sort_unstable();
    }
    Ok(idx.into_iter().map(|i| &enroll.utterances[i]).collect())
}

/// Normalizes each embedding, averages, and renormalizes.
pub fn average_embeddings(embs: &[SpeakerEmbedding], speaker_id: Option<u32>) -> Result<SpeakerEmbedding> {
    let first = embs
        .first()
        .ok_or_else(|| Error::invalid("nothing to average"))?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    let mut count = 0;
    for e in embs {
        if e.dim() != dim {
            return Err(Error::Shape("embeddings differ in dimension".into()));
        }
        let mut v = e.vector.clone();
        l2_normalize(&mut v)?;
        acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        count += e.n_utterances_averaged;
    }
    acc.iter_mut().for_each(|a| *a /= embs.len() as f64);
    l2_normalize(&mut acc)?;
    SpeakerEmbedding::new(acc, speaker_id, count)
}

// Per-segment RMS normalization keeps the encoder level-independent;
// silent segments are left near zero.
const SEGMENT_RMS_FLOOR: f64 = 1e-3;

fn segment_input<T: Float>(segment: &[f64], expected: usize) -> Result<Array2<T>> {
    if segment.len() != expected {
        return Err(Error::Shape(format!(
            "segment has {} samples, encoder expects {expected}",
            segment.len()
        )));
    }
    let rms = (segment.iter().map(|v| v * v).sum::<f64>() / segment.len() as f64).sqrt();
    let g = 1.0 / rms.max(SEGMENT_RMS_FLOOR);
    Ok(Array2::from_shape_fn((1, segment.len()), |(_, i)| cst(segment[i] * g)))
}

fn param<T: Float>(g: &mut Graph<'_, T>, params: &ParameterSet<T>, name: &str) -> Var {
    g.param(params.index_of(name).unwrap_or_else(|| panic!("parameter {name} missing")))
}

fn conv<T: Float>(
    g: &mut Graph<'_, T>,
    params: &ParameterSet<T>,
    prefix: &str,
    x: Var,
    kernel: usize,
    stride: usize,
) -> Var {
    let frames = g.frame(x, kernel, stride);
    let w = param(g, params, &format!("{prefix}.w"));
    let b = param(g, params, &format!("{prefix}.b"));
    let y = g.matmul(w, frames);
    g.add_col(y, b)
}

/// Filterbank conv, ReLU, log compression, two context convs, mean pool.
fn encoder_graph<T: Float>(g: &mut Graph<'_, T>, params: &ParameterSet<T>, cfg: &EncoderConfig, x: Var) -> Var {
    let h = conv(g, params, "conv1", x, cfg.filter_len, cfg.filter_hop);
    let h = g.relu(h);
    let h = g.log1p(h);
    let h = conv(g, params, "conv2", h, cfg.context, 1);
    let h = g.relu(h);
    let h = conv(g, params, "conv3", h, cfg.context, 1);
    g.mean_cols(h)
}

fn classifier_graph<T: Float>(g: &mut Graph<'_, T>, params: &ParameterSet<T>, emb: Var) -> Var {
    let w = param(g, params, "cls.w");
    let b = param(g, params, "cls.b");
    let y = g.matmul(w, emb);
    g.add(y, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of each speaker's utterances held out for accuracy.
    pub held_out_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 2e-3,
            batch_size: 16,
            held_out_fraction: 0.2,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainReport {
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    pub held_out_accuracy: f64,
    pub held_out_segments: usize,
}

struct SegmentRef {
    speaker: usize,
    utterance: usize,
    start: usize,
}

/// Trains an encoder to classify the speakers in `corpus` (speaker id and
/// utterances). The last `held_out_fraction` of each speaker's utterances
/// (at least one) are held out and scored at segment level.
pub fn train_speaker_encoder(
    corpus: &[(u32, Vec<Waveform>)],
    config: EncoderConfig,
    hp: &EncoderTrainConfig,
) -> Result<(SpeakerEncoder, EncoderTrainReport)> {
    if corpus.len() < 2 {
        return Err(Error::invalid("speaker encoder needs at least two speakers"));
    }
    if let Some((id, _)) = corpus.iter().find(|(_, u)| u.len() < 2) {
        return Err(Error::invalid(format!(
            "speaker {id} has fewer than two utterances"
        )));
    }
    if hp.batch_size == 0 || !(hp.lr > 0.0) {
        return Err(Error::config("batch size and learning rate must be positive"));
    }
    let config = EncoderConfig {
        classes: corpus.len(),
        ..config
    };
    let classes: Vec<u32> = corpus.iter().map(|(id, _)| *id).collect();
    let mut enc = SpeakerEncoder::init(config, classes, derive_seed(hp.seed, 0xE1, 0))?;
    let cfg = enc.config.clone();

    let utts: Vec<Vec<&Waveform>> = corpus.iter().map(|(_, u)| u.iter().collect()).collect();
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (s, u) in utts.iter().enumerate() {
        let n_held = ((u.len() as f64 * hp.held_out_fraction).round() as usize).clamp(1, u.len() - 1);
        for (j, w) in u.iter().enumerate() {
            let dest = if j >= u.len() - n_held { &mut held } else { &mut train };
            for start in cfg.active_segment_starts(w.samples()) {
                dest.push(SegmentRef {
                    speaker: s,
                    utterance: j,
                    start,
                });
            }
        }
    }
    if train.is_empty() || held.is_empty() {
        return Err(Error::invalid("utterances are shorter than one segment"));
    }
    let segment = |r: &SegmentRef| &utts[r.speaker][r.utterance].samples()[r.start..r.start + cfg.segment];

    let mut adam = AdamState::new(enc.params.tensors());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, 0xE2, 0));
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let mut acc: Option<Vec<Array2<f32>>> = None;
            for &i in batch {
                let r = &train[i];
                let mut g = Graph::new(enc.params.tensors());
                let x = g.input(segment_input::<f32>(segment(r), cfg.segment)?);
                let e = encoder_graph(&mut g, &enc.params, &cfg, x);
                let logits = classifier_graph(&mut g, &enc.params, e);
                let loss = g.softmax_xent(logits, r.speaker);
                let lv = g.scalar(loss) as f64;
                if !lv.is_finite() {
                    return Err(Error::Diverged("speaker encoder loss is not finite".into()));
                }
                total += lv;
                let grads = g.backward(loss).into_param_grads(enc.params.tensors());
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| *a += g),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| *g *= scale);
            clip_gradients(&mut grads, hp.clip_norm);
            gradient_step(enc.params.tensors_mut(), &grads, hp.lr, &mut adam)?;
        }
        epoch_losses.push(total / train.len() as f64);
    }

    let correct = held
        .iter()
        .map(|r| enc.classify_segment(segment(r)).map(|c| (c == r.speaker) as usize))
        .sum::<Result<usize>>()?;
    let report = EncoderTrainReport {
        epoch_losses,
        held_out_accuracy: correct as f64 / held.len() as f64,
        held_out_segments: held.len(),
    };
    Ok((enc, report))
}

/// Mean cosine similarity of same-speaker and cross-speaker pairs of
/// utterance embeddings.
pub fn cosine_margin(by_speaker: &[(u32, Vec<SpeakerEmbedding>)]) -> (f64, f64) {
    let mut same = (0.0, 0usize);
    let mut cross = (0.0, 0usize);
    for (i, (_, a)) in by_speaker.iter().enumerate() {
        for (j, (_, b)) in by_speaker.iter().enumerate().skip(i) {
            for (x, ea) in a.iter().enumerate() {
                for (y, eb) in b.iter().enumerate() {
                    if i == j && y <= x {
                        continue;
                    }
                    let c = ea.cosine(eb);
                    let slot = if i == j { &mut same } else { &mut cross };
                    slot.0 += c;
                    slot.1 += 1;
                }
            }
        }
    }
    (same.0 / same.1.max(1) as f64, cross.0 / cross.1.max(1) as f64)
}

/// One line per speaker: `{speaker_id, vector, n_utterances_averaged}`.
pub fn write_embedding_cache(path: impl AsRef<Path>, embs: &[SpeakerEmbedding]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for e in embs {
        if e.speaker_id.is_none() {
            return Err(Error::invalid("cached embeddings must carry a speaker id"));
        }
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingCache {
    by_speaker: BTreeMap<u32, SpeakerEmbedding>,
}

impl EmbeddingCache {
    pub fn from_embeddings(embs: Vec<SpeakerEmbedding>) -> Result<Self> {
        let mut by_speaker = BTreeMap::new();
        for e in embs {
            let id = e
                .speaker_id
                .ok_or_else(|| Error::invalid("cached embeddings must carry a speaker id"))?;
            if by_speaker.insert(id, e).is_some() {
                return Err(Error::invalid(format!("speaker {id} cached twice")));
            }
        }
        Ok(Self { by_speaker })
    }

    /// One-hot embeddings for `ids`.
    pub fn oracle(ids: impl IntoIterator<Item = u32>, dim: usize) -> Result<Self> {
        Self::from_embeddings(
            ids.into_iter()
                .map(|id| SpeakerEmbedding::oracle(id, dim))
                .collect::<Result<_>>()?,
        )
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let embs: Vec<SpeakerEmbedding> = crate::mixsim::dataset::read_jsonl(path)?;
        for e in &embs {
            SpeakerEmbedding::new(e.vector.clone(), e.speaker_id, e.n_utterances_averaged)?;
        }
        Self::from_embeddings(embs)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let embs: Vec<SpeakerEmbedding> = self.by_speaker.values().cloned().collect();
        write_embedding_cache(path, &embs)
    }

    pub fn merge(&mut self, other: EmbeddingCache) -> Result<()> {
        for (id, e) in other.by_speaker {
            if self.by_speaker.insert(id, e).is_some() {
                return Err(Error::invalid(format!("speaker {id} cached twice")));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&SpeakerEmbedding> {
        self.by_speaker.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_speaker.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_speaker.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.by_speaker.values().next().map(|e| e.dim())
    }

    /// Embeddings for `ids`, in that order.
    pub fn lookup(&self, ids: &[u32]) -> Result<Vec<SpeakerEmbedding>> {
        ids.iter()
            .map(|id| {
                self.get(*id)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("no embedding for speaker {id}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixsim::{sample_speaker_pool, synth_utterance};

    fn encoder() -> SpeakerEncoder {
        let cfg = EncoderConfig {
            filters: 8,
            hidden: 8,
            embedding_dim: 6,
            classes: 2,
            ..EncoderConfig::default()
        };
        SpeakerEncoder::init(cfg, vec![0, 1], 3).unwrap()
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), 8000).unwrap()
    }

    #[test]
    fn single_segment_is_its_normalized_vector() {
        let enc = encoder();
        let u = noise(1600, 1);
        let mut v = enc.segment_vector(u.samples()).unwrap();
        l2_normalize(&mut v).unwrap();
        let e = enc.embed_utterance(&u).unwrap();
        for (a, b) in e.vector().iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((e.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hop_aligned_self_concatenation_keeps_embedding() {
        // A signal periodic in the segment hop has identical segments
        // everywhere, so doubling it leaves the average unchanged.
        let enc = encoder();
        let base = noise(1520, 2).into_samples();
        let once: Vec<f64> = base.iter().cycle().take(1520 * 3).copied().collect();
        let twice: Vec<f64> = once.iter().chain(&once).copied().collect();
        let a = enc.embed_utterance(&Waveform::new(once, 8000).unwrap()).unwrap();
        let b = enc.embed_utterance(&Waveform::new(twice, 8000).unwrap()).unwrap();
        for (x, y) in a.vector().iter().zip(b.vector()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn too_short_utterance_rejected() {
        assert!(encoder().embed_utterance(&noise(1599, 0)).is_err());
    }

    #[test]
    fn enrollment_averaging_rules() {
        let enc = encoder();
        let u = noise(2000, 4);
        let single = EnrollmentSet::new(0, vec![u.clone()]).unwrap();
        let g = enc.global_embedding(&single, Some(3), 9).unwrap();
        let direct = enc.embed_utterance(&u).unwrap();
        for (a, b) in g.vector().iter().zip(direct.vector()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.n_utterances_averaged(), 1);
        let double = EnrollmentSet::new(0, vec![u.clone(), u.clone()]).unwrap();
        let g2 = enc.global_embedding(&double, None, 9).unwrap();
        for (a, b) in g.vector().iter().zip(g2.vector()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(EnrollmentSet::new(0, vec![]).is_err());
        assert!(enc.global_embedding(&double, Some(0), 0).is_err());
    }

    #[test]
    fn mean_of_normalized_then_renormalize() {
        // a = (3, 0), b = (0, 1): normalize first gives (1,1)/sqrt2,
        // averaging raw vectors first would give (3,1)/sqrt10.
        let a = SpeakerEmbedding::new(vec![3.0, 0.0], None, 1).unwrap();
        let b = SpeakerEmbedding::new(vec![0.0, 1.0], None, 1).unwrap();
        let m = average_embeddings(&[a, b], Some(5)).unwrap();
        let h = 0.5f64.sqrt();
        assert!((m.vector()[0] - h).abs() < 1e-12 && (m.vector()[1] - h).abs() < 1e-12);
        assert_eq!(m.n_utterances_averaged(), 2);
        assert_eq!(m.speaker_id(), Some(5));
    }

    #[test]
    fn selection_is_seeded_without_replacement() {
        let utts: Vec<Waveform> = (0..6).map(|i| noise(1600, i)).collect();
        let set = EnrollmentSet::new(3, utts).unwrap();
        let a = select_utterances(&set, Some(3), 1).unwrap();
        let b = select_utterances(&set, Some(3), 1).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        for (i, x) in a.iter().enumerate() {
            assert!(!a[i + 1..].contains(x));
        }
        assert_eq!(select_utterances(&set, Some(10), 1).unwrap().len(), 6);
    }

    #[test]
    fn oracle_embedding_is_one_hot() {
        let e = SpeakerEmbedding::oracle(2, 4).unwrap();
        assert_eq!(e.vector(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(SpeakerEmbedding::oracle(4, 4).is_err());
        assert!(SpeakerEmbedding::new(vec![f64::NAN], None, 1).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        let cache = EmbeddingCache::oracle([3, 1, 2], 8).unwrap();
        cache.write(&p).unwrap();
        let back = EmbeddingCache::read(&p).unwrap();
        assert_eq!(back, cache);
        assert_eq!(back.lookup(&[2, 3]).unwrap()[1].speaker_id(), Some(3));
        assert!(back.lookup(&[9]).is_err());
    }

    #[test]
    fn encoder_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("enc.bin");
        let enc = encoder();
        enc.save(&p).unwrap();
        let back = SpeakerEncoder::load(&p).unwrap();
        assert_eq!(back.classes, enc.classes);
        assert_eq!(back.params.tensors(), enc.params.tensors());
    }

    fn toy_corpus(speakers: usize, utts: usize, seed: u64) -> Vec<(u32, Vec<Waveform>)> {
        let ids: Vec<u32> = (0..speakers as u32).collect();
        let pool = sample_speaker_pool(&ids, 8, seed, &[]).unwrap();
        pool.iter()
            .map(|s| {
                let u = (0..utts)
                    .map(|j| synth_utterance(s, 0.5, derive_seed(seed, 0x77, j as u64), 8000).unwrap())
                    .collect();
                (s.speaker_id, u)
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_loss_falls() {
        let corpus = toy_corpus(3, 3, 5);
        let cfg = EncoderConfig {
            filters: 8,
            hidden: 8,
            embedding_dim: 8,
            ..EncoderConfig::default()
        };
        let hp = EncoderTrainConfig {
            epochs: 4,
            batch_size: 4,
            seed: 2,
            ..EncoderTrainConfig::default()
        };
        let (a, ra) = train_speaker_encoder(&corpus, cfg.clone(), &hp).unwrap();
        let (b, rb) = train_speaker_encoder(&corpus, cfg, &hp).unwrap();
        assert_eq!(a.params.tensors(), b.params.tensors());
        assert_eq!(ra, rb);
        assert!(ra.epoch_losses.last().unwrap() < &ra.epoch_losses[0]);
    }

    #[test]
    fn degenerate_corpus_rejected() {
        let corpus = toy_corpus(1, 3, 5);
        assert!(train_speaker_encoder(&corpus, EncoderConfig::default(), &EncoderTrainConfig::default()).is_err());
        let corpus = toy_corpus(2, 1, 5);
        assert!(train_speaker_encoder(&corpus, EncoderConfig::default(), &EncoderTrainConfig::default()).is_err());
    }
}
