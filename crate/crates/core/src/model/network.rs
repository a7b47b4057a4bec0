//! The extractor: spectral and spatial encoders, U-ConvBlock separator,
//! speaker stack, and decoder.
//!
//! Each stage exists twice: as a graph builder (`*_graph`) used for training,
//! and as a pure function over [`FeatureMap`]s that evaluates the same builder
//! on a throwaway tape.

use std::path::Path;

use ndarray::Array2;

use crate::autodiff::{cst, Float, Var};
use crate::error::{Error, Result};
use crate::model::config::{Conditioning, ModelConfig};
use crate::model::layers::{self, Builder};
use crate::model::params::{ParamSpec, ParameterSet};
use crate::signals::{MultiChannelWaveform, Waveform};
use crate::speakers::SpeakerEmbedding;

/// Frame-synchronous features, stored channel-major (`channels x frames`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    values: Array2<T>,
}

impl<T: Float> FeatureMap<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(Self { values })
    }

    /// Builds a map from `frames x channels` rows.
    pub fn from_frames(rows: &[Vec<T>]) -> Result<Self> {
        let frames = rows.len();
        let channels = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != channels) {
            return Err(Error::Shape("ragged frame rows".into()));
        }
        Self::new(Array2::from_shape_fn((channels, frames), |(c, f)| rows[f][c]))
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, frame: usize, channel: usize) -> T {
        self.values[[channel, frame]]
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn into_values(self) -> Array2<T> {
        self.values
    }

    /// Channels `[start, start + len)`.
    pub fn channel_slice(&self, start: usize, len: usize) -> Self {
        Self {
            values: self.values.slice(ndarray::s![start..start + len, ..]).to_owned(),
        }
    }
}

pub fn speaker_stack_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let rep = cfg.rep_dim();
    let mut v = layers::norm_layout("spk.in_norm", rep);
    v.push(ParamSpec::conv("spk.bottleneck.w", cfg.channels, rep));
    v.extend(layers::tcn_block_layout(
        "spk.tcn",
        cfg.channels,
        cfg.expanded_channels,
    ));
    for k in 0..cfg.speakers {
        v.push(ParamSpec::conv(
            format!("spk.adapt{k}.w"),
            cfg.speaker_dim,
            cfg.channels,
        ));
    }
    v.push(ParamSpec::conv("spk.embed.w", cfg.speaker_dim, cfg.embedding_dim));
    v.push(ParamSpec::conv(
        "spk.out.w",
        cfg.speaker_dim,
        cfg.speaker_dim * cfg.speakers,
    ));
    v
}

pub fn separator_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d_in = cfg.separator_input_dim();
    let normalized = match cfg.conditioning {
        Conditioning::Concat => cfg.rep_dim(),
        _ => d_in,
    };
    let mut v = layers::norm_layout("sep.in_norm", normalized);
    v.push(ParamSpec::conv("sep.bottleneck.w", cfg.channels, d_in));
    for i in 0..cfg.blocks {
        v.extend(layers::u_conv_block_layout(
            &format!("sep.block{i}"),
            cfg.channels,
            cfg.expanded_channels,
            cfg.depth,
        ));
    }
    if cfg.conditioning == Conditioning::Multiply {
        v.push(ParamSpec::conv("sep.mult.mid.w", cfg.channels, cfg.embedding_dim));
        v.push(ParamSpec::conv("sep.mult.head.w", cfg.channels, cfg.embedding_dim));
    }
    v.push(ParamSpec::conv(
        "sep.mask.w",
        cfg.speakers * cfg.rep_dim(),
        cfg.channels,
    ));
    v.push(ParamSpec::constant("sep.mask.b", cfg.speakers * cfg.rep_dim(), 1, 0.0));
    v
}

/// Complete parameter layout of the extractor for `cfg`.
pub fn model_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::conv("enc.spectral.w", cfg.spectral_dim, cfg.kernel)];
    if cfg.spatial_dim > 0 {
        v.push(ParamSpec::conv(
            "enc.spatial.w",
            cfg.spatial_dim,
            cfg.mics * cfg.kernel,
        ));
    }
    if cfg.conditioning == Conditioning::Split {
        v.extend(speaker_stack_layout(cfg));
    }
    v.extend(separator_layout(cfg));
    v.push(ParamSpec::conv("dec.w", cfg.kernel, cfg.rep_dim()));
    v.push(ParamSpec::constant("dec.b", 1, 1, 0.0));
    v
}

pub fn init_params<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    Ok(ParameterSet::init(&model_layout(cfg), seed))
}

fn checkpoint_meta(cfg: &ModelConfig) -> serde_json::Value {
    serde_json::json!({ "kind": "extractor", "config": cfg })
}

pub fn save_params(path: impl AsRef<Path>, params: &ParameterSet<f32>, cfg: &ModelConfig) -> Result<()> {
    params.check_layout(&model_layout(cfg))?;
    params.save(path, &checkpoint_meta(cfg))
}

/// Loads parameters and checks them against `cfg`.
pub fn load_params(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ParameterSet<f32>> {
    let (params, _) = ParameterSet::load(path)?;
    params.check_layout(&model_layout(cfg))?;
    Ok(params)
}

/// Loads parameters together with the configuration stored alongside them.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParameterSet<f32>, ModelConfig)> {
    let (params, meta) = ParameterSet::load(path)?;
    let cfg: ModelConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no model config".into()))?,
    )?;
    params.check_layout(&model_layout(&cfg))?;
    Ok((params, cfg))
}

fn waveform_row<T: Float>(w: &Waveform, len: usize) -> Array2<T> {
    let mut a = Array2::zeros((1, len));
    for (o, &s) in a.iter_mut().zip(w.samples()) {
        *o = cst(s);
    }
    a
}

/// `channels x len` array of the mixture, zero-padded at the end.
fn mixture_array<T: Float>(mix: &MultiChannelWaveform, len: usize) -> Array2<T> {
    let mut a = Array2::zeros((mix.num_channels(), len));
    for (c, ch) in mix.channels().iter().enumerate() {
        for (i, &s) in ch.samples().iter().enumerate() {
            a[[c, i]] = cst(s);
        }
    }
    a
}

pub(crate) fn embedding_column<T: Float>(e: &SpeakerEmbedding) -> Array2<T> {
    Array2::from_shape_fn((e.dim(), 1), |(i, _)| cst(e.vector()[i]))
}

fn row_to_waveform<T: Float>(a: ndarray::ArrayView2<'_, T>, sample_rate: u32) -> Result<Waveform> {
    Waveform::new(a.iter().map(|v| v.to_f64_lossy()).collect(), sample_rate)
}

pub fn check_embeddings(cfg: &ModelConfig, embs: Option<&[SpeakerEmbedding]>) -> Result<()> {
    match (cfg.conditioning.is_conditioned(), embs) {
        (false, None) => Ok(()),
        (false, Some(_)) => Err(Error::invalid(
            "unconditioned model does not accept speaker embeddings",
        )),
        (true, None) => Err(Error::invalid(format!(
            "{} conditioning requires {} speaker embeddings",
            cfg.conditioning, cfg.speakers
        ))),
        (true, Some(e)) => {
            if e.len() != cfg.speakers {
                return Err(Error::invalid(format!(
                    "expected {} embeddings, got {}",
                    cfg.speakers,
                    e.len()
                )));
            }
            if let Some(bad) = e.iter().find(|x| x.dim() != cfg.embedding_dim) {
                return Err(Error::invalid(format!(
                    "embedding has dimension {}, expected {}",
                    bad.dim(),
                    cfg.embedding_dim
                )));
            }
            Ok(())
        }
    }
}

// ---- graph builders -------------------------------------------------------

pub(crate) fn spectral_graph<T: Float>(b: &mut Builder<'_, T>, cfg: &ModelConfig, ch0: Var) -> Var {
    let frames = b.graph.frame(ch0, cfg.kernel, cfg.stride);
    let y = b.pointwise("enc.spectral.w", frames);
    b.graph.relu(y)
}

pub(crate) fn spatial_graph<T: Float>(b: &mut Builder<'_, T>, cfg: &ModelConfig, mix: Var) -> Var {
    let frames = b.graph.frame(mix, cfg.kernel, cfg.stride);
    let y = b.pointwise("enc.spatial.w", frames);
    b.graph.relu(y)
}

/// The (N + S)-channel representation shared by the speaker stack,
/// separator and decoder.
pub(crate) fn encode_graph<T: Float>(b: &mut Builder<'_, T>, cfg: &ModelConfig, mix: Var) -> Var {
    let ch0 = b.graph.slice_rows(mix, 0, 1);
    let spectral = spectral_graph(b, cfg, ch0);
    if cfg.spatial_dim == 0 {
        return spectral;
    }
    let spatial = spatial_graph(b, cfg, mix);
    b.graph.concat(&[spectral, spatial])
}

pub(crate) fn speaker_stack_graph<T: Float>(
    b: &mut Builder<'_, T>,
    rep: Var,
    embs: &[Var],
) -> Var {
    let h = b.instance_norm("spk.in_norm", rep);
    let h = b.pointwise("spk.bottleneck.w", h);
    let h = layers::tcn_block(b, "spk.tcn", h, 1);
    let embed_w = b.p("spk.embed.w");
    let mut modulated = Vec::with_capacity(embs.len());
    for (k, &e) in embs.iter().enumerate() {
        let a = b.pointwise(&format!("spk.adapt{k}.w"), h);
        let v = b.graph.matmul(embed_w, e);
        modulated.push(b.graph.mul_col(a, v));
    }
    let cat = b.graph.concat(&modulated);
    let out = b.pointwise("spk.out.w", cat);
    b.graph.relu(out)
}

pub(crate) fn separator_graph<T: Float>(
    b: &mut Builder<'_, T>,
    cfg: &ModelConfig,
    input: Var,
    embs: &[Var],
) -> Vec<Var> {
    let rep_dim = cfg.rep_dim();
    let normalized = if cfg.conditioning == Conditioning::Concat {
        // Instance norm would flatten the frame-constant embedding rows to
        // their bias, so only the encoder block is normalized.
        let d_in = b.graph.shape(input).0;
        let rep = b.graph.slice_rows(input, 0, rep_dim);
        let rest = b.graph.slice_rows(input, rep_dim, d_in - rep_dim);
        let rep = b.instance_norm("sep.in_norm", rep);
        b.graph.concat(&[rep, rest])
    } else {
        b.instance_norm("sep.in_norm", input)
    };
    let mut h = b.pointwise("sep.bottleneck.w", normalized);
    let inject_after = cfg.blocks.div_ceil(2);
    for i in 0..cfg.blocks {
        h = layers::u_conv_block(b, &format!("sep.block{i}"), h, cfg.depth);
        if cfg.conditioning == Conditioning::Multiply && i + 1 == inject_after {
            let w = b.p("sep.mult.mid.w");
            let mut z = b.graph.matmul(w, embs[0]);
            for &e in &embs[1..] {
                let t = b.graph.matmul(w, e);
                z = b.graph.add(z, t);
            }
            h = b.graph.mul_col(h, z);
        }
    }
    let w = b.p("sep.mask.w");
    let bias = b.p("sep.mask.b");
    if cfg.conditioning == Conditioning::Multiply {
        let head = b.p("sep.mult.head.w");
        (0..cfg.speakers)
            .map(|k| {
                let u = b.graph.matmul(head, embs[k]);
                let hk = b.graph.mul_col(h, u);
                let wk = b.graph.slice_rows(w, k * rep_dim, rep_dim);
                let bk = b.graph.slice_rows(bias, k * rep_dim, rep_dim);
                let m = b.graph.matmul(wk, hk);
                let m = b.graph.add_col(m, bk);
                b.graph.sigmoid(m)
            })
            .collect()
    } else {
        let m = b.graph.matmul(w, h);
        let m = b.graph.add_col(m, bias);
        let m = b.graph.sigmoid(m);
        (0..cfg.speakers)
            .map(|k| b.graph.slice_rows(m, k * rep_dim, rep_dim))
            .collect()
    }
}

pub(crate) fn decode_graph<T: Float>(b: &mut Builder<'_, T>, cfg: &ModelConfig, rep: Var) -> Var {
    let cols = b.pointwise("dec.w", rep);
    let wav = b.graph.overlap_add(cols, cfg.stride);
    let bias = b.p("dec.b");
    b.graph.add_col(wav, bias)
}

/// Output of [`forward_graph`]: one `1 x T` waveform node per slot.
pub(crate) struct ForwardNodes {
    pub outputs: Vec<Var>,
    /// Embedding leaves, for gradients with respect to the conditioning.
    #[cfg_attr(not(test), allow(dead_code))]
    pub embeddings: Vec<Var>,
}

/// Records the whole extractor on `b`. `embs_as_variables` keeps gradients
/// for the embedding leaves.
pub(crate) fn forward_graph<T: Float>(
    b: &mut Builder<'_, T>,
    cfg: &ModelConfig,
    mix: &MultiChannelWaveform,
    embs: Option<&[SpeakerEmbedding]>,
    embs_as_variables: bool,
) -> Result<ForwardNodes> {
    check_embeddings(cfg, embs)?;
    if mix.num_channels() != cfg.mics {
        return Err(Error::Shape(format!(
            "mixture has {} channels, model expects {}",
            mix.num_channels(),
            cfg.mics
        )));
    }
    let t = mix.len();
    if t < cfg.kernel {
        return Err(Error::Shape(format!(
            "input of {t} samples is shorter than the {}-sample kernel",
            cfg.kernel
        )));
    }
    let padded = cfg.padded_len(t);
    let frames = cfg.frames_for(padded).expect("padded >= kernel");
    if frames < cfg.min_frames() {
        return Err(Error::Shape(format!(
            "{frames} frames is fewer than the {} required by depth {}",
            cfg.min_frames(),
            cfg.depth
        )));
    }
    let mix_var = b.graph.input(mixture_array(mix, padded));
    let emb_vars: Vec<Var> = embs
        .unwrap_or(&[])
        .iter()
        .map(|e| {
            let col = embedding_column(e);
            if embs_as_variables {
                b.graph.variable(col)
            } else {
                b.graph.input(col)
            }
        })
        .collect();

    let rep = encode_graph(b, cfg, mix_var);
    let sep_in = match cfg.conditioning {
        Conditioning::None | Conditioning::Multiply => rep,
        Conditioning::Split => {
            let spk = speaker_stack_graph(b, rep, &emb_vars);
            b.graph.concat(&[rep, spk])
        }
        Conditioning::Concat => {
            let mut parts = vec![rep];
            for &e in &emb_vars {
                parts.push(b.graph.broadcast_cols(e, frames));
            }
            b.graph.concat(&parts)
        }
    };
    let masks = separator_graph(b, cfg, sep_in, &emb_vars);
    let outputs = masks
        .into_iter()
        .map(|m| {
            let masked = b.graph.mul(m, rep);
            let wav = decode_graph(b, cfg, masked);
            b.graph.slice_cols(wav, 0, t)
        })
        .collect();
    Ok(ForwardNodes {
        outputs,
        embeddings: emb_vars,
    })
}

// ---- pure functions ---------------------------------------------------------

fn feature_input<T: Float>(b: &mut Builder<'_, T>, x: &FeatureMap<T>) -> Var {
    b.graph.input(x.values().clone())
}

fn finish<T: Float>(b: &Builder<'_, T>, v: Var) -> Result<FeatureMap<T>> {
    FeatureMap::new(b.graph.value(v).to_owned())
}

/// Spectral encoder on the reference channel: `frames x N`, ReLU, no bias.
pub fn spectral_encode<T: Float>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    mix_ch0: &Waveform,
) -> Result<FeatureMap<T>> {
    if mix_ch0.len() < cfg.kernel {
        return Err(Error::Shape(format!(
            "input of {} samples is shorter than the {}-sample kernel",
            mix_ch0.len(),
            cfg.kernel
        )));
    }
    let mut b = Builder::new(params);
    let x = b.graph.input(waveform_row(mix_ch0, mix_ch0.len()));
    let y = spectral_graph(&mut b, cfg, x);
    finish(&b, y)
}

/// Spatial encoder: a kernel spanning every microphone and `L` samples.
pub fn spatial_encode<T: Float>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    mix: &MultiChannelWaveform,
) -> Result<FeatureMap<T>> {
    if cfg.spatial_dim == 0 {
        return Err(Error::config("spatial encoder is disabled (S = 0)"));
    }
    if mix.num_channels() != cfg.mics {
        return Err(Error::Shape(format!(
            "mixture has {} channels, model expects {}",
            mix.num_channels(),
            cfg.mics
        )));
    }
    if mix.len() < cfg.kernel {
        return Err(Error::Shape("input shorter than one kernel".into()));
    }
    let mut b = Builder::new(params);
    let x = b.graph.input(mixture_array(mix, mix.len()));
    let y = spatial_graph(&mut b, cfg, x);
    finish(&b, y)
}

/// Channel-wise concatenation, spectral block first.
pub fn concat_features<T: Float>(spectral: &FeatureMap<T>, spatial: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if spectral.frames() != spatial.frames() {
        return Err(Error::Shape(format!(
            "frame mismatch: {} vs {}",
            spectral.frames(),
            spatial.frames()
        )));
    }
    let v = ndarray::concatenate(ndarray::Axis(0), &[spectral.values().view(), spatial.values().view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    FeatureMap::new(v)
}

pub fn tcn_block<T: Float>(
    params: &ParameterSet<T>,
    prefix: &str,
    x: &FeatureMap<T>,
    dilation: usize,
) -> Result<FeatureMap<T>> {
    if dilation == 0 {
        return Err(Error::invalid("dilation must be at least 1"));
    }
    let mut b = Builder::new(params);
    let xv = feature_input(&mut b, x);
    let y = layers::tcn_block(&mut b, prefix, xv, dilation);
    finish(&b, y)
}

pub fn u_conv_block<T: Float>(
    params: &ParameterSet<T>,
    prefix: &str,
    x: &FeatureMap<T>,
    depth: usize,
) -> Result<FeatureMap<T>> {
    if x.frames() < 1 << depth {
        return Err(Error::Shape(format!(
            "{} frames is fewer than 2^{depth}",
            x.frames()
        )));
    }
    let mut b = Builder::new(params);
    let xv = feature_input(&mut b, x);
    let y = layers::u_conv_block(&mut b, prefix, xv, depth);
    finish(&b, y)
}

fn embedding_inputs<T: Float>(b: &mut Builder<'_, T>, embs: Option<&[SpeakerEmbedding]>) -> Vec<Var> {
    embs.unwrap_or(&[])
        .iter()
        .map(|e| b.graph.input(embedding_column(e)))
        .collect()
}

/// K masks in slot order, each `frames x (N + S)` with values in (0, 1).
pub fn separator<T: Float>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    y: &FeatureMap<T>,
    embs: Option<&[SpeakerEmbedding]>,
) -> Result<Vec<FeatureMap<T>>> {
    if y.channels() != cfg.separator_input_dim() {
        return Err(Error::Shape(format!(
            "separator input has {} channels, {} conditioning expects {}",
            y.channels(),
            cfg.conditioning,
            cfg.separator_input_dim()
        )));
    }
    if cfg.conditioning == Conditioning::Multiply {
        check_embeddings(cfg, embs)?;
    }
    if y.frames() < cfg.min_frames() {
        return Err(Error::Shape("too few frames for the U-ConvBlocks".into()));
    }
    let mut b = Builder::new(params);
    let x = feature_input(&mut b, y);
    let e = embedding_inputs(&mut b, embs);
    let masks = separator_graph(&mut b, cfg, x, &e);
    masks.into_iter().map(|m| finish(&b, m)).collect()
}

/// `frames x E` speaker features from the encoder output and K embeddings.
pub fn speaker_stack<T: Float>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    y: &FeatureMap<T>,
    embs: &[SpeakerEmbedding],
) -> Result<FeatureMap<T>> {
    if cfg.conditioning != Conditioning::Split {
        return Err(Error::config("speaker stack exists only for split conditioning"));
    }
    check_embeddings(cfg, Some(embs))?;
    if y.channels() != cfg.rep_dim() {
        return Err(Error::Shape(format!(
            "speaker stack input has {} channels, expected {}",
            y.channels(),
            cfg.rep_dim()
        )));
    }
    let mut b = Builder::new(params);
    let x = feature_input(&mut b, y);
    let e = embedding_inputs(&mut b, Some(embs));
    let out = speaker_stack_graph(&mut b, x, &e);
    finish(&b, out)
}

/// Transposed convolution back to a waveform of `(frames - 1) * stride + L` samples.
pub fn decode<T: Float>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    rep: &FeatureMap<T>,
    sample_rate: u32,
) -> Result<Waveform> {
    if rep.frames() == 0 {
        return Err(Error::Shape("cannot decode zero frames".into()));
    }
    if rep.channels() != cfg.rep_dim() {
        return Err(Error::Shape(format!(
            "decoder input has {} channels, expected {}",
            rep.channels(),
            cfg.rep_dim()
        )));
    }
    let mut b = Builder::new(params);
    let x = feature_input(&mut b, rep);
    let y = decode_graph(&mut b, cfg, x);
    row_to_waveform(b.graph.value(y), sample_rate)
}

/// Runs the whole extractor. Output `k` is bound to embedding slot `k` in
/// conditioned modes; every output has the input's length.
pub fn forward<T: Float>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    mix: &MultiChannelWaveform,
    embs: Option<&[SpeakerEmbedding]>,
) -> Result<Vec<Waveform>> {
    let mut b = Builder::new(params);
    let nodes = forward_graph(&mut b, cfg, mix, embs, false)?;
    nodes
        .outputs
        .iter()
        .map(|&o| row_to_waveform(b.graph.value(o), mix.sample_rate()))
        .collect()
}
