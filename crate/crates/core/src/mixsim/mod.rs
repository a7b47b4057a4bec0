//! Deterministic generator of noisy, reverberant two-microphone mixtures of
//! synthetic harmonic "speakers".

pub mod dataset;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{MultiChannelWaveform, Waveform};

pub use dataset::{build_dataset, DatasetSpec, ManifestRow};

pub const F0_RANGE_HZ: (f64, f64) = (80.0, 400.0);
pub const MIN_HARMONICS: usize = 3;
/// Two speakers are distinct if their f0 ratio is at least this...
pub const MIN_F0_RATIO: f64 = 1.05;
/// ...or their timbre vectors are at least this far apart (cosine distance).
pub const MIN_TIMBRE_DISTANCE: f64 = 0.2;
pub const PEAK_LEVEL: f64 = 0.9;
pub const RIR_TAPS: usize = 256;
pub const MAX_INTERCHANNEL_DELAY: usize = 4;
const RIR_DECAY_TAPS: f64 = 32.0;
const RIR_TAIL_GAIN: f64 = 0.6;

/// SplitMix64 finalizer; derives independent child seeds.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub speaker_id: u32,
    /// Mean fundamental frequency in Hz.
    pub f0: f64,
    /// Harmonic gains, unit L2 norm.
    pub timbre: Vec<f64>,
    /// Syllable rate in Hz.
    pub envelope_rate: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn f0_ratio(a: f64, b: f64) -> f64 {
    a.max(b) / a.min(b)
}

impl SyntheticSpeaker {
    pub fn new(speaker_id: u32, f0: f64, timbre: Vec<f64>, envelope_rate: f64) -> Result<Self> {
        if !(F0_RANGE_HZ.0..=F0_RANGE_HZ.1).contains(&f0) {
            return Err(Error::invalid(format!("f0 {f0} Hz outside [80, 400]")));
        }
        if timbre.len() < MIN_HARMONICS {
            return Err(Error::invalid(format!(
                "need at least {MIN_HARMONICS} harmonic gains"
            )));
        }
        if timbre.iter().any(|&g| g < 0.0 || !g.is_finite()) {
            return Err(Error::invalid("harmonic gains must be finite and non-negative"));
        }
        let norm = timbre.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("timbre has no energy"));
        }
        if envelope_rate <= 0.0 {
            return Err(Error::invalid("envelope rate must be positive"));
        }
        Ok(Self {
            speaker_id,
            f0,
            timbre: timbre.iter().map(|g| g / norm).collect(),
            envelope_rate,
        })
    }

    pub fn timbre_distance(&self, other: &Self) -> f64 {
        1.0 - cosine(&self.timbre, &other.timbre)
    }

    /// The pool's minimum-separation rule.
    pub fn is_separable_from(&self, other: &Self) -> bool {
        f0_ratio(self.f0, other.f0) >= MIN_F0_RATIO
            || self.timbre_distance(other) >= MIN_TIMBRE_DISTANCE
    }
}

fn random_timbre(rng: &mut ChaCha8Rng, harmonics: usize) -> Vec<f64> {
    let tilt = rng.random_range(0.3..1.5);
    (1..=harmonics)
        .map(|h| rng.random_range(0.15..1.0) * (h as f64).powf(-tilt))
        .collect()
}

/// Samples speakers for `ids`, half of them (on average) as "siblings" of
/// an earlier speaker in the same pool: f0 within 5-11 % of it and an
/// independent timbre, so that similar-voice pairs exist. Every new speaker
/// satisfies the separation rule against `existing` and against the rest of
/// the pool.
pub fn sample_speaker_pool(
    ids: &[u32],
    harmonics: usize,
    seed: u64,
    existing: &[SyntheticSpeaker],
) -> Result<Vec<SyntheticSpeaker>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5EED, 0));
    let mut pool: Vec<SyntheticSpeaker> = Vec::with_capacity(ids.len());
    let (lo, hi) = (F0_RANGE_HZ.0.ln(), F0_RANGE_HZ.1.ln());
    for &id in ids {
        let mut accepted = None;
        for _ in 0..10_000 {
            let (f0, timbre) = if !pool.is_empty() && rng.random_bool(0.5) {
                let parent = &pool[rng.random_range(0..pool.len())];
                let r = rng.random_range(1.05..1.11);
                let f0 = if rng.random_bool(0.5) {
                    parent.f0 * r
                } else {
                    parent.f0 / r
                };
                (f0, random_timbre(&mut rng, harmonics))
            } else {
                (
                    rng.random_range(lo..hi).exp(),
                    random_timbre(&mut rng, harmonics),
                )
            };
            if !(F0_RANGE_HZ.0..=F0_RANGE_HZ.1).contains(&f0) {
                continue;
            }
            let rate = rng.random_range(2.5..5.0);
            let cand = SyntheticSpeaker::new(id, f0, timbre, rate)?;
            if existing
                .iter()
                .chain(pool.iter())
                .all(|s| cand.is_separable_from(s))
            {
                accepted = Some(cand);
                break;
            }
        }
        pool.push(accepted.ok_or_else(|| {
            Error::invalid(format!("could not place speaker {id} under the separation rule"))
        })?);
    }
    Ok(pool)
}

/// A harmonic, syllable-gated utterance with speaker-specific f0 and timbre,
/// peak-normalized to 0.9.
pub fn synth_utterance(
    spk: &SyntheticSpeaker,
    duration_s: f64,
    seed: u64,
    sample_rate: u32,
) -> Result<Waveform> {
    if !(duration_s > 0.0) {
        return Err(Error::invalid("duration must be positive"));
    }
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, spk.speaker_id as u64, 0xA11));

    let drift_rate = rng.random_range(0.2..0.6);
    let drift_depth = rng.random_range(0.005..0.015);
    let drift_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let vib_rate = rng.random_range(4.0..6.0);
    let vib_depth = rng.random_range(0.002..0.006);
    let vib_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let phases: Vec<f64> = spk
        .timbre
        .iter()
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();

    // syllable envelope
    let syllable = (sr / spk.envelope_rate).round().max(1.0) as usize;
    let n_syl = n.div_ceil(syllable);
    let mut envelope = vec![0.0; n];
    let mut any_active = false;
    for s in 0..n_syl {
        let active = rng.random_bool(0.75) || (s + 1 == n_syl && !any_active);
        let amp = rng.random_range(0.4..1.0);
        let frac = rng.random_range(0.6..1.0);
        if !active {
            continue;
        }
        any_active = true;
        let start = s * syllable;
        let len = ((syllable as f64) * frac).round().max(2.0) as usize;
        for i in 0..len {
            let t = start + i;
            if t >= n {
                break;
            }
            let w = (std::f64::consts::PI * i as f64 / (len - 1) as f64).sin();
            envelope[t] = amp * w;
        }
    }

    let nyquist_guard = 0.45 * sr;
    let mut theta = 0.0f64;
    let mut samples = Vec::with_capacity(n);
    for (t, &env) in envelope.iter().enumerate() {
        let time = t as f64 / sr;
        let f = spk.f0
            * (1.0
                + drift_depth * (std::f64::consts::TAU * drift_rate * time + drift_phase).sin()
                + vib_depth * (std::f64::consts::TAU * vib_rate * time + vib_phase).sin());
        let mut x = 0.0;
        for (h, (&g, &ph)) in spk.timbre.iter().zip(&phases).enumerate() {
            let order = (h + 1) as f64;
            if g == 0.0 || order * f >= nyquist_guard {
                continue;
            }
            x += g * (order * theta + ph).sin();
        }
        samples.push(env * x);
        theta += std::f64::consts::TAU * f / sr;
        if theta > 1e6 {
            theta %= std::f64::consts::TAU;
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK_LEVEL / peak;
        samples.iter_mut().for_each(|s| *s *= g);
    }
    Waveform::new(samples, sample_rate)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoomImpulseResponse {
    /// One FIR per microphone, all the same length.
    pub taps: Vec<Vec<f64>>,
    /// Index of the direct-path tap per microphone.
    pub direct_delay: Vec<usize>,
}

impl RoomImpulseResponse {
    /// Pure delay of zero on every channel.
    pub fn identity(mics: usize) -> Self {
        Self {
            taps: vec![vec![1.0]; mics],
            direct_delay: vec![0; mics],
        }
    }

    pub fn mics(&self) -> usize {
        self.taps.len()
    }

    /// Direct tap is the largest-magnitude tap and the second half carries
    /// less energy than the first, on every channel.
    pub fn check_invariants(&self) -> Result<()> {
        for (c, (taps, &d)) in self.taps.iter().zip(&self.direct_delay).enumerate() {
            let direct = taps[d].abs();
            if taps.iter().any(|t| t.abs() > direct) {
                return Err(Error::Invariant(format!("channel {c}: direct tap is not the largest")));
            }
            if taps.len() >= 2 {
                let half = taps.len() / 2;
                let rms = |s: &[f64]| (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
                if rms(&taps[half..]) >= rms(&taps[..half]) {
                    return Err(Error::Invariant(format!("channel {c}: taps do not decay")));
                }
            }
        }
        Ok(())
    }
}

/// Two-microphone random decaying FIR. Channel 0 has its direct path at
/// tap 0, channel 1 at a random 0..=4 sample delay; tail energy grows
/// linearly with `reverb_strength`.
pub fn make_rir(seed: u64, reverb_strength: f64) -> RoomImpulseResponse {
    make_rir_for(2, seed, reverb_strength)
}

pub fn make_rir_for(mics: usize, seed: u64, reverb_strength: f64) -> RoomImpulseResponse {
    let strength = reverb_strength.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x12, 0));
    let delays: Vec<usize> = (0..mics)
        .map(|c| {
            if c == 0 {
                0
            } else {
                rng.random_range(0..=MAX_INTERCHANNEL_DELAY)
            }
        })
        .collect();
    let gain = RIR_TAIL_GAIN * strength.sqrt();
    let taps = delays
        .iter()
        .map(|&d| {
            let mut h = vec![0.0; RIR_TAPS];
            h[d] = 1.0;
            for (i, tap) in h.iter_mut().enumerate().skip(d + 1) {
                let n: f64 = StandardNormal.sample(&mut rng);
                let decay = (-((i - d) as f64) / RIR_DECAY_TAPS).exp();
                *tap = gain * decay * n.clamp(-1.5, 1.5);
            }
            h
        })
        .collect();
    RoomImpulseResponse {
        taps,
        direct_delay: delays,
    }
}

/// Causal convolution truncated to the input length.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (j, &hj) in h.iter().enumerate() {
        if hj == 0.0 {
            continue;
        }
        for (yo, &xi) in y[j.min(x.len())..].iter_mut().zip(x) {
            *yo += hj * xi;
        }
    }
    y
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionTag {
    SimilarPair,
    DissimilarPair,
}

impl ConditionTag {
    pub fn for_f0s(a: f64, b: f64, similar_ratio: f64) -> Self {
        if f0_ratio(a, b) < similar_ratio {
            ConditionTag::SimilarPair
        } else {
            ConditionTag::DissimilarPair
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConditionTag::SimilarPair => "similar-pair",
            ConditionTag::DissimilarPair => "dissimilar-pair",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    pub mixture: MultiChannelWaveform,
    pub reverberant_sources: Vec<MultiChannelWaveform>,
    pub clean_sources: Vec<Waveform>,
    pub noise: MultiChannelWaveform,
    pub speaker_ids: Vec<u32>,
    pub noise_snr_db: f64,
    pub condition_tag: ConditionTag,
}

impl MixtureExample {
    /// Attaches speaker identities and the pair condition.
    pub fn labeled(mut self, speaker_ids: Vec<u32>, tag: ConditionTag) -> Result<Self> {
        if speaker_ids.len() != self.clean_sources.len() {
            return Err(Error::invalid("one speaker id per source is required"));
        }
        for (i, a) in speaker_ids.iter().enumerate() {
            if speaker_ids[i + 1..].contains(a) {
                return Err(Error::invalid(format!("speaker id {a} appears twice")));
            }
        }
        self.speaker_ids = speaker_ids;
        self.condition_tag = tag;
        Ok(self)
    }

    /// Largest absolute deviation of `mixture - sum(reverberant) - noise`.
    pub fn additivity_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for c in 0..self.mixture.num_channels() {
            for t in 0..self.mixture.len() {
                let mut v = self.mixture.channel(c).samples()[t] - self.noise.channel(c).samples()[t];
                for s in &self.reverberant_sources {
                    v -= s.channel(c).samples()[t];
                }
                worst = worst.max(v.abs());
            }
        }
        worst
    }
}

fn multichannel_power(channels: &[Vec<f64>]) -> f64 {
    let n: usize = channels.iter().map(|c| c.len()).sum();
    channels.iter().flatten().map(|v| v * v).sum::<f64>() / n as f64
}

/// Reverberates each source with its RIR, sums them, and adds white noise at
/// `snr_db` relative to the summed reverberant speech. `f64::INFINITY`
/// means no noise. Speaker ids default to `0..K`; see [`MixtureExample::labeled`].
pub fn mix(
    sources: &[Waveform],
    rirs: &[RoomImpulseResponse],
    noise_seed: u64,
    snr_db: f64,
) -> Result<MixtureExample> {
    if sources.is_empty() {
        return Err(Error::invalid("at least one source is required"));
    }
    if sources.len() != rirs.len() {
        return Err(Error::invalid(format!(
            "{} sources but {} impulse responses",
            sources.len(),
            rirs.len()
        )));
    }
    let len = sources[0].len();
    let rate = sources[0].sample_rate();
    if sources.iter().any(|s| s.len() != len) {
        return Err(Error::Shape("sources differ in length".into()));
    }
    let mics = rirs[0].mics();
    if rirs.iter().any(|r| r.mics() != mics) {
        return Err(Error::Shape("impulse responses differ in microphone count".into()));
    }
    if snr_db.is_nan() {
        return Err(Error::invalid("SNR must not be NaN"));
    }

    let reverberant: Vec<Vec<Vec<f64>>> = sources
        .iter()
        .zip(rirs)
        .map(|(s, r)| {
            r.taps
                .iter()
                .map(|h| convolve_truncated(s.samples(), h))
                .collect()
        })
        .collect();
    let mut speech = vec![vec![0.0; len]; mics];
    for src in &reverberant {
        for (acc, ch) in speech.iter_mut().zip(src) {
            for (a, v) in acc.iter_mut().zip(ch) {
                *a += v;
            }
        }
    }
    let mut noise = vec![vec![0.0; len]; mics];
    if snr_db.is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, 0x401, 0));
        for ch in noise.iter_mut() {
            for v in ch.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        let p_speech = multichannel_power(&speech);
        let p_noise = multichannel_power(&noise);
        if p_speech > 0.0 && p_noise > 0.0 {
            let gain = (p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
            noise.iter_mut().flatten().for_each(|v| *v *= gain);
        } else {
            noise.iter_mut().flatten().for_each(|v| *v = 0.0);
        }
    }
    let mixture: Vec<Vec<f64>> = speech
        .iter()
        .zip(&noise)
        .map(|(s, n)| s.iter().zip(n).map(|(a, b)| a + b).collect())
        .collect();

    let to_multi = |chs: Vec<Vec<f64>>| -> Result<MultiChannelWaveform> {
        MultiChannelWaveform::new(
            chs.into_iter()
                .map(|c| Waveform::new(c, rate))
                .collect::<Result<_>>()?,
        )
    };
    Ok(MixtureExample {
        mixture: to_multi(mixture)?,
        reverberant_sources: reverberant.into_iter().map(to_multi).collect::<Result<_>>()?,
        clean_sources: sources.to_vec(),
        noise: to_multi(noise)?,
        speaker_ids: (0..sources.len() as u32).collect(),
        noise_snr_db: snr_db,
        condition_tag: ConditionTag::DissimilarPair,
    })
}

/// Realized SNR (dB) of a mixture: summed reverberant speech vs noise.
pub fn realized_snr_db(ex: &MixtureExample) -> f64 {
    let mics = ex.mixture.num_channels();
    let speech: Vec<Vec<f64>> = (0..mics)
        .map(|c| {
            (0..ex.mixture.len())
                .map(|t| {
                    ex.reverberant_sources
                        .iter()
                        .map(|s| s.channel(c).samples()[t])
                        .sum()
                })
                .collect()
        })
        .collect();
    let noise: Vec<Vec<f64>> = ex
        .noise
        .channels()
        .iter()
        .map(|c| c.samples().to_vec())
        .collect();
    10.0 * (multichannel_power(&speech) / multichannel_power(&noise)).log10()
}
