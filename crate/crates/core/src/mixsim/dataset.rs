//! Desk-scale dataset generation and manifest I/O.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! dataset.json        the spec it was built from
//! speakers.json       speaker table (train and eval pools)
//! train.jsonl         one manifest row per training mixture
//! eval.jsonl          one manifest row per evaluation mixture
//! enroll.jsonl        enrollment utterances per speaker
//! wav/...             float32 WAVs referenced by the manifests
//! ```
//!
//! Paths inside manifests are relative to the dataset directory, so two
//! builds into different directories produce identical manifests.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, make_rir_for, mix, sample_speaker_pool, synth_utterance, ConditionTag,
    SyntheticSpeaker,
};
use crate::error::{Error, Result};
use crate::signals::{read_wav, write_wav, MultiChannelWaveform, WavEncoding, Waveform};

const STREAM_MIX: u64 = 1;
const STREAM_ENROLL: u64 = 2;
const STREAM_EVAL_POOL: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub sample_rate: u32,
    pub utterance_s: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_train_speakers: usize,
    pub n_eval_speakers: usize,
    /// Explicit speaker ids; when absent, train ids are `0..n_train_speakers`
    /// and eval ids follow them.
    pub train_speaker_ids: Option<Vec<u32>>,
    pub eval_speaker_ids: Option<Vec<u32>>,
    pub speakers_per_mixture: usize,
    pub mics: usize,
    pub enroll_per_speaker: usize,
    pub snr_db: (f64, f64),
    pub reverb_strength: (f64, f64),
    /// Pairs whose f0 ratio is below this are tagged similar.
    pub similar_f0_ratio: f64,
    /// Fraction of mixtures drawn from similar pairs, when the pool has any.
    pub similar_pair_fraction: f64,
    pub harmonics: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            sample_rate: crate::signals::DEFAULT_SAMPLE_RATE,
            utterance_s: 2.0,
            n_train: 500,
            n_eval: 100,
            n_train_speakers: 24,
            n_eval_speakers: 8,
            train_speaker_ids: None,
            eval_speaker_ids: None,
            speakers_per_mixture: 2,
            mics: 2,
            enroll_per_speaker: 8,
            snr_db: (0.0, 10.0),
            reverb_strength: (0.1, 0.5),
            similar_f0_ratio: 1.12,
            similar_pair_fraction: 0.5,
            harmonics: 8,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn train_ids(&self) -> Vec<u32> {
        self.train_speaker_ids
            .clone()
            .unwrap_or_else(|| (0..self.n_train_speakers as u32).collect())
    }

    pub fn eval_ids(&self) -> Vec<u32> {
        self.eval_speaker_ids.clone().unwrap_or_else(|| {
            let start = self.n_train_speakers as u32;
            (start..start + self.n_eval_speakers as u32).collect()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let train = self.train_ids();
        let eval = self.eval_ids();
        if let Some(id) = eval.iter().find(|id| train.contains(id)) {
            return Err(Error::config(format!(
                "speaker {id} is in both the train and eval pools"
            )));
        }
        for (name, ids) in [("train", &train), ("eval", &eval)] {
            for (i, a) in ids.iter().enumerate() {
                if ids[i + 1..].contains(a) {
                    return Err(Error::config(format!("duplicate {name} speaker id {a}")));
                }
            }
        }
        let k = self.speakers_per_mixture;
        if k == 0 {
            return Err(Error::config("speakers_per_mixture must be at least 1"));
        }
        if (self.n_train > 0 && train.len() < k) || (self.n_eval > 0 && eval.len() < k) {
            return Err(Error::config(format!(
                "each pool needs at least {k} speakers"
            )));
        }
        if self.mics == 0 {
            return Err(Error::config("mics must be at least 1"));
        }
        if !(self.utterance_s > 0.0) || self.sample_rate == 0 {
            return Err(Error::config("utterance length and sample rate must be positive"));
        }
        if self.snr_db.0 > self.snr_db.1 || self.reverb_strength.0 > self.reverb_strength.1 {
            return Err(Error::config("ranges must be ordered (low, high)"));
        }
        if !(0.0..=1.0).contains(&self.reverb_strength.0) || !(0.0..=1.0).contains(&self.reverb_strength.1) {
            return Err(Error::config("reverb strength must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.similar_pair_fraction) {
            return Err(Error::config("similar_pair_fraction must lie in [0, 1]"));
        }
        if self.harmonics < super::MIN_HARMONICS {
            return Err(Error::config("too few harmonics"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    /// Multichannel mixture.
    pub mixture_path: String,
    /// Reverberant multichannel image of each source.
    pub source_paths: Vec<String>,
    /// Dry sources; the training targets.
    pub clean_paths: Vec<String>,
    pub speaker_ids: Vec<u32>,
    pub snr_db: f64,
    pub condition_tag: ConditionTag,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRecord {
    pub split: Split,
    #[serde(flatten)]
    pub speaker: SyntheticSpeaker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentRow {
    pub speaker_id: u32,
    pub split: Split,
    pub paths: Vec<String>,
}

/// A built dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub spec: DatasetSpec,
    pub speakers: Vec<SpeakerRecord>,
    pub train: Vec<ManifestRow>,
    pub eval: Vec<ManifestRow>,
    pub enrollment: Vec<EnrollmentRow>,
}

/// A manifest row with its audio loaded.
#[derive(Clone, Debug)]
pub struct LoadedExample {
    pub row: ManifestRow,
    pub mixture: MultiChannelWaveform,
    pub clean_sources: Vec<Waveform>,
}

/// Condition of a K-speaker mixture: similar if any pair is similar.
pub fn condition_for(speakers: &[&SyntheticSpeaker], similar_ratio: f64) -> ConditionTag {
    for (i, a) in speakers.iter().enumerate() {
        for b in &speakers[i + 1..] {
            if ConditionTag::for_f0s(a.f0, b.f0, similar_ratio) == ConditionTag::SimilarPair {
                return ConditionTag::SimilarPair;
            }
        }
    }
    ConditionTag::DissimilarPair
}

/// All size-`k` index combinations of `0..n`, lexicographic.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        let Some(i) = (0..k).rev().find(|&i| c[i] != i + n - k) else {
            return out;
        };
        c[i] += 1;
        for j in i + 1..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

fn rel(path: &Path, root: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let f = fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

fn write_json_pretty<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Both speaker pools, eval pool placed under the separation rule against
/// the train pool.
pub fn speaker_pools(spec: &DatasetSpec) -> Result<(Vec<SyntheticSpeaker>, Vec<SyntheticSpeaker>)> {
    let train = sample_speaker_pool(&spec.train_ids(), spec.harmonics, spec.seed, &[])?;
    let eval = sample_speaker_pool(
        &spec.eval_ids(),
        spec.harmonics,
        derive_seed(spec.seed, STREAM_EVAL_POOL, 0),
        &train,
    )?;
    Ok((train, eval))
}

/// Generates one mixture from `pool` for manifest row `index` of `split`.
fn generate_example(
    spec: &DatasetSpec,
    pool: &[SyntheticSpeaker],
    groups: &(Vec<Vec<usize>>, Vec<Vec<usize>>),
    seed: u64,
) -> Result<super::MixtureExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (similar, dissimilar) = groups;
    let want_similar = rng.random_bool(spec.similar_pair_fraction);
    let group = match (want_similar, similar.is_empty(), dissimilar.is_empty()) {
        (true, false, _) | (false, _, true) => similar.choose(&mut rng),
        _ => dissimilar.choose(&mut rng),
    }
    .ok_or_else(|| Error::config("speaker pool too small"))?;
    let chosen: Vec<&SyntheticSpeaker> = group.iter().map(|&i| &pool[i]).collect();

    let snr = rng.random_range(spec.snr_db.0..=spec.snr_db.1);
    let sources = chosen
        .iter()
        .enumerate()
        .map(|(k, s)| synth_utterance(s, spec.utterance_s, derive_seed(seed, 0x50, k as u64), spec.sample_rate))
        .collect::<Result<Vec<_>>>()?;
    let rirs: Vec<_> = (0..chosen.len())
        .map(|k| {
            let strength = rng.random_range(spec.reverb_strength.0..=spec.reverb_strength.1);
            make_rir_for(spec.mics, derive_seed(seed, 0x51, k as u64), strength)
        })
        .collect();
    let ex = mix(&sources, &rirs, derive_seed(seed, 0x52, 0), snr)?;
    let tag = condition_for(&chosen, spec.similar_f0_ratio);
    ex.labeled(chosen.iter().map(|s| s.speaker_id).collect(), tag)
}

fn build_split(
    spec: &DatasetSpec,
    root: &Path,
    split: Split,
    pool: &[SyntheticSpeaker],
    n: usize,
) -> Result<Vec<ManifestRow>> {
    let name = match split {
        Split::Train => "train",
        Split::Eval => "eval",
    };
    let dir = root.join("wav").join(name);
    fs::create_dir_all(&dir)?;
    let mut similar = Vec::new();
    let mut dissimilar = Vec::new();
    for c in combinations(pool.len(), spec.speakers_per_mixture) {
        let members: Vec<&SyntheticSpeaker> = c.iter().map(|&i| &pool[i]).collect();
        match condition_for(&members, spec.similar_f0_ratio) {
            ConditionTag::SimilarPair => similar.push(c),
            ConditionTag::DissimilarPair => dissimilar.push(c),
        }
    }
    let groups = (similar, dissimilar);
    let stream = STREAM_MIX * 16 + split as u64;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let seed = derive_seed(spec.seed, stream, i as u64);
        let ex = generate_example(spec, pool, &groups, seed)?;
        let id = format!("{name}-{i:05}");
        let mix_path = dir.join(format!("{id}_mix.wav"));
        write_wav(&mix_path, &ex.mixture, WavEncoding::Float32)?;
        let mut source_paths = Vec::new();
        let mut clean_paths = Vec::new();
        for (k, (rev, clean)) in ex.reverberant_sources.iter().zip(&ex.clean_sources).enumerate() {
            let p = dir.join(format!("{id}_s{k}_rev.wav"));
            write_wav(&p, rev, WavEncoding::Float32)?;
            source_paths.push(rel(&p, root));
            let p = dir.join(format!("{id}_s{k}.wav"));
            write_wav(&p, &MultiChannelWaveform::mono(clean.clone()), WavEncoding::Float32)?;
            clean_paths.push(rel(&p, root));
        }
        rows.push(ManifestRow {
            id,
            mixture_path: rel(&mix_path, root),
            source_paths,
            clean_paths,
            speaker_ids: ex.speaker_ids.clone(),
            snr_db: ex.noise_snr_db,
            condition_tag: ex.condition_tag,
            seed,
        });
    }
    Ok(rows)
}

fn build_enrollment(
    spec: &DatasetSpec,
    root: &Path,
    pools: &[(Split, &[SyntheticSpeaker])],
) -> Result<Vec<EnrollmentRow>> {
    let dir = root.join("wav").join("enroll");
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    for &(split, pool) in pools {
        for spk in pool {
            let mut paths = Vec::with_capacity(spec.enroll_per_speaker);
            for j in 0..spec.enroll_per_speaker {
                let seed = derive_seed(spec.seed, STREAM_ENROLL, ((spk.speaker_id as u64) << 16) | j as u64);
                let utt = synth_utterance(spk, spec.utterance_s, seed, spec.sample_rate)?;
                let p = dir.join(format!("spk{:04}_{j:02}.wav", spk.speaker_id));
                write_wav(&p, &MultiChannelWaveform::mono(utt), WavEncoding::Float32)?;
                paths.push(rel(&p, root));
            }
            rows.push(EnrollmentRow {
                speaker_id: spk.speaker_id,
                split,
                paths,
            });
        }
    }
    Ok(rows)
}

/// Generates every WAV and manifest of `spec` under `out_dir`.
pub fn build_dataset(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<Dataset> {
    spec.validate()?;
    let root = out_dir.as_ref().to_path_buf();
    fs::create_dir_all(&root)?;
    let (train_pool, eval_pool) = speaker_pools(spec)?;

    let train = build_split(spec, &root, Split::Train, &train_pool, spec.n_train)?;
    let eval = build_split(spec, &root, Split::Eval, &eval_pool, spec.n_eval)?;
    let enrollment = build_enrollment(
        spec,
        &root,
        &[(Split::Train, &train_pool), (Split::Eval, &eval_pool)],
    )?;
    let speakers: Vec<SpeakerRecord> = train_pool
        .into_iter()
        .map(|s| SpeakerRecord { split: Split::Train, speaker: s })
        .chain(eval_pool.into_iter().map(|s| SpeakerRecord { split: Split::Eval, speaker: s }))
        .collect();

    write_json_pretty(&root.join("dataset.json"), spec)?;
    write_json_pretty(&root.join("speakers.json"), &speakers)?;
    write_jsonl(&root.join("train.jsonl"), &train)?;
    write_jsonl(&root.join("eval.jsonl"), &eval)?;
    write_jsonl(&root.join("enroll.jsonl"), &enrollment)?;
    Ok(Dataset {
        root,
        spec: spec.clone(),
        speakers,
        train,
        eval,
        enrollment,
    })
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let spec: DatasetSpec = serde_json::from_str(&fs::read_to_string(root.join("dataset.json"))?)?;
        let speakers: Vec<SpeakerRecord> =
            serde_json::from_str(&fs::read_to_string(root.join("speakers.json"))?)?;
        Ok(Self {
            train: read_jsonl(root.join("train.jsonl"))?,
            eval: read_jsonl(root.join("eval.jsonl"))?,
            enrollment: read_jsonl(root.join("enroll.jsonl"))?,
            root,
            spec,
            speakers,
        })
    }

    pub fn resolve(&self, rel_path: &str) -> PathBuf {
        self.root.join(rel_path)
    }

    pub fn speaker(&self, id: u32) -> Option<&SyntheticSpeaker> {
        self.speakers
            .iter()
            .map(|r| &r.speaker)
            .find(|s| s.speaker_id == id)
    }

    pub fn load_example(&self, row: &ManifestRow) -> Result<LoadedExample> {
        let mixture = read_wav(self.resolve(&row.mixture_path))?;
        let clean_sources = row
            .clean_paths
            .iter()
            .map(|p| Ok(read_wav(self.resolve(p))?.channel(0).clone()))
            .collect::<Result<Vec<_>>>()?;
        if clean_sources.len() != row.speaker_ids.len() {
            return Err(Error::invalid(format!(
                "{}: {} sources for {} speakers",
                row.id,
                clean_sources.len(),
                row.speaker_ids.len()
            )));
        }
        Ok(LoadedExample {
            row: row.clone(),
            mixture,
            clean_sources,
        })
    }

    pub fn load_split(&self, rows: &[ManifestRow]) -> Result<Vec<LoadedExample>> {
        rows.iter().map(|r| self.load_example(r)).collect()
    }

    /// Enrollment utterances of `split`, grouped by speaker in table order.
    pub fn load_enrollment(&self, split: Split) -> Result<Vec<(u32, Vec<Waveform>)>> {
        self.enrollment
            .iter()
            .filter(|r| r.split == split)
            .map(|r| {
                let utts = r
                    .paths
                    .iter()
                    .map(|p| Ok(read_wav(self.resolve(p))?.channel(0).clone()))
                    .collect::<Result<Vec<_>>>()?;
                Ok((r.speaker_id, utts))
            })
            .collect()
    }
}
