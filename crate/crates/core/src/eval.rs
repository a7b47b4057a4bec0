//! Evaluation on full utterances, the conditioning-strategy experiment
//! matrix, and report rendering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mixsim::dataset::LoadedExample;
use crate::mixsim::{derive_seed, ConditionTag};
use crate::model::{forward, Conditioning, ModelConfig, ParameterSet};
use crate::objectives::{assignment_mean, best_assignment, si_snr};
use crate::speakers::EmbeddingCache;
use crate::training::{self, slot_order, LossMode, RunOutputs, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub id: String,
    pub condition_tag: ConditionTag,
    /// Slot k scored against the speaker of embedding k. `None` for
    /// unconditioned models, which have no slot binding.
    pub sisnri_fixed_order: Option<f64>,
    pub sisnri_oracle_perm: f64,
    /// Whether the oracle assignment is the identity.
    pub slot_correct: Option<bool>,
    /// Speaker id bound to each output slot.
    pub slot_speakers: Vec<u32>,
    /// `oracle_mapping[k]` is the slot-order reference index output k matched.
    pub oracle_mapping: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition_tag: ConditionTag,
    pub count: usize,
    pub mean_sisnri_fixed_order: Option<f64>,
    pub mean_sisnri_oracle_perm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub conditioning: Conditioning,
    pub mean_sisnri_fixed_order: Option<f64>,
    pub mean_sisnri_oracle_perm: f64,
    pub permutation_agreement_rate: Option<f64>,
    pub per_condition: Vec<ConditionSummary>,
    pub per_example: Vec<ExampleResult>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl EvalReport {
    /// Builds the aggregates from per-example rows and checks the
    /// oracle-dominates-fixed invariant.
    pub fn from_examples(
        fingerprint: String,
        conditioning: Conditioning,
        per_example: Vec<ExampleResult>,
    ) -> Result<Self> {
        if per_example.is_empty() {
            return Err(Error::invalid("a report needs at least one example"));
        }
        let conditioned = conditioning.is_conditioned();
        for r in &per_example {
            if r.sisnri_fixed_order.is_some() != conditioned || r.slot_correct.is_some() != conditioned {
                return Err(Error::invalid(format!(
                    "{}: fixed-order fields must be present exactly for conditioned models",
                    r.id
                )));
            }
            if let Some(f) = r.sisnri_fixed_order {
                if r.sisnri_oracle_perm < f {
                    return Err(Error::Invariant(format!(
                        "{}: oracle SI-SNRi {} below fixed-order {}",
                        r.id, r.sisnri_oracle_perm, f
                    )));
                }
            }
        }
        let fixed_mean = |rows: &[&ExampleResult]| {
            conditioned.then(|| mean(rows.iter().map(|r| r.sisnri_fixed_order.unwrap_or(f64::NAN))))
        };
        let all: Vec<&ExampleResult> = per_example.iter().collect();
        let mut per_condition = Vec::new();
        for tag in [ConditionTag::SimilarPair, ConditionTag::DissimilarPair] {
            let rows: Vec<&ExampleResult> = all.iter().copied().filter(|r| r.condition_tag == tag).collect();
            if rows.is_empty() {
                continue;
            }
            per_condition.push(ConditionSummary {
                condition_tag: tag,
                count: rows.len(),
                mean_sisnri_fixed_order: fixed_mean(&rows),
                mean_sisnri_oracle_perm: mean(rows.iter().map(|r| r.sisnri_oracle_perm)),
            });
        }
        let agreement = conditioned.then(|| {
            all.iter().filter(|r| r.slot_correct == Some(true)).count() as f64 / all.len() as f64
        });
        Ok(Self {
            fingerprint,
            conditioning,
            mean_sisnri_fixed_order: fixed_mean(&all),
            mean_sisnri_oracle_perm: mean(all.iter().map(|r| r.sisnri_oracle_perm)),
            permutation_agreement_rate: agreement,
            per_condition,
            per_example,
        })
    }

    pub fn condition(&self, tag: ConditionTag) -> Option<&ConditionSummary> {
        self.per_condition.iter().find(|c| c.condition_tag == tag)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Scores one example's outputs. `outputs[k]` belongs to slot `k`, whose
/// reference is `refs[k]`; `mix_ref` is the unprocessed reference channel.
pub fn score_example(
    id: &str,
    condition_tag: ConditionTag,
    outputs: &[crate::signals::Waveform],
    refs: &[crate::signals::Waveform],
    mix_ref: &crate::signals::Waveform,
    slot_speakers: Vec<u32>,
    conditioned: bool,
) -> Result<ExampleResult> {
    if outputs.len() != refs.len() {
        return Err(Error::Shape(format!(
            "{id}: {} outputs for {} references",
            outputs.len(),
            refs.len()
        )));
    }
    let matrix = outputs
        .iter()
        .map(|o| refs.iter().map(|r| si_snr(o, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let baseline = mean(
        refs.iter()
            .map(|r| si_snr(mix_ref, r))
            .collect::<Result<Vec<_>>>()?
            .into_iter(),
    );
    let identity: Vec<usize> = (0..refs.len()).collect();
    let fixed = assignment_mean(&matrix, &identity);
    let oracle = best_assignment(matrix)?;
    let slot_correct = oracle.is_identity();
    Ok(ExampleResult {
        id: id.to_string(),
        condition_tag,
        sisnri_fixed_order: conditioned.then_some(fixed - baseline),
        sisnri_oracle_perm: oracle.best_mean_sisnr - baseline,
        slot_correct: conditioned.then_some(slot_correct),
        slot_speakers,
        oracle_mapping: oracle.mapping,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    /// Present the embeddings in a seeded random slot order per example
    /// instead of sorted by speaker id.
    pub shuffle_slots: Option<u64>,
}

/// Identifies a report's inputs: config, parameter values, example ids and
/// embeddings.
pub fn fingerprint(
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    examples: &[LoadedExample],
    cache: Option<&EmbeddingCache>,
    opts: &EvalOptions,
) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    for t in params.tensors() {
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
    }
    for ex in examples {
        h.update(serde_json::to_vec(&ex.row)?);
    }
    if let Some(c) = cache {
        for ex in examples {
            for id in &ex.row.speaker_ids {
                if let Some(e) = c.get(*id) {
                    h.update(serde_json::to_vec(e)?);
                }
            }
        }
    }
    h.update(format!("{:?}", opts.shuffle_slots));
    let digest = h.finalize();
    Ok(digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Runs the model on every full utterance and scores it.
pub fn evaluate(
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    examples: &[LoadedExample],
    cache: Option<&EmbeddingCache>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    params.check_layout(&crate::model::model_layout(cfg))?;
    let conditioned = cfg.conditioning.is_conditioned();
    if conditioned && cache.is_none() {
        return Err(Error::config(format!(
            "{} conditioning needs speaker embeddings",
            cfg.conditioning
        )));
    }
    let mut rows = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let mut order = slot_order(&ex.row.speaker_ids);
        if let Some(seed) = opts.shuffle_slots {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE7A, i as u64)));
        }
        let ids: Vec<u32> = order.iter().map(|&k| ex.row.speaker_ids[k]).collect();
        let refs: Vec<_> = order.iter().map(|&k| ex.clean_sources[k].clone()).collect();
        let embs = match (conditioned, cache) {
            (true, Some(c)) => Some(c.lookup(&ids)?),
            _ => None,
        };
        let outputs = forward(params, cfg, &ex.mixture, embs.as_deref())?;
        rows.push(score_example(
            &ex.row.id,
            ex.row.condition_tag,
            &outputs,
            &refs,
            ex.mixture.channel(0),
            ids,
            conditioned,
        )?);
    }
    EvalReport::from_examples(fingerprint(params, cfg, examples, cache, opts)?, cfg.conditioning, rows)
}

// ---- experiment matrix -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixCell {
    pub conditioning: Conditioning,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Overrides the spatial encoder width (0 gives a spectral-only model).
    #[serde(default)]
    pub spatial_dim: Option<usize>,
}

impl MatrixCell {
    pub fn label(&self, base: &ModelConfig) -> String {
        let s = self.spatial_dim.unwrap_or(base.spatial_dim);
        format!(
            "{}-{}-s{}-seed{}",
            self.conditioning.name(),
            self.loss_mode.name(),
            s,
            self.seed
        )
    }

    /// Row position in the comparison table: separation baseline first,
    /// then concat, multiply, split; spatial ablations last.
    fn rank(&self, base: &ModelConfig) -> (bool, u8, u8, u64) {
        let c = match self.conditioning {
            Conditioning::None => 0,
            Conditioning::Concat => 1,
            Conditioning::Multiply => 2,
            Conditioning::Split => 3,
        };
        let l = match self.loss_mode {
            LossMode::Pit => 0,
            LossMode::FixedOrder => 1,
        };
        let ablated = self.spatial_dim.unwrap_or(base.spatial_dim) != base.spatial_dim;
        (ablated, c, l, self.seed)
    }

    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone().with_conditioning(self.conditioning);
        if let Some(s) = self.spatial_dim {
            cfg.spatial_dim = s;
        }
        cfg
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            loss_mode: self.loss_mode,
            seed: self.seed,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cells: Vec<MatrixCell>,
}

impl MatrixSpec {
    /// The four-way conditioning comparison with shared seeds.
    pub fn conditioning_comparison(model: ModelConfig, train: TrainConfig, seeds: &[u64]) -> Self {
        let mut cells = Vec::new();
        for &seed in seeds {
            for (conditioning, loss_mode) in [
                (Conditioning::None, LossMode::Pit),
                (Conditioning::Concat, LossMode::FixedOrder),
                (Conditioning::Multiply, LossMode::FixedOrder),
                (Conditioning::Split, LossMode::FixedOrder),
            ] {
                cells.push(MatrixCell {
                    conditioning,
                    loss_mode,
                    seed,
                    spatial_dim: None,
                });
            }
        }
        Self { model, train, cells }
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: MatrixCell,
    pub label: String,
    pub dir: PathBuf,
    pub report: EvalReport,
}

/// Data shared by every cell of a matrix run.
pub struct MatrixData<'a> {
    pub train: &'a [LoadedExample],
    pub eval: &'a [LoadedExample],
    /// Embeddings used while training conditioned cells.
    pub train_embeddings: Option<&'a EmbeddingCache>,
    /// Embeddings used while evaluating conditioned cells.
    pub eval_embeddings: Option<&'a EmbeddingCache>,
}

pub const COMPARISON_HEADER: &str = "label,conditioning,loss_mode,spatial_dim,seed,mean_sisnri_oracle_perm,mean_sisnri_fixed_order,permutation_agreement_rate,similar_pair_oracle,dissimilar_pair_oracle,similar_pair_fixed,dissimilar_pair_fixed";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

pub fn comparison_csv(results: &[CellResult], base: &ModelConfig) -> String {
    let mut sorted: Vec<&CellResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.cell.rank(base));
    let mut s = String::from(COMPARISON_HEADER);
    s.push('\n');
    for r in sorted {
        let rep = &r.report;
        let cond = |t: ConditionTag| rep.condition(t);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.4},{},{},{},{},{},{}",
            r.label,
            r.cell.conditioning,
            r.cell.loss_mode,
            r.cell.spatial_dim.unwrap_or(base.spatial_dim),
            r.cell.seed,
            rep.mean_sisnri_oracle_perm,
            opt(rep.mean_sisnri_fixed_order),
            opt(rep.permutation_agreement_rate),
            opt(cond(ConditionTag::SimilarPair).map(|c| c.mean_sisnri_oracle_perm)),
            opt(cond(ConditionTag::DissimilarPair).map(|c| c.mean_sisnri_oracle_perm)),
            opt(cond(ConditionTag::SimilarPair).and_then(|c| c.mean_sisnri_fixed_order)),
            opt(cond(ConditionTag::DissimilarPair).and_then(|c| c.mean_sisnri_fixed_order)),
        );
    }
    s
}

/// Trains and evaluates every cell into `out_dir/<label>/`, then writes
/// `comparison.csv`. A cell whose report already exists is loaded instead
/// of retrained.
pub fn run_experiment_matrix(
    spec: &MatrixSpec,
    data: &MatrixData<'_>,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<CellResult>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut results = Vec::with_capacity(spec.cells.len());
    for cell in &spec.cells {
        let label = cell.label(&spec.model);
        let dir = out_dir.join(&label);
        let report_path = dir.join("report.json");
        let report = if report_path.exists() {
            EvalReport::load(&report_path)?
        } else {
            std::fs::create_dir_all(&dir)?;
            let cfg = cell.model_config(&spec.model);
            let tc = cell.train_config(&spec.train);
            log::info!("matrix cell {label}");
            let outputs = RunOutputs {
                checkpoint: None,
                best: Some(dir.join("best.params")),
                log_csv: Some(dir.join("train_log.csv")),
                dump_dir: Some(dir.clone()),
            };
            let conditioned = cfg.conditioning.is_conditioned();
            let train_embs = data.train_embeddings.filter(|_| conditioned);
            let eval_embs = data.eval_embeddings.filter(|_| conditioned);
            let ck = training::train(&cfg, &tc, data.train, train_embs, &outputs)?;
            let report = evaluate(&ck.best_params, &cfg, data.eval, eval_embs, &EvalOptions::default())?;
            report.save(&report_path)?;
            report
        };
        results.push(CellResult {
            cell: cell.clone(),
            label,
            dir,
            report,
        });
    }
    std::fs::write(out_dir.join("comparison.csv"), comparison_csv(&results, &spec.model))?;
    Ok(results)
}

// ---- rendering ---------------------------------------------------------------

/// Plain-text aggregate table.
pub fn summary_text(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "conditioning:      {}", report.conditioning);
    let _ = writeln!(s, "examples:          {}", report.per_example.len());
    let _ = writeln!(s, "fingerprint:       {}", report.fingerprint);
    let _ = writeln!(s, "SI-SNRi oracle:    {:.2} dB", report.mean_sisnri_oracle_perm);
    let _ = writeln!(
        s,
        "SI-SNRi fixed:     {}",
        report
            .mean_sisnri_fixed_order
            .map_or("n/a".into(), |v| format!("{v:.2} dB"))
    );
    let _ = writeln!(
        s,
        "slot agreement:    {}",
        report
            .permutation_agreement_rate
            .map_or("n/a".into(), |v| format!("{v:.3}"))
    );
    let _ = writeln!(s, "{:<18}{:>6}{:>10}{:>10}", "condition", "n", "oracle", "fixed");
    for c in &report.per_condition {
        let _ = writeln!(
            s,
            "{:<18}{:>6}{:>10.2}{:>10}",
            c.condition_tag.name(),
            c.count,
            c.mean_sisnri_oracle_perm,
            c.mean_sisnri_fixed_order
                .map_or("n/a".into(), |v| format!("{v:.2}"))
        );
    }
    s
}

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a system sans font for chart labels. Charts are drawn without
/// text when none is found.
fn ensure_font() -> bool {
    static FONT: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *FONT.get_or_init(|| {
        for p in FONT_CANDIDATES {
            if let Ok(bytes) = std::fs::read(p) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", plotters::style::FontStyle::Normal, leaked).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Grouped bars of mean SI-SNRi per condition (oracle, and fixed-order
/// when present).
pub fn render_condition_chart(report: &EvalReport, path: &Path) -> Result<()> {
    use plotters::prelude::*;
    let labels = ensure_font();
    let groups: Vec<(String, f64, Option<f64>)> = std::iter::once((
        "all".to_string(),
        report.mean_sisnri_oracle_perm,
        report.mean_sisnri_fixed_order,
    ))
    .chain(report.per_condition.iter().map(|c| {
        (
            c.condition_tag.name().to_string(),
            c.mean_sisnri_oracle_perm,
            c.mean_sisnri_fixed_order,
        )
    }))
    .collect();
    let vals = groups.iter().flat_map(|g| [Some(g.1), g.2]).flatten();
    let (lo, hi) = vals.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let pad = ((hi - lo) * 0.1).max(0.5);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = groups.len() as f64;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if labels {
        builder
            .caption(format!("SI-SNRi by condition ({})", report.conditioning), ("sans-serif", 18))
            .x_label_area_size(32)
            .y_label_area_size(48);
    }
    let mut chart = builder
        .build_cartesian_2d(0.0..n, (lo - pad)..(hi + pad))
        .map_err(plot_err)?;
    if labels {
        let names: Vec<String> = groups.iter().map(|g| g.0.clone()).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(groups.len() * 2 + 1)
            .x_label_formatter(&|x| {
                let i = x.floor() as usize;
                if (x - x.floor() - 0.5).abs() < 0.01 && i < names.len() {
                    names[i].clone()
                } else {
                    String::new()
                }
            })
            .y_desc("dB")
            .draw()
            .map_err(plot_err)?;
    }
    let bars = groups.iter().enumerate().flat_map(|(i, g)| {
        let x = i as f64;
        let mut v = vec![Rectangle::new([(x + 0.1, 0.0), (x + 0.45, g.1)], BLUE.filled())];
        if let Some(f) = g.2 {
            v.push(Rectangle::new([(x + 0.55, 0.0), (x + 0.9, f)], RED.filled()));
        }
        v
    });
    chart.draw_series(bars).map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Histogram of per-example oracle-permutation SI-SNRi in 1 dB bins.
pub fn render_histogram(report: &EvalReport, path: &Path) -> Result<()> {
    use plotters::prelude::*;
    let labels = ensure_font();
    let vals: Vec<f64> = report.per_example.iter().map(|r| r.sisnri_oracle_perm).collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min).floor() as i64;
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max).floor() as i64 + 1;
    let mut counts = vec![0u32; (hi - lo) as usize];
    for v in &vals {
        counts[(v.floor() as i64 - lo) as usize] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(1);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if labels {
        builder
            .caption("per-example SI-SNRi (oracle permutation)", ("sans-serif", 18))
            .x_label_area_size(32)
            .y_label_area_size(40);
    }
    let mut chart = builder
        .build_cartesian_2d(lo as f64..hi as f64, 0u32..top + 1)
        .map_err(plot_err)?;
    if labels {
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_desc("dB")
            .y_desc("examples")
            .draw()
            .map_err(plot_err)?;
    }
    chart
        .draw_series(counts.iter().enumerate().map(|(i, &c)| {
            let x = (lo + i as i64) as f64;
            Rectangle::new([(x + 0.05, 0), (x + 0.95, c)], BLUE.filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `summary.txt`, `conditions.svg` and `histogram.svg` into `dir`
/// and returns the summary text.
pub fn render_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let text = summary_text(report);
    std::fs::write(dir.join("summary.txt"), &text)?;
    render_condition_chart(report, &dir.join("conditions.svg"))?;
    render_histogram(report, &dir.join("histogram.svg"))?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::Waveform;

    fn w(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 8000).unwrap()
    }

    fn refs() -> (Vec<Waveform>, Waveform) {
        let a: Vec<f64> = (0..200).map(|i| (i as f64 * 0.11).sin()).collect();
        let b: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).cos() * 0.5).collect();
        let m: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        (vec![w(a), w(b)], w(m))
    }

    #[test]
    fn perfect_outputs_agree() {
        let (r, m) = refs();
        let e = score_example("x", ConditionTag::DissimilarPair, &r, &r, &m, vec![1, 2], true).unwrap();
        assert_eq!(e.sisnri_fixed_order, Some(e.sisnri_oracle_perm));
        assert_eq!(e.slot_correct, Some(true));
        let rep = EvalReport::from_examples("f".into(), Conditioning::Split, vec![e]).unwrap();
        assert_eq!(rep.permutation_agreement_rate, Some(1.0));
    }

    #[test]
    fn swapped_outputs_lose_slot() {
        let (r, m) = refs();
        let swapped = vec![r[1].clone(), r[0].clone()];
        let e = score_example("x", ConditionTag::SimilarPair, &swapped, &r, &m, vec![1, 2], true).unwrap();
        assert_eq!(e.slot_correct, Some(false));
        assert!(e.sisnri_oracle_perm > e.sisnri_fixed_order.unwrap());
        assert_eq!(e.oracle_mapping, vec![1, 0]);
    }

    #[test]
    fn unconditioned_has_no_fixed_order_fields() {
        let (r, m) = refs();
        let e = score_example("x", ConditionTag::SimilarPair, &r, &r, &m, vec![1, 2], false).unwrap();
        assert!(e.sisnri_fixed_order.is_none() && e.slot_correct.is_none());
        let rep = EvalReport::from_examples("f".into(), Conditioning::None, vec![e.clone()]).unwrap();
        assert!(rep.mean_sisnri_fixed_order.is_none());
        assert!(rep.permutation_agreement_rate.is_none());
        assert!(EvalReport::from_examples("f".into(), Conditioning::Split, vec![e]).is_err());
    }

    #[test]
    fn empty_report_rejected() {
        assert!(EvalReport::from_examples("f".into(), Conditioning::None, vec![]).is_err());
    }

    #[test]
    fn oracle_below_fixed_is_an_invariant_violation() {
        let bad = ExampleResult {
            id: "x".into(),
            condition_tag: ConditionTag::SimilarPair,
            sisnri_fixed_order: Some(3.0),
            sisnri_oracle_perm: 2.0,
            slot_correct: Some(true),
            slot_speakers: vec![0, 1],
            oracle_mapping: vec![0, 1],
        };
        assert!(matches!(
            EvalReport::from_examples("f".into(), Conditioning::Split, vec![bad]),
            Err(Error::Invariant(_))
        ));
    }

    fn sample_report() -> EvalReport {
        let rows = (0..6)
            .map(|i| ExampleResult {
                id: format!("e{i}"),
                condition_tag: if i % 2 == 0 { ConditionTag::SimilarPair } else { ConditionTag::DissimilarPair },
                sisnri_fixed_order: Some(i as f64),
                sisnri_oracle_perm: i as f64 + 0.5 * (i % 3) as f64,
                slot_correct: Some(i % 3 == 0),
                slot_speakers: vec![0, 1],
                oracle_mapping: vec![0, 1],
            })
            .collect();
        EvalReport::from_examples("f".into(), Conditioning::Split, rows).unwrap()
    }

    #[test]
    fn aggregates_match_rows() {
        let rep = sample_report();
        let n = rep.per_example.len() as f64;
        let oracle: f64 = rep.per_example.iter().map(|r| r.sisnri_oracle_perm).sum::<f64>() / n;
        assert!((rep.mean_sisnri_oracle_perm - oracle).abs() < 1e-12);
        assert_eq!(rep.permutation_agreement_rate, Some(2.0 / 6.0));
        let sim = rep.condition(ConditionTag::SimilarPair).unwrap();
        assert_eq!(sim.count, 3);
        assert!((sim.mean_sisnri_fixed_order.unwrap() - 2.0).abs() < 1e-12);
        let text = summary_text(&rep);
        assert!(text.contains(&format!("{:.2} dB", oracle)));
    }

    #[test]
    fn charts_render_deterministically() {
        let rep = sample_report();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        render_report(&rep, a.path()).unwrap();
        render_report(&rep, b.path()).unwrap();
        for f in ["conditions.svg", "histogram.svg", "summary.txt"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            assert!(!x.is_empty());
            assert!(f.ends_with(".txt") || String::from_utf8_lossy(&x).contains("<svg"));
            assert_eq!(x, std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn comparison_rows_follow_table_order() {
        let base = ModelConfig::desk();
        let spec = MatrixSpec::conditioning_comparison(base.clone(), TrainConfig::default(), &[1]);
        let rep = sample_report();
        let mut results: Vec<CellResult> = spec
            .cells
            .iter()
            .rev()
            .map(|c| CellResult {
                cell: c.clone(),
                label: c.label(&base),
                dir: PathBuf::new(),
                report: rep.clone(),
            })
            .collect();
        results.push(CellResult {
            cell: MatrixCell {
                conditioning: Conditioning::Split,
                loss_mode: LossMode::FixedOrder,
                seed: 1,
                spatial_dim: Some(0),
            },
            label: "ablation".into(),
            dir: PathBuf::new(),
            report: rep,
        });
        let csv = comparison_csv(&results, &base);
        let cond: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(cond, vec!["none", "concat", "multiply", "split", "split"]);
        assert!(csv.lines().last().unwrap().starts_with("ablation"));
    }
}
