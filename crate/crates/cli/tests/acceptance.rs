//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! `MCX_ACCEPTANCE_ONLY=1,3` restricts the run to the listed criterion groups.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mcx::eval::{self, EvalReport};
use mcx::mixsim::dataset::Dataset;
use mcx::mixsim::{build_dataset, DatasetSpec};
use mcx::model::layers::{tcn_block_layout, u_conv_block_layout};
use mcx::model::{forward, init_params, speaker_stack, tcn_block, u_conv_block, Conditioning, FeatureMap, ModelConfig, ParameterSet};
use mcx::objectives::{fixed_order_loss, pit_assign, pit_loss, si_snr};
use mcx::signals::{MultiChannelWaveform, Waveform};
use mcx::speakers::{EmbeddingCache, SpeakerEmbedding};
use mcx::training::{self, item_loss, LossMode, RunOutputs, TrainConfig, TrainItem, TrainState};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

struct Suite {
    outcomes: Vec<Outcome>,
}

impl Suite {
    fn record(&mut self, id: &'static str, pass: bool, detail: String) {
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.outcomes.push(Outcome { id, pass, detail });
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn wave(v: Vec<f64>) -> Waveform {
    Waveform::new(v, 8000).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---- 1. metric correctness --------------------------------------------------

/// All permutations of `0..k` by Heap's algorithm (independent of the crate's
/// lexicographic enumerator).
fn heap_permutations(k: usize) -> Vec<Vec<usize>> {
    fn go(n: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n == 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..n - 1 {
            go(n - 1, a, out);
            if n % 2 == 0 {
                a.swap(i, n - 1);
            } else {
                a.swap(0, n - 1);
            }
        }
        go(n - 1, a, out);
    }
    let mut out = Vec::new();
    go(k, &mut (0..k).collect(), &mut out);
    out
}

fn criterion_1(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let est = wave(gaussian(&mut rng, 256));
        let r = wave(gaussian(&mut rng, 256));
        let base = si_snr(&est, &r).unwrap();
        for a in [0.1, 1.0, 10.0] {
            let v = si_snr(&est.scaled(a).unwrap(), &r).unwrap();
            worst = worst.max((v - base).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    s.record(
        "1.1 SI-SNR scale invariance",
        worst < 1e-4 && secs < 5.0,
        format!("max drift {worst:.2e} dB over 1000 pairs x 3 gains in {secs:.2} s (limits 1e-4 dB, 5 s)"),
    );

    let v = si_snr(&wave(vec![1.0, 0.0]), &wave(vec![1.0, -1.0])).unwrap();
    s.record("1.2 hand-derived SI-SNR case", v == 0.0, format!("si_snr([1,0], [1,-1]) = {v} dB"));

    let mut agree = 0;
    for i in 0..500 {
        let k = 2 + i % 2;
        let ests: Vec<Waveform> = (0..k).map(|_| wave(gaussian(&mut rng, 64))).collect();
        let refs: Vec<Waveform> = (0..k).map(|_| wave(gaussian(&mut rng, 64))).collect();
        let m: Vec<Vec<f64>> = ests
            .iter()
            .map(|e| refs.iter().map(|r| si_snr(e, r).unwrap()).collect())
            .collect();
        let oracle = heap_permutations(k)
            .into_iter()
            .max_by(|a, b| {
                let sa: f64 = a.iter().enumerate().map(|(s, &j)| m[s][j]).sum();
                let sb: f64 = b.iter().enumerate().map(|(s, &j)| m[s][j]).sum();
                sa.total_cmp(&sb)
            })
            .unwrap();
        if pit_assign(&ests, &refs).unwrap().mapping == oracle {
            agree += 1;
        }
    }
    s.record(
        "1.3 PIT assignment vs brute-force oracle",
        agree == 500,
        format!("{agree}/500 instances agree (K in {{2,3}})"),
    );

    let mut violations = 0;
    for i in 0..1000 {
        let k = 2 + i % 2;
        let ests: Vec<Waveform> = (0..k).map(|_| wave(gaussian(&mut rng, 64))).collect();
        let refs: Vec<Waveform> = (0..k).map(|_| wave(gaussian(&mut rng, 64))).collect();
        if pit_loss(&ests, &refs).unwrap() > fixed_order_loss(&ests, &refs).unwrap() {
            violations += 1;
        }
    }
    s.record(
        "1.4 PIT loss <= fixed-order loss",
        violations == 0,
        format!("{violations} violations in 1000 instances"),
    );
}

// ---- 2. model structure ------------------------------------------------------

fn mixture(rng: &mut ChaCha8Rng, len: usize) -> MultiChannelWaveform {
    MultiChannelWaveform::new((0..2).map(|_| wave(gaussian(rng, len).iter().map(|v| 0.3 * v).collect())).collect()).unwrap()
}

fn random_embeddings(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Vec<SpeakerEmbedding> {
    (0..cfg.speakers)
        .map(|k| SpeakerEmbedding::new(gaussian(rng, cfg.embedding_dim), Some(k as u32), 1).unwrap())
        .collect()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_2(s: &mut Suite) {
    let tiny = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let mut shape_ok = true;
    for cond in [Conditioning::None, Conditioning::Concat, Conditioning::Multiply, Conditioning::Split] {
        let cfg = tiny.clone().with_conditioning(cond);
        let p = init_params::<f64>(&cfg, 3).unwrap();
        let embs = random_embeddings(&mut rng, &cfg);
        for len in [200, 333, 1600] {
            let out = forward(&p, &cfg, &mixture(&mut rng, len), cond.is_conditioned().then_some(embs.as_slice())).unwrap();
            shape_ok &= out.len() == cfg.speakers && out.iter().all(|w| w.len() == len);
        }
    }
    let x = FeatureMap::new(Array2::from_shape_fn((tiny.channels, 37), |_| rng.random_range(-1.0..1.0))).unwrap();
    let mut tp = ParameterSet::<f64>::init(&tcn_block_layout("t", tiny.channels, tiny.expanded_channels), 4);
    tp.get_mut("t.contract.w").unwrap().fill(0.0);
    let mut up = ParameterSet::<f64>::init(&u_conv_block_layout("u", tiny.channels, tiny.expanded_channels, tiny.depth), 5);
    up.get_mut("u.contract.w").unwrap().fill(0.0);
    let tcn_err = max_abs_diff(tcn_block(&tp, "t", &x, 2).unwrap().values(), x.values());
    let u_err = max_abs_diff(u_conv_block(&up, "u", &x, tiny.depth).unwrap().values(), x.values());
    s.record(
        "2.1 shape contract and residual identity",
        shape_ok && tcn_err == 0.0 && u_err == 0.0,
        format!("lengths {{200,333,1600}} x 4 modes preserved: {shape_ok}; zero-branch error tcn {tcn_err:e}, u-block {u_err:e}"),
    );

    let start = Instant::now();
    let mut params = init_params::<f64>(&tiny, 21).unwrap();
    for t in params.tensors_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-0.05..0.05));
    }
    let item = TrainItem {
        mixture: mixture(&mut rng, 200),
        targets: (0..2).map(|_| wave(gaussian(&mut rng, 200))).collect(),
        embeddings: Some(random_embeddings(&mut rng, &tiny)),
    };
    let (_, grads) = item_loss(&params, &tiny, &item, LossMode::FixedOrder, true).unwrap();
    let grads = grads.unwrap();
    let h = 1e-4;
    let mut good = 0;
    for _ in 0..200 {
        let ti = rng.random_range(0..params.len());
        let (r, c) = params.tensors()[ti].dim();
        let idx = (rng.random_range(0..r), rng.random_range(0..c));
        let orig = params.tensors()[ti][idx];
        params.tensors_mut()[ti][idx] = orig + h;
        let up = item_loss(&params, &tiny, &item, LossMode::FixedOrder, false).unwrap().0;
        params.tensors_mut()[ti][idx] = orig - h;
        let down = item_loss(&params, &tiny, &item, LossMode::FixedOrder, false).unwrap().0;
        params.tensors_mut()[ti][idx] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = grads[ti][idx];
        if (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-3 {
            good += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    s.record(
        "2.2 full-pipeline gradient check",
        good >= 198 && secs < 120.0,
        format!("{good}/200 coordinates within 1e-3 relative error in {secs:.1} s (need 198, 120 s)"),
    );

    let p = init_params::<f64>(&tiny, 6).unwrap();
    let y = FeatureMap::new(Array2::from_shape_fn((tiny.rep_dim(), 50), |_| rng.random_range(0.0..1.0))).unwrap();
    let zeros = vec![SpeakerEmbedding::zeros(tiny.embedding_dim).unwrap(); tiny.speakers];
    let out = speaker_stack(&p, &tiny, &y, &zeros).unwrap();
    let peak = out.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    s.record(
        "2.3 zero embeddings silence the speaker stack",
        peak == 0.0,
        format!("max |output| = {peak:e}"),
    );
}

// ---- 3. training behaviour ---------------------------------------------------

fn criterion_3(s: &mut Suite, work: &Path) {
    let spec = DatasetSpec {
        n_train: 20,
        n_eval: 4,
        seed: 1,
        ..DatasetSpec::default()
    };
    let ds = build_dataset(&spec, work.join("overfit-data")).unwrap();
    let examples = ds.load_split(&ds.train).unwrap();
    let cfg = ModelConfig::desk().with_conditioning(Conditioning::Split);
    let ids: Vec<u32> = ds.speakers.iter().map(|r| r.speaker.speaker_id).collect();
    let cache = EmbeddingCache::oracle(ids, cfg.embedding_dim).unwrap();
    for (id, mode) in [("3.1 overfit smoke, pit", LossMode::Pit), ("3.2 overfit smoke, fixed_order", LossMode::FixedOrder)] {
        let start = Instant::now();
        let tc = TrainConfig {
            max_epochs: 200,
            loss_mode: mode,
            validation_fraction: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let ck = training::train(&cfg, &tc, &examples, Some(&cache), &RunOutputs::default()).unwrap();
        let rep = eval::evaluate(&ck.best_params, &cfg, &examples, Some(&cache), &Default::default()).unwrap();
        let fixed = rep.mean_sisnri_fixed_order.unwrap();
        let score = match mode {
            LossMode::Pit => rep.mean_sisnri_oracle_perm,
            LossMode::FixedOrder => fixed,
        };
        let mins = start.elapsed().as_secs_f64() / 60.0;
        s.record(
            id,
            score > 5.0 && mins < 15.0,
            format!(
                "training-set SI-SNRi {score:.2} dB (oracle {:.2}, fixed {fixed:.2}) after 200 epochs in {mins:.1} min (need > 5 dB, < 15 min)",
                rep.mean_sisnri_oracle_perm
            ),
        );
    }

    // Halving happens once `patience` epochs pass without improvement.
    let traces: [(&[f64], usize); 4] = [
        (&[5.0, 5.0, 5.0, 5.0], 1),
        (&[5.0, 4.0, 3.0, 2.0, 1.0], 0),
        (&[5.0, 5.0, 5.0, 4.0, 4.0, 4.0, 4.0], 1),
        (&[3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0], 3),
    ];
    let mut ok = true;
    let mut seen = Vec::new();
    for (trace, expected) in traces {
        let mut st = TrainState::new(1e-3);
        for &v in trace {
            st.record_validation(v, 3, 0.5);
        }
        let lr_ok = (st.current_lr - 1e-3 * 0.5f64.powi(expected as i32)).abs() < 1e-18;
        ok &= st.halvings == expected && lr_ok;
        seen.push(st.halvings);
    }
    s.record(
        "3.3 LR patience-3 halving rule",
        ok,
        format!("halvings per trace {seen:?}, expected [1, 0, 1, 3]"),
    );
}

// ---- 4. desk-scale trends ----------------------------------------------------

fn mcx(out: &Path, config: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_mcx"))
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .stdout(std::process::Stdio::null())
        .status()
        .expect("failed to launch mcx");
    assert!(status.success(), "mcx {args:?} failed with {status}");
}

/// Desk-scale trend run: 500 training / 100 eval mixtures over 80 / 18 speakers.
const TREND_CONFIG: &str = r#"{
  "dataset": { "n_train": 500, "n_eval": 100, "n_train_speakers": 80, "n_eval_speakers": 18, "seed": 0 },
  "train": { "max_epochs": 15, "lr": 0.003, "batch_size": 4 },
  "matrix": { "seeds": [0, 1, 2], "spatial_ablation": true }
}"#;

fn criterion_4(s: &mut Suite, work: &Path) {
    let dir = work.join("trends");
    std::fs::create_dir_all(&dir).unwrap();
    let config = dir.join("config.json");
    std::fs::write(&config, TREND_CONFIG).unwrap();
    let start = Instant::now();
    for verb in ["simulate", "train-embedder", "embed", "matrix"] {
        mcx(&dir, &config, &[verb]);
    }
    let hours = start.elapsed().as_secs_f64() / 3600.0;
    println!("     trend matrix finished in {hours:.2} h");

    let csv = std::fs::read_to_string(dir.join("matrix/comparison.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let mut cells: BTreeMap<(String, String, String), Vec<Vec<String>>> = BTreeMap::new();
    for line in lines {
        let f: Vec<String> = line.split(',').map(str::to_string).collect();
        let key = (f[col("conditioning")].clone(), f[col("loss_mode")].clone(), f[col("spatial_dim")].clone());
        cells.entry(key).or_default().push(f);
    }
    let s_dim = ModelConfig::desk().spatial_dim.to_string();
    let metric = |cond: &str, loss: &str, sd: &str, name: &str| -> f64 {
        let rows = &cells[&(cond.to_string(), loss.to_string(), sd.to_string())];
        median(rows.iter().map(|r| r[col(name)].parse::<f64>().unwrap()).collect())
    };

    let split_oracle = metric("split", "fixed_order", &s_dim, "mean_sisnri_oracle_perm");
    let none_oracle = metric("none", "pit", &s_dim, "mean_sisnri_oracle_perm");
    s.record(
        "4.1a split oracle SI-SNRi >= unconditioned PIT - 0.3 dB",
        split_oracle >= none_oracle - 0.3,
        format!("3-seed medians: split {split_oracle:.2} dB, none+pit {none_oracle:.2} dB"),
    );

    let split_fixed = metric("split", "fixed_order", &s_dim, "mean_sisnri_fixed_order");
    let concat_fixed = metric("concat", "fixed_order", &s_dim, "mean_sisnri_fixed_order");
    let mult_fixed = metric("multiply", "fixed_order", &s_dim, "mean_sisnri_fixed_order");
    s.record(
        "4.1b split fixed-order SI-SNRi > concat and multiply",
        split_fixed > concat_fixed && split_fixed > mult_fixed,
        format!("3-seed medians: split {split_fixed:.2}, concat {concat_fixed:.2}, multiply {mult_fixed:.2} dB"),
    );

    let agree = metric("split", "fixed_order", &s_dim, "permutation_agreement_rate");
    let gap = split_oracle - split_fixed;
    s.record(
        "4.2 split slot agreement > 0.8 and oracle-fixed gap < 0.5 dB",
        agree > 0.8 && gap < 0.5,
        format!("3-seed medians: agreement {agree:.3}, gap {gap:.2} dB"),
    );

    let mono_oracle = metric("split", "fixed_order", "0", "mean_sisnri_oracle_perm");
    s.record(
        "4.3 two-channel model beats spectral-only by >= 1 dB",
        split_oracle - mono_oracle >= 1.0,
        format!("3-seed medians: S={s_dim} {split_oracle:.2} dB, S=0 {mono_oracle:.2} dB"),
    );

    let similar = metric("split", "fixed_order", &s_dim, "similar_pair_oracle");
    let dissimilar = metric("split", "fixed_order", &s_dim, "dissimilar_pair_oracle");
    s.record(
        "4.4 dissimilar pairs >= similar pairs (split)",
        dissimilar >= similar,
        format!("3-seed medians: dissimilar {dissimilar:.2} dB, similar {similar:.2} dB"),
    );
}

// ---- 5. reproducibility ------------------------------------------------------

const REPRO_CONFIG: &str = r#"{
  "dataset": { "n_train": 6, "n_eval": 3, "n_train_speakers": 6, "n_eval_speakers": 3, "enroll_per_speaker": 3, "utterance_s": 1.0 },
  "model": { "spectral_dim": 8, "spatial_dim": 4, "kernel": 16, "stride": 8, "blocks": 2, "depth": 2,
             "channels": 8, "expanded_channels": 16, "speaker_dim": 8, "embedding_dim": 32, "speakers": 2,
             "mics": 2, "conditioning": "split" },
  "train": { "max_epochs": 2, "loss_mode": "fixed_order", "batch_size": 4 },
  "encoder_train": { "epochs": 2 },
  "matrix": { "seeds": [4], "spatial_ablation": false }
}"#;

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_5(s: &mut Suite, work: &Path) {
    let dir = work.join("repro");
    std::fs::create_dir_all(&dir).unwrap();
    let config = dir.join("config.json");
    std::fs::write(&config, REPRO_CONFIG).unwrap();
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.join(n)).collect();
    for run in &runs {
        let model = run.join("train/split-fixed_order-s4-seed7/best.params");
        let model = model.to_str().unwrap();
        for args in [
            vec!["simulate"],
            vec!["train-embedder"],
            vec!["embed"],
            vec!["--seed", "7", "train"],
            vec!["evaluate", "--model", model],
            vec!["matrix"],
            vec!["report"],
        ] {
            mcx(run, &config, &args);
        }
    }
    let a = files_under(&runs[0]);
    let b = files_under(&runs[1]);
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let checkpoints = a.keys().filter(|k| k.extension().is_some_and(|e| e == "params" || e == "ckpt")).count();
    let reports = a.keys().filter(|k| k.file_name().is_some_and(|n| n == "report.json")).count();
    let manifests = a.keys().filter(|k| k.extension().is_some_and(|e| e == "jsonl")).count();
    s.record(
        "5 byte-identical CLI reruns",
        differing.is_empty() && checkpoints > 0 && reports > 0 && manifests > 0,
        format!(
            "{} files compared ({manifests} manifests, {checkpoints} checkpoints, {reports} reports); differing: {differing:?}",
            a.len()
        ),
    );
    // The evaluated report must parse and carry the split model's fields.
    let report = EvalReport::load(runs[0].join("eval/report.json")).unwrap();
    assert!(report.permutation_agreement_rate.is_some());
    Dataset::open(runs[0].join("data")).unwrap();
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("MCX_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wanted = |g: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == g));
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if work.exists() {
        std::fs::remove_dir_all(&work).unwrap();
    }
    std::fs::create_dir_all(&work).unwrap();

    let mut suite = Suite { outcomes: Vec::new() };
    let start = Instant::now();
    if wanted("1") {
        criterion_1(&mut suite);
    }
    if wanted("2") {
        criterion_2(&mut suite);
    }
    if wanted("3") {
        criterion_3(&mut suite, &work);
    }
    if wanted("5") {
        criterion_5(&mut suite, &work);
    }
    if wanted("4") {
        criterion_4(&mut suite, &work);
    }
    let failed: Vec<&Outcome> = suite.outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {} passed, {} failed in {:.1} min",
        suite.outcomes.len() - failed.len(),
        failed.len(),
        start.elapsed().as_secs_f64() / 60.0
    );
    for o in &failed {
        println!("  failed {}: {}", o.id, o.detail);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
