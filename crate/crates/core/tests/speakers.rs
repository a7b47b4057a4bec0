use mcx::mixsim::{sample_speaker_pool, synth_utterance};
use mcx::signals::Waveform;
use mcx::speakers::{
    cosine_margin, train_speaker_encoder, EncoderConfig, EncoderTrainConfig, EnrollmentSet,
    SpeakerEmbedding,
};

fn corpus(ids: &[u32], utts: usize, seed: u64) -> Vec<(u32, Vec<Waveform>)> {
    let pool = sample_speaker_pool(ids, 8, seed, &[]).unwrap();
    pool.iter()
        .map(|s| {
            let u = (0..utts)
                .map(|j| synth_utterance(s, 1.0, seed * 1000 + j as u64, 8000).unwrap())
                .collect();
            (s.speaker_id, u)
        })
        .collect()
}

#[test]
fn eight_speakers_are_classified_on_held_out_utterances() {
    let data = corpus(&(0..8).collect::<Vec<_>>(), 20, 3);
    let (_, report) =
        train_speaker_encoder(&data, EncoderConfig::default(), &EncoderTrainConfig::default()).unwrap();
    assert!(report.held_out_segments > 0);
    assert!(
        report.held_out_accuracy > 0.9,
        "held-out accuracy {}",
        report.held_out_accuracy
    );
}

#[test]
fn unseen_speakers_separate_by_cosine() {
    let train = corpus(&(0..8).collect::<Vec<_>>(), 20, 5);
    let (enc, _) =
        train_speaker_encoder(&train, EncoderConfig::default(), &EncoderTrainConfig::default()).unwrap();
    let unseen = corpus(&(100..106).collect::<Vec<_>>(), 4, 6);
    let by_speaker: Vec<(u32, Vec<SpeakerEmbedding>)> = unseen
        .iter()
        .map(|(id, u)| (*id, u.iter().map(|w| enc.embed_utterance(w).unwrap()).collect()))
        .collect();
    let (same, cross) = cosine_margin(&by_speaker);
    assert!(same - cross > 0.1, "same {same:.3} cross {cross:.3}");

    let set = EnrollmentSet::new(unseen[0].0, unseen[0].1.clone()).unwrap();
    let g = enc.global_embedding(&set, Some(2), 1).unwrap();
    assert_eq!(g.n_utterances_averaged(), 2);
    assert!((g.norm() - 1.0).abs() < 1e-12);
    assert_eq!(g, enc.global_embedding(&set, Some(2), 1).unwrap());
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let data = corpus(&[0, 1], 3, 7);
    let hp = EncoderTrainConfig {
        epochs: 0,
        ..EncoderTrainConfig::default()
    };
    let (a, report) = train_speaker_encoder(&data, EncoderConfig::default(), &hp).unwrap();
    let (b, _) = train_speaker_encoder(&data, EncoderConfig::default(), &hp).unwrap();
    assert!(report.epoch_losses.is_empty());
    assert_eq!(a.params, b.params);
}

#[test]
fn quiet_segments_are_skipped() {
    let cfg = EncoderConfig::default();
    let mut x = vec![0.5; 3 * cfg.segment_hop + cfg.segment];
    x[cfg.segment_hop + 200..2 * cfg.segment_hop].iter_mut().for_each(|v| *v = 0.0);
    let all = cfg.segment_starts(x.len());
    assert_eq!(all.len(), 4);
    let active = cfg.active_segment_starts(&x);
    assert!(active.len() < all.len() && active.contains(&0));
    assert_eq!(cfg.active_segment_starts(&vec![0.0; x.len()]), all);
}
