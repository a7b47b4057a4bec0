use mcx::objectives::{fixed_order_loss, pit_assign, pit_loss, si_snr, si_snr_zero_mean};
use mcx::signals::Waveform;
use proptest::prelude::*;

fn wave(s: Vec<f64>) -> Waveform {
    Waveform::new(s, 8000).unwrap()
}

fn unclamped(v: f64) -> bool {
    v.abs() < 59.9
}

fn signals(k: usize, n: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let sig = prop::collection::vec(-1.0f64..1.0, n);
    (
        prop::collection::vec(sig.clone(), k),
        prop::collection::vec(sig, k),
    )
}

fn waves(v: Vec<Vec<f64>>) -> Vec<Waveform> {
    v.into_iter().map(wave).collect()
}

#[test]
fn hand_derived_cases() {
    assert_eq!(si_snr(&wave(vec![1.0, 0.0]), &wave(vec![1.0, -1.0])).unwrap(), 0.0);
    assert_eq!(si_snr(&wave(vec![1.0, -1.0]), &wave(vec![1.0, 1.0])).unwrap(), -60.0);
}

proptest! {
    #[test]
    fn scale_invariance(est in prop::collection::vec(-1.0f64..1.0, 64), r in prop::collection::vec(-1.0f64..1.0, 64)) {
        let e = wave(est);
        let r = wave(r);
        let base = si_snr(&e, &r).unwrap();
        for a in [0.1, 10.0] {
            let v = si_snr(&e.scaled(a).unwrap(), &r).unwrap();
            if unclamped(base) && unclamped(v) {
                prop_assert!((v - base).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn zero_mean_variant_ignores_offsets(est in prop::collection::vec(-1.0f64..1.0, 64), r in prop::collection::vec(-1.0f64..1.0, 64), c in -2.0f64..2.0) {
        let e = wave(est.clone());
        let shifted = wave(est.iter().map(|v| v + c).collect());
        let r = wave(r);
        let a = si_snr_zero_mean(&e, &r).unwrap();
        let b = si_snr_zero_mean(&shifted, &r).unwrap();
        if unclamped(a) {
            prop_assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn pit_is_the_best_fixed_order((e, r) in (2usize..=3).prop_flat_map(|k| signals(k, 32))) {
        let ests = waves(e);
        let refs = waves(r);
        let a = pit_assign(&ests, &refs).unwrap();
        // Reorder outputs so that slot j holds the output assigned to reference j.
        let mut reordered = ests.clone();
        for (slot, &j) in a.mapping.iter().enumerate() {
            reordered[j] = ests[slot].clone();
        }
        let pit = pit_loss(&ests, &refs).unwrap();
        prop_assert_eq!(pit, fixed_order_loss(&reordered, &refs).unwrap());
        prop_assert!(pit <= fixed_order_loss(&ests, &refs).unwrap());
    }

    #[test]
    fn assignment_follows_output_permutation((e, r) in signals(3, 32)) {
        let ests = waves(e);
        let refs = waves(r);
        let a = pit_assign(&ests, &refs).unwrap();
        let sigma = [2usize, 0, 1];
        let permuted: Vec<Waveform> = sigma.iter().map(|&s| ests[s].clone()).collect();
        let b = pit_assign(&permuted, &refs).unwrap();
        let mut sorted = a.per_pair_sisnr.iter().flatten().copied().collect::<Vec<_>>();
        sorted.sort_by(f64::total_cmp);
        // Only tie-free instances carry a unique optimum.
        let tie_free = sorted.windows(2).all(|w| w[1] - w[0] > 1e-9);
        if tie_free {
            for (k, &s) in sigma.iter().enumerate() {
                prop_assert_eq!(b.mapping[k], a.mapping[s]);
            }
        }
    }
}
