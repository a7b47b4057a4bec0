//! Scale-invariant SNR, its improvement over the mixture, and the two
//! training criteria built on it: fixed slot order and brute-force
//! permutation-invariant assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::Waveform;

/// Floor on the residual energy before taking the ratio.
pub const SI_SNR_EPS: f64 = 1e-10;
/// SI-SNR values are clamped to `[-SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB]`.
pub const SI_SNR_CLAMP_DB: f64 = 60.0;
/// Largest speaker count accepted by the exhaustive permutation search.
pub const MAX_PIT_SPEAKERS: usize = 6;

const DB_PER_NEPER_POWER: f64 = 10.0 / std::f64::consts::LN_10;

/// Value of SI-SNR together with its gradient with respect to the estimate.
/// The gradient is identically zero when the value is clamped.
#[derive(Clone, Debug)]
pub struct SiSnrGrad {
    pub value: f64,
    pub clamped: bool,
    pub grad: Vec<f64>,
}

fn check_pair(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference has {}",
            est.len(),
            reference.len()
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

/// Core of the metric on raw slices: project the estimate onto the reference,
/// compare target and residual energies.
fn si_snr_core(est: &[f64], reference: &[f64], want_grad: bool) -> Result<SiSnrGrad> {
    check_pair(est, reference)?;
    let ref_energy = dot(reference, reference);
    if ref_energy <= 0.0 {
        return Err(Error::invalid("reference signal has zero energy"));
    }
    let cross = dot(est, reference);
    let alpha = cross / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let residual: Vec<f64> = est
        .iter()
        .zip(reference)
        .map(|(e, r)| e - alpha * r)
        .collect();
    let residual_energy = dot(&residual, &residual);
    // A floor rather than an additive term keeps the ratio exactly scale-free
    // away from perfect reconstruction.
    let floored = residual_energy < SI_SNR_EPS;
    let raw = DB_PER_NEPER_POWER * (target_energy.ln() - residual_energy.max(SI_SNR_EPS).ln());
    let value = if raw.is_nan() {
        -SI_SNR_CLAMP_DB
    } else {
        raw.clamp(-SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB)
    };
    let clamped = !(raw > -SI_SNR_CLAMP_DB && raw < SI_SNR_CLAMP_DB);
    let grad = if want_grad && !clamped {
        let a = 2.0 * alpha / target_energy;
        let b = if floored { 0.0 } else { 2.0 / residual_energy };
        reference
            .iter()
            .zip(&residual)
            .map(|(r, n)| DB_PER_NEPER_POWER * (a * r - b * n))
            .collect()
    } else {
        vec![0.0; est.len()]
    };
    Ok(SiSnrGrad {
        value,
        clamped,
        grad,
    })
}

/// SI-SNR in dB, computed on the signals as given (no mean removal).
pub fn si_snr_slices(est: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(si_snr_core(est, reference, false)?.value)
}

/// SI-SNR and its gradient with respect to `est`.
pub fn si_snr_with_grad(est: &[f64], reference: &[f64]) -> Result<SiSnrGrad> {
    si_snr_core(est, reference, true)
}

/// Scale-invariant SNR of `est` against `reference`, in dB.
///
/// `10 log10(|s_t|^2 / (|e|^2 + eps))` with `s_t = <est, ref> ref / |ref|^2`
/// and `e = est - s_t`, clamped to +/-60 dB.
pub fn si_snr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_snr_slices(est.samples(), reference.samples())
}

/// SI-SNR after removing the mean of both signals. Invariant to constant
/// offsets of either input.
pub fn si_snr_zero_mean(est: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(est.samples(), reference.samples())?;
    si_snr_slices(
        &remove_mean(est.samples()),
        &remove_mean(reference.samples()),
    )
}

/// SI-SNR of the estimate minus SI-SNR of the unprocessed mixture reference.
pub fn si_snr_improvement(est: &Waveform, reference: &Waveform, mix_ref: &Waveform) -> Result<f64> {
    Ok(si_snr(est, reference)? - si_snr(mix_ref, reference)?)
}

fn check_sets(ests: &[Waveform], refs: &[Waveform]) -> Result<()> {
    if ests.is_empty() {
        return Err(Error::invalid("at least one estimate is required"));
    }
    if ests.len() != refs.len() {
        return Err(Error::Shape(format!(
            "{} estimates for {} references",
            ests.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// Negative mean SI-SNR with estimate `k` scored against reference `k`.
pub fn fixed_order_loss(ests: &[Waveform], refs: &[Waveform]) -> Result<f64> {
    check_sets(ests, refs)?;
    let mut total = 0.0;
    for (e, r) in ests.iter().zip(refs) {
        total += si_snr(e, r)?;
    }
    Ok(-total / ests.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationAssignment {
    /// `mapping[k]` is the reference index assigned to output slot `k`.
    pub mapping: Vec<usize>,
    /// `per_pair_sisnr[k][j]` = SI-SNR of output `k` against reference `j`.
    pub per_pair_sisnr: Vec<Vec<f64>>,
    pub best_mean_sisnr: f64,
}

impl PermutationAssignment {
    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(k, &j)| k == j)
    }
}

/// Advances `p` to the next permutation in lexicographic order.
/// Returns false once `p` was the last one.
pub(crate) fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Mean matched SI-SNR of an assignment, summed in reference order.
pub(crate) fn assignment_mean(matrix: &[Vec<f64>], mapping: &[usize]) -> f64 {
    let k = mapping.len();
    let mut inverse = vec![0; k];
    for (slot, &j) in mapping.iter().enumerate() {
        inverse[j] = slot;
    }
    let mut total = 0.0;
    for (j, &slot) in inverse.iter().enumerate() {
        total += matrix[slot][j];
    }
    total / k as f64
}

/// Best assignment for a precomputed pairwise matrix; ties go to the
/// lexicographically smallest permutation.
pub fn best_assignment(matrix: Vec<Vec<f64>>) -> Result<PermutationAssignment> {
    let k = matrix.len();
    if k == 0 || k > MAX_PIT_SPEAKERS {
        return Err(Error::invalid(format!(
            "permutation search supports 1..={MAX_PIT_SPEAKERS} speakers, got {k}"
        )));
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_mean = assignment_mean(&matrix, &perm);
    while next_permutation(&mut perm) {
        let m = assignment_mean(&matrix, &perm);
        if m > best_mean {
            best_mean = m;
            best.copy_from_slice(&perm);
        }
    }
    Ok(PermutationAssignment {
        mapping: best,
        per_pair_sisnr: matrix,
        best_mean_sisnr: best_mean,
    })
}

/// Exhaustive search over all K! output-to-reference assignments.
pub fn pit_assign(ests: &[Waveform], refs: &[Waveform]) -> Result<PermutationAssignment> {
    check_sets(ests, refs)?;
    if ests.len() > MAX_PIT_SPEAKERS {
        return Err(Error::invalid(format!(
            "permutation search supports at most {MAX_PIT_SPEAKERS} speakers, got {}",
            ests.len()
        )));
    }
    let matrix = ests
        .iter()
        .map(|e| refs.iter().map(|r| si_snr(e, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    best_assignment(matrix)
}

pub fn pit_loss(ests: &[Waveform], refs: &[Waveform]) -> Result<f64> {
    Ok(-pit_assign(ests, refs)?.best_mean_sisnr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &[f64]) -> Waveform {
        Waveform::new(s.to_vec(), 8000).unwrap()
    }

    #[test]
    fn perfect_estimate_hits_upper_clamp() {
        let r = w(&[0.3, -0.2, 0.9, 0.1]);
        assert_eq!(si_snr(&r, &r).unwrap(), 60.0);
    }

    #[test]
    fn orthogonal_estimate_hits_lower_clamp() {
        assert_eq!(si_snr(&w(&[1.0, -1.0]), &w(&[1.0, 1.0])).unwrap(), -60.0);
    }

    #[test]
    fn hand_derived_zero_db_case() {
        // s_target = [0.5, -0.5], e_noise = [0.5, 0.5]: equal energies.
        assert_eq!(si_snr(&w(&[1.0, 0.0]), &w(&[1.0, -1.0])).unwrap(), 0.0);
    }

    #[test]
    fn zero_reference_and_length_mismatch_are_errors() {
        assert!(si_snr(&w(&[1.0, 2.0]), &w(&[0.0, 0.0])).is_err());
        assert!(si_snr(&w(&[1.0, 2.0]), &w(&[1.0, 2.0, 3.0])).is_err());
        assert!(si_snr_zero_mean(&w(&[1.0, 2.0]), &w(&[3.0, 3.0])).is_err());
    }

    #[test]
    fn improvement_cases() {
        let r = w(&[0.5, -0.1, 0.3, 0.8, -0.6]);
        let m = w(&[0.9, 0.2, -0.3, 0.4, -0.1]);
        assert_eq!(si_snr_improvement(&m, &r, &m).unwrap(), 0.0);
        let expected = 60.0 - si_snr(&m, &r).unwrap();
        assert_eq!(si_snr_improvement(&r, &r, &m).unwrap(), expected);
    }

    #[test]
    fn fixed_order_cases() {
        let a = w(&[0.5, -0.1, 0.3, 0.8]);
        let b = w(&[-0.2, 0.7, 0.1, 0.4]);
        let refs = vec![a.clone(), b.clone()];
        assert_eq!(fixed_order_loss(&refs, &refs).unwrap(), -60.0);
        let crossed = vec![b.clone(), a.clone()];
        let want = -(si_snr(&b, &a).unwrap() + si_snr(&a, &b).unwrap()) / 2.0;
        assert_eq!(fixed_order_loss(&crossed, &refs).unwrap(), want);
        // swapping both sides together keeps the set of pairs
        let e = vec![w(&[0.1, 0.2, 0.3, 0.5]), w(&[0.4, -0.3, 0.2, 0.0])];
        let e_sw = vec![e[1].clone(), e[0].clone()];
        let l1 = fixed_order_loss(&e, &refs).unwrap();
        let l2 = fixed_order_loss(&e_sw, &crossed).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn pit_identity_and_swap() {
        let a = w(&[0.5, -0.1, 0.3, 0.8]);
        let b = w(&[-0.2, 0.7, 0.1, 0.4]);
        let refs = vec![a.clone(), b.clone()];
        assert_eq!(pit_assign(&refs, &refs).unwrap().mapping, vec![0, 1]);
        let swapped = vec![b, a];
        let pa = pit_assign(&swapped, &refs).unwrap();
        assert_eq!(pa.mapping, vec![1, 0]);
        assert_eq!(pit_loss(&swapped, &refs).unwrap(), fixed_order_loss(&refs, &refs).unwrap());
        assert_eq!(pit_loss(&refs, &refs).unwrap(), fixed_order_loss(&refs, &refs).unwrap());
    }

    #[test]
    fn pit_rejects_too_many_speakers() {
        let x: Vec<Waveform> = (0..7).map(|i| w(&[1.0, i as f64])).collect();
        assert!(pit_assign(&x, &x).is_err());
    }

    #[test]
    fn permutations_are_lexicographic() {
        let mut p = vec![0, 1, 2];
        let mut all = vec![p.clone()];
        while next_permutation(&mut p) {
            all.push(p.clone());
        }
        assert_eq!(
            all,
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
    }

    #[test]
    fn ties_prefer_smallest_permutation() {
        let pa = best_assignment(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(pa.mapping, vec![0, 1]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let est = [0.3, -0.7, 0.2, 0.9, -0.1, 0.4];
        let r = [0.5, -0.4, 0.1, 0.6, 0.2, 0.3];
        let g = si_snr_with_grad(&est, &r).unwrap();
        assert!(!g.clamped);
        let h = 1e-6;
        for i in 0..est.len() {
            let mut p = est;
            let mut m = est;
            p[i] += h;
            m[i] -= h;
            let fd = (si_snr_slices(&p, &r).unwrap() - si_snr_slices(&m, &r).unwrap()) / (2.0 * h);
            assert!((fd - g.grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g.grad[i]);
        }
    }
}
