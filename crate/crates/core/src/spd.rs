//! Covariance geometry: shrinkage-regularized covariance estimation,
//! arithmetic and geometric (Karcher) means of symmetric positive-definite
//! matrices, and session-wise whitening of trials against those means.
//!
//! Whitening each recording session by the inverse square root of its mean
//! covariance maps every session's average covariance to the identity, which
//! removes most of the inter-subject / inter-session distribution shift
//! before the trials reach the network.

use crate::error::{Error, Result};
use crate::signal::Trial;
use nalgebra::{DMatrix, SymmetricEigen};
use std::collections::BTreeMap;

/// Relative symmetry tolerance accepted by [`SpdMatrix::new`].
const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalue spread beyond which a mean is considered too ill-conditioned
/// to invert for whitening.
const CONDITION_LIMIT: f64 = 1e12;
/// Shrinkage strength relative to the average eigenvalue.
const SHRINKAGE: f64 = 1e-8;

/// A validated symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    /// Row-major dim x dim.
    values: Vec<f64>,
}

impl SpdMatrix {
    /// Validates symmetry (within a small relative tolerance) and strict
    /// positive-definiteness via the eigenvalue spectrum.
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != dim * dim {
            return Err(Error::Validation(format!(
                "{} values do not form a {dim}x{dim} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("matrix contains non-finite values".into()));
        }
        let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..dim {
            for j in i + 1..dim {
                let gap = (values[i * dim + j] - values[j * dim + i]).abs();
                if gap > SYMMETRY_TOL * scale {
                    return Err(Error::Validation(format!(
                        "asymmetry {gap:.3e} at ({i}, {j}) exceeds tolerance"
                    )));
                }
            }
        }
        let m = DMatrix::from_row_slice(dim, dim, &values);
        let min_eig = SymmetricEigen::new(m)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig <= 0.0 {
            return Err(Error::Validation(format!(
                "matrix is not positive definite (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(SpdMatrix { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn identity(dim: usize) -> Self {
        let mut values = vec![0.0; dim * dim];
        for i in 0..dim {
            values[i * dim + i] = 1.0;
        }
        SpdMatrix { dim, values }
    }

    fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.values)
    }

    fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let dim = m.nrows();
        let mut values = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                values.push(m[(i, j)]);
            }
        }
        SpdMatrix { dim, values }
    }
}

/// Spectral decomposition with the eigenvalues mapped through `f` and the
/// result symmetrized against rounding drift.
fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    let out = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

fn eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Inverse square root of an SPD matrix, guarded against ill conditioning.
fn inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (lo, hi) = eigen_range(m);
    if lo.is_nan() || lo <= 0.0 || hi / lo > CONDITION_LIMIT {
        return Err(Error::Alignment(format!(
            "covariance mean too ill-conditioned to whiten (eigenvalues {lo:.3e}..{hi:.3e})"
        )));
    }
    Ok(spectral_map(m, |v| 1.0 / v.sqrt()))
}

/// Sample covariance of one trial: channels are centered, the outer product
/// is averaged over time, and a small multiple of the average eigenvalue is
/// added on the diagonal so downstream inversions stay stable.
pub fn covariance(trial: &Trial) -> Result<SpdMatrix> {
    let (c, t) = (trial.channels, trial.samples);
    if c == 0 || t < 2 {
        return Err(Error::Validation(format!(
            "covariance needs at least 2 samples over 1 channel, got {c}x{t}"
        )));
    }
    let mut centered = trial.data.clone();
    for ch in 0..c {
        let row = &mut centered[ch * t..(ch + 1) * t];
        let mean = row.iter().sum::<f64>() / t as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    let mut cov = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let dot: f64 = centered[i * t..(i + 1) * t]
                .iter()
                .zip(&centered[j * t..(j + 1) * t])
                .map(|(a, b)| a * b)
                .sum();
            let v = dot / t as f64;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }
    let trace: f64 = (0..c).map(|i| cov[i * c + i]).sum();
    let delta = if trace > 0.0 { SHRINKAGE * trace / c as f64 } else { SHRINKAGE };
    for i in 0..c {
        cov[i * c + i] += delta;
    }
    SpdMatrix::new(c, cov)
}

/// Which notion of average to use over a set of SPD matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// Element-wise (Euclidean) average.
    Arithmetic,
    /// Karcher mean under the affine-invariant metric, found by fixed-point
    /// iteration on the tangent space.
    Geometric,
}

/// Mean of SPD matrices. The geometric mode iterates
/// `G <- G^{1/2} exp(mean_i log(G^{-1/2} A_i G^{-1/2})) G^{1/2}`
/// from the arithmetic mean until the tangent-space residual drops below
/// 1e-10, and reports the last iterate if 50 iterations do not get there.
pub fn spd_mean(mats: &[SpdMatrix], mode: MeanMode) -> Result<SpdMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::Parameter("mean of an empty set of matrices".into()))?;
    let dim = first.dim;
    if mats.iter().any(|m| m.dim != dim) {
        return Err(Error::Parameter("matrices in a mean must share dimensions".into()));
    }
    let n = mats.len() as f64;
    let mut acc = vec![0.0; dim * dim];
    for m in mats {
        for (a, v) in acc.iter_mut().zip(&m.values) {
            *a += v / n;
        }
    }
    let arithmetic = SpdMatrix { dim, values: acc };
    if mode == MeanMode::Arithmetic {
        return Ok(arithmetic);
    }

    karcher_mean(mats, &arithmetic, 50, 1e-10)
}

/// The geometric-mean fixed-point iteration with an explicit budget, so the
/// failure path stays reachable in tests.
fn karcher_mean(
    mats: &[SpdMatrix],
    start: &SpdMatrix,
    max_iters: usize,
    tol: f64,
) -> Result<SpdMatrix> {
    let dim = start.dim;
    let n = mats.len() as f64;
    let as_dm: Vec<DMatrix<f64>> = mats.iter().map(|m| m.to_dmatrix()).collect();
    let mut g = start.to_dmatrix();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let g_isqrt = inv_sqrt(&g)?;
        let mut tangent = DMatrix::<f64>::zeros(dim, dim);
        for a in &as_dm {
            let whitened = &g_isqrt * a * &g_isqrt;
            tangent += spectral_map(&whitened, f64::ln);
        }
        tangent /= n;
        residual = tangent.iter().map(|v| v * v).sum::<f64>().sqrt();
        if residual < tol {
            return Ok(SpdMatrix::from_dmatrix(&g));
        }
        let g_sqrt = spectral_map(&g, f64::sqrt);
        let step = spectral_map(&tangent, f64::exp);
        g = &g_sqrt * step * &g_sqrt;
        g = (&g + g.transpose()) * 0.5;
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        residual,
        iterate: SpdMatrix::from_dmatrix(&g).values,
    })
}

/// Whitens every trial by the inverse square root of `reference`:
/// `X <- R^{-1/2} X`.
pub fn align(trials: &[Trial], reference: &SpdMatrix) -> Result<Vec<Trial>> {
    let w = inv_sqrt(&reference.to_dmatrix())?;
    trials
        .iter()
        .map(|trial| {
            if trial.channels != reference.dim {
                return Err(Error::Parameter(format!(
                    "trial has {} channels, reference is {}x{}",
                    trial.channels, reference.dim, reference.dim
                )));
            }
            let (c, t) = (trial.channels, trial.samples);
            let mut data = vec![0.0; c * t];
            for i in 0..c {
                for k in 0..c {
                    let wik = w[(i, k)];
                    if wik == 0.0 {
                        continue;
                    }
                    let src = &trial.data[k * t..(k + 1) * t];
                    let dst = &mut data[i * t..(i + 1) * t];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wik * s;
                    }
                }
            }
            Ok(Trial { data, ..trial.clone() })
        })
        .collect()
}

/// Whether whitening references for unseen-subject sessions may be computed
/// from those sessions' own (unlabeled) signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignScope {
    /// Every session is whitened by its own mean covariance. Labels are
    /// never used, so this is legitimate even for test sessions.
    Transductive,
    /// Sessions of training subjects use their own references; all other
    /// sessions are whitened by the pooled mean over training trials.
    Strict,
}

/// Groups trials by (subject, session), computes each group's mean trial
/// covariance, and whitens the group against it. Trial order is preserved.
/// With [`MeanMode::Arithmetic`] this is Euclidean alignment; with
/// [`MeanMode::Geometric`] it is Riemannian alignment.
pub fn align_sessions(trials: &[Trial], mode: MeanMode) -> Result<Vec<Trial>> {
    let mut groups: BTreeMap<(u32, u16), Vec<usize>> = BTreeMap::new();
    for (i, t) in trials.iter().enumerate() {
        groups.entry((t.subject_id, t.session_id)).or_default().push(i);
    }
    let mut out: Vec<Option<Trial>> = vec![None; trials.len()];
    for indices in groups.values() {
        let covs: Vec<SpdMatrix> = indices
            .iter()
            .map(|&i| covariance(&trials[i]))
            .collect::<Result<_>>()?;
        let mean = spd_mean(&covs, mode)?;
        let group: Vec<Trial> = indices.iter().map(|&i| trials[i].clone()).collect();
        for (&i, aligned) in indices.iter().zip(align(&group, &mean)?) {
            out[i] = Some(aligned);
        }
    }
    Ok(out.into_iter().map(|t| t.expect("every trial aligned")).collect())
}

/// Session-wise alignment over a whole corpus, with the reference policy for
/// sessions of subjects outside `train_subjects` controlled by `scope`.
pub fn align_corpus(
    trials: &[Trial],
    mode: MeanMode,
    scope: AlignScope,
    train_subjects: &[u32],
) -> Result<Vec<Trial>> {
    if scope == AlignScope::Transductive {
        return align_sessions(trials, mode);
    }
    let is_train = |t: &Trial| train_subjects.contains(&t.subject_id);
    let train_trials: Vec<Trial> = trials.iter().filter(|t| is_train(t)).cloned().collect();
    if train_trials.is_empty() {
        return Err(Error::Parameter(
            "strict alignment needs at least one training subject's trials".into(),
        ));
    }
    let pooled_covs: Vec<SpdMatrix> = train_trials
        .iter()
        .map(covariance)
        .collect::<Result<_>>()?;
    let pooled = spd_mean(&pooled_covs, mode)?;

    let aligned_train = align_sessions(&train_trials, mode)?;
    let mut train_iter = aligned_train.into_iter();
    let mut held: Vec<Trial> = Vec::new();
    let mut held_idx: Vec<usize> = Vec::new();
    for (i, t) in trials.iter().enumerate() {
        if !is_train(t) {
            held.push(t.clone());
            held_idx.push(i);
        }
    }
    let aligned_held = align(&held, &pooled)?;
    let mut out: Vec<Option<Trial>> = vec![None; trials.len()];
    let mut held_iter = held_idx.into_iter().zip(aligned_held);
    for (i, t) in trials.iter().enumerate() {
        out[i] = Some(if is_train(t) {
            train_iter.next().expect("train trial count")
        } else {
            let (j, aligned) = held_iter.next().expect("held-out trial count");
            debug_assert_eq!(i, j);
            aligned
        });
    }
    Ok(out.into_iter().map(|t| t.expect("every trial aligned")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(dim: usize, rng: &mut impl Rng) -> SpdMatrix {
        // A^T A + I is comfortably SPD.
        let a: Vec<f64> = (0..dim * dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let m = DMatrix::from_row_slice(dim, dim, &a);
        let spd = m.transpose() * &m + DMatrix::identity(dim, dim);
        SpdMatrix::from_dmatrix(&spd)
    }

    fn random_trial(c: usize, t: usize, rng: &mut impl Rng) -> Trial {
        Trial {
            data: (0..c * t).map(|_| rng.random::<f64>() - 0.5).collect(),
            channels: c,
            samples: t,
            label: 0,
            subject_id: 0,
            session_id: 0,
        }
    }

    fn frob_gap(a: &SpdMatrix, b: &SpdMatrix) -> f64 {
        let num: f64 = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn spd_validation_rejects_bad_matrices() {
        assert!(SpdMatrix::new(2, vec![1.0, 0.5, 0.4, 1.0]).is_err()); // asymmetric
        assert!(SpdMatrix::new(2, vec![1.0, 2.0, 2.0, 1.0]).is_err()); // indefinite
        assert!(SpdMatrix::new(2, vec![1.0, 0.0, 0.0]).is_err()); // wrong size
        assert!(SpdMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0]).is_ok());
    }

    #[test]
    fn covariance_matches_hand_example() {
        // Two channels, perfectly anti-correlated.
        let trial = Trial {
            data: vec![1.0, -1.0, 1.0, -1.0, -2.0, 2.0, -2.0, 2.0],
            channels: 2,
            samples: 4,
            label: 0,
            subject_id: 0,
            session_id: 0,
        };
        let cov = covariance(&trial).unwrap();
        let v = cov.values();
        assert!((v[0] - 1.0).abs() < 1e-6);
        assert!((v[3] - 4.0).abs() < 1e-6);
        assert!((v[1] + 2.0).abs() < 1e-9);
        assert_eq!(v[1], v[2]);
        // Diagonal carries the shrinkage excess, so it is strictly above the
        // unregularized value.
        assert!(v[0] > 1.0);
    }

    #[test]
    fn covariance_of_constant_trial_is_scaled_identity() {
        let trial = Trial {
            data: vec![3.0; 8],
            channels: 2,
            samples: 4,
            label: 0,
            subject_id: 0,
            session_id: 0,
        };
        let cov = covariance(&trial).unwrap();
        let v = cov.values();
        assert!((v[0] - SHRINKAGE).abs() < 1e-20);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn arithmetic_mean_is_elementwise() {
        let a = SpdMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = SpdMatrix::new(2, vec![3.0, 1.0, 1.0, 5.0]).unwrap();
        let m = spd_mean(&[a, b], MeanMode::Arithmetic).unwrap();
        assert_eq!(m.values(), &[2.0, 0.5, 0.5, 3.0]);
    }

    #[test]
    fn both_means_of_single_matrix_return_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_spd(4, &mut rng);
        let ma = spd_mean(std::slice::from_ref(&a), MeanMode::Arithmetic).unwrap();
        assert!(frob_gap(&ma, &a) < 1e-15);
        let mg = spd_mean(std::slice::from_ref(&a), MeanMode::Geometric).unwrap();
        assert!(frob_gap(&mg, &a) < 1e-12);
    }

    #[test]
    fn geometric_mean_of_commuting_pair_is_matrix_sqrt_product() {
        // For diagonal matrices the geometric mean is the element-wise
        // geometric mean of the diagonals.
        let a = SpdMatrix::new(2, vec![1.0, 0.0, 0.0, 4.0]).unwrap();
        let b = SpdMatrix::new(2, vec![4.0, 0.0, 0.0, 1.0]).unwrap();
        let m = spd_mean(&[a, b], MeanMode::Geometric).unwrap();
        let v = m.values();
        assert!((v[0] - 2.0).abs() < 1e-9, "got {}", v[0]);
        assert!((v[3] - 2.0).abs() < 1e-9, "got {}", v[3]);
        assert!(v[1].abs() < 1e-9);

        let c = SpdMatrix::new(2, vec![1.0, 0.0, 0.0, 4.0]).unwrap();
        let d = SpdMatrix::new(2, vec![9.0, 0.0, 0.0, 16.0]).unwrap();
        let m = spd_mean(&[c, d], MeanMode::Geometric).unwrap();
        let v = m.values();
        assert!((v[0] - 3.0).abs() < 1e-9, "got {}", v[0]);
        assert!((v[3] - 8.0).abs() < 1e-9, "got {}", v[3]);
    }

    #[test]
    fn geometric_mean_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mats: Vec<SpdMatrix> = (0..5).map(|_| random_spd(4, &mut rng)).collect();
        let m1 = spd_mean(&mats, MeanMode::Geometric).unwrap();
        let mut shuffled = mats.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let m2 = spd_mean(&shuffled, MeanMode::Geometric).unwrap();
        assert!(frob_gap(&m1, &m2) < 1e-9);
    }

    #[test]
    fn geometric_mean_congruence_invariance() {
        // mean(W A_i W^T) == W mean(A_i) W^T for invertible W.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mats: Vec<SpdMatrix> = (0..4).map(|_| random_spd(3, &mut rng)).collect();
        let w = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.2, 0.0, -0.1, 0.9, 0.3, 0.0, 0.1, 1.1],
        );
        let mapped: Vec<SpdMatrix> = mats
            .iter()
            .map(|m| SpdMatrix::from_dmatrix(&(&w * m.to_dmatrix() * w.transpose())))
            .collect();
        let lhs = spd_mean(&mapped, MeanMode::Geometric).unwrap();
        let base = spd_mean(&mats, MeanMode::Geometric).unwrap();
        let rhs = SpdMatrix::from_dmatrix(&(&w * base.to_dmatrix() * w.transpose()));
        assert!(frob_gap(&lhs, &rhs) < 1e-8);
    }

    #[test]
    fn mean_rejects_empty_and_mixed_dims() {
        assert!(spd_mean(&[], MeanMode::Arithmetic).is_err());
        let a = SpdMatrix::identity(2);
        let b = SpdMatrix::identity(3);
        assert!(spd_mean(&[a, b], MeanMode::Geometric).is_err());
    }

    #[test]
    fn align_whitens_to_identity_mean() {
        // After aligning by the arithmetic mean of trial covariances, the
        // arithmetic mean of the aligned covariances is the identity.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let trials: Vec<Trial> = (0..12).map(|_| random_trial(4, 256, &mut rng)).collect();
        let covs: Vec<SpdMatrix> = trials.iter().map(|t| covariance(t).unwrap()).collect();
        let mean = spd_mean(&covs, MeanMode::Arithmetic).unwrap();
        let aligned = align(&trials, &mean).unwrap();
        let covs2: Vec<SpdMatrix> = aligned.iter().map(|t| covariance(t).unwrap()).collect();
        let mean2 = spd_mean(&covs2, MeanMode::Arithmetic).unwrap();
        assert!(frob_gap(&mean2, &SpdMatrix::identity(4)) < 1e-6);
    }

    #[test]
    fn align_rejects_ill_conditioned_reference() {
        let reference =
            SpdMatrix::new(2, vec![1.0, 0.0, 0.0, 1e-14]).unwrap();
        let trial = Trial {
            data: vec![0.0; 8],
            channels: 2,
            samples: 4,
            label: 0,
            subject_id: 0,
            session_id: 0,
        };
        let err = align(&[trial], &reference).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    #[test]
    fn align_sessions_groups_independently_and_preserves_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut trials = Vec::new();
        for (subj, sess) in [(1u32, 0u16), (1, 1), (2, 0)] {
            for _ in 0..6 {
                let mut t = random_trial(3, 128, &mut rng);
                t.subject_id = subj;
                t.session_id = sess;
                trials.push(t);
            }
        }
        // Interleave so grouping has to reorder internally.
        trials.swap(0, 12);
        trials.swap(3, 7);
        let aligned = align_sessions(&trials, MeanMode::Arithmetic).unwrap();
        assert_eq!(aligned.len(), trials.len());
        for (orig, out) in trials.iter().zip(&aligned) {
            assert_eq!(orig.subject_id, out.subject_id);
            assert_eq!(orig.session_id, out.session_id);
            assert_eq!(orig.label, out.label);
        }
        // Each session's aligned covariance mean is the identity.
        for (subj, sess) in [(1u32, 0u16), (1, 1), (2, 0)] {
            let group: Vec<Trial> = aligned
                .iter()
                .filter(|t| t.subject_id == subj && t.session_id == sess)
                .cloned()
                .collect();
            let covs: Vec<SpdMatrix> = group.iter().map(|t| covariance(t).unwrap()).collect();
            let mean = spd_mean(&covs, MeanMode::Arithmetic).unwrap();
            assert!(frob_gap(&mean, &SpdMatrix::identity(3)) < 1e-6);
        }
    }

    #[test]
    fn geometric_mean_of_matrix_and_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for dim in 2..=5 {
            let a = random_spd(dim, &mut rng);
            let inv = SpdMatrix::from_dmatrix(
                &a.to_dmatrix().try_inverse().expect("SPD is invertible"),
            );
            let m = spd_mean(&[a, inv], MeanMode::Geometric).unwrap();
            assert!(frob_gap(&m, &SpdMatrix::identity(dim)) < 1e-9);
        }
    }

    #[test]
    fn identity_reference_leaves_trials_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let trial = random_trial(3, 64, &mut rng);
        let out = align(std::slice::from_ref(&trial), &SpdMatrix::identity(3)).unwrap();
        for (a, b) in out[0].data.iter().zip(&trial.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_reference_scales_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let trial = random_trial(2, 32, &mut rng);
        let four_i = SpdMatrix::new(2, vec![4.0, 0.0, 0.0, 4.0]).unwrap();
        let out = align(std::slice::from_ref(&trial), &four_i).unwrap();
        for (a, b) in out[0].data.iter().zip(&trial.data) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn euclidean_alignment_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let trials: Vec<Trial> = (0..8).map(|_| random_trial(4, 200, &mut rng)).collect();
        let once = align_sessions(&trials, MeanMode::Arithmetic).unwrap();
        let twice = align_sessions(&once, MeanMode::Arithmetic).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            let gap = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(gap < 1e-8, "idempotence drift {gap}");
        }
    }

    #[test]
    fn strict_scope_pools_training_references_for_held_out_subjects() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut trials = Vec::new();
        for subj in 0..3u32 {
            for _ in 0..5 {
                let mut t = random_trial(3, 128, &mut rng);
                t.subject_id = subj;
                trials.push(t);
            }
        }
        let strict =
            align_corpus(&trials, MeanMode::Arithmetic, AlignScope::Strict, &[0, 1]).unwrap();
        let transductive =
            align_corpus(&trials, MeanMode::Arithmetic, AlignScope::Transductive, &[0, 1])
                .unwrap();
        // Training subjects align identically under both scopes.
        for (s, t) in strict.iter().zip(&transductive) {
            if s.subject_id < 2 {
                assert_eq!(s.data, t.data);
            }
        }
        // The held-out subject's trials must differ: its strict reference is
        // the training pool, not its own session statistics.
        let differs = strict
            .iter()
            .zip(&transductive)
            .filter(|(s, _)| s.subject_id == 2)
            .any(|(s, t)| s.data != t.data);
        assert!(differs);
        // Order and identity fields are preserved.
        for (orig, out) in trials.iter().zip(&strict) {
            assert_eq!(orig.subject_id, out.subject_id);
        }
        // Strict alignment with no training trials is rejected.
        assert!(align_corpus(&trials, MeanMode::Arithmetic, AlignScope::Strict, &[9]).is_err());
    }

    #[test]
    fn symmetric_square_root_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for dim in 2..=6 {
            let a = random_spd(dim, &mut rng);
            let root = spectral_map(&a.to_dmatrix(), f64::sqrt);
            let squared = SpdMatrix::from_dmatrix(&(&root * &root));
            assert!(frob_gap(&squared, &a) < 1e-10);
        }
    }

    #[test]
    fn exhausted_iteration_budget_reports_last_iterate() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mats: Vec<SpdMatrix> = (0..3).map(|_| random_spd(3, &mut rng)).collect();
        let start = spd_mean(&mats, MeanMode::Arithmetic).unwrap();
        // An unreachable tolerance exhausts the budget deterministically.
        let err = karcher_mean(&mats, &start, 2, 0.0).unwrap_err();
        match err {
            Error::NoConvergence { iterations, residual, iterate } => {
                assert_eq!(iterations, 2);
                assert!(residual.is_finite());
                assert_eq!(iterate.len(), 9);
                // The reported iterate is already a usable (SPD) estimate.
                assert!(SpdMatrix::new(3, iterate).is_ok());
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }
}
