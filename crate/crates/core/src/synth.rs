//! Synthetic multi-subject trial corpora with controllable domain shift.
//!
//! Each subject owns a random spatial mixing matrix `A_n = I + sigma_mix * E`
//! (spectral norm of the perturbation clipped to 0.9), each session adds a
//! smaller mixing perturbation on top. Class-discriminative sources are
//! alpha-band oscillations; the oscillation frequency is drawn per trial and
//! carries no class information — the only class cue is *where* the power
//! sits: each class concentrates oscillatory power on its own contiguous
//! channel block ("hemisphere" analog), so `sigma_mix` directly controls how
//! badly cross-subject transfer scrambles that spatial cue. Pink-like noise
//! rides along before mixing, so whitening-based alignment has real
//! structure to remove.

use crate::error::{Error, Result};
use crate::signal::Trial;
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Everything that determines a generated corpus. Two equal specs generate
/// bitwise-identical corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_subjects: usize,
    /// Sessions per subject.
    pub n_sessions: usize,
    /// Trials per class per session; class balance is exact.
    pub trials_per_class: usize,
    pub channels: usize,
    /// Sampling rate in Hz.
    pub fs: f64,
    /// Trial duration in seconds.
    pub trial_secs: f64,
    pub n_classes: usize,
    /// Strength of the per-subject mixing perturbation (domain shift).
    pub sigma_mix: f64,
    /// Scale of the pink-like noise added to the sources.
    pub noise_level: f64,
    /// Strength of the extra per-session mixing perturbation.
    pub session_shift: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    /// A desk-scale corpus that trains in minutes on one CPU core, tuned so
    /// a single cross-subject model lands around 73% accuracy — hard enough
    /// that ensembling and collaborative training have headroom to help,
    /// far enough from chance that runs are stable across seeds.
    fn default() -> Self {
        GeneratorSpec {
            n_subjects: 12,
            n_sessions: 2,
            trials_per_class: 8,
            channels: 8,
            fs: 50.0,
            trial_secs: 4.0,
            n_classes: 2,
            sigma_mix: 0.8,
            noise_level: 1.5,
            session_shift: 0.1,
            seed: 7,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0
            || self.n_sessions == 0
            || self.trials_per_class == 0
            || self.channels == 0
            || self.n_classes == 0
        {
            return Err(Error::Validation("all corpus counts must be positive".into()));
        }
        if self.n_classes > u16::MAX as usize {
            return Err(Error::Validation("too many classes for a u16 label".into()));
        }
        if !self.fs.is_finite() || self.fs <= 0.0 {
            return Err(Error::Validation(format!("sampling rate {} must be positive", self.fs)));
        }
        if !self.trial_secs.is_finite() || self.trial_secs <= 0.0 {
            return Err(Error::Validation(format!(
                "trial duration {} must be positive",
                self.trial_secs
            )));
        }
        if self.samples() < 2 {
            return Err(Error::Validation("trials must span at least 2 samples".into()));
        }
        if self.sigma_mix < 0.0 || self.noise_level < 0.0 || self.session_shift < 0.0 {
            return Err(Error::Validation("shift and noise strengths must be >= 0".into()));
        }
        if self.n_classes > self.channels {
            return Err(Error::Validation(format!(
                "{} classes need at least as many channels (got {}) so every class \
                 owns a distinct channel group",
                self.n_classes, self.channels
            )));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.fs * self.trial_secs).round() as usize
    }

    pub fn n_trials(&self) -> usize {
        self.n_subjects * self.n_sessions * self.n_classes * self.trials_per_class
    }
}

/// `I + P` with the perturbation `P = strength * E` clipped to `max_norm`
/// spectral norm, so the mixing stays comfortably invertible.
fn perturbed_identity(
    channels: usize,
    strength: f64,
    max_norm: f64,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let scale = strength / (channels as f64).sqrt();
    let mut p = DMatrix::<f64>::from_fn(channels, channels, |_, _| {
        let e: f64 = rng.sample(StandardNormal);
        e * scale
    });
    let norm = p.singular_values().iter().copied().fold(0.0, f64::max);
    if norm > max_norm {
        p *= max_norm / norm;
    }
    DMatrix::identity(channels, channels) + p
}

/// Pink-like noise: white noise shaped by a cheap 3-pole 1/f approximation.
fn pink_noise(samples: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..samples)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            (b0 + b1 + b2 + w * 0.1848) * 0.25
        })
        .collect()
}

/// Per-channel source amplitudes for class `c`: the montage splits into
/// `n_classes` contiguous blocks and class `c`'s block oscillates loud while
/// the rest stay quiet. With two classes this is the classic left/right
/// "hemisphere" power swap. Crucially the oscillation frequency carries no
/// class information, so this spatial profile is the *only* class cue and a
/// subject's mixing matrix degrades it in a controlled way.
fn class_amplitudes(c: usize, n_classes: usize, channels: usize) -> Vec<f64> {
    let start = c * channels / n_classes;
    let end = (c + 1) * channels / n_classes;
    (0..channels)
        .map(|ch| if (start..end).contains(&ch) { 1.0 } else { 0.6 })
        .collect()
}

/// Generates the full corpus. All randomness for subject `n` comes from the
/// stream `(seed, n)`, so subjects are independent of generation order.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<Trial>> {
    spec.validate()?;
    let c = spec.channels;
    let t = spec.samples();
    let mut trials = Vec::with_capacity(spec.n_trials());

    for subject in 0..spec.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(subject as u64);
        let subject_mix = perturbed_identity(c, spec.sigma_mix, 0.9, &mut rng);

        for session in 0..spec.n_sessions {
            let session_mix =
                &subject_mix * perturbed_identity(c, spec.session_shift, 0.45, &mut rng);

            for class in 0..spec.n_classes {
                let amps = class_amplitudes(class, spec.n_classes, c);

                for _ in 0..spec.trials_per_class {
                    // Frequency is per-trial and class-independent; only the
                    // spatial amplitude profile below separates the classes.
                    let freq = 8.0 + 4.0 * rng.random::<f64>();
                    let phase = rng.random::<f64>() * std::f64::consts::TAU;
                    // Sources: per-channel oscillation with class-dependent
                    // amplitude, small per-channel jitter, plus pink noise.
                    let mut sources = Vec::with_capacity(c * t);
                    for ch in 0..c {
                        let jitter: f64 = rng.sample(StandardNormal);
                        let amp = amps[ch] * (1.0 + 0.05 * jitter);
                        let lag: f64 = rng.sample(StandardNormal);
                        let ch_phase = phase + 0.1 * lag;
                        let noise = pink_noise(t, &mut rng);
                        for (i, nz) in noise.iter().enumerate() {
                            let arg = std::f64::consts::TAU * freq * i as f64 / spec.fs + ch_phase;
                            sources.push(amp * arg.sin() + spec.noise_level * nz);
                        }
                    }
                    // Mix: X = A_session * S.
                    let s = DMatrix::from_row_slice(c, t, &sources);
                    let x = &session_mix * s;
                    let mut data = Vec::with_capacity(c * t);
                    for i in 0..c {
                        for j in 0..t {
                            data.push(x[(i, j)]);
                        }
                    }
                    trials.push(Trial {
                        data,
                        channels: c,
                        samples: t,
                        label: class as u16,
                        subject_id: subject as u32,
                        session_id: session as u16,
                    });
                }
            }
        }
    }
    Ok(trials)
}
