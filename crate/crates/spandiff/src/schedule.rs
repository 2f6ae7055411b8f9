//! Network-free diffusion mathematics: noise schedules, span-coordinate
//! normalization, the closed-form forward corruption, and deterministic
//! reverse stepping over a timestep subsequence.
//!
//! Conventions: timesteps are 1-based with `alpha_bar(0) == 1`, spans are
//! 1-based inclusive word indices, and all randomness is supplied by the
//! caller.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpandiffError};

/// Per-timestep noise magnitudes and their cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// How the beta sequence is constructed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    #[default]
    Cosine,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

pub fn build_schedule(t_total: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_total < 1 {
        return Err(SpandiffError::Schedule("T must be at least 1".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear {
            beta_start,
            beta_end,
        } => {
            if !(0.0 < beta_start && beta_start < 1.0 && 0.0 < beta_end && beta_end < 1.0) {
                return Err(SpandiffError::Schedule(
                    "linear betas must lie in (0, 1)".into(),
                ));
            }
            if t_total == 1 {
                vec![beta_start]
            } else {
                (0..t_total)
                    .map(|i| {
                        beta_start
                            + (beta_end - beta_start) * i as f64 / (t_total - 1) as f64
                    })
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            let f = |u: f64| {
                let v = ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
                v.cos().powi(2)
            };
            (1..=t_total)
                .map(|t| {
                    let ratio = f(t as f64 / t_total as f64) / f((t - 1) as f64 / t_total as f64);
                    (1.0 - ratio).min(MAX_BETA)
                })
                .collect()
        }
    };

    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_total);
    let mut running = 1.0;
    for &a in &alphas {
        running *= a;
        alpha_bars.push(running);
    }

    let sched = NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    };
    sched.validate()?;
    Ok(sched)
}

impl NoiseSchedule {
    fn validate(&self) -> Result<()> {
        for (&b, &ab) in self.betas.iter().zip(&self.alpha_bars) {
            if !(0.0 < b && b < 1.0) {
                return Err(SpandiffError::Schedule(format!("beta {b} outside (0, 1)")));
            }
            if ab <= 0.0 {
                return Err(SpandiffError::Schedule(
                    "alpha_bar underflowed to zero".into(),
                ));
            }
        }
        for w in self.alpha_bars.windows(2) {
            if w[1] >= w[0] {
                return Err(SpandiffError::Schedule(
                    "alpha_bar not strictly decreasing".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn t_total(&self) -> usize {
        self.betas.len()
    }

    /// β_t for 1-based t.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// α_t for 1-based t.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t for t in [0, T]; ᾱ_0 is defined as 1 so the terminal reverse step
    /// reproduces the prediction exactly.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Continuous span coordinates carried through the diffusion process:
/// N slots of (start, end), normalized by sentence length and scaled by λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanTensor {
    pub values: Vec<[f64; 2]>,
    pub lambda: f64,
    pub sentence_len: usize,
}

impl SpanTensor {
    pub fn slots(&self) -> usize {
        self.values.len()
    }

    pub fn max_abs_diff(&self, other: &SpanTensor) -> f64 {
        assert_eq!(self.slots(), other.slots());
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| [(a[0] - b[0]).abs(), (a[1] - b[1]).abs()])
            .fold(0.0, f64::max)
    }
}

/// Map 1-based inclusive integer spans to normalized coordinates:
/// `value = λ·(index/|S| − 0.5)`.
pub fn normalize_spans(
    spans: &[(usize, usize)],
    sentence_len: usize,
    lambda: f64,
) -> Result<SpanTensor> {
    if sentence_len == 0 {
        return Err(SpandiffError::Schedule(
            "cannot normalize spans of an empty sentence".into(),
        ));
    }
    let n = sentence_len as f64;
    let values = spans
        .iter()
        .map(|&(s, e)| {
            debug_assert!(1 <= s && s <= e && e <= sentence_len, "invalid span ({s},{e})");
            [
                lambda * (s as f64 / n - 0.5),
                lambda * (e as f64 / n - 0.5),
            ]
        })
        .collect();
    Ok(SpanTensor {
        values,
        lambda,
        sentence_len,
    })
}

/// Inverse of [`normalize_spans`] with rounding, clamping to `[1, |S|]`,
/// and ordering: exact on every valid integer span, total on any input.
pub fn denormalize_spans(x: &SpanTensor) -> Vec<(usize, usize)> {
    let n = x.sentence_len as f64;
    x.values
        .iter()
        .map(|pair| {
            let idx = |v: f64| -> usize {
                let raw = ((v / x.lambda + 0.5) * n).round();
                raw.clamp(1.0, n) as usize
            };
            let (s, e) = (idx(pair[0]), idx(pair[1]));
            if s <= e {
                (s, e)
            } else {
                (e, s)
            }
        })
        .collect()
}

/// Closed-form forward corruption: `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`.
pub fn forward_sample(
    x0: &SpanTensor,
    t: usize,
    eps: &[[f64; 2]],
    sched: &NoiseSchedule,
) -> Result<SpanTensor> {
    if t < 1 || t > sched.t_total() {
        return Err(SpandiffError::Schedule(format!(
            "timestep {t} outside [1, {}]",
            sched.t_total()
        )));
    }
    if eps.len() != x0.slots() {
        return Err(SpandiffError::Schedule(format!(
            "noise has {} slots, state has {}",
            eps.len(),
            x0.slots()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = x0
        .values
        .iter()
        .zip(eps)
        .map(|(v, e)| [signal * v[0] + noise * e[0], signal * v[1] + noise * e[1]])
        .collect();
    Ok(SpanTensor {
        values,
        lambda: x0.lambda,
        sentence_len: x0.sentence_len,
    })
}

/// The timestep subsequence used for accelerated deterministic sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdimPlan {
    pub tau: Vec<usize>,
    pub sigma: Vec<f64>,
}

impl DdimPlan {
    pub fn gamma(&self) -> usize {
        self.tau.len()
    }

    /// Step pairs from the noisiest timestep down to 0.
    pub fn steps(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.tau.len());
        for k in (0..self.tau.len()).rev() {
            let t = self.tau[k];
            let t_prev = if k == 0 { 0 } else { self.tau[k - 1] };
            out.push((t, t_prev));
        }
        out
    }
}

/// Evenly spaced increasing subsequence of `[1..T]` of length `gamma`,
/// forced to end at T.
pub fn make_ddim_plan(t_total: usize, gamma: usize) -> Result<DdimPlan> {
    if gamma < 1 || gamma > t_total {
        return Err(SpandiffError::Schedule(format!(
            "gamma {gamma} outside [1, {t_total}]"
        )));
    }
    let tau: Vec<usize> = if gamma == 1 {
        vec![t_total]
    } else {
        let mut tau: Vec<usize> = (0..gamma)
            .map(|i| 1 + i * (t_total - 1) / (gamma - 1))
            .collect();
        *tau.last_mut().unwrap() = t_total;
        tau
    };
    debug_assert!(tau.windows(2).all(|w| w[0] < w[1]));
    Ok(DdimPlan {
        sigma: vec![0.0; tau.len()],
        tau,
    })
}

/// One deterministic reverse step from `t` to `t_prev` (σ = 0):
/// the predicted clean state is re-noised to the earlier noise level,
/// preserving the implied noise direction.
pub fn ddim_step(
    x_t: &SpanTensor,
    x0_hat: &SpanTensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<SpanTensor> {
    if t_prev >= t {
        return Err(SpandiffError::Schedule(format!(
            "ddim step requires t_prev < t, got {t_prev} >= {t}"
        )));
    }
    if t > sched.t_total() {
        return Err(SpandiffError::Schedule(format!(
            "timestep {t} beyond schedule length {}",
            sched.t_total()
        )));
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let implied_scale = (1.0 - ab_prev).sqrt() / (1.0 - ab_t).sqrt();
    let values = x_t
        .values
        .iter()
        .zip(&x0_hat.values)
        .map(|(xt, x0)| {
            let step = |xt: f64, x0: f64| {
                let implied = xt - ab_t.sqrt() * x0;
                ab_prev.sqrt() * x0 + implied_scale * implied
            };
            [step(xt[0], x0[0]), step(xt[1], x0[1])]
        })
        .collect();
    Ok(SpanTensor {
        values,
        lambda: x_t.lambda,
        sentence_len: x_t.sentence_len,
    })
}

/// One stochastic reverse step from `t` to `t−1` with the standard posterior
/// noise scale `σ_t² = β_t·(1−ᾱ_{t−1})/(1−ᾱ_t)`; at t = 1 this returns the
/// prediction exactly.
pub fn ddpm_reverse_step(
    x_t: &SpanTensor,
    x0_hat: &SpanTensor,
    t: usize,
    sched: &NoiseSchedule,
    eps: &[[f64; 2]],
) -> Result<SpanTensor> {
    if t < 1 || t > sched.t_total() {
        return Err(SpandiffError::Schedule(format!(
            "timestep {t} outside [1, {}]",
            sched.t_total()
        )));
    }
    if eps.len() != x_t.slots() {
        return Err(SpandiffError::Schedule("noise slot mismatch".into()));
    }
    let sigma = posterior_sigma(t, sched);
    let mut out = ddim_step(x_t, x0_hat, t, t - 1, sched)?;
    for (v, e) in out.values.iter_mut().zip(eps) {
        v[0] += sigma * e[0];
        v[1] += sigma * e[1];
    }
    Ok(out)
}

pub fn posterior_sigma(t: usize, sched: &NoiseSchedule) -> f64 {
    let ab_prev = sched.alpha_bar(t - 1);
    let ab_t = sched.alpha_bar(t);
    (sched.beta(t) * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
}

/// N×2 standard-normal draws from a caller-owned generator.
pub fn gaussian_noise(slots: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    (0..slots)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect()
}
