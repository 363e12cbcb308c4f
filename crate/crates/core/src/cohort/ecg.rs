use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::phenotype::PhenotypeVector;
use crate::scalar::Scalar;
use crate::signal::{EcgRecord, N_LEADS, N_SAMPLES, SAMPLE_RATE_HZ};

/// Lead projections of the QRS vector for I, II, III, aVR, aVL, aVF, V1-V6.
const LEAD_GAINS: [f64; N_LEADS] = [1.0, 1.3, 0.5, -1.0, 0.6, 0.9, -0.6, -0.3, 0.6, 1.2, 1.3, 1.0];

const RECORD_SECONDS: f64 = N_SAMPLES as f64 / SAMPLE_RATE_HZ;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcgRenderConfig {
    /// White noise, mV.
    pub noise_sd: f64,
    /// Peak baseline wander, mV.
    pub wander_mv: f64,
    /// Mains interference amplitude, mV.
    pub mains_mv: f64,
    pub mains_hz: f64,
    /// Relative swing of lead gains with the subject's electrical axis.
    pub axis_jitter: f64,
}

impl Default for EcgRenderConfig {
    fn default() -> Self {
        Self {
            noise_sd: 0.02,
            wander_mv: 0.15,
            mains_mv: 0.02,
            mains_hz: 60.0,
            axis_jitter: 0.25,
        }
    }
}

impl EcgRenderConfig {
    pub fn noiseless() -> Self {
        Self {
            noise_sd: 0.0,
            wander_mv: 0.0,
            mains_mv: 0.0,
            mains_hz: 60.0,
            axis_jitter: 0.25,
        }
    }
}

/// Quantities read directly off the rendered waveform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcgTraits {
    pub beats: usize,
    pub qrs_ms: f64,
    pub rr_s: f64,
    pub qrs_mv: f64,
    pub t_mv: f64,
}

pub fn beat_count(heart_rate: f64) -> usize {
    (RECORD_SECONDS * heart_rate / 60.0).round() as usize
}

pub fn ecg_traits(ph: &PhenotypeVector) -> EcgTraits {
    EcgTraits {
        beats: beat_count(ph.heart_rate),
        qrs_ms: 80.0 + 0.25 * (ph.lv_edv - 90.0),
        rr_s: 60.0 / ph.heart_rate,
        qrs_mv: 0.3 + 0.006 * ph.lv_mass,
        t_mv: 0.1 + 0.5 * ph.lv_ef,
    }
}

/// Times (s) of the R peaks: evenly spaced at the RR interval and centred in
/// the record.
pub fn r_peak_times(traits: &EcgTraits) -> Vec<f64> {
    let n = traits.beats;
    let start = (RECORD_SECONDS - (n.saturating_sub(1)) as f64 * traits.rr_s) / 2.0;
    (0..n).map(|k| start + k as f64 * traits.rr_s).collect()
}

fn bump(u: f64, centre: f64, width: f64) -> f64 {
    let d = (u - centre) / width;
    (-0.5 * d * d).exp()
}

/// Single-beat templates relative to the R peak at `u = 0`.
fn depolarization(u: f64, tr: &EcgTraits) -> f64 {
    let w = tr.qrs_ms / 1000.0;
    0.12 * bump(u, -0.16, 0.02) - 0.1 * tr.qrs_mv * bump(u, -w / 3.0, w / 12.0) + tr.qrs_mv * bump(u, 0.0, w / 6.0)
        - 0.25 * tr.qrs_mv * bump(u, w / 3.0, w / 10.0)
}

fn repolarization(u: f64, tr: &EcgTraits) -> f64 {
    tr.t_mv * bump(u, 0.3 * tr.rr_s.sqrt(), 0.045)
}

/// Sum of Gaussian P/Q/R/S/T bumps at every beat, projected onto each lead,
/// plus noise, baseline wander and mains hum.
pub fn render_ecg<T: Scalar>(id: &str, ph: &PhenotypeVector, seed: u64, cfg: &EcgRenderConfig) -> EcgRecord<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tr = ecg_traits(ph);
    let peaks = r_peak_times(&tr);
    let axis = rng.random_range(-PI..PI);
    let gains: Vec<f64> = (0..N_LEADS)
        .map(|l| LEAD_GAINS[l] * (1.0 + cfg.axis_jitter * (axis + l as f64 * PI / 6.0).cos()))
        .collect();
    let wander_hz = rng.random_range(0.1..0.4);
    let wander_phase = rng.random_range(0.0..2.0 * PI);
    let mains_phase = rng.random_range(0.0..2.0 * PI);
    let lead_wander: Vec<f64> = (0..N_LEADS).map(|_| rng.random_range(0.5..1.0)).collect();
    let white = Normal::new(0.0, cfg.noise_sd.max(0.0)).expect("finite sd");

    // Beat templates are shared across leads; only the gain differs.
    let (mut dep, mut rep) = (vec![0.0; N_SAMPLES], vec![0.0; N_SAMPLES]);
    for (n, (d, r)) in dep.iter_mut().zip(rep.iter_mut()).enumerate() {
        let t = n as f64 / SAMPLE_RATE_HZ;
        for &p in &peaks {
            let u = t - p;
            if u > -0.4 && u < 0.8 {
                *d += depolarization(u, &tr);
                *r += repolarization(u, &tr);
            }
        }
    }
    let mut data = Vec::with_capacity(N_LEADS * N_SAMPLES);
    for (l, &g) in gains.iter().enumerate() {
        for n in 0..N_SAMPLES {
            let t = n as f64 / SAMPLE_RATE_HZ;
            let mut v = g * dep[n] + 0.8 * g * rep[n];
            v += cfg.wander_mv * lead_wander[l] * (2.0 * PI * wander_hz * t + wander_phase).sin();
            v += cfg.mains_mv * (2.0 * PI * cfg.mains_hz * t + mains_phase).sin();
            if cfg.noise_sd > 0.0 {
                v += white.sample(&mut rng);
            }
            data.push(T::of(v));
        }
    }
    let leads = crate::tensor::Tensor::new(vec![N_LEADS, N_SAMPLES], data).expect("fixed shape");
    EcgRecord::new(id, leads).expect("fixed shape")
}
