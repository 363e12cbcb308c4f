//! ECG preprocessing: high-pass, notch, Savitzky-Golay smoothing and
//! lead-wise standardization, applied in that fixed order.
//!
//! Both IIR stages run forward and then backward over the signal (zero
//! phase). Each pass starts from the steady state of a signal that was
//! constant at its first sample, and the record is extended at both ends by
//! odd reflection before filtering, so a constant lead comes out exactly zero.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const N_LEADS: usize = 12;
pub const SAMPLE_RATE_HZ: f64 = 500.0;
pub const N_SAMPLES: usize = 5000;

/// Below this standard deviation (mV) a lead is treated as constant.
const CONSTANT_LEAD_STD: f64 = 1e-10;

/// Odd-reflection padding, in samples, on each side of the IIR stages.
const FILTER_PAD: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageFlags {
    pub highpassed: bool,
    pub notched: bool,
    pub smoothed: bool,
    pub normalized: bool,
}

impl StageFlags {
    pub fn all() -> Self {
        Self {
            highpassed: true,
            notched: true,
            smoothed: true,
            normalized: true,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut f = StageFlags::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "highpassed" => f.highpassed = true,
                "notched" => f.notched = true,
                "smoothed" => f.smoothed = true,
                "normalized" => f.normalized = true,
                other => return Err(Error::invalid(format!("unknown stage flag {other:?}"))),
            }
        }
        Ok(f)
    }
}

impl fmt::Display for StageFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.highpassed, "highpassed"),
            (self.notched, "notched"),
            (self.smoothed, "smoothed"),
            (self.normalized, "normalized"),
        ]
        .iter()
        .filter(|(set, _)| *set)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&names.join(","))
    }
}

/// Twelve leads of ten seconds at 500 Hz, in mV until normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord<T: Scalar> {
    leads: Tensor<T>,
    pub subject_id: String,
    pub stages: StageFlags,
}

impl<T: Scalar> EcgRecord<T> {
    pub fn new(subject_id: impl Into<String>, leads: Tensor<T>) -> Result<Self> {
        if leads.shape() != [N_LEADS, N_SAMPLES] {
            return Err(Error::shape(
                "ecg_record",
                format!("expected [{N_LEADS}, {N_SAMPLES}], got {:?}", leads.shape()),
            ));
        }
        Ok(Self {
            leads,
            subject_id: subject_id.into(),
            stages: StageFlags::default(),
        })
    }

    pub fn from_fn(subject_id: impl Into<String>, f: impl Fn(usize, usize) -> f64) -> Self {
        let leads = Tensor::from_fn(&[N_LEADS, N_SAMPLES], |i| T::of(f(i / N_SAMPLES, i % N_SAMPLES)));
        Self::new(subject_id, leads).expect("shape is fixed")
    }

    pub fn leads(&self) -> &Tensor<T> {
        &self.leads
    }

    pub fn lead(&self, l: usize) -> &[T] {
        self.leads.row(l)
    }

    pub fn sample_rate(&self) -> f64 {
        SAMPLE_RATE_HZ
    }

    fn map_leads(&self, mut f: impl FnMut(&[T]) -> Vec<T>) -> Tensor<T> {
        let data: Vec<T> = (0..N_LEADS).flat_map(|l| f(self.lead(l))).collect();
        Tensor::new(vec![N_LEADS, N_SAMPLES], data).expect("length preserved")
    }

    /// Writes `<stem>.calt` and the `<stem>.meta` key=value sidecar.
    pub fn save(&self, dir: &Path, stem: &str, dtype: DType) -> Result<()> {
        write_tensor(&dir.join(format!("{stem}.calt")), &self.leads, dtype)?;
        let meta = format!(
            "subject_id={}\nsample_rate={}\nleads={}\nsamples={}\nstages={}\n",
            self.subject_id, SAMPLE_RATE_HZ as u32, N_LEADS, N_SAMPLES, self.stages
        );
        let path = dir.join(format!("{stem}.meta"));
        fs::write(&path, meta).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let leads = read_tensor(&dir.join(format!("{stem}.calt")))?;
        let path = dir.join(format!("{stem}.meta"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut subject_id = None;
        let mut stages = StageFlags::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&path, format!("not key=value: {line:?}")))?;
            match k.trim() {
                "subject_id" => subject_id = Some(v.trim().to_string()),
                "stages" => stages = StageFlags::parse(v)?,
                "sample_rate" if v.trim() != "500" => {
                    return Err(Error::format(&path, format!("unsupported sample rate {v}")))
                }
                _ => {}
            }
        }
        let subject_id = subject_id.ok_or_else(|| Error::format(&path, "missing subject_id"))?;
        let mut rec = Self::new(subject_id, leads)?;
        rec.stages = stages;
        Ok(rec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub highpass_hz: f64,
    pub notch_hz: f64,
    pub notch_q: f64,
    pub sg_window: usize,
    pub sg_order: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            highpass_hz: 0.5,
            notch_hz: 60.0,
            notch_q: 30.0,
            sg_window: 15,
            sg_order: 3,
        }
    }
}

/// Second-order section `b0 + b1 z^-1 + b2 z^-2 / 1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Butterworth (Q = 1/sqrt 2) high-pass via the bilinear transform.
    pub fn highpass(cutoff_hz: f64, fs: f64) -> Result<Self> {
        if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
            return Err(Error::invalid(format!(
                "high-pass cutoff {cutoff_hz} Hz outside (0, {})",
                fs / 2.0
            )));
        }
        let w0 = 2.0 * std::f64::consts::PI * cutoff_hz / fs;
        let alpha = w0.sin() / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let cw = w0.cos();
        let a0 = 1.0 + alpha;
        let b0 = (1.0 + cw) / 2.0 / a0;
        // b = b0 * [1, -2, 1]; kept as exact multiples so DC cancels exactly.
        Ok(Self {
            b: [b0, -2.0 * b0, b0],
            a: [-2.0 * cw / a0, (1.0 - alpha) / a0],
        })
    }

    pub fn notch(freq_hz: f64, q: f64, fs: f64) -> Result<Self> {
        if !(freq_hz > 0.0 && freq_hz < fs / 2.0) {
            return Err(Error::invalid(format!(
                "notch frequency {freq_hz} Hz must lie in (0, Nyquist = {} Hz)",
                fs / 2.0
            )));
        }
        if !(q > 0.0) {
            return Err(Error::invalid(format!("notch Q must be positive, got {q}")));
        }
        let w0 = 2.0 * std::f64::consts::PI * freq_hz / fs;
        let alpha = w0.sin() / (2.0 * q);
        let cw = w0.cos();
        let a0 = 1.0 + alpha;
        Ok(Self {
            b: [1.0 / a0, -2.0 * cw / a0, 1.0 / a0],
            a: [-2.0 * cw / a0, (1.0 - alpha) / a0],
        })
    }

    /// |H(e^{jw})| at `freq_hz`, single pass.
    pub fn magnitude(&self, freq_hz: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / fs;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let nr = self.b[0] + self.b[1] * c1 + self.b[2] * c2;
        let ni = -(self.b[1] * s1 + self.b[2] * s2);
        let dr = 1.0 + self.a[0] * c1 + self.a[1] * c2;
        let di = -(self.a[0] * s1 + self.a[1] * s2);
        ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt()
    }

    fn dc_gain(&self) -> f64 {
        let num = self.b[0] + self.b[1] + self.b[2];
        if num == 0.0 {
            0.0
        } else {
            num / (1.0 + self.a[0] + self.a[1])
        }
    }

    /// Direct form I, starting from the steady state for a constant history
    /// equal to `x[0]`.
    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let y0 = x0 * self.dc_gain();
        let (mut x1, mut x2, mut y1, mut y2) = (x0, x0, y0, y0);
        for v in x.iter_mut() {
            let xn = *v;
            let ff = self.b[0] * xn + self.b[1] * x1 + self.b[2] * x2;
            let yn = ff - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = xn;
            y2 = y1;
            y1 = yn;
            *v = yn;
        }
    }

    /// Forward-backward application with odd-reflection padding.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = FILTER_PAD.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Savitzky-Golay smoother: local least-squares polynomial fits.
#[derive(Debug, Clone, PartialEq)]
pub struct SavitzkyGolay {
    half: usize,
    /// `rows[j]` evaluates the fit over a full window at offset `j - half`.
    rows: Vec<Vec<f64>>,
}

impl SavitzkyGolay {
    pub fn new(window: usize, order: usize) -> Result<Self> {
        if window.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "Savitzky-Golay window must be odd, got {window}"
            )));
        }
        if order >= window {
            return Err(Error::invalid(format!(
                "Savitzky-Golay order {order} must be below window {window}"
            )));
        }
        let half = window / 2;
        let scale = half.max(1) as f64;
        let n_coef = order + 1;
        // Normal equations on positions scaled to [-1, 1].
        let pos: Vec<f64> = (0..window).map(|k| (k as f64 - half as f64) / scale).collect();
        let mut ata = vec![vec![0.0; n_coef]; n_coef];
        for &t in &pos {
            for (i, row) in ata.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += t.powi((i + j) as i32);
                }
            }
        }
        let inv = invert(&ata)?;
        let rows = (0..window)
            .map(|j| {
                let t_eval = (j as f64 - half as f64) / scale;
                let basis: Vec<f64> = (0..n_coef).map(|i| t_eval.powi(i as i32)).collect();
                // w = e^T (A^T A)^-1 A^T
                let left: Vec<f64> = (0..n_coef)
                    .map(|c| (0..n_coef).map(|r| basis[r] * inv[r][c]).sum())
                    .collect();
                pos.iter()
                    .map(|&t| (0..n_coef).map(|c| left[c] * t.powi(c as i32)).sum())
                    .collect()
            })
            .collect();
        Ok(Self { half, rows })
    }

    pub fn window(&self) -> usize {
        2 * self.half + 1
    }

    pub fn center_coefficients(&self) -> &[f64] {
        &self.rows[self.half]
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let w = self.window();
        let n = x.len();
        if n < w {
            return Err(Error::invalid(format!("signal of {n} samples shorter than window {w}")));
        }
        let mut out = vec![0.0; n];
        let center = self.center_coefficients();
        for i in self.half..n - self.half {
            let win = &x[i - self.half..=i + self.half];
            out[i] = win.iter().zip(center).map(|(a, b)| a * b).sum();
        }
        // Edges: evaluate the polynomial fitted to the terminal windows.
        for j in 0..self.half {
            out[j] = x[..w].iter().zip(&self.rows[j]).map(|(a, b)| a * b).sum();
            let k = w - 1 - j;
            out[n - 1 - j] = x[n - w..].iter().zip(&self.rows[k]).map(|(a, b)| a * b).sum();
        }
        Ok(out)
    }
}

/// Gauss-Jordan inverse with partial pivoting for the small normal matrix.
fn invert(m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::invalid("singular Savitzky-Golay normal matrix"));
        }
        a.swap(col, piv);
        let p = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    let pivot_row = a[col].clone();
                    a[r].iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= f * pv);
                }
            }
        }
    }
    Ok(a.into_iter().map(|r| r[n..].to_vec()).collect())
}

fn lead_f64<T: Scalar>(lead: &[T]) -> Vec<f64> {
    lead.iter().map(|v| v.as_f64()).collect()
}

fn lead_back<T: Scalar>(lead: Vec<f64>) -> Vec<T> {
    lead.into_iter().map(T::of).collect()
}

pub fn highpass<T: Scalar>(rec: &EcgRecord<T>, cutoff_hz: f64) -> Result<EcgRecord<T>> {
    if rec.stages.highpassed {
        return Err(Error::Stage(format!("{}: high-pass already applied", rec.subject_id)));
    }
    let filt = Biquad::highpass(cutoff_hz, SAMPLE_RATE_HZ)?;
    let mut out = rec.clone();
    out.leads = rec.map_leads(|l| lead_back(filt.filtfilt(&lead_f64(l))));
    out.stages.highpassed = true;
    Ok(out)
}

pub fn notch<T: Scalar>(rec: &EcgRecord<T>, freq_hz: f64, q: f64) -> Result<EcgRecord<T>> {
    if !rec.stages.highpassed || rec.stages.notched {
        return Err(Error::Stage(format!(
            "{}: notch needs a high-passed, not yet notched record (stages: {})",
            rec.subject_id, rec.stages
        )));
    }
    let filt = Biquad::notch(freq_hz, q, SAMPLE_RATE_HZ)?;
    let mut out = rec.clone();
    out.leads = rec.map_leads(|l| lead_back(filt.filtfilt(&lead_f64(l))));
    out.stages.notched = true;
    Ok(out)
}

pub fn savitzky_golay<T: Scalar>(rec: &EcgRecord<T>, window: usize, order: usize) -> Result<EcgRecord<T>> {
    let sg = SavitzkyGolay::new(window, order)?;
    if !rec.stages.notched || rec.stages.smoothed {
        return Err(Error::Stage(format!(
            "{}: smoothing needs a notched, not yet smoothed record (stages: {})",
            rec.subject_id, rec.stages
        )));
    }
    let mut out = rec.clone();
    let mut failure = None;
    out.leads = rec.map_leads(|l| match sg.apply(&lead_f64(l)) {
        Ok(v) => lead_back(v),
        Err(e) => {
            failure = Some(e);
            vec![T::zero(); l.len()]
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    out.stages.smoothed = true;
    Ok(out)
}

/// Per-lead z-score with the sample (n-1) standard deviation; constant
/// leads become zeros.
pub fn standardize_lead(lead: &[f64]) -> Vec<f64> {
    let n = lead.len() as f64;
    let mean = lead.iter().sum::<f64>() / n;
    let var = lead.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let std = var.sqrt();
    if std < CONSTANT_LEAD_STD {
        return vec![0.0; lead.len()];
    }
    lead.iter().map(|v| (v - mean) / std).collect()
}

pub fn normalize_leads<T: Scalar>(rec: &EcgRecord<T>) -> Result<EcgRecord<T>> {
    if !rec.stages.smoothed || rec.stages.normalized {
        return Err(Error::Stage(format!(
            "{}: normalization needs a smoothed, not yet normalized record (stages: {})",
            rec.subject_id, rec.stages
        )));
    }
    let mut out = rec.clone();
    out.leads = rec.map_leads(|l| lead_back(standardize_lead(&lead_f64(l))));
    out.stages.normalized = true;
    Ok(out)
}

/// The three linear stages (everything before normalization).
pub fn filter_chain<T: Scalar>(rec: &EcgRecord<T>, cfg: &PreprocessConfig) -> Result<EcgRecord<T>> {
    let r = highpass(rec, cfg.highpass_hz)?;
    let r = notch(&r, cfg.notch_hz, cfg.notch_q)?;
    savitzky_golay(&r, cfg.sg_window, cfg.sg_order)
}

pub fn preprocess<T: Scalar>(rec: &EcgRecord<T>, cfg: &PreprocessConfig) -> Result<EcgRecord<T>> {
    normalize_leads(&filter_chain(rec, cfg)?)
}
