//! Cumulative mean-normalized difference pitch estimator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioBuffer, FrameSpec};
use crate::decode::{voicing, PitchTrack};
use crate::error::{Error, Result};

/// Normalized difference values indexed by lag, from 0 to `max_lag`.
#[derive(Debug, Clone, PartialEq)]
pub struct CmndFrame {
    pub values: Vec<f64>,
    /// Set when the frame has no energy at any lag.
    pub aperiodic: bool,
}

/// `d(τ) = Σ (x_t - x_{t+τ})²` over the first `len - max_lag` samples and
/// `d'(τ) = d(τ) τ / Σ_{j=1..τ} d(j)`, with `d'(0) = 1`.
pub fn cmnd(frame: &[f32], max_lag: usize) -> Result<CmndFrame> {
    if max_lag == 0 || frame.len() < 2 * max_lag {
        return Err(Error::invalid(format!(
            "frame of {} samples is too short for lags up to {max_lag}",
            frame.len()
        )));
    }
    let w = frame.len() - max_lag;
    let x: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
    let mut values = vec![1.0; max_lag + 1];
    let mut running = 0.0;
    for (tau, out) in values.iter_mut().enumerate().skip(1) {
        let d: f64 = x[..w].iter().zip(&x[tau..tau + w]).map(|(a, b)| (a - b) * (a - b)).sum();
        running += d;
        *out = if running > 0.0 { d * tau as f64 / running } else { 1.0 };
    }
    Ok(CmndFrame { values, aperiodic: running == 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    pub fmin: f64,
    pub fmax: f64,
    /// First lag whose normalized difference dips below this is taken.
    pub threshold: f64,
    /// Voiced where periodicity is strictly above this.
    pub voicing_threshold: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self { fmin: 50.0, fmax: 1000.0, threshold: 0.1, voicing_threshold: 0.5 }
    }
}

impl DspConfig {
    /// Integer lag range `[sr/fmax, sr/fmin]`.
    pub fn lag_range(&self, sample_rate: u32) -> Result<(usize, usize)> {
        if !(self.fmin > 0.0 && self.fmax > self.fmin) {
            return Err(Error::invalid(format!("need 0 < fmin < fmax, got {} and {}", self.fmin, self.fmax)));
        }
        let sr = sample_rate as f64;
        let lo = ((sr / self.fmax).floor() as usize).max(2);
        let hi = (sr / self.fmin).ceil() as usize;
        if hi <= lo {
            return Err(Error::invalid(format!("empty lag range at {sample_rate} Hz")));
        }
        Ok((lo, hi))
    }
}

/// Chosen lag (fractional) and its normalized difference for one frame.
/// `None` on an aperiodic frame.
pub fn pick_lag(c: &CmndFrame, lo: usize, hi: usize, threshold: f64) -> Option<(f64, f64)> {
    if c.aperiodic {
        return None;
    }
    let d = &c.values;
    let hi = hi.min(d.len() - 1);
    let tau = match (lo..=hi).find(|&t| d[t] < threshold) {
        Some(mut t) => {
            while t < hi && d[t + 1] < d[t] {
                t += 1;
            }
            t
        }
        None => (lo..=hi).fold(lo, |best, t| if d[t] < d[best] { t } else { best }),
    };
    let mut lag = tau as f64;
    if tau >= 1 && tau + 1 < d.len() {
        let (a, b, c) = (d[tau - 1], d[tau], d[tau + 1]);
        let curvature = a - 2.0 * b + c;
        if curvature > 0.0 {
            lag += (0.5 * (a - c) / curvature).clamp(-1.0, 1.0);
        }
    }
    Some((lag, d[tau]))
}

/// Per-frame pitch and periodicity. Aperiodic frames get f0 = 0 and
/// periodicity 0.
pub fn dsp_estimate(buf: &AudioBuffer, frames: &FrameSpec, config: &DspConfig) -> Result<PitchTrack> {
    let sr = buf.sample_rate();
    let (lo, hi) = config.lag_range(sr)?;
    let framed = audio::frame(buf, frames)?;
    if framed.window_size() < 2 * (hi + 1) {
        return Err(Error::invalid(format!(
            "window of {} samples cannot resolve {} Hz at {sr} Hz",
            framed.window_size(),
            config.fmin
        )));
    }
    let estimates: Vec<Result<(f64, f64)>> = framed
        .as_slice()
        .par_chunks(framed.window_size())
        .map(|f| {
            let c = cmnd(f, hi + 1)?;
            Ok(match pick_lag(&c, lo, hi, config.threshold) {
                Some((lag, d)) => (sr as f64 / lag, (1.0 - d).clamp(0.0, 1.0)),
                None => (0.0, 0.0),
            })
        })
        .collect();
    let mut track = PitchTrack::default();
    for (t, e) in estimates.into_iter().enumerate() {
        let (f0, h) = e?;
        track.times.push(frames.center_sample(t) as f64 / sr as f64);
        track.f0.push(f0);
        track.periodicity.push(h);
    }
    track.voiced = voicing(&track.periodicity, config.voicing_threshold);
    Ok(track)
}
