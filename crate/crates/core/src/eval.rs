//! Pitch and voicing metrics, and the real-time-factor benchmark.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bins::{signed_cents, CENTS_PER_OCTAVE};
use crate::decode::PitchTrack;
use crate::error::{Error, Result};
use crate::pipeline::{process_file, PitchEstimator};

pub use crate::decode::{voicing_f1, F1Score};

/// Pitch threshold for RPA and RCA, in cents.
pub const DEFAULT_EPSILON_CENTS: f64 = 50.0;

/// Errors up to this far past the threshold still count as hits, so that
/// a ratio built to sit exactly on the threshold is not lost to rounding.
pub const THRESHOLD_SLACK_CENTS: f64 = 1e-9;

fn check_lengths(ref_f0: &[f64], ref_voiced: &[bool], pred_f0: &[f64]) -> Result<()> {
    if ref_f0.len() != ref_voiced.len() || ref_f0.len() != pred_f0.len() {
        return Err(Error::shape(format!(
            "reference has {} pitches and {} flags, prediction has {} pitches",
            ref_f0.len(),
            ref_voiced.len(),
            pred_f0.len()
        )));
    }
    Ok(())
}

/// Signed cents from reference to prediction, or `None` when either side
/// is not a positive frequency.
fn cents_error(y: f64, y_hat: f64) -> Option<f64> {
    (y > 0.0 && y_hat > 0.0 && y.is_finite() && y_hat.is_finite()).then(|| signed_cents(y, y_hat))
}

/// Distance to the nearest octave multiple.
pub fn fold_to_chroma(cents: f64) -> f64 {
    let r = cents.abs().rem_euclid(CENTS_PER_OCTAVE);
    r.min(CENTS_PER_OCTAVE - r)
}

fn accuracy(ref_f0: &[f64], ref_voiced: &[bool], pred_f0: &[f64], correct: impl Fn(f64) -> bool) -> Result<f64> {
    check_lengths(ref_f0, ref_voiced, pred_f0)?;
    let (mut hits, mut scored) = (0usize, 0usize);
    for i in (0..ref_f0.len()).filter(|&i| ref_voiced[i]) {
        scored += 1;
        if cents_error(ref_f0[i], pred_f0[i]).is_some_and(&correct) {
            hits += 1;
        }
    }
    if scored == 0 {
        return Err(Error::Degenerate("no reference-voiced frames to score".into()));
    }
    Ok(hits as f64 / scored as f64)
}

/// Raw pitch accuracy: the share of reference-voiced frames whose
/// prediction is within `epsilon` cents.
pub fn rpa(ref_f0: &[f64], ref_voiced: &[bool], pred_f0: &[f64], epsilon: f64) -> Result<f64> {
    accuracy(ref_f0, ref_voiced, pred_f0, |d| d.abs() <= epsilon + THRESHOLD_SLACK_CENTS)
}

/// Raw chroma accuracy: as [`rpa`] with errors folded onto one octave.
pub fn rca(ref_f0: &[f64], ref_voiced: &[bool], pred_f0: &[f64], epsilon: f64) -> Result<f64> {
    accuracy(ref_f0, ref_voiced, pred_f0, |d| fold_to_chroma(d) <= epsilon + THRESHOLD_SLACK_CENTS)
}

/// Mean absolute cents error over frames voiced in both tracks; `None`
/// when there are none.
pub fn delta_cents(ref_f0: &[f64], ref_voiced: &[bool], pred_f0: &[f64], pred_voiced: &[bool]) -> Result<Option<f64>> {
    check_lengths(ref_f0, ref_voiced, pred_f0)?;
    if pred_voiced.len() != pred_f0.len() {
        return Err(Error::shape("prediction pitches and flags differ in length"));
    }
    let (mut total, mut n) = (0.0, 0usize);
    for i in 0..ref_f0.len() {
        if ref_voiced[i] && pred_voiced[i] {
            let d = cents_error(ref_f0[i], pred_f0[i])
                .ok_or_else(|| Error::invalid(format!("frame {i} is voiced with a non-positive pitch")))?;
            total += d.abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub delta_cents: Option<f64>,
    pub rpa: f64,
    pub rca: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Reference-voiced frames, the RPA and RCA denominator.
    pub frames_scored: usize,
    pub frames_total: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full metric suite for a prediction against reference pitch and voicing.
pub fn evaluate(ref_f0: &[f64], ref_voiced: &[bool], pred: &PitchTrack, epsilon: f64) -> Result<EvalReport> {
    if pred.voiced.len() != pred.f0.len() {
        return Err(Error::shape("prediction pitches and flags differ in length"));
    }
    let f1 = voicing_f1(ref_voiced, &pred.voiced)?;
    Ok(EvalReport {
        delta_cents: delta_cents(ref_f0, ref_voiced, &pred.f0, &pred.voiced)?,
        rpa: rpa(ref_f0, ref_voiced, &pred.f0, epsilon)?,
        rca: rca(ref_f0, ref_voiced, &pred.f0, epsilon)?,
        f1: f1.f1,
        precision: f1.precision,
        recall: f1.recall,
        frames_scored: ref_voiced.iter().filter(|&&v| v).count(),
        frames_total: ref_voiced.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub audio_seconds: f64,
    pub wall_seconds: f64,
    pub rtf: f64,
    pub thread_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtfBenchmark {
    pub single_thread: RtfReport,
    pub all_cores: RtfReport,
}

/// Time `estimator` over `wavs` on a dedicated pool of `threads` workers.
/// The clock covers loading, resampling, estimation and writing each CSV
/// into `out_dir`.
pub fn time_rtf(
    estimator: &dyn PitchEstimator,
    wavs: &[PathBuf],
    hop_ms: f64,
    out_dir: &Path,
    threads: usize,
) -> Result<RtfReport> {
    if wavs.is_empty() {
        return Err(Error::invalid("no input files to benchmark"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let thread_count = pool.current_num_threads();
    let start = Instant::now();
    let audio_seconds = pool.install(|| -> Result<f64> {
        let mut secs = 0.0;
        for (i, wav) in wavs.iter().enumerate() {
            secs += process_file(estimator, wav, out_dir.join(format!("{i}.csv")), hop_ms)?;
        }
        Ok(secs)
    })?;
    let wall_seconds = start.elapsed().as_secs_f64();
    if audio_seconds <= 0.0 {
        return Err(Error::Degenerate("benchmark inputs contain no audio".into()));
    }
    Ok(RtfReport { audio_seconds, wall_seconds, rtf: wall_seconds / audio_seconds, thread_count })
}

/// One single-thread run and one run on every core.
pub fn benchmark_rtf(estimator: &dyn PitchEstimator, wavs: &[PathBuf], hop_ms: f64, out_dir: &Path) -> Result<RtfBenchmark> {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    Ok(RtfBenchmark {
        single_thread: time_rtf(estimator, wavs, hop_ms, out_dir, 1)?,
        all_cores: time_rtf(estimator, wavs, hop_ms, out_dir, cores)?,
    })
}

/// One row of the comparison table; missing cells print as a dash.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: String,
    pub delta_cents: Option<f64>,
    pub rpa: Option<f64>,
    pub rca: Option<f64>,
    pub f1_entropy: Option<f64>,
    pub f1_max: Option<f64>,
    pub rtf_cpu: Option<f64>,
    pub rtf_cpu_all_cores: Option<f64>,
}

pub fn markdown_table(rows: &[BenchmarkRow]) -> String {
    let cell = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
    let mut out = String::from("| Method | Δ¢ | RPA | RCA | F1-entropy | F1-max | RTF-CPU | RTF-CPU (all cores) |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            r.method,
            cell(r.delta_cents, 2),
            cell(r.rpa, 4),
            cell(r.rca, 4),
            cell(r.f1_entropy, 4),
            cell(r.f1_max, 4),
            cell(r.rtf_cpu, 4),
            cell(r.rtf_cpu_all_cores, 4)
        );
    }
    out
}
