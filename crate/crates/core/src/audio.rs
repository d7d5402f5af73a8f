//! Audio ingestion, band-limited resampling and framing.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate the network operates at.
pub const MODEL_SAMPLE_RATE: u32 = 8000;
/// Samples per analysis window.
pub const WINDOW_SIZE: usize = 1024;
/// 10 ms at [`MODEL_SAMPLE_RATE`].
pub const DEFAULT_HOP: usize = 80;

/// Zero crossings of the resampling kernel on each side of its center.
const SINC_ZERO_CROSSINGS: usize = 64;

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} is {}", samples[i])));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Where frame `t` is centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Frame `t` is centered on sample `t * hop`.
    CenterAtZero,
    /// Frame `t` is centered on sample `window_size / 2 + t * hop`, i.e. the
    /// first frame starts at sample 0 with no left padding.
    CenterAtHalfWindow,
}

impl Alignment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Alignment::CenterAtZero => "center_at_zero",
            Alignment::CenterAtHalfWindow => "center_at_half_window",
        }
    }
}

impl std::str::FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center_at_zero" | "zero" => Ok(Alignment::CenterAtZero),
            "center_at_half_window" | "half_window" => Ok(Alignment::CenterAtHalfWindow),
            other => Err(Error::invalid(format!("unknown alignment '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub window_size: usize,
    pub hop: usize,
    pub alignment: Alignment,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            window_size: WINDOW_SIZE,
            hop: DEFAULT_HOP,
            alignment: Alignment::CenterAtZero,
        }
    }
}

impl FrameSpec {
    pub fn new(window_size: usize, hop: usize, alignment: Alignment) -> Result<Self> {
        let spec = Self {
            window_size,
            hop,
            alignment,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.hop == 0 {
            return Err(Error::invalid(format!(
                "window size and hop must be positive (got {} and {})",
                self.window_size, self.hop
            )));
        }
        Ok(())
    }

    /// Index of the sample frame `t` is centered on.
    pub fn center_sample(&self, t: usize) -> usize {
        match self.alignment {
            Alignment::CenterAtZero => t * self.hop,
            Alignment::CenterAtHalfWindow => self.window_size / 2 + t * self.hop,
        }
    }

    /// Number of frames produced for a signal of `len` samples.
    ///
    /// `CenterAtZero` covers every hop position up to the last sample;
    /// `CenterAtHalfWindow` covers the windows that start inside the signal
    /// and fit in it (at least one).
    pub fn num_frames(&self, len: usize) -> usize {
        match self.alignment {
            Alignment::CenterAtZero => len / self.hop + 1,
            Alignment::CenterAtHalfWindow if len >= self.window_size => {
                (len - self.window_size) / self.hop + 1
            }
            Alignment::CenterAtHalfWindow => 1,
        }
    }

    /// Signed index of the first sample of frame `t`.
    fn start_sample(&self, t: usize) -> isize {
        self.center_sample(t) as isize - (self.window_size / 2) as isize
    }
}

/// Framed audio, stored contiguously (`count` rows of `window_size`).
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    data: Vec<f32>,
    window_size: usize,
}

impl Frames {
    pub fn len(&self) -> usize {
        if self.window_size == 0 {
            0
        } else {
            self.data.len() / self.window_size
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn get(&self, t: usize) -> &[f32] {
        &self.data[t * self.window_size..(t + 1) * self.window_size]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.window_size)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Cut `buf` into windows per `spec`. Samples outside the signal are zeros;
/// frames are not normalized in any way.
pub fn frame(buf: &AudioBuffer, spec: &FrameSpec) -> Result<Frames> {
    spec.validate()?;
    if buf.is_empty() {
        return Err(Error::Degenerate("cannot frame an empty buffer".into()));
    }
    let len = buf.len();
    if spec.window_size > 4 * len {
        return Err(Error::Degenerate(format!(
            "window of {} samples is more than four times the {len}-sample signal",
            spec.window_size
        )));
    }
    let count = spec.num_frames(len);
    let w = spec.window_size;
    let mut data = vec![0.0f32; count * w];
    for (t, out) in data.chunks_exact_mut(w).enumerate() {
        let start = spec.start_sample(t);
        let lo = start.max(0) as usize;
        let hi = ((start + w as isize).max(0) as usize).min(len);
        if lo < hi {
            let offset = (lo as isize - start) as usize;
            out[offset..offset + (hi - lo)].copy_from_slice(&buf.samples[lo..hi]);
        }
    }
    Ok(Frames { data, window_size: w })
}

/// Read a RIFF/WAVE file (16-bit PCM or 32-bit float), averaging channels.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format("WAV header declares zero channels".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!(
                "{bits}-bit {fmt:?} samples in {}",
                path.display()
            )))
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|c| (c.iter().map(|&s| s as f64).sum::<f64>() / channels as f64) as f32)
            .collect()
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Write mono 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &buf.samples {
        writer.write_sample(s).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, err: hound::Error) -> Error {
    match err {
        // The file is already open, so read failures mean short or damaged content.
        hound::Error::IoError(e) => Error::Format(format!("{}: truncated WAV data ({e})", path.display())),
        hound::Error::FormatError(msg) => Error::Format(format!("{}: {msg}", path.display())),
        hound::Error::Unsupported => {
            Error::Unsupported(format!("{}: unsupported WAV encoding", path.display()))
        }
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Resample with a polyphase windowed-sinc filter.
///
/// The output has `round(len * target / source)` samples. When downsampling
/// the kernel cutoff tracks the target Nyquist rate.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    let source_rate = buf.sample_rate;
    if target_rate == source_rate {
        return Ok(buf.clone());
    }
    let g = gcd(source_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = source_rate as u64 / g;
    let out_len =
        ((buf.len() as u128 * target_rate as u128 + source_rate as u128 / 2) / source_rate as u128) as usize;

    let bank = PolyphaseBank::new(up as usize, source_rate, target_rate);
    let x = &buf.samples;
    let n_in = x.len() as isize;
    let half = bank.half_taps as isize;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let pos = n * down;
        let base = (pos / up) as isize;
        let taps = bank.phase((pos % up) as usize);
        let mut acc = 0.0f64;
        // taps[j] multiplies x[base - half + 1 + j]
        let first = base - half + 1;
        let lo = (-first).max(0) as usize;
        let hi = ((n_in - first).max(0) as usize).min(taps.len());
        for j in lo..hi {
            acc += taps[j] * x[(first + j as isize) as usize] as f64;
        }
        out.push(acc as f32);
    }
    AudioBuffer::new(out, target_rate)
}

struct PolyphaseBank {
    taps: Vec<f64>,
    half_taps: usize,
}

impl PolyphaseBank {
    fn new(phases: usize, source_rate: u32, target_rate: u32) -> Self {
        // Cutoff relative to the input Nyquist frequency.
        let cutoff = (target_rate as f64 / source_rate as f64).min(1.0);
        let half_width = SINC_ZERO_CROSSINGS as f64 / cutoff;
        let half_taps = half_width.ceil() as usize;
        let width = 2 * half_taps;
        let mut taps = vec![0.0; phases * width];
        for (p, row) in taps.chunks_exact_mut(width).enumerate() {
            let frac = p as f64 / phases as f64;
            for (j, tap) in row.iter_mut().enumerate() {
                // Distance from the output instant to input sample base - half + 1 + j.
                let x = (j as f64 - half_taps as f64 + 1.0) - frac;
                *tap = cutoff * sinc(cutoff * x) * blackman(x, half_width);
            }
            let sum: f64 = row.iter().sum();
            if sum.abs() > 0.0 {
                row.iter_mut().for_each(|t| *t /= sum);
            }
        }
        Self { taps, half_taps }
    }

    fn phase(&self, p: usize) -> &[f64] {
        let w = 2 * self.half_taps;
        &self.taps[p * w..(p + 1) * w]
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window evaluated at offset `x` from the center of a window
/// spanning `[-half_width, half_width]`.
fn blackman(x: f64, half_width: f64) -> f64 {
    if x.abs() >= half_width {
        return 0.0;
    }
    let u = (x / half_width + 1.0) * 0.5;
    0.42 - 0.5 * (2.0 * PI * u).cos() + 0.08 * (4.0 * PI * u).cos()
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}
