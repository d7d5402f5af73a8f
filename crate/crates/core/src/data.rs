//! Synthetic corpora, annotation files and data splits.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{self, Alignment, AudioBuffer, FrameSpec, MODEL_SAMPLE_RATE};
use crate::bins::BinGrid;
use crate::error::{Error, Result};
use crate::training::{Target, TrainExample};

/// Audio with per-frame ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedClip {
    pub audio: AudioBuffer,
    /// Hz per frame, 0 where unvoiced.
    pub pitch: Vec<f64>,
    pub voiced: Vec<bool>,
    pub frames: FrameSpec,
}

impl AnnotatedClip {
    pub fn new(audio: AudioBuffer, pitch: Vec<f64>, voiced: Vec<bool>, frames: FrameSpec) -> Result<Self> {
        if pitch.len() != voiced.len() {
            return Err(Error::shape(format!("{} pitches against {} voicing flags", pitch.len(), voiced.len())));
        }
        if let Some(i) = (0..pitch.len()).find(|&i| voiced[i] && !(pitch[i] > 0.0)) {
            return Err(Error::invalid(format!("frame {i} is voiced without a positive pitch")));
        }
        Ok(Self { audio, pitch, voiced, frames })
    }

    pub fn num_frames(&self) -> usize {
        self.pitch.len()
    }

    pub fn times(&self) -> Vec<f64> {
        let sr = self.audio.sample_rate() as f64;
        (0..self.num_frames()).map(|t| self.frames.center_sample(t) as f64 / sr).collect()
    }

    /// Annotation rows in file form: frame `t` is written at `t * hop`
    /// and tagged with the clip's alignment.
    pub fn annotations(&self) -> Annotations {
        let sr = self.audio.sample_rate();
        Annotations {
            raw_times: (0..self.num_frames()).map(|t| (t * self.frames.hop) as f64 / sr as f64).collect(),
            f0: self.pitch.clone(),
            voiced: self.voiced.clone(),
            alignment: self.frames.alignment,
            half_window_secs: 0.0,
        }
        .retag(self.frames.alignment, &self.frames, sr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub f0_min: f64,
    pub f0_max: f64,
    pub harmonics: usize,
    pub vibrato_cents: f64,
    pub vibrato_hz: f64,
    /// Signal-to-noise ratio of added white noise; `None` for a clean clip.
    pub snr_db: Option<f64>,
    pub unvoiced_fraction: f64,
    pub duration_secs: f64,
    pub sample_rate: u32,
    pub frames: FrameSpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            f0_min: 80.0,
            f0_max: 800.0,
            harmonics: 5,
            vibrato_cents: 20.0,
            vibrato_hz: 5.0,
            snr_db: Some(30.0),
            unvoiced_fraction: 0.3,
            duration_secs: 4.0,
            sample_rate: MODEL_SAMPLE_RATE,
            frames: FrameSpec::default(),
            seed: 0,
        }
    }
}

/// Spacing of the random walk's knots.
const KNOT_SECS: f64 = 0.25;
/// Standard deviation of one random walk step.
const STEP_CENTS: f64 = 100.0;
/// Typical unvoiced segment length.
const UNVOICED_SEGMENT_SECS: f64 = 0.3;
const FADE_SECS: f64 = 0.005;

impl SynthSpec {
    pub fn validate(&self, grid: &BinGrid) -> Result<()> {
        self.frames.validate()?;
        if !(self.f0_min > 0.0 && self.f0_max >= self.f0_min) {
            return Err(Error::invalid(format!("bad f0 range {}..{}", self.f0_min, self.f0_max)));
        }
        if self.f0_min < grid.fmin() || self.f0_max > grid.fmax() {
            return Err(Error::invalid(format!(
                "f0 range {}..{} leaves the grid range {:.1}..{:.1}",
                self.f0_min,
                self.f0_max,
                grid.fmin(),
                grid.fmax()
            )));
        }
        if self.f0_max >= self.sample_rate as f64 / 2.0 {
            return Err(Error::invalid("f0 range reaches the Nyquist frequency"));
        }
        if self.harmonics == 0 {
            return Err(Error::invalid("need at least one harmonic"));
        }
        if !(0.0..1.0).contains(&self.unvoiced_fraction) {
            return Err(Error::invalid(format!("unvoiced fraction {} outside [0, 1)", self.unvoiced_fraction)));
        }
        if !(self.duration_secs > 0.0) || self.vibrato_cents < 0.0 || self.vibrato_hz < 0.0 {
            return Err(Error::invalid("duration must be positive and vibrato non-negative"));
        }
        if self.snr_db.is_some_and(|s| !s.is_finite()) {
            return Err(Error::invalid("snr must be finite; use None for a clean clip"));
        }
        Ok(())
    }
}

/// Smooth random pitch contour in cents above `f0_min`, one value per sample.
fn contour_cents(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let range = 1200.0 * (spec.f0_max / spec.f0_min).log2();
    let sr = spec.sample_rate as f64;
    let knot_len = (KNOT_SECS * sr).max(1.0);
    let knots = (n as f64 / knot_len).ceil() as usize + 2;
    let step = Normal::new(0.0, STEP_CENTS).expect("valid deviation");
    let mut walk = Vec::with_capacity(knots);
    let mut c = rng.gen_range(0.0..=range);
    for _ in 0..knots {
        walk.push(c);
        c = (c + step.sample(rng)).clamp(0.0, range);
    }
    let vib_phase = rng.gen_range(0.0..TAU);
    (0..n)
        .map(|i| {
            let pos = i as f64 / knot_len;
            let k = pos.floor() as usize;
            let u = pos - k as f64;
            let s = u * u * (3.0 - 2.0 * u);
            let base = walk[k] + (walk[k + 1] - walk[k]) * s;
            let vib = spec.vibrato_cents * (TAU * spec.vibrato_hz * i as f64 / sr + vib_phase).sin();
            (base + vib).clamp(0.0, range)
        })
        .collect()
}

/// Per-sample voiced mask with `fraction` of the samples unvoiced, in
/// segments interleaved with voiced stretches.
fn voicing_mask(n: usize, fraction: f64, sr: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let unvoiced = (fraction * n as f64).round() as usize;
    if unvoiced == 0 {
        return vec![true; n];
    }
    let segments = ((unvoiced as f64 / (UNVOICED_SEGMENT_SECS * sr)).round() as usize).max(1);
    let split = |total: usize, parts: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.gen_range(0..=total)).collect();
        cuts.sort_unstable();
        let mut out = Vec::with_capacity(parts);
        let mut prev = 0;
        for c in cuts.into_iter().chain(std::iter::once(total)) {
            out.push(c - prev);
            prev = c;
        }
        out
    };
    let u = split(unvoiced, segments, rng);
    let v = split(n - unvoiced, segments + 1, rng);
    let mut mask = Vec::with_capacity(n);
    for i in 0..segments {
        mask.extend(std::iter::repeat(true).take(v[i]));
        mask.extend(std::iter::repeat(false).take(u[i]));
    }
    mask.extend(std::iter::repeat(true).take(v[segments]));
    mask
}

/// Harmonic tone along a random contour with white-noise gaps.
pub fn synth_clip(spec: &SynthSpec) -> Result<AnnotatedClip> {
    synth_clip_on(spec, &BinGrid::fine())
}

/// [`synth_clip`] with the pitch range checked against `grid`.
pub fn synth_clip_on(spec: &SynthSpec, grid: &BinGrid) -> Result<AnnotatedClip> {
    spec.validate(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sr = spec.sample_rate as f64;
    let n = ((spec.duration_secs * sr).round() as usize).max(1);
    let cents = contour_cents(spec, n, &mut rng);
    let mask = voicing_mask(n, spec.unvoiced_fraction, sr, &mut rng);
    let hz: Vec<f64> = cents.iter().map(|c| spec.f0_min * (c / 1200.0).exp2()).collect();

    let fade = (FADE_SECS * sr).max(1.0);
    let mut envelope = vec![0.0; n];
    let mut level = 0.0f64;
    for (e, &v) in envelope.iter_mut().zip(&mask) {
        level = if v { (level + 1.0 / fade).min(1.0) } else { (level - 1.0 / fade).max(0.0) };
        *e = level;
    }

    let mut phase = rng.gen_range(0.0..TAU);
    let mut tone = vec![0.0f64; n];
    for i in 0..n {
        if envelope[i] > 0.0 {
            let mut s = 0.0;
            for k in (1..=spec.harmonics).take_while(|&k| k as f64 * hz[i] < sr / 2.0) {
                s += (k as f64 * phase).sin() / k as f64;
            }
            tone[i] = 0.5 * envelope[i] * s;
        }
        phase = (phase + TAU * hz[i] / sr) % TAU;
    }
    let voiced_power = {
        let (sum, count) = tone
            .iter()
            .zip(&mask)
            .filter(|(_, &v)| v)
            .fold((0.0, 0usize), |(s, c), (x, _)| (s + x * x, c + 1));
        if count > 0 { sum / count as f64 } else { 0.125 }
    };
    let gap_level = voiced_power.sqrt() * rng.gen_range(0.3..1.0);
    let gap = Normal::new(0.0, gap_level).expect("valid deviation");
    for i in 0..n {
        tone[i] += (1.0 - envelope[i]) * gap.sample(&mut rng);
    }
    if let Some(snr) = spec.snr_db {
        let noise = Normal::new(0.0, (voiced_power / 10f64.powf(snr / 10.0)).sqrt()).expect("valid deviation");
        for x in tone.iter_mut() {
            *x += noise.sample(&mut rng);
        }
    }
    let audio = AudioBuffer::new(tone.iter().map(|&x| x as f32).collect(), spec.sample_rate)?;

    let count = spec.frames.num_frames(n);
    let mut pitch = Vec::with_capacity(count);
    let mut voiced = Vec::with_capacity(count);
    for t in 0..count {
        let c = spec.frames.center_sample(t).min(n - 1);
        voiced.push(mask[c]);
        pitch.push(if mask[c] { hz[c] } else { 0.0 });
    }
    AnnotatedClip::new(audio, pitch, voiced, spec.frames)
}

/// Pitch and voicing read from a `time_sec,f0_hz,voiced` file. The file's
/// timestamps are kept as written; [`Annotations::times`] applies the
/// alignment correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub raw_times: Vec<f64>,
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
    pub alignment: Alignment,
    half_window_secs: f64,
}

pub const ANNOTATION_HEADER: [&str; 3] = ["time_sec", "f0_hz", "voiced"];

#[derive(Deserialize)]
struct AnnotationRow {
    time_sec: f64,
    f0_hz: f64,
    voiced: u8,
}

impl Annotations {
    /// Timestamps of frame centers. A `CenterAtHalfWindow` file is moved
    /// later by half a window.
    pub fn times(&self) -> Vec<f64> {
        match self.alignment {
            Alignment::CenterAtZero => self.raw_times.clone(),
            Alignment::CenterAtHalfWindow => self.raw_times.iter().map(|t| t + self.half_window_secs).collect(),
        }
    }

    /// Same rows under another alignment tag.
    pub fn retag(&self, alignment: Alignment, frames: &FrameSpec, sample_rate: u32) -> Self {
        Self {
            alignment,
            half_window_secs: (frames.window_size / 2) as f64 / sample_rate as f64,
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.raw_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_times.is_empty()
    }

    /// Reference pitch and voicing at each of `times`, from the nearest
    /// annotation. Times further than `tolerance` seconds from every
    /// annotation are unvoiced.
    pub fn at_times(&self, times: &[f64], tolerance: f64) -> (Vec<f64>, Vec<bool>) {
        let own = self.times();
        let mut f0 = Vec::with_capacity(times.len());
        let mut voiced = Vec::with_capacity(times.len());
        for &t in times {
            let j = own.partition_point(|&x| x < t);
            let nearest = [j.checked_sub(1), (j < own.len()).then_some(j)]
                .into_iter()
                .flatten()
                .min_by(|&a, &b| (own[a] - t).abs().total_cmp(&(own[b] - t).abs()));
            match nearest {
                Some(k) if (own[k] - t).abs() <= tolerance && self.voiced[k] => {
                    f0.push(self.f0[k]);
                    voiced.push(true);
                }
                _ => {
                    f0.push(0.0);
                    voiced.push(false);
                }
            }
        }
        (f0, voiced)
    }

    /// File form: raw timestamps, six decimals.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(ANNOTATION_HEADER).map_err(err)?;
        for i in 0..self.len() {
            w.write_record([
                format!("{:.6}", self.raw_times[i]),
                format!("{:.6}", self.f0[i]),
                (self.voiced[i] as u8).to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is ASCII"))
    }

    pub fn from_csv(text: &str, alignment: Alignment, frames: &FrameSpec, sample_rate: u32) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers().map_err(|e| Error::Format(e.to_string()))?;
        if headers.iter().ne(ANNOTATION_HEADER) {
            return Err(Error::Format(format!("expected header {}", ANNOTATION_HEADER.join(","))));
        }
        let mut raw_times = Vec::new();
        let mut f0 = Vec::new();
        let mut voiced = Vec::new();
        for (i, row) in r.deserialize::<AnnotationRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Format(format!("line {line}: {e}")))?;
            if row.voiced > 1 {
                return Err(Error::Format(format!("line {line}: voiced must be 0 or 1")));
            }
            if !row.time_sec.is_finite() || !row.f0_hz.is_finite() || row.f0_hz < 0.0 {
                return Err(Error::Format(format!("line {line}: bad time or frequency")));
            }
            if row.voiced == 1 && row.f0_hz <= 0.0 {
                return Err(Error::Format(format!("line {line}: voiced frame with f0 = {}", row.f0_hz)));
            }
            if raw_times.last().is_some_and(|&prev| row.time_sec <= prev) {
                return Err(Error::Format(format!("line {line}: timestamps must increase")));
            }
            raw_times.push(row.time_sec);
            f0.push(row.f0_hz);
            voiced.push(row.voiced == 1);
        }
        let base = Self { raw_times, f0, voiced, alignment, half_window_secs: 0.0 };
        Ok(base.retag(alignment, frames, sample_rate))
    }
}

/// Read an annotation file tagged with `alignment`.
pub fn load_annotations(
    path: impl AsRef<Path>,
    alignment: Alignment,
    frames: &FrameSpec,
    sample_rate: u32,
) -> Result<Annotations> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Annotations::from_csv(&text, alignment, frames, sample_rate)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 70/15/15 split of `n` clip indices. Validation and test each get
/// `max(1, round(0.15 n))` clips; training gets the rest.
pub fn partition(n: usize, seed: u64) -> Result<Partition> {
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 clips to split, got {n}")));
    }
    let held = ((0.15 * n as f64).round() as usize).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut valid = order[..held].to_vec();
    let mut test = order[held..2 * held].to_vec();
    let mut train = order[2 * held..].to_vec();
    valid.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Partition { train, valid, test })
}

/// Framed training examples. Unvoiced frames are kept only when
/// `include_unvoiced` is set.
pub fn training_examples(clips: &[AnnotatedClip], grid: &BinGrid, include_unvoiced: bool) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for clip in clips {
        let framed = audio::frame(&clip.audio, &clip.frames)?;
        if framed.len() != clip.num_frames() {
            return Err(Error::shape(format!(
                "clip has {} frames of audio but {} annotations",
                framed.len(),
                clip.num_frames()
            )));
        }
        for (t, frame) in framed.iter().enumerate() {
            let target = if clip.voiced[t] {
                Target::Voiced(grid.quantize(clip.pitch[t])?)
            } else if include_unvoiced {
                Target::Unvoiced
            } else {
                continue;
            };
            out.push(TrainExample { frame: frame.to_vec(), target });
        }
    }
    Ok(out)
}

/// Contents of `corpus.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub sample_rate: u32,
    pub alignment: Alignment,
    pub frames: FrameSpec,
    pub clips: Vec<String>,
}

pub const MANIFEST_FILE: &str = "corpus.json";

pub fn clip_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join("clips").join(format!("{name}.wav")), dir.join("annotations").join(format!("{name}.csv")))
}

/// Write `clips/*.wav`, `annotations/*.csv` and `corpus.json` under `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, clips: &[AnnotatedClip]) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    let first = clips.first().ok_or_else(|| Error::invalid("corpus has no clips"))?;
    for sub in ["clips", "annotations"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut names = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        if clip.frames != first.frames || clip.audio.sample_rate() != first.audio.sample_rate() {
            return Err(Error::invalid("clips differ in framing or sample rate"));
        }
        let name = format!("clip_{i:04}");
        let (wav, csv_path) = clip_paths(dir, &name);
        audio::write_wav(&wav, &clip.audio)?;
        std::fs::write(&csv_path, clip.annotations().to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        names.push(name);
    }
    let manifest = CorpusManifest {
        sample_rate: first.audio.sample_rate(),
        alignment: first.frames.alignment,
        frames: first.frames,
        clips: names,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Load every clip listed in `corpus.json`.
pub fn read_corpus(dir: impl AsRef<Path>) -> Result<(CorpusManifest, Vec<AnnotatedClip>)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for name in &manifest.clips {
        let (wav, csv_path) = clip_paths(dir, name);
        let audio = audio::load_wav(&wav)?;
        let ann = load_annotations(&csv_path, manifest.alignment, &manifest.frames, manifest.sample_rate)?;
        let count = manifest.frames.num_frames(audio.len());
        if ann.len() != count {
            return Err(Error::Format(format!("{name}: {} annotations for {count} frames", ann.len())));
        }
        clips.push(AnnotatedClip::new(audio, ann.f0, ann.voiced, manifest.frames)?);
    }
    Ok((manifest, clips))
}

/// Corpus of `count` clips whose seeds follow from `seed`.
pub fn synth_corpus(base: &SynthSpec, count: usize, seed: u64) -> Result<Vec<AnnotatedClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| synth_clip(&SynthSpec { seed: rng.gen(), ..*base }))
        .collect()
}
