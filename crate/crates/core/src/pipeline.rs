//! File-to-file pitch estimation: load, resample, estimate, save.

use std::path::Path;

use crate::audio::{self, Alignment, AudioBuffer, FrameSpec, MODEL_SAMPLE_RATE};
use crate::data::AnnotatedClip;
use crate::decode::{periodicity_entropy, periodicity_max, voicing, Decoder, PeriodicityMethod, PitchTrack, Posteriorgram};
use crate::dsp::{dsp_estimate, DspConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::network::PitchModel;

/// Frames per forward call during inference.
pub const INFERENCE_CHUNK: usize = 64;

pub const DEFAULT_HOP_MS: f64 = 10.0;

/// Hop in samples for a hop in milliseconds at `sample_rate`.
pub fn hop_samples(hop_ms: f64, sample_rate: u32) -> Result<usize> {
    if !(hop_ms > 0.0 && hop_ms.is_finite()) {
        return Err(Error::invalid(format!("hop must be positive, got {hop_ms} ms")));
    }
    let hop = (hop_ms * sample_rate as f64 / 1000.0).round() as usize;
    if hop == 0 {
        return Err(Error::invalid(format!("hop of {hop_ms} ms is under one sample")));
    }
    Ok(hop)
}

/// Anything that turns model-rate audio into a pitch track.
pub trait PitchEstimator: Sync {
    fn name(&self) -> String;

    fn window_size(&self) -> usize;

    /// `buf` must already be at [`MODEL_SAMPLE_RATE`].
    fn estimate(&self, buf: &AudioBuffer, frames: &FrameSpec) -> Result<PitchTrack>;

    fn frame_spec(&self, hop_ms: f64) -> Result<FrameSpec> {
        FrameSpec::new(self.window_size(), hop_samples(hop_ms, MODEL_SAMPLE_RATE)?, Alignment::CenterAtZero)
    }
}

#[derive(Debug, Clone)]
pub struct NeuralEstimator {
    pub model: PitchModel,
    pub decoder: Decoder,
    pub periodicity: PeriodicityMethod,
    pub threshold: f64,
}

impl NeuralEstimator {
    pub fn new(model: PitchModel, decoder: Decoder, periodicity: PeriodicityMethod, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::invalid(format!("threshold must lie in [0, 1], got {threshold}")));
        }
        Ok(Self { model, decoder, periodicity, threshold })
    }

    pub fn posteriorgram(&self, buf: &AudioBuffer, frames: &FrameSpec) -> Result<Posteriorgram> {
        if buf.sample_rate() != MODEL_SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "expected {MODEL_SAMPLE_RATE} Hz audio, got {} Hz",
                buf.sample_rate()
            )));
        }
        if frames.window_size != self.window_size() {
            return Err(Error::invalid(format!(
                "model takes {}-sample frames, not {}",
                self.window_size(),
                frames.window_size
            )));
        }
        let framed = audio::frame(buf, frames)?;
        let logits = self
            .model
            .network
            .forward_frames(&self.model.params, framed.as_slice(), INFERENCE_CHUNK)?;
        Posteriorgram::from_logits(&logits, self.model.grid)
    }

    /// Track from an already computed posteriorgram.
    pub fn decode(&self, post: &Posteriorgram, frames: &FrameSpec) -> Result<PitchTrack> {
        let f0 = self.decoder.decode(post)?;
        let periodicity = self.periodicity.compute(post);
        let voiced = voicing(&periodicity, self.threshold);
        let times = (0..post.num_frames())
            .map(|t| frames.center_sample(t) as f64 / MODEL_SAMPLE_RATE as f64)
            .collect();
        Ok(PitchTrack { times, f0, periodicity, voiced })
    }
}

impl PitchEstimator for NeuralEstimator {
    fn name(&self) -> String {
        "neural".into()
    }

    fn window_size(&self) -> usize {
        self.model.network.input_len()
    }

    fn estimate(&self, buf: &AudioBuffer, frames: &FrameSpec) -> Result<PitchTrack> {
        let post = self.posteriorgram(buf, frames)?;
        self.decode(&post, frames)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DspEstimator {
    pub config: DspConfig,
}

impl PitchEstimator for DspEstimator {
    fn name(&self) -> String {
        "cmnd".into()
    }

    fn window_size(&self) -> usize {
        audio::WINDOW_SIZE
    }

    fn estimate(&self, buf: &AudioBuffer, frames: &FrameSpec) -> Result<PitchTrack> {
        dsp_estimate(buf, frames, &self.config)
    }
}

/// Load `buf` at any rate and bring it to the model rate.
pub fn load_for_model(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let buf = audio::load_wav(path)?;
    if buf.sample_rate() == MODEL_SAMPLE_RATE {
        Ok(buf)
    } else {
        audio::resample(&buf, MODEL_SAMPLE_RATE)
    }
}

/// Estimate the pitch of one WAV file and write the CSV. Returns the audio
/// duration in seconds.
pub fn process_file(
    estimator: &dyn PitchEstimator,
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    hop_ms: f64,
) -> Result<f64> {
    let frames = estimator.frame_spec(hop_ms)?;
    let buf = load_for_model(input)?;
    let track = estimator.estimate(&buf, &frames)?;
    track.write_csv(output)?;
    Ok(buf.duration_secs())
}

/// Predictions and reference labels concatenated over a set of clips.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PooledOutputs {
    pub ref_f0: Vec<f64>,
    pub ref_voiced: Vec<bool>,
    pub f0: Vec<f64>,
    pub entropy: Vec<f64>,
    pub max: Vec<f64>,
}

impl PooledOutputs {
    pub fn periodicity(&self, method: PeriodicityMethod) -> &[f64] {
        match method {
            PeriodicityMethod::Entropy => &self.entropy,
            PeriodicityMethod::Max => &self.max,
        }
    }

    /// Metrics with voicing from `method` at threshold `alpha`.
    pub fn report(&self, method: PeriodicityMethod, alpha: f64, epsilon: f64) -> Result<EvalReport> {
        let periodicity = self.periodicity(method).to_vec();
        let track = PitchTrack {
            times: vec![0.0; self.f0.len()],
            f0: self.f0.clone(),
            voiced: voicing(&periodicity, alpha),
            periodicity,
        };
        evaluate(&self.ref_f0, &self.ref_voiced, &track, epsilon)
    }
}

/// Run the model over each clip at the clip's own framing.
pub fn pool_outputs(estimator: &NeuralEstimator, clips: &[AnnotatedClip]) -> Result<PooledOutputs> {
    let mut out = PooledOutputs::default();
    for clip in clips {
        let post = estimator.posteriorgram(&clip.audio, &clip.frames)?;
        if post.num_frames() != clip.num_frames() {
            return Err(Error::shape(format!(
                "{} frames of output against {} annotations",
                post.num_frames(),
                clip.num_frames()
            )));
        }
        out.ref_f0.extend(&clip.pitch);
        out.ref_voiced.extend(&clip.voiced);
        out.f0.extend(estimator.decoder.decode(&post)?);
        out.entropy.extend(periodicity_entropy(&post));
        out.max.extend(periodicity_max(&post));
    }
    Ok(out)
}

/// DSP baseline over each clip; its one periodicity fills both columns.
pub fn pool_dsp(estimator: &DspEstimator, clips: &[AnnotatedClip]) -> Result<PooledOutputs> {
    let mut out = PooledOutputs::default();
    for clip in clips {
        let track = estimator.estimate(&clip.audio, &clip.frames)?;
        if track.len() != clip.num_frames() {
            return Err(Error::shape("DSP track length differs from annotations"));
        }
        out.ref_f0.extend(&clip.pitch);
        out.ref_voiced.extend(&clip.voiced);
        out.f0.extend(&track.f0);
        out.entropy.extend(&track.periodicity);
        out.max.extend(&track.periodicity);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bins::BinGrid;
    use crate::network::ArchitectureConfig;

    fn tiny_estimator() -> NeuralEstimator {
        let grid = BinGrid::new(32, 31.0, 225.0).unwrap();
        let model = PitchModel::new(ArchitectureConfig::tiny(), grid, 5).unwrap();
        NeuralEstimator::new(model, Decoder::Argmax, PeriodicityMethod::Entropy, 0.5).unwrap()
    }

    #[test]
    fn hop_conversion() {
        assert_eq!(hop_samples(10.0, 8000).unwrap(), 80);
        assert_eq!(hop_samples(5.0, 16000).unwrap(), 80);
        assert!(hop_samples(0.0, 8000).is_err());
        assert!(hop_samples(0.01, 8000).is_err());
    }

    #[test]
    fn neural_track_shape_and_times() {
        let est = tiny_estimator();
        let buf = AudioBuffer::new((0..8000).map(|i| (i as f32 * 0.3).sin()).collect(), 8000).unwrap();
        let frames = est.frame_spec(10.0).unwrap();
        let track = est.estimate(&buf, &frames).unwrap();
        assert_eq!(track.len(), 101);
        assert_eq!(track.times[100], 1.0);
        assert!(track.f0.iter().all(|&f| f > 0.0));
        let wrong_rate = AudioBuffer::new(vec![0.1; 16000], 16000).unwrap();
        assert!(est.estimate(&wrong_rate, &frames).is_err());
    }

    #[test]
    fn process_file_resamples_and_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        let csv = dir.path().join("a.csv");
        let buf = AudioBuffer::new((0..16000).map(|i| (i as f32 * 0.1).sin() * 0.5).collect(), 16000).unwrap();
        audio::write_wav(&wav, &buf).unwrap();
        let secs = process_file(&DspEstimator::default(), &wav, &csv, 10.0).unwrap();
        assert!((secs - 1.0).abs() < 1e-3);
        let track = PitchTrack::read_csv(&csv).unwrap();
        assert_eq!(track.len(), 101);
    }

    #[test]
    fn threshold_must_be_a_fraction() {
        let est = tiny_estimator();
        assert!(NeuralEstimator::new(est.model, Decoder::Argmax, PeriodicityMethod::Max, 1.5).is_err());
    }
}
