use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use pitchgram::audio::{write_wav, Alignment, FrameSpec, MODEL_SAMPLE_RATE, WINDOW_SIZE};
use pitchgram::data::{self, AnnotatedClip, Partition, SynthSpec};
use pitchgram::decode::{search_threshold, Decoder, PeriodicityMethod, PitchTrack};
use pitchgram::eval::{self, markdown_table, BenchmarkRow, DEFAULT_EPSILON_CENTS};
use pitchgram::network::{preset, PitchModel};
use pitchgram::pipeline::{self, hop_samples, DspEstimator, NeuralEstimator, PitchEstimator, PooledOutputs};
use pitchgram::training::{train, TrainConfig};
use pitchgram::Error;

/// Exit status for a failed command.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        self.code
    }

    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    /// Any failure while reading a model counts as a model-format failure.
    fn model(err: Error) -> Self {
        Self { code: 4, message: err.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::Io { .. } | Error::Format(_) | Error::Unsupported(_) => 3,
            Error::Model(_) => 4,
            _ => 2,
        };
        Self { code, message: err.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "pitchgram", version, about = "Neural pitch and periodicity estimation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a pitch CSV for each input WAV file.
    Infer(InferArgs),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Score predictions against reference annotations and print JSON.
    Evaluate(EvaluateArgs),
    /// Print a Markdown table of accuracy and real-time factor.
    Benchmark(BenchmarkArgs),
    /// Find the voicing threshold that maximizes F1 on a corpus split.
    SearchThreshold(SearchArgs),
    /// Generate a synthetic corpus directory.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecoderArg {
    Argmax,
    Weighted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PeriodicityArg {
    Entropy,
    Max,
}

impl From<PeriodicityArg> for PeriodicityMethod {
    fn from(p: PeriodicityArg) -> Self {
        match p {
            PeriodicityArg::Entropy => PeriodicityMethod::Entropy,
            PeriodicityArg::Max => PeriodicityMethod::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchArg {
    Tiny,
    Desk,
    Reference,
}

impl ArchArg {
    fn name(self) -> &'static str {
        match self {
            ArchArg::Tiny => "tiny",
            ArchArg::Desk => "desk",
            ArchArg::Reference => "reference",
        }
    }
}

#[derive(Debug, Args)]
struct DecodeOpts {
    /// Pitch decoder.
    #[arg(long, value_enum, default_value = "weighted")]
    decoder: DecoderArg,
    /// Window of the weighted decoder, in bins (odd).
    #[arg(long, default_value_t = pitchgram::decode::DEFAULT_WINDOW_BINS)]
    window_bins: usize,
    /// Periodicity measure used for voicing.
    #[arg(long, value_enum, default_value = "entropy")]
    periodicity: PeriodicityArg,
    /// Voicing threshold in [0, 1]; frames with periodicity above it are voiced.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

impl DecodeOpts {
    fn decoder(&self) -> Decoder {
        match self.decoder {
            DecoderArg::Argmax => Decoder::Argmax,
            DecoderArg::Weighted => Decoder::Weighted { window_bins: self.window_bins },
        }
    }

    fn estimator(&self, model: PitchModel) -> CliResult<NeuralEstimator> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CliError::usage(format!("--threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if self.window_bins == 0 || self.window_bins % 2 == 0 {
            return Err(CliError::usage(format!("--window-bins must be odd, got {}", self.window_bins)));
        }
        Ok(NeuralEstimator::new(model, self.decoder(), self.periodicity.into(), self.threshold)?)
    }
}

#[derive(Debug, Args)]
struct SplitOpts {
    /// Seed of the 70/15/15 clip split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Model weights file (its `.json` sidecar must sit next to it).
    #[arg(long)]
    model: PathBuf,
    /// Input WAV files.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Output CSV path (single input only).
    #[arg(long, conflicts_with = "output_dir")]
    output: Option<PathBuf>,
    /// Directory for `<input stem>.csv` outputs.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Hop between frames in milliseconds.
    #[arg(long, default_value_t = pipeline::DEFAULT_HOP_MS)]
    hop_ms: f64,
    #[command(flatten)]
    decode: DecodeOpts,
    /// Worker threads (0 uses every core).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Corpus directory written by `synth`.
    #[arg(long)]
    corpus: PathBuf,
    /// Where to write the trained weights.
    #[arg(long)]
    out: PathBuf,
    /// Network architecture.
    #[arg(long, value_enum, default_value = "desk")]
    arch: ArchArg,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    learning_rate: f64,
    /// Seed for initialization and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    split: SplitOpts,
    /// Train on voiced frames only.
    #[arg(long)]
    voiced_only: bool,
    /// Write per-step losses to this CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Save checkpoints here.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Steps between checkpoints (0 disables).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Accepted for symmetry; training always runs on one thread.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

/// Learning rate for short desk-scale runs.
pub const DEFAULT_LEARNING_RATE: f64 = 2e-4;

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Reference annotation CSV (`time_sec,f0_hz,voiced`).
    #[arg(long, requires = "prediction", conflicts_with_all = ["corpus", "model"])]
    reference: Option<PathBuf>,
    /// Predicted pitch CSV (`time_sec,f0_hz,periodicity,voiced`).
    #[arg(long, requires = "reference")]
    prediction: Option<PathBuf>,
    /// Alignment tag of the reference file.
    #[arg(long, value_enum, default_value = "center-at-zero")]
    alignment: AlignmentArg,
    /// Corpus directory to evaluate a model on.
    #[arg(long, requires = "model")]
    corpus: Option<PathBuf>,
    #[arg(long, requires = "corpus")]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    split_opts: SplitOpts,
    #[command(flatten)]
    decode: DecodeOpts,
    /// Pitch threshold for RPA and RCA, in cents.
    #[arg(long, default_value_t = DEFAULT_EPSILON_CENTS)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlignmentArg {
    CenterAtZero,
    CenterAtHalfWindow,
}

impl From<AlignmentArg> for Alignment {
    fn from(a: AlignmentArg) -> Self {
        match a {
            AlignmentArg::CenterAtZero => Alignment::CenterAtZero,
            AlignmentArg::CenterAtHalfWindow => Alignment::CenterAtHalfWindow,
        }
    }
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    /// Corpus directory for the accuracy columns.
    #[arg(long)]
    corpus: PathBuf,
    /// Trained models to compare.
    #[arg(long, num_args = 0..)]
    model: Vec<PathBuf>,
    /// Architectures to time with random weights (speed columns only).
    #[arg(long, value_enum, num_args = 0..)]
    speed_only: Vec<ArchArg>,
    /// Leave out the DSP baseline row.
    #[arg(long)]
    no_dsp: bool,
    #[command(flatten)]
    split: SplitOpts,
    /// Pitch decoder for the accuracy columns.
    #[arg(long, value_enum, default_value = "weighted")]
    decoder: DecoderArg,
    #[arg(long, default_value_t = pitchgram::decode::DEFAULT_WINDOW_BINS)]
    window_bins: usize,
    /// Seconds of synthetic audio for the timing runs.
    #[arg(long, default_value_t = 60.0)]
    rtf_seconds: f64,
    #[arg(long, default_value_t = pipeline::DEFAULT_HOP_MS)]
    hop_ms: f64,
    /// Keep the timing run outputs here instead of a temporary directory.
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_EPSILON_CENTS)]
    epsilon: f64,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "valid")]
    split: SplitArg,
    #[command(flatten)]
    split_opts: SplitOpts,
    #[arg(long, value_enum, default_value = "entropy")]
    periodicity: PeriodicityArg,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seconds per clip.
    #[arg(long, default_value_t = 4.0)]
    duration: f64,
    #[arg(long, default_value_t = 80.0)]
    f0_min: f64,
    #[arg(long, default_value_t = 800.0)]
    f0_max: f64,
    #[arg(long, default_value_t = 5)]
    harmonics: usize,
    #[arg(long, default_value_t = 20.0)]
    vibrato_cents: f64,
    #[arg(long, default_value_t = 5.0)]
    vibrato_hz: f64,
    /// Signal-to-noise ratio in dB.
    #[arg(long, default_value_t = 30.0, conflicts_with = "clean")]
    snr_db: f64,
    /// No added noise.
    #[arg(long)]
    clean: bool,
    /// Share of each clip that is unvoiced noise.
    #[arg(long, default_value_t = 0.3)]
    unvoiced_fraction: f64,
    #[arg(long, default_value_t = pipeline::DEFAULT_HOP_MS)]
    hop_ms: f64,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Infer(a) => infer(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Benchmark(a) => benchmark(a),
        Command::SearchThreshold(a) => search(a),
        Command::Synth(a) => synth(a),
    }
}

fn set_threads(threads: usize) -> CliResult {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))
}

fn load_model(path: &Path) -> CliResult<PitchModel> {
    PitchModel::load(path).map_err(CliError::model)
}

fn check_hop(hop_ms: f64) -> CliResult {
    hop_samples(hop_ms, MODEL_SAMPLE_RATE).map(|_| ()).map_err(|e| CliError::usage(e.to_string()))
}

fn infer(a: InferArgs) -> CliResult {
    check_hop(a.hop_ms)?;
    set_threads(a.threads)?;
    if a.output.is_some() && a.input.len() != 1 {
        return Err(CliError::usage("--output takes a single --input; use --output-dir for several"));
    }
    if a.output.is_none() && a.output_dir.is_none() {
        return Err(CliError::usage("give --output or --output-dir"));
    }
    let estimator = a.decode.estimator(load_model(&a.model)?)?;
    if let Some(dir) = &a.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    }
    let start = std::time::Instant::now();
    let mut seconds = 0.0;
    for input in &a.input {
        let output = match (&a.output, &a.output_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(dir)) => {
                let stem = input.file_stem().ok_or_else(|| CliError::usage(format!("{} has no file name", input.display())))?;
                dir.join(stem).with_extension("csv")
            }
            (None, None) => unreachable!("checked above"),
        };
        seconds += pipeline::process_file(&estimator, input, &output, a.hop_ms)?;
    }
    let wall = start.elapsed().as_secs_f64();
    println!(
        "processed {} file(s), {seconds:.2} s of audio in {wall:.2} s (RTF {:.4}, {} thread(s))",
        a.input.len(),
        if seconds > 0.0 { wall / seconds } else { 0.0 },
        rayon::current_num_threads()
    );
    Ok(())
}

fn split_clips(clips: &[AnnotatedClip], split_seed: u64, which: SplitArg) -> CliResult<(Partition, Vec<AnnotatedClip>)> {
    let p = data::partition(clips.len(), split_seed)?;
    let idx = match which {
        SplitArg::Train => &p.train,
        SplitArg::Valid => &p.valid,
        SplitArg::Test => &p.test,
    };
    let chosen = idx.iter().map(|&i| clips[i].clone()).collect();
    Ok((p, chosen))
}

fn train_cmd(a: TrainArgs) -> CliResult {
    set_threads(1)?;
    let (config, grid) = preset(a.arch.name())?;
    let (_, clips) = data::read_corpus(&a.corpus)?;
    let (_, train_clips) = split_clips(&clips, a.split.split_seed, SplitArg::Train)?;
    let examples = data::training_examples(&train_clips, &grid, !a.voiced_only)?;
    let mut model = PitchModel::new(config, grid, a.seed)?;
    let tc = TrainConfig {
        batch_size: a.batch_size,
        total_steps: a.steps,
        learning_rate: a.learning_rate,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::default()
    };
    tc.validate()?;
    if let Some(dir) = &a.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    }
    eprintln!("training {} on {} frames from {} clips", a.arch.name(), examples.len(), train_clips.len());
    let log = train(&mut model, &examples, &tc, a.checkpoint_dir.as_deref(), |step, loss| {
        if step % 100 == 0 {
            eprintln!("step {step} loss {loss:.4}");
        }
    })?;
    model.save(&a.out)?;
    if let Some(path) = &a.log {
        log.write_csv(path)?;
    }
    println!("saved {}", a.out.display());
    Ok(())
}

fn pooled(estimator: &NeuralEstimator, corpus: &Path, split_seed: u64, split: SplitArg) -> CliResult<PooledOutputs> {
    let (manifest, clips) = data::read_corpus(corpus)?;
    if manifest.frames.window_size != estimator.window_size() {
        return Err(CliError::usage(format!(
            "corpus frames are {} samples but the model takes {}",
            manifest.frames.window_size,
            estimator.window_size()
        )));
    }
    let (_, chosen) = split_clips(&clips, split_seed, split)?;
    Ok(pipeline::pool_outputs(estimator, &chosen)?)
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    set_threads(a.threads)?;
    let report = match (&a.reference, &a.prediction, &a.corpus, &a.model) {
        (Some(reference), Some(prediction), _, _) => {
            let pred = PitchTrack::read_csv(prediction)?;
            let frames = FrameSpec { window_size: WINDOW_SIZE, hop: 1, alignment: a.alignment.into() };
            let ann = data::load_annotations(reference, a.alignment.into(), &frames, MODEL_SAMPLE_RATE)?;
            let tolerance = match pred.times.as_slice() {
                [t0, t1, ..] => (t1 - t0).abs() / 2.0,
                _ => 0.005,
            };
            let (f0, voiced) = ann.at_times(&pred.times, tolerance);
            eval::evaluate(&f0, &voiced, &pred, a.epsilon)?
        }
        (_, _, Some(corpus), Some(model)) => {
            let estimator = a.decode.estimator(load_model(model)?)?;
            let pool = pooled(&estimator, corpus, a.split_opts.split_seed, a.split)?;
            pool.report(a.decode.periodicity.into(), a.decode.threshold, a.epsilon)?
        }
        _ => return Err(CliError::usage("give --reference with --prediction, or --corpus with --model")),
    };
    println!("{}", report.to_json());
    Ok(())
}

fn search(a: SearchArgs) -> CliResult {
    set_threads(a.threads)?;
    let estimator = NeuralEstimator::new(load_model(&a.model)?, Decoder::Argmax, a.periodicity.into(), 0.5)?;
    let pool = pooled(&estimator, &a.corpus, a.split_opts.split_seed, a.split)?;
    let s = search_threshold(pool.periodicity(a.periodicity.into()), &pool.ref_voiced)?;
    println!("threshold {:.6}", s.alpha);
    println!("f1 {:.6}", s.f1);
    println!("coarse_f1 {:.6}", s.coarse_f1);
    Ok(())
}

fn synth_spec(a: &SynthArgs) -> CliResult<SynthSpec> {
    check_hop(a.hop_ms)?;
    Ok(SynthSpec {
        f0_min: a.f0_min,
        f0_max: a.f0_max,
        harmonics: a.harmonics,
        vibrato_cents: a.vibrato_cents,
        vibrato_hz: a.vibrato_hz,
        snr_db: (!a.clean).then_some(a.snr_db),
        unvoiced_fraction: a.unvoiced_fraction,
        duration_secs: a.duration,
        sample_rate: MODEL_SAMPLE_RATE,
        frames: FrameSpec::new(WINDOW_SIZE, hop_samples(a.hop_ms, MODEL_SAMPLE_RATE)?, Alignment::CenterAtZero)?,
        seed: 0,
    })
}

fn synth(a: SynthArgs) -> CliResult {
    let spec = synth_spec(&a)?;
    let clips = data::synth_corpus(&spec, a.clips, a.seed)?;
    let manifest = data::write_corpus(&a.out, &clips)?;
    println!("wrote {} clips to {}", manifest.clips.len(), a.out.display());
    Ok(())
}

/// F1 on `test` at the threshold that is best on `valid`.
fn tuned_f1(valid: &PooledOutputs, test: &PooledOutputs, method: PeriodicityMethod, epsilon: f64) -> CliResult<(f64, eval::EvalReport)> {
    let s = search_threshold(valid.periodicity(method), &valid.ref_voiced)?;
    let r = test.report(method, s.alpha, epsilon)?;
    Ok((r.f1, r))
}

fn benchmark(a: BenchmarkArgs) -> CliResult {
    check_hop(a.hop_ms)?;
    if !(a.rtf_seconds > 0.0) {
        return Err(CliError::usage("--rtf-seconds must be positive"));
    }
    let decoder = match a.decoder {
        DecoderArg::Argmax => Decoder::Argmax,
        DecoderArg::Weighted => Decoder::Weighted { window_bins: a.window_bins },
    };
    let temp;
    let work: &Path = match &a.work_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::Io { path: d.clone(), source: e })?;
            d
        }
        None => {
            temp = tempfile::tempdir().map_err(|e| Error::Io { path: std::env::temp_dir(), source: e })?;
            temp.path()
        }
    };
    let timing_clip = data::synth_clip(&SynthSpec { duration_secs: a.rtf_seconds, seed: 1, ..SynthSpec::default() })?;
    let timing_wav = work.join("timing.wav");
    write_wav(&timing_wav, &timing_clip.audio)?;
    let wavs = vec![timing_wav];

    let (_, clips) = data::read_corpus(&a.corpus)?;
    let (_, valid) = split_clips(&clips, a.split.split_seed, SplitArg::Valid)?;
    let (_, test) = split_clips(&clips, a.split.split_seed, SplitArg::Test)?;

    let mut rows = Vec::new();
    let accuracy_row = |name: String, v: &PooledOutputs, t: &PooledOutputs| -> CliResult<BenchmarkRow> {
        let (f1_entropy, report) = tuned_f1(v, t, PeriodicityMethod::Entropy, a.epsilon)?;
        let (f1_max, _) = tuned_f1(v, t, PeriodicityMethod::Max, a.epsilon)?;
        Ok(BenchmarkRow {
            method: name,
            delta_cents: report.delta_cents,
            rpa: Some(report.rpa),
            rca: Some(report.rca),
            f1_entropy: Some(f1_entropy),
            f1_max: Some(f1_max),
            ..Default::default()
        })
    };
    for path in &a.model {
        let estimator = NeuralEstimator::new(load_model(path)?, decoder, PeriodicityMethod::Entropy, 0.5)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut row = accuracy_row(
            name,
            &pipeline::pool_outputs(&estimator, &valid)?,
            &pipeline::pool_outputs(&estimator, &test)?,
        )?;
        let rtf = eval::benchmark_rtf(&estimator, &wavs, a.hop_ms, work)?;
        row.rtf_cpu = Some(rtf.single_thread.rtf);
        row.rtf_cpu_all_cores = Some(rtf.all_cores.rtf);
        rows.push(row);
    }
    for arch in &a.speed_only {
        let (config, grid) = preset(arch.name())?;
        let estimator = NeuralEstimator::new(PitchModel::new(config, grid, 0)?, decoder, PeriodicityMethod::Entropy, 0.5)?;
        let rtf = eval::benchmark_rtf(&estimator, &wavs, a.hop_ms, work)?;
        rows.push(BenchmarkRow {
            method: format!("{} (speed only)", arch.name()),
            rtf_cpu: Some(rtf.single_thread.rtf),
            rtf_cpu_all_cores: Some(rtf.all_cores.rtf),
            ..Default::default()
        });
    }
    if !a.no_dsp {
        let dsp = DspEstimator::default();
        let mut row = accuracy_row("cmnd".into(), &pipeline::pool_dsp(&dsp, &valid)?, &pipeline::pool_dsp(&dsp, &test)?)?;
        let rtf = eval::benchmark_rtf(&dsp, &wavs, a.hop_ms, work)?;
        row.rtf_cpu = Some(rtf.single_thread.rtf);
        row.rtf_cpu_all_cores = Some(rtf.all_cores.rtf);
        rows.push(row);
    }
    print!("{}", markdown_table(&rows));
    Ok(())
}
