//! From posteriorgram to pitch, periodicity and voicing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bins::BinGrid;
use crate::error::{Error, Result};
use crate::network::{kernels, Scalar};

/// Row sums must be within this of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Default local expected value window, in bins.
pub const DEFAULT_WINDOW_BINS: usize = 19;

/// Per-frame categorical distributions over a bin grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriorgram {
    probs: Vec<f64>,
    grid: BinGrid,
}

impl Posteriorgram {
    pub fn new(probs: Vec<f64>, grid: BinGrid) -> Result<Self> {
        let p = grid.num_bins();
        if probs.len() % p != 0 {
            return Err(Error::shape(format!("{} probabilities are not rows of {p}", probs.len())));
        }
        for (t, row) in probs.chunks_exact(p).enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid(format!("frame {t} has a negative or non-finite probability")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::invalid(format!("frame {t} sums to {sum}")));
            }
        }
        Ok(Self { probs, grid })
    }

    /// Row-wise softmax of network logits.
    pub fn from_logits<T: Scalar>(logits: &[T], grid: BinGrid) -> Result<Self> {
        let p = grid.num_bins();
        if logits.len() % p != 0 {
            return Err(Error::shape(format!("{} logits are not rows of {p}", logits.len())));
        }
        if logits.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::NonFinite("non-finite logit".into()));
        }
        Ok(Self { probs: kernels::softmax_rows(logits, p), grid })
    }

    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }

    pub fn num_frames(&self) -> usize {
        self.probs.len() / self.grid.num_bins()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let p = self.grid.num_bins();
        &self.probs[t * p..(t + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.grid.num_bins())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// First index of the largest value.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Center of the most probable bin; ties go to the lower bin.
pub fn decode_argmax(post: &Posteriorgram) -> Vec<f64> {
    post.rows().map(|r| post.grid.center_unchecked(argmax(r))).collect()
}

/// Expected pitch, in cents, over `window_bins` bins centered on the
/// argmax. The window is cut at the grid edges and the remaining mass
/// renormalized.
pub fn decode_local_expected_value(post: &Posteriorgram, window_bins: usize) -> Result<Vec<f64>> {
    if window_bins == 0 || window_bins % 2 == 0 {
        return Err(Error::invalid(format!("window must be a positive odd bin count, got {window_bins}")));
    }
    let half = window_bins / 2;
    let p = post.grid.num_bins();
    Ok(post
        .rows()
        .map(|r| {
            let k = argmax(r);
            let lo = k.saturating_sub(half);
            let hi = (k + half).min(p - 1);
            let (mut mass, mut moment) = (0.0, 0.0);
            for (i, &v) in r[lo..=hi].iter().enumerate() {
                mass += v;
                moment += v * ((lo + i) as f64 - k as f64);
            }
            // Offsets are taken from the argmax so a one-bin window is exact.
            let offset = if mass > 0.0 { moment / mass } else { 0.0 };
            post.grid.fractional_to_hz(k as f64 + offset)
        })
        .collect())
}

/// Largest probability per frame.
pub fn periodicity_max(post: &Posteriorgram) -> Vec<f64> {
    post.rows().map(|r| r.iter().copied().fold(0.0, f64::max)).collect()
}

/// `1 + sum_i p_i ln p_i / ln P` per frame, clamped to [0, 1].
pub fn periodicity_entropy(post: &Posteriorgram) -> Vec<f64> {
    let log_p = (post.grid.num_bins() as f64).ln();
    post.rows()
        .map(|r| {
            let neg_entropy: f64 = r.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
            (1.0 + neg_entropy / log_p).clamp(0.0, 1.0)
        })
        .collect()
}

/// Voiced where periodicity is strictly above `alpha`.
pub fn voicing(periodicity: &[f64], alpha: f64) -> Vec<bool> {
    periodicity.iter().map(|&h| h > alpha).collect()
}

/// How a posteriorgram row becomes a frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoder {
    Argmax,
    /// Local expected value over this many bins.
    Weighted { window_bins: usize },
}

impl Decoder {
    pub fn weighted() -> Self {
        Decoder::Weighted { window_bins: DEFAULT_WINDOW_BINS }
    }

    pub fn decode(&self, post: &Posteriorgram) -> Result<Vec<f64>> {
        match *self {
            Decoder::Argmax => Ok(decode_argmax(post)),
            Decoder::Weighted { window_bins } => decode_local_expected_value(post, window_bins),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodicityMethod {
    Entropy,
    Max,
}

impl PeriodicityMethod {
    pub fn compute(&self, post: &Posteriorgram) -> Vec<f64> {
        match self {
            PeriodicityMethod::Entropy => periodicity_entropy(post),
            PeriodicityMethod::Max => periodicity_max(post),
        }
    }
}

/// Voicing F1 with voiced as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// F1, precision and recall; an empty predicted or reference positive set
/// scores 0 for the affected ratio, and F1 is 0 when both ratios are 0.
pub fn voicing_f1(reference: &[bool], predicted: &[bool]) -> Result<F1Score> {
    if reference.len() != predicted.len() {
        return Err(Error::shape(format!(
            "{} reference flags against {} predicted",
            reference.len(),
            predicted.len()
        )));
    }
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&r, &p) in reference.iter().zip(predicted) {
        match (r, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fne += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fne);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(F1Score { f1, precision, recall })
}

/// Coarse thresholds: 0.0, 0.1, ..., 0.9 and 2^-i for i = 1..9.
pub fn coarse_thresholds() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    grid.extend((1..10).map(|i| 0.5f64.powi(i)));
    grid
}

pub const REFINEMENT_STEPS: usize = 8;
pub const INITIAL_REFINEMENT_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub alpha: f64,
    pub f1: f64,
    /// Best F1 over the coarse grid alone.
    pub coarse_f1: f64,
}

/// Voicing threshold that maximizes F1 against `reference`: the best
/// coarse grid point, then eight steps that move to whichever neighbor at
/// the current step size improves F1 (staying put when neither does),
/// halving the step each time.
pub fn search_threshold(periodicity: &[f64], reference: &[bool]) -> Result<ThresholdSearch> {
    if periodicity.len() != reference.len() {
        return Err(Error::shape(format!(
            "{} periodicities against {} reference flags",
            periodicity.len(),
            reference.len()
        )));
    }
    let voiced = reference.iter().filter(|&&v| v).count();
    if voiced == 0 || voiced == reference.len() {
        return Err(Error::Degenerate("reference must contain both voiced and unvoiced frames".into()));
    }
    let score = |alpha: f64| voicing_f1(reference, &voicing(periodicity, alpha)).map(|s| s.f1);
    let (mut alpha, mut best) = (0.0, f64::NEG_INFINITY);
    for a in coarse_thresholds() {
        let f = score(a)?;
        if f > best {
            alpha = a;
            best = f;
        }
    }
    let coarse_f1 = best;
    let mut step = INITIAL_REFINEMENT_STEP;
    for _ in 0..REFINEMENT_STEPS {
        let up = (alpha + step).min(1.0);
        let down = (alpha - step).max(0.0);
        let (f_up, f_down) = (score(up)?, score(down)?);
        if f_up > best && f_up >= f_down {
            alpha = up;
            best = f_up;
        } else if f_down > best {
            alpha = down;
            best = f_down;
        }
        step /= 2.0;
    }
    Ok(ThresholdSearch { alpha, f1: best, coarse_f1 })
}

/// Per-frame decoded output.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PitchTrack {
    pub times: Vec<f64>,
    pub f0: Vec<f64>,
    pub periodicity: Vec<f64>,
    pub voiced: Vec<bool>,
}

pub const PITCH_TRACK_HEADER: [&str; 4] = ["time_sec", "f0_hz", "periodicity", "voiced"];

#[derive(Deserialize)]
struct TrackRow {
    time_sec: f64,
    f0_hz: f64,
    periodicity: f64,
    voiced: u8,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.times.len();
        if self.f0.len() != n || self.periodicity.len() != n || self.voiced.len() != n {
            return Err(Error::shape("pitch track columns differ in length"));
        }
        Ok(())
    }

    /// CSV text with six decimals and voiced as 0/1.
    pub fn to_csv(&self) -> Result<String> {
        self.check()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(PITCH_TRACK_HEADER).map_err(csv_err)?;
        for i in 0..self.len() {
            w.write_record([
                format!("{:.6}", self.times[i]),
                format!("{:.6}", self.f0[i]),
                format!("{:.6}", self.periodicity[i]),
                (self.voiced[i] as u8).to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is ASCII"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers().map_err(|e| Error::Format(e.to_string()))?;
        if headers.iter().ne(PITCH_TRACK_HEADER) {
            return Err(Error::Format(format!("expected header {}", PITCH_TRACK_HEADER.join(","))));
        }
        let mut track = PitchTrack::default();
        for (i, row) in r.deserialize::<TrackRow>().enumerate() {
            let row = row.map_err(|e| Error::Format(format!("row {}: {e}", i + 1)))?;
            if row.voiced > 1 {
                return Err(Error::Format(format!("row {}: voiced must be 0 or 1", i + 1)));
            }
            track.times.push(row.time_sec);
            track.f0.push(row.f0_hz);
            track.periodicity.push(row.periodicity);
            track.voiced.push(row.voiced == 1);
        }
        Ok(track)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(grid: BinGrid, k: usize) -> Posteriorgram {
        let mut p = vec![0.0; grid.num_bins()];
        p[k] = 1.0;
        Posteriorgram::new(p, grid).unwrap()
    }

    fn two_peaks(p: usize, a: usize, b: usize) -> Vec<f64> {
        let mut r = vec![0.0; p];
        r[a] = 0.5;
        r[b] = 0.5;
        r
    }

    fn random_post(rng: &mut ChaCha8Rng, grid: BinGrid, frames: usize) -> Posteriorgram {
        let p = grid.num_bins();
        let mut probs = Vec::with_capacity(frames * p);
        for _ in 0..frames {
            let sharp = rng.gen_range(0.1..20.0);
            let logits: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0) * sharp).collect();
            probs.extend(kernels::softmax_rows(&logits, p));
        }
        Posteriorgram::new(probs, grid).unwrap()
    }

    #[test]
    fn rejects_invalid_rows() {
        let g = BinGrid::new(4, 100.0, 100.0).unwrap();
        assert!(Posteriorgram::new(vec![0.5, 0.5, 0.1, 0.0], g).is_err());
        assert!(Posteriorgram::new(vec![1.5, -0.5, 0.0, 0.0], g).is_err());
        assert!(Posteriorgram::new(vec![1.0, 0.0, 0.0], g).is_err());
    }

    #[test]
    fn argmax_examples() {
        let g = BinGrid::fine();
        assert_eq!(decode_argmax(&one_hot(g, 700)), vec![g.center(700).unwrap()]);
        let uniform = Posteriorgram::new(vec![1.0 / 1440.0; 1440], g).unwrap();
        assert_eq!(decode_argmax(&uniform), vec![g.center(0).unwrap()]);
        let peaks = Posteriorgram::new(two_peaks(1440, 10, 900), g).unwrap();
        assert_eq!(decode_argmax(&peaks), vec![g.center(10).unwrap()]);
    }

    #[test]
    fn local_expected_value_examples() {
        let g = BinGrid::fine();
        for w in [1, 3, 19] {
            assert_eq!(decode_local_expected_value(&one_hot(g, 37), w).unwrap(), vec![g.center(37).unwrap()]);
        }
        let mut r = vec![0.0; 1440];
        for (d, m) in [(0usize, 0.4), (1, 0.2), (2, 0.1)] {
            r[500 + d] = m;
            r[500 - d] = m;
        }
        let post = Posteriorgram::new(r, g).unwrap();
        let f = decode_local_expected_value(&post, 19).unwrap()[0];
        assert!((f / g.center(500).unwrap() - 1.0).abs() < 1e-12);

        let mut r = vec![0.0; 1440];
        r[300] = 0.6;
        r[301] = 0.4;
        let f = decode_local_expected_value(&Posteriorgram::new(r, g).unwrap(), 19).unwrap()[0];
        let expect = g.center(300).unwrap() * (0.4f64 * 5.0 / 1200.0).exp2();
        assert!((f - expect).abs() < 1e-9, "{f} vs {expect}");

        assert!(decode_local_expected_value(&post, 4).is_err());
        assert!(decode_local_expected_value(&post, 0).is_err());
    }

    #[test]
    fn window_truncates_at_edges() {
        let g = BinGrid::new(8, 100.0, 100.0).unwrap();
        let post = Posteriorgram::new(vec![0.5, 0.3, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0], g).unwrap();
        let f = decode_local_expected_value(&post, 5).unwrap()[0];
        assert!((f - g.fractional_to_hz(0.7)).abs() < 1e-9);
    }

    #[test]
    fn periodicity_examples() {
        let g = BinGrid::fine();
        let uniform = Posteriorgram::new(vec![1.0 / 1440.0; 1440], g).unwrap();
        assert_eq!(periodicity_max(&one_hot(g, 3)), vec![1.0]);
        assert!((periodicity_max(&uniform)[0] - 1.0 / 1440.0).abs() < 1e-15);
        assert!(periodicity_entropy(&uniform)[0].abs() < 1e-12);
        assert_eq!(periodicity_entropy(&one_hot(g, 3)), vec![1.0]);
        let peaks = Posteriorgram::new(two_peaks(1440, 100, 800), g).unwrap();
        assert_eq!(periodicity_max(&peaks), vec![0.5]);
        let h = periodicity_entropy(&peaks)[0];
        assert!((h - (1.0 - 2f64.ln() / 1440f64.ln())).abs() < 1e-12);
        assert!((h - 0.9047).abs() < 1e-4);
    }

    #[test]
    fn voicing_is_strict() {
        assert_eq!(voicing(&[0.3, 0.31, 0.0], 0.3), vec![false, true, false]);
        assert_eq!(voicing(&[0.0, 1e-9], 0.0), vec![false, true]);
        assert_eq!(voicing(&[1.0, 0.99], 1.0), vec![false, false]);
    }

    #[test]
    fn f1_examples() {
        let s = voicing_f1(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!(s.f1, 1.0);
        let s = voicing_f1(&[true, false, true, false], &[true; 4]).unwrap();
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(voicing_f1(&[true, false], &[false, true]).unwrap().f1, 0.0);
        assert_eq!(voicing_f1(&[false, false], &[false, false]).unwrap().f1, 0.0);
        assert!(voicing_f1(&[true], &[]).is_err());
    }

    #[test]
    fn coarse_grid_has_nineteen_points() {
        let g = coarse_thresholds();
        assert_eq!(g.len(), 19);
        assert_eq!(g[9], 0.9);
        assert_eq!(g[18], 0.5f64.powi(9));
    }

    #[test]
    fn separable_labels_reach_perfect_f1() {
        let labels: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let h: Vec<f64> = labels.iter().map(|&v| v as u8 as f64).collect();
        let s = search_threshold(&h, &labels).unwrap();
        assert_eq!(s.f1, 1.0);
        assert!((0.0..1.0).contains(&s.alpha));
    }

    #[test]
    fn anti_correlated_periodicity_scores_zero() {
        let labels: Vec<bool> = (0..60).map(|i| i % 4 != 0).collect();
        let h: Vec<f64> = labels.iter().map(|&v| if v { 0.0 } else { 1.0 }).collect();
        let s = search_threshold(&h, &labels).unwrap();
        let sweep = (0..=10_000)
            .map(|i| voicing_f1(&labels, &voicing(&h, i as f64 / 10_000.0)).unwrap().f1)
            .fold(0.0, f64::max);
        assert_eq!((s.f1, sweep), (0.0, 0.0));
    }

    #[test]
    fn search_is_close_to_exhaustive_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let labels: Vec<bool> = (0..2000).map(|_| rng.gen_bool(0.7)).collect();
            let h: Vec<f64> = labels
                .iter()
                .map(|&v| (if v { 0.7 } else { 0.35 } + rng.gen_range(-0.3..0.3f64)).clamp(0.0, 1.0))
                .collect();
            let s = search_threshold(&h, &labels).unwrap();
            let sweep = (0..=10_000)
                .map(|i| voicing_f1(&labels, &voicing(&h, i as f64 / 10_000.0)).unwrap().f1)
                .fold(0.0, f64::max);
            assert!(sweep - s.f1 <= 0.002, "search {} sweep {sweep}", s.f1);
        }
    }

    #[test]
    fn refinement_never_loses_to_the_coarse_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<bool> = (0..1000).map(|_| rng.gen_bool(0.6)).collect();
        let h: Vec<f64> = labels
            .iter()
            .map(|&v| (if v { 0.6 } else { 0.3 } + rng.gen_range(-0.3..0.3f64)).clamp(0.0, 1.0))
            .collect();
        let s = search_threshold(&h, &labels).unwrap();
        for a in coarse_thresholds() {
            assert!(s.f1 >= voicing_f1(&labels, &voicing(&h, a)).unwrap().f1);
        }
        assert!(s.f1 >= s.coarse_f1);
        assert!(search_threshold(&h, &[true; 1000]).is_err());
    }

    #[test]
    fn csv_roundtrip_at_six_decimals() {
        let track = PitchTrack {
            times: vec![0.0, 0.01, 0.02],
            f0: vec![440.0, 219.999999, 1000.5],
            periodicity: vec![0.9047, 0.000001, 1.0],
            voiced: vec![true, false, true],
        };
        let text = track.to_csv().unwrap();
        assert!(text.starts_with("time_sec,f0_hz,periodicity,voiced\n0.000000,440.000000,0.904700,1\n"));
        let back = PitchTrack::from_csv(&text).unwrap();
        assert_eq!(back, track);
        assert_eq!(back.to_csv().unwrap(), text);
        assert!(PitchTrack::from_csv("a,b\n1,2\n").is_err());
        assert!(PitchTrack::from_csv("time_sec,f0_hz,periodicity,voiced\n0,1,0.5,2\n").is_err());
    }

    proptest! {
        #[test]
        fn periodicities_lie_in_unit_interval(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let post = random_post(&mut rng, BinGrid::new(64, 50.0, 25.0).unwrap(), 4);
            for h in periodicity_entropy(&post).into_iter().chain(periodicity_max(&post)) {
                prop_assert!((0.0..=1.0).contains(&h));
            }
        }

        #[test]
        fn mixing_toward_uniform_lowers_entropy_periodicity(seed in 0u64..500, lambda in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = BinGrid::new(64, 50.0, 25.0).unwrap();
            let post = random_post(&mut rng, grid, 1);
            let mixed: Vec<f64> = post.row(0).iter().map(|&v| (1.0 - lambda) * v + lambda / 64.0).collect();
            let mixed = Posteriorgram::new(mixed, grid).unwrap();
            prop_assert!(periodicity_entropy(&mixed)[0] <= periodicity_entropy(&post)[0] + 1e-12);
        }

        #[test]
        fn one_bin_window_equals_argmax(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let post = random_post(&mut rng, BinGrid::fine(), 3);
            prop_assert_eq!(decode_local_expected_value(&post, 1).unwrap(), decode_argmax(&post));
        }

        #[test]
        fn csv_text_is_a_fixed_point(vals in proptest::collection::vec((0.0f64..1e4, 1.0f64..3000.0, 0.0f64..=1.0, any::<bool>()), 0..20)) {
            let track = PitchTrack {
                times: vals.iter().map(|v| v.0).collect(),
                f0: vals.iter().map(|v| v.1).collect(),
                periodicity: vals.iter().map(|v| v.2).collect(),
                voiced: vals.iter().map(|v| v.3).collect(),
            };
            let text = track.to_csv().unwrap();
            let back = PitchTrack::from_csv(&text).unwrap();
            prop_assert_eq!(back.to_csv().unwrap(), text);
            for (a, b) in back.f0.iter().zip(&track.f0) {
                prop_assert!((a - b).abs() <= 5e-7 * (1.0 + b.abs() * 1e-9));
            }
        }
    }
}
