//! Supervised training: blurred categorical targets, cross-entropy, Adam.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bins::BinGrid;
use crate::error::{Error, Result};
use crate::network::{kernels, Network, Params, PitchModel, Scalar, Tensor3};

/// Ground truth for one training frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Voiced(usize),
    /// Served as a uniformly random bin, redrawn every time.
    Unvoiced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub frame: Vec<f32>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub blur_std_cents: f64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            total_steps: 3000,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            blur_std_cents: 25.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.blur_std_cents >= 0.0) || !self.blur_std_cents.is_finite() {
            return Err(Error::invalid(format!("blur std must be >= 0, got {}", self.blur_std_cents)));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("learning rate must be positive and betas in [0, 1)"));
        }
        Ok(())
    }
}

/// Gaussian weights by bin distance, shared by every target of one grid.
#[derive(Debug, Clone)]
pub struct TargetBlur {
    num_bins: usize,
    by_distance: Vec<f64>,
}

impl TargetBlur {
    pub fn new(grid: &BinGrid, blur_std_cents: f64) -> Self {
        let sigma = blur_std_cents / grid.cents_per_bin();
        let by_distance = (0..grid.num_bins())
            .map(|d| {
                if sigma == 0.0 {
                    if d == 0 { 1.0 } else { 0.0 }
                } else {
                    let z = d as f64 / sigma;
                    (-0.5 * z * z).exp()
                }
            })
            .collect();
        Self { num_bins: grid.num_bins(), by_distance }
    }

    /// Writes the normalized bump centered on `center` into `out`.
    pub fn fill(&self, center: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.num_bins);
        let mut total = 0.0;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.by_distance[i.abs_diff(center)];
            total += *o;
        }
        out.iter_mut().for_each(|o| *o /= total);
    }
}

/// Bin a target is served as; unvoiced targets draw a fresh uniform bin.
pub fn served_bin<R: Rng>(num_bins: usize, target: Target, rng: &mut R) -> Result<usize> {
    match target {
        Target::Voiced(k) if k < num_bins => Ok(k),
        Target::Voiced(k) => Err(Error::IndexOutOfRange { index: k, len: num_bins }),
        Target::Unvoiced => Ok(rng.gen_range(0..num_bins)),
    }
}

/// Probability vector over the grid: a Gaussian bump (truncated to the
/// grid, summing to 1) around the target bin.
pub fn make_target<R: Rng>(grid: &BinGrid, target: Target, blur_std_cents: f64, rng: &mut R) -> Result<Vec<f64>> {
    let bin = served_bin(grid.num_bins(), target, rng)?;
    let mut out = vec![0.0; grid.num_bins()];
    TargetBlur::new(grid, blur_std_cents).fill(bin, &mut out);
    Ok(out)
}

/// Mean over rows of `-sum_i target_i log softmax(logits)_i`, in f64.
pub fn cce_loss<T: Scalar>(logits: &[T], targets: &[f64], num_bins: usize) -> Result<f64> {
    Ok(cce_loss_and_grad(logits, targets, num_bins)?.0)
}

/// The loss and its gradient with respect to the logits.
pub fn cce_loss_and_grad<T: Scalar>(logits: &[T], targets: &[f64], num_bins: usize) -> Result<(f64, Vec<T>)> {
    if num_bins == 0 || logits.len() != targets.len() || logits.len() % num_bins != 0 || logits.is_empty() {
        return Err(Error::shape(format!(
            "{} logits and {} targets do not form rows of {num_bins}",
            logits.len(),
            targets.len()
        )));
    }
    if logits.iter().any(|v| v.as_f64().is_nan()) {
        return Err(Error::NonFinite("NaN logit".into()));
    }
    let rows = logits.len() / num_bins;
    let probs = kernels::softmax_rows(logits, num_bins);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((l, t), p) in logits
        .chunks_exact(num_bins)
        .zip(targets.chunks_exact(num_bins))
        .zip(probs.chunks_exact(num_bins))
    {
        let max = l.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let lse = max + l.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        for ((&li, &ti), &pi) in l.iter().zip(t).zip(p) {
            if ti != 0.0 {
                loss -= ti * (li.as_f64() - lse);
            }
            grad.push(T::of((pi - ti) / rows as f64));
        }
    }
    Ok((loss / rows as f64, grad))
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_gradients<T: Scalar, R: Rng>(
    network: &Network,
    params: &Params<T>,
    input: &Tensor3<T>,
    targets: &[f64],
    rng: &mut R,
) -> Result<(f64, Params<T>)> {
    let cache = network.forward_train(params, input, rng)?;
    let (loss, d_logits) = cce_loss_and_grad(cache.logits(), targets, network.num_bins())?;
    let grads = network.backward(params, &cache, &d_logits)?;
    Ok((loss, grads))
}

/// Adam with bias correction. Tensors flagged by `skip` are left alone.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &Params<f32>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { lr, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut Params<f32>, grads: &Params<f32>, skip: impl Fn(usize) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for i in 0..params.len() {
            if skip(i) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in params.tensor_mut(i).data.iter_mut().zip(&grads.tensor(i).data).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Per-step training loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// CSV `step,loss`, steps counted from 1.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{l}\n", i + 1));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Means over consecutive non-overlapping windows.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks_exact(window.max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }
}

/// Runs `config.total_steps` steps of Adam on `model`. Batches walk
/// through a fresh shuffle of the dataset each epoch. With checkpoints
/// enabled, `step_<n>.pnpe` files are written into `checkpoint_dir`.
pub fn train(
    model: &mut PitchModel,
    dataset: &[TrainExample],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainLog> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let window = model.network.input_len();
    if let Some(bad) = dataset.iter().position(|e| e.frame.len() != window) {
        return Err(Error::shape(format!(
            "example {bad} has {} samples, the network takes {window}",
            dataset[bad].frame.len()
        )));
    }
    let p = model.grid.num_bins();
    let blur = TargetBlur::new(&model.grid, config.blur_std_cents);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(
        &model.params,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.adam_epsilon,
    );
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainLog::default();
    let mut frames = Vec::with_capacity(config.batch_size * window);
    let mut targets = vec![0.0; config.batch_size * p];
    for step in 1..=config.total_steps {
        frames.clear();
        for row in targets.chunks_exact_mut(p) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &dataset[order[cursor]];
            cursor += 1;
            frames.extend_from_slice(&ex.frame);
            blur.fill(served_bin(p, ex.target, &mut rng)?, row);
        }
        let input = Tensor3::from_frames(&frames, window)?;
        let cache = model.network.forward_train(&model.params, &input, &mut rng)?;
        let (loss, d_logits) = cce_loss_and_grad(cache.logits(), &targets, p)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss diverged at step {step}")));
        }
        let grads = model.network.backward(&model.params, &cache, &d_logits)?;
        let network = &model.network;
        adam.update(&mut model.params, &grads, |i| network.is_buffer(i));
        model.network.update_running_stats(&mut model.params, &cache);
        log.losses.push(loss);
        progress(step, loss);
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                model.save(dir.join(format!("step_{step}.pnpe")))?;
            }
        }
    }
    Ok(log)
}

/// Agreement between analytic and finite-difference gradients of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGradCheck {
    pub name: String,
    /// `||g - fd|| / max(||g||, ||fd||, floor)` over the whole tensor.
    pub relative_error: f64,
    /// Largest elementwise `|g - fd| / max(|g|, |fd|, floor)`.
    pub max_entry_error: f64,
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorGradCheck>,
    pub checked: usize,
    /// Entries whose ±h probes changed a ReLU or max-pool branch and were
    /// re-probed with a smaller step.
    pub refined: usize,
}

impl GradCheckReport {
    /// The worst per-tensor relative error.
    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorGradCheck> {
        self.tensors.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Denominator floor of the relative errors.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares every gradient entry of the CCE loss against central
/// differences with step `h`. When a probe crosses a ReLU or max-pool
/// kink the step is divided by 10 (up to three times) for that entry.
pub fn gradient_check(
    network: &Network,
    params: &Params<f64>,
    input: &Tensor3<f64>,
    targets: &[f64],
    h: f64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = network.forward_train(params, input, &mut rng)?;
    let pattern = base.branch_pattern();
    let (_, d_logits) = cce_loss_and_grad(base.logits(), targets, network.num_bins())?;
    let grads = network.backward(params, &base, &d_logits)?;
    let mut probe = params.clone();
    let mut eval = |p: &Params<f64>| -> Result<(f64, bool)> {
        let c = network.forward_train(p, input, &mut rng)?;
        Ok((cce_loss(c.logits(), targets, network.num_bins())?, c.branch_pattern() == pattern))
    };
    let mut report = GradCheckReport { tensors: Vec::new(), checked: 0, refined: 0 };
    for t in 0..params.len() {
        if network.is_buffer(t) {
            continue;
        }
        let (mut diff2, mut g2, mut fd2, mut max_entry) = (0.0, 0.0, 0.0, 0.0f64);
        for i in 0..params.tensor(t).len() {
            let orig = params.tensor(t).data[i];
            let mut step = h;
            let mut fd = 0.0;
            for attempt in 0..4 {
                probe.tensor_mut(t).data[i] = orig + step;
                let (up, same_up) = eval(&probe)?;
                probe.tensor_mut(t).data[i] = orig - step;
                let (down, same_down) = eval(&probe)?;
                fd = (up - down) / (2.0 * step);
                if (same_up && same_down) || attempt == 3 {
                    break;
                }
                report.refined += (attempt == 0) as usize;
                step /= 10.0;
            }
            probe.tensor_mut(t).data[i] = orig;
            let g = grads.tensor(t).data[i];
            diff2 += (g - fd) * (g - fd);
            g2 += g * g;
            fd2 += fd * fd;
            max_entry = max_entry.max((g - fd).abs() / g.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR));
            report.checked += 1;
        }
        report.tensors.push(TensorGradCheck {
            name: params.name(t).to_string(),
            relative_error: diff2.sqrt() / g2.sqrt().max(fd2.sqrt()).max(GRAD_CHECK_FLOOR),
            max_entry_error: max_entry,
        });
    }
    Ok(report)
}
