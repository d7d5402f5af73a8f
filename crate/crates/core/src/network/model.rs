use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::arch::{ArchitectureConfig, Normalization};
use super::kernels::{self, NormCache};
use super::tensor::{ParamTensor, Params, Scalar, Tensor3};
use crate::error::{Error, Result};

/// Momentum of the batch-normalization running statistics.
pub const RUNNING_STAT_MOMENTUM: f64 = 0.1;

/// Positions of one block's tensors inside [`Params`].
#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    weight: usize,
    bias: usize,
    gain: usize,
    shift: usize,
    running: Option<(usize, usize)>,
}

/// A validated architecture: forward and backward passes over [`Params`].
#[derive(Debug, Clone)]
pub struct Network {
    config: ArchitectureConfig,
    blocks: Vec<BlockSlots>,
    head_weight: usize,
    head_bias: usize,
    layout: Vec<(String, Vec<usize>)>,
}

/// Everything the backward pass needs from one training forward pass.
pub struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
    head_input: Tensor3<T>,
    logits: Vec<T>,
}

struct BlockCache<T> {
    input: Tensor3<T>,
    activated: Tensor3<T>,
    norm: NormCache<T>,
    batch_stats: Option<(Vec<T>, Vec<T>)>,
    pool: Option<(usize, Vec<u32>)>,
    dropout_mask: Option<Vec<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// `batch x num_bins` logits, row-major.
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// Which ReLUs were active and which positions won each max-pool.
    /// Two passes with equal patterns ran through the same linear pieces.
    pub fn branch_pattern(&self) -> (Vec<bool>, Vec<u32>) {
        let mut active = Vec::new();
        let mut winners = Vec::new();
        for b in &self.blocks {
            active.extend(b.activated.data().iter().map(|&v| v > T::zero()));
            if let Some((_, arg)) = &b.pool {
                winners.extend_from_slice(arg);
            }
        }
        (active, winners)
    }
}

impl Network {
    /// Validates `config` (channel chaining and the one-position output).
    pub fn new(config: ArchitectureConfig) -> Result<Self> {
        config.shape_chain()?;
        let mut layout = Vec::new();
        let mut blocks = Vec::new();
        for (i, b) in config.blocks.iter().enumerate() {
            let base = layout.len();
            layout.push((format!("blocks.{i}.conv.weight"), vec![b.out_channels, b.kernel_size, b.in_channels]));
            layout.push((format!("blocks.{i}.conv.bias"), vec![b.out_channels]));
            layout.push((format!("blocks.{i}.norm.gain"), vec![b.out_channels]));
            layout.push((format!("blocks.{i}.norm.shift"), vec![b.out_channels]));
            let running = match config.normalization {
                Normalization::Layer => None,
                Normalization::Batch => {
                    layout.push((format!("blocks.{i}.norm.running_mean"), vec![b.out_channels]));
                    layout.push((format!("blocks.{i}.norm.running_var"), vec![b.out_channels]));
                    Some((base + 4, base + 5))
                }
            };
            blocks.push(BlockSlots {
                weight: base,
                bias: base + 1,
                gain: base + 2,
                shift: base + 3,
                running,
            });
        }
        let head_weight = layout.len();
        layout.push((
            "head.weight".to_string(),
            vec![config.num_bins, config.head_kernel, config.last_channels()],
        ));
        layout.push(("head.bias".to_string(), vec![config.num_bins]));
        Ok(Self {
            config,
            blocks,
            head_weight,
            head_bias: head_weight + 1,
            layout,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn input_len(&self) -> usize {
        self.config.input_len
    }

    pub fn num_bins(&self) -> usize {
        self.config.num_bins
    }

    /// Names and dims of every tensor, in storage order.
    pub fn layout(&self) -> &[(String, Vec<usize>)] {
        &self.layout
    }

    /// Whether tensor `i` is a running statistic rather than a trained weight.
    pub fn is_buffer(&self, i: usize) -> bool {
        self.blocks
            .iter()
            .any(|b| matches!(b.running, Some((m, v)) if m == i || v == i))
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, unit
    /// gains, zero shifts.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Params<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (name, dims) in &self.layout {
            let tensor = if name.ends_with("gain") || name.ends_with("running_var") {
                ParamTensor::filled(dims, T::one())
            } else if name.ends_with("shift") || name.ends_with("running_mean") {
                ParamTensor::zeros(dims)
            } else {
                let fan_in: usize = if name.ends_with("weight") {
                    dims[1] * dims[2]
                } else {
                    let w = &self.layout[self.layout.iter().position(|(n, _)| n == name).unwrap() - 1].1;
                    w[1] * w[2]
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut t = ParamTensor::zeros(dims);
                for v in &mut t.data {
                    *v = T::of(rng.gen_range(-bound..bound));
                }
                t
            };
            params.push(name.clone(), tensor).expect("layout names are unique");
        }
        params
    }

    /// Checks names and dims against this architecture.
    pub fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::Model(format!(
                "expected {} tensors, found {}",
                self.layout.len(),
                params.len()
            )));
        }
        for (i, (name, dims)) in self.layout.iter().enumerate() {
            let t = params.tensor(i);
            if params.name(i) != name || &t.dims != dims || t.data.len() != dims.iter().product::<usize>() {
                return Err(Error::Model(format!(
                    "tensor {i}: expected {name} {dims:?}, found {} {:?}",
                    params.name(i),
                    t.dims
                )));
            }
        }
        Ok(())
    }

    fn check_input<T: Scalar>(&self, input: &Tensor3<T>) -> Result<()> {
        if input.channels() != 1 || input.length() != self.config.input_len {
            return Err(Error::shape(format!(
                "network takes single-channel {}-sample windows, got {} channels of {}",
                self.config.input_len,
                input.channels(),
                input.length()
            )));
        }
        Ok(())
    }

    /// Inference: `batch x num_bins` logits, row-major.
    pub fn forward<T: Scalar>(&self, params: &Params<T>, input: &Tensor3<T>) -> Result<Vec<T>> {
        self.check_params(params)?;
        self.check_input(input)?;
        let mut x = input.clone();
        for (cfg, slots) in self.config.blocks.iter().zip(&self.blocks) {
            let mut z = kernels::conv1d_valid(&x, params.tensor(slots.weight), &params.tensor(slots.bias).data, cfg.stride)?;
            let gain = &params.tensor(slots.gain).data;
            let shift = &params.tensor(slots.shift).data;
            x = match slots.running {
                None => kernels::relu_layer_norm_pool(&z, gain, shift, cfg.pool.map(|p| (p.size, p.stride)))?,
                Some((m, v)) => {
                    kernels::relu_in_place(&mut z);
                    let n = kernels::batch_norm(&z, &params.tensor(m).data, &params.tensor(v).data, gain, shift)?.0;
                    match cfg.pool {
                        Some(p) => kernels::max_pool1d_values(&n, p.size, p.stride)?,
                        None => n,
                    }
                }
            };
        }
        let out = kernels::conv1d_valid(
            &x,
            params.tensor(self.head_weight),
            &params.tensor(self.head_bias).data,
            1,
        )?;
        Ok(out.into_vec())
    }

    /// [`Network::forward`] over `frames` (concatenated windows), split into
    /// chunks that run on the current rayon pool.
    pub fn forward_frames(&self, params: &Params<f32>, frames: &[f32], chunk: usize) -> Result<Vec<f32>> {
        let w = self.config.input_len;
        if frames.len() % w != 0 {
            return Err(Error::shape(format!(
                "{} samples are not a whole number of {w}-sample frames",
                frames.len()
            )));
        }
        let chunk = chunk.max(1);
        let parts: Vec<Result<Vec<f32>>> = frames
            .par_chunks(chunk * w)
            .map(|c| self.forward(params, &Tensor3::from_frames(c, w)?))
            .collect();
        let mut logits = Vec::with_capacity(frames.len() / w * self.config.num_bins);
        for p in parts {
            logits.extend(p?);
        }
        Ok(logits)
    }

    /// Training forward pass. Batch normalization uses batch statistics;
    /// dropout draws from `rng` when enabled.
    pub fn forward_train<T: Scalar, R: Rng>(
        &self,
        params: &Params<T>,
        input: &Tensor3<T>,
        rng: &mut R,
    ) -> Result<ForwardCache<T>> {
        self.check_params(params)?;
        self.check_input(input)?;
        let keep = 1.0 - self.config.dropout_prob;
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (cfg, slots) in self.config.blocks.iter().zip(&self.blocks) {
            let mut activated = kernels::conv1d_valid(&x, params.tensor(slots.weight), &params.tensor(slots.bias).data, cfg.stride)?;
            kernels::relu_in_place(&mut activated);
            let gain = &params.tensor(slots.gain).data;
            let shift = &params.tensor(slots.shift).data;
            let (n, norm, batch_stats) = match slots.running {
                None => {
                    let (n, c) = kernels::layer_norm(&activated, gain, shift)?;
                    (n, c, None)
                }
                Some(_) => {
                    let (mean, var) = kernels::channel_moments(&activated);
                    let (n, c) = kernels::batch_norm(&activated, &mean, &var, gain, shift)?;
                    (n, c, Some((mean, var)))
                }
            };
            let norm_len = n.length();
            let (mut out, pool) = match cfg.pool {
                Some(p) => {
                    let (y, arg) = kernels::max_pool1d(&n, p.size, p.stride)?;
                    (y, Some((norm_len, arg)))
                }
                None => (n, None),
            };
            let dropout_mask = (self.config.dropout_prob > 0.0).then(|| {
                let scale = T::of(1.0 / keep);
                let mask: Vec<T> = (0..out.data().len())
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
                    .collect();
                for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                    *v *= *m;
                }
                mask
            });
            caches.push(BlockCache {
                input: std::mem::replace(&mut x, out),
                activated,
                norm,
                batch_stats,
                pool,
                dropout_mask,
            });
        }
        let logits = kernels::conv1d_valid(
            &x,
            params.tensor(self.head_weight),
            &params.tensor(self.head_bias).data,
            1,
        )?
        .into_vec();
        Ok(ForwardCache {
            blocks: caches,
            head_input: x,
            logits,
        })
    }

    /// Gradients of a scalar loss with respect to every tensor, given the
    /// loss gradient with respect to the logits. Running statistics get zero
    /// gradient.
    pub fn backward<T: Scalar>(&self, params: &Params<T>, cache: &ForwardCache<T>, d_logits: &[T]) -> Result<Params<T>> {
        let batch = cache.head_input.batch();
        let p = self.config.num_bins;
        if d_logits.len() != batch * p {
            return Err(Error::shape(format!(
                "logit gradient has {} values, expected {}",
                d_logits.len(),
                batch * p
            )));
        }
        let mut grads = params.zeros_like();
        let d_head = Tensor3::from_vec(d_logits.to_vec(), batch, p, 1)?;
        let mut g = {
            let (dw, db) = two_mut(&mut grads, self.head_weight, self.head_bias);
            kernels::conv1d_valid_backward(
                &cache.head_input,
                params.tensor(self.head_weight),
                1,
                &d_head,
                dw,
                &mut db.data,
                true,
            )?
            .expect("input gradient requested")
        };
        for (i, (cfg, slots)) in self.config.blocks.iter().zip(&self.blocks).enumerate().rev() {
            let bc = &cache.blocks[i];
            if let Some(mask) = &bc.dropout_mask {
                for (v, m) in g.data_mut().iter_mut().zip(mask) {
                    *v *= *m;
                }
            }
            if let Some((len, arg)) = &bc.pool {
                g = kernels::max_pool1d_backward(*len, arg, &g);
            }
            let gain = &params.tensor(slots.gain).data;
            let (dgain, dshift) = two_mut(&mut grads, slots.gain, slots.shift);
            let mut dz = match bc.batch_stats {
                None => kernels::layer_norm_backward(&g, &bc.norm, gain, &mut dgain.data, &mut dshift.data),
                Some(_) => kernels::batch_norm_backward(&g, &bc.norm, gain, &mut dgain.data, &mut dshift.data),
            };
            kernels::relu_backward_in_place(&bc.activated, &mut dz);
            let (dw, db) = two_mut(&mut grads, slots.weight, slots.bias);
            let dx = kernels::conv1d_valid_backward(
                &bc.input,
                params.tensor(slots.weight),
                cfg.stride,
                &dz,
                dw,
                &mut db.data,
                i > 0,
            )?;
            if let Some(dx) = dx {
                g = dx;
            }
        }
        Ok(grads)
    }

    /// Blend the batch statistics from `cache` into the running statistics.
    pub fn update_running_stats<T: Scalar>(&self, params: &mut Params<T>, cache: &ForwardCache<T>) {
        let m = T::of(RUNNING_STAT_MOMENTUM);
        for (slots, bc) in self.blocks.iter().zip(&cache.blocks) {
            if let (Some((rm, rv)), Some((mean, var))) = (slots.running, &bc.batch_stats) {
                // Unbiased variance for the running estimate.
                let n = (bc.activated.batch() * bc.activated.length()) as f64;
                let unbias = T::of(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
                for (r, &v) in params.tensor_mut(rm).data.iter_mut().zip(mean) {
                    *r = (T::one() - m) * *r + m * v;
                }
                for (r, &v) in params.tensor_mut(rv).data.iter_mut().zip(var) {
                    *r = (T::one() - m) * *r + m * v * unbias;
                }
            }
        }
    }
}

fn two_mut<T: Scalar>(params: &mut Params<T>, a: usize, b: usize) -> (&mut ParamTensor<T>, &mut ParamTensor<T>) {
    assert!(a < b);
    let (lo, hi) = params.split_at_mut(b);
    (&mut lo[a].1, &mut hi[0].1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(batch: usize, len: usize, seed: u64) -> Tensor3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..batch * len).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor3::from_vec(data, batch, 1, len).unwrap()
    }

    #[test]
    fn reference_maps_1024_samples_to_1440_logits() {
        let net = Network::new(ArchitectureConfig::reference()).unwrap();
        let params = net.init_params::<f32>(0);
        let logits = net.forward(&params, &frames(1, 1024, 1)).unwrap();
        assert_eq!(logits.len(), 1440);
        assert!(logits.iter().all(|v| v.is_finite()));
        assert!(net.forward(&params, &frames(1, 1000, 1)).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_flat_logits() {
        let net = Network::new(ArchitectureConfig::desk()).unwrap();
        let mut params = net.init_params::<f32>(4);
        for i in 0..params.len() {
            if params.name(i).ends_with("bias") {
                params.tensor_mut(i).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let logits = net.forward(&params, &Tensor3::zeros(1, 1, 1024)).unwrap();
        assert!(logits.iter().all(|&v| v == logits[0]));
    }

    #[test]
    fn identical_frames_identical_rows() {
        let net = Network::new(ArchitectureConfig::desk()).unwrap();
        let params = net.init_params::<f32>(2);
        let one = frames(1, 1024, 9);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let logits = net.forward(&params, &Tensor3::from_vec(two, 2, 1, 1024).unwrap()).unwrap();
        assert_eq!(logits[..1440], logits[1440..]);
        let again = net.forward(&params, &one).unwrap();
        assert_eq!(again[..], logits[..1440]);
    }

    #[test]
    fn train_forward_matches_inference_without_dropout() {
        let net = Network::new(ArchitectureConfig::desk()).unwrap();
        let params = net.init_params::<f32>(1);
        let x = frames(3, 1024, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = net.forward_train(&params, &x, &mut rng).unwrap();
        let b = net.forward_train(&params, &x, &mut rng).unwrap();
        assert_eq!(a.logits(), b.logits());
        // Inference fuses ReLU, normalization and pooling, so rounding differs slightly.
        let inf = net.forward(&params, &x).unwrap();
        let scale = inf.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for (t, i) in a.logits().iter().zip(&inf) {
            assert!((t - i).abs() <= 1e-5 * scale, "{t} vs {i}");
        }
    }

    #[test]
    fn parallel_frames_match_single_batch() {
        let net = Network::new(ArchitectureConfig::desk()).unwrap();
        let params = net.init_params::<f32>(1);
        let x = frames(5, 1024, 6);
        let whole = net.forward(&params, &x).unwrap();
        let chunked = net.forward_frames(&params, x.data(), 2).unwrap();
        assert_eq!(whole, chunked);
    }

    #[test]
    fn params_are_checked() {
        let net = Network::new(ArchitectureConfig::tiny()).unwrap();
        let other = Network::new(ArchitectureConfig::desk()).unwrap();
        let params = other.init_params::<f32>(0);
        assert!(net.check_params(&params).is_err());
        assert!(net.check_params(&net.init_params::<f32>(0)).is_ok());
    }

    #[test]
    fn dropout_zeroes_activations_in_training_only() {
        let mut cfg = ArchitectureConfig::tiny();
        cfg.dropout_prob = 0.5;
        let net = Network::new(cfg).unwrap();
        let params = net.init_params::<f64>(0);
        let x = Tensor3::from_vec((0..1024 * 4).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect(), 4, 1, 1024).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = net.forward_train(&params, &x, &mut rng).unwrap();
        let b = net.forward_train(&params, &x, &mut rng).unwrap();
        assert_ne!(a.logits(), b.logits());
        let mask = a.blocks[0].dropout_mask.as_ref().unwrap();
        let dropped = mask.iter().filter(|&&m| m == 0.0).count() as f64 / mask.len() as f64;
        assert!((dropped - 0.5).abs() < 0.15);
        assert_eq!(net.forward(&params, &x).unwrap(), net.forward(&params, &x).unwrap());
    }

    #[test]
    fn batch_norm_running_stats_move() {
        let mut cfg = ArchitectureConfig::tiny();
        cfg.normalization = Normalization::Batch;
        let net = Network::new(cfg).unwrap();
        let mut params = net.init_params::<f64>(0);
        let before = params.clone();
        let x = Tensor3::from_vec((0..1024 * 4).map(|i| (i as f64 * 0.3).sin()).collect(), 4, 1, 1024).unwrap();
        let cache = net.forward_train(&params, &x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        net.update_running_stats(&mut params, &cache);
        assert_ne!(params.get("blocks.0.norm.running_mean"), before.get("blocks.0.norm.running_mean"));
        assert!(net.is_buffer(4) && !net.is_buffer(3));
    }
}
