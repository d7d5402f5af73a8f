//! Forward and backward kernels over channels-last [`Tensor3`] activations.
//!
//! Convolutions are valid (unpadded) cross-correlations lowered to GEMM. A
//! conv kernel is stored as `[out_channels, kernel_size, in_channels]`, so
//! row `co` of the weight matrix lines up with an im2col row of the input,
//! which for channels-last storage is a contiguous `kernel_size * in_channels`
//! run of the input buffer.

use super::tensor::{ParamTensor, Scalar, Tensor3};
use crate::error::{Error, Result};

pub const NORM_EPSILON: f64 = 1e-5;

pub fn conv_output_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || len < kernel {
        None
    } else {
        Some((len - kernel) / stride + 1)
    }
}

fn check_conv(input: &Tensor3<impl Scalar>, weight_dims: &[usize], bias_len: usize, stride: usize) -> Result<(usize, usize, usize)> {
    let [c_out, k, c_in] = weight_dims else {
        return Err(Error::shape(format!("conv weight must be 3-d, got {weight_dims:?}")));
    };
    if *c_in != input.channels() {
        return Err(Error::shape(format!(
            "conv expects {c_in} input channels, got {}",
            input.channels()
        )));
    }
    if bias_len != *c_out {
        return Err(Error::shape(format!("bias has {bias_len} values for {c_out} channels")));
    }
    let l_out = conv_output_len(input.length(), *k, stride).ok_or_else(|| {
        Error::shape(format!(
            "kernel of {k} (stride {stride}) does not fit input length {}",
            input.length()
        ))
    })?;
    Ok((*c_out, *k, l_out))
}

/// Upper bound on materialized patch-matrix elements per GEMM call.
const PATCH_BUDGET: usize = 1 << 21;

/// Im2col rows for batch items `first..first + count`: a pointer to the
/// first row and the distance between rows. Single items and single-position
/// outputs are strided views of the input; otherwise rows are copied into
/// `buf`.
fn patch_rows<T: Scalar>(
    input: &Tensor3<T>,
    first: usize,
    count: usize,
    k: usize,
    stride: usize,
    l_out: usize,
    buf: &mut Vec<T>,
) -> (*const T, isize) {
    let c_in = input.channels();
    let row = k * c_in;
    let item_len = input.length() * c_in;
    if count == 1 {
        return (input.item(first).as_ptr(), (stride * c_in) as isize);
    }
    if l_out == 1 {
        return (input.item(first).as_ptr(), item_len as isize);
    }
    buf.clear();
    for b in first..first + count {
        let x = input.item(b);
        for t in 0..l_out {
            let s = t * stride * c_in;
            buf.extend_from_slice(&x[s..s + row]);
        }
    }
    (buf.as_ptr(), row as isize)
}

/// How many batch items share one GEMM call.
fn group_size(batch: usize, l_out: usize, row: usize) -> usize {
    if l_out == 1 {
        batch.max(1)
    } else if l_out < 128 {
        (PATCH_BUDGET / (l_out * row)).clamp(1, batch.max(1))
    } else {
        1
    }
}

/// Valid cross-correlation: `y[b, co, t] = bias[co] + sum_{k, ci} w[co, k, ci] x[b, ci, t*stride + k]`.
pub fn conv1d_valid<T: Scalar>(
    input: &Tensor3<T>,
    weight: &ParamTensor<T>,
    bias: &[T],
    stride: usize,
) -> Result<Tensor3<T>> {
    let (c_out, k, l_out) = check_conv(input, &weight.dims, bias.len(), stride)?;
    let row = k * input.channels();
    let batch = input.batch();
    let mut out = Tensor3::zeros(batch, c_out, l_out);
    let group = group_size(batch, l_out, row);
    let mut buf = Vec::new();
    let mut first = 0;
    while first < batch {
        let count = group.min(batch - first);
        let (a, rsa) = patch_rows(input, first, count, k, stride, l_out, &mut buf);
        let y = &mut out.data_mut()[first * l_out * c_out..(first + count) * l_out * c_out];
        for r in y.chunks_exact_mut(c_out) {
            r.copy_from_slice(bias);
        }
        // SAFETY: A holds count*l_out rows of `row` values spaced rsa apart,
        // all inside the input or buf. B is the transposed weight matrix; C is
        // the matching rows of the output, disjoint from both.
        unsafe {
            T::gemm(
                count * l_out,
                row,
                c_out,
                T::one(),
                a,
                rsa,
                1,
                weight.data.as_ptr(),
                1,
                row as isize,
                T::one(),
                y.as_mut_ptr(),
                c_out as isize,
                1,
            );
        }
        first += count;
    }
    Ok(out)
}

/// Gradients of [`conv1d_valid`]. Accumulates into `d_weight` and `d_bias`
/// and returns the input gradient when `want_input` is set.
pub fn conv1d_valid_backward<T: Scalar>(
    input: &Tensor3<T>,
    weight: &ParamTensor<T>,
    stride: usize,
    d_out: &Tensor3<T>,
    d_weight: &mut ParamTensor<T>,
    d_bias: &mut [T],
    want_input: bool,
) -> Result<Option<Tensor3<T>>> {
    let (c_out, k, l_out) = check_conv(input, &weight.dims, d_bias.len(), stride)?;
    if d_out.shape() != (input.batch(), c_out, l_out) {
        return Err(Error::shape(format!(
            "conv output gradient has shape {:?}, expected {:?}",
            d_out.shape(),
            (input.batch(), c_out, l_out)
        )));
    }
    let c_in = input.channels();
    let row = k * c_in;
    let batch = input.batch();
    for r in d_out.data().chunks_exact(c_out) {
        for (db, &g) in d_bias.iter_mut().zip(r) {
            *db += g;
        }
    }
    let group = group_size(batch, l_out, row);
    let mut d_input = want_input.then(|| Tensor3::zeros(batch, c_in, input.length()));
    let mut scratch = if want_input { vec![T::zero(); group * l_out * row] } else { Vec::new() };
    let mut buf = Vec::new();
    let mut first = 0;
    while first < batch {
        let count = group.min(batch - first);
        let rows = count * l_out;
        let dy = &d_out.data()[first * l_out * c_out..(first + count) * l_out * c_out];
        let (a, rsa) = patch_rows(input, first, count, k, stride, l_out, &mut buf);
        // dW (c_out x row) += dy^T (c_out x rows) * patches (rows x row)
        // SAFETY: same views as the forward pass; d_weight is a separate buffer.
        unsafe {
            T::gemm(
                c_out,
                rows,
                row,
                T::one(),
                dy.as_ptr(),
                1,
                c_out as isize,
                a,
                rsa,
                1,
                T::one(),
                d_weight.data.as_mut_ptr(),
                row as isize,
                1,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            // Patch gradient (rows x row) = dy (rows x c_out) * W (c_out x row),
            // then overlapping patches are summed back into dx.
            // SAFETY: scratch holds at least rows x row values and is disjoint from dy and W.
            unsafe {
                T::gemm(
                    rows,
                    c_out,
                    row,
                    T::one(),
                    dy.as_ptr(),
                    c_out as isize,
                    1,
                    weight.data.as_ptr(),
                    row as isize,
                    1,
                    T::zero(),
                    scratch.as_mut_ptr(),
                    row as isize,
                    1,
                );
            }
            for (i, g) in scratch[..rows * row].chunks_exact(row).enumerate() {
                let (b, t) = (first + i / l_out, i % l_out);
                let start = t * stride * c_in;
                for (d, &v) in dx.item_mut(b)[start..start + row].iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
        first += count;
    }
    Ok(d_input)
}

pub fn relu_in_place<T: Scalar>(x: &mut Tensor3<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

pub fn relu<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    let mut y = x.clone();
    relu_in_place(&mut y);
    y
}

/// Masks `grad` where the ReLU output was not positive.
pub fn relu_backward_in_place<T: Scalar>(output: &Tensor3<T>, grad: &mut Tensor3<T>) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Max pooling along length. Returns the pooled tensor and, per output
/// element, the input position that won (first maximum on ties).
pub fn max_pool1d<T: Scalar>(input: &Tensor3<T>, size: usize, stride: usize) -> Result<(Tensor3<T>, Vec<u32>)> {
    let l_out = conv_output_len(input.length(), size, stride).ok_or_else(|| {
        Error::shape(format!(
            "pool of {size} (stride {stride}) does not fit length {}",
            input.length()
        ))
    })?;
    let (batch, c, _) = input.shape();
    let mut out = Tensor3::zeros(batch, c, l_out);
    let mut arg = vec![0u32; batch * c * l_out];
    for b in 0..batch {
        let x = input.item(b);
        let base = b * c * l_out;
        let y = out.item_mut(b);
        for t in 0..l_out {
            let first = t * stride;
            y[t * c..(t + 1) * c].copy_from_slice(&x[first * c..(first + 1) * c]);
            for ch in 0..c {
                arg[base + t * c + ch] = first as u32;
            }
            for j in 1..size {
                let pos = first + j;
                for ch in 0..c {
                    let v = x[pos * c + ch];
                    if v > y[t * c + ch] {
                        y[t * c + ch] = v;
                        arg[base + t * c + ch] = pos as u32;
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

/// [`max_pool1d`] without the winning positions.
pub fn max_pool1d_values<T: Scalar>(input: &Tensor3<T>, size: usize, stride: usize) -> Result<Tensor3<T>> {
    let l_out = conv_output_len(input.length(), size, stride).ok_or_else(|| {
        Error::shape(format!(
            "pool of {size} (stride {stride}) does not fit length {}",
            input.length()
        ))
    })?;
    let (batch, c, _) = input.shape();
    let mut out = Tensor3::zeros(batch, c, l_out);
    for b in 0..batch {
        let x = input.item(b);
        let y = out.item_mut(b);
        for (t, yr) in y.chunks_exact_mut(c).enumerate() {
            let first = t * stride;
            yr.copy_from_slice(&x[first * c..(first + 1) * c]);
            for pos in first + 1..first + size {
                for (o, &v) in yr.iter_mut().zip(&x[pos * c..(pos + 1) * c]) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn max_pool1d_backward<T: Scalar>(
    input_len: usize,
    argmax: &[u32],
    d_out: &Tensor3<T>,
) -> Tensor3<T> {
    let (batch, c, l_out) = d_out.shape();
    let mut dx = Tensor3::zeros(batch, c, input_len);
    for b in 0..batch {
        let dy = d_out.item(b);
        let arg = &argmax[b * c * l_out..(b + 1) * c * l_out];
        let d = dx.item_mut(b);
        for t in 0..l_out {
            for ch in 0..c {
                let i = t * c + ch;
                d[arg[i] as usize * c + ch] += dy[i];
            }
        }
    }
    dx
}

/// Saved statistics for the normalization backward passes.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    /// Normalized input before the affine transform.
    pub normalized: Tensor3<T>,
    /// `1 / sqrt(var + eps)` per batch item (layer norm) or per channel (batch norm).
    pub inv_std: Vec<T>,
}

fn check_affine<T: Scalar>(x: &Tensor3<T>, gain: &[T], shift: &[T]) -> Result<()> {
    if gain.len() != x.channels() || shift.len() != x.channels() {
        return Err(Error::shape(format!(
            "normalization has {}/{} affine values for {} channels",
            gain.len(),
            shift.len(),
            x.channels()
        )));
    }
    Ok(())
}

/// Normalize each batch item over its channel and length dimensions, then
/// apply a per-channel gain and shift.
pub fn layer_norm<T: Scalar>(x: &Tensor3<T>, gain: &[T], shift: &[T]) -> Result<(Tensor3<T>, NormCache<T>)> {
    check_affine(x, gain, shift)?;
    let (batch, c, l) = x.shape();
    let n = T::of((c * l) as f64);
    let eps = T::of(NORM_EPSILON);
    let mut normalized = Tensor3::zeros(batch, c, l);
    let mut y = Tensor3::zeros(batch, c, l);
    let mut inv_std = Vec::with_capacity(batch);
    for b in 0..batch {
        let xb = x.item(b);
        let mean = xb.iter().copied().sum::<T>() / n;
        let var = xb.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        inv_std.push(r);
        let nb = normalized.item_mut(b);
        for (o, &v) in nb.iter_mut().zip(xb) {
            *o = (v - mean) * r;
        }
        for (yr, nr) in y.item_mut(b).chunks_exact_mut(c).zip(normalized.item(b).chunks_exact(c)) {
            for ch in 0..c {
                yr[ch] = nr[ch] * gain[ch] + shift[ch];
            }
        }
    }
    Ok((y, NormCache { normalized, inv_std }))
}

/// Inference block tail: ReLU, layer norm and an optional max-pool in two
/// passes per item. Same result as the separate kernels.
pub fn relu_layer_norm_pool<T: Scalar>(
    x: &Tensor3<T>,
    gain: &[T],
    shift: &[T],
    pool: Option<(usize, usize)>,
) -> Result<Tensor3<T>> {
    check_affine(x, gain, shift)?;
    let (batch, c, l) = x.shape();
    let (size, stride) = pool.unwrap_or((1, 1));
    let l_out = conv_output_len(l, size, stride)
        .ok_or_else(|| Error::shape(format!("pool of {size} (stride {stride}) does not fit length {l}")))?;
    let n = T::of((c * l) as f64);
    let eps = T::of(NORM_EPSILON);
    let zero = T::zero();
    let mut out = Tensor3::zeros(batch, c, l_out);
    let mut scale = vec![zero; c];
    let mut offset = vec![zero; c];
    for b in 0..batch {
        let xb = x.item(b);
        let mean = xb.iter().map(|&v| v.max(zero)).sum::<T>() / n;
        let var = xb
            .iter()
            .map(|&v| {
                let d = v.max(zero) - mean;
                d * d
            })
            .sum::<T>()
            / n;
        let r = T::one() / (var + eps).sqrt();
        for ch in 0..c {
            scale[ch] = r * gain[ch];
            offset[ch] = shift[ch] - mean * r * gain[ch];
        }
        let y = out.item_mut(b);
        for (t, yr) in y.chunks_exact_mut(c).enumerate() {
            let first = t * stride;
            for (pos, xr) in xb[first * c..(first + size) * c].chunks_exact(c).enumerate() {
                for ch in 0..c {
                    let v = xr[ch].max(zero) * scale[ch] + offset[ch];
                    if pos == 0 || v > yr[ch] {
                        yr[ch] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns the input gradient; accumulates into `d_gain` and `d_shift`.
pub fn layer_norm_backward<T: Scalar>(
    d_out: &Tensor3<T>,
    cache: &NormCache<T>,
    gain: &[T],
    d_gain: &mut [T],
    d_shift: &mut [T],
) -> Tensor3<T> {
    let (batch, c, l) = d_out.shape();
    let n = T::of((c * l) as f64);
    let mut dx = Tensor3::zeros(batch, c, l);
    let mut dxhat = vec![T::zero(); c * l];
    for b in 0..batch {
        let dy = d_out.item(b);
        let xh = cache.normalized.item(b);
        for ((dr, xr), hr) in dy.chunks_exact(c).zip(xh.chunks_exact(c)).zip(dxhat.chunks_exact_mut(c)) {
            for ch in 0..c {
                d_gain[ch] += dr[ch] * xr[ch];
                d_shift[ch] += dr[ch];
                hr[ch] = dr[ch] * gain[ch];
            }
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>() / n;
        let r = cache.inv_std[b];
        for ((o, &d), &h) in dx.item_mut(b).iter_mut().zip(&dxhat).zip(xh) {
            *o = r * (d - mean_d - h * mean_dx);
        }
    }
    dx
}

/// Per-channel statistics over batch and length.
pub fn channel_moments<T: Scalar>(x: &Tensor3<T>) -> (Vec<T>, Vec<T>) {
    let (batch, c, l) = x.shape();
    let n = T::of((batch * l) as f64);
    let mut mean = vec![T::zero(); c];
    for r in x.data().chunks_exact(c) {
        for ch in 0..c {
            mean[ch] += r[ch];
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); c];
    for r in x.data().chunks_exact(c) {
        for ch in 0..c {
            let d = r[ch] - mean[ch];
            var[ch] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / n);
    (mean, var)
}

/// Batch normalization with the given per-channel statistics.
pub fn batch_norm<T: Scalar>(
    x: &Tensor3<T>,
    mean: &[T],
    var: &[T],
    gain: &[T],
    shift: &[T],
) -> Result<(Tensor3<T>, NormCache<T>)> {
    check_affine(x, gain, shift)?;
    check_affine(x, mean, var)?;
    let (batch, c, l) = x.shape();
    let eps = T::of(NORM_EPSILON);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor3::zeros(batch, c, l);
    let mut y = Tensor3::zeros(batch, c, l);
    for ((xr, nr), yr) in x
        .data()
        .chunks_exact(c)
        .zip(normalized.data_mut().chunks_exact_mut(c))
        .zip(y.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            nr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
            yr[ch] = nr[ch] * gain[ch] + shift[ch];
        }
    }
    Ok((y, NormCache { normalized, inv_std }))
}

/// Backward of [`batch_norm`] when the statistics came from the batch itself.
pub fn batch_norm_backward<T: Scalar>(
    d_out: &Tensor3<T>,
    cache: &NormCache<T>,
    gain: &[T],
    d_gain: &mut [T],
    d_shift: &mut [T],
) -> Tensor3<T> {
    let (batch, c, l) = d_out.shape();
    let n = T::of((batch * l) as f64);
    let mut sum_d = vec![T::zero(); c];
    let mut sum_dx = vec![T::zero(); c];
    for (dr, hr) in d_out.data().chunks_exact(c).zip(cache.normalized.data().chunks_exact(c)) {
        for ch in 0..c {
            d_gain[ch] += dr[ch] * hr[ch];
            d_shift[ch] += dr[ch];
            let dh = dr[ch] * gain[ch];
            sum_d[ch] += dh;
            sum_dx[ch] += dh * hr[ch];
        }
    }
    let mut dx = Tensor3::zeros(batch, c, l);
    for ((o, dr), hr) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(d_out.data().chunks_exact(c))
        .zip(cache.normalized.data().chunks_exact(c))
    {
        for ch in 0..c {
            let dh = dr[ch] * gain[ch];
            o[ch] = cache.inv_std[ch] * (dh - sum_d[ch] / n - hr[ch] * sum_dx[ch] / n);
        }
    }
    dx
}

/// Row-wise softmax of a `rows x cols` matrix, computed in f64.
pub fn softmax_rows<T: Scalar>(logits: &[T], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let start = out.len();
        let mut sum = 0.0;
        for v in row {
            let e = (v.as_f64() - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct loop convolution over channels-first arrays, kernel `[co][ci][k]`.
    #[allow(clippy::too_many_arguments)]
    fn naive_conv(
        x: &[f64],
        batch: usize,
        c_in: usize,
        len: usize,
        w: &[f64],
        c_out: usize,
        k: usize,
        bias: &[f64],
        stride: usize,
    ) -> Vec<f64> {
        let l_out = (len - k) / stride + 1;
        let mut y = vec![0.0; batch * c_out * l_out];
        for b in 0..batch {
            for co in 0..c_out {
                for t in 0..l_out {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for j in 0..k {
                            acc += w[(co * c_in + ci) * k + j] * x[(b * c_in + ci) * len + t * stride + j];
                        }
                    }
                    y[(b * c_out + co) * l_out + t] = acc;
                }
            }
        }
        y
    }

    /// Reorder a `[co][ci][k]` kernel into the `[co][k][ci]` storage order.
    fn to_storage(w: &[f64], c_out: usize, c_in: usize, k: usize) -> ParamTensor<f64> {
        let mut p = ParamTensor::zeros(&[c_out, k, c_in]);
        for co in 0..c_out {
            for ci in 0..c_in {
                for j in 0..k {
                    p.data[(co * k + j) * c_in + ci] = w[(co * c_in + ci) * k + j];
                }
            }
        }
        p
    }

    #[test]
    fn identity_tap() {
        let x = Tensor3::from_vec(vec![1.0f32, 2.0, 3.0], 1, 1, 3).unwrap();
        let w = ParamTensor { dims: vec![1, 2, 1], data: vec![1.0f32, 0.0] };
        let y = conv1d_valid(&x, &w, &[0.0], 1).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn output_length_arithmetic() {
        let x = Tensor3::<f32>::zeros(1, 2, 993);
        let w = ParamTensor::zeros(&[3, 32, 2]);
        let y = conv1d_valid(&x, &w, &[0.0; 3], 1).unwrap();
        assert_eq!(y.length(), 962);
        assert_eq!(conv_output_len(1024, 64, 4), Some(241));
    }

    #[test]
    fn conv_errors() {
        let x = Tensor3::<f32>::zeros(1, 2, 10);
        assert!(conv1d_valid(&x, &ParamTensor::zeros(&[3, 4, 1]), &[0.0; 3], 1).is_err());
        assert!(conv1d_valid(&x, &ParamTensor::zeros(&[3, 11, 2]), &[0.0; 3], 1).is_err());
        assert!(conv1d_valid(&x, &ParamTensor::zeros(&[3, 4, 2]), &[0.0; 2], 1).is_err());
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(batch, c_in, len, c_out, k, stride) in
            &[(2, 3, 17, 4, 5, 1), (3, 1, 40, 6, 8, 3), (1, 5, 9, 2, 9, 1), (2, 4, 31, 3, 4, 2), (3, 5, 11, 2, 9, 1), (1, 2, 30, 3, 4, 2)]
        {
            let x = random_vec(&mut rng, batch * c_in * len);
            let w = random_vec(&mut rng, c_out * c_in * k);
            let bias = random_vec(&mut rng, c_out);
            let expect = naive_conv(&x, batch, c_in, len, &w, c_out, k, &bias, stride);
            // f32 path against the f64 oracle.
            let xt = Tensor3::from_channels_first(&x, batch, c_in, len).unwrap().cast_f32();
            let wt = to_storage(&w, c_out, c_in, k).cast::<f32>();
            let bt: Vec<f32> = bias.iter().map(|&v| v as f32).collect();
            let got = conv1d_valid(&xt, &wt, &bt, stride).unwrap().to_channels_first();
            // The oracle sees the same f32-rounded operands.
            let x32: Vec<f64> = x.iter().map(|&v| v as f32 as f64).collect();
            let w32: Vec<f64> = w.iter().map(|&v| v as f32 as f64).collect();
            let b32: Vec<f64> = bias.iter().map(|&v| v as f32 as f64).collect();
            let expect32 = naive_conv(&x32, batch, c_in, len, &w32, c_out, k, &b32, stride);
            let scale = expect32.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = got.iter().zip(&expect32).fold(0.0f64, |m, (g, e)| m.max((*g as f64 - e).abs()));
            assert!(err <= 1e-6 * scale, "relative error {}", err / scale);
            // f64 path is essentially exact.
            let xt = Tensor3::from_channels_first(&x, batch, c_in, len).unwrap();
            let got = conv1d_valid(&xt, &to_storage(&w, c_out, c_in, k), &bias, stride)
                .unwrap()
                .to_channels_first();
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(batch, c_in, len, c_out, k, stride) in &[(3, 2, 13, 3, 4, 2), (2, 3, 6, 2, 6, 1), (1, 2, 9, 2, 3, 1)] {
            let x = Tensor3::from_vec(random_vec(&mut rng, batch * c_in * len), batch, c_in, len).unwrap();
            let w = ParamTensor { dims: vec![c_out, k, c_in], data: random_vec(&mut rng, c_out * k * c_in) };
            let bias = random_vec(&mut rng, c_out);
            let y = conv1d_valid(&x, &w, &bias, stride).unwrap();
            let r = random_vec(&mut rng, y.data().len());
            let loss = |x: &Tensor3<f64>, w: &ParamTensor<f64>, bias: &[f64]| -> f64 {
                conv1d_valid(x, w, bias, stride).unwrap().data().iter().zip(&r).map(|(a, b)| a * b).sum()
            };
            let d_out = Tensor3::from_vec(r.clone(), batch, c_out, y.length()).unwrap();
            let mut dw = ParamTensor::zeros(&w.dims);
            let mut db = vec![0.0; c_out];
            let dx = conv1d_valid_backward(&x, &w, stride, &d_out, &mut dw, &mut db, true).unwrap().unwrap();
            let h = 1e-6;
            // The loss is linear in each operand, so central differences are exact up to rounding.
            for i in 0..x.data().len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                let fd = (loss(&xp, &w, &bias) - loss(&xm, &w, &bias)) / (2.0 * h);
                assert!((fd - dx.data()[i]).abs() < 1e-6, "dx[{i}]: {fd} vs {}", dx.data()[i]);
            }
            for i in 0..w.data.len() {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp.data[i] += h;
                wm.data[i] -= h;
                let fd = (loss(&x, &wp, &bias) - loss(&x, &wm, &bias)) / (2.0 * h);
                assert!((fd - dw.data[i]).abs() < 1e-6, "dw[{i}]");
            }
            for i in 0..c_out {
                let (mut bp, mut bm) = (bias.clone(), bias.clone());
                bp[i] += h;
                bm[i] -= h;
                let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
                assert!((fd - db[i]).abs() < 1e-6, "db[{i}]");
            }
        }
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                probe[i] = x[i] + h;
                let up = f(&probe);
                probe[i] = x[i] - h;
                let down = f(&probe);
                probe[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        assert!(diff / norm < tol, "relative error {}", diff / norm);
    }

    #[test]
    fn normalization_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (b, c, l) = (3, 4, 9);
        let x = random_vec(&mut rng, b * c * l);
        let gain = random_vec(&mut rng, c);
        let shift = random_vec(&mut rng, c);
        let r = random_vec(&mut rng, b * c * l);
        let d_out = Tensor3::from_vec(r.clone(), b, c, l).unwrap();
        let dot = |y: &Tensor3<f64>| y.data().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        let tensor = |v: &[f64]| Tensor3::from_vec(v.to_vec(), b, c, l).unwrap();

        // Layer norm: input, gain and shift.
        let (_, cache) = layer_norm(&tensor(&x), &gain, &shift).unwrap();
        let (mut dg, mut ds) = (vec![0.0; c], vec![0.0; c]);
        let dx = layer_norm_backward(&d_out, &cache, &gain, &mut dg, &mut ds);
        assert_close(dx.data(), &numeric_grad(&x, 1e-5, |v| dot(&layer_norm(&tensor(v), &gain, &shift).unwrap().0)), 1e-6);
        assert_close(&dg, &numeric_grad(&gain, 1e-5, |g| dot(&layer_norm(&tensor(&x), g, &shift).unwrap().0)), 1e-6);
        assert_close(&ds, &numeric_grad(&shift, 1e-5, |s| dot(&layer_norm(&tensor(&x), &gain, s).unwrap().0)), 1e-6);

        // Batch norm with statistics taken from the batch itself.
        let bn = |v: &[f64], g: &[f64], s: &[f64]| {
            let t = tensor(v);
            let (mean, var) = channel_moments(&t);
            batch_norm(&t, &mean, &var, g, s).unwrap()
        };
        let (_, cache) = bn(&x, &gain, &shift);
        let (mut dg, mut ds) = (vec![0.0; c], vec![0.0; c]);
        let dx = batch_norm_backward(&d_out, &cache, &gain, &mut dg, &mut ds);
        assert_close(dx.data(), &numeric_grad(&x, 1e-5, |v| dot(&bn(v, &gain, &shift).0)), 1e-6);
        assert_close(&dg, &numeric_grad(&gain, 1e-5, |g| dot(&bn(&x, g, &shift).0)), 1e-6);
        assert_close(&ds, &numeric_grad(&shift, 1e-5, |s| dot(&bn(&x, &gain, s).0)), 1e-6);
    }

    #[test]
    fn pool_and_relu_backward_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (b, c, l) = (2, 3, 12);
        // Distinct values at least 1e-3 apart and away from zero, so 1e-6
        // probes never cross a kink.
        let mut x: Vec<f64> = (0..b * c * l).map(|i| (i as f64 + 1.0) * 0.01 - 0.355).collect();
        for i in (1..x.len()).rev() {
            x.swap(i, rng.gen_range(0..=i));
        }
        let tensor = |v: &[f64]| Tensor3::from_vec(v.to_vec(), b, c, l).unwrap();
        for (size, stride) in [(2, 2), (3, 1), (4, 3)] {
            let (y, arg) = max_pool1d(&tensor(&x), size, stride).unwrap();
            let r = random_vec(&mut rng, y.data().len());
            let d_out = Tensor3::from_vec(r.clone(), b, c, y.length()).unwrap();
            let dx = max_pool1d_backward(l, &arg, &d_out);
            let f = |v: &[f64]| {
                let (y, _) = max_pool1d(&tensor(v), size, stride).unwrap();
                y.data().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
            };
            assert_close(dx.data(), &numeric_grad(&x, 1e-6, f), 1e-8);
        }
        let r = random_vec(&mut rng, x.len());
        let y = relu(&tensor(&x));
        let mut g = tensor(&r);
        relu_backward_in_place(&y, &mut g);
        let f = |v: &[f64]| relu(&tensor(v)).data().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        assert_close(g.data(), &numeric_grad(&x, 1e-6, f), 1e-8);
    }

    #[test]
    fn inference_forms_match_training_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor3::from_vec(random_vec(&mut rng, 2 * 3 * 10), 2, 3, 10).unwrap();
        let gain = [0.5, 2.0, -1.0];
        let shift = [0.1, 0.0, 3.0];
        for (size, stride) in [(2, 2), (3, 1), (4, 3)] {
            assert_eq!(max_pool1d(&x, size, stride).unwrap().0, max_pool1d_values(&x, size, stride).unwrap());
            let (n, _) = layer_norm(&relu(&x), &gain, &shift).unwrap();
            let (want, _) = max_pool1d(&n, size, stride).unwrap();
            let got = relu_layer_norm_pool(&x, &gain, &shift, Some((size, stride))).unwrap();
            for (a, b) in want.data().iter().zip(got.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let (want, _) = layer_norm(&relu(&x), &gain, &shift).unwrap();
        let got = relu_layer_norm_pool(&x, &gain, &shift, None).unwrap();
        for (a, b) in want.data().iter().zip(got.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_and_pool_examples() {
        let x = Tensor3::from_vec(vec![-1.0f32, 2.0], 1, 1, 2).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let x = Tensor3::from_vec(vec![1.0f32, 3.0, 2.0, 4.0], 1, 1, 4).unwrap();
        let (y, arg) = max_pool1d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
        assert_eq!(arg, vec![1, 3]);
        assert!(max_pool1d(&x, 5, 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor3::from_vec(vec![0.7f64; 12], 1, 3, 4).unwrap();
        let (y, _) = layer_norm(&x, &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));

        let vals = [1.0f64, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let x = Tensor3::from_vec(vals.to_vec(), 1, 2, 4).unwrap();
        let (y, _) = layer_norm(&x, &[1.0; 2], &[0.0; 2]).unwrap();
        for (a, b) in y.data().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-5);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor3::from_vec(random_vec(&mut rng, 3 * 4 * 50).iter().map(|v| v * 7.0 + 2.0).collect(), 3, 4, 50).unwrap();
        let (y, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4]).unwrap();
        for b in 0..3 {
            let it = y.item(b);
            let n = it.len() as f64;
            let mean = it.iter().sum::<f64>() / n;
            let var = it.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(layer_norm(&x, &[1.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn batch_norm_normalizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor3::from_vec(random_vec(&mut rng, 4 * 3 * 20).iter().map(|v| v * 3.0 - 1.0).collect(), 4, 3, 20).unwrap();
        let (mean, var) = channel_moments(&x);
        let (y, _) = batch_norm(&x, &mean, &var, &[1.0; 3], &[0.0; 3]).unwrap();
        let (m2, v2) = channel_moments(&y);
        for ch in 0..3 {
            assert!(m2[ch].abs() < 1e-9);
            assert!((v2[ch] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1000.0f32, 1000.0, -5.0, 0.0], 2);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        assert!((p[2] + p[3] - 1.0).abs() < 1e-12);
    }

    impl Tensor3<f64> {
        fn cast_f32(&self) -> Tensor3<f32> {
            let (b, c, l) = self.shape();
            Tensor3::from_vec(self.data().iter().map(|&v| v as f32).collect(), b, c, l).unwrap()
        }
    }

    proptest! {
        #[test]
        fn pool_and_relu_commute(vals in proptest::collection::vec(-5.0f32..5.0, 2..40), size in 1usize..4, stride in 1usize..4) {
            prop_assume!(size <= vals.len());
            let n = vals.len();
            let x = Tensor3::from_vec(vals, 1, 1, n).unwrap();
            let (a, _) = max_pool1d(&relu(&x), size, stride).unwrap();
            let (p, _) = max_pool1d(&x, size, stride).unwrap();
            prop_assert_eq!(a, relu(&p));
        }
    }
}
