//! Forward-only layer primitives on channel-major feature maps.

use rayon::prelude::*;

use crate::error::{NetError, Result};
use crate::format::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// `[channels, height, width]` row-major activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(NetError::invalid(
                "feature map",
                format!("{} values for shape [{channels}, {height}, {width}]", data.len()),
            ));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat(&self, other: &FeatureMap, layer: &str) -> Result<FeatureMap> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(NetError::invalid(
                layer,
                format!(
                    "cannot concatenate {}×{} with {}×{}",
                    self.height, self.width, other.height, other.width
                ),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(FeatureMap { channels: self.channels + other.channels, height: self.height, width: self.width, data })
    }

    pub fn add_assign(&mut self, other: &FeatureMap, layer: &str) -> Result<()> {
        if self.data.len() != other.data.len() || self.channels != other.channels {
            return Err(NetError::invalid(layer, "residual shapes differ"));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

fn expect_dims(layer: &str, what: &str, t: &Tensor, dims: &[usize]) -> Result<()> {
    if t.dims() != dims {
        return Err(NetError::invalid(layer, format!("{what} has shape {:?}, expected {dims:?}", t.dims())));
    }
    Ok(())
}

/// Zero-padded ("same" for stride 1) 2D convolution with a square odd kernel.
pub fn conv2d(x: &FeatureMap, weight: &Tensor, bias: &Tensor, stride: usize, layer: &str) -> Result<FeatureMap> {
    let d = weight.dims();
    if d.len() != 4 || d[2] != d[3] || d[2] % 2 == 0 {
        return Err(NetError::invalid(layer, format!("weight shape {d:?} is not [out, in, k, k] with odd k")));
    }
    let (co, ci, k) = (d[0], d[1], d[2]);
    if ci != x.channels {
        return Err(NetError::invalid(layer, format!("expects {ci} input channels, got {}", x.channels)));
    }
    expect_dims(layer, "bias", bias, &[co])?;
    if stride == 0 {
        return Err(NetError::invalid(layer, "stride must be positive"));
    }
    let pad = k / 2;
    if x.height + 2 * pad < k || x.width + 2 * pad < k {
        return Err(NetError::invalid(layer, "input smaller than kernel"));
    }
    let ho = (x.height + 2 * pad - k) / stride + 1;
    let wo = (x.width + 2 * pad - k) / stride + 1;
    let (h, w) = (x.height as isize, x.width as isize);
    let wdata = weight.data();
    let mut out = vec![0f32; co * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(o, plane)| {
        plane.fill(bias.data()[o]);
        for c in 0..ci {
            let src = x.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdata[((o * ci + c) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let row = &src[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let dst = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, acc) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w {
                                *acc += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    FeatureMap::new(co, ho, wo, out)
}

/// Group normalization over `channels / group_size` groups with per-channel affine.
pub fn group_norm(x: &FeatureMap, group_size: usize, gamma: &Tensor, beta: &Tensor, layer: &str) -> Result<FeatureMap> {
    expect_dims(layer, "scale", gamma, &[x.channels])?;
    expect_dims(layer, "shift", beta, &[x.channels])?;
    if group_size == 0 || x.channels % group_size != 0 {
        return Err(NetError::invalid(layer, format!("{} channels do not split into groups of {group_size}", x.channels)));
    }
    let p = x.plane();
    let span = group_size * p;
    let mut out = vec![0f32; x.data.len()];
    out.par_chunks_mut(span).zip(x.data.par_chunks(span)).enumerate().for_each(|(g, (dst, src))| {
        let n = src.len() as f64;
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for (j, (o, &v)) in dst.iter_mut().zip(src).enumerate() {
            let c = g * group_size + j / p;
            *o = (((v as f64 - mean) * inv) as f32) * gamma.data()[c] + beta.data()[c];
        }
    });
    FeatureMap::new(x.channels, x.height, x.width, out)
}

pub fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

pub fn silu_inplace(values: &mut [f32]) {
    for v in values {
        *v = silu(*v);
    }
}

pub fn upsample_nearest2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut data = vec![0f32; x.channels * h * w];
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.width + xx / 2];
            }
        }
    }
    FeatureMap { channels: x.channels, height: h, width: w, data }
}

/// `y = W x + b` applied to each of `rows` input vectors stored contiguously.
pub fn linear(input: &[f32], rows: usize, weight: &Tensor, bias: &Tensor, layer: &str) -> Result<Vec<f32>> {
    let d = weight.dims();
    if d.len() != 2 {
        return Err(NetError::invalid(layer, format!("weight shape {d:?} is not [out, in]")));
    }
    let (o, i) = (d[0], d[1]);
    expect_dims(layer, "bias", bias, &[o])?;
    if input.len() != rows * i {
        return Err(NetError::invalid(layer, format!("expects rows of {i} features, got {} values for {rows} rows", input.len())));
    }
    let w = weight.data();
    let mut out = vec![0f32; rows * o];
    out.par_chunks_mut(o.max(1)).zip(input.par_chunks(i.max(1))).for_each(|(dst, x)| {
        for (r, y) in dst.iter_mut().enumerate() {
            let row = &w[r * i..(r + 1) * i];
            *y = bias.data()[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
        }
    });
    Ok(out)
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(values: &mut [f32], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in values.chunks_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (v, e) in row.iter_mut().zip(exps) {
            *v = (e / sum) as f32;
        }
    }
}

/// Softmax of `q kᵀ / √d` for `n` queries against `m` keys of width `d`.
pub fn attention_weights(q: &[f32], k: &[f32], n: usize, m: usize, d: usize) -> Vec<f32> {
    let scale = 1.0 / (d as f32).sqrt();
    let mut a = vec![0f32; n * m];
    a.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        let qi = &q[i * d..(i + 1) * d];
        for (j, s) in row.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
        }
    });
    softmax_rows(&mut a, m);
    a
}

/// Scaled dot-product attention; returns `n × d` outputs.
pub fn attention(q: &[f32], k: &[f32], v: &[f32], n: usize, m: usize, d: usize) -> Vec<f32> {
    let a = attention_weights(q, k, n, m, d);
    let mut out = vec![0f32; n * d];
    out.par_chunks_mut(d.max(1)).enumerate().for_each(|(i, dst)| {
        for j in 0..m {
            let w = a[i * m + j];
            for (o, &vv) in dst.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += w * vv;
            }
        }
    });
    out
}

/// `[C, H·W]` to `[H·W, C]`.
pub fn to_tokens(x: &FeatureMap) -> Vec<f32> {
    let p = x.plane();
    let mut t = vec![0f32; x.data.len()];
    for c in 0..x.channels {
        for i in 0..p {
            t[i * x.channels + c] = x.data[c * p + i];
        }
    }
    t
}

pub fn from_tokens(tokens: &[f32], channels: usize, height: usize, width: usize) -> FeatureMap {
    let p = height * width;
    let mut data = vec![0f32; tokens.len()];
    for i in 0..p {
        for c in 0..channels {
            data[c * p + i] = tokens[i * channels + c];
        }
    }
    FeatureMap { channels, height, width, data }
}
