//! Layer primitives with explicit forward caches and backward passes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor with its gradient and optional momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub(crate) velocity: Vec<f32>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.dims()).expect("value has a valid shape");
        Param { value, grad, velocity: Vec::new() }
    }

    /// `w -= lr * g`, or heavy-ball momentum when `momentum > 0`.
    pub fn sgd(&mut self, lr: f64, momentum: f64) {
        let lr = lr as f32;
        if momentum > 0.0 {
            if self.velocity.len() != self.value.len() {
                self.velocity = vec![0.0; self.value.len()];
            }
            let m = momentum as f32;
            for ((w, g), v) in self.value.data_mut().iter_mut().zip(self.grad.data()).zip(&mut self.velocity) {
                *v = m * *v + g;
                *w -= lr * *v;
            }
        } else {
            for (w, g) in self.value.data_mut().iter_mut().zip(self.grad.data()) {
                *w -= lr * g;
            }
        }
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.dims() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref d => Err(Error::DimensionMismatch(format!("{what} expects N x C x H x W, got {d:?}"))),
    }
}

/// `(N, C, spatial)` view of a rank-2 or rank-4 tensor.
fn channel_view(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        ref d => Err(Error::DimensionMismatch(format!("expected rank 2 or 4, got {d:?}"))),
    }
}

/// Adds a per-channel bias in place.
pub(crate) fn add_bias(z: &mut Tensor, bias: &[f32]) -> Result<()> {
    let (n, c, s) = channel_view(z)?;
    if c != bias.len() {
        return Err(Error::DimensionMismatch(format!("{} biases for {c} channels", bias.len())));
    }
    let data = z.data_mut();
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate() {
            let o = (b * c + ch) * s;
            data[o..o + s].iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(())
}

/// Per-channel sum, the bias gradient.
pub(crate) fn channel_sum(g: &Tensor) -> Result<Vec<f32>> {
    let (n, c, s) = channel_view(g)?;
    let mut acc = vec![0.0f64; c];
    for b in 0..n {
        for (ch, a) in acc.iter_mut().enumerate() {
            let o = (b * c + ch) * s;
            *a += g.data()[o..o + s].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[channels], 1.0).expect("channels > 0")),
            beta: Param::new(Tensor::zeros(&[channels]).expect("channels > 0")),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Batch statistics when `train`, running statistics otherwise.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<(Tensor, Option<BatchNormCache>)> {
        let (n, c, s) = channel_view(x)?;
        if c != self.channels() {
            return Err(Error::DimensionMismatch(format!("batch norm over {} channels got {c}", self.channels())));
        }
        let m = (n * s) as f64;
        let (mean, var) = if train {
            let mut mean = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    let o = (b * c + ch) * s;
                    for &v in &x.data()[o..o + s] {
                        mean[ch] += v as f64;
                        sq[ch] += v as f64 * v as f64;
                    }
                }
            }
            let mean: Vec<f64> = mean.iter().map(|v| v / m).collect();
            let var: Vec<f64> = sq.iter().zip(&mean).map(|(q, mu)| (q / m - mu * mu).max(0.0)).collect();
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                let mo = self.momentum;
                self.running_mean[ch] = (1.0 - mo) * self.running_mean[ch] + mo * mean[ch] as f32;
                self.running_var[ch] = (1.0 - mo) * self.running_var[ch] + mo * (var[ch] * unbias) as f32;
            }
            (mean, var)
        } else {
            (
                self.running_mean.iter().map(|&v| v as f64).collect(),
                self.running_var.iter().map(|&v| v as f64).collect(),
            )
        };
        let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + self.eps as f64).sqrt()) as f32).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * s;
                let mu = mean[ch] as f32;
                for i in o..o + s {
                    let h = (x.data()[i] - mu) * inv_std[ch];
                    xhat.data_mut()[i] = h;
                    y.data_mut()[i] = gamma[ch] * h + beta[ch];
                }
            }
        }
        Ok((y, train.then_some(BatchNormCache { xhat, inv_std })))
    }

    /// Stores parameter gradients and returns the input gradient.
    pub fn backward(&mut self, gy: &Tensor, cache: &BatchNormCache) -> Result<Tensor> {
        let (n, c, s) = channel_view(gy)?;
        let m = (n * s) as f64;
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * s;
                for i in o..o + s {
                    let g = gy.data()[i] as f64;
                    sum_g[ch] += g;
                    sum_gx[ch] += g * cache.xhat.data()[i] as f64;
                }
            }
        }
        let gamma = self.gamma.value.data().to_vec();
        self.gamma.grad = Tensor::from_vec(&[c], sum_gx.iter().map(|&v| v as f32).collect())?;
        self.beta.grad = Tensor::from_vec(&[c], sum_g.iter().map(|&v| v as f32).collect())?;
        let mut gx = gy.clone();
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * s;
                let k = gamma[ch] as f64 * cache.inv_std[ch] as f64 / m;
                for i in o..o + s {
                    let g = gy.data()[i] as f64;
                    let h = cache.xhat.data()[i] as f64;
                    gx.data_mut()[i] = (k * (m * g - sum_g[ch] - h * sum_gx[ch])) as f32;
                }
            }
        }
        Ok(gx)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(gy: &Tensor, y: &Tensor) -> Tensor {
    let data = gy.data().iter().zip(y.data()).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
    Tensor::from_vec(gy.dims(), data).expect("same shape as gy")
}

fn pool_out(size: usize, k: usize, stride: usize) -> Result<usize> {
    if k == 0 || stride == 0 || size < k {
        return Err(Error::Geometry(format!("pool window {k} stride {stride} over extent {size}")));
    }
    Ok((size - k) / stride + 1)
}

/// Max pooling without padding; returns the output and flat argmax indices.
pub fn max_pool(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = dims4(x, "max pool")?;
    let (oh, ow) = (pool_out(h, k, stride)?, pool_out(w, k, stride)?);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                }
                out.push(x.data()[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, arg))
}

pub fn max_pool_backward(gy: &Tensor, arg: &[u32], input_dims: &[usize]) -> Result<Tensor> {
    let mut gx = Tensor::zeros(input_dims)?;
    for (&g, &i) in gy.data().iter().zip(arg) {
        gx.data_mut()[i as usize] += g;
    }
    Ok(gx)
}

pub fn avg_pool(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let [n, c, h, w] = dims4(x, "average pool")?;
    let (oh, ow) = (pool_out(h, k, stride)?, pool_out(w, k, stride)?);
    let inv = 1.0 / (k * k) as f32;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0f32;
                for dy in 0..k {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    s += x.data()[row..row + k].iter().sum::<f32>();
                }
                out.push(s * inv);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn avg_pool_backward(gy: &Tensor, k: usize, stride: usize, input_dims: &[usize]) -> Result<Tensor> {
    let [_, _, oh, ow] = dims4(gy, "average pool gradient")?;
    let (h, w) = (input_dims[2], input_dims[3]);
    let inv = 1.0 / (k * k) as f32;
    let mut gx = Tensor::zeros(input_dims)?;
    let planes = gy.len() / (oh * ow);
    for plane in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy.data()[(plane * oh + oy) * ow + ox] * inv;
                for dy in 0..k {
                    let row = plane * h * w + (oy * stride + dy) * w + ox * stride;
                    gx.data_mut()[row..row + k].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    Ok(gx)
}

/// Mean over the spatial extent: `N x C x H x W -> N x C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims4(x, "global average pool")?;
    let s = h * w;
    let data = x.data().chunks_exact(s).map(|p| p.iter().sum::<f32>() / s as f32).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward(gy: &Tensor, input_dims: &[usize]) -> Result<Tensor> {
    let s = input_dims[2] * input_dims[3];
    let inv = 1.0 / s as f32;
    let data = gy.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, s)).collect();
    Tensor::from_vec(input_dims, data)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, classes) = match *logits.dims() {
        [n, c] => (n, c),
        ref d => return Err(Error::DimensionMismatch(format!("logits must be N x classes, got {d:?}"))),
    };
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(n * classes);
    for (row, &y) in logits.data().chunks_exact(classes).zip(labels) {
        if y >= classes {
            return Err(Error::Dataset(format!("label {y} out of range for {classes} classes")));
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + m - row[y] as f64;
        for (j, e) in exps.iter().enumerate() {
            let p = e / z - if j == y { 1.0 } else { 0.0 };
            grad.push((p / n as f64) as f32);
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(&[n, classes], grad)?))
}
