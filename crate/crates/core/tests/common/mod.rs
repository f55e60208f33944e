//! Independent double-precision reference forward pass over a model's
//! node list, with parameters supplied as flat vectors in traversal order.

#![allow(dead_code)]

use int8_train::nn::{Model, Node};
use int8_train::Tensor;

/// Activations as (dims, values).
pub type Act = (Vec<usize>, Vec<f64>);

/// Every trainable parameter in traversal order.
pub fn params_f64(model: &Model) -> Vec<Vec<f64>> {
    let mut m = model.clone();
    m.named_params().into_iter().map(|(_, t)| t.data().iter().map(|&v| v as f64).collect()).collect()
}

fn conv(x: &Act, w: &[f64], b: &[f64], cout: usize, k: usize, stride: usize, pad: usize, groups: usize) -> Act {
    let (n, c, h, wd) = (x.0[0], x.0[1], x.0[2], x.0[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let cpg = c / groups;
    let opg = cout / groups;
    let mut y = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for o in 0..cout {
            let g = o / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[o];
                    for ci in 0..cpg {
                        let ch = g * cpg + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.1[((bi * c + ch) * h + iy as usize) * wd + ix as usize];
                                s += xv * w[((o * cpg + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    y[((bi * cout + o) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    (vec![n, cout, oh, ow], y)
}

fn batch_norm(x: &Act, gamma: &[f64], beta: &[f64], stats: Option<(&[f32], &[f32])>) -> Act {
    let (n, c) = (x.0[0], x.0[1]);
    let s: usize = x.0[2..].iter().product();
    let mut y = x.1.clone();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| x.1[(b * c + ch) * s..(b * c + ch + 1) * s].iter().copied()).collect();
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch] as f64, v[ch] as f64),
            None => {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                (mean, vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64)
            }
        };
        let inv = 1.0 / (var + 1e-5).sqrt();
        for b in 0..n {
            for v in &mut y[(b * c + ch) * s..(b * c + ch + 1) * s] {
                *v = gamma[ch] * (*v - mean) * inv + beta[ch];
            }
        }
    }
    (x.0.clone(), y)
}

fn pool(x: &Act, k: usize, stride: usize, max: bool) -> Act {
    let (n, c, h, w) = (x.0[0], x.0[1], x.0[2], x.0[3]);
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let vals = (0..k * k).map(|i| x.1[(p * h + oy * stride + i / k) * w + ox * stride + i % k]);
                y.push(if max { vals.fold(f64::NEG_INFINITY, f64::max) } else { vals.sum::<f64>() / (k * k) as f64 });
            }
        }
    }
    (vec![n, c, oh, ow], y)
}

fn run(nodes: &[Node], x: Act, params: &mut std::slice::Iter<'_, Vec<f64>>, train: bool) -> Act {
    let mut x = x;
    for node in nodes {
        x = match node {
            Node::Conv(cv) => {
                let (w, b) = (params.next().unwrap(), params.next().unwrap());
                let d = cv.weight.value.dims();
                conv(&x, w, b, d[0], d[2], cv.stride, cv.padding, cv.groups)
            }
            Node::Linear(l) => {
                let (w, b) = (params.next().unwrap(), params.next().unwrap());
                let (out, fan) = (l.weight.value.dims()[0], l.weight.value.dims()[1]);
                let n = x.0[0];
                let mut y = vec![0.0; n * out];
                for i in 0..n {
                    for o in 0..out {
                        y[i * out + o] = b[o] + (0..fan).map(|j| w[o * fan + j] * x.1[i * fan + j]).sum::<f64>();
                    }
                }
                (vec![n, out], y)
            }
            Node::BatchNorm(bn) => {
                let (g, b) = (params.next().unwrap(), params.next().unwrap());
                let stats = (!train).then_some((&bn.running_mean[..], &bn.running_var[..]));
                batch_norm(&x, g, b, stats)
            }
            Node::Relu => (x.0.clone(), x.1.iter().map(|v| v.max(0.0)).collect()),
            Node::MaxPool { kernel, stride } => pool(&x, *kernel, *stride, true),
            Node::AvgPool { kernel, stride } => pool(&x, *kernel, *stride, false),
            Node::GlobalAvgPool => {
                let (n, c) = (x.0[0], x.0[1]);
                let s: usize = x.0[2..].iter().product();
                (vec![n, c], (0..n * c).map(|p| x.1[p * s..(p + 1) * s].iter().sum::<f64>() / s as f64).collect())
            }
            Node::Flatten => {
                let n = x.0[0];
                (vec![n, x.1.len() / n], x.1)
            }
            Node::Residual(body) => {
                let y = run(body, x.clone(), params, train);
                (y.0, y.1.iter().zip(&x.1).map(|(a, b)| a + b).collect())
            }
        };
    }
    x
}

/// Logits in double precision.
pub fn reference_logits(model: &Model, params: &[Vec<f64>], x: &Tensor, train: bool) -> Act {
    let input = (x.dims().to_vec(), x.data().iter().map(|&v| v as f64).collect());
    let mut it = params.iter();
    let out = run(&model.nodes, input, &mut it, train);
    assert!(it.next().is_none(), "unused parameters");
    out
}

/// Mean softmax cross-entropy in double precision.
pub fn reference_loss(model: &Model, params: &[Vec<f64>], x: &Tensor, labels: &[usize], train: bool) -> f64 {
    let (dims, z) = reference_logits(model, params, x, train);
    let (n, k) = (dims[0], dims[1]);
    let mut loss = 0.0;
    for i in 0..n {
        let row = &z[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i]];
    }
    loss / n as f64
}

/// Largest relative error between the FP32 backward gradients `a` and
/// central differences `n` of the reference loss, with the parameter count.
/// The error is `|a - n| / max(|a|, |n|, 1e-3 * max|n|)`: entries more than
/// three orders below the largest gradient, including the structurally zero
/// gradients of biases that feed batch norm, are measured on that scale.
pub fn finite_difference_check(model: &Model, x: &Tensor, labels: &[usize], step: f64) -> (f64, usize) {
    use int8_train::nn::{Backward, Forward, GradClip, Mode};
    use int8_train::quant::LcgStream;

    let mut m = model.clone();
    let out = m.forward(x, labels, Forward { mode: Mode::Fp32, train: true, states: &[] }).unwrap();
    let mut stream = LcgStream::new(0);
    m.backward(out, &mut Backward { states: &mut [], policy: GradClip::MaxAbs, iter: 0, stream: &mut stream, capture: false })
        .unwrap();
    let mut analytic = Vec::new();
    m.visit_params_mut(&mut |p| analytic.push(p.param.grad.data().iter().map(|&v| v as f64).collect::<Vec<_>>()));

    let mut params = params_f64(model);
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut row = Vec::with_capacity(params[i].len());
        for j in 0..params[i].len() {
            let orig = params[i][j];
            params[i][j] = orig + step;
            let up = reference_loss(model, &params, x, labels, true);
            params[i][j] = orig - step;
            let down = reference_loss(model, &params, x, labels, true);
            params[i][j] = orig;
            row.push((up - down) / (2.0 * step));
        }
        numeric.push(row);
    }
    let floor = 1e-3 * numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    let mut count = 0;
    for (a_row, n_row) in analytic.iter().zip(&numeric) {
        for (&a, &n) in a_row.iter().zip(n_row) {
            count += 1;
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    (worst, count)
}
