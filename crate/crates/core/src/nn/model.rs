//! Sequential layer graph with residual blocks, in FP32 or INT8 mode.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::layers::{self, BatchNorm, BatchNormCache, Param};
use crate::clip::{ClipSearchConfig, ClipState};
use crate::error::{Error, Result};
use crate::kernels::{
    conv2d_backward_f32, conv2d_backward_q, conv2d_f32, conv2d_q, linear_backward_f32, linear_backward_q, linear_f32,
    linear_q, ConvGeometry,
};
use crate::quant::{quantize, LcgStream, QuantParams, QuantizedTensor, RoundingMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fp32,
    Int8,
}

/// How the clip for each layer's activation gradient is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradClip {
    /// Periodic cosine-distance minimizing search.
    Search(ClipSearchConfig),
    /// No clipping: `c = max|g_z|` every iteration.
    MaxAbs,
}

/// Quantization state of one conv or fc layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    pub weight_clip: f32,
    pub act_clip: f32,
    pub grad: ClipState,
}

impl LayerQuant {
    pub fn new(layer: usize, period: u64) -> Self {
        LayerQuant { weight_clip: 0.0, act_clip: 0.0, grad: ClipState::new(layer, period) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// Index into the model's quantization states.
    pub qid: usize,
    pub quantize: bool,
}

impl Conv {
    pub fn out_channels(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.weight.value.dims()[1] == 1
    }

    fn geometry(&self, x: &Tensor) -> Result<ConvGeometry> {
        let d = x.dims();
        if d.len() != 4 {
            return Err(Error::DimensionMismatch(format!("conv input must be rank 4, got {d:?}")));
        }
        let wd = self.weight.value.dims();
        ConvGeometry::new([d[0], d[1], d[2], d[3]], wd[0], [wd[2], wd[3]], self.stride, self.padding, self.groups)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub qid: usize,
    pub quantize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Conv(Conv),
    Linear(Linear),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    /// `y = x + body(x)`.
    Residual(Vec<Node>),
}

#[derive(Debug, Clone)]
pub(crate) struct QuantCache {
    a: QuantizedTensor,
    w: QuantizedTensor,
}

#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Conv { input: Tensor, geom: ConvGeometry, q: Option<QuantCache> },
    Linear { input: Tensor, q: Option<QuantCache> },
    BatchNorm(BatchNormCache),
    Relu(Tensor),
    MaxPool { arg: Vec<u32>, dims: Vec<usize> },
    AvgPool { dims: Vec<usize> },
    GlobalAvgPool { dims: Vec<usize> },
    Flatten { dims: Vec<usize> },
    Residual(Vec<Cache>),
    /// Inference pass; nothing to differentiate.
    Empty,
}

/// Settings of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward<'a> {
    pub mode: Mode,
    /// Batch statistics in batch norm and a backward-ready cache.
    pub train: bool,
    pub states: &'a [LayerQuant],
}

pub struct ForwardOutput {
    pub logits: Tensor,
    pub loss: f64,
    /// `max|a|` of the input to each quantized layer, indexed by `qid`.
    pub act_max_abs: Vec<f32>,
    pub(crate) cache: Vec<Cache>,
    pub(crate) g_logits: Tensor,
}

/// Settings of one backward pass.
pub struct Backward<'a> {
    pub states: &'a mut [LayerQuant],
    pub policy: GradClip,
    pub iter: u64,
    pub stream: &'a mut LcgStream,
    /// Keep each layer's float `g_z` in its report.
    pub capture: bool,
}

/// Gradient record of one conv/fc layer. `g_W` lives in the layer's weight
/// parameter and `g_a` flows to the previous layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub layer: usize,
    /// Cosine distance between `g_z` and its quantized version.
    pub dc: f64,
    pub clip: f32,
    /// `||g_z - dequantize(q(g_z))||`.
    pub eps_norm: f64,
    /// `||g_W||^2`.
    pub ghat_sqnorm: f64,
    pub gz: Option<Tensor>,
}

pub struct BackwardOutput {
    /// Sorted by layer id.
    pub layers: Vec<LayerGrad>,
    pub clip_time: Duration,
}

/// A classifier: nodes applied in order, then softmax cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub input: [usize; 3],
    pub classes: usize,
    pub nodes: Vec<Node>,
}

/// Mutable view of one parameter during a traversal.
pub struct ParamMut<'a> {
    pub name: String,
    /// Owning quantized layer, `None` for batch norm.
    pub qid: Option<usize>,
    pub param: &'a mut Param,
}

fn visit_nodes<'a>(nodes: &'a mut [Node], prefix: &str, f: &mut dyn FnMut(ParamMut<'a>)) {
    for (i, node) in nodes.iter_mut().enumerate() {
        let p = format!("{prefix}{i}");
        match node {
            Node::Conv(Conv { weight, bias, qid, .. }) | Node::Linear(Linear { weight, bias, qid, .. }) => {
                f(ParamMut { name: format!("{p}.weight"), qid: Some(*qid), param: weight });
                f(ParamMut { name: format!("{p}.bias"), qid: Some(*qid), param: bias });
            }
            Node::BatchNorm(bn) => {
                f(ParamMut { name: format!("{p}.gamma"), qid: None, param: &mut bn.gamma });
                f(ParamMut { name: format!("{p}.beta"), qid: None, param: &mut bn.beta });
            }
            Node::Residual(body) => visit_nodes(body, &format!("{p}."), f),
            _ => {}
        }
    }
}

fn collect_quant<'a>(nodes: &'a [Node], out: &mut Vec<&'a Node>) {
    for node in nodes {
        match node {
            Node::Conv(_) | Node::Linear(_) => out.push(node),
            Node::Residual(body) => collect_quant(body, out),
            _ => {}
        }
    }
}

fn quant_params(clip: f32) -> Result<QuantParams> {
    QuantParams::from_max_abs(clip)
}

fn grad_layer(
    gz: &Tensor,
    qid: usize,
    bwd: &mut Backward<'_>,
    clip_time: &mut Duration,
) -> Result<(QuantizedTensor, Tensor, f64, f32, f64)> {
    let state = bwd
        .states
        .get_mut(qid)
        .ok_or_else(|| Error::Config(format!("no quantization state for layer {qid}")))?;
    let t0 = Instant::now();
    match bwd.policy {
        GradClip::Search(cfg) => state.grad.maybe_update(gz, bwd.iter, &cfg)?,
        GradClip::MaxAbs => state.grad.track_max_abs(gz)?,
    }
    *clip_time += t0.elapsed();
    let q = quantize(gz, quant_params(state.grad.clip)?, RoundingMode::Stochastic, Some(bwd.stream))?;
    let deq = q.dequantize();
    let eps = gz.sub(&deq)?.l2_norm();
    Ok((q, deq, state.grad.last_dc, state.grad.clip, eps))
}

impl Model {
    pub fn quant_layers(&self) -> usize {
        let mut v = Vec::new();
        collect_quant(&self.nodes, &mut v);
        v.len()
    }

    /// Conv and fc layers in `qid` order.
    pub fn quantized_nodes(&self) -> Vec<&Node> {
        let mut v = Vec::new();
        collect_quant(&self.nodes, &mut v);
        v.sort_by_key(|n| match n {
            Node::Conv(c) => c.qid,
            Node::Linear(l) => l.qid,
            _ => unreachable!(),
        });
        v
    }

    /// Weight tensor of each quantized layer in `qid` order.
    pub fn quantized_weights(&self) -> Vec<&Tensor> {
        self.quantized_nodes()
            .into_iter()
            .map(|n| match n {
                Node::Conv(c) => &c.weight.value,
                Node::Linear(l) => &l.weight.value,
                _ => unreachable!(),
            })
            .collect()
    }

    pub fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(ParamMut<'a>)) {
        visit_nodes(&mut self.nodes, "", f);
    }

    /// Parameters plus batch-norm running statistics, in traversal order.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        fn walk(nodes: &[Node], prefix: &str, out: &mut Vec<(String, Tensor)>) {
            for (i, node) in nodes.iter().enumerate() {
                let p = format!("{prefix}{i}");
                match node {
                    Node::Conv(Conv { weight, bias, .. }) | Node::Linear(Linear { weight, bias, .. }) => {
                        out.push((format!("{p}.weight"), weight.value.clone()));
                        out.push((format!("{p}.bias"), bias.value.clone()));
                    }
                    Node::BatchNorm(bn) => {
                        let c = bn.channels();
                        out.push((format!("{p}.gamma"), bn.gamma.value.clone()));
                        out.push((format!("{p}.beta"), bn.beta.value.clone()));
                        let mean = Tensor::from_vec(&[c], bn.running_mean.clone()).expect("channels > 0");
                        let var = Tensor::from_vec(&[c], bn.running_var.clone()).expect("channels > 0");
                        out.push((format!("{p}.running_mean"), mean));
                        out.push((format!("{p}.running_var"), var));
                    }
                    Node::Residual(body) => walk(body, &format!("{p}."), out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.nodes, "", &mut out);
        out
    }

    /// Inverse of [`Model::state_tensors`]; names and shapes must match exactly.
    pub fn load_state_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let expected = self.state_tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", expected.len(), tensors.len())));
        }
        for ((en, et), (n, t)) in expected.iter().zip(tensors) {
            if en != n || et.dims() != t.dims() {
                return Err(Error::Format(format!("tensor {n} {:?} does not match {en} {:?}", t.dims(), et.dims())));
            }
        }
        fn take<'t>(it: &mut impl Iterator<Item = &'t Tensor>) -> Tensor {
            it.next().expect("length checked").clone()
        }
        fn walk<'t>(nodes: &mut [Node], it: &mut impl Iterator<Item = &'t Tensor>) {
            for node in nodes {
                match node {
                    Node::Conv(Conv { weight, bias, .. }) | Node::Linear(Linear { weight, bias, .. }) => {
                        weight.value = take(it);
                        bias.value = take(it);
                    }
                    Node::BatchNorm(bn) => {
                        bn.gamma.value = take(it);
                        bn.beta.value = take(it);
                        bn.running_mean = take(it).into_data();
                        bn.running_var = take(it).into_data();
                    }
                    Node::Residual(body) => walk(body, it),
                    _ => {}
                }
            }
        }
        walk(&mut self.nodes, &mut tensors.iter().map(|(_, t)| t));
        Ok(())
    }

    /// `(name, value)` for every parameter in traversal order.
    pub fn named_params(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params_mut(&mut |p| out.push((p.name, p.param.value.clone())));
        out
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params_mut(&mut |p| n += p.param.value.len());
        n
    }

    pub fn set_quantize(&mut self, on: bool) {
        fn walk(nodes: &mut [Node], on: bool) {
            for node in nodes {
                match node {
                    Node::Conv(c) => c.quantize = on,
                    Node::Linear(l) => l.quantize = on,
                    Node::Residual(b) => walk(b, on),
                    _ => {}
                }
            }
        }
        walk(&mut self.nodes, on);
    }

    /// Logits, loss and a cache for [`Model::backward`].
    pub fn forward(&mut self, x: &Tensor, labels: &[usize], fwd: Forward<'_>) -> Result<ForwardOutput> {
        let mut act_max_abs = vec![0.0f32; self.quant_layers()];
        let (logits, cache) = run_forward(&mut self.nodes, x.clone(), &fwd, &mut act_max_abs)?;
        if logits.dims() != [x.dims()[0], self.classes] {
            return Err(Error::DimensionMismatch(format!("model produced {:?} logits", logits.dims())));
        }
        let (loss, g_logits) = layers::softmax_cross_entropy(&logits, labels)?;
        Ok(ForwardOutput { logits, loss, act_max_abs, cache, g_logits })
    }

    /// Writes every parameter gradient and returns one record per quantized layer.
    pub fn backward(&mut self, out: ForwardOutput, bwd: &mut Backward<'_>) -> Result<BackwardOutput> {
        let mut reports = Vec::new();
        let mut clip_time = Duration::ZERO;
        run_backward(&mut self.nodes, out.cache, out.g_logits, bwd, &mut reports, &mut clip_time)?;
        reports.sort_by_key(|r: &LayerGrad| r.layer);
        Ok(BackwardOutput { layers: reports, clip_time })
    }
}

fn run_forward(nodes: &mut [Node], mut x: Tensor, fwd: &Forward<'_>, act: &mut [f32]) -> Result<(Tensor, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(nodes.len());
    for node in nodes.iter_mut() {
        let (y, cache) = match node {
            Node::Conv(conv) => {
                let geom = conv.geometry(&x)?;
                act[conv.qid] = x.max_abs();
                let (mut z, q) = if fwd.mode == Mode::Int8 && conv.quantize {
                    let st = &fwd.states[conv.qid];
                    let a = quantize(&x, quant_params(st.act_clip)?, RoundingMode::Nearest, None)?;
                    let w = quantize(&conv.weight.value, quant_params(st.weight_clip)?, RoundingMode::Nearest, None)?;
                    (conv2d_q(&a, &w, &geom)?, Some(QuantCache { a, w }))
                } else {
                    (conv2d_f32(&x, &conv.weight.value, &geom)?, None)
                };
                layers::add_bias(&mut z, conv.bias.value.data())?;
                (z, Cache::Conv { input: x, geom, q })
            }
            Node::Linear(lin) => {
                act[lin.qid] = x.max_abs();
                let (mut z, q) = if fwd.mode == Mode::Int8 && lin.quantize {
                    let st = &fwd.states[lin.qid];
                    let a = quantize(&x, quant_params(st.act_clip)?, RoundingMode::Nearest, None)?;
                    let w = quantize(&lin.weight.value, quant_params(st.weight_clip)?, RoundingMode::Nearest, None)?;
                    (linear_q(&a, &w)?, Some(QuantCache { a, w }))
                } else {
                    (linear_f32(&x, &lin.weight.value)?, None)
                };
                layers::add_bias(&mut z, lin.bias.value.data())?;
                (z, Cache::Linear { input: x, q })
            }
            Node::BatchNorm(bn) => {
                let (y, c) = bn.forward(&x, fwd.train)?;
                (y, c.map_or(Cache::Empty, Cache::BatchNorm))
            }
            Node::Relu => {
                let y = layers::relu(&x);
                (y.clone(), Cache::Relu(y))
            }
            Node::MaxPool { kernel, stride } => {
                let (y, arg) = layers::max_pool(&x, *kernel, *stride)?;
                (y, Cache::MaxPool { arg, dims: x.dims().to_vec() })
            }
            Node::AvgPool { kernel, stride } => {
                (layers::avg_pool(&x, *kernel, *stride)?, Cache::AvgPool { dims: x.dims().to_vec() })
            }
            Node::GlobalAvgPool => (layers::global_avg_pool(&x)?, Cache::GlobalAvgPool { dims: x.dims().to_vec() }),
            Node::Flatten => {
                let dims = x.dims().to_vec();
                let rest = dims[1..].iter().product();
                (x.reshape(&[dims[0], rest])?, Cache::Flatten { dims })
            }
            Node::Residual(body) => {
                let (b, inner) = run_forward(body, x.clone(), fwd, act)?;
                if b.dims() != x.dims() {
                    return Err(Error::DimensionMismatch(format!(
                        "residual body maps {:?} to {:?}",
                        x.dims(),
                        b.dims()
                    )));
                }
                let mut y = b;
                y.data_mut().iter_mut().zip(x.data()).for_each(|(v, s)| *v += s);
                (y, Cache::Residual(inner))
            }
        };
        x = y;
        caches.push(if fwd.train { cache } else { Cache::Empty });
    }
    Ok((x, caches))
}

fn set_grad(p: &mut Param, data: Vec<f32>) -> Result<()> {
    p.grad = Tensor::from_vec(p.value.dims(), data)?;
    Ok(())
}

fn run_backward(
    nodes: &mut [Node],
    caches: Vec<Cache>,
    mut g: Tensor,
    bwd: &mut Backward<'_>,
    reports: &mut Vec<LayerGrad>,
    clip_time: &mut Duration,
) -> Result<Tensor> {
    if caches.len() != nodes.len() {
        return Err(Error::Config("cache does not match the model".into()));
    }
    for (idx, (node, cache)) in nodes.iter_mut().zip(caches).enumerate().rev() {
        g = match (node, cache) {
            (Node::Conv(conv), Cache::Conv { input, geom, q }) => {
                if let Some(index) = g.first_nonfinite() {
                    return Err(Error::NonFinite { index });
                }
                let (gw, ga, gb, rep) = match q {
                    Some(q) => {
                        let (gq, deq, dc, clip, eps) = grad_layer(&g, conv.qid, bwd, clip_time)?;
                        let (gw, ga) = conv2d_backward_q(&gq, &q.a, &q.w, &geom)?;
                        (gw, ga, layers::channel_sum(&deq)?, (dc, clip, eps))
                    }
                    None => {
                        let (gw, ga) = conv2d_backward_f32(&g, &input, &conv.weight.value, &geom)?;
                        (gw, ga, layers::channel_sum(&g)?, (0.0, 0.0, 0.0))
                    }
                };
                reports.push(LayerGrad {
                    layer: conv.qid,
                    dc: rep.0,
                    clip: rep.1,
                    eps_norm: rep.2,
                    ghat_sqnorm: gw.l2_norm().powi(2),
                    gz: bwd.capture.then(|| g.clone()),
                });
                set_grad(&mut conv.weight, gw.into_data())?;
                set_grad(&mut conv.bias, gb)?;
                ga
            }
            (Node::Linear(lin), Cache::Linear { input, q }) => {
                if let Some(index) = g.first_nonfinite() {
                    return Err(Error::NonFinite { index });
                }
                let (gw, ga, gb, rep) = match q {
                    Some(q) => {
                        let (gq, deq, dc, clip, eps) = grad_layer(&g, lin.qid, bwd, clip_time)?;
                        let (gw, ga) = linear_backward_q(&gq, &q.a, &q.w)?;
                        (gw, ga, layers::channel_sum(&deq)?, (dc, clip, eps))
                    }
                    None => {
                        let (gw, ga) = linear_backward_f32(&g, &input, &lin.weight.value)?;
                        (gw, ga, layers::channel_sum(&g)?, (0.0, 0.0, 0.0))
                    }
                };
                reports.push(LayerGrad {
                    layer: lin.qid,
                    dc: rep.0,
                    clip: rep.1,
                    eps_norm: rep.2,
                    ghat_sqnorm: gw.l2_norm().powi(2),
                    gz: bwd.capture.then(|| g.clone()),
                });
                set_grad(&mut lin.weight, gw.into_data())?;
                set_grad(&mut lin.bias, gb)?;
                ga.reshape(input.dims())?
            }
            (Node::BatchNorm(bn), Cache::BatchNorm(c)) => bn.backward(&g, &c)?,
            (Node::Relu, Cache::Relu(y)) => layers::relu_backward(&g, &y),
            (Node::MaxPool { .. }, Cache::MaxPool { arg, dims }) => layers::max_pool_backward(&g, &arg, &dims)?,
            (Node::AvgPool { kernel, stride }, Cache::AvgPool { dims }) => {
                layers::avg_pool_backward(&g, *kernel, *stride, &dims)?
            }
            (Node::GlobalAvgPool, Cache::GlobalAvgPool { dims }) => layers::global_avg_pool_backward(&g, &dims)?,
            (Node::Flatten, Cache::Flatten { dims }) => g.reshape(&dims)?,
            (Node::Residual(body), Cache::Residual(inner)) => {
                let gb = run_backward(body, inner, g.clone(), bwd, reports, clip_time)?;
                let mut gx = g;
                gx.data_mut().iter_mut().zip(gb.data()).for_each(|(v, b)| *v += b);
                gx
            }
            _ => return Err(Error::Config(format!("node {idx} has no training cache"))),
        };
    }
    Ok(g)
}
