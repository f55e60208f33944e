//! Seeded model builders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Param};
use super::model::{Conv, Linear, Model, Node};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TinyCnn,
    TinyMobilenet,
    TinyResnet,
    ConvexLogistic,
}

impl ModelKind {
    pub fn is_convex(self) -> bool {
        self == ModelKind::ConvexLogistic
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TinyCnn => "tiny_cnn",
            ModelKind::TinyMobilenet => "tiny_mobilenet",
            ModelKind::TinyResnet => "tiny_resnet",
            ModelKind::ConvexLogistic => "convex_logistic",
        }
    }
}

pub fn build(kind: ModelKind, input: [usize; 3], classes: usize, width: usize, seed: u64) -> Result<Model> {
    match kind {
        ModelKind::TinyCnn => tiny_cnn(input, classes, width, seed),
        ModelKind::TinyMobilenet => tiny_mobilenet(input, classes, width, seed),
        ModelKind::TinyResnet => tiny_resnet(input, classes, width, seed),
        ModelKind::ConvexLogistic => convex_logistic(input, classes, seed),
    }
}

struct Builder {
    rng: ChaCha8Rng,
    next_qid: usize,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder { rng: ChaCha8Rng::seed_from_u64(seed), next_qid: 0 }
    }

    fn he(&mut self, dims: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt() as f32;
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let n = dims.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor::from_vec(dims, data).expect("nonzero dims")
    }

    fn qid(&mut self) -> usize {
        self.next_qid += 1;
        self.next_qid - 1
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Node {
        let cpg = cin / groups;
        let weight = Param::new(self.he(&[cout, cpg, k, k], cpg * k * k));
        Node::Conv(Conv {
            weight,
            bias: Param::new(Tensor::zeros(&[cout]).expect("cout > 0")),
            stride,
            padding: k / 2,
            groups,
            qid: self.qid(),
            quantize: true,
        })
    }

    /// Conv, batch norm and optionally ReLU.
    fn cbr(&mut self, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, relu: bool) -> Vec<Node> {
        let mut v = vec![self.conv(cin, cout, k, stride, groups), Node::BatchNorm(BatchNorm::new(cout))];
        if relu {
            v.push(Node::Relu);
        }
        v
    }

    fn linear(&mut self, fan_in: usize, out: usize) -> Node {
        Node::Linear(Linear {
            weight: Param::new(self.he(&[out, fan_in], fan_in)),
            bias: Param::new(Tensor::zeros(&[out]).expect("out > 0")),
            qid: self.qid(),
            quantize: true,
        })
    }
}

fn check(input: [usize; 3], classes: usize, width: usize) -> Result<()> {
    if input.contains(&0) || classes < 2 || width == 0 {
        return Err(Error::Config(format!("invalid model input {input:?}, classes {classes}, width {width}")));
    }
    Ok(())
}

/// Three conv blocks (the second strided), global pooling and a classifier.
pub fn tiny_cnn(input: [usize; 3], classes: usize, width: usize, seed: u64) -> Result<Model> {
    check(input, classes, width)?;
    let mut b = Builder::new(seed);
    let mut nodes = b.cbr(input[0], width, 3, 1, 1, true);
    nodes.extend(b.cbr(width, 2 * width, 3, 2, 1, true));
    nodes.extend(b.cbr(2 * width, 2 * width, 3, 1, 1, true));
    nodes.push(Node::GlobalAvgPool);
    nodes.push(b.linear(2 * width, classes));
    Ok(Model { name: ModelKind::TinyCnn.name().into(), input, classes, nodes })
}

/// Stem, three inverted-residual blocks (1x1 expand, depthwise 3x3, 1x1
/// project), a 1x1 head and a classifier.
pub fn tiny_mobilenet(input: [usize; 3], classes: usize, width: usize, seed: u64) -> Result<Model> {
    check(input, classes, width)?;
    const EXPAND: usize = 4;
    let mut b = Builder::new(seed);
    let mut nodes = b.cbr(input[0], width, 3, 1, 1, true);
    let mut cin = width;
    for (cout, stride) in [(width, 1), (2 * width, 2), (2 * width, 1)] {
        let hidden = cin * EXPAND;
        let mut block = b.cbr(cin, hidden, 1, 1, 1, true);
        block.extend(b.cbr(hidden, hidden, 3, stride, hidden, true));
        block.extend(b.cbr(hidden, cout, 1, 1, 1, false));
        if stride == 1 && cin == cout {
            nodes.push(Node::Residual(block));
        } else {
            nodes.extend(block);
        }
        cin = cout;
    }
    nodes.extend(b.cbr(cin, 4 * width, 1, 1, 1, true));
    nodes.push(Node::GlobalAvgPool);
    nodes.push(b.linear(4 * width, classes));
    Ok(Model { name: ModelKind::TinyMobilenet.name().into(), input, classes, nodes })
}

/// Stem, a basic block, a strided transition conv, a second basic block.
pub fn tiny_resnet(input: [usize; 3], classes: usize, width: usize, seed: u64) -> Result<Model> {
    check(input, classes, width)?;
    let mut b = Builder::new(seed);
    let mut nodes = b.cbr(input[0], width, 3, 1, 1, true);
    for (c, transition) in [(width, false), (2 * width, true)] {
        if transition {
            nodes.extend(b.cbr(c / 2, c, 3, 2, 1, true));
        }
        let mut body = b.cbr(c, c, 3, 1, 1, true);
        body.extend(b.cbr(c, c, 3, 1, 1, false));
        nodes.push(Node::Residual(body));
        nodes.push(Node::Relu);
    }
    nodes.push(Node::GlobalAvgPool);
    nodes.push(b.linear(2 * width, classes));
    Ok(Model { name: ModelKind::TinyResnet.name().into(), input, classes, nodes })
}

/// Multinomial logistic regression on the flattened input.
pub fn convex_logistic(input: [usize; 3], classes: usize, seed: u64) -> Result<Model> {
    check(input, classes, 1)?;
    let mut b = Builder::new(seed);
    let dim = input.iter().product();
    let nodes = vec![Node::Flatten, b.linear(dim, classes)];
    Ok(Model { name: ModelKind::ConvexLogistic.name().into(), input, classes, nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{Forward, Mode};

    #[test]
    fn builders_are_deterministic() {
        for kind in [ModelKind::TinyCnn, ModelKind::TinyMobilenet, ModelKind::TinyResnet, ModelKind::ConvexLogistic] {
            let a = build(kind, [3, 8, 8], 10, 4, 9).unwrap();
            assert_eq!(a, build(kind, [3, 8, 8], 10, 4, 9).unwrap());
            assert_ne!(a, build(kind, [3, 8, 8], 10, 4, 10).unwrap());
        }
    }

    #[test]
    fn shapes_flow_through_every_model() {
        for kind in [ModelKind::TinyCnn, ModelKind::TinyMobilenet, ModelKind::TinyResnet, ModelKind::ConvexLogistic] {
            let mut m = build(kind, [3, 8, 8], 5, 4, 1).unwrap();
            let x = Tensor::full(&[2, 3, 8, 8], 0.1).unwrap();
            let out = m.forward(&x, &[0, 4], Forward { mode: Mode::Fp32, train: true, states: &[] }).unwrap();
            assert_eq!(out.logits.dims(), &[2, 5]);
            assert!(out.loss.is_finite());
            assert_eq!(out.act_max_abs.len(), m.quant_layers());
        }
    }

    #[test]
    fn mobilenet_has_depthwise_layers() {
        let m = tiny_mobilenet([3, 8, 8], 10, 4, 0).unwrap();
        let dw = m
            .quantized_nodes()
            .iter()
            .filter(|n| matches!(n, Node::Conv(c) if c.is_depthwise()))
            .count();
        assert_eq!(dw, 3);
    }
}
