//! Reverse-mode autodiff over an append-only node list.
//!
//! Every operation appends one node holding its output value and the handles
//! of its inputs, so inputs always precede the nodes that consume them and a
//! single reverse sweep visits each node once. Parameters enter the tape by
//! name through [`Tape::param`]; asking for the same name twice returns the
//! same handle, which is how shared weights accumulate their gradient.

use std::collections::{BTreeMap, HashMap};

use super::conv::{self, ConvAlgo};
use super::gemm::{gemm, MatRef};
use super::params::ParamStore;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Sigmoid(Var),
    GlobalAvgPool(Var),
    PixelShuffle {
        input: Var,
        r: usize,
    },
    PixelUnshuffle {
        input: Var,
        r: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ChannelMul {
        gate: Var,
        input: Var,
    },
    SubScalar {
        input: Var,
        scalar: Var,
    },
    Affine {
        input: Var,
        scale: f64,
    },
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MeanAll(Var),
    LogClamped {
        input: Var,
        floor: f64,
    },
    Charbonnier {
        a: Var,
        b: Var,
        eps: f64,
    },
    L1(Var, Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    names: HashMap<Var, String>,
    conv_algo: ConvAlgo,
}

fn check_finite(origin: &str, t: &Tensor) -> Result<()> {
    match t.nan_scan() {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite {
            origin: format!("{origin} (element {i} of {})", t.shape()),
        }),
    }
}

fn same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::dimension(format!(
            "{op} needs equal shapes, got {a} and {b}"
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_conv_algo(algo: ConvAlgo) -> Self {
        Tape {
            conv_algo: algo,
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, origin: &str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(origin, &value)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant input", value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push("variable input", value, Op::Leaf, true)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Leaf for the named parameter. Frozen parameters enter as constants.
    /// Repeated calls with the same name return the same handle.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let v = self.push(name, p.tensor.clone(), Op::Leaf, !p.frozen)?;
        self.params.insert(name.to_owned(), v);
        self.names.insert(v, name.to_owned());
        Ok(v)
    }

    /// Parameter leaf that is always a constant on this tape, whatever its
    /// store flag says.
    pub fn param_frozen(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let v = self.push(name, p.tensor.clone(), Op::Leaf, false)?;
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out_shape = conv::output_shape(
            self.shape(input),
            self.shape(weight),
            bias.map(|b| self.shape(b)),
            stride,
            padding,
        )?;
        let out = conv::forward(
            self.conv_algo,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        );
        debug_assert_eq!(out.shape(), out_shape);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        )
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        let out = self
            .value(input)
            .map(|x| if x >= 0.0 { x } else { slope * x });
        let rg = self.any_grad(&[input]);
        self.push("leaky_relu", out, Op::LeakyRelu { input, slope }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.leaky_relu(input, 0.0)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(sigmoid);
        let rg = self.any_grad(&[input]);
        self.push("sigmoid", out, Op::Sigmoid(input), rg)
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.h == 0 || s.w == 0 {
            return Err(Error::dimension(format!(
                "global_avg_pool needs nonzero spatial extent, got {s}"
            )));
        }
        let plane = s.plane();
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(Shape::new(s.n, s.c, 1, 1), data)?;
        let rg = self.any_grad(&[input]);
        self.push("global_avg_pool", out, Op::GlobalAvgPool(input), rg)
    }

    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(input), r)?;
        let rg = self.any_grad(&[input]);
        self.push("pixel_shuffle", out, Op::PixelShuffle { input, r }, rg)
    }

    pub fn pixel_unshuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let out = pixel_unshuffle(self.value(input), r)?;
        let rg = self.any_grad(&[input]);
        self.push("pixel_unshuffle", out, Op::PixelUnshuffle { input, r }, rg)
    }

    fn zip(&mut self, op: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    /// Multiplies every H×W plane of `input` by the matching `[N, C, 1, 1]`
    /// gate value.
    pub fn channel_mul(&mut self, gate: Var, input: Var) -> Result<Var> {
        let gs = self.shape(gate);
        let s = self.shape(input);
        if gs != Shape::new(s.n, s.c, 1, 1) {
            return Err(Error::dimension(format!(
                "channel_mul gate {gs} does not broadcast over {s}"
            )));
        }
        let plane = s.plane();
        let g = self.value(gate).data();
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .zip(g)
            .flat_map(|(chunk, &k)| chunk.iter().map(move |&x| k * x))
            .collect();
        let out = Tensor::new(s, data)?;
        let rg = self.any_grad(&[gate, input]);
        self.push("channel_mul", out, Op::ChannelMul { gate, input }, rg)
    }

    /// `input − scalar` with a one-element `scalar`.
    pub fn sub_scalar(&mut self, input: Var, scalar: Var) -> Result<Var> {
        let ss = self.shape(scalar);
        if ss.numel() != 1 {
            return Err(Error::dimension(format!(
                "sub_scalar needs a one-element subtrahend, got {ss}"
            )));
        }
        let s = self.value(scalar).data()[0];
        let out = self.value(input).map(|x| x - s);
        let rg = self.any_grad(&[input, scalar]);
        self.push("sub_scalar", out, Op::SubScalar { input, scalar }, rg)
    }

    /// `scale · input`.
    pub fn scale(&mut self, input: Var, scale: f64) -> Result<Var> {
        let out = self.value(input).map(|x| scale * x);
        let rg = self.any_grad(&[input]);
        self.push("scale", out, Op::Affine { input, scale }, rg)
    }

    /// `1 − input`, expressed as a scale plus a constant offset.
    pub fn one_minus(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|x| 1.0 - x);
        let rg = self.any_grad(&[input]);
        self.push("one_minus", out, Op::Affine { input, scale: -1.0 }, rg)
    }

    /// Dense layer over the flattened C×H×W features of each sample. The
    /// weight is `[out, in, 1, 1]`, the output `[N, out, 1, 1]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let s = self.shape(input);
        let ws = self.shape(weight);
        if ws.c * ws.h * ws.w != s.sample() {
            return Err(Error::dimension(format!(
                "fully_connected input {s} has {} features but weight {ws} expects {}",
                s.sample(),
                ws.c * ws.h * ws.w
            )));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(Error::dimension(format!(
                    "fully_connected bias {bs} does not match weight {ws}"
                )));
            }
        }
        let mut out = Tensor::zeros(Shape::new(s.n, ws.n, 1, 1));
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(ws.n) {
                row.copy_from_slice(&bd);
            }
        }
        gemm(
            MatRef::new(self.value(input).data(), s.n, s.sample()),
            MatRef::transpose_of(self.value(weight).data(), s.sample(), ws.n),
            out.data_mut(),
            if bias.is_some() { 1.0 } else { 0.0 },
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        self.push(
            "fully_connected",
            out,
            Op::FullyConnected {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    /// Mean of all elements as a one-element tensor.
    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.is_empty() {
            return Err(Error::dimension("mean_all of an empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.any_grad(&[input]);
        self.push("mean_all", out, Op::MeanAll(input), rg)
    }

    /// Natural log of `max(input, floor)`.
    pub fn log_clamped(&mut self, input: Var, floor: f64) -> Result<Var> {
        let out = self.value(input).map(|x| x.max(floor).ln());
        let rg = self.any_grad(&[input]);
        self.push("log_clamped", out, Op::LogClamped { input, floor }, rg)
    }

    /// Mean of `sqrt((a − b)² + eps²)`.
    pub fn charbonnier(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let e2 = eps * eps;
        let d = self.zip("charbonnier", a, b, |x, y| ((x - y) * (x - y) + e2).sqrt())?;
        let out = Tensor::scalar(d.sum() / d.len() as f64);
        let rg = self.any_grad(&[a, b]);
        self.push("charbonnier", out, Op::Charbonnier { a, b, eps }, rg)
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.zip("l1", a, b, |x, y| (x - y).abs())?;
        let out = Tensor::scalar(d.sum() / d.len() as f64);
        let rg = self.any_grad(&[a, b]);
        self.push("l1", out, Op::L1(a, b), rg)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.zip("mse", a, b, |x, y| (x - y) * (x - y))?;
        let out = Tensor::scalar(d.sum() / d.len() as f64);
        let rg = self.any_grad(&[a, b]);
        self.push("mse", out, Op::Mse(a, b), rg)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {ls}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(ls, 1.0));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (name, &v) in &self.params {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
            params.insert(name.clone(), g);
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let cg = conv::backward(
                    self.conv_algo,
                    self.value(input),
                    self.value(weight),
                    g,
                    stride,
                    padding,
                    wants(input),
                    wants(weight),
                    bias.is_some_and(wants),
                );
                if let Some(t) = cg.input {
                    accumulate(grads, input, t);
                }
                if let Some(t) = cg.weight {
                    accumulate(grads, weight, t);
                }
                if let (Some(b), Some(t)) = (bias, cg.bias) {
                    let bs = self.shape(b);
                    accumulate(grads, b, t.reshape(bs)?);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(input);
                let t = zip_map(x, g, |x, g| if x > 0.0 { g } else { slope * g });
                accumulate(grads, input, t);
            }
            Op::Sigmoid(input) => {
                let t = zip_map(&node.value, g, |y, g| g * y * (1.0 - y));
                accumulate(grads, input, t);
            }
            Op::GlobalAvgPool(input) => {
                let s = self.shape(input);
                let inv = 1.0 / s.plane() as f64;
                let data = gd
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, s.plane()))
                    .collect();
                accumulate(grads, input, Tensor::new(s, data)?);
            }
            Op::PixelShuffle { input, r } => {
                accumulate(grads, input, pixel_unshuffle(g, r)?);
            }
            Op::PixelUnshuffle { input, r } => {
                accumulate(grads, input, pixel_shuffle(g, r)?);
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(grads, a, zip_map(self.value(b), g, |y, g| y * g));
                }
                if wants(b) {
                    accumulate(grads, b, zip_map(self.value(a), g, |x, g| x * g));
                }
            }
            Op::ChannelMul { gate, input } => {
                let s = self.shape(input);
                let plane = s.plane();
                let k = self.value(gate).data();
                if wants(input) {
                    let data = gd
                        .chunks(plane)
                        .zip(k)
                        .flat_map(|(chunk, &k)| chunk.iter().map(move |&v| k * v))
                        .collect();
                    accumulate(grads, input, Tensor::new(s, data)?);
                }
                if wants(gate) {
                    let data = gd
                        .chunks(plane)
                        .zip(self.value(input).data().chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, gate, Tensor::new(self.shape(gate), data)?);
                }
            }
            Op::SubScalar { input, scalar } => {
                if wants(input) {
                    accumulate(grads, input, g.clone());
                }
                if wants(scalar) {
                    let t = Tensor::full(self.shape(scalar), -g.sum());
                    accumulate(grads, scalar, t);
                }
            }
            Op::Affine { input, scale } => {
                accumulate(grads, input, g.map(|v| scale * v));
            }
            Op::FullyConnected {
                input,
                weight,
                bias,
            } => {
                let s = self.shape(input);
                let ws = self.shape(weight);
                let (n, f, o) = (s.n, s.sample(), ws.n);
                if wants(input) {
                    let mut t = Tensor::zeros(s);
                    gemm(
                        MatRef::new(gd, n, o),
                        MatRef::new(self.value(weight).data(), o, f),
                        t.data_mut(),
                        0.0,
                    );
                    accumulate(grads, input, t);
                }
                if wants(weight) {
                    let mut t = Tensor::zeros(ws);
                    gemm(
                        MatRef::transpose_of(gd, o, n),
                        MatRef::new(self.value(input).data(), n, f),
                        t.data_mut(),
                        0.0,
                    );
                    accumulate(grads, weight, t);
                }
                if let Some(b) = bias.filter(|&b| wants(b)) {
                    let mut t = Tensor::zeros(self.shape(b));
                    for row in gd.chunks(o) {
                        for (acc, v) in t.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, b, t);
                }
            }
            Op::MeanAll(input) => {
                let s = self.shape(input);
                accumulate(grads, input, Tensor::full(s, gd[0] / s.numel() as f64));
            }
            Op::LogClamped { input, floor } => {
                let t = zip_map(self.value(input), g, |x, g| if x > floor { g / x } else { 0.0 });
                accumulate(grads, input, t);
            }
            Op::Charbonnier { a, b, eps } => {
                let e2 = eps * eps;
                let scale = gd[0] / self.value(a).len() as f64;
                let t = self.pair_grad(a, b, |d| scale * d / (d * d + e2).sqrt());
                self.split(grads, a, b, t);
            }
            Op::L1(a, b) => {
                let scale = gd[0] / self.value(a).len() as f64;
                let t = self.pair_grad(a, b, |d| {
                    if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    }
                });
                self.split(grads, a, b, t);
            }
            Op::Mse(a, b) => {
                let scale = 2.0 * gd[0] / self.value(a).len() as f64;
                let t = self.pair_grad(a, b, |d| scale * d);
                self.split(grads, a, b, t);
            }
        }
        Ok(())
    }

    /// Elementwise `f(a − b)`, the gradient with respect to `a`.
    fn pair_grad(&self, a: Var, b: Var, f: impl Fn(f64) -> f64) -> Tensor {
        zip_map(self.value(a), self.value(b), |x, y| f(x - y))
    }

    fn split(&self, grads: &mut [Option<Tensor>], a: Var, b: Var, ga: Tensor) {
        if self.nodes[b.0].requires_grad {
            accumulate(grads, b, ga.map(|v| -v));
        }
        if self.nodes[a.0].requires_grad {
            accumulate(grads, a, ga);
        }
    }

    /// Name of the parameter behind `v`, if it is a trainable parameter leaf.
    pub fn param_name(&self, v: Var) -> Option<&str> {
        self.names.get(&v).map(String::as_str)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map on equal shapes")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `[N, C·r², H, W] → [N, C, rH, rW]`.
pub fn pixel_shuffle(t: &Tensor, r: usize) -> Result<Tensor> {
    let s = t.shape();
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::dimension(format!(
            "pixel_shuffle factor {r} does not divide the channels of {s}"
        )));
    }
    let c = s.c / (r * r);
    let os = Shape::new(s.n, c, s.h * r, s.w * r);
    let src = t.data();
    let mut out = vec![0.0; s.numel()];
    for n in 0..s.n {
        for co in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    for h in 0..s.h {
                        for w in 0..s.w {
                            out[os.index(n, co, h * r + i, w * r + j)] = src[s.index(n, ci, h, w)];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(os, out)
}

/// Inverse of [`pixel_shuffle`]: `[N, C, rH, rW] → [N, C·r², H, W]`.
pub fn pixel_unshuffle(t: &Tensor, r: usize) -> Result<Tensor> {
    let s = t.shape();
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::dimension(format!(
            "pixel_unshuffle factor {r} does not divide the spatial extents of {s}"
        )));
    }
    let os = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let src = t.data();
    let mut out = vec![0.0; s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    let co = c * r * r + i * r + j;
                    for h in 0..os.h {
                        for w in 0..os.w {
                            out[os.index(n, co, h, w)] = src[s.index(n, c, h * r + i, w * r + j)];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(os, out)
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of any node that lies on a path to the loss.
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a trainable parameter by name.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Trainable parameters seen on the tape, in name order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

#[cfg(test)]
impl Tape {
    pub(crate) fn sum_for_test(&mut self, v: Var) -> Var {
        let n = self.value(v).len() as f64;
        let m = self.mean_all(v).unwrap();
        self.scale(m, n).unwrap()
    }
}
