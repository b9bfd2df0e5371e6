use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        in_dim: usize,
        out_dim: usize,
    },
    Activation(Var, Activation),
    Mul {
        a: Var,
        b: Var,
        /// Channels of `a` sharing one value of `b`; 1 when shapes are equal.
        broadcast: usize,
    },
    Add(Var, Var),
    Sum(Var),
    Reshape(Var),
    Gather {
        input: Var,
        channels: usize,
        offsets: Vec<usize>,
        taps: Vec<(usize, f64)>,
    },
    Reduce {
        input: Var,
        local_grad: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "fully_connected",
            Op::Activation(_, Activation::Relu) => "relu",
            Op::Activation(_, Activation::Sigmoid) => "sigmoid",
            Op::Mul { .. } => "elementwise_mul",
            Op::Add(..) => "add",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Reduce { .. } => "reduce",
            Op::WeightedSum(_) => "weighted_sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::Linear {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::Activation(x, _) | Op::Sum(x) | Op::Reshape(x) => vec![*x],
            Op::Mul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) => vec![*a, *b],
            Op::Gather { input, .. } | Op::Reduce { input, .. } => vec![*input],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// One entry of the computation record, in recording order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    pub output: Var,
    pub kind: &'static str,
    pub inputs: Vec<Var>,
}

/// Single-threaded recording of a forward computation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order of the computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf, keeping the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), true, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies a recorded value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::contract(
                "scalar",
                format!("value of shape {:?} is not a scalar", n.shape),
            ));
        }
        Ok(n.value[0])
    }

    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| OpRecord {
                output: Var(i),
                kind: n.op.kind(),
                inputs: n.op.inputs(),
            })
            .collect()
    }

    /// Zero-padded cross-correlation over `[H, W, Cin]` or `[N, H, W, Cin]`
    /// with weights `[k, k, Cin, Cout]` and bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let (batch, in_h, in_w, in_c) = match ishape.as_slice() {
            &[h, w, c] => (1, h, w, c),
            &[n, h, w, c] => (n, h, w, c),
            _ => {
                return Err(Error::contract(
                    "conv2d",
                    format!("input must be HxWxC or NxHxWxC, got {ishape:?}"),
                ))
            }
        };
        let &[kh, kw, w_in, out_c] = wshape.as_slice() else {
            return Err(Error::contract(
                "conv2d",
                format!("weights must be k x k x Cin x Cout, got {wshape:?}"),
            ));
        };
        if kh != kw || kh % 2 == 0 {
            return Err(Error::contract(
                "conv2d",
                format!("kernel must be square and odd, got {kh}x{kw}"),
            ));
        }
        if w_in != in_c {
            return Err(Error::contract(
                "conv2d",
                format!("input depth {in_c} does not match weight Cin {w_in}"),
            ));
        }
        if self.shape(bias) != [out_c] {
            return Err(Error::contract(
                "conv2d",
                format!("bias shape {:?} != [{out_c}]", self.shape(bias)),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        let span_h = in_h + 2 * padding;
        let span_w = in_w + 2 * padding;
        if span_h < kh || span_w < kh {
            return Err(Error::contract(
                "conv2d",
                format!("kernel {kh} larger than padded input {span_h}x{span_w}"),
            ));
        }
        let geom = ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kh) / stride + 1,
            out_c,
            kernel: kh,
            stride,
            padding,
        };

        let cols = im2col(self.value(input), &geom);
        let mut out = vec![0.0; geom.rows() * out_c];
        let bvals = self.value(bias);
        for row in out.chunks_exact_mut(out_c) {
            row.copy_from_slice(bvals);
        }
        gemm(
            geom.rows(),
            geom.patch(),
            out_c,
            &cols,
            false,
            self.value(weight),
            false,
            &mut out,
            1.0,
        );

        let shape = if ishape.len() == 3 {
            vec![geom.out_h, geom.out_w, out_c]
        } else {
            vec![batch, geom.out_h, geom.out_w, out_c]
        };
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        // Columns are only needed to form the weight gradient.
        let cols = if self.requires_grad(weight) { cols } else { Vec::new() };
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Affine map of `[D]` or `[N, D]` through weights `[D, M]` and bias `[M]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let (rows, in_dim) = match ishape.as_slice() {
            &[d] => (1, d),
            &[n, d] => (n, d),
            _ => {
                return Err(Error::contract(
                    "fully_connected",
                    format!("input must be [D] or [N, D], got {ishape:?}"),
                ))
            }
        };
        let &[w_in, out_dim] = wshape.as_slice() else {
            return Err(Error::contract(
                "fully_connected",
                format!("weights must be [D, M], got {wshape:?}"),
            ));
        };
        if w_in != in_dim {
            return Err(Error::contract(
                "fully_connected",
                format!("input length {in_dim} does not match weight rows {w_in}"),
            ));
        }
        if self.shape(bias) != [out_dim] {
            return Err(Error::contract(
                "fully_connected",
                format!("bias shape {:?} != [{out_dim}]", self.shape(bias)),
            ));
        }
        let mut out = vec![0.0; rows * out_dim];
        let bvals = self.value(bias);
        for row in out.chunks_exact_mut(out_dim) {
            row.copy_from_slice(bvals);
        }
        gemm(
            rows,
            in_dim,
            out_dim,
            self.value(input),
            false,
            self.value(weight),
            false,
            &mut out,
            1.0,
        );
        let shape = if ishape.len() == 1 {
            vec![out_dim]
        } else {
            vec![rows, out_dim]
        };
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                in_dim,
                out_dim,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let out: Vec<f64> = match kind {
            Activation::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        };
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, out, rg, Op::Activation(input, kind))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// `a ⊙ b` for equal shapes, or with `b` broadcast along the last axis
    /// when `b` has the same leading dims as `a` and a trailing dim of 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let broadcast = if sa == sb {
            1
        } else if sa.len() == sb.len()
            && sb.last() == Some(&1)
            && sa[..sa.len() - 1] == sb[..sb.len() - 1]
        {
            *sa.last().expect("rank >= 1")
        } else {
            return Err(Error::contract(
                "elementwise_mul",
                format!("incompatible shapes {sa:?} and {sb:?}"),
            ));
        };
        let av = self.value(a);
        let bv = self.value(b);
        let out: Vec<f64> = av
            .chunks_exact(broadcast)
            .zip(bv)
            .flat_map(|(chunk, &m)| chunk.iter().map(move |&x| x * m))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(sa, out, rg, Op::Mul { a, b, broadcast }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(
                "add",
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).iter().sum();
        let rg = self.requires_grad(input);
        self.push(vec![1], vec![s], rg, Op::Sum(input))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(input)),
            ));
        }
        let value = self.value(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(shape, value, rg, Op::Reshape(input)))
    }

    /// Sparse linear resampling over channels-last data.
    ///
    /// `input` is viewed as `[P, channels]` spatial positions. Output position
    /// `o` is `Σ w · input[p]` over the taps `(p, w)` in
    /// `taps[offsets[o]..offsets[o + 1]]`, applied to every channel.
    pub fn gather(
        &mut self,
        input: Var,
        channels: usize,
        offsets: Vec<usize>,
        taps: Vec<(usize, f64)>,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let in_len = self.value(input).len();
        if channels == 0 || in_len % channels != 0 {
            return Err(Error::contract(
                "gather",
                format!("input of {in_len} values is not divisible into {channels} channels"),
            ));
        }
        let positions = in_len / channels;
        let outputs = offsets.len().saturating_sub(1);
        if shape.iter().product::<usize>() != outputs * channels
            || offsets.last().copied() != Some(taps.len())
        {
            return Err(Error::contract(
                "gather",
                format!("output shape {shape:?} inconsistent with {outputs} positions"),
            ));
        }
        if let Some(&(p, _)) = taps.iter().find(|(p, _)| *p >= positions) {
            return Err(Error::contract(
                "gather",
                format!("tap position {p} outside input of {positions} positions"),
            ));
        }
        let x = self.value(input);
        let mut out = vec![0.0; outputs * channels];
        for o in 0..outputs {
            let dst = &mut out[o * channels..(o + 1) * channels];
            for &(p, w) in &taps[offsets[o]..offsets[o + 1]] {
                let src = &x[p * channels..(p + 1) * channels];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Gather {
                input,
                channels,
                offsets,
                taps,
            },
        ))
    }

    /// Records a scalar computed outside the graph from `input`, together
    /// with its local gradient `d value / d input`.
    pub fn reduce(&mut self, input: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(input).len() {
            return Err(Error::contract(
                "reduce",
                format!(
                    "local gradient of {} values for input of {}",
                    local_grad.len(),
                    self.value(input).len()
                ),
            ));
        }
        let rg = self.requires_grad(input);
        Ok(self.push(vec![1], vec![value], rg, Op::Reduce { input, local_grad }))
    }

    /// `Σ c_i · s_i` over scalar inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        let mut rg = false;
        for &(v, c) in terms {
            total += c * self.scalar(v)?;
            rg |= self.requires_grad(v);
        }
        Ok(self.push(vec![1], vec![total], rg, Op::WeightedSum(terms.to_vec())))
    }

    /// Populates gradients of every `requires_grad` node recorded up to `loss`.
    /// Gradients accumulate across multiple uses of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss has shape {:?}, expected a scalar", self.node(loss).shape),
            ));
        }
        for node in &mut self.nodes[..=loss.0] {
            node.grad = node.requires_grad.then(|| vec![0.0; node.value.len()]);
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            if upstream.iter().all(|&g| g == 0.0) {
                self.nodes[idx].grad = Some(upstream);
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop_op(idx, &op, &upstream);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if let Some(mut g) = self.nodes[v.0].grad.take() {
            f(&mut g, &self.nodes);
            self.nodes[v.0].grad = Some(g);
        }
    }

    fn backprop_op(&mut self, idx: usize, op: &Op, up: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let geom = *geom;
                let out_c = geom.out_c;
                self.accumulate(*bias, |g, _| {
                    for row in up.chunks_exact(out_c) {
                        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
                if self.requires_grad(*weight) {
                    let mut gw = vec![0.0; geom.patch() * out_c];
                    gemm(geom.patch(), geom.rows(), out_c, cols, true, up, false, &mut gw, 0.0);
                    self.accumulate(*weight, |g, _| {
                        g.iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
                    });
                }
                if self.requires_grad(*input) {
                    let mut dcols = vec![0.0; geom.rows() * geom.patch()];
                    gemm(
                        geom.rows(),
                        out_c,
                        geom.patch(),
                        up,
                        false,
                        self.value(*weight),
                        true,
                        &mut dcols,
                        0.0,
                    );
                    self.accumulate(*input, |g, _| col2im_add(&dcols, &geom, g));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                in_dim,
                out_dim,
            } => {
                let (rows, in_dim, out_dim) = (*rows, *in_dim, *out_dim);
                self.accumulate(*bias, |g, _| {
                    for row in up.chunks_exact(out_dim) {
                        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
                let weight = *weight;
                let input = *input;
                self.accumulate(weight, |g, nodes| {
                    let x = &nodes[input.0].value;
                    gemm(in_dim, rows, out_dim, x, true, up, false, g, 1.0);
                });
                self.accumulate(input, |g, nodes| {
                    let w = &nodes[weight.0].value;
                    gemm(rows, out_dim, in_dim, up, false, w, true, g, 1.0);
                });
            }
            Op::Activation(input, kind) => {
                let out = &self.nodes[idx].value;
                let local: Vec<f64> = match kind {
                    Activation::Relu => out
                        .iter()
                        .zip(up)
                        .map(|(&y, &u)| if y > 0.0 { u } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => {
                        out.iter().zip(up).map(|(&y, &u)| u * y * (1.0 - y)).collect()
                    }
                };
                self.accumulate(*input, |g, _| {
                    g.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
                });
            }
            Op::Mul { a, b, broadcast } => {
                let (a, b, c) = (*a, *b, *broadcast);
                self.accumulate(a, |g, nodes| {
                    let bv = &nodes[b.0].value;
                    for ((gc, uc), &m) in g.chunks_exact_mut(c).zip(up.chunks_exact(c)).zip(bv) {
                        gc.iter_mut().zip(uc).for_each(|(x, u)| *x += u * m);
                    }
                });
                if a == b {
                    // x ⊙ x: the second factor's contribution.
                    self.accumulate(a, |g, nodes| {
                        g.iter_mut()
                            .zip(up.iter().zip(&nodes[a.0].value))
                            .for_each(|(x, (u, v))| *x += u * v);
                    });
                } else {
                    self.accumulate(b, |g, nodes| {
                        let av = &nodes[a.0].value;
                        for ((gb, uc), ac) in
                            g.iter_mut().zip(up.chunks_exact(c)).zip(av.chunks_exact(c))
                        {
                            *gb += uc.iter().zip(ac).map(|(u, x)| u * x).sum::<f64>();
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(v, |g, _| {
                        g.iter_mut().zip(up).for_each(|(x, u)| *x += u);
                    });
                }
            }
            Op::Sum(input) => {
                let u = up[0];
                self.accumulate(*input, |g, _| g.iter_mut().for_each(|x| *x += u));
            }
            Op::Reshape(input) => {
                self.accumulate(*input, |g, _| {
                    g.iter_mut().zip(up).for_each(|(x, u)| *x += u);
                });
            }
            Op::Gather {
                input,
                channels,
                offsets,
                taps,
            } => {
                let c = *channels;
                self.accumulate(*input, |g, _| {
                    for o in 0..offsets.len() - 1 {
                        let src = &up[o * c..(o + 1) * c];
                        for &(p, w) in &taps[offsets[o]..offsets[o + 1]] {
                            g[p * c..(p + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += w * s);
                        }
                    }
                });
            }
            Op::Reduce { input, local_grad } => {
                let u = up[0];
                self.accumulate(*input, |g, _| {
                    g.iter_mut().zip(local_grad).for_each(|(x, l)| *x += u * l);
                });
            }
            Op::WeightedSum(terms) => {
                let u = up[0];
                for &(v, c) in terms {
                    self.accumulate(v, |g, _| g[0] += u * c);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    let pad = g.padding as isize;
    for n in 0..g.batch {
        let img = &input[n * g.in_h * g.in_w * g.in_c..(n + 1) * g.in_h * g.in_w * g.in_c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (n * g.out_h + oy) * g.out_w + ox;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.in_w + ix as usize) * g.in_c;
                        let off = (ky * g.kernel + kx) * g.in_c;
                        dst[off..off + g.in_c].copy_from_slice(&img[src..src + g.in_c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let patch = g.patch();
    let pad = g.padding as isize;
    for n in 0..g.batch {
        let img = &mut out[n * g.in_h * g.in_w * g.in_c..(n + 1) * g.in_h * g.in_w * g.in_c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (n * g.out_h + oy) * g.out_w + ox;
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.in_w + ix as usize) * g.in_c;
                        let off = (ky * g.kernel + kx) * g.in_c;
                        img[dst..dst + g.in_c]
                            .iter_mut()
                            .zip(&src[off..off + g.in_c])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }
}

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape `m × k` and `op(b)`
/// of shape `k × n`, all row-major. A transposed operand is stored as its
/// untransposed `k × m` (resp. `n × k`) matrix.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths are checked above and the strides address
    // exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn one_by_one_identity_kernel_copies_input() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::from_fn(&[3, 4, 2], |i| i as f64 * 0.5 - 1.0));
        let w = g.constant(&t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(&Tensor::zeros(&[2]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[3, 4, 2]);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::from_fn(&[5, 5, 3], |i| i as f64));
        let w = g.constant(&Tensor::zeros(&[3, 3, 3, 2]));
        let b = g.constant(&t(&[2], &[0.25, -1.5]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        for px in g.value(y).chunks(2) {
            assert_eq!(px, [0.25, -1.5]);
        }
    }

    #[test]
    fn padded_window_sums() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::full(&[3, 3, 1], 1.0));
        let w = g.constant(&Tensor::full(&[3, 3, 1, 1], 1.0));
        let b = g.constant(&Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn strided_output_size() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[9, 7, 1]));
        let w = g.constant(&Tensor::zeros(&[3, 3, 1, 4]));
        let b = g.constant(&Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[5, 4, 4]);
    }

    #[test]
    fn conv_depth_mismatch_is_contract_violation() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[4, 4, 3]));
        let w = g.constant(&Tensor::zeros(&[3, 3, 2, 1]));
        let b = g.constant(&Tensor::zeros(&[1]));
        assert!(matches!(
            g.conv2d(x, w, b, 1, 1),
            Err(Error::Contract { op: "conv2d", .. })
        ));
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[3], &[-2.0, 3.0, 0.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 3.0, 0.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s)[2], 0.5);
        let big = g.constant(&t(&[2], &[21.0, 40.0]));
        let s = g.sigmoid(big);
        assert!(g.value(s).iter().all(|&v| (1.0 - v).abs() < 1e-9));
    }

    #[test]
    fn fully_connected_cases() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2], &[3.0, 4.0]));
        let w = g.constant(&t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(&t(&[1], &[0.5]));
        let y = g.fully_connected(x, w, b).unwrap();
        assert_eq!(g.value(y), &[11.5]);

        let eye = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = g.constant(&Tensor::zeros(&[2]));
        let y = g.fully_connected(x, eye, zb).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0]);

        let zw = g.constant(&Tensor::zeros(&[2, 2]));
        let bb = g.constant(&t(&[2], &[-1.0, 7.0]));
        let y = g.fully_connected(x, zw, bb).unwrap();
        assert_eq!(g.value(y), &[-1.0, 7.0]);

        let bad = g.constant(&Tensor::zeros(&[3, 1]));
        assert!(g.fully_connected(x, bad, b).is_err());
    }

    #[test]
    fn broadcast_multiply() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::from_fn(&[2, 2, 3], |i| (i % 3) as f64 + 1.0));
        let b = g.constant(&Tensor::full(&[2, 2, 1], 0.5));
        let y = g.mul(a, b).unwrap();
        for px in g.value(y).chunks(3) {
            assert_eq!(px, [0.5, 1.0, 1.5]);
        }
        let ones = g.constant(&Tensor::full(&[2, 2, 1], 1.0));
        let y = g.mul(a, ones).unwrap();
        assert_eq!(g.value(y), g.value(a));
        let zeros = g.constant(&Tensor::zeros(&[2, 2, 3]));
        let y = g.mul(a, zeros).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        let wrong = g.constant(&Tensor::zeros(&[2, 3, 1]));
        assert!(g.mul(a, wrong).is_err());
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut g = Graph::new();
        let x = g.param(&t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(&t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[3]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn records_are_topological() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::full(&[3, 3, 2], 0.1));
        let w = g.param(&Tensor::full(&[3, 3, 2, 2], 0.2));
        let b = g.param(&Tensor::zeros(&[2]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let r = g.relu(y);
        let s = g.sum(r);
        g.backward(s).unwrap();
        for rec in g.records() {
            assert!(rec.inputs.iter().all(|i| *i < rec.output));
        }
        for v in [x, w, b, y, r, s] {
            assert!(g.grad(v).is_some());
        }
    }
}
