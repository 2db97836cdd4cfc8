use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeom};
use super::{NetError, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operator whose backward rule is supplied by the caller. Used by the loss
/// functions, which carry their targets as constants.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the upstream gradient of
    /// the output. `None` marks an input that receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Input,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        one_d: bool,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Planar(Var),
    Unplanar(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    Add(Var, Var),
    ScaleBy(Var, f64),
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Conv { one_d: true, .. } => "conv1d",
            Op::Conv { .. } => "conv2d",
            Op::Linear { .. } => "fully_connected",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Planar(_) => "planar",
            Op::Unplanar(_) => "unplanar",
            Op::Concat(_) => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::Add(..) => "add",
            Op::ScaleBy(..) => "scale",
            Op::Sum(_) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward evaluation so it can be differentiated once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    consumed: bool,
    fault: Option<String>,
}

fn dims(op: &str, expected: &str, got: &[usize]) -> NetError {
    NetError::Shape(format!("{op}: expected {expected}, got {got:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: perturbs the backward rule of the named operator so that
    /// gradient checks can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, op_name: &str) {
        self.fault = Some(op_name.to_string());
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant (or differentiable leaf) input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf bound to a named parameter. Repeated calls with the same name
    /// return the same node, so fan-out gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NetError> {
        if let Some(v) = self.param_index.get(name) {
            return Ok(*v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Param);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Same-padded 2-D cross-correlation of `x: C_in×H×W` with
    /// `w: C_out×C_in×k×k`; output spatial size is `ceil(H/stride)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, NetError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 {
            return Err(dims("conv2d", "input C_in×H×W", &xs));
        }
        if ws.len() != 4 || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(dims("conv2d", "weights C_out×C_in×k×k with odd k", &ws));
        }
        if ws[1] != xs[0] {
            return Err(NetError::Shape(format!(
                "conv2d: weight input-channel axis {} != input channel axis {}",
                ws[1], xs[0]
            )));
        }
        if bs != [ws[0]] {
            return Err(NetError::Shape(format!(
                "conv2d: bias axis {bs:?} != output channel axis {}",
                ws[0]
            )));
        }
        if stride == 0 {
            return Err(NetError::Shape("conv2d: stride must be positive".into()));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ws[0], ws[2], ws[3], stride);
        self.conv(x, w, b, geom, false, &[geom.c_out, geom.ho, geom.wo])
    }

    /// Same-padded 1-D cross-correlation of `x: C×L` with `w: C_out×C×k`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NetError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 {
            return Err(dims("conv1d", "input C×L", &xs));
        }
        if ws.len() != 3 || ws[2].is_multiple_of(2) {
            return Err(dims("conv1d", "weights C_out×C×k with odd k", &ws));
        }
        if ws[1] != xs[0] {
            return Err(NetError::Shape(format!(
                "conv1d: weight input-channel axis {} != input channel axis {}",
                ws[1], xs[0]
            )));
        }
        if bs != [ws[0]] {
            return Err(NetError::Shape(format!(
                "conv1d: bias axis {bs:?} != output channel axis {}",
                ws[0]
            )));
        }
        let geom = ConvGeom::new(xs[0], 1, xs[1], ws[0], 1, ws[2], 1);
        self.conv(x, w, b, geom, true, &[geom.c_out, geom.wo])
    }

    fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        one_d: bool,
        out_shape: &[usize],
    ) -> Result<Var, NetError> {
        let (out, cols) = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                one_d,
                cols,
            },
        ))
    }

    /// `w·x + b` for a vector `x` of length M and `w: P×M`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NetError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 1 {
            return Err(dims("fully_connected", "vector input", &xs));
        }
        if ws.len() != 2 || ws[1] != xs[0] {
            return Err(NetError::Shape(format!(
                "fully_connected: weights {ws:?} do not accept input length {}",
                xs[0]
            )));
        }
        if bs != [ws[0]] {
            return Err(NetError::Shape(format!(
                "fully_connected: bias {bs:?} != output length {}",
                ws[0]
            )));
        }
        let mut out = self.value(b).data().to_vec();
        kernels::gemm(
            ws[0],
            ws[1],
            1,
            self.value(w).data(),
            false,
            self.value(x).data(),
            false,
            1.0,
            &mut out,
        );
        let value = Tensor::new(&[ws[0]], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| kernels::sigmoid(a)).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        self.push(value, Op::Sigmoid(x))
    }

    /// `a: M×P` times `b: P×Q`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(NetError::Shape(format!(
                "matmul: {as_:?} and {bs:?} are not conformable"
            )));
        }
        let (m, p, q) = (as_[0], as_[1], bs[1]);
        let mut out = vec![0.0; m * q];
        kernels::gemm(
            m,
            p,
            q,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let value = Tensor::new(&[m, q], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NetError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(dims("transpose", "matrix", &s));
        }
        let data = kernels::transpose(self.value(a).data(), s[0], s[1]);
        let value = Tensor::new(&[s[1], s[0]], data)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NetError> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// `C×H×W` to `(H·W)×C`: spatial locations become rows.
    pub fn planar(&mut self, x: Var) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dims("planar", "C×H×W", &s));
        }
        let l = s[1] * s[2];
        let data = kernels::transpose(self.value(x).data(), s[0], l);
        let value = Tensor::new(&[l, s[0]], data)?;
        Ok(self.push(value, Op::Planar(x)))
    }

    /// Inverse of [`Tape::planar`]: `(H·W)×C` back to `C×H×W`.
    pub fn unplanar(&mut self, y: Var, height: usize, width: usize) -> Result<Var, NetError> {
        let s = self.shape(y).to_vec();
        if s.len() != 2 || s[0] != height * width {
            return Err(NetError::Shape(format!(
                "unplanar: {s:?} has no {height}×{width} location axis"
            )));
        }
        let data = kernels::transpose(self.value(y).data(), s[0], s[1]);
        let value = Tensor::new(&[s[1], height, width], data)?;
        Ok(self.push(value, Op::Unplanar(y)))
    }

    /// Stacks tensors along the leading (channel) axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, NetError> {
        let parts: Vec<&Tensor> = xs.iter().map(|v| self.value(*v)).collect();
        let value = Tensor::concat(&parts)?;
        Ok(self.push(value, Op::Concat(xs.to_vec())))
    }

    /// Channels `start..start + len` of a `C×...` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NetError> {
        let s = self.shape(x);
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(NetError::Shape(format!(
                "slice_channels: range {start}..{} outside {s:?}",
                start + len
            )));
        }
        let value = self.value(x).channel_slice(start, len);
        Ok(self.push(value, Op::Slice { x, start }))
    }

    /// Multiplies channel `c` of `x: C×...` by `s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var, NetError> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if xs.is_empty() || ss != [xs[0]] {
            return Err(NetError::Shape(format!(
                "scale_channels: scale {ss:?} does not match channel axis of {xs:?}"
            )));
        }
        let plane: usize = xs[1..].iter().product();
        let scale = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (c, chunk) in data.chunks_mut(plane.max(1)).enumerate() {
            for v in chunk {
                *v *= scale[c];
            }
        }
        let value = Tensor::new(&xs, data)?;
        Ok(self.push(value, Op::ScaleChannels { x, s }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        if self.shape(a) != self.shape(b) {
            return Err(NetError::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale(factor);
        self.push(value, Op::ScaleBy(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// `Σ x_i·weights_i` against a constant weight vector.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var, NetError> {
        if weights.len() != self.value(x).len() {
            return Err(NetError::Shape(format!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                self.value(x).len()
            )));
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, w)| a * w)
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { x, weights }))
    }

    /// Records a caller-defined operator whose forward value is already known.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Grads, NetError> {
        if self.consumed {
            return Err(NetError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(dims("backward", "scalar loss", self.shape(loss)));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut contributions = self.node_backward(node, &g);
            if self.fault.as_deref() == Some(node.op.name()) {
                for (_, t) in contributions.iter_mut() {
                    t.scale(1.5);
                }
            }
            for (var, t) in contributions {
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Grads {
            node_grads: grads,
            params: self.params.clone(),
            shapes: self.params.iter().map(|(_, v)| self.shape(*v).to_vec()).collect(),
        })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let like = |v: &Var, data: Vec<f64>| Tensor::new(val(v).shape(), data).expect("grad shape");
        match &node.op {
            Op::Input | Op::Param => Vec::new(),
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols,
                ..
            } => {
                let (dx, dw, db) =
                    kernels::conv_backward(g.data(), val(x).data(), cols, val(w).data(), geom);
                vec![(*x, like(x, dx)), (*w, like(w, dw)), (*b, like(b, db))]
            }
            Op::Linear { x, w, b } => {
                let (p, m) = (val(w).shape()[0], val(w).shape()[1]);
                let mut dx = vec![0.0; m];
                kernels::gemm(m, p, 1, val(w).data(), true, g.data(), false, 0.0, &mut dx);
                let mut dw = vec![0.0; p * m];
                kernels::gemm(p, 1, m, g.data(), false, val(x).data(), false, 0.0, &mut dw);
                vec![
                    (*x, like(x, dx)),
                    (*w, like(w, dw)),
                    (*b, like(b, g.data().to_vec())),
                ]
            }
            Op::Relu(x) => {
                let dx = val(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &d)| if a > 0.0 { d } else { 0.0 })
                    .collect();
                vec![(*x, like(x, dx))]
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &d)| d * s * (1.0 - s))
                    .collect();
                vec![(*x, like(x, dx))]
            }
            Op::MatMul(a, b) => {
                let (m, p) = (val(a).shape()[0], val(a).shape()[1]);
                let q = val(b).shape()[1];
                let mut da = vec![0.0; m * p];
                kernels::gemm(m, q, p, g.data(), false, val(b).data(), true, 0.0, &mut da);
                let mut db = vec![0.0; p * q];
                kernels::gemm(p, m, q, val(a).data(), true, g.data(), false, 0.0, &mut db);
                vec![(*a, like(a, da)), (*b, like(b, db))]
            }
            Op::Transpose(a) => {
                let s = val(a).shape();
                vec![(*a, like(a, kernels::transpose(g.data(), s[1], s[0])))]
            }
            Op::Reshape(a) => vec![(*a, like(a, g.data().to_vec()))],
            Op::Planar(x) => {
                let s = val(x).shape();
                let l = s[1] * s[2];
                vec![(*x, like(x, kernels::transpose(g.data(), l, s[0])))]
            }
            Op::Unplanar(y) => {
                let s = val(y).shape();
                vec![(*y, like(y, kernels::transpose(g.data(), s[1], s[0])))]
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                xs.iter()
                    .map(|x| {
                        let n = val(x).len();
                        let part = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        (*x, like(x, part))
                    })
                    .collect()
            }
            Op::Slice { x, start } => {
                let plane: usize = val(x).shape()[1..].iter().product();
                let mut dx = vec![0.0; val(x).len()];
                dx[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                vec![(*x, like(x, dx))]
            }
            Op::ScaleChannels { x, s } => {
                let plane: usize = val(x).shape()[1..].iter().product::<usize>().max(1);
                let scale = val(s).data();
                let mut dx = g.data().to_vec();
                let mut ds = vec![0.0; scale.len()];
                for (c, (dchunk, xchunk)) in dx
                    .chunks_mut(plane)
                    .zip(val(x).data().chunks(plane))
                    .enumerate()
                {
                    let mut acc = 0.0;
                    for (d, &xv) in dchunk.iter_mut().zip(xchunk) {
                        acc += *d * xv;
                        *d *= scale[c];
                    }
                    ds[c] = acc;
                }
                vec![(*x, like(x, dx)), (*s, like(s, ds))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::ScaleBy(a, f) => {
                let mut d = g.clone();
                d.scale(*f);
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(a).shape(), g.item()))],
            Op::WeightedSum { x, weights } => {
                let d = weights.iter().map(|w| w * g.item()).collect();
                vec![(*x, like(x, d))]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(val).collect();
                op.backward(&ins, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(d, v)| d.map(|d| (*v, d)))
                    .collect()
            }
        }
    }
}

/// Result of one reverse sweep.
pub struct Grads {
    node_grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient of the loss with respect to any recorded value; `None` when
    /// the value does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.node_grads[v.0].as_ref()
    }

    /// Gradient for a named parameter; zero-filled when the parameter was on
    /// the tape but disconnected from the loss.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params
            .iter()
            .zip(&self.shapes)
            .find(|((n, _), _)| n == name)
            .map(|((_, v), shape)| {
                self.wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(shape))
            })
    }

    /// Gradients of every parameter registered on the tape, keyed by name.
    pub fn into_param_grads(self) -> BTreeMap<String, Tensor> {
        let Grads {
            mut node_grads,
            params,
            shapes,
        } = self;
        params
            .into_iter()
            .zip(shapes)
            .map(|((name, v), shape)| {
                let g = node_grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&shape));
                (name, g)
            })
            .collect()
    }
}
