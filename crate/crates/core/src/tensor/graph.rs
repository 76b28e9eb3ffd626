use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Contract(Var, Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    Resize {
        x: Var,
        h: usize,
        w: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b)
            | MatMulBt(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | Min(a, b)
            | Max(a, b)
            | AddRow(a, b)
            | Contract(a, b) => vec![*a, *b],
            Transpose(a)
            | Scale(a, _)
            | AddScalar(a)
            | Sigmoid(a)
            | Gelu(a)
            | Relu(a)
            | Abs(a)
            | Reshape(a)
            | MeanRows(a)
            | Sum(a) => vec![*a],
            Softmax { x, .. } | Slice { x, .. } | GatherRows { x, .. } | Resize { x, .. } => {
                vec![*x]
            }
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Conv2d { x, w, b, .. } | ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Concat { inputs, .. } => inputs.clone(),
            CrossEntropy { logits, .. } | BceLogits { logits, .. } => vec![*logits],
        }
    }

    fn kind(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul(..) => "matmul",
            MatMulBt(..) => "matmul_bt",
            Transpose(..) => "transpose",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Min(..) => "min",
            Max(..) => "max",
            AddRow(..) => "add_row",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Sigmoid(..) => "sigmoid",
            Gelu(..) => "gelu",
            Relu(..) => "relu",
            Abs(..) => "abs",
            Softmax { .. } => "softmax",
            LayerNorm { .. } => "layer_norm",
            Conv2d { .. } => "conv2d",
            ConvTranspose2d { .. } => "conv_transpose2d",
            Contract(..) => "contract",
            Reshape(..) => "reshape",
            Concat { .. } => "concat",
            Slice { .. } => "slice",
            GatherRows { .. } => "gather_rows",
            MeanRows(..) => "mean_rows",
            Sum(..) => "sum",
            Resize { .. } => "resize_bilinear",
            CrossEntropy { .. } => "cross_entropy",
            BceLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Tensor>,
}

/// Recording of a forward computation, replayed in reverse by [`Graph::backward`].
///
/// Nodes are only ever appended and every op refers to earlier nodes, so the
/// node list is a topological order and the graph is acyclic by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. Gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a model parameter, created once per graph and memoized by id.
    pub fn param(&mut self, id: usize, value: &Tensor, requires_grad: bool) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone(), requires_grad);
        self.params.insert(id, v);
        v
    }

    /// `(parameter id, leaf)` pairs bound in this graph, in id order.
    pub fn bound_params(&self) -> Vec<(usize, Var)> {
        let mut v: Vec<_> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        v.sort();
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Op name of a node, for diagnostics.
    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    /// Input nodes of a node.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::dim(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_bt", a)?;
        let (n, k2) = self.matrix_dims("matmul_bt", b)?;
        if k != k2 {
            return Err(TensorError::dim("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_bt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a)))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("min", a, b, f64::min, Op::Min(a, b))
    }

    /// Elementwise maximum; ties route gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("max", a, b, f64::max, Op::Max(a, b))
    }

    /// Adds a length-`c` vector to every row of `a[…×c]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = *self.shape(a).last().unwrap();
        if self.value(row).numel() != c {
            return Err(TensorError::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % c])
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    // ---------------------------------------------------------------- normalisation

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::dim("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    max = max.max(src[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, outer, n, inner }))
    }

    /// Per-row standardization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(TensorError::dim(
                "layer_norm",
                self.shape(x),
                self.shape(gain),
            ));
        }
        if eps <= 0.0 {
            return Err(TensorError::config("layer_norm", "eps must be positive"));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    // ---------------------------------------------------------------- convolution

    fn conv_geom(
        &self,
        op: &'static str,
        x: &[usize],
        w: &[usize],
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        let ([c_in, h, wd], [w0, w1, kh, kw]) = (x, w) else {
            return Err(TensorError::dim(op, x, w));
        };
        if stride == 0 {
            return Err(TensorError::config(op, "stride must be positive"));
        }
        if !transposed {
            if *w1 != *c_in {
                return Err(TensorError::dim(op, x, w));
            }
            let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
            if *kh > ph || *kw > pw {
                return Err(TensorError::config(
                    op,
                    format!("kernel {kh}x{kw} exceeds padded input {ph}x{pw}"),
                ));
            }
            if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
                return Err(TensorError::config(
                    op,
                    format!("non-integral output extent for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"),
                ));
            }
            Ok(ConvGeom {
                c_in: *c_in,
                h: *h,
                w: *wd,
                c_out: *w0,
                kh: *kh,
                kw: *kw,
                stride,
                pad,
                oh: (ph - kh) / stride + 1,
                ow: (pw - kw) / stride + 1,
            })
        } else {
            if *w0 != *c_in {
                return Err(TensorError::dim(op, x, w));
            }
            let oh = ((h - 1) * stride + kh) as isize - 2 * pad as isize;
            let ow = ((wd - 1) * stride + kw) as isize - 2 * pad as isize;
            if oh <= 0 || ow <= 0 {
                return Err(TensorError::config(op, "empty output extent"));
            }
            // Adjoint convolution: from the transposed output back to its input.
            Ok(ConvGeom {
                c_in: *w1,
                h: oh as usize,
                w: ow as usize,
                c_out: *c_in,
                kh: *kh,
                kw: *kw,
                stride,
                pad,
                oh: *h,
                ow: *wd,
            })
        }
    }

    fn check_conv_bias(&self, op: &'static str, b: Option<Var>, c_out: usize) -> Result<()> {
        if let Some(b) = b {
            if self.value(b).numel() != c_out {
                return Err(TensorError::dim(op, self.shape(b), &[c_out]));
            }
        }
        Ok(())
    }

    fn add_channel_bias(&self, out: &mut [f64], b: Option<Var>, plane: usize) {
        if let Some(b) = b {
            for (c, &bv) in self.value(b).data().iter().enumerate() {
                out[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }

    /// Cross-correlation of `x[c_in×h×w]` with `w[c_out×c_in×kh×kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = self.conv_geom("conv2d", self.shape(x), self.shape(w), stride, pad, false)?;
        self.check_conv_bias("conv2d", b, geom.c_out)?;
        let mut out = vec![0.0; geom.c_out * geom.oh * geom.ow];
        kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom, &mut out);
        self.add_channel_bias(&mut out, b, geom.oh * geom.ow);
        let t = Tensor::new(vec![geom.c_out, geom.oh, geom.ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution of `x[c_in×h×w]` with `w[c_in×c_out×kh×kw]`;
    /// output extent `(h−1)·stride − 2·pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = self.conv_geom(
            "conv_transpose2d",
            self.shape(x),
            self.shape(w),
            stride,
            pad,
            true,
        )?;
        self.check_conv_bias("conv_transpose2d", b, geom.c_in)?;
        let mut out = vec![0.0; geom.c_in * geom.h * geom.w];
        kernels::conv_transpose_forward(
            self.value(x).data(),
            self.value(w).data(),
            &geom,
            &mut out,
        );
        self.add_channel_bias(&mut out, b, geom.h * geom.w);
        let t = Tensor::new(vec![geom.c_in, geom.h, geom.w], out)?;
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }))
    }

    /// `out[q,h,w] = Σ_c emb[q,c] · fmap[c,h,w]`.
    pub fn contract(&mut self, emb: Var, fmap: Var) -> Result<Var> {
        let (q, c) = self.matrix_dims("contract", emb)?;
        let [c2, h, w] = *self.shape(fmap) else {
            return Err(TensorError::dim(
                "contract",
                self.shape(emb),
                self.shape(fmap),
            ));
        };
        if c != c2 {
            return Err(TensorError::dim(
                "contract",
                self.shape(emb),
                self.shape(fmap),
            ));
        }
        let mut out = vec![0.0; q * h * w];
        kernels::contract_forward(
            self.value(emb).data(),
            self.value(fmap).data(),
            q,
            c,
            h * w,
            &mut out,
        );
        Ok(self.push(Tensor::new(vec![q, h, w], out)?, Op::Contract(emb, fmap)))
    }

    /// Half-pixel bilinear resize of `x[c×h×w]` to `c×out_h×out_w`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [c, h, w] = *self.shape(x) else {
            return Err(TensorError::dim(
                "resize_bilinear",
                self.shape(x),
                &[0, 0, 0],
            ));
        };
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::config("resize_bilinear", "empty target"));
        }
        let ty = kernels::bilinear_taps(h, out_h);
        let tx = kernels::bilinear_taps(w, out_w);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let t = Tensor::new(vec![c, out_h, out_w], out)?;
        Ok(self.push(t, Op::Resize { x, h, w }))
    }

    // ---------------------------------------------------------------- shape plumbing

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(x)
            .reshape(shape)
            .map_err(|_| TensorError::dim("reshape", self.shape(x), shape))?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::usage("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::dim("concat", &base, &[axis]));
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(TensorError::dim("concat", &base, s));
            }
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &wd) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = base;
        shape[axis] = total / inner;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
        ))
    }

    /// `x` restricted to `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::dim("slice", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let t = Tensor::new(s, out)?;
        Ok(self.push(
            t,
            Op::Slice {
                x,
                outer,
                n,
                inner,
                start,
                len,
            },
        ))
    }

    /// Rows `idx` of a 2-d tensor, in the given order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("gather_rows", x)?;
        if idx.is_empty() {
            return Err(TensorError::usage("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::dim("gather_rows", self.shape(x), &[bad]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Column means of `x[r×c]` as a `1×c` row. Each column is summed in
    /// ascending value order, so the result is bitwise independent of row order.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("mean_rows", x)?;
        let src = self.value(x).data();
        let mut col = vec![0.0; r];
        let out = (0..c)
            .map(|j| {
                for (i, v) in col.iter_mut().enumerate() {
                    *v = src[i * c + j];
                }
                col.sort_by(f64::total_cmp);
                col.iter().sum::<f64>() / r as f64
            })
            .collect();
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ---------------------------------------------------------------- losses

    /// Weighted mean negative log-likelihood of `targets` under row-wise
    /// softmax of `logits[r×k]`. Rows with `None` target are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let (r, k) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(TensorError::dim(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let weights = match weights {
            Some(w) if w.len() != r => {
                return Err(TensorError::dim(
                    "cross_entropy",
                    self.shape(logits),
                    &[w.len()],
                ));
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; r],
        };
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(TensorError::dim(
                "cross_entropy",
                self.shape(logits),
                &[*bad],
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; r * k];
        let mut loss = 0.0;
        let mut total_weight = 0.0;
        for i in 0..r {
            let row = &src[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            if let Some(t) = targets[i] {
                loss += weights[i] * (lse - row[t]);
                total_weight += weights[i];
            }
        }
        let value = if total_weight > 0.0 {
            loss / total_weight
        } else {
            0.0
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
                total_weight,
            },
        ))
    }

    /// Mean binary cross-entropy of `targets` under `sigmoid(logits)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let src = self.value(logits).data();
        if targets.len() != src.len() {
            return Err(TensorError::dim(
                "bce_with_logits",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let n = src.len() as f64;
        let loss: f64 = src
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode sweep from a one-element `loss`. Leaf gradients are
    /// accumulated across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::usage(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&contribution),
            slot => *slot = Some(contribution),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor {
        Tensor::zeros(self.shape(v))
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[id].value;
        let gd = g.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if rg(*a) {
                    let mut da = self.zeros_like(*a);
                    kernels::mm_bt_acc(gd, self.value(*b).data(), da.data_mut(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let mut db = self.zeros_like(*b);
                    kernels::mm_at_acc(self.value(*a).data(), gd, db.data_mut(), m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if rg(*a) {
                    let mut da = self.zeros_like(*a);
                    kernels::mm_acc(gd, self.value(*b).data(), da.data_mut(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let mut db = self.zeros_like(*b);
                    kernels::mm_at_acc(gd, self.value(*a).data(), db.data_mut(), m, n, k);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = self.zeros_like(*a);
                for i in 0..r {
                    for j in 0..c {
                        da.data_mut()[i * c + j] = gd[j * r + i];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if rg(*a) {
                    self.accumulate(grads, *a, zip_map(g, vb, |g, y| g * y));
                }
                if rg(*b) {
                    self.accumulate(grads, *b, zip_map(g, va, |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if rg(*a) {
                    self.accumulate(grads, *a, zip_map(g, vb, |g, y| g / y));
                }
                if rg(*b) {
                    // d(a/b)/db = −(a/b)/b
                    let t = zip_map(out, vb, |q, y| -q / y);
                    self.accumulate(grads, *b, zip_map(g, &t, |g, t| g * t));
                }
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(self.nodes[id].op, Op::Min(..));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let pick_a: Vec<bool> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| if is_min { x <= y } else { x >= y })
                    .collect();
                if rg(*a) {
                    let d = Tensor::from_fn(g.shape(), |i| if pick_a[i] { gd[i] } else { 0.0 });
                    self.accumulate(grads, *a, d);
                }
                if rg(*b) {
                    let d = Tensor::from_fn(g.shape(), |i| if pick_a[i] { 0.0 } else { gd[i] });
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if rg(*row) {
                    let c = self.value(*row).numel();
                    let mut dr = self.zeros_like(*row);
                    for (i, &v) in gd.iter().enumerate() {
                        dr.data_mut()[i % c] += v;
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip_map(g, out, |g, y| g * y * (1.0 - y))),
            Op::Gelu(a) => {
                let d = zip_map(g, self.value(*a), |g, x| g * gelu_grad(x));
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = zip_map(g, self.value(*a), |g, x| if x >= 0.0 { g } else { -g });
                self.accumulate(grads, *a, d);
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = out.data();
                let mut dx = self.zeros_like(*x);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..*n).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..*n {
                            dx.data_mut()[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let rows = xhat.len() / d;
                if rg(*x) {
                    let mut dx = self.zeros_like(*x);
                    for r in 0..rows {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gd[r * d + j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[r * d + j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gd[r * d + j] * gv[j];
                            dx.data_mut()[r * d + j] =
                                rstd[r] * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if rg(*gain) {
                    let mut dg = self.zeros_like(*gain);
                    for (i, &v) in gd.iter().enumerate() {
                        dg.data_mut()[i % d] += v * xhat[i];
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if rg(*bias) {
                    let mut db = self.zeros_like(*bias);
                    for (i, &v) in gd.iter().enumerate() {
                        db.data_mut()[i % d] += v;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = rg(*x).then(|| self.zeros_like(*x));
                let mut dw = rg(*w).then(|| self.zeros_like(*w));
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    geom,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, channel_sums(gd, geom.c_out, geom.oh * geom.ow));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let mut dx = rg(*x).then(|| self.zeros_like(*x));
                let mut dw = rg(*w).then(|| self.zeros_like(*w));
                kernels::conv_transpose_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    geom,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, channel_sums(gd, geom.c_in, geom.h * geom.w));
                }
            }
            Op::Contract(emb, fmap) => {
                let (q, c) = (self.shape(*emb)[0], self.shape(*emb)[1]);
                let s = self.value(*fmap).numel() / c;
                if rg(*emb) {
                    // d emb = dY[q×s] · F[c×s]ᵀ
                    let mut de = self.zeros_like(*emb);
                    kernels::mm_bt_acc(gd, self.value(*fmap).data(), de.data_mut(), q, s, c);
                    self.accumulate(grads, *emb, de);
                }
                if rg(*fmap) {
                    // d F = Eᵀ[c×q] · dY[q×s]
                    let mut df = self.zeros_like(*fmap);
                    kernels::mm_at_acc(self.value(*emb).data(), gd, df.data_mut(), q, c, s);
                    self.accumulate(grads, *fmap, df);
                }
            }
            Op::Reshape(x) => {
                let d = Tensor::new(self.shape(*x).to_vec(), gd.to_vec()).expect("reshape grad");
                self.accumulate(grads, *x, d);
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &wd) in inputs.iter().zip(widths) {
                    if rg(v) {
                        let mut d = Vec::with_capacity(outer * wd);
                        for o in 0..*outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + wd]);
                        }
                        self.accumulate(
                            grads,
                            v,
                            Tensor::new(self.shape(v).to_vec(), d).expect("concat grad"),
                        );
                    }
                    offset += wd;
                }
            }
            Op::Slice {
                x,
                outer,
                n,
                inner,
                start,
                len,
            } => {
                let mut dx = self.zeros_like(*x);
                for o in 0..*outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x)[1];
                let mut dx = self.zeros_like(*x);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx.data_mut()[i * c + j] += gd[k * c + j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dx = Tensor::from_fn(&[r, c], |i| gd[i % c] / r as f64);
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => self.accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0])),
            Op::Resize { x, h, w } => {
                let [c, oh, ow] = *out.shape() else {
                    unreachable!()
                };
                let ty = kernels::bilinear_taps(*h, oh);
                let tx = kernels::bilinear_taps(*w, ow);
                let mut dx = self.zeros_like(*x);
                let d = dx.data_mut();
                for ch in 0..c {
                    let base = ch * h * w;
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = gd[(ch * oh + oy) * ow + ox];
                            d[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            d[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                            d[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                            d[base + y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                let k = self.shape(*logits)[1];
                let mut dl = self.zeros_like(*logits);
                if *total_weight > 0.0 {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let s = gd[0] * weights[i] / total_weight;
                        for j in 0..k {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            dl.data_mut()[i * k + j] = s * (probs[i * k + j] - onehot);
                        }
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::BceLogits { logits, targets } => {
                let n = targets.len() as f64;
                let d = Tensor::from_fn(self.shape(*logits), |i| {
                    gd[0] * (sigmoid(self.value(*logits).data()[i]) - targets[i]) / n
                });
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

fn channel_sums(g: &[f64], channels: usize, plane: usize) -> Tensor {
    Tensor::from_fn(&[channels], |c| g[c * plane..(c + 1) * plane].iter().sum())
}
