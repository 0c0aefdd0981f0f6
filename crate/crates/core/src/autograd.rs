//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! Every operation appends a node holding its output value; node order is a
//! topological order, so the backward pass walks the tape once in reverse.
//! Values on the tape are never mutated after they are recorded.

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Leaky slope for negative inputs.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 {
            return Err(shape_err!("conv2d input must be C×H×W, got {:?}", input));
        }
        if kernel.len() != 4 {
            return Err(shape_err!("conv2d kernel must be C_out×C_in×k×k, got {:?}", kernel));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kc, k, k2) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in {
            return Err(shape_err!(
                "conv2d kernel expects {} input channels but input has {}",
                kc,
                c_in
            ));
        }
        if k != k2 {
            return Err(shape_err!("conv2d kernel must be square, got {}×{}", k, k2));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!(
                "conv2d kernel {}×{} larger than padded input {}×{}",
                k,
                k,
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1×1, stride 1, unpadded: the input already is its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.rows() * p];
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &input[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.w_out + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut out[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    accumulate: bool,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass buffers sized for the given extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    LeakyRelu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    ChwToHwc { input: Var, c: usize, h: usize, w: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    /// Scalar-valued node whose local gradient was computed during forward.
    Scalar { inputs: Vec<Var>, grads: Vec<Vec<f64>> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} (element {bad})")));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Conv2d {
                input, kernel, bias, ..
            } => {
                self.needs(*input) || self.needs(*kernel) || bias.is_some_and(|b| self.needs(b))
            }
            Op::LeakyRelu(x) | Op::Sigmoid(x) | Op::Scale(x, _) | Op::Sum(x) => self.needs(*x),
            Op::ChwToHwc { input, .. } => self.needs(*input),
            Op::Add(a, b) | Op::Mul(a, b) => self.needs(*a) || self.needs(*b),
            Op::Concat(xs) | Op::Scalar { inputs: xs, .. } => xs.iter().any(|&x| self.needs(x)),
        };
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| invalid!("variable {} is not on this tape", v.0))
    }

    /// Records a tensor; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var> {
        let v = self.push("leaf", tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf)?;
        self.nodes[v.0].needs_grad = tensor.requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, tensor: &Tensor) -> Result<Var> {
        self.push("constant", tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape shapes are valid")
    }

    /// Smallest |pre-activation| over all leaky units on the tape.
    pub fn min_abs_leaky_input(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu(x) => self.nodes[x.0]
                    .value
                    .iter()
                    .map(|v| v.abs())
                    .min_by(f64::total_cmp),
                _ => None,
            })
            .min_by(f64::total_cmp)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.node(input)?.shape.as_slice(), &self.node(kernel)?.shape, stride, pad)?;
        if let Some(b) = bias {
            let bs = &self.node(b)?.shape;
            if bs.iter().product::<usize>() != geom.c_out {
                return Err(shape_err!(
                    "conv2d bias of shape {:?} for {} output channels",
                    bs,
                    geom.c_out
                ));
            }
        }
        let p = geom.positions();
        let mut out = vec![0.0; geom.c_out * p];
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(geom.im2col(&self.nodes[input.0].value))
        };
        {
            let colmat = cols.as_deref().unwrap_or(&self.nodes[input.0].value);
            let r = geom.rows();
            gemm(
                geom.c_out,
                r,
                p,
                &self.nodes[kernel.0].value,
                (r as isize, 1),
                colmat,
                (p as isize, 1),
                false,
                &mut out,
            );
        }
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].value;
            for (row, &bc) in out.chunks_mut(p).zip(bv) {
                row.iter_mut().for_each(|o| *o += bc);
            }
        }
        self.push(
            "conv2d",
            vec![geom.c_out, geom.h_out, geom.w_out],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        )
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let shape = n.shape.clone();
        let out = n.value.iter().map(|&v| leaky(v)).collect();
        self.push("leaky_relu", shape, out, Op::LeakyRelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let shape = n.shape.clone();
        let out = n.value.iter().map(|&v| sigmoid(v)).collect();
        self.push("sigmoid", shape, out, Op::Sigmoid(x))
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let tail = self.node(*first)?.shape[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &x in xs {
            let n = self.node(x)?;
            if n.shape[1..] != tail[..] {
                return Err(shape_err!(
                    "concat trailing shapes differ: {:?} vs {:?}",
                    &n.shape[1..],
                    tail
                ));
            }
            lead += n.shape[0];
            out.extend_from_slice(&n.value);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push("concat", shape, out, Op::Concat(xs.to_vec()))
    }

    /// Permutes C×H×W to H×W×C.
    pub fn chw_to_hwc(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let &[c, h, w] = n.shape.as_slice() else {
            return Err(shape_err!("chw_to_hwc needs a rank-3 tensor, got {:?}", n.shape));
        };
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for pos in 0..h * w {
                out[pos * c + ch] = n.value[ch * h * w + pos];
            }
        }
        self.push(
            "chw_to_hwc",
            vec![h, w, c],
            out,
            Op::ChwToHwc { input: x, c, h, w },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(shape_err!("add: {:?} vs {:?}", na.shape, nb.shape));
        }
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| x + y).collect();
        let shape = na.shape.clone();
        self.push("add", shape, out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(shape_err!("mul: {:?} vs {:?}", na.shape, nb.shape));
        }
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| x * y).collect();
        let shape = na.shape.clone();
        self.push("mul", shape, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let n = self.node(x)?;
        let shape = n.shape.clone();
        let out = n.value.iter().map(|v| v * factor).collect();
        self.push("scale", shape, out, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.node(x)?.value.iter().sum();
        self.push("sum", vec![1], vec![total], Op::Sum(x))
    }

    /// Records a scalar computed outside the tape, together with its
    /// gradient with respect to each input.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: f64, grads: Vec<Vec<f64>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(invalid!(
                "custom scalar has {} inputs but {} gradients",
                inputs.len(),
                grads.len()
            ));
        }
        for (&x, g) in inputs.iter().zip(&grads) {
            let n = self.node(x)?;
            if n.value.len() != g.len() {
                return Err(shape_err!(
                    "custom scalar gradient of length {} for input of shape {:?}",
                    g.len(),
                    n.shape
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("custom scalar gradient".into()));
            }
        }
        self.push(
            "custom_scalar",
            vec![1],
            vec![value],
            Op::Scalar {
                inputs: inputs.to_vec(),
                grads,
            },
        )
    }

    /// Propagates d(loss)/d(node) to every node that depends on a
    /// gradient-requiring leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                // Leaves keep their gradient for the caller.
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                    cols,
                } => {
                    let p = geom.positions();
                    let r = geom.rows();
                    if let Some(b) = bias.filter(|&b| self.needs(b)) {
                        let db: Vec<f64> = g.chunks(p).map(|row| row.iter().sum()).collect();
                        accumulate(&mut grads, b, db);
                    }
                    if self.needs(*kernel) {
                        let colmat = cols.as_deref().unwrap_or(&self.nodes[input.0].value);
                        let mut dk = vec![0.0; geom.c_out * r];
                        // dK = dOut · colsᵀ
                        gemm(
                            geom.c_out,
                            p,
                            r,
                            &g,
                            (p as isize, 1),
                            colmat,
                            (1, p as isize),
                            false,
                            &mut dk,
                        );
                        accumulate(&mut grads, *kernel, dk);
                    }
                    if self.needs(*input) {
                        let kv = &self.nodes[kernel.0].value;
                        let mut dcols = vec![0.0; r * p];
                        // dCols = Kᵀ · dOut
                        gemm(
                            r,
                            geom.c_out,
                            p,
                            kv,
                            (1, r as isize),
                            &g,
                            (p as isize, 1),
                            false,
                            &mut dcols,
                        );
                        let dx = if geom.is_pointwise() {
                            dcols
                        } else {
                            let mut dx = vec![0.0; geom.c_in * geom.h * geom.w];
                            geom.col2im(&dcols, &mut dx);
                            dx
                        };
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::LeakyRelu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| gi * leaky_grad(xi))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = g
                        .iter()
                        .zip(&node.value)
                        .map(|(&gi, &s)| gi * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let len = self.nodes[x.0].value.len();
                        if self.needs(x) {
                            accumulate(&mut grads, x, g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                }
                Op::ChwToHwc { input, c, h, w } => {
                    let mut dx = vec![0.0; c * h * w];
                    for ch in 0..*c {
                        for pos in 0..h * w {
                            dx[ch * h * w + pos] = g[pos * c + ch];
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.needs(*a) {
                        let da = g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(x, f) => {
                    let dx = g.iter().map(|gi| gi * f).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let len = self.nodes[x.0].value.len();
                    accumulate(&mut grads, *x, vec![g[0]; len]);
                }
                Op::Scalar { inputs, grads: local } => {
                    for (&x, lg) in inputs.iter().zip(local) {
                        if self.needs(x) {
                            accumulate(&mut grads, x, lg.iter().map(|v| v * g[0]).collect());
                        }
                    }
                }
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[idx] = None;
            }
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward".into()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

pub fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Derivative of [`leaky`]; the slope at exactly zero is the negative-side one.
pub fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
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

/// Untaped convolution of a C×H×W input with a C_out×C_in×k×k kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input)?;
    let k = tape.constant(kernel)?;
    let y = tape.conv2d(x, k, None, stride, pad)?;
    Ok(tape.tensor(y))
}

pub fn leaky_relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| leaky(v)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}
