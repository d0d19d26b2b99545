use rand::Rng;

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Guard used by every cosine similarity so zero vectors are well defined.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AddChannelBias {
        x: Var,
        b: Var,
        plane: usize,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum {
        x: Var,
    },
    AvgPool2 {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        total: usize,
    },
    Stack {
        parts: Vec<Var>,
    },
    CosineRows {
        a: Var,
        b: Var,
        cols: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        cols: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run recording of a computation.
///
/// Leaves keep their gradients across [`Tape::backward`] calls, so calling
/// it twice accumulates until [`Tape::zero_grad`].
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    mode: Mode,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>, rg: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: rg,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves and accessors ------------------------------------------

    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        self.push("constant", shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn variable(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let v = self.constant(shape, data)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o = *o + x * y;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!("transpose expects a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = xv[i * cols + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push("transpose", vec![cols, rows], out, Op::Transpose { x, rows, cols }, rg)
    }

    /// Zero-padded 2-D cross-correlation of a `C_in×H×W` input with
    /// `C_out×C_in×k×k` kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sw,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {k} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![T::zero(); cout * oh * ow];
        for co in 0..cout {
            let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..cin {
                let xplane = &xv[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wt = wv[((co * cin + ci) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    *o = *o + wt * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        self.push("conv2d", vec![cout, oh, ow], out, Op::Conv2d { x, w, geom }, rg)
    }

    /// Adds `b[c]` to every pixel of channel `c` of a `C×H×W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.is_empty() || sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                left: sx,
                right: sb,
            });
        }
        let plane = numel(&sx[1..]);
        let bv = self.value(b).to_vec();
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i / plane])
            .collect();
        let rg = self.rg(&[x, b]);
        self.push("add_channel_bias", sx, out, Op::AddChannelBias { x, b, plane }, rg)
    }

    /// Adds a vector along the last axis (row bias of an affine map).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.is_empty() || sb.len() != 1 || sb[0] != sx[sx.len() - 1] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: sx,
                right: sb,
            });
        }
        let n = sb[0];
        let bv = self.value(b).to_vec();
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v + bv[i % n]).collect();
        let rg = self.rg(&[x, b]);
        self.push("add_bias", sx, out, Op::AddBias { x, b }, rg)
    }

    // ---- elementwise -----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push("add", s, out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push("sub", s, out, Op::Sub { a, b }, rg)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push("mul", s, out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.rg(&[x]);
        self.push("scale", shape, out, Op::Scale { x, s }, rg)
    }

    /// Multiplies every element of `x` by the one-element node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                left: self.shape(x).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let sv = self.scalar(s);
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().map(|&v| v * sv).collect();
        let rg = self.rg(&[x, s]);
        self.push("scale_by", shape, out, Op::ScaleBy { x, s }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(&[x]);
        self.push("relu", shape, out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self
            .value(x)
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let rg = self.rg(&[x]);
        self.push("sigmoid", shape, out, Op::Sigmoid { x }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let rg = self.rg(&[x]);
        self.push("softmax", shape, out, Op::Softmax { x, cols }, rg)
    }

    /// Inverted dropout: in training mode zeroes each element with
    /// probability `p` and scales survivors by `1/(1-p)`; identity in eval.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(&[x]);
        self.push("dropout", shape, out, Op::Dropout { x, mask }, rg)
    }

    // ---- reductions and reshapes -------------------------------------------

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "mean axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let inv = T::one() / T::lit(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(&[x]);
        self.push("mean_axis", oshape, out, Op::MeanAxis { x, outer, len, inner }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Vec::new(), vec![s], Op::Sum { x }, rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// 2×2 average pooling with stride 2 over a `C×H×W` tensor; odd trailing
    /// rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::InvalidArgument(format!(
                "avg_pool2 needs C×H×W with H,W >= 2, got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let q = T::lit(0.25);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ch * h * w;
                    let (y, xx) = (2 * oy, 2 * ox);
                    let v = xv[base + y * w + xx]
                        + xv[base + y * w + xx + 1]
                        + xv[base + (y + 1) * w + xx]
                        + xv[base + (y + 1) * w + xx + 1];
                    out[(ch * oh + oy) * ow + ox] = v * q;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "avg_pool2",
            vec![c, oh, ow],
            out,
            Op::AvgPool2 { x, c, h, w, oh, ow },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("reshape", shape.to_vec(), out, Op::Reshape { x }, rg)
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    left: self.shape(*first).to_vec(),
                    right: s.to_vec(),
                });
            }
            widths.push((p, s[s.len() - 1]));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        self.push("concat_last", shape, out, Op::Concat { parts: widths, total }, rg)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        let mut out = Vec::with_capacity(parts.len() * numel(&s0));
        for &p in parts {
            if self.shape(p) != &s0[..] {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: s0,
                    right: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&s0);
        let rg = self.rg(parts);
        self.push("stack", shape, out, Op::Stack { parts: parts.to_vec() }, rg)
    }

    // ---- losses ------------------------------------------------------------

    /// Row-wise cosine similarity of two `B×d` (or `d`) tensors, `ε`-guarded.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("cosine_rows", a, b)?;
        if s.is_empty() || s.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "cosine_rows expects d or B×d, got {s:?}"
            )));
        }
        let cols = s[s.len() - 1];
        let out: Vec<T> = self
            .value(a)
            .chunks(cols)
            .zip(self.value(b).chunks(cols))
            .map(|(u, v)| cosine_similarity(u, v))
            .collect();
        let shape = if s.len() == 2 { vec![s[0]] } else { Vec::new() };
        let rg = self.rg(&[a, b]);
        self.push("cosine_rows", shape, out, Op::CosineRows { a, b, cols }, rg)
    }

    /// Mean cross-entropy of `B×K` logits against integer labels, computed
    /// through a log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: s,
                right: vec![labels.len()],
            });
        }
        let cols = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: cols,
            });
        }
        let mut probs = Vec::with_capacity(s[0] * cols);
        let mut total = T::zero();
        for (row, &label) in self.value(logits).chunks(cols).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total = total + (lse - row[label]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::lit(labels.len() as f64);
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                cols,
            },
            rg,
        )
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates d(root)/d(node) to every gradient-requiring leaf and adds
    /// it into that leaf's accumulated gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.node(root).value.len() != 1 {
            return Err(Error::NonScalarRoot(self.node(root).shape.clone()));
        }
        let mut g: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        g.resize_with(root.0 + 1, || None);
        g[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                let n = &nodes[v.0];
                if !n.requires_grad {
                    return;
                }
                let buf = g[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]);
                f(buf);
            };
            match &node.op {
                Op::Leaf => match &mut self.leaf_grads[i] {
                    Some(buf) => buf.iter_mut().zip(&gi).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(gi),
                },
                &Op::MatMul { a, b, m, k, n } => {
                    let bv = &nodes[b.0].value;
                    acc(a, &mut |da| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = T::zero();
                                for j in 0..n {
                                    s = s + gi[i * n + j] * bv[p * n + j];
                                }
                                da[i * k + p] = da[i * k + p] + s;
                            }
                        }
                    });
                    let av = &nodes[a.0].value;
                    acc(b, &mut |db| {
                        for i in 0..m {
                            for p in 0..k {
                                let x = av[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] = db[p * n + j] + x * gi[i * n + j];
                                }
                            }
                        }
                    });
                }
                &Op::Transpose { x, rows, cols } => acc(x, &mut |dx| {
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[i * cols + j] = dx[i * cols + j] + gi[j * rows + i];
                        }
                    }
                }),
                &Op::Conv2d { x, w, geom } => {
                    let ConvGeom {
                        cin,
                        h,
                        w: wd,
                        cout,
                        k,
                        stride,
                        pad,
                        oh,
                        ow,
                    } = geom;
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let tap = |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<(usize, usize)> {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        (iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize)
                            .then_some((iy as usize, ix as usize))
                    };
                    acc(x, &mut |dx| {
                        for co in 0..cout {
                            for ci in 0..cin {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wt = wv[((co * cin + ci) * k + ky) * k + kx];
                                        for oy in 0..oh {
                                            for ox in 0..ow {
                                                if let Some((iy, ix)) = tap(oy, ox, ky, kx) {
                                                    let di = (ci * h + iy) * wd + ix;
                                                    dx[di] = dx[di] + wt * gi[(co * oh + oy) * ow + ox];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                    acc(w, &mut |dw| {
                        for co in 0..cout {
                            for ci in 0..cin {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let mut s = T::zero();
                                        for oy in 0..oh {
                                            for ox in 0..ow {
                                                if let Some((iy, ix)) = tap(oy, ox, ky, kx) {
                                                    s = s + gi[(co * oh + oy) * ow + ox] * xv[(ci * h + iy) * wd + ix];
                                                }
                                            }
                                        }
                                        let wi = ((co * cin + ci) * k + ky) * k + kx;
                                        dw[wi] = dw[wi] + s;
                                    }
                                }
                            }
                        }
                    });
                }
                &Op::AddChannelBias { x, b, plane } => {
                    acc(x, &mut |dx| add_into(dx, &gi));
                    acc(b, &mut |db| {
                        for (c, chunk) in gi.chunks(plane).enumerate() {
                            db[c] = db[c] + chunk.iter().copied().sum();
                        }
                    });
                }
                &Op::AddBias { x, b } => {
                    acc(x, &mut |dx| add_into(dx, &gi));
                    acc(b, &mut |db| {
                        let n = db.len();
                        for row in gi.chunks(n) {
                            add_into(db, row);
                        }
                    });
                }
                &Op::Add { a, b } => {
                    acc(a, &mut |da| add_into(da, &gi));
                    acc(b, &mut |db| add_into(db, &gi));
                }
                &Op::Sub { a, b } => {
                    acc(a, &mut |da| add_into(da, &gi));
                    acc(b, &mut |db| db.iter_mut().zip(&gi).for_each(|(d, &v)| *d = *d - v));
                }
                &Op::Mul { a, b } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(a, &mut |da| {
                        for ((d, &g), &y) in da.iter_mut().zip(&gi).zip(bv) {
                            *d = *d + g * y;
                        }
                    });
                    acc(b, &mut |db| {
                        for ((d, &g), &x) in db.iter_mut().zip(&gi).zip(av) {
                            *d = *d + g * x;
                        }
                    });
                }
                &Op::Scale { x, s } => acc(x, &mut |dx| {
                    dx.iter_mut().zip(&gi).for_each(|(d, &g)| *d = *d + g * s);
                }),
                &Op::ScaleBy { x, s } => {
                    let sv = nodes[s.0].value[0];
                    let xv = &nodes[x.0].value;
                    acc(x, &mut |dx| {
                        dx.iter_mut().zip(&gi).for_each(|(d, &g)| *d = *d + g * sv);
                    });
                    acc(s, &mut |ds| {
                        let t: T = gi.iter().zip(xv).map(|(&g, &v)| g * v).sum();
                        ds[0] = ds[0] + t;
                    });
                }
                &Op::Relu { x } => {
                    let xv = &nodes[x.0].value;
                    acc(x, &mut |dx| {
                        for ((d, &g), &v) in dx.iter_mut().zip(&gi).zip(xv) {
                            if v > T::zero() {
                                *d = *d + g;
                            }
                        }
                    });
                }
                &Op::Sigmoid { x } => {
                    let yv = &node.value;
                    acc(x, &mut |dx| {
                        for ((d, &g), &y) in dx.iter_mut().zip(&gi).zip(yv) {
                            *d = *d + g * y * (T::one() - y);
                        }
                    });
                }
                &Op::Softmax { x, cols } => {
                    let yv = &node.value;
                    acc(x, &mut |dx| {
                        for ((drow, grow), yrow) in dx.chunks_mut(cols).zip(gi.chunks(cols)).zip(yv.chunks(cols)) {
                            let dotp: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                            for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d = *d + y * (g - dotp);
                            }
                        }
                    });
                }
                Op::Dropout { x, mask } => acc(*x, &mut |dx| {
                    for ((d, &g), &m) in dx.iter_mut().zip(&gi).zip(mask) {
                        *d = *d + g * m;
                    }
                }),
                &Op::MeanAxis { x, outer, len, inner } => {
                    let inv = T::one() / T::lit(len as f64);
                    acc(x, &mut |dx| {
                        for o in 0..outer {
                            for l in 0..len {
                                for j in 0..inner {
                                    let di = (o * len + l) * inner + j;
                                    dx[di] = dx[di] + gi[o * inner + j] * inv;
                                }
                            }
                        }
                    });
                }
                &Op::Sum { x } => acc(x, &mut |dx| dx.iter_mut().for_each(|d| *d = *d + gi[0])),
                &Op::AvgPool2 { x, c, h, w, oh, ow } => {
                    let q = T::lit(0.25);
                    acc(x, &mut |dx| {
                        for ch in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = gi[(ch * oh + oy) * ow + ox] * q;
                                    for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let di = ch * h * w + (2 * oy + dy) * w + 2 * ox + ddx;
                                        dx[di] = dx[di] + gv;
                                    }
                                }
                            }
                        }
                    });
                }
                &Op::Reshape { x } => acc(x, &mut |dx| add_into(dx, &gi)),
                Op::Concat { parts, total } => {
                    let rows = gi.len() / total;
                    let mut offset = 0;
                    for &(p, w) in parts {
                        acc(p, &mut |dp| {
                            for r in 0..rows {
                                let src = &gi[r * total + offset..r * total + offset + w];
                                add_into(&mut dp[r * w..(r + 1) * w], src);
                            }
                        });
                        offset += w;
                    }
                }
                Op::Stack { parts } => {
                    let each = gi.len() / parts.len();
                    for (idx, &p) in parts.iter().enumerate() {
                        acc(p, &mut |dp| add_into(dp, &gi[idx * each..(idx + 1) * each]));
                    }
                }
                &Op::CosineRows { a, b, cols } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let eps = T::lit(COSINE_EPS);
                    let rows = av.len() / cols;
                    // d cos / d u = v/(nu nv) - cos * u / nu^2  (u term vanishes when |u| <= eps)
                    let row_grad = |u: &[T], v: &[T], c: T, g: T, out: &mut [T]| {
                        let (lu, lv) = (norm(u), norm(v));
                        let (nu, nv) = (lu.max(eps), lv.max(eps));
                        for j in 0..u.len() {
                            let mut d = v[j] / (nu * nv);
                            if lu > eps {
                                d = d - c * u[j] / (nu * nu);
                            }
                            out[j] = out[j] + g * d;
                        }
                    };
                    let cv = &node.value;
                    acc(a, &mut |da| {
                        for r in 0..rows {
                            let s = r * cols..(r + 1) * cols;
                            row_grad(&av[s.clone()], &bv[s.clone()], cv[r], gi[r], &mut da[s]);
                        }
                    });
                    acc(b, &mut |db| {
                        for r in 0..rows {
                            let s = r * cols..(r + 1) * cols;
                            row_grad(&bv[s.clone()], &av[s.clone()], cv[r], gi[r], &mut db[s]);
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                    cols,
                } => {
                    let scale = gi[0] / T::lit(labels.len() as f64);
                    acc(*logits, &mut |dl| {
                        for (r, &label) in labels.iter().enumerate() {
                            for j in 0..*cols {
                                let onehot = if j == label { T::one() } else { T::zero() };
                                let di = r * cols + j;
                                dl[di] = dl[di] + scale * (probs[di] - onehot);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn norm<T: Real>(u: &[T]) -> T {
    u.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `u·v / (max(‖u‖,ε)·max(‖v‖,ε))` with `ε = 1e-8`, accumulated in `f64`.
pub fn cosine_similarity<T: Real>(u: &[T], v: &[T]) -> T {
    let sq = |w: &[T]| {
        w.iter()
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
            .max(COSINE_EPS)
    };
    let dotp: f64 = u.iter().zip(v).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum();
    // rounding can push |c| a hair past 1
    T::lit((dotp / (sq(u) * sq(v))).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tape() -> Tape<f64> {
        Tape::new(Mode::Train)
    }

    #[test]
    fn matmul_identity_and_arithmetic() {
        let mut t = tape();
        let i2 = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = t.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[1, 1]);
        assert_eq!(t.value(c), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut t = tape();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(t.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv2d_constant_and_impulse() {
        let mut t = tape();
        let x = t.constant(&[1, 3, 3], vec![1.0; 9]).unwrap();
        let k = t.constant(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 3, 3]);
        assert!(t.value(y).iter().all(|&v| v == 2.0));

        // delta in the middle of a 5x5 plane reproduces the (flipped) kernel
        // under cross-correlation; check against the flip explicitly
        let mut delta = vec![0.0; 25];
        delta[12] = 1.0;
        let x = t.constant(&[1, 5, 5], delta).unwrap();
        let kern: Vec<f64> = (1..=9).map(f64::from).collect();
        let k = t.constant(&[1, 1, 3, 3], kern.clone()).unwrap();
        let y = t.conv2d(x, k, 1, 1).unwrap();
        let out = t.value(y);
        for dy in 0..3 {
            for dx in 0..3 {
                let oy = 1 + dy;
                let ox = 1 + dx;
                assert_eq!(out[oy * 5 + ox], kern[(2 - dy) * 3 + (2 - dx)]);
            }
        }
        let nonzero = out.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 9);
    }

    #[test]
    fn conv2d_output_extent() {
        let mut t = tape();
        let x = t.constant(&[2, 7, 6], vec![0.5; 84]).unwrap();
        let k = t.constant(&[3, 2, 3, 3], vec![0.1; 54]).unwrap();
        let y = t.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[3, 4, 3]);
        let big = t.constant(&[1, 2, 2, 2], vec![0.0; 8]).unwrap();
        let k5 = t.constant(&[1, 1, 5, 5], vec![0.0; 25]).unwrap();
        let x1 = t.constant(&[1, 2, 2], vec![0.0; 4]).unwrap();
        assert!(t.conv2d(x1, k5, 1, 0).is_err());
        assert!(t.conv2d(x1, big, 1, 0).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let mut t = tape();
        let x = t.constant(&[2], vec![-1.0, 2.0]).unwrap();
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r), &[0.0, 2.0]);
        let z = t.constant(&[2], vec![0.0, 0.0]).unwrap();
        let s = t.softmax(z).unwrap();
        assert_eq!(t.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn dropout_eval_is_identity_and_rate_validated() {
        let mut rng = crate::seed::rng_for(0, "t");
        let mut t: Tape<f64> = Tape::new(Mode::Eval);
        let x = t.constant(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = t.dropout(x, 0.5, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(t.dropout(x, 1.0, &mut rng).is_err());
        assert!(t.dropout(x, -0.1, &mut rng).is_err());

        let mut t: Tape<f64> = Tape::new(Mode::Train);
        let x = t.constant(&[1000], vec![1.0; 1000]).unwrap();
        let y = t.dropout(x, 0.3, &mut rng).unwrap();
        for &v in t.value(y) {
            assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_cases() {
        assert_relative_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]), 1.0, epsilon = 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_relative_eq!(cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]), -1.0, epsilon = 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = tape();
        let x = t.variable(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&g| g == 1.0));

        let mut t = tape();
        let data = vec![1.0, -2.0, 3.0];
        let x = t.variable(&[3], data.clone()).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(t.grad(x).unwrap(), &expected[..]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut t = tape();
        let x = t.variable(&[2], vec![1.0, 2.0]).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = tape();
        let x = t.variable(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = tape();
        let x = t.constant(&[1], vec![f64::MAX]).unwrap();
        assert!(matches!(t.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_label_range() {
        let mut t = tape();
        let l = t.constant(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(t.cross_entropy(l, &[3]), Err(Error::LabelOutOfRange { .. })));
    }
}
