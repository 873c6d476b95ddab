//! Forward operations and their vector-Jacobian products.
//!
//! Every method validates shapes, computes the f32 result (plus the f64
//! shadow when the graph runs in shadow mode), and hands the output to
//! `Graph::finish` for the NaN check and node recording. The matching VJPs
//! live in [`vjp`] and are replayed by `Graph::backward`.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::kernels as k;
use crate::tensor::{Graph, Node, Tensor};

/// Saved per-node context needed to run the backward pass.
#[derive(Clone, Debug)]
pub enum OpKind {
    Add,
    Mul,
    Div,
    AddConst(f64),
    Scale(f64),
    Matmul,
    Linear { has_bias: bool },
    Transpose2d,
    Reshape,
    SoftmaxLast,
    Ln,
    Sigmoid,
    Gelu,
    Relu,
    LayerNorm { eps: f64 },
    Conv2d { stride: usize, pad: usize },
    AddChannelBias,
    ConvTranspose2d { stride: usize },
    BilinearResize,
    Sum,
    Mean,
    GatherRows(Rc<Vec<usize>>),
    ConcatRows,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    ConcatCols,
    BceWithLogitsMean,
}

fn dim_err(op: &str, msg: String) -> Error {
    Error::Dim(format!("{op}: {msg}"))
}

/// Computes both precision paths of an elementwise-style op in one place.
macro_rules! dual {
    ($g:expr, $inputs:expr, $kernel:expr) => {{
        if $g.is_shadow() {
            for t in $inputs {
                t.ensure_shadow();
            }
        }
        let borrows: Vec<_> = $inputs.iter().map(|t| t.borrow()).collect();
        let data32: Vec<&[f32]> = borrows.iter().map(|b| b.data.as_slice()).collect();
        #[allow(clippy::redundant_closure_call)]
        let data = ($kernel)(&data32);
        let shadow = if $g.is_shadow() {
            let data64: Vec<&[f64]> =
                borrows.iter().map(|b| b.shadow.as_deref().unwrap()).collect();
            #[allow(clippy::redundant_closure_call)]
            Some(($kernel)(&data64))
        } else {
            None
        };
        (data, shadow)
    }};
}

impl Graph {
    fn require_same_shape(&self, op: &str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
        let sa = a.shape();
        let sb = b.shape();
        if sa != sb {
            return Err(dim_err(op, format!("shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let shape = self.require_same_shape("add", a, b)?;
        let (data, shadow) = dual!(self, &[a, b], |d: &Vec<&[_]>| k::add(d[0], d[1]));
        self.finish("add", OpKind::Add, &[a, b], Tensor::from_parts(shape, data, shadow))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let shape = self.require_same_shape("mul", a, b)?;
        let (data, shadow) = dual!(self, &[a, b], |d: &Vec<&[_]>| k::mul(d[0], d[1]));
        self.finish("mul", OpKind::Mul, &[a, b], Tensor::from_parts(shape, data, shadow))
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let shape = self.require_same_shape("div", a, b)?;
        let (data, shadow) = dual!(self, &[a, b], |d: &Vec<&[_]>| k::div(d[0], d[1]));
        self.finish("div", OpKind::Div, &[a, b], Tensor::from_parts(shape, data, shadow))
    }

    pub fn add_const(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let shape = a.shape();
        let (data, shadow) = dual!(self, &[a], |d: &Vec<&[_]>| k::add_const(d[0], c));
        self.finish(
            "add_const",
            OpKind::AddConst(c),
            &[a],
            Tensor::from_parts(shape, data, shadow),
        )
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let shape = a.shape();
        let (data, shadow) = dual!(self, &[a], |d: &Vec<&[_]>| k::scale(d[0], c));
        self.finish("scale", OpKind::Scale(c), &[a], Tensor::from_parts(shape, data, shadow))
    }

    /// C[m,n] = A[m,k] * B[k,n].
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let sa = a.shape();
        let sb = b.shape();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err("matmul", format!("expects rank-2 operands, got {sa:?} and {sb:?}")));
        }
        if sa[1] != sb[0] {
            return Err(dim_err(
                "matmul",
                format!("inner extents differ: {:?} vs {:?}", sa, sb),
            ));
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let (data, shadow) = dual!(self, &[a, b], |d: &Vec<&[_]>| k::matmul(d[0], d[1], m, kk, n));
        self.finish("matmul", OpKind::Matmul, &[a, b], Tensor::from_parts(vec![m, n], data, shadow))
    }

    /// y[n,dout] = x[n,din] * w[dout,din]^T + b. The projection layout used
    /// by every linear layer in the model.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let sx = x.shape();
        let sw = w.shape();
        if sx.len() != 2 || sw.len() != 2 {
            return Err(dim_err("linear", format!("expects rank-2 x and w, got {sx:?} and {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(dim_err(
                "linear",
                format!("input features {} do not match weight columns {}", sx[1], sw[1]),
            ));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        if let Some(bias) = b {
            if bias.shape() != vec![dout] {
                return Err(dim_err(
                    "linear",
                    format!("bias shape {:?} does not match dout {}", bias.shape(), dout),
                ));
            }
        }
        let inputs: Vec<&Tensor> = match b {
            Some(bias) => vec![x, w, bias],
            None => vec![x, w],
        };
        let (data, shadow) = dual!(self, &inputs, |d: &Vec<&[_]>| k::linear(
            d[0],
            d[1],
            if d.len() > 2 { Some(d[2]) } else { None },
            n,
            din,
            dout
        ));
        self.finish(
            "linear",
            OpKind::Linear { has_bias: b.is_some() },
            &inputs,
            Tensor::from_parts(vec![n, dout], data, shadow),
        )
    }

    pub fn transpose2d(&mut self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(dim_err("transpose2d", format!("expects rank-2 input, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let (data, shadow) = dual!(self, &[a], |d: &Vec<&[_]>| k::transpose2d(d[0], r, c));
        self.finish(
            "transpose2d",
            OpKind::Transpose2d,
            &[a],
            Tensor::from_parts(vec![c, r], data, shadow),
        )
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&e| e == 0) || n != a.numel() {
            return Err(dim_err(
                "reshape",
                format!("cannot view {} elements as {shape:?}", a.numel()),
            ));
        }
        let (data, shadow) = dual!(self, &[a], |d: &Vec<&[_]>| d[0].to_vec());
        self.finish(
            "reshape",
            OpKind::Reshape,
            &[a],
            Tensor::from_parts(shape.to_vec(), data, shadow),
        )
    }

    /// Softmax over the last axis; leading axes are treated as rows.
    pub fn softmax_last(&mut self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        let cols = *s.last().unwrap();
        let rows = a.numel() / cols;
        let (data, shadow) = dual!(self, &[a], |d: &Vec<&[_]>| k::softmax_rows(d[0], rows, cols));
        self.finish("softmax", OpKind::SoftmaxLast, &[a], Tensor::from_parts(s, data, shadow))
    }

    pub fn ln(&mut self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        let (data, shadow) = dual!(self, &[a], |d: &Vec<&[_]>| k::ln(d[0]));
        self.finish("ln", OpKind::Ln, &[a], Tensor::from_parts(s, data, shadow))
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        let (data, shadow) = dual!(self, &[a], |d: &Vec<&[_]>| k::sigmoid(d[0]));
        self.finish("sigmoid", OpKind::Sigmoid, &[a], Tensor::from_parts(s, data, shadow))
    }

    /// Tanh-approximate GELU.
    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        let (data, shadow) = dual!(self, &[a], |d: &Vec<&[_]>| k::gelu(d[0]));
        self.finish("gelu", OpKind::Gelu, &[a], Tensor::from_parts(s, data, shadow))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        let (data, shadow) = dual!(self, &[a], |d: &Vec<&[_]>| k::relu(d[0]));
        self.finish("relu", OpKind::Relu, &[a], Tensor::from_parts(s, data, shadow))
    }

    /// Layer normalization over the last axis with affine gamma/beta.
    pub fn layernorm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let s = x.shape();
        let d = *s.last().unwrap();
        if gamma.shape() != vec![d] || beta.shape() != vec![d] {
            return Err(dim_err(
                "layernorm",
                format!(
                    "gamma/beta must be [{d}], got {:?} and {:?}",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let rows = x.numel() / d;
        let (data, shadow) = dual!(self, &[x, gamma, beta], |v: &Vec<&[_]>| k::layernorm(
            v[0], v[1], v[2], eps, rows, d
        ));
        self.finish(
            "layernorm",
            OpKind::LayerNorm { eps },
            &[x, gamma, beta],
            Tensor::from_parts(s, data, shadow),
        )
    }

    /// Single-image convolution: x[cin,h,w] * ker[cout,cin,kh,kw]. The
    /// output extent must divide out exactly; a remainder is an error rather
    /// than a silent floor.
    pub fn conv2d(&mut self, x: &Tensor, ker: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let sx = x.shape();
        let sk = ker.shape();
        if sx.len() != 3 || sk.len() != 4 {
            return Err(dim_err(
                "conv2d",
                format!("expects x[cin,h,w] and ker[cout,cin,kh,kw], got {sx:?} and {sk:?}"),
            ));
        }
        if sx[0] != sk[1] {
            return Err(dim_err(
                "conv2d",
                format!("input channels {} do not match kernel channels {}", sx[0], sk[1]),
            ));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be positive".into()));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let oh = conv_out_extent("conv2d", h, kh, stride, pad)?;
        let ow = conv_out_extent("conv2d", w, kw, stride, pad)?;
        let (data, shadow) = dual!(self, &[x, ker], |d: &Vec<&[_]>| k::conv2d(
            d[0], d[1], cin, h, w, cout, kh, kw, stride, pad
        ));
        self.finish(
            "conv2d",
            OpKind::Conv2d { stride, pad },
            &[x, ker],
            Tensor::from_parts(vec![cout, oh, ow], data, shadow),
        )
    }

    /// Adds a per-channel bias to a [c,h,w] map.
    pub fn add_channel_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let sx = x.shape();
        if sx.len() != 3 || b.shape() != vec![sx[0]] {
            return Err(dim_err(
                "add_channel_bias",
                format!("expects x[c,h,w] and b[c], got {sx:?} and {:?}", b.shape()),
            ));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let hw = h * w;
        let (data, shadow) = dual!(self, &[x, b], |d: &Vec<&[_]>| {
            let mut out = d[0].to_vec();
            for ch in 0..c {
                let bv = d[1][ch];
                for v in &mut out[ch * hw..(ch + 1) * hw] {
                    *v = *v + bv;
                }
            }
            out
        });
        self.finish(
            "add_channel_bias",
            OpKind::AddChannelBias,
            &[x, b],
            Tensor::from_parts(sx, data, shadow),
        )
    }

    /// Transposed convolution with kernel size equal to stride, i.e. exact
    /// non-overlapping 2x/4x upsampling: x[cin,h,w] * ker[cin,cout,s,s].
    pub fn conv_transpose2d(&mut self, x: &Tensor, ker: &Tensor, stride: usize) -> Result<Tensor> {
        let sx = x.shape();
        let sk = ker.shape();
        if sx.len() != 3 || sk.len() != 4 {
            return Err(dim_err(
                "conv_transpose2d",
                format!("expects x[cin,h,w] and ker[cin,cout,s,s], got {sx:?} and {sk:?}"),
            ));
        }
        if sk[0] != sx[0] {
            return Err(dim_err(
                "conv_transpose2d",
                format!("input channels {} do not match kernel channels {}", sx[0], sk[0]),
            ));
        }
        if sk[2] != stride || sk[3] != stride {
            return Err(dim_err(
                "conv_transpose2d",
                format!("kernel spatial extents {:?} must equal stride {stride}", &sk[2..]),
            ));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let cout = sk[1];
        let (data, shadow) = dual!(self, &[x, ker], |d: &Vec<&[_]>| k::conv_transpose2d(
            d[0], d[1], cin, h, w, cout, stride
        ));
        self.finish(
            "conv_transpose2d",
            OpKind::ConvTranspose2d { stride },
            &[x, ker],
            Tensor::from_parts(vec![cout, h * stride, w * stride], data, shadow),
        )
    }

    /// Bilinear resize of a [c,h,w] map with the half-pixel convention
    /// (align_corners = false) and edge replication at the border.
    pub fn bilinear_resize(&mut self, x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
        let sx = x.shape();
        if sx.len() != 3 || oh == 0 || ow == 0 {
            return Err(dim_err(
                "bilinear_resize",
                format!("expects x[c,h,w] and positive target extents, got {sx:?} -> {oh}x{ow}"),
            ));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (data, shadow) =
            dual!(self, &[x], |d: &Vec<&[_]>| k::bilinear_resize(d[0], c, h, w, oh, ow));
        self.finish(
            "bilinear_resize",
            OpKind::BilinearResize,
            &[x],
            Tensor::from_parts(vec![c, oh, ow], data, shadow),
        )
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        if self.is_shadow() {
            a.ensure_shadow();
        }
        let (data, shadow) = {
            let b = a.borrow();
            let data = vec![k::sum_f64(&b.data) as f32];
            let shadow = self.is_shadow().then(|| vec![k::sum_f64(b.shadow.as_deref().unwrap())]);
            (data, shadow)
        };
        self.finish("sum", OpKind::Sum, &[a], Tensor::from_parts(vec![1], data, shadow))
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        if self.is_shadow() {
            a.ensure_shadow();
        }
        let n = a.numel() as f64;
        let (data, shadow) = {
            let b = a.borrow();
            let data = vec![(k::sum_f64(&b.data) / n) as f32];
            let shadow =
                self.is_shadow().then(|| vec![k::sum_f64(b.shadow.as_deref().unwrap()) / n]);
            (data, shadow)
        };
        self.finish("mean", OpKind::Mean, &[a], Tensor::from_parts(vec![1], data, shadow))
    }

    /// Reorders the rows of a [n,d] tensor by `index` (values may repeat).
    pub fn gather_rows(&mut self, a: &Tensor, index: Rc<Vec<usize>>) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(dim_err("gather_rows", format!("expects rank-2 input, got {s:?}")));
        }
        if index.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return Err(dim_err(
                "gather_rows",
                format!("index out of range for {} rows", s[0]),
            ));
        }
        let d = s[1];
        let (data, shadow) = dual!(self, &[a], |v: &Vec<&[_]>| k::gather_rows(v[0], d, &index));
        self.finish(
            "gather_rows",
            OpKind::GatherRows(index.clone()),
            &[a],
            Tensor::from_parts(vec![index.len(), d], data, shadow),
        )
    }

    /// Stacks rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(dim_err("concat_rows", "needs at least one input".into()));
        }
        let cols = parts[0].shape().get(1).copied().unwrap_or(0);
        let mut rows = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[1] != cols {
                return Err(dim_err(
                    "concat_rows",
                    format!("all inputs must be [*,{cols}], got {s:?}"),
                ));
            }
            rows += s[0];
        }
        let (data, shadow) = dual!(self, parts, |d: &Vec<&[_]>| {
            let mut out = Vec::with_capacity(rows * cols);
            for part in d {
                out.extend_from_slice(part);
            }
            out
        });
        self.finish(
            "concat_rows",
            OpKind::ConcatRows,
            parts,
            Tensor::from_parts(vec![rows, cols], data, shadow),
        )
    }

    /// Copies rows [start, start+len) of a [n,d] tensor.
    pub fn slice_rows(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(dim_err(
                "slice_rows",
                format!("rows [{start},{}) out of range for shape {s:?}", start + len),
            ));
        }
        let d = s[1];
        let (data, shadow) =
            dual!(self, &[a], |v: &Vec<&[_]>| v[0][start * d..(start + len) * d].to_vec());
        self.finish(
            "slice_rows",
            OpKind::SliceRows { start, len },
            &[a],
            Tensor::from_parts(vec![len, d], data, shadow),
        )
    }

    /// Copies columns [start, start+len) of a [n,d] tensor.
    pub fn slice_cols(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(dim_err(
                "slice_cols",
                format!("cols [{start},{}) out of range for shape {s:?}", start + len),
            ));
        }
        let (n, d) = (s[0], s[1]);
        let (data, shadow) = dual!(self, &[a], |v: &Vec<&[_]>| {
            let mut out = Vec::with_capacity(n * len);
            for r in 0..n {
                out.extend_from_slice(&v[0][r * d + start..r * d + start + len]);
            }
            out
        });
        self.finish(
            "slice_cols",
            OpKind::SliceCols { start, len },
            &[a],
            Tensor::from_parts(vec![n, len], data, shadow),
        )
    }

    /// Concatenates rank-2 tensors with equal row counts along the column
    /// axis (used to re-join attention heads).
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(dim_err("concat_cols", "needs at least one input".into()));
        }
        let n = parts[0].shape()[0];
        let mut cols = 0usize;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != n {
                return Err(dim_err(
                    "concat_cols",
                    format!("all inputs must be [{n},*], got {s:?}"),
                ));
            }
            widths.push(s[1]);
            cols += s[1];
        }
        let (data, shadow) = dual!(self, parts, |d: &Vec<&[_]>| {
            let mut out = Vec::with_capacity(n * cols);
            for r in 0..n {
                for (pi, part) in d.iter().enumerate() {
                    let w = widths[pi];
                    out.extend_from_slice(&part[r * w..(r + 1) * w]);
                }
            }
            out
        });
        self.finish(
            "concat_cols",
            OpKind::ConcatCols,
            parts,
            Tensor::from_parts(vec![n, cols], data, shadow),
        )
    }

    /// Mean binary cross-entropy with logits, computed in the numerically
    /// stable max/softplus form. `target` is expected in [0,1].
    pub fn bce_with_logits_mean(&mut self, logits: &Tensor, target: &Tensor) -> Result<Tensor> {
        self.require_same_shape("bce_with_logits_mean", logits, target)?;
        if self.is_shadow() {
            logits.ensure_shadow();
            target.ensure_shadow();
        }
        let (data, shadow) = {
            let l = logits.borrow();
            let t = target.borrow();
            let data = vec![k::bce_with_logits_mean(&l.data, &t.data) as f32];
            let shadow = self.is_shadow().then(|| {
                vec![k::bce_with_logits_mean(
                    l.shadow.as_deref().unwrap(),
                    t.shadow.as_deref().unwrap(),
                )]
            });
            (data, shadow)
        };
        self.finish(
            "bce_with_logits_mean",
            OpKind::BceWithLogitsMean,
            &[logits, target],
            Tensor::from_parts(vec![1], data, shadow),
        )
    }
}

pub(crate) fn conv_out_extent(op: &str, input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(dim_err(op, format!("kernel {kernel} exceeds padded extent {padded}")));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(dim_err(
            op,
            format!(
                "non-integral output extent: ({input} + 2*{pad} - {kernel}) is not divisible by stride {stride}"
            ),
        ));
    }
    Ok(span / stride + 1)
}

/// Accumulates `delta` into input `idx` of the node if that input wants a
/// gradient; NaN/Inf in a gradient is as fatal as in a forward value.
fn push_grad(node: &Node, idx: usize, delta: Vec<f32>, op: &'static str) -> Result<()> {
    let t = &node.inputs[idx];
    if !t.needs_grad() {
        return Ok(());
    }
    if !delta.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    t.accumulate_grad(&delta);
    Ok(())
}

fn wants(node: &Node, idx: usize) -> bool {
    node.inputs[idx].needs_grad()
}

/// Runs the vector-Jacobian product for one node given the output gradient.
pub(crate) fn vjp(node: &Node, d: &[f32]) -> Result<()> {
    match &node.kind {
        OpKind::Add => {
            push_grad(node, 0, d.to_vec(), "add")?;
            push_grad(node, 1, d.to_vec(), "add")?;
        }
        OpKind::Mul => {
            if wants(node, 0) {
                let b = node.inputs[1].borrow().data.clone();
                push_grad(node, 0, k::mul(d, &b), "mul")?;
            }
            if wants(node, 1) {
                let a = node.inputs[0].borrow().data.clone();
                push_grad(node, 1, k::mul(d, &a), "mul")?;
            }
        }
        OpKind::Div => {
            let a = node.inputs[0].borrow().data.clone();
            let b = node.inputs[1].borrow().data.clone();
            if wants(node, 0) {
                push_grad(node, 0, k::div(d, &b), "div")?;
            }
            if wants(node, 1) {
                let delta: Vec<f32> = d
                    .iter()
                    .zip(a.iter().zip(&b))
                    .map(|(&g, (&av, &bv))| -g * av / (bv * bv))
                    .collect();
                push_grad(node, 1, delta, "div")?;
            }
        }
        OpKind::AddConst(_) => push_grad(node, 0, d.to_vec(), "add_const")?,
        OpKind::Scale(c) => push_grad(node, 0, k::scale(d, *c), "scale")?,
        OpKind::Matmul => {
            let sa = node.inputs[0].shape();
            let sb = node.inputs[1].shape();
            let (m, kk, n) = (sa[0], sa[1], sb[1]);
            if wants(node, 0) {
                // dA = dC * B^T
                let b = node.inputs[1].borrow().data.clone();
                let bt = k::transpose2d(&b, kk, n);
                push_grad(node, 0, k::matmul(d, &bt, m, n, kk), "matmul")?;
            }
            if wants(node, 1) {
                // dB = A^T * dC
                let a = node.inputs[0].borrow().data.clone();
                let at = k::transpose2d(&a, m, kk);
                push_grad(node, 1, k::matmul(&at, d, kk, m, n), "matmul")?;
            }
        }
        OpKind::Linear { has_bias } => {
            let sx = node.inputs[0].shape();
            let sw = node.inputs[1].shape();
            let (n, din, dout) = (sx[0], sx[1], sw[0]);
            if wants(node, 0) {
                // dX = dY * W
                let w = node.inputs[1].borrow().data.clone();
                push_grad(node, 0, k::matmul(d, &w, n, dout, din), "linear")?;
            }
            if wants(node, 1) {
                // dW = dY^T * X
                let x = node.inputs[0].borrow().data.clone();
                let dt = k::transpose2d(d, n, dout);
                push_grad(node, 1, k::matmul(&dt, &x, dout, n, din), "linear")?;
            }
            if *has_bias && wants(node, 2) {
                let mut db = vec![0.0f32; dout];
                for r in 0..n {
                    for o in 0..dout {
                        db[o] += d[r * dout + o];
                    }
                }
                push_grad(node, 2, db, "linear")?;
            }
        }
        OpKind::Transpose2d => {
            let s = node.inputs[0].shape();
            // d has the transposed shape [cols, rows]; transpose it back.
            push_grad(node, 0, k::transpose2d(d, s[1], s[0]), "transpose2d")?;
        }
        OpKind::Reshape => push_grad(node, 0, d.to_vec(), "reshape")?,
        OpKind::SoftmaxLast => {
            let y = node.output.borrow().data.clone();
            let s = node.output.borrow().shape.clone();
            let cols = *s.last().unwrap();
            let rows = y.len() / cols;
            let mut dx = vec![0.0f32; y.len()];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let dr = &d[r * cols..(r + 1) * cols];
                let mut dot = 0.0f64;
                for i in 0..cols {
                    dot += (yr[i] * dr[i]) as f64;
                }
                let dot = dot as f32;
                let o = &mut dx[r * cols..(r + 1) * cols];
                for i in 0..cols {
                    o[i] = yr[i] * (dr[i] - dot);
                }
            }
            push_grad(node, 0, dx, "softmax")?;
        }
        OpKind::Ln => {
            let x = node.inputs[0].borrow().data.clone();
            push_grad(node, 0, k::div(d, &x), "ln")?;
        }
        OpKind::Sigmoid => {
            let y = node.output.borrow().data.clone();
            let delta: Vec<f32> = d.iter().zip(&y).map(|(&g, &v)| g * v * (1.0 - v)).collect();
            push_grad(node, 0, delta, "sigmoid")?;
        }
        OpKind::Gelu => {
            let x = node.inputs[0].borrow().data.clone();
            push_grad(node, 0, k::mul(d, &k::gelu_grad(&x)), "gelu")?;
        }
        OpKind::Relu => {
            let x = node.inputs[0].borrow().data.clone();
            let delta: Vec<f32> =
                d.iter().zip(&x).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
            push_grad(node, 0, delta, "relu")?;
        }
        OpKind::LayerNorm { eps } => {
            vjp_layernorm(node, d, *eps)?;
        }
        OpKind::Conv2d { stride, pad } => {
            vjp_conv2d(node, d, *stride, *pad)?;
        }
        OpKind::AddChannelBias => {
            let sx = node.inputs[0].shape();
            let (c, hw) = (sx[0], sx[1] * sx[2]);
            push_grad(node, 0, d.to_vec(), "add_channel_bias")?;
            if wants(node, 1) {
                let mut db = vec![0.0f32; c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for &g in &d[ch * hw..(ch + 1) * hw] {
                        acc += g as f64;
                    }
                    db[ch] = acc as f32;
                }
                push_grad(node, 1, db, "add_channel_bias")?;
            }
        }
        OpKind::ConvTranspose2d { stride } => {
            vjp_conv_transpose2d(node, d, *stride)?;
        }
        OpKind::BilinearResize => {
            vjp_bilinear(node, d)?;
        }
        OpKind::Sum => push_grad(node, 0, vec![d[0]; node.inputs[0].numel()], "sum")?,
        OpKind::Mean => {
            let n = node.inputs[0].numel();
            push_grad(node, 0, vec![d[0] / n as f32; n], "mean")?;
        }
        OpKind::GatherRows(index) => {
            let s = node.inputs[0].shape();
            let dcols = s[1];
            let mut dx = vec![0.0f32; s[0] * dcols];
            for (r, &src) in index.iter().enumerate() {
                let row = &d[r * dcols..(r + 1) * dcols];
                let out = &mut dx[src * dcols..(src + 1) * dcols];
                for i in 0..dcols {
                    out[i] += row[i];
                }
            }
            push_grad(node, 0, dx, "gather_rows")?;
        }
        OpKind::ConcatRows => {
            let cols = node.output.borrow().shape[1];
            let mut offset = 0usize;
            for idx in 0..node.inputs.len() {
                let rows = node.inputs[idx].shape()[0];
                let part = d[offset * cols..(offset + rows) * cols].to_vec();
                push_grad(node, idx, part, "concat_rows")?;
                offset += rows;
            }
        }
        OpKind::SliceRows { start, len } => {
            let s = node.inputs[0].shape();
            let cols = s[1];
            let mut dx = vec![0.0f32; s[0] * cols];
            dx[start * cols..(start + len) * cols].copy_from_slice(d);
            push_grad(node, 0, dx, "slice_rows")?;
        }
        OpKind::SliceCols { start, len } => {
            let s = node.inputs[0].shape();
            let (n, dcols) = (s[0], s[1]);
            let mut dx = vec![0.0f32; n * dcols];
            for r in 0..n {
                dx[r * dcols + start..r * dcols + start + len]
                    .copy_from_slice(&d[r * len..(r + 1) * len]);
            }
            push_grad(node, 0, dx, "slice_cols")?;
        }
        OpKind::ConcatCols => {
            let n = node.output.borrow().shape[0];
            let total = node.output.borrow().shape[1];
            let mut offset = 0usize;
            for idx in 0..node.inputs.len() {
                let w = node.inputs[idx].shape()[1];
                let mut part = vec![0.0f32; n * w];
                for r in 0..n {
                    part[r * w..(r + 1) * w]
                        .copy_from_slice(&d[r * total + offset..r * total + offset + w]);
                }
                push_grad(node, idx, part, "concat_cols")?;
                offset += w;
            }
        }
        OpKind::BceWithLogitsMean => {
            let x = node.inputs[0].borrow().data.clone();
            let t = node.inputs[1].borrow().data.clone();
            let n = x.len() as f32;
            let g = d[0];
            if wants(node, 0) {
                let delta: Vec<f32> = x
                    .iter()
                    .zip(&t)
                    .map(|(&xv, &tv)| g * (k::sigmoid_one(xv) - tv) / n)
                    .collect();
                push_grad(node, 0, delta, "bce_with_logits_mean")?;
            }
            if wants(node, 1) {
                let delta: Vec<f32> = x.iter().map(|&xv| -g * xv / n).collect();
                push_grad(node, 1, delta, "bce_with_logits_mean")?;
            }
        }
    }
    Ok(())
}

fn vjp_layernorm(node: &Node, d: &[f32], eps: f64) -> Result<()> {
    let x = node.inputs[0].borrow().data.clone();
    let gamma = node.inputs[1].borrow().data.clone();
    let dim = gamma.len();
    let rows = x.len() / dim;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f64; dim];
    let mut dbeta = vec![0.0f64; dim];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let dr = &d[r * dim..(r + 1) * dim];
        let (mu, var) = k::row_stats(xr);
        let inv = 1.0 / (var + eps).sqrt();
        // xhat, and the two row means the gradient needs.
        let mut mean_dxhat = 0.0f64;
        let mut mean_dxhat_xhat = 0.0f64;
        let mut xhat = vec![0.0f64; dim];
        let mut dxhat = vec![0.0f64; dim];
        for i in 0..dim {
            xhat[i] = (xr[i] as f64 - mu) * inv;
            dxhat[i] = dr[i] as f64 * gamma[i] as f64;
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat[i];
            dgamma[i] += dr[i] as f64 * xhat[i];
            dbeta[i] += dr[i] as f64;
        }
        mean_dxhat /= dim as f64;
        mean_dxhat_xhat /= dim as f64;
        let o = &mut dx[r * dim..(r + 1) * dim];
        for i in 0..dim {
            o[i] = ((dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat) * inv) as f32;
        }
    }
    push_grad(node, 0, dx, "layernorm")?;
    push_grad(node, 1, dgamma.iter().map(|&v| v as f32).collect(), "layernorm")?;
    push_grad(node, 2, dbeta.iter().map(|&v| v as f32).collect(), "layernorm")?;
    Ok(())
}

fn vjp_conv2d(node: &Node, d: &[f32], stride: usize, pad: usize) -> Result<()> {
    let sx = node.inputs[0].shape();
    let sk = node.inputs[1].shape();
    let (cin, h, w) = (sx[0], sx[1], sx[2]);
    let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
    let so = node.output.borrow().shape.clone();
    let (oh, ow) = (so[1], so[2]);
    let x = node.inputs[0].borrow().data.clone();
    let ker = node.inputs[1].borrow().data.clone();
    let want_x = wants(node, 0);
    let want_k = wants(node, 1);
    let mut dx = vec![0.0f32; x.len()];
    let mut dk = vec![0.0f32; ker.len()];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = d[(co * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (ci * h + iy as usize) * w + ix as usize;
                            let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                            if want_x {
                                dx[xi] += g * ker[ki];
                            }
                            if want_k {
                                dk[ki] += g * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    if want_x {
        push_grad(node, 0, dx, "conv2d")?;
    }
    if want_k {
        push_grad(node, 1, dk, "conv2d")?;
    }
    Ok(())
}

fn vjp_conv_transpose2d(node: &Node, d: &[f32], s: usize) -> Result<()> {
    let sx = node.inputs[0].shape();
    let sk = node.inputs[1].shape();
    let (cin, h, w) = (sx[0], sx[1], sx[2]);
    let cout = sk[1];
    let (oh, ow) = (h * s, w * s);
    let x = node.inputs[0].borrow().data.clone();
    let ker = node.inputs[1].borrow().data.clone();
    let want_x = wants(node, 0);
    let want_k = wants(node, 1);
    let mut dx = vec![0.0f32; x.len()];
    let mut dk = vec![0.0f32; ker.len()];
    for ci in 0..cin {
        for iy in 0..h {
            for ix in 0..w {
                let xi = (ci * h + iy) * w + ix;
                for co in 0..cout {
                    for dy in 0..s {
                        for dxo in 0..s {
                            let g = d[(co * oh + iy * s + dy) * ow + ix * s + dxo];
                            let ki = ((ci * cout + co) * s + dy) * s + dxo;
                            if want_x {
                                dx[xi] += g * ker[ki];
                            }
                            if want_k {
                                dk[ki] += g * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    if want_x {
        push_grad(node, 0, dx, "conv_transpose2d")?;
    }
    if want_k {
        push_grad(node, 1, dk, "conv_transpose2d")?;
    }
    Ok(())
}

fn vjp_bilinear(node: &Node, d: &[f32]) -> Result<()> {
    let sx = node.inputs[0].shape();
    let so = node.output.borrow().shape.clone();
    let (c, h, w) = (sx[0], sx[1], sx[2]);
    let (oh, ow) = (so[1], so[2]);
    let mut dx = vec![0.0f32; c * h * w];
    for oy in 0..oh {
        let (y0, y1, ty) = k::bilinear_axis(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, tx) = k::bilinear_axis(ox, w, ow);
            for ch in 0..c {
                let g = d[(ch * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                let base = ch * h * w;
                let (wy, wx) = (ty as f32, tx as f32);
                dx[base + y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                dx[base + y0 * w + x1] += g * (1.0 - wy) * wx;
                dx[base + y1 * w + x0] += g * wy * (1.0 - wx);
                dx[base + y1 * w + x1] += g * wy * wx;
            }
        }
    }
    push_grad(node, 0, dx, "bilinear_resize")?;
    Ok(())
}
