use super::kernels::{bilinear_taps, col2im, gemm, im2col, ConvGeometry, Layout};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Relu,
    Abs,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        // geometry of the equivalent forward convolution over the output
        geom: ConvGeometry,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        padding: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GridSample {
        fmap: Var,
        coords: Var,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Sum(Var),
    RowNorm(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    /// True when some trainable leaf is upstream of this node.
    tracked: bool,
    /// Accumulated gradient, kept for trainable leaves only.
    grad: Option<Vec<f64>>,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so the node list is always
/// topologically sorted. A tape belongs to one thread; build a separate
/// tape per concurrent forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf. Gradients are collected for it when the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push_node(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), tracked)
    }

    /// Registers a constant (never differentiated) from raw parts.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node is well-formed")
    }

    /// Gradient accumulated for a trainable leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push_node(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let grad = match (&op, tracked) {
            (Op::Leaf, true) => Some(vec![0.0; value.len()]),
            _ => None,
        };
        self.nodes.push(Node {
            op,
            shape,
            value,
            tracked,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: &[Var], shape: Vec<usize>, value: Vec<f64>) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push_node(op, shape, value, tracked)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", [m, k], [k2, n]),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), Layout::Normal, self.value(b), Layout::Normal, 0.0, &mut out);
        Ok(self.push(Op::MatMul(a, b), &[a, b], vec![m, n], out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose(a), &[a], vec![c, r], out))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (numel(&sa), numel(&sb));
        let shape = if sa == sb || nb == 1 {
            sa
        } else if na == 1 {
            sb
        } else {
            return Err(Error::dim(
                "elementwise",
                format!("incompatible shapes {sa:?} and {sb:?}"),
            ));
        };
        let n = numel(&shape);
        let (va, vb) = (self.value(a), self.value(b));
        let out = (0..n)
            .map(|i| {
                let x = va[if na == 1 { 0 } else { i }];
                let y = vb[if nb == 1 { 0 } else { i }];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        Ok(self.push(Op::Binary(kind, a, b), &[a, b], shape, out))
    }

    /// Elementwise sum; one side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a), &[a], shape, out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), &[a], shape, out)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |x| x.max(0.0),
            Unary::Abs => f64::abs,
            Unary::Square => |x| x * x,
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Unary(kind, a), &[a], shape, out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    /// `x W + b` for `x: T x Cin`, `W: Cin x Cout`, `b: Cout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (t, cin) = self.matrix_dims("linear", x)?;
        let (wi, cout) = self.matrix_dims("linear", w)?;
        if cin != wi {
            return Err(Error::dim(
                "linear",
                format!("input {:?} vs weight {:?}", [t, cin], [wi, cout]),
            ));
        }
        let mut out = vec![0.0; t * cout];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != cout {
                return Err(Error::dim(
                    "linear",
                    format!("bias of length {} for {cout} outputs", bias.len()),
                ));
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(t, cin, cout, self.value(x), Layout::Normal, self.value(w), Layout::Normal, 1.0, &mut out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Op::Linear { x, w, b }, &inputs, vec![t, cout], out))
    }

    /// Cross-correlation of `x: C x H x W` with `w: Co x C x k x k`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim("conv2d", format!("input must be C x H x W, got {s:?}"))),
        };
        let (co, k) = match self.shape(w) {
            [co, ci, k, k2] if *ci == c && k == k2 => (*co, *k),
            s => {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernel {s:?} incompatible with {c} input channels"),
                ))
            }
        };
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            padding,
        };
        let (ho, wo) = geom.output_hw().ok_or_else(|| {
            Error::dim(
                "conv2d",
                format!("kernel {k} stride {stride} padding {padding} does not fit {h}x{wd}"),
            )
        })?;
        let cols = im2col(self.value(x), geom);
        let mut out = vec![0.0; co * ho * wo];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != co {
                return Err(Error::dim("conv2d", "bias length differs from output channels"));
            }
            for (plane, &bv) in out.chunks_mut(ho * wo).zip(bias) {
                plane.iter_mut().for_each(|v| *v = bv);
            }
        }
        gemm(co, c * k * k, ho * wo, self.value(w), Layout::Normal, &cols, Layout::Normal, 1.0, &mut out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Op::Conv2d { x, w, b, geom }, &inputs, vec![co, ho, wo], out))
    }

    /// Transposed convolution of `x: Ci x H x W` with `w: Ci x Co x k x k`,
    /// no padding. Output is `Co x ((H-1)s+k) x ((W-1)s+k)`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::dim("conv_transpose2d", "stride must be at least 1"));
        }
        let (ci, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::dim(
                    "conv_transpose2d",
                    format!("input must be C x H x W, got {s:?}"),
                ))
            }
        };
        let (co, k) = match self.shape(w) {
            [c, co, k, k2] if *c == ci && k == k2 => (*co, *k),
            s => {
                return Err(Error::dim(
                    "conv_transpose2d",
                    format!("kernel {s:?} incompatible with {ci} input channels"),
                ))
            }
        };
        let (ho, wo) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        let geom = ConvGeometry {
            channels: co,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            padding: 0,
        };
        let mut cols = vec![0.0; co * k * k * h * wd];
        gemm(co * k * k, ci, h * wd, self.value(w), Layout::Transposed, self.value(x), Layout::Normal, 0.0, &mut cols);
        let mut out = vec![0.0; co * ho * wo];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != co {
                return Err(Error::dim("conv_transpose2d", "bias length differs from output channels"));
            }
            for (plane, &bv) in out.chunks_mut(ho * wo).zip(bias) {
                plane.iter_mut().for_each(|v| *v = bv);
            }
        }
        col2im(&cols, geom, &mut out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Op::ConvTranspose2d { x, w, b, geom }, &inputs, vec![co, ho, wo], out))
    }

    /// Depthwise 1-D cross-correlation along the token axis of `x: T x C`
    /// with per-channel kernels `w: C x k` and zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let (t, c) = self.matrix_dims("conv1d", x)?;
        let (wc, k) = self.matrix_dims("conv1d", w)?;
        if wc != c {
            return Err(Error::dim("conv1d", format!("kernel has {wc} channels, input {c}")));
        }
        if k > t + 2 * padding {
            return Err(Error::dim(
                "conv1d",
                format!("kernel {k} longer than padded sequence {}", t + 2 * padding),
            ));
        }
        let tout = t + 2 * padding - k + 1;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; tout * c];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != c {
                return Err(Error::dim("conv1d", "bias length differs from channels"));
            }
            for row in out.chunks_mut(c) {
                row.copy_from_slice(bias);
            }
        }
        for o in 0..tout {
            for j in 0..k {
                let src = o + j;
                if src < padding || src - padding >= t {
                    continue;
                }
                let xr = &xv[(src - padding) * c..(src - padding + 1) * c];
                let orow = &mut out[o * c..(o + 1) * c];
                for ch in 0..c {
                    orow[ch] += wv[ch * k + j] * xr[ch];
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Op::Conv1d { x, w, b, padding }, &inputs, vec![tout, c], out))
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(self.push(Op::Softmax { x, axis }, &[x], shape, out))
    }

    /// Per-row normalisation of `x: T x C` followed by a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (t, c) = self.matrix_dims("layer_norm", x)?;
        if self.value(gain).len() != c || self.value(shift).len() != c {
            return Err(Error::dim("layer_norm", format!("affine parameters must have {c} entries")));
        }
        let src = self.value(x);
        let (g, s) = (self.value(gain), self.value(shift));
        let mut normalized = vec![0.0; t * c];
        let mut inv_std = vec![0.0; t];
        let mut out = vec![0.0; t * c];
        for r in 0..t {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                normalized[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + s[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            },
            &[x, gain, shift],
            vec![t, c],
            out,
        ))
    }

    /// Bilinear lookup of `fmap: C x H x W` at `coords: T x 2` holding
    /// `(x, y)` in `[-1, 1]`; returns `T x C`.
    ///
    /// `-1` and `+1` address the centres of the first and last pixel.
    /// Coordinates outside the range are clamped to the border.
    pub fn grid_sample(&mut self, fmap: Var, coords: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(fmap) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim("grid_sample", format!("feature map must be C x H x W, got {s:?}"))),
        };
        let (t, two) = self.matrix_dims("grid_sample", coords)?;
        if two != 2 {
            return Err(Error::dim("grid_sample", format!("coords must be T x 2, got {t} x {two}")));
        }
        let (fv, cv) = (self.value(fmap), self.value(coords));
        let mut out = vec![0.0; t * c];
        for p in 0..t {
            let (x0, x1, fx, _) = bilinear_taps(cv[2 * p], w);
            let (y0, y1, fy, _) = bilinear_taps(cv[2 * p + 1], h);
            let taps = [
                (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                (y0 * w + x1, fx * (1.0 - fy)),
                (y1 * w + x0, (1.0 - fx) * fy),
                (y1 * w + x1, fx * fy),
            ];
            let orow = &mut out[p * c..(p + 1) * c];
            for (ch, o) in orow.iter_mut().enumerate() {
                let plane = &fv[ch * h * w..(ch + 1) * h * w];
                *o = taps.iter().map(|&(i, wt)| wt * plane[i]).sum();
            }
        }
        Ok(self.push(Op::GridSample { fmap, coords }, &[fmap, coords], vec![t, c], out))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(Op::Reshape(x), &[x], shape, out))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if *cols.get_or_insert(c) != c {
                return Err(Error::dim("concat_rows", "column counts differ"));
            }
            rows += r;
        }
        let cols = cols.ok_or_else(|| Error::dim("concat_rows", "nothing to concatenate"))?;
        let out = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        Ok(self.push(Op::ConcatRows(parts.to_vec()), parts, vec![rows, cols], out))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::dim("concat_cols", "row counts differ"));
            }
            widths.push(c);
        }
        let rows = rows.ok_or_else(|| Error::dim("concat_cols", "nothing to concatenate"))?;
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), parts, vec![rows, total], out))
    }

    /// Selects rows of a matrix by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("gather_rows", x)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of range for {r} rows")));
        }
        if indices.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        let src = self.value(x);
        let out = indices
            .iter()
            .flat_map(|&i| src[i * c..(i + 1) * c].iter().copied())
            .collect();
        Ok(self.push(Op::GatherRows(x, indices.to_vec()), &[x], vec![indices.len(), c], out))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", format!("range {start}..{end} of {c} columns")));
        }
        let src = self.value(x);
        let out = (0..r)
            .flat_map(|i| src[i * c + start..i * c + end].iter().copied())
            .collect();
        Ok(self.push(Op::SliceCols(x, start, end), &[x], vec![r, end - start], out))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Op::Sum(x), &[x], vec![], vec![s])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of every row of `x: N x D`, giving a vector of length N.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("row_norm", x)?;
        let src = self.value(x);
        let out = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(self.push(Op::RowNorm(x), &[x], vec![r], out))
    }

    // ----------------------------------------------------------- backward

    /// Propagates gradients from a single-element `loss` to every trainable
    /// leaf. Leaf gradients are added to what earlier calls accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].tracked {
                continue;
            }
            self.propagate(id, &g, &mut adj);
            if let Some(acc) = self.nodes[id].grad.as_mut() {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, adj, Some($v))
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = slot!(*a) {
                    gemm(m, n, k, g, Layout::Normal, self.value(*b), Layout::Transposed, 1.0, ga);
                }
                if let Some(gb) = slot!(*b) {
                    gemm(k, m, n, self.value(*a), Layout::Transposed, g, Layout::Normal, 1.0, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = slot!(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let pick = |v: &[f64], i: usize| v[if v.len() == 1 { 0 } else { i }];
                for (side, target) in [(0, *a), (1, *b)] {
                    let Some(gt) = slot!(target) else { continue };
                    let scalar = gt.len() == 1 && g.len() != 1;
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match (kind, side) {
                            (Binary::Add, _) => gi,
                            (Binary::Sub, 0) => gi,
                            (Binary::Sub, _) => -gi,
                            (Binary::Mul, 0) => gi * pick(vb, i),
                            (Binary::Mul, _) => gi * pick(va, i),
                        };
                        gt[if scalar { 0 } else { i }] += d;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot!(*a) {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += c * gi;
                    }
                }
            }
            Op::Unary(kind, a) => {
                let (x, y) = (self.value(*a), &node.value);
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * x[i],
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (t, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let cout = self.shape(*w)[1];
                if let Some(gx) = slot!(*x) {
                    gemm(t, cout, cin, g, Layout::Normal, self.value(*w), Layout::Transposed, 1.0, gx);
                }
                if let Some(gw) = slot!(*w) {
                    gemm(cin, t, cout, self.value(*x), Layout::Transposed, g, Layout::Normal, 1.0, gw);
                }
                if let Some(gb) = grad_slot(nodes, adj, *b) {
                    for row in g.chunks(cout) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let co = self.shape(*w)[0];
                let kk = geom.channels * geom.kernel * geom.kernel;
                let spatial = g.len() / co;
                if let Some(gw) = slot!(*w) {
                    let cols = im2col(self.value(*x), *geom);
                    gemm(co, spatial, kk, g, Layout::Normal, &cols, Layout::Transposed, 1.0, gw);
                }
                if let Some(gx) = slot!(*x) {
                    let mut dcols = vec![0.0; kk * spatial];
                    gemm(kk, co, spatial, self.value(*w), Layout::Transposed, g, Layout::Normal, 0.0, &mut dcols);
                    col2im(&dcols, *geom, gx);
                }
                if let Some(gb) = grad_slot(nodes, adj, *b) {
                    for (o, plane) in gb.iter_mut().zip(g.chunks(spatial)) {
                        *o += plane.iter().sum::<f64>();
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let ci = self.shape(*x)[0];
                let hw = self.value(*x).len() / ci;
                let ckk = geom.channels * geom.kernel * geom.kernel;
                let needs_cols = nodes[x.0].tracked || nodes[w.0].tracked;
                let dcols = needs_cols.then(|| im2col(g, *geom));
                if let (Some(gx), Some(dc)) = (slot!(*x), dcols.as_ref()) {
                    gemm(ci, ckk, hw, self.value(*w), Layout::Normal, dc, Layout::Normal, 1.0, gx);
                }
                if let (Some(gw), Some(dc)) = (slot!(*w), dcols.as_ref()) {
                    gemm(ci, hw, ckk, self.value(*x), Layout::Normal, dc, Layout::Transposed, 1.0, gw);
                }
                if let Some(gb) = grad_slot(nodes, adj, *b) {
                    let spatial = geom.height * geom.width;
                    for (o, plane) in gb.iter_mut().zip(g.chunks(spatial)) {
                        *o += plane.iter().sum::<f64>();
                    }
                }
            }
            Op::Conv1d { x, w, b, padding } => {
                let (t, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[1];
                let tout = node.shape[0];
                let (xv, wv) = (self.value(*x), self.value(*w));
                let taps = |o: usize, j: usize| {
                    let src = o + j;
                    (src >= *padding && src - padding < t).then(|| src - padding)
                };
                if let Some(gx) = slot!(*x) {
                    for o in 0..tout {
                        for j in 0..k {
                            if let Some(s) = taps(o, j) {
                                for ch in 0..c {
                                    gx[s * c + ch] += wv[ch * k + j] * g[o * c + ch];
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = slot!(*w) {
                    for o in 0..tout {
                        for j in 0..k {
                            if let Some(s) = taps(o, j) {
                                for ch in 0..c {
                                    gw[ch * k + j] += xv[s * c + ch] * g[o * c + ch];
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = grad_slot(nodes, adj, *b) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                if let Some(gx) = slot!(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            } => {
                let c = node.shape[1];
                let gv = self.value(*gain);
                if let Some(gx) = slot!(*x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let rg = &g[r * c..(r + 1) * c];
                        let xh = &normalized[r * c..(r + 1) * c];
                        let dxh: Vec<f64> = rg.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += is * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                if let Some(gg) = slot!(*gain) {
                    for (rg, xh) in g.chunks(c).zip(normalized.chunks(c)) {
                        for j in 0..c {
                            gg[j] += rg[j] * xh[j];
                        }
                    }
                }
                if let Some(gs) = slot!(*shift) {
                    for rg in g.chunks(c) {
                        add_into(gs, rg);
                    }
                }
            }
            Op::GridSample { fmap, coords } => {
                let (c, h, w) = {
                    let s = self.shape(*fmap);
                    (s[0], s[1], s[2])
                };
                let (fv, cv) = (self.value(*fmap), self.value(*coords));
                let t = node.shape[0];
                if let Some(gf) = slot!(*fmap) {
                    for p in 0..t {
                        let (x0, x1, fx, _) = bilinear_taps(cv[2 * p], w);
                        let (y0, y1, fy, _) = bilinear_taps(cv[2 * p + 1], h);
                        let taps = [
                            (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                            (y0 * w + x1, fx * (1.0 - fy)),
                            (y1 * w + x0, (1.0 - fx) * fy),
                            (y1 * w + x1, fx * fy),
                        ];
                        for ch in 0..c {
                            let gi = g[p * c + ch];
                            for &(i, wt) in &taps {
                                gf[ch * h * w + i] += wt * gi;
                            }
                        }
                    }
                }
                if let Some(gc) = slot!(*coords) {
                    for p in 0..t {
                        let (x0, x1, fx, dxc) = bilinear_taps(cv[2 * p], w);
                        let (y0, y1, fy, dyc) = bilinear_taps(cv[2 * p + 1], h);
                        let (mut dfx, mut dfy) = (0.0, 0.0);
                        for ch in 0..c {
                            let plane = &fv[ch * h * w..(ch + 1) * h * w];
                            let (v00, v01) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                            let (v10, v11) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                            let gi = g[p * c + ch];
                            dfx += gi * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                            dfy += gi * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
                        }
                        gc[2 * p] += dfx * dxc;
                        gc[2 * p + 1] += dfy * dyc;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = slot!(p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(gp) = slot!(p) {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + offset..r * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::GatherRows(a, indices) => {
                let c = node.shape[1];
                if let Some(ga) = slot!(*a) {
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(&mut ga[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::SliceCols(a, start, end) => {
                let c = self.shape(*a)[1];
                let w = end - start;
                if let Some(ga) = slot!(*a) {
                    for (r, row) in g.chunks(w).enumerate() {
                        add_into(&mut ga[r * c + start..r * c + end], row);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::RowNorm(a) => {
                let c = self.shape(*a)[1];
                let x = self.value(*a);
                if let Some(ga) = slot!(*a) {
                    for (r, (&norm, &gi)) in node.value.iter().zip(g).enumerate() {
                        // subgradient 0 at the origin
                        if norm > 0.0 {
                            for j in 0..c {
                                ga[r * c + j] += gi * x[r * c + j] / norm;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint buffer of `v`, or `None` when nothing upstream of it is trainable.
fn grad_slot<'a>(
    nodes: &[Node],
    adj: &'a mut [Option<Vec<f64>>],
    v: Option<Var>,
) -> Option<&'a mut Vec<f64>> {
    let v = v?;
    if !nodes[v.0].tracked {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(&t(&[2, 1], &[5., 6.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[17., 39.]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros([2, 3]));
        let b = tape.leaf(&Tensor::zeros([2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::ones([2, 2]));
        let s = tape.leaf(&Tensor::scalar(3.0));
        let b = tape.leaf(&Tensor::ones([4]));
        let y = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(y), &[3.0; 4]);
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1., 2., 3.]).with_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1.]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1., 2., 3.]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[0.3, -0.2]).with_grad());
        let y = tape.sigmoid(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(s).unwrap();
        for (a, b) in tape.grad(x).unwrap().iter().zip(&once) {
            assert_eq!(*a, 2.0 * b);
        }
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::ones([2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3, 1], &[1., 2., 3.]));
        let ones = tape.leaf(&t(&[1, 3], &[1., 1., 1.]));
        let y = tape.conv1d(x, ones, None, 1).unwrap();
        assert_eq!(tape.value(y), &[3., 6., 5.]);
        let delta = tape.leaf(&t(&[1, 3], &[0., 1., 0.]));
        let y = tape.conv1d(x, delta, None, 1).unwrap();
        assert_eq!(tape.value(y), &[1., 2., 3.]);
        let long = tape.leaf(&Tensor::ones([1, 6]));
        assert!(tape.conv1d(x, long, None, 1).is_err());
    }

    #[test]
    fn conv_transpose_stamps_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 1], &[2.0]));
        let w = tape.leaf(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = tape.conv_transpose2d(x, w, None, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert_eq!(tape.value(y), &[2., 4., 6., 8.]);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::ones([1, 2, 2]));
        let w = tape.leaf(&Tensor::ones([1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, None, 1, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn grid_sample_midpoint_and_clamp() {
        let mut tape = Tape::new();
        // one channel, 1 x 3 map
        let f = tape.leaf(&t(&[1, 1, 3], &[10., 20., 40.]));
        let c = tape.leaf(&t(&[3, 2], &[-0.5, 0.0, 0.5, 0.0, 7.0, -3.0]));
        let y = tape.grid_sample(f, c).unwrap();
        assert_eq!(tape.value(y), &[15., 30., 40.]);
    }
}
