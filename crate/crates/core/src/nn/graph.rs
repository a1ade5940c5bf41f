//! Tape of recorded operations with reverse-mode accumulation.
//!
//! Every operator appends a node holding its output value; `backward` walks
//! the tape in reverse creation order. Feature maps are `[C, H, W]`,
//! sequences `[C, L]`, row batches `[N, D]`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geom::BoxBEV;

use super::box_loss::{box_loss, BOX_PARAMS};
use super::tensor::{ParamSet, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Stride 1 with padding that preserves spatial size for odd kernel `k`.
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            pad_h: k / 2,
            pad_w: k / 2,
            dilation: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvDims {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    ConvT1d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Upsample2x {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Bilinear {
        map: Var,
        coords: Var,
    },
    Exp {
        x: Var,
    },
    MulConst {
        x: Var,
        k: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Sum {
        x: Var,
    },
    Affine {
        x: Var,
        a: Vec<f64>,
        rows_out: usize,
    },
    BoxLoss {
        pred: Var,
        jac: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// A recording of one forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// `c = a·b + beta·c` for row-major operands, optionally transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
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

fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let p = d.p();
    let mut cols = vec![0.0; d.ckk() * p];
    let s = d.spec;
    for c in 0..d.c {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * s.stride + i * s.dilation) as isize - s.pad_h as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &x[(c * d.h + iy as usize) * d.w..][..d.w];
                    let out = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s.stride + j * s.dilation) as isize - s.pad_w as isize;
                        if ix >= 0 && ix < d.w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], d: &ConvDims) -> Vec<f64> {
    let p = d.p();
    let mut x = vec![0.0; d.c * d.h * d.w];
    let s = d.spec;
    for c in 0..d.c {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * s.stride + i * s.dilation) as isize - s.pad_h as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * d.h + iy as usize) * d.w..][..d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * s.stride + j * s.dilation) as isize - s.pad_w as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Source taps of the half-pixel ×2 bilinear upsample along one axis.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|j| {
            let i = j / 2;
            let near = i;
            let far = if j % 2 == 0 {
                i.saturating_sub(1)
            } else {
                (i + 1).min(n - 1)
            };
            (near, far, 0.75, 0.25)
        })
        .collect()
}

fn bilinear_cell(x: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let i0 = (x.floor() as usize).min(n - 2);
    (i0, x - i0 as f64)
}

impl Graph {
    /// A graph that records what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            record: true,
        }
    }

    /// A graph for frozen-parameter inference; `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            record: false,
        }
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: needs_grad && self.record,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Adds a leaf; gradients are tracked iff `t.requires_grad`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        let t = Tensor {
            grad: None,
            requires_grad: false,
            ..t
        };
        self.push(t, ng, Op::Leaf)
    }

    /// Loads a named parameter once per graph; later calls reuse the node.
    pub fn param(&mut self, ps: &ParamSet, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = ps.get(name)?;
        let v = self.push(Tensor::new(t.shape.clone(), t.data.clone())?, true, Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn dims_err(what: &str, got: &[usize]) -> Error {
        Error::ShapeMismatch(format!("{what}: unexpected shape {got:?}"))
    }

    /// 2-D cross-correlation. `x: [C,H,W]`, `w: [O,C,kh,kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::ShapeMismatch(format!("conv2d input {xs:?} with kernel {ws:?}")));
        }
        self.conv_core(x, w, b, [xs[0], xs[1], xs[2]], [ws[0], ws[2], ws[3]], spec, false)
    }

    /// 1-D cross-correlation over the last axis. `x: [C,L]`, `w: [O,C,k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[0] {
            return Err(Error::ShapeMismatch(format!("conv1d input {xs:?} with kernel {ws:?}")));
        }
        let spec = ConvSpec {
            stride,
            pad_h: 0,
            pad_w: pad,
            dilation: 1,
        };
        self.conv_core(x, w, b, [xs[0], 1, xs[1]], [ws[0], 1, ws[2]], spec, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_core(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        [c, h, wd]: [usize; 3],
        [o, kh, kw]: [usize; 3],
        spec: ConvSpec,
        one_d: bool,
    ) -> Result<Var> {
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::InvalidConfig("conv stride and dilation must be positive".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Self::dims_err("conv bias", self.shape(b)));
            }
        }
        let span_h = spec.dilation * (kh - 1) + 1;
        let span_w = spec.dilation * (kw - 1) + 1;
        if h + 2 * spec.pad_h < span_h || wd + 2 * spec.pad_w < span_w {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{wd}"
            )));
        }
        let ho = (h + 2 * spec.pad_h - span_h) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad_w - span_w) / spec.stride + 1;
        let dims = ConvDims {
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            ho,
            wo,
            spec,
        };
        let cols = im2col(&self.value(x).data, &dims);
        let p = dims.p();
        let mut out = vec![0.0; o * p];
        if let Some(b) = b {
            let bd = &self.value(b).data;
            for (oi, row) in out.chunks_exact_mut(p).enumerate() {
                row.fill(bd[oi]);
            }
        }
        gemm(o, dims.ckk(), p, &self.value(w).data, false, &cols, false, &mut out, 1.0);
        let shape = if one_d { vec![o, wo] } else { vec![o, ho, wo] };
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        let cols = if ng && self.record { cols } else { Vec::new() };
        Ok(self.push(Tensor::new(shape, out)?, ng, Op::Conv { x, w, b, dims, cols }))
    }

    /// Transposed 1-D convolution with stride equal to kernel width.
    /// `x: [C,L]`, `w: [C,O,k]` → `[O, L·k]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 3 || ws[0] != xs[0] {
            return Err(Error::ShapeMismatch(format!("conv_transpose1d input {xs:?} with kernel {ws:?}")));
        }
        let (c, l, o, k) = (xs[0], xs[1], ws[1], ws[2]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Self::dims_err("conv_transpose1d bias", self.shape(b)));
            }
        }
        let xd = &self.value(x).data;
        let wdat = &self.value(w).data;
        let mut out = vec![0.0; o * l * k];
        for oi in 0..o {
            let bias = b.map_or(0.0, |b| self.value(b).data[oi]);
            for i in 0..l {
                for j in 0..k {
                    let mut acc = bias;
                    for ci in 0..c {
                        acc += xd[ci * l + i] * wdat[(ci * o + oi) * k + j];
                    }
                    out[oi * l * k + i * k + j] = acc;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(Tensor::new(vec![o, l * k], out)?, ng, Op::ConvT1d { x, w, b }))
    }

    /// Non-overlapping `k×k` average pooling; H and W must be multiples of `k`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || k == 0 || !s[1].is_multiple_of(k) || !s[2].is_multiple_of(k) {
            return Err(Self::dims_err(&format!("avg_pool2d k={k}"), &s));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / k, w / k);
        let xd = &self.value(x).data;
        let mut out = vec![0.0; c * ho * wo];
        let inv = 1.0 / (k * k) as f64;
        for ci in 0..c {
            for y in 0..h {
                let row = &xd[(ci * h + y) * w..][..w];
                let orow = &mut out[(ci * ho + y / k) * wo..][..wo];
                for (xi, v) in row.iter().enumerate() {
                    orow[xi / k] += v * inv;
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![c, ho, wo], out)?, ng, Op::AvgPool { x, k }))
    }

    /// Bilinear ×2 upsampling with half-pixel alignment and edge clamping.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Self::dims_err("upsample2x", &s));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let xd = &self.value(x).data;
        let mut out = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            let plane = &xd[ci * h * w..][..h * w];
            for (oy, &(ya, yb, wa, wb)) in ty.iter().enumerate() {
                for (ox, &(xa, xb, va, vb)) in tx.iter().enumerate() {
                    out[(ci * 2 * h + oy) * 2 * w + ox] = wa * (va * plane[ya * w + xa] + vb * plane[ya * w + xb])
                        + wb * (va * plane[yb * w + xa] + vb * plane[yb * w + xb]);
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![c, 2 * h, 2 * w], out)?, ng, Op::Upsample2x { x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v.max(0.0)).collect(),
            requires_grad: false,
            grad: None,
        };
        let ng = self.needs(&[x]);
        self.push(out, ng, Op::Relu { x })
    }

    /// `y = x·Wᵀ + b` for `x: [N,in]` (or `[in]`), `w: [out,in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, din) = match xs.as_slice() {
            [d] => (1, *d),
            [n, d] => (*n, *d),
            _ => return Err(Self::dims_err("linear input", &xs)),
        };
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::ShapeMismatch(format!("linear input {xs:?} with weight {ws:?}")));
        }
        let dout = ws[0];
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Self::dims_err("linear bias", self.shape(b)));
            }
            let bd = &self.value(b).data;
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        gemm(n, din, dout, &self.value(x).data, false, &self.value(w).data, true, &mut out, 1.0);
        let shape = if xs.len() == 1 { vec![dout] } else { vec![n, dout] };
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(Tensor::new(shape, out)?, ng, Op::Linear { x, w, b }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or(Error::Empty("concat inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Self::dims_err("concat axis", &first));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch(format!("concat {first:?} with {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = self.needs(xs);
        Ok(self.push(Tensor::new(shape, out)?, ng, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Self::dims_err(&format!("slice axis {axis} [{start}, +{len})"), &s));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xd = &self.value(x).data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, ng, Op::Slice { x, axis, start }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Self::dims_err("transpose", &s));
        }
        let (r, c) = (s[0], s[1]);
        let xd = &self.value(x).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, ng, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let data = self.value(x).data.clone();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, ng, Op::Reshape { x }))
    }

    /// Samples `map: [C,H,W]` at `coords: [N,2]` given as (column, row) in
    /// continuous cell-index units; returns `[N,C]`.
    pub fn bilinear_query(&mut self, map: Var, coords: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        let cs = self.shape(coords).to_vec();
        if ms.len() != 3 || cs.len() != 2 || cs[1] != 2 {
            return Err(Error::ShapeMismatch(format!("bilinear map {ms:?} coords {cs:?}")));
        }
        let (c, h, w) = (ms[0], ms[1], ms[2]);
        let n = cs[0];
        let md = &self.value(map).data;
        let cd = &self.value(coords).data;
        let mut out = vec![0.0; n * c];
        for q in 0..n {
            let (x, y) = (cd[2 * q], cd[2 * q + 1]);
            if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
                return Err(Error::OutOfRange { x, y, w, h });
            }
            let (x0, fx) = bilinear_cell(x, w);
            let (y0, fy) = bilinear_cell(y, h);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for ci in 0..c {
                let p = &md[ci * h * w..];
                out[q * c + ci] = (1.0 - fx) * (1.0 - fy) * p[y0 * w + x0]
                    + fx * (1.0 - fy) * p[y0 * w + x1]
                    + (1.0 - fx) * fy * p[y1 * w + x0]
                    + fx * fy * p[y1 * w + x1];
            }
        }
        let ng = self.needs(&[map, coords]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, ng, Op::Bilinear { map, coords }))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v.exp()).collect(),
            requires_grad: false,
            grad: None,
        };
        let ng = self.needs(&[x]);
        self.push(out, ng, Op::Exp { x })
    }

    /// Elementwise product with a constant broadcast along the last axis.
    pub fn mul_const(&mut self, x: Var, k: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let last = *t.shape.last().unwrap_or(&0);
        if last != k.len() {
            return Err(Self::dims_err("mul_const", &t.shape));
        }
        let data = t
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * k[i % last])
            .collect();
        let out = Tensor::new(t.shape.clone(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, ng, Op::MulConst { x, k: k.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, ng, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * k).collect(),
            requires_grad: false,
            grad: None,
        };
        let ng = self.needs(&[x]);
        self.push(out, ng, Op::Scale { x, k })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), ng, Op::Sum { x })
    }

    /// Per-row affine map: `out[n] = A[n]·x[n] + c[n]`, with `x: [M,k]`
    /// (M = 1 broadcasts), `a: N×r×k` and `c: N×r` flattened row-major.
    pub fn affine_rows(&mut self, x: Var, a: &[f64], c: &[f64], n: usize, r: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || (xs[0] != 1 && xs[0] != n) {
            return Err(Self::dims_err("affine_rows input", &xs));
        }
        let k = xs[1];
        if a.len() != n * r * k || c.len() != n * r {
            return Err(Error::ShapeMismatch(format!(
                "affine_rows coefficients for n={n} r={r} k={k}"
            )));
        }
        let xd = &self.value(x).data;
        let mut out = c.to_vec();
        for i in 0..n {
            let xi = if xs[0] == 1 { 0 } else { i };
            for j in 0..r {
                let mut acc = 0.0;
                for q in 0..k {
                    acc += a[(i * r + j) * k + q] * xd[xi * k + q];
                }
                out[i * r + j] += acc;
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, r], out)?,
            ng,
            Op::Affine {
                x,
                a: a.to_vec(),
                rows_out: n,
            },
        ))
    }

    /// Rotated-box loss of `pred: [N,5]` rows (x, y, θ, w, l) against `gt`.
    pub fn box_loss(&mut self, pred: Var, gt: &[BoxBEV], reduction: Reduction) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || s[1] != BOX_PARAMS || s[0] != gt.len() || gt.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "box_loss pred {s:?} against {} boxes",
                gt.len()
            )));
        }
        let pd = &self.value(pred).data;
        let norm = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / gt.len() as f64,
        };
        let mut total = 0.0;
        let mut jac = vec![0.0; pd.len()];
        for (i, g) in gt.iter().enumerate() {
            let row: [f64; BOX_PARAMS] = pd[i * BOX_PARAMS..(i + 1) * BOX_PARAMS]
                .try_into()
                .expect("row width checked");
            let l = box_loss(&row, g)?;
            total += l.v * norm;
            for (j, d) in l.d.iter().enumerate() {
                jac[i * BOX_PARAMS + j] = d * norm;
            }
        }
        let ng = self.needs(&[pred]);
        Ok(self.push(Tensor::scalar(total), ng, Op::BoxLoss { pred, jac }))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(Error::NonScalarLoss(n));
        }
        if !self.record {
            return Err(Error::InvalidConfig("backward on an inference graph".into()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backprop(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(dg) {
                            *a += d;
                        }
                    }
                    None => node.grad = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, dims, cols } => {
                let p = dims.p();
                let ckk = dims.ckk();
                if self.wants(*w) {
                    let mut dw = vec![0.0; dims.o * ckk];
                    gemm(dims.o, p, ckk, g, false, cols, true, &mut dw, 0.0);
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        out.push((*b, g.chunks_exact(p).map(|r| r.iter().sum()).collect()));
                    }
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; ckk * p];
                    gemm(ckk, dims.o, p, &self.value(*w).data, true, g, false, &mut dcols, 0.0);
                    out.push((*x, col2im(&dcols, dims)));
                }
            }
            Op::ConvT1d { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (c, l, o, k) = (xs[0], xs[1], ws[1], ws[2]);
                let xd = &self.value(*x).data;
                let wd = &self.value(*w).data;
                if self.wants(*x) {
                    let mut dx = vec![0.0; c * l];
                    for ci in 0..c {
                        for i in 0..l {
                            let mut acc = 0.0;
                            for oi in 0..o {
                                for j in 0..k {
                                    acc += g[oi * l * k + i * k + j] * wd[(ci * o + oi) * k + j];
                                }
                            }
                            dx[ci * l + i] = acc;
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; c * o * k];
                    for ci in 0..c {
                        for oi in 0..o {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for i in 0..l {
                                    acc += g[oi * l * k + i * k + j] * xd[ci * l + i];
                                }
                                dw[(ci * o + oi) * k + j] = acc;
                            }
                        }
                    }
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        out.push((*b, g.chunks_exact(l * k).map(|r| r.iter().sum()).collect()));
                    }
                }
            }
            Op::AvgPool { x, k } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let wo = w / k;
                let ho = h / k;
                let inv = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        let grow = &g[(ci * ho + y / k) * wo..][..wo];
                        for (xi, d) in dx[(ci * h + y) * w..][..w].iter_mut().enumerate() {
                            *d = grow[xi / k] * inv;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Upsample2x { x } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let ty = upsample_taps(h);
                let tx = upsample_taps(w);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    let plane = &mut dx[ci * h * w..][..h * w];
                    for (oy, &(ya, yb, wa, wb)) in ty.iter().enumerate() {
                        for (ox, &(xa, xb, va, vb)) in tx.iter().enumerate() {
                            let gv = g[(ci * 2 * h + oy) * 2 * w + ox];
                            plane[ya * w + xa] += gv * wa * va;
                            plane[ya * w + xb] += gv * wa * vb;
                            plane[yb * w + xa] += gv * wb * va;
                            plane[yb * w + xb] += gv * wb * vb;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Relu { x } => {
                let xd = &self.value(*x).data;
                out.push((
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                let n = g.len() / dout;
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, g, false, &self.value(*w).data, false, &mut dx, 0.0);
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, n, din, g, true, &self.value(*x).data, false, &mut dw, 0.0);
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; dout];
                        for row in g.chunks_exact(dout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        out.push((*b, db));
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let shape = &node.value.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let block = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            dv.extend_from_slice(&g[o * total + offset..o * total + offset + block]);
                        }
                        out.push((v, dv));
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.value.shape[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, dx));
            }
            Op::Transpose { x } => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                out.push((*x, dx));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Bilinear { map, coords } => {
                let ms = self.shape(*map);
                let (c, h, w) = (ms[0], ms[1], ms[2]);
                let md = &self.value(*map).data;
                let cd = &self.value(*coords).data;
                let n = cd.len() / 2;
                let mut dmap = if self.wants(*map) {
                    Some(vec![0.0; c * h * w])
                } else {
                    None
                };
                let mut dcoords = vec![0.0; 2 * n];
                for q in 0..n {
                    let (x0, fx) = bilinear_cell(cd[2 * q], w);
                    let (y0, fy) = bilinear_cell(cd[2 * q + 1], h);
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    for ci in 0..c {
                        let gv = g[q * c + ci];
                        let p = &md[ci * h * w..];
                        let (v00, v01, v10, v11) =
                            (p[y0 * w + x0], p[y0 * w + x1], p[y1 * w + x0], p[y1 * w + x1]);
                        if w > 1 {
                            dcoords[2 * q] += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                        }
                        if h > 1 {
                            dcoords[2 * q + 1] += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                        if let Some(dm) = &mut dmap {
                            let pl = &mut dm[ci * h * w..];
                            pl[y0 * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                            pl[y0 * w + x1] += gv * fx * (1.0 - fy);
                            pl[y1 * w + x0] += gv * (1.0 - fx) * fy;
                            pl[y1 * w + x1] += gv * fx * fy;
                        }
                    }
                }
                if let Some(dm) = dmap {
                    out.push((*map, dm));
                }
                if self.wants(*coords) {
                    out.push((*coords, dcoords));
                }
            }
            Op::Exp { x } => out.push((
                *x,
                g.iter().zip(&node.value.data).map(|(g, y)| g * y).collect(),
            )),
            Op::MulConst { x, k } => out.push((
                *x,
                g.iter()
                    .enumerate()
                    .map(|(i, g)| g * k[i % k.len()])
                    .collect(),
            )),
            Op::Add { a, b } => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Scale { x, k } => out.push((*x, g.iter().map(|v| v * k).collect())),
            Op::Sum { x } => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Affine { x, a, rows_out } => {
                let xs = self.shape(*x);
                let k = xs[1];
                let r = node.value.shape[1];
                let mut dx = vec![0.0; xs[0] * k];
                for i in 0..*rows_out {
                    let xi = if xs[0] == 1 { 0 } else { i };
                    for j in 0..r {
                        let gv = g[i * r + j];
                        for q in 0..k {
                            dx[xi * k + q] += gv * a[(i * r + j) * k + q];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::BoxLoss { pred, jac } => out.push((*pred, jac.iter().map(|j| j * g[0]).collect())),
        }
        out
    }

    /// Gradients of every loaded parameter after `backward`, by name.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&[f64]>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.as_str(), self.nodes[v.0].grad.as_deref()))
    }

    /// Adds this graph's parameter gradients into `ps`.
    pub fn accumulate_param_grads(&self, ps: &mut ParamSet) -> Result<()> {
        for (name, g) in self.param_grads() {
            let Some(g) = g else { continue };
            let t = ps.get_mut(name)?;
            let acc = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, d) in acc.iter_mut().zip(g) {
                *a += d;
            }
        }
        Ok(())
    }
}
