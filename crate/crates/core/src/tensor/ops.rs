use super::graph::{Op, Var};
use super::{shape_err, Tensor, TensorError};

/// Index mapping for same-rank broadcasting (size-1 axes stretch) plus rank-0 scalars.
pub(crate) struct Broadcast {
    pub(crate) out_shape: Vec<usize>,
    a_map: Option<Vec<usize>>,
    b_map: Option<Vec<usize>>,
}

impl Broadcast {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<Self, TensorError> {
        if a == b {
            return Ok(Self { out_shape: a.to_vec(), a_map: None, b_map: None });
        }
        let rank = a.len().max(b.len());
        let lift = |s: &[usize]| -> Result<Vec<usize>, TensorError> {
            match s.len() {
                r if r == rank => Ok(s.to_vec()),
                0 => Ok(vec![1; rank]),
                _ => Err(shape_err("broadcast", format!("rank mismatch {a:?} vs {b:?}"))),
            }
        };
        let (la, lb) = (lift(a)?, lift(b)?);
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in la.iter().zip(&lb) {
            out.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return Err(shape_err("broadcast", format!("{a:?} vs {b:?}"))),
            });
        }
        let map = |s: &[usize]| -> Option<Vec<usize>> {
            if s == out.as_slice() {
                return None;
            }
            let total: usize = out.iter().product();
            let mut strides = vec![0; rank];
            let mut acc = 1;
            for ax in (0..rank).rev() {
                strides[ax] = if s[ax] == 1 { 0 } else { acc };
                acc *= s[ax];
            }
            let mut idx = vec![0; rank];
            let mut m = Vec::with_capacity(total);
            let mut off = 0;
            for _ in 0..total {
                m.push(off);
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    off += strides[ax];
                    if idx[ax] < out[ax] {
                        break;
                    }
                    off -= strides[ax] * idx[ax];
                    idx[ax] = 0;
                }
            }
            Some(m)
        };
        let (a_map, b_map) = (map(&la), map(&lb));
        Ok(Self { out_shape: out, a_map, b_map })
    }

    #[inline]
    pub(crate) fn a_index(&self, k: usize) -> usize {
        self.a_map.as_ref().map_or(k, |m| m[k])
    }

    #[inline]
    pub(crate) fn b_index(&self, k: usize) -> usize {
        self.b_map.as_ref().map_or(k, |m| m[k])
    }

    fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn apply(&self, a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..self.numel()).map(|k| f(a[self.a_index(k)], b[self.b_index(k)])).collect()
    }

    pub(crate) fn reduce_a(&self, g: &[f64], len: usize, f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
        let mut acc = vec![0.0; len];
        for (k, &gv) in g.iter().enumerate() {
            acc[self.a_index(k)] += f(k, gv);
        }
        acc
    }

    pub(crate) fn reduce_b(&self, g: &[f64], len: usize, f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
        let mut acc = vec![0.0; len];
        for (k, &gv) in g.iter().enumerate() {
            acc[self.b_index(k)] += f(k, gv);
        }
        acc
    }
}

/// (outer, axis length, inner) for iterating a reduction along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), TensorError> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn keepdim(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

pub(crate) fn permute_values(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = t.numel();
    let src = t.data();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        data.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(out_shape, data).expect("permute preserves size")
}

/// Matrix product over the last two axes; leading axes must agree exactly.
pub(crate) fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    let r = sa.len();
    if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
        return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
    let batch: usize = sa[..r - 2].iter().product();
    let mut out = vec![0.0; batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..batch {
        let a0 = &ad[bi * m * k..(bi + 1) * m * k];
        let b0 = &bd[bi * k * n..(bi + 1) * k * n];
        let o0 = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut o0[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a0[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b0[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    let mut shape = sa[..r - 2].to_vec();
    shape.extend([m, n]);
    Tensor::from_vec(shape, out)
}

/// Dot product with four independent accumulators so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<ConvGeom, TensorError> {
    let (n, c, h, w) = match *x {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(shape_err("conv2d", format!("input must be rank 3 or 4, got {x:?}"))),
    };
    let [o, kc, kh, kw] = *k else {
        return Err(shape_err("conv2d", format!("kernel must be rank 4, got {k:?}")));
    };
    if kc != c {
        return Err(shape_err("conv2d", format!("kernel expects {kc} channels, input has {c}")));
    }
    if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad || kh == 0 || kw == 0 {
        return Err(shape_err(
            "conv2d",
            format!("invalid geometry: {h}x{w} input, {kh}x{kw} kernel, stride {stride}, pad {pad}"),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvGeom { n, c, h, w, o, kh, kw, oh, ow })
}

/// Output columns `ox` whose input column `ox*stride + kj - pad` is in bounds.
#[inline]
fn valid_range(kj: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(stride) };
    // ox*stride + kj - pad <= w - 1
    let hi = if w + pad < kj + 1 { 0 } else { ((w + pad - kj - 1) / stride + 1).min(ow) };
    (lo.min(hi), hi)
}

/// Patch matrix `[c·kh·kw, n·oh·ow]`: row `(ic, ki, kj)` holds, for every output
/// position of every image, the input pixel that kernel tap multiplies (0 in the padding).
fn im2col(xd: &[f64], g: &ConvGeom, stride: usize, pad: usize) -> Vec<f64> {
    let (p, np) = (g.oh * g.ow, g.n * g.oh * g.ow);
    let mut cols = vec![0.0; g.c * g.kh * g.kw * np];
    for ic in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ic * g.kh + ki) * g.kw + kj) * np;
                let (lo, hi) = valid_range(kj, pad, stride, g.w, g.ow);
                for b in 0..g.n {
                    let xbase = (b * g.c + ic) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = xbase + iy as usize * g.w;
                        let dst = row + b * p + oy * g.ow;
                        for ox in lo..hi {
                            cols[dst + ox] = xd[src + ox * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
fn col2im(cols: &[f64], g: &ConvGeom, stride: usize, pad: usize) -> Vec<f64> {
    let (p, np) = (g.oh * g.ow, g.n * g.oh * g.ow);
    let mut gx = vec![0.0; g.n * g.c * g.h * g.w];
    for ic in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ic * g.kh + ki) * g.kw + kj) * np;
                let (lo, hi) = valid_range(kj, pad, stride, g.w, g.ow);
                for b in 0..g.n {
                    let xbase = (b * g.c + ic) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = xbase + iy as usize * g.w;
                        let src = row + b * p + oy * g.ow;
                        for ox in lo..hi {
                            gx[dst + ox * stride + kj - pad] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn conv2d_values(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor, TensorError> {
    let g = conv_geom(x.shape(), k.shape(), stride, pad)?;
    let cols = im2col(x.data(), &g, stride, pad);
    let (taps, p, np) = (g.c * g.kh * g.kw, g.oh * g.ow, g.n * g.oh * g.ow);
    let kd = k.data();
    let mut out = vec![0.0; g.n * g.o * p];
    let mut acc = vec![0.0; np];
    for oc in 0..g.o {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for q in 0..taps {
            let wv = kd[oc * taps + q];
            if wv == 0.0 {
                continue;
            }
            for (a, c) in acc.iter_mut().zip(&cols[q * np..(q + 1) * np]) {
                *a += wv * c;
            }
        }
        for b in 0..g.n {
            out[(b * g.o + oc) * p..(b * g.o + oc + 1) * p].copy_from_slice(&acc[b * p..(b + 1) * p]);
        }
    }
    let shape = if x.rank() == 3 { vec![g.o, g.oh, g.ow] } else { vec![g.n, g.o, g.oh, g.ow] };
    Tensor::from_vec(shape, out)
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    grad: &[f64],
    stride: usize,
    pad: usize,
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let g = conv_geom(x.shape(), k.shape(), stride, pad).expect("checked in forward");
    let (taps, p, np) = (g.c * g.kh * g.kw, g.oh * g.ow, g.n * g.oh * g.ow);
    // Output gradient regrouped as [o, n·oh·ow] to match the patch matrix.
    let mut gy = vec![0.0; g.o * np];
    for b in 0..g.n {
        for oc in 0..g.o {
            gy[oc * np + b * p..oc * np + (b + 1) * p].copy_from_slice(&grad[(b * g.o + oc) * p..(b * g.o + oc + 1) * p]);
        }
    }
    let gk = need_k.then(|| {
        let cols = im2col(x.data(), &g, stride, pad);
        let mut gk = vec![0.0; g.o * taps];
        for oc in 0..g.o {
            let gyr = &gy[oc * np..(oc + 1) * np];
            for q in 0..taps {
                gk[oc * taps + q] = dot(gyr, &cols[q * np..(q + 1) * np]);
            }
        }
        gk
    });
    let gx = need_x.then(|| {
        let kd = k.data();
        let mut gcols = vec![0.0; taps * np];
        for q in 0..taps {
            let dst = &mut gcols[q * np..(q + 1) * np];
            for oc in 0..g.o {
                let wv = kd[oc * taps + q];
                if wv == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(&gy[oc * np..(oc + 1) * np]) {
                    *d += wv * s;
                }
            }
        }
        col2im(&gcols, &g, stride, pad)
    });
    (gx, gk)
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the convention used for running estimates.
    pub var: Vec<f64>,
}

impl<'g> Var<'g> {
    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'g>, TensorError> {
        let t = self.value().map(f);
        self.graph.push(t, op)
    }

    fn binary(
        self,
        other: Var<'g>,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>, TensorError> {
        self.graph.check(other)?;
        let t = {
            let (a, b) = (self.value(), other.value());
            let bc = Broadcast::new(a.shape(), b.shape())?;
            Tensor::from_vec(bc.out_shape.clone(), bc.apply(a.data(), b.data(), f))?
        };
        self.graph.push(t, op(self.id, other.id))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        if other.value().data().contains(&0.0) {
            return Err(TensorError::Domain { op: "div", detail: "division by zero".into() });
        }
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>, TensorError> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn neg(self) -> Result<Var<'g>, TensorError> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>, TensorError> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn exp(self) -> Result<Var<'g>, TensorError> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Result<Var<'g>, TensorError> {
        if let Some(v) = self.value().data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain { op: "log", detail: format!("log of {v}") });
        }
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Result<Var<'g>, TensorError> {
        if let Some(v) = self.value().data().iter().find(|&&v| v < 0.0) {
            return Err(TensorError::Domain { op: "sqrt", detail: format!("sqrt of {v}") });
        }
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn relu(self) -> Result<Var<'g>, TensorError> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn max_with_scalar(self, c: f64) -> Result<Var<'g>, TensorError> {
        self.unary(Op::MaxScalar(self.id, c), |v| v.max(c))
    }

    pub fn sum(self) -> Result<Var<'g>, TensorError> {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'g>, TensorError> {
        let s = {
            let v = self.value();
            v.sum() / v.numel() as f64
        };
        self.graph.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    fn reduce_axis(
        self,
        axis: usize,
        name: &'static str,
        op: Op,
        f: impl Fn(&mut dyn Iterator<Item = f64>, usize) -> f64,
    ) -> Result<Var<'g>, TensorError> {
        let t = {
            let v = self.value();
            check_axis(name, v.shape(), axis)?;
            let (outer, n, inner) = axis_split(v.shape(), axis);
            let d = v.data();
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut it = (0..n).map(|k| d[(o * n + k) * inner + i]);
                    out.push(f(&mut it, n));
                }
            }
            Tensor::from_vec(keepdim(v.shape(), axis), out)?
        };
        self.graph.push(t, op)
    }

    /// Sum along `axis`, keeping it as size 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>, TensorError> {
        self.reduce_axis(axis, "sum_axis", Op::SumAxis(self.id, axis), |it, _| it.sum())
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>, TensorError> {
        self.reduce_axis(axis, "mean_axis", Op::MeanAxis(self.id, axis), |it, n| {
            it.sum::<f64>() / n as f64
        })
    }

    /// Unbiased variance along `axis`, keeping it as size 1.
    pub fn variance_axis(self, axis: usize) -> Result<Var<'g>, TensorError> {
        let n = self.value().shape().get(axis).copied().unwrap_or(0);
        if n < 2 {
            return Err(TensorError::BatchSize { op: "variance_axis", rows: n });
        }
        self.reduce_axis(axis, "variance_axis", Op::VarianceAxis(self.id, axis), |it, n| {
            let xs: Vec<f64> = it.collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0)
        })
    }

    pub fn l2_norm_axis(self, axis: usize) -> Result<Var<'g>, TensorError> {
        self.reduce_axis(axis, "l2_norm_axis", Op::L2NormAxis(self.id, axis), |it, _| {
            it.map(|x| x * x).sum::<f64>().sqrt()
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>, TensorError> {
        let t = self.value().reshape(shape)?;
        self.graph.push(t, Op::Reshape(self.id))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>, TensorError> {
        let t = {
            let v = self.value();
            let mut seen = vec![false; v.rank()];
            if perm.len() != v.rank() || perm.iter().any(|&p| p >= v.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(shape_err("permute", format!("{perm:?} is not a permutation of rank {}", v.rank())));
            }
            permute_values(&v, perm)
        };
        self.graph.push(t, Op::Permute(self.id, perm.to_vec()))
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Var<'g>, TensorError> {
        let r = self.value().rank();
        if r < 2 {
            return Err(shape_err("transpose", "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let graph = first.graph;
        let t = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let base = vals[0].shape().to_vec();
            check_axis("concat", &base, axis)?;
            for (p, v) in parts.iter().zip(&vals) {
                graph.check(*p)?;
                let s = v.shape();
                if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(ax, (a, b))| ax != axis && a != b) {
                    return Err(shape_err("concat", format!("{s:?} vs {base:?} along axis {axis}")));
                }
            }
            let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
            let (outer, _, inner) = axis_split(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let n = v.shape()[axis];
                    data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::from_vec(shape, data)?
        };
        graph.push(t, Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>, TensorError> {
        let t = {
            let v = self.value();
            check_axis("slice", v.shape(), axis)?;
            let (outer, n, inner) = axis_split(v.shape(), axis);
            if start + len > n || len == 0 {
                return Err(shape_err("slice", format!("[{start}, {}) out of 0..{n}", start + len)));
            }
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * n + start) * inner;
                data.extend_from_slice(&v.data()[s..s + len * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = len;
            Tensor::from_vec(shape, data)?
        };
        self.graph.push(t, Op::Slice { x: self.id, axis, start })
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.graph.check(other)?;
        let t = matmul_values(&self.value(), &other.value())?;
        self.graph.push(t, Op::MatMul(self.id, other.id))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>, TensorError> {
        let t = {
            let v = self.value();
            check_axis("softmax", v.shape(), axis)?;
            softmax_values(&v, axis, false)
        };
        self.graph.push(t, Op::Softmax(self.id, axis))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'g>, TensorError> {
        let t = {
            let v = self.value();
            check_axis("log_softmax", v.shape(), axis)?;
            softmax_values(&v, axis, true)
        };
        self.graph.push(t, Op::LogSoftmax(self.id, axis))
    }

    /// Direct 2-D convolution. Input is `c×h×w` or `n×c×h×w`, kernels `o×c×kh×kw`.
    pub fn conv2d(self, kernels: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>, TensorError> {
        self.graph.check(kernels)?;
        let t = conv2d_values(&self.value(), &kernels.value(), stride, pad)?;
        self.graph.push(t, Op::Conv2d { x: self.id, w: kernels.id, stride, pad })
    }

    /// Training-mode batch normalization of an `n×d` input with per-column affine `gamma`, `beta` (length d).
    pub fn batchnorm1d(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        eps: f64,
    ) -> Result<(Var<'g>, BatchStats), TensorError> {
        self.graph.check(gamma)?;
        self.graph.check(beta)?;
        let (t, xhat, inv_std, stats) = {
            let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
            let [n, d] = *x.shape() else {
                return Err(shape_err("batchnorm1d", format!("input must be n x d, got {:?}", x.shape())));
            };
            if gm.numel() != d || bt.numel() != d {
                return Err(shape_err("batchnorm1d", "affine parameters must have length d"));
            }
            if n < 2 {
                return Err(TensorError::BatchSize { op: "batchnorm1d", rows: n });
            }
            let xd = x.data();
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for j in 0..d {
                mean[j] = (0..n).map(|r| xd[r * d + j]).sum::<f64>() / n as f64;
                var[j] = (0..n).map(|r| (xd[r * d + j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; n * d];
            let mut out = vec![0.0; n * d];
            for r in 0..n {
                for j in 0..d {
                    let k = r * d + j;
                    xhat[k] = (xd[k] - mean[j]) * inv_std[j];
                    out[k] = gm.data()[j] * xhat[k] + bt.data()[j];
                }
            }
            let unbiased = var.iter().map(|v| v * n as f64 / (n as f64 - 1.0)).collect();
            (Tensor::from_vec(vec![n, d], out)?, xhat, inv_std, BatchStats { mean, var: unbiased })
        };
        let v = self.graph.push(t, Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std })?;
        Ok((v, stats))
    }
}

pub(crate) fn softmax_values(v: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, n, inner) = axis_split(v.shape(), axis);
    let d = v.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..n).map(|k| (d[idx(k)] - max).exp()).sum();
            let lse = max + total.ln();
            for k in 0..n {
                out[idx(k)] = if log { d[idx(k)] - lse } else { (d[idx(k)] - max).exp() / total };
            }
        }
    }
    Tensor::from_vec(v.shape().to_vec(), out).expect("same shape")
}
