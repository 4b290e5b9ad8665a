//! Forward kernels, recording methods, and the backward dispatch.
//!
//! Elementwise ops require exactly equal shapes; there is no broadcasting.
//! Convolutions use zero padding and produce "same"-sized outputs (modulo
//! stride). All kernels are pure functions of their inputs, so repeated
//! forward passes are bit-identical.

use std::sync::Arc;

use super::{accumulate, numel_of, DiffTensor, Node, Op, Tape};
use crate::error::{param_err, shape_err, Result};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    let phi = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi + x * pdf
}

fn softplus_val(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(op: &'static str, a: &DiffTensor, b: &DiffTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Expects rank-3 `C x H x W` and returns the extents.
fn dims3(op: &'static str, t: &DiffTensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(shape_err(op, format!("expected rank 3, got {:?}", other))),
    }
}

fn dims2(op: &'static str, t: &DiffTensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(op, format!("expected rank 2, got {:?}", other))),
    }
}

impl Tape {
    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: &DiffTensor,
        b: &DiffTensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<DiffTensor> {
        same_shape(name, a, b)?;
        let ai = self.intern(a)?;
        let bi = self.intern(b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(ai) || self.needs(bi);
        self.record(name, a.shape().to_vec(), data, op(ai, bi), needs)
    }

    pub fn add(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product (the gating `⊗`).
    pub fn mul(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: &DiffTensor, s: f64) -> Result<DiffTensor> {
        let xi = self.intern(x)?;
        let data = x.data().iter().map(|&v| v * s).collect();
        let needs = self.needs(xi);
        self.record("scale", x.shape().to_vec(), data, Op::Scale(xi, s), needs)
    }

    pub fn abs(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let xi = self.intern(x)?;
        let data = x.data().iter().map(|&v| v.abs()).collect();
        let needs = self.needs(xi);
        self.record("abs", x.shape().to_vec(), data, Op::Abs(xi), needs)
    }

    /// `M x K` times `K x N`.
    pub fn matmul(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        let (m, ka) = dims2("matmul", a)?;
        let (kb, n) = dims2("matmul", b)?;
        if ka != kb {
            return Err(shape_err(
                "matmul",
                format!("inner extents differ: {} vs {}", ka, kb),
            ));
        }
        let ai = self.intern(a)?;
        let bi = self.intern(b)?;
        let mut out = vec![0.0; m * n];
        matmul_kernel(a.data(), b.data(), &mut out, m, ka, n);
        let needs = self.needs(ai) || self.needs(bi);
        self.record("matmul", vec![m, n], out, Op::Matmul(ai, bi), needs)
    }

    /// Per-channel "same" cross-correlation with odd kernel size and the
    /// given dilation. No channel mixing.
    pub fn depthwise_conv2d(
        &mut self,
        x: &DiffTensor,
        kernel: &DiffTensor,
        dilation: usize,
    ) -> Result<DiffTensor> {
        let (c, h, w) = dims3("depthwise_conv2d", x)?;
        let (kc, kh, kw) = dims3("depthwise_conv2d", kernel)?;
        if kc != c || kh != kw {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("kernel {:?} does not match input {:?}", kernel.shape(), x.shape()),
            ));
        }
        if kh % 2 == 0 {
            return Err(param_err("depthwise_conv2d", "kernel size must be odd"));
        }
        if dilation == 0 {
            return Err(param_err("depthwise_conv2d", "dilation must be positive"));
        }
        let xi = self.intern(x)?;
        let ki = self.intern(kernel)?;
        let mut out = vec![0.0; c * h * w];
        depthwise_forward(x.data(), kernel.data(), &mut out, c, h, w, kh, dilation);
        let needs = self.needs(xi) || self.needs(ki);
        self.record(
            "depthwise_conv2d",
            vec![c, h, w],
            out,
            Op::DepthwiseConv {
                x: xi,
                k: ki,
                dilation,
            },
            needs,
        )
    }

    /// 1x1 convolution across channels; stride `s` samples every s-th
    /// row/column starting at index 0.
    pub fn pointwise_conv(
        &mut self,
        x: &DiffTensor,
        w: &DiffTensor,
        stride: usize,
    ) -> Result<DiffTensor> {
        let (cin, h, wd) = dims3("pointwise_conv", x)?;
        let (cout, wcin) = dims2("pointwise_conv", w)?;
        if wcin != cin {
            return Err(shape_err(
                "pointwise_conv",
                format!("weight expects {} channels, input has {}", wcin, cin),
            ));
        }
        if stride < 1 {
            return Err(param_err("pointwise_conv", "stride must be >= 1"));
        }
        let xi = self.intern(x)?;
        let wi = self.intern(w)?;
        let ho = h.div_ceil(stride);
        let wo = wd.div_ceil(stride);
        let mut out = vec![0.0; cout * ho * wo];
        pointwise_forward(x.data(), w.data(), &mut out, cin, cout, h, wd, stride);
        let needs = self.needs(xi) || self.needs(wi);
        self.record(
            "pointwise_conv",
            vec![cout, ho, wo],
            out,
            Op::PointwiseConv {
                x: xi,
                w: wi,
                stride,
            },
            needs,
        )
    }

    fn unary_elementwise(
        &mut self,
        name: &'static str,
        x: &DiffTensor,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<DiffTensor> {
        let xi = self.intern(x)?;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let needs = self.needs(xi);
        self.record(name, x.shape().to_vec(), data, op(xi), needs)
    }

    pub fn silu(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        self.unary_elementwise("silu", x, |v| v * sigmoid(v), Op::Silu)
    }

    /// Exact Gaussian-CDF GELU.
    pub fn gelu(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        self.unary_elementwise("gelu", x, gelu_val, Op::Gelu)
    }

    pub fn softplus(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        self.unary_elementwise("softplus", x, softplus_val, Op::Softplus)
    }

    /// Normalizes across the channel axis per spatial location, then applies
    /// per-channel gain and bias.
    pub fn layer_norm(
        &mut self,
        x: &DiffTensor,
        gain: &DiffTensor,
        bias: &DiffTensor,
        eps: f64,
    ) -> Result<DiffTensor> {
        let (c, h, w) = dims3("layer_norm", x)?;
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must be [{}]",
                    gain.shape(),
                    bias.shape(),
                    c
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(param_err("layer_norm", "eps must be positive"));
        }
        let xi = self.intern(x)?;
        let gi = self.intern(gain)?;
        let bi = self.intern(bias)?;
        let hw = h * w;
        let xd = x.data();
        let gd = gain.data();
        let bd = bias.data();
        let mut mean = vec![0.0; hw];
        let mut rstd = vec![0.0; hw];
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let mut m = 0.0;
            for ch in 0..c {
                m += xd[ch * hw + p];
            }
            m /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = xd[ch * hw + p] - m;
                var += d * d;
            }
            var /= c as f64;
            let r = 1.0 / (var + eps).sqrt();
            mean[p] = m;
            rstd[p] = r;
            for ch in 0..c {
                out[ch * hw + p] = (xd[ch * hw + p] - m) * r * gd[ch] + bd[ch];
            }
        }
        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        self.record(
            "layer_norm",
            vec![c, h, w],
            out,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                mean,
                rstd,
            },
            needs,
        )
    }

    /// Concatenates along axis 0; trailing extents must match.
    pub fn channel_concat(&mut self, xs: &[&DiffTensor]) -> Result<DiffTensor> {
        if xs.is_empty() {
            return Err(param_err("channel_concat", "needs at least one input"));
        }
        let trailing = &xs[0].shape()[1..];
        for x in xs {
            if x.shape().is_empty() || &x.shape()[1..] != trailing {
                return Err(shape_err(
                    "channel_concat",
                    format!("incompatible shapes {:?} vs {:?}", xs[0].shape(), x.shape()),
                ));
            }
        }
        let total: usize = xs.iter().map(|x| x.shape()[0]).sum();
        let mut shape = vec![total];
        shape.extend_from_slice(trailing);
        let mut data = Vec::with_capacity(numel_of(&shape));
        for x in xs {
            data.extend_from_slice(x.data());
        }
        let mut idxs = Vec::with_capacity(xs.len());
        let mut needs = false;
        for x in xs {
            let i = self.intern(x)?;
            needs |= self.needs(i);
            idxs.push(i);
        }
        self.record(
            "channel_concat",
            shape,
            data,
            Op::ConcatAxis0(idxs),
            needs,
        )
    }

    /// Splits along axis 0 into pieces of the given extents.
    pub fn channel_split(&mut self, x: &DiffTensor, extents: &[usize]) -> Result<Vec<DiffTensor>> {
        if x.shape().is_empty() {
            return Err(shape_err("channel_split", "input must have rank >= 1"));
        }
        if extents.contains(&0) {
            return Err(shape_err("channel_split", "extents must be positive"));
        }
        let c = x.shape()[0];
        if extents.iter().sum::<usize>() != c {
            return Err(shape_err(
                "channel_split",
                format!("extents {:?} do not sum to {}", extents, c),
            ));
        }
        let xi = self.intern(x)?;
        let needs = self.needs(xi);
        let inner: usize = x.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(extents.len());
        let mut start = 0;
        for &len in extents {
            let mut shape = vec![len];
            shape.extend_from_slice(&x.shape()[1..]);
            let data = x.data()[start * inner..(start + len) * inner].to_vec();
            out.push(self.record(
                "channel_split",
                shape,
                data,
                Op::SliceAxis0 {
                    x: xi,
                    start,
                    len,
                },
                needs,
            )?);
            start += len;
        }
        Ok(out)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let xi = self.intern(x)?;
        let s: f64 = x.data().iter().sum();
        let needs = self.needs(xi);
        self.record("sum", Vec::new(), vec![s], Op::Sum(xi), needs)
    }

    /// Maximum along `axis` with winning indices; ties keep the lowest
    /// index. Gradient flows only to the winning elements.
    pub fn reduce_max_arg(
        &mut self,
        x: &DiffTensor,
        axis: usize,
    ) -> Result<(DiffTensor, Vec<usize>)> {
        let rank = x.shape().len();
        if axis >= rank {
            return Err(param_err(
                "reduce_max_arg",
                format!("axis {} out of range for rank {}", axis, rank),
            ));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let len = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let xd = x.data();
        let mut vals = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = xd[o * len * inner + i];
                let mut bi = 0;
                for l in 1..len {
                    let v = xd[(o * len + l) * inner + i];
                    if v > best {
                        best = v;
                        bi = l;
                    }
                }
                vals[o * inner + i] = best;
                arg[o * inner + i] = bi;
            }
        }
        let xi = self.intern(x)?;
        let needs = self.needs(xi);
        let t = self.record(
            "reduce_max_arg",
            shape,
            vals,
            Op::ReduceMax {
                x: xi,
                axis,
                arg: arg.clone(),
            },
            needs,
        )?;
        Ok((t, arg))
    }

    /// Gathers rows of an `N x D` matrix. Backward scatter-adds.
    pub fn gather_rows(&mut self, x: &DiffTensor, idx: &[usize]) -> Result<DiffTensor> {
        let (n, d) = dims2("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(param_err(
                "gather_rows",
                format!("row index {} out of range for {} rows", bad, n),
            ));
        }
        let xi = self.intern(x)?;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            data.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
        }
        let needs = self.needs(xi);
        self.record(
            "gather_rows",
            vec![idx.len(), d],
            data,
            Op::GatherRows {
                x: xi,
                idx: Arc::new(idx.to_vec()),
            },
            needs,
        )
    }

    /// Concatenates two matrices with equal row counts along the feature
    /// axis: `N x A` and `N x B` to `N x (A+B)`.
    pub fn row_concat(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        let (na, da) = dims2("row_concat", a)?;
        let (nb, db) = dims2("row_concat", b)?;
        if na != nb {
            return Err(shape_err(
                "row_concat",
                format!("row counts differ: {} vs {}", na, nb),
            ));
        }
        let ai = self.intern(a)?;
        let bi = self.intern(b)?;
        let mut data = Vec::with_capacity(na * (da + db));
        for r in 0..na {
            data.extend_from_slice(&a.data()[r * da..(r + 1) * da]);
            data.extend_from_slice(&b.data()[r * db..(r + 1) * db]);
        }
        let needs = self.needs(ai) || self.needs(bi);
        self.record(
            "row_concat",
            vec![na, da + db],
            data,
            Op::RowConcat(ai, bi),
            needs,
        )
    }

    fn segment_prep(
        &mut self,
        name: &'static str,
        x: &DiffTensor,
        group: usize,
    ) -> Result<(usize, usize, usize)> {
        let (m, d) = dims2(name, x)?;
        if group == 0 || m % group != 0 {
            return Err(param_err(
                name,
                format!("group size {} does not divide {} rows", group, m),
            ));
        }
        Ok((m / group, group, d))
    }

    /// Per-column max over consecutive row groups of size `group`; ties keep
    /// the lowest row.
    pub fn segment_max(&mut self, x: &DiffTensor, group: usize) -> Result<DiffTensor> {
        let (n, g, d) = self.segment_prep("segment_max", x, group)?;
        let xd = x.data();
        let mut vals = vec![0.0; n * d];
        let mut arg = vec![0usize; n * d];
        for s in 0..n {
            for j in 0..d {
                let mut best = xd[(s * g) * d + j];
                let mut br = s * g;
                for r in (s * g + 1)..((s + 1) * g) {
                    let v = xd[r * d + j];
                    if v > best {
                        best = v;
                        br = r;
                    }
                }
                vals[s * d + j] = best;
                arg[s * d + j] = br;
            }
        }
        let xi = self.intern(x)?;
        let needs = self.needs(xi);
        self.record(
            "segment_max",
            vec![n, d],
            vals,
            Op::SegmentMax { x: xi, arg },
            needs,
        )
    }

    pub fn segment_mean(&mut self, x: &DiffTensor, group: usize) -> Result<DiffTensor> {
        let (n, g, d) = self.segment_prep("segment_mean", x, group)?;
        let xd = x.data();
        let mut vals = vec![0.0; n * d];
        for s in 0..n {
            for r in (s * g)..((s + 1) * g) {
                for j in 0..d {
                    vals[s * d + j] += xd[r * d + j];
                }
            }
            for j in 0..d {
                vals[s * d + j] /= g as f64;
            }
        }
        let xi = self.intern(x)?;
        let needs = self.needs(xi);
        self.record(
            "segment_mean",
            vec![n, d],
            vals,
            Op::SegmentMean { x: xi, group },
            needs,
        )
    }

    pub fn segment_sum(&mut self, x: &DiffTensor, group: usize) -> Result<DiffTensor> {
        let (n, g, d) = self.segment_prep("segment_sum", x, group)?;
        let xd = x.data();
        let mut vals = vec![0.0; n * d];
        for s in 0..n {
            for r in (s * g)..((s + 1) * g) {
                for j in 0..d {
                    vals[s * d + j] += xd[r * d + j];
                }
            }
        }
        let xi = self.intern(x)?;
        let needs = self.needs(xi);
        self.record(
            "segment_sum",
            vec![n, d],
            vals,
            Op::SegmentSum { x: xi, group },
            needs,
        )
    }

    /// Partitions `C x H x W` into non-overlapping `patch x patch` tiles and
    /// flattens each tile channel-major into one row of an `N x D` matrix,
    /// `N = (H/p)(W/p)`, `D = C p^2`. Rows are in row-major tile order.
    pub fn patchify(&mut self, x: &DiffTensor, patch: usize) -> Result<DiffTensor> {
        let (c, h, w) = dims3("patchify", x)?;
        if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
            return Err(shape_err(
                "patchify",
                format!("spatial extents {}x{} not divisible by patch {}", h, w, patch),
            ));
        }
        let (gh, gw) = (h / patch, w / patch);
        let (n, d) = (gh * gw, c * patch * patch);
        let xd = x.data();
        let mut data = vec![0.0; n * d];
        for (vi, row) in data.chunks_exact_mut(d).enumerate() {
            let (pr, pc) = (vi / gw, vi % gw);
            let mut col = 0;
            for ch in 0..c {
                for u in 0..patch {
                    for v in 0..patch {
                        row[col] = xd[ch * h * w + (pr * patch + u) * w + (pc * patch + v)];
                        col += 1;
                    }
                }
            }
        }
        let xi = self.intern(x)?;
        let needs = self.needs(xi);
        self.record(
            "patchify",
            vec![n, d],
            data,
            Op::Patchify { x: xi, patch },
            needs,
        )
    }

    /// Inverse of [`Tape::patchify`].
    pub fn unpatchify(
        &mut self,
        x: &DiffTensor,
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
    ) -> Result<DiffTensor> {
        let (n, d) = dims2("unpatchify", x)?;
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(shape_err("unpatchify", "extents not divisible by patch"));
        }
        let (gh, gw) = (height / patch, width / patch);
        if n != gh * gw || d != channels * patch * patch {
            return Err(shape_err(
                "unpatchify",
                format!("{}x{} rows cannot fill {}x{}x{}", n, d, channels, height, width),
            ));
        }
        let xd = x.data();
        let mut data = vec![0.0; channels * height * width];
        for vi in 0..n {
            let (pr, pc) = (vi / gw, vi % gw);
            let row = &xd[vi * d..(vi + 1) * d];
            let mut col = 0;
            for ch in 0..channels {
                for u in 0..patch {
                    for v in 0..patch {
                        data[ch * height * width + (pr * patch + u) * width + (pc * patch + v)] =
                            row[col];
                        col += 1;
                    }
                }
            }
        }
        let xi = self.intern(x)?;
        let needs = self.needs(xi);
        self.record(
            "unpatchify",
            vec![channels, height, width],
            data,
            Op::Unpatchify {
                x: xi,
                channels,
                height,
                width,
                patch,
            },
            needs,
        )
    }

    /// Lays out an `N x D` vertex matrix as a `D x gh x gw` grid with vertex
    /// `i` at grid position `(i / gw, i % gw)`.
    pub fn rows_to_grid(&mut self, x: &DiffTensor, gh: usize, gw: usize) -> Result<DiffTensor> {
        let (n, d) = dims2("rows_to_grid", x)?;
        if n != gh * gw {
            return Err(shape_err(
                "rows_to_grid",
                format!("{} rows cannot fill {}x{} grid", n, gh, gw),
            ));
        }
        let xd = x.data();
        let mut data = vec![0.0; d * n];
        for vi in 0..n {
            for j in 0..d {
                data[j * n + vi] = xd[vi * d + j];
            }
        }
        let xi = self.intern(x)?;
        let needs = self.needs(xi);
        self.record(
            "rows_to_grid",
            vec![d, gh, gw],
            data,
            Op::RowsToGrid(xi),
            needs,
        )
    }

    /// Inverse of [`Tape::rows_to_grid`].
    pub fn grid_to_rows(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let (d, gh, gw) = dims3("grid_to_rows", x)?;
        let n = gh * gw;
        let xd = x.data();
        let mut data = vec![0.0; n * d];
        for vi in 0..n {
            for j in 0..d {
                data[vi * d + j] = xd[j * n + vi];
            }
        }
        let xi = self.intern(x)?;
        let needs = self.needs(xi);
        self.record("grid_to_rows", vec![n, d], data, Op::GridToRows(xi), needs)
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let (c, h, w) = dims3("upsample_nearest2", x)?;
        let xd = x.data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    data[ch * h2 * w2 + i * w2 + j] = xd[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let xi = self.intern(x)?;
        let needs = self.needs(xi);
        self.record(
            "upsample_nearest2",
            vec![c, h2, w2],
            data,
            Op::UpsampleNearest2(xi),
            needs,
        )
    }

    /// Softmax across the channel axis per spatial location.
    pub fn channel_softmax(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let (c, h, w) = dims3("channel_softmax", x)?;
        let hw = h * w;
        let xd = x.data();
        let mut data = vec![0.0; c * hw];
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(xd[ch * hw + p]);
            }
            let mut s = 0.0;
            for ch in 0..c {
                let e = (xd[ch * hw + p] - m).exp();
                data[ch * hw + p] = e;
                s += e;
            }
            for ch in 0..c {
                data[ch * hw + p] /= s;
            }
        }
        let xi = self.intern(x)?;
        let needs = self.needs(xi);
        self.record(
            "channel_softmax",
            vec![c, h, w],
            data,
            Op::ChannelSoftmax(xi),
            needs,
        )
    }

    /// Same data, new shape (element counts must match).
    pub fn reshape(&mut self, x: &DiffTensor, shape: &[usize]) -> Result<DiffTensor> {
        if numel_of(shape) != x.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} cannot hold {} elements", shape, x.numel()),
            ));
        }
        let xi = self.intern(x)?;
        let needs = self.needs(xi);
        self.record(
            "reshape",
            shape.to_vec(),
            x.data().to_vec(),
            Op::Reshape(xi),
            needs,
        )
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_forward(
    x: &[f64],
    k: &[f64],
    out: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    ksz: usize,
    dil: usize,
) {
    let half = (ksz / 2) * dil;
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let kc = &k[ch * ksz * ksz..(ch + 1) * ksz * ksz];
        let oc = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for u in 0..ksz {
                    let pi = i as isize + (u * dil) as isize - half as isize;
                    if pi < 0 || pi >= h as isize {
                        continue;
                    }
                    for v in 0..ksz {
                        let pj = j as isize + (v * dil) as isize - half as isize;
                        if pj < 0 || pj >= w as isize {
                            continue;
                        }
                        acc += kc[u * ksz + v] * xc[pi as usize * w + pj as usize];
                    }
                }
                oc[i * w + j] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pointwise_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    stride: usize,
) {
    let ho = h.div_ceil(stride);
    let wo = wd.div_ceil(stride);
    for o in 0..cout {
        let wrow = &w[o * cin..(o + 1) * cin];
        let orow = &mut out[o * ho * wo..(o + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                let base = (i * stride) * wd + j * stride;
                for (ci, &wv) in wrow.iter().enumerate() {
                    acc += wv * x[ci * h * wd + base];
                }
                orow[i * wo + j] = acc;
            }
        }
    }
}

/// Scatters `gout` for node `idx` into its inputs' gradient slots.
pub(crate) fn backprop(nodes: &[Node], idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    let numel = |i: usize| nodes[i].data.len();
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            for &(i, _) in [(*a, 0), (*b, 1)].iter() {
                if nodes[i].needs_grad {
                    let g = accumulate(grads, i, numel(i));
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if nodes[*a].needs_grad {
                let g = accumulate(grads, *a, numel(*a));
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
            if nodes[*b].needs_grad {
                let g = accumulate(grads, *b, numel(*b));
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi -= go;
                }
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].needs_grad {
                let bd = Arc::clone(&nodes[*b].data);
                let g = accumulate(grads, *a, numel(*a));
                for ((gi, &go), &bv) in g.iter_mut().zip(gout).zip(bd.iter()) {
                    *gi += go * bv;
                }
            }
            if nodes[*b].needs_grad {
                let ad = Arc::clone(&nodes[*a].data);
                let g = accumulate(grads, *b, numel(*b));
                for ((gi, &go), &av) in g.iter_mut().zip(gout).zip(ad.iter()) {
                    *gi += go * av;
                }
            }
        }
        Op::Scale(x, s) => {
            if nodes[*x].needs_grad {
                let g = accumulate(grads, *x, numel(*x));
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go * s;
                }
            }
        }
        Op::Abs(x) => {
            if nodes[*x].needs_grad {
                let xd = Arc::clone(&nodes[*x].data);
                let g = accumulate(grads, *x, numel(*x));
                for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(xd.iter()) {
                    *gi += go * xv.signum() * (xv != 0.0) as u8 as f64;
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if nodes[*a].needs_grad {
                let bd = Arc::clone(&nodes[*b].data);
                let ga = accumulate(grads, *a, m * k);
                // dA = dC * B^T
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        let brow = &bd[p * n..(p + 1) * n];
                        let grow = &gout[i * n..(i + 1) * n];
                        for (&gv, &bv) in grow.iter().zip(brow) {
                            acc += gv * bv;
                        }
                        ga[i * k + p] += acc;
                    }
                }
            }
            if nodes[*b].needs_grad {
                let ad = Arc::clone(&nodes[*a].data);
                let gb = accumulate(grads, *b, k * n);
                // dB = A^T * dC
                for i in 0..m {
                    let grow = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av != 0.0 {
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (gbv, &gv) in gbrow.iter_mut().zip(grow) {
                                *gbv += av * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::DepthwiseConv { x, k, dilation } => {
            let (c, h, w) = (nodes[*x].shape[0], nodes[*x].shape[1], nodes[*x].shape[2]);
            let ksz = nodes[*k].shape[1];
            let half = (ksz / 2) * dilation;
            if nodes[*x].needs_grad {
                let kd = Arc::clone(&nodes[*k].data);
                let gx = accumulate(grads, *x, c * h * w);
                for ch in 0..c {
                    let kc = &kd[ch * ksz * ksz..(ch + 1) * ksz * ksz];
                    let gxc = &mut gx[ch * h * w..(ch + 1) * h * w];
                    let gc = &gout[ch * h * w..(ch + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            let go = gc[i * w + j];
                            if go == 0.0 {
                                continue;
                            }
                            for u in 0..ksz {
                                let pi = i as isize + (u * dilation) as isize - half as isize;
                                if pi < 0 || pi >= h as isize {
                                    continue;
                                }
                                for v in 0..ksz {
                                    let pj =
                                        j as isize + (v * dilation) as isize - half as isize;
                                    if pj < 0 || pj >= w as isize {
                                        continue;
                                    }
                                    gxc[pi as usize * w + pj as usize] += go * kc[u * ksz + v];
                                }
                            }
                        }
                    }
                }
            }
            if nodes[*k].needs_grad {
                let xd = Arc::clone(&nodes[*x].data);
                let gk = accumulate(grads, *k, c * ksz * ksz);
                for ch in 0..c {
                    let xc = &xd[ch * h * w..(ch + 1) * h * w];
                    let gkc = &mut gk[ch * ksz * ksz..(ch + 1) * ksz * ksz];
                    let gc = &gout[ch * h * w..(ch + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            let go = gc[i * w + j];
                            if go == 0.0 {
                                continue;
                            }
                            for u in 0..ksz {
                                let pi = i as isize + (u * dilation) as isize - half as isize;
                                if pi < 0 || pi >= h as isize {
                                    continue;
                                }
                                for v in 0..ksz {
                                    let pj =
                                        j as isize + (v * dilation) as isize - half as isize;
                                    if pj < 0 || pj >= w as isize {
                                        continue;
                                    }
                                    gkc[u * ksz + v] += go * xc[pi as usize * w + pj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::PointwiseConv { x, w, stride } => {
            let (cin, h, wd) = (nodes[*x].shape[0], nodes[*x].shape[1], nodes[*x].shape[2]);
            let cout = nodes[*w].shape[0];
            let ho = h.div_ceil(*stride);
            let wo = wd.div_ceil(*stride);
            if nodes[*x].needs_grad {
                let wv = Arc::clone(&nodes[*w].data);
                let gx = accumulate(grads, *x, cin * h * wd);
                for o in 0..cout {
                    let wrow = &wv[o * cin..(o + 1) * cin];
                    let gc = &gout[o * ho * wo..(o + 1) * ho * wo];
                    for i in 0..ho {
                        for j in 0..wo {
                            let go = gc[i * wo + j];
                            if go == 0.0 {
                                continue;
                            }
                            let base = (i * stride) * wd + j * stride;
                            for (ci, &wvv) in wrow.iter().enumerate() {
                                gx[ci * h * wd + base] += go * wvv;
                            }
                        }
                    }
                }
            }
            if nodes[*w].needs_grad {
                let xd = Arc::clone(&nodes[*x].data);
                let gw = accumulate(grads, *w, cout * cin);
                for o in 0..cout {
                    let gc = &gout[o * ho * wo..(o + 1) * ho * wo];
                    let gwrow = &mut gw[o * cin..(o + 1) * cin];
                    for i in 0..ho {
                        for j in 0..wo {
                            let go = gc[i * wo + j];
                            if go == 0.0 {
                                continue;
                            }
                            let base = (i * stride) * wd + j * stride;
                            for (ci, gwv) in gwrow.iter_mut().enumerate() {
                                *gwv += go * xd[ci * h * wd + base];
                            }
                        }
                    }
                }
            }
        }
        Op::Silu(x) => {
            if nodes[*x].needs_grad {
                let xd = Arc::clone(&nodes[*x].data);
                let g = accumulate(grads, *x, numel(*x));
                for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(xd.iter()) {
                    let s = sigmoid(xv);
                    *gi += go * s * (1.0 + xv * (1.0 - s));
                }
            }
        }
        Op::Gelu(x) => {
            if nodes[*x].needs_grad {
                let xd = Arc::clone(&nodes[*x].data);
                let g = accumulate(grads, *x, numel(*x));
                for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(xd.iter()) {
                    *gi += go * gelu_deriv(xv);
                }
            }
        }
        Op::Softplus(x) => {
            if nodes[*x].needs_grad {
                let xd = Arc::clone(&nodes[*x].data);
                let g = accumulate(grads, *x, numel(*x));
                for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(xd.iter()) {
                    *gi += go * sigmoid(xv);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let (c, h, w) = (nodes[*x].shape[0], nodes[*x].shape[1], nodes[*x].shape[2]);
            let hw = h * w;
            let xd = Arc::clone(&nodes[*x].data);
            let gd = Arc::clone(&nodes[*gain].data);
            if nodes[*x].needs_grad {
                let gx = accumulate(grads, *x, c * hw);
                for p in 0..hw {
                    let m = mean[p];
                    let r = rstd[p];
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for ch in 0..c {
                        let xhat = (xd[ch * hw + p] - m) * r;
                        let dy = gout[ch * hw + p] * gd[ch];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                    }
                    let inv_c = 1.0 / c as f64;
                    for ch in 0..c {
                        let xhat = (xd[ch * hw + p] - m) * r;
                        let dy = gout[ch * hw + p] * gd[ch];
                        gx[ch * hw + p] +=
                            r * (dy - inv_c * sum_dy - xhat * inv_c * sum_dy_xhat);
                    }
                }
            }
            if nodes[*gain].needs_grad {
                let gg = accumulate(grads, *gain, c);
                for ch in 0..c {
                    let mut acc = 0.0;
                    for p in 0..hw {
                        let xhat = (xd[ch * hw + p] - mean[p]) * rstd[p];
                        acc += gout[ch * hw + p] * xhat;
                    }
                    gg[ch] += acc;
                }
            }
            if nodes[*bias].needs_grad {
                let gb = accumulate(grads, *bias, c);
                for ch in 0..c {
                    gb[ch] += gout[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                }
            }
        }
        Op::ConcatAxis0(inputs) => {
            let mut offset = 0;
            for &i in inputs {
                let len = numel(i);
                if nodes[i].needs_grad {
                    let g = accumulate(grads, i, len);
                    for (gi, &go) in g.iter_mut().zip(&gout[offset..offset + len]) {
                        *gi += go;
                    }
                }
                offset += len;
            }
        }
        Op::SliceAxis0 { x, start, len } => {
            if nodes[*x].needs_grad {
                let inner: usize = nodes[*x].shape[1..].iter().product();
                let g = accumulate(grads, *x, numel(*x));
                let dst = &mut g[start * inner..(start + len) * inner];
                for (gi, &go) in dst.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
        }
        Op::Sum(x) => {
            if nodes[*x].needs_grad {
                let g = accumulate(grads, *x, numel(*x));
                let go = gout[0];
                for gi in g.iter_mut() {
                    *gi += go;
                }
            }
        }
        Op::ReduceMax { x, axis, arg } => {
            if nodes[*x].needs_grad {
                let shape = &nodes[*x].shape;
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let g = accumulate(grads, *x, numel(*x));
                for o in 0..outer {
                    for i in 0..inner {
                        let l = arg[o * inner + i];
                        g[(o * len + l) * inner + i] += gout[o * inner + i];
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            if nodes[*x].needs_grad {
                let d = nodes[*x].shape[1];
                let g = accumulate(grads, *x, numel(*x));
                for (r, &src) in idx.iter().enumerate() {
                    let grow = &mut g[src * d..(src + 1) * d];
                    for (gi, &go) in grow.iter_mut().zip(&gout[r * d..(r + 1) * d]) {
                        *gi += go;
                    }
                }
            }
        }
        Op::RowConcat(a, b) => {
            let (n, da) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let db = nodes[*b].shape[1];
            let d = da + db;
            if nodes[*a].needs_grad {
                let g = accumulate(grads, *a, n * da);
                for r in 0..n {
                    for j in 0..da {
                        g[r * da + j] += gout[r * d + j];
                    }
                }
            }
            if nodes[*b].needs_grad {
                let g = accumulate(grads, *b, n * db);
                for r in 0..n {
                    for j in 0..db {
                        g[r * db + j] += gout[r * d + da + j];
                    }
                }
            }
        }
        Op::SegmentMax { x, arg, .. } => {
            if nodes[*x].needs_grad {
                let d = nodes[*x].shape[1];
                let n = arg.len() / d;
                let g = accumulate(grads, *x, numel(*x));
                for s in 0..n {
                    for j in 0..d {
                        g[arg[s * d + j] * d + j] += gout[s * d + j];
                    }
                }
            }
        }
        Op::SegmentMean { x, group } => {
            if nodes[*x].needs_grad {
                let d = nodes[*x].shape[1];
                let m = nodes[*x].shape[0];
                let inv = 1.0 / *group as f64;
                let g = accumulate(grads, *x, numel(*x));
                for r in 0..m {
                    let s = r / group;
                    for j in 0..d {
                        g[r * d + j] += gout[s * d + j] * inv;
                    }
                }
            }
        }
        Op::SegmentSum { x, group } => {
            if nodes[*x].needs_grad {
                let d = nodes[*x].shape[1];
                let m = nodes[*x].shape[0];
                let g = accumulate(grads, *x, numel(*x));
                for r in 0..m {
                    let s = r / group;
                    for j in 0..d {
                        g[r * d + j] += gout[s * d + j];
                    }
                }
            }
        }
        Op::Patchify { x, patch } => {
            if nodes[*x].needs_grad {
                let (c, h, w) = (nodes[*x].shape[0], nodes[*x].shape[1], nodes[*x].shape[2]);
                let gw_ = w / patch;
                let d = c * patch * patch;
                let g = accumulate(grads, *x, c * h * w);
                for (vi, grow) in gout.chunks_exact(d).enumerate() {
                    let (pr, pc) = (vi / gw_, vi % gw_);
                    let mut col = 0;
                    for ch in 0..c {
                        for u in 0..*patch {
                            for v in 0..*patch {
                                g[ch * h * w + (pr * patch + u) * w + (pc * patch + v)] +=
                                    grow[col];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        Op::Unpatchify {
            x,
            channels,
            height,
            width,
            patch,
        } => {
            if nodes[*x].needs_grad {
                let gw_ = width / patch;
                let d = channels * patch * patch;
                let n = nodes[*x].shape[0];
                let g = accumulate(grads, *x, n * d);
                for vi in 0..n {
                    let (pr, pc) = (vi / gw_, vi % gw_);
                    let grow = &mut g[vi * d..(vi + 1) * d];
                    let mut col = 0;
                    for ch in 0..*channels {
                        for u in 0..*patch {
                            for v in 0..*patch {
                                grow[col] += gout[ch * height * width
                                    + (pr * patch + u) * width
                                    + (pc * patch + v)];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        Op::RowsToGrid(x) => {
            if nodes[*x].needs_grad {
                let (n, d) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                let g = accumulate(grads, *x, n * d);
                for vi in 0..n {
                    for j in 0..d {
                        g[vi * d + j] += gout[j * n + vi];
                    }
                }
            }
        }
        Op::GridToRows(x) => {
            if nodes[*x].needs_grad {
                let (d, gh, gw_) = (
                    nodes[*x].shape[0],
                    nodes[*x].shape[1],
                    nodes[*x].shape[2],
                );
                let n = gh * gw_;
                let g = accumulate(grads, *x, d * n);
                for vi in 0..n {
                    for j in 0..d {
                        g[j * n + vi] += gout[vi * d + j];
                    }
                }
            }
        }
        Op::UpsampleNearest2(x) => {
            if nodes[*x].needs_grad {
                let (c, h, w) = (nodes[*x].shape[0], nodes[*x].shape[1], nodes[*x].shape[2]);
                let (h2, w2) = (2 * h, 2 * w);
                let g = accumulate(grads, *x, c * h * w);
                for ch in 0..c {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            g[ch * h * w + (i / 2) * w + j / 2] +=
                                gout[ch * h2 * w2 + i * w2 + j];
                        }
                    }
                }
            }
        }
        Op::ChannelSoftmax(x) => {
            if nodes[*x].needs_grad {
                let (c, h, w) = (nodes[*x].shape[0], nodes[*x].shape[1], nodes[*x].shape[2]);
                let hw = h * w;
                let yd = Arc::clone(&nodes[idx].data);
                let g = accumulate(grads, *x, c * hw);
                for p in 0..hw {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += gout[ch * hw + p] * yd[ch * hw + p];
                    }
                    for ch in 0..c {
                        let y = yd[ch * hw + p];
                        g[ch * hw + p] += y * (gout[ch * hw + p] - dot);
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if nodes[*x].needs_grad {
                let g = accumulate(grads, *x, numel(*x));
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
        }
    }
}
