//! Convolutions lowered to patch unfolding plus GEMM.
//!
//! The forward pass and both gradients are custom ops that unfold one batch
//! item at a time and hand the products to `matrixmultiply` through ndarray.
//! Everything is expressed in 3D; a 2D input is handled as a depth-1 volume.

use std::ops::AddAssign;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar};

/// Geometry of a 3D sliding window over a `[B, C, D, H, W]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl PatchGeometry {
    pub fn out_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            out[a] = if padded < self.kernel[a] {
                0
            } else {
                (padded - self.kernel[a]) / self.stride[a] + 1
            };
        }
        out
    }

    fn patch_len(&self) -> usize {
        self.kernel.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    channels: usize,
    c_out: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Dims {
    fn rows(&self, geo: &PatchGeometry) -> usize {
        self.channels * geo.patch_len()
    }
    fn positions(&self) -> usize {
        self.output.iter().product()
    }
    fn input_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }
}

/// Walks the unfolded buffer of one batch item one output row at a time.
///
/// For every (patch row, oz, oy) the callback gets the offset of that row of
/// `ow` columns, the valid column range `lo..hi` and, when the row lies inside
/// the input, the input index of column 0 (column `ox` reads `base + ox * sw`).
#[inline(always)]
fn for_each_row(geo: &PatchGeometry, dims: &Dims, mut f: impl FnMut(usize, Option<isize>, usize, usize)) {
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.padding;
    let [id, ih, iw] = dims.input;
    let [od, oh, ow] = dims.output;
    let n_out = od * oh * ow;
    let mut row = 0usize;
    for c in 0..dims.channels {
        let c_base = c * id * ih * iw;
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let lo = if dx >= pw { 0 } else { (pw - dx).div_ceil(sw) }.min(ow);
                    let hi = if iw + pw > dx { ((iw + pw - dx - 1) / sw + 1).min(ow) } else { 0 }.max(lo);
                    let row_base = row * n_out;
                    for oz in 0..od {
                        let z = (oz * sd + dz) as isize - pd as isize;
                        let z_ok = z >= 0 && (z as usize) < id;
                        for oy in 0..oh {
                            let y = (oy * sh + dy) as isize - ph as isize;
                            let col_base = row_base + (oz * oh + oy) * ow;
                            if z_ok && y >= 0 && (y as usize) < ih {
                                let in_row = c_base + (z as usize * ih + y as usize) * iw;
                                f(col_base, Some(in_row as isize + dx as isize - pw as isize), lo, hi);
                            } else {
                                f(col_base, None, 0, 0);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

trait Elem: LinalgScalar + AddAssign {}
impl<T: LinalgScalar + AddAssign> Elem for T {}

fn unfold_into<T: Elem>(src: &[T], cols: &mut [T], geo: &PatchGeometry, dims: &Dims) {
    let (ow, sw) = (dims.output[2], geo.stride[2]);
    for_each_row(geo, dims, |o, base, lo, hi| {
        let dst = &mut cols[o..o + ow];
        let Some(base) = base else {
            dst.fill(T::zero());
            return;
        };
        dst[..lo].fill(T::zero());
        dst[hi..].fill(T::zero());
        let first = (base + (lo * sw) as isize) as usize;
        if sw == 1 {
            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
        } else {
            for (d, s) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(sw)) {
                *d = *s;
            }
        }
    });
}

fn fold_into<T: Elem>(cols: &[T], dst: &mut [T], geo: &PatchGeometry, dims: &Dims) {
    let sw = geo.stride[2];
    for_each_row(geo, dims, |o, base, lo, hi| {
        let Some(base) = base else { return };
        let first = (base + (lo * sw) as isize) as usize;
        for (d, s) in dst[first..].iter_mut().step_by(sw).zip(&cols[o + lo..o + hi]) {
            *d += *s;
        }
    });
}

fn mat<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix shape")
}

fn mat_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix shape")
}

/// `out[b] = W · unfold(x[b]) + bias`
fn forward<T: Elem>(x: &[T], w: &[T], bias: &[T], geo: &PatchGeometry, dims: &Dims) -> Vec<T> {
    let (k, n, per_in) = (dims.rows(geo), dims.positions(), dims.input_len());
    let wm = mat(w, dims.c_out, k);
    let mut cols = vec![T::zero(); k * n];
    let mut out = vec![T::zero(); dims.batch * dims.c_out * n];
    for (b, dst) in out.chunks_mut(dims.c_out * n).enumerate() {
        for (row, &v) in dst.chunks_mut(n).zip(bias) {
            row.fill(v);
        }
        unfold_into(&x[b * per_in..(b + 1) * per_in], &mut cols, geo, dims);
        general_mat_mul(T::one(), &wm, &mat(&cols, k, n), T::one(), &mut mat_mut(dst, dims.c_out, n));
    }
    out
}

/// `db[o] = Σ_b Σ_p g[b, o, p]`
fn bias_grad<T: Elem>(g: &[T], c_out: usize, n: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c_out];
    for (i, row) in g.chunks(n).enumerate() {
        db[i % c_out] += row.iter().fold(T::zero(), |a, &v| a + v);
    }
    db
}

/// `dx[b] = fold(Wᵀ · g[b])`
fn input_grad<T: Elem>(g: &[T], w: &[T], geo: &PatchGeometry, dims: &Dims) -> Vec<T> {
    let (k, n, per_in) = (dims.rows(geo), dims.positions(), dims.input_len());
    let wt = mat(w, dims.c_out, k).reversed_axes();
    let mut cols = vec![T::zero(); k * n];
    let mut dx = vec![T::zero(); dims.batch * per_in];
    for (b, dst) in dx.chunks_mut(per_in).enumerate() {
        let gb = mat(&g[b * dims.c_out * n..(b + 1) * dims.c_out * n], dims.c_out, n);
        general_mat_mul(T::one(), &wt, &gb, T::zero(), &mut mat_mut(&mut cols, k, n));
        fold_into(&cols, dst, geo, dims);
    }
    dx
}

/// `dW = Σ_b g[b] · unfold(x[b])ᵀ`
fn weight_grad<T: Elem>(x: &[T], g: &[T], geo: &PatchGeometry, dims: &Dims) -> Vec<T> {
    let (k, n, per_in) = (dims.rows(geo), dims.positions(), dims.input_len());
    let mut cols = vec![T::zero(); k * n];
    let mut dw = vec![T::zero(); dims.c_out * k];
    for b in 0..dims.batch {
        unfold_into(&x[b * per_in..(b + 1) * per_in], &mut cols, geo, dims);
        let gb = mat(&g[b * dims.c_out * n..(b + 1) * dims.c_out * n], dims.c_out, n);
        general_mat_mul(T::one(), &gb, &mat(&cols, k, n).reversed_axes(), T::one(), &mut mat_mut(&mut dw, dims.c_out, k));
    }
    dw
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("convolution expects contiguous operands"),
    }
}

fn f32_slices<'a>(args: &[(&'a CpuStorage, &'a Layout)]) -> Result<Option<Vec<&'a [f32]>>> {
    let mut out = Vec::with_capacity(args.len());
    for (s, l) in args {
        match s {
            CpuStorage::F32(v) => out.push(contiguous_slice(v, l)?),
            _ => return Ok(None),
        }
    }
    Ok(Some(out))
}

fn f64_slices<'a>(args: &[(&'a CpuStorage, &'a Layout)]) -> Result<Option<Vec<&'a [f64]>>> {
    let mut out = Vec::with_capacity(args.len());
    for (s, l) in args {
        match s {
            CpuStorage::F64(v) => out.push(contiguous_slice(v, l)?),
            _ => return Ok(None),
        }
    }
    Ok(Some(out))
}

/// Applies `f` to storages that all hold the same float dtype.
fn dispatch(
    name: &str,
    args: &[(&CpuStorage, &Layout)],
    f32_fn: impl FnOnce(&[&[f32]]) -> Vec<f32>,
    f64_fn: impl FnOnce(&[&[f64]]) -> Vec<f64>,
) -> Result<CpuStorage> {
    if let Some(v) = f32_slices(args)? {
        return Ok(CpuStorage::F32(f32_fn(&v)));
    }
    if let Some(v) = f64_slices(args)? {
        return Ok(CpuStorage::F64(f64_fn(&v)));
    }
    let dtypes: Vec<_> = args.iter().map(|(s, _)| s.dtype()).collect();
    candle_core::bail!("{name}: unsupported dtypes {dtypes:?}")
}

fn dims_of(geo: &PatchGeometry, x: (usize, usize, usize, usize, usize), c_out: usize) -> Dims {
    let (b, c, d, h, w) = x;
    Dims {
        batch: b,
        channels: c,
        c_out,
        input: [d, h, w],
        output: geo.out_dims([d, h, w]),
    }
}

/// `(x [B,C,D,H,W], W [Cout,C,kd,kh,kw], bias [Cout]) -> [B,Cout,od,oh,ow]`
struct Conv3dOp(PatchGeometry);

/// `(g [B,Cout,od,oh,ow], W) -> dx`
struct ConvInputGrad {
    geo: PatchGeometry,
    input: (usize, usize, usize, usize, usize),
}

/// `(x, g) -> dW`
struct ConvWeightGrad {
    geo: PatchGeometry,
    kernel_shape: Shape,
}

/// `g -> db`
struct ConvBiasGrad;

impl CustomOp3 for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let xd = l1.shape().dims5()?;
        let c_out = l2.shape().dims()[0];
        let dims = dims_of(&self.0, xd, c_out);
        let geo = &self.0;
        let out = dispatch(
            "conv3d",
            &[(s1, l1), (s2, l2), (s3, l3)],
            |a| forward(a[0], a[1], a[2], geo, &dims),
            |a| forward(a[0], a[1], a[2], geo, &dims),
        )?;
        let [od, oh, ow] = dims.output;
        Ok((out, Shape::from((xd.0, c_out, od, oh, ow))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(
            w,
            &ConvInputGrad {
                geo: self.0,
                input: x.dims5()?,
            },
        )?;
        let dw = x.apply_op2_no_bwd(
            &grad,
            &ConvWeightGrad {
                geo: self.0,
                kernel_shape: w.shape().clone(),
            },
        )?;
        let db = grad.apply_op1_no_bwd(&ConvBiasGrad)?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "conv3d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = dims_of(&self.geo, self.input, l2.shape().dims()[0]);
        let geo = &self.geo;
        let out = dispatch(
            "conv3d-input-grad",
            &[(s1, l1), (s2, l2)],
            |a| input_grad(a[0], a[1], geo, &dims),
            |a| input_grad(a[0], a[1], geo, &dims),
        )?;
        Ok((out, Shape::from(self.input)))
    }
}

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "conv3d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = dims_of(&self.geo, l1.shape().dims5()?, l2.shape().dims()[1]);
        let geo = &self.geo;
        let out = dispatch(
            "conv3d-weight-grad",
            &[(s1, l1), (s2, l2)],
            |a| weight_grad(a[0], a[1], geo, &dims),
            |a| weight_grad(a[0], a[1], geo, &dims),
        )?;
        Ok((out, self.kernel_shape.clone()))
    }
}

impl CustomOp1 for ConvBiasGrad {
    fn name(&self) -> &'static str {
        "conv3d-bias-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (_, c_out, d, h, w) = l.shape().dims5()?;
        let n = d * h * w;
        let out = dispatch(
            "conv3d-bias-grad",
            &[(s, l)],
            |a| bias_grad(a[0], c_out, n),
            |a| bias_grad(a[0], c_out, n),
        )?;
        Ok((out, Shape::from(c_out)))
    }
}

/// Largest per-item unfolded buffer (in elements) built in one piece.
const MAX_COLS: usize = 1 << 25;

/// 3D convolution `[B, Cin, D, H, W] * [Cout, Cin, kd, kh, kw]`.
///
/// Large inputs are processed in slabs along depth (or height for 2D input)
/// so the unfolded buffer stays below [`MAX_COLS`] elements.
pub fn conv3d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geo: PatchGeometry) -> Result<Tensor> {
    conv3d_limited(x, weight, bias, geo, MAX_COLS)
}

fn conv3d_limited(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geo: PatchGeometry,
    max_cols: usize,
) -> Result<Tensor> {
    let (_, c, d, h, w) = x.dims5()?;
    let out = geo.out_dims([d, h, w]);
    let total = c * geo.patch_len() * out.iter().product::<usize>();
    let axis = if out[0] > 1 { 0 } else { 1 };
    if total <= max_cols || out[axis] < 2 {
        return conv3d_direct(x, weight, bias, geo);
    }
    let pieces = total.div_ceil(max_cols).min(out[axis]);
    let chunk = out[axis].div_ceil(pieces);
    let (s, k, p) = (geo.stride[axis], geo.kernel[axis], geo.padding[axis]);
    let padded = x.pad_with_zeros(axis + 2, p, p)?;
    let mut inner = geo;
    inner.padding[axis] = 0;
    let mut outs = Vec::with_capacity(pieces);
    let mut o0 = 0;
    while o0 < out[axis] {
        let o1 = (o0 + chunk).min(out[axis]);
        let slab = padded.narrow(axis + 2, o0 * s, (o1 - 1) * s + k - o0 * s)?;
        outs.push(conv3d_direct(&slab, weight, bias, inner)?);
        o0 = o1;
    }
    Tensor::cat(&outs, axis + 2)
}

fn conv3d_direct(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geo: PatchGeometry) -> Result<Tensor> {
    let c_out = weight.dim(0)?;
    if weight.dim(1)? != x.dim(1)? {
        candle_core::bail!("conv3d: input has {} channels, kernel expects {}", x.dim(1)?, weight.dim(1)?);
    }
    let bias = match bias {
        Some(b) => b.contiguous()?,
        None => Tensor::zeros(c_out, weight.dtype(), weight.device())?,
    };
    x.contiguous()?.apply_op3(&weight.contiguous()?, &bias, Conv3dOp(geo))
}

/// 2D convolution `[B, Cin, H, W] * [Cout, Cin, kh, kw]` with square stride and padding.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (c_out, c_in, kh, kw) = weight.dims4()?;
    let geo = PatchGeometry {
        kernel: [1, kh, kw],
        stride: [1, stride, stride],
        padding: [0, padding, padding],
    };
    let x5 = x.reshape((b, c, 1, h, w))?;
    let w5 = weight.reshape((c_out, c_in, 1, kh, kw))?;
    conv3d(&x5, &w5, bias, geo)?.squeeze(2)
}
