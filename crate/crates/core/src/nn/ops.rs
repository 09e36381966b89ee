//! Differentiable tensor primitives not provided (or too slow) in `candle-core`.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, WithDType, D};

use crate::error::{Error, Result};

fn out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

#[derive(Debug, Clone, Copy)]
struct Window {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Window {
    fn offset(&self, o: usize, tap: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + tap) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }
}

/// Unfolds `(B, C, H, W)` into `(B, C*k*k, Ho*Wo)` patch columns.
struct Im2Col(Window);

/// Adjoint of [`Im2Col`]: scatters-add columns back to `(B, C, H, W)`.
struct Col2Im {
    win: Window,
    h: usize,
    w: usize,
}

fn im2col_kernel<T: WithDType>(
    x: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    win: Window,
) -> Vec<T> {
    let k = win.k;
    let (ho, wo) = (out_dim(h, k, win.stride, win.pad), out_dim(w, k, win.stride, win.pad));
    let l = ho * wo;
    let mut out = vec![T::zero(); b * c * k * k * l];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (plane * k + ky) * k + kx;
                let dst = &mut out[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let Some(iy) = win.offset(oy, ky, h) else { continue };
                    let srow = &src[iy * w..(iy + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        if let Some(ix) = win.offset(ox, kx, w) {
                            *d = srow[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im_kernel<T: WithDType>(
    cols: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    win: Window,
) -> Vec<T> {
    let k = win.k;
    let (ho, wo) = (out_dim(h, k, win.stride, win.pad), out_dim(w, k, win.stride, win.pad));
    let l = ho * wo;
    let mut out = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (plane * k + ky) * k + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let Some(iy) = win.offset(oy, ky, h) else { continue };
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        if let Some(ix) = win.offset(ox, kx, w) {
                            dst[iy * w + ix] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T: WithDType>(
    storage: &'a CpuStorage,
    layout: &Layout,
) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(storage)?;
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col/col2im expect contiguous input"),
    }
}

fn dispatch<F32, F64>(storage: &CpuStorage, f32_fn: F32, f64_fn: F64) -> candle_core::Result<CpuStorage>
where
    F32: FnOnce(&CpuStorage) -> candle_core::Result<Vec<f32>>,
    F64: FnOnce(&CpuStorage) -> candle_core::Result<Vec<f64>>,
{
    match storage.dtype() {
        DType::F32 => Ok(CpuStorage::F32(f32_fn(storage)?)),
        DType::F64 => Ok(CpuStorage::F64(f64_fn(storage)?)),
        dt => candle_core::bail!("unsupported dtype {dt:?} for patch extraction"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let win = self.0;
        let l = out_dim(h, win.k, win.stride, win.pad) * out_dim(w, win.k, win.stride, win.pad);
        let out = dispatch(
            storage,
            |s| Ok(im2col_kernel(contiguous_slice::<f32>(s, layout)?, dims, win)),
            |s| Ok(im2col_kernel(contiguous_slice::<f64>(s, layout)?, dims, win)),
        )?;
        Ok((out, Shape::from((b, c * win.k * win.k, l))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let g = grad.contiguous()?.apply_op1(Col2Im { win: self.0, h, w })?;
        Ok(Some(g))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ckk, _) = layout.shape().dims3()?;
        let c = ckk / (self.win.k * self.win.k);
        let dims = (b, c, self.h, self.w);
        let win = self.win;
        let out = dispatch(
            storage,
            |s| Ok(col2im_kernel(contiguous_slice::<f32>(s, layout)?, dims, win)),
            |s| Ok(col2im_kernel(contiguous_slice::<f64>(s, layout)?, dims, win)),
        )?;
        Ok((out, Shape::from(dims)))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.win))?))
    }
}

/// Extracts `k x k` patches: `(B, C, H, W) -> (B, C*k*k, Ho*Wo)`.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col(Window { k, stride, pad }))?)
}

/// 2-D cross-correlation of `x: (B, Cin, H, W)` with `weight: (Cout, Cin, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, cin, h, w) = x.dims4()?;
    let (cout, wcin, k, k2) = weight.dims4()?;
    if wcin != cin || k != k2 {
        return Err(Error::shape("conv2d", format!("input channels {wcin}"), cin));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape("conv2d", format!("spatial size >= {k}"), format!("{h}x{w}")));
    }
    let (ho, wo) = (out_dim(h, k, stride, pad), out_dim(w, k, stride, pad));
    let cols = if k == 1 && stride == 1 && pad == 0 {
        x.reshape((b, cin, h * w))?
    } else {
        im2col(x, k, stride, pad)?
    };
    // candle's CPU matmul mishandles zero-stride batch dims, so materialize the weight
    let wm = weight.reshape((cout, cin * k * k))?.broadcast_left(b)?.contiguous()?;
    Ok(wm.matmul(&cols)?.reshape((b, cout, ho, wo))?)
}

/// The normalized 4x4 binomial blur kernel `outer([1,3,3,1]) / 64`.
pub fn blur_kernel() -> [[f64; 4]; 4] {
    const TAPS: [f64; 4] = [1.0, 3.0, 3.0, 1.0];
    let mut k = [[0.0; 4]; 4];
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = TAPS[i] * TAPS[j] / 64.0;
        }
    }
    k
}

/// Anti-aliased stride-2 downsampling: per-channel 4x4 blur with one pixel of zero padding.
pub fn blur_downsample(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::shape("blur_downsample", "spatial dims >= 2", format!("{h}x{w}")));
    }
    let taps: Vec<f64> = blur_kernel().iter().flatten().copied().collect();
    let kernel = Tensor::new(taps.as_slice(), x.device())?
        .to_dtype(x.dtype())?
        .reshape((1, 1, 4, 4))?;
    let planes = x.reshape((b * c, 1, h, w))?;
    let y = conv2d(&planes, &kernel, 2, 1)?;
    let (_, _, ho, wo) = y.dims4()?;
    Ok(y.reshape((b, c, ho, wo))?)
}

/// Group normalization without affine parameters over `(B, C, H, W)`.
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape("group_norm", format!("channels divisible by {groups}"), c));
    }
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(D::Minus1)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

/// Layer normalization without affine parameters over the last dimension.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// `x * sigmoid(x)`.
pub fn swish(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(x)?.exp()?)
}

/// Forward value of `post`, gradient routed to `pre` unchanged.
pub fn straight_through(pre: &Tensor, post: &Tensor) -> Result<Tensor> {
    if pre.dims() != post.dims() {
        return Err(Error::shape("straight_through", format!("{:?}", pre.dims()), format!("{:?}", post.dims())));
    }
    Ok((pre + (post - pre)?.detach())?)
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}

/// Elementwise `max(x, 0)`.
pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn naive_conv(x: &[f64], (b, c, h, w): (usize, usize, usize, usize), wt: &[f64], co: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let (ho, wo) = (out_dim(h, k, s, p), out_dim(w, k, s, p));
        let mut out = vec![0.0; b * co * ho * wo];
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((o * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((bi * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let dev = Device::Cpu;
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let dims = (2, 3, 6, 8);
            let x = ramp(2 * 3 * 6 * 8, 1.0);
            let wt = ramp(4 * 3 * k * k, 0.5);
            let xt = Tensor::from_vec(x.clone(), dims, &dev).unwrap();
            let wtt = Tensor::from_vec(wt.clone(), (4, 3, k, k), &dev).unwrap();
            let got: Vec<f64> = conv2d(&xt, &wtt, s, p).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let want = naive_conv(&x, dims, &wt, 4, k, s, p);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "k={k} s={s}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> checks the backward kernel.
        let dev = Device::Cpu;
        let x = Tensor::from_vec(ramp(2 * 2 * 5 * 7, 1.0), (2, 2, 5, 7), &dev).unwrap();
        let cols = im2col(&x, 3, 2, 1).unwrap();
        let y = Tensor::from_vec(ramp(cols.elem_count(), 0.7), cols.dims(), &dev).unwrap();
        let lhs = (&cols * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let back = y
            .apply_op1(Col2Im { win: Window { k: 3, stride: 2, pad: 1 }, h: 5, w: 7 })
            .unwrap();
        let rhs = (&x * &back).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let x = candle_core::Var::from_vec(ramp(1 * 2 * 4 * 4, 1.0), (1, 2, 4, 4), &dev).unwrap();
        let w = Tensor::from_vec(ramp(3 * 2 * 9, 0.3), (3, 2, 3, 3), &dev).unwrap();
        let loss = |t: &Tensor| conv2d(t, &w, 2, 1).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss(x.as_tensor()).backward().unwrap();
        let g: Vec<f64> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let f = |v: Vec<f64>| loss(&Tensor::from_vec(v, (1, 2, 4, 4), &dev).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn blur_preserves_constants_and_halves() {
        let dev = Device::Cpu;
        let x = Tensor::full(0.75f64, (1, 2, 8, 8), &dev).unwrap();
        let y = blur_downsample(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 4]);
        // interior taps see only the constant; borders see zero padding
        let v: Vec<Vec<f64>> = y.get(0).unwrap().get(0).unwrap().to_vec2().unwrap();
        assert!((v[1][1] - 0.75).abs() < 1e-12);
        assert!((v[2][2] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn blur_impulse_response_is_the_kernel() {
        let dev = Device::Cpu;
        let mut data = vec![0.0f64; 8 * 8];
        // pixel (3, 3) is reached by outputs oy,ox in {1, 2}; tap index = 3 - (2*o - 1)
        data[3 * 8 + 3] = 1.0;
        let x = Tensor::from_vec(data, (1, 1, 8, 8), &dev).unwrap();
        let y: Vec<Vec<f64>> = blur_downsample(&x).unwrap().get(0).unwrap().get(0).unwrap().to_vec2().unwrap();
        let k = blur_kernel();
        for (oy, row) in y.iter().enumerate() {
            for (ox, &v) in row.iter().enumerate() {
                let ty = 3 + 1 - 2 * oy as isize;
                let tx = 3 + 1 - 2 * ox as isize;
                let want = if (0..4).contains(&ty) && (0..4).contains(&tx) { k[ty as usize][tx as usize] } else { 0.0 };
                assert!((v - want).abs() < 1e-15, "({oy},{ox}) {v} vs {want}");
            }
        }
        assert!((k[1][2] - 9.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn straight_through_forward_and_gradient() {
        let dev = Device::Cpu;
        let x = candle_core::Var::from_vec(vec![0.3f64, -0.2, 1.5, -4.0], 4, &dev).unwrap();
        let q = x.as_tensor().sign().unwrap();
        let y = straight_through(x.as_tensor(), &q).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![1.0, -1.0, 1.0, -1.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap(), vec![1.0; 4]);
    }
}
