//! 3-D convolution kernels lowered to GEMM through im2col / col2im.
//!
//! Weights follow the usual layouts: `conv3d` takes `[F, C, kD, kH, kW]`
//! mapping C to F channels; `conv_transpose3d` takes `[C_in, C_out, kD, kH, kW]`
//! and computes exactly the input-gradient of `conv3d` with the same weight,
//! so `<conv3d(x, w), y> == <x, conv_transpose3d(y, w)>`.

use super::{Buffer, Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    pub fn uniform(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec::uniform(1, 0)
    }
}

/// Output extent of a cross-correlation along each axis.
pub fn conv_output_dims(input: [usize; 3], kernel: [usize; 3], spec: ConvSpec) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if spec.stride[a] == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv3d",
                detail: "stride must be >= 1".into(),
            });
        }
        let padded = input[a] + 2 * spec.padding[a];
        if padded < kernel[a] {
            return Err(TensorError::InvalidShape {
                op: "conv3d",
                detail: format!(
                    "padded input {:?} smaller than kernel {:?} (padding {:?})",
                    input, kernel, spec.padding
                ),
            });
        }
        out[a] = (padded - kernel[a]) / spec.stride[a] + 1;
    }
    Ok(out)
}

/// Output extent of a transposed convolution along each axis.
pub fn conv_transpose_output_dims(
    input: [usize; 3],
    kernel: [usize; 3],
    spec: ConvSpec,
) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if spec.stride[a] == 0 || input[a] == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv_transpose3d",
                detail: format!("stride {:?} / input {:?} must be >= 1", spec.stride, input),
            });
        }
        let full = (input[a] - 1) * spec.stride[a] + kernel[a];
        if full <= 2 * spec.padding[a] {
            return Err(TensorError::InvalidShape {
                op: "conv_transpose3d",
                detail: format!("padding {:?} consumes whole output", spec.padding),
            });
        }
        out[a] = full - 2 * spec.padding[a];
    }
    Ok(out)
}

/// Geometry of one cross-correlation: `image` is the spatially larger side
/// (conv input / transposed-conv output), `grid` the other side.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    image: [usize; 3],
    kernel: [usize; 3],
    grid: [usize; 3],
    spec: ConvSpec,
}

impl Geometry {
    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn image_volume(&self) -> usize {
        self.image.iter().product()
    }

    fn grid_volume(&self) -> usize {
        self.grid.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel_volume()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.spec == ConvSpec::uniform(1, 0)
    }

    /// For kernel offset `k` on axis `a`, the range of grid positions whose
    /// source coordinate falls inside the image.
    fn valid_range(&self, a: usize, k: usize) -> (usize, usize) {
        let s = self.spec.stride[a];
        let p = self.spec.padding[a];
        // need 0 <= o*s + k - p < image
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let limit = self.image[a] + p; // o*s + k < limit
        let hi = if limit > k { ((limit - k - 1) / s + 1).min(self.grid[a]) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, img: &[T], col: &mut [T]) {
        let [id, ih, iw] = self.image;
        let [od, oh, ow] = self.grid;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.spec.stride;
        let [pd, ph, pw] = self.spec.padding;
        let ov = od * oh * ow;
        col.fill(T::zero());
        for c in 0..self.channels {
            let src = &img[c * id * ih * iw..(c + 1) * id * ih * iw];
            for z in 0..kd {
                let (z0, z1) = self.valid_range(0, z);
                for y in 0..kh {
                    let (y0, y1) = self.valid_range(1, y);
                    for x in 0..kw {
                        let (x0, x1) = self.valid_range(2, x);
                        let row = ((c * kd + z) * kh + y) * kw + x;
                        let dst = &mut col[row * ov..(row + 1) * ov];
                        for oz in z0..z1 {
                            let iz = oz * sd + z - pd;
                            for oy in y0..y1 {
                                let iy = oy * sh + y - ph;
                                let drow = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                let srow = &src[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                                if sw == 1 {
                                    let ix0 = x0 + x - pw;
                                    drow[x0..x1].copy_from_slice(&srow[ix0..ix0 + (x1 - x0)]);
                                } else {
                                    for ox in x0..x1 {
                                        drow[ox] = srow[ox * sw + x - pw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], img: &mut [T]) {
        let [id, ih, iw] = self.image;
        let [od, oh, ow] = self.grid;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.spec.stride;
        let [pd, ph, pw] = self.spec.padding;
        let ov = od * oh * ow;
        for c in 0..self.channels {
            let dst = &mut img[c * id * ih * iw..(c + 1) * id * ih * iw];
            for z in 0..kd {
                let (z0, z1) = self.valid_range(0, z);
                for y in 0..kh {
                    let (y0, y1) = self.valid_range(1, y);
                    for x in 0..kw {
                        let (x0, x1) = self.valid_range(2, x);
                        let row = ((c * kd + z) * kh + y) * kw + x;
                        let src = &col[row * ov..(row + 1) * ov];
                        for oz in z0..z1 {
                            let iz = oz * sd + z - pd;
                            for oy in y0..y1 {
                                let iy = oy * sh + y - ph;
                                let srow = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                let drow = &mut dst[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                                for ox in x0..x1 {
                                    drow[ox * sw + x - pw] += srow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dims5(t_shape: &[usize], op: &'static str) -> Result<[usize; 5]> {
    if t_shape.len() != 5 {
        return Err(TensorError::InvalidShape {
            op,
            detail: format!("expected a 5-D tensor, got shape {t_shape:?}"),
        });
    }
    Ok([t_shape[0], t_shape[1], t_shape[2], t_shape[3], t_shape[4]])
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: b.shape().to_vec(),
                rhs: vec![channels],
            });
        }
    }
    Ok(())
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, spatial: usize) {
    let f = bias.len();
    for s in 0..n {
        for (c, &b) in bias.iter().enumerate() {
            let base = (s * f + c) * spatial;
            for v in &mut out[base..base + spatial] {
                *v += b;
            }
        }
    }
}

fn bias_grad<T: Scalar>(g: &[T], n: usize, channels: usize, spatial: usize) -> Buffer<T> {
    let mut gb = Buffer::zeros(channels);
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * spatial;
            gb[c] += g[base..base + spatial].iter().copied().sum::<T>();
        }
    }
    gb
}

/// Shapes resolved for one conv3d call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvPlan {
    n: usize,
    out_channels: usize,
    geo: Geometry,
}

impl ConvPlan {
    pub(crate) fn output_shape(&self) -> Vec<usize> {
        let g = self.geo.grid;
        vec![self.n, self.out_channels, g[0], g[1], g[2]]
    }
}

pub(crate) fn plan_conv3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<ConvPlan> {
    let [n, c, d, h, wd] = dims5(x.shape(), "conv3d")?;
    let [f, wc, kd, kh, kw] = dims5(w.shape(), "conv3d")?;
    if wc != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    check_bias(bias, f, "conv3d")?;
    let grid = conv_output_dims([d, h, wd], [kd, kh, kw], spec)?;
    Ok(ConvPlan {
        n,
        out_channels: f,
        geo: Geometry {
            channels: c,
            image: [d, h, wd],
            kernel: [kd, kh, kw],
            grid,
            spec,
        },
    })
}

pub(crate) fn plan_conv_transpose3d<T: Scalar>(
    y: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<ConvPlan> {
    let [n, cin, d, h, wd] = dims5(y.shape(), "conv_transpose3d")?;
    let [wcin, cout, kd, kh, kw] = dims5(w.shape(), "conv_transpose3d")?;
    if wcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose3d",
            lhs: y.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    check_bias(bias, cout, "conv_transpose3d")?;
    let image = conv_transpose_output_dims([d, h, wd], [kd, kh, kw], spec)?;
    // The transposed conv is described by the forward conv it is the adjoint
    // of: image side has `cout` channels, grid side `cin`.
    Ok(ConvPlan {
        n,
        out_channels: cin,
        geo: Geometry {
            channels: cout,
            image,
            kernel: [kd, kh, kw],
            grid: [d, h, wd],
            spec,
        },
    })
}

pub(crate) fn conv3d_forward<T: Scalar>(
    plan: &ConvPlan,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Buffer<T> {
    let geo = plan.geo;
    let (rows, iv, ov, f) = (geo.col_rows(), geo.image_volume(), geo.grid_volume(), plan.out_channels);
    let mut out = Buffer::zeros(plan.n * f * ov);
    let mut scratch = if geo.is_pointwise() { None } else { Some(Buffer::zeros(rows * ov)) };
    for s in 0..plan.n {
        let img = &x[s * geo.channels * iv..(s + 1) * geo.channels * iv];
        let col: &[T] = match scratch.as_mut() {
            Some(buf) => {
                geo.im2col(img, buf);
                buf
            }
            None => img,
        };
        let dst = &mut out[s * f * ov..(s + 1) * f * ov];
        T::gemm(f, rows, ov, T::one(), w, rows as isize, 1, col, ov as isize, 1, T::zero(), dst, ov as isize, 1);
    }
    if let Some(b) = bias {
        add_bias(&mut out, b, plan.n, ov);
    }
    out
}

/// Gradients of conv3d w.r.t. input, weight and bias (each only if asked).
pub(crate) fn conv3d_backward<T: Scalar>(
    plan: &ConvPlan,
    x: &[T],
    w: &[T],
    g: &[T],
    want: [bool; 3],
) -> [Option<Buffer<T>>; 3] {
    let geo = plan.geo;
    let (rows, iv, ov, f) = (geo.col_rows(), geo.image_volume(), geo.grid_volume(), plan.out_channels);
    let mut gx = want[0].then(|| Buffer::zeros(plan.n * geo.channels * iv));
    let mut gw = want[1].then(|| Buffer::zeros(f * rows));
    let gb = want[2].then(|| bias_grad(g, plan.n, f, ov));
    let pointwise = geo.is_pointwise();
    let mut scratch = (!pointwise && (want[0] || want[1])).then(|| Buffer::zeros(rows * ov));
    for s in 0..plan.n {
        let gs = &g[s * f * ov..(s + 1) * f * ov];
        let img = &x[s * geo.channels * iv..(s + 1) * geo.channels * iv];
        if let Some(gw) = gw.as_mut() {
            let col: &[T] = match scratch.as_mut() {
                Some(buf) => {
                    geo.im2col(img, buf);
                    buf
                }
                None => img,
            };
            // gw[F, rows] += g[F, ov] * col[rows, ov]^T
            T::gemm(f, ov, rows, T::one(), gs, ov as isize, 1, col, 1, ov as isize, T::one(), gw, rows as isize, 1);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[s * geo.channels * iv..(s + 1) * geo.channels * iv];
            match scratch.as_mut() {
                Some(buf) => {
                    // dcol[rows, ov] = w^T[rows, F] * g[F, ov]
                    T::gemm(rows, f, ov, T::one(), w, 1, rows as isize, gs, ov as isize, 1, T::zero(), buf, ov as isize, 1);
                    geo.col2im(buf, dst);
                }
                None => {
                    T::gemm(rows, f, ov, T::one(), w, 1, rows as isize, gs, ov as isize, 1, T::zero(), dst, ov as isize, 1);
                }
            }
        }
    }
    [gx, gw, gb]
}

pub(crate) fn conv_transpose3d_forward<T: Scalar>(
    plan: &ConvPlan,
    y: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Buffer<T> {
    let geo = plan.geo;
    let (rows, iv, ov, cin) = (geo.col_rows(), geo.image_volume(), geo.grid_volume(), plan.out_channels);
    let cout = geo.channels;
    let mut out = Buffer::zeros(plan.n * cout * iv);
    let mut scratch = if geo.is_pointwise() { None } else { Some(Buffer::zeros(rows * ov)) };
    for s in 0..plan.n {
        let ys = &y[s * cin * ov..(s + 1) * cin * ov];
        let dst = &mut out[s * cout * iv..(s + 1) * cout * iv];
        match scratch.as_mut() {
            Some(buf) => {
                T::gemm(rows, cin, ov, T::one(), w, 1, rows as isize, ys, ov as isize, 1, T::zero(), buf, ov as isize, 1);
                geo.col2im(buf, dst);
            }
            None => {
                T::gemm(rows, cin, ov, T::one(), w, 1, rows as isize, ys, ov as isize, 1, T::zero(), dst, ov as isize, 1);
            }
        }
    }
    if let Some(b) = bias {
        add_bias(&mut out, b, plan.n, iv);
    }
    out
}

pub(crate) fn conv_transpose3d_backward<T: Scalar>(
    plan: &ConvPlan,
    y: &[T],
    w: &[T],
    g: &[T],
    want: [bool; 3],
) -> [Option<Buffer<T>>; 3] {
    let geo = plan.geo;
    let (rows, iv, ov, cin) = (geo.col_rows(), geo.image_volume(), geo.grid_volume(), plan.out_channels);
    let cout = geo.channels;
    let mut gy = want[0].then(|| Buffer::zeros(plan.n * cin * ov));
    let mut gw = want[1].then(|| Buffer::zeros(cin * rows));
    let gb = want[2].then(|| bias_grad(g, plan.n, cout, iv));
    let pointwise = geo.is_pointwise();
    let mut scratch = (!pointwise && (want[0] || want[1])).then(|| Buffer::zeros(rows * ov));
    for s in 0..plan.n {
        if !(want[0] || want[1]) {
            break;
        }
        let gs = &g[s * cout * iv..(s + 1) * cout * iv];
        let col: &[T] = match scratch.as_mut() {
            Some(buf) => {
                geo.im2col(gs, buf);
                buf
            }
            None => gs,
        };
        if let Some(gy) = gy.as_mut() {
            let dst = &mut gy[s * cin * ov..(s + 1) * cin * ov];
            T::gemm(cin, rows, ov, T::one(), w, rows as isize, 1, col, ov as isize, 1, T::zero(), dst, ov as isize, 1);
        }
        if let Some(gw) = gw.as_mut() {
            let ys = &y[s * cin * ov..(s + 1) * cin * ov];
            T::gemm(cin, ov, rows, T::one(), ys, ov as isize, 1, col, 1, ov as isize, T::one(), gw, rows as isize, 1);
        }
    }
    [gy, gw, gb]
}
