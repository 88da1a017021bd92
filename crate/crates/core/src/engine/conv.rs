//! 2-d convolution kernels: a direct-loop reference and an im2col + GEMM
//! fast path. Both operate on already-validated geometry.

use super::gemm::{gemm, MatRef};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Which convolution kernel the tape dispatches to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    Direct,
    #[default]
    Im2col,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn of(input: Shape, weight: Shape, stride: usize, padding: usize) -> Self {
        let oh = (input.h + 2 * padding - weight.h) / stride + 1;
        let ow = (input.w + 2 * padding - weight.w) / stride + 1;
        Geometry {
            n: input.n,
            cin: input.c,
            h: input.h,
            w: input.w,
            cout: weight.n,
            kh: weight.h,
            kw: weight.w,
            stride,
            padding,
            oh,
            ow,
        }
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Validates a convolution call and returns the output shape.
pub fn output_shape(
    input: Shape,
    weight: Shape,
    bias: Option<Shape>,
    stride: usize,
    padding: usize,
) -> Result<Shape> {
    if stride == 0 {
        return Err(Error::contract("convolution stride must be positive"));
    }
    if input.c != weight.c {
        return Err(Error::dimension(format!(
            "conv2d input {input} has {} channels but weight {weight} expects {}",
            input.c, weight.c
        )));
    }
    if let Some(b) = bias {
        if b.numel() != weight.n {
            return Err(Error::dimension(format!(
                "conv2d bias {b} does not match {} output channels of weight {weight}",
                weight.n
            )));
        }
    }
    if input.h + 2 * padding < weight.h || input.w + 2 * padding < weight.w {
        return Err(Error::dimension(format!(
            "conv2d input {input} with padding {padding} is smaller than kernel {weight}"
        )));
    }
    let g = Geometry::of(input, weight, stride, padding);
    Ok(Shape::new(input.n, weight.n, g.oh, g.ow))
}

pub fn forward(
    algo: ConvAlgo,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Tensor {
    match algo {
        ConvAlgo::Direct => forward_direct(input, weight, bias, stride, padding),
        ConvAlgo::Im2col => forward_im2col(input, weight, bias, stride, padding),
    }
}

/// Gradients of a convolution; `None` where not requested.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn backward(
    algo: ConvAlgo,
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let g = Geometry::of(input.shape(), weight.shape(), stride, padding);
    let bias = need_bias.then(|| bias_grad(&g, grad_out));
    let (gi, gw) = match algo {
        ConvAlgo::Direct => backward_direct(&g, input, weight, grad_out, need_input, need_weight),
        ConvAlgo::Im2col => backward_im2col(&g, input, weight, grad_out, need_input, need_weight),
    };
    ConvGrads {
        input: gi,
        weight: gw,
        bias,
    }
}

fn bias_grad(g: &Geometry, grad_out: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(Shape::new(g.cout, 1, 1, 1));
    let plane = g.out_plane();
    let go = grad_out.data();
    for n in 0..g.n {
        for co in 0..g.cout {
            let base = (n * g.cout + co) * plane;
            out.data_mut()[co] += go[base..base + plane].iter().sum::<f64>();
        }
    }
    out
}

pub fn forward_direct(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Tensor {
    let g = Geometry::of(input.shape(), weight.shape(), stride, padding);
    let ws = weight.shape();
    let is = input.shape();
    let mut out = Tensor::zeros(Shape::new(g.n, g.cout, g.oh, g.ow));
    for n in 0..g.n {
        for co in 0..g.cout {
            let b = bias.map_or(0.0, |b| b.data()[co]);
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = b;
                    for ci in 0..g.cin {
                        for ky in 0..g.kh {
                            let Some(y) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(x) = g.src(ox, kx, g.w) else { continue };
                                acc += input.data()[is.index(n, ci, y, x)]
                                    * weight.data()[ws.index(co, ci, ky, kx)];
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

fn backward_direct(
    g: &Geometry,
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let is = input.shape();
    let ws = weight.shape();
    let mut gi = need_input.then(|| Tensor::zeros(is));
    let mut gw = need_weight.then(|| Tensor::zeros(ws));
    for n in 0..g.n {
        for co in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let d = grad_out.get(n, co, oy, ox);
                    if d == 0.0 {
                        continue;
                    }
                    for ci in 0..g.cin {
                        for ky in 0..g.kh {
                            let Some(y) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(x) = g.src(ox, kx, g.w) else { continue };
                                let ii = is.index(n, ci, y, x);
                                let wi = ws.index(co, ci, ky, kx);
                                if let Some(gi) = gi.as_mut() {
                                    gi.data_mut()[ii] += d * weight.data()[wi];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw.data_mut()[wi] += d * input.data()[ii];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gi, gw)
}

/// Unfolds one sample into a `[cin·kh·kw, oh·ow]` row-major matrix.
fn im2col(g: &Geometry, sample: &[f64], col: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let src = &sample[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.src(oy, ky, g.h) {
                        None => line.fill(0.0),
                        Some(y) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = g.src(ox, kx, g.w).map_or(0.0, |x| src[y * g.w + x]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one sample's gradient.
fn col2im(g: &Geometry, col: &[f64], sample: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let dst = &mut sample[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let Some(y) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(x) = g.src(ox, kx, g.w) {
                            dst[y * g.w + x] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn forward_im2col(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Tensor {
    let g = Geometry::of(input.shape(), weight.shape(), stride, padding);
    let plane = g.out_plane();
    let k = g.k();
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * plane;
    let mut out = Tensor::zeros(Shape::new(g.n, g.cout, g.oh, g.ow));
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * plane]
    };
    for n in 0..g.n {
        let x = &input.data()[n * in_sample..(n + 1) * in_sample];
        let dst = &mut out.data_mut()[n * out_sample..(n + 1) * out_sample];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let cols: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut col);
            &col
        };
        gemm(
            MatRef::new(weight.data(), g.cout, k),
            MatRef::new(cols, k, plane),
            dst,
            if bias.is_some() { 1.0 } else { 0.0 },
        );
    }
    out
}

fn backward_im2col(
    g: &Geometry,
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let plane = g.out_plane();
    let k = g.k();
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * plane;
    let mut gi = need_input.then(|| Tensor::zeros(input.shape()));
    let mut gw = need_weight.then(|| Tensor::zeros(weight.shape()));
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; k * plane] };
    for n in 0..g.n {
        let go = &grad_out.data()[n * out_sample..(n + 1) * out_sample];
        if let Some(gw) = gw.as_mut() {
            let x = &input.data()[n * in_sample..(n + 1) * in_sample];
            let cols: &[f64] = if pointwise {
                x
            } else {
                im2col(g, x, &mut col);
                &col
            };
            // dW[cout, k] += dY[cout, plane] · colᵀ[plane, k]
            gemm(
                MatRef::new(go, g.cout, plane),
                MatRef::transpose_of(cols, plane, k),
                gw.data_mut(),
                1.0,
            );
        }
        if let Some(gi) = gi.as_mut() {
            let dst = &mut gi.data_mut()[n * in_sample..(n + 1) * in_sample];
            // dcol[k, plane] = Wᵀ[k, cout] · dY[cout, plane]
            let w_t = MatRef::transpose_of(weight.data(), k, g.cout);
            if pointwise {
                gemm(w_t, MatRef::new(go, g.cout, plane), dst, 1.0);
            } else {
                gemm(w_t, MatRef::new(go, g.cout, plane), &mut col, 0.0);
                col2im(g, &col, dst);
            }
        }
    }
    (gi, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn rel_close(a: &Tensor, b: &Tensor, rtol: f64) -> bool {
        a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= rtol * x.abs().max(y.abs()).max(1.0))
    }

    #[test]
    fn direct_and_im2col_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, padding, k, h, w) in &[
            (1, 1, 3, 7, 5),
            (2, 1, 3, 9, 8),
            (1, 0, 1, 4, 4),
            (2, 0, 3, 6, 7),
            (1, 2, 5, 5, 6),
        ] {
            let input = random(Shape::new(2, 3, h, w), &mut rng);
            let weight = random(Shape::new(4, 3, k, k), &mut rng);
            let bias = random(Shape::new(4, 1, 1, 1), &mut rng);
            let a = forward_direct(&input, &weight, Some(&bias), stride, padding);
            let b = forward_im2col(&input, &weight, Some(&bias), stride, padding);
            assert!(rel_close(&a, &b, 1e-12));

            let go = random(a.shape(), &mut rng);
            let gd = backward(ConvAlgo::Direct, &input, &weight, &go, stride, padding, true, true, true);
            let gf = backward(ConvAlgo::Im2col, &input, &weight, &go, stride, padding, true, true, true);
            assert!(rel_close(gd.input.as_ref().unwrap(), gf.input.as_ref().unwrap(), 1e-12));
            assert!(rel_close(gd.weight.as_ref().unwrap(), gf.weight.as_ref().unwrap(), 1e-12));
        }
    }

    #[test]
    fn output_shape_formula_and_errors() {
        let s = output_shape(
            Shape::new(1, 3, 24, 24),
            Shape::new(8, 3, 3, 3),
            Some(Shape::new(8, 1, 1, 1)),
            2,
            1,
        )
        .unwrap();
        assert_eq!(s, Shape::new(1, 8, 12, 12));
        let err = output_shape(Shape::new(1, 4, 5, 5), Shape::new(8, 3, 3, 3), None, 1, 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("[1, 4, 5, 5]") && err.contains("[8, 3, 3, 3]"), "{err}");
    }
}
