//! Raw compute kernels: GEMM-backed convolution and matrix products, plus
//! the resampling primitives. No graph bookkeeping lives here.

use crate::{Array, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        assert!(
            input + 2 * self.padding >= kernel,
            "kernel {kernel} larger than padded input {input}+2*{}",
            self.padding
        );
        (input + 2 * self.padding - kernel) / self.stride + 1
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

struct ConvShape {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvShape {
    fn new<T: Element>(x: &[usize], weight: &Array<T>, geo: ConvGeometry) -> Self {
        let (n, c, h, w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("conv2d input must be NCHW, got {x:?}"),
        };
        let (o, ci, kh, kw) = weight.dims4();
        assert_eq!(ci, c, "conv2d weight expects {ci} input channels, input has {c}");
        let ho = geo.output_size(h, kh);
        let wo = geo.output_size(w, kw);
        Self { n, c, h, w, o, kh, kw, ho, wo }
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Element>(x: &[T], s: &ConvShape, geo: ConvGeometry, cols: &mut [T]) {
    let (stride, pad) = (geo.stride as isize, geo.padding as isize);
    let mut row = 0;
    for c in 0..s.c {
        let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for i in 0..s.kh {
            for j in 0..s.kw {
                let dst = &mut cols[row * s.pixels()..(row + 1) * s.pixels()];
                for oy in 0..s.ho {
                    let y = oy as isize * stride + i as isize - pad;
                    let line = &mut dst[oy * s.wo..(oy + 1) * s.wo];
                    if y < 0 || y >= s.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * s.w..(y as usize + 1) * s.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = ox as isize * stride + j as isize - pad;
                        *v = if xx < 0 || xx >= s.w as isize { T::zero() } else { src[xx as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], s: &ConvShape, geo: ConvGeometry, x: &mut [T]) {
    let (stride, pad) = (geo.stride as isize, geo.padding as isize);
    let mut row = 0;
    for c in 0..s.c {
        let plane = &mut x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for i in 0..s.kh {
            for j in 0..s.kw {
                let src = &cols[row * s.pixels()..(row + 1) * s.pixels()];
                for oy in 0..s.ho {
                    let y = oy as isize * stride + i as isize - pad;
                    if y < 0 || y >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * s.w..(y as usize + 1) * s.w];
                    for ox in 0..s.wo {
                        let xx = ox as isize * stride + j as isize - pad;
                        if xx >= 0 && xx < s.w as isize {
                            dst[xx as usize] = dst[xx as usize] + src[oy * s.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-major `(m x k) * (k x n)` product written (or accumulated) into `c`.
#[allow(clippy::too_many_arguments)]
fn gemm_rm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths were checked above and `c` is a distinct &mut.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

pub fn conv2d<T: Element>(x: &Array<T>, weight: &Array<T>, geo: ConvGeometry) -> Array<T> {
    let s = ConvShape::new(x.shape(), weight, geo);
    let mut out = Array::zeros(&[s.n, s.o, s.ho, s.wo]);
    let pointwise = geo.is_pointwise(s.kh, s.kw);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); s.patch() * s.pixels()] };
    let in_len = s.c * s.h * s.w;
    let out_len = s.o * s.pixels();
    for b in 0..s.n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, &s, geo, &mut cols);
            &cols
        };
        let ob = &mut out.data_mut()[b * out_len..(b + 1) * out_len];
        gemm_rm(s.o, s.patch(), s.pixels(), weight.data(), false, src, false, ob, false);
    }
    out
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_backward_input<T: Element>(
    grad_out: &Array<T>,
    x_shape: &[usize],
    weight: &Array<T>,
    geo: ConvGeometry,
) -> Array<T> {
    let s = ConvShape::new(x_shape, weight, geo);
    let mut grad_x = Array::zeros(x_shape);
    let pointwise = geo.is_pointwise(s.kh, s.kw);
    let mut cols = vec![T::zero(); s.patch() * s.pixels()];
    let in_len = s.c * s.h * s.w;
    let out_len = s.o * s.pixels();
    for b in 0..s.n {
        let gb = &grad_out.data()[b * out_len..(b + 1) * out_len];
        let xb = &mut grad_x.data_mut()[b * in_len..(b + 1) * in_len];
        if pointwise {
            gemm_rm(s.patch(), s.o, s.pixels(), weight.data(), true, gb, false, xb, false);
        } else {
            gemm_rm(s.patch(), s.o, s.pixels(), weight.data(), true, gb, false, &mut cols, false);
            col2im_add(&cols, &s, geo, xb);
        }
    }
    grad_x
}

/// Gradient of `conv2d` with respect to its weight.
pub fn conv2d_backward_weight<T: Element>(
    grad_out: &Array<T>,
    x: &Array<T>,
    weight_shape: &[usize],
    geo: ConvGeometry,
) -> Array<T> {
    let mut grad_w = Array::zeros(weight_shape);
    let s = ConvShape::new(x.shape(), &grad_w, geo);
    let pointwise = geo.is_pointwise(s.kh, s.kw);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); s.patch() * s.pixels()] };
    let in_len = s.c * s.h * s.w;
    let out_len = s.o * s.pixels();
    for b in 0..s.n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, &s, geo, &mut cols);
            &cols
        };
        let gb = &grad_out.data()[b * out_len..(b + 1) * out_len];
        gemm_rm(s.o, s.pixels(), s.patch(), gb, false, src, true, grad_w.data_mut(), true);
    }
    grad_w
}

/// `a (m x k) * b`, where `b` is `(k x n)` or, if `b_transposed`, `(n x k)`.
pub fn matmul<T: Element>(a: &Array<T>, b: &Array<T>, b_transposed: bool) -> Array<T> {
    let (m, k) = matrix_dims(a);
    let (n, kb) = if b_transposed {
        matrix_dims(b)
    } else {
        let (r, c) = matrix_dims(b);
        (c, r)
    };
    assert_eq!(k, kb, "matmul inner dimensions differ: {:?} x {:?}", a.shape(), b.shape());
    let mut out = Array::zeros(&[m, n]);
    gemm_rm(m, k, n, a.data(), false, b.data(), b_transposed, out.data_mut(), false);
    out
}

/// `aᵀ * b` for row-major `a (k x m)` and `b (k x n)`.
pub fn matmul_at_b<T: Element>(a: &Array<T>, b: &Array<T>) -> Array<T> {
    let (k, m) = matrix_dims(a);
    let (kb, n) = matrix_dims(b);
    assert_eq!(k, kb, "matmul_at_b inner dimensions differ");
    let mut out = Array::zeros(&[m, n]);
    gemm_rm(m, k, n, a.data(), true, b.data(), false, out.data_mut(), false);
    out
}

fn matrix_dims<T: Element>(a: &Array<T>) -> (usize, usize) {
    match a.shape()[..] {
        [r, c] => (r, c),
        _ => panic!("expected a matrix, got shape {:?}", a.shape()),
    }
}

pub fn upsample_nearest2x<T: Element>(x: &Array<T>) -> Array<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = Array::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..2 * h {
            let srow = &src[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
            let drow = &mut dst[(p * 2 * h + y) * 2 * w..(p * 2 * h + y + 1) * 2 * w];
            for (xx, v) in drow.iter_mut().enumerate() {
                *v = srow[xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest2x`]: sums each 2x2 block.
pub fn sum_pool2x<T: Element>(x: &Array<T>) -> Array<T> {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "2x pooling needs even sizes, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array::zeros(&[n, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..h {
            let srow = &src[(p * h + y) * w..(p * h + y + 1) * w];
            let drow = &mut dst[(p * ho + y / 2) * wo..(p * ho + y / 2 + 1) * wo];
            for (xx, &v) in srow.iter().enumerate() {
                drow[xx / 2] = drow[xx / 2] + v;
            }
        }
    }
    out
}

pub fn avg_pool2x<T: Element>(x: &Array<T>) -> Array<T> {
    let quarter = T::from_f64_lossy(0.25);
    sum_pool2x(x).map(|v| v * quarter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Array<f64>, w: &Array<f64>, geo: ConvGeometry) -> Array<f64> {
        let (n, c, h, wd) = x.dims4();
        let (o, _, kh, kw) = w.dims4();
        let ho = geo.output_size(h, kh);
        let wo = geo.output_size(wd, kw);
        let mut out = Array::zeros(&[n, o, ho, wo]);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let y = (oy * geo.stride + i) as isize - geo.padding as isize;
                                    let xx = (ox * geo.stride + j) as isize - geo.padding as isize;
                                    if y >= 0 && y < h as isize && xx >= 0 && xx < wd as isize {
                                        acc += x.data()[((b * c + ic) * h + y as usize) * wd + xx as usize]
                                            * w.data()[((oc * c + ic) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for &(k, stride, padding) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0), (4, 2, 1)] {
            let x = Array::<f64>::randn(&[2, 3, 7, 6], 1.0, &mut rng);
            let w = Array::<f64>::randn(&[4, 3, k, k], 1.0, &mut rng);
            let geo = ConvGeometry { stride, padding };
            let fast = conv2d(&x, &w, geo);
            let slow = naive_conv(&x, &w, geo);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={padding}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn upsample_then_sum_pool_scales_by_four() {
        let x = Array::<f32>::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]);
        let up = upsample_nearest2x(&x);
        assert_eq!(up.data()[..4], [1., 1., 2., 2.]);
        assert_eq!(sum_pool2x(&up).data(), &[4., 8., 12., 16.]);
        assert_eq!(avg_pool2x(&up), x);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Array::<f64>::from_f64_slice(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = Array::<f64>::from_f64_slice(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
        let ab = matmul(&a, &b, false);
        assert_eq!(ab.data(), &[4., 5., 10., 11.]);
        assert_eq!(matmul(&a, &b.transpose2(), true), ab);
        assert_eq!(matmul_at_b(&a.transpose2(), &b), ab);
    }
}
