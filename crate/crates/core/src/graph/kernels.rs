//! Dense kernels on plain arrays. The graph ops wrap these; the frozen
//! backbone path calls them directly.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayD, ArrayView1, ArrayView2, ArrayView4, Axis, IxDyn};

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_side(&self, side: usize, k: usize) -> usize {
        (side + 2 * self.pad - k) / self.stride + 1
    }
}

/// Unfold one `C×H×W` image into `(C·kh·kw) × (OH·OW)` columns.
pub fn im2col<T: Real>(
    img: ndarray::ArrayView3<T>,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
) -> Array2<T> {
    let (c, h, w) = img.dim();
    let oh = geom.out_side(h, kh);
    let ow = geom.out_side(w, kw);
    let mut cols = Array2::<T>::zeros((c * kh * kw, oh * ow));
    let img = img.as_standard_layout();
    let src = img.as_slice().unwrap();
    let dst = cols.as_slice_mut().unwrap();
    let (stride, pad) = (geom.stride as isize, geom.pad as isize);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let out_row = &mut dst[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * stride + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = ox as isize * stride + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            out_row[oy * ow + ox] = src[base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `C×H×W` image.
pub fn col2im<T: Real>(
    cols: ArrayView2<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
) -> ndarray::Array3<T> {
    let oh = geom.out_side(h, kh);
    let ow = geom.out_side(w, kw);
    let mut img = ndarray::Array3::<T>::zeros((c, h, w));
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().unwrap();
    let dst = img.as_slice_mut().unwrap();
    let (stride, pad) = (geom.stride as isize, geom.pad as isize);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let in_row = &src[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * stride + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = ox as isize * stride + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += in_row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    img
}

fn is_pointwise(kh: usize, kw: usize, geom: ConvGeom) -> bool {
    kh == 1 && kw == 1 && geom.stride == 1 && geom.pad == 0
}

/// `x: N×C×H×W`, `w: O×C×kh×kw` → `N×O×OH×OW`.
pub fn conv2d_forward<T: Real>(
    x: ArrayView4<T>,
    w: ArrayView4<T>,
    bias: Option<ArrayView1<T>>,
    geom: ConvGeom,
) -> Array4<T> {
    let (n, c, h, wd) = x.dim();
    let (o, wc, kh, kw) = w.dim();
    assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
    let oh = geom.out_side(h, kh);
    let ow = geom.out_side(wd, kw);
    let w2 = w.to_shape((o, c * kh * kw)).unwrap();
    let mut out = Array4::<T>::zeros((n, o, oh, ow));
    for b in 0..n {
        let img = x.index_axis(Axis(0), b);
        let mut dst = out.index_axis_mut(Axis(0), b).into_shape_with_order((o, oh * ow)).unwrap();
        if is_pointwise(kh, kw, geom) {
            let flat = img.to_shape((c, h * wd)).unwrap();
            general_mat_mul(T::one(), &w2, &flat, T::zero(), &mut dst);
        } else {
            let cols = im2col(img, kh, kw, geom);
            general_mat_mul(T::one(), &w2, &cols, T::zero(), &mut dst);
        }
        if let Some(bias) = bias {
            for (mut row, &bv) in dst.outer_iter_mut().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Real>(
    x: ArrayView4<T>,
    w: ArrayView4<T>,
    dout: ArrayView4<T>,
    geom: ConvGeom,
    need_dx: bool,
) -> (Option<Array4<T>>, Array4<T>, ndarray::Array1<T>) {
    let (n, c, h, wd) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = dout.dim();
    let w2 = w.to_shape((o, c * kh * kw)).unwrap();
    let mut dw2 = Array2::<T>::zeros((o, c * kh * kw));
    let mut dx = if need_dx { Some(Array4::<T>::zeros((n, c, h, wd))) } else { None };
    let pointwise = is_pointwise(kh, kw, geom);
    for b in 0..n {
        let img = x.index_axis(Axis(0), b);
        let g = dout.index_axis(Axis(0), b);
        let g2 = g.to_shape((o, oh * ow)).unwrap();
        let cols = if pointwise {
            img.to_shape((c, h * wd)).unwrap().into_owned()
        } else {
            im2col(img, kh, kw, geom)
        };
        general_mat_mul(T::one(), &g2, &cols.t(), T::one(), &mut dw2);
        if let Some(dx) = dx.as_mut() {
            let mut dcols = Array2::<T>::zeros((c * kh * kw, oh * ow));
            general_mat_mul(T::one(), &w2.t(), &g2, T::zero(), &mut dcols);
            let img_grad = if pointwise {
                dcols.into_shape_with_order((c, h, wd)).unwrap()
            } else {
                col2im(dcols.view(), c, h, wd, kh, kw, geom)
            };
            dx.slice_mut(s![b, .., .., ..]).assign(&img_grad);
        }
    }
    let db = dout.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    (dx, dw2.into_shape_with_order((o, c, kh, kw)).unwrap(), db)
}

/// Batched product over matching leading dims: `[.., m, k] × [.., k, n]`.
pub fn bmm<T: Real>(a: &ArrayD<T>, b: &ArrayD<T>, trans_a: bool, trans_b: bool) -> ArrayD<T> {
    let nd = a.ndim();
    assert!(nd >= 2 && b.ndim() == nd, "bmm rank mismatch");
    let lead: Vec<usize> = a.shape()[..nd - 2].to_vec();
    assert_eq!(lead, b.shape()[..nd - 2], "bmm batch dims mismatch");
    let batch: usize = lead.iter().product();
    let (ar, ac) = (a.shape()[nd - 2], a.shape()[nd - 1]);
    let (br, bc) = (b.shape()[nd - 2], b.shape()[nd - 1]);
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "bmm inner dim mismatch");
    let a3 = a.to_shape((batch, ar, ac)).unwrap();
    let b3 = b.to_shape((batch, br, bc)).unwrap();
    let mut out = ndarray::Array3::<T>::zeros((batch, m, n));
    for i in 0..batch {
        let av = a3.index_axis(Axis(0), i);
        let bv = b3.index_axis(Axis(0), i);
        let av = if trans_a { av.reversed_axes() } else { av };
        let bv = if trans_b { bv.reversed_axes() } else { bv };
        let mut dst = out.index_axis_mut(Axis(0), i);
        general_mat_mul(T::one(), &av, &bv, T::zero(), &mut dst);
    }
    let mut shape = lead;
    shape.push(m);
    shape.push(n);
    out.into_shape_with_order(IxDyn(&shape)).unwrap()
}

/// Sum `grad` down to `shape` following right-aligned broadcasting rules.
pub fn sum_to_shape<T: Real>(grad: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if grad.shape() == shape {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn naive_conv(x: &Array4<f64>, w: &Array4<f64>, geom: ConvGeom) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (o, _, kh, kw) = w.dim();
        let oh = geom.out_side(h, kh);
        let ow = geom.out_side(wd, kw);
        let mut out = Array4::zeros((n, o, oh, ow));
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                                    let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[[b, ic, iy as usize, ix as usize]] * w[[oc, ic, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[b, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop() {
        let x = Array::from_shape_fn((2, 3, 7, 6), |(a, b, c, d)| ((a * 7 + b * 5 + c * 3 + d) % 11) as f64 - 5.0);
        let w = Array::from_shape_fn((4, 3, 3, 3), |(a, b, c, d)| ((a + 2 * b + 3 * c + 5 * d) % 7) as f64 * 0.1 - 0.3);
        for geom in [ConvGeom { stride: 1, pad: 1 }, ConvGeom { stride: 2, pad: 1 }, ConvGeom { stride: 2, pad: 0 }] {
            let fast = conv2d_forward(x.view(), w.view(), None, geom);
            let slow = naive_conv(&x, &w, geom);
            assert!(fast.iter().zip(slow.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let geom = ConvGeom { stride: 2, pad: 1 };
        let x = Array::from_shape_fn((2, 5, 5), |(a, b, c)| (a * 25 + b * 5 + c) as f64 * 0.01);
        let cols = im2col(x.view(), 3, 3, geom);
        let y = Array::from_shape_fn(cols.dim(), |(i, j)| ((i * 3 + j) % 5) as f64 - 2.0);
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(y.view(), 2, 5, 5, 3, 3, geom);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bmm_with_transposes() {
        let a = Array::from_shape_fn((2, 3, 4), |(i, j, k)| (i + j * k) as f64).into_dyn();
        let b = Array::from_shape_fn((2, 5, 4), |(i, j, k)| (i * j + k) as f64).into_dyn();
        let out = bmm(&a, &b, false, true);
        assert_eq!(out.shape(), &[2, 3, 5]);
        let expect: f64 = (0..4).map(|k| a[[1, 2, k]] * b[[1, 4, k]]).sum();
        assert_eq!(out[[1, 2, 4]], expect);
    }

    #[test]
    fn sum_to_shape_reduces_broadcast_axes() {
        let g = ArrayD::<f64>::ones(IxDyn(&[2, 3, 4]));
        assert_eq!(sum_to_shape(g.clone(), &[4]).shape(), &[4]);
        let r = sum_to_shape(g, &[2, 1, 4]);
        assert_eq!(r.shape(), &[2, 1, 4]);
        assert_eq!(r[[0, 0, 0]], 3.0);
    }
}
