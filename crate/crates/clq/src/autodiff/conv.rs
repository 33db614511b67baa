//! Dense kernels behind the tensor ops: matmul variants, im2col-based
//! 2-D convolution, and bilinear sampling.

/// out += a @ b, a: [m x k], b: [k x n], out: [m x n].
pub(crate) fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a @ b^T, a: [m x k], b: [n x k], out: [m x n].
pub(crate) fn matmul_abt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out += a^T @ b, a: [m x k], b: [m x n], out: [k x n].
pub(crate) fn matmul_atb_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Unfold `input` [cin x h x w] into columns [cin*kh*kw x oh*ow].
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = conv_output_size(h, kh, stride, padding);
    let ow = conv_output_size(w, kw, stride, padding);
    let cols_w = oh * ow;
    let mut cols = vec![0.0; cin * kh * kw * cols_w];
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * cols_w;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = iy as usize * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = plane[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold columns back, accumulating into `out` [cin x h x w].
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_acc(
    cols: &[f64],
    out: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) {
    let oh = conv_output_size(h, kh, stride, padding);
    let ow = conv_output_size(w, kw, stride, padding);
    let cols_w = oh * ow;
    for c in 0..cin {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * cols_w;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = iy as usize * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn pixel(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Bilinear value of channel plane at fractional (x, y); outside reads 0.
pub(crate) fn bilinear_value(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let f00 = pixel(plane, h, w, y0, x0);
    let f01 = pixel(plane, h, w, y0, x0 + 1);
    let f10 = pixel(plane, h, w, y0 + 1, x0);
    let f11 = pixel(plane, h, w, y0 + 1, x0 + 1);
    f00 * (1.0 - fx) * (1.0 - fy) + f01 * fx * (1.0 - fy) + f10 * (1.0 - fx) * fy + f11 * fx * fy
}

/// Partial derivatives of the bilinear value w.r.t. x and y.
pub(crate) fn bilinear_coord_grad(
    plane: &[f64],
    h: usize,
    w: usize,
    x: f64,
    y: f64,
) -> (f64, f64) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let f00 = pixel(plane, h, w, y0, x0);
    let f01 = pixel(plane, h, w, y0, x0 + 1);
    let f10 = pixel(plane, h, w, y0 + 1, x0);
    let f11 = pixel(plane, h, w, y0 + 1, x0 + 1);
    let dx = (f01 - f00) * (1.0 - fy) + (f11 - f10) * fy;
    let dy = (f10 - f00) * (1.0 - fx) + (f11 - f01) * fx;
    (dx, dy)
}

/// Scatter `g` into the four corners around (x, y) of a gradient plane.
pub(crate) fn bilinear_scatter(grad: &mut [f64], h: usize, w: usize, x: f64, y: f64, g: f64) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut put = |yy: isize, xx: isize, v: f64| {
        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
            grad[yy as usize * w + xx as usize] += v;
        }
    };
    put(y0, x0, g * (1.0 - fx) * (1.0 - fy));
    put(y0, x0 + 1, g * fx * (1.0 - fy));
    put(y0 + 1, x0, g * (1.0 - fx) * fy);
    put(y0 + 1, x0 + 1, g * fx * fy);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known() {
        let a = [1.0, 2.0, 3.0, 4.0]; // 2x2
        let b = [5.0, 6.0, 7.0, 8.0]; // 2x2
        let mut out = vec![0.0; 4];
        matmul_acc(&mut out, &a, &b, 2, 2, 2);
        assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect(); // 3x4
        let b: Vec<f64> = (0..8).map(|i| i as f64 * 0.7 - 2.0).collect(); // 4x2
        let mut c0 = vec![0.0; 6];
        matmul_acc(&mut c0, &a, &b, 3, 4, 2);

        // a @ (b^T)^T via abt kernel on a transposed operand
        let mut bt = vec![0.0; 8]; // 2x4
        for i in 0..4 {
            for j in 0..2 {
                bt[j * 4 + i] = b[i * 2 + j];
            }
        }
        let mut c1 = vec![0.0; 6];
        matmul_abt_acc(&mut c1, &a, &bt, 3, 4, 2);
        for (x, y) in c0.iter().zip(&c1) {
            assert!((x - y).abs() < 1e-12);
        }

        // (a^T)^T @ b via atb kernel on a transposed operand
        let mut at = vec![0.0; 12]; // 4x3
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 6];
        matmul_atb_acc(&mut c2, &at, &b, 4, 3, 2);
        for (x, y) in c0.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        let (cin, h, w, kh, kw, s, p) = (2, 5, 4, 3, 3, 2, 1);
        let x: Vec<f64> = (0..cin * h * w).map(|i| (i as f64 * 0.77).sin()).collect();
        let cols = im2col(&x, cin, h, w, kh, kw, s, p);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.31).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_acc(&y, &mut back, cin, h, w, kh, kw, s, p);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn bilinear_exact_on_integers_and_linear_between() {
        let plane: Vec<f64> = (0..12).map(|i| i as f64 * 1.5 - 2.0).collect(); // 3x4
        for y in 0..3 {
            for x in 0..4 {
                let v = bilinear_value(&plane, 3, 4, x as f64, y as f64);
                assert!((v - plane[y * 4 + x]).abs() < 1e-12);
            }
        }
        // linear along x between (1,1) and (2,1)
        let a = bilinear_value(&plane, 3, 4, 1.0, 1.0);
        let b = bilinear_value(&plane, 3, 4, 2.0, 1.0);
        for t in [0.25, 0.5, 0.75] {
            let v = bilinear_value(&plane, 3, 4, 1.0 + t, 1.0);
            assert!((v - (a + t * (b - a))).abs() < 1e-12);
        }
        // out of bounds reads zero: far corner
        assert_eq!(bilinear_value(&plane, 3, 4, -2.0, -2.0), 0.0);
    }
}
