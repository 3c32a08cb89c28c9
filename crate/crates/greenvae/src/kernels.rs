//! Raw numeric kernels on flat row-major buffers: matmul variants, im2col /
//! col2im, and the conv / transposed-conv forward and backward routines built
//! from them. Everything here is deterministic and single-threaded; the tape
//! layer owns shape checking.

use crate::real::Real;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn matmul_at_b<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_a_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    }
    out
}

/// Geometry of a 2-D convolution over NHWC data. Output extent follows
/// `h_out = (h_in + pad_top + pad_bottom - kernel) / stride + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub n: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dGeom {
    /// TensorFlow-style "same" padding: output is `ceil(in / stride)`, with
    /// any odd padding going to the bottom/right side.
    pub fn same(n: usize, h_in: usize, w_in: usize, c_in: usize, kernel: usize, c_out: usize, stride: usize) -> Self {
        let h_out = h_in.div_ceil(stride);
        let w_out = w_in.div_ceil(stride);
        let pad_h = ((h_out - 1) * stride + kernel).saturating_sub(h_in);
        let pad_w = ((w_out - 1) * stride + kernel).saturating_sub(w_in);
        Conv2dGeom {
            n,
            h_in,
            w_in,
            c_in,
            kernel,
            c_out,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            h_out,
            w_out,
        }
    }

    pub fn rows(&self) -> usize {
        self.n * self.h_out * self.w_out
    }

    pub fn patch(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }
}

/// x[N,H,W,C] -> col[rows, k*k*C] with zero padding outside the input.
pub fn im2col<T: Real>(x: &[T], g: &Conv2dGeom) -> Vec<T> {
    debug_assert_eq!(x.len(), g.n * g.h_in * g.w_in * g.c_in);
    let patch = g.patch();
    let mut col = vec![T::zero(); g.rows() * patch];
    for n in 0..g.n {
        let x_img = &x[n * g.h_in * g.w_in * g.c_in..];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let row = ((n * g.h_out + oy) * g.w_out + ox) * patch;
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w_in as isize {
                            continue;
                        }
                        let src = ((iy as usize * g.w_in) + ix as usize) * g.c_in;
                        let dst = row + (ki * g.kernel + kj) * g.c_in;
                        col[dst..dst + g.c_in].copy_from_slice(&x_img[src..src + g.c_in]);
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of col[rows, k*k*C] back onto an [N,H,W,C] buffer (the adjoint
/// of `im2col`).
pub fn col2im<T: Real>(col: &[T], g: &Conv2dGeom) -> Vec<T> {
    let patch = g.patch();
    debug_assert_eq!(col.len(), g.rows() * patch);
    let mut x = vec![T::zero(); g.n * g.h_in * g.w_in * g.c_in];
    for n in 0..g.n {
        let base = n * g.h_in * g.w_in * g.c_in;
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let row = ((n * g.h_out + oy) * g.w_out + ox) * patch;
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w_in as isize {
                            continue;
                        }
                        let dst = base + ((iy as usize * g.w_in) + ix as usize) * g.c_in;
                        let src = row + (ki * g.kernel + kj) * g.c_in;
                        for c in 0..g.c_in {
                            x[dst + c] = x[dst + c] + col[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward conv: y[N,Ho,Wo,Cout]. Kernel layout is [k,k,Cin,Cout].
pub fn conv2d_fwd<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Conv2dGeom) -> Vec<T> {
    let col = im2col(x, g);
    let mut y = matmul(&col, w, g.rows(), g.patch(), g.c_out);
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(g.c_out) {
            for (v, &bv) in row.iter_mut().zip(b.iter()) {
                *v = *v + bv;
            }
        }
    }
    y
}

/// Gradient of conv w.r.t. its input.
pub fn conv2d_dx<T: Real>(dy: &[T], w: &[T], g: &Conv2dGeom) -> Vec<T> {
    let dcol = matmul_a_bt(dy, w, g.rows(), g.c_out, g.patch());
    // matmul_a_bt computes dy[rows,Cout] * w[patch,Cout]^T -> [rows, patch]
    col2im(&dcol, g)
}

/// Gradient of conv w.r.t. its kernel, layout [k,k,Cin,Cout].
pub fn conv2d_dw<T: Real>(x: &[T], dy: &[T], g: &Conv2dGeom) -> Vec<T> {
    let col = im2col(x, g);
    matmul_at_b(&col, dy, g.rows(), g.patch(), g.c_out)
}

/// Per-channel sum of dy over all output positions.
pub fn colsum<T: Real>(dy: &[T], c_out: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c_out];
    for row in dy.chunks_exact(c_out) {
        for (d, &v) in db.iter_mut().zip(row.iter()) {
            *d = *d + v;
        }
    }
    db
}

// Transposed convolution. A conv-transpose mapping [N,h,w,Cin] -> [N,H,W,Cout]
// is the adjoint of the "virtual" convolution V: [N,H,W,Cout] -> [N,h,w,Cin],
// so all three directions reuse the conv kernels above with the virtual
// geometry (`g.c_in` = Cout of the transpose, `g.c_out` = Cin, `g.h_in` = H).
// The transpose kernel is stored as [k,k,Cin,Cout] like a conv; `virtual`
// routines expect [k,k,Cout,Cin], hence the permutations below.

/// [k,k,Cin,Cout] -> [k,k,Cout,Cin]
pub fn permute_kernel_io<T: Real>(w: &[T], kernel: usize, c_in: usize, c_out: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for kk in 0..kernel * kernel {
        let src = kk * c_in * c_out;
        let dst = kk * c_out * c_in;
        for ci in 0..c_in {
            for co in 0..c_out {
                out[dst + co * c_in + ci] = w[src + ci * c_out + co];
            }
        }
    }
    out
}

/// Virtual-conv geometry for a transpose that maps (h_in,w_in,c_in) up to
/// (h_in*stride, w_in*stride, c_out) in "same" style.
pub fn convt_same_geom(
    n: usize,
    h_in: usize,
    w_in: usize,
    c_in: usize,
    kernel: usize,
    c_out: usize,
    stride: usize,
) -> Conv2dGeom {
    // Virtual conv runs from the transpose's output back to its input.
    let g = Conv2dGeom::same(n, h_in * stride, w_in * stride, c_out, kernel, c_in, stride);
    debug_assert_eq!(g.h_out, h_in);
    debug_assert_eq!(g.w_out, w_in);
    g
}

/// Forward transposed conv: x[N,h,w,Cin], w[k,k,Cin,Cout] -> y[N,H,W,Cout].
pub fn convt2d_fwd<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Conv2dGeom) -> Vec<T> {
    // g is the virtual geometry: g.c_out == Cin, g.c_in == Cout.
    let wv = permute_kernel_io(w, g.kernel, g.c_out, g.c_in);
    let mut y = conv2d_dx(x, &wv, g);
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(g.c_in) {
            for (v, &bv) in row.iter_mut().zip(b.iter()) {
                *v = *v + bv;
            }
        }
    }
    y
}

/// Gradient of transposed conv w.r.t. its input.
pub fn convt2d_dx<T: Real>(dy: &[T], w: &[T], g: &Conv2dGeom) -> Vec<T> {
    let wv = permute_kernel_io(w, g.kernel, g.c_out, g.c_in);
    conv2d_fwd(dy, &wv, None, g)
}

/// Gradient of transposed conv w.r.t. its kernel, layout [k,k,Cin,Cout].
pub fn convt2d_dw<T: Real>(x: &[T], dy: &[T], g: &Conv2dGeom) -> Vec<T> {
    // For the virtual conv, x is the upstream gradient and dy the input.
    let dwv = conv2d_dw(dy, x, g);
    permute_kernel_io(&dwv, g.kernel, g.c_in, g.c_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let id = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, &id, 2, 2, 2), a);
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        // A^T path: (A^T)^T B == A B
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect(); // 3x2
        let c2 = matmul_at_b(&at, &b, 3, 2, 4);
        assert_eq!(c, c2);
        // B^T path
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect(); // 4x3
        let c3 = matmul_a_bt(&a, &bt, 2, 3, 4);
        for (x, y) in c.iter().zip(c3.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel of value 1, single channel, stride 1: identity map.
        let g = Conv2dGeom::same(1, 3, 3, 1, 1, 1, 1);
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let y = conv2d_fwd(&x, &[1.0], None, &g);
        assert_eq!(x, y);
    }

    #[test]
    fn conv_same_stride2_halves() {
        let g = Conv2dGeom::same(2, 8, 8, 3, 4, 5, 2);
        assert_eq!((g.h_out, g.w_out), (4, 4));
        assert_eq!((g.pad_top, g.pad_left), (1, 1));
    }

    #[test]
    fn convt_doubles_spatial() {
        let g = convt_same_geom(1, 4, 4, 3, 4, 2, 2);
        let x = vec![0.25f64; 4 * 4 * 3];
        let w = vec![0.1f64; 4 * 4 * 3 * 2];
        let y = convt2d_fwd(&x, &w, None, &g);
        assert_eq!(y.len(), 8 * 8 * 2);
    }

    /// conv2d_dx must be the exact adjoint of conv2d_fwd:
    /// <conv(x), y> == <x, conv_dx(y)> for all x, y.
    #[test]
    fn conv_adjoint_identity() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let g = Conv2dGeom::same(2, 6, 6, 3, 4, 4, 2);
        let x: Vec<f64> = (0..g.n * g.h_in * g.w_in * g.c_in)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let w: Vec<f64> = (0..g.patch() * g.c_out)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let y: Vec<f64> = (0..g.rows() * g.c_out)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let fx = conv2d_fwd(&x, &w, None, &g);
        let ay = conv2d_dx(&y, &w, &g);
        let lhs: f64 = fx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(ay.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "lhs={lhs} rhs={rhs}");
    }
}
