//! Wengert tape: records forward operations into an append-only node list,
//! then replays them in reverse to accumulate gradients. Inputs of a node
//! always precede it, so one reverse sweep visits each node exactly once.
//!
//! Shape mismatches and non-finite leaf inputs are programmer errors and
//! panic with messages naming both shapes; recoverable failures (NaN losses
//! during training) are handled by callers inspecting values.

use crate::kernels::{self, Conv2dGeom};
use crate::real::{c, Real};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    /// y = mul * x + add elementwise; only the multiplier matters in backward
    Affine(NodeId, f64),
    /// x[..., C] + b[C]
    AddBias(NodeId, NodeId),
    /// x[N,...,C] * g[N,C] (per-sample per-channel scale)
    ScaleChannels(NodeId, NodeId),
    /// x[N,...,C] + b[N,C]
    AddChannels(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: Conv2dGeom,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: Conv2dGeom,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rmean: Vec<T>,
        inv_std: Vec<T>,
    },
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Swish(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    ClampMin(NodeId, f64),
    ClampRange(NodeId, f64, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// [N,K] -> [N]
    RowSum(NodeId),
    Reshape(NodeId),
    /// concat along the last axis; equal leading extents
    ConcatLast(NodeId, NodeId),
    SliceLast {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// NHWC nearest-neighbour upsample by an integer factor
    Upsample {
        x: NodeId,
        factor: usize,
    },
    /// NHWC -> [N,C]
    GlobalAvgPool(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-writer recording tape. Distinct training runs use distinct tapes.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by node id.
pub struct Grads<T> {
    buf: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss w.r.t. the given node; zeros if no path reached it.
    pub fn get(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        match &self.buf[id] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_opt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.buf[id].as_ref()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Tracked input: gradients will be accumulated for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        assert!(value.is_finite(), "non-finite values in tape leaf");
        self.push(value, Op::Leaf, true)
    }

    /// Untracked input: no gradient flows to it (noise, data batches).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        assert!(value.is_finite(), "non-finite values in tape constant");
        self.push(value, Op::Leaf, false)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, name: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{name}: shape {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "add");
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(data, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "sub");
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(data, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "mul");
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(data, Op::Mul(a, b), needs)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "div");
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let needs = self.needs(a) || self.needs(b);
        self.push(data, Op::Div(a, b), needs)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).map(|x| -x);
        let needs = self.needs(a);
        self.push(data, Op::Neg(a), needs)
    }

    /// y = mul * x + add
    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let (m, ad) = (c::<T>(mul), c::<T>(add));
        let data = self.value(a).map(|x| m * x + ad);
        let needs = self.needs(a);
        self.push(data, Op::Affine(a, mul), needs)
    }

    pub fn scale(&mut self, a: NodeId, mul: f64) -> NodeId {
        self.affine(a, mul, 0.0)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let ch = *self.shape(x).last().expect("add_bias on scalar");
        assert_eq!(
            self.shape(b),
            &[ch],
            "add_bias: bias shape {:?} vs feature count {}",
            self.shape(b),
            ch
        );
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(ch) {
            for (v, &add) in row.iter_mut().zip(bv.iter()) {
                *v = *v + add;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(out, Op::AddBias(x, b), needs)
    }

    fn per_sample_channels(&self, x: NodeId, g: NodeId, name: &str) -> (usize, usize, usize) {
        let xs = self.shape(x);
        let n = xs[0];
        let chans = *xs.last().unwrap();
        let spatial: usize = xs[1..xs.len() - 1].iter().product();
        assert_eq!(
            self.shape(g),
            &[n, chans],
            "{name}: modulation shape {:?} vs expected [{n}, {chans}] for input {:?}",
            self.shape(g),
            xs
        );
        (n, spatial, chans)
    }

    /// x[N,...,C] * g[N,C]: per-sample channel scaling (FiLM-style).
    pub fn scale_channels(&mut self, x: NodeId, g: NodeId) -> NodeId {
        let (n, spatial, chans) = self.per_sample_channels(x, g, "scale_channels");
        let gv = self.value(g).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..n {
            let grow = &gv[i * chans..(i + 1) * chans];
            let xrow = &mut out.data_mut()[i * spatial * chans..(i + 1) * spatial * chans];
            for pix in xrow.chunks_exact_mut(chans) {
                for (v, &s) in pix.iter_mut().zip(grow.iter()) {
                    *v = *v * s;
                }
            }
        }
        let needs = self.needs(x) || self.needs(g);
        self.push(out, Op::ScaleChannels(x, g), needs)
    }

    /// x[N,...,C] + b[N,C]: per-sample channel shifts.
    pub fn add_channels(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (n, spatial, chans) = self.per_sample_channels(x, b, "add_channels");
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..n {
            let brow = &bv[i * chans..(i + 1) * chans];
            let xrow = &mut out.data_mut()[i * spatial * chans..(i + 1) * spatial * chans];
            for pix in xrow.chunks_exact_mut(chans) {
                for (v, &s) in pix.iter_mut().zip(brow.iter()) {
                    *v = *v + s;
                }
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(out, Op::AddChannels(x, b), needs)
    }

    /// a[M,K] * b[K,N] -> [M,N]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: shape {:?} vs {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[m, n], data), Op::Matmul(a, b), needs)
    }

    /// x[N,H,W,Cin] conv w[k,k,Cin,Cout] (+ optional bias[Cout]).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: Conv2dGeom) -> NodeId {
        let xs = self.shape(x);
        assert_eq!(
            xs,
            &[geom.n, geom.h_in, geom.w_in, geom.c_in],
            "conv2d: input shape {:?} vs geometry {:?}",
            xs,
            geom
        );
        assert_eq!(
            self.shape(w),
            &[geom.kernel, geom.kernel, geom.c_in, geom.c_out],
            "conv2d: kernel shape {:?} vs geometry {:?}",
            self.shape(w),
            geom
        );
        let bias = b.map(|bid| self.value(bid).data().to_vec());
        let y = kernels::conv2d_fwd(self.value(x).data(), self.value(w).data(), bias.as_deref(), &geom);
        let needs = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        self.push(
            Tensor::new(&[geom.n, geom.h_out, geom.w_out, geom.c_out], y),
            Op::Conv2d { x, w, b, geom },
            needs,
        )
    }

    /// x[N,h,w,Cin] transposed-conv w[k,k,Cin,Cout] -> [N,h*s,w*s,Cout].
    /// `geom` is the virtual-conv geometry from [`kernels::convt_same_geom`].
    pub fn convt2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: Conv2dGeom) -> NodeId {
        let xs = self.shape(x);
        // For the virtual geometry, the transpose input matches (h_out, w_out, c_out).
        assert_eq!(
            xs,
            &[geom.n, geom.h_out, geom.w_out, geom.c_out],
            "convt2d: input shape {:?} vs virtual geometry {:?}",
            xs,
            geom
        );
        assert_eq!(
            self.shape(w),
            &[geom.kernel, geom.kernel, geom.c_out, geom.c_in],
            "convt2d: kernel shape {:?} vs virtual geometry {:?}",
            self.shape(w),
            geom
        );
        let bias = b.map(|bid| self.value(bid).data().to_vec());
        let y = kernels::convt2d_fwd(self.value(x).data(), self.value(w).data(), bias.as_deref(), &geom);
        let needs = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        self.push(
            Tensor::new(&[geom.n, geom.h_in, geom.w_in, geom.c_in], y),
            Op::ConvT2d { x, w, b, geom },
            needs,
        )
    }

    /// Train-mode batch normalization over all but the last axis.
    /// Returns (output, batch mean, batch variance); the caller owns the
    /// running-stat update. Errors on a degenerate batch (fewer than 2
    /// reduction elements per channel).
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, Vec<T>, Vec<T>) {
        let xs = self.shape(x).to_vec();
        let chans = *xs.last().expect("batchnorm on scalar");
        let m = self.value(x).numel() / chans;
        assert!(
            m >= 2,
            "batchnorm train mode needs >= 2 reduction elements per channel, got {m}"
        );
        assert_eq!(self.shape(gamma), &[chans], "batchnorm gamma shape");
        assert_eq!(self.shape(beta), &[chans], "batchnorm beta shape");

        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); chans];
        for row in xd.chunks_exact(chans) {
            for (s, &v) in mean.iter_mut().zip(row.iter()) {
                *s = *s + v;
            }
        }
        let inv_m = c::<T>(1.0 / m as f64);
        for s in mean.iter_mut() {
            *s = *s * inv_m;
        }
        let mut var = vec![T::zero(); chans];
        for row in xd.chunks_exact(chans) {
            for ((s, &v), &mu) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                let d = v - mu;
                *s = *s + d * d;
            }
        }
        for s in var.iter_mut() {
            *s = *s * inv_m;
        }
        let epsv = c::<T>(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();

        let mut xhat = vec![T::zero(); xd.len()];
        for (xrow, hrow) in xd.chunks_exact(chans).zip(xhat.chunks_exact_mut(chans)) {
            for ch in 0..chans {
                hrow[ch] = (xrow[ch] - mean[ch]) * inv_std[ch];
            }
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut y = vec![T::zero(); xd.len()];
        for (hrow, yrow) in xhat.chunks_exact(chans).zip(y.chunks_exact_mut(chans)) {
            for ch in 0..chans {
                yrow[ch] = gv[ch] * hrow[ch] + bv[ch];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            Tensor::new(&xs, y),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.clone(),
            },
            needs,
        );
        (id, mean, var)
    }

    /// Eval-mode batch normalization with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rmean: &[T],
        rvar: &[T],
        eps: f64,
    ) -> NodeId {
        let xs = self.shape(x).to_vec();
        let chans = *xs.last().expect("batchnorm on scalar");
        assert_eq!(rmean.len(), chans, "batchnorm running-mean length");
        assert_eq!(rvar.len(), chans, "batchnorm running-var length");
        let epsv = c::<T>(eps);
        let inv_std: Vec<T> = rvar.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let xd = self.value(x).data();
        let mut y = vec![T::zero(); xd.len()];
        for (xrow, yrow) in xd.chunks_exact(chans).zip(y.chunks_exact_mut(chans)) {
            for ch in 0..chans {
                yrow[ch] = gv[ch] * (xrow[ch] - rmean[ch]) * inv_std[ch] + bv[ch];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::new(&xs, y),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                rmean: rmean.to_vec(),
                inv_std,
            },
            needs,
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).map(|x| x.exp());
        let needs = self.needs(a);
        self.push(data, Op::Exp(a), needs)
    }

    /// Natural log; caller guarantees positive inputs (clamp first).
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).map(|x| x.ln());
        let needs = self.needs(a);
        self.push(data, Op::Log(a), needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).map(sigmoid_scalar);
        let needs = self.needs(a);
        self.push(data, Op::Sigmoid(a), needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs(a);
        self.push(data, Op::Relu(a), needs)
    }

    /// swish(x) = x * sigmoid(x)
    pub fn swish(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).map(|x| x * sigmoid_scalar(x));
        let needs = self.needs(a);
        self.push(data, Op::Swish(a), needs)
    }

    /// Square root; caller guarantees nonnegative inputs.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).map(|x| x.sqrt());
        let needs = self.needs(a);
        self.push(data, Op::Sqrt(a), needs)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).map(|x| x * x);
        let needs = self.needs(a);
        self.push(data, Op::Square(a), needs)
    }

    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        let lov = c::<T>(lo);
        let data = self.value(a).map(|x| if x > lov { x } else { lov });
        let needs = self.needs(a);
        self.push(data, Op::ClampMin(a, lo), needs)
    }

    pub fn clamp_range(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (lov, hiv) = (c::<T>(lo), c::<T>(hi));
        let data = self.value(a).map(|x| {
            if x < lov {
                lov
            } else if x > hiv {
                hiv
            } else {
                x
            }
        });
        let needs = self.needs(a);
        self.push(data, Op::ClampRange(a, lo, hi), needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().fold(T::zero(), |x, y| x + y);
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let s = self.value(a).data().iter().copied().fold(T::zero(), |x, y| x + y);
        let needs = self.needs(a);
        self.push(
            Tensor::scalar(s * c::<T>(1.0 / n as f64)),
            Op::MeanAll(a),
            needs,
        )
    }

    /// [N,K] -> [N]: per-row sum.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let xs = self.shape(a);
        assert_eq!(xs.len(), 2, "row_sum expects a matrix, got {xs:?}");
        let (n, k) = (xs[0], xs[1]);
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks_exact(k)
            .map(|row| row.iter().copied().fold(T::zero(), |x, y| x + y))
            .collect();
        let needs = self.needs(a);
        self.push(Tensor::new(&[n], data), Op::RowSum(a), needs)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let data = self.value(a).reshaped(shape);
        let needs = self.needs(a);
        self.push(data, Op::Reshape(a), needs)
    }

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(
            &sa[..sa.len() - 1],
            &sb[..sb.len() - 1],
            "concat_last: leading dims {:?} vs {:?}",
            sa,
            sb
        );
        let (ka, kb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut out = Vec::with_capacity(rows * (ka + kb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..rows {
            out.extend_from_slice(&da[i * ka..(i + 1) * ka]);
            out.extend_from_slice(&db[i * kb..(i + 1) * kb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ka + kb;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, out), Op::ConcatLast(a, b), needs)
    }

    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let sa = self.shape(a).to_vec();
        let k = *sa.last().unwrap();
        assert!(
            start + len <= k,
            "slice_last: range {start}..{} out of {k}",
            start + len
        );
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let da = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&da[i * k + start..i * k + start + len]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = len;
        let needs = self.needs(a);
        self.push(Tensor::new(&shape, out), Op::SliceLast { x: a, start, len }, needs)
    }

    /// NHWC nearest-neighbour upsample by `factor`.
    pub fn upsample(&mut self, a: NodeId, factor: usize) -> NodeId {
        let xs = self.shape(a).to_vec();
        assert_eq!(xs.len(), 4, "upsample expects NHWC, got {xs:?}");
        let (n, h, w, ch) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h * factor, w * factor);
        let xd = self.value(a).data();
        let mut out = vec![T::zero(); n * ho * wo * ch];
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let src = ((ni * h + oy / factor) * w + ox / factor) * ch;
                    let dst = ((ni * ho + oy) * wo + ox) * ch;
                    out[dst..dst + ch].copy_from_slice(&xd[src..src + ch]);
                }
            }
        }
        let needs = self.needs(a);
        self.push(
            Tensor::new(&[n, ho, wo, ch], out),
            Op::Upsample { x: a, factor },
            needs,
        )
    }

    /// NHWC -> [N,C] spatial average.
    pub fn global_avg_pool(&mut self, a: NodeId) -> NodeId {
        let xs = self.shape(a).to_vec();
        assert_eq!(xs.len(), 4, "global_avg_pool expects NHWC, got {xs:?}");
        let (n, h, w, ch) = (xs[0], xs[1], xs[2], xs[3]);
        let inv = c::<T>(1.0 / (h * w) as f64);
        let xd = self.value(a).data();
        let mut out = vec![T::zero(); n * ch];
        for ni in 0..n {
            let orow = &mut out[ni * ch..(ni + 1) * ch];
            for pix in xd[ni * h * w * ch..(ni + 1) * h * w * ch].chunks_exact(ch) {
                for (o, &v) in orow.iter_mut().zip(pix.iter()) {
                    *o = *o + v;
                }
            }
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(&[n, ch], out), Op::GlobalAvgPool(a), needs)
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Grads<T> {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut buf: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        buf[loss] = Some(Tensor::new(self.shape(loss), vec![T::one()]));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let dy = match buf[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(id, &dy, &mut buf);
            buf[id] = Some(dy);
        }
        Grads { buf }
    }

    fn acc(&self, buf: &mut [Option<Tensor<T>>], id: NodeId, grad: Tensor<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut buf[id] {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data().iter()) {
                    *e = *e + *g;
                }
            }
            slot => *slot = Some(grad),
        }
    }

    fn backward_op(&self, id: NodeId, dy: &Tensor<T>, buf: &mut [Option<Tensor<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(buf, *a, dy.clone());
                self.acc(buf, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(buf, *a, dy.clone());
                self.acc(buf, *b, dy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                self.acc(buf, *a, zip_map(dy, self.value(*b), |g, v| g * v));
                self.acc(buf, *b, zip_map(dy, self.value(*a), |g, v| g * v));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.acc(buf, *a, zip_map(dy, bv, |g, v| g / v));
                let av = self.value(*a);
                let db = Tensor::new(
                    dy.shape(),
                    dy.data()
                        .iter()
                        .zip(av.data().iter())
                        .zip(bv.data().iter())
                        .map(|((&g, &x), &y)| -g * x / (y * y))
                        .collect(),
                );
                self.acc(buf, *b, db);
            }
            Op::Neg(a) => self.acc(buf, *a, dy.map(|g| -g)),
            Op::Affine(a, mul) => {
                let m = c::<T>(*mul);
                self.acc(buf, *a, dy.map(|g| g * m));
            }
            Op::AddBias(x, b) => {
                self.acc(buf, *x, dy.clone());
                let ch = *self.shape(*b).last().unwrap();
                self.acc(buf, *b, Tensor::new(&[ch], kernels::colsum(dy.data(), ch)));
            }
            Op::ScaleChannels(x, g) => {
                let (n, spatial, chans) = self.per_sample_channels(*x, *g, "scale_channels.bwd");
                let gv = self.value(*g).data();
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); n * chans];
                for i in 0..n {
                    let grow = &gv[i * chans..(i + 1) * chans];
                    let dgrow = &mut dg[i * chans..(i + 1) * chans];
                    for p in 0..spatial {
                        let off = (i * spatial + p) * chans;
                        for ch in 0..chans {
                            dx[off + ch] = dy.data()[off + ch] * grow[ch];
                            dgrow[ch] = dgrow[ch] + dy.data()[off + ch] * xv[off + ch];
                        }
                    }
                }
                self.acc(buf, *x, Tensor::new(self.shape(*x), dx));
                self.acc(buf, *g, Tensor::new(&[n, chans], dg));
            }
            Op::AddChannels(x, b) => {
                self.acc(buf, *x, dy.clone());
                let (n, spatial, chans) = self.per_sample_channels(*x, *b, "add_channels.bwd");
                let mut db = vec![T::zero(); n * chans];
                for i in 0..n {
                    let drow = &mut db[i * chans..(i + 1) * chans];
                    for p in 0..spatial {
                        let off = (i * spatial + p) * chans;
                        for ch in 0..chans {
                            drow[ch] = drow[ch] + dy.data()[off + ch];
                        }
                    }
                }
                self.acc(buf, *b, Tensor::new(&[n, chans], db));
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let da = kernels::matmul_a_bt(dy.data(), self.value(*b).data(), m, n, k);
                let db = kernels::matmul_at_b(self.value(*a).data(), dy.data(), m, k, n);
                self.acc(buf, *a, Tensor::new(&[m, k], da));
                self.acc(buf, *b, Tensor::new(&[k, n], db));
            }
            Op::Conv2d { x, w, b, geom } => {
                if self.nodes[*x].needs_grad {
                    let dx = kernels::conv2d_dx(dy.data(), self.value(*w).data(), geom);
                    self.acc(buf, *x, Tensor::new(self.shape(*x), dx));
                }
                if self.nodes[*w].needs_grad {
                    let dw = kernels::conv2d_dw(self.value(*x).data(), dy.data(), geom);
                    self.acc(buf, *w, Tensor::new(self.shape(*w), dw));
                }
                if let Some(bid) = b {
                    self.acc(
                        buf,
                        *bid,
                        Tensor::new(&[geom.c_out], kernels::colsum(dy.data(), geom.c_out)),
                    );
                }
            }
            Op::ConvT2d { x, w, b, geom } => {
                if self.nodes[*x].needs_grad {
                    let dx = kernels::convt2d_dx(dy.data(), self.value(*w).data(), geom);
                    self.acc(buf, *x, Tensor::new(self.shape(*x), dx));
                }
                if self.nodes[*w].needs_grad {
                    let dw = kernels::convt2d_dw(self.value(*x).data(), dy.data(), geom);
                    self.acc(buf, *w, Tensor::new(self.shape(*w), dw));
                }
                if let Some(bid) = b {
                    self.acc(
                        buf,
                        *bid,
                        Tensor::new(&[geom.c_in], kernels::colsum(dy.data(), geom.c_in)),
                    );
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let chans = inv_std.len();
                let m = xhat.len() / chans;
                let gv = self.value(*gamma).data();
                // Per-channel reductions of dxhat and dxhat * xhat.
                let mut sum_dxh = vec![T::zero(); chans];
                let mut sum_dxh_xh = vec![T::zero(); chans];
                let mut dgamma = vec![T::zero(); chans];
                let mut dbeta = vec![T::zero(); chans];
                for (dyrow, hrow) in dy.data().chunks_exact(chans).zip(xhat.chunks_exact(chans)) {
                    for ch in 0..chans {
                        let dxh = dyrow[ch] * gv[ch];
                        sum_dxh[ch] = sum_dxh[ch] + dxh;
                        sum_dxh_xh[ch] = sum_dxh_xh[ch] + dxh * hrow[ch];
                        dgamma[ch] = dgamma[ch] + dyrow[ch] * hrow[ch];
                        dbeta[ch] = dbeta[ch] + dyrow[ch];
                    }
                }
                if self.nodes[*x].needs_grad {
                    let minv = c::<T>(1.0 / m as f64);
                    let mut dx = vec![T::zero(); xhat.len()];
                    for ((dxrow, dyrow), hrow) in dx
                        .chunks_exact_mut(chans)
                        .zip(dy.data().chunks_exact(chans))
                        .zip(xhat.chunks_exact(chans))
                    {
                        for ch in 0..chans {
                            let dxh = dyrow[ch] * gv[ch];
                            dxrow[ch] = inv_std[ch]
                                * (dxh - minv * (sum_dxh[ch] + hrow[ch] * sum_dxh_xh[ch]));
                        }
                    }
                    self.acc(buf, *x, Tensor::new(self.shape(*x), dx));
                }
                self.acc(buf, *gamma, Tensor::new(&[chans], dgamma));
                self.acc(buf, *beta, Tensor::new(&[chans], dbeta));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                rmean,
                inv_std,
            } => {
                let chans = inv_std.len();
                let gv = self.value(*gamma).data();
                let xv = self.value(*x).data();
                let mut dgamma = vec![T::zero(); chans];
                let mut dbeta = vec![T::zero(); chans];
                let mut dx = vec![T::zero(); xv.len()];
                for ((dyrow, xrow), dxrow) in dy
                    .data()
                    .chunks_exact(chans)
                    .zip(xv.chunks_exact(chans))
                    .zip(dx.chunks_exact_mut(chans))
                {
                    for ch in 0..chans {
                        dxrow[ch] = dyrow[ch] * gv[ch] * inv_std[ch];
                        dgamma[ch] = dgamma[ch] + dyrow[ch] * (xrow[ch] - rmean[ch]) * inv_std[ch];
                        dbeta[ch] = dbeta[ch] + dyrow[ch];
                    }
                }
                if self.nodes[*x].needs_grad {
                    self.acc(buf, *x, Tensor::new(self.shape(*x), dx));
                }
                self.acc(buf, *gamma, Tensor::new(&[chans], dgamma));
                self.acc(buf, *beta, Tensor::new(&[chans], dbeta));
            }
            Op::Exp(a) => {
                let y = self.value(id);
                self.acc(buf, *a, zip_map(dy, y, |g, v| g * v));
            }
            Op::Log(a) => {
                let x = self.value(*a);
                self.acc(buf, *a, zip_map(dy, x, |g, v| g / v));
            }
            Op::Sigmoid(a) => {
                let y = self.value(id);
                self.acc(buf, *a, zip_map(dy, y, |g, s| g * s * (T::one() - s)));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc(
                    buf,
                    *a,
                    zip_map(dy, x, |g, v| if v > T::zero() { g } else { T::zero() }),
                );
            }
            Op::Swish(a) => {
                let x = self.value(*a);
                self.acc(
                    buf,
                    *a,
                    zip_map(dy, x, |g, v| {
                        let s = sigmoid_scalar(v);
                        g * (s + v * s * (T::one() - s))
                    }),
                );
            }
            Op::Sqrt(a) => {
                let y = self.value(id);
                let half = c::<T>(0.5);
                self.acc(buf, *a, zip_map(dy, y, |g, v| g * half / v));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let two = c::<T>(2.0);
                self.acc(buf, *a, zip_map(dy, x, |g, v| g * two * v));
            }
            Op::ClampMin(a, lo) => {
                let lov = c::<T>(*lo);
                let x = self.value(*a);
                self.acc(
                    buf,
                    *a,
                    zip_map(dy, x, |g, v| if v > lov { g } else { T::zero() }),
                );
            }
            Op::ClampRange(a, lo, hi) => {
                let (lov, hiv) = (c::<T>(*lo), c::<T>(*hi));
                let x = self.value(*a);
                self.acc(
                    buf,
                    *a,
                    zip_map(dy, x, |g, v| {
                        if v >= lov && v <= hiv {
                            g
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::SumAll(a) => {
                let g = dy.scalar_value();
                self.acc(buf, *a, Tensor::filled(self.shape(*a), g));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let g = dy.scalar_value() * c::<T>(1.0 / n as f64);
                self.acc(buf, *a, Tensor::filled(self.shape(*a), g));
            }
            Op::RowSum(a) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut dx = vec![T::zero(); n * k];
                for i in 0..n {
                    let g = dy.data()[i];
                    for v in dx[i * k..(i + 1) * k].iter_mut() {
                        *v = g;
                    }
                }
                self.acc(buf, *a, Tensor::new(&[n, k], dx));
            }
            Op::Reshape(a) => {
                self.acc(buf, *a, dy.reshaped(self.shape(*a)));
            }
            Op::ConcatLast(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (ka, kb) = (*sa.last().unwrap(), *sb.last().unwrap());
                let rows: usize = sa[..sa.len() - 1].iter().product();
                let mut da = vec![T::zero(); rows * ka];
                let mut db = vec![T::zero(); rows * kb];
                for i in 0..rows {
                    let src = &dy.data()[i * (ka + kb)..(i + 1) * (ka + kb)];
                    da[i * ka..(i + 1) * ka].copy_from_slice(&src[..ka]);
                    db[i * kb..(i + 1) * kb].copy_from_slice(&src[ka..]);
                }
                self.acc(buf, *a, Tensor::new(&sa, da));
                self.acc(buf, *b, Tensor::new(&sb, db));
            }
            Op::SliceLast { x, start, len } => {
                let sx = self.shape(*x).to_vec();
                let k = *sx.last().unwrap();
                let rows: usize = sx[..sx.len() - 1].iter().product();
                let mut dx = vec![T::zero(); rows * k];
                for i in 0..rows {
                    dx[i * k + start..i * k + start + len]
                        .copy_from_slice(&dy.data()[i * len..(i + 1) * len]);
                }
                self.acc(buf, *x, Tensor::new(&sx, dx));
            }
            Op::Upsample { x, factor } => {
                let sx = self.shape(*x).to_vec();
                let (n, h, w, ch) = (sx[0], sx[1], sx[2], sx[3]);
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); n * h * w * ch];
                for ni in 0..n {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let dst = ((ni * h + oy / factor) * w + ox / factor) * ch;
                            let src = ((ni * ho + oy) * wo + ox) * ch;
                            for cc in 0..ch {
                                dx[dst + cc] = dx[dst + cc] + dy.data()[src + cc];
                            }
                        }
                    }
                }
                self.acc(buf, *x, Tensor::new(&sx, dx));
            }
            Op::GlobalAvgPool(x) => {
                let sx = self.shape(*x).to_vec();
                let (n, h, w, ch) = (sx[0], sx[1], sx[2], sx[3]);
                let inv = c::<T>(1.0 / (h * w) as f64);
                let mut dx = vec![T::zero(); n * h * w * ch];
                for ni in 0..n {
                    let grow = &dy.data()[ni * ch..(ni + 1) * ch];
                    for pix in dx[ni * h * w * ch..(ni + 1) * h * w * ch].chunks_exact_mut(ch) {
                        for (v, &g) in pix.iter_mut().zip(grow.iter()) {
                            *v = g * inv;
                        }
                    }
                }
                self.acc(buf, *x, Tensor::new(&sx, dx));
            }
        }
    }
}

#[inline]
fn sigmoid_scalar<T: Real>(x: T) -> T {
    // Branch keeps exp() argument nonpositive on both sides.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.numel(), b.numel());
    Tensor::new(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // loss = x^2 at x = 3 -> grad 6
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let loss = tape.square(x);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x, &[]).scalar_value(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_grads() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let k = tape.constant(Tensor::scalar(5.0));
        let loss = tape.mul(k, k);
        let grads = tape.backward(loss);
        assert!(grads.get_opt(x).is_none());
        let _ = loss;
    }

    #[test]
    fn exp_of_zeros_is_ones() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let y = tape.exp(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    #[should_panic(expected = "shape")]
    fn add_shape_mismatch_panics() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        tape.add(a, b);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn non_scalar_loss_panics() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        tape.backward(a);
    }

    #[test]
    fn chain_rule_composition() {
        // g(f(x)) with f = exp, g = square: d/dx exp(x)^2 = 2 exp(2x)
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.3));
        let f = tape.exp(x);
        let g = tape.square(f);
        let grads = tape.backward(g);
        let expect = 2.0 * (2.0 * 0.3f64).exp();
        assert!((grads.get(x, &[]).scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn replay_determinism() {
        let run = || {
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.leaf(Tensor::from_f64(&[4], &[0.1, -0.7, 2.0, 0.4]));
            let s = tape.sigmoid(x);
            let q = tape.square(s);
            let loss = tape.sum_all(q);
            let grads = tape.backward(loss);
            (
                tape.value(loss).scalar_value().to_bits(),
                grads
                    .get(x, &[4])
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
