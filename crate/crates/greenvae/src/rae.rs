//! Deterministic regularized autoencoder objective: squared-error
//! reconstruction, a latent-code penalty, and one of three decoder
//! regularizers (weight decay, a Hutchinson-probe gradient penalty, or
//! spectral normalization of the decoder weights).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::real::{c, Real};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegKind {
    L2,
    GradientPenalty,
    SpectralNorm,
}

impl RegKind {
    pub fn name(self) -> &'static str {
        match self {
            RegKind::L2 => "l2",
            RegKind::GradientPenalty => "gp",
            RegKind::SpectralNorm => "sn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l2" => Some(RegKind::L2),
            "gp" => Some(RegKind::GradientPenalty),
            "sn" => Some(RegKind::SpectralNorm),
            _ => None,
        }
    }
}

/// Knobs of the regularized objective. `lambda` weights the decoder
/// regularizer, `gamma` the latent-code penalty.
#[derive(Clone, Copy, Debug)]
pub struct RaeConfig {
    pub reg_kind: RegKind,
    pub lambda: f64,
    pub gamma: f64,
    /// Probe count for the gradient-penalty estimator.
    pub gp_probes: usize,
    /// Finite-difference step for the gradient-penalty estimator.
    pub gp_eps: f64,
    /// Power-method iterations per spectral-norm refresh.
    pub sn_iters: usize,
}

impl RaeConfig {
    pub fn new(reg_kind: RegKind) -> Self {
        // Lambda defaults per regularizer; spectral norm is structural.
        let lambda = match reg_kind {
            RegKind::L2 => 1e-6,
            RegKind::GradientPenalty => 1e-4,
            RegKind::SpectralNorm => 0.0,
        };
        RaeConfig {
            reg_kind,
            lambda,
            gamma: 1e-3,
            gp_probes: 1,
            gp_eps: 1e-2,
            sn_iters: 1,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(crate::Error::config("rae lambda and gamma must be >= 0"));
        }
        if self.gp_probes == 0 || self.sn_iters == 0 {
            return Err(crate::Error::config("rae probe/iteration counts must be >= 1"));
        }
        if self.gp_eps <= 0.0 {
            return Err(crate::Error::config("rae gp_eps must be positive"));
        }
        Ok(())
    }
}

/// Reported decomposition of the regularized loss.
#[derive(Clone, Copy, Debug)]
pub struct RaeTerms {
    pub rec: f64,
    pub code_penalty: f64,
    pub reg: f64,
}

impl RaeTerms {
    pub fn total(&self, cfg: &RaeConfig) -> f64 {
        self.rec + cfg.gamma * self.code_penalty + cfg.lambda * self.reg
    }
}

/// Loss on the tape: 0.5 * |x - x_hat|^2 + gamma * |z|^2 + lambda * reg,
/// batch-averaged. `reg` is an already-computed scalar node (or None for the
/// structural spectral-norm variant). Returns (total, rec, code_penalty).
pub fn rae_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    x_hat: NodeId,
    z: NodeId,
    reg: Option<NodeId>,
    cfg: &RaeConfig,
) -> (NodeId, NodeId, NodeId) {
    assert_eq!(
        tape.shape(x),
        tape.shape(x_hat),
        "rae_loss: shape {:?} vs {:?}",
        tape.shape(x),
        tape.shape(x_hat)
    );
    let n = tape.shape(x)[0];
    let d = tape.sub(x_hat, x);
    let sq = tape.square(d);
    let s = tape.sum_all(sq);
    let rec = tape.scale(s, 0.5 / n as f64);

    let z2 = tape.square(z);
    let zsum = tape.sum_all(z2);
    let code_penalty = tape.scale(zsum, 1.0 / n as f64);

    let weighted_code = tape.scale(code_penalty, cfg.gamma);
    let mut total = tape.add(rec, weighted_code);
    if let Some(reg_node) = reg {
        let weighted_reg = tape.scale(reg_node, cfg.lambda);
        total = tape.add(total, weighted_reg);
    }
    (total, rec, code_penalty)
}

/// Weight decay over decoder weight tensors (biases excluded): sum of squared
/// entries, as a tape node.
pub fn l2_reg_on_tape<T: Real>(tape: &mut Tape<T>, weights: &[NodeId]) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for &w in weights {
        let sq = tape.square(w);
        let s = tape.sum_all(sq);
        acc = Some(match acc {
            None => s,
            Some(prev) => tape.add(prev, s),
        });
    }
    acc.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero())))
}

/// Plain evaluation of the weight-decay term.
pub fn l2_reg<T: Real>(weights: &[&Tensor<T>]) -> f64 {
    weights
        .iter()
        .flat_map(|w| w.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum()
}

/// Rademacher probe vectors for the gradient-penalty estimator: entries are
/// +-1 (zero mean, unit variance).
pub fn gp_probe<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| if rng.gen::<bool>() { T::one() } else { -T::one() })
        .collect();
    Tensor::new(shape, data)
}

/// Finite-difference Hutchinson estimate of |d mu(z) / dz|_F^2 on the tape:
/// mean over probes v of |(mu(z + eps v) - mu(z)) / eps|^2, summed over
/// outputs and averaged over the batch. The estimator is an ordinary
/// first-order function of the decoder parameters, so the tape
/// differentiates it without double backward. `decode` must run the decoder
/// on the same tape for each probe-shifted input.
pub fn gradient_penalty_on_tape<T: Real>(
    tape: &mut Tape<T>,
    z: NodeId,
    base_out: NodeId,
    probes: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
    mut decode: impl FnMut(&mut Tape<T>, NodeId) -> NodeId,
) -> NodeId {
    assert!(eps > 0.0, "gradient penalty eps must be positive");
    assert!(probes >= 1, "gradient penalty needs at least one probe");
    let zshape = tape.shape(z).to_vec();
    let n = zshape[0];
    let mut acc: Option<NodeId> = None;
    for _ in 0..probes {
        let v = gp_probe::<T>(rng, &zshape);
        let v = tape.constant(v);
        let shift = tape.scale(v, eps);
        let z_shift = tape.add(z, shift);
        let out_shift = decode(tape, z_shift);
        let diff = tape.sub(out_shift, base_out);
        let scaled = tape.scale(diff, 1.0 / eps);
        let sq = tape.square(scaled);
        let s = tape.sum_all(sq);
        acc = Some(match acc {
            None => s,
            Some(prev) => tape.add(prev, s),
        });
    }
    tape.scale(acc.unwrap(), 1.0 / (probes * n) as f64)
}

/// Plain gradient-penalty estimate for a fixed decoder function (used by the
/// estimator-quality checks): mean over probes of |(f(z+eps v) - f(z))/eps|^2.
pub fn gradient_penalty_estimate(
    decode: impl Fn(&[f64]) -> Vec<f64>,
    z: &[f64],
    probes: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    assert!(eps > 0.0 && probes >= 1);
    let base = decode(z);
    let mut acc = 0.0;
    let mut shifted = z.to_vec();
    for _ in 0..probes {
        for (s, &orig) in shifted.iter_mut().zip(z.iter()) {
            let pm: bool = rng.gen();
            *s = orig + if pm { eps } else { -eps };
        }
        let out = decode(&shifted);
        acc += out
            .iter()
            .zip(base.iter())
            .map(|(a, b)| {
                let d = (a - b) / eps;
                d * d
            })
            .sum::<f64>();
    }
    acc / probes as f64
}

/// Warm-start state for the power method, one per normalized weight matrix.
#[derive(Clone, Debug)]
pub struct SnState<T> {
    pub v: Vec<T>,
}

impl<T: Real> SnState<T> {
    pub fn new(cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let v: Vec<T> = crate::rng::standard_normal_vec(rng, cols)
            .into_iter()
            .map(T::from_f64)
            .collect();
        let mut s = SnState { v };
        s.normalize();
        s
    }

    fn normalize(&mut self) {
        let norm = self
            .v
            .iter()
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
            .max(1e-12);
        let inv = c::<T>(1.0 / norm);
        for x in self.v.iter_mut() {
            *x = *x * inv;
        }
    }
}

/// Outcome of one spectral normalization: the scaled matrix, the sigma
/// estimate, and whether the zero-matrix floor was hit.
pub struct SpectralNorm<T> {
    pub normalized: Tensor<T>,
    pub sigma: f64,
    pub degenerate: bool,
}

/// Power-method estimate of the top singular value of w (rows x cols, with
/// convolution kernels already reshaped to (out, in*k^2) by the caller),
/// then division of the matrix by it. `state` warm-starts the iteration and
/// is updated in place. A zero matrix trips a 1e-12 floor and is returned
/// unchanged with the degenerate flag set.
pub fn spectral_normalize<T: Real>(
    w: &Tensor<T>,
    iters: usize,
    state: &mut SnState<T>,
) -> SpectralNorm<T> {
    assert!(iters >= 1, "spectral_normalize needs iters >= 1");
    let shape = w.shape();
    assert_eq!(shape.len(), 2, "spectral_normalize expects a matrix, got {shape:?}");
    let (rows, cols) = (shape[0], shape[1]);
    assert_eq!(state.v.len(), cols, "power-method state length {} vs cols {cols}", state.v.len());

    let wd = w.data();
    let mut u = vec![T::zero(); rows];
    let mut sigma = 0.0f64;
    for _ in 0..iters {
        // u = W v / |W v|
        for (i, ui) in u.iter_mut().enumerate() {
            let mut acc = T::zero();
            let row = &wd[i * cols..(i + 1) * cols];
            for (a, b) in row.iter().zip(state.v.iter()) {
                acc = acc + *a * *b;
            }
            *ui = acc;
        }
        let un = u.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if un < 1e-12 {
            return SpectralNorm {
                normalized: w.clone(),
                sigma: 1e-12,
                degenerate: true,
            };
        }
        let inv = c::<T>(1.0 / un);
        for x in u.iter_mut() {
            *x = *x * inv;
        }
        // v = W^T u / |W^T u|; sigma = |W^T u|
        let mut v = vec![T::zero(); cols];
        for (i, row) in wd.chunks_exact(cols).enumerate() {
            let ui = u[i];
            for (vj, &a) in v.iter_mut().zip(row.iter()) {
                *vj = *vj + a * ui;
            }
        }
        let vn = v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if vn < 1e-12 {
            return SpectralNorm {
                normalized: w.clone(),
                sigma: 1e-12,
                degenerate: true,
            };
        }
        sigma = vn;
        let inv = c::<T>(1.0 / vn);
        state.v = v;
        for x in state.v.iter_mut() {
            *x = *x * inv;
        }
    }
    let inv_sigma = c::<T>(1.0 / sigma);
    SpectralNorm {
        normalized: w.map(|x| x * inv_sigma),
        sigma,
        degenerate: false,
    }
}
