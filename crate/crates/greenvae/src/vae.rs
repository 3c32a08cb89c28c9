//! Training objective and latent-space diagnostics for the Gaussian VAE:
//! reparametrized sampling, closed-form KL against the standard-normal prior,
//! the running-average balancing of the KL weight, the variance-law check and
//! per-variable reconstruction gain.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Log-variances are clamped to this range before exponentiation.
pub const LOGVAR_CLAMP: f64 = 20.0;

/// Per-sample encoder output: posterior mean and log-variance, length k each.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Self {
        assert_eq!(
            mean.len(),
            logvar.len(),
            "mean length {} vs logvar length {}",
            mean.len(),
            logvar.len()
        );
        assert!(
            mean.iter().chain(logvar.iter()).all(|v| v.is_finite()),
            "non-finite Gaussian parameters"
        );
        GaussianParams { mean, logvar }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// The decomposed objective: reconstruction, KL and the weight on KL.
/// The minimized total is `rec + gamma * kl`.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub rec: f64,
    pub kl: f64,
    pub gamma: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.rec + self.gamma * self.kl
    }
}

/// z = mean + exp(logvar / 2) * noise. The noise is caller-provided so runs
/// stay deterministic; gradients flow to mean and logvar only.
pub fn reparametrize(params: &GaussianParams, noise: &[f64]) -> Vec<f64> {
    assert_eq!(
        noise.len(),
        params.dim(),
        "noise length {} vs latent dim {}",
        noise.len(),
        params.dim()
    );
    params
        .mean
        .iter()
        .zip(params.logvar.iter())
        .zip(noise.iter())
        .map(|((&m, &lv), &e)| m + (lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP) / 2.0).exp() * e)
        .collect()
}

/// Tape version of [`reparametrize`] for [N,k] batches; `noise` must be a
/// constant node of the same shape.
pub fn reparametrize_on_tape<T: Real>(
    tape: &mut Tape<T>,
    mean: NodeId,
    logvar: NodeId,
    noise: NodeId,
) -> NodeId {
    assert_eq!(
        tape.shape(mean),
        tape.shape(noise),
        "reparametrize: mean shape {:?} vs noise shape {:?}",
        tape.shape(mean),
        tape.shape(noise)
    );
    let clamped = tape.clamp_range(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    let half = tape.scale(clamped, 0.5);
    let std = tape.exp(half);
    let scaled = tape.mul(std, noise);
    tape.add(mean, scaled)
}

/// Closed-form KL(G(mean, exp(logvar)) || G(0, I)), summed over dimensions:
/// 0.5 * sum_i (mean_i^2 + exp(logvar_i) - logvar_i - 1). Nonnegative, zero
/// exactly at (0, 0).
pub fn kl_closed_form(params: &GaussianParams) -> f64 {
    0.5 * params
        .mean
        .iter()
        .zip(params.logvar.iter())
        .map(|(&m, &lv)| {
            let lv = lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
            m * m + lv.exp() - lv - 1.0
        })
        .sum::<f64>()
}

/// Tape version of the closed-form KL for [N,k] batches, averaged over the
/// batch (summed over latent dimensions).
pub fn kl_on_tape<T: Real>(tape: &mut Tape<T>, mean: NodeId, logvar: NodeId) -> NodeId {
    let n = tape.shape(mean)[0];
    let clamped = tape.clamp_range(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    let m2 = tape.square(mean);
    let var = tape.exp(clamped);
    let sum_m2 = tape.sum_all(m2);
    let sum_var = tape.sum_all(var);
    let sum_lv = tape.sum_all(clamped);
    let k_total = tape.value(mean).numel() as f64;
    let a = tape.add(sum_m2, sum_var);
    let b = tape.sub(a, sum_lv);
    tape.affine(b, 0.5 / n as f64, -0.5 * k_total / n as f64)
}

/// Reconstruction term: mean over the batch of the pixel-summed squared
/// error, as a tape node. x and x_hat must share shape [N, ...].
pub fn rec_on_tape<T: Real>(tape: &mut Tape<T>, x: NodeId, x_hat: NodeId) -> NodeId {
    assert_eq!(
        tape.shape(x),
        tape.shape(x_hat),
        "reconstruction: shape {:?} vs {:?}",
        tape.shape(x),
        tape.shape(x_hat)
    );
    let n = tape.shape(x)[0];
    let d = tape.sub(x_hat, x);
    let sq = tape.square(d);
    let s = tape.sum_all(sq);
    tape.scale(s, 1.0 / n as f64)
}

/// Full objective on the tape: returns (total, rec, kl) node ids with
/// total = rec + gamma * kl.
pub fn elbo_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    x_hat: NodeId,
    mean: NodeId,
    logvar: NodeId,
    gamma: f64,
) -> (NodeId, NodeId, NodeId) {
    let rec = rec_on_tape(tape, x, x_hat);
    let kl = kl_on_tape(tape, mean, logvar);
    let weighted = tape.scale(kl, gamma);
    let total = tape.add(rec, weighted);
    (total, rec, kl)
}

/// Plain (non-tape) evaluation of the objective decomposition for a batch:
/// x, x_hat of shape [N, ...]; means/logvars of shape [N, k].
pub fn elbo_loss<T: Real>(
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
    means: &Tensor<T>,
    logvars: &Tensor<T>,
    gamma: f64,
) -> ElboTerms {
    assert_eq!(
        x.shape(),
        x_hat.shape(),
        "elbo_loss: shape {:?} vs {:?}",
        x.shape(),
        x_hat.shape()
    );
    let n = x.shape()[0];
    let rec: f64 = x
        .data()
        .iter()
        .zip(x_hat.data().iter())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let k = means.shape()[1];
    let mut kl = 0.0;
    for i in 0..n {
        let params = GaussianParams::new(
            means.data()[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect(),
            logvars.data()[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect(),
        );
        kl += kl_closed_form(&params);
    }
    ElboTerms {
        rec,
        kl: kl / n as f64,
        gamma,
    }
}

/// Running-average balancing of the KL weight: gamma tracks the current
/// per-pixel reconstruction error so neither term drowns the other as the
/// reconstruction improves.
#[derive(Clone, Debug)]
pub struct BalanceState {
    ema_rec: Option<f64>,
    pub decay: f64,
    pub base_gamma: f64,
}

impl BalanceState {
    pub fn new(decay: f64, base_gamma: f64) -> Self {
        assert!(
            decay > 0.0 && decay < 1.0,
            "balance decay must be in (0, 1), got {decay}"
        );
        assert!(base_gamma > 0.0, "base_gamma must be positive, got {base_gamma}");
        BalanceState {
            ema_rec: None,
            decay,
            base_gamma,
        }
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema_rec
    }

    /// Feed the batch's per-pixel reconstruction error; returns the gamma to
    /// use for the next step. The first call seeds the average directly.
    pub fn update(&mut self, batch_rec_per_pixel: f64) -> Result<f64> {
        if !(batch_rec_per_pixel >= 0.0) {
            return Err(Error::numeric(format!(
                "negative or non-finite reconstruction error {batch_rec_per_pixel}"
            )));
        }
        let ema = match self.ema_rec {
            None => batch_rec_per_pixel,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * batch_rec_per_pixel,
        };
        self.ema_rec = Some(ema);
        Ok(self.base_gamma * ema)
    }

    /// Restore a saved average (checkpoint resume).
    pub fn restore(&mut self, ema: Option<f64>) {
        self.ema_rec = ema;
    }
}

/// Variance law: Var_x[mu_i] + E_x[sigma^2_i], averaged over the k latent
/// dimensions. Near 1 when the KL regularization is doing its job; near 0
/// when the space has collapsed. `means` and `vars` are row-major [n, k].
pub fn variance_law(means: &[f64], vars: &[f64], k: usize) -> Result<f64> {
    if means.is_empty() || k == 0 || means.len() % k != 0 || means.len() != vars.len() {
        return Err(Error::data(format!(
            "variance_law: need matching nonempty [n, k] inputs, got {} and {} values for k = {k}",
            means.len(),
            vars.len()
        )));
    }
    let n = means.len() / k;
    let mut total = 0.0;
    for dim in 0..k {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut var_mean = 0.0;
        for row in 0..n {
            let m = means[row * k + dim];
            sum += m;
            sum_sq += m * m;
            var_mean += vars[row * k + dim];
        }
        let mean_of_means = sum / n as f64;
        let var_of_means = (sum_sq / n as f64 - mean_of_means * mean_of_means).max(0.0);
        total += var_of_means + var_mean / n as f64;
    }
    Ok(total / k as f64)
}

/// Per-dimension average KL over a dataset of [n, k] means and logvars:
/// the per-variable share of the regularizer, used by collapse diagnostics.
pub fn kl_per_variable(means: &[f64], logvars: &[f64], k: usize) -> Vec<f64> {
    assert!(k > 0 && means.len() % k == 0 && means.len() == logvars.len());
    let n = means.len() / k;
    let mut out = vec![0.0; k];
    for row in 0..n {
        for dim in 0..k {
            let m = means[row * k + dim];
            let lv = logvars[row * k + dim].clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
            out[dim] += 0.5 * (m * m + lv.exp() - lv - 1.0);
        }
    }
    for v in out.iter_mut() {
        *v /= n as f64;
    }
    out
}

/// Reconstruction gain of one latent variable: the increase in reconstruction
/// loss when that variable is masked with its dataset mean. Near-zero gain
/// (with near-zero per-variable KL) flags a collapsed variable.
///
/// `codes` are the deterministic encoder means [n, k]; `images` the matching
/// inputs [n, ...]; `decode` maps a code batch to reconstructions.
pub fn reconstruction_gain<T: Real>(
    codes: &Tensor<T>,
    images: &Tensor<T>,
    latent_index: usize,
    mut decode: impl FnMut(&Tensor<T>) -> Tensor<T>,
) -> Result<f64> {
    let (n, k) = (codes.shape()[0], codes.shape()[1]);
    if latent_index >= k {
        return Err(Error::data(format!(
            "latent index {latent_index} out of range for k = {k}"
        )));
    }
    assert_eq!(images.shape()[0], n, "codes/images row mismatch");

    let rec_loss = |decoded: &Tensor<T>| -> f64 {
        decoded
            .data()
            .iter()
            .zip(images.data().iter())
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum::<f64>()
            / n as f64
    };

    let active = decode(codes);
    let l_active = rec_loss(&active);

    let col_mean: f64 = (0..n)
        .map(|i| codes.data()[i * k + latent_index].as_f64())
        .sum::<f64>()
        / n as f64;
    let mut masked = codes.clone();
    for i in 0..n {
        masked.data_mut()[i * k + latent_index] = T::from_f64(col_mean);
    }
    let masked_out = decode(&masked);
    let l_masked = rec_loss(&masked_out);

    Ok(l_masked - l_active)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kl_zero_at_prior() {
        for k in [1usize, 4, 32] {
            let p = GaussianParams::new(vec![0.0; k], vec![0.0; k]);
            assert_eq!(kl_closed_form(&p), 0.0);
        }
    }

    #[test]
    fn kl_unit_mean_case() {
        // k = 1, mean 1, logvar 0: 0.5 * (1 + 1 - 0 - 1) = 0.5
        let p = GaussianParams::new(vec![1.0], vec![0.0]);
        assert_relative_eq!(kl_closed_form(&p), 0.5);
    }

    #[test]
    fn kl_variance_two_case() {
        // mean 0, sigma^2 = 2: 0.5 * (2 - ln 2 - 1) ~= 0.15343
        let p = GaussianParams::new(vec![0.0], vec![2.0f64.ln()]);
        assert_relative_eq!(kl_closed_form(&p), 0.5 * (2.0 - 2.0f64.ln() - 1.0), epsilon = 1e-12);
        assert_relative_eq!(kl_closed_form(&p), 0.15343, epsilon = 1e-4);
    }

    #[test]
    fn reparametrize_edges() {
        let p = GaussianParams::new(vec![1.5, -0.5], vec![0.0, 0.0]);
        // noise 0 -> z = mean
        assert_eq!(reparametrize(&p, &[0.0, 0.0]), vec![1.5, -0.5]);
        // logvar 0, noise 1 -> mean + 1
        assert_eq!(reparametrize(&p, &[1.0, 1.0]), vec![2.5, 0.5]);
    }

    #[test]
    fn elbo_decomposition_matches() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[0.1, 0.9, 0.4, 0.3, 0.8, 0.2]);
        let x_hat = Tensor::<f64>::from_f64(&[2, 3], &[0.2, 0.7, 0.4, 0.5, 0.6, 0.1]);
        let means = Tensor::<f64>::from_f64(&[2, 2], &[0.3, -0.2, 0.1, 0.4]);
        let logvars = Tensor::<f64>::from_f64(&[2, 2], &[-0.1, 0.2, 0.0, -0.3]);
        let terms = elbo_loss(&x, &x_hat, &means, &logvars, 0.7);
        assert_relative_eq!(terms.total(), terms.rec + 0.7 * terms.kl, epsilon = 1e-15);
        // gamma = 0: total is the reconstruction alone.
        let bare = elbo_loss(&x, &x_hat, &means, &logvars, 0.0);
        assert_eq!(bare.total(), bare.rec);
        // identical reconstruction at the prior: total 0.
        let zero_means = Tensor::<f64>::zeros(&[2, 2]);
        let zero_lv = Tensor::<f64>::zeros(&[2, 2]);
        let perfect = elbo_loss(&x, &x, &zero_means, &zero_lv, 1.0);
        assert_eq!(perfect.total(), 0.0);
    }

    #[test]
    fn balance_running_average() {
        let mut s = BalanceState::new(0.9, 2.0);
        // first call seeds the average
        assert_relative_eq!(s.update(1.0).unwrap(), 2.0);
        // decay 0.9, then 0.0 arrives: ema 0.9
        assert_relative_eq!(s.update(0.0).unwrap(), 2.0 * 0.9);
        // constant input converges to base_gamma * r
        let mut s = BalanceState::new(0.9, 3.0);
        let mut g = 0.0;
        for _ in 0..400 {
            g = s.update(0.25).unwrap();
        }
        assert_relative_eq!(g, 0.75, epsilon = 1e-9);
        assert!(s.update(-1.0).is_err());
    }

    #[test]
    fn variance_law_cases() {
        // mu = 0, sigma^2 = 1 everywhere -> exactly 1
        let n = 50;
        let means = vec![0.0; n * 3];
        let vars = vec![1.0; n * 3];
        assert_relative_eq!(variance_law(&means, &vars, 3).unwrap(), 1.0);
        // all zeros -> 0 (collapsed space)
        assert_relative_eq!(variance_law(&means, &vec![0.0; n * 3], 3).unwrap(), 0.0);
        assert!(variance_law(&[], &[], 3).is_err());
    }

    #[test]
    fn variance_law_synthetic_moments() {
        // mu ~ N(0, 0.5), sigma^2 = 0.5: law ~= 1.
        let mut rng = crate::rng::stream(11, "vl");
        let n = 100_000;
        let means: Vec<f64> = (0..n)
            .map(|_| crate::rng::next_standard_normal(&mut rng) * 0.5f64.sqrt())
            .collect();
        let vars = vec![0.5; n];
        let law = variance_law(&means, &vars, 1).unwrap();
        assert!((law - 1.0).abs() < 0.02, "law = {law}");
    }

    #[test]
    fn reparametrize_gradient_flows_to_mean_only() {
        // dz/dmean is 1 elementwise; no gradient reaches the noise constant.
        let mut tape: Tape<f64> = Tape::new();
        let mean = tape.leaf(Tensor::from_f64(&[1, 2], &[0.4, -0.2]));
        let logvar = tape.leaf(Tensor::from_f64(&[1, 2], &[0.3, -0.5]));
        let noise = tape.constant(Tensor::from_f64(&[1, 2], &[0.7, 1.3]));
        let z = reparametrize_on_tape(&mut tape, mean, logvar, noise);
        let loss = tape.sum_all(z);
        let grads = tape.backward(loss);
        let dmean = grads.get(mean, &[1, 2]);
        assert_eq!(dmean.data(), &[1.0, 1.0]);
        assert!(grads.get_opt(noise).is_none());
    }

    #[test]
    fn tape_and_plain_elbo_agree() {
        let xv = Tensor::<f64>::from_f64(&[2, 4], &[0.1, 0.5, 0.2, 0.9, 0.3, 0.4, 0.8, 0.6]);
        let xh = Tensor::<f64>::from_f64(&[2, 4], &[0.2, 0.4, 0.2, 0.8, 0.1, 0.5, 0.9, 0.5]);
        let mv = Tensor::<f64>::from_f64(&[2, 2], &[0.3, -0.6, 0.2, 0.1]);
        let lv = Tensor::<f64>::from_f64(&[2, 2], &[0.2, -0.4, 0.0, 0.3]);
        let plain = elbo_loss(&xv, &xh, &mv, &lv, 0.35);

        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(xv);
        let xhat = tape.constant(xh);
        let mean = tape.leaf(mv);
        let logvar = tape.leaf(lv);
        let (total, rec, kl) = elbo_on_tape(&mut tape, x, xhat, mean, logvar, 0.35);
        assert_relative_eq!(tape.value(rec).scalar_value(), plain.rec, epsilon = 1e-12);
        assert_relative_eq!(tape.value(kl).scalar_value(), plain.kl, epsilon = 1e-12);
        assert_relative_eq!(tape.value(total).scalar_value(), plain.total(), epsilon = 1e-12);
    }

    #[test]
    fn planted_collapse_has_zero_gain() {
        // Linear decoder x = A z with column i zeroed: gain(i) ~ 0, and a
        // toy decoder with |a| >> |b| ranks gain(0) > gain(1).
        let n = 64;
        let k = 3;
        let mut rng = crate::rng::stream(3, "gain");
        let mut codes = Vec::with_capacity(n * k);
        for _ in 0..n * k {
            codes.push(crate::rng::next_standard_normal(&mut rng));
        }
        let codes = Tensor::<f64>::from_f64(&[n, k], &codes);
        // decoder weights: strong on z0, weak on z1, dead on z2
        let a = [3.0, 0.5, 0.0];
        let decode = |z: &Tensor<f64>| -> Tensor<f64> {
            let rows = z.shape()[0];
            let data: Vec<f64> = (0..rows)
                .map(|i| (0..k).map(|j| a[j] * z.data()[i * k + j]).sum())
                .collect();
            Tensor::from_f64(&[rows, 1], &data)
        };
        let images = decode(&codes);
        let g0 = reconstruction_gain(&codes, &images, 0, decode).unwrap();
        let g1 = reconstruction_gain(&codes, &images, 1, decode).unwrap();
        let g2 = reconstruction_gain(&codes, &images, 2, decode).unwrap();
        assert!(g2 < 1e-6, "dead variable gain {g2}");
        assert!(g0 > g1 && g1 > g2, "gains {g0} {g1} {g2}");
        assert!(reconstruction_gain(&codes, &images, 7, decode).is_err());
    }

    #[test]
    fn masking_with_own_value_is_degenerate_zero() {
        // If the masked value already equals the dataset mean for every row,
        // the masked pass is identical and the gain is exactly zero.
        let codes = Tensor::<f64>::from_f64(&[4, 2], &[0.5, 1.0, 0.5, 2.0, 0.5, -1.0, 0.5, 0.5]);
        let images = Tensor::<f64>::from_f64(&[4, 1], &[0.0, 0.1, 0.2, 0.3]);
        let decode = |z: &Tensor<f64>| -> Tensor<f64> {
            let rows = z.shape()[0];
            Tensor::from_f64(
                &[rows, 1],
                &(0..rows).map(|i| z.data()[i * 2]).collect::<Vec<_>>(),
            )
        };
        let g = reconstruction_gain(&codes, &images, 0, decode).unwrap();
        assert_eq!(g, 0.0);
    }
}
