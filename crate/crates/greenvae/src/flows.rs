//! Inverse autoregressive flow chains (z_t = mu_t + sigma_t * z_{t-1} with
//! exact log-density bookkeeping) and a small hierarchical VAE with grouped
//! latents, bidirectional inference, per-group KL balancing and an optional
//! channel-modulation (FiLM) latent pathway.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{convt_same_geom, Conv2dGeom};
use crate::layers::{film_modulate, uniform_init, BnStats, ParamSet, BN_EPS};
use crate::real::Real;
use crate::rng::{standard_normal_vec, stream};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::vae::LOGVAR_CLAMP;

/// Raw scale outputs are clamped to this range before exponentiation, so
/// sigma stays in [e^-10, e^10].
pub const FLOW_LOG_SCALE_CLAMP: f64 = 10.0;

// ── Realized affine flow steps ──────────────────────────────────────────

/// One realized affine step: z -> mu + sigma * z, elementwise.
#[derive(Clone, Debug)]
pub struct FlowStep {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl FlowStep {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Self {
        assert_eq!(mu.len(), sigma.len(), "flow step mu/sigma lengths");
        assert!(
            sigma.iter().all(|&s| s > 0.0),
            "flow step sigma must be strictly positive"
        );
        FlowStep { mu, sigma }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Apply the chain in order; an empty chain returns z0.
pub fn iaf_forward(z0: &[f64], steps: &[FlowStep]) -> Vec<f64> {
    let mut z = z0.to_vec();
    for step in steps {
        assert_eq!(step.dim(), z.len(), "flow step dimension {} vs state {}", step.dim(), z.len());
        for (i, v) in z.iter_mut().enumerate() {
            *v = step.mu[i] + step.sigma[i] * *v;
        }
    }
    z
}

/// Collapse a chain into the single equivalent affine step
/// (mu, sigma) with sigma = prod sigma_t and mu built by composition.
pub fn iaf_fuse(steps: &[FlowStep]) -> FlowStep {
    assert!(!steps.is_empty(), "cannot fuse an empty chain");
    let k = steps[0].dim();
    let mut mu = vec![0.0; k];
    let mut sigma = vec![1.0; k];
    for step in steps {
        assert_eq!(step.dim(), k);
        for i in 0..k {
            mu[i] = step.mu[i] + step.sigma[i] * mu[i];
            sigma[i] *= step.sigma[i];
        }
    }
    FlowStep::new(mu, sigma)
}

/// Exact log-density after the chain: log q(z_T) = log q(z_0) - sum over
/// steps and dimensions of log sigma.
pub fn iaf_log_density(log_q_z0: f64, steps: &[FlowStep]) -> f64 {
    let mut out = log_q_z0;
    for step in steps {
        for &s in &step.sigma {
            out -= s.ln();
        }
    }
    out
}

/// Standard-normal-family log density, diagonal case.
pub fn gaussian_log_density(z: &[f64], mean: &[f64], logvar: &[f64]) -> f64 {
    const LN_2PI: f64 = 1.8378770664093453;
    z.iter()
        .zip(mean.iter())
        .zip(logvar.iter())
        .map(|((&z, &m), &lv)| {
            let var = lv.exp();
            -0.5 * ((z - m) * (z - m) / var + lv + LN_2PI)
        })
        .sum()
}

// ── Masked autoregressive step networks ─────────────────────────────────

/// Mask for the z-input block of a step network: latent dimension j may
/// influence the outputs of dimension i only if j < i, which keeps the flow
/// Jacobian triangular with diagonal sigma_t. The output layout is
/// [mu_0..mu_{k-1}, s_0..s_{k-1}].
pub fn autoregressive_mask<T: Real>(ctx_dim: usize, k: usize) -> Tensor<T> {
    let in_dim = ctx_dim + k;
    let out_dim = 2 * k;
    let mut data = vec![T::zero(); in_dim * out_dim];
    for row in 0..in_dim {
        for col in 0..out_dim {
            let target_dim = col % k;
            let allowed = if row < ctx_dim {
                true
            } else {
                (row - ctx_dim) < target_dim
            };
            if allowed {
                data[row * out_dim + col] = T::one();
            }
        }
    }
    Tensor::new(&[in_dim, out_dim], data)
}

/// Parameters of one masked flow step.
pub fn init_flow_step_params<T: Real>(
    params: &mut ParamSet<T>,
    prefix: &str,
    ctx_dim: usize,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    params.add(
        &format!("{prefix}.w"),
        uniform_init(&[ctx_dim + k, 2 * k], ctx_dim + k, rng),
    );
    params.add(&format!("{prefix}.b"), Tensor::zeros(&[2 * k]));
}

/// Run one masked step on the tape: returns (z_t, log_sigma_rows [N,k]).
pub fn flow_step_on_tape<T: Real>(
    tape: &mut Tape<T>,
    prefix: &str,
    param_ids: &HashMap<String, NodeId>,
    context: NodeId,
    z_prev: NodeId,
    mask: NodeId,
) -> (NodeId, NodeId) {
    let k = tape.shape(z_prev)[1];
    let joined = tape.concat_last(context, z_prev);
    let w = param_ids[&format!("{prefix}.w")];
    let b = param_ids[&format!("{prefix}.b")];
    let wm = tape.mul(w, mask);
    let lin = tape.matmul(joined, wm);
    let lin = tape.add_bias(lin, b);
    let mu = tape.slice_last(lin, 0, k);
    let s_raw = tape.slice_last(lin, k, k);
    let s_clamped = tape.clamp_range(s_raw, -FLOW_LOG_SCALE_CLAMP, FLOW_LOG_SCALE_CLAMP);
    let sigma = tape.exp(s_clamped);
    let scaled = tape.mul(sigma, z_prev);
    let z_t = tape.add(mu, scaled);
    (z_t, s_clamped)
}

/// Single-sample KL estimate for the flow posterior, batch-averaged:
/// E[log q(z_T|x) - log p(z_T)] with
/// log q(z_T|x) = log q(z_0|x) - sum_t sum_i log sigma_{t,i} and z_0 drawn by
/// the reparametrization with the supplied constant noise.
pub fn iaf_kl_on_tape<T: Real>(
    tape: &mut Tape<T>,
    logvar: NodeId,
    noise: NodeId,
    log_sigma_rows: &[NodeId],
    z_t: NodeId,
) -> NodeId {
    let n = tape.shape(logvar)[0];
    // log q(z0|x) = -0.5 * sum_i (eps_i^2 + logvar_i) + const; the constant
    // cancels against log p's.
    let lv_clamped = tape.clamp_range(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    let eps2 = tape.square(noise);
    let a = tape.add(eps2, lv_clamped);
    let sum_a = tape.sum_all(a);
    let log_q0 = tape.scale(sum_a, -0.5);
    // - sum log sigma over steps
    let mut log_q = log_q0;
    for &rows in log_sigma_rows {
        let s = tape.sum_all(rows);
        log_q = tape.sub(log_q, s);
    }
    // - log p(z_T) = +0.5 * sum z_T^2 (constant cancelled)
    let zt2 = tape.square(z_t);
    let sum_zt2 = tape.sum_all(zt2);
    let half_zt2 = tape.scale(sum_zt2, 0.5);
    let total = tape.add(log_q, half_zt2);
    tape.scale(total, 1.0 / n as f64)
}

// ── Grouped latents and balancing ───────────────────────────────────────

/// KL between diagonal Gaussians with arbitrary prior:
/// 0.5 * sum (lv_p - lv_q + (e^{lv_q} + (mu_q - mu_p)^2) / e^{lv_p} - 1).
pub fn gaussian_kl_general(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    assert!(
        mu_q.len() == lv_q.len() && mu_p.len() == lv_p.len() && mu_q.len() == mu_p.len(),
        "gaussian_kl_general: length mismatch {} {} {} {}",
        mu_q.len(),
        lv_q.len(),
        mu_p.len(),
        lv_p.len()
    );
    let mut acc = 0.0;
    for i in 0..mu_q.len() {
        let lq = lv_q[i].clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
        let lp = lv_p[i].clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
        let dm = mu_q[i] - mu_p[i];
        acc += lp - lq + (lq.exp() + dm * dm) / lp.exp() - 1.0;
    }
    0.5 * acc
}

/// Tape version, batch-averaged over [N,k] nodes.
pub fn gaussian_kl_general_on_tape<T: Real>(
    tape: &mut Tape<T>,
    mu_q: NodeId,
    lv_q: NodeId,
    mu_p: NodeId,
    lv_p: NodeId,
) -> NodeId {
    let n = tape.shape(mu_q)[0];
    let lq = tape.clamp_range(lv_q, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    let lp = tape.clamp_range(lv_p, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    let diff_lv = tape.sub(lp, lq);
    let var_q = tape.exp(lq);
    let dm = tape.sub(mu_q, mu_p);
    let dm2 = tape.square(dm);
    let num = tape.add(var_q, dm2);
    let var_p = tape.exp(lp);
    let ratio = tape.div(num, var_p);
    let inner = tape.add(diff_lv, ratio);
    let sum = tape.sum_all(inner);
    let k_total = tape.value(mu_q).numel() as f64;
    // 0.5 * (sum - N*k) / N
    tape.affine(sum, 0.5 / n as f64, -0.5 * k_total / n as f64)
}

/// One group's posterior/prior parameters and its balancing weight.
#[derive(Clone, Debug)]
pub struct GroupKl {
    pub gamma: f64,
    pub mu_q: Vec<f64>,
    pub lv_q: Vec<f64>,
    pub mu_p: Vec<f64>,
    pub lv_p: Vec<f64>,
}

/// Weighted hierarchical KL: sum over groups of gamma_l * KL_l.
pub fn hierarchical_kl(groups: &[GroupKl]) -> f64 {
    groups
        .iter()
        .map(|g| g.gamma * gaussian_kl_general(&g.mu_q, &g.lv_q, &g.mu_p, &g.lv_p))
        .sum()
}

/// Per-group KL balancing state: gamma_l proportional to the group's size
/// times its smoothed KL, normalized to mean 1.
#[derive(Clone, Debug)]
pub struct GroupBalance {
    ema: Vec<f64>,
    pub decay: f64,
    pub dims: Vec<usize>,
    gammas: Vec<f64>,
}

impl GroupBalance {
    pub fn new(dims: Vec<usize>, decay: f64) -> Self {
        assert!(!dims.is_empty());
        let n = dims.len();
        GroupBalance {
            ema: vec![0.0; n],
            decay,
            dims,
            gammas: vec![1.0; n],
        }
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    /// Feed the observed per-group KLs; returns the refreshed gammas
    /// (mean exactly 1; all 1 when every KL is zero).
    pub fn update(&mut self, observed_kls: &[f64]) -> &[f64] {
        assert_eq!(
            observed_kls.len(),
            self.dims.len(),
            "group count {} vs {}",
            observed_kls.len(),
            self.dims.len()
        );
        for (e, &kl) in self.ema.iter_mut().zip(observed_kls.iter()) {
            *e = if *e == 0.0 { kl } else { self.decay * *e + (1.0 - self.decay) * kl };
        }
        let weighted: Vec<f64> = self
            .ema
            .iter()
            .zip(self.dims.iter())
            .map(|(&e, &d)| e * d as f64)
            .collect();
        let mean = weighted.iter().sum::<f64>() / weighted.len() as f64;
        if mean <= 0.0 {
            self.gammas = vec![1.0; weighted.len()];
        } else {
            self.gammas = weighted.iter().map(|&w| w / mean).collect();
        }
        &self.gammas
    }

    pub fn restore(&mut self, ema: Vec<f64>, gammas: Vec<f64>) {
        assert_eq!(ema.len(), self.ema.len());
        assert_eq!(gammas.len(), self.gammas.len());
        self.ema = ema;
        self.gammas = gammas;
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }
}

// ── Hierarchical VAE ────────────────────────────────────────────────────

/// Desk-scale bounds: at most 2 scales, 3 groups per scale, 5 groups total.
pub const HVAE_MAX_SCALES: usize = 2;
pub const HVAE_MAX_GROUPS_PER_SCALE: usize = 3;
pub const HVAE_MAX_TOTAL_GROUPS: usize = 5;

#[derive(Clone, Debug)]
pub struct HvaeConfig {
    pub input_side: usize,
    pub channels: usize,
    pub base_channels: usize,
    /// Groups per scale, coarsest scale first in the top-down order; the
    /// vector length is the number of scales.
    pub groups_per_scale: Vec<usize>,
    /// Latent channels (spatial mode) or latent dimensions (film mode) per group.
    pub latent_dim: usize,
    /// Channel modulation instead of spatial latent concatenation.
    pub film: bool,
    /// Ignore the top-down state in the posterior (A/B flag; the default
    /// bidirectional inference combines both).
    pub bottom_up_only: bool,
}

impl HvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = self.groups_per_scale.len();
        if scales == 0 || scales > HVAE_MAX_SCALES {
            return Err(Error::config(format!(
                "hvae supports 1..={HVAE_MAX_SCALES} scales, got {scales}"
            )));
        }
        if self.groups_per_scale.iter().any(|&g| g == 0 || g > HVAE_MAX_GROUPS_PER_SCALE) {
            return Err(Error::config(format!(
                "hvae groups per scale must be 1..={HVAE_MAX_GROUPS_PER_SCALE}, got {:?}",
                self.groups_per_scale
            )));
        }
        let total: usize = self.groups_per_scale.iter().sum();
        if total > HVAE_MAX_TOTAL_GROUPS {
            return Err(Error::config(format!(
                "hvae is desk-scale: at most {HVAE_MAX_TOTAL_GROUPS} groups in total, got {total}"
            )));
        }
        if self.input_side % (1 << (scales + 1)) != 0 {
            return Err(Error::config(format!(
                "hvae input side {} must be divisible by {}",
                self.input_side,
                1 << (scales + 1)
            )));
        }
        if self.base_channels == 0 || self.latent_dim == 0 || self.channels == 0 {
            return Err(Error::config("hvae dims must be positive"));
        }
        Ok(())
    }

    fn scales(&self) -> usize {
        self.groups_per_scale.len()
    }

    /// Channels of the top-down state at scale s (s = 0 is coarsest).
    fn state_channels(&self, s: usize) -> usize {
        self.base_channels << (self.scales() - 1 - s)
    }

    /// Spatial side at scale s.
    fn state_side(&self, s: usize) -> usize {
        self.input_side >> (self.scales() - s)
    }

    /// Total latent dimensions per sample of one group at scale s.
    pub fn group_total_dims(&self, s: usize) -> usize {
        if self.film {
            self.latent_dim
        } else {
            self.state_side(s) * self.state_side(s) * self.latent_dim
        }
    }

    /// Flat list of per-group total dims in top-down order.
    pub fn group_dims(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (s, &g) in self.groups_per_scale.iter().enumerate() {
            for _ in 0..g {
                out.push(self.group_total_dims(s));
            }
        }
        out
    }
}

/// The trainable hierarchical model: encoder stack, top-down prior/posterior
/// heads, latent injectors and decoder, all on one parameter set.
pub struct Hvae {
    pub cfg: HvaeConfig,
    pub params: ParamSet<f32>,
    pub bn: BnStats<f32>,
    pub balance: GroupBalance,
}

/// What one training forward pass produces.
pub struct HvaeForward {
    pub x_hat: NodeId,
    /// Batch-mean KL node per group, top-down order.
    pub group_kls: Vec<NodeId>,
    /// Flattened posterior (mean, logvar) node per group when encoding.
    pub group_posteriors: Vec<(NodeId, NodeId)>,
}

fn conv_geom(shape: &[usize], in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Conv2dGeom {
    Conv2dGeom::same(shape[0], shape[1], shape[2], in_ch, kernel, out_ch, stride)
}

/// Build the model with fan-in-scaled init, deterministic per seed.
pub fn build_hvae(cfg: &HvaeConfig, seed: u64) -> Result<Hvae> {
    cfg.validate()?;
    let mut rng = stream(seed, "init.hvae");
    let mut params: ParamSet<f32> = ParamSet::new();
    let mut bn = BnStats::new();
    let scales = cfg.scales();

    let mut add_conv = |params: &mut ParamSet<f32>, name: &str, ic: usize, oc: usize, kernel: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        params.add(&format!("hvae.{name}.w"), uniform_init(&[kernel, kernel, ic, oc], kernel * kernel * ic, rng));
        params.add(&format!("hvae.{name}.b"), Tensor::zeros(&[oc]));
    };
    let mut add_bn = |params: &mut ParamSet<f32>, bn: &mut BnStats<f32>, name: &str, ch: usize| {
        params.add(&format!("hvae.{name}.gamma"), Tensor::filled(&[ch], 1.0f32));
        params.add(&format!("hvae.{name}.beta"), Tensor::zeros(&[ch]));
        bn.init(&format!("hvae.{name}"), ch);
    };
    let mut add_dense = |params: &mut ParamSet<f32>, name: &str, ind: usize, outd: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        params.add(&format!("hvae.{name}.w"), uniform_init(&[ind, outd], ind, rng));
        params.add(&format!("hvae.{name}.b"), Tensor::zeros(&[outd]));
    };

    // Bottom-up stack: finest first. enc_s maps scale index (coarse order)
    // to channels; encoder conv e0 downsamples input -> finest features.
    // For 2 scales: e0: channels->base at side/2; e1: base->2*base at side/4.
    let mut in_ch = cfg.channels;
    for s in 0..scales {
        let out_ch = cfg.base_channels << s;
        add_conv(&mut params, &format!("enc{s}"), in_ch, out_ch, 4, &mut rng);
        add_bn(&mut params, &mut bn, &format!("enc{s}_bn"), out_ch);
        in_ch = out_ch;
    }

    // Trainable top-down start tensor, flattened (broadcast to the batch at
    // forward time).
    let top_side = cfg.state_side(0);
    let top_ch = cfg.state_channels(0);
    params.add(
        "hvae.h",
        uniform_init(&[1, top_side * top_side * top_ch], top_side * top_side * top_ch, &mut rng),
    );

    // Per-group heads and injectors.
    let mut l = 0usize;
    for (s, &groups) in cfg.groups_per_scale.iter().enumerate() {
        let ch = cfg.state_channels(s);
        // encoder features at this scale have cfg.base_channels << (scales-1-s)
        // channels as well (the bottom-up stack doubles per downsample).
        let enc_ch = ch;
        for _ in 0..groups {
            if cfg.film {
                add_dense(&mut params, &format!("g{l}.prior"), ch, 2 * cfg.latent_dim, &mut rng);
                let post_in = if cfg.bottom_up_only { enc_ch } else { ch + enc_ch };
                add_dense(&mut params, &format!("g{l}.post"), post_in, 2 * cfg.latent_dim, &mut rng);
                add_dense(&mut params, &format!("g{l}.inject"), cfg.latent_dim, 2 * ch, &mut rng);
            } else {
                add_conv(&mut params, &format!("g{l}.prior"), ch, 2 * cfg.latent_dim, 1, &mut rng);
                let post_in = if cfg.bottom_up_only { enc_ch } else { ch + enc_ch };
                add_conv(&mut params, &format!("g{l}.post"), post_in, 2 * cfg.latent_dim, 1, &mut rng);
                add_conv(&mut params, &format!("g{l}.inject"), cfg.latent_dim, ch, 1, &mut rng);
            }
            // Residual refinement cell after each latent injection.
            add_bn(&mut params, &mut bn, &format!("g{l}.cell_bn"), ch);
            add_conv(&mut params, &format!("g{l}.cell"), ch, ch, 3, &mut rng);
            l += 1;
        }
        if s + 1 < scales {
            // Upsample the top-down state to the next (finer) scale.
            let next_ch = cfg.state_channels(s + 1);
            add_conv(&mut params, &format!("up{s}"), ch, next_ch, 4, &mut rng);
            add_bn(&mut params, &mut bn, &format!("up{s}_bn"), next_ch);
        }
    }

    // Decoder: one more upsample back to image resolution, then the output conv.
    let last_ch = cfg.state_channels(scales - 1);
    let dec_ch = (last_ch / 2).max(2);
    add_conv(&mut params, "dec", last_ch, dec_ch, 4, &mut rng);
    add_bn(&mut params, &mut bn, "dec_bn", dec_ch);
    add_conv(&mut params, "out", dec_ch, cfg.channels, 4, &mut rng);

    let dims = cfg.group_dims();
    Ok(Hvae {
        cfg: cfg.clone(),
        params,
        bn,
        balance: GroupBalance::new(dims, 0.9),
    })
}

impl Hvae {
    fn conv_on<T: Real>(
        tape: &mut Tape<T>,
        ids: &HashMap<String, NodeId>,
        name: &str,
        x: NodeId,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> NodeId {
        let shape = tape.shape(x).to_vec();
        let geom = conv_geom(&shape, in_ch, out_ch, kernel, stride);
        tape.conv2d(x, ids[&format!("hvae.{name}.w")], Some(ids[&format!("hvae.{name}.b")]), geom)
    }

    fn convt_on<T: Real>(
        tape: &mut Tape<T>,
        ids: &HashMap<String, NodeId>,
        name: &str,
        x: NodeId,
        in_ch: usize,
        out_ch: usize,
    ) -> NodeId {
        let shape = tape.shape(x).to_vec();
        let geom = convt_same_geom(shape[0], shape[1], shape[2], in_ch, 4, out_ch, 2);
        tape.convt2d(x, ids[&format!("hvae.{name}.w")], Some(ids[&format!("hvae.{name}.b")]), geom)
    }

    fn dense_on<T: Real>(
        tape: &mut Tape<T>,
        ids: &HashMap<String, NodeId>,
        name: &str,
        x: NodeId,
    ) -> NodeId {
        let y = tape.matmul(x, ids[&format!("hvae.{name}.w")]);
        tape.add_bias(y, ids[&format!("hvae.{name}.b")])
    }

    fn bn_on<T: Real>(
        tape: &mut Tape<T>,
        ids: &HashMap<String, NodeId>,
        bn: &mut BnStats<T>,
        name: &str,
        x: NodeId,
        train: bool,
    ) -> NodeId {
        let gamma = ids[&format!("hvae.{name}.gamma")];
        let beta = ids[&format!("hvae.{name}.beta")];
        if train {
            let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, BN_EPS);
            bn.update(&format!("hvae.{name}"), &mean, &var);
            y
        } else {
            let (rm, rv) = bn.get(&format!("hvae.{name}"));
            let (rm, rv) = (rm.to_vec(), rv.to_vec());
            tape.batchnorm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
        }
    }

    /// Forward pass. With `posterior` true the latents are drawn from the
    /// (bidirectional or bottom-up) posterior using `noise`; otherwise from
    /// the conditional priors (generation). Returns the reconstruction node
    /// and per-group batch-mean KL nodes.
    pub fn forward_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ids: &HashMap<String, NodeId>,
        bn: &mut BnStats<T>,
        x: Option<NodeId>,
        batch: usize,
        noise: &mut dyn FnMut(&mut Tape<T>, &[usize]) -> NodeId,
        train: bool,
        first_group_override: Option<NodeId>,
    ) -> HvaeForward {
        let cfg = &self.cfg;
        let scales = cfg.scales();

        // Bottom-up features per scale (index: coarse order).
        let mut enc_feats: Vec<Option<NodeId>> = vec![None; scales];
        if let Some(x) = x {
            let mut cur = x;
            let mut in_ch = cfg.channels;
            for s in 0..scales {
                let out_ch = cfg.base_channels << s;
                cur = Self::conv_on(tape, ids, &format!("enc{s}"), cur, in_ch, out_ch, 4, 2);
                cur = Self::bn_on(tape, ids, bn, &format!("enc{s}_bn"), cur, train);
                cur = tape.swish(cur);
                // Bottom-up scale s sits at side/2^(s+1): scale index in
                // coarse order is scales-1-s.
                enc_feats[scales - 1 - s] = Some(cur);
                in_ch = out_ch;
            }
        }

        // Broadcast the trainable start tensor over the batch.
        let top_side = cfg.state_side(0);
        let top_ch = cfg.state_channels(0);
        let ones = tape.constant(Tensor::filled(&[batch, 1], T::one()));
        let h_flat = tape.matmul(ones, ids["hvae.h"]);
        let mut h = tape.reshape(h_flat, &[batch, top_side, top_side, top_ch]);

        let mut group_kls = Vec::new();
        let mut group_posteriors = Vec::new();
        let mut l = 0usize;
        for (s, &groups) in cfg.groups_per_scale.iter().enumerate() {
            let ch = cfg.state_channels(s);
            let side = cfg.state_side(s);
            for _ in 0..groups {
                // Prior parameters from the current top-down state.
                let (mu_p, lv_p) = if cfg.film {
                    let pooled = tape.global_avg_pool(h);
                    let head = Self::dense_on(tape, ids, &format!("g{l}.prior"), pooled);
                    let mu = tape.slice_last(head, 0, cfg.latent_dim);
                    let lv = tape.slice_last(head, cfg.latent_dim, cfg.latent_dim);
                    (mu, lv)
                } else {
                    let head = Self::conv_on(tape, ids, &format!("g{l}.prior"), h, ch, 2 * cfg.latent_dim, 1, 1);
                    let mu = tape.slice_last(head, 0, cfg.latent_dim);
                    let lv = tape.slice_last(head, cfg.latent_dim, cfg.latent_dim);
                    (mu, lv)
                };
                let lv_p = tape.clamp_range(lv_p, -LOGVAR_CLAMP, LOGVAR_CLAMP);

                // Latent draw: posterior when encoding, prior when generating,
                // or a caller-supplied code for the first (innermost) group.
                let (z, kl_node) = if l == 0 && first_group_override.is_some() {
                    let flat = first_group_override.unwrap();
                    let z = if cfg.film {
                        flat
                    } else {
                        tape.reshape(flat, &[batch, side, side, cfg.latent_dim])
                    };
                    (z, None)
                } else if let Some(enc) = enc_feats[s] {
                    let (mu_q, lv_q) = if cfg.film {
                        let pooled_enc = tape.global_avg_pool(enc);
                        let feats = if cfg.bottom_up_only {
                            pooled_enc
                        } else {
                            let pooled_h = tape.global_avg_pool(h);
                            tape.concat_last(pooled_h, pooled_enc)
                        };
                        let head = Self::dense_on(tape, ids, &format!("g{l}.post"), feats);
                        let mu = tape.slice_last(head, 0, cfg.latent_dim);
                        let lv = tape.slice_last(head, cfg.latent_dim, cfg.latent_dim);
                        (mu, lv)
                    } else {
                        let feats = if cfg.bottom_up_only {
                            enc
                        } else {
                            tape.concat_last(h, enc)
                        };
                        let post_in = if cfg.bottom_up_only { ch } else { 2 * ch };
                        let head = Self::conv_on(tape, ids, &format!("g{l}.post"), feats, post_in, 2 * cfg.latent_dim, 1, 1);
                        let mu = tape.slice_last(head, 0, cfg.latent_dim);
                        let lv = tape.slice_last(head, cfg.latent_dim, cfg.latent_dim);
                        (mu, lv)
                    };
                    let lv_q = tape.clamp_range(lv_q, -LOGVAR_CLAMP, LOGVAR_CLAMP);
                    let zshape = tape.shape(mu_q).to_vec();
                    let eps = noise(tape, &zshape);
                    let half = tape.scale(lv_q, 0.5);
                    let std = tape.exp(half);
                    let scaled = tape.mul(std, eps);
                    let z = tape.add(mu_q, scaled);
                    // Flatten spatial latents for the batch-mean KL.
                    let (mu_qf, lv_qf, mu_pf, lv_pf) = if cfg.film {
                        (mu_q, lv_q, mu_p, lv_p)
                    } else {
                        let flat = side * side * cfg.latent_dim;
                        (
                            tape.reshape(mu_q, &[batch, flat]),
                            tape.reshape(lv_q, &[batch, flat]),
                            tape.reshape(mu_p, &[batch, flat]),
                            tape.reshape(lv_p, &[batch, flat]),
                        )
                    };
                    let kl = gaussian_kl_general_on_tape(tape, mu_qf, lv_qf, mu_pf, lv_pf);
                    group_posteriors.push((mu_qf, lv_qf));
                    (z, Some(kl))
                } else {
                    let zshape = tape.shape(mu_p).to_vec();
                    let eps = noise(tape, &zshape);
                    let half = tape.scale(lv_p, 0.5);
                    let std = tape.exp(half);
                    let scaled = tape.mul(std, eps);
                    (tape.add(mu_p, scaled), None)
                };

                // Inject the group's code into the top-down state.
                if cfg.film {
                    let mods = Self::dense_on(tape, ids, &format!("g{l}.inject"), z);
                    let raw_gamma = tape.slice_last(mods, 0, ch);
                    let gamma1 = tape.affine(raw_gamma, 1.0, 1.0);
                    let beta = tape.slice_last(mods, ch, ch);
                    h = film_modulate(tape, h, gamma1, beta);
                } else {
                    let inj = Self::conv_on(tape, ids, &format!("g{l}.inject"), z, cfg.latent_dim, ch, 1, 1);
                    h = tape.add(h, inj);
                }
                // Residual cell.
                let cell = Self::bn_on(tape, ids, bn, &format!("g{l}.cell_bn"), h, train);
                let cell = tape.swish(cell);
                let cell = Self::conv_on(tape, ids, &format!("g{l}.cell"), cell, ch, ch, 3, 1);
                h = tape.add(h, cell);

                if let Some(kl) = kl_node {
                    group_kls.push(kl);
                }
                l += 1;
            }
            if s + 1 < scales {
                let next_ch = cfg.state_channels(s + 1);
                h = Self::convt_on(tape, ids, &format!("up{s}"), h, ch, next_ch);
                h = Self::bn_on(tape, ids, bn, &format!("up{s}_bn"), h, train);
                h = tape.swish(h);
            }
        }

        // Decode to the image.
        let last_ch = cfg.state_channels(scales - 1);
        let dec_ch = (last_ch / 2).max(2);
        let mut y = Self::convt_on(tape, ids, "dec", h, last_ch, dec_ch);
        y = Self::bn_on(tape, ids, bn, "dec_bn", y, train);
        y = tape.swish(y);
        let out = Self::conv_on(tape, ids, "out", y, dec_ch, cfg.channels, 4, 1);
        let x_hat = tape.sigmoid(out);

        HvaeForward {
            x_hat,
            group_kls,
            group_posteriors,
        }
    }

    /// Generate n images from the conditional priors. Deterministic per seed.
    pub fn sample(&self, n: usize, seed: u64) -> Tensor<f32> {
        let mut tape: Tape<f32> = Tape::new();
        let ids = self.params.leaves(&mut tape);
        let mut bn = self.bn.clone();
        let mut rng = stream(seed, "hvae.sample");
        let mut noise = |tape: &mut Tape<f32>, shape: &[usize]| {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = standard_normal_vec(&mut rng, numel)
                .into_iter()
                .map(|v| v as f32)
                .collect();
            tape.constant(Tensor::new(shape, data))
        };
        let fwd = self.forward_on_tape(&mut tape, &ids, &mut bn, None, n, &mut noise, false, None);
        tape.value(fwd.x_hat).clone()
    }

    /// Generate with the first (innermost) group forced to the given flat
    /// codes [n, dims]; the remaining groups follow their conditional priors.
    pub fn sample_with_first_group(&self, codes: &Tensor<f32>, seed: u64) -> Tensor<f32> {
        let n = codes.shape()[0];
        let mut tape: Tape<f32> = Tape::new();
        let ids = self.params.leaves(&mut tape);
        let mut bn = self.bn.clone();
        let mut rng = stream(seed, "hvae.sample_z0");
        let mut noise = |tape: &mut Tape<f32>, shape: &[usize]| {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = standard_normal_vec(&mut rng, numel)
                .into_iter()
                .map(|v| v as f32)
                .collect();
            tape.constant(Tensor::new(shape, data))
        };
        let z0 = tape.constant(codes.clone());
        let fwd = self.forward_on_tape(&mut tape, &ids, &mut bn, None, n, &mut noise, false, Some(z0));
        tape.value(fwd.x_hat).clone()
    }
}
