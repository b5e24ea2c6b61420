//! The standard VAE bound: Gaussian recognition MLP, Bernoulli MLP decoder,
//! analytic KL to N(0, I) and one reparameterized sample per datapoint.
//!
//! All loss terms are means per datapoint, in nats.

use crate::error::{Error, Result};
use crate::nn::{Dropout, ForwardCache, Mlp, MlpGrads};
use crate::numcore::{Matrix, Rng};

/// Decoder probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Matrix,
    pub logvar: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLossBreakdown {
    pub neg_reconstruction: f64,
    pub kl: f64,
    pub elbo: f64,
}

impl VaeLossBreakdown {
    pub fn new(neg_reconstruction: f64, kl: f64) -> Self {
        VaeLossBreakdown {
            neg_reconstruction,
            kl,
            elbo: -(neg_reconstruction + kl),
        }
    }
}

/// Dropout settings shared by every network in a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutConfig {
    pub enabled: bool,
    pub keep_prob: f64,
}

impl DropoutConfig {
    pub const OFF: DropoutConfig = DropoutConfig {
        enabled: false,
        keep_prob: 1.0,
    };

    pub fn train(keep_prob: f64) -> Self {
        DropoutConfig {
            enabled: true,
            keep_prob,
        }
    }
}

/// Independent random streams consumed by one loss evaluation. Each network
/// draws its dropout masks from its own stream so that adding or removing
/// the X encoder never shifts the draws seen by the others.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStreams {
    pub eps: Rng,
    pub dropout_z: Rng,
    pub dropout_x: Rng,
    pub dropout_dec: Rng,
}

impl NoiseStreams {
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut next = || Rng::new(crate::numcore::splitmix64(&mut sm));
        NoiseStreams {
            eps: next(),
            dropout_z: next(),
            dropout_x: next(),
            dropout_dec: next(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub z_encoder: Mlp,
    pub decoder: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub z_encoder: MlpGrads,
    pub decoder: MlpGrads,
}

impl Vae {
    pub fn z_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.decoder.output_dim()
    }
}

/// Runs the Z encoder and splits its `2·z_dim` outputs into (mu, logvar).
pub fn encode(
    z_encoder: &Mlp,
    y: &Matrix,
    dropout: Dropout<'_>,
) -> Result<(GaussianPosterior, ForwardCache)> {
    let (out, cache) = z_encoder.forward(y, dropout)?;
    if out.cols() % 2 != 0 {
        return Err(Error::Invalid(format!(
            "z encoder must emit an even number of outputs, got {}",
            out.cols()
        )));
    }
    let z_dim = out.cols() / 2;
    let post = GaussianPosterior {
        mu: out.slice_cols(0, z_dim)?,
        logvar: out.slice_cols(z_dim, 2 * z_dim)?,
    };
    Ok((post, cache))
}

/// `z = mu + exp(logvar/2) ⊙ ε`; returns `(z, ε)`.
pub fn reparameterize(post: &GaussianPosterior, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    let eps = rng.standard_normal(post.mu.rows(), post.mu.cols());
    let sigma = post.logvar.map(|lv| (0.5 * lv).exp());
    let z = post.mu.add(&sigma.hadamard(&eps)?)?;
    Ok((z, eps))
}

/// Bernoulli decoder probabilities, clamped. The cache holds the raw
/// sigmoid outputs.
pub fn decode(decoder: &Mlp, z: &Matrix, dropout: Dropout<'_>) -> Result<(Matrix, ForwardCache)> {
    let (raw, cache) = decoder.forward(z, dropout)?;
    Ok((raw.map(clamp_prob), cache))
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean over the batch of `-Σ_d [y ln p + (1-y) ln(1-p)]`.
pub fn bernoulli_nll(p: &Matrix, y: &Matrix) -> Result<f64> {
    if p.shape() != y.shape() {
        return Err(Error::dim("bernoulli_nll", p.shape(), y.shape()));
    }
    let total: f64 = p
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum();
    Ok(total / p.rows() as f64)
}

/// Mean over the batch of `0.5·Σ_k (mu² + σ² − 1 − logvar)`.
pub fn kl_unit_gaussian(post: &GaussianPosterior) -> f64 {
    let total: f64 = post
        .mu
        .as_slice()
        .iter()
        .zip(post.logvar.as_slice())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum();
    total / post.mu.rows() as f64
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct VaePass {
    pub post: GaussianPosterior,
    pub enc_cache: ForwardCache,
    pub eps: Matrix,
    pub raw_p: Matrix,
    pub dec_cache: ForwardCache,
    pub breakdown: VaeLossBreakdown,
}

pub(crate) fn vae_forward(
    vae: &Vae,
    y: &Matrix,
    noise: &mut NoiseStreams,
    dropout: DropoutConfig,
) -> Result<VaePass> {
    if y.rows() == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let (post, enc_cache) = encode(
        &vae.z_encoder,
        y,
        Dropout::new(dropout.enabled, dropout.keep_prob, &mut noise.dropout_z),
    )?;
    let (z, eps) = reparameterize(&post, &mut noise.eps)?;
    let (raw_p, dec_cache) = vae.decoder.forward(
        &z,
        Dropout::new(dropout.enabled, dropout.keep_prob, &mut noise.dropout_dec),
    )?;
    let p = raw_p.map(clamp_prob);
    let breakdown = VaeLossBreakdown::new(bernoulli_nll(&p, y)?, kl_unit_gaussian(&post));
    if !breakdown.elbo.is_finite() {
        return Err(Error::NonFinite {
            what: format!(
                "vae loss on batch of {} (neg_recon {}, kl {})",
                y.rows(),
                breakdown.neg_reconstruction,
                breakdown.kl
            ),
        });
    }
    Ok(VaePass {
        post,
        enc_cache,
        eps,
        raw_p,
        dec_cache,
        breakdown,
    })
}

/// Gradients of `neg_reconstruction + kl`, plus an optional extra gradient
/// with respect to the posterior means.
pub(crate) fn vae_backward(
    vae: &Vae,
    pass: &VaePass,
    y: &Matrix,
    extra_dmu: Option<&Matrix>,
) -> Result<VaeGrads> {
    let inv_b = 1.0 / y.rows() as f64;
    let lo = PROB_CLAMP;
    let hi = 1.0 - PROB_CLAMP;
    let d_raw = pass.raw_p.zip_map(y, "recon_grad", |s, t| {
        if s < lo || s > hi {
            0.0
        } else {
            inv_b * (-t / s + (1.0 - t) / (1.0 - s))
        }
    })?;
    let (dec_grads, dz) = vae.decoder.backward(&pass.dec_cache, &d_raw)?;

    let mut dmu = dz.clone();
    dmu.axpy(inv_b, &pass.post.mu)?;
    if let Some(extra) = extra_dmu {
        dmu.add_assign(extra)?;
    }
    let half_sigma = pass.post.logvar.map(|lv| 0.5 * (0.5 * lv).exp());
    let mut dlogvar = dz.hadamard(&pass.eps)?.hadamard(&half_sigma)?;
    dlogvar.add_assign(&pass.post.logvar.map(|lv| 0.5 * inv_b * (lv.exp() - 1.0)))?;

    let (enc_grads, _) = vae
        .z_encoder
        .backward(&pass.enc_cache, &dmu.hstack(&dlogvar)?)?;
    Ok(VaeGrads {
        z_encoder: enc_grads,
        decoder: dec_grads,
    })
}

/// Single-sample estimate of `-L_g` and its gradients for both networks.
pub fn vae_loss(
    vae: &Vae,
    y: &Matrix,
    noise: &mut NoiseStreams,
    dropout: DropoutConfig,
) -> Result<(VaeLossBreakdown, VaeGrads)> {
    let pass = vae_forward(vae, y, noise, dropout)?;
    let grads = vae_backward(vae, &pass, y, None)?;
    Ok((pass.breakdown, grads))
}
