//! Finite-difference verification of every analytic gradient on small
//! models with frozen noise.

use crate::data::synthetic_clusters;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::nn::{grad_check, GradCheckReport};
use crate::numcore::{Matrix, Rng};
use crate::train::{loss_and_grads, Grads};
use crate::vae::{DropoutConfig, NoiseStreams};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Negates the analytic gradient of the named block before comparing.
    /// Used to confirm that the checker catches a wrong gradient.
    pub flip_sign: Option<String>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            flip_sign: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
}

/// A small model of the given kind: 12 → 8 → 8 → latent, batch of 4.
pub fn toy_config(kind: ModelKind, lambda: f64, seed: u64) -> ModelConfig {
    ModelConfig {
        kind,
        obs_dim: 12,
        z_dim: 2,
        x_dim: 2,
        hidden: vec![8, 8],
        batch_size: 4,
        lambda,
        seed,
        ..ModelConfig::default()
    }
}

/// Compares analytic and central-difference gradients of the total loss for
/// every parameter block of `model` on batch `y`. A `flip_sign` name that
/// the model lacks is ignored.
pub fn check_model(model: &Model, lambda: f64, y: &Matrix, noise: &NoiseStreams, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let names = model.param_names();
    let (_, grads) = loss_and_grads(model, lambda, y, &mut noise.clone(), DropoutConfig::OFF)?;
    let mut analytic = match grads {
        Grads::Vae(g) => {
            let mut b: Vec<Matrix> = g.z_encoder.blocks().into_iter().cloned().collect();
            b.extend(g.decoder.blocks().into_iter().cloned());
            b
        }
        Grads::NpVae(g) => g.blocks(),
    };
    for (b, name) in analytic.iter_mut().zip(&names) {
        if opts.flip_sign.as_ref() == Some(name) {
            b.map_inplace(|v| -v);
        }
    }
    let mut work = model.clone();
    let loss = |blocks: &[Matrix]| -> f64 {
        if work.set_param_blocks(blocks).is_err() {
            return f64::NAN;
        }
        match loss_and_grads(&work, lambda, y, &mut noise.clone(), DropoutConfig::OFF) {
            Ok((l, _)) => l.total,
            Err(_) => f64::NAN,
        }
    };
    Ok(grad_check(&model.param_blocks(), &names, &analytic, loss, opts.h, opts.tolerance))
}

/// Runs the standard set of cases: a plain VAE, an npvae at λ = 1 with unit
/// lengthscale, and an npvae at λ = 0.5 with a non-unit lengthscale.
pub fn run_gradcheck(opts: &GradCheckOptions) -> Result<Vec<GradCheckCase>> {
    let cases: [(&str, ModelKind, f64, f64); 3] = [
        ("vae", ModelKind::Vae, 0.0, 0.0),
        ("npvae lambda=1", ModelKind::Npvae, 1.0, 0.0),
        ("npvae lambda=0.5 log_l=0.3", ModelKind::Npvae, 0.5, 0.3),
    ];
    let mut rng = Rng::new(opts.seed);
    let data = synthetic_clusters(&mut rng, 4, 12, 2, 3.0)?;
    let mut out = Vec::with_capacity(cases.len());
    for (name, kind, lambda, log_l) in cases {
        let config = toy_config(kind, lambda, opts.seed);
        let mut model = Model::init(&config)?;
        if let Model::NpVae(n) = &mut model {
            n.kernel.log_lengthscale = log_l;
        }
        let noise = NoiseStreams::from_seed(config.seeds().noise);
        let report = check_model(&model, lambda, &data.y, &noise, opts)?;
        out.push(GradCheckCase {
            name: name.to_string(),
            report,
        });
    }
    if let Some(flip) = &opts.flip_sign {
        if !out.iter().any(|c| c.report.blocks.iter().any(|b| &b.name == flip)) {
            return Err(Error::Invalid(format!("no parameter block named {flip:?}")));
        }
    }
    Ok(out)
}
