//! Model configuration, construction and flat parameter views shared by
//! training, checkpoints and the gradient checker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::npvae::{KernelParams, NpVae, NpVaeGrads};
use crate::numcore::{splitmix64, Matrix, Rng};
use crate::vae::Vae;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Npvae,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Vae => "vae",
            ModelKind::Npvae => "npvae",
        })
    }
}

/// Everything that determines a training run apart from the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub obs_dim: usize,
    pub z_dim: usize,
    pub x_dim: usize,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub keep_prob: f64,
    pub lambda: f64,
    pub seed: u64,
    pub binarize: bool,
    pub reference_size: usize,
    /// Train on only the first `n` training images.
    #[serde(default)]
    pub train_limit: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Npvae,
            obs_dim: 784,
            z_dim: 2,
            x_dim: 2,
            hidden: vec![500, 500],
            batch_size: 128,
            lr: 1e-3,
            keep_prob: 0.9,
            lambda: 1.0,
            seed: 0,
            binarize: false,
            reference_size: 1024,
            train_limit: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.obs_dim == 0 || self.z_dim == 0 || self.x_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad(format!("hidden sizes must be positive, got {:?}", self.hidden));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep probability must be in (0, 1], got {}", self.keep_prob));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        match self.kind {
            ModelKind::Npvae if self.batch_size < 2 => bad(format!(
                "npvae needs batch size >= 2 to build kernel weights, got {}",
                self.batch_size
            )),
            _ if self.batch_size == 0 => bad("batch size must be positive".into()),
            _ => Ok(()),
        }
    }

    pub fn seeds(&self) -> SubSeeds {
        SubSeeds::new(self.seed)
    }
}

/// Independent seeds expanded from the run seed with splitmix64. Each
/// network and each noise source has its own stream, so a plain VAE and an
/// npvae with the same seed see identical draws for the parts they share.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubSeeds {
    pub init_z: u64,
    pub init_x: u64,
    pub init_dec: u64,
    pub noise: u64,
    pub shuffle: u64,
    pub reference: u64,
    pub eval: u64,
}

impl SubSeeds {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        SubSeeds {
            init_z: splitmix64(&mut s),
            init_x: splitmix64(&mut s),
            init_dec: splitmix64(&mut s),
            noise: splitmix64(&mut s),
            shuffle: splitmix64(&mut s),
            reference: splitmix64(&mut s),
            eval: splitmix64(&mut s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Vae(Vae),
    NpVae(NpVae),
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

impl Model {
    /// Glorot-initialized model; the decoder mirrors the hidden sizes.
    pub fn init(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let seeds = config.seeds();
        let mut rev = config.hidden.clone();
        rev.reverse();
        let vae = Vae {
            z_encoder: Mlp::glorot(
                &mut Rng::new(seeds.init_z),
                &layer_dims(config.obs_dim, &config.hidden, 2 * config.z_dim),
                Activation::Identity,
            )?,
            decoder: Mlp::glorot(
                &mut Rng::new(seeds.init_dec),
                &layer_dims(config.z_dim, &rev, config.obs_dim),
                Activation::Sigmoid,
            )?,
        };
        Ok(match config.kind {
            ModelKind::Vae => Model::Vae(vae),
            ModelKind::Npvae => Model::NpVae(NpVae {
                vae,
                x_encoder: Mlp::glorot(
                    &mut Rng::new(seeds.init_x),
                    &layer_dims(config.obs_dim, &config.hidden, config.x_dim),
                    Activation::Identity,
                )?,
                kernel: KernelParams::default(),
            }),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Vae(_) => ModelKind::Vae,
            Model::NpVae(_) => ModelKind::Npvae,
        }
    }

    pub fn vae(&self) -> &Vae {
        match self {
            Model::Vae(v) => v,
            Model::NpVae(n) => &n.vae,
        }
    }

    pub fn npvae(&self) -> Option<&NpVae> {
        match self {
            Model::Vae(_) => None,
            Model::NpVae(n) => Some(n),
        }
    }

    /// Flat parameter blocks: Z encoder, X encoder, decoder, log-lengthscale.
    pub fn param_blocks(&self) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = self.vae().z_encoder.blocks().into_iter().cloned().collect();
        if let Model::NpVae(n) = self {
            out.extend(n.x_encoder.blocks().into_iter().cloned());
        }
        out.extend(self.vae().decoder.blocks().into_iter().cloned());
        if let Model::NpVae(n) = self {
            out.push(Matrix::scalar(n.kernel.log_lengthscale));
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = self.vae().z_encoder.block_names("z_encoder");
        if let Model::NpVae(n) = self {
            out.extend(n.x_encoder.block_names("x_encoder"));
        }
        out.extend(self.vae().decoder.block_names("decoder"));
        if let Model::NpVae(_) = self {
            out.push("kernel.log_lengthscale".into());
        }
        out
    }

    pub fn set_param_blocks(&mut self, blocks: &[Matrix]) -> Result<()> {
        let (vae, extra) = match self {
            Model::Vae(v) => (v, None),
            Model::NpVae(n) => (&mut n.vae, Some((&mut n.x_encoder, &mut n.kernel))),
        };
        let nz = vae.z_encoder.layers.len() * 2;
        let nd = vae.decoder.layers.len() * 2;
        let nx = extra.as_ref().map_or(0, |(x, _)| x.layers.len() * 2);
        let expected = nz + nx + nd + usize::from(extra.is_some());
        if blocks.len() != expected {
            return Err(Error::Invalid(format!(
                "expected {expected} parameter blocks, got {}",
                blocks.len()
            )));
        }
        vae.z_encoder.set_blocks(&blocks[..nz])?;
        vae.decoder.set_blocks(&blocks[nz + nx..nz + nx + nd])?;
        if let Some((x_encoder, kernel)) = extra {
            x_encoder.set_blocks(&blocks[nz..nz + nx])?;
            kernel.log_lengthscale = blocks[expected - 1].as_slice()[0];
        }
        Ok(())
    }
}

impl NpVaeGrads {
    /// Same block order as [`Model::param_blocks`].
    pub fn blocks(&self) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = self.z_encoder.blocks().into_iter().cloned().collect();
        out.extend(self.x_encoder.blocks().into_iter().cloned());
        out.extend(self.decoder.blocks().into_iter().cloned());
        out.push(Matrix::scalar(self.log_lengthscale));
        out
    }
}
