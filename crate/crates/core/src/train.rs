//! Minibatch training and evaluation for both model kinds.

use crate::artifacts::Checkpoint;
use crate::data::{BatchIter, DataSplit};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Adam;
use crate::npvae::{self, LossBreakdown, NpVaeGrads, ReferenceSet};
use crate::numcore::Matrix;
use crate::vae::{self, DropoutConfig, NoiseStreams, VaeGrads};

/// One Adam state per network, plus one for the log-lengthscale.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub z_encoder: Adam,
    pub x_encoder: Option<Adam>,
    pub decoder: Adam,
    pub kernel: Option<Adam>,
}

impl Optimizers {
    pub fn new(model: &Model, lr: f64) -> Self {
        let v = model.vae();
        Optimizers {
            z_encoder: Adam::for_mlp(lr, &v.z_encoder),
            x_encoder: model.npvae().map(|n| Adam::for_mlp(lr, &n.x_encoder)),
            decoder: Adam::for_mlp(lr, &v.decoder),
            kernel: model.npvae().map(|_| Adam::new(lr, &[(1, 1)])),
        }
    }
}

/// Position of a run: enough to resume it bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_done: u64,
    pub batch_epoch: u64,
    pub batch_cursor: u64,
    pub noise: NoiseStreams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Grads {
    Vae(VaeGrads),
    NpVae(NpVaeGrads),
}

/// Loss and gradients of one minibatch for either model kind. The plain VAE
/// reports a zero penalty.
pub fn loss_and_grads(
    model: &Model,
    lambda: f64,
    y: &Matrix,
    noise: &mut NoiseStreams,
    dropout: DropoutConfig,
) -> Result<(LossBreakdown, Grads)> {
    match model {
        Model::Vae(v) => {
            let (b, g) = vae::vae_loss(v, y, noise, dropout)?;
            let loss = LossBreakdown {
                neg_reconstruction: b.neg_reconstruction,
                kl: b.kl,
                penalty: 0.0,
                total: b.neg_reconstruction + b.kl,
            };
            Ok((loss, Grads::Vae(g)))
        }
        Model::NpVae(n) => {
            let (b, g) = npvae::npvae_loss(n, y, noise, dropout, lambda)?;
            Ok((b, Grads::NpVae(g)))
        }
    }
}

/// Rejects a step before any network moves if some gradient is not finite.
fn check_finite(model: &Model, grads: &Grads) -> Result<()> {
    let blocks = match grads {
        Grads::Vae(g) => {
            let mut b: Vec<Matrix> = g.z_encoder.blocks().into_iter().cloned().collect();
            b.extend(g.decoder.blocks().into_iter().cloned());
            b
        }
        Grads::NpVae(g) => g.blocks(),
    };
    for (b, name) in blocks.iter().zip(model.param_names()) {
        if !b.is_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: u64,
    pub loss: LossBreakdown,
}

pub const METRICS_HEADER: &str = "epoch,neg_recon,kl,penalty,total";

impl EpochMetrics {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{}",
            self.epoch, l.neg_reconstruction, l.kl, l.penalty, l.total
        )
    }

    pub fn parse_line(line: &str) -> Result<EpochMetrics> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Invalid(format!("malformed metrics line {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(EpochMetrics {
            epoch: f[0].parse().map_err(|_| bad())?,
            loss: LossBreakdown {
                neg_reconstruction: num(f[1])?,
                kl: num(f[2])?,
                penalty: num(f[3])?,
                total: num(f[4])?,
            },
        })
    }
}

/// Batch-size weighted mean of per-batch losses.
#[derive(Debug, Default)]
struct Accumulator {
    count: usize,
    recon: f64,
    kl: f64,
    penalty: f64,
    total: f64,
}

impl Accumulator {
    fn add(&mut self, l: &LossBreakdown, n: usize) {
        let w = n as f64;
        self.count += n;
        self.recon += w * l.neg_reconstruction;
        self.kl += w * l.kl;
        self.penalty += w * l.penalty;
        self.total += w * l.total;
    }

    fn mean(&self) -> LossBreakdown {
        let c = self.count.max(1) as f64;
        LossBreakdown {
            neg_reconstruction: self.recon / c,
            kl: self.kl / c,
            penalty: self.penalty / c,
            total: self.total / c,
        }
    }
}

pub struct Trainer {
    pub config: ModelConfig,
    pub model: Model,
    pub optimizers: Optimizers,
    noise: NoiseStreams,
    batches: BatchIter,
    epochs_done: u64,
    n_train: usize,
}

impl Trainer {
    pub fn new(config: ModelConfig, n_train: usize) -> Result<Self> {
        let model = Model::init(&config)?;
        let seeds = config.seeds();
        Ok(Trainer {
            optimizers: Optimizers::new(&model, config.lr),
            noise: NoiseStreams::from_seed(seeds.noise),
            batches: BatchIter::new(seeds.shuffle, n_train, config.batch_size)?,
            epochs_done: 0,
            n_train,
            model,
            config,
        })
    }

    /// Continues a saved run on a training split of `n_train` rows.
    pub fn from_checkpoint(ckpt: Checkpoint, n_train: usize) -> Result<Self> {
        let seeds = ckpt.config.seeds();
        Ok(Trainer {
            batches: BatchIter::resume(
                seeds.shuffle,
                n_train,
                ckpt.config.batch_size,
                ckpt.state.batch_epoch,
                ckpt.state.batch_cursor as usize,
            )?,
            noise: ckpt.state.noise,
            epochs_done: ckpt.state.epochs_done,
            optimizers: ckpt.optimizers,
            model: ckpt.model,
            config: ckpt.config,
            n_train,
        })
    }

    pub fn epochs_done(&self) -> u64 {
        self.epochs_done
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            epochs_done: self.epochs_done,
            batch_epoch: self.batches.epoch(),
            batch_cursor: self.batches.cursor() as u64,
            noise: self.noise.clone(),
        }
    }

    fn check_data(&self, data: &DataSplit) -> Result<()> {
        if data.len() != self.n_train || data.obs_dim() != self.config.obs_dim {
            return Err(Error::Invalid(format!(
                "trainer expects {}x{} data, got {}x{}",
                self.n_train,
                self.config.obs_dim,
                data.len(),
                data.obs_dim()
            )));
        }
        Ok(())
    }

    /// One Adam step on the next minibatch. Returns the batch loss and size.
    pub fn step(&mut self, data: &DataSplit) -> Result<(LossBreakdown, usize)> {
        self.check_data(data)?;
        let (y, _) = self.batches.next_batch(data)?;
        let dropout = DropoutConfig::train(self.config.keep_prob);
        let (loss, grads) = loss_and_grads(&self.model, self.config.lambda, &y, &mut self.noise, dropout)?;
        check_finite(&self.model, &grads)?;
        let opt = &mut self.optimizers;
        match (&mut self.model, grads) {
            (Model::Vae(v), Grads::Vae(g)) => {
                opt.z_encoder.step_mlp(&mut v.z_encoder, &g.z_encoder, "z_encoder")?;
                opt.decoder.step_mlp(&mut v.decoder, &g.decoder, "decoder")?;
            }
            (Model::NpVae(n), Grads::NpVae(g)) => {
                opt.z_encoder.step_mlp(&mut n.vae.z_encoder, &g.z_encoder, "z_encoder")?;
                opt.decoder.step_mlp(&mut n.vae.decoder, &g.decoder, "decoder")?;
                opt.x_encoder
                    .as_mut()
                    .expect("npvae has an x encoder optimizer")
                    .step_mlp(&mut n.x_encoder, &g.x_encoder, "x_encoder")?;
                let mut ll = Matrix::scalar(n.kernel.log_lengthscale);
                opt.kernel.as_mut().expect("npvae has a kernel optimizer").step(
                    &mut [&mut ll],
                    &[&Matrix::scalar(g.log_lengthscale)],
                    &["kernel.log_lengthscale".into()],
                )?;
                n.kernel.log_lengthscale = ll.as_slice()[0];
            }
            _ => unreachable!("gradients always match the model kind"),
        }
        Ok((loss, y.rows()))
    }

    /// Runs to the end of the current epoch.
    pub fn train_epoch(&mut self, data: &DataSplit) -> Result<EpochMetrics> {
        let mut acc = Accumulator::default();
        let epoch = self.epochs_done + 1;
        let mut batch = 0;
        loop {
            let (loss, n) = self.step(data).map_err(|e| Error::Training {
                epoch: epoch as usize,
                batch,
                source: Box::new(e),
            })?;
            acc.add(&loss, n);
            batch += 1;
            if self.batches.epoch_exhausted() {
                break;
            }
        }
        self.epochs_done = epoch;
        Ok(EpochMetrics {
            epoch,
            loss: acc.mean(),
        })
    }

    /// Reference set over the training data (npvae only).
    pub fn reference_set(&self, data: &DataSplit) -> Result<Option<ReferenceSet>> {
        match &self.model {
            Model::Vae(_) => Ok(None),
            Model::NpVae(n) => npvae::build_reference_set(
                n,
                data,
                self.config.reference_size,
                self.config.seeds().reference,
            )
            .map(Some),
        }
    }

    pub fn checkpoint(&self, reference: Option<ReferenceSet>, final_loss: Option<LossBreakdown>) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizers: self.optimizers.clone(),
            state: self.state(),
            reference,
            final_loss,
        }
    }
}

/// Mean losses over `data` in file order with dropout off and noise drawn
/// from `noise_seed`. A partial trailing batch of one row is skipped.
pub fn evaluate(
    model: &Model,
    lambda: f64,
    data: &DataSplit,
    batch_size: usize,
    noise_seed: u64,
) -> Result<LossBreakdown> {
    let mut noise = NoiseStreams::from_seed(noise_seed);
    let mut acc = Accumulator::default();
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        if end - start < 2 && end - start < batch_size {
            break;
        }
        let y = data.y.slice_rows(start, end)?;
        let (loss, _) = loss_and_grads(model, lambda, &y, &mut noise, DropoutConfig::OFF)?;
        acc.add(&loss, end - start);
        start = end;
    }
    if acc.count == 0 {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    Ok(acc.mean())
}
