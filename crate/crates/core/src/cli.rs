//! Command-line front end: train, sample, interpolate, embed, eval and
//! gradcheck.

use std::borrow::Cow;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::artifacts::{encode_pgm, format_embedding_csv, Checkpoint};
use crate::data::{load_mnist, DataSplit, Mnist, SplitName};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradCheckOptions, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::nn::Dropout;
use crate::npvae::{self, Space};
use crate::numcore::Matrix;
use crate::train::{evaluate, Trainer, METRICS_HEADER};
use crate::vae;

/// Rows pushed through an encoder at once when embedding a whole split.
const ENCODE_CHUNK: usize = 1000;

#[derive(Debug, Parser)]
#[command(name = "npvae", version, about = "Variational autoencoders with a nonparametric 2-D embedding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on MNIST and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Decode points of X (npvae) or Z (vae) into a PGM image.
    Sample(SampleArgs),
    /// Decode the straight line between two training images.
    Interpolate(InterpolateArgs),
    /// Export the X embedding (or a 2-D Z embedding) of a split as CSV.
    Embed(EmbedArgs),
    /// Print mean losses over a split.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding the four MNIST IDX files (plain or gzipped).
    #[arg(long, env = "NPVAE_DATA_DIR")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Npvae)]
    pub model: ModelKind,
    #[arg(long, default_value_t = 2)]
    pub z_dim: usize,
    /// Dimension of X (npvae only).
    #[arg(long)]
    pub x_dim: Option<usize>,
    /// Hidden layer sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "500,500")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs to run (200 gives well-formed embeddings on full MNIST).
    #[arg(long)]
    pub epochs: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dropout keep probability; 1 disables dropout.
    #[arg(long, default_value_t = 0.9)]
    pub keep_prob: f64,
    /// Weight of the moment-matching penalty (npvae only).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Threshold pixels at 0.5 instead of using greyscale targets.
    #[arg(long)]
    pub binarize: bool,
    /// Train on the first N training images only.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Number of training points stored for decoding X locations.
    #[arg(long, default_value_t = 1024)]
    pub reference_size: usize,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log; defaults to the checkpoint path with `.metrics.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from this checkpoint for `--epochs` more epochs. Model and
    /// optimizer flags are taken from the checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// One query point, comma separated.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "grid", required_unless_present = "grid")]
    pub x: Option<String>,
    /// Decode an N×N lattice over [-R, R]².
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long, default_value_t = 3.0)]
    pub range: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Index of the first training image.
    #[arg(long)]
    pub a: usize,
    /// Index of the second training image.
    #[arg(long)]
    pub b: usize,
    #[arg(long, default_value_t = 11)]
    pub steps: usize,
    /// `x` or `z`.
    #[arg(long, default_value = "x")]
    pub space: Space,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `train`, `val` or `test`.
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub h: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate the analytic gradient of this block (fault injection).
    #[arg(long, hide = true)]
    pub flip_sign: Option<String>,
}

/// Parses `args`, runs the command and returns the process exit code.
/// Normal output goes to `out`; diagnostics go to stderr.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Sample(a) => cmd_sample(a, out),
        Command::Interpolate(a) => cmd_interpolate(a, out),
        Command::Embed(a) => cmd_embed(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

fn load_data(dir: &Path, binarize: bool) -> Result<Mnist> {
    let m = load_mnist(dir)?;
    if !binarize {
        return Ok(m);
    }
    Ok(Mnist {
        train: m.train.binarized(),
        val: m.val.binarized(),
        test: m.test.binarized(),
    })
}

fn train_split<'a>(mnist: &'a Mnist, config: &ModelConfig) -> Cow<'a, DataSplit> {
    match config.train_limit {
        Some(n) => Cow::Owned(mnist.train.take(n)),
        None => Cow::Borrowed(&mnist.train),
    }
}

fn config_from_args(a: &TrainArgs) -> ModelConfig {
    if a.model == ModelKind::Vae {
        if a.x_dim.is_some() {
            log::warn!("--x-dim is ignored for a vae");
        }
        if a.lambda.is_some() {
            log::warn!("--lambda is ignored for a vae");
        }
    }
    let d = ModelConfig::default();
    ModelConfig {
        kind: a.model,
        obs_dim: d.obs_dim,
        z_dim: a.z_dim,
        x_dim: a.x_dim.unwrap_or(d.x_dim),
        hidden: a.hidden.clone(),
        batch_size: a.batch_size,
        lr: a.lr,
        keep_prob: a.keep_prob,
        lambda: a.lambda.unwrap_or(d.lambda),
        seed: a.seed,
        binarize: a.binarize,
        reference_size: a.reference_size,
        train_limit: a.limit,
    }
}

fn default_metrics_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".metrics.csv");
    PathBuf::from(s)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let metrics_path = a.metrics.clone().unwrap_or_else(|| default_metrics_path(&a.out));
    let (mut trainer, mnist, mut final_loss, metrics) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mnist = load_data(&a.data.data_dir, ckpt.config.binarize)?;
            let n_train = train_split(&mnist, &ckpt.config).len();
            let final_loss = ckpt.final_loss;
            let trainer = Trainer::from_checkpoint(ckpt, n_train)?;
            let metrics = OpenOptions::new().append(true).create(true).open(&metrics_path)?;
            (trainer, mnist, final_loss, metrics)
        }
        None => {
            let mut config = config_from_args(&a);
            config.validate()?;
            let mnist = load_data(&a.data.data_dir, config.binarize)?;
            let (obs_dim, n_train) = {
                let t = train_split(&mnist, &config);
                (t.obs_dim(), t.len())
            };
            config.obs_dim = obs_dim;
            let trainer = Trainer::new(config, n_train)?;
            let mut metrics = File::create(&metrics_path)?;
            writeln!(metrics, "{METRICS_HEADER}")?;
            (trainer, mnist, None, metrics)
        }
    };
    let train = train_split(&mnist, &trainer.config);
    let mut metrics = BufWriter::new(metrics);
    for _ in 0..a.epochs {
        let m = trainer.train_epoch(&train)?;
        writeln!(metrics, "{}", m.csv_line())?;
        metrics.flush()?;
        log::info!(
            "epoch {}: neg_recon {:.4} kl {:.4} penalty {:.4} total {:.4}",
            m.epoch,
            m.loss.neg_reconstruction,
            m.loss.kl,
            m.loss.penalty,
            m.loss.total
        );
        final_loss = Some(m.loss);
    }
    let reference = trainer.reference_set(&train)?;
    trainer.checkpoint(reference, final_loss).save(&a.out)?;
    writeln!(
        out,
        "trained {} epochs of {} on {} images; checkpoint {}",
        trainer.epochs_done(),
        trainer.config.kind,
        train.len(),
        a.out.display()
    )?;
    Ok(())
}

/// `n` equispaced points from `-r` to `r` inclusive.
pub fn lattice(n: usize, r: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Invalid(format!("grid needs at least 2 points per side, got {n}")));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Invalid(format!("grid range must be positive, got {r}")));
    }
    Ok((0..n)
        .map(|i| {
            if i == n - 1 {
                r
            } else {
                -r + 2.0 * r * i as f64 / (n - 1) as f64
            }
        })
        .collect())
}

/// Query points of an N×N grid: tile `(row, col)` sits at
/// `(g[col], g[N-1-row])`, so the first coordinate grows to the right and
/// the second grows upwards.
pub fn grid_points(n: usize, r: f64) -> Result<Matrix> {
    let g = lattice(n, r)?;
    let mut m = Matrix::zeros(n * n, 2);
    for row in 0..n {
        for col in 0..n {
            m[(row * n + col, 0)] = g[col];
            m[(row * n + col, 1)] = g[n - 1 - row];
        }
    }
    Ok(m)
}

pub fn parse_point(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Invalid(format!("bad coordinate {t:?} in {s:?}")))
        })
        .collect()
}

/// Decodes query points: through the reference set for an npvae, directly
/// as latents for a vae.
pub fn decode_queries(ckpt: &Checkpoint, queries: &Matrix) -> Result<Matrix> {
    match &ckpt.model {
        Model::NpVae(n) => {
            let reference = ckpt
                .reference
                .as_ref()
                .ok_or_else(|| Error::Invalid("checkpoint has no reference set".into()))?;
            if queries.cols() != n.x_dim() {
                return Err(Error::Invalid(format!(
                    "query has {} coordinates, X has {}",
                    queries.cols(),
                    n.x_dim()
                )));
            }
            npvae::ancestral_sample(reference, &n.vae.decoder, &n.kernel, queries)
        }
        Model::Vae(v) => {
            if queries.cols() != v.z_dim() {
                return Err(Error::Invalid(format!(
                    "query has {} coordinates, Z has {}",
                    queries.cols(),
                    v.z_dim()
                )));
            }
            vae::decode(&v.decoder, queries, Dropout::Off).map(|(p, _)| p)
        }
    }
}

fn cmd_sample(a: SampleArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (queries, layout) = match (&a.x, a.grid) {
        (Some(s), _) => {
            let p = parse_point(s)?;
            (Matrix::from_rows(&[p.as_slice()])?, (1, 1))
        }
        (None, Some(n)) => {
            if let Model::Vae(v) = &ckpt.model {
                if v.z_dim() != 2 {
                    return Err(Error::Unsupported(format!(
                        "grid sampling a vae needs z_dim 2, checkpoint has {}",
                        v.z_dim()
                    )));
                }
            }
            (grid_points(n, a.range)?, (n, n))
        }
        (None, None) => return Err(Error::Invalid("pass --x or --grid".into())),
    };
    let images = decode_queries(&ckpt, &queries)?;
    fs::write(&a.out, encode_pgm(&images, layout.0, layout.1)?)?;
    writeln!(out, "wrote {} samples to {}", images.rows(), a.out.display())?;
    Ok(())
}

fn cmd_interpolate(a: InterpolateArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    if a.space == Space::X && ckpt.model.kind() == ModelKind::Vae {
        return Err(Error::Unsupported("X-space interpolation needs an npvae checkpoint".into()));
    }
    let mnist = load_data(&a.data.data_dir, ckpt.config.binarize)?;
    let train = &mnist.train;
    for idx in [a.a, a.b] {
        if idx >= train.len() {
            return Err(Error::Invalid(format!(
                "index {idx} outside the {} training images",
                train.len()
            )));
        }
    }
    let strip = npvae::interpolate(
        &ckpt.model,
        ckpt.reference.as_ref(),
        train.y.row(a.a),
        train.y.row(a.b),
        a.steps,
        a.space,
    )?;
    fs::write(&a.out, encode_pgm(&strip, 1, a.steps)?)?;
    writeln!(out, "wrote {} interpolants to {}", a.steps, a.out.display())?;
    Ok(())
}

fn encode_chunks(data: &DataSplit, f: impl Fn(&Matrix) -> Result<Matrix>) -> Result<Matrix> {
    let mut parts = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let end = (start + ENCODE_CHUNK).min(data.len());
        parts.push(f(&data.y.slice_rows(start, end)?)?);
        start = end;
    }
    let mut it = parts.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::Invalid("cannot embed an empty split".into()))?;
    for p in it {
        acc = acc.vstack(&p)?;
    }
    Ok(acc)
}

/// Embedding of a split: X locations for an npvae, Z posterior means for a
/// vae with z_dim 2. Returns the points and the CSV column prefix.
pub fn embed_split(model: &Model, data: &DataSplit) -> Result<(Matrix, &'static str)> {
    match model {
        Model::NpVae(n) => Ok((encode_chunks(data, |y| n.x_encoder.predict(y))?, "x")),
        Model::Vae(v) if v.z_dim() == 2 => Ok((
            encode_chunks(data, |y| vae::encode(&v.z_encoder, y, Dropout::Off).map(|(p, _)| p.mu))?,
            "z",
        )),
        Model::Vae(v) => Err(Error::Unsupported(format!(
            "embedding a vae needs z_dim 2, checkpoint has {}",
            v.z_dim()
        ))),
    }
}

fn cmd_embed(a: EmbedArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    if let Model::Vae(v) = &ckpt.model {
        if v.z_dim() != 2 {
            return Err(Error::Unsupported(format!(
                "embedding a vae needs z_dim 2, checkpoint has {}",
                v.z_dim()
            )));
        }
        log::warn!("vae checkpoint: exporting Z posterior means instead of X");
    }
    let mnist = load_data(&a.data.data_dir, ckpt.config.binarize)?;
    let data = mnist.split(a.split);
    let (points, prefix) = embed_split(&ckpt.model, data)?;
    fs::write(&a.out, format_embedding_csv(&points, &data.labels, prefix)?)?;
    writeln!(out, "wrote {} embeddings to {}", points.rows(), a.out.display())?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mnist = load_data(&a.data.data_dir, ckpt.config.binarize)?;
    let c = &ckpt.config;
    let l = evaluate(&ckpt.model, c.lambda, mnist.split(a.split), c.batch_size, c.seeds().eval)?;
    writeln!(out, "neg_recon {}", l.neg_reconstruction)?;
    writeln!(out, "kl {}", l.kl)?;
    if ckpt.model.kind() == ModelKind::Npvae {
        writeln!(out, "penalty {}", l.penalty)?;
    }
    writeln!(out, "total {}", l.total)?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let opts = GradCheckOptions {
        h: a.h,
        tolerance: a.tolerance,
        flip_sign: a.flip_sign,
        seed: a.seed,
    };
    let cases = run_gradcheck(&opts)?;
    let mut failed = Vec::new();
    for case in &cases {
        for b in &case.report.blocks {
            let ok = b.max_rel_err < opts.tolerance;
            writeln!(
                out,
                "{:<4} {:<28} {:<24} max_rel_err {:.3e}",
                if ok { "ok" } else { "FAIL" },
                case.name,
                b.name,
                b.max_rel_err
            )?;
            if !ok {
                failed.push(format!("{}: {}", case.name, b.name));
            }
        }
    }
    if failed.is_empty() {
        writeln!(out, "all gradients within {:e}", opts.tolerance)?;
        Ok(())
    } else {
        Err(Error::Invalid(format!("gradient check failed for {}", failed.join(", "))))
    }
}
