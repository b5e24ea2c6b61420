//! Nonparametric VAE extension.
//!
//! A second, deterministic encoder maps each observation to a location
//! `x_i` in a low-dimensional space X. Within a minibatch, every latent mean
//! is predicted from the *other* latent means by a convex combination whose
//! weights come from a squared-exponential kernel over X:
//!
//! ```text
//! W_ij ∝ exp(-‖x_i − x_j‖² / (2 l²))   for j ≠ i,   W_ii = 0,   Σ_j W_ij = 1
//! z̃   = W · E[Z]
//! loss = neg_reconstruction + kl + λ · mean_i ‖E[z_i] − z̃_i‖²
//! ```
//!
//! This stands in for the predictive mean of a GP over Z indexed by X,
//! `k(x_i, X₋ᵢ) K(X₋ᵢ, X₋ᵢ)⁻¹ z₋ᵢ`, with the inverse replaced by a directly
//! parametrized weight row, and for the KL between predictive posteriors,
//! replaced by matching their first moments. The predictive variance is not
//! modelled.
//!
//! The kernel amplitude σ² cancels under row normalization, so the only
//! kernel parameter is the lengthscale, stored as its logarithm.

use crate::data::DataSplit;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Dropout, Mlp, MlpGrads};
use crate::numcore::{Matrix, Rng};
use crate::vae::{self, DropoutConfig, NoiseStreams, Vae};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub log_lengthscale: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            log_lengthscale: 0.0,
        }
    }
}

impl KernelParams {
    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    /// `1 / (2 l²)`
    fn inv_two_l2(&self) -> f64 {
        0.5 * (-2.0 * self.log_lengthscale).exp()
    }

    /// Kernel log-weights `-d² / (2 l²)` for a matrix of squared distances.
    pub fn logits(&self, sqdist: &Matrix) -> Matrix {
        let c = self.inv_two_l2();
        sqdist.map(|d| -d * c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpVae {
    pub vae: Vae,
    pub x_encoder: Mlp,
    pub kernel: KernelParams,
}

impl NpVae {
    pub fn x_dim(&self) -> usize {
        self.x_encoder.output_dim()
    }
}

/// Deterministic map from observations to X locations.
pub fn encode_x(x_encoder: &Mlp, y: &Matrix, dropout: Dropout<'_>) -> Result<Matrix> {
    x_encoder.forward(y, dropout).map(|(x, _)| x)
}

/// Leave-one-out kernel weights: zero diagonal, rows are convex combinations.
pub fn kernel_weights(x: &Matrix, kernel: &KernelParams) -> Result<Matrix> {
    if x.rows() < 2 {
        return Err(Error::DegenerateBatch { n: x.rows() });
    }
    kernel.logits(&x.pairwise_sqdist()).row_softmax_masked()
}

/// `z̃ = W × mu`; row i only sees the other rows because `W_ii = 0`.
pub fn predict_ztilde(w: &Matrix, mu: &Matrix) -> Result<Matrix> {
    w.matmul(mu)
}

/// Mean over rows of `‖mu_i − z̃_i‖²`.
pub fn moment_penalty(mu: &Matrix, ztilde: &Matrix) -> Result<f64> {
    let diff = mu.sub(ztilde)?;
    Ok(diff.sum_squares() / mu.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub neg_reconstruction: f64,
    pub kl: f64,
    /// Unweighted moment penalty (0 for the plain VAE).
    pub penalty: f64,
    /// `neg_reconstruction + kl + λ·penalty`
    pub total: f64,
}

impl LossBreakdown {
    pub fn elbo(&self) -> f64 {
        -(self.neg_reconstruction + self.kl)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpVaeGrads {
    pub z_encoder: MlpGrads,
    pub x_encoder: MlpGrads,
    pub decoder: MlpGrads,
    pub log_lengthscale: f64,
}

/// Gradients of `scale · moment_penalty(mu, W(x)·mu)`.
#[derive(Debug, Clone)]
pub(crate) struct PenaltyGrads {
    pub mu: Matrix,
    pub x: Matrix,
    pub log_lengthscale: f64,
}

pub(crate) fn penalty_backward(
    x: &Matrix,
    mu: &Matrix,
    w: &Matrix,
    kernel: &KernelParams,
    scale: f64,
) -> Result<PenaltyGrads> {
    let n = mu.rows();
    let ztilde = w.matmul(mu)?;
    // G = d(scale·P)/d(mu − z̃)
    let g = mu.sub(&ztilde)?.scale(2.0 * scale / n as f64);
    let mut d_mu = g.clone();
    d_mu.axpy(-1.0, &w.t_matmul(&g)?)?;
    let d_w = g.matmul_t(mu)?.scale(-1.0);

    // back through the masked row softmax
    let mut d_logits = Matrix::zeros(n, n);
    for i in 0..n {
        let wr = w.row(i);
        let gr = d_w.row(i);
        let mut dot = 0.0;
        for j in 0..n {
            if j != i {
                dot += wr[j] * gr[j];
            }
        }
        let out = d_logits.row_mut(i);
        for j in 0..n {
            if j != i {
                out[j] = wr[j] * (gr[j] - dot);
            }
        }
    }

    let sqdist = x.pairwise_sqdist();
    let c = kernel.inv_two_l2();
    let mut d_log_l = 0.0;
    for (dl, s) in d_logits.as_slice().iter().zip(sqdist.as_slice()) {
        d_log_l += dl * 2.0 * c * s;
    }
    let d_sq = d_logits.scale(-c);

    let mut d_x = Matrix::zeros(n, x.cols());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let coeff = 2.0 * (d_sq[(i, j)] + d_sq[(j, i)]);
            for k in 0..x.cols() {
                d_x[(i, k)] += coeff * (x[(i, k)] - x[(j, k)]);
            }
        }
    }
    Ok(PenaltyGrads {
        mu: d_mu,
        x: d_x,
        log_lengthscale: d_log_l,
    })
}

/// Minibatch estimate of the extended objective and gradients for all three
/// networks and the log-lengthscale. `W` is built from this batch alone.
pub fn npvae_loss(
    model: &NpVae,
    y: &Matrix,
    noise: &mut NoiseStreams,
    dropout: DropoutConfig,
    lambda: f64,
) -> Result<(LossBreakdown, NpVaeGrads)> {
    if y.rows() < 2 {
        return Err(Error::DegenerateBatch { n: y.rows() });
    }
    let pass = vae::vae_forward(&model.vae, y, noise, dropout)?;
    let (x, x_cache) = model.x_encoder.forward(
        y,
        Dropout::new(dropout.enabled, dropout.keep_prob, &mut noise.dropout_x),
    )?;
    let w = kernel_weights(&x, &model.kernel)?;
    let mu = &pass.post.mu;
    let penalty = moment_penalty(mu, &predict_ztilde(&w, mu)?)?;
    let b = pass.breakdown;
    let breakdown = LossBreakdown {
        neg_reconstruction: b.neg_reconstruction,
        kl: b.kl,
        penalty,
        total: b.neg_reconstruction + b.kl + lambda * penalty,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite {
            what: format!(
                "npvae loss on batch of {} (neg_recon {}, kl {}, penalty {})",
                y.rows(),
                b.neg_reconstruction,
                b.kl,
                penalty
            ),
        });
    }

    let (base, x_grads, d_log_l) = if lambda == 0.0 {
        (
            vae::vae_backward(&model.vae, &pass, y, None)?,
            MlpGrads::zeros_like(&model.x_encoder),
            0.0,
        )
    } else {
        let pg = penalty_backward(&x, mu, &w, &model.kernel, lambda)?;
        let base = vae::vae_backward(&model.vae, &pass, y, Some(&pg.mu))?;
        let (xg, _) = model.x_encoder.backward(&x_cache, &pg.x)?;
        (base, xg, pg.log_lengthscale)
    };
    Ok((
        breakdown,
        NpVaeGrads {
            z_encoder: base.z_encoder,
            x_encoder: x_grads,
            decoder: base.decoder,
            log_lengthscale: d_log_l,
        },
    ))
}

/// Stored `(x, E[z])` anchors that map X locations to Z after training.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub x_ref: Matrix,
    pub z_ref: Matrix,
    pub labels: Option<Vec<u32>>,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.x_ref.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x_ref.rows() == 0
    }
}

/// Encodes the first `m` points of a seeded shuffle of `data` with dropout
/// off. `m` larger than the split is clamped.
pub fn build_reference_set(
    model: &NpVae,
    data: &DataSplit,
    m: usize,
    seed: u64,
) -> Result<ReferenceSet> {
    let n = data.len();
    if n == 0 || m == 0 {
        return Err(Error::Invalid("reference set needs at least one point".into()));
    }
    if m > n {
        log::warn!("reference set size {m} exceeds split size {n}; using {n}");
    }
    let m = m.min(n);
    let perm = Rng::new(seed).permutation(n);
    let idx = &perm[..m];
    let y = data.y.select_rows(idx)?;
    let x_ref = model.x_encoder.predict(&y)?;
    let (post, _) = vae::encode(&model.vae.z_encoder, &y, Dropout::Off)?;
    Ok(ReferenceSet {
        x_ref,
        z_ref: post.mu,
        labels: Some(idx.iter().map(|&i| data.labels[i]).collect()),
    })
}

/// Kernel-weighted average of the anchor latents for each query location.
/// Weights are normalized over every anchor.
pub fn latent_from_x(
    reference: &ReferenceSet,
    kernel: &KernelParams,
    x_query: &Matrix,
) -> Result<Matrix> {
    if reference.is_empty() {
        return Err(Error::Invalid("empty reference set".into()));
    }
    if x_query.cols() != reference.x_ref.cols() {
        return Err(Error::dim("latent_from_x", x_query.shape(), reference.x_ref.shape()));
    }
    let m = reference.len();
    let c = kernel.inv_two_l2();
    let mut weights = Matrix::zeros(x_query.rows(), m);
    for q in 0..x_query.rows() {
        let xq = x_query.row(q);
        let w = weights.row_mut(q);
        for (j, wj) in w.iter_mut().enumerate() {
            let d: f64 = xq
                .iter()
                .zip(reference.x_ref.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            *wj = -d * c;
        }
        let max = w.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for wj in w.iter_mut() {
            *wj = (*wj - max).exp();
            total += *wj;
        }
        for wj in w.iter_mut() {
            *wj /= total;
        }
    }
    weights.matmul(&reference.z_ref)
}

/// Decodes the latent implied by each X query (dropout off).
pub fn ancestral_sample(
    reference: &ReferenceSet,
    decoder: &Mlp,
    kernel: &KernelParams,
    x_query: &Matrix,
) -> Result<Matrix> {
    let z = latent_from_x(reference, kernel, x_query)?;
    vae::decode(decoder, &z, Dropout::Off).map(|(p, _)| p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    X,
    Z,
}

impl std::str::FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Space::X),
            "z" | "Z" => Ok(Space::Z),
            other => Err(Error::Invalid(format!("unknown space {other:?}, expected x or z"))),
        }
    }
}

fn lerp_rows(a: &[f64], b: &[f64], steps: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(steps, a.len());
    for t in 0..steps {
        let alpha = t as f64 / (steps - 1) as f64;
        for (o, (&av, &bv)) in out.row_mut(t).iter_mut().zip(a.iter().zip(b)) {
            *o = (1.0 - alpha) * av + alpha * bv;
        }
    }
    Ok(out)
}

/// Decoded images along the straight line between two observations, either
/// between their Z posterior means or between their X locations.
pub fn interpolate(
    model: &Model,
    reference: Option<&ReferenceSet>,
    y_a: &[f64],
    y_b: &[f64],
    steps: usize,
    space: Space,
) -> Result<Matrix> {
    if steps < 2 {
        return Err(Error::Invalid(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let ends = Matrix::from_rows(&[y_a, y_b])?;
    let vae = model.vae();
    let z = match space {
        Space::Z => {
            let (post, _) = vae::encode(&vae.z_encoder, &ends, Dropout::Off)?;
            lerp_rows(post.mu.row(0), post.mu.row(1), steps)?
        }
        Space::X => {
            let np = model
                .npvae()
                .ok_or_else(|| Error::Unsupported("X-space interpolation needs an npvae model".into()))?;
            let reference = reference
                .ok_or_else(|| Error::Unsupported("X-space interpolation needs a reference set".into()))?;
            let x = np.x_encoder.predict(&ends)?;
            let path = lerp_rows(x.row(0), x.row(1), steps)?;
            latent_from_x(reference, &np.kernel, &path)?
        }
    };
    vae::decode(&vae.decoder, &z, Dropout::Off).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, Activation};

    fn random_x(seed: u64, n: usize, d: usize) -> Matrix {
        Rng::new(seed).standard_normal(n, d)
    }

    #[test]
    fn two_points_swap() {
        for l in [-3.0, 0.0, 4.0] {
            let w = kernel_weights(&random_x(1, 2, 2), &KernelParams { log_lengthscale: l }).unwrap();
            assert_eq!(w.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn equidistant_points_share_weight() {
        let h = 3f64.sqrt() / 2.0;
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.5, h]]).unwrap();
        let w = kernel_weights(&x, &KernelParams::default()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { 0.5 };
                assert!((w[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_point_is_degenerate() {
        assert!(matches!(
            kernel_weights(&Matrix::zeros(1, 2), &KernelParams::default()),
            Err(Error::DegenerateBatch { n: 1 })
        ));
    }

    /// exp kernel with amplitude, zero diagonal, divide by row sums.
    fn naive_weights(x: &Matrix, l: f64, amplitude: f64) -> Matrix {
        let n = x.rows();
        let mut k = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut d = 0.0;
                for c in 0..x.cols() {
                    d += (x[(i, c)] - x[(j, c)]).powi(2);
                }
                k[(i, j)] = amplitude * (-d / (2.0 * l * l)).exp();
            }
        }
        for i in 0..n {
            k[(i, i)] = 0.0;
            let s: f64 = k.row(i).iter().sum();
            for v in k.row_mut(i) {
                *v /= s;
            }
        }
        k
    }

    #[test]
    fn matches_naive_pipeline() {
        for seed in 0..10 {
            let x = random_x(seed, 6, 2);
            let kp = KernelParams {
                log_lengthscale: 0.3 * seed as f64 - 1.0,
            };
            let w = kernel_weights(&x, &kp).unwrap();
            let naive = naive_weights(&x, kp.lengthscale(), 1.0);
            assert!(w.sub(&naive).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn amplitude_cancels() {
        let x = random_x(3, 8, 2);
        let base = naive_weights(&x, 1.3, 1.0);
        for amp in [0.125, 2.0, 1024.0] {
            assert_eq!(naive_weights(&x, 1.3, amp), base);
        }
        for amp in [0.37, 3.7, 91.0] {
            assert!(naive_weights(&x, 1.3, amp).sub(&base).unwrap().max_abs() < 1e-15);
        }
    }

    #[test]
    fn ztilde_examples() {
        let w = kernel_weights(&random_x(4, 5, 2), &KernelParams::default()).unwrap();
        let mu = Matrix::from_rows(&[[1.5, -2.0]; 5]).unwrap();
        let zt = predict_ztilde(&w, &mu).unwrap();
        assert!(zt.sub(&mu).unwrap().max_abs() < 1e-14);

        let w = kernel_weights(&random_x(5, 2, 2), &KernelParams::default()).unwrap();
        let mu = Matrix::from_rows(&[[1.0], [-1.0]]).unwrap();
        assert_eq!(predict_ztilde(&w, &mu).unwrap().as_slice(), &[-1.0, 1.0]);
        assert_eq!(moment_penalty(&mu, &predict_ztilde(&w, &mu).unwrap()).unwrap(), 4.0);
    }

    #[test]
    fn ztilde_stays_in_hull_of_others() {
        let x = random_x(6, 7, 2);
        let mu = random_x(7, 7, 3);
        let w = kernel_weights(&x, &KernelParams { log_lengthscale: 0.5 }).unwrap();
        let zt = predict_ztilde(&w, &mu).unwrap();
        for i in 0..7 {
            for k in 0..3 {
                let others = (0..7).filter(|&j| j != i).map(|j| mu[(j, k)]);
                let lo = others.clone().fold(f64::INFINITY, f64::min);
                let hi = others.fold(f64::NEG_INFINITY, f64::max);
                assert!(zt[(i, k)] >= lo - 1e-12 && zt[(i, k)] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn leave_one_out_is_exact() {
        let x = random_x(8, 6, 2);
        let mu = random_x(9, 6, 2);
        let w = kernel_weights(&x, &KernelParams::default()).unwrap();
        let base = predict_ztilde(&w, &mu).unwrap();
        for i in 0..6 {
            let mut bumped = mu.clone();
            for v in bumped.row_mut(i) {
                *v += 0.731;
            }
            let zt = predict_ztilde(&w, &bumped).unwrap();
            assert_eq!(zt.row(i), base.row(i));
        }
    }

    #[test]
    fn penalty_matches_loop() {
        let mu = random_x(10, 5, 3);
        let zt = random_x(11, 5, 3);
        let mut naive = 0.0;
        for i in 0..5 {
            for k in 0..3 {
                naive += (mu[(i, k)] - zt[(i, k)]).powi(2);
            }
        }
        assert!((moment_penalty(&mu, &zt).unwrap() - naive / 5.0).abs() < 1e-12);
        assert_eq!(moment_penalty(&mu, &mu).unwrap(), 0.0);
    }

    #[test]
    fn penalty_gradients_wrt_x_mu_and_lengthscale() {
        let x = random_x(12, 5, 2);
        let mu = random_x(13, 5, 3);
        let kp = KernelParams { log_lengthscale: 0.2 };
        let w = kernel_weights(&x, &kp).unwrap();
        let g = penalty_backward(&x, &mu, &w, &kp, 1.0).unwrap();
        let f = |p: &[Matrix]| {
            let kp = KernelParams {
                log_lengthscale: p[2].as_slice()[0],
            };
            let w = kernel_weights(&p[0], &kp).unwrap();
            moment_penalty(&p[1], &predict_ztilde(&w, &p[1]).unwrap()).unwrap()
        };
        let report = grad_check(
            &[x, mu, Matrix::scalar(0.2)],
            &["x".into(), "mu".into(), "log_lengthscale".into()],
            &[g.x, g.mu, Matrix::scalar(g.log_lengthscale)],
            f,
            1e-5,
            1e-4,
        );
        assert!(report.passed(), "{report:#?}");
    }

    fn toy_model(seed: u64) -> NpVae {
        let mut rng = Rng::new(seed);
        NpVae {
            vae: Vae {
                z_encoder: Mlp::glorot(&mut rng, &[12, 8, 8, 4], Activation::Identity).unwrap(),
                decoder: Mlp::glorot(&mut rng, &[2, 8, 8, 12], Activation::Sigmoid).unwrap(),
            },
            x_encoder: Mlp::glorot(&mut rng, &[12, 8, 8, 2], Activation::Identity).unwrap(),
            kernel: KernelParams::default(),
        }
    }

    fn toy_batch(seed: u64, n: usize) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_vec(n, 12, (0..n * 12).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn zero_lambda_reduces_to_vae() {
        let model = toy_model(1);
        let y = toy_batch(2, 6);
        let noise = NoiseStreams::from_seed(5);
        let dropout = DropoutConfig::train(0.8);
        let (b, g) = npvae_loss(&model, &y, &mut noise.clone(), dropout, 0.0).unwrap();
        let (vb, vg) = vae::vae_loss(&model.vae, &y, &mut noise.clone(), dropout).unwrap();
        assert_eq!(b.neg_reconstruction, vb.neg_reconstruction);
        assert_eq!(b.kl, vb.kl);
        assert_eq!(b.total, vb.neg_reconstruction + vb.kl);
        assert_eq!(g.z_encoder, vg.z_encoder);
        assert_eq!(g.decoder, vg.decoder);
        assert!(g.x_encoder.is_zero());
        assert_eq!(g.log_lengthscale, 0.0);
    }

    #[test]
    fn penalty_component_recomposes() {
        let model = toy_model(3);
        let y = toy_batch(4, 5);
        let (b, _) = npvae_loss(&model, &y, &mut NoiseStreams::from_seed(1), DropoutConfig::OFF, 1.0).unwrap();
        let x = encode_x(&model.x_encoder, &y, Dropout::Off).unwrap();
        let (post, _) = vae::encode(&model.vae.z_encoder, &y, Dropout::Off).unwrap();
        let w = kernel_weights(&x, &model.kernel).unwrap();
        let p = moment_penalty(&post.mu, &predict_ztilde(&w, &post.mu).unwrap()).unwrap();
        assert!((b.penalty - p).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_single_row() {
        let model = toy_model(3);
        assert!(matches!(
            npvae_loss(&model, &toy_batch(1, 1), &mut NoiseStreams::from_seed(1), DropoutConfig::OFF, 1.0),
            Err(Error::DegenerateBatch { n: 1 })
        ));
    }

    #[test]
    fn encode_x_examples() {
        let zero = Mlp::zeros(&[12, 4, 2], Activation::Identity);
        let y = toy_batch(1, 3);
        let x = encode_x(&zero, &y, Dropout::Off).unwrap();
        assert_eq!(x.shape(), (3, 2));
        assert_eq!(x.max_abs(), 0.0);
        let model = toy_model(2);
        let row = toy_batch(3, 1);
        let x = encode_x(&model.x_encoder, &row.vstack(&row).unwrap(), Dropout::Off).unwrap();
        assert_eq!(x.row(0), x.row(1));
    }

    fn toy_reference() -> ReferenceSet {
        ReferenceSet {
            x_ref: Matrix::from_rows(&[[0.0, 0.0], [30.0, 0.0], [0.0, -30.0]]).unwrap(),
            z_ref: Matrix::from_rows(&[[1.0, 2.0], [-1.0, 0.5], [3.0, -4.0]]).unwrap(),
            labels: None,
        }
    }

    #[test]
    fn single_anchor_sampling() {
        let r = ReferenceSet {
            x_ref: Matrix::from_rows(&[[0.3, 0.1]]).unwrap(),
            z_ref: Matrix::from_rows(&[[0.7, -0.2]]).unwrap(),
            labels: None,
        };
        let q = random_x(1, 4, 2).scale(5.0);
        let z = latent_from_x(&r, &KernelParams::default(), &q).unwrap();
        for i in 0..4 {
            assert_eq!(z.row(i), r.z_ref.row(0));
        }
    }

    #[test]
    fn far_anchors_vanish() {
        let r = toy_reference();
        let z = latent_from_x(&r, &KernelParams::default(), &Matrix::from_rows(&[[0.0, 0.0]]).unwrap()).unwrap();
        assert!(z.sub(&r.z_ref.slice_rows(0, 1).unwrap()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn sampled_latents_stay_in_anchor_box() {
        let r = toy_reference();
        let q = random_x(2, 50, 2).scale(20.0);
        let z = latent_from_x(&r, &KernelParams { log_lengthscale: 2.5 }, &q).unwrap();
        for i in 0..50 {
            for k in 0..2 {
                let col = (0..3).map(|j| r.z_ref[(j, k)]);
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                assert!(z[(i, k)] >= lo - 1e-12 && z[(i, k)] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn empty_reference_is_rejected() {
        let r = ReferenceSet {
            x_ref: Matrix::zeros(0, 2),
            z_ref: Matrix::zeros(0, 2),
            labels: None,
        };
        assert!(latent_from_x(&r, &KernelParams::default(), &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn space_parsing() {
        assert_eq!("x".parse::<Space>().unwrap(), Space::X);
        assert_eq!("z".parse::<Space>().unwrap(), Space::Z);
        assert!("w".parse::<Space>().is_err());
    }
}
