//! Multilayer perceptrons with hand-written backpropagation, inverted
//! dropout, Glorot initialization, Adam, and a finite-difference checker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Identity => m.clone(),
            Activation::Tanh => m.tanh(),
            Activation::Sigmoid => m.sigmoid(),
        }
    }

    /// Chain rule through the activation, given its output.
    fn backward(self, output: &Matrix, grad: &Matrix) -> Result<Matrix> {
        match self {
            Activation::Identity => Ok(grad.clone()),
            Activation::Tanh => output.zip_map(grad, "tanh_backward", |y, g| g * (1.0 - y * y)),
            Activation::Sigmoid => {
                output.zip_map(grad, "sigmoid_backward", |y, g| g * y * (1.0 - y))
            }
        }
    }
}

/// One affine layer: `out = input × weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// A tanh MLP. Hidden layers always use tanh; the last layer uses
/// `output_activation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output_activation: Activation,
}

/// Dropout applied after each hidden activation.
pub enum Dropout<'a> {
    Off,
    On { keep_prob: f64, rng: &'a mut Rng },
}

impl<'a> Dropout<'a> {
    pub fn new(enabled: bool, keep_prob: f64, rng: &'a mut Rng) -> Self {
        if enabled && keep_prob < 1.0 {
            Dropout::On { keep_prob, rng }
        } else {
            Dropout::Off
        }
    }
}

/// Everything `Mlp::backward` needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer, after any dropout mask.
    inputs: Vec<Matrix>,
    /// tanh output of each hidden layer, before masking.
    hidden: Vec<Matrix>,
    /// Scaled keep masks, one per hidden layer when dropout was on.
    masks: Vec<Option<Matrix>>,
    output: Matrix,
    signature: Vec<(usize, usize)>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn masks(&self) -> &[Option<Matrix>] {
        &self.masks
    }
}

/// Gradients with the same layout as an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            layers: mlp
                .layers
                .iter()
                .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn blocks(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.blocks().iter().all(|b| b.as_slice().iter().all(|&v| v == 0.0))
    }

    pub fn add_assign(&mut self, other: &MlpGrads) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight)?;
            a.bias.add_assign(&b.bias)?;
        }
        Ok(())
    }
}

impl Mlp {
    /// Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)), zero biases.
    pub fn glorot(rng: &mut Rng, dims: &[usize], output_activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Invalid(format!(
                "mlp needs at least two positive layer sizes, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = glorot_bound(w[0], w[1]);
                let mut layer = Dense::zeros(w[0], w[1]);
                for v in layer.weight.as_mut_slice() {
                    *v = rng.uniform_range(-bound, bound);
                }
                layer
            })
            .collect();
        Ok(Mlp {
            layers,
            output_activation,
        })
    }

    pub fn zeros(dims: &[usize], output_activation: Activation) -> Self {
        Mlp {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            output_activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// Layer sizes, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Dense::fan_out));
        d
    }

    /// Parameter blocks in the order `w0, b0, w1, b1, ...`.
    pub fn blocks(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn block_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }

    /// Replaces parameters from a flat block list (as produced by `blocks`).
    pub fn set_blocks(&mut self, blocks: &[Matrix]) -> Result<()> {
        if blocks.len() != 2 * self.layers.len() {
            return Err(Error::Invalid(format!(
                "expected {} blocks, got {}",
                2 * self.layers.len(),
                blocks.len()
            )));
        }
        for (dst, src) in self.blocks_mut().into_iter().zip(blocks) {
            if dst.shape() != src.shape() {
                return Err(Error::dim("set_blocks", dst.shape(), src.shape()));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.is_finite())
    }

    pub fn forward(&self, input: &Matrix, mut dropout: Dropout<'_>) -> Result<(Matrix, ForwardCache)> {
        if input.cols() != self.input_dim() {
            return Err(Error::dim(
                "mlp_forward",
                input.shape(),
                (self.input_dim(), self.output_dim()),
            ));
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut hidden = Vec::with_capacity(n_layers - 1);
        let mut masks = Vec::with_capacity(n_layers - 1);
        let mut current = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let pre = current
                .matmul(&layer.weight)?
                .add_row_broadcast(&layer.bias)?;
            inputs.push(current);
            if k + 1 == n_layers {
                current = self.output_activation.apply(&pre);
            } else {
                let h = pre.tanh();
                let (next, mask) = match &mut dropout {
                    Dropout::Off => (h.clone(), None),
                    Dropout::On { keep_prob, rng } => {
                        let scale = 1.0 / *keep_prob;
                        let mut mask = Matrix::zeros(h.rows(), h.cols());
                        for m in mask.as_mut_slice() {
                            if rng.uniform() < *keep_prob {
                                *m = scale;
                            }
                        }
                        (h.hadamard(&mask)?, Some(mask))
                    }
                };
                hidden.push(h);
                masks.push(mask);
                current = next;
            }
        }
        let cache = ForwardCache {
            inputs,
            hidden,
            masks,
            output: current.clone(),
            signature: self.signature(input.rows()),
        };
        Ok((current, cache))
    }

    /// Forward pass with dropout off, discarding the cache.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        self.forward(input, Dropout::Off).map(|(out, _)| out)
    }

    fn signature(&self, batch: usize) -> Vec<(usize, usize)> {
        let mut s = vec![(batch, 0)];
        s.extend(self.layers.iter().map(|l| l.weight.shape()));
        s
    }

    /// Reverse-mode gradients of the forward map, given `d loss / d output`.
    /// Returns parameter gradients and `d loss / d input`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if cache.signature != self.signature(grad_output.rows())
            || grad_output.shape() != cache.output.shape()
        {
            return Err(Error::Invalid(
                "forward cache does not match these parameters or this gradient".into(),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = self.output_activation.backward(&cache.output, grad_output)?;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            grads.push(Dense {
                weight: cache.inputs[k].t_matmul(&g)?,
                bias: g.col_sums(),
            });
            let mut upstream = g.matmul_t(&layer.weight)?;
            if k > 0 {
                if let Some(mask) = &cache.masks[k - 1] {
                    upstream = upstream.hadamard(mask)?;
                }
                upstream = Activation::Tanh.backward(&cache.hidden[k - 1], &upstream)?;
            }
            g = upstream;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Adam with bias correction over a fixed list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn for_mlp(lr: f64, mlp: &Mlp) -> Self {
        let shapes: Vec<_> = mlp.blocks().iter().map(|b| b.shape()).collect();
        Self::new(lr, &shapes)
    }

    /// One descent step. Every gradient is checked for finiteness before any
    /// parameter moves; the error names the offending block.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "adam tracks {} blocks, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() || params[i].shape() != self.m[i].shape() {
                return Err(Error::dim("adam_step", params[i].shape(), g.shape()));
            }
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("block {i}"));
                return Err(Error::NonFinite {
                    what: format!("gradient of {name}"),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let p = p.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for (j, &gj) in g.as_slice().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_mlp(&mut self, mlp: &mut Mlp, grads: &MlpGrads, prefix: &str) -> Result<()> {
        let names = mlp.block_names(prefix);
        let g = grads.blocks();
        self.step(&mut mlp.blocks_mut(), &g, &names)
    }
}

/// Relative errors below this denominator are measured against it instead,
/// so near-zero gradients are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_err))
    }

    /// Passes iff every block's error is strictly below the tolerance.
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockCheck> {
        self.blocks.iter().filter(|b| b.max_rel_err.is_nan() || b.max_rel_err >= self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares analytic gradients against central differences with step `h`.
/// `loss` must be deterministic in the parameters it is given.
pub fn grad_check<F>(
    params: &[Matrix],
    names: &[String],
    analytic: &[Matrix],
    mut loss: F,
    h: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&[Matrix]) -> f64,
{
    let mut work = params.to_vec();
    let mut blocks = Vec::with_capacity(params.len());
    for b in 0..params.len() {
        let mut worst = BlockCheck {
            name: names.get(b).cloned().unwrap_or_else(|| format!("block{b}")),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..params[b].len() {
            let orig = params[b].as_slice()[j];
            work[b].as_mut_slice()[j] = orig + h;
            let up = loss(&work);
            work[b].as_mut_slice()[j] = orig - h;
            let down = loss(&work);
            work[b].as_mut_slice()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[b].as_slice()[j];
            let err = relative_error(a, numeric);
            // NaN counts as worst
            if err.is_nan() || err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = j;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        blocks.push(worst);
    }
    GradCheckReport { blocks, tolerance }
}
