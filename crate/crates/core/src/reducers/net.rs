//! Fully connected autoencoders (plain and Wasserstein) trained with Adam.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Activation, Method, ReducerParams};
use crate::error::{Error, Result};
use crate::{io, linalg, DataMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// out x in
    #[serde(with = "io::b64")]
    pub weights: DMatrix<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        Layer { weights: DMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-a..a)), bias: vec![0.0; outputs] }
    }

    fn forward(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = a * self.weights.transpose();
        for mut row in z.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        z
    }
}

/// Encoder and mirrored decoder. The activation is applied after every layer
/// except the latent and output layers, which are linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub activation: Activation,
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
}

fn activate(act: Activation, z: &mut DMatrix<f64>) {
    if act == Activation::Tanh {
        z.apply(|v| *v = v.tanh());
    }
}

/// Forward through a stack, keeping each layer's input and the final output.
fn run(layers: &[Layer], act: Activation, x: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut a = x.clone();
    for (l, layer) in layers.iter().enumerate() {
        let mut z = layer.forward(&a);
        if l + 1 < layers.len() {
            activate(act, &mut z);
        }
        inputs.push(a);
        a = z;
    }
    (inputs, a)
}

/// Backpropagate `grad` (w.r.t. the stack output) and return the input
/// gradient with the per-layer parameter gradients.
fn backprop(
    layers: &[Layer],
    act: Activation,
    inputs: &[DMatrix<f64>],
    mut grad: DMatrix<f64>,
) -> (DMatrix<f64>, Vec<(DMatrix<f64>, Vec<f64>)>) {
    let mut out = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        let dw = grad.transpose() * &inputs[l];
        let db: Vec<f64> = grad.column_iter().map(|c| c.sum()).collect();
        let mut da = &grad * &layers[l].weights;
        if l > 0 && act == Activation::Tanh {
            // inputs[l] is the tanh output of the previous layer
            da.zip_apply(&inputs[l], |g, a| *g *= 1.0 - a * a);
        }
        out.push((dw, db));
        grad = da;
    }
    out.reverse();
    (grad, out)
}

/// Inverse multiquadric kernel `C / (C + |a - b|^2)` with `C = 2 d`.
fn imq(sq: f64, c: f64) -> f64 {
    c / (c + sq)
}

fn sq_between(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum()
}

/// Unbiased MMD^2 estimate between latent codes `z` and prior samples `p`
/// under the IMQ kernel, with its gradient w.r.t. `z`.
pub fn mmd_imq(z: &DMatrix<f64>, p: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let (n, d) = z.shape();
    let m = p.nrows();
    let c = 2.0 * d as f64;
    let mut grad = DMatrix::zeros(n, d);
    if n < 2 || m < 2 {
        return (0.0, grad);
    }
    let (wz, wp, wx) = (1.0 / (n * (n - 1)) as f64, 1.0 / (m * (m - 1)) as f64, 2.0 / (n * m) as f64);
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let sq = sq_between(z, i, z, j);
                value += wz * imq(sq, c);
                // d/dz_i of k(z_i, z_j), counted for both orderings
                let dk = -c / (c + sq).powi(2) * 2.0 * wz * 2.0;
                for k in 0..d {
                    grad[(i, k)] += dk * (z[(i, k)] - z[(j, k)]);
                }
            }
        }
        for j in 0..m {
            let sq = sq_between(z, i, p, j);
            value -= wx * imq(sq, c);
            let dk = c / (c + sq).powi(2) * 2.0 * wx;
            for k in 0..d {
                grad[(i, k)] += dk * (z[(i, k)] - p[(j, k)]);
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            if i != j {
                value += wp * imq(sq_between(p, i, p, j), c);
            }
        }
    }
    (value, grad)
}

impl Net {
    pub fn new(dim: usize, hidden: &[usize], d: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(d);
        let encoder = widths.windows(2).map(|w| Layer::glorot(w[0], w[1], rng)).collect();
        let decoder = widths.iter().rev().collect::<Vec<_>>().windows(2).map(|w| Layer::glorot(*w[0], *w[1], rng)).collect();
        Net { activation, encoder, decoder }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.weights.nrows())
    }

    pub fn encode(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        run(&self.encoder, self.activation, x).1
    }

    pub fn decode(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        run(&self.decoder, self.activation, z).1
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder.iter().chain(&self.decoder)
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All weights and biases, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend(l.weights.iter());
            out.extend(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            let nw = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
    }

    /// Mean squared reconstruction error plus `lambda * MMD^2` when prior
    /// samples are given, with the gradient in `params()` order.
    pub fn loss_and_grad(&self, x: &DMatrix<f64>, prior: Option<&DMatrix<f64>>, lambda: f64) -> (f64, Vec<f64>) {
        let (enc_in, z) = run(&self.encoder, self.activation, x);
        let (dec_in, xhat) = run(&self.decoder, self.activation, &z);
        let scale = 1.0 / x.len() as f64;
        let diff = &xhat - x;
        let mut loss = diff.norm_squared() * scale;
        let (mut dz, dec_grads) = backprop(&self.decoder, self.activation, &dec_in, diff * (2.0 * scale));
        if let Some(p) = prior {
            let (mmd, g) = mmd_imq(&z, p);
            loss += lambda * mmd;
            dz += g * lambda;
        }
        let (_, enc_grads) = backprop(&self.encoder, self.activation, &enc_in, dz);
        let mut flat = Vec::with_capacity(self.num_params());
        for (dw, db) in enc_grads.iter().chain(&dec_grads) {
            flat.extend(dw.iter());
            flat.extend(db);
        }
        (loss, flat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetModel {
    pub mean: Vec<f64>,
    /// Global input scale (root mean column variance).
    pub scale: f64,
    pub net: Net,
    /// WAE penalty weight; zero for a plain autoencoder.
    pub lambda: f64,
    /// Mean batch loss per epoch.
    pub loss_history: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

pub fn fit(x: &DataMatrix, params: &ReducerParams) -> Result<(NetModel, DataMatrix)> {
    let (n, dim) = x.shape();
    let d = params.d;
    let mean = linalg::column_means(x);
    let centered = linalg::center_rows(x, &mean);
    let var = centered.norm_squared() / (n * dim) as f64;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let xs = centered / scale;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut net = Net::new(dim, &params.net_hidden, d, params.activation, &mut rng);
    let lambda = if params.method == Method::Wae { params.lambda_penalty } else { 0.0 };
    let mut flat = net.params();
    let mut adam = Adam::new(flat.len(), params.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(params.batch) {
            let xb = DMatrix::from_fn(chunk.len(), dim, |i, j| xs[(chunk[i], j)]);
            let prior = (lambda > 0.0).then(|| DMatrix::from_fn(chunk.len(), d, |_, _| rng.sample(StandardNormal)));
            let (loss, grad) = net.loss_and_grad(&xb, prior.as_ref(), lambda);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::numerical(format!(
                    "{} training diverged at epoch {epoch} (loss {loss}); lower the learning rate",
                    params.method
                )));
            }
            adam.step(&mut flat, &grad);
            net.set_params(&flat);
            total += loss;
            batches += 1;
        }
        history.push(total / batches as f64);
        log::debug!("{} epoch {epoch}: loss {:.6e}", params.method, history[epoch]);
    }
    let model = NetModel { mean: mean.iter().copied().collect(), scale, net, lambda, loss_history: history };
    let z = model.transform(x)?;
    Ok((model, z))
}

impl NetModel {
    pub fn latent_dim(&self) -> usize {
        self.net.latent_dim()
    }

    fn standardize(&self, x: &DataMatrix) -> DataMatrix {
        linalg::center_rows(x, &nalgebra::DVector::from_column_slice(&self.mean)) / self.scale
    }

    pub fn transform(&self, x: &DataMatrix) -> Result<DataMatrix> {
        Ok(self.net.encode(&self.standardize(x)))
    }

    /// Decoder output mapped back to the original input units.
    pub fn reconstruct(&self, z: &DataMatrix) -> DataMatrix {
        let mut out = self.net.decode(z) * self.scale;
        for mut row in out.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        out
    }
}
