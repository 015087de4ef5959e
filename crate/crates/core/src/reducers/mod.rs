//! Dimension reduction behind a single fit/transform contract.
//!
//! Every reducer maps N x D row-per-sample data to N x d reduced coordinates.
//! Non-parametric methods keep their training data so that new samples can be
//! embedded with an out-of-sample extension (Nystrom for the spectral kernel
//! methods, landmark MDS for Isomap, barycentric interpolation for LLE and t-SNE).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{linalg, DataMatrix};

pub mod dmaps;
pub mod ica;
pub mod isomap;
pub mod kpca;
pub mod le;
pub mod lle;
pub mod net;
pub mod nmf;
pub mod pca;
pub mod rp;
pub mod tsne;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pca,
    Kpca,
    Grp,
    Srp,
    Ica,
    Nmf,
    Isomap,
    Dmaps,
    Lle,
    Le,
    Tsne,
    Ae,
    Wae,
}

impl Method {
    pub const ALL: [Method; 13] = [
        Method::Pca,
        Method::Kpca,
        Method::Grp,
        Method::Srp,
        Method::Ica,
        Method::Nmf,
        Method::Isomap,
        Method::Dmaps,
        Method::Lle,
        Method::Le,
        Method::Tsne,
        Method::Ae,
        Method::Wae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::Kpca => "kpca",
            Method::Grp => "grp",
            Method::Srp => "srp",
            Method::Ica => "ica",
            Method::Nmf => "nmf",
            Method::Isomap => "isomap",
            Method::Dmaps => "dmaps",
            Method::Lle => "lle",
            Method::Le => "le",
            Method::Tsne => "tsne",
            Method::Ae => "ae",
            Method::Wae => "wae",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown reduction method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Kernel for kPCA. A Gaussian bandwidth of `None` means the median of the
/// pairwise training distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Polynomial { c: f64, p: u32 },
    Gaussian { bandwidth: Option<f64> },
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::Gaussian { bandwidth: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducerParams {
    pub method: Method,
    pub d: usize,
    #[serde(default)]
    pub kernel: Kernel,
    #[serde(default = "defaults::k_neighbors")]
    pub k_neighbors: usize,
    /// Diffusion-map time steps.
    #[serde(default = "defaults::t_diffusion")]
    pub t_diffusion: u32,
    /// Gaussian bandwidth for diffusion maps and Laplacian eigenmaps; `None` uses the median heuristic.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default = "defaults::perplexity")]
    pub perplexity: f64,
    #[serde(default = "defaults::net_hidden")]
    pub net_hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::lambda_penalty")]
    pub lambda_penalty: f64,
    /// Iteration cap for ICA, NMF and t-SNE; `None` keeps each method's default.
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn k_neighbors() -> usize {
        10
    }
    pub fn t_diffusion() -> u32 {
        1
    }
    pub fn perplexity() -> f64 {
        30.0
    }
    pub fn net_hidden() -> Vec<usize> {
        vec![256, 64]
    }
    pub fn epochs() -> usize {
        500
    }
    pub fn batch() -> usize {
        64
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn lambda_penalty() -> f64 {
        10.0
    }
}

impl ReducerParams {
    pub fn new(method: Method, d: usize) -> Self {
        ReducerParams {
            method,
            d,
            kernel: Kernel::default(),
            k_neighbors: defaults::k_neighbors(),
            t_diffusion: defaults::t_diffusion(),
            bandwidth: None,
            perplexity: defaults::perplexity(),
            net_hidden: defaults::net_hidden(),
            activation: Activation::Tanh,
            epochs: defaults::epochs(),
            batch: defaults::batch(),
            learning_rate: defaults::learning_rate(),
            lambda_penalty: defaults::lambda_penalty(),
            max_iter: None,
            seed: 0,
        }
    }

    /// Check the parameters against an N x D training set.
    pub fn validate(&self, n: usize, dim: usize) -> Result<()> {
        if n < 2 {
            return Err(Error::invalid("at least two training samples are required"));
        }
        if self.d == 0 || self.d >= dim {
            return Err(Error::invalid(format!("target dimension d={} must satisfy 1 <= d < D={dim}", self.d)));
        }
        let graph = matches!(self.method, Method::Isomap | Method::Lle | Method::Le);
        if graph && (self.k_neighbors == 0 || self.k_neighbors >= n) {
            return Err(Error::invalid(format!("k_neighbors={} must lie in 1..{n}", self.k_neighbors)));
        }
        if self.method == Method::Lle && self.k_neighbors < self.d + 1 {
            return Err(Error::invalid(format!("LLE needs k_neighbors >= d+1 (got k={}, d={})", self.k_neighbors, self.d)));
        }
        if matches!(self.bandwidth, Some(h) if !(h > 0.0)) {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        if let Kernel::Gaussian { bandwidth: Some(h) } = self.kernel {
            if !(h > 0.0) {
                return Err(Error::invalid("kernel bandwidth must be positive"));
            }
        }
        if matches!(self.method, Method::Ae | Method::Wae) {
            if self.epochs == 0 || self.batch == 0 || !(self.learning_rate > 0.0) || self.lambda_penalty < 0.0 {
                return Err(Error::invalid("network training parameters must be positive"));
            }
            if self.net_hidden.iter().any(|&h| h == 0) {
                return Err(Error::invalid("hidden layer widths must be positive"));
            }
            if n < self.batch {
                return Err(Error::invalid(format!("{n} training samples is fewer than one batch of {}", self.batch)));
            }
        }
        Ok(())
    }
}

/// A fitted reducer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ReducerModel {
    Pca(pca::PcaModel),
    Kpca(kpca::KpcaModel),
    Grp(rp::RpModel),
    Srp(rp::RpModel),
    Ica(ica::IcaModel),
    Nmf(nmf::NmfModel),
    Isomap(isomap::IsomapModel),
    Dmaps(dmaps::DmapsModel),
    Lle(lle::LleModel),
    Le(le::LeModel),
    Tsne(tsne::TsneModel),
    Ae(net::NetModel),
    Wae(net::NetModel),
}

impl ReducerModel {
    /// Fit on `x` and return the model with the training embedding.
    pub fn fit(x: &DataMatrix, params: &ReducerParams) -> Result<(ReducerModel, DataMatrix)> {
        params.validate(x.nrows(), x.ncols())?;
        if !linalg::all_finite(x) {
            return Err(Error::invalid("training data contains non-finite values"));
        }
        let (model, z) = match params.method {
            Method::Pca => {
                let m = pca::fit(x, params.d)?;
                let z = m.transform(x)?;
                (ReducerModel::Pca(m), z)
            }
            Method::Kpca => kpca::fit(x, params.d, params.kernel).map(|(m, z)| (ReducerModel::Kpca(m), z))?,
            Method::Grp => {
                let m = rp::fit(x.ncols(), params.d, rp::Variant::Gaussian, params.seed)?;
                let z = m.transform(x)?;
                (ReducerModel::Grp(m), z)
            }
            Method::Srp => {
                let m = rp::fit(x.ncols(), params.d, rp::Variant::Sparse, params.seed)?;
                let z = m.transform(x)?;
                (ReducerModel::Srp(m), z)
            }
            Method::Ica => {
                let m = ica::fit(x, params.d, params.seed, params.max_iter.unwrap_or(500))?;
                let z = m.transform(x)?;
                (ReducerModel::Ica(m), z)
            }
            Method::Nmf => nmf::fit(x, params.d, params.seed, params.max_iter.unwrap_or(1000))
                .map(|(m, z)| (ReducerModel::Nmf(m), z))?,
            Method::Isomap => isomap::fit(x, params.d, params.k_neighbors).map(|(m, z)| (ReducerModel::Isomap(m), z))?,
            Method::Dmaps => {
                dmaps::fit(x, params.d, params.bandwidth, params.t_diffusion).map(|(m, z)| (ReducerModel::Dmaps(m), z))?
            }
            Method::Lle => lle::fit(x, params.d, params.k_neighbors).map(|(m, z)| (ReducerModel::Lle(m), z))?,
            Method::Le => le::fit(x, params.d, params.k_neighbors, params.bandwidth).map(|(m, z)| (ReducerModel::Le(m), z))?,
            Method::Tsne => {
                let opts = tsne::TsneOptions {
                    perplexity: params.perplexity,
                    iterations: params.max_iter.unwrap_or(1000),
                    k_neighbors: params.k_neighbors,
                    ..Default::default()
                };
                tsne::fit(x, params.d, &opts, params.seed).map(|(m, z)| (ReducerModel::Tsne(m), z))?
            }
            Method::Ae | Method::Wae => {
                let (m, z) = net::fit(x, params)?;
                if params.method == Method::Ae {
                    (ReducerModel::Ae(m), z)
                } else {
                    (ReducerModel::Wae(m), z)
                }
            }
        };
        if !linalg::all_finite(&z) {
            return Err(Error::numerical(format!("{} produced a non-finite embedding", params.method)));
        }
        Ok((model, z))
    }

    pub fn method(&self) -> Method {
        match self {
            ReducerModel::Pca(_) => Method::Pca,
            ReducerModel::Kpca(_) => Method::Kpca,
            ReducerModel::Grp(_) => Method::Grp,
            ReducerModel::Srp(_) => Method::Srp,
            ReducerModel::Ica(_) => Method::Ica,
            ReducerModel::Nmf(_) => Method::Nmf,
            ReducerModel::Isomap(_) => Method::Isomap,
            ReducerModel::Dmaps(_) => Method::Dmaps,
            ReducerModel::Lle(_) => Method::Lle,
            ReducerModel::Le(_) => Method::Le,
            ReducerModel::Tsne(_) => Method::Tsne,
            ReducerModel::Ae(_) => Method::Ae,
            ReducerModel::Wae(_) => Method::Wae,
        }
    }

    /// Embed new samples.
    pub fn transform(&self, x: &DataMatrix) -> Result<DataMatrix> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim(format!("inputs have {} features, model was fitted on {}", x.ncols(), self.input_dim())));
        }
        let z = match self {
            ReducerModel::Pca(m) => m.transform(x),
            ReducerModel::Kpca(m) => m.transform(x),
            ReducerModel::Grp(m) | ReducerModel::Srp(m) => m.transform(x),
            ReducerModel::Ica(m) => m.transform(x),
            ReducerModel::Nmf(m) => m.transform(x),
            ReducerModel::Isomap(m) => m.transform(x),
            ReducerModel::Dmaps(m) => m.transform(x),
            ReducerModel::Lle(m) => m.transform(x),
            ReducerModel::Le(m) => m.transform(x),
            ReducerModel::Tsne(m) => m.transform(x),
            ReducerModel::Ae(m) | ReducerModel::Wae(m) => m.transform(x),
        }?;
        if !linalg::all_finite(&z) {
            return Err(Error::numerical(format!("{} transform produced non-finite coordinates", self.method())));
        }
        Ok(z)
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ReducerModel::Pca(m) => m.mean.len(),
            ReducerModel::Kpca(m) => m.train.ncols(),
            ReducerModel::Grp(m) | ReducerModel::Srp(m) => m.projection.ncols(),
            ReducerModel::Ica(m) => m.mean.len(),
            ReducerModel::Nmf(m) => m.factor.ncols(),
            ReducerModel::Isomap(m) => m.train.ncols(),
            ReducerModel::Dmaps(m) => m.train.ncols(),
            ReducerModel::Lle(m) => m.train.ncols(),
            ReducerModel::Le(m) => m.train.ncols(),
            ReducerModel::Tsne(m) => m.train.ncols(),
            ReducerModel::Ae(m) | ReducerModel::Wae(m) => m.mean.len(),
        }
    }

    /// Reduced dimension actually produced (PCA and Isomap may shrink it).
    pub fn output_dim(&self) -> usize {
        match self {
            ReducerModel::Pca(m) => m.components.ncols(),
            ReducerModel::Kpca(m) => m.alphas.ncols(),
            ReducerModel::Grp(m) | ReducerModel::Srp(m) => m.projection.nrows(),
            ReducerModel::Ica(m) => m.unmixing.nrows(),
            ReducerModel::Nmf(m) => m.factor.nrows(),
            ReducerModel::Isomap(m) => m.vectors.ncols(),
            ReducerModel::Dmaps(m) => m.embedding.ncols(),
            ReducerModel::Lle(m) => m.embedding.ncols(),
            ReducerModel::Le(m) => m.embedding.ncols(),
            ReducerModel::Tsne(m) => m.embedding.ncols(),
            ReducerModel::Ae(m) | ReducerModel::Wae(m) => m.latent_dim(),
        }
    }
}

/// Column centering with optional unit-variance scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Per-column divisor; `None` when only centering.
    pub scale: Option<Vec<f64>>,
}

impl Standardizer {
    pub fn fit(x: &DataMatrix, unit_variance: bool) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::invalid("cannot standardize an empty matrix"));
        }
        let mean = linalg::column_means(x);
        let scale = unit_variance.then(|| {
            let n = x.nrows() as f64;
            x.column_iter()
                .zip(mean.iter())
                .map(|(c, m)| {
                    let sd = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
                    if sd > 0.0 {
                        sd
                    } else {
                        1.0
                    }
                })
                .collect()
        });
        Ok(Standardizer { mean: mean.iter().copied().collect(), scale })
    }

    pub fn apply(&self, x: &DataMatrix) -> Result<DataMatrix> {
        if x.ncols() != self.mean.len() {
            return Err(Error::dim(format!("inputs have {} columns, standardizer expects {}", x.ncols(), self.mean.len())));
        }
        let mut out = linalg::center_rows(x, &DVector::from_column_slice(&self.mean));
        if let Some(scale) = &self.scale {
            for (mut col, s) in out.column_iter_mut().zip(scale) {
                col /= *s;
            }
        }
        Ok(out)
    }
}

/// Gaussian kernel `exp(-r^2 / (2 h^2))` on a squared distance.
#[inline]
pub(crate) fn gaussian(sq: f64, h: f64) -> f64 {
    (-sq / (2.0 * h * h)).exp()
}

/// Median pairwise distance, or an error when every point coincides.
pub(crate) fn median_bandwidth(sq: &nalgebra::DMatrix<f64>) -> Result<f64> {
    let h = linalg::median_pairwise_distance(sq);
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Err(Error::invalid("median pairwise distance is zero; supply a bandwidth"))
    }
}

/// Row index of a training sample identical to `row`, if any.
pub(crate) fn exact_match(sq_row: &[f64]) -> Option<usize> {
    sq_row.iter().position(|&v| v == 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizer_contract() {
        let x = DataMatrix::from_row_slice(2, 2, &[1.0, 5.0, 3.0, 5.0]);
        let s = Standardizer::fit(&x, true).unwrap();
        let y = s.apply(&x).unwrap();
        assert_eq!(y, DataMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, 0.0]));
        let new = s.apply(&DataMatrix::from_row_slice(1, 2, &[2.0, 6.0])).unwrap();
        assert_eq!(new, DataMatrix::from_row_slice(1, 2, &[0.0, 1.0]));
        assert!(Standardizer::fit(&DataMatrix::zeros(0, 2), false).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("umap".parse::<Method>().is_err());
    }

    #[test]
    fn params_validation() {
        let p = ReducerParams::new(Method::Pca, 0);
        assert!(p.validate(10, 5).is_err());
        assert!(ReducerParams::new(Method::Pca, 5).validate(10, 5).is_err());
        let mut p = ReducerParams::new(Method::Lle, 3);
        p.k_neighbors = 3;
        assert!(p.validate(20, 10).is_err());
        p.k_neighbors = 4;
        assert!(p.validate(20, 10).is_ok());
        let parsed: ReducerParams = serde_json::from_str(r#"{"method":"kpca","d":4}"#).unwrap();
        assert_eq!(parsed, ReducerParams::new(Method::Kpca, 4));
    }
}
