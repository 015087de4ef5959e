use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{io, DataMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gaussian,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpModel {
    pub variant: Variant,
    /// d x D.
    #[serde(with = "io::b64")]
    pub projection: DMatrix<f64>,
}

/// Draw a d x D projection whose rows have (expected) unit length, so that
/// `sqrt(D/d) |R x|` estimates `|x|`.
///
/// Gaussian rows are normalised exactly; sparse entries are
/// `sqrt(3/D) * {+1, 0, -1}` with probabilities `{1/6, 2/3, 1/6}`.
pub fn fit(dim: usize, d: usize, variant: Variant, seed: u64) -> Result<RpModel> {
    if d == 0 || dim == 0 {
        return Err(Error::invalid("projection dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = match variant {
        Variant::Gaussian => {
            let mut r = DMatrix::from_fn(d, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            for mut row in r.row_iter_mut() {
                let norm = row.norm();
                row /= norm;
            }
            r
        }
        Variant::Sparse => {
            let s = (3.0 / dim as f64).sqrt();
            DMatrix::from_fn(d, dim, |_, _| {
                let u: f64 = rng.random();
                if u < 1.0 / 6.0 {
                    s
                } else if u < 5.0 / 6.0 {
                    0.0
                } else {
                    -s
                }
            })
        }
    };
    Ok(RpModel { variant, projection })
}

impl RpModel {
    pub fn transform(&self, x: &DataMatrix) -> Result<DataMatrix> {
        if x.ncols() != self.projection.ncols() {
            return Err(Error::dim("projection input width mismatch"));
        }
        Ok(x * self.projection.transpose())
    }
}
