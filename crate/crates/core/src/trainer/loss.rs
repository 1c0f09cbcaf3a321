use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::model::Latent;
use crate::tensor::{Graph, Real, Var};

/// `total = mse + kl_weight * kl`, evaluated in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
    pub kl_weighted: f64,
}

impl LossBreakdown {
    pub fn new(mse: f64, kl: f64, kl_weight: f64) -> Self {
        let kl_weighted = kl_weight * kl;
        Self {
            total: mse + kl_weighted,
            mse,
            kl,
            kl_weighted,
        }
    }
}

/// Record the training objective on `g`; returns the scalar to differentiate and its parts.
///
/// A variational model must supply its latent statistics.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    y: Var,
    target: Var,
    latent: Option<Latent>,
    kl_weight: f64,
    variational: bool,
) -> Result<(Var, LossBreakdown)> {
    let mse = g.mse(y, target)?;
    let mse_v = g.value(mse).item_value().as_f64();
    match latent {
        Some(l) => {
            let kl = g.kl_standard_normal(l.mu, l.log_var)?;
            let kl_v = g.value(kl).item_value().as_f64();
            let total = g.add_scaled(mse, kl, T::of(kl_weight))?;
            Ok((total, LossBreakdown::new(mse_v, kl_v, kl_weight)))
        }
        None if variational && kl_weight > 0.0 => Err(TrainError::MissingLatent),
        None => Ok((mse, LossBreakdown::new(mse_v, 0.0, kl_weight))),
    }
}
