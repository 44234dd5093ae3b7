//! Scoring a model on a dataset, optionally through noise and a defense.

use rayon::prelude::*;

use crate::attack::{apply_noise, Perturbation};
use crate::data::Dataset;
use crate::defense::Defense;
use crate::error::{Error, Result};
use crate::metrics::{report, MetricsReport};
use crate::model::ParModel;
use crate::tensor::Tensor;

/// `M×N` attribute probabilities in dataset order.
pub fn predict(
    model: &ParModel,
    data: &Dataset,
    eta: Option<&Perturbation>,
    defense: Option<&Defense>,
) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let rows: Vec<Tensor> = data
        .samples
        .par_iter()
        .map(|s| match defense {
            Some(d) => d.forward(model, &s.image, eta).map(|o| o.probs),
            None => {
                let x = match eta {
                    Some(e) => apply_noise(&s.image, e)?,
                    None => s.image.clone(),
                };
                model.forward(&x, None).map(|o| o.probs)
            }
        })
        .collect::<Result<_>>()?;
    let n = model.config.attribute_count;
    Tensor::matrix(rows.len(), n, rows.into_iter().flat_map(Tensor::into_data).collect())
}

pub fn evaluate(
    model: &ParModel,
    data: &Dataset,
    eta: Option<&Perturbation>,
    defense: Option<&Defense>,
    threshold: f32,
) -> Result<MetricsReport> {
    let probs = predict(model, data, eta, defense)?;
    report(&probs, &data.targets()?, threshold)
}
