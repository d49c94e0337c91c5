use crate::error::{Error, Result};
use crate::model::{LayerRouting, RoutingRecord};
use crate::numerics::{cv_squared, Graph, Real, Tensor, Var};

/// Balance statistics of one expert layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxStats {
    /// Router probability mass each expert received.
    pub importance: Vec<f64>,
    /// Tokens routed to each expert.
    pub load: Vec<f64>,
    /// `CV²(importance) + CV²(load)`.
    pub value: f64,
}

/// Evaluates the balance penalty from routing records.
pub fn aux_moe_loss(records: &[RoutingRecord]) -> Result<AuxStats> {
    let Some(first) = records.first() else {
        return Err(Error::Shape { op: "aux_moe_loss", detail: "no routed tokens".into() });
    };
    let n = first.scores.len();
    let mut importance = vec![0.0; n];
    let mut load = vec![0.0; n];
    for r in records {
        if r.scores.len() != n {
            return Err(Error::Shape {
                op: "aux_moe_loss",
                detail: format!("{} scores after {n}", r.scores.len()),
            });
        }
        for (i, s) in importance.iter_mut().zip(&r.scores) {
            *i += s;
        }
        for &e in &r.selected {
            load[e] += 1.0;
        }
    }
    let value = balance(&importance)? + balance(&load)?;
    Ok(AuxStats { importance, load, value })
}

fn balance(x: &[f64]) -> Result<f64> {
    cv_squared(x).ok_or_else(|| Error::Shape { op: "aux_moe_loss", detail: "zero mean".into() })
}

/// Differentiable balance penalty summed over expert layers. Only the
/// importance term carries gradient; the load term enters as a constant.
pub fn aux_loss_var<F: Real>(g: &mut Graph<'_, F>, routing: &[LayerRouting]) -> Result<Var> {
    let mut total = g.constant(Tensor::scalar(F::zero()));
    for layer in routing {
        let importance = g.cv_squared(layer.importance)?;
        let load = F::from_f64_lossy(balance(&layer.load)?);
        let load = g.constant(Tensor::scalar(load));
        let term = g.add(importance, load)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// `cross_entropy + λ·aux`, with the cross-entropy over the full vocabulary.
pub fn total_loss<F: Real>(
    g: &mut Graph<'_, F>,
    logits: Var,
    targets: &[u32],
    routing: &[LayerRouting],
    lambda: f64,
) -> Result<Var> {
    let ce = g.cross_entropy(logits, targets, None)?;
    let aux = aux_loss_var(g, routing)?;
    let aux = g.scale(aux, F::from_f64_lossy(lambda))?;
    g.add(ce, aux)
}
