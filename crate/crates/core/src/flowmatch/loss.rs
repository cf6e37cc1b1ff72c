use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::mmdit::{forward_graph, Bound, ConditionBundle, ModelConfig, PreparedParams};
use crate::rng::Rng;
use crate::synthdata::DatasetRecord;
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::tasks::{dropout_conditions, edit_bundle, interpolate, mask_audio_context, target_velocity, EditOp};

/// One regression example: noise, data endpoint, time and conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub bundle: ConditionBundle,
    pub edit: Option<EditOp>,
}

/// Draws t, then x0, then the editing task, then condition dropout.
pub fn sample_example(record: &DatasetRecord, cfg: &TrainConfig, rng: &mut Rng) -> Result<Example> {
    let t = rng.uniform();
    let x0 = Tensor::randn(record.x1.shape(), rng);
    let (x1, bundle, edit) = if rng.bernoulli(cfg.editing_probability()) {
        let op = EditOp::ALL[rng.below(EditOp::ALL.len())];
        let ex = mask_audio_context(&record.x1, &record.event_components, op, rng)?;
        let b = edit_bundle(&record.bundle, &ex)?;
        (ex.target, b, Some(op))
    } else {
        (record.x1.clone(), record.bundle.clone(), None)
    };
    let bundle = dropout_conditions(&bundle, cfg.p_drop, rng);
    Ok(Example {
        x0,
        x1,
        t,
        bundle,
        edit,
    })
}

/// Mean squared error between a predicted velocity and x1 − x0.
pub fn velocity_loss(g: &mut Graph, prediction: Var, ex: &Example) -> Result<Var> {
    let v = target_velocity(&ex.x0, &ex.x1)?;
    let target = g.constant(&v);
    g.mse(prediction, target)
}

/// Flow-matching loss node for one example.
pub fn cfm_loss(g: &mut Graph, p: &Bound, cfg: &ModelConfig, ex: &Example) -> Result<Var> {
    let x_t = interpolate(&ex.x0, &ex.x1, ex.t)?;
    let x = g.constant(&x_t);
    let v = forward_graph(g, p, cfg, x, ex.t, &ex.bundle)?;
    velocity_loss(g, v, ex)
}

/// Loss and per-parameter gradients of one example; parameters the example
/// never touches get zero gradients.
pub fn example_gradients(
    params: &PreparedParams,
    cfg: &ModelConfig,
    ex: &Example,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, params, true);
    let loss = cfm_loss(&mut g, &p, cfg, ex)?;
    let mut grads = g.backward(loss)?;
    let value = g.value_f64(loss)[0];
    let mut out = BTreeMap::new();
    for name in params.names() {
        let v = p.var(name)?;
        let grad = grads
            .take_f64(v)
            .unwrap_or_else(|| vec![0.0; params.data(name).map_or(0, <[f64]>::len)]);
        out.insert(name.clone(), grad);
    }
    if out.is_empty() {
        return Err(Error::contract("model has no parameters"));
    }
    Ok((value, out))
}
