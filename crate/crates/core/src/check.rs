//! Finite-difference check of the full model loss with respect to each
//! parameter tensor.

use std::rc::Rc;

use xview_tensor::{finite_diff_report, GradCheckReport, Tensor, Var};

use crate::backbone::Dit;
use crate::error::Result;
use crate::flow::flow_matching_loss;
use crate::incontext::UnifiedSequence;

/// One parameter's worst coordinate.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks `∂ loss / ∂ param` for every parameter, where the loss is the
/// masked flow-matching loss against `target` over `seq`'s target tokens.
/// At most `max_coords` evenly spaced coordinates are probed per tensor.
pub fn model_gradcheck(
    model: &Dit<f64>,
    seq: &UnifiedSequence<f64>,
    target: &Tensor<f64>,
    h: f64,
    max_coords: usize,
) -> Result<Vec<ParamCheck>> {
    let target = Rc::new(target.clone());
    let mask: Rc<[bool]> = seq.target_mask().into();
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    let mut out = Vec::with_capacity(ids.len());
    for &checked in &ids {
        let value = model.params().get(checked).clone();
        let n = value.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let coords: Vec<usize> = (0..n).step_by(stride).collect();
        let report = finite_diff_report(
            |g, x| {
                let vars: Vec<Option<Var<'_, f64>>> =
                    ids.iter().map(|&id| (id != checked).then(|| g.constant(model.params().get(id).clone()))).collect();
                let lookup = |id: xview_tensor::ParamId| {
                    let pos = ids.iter().position(|&i| i == id).expect("known parameter");
                    vars[pos].unwrap_or(x)
                };
                let tokens = g.constant(seq.tokens.clone());
                let extra = seq.extra.as_ref().map(|e| g.constant(e.clone()));
                let pred = model.forward_with(g, lookup, tokens, extra, seq).map_err(to_tensor_err)?;
                flow_matching_loss(pred, target.clone(), mask.clone()).map_err(to_tensor_err)
            },
            &value,
            h,
            &coords,
        )?;
        out.push(ParamCheck { name: model.params().name(checked).to_string(), report });
    }
    Ok(out)
}

fn to_tensor_err(e: crate::error::Error) -> xview_tensor::TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => xview_tensor::TensorError::Contract(other.to_string()),
    }
}
