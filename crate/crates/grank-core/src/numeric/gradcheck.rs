//! Central finite-difference verification of the tape's reverse sweep.
//! Runs in 64-bit only; 32-bit differences drown in rounding noise.

use std::collections::HashMap;

use super::matrix::Matrix;
use super::params::{ParamId, ParamSet};
use super::tape::{Session, ValueId};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn eval_loss<F>(params: &ParamSet<f64>, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Session<f64>) -> Result<ValueId>,
{
    let mut sess = Session::new(params);
    let loss = loss_fn(&mut sess)?;
    Ok(sess.scalar_value(loss))
}

/// Compare analytical gradients of `loss_fn` against central differences
/// `(f(p+h) - f(p-h)) / 2h` for every parameter the loss touches.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(
    params: &mut ParamSet<f64>,
    step: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<f64>) -> Result<ValueId>,
{
    if step <= 0.0 {
        return Err(Error::Argument("grad_check step must be positive".into()));
    }

    // Analytical pass. Parameters bound by the loss but untouched by the
    // gradient flow get explicit zero gradients so they are still checked.
    let (analytic, bound): (HashMap<ParamId, Matrix<f64>>, Vec<ParamId>) = {
        let mut sess = Session::new(params);
        let loss = loss_fn(&mut sess)?;
        if !sess.scalar_value(loss).is_finite() {
            return Err(Error::NonFinite {
                what: "loss at unperturbed parameters".into(),
            });
        }
        let grads = sess.take_param_grads(loss)?;
        let mut map = HashMap::new();
        let mut bound = Vec::new();
        for (id, g) in grads {
            bound.push(id);
            map.insert(id, g);
        }
        bound.sort();
        (map, bound)
    };

    let mut entries = Vec::new();
    let mut global_max = 0.0f64;
    for id in bound {
        let name = params.get(id).name.clone();
        let shape = params.get(id).value.shape();
        let zero = Matrix::zeros(shape.0, shape.1);
        let a = analytic.get(&id).unwrap_or(&zero).clone();
        let mut max_rel = 0.0f64;
        for idx in 0..shape.0 * shape.1 {
            let orig = params.get(id).value.data()[idx];
            params.get_mut(id).value.data_mut()[idx] = orig + step;
            let plus = eval_loss(params, &loss_fn);
            params.get_mut(id).value.data_mut()[idx] = orig - step;
            let minus = eval_loss(params, &loss_fn);
            params.get_mut(id).value.data_mut()[idx] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("loss while perturbing parameter {name}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let ana = a.data()[idx];
            let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        global_max = global_max.max(max_rel);
        entries.push(GradCheckEntry {
            name,
            max_rel_err: max_rel,
            elements: shape.0 * shape.1,
        });
    }

    Ok(GradCheckReport {
        entries,
        max_rel_err: global_max,
    })
}
