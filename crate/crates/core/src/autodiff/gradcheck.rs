use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares the tape gradient of a scalar function against central
/// differences, coordinate by coordinate.
///
/// `f` receives a fresh graph and the leaf holding the evaluation point and
/// must return the scalar loss node. The error for one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    check_gradients_detailed(f, point, step).map(|c| c.max_rel_error)
}

pub fn check_gradients_detailed<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {step}")));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true)?;
    let loss = f(&mut g, x)?;
    let analytic = g.backward(loss)?.wrt(&g, x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p, false)?;
        let l = f(&mut g, x)?;
        let v = g.value(l);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: v.shape().to_vec(),
            });
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "check_gradients".into(),
                node: l.index(),
            });
        }
        Ok(v)
    };

    let mut numeric = Tensor::zeros(point.shape());
    let mut max_rel_error: f64 = 0.0;
    let mut worst_index = 0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let cd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        numeric.data_mut()[i] = cd;
        let a = analytic.data()[i];
        let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
