//! Finite-difference gradient checking and Hessian-vector products.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective: Sync {
    fn value(&self, params: &Tensor) -> Result<f64>;

    fn gradient(&self, params: &Tensor) -> Result<Tensor>;
}

/// Adapts a pair of closures into an [`Objective`].
pub struct FnObjective<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: Fn(&Tensor) -> Result<f64> + Sync,
    G: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    fn value(&self, params: &Tensor) -> Result<f64> {
        (self.value)(params)
    }

    fn gradient(&self, params: &Tensor) -> Result<Tensor> {
        (self.gradient)(params)
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

/// Central-difference estimate of the gradient, one coordinate per task.
pub fn numeric_gradient(obj: &impl Objective, params: &Tensor, eps: f64) -> Result<Tensor> {
    let n = params.len();
    let parts = par::map_indexed(n, |i| -> Result<f64> {
        let mut p = params.clone();
        let x = p.data()[i];
        p.data_mut()[i] = x + eps;
        let up = finite(obj.value(&p)?, "loss (+eps)")?;
        p.data_mut()[i] = x - eps;
        let down = finite(obj.value(&p)?, "loss (-eps)")?;
        Ok((up - down) / (2.0 * eps))
    });
    let data = parts.into_iter().collect::<Result<Vec<_>>>()?;
    Tensor::new(params.shape().to_vec(), data)
}

/// Largest `|analytic − numeric| / (|analytic| + 1e-8)` over all coordinates.
pub fn grad_check(obj: &impl Objective, params: &Tensor, eps: f64) -> Result<f64> {
    let analytic = obj.gradient(params)?.check_finite("analytic gradient")?;
    if analytic.shape() != params.shape() {
        return Err(Error::dim("gradient shape differs from parameters"));
    }
    let numeric = numeric_gradient(obj, params, eps)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max))
}

/// Step used by [`hvp`]: `1e-4·(1 + ‖θ‖∞) / (‖v‖∞ + 1e-12)`.
pub fn hvp_step(params: &Tensor, v: &Tensor) -> f64 {
    1e-4 * (1.0 + params.max_abs()) / (v.max_abs() + 1e-12)
}

/// Hessian-vector product by central differences of the gradient:
/// `(∇L(θ + εv) − ∇L(θ − εv)) / 2ε`.
pub fn hvp(obj: &impl Objective, params: &Tensor, v: &Tensor) -> Result<Tensor> {
    if v.shape() != params.shape() {
        return Err(Error::dim(format!(
            "hvp direction {:?} vs params {:?}",
            v.shape(),
            params.shape()
        )));
    }
    if v.max_abs() == 0.0 {
        return Ok(Tensor::zeros(params.shape()));
    }
    let eps = hvp_step(params, v);
    let mut plus = params.clone();
    plus.axpy(eps, v)?;
    let mut minus = params.clone();
    minus.axpy(-eps, v)?;
    let gp = obj.gradient(&plus)?;
    let gm = obj.gradient(&minus)?;
    gp.sub(&gm)?.scale(0.5 / eps).check_finite("hvp")
}
