//! Central finite-difference checks of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore, Trainable};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`]: the worst relative error per parameter.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.per_param.iter().all(|(_, e)| *e < self.tol)
    }
}

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f(params)` with central
/// differences of step `h`.
///
/// `max_coords` caps the number of coordinates probed per parameter
/// (evenly strided); `None` probes all of them.
pub fn grad_check<F>(
    f: F,
    params: &[(String, Tensor)],
    h: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let y = f(&tape, &vars)?.item();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(y)
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|(_, p)| tape.param(p.clone())).collect();
    let root = f(&tape, &vars)?;
    if !root.item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(root)?;

    let mut values: Vec<Tensor> = params.iter().map(|(_, p)| p.clone()).collect();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, (name, p)) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
        let n = p.numel();
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by(stride) {
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + h;
            let up = eval(&values)?;
            values[pi].data_mut()[i] = orig - h;
            let down = eval(&values)?;
            values[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport { per_param, tol })
}

/// Like [`grad_check`], but over named parameters of a [`ParamStore`].
///
/// Parameters are stored as `f32`, so a perturbed value is rounded; the
/// numeric derivative divides by the step actually realized.
pub fn grad_check_params<F>(
    store: &ParamStore,
    names: &[String],
    f: F,
    h: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: for<'t, 's> Fn(&Binder<'t, 's>) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = store.clone();
    for n in names {
        work.get_mut(n)?.frozen = false;
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let b = Binder::new(&tape, s, Trainable::Nothing);
        let y = f(&b)?.item();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(y)
    };
    let tape = Tape::new();
    let binder = Binder::new(&tape, &work, Trainable::Prefixes(names.to_vec()));
    let root = f(&binder)?;
    if !root.item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = binder.collect(&tape.backward(root)?);
    drop(binder);

    let mut per_param = Vec::with_capacity(names.len());
    for name in names {
        let n = work.get(name)?.data.len();
        let analytic = grads.get(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by(stride) {
            let orig = work.get(name)?.data[i];
            let up_v = (orig as f64 + h) as f32;
            let down_v = (orig as f64 - h) as f32;
            work.get_mut(name)?.data[i] = up_v;
            let up = eval(&work)?;
            work.get_mut(name)?.data[i] = down_v;
            let down = eval(&work)?;
            work.get_mut(name)?.data[i] = orig;
            let numeric = (up - down) / (up_v as f64 - down_v as f64);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport { per_param, tol })
}
