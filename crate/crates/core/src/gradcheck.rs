//! Central finite-difference checks of tape gradients.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Bound, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a small absolute floor so that coordinates whose true
/// gradient is zero do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares autodiff against central differences at `coords` random
/// parameter coordinates. `loss` rebuilds the scalar loss on a fresh f64
/// tape, so the differences measure the backward rules rather than f32
/// rounding in the forward pass.
pub fn check_params<F>(
    store: &mut ParamStore,
    loss: F,
    coords: usize,
    h: f32,
    floor: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    check_params_where(store, |_| true, loss, coords, h, floor, rng)
}

/// [`check_params`] restricted to parameters whose name passes `select`.
pub fn check_params_where<F>(
    store: &mut ParamStore,
    select: impl Fn(&str) -> bool,
    loss: F,
    coords: usize,
    h: f32,
    floor: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::<f64>::default();
    let bound = store.bind(&mut tape, true);
    let l = loss(&mut tape, &bound)?;
    let grads = tape.backward(l)?;
    store.absorb(&grads, &bound);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::<f64>::default();
        let bound = store.bind(&mut tape, false);
        let l = loss(&mut tape, &bound)?;
        Ok(tape.scalar_f64(l))
    };

    let ids: Vec<_> = store.ids().filter(|&id| select(store.name(id))).collect();
    let total: usize = ids.iter().map(|&id| store.get(id).numel()).sum();
    if total == 0 {
        return Err(Error::Contract("gradient check on an empty parameter selection".into()));
    }
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for _ in 0..coords {
        let mut flat = rng.random_range(0..total);
        let mut id = ids[0];
        for &candidate in &ids {
            let n = store.get(candidate).numel();
            if flat < n {
                id = candidate;
                break;
            }
            flat -= n;
        }
        let analytic = store.get(id).grad.as_ref().map_or(0.0, |g| g[flat] as f64);
        let orig = store.get(id).data()[flat];
        // The perturbed values are rounded to f32, so divide by the step
        // actually taken rather than by 2h.
        let (hi, lo) = (orig + h, orig - h);
        store.get_mut(id).data_mut()[flat] = hi;
        let plus = eval(store)?;
        store.get_mut(id).data_mut()[flat] = lo;
        let minus = eval(store)?;
        store.get_mut(id).data_mut()[flat] = orig;
        let numeric = (plus - minus) / (hi as f64 - lo as f64);
        let err = relative_error(analytic, numeric, floor);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((store.name(id).to_string(), flat, analytic, numeric));
        }
    }
    store.zero_grads();
    Ok(report)
}
