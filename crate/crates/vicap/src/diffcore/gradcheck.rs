//! Central finite-difference gradient verification.
//!
//! Runs the model's own backward pass once, then probes random coordinates
//! of each listed parameter with a two-sided finite difference of the same
//! forward function. Everything runs in f64, so a step of 1e-3 leaves the
//! truncation error far below the 1e-4 acceptance threshold.

use super::{ParamId, ParamStore, Tape, Var};
use crate::Result;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst probe.
    pub worst: Option<(String, usize)>,
    pub probes: usize,
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs()).max(1e-3);
    (analytic - fd).abs() / denom
}

/// `loss` must rebuild the forward graph from scratch on the tape it is
/// given and return the scalar loss node; it is called 2·probes+1 times.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    probes_per_tensor: usize,
    h: f64,
    seed: u64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let lv = loss(&mut tape, store)?;
    tape.backward(lv, store)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| store.grad(id).data().to_vec())
        .collect();
    store.zero_grads();

    let mut rng = crate::util::seeded_rng(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        probes: 0,
    };
    for (pi, &id) in params.iter().enumerate() {
        let n = store.value(id).len();
        if n == 0 {
            continue;
        }
        for _ in 0..probes_per_tensor {
            let j = rng.gen_range(0..n);
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let mut tp = Tape::new();
            let v = loss(&mut tp, store)?;
            let f_plus = tp.value(v).item();
            store.value_mut(id).data_mut()[j] = orig - h;
            let mut tm = Tape::new();
            let v = loss(&mut tm, store)?;
            let f_minus = tm.value(v).item();
            store.value_mut(id).data_mut()[j] = orig;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let err = rel_err(analytic[pi][j], fd);
            report.probes += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
