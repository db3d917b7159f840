//! Central finite-difference verification of the tape's analytic gradients.
//!
//! Checks run at 64-bit precision regardless of the training precision, which
//! separates method error from round-off.

use crate::error::{config_err, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_relative_error: f64,
    /// (input index, flat component index) of the worst component.
    pub worst_component: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub components_checked: usize,
}

impl FdReport {
    fn update(&mut self, input: usize, flat: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.components_checked += 1;
        if rel > self.max_relative_error {
            self.max_relative_error = rel;
            self.worst_component = Some((input, flat));
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

fn empty_report() -> FdReport {
    FdReport {
        max_relative_error: 0.0,
        worst_component: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        components_checked: 0,
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compare the tape gradient of a scalar-valued graph against central finite
/// differences over every component of every input tensor.
///
/// `build` receives a fresh tape plus the input leaf nodes and returns the
/// scalar loss node; it runs once per probe, so it must be a pure function of
/// the leaf values.
pub fn finite_diff_check<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 {
        return config_err(format!("finite-difference step {step} must be positive"));
    }
    let eval = |points: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = points
            .iter()
            .map(|t| tape.input(t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(inputs)?;
    let grads = tape.backward(loss, None)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, input)| match grads.wrt(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; input.len()],
        })
        .collect();

    let mut report = empty_report();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let original = input.data()[j];
            probe[i].data_mut()[j] = original + step;
            let (tape_p, _, loss_p) = eval(&probe)?;
            let plus = tape_p.scalar_value(loss_p)?;
            probe[i].data_mut()[j] = original - step;
            let (tape_m, _, loss_m) = eval(&probe)?;
            let minus = tape_m.scalar_value(loss_m)?;
            probe[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            report.update(i, j, analytic[i][j], numeric);
        }
    }
    Ok(report)
}

/// Finite-difference check over every component of every parameter in a
/// store, for graphs built from named parameter leaves (full-model checks).
///
/// `build` must read parameter values from the store it is handed.
pub fn finite_diff_check_params<F>(
    store: &mut ParamStore<f64>,
    step: f64,
    build: F,
) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    if step <= 0.0 {
        return config_err(format!("finite-difference step {step} must be positive"));
    }
    store.zero_grads();
    let loss_value = {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        let v = tape.scalar_value(loss)?;
        tape.backward(loss, Some(store))?;
        v
    };
    let _ = loss_value;
    let analytic = store.grads_snapshot();

    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let mut report = empty_report();
    for (pi, name) in names.iter().enumerate() {
        let len = store.value(name).unwrap().len();
        for j in 0..len {
            let original = store.get(name).unwrap().value.data()[j];
            store.get_mut(name).unwrap().value.data_mut()[j] = original + step;
            let plus = {
                let mut tape = Tape::new();
                let loss = build(&mut tape, store)?;
                tape.scalar_value(loss)?
            };
            store.get_mut(name).unwrap().value.data_mut()[j] = original - step;
            let minus = {
                let mut tape = Tape::new();
                let loss = build(&mut tape, store)?;
                tape.scalar_value(loss)?
            };
            store.get_mut(name).unwrap().value.data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            report.update(pi, j, analytic[pi].1.data()[j], numeric);
        }
    }
    Ok(report)
}
