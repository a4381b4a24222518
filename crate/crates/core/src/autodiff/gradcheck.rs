//! Central finite-difference verification of backward rules.
//!
//! `check_inputs` perturbs input leaves, `check_params` perturbs entries of a
//! [`ParamSet`]; both rebuild the graph from scratch for every probe so the
//! analytic path under test never feeds its own oracle. Dropout stays
//! reproducible because a rebuilt tape replays the same counter-based mask
//! stream.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{ArrayId, NumericsError, Tape};
use crate::params::{GradBuffer, ParamSet};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
}

impl FdReport {
    fn fold(&mut self, fd: f64, analytic: f64) {
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1.0);
        self.checked += 1;
        if rel > self.max_rel {
            self.max_rel = rel;
        }
    }
}

/// How many coordinates of each array to probe.
#[derive(Debug, Clone, Copy)]
pub enum Probe {
    All,
    Sample(usize),
}

fn pick_coords(n: usize, probe: Probe, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match probe {
        Probe::All => (0..n).collect(),
        Probe::Sample(k) if k >= n => (0..n).collect(),
        Probe::Sample(k) => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(rng);
            all.truncate(k);
            all.sort_unstable();
            all
        }
    }
}

/// Finite-difference check over input leaves.
///
/// `build` receives a fresh tape plus the leaf ids (one per input, in order)
/// and must return a scalar loss. `mk_tape` controls the tape mode (use
/// `Tape::training(seed)` to exercise dropout).
pub fn check_inputs<F, M>(
    shapes: &[(usize, usize)],
    inputs: &mut [Vec<f64>],
    h: f64,
    probe: Probe,
    rng: &mut ChaCha8Rng,
    mk_tape: M,
    build: F,
) -> Result<FdReport, NumericsError>
where
    F: Fn(&mut Tape, &[ArrayId]) -> Result<ArrayId, NumericsError>,
    M: Fn() -> Tape,
{
    assert_eq!(shapes.len(), inputs.len());
    let eval = |inputs: &[Vec<f64>]| -> Result<f64, NumericsError> {
        let mut tape = mk_tape();
        let ids: Vec<ArrayId> = shapes
            .iter()
            .zip(inputs)
            .map(|(&(r, c), v)| tape.leaf(r, c, v.clone()))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar(loss))
    };

    // analytic gradients
    let mut tape = mk_tape();
    let ids: Vec<ArrayId> = shapes
        .iter()
        .zip(inputs.iter())
        .map(|(&(r, c), v)| tape.leaf(r, c, v.clone()))
        .collect::<Result<_, _>>()?;
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| {
            let (r, c) = tape.shape(id);
            vec![0.0; r * c]
        }))
        .collect();

    let mut report = FdReport { checked: 0, max_rel: 0.0 };
    for idx in 0..inputs.len() {
        let coords = pick_coords(inputs[idx].len(), probe, rng);
        for c in coords {
            let orig = inputs[idx][c];
            inputs[idx][c] = orig + h;
            let f_plus = eval(inputs)?;
            inputs[idx][c] = orig - h;
            let f_minus = eval(inputs)?;
            inputs[idx][c] = orig;
            let fd = (f_plus - f_minus) / (2.0 * h);
            report.fold(fd, analytic[idx][c]);
        }
    }
    Ok(report)
}

/// Finite-difference check over the entries of a parameter set.
pub fn check_params<F, M>(
    params: &mut ParamSet,
    h: f64,
    probe: Probe,
    rng: &mut ChaCha8Rng,
    mk_tape: M,
    build: F,
) -> Result<FdReport, NumericsError>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<ArrayId, NumericsError>,
    M: Fn() -> Tape,
{
    let mut tape = mk_tape();
    let loss = build(params, &mut tape)?;
    tape.backward(loss)?;
    let mut grads = GradBuffer::zeros_like(params);
    tape.accumulate_param_grads(&mut grads, 1.0);

    let eval = |params: &ParamSet| -> Result<f64, NumericsError> {
        let mut tape = mk_tape();
        let loss = build(params, &mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut report = FdReport { checked: 0, max_rel: 0.0 };
    for idx in 0..params.len() {
        let n = params.entry(idx).values.len();
        let coords = pick_coords(n, probe, rng);
        for c in coords {
            let orig = params.entry(idx).values[c];
            params.entry_mut(idx).values[c] = orig + h;
            let f_plus = eval(params)?;
            params.entry_mut(idx).values[c] = orig - h;
            let f_minus = eval(params)?;
            params.entry_mut(idx).values[c] = orig;
            let fd = (f_plus - f_minus) / (2.0 * h);
            report.fold(fd, grads.array(idx)[c]);
        }
    }
    Ok(report)
}
