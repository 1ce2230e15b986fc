//! Central-difference verification of analytic gradients.
//!
//! Relative error of a coordinate is `|a - n| / max(|a|, |n|, 1e-8)` where `a`
//! is the analytic and `n` the numeric derivative.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract_err, Error, Result};

const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many coordinates per input, chosen at random.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlaggedCoordinate {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub flagged: Vec<FlaggedCoordinate>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn scalar_output(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(contract_err!(
            "checked function must return a scalar, got {:?}",
            v.shape()
        ));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::Numerics("checked function returned a non-finite value".into()));
    }
    Ok(x)
}

fn coords_to_check(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(cap) if cap < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9));
            let mut idx = sample(&mut rng, len, cap).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Shared driver: `eval` computes the function at the given flat values of
/// input `i`, with every other input at its base value.
fn compare<E>(
    names: Vec<String>,
    bases: &[Vec<f64>],
    analytic: &[Vec<f64>],
    mut eval: E,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    E: FnMut(usize, &[f64]) -> Result<f64>,
{
    if opts.eps <= 0.0 {
        return Err(contract_err!("eps must be positive"));
    }
    let mut inputs = Vec::with_capacity(bases.len());
    let mut flagged = Vec::new();
    let mut overall: f64 = 0.0;
    for (i, base) in bases.iter().enumerate() {
        let coords = coords_to_check(base.len(), opts, i as u64);
        let mut work = base.clone();
        let mut worst: f64 = 0.0;
        for &c in &coords {
            work[c] = base[c] + opts.eps;
            let plus = eval(i, &work)?;
            work[c] = base[c] - opts.eps;
            let minus = eval(i, &work)?;
            work[c] = base[c];
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i][c];
            let rel = relative_error(a, numeric);
            worst = worst.max(rel);
            if rel > opts.tol {
                flagged.push(FlaggedCoordinate {
                    input: i,
                    coord: c,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        overall = overall.max(worst);
        inputs.push(InputCheck {
            name: names[i].clone(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        inputs,
        flagged,
        max_rel_error: overall,
        tol: opts.tol,
    })
}

/// Checks `f` with respect to each tensor in `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = run(inputs)?;
    scalar_output(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(v).into_data()).collect();
    let bases: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let names = (0..inputs.len()).map(|i| format!("input{i}")).collect();

    let mut scratch: Vec<Tensor<f64>> = inputs.to_vec();
    compare(
        names,
        &bases,
        &analytic,
        |i, flat| {
            scratch[i].data_mut().copy_from_slice(flat);
            let (tape, _, out) = run(&scratch)?;
            let v = scalar_output(&tape, out);
            scratch[i].data_mut().copy_from_slice(&bases[i]);
            v
        },
        opts,
    )
}

/// Checks `f` with respect to every parameter in `store`.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &work)?;
    scalar_output(&tape, out)?;
    let grads = tape.backward(out)?;
    grads.accumulate_into(&tape, &mut work);

    let ids: Vec<_> = work.iter().map(|(id, _)| id).collect();
    let names = work.iter().map(|(_, p)| p.name.clone()).collect();
    let analytic: Vec<Vec<f64>> = work.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    let bases: Vec<Vec<f64>> = work.iter().map(|(_, p)| p.value.data().to_vec()).collect();

    compare(
        names,
        &bases,
        &analytic,
        |i, flat| {
            work.get_mut(ids[i]).value.data_mut().copy_from_slice(flat);
            let mut tape = Tape::new();
            let v = f(&mut tape, &work).and_then(|out| scalar_output(&tape, out));
            work.get_mut(ids[i]).value.data_mut().copy_from_slice(&bases[i]);
            v
        },
        opts,
    )
}
