//! Finite-difference verification of analytic gradients.
//!
//! The oracle evaluates the function twice per coordinate at x +- h and
//! compares the central difference against the gradient produced by
//! `Graph::backward`. Function values are read from the f64 shadow path, so
//! the oracle's precision is limited by the O(h^2) truncation term rather
//! than by f32 rounding; the analytic side is the production f32 backward.
//!
//! The checked tensors are perturbed in place and restored bit-exactly, so a
//! closure may simply close over a model whose registry aliases them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Above this many total coordinates the oracle checks a fixed-size random
/// sample instead of every coordinate.
const MAX_COORDS: usize = 10_000;
const SAMPLE_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub pass: bool,
    pub max_rel_err: f64,
    /// Index into the checked tensor list where the worst error occurred.
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

/// Error metric: absolute for gradients of magnitude up to one, relative
/// beyond that. This keeps near-zero gradients from blowing up the ratio
/// while still scaling with large values.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn eval_f64<F>(f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Tensor>,
{
    let mut g = Graph::with_shadow64();
    let y = f(&mut g)?;
    if y.numel() != 1 {
        return Err(Error::Dim(format!(
            "gradcheck function must return a scalar, got shape {:?}",
            y.shape()
        )));
    }
    Ok(y.item_f64())
}

/// Computes the full central-difference gradient of `f` with respect to each
/// tensor in `inputs`, one f64 value per coordinate. The inputs are restored
/// bit-exactly afterwards.
pub fn fd_gradients<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph) -> Result<Tensor>,
{
    let originals: Vec<Vec<f32>> = inputs.iter().map(|t| t.to_vec()).collect();
    let result = (|| {
        let mut grads = Vec::with_capacity(inputs.len());
        for (t, orig) in inputs.iter().zip(&originals) {
            let mut g = Vec::with_capacity(orig.len());
            for c in 0..orig.len() {
                g.push(central_difference(f, t, orig[c] as f64, c, h)?);
            }
            grads.push(g);
        }
        Ok(grads)
    })();
    for (t, orig) in inputs.iter().zip(&originals) {
        t.set_data(orig);
    }
    result
}

fn central_difference<F>(f: &F, t: &Tensor, base: f64, coord: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Tensor>,
{
    t.set_coord_f64(coord, base + h);
    let fp = eval_f64(f)?;
    t.set_coord_f64(coord, base - h);
    let fm = eval_f64(f)?;
    t.set_coord_f64(coord, base);
    Ok((fp - fm) / (2.0 * h))
}

/// Verifies the analytic gradients of `f` at the current values of `inputs`.
///
/// `f` is run once on a recording graph to obtain analytic gradients, then
/// the oracle perturbs each checked coordinate (or a 10k random sample when
/// there are more) and compares. Gradients for tensors the output does not
/// depend on are treated as zero.
pub fn gradcheck<F>(f: &F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph) -> Result<Tensor>,
{
    let originals: Vec<Vec<f32>> = inputs.iter().map(|t| t.to_vec()).collect();
    let prior_flags: Vec<bool> = inputs.iter().map(|t| t.requires_grad()).collect();
    for t in inputs {
        t.set_requires_grad(true);
        t.zero_grad();
    }

    let result = run_check(f, inputs, &originals, h, tol);

    // Leave no trace: restore values, flags and gradient slots.
    for ((t, orig), &flag) in inputs.iter().zip(&originals).zip(&prior_flags) {
        t.set_data(orig);
        t.set_requires_grad(flag);
        t.zero_grad();
    }
    result
}

fn run_check<F>(
    f: &F,
    inputs: &[Tensor],
    originals: &[Vec<f32>],
    h: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph) -> Result<Tensor>,
{
    // Analytic pass on the production f32 path.
    let mut g = Graph::new();
    let y = f(&mut g)?;
    if y.numel() != 1 {
        return Err(Error::Dim(format!(
            "gradcheck function must return a scalar, got shape {:?}",
            y.shape()
        )));
    }
    g.backward(&y)?;
    let analytic: Vec<Vec<f32>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    for t in inputs {
        t.zero_grad();
    }
    drop(g);

    // Coordinate selection.
    let sizes: Vec<usize> = originals.iter().map(|o| o.len()).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<usize> = if total > MAX_COORDS {
        let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
        let mut picked = rand::seq::index::sample(&mut rng, total, MAX_COORDS).into_vec();
        picked.sort_unstable();
        picked
    } else {
        (0..total).collect()
    };

    let mut report = GradcheckReport {
        pass: true,
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: coords.len(),
    };
    for flat in coords {
        // Map the flat coordinate to (input, local coordinate).
        let mut input_idx = 0;
        let mut local = flat;
        while local >= sizes[input_idx] {
            local -= sizes[input_idx];
            input_idx += 1;
        }
        let base = originals[input_idx][local] as f64;
        let numeric = central_difference(f, &inputs[input_idx], base, local, h)?;
        let a = analytic[input_idx][local] as f64;
        let err = rel_err(a, numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_input = input_idx;
            report.worst_coord = local;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}
