//! Central-difference gradient verification.

use rand::seq::index::sample;

use super::params::ParamSet;
use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{normal, SeededRng};

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn pick_coords(len: usize, max_coords: usize, rng: &mut SeededRng) -> Vec<usize> {
    if len <= max_coords {
        (0..len).collect()
    } else {
        let mut picked = sample(rng, len, max_coords).into_vec();
        picked.sort_unstable();
        picked
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::Usage(format!("gradient check needs a scalar function, got {:?}", t.shape())));
    }
    Ok(t.item())
}

fn perturbed(point: &Tensor, coord: usize, delta: f64) -> Tensor {
    let mut data = point.to_vec();
    data[coord] += delta;
    Tensor::from_vec(point.shape(), data).expect("same shape")
}

/// Max relative error between the tape gradient of `f` at `point` and a
/// central difference with step `h`, over at most `max_coords` sampled coordinates.
pub fn finite_difference_check<F>(
    f: F,
    point: &Tensor,
    h: f64,
    max_coords: usize,
    rng: &mut SeededRng,
) -> Result<GradCheck>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let x = tape.watch(point);
    let y = f(&tape, &x)?;
    scalar(&y)?;
    let analytic = tape.backward(&y)?.wrt(&x);

    let coords = pick_coords(point.numel(), max_coords, rng);
    let mut worst = 0.0f64;
    for &c in &coords {
        let plus = scalar(&f(&Tape::no_grad(), &perturbed(point, c, h))?)?;
        let minus = scalar(&f(&Tape::no_grad(), &perturbed(point, c, -h))?)?;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_error(analytic.data()[c], numeric));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coords_checked: coords.len(),
    })
}

/// Same check over every scalar of a [`ParamSet`], sampling coordinates
/// uniformly across the concatenation of all tensors.
pub fn finite_difference_check_params<F>(
    f: F,
    params: &ParamSet,
    h: f64,
    max_coords: usize,
    rng: &mut SeededRng,
) -> Result<GradCheck>
where
    F: Fn(&Tape, &ParamSet) -> Result<Tensor>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let y = f(&tape, &bound)?;
    scalar(&y)?;
    let grads = bound.gradients(&tape.backward(&y)?);

    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, (_, t)| {
            let start = *acc;
            *acc += t.numel();
            Some(start)
        })
        .collect();
    let total = params.num_elements();

    let coords = pick_coords(total, max_coords, rng);
    let mut worst = 0.0f64;
    for &c in &coords {
        let slot = offsets.partition_point(|&o| o <= c) - 1;
        let local = c - offsets[slot];
        let eval = |delta: f64| -> Result<f64> {
            let mut shifted = params.clone();
            let t = shifted.get_mut(&names[slot]).expect("known name");
            *t = perturbed(t, local, delta);
            scalar(&f(&Tape::no_grad(), &shifted)?)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max(rel_error(grads[slot].data()[local], numeric));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coords_checked: coords.len(),
    })
}

/// Directional form of the check: for `directions` random unit vectors `u`
/// over every scalar of `params`, compares `∇f·u` with
/// `(f(p + h·u) − f(p − h·u)) / 2h`. Better conditioned than per-coordinate
/// checks when many partial derivatives are tiny.
pub fn directional_derivative_check<F>(
    f: F,
    params: &ParamSet,
    h: f64,
    directions: usize,
    rng: &mut SeededRng,
) -> Result<GradCheck>
where
    F: Fn(&Tape, &ParamSet) -> Result<Tensor>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let y = f(&tape, &bound)?;
    scalar(&y)?;
    let grads = bound.gradients(&tape.backward(&y)?);

    let mut worst = 0.0f64;
    for _ in 0..directions {
        let mut u: Vec<Vec<f64>> = params.iter().map(|(_, t)| (0..t.numel()).map(|_| normal(rng)).collect()).collect();
        let norm = u.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().flatten().for_each(|v| *v /= norm);
        let analytic: f64 = grads
            .iter()
            .zip(&u)
            .map(|(g, d)| g.data().iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let eval = |step: f64| -> Result<f64> {
            let mut shifted = params.clone();
            for (t, d) in shifted.tensors_mut().zip(&u) {
                t.map_in_place(|i, v| *v += step * d[i]);
            }
            scalar(&f(&Tape::no_grad(), &shifted)?)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max(rel_error(analytic, numeric));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coords_checked: directions,
    })
}
