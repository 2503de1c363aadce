//! Central-difference validation of the autodiff gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, Tape};
use crate::error::Result;
use crate::loss::{loss, loss_on, LossKind};
use crate::nn::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Coordinates to sample across parameters and input; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, max_coords: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
enum Coord {
    Param(ParamId, usize),
    Input(usize),
}

/// Largest relative disagreement between analytic and central-difference
/// gradients, over parameter and input coordinates:
/// `|a - d| / max(|a|, |d|, 1e-8)`.
pub fn finite_difference_check(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    kind: LossKind,
    cfg: GradCheckConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let (logits, _) = model.forward_on(&mut tape, xv, true)?;
    let l = loss_on(&mut tape, logits, y, kind)?;
    let grads = tape.backward(l)?;

    let mut coords: Vec<Coord> = Vec::new();
    for (id, p) in model.params() {
        coords.extend((0..p.len()).map(|i| Coord::Param(id, i)));
    }
    coords.extend((0..x.len()).map(Coord::Input));
    if let Some(k) = cfg.max_coords.filter(|&k| k < coords.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked = index::sample(&mut rng, coords.len(), k).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let eval = |m: &Model, input: &Tensor| -> Result<f64> {
        Ok(loss(&m.forward(input)?.0, y, kind)?.item())
    };
    let mut probe = model.clone();
    let mut input = x.clone();
    let mut worst = 0.0f64;
    for c in coords {
        let (analytic, numeric) = match c {
            Coord::Param(id, i) => {
                let a = grads.param(id).expect("tracked").data()[i];
                let orig = probe.param(id).expect("exists").data()[i];
                probe.param_mut(id).expect("exists").data_mut()[i] = orig + cfg.h;
                let plus = eval(&probe, x)?;
                probe.param_mut(id).expect("exists").data_mut()[i] = orig - cfg.h;
                let minus = eval(&probe, x)?;
                probe.param_mut(id).expect("exists").data_mut()[i] = orig;
                (a, (plus - minus) / (2.0 * cfg.h))
            }
            Coord::Input(i) => {
                let a = grads.wrt(xv).expect("tracked").data()[i];
                let orig = input.data()[i];
                input.data_mut()[i] = orig + cfg.h;
                let plus = eval(model, &input)?;
                input.data_mut()[i] = orig - cfg.h;
                let minus = eval(model, &input)?;
                input.data_mut()[i] = orig;
                (a, (plus - minus) / (2.0 * cfg.h))
            }
        };
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
