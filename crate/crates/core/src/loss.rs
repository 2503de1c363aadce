use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

/// Classification loss applied to a model's logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Sigmoid cross-entropy on a single logit, targets in {0, 1}.
    BinaryCe,
    /// Softmax cross-entropy over `C` logits, targets in `[0, C)`.
    SoftmaxCe,
}

impl LossKind {
    /// Binary for single-logit models, softmax otherwise.
    pub fn for_model(model: &Model) -> Self {
        if model.num_outputs() == 1 {
            LossKind::BinaryCe
        } else {
            LossKind::SoftmaxCe
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "binary_ce" => Some(LossKind::BinaryCe),
            "softmax_ce" => Some(LossKind::SoftmaxCe),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::BinaryCe => "binary_ce",
            LossKind::SoftmaxCe => "softmax_ce",
        }
    }
}

/// Records the mean loss of `logits` against class-index `targets`.
pub fn loss_on(tape: &mut Tape<'_>, logits: Var, targets: &[usize], kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::BinaryCe => {
            let t: Vec<f64> = targets
                .iter()
                .map(|&y| match y {
                    0 | 1 => Ok(y as f64),
                    _ => Err(Error::TargetOutOfRange { target: y as f64, classes: 2 }),
                })
                .collect::<Result<_>>()?;
            tape.binary_ce(logits, &t)
        }
        LossKind::SoftmaxCe => tape.softmax_ce(logits, targets),
    }
}

/// Mean loss over the batch as a one-element tensor.
pub fn loss(logits: &Tensor, targets: &[usize], kind: LossKind) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone(), false);
    let l = loss_on(&mut tape, z, targets, kind)?;
    Ok(tape.value(l).clone())
}

/// Gradient of the mean loss with respect to the input batch. The model is
/// only read.
pub fn grad_wrt_input(model: &Model, x: &Tensor, y: &[usize], kind: LossKind) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let (logits, _) = model.forward_on(&mut tape, xv, false)?;
    let l = loss_on(&mut tape, logits, y, kind)?;
    let grads = tape.backward(l)?;
    Ok(grads.wrt(xv).expect("input is differentiable").clone())
}
