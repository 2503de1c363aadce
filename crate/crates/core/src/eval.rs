//! Accuracy, robustness grids over ε, the R&G score and decision-boundary
//! sampling for 2-D models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::sigmoid;
use crate::data::{sample_indices, Dataset};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::nn::Model;
use crate::perturb::{attack, AttackKind, AttackSpec};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;

/// Class decisions from logits: `z >= 0` means class 1 for a single logit,
/// argmax (first maximum on ties) otherwise.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let c = logits.sample_len();
    (0..logits.batch())
        .map(|i| {
            let row = logits.sample(i);
            if c == 1 {
                usize::from(row[0] >= 0.0)
            } else {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            }
        })
        .collect()
}

/// Predicted class and its probability for each row.
pub fn confidences(logits: &Tensor) -> Vec<(usize, f64)> {
    let preds = predictions(logits);
    preds
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let row = logits.sample(i);
            let conf = if row.len() == 1 {
                let s = sigmoid(row[0]);
                if p == 1 {
                    s
                } else {
                    1.0 - s
                }
            } else {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                (row[p] - m).exp() / z
            };
            (p, conf)
        })
        .collect()
}

/// Percentage of rows whose prediction matches `targets`.
pub fn accuracy_of(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let correct = predictions(logits).iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(100.0 * correct as f64 / targets.len() as f64)
}

pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    accuracy_of(&model.logits(&dataset.inputs, EVAL_CHUNK)?, &dataset.targets)
}

/// Attack configuration used for evaluation at budget `epsilon`: FGSM as is,
/// PGD with 7 steps of 0.005, FAST with its default step.
pub fn eval_attack(kind: AttackKind, epsilon: f64, clamp: Option<(f64, f64)>) -> AttackSpec {
    let spec = match kind {
        AttackKind::Fgsm => AttackSpec::fgsm(epsilon),
        AttackKind::Pgd => AttackSpec::pgd_eval(epsilon),
        AttackKind::Fast => AttackSpec::fast(epsilon),
    };
    AttackSpec { clamp, ..spec }
}

/// Accuracy on adversarial twins of every sample of `dataset`.
pub fn robust_accuracy(model: &Model, dataset: &Dataset, spec: &AttackSpec, seed: u64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let kind = LossKind::for_model(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = dataset.inputs.select(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| dataset.targets[i]).collect();
        let adv = attack(model, &x, &y, kind, spec, &mut rng)?;
        let preds = predictions(&model.logits(&adv, EVAL_CHUNK)?);
        correct += preds.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustGrid {
    pub model_tag: String,
    pub attack: AttackKind,
    pub epsilons: Vec<f64>,
    /// Percent accuracy per ε.
    pub accuracies: Vec<f64>,
}

/// Checks that an ε grid is nonempty, strictly ascending and nonnegative.
pub fn check_epsilon_grid(epsilons: &[f64]) -> Result<()> {
    if epsilons.is_empty() {
        return Err(Error::InvalidArgument("empty epsilon grid".into()));
    }
    if epsilons.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon grid has invalid entries: {epsilons:?}")));
    }
    if epsilons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!("epsilon grid must be strictly ascending: {epsilons:?}")));
    }
    Ok(())
}

/// Accuracy under `kind` attacks at every ε of the grid. An ε of zero is
/// plain clean accuracy.
pub fn robust_grid(
    model: &Model,
    dataset: &Dataset,
    kind: AttackKind,
    epsilons: &[f64],
    clamp: Option<(f64, f64)>,
    model_tag: &str,
    seed: u64,
) -> Result<RobustGrid> {
    check_epsilon_grid(epsilons)?;
    let accuracies = epsilons
        .iter()
        .map(|&eps| {
            if eps == 0.0 {
                accuracy(model, dataset)
            } else {
                robust_accuracy(model, dataset, &eval_attack(kind, eps, clamp), seed)
            }
        })
        .collect::<Result<_>>()?;
    Ok(RobustGrid { model_tag: model_tag.into(), attack: kind, epsilons: epsilons.to_vec(), accuracies })
}

/// Robustness and generalization score: the plain sum of the grid's
/// percent accuracies.
pub fn rg_score(accuracies: &[f64]) -> f64 {
    accuracies.iter().sum()
}

impl RobustGrid {
    pub fn rg_score(&self) -> f64 {
        rg_score(&self.accuracies)
    }
}

/// Axis-aligned box `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryBox {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl BoundaryBox {
    /// Bounding box of a 2-D dataset grown by `margin` on every side.
    pub fn around(dataset: &Dataset, margin: f64) -> Result<Self> {
        if dataset.sample_shape() != [2] {
            return Err(Error::NotTwoDimensional(format!("dataset samples have shape {:?}", dataset.sample_shape())));
        }
        let mut b = BoundaryBox { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for i in 0..dataset.len() {
            let s = dataset.inputs.sample(i);
            b.x0 = b.x0.min(s[0]);
            b.x1 = b.x1.max(s[0]);
            b.y0 = b.y0.min(s[1]);
            b.y1 = b.y1.max(s[1]);
        }
        Ok(BoundaryBox { x0: b.x0 - margin, x1: b.x1 + margin, y0: b.y0 - margin, y1: b.y1 + margin })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub x: f64,
    pub y: f64,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvPoint {
    pub x: f64,
    pub y: f64,
    pub true_class: usize,
    pub source_x: f64,
    pub source_y: f64,
    /// Whether the model misclassifies the adversarial point.
    pub fooled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGrid {
    pub bbox: BoundaryBox,
    pub resolution: usize,
    /// Row-major lattice, `y` outer, both axes ascending and endpoints
    /// included.
    pub cells: Vec<GridCell>,
    pub adversarial: Vec<AdvPoint>,
}

fn lattice(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

/// Evaluates a 2-D model on a `resolution x resolution` lattice over `bbox`
/// and overlays adversarial twins of `n_adv` seeded samples of `dataset`.
pub fn boundary_grid(
    model: &Model,
    dataset: &Dataset,
    bbox: BoundaryBox,
    resolution: usize,
    spec: &AttackSpec,
    n_adv: usize,
    seed: u64,
) -> Result<BoundaryGrid> {
    if model.input_shape() != [2] {
        return Err(Error::NotTwoDimensional(format!("model input shape is {:?}", model.input_shape())));
    }
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!("boundary resolution must be >= 2, got {resolution}")));
    }
    if !(bbox.x0 < bbox.x1 && bbox.y0 < bbox.y1) {
        return Err(Error::InvalidArgument(format!("degenerate boundary box {bbox:?}")));
    }
    if n_adv > dataset.len() {
        return Err(Error::InvalidArgument(format!("{n_adv} adversarial points from {} samples", dataset.len())));
    }
    let mut pts = Vec::with_capacity(2 * resolution * resolution);
    for y in lattice(bbox.y0, bbox.y1, resolution) {
        for x in lattice(bbox.x0, bbox.x1, resolution) {
            pts.extend_from_slice(&[x, y]);
        }
    }
    let pts = Tensor::new(vec![resolution * resolution, 2], pts)?;
    let conf = confidences(&model.logits(&pts, 1024)?);
    let cells = conf
        .iter()
        .enumerate()
        .map(|(i, &(class, confidence))| {
            let p = pts.sample(i);
            GridCell { x: p[0], y: p[1], class, confidence }
        })
        .collect();

    let ids = sample_indices(dataset.len(), n_adv, seed);
    let kind = LossKind::for_model(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0d4);
    let mut adversarial = Vec::with_capacity(n_adv);
    for chunk in ids.chunks(EVAL_CHUNK) {
        let x = dataset.inputs.select(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| dataset.targets[i]).collect();
        let adv = attack(model, &x, &y, kind, spec, &mut rng)?;
        let preds = predictions(&model.logits(&adv, EVAL_CHUNK)?);
        for (s, &t) in y.iter().enumerate() {
            let (a, c) = (adv.sample(s), x.sample(s));
            adversarial.push(AdvPoint {
                x: a[0],
                y: a[1],
                true_class: t,
                source_x: c[0],
                source_y: c[1],
                fooled: preds[s] != t,
            });
        }
    }
    Ok(BoundaryGrid { bbox, resolution, cells, adversarial })
}
