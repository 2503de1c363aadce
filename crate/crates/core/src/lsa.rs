//! Layer sustainability analysis: per-layer comparison measures between
//! clean and perturbed representations, their population statistics and the
//! most-vulnerable-layer list.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::relative_error;
use crate::data::{sample_indices, Dataset};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::nn::Model;
use crate::perturb::Perturbation;
use crate::tensor::Tensor;

/// Relative Frobenius error `|c - p|_F / |c|_F` over whole tensors.
pub fn comparison_measure(clean: &Tensor, pert: &Tensor) -> Result<f64> {
    clean.check_same_shape(pert)?;
    relative_error(clean.data(), pert.data())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmRecord {
    pub sample_id: usize,
    pub layer: usize,
    pub cm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsaStats {
    pub mu: f64,
    pub sigma: f64,
    pub per_layer_mean: Vec<f64>,
    pub m: usize,
    pub eta: f64,
}

/// Population mean and standard deviation over the full sample x layer grid.
/// Records must cover every (sample, layer) pair exactly once, with layers
/// numbered `0..L`.
pub fn lsa_stats(records: &[CmRecord], eta: f64) -> Result<LsaStats> {
    if records.is_empty() {
        return Err(Error::IncompleteGrid("no records".into()));
    }
    let samples: BTreeSet<usize> = records.iter().map(|r| r.sample_id).collect();
    let layers = records.iter().map(|r| r.layer).max().expect("nonempty") + 1;
    let m = samples.len();
    if records.len() != m * layers {
        return Err(Error::IncompleteGrid(format!(
            "{} records for {m} samples x {layers} layers",
            records.len()
        )));
    }
    let pairs: BTreeSet<(usize, usize)> = records.iter().map(|r| (r.sample_id, r.layer)).collect();
    if pairs.len() != records.len() {
        return Err(Error::IncompleteGrid("duplicate (sample, layer) record".into()));
    }
    if let Some(r) = records.iter().find(|r| !r.cm.is_finite() || r.cm < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cm for sample {} layer {} is {}",
            r.sample_id, r.layer, r.cm
        )));
    }
    let total = records.len() as f64;
    let mu = records.iter().map(|r| r.cm).sum::<f64>() / total;
    let sigma = (records.iter().map(|r| (r.cm - mu).powi(2)).sum::<f64>() / total).sqrt();
    let mut per_layer_mean = vec![0.0; layers];
    for r in records {
        per_layer_mean[r.layer] += r.cm;
    }
    for v in &mut per_layer_mean {
        *v /= m as f64;
    }
    Ok(LsaStats { mu, sigma, per_layer_mean, m, eta })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvlEntry {
    pub layer: usize,
    pub mean_cm: f64,
}

/// Most vulnerable layers, highest mean CM first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MvlList(pub Vec<MvlEntry>);

impl MvlList {
    pub fn entries(&self) -> &[MvlEntry] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn top(&self) -> Option<usize> {
        self.0.first().map(|e| e.layer)
    }

    pub fn layers(&self) -> Vec<usize> {
        self.0.iter().map(|e| e.layer).collect()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.iter().any(|e| e.layer == layer)
    }
}

/// Layers whose mean CM exceeds `mu + eta * sigma` (strictly). Gaps within
/// summation rounding of `mu` never count, so a constant population flags
/// nothing even when `sigma` is a few ulps above zero.
pub fn detect_mvl(stats: &LsaStats) -> MvlList {
    let floor = 64.0 * f64::EPSILON * stats.mu.abs();
    let mut entries: Vec<MvlEntry> = stats
        .per_layer_mean
        .iter()
        .enumerate()
        .filter(|&(_, &mean)| {
            let gap = mean - stats.mu;
            gap > stats.eta * stats.sigma && gap > floor
        })
        .map(|(layer, &mean_cm)| MvlEntry { layer, mean_cm })
        .collect();
    entries.sort_by(|a, b| b.mean_cm.total_cmp(&a.mean_cm).then(a.layer.cmp(&b.layer)));
    MvlList(entries)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsaConfig {
    /// Number of analyzed samples.
    pub m: usize,
    pub eta: f64,
    pub seed: u64,
    /// Samples perturbed and forwarded together.
    pub chunk: usize,
}

impl Default for LsaConfig {
    fn default() -> Self {
        Self { m: 256, eta: 1.0, seed: 0, chunk: 128 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsaReport {
    pub perturbation: Perturbation,
    /// Split the samples were drawn from.
    pub split: String,
    pub records: Vec<CmRecord>,
    pub stats: LsaStats,
    pub mvl: MvlList,
}

/// Runs the analysis on `m` seeded samples of `dataset`: each sample and its
/// perturbed twin go through the model, and every learnable layer's
/// representations are compared.
pub fn run_lsa(model: &Model, dataset: &Dataset, perturbation: &Perturbation, cfg: &LsaConfig) -> Result<LsaReport> {
    if cfg.m == 0 {
        return Err(Error::InvalidArgument("LSA needs M >= 1".into()));
    }
    if cfg.m > dataset.len() {
        return Err(Error::InvalidArgument(format!("M = {} exceeds dataset size {}", cfg.m, dataset.len())));
    }
    if !(cfg.eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be >= 0, got {}", cfg.eta)));
    }
    let ids = sample_indices(dataset.len(), cfg.m, cfg.seed);
    let kind = LossKind::for_model(model);
    // Attack randomness gets its own stream, independent of sample choice.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a77a);
    let layers = model.num_learnable();
    let mut records = Vec::with_capacity(cfg.m * layers);
    for chunk in ids.chunks(cfg.chunk.max(1)) {
        let x = dataset.inputs.select(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| dataset.targets[i]).collect();
        let x_pert = perturbation.apply(model, &x, &y, kind, &mut rng)?;
        let (_, clean) = model.forward(&x)?;
        let (_, pert) = model.forward(&x_pert)?;
        for (s, &id) in chunk.iter().enumerate() {
            for l in 0..layers {
                let cm = relative_error(clean.layer(l).sample(s), pert.layer(l).sample(s))?;
                records.push(CmRecord { sample_id: id, layer: l, cm });
            }
        }
    }
    let stats = lsa_stats(&records, cfg.eta)?;
    let mvl = detect_mvl(&stats);
    Ok(LsaReport { perturbation: *perturbation, split: dataset.split.name().into(), records, stats, mvl })
}

impl LsaReport {
    /// `sample_id,layer,cm`, one row per record.
    pub fn write_records_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "layer", "cm"])?;
        for r in &self.records {
            w.write_record([r.sample_id.to_string(), r.layer.to_string(), r.cm.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// `layer,mean_cm,mu,sigma,eta,flagged`, one row per learnable layer.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let s = &self.stats;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "mean_cm", "mu", "sigma", "eta", "flagged"])?;
        for (l, mean) in s.per_layer_mean.iter().enumerate() {
            w.write_record([
                l.to_string(),
                mean.to_string(),
                s.mu.to_string(),
                s.sigma.to_string(),
                s.eta.to_string(),
                self.mvl.contains(l).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Human-readable MVL list, one `layer <l>  mean_cm <v>` line per entry.
    pub fn mvl_text(&self) -> String {
        let mut out = format!("MVL [{}] (M={}, eta={}, split={}):", self.perturbation, self.stats.m, self.stats.eta, self.split);
        if self.mvl.is_empty() {
            out.push_str(" empty");
        }
        for e in self.mvl.entries() {
            out.push_str(&format!("\n  layer {}  mean_cm {:.6}", e.layer, e.mean_cm));
        }
        out
    }
}
