//! Pixel-wise segmentation metrics and the evaluation report.
//!
//! Conventions for empty masks: when prediction and truth are both empty
//! every overlap metric is 1; when exactly one side is empty it is 0.
//! Probabilities are binarized with a strict `p > threshold` rule.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::Domain;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    /// `(precision, recall, f1)`. F1 is evaluated as `2tp / (2tp + fp + fn)`,
    /// the harmonic mean of precision and recall without the intermediate
    /// rounding.
    pub fn precision_recall_f1(&self) -> (f64, f64, f64) {
        let pred_pos = self.tp + self.fp;
        let true_pos = self.tp + self.fn_;
        let both_empty = pred_pos == 0 && true_pos == 0;
        let precision = if pred_pos == 0 {
            if both_empty {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / pred_pos as f64
        };
        let recall = if true_pos == 0 {
            if both_empty {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / true_pos as f64
        };
        (precision, recall, self.dice())
    }
}

fn check_masks(pred: &[bool], truth: &[bool]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "confusion",
            format!("prediction has {} pixels, truth has {}", pred.len(), truth.len()),
        ));
    }
    Ok(())
}

pub fn confusion(pred: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    check_masks(pred, truth)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn dice(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Ok(confusion(pred, truth)?.dice())
}

pub fn iou(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Ok(confusion(pred, truth)?.iou())
}

pub fn precision_recall_f1(counts: &ConfusionCounts) -> (f64, f64, f64) {
    counts.precision_recall_f1()
}

/// Binarizes probabilities with `p > threshold`.
pub fn binarize(probs: &[f64], threshold: f64) -> Vec<bool> {
    probs.iter().map(|&p| p > threshold).collect()
}

/// Interprets a {0,1} mask tensor as booleans.
pub fn mask_bits(mask: &[f64]) -> Vec<bool> {
    mask.iter().map(|&v| v > 0.5).collect()
}

/// Area under the ROC curve via the Mann-Whitney rank sum with mid-ranks
/// for ties, i.e. P(score of a random positive > random negative) with
/// ties counted one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "roc_auc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { name: "scores".into() });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(
            "ROC AUC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        let pos_in_run = order[i..j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += mid * pos_in_run as f64;
        i = j;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Anything that maps an image batch `[N, C, S, S]` to probabilities `[N, 1, S, S]`.
pub trait Predictor {
    fn predict(&self, images: &Tensor) -> Result<Tensor>;
}

impl Predictor for crate::network::AttentionUNet {
    fn predict(&self, images: &Tensor) -> Result<Tensor> {
        crate::network::AttentionUNet::predict(self, images)
    }
}

/// Metric row for one domain (or an aggregate).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

impl DomainMetrics {
    fn from_counts(counts: &ConfusionCounts, auc: f64) -> Self {
        let (precision, recall, f1) = counts.precision_recall_f1();
        Self {
            dice: counts.dice(),
            iou: counts.iou(),
            precision,
            recall,
            f1,
            auc,
        }
    }

    fn as_array(&self) -> [f64; 6] {
        [self.dice, self.iou, self.precision, self.recall, self.f1, self.auc]
    }

    fn mean(rows: &[DomainMetrics]) -> Self {
        let n = rows.len() as f64;
        let mut acc = [0.0; 6];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.as_array()) {
                *a += v;
            }
        }
        let [dice, iou, precision, recall, f1, auc] = acc.map(|v| v / n);
        Self {
            dice,
            iou,
            precision,
            recall,
            f1,
            auc,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainReport {
    pub domain: Domain,
    pub samples: usize,
    pub counts: ConfusionCounts,
    pub metrics: DomainMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub domains: Vec<DomainReport>,
    /// Unweighted mean of the per-domain rows.
    pub macro_avg: DomainMetrics,
    /// Metrics over all pixels of all domains pooled together.
    pub pooled: DomainMetrics,
    pub pooled_counts: ConfusionCounts,
    /// Domains with no samples, left out of the averages.
    pub missing: Vec<Domain>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Fraction of pixels kept for the AUC.
    pub auc_sample_rate: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            auc_sample_rate: 1.0 / 16.0,
            seed: 0,
            batch_size: 8,
        }
    }
}

/// An evaluation item: image `[C, S, S]`, mask `[1, S, S]`, domain.
pub trait Labeled {
    fn image(&self) -> &Tensor;
    fn mask(&self) -> &Tensor;
    fn domain(&self) -> Domain;
}

struct Pool {
    counts: ConfusionCounts,
    scores: Vec<f64>,
    labels: Vec<bool>,
    samples: usize,
}

fn subsample_auc(scores: &[f64], labels: &[bool], rate: f64, seed: u64) -> Result<f64> {
    let n = scores.len();
    let keep = ((n as f64 * rate).ceil() as usize).clamp(1, n);
    if keep == n {
        return roc_auc(scores, labels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
    match roc_auc(&s, &l) {
        // a sparse subsample can miss the minority class; fall back to all pixels
        Err(Error::Undefined(_)) => roc_auc(scores, labels),
        other => other,
    }
}

fn auc_or_nan(result: Result<f64>) -> Result<f64> {
    match result {
        Ok(v) => Ok(v),
        Err(Error::Undefined(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Runs `model` over `samples` and builds the per-domain report.
pub fn evaluate<M: Predictor + ?Sized, S: Labeled>(
    model: &M,
    samples: &[S],
    config: &EvalConfig,
) -> Result<MetricsReport> {
    if !(config.auc_sample_rate > 0.0 && config.auc_sample_rate <= 1.0) {
        return Err(Error::invalid("auc_sample_rate", "must lie in (0, 1]"));
    }
    let mut pools: Vec<(Domain, Pool)> = Domain::ALL
        .iter()
        .map(|&d| {
            (
                d,
                Pool {
                    counts: ConfusionCounts::default(),
                    scores: Vec::new(),
                    labels: Vec::new(),
                    samples: 0,
                },
            )
        })
        .collect();
    for chunk in samples.chunks(config.batch_size.max(1)) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| s.image()).collect();
        let probs = model.predict(&Tensor::stack(&images)?)?;
        for (i, sample) in chunk.iter().enumerate() {
            let p = probs.outer(i)?;
            if p.shape() != sample.mask().shape() {
                return Err(Error::shape(
                    "evaluate",
                    format!("prediction {:?} vs mask {:?}", p.shape(), sample.mask().shape()),
                ));
            }
            let truth = mask_bits(sample.mask().data());
            let pred = binarize(p.data(), config.threshold);
            let pool = &mut pools.iter_mut().find(|(d, _)| *d == sample.domain()).unwrap().1;
            pool.counts.merge(&confusion(&pred, &truth)?);
            pool.scores.extend_from_slice(p.data());
            pool.labels.extend(truth);
            pool.samples += 1;
        }
    }

    let mut domains = Vec::new();
    let mut missing = Vec::new();
    let mut pooled_counts = ConfusionCounts::default();
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    for (k, (domain, pool)) in pools.into_iter().enumerate() {
        if pool.samples == 0 {
            log::warn!("no {domain} samples to evaluate; domain omitted from the report");
            missing.push(domain);
            continue;
        }
        let auc = auc_or_nan(subsample_auc(
            &pool.scores,
            &pool.labels,
            config.auc_sample_rate,
            config.seed.wrapping_add(k as u64),
        ))?;
        pooled_counts.merge(&pool.counts);
        domains.push(DomainReport {
            domain,
            samples: pool.samples,
            counts: pool.counts,
            metrics: DomainMetrics::from_counts(&pool.counts, auc),
        });
        all_scores.extend(pool.scores);
        all_labels.extend(pool.labels);
    }
    if domains.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let pooled_auc = auc_or_nan(subsample_auc(
        &all_scores,
        &all_labels,
        config.auc_sample_rate,
        config.seed.wrapping_add(99),
    ))?;
    let rows: Vec<DomainMetrics> = domains.iter().map(|d| d.metrics).collect();
    Ok(MetricsReport {
        macro_avg: DomainMetrics::mean(&rows),
        pooled: DomainMetrics::from_counts(&pooled_counts, pooled_auc),
        pooled_counts,
        domains,
        missing,
    })
}

impl MetricsReport {
    pub fn domain(&self, domain: Domain) -> Option<&DomainReport> {
        self.domains.iter().find(|d| d.domain == domain)
    }

    /// CSV with one row per domain and a macro row; columns follow the
    /// usual table order, then the confusion counts (pooled for the macro row).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,dice,iou,precision,recall,f1,auc,tp,fp,tn,fn\n");
        let mut row = |name: &str, m: &DomainMetrics, c: &ConfusionCounts| {
            let [a, b, c2, d, e, f] = m.as_array();
            let _ = writeln!(
                out,
                "{name},{a:.6},{b:.6},{c2:.6},{d:.6},{e:.6},{f:.6},{},{},{},{}",
                c.tp, c.fp, c.tn, c.fn_
            );
        };
        for d in &self.domains {
            row(d.domain.name(), &d.metrics, &d.counts);
        }
        row("macro", &self.macro_avg, &self.pooled_counts);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>6} {:>9} {:>6} {:>6} {:>6}",
            "dataset", "dice", "iou", "precision", "recall", "f1", "auc"
        );
        let mut line = |name: &str, m: &DomainMetrics| {
            let _ = writeln!(
                s,
                "{:<8} {:>6.3} {:>6.3} {:>9.3} {:>6.3} {:>6.3} {:>6.3}",
                name, m.dice, m.iou, m.precision, m.recall, m.f1, m.auc
            );
        };
        for d in &self.domains {
            line(d.domain.name(), &d.metrics);
        }
        line("macro", &self.macro_avg);
        line("pooled", &self.pooled);
        for d in &self.missing {
            let _ = writeln!(s, "warning: no {d} samples evaluated");
        }
        s
    }
}
