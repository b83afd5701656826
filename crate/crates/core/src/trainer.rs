//! CT-only pretraining, balanced joint fine-tuning, per-domain validation
//! and macro-Dice checkpoint selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::save_checkpoint;
use crate::data::{augment, balanced_batches, collate, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::losses::{batch_modality_loss_node, focal_tversky_loss, Domain, LossParams, LossTable};
use crate::metrics::{binarize, dice, mask_bits, Labeled, Predictor};
use crate::network::{AttentionUNet, BoundParams, ParameterSet};
use crate::optim::{AdamW, AdamWConfig, OneCycleSchedule};
use crate::tensor::Tensor;

pub const CURVES_HEADER: &str = "epoch,domain,train_loss,val_loss,val_dice,macro_dice,lr";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    /// Constant rate while pretraining and the one-cycle peak afterwards.
    pub lr: f64,
    pub weight_decay: f64,
    pub losses: LossTable,
    /// Loss used for CT-only pretraining.
    pub pretrain_loss: LossParams,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub image_size: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub curves_path: Option<PathBuf>,
    /// Also write `epoch_k.ckpt` for every joint epoch.
    pub keep_all: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let losses = LossTable::default();
        Self {
            pretrain_epochs: 5,
            joint_epochs: 10,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-5,
            pretrain_loss: LossParams::new(0.5, 0.5, losses.ct.gamma),
            losses,
            augment: AugmentConfig::default(),
            seed: 0,
            image_size: 128,
            checkpoint_dir: None,
            curves_path: None,
            keep_all: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_epochs + self.joint_epochs == 0 {
            return Err(Error::invalid("epochs", "at least one epoch of training is required"));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::invalid(
                "batch_size",
                format!("{} must be a positive even number", self.batch_size),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        self.losses.validate()?;
        self.pretrain_loss.validate()
    }

    fn optimizer(&self, params: &ParameterSet) -> AdamW {
        let config = AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        };
        AdamW::new(config, params.iter().map(|(_, t)| t))
    }
}

/// A value for each domain.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PerDomain {
    pub mri: f64,
    pub ct: f64,
}

impl PerDomain {
    pub fn get(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Mri => self.mri,
            Domain::Ct => self.ct,
        }
    }

    fn set(&mut self, domain: Domain, value: f64) {
        match domain {
            Domain::Mri => self.mri = value,
            Domain::Ct => self.ct = value,
        }
    }

    pub fn mean(&self) -> f64 {
        (self.mri + self.ct) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based joint epoch.
    pub epoch: usize,
    pub train_loss: PerDomain,
    pub val_loss: PerDomain,
    pub val_dice: PerDomain,
    pub macro_dice: f64,
    /// Rate used for the last step of the epoch.
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValScore {
    pub loss: f64,
    pub dice: f64,
}

/// Mean loss and mean per-sample Dice at threshold 0.5, dropout off.
pub fn validate<M: Predictor + ?Sized, S: Labeled>(
    model: &M,
    samples: &[S],
    params: &LossParams,
    batch_size: usize,
) -> Result<ValScore> {
    if samples.is_empty() {
        return Err(Error::Empty("validation split".into()));
    }
    let mut loss = 0.0;
    let mut dice_sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| s.image()).collect();
        let probs = model.predict(&Tensor::stack(&images)?)?;
        let plane = probs.len() / chunk.len();
        for (s, p) in chunk.iter().zip(probs.data().chunks_exact(plane)) {
            let truth = s.mask().data();
            loss += focal_tversky_loss(p, truth, params)?;
            dice_sum += dice(&binarize(p, 0.5), &mask_bits(truth))?;
        }
    }
    let n = samples.len() as f64;
    Ok(ValScore {
        loss: loss / n,
        dice: dice_sum / n,
    })
}

/// Epoch (1-based) with the highest macro Dice, the earliest on ties.
/// NaN scores never win against a number.
pub fn select_best(records: &[EpochRecord]) -> Result<usize> {
    let mut best: Option<&EpochRecord> = None;
    for r in records {
        let better = match best {
            None => true,
            Some(b) => r.macro_dice > b.macro_dice || (b.macro_dice.is_nan() && !r.macro_dice.is_nan()),
        };
        if better {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
        .ok_or_else(|| Error::Empty("epoch records".into()))
}

fn phase_rng(seed: u64, phase: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((phase << 32) | epoch as u64);
    rng
}

const PRETRAIN: u64 = 1;
const JOINT: u64 = 2;

/// One optimizer step on `batch`; returns the per-sample losses.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut AttentionUNet,
    opt: &mut AdamW,
    batch: &[&Sample],
    table: &LossTable,
    augment_config: &AugmentConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
    (epoch, step): (usize, usize),
) -> Result<Vec<f64>> {
    let augmented: Vec<Sample> = batch.iter().map(|s| augment(s, rng, augment_config)).collect();
    let (images, masks, domains) = collate(&augmented)?;
    let mut graph = Graph::new();
    let bound = BoundParams::bind(&mut graph, &model.params);
    let x = graph.constant(images);
    let probs = model.forward(&mut graph, &bound, x, true, rng)?;
    let (loss, sample_losses) = batch_modality_loss_node(&mut graph, probs, &masks, &domains, table)?;
    if !graph.value(loss).item()?.is_finite() {
        return Err(Error::Diverged { epoch, step });
    }
    graph.backward(loss)?;
    let grads = bound.grads(&graph);
    match opt.step(model.params.tensors_mut(), &grads, lr) {
        Err(Error::NonFinite { .. }) => Err(Error::Diverged { epoch, step }),
        other => other,
    }?;
    Ok(sample_losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean batch loss of every step, in order.
    pub step_losses: Vec<f64>,
    /// Mean sample loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// CT-only training at a constant rate with the symmetric pretraining loss.
/// Updates `model` in place.
pub fn pretrain_ct(model: &mut AttentionUNet, ct_train: &[Sample], config: &TrainConfig) -> Result<PretrainReport> {
    config.validate()?;
    if ct_train.is_empty() {
        return Err(Error::Empty("CT training split".into()));
    }
    let table = LossTable::uniform(config.pretrain_loss);
    let mut opt = config.optimizer(&model.params);
    let mut report = PretrainReport {
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
    };
    let mut step = 0;
    for epoch in 1..=config.pretrain_epochs {
        let mut rng = phase_rng(config.seed, PRETRAIN, epoch);
        let mut order: Vec<usize> = (0..ct_train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &ct_train[i]).collect();
            let losses = train_step(
                model,
                &mut opt,
                &batch,
                &table,
                &config.augment,
                config.lr,
                &mut rng,
                (epoch, step),
            )?;
            total += losses.iter().sum::<f64>();
            report
                .step_losses
                .push(losses.iter().sum::<f64>() / losses.len() as f64);
        }
        let mean = total / ct_train.len() as f64;
        info!("pretrain epoch {epoch}/{}: CT loss {mean:.4}", config.pretrain_epochs);
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Training and validation splits for both domains.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub mri_train: Vec<Sample>,
    pub ct_train: Vec<Sample>,
    pub mri_val: Vec<Sample>,
    pub ct_val: Vec<Sample>,
}

impl TrainData {
    fn train(&self, domain: Domain) -> &[Sample] {
        match domain {
            Domain::Mri => &self.mri_train,
            Domain::Ct => &self.ct_train,
        }
    }

    fn val(&self, domain: Domain) -> &[Sample] {
        match domain {
            Domain::Mri => &self.mri_val,
            Domain::Ct => &self.ct_val,
        }
    }

    fn check(&self) -> Result<()> {
        for (name, split) in [
            ("MRI training split", &self.mri_train),
            ("CT training split", &self.ct_train),
            ("MRI validation split", &self.mri_val),
            ("CT validation split", &self.ct_val),
        ] {
            if split.is_empty() {
                return Err(Error::Empty(name.into()));
            }
            if let Some(s) = split.iter().find(|s| s.domain != domain_of(name)) {
                return Err(Error::invalid("data", format!("{} is not a {name} sample", s.id)));
            }
        }
        Ok(())
    }
}

fn domain_of(split_name: &str) -> Domain {
    if split_name.starts_with("MRI") {
        Domain::Mri
    } else {
        Domain::Ct
    }
}

#[derive(Clone, Debug)]
pub struct JointOutcome {
    pub best: ParameterSet,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
}

fn ckpt_dir(config: &TrainConfig) -> Result<Option<&Path>> {
    match &config.checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Ok(Some(dir))
        }
        None => Ok(None),
    }
}

/// Balanced fine-tuning on both domains with a one-cycle schedule over all
/// joint steps. Leaves `model` at its final weights and returns the weights
/// of the epoch with the best validation macro Dice.
pub fn joint_train(model: &mut AttentionUNet, data: &TrainData, config: &TrainConfig) -> Result<JointOutcome> {
    config.validate()?;
    data.check()?;
    if config.joint_epochs == 0 {
        return Err(Error::invalid("joint_epochs", "must be >= 1"));
    }
    let half = config.batch_size / 2;
    let steps_per_epoch = data.mri_train.len().max(data.ct_train.len()).div_ceil(half);
    let schedule = OneCycleSchedule::new(config.lr, config.joint_epochs * steps_per_epoch);
    schedule.validate()?;
    let mut opt = config.optimizer(&model.params);
    let dir = ckpt_dir(config)?;
    let mut records: Vec<EpochRecord> = Vec::with_capacity(config.joint_epochs);
    let mut best: Option<(f64, ParameterSet)> = None;
    let mut step = 0;
    for epoch in 1..=config.joint_epochs {
        let mut rng = phase_rng(config.seed, JOINT, epoch);
        let batches = balanced_batches(&data.mri_train, &data.ct_train, config.batch_size, &mut rng)?;
        let mut sums = PerDomain::default();
        let mut counts = PerDomain::default();
        let mut lr = 0.0;
        for items in &batches {
            let mri = items.iter().filter(|i| i.domain == Domain::Mri).count();
            assert_eq!(mri * 2, items.len(), "batch breaks the 1:1 domain ratio");
            lr = schedule.lr(step)?;
            step += 1;
            let batch: Vec<&Sample> = items.iter().map(|i| &data.train(i.domain)[i.index]).collect();
            let losses = train_step(
                model,
                &mut opt,
                &batch,
                &config.losses,
                &config.augment,
                lr,
                &mut rng,
                (epoch, step),
            )?;
            for (item, l) in items.iter().zip(losses) {
                sums.set(item.domain, sums.get(item.domain) + l);
                counts.set(item.domain, counts.get(item.domain) + 1.0);
            }
            debug!("joint epoch {epoch} step {step}: lr {lr:.3e}");
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: PerDomain {
                mri: sums.mri / counts.mri,
                ct: sums.ct / counts.ct,
            },
            val_loss: PerDomain::default(),
            val_dice: PerDomain::default(),
            macro_dice: 0.0,
            lr,
        };
        for domain in Domain::ALL {
            let score = validate(&*model, data.val(domain), &config.losses.get(domain), config.batch_size)?;
            record.val_loss.set(domain, score.loss);
            record.val_dice.set(domain, score.dice);
        }
        record.macro_dice = record.val_dice.mean();
        info!(
            "joint epoch {epoch}/{}: train loss MRI {:.4} CT {:.4}, val dice MRI {:.4} CT {:.4}, macro {:.4}",
            config.joint_epochs,
            record.train_loss.mri,
            record.train_loss.ct,
            record.val_dice.mri,
            record.val_dice.ct,
            record.macro_dice
        );
        if let Some(dir) = dir.filter(|_| config.keep_all) {
            save_checkpoint(&dir.join(format!("epoch_{epoch}.ckpt")), &model.params)?;
        }
        let improved = match &best {
            None => true,
            Some((score, _)) => record.macro_dice > *score || (score.is_nan() && !record.macro_dice.is_nan()),
        };
        if improved {
            best = Some((record.macro_dice, model.params.clone()));
        }
        records.push(record);
    }
    let best_epoch = select_best(&records)?;
    let (_, best) = best.expect("at least one epoch ran");
    Ok(JointOutcome {
        best,
        best_epoch,
        records,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub pretrain: PretrainReport,
    pub best: ParameterSet,
    /// `None` when no joint epochs ran.
    pub best_epoch: Option<usize>,
    pub records: Vec<EpochRecord>,
}

/// Pretraining followed by joint training. Writes `best.ckpt` and the
/// curves CSV when the config names their locations.
pub fn train(model: &mut AttentionUNet, data: &TrainData, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    data.check()?;
    let pretrain = pretrain_ct(model, &data.ct_train, config)?;
    let (best, best_epoch, records) = if config.joint_epochs == 0 {
        (model.params.clone(), None, Vec::new())
    } else {
        let joint = joint_train(model, data, config)?;
        (joint.best, Some(joint.best_epoch), joint.records)
    };
    if let Some(dir) = ckpt_dir(config)? {
        save_checkpoint(&dir.join("best.ckpt"), &best)?;
    }
    if let Some(path) = config.curves_path.as_deref().filter(|_| !records.is_empty()) {
        log_curves(&records, path)?;
    }
    Ok(TrainOutcome {
        pretrain,
        best,
        best_epoch,
        records,
    })
}

/// Curves CSV text: one row per epoch and domain plus a `macro` row.
pub fn curves_csv(records: &[EpochRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Empty("epoch records".into()));
    }
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for r in records {
        for domain in Domain::ALL {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                domain.name(),
                r.train_loss.get(domain),
                r.val_loss.get(domain),
                r.val_dice.get(domain),
                r.macro_dice,
                r.lr
            )
            .unwrap();
        }
        writeln!(
            out,
            "{},macro,{},{},{},{},{}",
            r.epoch,
            r.train_loss.mean(),
            r.val_loss.mean(),
            r.macro_dice,
            r.macro_dice,
            r.lr
        )
        .unwrap();
    }
    Ok(out)
}

pub fn log_curves(records: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, curves_csv(records)?).map_err(|e| Error::io(path, e))
}

/// Reads records back from [`curves_csv`] text. `macro` rows are checked
/// against the per-domain rows and otherwise ignored.
pub fn parse_curves(text: &str) -> Result<Vec<EpochRecord>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let bad = |offset: u64, reason: String| Error::Format {
        context: "curves".into(),
        offset,
        reason,
    };
    let header = reader.headers().map_err(|e| bad(0, e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CURVES_HEADER {
        return Err(bad(0, format!("expected header {CURVES_HEADER}")));
    }
    let mut records: Vec<EpochRecord> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| bad(0, e.to_string()))?;
        let offset = row.position().map_or(0, |p| p.byte());
        let num = |i: usize| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .map_err(|_| bad(offset, format!("column {i}: `{}` is not a number", &row[i])))
        };
        let epoch: usize = row[0]
            .parse()
            .map_err(|_| bad(offset, format!("bad epoch `{}`", &row[0])))?;
        if records.last().is_none_or(|r| r.epoch != epoch) {
            records.push(EpochRecord {
                epoch,
                train_loss: PerDomain::default(),
                val_loss: PerDomain::default(),
                val_dice: PerDomain::default(),
                macro_dice: num(5)?,
                lr: num(6)?,
            });
        }
        let r = records.last_mut().unwrap();
        if &row[1] == "macro" {
            if num(4)?.to_bits() != r.val_dice.mean().to_bits() {
                return Err(bad(
                    offset,
                    format!("macro row of epoch {epoch} disagrees with its domain rows"),
                ));
            }
            continue;
        }
        let domain: Domain = row[1].parse().map_err(|e: Error| bad(offset, e.to_string()))?;
        r.train_loss.set(domain, num(2)?);
        r.val_loss.set(domain, num(3)?);
        r.val_dice.set(domain, num(4)?);
    }
    if records.is_empty() {
        return Err(Error::Empty("curves".into()));
    }
    Ok(records)
}
