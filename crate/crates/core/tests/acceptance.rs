//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::{brute_confusion, grad_cases, pairwise_auc, random_mask_scores, rng};
use rand::Rng;
use uniseg::data::augment::AugmentConfig;
use uniseg::data::phantom::{generate_range, PhantomSpec};
use uniseg::data::{balanced_batches, Sample};
use uniseg::losses::{focal_tversky_loss, tversky_index, tversky_loss, Domain, LossParams};
use uniseg::metrics::{confusion, dice, iou, precision_recall_f1, roc_auc};
use uniseg::network::{count_macs, count_parameters};
use uniseg::optim::{one_cycle_lr, AdamW, AdamWConfig, OneCycleSchedule};
use uniseg::trainer::{parse_curves, select_best, train, validate, EpochRecord, PerDomain, TrainConfig, TrainData};
use uniseg::{AttentionUNet, ModelConfig, Tensor};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn parameter_anchor() -> Verdict {
    let n = count_parameters(&ModelConfig::default());
    let dev = n as f64 / 1.89e6 - 1.0;
    check(
        n == 1_884_099 && dev.abs() <= 0.05,
        format!("{n} parameters, {:+.2}% from 1.89e6", 100.0 * dev),
    )
}

fn compute_anchor() -> Verdict {
    let macs = count_macs(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let dev = macs as f64 / 7.3e9 - 1.0;
    check(
        dev.abs() <= 0.10,
        format!("{macs} multiply-adds at 128x128, {:+.2}% from 7.3e9", 100.0 * dev),
    )
}

fn gradient_suite() -> Verdict {
    let cases = grad_cases::all();
    let failed: Vec<String> = cases
        .iter()
        .filter(|(_, r)| !r.ok())
        .map(|(name, r)| format!("{name} (max rel {:.1e})", r.max_rel))
        .collect();
    let checked: usize = cases.iter().map(|(_, r)| r.checked).sum();
    let worst = cases.iter().map(|(_, r)| r.max_rel).fold(0.0, f64::max);
    if failed.is_empty() {
        Ok(format!(
            "{} cases, {checked} coordinates, worst rel error {worst:.1e}",
            cases.len()
        ))
    } else {
        Err(format!("failed: {}", failed.join(", ")))
    }
}

fn loss_identities() -> Verdict {
    let mut r = rng(40);
    let mut worst_dice: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(1..256);
        let p: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let g: Vec<f64> = (0..n).map(|_| r.random_bool(0.3) as u8 as f64).collect();
        let (alpha, beta) = (r.random(), r.random());
        let params = LossParams::new(alpha, beta, 1.0);
        let focal = focal_tversky_loss(&p, &g, &params).map_err(|e| e.to_string())?;
        let plain = tversky_loss(&p, &g, &params).map_err(|e| e.to_string())?;
        if focal.to_bits() != plain.to_bits() {
            return Err(format!("gamma 1 gives {focal:e}, plain loss {plain:e}"));
        }
        let ti = tversky_index(&p, &g, &params).map_err(|e| e.to_string())?;
        if !(ti > 0.0 && ti <= 1.0) {
            return Err(format!("TI {ti} outside (0, 1]"));
        }
        let sym = LossParams {
            epsilon: f64::MIN_POSITIVE,
            ..LossParams::new(0.5, 0.5, 1.0)
        };
        let (sp, sg): (f64, f64) = (p.iter().sum(), g.iter().sum());
        let spg: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        let soft_dice = 2.0 * spg / (sp + sg);
        let ti = tversky_index(&p, &g, &sym).map_err(|e| e.to_string())?;
        worst_dice = worst_dice.max((ti - soft_dice).abs());
    }
    check(
        worst_dice < 1e-9,
        format!("100 inputs, gamma-1 bitwise equal, |TI - soft dice| <= {worst_dice:.1e}"),
    )
}

fn metric_oracles() -> Verdict {
    let mut r = rng(50);
    let mut worst_auc: f64 = 0.0;
    for k in 0..100 {
        let (truth, scores, pred) = random_mask_scores(&mut r, 256);
        let c = confusion(&pred, &truth).map_err(|e| e.to_string())?;
        let (tp, fp, tn, fn_) = brute_confusion(&pred, &truth);
        let (ftp, ffp, ffn) = (tp as f64, fp as f64, fn_ as f64);
        let d = dice(&pred, &truth).map_err(|e| e.to_string())?;
        let j = iou(&pred, &truth).map_err(|e| e.to_string())?;
        let (p, rc, f1) = precision_recall_f1(&c);
        let exact = (c.tp, c.fp, c.tn, c.fn_) == (tp, fp, tn, fn_)
            && d == 2.0 * ftp / (2.0 * ftp + ffp + ffn)
            && j == ftp / (ftp + ffp + ffn)
            && p == ftp / (ftp + ffp)
            && rc == ftp / (ftp + ffn)
            && f1 == d
            && (d - 2.0 * j / (1.0 + j)).abs() < 1e-12;
        if !exact {
            return Err(format!("pair {k} disagrees with the pixel loop"));
        }
        let auc = roc_auc(&scores, &truth).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((auc - pairwise_auc(&scores, &truth)).abs());
    }
    check(
        worst_auc < 1e-12,
        format!("100 pairs exact, |AUC - pairwise| <= {worst_auc:.1e}"),
    )
}

fn schedule_and_optimizer() -> Verdict {
    let s = OneCycleSchedule::new(3e-4, 10_000);
    let lrs: Vec<f64> = (0..10_000)
        .map(|t| one_cycle_lr(&s, t))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let peak = s.peak_step();
    let unimodal = lrs[..=peak].windows(2).all(|w| w[0] <= w[1]) && lrs[peak..].windows(2).all(|w| w[0] >= w[1]);
    let max = lrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let step = |w: f64, g: f64, lr: f64, wd: f64| -> f64 {
        let mut p = Tensor::new([1], vec![w]).unwrap();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr,
                weight_decay: wd,
                ..AdamWConfig::default()
            },
            [&p],
        );
        opt.step([("w", &mut p)], &[Tensor::new([1], vec![g]).unwrap()], lr)
            .unwrap();
        p.data()[0]
    };
    let hand = [
        (step(0.37, 0.0, 0.1, 0.0), 0.37),
        (step(1.0, 0.0, 0.1, 0.01), 0.999),
        (step(1.0, 1.0, 0.1, 0.01), 1.0 - 0.1 / (1.0 + 1e-8) - 0.001),
    ];
    let worst = hand.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(
        max == 3e-4 && lrs[peak] == 3e-4 && unimodal && worst < 1e-12,
        format!("peak {max:e} at step {peak}, unimodal {unimodal}, AdamW worst error {worst:.1e}"),
    )
}

fn batching() -> Verdict {
    let spec = PhantomSpec::new(32, 70);
    let mri = generate_range(&spec, Domain::Mri, 0, 30).map_err(|e| e.to_string())?;
    let ct = generate_range(&spec, Domain::Ct, 0, 18).map_err(|e| e.to_string())?;
    let batches = balanced_batches(&mri, &ct, 8, &mut rng(71)).map_err(|e| e.to_string())?;
    let bad = batches
        .iter()
        .filter(|b| b.iter().filter(|i| i.domain == Domain::Mri).count() != 4 || b.len() != 8)
        .count();
    check(
        bad == 0 && batches.len() == 8,
        format!("{} batches over 30 MRI + 18 CT, {bad} unbalanced", batches.len()),
    )
}

struct OverfitRun {
    curves: Vec<u8>,
    checkpoint: Vec<u8>,
    train_macro: f64,
    held_out_macro: f64,
    elapsed: Duration,
    records: Vec<EpochRecord>,
}

struct Splits {
    train: TrainData,
    mri_test: Vec<Sample>,
    ct_test: Vec<Sample>,
}

/// 8 + 8 training samples at 64x64, 8 + 8 for checkpoint selection, and
/// 8 + 8 never seen during training or selection.
fn overfit_splits() -> Splits {
    let spec = PhantomSpec::new(64, 7);
    let mri = generate_range(&spec, Domain::Mri, 0, 24).unwrap();
    let ct = generate_range(&spec, Domain::Ct, 0, 24).unwrap();
    Splits {
        train: TrainData {
            mri_train: mri[..8].to_vec(),
            ct_train: ct[..8].to_vec(),
            mri_val: mri[8..16].to_vec(),
            ct_val: ct[8..16].to_vec(),
        },
        mri_test: mri[16..].to_vec(),
        ct_test: ct[16..].to_vec(),
    }
}

fn macro_dice(model: &AttentionUNet, mri: &[Sample], ct: &[Sample], config: &TrainConfig) -> f64 {
    let score = |s: &[Sample], d: Domain| validate(model, s, &config.losses.get(d), 8).unwrap().dice;
    PerDomain {
        mri: score(mri, Domain::Mri),
        ct: score(ct, Domain::Ct),
    }
    .mean()
}

fn overfit_once(splits: &Splits, dir: &Path) -> OverfitRun {
    let config = TrainConfig {
        pretrain_epochs: 5,
        joint_epochs: 200,
        lr: 1e-3,
        augment: AugmentConfig::none(),
        seed: 1,
        image_size: 64,
        checkpoint_dir: Some(dir.to_path_buf()),
        curves_path: Some(dir.join("curves.csv")),
        ..TrainConfig::default()
    };
    let model_config = ModelConfig {
        input_size: 64,
        ..ModelConfig::with_stages(vec![16, 32])
    };
    let mut model = AttentionUNet::new(model_config.clone(), &mut rng(1)).unwrap();
    let start = Instant::now();
    let outcome = train(&mut model, &splits.train, &config).unwrap();
    let elapsed = start.elapsed();
    let best = AttentionUNet::from_params(model_config, outcome.best).unwrap();
    let data = &splits.train;
    OverfitRun {
        curves: std::fs::read(dir.join("curves.csv")).unwrap(),
        checkpoint: std::fs::read(dir.join("best.ckpt")).unwrap(),
        train_macro: macro_dice(&best, &data.mri_train, &data.ct_train, &config),
        held_out_macro: macro_dice(&best, &splits.mri_test, &splits.ct_test, &config),
        elapsed,
        records: outcome.records,
    }
}

fn overfit(run: &OverfitRun) -> Verdict {
    let parsed = parse_curves(std::str::from_utf8(&run.curves).unwrap()).map_err(|e| e.to_string())?;
    let (first, last) = (&parsed[0], parsed.last().unwrap());
    let ratio = PerDomain {
        mri: last.train_loss.mri / first.train_loss.mri,
        ct: last.train_loss.ct / first.train_loss.ct,
    };
    let detail = format!(
        "train macro dice {:.3}, held-out {:.3}, loss ratio MRI {:.3} CT {:.3}, {:.0} s",
        run.train_macro,
        run.held_out_macro,
        ratio.mri,
        ratio.ct,
        run.elapsed.as_secs_f64()
    );
    check(
        run.train_macro >= 0.95
            && run.held_out_macro >= 0.80
            && ratio.mri < 0.5
            && ratio.ct < 0.5
            && parsed == run.records
            && run.elapsed < Duration::from_secs(15 * 60),
        detail,
    )
}

fn determinism(a: &OverfitRun, b: &OverfitRun) -> Verdict {
    check(
        a.curves == b.curves && a.checkpoint == b.checkpoint,
        format!(
            "curves {} bytes {}, checkpoint {} bytes {}",
            a.curves.len(),
            if a.curves == b.curves { "identical" } else { "differ" },
            a.checkpoint.len(),
            if a.checkpoint == b.checkpoint {
                "identical"
            } else {
                "differ"
            },
        ),
    )
}

fn record(epoch: usize, mri: f64, ct: f64) -> EpochRecord {
    let val_dice = PerDomain { mri, ct };
    EpochRecord {
        epoch,
        train_loss: PerDomain::default(),
        val_loss: PerDomain::default(),
        val_dice,
        macro_dice: val_dice.mean(),
        lr: 0.0,
    }
}

fn checkpoint_selection() -> Verdict {
    let records = [record(1, 0.8, 0.5), record(2, 0.7, 0.7), record(3, 0.68, 0.68)];
    let chosen = select_best(&records).map_err(|e| e.to_string())?;
    let tie = select_best(&[record(1, 0.7, 0.6), record(2, 0.6, 0.7)]).map_err(|e| e.to_string())?;
    check(
        chosen == 2 && tie == 1,
        format!("macro [0.65, 0.70, 0.68] selects epoch {chosen}, tie selects epoch {tie}"),
    )
}

fn report(failures: &mut usize, number: usize, name: &str, verdict: Verdict) {
    let (tag, detail) = match verdict {
        Ok(d) => ("PASS", d),
        Err(d) => {
            *failures += 1;
            ("FAIL", d)
        }
    };
    println!("criterion {number:>2} {tag} {name}: {detail}");
}

fn main() {
    let mut failures = 0;
    report(&mut failures, 1, "parameter anchor", parameter_anchor());
    report(&mut failures, 2, "compute anchor", compute_anchor());
    report(&mut failures, 3, "gradient suite", gradient_suite());
    report(&mut failures, 4, "loss identities", loss_identities());
    report(&mut failures, 5, "metric oracles", metric_oracles());
    report(&mut failures, 6, "schedule and optimizer", schedule_and_optimizer());
    report(&mut failures, 7, "balanced batching", batching());

    let splits = overfit_splits();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let first = overfit_once(&splits, dirs[0].path());
    report(&mut failures, 8, "end-to-end overfit", overfit(&first));
    let second = overfit_once(&splits, dirs[1].path());
    report(&mut failures, 9, "determinism", determinism(&first, &second));
    report(&mut failures, 10, "checkpoint selection", checkpoint_selection());

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
