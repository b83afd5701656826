mod common;

use common::{brute_confusion, pairwise_auc, random_mask_scores, rng};
use proptest::prelude::*;
use uniseg::losses::Domain;
use uniseg::metrics::{
    confusion, dice, evaluate, iou, precision_recall_f1, roc_auc, ConfusionCounts, EvalConfig, Labeled, Predictor,
};
use uniseg::{Result, Tensor};

const N: usize = 256;

#[test]
fn hundred_random_pairs_match_pixel_loops() {
    let mut r = rng(21);
    for _ in 0..100 {
        let (truth, scores, pred) = random_mask_scores(&mut r, N);
        let c = confusion(&pred, &truth).unwrap();
        let (tp, fp, tn, fn_) = brute_confusion(&pred, &truth);
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (tp, fp, tn, fn_));

        let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
        let d = dice(&pred, &truth).unwrap();
        let j = iou(&pred, &truth).unwrap();
        let (p, rc, f1) = precision_recall_f1(&c);
        let pred_n = pred.iter().filter(|&&b| b).count() as f64;
        let truth_n = truth.iter().filter(|&&b| b).count() as f64;
        let inter = pred.iter().zip(&truth).filter(|(a, b)| **a && **b).count() as f64;
        let union = pred.iter().zip(&truth).filter(|(a, b)| **a || **b).count() as f64;
        assert_eq!(d, 2.0 * inter / (pred_n + truth_n));
        assert_eq!(j, inter / union);
        assert_eq!(p, tp / (tp + fp));
        assert_eq!(rc, tp / (tp + fn_));
        assert_eq!(f1, d);
        assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);

        let auc = roc_auc(&scores, &truth).unwrap();
        assert!((auc - pairwise_auc(&scores, &truth)).abs() < 1e-12);
    }
}

#[test]
fn hand_examples() {
    let mut pred = vec![false; 16];
    let mut truth = vec![false; 16];
    pred[..4].iter_mut().for_each(|b| *b = true);
    truth[..8].iter_mut().for_each(|b| *b = true);
    assert!((dice(&pred, &truth).unwrap() - 8.0 / 12.0).abs() < 1e-15);
    assert_eq!(iou(&pred, &truth).unwrap(), 0.5);

    let auc = roc_auc(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]).unwrap();
    assert!((auc - 0.75).abs() < 1e-15);
    assert_eq!(roc_auc(&[0.2, 0.9], &[false, true]).unwrap(), 1.0);
    assert_eq!(
        roc_auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(),
        0.5
    );
    assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());

    let disjoint_p = [true, false, false, false];
    let disjoint_t = [false, false, true, false];
    let c = confusion(&disjoint_p, &disjoint_t).unwrap();
    assert_eq!(dice(&disjoint_p, &disjoint_t).unwrap(), 0.0);
    assert_eq!(precision_recall_f1(&c), (0.0, 0.0, 0.0));
}

#[test]
fn degenerate_conventions() {
    let empty = [false; 5];
    let some = [true, false, false, false, false];
    assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
    assert_eq!(
        precision_recall_f1(&confusion(&empty, &empty).unwrap()),
        (1.0, 1.0, 1.0)
    );
    assert_eq!(dice(&empty, &some).unwrap(), 0.0);
    assert_eq!(dice(&some, &empty).unwrap(), 0.0);
    let (p, r, f) = precision_recall_f1(&confusion(&empty, &some).unwrap());
    assert_eq!((p, r, f), (0.0, 0.0, 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_ignores_monotone_transforms(seed in any::<u64>(), k in 0.1f64..5.0, shift in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (truth, scores, _) = random_mask_scores(&mut r, 64);
        prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
        let mapped: Vec<f64> = scores.iter().map(|&s| (k * s + shift).exp()).collect();
        prop_assert_eq!(roc_auc(&scores, &truth).unwrap(), roc_auc(&mapped, &truth).unwrap());
    }

    #[test]
    fn f1_equals_dice_and_counts_add_up(bits in prop::collection::vec(any::<(bool, bool)>(), 1..200)) {
        let (pred, truth): (Vec<bool>, Vec<bool>) = bits.into_iter().unzip();
        let c = confusion(&pred, &truth).unwrap();
        prop_assert_eq!(c.total(), pred.len() as u64);
        prop_assert_eq!(precision_recall_f1(&c).2, dice(&pred, &truth).unwrap());
        let j = iou(&pred, &truth).unwrap();
        prop_assert!((dice(&pred, &truth).unwrap() - 2.0 * j / (1.0 + j)).abs() < 1e-12);
    }
}

struct Item {
    image: Tensor,
    mask: Tensor,
    domain: Domain,
}

impl Labeled for Item {
    fn image(&self) -> &Tensor {
        &self.image
    }
    fn mask(&self) -> &Tensor {
        &self.mask
    }
    fn domain(&self) -> Domain {
        self.domain
    }
}

/// Returns channel 0 of the input as the probability map.
struct FirstChannel;

impl Predictor for FirstChannel {
    fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = images.dims4("predict")?;
        let plane = h * w;
        let data = (0..n)
            .flat_map(|s| images.data()[s * c * plane..s * c * plane + plane].to_vec())
            .collect();
        Tensor::new([n, 1, h, w], data)
    }
}

fn item(probs: [f64; 4], mask: [f64; 4], domain: Domain) -> Item {
    Item {
        image: Tensor::new([1, 2, 2], probs.to_vec()).unwrap(),
        mask: Tensor::new([1, 2, 2], mask.to_vec()).unwrap(),
        domain,
    }
}

#[test]
fn four_sample_report_matches_hand_counts() {
    let items = [
        item([0.9, 0.2, 0.6, 0.1], [1.0, 0.0, 1.0, 1.0], Domain::Mri),
        item([0.5, 0.7, 0.3, 0.0], [0.0, 1.0, 0.0, 0.0], Domain::Mri),
        item([0.8, 0.9, 0.4, 0.2], [1.0, 0.0, 0.0, 0.0], Domain::Ct),
        item([0.1, 0.3, 0.2, 0.6], [0.0, 0.0, 1.0, 0.0], Domain::Ct),
    ];
    let config = EvalConfig {
        auc_sample_rate: 1.0,
        ..EvalConfig::default()
    };
    let report = evaluate(&FirstChannel, &items, &config).unwrap();
    // MRI: pred (>0.5) 1,0,1,0 | 0,1,0,0 vs truth 1,0,1,1 | 0,1,0,0 -> tp 3 fp 0 fn 1 tn 4
    let mri = report.domain(Domain::Mri).unwrap();
    assert_eq!(
        mri.counts,
        ConfusionCounts {
            tp: 3,
            fp: 0,
            tn: 4,
            fn_: 1
        }
    );
    assert!((mri.metrics.dice - 6.0 / 7.0).abs() < 1e-9);
    assert!((mri.metrics.iou - 0.75).abs() < 1e-9);
    assert!((mri.metrics.precision - 1.0).abs() < 1e-9);
    assert!((mri.metrics.recall - 0.75).abs() < 1e-9);
    // MRI AUC: positives {0.9, 0.6, 0.1, 0.7}, negatives {0.2, 0.5, 0.3, 0.0}:
    // 0.9, 0.6 and 0.7 beat all four, 0.1 beats only 0.0 -> 13/16
    assert!((mri.metrics.auc - 13.0 / 16.0).abs() < 1e-9);
    // CT: pred 1,1,0,0 | 0,0,0,1 vs truth 1,0,0,0 | 0,0,1,0 -> tp 1 fp 2 fn 1 tn 4
    let ct = report.domain(Domain::Ct).unwrap();
    assert_eq!(
        ct.counts,
        ConfusionCounts {
            tp: 1,
            fp: 2,
            tn: 4,
            fn_: 1
        }
    );
    assert!((ct.metrics.dice - 0.4).abs() < 1e-9);
    assert!((ct.metrics.iou - 0.25).abs() < 1e-9);
    // CT AUC: positives {0.8, 0.2}; negatives {0.9, 0.4, 0.2, 0.1, 0.3, 0.6}:
    // 0.8 beats 5, 0.2 beats 1 and ties 1 -> 6.5 / 12
    assert!((ct.metrics.auc - 6.5 / 12.0).abs() < 1e-9);
    assert!((report.macro_avg.dice - (6.0 / 7.0 + 0.4) / 2.0).abs() < 1e-15);
    assert!(report.missing.is_empty());

    let csv = report.to_csv();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], "dataset,dice,iou,precision,recall,f1,auc,tp,fp,tn,fn");
    assert!(rows[1].starts_with("MRI,") && rows[2].starts_with("CT,") && rows[3].starts_with("macro,"));
}

#[test]
fn exact_and_constant_models() {
    let items = [
        item([1.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 1.0], Domain::Mri),
        item([0.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], Domain::Ct),
    ];
    let report = evaluate(&FirstChannel, &items, &EvalConfig::default()).unwrap();
    assert_eq!(report.macro_avg.dice, 1.0);

    let halves = [item([0.5; 4], [1.0, 0.0, 0.0, 1.0], Domain::Mri)];
    let report = evaluate(&FirstChannel, &halves, &EvalConfig::default()).unwrap();
    assert_eq!(report.domain(Domain::Mri).unwrap().metrics.recall, 0.0);
    assert_eq!(report.missing, vec![Domain::Ct]);
    let m = report.macro_avg;
    for v in [m.dice, m.iou, m.precision, m.recall, m.f1] {
        assert!((0.0..=1.0).contains(&v));
    }
}
