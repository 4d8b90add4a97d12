use std::collections::HashMap;

use cfaudit_core::augtrain::{make_targets, LabelingScheme, TrainSource};
use cfaudit_core::cohort::{apply_inclusion_filter, LabeledScan, ScanRecord, Sex, View};
use cfaudit_core::exec::Exec;
use cfaudit_core::findings::{read_findings, study_findings, Cohort, SYNTHETIC_FINDINGS};
use cfaudit_core::identity::{control_pairs, pfid, Pair, PairKind};
use cfaudit_core::labels::{LabelValue, LabelVector};
use cfaudit_core::matrix::CooccurrenceMatrix;
use cfaudit_core::nn::{batch_loss_and_grad, ConvArch, ConvNet};
use cfaudit_core::reader::{compute_read_cooccurrence, ReadLabel, ReadRecord, UnsurePolicy};
use cfaudit_core::stats::{iqr, median, quantile, roc_auc};
use proptest::collection::vec;
use proptest::prelude::*;

fn scan(i: usize, view: View, age: f64) -> LabeledScan {
    LabeledScan {
        scan: ScanRecord {
            scan_id: format!("s{i}"),
            patient_id: format!("p{}", i / 3),
            cohort: Cohort::Synthetic,
            view,
            age_years: age,
            sex: Sex::F,
            image_path: format!("{i}.png"),
            study_date: None,
        },
        labels: LabelVector {
            values: vec![LabelValue::Absent; SYNTHETIC_FINDINGS.len()],
        },
    }
}

fn label() -> impl Strategy<Value = ReadLabel> {
    prop_oneof![Just(ReadLabel::Absent), Just(ReadLabel::Present), Just(ReadLabel::Unsure)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_flips_with_labels_and_scores(data in vec((0u8..12, any::<bool>()), 2..80)) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 12.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = roc_auc(&scores, &labels).unwrap();
        match a {
            None => prop_assert!(labels.iter().all(|l| *l) || labels.iter().all(|l| !*l)),
            Some(a) => {
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!((roc_auc(&scores, &flipped).unwrap().unwrap() - (1.0 - a)).abs() < 1e-12);
                prop_assert!((roc_auc(&negated, &labels).unwrap().unwrap() - (1.0 - a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quartiles_are_ordered(xs in vec(-1e3f64..1e3, 1..100)) {
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (q1, m, q3) = (quantile(&xs, 0.25).unwrap(), median(&xs).unwrap(), quantile(&xs, 0.75).unwrap());
        prop_assert!(lo <= q1 && q1 <= m && m <= q3 && q3 <= hi);
        prop_assert!(iqr(&xs).unwrap() >= 0.0);
    }

    #[test]
    fn pfid_is_a_squared_metric(a in vec(-10.0f64..10.0, 2..64), shift in vec(-1.0f64..1.0, 64)) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let d = pfid(&a, &b).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, pfid(&b, &a).unwrap());
        prop_assert_eq!(pfid(&a, &a).unwrap(), 0.0);
        prop_assert!(pfid(&a, &b[..a.len() - 1]).is_err());
    }

    #[test]
    fn exec_modes_agree(xs in vec(any::<i64>(), 0..500)) {
        let f = |x: &i64| x.wrapping_mul(31).rotate_left(7);
        prop_assert_eq!(Exec::Parallel.map(&xs, f), Exec::Sequential.map(&xs, f));
        let g = |i: usize| i * i;
        prop_assert_eq!(Exec::Parallel.map_range(xs.len(), g), Exec::Sequential.map_range(xs.len(), g));
    }

    #[test]
    fn batch_gradient_is_bitwise_identical_across_modes(
        seed in 0u64..1000,
        pixels in vec(0.0f32..1.0, 64 * 5),
        targets in vec(prop_oneof![Just(None), (0.0f32..1.0).prop_map(Some)], 3 * 5),
    ) {
        let net = ConvNet::new(ConvArch { input_size: 8, channels: vec![2, 3], outputs: 3 }, seed);
        let images: Vec<&[f32]> = pixels.chunks(64).collect();
        let t: Vec<&[Option<f32>]> = targets.chunks(3).collect();
        let (la, ga, ca) = batch_loss_and_grad(&net, &images, &t, Exec::Parallel);
        let (lb, gb, cb) = batch_loss_and_grad(&net, &images, &t, Exec::Sequential);
        prop_assert_eq!(la.to_bits(), lb.to_bits());
        prop_assert_eq!(ca, cb);
        prop_assert!(ga.iter().zip(&gb).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn counterfactual_targets_mark_the_prompt(p in 0usize..6) {
        let findings = study_findings();
        let prompted = findings[p].clone();
        for scheme in [LabelingScheme::OffTargetAbsent, LabelingScheme::OffTargetMasked] {
            let t = make_targets(&TrainSource::Counterfactual { prompted: prompted.clone() }, &findings, scheme, None).unwrap();
            for (i, v) in t.values.iter().enumerate() {
                let want = match (i == p, scheme) {
                    (true, _) => LabelValue::Present,
                    (false, LabelingScheme::OffTargetAbsent) => LabelValue::Absent,
                    _ => LabelValue::Masked,
                };
                prop_assert_eq!(*v, want);
            }
        }
        let base = make_targets(&TrainSource::SyntheticBaseline, &findings, LabelingScheme::OffTargetMasked, None).unwrap();
        prop_assert!(base.values.iter().all(|v| *v == LabelValue::Absent));
        let source = TrainSource::Counterfactual { prompted };
        let unset = make_targets(&source, &findings, LabelingScheme::OffTargetCooccurrence, None);
        prop_assert!(unset.is_err());
    }

    #[test]
    fn inclusion_filter_is_idempotent(rows in vec((0u8..4, 0.0f64..100.0), 0..60)) {
        let views = [View::Pa, View::Ap, View::Other, View::Pa];
        let scans: Vec<LabeledScan> = rows.iter().enumerate().map(|(i, (v, a))| scan(i, views[*v as usize], *a)).collect();
        let (once, r1) = apply_inclusion_filter(&scans, Cohort::Nih);
        let (twice, r2) = apply_inclusion_filter(&once, Cohort::Nih);
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(r1.input, r1.kept + r1.removed_view + r1.removed_age);
        prop_assert_eq!(r2.kept, r1.kept);
        prop_assert!(once.iter().all(|s| s.scan.view == View::Pa && s.scan.age_years >= 18.0));
    }

    #[test]
    fn read_cooccurrence_cells_are_ordered_by_policy(
        reads in vec((0usize..8, vec(label(), 8)), 1..120),
    ) {
        let keys = read_findings();
        let mut prompts = HashMap::new();
        let records: Vec<ReadRecord> = reads.iter().enumerate().map(|(i, (p, labels))| {
            prompts.insert(format!("o{i}"), keys[*p].clone());
            ReadRecord {
                reader_id: "r".into(),
                output_id: format!("o{i}"),
                labels: labels.clone(),
                notes: String::new(),
                artificial_flag: None,
                extra_anomaly_flag: None,
            }
        }).collect();
        let lo = compute_read_cooccurrence(&records, &prompts, UnsurePolicy::AsAbsent).unwrap();
        let hi = compute_read_cooccurrence(&records, &prompts, UnsurePolicy::AsPresent).unwrap();
        let ex = compute_read_cooccurrence(&records, &prompts, UnsurePolicy::Exclude).unwrap();
        prop_assert_eq!(lo.row_counts.iter().sum::<usize>(), records.len());
        for r in 0..8 {
            for c in 0..8 {
                let (a, b, e) = (lo.fractions[r][c], hi.fractions[r][c], ex.fractions[r][c]);
                if lo.row_counts[r] == 0 {
                    prop_assert!(a.is_nan() && b.is_nan());
                    continue;
                }
                prop_assert!((0.0..=1.0).contains(&a) && a <= b);
                if !e.is_nan() {
                    prop_assert!(a <= e && e <= b);
                }
            }
        }
        let mut buf = vec![];
        lo.write_csv(&mut buf).unwrap();
        let back = CooccurrenceMatrix::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.row_counts, lo.row_counts);
        for (x, y) in back.fractions.iter().flatten().zip(lo.fractions.iter().flatten()) {
            prop_assert!(x == y || (x.is_nan() && y.is_nan()));
        }
    }

    #[test]
    fn control_pairs_never_match_a_patient_to_itself(n in 2usize..40, seed in any::<u64>()) {
        let model: Vec<Pair> = (0..n).map(|i| Pair {
            kind: PairKind::Model,
            condition: "edema".into(),
            baseline_id: format!("b{i}"),
            baseline_patient: format!("p{i}"),
            baseline_path: format!("b{i}.png"),
            comparison_id: format!("e{i}"),
            comparison_patient: format!("p{i}"),
            comparison_path: format!("e{i}.png"),
        }).collect();
        let control = control_pairs(&model, seed);
        prop_assert_eq!(control.len(), n);
        prop_assert!(control.iter().all(|p| p.baseline_patient != p.comparison_patient && p.kind == PairKind::Control));
        let mut used: Vec<&str> = control.iter().map(|p| p.comparison_id.as_str()).collect();
        used.sort();
        let mut all: Vec<&str> = model.iter().map(|p| p.comparison_id.as_str()).collect();
        all.sort();
        prop_assert_eq!(used, all);
    }
}
