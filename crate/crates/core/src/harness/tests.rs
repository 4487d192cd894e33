use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_synthetic, split_loso, ClassTone, EegSample};
use crate::models::Route;

fn brute_auroc(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// Area under the empirical ROC curve by the trapezoid rule, sweeping the
/// threshold down through the distinct scores.
fn trapezoid_auroc(scores: &[f64], labels: &[usize]) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = labels.len() as f64 - p;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut prev_tpr, mut prev_fpr, mut area) = (0.0, 0.0, 0.0);
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 1).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 0).count() as f64;
        let (tpr, fpr) = (tp / p, fp / n);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    area
}

fn random_case(rng: &mut ChaCha8Rng, len: usize) -> (Vec<f64>, Vec<usize>) {
    loop {
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..len).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..2)).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

#[test]
fn symmetric_confusion() {
    let m = compute_metrics(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0], &[1, 0, 0, 1]).unwrap();
    assert_eq!(m.confusion, Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
    for v in [m.precision, m.recall, m.f1, m.accuracy] {
        assert!((v - 0.5).abs() < 1e-15);
    }
    assert!(m.flags.is_empty());
    assert_eq!(m.positive_class, "alert");
}

#[test]
fn zero_denominators_are_flagged() {
    let m = compute_metrics(&[0.1, 0.2], &[0, 0], &[1, 0]).unwrap();
    assert_eq!(m.precision, 0.0);
    assert_eq!(m.f1, 0.0);
    assert_eq!(m.flags, vec!["precision", "f1"]);
    let m = compute_metrics(&[0.1, 0.2], &[0, 0], &[0, 0]).unwrap();
    assert_eq!(m.auroc, 0.0);
    assert!(!m.auroc_defined());
    assert!(m.flags.contains(&"recall".to_string()));
    assert!(matches!(compute_metrics(&[], &[], &[]), Err(Error::Contract(_))));
    assert!(matches!(compute_metrics(&[0.1], &[0, 1], &[0]), Err(Error::Contract(_))));
}

#[test]
fn auroc_examples() {
    assert_eq!(compute_auroc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(compute_auroc(&[0.9, 0.8, 0.3, 0.2], &[0, 0, 1, 1]).unwrap(), 0.0);
    assert_eq!(compute_auroc(&[0.4; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    assert!(matches!(
        compute_auroc(&[0.1, 0.2], &[1, 1]),
        Err(Error::UndefinedMetric(_))
    ));
    assert!(matches!(
        compute_auroc(&[f64::NAN, 0.2], &[0, 1]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn auroc_matches_pair_count_and_trapezoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..300 {
        let len = rng.random_range(2..40);
        let (s, l) = random_case(&mut rng, len);
        let a = compute_auroc(&s, &l).unwrap();
        assert_eq!(a, brute_auroc(&s, &l));
        assert!((a - trapezoid_auroc(&s, &l)).abs() <= 1e-12);
    }
}

#[test]
fn accuracy_consistent_with_raw_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (s, l) = random_case(&mut rng, 25);
        let preds: Vec<usize> = s.iter().map(|&x| (x > 0.5) as usize).collect();
        let m = compute_metrics(&s, &preds, &l).unwrap();
        let raw = preds.iter().zip(&l).filter(|(p, y)| p == y).count() as f64 / l.len() as f64;
        assert_eq!(m.accuracy, raw);
        assert_eq!(m.confusion.total(), l.len());
    }
}

fn tiny(norm: NormKind, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        norm,
        epochs,
        batch_size: 4,
        optimizer: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        architecture: ArchitectureConfig {
            widths: Some(vec![4, 4, 8]),
            kernel_size: 3,
            stride: 2,
            dropout: 0.1,
            ..ArchitectureConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn tiny_data(domains: usize, per_class: usize, noise: f64, seed: u64) -> crate::data::Dataset {
    generate_synthetic(&SyntheticConfig {
        num_domains: domains,
        samples_per_domain_per_class: per_class,
        channels: 2,
        timesteps: 32,
        sample_rate_hz: 32.0,
        class_mean_offset: 1.0,
        class_tone: ClassTone {
            frequency_hz: 4.0,
            amplitude: 1.0,
        },
        noise_std: noise,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
    .0
}

fn refs(d: &crate::data::Dataset) -> Vec<&EegSample> {
    d.samples.iter().collect()
}

fn param_bits(m: &crate::models::Model) -> Vec<u64> {
    let mut v: Vec<u64> = m
        .params()
        .iter()
        .flat_map(|p| p.value.data().iter().map(|x| x.to_bits()))
        .collect();
    for l in m.norm_layers() {
        for s in l.states() {
            v.extend(s.running_mean.iter().chain(&s.running_var).map(|x| x.to_bits()));
        }
    }
    v
}

#[test]
fn one_epoch_smoke() {
    let d = tiny_data(1, 5, 1.0, 0);
    for norm in NormKind::ALL {
        let t = train_fold(&refs(&d), &tiny(norm, 1), 1).unwrap();
        assert_eq!(t.loss_curve.len(), 1);
        assert!(t.loss_curve[0].is_finite());
    }
    assert!(matches!(
        train_fold(&[], &tiny(NormKind::Bn, 1), 1),
        Err(Error::Configuration(_))
    ));
}

#[test]
fn training_is_deterministic() {
    let d = tiny_data(2, 6, 1.0, 1);
    let a = train_fold(&refs(&d), &tiny(NormKind::Dson, 3), 5).unwrap();
    let b = train_fold(&refs(&d), &tiny(NormKind::Dson, 3), 5).unwrap();
    assert_eq!(param_bits(&a.model), param_bits(&b.model));
    assert_eq!(a.loss_curve, b.loss_curve);
    let c = train_fold(&refs(&d), &tiny(NormKind::Dson, 3), 6).unwrap();
    assert_ne!(param_bits(&a.model), param_bits(&c.model));
}

#[test]
fn noiseless_data_is_fit() {
    let d = tiny_data(2, 8, 0.0, 2);
    let mut cfg = tiny(NormKind::Bn, 50);
    cfg.architecture.dropout = 0.0;
    let t = train_fold(&refs(&d), &cfg, 0).unwrap();
    // Minibatch losses with batch-4 BN are spiky, so judge the fit in eval mode.
    let views: Vec<&crate::numcore::Tensor> = d.samples.iter().map(|s| &s.signal).collect();
    let x = crate::numcore::Tensor::stack(&views).unwrap();
    let logits = t.model.logits(&x, Route::Shared).unwrap();
    let correct = logits
        .data()
        .chunks(2)
        .zip(&d.samples)
        .filter(|(row, s)| usize::from(row[1] > row[0]) == s.label)
        .count();
    assert_eq!(correct, d.samples.len());
}

#[test]
fn single_domain_dsbn_tracks_bn_bitwise() {
    let d = tiny_data(1, 8, 1.0, 3);
    let bn = train_fold(&refs(&d), &tiny(NormKind::Bn, 10), 9).unwrap();
    let ds = train_fold(&refs(&d), &tiny(NormKind::Dsbn, 10), 9).unwrap();
    assert_eq!(param_bits(&bn.model), param_bits(&ds.model));
    assert_eq!(bn.loss_curve, ds.loss_curve);
}

#[test]
fn batches_are_domain_homogeneous_and_round_robin() {
    use super::run::tests_support::schedule;
    let d = tiny_data(3, 5, 1.0, 4);
    let train = refs(&d);
    let batches = schedule(&train, true, 4, 0);
    assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), train.len());
    for (i, b) in batches.iter().enumerate() {
        let subj = &train[b[0]].subject;
        assert!(b.iter().all(|&j| &train[j].subject == subj));
        // 10 samples per domain in batches of 4: rounds of three domains.
        assert_eq!(subj, &format!("d{:02}", i % 3));
    }
    let mixed = schedule(&train, false, 4, 0);
    assert!(mixed.iter().any(|b| b.iter().any(|&j| train[j].subject != train[b[0]].subject)));
}

#[test]
fn single_branch_methods_agree() {
    let d = tiny_data(2, 6, 1.0, 5);
    let folds = split_loso(&d.samples).unwrap();
    let t = train_fold(&folds[0].train, &tiny(NormKind::Dsbn, 2), 1).unwrap();
    let methods: Vec<Inference> = [
        AggregationMethod::MaxLogit,
        AggregationMethod::MaxProb,
        AggregationMethod::AvgLogit,
        AggregationMethod::AvgProb,
        AggregationMethod::SelectWasserstein,
        AggregationMethod::SelectEuclidean,
    ]
    .into_iter()
    .map(Inference::Aggregate)
    .collect();
    let r = evaluate_fold(&t.model, &folds[0].test, &methods, &folds[0].held_out, vec![]).unwrap();
    for m in &r.methods[1..] {
        assert_eq!(m.metrics, r.methods[0].metrics, "{}", m.method);
    }
    let hist = &r.methods[4].selection_histogram;
    assert!(hist.iter().all(|layer| layer == &vec![folds[0].test.len()]));
}

#[test]
fn constant_alert_predictor() {
    let d = tiny_data(2, 5, 1.0, 6);
    let folds = split_loso(&d.samples).unwrap();
    let mut t = train_fold(&folds[0].train, &tiny(NormKind::Bn, 1), 1).unwrap();
    t.model.head_weight.value.data_mut().iter_mut().for_each(|w| *w = 0.0);
    t.model.head_bias.value.data_mut().copy_from_slice(&[-5.0, 5.0]);
    let r = evaluate_fold(&t.model, &folds[0].test, &[Inference::Plain], "d00", vec![]).unwrap();
    let m = &r.methods[0].metrics;
    assert_eq!(m.accuracy, 0.5);
    assert_eq!(m.recall, 1.0);
    assert_eq!(m.precision, 0.5);
    assert_eq!(m.auroc, 0.5);
}

#[test]
fn leakage_is_detected() {
    let d = tiny_data(3, 4, 1.0, 7);
    let folds = split_loso(&d.samples).unwrap();
    let f = &folds[1];
    let mut t = train_fold(&f.train, &tiny(NormKind::Dsbn, 1), 1).unwrap();
    let methods = [Inference::Aggregate(AggregationMethod::AvgProb)];
    assert!(evaluate_fold(&t.model, &f.test, &methods, &f.held_out, vec![]).is_ok());
    let mut ids = t.model.domains().to_vec();
    ids[0] = f.held_out.clone();
    t.model.set_domains(ids).unwrap();
    assert!(matches!(
        evaluate_fold(&t.model, &f.test, &methods, &f.held_out, vec![]),
        Err(Error::Leakage(_))
    ));
}

#[test]
fn loso_report_shape_and_means() {
    let d = tiny_data(3, 4, 1.0, 8);
    let mut cfg = tiny(NormKind::Dsbn, 2);
    cfg.aggregation = vec![AggregationMethod::AvgProb, AggregationMethod::SelectEuclidean];
    let r = run_loso_on(&d, &cfg).unwrap();
    assert_eq!(r.folds.len(), 3);
    assert_eq!(r.mean.len(), 2);
    let avg = &r.mean[0];
    assert_eq!(avg.method, "avg_prob");
    let folds: Vec<f64> = r.folds.iter().map(|f| f.methods[0].metrics.accuracy).collect();
    assert!((avg.accuracy - folds.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    let table = render_table(&r);
    assert!(table.contains("Accuracy  F1-score  Precision    Recall     AUROC"));
    assert!(table.contains("Branch selection counts"));
    let row = table.lines().find(|l| l.starts_with("avg_prob")).unwrap();
    assert_eq!(row.split_whitespace().count(), 6);
}

#[test]
fn reports_are_byte_stable() {
    let d = tiny_data(2, 3, 1.0, 9);
    let r = run_loso_on(&d, &tiny(NormKind::Bn, 1)).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = emit_report(&r, a.path()).unwrap();
    let fb = emit_report(&r, b.path()).unwrap();
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let again = run_loso_on(&d, &tiny(NormKind::Bn, 1)).unwrap();
    assert_eq!(render_csv(&r), render_csv(&again));
    let json = std::fs::read_to_string(a.path().join("results.json")).unwrap();
    let parsed: LosoReport = serde_json::from_str(&json).unwrap();
    assert_eq!(render_table(&parsed), render_table(&r));
}

#[test]
fn empty_method_list_gives_header_only_table() {
    let d = tiny_data(2, 3, 1.0, 9);
    let mut r = run_loso_on(&d, &tiny(NormKind::Bn, 1)).unwrap();
    r.mean.clear();
    r.folds.iter_mut().for_each(|f| f.methods.clear());
    let t = render_table(&r);
    let after = t.split("Mean over held-out subjects").nth(1).unwrap();
    let lines: Vec<&str> = after.lines().skip(1).take_while(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].starts_with("method"));
}

#[test]
fn unwritable_output_is_io_error() {
    let d = tiny_data(2, 3, 1.0, 9);
    let r = run_loso_on(&d, &tiny(NormKind::Bn, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    std::fs::write(&file, b"x").unwrap();
    assert!(matches!(emit_report(&r, &file.join("sub")), Err(Error::Io { .. })));
}

#[test]
fn fold_failure_names_the_subject() {
    let mut d = tiny_data(2, 3, 1.0, 9);
    // A malformed sample breaks both folds; the first fold in order is reported.
    d.samples[0].signal = crate::numcore::Tensor::zeros(&[2, 16]);
    match run_loso_on(&d, &tiny(NormKind::Bn, 1)) {
        Err(Error::Fold { subject, .. }) => assert_eq!(subject, "d00"),
        other => panic!("expected fold error, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip() {
    let d = tiny_data(2, 4, 1.0, 10);
    let t = train_fold(&refs(&d), &tiny(NormKind::Dson, 2), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.dsnm");
    save_model(&t.model, &p).unwrap();
    let back = load_model(&p).unwrap();
    assert_eq!(param_bits(&back), param_bits(&t.model));
    assert_eq!(back.domains(), t.model.domains());
    let x = d.samples[0].signal.reshape(vec![1, 2, 32]).unwrap();
    assert_eq!(
        back.logits(&x, Route::Branch(1)).unwrap(),
        t.model.logits(&x, Route::Branch(1)).unwrap()
    );
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_model(&p), Err(Error::Format(_))));
    std::fs::write(&p, b"nope").unwrap();
    assert!(matches!(load_model(&p), Err(Error::Format(_))));
}

#[test]
fn config_toml_round_trip() {
    let cfg = ExperimentConfig::desk();
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    let minimal = ExperimentConfig::parse("norm = \"ibn\"\nepochs = 3\n").unwrap();
    assert_eq!(minimal.norm, NormKind::Ibn);
    assert_eq!(minimal.batch_size, DEFAULT_BATCH_SIZE);
    assert!(matches!(
        ExperimentConfig::parse("epochz = 3\n"),
        Err(Error::Configuration(_))
    ));
    assert!(matches!(
        ExperimentConfig::parse("norm = \"gn\"\n"),
        Err(Error::Configuration(_))
    ));
}

#[test]
fn manifest_path_is_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("exp.toml");
    std::fs::write(&p, "[data]\nmanifest = \"ds/manifest.toml\"\n").unwrap();
    let cfg = ExperimentConfig::load(&p).unwrap();
    assert_eq!(cfg.data, DataSource::Manifest(dir.path().join("ds/manifest.toml")));
}

#[test]
fn inference_methods_per_norm() {
    let mut cfg = ExperimentConfig::default();
    cfg.norm = NormKind::Bn;
    assert_eq!(cfg.inference_methods().unwrap(), vec![Inference::Plain]);
    cfg.norm = NormKind::Dsbn;
    assert_eq!(cfg.inference_methods().unwrap().len(), 6);
    cfg.norm = NormKind::Dsin;
    assert_eq!(cfg.inference_methods().unwrap().len(), 4);
    cfg.aggregation = vec![AggregationMethod::SelectWasserstein];
    assert!(matches!(cfg.inference_methods(), Err(Error::Configuration(_))));
}
