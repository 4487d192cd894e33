use dsnorm::aggregation::AggregationMethod;
use dsnorm::data::{generate_synthetic, load_dataset, split_loso, write_dataset, EegSample, SyntheticConfig};
use dsnorm::harness::{
    load_model, run_loso_on, save_model, train_fold, ArchitectureConfig, ExperimentConfig,
};
use dsnorm::normlayers::NormKind;
use dsnorm::numcore::{AdamConfig, Tensor};
use proptest::prelude::*;

fn small_data(domains: usize, seed: u64) -> dsnorm::data::Dataset {
    generate_synthetic(&SyntheticConfig {
        num_domains: domains,
        samples_per_domain_per_class: 4,
        channels: 2,
        timesteps: 32,
        sample_rate_hz: 32.0,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
    .0
}

fn small_config(norm: NormKind) -> ExperimentConfig {
    ExperimentConfig {
        norm,
        epochs: 2,
        batch_size: 4,
        optimizer: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        architecture: ArchitectureConfig {
            widths: Some(vec![4, 4, 8]),
            kernel_size: 3,
            ..ArchitectureConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn stack(samples: &[EegSample]) -> Tensor {
    let views: Vec<&Tensor> = samples.iter().map(|s| &s.signal).collect();
    Tensor::stack(&views).unwrap()
}

#[test]
fn dataset_survives_disk_roundtrip() {
    let data = small_data(3, 11);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&data, dir.path()).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.samples.len(), data.samples.len());
    for (a, b) in data.samples.iter().zip(&back.samples) {
        assert_eq!(a.subject, b.subject);
        assert_eq!(a.label, b.label);
        assert_eq!(a.signal.shape(), b.signal.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.signal), bits(&b.signal));
    }
}

#[test]
fn checkpoint_reproduces_branch_outputs() {
    let data = small_data(3, 5);
    let train: Vec<&EegSample> = data.samples.iter().collect();
    for norm in [NormKind::Dsbn, NormKind::Dson] {
        let trained = train_fold(&train, &small_config(norm), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dsnm");
        save_model(&trained.model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.domains(), trained.model.domains());
        for s in data.samples.iter().step_by(5) {
            let x = stack(std::slice::from_ref(s));
            let a = trained.model.forward_all_branches(&x).unwrap();
            let b = loaded.forward_all_branches(&x).unwrap();
            assert_eq!(a.logits(), b.logits(), "{norm:?}");
        }
    }
}

#[test]
fn loso_report_covers_every_subject_once() {
    let data = small_data(3, 2);
    let mut cfg = small_config(NormKind::Dsbn);
    cfg.aggregation = vec![AggregationMethod::AvgProb, AggregationMethod::SelectWasserstein];
    let report = run_loso_on(&data, &cfg).unwrap();
    let held: Vec<&str> = report.folds.iter().map(|f| f.held_out.as_str()).collect();
    assert_eq!(held, ["d00", "d01", "d02"]);
    for f in &report.folds {
        assert_eq!(f.train_domains.len(), 2);
        assert!(!f.train_domains.contains(&f.held_out));
        assert_eq!(f.loss_curve.len(), cfg.epochs);
        assert_eq!(f.methods.len(), 2);
    }
    assert_eq!(report.mean.len(), 2);
    for m in &report.mean {
        assert!((0.0..=1.0).contains(&m.accuracy), "{}", m.method);
        assert_eq!(m.folds, 3);
    }
}

#[test]
fn loso_is_deterministic_for_a_seed() {
    let data = small_data(2, 4);
    let cfg = small_config(NormKind::Ibn);
    let a = run_loso_on(&data, &cfg).unwrap();
    let b = run_loso_on(&data, &cfg).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loso_split_partitions_samples(subjects in prop::collection::vec(0usize..5, 2..40)) {
        prop_assume!(subjects.iter().collect::<std::collections::BTreeSet<_>>().len() >= 2);
        let samples: Vec<EegSample> = subjects
            .iter()
            .enumerate()
            .map(|(i, s)| EegSample {
                signal: Tensor::zeros(&[1, 4]),
                label: i % 2,
                subject: format!("s{s}"),
            })
            .collect();
        let folds = split_loso(&samples).unwrap();
        for f in &folds {
            prop_assert_eq!(f.train.len() + f.test.len(), samples.len());
            prop_assert!(f.test.iter().all(|s| s.subject == f.held_out));
            prop_assert!(f.train.iter().all(|s| s.subject != f.held_out));
        }
        let tested: usize = folds.iter().map(|f| f.test.len()).sum();
        prop_assert_eq!(tested, samples.len());
    }
}
