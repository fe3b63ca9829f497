mod common;

use idsr::dataset::*;
use idsr::image::degrade;

fn cfg(ids: usize, per_id: usize) -> DataConfig {
    DataConfig {
        ids,
        per_id,
        ..DataConfig::default()
    }
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn same_identity_renders_are_closer() {
    let ds = Dataset::generate(&cfg(10, 10)).unwrap();
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for (i, a) in ds.samples.iter().enumerate() {
        for b in &ds.samples[i + 1..] {
            let d = mean_abs(a.hr.pixels(), b.hr.pixels());
            if a.label == b.label {
                intra.push(d);
            } else {
                inter.push(d);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(intra.len(), 10 * 45);
    assert!(mean(&intra) < mean(&inter), "{} vs {}", mean(&intra), mean(&inter));
}

#[test]
fn samples_satisfy_degradation_invariant() {
    let ds = Dataset::generate(&cfg(4, 5)).unwrap();
    for s in &ds.samples {
        assert_eq!(s.hr.dims(), (64, 64));
        assert_eq!(s.lr, degrade(&s.hr, 2.4, 8).unwrap());
        assert!(s.hr.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn render_is_a_pure_function() {
    let ids = generate_identities(3, 4).unwrap();
    let c = cfg(3, 1);
    assert_eq!(render_sample(&ids[1], 77, &c).unwrap(), render_sample(&ids[1], 77, &c).unwrap());
    assert_ne!(render_sample(&ids[1], 77, &c).unwrap(), render_sample(&ids[1], 78, &c).unwrap());
    assert_eq!(render_with(&ids[2], &Variation::NONE, &c).unwrap(), render_with(&ids[2], &Variation::NONE, &c).unwrap());
}

#[test]
fn generation_and_splits_are_reproducible() {
    let c = cfg(8, 2);
    assert_eq!(Dataset::generate(&c).unwrap(), Dataset::generate(&c).unwrap());
    let (a_train, a_test) = build_splits(&c, 0.5).unwrap();
    let (b_train, b_test) = build_splits(&c, 0.5).unwrap();
    assert_eq!((a_train.labels(), a_test.labels()), (b_train.labels(), b_test.labels()));
    let mut union: Vec<usize> = a_train.labels().into_iter().chain(a_test.labels()).collect();
    union.sort_unstable();
    assert_eq!(union, (0..8).collect::<Vec<_>>());
    let other = DataConfig { seed: 99, ..c };
    assert_ne!(Dataset::generate(&other).unwrap(), Dataset::generate(&c).unwrap());
    assert!(build_splits(&cfg(3, 1), 0.5).is_err());
}

#[test]
fn default_split_sizes() {
    let c = DataConfig {
        per_id: 1,
        hr_size: 16,
        ..DataConfig::default()
    };
    let (train, test) = build_splits(&c, 0.75).unwrap();
    assert_eq!(train.labels().len(), 24);
    assert_eq!(test.labels().len(), 8);
    assert!(train.labels().iter().all(|l| !test.labels().contains(l)));
}

#[test]
fn pair_labels_audit() {
    let ds = Dataset::generate(&DataConfig {
        hr_size: 16,
        ..cfg(5, 4)
    })
    .unwrap();
    for negatives in [None, Some(3)] {
        let pairs = make_verification_pairs(&ds, negatives, 3).unwrap();
        for p in &pairs {
            assert_ne!(p.probe, p.gallery);
            assert_eq!(p.same_identity, ds.samples[p.probe].label == ds.samples[p.gallery].label);
        }
        for probe in 0..ds.len() {
            let mine: Vec<_> = pairs.iter().filter(|p| p.probe == probe).collect();
            assert_eq!(mine.iter().filter(|p| p.same_identity).count(), 3);
            let neg = mine.iter().filter(|p| !p.same_identity).count();
            assert_eq!(neg, negatives.unwrap_or(16));
        }
    }
    assert_eq!(make_verification_pairs(&ds, Some(3), 3).unwrap(), make_verification_pairs(&ds, Some(3), 3).unwrap());
    assert!(make_verification_pairs(&ds, Some(17), 3).is_err());
}

#[test]
fn export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::generate(&cfg(3, 2)).unwrap();
    ds.export(dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    assert_eq!(manifest.lines().next().unwrap(), "0\thr/00000.pgm\tlr/00000.pgm");
    assert!(!manifest.contains('\r'));
    let back = Dataset::import(dir.path(), 2.4).unwrap();
    assert_eq!(back, ds);

    let err = Dataset::import(dir.path(), 1.0).unwrap_err().to_string();
    assert!(err.contains("blur sigma"), "{err}");

    std::fs::write(dir.path().join(MANIFEST), "0\thr/00000.pgm\n").unwrap();
    let err = Dataset::import(dir.path(), 2.4).unwrap_err().to_string();
    assert!(err.contains(":1:"), "{err}");
}
