use std::path::{Path, PathBuf};

use pntk::data::{self, LabeledSet, SplitSpec, Standardizer};
use pntk::linalg::Matrix;
use pntk::Error;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn idx_fixture_is_recovered_exactly() {
    let set = data::load_idx(&fixture("tiny-images.idx3"), &fixture("tiny-labels.idx1")).unwrap();
    assert_eq!(set.len(), 4);
    assert_eq!(set.input_dim(), 6);
    assert_eq!(set.num_classes(), 10);
    assert_eq!(set.labels(), &[7, 0, 9, 3]);
    for i in 0..4 {
        for k in 0..6 {
            let raw = (37 * i + 11 * k) % 256;
            assert_eq!(set.inputs().get(i, k), raw as f64 / 255.0);
        }
    }
    assert_eq!(set.inputs().get(3, 5), 166.0 / 255.0);
}

#[test]
fn idx_errors() {
    assert!(matches!(
        data::load_idx(&fixture("empty-images.idx3"), &fixture("empty-labels.idx1")),
        Err(Error::EmptySet)
    ));
    assert!(matches!(
        data::load_idx(&fixture("tiny-images.idx3"), &fixture("short-labels.idx1")),
        Err(Error::CountMismatch(_))
    ));
    assert!(matches!(
        data::load_idx(&fixture("tiny-labels.idx1"), &fixture("tiny-labels.idx1")),
        Err(Error::Format(_))
    ));
    let images = std::fs::read(fixture("tiny-images.idx3")).unwrap();
    let labels = std::fs::read(fixture("tiny-labels.idx1")).unwrap();
    assert!(matches!(
        data::parse_idx(&images[..30], &labels),
        Err(Error::Format(_))
    ));
}

#[test]
fn cifar_fixture_is_recovered_exactly() {
    let path = fixture("tiny.cifar");
    let set = data::load_cifar_binary(&[path.as_path()]).unwrap();
    assert_eq!(set.len(), 2);
    assert_eq!(set.input_dim(), 3072);
    assert_eq!(set.labels(), &[6, 2]);
    assert!(set.labels().iter().all(|&l| l < 10));
    for r in 0..2 {
        for k in [0, 1, 1023, 1024, 3071] {
            assert_eq!(set.inputs().get(r, k), ((r * 101 + k * 7) % 256) as f64 / 255.0);
        }
    }
    let bad = fixture("bad.cifar");
    assert!(matches!(
        data::load_cifar_binary(&[bad.as_path()]),
        Err(Error::Format(_))
    ));
}

#[test]
fn wide_separation_is_nearest_neighbour_separable() {
    let train = data::synth_clusters(4, 50, 2, 10.0, 1).unwrap();
    let test = data::synth_clusters(4, 50, 2, 10.0, 2).unwrap();
    let mut hits = 0;
    for i in 0..test.len() {
        let q = test.inputs().row(i);
        let nearest = (0..train.len())
            .min_by(|&a, &b| {
                let da: f64 = train.inputs().row(a).iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum();
                let db: f64 = train.inputs().row(b).iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        if train.labels()[nearest] == test.labels()[i] {
            hits += 1;
        }
    }
    assert!(hits as f64 / test.len() as f64 >= 0.99);
}

#[test]
fn stratified_split_of_balanced_set() {
    let set = data::synth_clusters(5, 40, 3, 2.0, 3).unwrap();
    let spec = SplitSpec {
        train_n: 100,
        test_n: 50,
        seed: 4,
        stratified: true,
    };
    let (train, test) = data::split(&set, &spec).unwrap();
    assert_eq!(train.class_counts(), vec![20; 5]);
    assert_eq!(test.class_counts(), vec![10; 5]);
    let (a, b) = data::split_indices(&set, &spec).unwrap();
    assert!(a.iter().all(|i| !b.contains(i)));
    assert_eq!(data::split_indices(&set, &spec).unwrap(), (a, b));
    assert!(matches!(
        data::split(&set, &SplitSpec { train_n: 150, test_n: 51, seed: 0, stratified: false }),
        Err(Error::InsufficientData(_))
    ));
}

#[test]
fn standardization_uses_train_statistics_and_keeps_labels() {
    let set = data::synth_clusters(3, 30, 4, 3.0, 5).unwrap();
    let (train, test) = data::split(
        &set,
        &SplitSpec {
            train_n: 60,
            test_n: 30,
            seed: 6,
            stratified: false,
        },
    )
    .unwrap();
    let stats = Standardizer::fit(&train).unwrap();
    let z = stats.apply(&train).unwrap();
    for j in 0..4 {
        let mean: f64 = (0..60).map(|i| z.inputs().get(i, j)).sum::<f64>() / 60.0;
        assert!(mean.abs() < 1e-12);
    }
    let zt = stats.apply(&test).unwrap();
    assert_eq!(zt.labels(), test.labels());
    let again = data::standardize(&z).unwrap();
    let diff = z
        .inputs()
        .as_slice()
        .iter()
        .zip(again.inputs().as_slice())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(diff <= 1e-12);
}

#[test]
fn invalid_labels_are_rejected() {
    assert!(matches!(
        LabeledSet::new(Matrix::zeros(2, 2), vec![0, 3], 3, ""),
        Err(Error::OutOfRange(_))
    ));
    assert!(matches!(
        LabeledSet::new(Matrix::zeros(2, 2), vec![0], 3, ""),
        Err(Error::CountMismatch(_))
    ));
}

#[test]
fn set_file_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.ntkd");
    let set = data::synth_clusters(3, 4, 5, 1.0, 9).unwrap();
    set.save(&path).unwrap();
    assert_eq!(&std::fs::read(&path).unwrap()[..4], b"NTKD");
    assert_eq!(LabeledSet::load(&path).unwrap(), set);
}

proptest! {
    #[test]
    fn set_format_round_trip_is_bit_identical(
        n in 1usize..12,
        d in 1usize..6,
        o in 1usize..5,
        seed in any::<u64>(),
        values in prop::collection::vec(-1e6f64..1e6, 72),
    ) {
        let x = Matrix::from_fn(n, d, |i, j| values[(i * d + j) % values.len()]);
        let labels = (0..n).map(|i| (seed as usize + i) % o).collect();
        let set = LabeledSet::new(x, labels, o, format!("seed {seed}")).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = LabeledSet::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &set);
        let bits: Vec<u64> = back.inputs().as_slice().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = set.inputs().as_slice().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, orig);
        prop_assert!(LabeledSet::read_from(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_deterministic(
        per_class in 2usize..20,
        seed in any::<u64>(),
        stratified in any::<bool>(),
    ) {
        let set = data::synth_clusters(3, per_class, 2, 1.0, seed).unwrap();
        let n = set.len();
        let spec = SplitSpec { train_n: n / 2, test_n: n / 3, seed, stratified };
        let (a, b) = data::split_indices(&set, &spec).unwrap();
        prop_assert_eq!(a.len(), n / 2);
        prop_assert_eq!(b.len(), n / 3);
        prop_assert!(a.iter().all(|i| !b.contains(i)));
        prop_assert_eq!(data::split_indices(&set, &spec).unwrap(), (a, b));
    }
}
