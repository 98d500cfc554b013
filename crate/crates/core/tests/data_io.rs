use std::path::Path;

use mbkd::data::{
    augment, decode_cifar, encode_cifar, epoch_batches, load_cifar, sequential_batches, synthetic_dataset,
    AugmentPlan, CifarVariant, Dataset, SyntheticSpec, AUGMENT_PAD, CIFAR_PIXELS,
};
use mbkd::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn record(seed: usize) -> [u8; CIFAR_PIXELS] {
    let mut p = [0u8; CIFAR_PIXELS];
    for (i, v) in p.iter_mut().enumerate() {
        *v = ((i * 13 + seed * 57) % 256) as u8;
    }
    p
}

fn write_cifar10(dir: &Path, per_file: usize) -> Vec<Vec<u8>> {
    let v = CifarVariant::Cifar10;
    let mut files = Vec::new();
    for (f, name) in v.train_files().iter().chain(&v.test_files()).enumerate() {
        let pixels: Vec<_> = (0..per_file).map(|r| record(f * per_file + r)).collect();
        let labels: Vec<u8> = (0..per_file).map(|r| ((f + r) % 10) as u8).collect();
        let bytes = encode_cifar(&pixels, &labels, v);
        std::fs::write(dir.join(name), &bytes).unwrap();
        files.push(bytes);
    }
    files
}

#[test]
fn cifar10_directory_loads_in_file_order() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_cifar10(dir.path(), 3);
    let (train, test) = load_cifar(dir.path(), CifarVariant::Cifar10).unwrap();
    assert_eq!(train.len(), 15);
    assert_eq!(test.len(), 3);
    assert_eq!(train.image_shape(), [3, 32, 32]);
    assert_eq!(train.num_classes(), 10);
    let want: Vec<usize> = files[..5]
        .iter()
        .flat_map(|b| b.chunks(CifarVariant::Cifar10.record_len()).map(|r| r[0] as usize))
        .collect();
    assert_eq!(train.labels(), &want[..]);
    // Normalized with training statistics: per-channel mean near zero.
    let stats = train.channel_stats();
    assert!(stats.mean.iter().all(|m| m.abs() < 1e-9), "{stats:?}");
}

#[test]
fn cifar_subdirectory_is_found() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join(CifarVariant::Cifar10.subdir());
    std::fs::create_dir(&sub).unwrap();
    write_cifar10(&sub, 1);
    let (train, _) = load_cifar(dir.path(), CifarVariant::Cifar10).unwrap();
    assert_eq!(train.len(), 5);
}

#[test]
fn missing_cifar_file_names_what_was_expected() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar10(dir.path(), 1);
    std::fs::remove_file(dir.path().join("data_batch_3.bin")).unwrap();
    let msg = load_cifar(dir.path(), CifarVariant::Cifar10).unwrap_err().to_string();
    assert!(msg.contains("missing data_batch_3.bin ("), "{msg}");
    assert!(msg.contains("data_batch_5.bin"), "{msg}");
}

#[test]
fn loading_leaves_source_files_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_cifar10(dir.path(), 2);
    load_cifar(dir.path(), CifarVariant::Cifar10).unwrap();
    let v = CifarVariant::Cifar10;
    for (name, bytes) in v.train_files().iter().chain(&v.test_files()).zip(&files) {
        assert_eq!(&std::fs::read(dir.path().join(name)).unwrap(), bytes);
    }
}

#[test]
fn malformed_cifar_bytes_are_errors() {
    let ok = encode_cifar(&[record(0)], &[3], CifarVariant::Cifar10);
    assert!(matches!(decode_cifar(&ok[..ok.len() - 1], CifarVariant::Cifar10), Err(Error::Format { .. })));
    assert!(decode_cifar(&[], CifarVariant::Cifar10).is_err());
    let mut bad = ok.clone();
    bad[0] = 10;
    assert!(decode_cifar(&bad, CifarVariant::Cifar10).is_err());
    // A CIFAR-10 record is one byte short of a CIFAR-100 record.
    assert!(decode_cifar(&ok, CifarVariant::Cifar100).is_err());
}

#[test]
fn cifar100_reads_fine_labels() {
    let bytes = encode_cifar(&[record(1), record(2)], &[99, 5], CifarVariant::Cifar100);
    let (pixels, labels) = decode_cifar(&bytes, CifarVariant::Cifar100).unwrap();
    assert_eq!(labels, vec![99, 5]);
    assert_eq!(pixels.len(), 2 * CIFAR_PIXELS);
    assert_eq!(pixels[CIFAR_PIXELS], record(2)[0] as f64 / 255.0);
}

fn spec(margin: f64) -> SyntheticSpec {
    SyntheticSpec {
        classes: 5,
        train_per_class: 20,
        test_per_class: 10,
        image: [3, 8, 8],
        margin,
        blobs: 2,
        jitter: 0,
        seed: 42,
    }
}

/// Nearest class mean: a linear classifier fit in closed form.
fn nearest_mean_errors(train: &Dataset) -> usize {
    let per: usize = train.image_shape().iter().product();
    let c = train.num_classes();
    let mut means = vec![vec![0.0; per]; c];
    let mut counts = vec![0.0; c];
    for (i, &y) in train.labels().iter().enumerate() {
        counts[y] += 1.0;
        means[y].iter_mut().zip(train.image(i)).for_each(|(m, v)| *m += v);
    }
    for (m, n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    (0..train.len())
        .filter(|&i| {
            let img = train.image(i);
            let best = (0..c)
                .min_by(|&a, &b| dist(img, &means[a]).total_cmp(&dist(img, &means[b])))
                .unwrap();
            best != train.labels()[i]
        })
        .count()
}

#[test]
fn wide_margin_synthetic_data_is_linearly_separable() {
    let (train, test) = synthetic_dataset(&spec(8.0)).unwrap();
    assert_eq!(train.len(), 100);
    assert_eq!(test.len(), 50);
    assert_eq!(nearest_mean_errors(&train), 0);
}

#[test]
fn synthetic_data_is_seeded() {
    let (a, _) = synthetic_dataset(&spec(1.0)).unwrap();
    let (b, _) = synthetic_dataset(&spec(1.0)).unwrap();
    assert_eq!(a.images(), b.images());
    let (c, _) = synthetic_dataset(&SyntheticSpec { seed: 43, ..spec(1.0) }).unwrap();
    assert_ne!(a.images(), c.images());
    let counts = (0..5).map(|k| a.labels().iter().filter(|&&y| y == k).count());
    assert!(counts.into_iter().all(|n| n == 20));
}

#[test]
fn invalid_synthetic_spec_lists_every_problem() {
    let bad = SyntheticSpec {
        classes: 1,
        train_per_class: 0,
        ..spec(1.0)
    };
    match synthetic_dataset(&bad) {
        Err(Error::Config(problems)) => assert!(problems.len() >= 2, "{problems:?}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn epoch_batches_partition_the_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [1usize, 2, 17, 64, 65, 100] {
        let batches = epoch_batches(n, 16, &mut rng);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        if n > 1 {
            assert!(batches.iter().all(|b| b.len() >= 2), "n = {n}");
        }
    }
    assert_eq!(sequential_batches(5, 2), vec![vec![0, 1], vec![2, 3, 4]]);
}

#[test]
fn centered_unflipped_crop_is_identity() {
    let x = Tensor::new(&[2, 1, 3, 3], (0..18).map(f64::from).collect()).unwrap();
    let plan = AugmentPlan {
        offsets: vec![(AUGMENT_PAD, AUGMENT_PAD); 2],
        flips: vec![false, true],
    };
    let y = plan.apply(&x).unwrap();
    assert_eq!(&y.values()[..9], &x.values()[..9]);
    assert_eq!(&y.values()[9..12], &[11.0, 10.0, 9.0]);

    let shifted = AugmentPlan {
        offsets: vec![(AUGMENT_PAD + 1, AUGMENT_PAD); 2],
        flips: vec![false; 2],
    };
    let y = shifted.apply(&x).unwrap();
    assert_eq!(&y.values()[..9], &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 0.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(augment(&x, &mut rng).unwrap().shape(), x.shape());
}

#[test]
fn dataset_container_round_trip() {
    let (train, _) = synthetic_dataset(&spec(1.0)).unwrap();
    let back = Dataset::from_container(&mbkd::tensor::container::NamedTensors::decode(&train.to_container().encode()).unwrap())
        .unwrap();
    assert_eq!(back.images(), train.images());
    assert_eq!(back.labels(), train.labels());
    assert_eq!(back.normalization(), train.normalization());
}
