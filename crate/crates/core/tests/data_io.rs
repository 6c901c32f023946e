use quan::data::{
    augment, horizontal_flip, load_checkpoint, load_cifar10, random_crop, save_checkpoint, synth_oriented_dataset,
    write_cifar10_file, AugmentConfig, ImageRecord, NamedTensor,
};
use quan::models::{ClassifierConfig, QuanClassifier};
use quan::{QTensor, QuanError};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn record(label: usize, seed: u8) -> ImageRecord {
    let pixels = (0..32 * 32 * 3).map(|i| (i as u8).wrapping_mul(7).wrapping_add(seed)).collect();
    ImageRecord::new(32, 32, pixels, label).unwrap()
}

#[test]
fn cifar_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = vec![record(0, 1), record(9, 2), record(4, 3)];
    let test = vec![record(7, 4)];
    write_cifar10_file(&dir.path().join("data_batch_1.bin"), &train).unwrap();
    write_cifar10_file(&dir.path().join("data_batch_3.bin"), &train[..1]).unwrap();
    write_cifar10_file(&dir.path().join("test_batch.bin"), &test).unwrap();
    assert_eq!(std::fs::metadata(dir.path().join("data_batch_1.bin")).unwrap().len(), 3 * 3073);
    let c = load_cifar10(dir.path()).unwrap();
    assert_eq!(c.train.len(), 4);
    assert_eq!(c.train.records[..3], train[..]);
    assert_eq!(c.test.records, test);

    let mut bytes = std::fs::read(dir.path().join("test_batch.bin")).unwrap();
    bytes.pop();
    std::fs::write(dir.path().join("test_batch.bin"), bytes).unwrap();
    let err = load_cifar10(dir.path()).unwrap_err();
    assert!(matches!(err, QuanError::Format { .. }), "{err}");
    assert!(err.to_string().contains("offset 0"), "{err}");
}

#[test]
fn model_checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.quan");
    let cfg = ClassifierConfig { classes: 3, width: 2, stages: 1, ..Default::default() };
    let mut a = QuanClassifier::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    // Populate running statistics first.
    a.forward(&QTensor::new([2, 1, 6, 6, 4], 0.5).unwrap(), true).unwrap();
    save_checkpoint(&path, &a.state()).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let mut b = QuanClassifier::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    // Reverse the order to exercise name matching.
    let reversed: Vec<NamedTensor> = loaded.iter().rev().cloned().collect();
    b.load_state(&reversed).unwrap();
    for (pa, pb) in a.params().iter().zip(b.params()) {
        assert_eq!(pa.name, pb.name);
        assert!(pa.value.iter().zip(&pb.value).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"QUAM");
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(QuanError::Format { .. })));
}

#[test]
fn scalar_checkpoint_hex_dump() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.quan");
    save_checkpoint(&path, &[NamedTensor::new("w", vec![1], vec![-2.0]).unwrap()]).unwrap();
    let hex: String = std::fs::read(&path).unwrap().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, "5155414e010000000100000001000000770100000001000000000000c0");
    assert_eq!(hex.len() / 2, 4 + 4 + 4 + (4 + 1) + 4 + 4 + 4);
}

#[test]
fn synthetic_labels_are_planar_unit_quaternions() {
    for s in synth_oriented_dataset(64, 9, 16).unwrap() {
        let q = s.target.orientation;
        assert!((q.norm() - 1.0).abs() <= 1e-12);
        assert_eq!((q.i, q.j), (0.0, 0.0));
        assert!((q.r - (s.theta / 2.0).cos()).abs() < 1e-15 && (q.k - (s.theta / 2.0).sin()).abs() < 1e-15);
    }
}

#[test]
fn augmentation_examples() {
    let img = record(5, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let never = AugmentConfig { crop_pad: 0, flip_prob: 0.0 };
    assert_eq!(augment(&img, &never, &mut rng).unwrap(), img);
    assert_eq!(horizontal_flip(&horizontal_flip(&img)), img);
    assert_eq!(random_crop(&img, 0, &mut rng).unwrap(), img);
    assert!(random_crop(&img, 32, &mut rng).is_err());
    let out = augment(&img, &AugmentConfig::default(), &mut rng).unwrap();
    assert_eq!((out.height, out.width, out.label), (32, 32, 5));
}
