use promptvit::data::{
    corpus_bytes, default_suite, generate_synthetic, instance_cue_task, load_corpus, parse_corpus, save_corpus,
    subsample, Dataset, DatasetSpec, Family,
};
use promptvit::Error;
use proptest::prelude::*;
use std::path::Path;

fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let n = train.image_len();
    let mut centroids = vec![vec![0.0f64; n]; train.num_classes];
    let counts = train.class_counts();
    for i in 0..train.len() {
        let c = train.labels()[i];
        for (acc, &v) in centroids[c].iter_mut().zip(train.image(i)) {
            *acc += v as f64 / counts[c] as f64;
        }
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let img = test.image(i);
            let best = (0..train.num_classes)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a].iter().zip(img).map(|(c, &v)| (c - v as f64).powi(2)).sum();
                    let db: f64 = centroids[b].iter().zip(img).map(|(c, &v)| (c - v as f64).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best == test.labels()[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn generation_is_deterministic() {
    for spec in default_suite(40, 10, 7) {
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }
}

#[test]
fn two_classes_split_evenly() {
    let spec = DatasetSpec::new(Family::UpstreamShapes, 2, 100, 10, 1);
    let d = generate_synthetic(&spec).unwrap();
    assert_eq!(d.train.class_counts(), vec![50, 50]);
}

#[test]
fn full_instance_noise_is_unlearnable() {
    let spec = DatasetSpec::new(Family::DownstreamVariant, 4, 400, 400, 2).with_noise(1.0);
    let d = generate_synthetic(&spec).unwrap();
    let acc = nearest_centroid_accuracy(&d.train, &d.test);
    let sigma = (0.25f64 * 0.75 / 400.0).sqrt();
    assert!((acc - 0.25).abs() <= 3.0 * sigma, "accuracy {acc}");

    let clean = generate_synthetic(&spec.clone().with_noise(0.0)).unwrap();
    assert!(nearest_centroid_accuracy(&clean.train, &clean.test) > 0.25 + 3.0 * sigma);
}

#[test]
fn deleting_the_cue_leaves_the_template_task() {
    let mut cue = DatasetSpec::new(Family::InstanceCue, 12, 60, 20, 5).with_variant(1);
    cue.cue = false;
    let template = DatasetSpec::new(Family::DownstreamVariant, 3, 60, 20, 5).with_variant(1);
    let a = instance_cue_task(&cue).unwrap();
    let b = generate_synthetic(&template).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
}

#[test]
fn cue_task_labels_combine_template_and_corner() {
    let spec = DatasetSpec::new(Family::InstanceCue, 8, 80, 16, 9);
    let cue = instance_cue_task(&spec).unwrap();
    let mut plain = spec.clone();
    plain.cue = false;
    let plain = instance_cue_task(&plain).unwrap();
    assert_eq!(cue.train.class_counts(), vec![10; 8]);
    for i in 0..cue.train.len() {
        assert_eq!(cue.train.labels()[i] / 4, plain.train.labels()[i]);
    }
    assert_eq!(cue, instance_cue_task(&spec).unwrap());
}

#[test]
fn cue_task_is_learnable_by_nearest_centroid() {
    let spec = DatasetSpec::new(Family::InstanceCue, 8, 400, 200, 3);
    let d = instance_cue_task(&spec).unwrap();
    let acc = nearest_centroid_accuracy(&d.train, &d.test);
    let sigma = (0.125f64 * 0.875 / 200.0).sqrt();
    assert!(acc > 0.125 + 3.0 * sigma, "accuracy {acc}");
}

#[test]
fn families_draw_from_different_streams() {
    let up = generate_synthetic(&DatasetSpec::new(Family::UpstreamShapes, 6, 10, 2, 4)).unwrap();
    let down = generate_synthetic(&DatasetSpec::new(Family::DownstreamVariant, 6, 10, 2, 4)).unwrap();
    assert_ne!(up.train.labels(), down.train.labels());
    assert_ne!(up.train.pixels(), down.train.pixels());
}

#[test]
fn corpus_round_trip() {
    let d = generate_synthetic(&DatasetSpec::new(Family::UpstreamShapes, 5, 23, 2, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.pimg");
    save_corpus(&d.train, &path).unwrap();
    let back = load_corpus(&path, Some(5)).unwrap();
    assert_eq!(back, d.train);
    assert_eq!(corpus_bytes(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn empty_corpus_is_empty_dataset() {
    let empty = Dataset::new([3, 8, 8], 2, vec![], vec![]).unwrap();
    let bytes = corpus_bytes(&empty).unwrap();
    let back = parse_corpus(&bytes, Path::new("e"), None).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.image_shape, [3, 8, 8]);
}

#[test]
fn corpus_corruption_is_detected() {
    let d = generate_synthetic(&DatasetSpec::new(Family::UpstreamShapes, 3, 6, 2, 1)).unwrap();
    let bytes = corpus_bytes(&d.train).unwrap();

    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    assert!(matches!(parse_corpus(&flipped, Path::new("f"), None), Err(Error::CorruptFile { .. })));

    let mut magic = bytes.clone();
    magic[1] = b'X';
    assert!(matches!(parse_corpus(&magic, Path::new("f"), None), Err(Error::CorruptFile { .. })));

    let record = 2 + 4 * 3 * 16 * 16;
    let cut = 14 + record + 10;
    match parse_corpus(&bytes[..cut], Path::new("f"), None) {
        Err(Error::Truncated { offset, .. }) => assert_eq!(offset, (14 + record) as u64),
        other => panic!("expected truncation, got {other:?}"),
    }
}

fn balanced(n: usize, classes: usize) -> Dataset {
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % classes).collect();
    let pixels = (0..n * 3 * 8 * 8).map(|i| (i % 251) as f32 / 251.0).collect();
    Dataset::new([3, 8, 8], classes, pixels, labels).unwrap()
}

#[test]
fn subsample_examples() {
    let d = balanced(1000, 10);
    assert_eq!(subsample(&d, 1.0, 3).unwrap(), d);
    let s = subsample(&d, 0.1, 3).unwrap();
    assert_eq!(s.len(), 100);
    assert_eq!(s.class_counts(), vec![10; 10]);
    assert!(subsample(&balanced(5, 2), 0.1, 0).is_err());
    assert!(subsample(&d, 0.0, 0).is_err());
    assert!(subsample(&d, 1.5, 0).is_err());
}

fn rows(d: &Dataset) -> Vec<Vec<u32>> {
    (0..d.len())
        .map(|i| d.image(i).iter().map(|v| v.to_bits()).collect())
        .collect()
}

proptest! {
    #[test]
    fn subsample_is_nested_and_stratified(
        n in 20usize..300,
        classes in 2usize..8,
        seed in 0u64..1000,
        f1 in 0.1f64..0.6,
        extra in 0.0f64..0.4,
    ) {
        let mut d = balanced(n, classes);
        // Tag each image with its index so rows are unique.
        let per = d.image_len();
        let tagged: Vec<f32> = (0..n)
            .flat_map(|i| {
                let mut img = d.image(i).to_vec();
                img[0] = i as f32;
                img
            })
            .collect();
        d = Dataset::new(d.image_shape, classes, tagged, d.labels().to_vec()).unwrap();
        prop_assert_eq!(d.image_len(), per);

        let f2 = (f1 + extra).min(1.0);
        let small = subsample(&d, f1, seed).unwrap();
        let large = subsample(&d, f2, seed).unwrap();
        prop_assert_eq!(small.len(), (f1 * n as f64).floor() as usize);
        let large_rows = rows(&large);
        for r in rows(&small) {
            prop_assert!(large_rows.contains(&r));
        }
        let full = d.class_counts();
        for (c, &k) in small.class_counts().iter().enumerate() {
            let ideal = full[c] as f64 * small.len() as f64 / n as f64;
            prop_assert!((k as f64 - ideal).abs() <= 1.0 + 1e-9, "class {c}: {k} vs {ideal}");
        }
        prop_assert_eq!(subsample(&d, f1, seed).unwrap(), small);
    }
}
