use std::collections::HashMap;

use mebinncd::raster::{connected_components, Connectivity};
use mebinncd::synth::{generate, read_corpus, write_corpus, NoiseConfig, ShapeClass, Split, SynthConfig};

fn cfg() -> SynthConfig {
    SynthConfig { num_unlabeled: 12, num_labeled: 8, seed: 9, ..SynthConfig::default() }
}

#[test]
fn class_counts_are_balanced() {
    let c = generate(&cfg()).unwrap();
    let mut counts: HashMap<(Split, ShapeClass), usize> = HashMap::new();
    for img in &c.images {
        *counts.entry((img.entry.split, img.entry.class)).or_default() += 1;
    }
    for class in &cfg().novel_classes {
        assert_eq!(counts[&(Split::Unlabeled, *class)], 4);
    }
    for class in &cfg().known_classes {
        assert_eq!(counts[&(Split::Labeled, *class)], 4);
    }
}

#[test]
fn manifest_regions_match_mask_components() {
    let c = generate(&cfg()).unwrap();
    for img in &c.images {
        let comps = connected_components(&img.gt_mask, Connectivity::Eight);
        assert_eq!(comps.count, img.entry.regions.len(), "{}", img.entry.image_id);
        for r in &img.entry.regions {
            assert_eq!(comps.boxes[r.index - 1], r.bbox);
            assert_eq!(comps.areas[r.index - 1], r.area);
        }
        assert!(img.map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if img.entry.class == ShapeClass::Normal {
            assert!(img.gt_mask.is_empty());
        }
    }
}

#[test]
fn full_miss_rate_leaves_no_gt_signal() {
    let noise = NoiseConfig { miss_rate: 1.0, fp_blob_rate: 0.0, ..NoiseConfig::default() };
    let c = generate(&SynthConfig { noise, ..cfg() }).unwrap();
    assert!(c.images.iter().all(|i| i.map.max_value() == 0.0));
}

#[test]
fn written_corpus_reads_back_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let corpus = generate(&cfg()).unwrap();
    write_corpus(&corpus, a.path()).unwrap();
    write_corpus(&generate(&cfg()).unwrap(), b.path()).unwrap();
    for name in ["manifest.jsonl", "maps/u0000.png", "images/l0003.png", "masks/u0005.png"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let back = read_corpus(a.path()).unwrap();
    assert_eq!(back.manifest(), corpus.manifest());
    for (x, y) in back.images.iter().zip(&corpus.images) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.gt_mask, y.gt_mask);
        let err = x.map.data().iter().zip(y.map.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 65535.0);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(generate(&SynthConfig { image_side: 16, ..cfg() }).is_err());
    assert!(generate(&SynthConfig { known_classes: vec![], num_labeled: 4, ..cfg() }).is_err());
}
