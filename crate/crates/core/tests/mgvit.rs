use mebinncd::mgvit::{load_checkpoint, pool_mask, save_checkpoint, Checkpoint, MaskVector, MgVit, ModelConfig};
use mebinncd::raster::{BinaryMask, GrayImage};
use proptest::prelude::*;

fn small() -> ModelConfig {
    ModelConfig { input_side: 16, patch_size: 4, embed_dim: 8, num_heads: 2, num_layers: 2, masked_layers: 1, seed: 3, ..ModelConfig::default() }
}

fn image(seed: u64) -> GrayImage {
    GrayImage::from_fn(16, 16, |x, y| ((x as u64 * 37 + y as u64 * 11 + seed * 101) % 256) as u8)
}

#[test]
fn checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = MgVit::<f64>::new(small()).unwrap();
    save_checkpoint(&Checkpoint { model: model.clone(), inference_head: 1 }, &path).unwrap();
    let back = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(back.inference_head, 1);
    assert_eq!(back.model, model);
    let mask = pool_mask(&BinaryMask::from_fn(16, 16, |x, _| x < 8), &small()).unwrap();
    assert_eq!(back.model.forward(&image(1), &mask).unwrap().logits, model.forward(&image(1), &mask).unwrap().logits);
}

#[test]
fn pooled_mask_opens_cells_more_than_half_covered() {
    // cell (1, 0) is 9/16 covered, cell (2, 0) exactly half
    let mask = pool_mask(&BinaryMask::from_fn(16, 16, |x, y| (4..7).contains(&x) && y < 3 || (8..10).contains(&x) && y < 4), &small()).unwrap();
    assert_eq!(mask.additive[0], 0.0);
    let open: Vec<usize> = (1..mask.additive.len()).filter(|&i| mask.additive[i] == 0.0).collect();
    assert_eq!(open, vec![2]);
    assert!((mask.pooled[3] - 0.5).abs() < 1e-12);
}

#[test]
fn outputs_have_configured_shapes() {
    let cfg = small();
    let out = MgVit::<f32>::new(cfg.clone()).unwrap().forward(&image(0), &MaskVector::open(cfg.num_patches())).unwrap();
    assert_eq!(out.cls.len(), cfg.embed_dim);
    assert_eq!(out.logits.len(), cfg.num_heads_classifier);
    assert!(out.logits.iter().all(|l| l.len() == cfg.num_classes()));
    assert_eq!(out.projection.len(), cfg.projection_dim);
    assert_eq!(out.attention.len(), cfg.num_layers);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn open_mask_is_neutral(seed in 0u64..1000, layers in 1usize..=2) {
        let model = MgVit::<f64>::new(ModelConfig { masked_layers: layers, ..small() }).unwrap();
        let plain = model.with_masked_layers(0).unwrap();
        let open = MaskVector::open(small().num_patches());
        let a = model.forward(&image(seed), &open).unwrap();
        let b = plain.forward(&image(seed), &open).unwrap();
        for (x, y) in a.logits.iter().flatten().zip(b.logits.iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}
