use super::*;
use crate::autodiff::Graph;
use crate::error::Error;
use crate::tensor::Tensor;

fn tiny() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        mlp_ratio: 2,
        n_classes_proxy: 3,
    }
}

fn image(cfg: &BackboneConfig, seed: u8) -> Vec<u8> {
    (0..cfg.image_bytes())
        .map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed.wrapping_mul(97)))
        .collect()
}

fn backbone() -> BackboneParams<f64> {
    BackboneParams::init(&tiny(), 7).unwrap().freeze()
}

#[test]
fn eight_pixel_image_with_four_pixel_patches_gives_five_tokens() {
    let cfg = tiny();
    assert_eq!(cfg.n_patches(), 4);
    assert_eq!(cfg.seq_len(), 5);
    let z = backbone().forward_tokens(&image(&cfg, 1)).unwrap();
    assert_eq!(z.shape(), &[5, 16]);
}

#[test]
fn zero_image_is_finite() {
    let cfg = tiny();
    let z = backbone().forward_tokens(&vec![0; cfg.image_bytes()]).unwrap();
    assert!(z.all_finite());
}

#[test]
fn patchify_scales_and_orders_pixels() {
    let cfg = BackboneConfig {
        image_size: 2,
        patch_size: 1,
        channels: 1,
        ..tiny()
    };
    let p = patchify::<f64>(&cfg, &[0, 255, 51, 204]).unwrap();
    assert_eq!(p.shape(), &[4, 1]);
    let expect = [-1.0, 1.0, 51.0 / 127.5 - 1.0, 204.0 / 127.5 - 1.0];
    for (a, b) in p.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn wrong_image_size_is_a_config_error() {
    assert!(matches!(backbone().forward_tokens(&[0; 5]), Err(Error::Config(_))));
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny();
    let bb = backbone();
    let img = image(&cfg, 3);
    assert_eq!(bb.forward_tokens(&img).unwrap(), bb.forward_tokens(&img).unwrap());
    let again = BackboneParams::<f64>::init(&cfg, 7).unwrap().freeze();
    assert_eq!(bb.fingerprint(), again.fingerprint());
}

#[test]
fn cache_has_one_entry_per_layer_and_matches_plain_path() {
    let cfg = tiny();
    let bb = backbone();
    let img = image(&cfg, 4);
    let out = bb.forward_backbone(&img).unwrap();
    assert_eq!(out.layers.len(), cfg.n_layers);
    for c in &out.layers {
        assert_eq!(c.keys.shape(), &[5, 16]);
        assert_eq!(c.values.shape(), &[5, 16]);
    }
    assert_eq!(out.tokens, bb.forward_tokens(&img).unwrap());
}

#[test]
fn different_images_give_different_class_tokens() {
    let cfg = tiny();
    let bb = backbone();
    let a = bb.forward_backbone(&image(&cfg, 1)).unwrap();
    let b = bb.forward_backbone(&image(&cfg, 2)).unwrap();
    assert_ne!(a.class_embedding(), b.class_embedding());
}

#[test]
fn forward_leaves_frozen_bytes_unchanged() {
    let cfg = tiny();
    let bb = backbone();
    let before = bb.blob_bytes();
    for s in 0..3 {
        bb.forward_backbone(&image(&cfg, s)).unwrap();
    }
    assert_eq!(before, bb.blob_bytes());
    assert!(bb.clone().tensors_mut().is_err());
}

#[test]
fn save_load_round_trips_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let bb = backbone();
    let fp = bb.save(dir.path()).unwrap();
    assert_eq!(fp, bb.fingerprint());
    let loaded = BackboneParams::<f64>::load(dir.path()).unwrap();
    assert!(loaded.is_frozen());
    assert_eq!(loaded.fingerprint(), fp);
    assert_eq!(loaded, bb);
}

#[test]
fn masked_keys_do_not_influence_output() {
    let cfg = tiny();
    let bb = backbone();
    let patches = patchify::<f64>(&cfg, &image(&cfg, 5)).unwrap();
    let run = |patches: &Tensor<f64>| {
        let mut g = Graph::new();
        let vars = bb.bind(&mut g, Binding::Frozen);
        let p = g.constant_owned(patches.clone());
        let x = embed(&mut g, &vars, p).unwrap();
        // token 4 is invisible to every other row
        let mask = AttentionMask::from_fn(5, 5, |q, k| k != 4 || q == 4);
        let y = block_forward(&mut g, &vars, 0, x, Some(&mask)).unwrap();
        g.value(y).slice_rows(0, 4).unwrap()
    };
    let mut perturbed = patches.clone();
    for v in perturbed.data_mut()[3 * cfg.patch_dim()..].iter_mut() {
        *v = -*v + 0.5;
    }
    assert_eq!(run(&patches), run(&perturbed));
}

#[test]
fn diagonal_mask_makes_rows_independent() {
    let cfg = tiny();
    let bb = backbone();
    let patches = patchify::<f64>(&cfg, &image(&cfg, 6)).unwrap();
    let mut g = Graph::new();
    let vars = bb.bind(&mut g, Binding::Frozen);
    let p = g.constant(&patches);
    let x = embed(&mut g, &vars, p).unwrap();
    let mask = AttentionMask::diagonal(5);
    let all = block_forward(&mut g, &vars, 0, x, Some(&mask)).unwrap();
    let row = g.slice_rows(x, 2, 3).unwrap();
    let alone = block_forward(&mut g, &vars, 0, row, None).unwrap();
    assert_eq!(g.value(all).row(2), g.value(alone).row(0));
}

#[test]
fn mask_of_wrong_shape_is_rejected() {
    let cfg = tiny();
    let bb = backbone();
    let patches = patchify::<f64>(&cfg, &image(&cfg, 6)).unwrap();
    let mut g = Graph::new();
    let vars = bb.bind(&mut g, Binding::Frozen);
    let p = g.constant(&patches);
    let x = embed(&mut g, &vars, p).unwrap();
    let mask = AttentionMask::full(4, 4);
    assert!(matches!(
        block_forward(&mut g, &vars, 0, x, Some(&mask)),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = BackboneConfig {
        patch_size: 3,
        ..tiny()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = BackboneConfig { n_heads: 3, ..tiny() };
    assert!(matches!(BackboneParams::<f32>::init(&bad, 0), Err(Error::Config(_))));
}

#[test]
fn init_respects_truncation() {
    let bb = BackboneParams::<f64>::init(&tiny(), 3).unwrap();
    for (name, t) in bb.named_tensors() {
        if name.contains("ln") || name.starts_with("norm") {
            continue;
        }
        assert!(t.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD), "{name}");
    }
}
