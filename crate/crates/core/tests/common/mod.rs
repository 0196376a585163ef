#![allow(dead_code)]

use promptvit::vit::{init_backbone, ViTConfig};
use promptvit::{Element, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn backbone<E: Element>(cfg: &ViTConfig, seed: u64) -> ParamStore<E> {
    init_backbone(cfg, &mut rng(seed)).unwrap()
}

/// Backbone with unit-scale weights so every branch contributes visibly.
pub fn loud_backbone(cfg: &ViTConfig, seed: u64) -> ParamStore<f64> {
    let mut s: ParamStore<f64> = backbone(cfg, seed);
    let mut r = rng(seed ^ 0x5eed);
    for p in s.iter_mut() {
        if !p.name.ends_with("scale") {
            let fan = *p.value.shape().last().unwrap() as f64;
            for v in p.value.data_mut() {
                *v = (r.random::<f64>() * 2.0 - 1.0) / fan.sqrt();
            }
        }
    }
    s
}

pub fn images<E: Element>(r: &mut ChaCha8Rng, b: usize, cfg: &ViTConfig) -> Tensor<E> {
    let [c, h, w] = cfg.image_shape();
    let data = (0..b * c * h * w).map(|_| E::of(r.random::<f64>())).collect();
    Tensor::new(vec![b, c, h, w], data).unwrap()
}

/// Desk-width config used by count examples: d = 32, 16×16 images, 10 classes.
pub fn desk10() -> ViTConfig {
    ViTConfig::desk().with_classes(10)
}

/// Tiny config whose pooled input is 48-dimensional (8×8 images on a 4×4 grid).
pub fn tiny() -> ViTConfig {
    ViTConfig::tiny()
}
