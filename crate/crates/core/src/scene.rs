//! Synthetic detection scenes: filled rectangles of class-coded intensity
//! on a noisy background.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::SceneConfig;
use crate::rpn::{iou, BBox};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[1, 3, S, S]`.
    pub image: Tensor,
    /// Ground-truth boxes with class ids in `1..=num_classes`.
    pub gts: Vec<(BBox, usize)>,
}

/// Fill intensity of class `c` out of `k`, evenly spread over `[0.35, 0.95]`.
pub fn class_intensity(c: usize, k: usize) -> f32 {
    if k <= 1 {
        0.65
    } else {
        0.35 + 0.6 * (c - 1) as f32 / (k - 1) as f32
    }
}

fn noise_image<R: Rng>(size: usize, noise: f32, rng: &mut R) -> Vec<f32> {
    let n = Normal::new(0.0f32, noise.max(0.0)).expect("non-negative std");
    (0..3 * size * size).map(|_| n.sample(rng)).collect()
}

fn paint(data: &mut [f32], size: usize, b: &BBox, value: f32) {
    let (x1, y1, x2, y2) = (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
    for c in 0..3 {
        for y in y1..y2 {
            for v in &mut data[(c * size + y) * size + x1..(c * size + y) * size + x2] {
                *v += value;
            }
        }
    }
}

impl SyntheticScene {
    /// Random scene. Objects never overlap; a placement that would is
    /// retried, and after 100 failures the scene keeps fewer objects.
    pub fn generate<R: Rng>(cfg: &SceneConfig, num_classes: usize, rng: &mut R) -> Self {
        let s = cfg.image_size;
        let mut data = noise_image(s, cfg.noise, rng);
        let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut gts: Vec<(BBox, usize)> = Vec::new();
        for _ in 0..count {
            for _ in 0..100 {
                let w = rng.gen_range(cfg.min_side..=cfg.max_side);
                let h = rng.gen_range(cfg.min_side..=cfg.max_side);
                let x = rng.gen_range(0..=s - w);
                let y = rng.gen_range(0..=s - h);
                let b = BBox::new(x as f32, y as f32, (x + w) as f32, (y + h) as f32);
                if gts.iter().all(|(g, _)| iou(g, &b) == 0.0) {
                    let c = rng.gen_range(1..=num_classes);
                    gts.push((b, c));
                    break;
                }
            }
        }
        for (b, c) in &gts {
            paint(&mut data, s, b, class_intensity(*c, num_classes));
        }
        let image = Tensor::new(&[1, 3, s, s], data).expect("length matches");
        Self { image, gts }
    }

    /// Noise only.
    pub fn blank<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Self {
        let s = cfg.image_size;
        let image = Tensor::new(&[1, 3, s, s], noise_image(s, cfg.noise, rng)).expect("length matches");
        Self { image, gts: Vec::new() }
    }

    /// One rectangle of the given class on a noiseless background.
    pub fn single(size: usize, b: BBox, class: usize, num_classes: usize) -> Self {
        let mut data = vec![0f32; 3 * size * size];
        paint(&mut data, size, &b, class_intensity(class, num_classes));
        Self { image: Tensor::new(&[1, 3, size, size], data).expect("length matches"), gts: vec![(b, class)] }
    }
}

/// Stacks `[1, 3, H, W]` images into one batch.
pub fn stack_images(scenes: &[&SyntheticScene]) -> Tensor {
    let d = scenes[0].image.dims().to_vec();
    let data: Vec<f32> = scenes.iter().flat_map(|s| s.image.data().iter().copied()).collect();
    Tensor::new(&[scenes.len(), d[1], d[2], d[3]], data).expect("equal image sizes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DetectorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scenes_respect_invariants() {
        let cfg = DetectorConfig::toy().scene;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = SyntheticScene::generate(&cfg, 3, &mut rng);
            assert!(!s.gts.is_empty() && s.gts.len() <= cfg.max_objects);
            for (b, c) in &s.gts {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
                assert!(b.width() >= 8.0 && b.height() >= 8.0);
                assert!((1..=3).contains(c));
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = DetectorConfig::toy().scene;
        let a = SyntheticScene::generate(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = SyntheticScene::generate(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn single_paints_box() {
        let s = SyntheticScene::single(8, BBox::new(2.0, 3.0, 4.0, 5.0), 1, 1);
        assert_eq!(s.image.at(&[0, 1, 3, 2]), 0.65);
        assert_eq!(s.image.at(&[0, 1, 5, 2]), 0.0);
    }
}
