//! Prompt-indexed augmentation operators over [`ToyImage`]s.
//!
//! The operator inventory and its canonical order are fixed:
//! `ResizedCrop, HorizontalFlip, ColorJitter, Grayscale, GaussianBlur,
//! Solarization`. A [`Prompt`] selects which of them are active for a view.

mod color;
mod image;
mod prompt;

pub use color::{grayscale, hsv_to_rgb, rgb_to_hsv, JitterFactors, JitterStrength};
pub use image::{ToyImage, CHANNELS, LUMA};
pub use prompt::{sample_prompt, Operator, Prompt, NUM_OPERATORS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Global,
    Local,
}

/// Augmented view at canonical encoder size.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: ToyImage,
    pub kind: ViewKind,
    pub prompt: Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Side of global views and of the encoder input.
    pub global_size: usize,
    /// Side of local crops before they are resampled to `global_size`.
    pub local_size: usize,
    pub global_crop_area: (f64, f64),
    pub local_crop_area: (f64, f64),
    pub jitter: JitterStrength,
    pub flip_probability: f64,
    pub grayscale_probability: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_threshold: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            global_size: 16,
            local_size: 8,
            global_crop_area: (0.4, 1.0),
            local_crop_area: (0.05, 0.4),
            jitter: JitterStrength::default(),
            flip_probability: 0.5,
            grayscale_probability: 0.2,
            blur_sigma: (0.1, 2.0),
            solarize_threshold: 0.5,
        }
    }
}

/// Random outcome of one pre-augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreAugmentDraw {
    pub flip: bool,
    pub jitter: JitterFactors,
    pub grayscale: bool,
}

impl PreAugmentDraw {
    pub fn identity() -> Self {
        PreAugmentDraw {
            flip: false,
            jitter: JitterFactors::identity(),
            grayscale: false,
        }
    }
}

pub fn horizontal_flip(img: &ToyImage) -> ToyImage {
    let w = img.width();
    ToyImage::from_fn(w, img.height(), |x, y| img.pixel(w - 1 - x, y))
}

pub fn solarize(img: &ToyImage, threshold: f64) -> ToyImage {
    img.map_pixels(|p| p.map(|v| if v > threshold { 1.0 - v } else { v }))
}

/// 3x3 separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &ToyImage, sigma: f64) -> ToyImage {
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * side;
    let k = [side / norm, 1.0 / norm, side / norm];
    let (w, h) = (img.width(), img.height());
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz = ToyImage::from_fn(w, h, |x, y| {
        let mut out = [0.0; 3];
        for (o, kv) in (-1isize..=1).zip(k) {
            let p = img.pixel(clampi(x as isize + o, w), y);
            for c in 0..3 {
                out[c] += kv * p[c];
            }
        }
        out
    });
    ToyImage::from_fn(w, h, |x, y| {
        let mut out = [0.0; 3];
        for (o, kv) in (-1isize..=1).zip(k) {
            let p = horiz.pixel(x, clampi(y as isize + o, h));
            for c in 0..3 {
                out[c] += kv * p[c];
            }
        }
        out
    })
}

/// Applies prompt-indexed augmentations to images.
#[derive(Clone, Debug, Default)]
pub struct Augmenter {
    pub config: AugmentConfig,
}

impl Augmenter {
    pub fn new(config: AugmentConfig) -> Self {
        Augmenter { config }
    }

    pub fn draw_pre_augment<R: Rng + ?Sized>(&self, rng: &mut R) -> PreAugmentDraw {
        let flip = rng.random::<f64>() < self.config.flip_probability;
        let jitter = JitterFactors::sample(&self.config.jitter, rng);
        let grayscale = rng.random::<f64>() < self.config.grayscale_probability;
        PreAugmentDraw {
            flip,
            jitter,
            grayscale,
        }
    }

    pub fn pre_augment_with(&self, img: &ToyImage, draw: &PreAugmentDraw) -> ToyImage {
        let mut out = if draw.flip {
            horizontal_flip(img)
        } else {
            img.clone()
        };
        out = draw.jitter.apply(&out);
        if draw.grayscale {
            out = grayscale(&out);
        }
        out
    }

    /// Random flip, color jitter and random grayscale; output keeps the input size.
    pub fn pre_augment<R: Rng + ?Sized>(&self, img: &ToyImage, rng: &mut R) -> ToyImage {
        let draw = self.draw_pre_augment(rng);
        self.pre_augment_with(img, &draw)
    }

    fn kind_size(&self, kind: ViewKind) -> usize {
        match kind {
            ViewKind::Global => self.config.global_size,
            ViewKind::Local => self.config.local_size,
        }
    }

    fn to_canonical(&self, img: ToyImage) -> ToyImage {
        let s = self.config.global_size;
        img.resize(s, s)
    }

    /// Deterministic replacement for the crop stage when `ResizedCrop` is inactive.
    pub fn plain_resize(&self, img: &ToyImage, kind: ViewKind) -> ToyImage {
        let s = self.kind_size(kind);
        self.to_canonical(img.resize(s, s))
    }

    /// Random crop covering an area fraction drawn from the kind's range,
    /// with aspect ratio log-uniform in `[3/4, 4/3]`.
    pub fn random_resized_crop<R: Rng + ?Sized>(
        &self,
        img: &ToyImage,
        kind: ViewKind,
        rng: &mut R,
    ) -> ToyImage {
        let (lo, hi) = match kind {
            ViewKind::Global => self.config.global_crop_area,
            ViewKind::Local => self.config.local_crop_area,
        };
        let (w, h) = (img.width(), img.height());
        let area = (w * h) as f64;
        let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
        let mut window = None;
        for _ in 0..10 {
            let target = area * rng.random_range(lo..=hi);
            let ratio = rng.random_range(log_lo..=log_hi).exp();
            let cw = (target * ratio).sqrt().round() as usize;
            let ch = (target / ratio).sqrt().round() as usize;
            if cw > 0 && ch > 0 && cw <= w && ch <= h {
                let x0 = rng.random_range(0..=w - cw);
                let y0 = rng.random_range(0..=h - ch);
                window = Some((x0, y0, cw, ch));
                break;
            }
        }
        let (x0, y0, cw, ch) = window.unwrap_or((0, 0, w, h));
        let s = self.kind_size(kind);
        let cropped = img
            .crop(x0, y0, cw, ch)
            .expect("crop window lies inside the image");
        self.to_canonical(cropped.resize(s, s))
    }

    /// Applies operator `op_index` (canonical order) to `img`.
    pub fn apply_operator<R: Rng + ?Sized>(
        &self,
        img: &ToyImage,
        op_index: usize,
        kind: ViewKind,
        rng: &mut R,
    ) -> Result<ToyImage> {
        let op = Operator::from_index(op_index)?;
        Ok(match op {
            Operator::ResizedCrop => self.random_resized_crop(img, kind, rng),
            Operator::HorizontalFlip => horizontal_flip(img),
            Operator::ColorJitter => JitterFactors::sample(&self.config.jitter, rng).apply(img),
            Operator::Grayscale => grayscale(img),
            Operator::GaussianBlur => {
                let (lo, hi) = self.config.blur_sigma;
                gaussian_blur(img, rng.random_range(lo..=hi))
            }
            Operator::Solarization => solarize(img, self.config.solarize_threshold),
        })
    }

    /// `t(x | p)`: active operators in canonical order. An inactive crop bit is
    /// replaced by a deterministic resize, and local views are resampled to
    /// the canonical size right after the crop stage.
    pub fn compose_view<R: Rng + ?Sized>(
        &self,
        img: &ToyImage,
        prompt: Prompt,
        kind: ViewKind,
        rng: &mut R,
    ) -> Result<View> {
        let mut out = if prompt.is_active(Operator::ResizedCrop) {
            self.random_resized_crop(img, kind, rng)
        } else {
            self.plain_resize(img, kind)
        };
        for op in Operator::ALL.iter().skip(1) {
            if prompt.is_active(*op) {
                out = self.apply_operator(&out, op.index(), kind, rng)?;
            }
        }
        Ok(View {
            image: out,
            kind,
            prompt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured(seed: u64) -> ToyImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ToyImage::from_fn(16, 16, |_, _| {
            [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
        })
    }

    fn in_range(img: &ToyImage) -> bool {
        img.data().iter().all(|v| (0.0..=1.0).contains(v))
    }

    #[test]
    fn flip_is_an_involution() {
        let img = textured(1);
        assert_eq!(horizontal_flip(&horizontal_flip(&img)), img);
        assert_ne!(horizontal_flip(&img), img);
    }

    #[test]
    fn solarization_threshold() {
        let img = ToyImage::new(2, 1, vec![0.8, 0.3, 0.5, 0.3, 0.8, 1.0]).unwrap();
        let s = solarize(&img, 0.5);
        let p0 = s.pixel(0, 0);
        assert!((p0[0] - 0.2).abs() < 1e-15);
        assert_eq!(p0[1], 0.3);
        assert_eq!(p0[2], 0.5);
        assert_eq!(s.pixel(1, 0)[2], 0.0);
    }

    #[test]
    fn grayscale_luma() {
        let img = ToyImage::new(1, 1, vec![0.2, 0.4, 0.6]).unwrap();
        let g = grayscale(&img).pixel(0, 0);
        let expect: f64 = 0.299 * 0.2 + 0.587 * 0.4 + 0.114 * 0.6;
        assert!((expect - 0.3630).abs() < 1e-12);
        for c in g {
            assert!((c - 0.3630).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_operator_index() {
        let aug = Augmenter::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(aug
            .apply_operator(&textured(0), NUM_OPERATORS, ViewKind::Global, &mut rng)
            .is_err());
    }

    #[test]
    fn identity_pre_augment_is_exact() {
        let aug = Augmenter::default();
        let img = textured(4);
        assert_eq!(aug.pre_augment_with(&img, &PreAugmentDraw::identity()), img);
    }

    #[test]
    fn pre_augment_is_reproducible_and_keeps_size() {
        let aug = Augmenter::default();
        let img = textured(2);
        let a = aug.pre_augment(&img, &mut ChaCha8Rng::seed_from_u64(9));
        let b = aug.pre_augment(&img, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!((a.width(), a.height()), (16, 16));
    }

    #[test]
    fn grayscale_branch_has_equal_channels() {
        let aug = Augmenter::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draw = PreAugmentDraw {
            grayscale: true,
            ..aug.draw_pre_augment(&mut rng)
        };
        let out = aug.pre_augment_with(&textured(3), &draw);
        for px in out.data().chunks_exact(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn flip_only_prompt_mirrors() {
        let aug = Augmenter::default();
        let img = textured(6);
        let p = Prompt::single(Operator::HorizontalFlip);
        let v = aug
            .compose_view(&img, p, ViewKind::Global, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(v.image, horizontal_flip(&img));
        assert_eq!(v.kind, ViewKind::Global);
    }

    #[test]
    fn compose_equals_sequential_operators() {
        let aug = Augmenter::default();
        for seed in 0..20u64 {
            let img = textured(seed);
            for bits in 1u8..64 {
                let p = Prompt::from_mask(bits).unwrap();
                for kind in [ViewKind::Global, ViewKind::Local] {
                    let v = aug
                        .compose_view(&img, p, kind, &mut ChaCha8Rng::seed_from_u64(seed))
                        .unwrap();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut expect = if p.is_active(Operator::ResizedCrop) {
                        aug.apply_operator(&img, 0, kind, &mut rng).unwrap()
                    } else {
                        aug.plain_resize(&img, kind)
                    };
                    for k in 1..NUM_OPERATORS {
                        if p.bits()[k] {
                            expect = aug.apply_operator(&expect, k, kind, &mut rng).unwrap();
                        }
                    }
                    assert_eq!(v.image, expect);
                    assert_eq!((v.image.width(), v.image.height()), (16, 16));
                    assert!(in_range(&v.image));
                }
            }
        }
    }

    #[test]
    fn all_ones_prompt_runs_every_operator() {
        let aug = Augmenter::default();
        let img = textured(8);
        let a = aug
            .compose_view(&img, Prompt::all(), ViewKind::Global, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let b = aug
            .compose_view(&img, Prompt::all(), ViewKind::Global, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!((a.image.width(), a.image.height()), (16, 16));
        // solarization runs last: nothing can exceed the threshold afterwards
        assert!(a.image.data().iter().all(|&v| v <= 0.5 + 1e-12));
    }

    #[test]
    fn every_operator_preserves_range_and_size() {
        let aug = Augmenter::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..30 {
            let img = textured(seed);
            for k in 0..NUM_OPERATORS {
                for kind in [ViewKind::Global, ViewKind::Local] {
                    let out = aug.apply_operator(&img, k, kind, &mut rng).unwrap();
                    assert!(in_range(&out));
                    assert_eq!(out.data().len(), 16 * 16 * 3);
                }
            }
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = ToyImage::filled(16, 16, [0.3, 0.6, 0.9]);
        let b = gaussian_blur(&img, 1.3);
        for (a, e) in b.data().iter().zip(img.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn local_views_differ_from_global() {
        let aug = Augmenter::default();
        let img = textured(21);
        let p = Prompt::single(Operator::ResizedCrop);
        let g = aug
            .compose_view(&img, p, ViewKind::Global, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        let l = aug
            .compose_view(&img, p, ViewKind::Local, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_ne!(g.image, l.image);
        assert_eq!(l.image.width(), 16);
    }
}
