use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{ToyImage, LUMA};

/// Jitter ranges: brightness/contrast/saturation factors are drawn from
/// `[1 - s, 1 + s]`, hue shifts from `[-hue, hue]` turns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterStrength {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterStrength {
    fn default() -> Self {
        JitterStrength {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
        }
    }
}

/// One concrete draw of color jitter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_shift: f64,
}

impl JitterFactors {
    pub fn identity() -> Self {
        JitterFactors {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue_shift: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(s: &JitterStrength, rng: &mut R) -> Self {
        let factor = |rng: &mut R, v: f64| {
            if v > 0.0 {
                rng.random_range((1.0 - v).max(0.0)..=1.0 + v)
            } else {
                1.0
            }
        };
        let brightness = factor(rng, s.brightness);
        let contrast = factor(rng, s.contrast);
        let saturation = factor(rng, s.saturation);
        let hue_shift = if s.hue > 0.0 {
            rng.random_range(-s.hue..=s.hue)
        } else {
            0.0
        };
        JitterFactors {
            brightness,
            contrast,
            saturation,
            hue_shift,
        }
    }

    /// Brightness, contrast (pivot: mean luma), saturation, then hue, each
    /// followed by clamping.
    pub fn apply(&self, img: &ToyImage) -> ToyImage {
        let b = self.brightness;
        let mut out = img.map_pixels(|p| p.map(|v| v * b));
        let c = self.contrast;
        let m = out.mean_luma();
        out = out.map_pixels(|p| p.map(|v| v * c + m * (1.0 - c)));
        let s = self.saturation;
        out = out.map_pixels(|p| {
            let g = luma(p);
            p.map(|v| v * s + g * (1.0 - s))
        });
        if self.hue_shift != 0.0 {
            let h = self.hue_shift;
            out = out.map_pixels(|p| {
                let (hue, sat, val) = rgb_to_hsv(p);
                hsv_to_rgb(((hue + h) % 1.0 + 1.0) % 1.0, sat, val)
            });
        }
        out
    }
}

fn luma(p: [f64; 3]) -> f64 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

pub fn grayscale(img: &ToyImage) -> ToyImage {
    img.map_pixels(|p| {
        let g = luma(p);
        [g, g, g]
    })
}

/// Hue in turns `[0, 1)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(p: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = p;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
