use crate::error::{Error, Result};

/// Small RGB image with channel values in `[0, 1]`, stored row-major as
/// interleaved `(r, g, b)` triples.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

/// ITU-R 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl ToyImage {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image extents must be positive"));
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "image",
                left: vec![height, width, CHANNELS],
                right: vec![data.len()],
            });
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("image contains NaN"));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(ToyImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            data.extend(rgb.iter().map(|v| v.clamp(0.0, 1.0)));
        }
        ToyImage {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        ToyImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Applies `f` to every pixel, clamping the result.
    pub fn map_pixels(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> ToyImage {
        let mut data = Vec::with_capacity(self.data.len());
        for px in self.data.chunks_exact(CHANNELS) {
            let out = f([px[0], px[1], px[2]]);
            data.extend(out.iter().map(|v| v.clamp(0.0, 1.0)));
        }
        ToyImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn mean_luma(&self) -> f64 {
        let n = (self.width * self.height) as f64;
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .sum::<f64>()
            / n
    }

    /// Channel-major flattening (`3 x h x w`) used as encoder input.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * CHANNELS];
        for (i, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ToyImage> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(format!(
                "crop ({x0},{y0},{w},{h}) outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(ToyImage::from_fn(w, h, |x, y| self.pixel(x0 + x, y0 + y)))
    }

    /// Bilinear resampling with half-pixel centres. Same-size resampling is
    /// an exact copy.
    pub fn resize(&self, width: usize, height: usize) -> ToyImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        ToyImage::from_fn(width, height, |x, y| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let (a, b, c, d) = (
                self.pixel(x0, y0),
                self.pixel(x1, y0),
                self.pixel(x0, y1),
                self.pixel(x1, y1),
            );
            let mut out = [0.0; 3];
            for ch in 0..3 {
                let top = a[ch] * (1.0 - tx) + b[ch] * tx;
                let bot = c[ch] * (1.0 - tx) + d[ch] * tx;
                out[ch] = top * (1.0 - ty) + bot * ty;
            }
            out
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_clamped() {
        let img = ToyImage::new(1, 1, vec![-0.5, 0.5, 1.5]).unwrap();
        assert_eq!(img.pixel(0, 0), [0.0, 0.5, 1.0]);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(ToyImage::new(2, 2, vec![0.0; 11]).is_err());
    }

    #[test]
    fn constant_image_survives_resize() {
        let img = ToyImage::filled(5, 7, [0.25, 0.5, 0.75]);
        let r = img.resize(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                let p = r.pixel(x, y);
                assert!((p[0] - 0.25).abs() < 1e-12 && (p[2] - 0.75).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chw_layout() {
        let img = ToyImage::from_fn(2, 1, |x, _| [x as f64 * 0.5, 0.1, 0.2]);
        assert_eq!(img.to_chw(), vec![0.0, 0.5, 0.1, 0.1, 0.2, 0.2]);
    }
}
