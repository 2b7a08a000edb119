use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::pnm::Rgb8;

/// Planar RGB image (3 × H × W), values nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<F> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpMode {
    Bilinear,
    Nearest,
}

/// Bicubic convolution kernel with parameter `a`.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

pub const BICUBIC_A: f64 = -0.5;

impl<F: Real> Image<F> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![F::zero(); 3 * height * width] }
    }

    pub fn new(height: usize, width: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::dim("image", format!("3x{height}x{width} needs {} values", 3 * height * width)));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> F {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut F {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn cast<G: Real>(&self) -> Image<G> {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| G::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    pub fn from_rgb8(img: &Rgb8) -> Self {
        Self::from_fn(img.height, img.width, |c, y, x| {
            F::lit(img.data[(y * img.width + x) * 3 + c] as f64 / 127.5 - 1.0)
        })
    }

    pub fn to_rgb8(&self) -> Rgb8 {
        let mut data = vec![0u8; 3 * self.height * self.width];
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = (self.at(c, y, x).to_f64().unwrap() + 1.0) * 127.5;
                    data[(y * self.width + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Rgb8 { width: self.width, height: self.height, data }
    }

    /// Separable 4-tap bicubic (`a = -0.5`) downsampling by 2 with edge clamping.
    /// Output pixel `i` sits between input pixels `2i` and `2i+1`.
    pub fn down2(&self) -> Result<Self> {
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::dim("down2", format!("odd extents {}x{}", self.height, self.width)));
        }
        let w_near = F::lit(cubic_kernel(0.5, BICUBIC_A));
        let w_far = F::lit(cubic_kernel(1.5, BICUBIC_A));
        let taps = [w_far, w_near, w_near, w_far];
        let (h, w) = (self.height, self.width);
        let (oh, ow) = (h / 2, w / 2);
        let sample = |n: usize, i: usize, k: usize| -> usize { (2 * i + k).saturating_sub(1).min(n - 1) };
        // horizontal pass
        let mut tmp = vec![F::zero(); 3 * h * ow];
        for c in 0..3 {
            for y in 0..h {
                for ox in 0..ow {
                    let mut acc = F::zero();
                    for (k, &wk) in taps.iter().enumerate() {
                        acc += wk * self.at(c, y, sample(w, ox, k));
                    }
                    tmp[(c * h + y) * ow + ox] = acc;
                }
            }
        }
        let mut out = Self::zeros(oh, ow);
        for c in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = F::zero();
                    for (k, &wk) in taps.iter().enumerate() {
                        acc += wk * tmp[(c * h + sample(h, oy, k)) * ow + ox];
                    }
                    *out.at_mut(c, oy, ox) = acc;
                }
            }
        }
        Ok(out)
    }

    /// Upsampling by 2. Bilinear samples at pixel centers (half-pixel offsets,
    /// clamped at the border); nearest replicates each pixel into a 2×2 block.
    pub fn up2(&self, mode: UpMode) -> Self {
        let (h, w) = (self.height, self.width);
        let (oh, ow) = (2 * h, 2 * w);
        match mode {
            UpMode::Nearest => Self::from_fn(oh, ow, |c, y, x| self.at(c, y / 2, x / 2)),
            UpMode::Bilinear => {
                let coords = |n: usize, o: usize| -> (usize, usize, F) {
                    let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(n - 1);
                    (i0, i1, F::lit(src - i0 as f64))
                };
                let ys: Vec<_> = (0..oh).map(|o| coords(h, o)).collect();
                let xs: Vec<_> = (0..ow).map(|o| coords(w, o)).collect();
                let one = F::one();
                Self::from_fn(oh, ow, |c, y, x| {
                    let (y0, y1, fy) = ys[y];
                    let (x0, x1, fx) = xs[x];
                    let top = self.at(c, y0, x0) * (one - fx) + self.at(c, y0, x1) * fx;
                    let bot = self.at(c, y1, x0) * (one - fx) + self.at(c, y1, x1) * fx;
                    top * (one - fy) + bot * fy
                })
            }
        }
    }

    /// Horizontal concatenation of equally tall images.
    pub fn hconcat(parts: &[Image<F>]) -> Result<Self> {
        let h = parts.first().map(|p| p.height).unwrap_or(0);
        if parts.iter().any(|p| p.height != h) {
            return Err(Error::dim("hconcat", "heights differ"));
        }
        let w: usize = parts.iter().map(|p| p.width).sum();
        let mut out = Self::zeros(h, w);
        let mut off = 0;
        for p in parts {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..p.width {
                        *out.at_mut(c, y, off + x) = p.at(c, y, x);
                    }
                }
            }
            off += p.width;
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |c, y, x| self.at(c, y, self.width - 1 - x))
    }
}
