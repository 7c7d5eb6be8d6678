//! Float image buffer and the handful of filters the pipeline needs.

use image::GrayImage;

/// Row-major single-channel `f32` image.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Rounds and clamps to 8 bits.
    pub fn to_gray(&self) -> GrayImage {
        let raw = self.data.iter().map(|&v| quantize(v)).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear sample; `None` outside `[0, w-1] × [0, h-1]`.
    ///
    /// Integer coordinates return the stored value exactly.
    #[inline]
    pub fn bilinear(&self, x: f64, y: f64) -> Option<f32> {
        let xmax = (self.width - 1) as f64;
        let ymax = (self.height - 1) as f64;
        if !(x >= 0.0 && y >= 0.0 && x <= xmax && y <= ymax) {
            return None;
        }
        Some(self.bilinear_inner(x, y))
    }

    /// Bilinear sample with edge replication outside the image.
    #[inline]
    pub fn bilinear_clamped(&self, x: f64, y: f64) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        self.bilinear_inner(x, y)
    }

    #[inline]
    fn bilinear_inner(&self, x: f64, y: f64) -> f32 {
        let mut x0 = x.floor() as usize;
        let mut y0 = y.floor() as usize;
        if x0 + 1 >= self.width && self.width > 1 {
            x0 = self.width - 2;
        }
        if y0 + 1 >= self.height && self.height > 1 {
            y0 = self.height - 2;
        }
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let a = self.get(x0, y0);
        let b = self.get(x1, y0);
        let c = self.get(x0, y1);
        let d = self.get(x1, y1);
        let top = a * (1.0 - fx) + b * fx;
        let bottom = c * (1.0 - fx) + d * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Separable Gaussian blur with edge replication. `sigma <= 0` is a copy.
    pub fn gaussian_blur(&self, sigma: f64) -> FloatImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        self.separable(&kernel)
    }

    fn separable(&self, kernel: &[f32]) -> FloatImage {
        let r = (kernel.len() / 2) as isize;
        let (w, h) = (self.width, self.height);
        let mut tmp = FloatImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * self.get_clamped(x as isize + k as isize - r, y as isize);
                }
                tmp.set(x, y, acc);
            }
        }
        let mut out = FloatImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * tmp.get_clamped(x as isize, y as isize + k as isize - r);
                }
                out.set(x, y, acc);
            }
        }
        out
    }

    /// Half-resolution level of a Gaussian pyramid (5-tap binomial prefilter).
    pub fn pyr_down(&self) -> FloatImage {
        let k = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let smooth = self.separable(&k);
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        FloatImage::from_fn(w, h, |x, y| smooth.get(2 * x, 2 * y))
    }

    /// Central-difference gradients with edge replication.
    pub fn gradients(&self) -> (FloatImage, FloatImage) {
        let (w, h) = (self.width, self.height);
        let gx = FloatImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as isize, y as isize);
            0.5 * (self.get_clamped(x + 1, y) - self.get_clamped(x - 1, y))
        });
        let gy = FloatImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as isize, y as isize);
            0.5 * (self.get_clamped(x, y + 1) - self.get_clamped(x, y - 1))
        });
        (gx, gy)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| (v / s) as f32).collect()
}

/// Normalised cross-correlation of two images over pixels where `mask` is set.
pub fn ncc(a: &FloatImage, b: &FloatImage, mask: Option<&[bool]>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    let sel = |i: usize| mask.is_none_or(|m| m[i]);
    let (mut n, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for i in 0..a.data.len() {
        if sel(i) {
            n += 1.0;
            sa += a.data[i] as f64;
            sb += b.data[i] as f64;
        }
    }
    if n < 2.0 {
        return 0.0;
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..a.data.len() {
        if sel(i) {
            let da = a.data[i] as f64 - ma;
            let db = b.data[i] as f64 - mb;
            num += da * db;
            va += da * da;
            vb += db * db;
        }
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    num / (va * vb).sqrt()
}
