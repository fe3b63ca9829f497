//! Grayscale images, the blur-and-decimate degradation model, and the
//! bicubic baseline upsampler.

use idsr_tensor::Tensor;

use crate::error::{Error, Result};

/// Row-major grayscale image with nominal range `[0, 1]`.
///
/// Values outside the range are allowed in memory (network outputs, for
/// instance); they are clamped only when written to a file.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Invalid("image contains non-finite pixels".into()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Pixel lookup with clamp-to-edge addressing.
    fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.pixels[y * self.width + x]
    }

    #[must_use]
    pub fn clamped(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        }
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.pixels.clone())
            .expect("image pixels are finite")
    }

    /// Stacks equally sized images into a `[B, 1, H, W]` tensor.
    pub fn batch_tensor(images: &[&GrayImage]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Invalid("cannot batch zero images".into()))?;
        let (w, h) = first.dims();
        let mut data = Vec::with_capacity(images.len() * w * h);
        for img in images {
            if img.dims() != (w, h) {
                return Err(Error::Shape(format!(
                    "batch mixes {w}x{h} and {}x{} images",
                    img.width, img.height
                )));
            }
            data.extend_from_slice(&img.pixels);
        }
        Ok(Tensor::new(vec![images.len(), 1, h, w], data)?)
    }

    /// Splits a `[B, 1, H, W]` tensor into images.
    pub fn from_batch_tensor(t: &Tensor) -> Result<Vec<GrayImage>> {
        let &[b, 1, h, w] = t.shape() else {
            return Err(Error::Shape(format!(
                "expected a [B, 1, H, W] tensor, got {:?}",
                t.shape()
            )));
        };
        let plane = h * w;
        (0..b)
            .map(|i| GrayImage::new(w, h, t.data()[i * plane..(i + 1) * plane].to_vec()))
            .collect()
    }
}

/// Normalized, symmetric 1-D Gaussian of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let half: Vec<f64> = (0..=radius)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total = half[0] + 2.0 * half[1..].iter().sum::<f64>();
    let mut kernel: Vec<f64> = half[1..].iter().rev().chain(&half).map(|v| v / total).collect();
    // Mirror so the kernel is exactly symmetric.
    for i in 0..radius {
        kernel[2 * radius - i] = kernel[i];
    }
    Ok(kernel)
}

fn convolve_rows(img: &GrayImage, kernel: &[f64]) -> GrayImage {
    let r = (kernel.len() / 2) as isize;
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            let v = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * img.at_clamped(x + i as isize - r, y))
                .sum();
            out.push(v);
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: out,
    }
}

fn transpose(img: &GrayImage) -> GrayImage {
    GrayImage {
        width: img.height,
        height: img.width,
        pixels: (0..img.width)
            .flat_map(|x| (0..img.height).map(move |y| (x, y)))
            .map(|(x, y)| img.get(x, y))
            .collect(),
    }
}

/// Separable Gaussian blur with replicate borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    let kernel = gaussian_kernel(sigma)?;
    let rows = convolve_rows(img, &kernel);
    Ok(transpose(&convolve_rows(&transpose(&rows), &kernel)))
}

/// Blurs with `sigma` and keeps every `d`-th pixel starting at (0, 0).
pub fn degrade(hr: &GrayImage, sigma: f64, d: usize) -> Result<GrayImage> {
    if d == 0 {
        return Err(Error::Invalid("downsampling factor must be positive".into()));
    }
    for (name, extent) in [("width", hr.width), ("height", hr.height)] {
        if extent % d != 0 {
            return Err(Error::Shape(format!(
                "{name} {extent} must be a multiple of the downsampling factor {d}"
            )));
        }
    }
    let blurred = gaussian_blur(hr, sigma)?;
    let (w, h) = (hr.width / d, hr.height / d);
    GrayImage::from_fn(w, h, |x, y| blurred.get(x * d, y * d))
}

/// Keys cubic convolution weight with `a = -0.5` (Catmull-Rom).
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// 1-D bicubic interpolation matrix (`n·d × n`, row-major) with replicate
/// borders folded in.
pub fn bicubic_matrix(n: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * d * n];
    for o in 0..n * d {
        let base = (o / d) as isize;
        let frac = (o % d) as f64 / d as f64;
        for k in -1..=2isize {
            let src = (base + k).clamp(0, n as isize - 1) as usize;
            m[o * n + src] += cubic_weight(frac - k as f64);
        }
    }
    m
}

/// Dense `[d·h·d·w, h·w]` operator mapping a flattened `h×w` image to its
/// flattened bicubic upsampling.
pub fn bicubic_operator(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!("bicubic operator for {w}x{h} by {d}")));
    }
    let (uy, ux) = (bicubic_matrix(h, d), bicubic_matrix(w, d));
    let (oh, ow) = (h * d, w * d);
    let mut data = vec![0.0; oh * ow * h * w];
    for oy in 0..oh {
        for y in 0..h {
            let a = uy[oy * h + y];
            if a == 0.0 {
                continue;
            }
            for ox in 0..ow {
                let row = (oy * ow + ox) * h * w + y * w;
                for x in 0..w {
                    data[row + x] = a * ux[ox * w + x];
                }
            }
        }
    }
    Ok(Tensor::new(vec![oh * ow, h * w], data)?)
}

/// Bicubic upsampling by `d` with replicate borders.
///
/// Output pixel `X` samples source coordinate `X / d`, the same anchoring
/// that [`degrade`] uses when it keeps pixel `d·i`.
pub fn bicubic_upsample(img: &GrayImage, d: usize) -> Result<GrayImage> {
    if d == 0 {
        return Err(Error::Invalid("upsampling factor must be positive".into()));
    }
    if d == 1 {
        return Ok(img.clone());
    }
    // Per output coordinate: base index and the four tap weights.
    let taps = |n: usize| -> Vec<(isize, [f64; 4])> {
        (0..n * d)
            .map(|o| {
                let base = (o / d) as isize;
                let frac = (o % d) as f64 / d as f64;
                (base, [-1.0, 0.0, 1.0, 2.0].map(|k: f64| cubic_weight(frac - k)))
            })
            .collect()
    };
    let (tx, ty) = (taps(img.width), taps(img.height));
    GrayImage::from_fn(img.width * d, img.height * d, |x, y| {
        let (bx, wx) = tx[x];
        let (by, wy) = ty[y];
        let mut acc = 0.0;
        for (j, wyj) in wy.iter().enumerate() {
            let row: f64 = wx
                .iter()
                .enumerate()
                .map(|(i, wxi)| wxi * img.at_clamped(bx + i as isize - 1, by + j as isize - 1))
                .sum();
            acc += wyj * row;
        }
        acc
    })
}
