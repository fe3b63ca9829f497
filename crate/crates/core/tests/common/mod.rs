#![allow(dead_code)]

use idsr::error::Result;
use idsr::image::{gaussian_kernel, GrayImage};
use idsr::network::{build_extractor, ExtractorConfig, Network};
use idsr_tensor::{finite_diff_grad, relative_error, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `[b, 1, h, w]` batch with pixels uniform in `[0, 1)`.
pub fn random_batch(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor {
    let data = (0..b * h * w).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![b, 1, h, w], data).unwrap()
}

/// Random frozen extractor on `size×size` inputs.
pub fn small_extractor(seed: u64, size: usize) -> Network {
    let cfg = ExtractorConfig {
        input_height: size,
        input_width: size,
        channels: vec![4, 8],
        descriptor_dim: 16,
        classes: 4,
        ..ExtractorConfig::default()
    };
    build_extractor(&cfg, seed).unwrap().frozen_copy()
}

/// Relative error between backward() and central differences of a scalar loss
/// with respect to the super-resolved batch `sr`. The step is 1e-6: with 1e-4
/// a leaky-relu pre-activation inside the extractor occasionally crosses zero
/// within the stencil and the difference quotient straddles the kink.
pub fn sr_gradient_error(sr: &Tensor, loss: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let x = tape.param(sr.clone());
    let l = loss(&mut tape, x).unwrap();
    let analytic = tape.backward(l).unwrap().take(x).unwrap();
    let numeric = finite_diff_grad(
        |p: &Tensor| -> Result<f64> {
            let mut tape = Tape::new();
            let x = tape.constant(p.clone());
            let l = loss(&mut tape, x)?;
            Ok(tape.value(l).item()?)
        },
        sr,
        1e-6,
    )
    .unwrap();
    relative_error(analytic.data(), numeric.data())
}

/// Scalar value of a loss on constant inputs.
pub fn eval_loss(sr: &Tensor, hr: &Tensor, loss: impl Fn(&mut Tape, Var, Var) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(sr.clone());
    let b = tape.constant(hr.clone());
    let l = loss(&mut tape, a, b).unwrap();
    tape.value(l).item().unwrap()
}

/// Dense 2-D convolution with the outer-product kernel and replicate borders.
pub fn dense_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let k = gaussian_kernel(sigma).unwrap();
    let r = (k.len() / 2) as isize;
    let (w, h) = img.dims();
    GrayImage::from_fn(w, h, |x, y| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                acc += k[(dy + r) as usize] * k[(dx + r) as usize] * img.get(sx, sy);
            }
        }
        acc
    })
    .unwrap()
}
