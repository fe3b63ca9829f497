//! Training losses over `[B, 1, H, W]` batches, recorded on a tape so their
//! gradients reach the super-resolved pixels.
//!
//! Per-sample norms are smoothed as `√(Σδ² + ε)` with [`NORM_EPS`] because
//! the derivative of `‖·‖` is singular at zero.

use idsr_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::network::Network;

pub const NORM_EPS: f64 = 1e-12;

/// SSIM stabilizers and tile size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
    /// Side of the non-overlapping square tiles.
    pub patch: usize,
}

impl SsimConstants {
    pub fn new(c1: f64, c2: f64, patch: usize) -> Result<Self> {
        if !(c1 > 0.0 && c2 > 0.0) || patch < 2 {
            return Err(Error::Invalid(format!(
                "SSIM constants need c1, c2 > 0 and patch >= 2 (got {c1}, {c2}, {patch})"
            )));
        }
        Ok(Self { c1, c2, patch })
    }

    /// `c1 = (0.01·L)²`, `c2 = (0.03·L)²` for dynamic range `L = 1`.
    pub fn standard(patch: usize) -> Result<Self> {
        Self::new(1e-4, 9e-4, patch)
    }
}

impl Default for SsimConstants {
    fn default() -> Self {
        Self::standard(8).expect("valid defaults")
    }
}

/// Weights of the SSIM and recognition terms in the joint loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl JointWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Invalid(format!("joint weights must be non-negative, got {alpha}, {beta}")));
        }
        Ok(Self { alpha, beta })
    }
}

impl Default for JointWeights {
    /// Setting used for the controlled, frontal datasets.
    fn default() -> Self {
        Self {
            alpha: 1000.0,
            beta: 300.0,
        }
    }
}

fn check_pair(tape: &Tape, sr: Var, hr: Var) -> Result<usize> {
    let (a, b) = (tape.value(sr).shape(), tape.value(hr).shape());
    if a != b {
        return Err(Error::Shape(format!("super-resolved batch {a:?} vs ground truth {b:?}")));
    }
    match a.first() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(Error::Shape(format!("empty batch {a:?}"))),
    }
}

/// Per-sample `√(‖a_i − b_i‖² + ε)` as a `[B]` vector.
fn smoothed_distances(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum_per_sample(sq)?;
    let s = tape.add_scalar(s, NORM_EPS)?;
    Ok(tape.sqrt(s)?)
}

/// Mean of a `[B]` vector, or `Σ ωᵢ vᵢ` with explicit per-sample weights.
fn reduce(tape: &mut Tape, per_sample: Var, weights: Option<&[f64]>) -> Result<Var> {
    match weights {
        None => Ok(tape.mean(per_sample)?),
        Some(w) => {
            let n = tape.value(per_sample).numel();
            if w.len() != n || w.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Invalid(format!("need {n} non-negative sample weights, got {w:?}")));
            }
            let w = tape.constant(Tensor::new(vec![n], w.to_vec())?);
            let m = tape.mul(per_sample, w)?;
            Ok(tape.sum(m)?)
        }
    }
}

/// Mean Frobenius distance between super-resolved and ground-truth images.
pub fn loss_recon(tape: &mut Tape, sr: Var, hr: Var) -> Result<Var> {
    check_pair(tape, sr, hr)?;
    let d = smoothed_distances(tape, sr, hr)?;
    reduce(tape, d, None)
}

/// Per-sample tile-mean SSIM of two `[B, C, H, W]` batches, shape `[B]`.
pub fn ssim_per_sample(tape: &mut Tape, x: Var, y: Var, consts: &SsimConstants) -> Result<Var> {
    check_pair(tape, x, y)?;
    let h = consts.patch;
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[2] % h != 0 || shape[3] % h != 0 {
        return Err(Error::Shape(format!("images {shape:?} are not tiled by {h}x{h} patches")));
    }
    let mu_x = tape.tile_mean(x, h)?;
    let mu_y = tape.tile_mean(y, h)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let e_xx = tape.tile_mean(xx, h)?;
    let e_yy = tape.tile_mean(yy, h)?;
    let e_xy = tape.tile_mean(xy, h)?;
    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let lum_num = tape.scale(mu_xy, 2.0)?;
    let lum_num = tape.add_scalar(lum_num, consts.c1)?;
    let lum_den = tape.add(mu_xx, mu_yy)?;
    let lum_den = tape.add_scalar(lum_den, consts.c1)?;
    let cs_num = tape.scale(cov, 2.0)?;
    let cs_num = tape.add_scalar(cs_num, consts.c2)?;
    let cs_den = tape.add(var_x, var_y)?;
    let cs_den = tape.add_scalar(cs_den, consts.c2)?;

    let num = tape.mul(lum_num, cs_num)?;
    let den = tape.mul(lum_den, cs_den)?;
    let ssim = tape.div(num, den)?;
    let per = tape.sum_per_sample(ssim)?;
    let tiles = (shape[1] * (shape[2] / h) * (shape[3] / h)) as f64;
    Ok(tape.scale(per, 1.0 / tiles)?)
}

/// Mean of `1 − SSIM` over the batch.
pub fn loss_ssim(tape: &mut Tape, sr: Var, hr: Var, consts: &SsimConstants) -> Result<Var> {
    let r = ssim_per_sample(tape, sr, hr, consts)?;
    let one_minus = tape.scale(r, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    reduce(tape, one_minus, None)
}

/// Mean descriptor distance `‖f(SR_i) − f(HR_i)‖` through a frozen extractor.
pub fn loss_recog(tape: &mut Tape, sr: Var, hr: Var, extractor: &Network) -> Result<Var> {
    loss_recog_weighted(tape, sr, hr, extractor, None)
}

/// [`loss_recog`] with explicit per-sample weights `ωᵢ` (default `1/B`).
pub fn loss_recog_weighted(tape: &mut Tape, sr: Var, hr: Var, extractor: &Network, weights: Option<&[f64]>) -> Result<Var> {
    check_pair(tape, sr, hr)?;
    let target = extractor.descriptor(tape, hr)?;
    recog_against(tape, sr, target, extractor, weights)
}

/// [`loss_recog`] against precomputed ground-truth descriptors `[B, D]`.
pub fn loss_recog_to_targets(tape: &mut Tape, sr: Var, targets: &Tensor, extractor: &Network) -> Result<Var> {
    let target = tape.constant(targets.clone());
    recog_against(tape, sr, target, extractor, None)
}

fn recog_against(tape: &mut Tape, sr: Var, target: Var, extractor: &Network, weights: Option<&[f64]>) -> Result<Var> {
    if !extractor.is_frozen() {
        return Err(Error::Invalid("recognition loss needs a frozen feature extractor".into()));
    }
    let feats = extractor.descriptor(tape, sr)?;
    if tape.value(feats).shape() != tape.value(target).shape() {
        return Err(Error::Shape(format!(
            "descriptors {:?} vs targets {:?}",
            tape.value(feats).shape(),
            tape.value(target).shape()
        )));
    }
    let d = smoothed_distances(tape, feats, target)?;
    reduce(tape, d, weights)
}

/// `ℒ_recon + α·ℒ_ssim + β·ℒ_recog`.
pub fn loss_joint(
    tape: &mut Tape,
    sr: Var,
    hr: Var,
    extractor: &Network,
    consts: &SsimConstants,
    weights: &JointWeights,
) -> Result<Var> {
    let recon = loss_recon(tape, sr, hr)?;
    let ssim = loss_ssim(tape, sr, hr, consts)?;
    let recog = loss_recog(tape, sr, hr, extractor)?;
    combine_joint(tape, recon, ssim, recog, weights)
}

pub(crate) fn combine_joint(tape: &mut Tape, recon: Var, ssim: Var, recog: Var, w: &JointWeights) -> Result<Var> {
    let a = tape.scale(ssim, w.alpha)?;
    let b = tape.scale(recog, w.beta)?;
    let s = tape.add(recon, a)?;
    Ok(tape.add(s, b)?)
}

/// SSIM of one patch pair with population statistics.
pub fn ssim_patch(x: &[f64], y: &[f64], consts: &SsimConstants) -> Result<f64> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Shape(format!("patches of {} and {} pixels", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mu_x = x.iter().sum::<f64>() / n;
    let mu_y = y.iter().sum::<f64>() / n;
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mu_x, b - mu_y);
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    let (var_x, var_y, cov) = (var_x / n, var_y / n, cov / n);
    Ok((2.0 * mu_x * mu_y + consts.c1) * (2.0 * cov + consts.c2)
        / ((mu_x * mu_x + mu_y * mu_y + consts.c1) * (var_x + var_y + consts.c2)))
}

/// Mean [`ssim_patch`] over the non-overlapping `h×h` tiling.
pub fn ssim_image(x: &GrayImage, y: &GrayImage, consts: &SsimConstants) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    let (w, h) = x.dims();
    let p = consts.patch;
    if w % p != 0 || h % p != 0 {
        return Err(Error::Shape(format!("{w}x{h} image is not tiled by {p}x{p} patches")));
    }
    let tile = |img: &GrayImage, tx: usize, ty: usize| -> Vec<f64> {
        (0..p)
            .flat_map(|j| (0..p).map(move |i| (i, j)))
            .map(|(i, j)| img.get(tx * p + i, ty * p + j))
            .collect()
    };
    let mut total = 0.0;
    for ty in 0..h / p {
        for tx in 0..w / p {
            total += ssim_patch(&tile(x, tx, ty), &tile(y, tx, ty), consts)?;
        }
    }
    Ok(total / ((w / p) * (h / p)) as f64)
}
