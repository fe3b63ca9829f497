//! Verification by thresholded descriptor distance, ROC analysis, image
//! quality metrics, and method reports.

use std::fmt;

use idsr_tensor::Tensor;

use crate::dataset::{Dataset, VerificationPair};
use crate::error::{Error, Result};
use crate::image::{bicubic_upsample, GrayImage};
use crate::losses::{ssim_image, SsimConstants};
use crate::network::Network;

/// Images per inference batch.
const BATCH: usize = 32;

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// How a probe is brought to gallery resolution.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    Generator(&'a Network),
    Bicubic { scale: usize },
    /// Uses the probe's own HR image: the upper bound on accuracy.
    HrBaseline,
}

impl Method<'_> {
    /// Upsamples every sample's LR image (or returns its HR image).
    pub fn upsample_all(&self, samples: &[&crate::dataset::Sample]) -> Result<Vec<GrayImage>> {
        match *self {
            Method::HrBaseline => Ok(samples.iter().map(|s| s.hr.clone()).collect()),
            Method::Bicubic { scale } => samples.iter().map(|s| bicubic_upsample(&s.lr, scale)).collect(),
            Method::Generator(g) => {
                let lrs: Vec<&GrayImage> = samples.iter().map(|s| &s.lr).collect();
                super_resolve_batch(g, &lrs)
            }
        }
    }
}

/// Runs `g` over images in fixed-size batches; order is preserved.
pub fn super_resolve_batch(g: &Network, images: &[&GrayImage]) -> Result<Vec<GrayImage>> {
    let chunks: Vec<&[&GrayImage]> = images.chunks(BATCH).collect();
    let out = crate::parallel::map(&chunks, |chunk| -> Result<Vec<GrayImage>> {
        let t = GrayImage::batch_tensor(chunk)?;
        GrayImage::from_batch_tensor(&g.infer(&t)?)
    });
    Ok(out.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

pub fn super_resolve(g: &Network, lr: &GrayImage) -> Result<GrayImage> {
    Ok(super_resolve_batch(g, &[lr])?.remove(0))
}

/// Descriptor rows for `images`, batched; order is preserved.
pub fn descriptors(f: &Network, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<&[&GrayImage]> = images.chunks(BATCH).collect();
    let out = crate::parallel::map(&chunks, |chunk| -> Result<Vec<Vec<f64>>> {
        let d: Tensor = f.infer_descriptors(&GrayImage::batch_tensor(chunk)?)?;
        let dim = d.shape()[1];
        Ok(d.data().chunks(dim).map(<[f64]>::to_vec).collect())
    });
    Ok(out.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

/// Distance `‖f(G(x_L)) − f(x_H)‖` and the decision `distance < gamma`.
pub fn verify_pair(lr: &GrayImage, hr: &GrayImage, g: &Network, f: &Network, gamma: f64) -> Result<(bool, f64)> {
    let sr = super_resolve(g, lr)?;
    if sr.dims() != hr.dims() {
        return Err(Error::Shape(format!(
            "super-resolved probe is {:?} but the gallery image is {:?}",
            sr.dims(),
            hr.dims()
        )));
    }
    let d = descriptors(f, &[&sr, hr])?;
    let dist = l2(&d[0], &d[1]);
    Ok((dist < gamma, dist))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Pairs with `distance < threshold` are accepted.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// Threshold where the false-accept and false-reject rates are closest.
    pub fn eer_threshold(&self) -> f64 {
        let finite = self.points.iter().filter(|p| p.threshold.is_finite());
        finite
            .min_by(|a, b| {
                let ga = (a.fpr - (1.0 - a.tpr)).abs();
                let gb = (b.fpr - (1.0 - b.tpr)).abs();
                ga.total_cmp(&gb)
            })
            .map_or(f64::INFINITY, |p| p.threshold)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            let t = if p.threshold.is_finite() { format!("{:.9}", p.threshold) } else { "inf".into() };
            s.push_str(&format!("{t},{:.9},{:.9}\n", p.fpr, p.tpr));
        }
        s
    }
}

/// ROC over all observed distances plus a `+∞` sentinel, with trapezoid AUC.
/// Smaller distance means "same identity".
pub fn roc_auc(distances: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if distances.len() != labels.len() {
        return Err(Error::Shape(format!("{} distances vs {} labels", distances.len(), labels.len())));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::Invalid("distances must be finite".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid(format!("ROC needs both classes, got {pos} positive and {neg} negative")));
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = distances[order[i]];
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
        while i < order.len() && distances[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    let auc = points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0).sum();
    Ok(RocCurve { points, auc })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    /// Identical images.
    Infinite,
}

impl Psnr {
    pub fn value(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Finite(10.0 * (1.0 / mse).log10())
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.6}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

fn mse(x: &GrayImage, y: &GrayImage) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    let n = x.pixels().len() as f64;
    Ok(x.pixels().iter().zip(y.pixels()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `10·log10(1/MSE)` for peak value 1.
pub fn psnr(x: &GrayImage, y: &GrayImage) -> Result<Psnr> {
    mse(x, y).map(Psnr::from_mse)
}

/// One row of the method comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    /// Mean `‖f(SR_i) − f(HR_i)‖` over probes.
    pub loss_recog: f64,
    pub auc: f64,
    /// Mean over positive probes; infinite if any probe is reproduced exactly.
    pub psnr: Psnr,
    pub ssim: f64,
    pub roc: RocCurve,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "method,loss_recog,auc,psnr,ssim";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{:.6}",
            self.method, self.loss_recog, self.auc, self.psnr, self.ssim
        )
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{}\n", EvalReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Scores `pairs` of `test` with `method` and extractor `f`.
pub fn evaluate_method(
    name: &str,
    test: &Dataset,
    pairs: &[VerificationPair],
    method: Method<'_>,
    f: &Network,
    consts: &SsimConstants,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no verification pairs to evaluate".into()));
    }
    let n = test.samples.len();
    if let Some(p) = pairs.iter().find(|p| p.probe >= n || p.gallery >= n) {
        return Err(Error::Invalid(format!("pair {p:?} indexes past {n} samples")));
    }
    let all: Vec<&crate::dataset::Sample> = test.samples.iter().collect();
    let sr = method.upsample_all(&all)?;
    let hr: Vec<&GrayImage> = test.samples.iter().map(|s| &s.hr).collect();
    if let Some(s) = sr.first() {
        if s.dims() != hr[0].dims() {
            return Err(Error::Shape(format!("method output {:?} vs gallery {:?}", s.dims(), hr[0].dims())));
        }
    }
    let sr_refs: Vec<&GrayImage> = sr.iter().collect();
    let d_sr = descriptors(f, &sr_refs)?;
    let d_hr = descriptors(f, &hr)?;

    let dists: Vec<f64> = pairs.iter().map(|p| l2(&d_sr[p.probe], &d_hr[p.gallery])).collect();
    let labels: Vec<bool> = pairs.iter().map(|p| p.same_identity).collect();
    let roc = roc_auc(&dists, &labels)?;

    let mut probes: Vec<usize> = pairs.iter().map(|p| p.probe).collect();
    probes.sort_unstable();
    probes.dedup();
    let loss_recog = probes.iter().map(|&i| l2(&d_sr[i], &d_hr[i])).sum::<f64>() / probes.len() as f64;

    let mut positive: Vec<usize> = pairs.iter().filter(|p| p.same_identity).map(|p| p.probe).collect();
    positive.sort_unstable();
    positive.dedup();
    let (mut any_exact, mut ssim_sum) = (false, 0.0);
    let mut psnr_sum = 0.0;
    for &i in &positive {
        match Psnr::from_mse(mse(&sr[i], &test.samples[i].hr)?) {
            Psnr::Infinite => any_exact = true,
            Psnr::Finite(v) => psnr_sum += v,
        }
        ssim_sum += ssim_image(&sr[i], &test.samples[i].hr, consts)?;
    }
    let k = positive.len().max(1) as f64;
    let psnr = if any_exact { Psnr::Infinite } else { Psnr::Finite(psnr_sum / k) };
    Ok(EvalReport {
        method: name.to_string(),
        loss_recog,
        auc: roc.auc,
        psnr,
        ssim: ssim_sum / k,
        roc,
    })
}

/// Probe-by-gallery descriptor distances with a same-identity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub same: Vec<bool>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Means of the same-identity and different-identity cells.
    pub fn class_means(&self) -> (f64, f64) {
        let mean = |want: bool| {
            let v: Vec<f64> = self.values.iter().zip(&self.same).filter(|(_, &s)| s == want).map(|(v, _)| *v).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        (mean(true), mean(false))
    }

    pub fn to_csv(&self) -> String {
        self.values
            .chunks(self.cols)
            .map(|row| row.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }

    pub fn labels_csv(&self) -> String {
        self.same
            .chunks(self.cols)
            .map(|row| row.iter().map(|&s| if s { "1" } else { "0" }).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }

    /// Min-max normalized heat image, one pixel per cell.
    pub fn heat_image(&self) -> Result<GrayImage> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let pixels = self
            .values
            .iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        GrayImage::new(self.cols, self.rows, pixels)
    }
}

/// Entry `(i, j)` is `‖f(method(probe_i)) − f(gallery_j.x_H)‖`.
pub fn distance_matrix(
    probes: &[&crate::dataset::Sample],
    galleries: &[&crate::dataset::Sample],
    method: Method<'_>,
    f: &Network,
) -> Result<DistanceMatrix> {
    if probes.is_empty() || galleries.is_empty() {
        return Err(Error::Invalid("distance matrix needs probes and galleries".into()));
    }
    let sr = method.upsample_all(probes)?;
    let sr_refs: Vec<&GrayImage> = sr.iter().collect();
    let hr: Vec<&GrayImage> = galleries.iter().map(|s| &s.hr).collect();
    let d_sr = descriptors(f, &sr_refs)?;
    let d_hr = descriptors(f, &hr)?;
    let mut values = Vec::with_capacity(probes.len() * galleries.len());
    let mut same = Vec::with_capacity(values.capacity());
    for (p, dp) in probes.iter().zip(&d_sr) {
        for (g, dg) in galleries.iter().zip(&d_hr) {
            values.push(l2(dp, dg));
            same.push(p.label == g.label);
        }
    }
    Ok(DistanceMatrix {
        rows: probes.len(),
        cols: galleries.len(),
        values,
        same,
    })
}
