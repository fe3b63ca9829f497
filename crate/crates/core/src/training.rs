//! Two-stage training: the extractor on identity classification, then the
//! generator against the frozen extractor.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use idsr_tensor::{OptimizerState, RmsPropConfig, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::losses::{combine_joint, loss_recog_to_targets, loss_recon, loss_ssim, JointWeights, SsimConstants};
use crate::network::{build_extractor, build_generator, BoundParams, ExtractorConfig, GeneratorConfig, Network};

/// Images per evaluation batch.
const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Recon,
    Ssim,
    Recog,
    Joint,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Recon, LossKind::Ssim, LossKind::Recog, LossKind::Joint];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Recon => "recon",
            LossKind::Ssim => "ssim",
            LossKind::Recog => "recog",
            LossKind::Joint => "joint",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown loss `{s}` (expected recon, ssim, recog or joint)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub weights: JointWeights,
    pub optimizer: RmsPropConfig,
    pub batch_size: usize,
    pub extractor_epochs: usize,
    pub generator_epochs: usize,
    /// Weight decay on the extractor.
    pub lambda1: f64,
    /// Weight decay on the generator.
    pub lambda2: f64,
    pub seed: u64,
    pub ssim: SsimConstants,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Recog,
            weights: JointWeights::default(),
            optimizer: RmsPropConfig::default(),
            batch_size: 8,
            extractor_epochs: 30,
            generator_epochs: 6,
            lambda1: 1e-4,
            lambda2: 1e-4,
            seed: 1,
            ssim: SsimConstants::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Invalid("weight-decay coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractorEpoch {
    /// 0 is the untrained network.
    pub epoch: usize,
    /// Mean cross-entropy over the training set.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedExtractor {
    /// Frozen, ready for the second stage.
    pub network: Network,
    pub optimizer: OptimizerState,
    pub history: Vec<ExtractorEpoch>,
    /// Dataset label of each logit, ascending.
    pub classes: Vec<usize>,
}

impl TrainedExtractor {
    pub fn final_accuracy(&self) -> f64 {
        self.history.last().map_or(0.0, |e| e.accuracy)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.network.clone()).with_optimizer(self.optimizer.clone(), self.history.len() - 1);
        let classes = self.classes.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        ck.meta.insert("classes".into(), classes);
        ck
    }
}

pub fn extractor_history_csv(history: &[ExtractorEpoch]) -> String {
    let mut s = String::from("epoch,loss,accuracy\n");
    for e in history {
        s.push_str(&format!("{},{:.9},{:.9}\n", e.epoch, e.loss, e.accuracy));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    /// The optimized loss (without weight decay).
    pub selected: f64,
    pub recon: f64,
    /// NaN when the images are not tiled by the SSIM patch.
    pub ssim: f64,
    pub recog: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedGenerator {
    pub network: Network,
    pub optimizer: OptimizerState,
    pub history: Vec<GeneratorEpoch>,
    pub loss: LossKind,
}

impl TrainedGenerator {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.network.clone()).with_optimizer(self.optimizer.clone(), self.history.len() - 1);
        ck.meta.insert("loss".into(), self.loss.name().into());
        ck
    }
}

pub fn generator_history_csv(history: &[GeneratorEpoch]) -> String {
    let mut s = String::from("epoch,loss_selected,loss_recon,loss_ssim,loss_recog\n");
    for e in history {
        s.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9}\n",
            e.epoch, e.selected, e.recon, e.ssim, e.recog
        ));
    }
    s
}

/// SplitMix-style stream separation for the training seed.
fn stream(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(k.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn optimizer_for(net: &Network, cfg: &RmsPropConfig) -> Result<OptimizerState> {
    let shapes: Vec<Vec<usize>> = net.parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
    Ok(OptimizerState::new(*cfg, shapes.iter().map(Vec::as_slice))?)
}

/// `Σ θ²` over bound parameters, recorded on the tape.
fn squared_norm(tape: &mut Tape, params: &BoundParams) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in params.vars() {
        let sq = tape.mul(p, p)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    total.ok_or_else(|| Error::Invalid("network has no parameters to train".into()))
}

fn diverged(epoch: usize, reason: String, net: &Network, opt: &OptimizerState) -> Error {
    Error::Diverged {
        epoch,
        reason,
        last_good: Box::new(Checkpoint::new(net.clone()).with_optimizer(opt.clone(), epoch.saturating_sub(1))),
    }
}

/// One pass over `order` in minibatches. `batch_loss` records the data term;
/// `lambda·Σθ²` is added when `lambda > 0`.
fn run_epoch(
    net: &mut Network,
    opt: &mut OptimizerState,
    order: &[usize],
    batch: usize,
    lambda: f64,
    epoch: usize,
    mut batch_loss: impl FnMut(&mut Tape, &Network, &BoundParams, &[usize]) -> Result<Var>,
) -> Result<()> {
    for idx in order.chunks(batch) {
        let mut tape = Tape::new();
        let params = net.bind(&mut tape);
        let mut loss = batch_loss(&mut tape, net, &params, idx)?;
        if lambda > 0.0 {
            let reg = squared_norm(&mut tape, &params)?;
            let reg = tape.scale(reg, lambda)?;
            loss = tape.add(loss, reg)?;
        }
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(diverged(epoch, format!("loss became {value}"), net, opt));
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = params
            .vars()
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
            .collect();
        let snapshot = (net.clone(), opt.clone());
        let mut named = net.parameters_mut();
        let mut slots: Vec<(&str, &mut Tensor)> = named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        match opt.step(&mut slots, &grad_refs) {
            Ok(()) => {}
            Err(TensorError::NonFiniteGradient { name }) => {
                return Err(diverged(epoch, format!("non-finite gradient in `{name}`"), &snapshot.0, &snapshot.1));
            }
            Err(e) => return Err(e.into()),
        }
        net.round_to_f32();
        opt.round_to_f32();
        if let Some((name, _)) = net.parameters().into_iter().find(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
            return Err(diverged(epoch, format!("parameter `{name}` overflowed"), &snapshot.0, &snapshot.1));
        }
    }
    Ok(())
}

fn batch_of(ds: &Dataset, idx: &[usize], hr: bool) -> Result<Tensor> {
    let imgs: Vec<&GrayImage> = idx
        .iter()
        .map(|&i| if hr { &ds.samples[i].hr } else { &ds.samples[i].lr })
        .collect();
    GrayImage::batch_tensor(&imgs)
}

/// Mean cross-entropy and accuracy of `f` on `(x_H, y)`.
fn classify_stats(f: &Network, ds: &Dataset, targets: &[usize]) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_BATCH).collect();
    let parts = crate::parallel::map(&chunks, |chunk| -> Result<(f64, usize)> {
        let logits = f.infer(&batch_of(ds, chunk, true)?)?;
        let k = logits.shape()[1];
        let (mut ce, mut correct) = (0.0, 0);
        for (row, &i) in logits.data().chunks(k).zip(chunk.iter()) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            ce += lse - row[targets[i]];
            let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
            correct += usize::from(best == targets[i]);
        }
        Ok((ce, correct))
    });
    let (mut ce, mut correct) = (0.0, 0);
    for p in parts {
        let (c, n) = p?;
        ce += c;
        correct += n;
    }
    Ok((ce / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Stage 1: softmax cross-entropy over identities plus `λ1·Σθ²`, by RMSProp
/// over seeded shuffled minibatches. `cfg.classes` is replaced by the number
/// of identities in `train`.
pub fn train_extractor(train: &Dataset, cfg: &ExtractorConfig, tcfg: &TrainConfig) -> Result<TrainedExtractor> {
    tcfg.validate()?;
    let classes = train.labels();
    if classes.len() < 2 {
        return Err(Error::Dataset(format!("extractor training needs >= 2 identities, got {}", classes.len())));
    }
    let dense: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let targets: Vec<usize> = train.samples.iter().map(|s| dense[&s.label]).collect();
    let cfg = ExtractorConfig {
        classes: classes.len(),
        ..cfg.clone()
    };
    let mut f = build_extractor(&cfg, stream(tcfg.seed, 1))?;
    let mut opt = optimizer_for(&f, &tcfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream(tcfg.seed, 2));

    let (loss, accuracy) = classify_stats(&f, train, &targets)?;
    let mut history = vec![ExtractorEpoch { epoch: 0, loss, accuracy }];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=tcfg.extractor_epochs {
        order.shuffle(&mut rng);
        run_epoch(&mut f, &mut opt, &order, tcfg.batch_size, tcfg.lambda1, epoch, |tape, net, params, idx| {
            let x = tape.constant(batch_of(train, idx, true)?);
            let logits = net.run(tape, params, x)?;
            let labels: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            Ok(tape.softmax_cross_entropy(logits, &labels)?)
        })?;
        let (loss, accuracy) = classify_stats(&f, train, &targets)?;
        if !loss.is_finite() {
            return Err(diverged(epoch, format!("training loss became {loss}"), &f, &opt));
        }
        history.push(ExtractorEpoch { epoch, loss, accuracy });
    }
    f.freeze();
    Ok(TrainedExtractor {
        network: f,
        optimizer: opt,
        history,
        classes,
    })
}

fn tiled(ds: &Dataset, patch: usize) -> bool {
    ds.hr_dims().is_some_and(|(w, h)| w % patch == 0 && h % patch == 0)
}

/// The three losses (and the selected one) of `g` on a whole dataset.
fn generator_stats(
    g: &Network,
    f: &Network,
    ds: &Dataset,
    targets: &[Vec<f64>],
    tcfg: &TrainConfig,
    epoch: usize,
) -> Result<GeneratorEpoch> {
    let with_ssim = tiled(ds, tcfg.ssim.patch);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_BATCH).collect();
    let parts = crate::parallel::map(&chunks, |chunk| -> Result<[f64; 3]> {
        let sr = g.infer(&batch_of(ds, chunk, false)?)?;
        let mut tape = Tape::new();
        let sr = tape.constant(sr);
        let hr = tape.constant(batch_of(ds, chunk, true)?);
        let recon = loss_recon(&mut tape, sr, hr)?;
        let ssim = if with_ssim {
            let v = loss_ssim(&mut tape, sr, hr, &tcfg.ssim)?;
            tape.value(v).item()?
        } else {
            f64::NAN
        };
        let rows: Vec<f64> = chunk.iter().flat_map(|&i| targets[i].iter().copied()).collect();
        let t = Tensor::new(vec![chunk.len(), targets[0].len()], rows)?;
        let recog = loss_recog_to_targets(&mut tape, sr, &t, f)?;
        let n = chunk.len() as f64;
        Ok([tape.value(recon).item()? * n, ssim * n, tape.value(recog).item()? * n])
    });
    let mut sums = [0.0; 3];
    for p in parts {
        for (s, v) in sums.iter_mut().zip(p?) {
            *s += v;
        }
    }
    let n = ds.len() as f64;
    let [recon, ssim, recog] = sums.map(|s| s / n);
    let w = &tcfg.weights;
    let selected = match tcfg.loss {
        LossKind::Recon => recon,
        LossKind::Ssim => ssim,
        LossKind::Recog => recog,
        LossKind::Joint => recon + w.alpha * ssim + w.beta * recog,
    };
    Ok(GeneratorEpoch {
        epoch,
        selected,
        recon,
        ssim,
        recog,
    })
}

/// Stage 2: minimizes the selected loss plus `λ2·Σθ²` over the generator
/// only. `f` must be frozen and is verified unchanged afterwards.
pub fn train_generator(train: &Dataset, f: &Network, cfg: &GeneratorConfig, tcfg: &TrainConfig) -> Result<TrainedGenerator> {
    let g = build_generator(cfg, stream(tcfg.seed, 3))?;
    train_generator_from(train, f, g, tcfg)
}

/// [`train_generator`] starting from an existing generator.
pub fn train_generator_from(train: &Dataset, f: &Network, mut g: Network, tcfg: &TrainConfig) -> Result<TrainedGenerator> {
    tcfg.validate()?;
    if !f.is_frozen() {
        return Err(Error::Invalid(
            "the feature extractor must be trained and frozen before generator training".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if g.scale() != Some(train.scale) {
        return Err(Error::Invalid(format!(
            "generator scale {:?} does not match the dataset's factor {}",
            g.scale(),
            train.scale
        )));
    }
    let needs_ssim = matches!(tcfg.loss, LossKind::Ssim | LossKind::Joint);
    if needs_ssim && !tiled(train, tcfg.ssim.patch) {
        let (w, h) = train.hr_dims().unwrap_or_default();
        return Err(Error::Shape(format!(
            "{w}x{h} images are not tiled by the {p}x{p} SSIM patch",
            p = tcfg.ssim.patch
        )));
    }
    let f_sum = f.checksum();
    let hr: Vec<&GrayImage> = train.samples.iter().map(|s| &s.hr).collect();
    let targets = crate::eval::descriptors(f, &hr)?;
    let dim = targets[0].len();

    let mut opt = optimizer_for(&g, &tcfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream(tcfg.seed, 4));
    let mut history = vec![generator_stats(&g, f, train, &targets, tcfg, 0)?];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=tcfg.generator_epochs {
        order.shuffle(&mut rng);
        run_epoch(&mut g, &mut opt, &order, tcfg.batch_size, tcfg.lambda2, epoch, |tape, net, params, idx| {
            let x = tape.constant(batch_of(train, idx, false)?);
            let sr = net.run(tape, params, x)?;
            let hr = tape.constant(batch_of(train, idx, true)?);
            let rows: Vec<f64> = idx.iter().flat_map(|&i| targets[i].iter().copied()).collect();
            let t = Tensor::new(vec![idx.len(), dim], rows)?;
            match tcfg.loss {
                LossKind::Recon => loss_recon(tape, sr, hr),
                LossKind::Ssim => loss_ssim(tape, sr, hr, &tcfg.ssim),
                LossKind::Recog => loss_recog_to_targets(tape, sr, &t, f),
                LossKind::Joint => {
                    let recon = loss_recon(tape, sr, hr)?;
                    let ssim = loss_ssim(tape, sr, hr, &tcfg.ssim)?;
                    let recog = loss_recog_to_targets(tape, sr, &t, f)?;
                    combine_joint(tape, recon, ssim, recog, &tcfg.weights)
                }
            }
        })?;
        let stats = generator_stats(&g, f, train, &targets, tcfg, epoch)?;
        if !stats.selected.is_finite() {
            return Err(diverged(epoch, format!("training loss became {}", stats.selected), &g, &opt));
        }
        history.push(stats);
    }
    if f.checksum() != f_sum {
        return Err(Error::Invalid("feature extractor parameters changed during generator training".into()));
    }
    Ok(TrainedGenerator {
        network: g,
        optimizer: opt,
        history,
        loss: tcfg.loss,
    })
}
