//! Procedural face-like corpus: parametric identities rendered with nuisance
//! variation, identity-disjoint splits, and probe/gallery pairs.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{degrade, GrayImage};
use crate::pgm::{quantize, read_pgm, write_pgm};

/// Minimum L∞ distance between two identities' normalized parameters.
pub const MIN_SEPARATION: f64 = 0.2;
pub const BACKGROUND: f64 = 0.12;
pub const NOISE_SIGMA: f64 = 0.02;
pub const MAX_SHIFT: i32 = 2;
pub const MANIFEST: &str = "manifest.tsv";

/// `(name, low, high)` for every shape parameter, in storage order.
const RANGES: [(&str, f64, f64); 13] = [
    ("face_a", 0.55, 0.78),
    ("face_b", 0.68, 0.90),
    ("eye_dx", 0.22, 0.40),
    ("eye_y", -0.30, -0.05),
    ("eye_r", 0.07, 0.14),
    ("brow_gap", 0.10, 0.20),
    ("nose_len", 0.12, 0.30),
    ("mouth_y", 0.32, 0.58),
    ("mouth_w", 0.15, 0.38),
    ("mouth_curve", -0.12, 0.12),
    ("hair_y", -0.75, -0.40),
    ("skin", 0.50, 0.85),
    ("hair_tone", 0.05, 0.40),
];

/// One synthetic person. Parameters are stored normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub label: usize,
    unit: [f64; 13],
}

impl Identity {
    pub fn from_unit(label: usize, unit: [f64; 13]) -> Result<Self> {
        if unit.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err(Error::Invalid(format!("identity parameters must lie in [0, 1]: {unit:?}")));
        }
        Ok(Self { label, unit })
    }

    pub fn unit_params(&self) -> &[f64; 13] {
        &self.unit
    }

    fn p(&self, i: usize) -> f64 {
        let (_, lo, hi) = RANGES[i];
        lo + (hi - lo) * self.unit[i]
    }

    /// Named physical parameters, for diagnostics.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        (0..RANGES.len()).map(|i| (RANGES[i].0, self.p(i))).collect()
    }

    pub fn separation(&self, other: &Identity) -> f64 {
        self.unit
            .iter()
            .zip(&other.unit)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Draws `n` identities, resampling any candidate closer than
/// [`MIN_SEPARATION`] to an earlier one.
pub fn generate_identities(n: usize, seed: u64) -> Result<Vec<Identity>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x1d));
    let mut out: Vec<Identity> = Vec::with_capacity(n);
    for label in 0..n {
        let mut attempts = 0;
        loop {
            let unit = std::array::from_fn(|_| rng.random::<f64>());
            let cand = Identity { label, unit };
            if out.iter().all(|o| o.separation(&cand) >= MIN_SEPARATION) {
                out.push(cand);
                break;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Dataset(format!("cannot place {n} identities at separation {MIN_SEPARATION}")));
            }
        }
    }
    Ok(out)
}

/// Per-render nuisance factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variation {
    pub gain: f64,
    /// Multiplicative left-to-right lighting slope.
    pub light: f64,
    pub shift: (i32, i32),
    /// Seed of the additive Gaussian noise; `None` renders noise-free.
    pub noise_seed: Option<u64>,
}

impl Variation {
    pub const NONE: Variation = Variation {
        gain: 1.0,
        light: 0.0,
        shift: (0, 0),
        noise_seed: None,
    };

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            gain: rng.random_range(0.7..=1.3),
            light: rng.random_range(-0.35..=0.35),
            shift: (
                rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
                rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            ),
            noise_seed: Some(rng.random()),
        }
    }
}

/// Low-res / high-res pair with its identity label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub lr: GrayImage,
    pub hr: GrayImage,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConfig {
    pub ids: usize,
    pub per_id: usize,
    /// Side of the square HR images.
    pub hr_size: usize,
    pub scale: usize,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            ids: 32,
            per_id: 16,
            hr_size: 64,
            scale: 8,
            blur_sigma: 2.4,
            seed: 1,
        }
    }
}

fn smooth_step(t: f64, width: f64) -> f64 {
    (0.5 + t / width).clamp(0.0, 1.0)
}

/// Renders the identity at `size×size` with the given nuisance factors.
/// Pixels are clamped and quantized to `k/255`.
pub fn render_hr(id: &Identity, var: &Variation, size: usize) -> Result<GrayImage> {
    if size < 8 {
        return Err(Error::Invalid(format!("render size {size} is too small")));
    }
    let r = size as f64 / 2.0;
    let c = (size as f64 - 1.0) / 2.0;
    let edge = 2.0 / r;
    let (face_a, face_b) = (id.p(0), id.p(1));
    let (eye_dx, eye_y, eye_r) = (id.p(2), id.p(3), id.p(4));
    let brow_y = eye_y - id.p(5);
    let nose_len = id.p(6);
    let (mouth_y, mouth_w, curve) = (id.p(7), id.p(8), id.p(9));
    let hair_y = id.p(10);
    let (skin, hair) = (id.p(11), id.p(12));

    let mut noise = var.noise_seed.map(|s| (ChaCha8Rng::seed_from_u64(s), Normal::new(0.0, NOISE_SIGMA).expect("valid sigma")));
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 - c - f64::from(var.shift.0)) / r;
            let v = (y as f64 - c - f64::from(var.shift.1)) / r;
            let mut val = BACKGROUND;
            let mut paint = |mask: f64, target: f64| val = val * (1.0 - mask) + target * mask;

            let head = 1.0 - ((u / (face_a * 1.08)).powi(2) + (v / (face_b * 1.08)).powi(2)).sqrt();
            paint(smooth_step(head, edge) * smooth_step(hair_y - v, edge), hair);
            let face = 1.0 - ((u / face_a).powi(2) + (v / face_b).powi(2)).sqrt();
            paint(smooth_step(face, edge) * smooth_step(v - hair_y, edge), skin);
            for side in [-1.0, 1.0] {
                let du = u - side * eye_dx;
                let eye = 1.0 - ((du / (eye_r * 1.3)).powi(2) + ((v - eye_y) / (eye_r * 0.8)).powi(2)).sqrt();
                paint(smooth_step(eye, edge), 0.08);
                let brow = smooth_step(0.03 - (v - brow_y).abs(), edge) * smooth_step(eye_r * 1.4 - du.abs(), edge);
                paint(brow, hair * 0.8);
            }
            let nose = smooth_step(0.035 - u.abs(), edge)
                * smooth_step(v - (eye_y + 0.05), edge)
                * smooth_step(eye_y + 0.05 + nose_len - v, edge);
            paint(nose, skin * 0.75);
            let mouth_line = mouth_y + curve * (u / mouth_w).powi(2);
            let mouth = smooth_step(0.04 - (v - mouth_line).abs(), edge) * smooth_step(mouth_w - u.abs(), edge);
            paint(mouth, 0.2);

            let lit = var.gain * (1.0 + var.light * (x as f64 - c) / r);
            let n = noise.as_mut().map_or(0.0, |(rng, d)| d.sample(rng));
            pixels.push(f64::from(quantize(val * lit + n)) / 255.0);
        }
    }
    GrayImage::new(size, size, pixels)
}

/// Renders `id` under the variation drawn from `variation_seed` and derives
/// the low-res image by blur + decimation.
pub fn render_sample(id: &Identity, variation_seed: u64, cfg: &DataConfig) -> Result<Sample> {
    render_with(id, &Variation::sample(variation_seed), cfg)
}

pub fn render_with(id: &Identity, var: &Variation, cfg: &DataConfig) -> Result<Sample> {
    let hr = render_hr(id, var, cfg.hr_size)?;
    let lr = degrade(&hr, cfg.blur_sigma, cfg.scale)?;
    Ok(Sample { lr, hr, label: id.label })
}

/// SplitMix64 finalizer over `seed ⊕ stream`.
fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Variation seed of render `index` of identity `label`.
pub fn variation_seed(seed: u64, label: usize, index: usize) -> u64 {
    mix(mix(seed, label as u64 + 1), index as u64 + 1)
}

/// A set of samples sharing one degradation model.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub scale: usize,
    pub blur_sigma: f64,
}

impl Dataset {
    /// Renders `cfg.ids × cfg.per_id` samples, identity-major.
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        if cfg.ids == 0 || cfg.per_id == 0 {
            return Err(Error::Dataset("need at least one identity and one render".into()));
        }
        let ids = generate_identities(cfg.ids, cfg.seed)?;
        let jobs: Vec<(usize, usize)> = (0..cfg.ids).flat_map(|l| (0..cfg.per_id).map(move |i| (l, i))).collect();
        let samples = crate::parallel::map(&jobs, |&(l, i)| render_sample(&ids[l], variation_seed(cfg.seed, l, i), cfg))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            scale: cfg.scale,
            blur_sigma: cfg.blur_sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct labels in ascending order.
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn hr_dims(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| s.hr.dims())
    }

    fn filtered(&self, keep: impl Fn(usize) -> bool) -> Self {
        Self {
            samples: self.samples.iter().filter(|s| keep(s.label)).cloned().collect(),
            scale: self.scale,
            blur_sigma: self.blur_sigma,
        }
    }

    /// Writes `hr/`, `lr/` PGM files and a `label<TAB>hr<TAB>lr` manifest.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["hr", "lr"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut manifest = String::new();
        for (i, s) in self.samples.iter().enumerate() {
            let hr = format!("hr/{i:05}.pgm");
            let lr = format!("lr/{i:05}.pgm");
            write_pgm(&s.hr, dir.join(&hr))?;
            write_pgm(&s.lr, dir.join(&lr))?;
            manifest.push_str(&format!("{}\t{hr}\t{lr}\n", s.label));
        }
        let path = dir.join(MANIFEST);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    /// Reads an exported directory. The low-res image is recomputed from the
    /// HR file with `blur_sigma`; the stored LR file must agree with it to
    /// within PGM quantization.
    pub fn import(dir: impl AsRef<Path>, blur_sigma: f64) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples = Vec::new();
        let mut scale = None;
        for (n, line) in text.lines().enumerate() {
            let at = |msg: String| Error::Dataset(format!("{}:{}: {msg}", path.display(), n + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [label, hr_path, lr_path] = fields[..] else {
                return Err(at(format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            let label: usize = label.parse().map_err(|_| at(format!("bad label `{label}`")))?;
            let hr = read_pgm(resolve(dir, hr_path))?;
            let stored = read_pgm(resolve(dir, lr_path))?;
            if stored.width() == 0 || hr.width() % stored.width() != 0 || hr.height() != stored.height() * (hr.width() / stored.width()) {
                return Err(at(format!("LR {:?} is not an integer downscale of HR {:?}", stored.dims(), hr.dims())));
            }
            let d = hr.width() / stored.width();
            if *scale.get_or_insert(d) != d {
                return Err(at(format!("mixed scale factors {} and {d}", scale.unwrap_or(d))));
            }
            let lr = degrade(&hr, blur_sigma, d)?;
            let worst = lr
                .pixels()
                .iter()
                .zip(stored.pixels())
                .map(|(a, b)| (a.clamp(0.0, 1.0) - b).abs())
                .fold(0.0, f64::max);
            if worst > 0.5 / 255.0 + 1e-9 {
                return Err(at(format!(
                    "stored LR differs from degrade(HR, sigma={blur_sigma}) by {worst:.4}; wrong blur sigma?"
                )));
            }
            samples.push(Sample { lr, hr, label });
        }
        let scale = scale.ok_or_else(|| Error::Dataset(format!("{}: empty manifest", path.display())))?;
        Ok(Self {
            samples,
            scale,
            blur_sigma,
        })
    }
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Identity-level split: `round(n · train_fraction)` shuffled identities go
/// to the training side.
pub fn split_by_identity(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut labels = ds.labels();
    if labels.len() < 4 {
        return Err(Error::Dataset(format!("need at least 4 identities to split, got {}", labels.len())));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Invalid(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let n_train = (labels.len() as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == labels.len() {
        return Err(Error::Dataset(format!(
            "train fraction {train_fraction} of {} identities leaves an empty split",
            labels.len()
        )));
    }
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 0x5b)));
    let train: BTreeSet<usize> = labels[..n_train].iter().copied().collect();
    Ok((ds.filtered(|l| train.contains(&l)), ds.filtered(|l| !train.contains(&l))))
}

/// Generates the corpus and splits it by identity.
pub fn build_splits(cfg: &DataConfig, train_fraction: f64) -> Result<(Dataset, Dataset)> {
    if cfg.ids < 4 {
        return Err(Error::Dataset(format!("need at least 4 identities, got {}", cfg.ids)));
    }
    split_by_identity(&Dataset::generate(cfg)?, train_fraction, cfg.seed)
}

/// Probe `probe` (its LR side) against gallery `gallery` (its HR side), both
/// indices into the test set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerificationPair {
    pub probe: usize,
    pub gallery: usize,
    pub same_identity: bool,
}

/// All same-identity galleries of each probe plus `negatives_per_probe`
/// sampled different-identity galleries (`None`: all of them). A probe is
/// never paired with its own HR image.
pub fn make_verification_pairs(test: &Dataset, negatives_per_probe: Option<usize>, seed: u64) -> Result<Vec<VerificationPair>> {
    if test.labels().len() < 2 {
        return Err(Error::Dataset("verification pairs need at least 2 identities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x9a));
    let mut pairs = Vec::new();
    for (p, probe) in test.samples.iter().enumerate() {
        let mut negatives = Vec::new();
        for (g, gallery) in test.samples.iter().enumerate() {
            if g == p {
                continue;
            }
            if gallery.label == probe.label {
                pairs.push(VerificationPair {
                    probe: p,
                    gallery: g,
                    same_identity: true,
                });
            } else {
                negatives.push(g);
            }
        }
        if let Some(k) = negatives_per_probe {
            if k > negatives.len() {
                return Err(Error::Dataset(format!(
                    "{k} negatives per probe requested but only {} exist",
                    negatives.len()
                )));
            }
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, negatives.len(), k).into_vec();
            picked.sort_unstable();
            negatives = picked.into_iter().map(|i| negatives[i]).collect();
        }
        pairs.extend(negatives.into_iter().map(|g| VerificationPair {
            probe: p,
            gallery: g,
            same_identity: false,
        }));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            ids: 6,
            per_id: 3,
            hr_size: 32,
            ..DataConfig::default()
        }
    }

    #[test]
    fn identities_respect_margin() {
        let ids = generate_identities(32, 7).unwrap();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                assert!(a.separation(b) >= MIN_SEPARATION);
            }
        }
    }

    #[test]
    fn canonical_render_is_repeatable() {
        let id = &generate_identities(1, 3).unwrap()[0];
        let a = render_with(id, &Variation::NONE, &small()).unwrap();
        let b = render_with(id, &Variation::NONE, &small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stored_lr_is_degraded_hr() {
        let ds = Dataset::generate(&small()).unwrap();
        for s in &ds.samples {
            assert_eq!(s.lr, degrade(&s.hr, 2.4, 8).unwrap());
            assert_eq!(s.lr.dims(), (4, 4));
        }
    }

    #[test]
    fn variation_ranges() {
        for seed in 0..200 {
            let v = Variation::sample(seed);
            assert!((0.7..=1.3).contains(&v.gain));
            assert!(v.shift.0.abs() <= MAX_SHIFT && v.shift.1.abs() <= MAX_SHIFT);
        }
    }

    #[test]
    fn split_arithmetic() {
        let cfg = DataConfig {
            ids: 32,
            per_id: 1,
            hr_size: 16,
            ..DataConfig::default()
        };
        let (train, test) = build_splits(&cfg, 0.75).unwrap();
        assert_eq!((train.labels().len(), test.labels().len()), (24, 8));
        assert!(train.labels().iter().all(|l| !test.labels().contains(l)));
        assert!(build_splits(&cfg, 0.0).is_err());
        assert!(build_splits(&cfg, 1.0).is_err());
    }

    #[test]
    fn pair_enumeration() {
        let cfg = DataConfig {
            ids: 2,
            per_id: 2,
            hr_size: 16,
            ..DataConfig::default()
        };
        let ds = Dataset::generate(&cfg).unwrap();
        let pairs = make_verification_pairs(&ds, Some(1), 0).unwrap();
        assert_eq!(pairs.len(), 8);
        for p in 0..4 {
            let mine: Vec<_> = pairs.iter().filter(|q| q.probe == p).collect();
            assert_eq!(mine.iter().filter(|q| q.same_identity).count(), 1);
            assert_eq!(mine.iter().filter(|q| !q.same_identity).count(), 1);
        }
        let one = Dataset {
            samples: ds.samples[..2].to_vec(),
            ..ds.clone()
        };
        assert!(make_verification_pairs(&one, None, 0).is_err());
    }
}
