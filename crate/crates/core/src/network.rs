//! The generator `G` (LR → d×LR) and the feature extractor `f` (HR image →
//! descriptor, plus identity logits for its own training).

use idsr_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Transposed-convolution geometry of one ×2 upsampling stage.
pub const UPSAMPLE_KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Magnification `d`; a power of two.
    pub scale: usize,
    /// Feature widths: entry 0 after the head convolution, entry `s` after
    /// upsampling stage `s`. Length `log2(d) + 1`.
    pub channels: Vec<usize>,
    pub head_kernel: usize,
    /// Kernel of the convolution following each upsampling stage; `None`
    /// skips those convolutions.
    pub refine_kernel: Option<usize>,
    pub tail_kernel: usize,
    pub leaky_slope: f64,
    /// Adds the fixed bicubic upsampling of the input to the output, so the
    /// layers learn a residual.
    pub bicubic_skip: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            scale: 8,
            channels: vec![32, 32, 16, 8],
            head_kernel: 3,
            refine_kernel: Some(3),
            tail_kernel: 3,
            leaky_slope: 0.2,
            bicubic_skip: true,
        }
    }
}

impl GeneratorConfig {
    pub fn stages(&self) -> Result<usize> {
        if self.scale == 0 || !self.scale.is_power_of_two() {
            return Err(Error::Invalid(format!("scale {} is not a power of two", self.scale)));
        }
        Ok(self.scale.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stages()?;
        if self.channels.len() != stages + 1 {
            return Err(Error::Invalid(format!(
                "scale {} needs {} channel widths, got {:?}",
                self.scale,
                stages + 1,
                self.channels
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Invalid("channel widths must be positive".into()));
        }
        let kernels = [Some(self.head_kernel), self.refine_kernel, Some(self.tail_kernel)];
        if kernels.iter().flatten().any(|k| k % 2 == 0) {
            return Err(Error::Invalid("generator kernels must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Invalid(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Widths of the stride-2 convolution stages.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub descriptor_dim: usize,
    pub classes: usize,
    pub leaky_slope: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            channels: vec![8, 16, 32, 32],
            kernel: 3,
            descriptor_dim: 64,
            classes: 24,
            leaky_slope: 0.2,
        }
    }
}

impl ExtractorConfig {
    /// Spatial size after the convolution trunk.
    fn trunk_output(&self) -> Result<(usize, usize)> {
        let pad = self.kernel / 2;
        let mut hw = (self.input_height, self.input_width);
        for _ in &self.channels {
            let step = |n: usize| (n + 2 * pad).checked_sub(self.kernel).map(|v| v / 2 + 1);
            match (step(hw.0), step(hw.1)) {
                (Some(h), Some(w)) => hw = (h, w),
                _ => {
                    return Err(Error::Invalid(format!(
                        "{}x{} input is too small for {} stride-2 stages",
                        self.input_height,
                        self.input_width,
                        self.channels.len()
                    )))
                }
            }
        }
        Ok(hw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.descriptor_dim < 2 || self.classes < 2 {
            return Err(Error::Invalid(format!(
                "descriptor dim {} and class count {} must both be >= 2",
                self.descriptor_dim, self.classes
            )));
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.kernel % 2 == 0 {
            return Err(Error::Invalid("extractor needs positive stage widths and an odd kernel".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Invalid(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        self.trunk_output().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    Generator(GeneratorConfig),
    Extractor(ExtractorConfig),
    /// Generator stub that returns its input.
    Identity,
    /// Extractor stub whose descriptor is the flattened `height×width` image.
    FlattenStub { height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d { weight: Tensor, bias: Tensor, stride: usize, pad: usize },
    ConvTranspose2d { weight: Tensor, bias: Tensor, stride: usize, pad: usize },
    LeakyRelu { slope: f64 },
    Flatten,
    Linear { weight: Tensor, bias: Tensor },
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv",
            Layer::ConvTranspose2d { .. } => "up",
            Layer::LeakyRelu { .. } => "act",
            Layer::Flatten => "flatten",
            Layer::Linear { .. } => "fc",
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::ConvTranspose2d { weight, bias, .. } | Layer::Linear { weight, bias } => {
                vec![weight, bias]
            }
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::ConvTranspose2d { weight, bias, .. } | Layer::Linear { weight, bias } => {
                vec![weight, bias]
            }
            _ => vec![],
        }
    }
}

/// Bicubic upsampling of `[B, 1, h, w]` as a constant linear map.
fn bicubic_skip(tape: &mut Tape, x: Var, d: usize) -> Result<Var> {
    let &[b, _, h, w] = tape.value(x).shape() else {
        return Err(Error::Shape("bicubic skip needs a 4-D input".into()));
    };
    let op = tape.constant(crate::image::bicubic_operator(h, w, d)?);
    let zero = tape.constant(Tensor::zeros(&[h * d * w * d]));
    let flat = tape.flatten(x)?;
    let up = tape.linear(flat, op, zero)?;
    Ok(tape.reshape(up, &[b, 1, h * d, w * d])?)
}

/// Parameters of a network placed on a tape, in [`Network::parameters`] order.
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    /// Uses caller-provided vars, in [`Network::parameters`] order.
    pub fn from_vars(net: &Network, vars: Vec<Var>) -> Result<Self> {
        let want = net.parameters().len();
        if vars.len() != want {
            return Err(Error::Shape(format!("network has {want} parameter tensors, got {} vars", vars.len())));
        }
        Ok(Self(vars))
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    layers: Vec<Layer>,
    /// Number of leading layers whose output is the descriptor.
    descriptor_tap: Option<usize>,
    frozen: bool,
}

/// Glorot-uniform weights, zero bias, snapped to the `f32` grid.
fn init(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut w = Tensor::uniform(shape, bound, rng);
    w.round_to_f32();
    (w, Tensor::zeros(&shape[..1]))
}

fn conv(cout: usize, cin: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Layer {
    let (weight, bias) = init(&[cout, cin, k, k], cin * k * k, cout * k * k, rng);
    Layer::Conv2d { weight, bias, stride, pad: k / 2 }
}

fn upsample(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Layer {
    let k = UPSAMPLE_KERNEL;
    let (weight, _) = init(&[cin, cout, k, k], cin * k * k, cout * k * k, rng);
    Layer::ConvTranspose2d {
        weight,
        bias: Tensor::zeros(&[cout]),
        stride: 2,
        pad: 1,
    }
}

fn linear(out: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Layer {
    let (weight, bias) = init(&[out, fan_in], fan_in, out, rng);
    Layer::Linear { weight, bias }
}

/// Builds `G`: head conv, `log2(d)` ×2 transposed-conv stages (each
/// optionally followed by a conv), and a linear 1-channel tail conv.
pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = Layer::LeakyRelu { slope: cfg.leaky_slope };
    let mut layers = vec![conv(cfg.channels[0], 1, cfg.head_kernel, 1, &mut rng), act.clone()];
    for pair in cfg.channels.windows(2) {
        layers.push(upsample(pair[0], pair[1], &mut rng));
        layers.push(act.clone());
        if let Some(k) = cfg.refine_kernel {
            layers.push(conv(pair[1], pair[1], k, 1, &mut rng));
            layers.push(act.clone());
        }
    }
    let last = *cfg.channels.last().expect("validated");
    layers.push(conv(1, last, cfg.tail_kernel, 1, &mut rng));
    Ok(Network {
        arch: Architecture::Generator(cfg.clone()),
        layers,
        descriptor_tap: None,
        frozen: false,
    })
}

/// Builds `f`: stride-2 conv trunk, a `D`-wide descriptor layer, and an
/// identity-logits head.
pub fn build_extractor(cfg: &ExtractorConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = Layer::LeakyRelu { slope: cfg.leaky_slope };
    let mut layers = Vec::new();
    let mut cin = 1;
    for &c in &cfg.channels {
        layers.push(conv(c, cin, cfg.kernel, 2, &mut rng));
        layers.push(act.clone());
        cin = c;
    }
    let (h, w) = cfg.trunk_output()?;
    layers.push(Layer::Flatten);
    layers.push(linear(cfg.descriptor_dim, cin * h * w, &mut rng));
    layers.push(act);
    let tap = layers.len();
    layers.push(linear(cfg.classes, cfg.descriptor_dim, &mut rng));
    Ok(Network {
        arch: Architecture::Extractor(cfg.clone()),
        layers,
        descriptor_tap: Some(tap),
        frozen: false,
    })
}

impl Network {
    /// Generator stub: `G(x) = x`.
    pub fn identity() -> Self {
        Self {
            arch: Architecture::Identity,
            layers: vec![],
            descriptor_tap: None,
            frozen: true,
        }
    }

    /// Extractor stub: the descriptor is the flattened image.
    pub fn flatten_stub(height: usize, width: usize) -> Self {
        Self {
            arch: Architecture::FlattenStub { height, width },
            layers: vec![Layer::Flatten],
            descriptor_tap: Some(1),
            frozen: true,
        }
    }

    /// Reassembles a network from an architecture and matching parameters.
    pub(crate) fn from_parts(arch: Architecture, params: Vec<Tensor>, frozen: bool) -> Result<Self> {
        let mut net = match &arch {
            Architecture::Generator(cfg) => build_generator(cfg, 0)?,
            Architecture::Extractor(cfg) => build_extractor(cfg, 0)?,
            Architecture::Identity => Self::identity(),
            Architecture::FlattenStub { height, width } => Self::flatten_stub(*height, *width),
        };
        let slots = net.parameters_mut();
        if slots.len() != params.len() {
            return Err(Error::Shape(format!(
                "architecture has {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for ((name, slot), p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: expected {:?}, got {:?}",
                    slot.shape(),
                    p.shape()
                )));
            }
            *slot = p;
        }
        net.frozen = frozen;
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    #[must_use]
    pub fn frozen_copy(&self) -> Self {
        let mut c = self.clone();
        c.frozen = true;
        c
    }

    /// Magnification of a generator (1 for the identity stub).
    pub fn scale(&self) -> Option<usize> {
        match &self.arch {
            Architecture::Generator(cfg) => Some(cfg.scale),
            Architecture::Identity => Some(1),
            _ => None,
        }
    }

    /// Spatial input `(height, width)` an extractor requires.
    pub fn input_size(&self) -> Option<(usize, usize)> {
        match &self.arch {
            Architecture::Extractor(cfg) => Some((cfg.input_height, cfg.input_width)),
            Architecture::FlattenStub { height, width } => Some((*height, *width)),
            _ => None,
        }
    }

    pub fn descriptor_dim(&self) -> Option<usize> {
        match &self.arch {
            Architecture::Extractor(cfg) => Some(cfg.descriptor_dim),
            Architecture::FlattenStub { height, width } => Some(height * width),
            _ => None,
        }
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (p, suffix) in layer.params().into_iter().zip(["weight", "bias"]) {
                out.push((format!("{}{i}.{suffix}", layer.kind()), p));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let kind = layer.kind();
            for (p, suffix) in layer.params_mut().into_iter().zip(["weight", "bias"]) {
                out.push((format!("{kind}{i}.{suffix}"), p));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.parameters().iter().map(|(_, t)| t.sum_squares()).sum()
    }

    /// FNV-1a over the bit patterns of all parameters.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.parameters() {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Places the parameters on `tape`; they require gradients unless the
    /// network is frozen.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams(
            self.parameters()
                .into_iter()
                .map(|(_, t)| tape.leaf(t.clone().with_requires_grad(!self.frozen)))
                .collect(),
        )
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        let &[_, 1, h, w] = shape else {
            return Err(Error::Shape(format!("network input must be [B, 1, H, W], got {shape:?}")));
        };
        if let Some((eh, ew)) = self.input_size() {
            if (h, w) != (eh, ew) {
                return Err(Error::Shape(format!(
                    "extractor expects {ew}x{eh} images, got {w}x{h}"
                )));
            }
        }
        Ok(())
    }

    /// Runs the first `n` layers using already-bound parameters.
    fn run_prefix(&self, tape: &mut Tape, params: &BoundParams, x: Var, n: usize) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut vars = params.0.iter().copied();
        let mut next = || vars.next().expect("bound params match layers");
        let mut h = x;
        for layer in &self.layers[..n] {
            h = match *layer {
                Layer::Conv2d { stride, pad, .. } => {
                    let (w, b) = (next(), next());
                    tape.conv2d(h, w, b, stride, pad)?
                }
                Layer::ConvTranspose2d { stride, pad, .. } => {
                    let (w, b) = (next(), next());
                    let up = tape.conv2d_transpose(h, w, stride, pad)?;
                    tape.bias_add(up, b)?
                }
                Layer::LeakyRelu { slope } => tape.leaky_relu(h, slope)?,
                Layer::Flatten => tape.flatten(h)?,
                Layer::Linear { .. } => {
                    let (w, b) = (next(), next());
                    tape.linear(h, w, b)?
                }
            };
        }
        Ok(h)
    }

    /// Full forward pass with bound parameters: super-resolved images for a
    /// generator, identity logits for an extractor.
    pub fn run(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let out = self.run_prefix(tape, params, x, self.layers.len())?;
        match &self.arch {
            Architecture::Generator(cfg) if cfg.bicubic_skip => {
                let skip = bicubic_skip(tape, x, cfg.scale)?;
                Ok(tape.add(out, skip)?)
            }
            _ => Ok(out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let params = self.bind(tape);
        self.run(tape, &params, x)
    }

    /// Descriptor `[B, D]` from the penultimate activation.
    pub fn descriptor(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let tap = self
            .descriptor_tap
            .ok_or_else(|| Error::Invalid("network has no descriptor output".into()))?;
        let params = self.bind(tape);
        self.run_prefix(tape, &params, x, tap)
    }

    /// Descriptor with bound parameters.
    pub fn descriptor_bound(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let tap = self
            .descriptor_tap
            .ok_or_else(|| Error::Invalid("network has no descriptor output".into()))?;
        self.run_prefix(tape, params, x, tap)
    }

    /// Evaluates on a constant batch without keeping the tape.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let frozen = self.frozen_copy();
        let y = frozen.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Descriptors `[B, D]` of a constant batch.
    pub fn infer_descriptors(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let frozen = self.frozen_copy();
        let y = frozen.descriptor(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Snaps parameters to the `f32` storage grid.
    pub fn round_to_f32(&mut self) {
        for (_, p) in self.parameters_mut() {
            p.round_to_f32();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GrayImage;

    #[test]
    fn generator_shape_contract() {
        let g = build_generator(&GeneratorConfig::default(), 1).unwrap();
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        assert_eq!(g.infer(&x).unwrap().shape(), &[2, 1, 64, 64]);
        let x = Tensor::zeros(&[1, 1, 5, 3]);
        assert_eq!(g.infer(&x).unwrap().shape(), &[1, 1, 40, 24]);

        let cfg = GeneratorConfig {
            scale: 2,
            channels: vec![4, 4],
            refine_kernel: None,
            ..GeneratorConfig::default()
        };
        let g = build_generator(&cfg, 1).unwrap();
        assert_eq!(g.infer(&Tensor::zeros(&[1, 1, 4, 4])).unwrap().shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn bicubic_skip_adds_bicubic() {
        let img = GrayImage::from_fn(4, 4, |x, y| ((x + 2 * y) % 3) as f64 / 2.0).unwrap();
        let base = GeneratorConfig {
            scale: 2,
            channels: vec![3, 2],
            bicubic_skip: false,
            ..GeneratorConfig::default()
        };
        let plain = build_generator(&base, 7).unwrap().infer(&img.to_tensor()).unwrap();
        let with = GeneratorConfig {
            bicubic_skip: true,
            ..base
        };
        let skip = build_generator(&with, 7).unwrap().infer(&img.to_tensor()).unwrap();
        let bic = crate::image::bicubic_upsample(&img, 2).unwrap();
        for ((s, p), b) in skip.data().iter().zip(plain.data()).zip(bic.pixels()) {
            assert!((s - p - b).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_rejects_non_power_of_two() {
        let cfg = GeneratorConfig {
            scale: 6,
            ..GeneratorConfig::default()
        };
        assert!(build_generator(&cfg, 0).is_err());
        let cfg = GeneratorConfig {
            channels: vec![8, 8],
            ..GeneratorConfig::default()
        };
        assert!(build_generator(&cfg, 0).is_err());
    }

    #[test]
    fn seeding_is_deterministic() {
        let cfg = GeneratorConfig::default();
        assert_eq!(build_generator(&cfg, 5).unwrap(), build_generator(&cfg, 5).unwrap());
        let e = ExtractorConfig::default();
        assert_ne!(
            build_extractor(&e, 1).unwrap().checksum(),
            build_extractor(&e, 2).unwrap().checksum()
        );
    }

    #[test]
    fn extractor_shapes() {
        let cfg = ExtractorConfig {
            classes: 5,
            ..ExtractorConfig::default()
        };
        let f = build_extractor(&cfg, 3).unwrap();
        let x = Tensor::zeros(&[3, 1, 64, 64]);
        assert_eq!(f.infer(&x).unwrap().shape(), &[3, 5]);
        assert_eq!(f.infer_descriptors(&x).unwrap().shape(), &[3, 64]);
        let wrong = Tensor::zeros(&[1, 1, 32, 32]);
        assert!(matches!(f.infer(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn extractor_rejects_bad_config() {
        let bad = ExtractorConfig {
            classes: 1,
            ..ExtractorConfig::default()
        };
        assert!(build_extractor(&bad, 0).is_err());
        let tiny = ExtractorConfig {
            input_height: 0,
            ..ExtractorConfig::default()
        };
        assert!(build_extractor(&tiny, 0).is_err());
    }

    #[test]
    fn frozen_copy_matches_trainable() {
        let f = build_extractor(&ExtractorConfig::default(), 9).unwrap();
        let img = GrayImage::from_fn(64, 64, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0).unwrap();
        let t = img.to_tensor();
        assert_eq!(
            f.infer_descriptors(&t).unwrap(),
            f.frozen_copy().infer_descriptors(&t).unwrap()
        );
    }

    #[test]
    fn frozen_network_records_no_parameter_gradients() {
        let f = build_extractor(&ExtractorConfig::default(), 9).unwrap().frozen_copy();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 64, 64]));
        let d = f.descriptor(&mut tape, x).unwrap();
        assert!(!tape.requires_grad(d));
    }

    #[test]
    fn stubs() {
        let img = GrayImage::from_fn(4, 3, |x, y| (x + 4 * y) as f64 / 12.0).unwrap();
        let stub = Network::flatten_stub(3, 4);
        let d = stub.infer_descriptors(&img.to_tensor()).unwrap();
        assert_eq!(d.shape(), &[1, 12]);
        assert_eq!(d.data(), img.pixels());
        assert_eq!(Network::identity().infer(&img.to_tensor()).unwrap(), img.to_tensor());
    }

    #[test]
    fn parameter_names_are_unique() {
        let g = build_generator(&GeneratorConfig::default(), 0).unwrap();
        let names: Vec<String> = g.parameters().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
        assert!(names.contains(&"up2.weight".to_string()));
    }
}
