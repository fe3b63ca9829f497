//! Binary checkpoint files.
//!
//! Layout (all integers little-endian `u32`):
//! `"IDSR"`, version, config length, UTF-8 `key=value` config lines, tensor
//! count, then per tensor: name length, name, rank, extents, `f32` values.
//! Optimizer accumulators are stored as tensors named `opt/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use idsr_tensor::{OptimizerState, RmsPropConfig, Tensor};

use crate::error::{Error, Result};
use crate::network::{Architecture, ExtractorConfig, GeneratorConfig, Network};

pub const MAGIC: &[u8; 4] = b"IDSR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    /// Free-form provenance (loss kind, seed, ...), echoed in the header.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Self {
            network,
            optimizer: None,
            epoch: 0,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_optimizer(mut self, opt: OptimizerState, epoch: usize) -> Self {
        self.optimizer = Some(opt);
        self.epoch = epoch;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let config = self.config_echo();
        put_u32(&mut out, config.len() as u32);
        out.extend_from_slice(config.as_bytes());

        let params = self.network.parameters();
        let mut tensors: Vec<(String, &Tensor)> = params.iter().map(|(n, t)| (n.clone(), *t)).collect();
        if let Some(opt) = &self.optimizer {
            for ((name, _), acc) in params.iter().zip(opt.accumulators()) {
                tensors.push((format!("opt/{name}"), acc));
            }
        }
        put_u32(&mut out, tensors.len() as u32);
        for (name, t) in tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &e in t.shape() {
                put_u32(&mut out, e as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    fn config_echo(&self) -> String {
        let mut lines: Vec<(String, String)> = Vec::new();
        let mut kv = |k: &str, v: String| lines.push((k.to_string(), v));
        match self.network.architecture() {
            Architecture::Generator(g) => {
                kv("kind", "generator".into());
                kv("scale", g.scale.to_string());
                kv("channels", join(&g.channels));
                kv("head_kernel", g.head_kernel.to_string());
                kv("refine_kernel", g.refine_kernel.map_or("none".into(), |k| k.to_string()));
                kv("tail_kernel", g.tail_kernel.to_string());
                kv("leaky_slope", g.leaky_slope.to_string());
                kv("bicubic_skip", g.bicubic_skip.to_string());
            }
            Architecture::Extractor(e) => {
                kv("kind", "extractor".into());
                kv("input_height", e.input_height.to_string());
                kv("input_width", e.input_width.to_string());
                kv("channels", join(&e.channels));
                kv("kernel", e.kernel.to_string());
                kv("descriptor_dim", e.descriptor_dim.to_string());
                kv("classes", e.classes.to_string());
                kv("leaky_slope", e.leaky_slope.to_string());
            }
            Architecture::Identity => kv("kind", "identity".into()),
            Architecture::FlattenStub { height, width } => {
                kv("kind", "flatten".into());
                kv("input_height", height.to_string());
                kv("input_width", width.to_string());
            }
        }
        kv("frozen", self.network.is_frozen().to_string());
        kv("epoch", self.epoch.to_string());
        if let Some(opt) = &self.optimizer {
            let c = opt.config();
            kv("opt.lr", c.lr.to_string());
            kv("opt.rho", c.rho.to_string());
            kv("opt.epsilon", c.epsilon.to_string());
            kv("opt.lr_decay", c.lr_decay.to_string());
            kv("opt.step", opt.step_count().to_string());
        }
        for (k, v) in &self.meta {
            kv(&format!("meta.{k}"), v.clone());
        }
        lines.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not an IDSR checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
        let mut cfg = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed config line `{line}`")))?;
            cfg.insert(k.to_string(), v.to_string());
        }
        let field = |k: &str| -> Result<&str> {
            cfg.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Checkpoint(format!("config echo lacks `{k}`")))
        };
        let arch = match field("kind")? {
            "generator" => Architecture::Generator(GeneratorConfig {
                scale: num(field("scale")?)?,
                channels: list(field("channels")?)?,
                head_kernel: num(field("head_kernel")?)?,
                refine_kernel: match field("refine_kernel")? {
                    "none" => None,
                    k => Some(num(k)?),
                },
                tail_kernel: num(field("tail_kernel")?)?,
                leaky_slope: num(field("leaky_slope")?)?,
                bicubic_skip: num(field("bicubic_skip")?)?,
            }),
            "extractor" => Architecture::Extractor(ExtractorConfig {
                input_height: num(field("input_height")?)?,
                input_width: num(field("input_width")?)?,
                channels: list(field("channels")?)?,
                kernel: num(field("kernel")?)?,
                descriptor_dim: num(field("descriptor_dim")?)?,
                classes: num(field("classes")?)?,
                leaky_slope: num(field("leaky_slope")?)?,
            }),
            "identity" => Architecture::Identity,
            "flatten" => Architecture::FlattenStub {
                height: num(field("input_height")?)?,
                width: num(field("input_width")?)?,
            },
            other => return Err(Error::Checkpoint(format!("unknown network kind `{other}`"))),
        };
        let frozen: bool = num(field("frozen")?)?;
        let epoch: usize = num(field("epoch")?)?;

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let expected: Vec<String> = shell_names(&arch)?;
        let has_opt = cfg.contains_key("opt.lr");
        let want = expected.len() * if has_opt { 2 } else { 1 };
        if tensors.len() != want {
            return Err(Error::Checkpoint(format!("expected {want} tensors, found {}", tensors.len())));
        }
        let accs = tensors.split_off(expected.len());
        for ((name, _), exp) in tensors.iter().zip(&expected) {
            if name != exp {
                return Err(Error::Checkpoint(format!("expected tensor `{exp}`, found `{name}`")));
            }
        }
        let params: Vec<Tensor> = tensors.into_iter().map(|(_, t)| t).collect();
        let network = Network::from_parts(arch, params.clone(), frozen)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match the embedded config: {e}")))?;

        let optimizer = if has_opt {
            let config = RmsPropConfig {
                lr: num(field("opt.lr")?)?,
                rho: num(field("opt.rho")?)?,
                epsilon: num(field("opt.epsilon")?)?,
                lr_decay: num(field("opt.lr_decay")?)?,
            };
            let step: u64 = num(field("opt.step")?)?;
            let mut acc_tensors = Vec::with_capacity(accs.len());
            for ((name, t), (exp, p)) in accs.into_iter().zip(expected.iter().zip(&params)) {
                if name != format!("opt/{exp}") || t.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer tensor `{name}` {:?} does not match `{exp}` {:?}",
                        t.shape(),
                        p.shape()
                    )));
                }
                acc_tensors.push(t);
            }
            Some(OptimizerState::from_parts(config, acc_tensors, step).map_err(|e| Error::Checkpoint(e.to_string()))?)
        } else {
            None
        };
        let meta = cfg
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self {
            network,
            optimizer,
            epoch,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Parameter names of a freshly built network of this architecture.
fn shell_names(arch: &Architecture) -> Result<Vec<String>> {
    let net = match arch {
        Architecture::Generator(g) => crate::network::build_generator(g, 0),
        Architecture::Extractor(e) => crate::network::build_extractor(e, 0),
        Architecture::Identity => Ok(Network::identity()),
        Architecture::FlattenStub { height, width } => Ok(Network::flatten_stub(*height, *width)),
    }
    .map_err(|e| Error::Checkpoint(format!("embedded config is invalid: {e}")))?;
    Ok(net.parameters().into_iter().map(|(n, _)| n).collect())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Checkpoint(format!("bad value `{s}` in config echo")))
}

fn list(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(num).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
