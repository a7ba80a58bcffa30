//! Parameter storage and the transformer building blocks shared by the
//! backbone, the bottleneck and the decoder heads.
//!
//! Layers are thin structs over candle tensors. Layer norm and softmax are
//! composed from primitive ops so that gradients exist in both f32 and f64.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::archive::{ArchiveTensor, TensorArchive};
use crate::error::{contract_err, GlcfError, Result};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    /// Normal with std `1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

/// Named parameter store with deterministic, order-independent initialization:
/// each tensor draws from an RNG seeded by `(seed, name)`.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Returns the named parameter, creating it on first use.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(contract_err(format!(
                    "parameter {name} has shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            _ if n == 0 => Vec::new(),
            Init::Normal(_) | Init::FanIn(_) => {
                let std = match init {
                    Init::Normal(s) => s,
                    Init::FanIn(fan) => 1.0 / (fan.max(1) as f64).sqrt(),
                    _ => unreachable!(),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
                let dist = Normal::new(0.0, std).map_err(|e| contract_err(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Vars whose names start with one of `prefixes`, in name order.
    pub fn vars_with_prefixes(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in &self.vars {
            h.update(name.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals = v.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for x in vals {
                h.update(x.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Copies every parameter into `archive`, as f32.
    pub fn export_into(&self, archive: &mut TensorArchive) -> Result<()> {
        for (name, v) in &self.vars {
            let data = v.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            archive.insert(name.clone(), ArchiveTensor::new(v.dims().to_vec(), data)?);
        }
        Ok(())
    }

    /// Overwrites parameters with the archive entries of the same name.
    /// With `strict`, every parameter must be present in the archive.
    pub fn import_from(&mut self, archive: &TensorArchive, prefix: &str, strict: bool) -> Result<()> {
        for (name, var) in self.vars.iter_mut() {
            if !name.starts_with(prefix) {
                continue;
            }
            match archive.get(name) {
                Some(t) => {
                    if t.shape != var.dims() {
                        return Err(contract_err(format!(
                            "archive tensor {name} has shape {:?}, model expects {:?}",
                            t.shape,
                            var.dims()
                        )));
                    }
                    let src = Tensor::from_vec(t.data.clone(), t.shape.as_slice(), &self.device)?
                        .to_dtype(self.dtype)?;
                    var.set(&src)?;
                }
                None if strict => {
                    return Err(GlcfError::MissingInput(format!(
                        "archive has no tensor named {name}"
                    )))
                }
                None => {}
            }
        }
        Ok(())
    }
}

/// Builder handle that prefixes parameter names.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: impl Into<String>) -> Self {
        Self {
            store,
            prefix: prefix.into(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        Scope {
            store: self.store,
            prefix: format!("{}{}.", self.prefix, name),
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = format!("{}{}", self.prefix, name);
        self.store.get(&full, shape, init)
    }
}

/// Applies `w x + b` over the last dimension of an input of any rank.
#[derive(Debug, Clone)]
pub struct Linear {
    weight_t: Tensor,
    bias: Option<Tensor>,
    out_dim: usize,
}

impl Linear {
    pub fn new(s: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_bias(s, in_dim, out_dim, true)
    }

    pub fn with_bias(s: &mut Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = s.get("weight", &[out_dim, in_dim], Init::FanIn(in_dim))?;
        let bias = if bias {
            Some(s.get("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight_t: weight.t()?,
            bias,
            out_dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| contract_err("linear on a scalar"))?;
        let rows = x.elem_count() / in_dim.max(1);
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight_t)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get("gamma", &[dim], Init::Ones)?,
            beta: s.get("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = normalize_last(x)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Zero-mean, unit-variance normalization over the last dimension (no affine).
pub fn normalize_last(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(s: &mut Scope, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut s.sub("fc1"), dim, dim * ratio)?,
            fc2: Linear::new(&mut s.sub("fc2"), dim * ratio, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Multi-head self-attention over `(batch, tokens, dim)`.
#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    scale: f64,
}

impl Attention {
    pub fn new(s: &mut Scope, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(GlcfError::Config(format!(
                "dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(&mut s.sub("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&mut s.sub("proj"), dim, dim)?,
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    /// `mask`, when given, has shape `(groups, T, T)` with `0` for allowed and a
    /// large negative value for forbidden pairs. The batch is read as
    /// `(batch / groups, groups)` so window masks line up with window order.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? * self.scale)?;
        if let Some(mask) = mask {
            let groups = mask.dim(0)?;
            if b % groups != 0 {
                return Err(contract_err(format!(
                    "batch {b} is not a multiple of the {groups} mask groups"
                )));
            }
            logits = logits
                .reshape((b / groups, groups, self.heads, t, t))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((b, self.heads, t, t))?;
        }
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, c))?;
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer block with MLP ratio 4.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(s: &mut Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut s.sub("norm1"), dim)?,
            attn: Attention::new(&mut s.sub("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut s.sub("norm2"), dim)?,
            mlp: Mlp::new(&mut s.sub("mlp"), dim, 4)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, mask)?)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + y)?)
    }
}

/// Largest window size `<= wanted` dividing both `h` and `w`.
pub fn effective_window(wanted: usize, h: usize, w: usize) -> usize {
    (1..=wanted.max(1).min(h).min(w))
        .rev()
        .find(|k| h.is_multiple_of(*k) && w.is_multiple_of(*k))
        .unwrap_or(1)
}

/// Transformer block applied within non-overlapping windows of a
/// channel-last map `(B, H, W, C)`, optionally on a cyclically shifted grid.
#[derive(Debug, Clone)]
pub struct WindowBlock {
    block: Block,
    window: usize,
    shift: usize,
}

impl WindowBlock {
    pub fn new(s: &mut Scope, dim: usize, heads: usize, window: usize, shift: usize) -> Result<Self> {
        Ok(Self {
            block: Block::new(s, dim, heads)?,
            window,
            shift,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let win = effective_window(self.window, h, w);
        let shift = if win < h.min(w) { self.shift.min(win / 2) } else { 0 };
        let x = if shift > 0 {
            x.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?
        } else {
            x.clone()
        };
        let (nh, nw) = (h / win, w / win);
        let windows = x
            .reshape((b, nh, win, nw, win, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b * nh * nw, win * win, c))?;
        let mask = if shift > 0 {
            Some(shifted_window_mask(h, w, win, shift, x.dtype(), x.device())?)
        } else {
            None
        };
        let y = self.block.forward(&windows, mask.as_ref())?;
        let y = y
            .reshape((b, nh, nw, win, win, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, h, w, c))?;
        if shift > 0 {
            Ok(y.roll(shift as i32, 1)?.roll(shift as i32, 2)?)
        } else {
            Ok(y)
        }
    }
}

/// Mask keeping tokens that wrapped around during a cyclic shift from
/// attending to tokens they were not adjacent to.
fn shifted_window_mask(
    h: usize,
    w: usize,
    win: usize,
    shift: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let region = |pos: usize, len: usize| -> usize {
        if pos < len - win {
            0
        } else if pos < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / win, w / win);
    let t = win * win;
    let mut out = Vec::with_capacity(nh * nw * t * t);
    for wi in 0..nh {
        for wj in 0..nw {
            let ids: Vec<usize> = (0..t)
                .map(|k| {
                    let (r, c) = (wi * win + k / win, wj * win + k % win);
                    region(r, h) * 3 + region(c, w)
                })
                .collect();
            for a in &ids {
                for bb in &ids {
                    out.push(if a == bb { 0.0 } else { MASKED });
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (nh * nw, t, t), device)?.to_dtype(dtype)?)
}

/// Residual 3x3 convolution block on a channel-last map, used as the
/// convolutional alternative to [`WindowBlock`] in decoder heads.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    norm: LayerNorm,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl ConvBlock {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut s.sub("norm"), dim)?,
            w1: s.get("conv1.weight", &[dim, dim, 3, 3], Init::FanIn(dim * 9))?,
            b1: s.get("conv1.bias", &[dim], Init::Zeros)?,
            w2: s.get("conv2.weight", &[dim, dim, 3, 3], Init::FanIn(dim * 9))?,
            b2: s.get("conv2.bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm.forward(x)?.permute((0, 3, 1, 2))?.contiguous()?;
        let bias = |b: &Tensor| b.reshape((1, (), 1, 1));
        let y = y.conv2d(&self.w1, 1, 1, 1, 1)?.broadcast_add(&bias(&self.b1)?)?;
        let y = y.gelu_erf()?;
        let y = y.conv2d(&self.w2, 1, 1, 1, 1)?.broadcast_add(&bias(&self.b2)?)?;
        Ok((x + y.permute((0, 2, 3, 1))?)?)
    }
}

/// Nearest-neighbour 2x upsampling of a channel-last map `(B, H, W, C)`.
pub fn upsample2x_nearest(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// Splits a channel-last map into non-overlapping `p x p` patches, returning
/// `(B, (H/p)*(W/p), p*p*C)` in row-major patch order.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(GlcfError::Config(format!(
            "{h}x{w} map is not divisible into {p}x{p} patches"
        )));
    }
    Ok(x.reshape((b, h / p, p, w / p, p, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, (h / p) * (w / p), p * p * c))?)
}

/// Attention mask of shape `(1, T, T)` from a predicate `allowed(row, col)`.
pub fn mask_from_fn(
    t: usize,
    dtype: DType,
    device: &Device,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<Tensor> {
    let mut v = Vec::with_capacity(t * t);
    for r in 0..t {
        for c in 0..t {
            v.push(if allowed(r, c) { 0.0 } else { MASKED });
        }
    }
    Ok(Tensor::from_vec(v, (1, t, t), device)?.to_dtype(dtype)?)
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(GlcfError::NumericFault(format!("{what} contains NaN or Inf")));
    }
    Ok(())
}
