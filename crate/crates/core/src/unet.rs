//! The denoising network: a small 3D UNet whose spatial layers process every
//! frame independently and whose temporal self-attention layers mix
//! information across frames at each spatial site.
//!
//! Layout: `conv_in`, then per level a strided downsampling convolution, a
//! residual block and a temporal attention layer; a residual block and
//! attention layer in the middle; mirrored up blocks that concatenate the
//! matching skip, run a residual block and attention layer, then upsample.
//! The current frame noise level enters every residual block through a
//! sinusoidal embedding, and the conditioning frame is replicated over time
//! and concatenated to the input channels.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::attention::{AttentionCache, AttnMode, TemporalAttention};
use crate::nn::ops::{
    add_channel_bias, channel_sums, concat_channels, silu, silu_backward, silu_vec,
    silu_vec_backward, sinusoidal_embedding, split_channels, upsample2x, upsample2x_backward,
    Conv2d, Linear, Norm, NormCache,
};
use crate::nn::{Grads, ParamStore, Real};
use crate::temporal::{AttentionMapSet, BlockKind, LayerId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetConfig {
    /// Channels of one latent frame.
    pub latent_channels: usize,
    /// Number of positional slots in each temporal attention layer.
    pub frames: usize,
    /// Feature widths of the down levels, e.g. `[32, 64]`.
    pub channels: Vec<usize>,
    pub head_dim: usize,
    pub groups: usize,
    pub time_dim: usize,
    /// Number of discrete noise levels; scales the timestep embedding.
    pub timesteps: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            frames: 16,
            channels: vec![32, 64],
            head_dim: 32,
            groups: 8,
            time_dim: 64,
            timesteps: 50,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("model needs at least one level".into()));
        }
        if self.frames < 1 || self.latent_channels < 1 || self.head_dim < 1 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        let mut widths = self.channels.clone();
        widths.push(2 * self.channels[0]);
        for c in widths {
            if c % self.groups != 0 {
                return Err(Error::Config(format!(
                    "width {c} is not divisible by {} groups",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    /// Spatial downsampling factor between the input and the middle block.
    pub fn spatial_factor(&self) -> usize {
        1 << self.channels.len()
    }

    fn up_out(&self, level: usize) -> usize {
        if level == 0 {
            self.channels[0]
        } else {
            self.channels[level - 1]
        }
    }

    /// Temporal attention layer ids in evaluation order.
    pub fn registry(&self) -> Vec<LayerId> {
        let levels = self.channels.len();
        let mut ids: Vec<_> = (0..levels).map(|i| LayerId::new(BlockKind::Down, i)).collect();
        ids.push(LayerId::new(BlockKind::Mid, 0));
        ids.extend((0..levels).map(|i| LayerId::new(BlockKind::Up, i)));
        ids
    }

    /// Number of spatial sites seen by a layer for an `h x w` input.
    pub fn sites_at(&self, layer: LayerId, h: usize, w: usize) -> usize {
        let levels = self.channels.len();
        let down_steps = match layer.block {
            BlockKind::Down => layer.index + 1,
            BlockKind::Mid => levels,
            BlockKind::Up => levels - layer.index,
        };
        (h >> down_steps) * (w >> down_steps)
    }
}

/// Which parameters receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainablePolicy {
    All,
    /// Only the value and output projections of temporal attention layers.
    TemporalVoOnly,
    /// All four projections of temporal attention layers.
    TemporalQkvoOnly,
}

impl fmt::Display for TrainablePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainablePolicy::All => "all",
            TrainablePolicy::TemporalVoOnly => "temporal_vo_only",
            TrainablePolicy::TemporalQkvoOnly => "temporal_qkvo_only",
        })
    }
}

impl FromStr for TrainablePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "temporal_vo_only" => Ok(Self::TemporalVoOnly),
            "temporal_qkvo_only" => Ok(Self::TemporalQkvoOnly),
            other => Err(Error::Config(format!("unknown trainable policy '{other}'"))),
        }
    }
}

/// Image conditioning: one latent frame `[C, H, W]`, replicated over time and
/// concatenated to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning<T> {
    pub frame: Array3<T>,
}

impl<T: Real> Conditioning<T> {
    pub fn new(frame: Array3<T>) -> Self {
        Self { frame }
    }
}

/// Per-call attention behaviour: whether to extract maps, and which injected
/// maps to use in which blocks.
#[derive(Debug, Clone)]
pub struct AttentionPlan<T> {
    pub extract: bool,
    pub inject: Option<AttentionMapSet<T>>,
    pub inject_blocks: BTreeSet<BlockKind>,
}

impl<T> Default for AttentionPlan<T> {
    fn default() -> Self {
        Self {
            extract: false,
            inject: None,
            inject_blocks: [BlockKind::Down, BlockKind::Mid, BlockKind::Up].into(),
        }
    }
}

impl<T: Clone> AttentionPlan<T> {
    pub fn compute() -> Self {
        Self::default()
    }

    pub fn extract() -> Self {
        Self {
            extract: true,
            ..Self::default()
        }
    }

    pub fn inject(maps: AttentionMapSet<T>) -> Self {
        Self {
            inject: Some(maps),
            ..Self::default()
        }
    }

    pub fn inject_only(maps: AttentionMapSet<T>, blocks: &[BlockKind]) -> Self {
        Self {
            inject: Some(maps),
            inject_blocks: blocks.iter().copied().collect(),
            ..Self::default()
        }
    }

    fn map_for(&self, layer: LayerId) -> Option<&Array3<T>> {
        if !self.inject_blocks.contains(&layer.block) {
            return None;
        }
        self.inject.as_ref().and_then(|m| m.get(&layer))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Predicted velocity, `[N, C, H, W]`.
    pub v: Array4<T>,
    /// Extracted logits for every registered layer, when requested.
    pub maps: Option<AttentionMapSet<T>>,
    /// Layers that ran on injected maps.
    pub injected: Vec<LayerId>,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv2d,
    temb: Linear,
    norm2: Norm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache<T> {
    x: Array4<T>,
    g1: Array4<T>,
    n1: NormCache<T>,
    s1: Array4<T>,
    g2: Array4<T>,
    n2: NormCache<T>,
    s2: Array4<T>,
}

impl ResBlock {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: &UnetConfig,
    ) -> Self {
        Self {
            norm1: Norm::group(store, rng, &format!("{name}.norm1"), c_in, cfg.groups),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, 1),
            temb: Linear::new(store, rng, &format!("{name}.temb"), cfg.time_dim, c_out),
            norm2: Norm::group(store, rng, &format!("{name}.norm2"), c_out, cfg.groups),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1),
            skip: (c_in != c_out)
                .then(|| Conv2d::new(store, rng, &format!("{name}.skip"), c_in, c_out, 1, 1)),
        }
    }

    fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: Array4<T>,
        temb: &Array1<T>,
    ) -> (Array4<T>, ResCache<T>) {
        let (g1, n1) = self.norm1.forward(ps, &x);
        let s1 = silu(&g1);
        let mut c1 = self.conv1.forward(ps, &s1);
        add_channel_bias(&mut c1, &self.temb.forward(ps, temb));
        let (g2, n2) = self.norm2.forward(ps, &c1);
        let s2 = silu(&g2);
        let mut out = self.conv2.forward(ps, &s2);
        match &self.skip {
            Some(skip) => out += &skip.forward(ps, &x),
            None => out += &x,
        }
        (
            out,
            ResCache {
                x,
                g1,
                n1,
                s1,
                g2,
                n2,
                s2,
            },
        )
    }

    fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &ResCache<T>,
        temb: &Array1<T>,
        dout: &Array4<T>,
        dtemb: &mut Array1<T>,
        grads: &mut Grads<T>,
    ) -> Array4<T> {
        let ds2 = self.conv2.backward(ps, &cache.s2, dout, grads, true).unwrap();
        let dg2 = silu_backward(&cache.g2, &ds2);
        let dc1 = self.norm2.backward(ps, &cache.n2, &dg2, grads);
        *dtemb += &self.temb.backward(ps, temb, &channel_sums(&dc1), grads);
        let ds1 = self.conv1.backward(ps, &cache.s1, &dc1, grads, true).unwrap();
        let dg1 = silu_backward(&cache.g1, &ds1);
        let mut dx = self.norm1.backward(ps, &cache.n1, &dg1, grads);
        match &self.skip {
            Some(skip) => dx += &skip.backward(ps, &cache.x, dout, grads, true).unwrap(),
            None => dx += dout,
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct Level {
    /// Downsampling conv (down blocks only).
    resample: Option<Conv2d>,
    res: ResBlock,
    attn: TemporalAttention,
    layer: LayerId,
}

#[derive(Debug, Clone)]
struct Architecture {
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid: Level,
    up: Vec<Level>,
    norm_out: Norm,
    conv_out: Conv2d,
}

struct LevelCache<T> {
    down_in: Option<Array4<T>>,
    res: ResCache<T>,
    attn: AttentionCache<T>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct Tape<T> {
    temb_sin: Array1<T>,
    e1: Array1<T>,
    e1a: Array1<T>,
    temb: Array1<T>,
    temb_act: Array1<T>,
    x_in: Array4<T>,
    down: Vec<LevelCache<T>>,
    mid: LevelCache<T>,
    up: Vec<LevelCache<T>>,
    skip_widths: Vec<usize>,
    up_in_widths: Vec<usize>,
    out_in_width: usize,
    o_norm: NormCache<T>,
    o_g: Array4<T>,
    o_s: Array4<T>,
}

impl<T: Real> Tape<T> {
    /// Attention cache of a registered layer, for inspection in tests.
    pub fn attention(&self, layer: LayerId) -> Option<&AttentionCache<T>> {
        match layer.block {
            BlockKind::Down => self.down.get(layer.index).map(|c| &c.attn),
            BlockKind::Mid => Some(&self.mid.attn),
            BlockKind::Up => self.up.get(layer.index).map(|c| &c.attn),
        }
    }
}

/// The denoiser `f(z_t; t, c)`: architecture plus parameters.
#[derive(Debug, Clone)]
pub struct Unet<T> {
    config: UnetConfig,
    arch: Architecture,
    pub params: ParamStore<T>,
}

pub type DenoiserModel = Unet<f32>;

fn to_channels_last<T: Real>(x: &Array4<T>) -> Array4<T> {
    x.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
}

fn to_channels_first<T: Real>(x: &Array4<T>) -> Array4<T> {
    x.view()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
}

fn check_finite<T: Real>(x: &Array4<T>, location: impl fmt::Display) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            location: location.to_string(),
        })
    }
}

impl<T: Real> Unet<T> {
    /// Builds a model with deterministic initialization from `seed`.
    pub fn new(config: UnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let cfg = &config;
        let td = cfg.time_dim;
        let time1 = Linear::new(&mut ps, &mut rng, "time.lin1", td, td);
        let time2 = Linear::new(&mut ps, &mut rng, "time.lin2", td, td);
        let c0 = cfg.channels[0];
        let conv_in = Conv2d::new(&mut ps, &mut rng, "conv_in", 2 * cfg.latent_channels, c0, 3, 1);

        let mut down = Vec::new();
        let mut prev = c0;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let name = format!("down.{i}");
            let resample = Conv2d::new(&mut ps, &mut rng, &format!("{name}.downsample"), prev, c, 3, 2);
            let res = ResBlock::new(&mut ps, &mut rng, &format!("{name}.res"), c, c, cfg);
            let attn = TemporalAttention::new(&mut ps, &mut rng, &format!("{name}.attn"), c, cfg.head_dim, cfg.frames);
            down.push(Level {
                resample: Some(resample),
                res,
                attn,
                layer: LayerId::new(BlockKind::Down, i),
            });
            prev = c;
        }
        let mid = Level {
            resample: None,
            res: ResBlock::new(&mut ps, &mut rng, "mid.res", prev, prev, cfg),
            attn: TemporalAttention::new(&mut ps, &mut rng, "mid.attn", prev, cfg.head_dim, cfg.frames),
            layer: LayerId::new(BlockKind::Mid, 0),
        };
        let levels = cfg.channels.len();
        let mut up = Vec::new();
        for j in 0..levels {
            let level = levels - 1 - j;
            let name = format!("up.{j}");
            let c_in = prev + cfg.channels[level];
            let c_out = cfg.up_out(level);
            let res = ResBlock::new(&mut ps, &mut rng, &format!("{name}.res"), c_in, c_out, cfg);
            let attn = TemporalAttention::new(&mut ps, &mut rng, &format!("{name}.attn"), c_out, cfg.head_dim, cfg.frames);
            up.push(Level {
                resample: None,
                res,
                attn,
                layer: LayerId::new(BlockKind::Up, j),
            });
            prev = c_out;
        }
        let norm_out = Norm::group(&mut ps, &mut rng, "norm_out", prev + c0, cfg.groups);
        let conv_out = Conv2d::new(&mut ps, &mut rng, "conv_out", prev + c0, cfg.latent_channels, 3, 1);
        Ok(Self {
            config,
            arch: Architecture {
                time1,
                time2,
                conv_in,
                down,
                mid,
                up,
                norm_out,
                conv_out,
            },
            params: ps,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn registry(&self) -> Vec<LayerId> {
        self.config.registry()
    }

    /// Hash of the architecture: configuration plus parameter names and
    /// shapes. Independent of parameter values.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("serializable config"));
        for (_, p) in self.params.iter() {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn attention_layers(&self) -> impl Iterator<Item = &TemporalAttention> {
        self.arch
            .down
            .iter()
            .chain(std::iter::once(&self.arch.mid))
            .chain(self.arch.up.iter())
            .map(|l| &l.attn)
    }

    pub fn set_trainable(&mut self, policy: TrainablePolicy) {
        let mut chosen = BTreeSet::new();
        for a in self.attention_layers() {
            match policy {
                TrainablePolicy::All => {}
                TrainablePolicy::TemporalVoOnly => {
                    chosen.extend([a.to_v, a.to_out]);
                }
                TrainablePolicy::TemporalQkvoOnly => {
                    chosen.extend([a.to_q, a.to_k, a.to_v, a.to_out]);
                }
            }
        }
        let ids: Vec<_> = self.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let on = policy == TrainablePolicy::All || chosen.contains(&id);
            self.params.set_trainable(id, on);
        }
    }

    /// Current policy, recovered from the trainable mask; `None` when the mask
    /// matches no named policy.
    pub fn trainable_policy(&self) -> Option<TrainablePolicy> {
        [
            TrainablePolicy::All,
            TrainablePolicy::TemporalVoOnly,
            TrainablePolicy::TemporalQkvoOnly,
        ]
        .into_iter()
        .find(|&p| {
            let mut probe = self.clone();
            probe.set_trainable(p);
            let same = probe
                .params
                .iter()
                .zip(self.params.iter())
                .all(|((_, a), (_, b))| a.trainable == b.trainable);
            same
        })
    }

    /// Names of the four projection matrices of one attention layer
    /// `(q, k, v, out)`.
    pub fn projection_names(&self, layer: LayerId) -> Option<[String; 4]> {
        let a = self
            .arch
            .down
            .iter()
            .chain(std::iter::once(&self.arch.mid))
            .chain(self.arch.up.iter())
            .find(|l| l.layer == layer)?;
        let n = |id| self.params.param(id).name.clone();
        Some([n(a.attn.to_q), n(a.attn.to_k), n(a.attn.to_v), n(a.attn.to_out)])
    }

    fn validate_inputs(&self, z_t: &Array4<T>, t: usize, cond: &Conditioning<T>, plan: &AttentionPlan<T>) -> Result<()> {
        let (n, c, h, w) = z_t.dim();
        let cfg = &self.config;
        if c != cfg.latent_channels {
            return Err(Error::Argument(format!(
                "latent has {c} channels, model expects {}",
                cfg.latent_channels
            )));
        }
        if n > cfg.frames || n == 0 {
            return Err(Error::Argument(format!(
                "{n} frames; model supports 1..={}",
                cfg.frames
            )));
        }
        let f = cfg.spatial_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Argument(format!(
                "frame size {h}x{w} must be divisible by {f}"
            )));
        }
        if cond.frame.dim() != (c, h, w) {
            return Err(Error::shape(&[c, h, w], cond.frame.shape()));
        }
        if t > cfg.timesteps {
            return Err(Error::Argument(format!(
                "timestep {t} beyond {}",
                cfg.timesteps
            )));
        }
        if let Some(maps) = &plan.inject {
            let registry = cfg.registry();
            for layer in maps.layers() {
                if !registry.contains(layer) {
                    return Err(Error::Argument(format!("no attention layer {layer}")));
                }
            }
        }
        Ok(())
    }

    /// One network evaluation. Extraction, when requested, happens in the same
    /// pass that produces the prediction.
    pub fn forward(
        &self,
        z_t: &Array4<T>,
        t: usize,
        cond: &Conditioning<T>,
        plan: &AttentionPlan<T>,
    ) -> Result<ForwardOutput<T>> {
        self.forward_with_tape(z_t, t, cond, plan).map(|(o, _)| o)
    }

    pub fn forward_with_tape(
        &self,
        z_t: &Array4<T>,
        t: usize,
        cond: &Conditioning<T>,
        plan: &AttentionPlan<T>,
    ) -> Result<(ForwardOutput<T>, Tape<T>)> {
        self.validate_inputs(z_t, t, cond, plan)?;
        let cfg = &self.config;
        let ps = &self.params;
        let a = &self.arch;
        let n = z_t.dim().0;

        let position = t as f64 * 1000.0 / cfg.timesteps as f64;
        let temb_sin = sinusoidal_embedding::<T>(position, cfg.time_dim);
        let e1 = a.time1.forward(ps, &temb_sin);
        let e1a = silu_vec(&e1);
        let temb = a.time2.forward(ps, &e1a);
        let temb_act = silu_vec(&temb);

        let z = to_channels_last(z_t);
        let c = to_channels_last(&cond.frame.view().insert_axis(Axis(0)).to_owned());
        let c_rep = c
            .broadcast((n, c.dim().1, c.dim().2, c.dim().3))
            .unwrap()
            .to_owned();
        let x_in = concat_channels(&z, &c_rep);
        let h0 = a.conv_in.forward(ps, &x_in);

        let mut maps = plan.extract.then(AttentionMapSet::new);
        let mut injected = Vec::new();

        let mut run_attn = |level: &Level, x: &Array4<T>| -> Result<(Array4<T>, AttentionCache<T>)> {
            let mode = match plan.map_for(level.layer) {
                Some(m) => {
                    injected.push(level.layer);
                    AttnMode::Inject(m)
                }
                None if plan.extract => AttnMode::Extract,
                None => AttnMode::Compute,
            };
            let (y, extracted, cache) = level.attn.forward(ps, x, mode)?;
            if let Some(set) = maps.as_mut() {
                let map = match (extracted, mode) {
                    (Some(m), _) => m,
                    (None, AttnMode::Inject(m)) => m.clone(),
                    (None, _) => unreachable!("extraction requested"),
                };
                set.insert(level.layer, map)?;
            }
            check_finite(&y, format_args!("attention layer {}", level.layer))?;
            Ok((y, cache))
        };

        let mut skips = vec![h0.clone()];
        let mut down_caches = Vec::new();
        let mut x = h0.clone();
        for level in &a.down {
            let xd = level.resample.as_ref().unwrap().forward(ps, &x);
            let down_in = std::mem::replace(&mut x, xd);
            let (r, res_cache) = level.res.forward(ps, x, &temb_act);
            let (y, attn_cache) = run_attn(level, &r)?;
            skips.push(y.clone());
            x = y;
            down_caches.push(LevelCache {
                down_in: Some(down_in),
                res: res_cache,
                attn: attn_cache,
            });
        }

        let (r, res_cache) = a.mid.res.forward(ps, x, &temb_act);
        let (mut x, attn_cache) = run_attn(&a.mid, &r)?;
        let mid_cache = LevelCache {
            down_in: None,
            res: res_cache,
            attn: attn_cache,
        };

        let mut up_caches = Vec::new();
        let mut skip_widths = Vec::new();
        let mut up_in_widths = Vec::new();
        for level in &a.up {
            let skip = skips.pop().unwrap();
            up_in_widths.push(x.dim().3);
            skip_widths.push(skip.dim().3);
            let cat = concat_channels(&x, &skip);
            let (r, res_cache) = level.res.forward(ps, cat, &temb_act);
            let (y, attn_cache) = run_attn(level, &r)?;
            x = upsample2x(&y);
            up_caches.push(LevelCache {
                down_in: None,
                res: res_cache,
                attn: attn_cache,
            });
        }

        let h0 = skips.pop().unwrap();
        let out_in_width = x.dim().3;
        let o_in = concat_channels(&x, &h0);
        let (o_g, o_norm) = a.norm_out.forward(ps, &o_in);
        let o_s = silu(&o_g);
        let out = a.conv_out.forward(ps, &o_s);
        check_finite(&out, "output projection")?;

        let output = ForwardOutput {
            v: to_channels_first(&out),
            maps,
            injected,
        };
        let tape = Tape {
            temb_sin,
            e1,
            e1a,
            temb,
            temb_act,
            x_in,
            down: down_caches,
            mid: mid_cache,
            up: up_caches,
            skip_widths,
            up_in_widths,
            out_in_width,
            o_norm,
            o_g,
            o_s,
        };
        Ok((output, tape))
    }

    /// Backpropagates `dv` (gradient of the loss w.r.t. the `[N, C, H, W]`
    /// prediction) into `grads`. Only trainable parameters receive gradients.
    pub fn backward(&self, tape: &Tape<T>, dv: &Array4<T>, grads: &mut Grads<T>) {
        let ps = &self.params;
        let a = &self.arch;
        let mut dtemb = Array1::<T>::zeros(tape.temb_act.len());

        let dout = to_channels_last(dv);
        let ds = a.conv_out.backward(ps, &tape.o_s, &dout, grads, true).unwrap();
        let dg = silu_backward(&tape.o_g, &ds);
        let d_in = a.norm_out.backward(ps, &tape.o_norm, &dg, grads);
        let (mut dx, dh0_skip) = split_channels(&d_in, tape.out_in_width);

        let mut dskips: Vec<Array4<T>> = Vec::new();
        for (j, level) in a.up.iter().enumerate().rev() {
            let cache = &tape.up[j];
            let dy = upsample2x_backward(&dx);
            let dr = level.attn.backward(ps, &cache.attn, &dy, grads);
            let dcat = level.res.backward(ps, &cache.res, &tape.temb_act, &dr, &mut dtemb, grads);
            let (dprev, dskip) = split_channels(&dcat, tape.up_in_widths[j]);
            debug_assert_eq!(dskip.dim().3, tape.skip_widths[j]);
            dskips.push(dskip);
            dx = dprev;
        }
        // dskips now holds gradients for skips in down order: [s1, s2, ...]

        let dr = a.mid.attn.backward(ps, &tape.mid.attn, &dx, grads);
        dx = a.mid.res.backward(ps, &tape.mid.res, &tape.temb_act, &dr, &mut dtemb, grads);

        for (i, level) in a.down.iter().enumerate().rev() {
            let cache = &tape.down[i];
            dx += &dskips[i];
            let dr = level.attn.backward(ps, &cache.attn, &dx, grads);
            let dd = level.res.backward(ps, &cache.res, &tape.temb_act, &dr, &mut dtemb, grads);
            dx = level
                .resample
                .as_ref()
                .unwrap()
                .backward(ps, cache.down_in.as_ref().unwrap(), &dd, grads, true)
                .unwrap();
        }
        dx += &dh0_skip;
        a.conv_in.backward(ps, &tape.x_in, &dx, grads, false);

        let dtemb_pre = silu_vec_backward(&tape.temb, &dtemb);
        let de1a = a.time2.backward(ps, &tape.e1a, &dtemb_pre, grads);
        let de1 = silu_vec_backward(&tape.e1, &de1a);
        a.time1.backward(ps, &tape.temb_sin, &de1, grads);
    }
}
