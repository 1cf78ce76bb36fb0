//! The eps-prediction network: a 2D-convolutional U-Net over channel-stacked
//! frame blocks, with multi-head self-attention, noise-level conditioning via
//! adaptive group normalization, and past/future frame conditioning either
//! concatenated at the input (concat) or injected through spatially adaptive
//! normalization (spatin).
//!
//! Forward passes record an op tape; the backward pass replays it in reverse
//! with hand-written gradients for every layer.

mod embedding;

pub use embedding::{noise_embedding, NoiseEmbedding};

use ndarray::{s, Array1, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{McvdError, Result};
use crate::masking::BlockLayout;
use crate::nn::{
    avgpool2, avgpool2_backward, silu_backward, silu_map, silu_vec, silu_vec_backward, upsample2,
    upsample2_backward, Attention, AttentionCache, Conv2d, Conv2dCache, GradStore, GroupNorm,
    GroupNormCache, Linear, LinearCache, ParamStore,
};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    Concat,
    Spatin,
}

impl std::str::FromStr for ConditioningMode {
    type Err = McvdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(ConditioningMode::Concat),
            "spatin" => Ok(ConditioningMode::Spatin),
            other => Err(McvdError::config(format!(
                "unknown conditioning mode {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConditioningMode::Concat => write!(f, "concat"),
            ConditioningMode::Spatin => write!(f, "spatin"),
        }
    }
}

/// Architecture hyperparameters. Widths are `base_width * channel_multipliers[l]`
/// at spatial resolution `height / 2^l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub conditioning: ConditioningMode,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    /// Spatial sizes at which self-attention runs (the deepest level always
    /// attends in the middle blocks).
    pub attention_resolutions: Vec<usize>,
    pub num_res_blocks: usize,
    /// Sinusoidal embedding dimension D (even).
    pub embedding_dim: usize,
    /// Embedding base constant c.
    pub embedding_constant: f64,
    pub groups: usize,
    pub heads: usize,
    /// Channel width of the spatin conditioning encoder.
    pub cond_width: usize,
    pub layout: BlockLayout,
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_width)
            .collect()
    }

    /// Channels of the network input tensor.
    pub fn in_channels(&self) -> usize {
        let l = &self.layout;
        match self.conditioning {
            ConditioningMode::Concat => (l.past + l.current + l.future) * l.channels,
            ConditioningMode::Spatin => l.current * l.channels,
        }
    }

    /// Channels of the conditioning tensor (spatin mode).
    pub fn cond_channels(&self) -> usize {
        (self.layout.past + self.layout.future) * self.layout.channels
    }

    /// Channels of the predicted-eps output.
    pub fn out_channels(&self) -> usize {
        self.layout.current * self.layout.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 || !self.embedding_dim.is_multiple_of(2) {
            return Err(McvdError::config("embedding_dim must be even and >= 2"));
        }
        if self.channel_multipliers.is_empty() {
            return Err(McvdError::config("need at least one channel multiplier"));
        }
        if self.num_res_blocks == 0 {
            return Err(McvdError::config("num_res_blocks must be >= 1"));
        }
        let levels = self.levels();
        let (h, w) = (self.layout.height, self.layout.width);
        let down_factor = 1usize << (levels - 1);
        if h % down_factor != 0 || w % down_factor != 0 {
            return Err(McvdError::config(format!(
                "frame {h}x{w} not divisible by the U-Net depth factor {down_factor}"
            )));
        }
        let resolutions: Vec<usize> = (0..levels).map(|l| h >> l).collect();
        for r in &self.attention_resolutions {
            if !resolutions.contains(r) {
                return Err(McvdError::config(format!(
                    "attention resolution {r} not among the network resolutions {resolutions:?}"
                )));
            }
        }
        let widths = self.widths();
        for (l, &wd) in widths.iter().enumerate() {
            if wd % self.groups != 0 {
                return Err(McvdError::config(format!(
                    "width {wd} not divisible by groups {}",
                    self.groups
                )));
            }
            let attends = self.attention_resolutions.contains(&(h >> l)) || l == levels - 1;
            if attends && wd % self.heads != 0 {
                return Err(McvdError::config(format!(
                    "width {wd} not divisible by heads {}",
                    self.heads
                )));
            }
        }
        if self.conditioning == ConditioningMode::Spatin {
            if self.cond_channels() == 0 {
                return Err(McvdError::config(
                    "spatin conditioning needs past + future frames > 0",
                ));
            }
            if self.cond_width == 0 {
                return Err(McvdError::config("cond_width must be positive"));
            }
        }
        if self.in_channels() == 0 || self.out_channels() == 0 {
            return Err(McvdError::config("layout yields empty network input"));
        }
        Ok(())
    }
}

/// Stacks a frame block (n, H, W, C) into (n*C, H, W); channel index is
/// frame * C + c, frames kept in temporal order.
pub fn stack_frames<T: Real>(block: &Array4<T>) -> Array3<T> {
    let (n, h, w, c) = block.dim();
    Array3::from_shape_fn((n * c, h, w), |(ch, y, x)| block[(ch / c, y, x, ch % c)])
}

/// Inverse of [`stack_frames`].
pub fn unstack_frames<T: Real>(stacked: &Array3<T>, frames: usize, channels: usize) -> Array4<T> {
    let (nc, h, w) = stacked.dim();
    assert_eq!(nc, frames * channels, "channel count mismatch");
    Array4::from_shape_fn((frames, h, w, channels), |(f, y, x, c)| {
        stacked[(f * channels + c, y, x)]
    })
}

fn concat_channels<T: Real>(parts: &[&Array3<T>]) -> Array3<T> {
    let views: Vec<_> = parts
        .iter()
        .filter(|p| p.dim().0 > 0)
        .map(|p| p.view())
        .collect();
    ndarray::concatenate(Axis(0), &views).expect("channel concat")
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ResBlock {
    out_ch: usize,
    pyr_level: usize,
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Linear,
    spatin: Option<(Conv2d, Conv2d)>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResBlockCache<T> {
    norm1: GroupNormCache<T>,
    h1: Array3<T>,
    conv1: Conv2dCache<T>,
    emb: LinearCache<T>,
    spatin: Option<(Conv2dCache<T>, Conv2dCache<T>)>,
    norm2: GroupNormCache<T>,
    g2: Array3<T>,
    scale: Array3<T>,
    pre_act: Array3<T>,
    conv2: Conv2dCache<T>,
    skip: Option<Conv2dCache<T>>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real, R: Rng>(
        path: &str,
        in_ch: usize,
        out_ch: usize,
        emb_dim: usize,
        groups: usize,
        pyr_level: usize,
        spatin_cond_ch: Option<usize>,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let norm1 = GroupNorm::new(format!("{path}.norm1"), in_ch, groups, store);
        let conv1 = Conv2d::new(
            format!("{path}.conv1"),
            in_ch,
            out_ch,
            3,
            1,
            1,
            false,
            store,
            rng,
        );
        let emb_proj = Linear::new(
            format!("{path}.emb"),
            emb_dim,
            2 * out_ch,
            false,
            store,
            rng,
        );
        let spatin = spatin_cond_ch.map(|cc| {
            (
                Conv2d::new(
                    format!("{path}.spatin_scale"),
                    cc,
                    out_ch,
                    1,
                    1,
                    0,
                    true,
                    store,
                    rng,
                ),
                Conv2d::new(
                    format!("{path}.spatin_shift"),
                    cc,
                    out_ch,
                    1,
                    1,
                    0,
                    true,
                    store,
                    rng,
                ),
            )
        });
        let norm2 = GroupNorm::new(format!("{path}.norm2"), out_ch, groups, store);
        let conv2 = Conv2d::new(
            format!("{path}.conv2"),
            out_ch,
            out_ch,
            3,
            1,
            1,
            true,
            store,
            rng,
        );
        let skip = (in_ch != out_ch).then(|| {
            Conv2d::new(
                format!("{path}.skip"),
                in_ch,
                out_ch,
                1,
                1,
                0,
                false,
                store,
                rng,
            )
        });
        ResBlock {
            out_ch,
            pyr_level,
            norm1,
            conv1,
            emb_proj,
            spatin,
            norm2,
            conv2,
            skip,
        }
    }

    fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Array3<T>,
        semb: &Array1<T>,
        cond: Option<&Array3<T>>,
    ) -> (Array3<T>, ResBlockCache<T>) {
        let (h1_raw, norm1_cache) = self.norm1.forward(store, x);
        let a1 = silu_map(&h1_raw);
        let (h2, conv1_cache) = self.conv1.forward(store, &a1);
        let (ev, emb_cache) = self.emb_proj.forward(store, semb);

        let (g2, norm2_cache) = self.norm2.forward(store, &h2);
        let (_, hh, ww) = g2.dim();
        // Per-channel noise-level modulation; spatin adds a spatial map from
        // the conditioning features.
        let mut scale =
            Array3::from_shape_fn((self.out_ch, hh, ww), |(ch, _, _)| T::one() + ev[ch]);
        let mut shift =
            Array3::from_shape_fn((self.out_ch, hh, ww), |(ch, _, _)| ev[self.out_ch + ch]);
        let spatin_cache = self.spatin.as_ref().map(|(cs, cd)| {
            let cond = cond.expect("spatin res block needs conditioning features");
            let (gamma, cs_cache) = cs.forward(store, cond);
            let (delta, cd_cache) = cd.forward(store, cond);
            scale.zip_mut_with(&gamma, |a, &b| *a = *a + b);
            shift.zip_mut_with(&delta, |a, &b| *a = *a + b);
            (cs_cache, cd_cache)
        });
        let mut pre_act = g2.clone();
        pre_act.zip_mut_with(&scale, |a, &b| *a = *a * b);
        pre_act.zip_mut_with(&shift, |a, &b| *a = *a + b);
        let a2 = silu_map(&pre_act);
        let (h3, conv2_cache) = self.conv2.forward(store, &a2);

        let (skip_out, skip_cache) = match &self.skip {
            Some(sc) => {
                let (so, cache) = sc.forward(store, x);
                (so, Some(cache))
            }
            None => (x.clone(), None),
        };
        (
            h3 + &skip_out,
            ResBlockCache {
                norm1: norm1_cache,
                h1: h1_raw,
                conv1: conv1_cache,
                emb: emb_cache,
                spatin: spatin_cache,
                norm2: norm2_cache,
                g2,
                scale,
                pre_act,
                conv2: conv2_cache,
                skip: skip_cache,
            },
        )
    }

    /// Returns (dx, d_semb, d_cond).
    fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &ResBlockCache<T>,
        dy: &Array3<T>,
        grads: &mut GradStore<T>,
    ) -> (Array3<T>, Array1<T>, Option<Array3<T>>) {
        let d_a2 = self.conv2.backward(store, &cache.conv2, dy, grads);
        let d_pre = silu_backward(&cache.pre_act, &d_a2);

        // pre_act = g2 * scale + shift
        let mut d_g2 = d_pre.clone();
        d_g2.zip_mut_with(&cache.scale, |a, &b| *a = *a * b);
        let mut d_scale = d_pre.clone();
        d_scale.zip_mut_with(&cache.g2, |a, &b| *a = *a * b);
        let d_shift = d_pre;

        // Noise-embedding projection gradient: channel sums of the maps.
        let mut d_ev = Array1::<T>::zeros(2 * self.out_ch);
        for ch in 0..self.out_ch {
            d_ev[ch] = d_scale.index_axis(Axis(0), ch).sum();
            d_ev[self.out_ch + ch] = d_shift.index_axis(Axis(0), ch).sum();
        }
        let d_semb = self.emb_proj.backward(store, &cache.emb, &d_ev, grads);

        let d_cond = self.spatin.as_ref().map(|(cs, cd)| {
            let (cs_cache, cd_cache) = cache.spatin.as_ref().unwrap();
            let mut dc = cs.backward(store, cs_cache, &d_scale, grads);
            let dc2 = cd.backward(store, cd_cache, &d_shift, grads);
            dc.zip_mut_with(&dc2, |a, &b| *a = *a + b);
            dc
        });

        let dh2 = self.norm2.backward(store, &cache.norm2, &d_g2, grads);
        let d_a1 = self.conv1.backward(store, &cache.conv1, &dh2, grads);
        let dh1 = silu_backward(&cache.h1, &d_a1);
        let mut dx = self.norm1.backward(store, &cache.norm1, &dh1, grads);
        match (&self.skip, &cache.skip) {
            (Some(sc), Some(sc_cache)) => {
                let ds = sc.backward(store, sc_cache, dy, grads);
                dx.zip_mut_with(&ds, |a, &b| *a = *a + b);
            }
            _ => dx.zip_mut_with(dy, |a, &b| *a = *a + b),
        }
        (dx, d_semb, d_cond)
    }
}

// ---------------------------------------------------------------------------
// U-Net
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum OpKind {
    ConvIn,
    PushSkip,
    PopConcat,
    Res(usize),
    Attn(usize),
    Down(usize),
    Up(usize),
    OutNorm,
    OutSilu,
    OutConv,
}

#[allow(clippy::large_enum_variant)]
enum OpCache<T> {
    ConvIn(Conv2dCache<T>),
    PushSkip,
    PopConcat { head: usize },
    Res(ResBlockCache<T>),
    Attn(AttentionCache<T>),
    Down(Conv2dCache<T>),
    Up(Conv2dCache<T>),
    OutNorm(GroupNormCache<T>),
    OutSilu(Array3<T>),
    OutConv(Conv2dCache<T>),
}

pub struct UNetTape<T> {
    ops: Vec<OpCache<T>>,
    e1: Array1<T>,
    lin1: LinearCache<T>,
    e2: Array1<T>,
    lin2: LinearCache<T>,
    cond: Option<CondTape<T>>,
    out: Array3<T>,
}

struct CondTape<T> {
    conv1: Conv2dCache<T>,
    f1: Array3<T>,
    conv2: Conv2dCache<T>,
    pyramid: Vec<Array3<T>>,
}

impl<T> UNetTape<T> {
    /// The eps prediction this tape was recorded for.
    pub fn output(&self) -> &Array3<T> {
        &self.out
    }
}

/// The denoiser network. Layer structs are descriptors only; tensors live in
/// a [`ParamStore`] so checkpointing, optimization and gradient checking all
/// see one flat named map.
pub struct UNet {
    pub cfg: DenoiserConfig,
    time_lin1: Linear,
    time_lin2: Linear,
    cond_enc: Option<(Conv2d, Conv2d)>,
    conv_in: Conv2d,
    res_blocks: Vec<ResBlock>,
    attns: Vec<Attention>,
    downs: Vec<Conv2d>,
    ups: Vec<Conv2d>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    ops: Vec<OpKind>,
}

impl UNet {
    /// Builds the network and registers freshly initialized parameters.
    pub fn new<T: Real, R: Rng>(
        cfg: DenoiserConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let levels = cfg.levels();
        let emb_dim = cfg.embedding_dim;
        let spatin = cfg.conditioning == ConditioningMode::Spatin;

        let time_lin1 = Linear::new("time.lin1", emb_dim, emb_dim, false, store, rng);
        let time_lin2 = Linear::new("time.lin2", emb_dim, emb_dim, false, store, rng);
        let cond_enc = spatin.then(|| {
            (
                Conv2d::new(
                    "cond.conv1",
                    cfg.cond_channels(),
                    cfg.cond_width,
                    3,
                    1,
                    1,
                    false,
                    store,
                    rng,
                ),
                Conv2d::new(
                    "cond.conv2",
                    cfg.cond_width,
                    cfg.cond_width,
                    3,
                    1,
                    1,
                    false,
                    store,
                    rng,
                ),
            )
        });
        let spatin_ch = spatin.then_some(cfg.cond_width);
        let conv_in = Conv2d::new(
            "in.conv",
            cfg.in_channels(),
            widths[0],
            3,
            1,
            1,
            false,
            store,
            rng,
        );

        let mut res_blocks = Vec::new();
        let mut attns = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut ops = vec![OpKind::ConvIn, OpKind::PushSkip];

        let attn_at = |level: usize| {
            cfg.attention_resolutions
                .contains(&(cfg.layout.height >> level))
        };

        // Down path, tracking channels and the skip stack.
        let mut ch = widths[0];
        let mut skip_channels = vec![ch];
        for (l, &w) in widths.iter().enumerate() {
            for r in 0..cfg.num_res_blocks {
                res_blocks.push(ResBlock::new(
                    &format!("down{l}.res{r}"),
                    ch,
                    w,
                    emb_dim,
                    cfg.groups,
                    l,
                    spatin_ch,
                    store,
                    rng,
                ));
                ops.push(OpKind::Res(res_blocks.len() - 1));
                ch = w;
                if attn_at(l) {
                    attns.push(Attention::new(
                        format!("down{l}.attn{r}"),
                        ch,
                        cfg.heads,
                        cfg.groups,
                        store,
                        rng,
                    ));
                    ops.push(OpKind::Attn(attns.len() - 1));
                }
                ops.push(OpKind::PushSkip);
                skip_channels.push(ch);
            }
            if l + 1 < levels {
                downs.push(Conv2d::new(
                    format!("down{l}.downsample"),
                    ch,
                    ch,
                    3,
                    2,
                    1,
                    false,
                    store,
                    rng,
                ));
                ops.push(OpKind::Down(downs.len() - 1));
                ops.push(OpKind::PushSkip);
                skip_channels.push(ch);
            }
        }

        // Middle blocks at the deepest resolution.
        let deepest = levels - 1;
        res_blocks.push(ResBlock::new(
            "mid.res0", ch, ch, emb_dim, cfg.groups, deepest, spatin_ch, store, rng,
        ));
        ops.push(OpKind::Res(res_blocks.len() - 1));
        attns.push(Attention::new(
            "mid.attn",
            ch,
            cfg.heads,
            cfg.groups,
            store,
            rng,
        ));
        ops.push(OpKind::Attn(attns.len() - 1));
        res_blocks.push(ResBlock::new(
            "mid.res1", ch, ch, emb_dim, cfg.groups, deepest, spatin_ch, store, rng,
        ));
        ops.push(OpKind::Res(res_blocks.len() - 1));

        // Up path mirrors the down path, consuming one skip per block.
        for l in (0..levels).rev() {
            let w = widths[l];
            for r in 0..=cfg.num_res_blocks {
                let skip_ch = skip_channels.pop().expect("skip bookkeeping");
                ops.push(OpKind::PopConcat);
                res_blocks.push(ResBlock::new(
                    &format!("up{l}.res{r}"),
                    ch + skip_ch,
                    w,
                    emb_dim,
                    cfg.groups,
                    l,
                    spatin_ch,
                    store,
                    rng,
                ));
                ops.push(OpKind::Res(res_blocks.len() - 1));
                ch = w;
                if attn_at(l) {
                    attns.push(Attention::new(
                        format!("up{l}.attn{r}"),
                        ch,
                        cfg.heads,
                        cfg.groups,
                        store,
                        rng,
                    ));
                    ops.push(OpKind::Attn(attns.len() - 1));
                }
            }
            if l > 0 {
                ups.push(Conv2d::new(
                    format!("up{l}.upsample"),
                    ch,
                    ch,
                    3,
                    1,
                    1,
                    false,
                    store,
                    rng,
                ));
                ops.push(OpKind::Up(ups.len() - 1));
            }
        }
        assert!(skip_channels.is_empty(), "unbalanced skip connections");

        let out_norm = GroupNorm::new("out.norm", ch, cfg.groups, store);
        ops.push(OpKind::OutNorm);
        ops.push(OpKind::OutSilu);
        let out_conv = Conv2d::new(
            "out.conv",
            ch,
            cfg.out_channels(),
            3,
            1,
            1,
            true,
            store,
            rng,
        );
        ops.push(OpKind::OutConv);

        Ok(UNet {
            cfg,
            time_lin1,
            time_lin2,
            cond_enc,
            conv_in,
            res_blocks,
            attns,
            downs,
            ups,
            out_norm,
            out_conv,
            ops,
        })
    }

    /// The learned noise-level embedding: e(t) through the two fully
    /// connected layers.
    pub fn embed_noise_level<T: Real>(&self, store: &ParamStore<T>, t_level: f64) -> Array1<T> {
        let e0 = noise_embedding(t_level, self.cfg.embedding_dim, self.cfg.embedding_constant)
            .expect("validated config")
            .0
            .mapv(T::from_f64);
        let (e1, _) = self.time_lin1.forward(store, &e0);
        let (e2, _) = self.time_lin2.forward(store, &silu_vec(&e1));
        e2
    }

    /// Forward pass on channel-stacked tensors. `past`/`future` must already
    /// be masked by the caller.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        current: &Array3<T>,
        past: &Array3<T>,
        future: &Array3<T>,
        t_level: f64,
    ) -> (Array3<T>, UNetTape<T>) {
        let e0 = noise_embedding(t_level, self.cfg.embedding_dim, self.cfg.embedding_constant)
            .expect("validated config")
            .0
            .mapv(T::from_f64);
        let (e1, lin1_cache) = self.time_lin1.forward(store, &e0);
        let se1 = silu_vec(&e1);
        let (e2, lin2_cache) = self.time_lin2.forward(store, &se1);
        let semb = silu_vec(&e2);

        let (net_in, cond_tape) = match self.cfg.conditioning {
            ConditioningMode::Concat => (concat_channels(&[past, current, future]), None),
            ConditioningMode::Spatin => {
                let cond = concat_channels(&[past, future]);
                let (c1, c2) = self.cond_enc.as_ref().unwrap();
                let (f1, conv1) = c1.forward(store, &cond);
                let a1 = silu_map(&f1);
                let (f2, conv2) = c2.forward(store, &a1);
                let mut pyramid = vec![f2];
                for _ in 1..self.cfg.levels() {
                    pyramid.push(avgpool2(pyramid.last().unwrap()));
                }
                (
                    current.clone(),
                    Some(CondTape {
                        conv1,
                        f1,
                        conv2,
                        pyramid,
                    }),
                )
            }
        };

        let mut caches = Vec::with_capacity(self.ops.len());
        let mut skips: Vec<Array3<T>> = Vec::new();
        let mut h = net_in;
        for op in &self.ops {
            match *op {
                OpKind::ConvIn => {
                    let (y, c) = self.conv_in.forward(store, &h);
                    h = y;
                    caches.push(OpCache::ConvIn(c));
                }
                OpKind::PushSkip => {
                    skips.push(h.clone());
                    caches.push(OpCache::PushSkip);
                }
                OpKind::PopConcat => {
                    let skip = skips.pop().expect("skip stack");
                    let head = h.dim().0;
                    h = concat_channels(&[&h, &skip]);
                    caches.push(OpCache::PopConcat { head });
                }
                OpKind::Res(i) => {
                    let rb = &self.res_blocks[i];
                    let cond = cond_tape.as_ref().map(|ct| &ct.pyramid[rb.pyr_level]);
                    let (y, c) = rb.forward(store, &h, &semb, cond);
                    h = y;
                    caches.push(OpCache::Res(c));
                }
                OpKind::Attn(i) => {
                    let (y, c) = self.attns[i].forward(store, &h);
                    h = y;
                    caches.push(OpCache::Attn(c));
                }
                OpKind::Down(i) => {
                    let (y, c) = self.downs[i].forward(store, &h);
                    h = y;
                    caches.push(OpCache::Down(c));
                }
                OpKind::Up(i) => {
                    let up = upsample2(&h);
                    let (y, c) = self.ups[i].forward(store, &up);
                    h = y;
                    caches.push(OpCache::Up(c));
                }
                OpKind::OutNorm => {
                    let (y, c) = self.out_norm.forward(store, &h);
                    h = y;
                    caches.push(OpCache::OutNorm(c));
                }
                OpKind::OutSilu => {
                    caches.push(OpCache::OutSilu(h.clone()));
                    h = silu_map(&h);
                }
                OpKind::OutConv => {
                    let (y, c) = self.out_conv.forward(store, &h);
                    h = y;
                    caches.push(OpCache::OutConv(c));
                }
            }
        }
        debug_assert!(skips.is_empty());
        let out = h.clone();
        (
            h,
            UNetTape {
                ops: caches,
                e1,
                lin1: lin1_cache,
                e2,
                lin2: lin2_cache,
                cond: cond_tape,
                out,
            },
        )
    }

    /// Backward pass: replays the tape in reverse, accumulating parameter
    /// gradients. Gradients with respect to the input frames are discarded.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &UNetTape<T>,
        d_out: &Array3<T>,
        grads: &mut GradStore<T>,
    ) {
        let mut dh = d_out.clone();
        let mut d_semb = Array1::<T>::zeros(self.cfg.embedding_dim);
        let mut d_pyr: Vec<Option<Array3<T>>> = vec![None; self.cfg.levels()];
        let mut dskips: Vec<Array3<T>> = Vec::new();

        for (op, cache) in self.ops.iter().zip(tape.ops.iter()).rev() {
            match (op, cache) {
                (OpKind::OutConv, OpCache::OutConv(c)) => {
                    dh = self.out_conv.backward(store, c, &dh, grads);
                }
                (OpKind::OutSilu, OpCache::OutSilu(pre)) => {
                    dh = silu_backward(pre, &dh);
                }
                (OpKind::OutNorm, OpCache::OutNorm(c)) => {
                    dh = self.out_norm.backward(store, c, &dh, grads);
                }
                (OpKind::Up(i), OpCache::Up(c)) => {
                    let d_up = self.ups[*i].backward(store, c, &dh, grads);
                    dh = upsample2_backward(&d_up);
                }
                (OpKind::Down(i), OpCache::Down(c)) => {
                    dh = self.downs[*i].backward(store, c, &dh, grads);
                }
                (OpKind::Attn(i), OpCache::Attn(c)) => {
                    dh = self.attns[*i].backward(store, c, &dh, grads);
                }
                (OpKind::Res(i), OpCache::Res(c)) => {
                    let rb = &self.res_blocks[*i];
                    let (dx, dsb, dcond) = rb.backward(store, c, &dh, grads);
                    dh = dx;
                    d_semb.zip_mut_with(&dsb, |a, &b| *a = *a + b);
                    if let Some(dc) = dcond {
                        match &mut d_pyr[rb.pyr_level] {
                            Some(acc) => acc.zip_mut_with(&dc, |a, &b| *a = *a + b),
                            slot => *slot = Some(dc),
                        }
                    }
                }
                (OpKind::PopConcat, OpCache::PopConcat { head }) => {
                    let dskip = dh.slice(s![*head.., .., ..]).to_owned();
                    let dmain = dh.slice(s![..*head, .., ..]).to_owned();
                    dskips.push(dskip);
                    dh = dmain;
                }
                (OpKind::PushSkip, OpCache::PushSkip) => {
                    let ds = dskips.pop().expect("skip gradient stack");
                    dh.zip_mut_with(&ds, |a, &b| *a = *a + b);
                }
                (OpKind::ConvIn, OpCache::ConvIn(c)) => {
                    dh = self.conv_in.backward(store, c, &dh, grads);
                }
                _ => unreachable!("op/cache mismatch"),
            }
        }
        debug_assert!(dskips.is_empty());

        // Conditioning encoder backward (spatin).
        if let (Some((c1, c2)), Some(ct)) = (&self.cond_enc, &tape.cond) {
            let mut acc: Option<Array3<T>> = None;
            for l in (0..self.cfg.levels()).rev() {
                let mut d = match acc.take() {
                    Some(prev) => avgpool2_backward(&prev),
                    None => Array3::zeros(ct.pyramid[l].raw_dim()),
                };
                if let Some(dp) = &d_pyr[l] {
                    d.zip_mut_with(dp, |a, &b| *a = *a + b);
                }
                acc = Some(d);
            }
            let d_f2 = acc.expect("at least one level");
            let d_a1 = c2.backward(store, &ct.conv2, &d_f2, grads);
            let d_f1 = silu_backward(&ct.f1, &d_a1);
            let _ = c1.backward(store, &ct.conv1, &d_f1, grads);
        }

        // Time-embedding MLP backward.
        let d_e2 = silu_vec_backward(&tape.e2, &d_semb);
        let d_se1 = self.time_lin2.backward(store, &tape.lin2, &d_e2, grads);
        let d_e1 = silu_vec_backward(&tape.e1, &d_se1);
        let _ = self.time_lin1.backward(store, &tape.lin1, &d_e1, grads);
    }
}

/// An eps-predicting model with a differentiable forward pass. The loss and
/// gradient-check machinery is generic over this so the U-Net and closed-form
/// toy models share one code path.
pub trait EpsModel<T: Real> {
    type Tape;
    /// Inputs are channel-stacked; conditioning already masked.
    fn forward_eps(
        &self,
        store: &ParamStore<T>,
        current: &Array3<T>,
        past: &Array3<T>,
        future: &Array3<T>,
        t_level: f64,
    ) -> (Array3<T>, Self::Tape);
    fn backward_eps(
        &self,
        store: &ParamStore<T>,
        tape: &Self::Tape,
        d_eps: &Array3<T>,
        grads: &mut GradStore<T>,
    );
}

impl<T: Real> EpsModel<T> for UNet {
    type Tape = UNetTape<T>;

    fn forward_eps(
        &self,
        store: &ParamStore<T>,
        current: &Array3<T>,
        past: &Array3<T>,
        future: &Array3<T>,
        t_level: f64,
    ) -> (Array3<T>, Self::Tape) {
        self.forward(store, current, past, future, t_level)
    }

    fn backward_eps(
        &self,
        store: &ParamStore<T>,
        tape: &Self::Tape,
        d_eps: &Array3<T>,
        grads: &mut GradStore<T>,
    ) {
        self.backward(store, tape, d_eps, grads)
    }
}

/// Full eps prediction on frame blocks: stacks channels, runs the network,
/// unstacks the prediction. Conditioning blocks must already be masked.
pub fn denoise_forward<T: Real>(
    net: &UNet,
    store: &ParamStore<T>,
    xt: &Array4<T>,
    cond_past: &Array4<T>,
    cond_future: &Array4<T>,
    t: usize,
    t_total: usize,
) -> Result<Array4<T>> {
    let l = &net.cfg.layout;
    let expect = |name: &str, got: &[usize], frames: usize| -> Result<()> {
        let want = [frames, l.height, l.width, l.channels];
        if got != want {
            return Err(McvdError::shape(format!(
                "{name} block shape {got:?}, expected {want:?}"
            )));
        }
        Ok(())
    };
    expect("current", xt.shape(), l.current)?;
    expect("past", cond_past.shape(), l.past)?;
    expect("future", cond_future.shape(), l.future)?;
    for (name, t4) in [("current", xt), ("past", cond_past), ("future", cond_future)] {
        if t4.iter().any(|v| !v.is_finite()) {
            return Err(McvdError::numeric(format!(
                "non-finite values in {name} block"
            )));
        }
    }
    let t_level = t as f64 / t_total as f64;
    let (eps, _) = net.forward(
        store,
        &stack_frames(xt),
        &stack_frames(cond_past),
        &stack_frames(cond_future),
        t_level,
    );
    Ok(unstack_frames(&eps, l.current, l.channels))
}
