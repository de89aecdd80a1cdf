//! Conditional U-Net score estimator.
//!
//! Input is the 4-channel stack `[Re x_t, Im x_t, Re y, Im y]` over
//! `bins x frames`; output is the 2-channel score. Each level holds
//! `blocks_per_level` residual blocks and is followed by a two-fold
//! resampling; decoder levels concatenate the matching encoder output.
//!
//! Residual block (no attention anywhere):
//!
//! ```text
//! x -> GN -> SiLU -> conv3x3 -> (+ bias from embedding) -> GN -> SiLU -> conv3x3 --+
//! |                                                                               (+) / sqrt(2)
//! +-------------------------- skip (1x1 conv if channels change) ---------------+
//! ```
//!
//! Residual blocks are numbered in traversal order; even blocks take their bias
//! from the time embedding, odd blocks from the speaker embedding. Both
//! embeddings pass through bias-free feed-forward layers, so a zero embedding
//! contributes a zero bias. The final 2-channel map is divided by `sigma(t)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, GroupNormCache, Resampler, Tensor};
use super::params::{Init, ParamLayout, ParamRef, Segment};
use crate::error::{Error, Result};
use crate::sde::SdeParams;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of encoder (and decoder) levels; each level halves the
    /// spatial resolution once.
    pub depth: usize,
    pub blocks_per_level: usize,
    pub base_channels: usize,
    /// Channel multiplier per level, `depth` entries.
    pub channel_multipliers: Vec<usize>,
    /// `[1, 3, 3, 1]` FIR resampling; plain 2x2 averaging when off.
    pub use_fir_resampling: bool,
    pub time_embed_dim: usize,
    pub speaker_embed_dim: usize,
    /// Width of the embedding feed-forward layers; 0 means `4 * base_channels`.
    pub embed_hidden_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            blocks_per_level: 2,
            base_channels: 16,
            channel_multipliers: vec![1, 2],
            use_fir_resampling: true,
            time_embed_dim: 512,
            speaker_embed_dim: 192,
            embed_hidden_dim: 0,
        }
    }
}

impl NetworkConfig {
    /// Four levels of two residual blocks each, as used for full-scale runs.
    pub fn full_scale() -> Self {
        Self {
            depth: 4,
            blocks_per_level: 2,
            base_channels: 128,
            channel_multipliers: vec![1, 1, 2, 2],
            ..Self::default()
        }
    }

    pub fn hidden_dim(&self) -> usize {
        if self.embed_hidden_dim == 0 {
            4 * self.base_channels
        } else {
            self.embed_hidden_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("network: {m}")));
        if self.depth == 0 || self.blocks_per_level == 0 || self.base_channels == 0 {
            return fail("depth, blocks_per_level and base_channels must be positive".into());
        }
        if self.channel_multipliers.len() != self.depth {
            return fail(format!(
                "channel_multipliers has {} entries, depth is {}",
                self.channel_multipliers.len(),
                self.depth
            ));
        }
        if self.channel_multipliers.contains(&0) {
            return fail("channel multipliers must be positive".into());
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return fail("time_embed_dim must be even and at least 2".into());
        }
        if self.speaker_embed_dim == 0 {
            return fail("speaker_embed_dim must be positive".into());
        }
        Ok(())
    }
}

/// Fixed sinusoidal features of `ln sigma(t)`.
pub fn time_embedding(t: f64, sde: &SdeParams, dim: usize) -> Vec<f64> {
    let u = sde.std(t).max(1e-5).ln();
    let half = dim / 2;
    let (lo, hi) = ((1.0f64 / 16.0).ln(), 16.0f64.ln());
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let f = (lo + frac * (hi - lo)).exp();
        let phase = 2.0 * PI * f * u;
        out[k] = phase.sin();
        out[half + k] = phase.cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Conditioning {
    Time,
    Speaker,
}

#[derive(Debug, Clone)]
struct ResBlock {
    cin: usize,
    cout: usize,
    groups_in: usize,
    groups_out: usize,
    gn1_gamma: ParamRef,
    gn1_beta: ParamRef,
    conv1_w: ParamRef,
    conv1_b: ParamRef,
    proj: ParamRef,
    gn2_gamma: ParamRef,
    gn2_beta: ParamRef,
    conv2_w: ParamRef,
    conv2_b: ParamRef,
    skip: Option<(ParamRef, ParamRef)>,
    cond: Conditioning,
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Block(usize),
    Save,
    Down,
    Up,
    Merge,
}

struct BlockCache {
    x: Tensor,
    gn1: GroupNormCache,
    a1: Tensor,
    h1: Tensor,
    gn2: GroupNormCache,
    a2: Tensor,
    h2: Tensor,
}

enum StageCache {
    Block(BlockCache),
    Save,
    Down { h: usize, w: usize },
    Up,
    Merge { main: usize },
}

struct MlpCache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    out: Vec<f64>,
}

/// Intermediate values kept by [`ScoreNetwork::forward_cached`] for the
/// backward pass.
pub struct ForwardCache {
    inv_sigma: f64,
    time: MlpCache,
    speaker: MlpCache,
    input: Tensor,
    stages: Vec<StageCache>,
    out_x: Tensor,
    out_gn: GroupNormCache,
    out_a: Tensor,
    out_h: Tensor,
}

#[derive(Debug, Clone)]
pub struct ScoreNetwork {
    config: NetworkConfig,
    sde: SdeParams,
    layout: ParamLayout,
    resampler: Resampler,
    hidden: usize,
    time_w1: ParamRef,
    time_w2: ParamRef,
    spk_w1: ParamRef,
    spk_w2: ParamRef,
    conv_in_w: ParamRef,
    conv_in_b: ParamRef,
    blocks: Vec<ResBlock>,
    stages: Vec<Stage>,
    out_groups: usize,
    out_gamma: ParamRef,
    out_beta: ParamRef,
    conv_out_w: ParamRef,
    conv_out_b: ParamRef,
}

impl ScoreNetwork {
    pub fn new(config: NetworkConfig, sde: SdeParams) -> Result<Self> {
        config.validate()?;
        sde.validate()?;
        let mut l = ParamLayout::default();
        let e = config.hidden_dim();
        let td = config.time_embed_dim;
        let sd = config.speaker_embed_dim;
        let time_w1 = l.add_weight("embed.time.fc1", &[e, td], td, 1.0);
        let time_w2 = l.add_weight("embed.time.fc2", &[e, e], e, 1.0);
        // Scaled for unit-norm speaker vectors.
        let spk_w1 = l.add_weight("embed.speaker.fc1", &[e, sd], 1, 1.0);
        let spk_w2 = l.add_weight("embed.speaker.fc2", &[e, e], e, 1.0);

        let mut ch = config.base_channels * config.channel_multipliers[0];
        let conv_in_w = l.add_weight("conv_in.weight", &[ch, 4, 3, 3], 4 * 9, 1.0);
        let conv_in_b = l.add("conv_in.bias", &[ch], Init::Zeros);

        let mut blocks = Vec::new();
        let mut stages = Vec::new();
        let mut add_block = |l: &mut ParamLayout, name: String, cin: usize, cout: usize| -> Stage {
            let idx = blocks.len();
            let skip = (cin != cout).then(|| {
                (
                    l.add_weight(format!("{name}.skip.weight"), &[cout, cin, 1, 1], cin, 1.0),
                    l.add(format!("{name}.skip.bias"), &[cout], Init::Zeros),
                )
            });
            blocks.push(ResBlock {
                cin,
                cout,
                groups_in: ops::group_count(cin),
                groups_out: ops::group_count(cout),
                gn1_gamma: l.add(format!("{name}.norm1.gamma"), &[cin], Init::Ones),
                gn1_beta: l.add(format!("{name}.norm1.beta"), &[cin], Init::Zeros),
                conv1_w: l.add_weight(format!("{name}.conv1.weight"), &[cout, cin, 3, 3], cin * 9, 1.0),
                conv1_b: l.add(format!("{name}.conv1.bias"), &[cout], Init::Zeros),
                proj: l.add_weight(format!("{name}.cond.weight"), &[cout, e], e, 1.0),
                gn2_gamma: l.add(format!("{name}.norm2.gamma"), &[cout], Init::Ones),
                gn2_beta: l.add(format!("{name}.norm2.beta"), &[cout], Init::Zeros),
                conv2_w: l.add_weight(format!("{name}.conv2.weight"), &[cout, cout, 3, 3], cout * 9, 0.1),
                conv2_b: l.add(format!("{name}.conv2.bias"), &[cout], Init::Zeros),
                skip,
                cond: if idx % 2 == 0 {
                    Conditioning::Time
                } else {
                    Conditioning::Speaker
                },
            });
            Stage::Block(idx)
        };

        let nb = config.blocks_per_level;
        let mut skip_channels = Vec::new();
        for lvl in 0..config.depth {
            let c = config.base_channels * config.channel_multipliers[lvl];
            for j in 0..nb {
                stages.push(add_block(&mut l, format!("down.{lvl}.{j}"), ch, c));
                ch = c;
            }
            stages.push(Stage::Save);
            skip_channels.push(ch);
            stages.push(Stage::Down);
        }
        for j in 0..nb {
            stages.push(add_block(&mut l, format!("mid.{j}"), ch, ch));
        }
        for lvl in (0..config.depth).rev() {
            stages.push(Stage::Up);
            stages.push(Stage::Merge);
            ch += skip_channels.pop().expect("one skip per level");
            let c = config.base_channels * config.channel_multipliers[lvl];
            for j in 0..nb {
                stages.push(add_block(&mut l, format!("up.{lvl}.{j}"), ch, c));
                ch = c;
            }
        }
        let out_groups = ops::group_count(ch);
        let out_gamma = l.add("out.norm.gamma", &[ch], Init::Ones);
        let out_beta = l.add("out.norm.beta", &[ch], Init::Zeros);
        let conv_out_w = l.add_weight("out.conv.weight", &[2, ch, 3, 3], ch * 9, 0.1);
        let conv_out_b = l.add("out.conv.bias", &[2], Init::Zeros);

        Ok(Self {
            resampler: if config.use_fir_resampling {
                Resampler::Fir
            } else {
                Resampler::Box
            },
            hidden: e,
            config,
            sde,
            layout: l,
            time_w1,
            time_w2,
            spk_w1,
            spk_w2,
            conv_in_w,
            conv_in_b,
            blocks,
            stages,
            out_groups,
            out_gamma,
            out_beta,
            conv_out_w,
            conv_out_b,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn sde(&self) -> &SdeParams {
        &self.sde
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn segments(&self) -> &[Segment] {
        self.layout.segments()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Output channels of residual block `index`.
    pub fn block_channels(&self, index: usize) -> Option<usize> {
        self.blocks.get(index).map(|b| b.cout)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.layout.initialize(rng)
    }

    /// Checks that a `bins x frames` input can pass through every resampling.
    pub fn check_input_shape(&self, bins: usize, frames: usize) -> Result<()> {
        let m = 1usize << self.config.depth;
        if bins == 0 || frames == 0 || !bins.is_multiple_of(m) || !frames.is_multiple_of(m) {
            return Err(Error::shape(
                format!("bins and frames divisible by {m} (depth {})", self.config.depth),
                format!("{bins}x{frames}"),
            ));
        }
        Ok(())
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::shape(
                format!("{} parameters", self.layout.len()),
                params.len(),
            ));
        }
        Ok(())
    }

    fn mlp(&self, params: &[f64], w1: ParamRef, w2: ParamRef, input: &[f64]) -> MlpCache {
        let pre1 = ops::linear(w1.get(params), input, self.hidden);
        let act1 = ops::silu_vec(&pre1);
        let pre2 = ops::linear(w2.get(params), &act1, self.hidden);
        let out = ops::silu_vec(&pre2);
        MlpCache {
            input: input.to_vec(),
            pre1,
            act1,
            pre2,
            out,
        }
    }

    fn mlp_backward(&self, params: &[f64], w1: ParamRef, w2: ParamRef, c: &MlpCache, dout: &[f64], grads: &mut [f64]) {
        let dpre2 = ops::silu_backward(&c.pre2, dout);
        let dact1 = ops::linear_backward(w2.get(params), &c.act1, &dpre2, w2.get_mut(grads));
        let dpre1 = ops::silu_backward(&c.pre1, &dact1);
        ops::linear_backward(w1.get(params), &c.input, &dpre1, w1.get_mut(grads));
    }

    fn check_embeddings(&self, e_t: &[f64], e_ts: &[f64]) -> Result<()> {
        if e_t.len() != self.config.time_embed_dim {
            return Err(Error::EmbeddingDim {
                id: "time".into(),
                expected: self.config.time_embed_dim,
                actual: e_t.len(),
            });
        }
        if e_ts.len() != self.config.speaker_embed_dim {
            return Err(Error::EmbeddingDim {
                id: "speaker".into(),
                expected: self.config.speaker_embed_dim,
                actual: e_ts.len(),
            });
        }
        Ok(())
    }

    /// Adds the per-channel conditioning bias of residual block `block_index`
    /// to `features`. Even blocks project the time embedding `e_t`, odd blocks
    /// the speaker embedding `e_ts`.
    pub fn apply_conditioning(
        &self,
        params: &[f64],
        features: &mut Tensor,
        e_t: &[f64],
        e_ts: &[f64],
        block_index: usize,
    ) -> Result<()> {
        self.check_params(params)?;
        self.check_embeddings(e_t, e_ts)?;
        let block = self
            .blocks
            .get(block_index)
            .ok_or_else(|| Error::InvalidInput(format!("no residual block {block_index}")))?;
        if features.c != block.cout {
            return Err(Error::shape(format!("{} channels", block.cout), features.c));
        }
        let hidden = match block.cond {
            Conditioning::Time => self.mlp(params, self.time_w1, self.time_w2, e_t).out,
            Conditioning::Speaker => self.mlp(params, self.spk_w1, self.spk_w2, e_ts).out,
        };
        let bias = ops::linear(block.proj.get(params), &hidden, block.cout);
        for (c, b) in bias.iter().enumerate() {
            features.channel_mut(c).iter_mut().for_each(|v| *v += b);
        }
        Ok(())
    }

    fn block_forward(&self, b: &ResBlock, params: &[f64], x: Tensor, emb: &[f64]) -> (Tensor, BlockCache) {
        let (a1, gn1) = ops::group_norm(&x, b.groups_in, b.gn1_gamma.get(params), b.gn1_beta.get(params));
        let h1 = Tensor {
            data: ops::silu_vec(&a1.data),
            ..a1.clone()
        };
        let mut c1 = ops::conv2d(&h1, b.conv1_w.get(params), b.conv1_b.get(params), b.cout, 3);
        let bias = ops::linear(b.proj.get(params), emb, b.cout);
        for (c, bv) in bias.iter().enumerate() {
            c1.channel_mut(c).iter_mut().for_each(|v| *v += bv);
        }
        let (a2, gn2) = ops::group_norm(&c1, b.groups_out, b.gn2_gamma.get(params), b.gn2_beta.get(params));
        let h2 = Tensor {
            data: ops::silu_vec(&a2.data),
            ..a2.clone()
        };
        let mut out = ops::conv2d(&h2, b.conv2_w.get(params), b.conv2_b.get(params), b.cout, 3);
        match b.skip {
            Some((w, bias)) => out.add_assign(&ops::conv2d(&x, w.get(params), bias.get(params), b.cout, 1)),
            None => out.add_assign(&x),
        }
        out.scale(FRAC_1_SQRT_2);
        (
            out,
            BlockCache {
                x,
                gn1,
                a1,
                h1,
                gn2,
                a2,
                h2,
            },
        )
    }

    /// Returns the input gradient; accumulates parameter gradients and the
    /// gradient w.r.t. the block's conditioning embedding into `demb`.
    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        b: &ResBlock,
        params: &[f64],
        c: &BlockCache,
        emb: &[f64],
        dout: &Tensor,
        grads: &mut [f64],
        demb: &mut [f64],
    ) -> Tensor {
        let mut d = dout.clone();
        d.scale(FRAC_1_SQRT_2);
        let mut db2 = vec![0.0; b.cout];
        let dh2 = ops::conv2d_backward(&c.h2, b.conv2_w.get(params), &d, b.conv2_w.get_mut(grads), &mut db2, 3);
        add_into(b.conv2_b.get_mut(grads), &db2);
        let da2 = Tensor {
            data: ops::silu_backward(&c.a2.data, &dh2.data),
            ..dh2
        };
        let dc1 = {
            let mut dg = vec![0.0; b.cout];
            let mut dbt = vec![0.0; b.cout];
            let dc1 = ops::group_norm_backward(&c.gn2, b.gn2_gamma.get(params), &da2, &mut dg, &mut dbt);
            add_into(b.gn2_gamma.get_mut(grads), &dg);
            add_into(b.gn2_beta.get_mut(grads), &dbt);
            dc1
        };
        let dbias: Vec<f64> = (0..b.cout).map(|ch| dc1.channel(ch).iter().sum()).collect();
        let de = ops::linear_backward(b.proj.get(params), emb, &dbias, b.proj.get_mut(grads));
        add_into(demb, &de);
        let mut db1 = vec![0.0; b.cout];
        let dh1 = ops::conv2d_backward(&c.h1, b.conv1_w.get(params), &dc1, b.conv1_w.get_mut(grads), &mut db1, 3);
        add_into(b.conv1_b.get_mut(grads), &db1);
        let da1 = Tensor {
            data: ops::silu_backward(&c.a1.data, &dh1.data),
            ..dh1
        };
        let mut dg = vec![0.0; b.cin];
        let mut dbt = vec![0.0; b.cin];
        let mut dx = ops::group_norm_backward(&c.gn1, b.gn1_gamma.get(params), &da1, &mut dg, &mut dbt);
        add_into(b.gn1_gamma.get_mut(grads), &dg);
        add_into(b.gn1_beta.get_mut(grads), &dbt);
        match b.skip {
            Some((w, bias)) => {
                let mut dbs = vec![0.0; b.cout];
                let dskip = ops::conv2d_backward(&c.x, w.get(params), &d, w.get_mut(grads), &mut dbs, 1);
                add_into(bias.get_mut(grads), &dbs);
                dx.add_assign(&dskip);
            }
            None => dx.add_assign(&d),
        }
        dx
    }

    /// Score estimate for one example. `x_t` and `y` are 2-channel
    /// `[re; im]` maps of shape `bins x frames`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        params: &[f64],
        x_t: &[f64],
        y: &[f64],
        bins: usize,
        frames: usize,
        t: f64,
        e_ts: &[f64],
    ) -> Result<Vec<f64>> {
        Ok(self.forward_cached(params, x_t, y, bins, frames, t, e_ts)?.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_cached(
        &self,
        params: &[f64],
        x_t: &[f64],
        y: &[f64],
        bins: usize,
        frames: usize,
        t: f64,
        e_ts: &[f64],
    ) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_params(params)?;
        self.check_input_shape(bins, frames)?;
        let plane = bins * frames;
        if x_t.len() != 2 * plane || y.len() != 2 * plane {
            return Err(Error::shape(
                format!("2x{bins}x{frames}"),
                format!("{} and {} values", x_t.len(), y.len()),
            ));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("process time"));
        }
        let e_t = time_embedding(t, &self.sde, self.config.time_embed_dim);
        self.check_embeddings(&e_t, e_ts)?;
        let sigma = self.sde.std(t);
        if sigma <= 0.0 {
            return Err(Error::InvalidInput(format!("sigma({t}) = 0; score undefined")));
        }

        let time = self.mlp(params, self.time_w1, self.time_w2, &e_t);
        let speaker = self.mlp(params, self.spk_w1, self.spk_w2, e_ts);

        let mut input = Vec::with_capacity(4 * plane);
        input.extend_from_slice(x_t);
        input.extend_from_slice(y);
        let input = Tensor::from_vec(4, bins, frames, input)?;
        let mut h = ops::conv2d(&input, self.conv_in_w.get(params), self.conv_in_b.get(params), self.conv_in_w.len / 36, 3);

        let mut stages = Vec::with_capacity(self.stages.len());
        let mut skips: Vec<Tensor> = Vec::new();
        for stage in &self.stages {
            match *stage {
                Stage::Block(i) => {
                    let b = &self.blocks[i];
                    let emb = match b.cond {
                        Conditioning::Time => &time.out,
                        Conditioning::Speaker => &speaker.out,
                    };
                    let (out, cache) = self.block_forward(b, params, h, emb);
                    h = out;
                    stages.push(StageCache::Block(cache));
                }
                Stage::Save => {
                    skips.push(h.clone());
                    stages.push(StageCache::Save);
                }
                Stage::Down => {
                    let (hh, ww) = (h.h, h.w);
                    h = self.resampler.down(&h);
                    stages.push(StageCache::Down { h: hh, w: ww });
                }
                Stage::Up => {
                    h = self.resampler.up(&h);
                    stages.push(StageCache::Up);
                }
                Stage::Merge => {
                    let skip = skips.pop().expect("merge without matching save");
                    let main = h.c;
                    h = Tensor::concat(&h, &skip);
                    stages.push(StageCache::Merge { main });
                }
            }
        }

        let (out_a, out_gn) = ops::group_norm(&h, self.out_groups, self.out_gamma.get(params), self.out_beta.get(params));
        let out_h = Tensor {
            data: ops::silu_vec(&out_a.data),
            ..out_a.clone()
        };
        let mut out = ops::conv2d(&out_h, self.conv_out_w.get(params), self.conv_out_b.get(params), 2, 3);
        let inv_sigma = 1.0 / sigma;
        out.scale(inv_sigma);
        Ok((
            out.data,
            ForwardCache {
                inv_sigma,
                time,
                speaker,
                input,
                stages,
                out_x: h,
                out_gn,
                out_a,
                out_h,
            },
        ))
    }

    /// Accumulates into `grads` the parameter gradient of `<dscore, score>`.
    pub fn backward(&self, params: &[f64], cache: &ForwardCache, dscore: &[f64], grads: &mut [f64]) -> Result<()> {
        self.check_params(params)?;
        self.check_params(grads)?;
        let (bins, frames) = (cache.input.h, cache.input.w);
        let mut dout = Tensor::from_vec(2, bins, frames, dscore.to_vec())?;
        dout.scale(cache.inv_sigma);

        let mut dbias = vec![0.0; 2];
        let dh_act = ops::conv2d_backward(&cache.out_h, self.conv_out_w.get(params), &dout, self.conv_out_w.get_mut(grads), &mut dbias, 3);
        add_into(self.conv_out_b.get_mut(grads), &dbias);
        let da = Tensor {
            data: ops::silu_backward(&cache.out_a.data, &dh_act.data),
            ..dh_act
        };
        let c = cache.out_x.c;
        let mut dg = vec![0.0; c];
        let mut db = vec![0.0; c];
        let mut dh = ops::group_norm_backward(&cache.out_gn, self.out_gamma.get(params), &da, &mut dg, &mut db);
        add_into(self.out_gamma.get_mut(grads), &dg);
        add_into(self.out_beta.get_mut(grads), &db);

        let mut d_time = vec![0.0; self.hidden];
        let mut d_spk = vec![0.0; self.hidden];
        let mut skip_grads: Vec<Tensor> = Vec::new();
        for (stage, sc) in self.stages.iter().zip(&cache.stages).rev() {
            match (stage, sc) {
                (Stage::Block(i), StageCache::Block(bc)) => {
                    let b = &self.blocks[*i];
                    let (emb, demb) = match b.cond {
                        Conditioning::Time => (&cache.time.out, &mut d_time),
                        Conditioning::Speaker => (&cache.speaker.out, &mut d_spk),
                    };
                    dh = self.block_backward(b, params, bc, emb, &dh, grads, demb);
                }
                (Stage::Save, StageCache::Save) => {
                    let g = skip_grads.pop().expect("save without matching merge");
                    dh.add_assign(&g);
                }
                (Stage::Down, StageCache::Down { h, w }) => {
                    dh = self.resampler.down_adjoint(&dh, *h, *w);
                }
                (Stage::Up, StageCache::Up) => {
                    dh = self.resampler.up_backward(&dh);
                }
                (Stage::Merge, StageCache::Merge { main }) => {
                    let (dmain, dskip) = dh.split(*main);
                    skip_grads.push(dskip);
                    dh = dmain;
                }
                _ => unreachable!("stage/cache mismatch"),
            }
        }
        let mut dbin = vec![0.0; dh.c];
        ops::conv2d_backward(&cache.input, self.conv_in_w.get(params), &dh, self.conv_in_w.get_mut(grads), &mut dbin, 3);
        add_into(self.conv_in_b.get_mut(grads), &dbin);

        self.mlp_backward(params, self.time_w1, self.time_w2, &cache.time, &d_time, grads);
        self.mlp_backward(params, self.spk_w1, self.spk_w2, &cache.speaker, &d_spk, grads);
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            depth: 2,
            blocks_per_level: 1,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            use_fir_resampling: true,
            time_embed_dim: 512,
            speaker_embed_dim: 192,
            embed_hidden_dim: 4,
        }
    }

    fn inputs(bins: usize, frames: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = 2 * bins * frames;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let e: Vec<f64> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();
        (x, y, e)
    }

    #[test]
    fn output_has_two_channels_of_input_shape() {
        let net = ScoreNetwork::new(tiny_config(), SdeParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = net.init_params(&mut rng);
        let (x, y, e) = inputs(8, 12, &mut rng);
        let out = net.forward(&params, &x, &y, 8, 12, 0.5, &e).unwrap();
        assert_eq!(out.len(), 2 * 8 * 12);
        assert!(out.iter().all(|v| v.is_finite()));
        assert_eq!(out, net.forward(&params, &x, &y, 8, 12, 0.5, &e).unwrap());
    }

    #[test]
    fn indivisible_shape_is_rejected() {
        let net = ScoreNetwork::new(tiny_config(), SdeParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = net.init_params(&mut rng);
        let (x, y, e) = inputs(6, 8, &mut rng);
        assert!(matches!(net.forward(&params, &x, &y, 6, 8, 0.5, &e), Err(Error::Shape { .. })));
    }

    #[test]
    fn default_config_block_count_and_size() {
        let net = ScoreNetwork::new(NetworkConfig::default(), SdeParams::default()).unwrap();
        // 2 levels x 2 blocks, 2 middle blocks, 2 levels x 2 blocks.
        assert_eq!(net.num_blocks(), 10);
        assert!(net.param_count() > 100_000 && net.param_count() < 400_000, "{}", net.param_count());
    }

    #[test]
    fn time_embedding_is_distinct_and_deterministic() {
        let sde = SdeParams::default();
        let a = time_embedding(0.1, &sde, 512);
        let b = time_embedding(0.9, &sde, 512);
        assert_eq!(a.len(), 512);
        assert_eq!(a, time_embedding(0.1, &sde, 512));
        let dist: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.0);
        let grid: Vec<Vec<f64>> = (0..=1000).map(|i| time_embedding(i as f64 / 1000.0, &sde, 512)).collect();
        for w in grid.windows(2) {
            assert_ne!(w[0], w[1]);
        }
    }

    #[test]
    fn conditioning_zero_embedding_and_broadcast() {
        let net = ScoreNetwork::new(tiny_config(), SdeParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = net.init_params(&mut rng);
        let zeros_t = vec![0.0; 512];
        let zeros_s = vec![0.0; 192];
        for block in 0..net.num_blocks() {
            let c = net.block_channels(block).unwrap();
            let feats = Tensor::from_vec(c, 3, 5, (0..c * 15).map(|i| i as f64).collect()).unwrap();
            let mut f = feats.clone();
            net.apply_conditioning(&params, &mut f, &zeros_t, &zeros_s, block).unwrap();
            assert_eq!(f, feats);
        }
        let feats = Tensor::from_vec(4, 3, 5, (0..60).map(|i| i as f64).collect()).unwrap();
        let e_t = time_embedding(0.4, &SdeParams::default(), 512);
        let mut f = feats.clone();
        net.apply_conditioning(&params, &mut f, &e_t, &zeros_s, 0).unwrap();
        for c in 0..4 {
            let d: Vec<f64> = f.channel(c).iter().zip(feats.channel(c)).map(|(a, b)| a - b).collect();
            assert!(d.iter().all(|v| (v - d[0]).abs() < 1e-12));
        }
        assert!(net.apply_conditioning(&params, &mut f, &e_t[..10], &zeros_s, 0).is_err());
    }

    #[test]
    fn block_parity_selects_embedding() {
        let net = ScoreNetwork::new(tiny_config(), SdeParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = net.init_params(&mut rng);
        let e_t = time_embedding(0.4, &SdeParams::default(), 512);
        let e_s: Vec<f64> = (0..192).map(|i| (i as f64 * 0.37).sin()).collect();
        let zt = vec![0.0; 512];
        let zs = vec![0.0; 192];
        let probe = |block: usize, et: &[f64], es: &[f64]| {
            let mut f = Tensor::zeros(net.block_channels(block).unwrap(), 2, 2);
            net.apply_conditioning(&params, &mut f, et, es, block).unwrap();
            f.data.iter().map(|v| v.abs()).sum::<f64>()
        };
        // Block 0 reacts to the time embedding only, block 1 to the speaker only.
        assert!(probe(0, &e_t, &zs) > 0.0);
        assert_eq!(probe(0, &zt, &e_s), 0.0);
        assert_eq!(probe(1, &e_t, &zs), 0.0);
        assert!(probe(1, &zt, &e_s) > 0.0);
    }

    #[test]
    fn directional_derivative_matches_central_difference() {
        for fir in [true, false] {
            let cfg = NetworkConfig {
                use_fir_resampling: fir,
                ..tiny_config()
            };
            let net = ScoreNetwork::new(cfg, SdeParams::default()).unwrap();
            assert!(net.param_count() < 10_000, "{}", net.param_count());
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let params = net.init_params(&mut rng);
            let (x, y, e) = inputs(4, 8, &mut rng);
            let (out, cache) = net.forward_cached(&params, &x, &y, 4, 8, 0.3, &e).unwrap();
            // Output coordinate 5 along a random parameter direction.
            let mut seed = vec![0.0; out.len()];
            seed[5] = 1.0;
            let mut grads = vec![0.0; params.len()];
            net.backward(&params, &cache, &seed, &mut grads).unwrap();
            let dir: Vec<f64> = (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let h = 1e-4;
            let shifted = |s: f64| {
                let p: Vec<f64> = params.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
                net.forward(&p, &x, &y, 4, 8, 0.3, &e).unwrap()[5]
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            assert!(rel < 1e-3, "fir={fir}: analytic {analytic} numeric {numeric}");
        }
    }
}
