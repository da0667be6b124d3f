//! Class-conditioned U-Net noise predictor.
//!
//! Encoder-decoder with residual blocks, three 2x downsampling and three
//! upsampling stages with skip connections. A learnable embedding of
//! (timestep, class) is projected and broadcast to extra input channels,
//! concatenated with the noisy image before the first convolution.

use candle_core::Tensor;
use candle_nn::ops::silu;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::layers::{resblock_flops, Conv2d, Embedding, GroupNorm, Linear, ResidualBlock};
use crate::models::{conv_flops, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub class_count: usize,
    pub timestep_count: usize,
    /// Channel widths at resolutions (s, s/2, s/4, s/8).
    pub stage_widths: [usize; 4],
    /// Residual blocks per downsampling stage; upsampling stages use one more.
    pub res_blocks: usize,
    /// Channels of the broadcast conditioning embedding.
    pub cond_channels: usize,
    pub norm_groups: usize,
}

impl DenoiserConfig {
    /// Default budget config (~5.8M parameters at 32x32, 10 classes, 1 channel).
    pub fn default_budget(image_channels: usize, class_count: usize, timesteps: usize) -> Self {
        Self {
            image_size: 32,
            image_channels,
            class_count,
            timestep_count: timesteps,
            stage_widths: [16, 16, 32, 200],
            res_blocks: 2,
            cond_channels: 8,
            norm_groups: 4,
        }
    }

    /// Channels halved per block (~1.45M parameters).
    pub fn small_budget(image_channels: usize, class_count: usize, timesteps: usize) -> Self {
        Self {
            stage_widths: [8, 8, 16, 100],
            cond_channels: 4,
            ..Self::default_budget(image_channels, class_count, timesteps)
        }
    }

    /// A deliberately tiny config for tests.
    pub fn tiny(image_channels: usize, class_count: usize, timesteps: usize) -> Self {
        Self {
            image_size: 8,
            image_channels,
            class_count,
            timestep_count: timesteps,
            stage_widths: [4, 4, 8, 8],
            res_blocks: 1,
            cond_channels: 4,
            norm_groups: 2,
        }
    }

    fn time_dim(&self) -> usize {
        4 * self.cond_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by 8 (three 2x downsamples required)",
                self.image_size
            )));
        }
        if self.stage_widths.iter().any(|&w| w == 0)
            || self.class_count == 0
            || self.timestep_count == 0
            || self.cond_channels == 0
        {
            return Err(Error::Config("denoiser config fields must be positive".into()));
        }
        if self
            .stage_widths
            .iter()
            .any(|&w| w % self.norm_groups != 0)
        {
            return Err(Error::Config(format!(
                "stage widths {:?} must be divisible by norm_groups {}",
                self.stage_widths, self.norm_groups
            )));
        }
        Ok(())
    }
}

pub struct ConditionalDenoiser {
    pub config: DenoiserConfig,
    store: ParamStore,
    class_embed: Embedding,
    time_mlp: Linear,
    cond_proj: Linear,
    conv_in: Conv2d,
    down_blocks: Vec<Vec<ResidualBlock>>,
    downsamples: Vec<Conv2d>,
    middle: Vec<ResidualBlock>,
    up_convs: Vec<Option<Conv2d>>,
    up_blocks: Vec<Vec<ResidualBlock>>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

/// Build the denoiser with deterministic initialization under `seed`.
pub fn build_denoiser(config: &DenoiserConfig, seed: u64) -> Result<ConditionalDenoiser> {
    config.validate()?;
    let cfg = config.clone();
    let mut store = ParamStore::new(seed);
    let tdim = cfg.time_dim();
    let g = cfg.norm_groups;
    let w = cfg.stage_widths;

    let class_embed = Embedding::new(&mut store, "cond.class", cfg.class_count, tdim)?;
    let time_mlp = Linear::new(&mut store, "cond.time", tdim, tdim)?;
    let cond_proj = Linear::new(&mut store, "cond.proj", tdim, cfg.cond_channels)?;
    let conv_in = Conv2d::new(
        &mut store,
        "conv_in",
        cfg.image_channels + cfg.cond_channels,
        w[0],
        3,
        1,
        1,
    )?;

    let mut down_blocks = Vec::new();
    let mut downsamples = Vec::new();
    let mut cur = w[0];
    for s in 0..4 {
        let mut blocks = Vec::new();
        for b in 0..cfg.res_blocks {
            blocks.push(ResidualBlock::new(
                &mut store,
                &format!("down.{s}.{b}"),
                cur,
                w[s],
                g,
                1,
            )?);
            cur = w[s];
        }
        down_blocks.push(blocks);
        if s < 3 {
            downsamples.push(Conv2d::new(
                &mut store,
                &format!("down.{s}.pool"),
                cur,
                cur,
                3,
                2,
                1,
            )?);
        }
    }

    let middle = (0..2)
        .map(|b| ResidualBlock::new(&mut store, &format!("middle.{b}"), cur, cur, g, 1))
        .collect::<Result<Vec<_>>>()?;

    let mut up_convs = Vec::new();
    let mut up_blocks = Vec::new();
    for s in (0..4).rev() {
        if s < 3 {
            up_convs.push(Some(Conv2d::new(
                &mut store,
                &format!("up.{s}.upconv"),
                cur,
                cur,
                3,
                1,
                1,
            )?));
        } else {
            up_convs.push(None);
        }
        let mut blocks = Vec::new();
        for b in 0..cfg.res_blocks + 1 {
            let cin = cur + if b == 0 { w[s] } else { 0 };
            blocks.push(ResidualBlock::new(
                &mut store,
                &format!("up.{s}.{b}"),
                cin,
                w[s],
                g,
                1,
            )?);
            cur = w[s];
        }
        up_blocks.push(blocks);
    }

    let out_norm = GroupNorm::new(&mut store, "out.norm", cur, g)?;
    let out_conv = Conv2d::new(&mut store, "out.conv", cur, cfg.image_channels, 3, 1, 1)?;

    Ok(ConditionalDenoiser {
        config: cfg,
        store,
        class_embed,
        time_mlp,
        cond_proj,
        conv_in,
        down_blocks,
        downsamples,
        middle,
        up_convs,
        up_blocks,
        out_norm,
        out_conv,
    })
}

impl ConditionalDenoiser {
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Predict the noise for a batch. `x` is (B, C, H, W) in [-1, 1] space,
    /// `labels` class ids, `timesteps` values in [1, T]. Output matches `x`.
    pub fn forward(&self, x: &Tensor, labels: &[u32], timesteps: &[usize]) -> Result<Tensor> {
        let (b, _c, h, w) = x.dims4()?;
        if labels.len() != b || timesteps.len() != b {
            return Err(Error::Argument(format!(
                "batch {b} vs {} labels / {} timesteps",
                labels.len(),
                timesteps.len()
            )));
        }
        for &t in timesteps {
            if t == 0 || t > self.config.timestep_count {
                return Err(Error::Argument(format!(
                    "timestep {t} outside [1, {}]",
                    self.config.timestep_count
                )));
            }
        }
        let cond = self.condition(labels, timesteps)?; // (B, emb)
        let emb = self.config.cond_channels;
        let cond_maps = cond
            .reshape((b, emb, 1, 1))?
            .broadcast_as((b, emb, h, w))?
            .contiguous()?;
        let mut cur = self.conv_in.forward(&Tensor::cat(&[x, &cond_maps], 1)?)?;

        let mut skips = Vec::new();
        for s in 0..4 {
            for block in &self.down_blocks[s] {
                cur = block.forward(&cur)?;
            }
            skips.push(cur.clone());
            if s < 3 {
                cur = self.downsamples[s].forward(&cur)?;
            }
        }
        for block in &self.middle {
            cur = block.forward(&cur)?;
        }
        for (i, s) in (0..4).rev().enumerate() {
            if let Some(upconv) = &self.up_convs[i] {
                let (_, _, ch, cw) = cur.dims4()?;
                cur = upconv.forward(&cur.upsample_nearest2d(ch * 2, cw * 2)?)?;
            }
            for (bidx, block) in self.up_blocks[i].iter().enumerate() {
                if bidx == 0 {
                    cur = block.forward(&Tensor::cat(&[&cur, &skips[s]], 1)?)?;
                } else {
                    cur = block.forward(&cur)?;
                }
            }
        }
        let out = self.out_conv.forward(&silu(&self.out_norm.forward(&cur)?)?)?;
        Ok(out)
    }

    fn condition(&self, labels: &[u32], timesteps: &[usize]) -> Result<Tensor> {
        let b = labels.len();
        let tdim = self.config.time_dim();
        let feats = sinusoidal_features(timesteps, tdim);
        let t_feat = Tensor::from_vec(feats, (b, tdim), self.store.device())?;
        let t_emb = silu(&self.time_mlp.forward(&t_feat)?)?;
        let ids = Tensor::from_vec(labels.to_vec(), (b,), self.store.device())?;
        let c_emb = self.class_embed.forward(&ids)?;
        Ok(self.cond_proj.forward(&(t_emb + c_emb)?)?)
    }
}

/// Standard sin/cos positional features of the timesteps, `dim` values each.
pub fn sinusoidal_features(timesteps: &[usize], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            out.push(((t as f64) * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            out.push(((t as f64) * freq).cos() as f32);
        }
        if dim % 2 == 1 {
            out.push(0.0);
        }
    }
    out
}

/// Analytic forward FLOPs (2 ops per MAC) for one image.
pub fn flops(cfg: &DenoiserConfig, (h0, w0): (usize, usize)) -> f64 {
    let tdim = cfg.time_dim();
    let w = cfg.stage_widths;
    let mut f = 2.0 * (tdim * tdim + tdim * cfg.cond_channels) as f64;
    let (mut h, mut wd) = (h0, w0);
    f += conv_flops(cfg.image_channels + cfg.cond_channels, w[0], 3, h, wd);
    let mut cur = w[0];
    for s in 0..4 {
        for _ in 0..cfg.res_blocks {
            f += resblock_flops(cur, w[s], h, wd);
            cur = w[s];
        }
        if s < 3 {
            h /= 2;
            wd /= 2;
            f += conv_flops(cur, cur, 3, h, wd);
        }
    }
    for _ in 0..2 {
        f += resblock_flops(cur, cur, h, wd);
    }
    for s in (0..4).rev() {
        if s < 3 {
            h *= 2;
            wd *= 2;
            f += conv_flops(cur, cur, 3, h, wd);
        }
        for b in 0..cfg.res_blocks + 1 {
            let cin = cur + if b == 0 { w[s] } else { 0 };
            f += resblock_flops(cin, w[s], h, wd);
            cur = w[s];
        }
    }
    f += conv_flops(cur, cfg.image_channels, 3, h, wd);
    f
}
