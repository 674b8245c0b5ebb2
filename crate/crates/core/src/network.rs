//! Convolutional encoder branches, mini-decoders and the classification head.
//!
//! Every encoder stage is a conv block (conv, group norm, ReLU) followed by a
//! stride-2 conv with ReLU, so stage `s` (1-based) of an `H x W` input has
//! spatial size `ceil(H / 2^s) x ceil(W / 2^s)`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Largest group count not above 8 that divides `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=channels.min(8))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Spatial dims of the input (index 0) and of every stage `1..=stages`.
pub fn stage_dims(height: usize, width: usize, stages: usize) -> Vec<(usize, usize)> {
    (0..=stages)
        .map(|s| (height.div_ceil(1 << s), width.div_ceil(1 << s)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl ConvBlockConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        let cfg = Self {
            in_channels,
            out_channels,
            kernel,
            groups: default_groups(out_channels),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidParameter("channel counts must be positive".into()));
        }
        if !matches!(self.kernel, 3 | 5) {
            return Err(Error::InvalidParameter(format!("kernel {} not in {{3, 5}}", self.kernel)));
        }
        if self.groups == 0 || self.out_channels % self.groups != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} groups do not divide {} channels",
                self.groups, self.out_channels
            )));
        }
        Ok(())
    }
}

/// 1x1 convolution, optionally without bias.
#[derive(Clone, Debug)]
pub struct Pointwise {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Pointwise {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / in_channels as f64).sqrt();
        let weight = store.add_normal(format!("{name}.w"), &[1, 1, in_channels, out_channels], std, rng);
        let bias = bias.then(|| store.add_const(format!("{name}.b"), &[out_channels], 0.0));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    /// Bias-free projection with all-zero weights.
    pub fn zeroed(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize) -> Self {
        let weight = store.add_const(format!("{name}.w"), &[1, 1, in_channels, out_channels], 0.0);
        Self {
            weight,
            bias: None,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, 1, 0)
    }
}

/// `ReLU(GroupNorm(Conv_kxk(x)))` with "same" padding.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub cfg: ConvBlockConfig,
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: ConvBlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let weight = store.add_he(
            format!("{name}.conv.w"),
            &[k, k, cfg.in_channels, cfg.out_channels],
            k * k * cfg.in_channels,
            rng,
        );
        let bias = store.add_const(format!("{name}.conv.b"), &[cfg.out_channels], 0.0);
        let gamma = store.add_const(format!("{name}.gn.gamma"), &[cfg.out_channels], 1.0);
        let beta = store.add_const(format!("{name}.gn.beta"), &[cfg.out_channels], 0.0);
        Ok(Self {
            cfg,
            weight,
            bias,
            gamma,
            beta,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let c = g.value(x).dims3().2;
        if c != self.cfg.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.cfg.in_channels,
                actual: c,
            });
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, Some(b), 1, self.cfg.kernel / 2)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.group_norm(y, gamma, beta, self.cfg.groups);
        Ok(g.relu(y))
    }
}

/// Stride-2 convolution with ReLU; halves spatial dims (rounding up).
#[derive(Clone, Debug)]
pub struct Downsample {
    pub channels: usize,
    pub kernel: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Downsample {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_he(
            format!("{name}.w"),
            &[kernel, kernel, channels, channels],
            kernel * kernel * channels,
            rng,
        );
        let bias = store.add_const(format!("{name}.b"), &[channels], 0.0);
        Self {
            channels,
            kernel,
            weight,
            bias,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (h, w, _) = g.value(x).dims3();
        if h < 2 || w < 2 {
            return Err(Error::TooSmall { height: h, width: w });
        }
        let wt = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, wt, Some(b), 2, self.kernel / 2)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Output channels of stages `1..=N`.
    pub channel_schedule: Vec<usize>,
    pub input_bands: usize,
    pub kernel: usize,
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.channel_schedule.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_schedule.len() < 2 {
            return Err(Error::InvalidParameter("encoder needs at least 2 stages".into()));
        }
        if self.input_bands == 0 || self.channel_schedule.contains(&0) {
            return Err(Error::InvalidParameter("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Per-stage features of one branch, shallowest first.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub stages: Vec<Var>,
}

impl EncoderOutput {
    pub fn deepest(&self) -> Var {
        *self.stages.last().expect("at least one stage")
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stages: Vec<(ConvBlock, Downsample)>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.stages());
        let mut in_ch = cfg.input_bands;
        for (s, &out_ch) in cfg.channel_schedule.iter().enumerate() {
            let block = ConvBlock::new(
                store,
                &format!("{name}.s{}.block", s + 1),
                ConvBlockConfig::new(in_ch, out_ch, cfg.kernel)?,
                rng,
            )?;
            let down = Downsample::new(store, &format!("{name}.s{}.down", s + 1), out_ch, cfg.kernel, rng);
            stages.push((block, down));
            in_ch = out_ch;
        }
        Ok(Self { cfg, stages })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<EncoderOutput> {
        let c = g.value(x).dims3().2;
        if c != self.cfg.input_bands {
            return Err(Error::ChannelMismatch {
                expected: self.cfg.input_bands,
                actual: c,
            });
        }
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (block, down) in &self.stages {
            cur = block.forward(g, store, cur)?;
            cur = down.forward(g, store, cur)?;
            feats.push(cur);
        }
        Ok(EncoderOutput { stages: feats })
    }
}

/// Last feature map and coarse logits of a mini-decoder.
#[derive(Clone, Copy, Debug)]
pub struct MiniDecoderOutput {
    pub feature: Var,
    pub logits: Var,
}

/// Nearest upsampling plus conv block per stage back to input resolution,
/// then a 1x1 conv to class logits.
#[derive(Clone, Debug)]
pub struct MiniDecoder {
    blocks: Vec<ConvBlock>,
    head: Pointwise,
}

impl MiniDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        schedule: &[usize],
        kernel: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = schedule.len();
        let mut blocks = Vec::with_capacity(n);
        // Block for target level s maps stage s+1 channels to level-s channels
        // (level 0 reuses stage 1 channels).
        for s in (0..n).rev() {
            let in_ch = schedule[s];
            let out_ch = schedule[s.saturating_sub(1)];
            blocks.push(ConvBlock::new(
                store,
                &format!("{name}.up{s}"),
                ConvBlockConfig::new(in_ch, out_ch, kernel)?,
                rng,
            )?);
        }
        let head = Pointwise::new(store, &format!("{name}.head"), schedule[0], classes, true, rng);
        Ok(Self { blocks, head })
    }

    /// `dims` are the stage dims from [`stage_dims`], input first.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        deepest: Var,
        dims: &[(usize, usize)],
    ) -> Result<MiniDecoderOutput> {
        assert_eq!(dims.len(), self.blocks.len() + 1, "one target size per block");
        let mut cur = deepest;
        for (block, s) in self.blocks.iter().zip((0..self.blocks.len()).rev()) {
            let (h, w) = dims[s];
            cur = g.upsample_nearest(cur, h, w);
            cur = block.forward(g, store, cur)?;
        }
        let logits = self.head.forward(g, store, cur)?;
        Ok(MiniDecoderOutput {
            feature: cur,
            logits,
        })
    }
}

/// Bilinear upsampling of the final fused map to input size, then a 1x1
/// conv to class logits.
#[derive(Clone, Debug)]
pub struct ClassifyHead {
    conv: Pointwise,
}

impl ClassifyHead {
    pub fn new(store: &mut ParamStore, name: &str, fused_channels: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Pointwise::new(store, name, fused_channels, classes, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fused: Var, height: usize, width: usize) -> Result<Var> {
        let up = g.upsample_bilinear(fused, height, width);
        self.conv.forward(g, store, up)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded(seed, 9);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_block_shape_and_range() {
        let mut store = ParamStore::new();
        let mut rng = seeded(1, 0);
        let block = ConvBlock::new(&mut store, "b", ConvBlockConfig::new(4, 16, 3).unwrap(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random(&[8, 8, 4], 2));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).shape(), &[8, 8, 16]);
        assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn conv_block_maps_zero_to_zero() {
        let mut store = ParamStore::new();
        let block = ConvBlock::new(&mut store, "b", ConvBlockConfig::new(3, 8, 3).unwrap(), &mut seeded(1, 0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[5, 5, 3]));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_block_rejects_wrong_channels() {
        let mut store = ParamStore::new();
        let block = ConvBlock::new(&mut store, "b", ConvBlockConfig::new(3, 8, 3).unwrap(), &mut seeded(1, 0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[5, 5, 4]));
        assert!(matches!(
            block.forward(&mut g, &store, x),
            Err(Error::ChannelMismatch { expected: 3, actual: 4 })
        ));
    }

    #[test]
    fn downsample_halves_with_ceiling() {
        let mut store = ParamStore::new();
        let down = Downsample::new(&mut store, "d", 2, 3, &mut seeded(1, 0));
        for (n, expect) in [(8, 4), (7, 4), (2, 1)] {
            let mut g = Graph::new();
            let x = g.constant(random(&[n, n, 2], 3));
            let y = down.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.value(y).dims3(), (expect, expect, 2));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 2]));
        assert!(matches!(down.forward(&mut g, &store, x), Err(Error::TooSmall { .. })));
        let x = g.constant(Tensor::zeros(&[4, 4, 2]));
        let y = down.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_defaults() {
        assert_eq!(default_groups(64), 8);
        assert_eq!(default_groups(4), 4);
        assert_eq!(default_groups(12), 6);
        assert_eq!(default_groups(7), 7);
    }

    #[test]
    fn config_validation() {
        assert!(ConvBlockConfig::new(3, 8, 4).is_err());
        let cfg = ConvBlockConfig {
            groups: 3,
            ..ConvBlockConfig::new(3, 8, 3).unwrap()
        };
        assert!(cfg.validate().is_err());
        let enc = EncoderConfig {
            channel_schedule: vec![8],
            input_bands: 4,
            kernel: 3,
        };
        assert!(enc.validate().is_err());
    }
}
