//! The full network: two encoders, per-branch mini-decoders, the fusion
//! pathway and the head, plus the ablation variants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionMode};
use crate::losses::{self, HdInputs, HdProjectors, LossBreakdown};
use crate::network::{stage_dims, ClassifyHead, Encoder, EncoderConfig, EncoderOutput, MiniDecoder};
use crate::params::ParamStore;
use crate::spectra::{derivative, normalize_bands, DerivativeSpec, HsiCube};
use crate::tensor::Tensor;

/// Which inputs reach which encoders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchMode {
    /// Separate encoders for magnitude and derivative.
    #[default]
    Dual,
    SingleMagnitude,
    SingleDerivative,
    /// One encoder on magnitude and derivative bands stacked together.
    ConcatInput,
    /// Both inputs through one encoder; the derivative is zero-padded to the
    /// magnitude band count.
    SharedParams,
}

impl ArchMode {
    pub const ALL: [ArchMode; 5] = [
        ArchMode::Dual,
        ArchMode::SingleMagnitude,
        ArchMode::SingleDerivative,
        ArchMode::ConcatInput,
        ArchMode::SharedParams,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ArchMode::Dual => "dual",
            ArchMode::SingleMagnitude => "single-magnitude",
            ArchMode::SingleDerivative => "single-derivative",
            ArchMode::ConcatInput => "concat-input",
            ArchMode::SharedParams => "shared-params",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }

    /// Two branch features reach the fusion pathway.
    pub fn is_two_branch(self) -> bool {
        matches!(self, ArchMode::Dual | ArchMode::SharedParams)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: ArchMode,
    /// Learned point weights; plain averaging when off.
    pub cpfm: bool,
    /// Adaptive-softmax and contrastive terms with mini-decoders.
    pub hd_loss: bool,
    pub channel_schedule: Vec<usize>,
    pub fused_channels: usize,
    pub kernel: usize,
    pub classes: usize,
    /// Band count of the raw cube.
    pub bands: usize,
    pub derivative: DerivativeSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: ArchMode::Dual,
            cpfm: true,
            hd_loss: true,
            channel_schedule: vec![64, 128, 192, 256],
            fused_channels: 128,
            kernel: 3,
            classes: 4,
            bands: 16,
            derivative: DerivativeSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidParameter("need at least 2 classes".into()));
        }
        if self.fused_channels == 0 {
            return Err(Error::InvalidParameter("fused channels must be positive".into()));
        }
        if self.bands < 2 {
            return Err(Error::InvalidCube(format!("{} bands, need at least 2", self.bands)));
        }
        self.derivative.output_bands(self.bands)?;
        self.encoder_config(self.bands).validate()
    }

    fn encoder_config(&self, input_bands: usize) -> EncoderConfig {
        EncoderConfig {
            channel_schedule: self.channel_schedule.clone(),
            input_bands,
            kernel: self.kernel,
        }
    }

    fn derivative_bands(&self) -> usize {
        self.bands - self.derivative.band_loss()
    }

    /// Input band counts of the primary and (if any) secondary encoder input.
    pub fn input_bands(&self) -> (usize, Option<usize>) {
        match self.mode {
            ArchMode::Dual => (self.bands, Some(self.derivative_bands())),
            ArchMode::SingleMagnitude => (self.bands, None),
            ArchMode::SingleDerivative => (self.derivative_bands(), None),
            ArchMode::ConcatInput => (self.bands + self.derivative_bands(), None),
            ArchMode::SharedParams => (self.bands, Some(self.bands)),
        }
    }

    fn fusion_mode(&self) -> FusionMode {
        match (self.mode.is_two_branch(), self.cpfm) {
            (false, _) => FusionMode::Single,
            (true, true) => FusionMode::Adaptive,
            (true, false) => FusionMode::Average,
        }
    }

    fn uses_hd(&self) -> bool {
        self.hd_loss && self.mode.is_two_branch()
    }

    /// Builds the encoder inputs from a raw reflectance cube: the band-wise
    /// normalized cube and the normalized derivative of the raw cube.
    pub fn prepare(&self, raw: &HsiCube) -> Result<PreparedInput> {
        if raw.band_count() != self.bands {
            return Err(Error::ChannelMismatch {
                expected: self.bands,
                actual: raw.band_count(),
            });
        }
        let magnitude = normalize_bands(raw);
        let deriv = || derivative(raw, self.derivative).map(|d| normalize_bands(&d));
        let (primary, secondary) = match self.mode {
            ArchMode::Dual => (magnitude, Some(deriv()?)),
            ArchMode::SingleMagnitude => (magnitude, None),
            ArchMode::SingleDerivative => (deriv()?, None),
            ArchMode::ConcatInput => (magnitude.concat_bands(&deriv()?)?, None),
            ArchMode::SharedParams => {
                let d = deriv()?;
                let pad = self.bands - d.band_count();
                (magnitude, Some(d.zero_padded(pad)))
            }
        };
        Ok(PreparedInput {
            height: raw.height(),
            width: raw.width(),
            primary: primary.to_tensor(),
            secondary: secondary.map(|c| c.to_tensor()),
        })
    }
}

/// Encoder inputs for one scene, as produced by [`ModelConfig::prepare`].
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    pub height: usize,
    pub width: usize,
    pub primary: Tensor,
    pub secondary: Option<Tensor>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// `A_M` per stage, deepest first; empty unless weights are learned.
    pub weights_m: Vec<Var>,
    hd: Option<HdVars>,
}

#[derive(Clone, Copy, Debug)]
struct HdVars {
    r_m: Var,
    r_d: Var,
    enc_m: Var,
    dec_m: Var,
    enc_d: Var,
    dec_d: Var,
}

#[derive(Clone, Debug)]
struct HdModules {
    decoder_m: MiniDecoder,
    decoder_d: MiniDecoder,
    projectors: HdProjectors,
}

#[derive(Clone, Debug)]
pub struct Cscn {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    encoder_m: Encoder,
    /// `None` when the architecture has one encoder.
    encoder_d: Option<Encoder>,
    fusion: Fusion,
    head: ClassifyHead,
    hd: Option<HdModules>,
}

impl Cscn {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (primary_bands, secondary_bands) = cfg.input_bands();
        let encoder_m = Encoder::new(&mut store, "enc_m", cfg.encoder_config(primary_bands), rng)?;
        let encoder_d = match (cfg.mode, secondary_bands) {
            (ArchMode::Dual, Some(b)) => Some(Encoder::new(&mut store, "enc_d", cfg.encoder_config(b), rng)?),
            _ => None,
        };
        let schedule = &cfg.channel_schedule;
        let hd = if cfg.uses_hd() {
            Some(HdModules {
                decoder_m: MiniDecoder::new(&mut store, "dec_m", schedule, cfg.kernel, cfg.classes, rng)?,
                decoder_d: MiniDecoder::new(&mut store, "dec_d", schedule, cfg.kernel, cfg.classes, rng)?,
                projectors: HdProjectors::new(&mut store, "ccl", *schedule.last().expect("stages"), schedule[0], rng),
            })
        } else {
            None
        };
        let fusion = Fusion::new(&mut store, "fuse", cfg.fusion_mode(), schedule, cfg.fused_channels, cfg.kernel, rng)?;
        let head = ClassifyHead::new(&mut store, "head", cfg.fused_channels, cfg.classes, rng);
        Ok(Self {
            cfg,
            params: store,
            encoder_m,
            encoder_d,
            fusion,
            head,
            hd,
        })
    }

    pub fn forward(&self, g: &mut Graph, input: &PreparedInput) -> Result<ForwardOutput> {
        let store = &self.params;
        let x_m = g.constant(input.primary.clone());
        let enc_m = self.encoder_m.forward(g, store, x_m)?;
        let enc_d: Option<EncoderOutput> = match (&input.secondary, self.cfg.mode.is_two_branch()) {
            (Some(t), true) => {
                let x_d = g.constant(t.clone());
                let encoder = self.encoder_d.as_ref().unwrap_or(&self.encoder_m);
                Some(encoder.forward(g, store, x_d)?)
            }
            (None, false) => None,
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "input does not fit the {} architecture",
                    self.cfg.mode.tag()
                )))
            }
        };
        let fused = self.fusion.forward(g, store, &enc_m, enc_d.as_ref().unwrap_or(&enc_m))?;
        let logits = self.head.forward(g, store, fused.fused, input.height, input.width)?;

        let hd = match (&self.hd, &enc_d) {
            (Some(m), Some(enc_d)) => {
                let dims = stage_dims(input.height, input.width, self.cfg.channel_schedule.len());
                let out_m = m.decoder_m.forward(g, store, enc_m.deepest(), &dims)?;
                let out_d = m.decoder_d.forward(g, store, enc_d.deepest(), &dims)?;
                Some(HdVars {
                    r_m: out_m.logits,
                    r_d: out_d.logits,
                    enc_m: enc_m.deepest(),
                    dec_m: out_m.feature,
                    enc_d: enc_d.deepest(),
                    dec_d: out_d.feature,
                })
            }
            _ => None,
        };
        Ok(ForwardOutput {
            logits,
            weights_m: fused.weights_m,
            hd,
        })
    }

    /// Training objective on `mask` (already restricted to training pixels).
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &ForwardOutput,
        mask: &LabelMask,
        lambda: f64,
    ) -> Result<(Var, LossBreakdown)> {
        let hd = match (out.hd, &self.hd) {
            (Some(v), Some(m)) => Some(HdInputs {
                r_m: v.r_m,
                r_d: v.r_d,
                enc_m: v.enc_m,
                dec_m: v.dec_m,
                enc_d: v.enc_d,
                dec_d: v.dec_d,
                projectors: &m.projectors,
            }),
            _ => None,
        };
        losses::total_loss(g, &self.params, out.logits, hd, mask, lambda)
    }

    /// One-based argmax labels of the head, one per pixel.
    pub fn predict(&self, input: &PreparedInput) -> Result<Vec<u16>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input)?;
        Ok(argmax_labels(g.value(out.logits)))
    }

    /// `A_M` maps of every stage, deepest first.
    pub fn weight_maps(&self, input: &PreparedInput) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input)?;
        Ok(out.weights_m.iter().map(|&w| g.value(w).clone()).collect())
    }
}

/// One-based index of the largest logit per pixel; ties pick the lower class.
pub fn argmax_labels(logits: &Tensor) -> Vec<u16> {
    let k = *logits.shape().last().expect("non-scalar");
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u16 + 1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::spectra::{synth_scene, SynthSceneSpec};

    fn small(mode: ArchMode) -> ModelConfig {
        ModelConfig {
            mode,
            channel_schedule: vec![4, 6],
            fused_channels: 4,
            classes: 3,
            bands: 8,
            ..ModelConfig::default()
        }
    }

    fn scene() -> HsiCube {
        let (cube, _) = synth_scene(&SynthSceneSpec {
            class_count: 3,
            bands: 8,
            height: 8,
            width: 8,
            ..SynthSceneSpec::default()
        })
        .unwrap();
        cube
    }

    #[test]
    fn every_mode_runs() {
        let cube = scene();
        for mode in ArchMode::ALL {
            let cfg = small(mode);
            let model = Cscn::new(cfg.clone(), &mut seeded(1, 0)).unwrap();
            let input = cfg.prepare(&cube).unwrap();
            let mut g = Graph::new();
            let out = model.forward(&mut g, &input).unwrap();
            assert_eq!(g.value(out.logits).shape(), &[8, 8, 3], "{mode:?}");
            assert!(g.value(out.logits).is_finite());
            assert_eq!(out.hd.is_some(), mode.is_two_branch(), "{mode:?}");
            assert_eq!(out.weights_m.len(), if mode.is_two_branch() { 2 } else { 0 });
        }
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let cfg = small(ArchMode::Dual);
        let a = Cscn::new(cfg.clone(), &mut seeded(1, 0)).unwrap();
        let b = Cscn::new(cfg, &mut seeded(2, 0)).unwrap();
        assert_eq!(a.params.scalar_count(), b.params.scalar_count());
        assert_ne!(a.params, b.params);
        let shared = Cscn::new(small(ArchMode::SharedParams), &mut seeded(1, 0)).unwrap();
        assert!(shared.params.scalar_count() < a.params.scalar_count());
    }

    #[test]
    fn input_bands_per_mode() {
        let cfg = small(ArchMode::ConcatInput);
        assert_eq!(cfg.input_bands(), (15, None));
        let cube = scene();
        let input = cfg.prepare(&cube).unwrap();
        assert_eq!(input.primary.shape(), &[8, 8, 15]);
        let shared = small(ArchMode::SharedParams).prepare(&cube).unwrap();
        let d = shared.secondary.unwrap();
        assert_eq!(d.shape(), &[8, 8, 8]);
        assert!(d.data().chunks(8).all(|px| px[7] == 0.0));
    }

    #[test]
    fn argmax_ties_pick_first() {
        let t = Tensor::from_vec(vec![1, 2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_labels(&t), vec![1, 2]);
    }
}
