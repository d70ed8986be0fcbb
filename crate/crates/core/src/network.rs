//! Coarse-to-fine localisation network.
//!
//! Both sub-nets share one backbone layout:
//!
//! ```text
//! front (RGB | HPF | CW-HPF)
//!   -> V1 (2nbf) -> pool -> V2 (4nbf) -> pool -> V3 (8nbf)
//!   -> dilated bridge (8nbf, rates 2/4/8/16) [-> forgery attention]
//!   -> V4 (2nbf) ++ pool(V2) -> up -> V5 (nbf) ++ pool(V1) -> up
//! ```
//!
//! The decoder output (3nbf channels, full resolution) feeds a 7x7 sigmoid
//! mask head. The coarse net adds a 1x1 projection to `k` feature channels,
//! which is the only input of the refined net.

use forgeloc_autograd::{Graph, ParamStore, Scalar, Var};
use rand::Rng;

use crate::attention::{AttentionTrace, ForgeryAttentionModule};
use crate::error::{Error, Result};
use crate::hpf::{self, CwHpfBlock, HpfKernelBank, KERNEL_COUNT};
use crate::layers::{Conv, DilatedModule, VggBlock};

/// How the bottom of a sub-net pre-processes its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseFront {
    /// Input passed through unchanged.
    Rgb,
    /// Three high-pass responses summed over input channels.
    Hpf,
    /// Three high-pass responses per input channel.
    CwHpf,
}

impl NoiseFront {
    pub fn output_channels(self, in_c: usize) -> usize {
        match self {
            NoiseFront::Rgb => in_c,
            NoiseFront::Hpf => KERNEL_COUNT,
            NoiseFront::CwHpf => KERNEL_COUNT * in_c,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseFront::Rgb => "rgb",
            NoiseFront::Hpf => "hpf",
            NoiseFront::CwHpf => "cw-hpf",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            NoiseFront::Rgb => 0,
            NoiseFront::Hpf => 1,
            NoiseFront::CwHpf => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NoiseFront::Rgb),
            1 => Some(NoiseFront::Hpf),
            2 => Some(NoiseFront::CwHpf),
            _ => None,
        }
    }
}

impl std::str::FromStr for NoiseFront {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(NoiseFront::Rgb),
            "hpf" => Ok(NoiseFront::Hpf),
            "cw-hpf" | "cwhpf" => Ok(NoiseFront::CwHpf),
            other => Err(format!("unknown front `{other}` (rgb, hpf, cw-hpf)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    /// Number of basic filters: width of the last decoder block.
    pub nbf: usize,
    /// Channels of the coarse-to-refined feature connection.
    pub k: usize,
    pub convs_per_block: usize,
    /// `(height, width)` the model is trained at.
    pub input_size: (usize, usize),
    pub coarse_front: NoiseFront,
    pub refined_front: NoiseFront,
    pub attention: bool,
    pub coarse_to_fine: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            nbf: 32,
            k: 16,
            convs_per_block: 3,
            input_size: (64, 64),
            coarse_front: NoiseFront::CwHpf,
            refined_front: NoiseFront::CwHpf,
            attention: true,
            coarse_to_fine: true,
        }
    }
}

impl ModelConfig {
    /// Full-scale geometry: 512x512 input.
    pub fn full_scale() -> Self {
        ModelConfig {
            input_size: (512, 512),
            ..Self::default()
        }
    }

    pub fn with_nbf(nbf: usize) -> Self {
        ModelConfig { nbf, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nbf < 4 {
            return Err(Error::ModelConfig(format!("nbf must be at least 4, got {}", self.nbf)));
        }
        if self.k < 1 {
            return Err(Error::ModelConfig("k must be at least 1".into()));
        }
        if self.convs_per_block < 1 {
            return Err(Error::ModelConfig("convs_per_block must be at least 1".into()));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InputSize { height: h, width: w });
        }
        Ok(())
    }

    /// Output widths of V1..V5.
    pub fn block_widths(&self) -> [usize; 5] {
        let n = self.nbf;
        [2 * n, 4 * n, 8 * n, 2 * n, n]
    }
}

/// Encoder, dilated bridge, optional attention, decoder.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub front: NoiseFront,
    pub in_c: usize,
    pub cw_hpf: CwHpfBlock,
    pub blocks: [VggBlock; 5],
    pub bridge: DilatedModule,
    pub attention: Option<ForgeryAttentionModule>,
}

/// Intermediate nodes of a backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    pub front: Var,
    pub bridge: Var,
    pub attention: Option<AttentionTrace>,
    pub decoded: Var,
}

impl Backbone {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        cfg: &ModelConfig,
        front: NoiseFront,
        in_c: usize,
        attention: bool,
    ) -> Self {
        let [w1, w2, w3, w4, w5] = cfg.block_widths();
        let depth = cfg.convs_per_block;
        let f = front.output_channels(in_c);
        let blocks = [
            VggBlock::new(store, rng, &format!("{name}.v1"), f, w1, depth),
            VggBlock::new(store, rng, &format!("{name}.v2"), w1, w2, depth),
            VggBlock::new(store, rng, &format!("{name}.v3"), w2, w3, depth),
            VggBlock::new(store, rng, &format!("{name}.v4"), w3, w4, depth),
            VggBlock::new(store, rng, &format!("{name}.v5"), w4 + w2, w5, depth),
        ];
        let bridge = DilatedModule::new(store, rng, &format!("{name}.bridge"), w3);
        let attention = attention.then(|| ForgeryAttentionModule::new(store, rng, &format!("{name}.attention"), w3));
        Backbone {
            front,
            in_c,
            cw_hpf: CwHpfBlock::new(in_c),
            blocks,
            bridge,
            attention,
        }
    }

    /// Channels of the decoder output.
    pub fn out_c(&self) -> usize {
        self.blocks[4].out_c() + self.blocks[0].out_c()
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<BackboneTrace> {
        let front = match self.front {
            NoiseFront::Rgb => x,
            NoiseFront::Hpf => hpf::plain_hpf(g, &self.cw_hpf.bank, x)?,
            NoiseFront::CwHpf => self.cw_hpf.forward(g, x),
        };
        let [v1, v2, v3, v4, v5] = &self.blocks;
        let e1 = v1.forward(g, store, front)?;
        let p1 = g.maxpool2d(e1);
        let e2 = v2.forward(g, store, p1)?;
        let p2 = g.maxpool2d(e2);
        let e3 = v3.forward(g, store, p2)?;
        let bridge = self.bridge.forward(g, store, e3)?;
        let (mid, attention) = match &self.attention {
            Some(att) => {
                let trace = att.forward(g, store, bridge)?;
                (trace.faf, Some(trace))
            }
            None => (bridge, None),
        };
        let d4 = v4.forward(g, store, mid)?;
        let c4 = g.concat_channels(&[d4, p2])?;
        let u4 = g.upsample2(c4);
        let d5 = v5.forward(g, store, u4)?;
        let c5 = g.concat_channels(&[d5, p1])?;
        let decoded = g.upsample2(c5);
        Ok(BackboneTrace {
            front,
            bridge,
            attention,
            decoded,
        })
    }

    fn param_count(&self) -> usize {
        self.blocks.iter().map(VggBlock::param_count).sum::<usize>()
            + self.bridge.param_count()
            + self.attention.as_ref().map_or(0, ForgeryAttentionModule::param_count)
    }
}

#[derive(Clone, Debug)]
pub struct CoarseNet {
    pub backbone: Backbone,
    pub mask_head: Conv,
    pub feature_head: Conv,
}

#[derive(Clone, Debug)]
pub struct RefinedNet {
    pub backbone: Backbone,
    pub mask_head: Conv,
}

/// Parameters live in a separate [`ParamStore`]; the model only holds ids.
#[derive(Clone, Debug)]
pub struct CoarseToFineModel {
    pub config: ModelConfig,
    pub coarse: Option<CoarseNet>,
    pub refined: RefinedNet,
}

/// Nodes produced by [`CoarseToFineModel::forward`].
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Coarse mask `I_M1`, absent when the coarse net is disabled.
    pub coarse_mask: Option<Var>,
    /// Feature connection `n x k x h x w`.
    pub features: Option<Var>,
    /// Final mask `I_M`.
    pub refined_mask: Var,
    pub coarse_trace: Option<BackboneTrace>,
    pub refined_trace: BackboneTrace,
}

const MASK_KERNEL: usize = 7;
const IMAGE_CHANNELS: usize = 3;

impl CoarseToFineModel {
    /// Builds the topology and He-initialises a fresh parameter store.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let coarse = config.coarse_to_fine.then(|| {
            let backbone = Backbone::new(
                &mut store,
                rng,
                "coarse",
                &config,
                config.coarse_front,
                IMAGE_CHANNELS,
                false,
            );
            let c = backbone.out_c();
            CoarseNet {
                mask_head: Conv::same(&mut store, rng, "coarse.mask_head", c, 1, MASK_KERNEL, 1),
                feature_head: Conv::same(&mut store, rng, "coarse.feature_head", c, config.k, 1, 1),
                backbone,
            }
        });
        let (front, in_c) = if config.coarse_to_fine {
            (config.refined_front, config.k)
        } else {
            (config.refined_front, IMAGE_CHANNELS)
        };
        let backbone = Backbone::new(&mut store, rng, "refined", &config, front, in_c, config.attention);
        let c = backbone.out_c();
        let refined = RefinedNet {
            mask_head: Conv::same(&mut store, rng, "refined.mask_head", c, 1, MASK_KERNEL, 1),
            backbone,
        };
        Ok((
            CoarseToFineModel {
                config,
                coarse,
                refined,
            },
            store,
        ))
    }

    pub fn attention(&self) -> Option<&ForgeryAttentionModule> {
        self.refined.backbone.attention.as_ref()
    }

    pub fn kernel_bank(&self) -> &HpfKernelBank {
        &self.refined.backbone.cw_hpf.bank
    }

    fn check_input(&self, shape: forgeloc_autograd::Shape, channels: usize) -> Result<()> {
        if !shape.h().is_multiple_of(4) || !shape.w().is_multiple_of(4) {
            return Err(Error::InputSize {
                height: shape.h(),
                width: shape.w(),
            });
        }
        if shape.c() != channels {
            return Err(Error::FeatureChannels {
                expected: channels,
                actual: shape.c(),
            });
        }
        Ok(())
    }

    /// `I_F` (`n x 3 x h x w`) to the coarse mask and the `k`-channel features.
    pub fn coarse_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<(Var, Var, BackboneTrace)> {
        let coarse = self
            .coarse
            .as_ref()
            .ok_or_else(|| Error::ModelConfig("model has no coarse net".into()))?;
        self.check_input(g.shape(image), IMAGE_CHANNELS)?;
        let trace = coarse.backbone.forward(g, store, image)?;
        let logits = coarse.mask_head.forward(g, store, trace.decoded)?;
        let mask = g.sigmoid(logits);
        let features = coarse.feature_head.forward(g, store, trace.decoded)?;
        Ok((mask, features, trace))
    }

    /// Features (or the image, without a coarse net) to the refined mask.
    pub fn refined_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: Var,
    ) -> Result<(Var, BackboneTrace)> {
        self.check_input(g.shape(input), self.refined.backbone.in_c)?;
        let trace = self.refined.backbone.forward(g, store, input)?;
        let logits = self.refined.mask_head.forward(g, store, trace.decoded)?;
        Ok((g.sigmoid(logits), trace))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<ModelOutput> {
        match &self.coarse {
            Some(_) => {
                let (coarse_mask, features, coarse_trace) = self.coarse_forward(g, store, image)?;
                let (refined_mask, refined_trace) = self.refined_forward(g, store, features)?;
                Ok(ModelOutput {
                    coarse_mask: Some(coarse_mask),
                    features: Some(features),
                    refined_mask,
                    coarse_trace: Some(coarse_trace),
                    refined_trace,
                })
            }
            None => {
                let (refined_mask, refined_trace) = self.refined_forward(g, store, image)?;
                Ok(ModelOutput {
                    coarse_mask: None,
                    features: None,
                    refined_mask,
                    coarse_trace: None,
                    refined_trace,
                })
            }
        }
    }

    /// Scalar count of all learnable parameters, from the layer topology.
    pub fn param_count(&self) -> usize {
        let coarse = self.coarse.as_ref().map_or(0, |c| {
            c.backbone.param_count() + c.mask_head.param_count() + c.feature_head.param_count()
        });
        coarse + self.refined.backbone.param_count() + self.refined.mask_head.param_count()
    }
}
