use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backbone::{Backbone, BackboneConfig};
use crate::acnet::{acb_forward, gcm_forward, AcbParams, GateField, GcmParams, LcmParams, DEFAULT_DELTA};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// Which decoder sits on top of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Classifier directly on the 1/16 head features.
    Fcn,
    /// One global context module at 1/16, then the classifier.
    Gcm,
    /// The first `blocks` adaptive context blocks (1 to 3).
    Acnet { blocks: usize },
}

impl Architecture {
    pub fn name(self) -> String {
        match self {
            Architecture::Fcn => "fcn".into(),
            Architecture::Gcm => "gcm".into(),
            Architecture::Acnet { blocks } => format!("acnet{blocks}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    pub architecture: Architecture,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Width of the 3x3 reduction applied to the 1/16 features.
    pub head_channels: usize,
    /// Widths of the first two blocks.
    pub acb_channels: (usize, usize),
    /// Width of the refined low-level features fed to each LCM.
    pub low_channels: usize,
    pub aux_enabled: bool,
    pub aux_channels: usize,
    pub delta: f64,
    pub reuse_count: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            backbone: BackboneConfig::default(),
            architecture: Architecture::Acnet { blocks: 3 },
            in_channels: 3,
            num_classes: 5,
            head_channels: 64,
            acb_channels: (56, 32),
            low_channels: 16,
            aux_enabled: true,
            aux_channels: 32,
            delta: DEFAULT_DELTA,
            reuse_count: 3,
        }
    }
}

impl NetworkConfig {
    /// Decoder widths of the full-size model: 512 head, 448 and 256 block
    /// widths, 256 aux.
    pub fn full_widths(mut self) -> Self {
        self.head_channels = 512;
        self.acb_channels = (448, 256);
        self.low_channels = 48;
        self.aux_channels = 256;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| Err(Error::config(format!("network.{key}"), detail));
        if let Architecture::Acnet { blocks } = self.architecture {
            if !(1..=3).contains(&blocks) {
                return bad("blocks", format!("must be 1, 2 or 3, got {blocks}"));
            }
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return bad("delta", format!("must be positive, got {}", self.delta));
        }
        if self.reuse_count == 0 {
            return bad("reuse_count", "must be at least 1".into());
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad("num_classes", format!("must be in 2..=255, got {}", self.num_classes));
        }
        let widths = [
            self.in_channels,
            self.head_channels,
            self.acb_channels.0,
            self.acb_channels.1,
            self.low_channels,
            self.aux_channels,
            self.backbone.stem_channels,
        ];
        if widths.iter().chain(&self.backbone.stage_channels).any(|&w| w == 0) {
            return bad("channels", "every width must be positive".into());
        }
        if self.backbone.last_stage_dilations.iter().any(|&d| d == 0) {
            return bad("dilations", "dilations must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct AuxHead {
    conv: ConvBnRelu,
    classifier: Conv2d,
}

/// Parameter handles and wiring of one network. Values live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub backbone: Backbone,
    pub head: ConvBnRelu,
    pub gcm: Option<GcmParams>,
    pub blocks: Vec<AcbParams>,
    pub classifier: Conv2d,
    aux: Option<AuxHead>,
}

#[derive(Clone, Debug)]
pub struct NetOutput {
    pub logits: Var,
    pub aux_logits: Option<Var>,
    /// Global gates, coarsest first.
    pub gates: Vec<Var>,
}

impl Network {
    pub fn new(cfg: &NetworkConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(store, rng, &cfg.backbone, cfg.in_channels)?;
        let [c1, c2, _, c4] = backbone.channels();
        let head = ConvBnRelu::new(store, rng, "head", ConvSpec::new(c4, cfg.head_channels, 3));
        let mut gcm = None;
        let mut blocks = Vec::new();
        let mut width = cfg.head_channels;
        match cfg.architecture {
            Architecture::Fcn => {}
            Architecture::Gcm => gcm = Some(GcmParams::new(store, rng, "gcm", width)),
            Architecture::Acnet { blocks: count } => {
                let lows = [c2, c1];
                let outs = [cfg.acb_channels.0, cfg.acb_channels.1];
                for k in 0..count {
                    let name = format!("acb{}", k + 1);
                    let g = GcmParams::new(store, rng, &format!("{name}.gcm"), width);
                    let lcm = (k < 2).then(|| {
                        LcmParams::new(
                            store,
                            rng,
                            &format!("{name}.lcm"),
                            lows[k],
                            cfg.low_channels,
                            width,
                            outs[k],
                            cfg.reuse_count,
                        )
                    });
                    if k < 2 {
                        width = outs[k];
                    }
                    blocks.push(AcbParams { gcm: g, lcm, upsample_factor: 2 });
                }
            }
        }
        let classifier =
            Conv2d::new(store, rng, "classifier", ConvSpec::new(width, cfg.num_classes, 1).with_bias(true));
        let aux = cfg.aux_enabled.then(|| AuxHead {
            conv: ConvBnRelu::new(store, rng, "aux.conv", ConvSpec::new(c4, cfg.aux_channels, 3)),
            classifier: Conv2d::new(
                store,
                rng,
                "aux.classifier",
                ConvSpec::new(cfg.aux_channels, cfg.num_classes, 1).with_bias(true),
            ),
        });
        Ok(Network { config: cfg.clone(), backbone, head, gcm, blocks, classifier, aux })
    }

    pub fn forward(&self, s: &mut Session, image: Var) -> Result<NetOutput> {
        self.run(s, image, true)
    }

    /// The same graph with every gated term removed: GCMs pass their input
    /// through and LCMs concatenate zeros in place of the gated low-level
    /// feature. Matches [`Network::forward`] when all gate scales are zero.
    pub fn forward_gate_free(&self, s: &mut Session, image: Var) -> Result<NetOutput> {
        self.run(s, image, false)
    }

    fn run(&self, s: &mut Session, image: Var, gated: bool) -> Result<NetOutput> {
        let shape = s.tape.shape(image);
        if shape.c != self.config.in_channels {
            return Err(Error::Dimension(format!("expected {} input channels, got {shape}", self.config.in_channels)));
        }
        let feats = self.backbone.forward(s, image)?;
        let mut x = self.head.forward(s, feats.f4)?;
        let mut gates = Vec::new();
        let delta = self.config.delta;
        if let Some(g) = &self.gcm {
            if gated {
                let out = gcm_forward(s, x, g, delta)?;
                x = out.output;
                gates.push(out.gate);
            }
        }
        let lows = [feats.f2, feats.f1];
        for (k, block) in self.blocks.iter().enumerate() {
            let low = block.lcm.as_ref().map(|_| lows[k]);
            if gated {
                let out = acb_forward(s, x, low, block, delta)?;
                x = out.output;
                gates.push(out.global_gate);
            } else {
                x = gate_free_block(s, x, low, block)?;
            }
        }
        let logits = self.classifier.forward(s, x)?;
        let logits = s.tape.resize(logits, shape.h, shape.w)?;
        let aux_logits = match &self.aux {
            Some(aux) => {
                let a = aux.conv.forward(s, feats.f4)?;
                let a = aux.classifier.forward(s, a)?;
                Some(s.tape.resize(a, shape.h, shape.w)?)
            }
            None => None,
        };
        Ok(NetOutput { logits, aux_logits, gates })
    }

    /// The learnable gate scales (every `alpha` and `beta`).
    pub fn gate_scales(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.gcm.iter().map(|g| g.alpha).collect();
        for b in &self.blocks {
            v.push(b.gcm.alpha);
            v.extend(b.lcm.as_ref().map(|l| l.beta));
        }
        v
    }

    /// Spatial reduction factor of each returned gate.
    pub fn gate_strides(&self) -> Vec<usize> {
        match self.config.architecture {
            Architecture::Fcn => vec![],
            Architecture::Gcm => vec![16],
            Architecture::Acnet { blocks } => [16, 8, 4][..blocks].to_vec(),
        }
    }
}

fn gate_free_block(s: &mut Session, high: Var, low: Option<Var>, block: &AcbParams) -> Result<Var> {
    let sh = s.tape.shape(high);
    let (oh, ow) = (sh.h * block.upsample_factor, sh.w * block.upsample_factor);
    let mut f = s.tape.resize(high, oh, ow)?;
    if let (Some(_), Some(lcm)) = (low, &block.lcm) {
        let zeros = s.tape.constant(Tensor::zeros([sh.n, lcm.lowlevel_reduce.out_channels(), oh, ow]));
        for conv in &lcm.fuse {
            let cat = s.tape.concat(zeros, f)?;
            f = conv.forward(s, cat)?;
        }
    }
    Ok(f)
}

/// Evaluation-mode outputs of [`Model::infer`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor,
    pub gates: Vec<GateField>,
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamStore,
}

impl Model {
    /// Initialises weights from `seed`.
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(crate::STREAM_INIT);
        let mut params = ParamStore::new();
        let net = Network::new(cfg, &mut params, &mut rng)?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.net.config
    }

    /// Evaluation-mode forward pass.
    pub fn infer(&mut self, image: &Tensor) -> Result<Inference> {
        let mut tape = Tape::new();
        let mut s = Session::eval(&mut tape, &mut self.params);
        let x = s.tape.constant(image.clone());
        let out = self.net.forward(&mut s, x)?;
        let logits = tape.value(out.logits).clone();
        let gates = out
            .gates
            .iter()
            .map(|g| GateField::global(tape.value(*g).clone(), self.net.config.delta))
            .collect::<Result<_>>()?;
        Ok(Inference { logits, gates })
    }

    /// Sets every gate scale to `value`.
    pub fn set_gate_scales(&mut self, value: f64) {
        for id in self.net.gate_scales() {
            self.params.get_mut(id).value = Tensor::scalar(value);
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_trainable()
    }

    /// Names of trainable parameters, for diagnostics.
    pub fn trainable_names(&self) -> Vec<(String, ParamKind)> {
        self.params.iter().filter(|(_, p)| p.kind.is_trainable()).map(|(_, p)| (p.name.clone(), p.kind)).collect()
    }
}
