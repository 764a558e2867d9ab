use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, ParamId, ParamStore, Session};
use crate::tensor::{ConvSpec, Var};

/// Output stride of the backbone.
pub const OUTPUT_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    /// Convolutions per stage for stages 1 to 3.
    pub convs_per_stage: usize,
    /// One 3x3 conv per entry in the last stage, which keeps the 1/16
    /// resolution.
    pub last_stage_dilations: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 64],
            convs_per_stage: 2,
            last_stage_dilations: vec![2, 2, 2],
        }
    }
}

impl BackboneConfig {
    pub const MULTI_GRID: [usize; 3] = [4, 8, 16];
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: ConvBnRelu,
    pub stages: Vec<Vec<ConvBnRelu>>,
}

/// Backbone outputs at 1/4, 1/8 and 1/16 of the input.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub f1: Var,
    pub f2: Var,
    pub f4: Var,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &BackboneConfig,
        in_channels: usize,
    ) -> Result<Self> {
        if cfg.convs_per_stage == 0 || cfg.last_stage_dilations.is_empty() {
            return Err(Error::config("network.backbone", "every stage needs at least one convolution"));
        }
        let stem = ConvBnRelu::new(
            store,
            rng,
            "backbone.stem",
            ConvSpec::new(in_channels, cfg.stem_channels, 3).stride(2),
        );
        let mut stages = Vec::with_capacity(4);
        let mut cin = cfg.stem_channels;
        for (k, &cout) in cfg.stage_channels.iter().enumerate() {
            let specs: Vec<ConvSpec> = if k < 3 {
                (0..cfg.convs_per_stage)
                    .map(|i| {
                        let spec = ConvSpec::new(if i == 0 { cin } else { cout }, cout, 3);
                        if i == 0 { spec.stride(2) } else { spec }
                    })
                    .collect()
            } else {
                cfg.last_stage_dilations
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| ConvSpec::new(if i == 0 { cin } else { cout }, cout, 3).dilated(d))
                    .collect()
            };
            let convs = specs
                .into_iter()
                .enumerate()
                .map(|(i, spec)| ConvBnRelu::new(store, rng, &format!("backbone.stage{}.{i}", k + 1), spec))
                .collect();
            stages.push(convs);
            cin = cout;
        }
        Ok(Backbone { stem, stages })
    }

    pub fn forward(&self, s: &mut Session, image: Var) -> Result<Features> {
        let shape = s.tape.shape(image);
        if shape.h % OUTPUT_STRIDE != 0 || shape.w % OUTPUT_STRIDE != 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::Geometry(format!(
                "input {}x{} is not a positive multiple of {OUTPUT_STRIDE}",
                shape.h, shape.w
            )));
        }
        let mut x = self.stem.forward(s, image)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for conv in stage {
                x = conv.forward(s, x)?;
            }
            outs.push(x);
        }
        Ok(Features { f1: outs[0], f2: outs[1], f4: outs[3] })
    }

    pub fn channels(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for (k, stage) in self.stages.iter().enumerate() {
            c[k] = stage.last().expect("non-empty stage").out_channels();
        }
        c
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.stem.params();
        for conv in self.stages.iter().flatten() {
            v.extend(conv.params());
        }
        v
    }
}
