use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ParamId, ParamKind, ParamStore, Session};
use crate::error::Result;
use crate::tensor::kernels::BN_MOMENTUM;
use crate::tensor::{BnMode, ConvSpec, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    /// Weights drawn from `N(0, 2 / fan_in)`, bias zero.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, spec: ConvSpec) -> Self {
        let std = (2.0 / spec.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let ws = spec.weight_shape();
        let data = (0..ws.numel()).map(|_| normal.sample(rng)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::ConvWeight,
            Tensor::from_vec(ws, data).expect("weight shape"),
        );
        let bias = spec.bias.then(|| {
            store.add(format!("{name}.bias"), ParamKind::ConvBias, Tensor::zeros([1, spec.out_channels, 1, 1]))
        });
        Conv2d { spec, weight, bias }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv2d(x, w, b, &self.spec)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        BatchNorm2d {
            channels,
            gamma: store.add(format!("{name}.gamma"), ParamKind::BnGamma, Tensor::ones(shape)),
            beta: store.add(format!("{name}.beta"), ParamKind::BnBeta, Tensor::zeros(shape)),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros(shape)),
            running_var: store.add(format!("{name}.running_var"), ParamKind::RunningVar, Tensor::ones(shape)),
        }
    }

    /// Training mode normalises with batch statistics and folds them into the
    /// running averages with momentum 0.1; eval mode uses the running values.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.is_train() {
            let (y, stats) = s.tape.batchnorm(x, gamma, beta, BnMode::Train)?;
            let stats = stats.expect("training batch norm reports statistics");
            let store = s.store_mut();
            let update = |t: &mut Tensor, obs: &[f64]| {
                for (r, o) in t.data_mut().iter_mut().zip(obs) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
                }
            };
            update(&mut store.get_mut(self.running_mean).value, &stats.mean);
            update(&mut store.get_mut(self.running_var).value, &stats.var);
            Ok(y)
        } else {
            let mean = s.store().value(self.running_mean).data().to_vec();
            let var = s.store().value(self.running_var).data().to_vec();
            Ok(s.tape.batchnorm(x, gamma, beta, BnMode::Eval { mean: &mean, var: &var })?.0)
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// Convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, spec: ConvSpec) -> Self {
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), spec);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), spec.out_channels);
        ConvBnRelu { conv, bn }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        s.tape.relu(y)
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.conv.params();
        v.extend(self.bn.params());
        v
    }
}
