use rand::Rng;

use super::layers::{join_name, Conv2d};
use super::Module;
use crate::error::Result;
use crate::tensor::{self, BatchNormCache, Parameter, RunningStats, Tensor, LEAKY_RELU_SLOPE};

/// Bottleneck adapter `fc_up(LReLU(BN(fc_down(f))))`, applied per spatial
/// position. `fc_up` starts at zero so attaching an adapter leaves the host
/// network's function unchanged.
#[derive(Clone, Debug)]
pub struct AdapterModule {
    pub fc_down: Conv2d,
    pub bn_weight: Parameter,
    pub bn_bias: Parameter,
    pub running_mean: Parameter,
    pub running_var: Parameter,
    pub fc_up: Conv2d,
}

pub struct AdapterCache {
    input: Tensor,
    down: Tensor,
    bn: BatchNormCache,
    normed: Tensor,
    act: Tensor,
}

impl AdapterModule {
    pub fn new<R: Rng + ?Sized>(prefix: &str, dim: usize, ratio: usize, rng: &mut R) -> Self {
        let hidden = (dim / ratio).max(1);
        let mut fc_up = Conv2d::pointwise(&join_name(prefix, "fc_up"), hidden, dim, rng);
        fc_up.weight.value = Tensor::zeros(fc_up.weight.shape());
        Self {
            fc_down: Conv2d::pointwise(&join_name(prefix, "fc_down"), dim, hidden, rng),
            bn_weight: Parameter::new(join_name(prefix, "bn.weight"), Tensor::full(&[hidden], 1.0)),
            bn_bias: Parameter::new(join_name(prefix, "bn.bias"), Tensor::zeros(&[hidden])),
            running_mean: Parameter::buffer(
                join_name(prefix, "bn.running_mean"),
                Tensor::zeros(&[hidden]),
            ),
            running_var: Parameter::buffer(
                join_name(prefix, "bn.running_var"),
                Tensor::full(&[hidden], 1.0),
            ),
            fc_up,
        }
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let down = self.fc_down.forward(f)?;
        let mut rm = self.running_mean.value.clone();
        let mut rv = self.running_var.value.clone();
        let (normed, _) = tensor::batch_norm(
            &down,
            &self.bn_weight.value,
            &self.bn_bias.value,
            RunningStats {
                mean: &mut rm,
                var: &mut rv,
            },
            false,
        )?;
        self.fc_up
            .forward(&tensor::leaky_relu(&normed, LEAKY_RELU_SLOPE))
    }

    /// Forward keeping intermediates. Batch statistics (and running-stat
    /// updates) are used only when `train` is set and the adapter is
    /// trainable; a frozen adapter always runs on its running statistics.
    pub fn forward_train(&mut self, f: &Tensor, train: bool) -> Result<(Tensor, AdapterCache)> {
        let down = self.fc_down.forward(f)?;
        let batch_stats = train && self.bn_weight.trainable;
        let (normed, bn) = if batch_stats {
            tensor::batch_norm(
                &down,
                &self.bn_weight.value,
                &self.bn_bias.value,
                RunningStats {
                    mean: &mut self.running_mean.value,
                    var: &mut self.running_var.value,
                },
                true,
            )?
        } else {
            let mut rm = self.running_mean.value.clone();
            let mut rv = self.running_var.value.clone();
            tensor::batch_norm(
                &down,
                &self.bn_weight.value,
                &self.bn_bias.value,
                RunningStats {
                    mean: &mut rm,
                    var: &mut rv,
                },
                false,
            )?
        };
        let act = tensor::leaky_relu(&normed, LEAKY_RELU_SLOPE);
        let out = self.fc_up.forward(&act)?;
        Ok((
            out,
            AdapterCache {
                input: f.clone(),
                down,
                bn,
                normed,
                act,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &AdapterCache,
        dy: &Tensor,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        let upstream = need_input || self.fc_down.weight.trainable || self.bn_weight.trainable;
        let Some(d_act) = self.fc_up.backward(&cache.act, dy, upstream)? else {
            return Ok(None);
        };
        let d_normed = tensor::leaky_relu_backward(&cache.normed, &d_act, LEAKY_RELU_SLOPE)?;
        let need_bn_params = self.bn_weight.trainable || self.bn_bias.trainable;
        let g = tensor::batch_norm_backward(
            &cache.down,
            &self.bn_weight.value,
            &cache.bn,
            &d_normed,
            true,
            need_bn_params,
        )?;
        if self.bn_weight.trainable {
            self.bn_weight
                .accumulate_grad(g.gamma.as_ref().unwrap().data());
        }
        if self.bn_bias.trainable {
            self.bn_bias
                .accumulate_grad(g.beta.as_ref().unwrap().data());
        }
        self.fc_down
            .backward(&cache.input, g.input.as_ref().unwrap(), need_input)
    }

    pub fn hidden_dim(&self) -> usize {
        self.bn_weight.shape()[0]
    }
}

impl Module for AdapterModule {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.fc_down.visit(f);
        f(&self.bn_weight);
        f(&self.bn_bias);
        f(&self.running_mean);
        f(&self.running_var);
        self.fc_up.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.fc_down.visit_mut(f);
        f(&mut self.bn_weight);
        f(&mut self.bn_bias);
        f(&mut self.running_mean);
        f(&mut self.running_var);
        self.fc_up.visit_mut(f);
    }
}

/// Registry size of one adapter on a `dim`-channel block with bottleneck
/// `dim/4`: both projections with biases plus the batch-norm affine and
/// its two running-statistic buffers, `dim²/2 + 9·dim/4`.
pub fn adapter_param_count(dim: usize) -> usize {
    let h = dim / 4;
    (dim * h + h) + 4 * h + (h * dim + dim)
}
