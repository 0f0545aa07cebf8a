use std::collections::BTreeMap;

use super::{Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    step: u32,
}

/// AdamW with decoupled weight decay.
///
/// Decay is applied only to weight matrices and kernels (rank ≥ 2); biases
/// and norm affines are not decayed. Bias correction uses a per-parameter
/// step count so parameters unfrozen mid-run start cleanly.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    /// Updates every trainable, non-buffer parameter from its gradient.
    /// Frozen parameters and buffers are skipped even if they carry a
    /// gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        let c = self.config;
        for p in params {
            if !p.trainable || p.buffer {
                continue;
            }
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            let n = p.value.numel();
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            if st.m.len() != n {
                return Err(Error::Config(format!(
                    "optimizer state for `{}` has wrong size",
                    p.name
                )));
            }
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            let decay = if p.value.ndim() >= 2 {
                c.lr * c.weight_decay
            } else {
                0.0
            };
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= decay * *w;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Optimizer state as named tensors, for checkpoints.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, st) in &self.state {
            let n = st.m.len();
            out.push((
                format!("adamw.m.{name}"),
                Tensor::new(&[n], st.m.clone()).unwrap(),
            ));
            out.push((
                format!("adamw.v.{name}"),
                Tensor::new(&[n], st.v.clone()).unwrap(),
            ));
            out.push((
                format!("adamw.t.{name}"),
                Tensor::new(&[1], vec![f32::from_bits(st.step)]).unwrap(),
            ));
        }
        out
    }

    /// Restores state written by [`AdamW::state_tensors`]; entries without
    /// the `adamw.` prefix are ignored.
    pub fn load_state_tensors(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut state: BTreeMap<String, Moments> = BTreeMap::new();
        for (key, t) in entries {
            let Some(rest) = key.strip_prefix("adamw.") else {
                continue;
            };
            let (kind, name) = rest
                .split_once('.')
                .ok_or_else(|| Error::Corrupt(format!("bad optimizer entry `{key}`")))?;
            let st = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: Vec::new(),
                v: Vec::new(),
                step: 0,
            });
            match kind {
                "m" => st.m = t.data().to_vec(),
                "v" => st.v = t.data().to_vec(),
                "t" => st.step = t.data()[0].to_bits(),
                _ => return Err(Error::Corrupt(format!("bad optimizer entry `{key}`"))),
            }
        }
        self.state = state;
        Ok(())
    }
}
