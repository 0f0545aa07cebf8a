use rand::Rng;

use super::adapter::{AdapterCache, AdapterModule};
use super::layers::{join_name, Conv2d, Grn, LayerNorm};
use super::Module;
use crate::error::{Error, Result};
use crate::tensor::{self, NormAxis, Parameter, Tensor};

/// ConvNeXt-V2 block: `x + pw_project(GRN(GELU(pw_expand(LN(dwconv7(x))))))`,
/// with an optional adapter added to the branch after `pw_project`.
#[derive(Clone, Debug)]
pub struct ConvNeXtBlock {
    pub prefix: String,
    pub dwconv: Conv2d,
    pub norm: LayerNorm,
    pub pw_expand: Conv2d,
    pub grn: Grn,
    pub pw_project: Conv2d,
    pub adapter: Option<AdapterModule>,
}

pub struct BlockCache {
    x: Tensor,
    dw: Tensor,
    normed: Tensor,
    expanded: Tensor,
    act: Tensor,
    grn_out: Tensor,
    adapter: Option<AdapterCache>,
}

impl ConvNeXtBlock {
    pub fn new<R: Rng + ?Sized>(prefix: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            prefix: prefix.to_string(),
            dwconv: Conv2d::new(&join_name(prefix, "dwconv"), dim, dim, 7, 1, dim, rng),
            norm: LayerNorm::new(&join_name(prefix, "norm"), dim, NormAxis::Channel),
            pw_expand: Conv2d::pointwise(&join_name(prefix, "pw_expand"), dim, 4 * dim, rng),
            grn: Grn::new(&join_name(prefix, "grn"), 4 * dim),
            pw_project: Conv2d::pointwise(&join_name(prefix, "pw_project"), 4 * dim, dim, rng),
            adapter: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dwconv.out_channels()
    }

    pub fn attach_adapter<R: Rng + ?Sized>(&mut self, ratio: usize, rng: &mut R) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::Config(format!(
                "{}: adapter already attached",
                self.prefix
            )));
        }
        self.adapter = Some(AdapterModule::new(
            &join_name(&self.prefix, "adapter"),
            self.dim(),
            ratio,
            rng,
        ));
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.dwconv.forward(x)?;
        let h = self.norm.forward(&h)?;
        let h = self.pw_expand.forward(&h)?;
        let h = tensor::gelu(&h);
        let h = self.grn.forward(&h)?;
        let mut branch = self.pw_project.forward(&h)?;
        if let Some(adapter) = &self.adapter {
            let a = adapter.forward(&branch)?;
            branch.add_assign(&a)?;
        }
        branch.add(x)
    }

    pub fn forward_train(&mut self, x: &Tensor, train: bool) -> Result<(Tensor, BlockCache)> {
        let dw = self.dwconv.forward(x)?;
        let normed = self.norm.forward(&dw)?;
        let expanded = self.pw_expand.forward(&normed)?;
        let act = tensor::gelu(&expanded);
        let grn_out = self.grn.forward(&act)?;
        let mut branch = self.pw_project.forward(&grn_out)?;
        let adapter = match self.adapter.as_mut() {
            Some(adapter) => {
                let (a, cache) = adapter.forward_train(&branch, train)?;
                branch.add_assign(&a)?;
                Some(cache)
            }
            None => None,
        };
        let out = branch.add(x)?;
        Ok((
            out,
            BlockCache {
                x: x.clone(),
                dw,
                normed,
                expanded,
                act,
                grn_out,
                adapter,
            },
        ))
    }

    /// Returns the input gradient when `need_input`; parameter gradients
    /// are accumulated for trainable parameters only.
    pub fn backward(
        &mut self,
        cache: &BlockCache,
        dy: &Tensor,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        let branch_trainable = self.dwconv.weight.trainable
            || self.norm.weight.trainable
            || self.pw_expand.weight.trainable
            || self.grn.gamma.trainable
            || self.pw_project.weight.trainable;
        let mut d_branch = dy.clone();
        if let (Some(adapter), Some(ac)) = (self.adapter.as_mut(), cache.adapter.as_ref()) {
            if let Some(d) = adapter.backward(ac, dy, need_input || branch_trainable)? {
                d_branch.add_assign(&d)?;
            }
        }
        if !need_input && !branch_trainable {
            return Ok(None);
        }
        let need = |later: bool| need_input || later;
        let d = self.pw_project.backward(
            &cache.grn_out,
            &d_branch,
            need(
                self.grn.gamma.trainable
                    || self.pw_expand.weight.trainable
                    || self.norm.weight.trainable
                    || self.dwconv.weight.trainable,
            ),
        )?;
        let Some(d) = d else { return Ok(None) };
        let d = self.grn.backward(&cache.act, &d, true)?.unwrap();
        let d = tensor::gelu_backward(&cache.expanded, &d)?;
        let d = self.pw_expand.backward(
            &cache.normed,
            &d,
            need(self.norm.weight.trainable || self.dwconv.weight.trainable),
        )?;
        let Some(d) = d else { return Ok(None) };
        let d = self
            .norm
            .backward(&cache.dw, &d, need(self.dwconv.weight.trainable))?;
        let Some(d) = d else { return Ok(None) };
        let dx_branch = self.dwconv.backward(&cache.x, &d, need_input)?;
        Ok(match dx_branch {
            Some(mut dx) if need_input => {
                dx.add_assign(dy)?;
                Some(dx)
            }
            _ => None,
        })
    }

    pub fn has_trainable(&self) -> bool {
        self.parameters().iter().any(|p| p.trainable && !p.buffer)
    }
}

impl Module for ConvNeXtBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.dwconv.visit(f);
        self.norm.visit(f);
        self.pw_expand.visit(f);
        self.grn.visit(f);
        self.pw_project.visit(f);
        if let Some(a) = &self.adapter {
            a.visit(f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.dwconv.visit_mut(f);
        self.norm.visit_mut(f);
        self.pw_expand.visit_mut(f);
        self.grn.visit_mut(f);
        self.pw_project.visit_mut(f);
        if let Some(a) = &mut self.adapter {
            a.visit_mut(f);
        }
    }
}
