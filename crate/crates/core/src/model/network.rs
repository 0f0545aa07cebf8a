use rand::Rng;

use super::block::{BlockCache, ConvNeXtBlock};
use super::config::ModelConfig;
use super::layers::{Conv2d, LayerNorm, Linear};
use super::Module;
use crate::distill::MaskSpec;
use crate::error::{Error, Result};
use crate::tensor::{self, NormAxis, Parameter, Tensor};

#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Downsample {
    pub norm: LayerNorm,
    pub conv: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// Absent on the first stage, which follows the stem directly.
    pub downsample: Option<Downsample>,
    pub blocks: Vec<ConvNeXtBlock>,
}

/// `GAP → LayerNorm → Linear`, producing (pitch, yaw) in radians.
#[derive(Clone, Debug)]
pub struct GazeHead {
    pub norm: LayerNorm,
    pub fc: Linear,
}

#[derive(Clone, Debug)]
pub struct GazeModel {
    pub config: ModelConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub head: GazeHead,
}

/// Per-stage features and, for masked calls, the matching stage masks
/// (`1×1×h×w`, 1 = masked).
#[derive(Clone, Debug)]
pub struct StageFeatures {
    pub feats: [Tensor; 4],
    pub masks: Option<[Tensor; 4]>,
}

/// One step of the trunk in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unit {
    StemConv,
    StemNorm,
    DsNorm(usize),
    DsConv(usize),
    Block(usize, usize),
}

enum UnitCache {
    Input(Tensor),
    Block(Box<BlockCache>),
}

/// Intermediates of a training forward over the trunk. Units ahead of the
/// first trainable one keep nothing since no gradient reaches them.
pub struct TrunkCache {
    units: Vec<Unit>,
    caches: Vec<Option<UnitCache>>,
    stage_ends: [usize; 4],
    first: usize,
}

pub struct HeadCache {
    f4_shape: Vec<usize>,
    pooled: Tensor,
    normed: Tensor,
}

impl GazeModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dims = config.stage_dims;
        let stem = Stem {
            conv: Conv2d::new(
                "stem.conv",
                config.in_channels,
                dims[0],
                config.patch_stride,
                config.patch_stride,
                1,
                rng,
            ),
            norm: LayerNorm::new("stem.norm", dims[0], NormAxis::Channel),
        };
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let downsample = (s > 0).then(|| Downsample {
                norm: LayerNorm::new(
                    &format!("stages.{s}.downsample.norm"),
                    dims[s - 1],
                    NormAxis::Channel,
                ),
                conv: Conv2d::new(
                    &format!("stages.{s}.downsample.conv"),
                    dims[s - 1],
                    dims[s],
                    2,
                    2,
                    1,
                    rng,
                ),
            });
            let blocks = (0..config.stage_depths[s])
                .map(|b| ConvNeXtBlock::new(&format!("stages.{s}.blocks.{b}"), dims[s], rng))
                .collect();
            stages.push(Stage { downsample, blocks });
        }
        let head = GazeHead {
            norm: LayerNorm::new("head.norm", dims[3], NormAxis::Last),
            fc: Linear::new("head.fc", dims[3], config.head_outputs, rng),
        };
        let adapters = config.adapters_enabled;
        let mut model = Self {
            config: ModelConfig {
                adapters_enabled: false,
                ..config
            },
            stem,
            stages,
            head,
        };
        if adapters {
            model.attach_adapters(rng)?;
        }
        Ok(model)
    }

    /// Adds a zero-output adapter to every block, then freezes everything
    /// except the adapters.
    pub fn attach_adapters<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.config.adapters_enabled {
            return Err(Error::Config("adapters already attached".into()));
        }
        let ratio = self.config.adapter_ratio;
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                block.attach_adapter(ratio, rng)?;
            }
        }
        self.config.adapters_enabled = true;
        self.set_trainable(false);
        self.set_adapters_trainable(|_| true);
        Ok(())
    }

    pub fn has_adapters(&self) -> bool {
        self.config.adapters_enabled
    }

    /// Sets adapter trainability per stage index.
    pub fn set_adapters_trainable(&mut self, mut pick: impl FnMut(usize) -> bool) {
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let on = pick(s);
            for block in &mut stage.blocks {
                if let Some(a) = &mut block.adapter {
                    a.set_trainable(on);
                }
            }
        }
    }

    /// Input images with masked patches zeroed.
    pub fn apply_mask(images: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
        mask.apply(images)
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        let stride = self.config.total_stride();
        if c != self.config.in_channels {
            return Err(Error::InvalidArgument(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "input {h}×{w} is not divisible by the total stride {stride}"
            )));
        }
        Ok(())
    }

    pub fn forward_stages(&self, images: &Tensor) -> Result<[Tensor; 4]> {
        self.check_input(images)?;
        let mut h = self.stem.norm.forward(&self.stem.conv.forward(images)?)?;
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                h = ds.conv.forward(&ds.norm.forward(&h)?)?;
            }
            for block in &stage.blocks {
                h = block.forward(&h)?;
            }
            out.push(h.clone());
        }
        Ok(out.try_into().expect("four stages"))
    }

    /// Per-stage features. With a mask, masked patches are zeroed at the
    /// input and the mask is carried to every stage resolution.
    pub fn forward_features(
        &self,
        images: &Tensor,
        mask: Option<&MaskSpec>,
    ) -> Result<StageFeatures> {
        match mask {
            None => Ok(StageFeatures {
                feats: self.forward_stages(images)?,
                masks: None,
            }),
            Some(m) => {
                let feats = self.forward_stages(&m.apply(images)?)?;
                let strides = self.config.stage_strides();
                let masks = [
                    m.to_stage(strides[0])?,
                    m.to_stage(strides[1])?,
                    m.to_stage(strides[2])?,
                    m.to_stage(strides[3])?,
                ];
                Ok(StageFeatures {
                    feats,
                    masks: Some(masks),
                })
            }
        }
    }

    pub fn head_forward(&self, f4: &Tensor) -> Result<Tensor> {
        let pooled = tensor::global_avg_pool(f4)?;
        self.head.fc.forward(&self.head.norm.forward(&pooled)?)
    }

    /// `N×2` (pitch, yaw) in radians.
    pub fn forward_gaze(&self, images: &Tensor) -> Result<Tensor> {
        let [_, _, _, f4] = self.forward_stages(images)?;
        self.head_forward(&f4)
    }

    pub fn head_forward_train(&self, f4: &Tensor) -> Result<(Tensor, HeadCache)> {
        let pooled = tensor::global_avg_pool(f4)?;
        let normed = self.head.norm.forward(&pooled)?;
        let out = self.head.fc.forward(&normed)?;
        Ok((
            out,
            HeadCache {
                f4_shape: f4.shape().to_vec(),
                pooled,
                normed,
            },
        ))
    }

    pub fn head_backward(
        &mut self,
        cache: &HeadCache,
        dy: &Tensor,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        let upstream = need_input || self.head.norm.weight.trainable;
        let Some(d_normed) = self.head.fc.backward(&cache.normed, dy, upstream)? else {
            return Ok(None);
        };
        let Some(d_pooled) = self
            .head
            .norm
            .backward(&cache.pooled, &d_normed, need_input)?
        else {
            return Ok(None);
        };
        Ok(Some(tensor::global_avg_pool_backward(
            &cache.f4_shape,
            &d_pooled,
        )?))
    }

    fn units(&self) -> (Vec<Unit>, [usize; 4]) {
        let mut units = vec![Unit::StemConv, Unit::StemNorm];
        let mut ends = [0; 4];
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.downsample.is_some() {
                units.push(Unit::DsNorm(s));
                units.push(Unit::DsConv(s));
            }
            units.extend((0..stage.blocks.len()).map(|b| Unit::Block(s, b)));
            ends[s] = units.len() - 1;
        }
        (units, ends)
    }

    fn unit_module(&self, u: Unit) -> &dyn Module {
        match u {
            Unit::StemConv => &self.stem.conv,
            Unit::StemNorm => &self.stem.norm,
            Unit::DsNorm(s) => &self.stages[s].downsample.as_ref().unwrap().norm,
            Unit::DsConv(s) => &self.stages[s].downsample.as_ref().unwrap().conv,
            Unit::Block(s, b) => &self.stages[s].blocks[b],
        }
    }

    fn unit_forward(
        &mut self,
        u: Unit,
        x: &Tensor,
        record: bool,
        train: bool,
    ) -> Result<(Tensor, Option<UnitCache>)> {
        let input = || record.then(|| UnitCache::Input(x.clone()));
        Ok(match u {
            Unit::StemConv => (self.stem.conv.forward(x)?, input()),
            Unit::StemNorm => (self.stem.norm.forward(x)?, input()),
            Unit::DsNorm(s) => (
                self.stages[s]
                    .downsample
                    .as_ref()
                    .unwrap()
                    .norm
                    .forward(x)?,
                input(),
            ),
            Unit::DsConv(s) => (
                self.stages[s]
                    .downsample
                    .as_ref()
                    .unwrap()
                    .conv
                    .forward(x)?,
                input(),
            ),
            Unit::Block(s, b) => {
                let block = &mut self.stages[s].blocks[b];
                if record {
                    let (y, c) = block.forward_train(x, train)?;
                    (y, Some(UnitCache::Block(Box::new(c))))
                } else {
                    (block.forward(x)?, None)
                }
            }
        })
    }

    fn unit_backward(
        &mut self,
        u: Unit,
        cache: &UnitCache,
        dy: &Tensor,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        match (u, cache) {
            (Unit::Block(s, b), UnitCache::Block(c)) => {
                self.stages[s].blocks[b].backward(c, dy, need_input)
            }
            (Unit::StemConv, UnitCache::Input(x)) => self.stem.conv.backward(x, dy, need_input),
            (Unit::StemNorm, UnitCache::Input(x)) => self.stem.norm.backward(x, dy, need_input),
            (Unit::DsNorm(s), UnitCache::Input(x)) => self.stages[s]
                .downsample
                .as_mut()
                .unwrap()
                .norm
                .backward(x, dy, need_input),
            (Unit::DsConv(s), UnitCache::Input(x)) => self.stages[s]
                .downsample
                .as_mut()
                .unwrap()
                .conv
                .backward(x, dy, need_input),
            _ => unreachable!("cache kind matches its unit"),
        }
    }

    /// Trunk forward keeping what [`Self::backward_trunk`] needs. With
    /// `train`, trainable adapters use batch statistics.
    pub fn forward_trunk_train(
        &mut self,
        images: &Tensor,
        train: bool,
    ) -> Result<([Tensor; 4], TrunkCache)> {
        self.check_input(images)?;
        let (units, stage_ends) = self.units();
        let first = units
            .iter()
            .position(|&u| {
                self.unit_module(u)
                    .parameters()
                    .iter()
                    .any(|p| p.trainable && !p.buffer)
            })
            .unwrap_or(units.len());
        let mut h = images.clone();
        let mut caches = Vec::with_capacity(units.len());
        let mut feats = Vec::with_capacity(4);
        for (i, &u) in units.iter().enumerate() {
            let (y, c) = self.unit_forward(u, &h, i >= first, train)?;
            h = y;
            caches.push(c);
            if stage_ends.contains(&i) {
                feats.push(h.clone());
            }
        }
        Ok((
            feats.try_into().expect("four stages"),
            TrunkCache {
                units,
                caches,
                stage_ends,
                first,
            },
        ))
    }

    /// Backpropagates gradients arriving at any subset of the stage
    /// outputs, accumulating into trainable parameters.
    pub fn backward_trunk(
        &mut self,
        cache: &TrunkCache,
        stage_grads: [Option<&Tensor>; 4],
    ) -> Result<()> {
        let mut g: Option<Tensor> = None;
        for i in (cache.first..cache.units.len()).rev() {
            if let Some(s) = cache.stage_ends.iter().position(|&e| e == i) {
                if let Some(gs) = stage_grads[s] {
                    g = Some(match g.take() {
                        Some(mut acc) => {
                            acc.add_assign(gs)?;
                            acc
                        }
                        None => gs.clone(),
                    });
                }
            }
            let Some(dy) = g.take() else { continue };
            let c = cache.caches[i].as_ref().expect("recorded unit");
            g = self.unit_backward(cache.units[i], c, &dy, i > cache.first)?;
        }
        Ok(())
    }

    /// Parameters of the stem and all stages excluding adapters.
    pub fn backbone_parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        self.stem.visit(&mut |p| out.push(p));
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                ds.visit(&mut |p| out.push(p));
            }
            for block in &stage.blocks {
                block.visit(&mut |p| {
                    if !p.name.contains(".adapter.") {
                        out.push(p)
                    }
                });
            }
        }
        out
    }

    pub fn adapter_parameters(&self) -> Vec<&Parameter> {
        self.parameters()
            .into_iter()
            .filter(|p| p.name.contains(".adapter."))
            .collect()
    }
}

impl Module for Stem {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.conv.visit(f);
        self.norm.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.conv.visit_mut(f);
        self.norm.visit_mut(f);
    }
}

impl Module for Downsample {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.norm.visit(f);
        self.conv.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.norm.visit_mut(f);
        self.conv.visit_mut(f);
    }
}

impl Module for Stage {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        if let Some(ds) = &self.downsample {
            ds.visit(f);
        }
        for b in &self.blocks {
            b.visit(f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        if let Some(ds) = &mut self.downsample {
            ds.visit_mut(f);
        }
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }
}

impl Module for GazeHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.norm.visit(f);
        self.fc.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.norm.visit_mut(f);
        self.fc.visit_mut(f);
    }
}

impl Module for GazeModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.stem.visit(f);
        for s in &self.stages {
            s.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.stem.visit_mut(f);
        for s in &mut self.stages {
            s.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}
