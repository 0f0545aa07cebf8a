//! Reconstruction decoders used during distillation.

use rand::Rng;

use super::block::{BlockCache, ConvNeXtBlock};
use super::layers::{join_name, Conv2d};
use super::Module;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Parameter, Tensor};

/// `Ψ(z) = FC(z + pw_project(GRN(GELU(pw_expand(LN(dwconv7(z)))))))`: a
/// ConvNeXt-V2 block followed by a per-position map to the teacher width.
#[derive(Clone, Debug)]
pub struct DecoderPsi {
    pub block: ConvNeXtBlock,
    pub fc: Conv2d,
}

pub struct PsiCache {
    block: BlockCache,
    mid: Tensor,
}

impl DecoderPsi {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        student_dim: usize,
        teacher_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            block: ConvNeXtBlock::new(&join_name(prefix, "block"), student_dim, rng),
            fc: Conv2d::pointwise(&join_name(prefix, "fc"), student_dim, teacher_dim, rng),
        }
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.block.dim() {
            return Err(shape_err("decode_psi", z.shape(), &[self.block.dim()]));
        }
        Ok(())
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        self.fc.forward(&self.block.forward(z)?)
    }

    pub fn forward_train(&mut self, z: &Tensor) -> Result<(Tensor, PsiCache)> {
        self.check(z)?;
        let (mid, block) = self.block.forward_train(z, true)?;
        let out = self.fc.forward(&mid)?;
        Ok((out, PsiCache { block, mid }))
    }

    pub fn backward(
        &mut self,
        cache: &PsiCache,
        dy: &Tensor,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        let d_mid = self
            .fc
            .backward(&cache.mid, dy, true)?
            .expect("input grad requested");
        self.block.backward(&cache.block, &d_mid, need_input)
    }

    pub fn out_channels(&self) -> usize {
        self.fc.out_channels()
    }
}

impl Module for DecoderPsi {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.block.visit(f);
        self.fc.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.block.visit_mut(f);
        self.fc.visit_mut(f);
    }
}

/// Predicts image pixels from the deepest features: one ConvNeXt-V2 block,
/// then a per-position projection to a `patch×patch×C` pixel patch.
#[derive(Clone, Debug)]
pub struct ImageDecoder {
    pub block: ConvNeXtBlock,
    pub proj: Conv2d,
    pub patch: usize,
    pub out_channels: usize,
}

pub struct ImageDecoderCache {
    block: BlockCache,
    mid: Tensor,
}

impl ImageDecoder {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        dim: usize,
        patch: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            block: ConvNeXtBlock::new(&join_name(prefix, "block"), dim, rng),
            proj: Conv2d::pointwise(
                &join_name(prefix, "proj"),
                dim,
                patch * patch * out_channels,
                rng,
            ),
            patch,
            out_channels,
        }
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let y = self.proj.forward(&self.block.forward(f)?)?;
        patches_to_image(&y, self.patch, self.out_channels)
    }

    pub fn forward_train(&mut self, f: &Tensor) -> Result<(Tensor, ImageDecoderCache)> {
        let (mid, block) = self.block.forward_train(f, true)?;
        let y = self.proj.forward(&mid)?;
        Ok((
            patches_to_image(&y, self.patch, self.out_channels)?,
            ImageDecoderCache { block, mid },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &ImageDecoderCache,
        dy: &Tensor,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        let d_proj = image_to_patches(dy, self.patch)?;
        let d_mid = self
            .proj
            .backward(&cache.mid, &d_proj, true)?
            .expect("input grad requested");
        self.block.backward(&cache.block, &d_mid, need_input)
    }
}

impl Module for ImageDecoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.block.visit(f);
        self.proj.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.block.visit_mut(f);
        self.proj.visit_mut(f);
    }
}

/// `N×(p²C)×h×w` per-position patches to an `N×C×hp×wp` image. Channel
/// `(c·p + py)·p + px` holds pixel `(py, px)` of channel `c`.
pub fn patches_to_image(y: &Tensor, patch: usize, channels: usize) -> Result<Tensor> {
    let (n, pc, h, w) = y.dims4()?;
    if pc != patch * patch * channels {
        return Err(shape_err(
            "patches_to_image",
            y.shape(),
            &[patch * patch * channels],
        ));
    }
    let (oh, ow) = (h * patch, w * patch);
    let mut out = Tensor::zeros(&[n, channels, oh, ow]);
    let src = y.data();
    let dst = out.data_mut();
    for b in 0..n {
        for c in 0..channels {
            for py in 0..patch {
                for px in 0..patch {
                    let ch = (c * patch + py) * patch + px;
                    let plane = &src[((b * pc + ch) * h) * w..][..h * w];
                    for i in 0..h {
                        for j in 0..w {
                            dst[((b * channels + c) * oh + i * patch + py) * ow + j * patch + px] =
                                plane[i * w + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patches_to_image`].
pub fn image_to_patches(img: &Tensor, patch: usize) -> Result<Tensor> {
    let (n, channels, oh, ow) = img.dims4()?;
    if oh % patch != 0 || ow % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {:?} is not a whole number of {patch}-pixel patches",
            img.shape()
        )));
    }
    let (h, w) = (oh / patch, ow / patch);
    let pc = patch * patch * channels;
    let mut out = Tensor::zeros(&[n, pc, h, w]);
    let src = img.data();
    let dst = out.data_mut();
    for b in 0..n {
        for c in 0..channels {
            for py in 0..patch {
                for px in 0..patch {
                    let ch = (c * patch + py) * patch + px;
                    for i in 0..h {
                        for j in 0..w {
                            dst[((b * pc + ch) * h + i) * w + j] = src
                                [((b * channels + c) * oh + i * patch + py) * ow + j * patch + px];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The three decoders trained alongside the student.
#[derive(Clone, Debug)]
pub struct Decoders {
    pub image: ImageDecoder,
    pub psi3: DecoderPsi,
    pub psi4: DecoderPsi,
}

impl Decoders {
    pub const PREFIX: &'static str = "decoder";

    /// Decoders mapping `student` features to `teacher` features at stages 3
    /// and 4, and student stage-4 features to `patch`-pixel image patches.
    pub fn new<R: Rng + ?Sized>(
        student: &super::ModelConfig,
        teacher: &super::ModelConfig,
        patch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if patch != student.total_stride() {
            return Err(Error::Config(format!(
                "image decoder patch {patch} must equal the stage-4 stride {}",
                student.total_stride()
            )));
        }
        let (s, t) = (student.stage_dims, teacher.stage_dims);
        Ok(Self {
            image: ImageDecoder::new("decoder.image", s[3], patch, student.in_channels, rng),
            psi3: DecoderPsi::new("decoder.psi3", s[2], t[2], rng),
            psi4: DecoderPsi::new("decoder.psi4", s[3], t[3], rng),
        })
    }
}

impl Module for Decoders {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.image.visit(f);
        self.psi3.visit(f);
        self.psi4.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.image.visit_mut(f);
        self.psi3.visit_mut(f);
        self.psi4.visit_mut(f);
    }
}
