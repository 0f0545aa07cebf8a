use crate::error::{Error, Result};
use crate::model::Decoders;
use crate::tensor::{masked_mse, Tensor};

use super::MaskSpec;

/// Weight of the two feature terms against the image term.
pub const GAMMA: f32 = 0.5;

/// Total reconstruction loss and its three addends, each already
/// normalized by its own masked count.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f32,
    pub image: f32,
    pub feat3: f32,
    pub feat4: f32,
}

impl LossParts {
    pub fn new(image: f32, feat3: f32, feat4: f32) -> Self {
        Self {
            total: image + GAMMA * (feat3 + feat4),
            image,
            feat3,
            feat4,
        }
    }
}

/// Student and teacher features at stages 3 and 4.
#[derive(Clone, Copy)]
pub struct FeaturePair<'a> {
    pub f3: &'a Tensor,
    pub f4: &'a Tensor,
}

/// Gradients of the loss with respect to the student features.
pub struct LossGrads {
    pub parts: LossParts,
    pub d_f3: Tensor,
    pub d_f4: Tensor,
}

fn stride_of(images: &Tensor, feat: &Tensor) -> Result<usize> {
    let (_, _, h, w) = images.dims4()?;
    let (_, _, fh, fw) = feat.dims4()?;
    if fh == 0 || h % fh != 0 || w % fw != 0 || h / fh != w / fw {
        return Err(Error::InvalidArgument(format!(
            "feature {:?} is not a strided view of image {:?}",
            feat.shape(),
            images.shape()
        )));
    }
    Ok(h / fh)
}

struct Masks {
    image: Tensor,
    f3: Tensor,
    f4: Tensor,
}

fn masks(images: &Tensor, student: FeaturePair, mask: &MaskSpec) -> Result<Masks> {
    if mask.masked_count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(Masks {
        image: mask.to_stage(1)?,
        f3: mask.to_stage(stride_of(images, student.f3)?)?,
        f4: mask.to_stage(stride_of(images, student.f4)?)?,
    })
}

/// `masked_mse(image_decode(f4), X) + γ·Σ_{l=3,4} masked_mse(Ψ_l(f_l), f_l^T)`.
pub fn reconstruction_loss(
    images: &Tensor,
    student: FeaturePair,
    teacher: FeaturePair,
    decoders: &Decoders,
    mask: &MaskSpec,
) -> Result<LossParts> {
    let m = masks(images, student, mask)?;
    let (image, _) = masked_mse(&decoders.image.forward(student.f4)?, images, &m.image)?;
    let (feat3, _) = masked_mse(&decoders.psi3.forward(student.f3)?, teacher.f3, &m.f3)?;
    let (feat4, _) = masked_mse(&decoders.psi4.forward(student.f4)?, teacher.f4, &m.f4)?;
    Ok(LossParts::new(image, feat3, feat4))
}

/// Loss plus its gradients. Decoder gradients are accumulated into the
/// decoders; student-feature gradients are returned.
pub fn reconstruction_loss_backward(
    images: &Tensor,
    student: FeaturePair,
    teacher: FeaturePair,
    decoders: &mut Decoders,
    mask: &MaskSpec,
) -> Result<LossGrads> {
    let m = masks(images, student, mask)?;
    let (pred_img, c_img) = decoders.image.forward_train(student.f4)?;
    let (pred3, c3) = decoders.psi3.forward_train(student.f3)?;
    let (pred4, c4) = decoders.psi4.forward_train(student.f4)?;
    let (image, g_img) = masked_mse(&pred_img, images, &m.image)?;
    let (feat3, g3) = masked_mse(&pred3, teacher.f3, &m.f3)?;
    let (feat4, g4) = masked_mse(&pred4, teacher.f4, &m.f4)?;
    let mut d_f4 = decoders
        .image
        .backward(&c_img, &g_img, true)?
        .expect("input grad");
    let d_f4_psi = decoders
        .psi4
        .backward(&c4, &g4.scale(GAMMA), true)?
        .expect("input grad");
    d_f4.add_assign(&d_f4_psi)?;
    let d_f3 = decoders
        .psi3
        .backward(&c3, &g3.scale(GAMMA), true)?
        .expect("input grad");
    Ok(LossGrads {
        parts: LossParts::new(image, feat3, feat4),
        d_f3,
        d_f4,
    })
}
