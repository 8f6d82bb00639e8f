//! Mask pyramids and mask-driven blending.
//!
//! Both blends compute `a ⊙ (1 − m) + b ⊙ m` for a binary mask `m`. Because
//! the mask is binary this is evaluated as a per-position select, which keeps
//! retained values bit-identical to their source.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::schedule::SamplerState;
use crate::tensor::resize_nearest;
use crate::{Error, Result, Tensor};

/// A binary mask together with nearest-neighbour copies at other
/// resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    base: Tensor,
    levels: BTreeMap<(usize, usize), Tensor>,
}

impl MaskPyramid {
    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn level(&self, h: usize, w: usize) -> Option<&Tensor> {
        self.levels.get(&(h, w))
    }

    pub fn resolutions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.levels.keys().copied()
    }
}

pub fn check_binary_mask(mask: &Tensor) -> Result<(usize, usize)> {
    let dims = mask.dims2()?;
    if !mask.is_binary() {
        return Err(Error::Input("mask must contain only 0 and 1".into()));
    }
    Ok(dims)
}

/// Builds one level per requested `(h, w)` plus the base resolution itself.
pub fn build_mask_pyramid(mask: &Tensor, resolutions: &[(usize, usize)]) -> Result<MaskPyramid> {
    let (h, w) = check_binary_mask(mask)?;
    let mut levels = BTreeMap::new();
    levels.insert((h, w), mask.clone());
    for &(rh, rw) in resolutions {
        if let alloc::collections::btree_map::Entry::Vacant(slot) = levels.entry((rh, rw)) {
            slot.insert(resize_nearest(mask, rh, rw)?);
        }
    }
    Ok(MaskPyramid { base: mask.clone(), levels })
}

/// Selects `keep` where the mask is 0 and `edit` where it is 1. The mask is
/// broadcast over every leading axis.
fn masked_select(keep: &Tensor, edit: &Tensor, m: &Tensor) -> Result<Tensor> {
    keep.expect_same_shape(edit)
        .map_err(|e| Error::Dimension(format!("blend operands differ: {e}")))?;
    let (mh, mw) = m.dims2()?;
    let shape = keep.shape();
    let trailing = shape.len() >= 2 && shape[shape.len() - 2..] == [mh, mw];
    if !trailing {
        return Err(Error::Dimension(format!("mask {mh}x{mw} does not fit operand {shape:?}")));
    }
    let plane = mh * mw;
    let mut out = Vec::with_capacity(keep.len());
    for (kp, ep) in keep.data().chunks_exact(plane).zip(edit.data().chunks_exact(plane)) {
        out.extend(kp.iter().zip(ep).zip(m.data()).map(|((&k, &e), &mv)| if mv != 0.0 { e } else { k }));
    }
    Tensor::new(shape, out)
}

/// Feature-level blend: source features `phi_y` outside the mask, edited
/// features `phi_x` inside.
pub fn blend_features(phi_y: &Tensor, phi_x: &Tensor, m: &Tensor) -> Result<Tensor> {
    masked_select(phi_y, phi_x, m)
}

/// Latent-level blend: encoded source `y_t` outside the mask, sampler state
/// `x_t` inside.
pub fn blend_pixels(y_t: &Tensor, x_t: &Tensor, m: &Tensor) -> Result<Tensor> {
    masked_select(y_t, x_t, m)
}

/// [`blend_pixels`] applied to a double-precision sampler state: positions
/// where the mask is 0 take `y_t` exactly.
pub fn blend_pixels_into(y_t: &Tensor, x: &mut SamplerState, m: &Tensor) -> Result<()> {
    if y_t.shape() != x.shape() {
        return Err(Error::Dimension(format!("blend operands differ: {:?} vs {:?}", y_t.shape(), x.shape())));
    }
    let (mh, mw) = m.dims2()?;
    let shape = y_t.shape();
    if shape.len() < 2 || shape[shape.len() - 2..] != [mh, mw] {
        return Err(Error::Dimension(format!("mask {mh}x{mw} does not fit operand {shape:?}")));
    }
    let plane = mh * mw;
    for (i, (xv, &yv)) in x.values_mut().iter_mut().zip(y_t.data()).enumerate() {
        if m.data()[i % plane] == 0.0 {
            *xv = f64::from(yv);
        }
    }
    Ok(())
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn tensors() -> impl Strategy<Value = (Tensor, Tensor, Tensor)> {
        (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
            (
                proptest::collection::vec(-5.0f32..5.0, c * h * w),
                proptest::collection::vec(-5.0f32..5.0, c * h * w),
                proptest::collection::vec(0u8..2, h * w),
            )
                .prop_map(move |(a, b, m)| {
                    (
                        Tensor::new(&[c, h, w], a).unwrap(),
                        Tensor::new(&[c, h, w], b).unwrap(),
                        Tensor::new(&[h, w], m.into_iter().map(f32::from).collect()).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn blend_is_idempotent((a, b, m) in tensors()) {
            let once = blend_features(&a, &b, &m).unwrap();
            let twice = blend_features(&once, &b, &m).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn blend_is_local((a, b, m) in tensors()) {
            let out = blend_pixels(&a, &b, &m).unwrap();
            let plane = m.len();
            for (i, v) in out.data().iter().enumerate() {
                let src = if m.data()[i % plane] == 0.0 { a.data()[i] } else { b.data()[i] };
                prop_assert_eq!(v.to_bits(), src.to_bits());
            }
        }
    }
}
