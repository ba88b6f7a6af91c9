//! Grad-CAM maps for the class and domain heads, and their merge into a
//! thresholded foreground mask.

use serde::{Deserialize, Serialize};

use crate::error::{MireError, Result};
use crate::imgops::resize_bilinear;
use crate::nets::{HeadKind, MireNets};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyConfig {
    pub threshold: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig { threshold: 0.2 }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(MireError::config(format!(
                "threshold must be in (0,1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    /// `[H, W]` in `[0, 1]`.
    pub values: Tensor,
    pub kind: HeadKind,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    /// `[H, W]`; zero or in `[threshold, 1]`.
    pub values: Tensor,
    pub threshold: f64,
}

/// A model Grad-CAM can inspect: a spatial activation and the logits that
/// depend on it.
pub trait CamSource {
    /// Returns `(activation [B,C,h,w], logits [B,out])` for `images`.
    fn cam_forward(&self, tape: &Tape, images: Var, head: HeadKind) -> Result<(Var, Var)>;
}

impl CamSource for MireNets {
    fn cam_forward(&self, tape: &Tape, images: Var, head: HeadKind) -> Result<(Var, Var)> {
        let bound = self.bind(tape, false);
        let enc = self.encoder.encode(tape, &bound, images)?;
        let logits = self.head(head)?.classify(tape, &bound, enc.features)?;
        Ok((enc.cam_activation, logits))
    }
}

/// Grad-CAM for a batch `[B,C,H,W]` with one target label per image.
pub fn grad_cam<M: CamSource + ?Sized>(
    model: &M,
    images: &Tensor,
    labels: &[usize],
    head: HeadKind,
) -> Result<Vec<ActivationMap>> {
    let (b, h, w) = match images.shape() {
        &[b, _, h, w] => (b, h, w),
        s => return Err(MireError::shape("grad_cam", format!("expected [B,C,H,W], got {s:?}"))),
    };
    if labels.len() != b {
        return Err(MireError::shape("grad_cam", format!("{} labels for batch {b}", labels.len())));
    }
    let tape = Tape::new();
    // A differentiable input makes the activations differentiable too, even
    // for models with no trainable weights in front of the target layer.
    let x = tape.var(images.clone());
    let (act, logits) = model.cam_forward(&tape, x, head)?;
    let out = tape.shape(logits)[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= out) {
        return Err(MireError::contract(format!("grad_cam: label {bad} out of range for {out} outputs")));
    }
    let picked = tape.pick_per_row(logits, labels)?;
    let root = tape.sum(picked)?;
    let grads = tape.backward(root)?;
    let a = tape.value(act);
    let (c, ah, aw) = match a.shape() {
        &[_, c, ah, aw] => (c, ah, aw),
        s => return Err(MireError::shape("grad_cam", format!("activation must be rank 4, got {s:?}"))),
    };
    let g = grads.get(act).cloned().unwrap_or_else(|| Tensor::zeros(a.shape()));
    let hw = ah * aw;
    let mut maps = Vec::with_capacity(b);
    for (bi, &label) in labels.iter().enumerate() {
        let mut cam = vec![0.0; hw];
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let weight = g.data()[base..base + hw].iter().sum::<f64>() / hw as f64;
            for (m, &v) in cam.iter_mut().zip(&a.data()[base..base + hw]) {
                *m += weight * v;
            }
        }
        for m in cam.iter_mut() {
            *m = m.max(0.0);
        }
        let up = resize_bilinear(&Tensor::new(&[1, ah, aw], cam)?, h, w)?;
        maps.push(ActivationMap {
            values: min_max(up.reshape(&[h, w])?),
            kind: head,
            label,
        });
    }
    Ok(maps)
}

/// Rescales to `[0, 1]`; a constant map becomes all zeros.
fn min_max(t: Tensor) -> Tensor {
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        t.map(|v| (v - lo) / (hi - lo))
    } else {
        t.map(|_| 0.0)
    }
}

/// Merged foreground from raw map values: clamp the sum to `[0, 1]`, then
/// zero everything below the threshold and keep the rest as soft weights.
pub fn merge_values(mc: &Tensor, md: &Tensor, threshold: f64) -> Result<Tensor> {
    if mc.shape() != md.shape() {
        return Err(MireError::shape(
            "merge_masks",
            format!("{:?} vs {:?}", mc.shape(), md.shape()),
        ));
    }
    let data = mc
        .data()
        .iter()
        .zip(md.data())
        .map(|(a, b)| {
            let s = (a + b).clamp(0.0, 1.0);
            if s < threshold {
                0.0
            } else {
                s
            }
        })
        .collect();
    Tensor::new(mc.shape(), data)
}

pub fn merge_masks(mc: &ActivationMap, md: &ActivationMap, cfg: &SaliencyConfig) -> Result<ForegroundMask> {
    cfg.validate()?;
    Ok(ForegroundMask {
        values: merge_values(&mc.values, &md.values, cfg.threshold)?,
        threshold: cfg.threshold,
    })
}

/// Share of a map's mass that falls on the glyph, given per-pixel glyph
/// coverage. Zero for an all-zero map.
pub fn foreground_mass(map: &Tensor, cover: &Tensor) -> Result<f64> {
    if map.shape() != cover.shape() {
        return Err(MireError::shape(
            "foreground_mass",
            format!("{:?} vs {:?}", map.shape(), cover.shape()),
        ));
    }
    let total: f64 = map.data().iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok(map.data().iter().zip(cover.data()).map(|(m, c)| m * c).sum::<f64>() / total)
}
