//! Category-aware data mixing: keep a sample's salient foreground and replace
//! its background with a blurred, cropped, resized patch of an image from
//! another source domain.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MireError, Result};
use crate::imgops::{blur, crop, gaussian_kernel, resize_bilinear};
use crate::nets::{HeadKind, MireNets};
use crate::saliency::{grad_cam, merge_values, ForegroundMask, SaliencyConfig};
use crate::synthdata::{
    derived_rng, DatasetBundle, DomainData, LabeledSample, Provenance, Split, MIXED_ID_BASE,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub crop_area_ratio: f64,
    pub blur_size: usize,
    pub blur_sigma: f64,
    /// `false` skips the blur (the "w/o Gaussian Blur" ablation).
    pub blur: bool,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            crop_area_ratio: 1.0 / 8.0,
            blur_size: 5,
            blur_sigma: 1.5,
            blur: true,
            seed: 0,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_area_ratio > 0.0 && self.crop_area_ratio <= 1.0) {
            return Err(MireError::config(format!(
                "crop_area_ratio must be in (0,1], got {}",
                self.crop_area_ratio
            )));
        }
        gaussian_kernel(self.blur_size, self.blur_sigma)?;
        Ok(())
    }
}

/// Side of the square crop for an `h`-pixel image.
pub fn crop_side(h: usize, ratio: f64) -> Result<usize> {
    let side = (h as f64 * ratio.sqrt()).round() as usize;
    if side == 0 || side > h {
        return Err(MireError::config(format!(
            "crop side {side} invalid for image size {h} at ratio {ratio}"
        )));
    }
    Ok(side)
}

/// Blur, crop a square of the configured area at a uniform location, and
/// resize back to the input size.
pub fn make_background<R: Rng>(xj: &Tensor, cfg: &MixConfig, rng: &mut R) -> Result<Tensor> {
    let (h, w) = match xj.shape() {
        &[_, h, w] => (h, w),
        s => return Err(MireError::shape("make_background", format!("expected [C,H,W], got {s:?}"))),
    };
    let side = crop_side(h.min(w), cfg.crop_area_ratio)?;
    let src = if cfg.blur {
        blur(xj, &gaussian_kernel(cfg.blur_size, cfg.blur_sigma)?)?
    } else {
        xj.clone()
    };
    let top = rng.gen_range(0..=h - side);
    let left = rng.gen_range(0..=w - side);
    resize_bilinear(&crop(&src, top, left, side, side)?, h, w)
}

/// Per-pixel `mask * xi + (1 - mask) * bg`, broadcast over channels.
///
/// Written as `bg + m (xi - bg)` with exact endpoints so that `m = 1` gives
/// `xi`, `m = 0` gives `bg`, and `xi == bg` gives `xi`, all bit-exactly.
pub fn mix_images(xi: &Tensor, mask: &Tensor, bg: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match xi.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(MireError::shape("mix", format!("expected [C,H,W], got {s:?}"))),
    };
    if bg.shape() != xi.shape() || mask.shape() != [h, w] {
        return Err(MireError::shape(
            "mix",
            format!("image {:?}, mask {:?}, background {:?}", xi.shape(), mask.shape(), bg.shape()),
        ));
    }
    let m = mask.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for p in 0..h * w {
            let (a, b) = (xi.data()[ch * h * w + p], bg.data()[ch * h * w + p]);
            let v = if m[p] == 1.0 || a == b {
                a
            } else if m[p] == 0.0 {
                b
            } else {
                (b + m[p] * (a - b)).clamp(a.min(b), a.max(b))
            };
            out.push(v);
        }
    }
    Tensor::new(xi.shape(), out)
}

/// Mixed sample keeping the foreground's class and domain.
pub fn mix(xi: &LabeledSample, mask: &ForegroundMask, bg: &Tensor, bg_id: u64, bg_domain: usize, id: u64) -> Result<LabeledSample> {
    Ok(LabeledSample {
        id,
        image: mix_images(&xi.image, &mask.values, bg)?,
        y: xi.y,
        d: xi.d,
        split: Split::Train,
        provenance: Some(Provenance {
            fg_id: xi.id,
            bg_id,
            bg_domain,
        }),
    })
}

/// How the two activation maps enter the merged mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRule {
    /// Drop the class map.
    pub no_mc: bool,
    /// Drop the domain map.
    pub no_md: bool,
    /// Use `1 - M_d` in place of `M_d`.
    pub invert_md: bool,
}

/// Foreground masks for `samples`; `domain_index` maps a sample's domain to
/// its domain-head label.
pub fn compute_masks(
    nets: &MireNets,
    samples: &[&LabeledSample],
    domain_index: &(dyn Fn(usize) -> Result<usize> + Sync),
    rule: MaskRule,
    sal: &SaliencyConfig,
) -> Result<Vec<ForegroundMask>> {
    sal.validate()?;
    const CHUNK: usize = 32;
    let chunks: Vec<Result<Vec<ForegroundMask>>> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let imgs = Tensor::stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let ys: Vec<usize> = chunk.iter().map(|s| s.y).collect();
            let ds: Vec<usize> = chunk.iter().map(|s| domain_index(s.d)).collect::<Result<_>>()?;
            let mc = if rule.no_mc { None } else { Some(grad_cam(nets, &imgs, &ys, HeadKind::Class)?) };
            let md = if rule.no_md { None } else { Some(grad_cam(nets, &imgs, &ds, HeadKind::Domain)?) };
            let shape = [imgs.shape()[2], imgs.shape()[3]];
            (0..chunk.len())
                .map(|i| {
                    let c = mc.as_ref().map_or_else(|| Tensor::zeros(&shape), |m| m[i].values.clone());
                    let d = md.as_ref().map_or_else(
                        || Tensor::zeros(&shape),
                        |m| {
                            if rule.invert_md {
                                m[i].values.map(|v| 1.0 - v)
                            } else {
                                m[i].values.clone()
                            }
                        },
                    );
                    Ok(ForegroundMask {
                        values: merge_values(&c, &d, sal.threshold)?,
                        threshold: sal.threshold,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Result of [`augment_dataset`].
#[derive(Clone, Debug)]
pub struct Augmented {
    /// Source domains only: all original samples plus the mixed ones.
    pub bundle: DatasetBundle,
    /// Masks of the train-split originals, in selection order.
    pub masks: Vec<ForegroundMask>,
}

/// Mixes every train-split image of every source domain once with a
/// background from each other source domain, giving `(N-1) |D_s|` new
/// samples. Donors and crop positions come from `cfg.seed` and sample ids.
pub fn augment_dataset(
    bundle: &DatasetBundle,
    sources: &[usize],
    nets: &MireNets,
    rule: MaskRule,
    sal: &SaliencyConfig,
    cfg: &MixConfig,
) -> Result<Augmented> {
    cfg.validate()?;
    if sources.len() < 2 {
        return Err(MireError::contract(format!(
            "augment_dataset needs at least 2 source domains, got {}",
            sources.len()
        )));
    }
    let per_domain: Vec<Vec<&LabeledSample>> = sources
        .iter()
        .map(|&d| Ok(bundle.domain(d)?.samples.iter().filter(|s| s.split == Split::Train).collect()))
        .collect::<Result<_>>()?;
    if let Some(i) = per_domain.iter().position(Vec::is_empty) {
        return Err(MireError::contract(format!("source domain {} has no train samples", sources[i])));
    }
    let originals: Vec<&LabeledSample> = per_domain.iter().flatten().copied().collect();
    let index_of = |d: usize| {
        sources
            .iter()
            .position(|&s| s == d)
            .ok_or_else(|| MireError::contract(format!("domain {d} is not a source domain")))
    };
    let masks = compute_masks(nets, &originals, &index_of, rule, sal)?;

    let n_other = sources.len() - 1;
    let mixed: Vec<Result<Vec<LabeledSample>>> = originals
        .par_iter()
        .zip(masks.par_iter())
        .enumerate()
        .map(|(i, (fg, mask))| {
            let mut out = Vec::with_capacity(n_other);
            let mut slot = 0;
            for (e, donors) in sources.iter().zip(&per_domain) {
                if *e == fg.d {
                    continue;
                }
                let mut rng = derived_rng(cfg.seed, 0xC0D0_0000 + *e as u64, fg.id);
                let donor = donors[rng.gen_range(0..donors.len())];
                let bg = make_background(&donor.image, cfg, &mut rng)?;
                let id = MIXED_ID_BASE + (i * n_other + slot) as u64;
                out.push(mix(fg, mask, &bg, donor.id, donor.d, id)?);
                slot += 1;
            }
            Ok(out)
        })
        .collect();

    let mut domains: Vec<DomainData> = sources
        .iter()
        .map(|&d| Ok(bundle.domain(d)?.clone()))
        .collect::<Result<_>>()?;
    for m in mixed {
        for s in m? {
            let slot = index_of(s.d)?;
            domains[slot].samples.push(s);
        }
    }
    Ok(Augmented {
        bundle: DatasetBundle {
            spec: bundle.spec.clone(),
            domains,
        },
        masks,
    })
}
