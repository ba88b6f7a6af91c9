//! Browser demo. The exported functions are thin wrappers over plain Rust
//! functions that return `Result<_, String>` so they can be tested natively.

use mire::astr::{aggregate_one, bandwidth, update_anchors, SemanticTopology};
use mire::cdm::{make_background, mix_images, MixConfig};
use mire::imgops::{blur, gaussian_kernel};
use mire::saliency::merge_values;
use mire::synthdata::{generate_sample, glyph_coverage, sample_id, DatasetSpec};
use mire::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Sample indices the explorers may address per domain and split.
pub const EXPLORER_SAMPLES: usize = 1000;

/// Dataset parameters shared by the image explorers.
#[derive(Clone, Copy, Debug)]
pub struct Params {
    pub num_classes: usize,
    pub num_domains: usize,
    pub image_size: usize,
    pub rho: f64,
    pub seed: u64,
}

impl Params {
    pub fn spec(&self) -> Result<DatasetSpec, String> {
        let spec = DatasetSpec {
            num_classes: self.num_classes,
            num_domains: self.num_domains,
            samples_per_domain: EXPLORER_SAMPLES,
            image_size: self.image_size,
            spurious_strength: self.rho,
            seed: self.seed,
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

fn check_domain(spec: &DatasetSpec, d: usize) -> Result<(), String> {
    if d >= spec.num_domains {
        return Err(format!("domain {d} out of range for {} domains", spec.num_domains));
    }
    Ok(())
}

fn check_index(index: usize) -> Result<(), String> {
    if index + 1 >= EXPLORER_SAMPLES {
        return Err(format!("sample index {index} out of range"));
    }
    Ok(())
}

/// RGBA bytes for a `[3,H,W]` image or an `[H,W]` plane (drawn grey).
pub fn to_rgba(img: &Tensor) -> Result<Vec<u8>, String> {
    let (c, h, w) = match img.shape() {
        &[3, h, w] => (3, h, w),
        &[h, w] => (1, h, w),
        s => return Err(format!("cannot draw shape {s:?}")),
    };
    let px = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let data = img.data();
    let mut out = Vec::with_capacity(4 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(px(data[(ch % c) * h * w + i]));
        }
        out.push(255);
    }
    Ok(out)
}

/// Equal-sized images side by side as RGBA, separated by a one-pixel white
/// column. The strip is `n * (w + 1) - 1` pixels wide.
pub fn strip(panels: &[Tensor]) -> Result<Vec<u8>, String> {
    let first = panels.first().ok_or("no panels")?;
    if panels.iter().any(|p| p.shape() != first.shape()) {
        return Err("panels differ in shape".into());
    }
    let rgba: Vec<Vec<u8>> = panels.iter().map(to_rgba).collect::<Result<_, _>>()?;
    let (h, w) = (first.shape()[first.rank() - 2], first.shape()[first.rank() - 1]);
    let mut out = Vec::with_capacity(4 * h * (panels.len() * (w + 1) - 1));
    for r in 0..h {
        for (k, p) in rgba.iter().enumerate() {
            if k > 0 {
                out.extend_from_slice(&[255; 4]);
            }
            out.extend_from_slice(&p[4 * r * w..4 * (r + 1) * w]);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct SampleInfo {
    pub label: usize,
    pub glyph: String,
    pub hue_slot: usize,
    pub held_out: bool,
    pub glyph_area: f64,
}

/// One generated sample and its latent attributes.
pub fn sample(p: Params, d: usize, held_out: bool, index: usize) -> Result<(Tensor, SampleInfo), String> {
    let spec = p.spec()?;
    check_domain(&spec, d)?;
    check_index(index)?;
    let (s, meta) = generate_sample(&spec, d, held_out, index);
    let cover = glyph_coverage(&spec, s.id).map_err(|e| e.to_string())?;
    let area = cover.data().iter().sum::<f64>() / cover.len() as f64;
    let info = SampleInfo {
        label: s.y,
        glyph: format!("{:?}", meta.glyph),
        hue_slot: meta.hue_slot,
        held_out,
        glyph_area: area,
    };
    Ok((s.image, info))
}

/// Mixing controls. The class map is the glyph footprint; the domain map is
/// a blurred copy scaled by `domain_weight`, standing in for a broader and
/// weaker saliency map.
#[derive(Clone, Copy, Debug)]
pub struct MixParams {
    pub fg_domain: usize,
    pub bg_domain: usize,
    pub index: usize,
    pub threshold: f64,
    pub crop_area_ratio: f64,
    pub blur: bool,
    pub domain_weight: f64,
}

/// Panels: foreground image, merged mask, background, mixed image.
pub fn mix_panels(p: Params, m: MixParams) -> Result<Vec<Tensor>, String> {
    let spec = p.spec()?;
    check_domain(&spec, m.fg_domain)?;
    check_domain(&spec, m.bg_domain)?;
    check_index(m.index)?;
    let err = |e: mire::MireError| e.to_string();
    let (xi, _) = generate_sample(&spec, m.fg_domain, false, m.index);
    let (xj, _) = generate_sample(&spec, m.bg_domain, false, m.index + 1);
    let s = spec.image_size;
    let mc = glyph_coverage(&spec, sample_id(m.fg_domain, false, m.index)).map_err(err)?;
    let spread = blur(&mc.reshape(&[1, s, s]).map_err(err)?, &gaussian_kernel(7, 2.5).map_err(err)?).map_err(err)?;
    let md = spread.map(|v| (v * m.domain_weight).clamp(0.0, 1.0)).reshape(&[s, s]).map_err(err)?;
    let mask = merge_values(&mc, &md, m.threshold).map_err(err)?;
    let cfg = MixConfig {
        crop_area_ratio: m.crop_area_ratio,
        blur: m.blur,
        ..MixConfig::default()
    };
    cfg.validate().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ m.index as u64);
    let bg = make_background(&xj.image, &cfg, &mut rng).map_err(err)?;
    let mixed = mix_images(&xi.image, &mask, &bg).map_err(err)?;
    let grey = |t: &Tensor| -> Result<Tensor, String> {
        let d = t.data();
        Tensor::new(&[3, s, s], [d, d, d].concat()).map_err(err)
    };
    Ok(vec![xi.image, grey(&mask)?, bg, mixed])
}

#[derive(Debug, Serialize)]
pub struct TopologyState {
    pub centers: Vec<Vec<f64>>,
    pub anchors: Vec<Vec<f64>>,
    pub adjacency: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub weights: Vec<f64>,
    pub aggregated: Vec<f64>,
}

/// Two-dimensional toy topology: class centres on a circle, anchors started
/// at random and moved by `steps` moving-average updates towards noisy batch
/// means, then one query feature aggregated against the result.
pub fn topology(num_classes: usize, seed: u64, phi: f64, steps: usize, noise: f64, query: (f64, f64), query_class: usize) -> Result<TopologyState, String> {
    if num_classes < 2 || query_class >= num_classes {
        return Err(format!("need at least 2 classes and a query class below {num_classes}"));
    }
    if !(phi > 0.0 && phi <= 1.0) {
        return Err(format!("phi must be in (0,1], got {phi}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / num_classes as f64;
            vec![a.cos(), a.sin()]
        })
        .collect();
    let start: Vec<Vec<f64>> = (0..num_classes).map(|_| vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)]).collect();
    let mut topo = SemanticTopology::from_anchors(0, Tensor::from_rows(&start).map_err(|e| e.to_string())?);
    let classes: Vec<usize> = (0..num_classes).collect();
    let domains = vec![0; num_classes];
    for _ in 0..steps {
        let batch: Vec<Vec<f64>> = centers
            .iter()
            .map(|c| c.iter().map(|v| v + noise * rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let batch = Tensor::from_rows(&batch).map_err(|e| e.to_string())?;
        update_anchors(&mut topo, &batch, &classes, &domains, phi).map_err(|e| e.to_string())?;
    }
    let rows = |t: &Tensor| (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
    let (aggregated, weights) = aggregate_one(&[query.0, query.1], query_class, &topo, phi, true).map_err(|e| e.to_string())?;
    Ok(TopologyState {
        centers,
        anchors: rows(&topo.anchors),
        adjacency: rows(&topo.adjacency),
        sigma2: bandwidth(&topo.anchors),
        weights,
        aggregated,
    })
}

fn js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

#[wasm_bindgen]
pub fn render_sample(num_classes: usize, num_domains: usize, image_size: usize, rho: f64, seed: u64, domain: usize, held_out: bool, index: usize) -> Result<Vec<u8>, JsValue> {
    let p = Params { num_classes, num_domains, image_size, rho, seed };
    let (img, _) = sample(p, domain, held_out, index).map_err(js)?;
    to_rgba(&img).map_err(js)
}

#[wasm_bindgen]
pub fn sample_info(num_classes: usize, num_domains: usize, image_size: usize, rho: f64, seed: u64, domain: usize, held_out: bool, index: usize) -> Result<String, JsValue> {
    let p = Params { num_classes, num_domains, image_size, rho, seed };
    let (_, info) = sample(p, domain, held_out, index).map_err(js)?;
    serde_json::to_string(&info).map_err(|e| js(e.to_string()))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn render_mix(
    num_classes: usize,
    num_domains: usize,
    image_size: usize,
    rho: f64,
    seed: u64,
    fg_domain: usize,
    bg_domain: usize,
    index: usize,
    threshold: f64,
    crop_area_ratio: f64,
    blur: bool,
    domain_weight: f64,
) -> Result<Vec<u8>, JsValue> {
    let p = Params { num_classes, num_domains, image_size, rho, seed };
    let m = MixParams { fg_domain, bg_domain, index, threshold, crop_area_ratio, blur, domain_weight };
    let panels = mix_panels(p, m).map_err(js)?;
    strip(&panels).map_err(js)
}

#[wasm_bindgen]
pub fn topology_json(num_classes: usize, seed: u64, phi: f64, steps: usize, noise: f64, qx: f64, qy: f64, query_class: usize) -> Result<String, JsValue> {
    let t = topology(num_classes, seed, phi, steps, noise, (qx, qy), query_class).map_err(js)?;
    serde_json::to_string(&t).map_err(|e| js(e.to_string()))
}
