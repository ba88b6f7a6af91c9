//! Synthetic multi-domain image benchmark.
//!
//! Each sample is a class glyph (shape) drawn over a domain-styled
//! background. Source samples carry a spurious cue: with probability `rho`
//! the background hue is the hue slot of the class, otherwise a uniform slot.
//! Every domain also gets a held-out set drawn with `rho = 0`, used when that
//! domain is the unseen target.
//!
//! Labels are 0-based: `y` in `0..K`, `d` in `0..N`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MireError, Result};
use crate::tensor::{read_snapshot_at, write_snapshot, Cursor, Tensor};

pub const SHARD_MAGIC: &[u8; 4] = b"MIRD";
pub const SHARD_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "mire-dataset";
pub const VAL_FRACTION: f64 = 0.1;

pub const GLYPHS: [Glyph; 8] = [
    Glyph::Disc,
    Glyph::Cross,
    Glyph::Triangle,
    Glyph::Ring,
    Glyph::Star,
    Glyph::Square,
    Glyph::Pentagon,
    Glyph::Hexagon,
];

pub const TEXTURES: [Texture; 4] = [Texture::Flat, Texture::Stripes, Texture::Checker, Texture::Noise];

/// Most domains a spec may request (texture family x two palettes).
pub const MAX_DOMAINS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_domain: usize,
    pub image_size: usize,
    pub spurious_strength: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 5,
            num_domains: 4,
            samples_per_domain: 600,
            image_size: 32,
            spurious_strength: 0.9,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=GLYPHS.len()).contains(&self.num_classes) {
            return Err(MireError::config(format!(
                "num_classes must be in 2..={}, got {}",
                GLYPHS.len(),
                self.num_classes
            )));
        }
        if !(2..=MAX_DOMAINS).contains(&self.num_domains) {
            return Err(MireError::config(format!(
                "num_domains must be in 2..={MAX_DOMAINS}, got {}",
                self.num_domains
            )));
        }
        if self.samples_per_domain == 0 {
            return Err(MireError::config("samples_per_domain must be >= 1"));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(MireError::config(format!(
                "image_size must be a multiple of 4 and >= 8, got {}",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return Err(MireError::config(format!(
                "spurious_strength must be in [0,1], got {}",
                self.spurious_strength
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Glyph {
    Triangle,
    Square,
    Pentagon,
    Star,
    Disc,
    Cross,
    Hexagon,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    Flat,
    Stripes,
    Checker,
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    /// Held-out samples (`rho = 0`), used only when the domain is the target.
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(tag: u8, offset: u64) -> Result<Self> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(MireError::Format {
                offset,
                detail: format!("unknown split tag {tag}"),
            }),
        }
    }
}

/// Where a mixed image came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub fg_id: u64,
    pub bg_id: u64,
    pub bg_domain: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    pub y: usize,
    pub d: usize,
    pub split: Split,
    pub provenance: Option<Provenance>,
}

/// Latent attributes of one generated sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMeta {
    pub y: usize,
    pub hue_slot: usize,
    pub glyph: Glyph,
    pub center: (f64, f64),
    pub radius: f64,
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub domain: usize,
    pub samples: Vec<LabeledSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub spec: DatasetSpec,
    pub domains: Vec<DomainData>,
}

/// Sample ids: domain in the high bits, a held-out flag, then the index.
pub fn sample_id(domain: usize, held_out: bool, index: usize) -> u64 {
    ((domain as u64) << 40) | ((held_out as u64) << 39) | index as u64
}

/// First id used for mixed samples; never collides with [`sample_id`].
pub const MIXED_ID_BASE: u64 = 1 << 60;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Well-mixed seed for `(seed, stream, id)`.
pub fn derive_seed(seed: u64, stream: u64, id: u64) -> u64 {
    mix64(mix64(seed ^ mix64(stream)) ^ id)
}

/// Independent RNG stream for `(seed, stream, id)`.
pub fn derived_rng(seed: u64, stream: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, id))
}

pub fn glyph_for_class(y: usize) -> Glyph {
    GLYPHS[y % GLYPHS.len()]
}

pub fn texture_for_domain(d: usize) -> Texture {
    TEXTURES[d % TEXTURES.len()]
}

/// Saturation and value of a domain's background.
fn palette(d: usize) -> (f64, f64) {
    const SAT: [f64; 8] = [0.22, 0.32, 0.18, 0.28, 0.36, 0.24, 0.3, 0.2];
    const VAL: [f64; 8] = [0.6, 0.45, 0.525, 0.675, 0.5625, 0.4125, 0.6375, 0.4875];
    (SAT[d % 8], VAL[d % 8])
}

/// Fraction of the colour wheel spanned by the class background hues.
pub const HUE_SPAN: f64 = 0.15;

/// Saturation of the per-domain glyph tint.
const GLYPH_SAT: f64 = 0.2;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn polygon(n: usize, inner: Option<f64>) -> Vec<(f64, f64)> {
    let verts = if inner.is_some() { 2 * n } else { n };
    (0..verts)
        .map(|i| {
            let r = match inner {
                Some(ri) if i % 2 == 1 => ri,
                _ => 1.0,
            };
            let a = 2.0 * PI * i as f64 / verts as f64 - PI / 2.0;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn point_in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Membership test in the glyph's unit frame.
fn glyph_contains(glyph: Glyph, p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    match glyph {
        Glyph::Disc => p.0 * p.0 + p.1 * p.1 <= 0.81,
        Glyph::Ring => (0.3025..=0.9025).contains(&(p.0 * p.0 + p.1 * p.1)),
        Glyph::Cross => (p.0.abs() <= 0.3 && p.1.abs() <= 1.0) || (p.1.abs() <= 0.3 && p.0.abs() <= 1.0),
        _ => point_in_polygon(p, poly),
    }
}

fn glyph_polygon(glyph: Glyph) -> Vec<(f64, f64)> {
    match glyph {
        Glyph::Triangle => polygon(3, None),
        Glyph::Square => polygon(4, None),
        Glyph::Pentagon => polygon(5, None),
        Glyph::Hexagon => polygon(6, None),
        Glyph::Star => polygon(5, Some(0.45)),
        Glyph::Disc | Glyph::Cross | Glyph::Ring => Vec::new(),
    }
}

/// Draws the latent attributes of sample `index` of domain `d`. The same RNG
/// stream continues into [`render`], so call order matters.
fn draw_meta(spec: &DatasetSpec, rng: &mut ChaCha8Rng, index: usize, rho: f64) -> SampleMeta {
    let k = spec.num_classes;
    let y = index % k;
    let hue_slot = if rng.gen::<f64>() < rho { y } else { rng.gen_range(0..k) };
    let s = spec.image_size as f64;
    let radius = rng.gen_range(0.22 * s..0.34 * s);
    let margin = radius + 1.0;
    let center = (rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin));
    let angle = rng.gen_range(0.0..2.0 * PI);
    SampleMeta {
        y,
        hue_slot,
        glyph: glyph_for_class(y),
        center,
        radius,
        angle,
    }
}

/// Fraction of each pixel covered by the glyph, from 3x3 supersampling.
fn coverage(spec: &DatasetSpec, meta: &SampleMeta) -> Vec<f64> {
    let s = spec.image_size;
    let poly = glyph_polygon(meta.glyph);
    let (ca, sa) = (meta.angle.cos(), meta.angle.sin());
    const SUB: usize = 3;
    let mut cover = vec![0.0; s * s];
    for r in 0..s {
        for col in 0..s {
            let mut hits = 0;
            for sr in 0..SUB {
                for sc in 0..SUB {
                    let px = col as f64 + (sc as f64 + 0.5) / SUB as f64 - meta.center.0;
                    let py = r as f64 + (sr as f64 + 0.5) / SUB as f64 - meta.center.1;
                    // Rotate into the glyph frame and scale to unit radius.
                    let u = (ca * px + sa * py) / meta.radius;
                    let v = (-sa * px + ca * py) / meta.radius;
                    if glyph_contains(meta.glyph, (u, v), &poly) {
                        hits += 1;
                    }
                }
            }
            cover[r * s + col] = hits as f64 / (SUB * SUB) as f64;
        }
    }
    cover
}

/// Glyph coverage `[S, S]` of a generated (not mixed) sample id.
pub fn glyph_coverage(spec: &DatasetSpec, id: u64) -> Result<Tensor> {
    if id >= MIXED_ID_BASE {
        return Err(MireError::contract(format!("sample {id} is a mixed image")));
    }
    let d = (id >> 40) as usize;
    let held_out = (id >> 39) & 1 == 1;
    let index = (id & ((1 << 39) - 1)) as usize;
    if d >= spec.num_domains || index >= spec.samples_per_domain {
        return Err(MireError::contract(format!("sample id {id} is outside the spec")));
    }
    let meta = sample_meta(spec, d, held_out, index);
    Tensor::new(&[spec.image_size, spec.image_size], coverage(spec, &meta))
}

fn render(spec: &DatasetSpec, d: usize, meta: &SampleMeta, rng: &mut ChaCha8Rng) -> Tensor {
    let s = spec.image_size;
    let k = spec.num_classes as f64;
    let hue = HUE_SPAN * ((meta.hue_slot as f64 + 0.5) / k + rng.gen_range(-0.15..0.15) / k);
    let (sat, val) = palette(d);
    let base = hsv_to_rgb(hue, sat, val);

    // Per-pixel background shading factor from the domain texture.
    let mut shade = vec![1.0; s * s];
    match texture_for_domain(d) {
        Texture::Flat => {}
        Texture::Stripes => {
            let period = rng.gen_range(4.0..8.0);
            let theta = rng.gen_range(0.0..PI);
            let phase = rng.gen_range(0.0..period);
            let (c, sn) = (theta.cos(), theta.sin());
            for r in 0..s {
                for col in 0..s {
                    let u = (col as f64 * c + r as f64 * sn + phase).rem_euclid(period);
                    if u < period / 2.0 {
                        shade[r * s + col] = 0.6;
                    }
                }
            }
        }
        Texture::Checker => {
            let cell = rng.gen_range(3..7);
            let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            for r in 0..s {
                for col in 0..s {
                    if ((r + oy) / cell + (col + ox) / cell) % 2 == 1 {
                        shade[r * s + col] = 0.55;
                    }
                }
            }
        }
        Texture::Noise => {
            for v in shade.iter_mut() {
                *v = rng.gen_range(0.5..1.0);
            }
        }
    }

    // Glyphs are always bright, tinted towards a domain-specific hue.
    let tint = hsv_to_rgb(d as f64 / spec.num_domains as f64 + 0.08, GLYPH_SAT, rng.gen_range(0.9..1.0));
    let cover = coverage(spec, meta);
    let mut data = vec![0.0; 3 * s * s];
    for (p, &c) in cover.iter().enumerate() {
        for ch in 0..3 {
            let bg = base[ch] * shade[p];
            data[ch * s * s + p] = (c * tint[ch] + (1.0 - c) * bg).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, s, s], data).expect("image shape")
}

/// Attributes of one sample without rendering it.
pub fn sample_meta(spec: &DatasetSpec, d: usize, held_out: bool, index: usize) -> SampleMeta {
    let rho = if held_out { 0.0 } else { spec.spurious_strength };
    let mut rng = derived_rng(spec.seed, d as u64, sample_id(d, held_out, index));
    draw_meta(spec, &mut rng, index, rho)
}

/// Renders one sample; the split is filled in by the caller.
pub fn generate_sample(spec: &DatasetSpec, d: usize, held_out: bool, index: usize) -> (LabeledSample, SampleMeta) {
    let rho = if held_out { 0.0 } else { spec.spurious_strength };
    let id = sample_id(d, held_out, index);
    let mut rng = derived_rng(spec.seed, d as u64, id);
    let meta = draw_meta(spec, &mut rng, index, rho);
    let image = render(spec, d, &meta, &mut rng);
    let sample = LabeledSample {
        id,
        image,
        y: meta.y,
        d,
        split: if held_out { Split::Test } else { Split::Train },
        provenance: None,
    };
    (sample, meta)
}

/// Generates the full bundle: per domain, `samples_per_domain` source
/// samples (90/10 train/val) and as many held-out samples.
pub fn generate(spec: &DatasetSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let n = spec.samples_per_domain;
    let domains = (0..spec.num_domains)
        .map(|d| {
            let mut samples: Vec<LabeledSample> = (0..2 * n)
                .into_par_iter()
                .map(|i| generate_sample(spec, d, i >= n, i % n).0)
                .collect();
            for idx in val_indices(spec.seed, d, n) {
                samples[idx].split = Split::Val;
            }
            DomainData { domain: d, samples }
        })
        .collect();
    Ok(DatasetBundle {
        spec: spec.clone(),
        domains,
    })
}

/// Seeded 10% validation subset of the `n` source samples of domain `d`.
pub fn val_indices(seed: u64, d: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, 0x5EED_0000 + d as u64, 0));
    let n_val = (n as f64 * VAL_FRACTION).round() as usize;
    let mut v = idx[..n_val].to_vec();
    v.sort_unstable();
    v
}

impl DatasetBundle {
    pub fn domain(&self, d: usize) -> Result<&DomainData> {
        self.domains
            .iter()
            .find(|x| x.domain == d)
            .ok_or_else(|| MireError::contract(format!("bundle has no domain {d}")))
    }

    pub fn num_samples(&self) -> usize {
        self.domains.iter().map(|d| d.samples.len()).sum()
    }

    /// Samples of the given domains and split, in bundle order.
    pub fn select(&self, domains: &[usize], split: Split) -> Vec<&LabeledSample> {
        self.domains
            .iter()
            .filter(|dd| domains.contains(&dd.domain))
            .flat_map(|dd| dd.samples.iter().filter(|s| s.split == split))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for dd in &self.domains {
            let file = format!("domain_{}.mird", dd.domain);
            let bytes = encode_shard(dd)?;
            fs::write(dir.join(&file), bytes)?;
            entries.push(ShardEntry {
                domain: dd.domain,
                file,
                count: dd.samples.len(),
                splits: split_counts(&dd.samples),
                mixed: dd.samples.iter().filter(|s| s.provenance.is_some()).count(),
            });
        }
        let manifest = DatasetManifest {
            format: MANIFEST_FORMAT.into(),
            version: SHARD_VERSION,
            spec: self.spec.clone(),
            shards: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != SHARD_VERSION {
            return Err(MireError::Format {
                offset: 0,
                detail: format!("unsupported dataset {} v{}", manifest.format, manifest.version),
            });
        }
        manifest.spec.validate()?;
        let mut domains = Vec::new();
        for e in &manifest.shards {
            let bytes = fs::read(dir.join(&e.file))?;
            let dd = decode_shard(&bytes)?;
            if dd.domain != e.domain {
                return Err(MireError::Consistency(format!(
                    "{}: manifest says domain {}, shard holds {}",
                    e.file, e.domain, dd.domain
                )));
            }
            if dd.samples.len() != e.count || split_counts(&dd.samples) != e.splits {
                return Err(MireError::Consistency(format!(
                    "{}: manifest lists {} samples {:?}, shard holds {} {:?}",
                    e.file,
                    e.count,
                    e.splits,
                    dd.samples.len(),
                    split_counts(&dd.samples)
                )));
            }
            if dd.domain >= manifest.spec.num_domains {
                return Err(MireError::Consistency(format!(
                    "shard domain {} outside spec with {} domains",
                    dd.domain, manifest.spec.num_domains
                )));
            }
            domains.push(dd);
        }
        Ok(DatasetBundle {
            spec: manifest.spec,
            domains,
        })
    }
}

fn split_counts(samples: &[LabeledSample]) -> BTreeMap<Split, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry(s.split).or_insert(0) += 1;
    }
    m
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShardEntry {
    domain: usize,
    file: String,
    count: usize,
    splits: BTreeMap<Split, usize>,
    mixed: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    version: u32,
    spec: DatasetSpec,
    shards: Vec<ShardEntry>,
}

/// Shard layout (little-endian): magic, `u32` version, `u32` domain, `u64`
/// count, `count` label records, then `count` tensor snapshots.
///
/// Label record: `u64` id, `u32` y, `u32` d, `u8` split, `u8` has-provenance,
/// `u64` fg id, `u64` bg id, `u32` bg domain (41 bytes).
pub fn encode_shard(dd: &DomainData) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    out.extend_from_slice(&(dd.domain as u32).to_le_bytes());
    out.extend_from_slice(&(dd.samples.len() as u64).to_le_bytes());
    for s in &dd.samples {
        out.extend_from_slice(&s.id.to_le_bytes());
        out.extend_from_slice(&(s.y as u32).to_le_bytes());
        out.extend_from_slice(&(s.d as u32).to_le_bytes());
        out.push(s.split.tag());
        let p = s.provenance.unwrap_or(Provenance {
            fg_id: 0,
            bg_id: 0,
            bg_domain: 0,
        });
        out.push(s.provenance.is_some() as u8);
        out.extend_from_slice(&p.fg_id.to_le_bytes());
        out.extend_from_slice(&p.bg_id.to_le_bytes());
        out.extend_from_slice(&(p.bg_domain as u32).to_le_bytes());
    }
    for s in &dd.samples {
        write_snapshot(&mut out, &s.image)?;
    }
    Ok(out)
}

pub fn decode_shard(bytes: &[u8]) -> Result<DomainData> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != SHARD_MAGIC {
        return Err(MireError::Format {
            offset: 0,
            detail: format!("bad shard magic {magic:?}"),
        });
    }
    let version = cur.u32()?;
    if version != SHARD_VERSION {
        return Err(MireError::Format {
            offset: 4,
            detail: format!("unsupported shard version {version}"),
        });
    }
    let domain = cur.u32()? as usize;
    let count = cur.u64()? as usize;
    let mut labels = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id = cur.u64()?;
        let y = cur.u32()? as usize;
        let d = cur.u32()? as usize;
        let split_at = cur.pos;
        let split = Split::from_tag(cur.u8()?, split_at)?;
        let has_prov = cur.u8()? != 0;
        let fg_id = cur.u64()?;
        let bg_id = cur.u64()?;
        let bg_domain = cur.u32()? as usize;
        if d != domain {
            return Err(MireError::Consistency(format!(
                "sample {id} has domain {d} inside shard of domain {domain}"
            )));
        }
        labels.push((id, y, d, split, has_prov.then_some(Provenance { fg_id, bg_id, bg_domain })));
    }
    let mut samples = Vec::with_capacity(labels.len());
    for (id, y, d, split, provenance) in labels {
        let (image, end) = read_snapshot_at(bytes, cur.pos)?;
        cur.pos = end;
        samples.push(LabeledSample {
            id,
            image,
            y,
            d,
            split,
            provenance,
        });
    }
    if cur.pos as usize != bytes.len() {
        return Err(MireError::Format {
            offset: cur.pos,
            detail: "trailing bytes after last sample".into(),
        });
    }
    Ok(DomainData { domain, samples })
}

/// Stratified epoch order: each domain's items are shuffled, then taken
/// round-robin in domain order, so with equal domain sizes every window of
/// `num_domains` consecutive positions holds one item per domain.
///
/// `domain_of[i]` is the domain of item `i`; the result is a permutation of
/// `0..domain_of.len()`.
pub fn stratified_order(domain_of: &[usize], seed: u64, epoch: u64) -> Result<Vec<usize>> {
    if domain_of.is_empty() {
        return Err(MireError::contract("batches: empty split"));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &d) in domain_of.iter().enumerate() {
        groups.entry(d).or_default().push(i);
    }
    let mut rng = derived_rng(seed, 0xBA7C_0000, epoch);
    let mut lists: Vec<Vec<usize>> = groups.into_values().collect();
    for l in lists.iter_mut() {
        l.shuffle(&mut rng);
    }
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(domain_of.len());
    for r in 0..longest {
        for l in &lists {
            if let Some(&i) = l.get(r) {
                order.push(i);
            }
        }
    }
    Ok(order)
}

/// One epoch of batches over items with the given domains; the last batch
/// may be short.
pub fn epoch_batches(domain_of: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(MireError::contract("batches: batch_size must be >= 1"));
    }
    Ok(stratified_order(domain_of, seed, epoch)?
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Endless stream of full batches that walks through consecutive stratified
/// epochs. Used when the step budget is decoupled from the pool size.
#[derive(Clone, Debug)]
pub struct BatchStream {
    domain_of: Vec<usize>,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(domain_of: Vec<usize>, seed: u64) -> Result<Self> {
        let order = stratified_order(&domain_of, seed, 0)?;
        Ok(BatchStream {
            domain_of,
            seed,
            epoch: 0,
            order,
            pos: 0,
        })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(MireError::contract("batches: batch_size must be >= 1"));
        }
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.order = stratified_order(&self.domain_of, self.seed, self.epoch)?;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        Ok(out)
    }
}

/// Stacks the images of `samples` at `idx` into `[B, 3, S, S]`.
pub fn stack_images(samples: &[&LabeledSample], idx: &[usize]) -> Result<Tensor> {
    let imgs: Vec<&Tensor> = idx.iter().map(|&i| &samples[i].image).collect();
    Tensor::stack(&imgs)
}
