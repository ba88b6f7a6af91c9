//! Encoder, classifier heads, and the bipartite graph-convolution stack.
//!
//! All trainable weights of one model live in a single [`ParamStore`] so the
//! optimizer, checkpointing, and cloning treat them uniformly. Layers only
//! hold [`ParamId`]s.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MireError, Result};
use crate::tensor::{read_snapshot_at, write_snapshot, Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Tolerance for the adjacency symmetry check in [`BgcnStack::forward`].
pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub channels: [usize; 3],
    pub feature_dim: usize,
    pub num_classes: usize,
    /// `None` builds no domain head.
    pub num_domains: Option<usize>,
    pub bgcn_layers: usize,
}

impl NetConfig {
    pub fn new(num_classes: usize, num_domains: Option<usize>) -> Self {
        NetConfig {
            in_channels: 3,
            channels: [8, 16, 32],
            feature_dim: 64,
            num_classes,
            num_domains,
            bgcn_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 || self.feature_dim < 1 || self.bgcn_layers < 1 {
            return Err(MireError::config(format!(
                "net config needs num_classes, feature_dim, bgcn_layers >= 1: {self:?}"
            )));
        }
        if let Some(n) = self.num_domains {
            if n < 2 {
                return Err(MireError::config(format!(
                    "domain head needs at least 2 domains, got {n}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Class,
    Domain,
}

/// Kaiming-uniform (fan-in) weights.
fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape")
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: store.register(format!("{name}.weight"), kaiming(rng, &[d_in, d_out], d_in)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.var(self.weight))?;
        tape.add_row(h, bound.var(self.bias))
    }
}

/// Three conv blocks with max pooling after the first two, global average
/// pooling, and a linear projection to the feature dimension.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub convs: [ConvLayer; 3],
    pub proj: Linear,
    pub in_channels: usize,
    pub feature_dim: usize,
}

/// Encoder outputs, including the spatial map Grad-CAM reads.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub features: Var,
    /// Post-ReLU output of the penultimate conv layer, `[B, C, H/2, W/2]`.
    pub cam_activation: Var,
}

impl EncoderNet {
    fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Self {
        let mut c_in = cfg.in_channels;
        let convs = std::array::from_fn(|i| {
            let c_out = cfg.channels[i];
            let fan_in = c_in * 9;
            let layer = ConvLayer {
                weight: store.register(format!("encoder.conv{}.weight", i + 1), kaiming(rng, &[c_out, c_in, 3, 3], fan_in)),
                bias: store.register(format!("encoder.conv{}.bias", i + 1), Tensor::zeros(&[c_out])),
            };
            c_in = c_out;
            layer
        });
        let proj = Linear::register(store, rng, "encoder.proj", cfg.channels[2], cfg.feature_dim);
        EncoderNet {
            convs,
            proj,
            in_channels: cfg.in_channels,
            feature_dim: cfg.feature_dim,
        }
    }

    pub fn encode(&self, tape: &Tape, bound: &Bound, images: Var) -> Result<Encoded> {
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(MireError::shape(
                "encode",
                format!("expected [B,{},H,W], got {shape:?}", self.in_channels),
            ));
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(MireError::shape("encode", format!("spatial size must be divisible by 4, got {shape:?}")));
        }
        let conv = |x: Var, l: &ConvLayer| -> Result<Var> {
            let h = tape.conv2d(x, bound.var(l.weight), bound.var(l.bias), 1, 1)?;
            tape.relu(h)
        };
        // Centre pixel values around zero.
        let images = tape.add_scalar(images, -0.5)?;
        let h1 = tape.maxpool2(conv(images, &self.convs[0])?)?;
        let cam_activation = conv(h1, &self.convs[1])?;
        let h2 = tape.maxpool2(cam_activation)?;
        let h3 = conv(h2, &self.convs[2])?;
        let pooled = tape.global_avg_pool(h3)?;
        let features = self.proj.forward(tape, bound, pooled)?;
        Ok(Encoded {
            features,
            cam_activation,
        })
    }
}

/// Linear map from features to class or domain logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub linear: Linear,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ClassifierHead {
    fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, out: usize) -> Self {
        ClassifierHead {
            linear: Linear::register(store, rng, name, d, out),
            in_dim: d,
            out_dim: out,
        }
    }

    pub fn classify(&self, tape: &Tape, bound: &Bound, features: Var) -> Result<Var> {
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(MireError::shape(
                "classify",
                format!("head expects [B,{}], got {shape:?}", self.in_dim),
            ));
        }
        self.linear.forward(tape, bound, features)
    }
}

/// Stacked graph convolutions `H <- act(norm(A) H W)` over a bipartite
/// anchor graph; ReLU between layers, identity after the last.
#[derive(Clone, Debug)]
pub struct BgcnStack {
    pub layers: Vec<ParamId>,
    pub dim: usize,
}

impl BgcnStack {
    fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize, layers: usize) -> Self {
        BgcnStack {
            layers: (0..layers)
                .map(|l| store.register(format!("bgcn.layer{}.weight", l + 1), kaiming(rng, &[dim, dim], dim)))
                .collect(),
            dim,
        }
    }

    /// `adjacency` is the raw (un-normalized) block matrix; self-loops and
    /// symmetric normalization are applied here.
    pub fn forward(&self, tape: &Tape, bound: &Bound, node_feats: Var, adjacency: Var) -> Result<Var> {
        let layers: Vec<Var> = self.layers.iter().map(|&id| bound.var(id)).collect();
        bgcn_propagate(tape, node_feats, adjacency, &layers)
    }
}

/// Graph-convolution propagation with explicit layer weights. Also used with
/// non-parameter weights in tests.
pub fn bgcn_propagate(tape: &Tape, node_feats: Var, adjacency: Var, layers: &[Var]) -> Result<Var> {
    if layers.is_empty() {
        return Err(MireError::contract("bgcn: need at least one layer"));
    }
    {
        let a = tape.value_ref(adjacency);
        let hs = tape.shape(node_feats);
        if a.rank() != 2 || a.rows() != a.cols() || hs.len() != 2 || hs[0] != a.rows() {
            return Err(MireError::shape(
                "bgcn_forward",
                format!("node features {hs:?} vs adjacency {:?}", a.shape()),
            ));
        }
        let n = a.rows();
        for i in 0..n {
            for j in 0..i {
                if (a.at2(i, j) - a.at2(j, i)).abs() > SYMMETRY_TOL {
                    return Err(MireError::contract(format!(
                        "bgcn_forward: adjacency not symmetric at ({i},{j}): {} vs {}",
                        a.at2(i, j),
                        a.at2(j, i)
                    )));
                }
            }
        }
    }
    let norm = tape.sym_normalize(adjacency)?;
    let mut h = node_feats;
    for (l, &w) in layers.iter().enumerate() {
        let hw = tape.matmul(h, w)?;
        h = tape.matmul(norm, hw)?;
        if l + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// One model: shared encoder, class head, optional domain head, BGCN stack.
#[derive(Clone, Debug)]
pub struct MireNets {
    pub config: NetConfig,
    pub store: ParamStore,
    pub encoder: EncoderNet,
    pub class_head: ClassifierHead,
    pub domain_head: Option<ClassifierHead>,
    pub bgcn: BgcnStack,
}

impl MireNets {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderNet::register(&mut store, &mut rng, &config);
        let class_head = ClassifierHead::register(&mut store, &mut rng, "class_head", config.feature_dim, config.num_classes);
        let domain_head = config
            .num_domains
            .map(|n| ClassifierHead::register(&mut store, &mut rng, "domain_head", config.feature_dim, n));
        let bgcn = BgcnStack::register(&mut store, &mut rng, config.feature_dim, config.bgcn_layers);
        Ok(MireNets {
            config,
            store,
            encoder,
            class_head,
            domain_head,
            bgcn,
        })
    }

    pub fn head(&self, kind: HeadKind) -> Result<&ClassifierHead> {
        match kind {
            HeadKind::Class => Ok(&self.class_head),
            HeadKind::Domain => self
                .domain_head
                .as_ref()
                .ok_or_else(|| MireError::contract("model has no domain head")),
        }
    }

    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> Bound {
        self.store.bind(tape, requires_grad)
    }

    /// Forward-only features for a batch of images.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(images.clone());
        let enc = self.encoder.encode(&tape, &bound, x)?;
        Ok(tape.value(enc.features))
    }

    /// Forward-only logits of one head.
    pub fn logits(&self, images: &Tensor, kind: HeadKind) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(images.clone());
        let enc = self.encoder.encode(&tape, &bound, x)?;
        let out = self.head(kind)?.classify(&tape, &bound, enc.features)?;
        Ok(tape.value(out))
    }

    /// Copies encoder and class-head weights from `other` (same config).
    pub fn copy_backbone_from(&mut self, other: &MireNets) -> Result<()> {
        for p in other.store.iter() {
            if p.name.starts_with("encoder.") || p.name.starts_with("class_head.") {
                let id = self
                    .store
                    .find(&p.name)
                    .ok_or_else(|| MireError::contract(format!("missing parameter {}", p.name)))?;
                if self.store.value(id).shape() != p.value.shape() {
                    return Err(MireError::shape("copy_backbone_from", p.name.clone()));
                }
                self.store.get_mut(id).value = p.value.clone();
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = BTreeMap::new();
        for p in self.store.iter() {
            let offset = blob.len() as u64;
            write_snapshot(&mut blob, &p.value)?;
            entries.insert(
                p.name.clone(),
                ManifestEntry {
                    shape: p.value.shape().to_vec(),
                    offset,
                },
            );
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: entries,
        };
        fs::File::create(dir.join("params.bin"))?.write_all(&blob)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
            return Err(MireError::Format {
                offset: 0,
                detail: format!("unsupported checkpoint {} v{}", manifest.format, manifest.version),
            });
        }
        let blob = fs::read(dir.join("params.bin"))?;
        let mut nets = MireNets::new(manifest.config.clone(), 0)?;
        if manifest.params.len() != nets.store.len() {
            return Err(MireError::Consistency(format!(
                "checkpoint lists {} parameters, model has {}",
                manifest.params.len(),
                nets.store.len()
            )));
        }
        for p in nets.store.iter_mut() {
            let entry = manifest
                .params
                .get(&p.name)
                .ok_or_else(|| MireError::Consistency(format!("checkpoint lacks parameter {}", p.name)))?;
            let (t, _) = read_snapshot_at(&blob, entry.offset)?;
            if t.shape() != entry.shape.as_slice() || t.shape() != p.value.shape() {
                return Err(MireError::Consistency(format!(
                    "parameter {}: manifest {:?}, payload {:?}, model {:?}",
                    p.name,
                    entry.shape,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(nets)
    }
}

const CHECKPOINT_FORMAT: &str = "mire-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    version: u32,
    config: NetConfig,
    params: BTreeMap<String, ManifestEntry>,
}
