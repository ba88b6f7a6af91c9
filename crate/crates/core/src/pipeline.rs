//! Training protocol and leave-one-domain-out evaluation.
//!
//! One fold (held-out target domain, seed) runs four phases:
//!
//! 0. pretrain an encoder with class and domain heads on the original data;
//! 1. mix the training images using that model's activation maps;
//! 2. train a fresh model with cross-entropy on the (mixed) pool and build
//!    the initial per-domain topologies from it;
//! 3. continue from phase 2 with the full objective (or plain cross-entropy
//!    for the baselines), selecting the epoch with the best validation
//!    accuracy.
//!
//! Every phase draws a fixed number of batches per epoch, so all variants
//! get the same gradient-step budget regardless of pool size.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::astr::{aggregate, astr_loss, compose_anchors, init_topology, save_topologies, AstrConfig, AstrFlags, SemanticTopology};
use crate::cdm::{augment_dataset, MaskRule, MixConfig};
use crate::error::{MireError, Result};
use crate::nets::{HeadKind, MireNets, NetConfig};
use crate::saliency::{foreground_mass, ForegroundMask, SaliencyConfig};
use crate::synthdata::{derive_seed, glyph_coverage, BatchStream, DatasetBundle, DatasetSpec, LabeledSample, Split};
use crate::tensor::{Bound, SgdState, Tape, Tensor, Var};

/// Ablation switches; all `false` is the full method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_cdm: bool,
    pub no_mc: bool,
    pub no_md: bool,
    pub no_blur: bool,
    pub invert_md: bool,
    pub no_astr: bool,
    pub no_cross_domain: bool,
    pub no_cross_model: bool,
    pub no_graph_structure: bool,
    pub no_feature_aggregation: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 10] = [
        "no_cdm",
        "no_mc",
        "no_md",
        "no_blur",
        "invert_md",
        "no_astr",
        "no_cross_domain",
        "no_cross_model",
        "no_graph_structure",
        "no_feature_aggregation",
    ];

    fn as_array(&self) -> [bool; 10] {
        [
            self.no_cdm,
            self.no_mc,
            self.no_md,
            self.no_blur,
            self.invert_md,
            self.no_astr,
            self.no_cross_domain,
            self.no_cross_model,
            self.no_graph_structure,
            self.no_feature_aggregation,
        ]
    }

    pub fn set(&mut self, name: &str) -> Result<()> {
        let slot = match name {
            "no_cdm" => &mut self.no_cdm,
            "no_mc" => &mut self.no_mc,
            "no_md" => &mut self.no_md,
            "no_blur" => &mut self.no_blur,
            "invert_md" => &mut self.invert_md,
            "no_astr" => &mut self.no_astr,
            "no_cross_domain" => &mut self.no_cross_domain,
            "no_cross_model" => &mut self.no_cross_model,
            "no_graph_structure" => &mut self.no_graph_structure,
            "no_feature_aggregation" => &mut self.no_feature_aggregation,
            other => return Err(MireError::config(format!("unknown ablation flag `{other}`"))),
        };
        *slot = true;
        Ok(())
    }

    pub fn single(name: &str) -> Result<Self> {
        let mut f = AblationFlags::default();
        f.set(name)?;
        Ok(f)
    }

    /// Names of the flags that are set.
    pub fn active(&self) -> Vec<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.as_array())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn pool(&self) -> PoolKind {
        if self.no_cdm {
            PoolKind::Original
        } else {
            PoolKind::Mixed {
                rule: MaskRule {
                    no_mc: self.no_mc,
                    no_md: self.no_md,
                    invert_md: self.invert_md,
                },
                blur: !self.no_blur,
            }
        }
    }

    /// `None` means plain cross-entropy in phase 3.
    pub fn astr(&self) -> Option<AstrFlags> {
        (!self.no_astr).then_some(AstrFlags {
            no_cross_domain: self.no_cross_domain,
            no_cross_model: self.no_cross_model,
            no_graph_structure: self.no_graph_structure,
            no_feature_aggregation: self.no_feature_aggregation,
        })
    }
}

/// All training hyperparameters. Defaults are the desk-scale protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total epochs of the final model (phase 2 + phase 3).
    pub epochs: usize,
    /// Epochs of the phase-0 model that feeds the activation maps.
    pub pretrain_epochs: usize,
    /// Epochs of plain cross-entropy training in phase 2.
    pub deepall_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub phi: f64,
    pub lambda: f64,
    pub xi: f64,
    pub threshold: f64,
    pub crop_area_ratio: f64,
    pub blur_size: usize,
    pub blur_sigma: f64,
    pub feature_dim: usize,
    /// Held-out domains to evaluate; `None` means every domain.
    pub targets: Option<Vec<usize>>,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            pretrain_epochs: 5,
            deepall_epochs: 10,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            seeds: (1..=5).collect(),
            phi: 0.5,
            lambda: 0.1,
            xi: 2.0,
            threshold: 0.2,
            crop_area_ratio: 1.0 / 8.0,
            blur_size: 5,
            blur_sigma: 1.5,
            feature_dim: 64,
            targets: None,
            flags: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    /// 100 epochs and 10 seeds; phase 2 keeps its third of the budget.
    pub fn paper_scale() -> Self {
        TrainConfig {
            epochs: 100,
            deepall_epochs: 33,
            seeds: (1..=10).collect(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.deepall_epochs == 0 || self.epochs <= self.deepall_epochs {
            return Err(MireError::config(format!(
                "epochs ({}) must exceed deepall_epochs ({}) >= 1",
                self.epochs, self.deepall_epochs
            )));
        }
        if self.pretrain_epochs == 0 {
            return Err(MireError::config("pretrain_epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(MireError::config("batch_size must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(MireError::config("seeds must not be empty"));
        }
        if self.feature_dim == 0 {
            return Err(MireError::config("feature_dim must be >= 1"));
        }
        SgdState::new(self.learning_rate, self.momentum, self.weight_decay)?;
        self.astr_config(AstrFlags::default()).validate()?;
        self.saliency().validate()?;
        self.mix_config(true, 0).validate()?;
        Ok(())
    }

    pub fn astr_config(&self, flags: AstrFlags) -> AstrConfig {
        AstrConfig {
            phi: self.phi,
            xi: self.xi,
            lambda: self.lambda,
            flags,
        }
    }

    pub fn saliency(&self) -> SaliencyConfig {
        SaliencyConfig {
            threshold: self.threshold,
        }
    }

    pub fn mix_config(&self, blur: bool, seed: u64) -> MixConfig {
        MixConfig {
            crop_area_ratio: self.crop_area_ratio,
            blur_size: self.blur_size,
            blur_sigma: self.blur_sigma,
            blur,
            seed,
        }
    }

    fn sgd(&self) -> Result<SgdState> {
        SgdState::new(self.learning_rate, self.momentum, self.weight_decay)
    }
}

/// Training pool a variant uses from phase 2 on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolKind {
    Original,
    Mixed { rule: MaskRule, blur: bool },
}

/// A named configuration compared in a report.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub flags: AblationFlags,
}

impl Variant {
    pub fn new(name: impl Into<String>, flags: AblationFlags) -> Self {
        Variant {
            name: name.into(),
            flags,
        }
    }

    pub fn deepall() -> Self {
        Variant::new(
            "DeepAll",
            AblationFlags {
                no_cdm: true,
                no_astr: true,
                ..AblationFlags::default()
            },
        )
    }

    pub fn mire() -> Self {
        Variant::new("MiRe", AblationFlags::default())
    }
}

/// Row set of the ablation table: the baseline, one row per flag, and the
/// full method.
pub fn ablation_variants() -> Vec<Variant> {
    let row = |name: &str, flag: &str| Variant::new(name, AblationFlags::single(flag).expect("known flag"));
    vec![
        Variant::deepall(),
        row("MiRe w/o CDM", "no_cdm"),
        row("CDM w/o M_c", "no_mc"),
        row("CDM w/o M_d", "no_md"),
        row("CDM w/o Gaussian Blur", "no_blur"),
        row("CDM w/ (1-M_d)", "invert_md"),
        row("MiRe w/o ASTR", "no_astr"),
        row("ASTR w/o Cross-Domain Invariance", "no_cross_domain"),
        row("ASTR w/o Cross-Model Invariance", "no_cross_model"),
        row("ASTR w/o Graph Structure", "no_graph_structure"),
        row("ASTR w/o Feature Aggregation", "no_feature_aggregation"),
        Variant::mire(),
    ]
}

/// Columns of the main evaluation: the baseline, the two component
/// ablations, and the method under `flags` (the full method by default).
pub fn headline_variants(flags: AblationFlags) -> Vec<Variant> {
    let main = if flags == AblationFlags::default() {
        Variant::mire()
    } else {
        Variant::new(format!("MiRe[{}]", flags.active().join(",")), flags)
    };
    vec![
        Variant::deepall(),
        Variant::new("MiRe w/o CDM", AblationFlags::single("no_cdm").expect("known flag")),
        Variant::new("MiRe w/o ASTR", AblationFlags::single("no_astr").expect("known flag")),
        main,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    /// 1-based within the phase.
    pub epoch: usize,
    pub loss_cls: f64,
    /// Domain-head cross-entropy (phase 0 only).
    pub loss_dom: f64,
    /// Consistency loss before the lambda weight (phase 3 only).
    pub loss_ccr: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Per-step view handed to an observer.
pub struct StepInfo<'a> {
    pub phase: u8,
    pub step: usize,
    pub loss_cls: f64,
    pub loss_ccr: f64,
    pub topologies: Option<&'a [SemanticTopology]>,
    /// Aggregation weights of the batch, `[B, K]`.
    pub weights: Option<&'a Tensor>,
    /// Largest aggregated-feature norm of the batch (0 for plain steps).
    pub max_feature_norm: f64,
}

pub type Observer<'a> = &'a mut dyn FnMut(&StepInfo);

/// Data of one leave-one-domain-out fold.
pub struct Fold<'a> {
    pub bundle: &'a DatasetBundle,
    pub cfg: &'a TrainConfig,
    pub target: usize,
    pub seed: u64,
    pub sources: Vec<usize>,
    pub val: Vec<&'a LabeledSample>,
    pub test: Vec<&'a LabeledSample>,
    pub original_train: Vec<&'a LabeledSample>,
}

impl<'a> Fold<'a> {
    pub fn new(bundle: &'a DatasetBundle, cfg: &'a TrainConfig, target: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = bundle.spec.num_domains;
        if target >= n {
            return Err(MireError::config(format!("target domain {target} outside 0..{n}")));
        }
        let sources: Vec<usize> = bundle.domains.iter().map(|d| d.domain).filter(|&d| d != target).collect();
        if sources.len() < 2 {
            return Err(MireError::config(format!(
                "a domain head needs at least 2 source domains, got {}",
                sources.len()
            )));
        }
        let original_train = bundle.select(&sources, Split::Train);
        let val = bundle.select(&sources, Split::Val);
        let test = bundle.select(&[target], Split::Test);
        if original_train.is_empty() || val.is_empty() || test.is_empty() {
            return Err(MireError::contract(format!(
                "fold target {target}: empty split (train {}, val {}, test {})",
                original_train.len(),
                val.len(),
                test.len()
            )));
        }
        Ok(Fold {
            bundle,
            cfg,
            target,
            seed,
            sources,
            val,
            test,
            original_train,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.bundle.spec.num_classes
    }

    /// Index of a source domain in `sources` (the domain-head label).
    pub fn slot(&self, d: usize) -> Result<usize> {
        self.sources
            .iter()
            .position(|&s| s == d)
            .ok_or_else(|| MireError::contract(format!("domain {d} is not a source of this fold")))
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.original_train.len().div_ceil(self.cfg.batch_size)
    }

    fn phase_seed(&self, phase: u64) -> u64 {
        derive_seed(self.seed, 0xF01D_0000 + phase, self.target as u64)
    }

    fn net_config(&self, domain_head: bool) -> NetConfig {
        let mut c = NetConfig::new(self.num_classes(), domain_head.then_some(self.sources.len()));
        c.feature_dim = self.cfg.feature_dim;
        c
    }
}

/// Percentage of `samples` whose argmax class logit equals the label.
pub fn accuracy(nets: &MireNets, samples: &[&LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MireError::contract("accuracy: no samples"));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(100) {
        let imgs = Tensor::stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let logits = nets.logits(&imgs, HeadKind::Class)?;
        for (i, s) in chunk.iter().enumerate() {
            let row = logits.row(i);
            let pred = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            correct += (pred == s.y) as usize;
        }
    }
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

fn batch_tensors(pool: &[LabeledSample], idx: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let imgs = Tensor::stack(&idx.iter().map(|&i| &pool[i].image).collect::<Vec<_>>())?;
    Ok((imgs, idx.iter().map(|&i| pool[i].y).collect(), idx.iter().map(|&i| pool[i].d).collect()))
}

fn check_loss(phase: u8, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(MireError::numeric("train", format!("non-finite loss {v} in phase {phase}")))
    }
}

/// Phase 0: shared encoder with class and domain heads on original data.
pub fn phase0_pretrain(fold: &Fold) -> Result<(MireNets, Vec<EpochRecord>)> {
    let mut nets = MireNets::new(fold.net_config(true), fold.phase_seed(0))?;
    let pool: Vec<LabeledSample> = fold.original_train.iter().map(|s| (*s).clone()).collect();
    let slots: Vec<usize> = pool.iter().map(|s| fold.slot(s.d)).collect::<Result<_>>()?;
    let mut stream = BatchStream::new(pool.iter().map(|s| s.d).collect(), fold.phase_seed(100))?;
    let mut sgd = fold.cfg.sgd()?;
    let mut history = Vec::new();
    for epoch in 1..=fold.cfg.pretrain_epochs {
        let (mut lc, mut ld) = (0.0, 0.0);
        for _ in 0..fold.steps_per_epoch() {
            let idx = stream.next_batch(fold.cfg.batch_size)?;
            let (imgs, ys, _) = batch_tensors(&pool, &idx)?;
            let ds: Vec<usize> = idx.iter().map(|&i| slots[i]).collect();
            let tape = Tape::new();
            let bound = nets.bind(&tape, true);
            let x = tape.constant(imgs);
            let enc = nets.encoder.encode(&tape, &bound, x)?;
            let cls = tape.cross_entropy(nets.class_head.classify(&tape, &bound, enc.features)?, &ys)?;
            let dom = tape.cross_entropy(nets.head(HeadKind::Domain)?.classify(&tape, &bound, enc.features)?, &ds)?;
            let total = tape.add(cls, dom)?;
            let (vc, vd) = (tape.value(cls).item(), tape.value(dom).item());
            check_loss(0, vc + vd)?;
            lc += vc;
            ld += vd;
            let grads = tape.backward(total)?;
            nets.store.accumulate(&bound, &grads);
            nets.store.fill_missing_grads();
            sgd.step(&mut nets.store)?;
        }
        let steps = fold.steps_per_epoch() as f64;
        history.push(EpochRecord {
            phase: 0,
            epoch,
            loss_cls: lc / steps,
            loss_dom: ld / steps,
            loss_ccr: 0.0,
            val_acc: accuracy(&nets, &fold.val)?,
            test_acc: accuracy(&nets, &fold.test)?,
        });
    }
    Ok((nets, history))
}

/// Training pool of one variant: train-split samples of the source domains.
#[derive(Clone, Debug)]
pub struct Pool {
    pub kind: PoolKind,
    pub samples: Vec<LabeledSample>,
    /// Masks of the original train images (mixed pools only).
    pub masks: Option<Vec<ForegroundMask>>,
    /// The full augmented bundle (mixed pools only).
    pub bundle: Option<DatasetBundle>,
}

impl Pool {
    pub fn num_mixed(&self) -> usize {
        self.samples.iter().filter(|s| s.provenance.is_some()).count()
    }
}

/// Phase 1: build the training pool; the original pool needs no model.
pub fn phase1_mix(fold: &Fold, kind: PoolKind, nets0: Option<&MireNets>) -> Result<Pool> {
    match kind {
        PoolKind::Original => Ok(Pool {
            kind,
            samples: fold.original_train.iter().map(|s| (*s).clone()).collect(),
            masks: None,
            bundle: None,
        }),
        PoolKind::Mixed { rule, blur } => {
            let nets = nets0.ok_or_else(|| MireError::contract("phase1: mixing needs the phase-0 model"))?;
            let aug = augment_dataset(
                fold.bundle,
                &fold.sources,
                nets,
                rule,
                &fold.cfg.saliency(),
                &fold.cfg.mix_config(blur, fold.phase_seed(1)),
            )?;
            let samples = aug
                .bundle
                .domains
                .iter()
                .flat_map(|d| d.samples.iter().filter(|s| s.split == Split::Train).cloned())
                .collect();
            Ok(Pool {
                kind,
                samples,
                masks: Some(aug.masks),
                bundle: Some(aug.bundle),
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct Phase2Out {
    pub nets: MireNets,
    /// One per source domain, in source order.
    pub topologies: Vec<SemanticTopology>,
    pub history: Vec<EpochRecord>,
}

/// Initial topologies: per source domain, class means of the pool features.
pub fn initial_topologies(fold: &Fold, nets: &MireNets, pool: &[LabeledSample]) -> Result<Vec<SemanticTopology>> {
    fold.sources
        .iter()
        .map(|&d| {
            let rows: Vec<&LabeledSample> = pool.iter().filter(|s| s.d == d).collect();
            let mut feats = Vec::with_capacity(rows.len());
            for chunk in rows.chunks(100) {
                let imgs = Tensor::stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
                feats.push(nets.features(&imgs)?);
            }
            let dim = nets.config.feature_dim;
            let data: Vec<f64> = feats.into_iter().flat_map(Tensor::into_data).collect();
            let f = Tensor::new(&[rows.len(), dim], data)?;
            let ys: Vec<usize> = rows.iter().map(|s| s.y).collect();
            init_topology(d, &f, &ys, fold.num_classes())
        })
        .collect()
}

/// Phase 2: fresh model, cross-entropy only, then initial topologies.
pub fn phase2_deepall(fold: &Fold, pool: &Pool) -> Result<Phase2Out> {
    let mut nets = MireNets::new(fold.net_config(false), fold.phase_seed(2))?;
    let mut stream = BatchStream::new(pool.samples.iter().map(|s| s.d).collect(), fold.phase_seed(102))?;
    let mut sgd = fold.cfg.sgd()?;
    let mut history = Vec::new();
    for epoch in 1..=fold.cfg.deepall_epochs {
        let mut lc = 0.0;
        for _ in 0..fold.steps_per_epoch() {
            let idx = stream.next_batch(fold.cfg.batch_size)?;
            lc += plain_step(&mut nets, &mut sgd, &pool.samples, &idx, 2)?;
        }
        history.push(EpochRecord {
            phase: 2,
            epoch,
            loss_cls: lc / fold.steps_per_epoch() as f64,
            loss_dom: 0.0,
            loss_ccr: 0.0,
            val_acc: accuracy(&nets, &fold.val)?,
            test_acc: accuracy(&nets, &fold.test)?,
        });
    }
    let topologies = initial_topologies(fold, &nets, &pool.samples)?;
    Ok(Phase2Out {
        nets,
        topologies,
        history,
    })
}

fn plain_step(nets: &mut MireNets, sgd: &mut SgdState, pool: &[LabeledSample], idx: &[usize], phase: u8) -> Result<f64> {
    let (imgs, ys, _) = batch_tensors(pool, idx)?;
    let tape = Tape::new();
    let bound = nets.bind(&tape, true);
    let x = tape.constant(imgs);
    let enc = nets.encoder.encode(&tape, &bound, x)?;
    let loss = tape.cross_entropy(nets.class_head.classify(&tape, &bound, enc.features)?, &ys)?;
    let v = tape.value(loss).item();
    check_loss(phase, v)?;
    let grads = tape.backward(loss)?;
    nets.store.accumulate(&bound, &grads);
    nets.store.fill_missing_grads();
    sgd.step(&mut nets.store)?;
    Ok(v)
}

/// Graph of the full training objective for one batch.
#[derive(Clone, Debug)]
pub struct Objective {
    /// `L_cls + lambda * L_CCR`.
    pub total: Var,
    pub loss_cls: Var,
    /// Unweighted consistency loss.
    pub loss_ccr: Var,
    /// `[B, K]` aggregation weights.
    pub weights: Var,
    /// `[B, D]` aggregated features.
    pub aggregated: Var,
    /// New anchors per slot, `[K, D]` each.
    pub anchors: Vec<Var>,
}

/// Builds the full objective on `tape` without touching `topos`: aggregate,
/// classify the aggregated features, compose new anchors per slot, and
/// score the anchor graphs against the previous anchors.
#[allow(clippy::too_many_arguments)]
pub fn astr_objective(
    tape: &Tape,
    bound: &Bound,
    nets: &MireNets,
    images: Var,
    ys: &[usize],
    slots: &[usize],
    topos: &[SemanticTopology],
    cfg: &AstrConfig,
) -> Result<Objective> {
    let enc = nets.encoder.encode(tape, bound, images)?;
    let agg = aggregate(
        tape,
        enc.features,
        ys,
        slots,
        topos,
        cfg.phi_aggregate(),
        !cfg.flags.no_graph_structure,
    )?;
    let logits = nets.class_head.classify(tape, bound, agg.features)?;
    let loss_cls = tape.cross_entropy(logits, ys)?;
    let mut anchors = Vec::with_capacity(topos.len());
    for (s, topo) in topos.iter().enumerate() {
        let rows: Vec<usize> = (0..ys.len()).filter(|&i| slots[i] == s).collect();
        let c = if rows.is_empty() {
            tape.constant(topo.anchors.clone())
        } else {
            let f = tape.select_rows(agg.features, &rows)?;
            let cls: Vec<usize> = rows.iter().map(|&i| ys[i]).collect();
            compose_anchors(tape, f, &cls, topo, cfg.phi)?
        };
        anchors.push(c);
    }
    let previous: Vec<&Tensor> = topos.iter().map(|t| &t.anchors).collect();
    let loss_ccr = astr_loss(tape, bound, &nets.bgcn, &anchors, &previous, cfg)?;
    let total = tape.add(loss_cls, tape.mul_scalar(loss_ccr, cfg.lambda)?)?;
    Ok(Objective {
        total,
        loss_cls,
        loss_ccr,
        weights: agg.weights,
        aggregated: agg.features,
        anchors,
    })
}

/// Values recorded from one full-objective step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss_cls: f64,
    pub loss_ccr: f64,
    pub weights: Tensor,
    /// Largest row norm of the aggregated features.
    pub max_feature_norm: f64,
}

/// One SGD step of the full objective; advances `topos` to the new anchors.
pub fn astr_step(
    nets: &mut MireNets,
    sgd: &mut SgdState,
    topos: &mut [SemanticTopology],
    images: Tensor,
    ys: &[usize],
    slots: &[usize],
    cfg: &AstrConfig,
) -> Result<StepOutcome> {
    let tape = Tape::new();
    let bound = nets.bind(&tape, true);
    let x = tape.constant(images);
    let obj = astr_objective(&tape, &bound, nets, x, ys, slots, topos, cfg)?;
    let (vc, vr) = (tape.value(obj.loss_cls).item(), tape.value(obj.loss_ccr).item());
    check_loss(3, vc)?;
    check_loss(3, vr)?;
    for (topo, &c) in topos.iter_mut().zip(&obj.anchors) {
        topo.advance(tape.value(c));
    }
    let agg = tape.value(obj.aggregated);
    let max_feature_norm = (0..agg.rows())
        .map(|i| agg.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let grads = tape.backward(obj.total)?;
    nets.store.accumulate(&bound, &grads);
    nets.store.fill_missing_grads();
    sgd.step(&mut nets.store)?;
    Ok(StepOutcome {
        loss_cls: vc,
        loss_ccr: vr,
        weights: tape.value(obj.weights),
        max_feature_norm,
    })
}

#[derive(Clone, Debug)]
pub struct Phase3Out {
    pub best: MireNets,
    pub last: MireNets,
    pub topologies: Vec<SemanticTopology>,
    pub history: Vec<EpochRecord>,
    /// 1-based phase-3 epoch with the best validation accuracy.
    pub selected_epoch: usize,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Phase 3: warm start from phase 2. `astr = None` trains plain
/// cross-entropy. When `checkpoint_dir` is set, the best model so far is
/// written there after every improvement.
pub fn phase3_train(
    fold: &Fold,
    pool: &Pool,
    start: &Phase2Out,
    astr: Option<AstrConfig>,
    checkpoint_dir: Option<&Path>,
    mut observer: Option<Observer>,
) -> Result<Phase3Out> {
    let mut nets = start.nets.clone();
    let mut topos = start.topologies.clone();
    let slots: Vec<usize> = pool.samples.iter().map(|s| fold.slot(s.d)).collect::<Result<_>>()?;
    let mut stream = BatchStream::new(pool.samples.iter().map(|s| s.d).collect(), fold.phase_seed(103))?;
    let mut sgd = fold.cfg.sgd()?;
    let epochs = fold.cfg.epochs - fold.cfg.deepall_epochs;
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, f64, MireNets)> = None;
    let mut step = 0;
    for epoch in 1..=epochs {
        let (mut lc, mut lr) = (0.0, 0.0);
        for _ in 0..fold.steps_per_epoch() {
            let idx = stream.next_batch(fold.cfg.batch_size)?;
            match &astr {
                None => {
                    let v = plain_step(&mut nets, &mut sgd, &pool.samples, &idx, 3)?;
                    lc += v;
                    if let Some(obs) = observer.as_mut() {
                        obs(&StepInfo {
                            phase: 3,
                            step,
                            loss_cls: v,
                            loss_ccr: 0.0,
                            topologies: None,
                            weights: None,
                            max_feature_norm: 0.0,
                        });
                    }
                }
                Some(cfg) => {
                    let (imgs, ys, _) = batch_tensors(&pool.samples, &idx)?;
                    let bslots: Vec<usize> = idx.iter().map(|&i| slots[i]).collect();
                    let out = astr_step(&mut nets, &mut sgd, &mut topos, imgs, &ys, &bslots, cfg)?;
                    lc += out.loss_cls;
                    lr += out.loss_ccr;
                    if let Some(obs) = observer.as_mut() {
                        obs(&StepInfo {
                            phase: 3,
                            step,
                            loss_cls: out.loss_cls,
                            loss_ccr: out.loss_ccr,
                            topologies: Some(&topos),
                            weights: Some(&out.weights),
                            max_feature_norm: out.max_feature_norm,
                        });
                    }
                }
            }
            step += 1;
        }
        let steps = fold.steps_per_epoch() as f64;
        let val_acc = accuracy(&nets, &fold.val)?;
        let test_acc = accuracy(&nets, &fold.test)?;
        history.push(EpochRecord {
            phase: 3,
            epoch,
            loss_cls: lc / steps,
            loss_dom: 0.0,
            loss_ccr: lr / steps,
            val_acc,
            test_acc,
        });
        if best.as_ref().is_none_or(|b| val_acc > b.1) {
            if let Some(dir) = checkpoint_dir {
                nets.save(dir)?;
            }
            best = Some((epoch, val_acc, test_acc, nets.clone()));
        }
    }
    let (selected_epoch, val_acc, test_acc, best_nets) = best.expect("at least one phase-3 epoch");
    Ok(Phase3Out {
        best: best_nets,
        last: nets,
        topologies: topos,
        history,
        selected_epoch,
        val_acc,
        test_acc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub variant: String,
    pub target: usize,
    pub seed: u64,
    /// Phase-3 epoch chosen by validation accuracy.
    pub selected_epoch: usize,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Phase 2 followed by phase 3.
    pub history: Vec<EpochRecord>,
    /// Mixed images in the training pool.
    pub mixed_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    /// `None` is the average over targets.
    pub target: Option<usize>,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub spec: DatasetSpec,
    pub config: TrainConfig,
    pub variants: Vec<String>,
    pub targets: Vec<usize>,
    pub folds: Vec<FoldResult>,
    pub summary: Vec<SummaryRow>,
}

/// Sample standard deviation (`n - 1`); 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Runs every variant on one fold, sharing phases 0-2 where inputs agree.
pub fn run_fold(bundle: &DatasetBundle, cfg: &TrainConfig, target: usize, seed: u64, variants: &[Variant]) -> Result<Vec<FoldResult>> {
    let fold = Fold::new(bundle, cfg, target, seed)?;
    let needs_mix = variants.iter().any(|v| v.flags.pool() != PoolKind::Original);
    let nets0 = if needs_mix { Some(phase0_pretrain(&fold)?.0) } else { None };
    let mut stages: Vec<(PoolKind, Pool, Phase2Out)> = Vec::new();
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let kind = v.flags.pool();
        if !stages.iter().any(|(k, _, _)| *k == kind) {
            let pool = phase1_mix(&fold, kind, nets0.as_ref())?;
            let p2 = phase2_deepall(&fold, &pool)?;
            stages.push((kind, pool, p2));
        }
        let (_, pool, p2) = stages.iter().find(|(k, _, _)| *k == kind).expect("inserted above");
        let astr = v.flags.astr().map(|f| cfg.astr_config(f));
        let p3 = phase3_train(&fold, pool, p2, astr, None, None)?;
        let mut history = p2.history.clone();
        history.extend(p3.history);
        out.push(FoldResult {
            variant: v.name.clone(),
            target,
            seed,
            selected_epoch: p3.selected_epoch,
            val_acc: p3.val_acc,
            test_acc: p3.test_acc,
            history,
            mixed_samples: pool.num_mixed(),
        });
    }
    Ok(out)
}

pub fn resolve_targets(spec: &DatasetSpec, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let targets = cfg.targets.clone().unwrap_or_else(|| (0..spec.num_domains).collect());
    if targets.is_empty() {
        return Err(MireError::config("targets must not be empty"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= spec.num_domains) {
        return Err(MireError::config(format!("target {t} outside 0..{}", spec.num_domains)));
    }
    Ok(targets)
}

/// Leave-one-domain-out over all targets and seeds. Folds run in parallel;
/// results are ordered by (seed, target, variant).
pub fn evaluate_variants(bundle: &DatasetBundle, cfg: &TrainConfig, variants: &[Variant]) -> Result<MetricsReport> {
    cfg.validate()?;
    let targets = resolve_targets(&bundle.spec, cfg)?;
    let jobs: Vec<(u64, usize)> = cfg.seeds.iter().flat_map(|&s| targets.iter().map(move |&t| (s, t))).collect();
    let results: Vec<Result<Vec<FoldResult>>> = jobs
        .par_iter()
        .map(|&(seed, target)| run_fold(bundle, cfg, target, seed, variants))
        .collect();
    let mut folds = Vec::new();
    for r in results {
        folds.extend(r?);
    }
    let summary = summarize(&folds, variants, &targets, &cfg.seeds);
    Ok(MetricsReport {
        spec: bundle.spec.clone(),
        config: cfg.clone(),
        variants: variants.iter().map(|v| v.name.clone()).collect(),
        targets,
        folds,
        summary,
    })
}

/// Per-target mean and std over seeds, plus an average row whose std is
/// taken over per-seed target averages.
pub fn summarize(folds: &[FoldResult], variants: &[Variant], targets: &[usize], seeds: &[u64]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for v in variants {
        let acc = |t: usize, s: u64| {
            folds
                .iter()
                .find(|f| f.variant == v.name && f.target == t && f.seed == s)
                .map(|f| f.test_acc)
        };
        for &t in targets {
            let xs: Vec<f64> = seeds.iter().filter_map(|&s| acc(t, s)).collect();
            if !xs.is_empty() {
                rows.push(SummaryRow {
                    variant: v.name.clone(),
                    target: Some(t),
                    mean: mean(&xs),
                    std: sample_std(&xs),
                    runs: xs.len(),
                });
            }
        }
        let per_seed: Vec<f64> = seeds
            .iter()
            .filter_map(|&s| {
                let xs: Vec<f64> = targets.iter().filter_map(|&t| acc(t, s)).collect();
                (xs.len() == targets.len()).then(|| mean(&xs))
            })
            .collect();
        if !per_seed.is_empty() {
            rows.push(SummaryRow {
                variant: v.name.clone(),
                target: None,
                mean: mean(&per_seed),
                std: sample_std(&per_seed),
                runs: per_seed.len(),
            });
        }
    }
    rows
}

impl MetricsReport {
    /// Average test accuracy of a variant over targets and seeds.
    pub fn average(&self, variant: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.variant == variant && r.target.is_none())
            .map(|r| r.mean)
    }

    /// One row per (variant, target, seed).
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("variant,target,seed,selected_epoch,val_acc,test_acc,mixed_samples\n");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                csv_field(&f.variant),
                f.target,
                f.seed,
                f.selected_epoch,
                f.val_acc,
                f.test_acc,
                f.mixed_samples
            );
        }
        s
    }

    /// One row per recorded epoch.
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("variant,target,seed,phase,epoch,loss_cls,loss_ccr,val_acc,test_acc\n");
        for f in &self.folds {
            for e in &f.history {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    csv_field(&f.variant),
                    f.target,
                    f.seed,
                    e.phase,
                    e.epoch,
                    e.loss_cls,
                    e.loss_ccr,
                    e.val_acc,
                    e.test_acc
                );
            }
        }
        s
    }

    /// Mean and std per variant and target.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,target,mean,std,runs\n");
        for r in &self.summary {
            let t = r.target.map_or_else(|| "avg".to_string(), |t| t.to_string());
            let _ = writeln!(s, "{},{},{:.4},{:.4},{}", csv_field(&r.variant), t, r.mean, r.std, r.runs);
        }
        s
    }

    /// Markdown table: one row per variant, one column per target plus the
    /// average, each cell `mean ± std`.
    pub fn markdown_table(&self) -> String {
        let mut s = String::from("| Method |");
        for t in &self.targets {
            let _ = write!(s, " target {t} |");
        }
        s.push_str(" Average |\n|---|");
        for _ in 0..=self.targets.len() {
            s.push_str("---|");
        }
        s.push('\n');
        for v in &self.variants {
            let _ = write!(s, "| {v} |");
            let cols: Vec<Option<usize>> = self.targets.iter().map(|&t| Some(t)).chain([None]).collect();
            for t in cols {
                match self.summary.iter().find(|r| &r.variant == v && r.target == t) {
                    Some(r) => {
                        let _ = write!(s, " {:.1} ± {:.1} |", r.mean, r.std);
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        fs::write(dir.join("trajectory.csv"), self.trajectory_csv())?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        fs::write(dir.join("table.md"), self.markdown_table())?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?)?)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Phase-1 statistics written next to a mixed pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSummary {
    pub pool: PoolKind,
    pub original_train: usize,
    pub mixed: usize,
    /// Mean mask value over all pixels of the original train images.
    pub mean_mask_mass: f64,
    /// Mean share of each mask's mass that lies on the glyph.
    pub glyph_share: Option<f64>,
}

impl MixSummary {
    pub fn of(fold: &Fold, pool: &Pool) -> Result<Self> {
        let (mass, share) = match &pool.masks {
            None => (0.0, None),
            Some(ms) => {
                let total: f64 = ms.iter().map(|m| m.values.sum()).sum();
                let pixels = ms.iter().map(|m| m.values.len()).sum::<usize>().max(1);
                let mut share = 0.0;
                for (m, s) in ms.iter().zip(&fold.original_train) {
                    share += foreground_mass(&m.values, &glyph_coverage(&fold.bundle.spec, s.id)?)?;
                }
                (total / pixels as f64, Some(share / ms.len().max(1) as f64))
            }
        };
        Ok(MixSummary {
            pool: pool.kind,
            original_train: fold.original_train.len(),
            mixed: pool.num_mixed(),
            mean_mask_mass: mass,
            glyph_share: share,
        })
    }
}

/// Trains one fold with the configured flags and writes the run directory:
/// `config.json`, `phase0/checkpoint` (mixing variants only),
/// `phase1/summary.json`, `phase2/{checkpoint,topologies}`,
/// `phase3/{checkpoint,topologies}`, `metrics.csv`, `trajectory.csv`,
/// `summary.csv`, `report.json`.
pub fn train_fold(bundle: &DatasetBundle, cfg: &TrainConfig, target: usize, seed: u64, run_dir: &Path) -> Result<MetricsReport> {
    let fold = Fold::new(bundle, cfg, target, seed)?;
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let kind = cfg.flags.pool();
    let nets0 = if kind != PoolKind::Original {
        let (nets, _) = phase0_pretrain(&fold)?;
        nets.save(&run_dir.join("phase0").join("checkpoint"))?;
        Some(nets)
    } else {
        None
    };
    let pool = phase1_mix(&fold, kind, nets0.as_ref())?;
    fs::create_dir_all(run_dir.join("phase1"))?;
    fs::write(
        run_dir.join("phase1").join("summary.json"),
        serde_json::to_string_pretty(&MixSummary::of(&fold, &pool)?)?,
    )?;
    let p2 = phase2_deepall(&fold, &pool)?;
    p2.nets.save(&run_dir.join("phase2").join("checkpoint"))?;
    save_topologies(&run_dir.join("phase2").join("topologies"), &p2.topologies)?;
    let astr = cfg.flags.astr().map(|f| cfg.astr_config(f));
    let p3 = phase3_train(&fold, &pool, &p2, astr, Some(&run_dir.join("phase3").join("checkpoint")), None)?;
    save_topologies(&run_dir.join("phase3").join("topologies"), &p3.topologies)?;
    let variant = headline_variants(cfg.flags).pop().expect("non-empty");
    let mut history = p2.history.clone();
    history.extend(p3.history.iter().cloned());
    let folds = vec![FoldResult {
        variant: variant.name.clone(),
        target,
        seed,
        selected_epoch: p3.selected_epoch,
        val_acc: p3.val_acc,
        test_acc: p3.test_acc,
        history,
        mixed_samples: pool.num_mixed(),
    }];
    let summary = summarize(&folds, std::slice::from_ref(&variant), &[target], &[seed]);
    let report = MetricsReport {
        spec: bundle.spec.clone(),
        config: cfg.clone(),
        variants: vec![variant.name],
        targets: vec![target],
        folds,
        summary,
    };
    report.write(run_dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_definition() {
        assert_eq!(sample_std(&[1.0]), 0.0);
        assert!((sample_std(&[1.0, 2.0, 3.0, 4.0, 5.0]) - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn flags_round_trip_names() {
        for name in AblationFlags::NAMES {
            assert_eq!(AblationFlags::single(name).unwrap().active(), vec![name]);
        }
        assert!(AblationFlags::single("bogus").is_err());
    }

    #[test]
    fn ablation_rows_cover_every_flag() {
        let rows = ablation_variants();
        assert_eq!(rows.len(), AblationFlags::NAMES.len() + 2);
        for name in AblationFlags::NAMES {
            assert!(rows.iter().any(|v| v.flags.active() == vec![name]));
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "bogus": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 12}"#).unwrap();
        assert_eq!(c.epochs, 12);
        assert_eq!(c.batch_size, 16);
    }

    #[test]
    fn paper_scale_values() {
        let c = TrainConfig::paper_scale();
        assert_eq!(c.epochs, 100);
        assert_eq!(c.seeds.len(), 10);
        c.validate().unwrap();
    }
}
