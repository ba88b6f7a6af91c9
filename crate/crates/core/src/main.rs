use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mire::cdm::{compute_masks, MaskRule};
use mire::imgops::{hconcat, luminance, to_pgm};
use mire::nets::{HeadKind, MireNets};
use mire::pipeline::{
    ablation_variants, evaluate_variants, headline_variants, phase0_pretrain, phase1_mix, train_fold, AblationFlags,
    Fold, MetricsReport, MixSummary, PoolKind, TrainConfig,
};
use mire::report::render;
use mire::saliency::{foreground_mass, grad_cam, merge_values};
use mire::synthdata::{generate, glyph_coverage, DatasetBundle, DatasetSpec};
use mire::tensor::{write_snapshot, Tensor};
use mire::{MireError, Result};

#[derive(Parser)]
#[command(name = "mire", version, about = "Category-aware data mixing and semantic topology refinement on a synthetic multi-domain benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train the phase-0 model (or load one) and write the mixed dataset.
    Mix(MixArgs),
    /// Export class, domain and merged activation maps.
    Gradcam(GradcamArgs),
    /// Train one leave-one-domain-out fold and write its run directory.
    Train(TrainArgs),
    /// DeepAll, MiRe without CDM, MiRe without ASTR and MiRe over all folds.
    Evaluate(SweepArgs),
    /// One row per ablation flag plus DeepAll and MiRe over all folds.
    Ablate(SweepArgs),
    /// Render SVG figures and a markdown summary for a finished run.
    Report(ReportArgs),
}

#[derive(Args)]
struct Output {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace the output directory if it already exists.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    output: Output,
    /// Dataset spec as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of classes K, default 5 [chosen]
    #[arg(long = "K")]
    k: Option<usize>,
    /// Number of domains N, default 4 [chosen]
    #[arg(long = "N")]
    n: Option<usize>,
    /// Source samples per domain (as many held-out), default 600 [chosen]
    #[arg(long)]
    samples_per_domain: Option<usize>,
    /// Image side in pixels, default 32 [chosen]
    #[arg(long)]
    image_size: Option<usize>,
    /// Spurious background/class association in source samples, default 0.9 [chosen]
    #[arg(long)]
    rho: Option<f64>,
    /// Generator seed, default 7 [chosen]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainOpts {
    /// Training config as JSON (unknown keys are rejected); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the paper-scale protocol: 100 epochs [paper], 10 seeds [chosen].
    #[arg(long)]
    paper_scale: bool,
    /// Total epochs of phases 2 and 3, default 30 [chosen]; 100 with --paper-scale [paper]
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs of the phase-0 model behind the activation maps, default 5 [chosen]
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Plain cross-entropy epochs before the full objective, default 10 [chosen]
    #[arg(long)]
    deepall_epochs: Option<usize>,
    /// Batch size, default 16 [paper]
    #[arg(long)]
    batch_size: Option<usize>,
    /// SGD learning rate, default 0.01 [chosen]
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum, default 0.9 [paper]
    #[arg(long)]
    momentum: Option<f64>,
    /// Weight decay, default 5e-4 [paper]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Anchor moving-average and aggregation weight phi, default 0.5 [paper]
    #[arg(long)]
    phi: Option<f64>,
    /// Weight of the consistency loss, default 0.1 [paper]
    #[arg(long)]
    lambda: Option<f64>,
    /// Margin of the consistency loss, default 2 [paper]
    #[arg(long)]
    xi: Option<f64>,
    /// Foreground mask threshold, default 0.2 [paper]
    #[arg(long)]
    threshold: Option<f64>,
    /// Background crop area ratio, default 1/8 [paper]
    #[arg(long)]
    crop_area_ratio: Option<f64>,
    /// Seeds, comma separated, default 1..=5 [chosen]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Held-out domains, comma separated, default all [chosen]
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<usize>>,
    #[command(flatten)]
    flags: FlagArgs,
}

#[derive(Args)]
struct FlagArgs {
    /// Train on the original pool instead of the mixed one.
    #[arg(long)]
    no_cdm: bool,
    /// Drop the class activation map from the mask.
    #[arg(long)]
    no_mc: bool,
    /// Drop the domain activation map from the mask.
    #[arg(long)]
    no_md: bool,
    /// Skip the Gaussian blur of the background.
    #[arg(long)]
    no_blur: bool,
    /// Use 1 - M_d in the mask.
    #[arg(long)]
    invert_md: bool,
    /// Plain cross-entropy instead of the topology objective.
    #[arg(long)]
    no_astr: bool,
    /// Pair each domain only with itself.
    #[arg(long)]
    no_cross_domain: bool,
    /// Compare anchors within the current model only.
    #[arg(long)]
    no_cross_model: bool,
    /// Identity adjacency in the graph convolution.
    #[arg(long)]
    no_graph_structure: bool,
    /// Use raw features instead of topology-aware ones.
    #[arg(long)]
    no_feature_aggregation: bool,
}

impl FlagArgs {
    fn apply(&self, flags: &mut AblationFlags) {
        let pairs = [
            (self.no_cdm, &mut flags.no_cdm),
            (self.no_mc, &mut flags.no_mc),
            (self.no_md, &mut flags.no_md),
            (self.no_blur, &mut flags.no_blur),
            (self.invert_md, &mut flags.invert_md),
            (self.no_astr, &mut flags.no_astr),
            (self.no_cross_domain, &mut flags.no_cross_domain),
            (self.no_cross_model, &mut flags.no_cross_model),
            (self.no_graph_structure, &mut flags.no_graph_structure),
            (self.no_feature_aggregation, &mut flags.no_feature_aggregation),
        ];
        for (on, slot) in pairs {
            *slot |= on;
        }
    }
}

#[derive(Args)]
struct FoldArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Held-out domain of the fold.
    #[arg(long, default_value_t = 0)]
    target: usize,
    /// Fold seed, default 1 [chosen]
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct MixArgs {
    #[command(flatten)]
    fold: FoldArgs,
    #[command(flatten)]
    output: Output,
    /// Phase-0 checkpoint directory; trained from scratch when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write this many (foreground, mask, mixed) triptychs as PGM.
    #[arg(long, default_value_t = 0)]
    export_pgm: usize,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct GradcamArgs {
    #[command(flatten)]
    fold: FoldArgs,
    #[command(flatten)]
    output: Output,
    /// Phase-0 checkpoint directory; trained from scratch when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of source train images to export.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    fold: FoldArgs,
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory written by `train`, `evaluate` or `ablate`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory; enables the feature projections.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Figure directory, default <run>/figures.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the figure directory if it already exists.
    #[arg(long)]
    force: bool,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| MireError::config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Creates `dir`, refusing to touch a non-empty one unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = !dir.is_dir() || fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(MireError::config(format!(
                "output directory {} already exists; pass --force to replace it",
                dir.display()
            )));
        }
        if dir.is_dir() {
            fs::remove_dir_all(dir)?;
        } else {
            fs::remove_file(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

impl TrainOpts {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_json(path)?,
            None if self.paper_scale => TrainConfig::paper_scale(),
            None => TrainConfig::default(),
        };
        if self.paper_scale && self.config.is_some() {
            let paper = TrainConfig::paper_scale();
            cfg.epochs = paper.epochs;
            cfg.deepall_epochs = paper.deepall_epochs;
            cfg.seeds = paper.seeds;
        }
        macro_rules! over {
            ($($field:ident <- $opt:ident),*) => {
                $(if let Some(v) = self.$opt.clone() { cfg.$field = v; })*
            };
        }
        over!(
            epochs <- epochs,
            pretrain_epochs <- pretrain_epochs,
            deepall_epochs <- deepall_epochs,
            batch_size <- batch_size,
            learning_rate <- lr,
            momentum <- momentum,
            weight_decay <- weight_decay,
            phi <- phi,
            lambda <- lambda,
            xi <- xi,
            threshold <- threshold,
            crop_area_ratio <- crop_area_ratio,
            seeds <- seeds
        );
        if let Some(t) = &self.targets {
            cfg.targets = Some(t.clone());
        }
        self.flags.apply(&mut cfg.flags);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_data(dir: &Path) -> Result<DatasetBundle> {
    DatasetBundle::load(dir)
}

fn phase0_model(fold: &Fold, checkpoint: Option<&Path>, out: &Path) -> Result<MireNets> {
    match checkpoint {
        Some(dir) => MireNets::load(dir),
        None => {
            let (nets, history) = phase0_pretrain(fold)?;
            nets.save(&out.join("phase0").join("checkpoint"))?;
            write_json(&out.join("phase0").join("history.json"), &history)?;
            Ok(nets)
        }
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut spec: DatasetSpec = match &a.config {
        Some(path) => read_json(path)?,
        None => DatasetSpec::default(),
    };
    if let Some(v) = a.k {
        spec.num_classes = v;
    }
    if let Some(v) = a.n {
        spec.num_domains = v;
    }
    if let Some(v) = a.samples_per_domain {
        spec.samples_per_domain = v;
    }
    if let Some(v) = a.image_size {
        spec.image_size = v;
    }
    if let Some(v) = a.rho {
        spec.spurious_strength = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    spec.validate()?;
    prepare_out(&a.output.out, a.output.force)?;
    let bundle = generate(&spec)?;
    bundle.save(&a.output.out)?;
    println!("wrote {} samples to {}", bundle.num_samples(), a.output.out.display());
    Ok(())
}

fn cmd_mix(a: &MixArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    if cfg.flags.pool() == PoolKind::Original {
        return Err(MireError::config("mix: --no-cdm leaves nothing to mix"));
    }
    let bundle = load_data(&a.fold.data)?;
    let fold = Fold::new(&bundle, &cfg, a.fold.target, a.fold.seed)?;
    let out = &a.output.out;
    prepare_out(out, a.output.force)?;
    write_json(&out.join("config.json"), &cfg)?;
    let nets = phase0_model(&fold, a.checkpoint.as_deref(), out)?;
    let pool = phase1_mix(&fold, cfg.flags.pool(), Some(&nets))?;
    let summary = MixSummary::of(&fold, &pool)?;
    write_json(&out.join("summary.json"), &summary)?;
    let mixed = pool.bundle.as_ref().expect("mixed pool carries its bundle");
    mixed.save(&out.join("dataset"))?;
    if a.export_pgm > 0 {
        let dir = out.join("triptychs");
        fs::create_dir_all(&dir)?;
        let masks = pool.masks.as_ref().expect("mixed pool carries its masks");
        let position = |id: u64| fold.original_train.iter().position(|s| s.id == id);
        for s in pool.samples.iter().filter(|s| s.provenance.is_some()).take(a.export_pgm) {
            let prov = s.provenance.expect("filtered");
            let i = position(prov.fg_id).ok_or_else(|| MireError::Consistency(format!("foreground {} not in the fold", prov.fg_id)))?;
            let panel = hconcat(&[
                luminance(&fold.original_train[i].image)?,
                masks[i].values.clone(),
                luminance(&s.image)?,
            ])?;
            fs::write(dir.join(format!("{:x}.pgm", s.id)), to_pgm(&panel)?)?;
        }
    }
    println!(
        "mixed {} images from {} originals; glyph share of mask mass {:.3}",
        summary.mixed,
        summary.original_train,
        summary.glyph_share.unwrap_or(0.0)
    );
    Ok(())
}

#[derive(Serialize)]
struct CamStats {
    count: usize,
    glyph_area: f64,
    glyph_share_class: f64,
    glyph_share_domain: f64,
    glyph_share_merged: f64,
}

fn cmd_gradcam(a: &GradcamArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    let bundle = load_data(&a.fold.data)?;
    let fold = Fold::new(&bundle, &cfg, a.fold.target, a.fold.seed)?;
    let out = &a.output.out;
    prepare_out(out, a.output.force)?;
    let nets = phase0_model(&fold, a.checkpoint.as_deref(), out)?;
    let picked: Vec<_> = fold.original_train.iter().copied().take(a.count).collect();
    if picked.is_empty() {
        return Err(MireError::config("gradcam: --count must be >= 1"));
    }
    let imgs = Tensor::stack(&picked.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let ys: Vec<usize> = picked.iter().map(|s| s.y).collect();
    let ds: Vec<usize> = picked.iter().map(|s| fold.slot(s.d)).collect::<Result<_>>()?;
    let rule = match cfg.flags.pool() {
        PoolKind::Mixed { rule, .. } => rule,
        PoolKind::Original => MaskRule::default(),
    };
    let mc = grad_cam(&nets, &imgs, &ys, HeadKind::Class)?;
    let md = grad_cam(&nets, &imgs, &ds, HeadKind::Domain)?;
    let masks = compute_masks(&nets, &picked, &|d| fold.slot(d), rule, &cfg.saliency())?;
    let dir = out.join("maps");
    fs::create_dir_all(&dir)?;
    let mut snapshot = Vec::new();
    let mut stats = CamStats {
        count: picked.len(),
        glyph_area: 0.0,
        glyph_share_class: 0.0,
        glyph_share_domain: 0.0,
        glyph_share_merged: 0.0,
    };
    for (i, s) in picked.iter().enumerate() {
        let merged = merge_values(&mc[i].values, &md[i].values, cfg.threshold)?;
        let panel = hconcat(&[luminance(&s.image)?, mc[i].values.clone(), md[i].values.clone(), masks[i].values.clone()])?;
        fs::write(dir.join(format!("{:x}.pgm", s.id)), to_pgm(&panel)?)?;
        for t in [&mc[i].values, &md[i].values, &masks[i].values] {
            write_snapshot(&mut snapshot, t)?;
        }
        let cover = glyph_coverage(&bundle.spec, s.id)?;
        stats.glyph_area += cover.sum() / cover.len() as f64;
        stats.glyph_share_class += foreground_mass(&mc[i].values, &cover)?;
        stats.glyph_share_domain += foreground_mass(&md[i].values, &cover)?;
        stats.glyph_share_merged += foreground_mass(&merged, &cover)?;
    }
    let n = picked.len() as f64;
    stats.glyph_area /= n;
    stats.glyph_share_class /= n;
    stats.glyph_share_domain /= n;
    stats.glyph_share_merged /= n;
    fs::write(out.join("maps.bin"), snapshot)?;
    write_json(&out.join("stats.json"), &stats)?;
    println!(
        "{} maps; glyph area {:.3}, glyph share: class {:.3}, domain {:.3}, merged {:.3}",
        stats.count, stats.glyph_area, stats.glyph_share_class, stats.glyph_share_domain, stats.glyph_share_merged
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    let bundle = load_data(&a.fold.data)?;
    prepare_out(&a.output.out, a.output.force)?;
    let report = train_fold(&bundle, &cfg, a.fold.target, a.fold.seed, &a.output.out)?;
    print!("{}", report.markdown_table());
    Ok(())
}

fn sweep(a: &SweepArgs, ablate: bool) -> Result<()> {
    let cfg = a.train.resolve()?;
    let bundle = load_data(&a.data)?;
    prepare_out(&a.output.out, a.output.force)?;
    let variants = if ablate { ablation_variants() } else { headline_variants(cfg.flags) };
    write_json(&a.output.out.join("config.json"), &cfg)?;
    let report: MetricsReport = evaluate_variants(&bundle, &cfg, &variants)?;
    report.write(&a.output.out)?;
    print!("{}", report.markdown_table());
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| a.run.join("figures"));
    let bundle = a.data.as_deref().map(load_data).transpose()?;
    prepare_out(&out, a.force)?;
    let written = render(&a.run, &out, bundle.as_ref())?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MIRE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| MireError::config(format!("MIRE_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| MireError::config(format!("MIRE_THREADS: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match &cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Mix(a) => cmd_mix(a),
        Cmd::Gradcam(a) => cmd_gradcam(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => sweep(a, false),
        Cmd::Ablate(a) => sweep(a, true),
        Cmd::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
