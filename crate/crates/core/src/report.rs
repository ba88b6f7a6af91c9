//! SVG figures and a markdown summary for finished runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::astr::load_topologies;
use crate::error::{MireError, Result};
use crate::nets::MireNets;
use crate::pipeline::MetricsReport;
use crate::synthdata::{DatasetBundle, Split};
use crate::tensor::Tensor;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }

    fn axes(&self, svg: &mut String, x_label: &str, y_label: &str) {
        let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
        let _ = writeln!(svg, "<path d=\"M{l} {t} L{l} {b} L{r} {b}\" stroke=\"black\" fill=\"none\"/>");
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (x, y) = (self.px(xv), self.py(yv));
            let _ = writeln!(svg, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", b + 16.0, tick(xv));
            let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", l - 6.0, y + 4.0, tick(yv));
        }
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 12.0, escape(x_label));
        let _ = writeln!(
            svg,
            "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
            H / 2.0,
            H / 2.0,
            escape(y_label)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(svg: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = MARGIN + 4.0 + 16.0 * i as f64;
        let x = W - MARGIN - 150.0;
        let _ = writeln!(svg, "<rect x=\"{x}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>", y - 9.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{y:.1}\">{}</text>", x + 14.0, escape(n));
    }
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame {
        x: bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0))),
        y: bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))),
    };
    let mut svg = header(title);
    frame.axes(&mut svg, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let d: Vec<String> = s
            .points
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.1} {:.1}", if j == 0 { "M" } else { "L" }, frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            svg,
            "<path d=\"{}\" stroke=\"{}\" stroke-width=\"1.8\" fill=\"none\"/>",
            d.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    legend(&mut svg, &series.iter().map(|s| s.name.clone()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Horizontal bars of `(label, mean, std)` with error whiskers.
pub fn bar_chart(title: &str, x_label: &str, bars: &[(String, f64, f64)]) -> String {
    let hi = bars.iter().map(|b| b.1 + b.2).fold(0.0, f64::max).max(1e-9);
    let mut svg = header(title);
    let left = 200.0;
    let span = W - left - MARGIN;
    let row = (H - 2.0 * MARGIN) / bars.len().max(1) as f64;
    for (i, (name, mean, std)) in bars.iter().enumerate() {
        let y = MARGIN + row * i as f64;
        let w = mean / hi * span;
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", left - 6.0, y + row * 0.55, escape(name));
        let _ = writeln!(
            svg,
            "<rect x=\"{left}\" y=\"{:.1}\" width=\"{w:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
            y + row * 0.15,
            row * 0.7,
            PALETTE[i % PALETTE.len()]
        );
        let (a, b) = (left + (mean - std) / hi * span, left + (mean + std) / hi * span);
        let _ = writeln!(svg, "<path d=\"M{a:.1} {0:.1} L{b:.1} {0:.1}\" stroke=\"black\"/>", y + row * 0.5);
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\">{mean:.1}</text>", b + 4.0, y + row * 0.55);
    }
    let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 12.0, escape(x_label));
    svg.push_str("</svg>\n");
    svg
}

/// Square matrix as a grey-to-blue grid with the value in each cell.
pub fn heatmap(title: &str, m: &Tensor) -> Result<String> {
    if m.rank() != 2 {
        return Err(MireError::shape("heatmap", format!("expected a matrix, got {:?}", m.shape())));
    }
    let (r, c) = (m.rows(), m.cols());
    let (lo, hi) = bounds(m.data().iter().copied());
    let side = ((H - 2.0 * MARGIN) / r.max(c) as f64).min(60.0);
    let x0 = (W - side * c as f64) / 2.0;
    let mut svg = header(title);
    for i in 0..r {
        for j in 0..c {
            let v = m.at2(i, j);
            let t = (v - lo) / (hi - lo);
            let shade = |a: f64, b: f64| (a + t * (b - a)).round() as u8;
            let fill = format!("#{:02x}{:02x}{:02x}", shade(245.0, 8.0), shade(245.0, 48.0), shade(245.0, 107.0));
            let (x, y) = (x0 + side * j as f64, MARGIN + side * i as f64);
            let _ = writeln!(svg, "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{side:.1}\" height=\"{side:.1}\" fill=\"{fill}\" stroke=\"white\"/>");
            let ink = if t > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"{ink}\" font-size=\"10\">{v:.2}</text>",
                x + side / 2.0,
                y + side / 2.0 + 4.0
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Points coloured by group.
pub fn scatter(title: &str, points: &Tensor, groups: &[usize]) -> Result<String> {
    if points.rank() != 2 || points.cols() != 2 || points.rows() != groups.len() {
        return Err(MireError::shape(
            "scatter",
            format!("points {:?} with {} groups", points.shape(), groups.len()),
        ));
    }
    let frame = Frame {
        x: bounds((0..points.rows()).map(|i| points.at2(i, 0))),
        y: bounds((0..points.rows()).map(|i| points.at2(i, 1))),
    };
    let mut svg = header(title);
    frame.axes(&mut svg, "PC1", "PC2");
    for (i, &g) in groups.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{}\" fill-opacity=\"0.75\"/>",
            frame.px(points.at2(i, 0)),
            frame.py(points.at2(i, 1)),
            PALETTE[g % PALETTE.len()]
        );
    }
    let mut names: Vec<usize> = groups.to_vec();
    names.sort_unstable();
    names.dedup();
    legend(&mut svg, &names.iter().map(|g| format!("class {g}")).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Projection of the rows of `x` onto their two leading principal axes.
/// Each axis is signed so that its largest-magnitude loading is positive.
pub fn pca_2d(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || x.rows() < 2 || x.cols() < 2 {
        return Err(MireError::shape("pca_2d", format!("need at least a 2x2 matrix, got {:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.cols());
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = Vec::with_capacity(n * 2);
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let big = v.iter().copied().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
            v.iter().map(|x| if big < 0.0 { -x } else { *x }).collect()
        })
        .collect();
    for i in 0..n {
        for axis in &axes {
            out.push((0..d).map(|j| centered[(i, j)] * axis[j]).sum());
        }
    }
    Tensor::new(&[n, 2], out)
}

/// Mean over folds of one per-epoch quantity, per variant, against the
/// running epoch index across phases 2 and 3.
fn curves(report: &MetricsReport, phases: &[u8], value: impl Fn(&crate::pipeline::EpochRecord) -> f64) -> Vec<Series> {
    report
        .variants
        .iter()
        .filter_map(|v| {
            let folds: Vec<_> = report.folds.iter().filter(|f| &f.variant == v).collect();
            let first = folds.first()?;
            let epochs: Vec<usize> = (0..first.history.len()).filter(|&i| phases.contains(&first.history[i].phase)).collect();
            let points: Vec<(f64, f64)> = epochs
                .iter()
                .map(|&i| {
                    let mean = folds.iter().map(|f| value(&f.history[i])).sum::<f64>() / folds.len() as f64;
                    ((i + 1) as f64, mean)
                })
                .collect();
            (!points.is_empty()).then(|| Series {
                name: v.clone(),
                points,
            })
        })
        .collect()
}

fn write_figure(dir: &Path, name: &str, svg: String, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, svg)?;
    written.push(path);
    Ok(())
}

fn embed(nets: &MireNets, bundle: &DatasetBundle, target: usize) -> Result<(Tensor, Vec<usize>)> {
    let samples = bundle.select(&[target], Split::Test);
    let mut rows = Vec::new();
    for chunk in samples.chunks(100) {
        let imgs = Tensor::stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        rows.extend(nets.features(&imgs)?.into_data());
    }
    let f = Tensor::new(&[samples.len(), nets.config.feature_dim], rows)?;
    Ok((pca_2d(&f)?, samples.iter().map(|s| s.y).collect()))
}

/// Renders figures and `summary.md` for a run directory into `out_dir`.
///
/// Always: loss, consistency-loss, and validation-accuracy curves plus a
/// test-accuracy bar chart. With topologies under `phase3/`: adjacency
/// heatmaps. With checkpoints and the dataset: 2-D PCA of target features
/// for the phase-2 and phase-3 models.
pub fn render(run_dir: &Path, out_dir: &Path, bundle: Option<&DatasetBundle>) -> Result<Vec<PathBuf>> {
    let report = MetricsReport::load(run_dir)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let cls = curves(&report, &[2, 3], |e| e.loss_cls);
    write_figure(out_dir, "loss_cls.svg", line_chart("Classification loss", "epoch", "mean loss", &cls), &mut written)?;
    let ccr = curves(&report, &[3], |e| e.loss_ccr);
    write_figure(out_dir, "loss_ccr.svg", line_chart("Consistency loss (phase 3)", "epoch", "mean loss", &ccr), &mut written)?;
    let val = curves(&report, &[2, 3], |e| e.val_acc);
    write_figure(out_dir, "val_acc.svg", line_chart("Validation accuracy", "epoch", "accuracy (%)", &val), &mut written)?;
    let bars: Vec<(String, f64, f64)> = report
        .summary
        .iter()
        .filter(|r| r.target.is_none())
        .map(|r| (r.variant.clone(), r.mean, r.std))
        .collect();
    write_figure(out_dir, "test_acc.svg", bar_chart("Held-out accuracy", "accuracy (%)", &bars), &mut written)?;

    let topo_dir = run_dir.join("phase3").join("topologies");
    if topo_dir.join("topologies.json").exists() {
        for t in load_topologies(&topo_dir)? {
            let title = format!("Adjacency, domain {} (step {})", t.domain, t.iteration);
            write_figure(out_dir, &format!("adjacency_domain{}.svg", t.domain), heatmap(&title, &t.adjacency)?, &mut written)?;
        }
    }
    if let (Some(bundle), Some(&target)) = (bundle, report.targets.first()) {
        for (phase, label) in [("phase2", "DeepAll"), ("phase3", "final")] {
            let ckpt = run_dir.join(phase).join("checkpoint");
            if ckpt.join("manifest.json").exists() {
                let nets = MireNets::load(&ckpt)?;
                let (pts, ys) = embed(&nets, bundle, target)?;
                let title = format!("Target-domain features, {label} model (PCA)");
                write_figure(out_dir, &format!("pca_{phase}.svg"), scatter(&title, &pts, &ys)?, &mut written)?;
            }
        }
    }

    let mut md = String::from("# Run summary\n\n");
    let _ = writeln!(
        md,
        "Dataset: K={}, N={}, {} samples per domain, spurious strength {}. Epochs {}, seeds {:?}.\n",
        report.spec.num_classes,
        report.spec.num_domains,
        report.spec.samples_per_domain,
        report.spec.spurious_strength,
        report.config.epochs,
        report.config.seeds
    );
    md.push_str("Held-out test accuracy (%), mean ± sample std over seeds:\n\n");
    md.push_str(&report.markdown_table());
    md.push_str("\n## Figures\n\n");
    for p in &written {
        if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
            let _ = writeln!(md, "- [{name}]({name})");
        }
    }
    let path = out_dir.join("summary.md");
    fs::write(&path, md)?;
    written.push(path);
    Ok(written)
}
