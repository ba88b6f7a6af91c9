//! Adaptive semantic topology refinement.
//!
//! Each source domain keeps a graph over its class anchors (per-class
//! feature centroids) with an RBF adjacency. During training, features are
//! pulled towards anchors chosen by the graph and by cosine similarity, the
//! anchors follow an exponential moving average of the aggregated features,
//! and pairs of domain graphs are tied together by a bipartite graph
//! convolution and a contrastive consistency loss.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MireError, Result};
use crate::nets::{bgcn_propagate, BgcnStack};
use crate::tensor::{read_snapshot_at, write_snapshot, Bound, Tape, Tensor, Var};

/// Lower bound on the RBF bandwidth.
pub const MIN_BANDWIDTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTopology {
    pub domain: usize,
    /// `[K, D]`, row `k` is the anchor of class `k`.
    pub anchors: Tensor,
    /// `[K, K]` RBF adjacency of `anchors`.
    pub adjacency: Tensor,
    pub sigma2: f64,
    pub iteration: u64,
    /// Anchors before the latest update; `None` at iteration 0.
    pub prev_anchors: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AstrFlags {
    /// Pair each domain with itself instead of with other domains.
    pub no_cross_domain: bool,
    /// Replace the temporal cosines of the bipartite affinity with 1.
    pub no_cross_model: bool,
    /// Drop the adjacency from aggregation and the BGCN from the loss.
    pub no_graph_structure: bool,
    /// Skip feature aggregation (aggregation weight on `f` is 1).
    pub no_feature_aggregation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AstrConfig {
    /// Mixing constant of aggregation and of the anchor moving average.
    pub phi: f64,
    /// Contrastive margin.
    pub xi: f64,
    /// Weight of the consistency loss.
    pub lambda: f64,
    pub flags: AstrFlags,
}

impl Default for AstrConfig {
    fn default() -> Self {
        AstrConfig {
            phi: 0.5,
            xi: 2.0,
            lambda: 0.1,
            flags: AstrFlags::default(),
        }
    }
}

impl AstrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi <= 1.0) {
            return Err(MireError::config(format!("phi must be in (0,1], got {}", self.phi)));
        }
        if !(self.xi > 0.0) {
            return Err(MireError::config(format!("xi must be > 0, got {}", self.xi)));
        }
        if !(self.lambda >= 0.0) {
            return Err(MireError::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Weight on `f` during aggregation.
    pub fn phi_aggregate(&self) -> f64 {
        if self.flags.no_feature_aggregation {
            1.0
        } else {
            self.phi
        }
    }
}

/// Median of pairwise squared anchor distances, floored at [`MIN_BANDWIDTH`];
/// 1 when there is a single anchor.
pub fn bandwidth(anchors: &Tensor) -> f64 {
    let k = anchors.rows();
    let mut d2 = Vec::with_capacity(k * (k.saturating_sub(1)) / 2);
    for i in 0..k {
        for j in i + 1..k {
            d2.push(sq_dist(anchors.row(i), anchors.row(j)));
        }
    }
    if d2.is_empty() {
        return 1.0;
    }
    d2.sort_by(f64::total_cmp);
    let m = d2.len();
    let med = if m % 2 == 1 { d2[m / 2] } else { 0.5 * (d2[m / 2 - 1] + d2[m / 2]) };
    med.max(MIN_BANDWIDTH)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `A_ij = exp(-|c_i - c_j|^2 / (2 sigma^2))`; symmetric by construction.
pub fn rbf_adjacency(anchors: &Tensor, sigma2: f64) -> Tensor {
    let k = anchors.rows();
    let mut a = Tensor::zeros(&[k, k]);
    for i in 0..k {
        a.set2(i, i, 1.0);
        for j in i + 1..k {
            let v = (-sq_dist(anchors.row(i), anchors.row(j)) / (2.0 * sigma2)).exp();
            a.set2(i, j, v);
            a.set2(j, i, v);
        }
    }
    a
}

impl SemanticTopology {
    /// Topology over the given anchors at iteration 0.
    pub fn from_anchors(domain: usize, anchors: Tensor) -> Self {
        let sigma2 = bandwidth(&anchors);
        let adjacency = rbf_adjacency(&anchors, sigma2);
        SemanticTopology {
            domain,
            anchors,
            adjacency,
            sigma2,
            iteration: 0,
            prev_anchors: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.anchors.rows()
    }

    /// Installs new anchors, keeping the old ones for one step.
    pub fn advance(&mut self, anchors: Tensor) {
        self.sigma2 = bandwidth(&anchors);
        self.adjacency = rbf_adjacency(&anchors, self.sigma2);
        self.prev_anchors = Some(std::mem::replace(&mut self.anchors, anchors));
        self.iteration += 1;
    }
}

/// Class centroids of one domain's features; every class must be present.
pub fn init_topology(domain: usize, features: &Tensor, labels: &[usize], num_classes: usize) -> Result<SemanticTopology> {
    if features.rank() != 2 || features.rows() != labels.len() {
        return Err(MireError::shape(
            "init_topology",
            format!("features {:?} with {} labels", features.shape(), labels.len()),
        ));
    }
    let dim = features.cols();
    let mut sums = vec![0.0; num_classes * dim];
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(MireError::contract(format!("init_topology: label {y} >= {num_classes}")));
        }
        counts[y] += 1;
        for (s, v) in sums[y * dim..(y + 1) * dim].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(MireError::contract(format!("init_topology: domain {domain} has no samples of class {k}")));
    }
    for k in 0..num_classes {
        for s in sums[k * dim..(k + 1) * dim].iter_mut() {
            *s /= counts[k] as f64;
        }
    }
    Ok(SemanticTopology::from_anchors(domain, Tensor::new(&[num_classes, dim], sums)?))
}

/// Output of [`aggregate`].
#[derive(Clone, Copy, Debug)]
pub struct Aggregated {
    /// `[B, D]` aggregated features, in input row order.
    pub features: Var,
    /// `[B, K]` aggregation weights, in input row order.
    pub weights: Var,
}

/// Row `b`'s slot into `topos` and its class. Rows are grouped by slot,
/// aggregated against that slot's anchors (held constant), and restored to
/// input order.
pub fn aggregate(
    tape: &Tape,
    features: Var,
    classes: &[usize],
    slots: &[usize],
    topos: &[SemanticTopology],
    phi: f64,
    use_graph: bool,
) -> Result<Aggregated> {
    let b = tape.shape(features)[0];
    if classes.len() != b || slots.len() != b {
        return Err(MireError::shape(
            "aggregate",
            format!("{b} rows, {} classes, {} slots", classes.len(), slots.len()),
        ));
    }
    let mut order = Vec::with_capacity(b);
    let mut feats_parts = Vec::new();
    let mut weight_parts = Vec::new();
    for (s, topo) in topos.iter().enumerate() {
        let rows: Vec<usize> = (0..b).filter(|&i| slots[i] == s).collect();
        if rows.is_empty() {
            continue;
        }
        let k = topo.num_classes();
        let f = tape.select_rows(features, &rows)?;
        let c = tape.constant(topo.anchors.clone());
        let cos = tape.cosine(f, c)?;
        let mut prior = Tensor::zeros(&[rows.len(), k]);
        for (r, &i) in rows.iter().enumerate() {
            let y = classes[i];
            if y >= k {
                return Err(MireError::contract(format!("aggregate: class {y} out of range for {k} anchors")));
            }
            if use_graph {
                prior.data_mut()[r * k..(r + 1) * k].copy_from_slice(topo.adjacency.row(y));
            }
        }
        let scores = tape.add(cos, tape.constant(prior))?;
        let scores = tape.mul_scalar(scores, 0.5)?;
        let w = tape.softmax(scores)?;
        let pulled = tape.matmul(w, c)?;
        let keep = tape.mul_scalar(f, phi)?;
        let pulled = tape.mul_scalar(pulled, 1.0 - phi)?;
        feats_parts.push(tape.add(keep, pulled)?);
        weight_parts.push(w);
        order.extend(rows);
    }
    if order.len() != b {
        return Err(MireError::contract("aggregate: row slot outside topology list"));
    }
    let mut inverse = vec![0; b];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    let feats = tape.concat(&feats_parts, 0)?;
    let weights = tape.concat(&weight_parts, 0)?;
    Ok(Aggregated {
        features: tape.select_rows(feats, &inverse)?,
        weights: tape.select_rows(weights, &inverse)?,
    })
}

/// Single-sample aggregation on plain tensors: returns `(f', w)`.
pub fn aggregate_one(f: &[f64], k: usize, topo: &SemanticTopology, phi: f64, use_graph: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let fv = tape.constant(Tensor::new(&[1, f.len()], f.to_vec())?);
    let out = aggregate(&tape, fv, &[k], &[0], std::slice::from_ref(topo), phi, use_graph)?;
    Ok((tape.value(out.features).into_data(), tape.value(out.weights).into_data()))
}

/// `M[j, b] = 1 / n_j` for rows of class `j`; also which classes appear.
fn class_mean_matrix(classes: &[usize], k: usize) -> Result<(Tensor, Vec<bool>)> {
    let mut counts = vec![0usize; k];
    for &y in classes {
        if y >= k {
            return Err(MireError::contract(format!("class {y} out of range for {k} anchors")));
        }
        counts[y] += 1;
    }
    let mut m = Tensor::zeros(&[k, classes.len()]);
    for (b, &y) in classes.iter().enumerate() {
        m.set2(y, b, 1.0 / counts[y] as f64);
    }
    Ok((m, counts.iter().map(|&c| c > 0).collect()))
}

/// Constant part of the new anchors: `(1 - phi) c_prev` for classes present
/// in the batch, `c_prev` for absent ones.
fn anchor_carry(prev: &Tensor, present: &[bool], phi: f64) -> Tensor {
    let mut out = prev.clone();
    let d = prev.cols();
    for (j, &p) in present.iter().enumerate() {
        if p {
            for v in out.data_mut()[j * d..(j + 1) * d].iter_mut() {
                *v *= 1.0 - phi;
            }
        }
    }
    out
}

/// Differentiable new anchors of one domain from its batch rows:
/// `phi * mean_j(f') + (1 - phi) * c_prev` for present classes, `c_prev`
/// otherwise. Gradients reach `f'` only.
pub fn compose_anchors(tape: &Tape, aggregated: Var, classes: &[usize], topo: &SemanticTopology, phi: f64) -> Result<Var> {
    let k = topo.num_classes();
    let (m, present) = class_mean_matrix(classes, k)?;
    let local = tape.matmul(tape.constant(m), aggregated)?;
    let local = tape.mul_scalar(local, phi)?;
    tape.add(local, tape.constant(anchor_carry(&topo.anchors, &present, phi)))
}

/// Moving-average anchor update on plain tensors; rows of `aggregated` must
/// all belong to `topo`'s domain.
pub fn update_anchors(topo: &mut SemanticTopology, aggregated: &Tensor, classes: &[usize], domains: &[usize], phi: f64) -> Result<()> {
    if let Some(&d) = domains.iter().find(|&&d| d != topo.domain) {
        return Err(MireError::contract(format!(
            "update_anchors: sample of domain {d} given to topology of domain {}",
            topo.domain
        )));
    }
    if aggregated.rows() != classes.len() || domains.len() != classes.len() {
        return Err(MireError::shape("update_anchors", "row count mismatch"));
    }
    let tape = Tape::new();
    let f = tape.constant(aggregated.clone());
    let next = tape.value(compose_anchors(&tape, f, classes, topo, phi)?);
    topo.advance(next);
    Ok(())
}

/// `A^bg_ij = (cos(p_i, c_i) + cos(p_j, c_j)) / 2 * cos(c_i, c_j)` with `p`
/// the previous and `c` the current anchors of the two domains.
pub fn bipartite_affinity(
    tape: &Tape,
    cur_a: Var,
    prev_a: &Tensor,
    cur_b: Var,
    prev_b: &Tensor,
    cross_model: bool,
) -> Result<Var> {
    let k = tape.shape(cur_a)[0];
    let cross = tape.cosine(cur_a, cur_b)?;
    if !cross_model {
        return Ok(cross);
    }
    let ta = tape.cosine_rows(tape.constant(prev_a.clone()), cur_a)?;
    let tb = tape.cosine_rows(tape.constant(prev_b.clone()), cur_b)?;
    let zero = tape.constant(Tensor::zeros(&[k, k]));
    let temporal = tape.add_col(tape.add_row(zero, tb)?, ta)?;
    let temporal = tape.mul_scalar(temporal, 0.5)?;
    tape.mul(temporal, cross)
}

/// `[[0, A], [A^T, 0]]` after clamping negative affinities to zero.
pub fn bipartite_block(tape: &Tape, affinity: Var) -> Result<Var> {
    let k = tape.shape(affinity)[0];
    let a = tape.relu(affinity)?;
    let z = tape.constant(Tensor::zeros(&[k, k]));
    let top = tape.concat(&[z, a], 1)?;
    let bottom = tape.concat(&[tape.transpose(a)?, z], 1)?;
    tape.concat(&[top, bottom], 0)
}

/// Plain-tensor bipartite affinity of two topologies at the same iteration.
pub fn build_bipartite(a: &SemanticTopology, b: &SemanticTopology, cross_model: bool) -> Result<Tensor> {
    if a.iteration != b.iteration {
        return Err(MireError::contract(format!(
            "build_bipartite: iterations differ ({} vs {})",
            a.iteration, b.iteration
        )));
    }
    let (pa, pb) = match (&a.prev_anchors, &b.prev_anchors) {
        (Some(pa), Some(pb)) => (pa, pb),
        _ => return Err(MireError::contract("build_bipartite: needs iteration >= 1")),
    };
    let tape = Tape::new();
    let ca = tape.constant(a.anchors.clone());
    let cb = tape.constant(b.anchors.clone());
    Ok(tape.value(bipartite_affinity(&tape, ca, pa, cb, pb, cross_model)?))
}

/// Contrastive consistency loss over `z = [z_a; z_b]` (`[2K, D]`):
/// matched rows are pulled together, mismatched pairs pushed beyond `xi`
/// in squared distance.
pub fn ccr_loss(tape: &Tape, z: Var, xi: f64) -> Result<Var> {
    let shape = tape.shape(z);
    if shape.len() != 2 || shape[0] % 2 != 0 || shape[0] == 0 {
        return Err(MireError::contract(format!("ccr_loss: expected [2K, D], got {shape:?}")));
    }
    let k = shape[0] / 2;
    let za = tape.select_rows(z, &(0..k).collect::<Vec<_>>())?;
    let zb = tape.select_rows(z, &(k..2 * k).collect::<Vec<_>>())?;
    let d = tape.sq_dist(za, zb)?;
    let matched = tape.sum(tape.pick_per_row(d, &(0..k).collect::<Vec<_>>())?)?;
    if k == 1 {
        return Ok(matched);
    }
    let hinge = tape.relu(tape.add_scalar(tape.neg(d)?, xi)?)?;
    let mut off = Tensor::full(&[k, k], 1.0);
    for i in 0..k {
        off.set2(i, i, 0.0);
    }
    let pushed = tape.sum(tape.mul(hinge, tape.constant(off))?)?;
    tape.add(matched, pushed)
}

/// Domain pairs the loss runs over: unordered pairs of distinct slots, or
/// each slot with itself when cross-domain pairing is disabled.
pub fn domain_pairs(num_slots: usize, cross_domain: bool) -> Vec<(usize, usize)> {
    if cross_domain {
        (0..num_slots)
            .flat_map(|a| (a + 1..num_slots).map(move |b| (a, b)))
            .collect()
    } else {
        (0..num_slots).map(|s| (s, s)).collect()
    }
}

/// Consistency loss of one domain pair given current anchors (tape values),
/// previous anchors, and BGCN layer weights.
pub fn pair_loss(tape: &Tape, layers: &[Var], cur: (Var, Var), prev: (&Tensor, &Tensor), cfg: &AstrConfig) -> Result<Var> {
    let nodes = tape.concat(&[cur.0, cur.1], 0)?;
    let z = if cfg.flags.no_graph_structure {
        nodes
    } else {
        let aff = bipartite_affinity(tape, cur.0, prev.0, cur.1, prev.1, !cfg.flags.no_cross_model)?;
        let block = bipartite_block(tape, aff)?;
        bgcn_propagate(tape, nodes, block, layers)?
    };
    ccr_loss(tape, z, cfg.xi)
}

/// Mean consistency loss over all domain pairs (unweighted by lambda).
pub fn astr_loss(
    tape: &Tape,
    bound: &Bound,
    bgcn: &BgcnStack,
    current: &[Var],
    previous: &[&Tensor],
    cfg: &AstrConfig,
) -> Result<Var> {
    if current.len() != previous.len() || current.is_empty() {
        return Err(MireError::contract("astr_loss: need matching, non-empty anchor lists"));
    }
    let pairs = domain_pairs(current.len(), !cfg.flags.no_cross_domain);
    let layers: Vec<Var> = bgcn.layers.iter().map(|&id| bound.var(id)).collect();
    if pairs.is_empty() {
        return Err(MireError::contract("astr_loss: needs at least 2 source domains"));
    }
    let mut losses = Vec::with_capacity(pairs.len());
    for &(a, b) in &pairs {
        losses.push(pair_loss(tape, &layers, (current[a], current[b]), (previous[a], previous[b]), cfg)?);
    }
    let stacked = tape.concat(
        &losses.iter().map(|&l| tape.reshape(l, &[1])).collect::<Result<Vec<_>>>()?,
        0,
    )?;
    tape.mean(stacked)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyHeader {
    domain: usize,
    iteration: u64,
    sigma2: f64,
    has_prev: bool,
    file: String,
}

/// Writes `topologies.json` plus one snapshot file per domain (anchors,
/// adjacency, and previous anchors when present).
pub fn save_topologies(dir: &Path, topos: &[SemanticTopology]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut headers = Vec::new();
    for t in topos {
        let file = format!("topology_{}.bin", t.domain);
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &t.anchors)?;
        write_snapshot(&mut buf, &t.adjacency)?;
        if let Some(p) = &t.prev_anchors {
            write_snapshot(&mut buf, p)?;
        }
        fs::write(dir.join(&file), buf)?;
        headers.push(TopologyHeader {
            domain: t.domain,
            iteration: t.iteration,
            sigma2: t.sigma2,
            has_prev: t.prev_anchors.is_some(),
            file,
        });
    }
    fs::write(dir.join("topologies.json"), serde_json::to_string_pretty(&headers)?)?;
    Ok(())
}

pub fn load_topologies(dir: &Path) -> Result<Vec<SemanticTopology>> {
    let headers: Vec<TopologyHeader> = serde_json::from_str(&fs::read_to_string(dir.join("topologies.json"))?)?;
    let mut out = Vec::new();
    for h in headers {
        let bytes = fs::read(dir.join(&h.file))?;
        let (anchors, pos) = read_snapshot_at(&bytes, 0)?;
        let (adjacency, pos) = read_snapshot_at(&bytes, pos)?;
        let (prev_anchors, pos) = if h.has_prev {
            let (p, pos) = read_snapshot_at(&bytes, pos)?;
            (Some(p), pos)
        } else {
            (None, pos)
        };
        if pos as usize != bytes.len() {
            return Err(MireError::Format {
                offset: pos,
                detail: format!("{}: trailing bytes", h.file),
            });
        }
        out.push(SemanticTopology {
            domain: h.domain,
            anchors,
            adjacency,
            sigma2: h.sigma2,
            iteration: h.iteration,
            prev_anchors,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandwidth_is_median_of_pairs() {
        let a = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        // Squared distances 1, 9, 4 -> median 4.
        assert_eq!(bandwidth(&a), 4.0);
        assert_eq!(bandwidth(&Tensor::zeros(&[3, 2])), MIN_BANDWIDTH);
        assert_eq!(bandwidth(&Tensor::zeros(&[1, 2])), 1.0);
    }

    #[test]
    fn rbf_scalar_value() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let adj = rbf_adjacency(&a, 0.5);
        assert!((adj.at2(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(adj.at2(0, 0), 1.0);
    }

    #[test]
    fn ccr_all_zero_rows_k2() {
        let t = Tape::new();
        let z = t.constant(Tensor::zeros(&[4, 3]));
        assert_eq!(t.value(ccr_loss(&t, z, 2.0).unwrap()).item(), 4.0);
    }

    #[test]
    fn ccr_rejects_odd_rows() {
        let t = Tape::new();
        let z = t.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(ccr_loss(&t, z, 2.0), Err(MireError::Contract(_))));
    }

    #[test]
    fn pairs() {
        assert_eq!(domain_pairs(3, true), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(domain_pairs(2, false), vec![(0, 0), (1, 1)]);
    }
}
