//! Training criteria: frame-wise cross-entropy, CTC, realignment-style
//! forced-alignment loss, and lattice-based state-level minimum Bayes
//! risk. Each returns a scalar and the gradient with respect to the
//! network logits.
//!
//! Sign conventions: `ce`, `ctc` and `realign` return a loss to
//! minimize. `smbr` returns the expected-accuracy objective to
//! maximize, together with its ascent gradient; the trainer negates it.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graphs::{
    build_ctc_graph, build_forced_graph, forward_backward, log_sum_exp, LabelId, LabelInventory,
    PriorVector,
};
use crate::nnet::softmax_rows;

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp(&row.to_vec());
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Frame-wise cross-entropy against a fixed alignment.
pub fn ce_loss_grad(logits: &Array2<f64>, align: &[LabelId]) -> Result<(f64, Array2<f64>)> {
    let (t_max, n_labels) = logits.dim();
    if align.len() != t_max {
        return Err(Error::ShapeError(format!(
            "alignment has {} frames but logits have {t_max}",
            align.len()
        )));
    }
    for &l in align {
        if l >= n_labels {
            return Err(Error::UnknownLabel(format!(
                "alignment label {l} outside {n_labels} outputs"
            )));
        }
    }
    let mut dlogits = softmax_rows(logits);
    let mut loss = 0.0;
    for (t, &l) in align.iter().enumerate() {
        loss -= dlogits[[t, l]].ln();
        dlogits[[t, l]] -= 1.0;
    }
    Ok((loss, dlogits))
}

/// CTC loss: negative log of the total posterior score of all blank
/// alignments of the transcript. The gradient is
/// `softmax(logits) - gamma`, with `gamma` the alignment-graph
/// occupancy.
pub fn ctc_loss_grad(
    logits: &Array2<f64>,
    labels: &[LabelId],
    inv: &LabelInventory,
) -> Result<(f64, Array2<f64>)> {
    if inv.len() != logits.ncols() {
        return Err(Error::ShapeError(format!(
            "inventory has {} labels but logits have {} columns",
            inv.len(),
            logits.ncols()
        )));
    }
    let graph = build_ctc_graph(labels, inv)?;
    let y = softmax_rows(logits);
    let occ = forward_backward(&graph, &y, None)?;
    Ok((-occ.log_total, y - occ.gamma))
}

/// Forced-alignment loss over a blank-free chain graph, with optional
/// prior-scaled frame scores (posterior divided by label prior). Priors
/// are constant with respect to the logits, so the gradient keeps the
/// `softmax - gamma` form.
pub fn realign_loss_grad(
    logits: &Array2<f64>,
    labels: &[LabelId],
    priors: Option<&PriorVector>,
) -> Result<(f64, Array2<f64>)> {
    let graph = build_forced_graph(labels)?;
    let y = softmax_rows(logits);
    let occ = forward_backward(&graph, &y, priors)?;
    Ok((-occ.log_total, y - occ.gamma))
}

// --- lattices ---

/// A lattice node pins a frame index; arcs span the half-open frame
/// range between their endpoints and carry one label.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeNode {
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeArc {
    pub from: usize,
    pub to: usize,
    pub label: LabelId,
    /// Acoustic log score of the span as assigned at creation time.
    /// Criteria that need acoustics consistent with a given logit
    /// matrix recompute this from the logits instead.
    pub am_score: f64,
    pub lm_score: f64,
}

/// A directed acyclic word-or-label graph over frames. Every arc moves
/// strictly forward in time, so paths from the start node to a final
/// node tile a frame range exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub nodes: Vec<LatticeNode>,
    pub arcs: Vec<LatticeArc>,
    pub start: usize,
    pub finals: Vec<usize>,
}

impl Lattice {
    /// Structural checks: indices in range, arcs strictly forward in
    /// time, at least one final.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::Data("lattice has no nodes".into()));
        }
        if self.start >= n {
            return Err(Error::Data(format!(
                "lattice start node {} out of range",
                self.start
            )));
        }
        if self.finals.is_empty() {
            return Err(Error::Data("lattice has no final nodes".into()));
        }
        for &f in &self.finals {
            if f >= n {
                return Err(Error::Data(format!("lattice final node {f} out of range")));
            }
        }
        for (i, a) in self.arcs.iter().enumerate() {
            if a.from >= n || a.to >= n {
                return Err(Error::Data(format!("arc {i} references a missing node")));
            }
            if self.nodes[a.to].frame <= self.nodes[a.from].frame {
                return Err(Error::Data(format!(
                    "arc {i} does not move forward in time ({} -> {})",
                    self.nodes[a.from].frame, self.nodes[a.to].frame
                )));
            }
        }
        Ok(())
    }

    /// Node indices ordered by frame (stable in index for equal frames):
    /// a topological order thanks to the forward-in-time arc rule.
    fn topo_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by_key(|&v| (self.nodes[v].frame, v));
        order
    }

    /// Serialize to the textual lattice format. The start node's line
    /// comes first; a reader takes the first `node` line as the start.
    pub fn to_text(&self, inv: &LabelInventory) -> String {
        let mut s = String::new();
        let mut ids: Vec<usize> = (0..self.nodes.len()).collect();
        ids.retain(|&v| v != self.start);
        ids.insert(0, self.start);
        for v in ids {
            s.push_str(&format!("node {v} {}\n", self.nodes[v].frame));
        }
        for a in &self.arcs {
            s.push_str(&format!(
                "arc {} {} {} {} {}\n",
                a.from,
                a.to,
                inv.name(a.label),
                a.am_score,
                a.lm_score
            ));
        }
        for &f in &self.finals {
            s.push_str(&format!("final {f}\n"));
        }
        s
    }

    /// Parse the textual format. Node ids must be dense (a permutation
    /// of `0..n`); the first `node` line names the start node.
    pub fn parse(text: &str, inv: &LabelInventory) -> Result<Lattice> {
        let mut frames: Vec<Option<usize>> = Vec::new();
        let mut start: Option<usize> = None;
        let mut arcs = Vec::new();
        let mut finals = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut toks = line.split_whitespace();
            let kind = toks.next().unwrap();
            let ctx = |msg: String| Error::Data(format!("lattice line {}: {msg}", lineno + 1));
            let mut next_usize = |what: &str| -> Result<usize> {
                toks.next()
                    .ok_or_else(|| ctx(format!("missing {what}")))?
                    .parse::<usize>()
                    .map_err(|_| ctx(format!("bad {what}")))
            };
            match kind {
                "node" => {
                    let id = next_usize("node id")?;
                    let frame = next_usize("frame")?;
                    if frames.len() <= id {
                        frames.resize(id + 1, None);
                    }
                    if frames[id].replace(frame).is_some() {
                        return Err(ctx(format!("duplicate node {id}")));
                    }
                    start.get_or_insert(id);
                }
                "arc" => {
                    let from = next_usize("from node")?;
                    let to = next_usize("to node")?;
                    let name = toks.next().ok_or_else(|| ctx("missing label".into()))?;
                    let label = inv.id(name).ok_or_else(|| {
                        Error::UnknownLabel(format!("lattice line {}: {name:?}", lineno + 1))
                    })?;
                    let am: f64 = toks
                        .next()
                        .ok_or_else(|| ctx("missing am_score".into()))?
                        .parse()
                        .map_err(|_| ctx("bad am_score".into()))?;
                    let lm: f64 = toks
                        .next()
                        .ok_or_else(|| ctx("missing lm_score".into()))?
                        .parse()
                        .map_err(|_| ctx("bad lm_score".into()))?;
                    arcs.push(LatticeArc {
                        from,
                        to,
                        label,
                        am_score: am,
                        lm_score: lm,
                    });
                }
                "final" => finals.push(next_usize("final id")?),
                other => return Err(ctx(format!("unknown record {other:?}"))),
            }
            if toks.next().is_some() {
                return Err(Error::Data(format!(
                    "lattice line {}: trailing fields",
                    lineno + 1
                )));
            }
        }
        let nodes: Vec<LatticeNode> = frames
            .into_iter()
            .enumerate()
            .map(|(id, f)| {
                f.map(|frame| LatticeNode { frame })
                    .ok_or_else(|| Error::Data(format!("node ids not dense, {id} missing")))
            })
            .collect::<Result<_>>()?;
        let lat = Lattice {
            nodes,
            arcs,
            start: start.ok_or_else(|| Error::Data("lattice has no nodes".into()))?,
            finals,
        };
        lat.validate()?;
        Ok(lat)
    }
}

/// Arc scores recomputed from a log-posterior matrix: acoustic part is
/// the sum of the arc label's log posterior over the spanned frames.
fn arc_weight(lat: &Lattice, arc: &LatticeArc, y_log: &Array2<f64>, kappa: f64) -> f64 {
    let mut am = 0.0;
    for t in lat.nodes[arc.from].frame..lat.nodes[arc.to].frame {
        am += y_log[[t, arc.label]];
    }
    kappa * am + arc.lm_score
}

fn check_lattice_for_scoring(
    lat: &Lattice,
    t_max: usize,
    n_labels: usize,
    what: &str,
) -> Result<()> {
    lat.validate()?;
    if lat.nodes[lat.start].frame != 0 {
        return Err(Error::Data(format!(
            "{what} lattice start node is not at frame 0"
        )));
    }
    for &f in &lat.finals {
        if lat.nodes[f].frame != t_max {
            return Err(Error::Data(format!(
                "{what} lattice final node at frame {} but logits have {t_max} frames",
                lat.nodes[f].frame
            )));
        }
    }
    for a in &lat.arcs {
        if a.label >= n_labels {
            return Err(Error::UnknownLabel(format!(
                "{what} lattice arc label {} outside {n_labels} outputs",
                a.label
            )));
        }
    }
    Ok(())
}

/// Best path through a lattice under `kappa * am + lm` scoring with
/// acoustics recomputed from `y_log`, returned as per-frame labels.
/// Ties resolve toward the earlier-listed arc.
pub fn lattice_best_path_labels(
    lat: &Lattice,
    y_log: &Array2<f64>,
    kappa: f64,
) -> Result<Vec<LabelId>> {
    let t_max = y_log.nrows();
    check_lattice_for_scoring(lat, t_max, y_log.ncols(), "numerator")?;
    let n = lat.nodes.len();
    let mut score = vec![f64::NEG_INFINITY; n];
    let mut back: Vec<Option<usize>> = vec![None; n]; // arc index
    score[lat.start] = 0.0;

    let order = lat.topo_order();
    let mut arcs_from: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, a) in lat.arcs.iter().enumerate() {
        arcs_from[a.from].push(i);
    }
    for &u in &order {
        if score[u] == f64::NEG_INFINITY {
            continue;
        }
        for &ai in &arcs_from[u] {
            let a = &lat.arcs[ai];
            let s = score[u] + arc_weight(lat, a, y_log, kappa);
            if s > score[a.to] {
                score[a.to] = s;
                back[a.to] = Some(ai);
            }
        }
    }
    let best_final = lat
        .finals
        .iter()
        .copied()
        .filter(|&f| score[f] != f64::NEG_INFINITY)
        .max_by(|&a, &b| score[a].partial_cmp(&score[b]).unwrap())
        .ok_or_else(|| Error::NoPaths("no complete path through the numerator lattice".into()))?;

    let mut labels = vec![0usize; t_max];
    let mut v = best_final;
    while v != lat.start {
        let ai = back[v].expect("reached a node with no back pointer");
        let a = &lat.arcs[ai];
        labels[lat.nodes[a.from].frame..lat.nodes[a.to].frame].fill(a.label);
        v = a.from;
    }
    Ok(labels)
}

/// State-level minimum Bayes risk over lattices.
///
/// The path distribution is `P(pi) ~ exp(kappa * am + lm)` over the
/// denominator lattice, with acoustics recomputed from the logits. Path
/// accuracy counts frames whose label matches the reference, which is
/// the best path through the numerator lattice. Returns the expected
/// accuracy and its gradient with respect to the logits:
/// `dlogits[t][l] = kappa * gamma(t,l) * (abar(t,l) - E[A])`, summed
/// over denominator arcs. A single-path denominator yields an exactly
/// zero gradient.
pub fn smbr_loss_grad(
    num: &Lattice,
    den: &Lattice,
    logits: &Array2<f64>,
    kappa: f64,
) -> Result<(f64, Array2<f64>)> {
    let (t_max, n_labels) = logits.dim();
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    check_lattice_for_scoring(den, t_max, n_labels, "denominator")?;
    let y_log = log_softmax_rows(logits);
    let reference = lattice_best_path_labels(num, &y_log, kappa)?;

    let n = den.nodes.len();
    let order = den.topo_order();
    let mut arcs_from: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut arcs_to: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut weights = Vec::with_capacity(den.arcs.len());
    let mut accs = Vec::with_capacity(den.arcs.len());
    for (i, a) in den.arcs.iter().enumerate() {
        arcs_from[a.from].push(i);
        arcs_to[a.to].push(i);
        weights.push(arc_weight(den, a, &y_log, kappa));
        let span = den.nodes[a.from].frame..den.nodes[a.to].frame;
        accs.push(span.filter(|&t| reference[t] == a.label).count() as f64);
    }

    let mut alpha = vec![f64::NEG_INFINITY; n];
    alpha[den.start] = 0.0;
    for &u in &order {
        if alpha[u] == f64::NEG_INFINITY {
            continue;
        }
        for &ai in &arcs_from[u] {
            let a = &den.arcs[ai];
            let s = alpha[u] + weights[ai];
            alpha[a.to] = log_sum_exp(&[alpha[a.to], s]);
        }
    }
    let z = log_sum_exp(&den.finals.iter().map(|&f| alpha[f]).collect::<Vec<_>>());
    if z == f64::NEG_INFINITY {
        return Err(Error::NoPaths(
            "no complete path through the denominator lattice".into(),
        ));
    }

    let mut beta = vec![f64::NEG_INFINITY; n];
    for &f in &den.finals {
        beta[f] = 0.0;
    }
    for &v in order.iter().rev() {
        for &ai in &arcs_from[v] {
            let a = &den.arcs[ai];
            if beta[a.to] != f64::NEG_INFINITY {
                beta[v] = log_sum_exp(&[beta[v], weights[ai] + beta[a.to]]);
            }
        }
    }

    // Expected accuracy of a path prefix ending at each node, and of a
    // suffix leaving it, averaged under the path posterior.
    let mut abar = vec![0.0f64; n];
    for &v in &order {
        if v == den.start || alpha[v] == f64::NEG_INFINITY {
            continue;
        }
        let mut acc = 0.0;
        for &ai in &arcs_to[v] {
            let a = &den.arcs[ai];
            if alpha[a.from] == f64::NEG_INFINITY {
                continue;
            }
            let w = (alpha[a.from] + weights[ai] - alpha[v]).exp();
            acc += w * (abar[a.from] + accs[ai]);
        }
        abar[v] = acc;
    }
    let mut bbar = vec![0.0f64; n];
    for &v in order.iter().rev() {
        if beta[v] == f64::NEG_INFINITY || den.finals.contains(&v) {
            continue;
        }
        let mut acc = 0.0;
        for &ai in &arcs_from[v] {
            let a = &den.arcs[ai];
            if beta[a.to] == f64::NEG_INFINITY {
                continue;
            }
            let w = (weights[ai] + beta[a.to] - beta[v]).exp();
            acc += w * (accs[ai] + bbar[a.to]);
        }
        bbar[v] = acc;
    }

    let mut expected = 0.0;
    for &f in &den.finals {
        if alpha[f] != f64::NEG_INFINITY {
            expected += (alpha[f] - z).exp() * abar[f];
        }
    }

    let mut dlogits = Array2::zeros((t_max, n_labels));
    for (ai, a) in den.arcs.iter().enumerate() {
        if alpha[a.from] == f64::NEG_INFINITY || beta[a.to] == f64::NEG_INFINITY {
            continue;
        }
        let posterior = (alpha[a.from] + weights[ai] + beta[a.to] - z).exp();
        if posterior == 0.0 {
            continue;
        }
        let acc_through = abar[a.from] + accs[ai] + bbar[a.to];
        let coef = kappa * posterior * (acc_through - expected);
        for t in den.nodes[a.from].frame..den.nodes[a.to].frame {
            dlogits[[t, a.label]] += coef;
        }
    }
    Ok((expected, dlogits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::InventoryKind;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inv(n: usize, blank: bool) -> LabelInventory {
        let names: Vec<String> = (0..n).map(|i| format!("l{i}")).collect();
        let inv = LabelInventory::from_names(names, InventoryKind::CiPhone).unwrap();
        if blank {
            inv.with_blank().unwrap()
        } else {
            inv
        }
    }

    fn random_logits(t: usize, l: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, l), |_| rng.random_range(-2.0..2.0))
    }

    /// Central finite difference of `f` with respect to every logit.
    fn fd_dlogits(logits: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(logits.dim());
        for t in 0..logits.nrows() {
            for l in 0..logits.ncols() {
                let mut up = logits.clone();
                up[[t, l]] += h;
                let mut down = logits.clone();
                down[[t, l]] -= h;
                out[[t, l]] = (f(&up) - f(&down)) / (2.0 * h);
            }
        }
        out
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-8);
            assert!(rel < tol || (x - y).abs() < 1e-9, "{x} vs {y} (rel {rel})");
        }
    }

    #[test]
    fn ce_uniform_logits_cost_log_l() {
        let logits = Array2::zeros((3, 4));
        let (loss, dlogits) = ce_loss_grad(&logits, &[0, 1, 3]).unwrap();
        assert_abs_diff_eq!(loss, 3.0 * 4.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(dlogits[[0, 0]], 0.25 - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dlogits[[0, 1]], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn ce_near_perfect_logits_cost_near_zero() {
        let mut logits = Array2::from_elem((2, 3), -30.0);
        logits[[0, 2]] = 30.0;
        logits[[1, 0]] = 30.0;
        let (loss, _) = ce_loss_grad(&logits, &[2, 0]).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let logits = random_logits(4, 5, 1);
        let align = [3, 0, 2, 2];
        let (_, dlogits) = ce_loss_grad(&logits, &align).unwrap();
        let fd = fd_dlogits(&logits, &|lg| ce_loss_grad(lg, &align).unwrap().0);
        assert_close(&dlogits, &fd, 1e-5);
    }

    #[test]
    fn ce_rejects_bad_shapes() {
        let logits = Array2::zeros((3, 2));
        assert!(matches!(
            ce_loss_grad(&logits, &[0, 1]).unwrap_err(),
            Error::ShapeError(_)
        ));
        assert!(matches!(
            ce_loss_grad(&logits, &[0, 1, 5]).unwrap_err(),
            Error::UnknownLabel(_)
        ));
    }

    #[test]
    fn ctc_single_frame_loss_is_the_label_posterior() {
        let iv = inv(2, true);
        let logits = random_logits(1, 3, 2);
        let y = softmax_rows(&logits);
        let (loss, dlogits) = ctc_loss_grad(&logits, &[0], &iv).unwrap();
        assert_abs_diff_eq!(loss, -y[[0, 0]].ln(), epsilon = 1e-12);
        // Occupancy is one-hot on the label, so the gradient is y - onehot.
        assert_abs_diff_eq!(dlogits[[0, 0]], y[[0, 0]] - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dlogits[[0, 1]], y[[0, 1]], epsilon = 1e-12);
    }

    #[test]
    fn ctc_two_frames_sums_the_three_alignments() {
        let iv = inv(2, true);
        let blank = iv.blank_id().unwrap();
        let logits = random_logits(2, 3, 3);
        let y = softmax_rows(&logits);
        let (loss, _) = ctc_loss_grad(&logits, &[0], &iv).unwrap();
        let total = y[[0, 0]] * y[[1, 0]] + y[[0, 0]] * y[[1, blank]] + y[[0, blank]] * y[[1, 0]];
        assert_abs_diff_eq!(loss, -total.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let iv = inv(3, true);
        for (labels, t, seed) in [
            (vec![0usize], 3usize, 4u64),
            (vec![0, 1], 5, 5),
            (vec![2, 2], 6, 6),
            (vec![0, 1, 0], 6, 7),
        ] {
            let logits = random_logits(t, 4, seed);
            let (_, dlogits) = ctc_loss_grad(&logits, &labels, &iv).unwrap();
            let fd = fd_dlogits(&logits, &|lg| ctc_loss_grad(lg, &labels, &iv).unwrap().0);
            assert_close(&dlogits, &fd, 1e-5);
        }
    }

    #[test]
    fn ctc_gradient_rows_sum_to_zero() {
        // softmax rows and occupancy rows both sum to one.
        let iv = inv(3, true);
        let logits = random_logits(7, 4, 8);
        let (_, dlogits) = ctc_loss_grad(&logits, &[1, 0, 2], &iv).unwrap();
        for row in dlogits.rows() {
            assert_abs_diff_eq!(row.sum(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn ctc_distinguishes_label_order() {
        let iv = inv(2, true);
        let logits = random_logits(6, 3, 9);
        let (ab, _) = ctc_loss_grad(&logits, &[0, 1], &iv).unwrap();
        let (ba, _) = ctc_loss_grad(&logits, &[1, 0], &iv).unwrap();
        assert!((ab - ba).abs() > 1e-9);
    }

    #[test]
    fn realign_with_exact_length_equals_ce() {
        let logits = random_logits(3, 4, 10);
        let labels = [1, 2, 0];
        let (l_re, d_re) = realign_loss_grad(&logits, &labels, None).unwrap();
        let (l_ce, d_ce) = ce_loss_grad(&logits, &labels).unwrap();
        assert_abs_diff_eq!(l_re, l_ce, epsilon = 1e-10);
        assert_close(&d_re, &d_ce, 1e-10);
    }

    #[test]
    fn realign_uniform_priors_match_unscaled_gradient() {
        let logits = random_logits(5, 3, 11);
        let labels = [0, 2];
        let priors = PriorVector {
            probs: vec![1.0 / 3.0; 3],
        };
        let (l0, d0) = realign_loss_grad(&logits, &labels, None).unwrap();
        let (l1, d1) = realign_loss_grad(&logits, &labels, Some(&priors)).unwrap();
        assert_close(&d0, &d1, 1e-10);
        // The loss shifts by T * log prior, the gradient does not.
        assert_abs_diff_eq!(l1, l0 + 5.0 * (1.0 / 3.0f64).ln(), epsilon = 1e-10);
    }

    #[test]
    fn realign_gradient_matches_finite_differences() {
        let logits = random_logits(5, 3, 12);
        let labels = [0, 1];
        let priors = PriorVector {
            probs: vec![0.5, 0.3, 0.2],
        };
        let (_, dlogits) = realign_loss_grad(&logits, &labels, Some(&priors)).unwrap();
        let fd = fd_dlogits(&logits, &|lg| {
            realign_loss_grad(lg, &labels, Some(&priors)).unwrap().0
        });
        assert_close(&dlogits, &fd, 1e-5);
    }

    // Single arc pair: nodes at frame 0 and frame T, one arc per label.
    fn flat_lattice(t: usize, labels: &[LabelId], lms: &[f64]) -> Lattice {
        Lattice {
            nodes: vec![LatticeNode { frame: 0 }, LatticeNode { frame: t }],
            arcs: labels
                .iter()
                .zip(lms)
                .map(|(&label, &lm)| LatticeArc {
                    from: 0,
                    to: 1,
                    label,
                    am_score: 0.0,
                    lm_score: lm,
                })
                .collect(),
            start: 0,
            finals: vec![1],
        }
    }

    #[test]
    fn smbr_single_path_denominator_has_zero_gradient() {
        let logits = random_logits(4, 3, 13);
        let num = flat_lattice(4, &[1], &[0.0]);
        let den = flat_lattice(4, &[1], &[0.0]);
        let (obj, dlogits) = smbr_loss_grad(&num, &den, &logits, 1.0).unwrap();
        // The lone path matches the reference on all four frames.
        assert_abs_diff_eq!(obj, 4.0, epsilon = 1e-12);
        assert!(
            dlogits.iter().all(|&v| v == 0.0),
            "expected an exactly zero gradient"
        );
    }

    #[test]
    fn smbr_two_paths_match_hand_enumeration() {
        let t = 3;
        let kappa = 0.8;
        let logits = random_logits(t, 3, 14);
        let y_log = log_softmax_rows(&logits);
        let num = flat_lattice(t, &[0], &[0.0]);
        let den = flat_lattice(t, &[0, 1], &[0.2, -0.1]);
        let (obj, dlogits) = smbr_loss_grad(&num, &den, &logits, kappa).unwrap();

        // Path scores by direct enumeration over the two arcs.
        let am = |l: usize| (0..t).map(|i| y_log[[i, l]]).sum::<f64>();
        let s0 = kappa * am(0) + 0.2;
        let s1 = kappa * am(1) - 0.1;
        let z = log_sum_exp(&[s0, s1]);
        let p0 = (s0 - z).exp();
        let p1 = (s1 - z).exp();
        // Reference is label 0 everywhere, so accuracies are T and 0.
        let want_obj = p0 * t as f64;
        assert_abs_diff_eq!(obj, want_obj, epsilon = 1e-10);
        for i in 0..t {
            assert_abs_diff_eq!(
                dlogits[[i, 0]],
                kappa * p0 * (t as f64 - want_obj),
                epsilon = 1e-10
            );
            assert_abs_diff_eq!(
                dlogits[[i, 1]],
                kappa * p1 * (0.0 - want_obj),
                epsilon = 1e-10
            );
            assert_abs_diff_eq!(dlogits[[i, 2]], 0.0, epsilon = 1e-15);
        }
    }

    /// A three-segment lattice with parallel label choices per segment.
    fn segmented_lattice(bounds: &[usize], choices: &[Vec<LabelId>]) -> Lattice {
        let nodes: Vec<LatticeNode> = bounds.iter().map(|&f| LatticeNode { frame: f }).collect();
        let mut arcs = Vec::new();
        for (seg, labels) in choices.iter().enumerate() {
            for (k, &label) in labels.iter().enumerate() {
                arcs.push(LatticeArc {
                    from: seg,
                    to: seg + 1,
                    label,
                    am_score: 0.0,
                    lm_score: 0.1 * k as f64,
                });
            }
        }
        Lattice {
            nodes,
            arcs,
            start: 0,
            finals: vec![bounds.len() - 1],
        }
    }

    #[test]
    fn smbr_gradient_matches_finite_differences() {
        let logits = random_logits(6, 3, 15);
        let num = segmented_lattice(&[0, 2, 4, 6], &[vec![0], vec![1], vec![0]]);
        let den = segmented_lattice(&[0, 2, 4, 6], &[vec![0, 1], vec![1, 2], vec![0, 2]]);
        let kappa = 1.3;
        let (_, dlogits) = smbr_loss_grad(&num, &den, &logits, kappa).unwrap();
        let fd = fd_dlogits(&logits, &|lg| {
            smbr_loss_grad(&num, &den, lg, kappa).unwrap().0
        });
        assert_close(&dlogits, &fd, 1e-4);
    }

    #[test]
    fn smbr_objective_matches_full_enumeration() {
        let logits = random_logits(6, 3, 16);
        let y_log = log_softmax_rows(&logits);
        let num = segmented_lattice(&[0, 2, 4, 6], &[vec![0], vec![1], vec![0]]);
        let den = segmented_lattice(&[0, 2, 4, 6], &[vec![0, 1], vec![1, 2], vec![0, 2]]);
        let kappa = 0.9;
        let (obj, _) = smbr_loss_grad(&num, &den, &logits, kappa).unwrap();

        // Enumerate all 8 paths directly.
        let reference = [0, 0, 1, 1, 0, 0];
        let mut scores = Vec::new();
        let mut accs = Vec::new();
        for &a in &[0usize, 1] {
            for &b in &[1usize, 2] {
                for &c in &[0usize, 2] {
                    let labels = [a, a, b, b, c, c];
                    let am: f64 = labels.iter().enumerate().map(|(t, &l)| y_log[[t, l]]).sum();
                    let lm =
                        0.1 * ((a == 1) as usize + (b == 2) as usize + (c == 2) as usize) as f64;
                    scores.push(kappa * am + lm);
                    accs.push(
                        labels
                            .iter()
                            .zip(&reference)
                            .filter(|(x, y)| x == y)
                            .count() as f64,
                    );
                }
            }
        }
        let z = log_sum_exp(&scores);
        let want: f64 = scores
            .iter()
            .zip(&accs)
            .map(|(s, a)| (s - z).exp() * a)
            .sum();
        assert_abs_diff_eq!(obj, want, epsilon = 1e-10);
        // Objective sits inside [0, max accuracy].
        assert!((0.0..=6.0).contains(&obj));
    }

    #[test]
    fn smbr_rewards_raising_the_correct_label() {
        let mut logits = random_logits(4, 3, 17);
        let num = flat_lattice(4, &[0], &[0.0]);
        let den = flat_lattice(4, &[0, 1, 2], &[0.0, 0.0, 0.0]);
        let (before, _) = smbr_loss_grad(&num, &den, &logits, 1.0).unwrap();
        for t in 0..4 {
            logits[[t, 0]] += 1.0;
        }
        let (after, _) = smbr_loss_grad(&num, &den, &logits, 1.0).unwrap();
        assert!(after > before, "objective should rise: {before} -> {after}");
    }

    #[test]
    fn smbr_rejects_bad_lattices() {
        let logits = random_logits(4, 3, 18);
        let num = flat_lattice(4, &[0], &[0.0]);
        // Final node not at T.
        let den = flat_lattice(3, &[0], &[0.0]);
        assert!(matches!(
            smbr_loss_grad(&num, &den, &logits, 1.0).unwrap_err(),
            Error::Data(_)
        ));
        let mut backward = flat_lattice(4, &[0], &[0.0]);
        backward.nodes[1].frame = 0;
        assert!(backward.validate().is_err());
        assert!(matches!(
            smbr_loss_grad(&num, &num, &logits, 0.0).unwrap_err(),
            Error::InvalidConfig(_)
        ));
    }

    #[test]
    fn lattice_text_round_trip() {
        let iv = inv(3, true);
        let lat = segmented_lattice(&[0, 2, 5], &[vec![0, 1], vec![2]]);
        let text = lat.to_text(&iv);
        let back = Lattice::parse(&text, &iv).unwrap();
        assert_eq!(back, lat);

        // First node line defines the start even when it is not id 0.
        let text2 = "node 1 0\nnode 0 3\narc 1 0 l0 -1.5 0.0\nfinal 0\n";
        let lat2 = Lattice::parse(text2, &iv).unwrap();
        assert_eq!(lat2.start, 1);
        assert_eq!(lat2.nodes[1].frame, 0);
    }

    #[test]
    fn lattice_parse_rejects_malformed_input() {
        let iv = inv(2, false);
        for text in [
            "node 0 0\nnode 2 4\narc 0 2 l0 0 0\nfinal 2\n", // gap in ids
            "node 0 0\nnode 1 4\narc 0 1 zz 0 0\nfinal 1\n", // unknown label
            "node 0 4\nnode 1 0\narc 0 1 l0 0 0\nfinal 1\n", // backward arc
            "node 0 0\nnode 1 4\narc 0 1 l0 0 0\n",          // no final
            "node 0 0\nnode 0 1\nfinal 0\n",                 // duplicate node
            "wat 3\n",
        ] {
            assert!(Lattice::parse(text, &iv).is_err(), "accepted {text:?}");
        }
    }
}
