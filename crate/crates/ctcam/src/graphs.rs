//! Label inventories, pronunciation lexica and alignment graphs with
//! the forward-backward and Viterbi computations over them.
//!
//! An alignment graph encodes every frame-level labeling a transcript
//! permits. States emit labels; a path of `T` states scores `T` frames
//! of posteriors. CTC graphs interleave optional blanks with the
//! transcript labels, forced graphs are a plain left-to-right chain.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use ndarray::Array2;

use crate::error::{Error, Result};

pub type LabelId = usize;

/// Name reserved for the CTC blank label.
pub const BLANK_NAME: &str = "\u{27e8}b\u{27e9}"; // ⟨b⟩

/// What kind of unit an inventory enumerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InventoryKind {
    CiPhone,
    CdPhone,
    Word,
}

/// An ordered set of output labels. At most one label is the blank; a
/// model whose inventory has a blank trains with CTC, one without
/// trains frame-wise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelInventory {
    names: Vec<String>,
    index: HashMap<String, LabelId>,
    blank: Option<LabelId>,
    kind: InventoryKind,
}

impl LabelInventory {
    /// Build from names; a name equal to [`BLANK_NAME`] becomes the blank.
    pub fn from_names(names: Vec<String>, kind: InventoryKind) -> Result<LabelInventory> {
        let mut index = HashMap::new();
        let mut blank = None;
        for (id, name) in names.iter().enumerate() {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("bad label name {name:?}")));
            }
            if index.insert(name.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate label {name:?}")));
            }
            if name == BLANK_NAME {
                blank = Some(id);
            }
        }
        Ok(LabelInventory {
            names,
            index,
            blank,
            kind,
        })
    }

    /// Append a blank label, turning a frame-wise inventory into a CTC one.
    pub fn with_blank(mut self) -> Result<LabelInventory> {
        if self.blank.is_some() {
            return Err(Error::InvalidConfig("inventory already has a blank".into()));
        }
        let id = self.names.len();
        self.names.push(BLANK_NAME.to_string());
        self.index.insert(BLANK_NAME.to_string(), id);
        self.blank = Some(id);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn kind(&self) -> InventoryKind {
        self.kind
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<LabelId> {
        self.index.get(name).copied()
    }

    pub fn blank_id(&self) -> Option<LabelId> {
        self.blank
    }

    /// True when the inventory carries a blank label.
    pub fn is_ctc(&self) -> bool {
        self.blank.is_some()
    }

    /// Stable hash over names and kind; used to detect inventory
    /// mismatches between a checkpoint and the data fed to it.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        (self.kind as u8).hash(&mut h);
        self.names.hash(&mut h);
        h.finish()
    }

    /// One label name per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for name in &self.names {
            s.push_str(name);
            s.push('\n');
        }
        s
    }

    /// Parse the one-name-per-line format.
    pub fn parse(text: &str, kind: InventoryKind) -> Result<LabelInventory> {
        let names: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        if names.is_empty() {
            return Err(Error::Data("inventory file has no labels".into()));
        }
        LabelInventory::from_names(names, kind)
    }
}

/// Pronunciations per word, phones resolved against a phone inventory.
#[derive(Debug, Clone)]
pub struct Lexicon {
    words: Vec<String>,
    word_index: HashMap<String, usize>,
    prons: Vec<Vec<Vec<LabelId>>>,
}

pub type WordId = usize;

impl Lexicon {
    /// Parse lines of `word TAB phone phone ...`. Repeated words collect
    /// alternative pronunciations.
    pub fn parse(text: &str, phones: &LabelInventory) -> Result<Lexicon> {
        let mut lex = Lexicon {
            words: Vec::new(),
            word_index: HashMap::new(),
            prons: Vec::new(),
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, rest) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!(
                    "lexicon line {}: expected 'word TAB phones'",
                    lineno + 1
                ))
            })?;
            let mut pron = Vec::new();
            for tok in rest.split_whitespace() {
                let id = phones.id(tok).ok_or_else(|| {
                    Error::UnknownPhone(format!("lexicon line {}: {tok:?}", lineno + 1))
                })?;
                pron.push(id);
            }
            if pron.is_empty() {
                return Err(Error::Data(format!(
                    "lexicon line {}: empty pronunciation for {word:?}",
                    lineno + 1
                )));
            }
            let wid = *lex.word_index.entry(word.to_string()).or_insert_with(|| {
                lex.words.push(word.to_string());
                lex.prons.push(Vec::new());
                lex.words.len() - 1
            });
            lex.prons[wid].push(pron);
        }
        if lex.words.is_empty() {
            return Err(Error::Data("lexicon file has no entries".into()));
        }
        Ok(lex)
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_id(&self, word: &str) -> Option<WordId> {
        self.word_index.get(word).copied()
    }

    pub fn prons(&self, id: WordId) -> &[Vec<LabelId>] {
        &self.prons[id]
    }
}

/// A state-emitting alignment graph. Every state emits exactly one
/// label; paths of length `T` starting in an initial state and ending
/// in a final state are the admissible frame labelings.
#[derive(Debug, Clone)]
pub struct AlignmentGraph {
    emit: Vec<LabelId>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    initial: Vec<usize>,
    finals: Vec<usize>,
}

impl AlignmentGraph {
    fn new(emit: Vec<LabelId>) -> AlignmentGraph {
        let n = emit.len();
        AlignmentGraph {
            emit,
            preds: vec![Vec::new(); n],
            succs: vec![Vec::new(); n],
            initial: Vec::new(),
            finals: Vec::new(),
        }
    }

    fn add_arc(&mut self, from: usize, to: usize) {
        self.succs[from].push(to);
        self.preds[to].push(from);
    }

    pub fn n_states(&self) -> usize {
        self.emit.len()
    }

    pub fn emitted_label(&self, state: usize) -> LabelId {
        self.emit[state]
    }

    pub fn initial_states(&self) -> &[usize] {
        &self.initial
    }

    pub fn final_states(&self) -> &[usize] {
        &self.finals
    }

    pub fn successors(&self, state: usize) -> &[usize] {
        &self.succs[state]
    }
}

/// CTC alignment graph: optional blanks around and between transcript
/// labels, every state a self-loop, with the blank between repeated
/// identical labels mandatory.
///
/// For labels `l1..ln` the states are `b0 l1 b1 l2 ... ln bn`
/// (`2n + 1` of them). Paths may start at `b0` or `l1` and must end at
/// `ln` or `bn`.
pub fn build_ctc_graph(labels: &[LabelId], inv: &LabelInventory) -> Result<AlignmentGraph> {
    let blank = inv
        .blank_id()
        .ok_or_else(|| Error::NotCtc("CTC graph needs a blank in the inventory".into()))?;
    if labels.is_empty() {
        return Err(Error::Data("empty transcript".into()));
    }
    for &l in labels {
        if l >= inv.len() {
            return Err(Error::UnknownLabel(format!(
                "label id {l} outside inventory"
            )));
        }
        if l == blank {
            return Err(Error::UnknownLabel(
                "transcript contains the blank label".into(),
            ));
        }
    }
    let n = labels.len();
    let mut emit = Vec::with_capacity(2 * n + 1);
    for &l in labels {
        emit.push(blank);
        emit.push(l);
    }
    emit.push(blank);
    let mut g = AlignmentGraph::new(emit);
    for s in 0..g.n_states() {
        g.add_arc(s, s); // all states self-loop
        if s + 1 < g.n_states() {
            g.add_arc(s, s + 1);
        }
    }
    // Skip the blank between distinct consecutive labels.
    for k in 0..n - 1 {
        if labels[k] != labels[k + 1] {
            g.add_arc(2 * k + 1, 2 * k + 3);
        }
    }
    g.initial = vec![0, 1];
    g.finals = vec![2 * n - 1, 2 * n];
    Ok(g)
}

/// Forced graph: a left-to-right chain of the transcript labels, each
/// with a self-loop, no blanks, no skips.
pub fn build_forced_graph(labels: &[LabelId]) -> Result<AlignmentGraph> {
    if labels.is_empty() {
        return Err(Error::Data("empty transcript".into()));
    }
    let mut g = AlignmentGraph::new(labels.to_vec());
    for s in 0..g.n_states() {
        g.add_arc(s, s);
        if s + 1 < g.n_states() {
            g.add_arc(s, s + 1);
        }
    }
    g.initial = vec![0];
    g.finals = vec![g.n_states() - 1];
    Ok(g)
}

/// Log-sum-exp over a slice, returning negative infinity when empty.
pub fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        b
    } else if b == f64::NEG_INFINITY {
        a
    } else if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Per-label prior probabilities used to rescale posteriors during
/// realignment-style decoding and alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorVector {
    pub probs: Vec<f64>,
}

/// Result of [`forward_backward`]: total log score and per-frame label
/// occupancies.
#[derive(Debug, Clone)]
pub struct Occupancy {
    pub log_total: f64,
    /// `gamma[(t, l)]`: probability that frame `t` carries label `l`
    /// under the graph-constrained posterior distribution.
    pub gamma: Array2<f64>,
}

/// State-level score of frame `t` in state `s`: log posterior of the
/// emitted label, minus the log prior when priors are given.
fn state_score(
    g: &AlignmentGraph,
    post: &Array2<f64>,
    priors: Option<&PriorVector>,
    t: usize,
    s: usize,
) -> f64 {
    let l = g.emit[s];
    let mut v = post[[t, l]].ln();
    if let Some(p) = priors {
        v -= p.probs[l].ln();
    }
    v
}

fn check_graph_against(
    g: &AlignmentGraph,
    post: &Array2<f64>,
    priors: Option<&PriorVector>,
) -> Result<()> {
    if post.nrows() == 0 {
        return Err(Error::InputTooShort("posteriorgram has no frames".into()));
    }
    let n_labels = post.ncols();
    for &l in &g.emit {
        if l >= n_labels {
            return Err(Error::ShapeError(format!(
                "graph emits label {l} but posteriorgram has {n_labels} columns"
            )));
        }
    }
    if let Some(p) = priors {
        if p.probs.len() != n_labels {
            return Err(Error::ShapeError(format!(
                "priors have {} entries but posteriorgram has {n_labels} columns",
                p.probs.len()
            )));
        }
    }
    Ok(())
}

/// Forward-backward over an alignment graph.
///
/// Returns the log of the total path score and the frame-by-label
/// occupancy matrix `gamma`, whose rows each sum to one. Errors with an
/// empty alignment set when no path of the right length exists (for a
/// CTC graph that means `T < |labels|` after skips, for a forced graph
/// `T < |labels|`).
pub fn forward_backward(
    g: &AlignmentGraph,
    post: &Array2<f64>,
    priors: Option<&PriorVector>,
) -> Result<Occupancy> {
    check_graph_against(g, post, priors)?;
    let t_max = post.nrows();
    let n = g.n_states();

    let mut alpha = Array2::from_elem((t_max, n), f64::NEG_INFINITY);
    for &s in &g.initial {
        alpha[[0, s]] = state_score(g, post, priors, 0, s);
    }
    for t in 1..t_max {
        for s in 0..n {
            let mut acc = f64::NEG_INFINITY;
            for &p in &g.preds[s] {
                acc = lse2(acc, alpha[[t - 1, p]]);
            }
            if acc != f64::NEG_INFINITY {
                alpha[[t, s]] = acc + state_score(g, post, priors, t, s);
            }
        }
    }
    let log_total = log_sum_exp(
        &g.finals
            .iter()
            .map(|&s| alpha[[t_max - 1, s]])
            .collect::<Vec<_>>(),
    );
    if log_total == f64::NEG_INFINITY {
        return Err(Error::EmptyAlignmentSet(format!(
            "no path of length {t_max} through a {n}-state graph"
        )));
    }

    // beta[t][s]: score of completing from state s after consuming frame t.
    let mut beta = Array2::from_elem((t_max, n), f64::NEG_INFINITY);
    for &s in &g.finals {
        beta[[t_max - 1, s]] = 0.0;
    }
    for t in (0..t_max - 1).rev() {
        for s in 0..n {
            let mut acc = f64::NEG_INFINITY;
            for &nx in &g.succs[s] {
                let b = beta[[t + 1, nx]];
                if b != f64::NEG_INFINITY {
                    acc = lse2(acc, b + state_score(g, post, priors, t + 1, nx));
                }
            }
            beta[[t, s]] = acc;
        }
    }

    let n_labels = post.ncols();
    let mut gamma = Array2::zeros((t_max, n_labels));
    for t in 0..t_max {
        for s in 0..n {
            let w = alpha[[t, s]] + beta[[t, s]] - log_total;
            if w != f64::NEG_INFINITY {
                gamma[[t, g.emit[s]]] += w.exp();
            }
        }
    }
    Ok(Occupancy { log_total, gamma })
}

/// Best frame labeling under the graph, by Viterbi.
///
/// Ties resolve toward staying in the current state (and then toward
/// the lower-numbered predecessor), so among equally scored paths the
/// one that advances through the transcript as early as possible wins.
pub fn viterbi_align(
    g: &AlignmentGraph,
    post: &Array2<f64>,
    priors: Option<&PriorVector>,
) -> Result<Vec<LabelId>> {
    check_graph_against(g, post, priors)?;
    let t_max = post.nrows();
    let n = g.n_states();

    let mut delta = Array2::from_elem((t_max, n), f64::NEG_INFINITY);
    let mut back = Array2::from_elem((t_max, n), usize::MAX);
    for &s in &g.initial {
        delta[[0, s]] = state_score(g, post, priors, 0, s);
    }
    for t in 1..t_max {
        for s in 0..n {
            // Visit the self-loop first so it wins exact ties, then the
            // remaining predecessors in ascending order.
            let mut best = f64::NEG_INFINITY;
            let mut best_p = usize::MAX;
            let consider = |p: usize, best: &mut f64, best_p: &mut usize| {
                let v = delta[[t - 1, p]];
                if v > *best {
                    *best = v;
                    *best_p = p;
                }
            };
            if g.preds[s].contains(&s) {
                consider(s, &mut best, &mut best_p);
            }
            let mut sorted: Vec<usize> = g.preds[s].iter().copied().filter(|&p| p != s).collect();
            sorted.sort_unstable();
            for p in sorted {
                consider(p, &mut best, &mut best_p);
            }
            if best != f64::NEG_INFINITY {
                delta[[t, s]] = best + state_score(g, post, priors, t, s);
                back[[t, s]] = best_p;
            }
        }
    }

    let mut best = f64::NEG_INFINITY;
    let mut state = usize::MAX;
    for &s in &g.finals {
        if delta[[t_max - 1, s]] > best {
            best = delta[[t_max - 1, s]];
            state = s;
        }
    }
    if state == usize::MAX {
        return Err(Error::EmptyAlignmentSet(format!(
            "no path of length {t_max} through a {n}-state graph"
        )));
    }
    let mut states = vec![state; t_max];
    for t in (1..t_max).rev() {
        states[t - 1] = back[[t, states[t]]];
    }
    Ok(states.into_iter().map(|s| g.emit[s]).collect())
}

/// Viterbi path score (log), for checking against the forward total.
pub fn viterbi_score(
    g: &AlignmentGraph,
    post: &Array2<f64>,
    priors: Option<&PriorVector>,
) -> Result<f64> {
    let labels = viterbi_align(g, post, priors)?;
    // Rescore the returned labeling directly.
    let mut score = 0.0;
    for (t, &l) in labels.iter().enumerate() {
        score += post[[t, l]].ln();
        if let Some(p) = priors {
            score -= p.probs[l].ln();
        }
    }
    Ok(score)
}

/// Relative label frequencies over a set of frame alignments, floored
/// at 1e-8 and renormalized so unseen labels keep nonzero prior mass.
pub fn estimate_priors(aligns: &[Vec<LabelId>], inv: &LabelInventory) -> Result<PriorVector> {
    const FLOOR: f64 = 1e-8;
    let mut counts = vec![0usize; inv.len()];
    let mut total = 0usize;
    for a in aligns {
        for &l in a {
            if l >= inv.len() {
                return Err(Error::UnknownLabel(format!(
                    "alignment label {l} outside inventory"
                )));
            }
            counts[l] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data(
            "no alignment frames to estimate priors from".into(),
        ));
    }
    let mut probs: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / total as f64).max(FLOOR))
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    Ok(PriorVector { probs })
}
