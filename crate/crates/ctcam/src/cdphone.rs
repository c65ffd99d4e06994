//! Context-dependent whole-phone units: phone segment samples drawn
//! from alignments, divisive Gaussian clustering of those samples by
//! left/right context questions, context-to-unit mapping, and
//! percentile duration minima per clustered unit.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::graphs::{InventoryKind, LabelId, LabelInventory};

pub type PhoneId = LabelId;

/// Number of leading feature coefficients sampled at each anchor frame.
pub const ANCHOR_COEFFS: usize = 40;

/// Variance floor for the diagonal Gaussians scored during clustering.
pub const VARIANCE_FLOOR: f64 = 1e-4;

/// What sits next to a phone segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Context {
    /// Utterance edge.
    Boundary,
    Phone(PhoneId),
}

/// One whole-phone segment cut from an alignment: its contexts, its
/// acoustic summary vector and its length in frames.
#[derive(Debug, Clone)]
pub struct PhoneSample {
    pub phone: PhoneId,
    pub left: Context,
    pub right: Context,
    /// First `ANCHOR_COEFFS` coefficients at the segment's first,
    /// center and last frame, concatenated (3 x 40 = 120 dims).
    pub vector: Vec<f64>,
    pub duration: usize,
}

/// Cut an utterance's frame alignment into phone segments and summarize
/// each. Runs of `skip` (typically the blank) separate segments without
/// becoming contexts; contexts are the nearest kept neighbors, or the
/// utterance boundary.
pub fn collect_samples(
    alignment: &[PhoneId],
    feats: &FeatureMatrix,
    skip: Option<PhoneId>,
) -> Result<Vec<PhoneSample>> {
    if alignment.len() != feats.n_frames() {
        return Err(Error::ShapeError(format!(
            "alignment has {} frames but features have {}",
            alignment.len(),
            feats.n_frames()
        )));
    }
    if feats.dim() < ANCHOR_COEFFS {
        return Err(Error::ShapeError(format!(
            "need at least {ANCHOR_COEFFS} feature coefficients, got {}",
            feats.dim()
        )));
    }
    // Run-length segments, then drop the skipped label's runs.
    let mut runs: Vec<(PhoneId, usize, usize)> = Vec::new(); // (phone, start, len)
    for (t, &l) in alignment.iter().enumerate() {
        match runs.last_mut() {
            Some((p, _, len)) if *p == l => *len += 1,
            _ => runs.push((l, t, 1)),
        }
    }
    runs.retain(|&(p, _, _)| Some(p) != skip);

    let mut out = Vec::with_capacity(runs.len());
    for (i, &(phone, start, len)) in runs.iter().enumerate() {
        let left = if i == 0 {
            Context::Boundary
        } else {
            Context::Phone(runs[i - 1].0)
        };
        let right = if i + 1 == runs.len() {
            Context::Boundary
        } else {
            Context::Phone(runs[i + 1].0)
        };
        let anchors = [start, start + (len - 1) / 2, start + len - 1];
        let mut vector = Vec::with_capacity(3 * ANCHOR_COEFFS);
        for &t in &anchors {
            vector.extend(feats.data.row(t).iter().take(ANCHOR_COEFFS));
        }
        out.push(PhoneSample {
            phone,
            left,
            right,
            vector,
            duration: len,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// A yes/no context question: does the neighbor on `side` belong to
/// `phones`? A boundary always answers no.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub name: String,
    pub side: Side,
    pub phones: BTreeSet<PhoneId>,
}

impl Question {
    pub fn answer(&self, sample: &PhoneSample) -> bool {
        let ctx = match self.side {
            Side::Left => sample.left,
            Side::Right => sample.right,
        };
        match ctx {
            Context::Boundary => false,
            Context::Phone(p) => self.phones.contains(&p),
        }
    }
}

const PHONE_CLASSES: &[(&str, &[&str])] = &[
    (
        "vowel",
        &[
            "aa", "ae", "ah", "ao", "aw", "ax", "ay", "eh", "er", "ey", "ih", "iy", "ow", "oy",
            "uh", "uw",
        ],
    ),
    ("nasal", &["m", "n", "ng", "em", "en"]),
    ("plosive", &["p", "b", "t", "d", "k", "g"]),
    (
        "fricative",
        &["f", "v", "th", "dh", "s", "z", "sh", "zh", "hh"],
    ),
    ("affricate", &["ch", "jh"]),
    ("approximant", &["l", "r", "w", "y", "el"]),
    ("silence", &["sil", "sp", "spn"]),
];

/// Built-in question inventory: one class question per phone class with
/// members in the inventory, plus a singleton question per phone, on
/// both sides. The blank label, if present, never appears in a set.
pub fn default_questions(phones: &LabelInventory) -> Vec<Question> {
    let mut out = Vec::new();
    let blank = phones.blank_id();
    for (side, tag) in [(Side::Left, "L"), (Side::Right, "R")] {
        for (class_name, members) in PHONE_CLASSES {
            let ids: BTreeSet<PhoneId> = members
                .iter()
                .filter_map(|m| phones.id(m))
                .filter(|id| Some(*id) != blank)
                .collect();
            if !ids.is_empty() {
                out.push(Question {
                    name: format!("{tag}-{class_name}"),
                    side,
                    phones: ids,
                });
            }
        }
        for id in 0..phones.len() {
            if Some(id) == blank {
                continue;
            }
            out.push(Question {
                name: format!("{tag}-{}", phones.name(id)),
                side,
                phones: BTreeSet::from([id]),
            });
        }
    }
    out
}

/// Log likelihood of a sample set under a diagonal Gaussian fit to it:
/// `-(n/2) * sum_d (ln(2 pi var_d) + 1)`, variances floored.
fn set_log_likelihood(samples: &[PhoneSample], idx: &[usize]) -> f64 {
    let n = idx.len();
    if n == 0 {
        return 0.0;
    }
    let dim = samples[idx[0]].vector.len();
    let mut acc = 0.0;
    for d in 0..dim {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for &i in idx {
            let v = samples[i].vector[d];
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(VARIANCE_FLOOR);
        acc += (2.0 * std::f64::consts::PI * var).ln() + 1.0;
    }
    -0.5 * n as f64 * acc
}

#[derive(Debug, Clone, Copy)]
pub struct TreeGrowOptions {
    /// Global cap across all phones' trees.
    pub max_leaves: usize,
    /// Smallest likelihood gain worth splitting for.
    pub min_gain: f64,
    /// Smallest sample count either child may have.
    pub min_leaf_count: usize,
}

impl Default for TreeGrowOptions {
    fn default() -> Self {
        TreeGrowOptions {
            max_leaves: 1000,
            min_gain: 0.0,
            min_leaf_count: 3,
        }
    }
}

/// Decision tree node; splits reference a question by index into the
/// owning [`TreeSet`]'s question list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeNode {
    Leaf(usize),
    Split {
        question: usize,
        yes: Box<TreeNode>,
        no: Box<TreeNode>,
    },
}

/// One executed split, in execution order (which is descending gain).
#[derive(Debug, Clone)]
pub struct SplitRecord {
    pub phone: PhoneId,
    pub question: usize,
    pub gain: f64,
    pub n_yes: usize,
    pub n_no: usize,
}

/// Per-phone context decision trees sharing one question list. Leaf ids
/// are dense over the whole set, ordered by phone and then preorder
/// within a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSet {
    pub questions: Vec<Question>,
    trees: BTreeMap<PhoneId, TreeNode>,
    n_leaves: usize,
    n_phones: usize,
}

impl TreeSet {
    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn covered_phones(&self) -> impl Iterator<Item = PhoneId> + '_ {
        self.trees.keys().copied()
    }

    /// Map a phone in context to its clustered unit id.
    pub fn map_context(&self, phone: PhoneId, left: Context, right: Context) -> Result<usize> {
        if phone >= self.n_phones {
            return Err(Error::UnknownPhone(format!(
                "phone id {phone} outside inventory"
            )));
        }
        let mut node = self
            .trees
            .get(&phone)
            .ok_or_else(|| Error::UncoveredPhone(format!("phone id {phone} has no tree")))?;
        let probe = PhoneSample {
            phone,
            left,
            right,
            vector: Vec::new(),
            duration: 0,
        };
        loop {
            match node {
                TreeNode::Leaf(id) => return Ok(*id),
                TreeNode::Split { question, yes, no } => {
                    node = if self.questions[*question].answer(&probe) {
                        yes
                    } else {
                        no
                    };
                }
            }
        }
    }

    /// Unit id for every sample.
    pub fn map_sample(&self, sample: &PhoneSample) -> Result<usize> {
        self.map_context(sample.phone, sample.left, sample.right)
    }

    /// Label inventory over the clustered units, named
    /// `<phone>#<leaf id>`, in leaf-id order.
    pub fn cd_inventory(&self, phones: &LabelInventory) -> Result<LabelInventory> {
        let mut names = vec![String::new(); self.n_leaves];
        for (&phone, root) in &self.trees {
            let mut stack = vec![root];
            while let Some(node) = stack.pop() {
                match node {
                    TreeNode::Leaf(id) => {
                        names[*id] = format!("{}#{id}", phones.name(phone));
                    }
                    TreeNode::Split { yes, no, .. } => {
                        stack.push(yes);
                        stack.push(no);
                    }
                }
            }
        }
        LabelInventory::from_names(names, InventoryKind::CdPhone)
    }
}

/// Grow per-phone trees by greedy divisive clustering.
///
/// All phones' leaves compete in one pool: at each step the split with
/// the largest likelihood gain anywhere executes, until the gain falls
/// below `min_gain`, a child would fall under `min_leaf_count`, or the
/// global leaf count reaches `max_leaves`. Setting `max_leaves` to the
/// number of distinct phones (or `min_gain` to infinity) therefore
/// yields context-independent trees.
pub fn grow_trees(
    samples: &[PhoneSample],
    questions: &[Question],
    opts: &TreeGrowOptions,
    n_phones: usize,
) -> Result<(TreeSet, Vec<SplitRecord>)> {
    if samples.is_empty() {
        return Err(Error::Data("no phone samples to cluster".into()));
    }
    if opts.max_leaves == 0 || opts.min_leaf_count == 0 {
        return Err(Error::InvalidConfig(
            "max_leaves and min_leaf_count must be positive".into(),
        ));
    }
    for s in samples {
        if s.phone >= n_phones {
            return Err(Error::UnknownPhone(format!(
                "sample phone id {} outside inventory",
                s.phone
            )));
        }
    }

    // Work nodes; leaves carry their precomputed best split.
    struct Work {
        phone: PhoneId,
        /// (question, gain, yes set, no set), best admissible split.
        best: Option<(usize, f64, Vec<usize>, Vec<usize>)>,
    }
    enum Node {
        Leaf(usize), // index into work arena
        Split {
            question: usize,
            yes: usize,
            no: usize,
        }, // node arena indices
    }

    let evaluate = |idx: &Vec<usize>, ll: f64| -> Option<(usize, f64, Vec<usize>, Vec<usize>)> {
        let mut best: Option<(usize, f64, Vec<usize>, Vec<usize>)> = None;
        for (qi, q) in questions.iter().enumerate() {
            let (yes, no): (Vec<usize>, Vec<usize>) =
                idx.iter().partition(|&&i| q.answer(&samples[i]));
            if yes.len() < opts.min_leaf_count || no.len() < opts.min_leaf_count {
                continue;
            }
            let gain = set_log_likelihood(samples, &yes) + set_log_likelihood(samples, &no) - ll;
            if best.as_ref().is_none_or(|b| gain > b.1) {
                best = Some((qi, gain, yes, no));
            }
        }
        best.filter(|b| b.1 >= opts.min_gain && b.1.is_finite())
    };

    let mut work: Vec<Work> = Vec::new();
    let mut arena: Vec<Node> = Vec::new();
    let mut roots: BTreeMap<PhoneId, usize> = BTreeMap::new(); // phone -> arena idx
    let mut by_phone: BTreeMap<PhoneId, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_phone.entry(s.phone).or_default().push(i);
    }
    for (phone, idx) in by_phone {
        let ll = set_log_likelihood(samples, &idx);
        let best = evaluate(&idx, ll);
        work.push(Work { phone, best });
        arena.push(Node::Leaf(work.len() - 1));
        roots.insert(phone, arena.len() - 1);
    }

    let mut live: Vec<usize> = (0..arena.len()).collect(); // arena leaf indices
    let mut n_leaves = roots.len();
    let mut records = Vec::new();
    while n_leaves < opts.max_leaves {
        // Highest gain; ties toward the lower phone id, then the node
        // created earlier. Question ties already resolved per node.
        let mut chosen: Option<(usize, f64)> = None;
        for &ni in &live {
            let Node::Leaf(wi) = arena[ni] else {
                unreachable!()
            };
            if let Some((_, gain, _, _)) = &work[wi].best {
                let better = match chosen {
                    None => true,
                    Some((_, cgain)) if *gain != cgain => *gain > cgain,
                    Some((cni, _)) => {
                        let Node::Leaf(cwi) = arena[cni] else {
                            unreachable!()
                        };
                        (work[wi].phone, ni) < (work[cwi].phone, cni)
                    }
                };
                if better {
                    chosen = Some((ni, *gain));
                }
            }
        }
        let Some((ni, _)) = chosen else { break };

        let Node::Leaf(wi) = arena[ni] else {
            unreachable!()
        };
        let (qi, gain, yes_idx, no_idx) = work[wi].best.take().unwrap();
        records.push(SplitRecord {
            phone: work[wi].phone,
            question: qi,
            gain,
            n_yes: yes_idx.len(),
            n_no: no_idx.len(),
        });
        let phone = work[wi].phone;
        let mut make_child = |idx: Vec<usize>| -> usize {
            let ll = set_log_likelihood(samples, &idx);
            let best = evaluate(&idx, ll);
            work.push(Work { phone, best });
            arena.push(Node::Leaf(work.len() - 1));
            arena.len() - 1
        };
        let yes_node = make_child(yes_idx);
        let no_node = make_child(no_idx);
        arena[ni] = Node::Split {
            question: qi,
            yes: yes_node,
            no: no_node,
        };
        live.retain(|&x| x != ni);
        live.push(yes_node);
        live.push(no_node);
        n_leaves += 1;
    }

    // Freeze: dense leaf ids by phone, then preorder (yes before no).
    let mut next_id = 0usize;
    let mut trees = BTreeMap::new();
    fn freeze(arena: &[Node], ni: usize, next_id: &mut usize) -> TreeNode {
        match &arena[ni] {
            Node::Leaf(_) => {
                let id = *next_id;
                *next_id += 1;
                TreeNode::Leaf(id)
            }
            Node::Split { question, yes, no } => TreeNode::Split {
                question: *question,
                yes: Box::new(freeze(arena, *yes, next_id)),
                no: Box::new(freeze(arena, *no, next_id)),
            },
        }
    }
    for (phone, root) in roots {
        trees.insert(phone, freeze(&arena, root, &mut next_id));
    }
    let set = TreeSet {
        questions: questions.to_vec(),
        trees,
        n_leaves: next_id,
        n_phones,
    };
    Ok((set, records))
}

/// Per-unit minimum durations: the given percentile of the observed
/// segment durations mapped to each unit (smallest duration whose
/// cumulative share reaches the percentile), floored at one frame.
/// Units with no samples default to one frame.
pub fn duration_minima(
    samples: &[PhoneSample],
    trees: &TreeSet,
    percentile: f64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&percentile) {
        return Err(Error::InvalidConfig(format!(
            "percentile must be in [0, 1], got {percentile}"
        )));
    }
    let mut durations: Vec<Vec<usize>> = vec![Vec::new(); trees.n_leaves()];
    for s in samples {
        durations[trees.map_sample(s)?].push(s.duration);
    }
    let mut out = Vec::with_capacity(durations.len());
    for mut ds in durations {
        if ds.is_empty() {
            out.push(1);
            continue;
        }
        ds.sort_unstable();
        let n = ds.len();
        let mut pick = ds[0];
        for (i, &d) in ds.iter().enumerate() {
            if (i + 1) as f64 / n as f64 >= percentile {
                pick = d;
                break;
            }
        }
        out.push(pick.max(1));
    }
    Ok(out)
}

// --- tree file format ---

fn side_str(s: Side) -> &'static str {
    match s {
        Side::Left => "left",
        Side::Right => "right",
    }
}

impl TreeSet {
    /// Serialize: a `questions` section (one per line: name, side,
    /// phone names), then a `trees` section with one s-expression per
    /// phone. Nodes are `(question yes no)`, leaves are bare unit ids.
    pub fn to_text(&self, phones: &LabelInventory) -> String {
        let mut s = String::new();
        s.push_str(&format!("questions {}\n", self.questions.len()));
        for q in &self.questions {
            s.push_str(&format!("{} {}", q.name, side_str(q.side)));
            for &p in &q.phones {
                s.push(' ');
                s.push_str(phones.name(p));
            }
            s.push('\n');
        }
        s.push_str(&format!("trees {}\n", self.trees.len()));
        for (&phone, root) in &self.trees {
            s.push_str(phones.name(phone));
            s.push(' ');
            write_sexpr(root, &self.questions, &mut s);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, phones: &LabelInventory) -> Result<TreeSet> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let bad = |msg: String| Error::Data(format!("tree file: {msg}"));

        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let n_questions: usize = header
            .strip_prefix("questions ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("expected 'questions <n>', got {header:?}")))?;
        let mut questions = Vec::with_capacity(n_questions);
        let mut q_index = BTreeMap::new();
        for _ in 0..n_questions {
            let line = lines
                .next()
                .ok_or_else(|| bad("truncated questions section".into()))?;
            let mut toks = line.split_whitespace();
            let name = toks
                .next()
                .ok_or_else(|| bad("question without a name".into()))?;
            let side = match toks.next() {
                Some("left") => Side::Left,
                Some("right") => Side::Right,
                other => return Err(bad(format!("bad question side {other:?}"))),
            };
            let mut set = BTreeSet::new();
            for tok in toks {
                let id = phones.id(tok).ok_or_else(|| {
                    Error::UnknownPhone(format!("tree file question phone {tok:?}"))
                })?;
                set.insert(id);
            }
            if q_index.insert(name.to_string(), questions.len()).is_some() {
                return Err(bad(format!("duplicate question {name:?}")));
            }
            questions.push(Question {
                name: name.to_string(),
                side,
                phones: set,
            });
        }

        let header = lines
            .next()
            .ok_or_else(|| bad("missing trees section".into()))?;
        let n_trees: usize = header
            .strip_prefix("trees ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("expected 'trees <n>', got {header:?}")))?;
        let mut trees = BTreeMap::new();
        let mut leaf_ids = Vec::new();
        for _ in 0..n_trees {
            let line = lines
                .next()
                .ok_or_else(|| bad("truncated trees section".into()))?;
            let (phone_name, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("expected '<phone> <tree>', got {line:?}")))?;
            let phone = phones
                .id(phone_name)
                .ok_or_else(|| Error::UnknownPhone(format!("tree file phone {phone_name:?}")))?;
            let mut toks = tokenize_sexpr(rest);
            let node = parse_sexpr(&mut toks, &q_index, &mut leaf_ids)?;
            if toks.next().is_some() {
                return Err(bad(format!(
                    "trailing tokens after tree for {phone_name:?}"
                )));
            }
            if trees.insert(phone, node).is_some() {
                return Err(bad(format!("duplicate tree for {phone_name:?}")));
            }
        }
        if lines.next().is_some() {
            return Err(bad("trailing lines after trees section".into()));
        }

        leaf_ids.sort_unstable();
        if leaf_ids.iter().enumerate().any(|(i, &id)| i != id) {
            return Err(bad("leaf ids are not dense".into()));
        }
        Ok(TreeSet {
            questions,
            trees,
            n_leaves: leaf_ids.len(),
            n_phones: phones.len(),
        })
    }
}

fn write_sexpr(node: &TreeNode, questions: &[Question], out: &mut String) {
    match node {
        TreeNode::Leaf(id) => out.push_str(&id.to_string()),
        TreeNode::Split { question, yes, no } => {
            out.push('(');
            out.push_str(&questions[*question].name);
            out.push(' ');
            write_sexpr(yes, questions, out);
            out.push(' ');
            write_sexpr(no, questions, out);
            out.push(')');
        }
    }
}

fn tokenize_sexpr(text: &str) -> std::vec::IntoIter<String> {
    text.replace('(', " ( ")
        .replace(')', " ) ")
        .split_whitespace()
        .map(str::to_string)
        .collect::<Vec<_>>()
        .into_iter()
}

fn parse_sexpr(
    toks: &mut std::vec::IntoIter<String>,
    q_index: &BTreeMap<String, usize>,
    leaf_ids: &mut Vec<usize>,
) -> Result<TreeNode> {
    let bad = |msg: String| Error::Data(format!("tree file: {msg}"));
    match toks.next().as_deref() {
        Some("(") => {
            let name = toks
                .next()
                .ok_or_else(|| bad("split without a question".into()))?;
            let question = *q_index
                .get(&name)
                .ok_or_else(|| bad(format!("unknown question {name:?} in tree")))?;
            let yes = parse_sexpr(toks, q_index, leaf_ids)?;
            let no = parse_sexpr(toks, q_index, leaf_ids)?;
            match toks.next().as_deref() {
                Some(")") => Ok(TreeNode::Split {
                    question,
                    yes: Box::new(yes),
                    no: Box::new(no),
                }),
                _ => Err(bad("unbalanced parentheses".into())),
            }
        }
        Some(")") => Err(bad("unexpected ')'".into())),
        Some(atom) => {
            let id: usize = atom
                .parse()
                .map_err(|_| bad(format!("bad leaf id {atom:?}")))?;
            leaf_ids.push(id);
            Ok(TreeNode::Leaf(id))
        }
        None => Err(bad("truncated tree expression".into())),
    }
}
