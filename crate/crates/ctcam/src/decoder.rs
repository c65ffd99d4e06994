//! Word decoding and scoring: a lexicon and n-gram weights compose
//! into a decoding graph, a frame-synchronous beam search runs a
//! posteriorgram against that graph and emits a best hypothesis plus a
//! pruned lattice, and a separate greedy path turns CTC posteriors
//! straight into label sequences. Word error rate scoring lives here
//! too.

use std::collections::{HashMap, HashSet, VecDeque};

use ndarray::Array2;

use crate::cdphone::{Context, TreeSet};
use crate::criteria::{Lattice, LatticeArc, LatticeNode};
use crate::error::{Error, Result};
use crate::graphs::{LabelId, LabelInventory, Lexicon, WordId};
use crate::nnet::Posteriorgram;

const LN_10: f64 = std::f64::consts::LN_10;

/// Unigram and bigram word weights. File weights are log10
/// probabilities; they are converted to natural log on parse so that
/// every score in the decoder shares one base. Bigram lookups fall
/// back to the unigram weight of the successor word.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    unigrams: Vec<f64>,
    bigrams: HashMap<(WordId, WordId), f64>,
}

impl LanguageModel {
    /// Equal unigram weight `ln(1/n)` for every word, no bigrams.
    pub fn uniform(n_words: usize) -> LanguageModel {
        LanguageModel {
            unigrams: vec![-(n_words.max(1) as f64).ln(); n_words],
            bigrams: HashMap::new(),
        }
    }

    /// Parse lines of `unigram <word> <log10 prob>` and
    /// `bigram <word> <word> <log10 prob>`. Words must exist in the
    /// lexicon. Words without a unigram line are never entered except
    /// through an explicit bigram.
    pub fn parse(text: &str, lex: &Lexicon) -> Result<LanguageModel> {
        let mut lm = LanguageModel {
            unigrams: vec![f64::NEG_INFINITY; lex.n_words()],
            bigrams: HashMap::new(),
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::Data(format!("lm line {}: {msg}", lineno + 1));
            let toks: Vec<&str> = line.split_whitespace().collect();
            let word_id = |w: &str| {
                lex.word_id(w).ok_or_else(|| {
                    Error::LexiconGap(format!("lm line {}: word {w:?} not in lexicon", lineno + 1))
                })
            };
            match toks.as_slice() {
                ["unigram", w, v] => {
                    let v: f64 = v.parse().map_err(|_| bad("bad weight"))?;
                    if !v.is_finite() {
                        return Err(bad("weight must be finite"));
                    }
                    lm.unigrams[word_id(w)?] = v * LN_10;
                }
                ["bigram", w1, w2, v] => {
                    let v: f64 = v.parse().map_err(|_| bad("bad weight"))?;
                    if !v.is_finite() {
                        return Err(bad("weight must be finite"));
                    }
                    lm.bigrams.insert((word_id(w1)?, word_id(w2)?), v * LN_10);
                }
                _ => return Err(bad("expected 'unigram <w> <p>' or 'bigram <w1> <w2> <p>'")),
            }
        }
        Ok(lm)
    }

    pub fn has_bigrams(&self) -> bool {
        !self.bigrams.is_empty()
    }

    pub fn unigram(&self, w: WordId) -> f64 {
        self.unigrams[w]
    }

    /// Natural-log weight of `w` after history `h` (`None` at the
    /// utterance start).
    pub fn score(&self, h: Option<WordId>, w: WordId) -> f64 {
        h.and_then(|h| self.bigrams.get(&(h, w)).copied())
            .unwrap_or(self.unigrams[w])
    }
}

/// One decoding graph transition. `label: None` marks an epsilon arc
/// crossed without consuming a frame; `word` marks the end of a word
/// on the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeArc {
    pub from: usize,
    pub to: usize,
    pub label: Option<LabelId>,
    pub word: Option<WordId>,
    pub weight: f64,
}

/// Static search network over acoustic labels with word outputs.
#[derive(Debug, Clone)]
pub struct DecodeGraph {
    arcs: Vec<DecodeArc>,
    emit_from: Vec<Vec<usize>>,
    eps_from: Vec<Vec<usize>>,
    start: usize,
    finals: Vec<bool>,
    n_labels: usize,
    blank: Option<LabelId>,
}

impl DecodeGraph {
    pub fn n_states(&self) -> usize {
        self.finals.len()
    }

    pub fn arcs(&self) -> &[DecodeArc] {
        &self.arcs
    }

    pub fn start_state(&self) -> usize {
        self.start
    }

    pub fn is_final(&self, state: usize) -> bool {
        self.finals[state]
    }

    pub fn blank(&self) -> Option<LabelId> {
        self.blank
    }

    /// Size of the acoustic inventory the graph was built over.
    pub fn n_labels(&self) -> usize {
        self.n_labels
    }
}

#[derive(Debug, Clone, Default)]
pub struct DecodeGraphOptions {
    /// Insert optional blank states between and around words (CTC
    /// models). Requires a blank in the acoustic inventory.
    pub allow_blank: bool,
    /// Minimum segment length in frames per acoustic label id; a label
    /// with minimum d expands to a chain of d states before its
    /// self-loop. Missing entries default to 1.
    pub min_duration: Option<Vec<usize>>,
}

/// Expand the lexicon into phone (or clustered-unit) state chains and
/// wire them through per-history loop states weighted by the language
/// model. With `tree` present, pronunciation phones map to clustered
/// units using within-word contexts, word edges counting as
/// boundaries.
pub fn build_decode_graph(
    lex: &Lexicon,
    lm: &LanguageModel,
    inv: &LabelInventory,
    tree: Option<&TreeSet>,
    opts: &DecodeGraphOptions,
) -> Result<DecodeGraph> {
    if lm.unigrams.len() != lex.n_words() {
        return Err(Error::ShapeError(format!(
            "language model covers {} words, lexicon has {}",
            lm.unigrams.len(),
            lex.n_words()
        )));
    }
    let blank = if opts.allow_blank {
        Some(inv.blank_id().ok_or_else(|| {
            Error::NotCtc("blank states requested but the inventory has no blank".into())
        })?)
    } else {
        None
    };
    let min_dur = |unit: LabelId| -> usize {
        opts.min_duration
            .as_ref()
            .and_then(|v| v.get(unit).copied())
            .unwrap_or(1)
            .max(1)
    };

    let mut arcs: Vec<DecodeArc> = Vec::new();
    let mut n_states = 0usize;
    let mut new_state = || {
        n_states += 1;
        n_states - 1
    };

    // Loop states: one per bigram history plus the utterance start.
    // A word's exit always returns to that word's own loop state, so
    // chains are built once and shared across histories.
    let start = new_state();
    let word_loop: Vec<usize> = if lm.has_bigrams() {
        (0..lex.n_words()).map(|_| new_state()).collect()
    } else {
        vec![start; lex.n_words()]
    };
    let loops: Vec<usize> = {
        let mut l = vec![start];
        if lm.has_bigrams() {
            l.extend(word_loop.iter().copied());
        }
        l.sort_unstable();
        l.dedup();
        l
    };
    if let Some(b) = blank {
        for &s in &loops {
            arcs.push(DecodeArc {
                from: s,
                to: s,
                label: Some(b),
                word: None,
                weight: 0.0,
            });
        }
    }

    // Pronunciation chains. Each yields an entry junction and an exit
    // junction; entries are wired from every loop state afterwards.
    let mut entries: Vec<(WordId, usize)> = Vec::new();
    for (w, &exit_loop) in word_loop.iter().enumerate() {
        for pron in lex.prons(w) {
            if pron.is_empty() {
                return Err(Error::Data(format!(
                    "word {:?} has an empty pronunciation",
                    lex.word(w)
                )));
            }
            let units: Vec<LabelId> = match tree {
                None => pron.clone(),
                Some(t) => {
                    let mut u = Vec::with_capacity(pron.len());
                    for (i, &p) in pron.iter().enumerate() {
                        let left = if i == 0 {
                            Context::Boundary
                        } else {
                            Context::Phone(pron[i - 1])
                        };
                        let right = if i + 1 == pron.len() {
                            Context::Boundary
                        } else {
                            Context::Phone(pron[i + 1])
                        };
                        u.push(t.map_context(p, left, right)?);
                    }
                    u
                }
            };
            for &u in &units {
                if u >= inv.len() {
                    return Err(Error::UnknownLabel(format!(
                        "word {:?} expands to unit {u} outside the {}-label inventory",
                        lex.word(w),
                        inv.len()
                    )));
                }
            }

            let entry = new_state();
            let mut cur = entry;
            for (i, &u) in units.iter().enumerate() {
                for _ in 0..min_dur(u) {
                    let next = new_state();
                    arcs.push(DecodeArc {
                        from: cur,
                        to: next,
                        label: Some(u),
                        word: None,
                        weight: 0.0,
                    });
                    cur = next;
                }
                arcs.push(DecodeArc {
                    from: cur,
                    to: cur,
                    label: Some(u),
                    word: None,
                    weight: 0.0,
                });
                if i + 1 < units.len() {
                    let junction = new_state();
                    if let Some(b) = blank {
                        let bs = new_state();
                        arcs.push(DecodeArc {
                            from: cur,
                            to: bs,
                            label: Some(b),
                            word: None,
                            weight: 0.0,
                        });
                        arcs.push(DecodeArc {
                            from: bs,
                            to: bs,
                            label: Some(b),
                            word: None,
                            weight: 0.0,
                        });
                        arcs.push(DecodeArc {
                            from: bs,
                            to: junction,
                            label: None,
                            word: None,
                            weight: 0.0,
                        });
                    }
                    // A repeated unit needs the blank in between to keep
                    // its two segments distinct; distinct units may abut.
                    if units[i + 1] != u || blank.is_none() {
                        arcs.push(DecodeArc {
                            from: cur,
                            to: junction,
                            label: None,
                            word: None,
                            weight: 0.0,
                        });
                    }
                    cur = junction;
                }
            }
            arcs.push(DecodeArc {
                from: cur,
                to: exit_loop,
                label: None,
                word: Some(w),
                weight: 0.0,
            });
            entries.push((w, entry));
        }
    }

    // Language model entry arcs from every loop state.
    let mut any_entry = false;
    for &s in &loops {
        let history = if lm.has_bigrams() {
            word_loop.iter().position(|&l| l == s)
        } else {
            None
        };
        for &(w, entry) in &entries {
            let weight = lm.score(history, w);
            if weight == f64::NEG_INFINITY {
                continue;
            }
            if !weight.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "non-finite language model weight for word {:?}",
                    lex.word(w)
                )));
            }
            arcs.push(DecodeArc {
                from: s,
                to: entry,
                label: None,
                word: None,
                weight,
            });
            any_entry = true;
        }
    }
    if !any_entry {
        return Err(Error::InvalidConfig("language model admits no word".into()));
    }

    let mut finals = vec![false; n_states];
    for &s in &loops {
        finals[s] = true;
    }
    let mut emit_from = vec![Vec::new(); n_states];
    let mut eps_from = vec![Vec::new(); n_states];
    for (i, a) in arcs.iter().enumerate() {
        match a.label {
            Some(_) => emit_from[a.from].push(i),
            None => eps_from[a.from].push(i),
        }
    }
    Ok(DecodeGraph {
        arcs,
        emit_from,
        eps_from,
        start,
        finals,
        n_labels: inv.len(),
        blank,
    })
}

#[derive(Debug, Clone)]
pub struct DecodeParams {
    /// Score window below the best live token; tokens outside it are
    /// dropped each frame.
    pub beam: f64,
    /// Hard cap on live tokens per frame.
    pub max_active: usize,
    /// Weight on the acoustic log posterior against graph weights.
    pub am_weight: f64,
    /// The blank posterior is divided by this before scoring.
    pub blank_scale: f64,
    /// Distinct word sequences kept in the output lattice.
    pub lattice_nbest: usize,
    /// Distinct word histories retained per graph state while decoding.
    /// The best token at each state always survives this cap, so under
    /// wide beams the best hypothesis is unaffected; the cap bounds how
    /// much alternative-hypothesis diversity reaches the lattice.
    pub nbest_per_state: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            beam: 16.0,
            max_active: 5000,
            am_weight: 1.0,
            blank_scale: 1.0,
            lattice_nbest: 50,
            nbest_per_state: 4,
        }
    }
}

impl DecodeParams {
    /// Preset for clustered-unit CTC models, which decode better with
    /// the acoustics weighted up.
    pub fn cd_ctc() -> Self {
        DecodeParams {
            am_weight: 2.1,
            ..DecodeParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam.is_nan() || self.beam <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "beam must be positive, got {}",
                self.beam
            )));
        }
        if !self.am_weight.is_finite() || self.am_weight <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "am_weight must be positive and finite, got {}",
                self.am_weight
            )));
        }
        if !self.blank_scale.is_finite() || self.blank_scale <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "blank_scale must be positive and finite, got {}",
                self.blank_scale
            )));
        }
        if self.max_active == 0 || self.lattice_nbest == 0 || self.nbest_per_state == 0 {
            return Err(Error::InvalidConfig(
                "max_active, lattice_nbest and nbest_per_state must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A decoded word sequence with its total log score and per-word frame
/// spans `[start, end)`.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub words: Vec<WordId>,
    pub score: f64,
    pub word_bounds: Vec<(usize, usize)>,
}

impl Hypothesis {
    pub fn words_text(&self, lex: &Lexicon) -> String {
        self.words
            .iter()
            .map(|&w| lex.word(w))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

enum TraceStep {
    /// A new run of `label` started at frame `start`; `lm` carries the
    /// graph weights crossed since the previous emission.
    Run {
        label: LabelId,
        start: usize,
        lm: f64,
    },
    /// A word ended after consuming `end` frames.
    Word { word: WordId, end: usize },
}

struct TraceNode {
    step: TraceStep,
    parent: Option<usize>,
}

#[derive(Clone, Copy)]
struct Token {
    score: f64,
    trace: Option<usize>,
    /// Hash of the full arc sequence; exact score ties resolve toward
    /// the smaller hash to keep results order-independent. The word
    /// sequence hash that deduplicates hypotheses lives in the token
    /// map key.
    phash: u64,
    run_label: Option<LabelId>,
    pending_lm: f64,
}

/// Token map key: graph state paired with the word-sequence hash that
/// keeps distinct hypotheses apart.
type TokenKey = (usize, u64);
type KeyedToken = (TokenKey, Token);

const HASH_SEED: u64 = 0xcbf2_9ce4_8422_2325;

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x100_0000_01b3)
}

fn better(score: f64, phash: u64, than: &Token) -> bool {
    score > than.score || (score == than.score && phash < than.phash)
}

/// Relax epsilon arcs until no token improves. Word-output arcs append
/// to the trace with `frames` as the word end time. The epsilon part
/// of the graph is acyclic, so this terminates.
fn eps_closure(
    g: &DecodeGraph,
    tokens: &mut HashMap<TokenKey, Token>,
    arena: &mut Vec<TraceNode>,
    frames: usize,
) {
    let mut queue: VecDeque<TokenKey> = tokens.keys().copied().collect();
    while let Some((state, whash)) = queue.pop_front() {
        let tok = tokens[&(state, whash)];
        for &ai in &g.eps_from[state] {
            let arc = &g.arcs[ai];
            let score = tok.score + arc.weight;
            let phash = mix(tok.phash, ai as u64 + 1);
            let (whash2, trace, pending) = match arc.word {
                Some(w) => {
                    arena.push(TraceNode {
                        step: TraceStep::Word {
                            word: w,
                            end: frames,
                        },
                        parent: tok.trace,
                    });
                    (
                        mix(whash, w as u64 + 1),
                        Some(arena.len() - 1),
                        tok.pending_lm + arc.weight,
                    )
                }
                None => (whash, tok.trace, tok.pending_lm + arc.weight),
            };
            let key = (arc.to, whash2);
            let accept = tokens.get(&key).is_none_or(|t| better(score, phash, t));
            if accept {
                tokens.insert(
                    key,
                    Token {
                        score,
                        trace,
                        phash,
                        run_label: tok.run_label,
                        pending_lm: pending,
                    },
                );
                queue.push_back(key);
            }
        }
    }
}

/// Frame-synchronous Viterbi beam search returning the best hypothesis
/// ending in a final state and a lattice holding the top distinct word
/// sequences.
pub fn beam_search(
    g: &DecodeGraph,
    post: &Posteriorgram,
    params: &DecodeParams,
) -> Result<(Hypothesis, Lattice)> {
    let (mut hyps, lattice) = beam_search_nbest(g, post, params)?;
    Ok((hyps.remove(0), lattice))
}

/// Frame-synchronous Viterbi beam search. Each frame advances every
/// live token over the emitting arcs, scoring
/// `am_weight * ln y_t(label) + graph weight` with `ln blank_scale`
/// subtracted from the blank log posterior before weighting, then
/// closes over epsilon arcs and prunes. Returns the surviving distinct
/// word sequences, best first, and a lattice holding their paths.
pub fn beam_search_nbest(
    g: &DecodeGraph,
    post: &Posteriorgram,
    params: &DecodeParams,
) -> Result<(Vec<Hypothesis>, Lattice)> {
    params.validate()?;
    let (t_max, n_labels) = post.probs.dim();
    if n_labels != g.n_labels {
        return Err(Error::ShapeError(format!(
            "posteriorgram has {n_labels} labels, graph expects {}",
            g.n_labels
        )));
    }
    if t_max == 0 {
        return Err(Error::NoHypothesis("empty posteriorgram".into()));
    }
    let log_post = post.probs.mapv(f64::ln);
    let log_blank_scale = params.blank_scale.ln();

    let mut arena: Vec<TraceNode> = Vec::new();
    let mut tokens: HashMap<TokenKey, Token> = HashMap::new();
    tokens.insert(
        (g.start, HASH_SEED),
        Token {
            score: 0.0,
            trace: None,
            phash: HASH_SEED,
            run_label: None,
            pending_lm: 0.0,
        },
    );
    eps_closure(g, &mut tokens, &mut arena, 0);

    for t in 0..t_max {
        // Deterministic expansion order regardless of map iteration.
        let mut alive: Vec<KeyedToken> = tokens.drain().collect();
        alive.sort_unstable_by_key(|a| a.0);

        let mut next: HashMap<TokenKey, Token> = HashMap::new();
        for ((state, whash), tok) in alive {
            for &ai in &g.emit_from[state] {
                let arc = &g.arcs[ai];
                let label = arc.label.unwrap();
                let mut am = log_post[[t, label]];
                if Some(label) == g.blank {
                    am -= log_blank_scale;
                }
                let score = tok.score + params.am_weight * am + arc.weight;
                if !score.is_finite() {
                    continue;
                }
                let phash = mix(tok.phash, ai as u64 + 1);
                let (trace, pending) = if tok.run_label == Some(label) {
                    (tok.trace, tok.pending_lm + arc.weight)
                } else {
                    arena.push(TraceNode {
                        step: TraceStep::Run {
                            label,
                            start: t,
                            lm: tok.pending_lm + arc.weight,
                        },
                        parent: tok.trace,
                    });
                    (Some(arena.len() - 1), 0.0)
                };
                let key = (arc.to, whash);
                if next.get(&key).is_none_or(|x| better(score, phash, x)) {
                    next.insert(
                        key,
                        Token {
                            score,
                            trace,
                            phash,
                            run_label: Some(label),
                            pending_lm: pending,
                        },
                    );
                }
            }
        }
        eps_closure(g, &mut next, &mut arena, t + 1);

        // Prune: per-state history cap, then beam, then global cap.
        let mut by_state: HashMap<usize, Vec<KeyedToken>> = HashMap::new();
        for (key, tok) in next.drain() {
            by_state.entry(key.0).or_default().push((key, tok));
        }
        let mut kept: Vec<KeyedToken> = Vec::new();
        let mut states: Vec<usize> = by_state.keys().copied().collect();
        states.sort_unstable();
        for s in states {
            let mut toks = by_state.remove(&s).unwrap();
            toks.sort_unstable_by(|a, b| {
                b.1.score
                    .total_cmp(&a.1.score)
                    .then(a.1.phash.cmp(&b.1.phash))
            });
            toks.truncate(params.nbest_per_state);
            kept.extend(toks);
        }
        if kept.is_empty() {
            return Err(Error::NoHypothesis(format!(
                "all tokens pruned away at frame {t} of {t_max}"
            )));
        }
        kept.sort_unstable_by(|a, b| {
            b.1.score
                .total_cmp(&a.1.score)
                .then(a.1.phash.cmp(&b.1.phash))
        });
        let floor = kept[0].1.score - params.beam;
        kept.retain(|(_, tok)| tok.score >= floor);
        kept.truncate(params.max_active);
        tokens = kept.into_iter().collect();
    }

    // Final tokens, deduplicated by word sequence.
    let mut finals: HashMap<u64, Token> = HashMap::new();
    for ((state, whash), tok) in &tokens {
        if g.finals[*state]
            && finals
                .get(whash)
                .is_none_or(|x| better(tok.score, tok.phash, x))
        {
            finals.insert(*whash, *tok);
        }
    }
    if finals.is_empty() {
        let best = tokens
            .values()
            .map(|t| t.score)
            .fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::NoHypothesis(format!(
            "no token reached a final state after {t_max} frames ({} alive, best score {best:.3})",
            tokens.len()
        )));
    }
    let mut ranked: Vec<Token> = finals.into_values().collect();
    ranked.sort_unstable_by(|a, b| b.score.total_cmp(&a.score).then(a.phash.cmp(&b.phash)));
    ranked.truncate(params.lattice_nbest);

    let hyps = ranked
        .iter()
        .map(|tok| hypothesis_from_trace(tok, &arena, g.blank))
        .collect();
    let lattice = lattice_from_tokens(&ranked, &arena, &log_post, t_max);
    Ok((hyps, lattice))
}

/// Trace contents in path order.
fn unwind<'a>(tok: &Token, arena: &'a [TraceNode]) -> Vec<&'a TraceStep> {
    let mut steps = Vec::new();
    let mut cur = tok.trace;
    while let Some(i) = cur {
        steps.push(&arena[i].step);
        cur = arena[i].parent;
    }
    steps.reverse();
    steps
}

fn hypothesis_from_trace(tok: &Token, arena: &[TraceNode], blank: Option<LabelId>) -> Hypothesis {
    let mut words = Vec::new();
    let mut bounds = Vec::new();
    let mut word_start: Option<usize> = None;
    for step in unwind(tok, arena) {
        match *step {
            TraceStep::Run { label, start, .. } => {
                if word_start.is_none() && Some(label) != blank {
                    word_start = Some(start);
                }
            }
            TraceStep::Word { word, end } => {
                words.push(word);
                bounds.push((word_start.take().unwrap_or(end.saturating_sub(1)), end));
            }
        }
    }
    Hypothesis {
        words,
        score: tok.score,
        word_bounds: bounds,
    }
}

/// One lattice holding each ranked word sequence as a chain of label
/// runs from a shared start node to a shared final node. Arc acoustic
/// scores are the raw log-posterior sums over the span; graph weights
/// ride on the `lm` field of the run they precede.
fn lattice_from_tokens(
    ranked: &[Token],
    arena: &[TraceNode],
    log_post: &Array2<f64>,
    t_max: usize,
) -> Lattice {
    let mut nodes = vec![LatticeNode { frame: 0 }, LatticeNode { frame: t_max }];
    let mut arcs = Vec::new();
    for tok in ranked {
        let steps = unwind(tok, arena);
        let runs: Vec<(LabelId, usize, f64)> = steps
            .iter()
            .filter_map(|s| match **s {
                TraceStep::Run { label, start, lm } => Some((label, start, lm)),
                TraceStep::Word { .. } => None,
            })
            .collect();
        let mut prev_node = 0usize;
        for (i, &(label, start, lm)) in runs.iter().enumerate() {
            let end = runs.get(i + 1).map_or(t_max, |r| r.1);
            let to = if i + 1 == runs.len() {
                1
            } else {
                nodes.push(LatticeNode { frame: end });
                nodes.len() - 1
            };
            let am: f64 = (start..end).map(|t| log_post[[t, label]]).sum();
            arcs.push(LatticeArc {
                from: prev_node,
                to,
                label,
                am_score: am,
                lm_score: lm,
            });
            prev_node = to;
        }
    }
    Lattice {
        nodes,
        arcs,
        start: 0,
        finals: vec![1],
    }
}

/// Per-frame argmax, collapse adjacent repeats, drop blanks.
pub fn greedy_ctc_decode(post: &Posteriorgram, inv: &LabelInventory) -> Result<Vec<LabelId>> {
    let blank = inv
        .blank_id()
        .ok_or_else(|| Error::NotCtc("greedy decoding needs a blank label".into()))?;
    if post.probs.ncols() != inv.len() {
        return Err(Error::ShapeError(format!(
            "posteriorgram has {} labels, inventory has {}",
            post.probs.ncols(),
            inv.len()
        )));
    }
    let mut out = Vec::new();
    let mut prev: Option<LabelId> = None;
    for row in post.probs.rows() {
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    Ok(out)
}

// --- scoring ---

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Score every utterance.
    All,
    /// Drop utterances whose reference contains a word outside `vocab`.
    ExcludeOov,
}

#[derive(Debug, Clone)]
pub struct WerReport {
    pub wer_percent: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub n_ref_tokens: usize,
    pub n_utterances_scored: usize,
    pub n_utterances_dropped: usize,
    /// Reference tokens outside the vocabulary, over all utterances.
    pub oov_token_percent: f64,
    /// Utterances containing at least one such token.
    pub oov_utterance_percent: f64,
}

impl WerReport {
    /// Machine-readable key/value lines.
    pub fn summary_text(&self) -> String {
        format!(
            "wer_percent {:.4}\nsubstitutions {}\ninsertions {}\ndeletions {}\n\
             ref_tokens {}\nutterances_scored {}\nutterances_dropped {}\n\
             oov_token_percent {:.4}\noov_utterance_percent {:.4}\n",
            self.wer_percent,
            self.substitutions,
            self.insertions,
            self.deletions,
            self.n_ref_tokens,
            self.n_utterances_scored,
            self.n_utterances_dropped,
            self.oov_token_percent,
            self.oov_utterance_percent
        )
    }
}

/// Levenshtein word alignment of one utterance. Returns substitution,
/// insertion and deletion counts; cost ties resolve substitution
/// first, then deletion, then insertion.
pub fn align_words(r: &[String], h: &[String]) -> (usize, usize, usize) {
    let (m, n) = (r.len(), h.len());
    let mut d = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = d[i - 1][j] + 1;
            let ins = d[i][j - 1] + 1;
            d[i][j] = sub.min(del).min(ins);
        }
    }
    let (mut i, mut j) = (m, n);
    let (mut subs, mut ins, mut dels) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] != h[j - 1] {
                subs += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            dels += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    (subs, ins, dels)
}

/// Side-by-side alignment rendering, errors marked with `*`.
pub fn render_alignment(r: &[String], h: &[String]) -> String {
    // Re-run the DP keeping the operations for display.
    let (m, n) = (r.len(), h.len());
    let mut d = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let (mut i, mut j) = (m, n);
    let mut pairs: Vec<(Option<&str>, Option<&str>)> = Vec::new();
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            pairs.push((Some(&r[i - 1]), Some(&h[j - 1])));
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            pairs.push((Some(&r[i - 1]), None));
            i -= 1;
        } else {
            pairs.push((None, Some(&h[j - 1])));
            j -= 1;
        }
    }
    pairs.reverse();
    let mut ref_row = String::from("REF:");
    let mut hyp_row = String::from("HYP:");
    for (r, h) in pairs {
        let rw = r.unwrap_or("***");
        let hw = h.unwrap_or("***");
        let width = rw.len().max(hw.len());
        let err = r != h;
        let mark = |w: &str| {
            if err {
                w.to_uppercase()
            } else {
                w.to_string()
            }
        };
        ref_row.push_str(&format!(" {:width$}", mark(rw)));
        hyp_row.push_str(&format!(" {:width$}", mark(hw)));
    }
    format!("{ref_row}\n{hyp_row}\n")
}

/// Corpus word error rate. `WER% = 100 * (S + I + D) / reference
/// tokens`. OOV rates are measured over the full reference set before
/// any exclusion.
pub fn score_wer(
    refs: &[Vec<String>],
    hyps: &[Vec<String>],
    mode: ScoreMode,
    vocab: Option<&HashSet<String>>,
) -> Result<WerReport> {
    if refs.len() != hyps.len() {
        return Err(Error::ShapeError(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    if mode == ScoreMode::ExcludeOov && vocab.is_none() {
        return Err(Error::InvalidConfig(
            "exclude_oov scoring needs a vocabulary".into(),
        ));
    }

    let mut oov_tokens = 0usize;
    let mut all_tokens = 0usize;
    let mut oov_utts = 0usize;
    let is_oov = |w: &String| vocab.is_some_and(|v| !v.contains(w));
    for r in refs {
        let n_oov = r.iter().filter(|w| is_oov(w)).count();
        oov_tokens += n_oov;
        all_tokens += r.len();
        oov_utts += usize::from(n_oov > 0);
    }

    let (mut subs, mut ins, mut dels) = (0, 0, 0);
    let mut n_ref = 0usize;
    let mut scored = 0usize;
    let mut dropped = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        if mode == ScoreMode::ExcludeOov && r.iter().any(&is_oov) {
            dropped += 1;
            continue;
        }
        let (s, i, d) = align_words(r, h);
        subs += s;
        ins += i;
        dels += d;
        n_ref += r.len();
        scored += 1;
    }
    if scored == 0 || n_ref == 0 {
        return Err(Error::EmptyReferenceSet);
    }
    Ok(WerReport {
        wer_percent: 100.0 * (subs + ins + dels) as f64 / n_ref as f64,
        substitutions: subs,
        insertions: ins,
        deletions: dels,
        n_ref_tokens: n_ref,
        n_utterances_scored: scored,
        n_utterances_dropped: dropped,
        oov_token_percent: 100.0 * oov_tokens as f64 / all_tokens.max(1) as f64,
        oov_utterance_percent: 100.0 * oov_utts as f64 / refs.len() as f64,
    })
}
