//! Training and evaluation orchestration: dataset manifests, word
//! inventory construction, momentum-SGD training over the four loss
//! criteria, checkpoint recipes, WER evaluation, blank-scale sweeps,
//! posteriorgram dumps, and a synthetic corpus generator that makes
//! every end-to-end test self-contained.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::criteria::{
    ce_loss_grad, ctc_loss_grad, realign_loss_grad, smbr_loss_grad, Lattice, LatticeArc,
    LatticeNode,
};
use crate::decoder::{
    align_words, beam_search, beam_search_nbest, greedy_ctc_decode, score_wer, DecodeGraph,
    DecodeParams, ScoreMode, WerReport,
};
use crate::error::{Error, Result};
use crate::frontend::{stack_frames, FeatureMatrix, FeatureNormalizer, StackConfig};
use crate::graphs::{
    build_ctc_graph, estimate_priors, viterbi_align, InventoryKind, LabelId, LabelInventory,
    Lexicon, PriorVector,
};
use crate::nnet::{
    arch_preset, init_params, save_checkpoint, Direction, ForwardCache, GradientSet, LayerSpec,
    ModelParams, Posteriorgram,
};

// --- dataset manifests ---

/// One corpus entry: an id, where its audio or features live, and the
/// reference word sequence (empty for decode-only data).
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub path: PathBuf,
    pub transcript: Vec<String>,
}

/// Parse a manifest with one utterance per line, `id TAB path TAB
/// transcript`. Blank lines and `#` comments are skipped. Training
/// manifests require a non-empty transcript on every line.
pub fn parse_manifest(text: &str, require_transcript: bool) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let id = fields.next().unwrap_or("");
        let (path, transcript) = match (fields.next(), fields.next()) {
            (Some(p), Some(t)) => (p, t),
            _ => {
                return Err(Error::Data(format!(
                    "manifest line {}: expected 'id TAB path TAB transcript'",
                    lineno + 1
                )))
            }
        };
        if id.is_empty() || path.is_empty() {
            return Err(Error::Data(format!(
                "manifest line {}: empty id or path",
                lineno + 1
            )));
        }
        if !seen.insert(id) {
            return Err(Error::Data(format!(
                "manifest line {}: duplicate id {id:?}",
                lineno + 1
            )));
        }
        let words: Vec<String> = transcript.split_whitespace().map(str::to_string).collect();
        if require_transcript && words.is_empty() {
            return Err(Error::Data(format!(
                "manifest line {}: training utterance {id:?} has no transcript",
                lineno + 1
            )));
        }
        out.push(Utterance {
            id: id.to_string(),
            path: PathBuf::from(path),
            transcript: words,
        });
    }
    if out.is_empty() {
        return Err(Error::Data("manifest has no utterances".into()));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path, require_transcript: bool) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_manifest(&text, require_transcript)
}

// --- word inventories ---

/// Frequency threshold behind a named vocabulary size. The two presets
/// mirror the standard large-vocabulary cutoffs: "7k-style" keeps words
/// with at least 150 exemplars, "25k-style" at least 20.
pub fn min_exemplars_preset(name: &str) -> Result<usize> {
    match name {
        "7k-style" => Ok(150),
        "25k-style" => Ok(20),
        other => Err(Error::InvalidConfig(format!(
            "unknown inventory preset {other:?}; expected 7k-style or 25k-style"
        ))),
    }
}

/// Build a word output inventory from transcripts: every word with
/// corpus frequency at least `min_exemplars`, ordered by descending
/// frequency then lexicographically, with the blank appended last.
pub fn build_word_inventory(
    transcripts: &[Vec<String>],
    min_exemplars: usize,
) -> Result<LabelInventory> {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for t in transcripts {
        for w in t {
            *freq.entry(w.as_str()).or_insert(0) += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::Data("no words in the corpus".into()));
    }
    let mut kept: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|&(_, c)| c >= min_exemplars)
        .collect();
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no word reaches the {min_exemplars}-exemplar threshold"
        )));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let names = kept.into_iter().map(|(w, _)| w.to_string()).collect();
    LabelInventory::from_names(names, InventoryKind::Word)?.with_blank()
}

// --- architectures ---

/// Resolve an architecture name. Accepts the named presets plus a
/// compact geometry form: `uni-2x64` is two forward layers of 64 cells,
/// `bi-3x128-p64` three bidirectional layers of 128 cells with a
/// 64-unit recurrent projection.
pub fn parse_arch(name: &str) -> Result<Vec<LayerSpec>> {
    if let Ok(spec) = arch_preset(name) {
        return Ok(spec);
    }
    let bad = || {
        Error::InvalidArchitecture(format!(
            "unknown architecture {name:?}; use a preset or a form like uni-2x64 or bi-2x64-p32"
        ))
    };
    let parts: Vec<&str> = name.split('-').collect();
    if parts.len() < 2 || parts.len() > 3 {
        return Err(bad());
    }
    let direction = match parts[0] {
        "uni" => Direction::Forward,
        "bi" => Direction::Bidirectional,
        _ => return Err(bad()),
    };
    let (l, c) = parts[1].split_once('x').ok_or_else(bad)?;
    let layers: usize = l.parse().map_err(|_| bad())?;
    let cells: usize = c.parse().map_err(|_| bad())?;
    let projection = match parts.get(2) {
        None => None,
        Some(p) => Some(
            p.strip_prefix('p')
                .ok_or_else(bad)?
                .parse()
                .map_err(|_| bad())?,
        ),
    };
    if layers == 0 || cells == 0 {
        return Err(bad());
    }
    Ok(vec![
        LayerSpec {
            cells,
            direction,
            projection
        };
        layers
    ])
}

// --- training ---

/// Which per-utterance loss drives the gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    /// Frame-wise cross entropy against a flat-start uniform
    /// segmentation of the transcript.
    Ce,
    Ctc,
    /// Forced-alignment loss with prior-scaled frame scores; priors are
    /// estimated once from flat-start segmentations of the corpus.
    Realign,
    /// State-level minimum Bayes risk over decoded lattices; requires a
    /// decode graph and an initialized model.
    Smbr,
}

impl Criterion {
    pub fn parse(s: &str) -> Result<Criterion> {
        match s {
            "ce" => Ok(Criterion::Ce),
            "ctc" => Ok(Criterion::Ctc),
            "realign" => Ok(Criterion::Realign),
            "smbr" => Ok(Criterion::Smbr),
            other => Err(Error::InvalidConfig(format!(
                "unknown criterion {other:?}; expected ce, ctc, realign or smbr"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Ce => "ce",
            Criterion::Ctc => "ctc",
            Criterion::Realign => "realign",
            Criterion::Smbr => "smbr",
        }
    }
}

/// Everything a training run needs beyond the data itself.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub criterion: Criterion,
    /// Architecture name for fresh models; ignored when resuming from a
    /// checkpoint, whose geometry wins.
    pub arch: String,
    /// Frame stacking applied before the network; ignored when resuming,
    /// the checkpoint's stacking wins.
    pub stack: StackConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Posterior scale on the blank at decode time; carried so recipes
    /// can thread it through evaluation unchanged.
    pub blank_scale: f64,
    /// Acoustic scale for the sMBR criterion.
    pub kappa: f64,
    pub target_delay: usize,
    /// Gradient workers for one batch. Updates always come from a single
    /// writer in a fixed reduction order, so any worker count reproduces
    /// the single-worker run bit for bit.
    pub workers: usize,
    /// Halve the learning rate whenever the mean loss over the latest
    /// window fails to improve on the window before it; 0 disables.
    pub plateau_window: usize,
    /// Save a checkpoint every this many steps; 0 saves only the final
    /// model. Needs `checkpoint_dir`.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(criterion: Criterion) -> TrainConfig {
        TrainConfig {
            criterion,
            arch: "uni-1x32".into(),
            stack: StackConfig::default(),
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 8,
            steps: 100,
            seed: 1,
            blank_scale: 1.0,
            kappa: 1.0,
            target_delay: 0,
            workers: 1,
            plateau_window: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("worker count must be positive".into()));
        }
        if !(self.blank_scale.is_finite() && self.blank_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "blank scale must be positive, got {}",
                self.blank_scale
            )));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        Ok(())
    }
}

/// One training utterance: raw features plus the reference labels in
/// inventory ids.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub feats: FeatureMatrix,
    pub labels: Vec<LabelId>,
}

/// Decode-side inputs the sMBR criterion needs to build denominator
/// lattices.
#[derive(Debug, Clone)]
pub struct SmbrResources {
    pub graph: DecodeGraph,
    pub decode: DecodeParams,
}

/// One metrics line per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Batch loss per frame, in nats.
    pub loss: f64,
    pub grad_norm: f64,
    pub time_ms: f64,
}

impl StepMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.3}",
            self.step, self.loss, self.grad_norm, self.time_ms
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub metrics: Vec<StepMetrics>,
    /// True when a step produced a non-finite loss or gradient. The bad
    /// update is never applied; `model` is the last finite state.
    pub diverged: bool,
    pub checkpoints: Vec<PathBuf>,
    pub final_learning_rate: f64,
}

/// Spread labels over frames as evenly as integer boundaries allow, in
/// order. Needs at least one frame per label.
pub fn flat_start_alignment(n_frames: usize, labels: &[LabelId]) -> Result<Vec<LabelId>> {
    if labels.is_empty() {
        return Err(Error::Data("no labels to segment".into()));
    }
    if n_frames < labels.len() {
        return Err(Error::InputTooShort(format!(
            "{n_frames} frames cannot cover {} labels",
            labels.len()
        )));
    }
    let n = labels.len();
    let mut out = Vec::with_capacity(n_frames);
    for (i, &l) in labels.iter().enumerate() {
        let start = i * n_frames / n;
        let end = (i + 1) * n_frames / n;
        out.extend(std::iter::repeat_n(l, end - start));
    }
    Ok(out)
}

/// Turn a per-frame labeling into a linear lattice with one arc per
/// label run. Arc acoustic scores are left at zero; lattice criteria
/// recompute acoustics from the logits they are given.
pub fn alignment_lattice(align: &[LabelId]) -> Result<Lattice> {
    if align.is_empty() {
        return Err(Error::InputTooShort("empty alignment".into()));
    }
    let mut nodes = vec![LatticeNode { frame: 0 }];
    let mut arcs = Vec::new();
    let mut run_start = 0;
    for t in 1..=align.len() {
        if t == align.len() || align[t] != align[run_start] {
            nodes.push(LatticeNode { frame: t });
            arcs.push(LatticeArc {
                from: nodes.len() - 2,
                to: nodes.len() - 1,
                label: align[run_start],
                am_score: 0.0,
                lm_score: 0.0,
            });
            run_start = t;
        }
    }
    let finals = vec![nodes.len() - 1];
    Ok(Lattice {
        nodes,
        arcs,
        start: 0,
        finals,
    })
}

/// Stack an utterance with the model's own frame geometry and run the
/// network on it.
pub fn forward_stacked(
    params: &ModelParams,
    raw: &FeatureMatrix,
) -> Result<(Posteriorgram, ForwardCache)> {
    let stacked = stack_frames(raw, &params.stack)?;
    params.forward(&stacked)
}

fn epoch_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Loss, frame count, and gradients for one utterance.
type ItemGrads = Result<(f64, usize, GradientSet)>;

/// Loss and descent gradient for one utterance under one criterion.
fn batch_item_grads(
    params: &ModelParams,
    criterion: Criterion,
    kappa: f64,
    feats: &FeatureMatrix,
    labels: &[LabelId],
    priors: Option<&PriorVector>,
    smbr: Option<&SmbrResources>,
) -> ItemGrads {
    let (post, cache) = params.forward(feats)?;
    let logits = &cache.logits;
    let t = logits.nrows();
    let (loss, dlogits) = match criterion {
        Criterion::Ce => {
            let align = flat_start_alignment(t, labels)?;
            ce_loss_grad(logits, &align)?
        }
        Criterion::Ctc => ctc_loss_grad(logits, labels, &params.inventory)?,
        Criterion::Realign => realign_loss_grad(logits, labels, priors)?,
        Criterion::Smbr => {
            let res = smbr.expect("train checked the smbr resources");
            let graph = build_ctc_graph(labels, &params.inventory)?;
            let align = viterbi_align(&graph, &post.probs, None)?;
            let num = alignment_lattice(&align)?;
            let (_, den) = beam_search_nbest(&res.graph, &post, &res.decode)?;
            let (objective, ascent) = smbr_loss_grad(&num, &den, logits, kappa)?;
            (-objective, -ascent)
        }
    };
    let grads = params.backward(&cache, &dlogits)?;
    Ok((loss, t, grads))
}

/// Minibatch gradient descent with momentum over seeded shuffles of the
/// corpus. Fresh models take their architecture, stacking, and input
/// normalization from the config and data; resumed models keep their
/// checkpointed geometry and the config's `arch` and `stack` are
/// ignored. Metrics carry one entry per step; a non-finite loss or
/// gradient stops the run and returns the last finite model.
pub fn train(
    cfg: &TrainConfig,
    items: &[TrainItem],
    inventory: &LabelInventory,
    model_in: Option<ModelParams>,
    smbr: Option<&SmbrResources>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Data("no training utterances".into()));
    }
    for item in items {
        if item.labels.is_empty() {
            return Err(Error::Data(format!(
                "utterance {:?} has no labels",
                item.id
            )));
        }
        if let Some(&l) = item.labels.iter().find(|&&l| l >= inventory.len()) {
            return Err(Error::UnknownLabel(format!(
                "utterance {:?} references label {l} outside the {}-label inventory",
                item.id,
                inventory.len()
            )));
        }
    }
    if matches!(cfg.criterion, Criterion::Ctc | Criterion::Smbr) && !inventory.is_ctc() {
        return Err(Error::NotCtc(format!(
            "{} training needs one",
            cfg.criterion.name()
        )));
    }
    let smbr = match (cfg.criterion, smbr) {
        (Criterion::Smbr, None) => {
            return Err(Error::InvalidConfig(
                "smbr training needs a decode graph and decode parameters".into(),
            ))
        }
        (Criterion::Smbr, Some(res)) => {
            if res.graph.n_labels() != inventory.len() {
                return Err(Error::ShapeError(format!(
                    "decode graph covers {} labels but the inventory has {}",
                    res.graph.n_labels(),
                    inventory.len()
                )));
            }
            res.decode.validate()?;
            Some(res)
        }
        _ => None,
    };

    let eff_stack = model_in.as_ref().map(|m| m.stack).unwrap_or(cfg.stack);
    let stacked: Vec<FeatureMatrix> = items
        .iter()
        .map(|item| stack_frames(&item.feats, &eff_stack))
        .collect::<Result<Vec<_>>>()?;

    let mut params = match model_in {
        Some(m) => {
            if m.inventory.fingerprint() != inventory.fingerprint() {
                return Err(Error::StaleCache(
                    "checkpoint was built for a different label inventory".into(),
                ));
            }
            if m.input_dim != stacked[0].dim() {
                return Err(Error::ShapeError(format!(
                    "checkpoint expects input dim {} but stacked features have {}",
                    m.input_dim,
                    stacked[0].dim()
                )));
            }
            m
        }
        None => {
            let arch = parse_arch(&cfg.arch)?;
            let mut m = init_params(&arch, stacked[0].dim(), inventory.clone(), cfg.seed)?;
            m.stack = eff_stack;
            m.target_delay = cfg.target_delay;
            m.normalizer = Some(FeatureNormalizer::fit(stacked.iter())?);
            m
        }
    };

    let priors = match cfg.criterion {
        Criterion::Realign => {
            let aligns = items
                .iter()
                .zip(&stacked)
                .map(|(item, s)| flat_start_alignment(s.n_frames(), &item.labels))
                .collect::<Result<Vec<_>>>()?;
            Some(estimate_priors(&aligns, inventory)?)
        }
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queue: Vec<usize> = Vec::new();
    let mut velocity = GradientSet::zeros_like(&params);
    let mut lr = cfg.learning_rate;
    let mut metrics: Vec<StepMetrics> = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();

    for step in 1..=cfg.steps {
        let started = Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if queue.is_empty() {
                queue = epoch_permutation(items.len(), &mut rng);
                queue.reverse();
            }
            batch.push(queue.pop().unwrap());
        }

        let mut slots: Vec<Option<ItemGrads>> = Vec::new();
        slots.resize_with(batch.len(), || None);
        if cfg.workers <= 1 {
            for (slot, &i) in slots.iter_mut().zip(&batch) {
                *slot = Some(batch_item_grads(
                    &params,
                    cfg.criterion,
                    cfg.kappa,
                    &stacked[i],
                    &items[i].labels,
                    priors.as_ref(),
                    smbr,
                ));
            }
        } else {
            let params_ref = &params;
            let stacked_ref = &stacked;
            let priors_ref = priors.as_ref();
            let batch_ref = &batch;
            let results: Vec<(usize, ItemGrads)> = thread::scope(|scope| {
                let handles: Vec<_> = (0..cfg.workers)
                    .map(|w| {
                        scope.spawn(move || {
                            let mut out = Vec::new();
                            let mut k = w;
                            while k < batch_ref.len() {
                                let i = batch_ref[k];
                                out.push((
                                    k,
                                    batch_item_grads(
                                        params_ref,
                                        cfg.criterion,
                                        cfg.kappa,
                                        &stacked_ref[i],
                                        &items[i].labels,
                                        priors_ref,
                                        smbr,
                                    ),
                                ));
                                k += cfg.workers;
                            }
                            out
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().unwrap())
                    .collect()
            });
            for (k, r) in results {
                slots[k] = Some(r);
            }
        }

        // Reduce in batch order so the result is independent of the
        // worker count. Numerical failures inside a loss count as
        // divergence; usage and data errors still abort the run.
        let mut grads = GradientSet::zeros_like(&params);
        let mut loss_sum = 0.0;
        let mut frames = 0usize;
        let mut numeric_failure = false;
        for slot in slots {
            match slot.expect("every batch slot is filled") {
                Ok((loss, t, g)) => {
                    loss_sum += loss;
                    frames += t;
                    grads.add(&g);
                }
                Err(e) if e.exit_code() == 3 => {
                    numeric_failure = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        grads.scale(1.0 / batch.len() as f64);
        let loss = loss_sum / frames.max(1) as f64;
        let grad_norm = grads.l2_norm();

        if numeric_failure || !loss.is_finite() || !grads.is_finite() {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join("last-good.ck");
                save_checkpoint(&path, &params)?;
                checkpoints.push(path);
            }
            return Ok(TrainOutcome {
                model: params,
                metrics,
                diverged: true,
                checkpoints,
                final_learning_rate: lr,
            });
        }

        params.apply_update(&mut velocity, &grads, lr, cfg.momentum);
        metrics.push(StepMetrics {
            step,
            loss,
            grad_norm,
            time_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        let w = cfg.plateau_window;
        if w > 0 && step % w == 0 && metrics.len() >= 2 * w {
            let mean = |s: &[StepMetrics]| s.iter().map(|m| m.loss).sum::<f64>() / s.len() as f64;
            let last = mean(&metrics[metrics.len() - w..]);
            let prev = mean(&metrics[metrics.len() - 2 * w..metrics.len() - w]);
            if last >= prev {
                lr *= 0.5;
            }
        }

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("step-{step:06}.ck"));
                save_checkpoint(&path, &params)?;
                checkpoints.push(path);
            }
        }
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join("final.ck");
        save_checkpoint(&path, &params)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        model: params,
        metrics,
        diverged: false,
        checkpoints,
        final_learning_rate: lr,
    })
}

// --- evaluation ---

/// One scoring utterance: features plus the reference words.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub feats: FeatureMatrix,
    pub words: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: WerReport,
    /// One line per utterance, `id TAB hypothesis TAB score`.
    pub lines: Vec<String>,
    /// Per-utterance decode errors; they score as empty hypotheses
    /// instead of aborting the run.
    pub failures: Vec<(String, String)>,
}

/// Decode every utterance with the model and graph, then score WER.
pub fn evaluate(
    model: &ModelParams,
    items: &[EvalItem],
    graph: &DecodeGraph,
    lex: &Lexicon,
    decode: &DecodeParams,
    mode: ScoreMode,
    vocab: Option<&HashSet<String>>,
) -> Result<EvalOutcome> {
    let mut refs = Vec::with_capacity(items.len());
    let mut hyps = Vec::with_capacity(items.len());
    let mut lines = Vec::with_capacity(items.len());
    let mut failures = Vec::new();
    for item in items {
        refs.push(item.words.clone());
        let decoded = forward_stacked(model, &item.feats)
            .and_then(|(post, _)| beam_search(graph, &post, decode));
        match decoded {
            Ok((hyp, _)) => {
                let words: Vec<String> =
                    hyp.words.iter().map(|&w| lex.word(w).to_string()).collect();
                lines.push(format!(
                    "{}\t{}\t{:.6}",
                    item.id,
                    words.join(" "),
                    hyp.score
                ));
                hyps.push(words);
            }
            Err(e) => {
                lines.push(format!("{}\t\tnan", item.id));
                failures.push((item.id.clone(), e.to_string()));
                hyps.push(Vec::new());
            }
        }
    }
    let report = score_wer(&refs, &hyps, mode, vocab)?;
    Ok(EvalOutcome {
        report,
        lines,
        failures,
    })
}

/// Greedy CTC label error rate in percent: edit errors between the
/// collapsed argmax labeling and the reference labels, over reference
/// length.
pub fn greedy_label_error_rate(model: &ModelParams, items: &[TrainItem]) -> Result<f64> {
    let inv = &model.inventory;
    let mut errors = 0usize;
    let mut total = 0usize;
    for item in items {
        let (post, _) = forward_stacked(model, &item.feats)?;
        let hyp = greedy_ctc_decode(&post, inv)?;
        let r: Vec<String> = item
            .labels
            .iter()
            .map(|&l| inv.name(l).to_string())
            .collect();
        let h: Vec<String> = hyp.iter().map(|&l| inv.name(l).to_string()).collect();
        let (s, i, d) = align_words(&r, &h);
        errors += s + i + d;
        total += r.len();
    }
    if total == 0 {
        return Err(Error::EmptyReferenceSet);
    }
    Ok(100.0 * errors as f64 / total as f64)
}

/// Evaluate once per blank scale and return (scale, WER%) rows in the
/// given order.
#[allow(clippy::too_many_arguments)]
pub fn sweep_blank_scale(
    model: &ModelParams,
    items: &[EvalItem],
    graph: &DecodeGraph,
    lex: &Lexicon,
    decode: &DecodeParams,
    scales: &[f64],
    mode: ScoreMode,
    vocab: Option<&HashSet<String>>,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(scales.len());
    for &scale in scales {
        let mut params = decode.clone();
        params.blank_scale = scale;
        let eval = evaluate(model, items, graph, lex, &params, mode, vocab)?;
        out.push((scale, eval.report.wer_percent));
    }
    Ok(out)
}

// --- posteriorgram dumps ---

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpFormat {
    Csv,
    Tsv,
}

/// Run the model and tabulate every posterior strictly above the
/// threshold, one `frame, label, posterior` row per entry after a
/// header line. Values print with full round-trip precision.
pub fn dump_posteriorgram(
    model: &ModelParams,
    feats: &FeatureMatrix,
    threshold: f64,
    format: DumpFormat,
) -> Result<String> {
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "threshold must be finite and non-negative, got {threshold}"
        )));
    }
    let (post, _) = forward_stacked(model, feats)?;
    let sep = match format {
        DumpFormat::Csv => ',',
        DumpFormat::Tsv => '\t',
    };
    let mut out = format!("frame{sep}label{sep}posterior\n");
    for (t, row) in post.probs.rows().into_iter().enumerate() {
        for (l, &p) in row.iter().enumerate() {
            if p > threshold {
                out.push_str(&format!("{t}{sep}{}{sep}{p}\n", model.inventory.name(l)));
            }
        }
    }
    Ok(out)
}

// --- synthetic corpus ---

/// Geometry and noise for the synthetic corpus generator. Each label
/// owns one feature coordinate; an utterance is silence padding around
/// noisy bursts of each label's template.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub n_labels: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub feat_dim: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Frames each label burst lasts.
    pub min_dur: usize,
    pub max_dur: usize,
    /// Silence frames before, between, and after bursts.
    pub min_pad: usize,
    pub max_pad: usize,
    pub noise: f64,
    /// Template amplitude on the label's own coordinate.
    pub gain: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_labels: 6,
            n_train: 200,
            n_eval: 50,
            feat_dim: 8,
            min_words: 2,
            max_words: 8,
            min_dur: 5,
            max_dur: 10,
            // Pads are long enough that silence runs keep interior
            // frames after threefold decimation; that headroom is what
            // lets a trained model give blank the majority of frames.
            min_pad: 9,
            max_pad: 18,
            noise: 0.25,
            gain: 3.0,
            seed: 7,
        }
    }
}

/// A generated corpus: a CTC inventory (`l0..` plus blank) and train
/// and held-out items.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub inventory: LabelInventory,
    pub train: Vec<TrainItem>,
    pub eval: Vec<TrainItem>,
}

fn toy_frames(
    cfg: &ToyConfig,
    rng: &mut ChaCha8Rng,
    normal: &Normal<f64>,
    hot: Option<usize>,
    count: usize,
    data: &mut Vec<f64>,
) {
    for _ in 0..count {
        for d in 0..cfg.feat_dim {
            let base = if hot == Some(d) { cfg.gain } else { 0.0 };
            data.push(base + normal.sample(rng));
        }
    }
}

fn toy_item(cfg: &ToyConfig, id: String, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> TrainItem {
    let n_words = rng.random_range(cfg.min_words..=cfg.max_words);
    let mut labels: Vec<LabelId> = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        loop {
            let k = rng.random_range(0..cfg.n_labels);
            if labels.last() != Some(&k) {
                labels.push(k);
                break;
            }
        }
    }
    let mut data = Vec::new();
    for (j, &k) in labels.iter().enumerate() {
        let pad = rng.random_range(cfg.min_pad..=cfg.max_pad);
        toy_frames(cfg, rng, normal, None, pad, &mut data);
        let dur = rng.random_range(cfg.min_dur..=cfg.max_dur);
        toy_frames(cfg, rng, normal, Some(k), dur, &mut data);
        if j + 1 == labels.len() {
            let tail = rng.random_range(cfg.min_pad..=cfg.max_pad);
            toy_frames(cfg, rng, normal, None, tail, &mut data);
        }
    }
    let n = data.len() / cfg.feat_dim;
    let feats = FeatureMatrix {
        data: Array2::from_shape_vec((n, cfg.feat_dim), data)
            .expect("generated frame count matches the data length"),
        frame_shift_ms: 10.0,
        window_ms: 25.0,
    };
    TrainItem { id, feats, labels }
}

/// Generate a learnable-by-construction corpus: label bursts are
/// separable coordinates under mild noise, transcripts never repeat a
/// label back to back, and everything is a pure function of the seed.
pub fn toy_corpus(cfg: &ToyConfig) -> Result<ToyCorpus> {
    if cfg.n_labels < 2 {
        return Err(Error::InvalidConfig(
            "the corpus needs at least 2 labels".into(),
        ));
    }
    if cfg.feat_dim < cfg.n_labels {
        return Err(Error::InvalidConfig(format!(
            "{} labels need a feature dimension of at least {}, got {}",
            cfg.n_labels, cfg.n_labels, cfg.feat_dim
        )));
    }
    if cfg.min_words == 0 || cfg.min_words > cfg.max_words {
        return Err(Error::InvalidConfig("word count range is empty".into()));
    }
    if cfg.min_dur == 0 || cfg.min_dur > cfg.max_dur {
        return Err(Error::InvalidConfig("duration range is empty".into()));
    }
    if cfg.min_pad > cfg.max_pad {
        return Err(Error::InvalidConfig("padding range is empty".into()));
    }
    if !(cfg.noise.is_finite() && cfg.noise >= 0.0 && cfg.gain.is_finite() && cfg.gain > 0.0) {
        return Err(Error::InvalidConfig(
            "noise must be non-negative and gain positive".into(),
        ));
    }
    let names: Vec<String> = (0..cfg.n_labels).map(|k| format!("l{k}")).collect();
    let inventory = LabelInventory::from_names(names, InventoryKind::CiPhone)?.with_blank()?;
    let normal = Normal::new(0.0, cfg.noise)
        .map_err(|e| Error::InvalidConfig(format!("bad noise level: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = (0..cfg.n_train).map(|i| toy_item(cfg, format!("train-{i:04}"), &mut rng, &normal));
    let train = train.collect();
    let eval = (0..cfg.n_eval).map(|i| toy_item(cfg, format!("eval-{i:04}"), &mut rng, &normal));
    let eval = eval.collect();
    Ok(ToyCorpus {
        inventory,
        train,
        eval,
    })
}

/// Single-phone lexicon over an inventory: each non-blank label becomes
/// a word pronounced as itself.
pub fn toy_lexicon_text(inv: &LabelInventory) -> String {
    inv.names()
        .iter()
        .enumerate()
        .filter(|&(i, _)| inv.blank_id() != Some(i))
        .map(|(_, n)| format!("{n}\t{n}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{build_decode_graph, DecodeGraphOptions, LanguageModel};
    use crate::nnet::load_checkpoint;

    fn small_toy(n_train: usize, n_eval: usize, seed: u64) -> ToyCorpus {
        let cfg = ToyConfig {
            n_labels: 3,
            n_train,
            n_eval,
            feat_dim: 4,
            min_words: 2,
            max_words: 3,
            min_dur: 2,
            max_dur: 4,
            min_pad: 1,
            max_pad: 2,
            seed,
            ..ToyConfig::default()
        };
        toy_corpus(&cfg).unwrap()
    }

    fn quick_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            arch: "uni-1x6".into(),
            batch_size: 2,
            steps,
            learning_rate: 0.05,
            ..TrainConfig::new(Criterion::Ctc)
        }
    }

    fn toy_decode_setup(inv: &LabelInventory) -> (DecodeGraph, Lexicon) {
        let lex = Lexicon::parse(&toy_lexicon_text(inv), inv).unwrap();
        let lm = LanguageModel::uniform(lex.n_words());
        let graph =
            build_decode_graph(&lex, &lm, inv, None, &DecodeGraphOptions::default()).unwrap();
        (graph, lex)
    }

    fn wide_open() -> DecodeParams {
        DecodeParams {
            beam: f64::INFINITY,
            max_active: usize::MAX,
            ..DecodeParams::default()
        }
    }

    #[test]
    fn manifest_parses_and_validates() {
        let text = "a\tdata/a.wav\thello world\n\n# comment\nb\tdata/b.feat\t\n";
        let utts = parse_manifest(text, false).unwrap();
        assert_eq!(utts.len(), 2);
        assert_eq!(utts[0].id, "a");
        assert_eq!(utts[0].path, PathBuf::from("data/a.wav"));
        assert_eq!(utts[0].transcript, vec!["hello", "world"]);
        assert!(utts[1].transcript.is_empty());

        assert!(matches!(parse_manifest(text, true), Err(Error::Data(_))));
        assert!(matches!(
            parse_manifest("a\tonly-one-tab", false),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            parse_manifest("a\tp\tx\na\tq\ty\n", false),
            Err(Error::Data(msg)) if msg.contains("duplicate")
        ));
        assert!(matches!(parse_manifest("", false), Err(Error::Data(_))));
    }

    #[test]
    fn word_inventory_thresholds_and_order() {
        let corpus = vec![
            vec!["a".to_string(), "a".to_string()],
            vec!["a".to_string(), "b".to_string()],
        ];
        let inv = build_word_inventory(&corpus, 2).unwrap();
        assert_eq!(
            inv.names(),
            ["a".to_string(), crate::graphs::BLANK_NAME.to_string()]
        );
        assert!(inv.is_ctc());

        let all = build_word_inventory(&corpus, 1).unwrap();
        assert_eq!(all.names()[..2], ["a".to_string(), "b".to_string()]);
        assert_eq!(all.len(), 3);

        // Equal frequencies fall back to lexicographic order.
        let ties = vec![vec!["z".to_string(), "m".to_string(), "c".to_string()]];
        let inv = build_word_inventory(&ties, 1).unwrap();
        assert_eq!(
            inv.names()[..3],
            ["c".to_string(), "m".to_string(), "z".to_string()]
        );

        assert!(matches!(
            build_word_inventory(&corpus, 10),
            Err(Error::Data(_))
        ));
        assert!(matches!(build_word_inventory(&[], 1), Err(Error::Data(_))));

        assert_eq!(min_exemplars_preset("7k-style").unwrap(), 150);
        assert_eq!(min_exemplars_preset("25k-style").unwrap(), 20);
        assert!(min_exemplars_preset("huge").is_err());
    }

    #[test]
    fn arch_names_resolve_to_layer_stacks() {
        let uni = parse_arch("uni-2x8").unwrap();
        assert_eq!(uni.len(), 2);
        assert_eq!(uni[0].cells, 8);
        assert_eq!(uni[0].direction, Direction::Forward);
        assert_eq!(uni[0].projection, None);

        let bi = parse_arch("bi-1x4-p2").unwrap();
        assert_eq!(bi.len(), 1);
        assert_eq!(bi[0].direction, Direction::Bidirectional);
        assert_eq!(bi[0].projection, Some(2));

        assert_eq!(parse_arch("ctc-uni").unwrap().len(), 5);
        for bad in [
            "uni",
            "uni-x8",
            "uni-2x",
            "tri-2x8",
            "uni-0x8",
            "uni-2x8-q4",
            "uni-2x8-p",
        ] {
            assert!(parse_arch(bad).is_err(), "{bad} should not parse");
        }
    }

    #[test]
    fn flat_start_splits_frames_evenly_in_order() {
        assert_eq!(
            flat_start_alignment(6, &[4, 5, 6]).unwrap(),
            vec![4, 4, 5, 5, 6, 6]
        );
        assert_eq!(
            flat_start_alignment(7, &[0, 1, 2]).unwrap(),
            vec![0, 0, 1, 1, 2, 2, 2]
        );
        assert_eq!(flat_start_alignment(3, &[9]).unwrap(), vec![9, 9, 9]);
        assert!(matches!(
            flat_start_alignment(2, &[0, 1, 2]),
            Err(Error::InputTooShort(_))
        ));
        assert!(matches!(flat_start_alignment(5, &[]), Err(Error::Data(_))));

        // Every label gets at least one frame whenever frames suffice.
        for t in 3..40 {
            let align = flat_start_alignment(t, &[7, 8, 9]).unwrap();
            assert_eq!(align.len(), t);
            assert!(align.contains(&7) && align.contains(&8) && align.contains(&9));
        }
    }

    #[test]
    fn alignment_lattice_has_one_arc_per_run() {
        let lat = alignment_lattice(&[2, 2, 0, 1, 1, 1]).unwrap();
        lat.validate().unwrap();
        let frames: Vec<usize> = lat.nodes.iter().map(|n| n.frame).collect();
        assert_eq!(frames, vec![0, 2, 3, 6]);
        let labels: Vec<LabelId> = lat.arcs.iter().map(|a| a.label).collect();
        assert_eq!(labels, vec![2, 0, 1]);
        assert_eq!(lat.finals, vec![3]);
        assert!(alignment_lattice(&[]).is_err());
    }

    #[test]
    fn toy_corpus_is_deterministic_and_well_formed() {
        let corpus = small_toy(5, 3, 11);
        let again = small_toy(5, 3, 11);
        assert_eq!(corpus.inventory.names(), again.inventory.names());
        assert_eq!(corpus.train.len(), 5);
        assert_eq!(corpus.eval.len(), 3);
        for (a, b) in corpus.train.iter().zip(&again.train) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.feats.data, b.feats.data);
        }
        let blank = corpus.inventory.blank_id().unwrap();
        for item in corpus.train.iter().chain(&corpus.eval) {
            assert!((2..=3).contains(&item.labels.len()));
            assert!(
                item.labels.windows(2).all(|w| w[0] != w[1]),
                "no back-to-back repeats"
            );
            assert!(item.labels.iter().all(|&l| l < blank));
            assert_eq!(item.feats.dim(), 4);
            assert!(item.feats.n_frames() >= 2 * (2 + 1));
        }

        let different = small_toy(5, 3, 12);
        assert_ne!(corpus.train[0].feats.data, different.train[0].feats.data);

        let bad = ToyConfig {
            n_labels: 9,
            feat_dim: 4,
            ..ToyConfig::default()
        };
        assert!(toy_corpus(&bad).is_err());
    }

    #[test]
    fn toy_lexicon_lists_each_label_as_its_own_word() {
        let corpus = small_toy(1, 0, 1);
        let text = toy_lexicon_text(&corpus.inventory);
        let lex = Lexicon::parse(&text, &corpus.inventory).unwrap();
        assert_eq!(lex.n_words(), 3);
        for w in 0..lex.n_words() {
            let pron = &lex.prons(w)[0];
            assert_eq!(corpus.inventory.name(pron[0]), lex.word(w));
        }
    }

    #[test]
    fn zero_learning_rate_leaves_the_model_unchanged() {
        let corpus = small_toy(4, 0, 2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick_cfg(3)
        };
        let out = train(&cfg, &corpus.train, &corpus.inventory, None, None).unwrap();
        assert!(!out.diverged);
        assert_eq!(out.metrics.len(), 3);

        let arch = parse_arch(&cfg.arch).unwrap();
        let stacked: Vec<FeatureMatrix> = corpus
            .train
            .iter()
            .map(|i| stack_frames(&i.feats, &cfg.stack).unwrap())
            .collect();
        let mut fresh =
            init_params(&arch, stacked[0].dim(), corpus.inventory.clone(), cfg.seed).unwrap();
        fresh.stack = cfg.stack;
        fresh.normalizer = Some(FeatureNormalizer::fit(stacked.iter()).unwrap());

        let (before, _) = forward_stacked(&fresh, &corpus.train[0].feats).unwrap();
        let (after, _) = forward_stacked(&out.model, &corpus.train[0].feats).unwrap();
        assert_eq!(before.probs, after.probs);
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let corpus = small_toy(4, 0, 3);
        let dir = tempfile::tempdir().unwrap();
        let run = |name: &str, seed: u64| {
            let cfg = TrainConfig {
                seed,
                checkpoint_dir: Some(dir.path().join(name)),
                ..quick_cfg(4)
            };
            fs::create_dir_all(dir.path().join(name)).unwrap();
            let out = train(&cfg, &corpus.train, &corpus.inventory, None, None).unwrap();
            fs::read(out.checkpoints.last().unwrap()).unwrap()
        };
        assert_eq!(run("a", 5), run("b", 5));
        assert_ne!(run("c", 5), run("d", 6));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut order = epoch_permutation(100, &mut rng);
        order.sort_unstable();
        assert_eq!(order, (0..100).collect::<Vec<_>>());

        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(epoch_permutation(50, &mut a), epoch_permutation(50, &mut b));
        let mut c = ChaCha8Rng::seed_from_u64(2);
        assert_ne!(epoch_permutation(50, &mut a), epoch_permutation(50, &mut c));
    }

    #[test]
    fn worker_count_does_not_change_the_result() {
        let corpus = small_toy(6, 0, 4);
        let single = train(&quick_cfg(5), &corpus.train, &corpus.inventory, None, None).unwrap();
        let cfg = TrainConfig {
            workers: 3,
            ..quick_cfg(5)
        };
        let multi = train(&cfg, &corpus.train, &corpus.inventory, None, None).unwrap();
        let key = |ms: &[StepMetrics]| {
            ms.iter()
                .map(|m| (m.step, m.loss, m.grad_norm))
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&single.metrics), key(&multi.metrics));
        let (a, _) = forward_stacked(&single.model, &corpus.train[0].feats).unwrap();
        let (b, _) = forward_stacked(&multi.model, &corpus.train[0].feats).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn training_reduces_ctc_loss_on_the_toy_corpus() {
        let corpus = small_toy(8, 0, 6);
        let cfg = TrainConfig {
            learning_rate: 0.08,
            ..quick_cfg(40)
        };
        let out = train(&cfg, &corpus.train, &corpus.inventory, None, None).unwrap();
        assert!(!out.diverged);
        assert_eq!(out.metrics.len(), 40);
        assert!(out
            .metrics
            .iter()
            .all(|m| m.loss.is_finite() && m.grad_norm > 0.0));
        let first: f64 = out.metrics[..5].iter().map(|m| m.loss).sum::<f64>() / 5.0;
        let last: f64 = out.metrics[35..].iter().map(|m| m.loss).sum::<f64>() / 5.0;
        assert!(
            last < first,
            "loss should fall, went {first:.4} -> {last:.4}"
        );
        for (i, m) in out.metrics.iter().enumerate() {
            assert_eq!(m.step, i + 1);
            let line = m.log_line();
            assert_eq!(line.split_whitespace().count(), 4);
            assert!(line.starts_with(&format!("{} ", i + 1)));
        }
    }

    #[test]
    fn ce_and_realign_criteria_take_steps() {
        let corpus = small_toy(4, 0, 13);
        for criterion in [Criterion::Ce, Criterion::Realign] {
            let cfg = TrainConfig {
                criterion,
                ..quick_cfg(3)
            };
            let out = train(&cfg, &corpus.train, &corpus.inventory, None, None).unwrap();
            assert!(!out.diverged, "{} diverged", criterion.name());
            assert_eq!(out.metrics.len(), 3);
            assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
        }
    }

    #[test]
    fn one_smbr_step_runs_against_a_decode_graph() {
        let corpus = small_toy(3, 0, 8);
        let (graph, _lex) = toy_decode_setup(&corpus.inventory);
        let ctc = train(&quick_cfg(5), &corpus.train, &corpus.inventory, None, None).unwrap();
        let cfg = TrainConfig {
            criterion: Criterion::Smbr,
            learning_rate: 1e-3,
            ..quick_cfg(2)
        };
        let res = SmbrResources {
            graph,
            decode: wide_open(),
        };
        let out = train(
            &cfg,
            &corpus.train,
            &corpus.inventory,
            Some(ctc.model),
            Some(&res),
        )
        .unwrap();
        assert!(!out.diverged);
        assert_eq!(out.metrics.len(), 2);
        assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
    }

    #[test]
    fn divergence_stops_the_run_and_keeps_the_last_finite_model() {
        let corpus = small_toy(4, 0, 5);
        let cfg = TrainConfig {
            learning_rate: 1e30,
            momentum: 0.0,
            ..quick_cfg(10)
        };
        let out = train(&cfg, &corpus.train, &corpus.inventory, None, None).unwrap();
        assert!(out.diverged);
        assert!(
            out.metrics.len() < 10,
            "divergence should cut the run short"
        );
        assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let corpus = small_toy(2, 0, 7);
        let items = &corpus.train;
        let inv = &corpus.inventory;

        let bad = TrainConfig {
            batch_size: 0,
            ..quick_cfg(1)
        };
        assert!(matches!(
            train(&bad, items, inv, None, None),
            Err(Error::InvalidConfig(_))
        ));
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..quick_cfg(1)
        };
        assert!(matches!(
            train(&bad, items, inv, None, None),
            Err(Error::InvalidConfig(_))
        ));
        let bad = TrainConfig {
            momentum: 1.0,
            ..quick_cfg(1)
        };
        assert!(matches!(
            train(&bad, items, inv, None, None),
            Err(Error::InvalidConfig(_))
        ));

        assert!(matches!(
            train(&quick_cfg(1), &[], inv, None, None),
            Err(Error::Data(_))
        ));

        let mut empty = items.to_vec();
        empty[0].labels.clear();
        assert!(matches!(
            train(&quick_cfg(1), &empty, inv, None, None),
            Err(Error::Data(_))
        ));

        let mut oob = items.to_vec();
        oob[0].labels[0] = inv.len();
        assert!(matches!(
            train(&quick_cfg(1), &oob, inv, None, None),
            Err(Error::UnknownLabel(_))
        ));

        let no_blank = LabelInventory::from_names(
            vec!["l0".into(), "l1".into(), "l2".into()],
            InventoryKind::CiPhone,
        )
        .unwrap();
        assert!(matches!(
            train(&quick_cfg(1), items, &no_blank, None, None),
            Err(Error::NotCtc(_))
        ));

        let smbr_cfg = TrainConfig {
            criterion: Criterion::Smbr,
            ..quick_cfg(1)
        };
        assert!(matches!(
            train(&smbr_cfg, items, inv, None, None),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn resuming_carries_geometry_and_checks_the_inventory() {
        let corpus = small_toy(3, 0, 9);
        let first = train(&quick_cfg(2), &corpus.train, &corpus.inventory, None, None).unwrap();

        // The arch string is ignored on resume; geometry comes from the
        // checkpoint.
        let resume = TrainConfig {
            arch: "not-a-real-arch".into(),
            learning_rate: 0.0,
            ..quick_cfg(1)
        };
        let out = train(
            &resume,
            &corpus.train,
            &corpus.inventory,
            Some(first.model.clone()),
            None,
        )
        .unwrap();
        let (a, _) = forward_stacked(&first.model, &corpus.train[0].feats).unwrap();
        let (b, _) = forward_stacked(&out.model, &corpus.train[0].feats).unwrap();
        assert_eq!(a.probs, b.probs);

        let other = small_toy(1, 0, 1);
        let mut wrong_inv = other.inventory.names().to_vec();
        wrong_inv.truncate(2);
        let wrong = LabelInventory::from_names(wrong_inv, InventoryKind::CiPhone)
            .unwrap()
            .with_blank();
        assert!(matches!(
            train(
                &quick_cfg(1),
                &corpus.train,
                &wrong.unwrap(),
                Some(first.model),
                None
            ),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn checkpoints_round_trip_through_the_scheduled_saves() {
        let corpus = small_toy(3, 0, 10);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 2,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..quick_cfg(4)
        };
        let out = train(&cfg, &corpus.train, &corpus.inventory, None, None).unwrap();
        let names: Vec<String> = out
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["step-000002.ck", "step-000004.ck", "final.ck"]);
        let loaded = load_checkpoint(out.checkpoints.last().unwrap()).unwrap();
        let (a, _) = forward_stacked(&out.model, &corpus.train[0].feats).unwrap();
        let (b, _) = forward_stacked(&loaded, &corpus.train[0].feats).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn dump_respects_the_threshold_strictly() {
        let names: Vec<String> = (0..9).map(|i| format!("l{i}")).collect();
        let inv = LabelInventory::from_names(names, InventoryKind::CiPhone)
            .unwrap()
            .with_blank()
            .unwrap();
        let arch = parse_arch("uni-1x6").unwrap();
        let model = init_params(&arch, 4, inv, 1).unwrap();
        let feats = FeatureMatrix {
            data: Array2::zeros((5, 4)),
            frame_shift_ms: 10.0,
            window_ms: 25.0,
        };

        // Tiny random weights keep posteriors near uniform, so with 10
        // labels every entry clears 0.05.
        let dump = dump_posteriorgram(&model, &feats, 0.05, DumpFormat::Csv).unwrap();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines[0], "frame,label,posterior");
        assert_eq!(lines.len(), 1 + 5 * 10);
        for line in &lines[1..] {
            let p: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert!(p > 0.05);
        }

        let none = dump_posteriorgram(&model, &feats, 1.0, DumpFormat::Csv).unwrap();
        assert_eq!(none, "frame,label,posterior\n");

        let tsv = dump_posteriorgram(&model, &feats, 0.05, DumpFormat::Tsv).unwrap();
        assert!(tsv.starts_with("frame\tlabel\tposterior\n"));
        assert_eq!(tsv.lines().count(), dump.lines().count());

        assert!(dump_posteriorgram(&model, &feats, -0.1, DumpFormat::Csv).is_err());
        assert!(dump_posteriorgram(&model, &feats, f64::NAN, DumpFormat::Csv).is_err());
    }

    #[test]
    fn evaluate_scores_decodes_and_records_failures() {
        let corpus = small_toy(3, 2, 14);
        let (graph, lex) = toy_decode_setup(&corpus.inventory);
        let model = train(&quick_cfg(2), &corpus.train, &corpus.inventory, None, None)
            .unwrap()
            .model;
        let items: Vec<EvalItem> = corpus
            .eval
            .iter()
            .map(|i| EvalItem {
                id: i.id.clone(),
                feats: i.feats.clone(),
                words: i
                    .labels
                    .iter()
                    .map(|&l| corpus.inventory.name(l).to_string())
                    .collect(),
            })
            .collect();
        let out = evaluate(
            &model,
            &items,
            &graph,
            &lex,
            &wide_open(),
            ScoreMode::All,
            None,
        )
        .unwrap();
        assert!(out.failures.is_empty());
        assert_eq!(out.lines.len(), 2);
        for (line, item) in out.lines.iter().zip(&items) {
            assert!(line.starts_with(&format!("{}\t", item.id)));
            assert_eq!(line.split('\t').count(), 3);
        }
        assert_eq!(out.report.n_utterances_scored, 2);

        // Wrong feature width: every decode fails, scoring survives as
        // empty hypotheses.
        let narrow: Vec<EvalItem> = items
            .iter()
            .map(|i| EvalItem {
                id: i.id.clone(),
                feats: FeatureMatrix {
                    data: Array2::zeros((6, 2)),
                    frame_shift_ms: 10.0,
                    window_ms: 25.0,
                },
                words: i.words.clone(),
            })
            .collect();
        let out = evaluate(
            &model,
            &narrow,
            &graph,
            &lex,
            &wide_open(),
            ScoreMode::All,
            None,
        )
        .unwrap();
        assert_eq!(out.failures.len(), 2);
        assert_eq!(out.report.wer_percent, 100.0);
        assert_eq!(out.report.deletions, out.report.n_ref_tokens);
    }

    #[test]
    fn sweep_returns_one_wer_per_scale() {
        let corpus = small_toy(2, 2, 15);
        let (graph, lex) = toy_decode_setup(&corpus.inventory);
        let model = train(&quick_cfg(1), &corpus.train, &corpus.inventory, None, None)
            .unwrap()
            .model;
        let items: Vec<EvalItem> = corpus
            .eval
            .iter()
            .map(|i| EvalItem {
                id: i.id.clone(),
                feats: i.feats.clone(),
                words: i
                    .labels
                    .iter()
                    .map(|&l| corpus.inventory.name(l).to_string())
                    .collect(),
            })
            .collect();
        let rows = sweep_blank_scale(
            &model,
            &items,
            &graph,
            &lex,
            &wide_open(),
            &[0.5, 1.0, 2.0],
            ScoreMode::All,
            None,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(
            rows.iter().map(|r| r.0).collect::<Vec<_>>(),
            vec![0.5, 1.0, 2.0]
        );
        assert!(rows.iter().all(|r| r.1.is_finite() && r.1 >= 0.0));
    }

    #[test]
    fn greedy_error_rate_needs_references() {
        let corpus = small_toy(2, 0, 16);
        let model = train(&quick_cfg(1), &corpus.train, &corpus.inventory, None, None)
            .unwrap()
            .model;
        let rate = greedy_label_error_rate(&model, &corpus.train).unwrap();
        assert!(rate.is_finite() && rate >= 0.0);

        let mut empty = corpus.train.clone();
        for item in &mut empty {
            item.labels.clear();
        }
        assert!(matches!(
            greedy_label_error_rate(&model, &empty),
            Err(Error::EmptyReferenceSet)
        ));
    }

    #[test]
    fn plateau_halving_only_fires_when_loss_stalls() {
        let corpus = small_toy(3, 0, 17);
        // Zero learning rate never improves, so every window halves.
        let cfg = TrainConfig {
            learning_rate: 0.0,
            plateau_window: 2,
            ..quick_cfg(6)
        };
        let out = train(&cfg, &corpus.train, &corpus.inventory, None, None).unwrap();
        assert!(out.final_learning_rate == 0.0 && !out.diverged);

        let cfg = TrainConfig {
            learning_rate: 0.05,
            plateau_window: 2,
            ..quick_cfg(6)
        };
        let out = train(&cfg, &corpus.train, &corpus.inventory, None, None).unwrap();
        assert!(out.final_learning_rate <= 0.05);
        assert!(out.final_learning_rate >= 0.05 * 0.5f64.powi(2));
    }
}
