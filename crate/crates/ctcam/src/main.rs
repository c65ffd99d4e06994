//! Command line driver for the toolkit. Every subcommand reads an
//! optional flat `key=value` settings file; explicit flags override it.
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::collections::{HashMap, HashSet};
use std::fmt::Display;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use ctcam::cdphone::{
    collect_samples, default_questions, duration_minima, grow_trees, PhoneSample,
    TreeGrowOptions, TreeSet,
};
use ctcam::decoder::{
    beam_search, build_decode_graph, greedy_ctc_decode, score_wer, DecodeGraphOptions,
    DecodeParams, LanguageModel, ScoreMode,
};
use ctcam::error::{Error, Result};
use ctcam::frontend::{
    compute_logmel, read_feature_file, stack_frames, write_feature_file, FeatureMatrix,
    LogMelConfig, StackConfig, Waveform,
};
use ctcam::graphs::{
    build_ctc_graph, build_forced_graph, viterbi_align, InventoryKind, LabelId, LabelInventory,
    Lexicon,
};
use ctcam::harness::{
    build_word_inventory, dump_posteriorgram, forward_stacked, min_exemplars_preset,
    read_manifest, sweep_blank_scale, toy_corpus, toy_lexicon_text, train,
    Criterion, DumpFormat, EvalItem, SmbrResources, ToyConfig, TrainConfig, TrainItem, Utterance,
};
use ctcam::nnet::{load_checkpoint, save_checkpoint, ModelParams};

#[derive(Parser)]
#[command(name = "ctcam", version, about = "LSTM acoustic modeling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute log-mel features for a manifest of wav files.
    Featurize(FeaturizeArgs),
    /// Force-align transcripts and print per-frame labels.
    Align(AlignArgs),
    /// Grow context-dependent phone trees from aligned data.
    ClusterPhones(ClusterArgs),
    /// Train a model with ce, ctc, realign, or smbr.
    Train(Box<TrainArgs>),
    /// Beam-search decode a manifest against a lexicon and LM.
    Decode(DecodeArgs),
    /// Frame-wise argmax decoding with blank collapse.
    GreedyDecode(GreedyArgs),
    /// Score hypotheses against reference transcripts.
    Score(ScoreArgs),
    /// Tabulate label posteriors above a threshold.
    DumpPosteriors(DumpArgs),
    /// Evaluate WER across a grid of blank scales.
    SweepBlankScale(SweepArgs),
    /// Generate the synthetic corpus with features, manifests, lexicon,
    /// and language model.
    ToyData(ToyArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value settings file; flags override its entries.
    #[arg(long, global = false)]
    config: Option<PathBuf>,
    /// Seed for any stochastic choice.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct LogMelArgs {
    #[arg(long)]
    n_mels: Option<usize>,
    #[arg(long)]
    window_ms: Option<f64>,
    #[arg(long)]
    shift_ms: Option<f64>,
}

#[derive(Args)]
struct DecodeFlags {
    #[arg(long)]
    beam: Option<f64>,
    #[arg(long)]
    max_active: Option<usize>,
    #[arg(long)]
    am_weight: Option<f64>,
    #[arg(long)]
    blank_scale: Option<f64>,
    #[arg(long)]
    lattice_nbest: Option<usize>,
    #[arg(long)]
    nbest_per_state: Option<usize>,
}

#[derive(Args)]
struct FeaturizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Manifest of wav files, one `id TAB path TAB transcript` per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory the feature files are written into.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Rewritten manifest pointing at the features (stdout if omitted).
    #[arg(long)]
    out_manifest: Option<PathBuf>,
    #[command(flatten)]
    logmel: LogMelArgs,
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Pronunciation lexicon; needed when the model outputs phones.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Output file (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    logmel: LogMelArgs,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Tree file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-unit duration minima here.
    #[arg(long)]
    minima_out: Option<PathBuf>,
    #[arg(long)]
    max_leaves: Option<usize>,
    #[arg(long)]
    min_gain: Option<f64>,
    #[arg(long)]
    min_leaf_count: Option<usize>,
    /// Duration percentile behind the minima.
    #[arg(long)]
    percentile: Option<f64>,
    #[command(flatten)]
    logmel: LogMelArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Label inventory file, one name per line.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Inventory kind for --labels: ci or word.
    #[arg(long)]
    label_kind: Option<String>,
    /// Append a blank to the inventory if it lacks one.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    add_blank: Option<bool>,
    /// Build a word inventory from the transcripts instead of reading
    /// --labels: a count, or the presets 7k-style / 25k-style.
    #[arg(long)]
    build_vocab: Option<String>,
    /// Pronunciation lexicon; needed for phone models and for the smbr
    /// decode graph. Word models default to each word spelling itself.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Language model file for the smbr decode graph.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Checkpoint to resume from; its geometry and inventory win.
    #[arg(long)]
    model_in: Option<PathBuf>,
    /// Where the final model is saved.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics log destination (stdout if omitted).
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    stack: Option<usize>,
    #[arg(long)]
    skip: Option<usize>,
    #[arg(long)]
    replicate_edges: Option<bool>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    target_delay: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    plateau_window: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
    #[command(flatten)]
    logmel: LogMelArgs,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Context-dependency tree file; needs --phones for the
    /// context-independent inventory the lexicon is written in.
    #[arg(long)]
    tree: Option<PathBuf>,
    /// Context-independent phone inventory file, used with --tree.
    #[arg(long)]
    phones: Option<PathBuf>,
    /// Per-label duration minima file, `name TAB frames` lines.
    #[arg(long)]
    minima: Option<PathBuf>,
    /// Output file (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
    #[command(flatten)]
    logmel: LogMelArgs,
}

#[derive(Args)]
struct GreedyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    logmel: LogMelArgs,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Reference manifest, `id TAB path TAB transcript`.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Hypothesis file from decode, `id TAB words TAB score`.
    #[arg(long)]
    hyps: Option<PathBuf>,
    /// Scoring mode: all or exclude-oov.
    #[arg(long)]
    mode: Option<String>,
    /// Vocabulary file for exclude-oov, one word per line.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Feature or wav file to run.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// csv or tsv.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    logmel: LogMelArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Manifest with reference transcripts.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Comma-separated blank scales, for example 0.5,1,2,4.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    exclude_oov: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
    #[command(flatten)]
    logmel: LogMelArgs,
}

#[derive(Args)]
struct ToyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    n_labels: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    feat_dim: Option<usize>,
    #[arg(long)]
    min_words: Option<usize>,
    #[arg(long)]
    max_words: Option<usize>,
    #[arg(long)]
    min_dur: Option<usize>,
    #[arg(long)]
    max_dur: Option<usize>,
    #[arg(long)]
    min_pad: Option<usize>,
    #[arg(long)]
    max_pad: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    gain: Option<f64>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Featurize(a) => cmd_featurize(a),
        Command::Align(a) => cmd_align(a),
        Command::ClusterPhones(a) => cmd_cluster(a),
        Command::Train(a) => cmd_train(*a),
        Command::Decode(a) => cmd_decode(a),
        Command::GreedyDecode(a) => cmd_greedy(a),
        Command::Score(a) => cmd_score(a),
        Command::DumpPosteriors(a) => cmd_dump(a),
        Command::SweepBlankScale(a) => cmd_sweep(a),
        Command::ToyData(a) => cmd_toy(a),
    }
}

// --- settings resolution ---

/// Key=value pairs from the optional config file. Flags win over keys,
/// keys win over built-in defaults. Keys use the flag spelling, for
/// example `learning-rate = 0.01`.
struct Settings(HashMap<String, String>);

impl Settings {
    fn load(path: Option<&Path>) -> Result<Settings> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text =
                fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "config line {}: expected key = value",
                        lineno + 1
                    ))
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Settings(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::InvalidConfig(format!("config key {key} = {v:?}: {e}"))),
        }
    }

    fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.opt(flag, key)?.ok_or_else(|| {
            Error::InvalidConfig(format!("missing --{key} (or a {key}= config entry)"))
        })
    }
}

// --- shared plumbing ---

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p.display().to_string(), e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::io("stdout", e))
        }
    }
}

fn logmel_config(s: &Settings, a: &LogMelArgs) -> Result<LogMelConfig> {
    let d = LogMelConfig::default();
    Ok(LogMelConfig {
        n_mels: s.resolve(a.n_mels, "n-mels", d.n_mels)?,
        window_ms: s.resolve(a.window_ms, "window-ms", d.window_ms)?,
        shift_ms: s.resolve(a.shift_ms, "shift-ms", d.shift_ms)?,
    })
}

fn decode_params(s: &Settings, a: &DecodeFlags) -> Result<DecodeParams> {
    let d = DecodeParams::default();
    Ok(DecodeParams {
        beam: s.resolve(a.beam, "beam", d.beam)?,
        max_active: s.resolve(a.max_active, "max-active", d.max_active)?,
        am_weight: s.resolve(a.am_weight, "am-weight", d.am_weight)?,
        blank_scale: s.resolve(a.blank_scale, "blank-scale", d.blank_scale)?,
        lattice_nbest: s.resolve(a.lattice_nbest, "lattice-nbest", d.lattice_nbest)?,
        nbest_per_state: s.resolve(a.nbest_per_state, "nbest-per-state", d.nbest_per_state)?,
    })
}

/// Read features from disk, computing log-mel on the fly for wav input.
fn load_features(path: &Path, logmel: &LogMelConfig) -> Result<FeatureMatrix> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
        compute_logmel(&Waveform::read_wav(path)?, logmel)
    } else {
        read_feature_file(path)
    }
}

/// Map a transcript onto model output labels: word inventories index
/// the words directly, phone inventories spell each word with its first
/// lexicon pronunciation.
fn transcript_to_labels(
    words: &[String],
    inv: &LabelInventory,
    lex: Option<&Lexicon>,
) -> Result<Vec<LabelId>> {
    match inv.kind() {
        InventoryKind::Word => words
            .iter()
            .map(|w| {
                inv.id(w)
                    .ok_or_else(|| Error::UnknownLabel(format!("word {w:?} is out of vocabulary")))
            })
            .collect(),
        InventoryKind::CiPhone | InventoryKind::CdPhone => {
            let lex = lex.ok_or_else(|| {
                Error::InvalidConfig("phone models need --lexicon to spell transcripts".into())
            })?;
            let mut out = Vec::new();
            for w in words {
                let wid = lex
                    .word_id(w)
                    .ok_or_else(|| Error::LexiconGap(format!("word {w:?} has no pronunciation")))?;
                out.extend_from_slice(&lex.prons(wid)[0]);
            }
            Ok(out)
        }
    }
}

fn load_items(
    utts: &[Utterance],
    inv: &LabelInventory,
    lex: Option<&Lexicon>,
    logmel: &LogMelConfig,
) -> Result<Vec<TrainItem>> {
    utts.iter()
        .map(|u| {
            Ok(TrainItem {
                id: u.id.clone(),
                feats: load_features(&u.path, logmel)?,
                labels: transcript_to_labels(&u.transcript, inv, lex)?,
            })
        })
        .collect()
}

/// Best path of the transcript through the model's output, one label
/// per decimated frame.
fn align_frames(
    model: &ModelParams,
    feats: &FeatureMatrix,
    labels: &[LabelId],
) -> Result<Vec<LabelId>> {
    let (post, _) = forward_stacked(model, feats)?;
    let graph = if model.inventory.is_ctc() {
        build_ctc_graph(labels, &model.inventory)?
    } else {
        build_forced_graph(labels)?
    };
    viterbi_align(&graph, &post.probs, None)
}

fn parse_kind(name: &str) -> Result<InventoryKind> {
    match name {
        "ci" => Ok(InventoryKind::CiPhone),
        "word" => Ok(InventoryKind::Word),
        other => Err(Error::InvalidConfig(format!(
            "unknown label kind {other:?}; expected ci or word"
        ))),
    }
}

fn parse_minima(text: &str, inv: &LabelInventory) -> Result<Vec<usize>> {
    let mut out = vec![1usize; inv.len()];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (name, value) = match (fields.next(), fields.next(), fields.next()) {
            (Some(n), Some(v), None) => (n, v),
            _ => {
                return Err(Error::Data(format!(
                    "minima line {}: expected 'label frames'",
                    lineno + 1
                )))
            }
        };
        let id = inv
            .id(name)
            .ok_or_else(|| Error::UnknownLabel(format!("minima line {}: {name:?}", lineno + 1)))?;
        out[id] = value
            .parse()
            .map_err(|_| Error::Data(format!("minima line {}: bad frame count", lineno + 1)))?;
    }
    Ok(out)
}

// --- subcommands ---

fn cmd_featurize(a: FeaturizeArgs) -> Result<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let manifest: PathBuf = s.require(a.manifest, "manifest")?;
    let out_dir: PathBuf = s.require(a.out_dir, "out-dir")?;
    let logmel = logmel_config(&s, &a.logmel)?;
    let utts = read_manifest(&manifest, false)?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut lines = String::new();
    for u in &utts {
        let feat = compute_logmel(&Waveform::read_wav(&u.path)?, &logmel)?;
        let path = out_dir.join(format!("{}.feat", u.id));
        write_feature_file(&path, &feat)?;
        lines.push_str(&format!("{}\t{}\t{}\n", u.id, path.display(), u.transcript.join(" ")));
    }
    write_output(a.out_manifest.as_deref(), &lines)?;
    eprintln!("featurized {} utterances into {}", utts.len(), out_dir.display());
    Ok(())
}

fn cmd_align(a: AlignArgs) -> Result<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let model = load_checkpoint(&s.require(a.model, "model")?)?;
    let logmel = logmel_config(&s, &a.logmel)?;
    let utts = read_manifest(&s.require(a.manifest, "manifest")?, true)?;
    let lex = match s.opt(a.lexicon, "lexicon")? {
        Some(p) => Some(Lexicon::parse(&read_text(&p)?, &model.inventory)?),
        None => None,
    };
    let mut lines = String::new();
    for u in &utts {
        let feats = load_features(&u.path, &logmel)?;
        let labels = transcript_to_labels(&u.transcript, &model.inventory, lex.as_ref())?;
        let align = align_frames(&model, &feats, &labels)?;
        let names: Vec<&str> = align.iter().map(|&l| model.inventory.name(l)).collect();
        lines.push_str(&format!("{}\t{}\n", u.id, names.join(" ")));
    }
    write_output(a.out.as_deref(), &lines)
}

fn cmd_cluster(a: ClusterArgs) -> Result<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let model = load_checkpoint(&s.require(a.model, "model")?)?;
    let logmel = logmel_config(&s, &a.logmel)?;
    let utts = read_manifest(&s.require(a.manifest, "manifest")?, true)?;
    let out: PathBuf = s.require(a.out, "out")?;
    let lex = match s.opt(a.lexicon, "lexicon")? {
        Some(p) => Some(Lexicon::parse(&read_text(&p)?, &model.inventory)?),
        None => None,
    };
    let opts = TreeGrowOptions {
        max_leaves: s.resolve(a.max_leaves, "max-leaves", 1000)?,
        min_gain: s.resolve(a.min_gain, "min-gain", 0.0)?,
        min_leaf_count: s.resolve(a.min_leaf_count, "min-leaf-count", 3)?,
    };

    let mut samples: Vec<PhoneSample> = Vec::new();
    for u in &utts {
        let feats = load_features(&u.path, &logmel)?;
        let labels = transcript_to_labels(&u.transcript, &model.inventory, lex.as_ref())?;
        let align = align_frames(&model, &feats, &labels)?;
        let stacked = stack_frames(&feats, &model.stack)?;
        samples.extend(collect_samples(&align, &stacked, model.inventory.blank_id())?);
    }

    let questions = default_questions(&model.inventory);
    let (trees, records) = grow_trees(&samples, &questions, &opts, model.inventory.len())?;
    fs::write(&out, trees.to_text(&model.inventory))
        .map_err(|e| Error::io(out.display().to_string(), e))?;

    let mut summary = String::new();
    for r in &records {
        summary.push_str(&format!(
            "{}\t{}\tgain={:.3}\tyes={}\tno={}\n",
            model.inventory.name(r.phone),
            questions[r.question].name,
            r.gain,
            r.n_yes,
            r.n_no
        ));
    }
    write_output(None, &summary)?;

    if let Some(minima_out) = s.opt(a.minima_out, "minima-out")? {
        let percentile = s.resolve(a.percentile, "percentile", 0.1)?;
        let minima = duration_minima(&samples, &trees, percentile)?;
        let cd = trees.cd_inventory(&model.inventory)?;
        let text: String = minima
            .iter()
            .enumerate()
            .map(|(i, m)| format!("{}\t{m}\n", cd.name(i)))
            .collect();
        fs::write(&minima_out, text).map_err(|e| Error::io(minima_out.display().to_string(), e))?;
    }
    eprintln!(
        "clustered {} samples into {} leaves over {} trees; wrote {}",
        samples.len(),
        trees.n_leaves(),
        trees.covered_phones().count(),
        out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let criterion = Criterion::parse(&s.resolve(a.criterion, "criterion", "ctc".to_string())?)?;
    let logmel = logmel_config(&s, &a.logmel)?;
    let utts = read_manifest(&s.require(a.manifest, "manifest")?, true)?;
    let out: PathBuf = s.require(a.out, "out")?;

    let mut cfg = TrainConfig::new(criterion);
    cfg.arch = s.resolve(a.arch, "arch", cfg.arch)?;
    cfg.stack = StackConfig {
        stack: s.resolve(a.stack, "stack", 1)?,
        skip: s.resolve(a.skip, "skip", 1)?,
        replicate_edges: s.resolve(a.replicate_edges, "replicate-edges", true)?,
    };
    cfg.learning_rate = s.resolve(a.learning_rate, "learning-rate", cfg.learning_rate)?;
    cfg.momentum = s.resolve(a.momentum, "momentum", cfg.momentum)?;
    cfg.batch_size = s.resolve(a.batch_size, "batch-size", cfg.batch_size)?;
    cfg.steps = s.resolve(a.steps, "steps", cfg.steps)?;
    cfg.seed = s.resolve(a.common.seed, "seed", cfg.seed)?;
    cfg.blank_scale = s.resolve(a.decode.blank_scale, "blank-scale", cfg.blank_scale)?;
    cfg.kappa = s.resolve(a.kappa, "kappa", cfg.kappa)?;
    cfg.target_delay = s.resolve(a.target_delay, "target-delay", cfg.target_delay)?;
    cfg.workers = s.resolve(a.workers, "workers", cfg.workers)?;
    cfg.plateau_window = s.resolve(a.plateau_window, "plateau-window", cfg.plateau_window)?;
    cfg.checkpoint_every = s.resolve(a.checkpoint_every, "checkpoint-every", cfg.checkpoint_every)?;
    cfg.checkpoint_dir = s.opt(a.checkpoint_dir, "checkpoint-dir")?;
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    let model_in = match s.opt(a.model_in, "model-in")? {
        Some(p) => Some(load_checkpoint(&p)?),
        None => None,
    };
    let inventory = if let Some(m) = &model_in {
        m.inventory.clone()
    } else if let Some(spec) = s.opt(a.build_vocab, "build-vocab")? {
        let min = min_exemplars_preset(&spec).or_else(|_| {
            spec.parse().map_err(|_| {
                Error::InvalidConfig(format!(
                    "--build-vocab takes a count or a preset name, got {spec:?}"
                ))
            })
        })?;
        let transcripts: Vec<Vec<String>> = utts.iter().map(|u| u.transcript.clone()).collect();
        build_word_inventory(&transcripts, min)?
    } else {
        let path: PathBuf = s.require(a.labels, "labels")?;
        let kind = parse_kind(&s.resolve(a.label_kind, "label-kind", "ci".to_string())?)?;
        let mut inv = LabelInventory::parse(&read_text(&path)?, kind)?;
        if s.resolve(a.add_blank, "add-blank", false)? && !inv.is_ctc() {
            inv = inv.with_blank()?;
        }
        inv
    };

    let lex = match s.opt(a.lexicon, "lexicon")? {
        Some(p) => Some(Lexicon::parse(&read_text(&p)?, &inventory)?),
        None if inventory.kind() == InventoryKind::Word => {
            Some(Lexicon::parse(&toy_lexicon_text(&inventory), &inventory)?)
        }
        None => None,
    };
    let items = load_items(&utts, &inventory, lex.as_ref(), &logmel)?;

    let smbr = if criterion == Criterion::Smbr {
        let lm_path: PathBuf = s.require(a.lm, "lm")?;
        let lex = lex.as_ref().ok_or_else(|| {
            Error::InvalidConfig("smbr needs --lexicon to build its decode graph".into())
        })?;
        let lm = LanguageModel::parse(&read_text(&lm_path)?, lex)?;
        let opts = DecodeGraphOptions {
            allow_blank: inventory.is_ctc(),
            min_duration: None,
        };
        let graph = build_decode_graph(lex, &lm, &inventory, None, &opts)?;
        Some(SmbrResources { graph, decode: decode_params(&s, &a.decode)? })
    } else {
        None
    };

    let outcome = train(&cfg, &items, &inventory, model_in, smbr.as_ref())?;
    let metrics: String = outcome.metrics.iter().map(|m| m.log_line() + "\n").collect();
    write_output(a.metrics_out.as_deref(), &metrics)?;
    save_checkpoint(&out, &outcome.model)?;
    eprintln!("saved model to {}", out.display());
    if outcome.diverged {
        return Err(Error::Divergence(format!(
            "stopped after {} finite steps; the saved model is the last finite state",
            outcome.metrics.len()
        )));
    }
    Ok(())
}

/// Lexicon plus optional context tree for graph building. With a tree,
/// pronunciations are spelled in the context-independent inventory from
/// --phones while the model outputs clustered units.
fn decode_lexicon(
    s: &Settings,
    model: &ModelParams,
    lexicon: Option<PathBuf>,
    tree: Option<PathBuf>,
    phones: Option<PathBuf>,
) -> Result<(Lexicon, Option<TreeSet>)> {
    let lex_path: PathBuf = s.require(lexicon, "lexicon")?;
    match (s.opt(tree, "tree")?, s.opt(phones, "phones")?) {
        (Some(tree_path), Some(phones_path)) => {
            let ci = LabelInventory::parse(&read_text(&phones_path)?, InventoryKind::CiPhone)?;
            let lex = Lexicon::parse(&read_text(&lex_path)?, &ci)?;
            let tree = TreeSet::parse(&read_text(&tree_path)?, &ci)?;
            Ok((lex, Some(tree)))
        }
        (Some(_), None) => Err(Error::InvalidConfig(
            "--tree needs --phones for the context-independent inventory".into(),
        )),
        (None, _) => {
            let lex = Lexicon::parse(&read_text(&lex_path)?, &model.inventory)?;
            Ok((lex, None))
        }
    }
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let model = load_checkpoint(&s.require(a.model, "model")?)?;
    let logmel = logmel_config(&s, &a.logmel)?;
    let utts = read_manifest(&s.require(a.manifest, "manifest")?, false)?;
    let (lex, tree) = decode_lexicon(&s, &model, a.lexicon, a.tree, a.phones)?;
    let lm = LanguageModel::parse(&read_text(&s.require(a.lm, "lm")?)?, &lex)?;
    let min_duration = match s.opt(a.minima, "minima")? {
        Some(p) => Some(parse_minima(&read_text(&p)?, &model.inventory)?),
        None => None,
    };
    let opts = DecodeGraphOptions { allow_blank: model.inventory.is_ctc(), min_duration };
    let graph = build_decode_graph(&lex, &lm, &model.inventory, tree.as_ref(), &opts)?;
    let params = decode_params(&s, &a.decode)?;

    let mut lines = String::new();
    let mut failures = 0usize;
    for u in &utts {
        let decoded = load_features(&u.path, &logmel)
            .and_then(|feats| forward_stacked(&model, &feats))
            .and_then(|(post, _)| beam_search(&graph, &post, &params));
        match decoded {
            Ok((hyp, _)) => {
                lines.push_str(&format!("{}\t{}\t{:.6}\n", u.id, hyp.words_text(&lex), hyp.score));
            }
            Err(e) => {
                eprintln!("{}: {e}", u.id);
                lines.push_str(&format!("{}\t\tnan\n", u.id));
                failures += 1;
            }
        }
    }
    write_output(a.out.as_deref(), &lines)?;
    if failures > 0 {
        eprintln!("{failures} of {} utterances failed to decode", utts.len());
    }
    Ok(())
}

fn cmd_greedy(a: GreedyArgs) -> Result<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let model = load_checkpoint(&s.require(a.model, "model")?)?;
    let logmel = logmel_config(&s, &a.logmel)?;
    let utts = read_manifest(&s.require(a.manifest, "manifest")?, false)?;
    let mut lines = String::new();
    for u in &utts {
        let feats = load_features(&u.path, &logmel)?;
        let (post, _) = forward_stacked(&model, &feats)?;
        let labels = greedy_ctc_decode(&post, &model.inventory)?;
        let names: Vec<&str> = labels.iter().map(|&l| model.inventory.name(l)).collect();
        lines.push_str(&format!("{}\t{}\n", u.id, names.join(" ")));
    }
    write_output(a.out.as_deref(), &lines)
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let refs = read_manifest(&s.require(a.refs, "refs")?, false)?;
    let hyps_path: PathBuf = s.require(a.hyps, "hyps")?;
    let mode = match s.resolve(a.mode, "mode", "all".to_string())?.as_str() {
        "all" => ScoreMode::All,
        "exclude-oov" => ScoreMode::ExcludeOov,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown mode {other:?}; expected all or exclude-oov"
            )))
        }
    };
    let vocab: Option<HashSet<String>> = match s.opt(a.vocab, "vocab")? {
        Some(p) => Some(read_text(&p)?.split_whitespace().map(str::to_string).collect()),
        None => None,
    };

    let mut by_id: HashMap<String, Vec<String>> = HashMap::new();
    for (lineno, line) in read_text(&hyps_path)?.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or("");
        let words = fields.next().ok_or_else(|| {
            Error::Data(format!("hypothesis line {}: expected 'id TAB words'", lineno + 1))
        })?;
        let words: Vec<String> = words.split_whitespace().map(str::to_string).collect();
        if by_id.insert(id.to_string(), words).is_some() {
            return Err(Error::Data(format!(
                "hypothesis line {}: duplicate id {id:?}",
                lineno + 1
            )));
        }
    }
    let mut ref_words = Vec::with_capacity(refs.len());
    let mut hyp_words = Vec::with_capacity(refs.len());
    for r in &refs {
        let h = by_id.remove(&r.id).ok_or_else(|| {
            Error::Data(format!("no hypothesis for utterance {:?}", r.id))
        })?;
        ref_words.push(r.transcript.clone());
        hyp_words.push(h);
    }
    if !by_id.is_empty() {
        let mut extra: Vec<&String> = by_id.keys().collect();
        extra.sort();
        return Err(Error::Data(format!("hypotheses for unknown utterances: {extra:?}")));
    }
    let report = score_wer(&ref_words, &hyp_words, mode, vocab.as_ref())?;
    write_output(None, &report.summary_text())
}

fn cmd_dump(a: DumpArgs) -> Result<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let model = load_checkpoint(&s.require(a.model, "model")?)?;
    let logmel = logmel_config(&s, &a.logmel)?;
    let feats = load_features(&s.require(a.features, "features")?, &logmel)?;
    let threshold = s.resolve(a.threshold, "threshold", 0.05)?;
    let format = match s.resolve(a.format, "format", "csv".to_string())?.as_str() {
        "csv" => DumpFormat::Csv,
        "tsv" => DumpFormat::Tsv,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown format {other:?}; expected csv or tsv"
            )))
        }
    };
    let text = dump_posteriorgram(&model, &feats, threshold, format)?;
    write_output(a.out.as_deref(), &text)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let model = load_checkpoint(&s.require(a.model, "model")?)?;
    let logmel = logmel_config(&s, &a.logmel)?;
    let utts = read_manifest(&s.require(a.manifest, "manifest")?, true)?;
    let lex = Lexicon::parse(&read_text(&s.require(a.lexicon, "lexicon")?)?, &model.inventory)?;
    let lm = LanguageModel::parse(&read_text(&s.require(a.lm, "lm")?)?, &lex)?;
    let opts = DecodeGraphOptions { allow_blank: model.inventory.is_ctc(), min_duration: None };
    let graph = build_decode_graph(&lex, &lm, &model.inventory, None, &opts)?;
    let params = decode_params(&s, &a.decode)?;

    let spec = s.resolve(a.scales, "scales", "0.5,1,2,4".to_string())?;
    let scales = spec
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad blank scale {t:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;

    let (mode, vocab) = if s.resolve(a.exclude_oov, "exclude-oov", false)? {
        let vocab: HashSet<String> = lex.words().iter().cloned().collect();
        (ScoreMode::ExcludeOov, Some(vocab))
    } else {
        (ScoreMode::All, None)
    };

    let mut items = Vec::with_capacity(utts.len());
    for u in &utts {
        items.push(EvalItem {
            id: u.id.clone(),
            feats: load_features(&u.path, &logmel)?,
            words: u.transcript.clone(),
        });
    }
    let rows =
        sweep_blank_scale(&model, &items, &graph, &lex, &params, &scales, mode, vocab.as_ref())?;
    let text: String = rows.iter().map(|(s, w)| format!("{s}\t{w:.2}\n")).collect();
    write_output(a.out.as_deref(), &text)
}

fn cmd_toy(a: ToyArgs) -> Result<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let out_dir: PathBuf = s.require(a.out_dir, "out-dir")?;
    let d = ToyConfig::default();
    let cfg = ToyConfig {
        n_labels: s.resolve(a.n_labels, "n-labels", d.n_labels)?,
        n_train: s.resolve(a.n_train, "n-train", d.n_train)?,
        n_eval: s.resolve(a.n_eval, "n-eval", d.n_eval)?,
        feat_dim: s.resolve(a.feat_dim, "feat-dim", d.feat_dim)?,
        min_words: s.resolve(a.min_words, "min-words", d.min_words)?,
        max_words: s.resolve(a.max_words, "max-words", d.max_words)?,
        min_dur: s.resolve(a.min_dur, "min-dur", d.min_dur)?,
        max_dur: s.resolve(a.max_dur, "max-dur", d.max_dur)?,
        min_pad: s.resolve(a.min_pad, "min-pad", d.min_pad)?,
        max_pad: s.resolve(a.max_pad, "max-pad", d.max_pad)?,
        noise: s.resolve(a.noise, "noise", d.noise)?,
        gain: s.resolve(a.gain, "gain", d.gain)?,
        seed: s.resolve(a.common.seed, "seed", d.seed)?,
    };
    let corpus = toy_corpus(&cfg)?;
    let feat_dir = out_dir.join("feats");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(feat_dir.display().to_string(), e))?;

    let write = |name: &str, text: &str| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    };
    let manifest = |items: &[TrainItem]| -> Result<String> {
        let mut lines = String::new();
        for item in items {
            let path = feat_dir.join(format!("{}.feat", item.id));
            write_feature_file(&path, &item.feats)?;
            let words: Vec<&str> =
                item.labels.iter().map(|&l| corpus.inventory.name(l)).collect();
            lines.push_str(&format!("{}\t{}\t{}\n", item.id, path.display(), words.join(" ")));
        }
        Ok(lines)
    };

    write("train.tsv", &manifest(&corpus.train)?)?;
    write("eval.tsv", &manifest(&corpus.eval)?)?;
    write("labels.txt", &corpus.inventory.to_text())?;
    write("lexicon.txt", &toy_lexicon_text(&corpus.inventory))?;
    let words: Vec<String> = corpus
        .inventory
        .names()
        .iter()
        .enumerate()
        .filter(|&(i, _)| corpus.inventory.blank_id() != Some(i))
        .map(|(_, n)| n.clone())
        .collect();
    write("words.txt", &(words.join("\n") + "\n"))?;
    let p = -(words.len() as f64).log10();
    let lm: String = words.iter().map(|w| format!("unigram {w} {p}\n")).collect();
    write("lm.txt", &lm)?;

    eprintln!(
        "wrote {} train and {} eval utterances under {}",
        corpus.train.len(),
        corpus.eval.len(),
        out_dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_resolution_prefers_flags_over_keys_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        fs::write(&path, "# comment\nbeam = 8\nsteps=250\n").unwrap();
        let s = Settings::load(Some(&path)).unwrap();
        assert_eq!(s.resolve(Some(4.0), "beam", 16.0).unwrap(), 4.0);
        assert_eq!(s.resolve::<f64>(None, "beam", 16.0).unwrap(), 8.0);
        assert_eq!(s.resolve::<usize>(None, "missing", 7).unwrap(), 7);
        assert_eq!(s.require::<usize>(None, "steps").unwrap(), 250);
        assert!(s.require::<usize>(None, "absent").is_err());
        assert!(s.get::<usize>("beam").is_ok());
        assert!(s.get::<PathBuf>("beam").unwrap().is_some());

        fs::write(&path, "no equals sign\n").unwrap();
        assert!(Settings::load(Some(&path)).is_err());
        assert!(Settings::load(None).unwrap().0.is_empty());
    }

    #[test]
    fn minima_files_round_trip_against_an_inventory() {
        let inv = LabelInventory::from_names(
            vec!["a".into(), "b".into(), "c".into()],
            InventoryKind::CiPhone,
        )
        .unwrap();
        let minima = parse_minima("b\t4\n\n# note\nc 2\n", &inv).unwrap();
        assert_eq!(minima, vec![1, 4, 2]);
        assert!(parse_minima("d 3\n", &inv).is_err());
        assert!(parse_minima("b\n", &inv).is_err());
        assert!(parse_minima("b x\n", &inv).is_err());
    }

    #[test]
    fn transcripts_map_through_words_or_pronunciations() {
        let words = LabelInventory::from_names(
            vec!["go".into(), "stop".into()],
            InventoryKind::Word,
        )
        .unwrap();
        let ids =
            transcript_to_labels(&["stop".into(), "go".into()], &words, None).unwrap();
        assert_eq!(ids, vec![1, 0]);
        assert!(matches!(
            transcript_to_labels(&["halt".into()], &words, None),
            Err(Error::UnknownLabel(_))
        ));

        let phones = LabelInventory::from_names(
            vec!["g".into(), "o".into()],
            InventoryKind::CiPhone,
        )
        .unwrap();
        let lex = Lexicon::parse("go\tg o\n", &phones).unwrap();
        let ids = transcript_to_labels(&["go".into(), "go".into()], &phones, Some(&lex)).unwrap();
        assert_eq!(ids, vec![0, 1, 0, 1]);
        assert!(matches!(
            transcript_to_labels(&["go".into()], &phones, None),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            transcript_to_labels(&["run".into()], &phones, Some(&lex)),
            Err(Error::LexiconGap(_))
        ));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
