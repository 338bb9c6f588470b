//! Command implementations behind the `sentwhite` binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sentwhite::ablation::{
    self, required_layers, run_grid, run_sweep, shared_num_layers, two_layer_heatmap, whitening_delta_report,
    AblationError, GridOptions, GridResult, GridSpec, LayerCache, LayerSets, PreparedDataset,
};
use sentwhite::evaluation::{
    evaluate_sts, format_x100, load_pairs, threshold_accuracy, write_results_csv, EvalError, GoldScale, PairFormat,
    PairSet,
};
use sentwhite::pipeline::{
    parse_layer_list, pool_and_combine, whiten, FitCorpus, PipelineConfig, PipelineError, Pooling,
};
use sentwhite::store::sidecar::SentenceSidecar;
use sentwhite::store::{HiddenStateReader, RecordKind, StoreError};
use sentwhite::synthetic::{generate, FixtureSpec};
use thiserror::Error;

pub use manifest::{DatasetFiles, RunManifest};

pub const THREADS_ENV: &str = "SENTWHITE_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::LayerOutOfRange { .. } | PipelineError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            PipelineError::Store(e) => e.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<AblationError> for CliError {
    fn from(e: AblationError) -> Self {
        match e {
            AblationError::SpecParse { .. } | AblationError::InvalidSpec(_) | AblationError::MissingDataset(_) => {
                CliError::Usage(e.to_string())
            }
            AblationError::Pipeline(p) => p.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "sentwhite", version, about = "Sentence embeddings from transformer hidden states")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the header of a WHB1 file and validate every record.
    Inspect { file: PathBuf },
    /// Embed one dataset with one configuration and report Spearman's rho x 100.
    Eval(EvalArgs),
    /// Binary classification accuracy with a cosine threshold.
    Classify {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Run a configuration grid and write grid, heatmap, sweep and delta CSVs.
    Grid {
        /// Grid spec (key = value lines).
        spec: PathBuf,
        /// Data manifest: `name = hidden.whb, pairs.tsv` lines.
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the deduplicated sentence table of a pairs file, one per line, line index = sentence id.
    Sentences {
        pairs: PathBuf,
        /// Also write a JSON id -> text sidecar.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Write seeded synthetic datasets with a data manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TokenArg {
    Cls,
    Avg,
}

impl From<TokenArg> for Pooling {
    fn from(t: TokenArg) -> Self {
        match t {
            TokenArg::Cls => Pooling::Cls,
            TokenArg::Avg => Pooling::Avg,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// WHB1 hidden-state file.
    pub hidden_states: PathBuf,
    /// Pairs TSV: gold<TAB>sentence_a<TAB>sentence_b.
    pub pairs: PathBuf,
    #[arg(long, value_enum)]
    pub token: TokenArg,
    /// Layer indices, e.g. `1,12` or `L1+L12`.
    #[arg(long)]
    pub layers: String,
    #[arg(long)]
    pub whiten: bool,
    #[arg(long, default_value_t = sentwhite::DEFAULT_EIGEN_FLOOR)]
    pub eigen_floor: f64,
    /// Fit whitening on this WHB1 file instead of the evaluated sentences.
    #[arg(long)]
    pub fit_corpus: Option<PathBuf>,
    /// Dataset name in the output (defaults to the pairs file stem).
    #[arg(long)]
    pub name: Option<String>,
    /// Where to write the run manifest.
    #[arg(long, default_value = "sentwhite-run.json")]
    pub manifest: PathBuf,
    /// Persist the fitted whitening transform.
    #[arg(long)]
    pub save_transform: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of datasets to generate.
    #[arg(long, default_value_t = 2)]
    pub datasets: usize,
    #[arg(long, default_value_t = 120)]
    pub sentences: usize,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    /// Hidden-state layers including layer 0.
    #[arg(long, default_value_t = 13)]
    pub num_layers: u32,
    #[arg(long, default_value_t = 16)]
    pub dim: u32,
    #[arg(long)]
    pub pooled: bool,
    #[arg(long, value_enum, default_value = "avg")]
    pub gold_token: TokenArg,
    #[arg(long, default_value_t = 1)]
    pub gold_layer: usize,
    #[arg(long, default_value_t = 2021)]
    pub seed: u64,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // a second initialization (tests calling run twice) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Inspect { file } => cmd_inspect(&file, out),
        Command::Eval(args) => cmd_eval(&args, out),
        Command::Classify { eval, threshold } => cmd_classify(&eval, threshold, out),
        Command::Grid { spec, data, out_dir } => cmd_grid(&spec, &data, &out_dir, cli.threads),
        Command::Sentences { pairs, sidecar } => cmd_sentences(&pairs, sidecar.as_deref(), out),
        Command::Synth(args) => cmd_synth(&args, out),
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Data(format!("cannot write output: {e}")))
}

pub fn cmd_inspect(file: &Path, out: &mut dyn Write) -> Result<()> {
    if file.as_os_str().is_empty() {
        return Err(CliError::Data("empty path".into()));
    }
    let reader = HiddenStateReader::open(file).map_err(|e| match e {
        StoreError::Io(io) => CliError::Data(format!("{}: {io}", file.display())),
        other => other.into(),
    })?;
    let header = *reader.header();
    let mut records = 0u64;
    let mut min_tokens = u32::MAX;
    let mut max_tokens = 0u32;
    for record in reader {
        let record = record?;
        records += 1;
        min_tokens = min_tokens.min(record.token_count());
        max_tokens = max_tokens.max(record.token_count());
    }
    let mut text = format!(
        "file: {}\nformat: WHB1 v{}\nkind: {}\nnum_layers: {}\nhidden_dim: {}\nnum_sentences: {}\nrecords: {records} (all valid)\n",
        file.display(),
        header.version,
        header.kind,
        header.num_layers,
        header.hidden_dim,
        header.num_sentences,
    );
    if records > 0 {
        text.push_str(&format!("token_count: {min_tokens}..={max_tokens}\n"));
    }
    write_out(out, &text)
}

fn read_pairs(path: &Path, scale: GoldScale) -> Result<PairSet> {
    let file = File::open(path).map_err(io_err(path))?;
    load_pairs(BufReader::new(file), PairFormat::Tsv, scale)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn dataset_name(args: &EvalArgs) -> String {
    args.name.clone().unwrap_or_else(|| {
        args.pairs
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    })
}

/// Validates flags, embeds the dataset and returns it with the config used.
fn embed_for(args: &EvalArgs) -> Result<(PipelineConfig, sentwhite::EmbeddingMatrix)> {
    let layers = parse_layer_list(&args.layers)?;
    let config = PipelineConfig::new(args.token.into(), layers, args.whiten)?;
    if args.fit_corpus.is_some() && !args.whiten {
        return Err(CliError::Usage("--fit-corpus requires --whiten".into()));
    }
    if !(args.eigen_floor.is_finite() && args.eigen_floor > 0.0) {
        return Err(CliError::Usage("--eigen-floor must be positive".into()));
    }
    let reader = HiddenStateReader::open(&args.hidden_states).map_err(|e| match e {
        StoreError::Io(io) => CliError::Data(format!("{}: {io}", args.hidden_states.display())),
        other => other.into(),
    })?;
    let header = *reader.header();
    config.validate_for(header.num_layers)?;

    let corpus = match &args.fit_corpus {
        Some(path) => {
            let corpus_reader = HiddenStateReader::open(path)?;
            let corpus_header = *corpus_reader.header();
            if corpus_header.hidden_dim != header.hidden_dim {
                return Err(CliError::Usage(format!(
                    "fit corpus has dimension {}, evaluated file has {}",
                    corpus_header.hidden_dim, header.hidden_dim
                )));
            }
            config.validate_for(corpus_header.num_layers)?;
            Some(pool_and_combine(corpus_reader, &corpus_header, &config)?)
        }
        None => None,
    };
    let pooled = pool_and_combine(reader, &header, &config)?;
    let embedded = if config.whitening {
        let fit = corpus.as_ref().map_or(FitCorpus::Transductive, FitCorpus::External);
        let (white, transform) = whiten(&pooled, fit, args.eigen_floor)?;
        if let Some(path) = &args.save_transform {
            transform.save(path).map_err(io_err(path))?;
        }
        white
    } else {
        pooled
    };
    Ok((config, embedded))
}

fn eval_manifest(args: &EvalArgs, config: &PipelineConfig, command: &str) -> RunManifest {
    let mut m = RunManifest::new(command);
    m.config = Some(config.clone());
    m.datasets.insert(
        dataset_name(args),
        DatasetFiles {
            hidden_states: args.hidden_states.clone(),
            pairs: args.pairs.clone(),
        },
    );
    m.eigen_floor = args.eigen_floor;
    m.fit_corpus = match &args.fit_corpus {
        Some(p) => p.display().to_string(),
        None => "transductive".into(),
    };
    m.outputs.push("stdout".into());
    if let Some(p) = &args.save_transform {
        m.outputs.push(p.display().to_string());
    }
    m
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let pairs = read_pairs(&args.pairs, GoldScale::Graded)?;
    let (config, embedded) = embed_for(args)?;
    let result = evaluate_sts(&embedded, &pairs.pairs, &dataset_name(args))?;
    let mut csv = Vec::new();
    write_results_csv(&mut csv, std::slice::from_ref(&result)).expect("writing to memory");
    eval_manifest(args, &config, "eval").write(&args.manifest)?;
    write_out(out, &String::from_utf8(csv).expect("csv is utf-8"))
}

pub fn cmd_classify(args: &EvalArgs, threshold: f64, out: &mut dyn Write) -> Result<()> {
    if !threshold.is_finite() {
        return Err(CliError::Usage("--threshold must be finite".into()));
    }
    let pairs = read_pairs(&args.pairs, GoldScale::Binary)?;
    let (config, embedded) = embed_for(args)?;
    let accuracy = threshold_accuracy(&embedded, &pairs.pairs, threshold)?;
    let mut manifest = eval_manifest(args, &config, "classify");
    manifest.threshold = Some(threshold);
    manifest.write(&args.manifest)?;
    write_out(
        out,
        &format!(
            "dataset,n_pairs,threshold,accuracy_x100\n{},{},{threshold},{}\n",
            dataset_name(args),
            pairs.pairs.len(),
            format_x100(accuracy)
        ),
    )
}

/// Parses `name = hidden.whb, pairs.tsv` lines; relative paths resolve against `base`.
pub fn parse_data_manifest(text: &str, base: &Path) -> Result<BTreeMap<String, DatasetFiles>> {
    let mut out = BTreeMap::new();
    for (index, raw) in text.lines().enumerate() {
        let line_no = index + 1;
        let err = |reason: &str| CliError::Usage(format!("data manifest line {line_no}: {reason}"));
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (name, files) = line.split_once('=').ok_or_else(|| err("expected name = hidden, pairs"))?;
        let files: Vec<&str> = files.split(',').map(str::trim).collect();
        let [hidden, pairs] = files.as_slice() else {
            return Err(err("expected exactly two paths"));
        };
        let name = name.trim();
        if name.is_empty() || hidden.is_empty() || pairs.is_empty() {
            return Err(err("empty name or path"));
        }
        let entry = DatasetFiles {
            hidden_states: base.join(hidden),
            pairs: base.join(pairs),
        };
        if out.insert(name.to_string(), entry).is_some() {
            return Err(err(&format!("dataset {name:?} listed twice")));
        }
    }
    Ok(out)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn flag(w: bool) -> &'static str {
    if w {
        "T"
    } else {
        "F"
    }
}

pub fn cmd_grid(spec_path: &Path, data_path: &Path, out_dir: &Path, threads: Option<usize>) -> Result<()> {
    let spec_text = fs::read_to_string(spec_path).map_err(io_err(spec_path))?;
    let mut spec = GridSpec::parse(&spec_text)?;
    let data_text = fs::read_to_string(data_path).map_err(io_err(data_path))?;
    let files = parse_data_manifest(&data_text, data_path.parent().unwrap_or(Path::new(".")))?;
    if spec.datasets.is_empty() {
        spec.datasets = files.keys().cloned().collect();
    }
    if spec.pooling_modes.is_empty() || spec.layer_sets.is_empty() || spec.whitening_flags.is_empty() || spec.datasets.is_empty() {
        return Err(CliError::Usage("grid spec: the configuration product is empty".into()));
    }
    for name in &spec.datasets {
        if !files.contains_key(name) {
            return Err(CliError::Usage(format!("dataset {name:?} is not in the data manifest")));
        }
    }

    // headers first, so layer errors surface before anything is loaded
    let mut headers = BTreeMap::new();
    for name in &spec.datasets {
        let reader = HiddenStateReader::open(&files[name].hidden_states)
            .map_err(|e| CliError::Data(format!("{}: {e}", files[name].hidden_states.display())))?;
        headers.insert(name.clone(), *reader.header());
    }
    let num_layers = headers.values().next().unwrap().num_layers;
    if let Some((name, h)) = headers.iter().find(|(_, h)| h.num_layers != num_layers) {
        return Err(CliError::Data(format!(
            "dataset {name} has {} layers, expected {num_layers}",
            h.num_layers
        )));
    }
    let layers = required_layers(&spec, num_layers)?;

    let mut prepared = BTreeMap::new();
    for name in &spec.datasets {
        let f = &files[name];
        let pairs = read_pairs(&f.pairs, GoldScale::Graded)?;
        let cache = LayerCache::open(&f.hidden_states, &spec.pooling_modes, &layers)
            .map_err(|e| CliError::Data(format!("{}: {e}", f.hidden_states.display())))?;
        prepared.insert(
            name.clone(),
            PreparedDataset {
                name: name.clone(),
                cache,
                pairs: pairs.pairs,
            },
        );
    }
    shared_num_layers(&spec, &prepared)?;

    let results = run_grid(&spec, &prepared)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut outputs = Vec::new();
    let mut emit = |name: String, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> Result<()> {
        write_file(&out_dir.join(&name), f)?;
        outputs.push(name);
        Ok(())
    };
    emit("grid.csv".into(), &|w| ablation::write_grid_csv(w, &results))?;

    let combos: Vec<(Pooling, bool)> = results
        .iter()
        .map(|r| (r.config.pooling, r.config.whitening))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Some(LayerSets::AllPairs(range)) = spec.layer_sets.iter().find(|s| matches!(s, LayerSets::AllPairs(_))) {
        let range = range.clone().unwrap_or(1..=num_layers as usize - 1);
        let cells: Vec<Vec<usize>> = LayerSets::AllPairs(Some(range.clone())).resolve(num_layers)?;
        for &(pooling, whitening) in &combos {
            let subset: Vec<GridResult> = results
                .iter()
                .filter(|r| {
                    r.config.pooling == pooling
                        && r.config.whitening == whitening
                        && cells.iter().any(|c| c.as_slice() == r.config.layers())
                })
                .cloned()
                .collect();
            let matrix = two_layer_heatmap(&subset, range.clone())?;
            let range = range.clone();
            emit(format!("heatmap_{pooling}_{}.csv", flag(whitening)), &move |w| {
                ablation::write_heatmap_csv(w, &matrix, range.clone())
            })?;
        }
    }

    if spec.whitening_flags.contains(&true) && spec.whitening_flags.contains(&false) {
        let rows = whitening_delta_report(&results)?;
        emit("whitening_delta.csv".into(), &|w| ablation::write_delta_csv(w, &rows))?;
    }

    if let Some(sweep) = &spec.sweep {
        let options = GridOptions {
            eigen_floor: spec.eigen_floor,
            fit: spec.fit,
        };
        for &(pooling, whitening) in &combos {
            let rows = run_sweep(sweep, pooling, whitening, &spec.datasets, &prepared, options)?;
            emit(format!("sweep_{pooling}_{}.csv", flag(whitening)), &|w| {
                ablation::write_sweep_csv(w, &rows)
            })?;
        }
    }

    let mut manifest = RunManifest::new("grid");
    manifest.grid_spec = Some(spec_path.display().to_string());
    manifest.grid_spec_text = Some(spec_text);
    manifest.datasets = spec.datasets.iter().map(|n| (n.clone(), files[n].clone())).collect();
    manifest.eigen_floor = spec.eigen_floor;
    manifest.fit_corpus = match spec.fit {
        ablation::FitScope::PerDataset => "per-dataset".into(),
        ablation::FitScope::Pooled => "pooled".into(),
    };
    manifest.threads = threads;
    manifest.outputs = outputs;
    manifest.write(&out_dir.join("manifest.json"))
}

pub fn cmd_sentences(pairs: &Path, sidecar: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let set = read_pairs(pairs, GoldScale::Graded)?;
    if let Some(path) = sidecar {
        SentenceSidecar::from_table(&set.sentences).write(path).map_err(io_err(path))?;
    }
    let mut text = String::new();
    for s in &set.sentences {
        text.push_str(s);
        text.push('\n');
    }
    write_out(out, &text)
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    if args.datasets == 0 || args.sentences < 2 || args.pairs < args.sentences.div_ceil(2) {
        return Err(CliError::Usage(
            "need at least one dataset, two sentences, and enough pairs to cover every sentence".into(),
        ));
    }
    if args.num_layers < 2 || args.dim == 0 {
        return Err(CliError::Usage("need at least 2 layers and dimension 1".into()));
    }
    if args.gold_layer >= args.num_layers as usize {
        return Err(CliError::Usage(format!(
            "layer out of range: --gold-layer {} with {} layers",
            args.gold_layer, args.num_layers
        )));
    }
    fs::create_dir_all(&args.out_dir).map_err(io_err(&args.out_dir))?;
    let mut manifest = String::from("# name = hidden states, pairs\n");
    for i in 0..args.datasets {
        let name = format!("synth{}", i + 1);
        let spec = FixtureSpec {
            num_sentences: args.sentences,
            num_pairs: args.pairs,
            num_layers: args.num_layers,
            hidden_dim: args.dim,
            kind: if args.pooled { RecordKind::Pooled } else { RecordKind::Tokens },
            gold_from: (args.gold_token.into(), args.gold_layer),
            seed: args.seed.wrapping_add(i as u64),
            ..FixtureSpec::default()
        };
        generate(&spec)?.write(&args.out_dir, &name)?;
        manifest.push_str(&format!("{name} = {name}.whb, {name}.tsv\n"));
    }
    let path = args.out_dir.join("data.txt");
    fs::write(&path, manifest).map_err(io_err(&path))?;
    write_out(out, &format!("wrote {} datasets to {}\n", args.datasets, args.out_dir.display()))
}
