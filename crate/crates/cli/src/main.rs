// SPDX-License-Identifier: MIT OR Apache-2.0

//! `geopatch` command-line tool.

use std::fmt::Display;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geopatch_core::corpus::{distance_phrases, filter_places, parse_geonames, Corpus};
use geopatch_core::model::{load_weights, ModelConfig, NameMap};
use geopatch_core::runner::{read_matrix, render_heatmap, write_matrix, Experiment, HeatmapOptions};
use geopatch_core::toy::write_toy_files;
use geopatch_core::{ErrorKind, ExperimentConfig, HookSite, KlOrder, Vocab};

#[derive(Parser)]
#[command(name = "geopatch", version, about = "Activation patching on relative-distance prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build prompt corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Run a patching experiment and write the effect matrix.
    Run(RunArgs),
    /// Render a heatmap from a results JSON file.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    /// Inspect or generate model files.
    #[command(subcommand)]
    Model(ModelCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Filter a GeoNames dump and expand every placename into 20 prompt pairs.
    Build {
        #[arg(long)]
        geonames: PathBuf,
        #[arg(long, default_value = "GB")]
        country: String,
        /// Populations must be strictly greater than this.
        #[arg(long, default_value_t = 50_000)]
        min_pop: u64,
        #[arg(long, default_value_t = 'P')]
        feature_class: char,
        #[arg(long)]
        out: PathBuf,
        /// Check that every pair tokenizes and aligns with this tokenizer.
        #[arg(long, requires = "merges")]
        vocab: Option<PathBuf>,
        #[arg(long, requires = "vocab")]
        merges: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Print the architecture and parameter count.
    Info {
        #[arg(long)]
        config: PathBuf,
        /// Also load and shape-check this archive.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        name_map: Option<PathBuf>,
    },
    /// Write a small random model plus matching tokenizer files.
    Toy {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Every flag overrides the matching field of `--config`.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    name_map: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    merges: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    site: Option<HookSite>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    kl_order: Option<KlOrder>,
    #[arg(long, env = "GEOPATCH_WORKERS")]
    workers: Option<usize>,
    #[arg(long)]
    limit_placenames: Option<usize>,
    /// Results JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-record CSV.
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

/// A failure reported as a single `error kind=... msg="..."` line.
struct Failure {
    kind: &'static str,
    msg: String,
}

impl<E: ErrorKind + Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            kind: e.kind(),
            msg: e.to_string(),
        }
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure {
        kind: "InvalidConfig",
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure {
        kind: "Io",
        msg: format!("{}: {e}", path.display()),
    })
}

fn read_string(path: &Path) -> Result<String, Failure> {
    String::from_utf8(read(path)?).map_err(|e| Failure {
        kind: "Io",
        msg: format!("{}: {e}", path.display()),
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure {
        kind: "Io",
        msg: format!("{}: {e}", path.display()),
    })
}

fn load_vocab(vocab: &Path, merges: &Path) -> Result<Vocab, Failure> {
    Ok(Vocab::load(read(vocab)?.as_slice(), read(merges)?.as_slice())?)
}

fn corpus_build(
    geonames: &Path,
    country: &str,
    min_pop: u64,
    feature_class: char,
    out: &Path,
    tokenizer: Option<(&Path, &Path)>,
) -> Result<(), Failure> {
    let parsed = parse_geonames(BufReader::new(read(geonames)?.as_slice()))?;
    let names = filter_places(&parsed.records, country, min_pop, feature_class);
    let corpus = Corpus::from_templates(names, distance_phrases());
    if let Some((vocab, merges)) = tokenizer {
        corpus.tokenize(&load_vocab(vocab, merges)?)?;
    }
    write(out, corpus.to_json().as_bytes())?;
    eprintln!(
        "{} placenames x {} phrases = {} pairs ({} lines rejected)",
        corpus.placenames.len(),
        corpus.phrases.len(),
        corpus.pairs.len(),
        parsed.rejects.len()
    );
    Ok(())
}

fn merge_run_config(args: RunArgs) -> Result<ExperimentConfig, Failure> {
    let base: Option<ExperimentConfig> = match &args.config {
        Some(p) => Some(ExperimentConfig::from_json(&read_string(p)?)?),
        None => None,
    };
    let required = |flag: Option<PathBuf>, from_file: Option<&PathBuf>, name: &str| {
        flag.or_else(|| from_file.cloned())
            .ok_or_else(|| config_error(format!("missing --{name} (or a --config that sets it)")))
    };
    let b = base.as_ref();
    let mut cfg = ExperimentConfig {
        weights: required(args.weights, b.map(|c| &c.weights), "weights")?,
        model_config: required(args.model_config, b.map(|c| &c.model_config), "model-config")?,
        name_map: args.name_map.or_else(|| b.and_then(|c| c.name_map.clone())),
        vocab: required(args.vocab, b.map(|c| &c.vocab), "vocab")?,
        merges: required(args.merges, b.map(|c| &c.merges), "merges")?,
        corpus: required(args.corpus, b.map(|c| &c.corpus), "corpus")?,
        site: HookSite::MlpOut,
        window_width: 5,
        kl_order: KlOrder::default(),
        workers: 1,
        limit_placenames: args.limit_placenames.or_else(|| b.and_then(|c| c.limit_placenames)),
        out_json: required(args.out, b.map(|c| &c.out_json), "out")?,
        out_csv: args.raw.or_else(|| b.and_then(|c| c.out_csv.clone())),
        out_svg: args.svg.or_else(|| b.and_then(|c| c.out_svg.clone())),
    };
    if let Some(b) = b {
        cfg.site = b.site;
        cfg.window_width = b.window_width;
        cfg.kl_order = b.kl_order;
        cfg.workers = b.workers;
    }
    cfg.site = args.site.unwrap_or(cfg.site);
    cfg.window_width = args.window.unwrap_or(cfg.window_width);
    cfg.kl_order = args.kl_order.unwrap_or(cfg.kl_order);
    cfg.workers = args.workers.unwrap_or(cfg.workers);
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = merge_run_config(args)?;
    let exp = Experiment::load(&cfg)?;
    let out = exp.run(cfg.options())?;
    write_matrix(&out.matrix, &cfg.out_json, cfg.out_csv.as_deref())?;
    if let Some(svg) = &cfg.out_svg {
        render_heatmap(&out.matrix, svg, &HeatmapOptions::default())?;
    }
    let (d, o, w) = out.matrix.shape();
    eprintln!(
        "{} pairs, {} forward passes, matrix [{d}][{o}][{w}] -> {}",
        exp.pairs.len(),
        out.forward_passes,
        cfg.out_json.display()
    );
    Ok(())
}

fn render(input: &Path, out: &Path, title: Option<String>) -> Result<(), Failure> {
    let matrix = read_matrix(input)?;
    let mut opts = HeatmapOptions::default();
    if title.is_some() {
        opts.title = title;
    }
    render_heatmap(&matrix, out, &opts)?;
    Ok(())
}

fn model_info(config: &Path, weights: Option<&Path>, name_map: Option<&Path>) -> Result<(), Failure> {
    let cfg = ModelConfig::from_json(&read_string(config)?)?;
    let declared: usize = cfg.required_tensors().iter().map(|(_, [r, c])| r * c).sum();
    println!("layers      {}", cfg.n_layers);
    println!("d_model     {}", cfg.d_model);
    println!("heads       {} x {}", cfg.n_heads, cfg.d_head);
    println!("d_mlp       {}", cfg.d_mlp);
    println!("vocab       {}", cfg.vocab_size);
    println!("max_seq     {}", cfg.max_seq);
    println!("parameters  {declared}");
    if let Some(w) = weights {
        let map: Option<NameMap> = match name_map {
            Some(p) => Some(
                serde_json::from_str(&read_string(p)?)
                    .map_err(|e| config_error(format!("{}: {e}", p.display())))?,
            ),
            None => None,
        };
        let params = load_weights(&read(w)?, &cfg, map.as_ref())?;
        println!("archive     ok, {} tensors", params.len());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Corpus(CorpusCmd::Build {
            geonames,
            country,
            min_pop,
            feature_class,
            out,
            vocab,
            merges,
        }) => corpus_build(
            &geonames,
            &country,
            min_pop,
            feature_class,
            &out,
            vocab.as_deref().zip(merges.as_deref()),
        ),
        Command::Run(args) => run(args),
        Command::Render { input, out, title } => render(&input, &out, title),
        Command::Model(ModelCmd::Info {
            config,
            weights,
            name_map,
        }) => model_info(&config, weights.as_deref(), name_map.as_deref()),
        Command::Model(ModelCmd::Toy {
            out_dir,
            layers,
            d_model,
            seed,
        }) => {
            let files = write_toy_files(&out_dir, layers, d_model, seed)?;
            eprintln!("wrote {}", files.weights.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={} msg={:?}", f.kind, f.msg);
            ExitCode::FAILURE
        }
    }
}
