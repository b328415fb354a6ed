use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use loresmt_core::corpus::{self, ParallelCorpus};
use loresmt_core::decode::{self, BeamConfig, DevSet, GridMetric, RescoreConfig};
use loresmt_core::eval::{self, MetricConfig};
use loresmt_core::g2p::G2PRuleSet;
use loresmt_core::model::{
    load_checkpoint, save_checkpoint, Example, ModelConfig, Preset, Stage, StageKind, TrainPlan,
    Trainer, Transformer,
};
use loresmt_core::pipeline::synth::{Family, FamilySpec};
use loresmt_core::pipeline::{compare_runs, run_experiment, ExperimentConfig, PipelineError, RunManifest};
use loresmt_core::subword::{SegmenterMode, SubwordModel};

#[derive(Parser)]
#[command(name = "loresmt", version, about = "Low-resource multilingual NMT toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus construction.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Phonemise lines from a file or stdin.
    G2p {
        #[arg(long)]
        rules: PathBuf,
        input: Option<PathBuf>,
    },
    /// Subword and character segmentation.
    #[command(subcommand)]
    Spm(SpmCmd),
    /// Train a single-stage model on one or more corpora.
    Train(TrainArgs),
    /// Beam-search translation of a file.
    Decode(DecodeArgs),
    /// Re-rank an n-best file with a character-level model.
    Rescore(RescoreArgs),
    /// Search length-normalisation exponent and beam size on a dev set.
    Gridsearch(GridArgs),
    /// Score hypotheses against references.
    Evaluate(EvalArgs),
    /// Run a configured experiment.
    Run {
        config: PathBuf,
        /// Defaults to `runs/<name>` next to the config.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Compare runs; prints a markdown table.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
        /// Also write the comparison as JSON.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render a comparison of runs.
    Report {
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
        #[arg(long)]
        baseline: Option<String>,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Write the synthetic language family.
    Fixtures {
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Json,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Prefix every source with its target-language tag.
    Tag { input: PathBuf, output: PathBuf },
    /// Concatenate tagged corpora and shuffle.
    Concat {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Oversample corpora to the size of the largest one.
    Balance {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mix a sample of backtranslated pairs into a parallel corpus.
    MixBt {
        #[arg(long)]
        parallel: PathBuf,
        #[arg(long)]
        bt: PathBuf,
        #[arg(long)]
        ratio: String,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Append a phoneme-task copy of the bitext.
    G2pVertical {
        input: PathBuf,
        #[arg(long)]
        rules: PathBuf,
        output: PathBuf,
    },
    /// Append phonemised sources to the targets.
    G2pHorizontal {
        input: PathBuf,
        #[arg(long)]
        rules: PathBuf,
        #[arg(long, default_value = corpus::DEFAULT_SEP)]
        sep: String,
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SegMode {
    Bpe,
    Char,
}

#[derive(Subcommand)]
enum SpmCmd {
    /// Train a segmenter on text files.
    Train {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "bpe")]
        mode: SegMode,
        #[arg(long, default_value_t = 8000)]
        vocab_size: usize,
        /// Reserved tag token, e.g. `<xb>`; repeatable.
        #[arg(long = "tag")]
        tags: Vec<String>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print token pieces (or ids) for each input line.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ids: bool,
        input: Option<PathBuf>,
    },
    /// Turn lines of space-separated ids back into text.
    Decode {
        #[arg(long)]
        model: PathBuf,
        input: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    segmenter: PathBuf,
    /// Corpus base path; repeatable.
    #[arg(long = "corpus", required = true)]
    corpora: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "base")]
    preset: PresetArg,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from a checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Base,
    Big,
    Bigger,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    segmenter: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 8)]
    beam: usize,
    #[arg(long, default_value_t = 1.0)]
    lenpen: f64,
    #[arg(long, default_value_t = 1)]
    nbest: usize,
    #[arg(long, default_value_t = 200)]
    max_len: usize,
    /// Write the n-best lists here as well.
    #[arg(long)]
    nbest_out: Option<PathBuf>,
    input: Option<PathBuf>,
}

#[derive(Args)]
struct RescoreArgs {
    #[arg(long)]
    nbest: PathBuf,
    /// Source sentences, one per line, matching the n-best ids.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    char_model: PathBuf,
    #[arg(long)]
    char_segmenter: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    lenpen: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Bleu,
    Chrf,
    All,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.8,1.0,1.2")]
    n_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "4,8,12")]
    b_grid: Vec<usize>,
    #[arg(long, value_enum, default_value = "bleu")]
    metric: MetricArg,
    #[arg(long, default_value_t = 200)]
    max_len: usize,
    #[arg(long)]
    strip_sep: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    metric: MetricArg,
    /// Cut hypotheses at this separator before scoring.
    #[arg(long)]
    strip_sep: Option<String>,
}

fn read_input(path: Option<&Path>) -> Result<Vec<String>> {
    match path {
        Some(p) => Ok(corpus::read_lines(p)?),
        None => io::stdin()
            .lock()
            .lines()
            .collect::<io::Result<Vec<_>>>()
            .context("reading stdin"),
    }
}

fn print_lines<S: AsRef<str>>(lines: &[S]) -> Result<()> {
    let mut out = io::stdout().lock();
    for l in lines {
        writeln!(out, "{}", l.as_ref())?;
    }
    Ok(())
}

fn read_corpus(base: &Path) -> Result<ParallelCorpus> {
    let (c, dropped) = corpus::read_corpus(base).with_context(|| format!("reading {}", base.display()))?;
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} malformed pairs", base.display());
    }
    Ok(c)
}

fn load_rules(path: &Path) -> Result<G2PRuleSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (rules, warnings) = G2PRuleSet::compile(&text)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(rules)
}

fn load_model(args: &ModelArgs) -> Result<(Transformer<f32>, SubwordModel)> {
    let model = load_checkpoint(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let seg = SubwordModel::load(&args.segmenter).with_context(|| format!("loading {}", args.segmenter.display()))?;
    if model.vocab_size() != seg.vocab().len() {
        bail!("model vocabulary {} does not match segmenter vocabulary {}", model.vocab_size(), seg.vocab().len());
    }
    Ok((model, seg))
}

fn corpus_cmd(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Tag { input, output } => {
            corpus::write_corpus(&output, &corpus::tag_corpus(&read_corpus(&input)?)?)?;
        }
        CorpusCmd::Concat { inputs, output, seed } => {
            let cs = inputs.iter().map(|p| read_corpus(p)).collect::<Result<Vec<_>>>()?;
            corpus::write_corpus(&output, &corpus::concat_multilingual(&cs, seed)?)?;
        }
        CorpusCmd::Balance { inputs, output_dir, seed } => {
            let cs = inputs.iter().map(|p| read_corpus(p)).collect::<Result<Vec<_>>>()?;
            for (c, p) in corpus::balance_oversample(&cs, seed)?.iter().zip(&inputs) {
                let name = p.file_name().context("corpus path has no file name")?;
                corpus::write_corpus(&output_dir.join(name), c)?;
            }
        }
        CorpusCmd::MixBt { parallel, bt, ratio, output, seed } => {
            let mixed = corpus::mix_backtranslation(
                &read_corpus(&parallel)?,
                &read_corpus(&bt)?,
                corpus::parse_ratio(&ratio)?,
                seed,
            )?;
            corpus::write_corpus(&output, &mixed)?;
        }
        CorpusCmd::G2pVertical { input, rules, output } => {
            let c = corpus::make_g2p_vertical(&read_corpus(&input)?, &load_rules(&rules)?)?;
            corpus::write_corpus(&output, &c)?;
        }
        CorpusCmd::G2pHorizontal { input, rules, sep, output } => {
            let c = corpus::make_g2p_horizontal(&read_corpus(&input)?, &load_rules(&rules)?, &sep)?;
            corpus::write_corpus(&output, &c)?;
        }
    }
    Ok(())
}

fn spm_cmd(cmd: SpmCmd) -> Result<()> {
    match cmd {
        SpmCmd::Train { inputs, mode, vocab_size, tags, output } => {
            let mut lines = Vec::new();
            for p in &inputs {
                lines.extend(corpus::read_lines(p)?);
            }
            let mode = match mode {
                SegMode::Bpe => SegmenterMode::Bpe { vocab_size },
                SegMode::Char => SegmenterMode::Char,
            };
            let model = SubwordModel::train(lines.iter().map(String::as_str), mode, &tags)?;
            model.save(&output)?;
            eprintln!("vocabulary: {} tokens", model.vocab().len());
        }
        SpmCmd::Encode { model, ids, input } => {
            let model = SubwordModel::load(&model)?;
            let out: Vec<String> = read_input(input.as_deref())?
                .iter()
                .map(|l| {
                    if ids {
                        model.encode(l).iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
                    } else {
                        model.encode_pieces(l).join(" ")
                    }
                })
                .collect();
            print_lines(&out)?;
        }
        SpmCmd::Decode { model, input } => {
            let model = SubwordModel::load(&model)?;
            let mut out = Vec::new();
            for (i, l) in read_input(input.as_deref())?.iter().enumerate() {
                let ids = l
                    .split_whitespace()
                    .map(str::parse::<u32>)
                    .collect::<Result<Vec<_>, _>>()
                    .with_context(|| format!("line {}: expected token ids", i + 1))?;
                out.push(model.decode(&ids)?);
            }
            print_lines(&out)?;
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let seg = SubwordModel::load(&a.segmenter)?;
    let mut data = Vec::new();
    for base in &a.corpora {
        for p in read_corpus(base)?.pairs {
            data.push(Example {
                src: seg.encode(&p.source),
                tgt: seg.encode(&p.target),
            });
        }
    }
    let model = match &a.init {
        Some(path) => load_checkpoint(path)?,
        None => {
            let preset = match a.preset {
                PresetArg::Base => Preset::Base,
                PresetArg::Big => Preset::Big,
                PresetArg::Bigger => Preset::Bigger,
            };
            Transformer::new(ModelConfig::preset(preset, seg.vocab().len(), a.seed))?
        }
    };
    let kind = if a.init.is_some() {
        StageKind::Finetune
    } else {
        StageKind::Pretrain
    };
    let mut stage = Stage::new("train", kind, data, a.steps);
    stage.batch_size = a.batch_size;
    stage.lr = a.lr;
    stage.schedule = loresmt_core::model::LrSchedule::InverseSqrt { warmup: a.warmup };
    let plan = TrainPlan {
        stages: vec![stage],
        adam: Default::default(),
        seed: a.seed,
    };
    let outcome = Trainer::new().train(model, &plan)?;
    for e in outcome.log() {
        eprintln!("{}", e.to_json_line());
    }
    save_checkpoint(&a.output, &outcome.model)?;
    Ok(())
}

fn decode_cmd(a: DecodeArgs) -> Result<()> {
    let (model, seg) = load_model(&a.model)?;
    let cfg = BeamConfig {
        beam_size: a.beam,
        length_norm: a.lenpen,
        max_len: a.max_len,
        nbest: a.nbest,
    };
    cfg.validate()?;
    let mut lists = Vec::new();
    let mut best = Vec::new();
    for (i, line) in read_input(a.input.as_deref())?.iter().enumerate() {
        let mut list = decode::translate(&model, &seg, &seg, line, &cfg)?;
        list.source_id = i;
        best.push(list.best().and_then(|h| h.text.clone()).unwrap_or_default());
        lists.push(list);
    }
    print_lines(&best)?;
    if let Some(p) = a.nbest_out {
        decode::write_nbest(&p, &lists)?;
    }
    Ok(())
}

fn rescore_cmd(a: RescoreArgs) -> Result<()> {
    let lists = decode::read_nbest(&a.nbest)?;
    let sources = corpus::read_lines(&a.source)?;
    let model = load_checkpoint(&a.char_model)?;
    let seg = SubwordModel::load(&a.char_segmenter)?;
    let cfg = RescoreConfig {
        lambda: a.lambda,
        length_norm: a.lenpen,
    };
    let mut out = Vec::with_capacity(lists.len());
    for l in &lists {
        let src = sources
            .get(l.source_id)
            .with_context(|| format!("no source line for n-best id {}", l.source_id))?;
        out.push(decode::rescore(l, src, &model, &seg, &cfg)?);
    }
    match a.output {
        Some(p) => decode::write_nbest(&p, &out)?,
        None => print!("{}", decode::format_nbest(&out)),
    }
    Ok(())
}

fn grid_cmd(a: GridArgs) -> Result<()> {
    let (model, seg) = load_model(&a.model)?;
    let sources = corpus::read_lines(&a.source)?;
    let references = corpus::read_lines(&a.reference)?;
    let metric = match a.metric {
        MetricArg::Bleu | MetricArg::All => GridMetric::Bleu,
        MetricArg::Chrf => GridMetric::Chrf,
    };
    let dev = DevSet {
        sources: &sources,
        references: &references,
        strip_sep: a.strip_sep.as_deref(),
    };
    let r = decode::grid_search(&model, &seg, &seg, &dev, &a.n_grid, &a.b_grid, a.max_len, metric)?;
    for c in &r.table {
        println!("n={} b={} score={}", c.length_norm, c.beam_size, c.score);
    }
    println!("best: n={} b={} score={}", r.length_norm, r.beam_size, r.score);
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let hyps = corpus::read_lines(&a.hyp)?;
    let refs = corpus::read_lines(&a.reference)?;
    let hyps: Vec<&str> = hyps
        .iter()
        .map(|h| match &a.strip_sep {
            Some(sep) => corpus::strip_phoneme_suffix(h, sep),
            None => h.as_str(),
        })
        .collect();
    let cfg = MetricConfig::default();
    let report = match a.metric {
        MetricArg::Bleu => eval::bleu(&hyps, &refs, &cfg.bleu)?,
        MetricArg::Chrf => eval::chrf(&hyps, &refs, &cfg.chrf)?,
        MetricArg::All => eval::evaluate(&hyps, &refs, &cfg)?,
    };
    println!("{}", report.summary());
    Ok(())
}

fn load_runs(runs: &[PathBuf]) -> Result<Vec<RunManifest>> {
    runs.iter()
        .map(|p| {
            let m = RunManifest::load(p)?;
            if !m.verify() {
                log::warn!("{}: manifest content hash does not match", p.display());
            }
            Ok(m)
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus(c) => corpus_cmd(c),
        Command::G2p { rules, input } => {
            let rules = load_rules(&rules)?;
            let out: Vec<String> = read_input(input.as_deref())?.iter().map(|l| rules.phonemize(l)).collect();
            print_lines(&out)
        }
        Command::Spm(c) => spm_cmd(c),
        Command::Train(a) => train_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Rescore(a) => rescore_cmd(a),
        Command::Gridsearch(a) => grid_cmd(a),
        Command::Evaluate(a) => eval_cmd(a),
        Command::Run { config, run_dir } => {
            let loaded = ExperimentConfig::load(&config)?;
            let dir = run_dir.unwrap_or_else(|| loaded.base_dir.join("runs").join(&loaded.config.name));
            let manifest = run_experiment(&loaded, &dir)?;
            for (direction, m) in &manifest.metrics {
                let s = m.final_scores();
                println!(
                    "{direction}: BLEU {:.1} chrF2 {:.3} exact {:.3}",
                    s.bleu, s.chrf, s.exact_match
                );
            }
            println!("manifest {} ({})", dir.join("manifest.json").display(), manifest.content_hash);
            Ok(())
        }
        Command::Compare { runs, baseline, output } => {
            let cmp = compare_runs(&load_runs(&runs)?, baseline.as_deref())?;
            print!("{}", cmp.to_markdown());
            if let Some(p) = output {
                fs::write(&p, cmp.to_json()).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        }
        Command::Report { format, baseline, runs } => {
            let cmp = compare_runs(&load_runs(&runs)?, baseline.as_deref())?;
            match format {
                Format::Md => print!("{}", cmp.to_markdown()),
                Format::Json => println!("{}", cmp.to_json()),
            }
            Ok(())
        }
        Command::Fixtures { out, seed } => {
            let written = Family::new(FamilySpec {
                seed,
                ..FamilySpec::default()
            })
            .write(&out)?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(2, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
