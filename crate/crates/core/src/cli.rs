//! Command-line front end. Exit codes: 0 success, 1 usage, 2 IO / format /
//! parse failures, 3 numeric failures.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::evaluation::{
    build_eval_cases, eval_retrieval, eval_swap_discrimination, write_margins_csv,
};
use crate::negsample::{
    all_negatives, describe_swap, sample_negative, sample_random_negative, SwapError,
};
use crate::rng::SeededRng;
use crate::textgraph::{parse_scene_graph, scene_graph_to_triples, Lexicon};
use crate::training::{
    full_loss_gradient_check, gen_synthetic, init_model, load_dataset, split_held_out,
    write_dataset, write_metrics, SamplerMode, Trainer,
};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "sgclip",
    version,
    about = "Scene-graph guided image-text matching toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse captions into scene graphs (one JSON line per caption).
    Parse(ParseArgs),
    /// Build swapped negative captions.
    Negatives(NegativesArgs),
    /// Generate the synthetic compositional dataset.
    GenData(GenDataArgs),
    /// Train a model on a JSONL dataset.
    Train(TrainArgs),
    /// Swap discrimination and retrieval on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of the full loss gradient.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's manifest.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct LexiconArg {
    /// Tab-separated `word<TAB>TAG` lines added on top of the built-in lexicon.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON run config with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        cfg.apply_overrides(self.overrides.iter().map(String::as_str))?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true))]
struct ParseArgs {
    /// JSONL file with a "caption" field per line.
    #[arg(long, group = "source")]
    input: Option<PathBuf>,
    #[arg(long, group = "source")]
    caption: Option<String>,
    #[command(flatten)]
    lexicon: LexiconArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct NegativesArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "semantic")]
    mode: SamplerMode,
    /// Emit every semantic candidate instead of one sampled negative.
    #[arg(long)]
    emit_all: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    lexicon: LexiconArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training split (or the whole dataset without --held-out-out).
    #[arg(long)]
    out: PathBuf,
    /// Where to write the last `data.held_out` samples.
    #[arg(long)]
    held_out_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    mode: Option<SamplerMode>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Put each negative caption into its image-to-text softmax denominator.
    #[arg(long)]
    neg_in_denominator: bool,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// JSON lines {step, final, hinge, itcl}.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Also save optimizer moments (needed to resume).
    #[arg(long)]
    optimizer_out: Option<PathBuf>,
    /// Continue a run from a checkpoint and its optimizer state.
    #[arg(long, requires = "resume_optimizer")]
    resume: Option<PathBuf>,
    #[arg(long)]
    resume_optimizer: Option<PathBuf>,
    #[command(flatten)]
    lexicon: LexiconArg,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Seed for choosing each case's swapped caption (overrides eval.seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-case margins as CSV.
    #[arg(long)]
    margins: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    threshold: f64,
    /// Run the check in 32-bit floats instead of 64-bit.
    #[arg(long)]
    f32: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Tensor(_) | Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_IO,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Parse(a) => cmd_parse(a, &mut out),
        Command::Negatives(a) => cmd_negatives(a, &mut out),
        Command::GenData(a) => cmd_gen_data(a, &mut out),
        Command::Train(a) => cmd_train(a, &mut out),
        Command::Eval(a) => cmd_eval(a, &mut out),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut out),
        Command::Inspect(a) => cmd_inspect(a, &mut out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_lexicon(base: Lexicon, arg: &LexiconArg) -> Result<Lexicon> {
    let mut lex = base;
    if let Some(p) = &arg.lexicon {
        let extra = Lexicon::load(p)
            .map_err(|e| Error::Data(format!("lexicon {}: {e}", p.display())))??;
        lex.merge(&extra);
    }
    Ok(lex)
}

#[derive(Deserialize)]
struct CaptionLine {
    #[serde(default)]
    id: Option<String>,
    caption: String,
}

fn read_captions(path: &Path) -> Result<Vec<CaptionLine>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Output sink: the `--out` file if given, otherwise stdout.
fn sink<'a>(path: &Option<PathBuf>, stdout: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(stdout),
    })
}

fn json_line(w: &mut dyn Write, v: &Value) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn cmd_parse(a: ParseArgs, stdout: &mut dyn Write) -> Result<i32> {
    let lex = load_lexicon(Lexicon::builtin(), &a.lexicon)?;
    let captions = match (&a.input, a.caption) {
        (Some(p), _) => read_captions(p)?,
        (None, Some(c)) => vec![CaptionLine {
            id: None,
            caption: c,
        }],
        (None, None) => unreachable!("clap requires a source"),
    };
    let to_file = a.out.is_some();
    let count = captions.len();
    {
        let mut w = sink(&a.out, stdout)?;
        for c in captions {
            let sg = parse_scene_graph(&c.caption, &lex)?;
            let triples: Vec<String> = scene_graph_to_triples(&sg)
                .iter()
                .map(ToString::to_string)
                .collect();
            let mut v = json!({"caption": c.caption, "scene_graph": sg, "triples": triples});
            if let Some(id) = c.id {
                v["id"] = Value::String(id);
            }
            json_line(&mut *w, &v)?;
        }
        w.flush()?;
    }
    if to_file {
        writeln!(stdout, "parsed {count} captions")?;
    }
    Ok(0)
}

fn cmd_negatives(a: NegativesArgs, stdout: &mut dyn Write) -> Result<i32> {
    let lex = load_lexicon(Lexicon::builtin(), &a.lexicon)?;
    let captions = read_captions(&a.input)?;
    let mut rng = SeededRng::new(a.seed);
    let to_file = a.out.is_some();
    let (mut emitted, mut missing) = (0usize, 0usize);
    {
        let mut w = sink(&a.out, stdout)?;
        for c in &captions {
            let base = |v: &mut Value| {
                if let Some(id) = &c.id {
                    v["id"] = Value::String(id.clone());
                }
            };
            let sg = parse_scene_graph(&c.caption, &lex)?;
            let negs = match a.mode {
                SamplerMode::Semantic if a.emit_all => all_negatives(&c.caption, &sg),
                SamplerMode::Semantic => {
                    sample_negative(&c.caption, &sg, &mut rng).map(|n| vec![n])
                }
                SamplerMode::Random => {
                    sample_random_negative(&c.caption, &mut rng).map(|n| vec![n])
                }
                SamplerMode::None => Ok(vec![]),
            };
            let negs = match negs {
                Ok(n) if !n.is_empty() => n,
                Ok(_) | Err(SwapError::NoSwapAvailable) => {
                    missing += 1;
                    let reason = if a.mode == SamplerMode::None {
                        "sampler mode none"
                    } else if sg.objects.len() < 2 {
                        "fewer than two objects"
                    } else {
                        "no relation or cross-object attribute pair to swap"
                    };
                    let mut v = json!({"source_caption": c.caption, "negative_caption": null, "reason": reason});
                    base(&mut v);
                    json_line(&mut *w, &v)?;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            for n in negs {
                emitted += 1;
                let mut v = serde_json::to_value(&n)?;
                v["kind"] = Value::String(n.swap.kind().to_string());
                v["description"] = Value::String(describe_swap(&sg, n.swap));
                base(&mut v);
                json_line(&mut *w, &v)?;
            }
        }
        w.flush()?;
    }
    if to_file {
        writeln!(
            stdout,
            "{emitted} negatives for {} captions ({missing} without candidates)",
            captions.len()
        )?;
    }
    Ok(0)
}

fn cmd_gen_data(a: GenDataArgs, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = a.config.load()?;
    let data = gen_synthetic(&cfg.data)?;
    let total = data.len();
    match &a.held_out_out {
        Some(h) => {
            let (train, held) = split_held_out(data, cfg.data.held_out);
            write_dataset(&a.out, &train)?;
            write_dataset(h, &held)?;
            writeln!(
                stdout,
                "wrote {} training and {} held-out samples",
                train.len(),
                held.len()
            )?;
        }
        None => {
            write_dataset(&a.out, &data)?;
            writeln!(stdout, "wrote {total} samples")?;
        }
    }
    Ok(0)
}

fn cmd_train(a: TrainArgs, stdout: &mut dyn Write) -> Result<i32> {
    let mut cfg = a.config.load()?;
    if let Some(m) = a.mode {
        cfg.train.mode = m;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if a.neg_in_denominator {
        cfg.loss.neg_in_denominator = true;
    }
    let mut trainer = match (&a.resume, &a.resume_optimizer) {
        (Some(m), Some(o)) => {
            let mut t = Trainer::resume(
                &Checkpoint::load(m)?,
                &Checkpoint::load(o)?,
                Some(cfg.train.clone()),
            )?;
            t.loss = cfg.loss.clone();
            t
        }
        _ => {
            let lex = load_lexicon(cfg.data.lexicon(), &a.lexicon)?;
            let data = load_dataset(&a.data, &lex)?;
            let model = init_model(cfg.model.clone(), &data, &lex, cfg.train.model_seed)?;
            Trainer::new(
                model,
                cfg.train.clone(),
                cfg.loss.clone(),
                cfg.optim.clone(),
            )
        }
    };
    let data = load_dataset(&a.data, &trainer.model.lexicon)?;
    let mut metrics = a
        .metrics
        .as_ref()
        .map(File::create)
        .transpose()?
        .map(BufWriter::new);
    let mut last = None;
    let mut write_err = None;
    trainer.run(&data, &mut |m| {
        last = Some(*m);
        if let Some(w) = metrics.as_mut() {
            if let Err(e) = write_metrics(w, m) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    trainer.model_checkpoint().save(&a.out_checkpoint)?;
    if let Some(p) = &a.optimizer_out {
        trainer.optimizer_checkpoint().save(p)?;
    }
    match last {
        Some(m) => writeln!(
            stdout,
            "trained {} epochs ({} steps): final {:.4} hinge {:.4} itcl {:.4}",
            trainer.epoch, m.step, m.final_loss, m.hinge, m.itcl
        )?,
        None => writeln!(
            stdout,
            "no training steps run; checkpoint holds the initial weights"
        )?,
    }
    Ok(0)
}

fn cmd_eval(a: EvalArgs, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = a.config.load()?;
    let model: Model<f32> = Model::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let data = load_dataset(&a.data, &model.lexicon)?;
    let mut rng = SeededRng::new(a.seed.unwrap_or(cfg.eval.seed));
    let cases = build_eval_cases(&data, &model.lexicon, &mut rng)?;
    let (mut report, results) = eval_swap_discrimination(&model, &cases)?;
    let ks: Vec<usize> = cfg
        .eval
        .recall_k
        .iter()
        .copied()
        .filter(|&k| k >= 1 && k <= data.len())
        .collect();
    if !ks.is_empty() {
        report.retrieval = Some(eval_retrieval(&model, &data, &ks)?);
    }
    if let Some(p) = &a.report {
        let mut w = BufWriter::new(File::create(p)?);
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    if let Some(p) = &a.margins {
        let mut w = BufWriter::new(File::create(p)?);
        write_margins_csv(&mut w, &results)?;
        w.flush()?;
    }
    writeln!(
        stdout,
        "swap accuracy {:.2}% over {} cases ({} skipped)",
        100.0 * report.accuracy(),
        report.overall.count,
        report.skipped
    )?;
    for (kind, s) in &report.per_kind {
        writeln!(
            stdout,
            "  {kind}: {:.2}% of {}, mean margin {:.4}",
            100.0 * s.accuracy,
            s.count,
            s.mean_margin
        )?;
    }
    if let Some(r) = &report.retrieval {
        for (k, tr) in &r.text_retrieval {
            writeln!(
                stdout,
                "  R@{k}: text {:.3} image {:.3}",
                tr, r.image_retrieval[k]
            )?;
        }
    }
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = a.config.load()?;
    let report = if a.f32 {
        full_loss_gradient_check::<f32>(&cfg.model, &cfg.loss, a.eps, a.samples, a.seed)?
    } else {
        full_loss_gradient_check::<f64>(&cfg.model, &cfg.loss, a.eps, a.samples, a.seed)?
    };
    let pass = report.max_relative_error < a.threshold;
    writeln!(
        stdout,
        "max_rel_err {:.3e} {} {:e} over {} samples ({})",
        report.max_relative_error,
        if pass { "<" } else { ">=" },
        a.threshold,
        report.samples,
        if a.f32 { "f32" } else { "f64" }
    )?;
    if let Some((name, idx)) = &report.worst {
        writeln!(stdout, "worst: {name}[{idx}]")?;
    }
    Ok(if pass { 0 } else { EXIT_NUMERIC })
}

fn cmd_inspect(a: InspectArgs, stdout: &mut dyn Write) -> Result<i32> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut total = 0usize;
    for e in ck.manifest() {
        let n: usize = e.shape.iter().product();
        total += n;
        writeln!(stdout, "{}\t{:?}", e.name, e.shape)?;
    }
    writeln!(stdout, "{} tensors, {total} scalars", ck.tensors.len())?;
    let mut keys: Vec<&String> = ck.meta.keys().collect();
    keys.sort();
    if !keys.is_empty() {
        writeln!(
            stdout,
            "metadata: {}",
            keys.iter()
                .map(|k| k.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )?;
    }
    Ok(0)
}
