use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use embwalk::analysis::{
    attention_decomposition, checkpoint_vectors, export_vectors, self_bias_stats, similarity_map, stack_kernels,
    write_decomposition, write_kernels_csv, write_map_csv, MapSource, SimMetric,
};
use embwalk::bench::{baseline_score, run_eval, sweep, EvalResult, GridSpec, SweepOptions};
use embwalk::compose::{CompositionScheme, TestKind};
use embwalk::io::{load_task, write_task, McInstance, ModelBundle, ModelConfig, StackKind};
use embwalk::model::verify::verify_refactor;
use embwalk::model::{AttentionKind, CheckpointTag, DecodeOptions, Policy};
use embwalk::synth::{copy_bundle, copy_task, random_bundle, random_task, TaskShape};
use embwalk::walk::{trace_encoding_walk, write_decode_csv, write_walk_csv};
use embwalk::Model;

const REFACTOR_TOL: f32 = 1e-5;

#[derive(Parser, Debug)]
#[command(
    name = "embwalk",
    version,
    about = "Embedding-space walk analysis for small transformer bundles"
)]
struct Cli {
    /// Worker threads (defaults to available cores).
    #[arg(long, global = true, env = "EMBWALK_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the attention refactor, merged value filters and permutation
    /// behaviour on random cases.
    VerifyRefactor {
        #[arg(long)]
        dmodel: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Greedy or sampled decoding; prints the emitted ids.
    Decode(DecodeArgs),
    /// Encoding walk of one position through a stack.
    TraceWalk {
        #[command(flatten)]
        input: IdsInput,
        #[arg(long, default_value_t = 0)]
        position: usize,
        #[arg(long, value_enum)]
        stack: Option<Stack>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise similarity map of the vectors at one checkpoint.
    Simmap {
        #[command(flatten)]
        input: IdsInput,
        #[arg(long, default_value = "FinalNorm")]
        tag: CheckpointTag,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, value_enum)]
        stack: Option<Stack>,
        #[arg(long, default_value = "inner")]
        metric: SimMetric,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relative-position kernels of every head of a stack.
    PosKernels {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum)]
        stack: Option<Stack>,
        #[arg(long = "K", alias = "k", default_value_t = 64)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classifies each head's kernel by its offset-0 value.
    SelfBias {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum)]
        stack: Option<Stack>,
        #[arg(long, default_value_t = 8)]
        window: usize,
        #[arg(long = "K", alias = "k", default_value_t = 64)]
        k: usize,
    },
    /// Scores, bias, pre-softmax and weight matrices of one head.
    AttnMaps {
        #[command(flatten)]
        input: IdsInput,
        #[arg(long, value_enum)]
        stack: Option<Stack>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Cross attention instead of self attention (decoder only).
        #[arg(long)]
        cross: bool,
        #[arg(long)]
        out_prefix: String,
    },
    /// Evaluate one scheme (or the baseline) on a task.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "baseline")]
        test: TestKind,
        #[arg(long, default_value = "")]
        scheme: String,
        /// Baseline result file used for the normalized score.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        length_norm: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every point of a scheme grid.
    Sweep {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        test: TestKind,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        length_norm: bool,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
    },
    /// Vocabulary rows or an encoding walk as labelled vectors.
    ExportVectors {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long, value_enum, default_value_t = SpaceArg::Input)]
        space: SpaceArg,
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u32>,
        #[arg(long, default_value_t = 0)]
        position: usize,
        #[arg(long, value_enum)]
        stack: Option<Stack>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a random bundle and a matching synthetic task.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthArch::T5)]
        arch: SynthArch,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 32)]
        dmodel: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a task file with this many instances.
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 2)]
        k_shot: usize,
    },
}

#[derive(Args, Debug)]
struct IdsInput {
    #[arg(long)]
    bundle: PathBuf,
    /// Comma separated token ids.
    #[arg(long, value_delimiter = ',', required_unless_present = "task")]
    ids: Vec<u32>,
    /// Take the context of an instance of this task instead of --ids.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    instance: usize,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    input: IdsInput,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = PolicyArg::Greedy)]
    policy: PolicyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
    /// Decoder prompt for encoder-decoder models (the ids feed the encoder).
    #[arg(long, value_delimiter = ',')]
    decoder_prompt: Vec<u32>,
    /// Write the decoding walk `d_t` per step.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stack {
    Enc,
    Dec,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum What {
    Vocab,
    Walk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SpaceArg {
    Input,
    Output,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthArch {
    T5,
    Gpt2,
    Copy,
}

/// Inputs the user pointed at that do not exist; reported as usage errors.
#[derive(Debug)]
struct MissingInput(PathBuf);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "no such file or directory: {}", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(MissingInput(path.to_owned()).into());
    }
    Ok(())
}

fn load_model(dir: &Path) -> Result<Model> {
    require(dir)?;
    let bundle = ModelBundle::load(dir).with_context(|| format!("loading bundle {}", dir.display()))?;
    Ok(Model::new(bundle)?)
}

fn read_task(path: &Path, model: &Model) -> Result<Vec<McInstance>> {
    require(path)?;
    Ok(load_task(path, Some(model.config().vocab_size))?)
}

fn stack_or_default(model: &Model, stack: Option<Stack>) -> StackKind {
    match stack {
        Some(Stack::Enc) => StackKind::Enc,
        Some(Stack::Dec) => StackKind::Dec,
        None => model.context_stack(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

impl IdsInput {
    fn resolve(&self) -> Result<(Model, Vec<u32>)> {
        let model = load_model(&self.bundle)?;
        let ids = match &self.task {
            Some(path) => {
                let task = read_task(path, &model)?;
                let Some(inst) = task.get(self.instance) else {
                    bail!("task has {} instances, no instance {}", task.len(), self.instance);
                };
                inst.context_ids()
            }
            None => self.ids.clone(),
        };
        Ok((model, ids))
    }
}

fn decode(args: DecodeArgs) -> Result<()> {
    let (model, ids) = args.input.resolve()?;
    let (memory, prompt) = if model.has_encoder() {
        (Some(model.encode_ids(&ids)?), args.decoder_prompt.clone())
    } else {
        (None, ids)
    };
    let policy = match args.policy {
        PolicyArg::Greedy => Policy::Greedy,
        PolicyArg::Sample => Policy::Sample {
            seed: args.seed,
            temperature: args.temperature,
        },
    };
    let walk = model.decode_walk_with(memory.as_ref(), &prompt, args.steps, policy, DecodeOptions::default())?;
    let tokens: Vec<&str> = walk
        .tokens
        .iter()
        .map(|&t| model.bundle().vocab.tokens[t as usize].as_str())
        .collect();
    println!("{}", serde_json::json!({ "ids": walk.tokens, "tokens": tokens }));
    if let Some(path) = args.trace {
        let mut out = create(&path)?;
        write_decode_csv(&mut out, &walk.tokens, &walk.walk)?;
        out.flush()?;
    }
    Ok(())
}

fn write_eval(result: &EvalResult, out: Option<&Path>) -> Result<()> {
    let line = serde_json::to_string(result)?;
    match out {
        Some(path) => {
            let mut f = create(path)?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        None => println!("{line}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::VerifyRefactor {
            dmodel,
            heads,
            seed,
            cases,
        } => {
            let r = verify_refactor(dmodel, heads, seed, cases)?;
            println!("cases: {}", r.cases);
            println!("refactor max delta: {:e}", r.max_refactor);
            println!("merge max delta: {:e}", r.max_merge);
            println!("permutation max delta: {:e}", r.max_permutation);
            if !r.passes(REFACTOR_TOL) {
                bail!("deltas exceed {REFACTOR_TOL:e}");
            }
        }
        Command::Decode(args) => decode(args)?,
        Command::TraceWalk {
            input,
            position,
            stack,
            out,
        } => {
            let (model, ids) = input.resolve()?;
            let walk = trace_encoding_walk(&model, &ids, position, stack_or_default(&model, stack))?;
            let mut f = create(&out)?;
            write_walk_csv(&mut f, &walk)?;
            f.flush()?;
        }
        Command::Simmap {
            input,
            tag,
            layer,
            stack,
            metric,
            out,
        } => {
            let (model, ids) = input.resolve()?;
            let stack = stack_or_default(&model, stack);
            let vectors = checkpoint_vectors(&model, &ids, stack, layer, tag)?;
            let map = similarity_map(&vectors, metric)?;
            let source = MapSource {
                metric: metric.name().to_owned(),
                stack,
                layer,
                tag,
            };
            let mut f = create(&out)?;
            write_map_csv(&mut f, &source.comment(), &map)?;
            f.flush()?;
        }
        Command::PosKernels { bundle, stack, k, out } => {
            let model = load_model(&bundle)?;
            let kernels = stack_kernels(&model, stack_or_default(&model, stack), k)?;
            let mut f = create(&out)?;
            write_kernels_csv(&mut f, &kernels)?;
            f.flush()?;
        }
        Command::SelfBias {
            bundle,
            stack,
            window,
            k,
        } => {
            let model = load_model(&bundle)?;
            let kernels = stack_kernels(&model, stack_or_default(&model, stack), k)?;
            let summary = self_bias_stats(&kernels, window)?;
            for s in &summary.stats {
                println!("{}", serde_json::to_string(s)?);
            }
            println!("{}", serde_json::json!({ "negative_fraction": summary.fraction }));
        }
        Command::AttnMaps {
            input,
            stack,
            layer,
            head,
            cross,
            out_prefix,
        } => {
            let (model, ids) = input.resolve()?;
            let stack = stack_or_default(&model, stack);
            let kind = match (cross, stack) {
                (true, _) => AttentionKind::Cross,
                (false, StackKind::Enc) => AttentionKind::SelfEnc,
                (false, StackKind::Dec) => AttentionKind::SelfDec,
            };
            let trace = attention_decomposition(&model, &ids, stack, layer, head, kind)?;
            let comment = format!("stack={stack}, layer={layer}, head={head}, kind={kind}");
            for p in write_decomposition(&out_prefix, &comment, &trace)? {
                log::info!("wrote {}", p.display());
            }
        }
        Command::Eval {
            bundle,
            task,
            test,
            scheme,
            baseline,
            length_norm,
            out,
        } => {
            let model = load_model(&bundle)?;
            let task = read_task(&task, &model)?;
            let scheme: CompositionScheme = scheme.parse()?;
            let baseline = match baseline {
                Some(path) => {
                    require(&path)?;
                    let text = std::fs::read_to_string(&path)?;
                    Some(serde_json::from_str::<EvalResult>(text.trim_end())?)
                }
                None if test == TestKind::Baseline => None,
                None => Some(baseline_score(&model, &task, length_norm)?),
            };
            let result = run_eval(&model, &task, &scheme, test, baseline.as_ref(), length_norm)?;
            eprintln!(
                "{test}: accuracy {:.4} over {} instances{}",
                result.accuracy,
                result.n_instances,
                result
                    .normalized
                    .map(|n| format!(", normalized {n:.4}"))
                    .unwrap_or_default()
            );
            write_eval(&result, out.as_deref())?;
        }
        Command::Sweep {
            bundle,
            task,
            test,
            grid,
            results,
            resume,
            length_norm,
            top_k,
        } => {
            let model = load_model(&bundle)?;
            let task = read_task(&task, &model)?;
            require(&grid)?;
            let grid = GridSpec::from_json(&std::fs::read_to_string(&grid)?)?;
            let opts = SweepOptions {
                resume,
                length_norm,
                top_k,
            };
            let outcome = sweep(&model, &task, &grid, test, &results, &opts)?;
            for (point, reason) in &outcome.skipped {
                eprintln!("skipped {point}: {reason}");
            }
            eprintln!(
                "{} results ({} evaluated now), {} skipped",
                outcome.results.len(),
                outcome.ran,
                outcome.skipped.len()
            );
            if let Some(best) = outcome.results.first() {
                println!("{}", serde_json::to_string(best)?);
            }
        }
        Command::ExportVectors {
            bundle,
            what,
            space,
            ids,
            position,
            stack,
            out,
        } => {
            let model = load_model(&bundle)?;
            let mut f = create(&out)?;
            match what {
                What::Vocab => {
                    let b = model.bundle();
                    let m = match space {
                        SpaceArg::Input => &b.vocab.embedding,
                        SpaceArg::Output => b.unembedding(),
                    };
                    export_vectors(&mut f, m, &b.vocab.tokens)?;
                }
                What::Walk => {
                    if ids.is_empty() {
                        bail!("--what walk needs --ids");
                    }
                    let walk = trace_encoding_walk(&model, &ids, position, stack_or_default(&model, stack))?;
                    let labels: Vec<String> = walk
                        .iter()
                        .map(|c| format!("{}.{}.{}", c.stack, c.layer, c.tag))
                        .collect();
                    let rows: Vec<&[f32]> = walk.iter().map(|c| c.vector.as_slice()).collect();
                    export_vectors(&mut f, &embwalk::numkern::Matrix::from_rows(&rows)?, &labels)?;
                }
            }
            f.flush()?;
        }
        Command::Synth {
            arch,
            vocab,
            dmodel,
            heads,
            layers,
            seed,
            out,
            task,
            instances,
            k_shot,
        } => {
            let bundle = match arch {
                SynthArch::T5 => random_bundle(&ModelConfig::t5_like(vocab, dmodel, heads, layers), seed),
                SynthArch::Gpt2 => random_bundle(&ModelConfig::gpt2_like(vocab, dmodel, heads, layers), seed),
                SynthArch::Copy => copy_bundle(vocab),
            };
            bundle.save(&out)?;
            if let Some(path) = task {
                let inst = match arch {
                    SynthArch::Copy => copy_task(vocab, instances, seed),
                    _ => random_task(
                        vocab,
                        TaskShape {
                            n_instances: instances,
                            k_shot,
                            ..TaskShape::default()
                        },
                        seed,
                    ),
                };
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)?;
                }
                write_task(&path, &inst)?;
            }
        }
    }
    Ok(())
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<MissingInput>()
            || c.downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound)
            || matches!(c.downcast_ref::<embwalk::Error>(), Some(embwalk::Error::Io(io)) if io.kind() == std::io::ErrorKind::NotFound)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_usage_error(&e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
