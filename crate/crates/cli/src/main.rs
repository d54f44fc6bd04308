use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, ArgGroup, Args, Parser, Subcommand};
use csmpq::allocator::{self, AllocError, BitRange, BudgetKind, BYTES_PER_MB};
use csmpq::feature_store::write_container;
use csmpq::pipeline::{
    self, AllocateOptions, BudgetSpec, PipelineConfig, PipelineError, DEFAULT_ACT_BITS, DEFAULT_BETA, DEFAULT_SAMPLES,
};
use csmpq::quantsim::{evaluate_float, Dataset, EvalReport, ModelGraph};
use csmpq::report::AllocationReport;

const EXIT_FAILURE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(name = "csmpq", version, about = "Class-separability driven mixed-precision bit allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every layer of a feature dump.
    Analyze {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve for per-layer bit-widths from scores and a model profile.
    Allocate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        alloc: AllocArgs,
    },
    /// Fake-quantize a model with an allocation and evaluate it.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample images and dump per-layer feature maps.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// extract (unless --features is given), analyze, allocate, simulate.
    Pipeline {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        alloc: AllocArgs,
    },
}

#[derive(Args)]
#[command(group(ArgGroup::new("budget").required(true).multiple(false)))]
struct AllocArgs {
    #[arg(long, default_value_t = DEFAULT_BETA, allow_negative_numbers = true)]
    beta: f64,
    /// Search range as MIN:MAX.
    #[arg(long, default_value = "4:8", value_parser = parse_bits)]
    bits: BitRange,
    /// Model-size budget in MB (2^20 bytes).
    #[arg(long, group = "budget")]
    budget_mb: Option<f64>,
    /// Bit-operation budget (MACs x weight bits x activation bits).
    #[arg(long, group = "budget")]
    budget_bops: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_ACT_BITS)]
    act_bits: u32,
    /// Pin the first and last layers at 8 bits.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pin_first_last: bool,
    /// Additional layer ids to pin at 8 bits.
    #[arg(long = "pin")]
    pin: Vec<String>,
}

impl AllocArgs {
    fn budget(&self) -> BudgetSpec {
        match (self.budget_mb, self.budget_bops) {
            (Some(mb), _) => BudgetSpec::Megabytes(mb),
            (None, Some(b)) => BudgetSpec::Bops(b),
            (None, None) => unreachable!("clap requires one budget flag"),
        }
    }

    fn options(&self) -> AllocateOptions {
        AllocateOptions {
            beta: self.beta,
            bit_range: self.bits,
            budget: self.budget().to_budget(self.act_bits),
            pin_first_last: self.pin_first_last,
            pinned: self.pin.clone(),
        }
    }
}

fn parse_bits(s: &str) -> Result<BitRange, String> {
    let (lo, hi) = s.split_once(':').ok_or("expected MIN:MAX")?;
    let lo: u32 = lo.trim().parse().map_err(|e| format!("bad MIN: {e}"))?;
    let hi: u32 = hi.trim().parse().map_err(|e| format!("bad MAX: {e}"))?;
    BitRange::new(lo, hi).map_err(|e| e.to_string())
}

fn mb(bytes: f64) -> f64 {
    bytes / BYTES_PER_MB
}

fn print_table(float_acc: f64, float_size: f64, float_bops: f64, report: &EvalReport) {
    println!("| Method | W bit | A bit | Model Size (MB) | BOPs (G) | Top-1 (%) |");
    println!("|---|---|---|---|---|---|");
    println!(
        "| Baseline | 32 | 32 | {:.4} | {:.6} | {:.2} |",
        mb(float_size),
        float_bops / 1e9,
        100.0 * float_acc
    );
    println!(
        "| CSMPQ | mixed | {} | {:.4} | {:.6} | {:.2} |",
        report.activation_bits,
        mb(report.size_bytes),
        report.bops / 1e9,
        100.0 * report.accuracy
    );
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Analyze { features, out } => {
            let report = pipeline::analyze_file(&features, &out).map_err(|e| stage("analyze", e))?;
            for l in &report.layers {
                println!("{:<16} alpha={:.6e} words={}", l.layer_id, l.alpha, l.word_count);
            }
        }
        Command::Allocate {
            scores,
            profile,
            out,
            alloc,
        } => {
            let r = pipeline::allocate_files(&scores, &profile, &alloc.options(), &out).map_err(|e| stage("allocate", e))?;
            print_allocation(&r);
        }
        Command::Simulate {
            model,
            config,
            dataset,
            out,
        } => {
            let report = pipeline::simulate_files(&model, &config, &dataset, &out).map_err(|e| stage("simulate", e))?;
            let (float_acc, size, bops) = float_baseline(&model, &dataset).map_err(|e| stage("simulate", e))?;
            print_table(float_acc, size, bops, &report);
        }
        Command::Extract {
            model,
            dataset,
            out,
            samples,
            seed,
        } => {
            let go = || -> Result<(), PipelineError> {
                let model = ModelGraph::load(&model)?;
                let dataset = Dataset::load(&dataset)?;
                let (tensors, meta) = pipeline::extract_features(&model, &dataset, samples, seed)?;
                write_container(&tensors, &meta, &out)?;
                Ok(())
            };
            go().map_err(|e| stage("extract", e))?;
        }
        Command::Pipeline {
            model,
            dataset,
            features,
            profile,
            out_dir,
            samples,
            seed,
            alloc,
        } => {
            let cfg = PipelineConfig {
                features,
                profile,
                beta: alloc.beta,
                bit_range: alloc.bits,
                activation_bits: alloc.act_bits,
                pin_first_last: alloc.pin_first_last,
                pinned: alloc.pin.clone(),
                samples,
                seed,
                ..PipelineConfig::new(model.clone(), dataset.clone(), out_dir, alloc.budget())
            };
            let outputs = pipeline::run_pipeline(&cfg)?;
            print_allocation(&outputs.allocation_report);
            let (float_acc, size, bops) = float_baseline(&model, &dataset).map_err(|e| stage("simulate", e))?;
            print_table(float_acc, size, bops, &outputs.eval_report);
        }
    }
    Ok(())
}

fn stage(name: &'static str, e: PipelineError) -> PipelineError {
    match e {
        PipelineError::Stage { .. } => e,
        other => PipelineError::Stage {
            stage: name,
            source: Box::new(other),
        },
    }
}

/// Accuracy, size and BOPs of the unquantized model (W32A32).
fn float_baseline(model: &Path, dataset: &Path) -> Result<(f64, f64, f64), PipelineError> {
    let model = ModelGraph::load(model)?;
    let dataset = Dataset::load(dataset)?;
    let acc = evaluate_float(&model, &dataset)?;
    let profile = model.profile();
    let bits = vec![32; profile.len()];
    Ok((acc, allocator::model_size(&bits, &profile), allocator::bops(&bits, &profile, 32)))
}

fn print_allocation(r: &AllocationReport) {
    for l in &r.layers {
        let pin = if l.pinned { " (pinned)" } else { "" };
        println!("{:<16} bits={}{} theta={:.6}", l.layer_id, l.bits, pin, l.theta);
    }
    println!(
        "objective={:.6} relaxed_objective={:.6} size={:.6} MB bops={:.6} G feasible={}",
        r.config.objective,
        r.config.relaxed_objective,
        mb(r.config.size_bytes),
        r.config.bops / 1e9,
        r.config.feasible
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = if e.is_io() {
                (EXIT_IO, "io")
            } else if e.is_infeasible() {
                (EXIT_INFEASIBLE, "infeasible")
            } else {
                (EXIT_FAILURE, "invalid")
            };
            let stage = e.stage().unwrap_or("cli");
            eprintln!("error: kind={kind} stage={stage}: {}", e.root());
            if let PipelineError::Alloc(AllocError::Infeasible { kind, minimum, .. }) = e.root() {
                match kind {
                    BudgetKind::ModelSizeBytes => eprintln!("minimum achievable size: {:.6} MB", mb(*minimum)),
                    BudgetKind::Bops => eprintln!("minimum achievable BOPs: {:.6} G", minimum / 1e9),
                }
            }
            ExitCode::from(code)
        }
    }
}
