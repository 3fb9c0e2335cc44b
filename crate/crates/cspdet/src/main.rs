use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cspdet::commands::{classify, eval, infer, tools, train};
use cspdet::{CliError, CliResult, RunConfig};
use cspdet_core::flops::CostTable;
use cspdet_core::gradcheck::CheckConfig;

#[derive(Parser)]
#[command(name = "cspdet", version, about = "Instance segmentation with a CSP EfficientNet backbone and NAS-FPN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set heads.mask_loss=dice`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the fully resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; checkpoints and metrics.jsonl go to output.dir.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the newest checkpoint in output.dir.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the evaluation split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
        /// Also write the report as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run a checkpoint on images and write detections.json.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "detections")]
        out: PathBuf,
        /// Write a color overlay next to detections.json for every image.
        #[arg(long)]
        overlay: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Finite-difference check of every differentiable primitive and composite.
    Gradcheck {
        /// Only cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates probed per input.
        #[arg(long, default_value_t = CheckConfig::default().coords)]
        coords: usize,
        #[arg(long, default_value_t = CheckConfig::default().step)]
        step: f64,
    },
    /// Multiply-accumulate and parameter counts per module.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input side; defaults to data.image_size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 100)]
        rois: usize,
        #[arg(long, default_value_t = 100)]
        mask_rois: usize,
        /// Print JSON instead of tables.
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic cell dataset in COCO format.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Number of images; overrides data.synthetic.count.
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Square image side; overrides data.synthetic.height and width.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the backbone alone as an image-folder classifier.
    Classify {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn cost_json(t: &CostTable) -> serde_json::Value {
    serde_json::json!({
        "rows": t.rows.iter().map(|r| serde_json::json!({"name": r.name, "macs": r.macs, "params": r.params})).collect::<Vec<_>>(),
        "total_macs": t.total_macs(),
        "total_params": t.total_params(),
    })
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    match cli.command {
        Command::Config { cfg } => print!("{}", cfg.load()?.resolved()),
        Command::Train { cfg, resume } => {
            let cfg = cfg.load()?;
            let out = train::run(&cfg, resume)?;
            println!("{} steps in {}{}", out.steps, out.run_dir.display(), if out.stopped_early { " (stopped early)" } else { "" });
            if let Some(e) = &out.last_eval {
                println!("mIoU {:?}  mask AP50 {:?}  mask AP {:?}", e.miou, e.mask_ap50(), e.mask_ap);
            }
        }
        Command::Eval { cfg, checkpoint, oracle, json } => {
            let cfg = cfg.load()?;
            let report = eval::run(&cfg, checkpoint.as_deref(), oracle)?;
            print!("{}", report.table());
            if let Some(p) = json {
                std::fs::write(&p, report.to_json()).map_err(|e| CliError::io(&p, e))?;
            }
            if !report.defined {
                return Err(CliError::Data("metrics are undefined: no ground truth or no detections".into()));
            }
        }
        Command::Infer { cfg, checkpoint, out, overlay, images } => {
            let cfg = cfg.load()?;
            let all = infer::run(&cfg, &checkpoint, &images, &out, overlay)?;
            for d in &all {
                println!("{}: {} detections", d.file, d.detections.len());
            }
        }
        Command::Gradcheck { filter, seed, coords, step } => {
            let reports = tools::gradcheck(&CheckConfig { step, coords, seed }, filter.as_deref())?;
            print!("{}", tools::gradcheck_table(&reports));
            let failed = reports.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(CliError::Numeric(format!("{failed} of {} gradient checks failed", reports.len())));
            }
        }
        Command::Flops { cfg, size, rois, mask_rois, json } => {
            let cfg = cfg.load()?;
            let side = size.unwrap_or(cfg.data.image_size);
            if side == 0 {
                return Err(CliError::Config("flops needs --size when data.image_size is 0".into()));
            }
            let (own, other) = tools::flops(&cfg, (side, side), rois, mask_rois)?;
            let (csp, plain) = if cfg.backbone.use_csp { (&own, &other) } else { (&other, &own) };
            let bb = tools::backbone_comparison(&cfg, (side, side))?;
            if json {
                let v = serde_json::json!({
                    "size": side,
                    "configured": cost_json(&own),
                    "csp": cost_json(csp),
                    "plain": cost_json(plain),
                    "backbone": {
                        "csp_macs": bb.csp_macs,
                        "plain_macs": bb.plain_macs,
                        "csp_params": bb.csp_params,
                        "plain_params": bb.plain_params,
                        "stage_reductions": bb.stage_reductions,
                    },
                });
                println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            } else {
                print!("{}", tools::flops_table(&own));
                let (c, p) = (csp.total_macs() as f64, plain.total_macs() as f64);
                println!("\nmodel: CSP {:.3} GMACs, plain {:.3} GMACs ({:.1}% less)", c / 1e9, p / 1e9, 100.0 * (1.0 - c / p));
                let (c, p) = (bb.csp_macs as f64, bb.plain_macs as f64);
                println!(
                    "backbone: CSP {:.3} GMACs / {} params, plain {:.3} GMACs / {} params ({:.1}% less)",
                    c / 1e9,
                    bb.csp_params,
                    p / 1e9,
                    bb.plain_params,
                    100.0 * (1.0 - c / p)
                );
                let stages: Vec<String> = bb.stage_reductions.iter().map(|r| format!("{:.1}%", 100.0 * r)).collect();
                println!("per-stage reduction (stages 2-7): {}", stages.join(" "));
            }
        }
        Command::Synth { cfg, out, n, seed, size } => {
            let cfg = cfg.load()?;
            let mut s = cfg.data.synthetic.clone();
            if let Some(n) = n {
                s.count = n;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(size) = size {
                s.height = size;
                s.width = size;
            }
            let file = tools::synth(&s, &out)?;
            println!("{} images, {} annotations in {}", file.images.len(), file.annotations.len(), out.display());
        }
        Command::Classify { cfg } => {
            let cfg = cfg.load()?;
            let lines = classify::run(&cfg)?;
            if let Some(l) = lines.last() {
                println!("epoch {}: train loss {:.4}, train acc {:.4}, val acc {}", l.epoch, l.train_loss, l.train_acc, l.val_acc.map_or("n/a".into(), |a| format!("{a:.4}")));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cspdet::init_threads().and_then(|_| run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
