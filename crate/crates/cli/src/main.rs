use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use occflow::cdf::displacement_cdf;
use occflow::evaluate::{benchmark_pairs, evaluate, load_model};
use occflow::train::train;
use occflow::viz::{render_flow_png, DEFAULT_PERCENTILE};
use occflow::{RunConfig, Strategy, TransformFamily};
use occflow_core::data::{read_flo, read_ppm, write_flo};
use occflow_core::model::{hex, read_checkpoint};

#[derive(Parser)]
#[command(name = "occflow", version, about = "Toy optical flow with occlusion and transformation consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, evaluations and a checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint on the held-out synthetic split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render a flow field as a colour-wheel PNG.
    Viz(VizArgs),
    /// Per-axis displacement CDFs of one or more `.flo` files.
    Cdf {
        #[arg(required = true)]
        flows: Vec<PathBuf>,
        /// Directory for `cdf.csv` and `cdf.png`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated frame gaps, e.g. `1,2`.
    #[arg(long)]
    k_set: Option<String>,
    /// Comma-separated transform families: `hflip`, `rot`.
    #[arg(long)]
    transforms: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(self.strategy.unwrap_or(Strategy::Baseline)),
        };
        if let Some(s) = self.strategy {
            c.strategy = s;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(n) = self.steps {
            c.steps = n;
        }
        if let Some(k) = &self.k_set {
            c.set("k_set", k)?;
        }
        if let Some(t) = &self.transforms {
            c.transforms = t
                .split(',')
                .map(str::parse::<TransformFamily>)
                .collect::<Result<_>>()?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct VizArgs {
    /// A `.flo` file to render.
    #[arg(long, conflicts_with_all = ["checkpoint", "first", "second"])]
    flow: Option<PathBuf>,
    /// Run configuration of the checkpoint.
    #[arg(long, requires_all = ["checkpoint", "first", "second"])]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// First frame (binary PPM).
    #[arg(long)]
    first: Option<PathBuf>,
    #[arg(long)]
    second: Option<PathBuf>,
    /// Darken pixels the model predicts as occluded.
    #[arg(long)]
    occlusion: bool,
    /// Also write the predicted flow as `.flo`.
    #[arg(long)]
    dump_flo: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    percentile: f64,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

fn run_viz(a: VizArgs) -> Result<()> {
    if let Some(p) = &a.flow {
        let f = read_flo(p)?;
        return render_flow_png(&a.out, &f, None, a.percentile);
    }
    let (Some(cfg), Some(ckpt), Some(first), Some(second)) = (&a.config, &a.checkpoint, &a.first, &a.second)
    else {
        bail!("give either --flow or --config, --checkpoint, --first and --second");
    };
    let cfg = RunConfig::load(cfg)?;
    let model = load_model(&cfg, read_checkpoint(ckpt)?)?;
    let out = model.forward(&read_ppm(first)?, &read_ppm(second)?)?;
    let vis = out.final_visibility();
    if let Some(p) = &a.dump_flo {
        write_flo(p, out.final_flow())?;
    }
    render_flow_png(&a.out, out.final_flow(), a.occlusion.then_some(&vis[..]), a.percentile)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            println!("config hash {}", hex(&cfg.hash()));
            let summary = train(&cfg, true)?;
            print!("{}", summary.final_eval().to_text());
            println!("wrote {}", cfg.out.display());
        }
        Command::Eval { run, checkpoint } => {
            let cfg = run.resolve()?;
            let path = checkpoint.unwrap_or_else(|| cfg.out.join("model.ckpt"));
            let ckpt = read_checkpoint(&path).with_context(|| format!("reading {}", path.display()))?;
            let model = load_model(&cfg, ckpt)?;
            let report = evaluate(&model, &benchmark_pairs(&cfg)?)?;
            print!("{}", report.to_text());
        }
        Command::Viz(args) => run_viz(args)?,
        Command::Cdf { flows, out } => {
            let fields = flows.iter().map(read_flo).collect::<Result<Vec<_>, _>>()?;
            let cdf = displacement_cdf(&fields)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("cdf.csv"), cdf.to_csv())?;
            cdf.plot_png(&out.join("cdf.png"))?;
            print!("{}", cdf.summary());
        }
    }
    Ok(())
}
