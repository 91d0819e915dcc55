use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use asmpc_core::bnn::BnnModel;
use asmpc_core::config::RunConfig;
use asmpc_core::io::{self, names, ArtifactDir, RunRow};
use asmpc_core::lpv::{self, BfrScore, LpvModel};
use asmpc_core::meta::MetaKnowledge;
use asmpc_core::pipeline::{self, plots, AdaptationGain, ModelChoice, NominalFit, RunSummary};
use asmpc_core::plant;

#[derive(Parser)]
#[command(name = "asmpc", version, about = "Adaptive scenario MPC with a meta-learned Bayesian mismatch model")]
struct Cli {
    /// Worker threads for Monte-Carlo sampling (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults to <out>/config.json, then built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Full-length training instead of the quick defaults.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Maml,
    Global,
}

impl From<Model> for ModelChoice {
    fn from(m: Model) -> Self {
        match m {
            Model::Maml => ModelChoice::Maml,
            Model::Global => ModelChoice::Global,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the plant and record the training and held-out trajectories.
    Collect(Common),
    /// Fit the LPV nominal model and report its one-step BFR.
    FitNominal(Common),
    /// Train the Bayesian mismatch network.
    TrainBnn(Common),
    /// Meta-train the update law.
    MetaTrain(Common),
    /// Run the closed loop with one model.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "maml")]
        model: Model,
    },
    /// Run both models and compare them.
    Compare(Common),
    /// Check the artifacts against the configured thresholds (exit 2 on failure).
    Eval(Common),
    /// Write per-figure CSVs under <out>/plots.
    ExportPlots(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Collect(c)
            | Command::FitNominal(c)
            | Command::TrainBnn(c)
            | Command::MetaTrain(c)
            | Command::Compare(c)
            | Command::Eval(c)
            | Command::ExportPlots(c) => c,
            Command::Run { common, .. } => common,
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    dir: ArtifactDir,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let dir = ArtifactDir::new(&c.out);
        let from_out = dir.path(names::CONFIG);
        let path = c.config.clone().or_else(|| from_out.exists().then_some(from_out));
        let mut cfg = match &path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::from_json(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if c.paper_scale {
            cfg = cfg.paper_scale();
        }
        cfg = cfg.with_seed_env()?;
        cfg.validate()?;
        io::write_json(&dir.path(names::CONFIG), &cfg)?;
        Ok(Self { cfg, dir })
    }

    fn data(&self) -> Result<plant::TransitionDataset> {
        Ok(io::read_dataset(&self.dir.require(names::DATA)?)?)
    }

    fn heldout(&self) -> Result<plant::TransitionDataset> {
        Ok(io::read_dataset(&self.dir.require(names::HELDOUT)?)?)
    }

    fn nominal(&self) -> Result<LpvModel> {
        Ok(io::read_json(&self.dir.require(names::NOMINAL)?)?)
    }

    fn meta(&self) -> Result<MetaKnowledge> {
        Ok(io::read_json(&self.dir.require(names::META)?)?)
    }

    /// The nominal fit with its split, recomputed from the stored model.
    fn nominal_fit(&self, data: &plant::TransitionDataset) -> Result<NominalFit> {
        let model = self.nominal()?;
        let (train_idx, test_idx) = data.split_indices(self.cfg.split.train_fraction, self.cfg.split.seed);
        let bfr = lpv::one_step_bfr(&model, &data.subset(&test_idx))?;
        Ok(NominalFit { model, train_idx, test_idx, bfr })
    }

    fn run(&self, which: ModelChoice) -> Result<RunSummary> {
        let nominal = self.nominal()?;
        let mk = self.meta()?;
        let log = pipeline::run(&self.cfg, &nominal, &mk, which)?;
        let summary = pipeline::summarize(&self.cfg, which, &log)?;
        io::write_run_log(&self.dir.path(&names::run_csv(which.name())), &log)?;
        io::write_json(&self.dir.path(&names::run_summary(which.name())), &summary)?;
        let s = &summary.safety;
        println!(
            "{}: cost {:.3}, violation fraction {:.3}, containment {:.3}, final ‖x‖∞ {:.4}",
            which.name(),
            s.closed_loop_cost,
            s.violation_fraction,
            s.containment_rate,
            s.final_norm_inf
        );
        Ok(summary)
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct NominalReport {
    train: usize,
    test: usize,
    one_step_bfr: BfrScore,
    free_run_bfr: Option<BfrScore>,
}

fn execute(cmd: &Command) -> Result<ExitCode> {
    let ctx = Ctx::new(cmd.common())?;
    let cfg = &ctx.cfg;
    let dir = &ctx.dir;
    match cmd {
        Command::Collect(_) => {
            let (data, heldout) = pipeline::collect(cfg)?;
            io::write_dataset(&dir.path(names::DATA), &data)?;
            io::write_dataset(&dir.path(names::HELDOUT), &heldout)?;
            println!("collected {} + {} held-out transitions", data.len(), heldout.len());
        }
        Command::FitNominal(_) => {
            let data = ctx.data()?;
            let fit = pipeline::fit_nominal(cfg, &data)?;
            let report = NominalReport {
                train: fit.train_idx.len(),
                test: fit.test_idx.len(),
                one_step_bfr: fit.bfr,
                free_run_bfr: lpv::free_run_bfr(&fit.model, &data.subset(&fit.test_idx)).ok(),
            };
            io::write_json(&dir.path(names::NOMINAL), &fit.model)?;
            io::write_json(&dir.path(names::NOMINAL_REPORT), &report)?;
            println!("one-step BFR: x1 {:.2}%, x2 {:.2}%", fit.bfr.0[0], fit.bfr.0[1]);
        }
        Command::TrainBnn(_) => {
            let data = ctx.data()?;
            let fit = ctx.nominal_fit(&data)?;
            let (model, report) = pipeline::train_residual(cfg, &data, &fit)?;
            io::write_json(&dir.path(names::BNN), &model)?;
            io::write_json(&dir.path(names::BNN_REPORT), &report)?;
            println!(
                "trained {} epochs, kept epoch {:?}",
                report.epoch_loss.len(),
                report.best_epoch
            );
        }
        Command::MetaTrain(_) => {
            let data = ctx.data()?;
            let nominal = ctx.nominal()?;
            let model: BnnModel = io::read_json(&dir.require(names::BNN)?)?;
            let (mk, report) = pipeline::meta_train(cfg, &data, &nominal, &model)?;
            io::write_json(&dir.path(names::META), &mk)?;
            io::write_json(&dir.path(names::META_REPORT), &report)?;
            if let (Some(a), Some(b)) = (report.epoch_loss.first(), report.epoch_loss.last()) {
                println!("meta-loss {a:.4e} -> {b:.4e} over {} epochs", report.epoch_loss.len());
            }
        }
        Command::Run { model, .. } => {
            ctx.run((*model).into())?;
        }
        Command::Compare(_) => {
            let nominal = ctx.nominal()?;
            let mk = ctx.meta()?;
            let a = pipeline::run(cfg, &nominal, &mk, ModelChoice::Maml)?;
            let g = pipeline::run(cfg, &nominal, &mk, ModelChoice::Global)?;
            for (which, log) in [(ModelChoice::Maml, &a), (ModelChoice::Global, &g)] {
                io::write_run_log(&dir.path(&names::run_csv(which.name())), log)?;
                io::write_json(
                    &dir.path(&names::run_summary(which.name())),
                    &pipeline::summarize(cfg, which, log)?,
                )?;
            }
            let c = asmpc_core::harness::compare_runs(&a, &g)?;
            io::write_json(&dir.path(names::COMPARISON), &c)?;
            println!(
                "closed-loop cost: maml {:.3}, global {:.3} (maml lower: {})",
                c.adaptive.closed_loop_cost, c.fixed.closed_loop_cost, c.adaptive_cost_lower
            );
            println!("global run reaches |x1| <= 0.1: {}", c.fixed_reaches_x1_tol);
        }
        Command::Eval(_) => return eval(&ctx),
        Command::ExportPlots(_) => export_plots(&ctx)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(ctx: &Ctx) -> Result<ExitCode> {
    let (cfg, dir) = (&ctx.cfg, &ctx.dir);
    let data = ctx.data()?;
    let fit = ctx.nominal_fit(&data)?;
    println!("nominal one-step BFR: x1 {:.2}%, x2 {:.2}%", fit.bfr.0[0], fit.bfr.0[1]);
    let mut fails = pipeline::check_bfr(cfg, &fit.bfr);
    if dir.exists(names::META) {
        let gain: AdaptationGain = pipeline::adaptation_gain(&ctx.meta()?, &fit.model, &ctx.heldout()?)?;
        println!(
            "adaptation over {} held-out anchors: adapted MSE {:.4e}, global MSE {:.4e}",
            gain.anchors, gain.adapted_mse, gain.global_mse
        );
        fails.extend(pipeline::check_gain(cfg, &gain));
    }
    let summary_path = dir.path(&names::run_summary(ModelChoice::Maml.name()));
    if summary_path.exists() {
        let s: RunSummary = io::read_json(&summary_path)?;
        println!(
            "maml run: violation fraction {:.3}, containment {:.3}, tail ‖x‖∞ {:?}",
            s.safety.violation_fraction, s.safety.containment_rate, s.tail_norm
        );
        fails.extend(pipeline::check_run(cfg, &s));
    }
    if dir.exists(names::COMPARISON) {
        let c: asmpc_core::harness::Comparison = io::read_json(&dir.path(names::COMPARISON))?;
        println!(
            "comparison: maml cost {:.3} vs global {:.3}; global reaches |x1| <= 0.1: {}",
            c.adaptive.closed_loop_cost, c.fixed.closed_loop_cost, c.fixed_reaches_x1_tol
        );
        if !c.adaptive_cost_lower {
            fails.push("comparison: maml closed-loop cost is not below global".into());
        }
    }
    if fails.is_empty() {
        println!("eval: all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &fails {
            println!("FAIL {f}");
        }
        Ok(ExitCode::from(2))
    }
}

fn export_plots(ctx: &Ctx) -> Result<()> {
    let (cfg, dir) = (&ctx.cfg, &ctx.dir);
    let out = dir.path(names::PLOTS);
    let data = ctx.data()?;
    let fit = ctx.nominal_fit(&data)?;
    let test = data.subset(&fit.test_idx);
    io::write_csv(&out.join("fig3_nominal.csv"), plots::nominal_rows(&fit.model, &test))?;
    let mut written = vec!["fig3_nominal.csv"];
    if dir.exists(names::META) {
        let rows = plots::residual_rows(
            &ctx.meta()?,
            &fit.model,
            &ctx.heldout()?,
            cfg.closed_loop.n_mc,
            cfg.closed_loop.seed,
        )?;
        io::write_csv(&out.join("fig5_residual.csv"), rows)?;
        written.push("fig5_residual.csv");
    }
    for (which, fig) in [(ModelChoice::Maml, "fig6_maml.csv"), (ModelChoice::Global, "fig7_global.csv")] {
        let p = dir.path(&names::run_csv(which.name()));
        if p.exists() {
            let rows: Vec<RunRow> = io::read_csv(&p)?;
            io::write_csv(&out.join(fig), plots::trajectory_rows(&rows, &fit.model, cfg.closed_loop.dt))?;
            written.push(fig);
        }
    }
    println!("wrote {} under {}", written.join(", "), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
