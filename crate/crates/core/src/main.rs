use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use codistill::checkpoint::Checkpoint;
use codistill::codistill::distill_trace_csv;
use codistill::config::RunConfig;
use codistill::data::{dataset_checkpoint, labels_csv};
use codistill::importance::ushape_diagnostic;
use codistill::metrics::{sweep_csv, sweep_surface, MetricReport};
use codistill::model::{ModelParams, SkipMask};
use codistill::pipeline::{self, stage_seed};
use codistill::prune_train::stage2_trace_csv;
use codistill::train::loss_trace_csv;
use codistill::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "codistill", version, about = "Block pruning and few-step distillation of a toy video flow model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; FLGN_OUT takes precedence, then the configured out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and held-out datasets.
    GenData(Common),
    /// Fit the unpruned teacher with flow matching.
    TrainBase(Common),
    /// Score blocks of a base checkpoint and pick the keep-set.
    ScoreBlocks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train under stochastic block skipping.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
        /// importance.json written by score-blocks.
        #[arg(long)]
        keep: Option<PathBuf>,
    },
    /// Distill the few-step pruned generator.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Generate videos from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Few-step count for generators, Euler steps otherwise.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score a sample file against held-out data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Steps × retention sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Every stage in order, with a summary report.
    Pipeline(Common),
    /// Finite-difference validation of the tape.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Run {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(&common.config)?;
        let seed = common.seed.unwrap_or(cfg.seed);
        let out = resolve_out(common.out.as_deref(), &cfg);
        cfg.seed = seed;
        cfg.out_dir = out.display().to_string();
        for w in cfg.distill.guidance.warnings() {
            eprintln!("warning: {w}");
        }
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let run = Self { cfg, seed, out };
        run.write("config.resolved.toml", run.cfg.to_toml())?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn write_json(&self, name: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
        self.write(name, serde_json::to_string_pretty(value).expect("reports serialize") + "\n")
    }

    fn save_model(&self, name: &str, params: &ModelParams, stage: &str, iteration: usize, extra: Value) -> Result<PathBuf> {
        let mut meta = json!({
            "stage": stage,
            "seed": self.seed,
            "iteration": iteration,
            "config": self.cfg.fingerprint(),
        });
        if let (Some(m), Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        let p = self.path(name);
        params.to_checkpoint(meta).save(&p)?;
        Ok(p)
    }

    /// Loads `--init`, which must exist and carry one of the `stages` tags.
    fn load_model(&self, init: Option<&Path>, stages: &[&str], artifact: &str) -> Result<(ModelParams, Value)> {
        let path = init.ok_or_else(|| Error::Precondition(format!("missing --init: this command needs {artifact}")))?;
        if !path.exists() {
            return Err(Error::Precondition(format!("{artifact} not found at {}", path.display())));
        }
        let ck = Checkpoint::load(path)?;
        let stage = ck.metadata.get("stage").and_then(Value::as_str).unwrap_or("unknown").to_string();
        if !stages.contains(&stage.as_str()) {
            return Err(Error::Precondition(format!(
                "{} is a `{stage}` checkpoint, but this command needs {artifact}",
                path.display()
            )));
        }
        let params = ModelParams::from_checkpoint(&self.cfg.dit()?, &ck)?;
        Ok((params, ck.metadata))
    }
}

fn resolve_out(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    match std::env::var_os("FLGN_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.out_dir)),
    }
}

fn keep_set_of(meta: &Value) -> Result<Vec<usize>> {
    serde_json::from_value(meta.get("keep_set").cloned().unwrap_or(Value::Null))
        .map_err(|_| Error::Precondition("checkpoint metadata carries no keep_set".into()))
}

fn gen_data(run: &Run) -> Result<()> {
    let train = pipeline::training_set(&run.cfg, run.seed)?;
    let heldout = pipeline::heldout_set(&run.cfg, run.seed)?;
    dataset_checkpoint(&train, &run.cfg.data, stage_seed(run.seed, "train-data")).save(run.path("train.flgn"))?;
    dataset_checkpoint(&heldout, &run.cfg.data, stage_seed(run.seed, "heldout-data")).save(run.path("heldout.flgn"))?;
    run.write("train_labels.csv", labels_csv(&train))?;
    run.write("heldout_labels.csv", labels_csv(&heldout))?;
    println!("wrote {} training and {} held-out videos to {}", train.len(), heldout.len(), run.out.display());
    Ok(())
}

fn train_base(run: &Run) -> Result<()> {
    let train = pipeline::training_set(&run.cfg, run.seed)?;
    let (base, trace) = pipeline::stage_base(&run.cfg, &train, run.seed)?;
    run.write("base_loss.csv", loss_trace_csv(&trace))?;
    let p = run.save_model("base.flgn", &base, "base", trace.len(), json!({}))?;
    let (head, tail) = codistill::train::head_tail_means(&trace, 50);
    println!("base loss {head:.4} -> {tail:.4}; wrote {}", p.display());
    Ok(())
}

fn score_blocks(run: &Run, init: Option<&Path>) -> Result<()> {
    let (base, _) = run.load_model(init, &["base"], "a base checkpoint (base.flgn from train-base)")?;
    let train = pipeline::training_set(&run.cfg, run.seed)?;
    let report = pipeline::stage_importance(&run.cfg, &base, &train, run.seed)?;
    run.write("importance.csv", report.to_csv())?;
    let p = run.write_json("importance.json", &report.sidecar())?;
    let ushape = ushape_diagnostic(&report.scores).map(|u| format!("{:.3}", u.ratio)).unwrap_or_else(|| "n/a".into());
    println!(
        "keep-set {:?} (retention {:.3}, U-shape ratio {ushape}); wrote {}",
        report.keep_set,
        base.retention_ratio(&report.skip_mask()),
        p.display()
    );
    Ok(())
}

fn train_stage2(run: &Run, init: Option<&Path>, keep: Option<&Path>) -> Result<()> {
    let keep_path = keep.ok_or_else(|| Error::Precondition("missing --keep: train-stage2 needs importance.json from score-blocks".into()))?;
    let text = std::fs::read_to_string(keep_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Precondition(format!("importance.json not found at {}", keep_path.display())),
        _ => Error::io(keep_path, e),
    })?;
    let sidecar: Value = serde_json::from_str(&text).map_err(|e| Error::Precondition(format!("{}: {e}", keep_path.display())))?;
    let keep_set = keep_set_of(&sidecar)?;
    let (base, _) = run.load_model(init, &["base"], "a base checkpoint (base.flgn from train-base)")?;
    let train = pipeline::training_set(&run.cfg, run.seed)?;
    let extra = json!({ "keep_set": keep_set });
    let (params, trace) = pipeline::stage_prune(&run.cfg, &base, &train, &keep_set, run.seed, |it, p| {
        run.save_model(&format!("stage2_iter{it}.flgn"), p, "stage2", it, extra.clone()).map(|_| ())
    })?;
    run.write("stage2_loss.csv", stage2_trace_csv(&trace))?;
    let p = run.save_model("stage2.flgn", &params, "stage2", trace.len(), extra)?;
    println!("Stage II done ({} iterations); wrote {}", trace.len(), p.display());
    Ok(())
}

fn distill(run: &Run, init: Option<&Path>) -> Result<()> {
    let (stage2, meta) = run.load_model(init, &["stage2"], "a Stage-II checkpoint (stage2.flgn from train-stage2)")?;
    let keep_set = keep_set_of(&meta)?;
    let pruned = SkipMask::from_keep_set(stage2.config.n_blocks, &keep_set);
    let (state, rows) = pipeline::stage_distill(&run.cfg, &stage2, &pruned, run.seed)?;
    run.write("distill_loss.csv", distill_trace_csv(&rows))?;
    let extra = json!({ "keep_set": keep_set, "steps": run.cfg.distill.steps });
    let p = run.save_model("generator.flgn", &state.generator, "generator", run.cfg.distill.iterations, extra)?;
    println!("distilled {}-step generator; wrote {}", run.cfg.distill.steps, p.display());
    Ok(())
}

fn sample(run: &Run, init: Option<&Path>, steps: Option<usize>, n: Option<usize>) -> Result<()> {
    let (params, meta) = run.load_model(init, &["base", "stage2", "generator"], "a model checkpoint")?;
    let heldout = pipeline::heldout_set(&run.cfg, run.seed)?;
    let labels = pipeline::eval_labels(&heldout, n.unwrap_or(run.cfg.eval.n_samples));
    let seed = stage_seed(run.seed, "sample");
    let (samples, how) = if meta.get("stage").and_then(Value::as_str) == Some("generator") {
        let mask = SkipMask::from_keep_set(params.config.n_blocks, &keep_set_of(&meta)?);
        let k = steps.or_else(|| meta.get("steps").and_then(Value::as_u64).map(|k| k as usize)).unwrap_or(run.cfg.distill.steps);
        (pipeline::sample_few_step(&params, &labels, k, &mask, seed)?, format!("{k}-step pruned generator"))
    } else {
        let k = steps.unwrap_or(run.cfg.eval.teacher_steps);
        let full = SkipMask::none(params.config.n_blocks);
        let w = run.cfg.eval.teacher_cfg;
        (pipeline::sample_euler(&params, &labels, k, w, &full, seed)?, format!("{k}-step Euler, guidance {w}"))
    };
    let named = samples.into_iter().enumerate().map(|(i, s)| (format!("sample/{i}"), s)).collect();
    let ck = Checkpoint::new(named, json!({ "kind": "samples", "labels": labels, "sampler": how, "seed": run.seed }));
    let p = run.path("samples.flgn");
    ck.save(&p)?;
    println!("{} samples ({how}); wrote {}", labels.len(), p.display());
    Ok(())
}

fn eval(run: &Run, samples: Option<&Path>) -> Result<()> {
    let path = samples.map(Path::to_path_buf).unwrap_or_else(|| run.path("samples.flgn"));
    if !path.exists() {
        return Err(Error::Precondition(format!("sample file {} not found; run `sample` first", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    let xs: Vec<Tensor> = ck.tensors.into_iter().map(|(_, t)| t).collect();
    let heldout = pipeline::heldout_set(&run.cfg, run.seed)?;
    let report = MetricReport::evaluate(&xs, &pipeline::heldout_tensors(&heldout), run.cfg.fingerprint())?;
    let p = run.write_json("metrics.json", &report)?;
    println!("energy distance {:.4}; wrote {}", report.energy_distance, p.display());
    Ok(())
}

fn sweep(run: &mut Run, jobs: Option<usize>) -> Result<()> {
    if let Some(j) = jobs {
        run.cfg.sweep.jobs = j;
    }
    let cells = codistill::sweep::run_sweep(&run.cfg, run.seed)?;
    run.write("sweep.csv", sweep_csv(&cells))?;
    run.write("sweep_surface.dat", sweep_surface(&cells, &run.cfg.sweep.steps, &run.cfg.sweep.retention))?;
    run.write_json("sweep_cells.json", &cells)?;
    let failed = cells.iter().filter(|c| c.metrics.is_err()).count();
    println!("{} cells ({failed} failed); wrote {}", cells.len(), run.path("sweep.csv").display());
    Ok(())
}

fn full_pipeline(run: &Run) -> Result<()> {
    let result = pipeline::run_pipeline(&run.cfg, run.seed)?;
    let r = &result.report;
    let extra = json!({ "keep_set": r.importance.keep_set });
    run.save_model("base.flgn", &result.base, "base", result.base_trace.len(), json!({}))?;
    run.save_model("stage2.flgn", &result.stage2, "stage2", result.stage2_trace.len(), extra.clone())?;
    let gen_extra = json!({ "keep_set": r.importance.keep_set, "steps": run.cfg.distill.steps });
    run.save_model("generator.flgn", &result.generator, "generator", run.cfg.distill.iterations, gen_extra)?;
    run.write("base_loss.csv", loss_trace_csv(&result.base_trace))?;
    run.write("stage2_loss.csv", stage2_trace_csv(&result.stage2_trace))?;
    run.write("distill_loss.csv", distill_trace_csv(&result.distill_trace))?;
    run.write("importance.csv", r.importance.to_csv())?;
    run.write_json("importance.json", &r.importance.sidecar())?;
    let p = run.write_json("report.json", r)?;
    println!(
        "energy distance: untrained {:.4}, distilled {:.4}, teacher {:.4}; speedup {:.2}x; wrote {}",
        r.untrained_pruned.energy_distance,
        r.distilled.energy_distance,
        r.teacher.energy_distance,
        r.speedup,
        p.display()
    );
    Ok(())
}

fn gradcheck(config: Option<&Path>, out: Option<&Path>) -> Result<bool> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let entries = codistill::gradcheck::run_suite()?;
    let mut ok = true;
    for e in &entries {
        ok &= e.report.pass;
        println!(
            "{:<24} max rel error {:.3e} over {} entries: {}",
            e.name,
            e.report.max_rel_error,
            e.report.checked,
            if e.report.pass { "ok" } else { "FAILED" }
        );
    }
    let dir = resolve_out(out, &cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let p = dir.join("gradcheck.json");
    std::fs::write(&p, serde_json::to_string_pretty(&entries).expect("reports serialize") + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(ok)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(c) => gen_data(&Run::new(&c)?),
        Command::TrainBase(c) => train_base(&Run::new(&c)?),
        Command::ScoreBlocks { common, init } => score_blocks(&Run::new(&common)?, init.as_deref()),
        Command::TrainStage2 { common, init, keep } => train_stage2(&Run::new(&common)?, init.as_deref(), keep.as_deref()),
        Command::Distill { common, init } => distill(&Run::new(&common)?, init.as_deref()),
        Command::Sample { common, init, steps, n } => sample(&Run::new(&common)?, init.as_deref(), steps, n),
        Command::Eval { common, samples } => eval(&Run::new(&common)?, samples.as_deref()),
        Command::Sweep { common, jobs } => sweep(&mut Run::new(&common)?, jobs),
        Command::Pipeline(c) => full_pipeline(&Run::new(&c)?),
        Command::Gradcheck { config, out } => return gradcheck(config.as_deref(), out.as_deref()),
    }?;
    Ok(true)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
