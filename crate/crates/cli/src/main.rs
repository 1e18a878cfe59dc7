//! `trajllm`: the full pipeline behind one executable.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajllm::analysis::{
    self, attention_probe, cosine_similarity_matrix, csv_comment, embed_trajectories, mean_off_diagonal,
    pca_project, sample_segments, Representation,
};
use trajllm::backbone::{synthetic_corpus, synthetic_pretrain, ModelConfig, PretrainConfig};
use trajllm::config::{PolicyKind, RunConfig};
use trajllm::data::{self, curate, dataset_stats, read_trajectories, read_windows, write_trajectories, write_windows};
use trajllm::env::{self, Baselines};
use trajllm::par::Exec;
use trajllm::rollout::{evaluate, rtg_range, rtg_sweep, EvalSetup, ModelPolicy};
use trajllm::tensor::Tensor;
use trajllm::train::{
    ablation_run, checkpoint_digest, load_checkpoint, save_checkpoint, scale_sweep, train, AblationBase,
    AblationSpec, CheckpointMeta, TrainEval, TrainOptions, ABLATION_CSV_HEADER,
};
use trajllm::trajmod::DecisionModel;
use trajllm::{Error, Result};

const SEED_ENV: &str = "TRAJLLM_SEED";

#[derive(Parser, Debug)]
#[command(name = "trajllm", version, about = "Return-conditioned trajectory modelling on a 2D maze")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run config (TOML). Missing sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed and the TRAJLLM_SEED variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out the behaviour policy and write a trajectory file.
    Collect {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "trajectories.jsonl")]
        out: PathBuf,
    },
    /// Filter, reweight and window a trajectory file.
    Curate {
        #[arg(long, default_value = "trajectories.jsonl")]
        input: PathBuf,
        #[arg(long, default_value = "windows.bin")]
        out: PathBuf,
    },
    /// Train on a window file; writes metrics.csv and checkpoints.
    Train {
        #[arg(long, default_value = "windows.bin")]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint at one commanded return.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rtg: Option<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Per-episode CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a range of commanded returns.
    SweepRtg {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires_all = ["to", "step"])]
        from: Option<f64>,
        #[arg(long, requires_all = ["from", "step"])]
        to: Option<f64>,
        #[arg(long, requires_all = ["from", "to"])]
        step: Option<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "rtg_sweep.csv")]
        out: PathBuf,
    },
    /// Model-size x data-size grid plus pretrain on/off rows.
    SweepScale {
        #[arg(long, default_value = "scale_sweep.csv")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Similarity matrices, layerwise similarity and PCA coordinates.
    AnalyzeEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trajectory file; freshly collected when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// First-layer head-averaged attention on a probe string.
    AttentionProbe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value = "attention")]
        out: PathBuf,
    },
    /// Next-token pretraining of the backbone on a synthetic corpus.
    Pretrain {
        #[arg(long, default_value = "pretrained.ckpt")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print the normalised config with every default filled in.
    ValidateConfig,
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    exec: Exec,
    hash: String,
    explicit_config: bool,
}

impl Ctx {
    fn load(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => trajllm::config::validate_config(path)?,
            None => RunConfig::default(),
        };
        let seed = resolve_seed(common.seed, cfg.seed, std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.seed = Some(seed);
        let hash = cfg.hash();
        Ok(Self {
            cfg,
            seed,
            exec: if common.sequential { Exec::Sequential } else { Exec::Parallel },
            hash,
            explicit_config: common.config.is_some(),
        })
    }

    fn stamp(&self) -> String {
        format!("# config_hash={} seed={}\n", self.hash, self.seed)
    }

    fn baselines(&self) -> Result<Baselines> {
        match self.cfg.stored_baselines() {
            Some(b) => Ok(b),
            None => env::baselines(&self.cfg.maze, self.cfg.evaluation.baseline_episodes, self.seed, self.exec),
        }
    }

    fn load_model(&self, path: &Path) -> Result<DecisionModel> {
        let expected = self.explicit_config.then_some(&self.cfg.model);
        Ok(load_checkpoint(path, expected)?.0)
    }

    fn eval_setup<'a>(&'a self, baselines: &'a Baselines) -> EvalSetup<'a> {
        EvalSetup {
            maze: &self.cfg.maze,
            baselines,
            max_steps: self.cfg.maze.max_steps,
            seed: self.seed.wrapping_add(1_000_003),
            exec: self.exec,
        }
    }

    fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            batch_size: self.cfg.pretrain.batch_size,
            lr: self.cfg.pretrain.lr,
            seed: self.seed,
            exec: self.exec,
            ..Default::default()
        }
    }
}

/// `--seed`, then the config, then the environment, then 0.
fn resolve_seed(flag: Option<u64>, config: Option<u64>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: {v:?}"))),
        None => Ok(0),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::load(&cli.common)?;
    match cli.command {
        Command::Collect { episodes, out } => collect(&ctx, episodes, &out),
        Command::Curate { input, out } => curate_cmd(&ctx, &input, &out),
        Command::Train { data, out, steps } => train_cmd(&ctx, &data, &out, steps),
        Command::Eval {
            checkpoint,
            rtg,
            episodes,
            out,
        } => eval_cmd(&ctx, &checkpoint, rtg, episodes, out.as_deref()),
        Command::SweepRtg {
            checkpoint,
            from,
            to,
            step,
            episodes,
            out,
        } => {
            let rtgs = match (from, to, step) {
                (Some(f), Some(t), Some(s)) => rtg_range(f, t, s)?,
                _ => ctx.cfg.evaluation.rtgs.clone(),
            };
            sweep_rtg(&ctx, &checkpoint, &rtgs, episodes, &out)
        }
        Command::SweepScale { out, steps } => sweep_scale(&ctx, &out, steps),
        Command::AnalyzeEmbeddings { checkpoint, data, out } => analyze(&ctx, &checkpoint, data.as_deref(), &out),
        Command::AttentionProbe { checkpoint, text, out } => probe(&ctx, checkpoint.as_deref(), text, &out),
        Command::Pretrain { out, steps } => pretrain(&ctx, &out, steps),
        Command::ValidateConfig => {
            print!("{}", ctx.cfg.to_toml());
            println!("# config_hash={}", ctx.hash);
            Ok(())
        }
    }
}

fn collect(ctx: &Ctx, episodes: Option<usize>, out: &Path) -> Result<()> {
    let mut coll = ctx.cfg.collection.clone();
    if let Some(n) = episodes {
        coll.episodes = n;
    }
    if coll.episodes == 0 {
        return Err(Error::config("--episodes", "must be at least 1"));
    }
    let data = coll.collect(&ctx.cfg.maze, ctx.seed, ctx.exec)?;
    let manifest = write_trajectories(out, &data, &ctx.cfg.maze.hash(), &ctx.hash, ctx.seed)?;
    let (m, sd) = env::return_stats(&data);
    println!(
        "wrote {} trajectories to {} (sha256 {}); return {m:.2}±{sd:.2}",
        manifest.count,
        out.display(),
        manifest.sha256
    );
    Ok(())
}

fn curate_cmd(ctx: &Ctx, input: &Path, out: &Path) -> Result<()> {
    let dataset = read_trajectories(input)?;
    let cur = &ctx.cfg.curation;
    let (windows, report) = curate(&dataset, cur, ctx.seed, ctx.exec)?;
    let manifest = write_windows(out, &windows, &ctx.cfg.maze.hash(), &ctx.hash, ctx.seed)?;
    let (kept, _) = data::filter_trajectories(&dataset, cur.epsilon);
    let stats = dataset_stats(&kept, &windows, cur.epsilon, 10.0);
    let mut hist_path = out.as_os_str().to_owned();
    hist_path.push(".rtg_hist.csv");
    let hist_path = PathBuf::from(hist_path);
    write(&hist_path, &format!("{}{}", ctx.stamp(), stats.initial_rtgs.to_csv()))?;
    println!(
        "kept {} / dropped {} episodes; wrote {} windows to {} (sha256 {})",
        report.kept,
        report.dropped,
        manifest.count,
        out.display(),
        manifest.sha256
    );
    println!("initial-RTG histogram: {}", hist_path.display());
    Ok(())
}

fn train_cmd(ctx: &Ctx, data: &Path, out: &Path, steps: Option<usize>) -> Result<()> {
    let windows = read_windows(data)?;
    let mut training = ctx.cfg.training.clone();
    if let Some(s) = steps {
        training.max_steps = Some(s);
    }
    let mut model = match &training.init {
        Some(init) => load_checkpoint(init, Some(&ctx.cfg.model))?.0,
        None => DecisionModel::new(&ctx.cfg.model, ctx.seed)?,
    };
    let eval = if training.eval_every > 0 {
        Some(TrainEval {
            maze: ctx.cfg.maze.clone(),
            baselines: ctx.baselines()?,
            seed: ctx.seed.wrapping_add(1_000_003),
        })
    } else {
        None
    };
    let opts = TrainOptions {
        mode: training.mode.unwrap_or(ctx.cfg.curation.mode),
        config: training,
        window: ctx.cfg.curation.window,
        seed: ctx.seed,
        exec: ctx.exec,
        eval,
        out_dir: Some(out.to_path_buf()),
        config_hash: ctx.hash.clone(),
    };
    let report = train(&mut model, &windows, &opts)?;
    println!(
        "trained {} steps on {} windows; final loss {:.6}",
        report.steps,
        windows.len(),
        report.final_loss().unwrap_or(f64::NAN)
    );
    if let (Some(r), Some(s), Some(step)) = (report.best_return, report.best_score, report.best_step) {
        println!("best evaluation at step {step}: return {r:.2}, score {s:.2}");
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn eval_cmd(ctx: &Ctx, checkpoint: &Path, rtg: Option<f64>, episodes: Option<usize>, out: Option<&Path>) -> Result<()> {
    let model = ctx.load_model(checkpoint)?;
    let baselines = ctx.baselines()?;
    let policy = ModelPolicy {
        model: &model,
        prompt: ctx.cfg.prompt_ids(&model.vocab),
        window: ctx.cfg.curation.window,
    };
    let rtg = rtg.unwrap_or(ctx.cfg.evaluation.initial_rtg);
    let rep = evaluate(
        &policy,
        &ctx.eval_setup(&baselines),
        rtg,
        episodes.unwrap_or(ctx.cfg.evaluation.episodes),
    )?;
    println!("{}", rep.summary());
    if let Some(path) = out {
        let mut s = ctx.stamp();
        s.push_str("episode,initial_rtg,return,steps,success\n");
        for (i, r) in rep.results.iter().enumerate() {
            s.push_str(&format!(
                "{i},{},{:.4},{},{}\n",
                r.initial_rtg, r.achieved_return, r.steps, r.success
            ));
        }
        write(path, &s)?;
    }
    Ok(())
}

fn sweep_rtg(ctx: &Ctx, checkpoint: &Path, rtgs: &[f64], episodes: Option<usize>, out: &Path) -> Result<()> {
    let model = ctx.load_model(checkpoint)?;
    let baselines = ctx.baselines()?;
    let policy = ModelPolicy {
        model: &model,
        prompt: ctx.cfg.prompt_ids(&model.vocab),
        window: ctx.cfg.curation.window,
    };
    let table = rtg_sweep(
        &policy,
        &ctx.eval_setup(&baselines),
        rtgs,
        episodes.unwrap_or(ctx.cfg.evaluation.episodes),
    )?;
    write(out, &format!("{}{}", ctx.stamp(), table.to_csv()))?;
    match table.spearman {
        Some(r) => println!("{} rows; spearman(commanded, achieved) = {r:.4}", table.rows.len()),
        None => println!("{} rows; spearman undefined", table.rows.len()),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn sweep_scale(ctx: &Ctx, out: &Path, steps: Option<usize>) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut training = cfg.training.clone();
    if let Some(s) = steps {
        training.max_steps = Some(s);
    }
    let base = AblationBase {
        maze: cfg.maze.clone(),
        curation: cfg.curation.clone(),
        training,
        baselines: ctx.baselines()?,
        episodes: cfg.collection.episodes,
        sigma: cfg.collection.sigma,
        pretrain_steps: cfg.pretrain.steps,
        seed: ctx.seed,
        exec: ctx.exec,
    };
    let template = AblationSpec {
        pretrain: false,
        noise: cfg.collection.policy == PolicyKind::Noisy,
        mode: cfg.curation.mode,
        model: cfg.model.clone(),
        data_size: 0,
    };
    let models: Vec<ModelConfig> = cfg
        .sweep
        .models
        .iter()
        .map(|&[d_model, n_layers, n_heads]| ModelConfig {
            d_model,
            n_layers,
            n_heads,
            ..cfg.model.clone()
        })
        .collect();
    let sweep = scale_sweep(&models, &cfg.sweep.data_sizes, &template, &base)?;
    let largest_data = cfg.sweep.data_sizes.iter().copied().max().unwrap_or(0);
    let mut pretrain_rows = Vec::new();
    for pretrain in [false, true] {
        let spec = AblationSpec {
            pretrain,
            data_size: largest_data,
            ..template.clone()
        };
        pretrain_rows.push(ablation_run(&spec, &base)?);
    }
    let report = sweep.monotonicity_report();
    let mut s = ctx.stamp();
    s.push_str(&format!("# {report}\n"));
    s.push_str(&sweep.to_csv());
    write(out, &s)?;
    let mut p = ctx.stamp();
    p.push_str(ABLATION_CSV_HEADER);
    p.push('\n');
    for r in &pretrain_rows {
        p.push_str(&r.csv_line());
        p.push('\n');
    }
    let pretrain_path = out.with_file_name("pretrain_ablation.csv");
    write(&pretrain_path, &p)?;
    println!("{report}");
    for r in &pretrain_rows {
        println!("pretrain={}: best return {:.2}", r.spec.pretrain, r.best_return);
    }
    println!("wrote {} and {}", out.display(), pretrain_path.display());
    Ok(())
}

fn analyze(ctx: &Ctx, checkpoint: &Path, data: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let model = ctx.load_model(checkpoint)?;
    let digest = checkpoint_digest(checkpoint)?;
    let dataset = match data {
        Some(p) => read_trajectories(p)?,
        None => env::collect(
            &cfg.maze,
            cfg.collection.policy(),
            cfg.analysis.trajectories,
            ctx.seed,
            ctx.exec,
        )?,
    };
    let segments = sample_segments(&dataset, cfg.analysis.trajectories, cfg.analysis.window, ctx.seed)?;
    let prompt = cfg.prompt_ids(&model.vocab);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut input_means = Vec::new();
    for mode in [Representation::PromptText, Representation::TrajModal] {
        let layers = embed_trajectories(&model, &prompt, &segments, mode, ctx.exec)?;
        let comment = |layer: &str| {
            csv_comment(&[
                ("checkpoint", digest.clone()),
                ("mode", mode.as_str().into()),
                ("layer", layer.into()),
                ("pooling", "mean-trajectory-tokens".into()),
                ("config_hash", ctx.hash.clone()),
                ("seed", ctx.seed.to_string()),
            ])
        };
        let mut means = Vec::with_capacity(layers.len());
        for (l, samples) in layers.iter().enumerate() {
            let vectors: Vec<Vec<f32>> = samples.iter().map(|s| s.vector.clone()).collect();
            let m = cosine_similarity_matrix(&vectors)?;
            means.push(mean_off_diagonal(&m));
            if l == 0 || l + 1 == layers.len() {
                let path = out.join(format!("similarity_{}_layer{l}.csv", mode.as_str()));
                write(&path, &analysis::matrix_csv(&comment(&l.to_string()), &m))?;
            }
            if cfg.analysis.pca && l == 0 {
                let pca = pca_project(&vectors)?;
                let path = out.join(format!("pca_{}_layer{l}.csv", mode.as_str()));
                write(&path, &analysis::pca_csv(&comment(&l.to_string()), &pca))?;
            }
        }
        let path = out.join(format!("layerwise_{}.csv", mode.as_str()));
        write(&path, &analysis::layerwise_csv(&comment("all"), &means))?;
        let rendered: Vec<String> = means.iter().map(|v| format!("{v:.4}")).collect();
        println!("{}: layerwise mean similarity [{}]", mode.as_str(), rendered.join(", "));
        input_means.push(means[0]);
    }
    println!(
        "input-layer gap (prompt-text minus traj-modal): {:.4}",
        input_means[0] - input_means[1]
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn attention_summary(a: &Tensor) -> String {
    let l = a.shape()[0];
    let first: f32 = (0..l).map(|i| a.row(i)[0]).sum::<f32>() / l as f32;
    let diag: f32 = (0..l).map(|i| a.row(i)[i]).sum::<f32>() / l as f32;
    format!("mean mass on first token {first:.4}, on current token {diag:.4}")
}

fn probe(ctx: &Ctx, checkpoint: Option<&Path>, text: Option<String>, out: &Path) -> Result<()> {
    let text = text.unwrap_or_else(|| ctx.cfg.analysis.probe.clone());
    let mut models = Vec::new();
    let random = DecisionModel::new(&ctx.cfg.model, ctx.seed)?;
    let mut pretrained = random.clone();
    let corpus = synthetic_corpus(
        &pretrained.vocab,
        ctx.cfg.pretrain.sequences,
        ctx.cfg.pretrain.sequence_len,
        ctx.seed,
    );
    synthetic_pretrain(
        &pretrained.backbone,
        &mut pretrained.params,
        &corpus,
        ctx.cfg.pretrain.steps,
        &ctx.pretrain_config(),
    )?;
    models.push(("random", random, "random-init".to_string()));
    models.push(("pretrained", pretrained, "synthetic-pretrained".to_string()));
    if let Some(path) = checkpoint {
        models.push(("checkpoint", ctx.load_model(path)?, checkpoint_digest(path)?));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, model, label) in &models {
        let a = attention_probe(model, &text)?;
        let comment = csv_comment(&[
            ("checkpoint", label.clone()),
            ("mode", "text".into()),
            ("layer", "0".into()),
            ("config_hash", ctx.hash.clone()),
            ("seed", ctx.seed.to_string()),
        ]);
        let rows: Vec<Vec<f64>> = (0..a.shape()[0])
            .map(|i| a.row(i).iter().map(|&v| v as f64).collect())
            .collect();
        write(&out.join(format!("attention_{name}.csv")), &analysis::matrix_csv(&comment, &rows))?;
        println!("{name}: {}", attention_summary(&a));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn pretrain(ctx: &Ctx, out: &Path, steps: Option<usize>) -> Result<()> {
    let steps = steps.unwrap_or(ctx.cfg.pretrain.steps);
    let mut model = DecisionModel::new(&ctx.cfg.model, ctx.seed)?;
    let corpus = synthetic_corpus(
        &model.vocab,
        ctx.cfg.pretrain.sequences,
        ctx.cfg.pretrain.sequence_len,
        ctx.seed,
    );
    let rep = synthetic_pretrain(&model.backbone, &mut model.params, &corpus, steps, &ctx.pretrain_config())?;
    let meta = CheckpointMeta {
        global_step: steps as u64,
        config_hash: ctx.hash.clone(),
        seed: ctx.seed,
    };
    save_checkpoint(out, &model, &meta)?;
    println!(
        "pretrained {steps} steps; held-out loss {:.4} -> {:.4}; wrote {}",
        rep.initial_heldout_loss,
        rep.final_heldout_loss,
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
