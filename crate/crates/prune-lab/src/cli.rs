//! Command-line driver: train, diagnose, sweep, compress, report.
//!
//! Every run is parameterized by a single TOML config whose hash is stamped
//! onto each artifact; `report` refuses to merge artifacts from different
//! configs. Exit codes: 0 success, 2 config error, 3 training failure,
//! 4 checkpoint/config mismatch, 5 plan error, 6 report inconsistency.

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::allocation::{self, AllocError};
use crate::model::{Model, ModelConfig, ModelError};
use crate::pruning::Selector;
use crate::report::{self, ReportError};
use crate::sensitivity::{self, SensError};
use crate::task::{self, TaskSpec};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;
pub const EXIT_PLAN: i32 = 5;
pub const EXIT_REPORT: i32 = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 300, lr: 0.5, batch: 16 }
    }
}

/// Top-level run configuration. Unset fields take the documented defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub sweep_grid: Vec<f64>,
    /// Training items used for gradient-based diagnostics.
    pub diagnostic_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: "out".into(),
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            sweep_grid: sensitivity::default_grid(),
            diagnostic_samples: 64,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.task.validate().map_err(|e| e.to_string())?;
        if self.model.vocab_size != self.task.vocab_size {
            return Err(format!(
                "model vocab_size {} != task vocab_size {}",
                self.model.vocab_size, self.task.vocab_size
            ));
        }
        if self.model.d_in != self.task.d_in {
            return Err(format!(
                "model d_in {} != task d_in {}",
                self.model.d_in, self.task.d_in
            ));
        }
        if self.task.t_max * self.task.frames_per_token > self.model.max_src_len {
            return Err("task frame length can exceed model max_src_len".into());
        }
        if self.task.t_max + 1 > self.model.max_tgt_len {
            return Err("task transcript length can exceed model max_tgt_len".into());
        }
        if self.train.steps == 0 || self.train.batch == 0 {
            return Err("train.steps and train.batch must be positive".into());
        }
        if self.sweep_grid.is_empty()
            || self.sweep_grid.iter().any(|&r| !(0.0..=1.0).contains(&r))
        {
            return Err("sweep_grid must be nonempty with entries in [0, 1]".into());
        }
        if self.diagnostic_samples == 0 {
            return Err("diagnostic_samples must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepScope {
    Global,
    Side,
    LayerBlocks,
    Components,
}

#[derive(Debug, Parser)]
#[command(name = "prune-lab", about = "magnitude-pruning laboratory for a toy speech transformer")]
pub struct Cli {
    /// Path to the run config TOML; defaults apply if omitted.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    /// Output directory override (defaults to the config's out_dir).
    #[arg(long, global = true)]
    pub out: Option<std::path::PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the dataset, train the dense model, save a checkpoint.
    Train,
    /// First- and second-order sensitivity diagnostics on a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<std::path::PathBuf>,
    },
    /// Sparsity sweep over a selector family.
    Sweep {
        #[arg(long)]
        checkpoint: Option<std::path::PathBuf>,
        #[arg(long, value_enum, default_value = "components")]
        scope: SweepScope,
    },
    /// Apply a sparsity plan and write the pruned checkpoint plus costs.
    Compress {
        #[arg(long)]
        checkpoint: Option<std::path::PathBuf>,
        /// Use the fixed per-component recipe.
        #[arg(long, conflicts_with_all = ["plan", "target"])]
        recipe: bool,
        /// Load a plan file instead of deriving one.
        #[arg(long)]
        plan: Option<std::path::PathBuf>,
        /// Derive a greedy plan from a prior `sweep` run at this overall sparsity.
        #[arg(long, conflicts_with = "plan")]
        target: Option<f64>,
        /// Largest tolerated WER degradation (points) for greedy allocation.
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
    },
    /// Merge all artifacts in the output directory into report.json.
    Report,
}

fn fail(code: i32, msg: &str) -> i32 {
    eprintln!("error: {msg}");
    code
}

fn model_exit(e: &ModelError) -> i32 {
    match e {
        ModelError::Diverged(_) => EXIT_TRAINING,
        ModelError::InvalidConfig(_) => EXIT_CONFIG,
        _ => EXIT_MISMATCH,
    }
}

fn sens_exit(e: &SensError) -> i32 {
    match e {
        SensError::Model(m) => model_exit(m),
        SensError::Prune(_) => EXIT_PLAN,
        _ => EXIT_CONFIG,
    }
}

pub fn run(cli: Cli) -> i32 {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return fail(EXIT_CONFIG, "--jobs must be positive");
        }
        // ignore the error if a pool already exists (tests call run repeatedly)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let cfg = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => return fail(EXIT_CONFIG, &e),
        },
        None => RunConfig::default(),
    };
    let out_dir = cli.out.clone().unwrap_or_else(|| std::path::PathBuf::from(&cfg.out_dir));
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        return fail(EXIT_CONFIG, &format!("cannot create {}: {e}", out_dir.display()));
    }
    let hash = report::config_hash(&cfg);
    match cli.command {
        Command::Train => cmd_train(&cfg, &out_dir, &hash),
        Command::Diagnose { checkpoint } => cmd_diagnose(&cfg, &out_dir, &hash, checkpoint),
        Command::Sweep { checkpoint, scope } => cmd_sweep(&cfg, &out_dir, &hash, checkpoint, scope),
        Command::Compress { checkpoint, recipe, plan, target, epsilon } => {
            cmd_compress(&cfg, &out_dir, &hash, checkpoint, recipe, plan, target, epsilon)
        }
        Command::Report => cmd_report(&out_dir),
    }
}

fn load_model(
    cfg: &RunConfig,
    out_dir: &std::path::Path,
    checkpoint: Option<std::path::PathBuf>,
) -> Result<Model, (i32, String)> {
    let path = checkpoint.unwrap_or_else(|| out_dir.join("model.ckpt"));
    let model = Model::load_checkpoint(&path).map_err(|e| (EXIT_MISMATCH, e.to_string()))?;
    if model.config != cfg.model {
        return Err((
            EXIT_MISMATCH,
            format!("checkpoint {} was built under a different model config", path.display()),
        ));
    }
    Ok(model)
}

fn cmd_train(cfg: &RunConfig, out_dir: &std::path::Path, hash: &str) -> i32 {
    let task = match task::generate(&cfg.task) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    let mut model = match Model::build(cfg.model.clone()) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    let curve = match model.train(
        &task.train.items,
        cfg.train.steps,
        cfg.train.lr,
        cfg.train.batch,
        cfg.seed,
    ) {
        Ok(c) => c,
        Err(e) => return fail(model_exit(&e), &e.to_string()),
    };
    if let Err(e) = model.save_checkpoint(&out_dir.join("model.ckpt")) {
        return fail(EXIT_CONFIG, &e.to_string());
    }
    let mut csv = String::from("step,mean_nll\n");
    for (i, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i, report::sig6(*l)));
    }
    if let Err(e) = report::write_artifact(&out_dir.join("train.csv"), csv.as_bytes(), "train", hash)
    {
        return fail(EXIT_CONFIG, &e.to_string());
    }
    let max_len = cfg.model.max_tgt_len - 1;
    let clean = sensitivity::evaluate_split(&model, &task.test_clean.items, max_len);
    let other = sensitivity::evaluate_split(&model, &task.test_other.items, max_len);
    match (clean, other) {
        (Ok(c), Ok(o)) => {
            println!(
                "trained {} steps, final nll {}, wer clean {}% other {}%",
                cfg.train.steps,
                report::sig6(*curve.last().unwrap()),
                report::pct2(c.wer_pct()),
                report::pct2(o.wer_pct()),
            );
            0
        }
        (c, o) => {
            let e = c.err().or(o.err()).unwrap();
            fail(sens_exit(&e), &e.to_string())
        }
    }
}

fn cmd_diagnose(
    cfg: &RunConfig,
    out_dir: &std::path::Path,
    hash: &str,
    checkpoint: Option<std::path::PathBuf>,
) -> i32 {
    let model = match load_model(cfg, out_dir, checkpoint) {
        Ok(m) => m,
        Err((code, e)) => return fail(code, &e),
    };
    let task = match task::generate(&cfg.task) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    let registry = model.registry();
    let mut entries = Vec::new();
    for (split, items) in [("clean", &task.test_clean.items), ("other", &task.test_other.items)] {
        let n = cfg.diagnostic_samples.min(items.len());
        match sensitivity::side_sensitivities(&model, &registry, &items[..n], split) {
            Ok(e) => entries.extend(e),
            Err(e) => return fail(sens_exit(&e), &e.to_string()),
        }
    }
    let csv = report::sensitivity_csv(&entries);
    if let Err(e) =
        report::write_artifact(&out_dir.join("sensitivity.csv"), csv.as_bytes(), "sensitivity", hash)
    {
        return fail(EXIT_CONFIG, &e.to_string());
    }
    for e in &entries {
        println!(
            "{} ({}): s_grad {} s_fisher {}",
            e.module,
            e.split,
            report::sig6(e.s_g),
            report::sig6(e.s_h)
        );
    }
    0
}

fn cmd_sweep(
    cfg: &RunConfig,
    out_dir: &std::path::Path,
    hash: &str,
    checkpoint: Option<std::path::PathBuf>,
    scope: SweepScope,
) -> i32 {
    let model = match load_model(cfg, out_dir, checkpoint) {
        Ok(m) => m,
        Err((code, e)) => return fail(code, &e),
    };
    let task = match task::generate(&cfg.task) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    let registry = model.registry();
    let max_len = cfg.model.max_tgt_len - 1;
    let clean = &task.test_clean.items;
    let other = &task.test_other.items;
    let result = match scope {
        SweepScope::Global => sensitivity::component_sweep(
            &model,
            &registry,
            &[("global".into(), Selector::global_weights())],
            &cfg.sweep_grid,
            clean,
            other,
            max_len,
        ),
        SweepScope::Side => sensitivity::component_sweep(
            &model,
            &registry,
            &[
                ("encoder".into(), Selector::side_weights(crate::model::Side::Encoder)),
                ("decoder".into(), Selector::side_weights(crate::model::Side::Decoder)),
            ],
            &cfg.sweep_grid,
            clean,
            other,
            max_len,
        ),
        SweepScope::LayerBlocks => {
            let rho = cfg.sweep_grid[cfg.sweep_grid.len() / 2];
            sensitivity::layer_block_sweep(&model, &registry, rho, clean, other, max_len)
        }
        SweepScope::Components => sensitivity::component_sweep(
            &model,
            &registry,
            &sensitivity::component_selectors(),
            &cfg.sweep_grid,
            clean,
            other,
            max_len,
        ),
    };
    let result = match result {
        Ok(r) => r,
        Err(e) => return fail(sens_exit(&e), &e.to_string()),
    };
    let csv = report::sweep_csv(&result);
    let json = serde_json::to_vec_pretty(&result).expect("sweep serializes");
    let w1 = report::write_artifact(&out_dir.join("sweep.csv"), csv.as_bytes(), "sweep", hash);
    let w2 = report::write_artifact(&out_dir.join("sweep.json"), &json, "sweep", hash);
    if let Err(e) = w1.and(w2) {
        return fail(EXIT_CONFIG, &e.to_string());
    }
    println!(
        "swept {} cells, baseline wer other {}%",
        result.cells.len(),
        report::pct2(result.baseline_other.wer_pct()),
    );
    0
}

#[allow(clippy::too_many_arguments)]
fn cmd_compress(
    cfg: &RunConfig,
    out_dir: &std::path::Path,
    hash: &str,
    checkpoint: Option<std::path::PathBuf>,
    recipe: bool,
    plan_path: Option<std::path::PathBuf>,
    target: Option<f64>,
    epsilon: f64,
) -> i32 {
    let mut model = match load_model(cfg, out_dir, checkpoint) {
        Ok(m) => m,
        Err((code, e)) => return fail(code, &e),
    };
    let task = match task::generate(&cfg.task) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    let registry = model.registry();
    let plan = if recipe {
        allocation::paper_recipe(cfg.model.dec_layers)
    } else if let Some(path) = plan_path {
        match allocation::load_plan(&path) {
            Ok(p) => p,
            Err(e) => return fail(EXIT_PLAN, &e.to_string()),
        }
    } else if let Some(target) = target {
        let sweep_path = out_dir.join("sweep.json");
        let sweep: sensitivity::SweepResult = match std::fs::read(&sweep_path)
            .map_err(|e| e.to_string())
            .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()))
        {
            Ok(s) => s,
            Err(e) => {
                return fail(EXIT_PLAN, &format!("greedy plan needs {}: {e}", sweep_path.display()))
            }
        };
        match allocation::greedy_allocate(&sweep, &registry, target, epsilon) {
            Ok(p) => p,
            Err(e) => return fail(EXIT_PLAN, &e.to_string()),
        }
    } else {
        return fail(EXIT_PLAN, "compress needs one of --recipe, --plan, or --target");
    };
    if !plan.feasible {
        eprintln!("warning: target unreachable within epsilon; applying maximal admissible plan");
    }
    let max_len = cfg.model.max_tgt_len - 1;
    let baseline_rates = match sensitivity::evaluate_split(&model, &task.test_other.items, max_len)
    {
        Ok(r) => r,
        Err(e) => return fail(sens_exit(&e), &e.to_string()),
    };
    let baseline_cost = crate::metrics::cost_report(&model, &registry);
    let (masks, cost) = match allocation::apply_plan(&mut model, &registry, &plan) {
        Ok(r) => r,
        Err(e) => {
            let code = match &e {
                AllocError::Model(m) => model_exit(m),
                _ => EXIT_PLAN,
            };
            return fail(code, &e.to_string());
        }
    };
    if let Err(e) = model.save_checkpoint(&out_dir.join("model_pruned.ckpt")) {
        return fail(EXIT_CONFIG, &e.to_string());
    }
    if let Err(e) = allocation::save_plan(&plan, &out_dir.join("plan.toml")) {
        return fail(EXIT_PLAN, &e.to_string());
    }
    let pruned_rates = match sensitivity::evaluate_split(&model, &task.test_other.items, max_len) {
        Ok(r) => r,
        Err(e) => return fail(sens_exit(&e), &e.to_string()),
    };
    let pruned_count: usize = masks.iter().map(|m| m.pruned_count()).sum();
    let planned_sparsity = pruned_count as f64 / cost.total_params as f64;
    let baseline_row = report::CompressRow {
        wer_pct: baseline_rates.wer_pct(),
        cer_pct: baseline_rates.cer_pct(),
        sparsity_pct: 0.0,
        cost: baseline_cost,
    };
    let pruned_row = report::CompressRow {
        wer_pct: pruned_rates.wer_pct(),
        cer_pct: pruned_rates.cer_pct(),
        sparsity_pct: planned_sparsity * 100.0,
        cost: cost.clone(),
    };
    let csv = report::cost_csv(&baseline_row, &pruned_row);
    if let Err(e) = report::write_artifact(&out_dir.join("cost.csv"), csv.as_bytes(), "cost", hash) {
        return fail(EXIT_CONFIG, &e.to_string());
    }
    println!(
        "pruned {} of {} params, overall sparsity {}%, wer other {}% -> {}%",
        pruned_count,
        cost.total_params,
        report::pct2(planned_sparsity * 100.0),
        report::pct2(baseline_rates.wer_pct()),
        report::pct2(pruned_rates.wer_pct()),
    );
    0
}

fn cmd_report(out_dir: &std::path::Path) -> i32 {
    match report::merge_report(out_dir) {
        Ok(r) => {
            println!("merged {} artifacts under config {}", r.artifacts.len(), r.config_hash);
            0
        }
        Err(e @ ReportError::HashMismatch { .. }) => fail(EXIT_REPORT, &e.to_string()),
        Err(e) => fail(EXIT_CONFIG, &e.to_string()),
    }
}
