//! Command-line front end for the plan-tree training pipeline.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime error.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use plantree::env::{self, Problem};
use plantree::genadapter::mock::{MockBehavior, MockGenServer};
use plantree::genadapter::{GenClient, RemoteExpander};
use plantree::mcts;
use plantree::pipeline::{self, ExperimentConfig};
use plantree::prefdata::{self, PairStrategy};
use plantree::train::{self, StepObjective};
use plantree::value::{self, ValueLabel};
use plantree::{PolicyParams, ValueParams};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "plantree", version, about = "Plan-tree search and step-preference training on synthetic reasoning tasks")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory all artifacts are written to / read from.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate problems, search trees, and datasets for one round.
    Gen {
        /// Round whose search settings apply (1-based).
        #[arg(long, default_value_t = 1)]
        round: usize,
        /// Policy checkpoint driving expansion (default: uniform base).
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Value checkpoint guiding evaluation (default: seeded random init).
        #[arg(long)]
        value: Option<PathBuf>,
        /// Propose steps via a remote generator endpoint instead of the
        /// built-in policy (datasets are then limited to tree dumps).
        #[arg(long, env = "PLANTREE_GEN_ENDPOINT")]
        gen_endpoint: Option<String>,
        #[arg(long, env = "PLANTREE_GEN_MAX_IN_FLIGHT", default_value_t = 8)]
        gen_max_in_flight: usize,
    },
    /// Supervised fine-tuning on correct trajectories.
    Sft {
        #[arg(long, default_value_t = 1)]
        round: usize,
        /// Trajectory JSONL (default: <out-dir>/round<N>/sft.jsonl).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Starting checkpoint (default: zero-initialized base policy).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Preference optimization from step pairs or trajectory pairs.
    Apo {
        #[arg(long, default_value_t = 1)]
        round: usize,
        /// step-apo, step-dpo, or dpo.
        #[arg(long, default_value = "step-apo")]
        objective: String,
        /// Pair JSONL (default: <out-dir>/round<N>/pairs.jsonl).
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Re-extract pairs from these tree dumps with --pair-strategy
        /// instead of reading --pairs.
        #[arg(long)]
        trees: Option<PathBuf>,
        #[arg(long)]
        pair_strategy: Option<String>,
        /// Policy checkpoint used as both init and reference
        /// (default: <out-dir>/round<N>/policy_sft.json).
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the value model on tree-derived labels.
    ValueFit {
        #[arg(long, default_value_t = 1)]
        round: usize,
        #[arg(long)]
        trees: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy-decoding accuracy of a policy checkpoint.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        /// Problem JSONL (default: <out-dir>/problems_heldout.jsonl).
        #[arg(long)]
        problems: Option<PathBuf>,
    },
    /// Full multi-round pipeline.
    Pipeline,
    /// Dataset statistics table over the rounds present in the out dir.
    Stats {
        #[arg(long)]
        trees: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Re-run the search for one problem and print its tree dump as JSON.
    DumpTree {
        #[arg(long)]
        problem: String,
        #[arg(long, default_value_t = 1)]
        round: usize,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        value: Option<PathBuf>,
    },
    /// Serve the bundled deterministic mock generator endpoint.
    ServeMock {
        #[arg(long, default_value_t = 8731)]
        port: u16,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<pipeline::PipelineError> for CliError {
    fn from(e: pipeline::PipelineError) -> Self {
        match e {
            pipeline::PipelineError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match cli_config {
        Some(path) => ExperimentConfig::from_toml_file(path).map_err(CliError::from)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.validate().map_err(CliError::from)?;
    }
    Ok(cfg)
}

fn search_for_round(cfg: &ExperimentConfig, round: usize) -> plantree::SearchConfig {
    if round <= 1 {
        cfg.search_round1.clone()
    } else {
        cfg.search_round2.clone()
    }
}

fn round_dir(out_dir: &Path, round: usize) -> PathBuf {
    out_dir.join(format!("round{round}"))
}

fn load_policy_or_base(path: &Option<PathBuf>, dim: usize) -> Result<PolicyParams, CliError> {
    match path {
        Some(p) => PolicyParams::load(p).map_err(CliError::runtime),
        None => Ok(PolicyParams::zeros(dim)),
    }
}

fn load_value_or_init(
    path: &Option<PathBuf>,
    cfg: &ExperimentConfig,
) -> Result<ValueParams, CliError> {
    match path {
        Some(p) => ValueParams::load(p).map_err(CliError::runtime),
        None => Ok(pipeline::round1_value_init(cfg)),
    }
}

fn load_problem_pools(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(Vec<Problem>, Vec<Problem>), CliError> {
    let train_path = out_dir.join("problems_train.jsonl");
    let held_path = out_dir.join("problems_heldout.jsonl");
    if train_path.exists() && held_path.exists() {
        Ok((
            env::load_problems(&train_path).map_err(CliError::runtime)?,
            env::load_problems(&held_path).map_err(CliError::runtime)?,
        ))
    } else {
        let env_kind = cfg.env_kind().map_err(CliError::from)?;
        let difficulty = cfg.difficulty_level().map_err(CliError::from)?;
        let all = env::generate_problems(env_kind, cfg.seed, cfg.n_train + cfg.n_heldout, difficulty);
        let (pool, heldout) = all.split_at(cfg.n_train);
        Ok((pool.to_vec(), heldout.to_vec()))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.config, cli.seed)?;
    let out_dir = cli.out_dir.clone();
    match cli.command {
        Command::Gen {
            round,
            policy,
            value,
            gen_endpoint,
            gen_max_in_flight,
        } => {
            std::fs::create_dir_all(&out_dir).map_err(CliError::runtime)?;
            let (pool, heldout) = load_problem_pools(&cfg, &out_dir)?;
            env::save_problems(&pool, &out_dir.join("problems_train.jsonl"))
                .map_err(CliError::runtime)?;
            env::save_problems(&heldout, &out_dir.join("problems_heldout.jsonl"))
                .map_err(CliError::runtime)?;

            let problems = if round == 1 {
                pipeline::round_subset(&pool, cfg.round1_subset_frac, cfg.seed)
            } else {
                pool
            };
            let search = search_for_round(&cfg, round);
            let round_seed =
                plantree::features::derive_seed(cfg.seed, &format!("round-{round}"));
            let dir = round_dir(&out_dir, round);
            std::fs::create_dir_all(&dir).map_err(CliError::runtime)?;

            let trees = if let Some(endpoint) = gen_endpoint {
                let client = GenClient::new(endpoint).with_max_in_flight(gen_max_in_flight);
                let expander = RemoteExpander::new(&client);
                let value_params = load_value_or_init(&value, &cfg)?;
                let mut trees = Vec::with_capacity(problems.len());
                for p in &problems {
                    let config = plantree::SearchConfig {
                        rng_seed: plantree::features::derive_seed(round_seed, &p.id.0),
                        ..search.clone()
                    };
                    trees.push(
                        mcts::run_search_with(p, &expander, &value_params, &config)
                            .map_err(CliError::runtime)?,
                    );
                }
                trees
            } else {
                let policy_params = load_policy_or_base(&policy, cfg.feature_dim)?;
                let value_params = load_value_or_init(&value, &cfg)?;
                pipeline::generate_trees(&problems, &policy_params, &value_params, &search, round_seed)
                    .map_err(CliError::from)?
            };

            pipeline::save_trees(&trees, &dir.join("trees.jsonl")).map_err(CliError::from)?;
            let strategy: PairStrategy = cfg.strategy().map_err(CliError::from)?;
            let pairs = prefdata::extract_pairs_all(&trees, strategy, round_seed);
            prefdata::save_pairs(&pairs, &dir.join("pairs.jsonl")).map_err(CliError::runtime)?;
            let sft = prefdata::extract_sft(&trees, cfg.sft_max_per_problem, round_seed);
            prefdata::save_sft(&sft, &dir.join("sft.jsonl")).map_err(CliError::runtime)?;
            let stats = prefdata::compute_stats(&trees, &pairs);
            std::fs::write(
                dir.join("stats.json"),
                serde_json::to_string_pretty(&stats).map_err(CliError::runtime)?,
            )
            .map_err(CliError::runtime)?;
            println!(
                "round {round}: {} trees, {} pairs, {} trajectories",
                trees.len(),
                pairs.len(),
                sft.len()
            );
            println!("{}", prefdata::render_stats_table(&[(round, stats)]));
            Ok(())
        }

        Command::Sft {
            round,
            data,
            base,
            out,
        } => {
            let data_path = data.unwrap_or_else(|| round_dir(&out_dir, round).join("sft.jsonl"));
            let trajs = prefdata::load_sft(&data_path).map_err(CliError::runtime)?;
            let base_policy = load_policy_or_base(&base, cfg.feature_dim)?;
            let mut sft_cfg = cfg.sft.clone();
            sft_cfg.seed = plantree::features::derive_seed(cfg.seed, "sft");
            let (fitted, report) =
                train::sft_fit(&base_policy, &trajs, &sft_cfg).map_err(CliError::runtime)?;
            let out_path =
                out.unwrap_or_else(|| round_dir(&out_dir, round).join("policy_sft.json"));
            ensure_parent(&out_path)?;
            fitted.save(&out_path).map_err(CliError::runtime)?;
            report
                .save_csv(&out_path.with_file_name("sft_loss.csv"))
                .map_err(CliError::runtime)?;
            let last = report.epochs.last().unwrap();
            println!(
                "sft: {} trajectories, final loss {:.4}, step accuracy {:.3} -> {}",
                trajs.len(),
                last.mean_loss,
                last.pair_accuracy,
                out_path.display()
            );
            Ok(())
        }

        Command::Apo {
            round,
            objective,
            pairs,
            trees,
            pair_strategy,
            policy,
            out,
        } => {
            let policy_path =
                policy.unwrap_or_else(|| round_dir(&out_dir, round).join("policy_sft.json"));
            let base = PolicyParams::load(&policy_path).map_err(CliError::runtime)?;
            let reference = base.snapshot();
            let mut apo_cfg = cfg.apo.clone();
            apo_cfg.seed = plantree::features::derive_seed(cfg.seed, "apo");

            let round_seed = plantree::features::derive_seed(cfg.seed, &format!("round-{round}"));
            let objective_slug = objective.to_ascii_lowercase();
            let max_depth = search_for_round(&cfg, round).max_depth;
            let (fitted, report) = match objective_slug.as_str() {
                "step-apo" | "step-dpo" => {
                    let step_objective = if objective_slug == "step-apo" {
                        StepObjective::StepApo
                    } else {
                        StepObjective::StepDpo
                    };
                    let pair_records = if let Some(trees_path) = &trees {
                        // re-extract from tree dumps under the requested strategy
                        let strategy: PairStrategy = pair_strategy
                            .as_deref()
                            .unwrap_or(&cfg.pair_strategy)
                            .parse()
                            .map_err(CliError::usage)?;
                        let dumps =
                            pipeline::load_tree_dumps(trees_path).map_err(CliError::from)?;
                        let (pool, heldout) = load_problem_pools(&cfg, &out_dir)?;
                        let all: Vec<Problem> =
                            pool.into_iter().chain(heldout).collect();
                        prefdata::extract_pairs_from_dumps(
                            &dumps, &all, max_depth, strategy, round_seed,
                        )
                    } else {
                        let path = pairs
                            .unwrap_or_else(|| round_dir(&out_dir, round).join("pairs.jsonl"));
                        prefdata::load_pairs(&path).map_err(CliError::runtime)?
                    };
                    train::fit_preference(&base, &reference, &pair_records, &apo_cfg, step_objective)
                        .map_err(CliError::runtime)?
                }
                "dpo" => {
                    let trees_path = trees
                        .unwrap_or_else(|| round_dir(&out_dir, round).join("trees.jsonl"));
                    let dumps = pipeline::load_tree_dumps(&trees_path).map_err(CliError::from)?;
                    let (pool, heldout) = load_problem_pools(&cfg, &out_dir)?;
                    let all: Vec<Problem> = pool.into_iter().chain(heldout).collect();
                    let traj_pairs = prefdata::extract_trajectory_pairs_from_dumps(
                        &dumps,
                        &all,
                        cfg.dpo_pairs_per_problem,
                        max_depth,
                        round_seed,
                    );
                    train::dpo_fit(&base, &reference, &traj_pairs, &apo_cfg)
                        .map_err(CliError::runtime)?
                }
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown objective `{other}` (expected step-apo, step-dpo, or dpo)"
                    )));
                }
            };
            let out_path = out.unwrap_or_else(|| {
                round_dir(&out_dir, round).join(format!(
                    "policy_{}.json",
                    objective_slug.replace('-', "_")
                ))
            });
            ensure_parent(&out_path)?;
            fitted.save(&out_path).map_err(CliError::runtime)?;
            report
                .save_csv(&out_path.with_file_name(format!(
                    "{}_loss.csv",
                    objective_slug.replace('-', "_")
                )))
                .map_err(CliError::runtime)?;
            let last = report.epochs.last().unwrap();
            println!(
                "{objective_slug}: final loss {:.4}, pair accuracy {:.3} -> {}",
                last.mean_loss,
                last.pair_accuracy,
                out_path.display()
            );
            Ok(())
        }

        Command::ValueFit { round, trees, out } => {
            let trees_path =
                trees.unwrap_or_else(|| round_dir(&out_dir, round).join("trees.jsonl"));
            let dumps = pipeline::load_tree_dumps(&trees_path).map_err(CliError::from)?;
            let labels: Vec<ValueLabel<f64>> = dumps
                .iter()
                .flat_map(|d| d.value_labels())
                .map(|(state_key, target)| ValueLabel { state_key, target })
                .collect();
            let fresh = ValueParams::zeros(cfg.feature_dim);
            let (mut fitted, history) =
                value::fit(&fresh, &labels, cfg.value_epochs, cfg.value_lr)
                    .map_err(CliError::runtime)?;
            fitted.round = round as u64;
            let out_path = out.unwrap_or_else(|| round_dir(&out_dir, round).join("value.json"));
            ensure_parent(&out_path)?;
            fitted.save(&out_path).map_err(CliError::runtime)?;
            println!(
                "value-fit: {} labels, loss {:.4} -> {:.4}, saved {}",
                labels.len(),
                history.first().unwrap(),
                history.last().unwrap(),
                out_path.display()
            );
            Ok(())
        }

        Command::Eval { policy, problems } => {
            let params = PolicyParams::load(&policy).map_err(CliError::runtime)?;
            let problems_path =
                problems.unwrap_or_else(|| out_dir.join("problems_heldout.jsonl"));
            let problem_set = env::load_problems(&problems_path).map_err(CliError::runtime)?;
            if problem_set.is_empty() {
                return Err(CliError::Usage("problem set is empty".to_string()));
            }
            let accuracy =
                pipeline::evaluate_policy(&params, &problem_set, cfg.search_round1.max_depth);
            println!(
                "accuracy {:.4} over {} problems ({})",
                accuracy,
                problem_set.len(),
                policy.display()
            );
            Ok(())
        }

        Command::Pipeline => {
            let report = pipeline::run_experiment(&cfg, Some(&out_dir))?;
            println!("{}", std::fs::read_to_string(out_dir.join("report.txt")).map_err(CliError::runtime)?);
            println!("report: {}", out_dir.join("report.json").display());
            let _ = report;
            Ok(())
        }

        Command::Stats { trees, pairs } => {
            let mut rows = Vec::new();
            if let Some(trees_path) = trees {
                let dumps = pipeline::load_tree_dumps(&trees_path).map_err(CliError::from)?;
                let pair_records = match pairs {
                    Some(p) => prefdata::load_pairs::<f64>(&p).map_err(CliError::runtime)?,
                    None => Vec::new(),
                };
                rows.push((1usize, stats_from_dumps(&dumps, &pair_records)));
            } else {
                for round in 1..=cfg.rounds {
                    let dir = round_dir(&out_dir, round);
                    let stats_path = dir.join("stats.json");
                    if stats_path.exists() {
                        let stats: prefdata::DatasetStats = serde_json::from_str(
                            &std::fs::read_to_string(&stats_path).map_err(CliError::runtime)?,
                        )
                        .map_err(CliError::runtime)?;
                        rows.push((round, stats));
                    }
                }
                if rows.is_empty() {
                    return Err(CliError::Usage(format!(
                        "no round stats found under {}; run `gen` or `pipeline` first",
                        out_dir.display()
                    )));
                }
            }
            print!("{}", prefdata::render_stats_table(&rows));
            Ok(())
        }

        Command::DumpTree {
            problem,
            round,
            policy,
            value,
        } => {
            let (pool, heldout) = load_problem_pools(&cfg, &out_dir)?;
            let target = pool
                .iter()
                .chain(heldout.iter())
                .find(|p| p.id.0 == problem)
                .ok_or_else(|| CliError::Usage(format!("unknown problem id `{problem}`")))?;
            let policy_params = load_policy_or_base(&policy, cfg.feature_dim)?;
            let value_params = load_value_or_init(&value, &cfg)?;
            let round_seed =
                plantree::features::derive_seed(cfg.seed, &format!("round-{round}"));
            let config = plantree::SearchConfig {
                rng_seed: plantree::features::derive_seed(round_seed, &target.id.0),
                ..search_for_round(&cfg, round)
            };
            let tree = mcts::run_search(target, &policy_params, &value_params, &config)
                .map_err(CliError::runtime)?;
            println!("{}", tree.dump_json());
            Ok(())
        }

        Command::ServeMock { port } => {
            let server = MockGenServer::spawn_on(port, MockBehavior::default())
                .map_err(CliError::runtime)?;
            println!("mock generator listening on {}", server.url());
            println!("press ctrl-c to stop");
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
    }
}

fn stats_from_dumps(
    dumps: &[mcts::TreeDump<f64>],
    pairs: &[prefdata::PreferencePair<f64>],
) -> prefdata::DatasetStats {
    use plantree::env::ActionKind;
    let mut depths = Vec::new();
    let (mut pos, mut neg) = (0usize, 0usize);
    for dump in dumps {
        for node in &dump.nodes {
            if node.n >= 1 {
                match node.correct {
                    Some(true) => {
                        pos += 1;
                        depths.push(depth_of(dump, node.id) as f64);
                    }
                    Some(false) => {
                        neg += 1;
                        depths.push(depth_of(dump, node.id) as f64);
                    }
                    None => {}
                }
            }
        }
    }
    prefdata::DatasetStats {
        avg_depth: if depths.is_empty() {
            0.0
        } else {
            depths.iter().sum::<f64>() / depths.len() as f64
        },
        pos_neg_ratio: neg as f64 / pos.max(1) as f64,
        pos_terminals: pos,
        neg_terminals: neg,
        plan_pair_count: pairs.iter().filter(|p| p.kind == ActionKind::Plan).count(),
        solution_pair_count: pairs
            .iter()
            .filter(|p| p.kind == ActionKind::Solution)
            .count(),
    }
}

fn depth_of(dump: &mcts::TreeDump<f64>, mut id: usize) -> usize {
    let mut depth = 0;
    while let Some(parent) = dump.nodes[id].parent_id {
        depth += 1;
        id = parent;
    }
    depth
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(CliError::runtime)?;
    }
    Ok(())
}
