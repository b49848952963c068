//! The iterative loop: generate trees, extract data, train the policy
//! variants, fit the value model, evaluate, repeat.
//!
//! Each round searches its problem slice with the previous round's policy and
//! value model (round 1: the uniform base policy and a seeded random value
//! init), extracts supervised trajectories and preference pairs, trains SFT
//! from the base policy and the preference variants from the SFT policy, and
//! refits the value model on search-derived labels. Greedy evaluation on a
//! disjoint held-out set scores every variant per round.

use crate::env::{self, Difficulty, EnvKind, Problem, State};
use crate::features::derive_seed;
use crate::mcts::{self, PlanTree, SearchConfig, TreeDump};
use crate::policy::{self, PolicyParams};
use crate::prefdata::{self, DatasetStats, PairStrategy, PreferencePair, SftTrajectory};
use crate::train::{self, LossReport, StepObjective, TrainConfig};
use crate::value::{self, ValueLabel, ValueParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("round {round}: no correct paths found in any tree; try an easier difficulty or more simulations")]
    DegenerateRound { round: usize },
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Env(#[from] env::EnvError),
    #[error(transparent)]
    Mcts(#[from] mcts::MctsError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Value(#[from] value::ValueError),
    #[error(transparent)]
    PrefData(#[from] prefdata::PrefDataError),
    #[error(transparent)]
    Policy(#[from] policy::PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Scalar64 = f64;

/// Whole-experiment configuration; the single document the CLI loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub env: String,
    pub difficulty: String,
    pub n_train: usize,
    pub n_heldout: usize,
    pub rounds: usize,
    /// Fraction of the (difficulty-sorted) training pool used in round 1.
    pub round1_subset_frac: f64,
    pub feature_dim: usize,
    pub seed: u64,
    pub pair_strategy: String,
    pub sft_max_per_problem: usize,
    pub dpo_pairs_per_problem: usize,
    /// Train the Step-DPO / instance-DPO ablations each round.
    pub ablations: bool,
    pub value_init_scale: f64,
    pub value_epochs: usize,
    pub value_lr: f64,
    pub search_round1: SearchConfig<Scalar64>,
    pub search_round2: SearchConfig<Scalar64>,
    pub sft: TrainConfig<Scalar64>,
    pub apo: TrainConfig<Scalar64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: "arith-chain".to_string(),
            difficulty: "mixed".to_string(),
            n_train: 200,
            n_heldout: 100,
            rounds: 2,
            round1_subset_frac: 0.5,
            feature_dim: crate::features::DEFAULT_FEATURE_DIM,
            seed: 0,
            pair_strategy: PairStrategy::default().name().to_string(),
            sft_max_per_problem: 4,
            dpo_pairs_per_problem: 2,
            ablations: true,
            value_init_scale: 0.0,
            value_epochs: 40,
            value_lr: 0.1,
            search_round1: SearchConfig {
                n_simulations: 192,
                ..SearchConfig::default()
            },
            search_round2: SearchConfig {
                n_simulations: 96,
                ..SearchConfig::default()
            },
            sft: TrainConfig::sft_default(),
            apo: TrainConfig::apo_default(),
        }
    }
}

impl ExperimentConfig {
    pub fn env_kind(&self) -> Result<EnvKind, PipelineError> {
        self.env
            .parse()
            .map_err(|e: env::EnvError| PipelineError::Config(e.to_string()))
    }

    pub fn difficulty_level(&self) -> Result<Difficulty, PipelineError> {
        self.difficulty
            .parse()
            .map_err(|e: env::EnvError| PipelineError::Config(e.to_string()))
    }

    pub fn strategy(&self) -> Result<PairStrategy, PipelineError> {
        self.pair_strategy
            .parse()
            .map_err(|e: prefdata::PrefDataError| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.env_kind()?;
        self.difficulty_level()?;
        self.strategy()?;
        if self.rounds < 1 {
            return Err(PipelineError::Config("rounds must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.round1_subset_frac) {
            return Err(PipelineError::Config(
                "round1_subset_frac must be in [0, 1]".into(),
            ));
        }
        if self.n_train == 0 || self.n_heldout == 0 {
            return Err(PipelineError::Config(
                "n_train and n_heldout must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Held-out accuracy of every policy variant in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAccuracy {
    pub base: f64,
    pub sft: f64,
    pub step_apo: f64,
    pub step_dpo: Option<f64>,
    pub instance_dpo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub problems_used: usize,
    pub stats: DatasetStats,
    pub sft_report: LossReport,
    pub apo_report: LossReport,
    pub accuracy: VariantAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundReport>,
    /// Paths (relative to the out dir) of every artifact written.
    pub artifacts: Vec<String>,
}

/// Trained policies of one round.
pub struct RoundPolicies {
    pub sft: PolicyParams<Scalar64>,
    pub step_apo: PolicyParams<Scalar64>,
    pub step_dpo: Option<PolicyParams<Scalar64>>,
    pub instance_dpo: Option<PolicyParams<Scalar64>>,
}

pub struct RoundOutcome {
    pub policies: RoundPolicies,
    pub value: ValueParams<Scalar64>,
    pub report: RoundReport,
    pub trees: Vec<PlanTree<Scalar64>>,
    pub pairs: Vec<PreferencePair<Scalar64>>,
    pub sft_data: Vec<SftTrajectory>,
}

/// Search every problem in parallel with per-problem derived seeds.
pub fn generate_trees(
    problems: &[Problem],
    policy_params: &PolicyParams<Scalar64>,
    value_params: &ValueParams<Scalar64>,
    search: &SearchConfig<Scalar64>,
    base_seed: u64,
) -> Result<Vec<PlanTree<Scalar64>>, PipelineError> {
    problems
        .par_iter()
        .map(|p| {
            let config = SearchConfig {
                rng_seed: derive_seed(base_seed, &p.id.0),
                ..search.clone()
            };
            mcts::run_search(p, policy_params, value_params, &config).map_err(PipelineError::from)
        })
        .collect()
}

/// Greedy decoding accuracy: follow argmax actions to a terminal and verify.
pub fn evaluate_policy(
    params: &PolicyParams<Scalar64>,
    problems: &[Problem],
    max_depth: usize,
) -> f64 {
    if problems.is_empty() {
        return 0.0;
    }
    let correct: usize = problems
        .par_iter()
        .map(|p| {
            let mut state = State::initial(p.id.clone());
            while !env::is_terminal(&state, max_depth) {
                let Ok(candidates) = env::candidate_actions(p, &state, max_depth) else {
                    return 0;
                };
                let Ok(lp) = policy::log_probs(params, &state, &candidates) else {
                    return 0;
                };
                let argmax = lp
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                state = state.extended(candidates[argmax].clone());
            }
            env::verify(p, &state, max_depth)
                .map(|v| v.correct as usize)
                .unwrap_or(0)
        })
        .sum();
    correct as f64 / problems.len() as f64
}

/// Round-1 value model: zero-init by default, so every visited-once child
/// carries V = 0.0 exactly and the V == 0 exclusion keeps noise out of the
/// preference pairs. A nonzero `value_init_scale` opts into seeded random
/// init instead.
pub fn round1_value_init(cfg: &ExperimentConfig) -> ValueParams<Scalar64> {
    if cfg.value_init_scale > 0.0 {
        ValueParams::random(
            cfg.feature_dim,
            derive_seed(cfg.seed, "value-init"),
            cfg.value_init_scale,
        )
    } else {
        ValueParams::zeros(cfg.feature_dim)
    }
}

/// The round-1 slice: a seeded random sample of the pool. Hard problems in
/// the slice contribute little under the cold-start policy; the easy ones
/// carry the first round, and round 2 revisits the full pool with the
/// trained policy and value model.
pub fn round_subset(pool: &[Problem], frac: f64, seed: u64) -> Vec<Problem> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut shuffled: Vec<Problem> = pool.to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, "round1-subset"));
    shuffled.shuffle(&mut rng);
    let take = ((pool.len() as f64 * frac).round() as usize).clamp(1, pool.len());
    shuffled.truncate(take);
    shuffled
}

/// One generate-then-train round.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    cfg: &ExperimentConfig,
    round_idx: usize,
    base_policy: &PolicyParams<Scalar64>,
    gen_policy: &PolicyParams<Scalar64>,
    gen_value: &ValueParams<Scalar64>,
    pool: &[Problem],
    heldout: &[Problem],
) -> Result<RoundOutcome, PipelineError> {
    let wrap = |source: PipelineError| PipelineError::Round {
        round: round_idx,
        source: Box::new(source),
    };

    let problems = if round_idx == 1 {
        round_subset(pool, cfg.round1_subset_frac, cfg.seed)
    } else {
        pool.to_vec()
    };
    let search = if round_idx == 1 {
        &cfg.search_round1
    } else {
        &cfg.search_round2
    };
    let round_seed = derive_seed(cfg.seed, &format!("round-{round_idx}"));
    let trees =
        generate_trees(&problems, gen_policy, gen_value, search, round_seed).map_err(wrap)?;

    let sft_data = prefdata::extract_sft(&trees, cfg.sft_max_per_problem, round_seed);
    if sft_data.is_empty() {
        return Err(PipelineError::DegenerateRound { round: round_idx });
    }
    let strategy = cfg.strategy()?;
    let pairs = prefdata::extract_pairs_all(&trees, strategy, round_seed);
    let stats = prefdata::compute_stats(&trees, &pairs);

    // SFT always restarts from the base policy, not the previous round's
    let mut sft_cfg = cfg.sft.clone();
    sft_cfg.seed = derive_seed(round_seed, "sft");
    let (sft_policy, sft_report) = train::sft_fit(base_policy, &sft_data, &sft_cfg).map_err(
        |e| wrap(PipelineError::from(e)),
    )?;
    let reference = sft_policy.snapshot();

    let mut apo_cfg = cfg.apo.clone();
    apo_cfg.seed = derive_seed(round_seed, "apo");
    let (apo_policy, apo_report) = if pairs.is_empty() {
        (sft_policy.clone(), LossReport::default())
    } else {
        train::apo_fit(&sft_policy, &reference, &pairs, &apo_cfg)
            .map_err(|e| wrap(PipelineError::from(e)))?
    };

    let (step_dpo_policy, instance_dpo_policy) = if cfg.ablations {
        let step_dpo = if pairs.is_empty() {
            sft_policy.clone()
        } else {
            train::fit_preference(&sft_policy, &reference, &pairs, &apo_cfg, StepObjective::StepDpo)
                .map_err(|e| wrap(PipelineError::from(e)))?
                .0
        };
        let traj_pairs =
            prefdata::extract_trajectory_pairs(&trees, cfg.dpo_pairs_per_problem, round_seed);
        let instance_dpo = if traj_pairs.is_empty() {
            sft_policy.clone()
        } else {
            train::dpo_fit(&sft_policy, &reference, &traj_pairs, &apo_cfg)
                .map_err(|e| wrap(PipelineError::from(e)))?
                .0
        };
        (Some(step_dpo), Some(instance_dpo))
    } else {
        (None, None)
    };

    // value model retrained from scratch on this round's labels
    let labels: Vec<ValueLabel<Scalar64>> = trees
        .iter()
        .flat_map(|t| t.value_labels())
        .map(|(state_key, target)| ValueLabel { state_key, target })
        .collect();
    let fresh = ValueParams::zeros(cfg.feature_dim);
    let (mut value_params, _) = value::fit(&fresh, &labels, cfg.value_epochs, cfg.value_lr)
        .map_err(|e| wrap(PipelineError::from(e)))?;
    value_params.round = round_idx as u64;

    let max_depth = search.max_depth;
    let accuracy = VariantAccuracy {
        base: evaluate_policy(base_policy, heldout, max_depth),
        sft: evaluate_policy(&sft_policy, heldout, max_depth),
        step_apo: evaluate_policy(&apo_policy, heldout, max_depth),
        step_dpo: step_dpo_policy
            .as_ref()
            .map(|p| evaluate_policy(p, heldout, max_depth)),
        instance_dpo: instance_dpo_policy
            .as_ref()
            .map(|p| evaluate_policy(p, heldout, max_depth)),
    };

    Ok(RoundOutcome {
        policies: RoundPolicies {
            sft: sft_policy,
            step_apo: apo_policy,
            step_dpo: step_dpo_policy,
            instance_dpo: instance_dpo_policy,
        },
        value: value_params,
        report: RoundReport {
            round: round_idx,
            problems_used: problems.len(),
            stats,
            sft_report,
            apo_report,
            accuracy,
        },
        trees,
        pairs,
        sft_data,
    })
}

/// Run the full multi-round experiment, writing artifacts under `out_dir`
/// when given.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentReport, PipelineError> {
    cfg.validate()?;
    let env_kind = cfg.env_kind()?;
    let difficulty = cfg.difficulty_level()?;
    let all = env::generate_problems(env_kind, cfg.seed, cfg.n_train + cfg.n_heldout, difficulty);
    let (pool, heldout) = all.split_at(cfg.n_train);
    debug_assert!(pool.iter().all(|p| heldout.iter().all(|h| h.id != p.id)));

    let mut writer = ArtifactWriter::new(out_dir)?;
    writer.write_jsonl_problems("problems_train.jsonl", pool)?;
    writer.write_jsonl_problems("problems_heldout.jsonl", heldout)?;

    let base_policy = PolicyParams::zeros(cfg.feature_dim);
    let mut gen_policy = base_policy.clone();
    let mut gen_value = round1_value_init(cfg);

    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round_idx in 1..=cfg.rounds {
        let outcome = run_round(
            cfg,
            round_idx,
            &base_policy,
            &gen_policy,
            &gen_value,
            pool,
            heldout,
        )?;
        writer.write_round(round_idx, &outcome)?;
        rounds.push(outcome.report.clone());
        gen_policy = outcome.policies.step_apo.clone();
        gen_value = outcome.value.clone();
    }

    let mut report = ExperimentReport {
        config: cfg.clone(),
        rounds,
        artifacts: writer.relative_paths(),
    };
    writer.write_report(&mut report)?;
    Ok(report)
}

/// Render the variant accuracy comparison: one row per method, one column
/// per round.
pub fn render_accuracy_table(rounds: &[RoundReport]) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(a) => format!("{:.3}", a),
        None => "-".to_string(),
    };
    let methods: [(&str, Box<dyn Fn(&RoundReport) -> Option<f64>>); 5] = [
        ("base", Box::new(|r| Some(r.accuracy.base))),
        ("sft", Box::new(|r| Some(r.accuracy.sft))),
        ("instance-dpo", Box::new(|r| r.accuracy.instance_dpo)),
        ("step-dpo", Box::new(|r| r.accuracy.step_dpo)),
        ("step-apo", Box::new(|r| Some(r.accuracy.step_apo))),
    ];
    let mut out = String::new();
    out.push_str(&format!("{:<14}", "method"));
    for r in rounds {
        out.push_str(&format!(" {:>9}", format!("round{}", r.round)));
    }
    out.push('\n');
    for (name, get) in &methods {
        out.push_str(&format!("{name:<14}"));
        for r in rounds {
            out.push_str(&format!(" {:>9}", fmt(get(r))));
        }
        out.push('\n');
    }
    out
}

/// Write one tree dump per line.
pub fn save_trees(trees: &[PlanTree<Scalar64>], path: &Path) -> Result<usize, PipelineError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for tree in trees {
        serde_json::to_writer(&mut file, &tree.dump()).map_err(std::io::Error::other)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(trees.len())
}

pub fn load_tree_dumps(path: &Path) -> Result<Vec<TreeDump<Scalar64>>, PipelineError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut dumps = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let dump = serde_json::from_str(&line).map_err(|e| {
            PipelineError::Config(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        dumps.push(dump);
    }
    Ok(dumps)
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Collects artifacts and their hashes as they are written.
struct ArtifactWriter {
    out_dir: Option<PathBuf>,
    written: Vec<String>,
}

impl ArtifactWriter {
    fn new(out_dir: Option<&Path>) -> Result<Self, PipelineError> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(ArtifactWriter {
            out_dir: out_dir.map(Path::to_path_buf),
            written: Vec::new(),
        })
    }

    fn relative_paths(&self) -> Vec<String> {
        self.written.clone()
    }

    fn record(&mut self, rel: &str) {
        self.written.push(rel.to_string());
    }

    fn write_jsonl_problems(&mut self, rel: &str, problems: &[Problem]) -> Result<(), PipelineError> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        env::save_problems(problems, &dir.join(rel))?;
        self.record(rel);
        Ok(())
    }

    fn write_round(&mut self, round_idx: usize, outcome: &RoundOutcome) -> Result<(), PipelineError> {
        let Some(dir) = self.out_dir.clone() else {
            return Ok(());
        };
        let round_rel = format!("round{round_idx}");
        let round_dir = dir.join(&round_rel);
        std::fs::create_dir_all(&round_dir)?;

        save_trees(&outcome.trees, &round_dir.join("trees.jsonl"))?;
        self.record(&format!("{round_rel}/trees.jsonl"));
        prefdata::save_pairs(&outcome.pairs, &round_dir.join("pairs.jsonl"))?;
        self.record(&format!("{round_rel}/pairs.jsonl"));
        prefdata::save_sft(&outcome.sft_data, &round_dir.join("sft.jsonl"))?;
        self.record(&format!("{round_rel}/sft.jsonl"));

        outcome.policies.sft.save(&round_dir.join("policy_sft.json"))?;
        self.record(&format!("{round_rel}/policy_sft.json"));
        outcome
            .policies
            .step_apo
            .save(&round_dir.join("policy_step_apo.json"))?;
        self.record(&format!("{round_rel}/policy_step_apo.json"));
        if let Some(p) = &outcome.policies.step_dpo {
            p.save(&round_dir.join("policy_step_dpo.json"))?;
            self.record(&format!("{round_rel}/policy_step_dpo.json"));
        }
        if let Some(p) = &outcome.policies.instance_dpo {
            p.save(&round_dir.join("policy_instance_dpo.json"))?;
            self.record(&format!("{round_rel}/policy_instance_dpo.json"));
        }
        outcome.value.save(&round_dir.join("value.json"))?;
        self.record(&format!("{round_rel}/value.json"));

        outcome
            .report
            .sft_report
            .save_csv(&round_dir.join("sft_loss.csv"))
            .map_err(PipelineError::from)?;
        self.record(&format!("{round_rel}/sft_loss.csv"));
        outcome
            .report
            .apo_report
            .save_csv(&round_dir.join("apo_loss.csv"))
            .map_err(PipelineError::from)?;
        self.record(&format!("{round_rel}/apo_loss.csv"));
        std::fs::write(
            round_dir.join("stats.json"),
            serde_json::to_string_pretty(&outcome.report.stats).map_err(std::io::Error::other)?,
        )?;
        self.record(&format!("{round_rel}/stats.json"));
        Ok(())
    }

    fn write_report(&mut self, report: &mut ExperimentReport) -> Result<(), PipelineError> {
        let Some(dir) = self.out_dir.clone() else {
            return Ok(());
        };
        report.artifacts = self.relative_paths();
        report.artifacts.push("report.json".to_string());
        report.artifacts.push("report.txt".to_string());

        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(report).map_err(std::io::Error::other)?,
        )?;
        let mut text = String::new();
        text.push_str("== dataset statistics ==\n");
        let stat_rows: Vec<(usize, DatasetStats)> = report
            .rounds
            .iter()
            .map(|r| (r.round, r.stats.clone()))
            .collect();
        text.push_str(&prefdata::render_stats_table(&stat_rows));
        text.push_str("\n== held-out accuracy ==\n");
        text.push_str(&render_accuracy_table(&report.rounds));
        std::fs::write(dir.join("report.txt"), text)?;

        // manifest hashes every artifact written so far
        let mut entries = Vec::new();
        for rel in &report.artifacts {
            let bytes = std::fs::read(dir.join(rel))?;
            entries.push(serde_json::json!({
                "path": rel,
                "sha256": sha256_hex(&bytes),
            }));
        }
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&serde_json::json!({ "artifacts": entries }))
                .map_err(std::io::Error::other)?,
        )?;
        Ok(())
    }
}
