//! Converts finished plan trees into training data.
//!
//! Sibling nodes under one parent become step-level preference pairs: plan
//! steps pair positive-value children (V > 0) against negative-value children
//! (V < 0), solution steps pair correct against incorrect answers. Correct
//! root-to-terminal paths become supervised trajectories. Only visited
//! children (N >= 1) participate; children with V exactly 0 are unclassified
//! and never pair.

use crate::env::{self, ActionKind, ProblemId};
use crate::features::derive_seed;
use crate::mcts::PlanTree;
use crate::scalar::Scalar;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PrefDataError {
    #[error("unknown pair strategy `{0}`")]
    UnknownStrategy(String),
    #[error("{path} line {line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which sibling combinations become preference pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairStrategy {
    /// All positive x negative plan combinations, one random solution pair
    /// per parent (the adopted default).
    AllPlansOneSolution,
    /// Max-positive vs min-negative plan pair, one random solution pair.
    OnePlanOneSolution,
    /// All plan combinations and all solution combinations.
    AllPlansAllSolutions,
    /// One plan pair, all solution combinations.
    OnePlanAllSolutions,
}

impl Default for PairStrategy {
    fn default() -> Self {
        PairStrategy::AllPlansOneSolution
    }
}

impl PairStrategy {
    fn all_plans(self) -> bool {
        matches!(
            self,
            PairStrategy::AllPlansOneSolution | PairStrategy::AllPlansAllSolutions
        )
    }

    fn all_solutions(self) -> bool {
        matches!(
            self,
            PairStrategy::AllPlansAllSolutions | PairStrategy::OnePlanAllSolutions
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            PairStrategy::AllPlansOneSolution => "all-plans-one-solution",
            PairStrategy::OnePlanOneSolution => "one-plan-one-solution",
            PairStrategy::AllPlansAllSolutions => "all-plans-all-solutions",
            PairStrategy::OnePlanAllSolutions => "one-plan-all-solutions",
        }
    }

    pub const ALL: [PairStrategy; 4] = [
        PairStrategy::AllPlansOneSolution,
        PairStrategy::OnePlanOneSolution,
        PairStrategy::AllPlansAllSolutions,
        PairStrategy::OnePlanAllSolutions,
    ];
}

impl std::str::FromStr for PairStrategy {
    type Err = PrefDataError;
    fn from_str(s: &str) -> Result<Self, PrefDataError> {
        PairStrategy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PrefDataError::UnknownStrategy(s.to_string()))
    }
}

/// One sibling-derived preference record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair<T> {
    pub problem_id: ProblemId,
    pub state_key: String,
    /// Full generation-time candidate universe at the parent state.
    pub candidates: Vec<String>,
    pub chosen_idx: usize,
    pub rejected_idx: usize,
    pub v_chosen: T,
    pub v_rejected: T,
    pub kind: ActionKind,
    pub format_version: u32,
}

/// One step of a stored trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajStep {
    pub state_key: String,
    pub candidates: Vec<String>,
    pub chosen_idx: usize,
}

/// A root-to-terminal path; SFT uses only correct ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftTrajectory {
    pub problem_id: ProblemId,
    pub steps: Vec<TrajStep>,
    pub format_version: u32,
}

/// Winner/loser full-trajectory pair for instance-level DPO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair {
    pub winner: SftTrajectory,
    pub loser: SftTrajectory,
}

/// Statistics over one round's generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub avg_depth: f64,
    /// Negatives per positive (the `1:x` column); positives clamped to >= 1
    /// to stay finite.
    pub pos_neg_ratio: f64,
    pub pos_terminals: usize,
    pub neg_terminals: usize,
    pub plan_pair_count: usize,
    pub solution_pair_count: usize,
}

struct ChildView<T> {
    kind: ActionKind,
    v: T,
    correct: Option<bool>,
    env_idx: usize,
}

/// Emit the pairs of one sibling group under the given strategy.
fn pairs_for_group<T: Scalar>(
    problem_id: &ProblemId,
    state_key: &str,
    displays: &[String],
    views: &[ChildView<T>],
    strategy: PairStrategy,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<PreferencePair<T>>,
) {
    let mut emit = |chosen: &ChildView<T>, rejected: &ChildView<T>, kind: ActionKind| {
        out.push(PreferencePair {
            problem_id: problem_id.clone(),
            state_key: state_key.to_string(),
            candidates: displays.to_vec(),
            chosen_idx: chosen.env_idx,
            rejected_idx: rejected.env_idx,
            v_chosen: chosen.v,
            v_rejected: rejected.v,
            kind,
            format_version: FORMAT_VERSION,
        });
    };

    // plan pairs: sign of V classifies; V == 0 stays unclassified
    let positives: Vec<&ChildView<T>> = views
        .iter()
        .filter(|c| c.kind == ActionKind::Plan && c.v > T::zero())
        .collect();
    let negatives: Vec<&ChildView<T>> = views
        .iter()
        .filter(|c| c.kind == ActionKind::Plan && c.v < T::zero())
        .collect();
    if !positives.is_empty() && !negatives.is_empty() {
        if strategy.all_plans() {
            for pos in &positives {
                for neg in &negatives {
                    emit(pos, neg, ActionKind::Plan);
                }
            }
        } else {
            let best = positives
                .iter()
                .max_by(|a, b| a.v.partial_cmp(&b.v).unwrap())
                .unwrap();
            let worst = negatives
                .iter()
                .min_by(|a, b| a.v.partial_cmp(&b.v).unwrap())
                .unwrap();
            emit(best, worst, ActionKind::Plan);
        }
    }

    // solution pairs: verdicts classify (equivalent to the sign of the
    // pinned terminal V)
    let correct: Vec<&ChildView<T>> = views
        .iter()
        .filter(|c| c.kind == ActionKind::Solution && c.correct == Some(true))
        .collect();
    let incorrect: Vec<&ChildView<T>> = views
        .iter()
        .filter(|c| c.kind == ActionKind::Solution && c.correct == Some(false))
        .collect();
    if !correct.is_empty() && !incorrect.is_empty() {
        if strategy.all_solutions() {
            for c in &correct {
                for i in &incorrect {
                    emit(c, i, ActionKind::Solution);
                }
            }
        } else {
            let c = correct.choose(rng).unwrap();
            let i = incorrect.choose(rng).unwrap();
            emit(c, i, ActionKind::Solution);
        }
    }
}

/// Extract preference pairs from one finished tree.
pub fn extract_pairs<T: Scalar>(
    tree: &PlanTree<T>,
    strategy: PairStrategy,
    rng: &mut ChaCha8Rng,
) -> Vec<PreferencePair<T>> {
    let mut pairs = Vec::new();
    let max_depth = tree.config.max_depth;
    for parent in &tree.nodes {
        if !parent.expanded || parent.children.len() < 2 {
            continue;
        }
        let Ok(universe) = env::candidate_actions(&tree.problem, &parent.state, max_depth) else {
            continue;
        };
        let displays: Vec<String> = universe.iter().map(|c| c.display()).collect();
        let mut views: Vec<ChildView<T>> = Vec::new();
        for &child_idx in &parent.children {
            let child = &tree.nodes[child_idx];
            if child.n < 1 {
                continue;
            }
            let action = child.incoming_action.as_ref().expect("non-root has action");
            let display = action.display();
            let Some(env_idx) = displays.iter().position(|d| *d == display) else {
                continue;
            };
            views.push(ChildView {
                kind: action.kind(),
                v: child.v,
                correct: child.terminal_verdict.map(|v| v.correct),
                env_idx,
            });
        }
        pairs_for_group(
            &tree.problem.id,
            &parent.state.canonical_key(),
            &displays,
            &views,
            strategy,
            rng,
            &mut pairs,
        );
    }
    pairs
}

/// Extract preference pairs from persisted tree dumps. Needs the matching
/// problem set to rebuild candidate universes; children whose actions are
/// not in the rebuilt universe (e.g. remote-proposer steps) are skipped.
pub fn extract_pairs_from_dumps<T: Scalar>(
    dumps: &[crate::mcts::TreeDump<T>],
    problems: &[env::Problem],
    max_depth: usize,
    strategy: PairStrategy,
    base_seed: u64,
) -> Vec<PreferencePair<T>> {
    let mut pairs = Vec::new();
    for dump in dumps {
        let Some(problem) = problems.iter().find(|p| p.id.0 == dump.problem_id) else {
            continue;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, &dump.problem_id));
        let states = dump.states();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); dump.nodes.len()];
        for node in &dump.nodes {
            if let Some(p) = node.parent_id {
                children[p].push(node.id);
            }
        }
        for (idx, kids) in children.iter().enumerate() {
            if kids.len() < 2 {
                continue;
            }
            let Ok(universe) = env::candidate_actions(problem, &states[idx], max_depth) else {
                continue;
            };
            let displays: Vec<String> = universe.iter().map(|c| c.display()).collect();
            let mut views: Vec<ChildView<T>> = Vec::new();
            for &child_id in kids {
                let child = &dump.nodes[child_id];
                if child.n < 1 {
                    continue;
                }
                let Some(display) = &child.action_display else {
                    continue;
                };
                let Some(env_idx) = displays.iter().position(|d| d == display) else {
                    continue;
                };
                views.push(ChildView {
                    kind: match child.action_kind.as_deref() {
                        Some("solution") => ActionKind::Solution,
                        _ => ActionKind::Plan,
                    },
                    v: child.v,
                    correct: child.correct,
                    env_idx,
                });
            }
            pairs_for_group(
                &problem.id,
                &states[idx].canonical_key(),
                &displays,
                &views,
                strategy,
                &mut rng,
                &mut pairs,
            );
        }
    }
    pairs
}

/// Extract pairs from many trees with per-tree derived seeds, so results do
/// not depend on iteration order.
pub fn extract_pairs_all<T: Scalar>(
    trees: &[PlanTree<T>],
    strategy: PairStrategy,
    base_seed: u64,
) -> Vec<PreferencePair<T>> {
    let mut pairs = Vec::new();
    for tree in trees {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, &tree.problem.id.0));
        pairs.extend(extract_pairs(tree, strategy, &mut rng));
    }
    pairs
}

fn path_to<T: Scalar>(tree: &PlanTree<T>, mut idx: usize) -> Vec<usize> {
    let mut path = vec![idx];
    while let Some(parent) = tree.nodes[idx].parent {
        path.push(parent);
        idx = parent;
    }
    path.reverse();
    path
}

fn trajectory_from_path<T: Scalar>(tree: &PlanTree<T>, path: &[usize]) -> SftTrajectory {
    let max_depth = tree.config.max_depth;
    let mut steps = Vec::with_capacity(path.len().saturating_sub(1));
    for pair in path.windows(2) {
        let parent = &tree.nodes[pair[0]];
        let child = &tree.nodes[pair[1]];
        let universe = env::candidate_actions(&tree.problem, &parent.state, max_depth)
            .expect("non-terminal interior node has candidates");
        let display = child
            .incoming_action
            .as_ref()
            .expect("non-root has action")
            .display();
        let chosen_idx = universe
            .iter()
            .position(|c| c.display() == display)
            .expect("child action came from the candidate universe");
        steps.push(TrajStep {
            state_key: parent.state.canonical_key(),
            candidates: universe.iter().map(|c| c.display()).collect(),
            chosen_idx,
        });
    }
    SftTrajectory {
        problem_id: tree.problem.id.clone(),
        steps,
        format_version: FORMAT_VERSION,
    }
}

fn terminal_paths<T: Scalar>(tree: &PlanTree<T>, want_correct: bool) -> Vec<Vec<usize>> {
    tree.nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.n >= 1 && n.terminal_verdict.map(|v| v.correct) == Some(want_correct))
        .map(|(idx, _)| path_to(tree, idx))
        .collect()
}

/// Up to `max_per_problem` correct root-to-terminal trajectories per tree,
/// chosen uniformly without replacement.
pub fn extract_sft<T: Scalar>(
    trees: &[PlanTree<T>],
    max_per_problem: usize,
    base_seed: u64,
) -> Vec<SftTrajectory> {
    let mut out = Vec::new();
    for tree in trees {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, &tree.problem.id.0));
        let mut paths = terminal_paths(tree, true);
        paths.shuffle(&mut rng);
        paths.truncate(max_per_problem);
        out.extend(paths.iter().map(|p| trajectory_from_path(tree, p)));
    }
    out
}

/// Trajectory-pair extraction from persisted dumps, mirroring
/// [`extract_trajectory_pairs`].
pub fn extract_trajectory_pairs_from_dumps<T: Scalar>(
    dumps: &[crate::mcts::TreeDump<T>],
    problems: &[env::Problem],
    max_per_problem: usize,
    max_depth: usize,
    base_seed: u64,
) -> Vec<TrajectoryPair> {
    let mut out = Vec::new();
    for dump in dumps {
        let Some(problem) = problems.iter().find(|p| p.id.0 == dump.problem_id) else {
            continue;
        };
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(base_seed, &dump.problem_id) ^ 0x5eed);
        let states = dump.states();
        let traj_of = |leaf: usize| -> Option<SftTrajectory> {
            let mut ids = vec![leaf];
            let mut cursor = leaf;
            while let Some(p) = dump.nodes[cursor].parent_id {
                ids.push(p);
                cursor = p;
            }
            ids.reverse();
            let mut steps = Vec::with_capacity(ids.len().saturating_sub(1));
            for pair in ids.windows(2) {
                let universe = env::candidate_actions(problem, &states[pair[0]], max_depth).ok()?;
                let display = dump.nodes[pair[1]].action_display.clone()?;
                let chosen_idx = universe.iter().position(|c| c.display() == display)?;
                steps.push(TrajStep {
                    state_key: states[pair[0]].canonical_key(),
                    candidates: universe.iter().map(|c| c.display()).collect(),
                    chosen_idx,
                });
            }
            Some(SftTrajectory {
                problem_id: problem.id.clone(),
                steps,
                format_version: FORMAT_VERSION,
            })
        };
        let winners: Vec<SftTrajectory> = dump
            .nodes
            .iter()
            .filter(|n| n.n >= 1 && n.correct == Some(true))
            .filter_map(|n| traj_of(n.id))
            .collect();
        let losers: Vec<SftTrajectory> = dump
            .nodes
            .iter()
            .filter(|n| n.n >= 1 && n.correct == Some(false))
            .filter_map(|n| traj_of(n.id))
            .collect();
        if winners.is_empty() || losers.is_empty() {
            continue;
        }
        for _ in 0..max_per_problem {
            out.push(TrajectoryPair {
                winner: winners.choose(&mut rng).unwrap().clone(),
                loser: losers.choose(&mut rng).unwrap().clone(),
            });
        }
    }
    out
}

/// Correct-vs-incorrect full-trajectory pairs for instance-level DPO, up to
/// `max_per_problem` per tree.
pub fn extract_trajectory_pairs<T: Scalar>(
    trees: &[PlanTree<T>],
    max_per_problem: usize,
    base_seed: u64,
) -> Vec<TrajectoryPair> {
    let mut out = Vec::new();
    for tree in trees {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(base_seed, &tree.problem.id.0) ^ 0x5eed);
        let winners = terminal_paths(tree, true);
        let losers = terminal_paths(tree, false);
        if winners.is_empty() || losers.is_empty() {
            continue;
        }
        for _ in 0..max_per_problem {
            let w = winners.choose(&mut rng).unwrap();
            let l = losers.choose(&mut rng).unwrap();
            out.push(TrajectoryPair {
                winner: trajectory_from_path(tree, w),
                loser: trajectory_from_path(tree, l),
            });
        }
    }
    out
}

/// Dataset statistics in the generated-data report shape.
pub fn compute_stats<T: Scalar>(
    trees: &[PlanTree<T>],
    pairs: &[PreferencePair<T>],
) -> DatasetStats {
    let mut depths = Vec::new();
    let mut pos = 0usize;
    let mut neg = 0usize;
    for tree in trees {
        for node in &tree.nodes {
            if node.n >= 1 {
                if let Some(verdict) = node.terminal_verdict {
                    depths.push(node.state.depth() as f64);
                    if verdict.correct {
                        pos += 1;
                    } else {
                        neg += 1;
                    }
                }
            }
        }
    }
    let avg_depth = if depths.is_empty() {
        0.0
    } else {
        depths.iter().sum::<f64>() / depths.len() as f64
    };
    DatasetStats {
        avg_depth,
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

/// Render per-round statistics as the standard table.
pub fn render_stats_table(rows: &[(usize, DatasetStats)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<6} {:>9} {:>9} {:>11} {:>15}\n",
        "round", "avg_depth", "pos:neg", "plan_pairs", "solution_pairs"
    ));
    for (round, stats) in rows {
        out.push_str(&format!(
            "{:<6} {:>9.2} {:>9} {:>11} {:>15}\n",
            round,
            stats.avg_depth,
            format!("1:{:.2}", stats.pos_neg_ratio),
            stats.plan_pair_count,
            stats.solution_pair_count
        ));
    }
    out
}

fn save_jsonl<R: Serialize>(records: &[R], path: &Path) -> Result<usize, PrefDataError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut file, record).map_err(std::io::Error::other)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(records.len())
}

fn load_jsonl<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>, PrefDataError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| PrefDataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn save_pairs<T: Scalar>(
    pairs: &[PreferencePair<T>],
    path: &Path,
) -> Result<usize, PrefDataError> {
    save_jsonl(pairs, path)
}

pub fn load_pairs<T: Scalar>(path: &Path) -> Result<Vec<PreferencePair<T>>, PrefDataError> {
    load_jsonl(path)
}

pub fn save_sft(trajs: &[SftTrajectory], path: &Path) -> Result<usize, PrefDataError> {
    save_jsonl(trajs, path)
}

pub fn load_sft(path: &Path) -> Result<Vec<SftTrajectory>, PrefDataError> {
    load_jsonl(path)
}
