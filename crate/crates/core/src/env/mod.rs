//! Synthetic multi-step reasoning environments.
//!
//! Each task has an abstract planning phase (choose which subgoal to pursue
//! next) followed by a single solution step that commits a concrete final
//! answer. Terminal states are verified against an exact ground truth, with
//! reward +1 for a correct answer and -1 otherwise (including traces that hit
//! the depth cap without answering).
//!
//! Two environments share the interface: [`ArithChain`](EnvKind::ArithChain)
//! (a DAG of integer quantities, the default everywhere) and
//! [`GridPlan`](EnvKind::GridPlan) (rook-move path planning on a small grid).

mod arith;
mod grid;

pub use arith::ArithSpec;
pub use grid::GridSpec;

use crate::features::{derive_seed, stable_hash};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid difficulty level `{0}`")]
    InvalidDifficulty(String),
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    #[error("state is terminal")]
    TerminalState,
    #[error("action `{0}` is not a legal candidate in this state")]
    InvalidTransition(String),
    #[error("verify requires a terminal state")]
    NonTerminalState,
    #[error("problem file line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unique problem identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProblemId(pub String);

impl fmt::Display for ProblemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<&str> for ProblemId {
    fn from(s: &str) -> Self {
        ProblemId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    /// 2-quantity chains / 4x4 grids.
    Easy,
    /// 3-quantity chains / 5x5 grids.
    Medium,
    /// 4-5 quantity chains / 6x6 grids.
    Hard,
    /// Per-problem draw across the whole range.
    Mixed,
}

impl std::str::FromStr for Difficulty {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            "mixed" => Ok(Difficulty::Mixed),
            other => Err(EnvError::InvalidDifficulty(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvKind {
    ArithChain,
    GridPlan,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::ArithChain => "arith-chain",
            EnvKind::GridPlan => "grid-plan",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s.to_ascii_lowercase().as_str() {
            "arith-chain" | "arith" | "arithchain" => Ok(EnvKind::ArithChain),
            "grid-plan" | "grid" | "gridplan" => Ok(EnvKind::GridPlan),
            other => Err(EnvError::UnknownEnv(other.to_string())),
        }
    }
}

/// Environment-specific task description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", content = "spec", rename_all = "kebab-case")]
pub enum EnvSpec {
    ArithChain(ArithSpec),
    GridPlan(GridSpec),
}

impl EnvSpec {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvSpec::ArithChain(_) => EnvKind::ArithChain,
            EnvSpec::GridPlan(_) => EnvKind::GridPlan,
        }
    }
}

/// A synthetic reasoning task with an exact answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: ProblemId,
    #[serde(flatten)]
    pub spec: EnvSpec,
    pub ground_truth: i64,
}

impl Problem {
    /// Plain-text rendering of the task, used when proposing steps remotely.
    pub fn statement(&self) -> String {
        match &self.spec {
            EnvSpec::ArithChain(spec) => spec.statement(),
            EnvSpec::GridPlan(spec) => spec.statement(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionKind {
    Plan,
    Solution,
}

/// One candidate step: either an abstract plan directive or a final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionPayload {
    /// Abstract subgoal directive, e.g. "plan q2 = q1 * 2".
    Plan(String),
    /// Concrete final answer.
    Solution(i64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAction {
    pub payload: ActionPayload,
}

impl StepAction {
    pub fn plan(directive: impl Into<String>) -> Self {
        StepAction {
            payload: ActionPayload::Plan(directive.into()),
        }
    }

    pub fn solution(answer: i64) -> Self {
        StepAction {
            payload: ActionPayload::Solution(answer),
        }
    }

    pub fn kind(&self) -> ActionKind {
        match self.payload {
            ActionPayload::Plan(_) => ActionKind::Plan,
            ActionPayload::Solution(_) => ActionKind::Solution,
        }
    }

    /// Stable canonical string; unique within any candidate set.
    pub fn display(&self) -> String {
        match &self.payload {
            ActionPayload::Plan(directive) => directive.clone(),
            ActionPayload::Solution(answer) => format!("answer {answer}"),
        }
    }

    /// Exact inverse of [`display`](Self::display): solution steps render as
    /// `answer <int>`, everything else is a plan directive.
    pub fn from_display(display: &str) -> StepAction {
        if let Some(rest) = display.strip_prefix("answer ") {
            if let Ok(answer) = rest.trim().parse::<i64>() {
                return StepAction::solution(answer);
            }
        }
        StepAction::plan(display)
    }
}

/// A partial trace through one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    problem_id: ProblemId,
    trace: Vec<StepAction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Planning,
    Solved,
}

impl State {
    pub fn initial(problem_id: ProblemId) -> Self {
        State {
            problem_id,
            trace: Vec::new(),
        }
    }

    pub fn problem_id(&self) -> &ProblemId {
        &self.problem_id
    }

    pub fn trace(&self) -> &[StepAction] {
        &self.trace
    }

    pub fn depth(&self) -> usize {
        self.trace.len()
    }

    pub fn phase(&self) -> Phase {
        match self.trace.last() {
            Some(a) if a.kind() == ActionKind::Solution => Phase::Solved,
            _ => Phase::Planning,
        }
    }

    pub fn is_solved(&self) -> bool {
        self.phase() == Phase::Solved
    }

    /// Final answer committed by the trace, if any.
    pub fn answer(&self) -> Option<i64> {
        match self.trace.last()?.payload {
            ActionPayload::Solution(v) => Some(v),
            _ => None,
        }
    }

    /// Pure extension without legality checks; [`apply`] is the checked path.
    /// Remote-proposer search also builds states through here, since external
    /// steps bypass the environment's candidate enumeration.
    pub fn extended(&self, action: StepAction) -> State {
        let mut trace = self.trace.clone();
        trace.push(action);
        State {
            problem_id: self.problem_id.clone(),
            trace,
        }
    }

    /// Canonical serialization of the state; the key preference records and
    /// value labels are stored under.
    pub fn canonical_key(&self) -> String {
        let mut key = String::with_capacity(32 + self.trace.len() * 16);
        key.push_str(&self.problem_id.0);
        key.push('|');
        for (i, action) in self.trace.iter().enumerate() {
            if i > 0 {
                key.push(';');
            }
            key.push_str(&action.display());
        }
        key.push('|');
        key.push_str(match self.phase() {
            Phase::Planning => "planning",
            Phase::Solved => "solved",
        });
        key
    }

    /// Rebuild a state from its canonical key. Only keys produced by
    /// [`canonical_key`](Self::canonical_key) over built-in action displays
    /// round-trip; free-form text from remote proposers does not.
    pub fn from_canonical_key(key: &str) -> Option<State> {
        let (problem_id, rest) = key.split_once('|')?;
        let (trace_part, _phase) = rest.rsplit_once('|')?;
        let trace = if trace_part.is_empty() {
            Vec::new()
        } else {
            trace_part
                .split(';')
                .map(StepAction::from_display)
                .collect()
        };
        Some(State {
            problem_id: ProblemId(problem_id.to_string()),
            trace,
        })
    }
}

/// Outcome of a terminal state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub correct: bool,
    /// +1 or -1.
    pub reward: i8,
}

impl Verdict {
    fn from_correct(correct: bool) -> Self {
        Verdict {
            correct,
            reward: if correct { 1 } else { -1 },
        }
    }
}

/// Generate `n` problems deterministically from `(seed, n, difficulty)`.
pub fn generate_problems(
    env: EnvKind,
    seed: u64,
    n: usize,
    difficulty: Difficulty,
) -> Vec<Problem> {
    (0..n)
        .map(|i| {
            let id = ProblemId(format!("{}-{seed:08x}-{i:04}", env.name()));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &id.0));
            match env {
                EnvKind::ArithChain => arith::generate(id, difficulty, &mut rng),
                EnvKind::GridPlan => grid::generate(id, difficulty, &mut rng),
            }
        })
        .collect()
}

/// Enumerate the finite candidate universe at a planning state.
///
/// While subgoals remain, candidates are plan directives: the valid
/// continuation(s), wrong-order picks, and decoy subgoals not needed for the
/// target. Once every target dependency is planned, candidates switch to
/// solution steps: the true answer plus distractors derived from evaluating
/// the task under the trace's decoy / wrong-order steps. The returned order
/// is a deterministic per-state shuffle, so no slot is systematically the
/// correct one.
pub fn candidate_actions(
    problem: &Problem,
    state: &State,
    max_depth: usize,
) -> Result<Vec<StepAction>, EnvError> {
    if is_terminal(state, max_depth) {
        return Err(EnvError::TerminalState);
    }
    let mut candidates = match &problem.spec {
        EnvSpec::ArithChain(spec) => spec.candidates(state, problem.ground_truth),
        EnvSpec::GridPlan(spec) => spec.candidates(state, problem.ground_truth),
    };
    dedup_by_display(&mut candidates);
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&state.canonical_key()));
    candidates.shuffle(&mut rng);
    Ok(candidates)
}

fn dedup_by_display(candidates: &mut Vec<StepAction>) {
    let mut seen = std::collections::BTreeSet::new();
    candidates.retain(|c| seen.insert(c.display()));
}

/// Checked transition: `action` must be a current candidate.
pub fn apply(
    problem: &Problem,
    state: &State,
    action: &StepAction,
    max_depth: usize,
) -> Result<State, EnvError> {
    let candidates = candidate_actions(problem, state, max_depth)?;
    let display = action.display();
    if !candidates.iter().any(|c| c.display() == display) {
        return Err(EnvError::InvalidTransition(display));
    }
    Ok(state.extended(action.clone()))
}

/// Terminal iff solved or at the depth cap.
pub fn is_terminal(state: &State, max_depth: usize) -> bool {
    state.is_solved() || state.depth() >= max_depth
}

/// Compare the committed answer against ground truth. Depth-capped traces
/// that never answered count as failures.
pub fn verify(problem: &Problem, state: &State, max_depth: usize) -> Result<Verdict, EnvError> {
    if !is_terminal(state, max_depth) {
        return Err(EnvError::NonTerminalState);
    }
    let correct = state.answer() == Some(problem.ground_truth);
    Ok(Verdict::from_correct(correct))
}

/// Coarse difficulty rank for curriculum ordering (chain length / shortest
/// path length).
pub fn difficulty_rank(problem: &Problem) -> usize {
    match &problem.spec {
        EnvSpec::ArithChain(spec) => spec.chain_len,
        EnvSpec::GridPlan(_) => problem.ground_truth.unsigned_abs() as usize,
    }
}

/// The canonical correct next step, used by reference walks in tests and for
/// sanity baselines. Returns `None` on terminal states.
pub fn golden_action(problem: &Problem, state: &State, max_depth: usize) -> Option<StepAction> {
    if is_terminal(state, max_depth) {
        return None;
    }
    match &problem.spec {
        EnvSpec::ArithChain(spec) => spec.golden_action(state, problem.ground_truth),
        EnvSpec::GridPlan(spec) => spec.golden_action(state, problem.ground_truth),
    }
}

/// Write problems as line-delimited JSON `{id, env, spec, ground_truth}`.
pub fn save_problems(problems: &[Problem], path: &Path) -> Result<usize, EnvError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for problem in problems {
        serde_json::to_writer(&mut file, problem).map_err(std::io::Error::other)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(problems.len())
}

pub fn load_problems(path: &Path) -> Result<Vec<Problem>, EnvError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut problems = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let problem =
            serde_json::from_str(&line).map_err(|source| EnvError::Parse { line: i + 1, source })?;
        problems.push(problem);
    }
    Ok(problems)
}
