//! Plan-tree search: PUCT selection, policy-sampled expansion, terminal or
//! value-model evaluation, and bottom-up backup.
//!
//! Selection maximizes `Q(s,a) + c_puct * pi(a|s) * sqrt(N(s)) / (1 + N(s,a))`.
//! Backup propagates a leaf value to the root with
//!
//! ```text
//! Q(s_t, a_t) <- r(s_t, a_t) + V(s_t+1)        (r = 0 for internal steps)
//! V(s_t)      <- sum_a N(s_t+1) Q(s_t, a_t) / sum_a N(s_t+1)
//! N(s_t)      <- N(s_t) + 1
//! ```
//!
//! Terminal leaves carry their verdict reward (+1/-1) and are never averaged
//! with value-model output, so every V and Q stays inside [-1, 1].

use crate::env::{self, Problem, State, StepAction, Verdict};
use crate::policy::{self, PolicyError, PolicyParams};
use crate::scalar::Scalar;
use crate::value::{self, ValueParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MctsError {
    #[error("invalid search config: {0}")]
    BadConfig(String),
    #[error("node {0} is not expanded")]
    NotExpanded(usize),
    #[error("node {0} is already expanded")]
    AlreadyExpanded(usize),
    #[error("cannot expand terminal node {0}")]
    TerminalExpand(usize),
    #[error("priors length {got} does not match {expected} children")]
    PriorsMismatch { got: usize, expected: usize },
    #[error("backup path is empty")]
    EmptyPath,
    #[error("simulation {sim}: {source}")]
    Simulation {
        sim: usize,
        #[source]
        source: Box<MctsError>,
    },
    #[error(transparent)]
    Env(#[from] env::EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("remote proposer: {0}")]
    Proposer(String),
}

/// Search hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Scalar"))]
pub struct SearchConfig<T> {
    pub c_puct: T,
    pub n_simulations: usize,
    pub root_children: usize,
    pub inner_children: usize,
    pub max_depth: usize,
    pub temperature: T,
    pub rng_seed: u64,
}

impl<T: Scalar> Default for SearchConfig<T> {
    fn default() -> Self {
        SearchConfig {
            c_puct: T::from_f64_c(1.5),
            n_simulations: 100,
            root_children: 5,
            inner_children: 3,
            max_depth: 6,
            temperature: T::from_f64_c(0.7),
            rng_seed: 0,
        }
    }
}

impl<T: Scalar> SearchConfig<T> {
    pub fn validate(&self) -> Result<(), MctsError> {
        if self.c_puct <= T::zero() {
            return Err(MctsError::BadConfig("c_puct must be > 0".into()));
        }
        if self.temperature <= T::zero() {
            return Err(MctsError::BadConfig("temperature must be > 0".into()));
        }
        if self.n_simulations == 0
            || self.root_children == 0
            || self.inner_children == 0
            || self.max_depth == 0
        {
            return Err(MctsError::BadConfig("counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// One node of the search tree (arena-indexed).
#[derive(Debug, Clone)]
pub struct TreeNode<T> {
    pub state: State,
    pub parent: Option<usize>,
    pub incoming_action: Option<StepAction>,
    pub children: Vec<usize>,
    /// Prior probability of the incoming edge, renormalized over siblings.
    pub prior: T,
    pub n: u32,
    pub v: T,
    pub q_edge: T,
    pub expanded: bool,
    pub terminal_verdict: Option<Verdict>,
}

impl<T: Scalar> TreeNode<T> {
    fn new(state: State, parent: Option<usize>, incoming_action: Option<StepAction>, prior: T) -> Self {
        TreeNode {
            state,
            parent,
            incoming_action,
            children: Vec::new(),
            prior,
            n: 0,
            v: T::zero(),
            q_edge: T::zero(),
            expanded: false,
            terminal_verdict: None,
        }
    }
}

/// Source of child actions during expansion. The built-in policy samples
/// from the environment's candidate universe; a remote proposer may inject
/// free-form steps instead.
pub trait Expander<T: Scalar> {
    fn propose(
        &self,
        problem: &Problem,
        state: &State,
        k: usize,
        temperature: T,
        max_depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(StepAction, T)>, MctsError>;
}

/// Expansion through the featurized softmax policy.
pub struct PolicyExpander<'a, T> {
    pub params: &'a PolicyParams<T>,
}

impl<T: Scalar> Expander<T> for PolicyExpander<'_, T> {
    fn propose(
        &self,
        problem: &Problem,
        state: &State,
        k: usize,
        temperature: T,
        max_depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(StepAction, T)>, MctsError> {
        let candidates = env::candidate_actions(problem, state, max_depth)?;
        let sampled = policy::sample_distinct(self.params, state, &candidates, k, temperature, rng)?;
        let log_probs = policy::log_probs(self.params, state, &sampled)?;
        Ok(sampled
            .into_iter()
            .zip(log_probs.into_iter().map(|lp| lp.exp()))
            .collect())
    }
}

/// The search tree over one problem.
#[derive(Debug, Clone)]
pub struct PlanTree<T> {
    pub nodes: Vec<TreeNode<T>>,
    pub problem: Problem,
    pub config: SearchConfig<T>,
}

impl<T: Scalar> PlanTree<T> {
    pub fn new(problem: Problem, config: SearchConfig<T>) -> Self {
        let root = TreeNode::new(State::initial(problem.id.clone()), None, None, T::one());
        PlanTree {
            nodes: vec![root],
            problem,
            config,
        }
    }

    pub fn root(&self) -> &TreeNode<T> {
        &self.nodes[0]
    }

    fn is_terminal(&self, node: usize) -> bool {
        env::is_terminal(&self.nodes[node].state, self.config.max_depth)
    }

    /// PUCT argmax over the children of `node`; ties break to the lowest
    /// index. Unvisited edges score with Q = 0.
    pub fn select_child(&self, node: usize, c_puct: T, priors: &[T]) -> Result<usize, MctsError> {
        let parent = &self.nodes[node];
        if !parent.expanded || parent.children.is_empty() {
            return Err(MctsError::NotExpanded(node));
        }
        if priors.len() != parent.children.len() {
            return Err(MctsError::PriorsMismatch {
                got: priors.len(),
                expected: parent.children.len(),
            });
        }
        let sqrt_n = T::from_u32(parent.n).unwrap().sqrt();
        let mut best = 0usize;
        let mut best_score = T::neg_infinity();
        for (i, &child_idx) in parent.children.iter().enumerate() {
            let child = &self.nodes[child_idx];
            let q = if child.n > 0 { child.q_edge } else { T::zero() };
            let explore =
                c_puct * priors[i] * sqrt_n / (T::one() + T::from_u32(child.n).unwrap());
            let score = q + explore;
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        Ok(best)
    }

    /// Create children for `node` by sampling the expander.
    pub fn expand(
        &mut self,
        node: usize,
        expander: &dyn Expander<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), MctsError> {
        if self.nodes[node].expanded {
            return Err(MctsError::AlreadyExpanded(node));
        }
        if self.is_terminal(node) {
            return Err(MctsError::TerminalExpand(node));
        }
        let k = if node == 0 {
            self.config.root_children
        } else {
            self.config.inner_children
        };
        let state = self.nodes[node].state.clone();
        let proposals = expander.propose(
            &self.problem,
            &state,
            k,
            self.config.temperature,
            self.config.max_depth,
            rng,
        )?;
        for (action, prior) in proposals {
            let child_state = state.extended(action.clone());
            let child = TreeNode::new(child_state, Some(node), Some(action), prior);
            let child_idx = self.nodes.len();
            self.nodes.push(child);
            self.nodes[node].children.push(child_idx);
        }
        self.nodes[node].expanded = true;
        Ok(())
    }

    /// Leaf evaluation: verdict reward at terminals (cached), value-model
    /// prediction elsewhere.
    pub fn evaluate(&mut self, node: usize, value_params: &ValueParams<T>) -> T {
        if self.is_terminal(node) {
            let verdict = match self.nodes[node].terminal_verdict {
                Some(v) => v,
                None => {
                    let v =
                        env::verify(&self.problem, &self.nodes[node].state, self.config.max_depth)
                            .expect("terminal state verifies");
                    self.nodes[node].terminal_verdict = Some(v);
                    v
                }
            };
            T::from_i8(verdict.reward).unwrap()
        } else {
            let feats = policy::featurize_state(&self.nodes[node].state, value_params.feature_dim);
            value::predict_from_features(value_params, &feats)
        }
    }

    /// Bottom-up update along a root-to-leaf path.
    pub fn backup(&mut self, path: &[usize], leaf_value: T) -> Result<(), MctsError> {
        let Some(&leaf) = path.last() else {
            return Err(MctsError::EmptyPath);
        };
        {
            let terminal = self.is_terminal(leaf);
            let weighted = self.weighted_child_value(leaf);
            let node = &mut self.nodes[leaf];
            node.n += 1;
            node.v = if terminal {
                leaf_value
            } else {
                weighted.unwrap_or(leaf_value)
            };
        }
        for window in (0..path.len() - 1).rev() {
            let (parent, child) = (path[window], path[window + 1]);
            // internal step reward is 0; only terminals carry +/-1
            let child_v = self.nodes[child].v;
            self.nodes[child].q_edge = child_v;
            if let Some(v) = self.weighted_child_value(parent) {
                self.nodes[parent].v = v;
            }
            self.nodes[parent].n += 1;
        }
        Ok(())
    }

    /// Visit-weighted mean of visited-children Q values, if any child was
    /// visited.
    fn weighted_child_value(&self, node: usize) -> Option<T> {
        let mut num = T::zero();
        let mut den = T::zero();
        for &child_idx in &self.nodes[node].children {
            let child = &self.nodes[child_idx];
            if child.n > 0 {
                let w = T::from_u32(child.n).unwrap();
                num += w * child.q_edge;
                den += w;
            }
        }
        (den > T::zero()).then(|| num / den)
    }

    /// Value labels for the value model: every visited node's (state, V).
    pub fn value_labels(&self) -> Vec<(String, T)> {
        self.nodes
            .iter()
            .filter(|n| n.n >= 1)
            .map(|n| (n.state.canonical_key(), n.v))
            .collect()
    }

    /// Pre-order dump with remapped node ids.
    pub fn dump(&self) -> TreeDump<T> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            let id = nodes.len();
            remap[idx] = id;
            nodes.push(NodeDump {
                id,
                parent_id: node.parent.map(|p| remap[p]),
                action_display: node.incoming_action.as_ref().map(|a| a.display()),
                action_kind: node.incoming_action.as_ref().map(|a| match a.kind() {
                    env::ActionKind::Plan => "plan".to_string(),
                    env::ActionKind::Solution => "solution".to_string(),
                }),
                n: node.n,
                v: node.v,
                q_edge: node.q_edge,
                terminal: self.is_terminal(idx),
                correct: node.terminal_verdict.map(|v| v.correct),
            });
            // push children reversed so they pop in order
            for &child in node.children.iter().rev() {
                stack.push(child);
            }
        }
        TreeDump {
            problem_id: self.problem.id.0.clone(),
            nodes,
        }
    }

    pub fn dump_json(&self) -> String {
        serde_json::to_string(&self.dump()).expect("tree dump serializes")
    }
}

/// JSON tree dump: nodes in pre-order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDump<T> {
    pub problem_id: String,
    pub nodes: Vec<NodeDump<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDump<T> {
    pub id: usize,
    pub parent_id: Option<usize>,
    pub action_display: Option<String>,
    pub action_kind: Option<String>,
    pub n: u32,
    pub v: T,
    pub q_edge: T,
    pub terminal: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

impl<T: Scalar> TreeDump<T> {
    /// Rebuild every node's state by walking parent pointers.
    pub fn states(&self) -> Vec<State> {
        let mut states: Vec<State> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let state = match node.parent_id {
                None => State::initial(env::ProblemId(self.problem_id.clone())),
                Some(p) => {
                    let action =
                        StepAction::from_display(node.action_display.as_deref().unwrap_or(""));
                    states[p].extended(action)
                }
            };
            states.push(state);
        }
        states
    }

    /// Canonical state key of every node.
    pub fn state_keys(&self) -> Vec<String> {
        self.states().iter().map(|s| s.canonical_key()).collect()
    }

    /// Value labels (visited nodes only) reconstructed from the dump.
    pub fn value_labels(&self) -> Vec<(String, T)> {
        let keys = self.state_keys();
        self.nodes
            .iter()
            .zip(keys)
            .filter(|(n, _)| n.n >= 1)
            .map(|(n, key)| (key, n.v))
            .collect()
    }
}

/// Run a full search with the built-in policy as the expansion source.
pub fn run_search<T: Scalar>(
    problem: &Problem,
    policy_params: &PolicyParams<T>,
    value_params: &ValueParams<T>,
    config: &SearchConfig<T>,
) -> Result<PlanTree<T>, MctsError> {
    let expander = PolicyExpander {
        params: policy_params,
    };
    run_search_with(problem, &expander, value_params, config)
}

/// Run a full search with an arbitrary expansion source.
pub fn run_search_with<T: Scalar>(
    problem: &Problem,
    expander: &dyn Expander<T>,
    value_params: &ValueParams<T>,
    config: &SearchConfig<T>,
) -> Result<PlanTree<T>, MctsError> {
    config.validate()?;
    let mut tree = PlanTree::new(problem.clone(), config.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    for sim in 0..config.n_simulations {
        simulate(&mut tree, expander, value_params, &mut rng).map_err(|source| {
            MctsError::Simulation {
                sim,
                source: Box::new(source),
            }
        })?;
    }
    Ok(tree)
}

fn simulate<T: Scalar>(
    tree: &mut PlanTree<T>,
    expander: &dyn Expander<T>,
    value_params: &ValueParams<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(), MctsError> {
    let mut node = 0usize;
    let mut path = vec![0usize];
    while tree.nodes[node].expanded && !tree.is_terminal(node) {
        let priors: Vec<T> = tree.nodes[node]
            .children
            .iter()
            .map(|&c| tree.nodes[c].prior)
            .collect();
        let choice = tree.select_child(node, tree.config.c_puct, &priors)?;
        node = tree.nodes[node].children[choice];
        path.push(node);
    }
    if !tree.is_terminal(node) && !tree.nodes[node].expanded {
        tree.expand(node, expander, rng)?;
    }
    let leaf_value = tree.evaluate(node, value_params);
    tree.backup(&path, leaf_value)
}
