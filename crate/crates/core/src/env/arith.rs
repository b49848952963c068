//! ArithChain: integer quantity DAGs with a designated target.
//!
//! The required quantities form a chain q1..qk (each one consumes its
//! predecessor), followed by decoy quantities that reference chain members
//! but are irrelevant to the target. Plan steps pick which quantity to
//! compute next; the solution step commits a final integer answer.

use super::{ActionPayload, Difficulty, EnvSpec, Problem, ProblemId, State, StepAction};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const NUM_DECOYS: usize = 2;
const CONST_RANGE: std::ops::RangeInclusive<i64> = 2..=9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Const(i64),
    /// 1-based index of an earlier quantity.
    Ref(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantityDef {
    pub op: BinOp,
    pub lhs: Operand,
    pub rhs: Operand,
}

/// Quantity DAG. Positions are 1-based; `1..=chain_len` is the required
/// chain (the target is the last chain member), later positions are decoys.
/// Display names follow positions for the chain; decoys always render with
/// the fixed high names `q8`, `q9`, so decoy names never collide with
/// required names across difficulties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArithSpec {
    pub quantities: Vec<QuantityDef>,
    pub chain_len: usize,
}

const DECOY_NAME_BASE: usize = 8;

impl ArithSpec {
    /// Display name of the quantity at 1-based position `pos`.
    pub fn name_of(&self, pos: usize) -> usize {
        if pos <= self.chain_len {
            pos
        } else {
            DECOY_NAME_BASE + (pos - self.chain_len - 1)
        }
    }

    /// Inverse of [`name_of`](Self::name_of).
    fn position_of(&self, name: usize) -> Option<usize> {
        if name >= 1 && name <= self.chain_len {
            Some(name)
        } else if name >= DECOY_NAME_BASE {
            let pos = self.chain_len + 1 + (name - DECOY_NAME_BASE);
            (pos <= self.quantities.len()).then_some(pos)
        } else {
            None
        }
    }

    /// Values of all quantities in position order. Definitions only
    /// reference earlier positions, so a single forward pass suffices.
    fn eval_all(&self) -> Vec<i64> {
        let mut values = Vec::with_capacity(self.quantities.len());
        for def in &self.quantities {
            let resolve = |operand: Operand| match operand {
                Operand::Const(c) => c,
                Operand::Ref(i) => values[i - 1],
            };
            values.push(def.op.apply(resolve(def.lhs), resolve(def.rhs)));
        }
        values
    }

    fn render_operand(&self, operand: Operand) -> String {
        match operand {
            Operand::Const(c) => c.to_string(),
            Operand::Ref(i) => format!("q{}", self.name_of(i)),
        }
    }

    pub fn statement(&self) -> String {
        let mut out = String::new();
        for (i, def) in self.quantities.iter().enumerate() {
            out.push_str(&format!(
                "q{} = {} {} {}; ",
                self.name_of(i + 1),
                self.render_operand(def.lhs),
                def.op.symbol(),
                self.render_operand(def.rhs)
            ));
        }
        out.push_str(&format!("find q{}", self.chain_len));
        out
    }

    fn directive(&self, pos: usize) -> String {
        let def = &self.quantities[pos - 1];
        format!(
            "plan q{} = {} {} {}",
            self.name_of(pos),
            self.render_operand(def.lhs),
            def.op.symbol(),
            self.render_operand(def.rhs)
        )
    }

    /// Positions planned so far, in trace order.
    fn planned(&self, state: &State) -> Vec<usize> {
        let mut planned = Vec::new();
        for action in state.trace() {
            if let ActionPayload::Plan(directive) = &action.payload {
                if let Some(pos) = parse_plan_quantity(directive).and_then(|n| self.position_of(n))
                {
                    if !planned.contains(&pos) {
                        planned.push(pos);
                    }
                }
            }
        }
        planned
    }

    fn all_required_planned(&self, planned: &[usize]) -> bool {
        (1..=self.chain_len).all(|i| planned.contains(&i))
    }

    /// Evaluate the target by walking the trace's plan order, reading any
    /// not-yet-computed reference as 0. Clean dependency-order traces
    /// reproduce the true value; wrong-order traces generally do not.
    fn eval_under_trace(&self, planned: &[usize]) -> i64 {
        let mut computed: BTreeMap<usize, i64> = BTreeMap::new();
        for &idx in planned {
            let def = &self.quantities[idx - 1];
            let resolve = |operand: Operand| match operand {
                Operand::Const(c) => c,
                Operand::Ref(i) => computed.get(&i).copied().unwrap_or(0),
            };
            computed.insert(idx, def.op.apply(resolve(def.lhs), resolve(def.rhs)));
        }
        computed.get(&self.chain_len).copied().unwrap_or(0)
    }

    pub(super) fn candidates(&self, state: &State, ground_truth: i64) -> Vec<StepAction> {
        let planned = self.planned(state);
        if !self.all_required_planned(&planned) {
            return (1..=self.quantities.len())
                .filter(|i| !planned.contains(i))
                .map(|i| StepAction::plan(self.directive(i)))
                .collect();
        }
        let values = self.eval_all();
        let mut answers = vec![ground_truth, self.eval_under_trace(&planned)];
        for &idx in &planned {
            if idx > self.chain_len {
                answers.push(values[idx - 1]);
            }
        }
        answers.into_iter().map(StepAction::solution).collect()
    }

    pub(super) fn golden_action(&self, state: &State, ground_truth: i64) -> Option<StepAction> {
        let planned = self.planned(state);
        if self.all_required_planned(&planned) {
            return Some(StepAction::solution(ground_truth));
        }
        let next = (1..=self.chain_len).find(|i| !planned.contains(i))?;
        Some(StepAction::plan(self.directive(next)))
    }
}

/// Quantity index of a plan directive in this environment's format.
pub fn parse_plan_quantity(directive: &str) -> Option<usize> {
    let rest = directive.strip_prefix("plan q")?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

pub(super) fn generate(id: ProblemId, difficulty: Difficulty, rng: &mut ChaCha8Rng) -> Problem {
    let chain_len = match difficulty {
        Difficulty::Easy => 2,
        Difficulty::Medium => 3,
        Difficulty::Hard => rng.random_range(4..=5usize),
        Difficulty::Mixed => rng.random_range(2..=5usize),
    };
    let mut quantities = Vec::with_capacity(chain_len + NUM_DECOYS);
    quantities.push(QuantityDef {
        op: random_op(rng),
        lhs: Operand::Const(rng.random_range(CONST_RANGE)),
        rhs: Operand::Const(rng.random_range(CONST_RANGE)),
    });
    for i in 2..=chain_len {
        let rhs = if i > 2 && rng.random_bool(0.3) {
            Operand::Ref(rng.random_range(1..i - 1))
        } else {
            Operand::Const(rng.random_range(CONST_RANGE))
        };
        quantities.push(QuantityDef {
            op: random_op(rng),
            lhs: Operand::Ref(i - 1),
            rhs,
        });
    }
    for _ in 0..NUM_DECOYS {
        let lhs = Operand::Ref(rng.random_range(1..=chain_len));
        let rhs = if rng.random_bool(0.5) {
            Operand::Ref(rng.random_range(1..=chain_len))
        } else {
            Operand::Const(rng.random_range(CONST_RANGE))
        };
        quantities.push(QuantityDef {
            op: random_op(rng),
            lhs,
            rhs,
        });
    }
    let spec = ArithSpec {
        quantities,
        chain_len,
    };
    let ground_truth = spec.eval_all()[chain_len - 1];
    Problem {
        id,
        spec: EnvSpec::ArithChain(spec),
        ground_truth,
    }
}

fn random_op(rng: &mut ChaCha8Rng) -> BinOp {
    match rng.random_range(0..3u8) {
        0 => BinOp::Add,
        1 => BinOp::Sub,
        _ => BinOp::Mul,
    }
}
