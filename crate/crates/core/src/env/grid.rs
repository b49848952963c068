//! GridPlan: rook-move path planning on a small obstacle grid.
//!
//! Plan steps jump the cursor along an unblocked straight run ("via x,y");
//! once the cursor reaches the goal, the solution step commits the number of
//! rook moves a shortest route needs.

use super::{ActionPayload, Difficulty, EnvSpec, Problem, ProblemId, State, StepAction};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: u8,
    pub height: u8,
    pub obstacles: Vec<(u8, u8)>,
    pub start: (u8, u8),
    pub goal: (u8, u8),
}

impl GridSpec {
    fn blocked(&self, cell: (u8, u8)) -> bool {
        self.obstacles.contains(&cell)
    }

    pub fn statement(&self) -> String {
        let obstacles = self
            .obstacles
            .iter()
            .map(|(x, y)| format!("{x},{y}"))
            .collect::<Vec<_>>()
            .join(" ");
        format!(
            "grid {}x{}; start {},{}; goal {},{}; obstacles {}; count rook moves to goal",
            self.width, self.height, self.start.0, self.start.1, self.goal.0, self.goal.1, obstacles
        )
    }

    /// Cells reachable from `from` by one rook move (straight unblocked run).
    fn rook_moves(&self, from: (u8, u8)) -> Vec<(u8, u8)> {
        let mut moves = Vec::new();
        let (fx, fy) = (from.0 as i16, from.1 as i16);
        for (dx, dy) in [(1i16, 0i16), (-1, 0), (0, 1), (0, -1)] {
            let (mut x, mut y) = (fx + dx, fy + dy);
            while x >= 0 && y >= 0 && x < self.width as i16 && y < self.height as i16 {
                let cell = (x as u8, y as u8);
                if self.blocked(cell) {
                    break;
                }
                moves.push(cell);
                x += dx;
                y += dy;
            }
        }
        moves
    }

    /// Rook-move distances from every cell to the goal; None if unreachable.
    fn distances(&self) -> Vec<Option<u32>> {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut dist: Vec<Option<u32>> = vec![None; w * h];
        let mut queue = VecDeque::new();
        dist[self.goal.1 as usize * w + self.goal.0 as usize] = Some(0);
        queue.push_back(self.goal);
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell.1 as usize * w + cell.0 as usize].unwrap();
            for next in self.rook_moves(cell) {
                let slot = &mut dist[next.1 as usize * w + next.0 as usize];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    fn distance_to_goal(&self, cell: (u8, u8)) -> Option<u32> {
        self.distances()[cell.1 as usize * self.width as usize + cell.0 as usize]
    }

    /// Cursor position and number of plan steps taken so far.
    fn cursor(&self, state: &State) -> ((u8, u8), usize) {
        let mut cursor = self.start;
        let mut steps = 0;
        for action in state.trace() {
            if let ActionPayload::Plan(directive) = &action.payload {
                if let Some(cell) = parse_via(directive) {
                    cursor = cell;
                    steps += 1;
                }
            }
        }
        (cursor, steps)
    }

    pub(super) fn candidates(&self, state: &State, ground_truth: i64) -> Vec<StepAction> {
        let (cursor, steps) = self.cursor(state);
        if cursor != self.goal {
            return self
                .rook_moves(cursor)
                .into_iter()
                .map(|(x, y)| StepAction::plan(format!("via {x},{y}")))
                .collect();
        }
        // Distractors: the trace's actual move count if suboptimal, and the
        // obstacle-free rook count (1 on a shared row/column, else 2).
        let naive = if self.start.0 == self.goal.0 || self.start.1 == self.goal.1 {
            1
        } else {
            2
        };
        vec![ground_truth, steps as i64, naive]
            .into_iter()
            .map(StepAction::solution)
            .collect()
    }

    pub(super) fn golden_action(&self, state: &State, ground_truth: i64) -> Option<StepAction> {
        let (cursor, _) = self.cursor(state);
        if cursor == self.goal {
            return Some(StepAction::solution(ground_truth));
        }
        let dist = self.distance_to_goal(cursor)?;
        self.rook_moves(cursor)
            .into_iter()
            .filter(|&cell| self.distance_to_goal(cell) == Some(dist - 1))
            .min_by_key(|&(x, y)| (y, x))
            .map(|(x, y)| StepAction::plan(format!("via {x},{y}")))
    }
}

fn parse_via(directive: &str) -> Option<(u8, u8)> {
    let rest = directive.strip_prefix("via ")?;
    let (x, y) = rest.split_once(',')?;
    Some((x.trim().parse().ok()?, y.trim().parse().ok()?))
}

pub(super) fn generate(id: ProblemId, difficulty: Difficulty, rng: &mut ChaCha8Rng) -> Problem {
    let size: u8 = match difficulty {
        Difficulty::Easy => 4,
        Difficulty::Medium => 5,
        Difficulty::Hard => 6,
        Difficulty::Mixed => rng.random_range(4..=6),
    };
    loop {
        let start = (0u8, 0u8);
        let goal = (size - 1, size - 1);
        let mut obstacles = Vec::new();
        for y in 0..size {
            for x in 0..size {
                if (x, y) != start && (x, y) != goal && rng.random_bool(0.18) {
                    obstacles.push((x, y));
                }
            }
        }
        let spec = GridSpec {
            width: size,
            height: size,
            obstacles,
            start,
            goal,
        };
        match spec.distance_to_goal(start) {
            // 2..=4 rook moves keeps golden traces within the depth cap and
            // forces at least one turn
            Some(d) if (2..=4).contains(&d) => {
                return Problem {
                    id,
                    ground_truth: d as i64,
                    spec: EnvSpec::GridPlan(spec),
                };
            }
            _ => continue,
        }
    }
}
