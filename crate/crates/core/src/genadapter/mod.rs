//! Remote step proposer: lets an external text-generation service supply
//! candidate plan/solution steps during tree expansion.
//!
//! Wire protocol: HTTP POST with JSON body
//! `{state, k, temperature, kind}` answered by
//! `{proposals: [string], logprobs?: [float]}`. Proposals are deduplicated by
//! canonical string; a proposal matching the answer marker becomes a
//! solution step, everything else is a plan step. Priors come from reported
//! log-probabilities when present, else uniform.

pub mod mock;

use crate::env::{Problem, State, StepAction};
use crate::mcts::{Expander, MctsError};
use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::{Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator request: {0}")]
    Config(String),
    #[error("endpoint unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: usize, last: String },
    #[error("protocol error: {message}; body: {body_excerpt}")]
    Protocol {
        message: String,
        body_excerpt: String,
    },
}

/// Request body of the wire protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenRequest {
    /// Problem statement plus the trace so far.
    pub state: String,
    pub k: usize,
    pub temperature: f64,
    /// "plan" or "solution".
    pub kind: String,
}

impl GenRequest {
    fn validate(&self) -> Result<(), GenError> {
        if self.k < 1 {
            return Err(GenError::Config("k must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(GenError::Config("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Response body of the wire protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    pub proposals: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
}

/// Counting semaphore capping in-flight requests.
struct InFlightGate {
    slots: Mutex<usize>,
    cv: Condvar,
}

impl InFlightGate {
    fn new(cap: usize) -> Self {
        InFlightGate {
            slots: Mutex::new(cap.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut slots = self.slots.lock().unwrap();
        while *slots == 0 {
            slots = self.cv.wait(slots).unwrap();
        }
        *slots -= 1;
    }

    fn release(&self) {
        *self.slots.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

/// HTTP client for the step-proposal protocol.
pub struct GenClient {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: usize,
    pub bearer_token: Option<String>,
    gate: InFlightGate,
}

impl GenClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        GenClient {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(5),
            retries: 2,
            bearer_token: None,
            gate: InFlightGate::new(8),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retries(mut self, retries: usize) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.gate = InFlightGate::new(cap);
        self
    }

    fn agent(&self, timeout: Duration) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }

    fn post_once(&self, body: &str, timeout: Duration) -> Result<String, PostFailure> {
        let agent = self.agent(timeout);
        let mut request = agent
            .post(&self.endpoint)
            .header("content-type", "application/json");
        if let Some(token) = &self.bearer_token {
            request = request.header("authorization", format!("Bearer {token}"));
        }
        let mut response = request
            .send(body)
            .map_err(|e| PostFailure::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| PostFailure::Transient(e.to_string()))?;
        if (500..600).contains(&status) {
            return Err(PostFailure::Transient(format!("server status {status}")));
        }
        if status != 200 {
            return Err(PostFailure::Fatal {
                message: format!("unexpected status {status}"),
                body: text,
            });
        }
        Ok(text)
    }

    /// POST the request, retrying transient failures with exponential
    /// backoff, then parse and deduplicate the proposals.
    pub fn propose_steps(&self, request: &GenRequest) -> Result<GenResponse, GenError> {
        request.validate()?;
        let body = serde_json::to_string(request).expect("request serializes");
        self.gate.acquire();
        let result = self.propose_inner(&body, request.k);
        self.gate.release();
        result
    }

    fn propose_inner(&self, body: &str, k: usize) -> Result<GenResponse, GenError> {
        let attempts = self.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(backoff(attempt));
            }
            match self.post_once(body, self.timeout) {
                Ok(text) => return parse_response(&text, k),
                Err(PostFailure::Transient(message)) => last = message,
                Err(PostFailure::Fatal { message, body }) => {
                    return Err(GenError::Protocol {
                        message,
                        body_excerpt: excerpt(&body),
                    });
                }
            }
        }
        Err(GenError::Unavailable { attempts, last })
    }

    /// True iff the endpoint answers a minimal request within `timeout`.
    pub fn health_check(&self, timeout: Duration) -> bool {
        let probe = GenRequest {
            state: "ping".to_string(),
            k: 1,
            temperature: 1.0,
            kind: "plan".to_string(),
        };
        let body = serde_json::to_string(&probe).expect("request serializes");
        matches!(self.post_once(&body, timeout), Ok(_))
    }
}

enum PostFailure {
    Transient(String),
    Fatal { message: String, body: String },
}

fn backoff(attempt: usize) -> Duration {
    let ms = 50u64.saturating_mul(1 << (attempt.min(5) - 1));
    Duration::from_millis(ms.min(1000))
}

fn excerpt(body: &str) -> String {
    let mut s: String = body.chars().take(120).collect();
    if body.len() > 120 {
        s.push_str("...");
    }
    s
}

fn parse_response(text: &str, k: usize) -> Result<GenResponse, GenError> {
    let parsed: GenResponse = serde_json::from_str(text).map_err(|e| GenError::Protocol {
        message: format!("malformed response: {e}"),
        body_excerpt: excerpt(text),
    })?;
    let mut proposals = Vec::new();
    let mut logprobs = parsed.logprobs.as_ref().map(|_| Vec::new());
    let mut seen = std::collections::BTreeSet::new();
    for (i, p) in parsed.proposals.iter().enumerate() {
        if proposals.len() >= k {
            break;
        }
        if seen.insert(p.clone()) {
            proposals.push(p.clone());
            if let (Some(out), Some(lps)) = (logprobs.as_mut(), parsed.logprobs.as_ref()) {
                match lps.get(i) {
                    Some(&lp) => out.push(lp),
                    None => logprobs = None,
                }
            }
        }
    }
    if proposals.is_empty() {
        return Err(GenError::Protocol {
            message: "no proposals returned".to_string(),
            body_excerpt: excerpt(text),
        });
    }
    Ok(GenResponse { proposals, logprobs })
}

/// Expansion source backed by a remote proposer.
pub struct RemoteExpander<'a> {
    pub client: &'a GenClient,
    pub answer_pattern: regex::Regex,
    pub temperature: f64,
}

impl<'a> RemoteExpander<'a> {
    /// Default answer marker: `\boxed{<integer>}`.
    pub fn new(client: &'a GenClient) -> Self {
        RemoteExpander {
            client,
            answer_pattern: regex::Regex::new(r"\\boxed\{(-?[0-9]+)\}").unwrap(),
            temperature: 0.7,
        }
    }

    fn render_state(problem: &Problem, state: &State) -> String {
        let mut out = problem.statement();
        out.push_str(" || steps:");
        for action in state.trace() {
            out.push(' ');
            out.push_str(&action.display());
            out.push(';');
        }
        out
    }

    fn to_action(&self, proposal: &str) -> StepAction {
        if let Some(captures) = self.answer_pattern.captures(proposal) {
            if let Ok(answer) = captures[1].parse::<i64>() {
                return StepAction::solution(answer);
            }
        }
        StepAction::plan(proposal)
    }
}

impl<T: Scalar> Expander<T> for RemoteExpander<'_> {
    fn propose(
        &self,
        problem: &Problem,
        state: &State,
        k: usize,
        _temperature: T,
        max_depth: usize,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(StepAction, T)>, MctsError> {
        // ask for the final answer when only one step remains
        let kind = if state.depth() + 1 >= max_depth {
            "solution"
        } else {
            "plan"
        };
        let request = GenRequest {
            state: Self::render_state(problem, state),
            k,
            temperature: self.temperature,
            kind: kind.to_string(),
        };
        let response = self
            .client
            .propose_steps(&request)
            .map_err(|e| MctsError::Proposer(e.to_string()))?;

        let mut actions: Vec<StepAction> = Vec::new();
        let mut kept_logprobs: Option<Vec<f64>> = response.logprobs.as_ref().map(|_| Vec::new());
        let mut seen = std::collections::BTreeSet::new();
        for (i, proposal) in response.proposals.iter().enumerate() {
            let action = self.to_action(proposal);
            // answer parsing may collapse distinct texts onto one action
            if seen.insert(action.display()) {
                actions.push(action);
                if let (Some(out), Some(lps)) = (kept_logprobs.as_mut(), response.logprobs.as_ref())
                {
                    out.push(lps[i]);
                }
            }
        }
        let priors: Vec<T> = match kept_logprobs {
            Some(lps) => {
                let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = lps.iter().map(|&lp| (lp - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                weights
                    .iter()
                    .map(|w| T::from_f64_c(w / total))
                    .collect()
            }
            None => {
                let uniform = T::one() / T::from_usize(actions.len()).unwrap();
                vec![uniform; actions.len()]
            }
        };
        Ok(actions.into_iter().zip(priors).collect())
    }
}
