//! Deterministic fixture-replay client.
//!
//! A fixture is JSONL, one entry per line:
//!
//! ```text
//! {"match": {"mode": "by_id", "key": "doc-7"}, "response": "negative",
//!  "failures_before_success": 2, "latency_ms": 0}
//! ```
//!
//! `by_id` entries answer requests for that instance id. `sequence` entries
//! answer the remaining requests in file order, each consumed once.
//! `failures_before_success` makes the entry fail with an injected transport
//! error that many times first.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::client::{ChatRequest, LlmClient, TransportError};
use super::prompt::AnswerFormat;
use crate::data::UnlabeledPool;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Sequence,
    ById,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchRule {
    pub mode: MatchMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    #[serde(rename = "match")]
    pub rule: MatchRule,
    pub response: String,
    #[serde(default)]
    pub failures_before_success: u32,
    #[serde(default)]
    pub latency_ms: u64,
}

impl FixtureEntry {
    pub fn by_id(id: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            rule: MatchRule {
                mode: MatchMode::ById,
                key: Some(id.into()),
            },
            response: response.into(),
            failures_before_success: 0,
            latency_ms: 0,
        }
    }

    pub fn sequence(response: impl Into<String>) -> Self {
        Self {
            rule: MatchRule {
                mode: MatchMode::Sequence,
                key: None,
            },
            response: response.into(),
            failures_before_success: 0,
            latency_ms: 0,
        }
    }

    pub fn failing(mut self, times: u32) -> Self {
        self.failures_before_success = times;
        self
    }
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot read fixture: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Default)]
struct MockState {
    next_sequence: usize,
    failures_used: Vec<u32>,
    calls: usize,
}

#[derive(Debug)]
pub struct MockClient {
    entries: Vec<FixtureEntry>,
    by_id: HashMap<String, usize>,
    sequence: Vec<usize>,
    state: Mutex<MockState>,
}

impl MockClient {
    pub fn new(entries: Vec<FixtureEntry>) -> Result<Self, FixtureError> {
        let mut by_id = HashMap::new();
        let mut sequence = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            match e.rule.mode {
                MatchMode::ById => {
                    let key = e.rule.key.clone().ok_or_else(|| FixtureError::Malformed {
                        line: i + 1,
                        message: "by_id entry needs a key".into(),
                    })?;
                    if by_id.insert(key.clone(), i).is_some() {
                        return Err(FixtureError::Malformed {
                            line: i + 1,
                            message: format!("duplicate key {key:?}"),
                        });
                    }
                }
                MatchMode::Sequence => sequence.push(i),
            }
        }
        let state = MockState {
            failures_used: vec![0; entries.len()],
            ..Default::default()
        };
        Ok(Self {
            entries,
            by_id,
            sequence,
            state: Mutex::new(state),
        })
    }

    pub fn parse_jsonl(s: &str) -> Result<Self, FixtureError> {
        let mut entries = Vec::new();
        for (i, line) in s.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: FixtureEntry = serde_json::from_str(line).map_err(|e| FixtureError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn from_path(path: &Path) -> Result<Self, FixtureError> {
        Self::parse_jsonl(&std::fs::read_to_string(path)?)
    }

    /// Number of `complete` calls so far, failed ones included.
    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().calls
    }
}

impl LlmClient for MockClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let (idx, outcome) = {
            let mut st = self.state.lock().unwrap();
            st.calls += 1;
            let idx = match self.by_id.get(&request.instance_id) {
                Some(&i) => i,
                None => match self.sequence.get(st.next_sequence) {
                    Some(&i) => i,
                    None => return Err(TransportError::FixtureMiss(request.instance_id.clone())),
                },
            };
            let entry = &self.entries[idx];
            if st.failures_used[idx] < entry.failures_before_success {
                st.failures_used[idx] += 1;
                (idx, Err(TransportError::Injected))
            } else {
                if entry.rule.mode == MatchMode::Sequence {
                    st.next_sequence += 1;
                }
                (idx, Ok(entry.response.clone()))
            }
        };
        let latency = self.entries[idx].latency_ms;
        if latency > 0 {
            std::thread::sleep(Duration::from_millis(latency));
        }
        outcome
    }
}

/// Serialize fixture entries as JSONL.
pub fn fixtures_to_jsonl(entries: &[FixtureEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect()
}

/// Script a by-id fixture over `pool` whose labels match the shadow gold
/// labels for exactly `round(accuracy * n)` instances (chosen by `seed`);
/// the others get a uniformly drawn wrong class. Confidence flags and scores
/// are drawn higher for correct labels than for wrong ones.
pub fn script_fixture(
    pool: &UnlabeledPool,
    accuracy: f64,
    format: AnswerFormat,
    seed: u64,
) -> Vec<FixtureEntry> {
    let names = pool.class_names();
    let c = names.len();
    let mut ids: Vec<(&str, usize)> = pool
        .instances()
        .iter()
        .filter_map(|p| pool.shadow().get(&p.id).map(|g| (p.id.as_str(), g)))
        .collect();
    ids.sort();
    let n = ids.len();
    let n_correct = ((accuracy.clamp(0.0, 1.0) * n as f64) + 0.5).floor() as usize;
    let mut rng = seed::rng(seed);
    let mut correct = vec![false; n];
    for i in index::sample(&mut rng, n, n_correct.min(n)) {
        correct[i] = true;
    }
    ids.iter()
        .zip(&correct)
        .map(|(&(id, gold), &ok)| {
            let label = if ok || c < 2 {
                gold
            } else {
                (gold + 1 + rng.gen_range(0..c - 1)) % c
            };
            let mut response = names[label].clone();
            match format {
                AnswerFormat::Label => {}
                AnswerFormat::LabelConfidence => {
                    let p = if ok { 0.9 } else { 0.3 };
                    let yes = rng.gen_bool(p);
                    response.push_str(if yes { " | confident: yes" } else { " | confident: no" });
                }
                AnswerFormat::LabelScore => {
                    let s: f64 = if ok {
                        rng.gen_range(0.6..1.0)
                    } else {
                        rng.gen_range(0.2..0.9)
                    };
                    response.push_str(&format!(" | score: {s:.3}"));
                }
            }
            FixtureEntry::by_id(id, response)
        })
        .collect()
}
