use std::sync::{Arc, RwLock};

use aftercast_core::data::{BaselineKind, DataSummary, DatasetConfig, PredictionMeta};
use aftercast_core::feedback::FeedbackDirective;
use aftercast_core::{CorrectionPlan, EvalReport, OptimizerConfig};
use serde::{Deserialize, Serialize};
use tokio::sync::{watch, Mutex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Created,
    DataLoaded,
    Optimizing,
    AwaitingFeedback,
    Finalized,
    Failed,
}

impl SessionState {
    pub fn name(self) -> &'static str {
        match self {
            SessionState::Created => "created",
            SessionState::DataLoaded => "data_loaded",
            SessionState::Optimizing => "optimizing",
            SessionState::AwaitingFeedback => "awaiting_feedback",
            SessionState::Finalized => "finalized",
            SessionState::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SourceSpec {
    Baseline { kind: BaselineKind },
    /// Prediction CSV stored next to the data; its sidecar lives here.
    File { meta: PredictionMeta },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub dataset: DatasetConfig,
    pub source: SourceSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    /// Round the directive was submitted after.
    pub round: usize,
    pub directive: FeedbackDirective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestPlan {
    pub plan: CorrectionPlan,
    pub val_mse: f64,
    pub train_mse: f64,
    pub round: usize,
}

/// The persisted session document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionDoc {
    pub id: String,
    pub state: SessionState,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    /// Configuration given at creation; feedback is always injected into it.
    pub base_config: OptimizerConfig,
    /// Configuration of the next or current round.
    pub config: OptimizerConfig,
    pub data: Option<DataSpec>,
    pub summary: Option<DataSummary>,
    /// Rounds started so far.
    pub round: usize,
    pub feedback: Vec<FeedbackEntry>,
    pub best: Option<BestPlan>,
    /// Validation-only report of the current best plan.
    pub interim_report: Option<EvalReport>,
    pub final_report: Option<EvalReport>,
    pub error: Option<String>,
}

impl SessionDoc {
    pub fn new(id: String, config: OptimizerConfig, created_at: u64) -> Self {
        Self {
            id,
            state: SessionState::Created,
            created_at,
            base_config: config.clone(),
            config,
            data: None,
            summary: None,
            round: 0,
            feedback: Vec::new(),
            best: None,
            interim_report: None,
            final_report: None,
            error: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    pub len: usize,
    pub running: bool,
}

/// Append-only episode log with change notification. Readers keep their
/// own offsets.
#[derive(Debug)]
pub struct EventLog {
    lines: RwLock<Vec<Arc<str>>>,
    tx: watch::Sender<Progress>,
}

impl EventLog {
    pub fn new(lines: Vec<String>, running: bool) -> Self {
        let lines: Vec<Arc<str>> = lines.into_iter().map(Arc::from).collect();
        let (tx, _) = watch::channel(Progress {
            len: lines.len(),
            running,
        });
        Self {
            lines: RwLock::new(lines),
            tx,
        }
    }

    pub fn push(&self, line: String) {
        let len = {
            let mut lines = self.lines.write().unwrap_or_else(|p| p.into_inner());
            lines.push(Arc::from(line));
            lines.len()
        };
        self.tx.send_modify(|p| p.len = len);
    }

    pub fn len(&self) -> usize {
        self.lines.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn get(&self, index: usize) -> Option<Arc<str>> {
        self.lines.read().unwrap_or_else(|p| p.into_inner()).get(index).cloned()
    }

    pub fn since(&self, from: usize) -> Vec<Arc<str>> {
        let lines = self.lines.read().unwrap_or_else(|p| p.into_inner());
        lines.get(from..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn set_running(&self, running: bool) {
        self.tx.send_modify(|p| p.running = running);
    }

    pub fn is_running(&self) -> bool {
        self.tx.borrow().running
    }

    pub fn subscribe(&self) -> watch::Receiver<Progress> {
        self.tx.subscribe()
    }
}

/// In-memory handle: the document behind the per-session write lock, plus
/// the episode log.
#[derive(Debug)]
pub struct Session {
    pub doc: Mutex<SessionDoc>,
    pub log: EventLog,
}
