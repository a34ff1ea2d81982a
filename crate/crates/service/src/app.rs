use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use aftercast_core::data::{parse_csv, prepare, PredictionSource, PreparedData};
use aftercast_core::feedback::LlmTransport;
use aftercast_core::metrics::per_channel_report;
use aftercast_core::optimize::{search_observed, Episode};
use aftercast_core::{EvalReport, Objective, OptimizerConfig};
use tokio::sync::Semaphore;

use crate::config::ServiceConfig;
use crate::error::{ApiError, ApiResult};
use crate::llm::HttpTransport;
use crate::session::{BestPlan, DataSpec, EventLog, Session, SessionDoc, SessionState, SourceSpec};
use crate::store::Store;

pub(crate) struct Inner {
    pub cfg: ServiceConfig,
    pub store: Store,
    pub sessions: RwLock<HashMap<String, Arc<Session>>>,
    workers: Arc<Semaphore>,
    pub transport: Arc<dyn LlmTransport + Send + Sync>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState(pub(crate) Arc<Inner>);

pub(crate) fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Everything a background round needs, captured when it is started.
struct Job {
    id: String,
    data: DataSpec,
    config: OptimizerConfig,
    round: usize,
    prior: Option<BestPlan>,
}

impl AppState {
    pub async fn open(cfg: ServiceConfig) -> std::io::Result<Self> {
        Self::with_transport(cfg, Arc::new(HttpTransport)).await
    }

    /// Opens the store and restores every session. Sessions that were
    /// optimizing when the process stopped restart their current round.
    pub async fn with_transport(
        cfg: ServiceConfig,
        transport: Arc<dyn LlmTransport + Send + Sync>,
    ) -> std::io::Result<Self> {
        let store = Store::open(&cfg.store)?;
        let docs = store.load_all()?;
        let state = AppState(Arc::new(Inner {
            workers: Arc::new(Semaphore::new(cfg.workers)),
            cfg,
            store,
            sessions: RwLock::new(HashMap::new()),
            transport,
        }));
        for doc in docs {
            let episodes = state.0.store.read_episodes(&doc.id)?;
            let resume = doc.state == SessionState::Optimizing;
            let lines: Vec<String> = if resume {
                let kept: Vec<String> = episodes
                    .into_iter()
                    .filter(|(e, _)| e.round < doc.round)
                    .map(|(_, l)| l)
                    .collect();
                state.0.store.rewrite_episodes(&doc.id, &kept)?;
                kept
            } else {
                episodes.into_iter().map(|(_, l)| l).collect()
            };
            let job = match (resume, &doc.data) {
                (true, Some(data)) => Some(Job {
                    id: doc.id.clone(),
                    data: data.clone(),
                    config: doc.config.clone(),
                    round: doc.round,
                    prior: doc.best.clone(),
                }),
                _ => None,
            };
            let session = Arc::new(Session {
                log: EventLog::new(lines, job.is_some()),
                doc: tokio::sync::Mutex::new(doc),
            });
            let id = session.doc.lock().await.id.clone();
            state.write_sessions().insert(id.clone(), session.clone());
            if let Some(job) = job {
                log::info!("resuming round {} of session {id}", job.round);
                state.spawn_round(session, job);
            }
        }
        Ok(state)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.cfg
    }

    pub(crate) fn store(&self) -> &Store {
        &self.0.store
    }

    fn write_sessions(&self) -> std::sync::RwLockWriteGuard<'_, HashMap<String, Arc<Session>>> {
        self.0.sessions.write().unwrap_or_else(|p| p.into_inner())
    }

    pub(crate) fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.0
            .sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session"))
    }

    pub(crate) fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.0.sessions.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect();
        ids.sort();
        ids
    }

    pub(crate) fn create(&self, config: OptimizerConfig) -> ApiResult<SessionDoc> {
        config.validate()?;
        let doc = SessionDoc::new(uuid::Uuid::new_v4().simple().to_string(), config, now_millis());
        self.0.store.save(&doc).map_err(|e| ApiError::internal(e.to_string()))?;
        let session = Arc::new(Session {
            doc: tokio::sync::Mutex::new(doc.clone()),
            log: EventLog::new(Vec::new(), false),
        });
        self.write_sessions().insert(doc.id.clone(), session);
        Ok(doc)
    }

    /// Moves an idle session into a new round. The caller holds the doc lock.
    pub(crate) fn start_round(&self, session: &Arc<Session>, doc: &mut SessionDoc) -> ApiResult<usize> {
        let data = doc
            .data
            .clone()
            .ok_or_else(|| ApiError::conflict("no data uploaded"))?;
        let start = session.log.len();
        doc.round += 1;
        doc.state = SessionState::Optimizing;
        doc.error = None;
        self.0.store.save(doc).map_err(|e| ApiError::internal(e.to_string()))?;
        session.log.set_running(true);
        self.spawn_round(
            session.clone(),
            Job {
                id: doc.id.clone(),
                data,
                config: doc.config.clone(),
                round: doc.round,
                prior: doc.best.clone(),
            },
        );
        Ok(start)
    }

    fn spawn_round(&self, session: Arc<Session>, job: Job) {
        let state = self.clone();
        tokio::spawn(async move {
            let permit = state.0.workers.clone().acquire_owned().await;
            let (st, s) = (state.clone(), session.clone());
            let result = tokio::task::spawn_blocking(move || run_round(&st.0.store, &s, &job)).await;
            drop(permit);
            let mut doc = session.doc.lock().await;
            match result {
                Ok(Ok((best, report))) => {
                    doc.best = Some(best);
                    doc.interim_report = Some(report);
                    doc.state = SessionState::AwaitingFeedback;
                }
                Ok(Err(e)) => {
                    log::error!("session {}: optimization failed: {e}", doc.id);
                    doc.state = SessionState::Failed;
                    doc.error = Some(e.to_string());
                }
                Err(e) => {
                    log::error!("session {}: optimizer worker died: {e}", doc.id);
                    doc.state = SessionState::Failed;
                    doc.error = Some("optimizer worker died unexpectedly".into());
                }
            }
            if let Err(e) = state.0.store.save(&doc) {
                log::error!("session {}: cannot persist: {e}", doc.id);
            }
            session.log.set_running(false);
        });
    }
}

/// Rebuilds the prepared splits from the persisted upload.
pub(crate) fn load_prepared(store: &Store, id: &str, spec: &DataSpec) -> aftercast_core::Result<PreparedData> {
    let series = parse_csv(&store.read_data(id)?)?;
    let source = match &spec.source {
        SourceSpec::Baseline { kind } => PredictionSource::Baseline(*kind),
        SourceSpec::File { meta } => PredictionSource::File(store.read_predictions(id, meta.clone())?),
    };
    prepare(&series, &spec.dataset, &source)
}

fn run_round(store: &Store, session: &Session, job: &Job) -> aftercast_core::Result<(BestPlan, EvalReport)> {
    let data = load_prepared(store, &job.id, &job.data)?;
    let objective = Objective::new(data.train, data.val)?;
    let mut write_error = None;
    let mut observer = |ep: &Episode| {
        let ep = Episode {
            round: job.round,
            ..ep.clone()
        };
        let line = serde_json::to_string(&ep).expect("episodes serialize");
        if let Err(e) = store.append_episode(&job.id, &line) {
            write_error.get_or_insert(e);
        }
        session.log.push(line);
    };
    let trace = search_observed(&objective, &job.config, &mut observer)?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    let found = BestPlan {
        plan: trace.best_plan,
        val_mse: trace.best_val_mse,
        train_mse: trace.best_train_mse,
        round: job.round,
    };
    let best = match job.prior.clone() {
        Some(prior) if prior.val_mse <= found.val_mse => prior,
        _ => found,
    };
    let val = objective.val();
    let corrected = val.with_predictions(best.plan.apply(val.predictions(), val.sample_ids())?)?;
    let mut report = per_channel_report(val, &corrected)?;
    report.train_consistent = Some(objective.is_consistent(best.train_mse));
    Ok((best, report))
}
