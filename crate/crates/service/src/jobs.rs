//! Experiment jobs, executed one at a time by a background worker.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex, RwLock};
use std::thread;

use chrono::{DateTime, Utc};
use lossatlas_core::atlas::{run_experiment, Manifest, Progress, RunOptions};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::store::{ExperimentStatus, ExperimentStore, Registration};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Complete,
    Partial,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Complete | JobState::Partial | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub experiment_id: String,
    pub state: JobState,
    /// Stage most recently reported by the pipeline.
    pub stage: Option<String>,
    /// Completed fraction of all pipeline items, never decreasing.
    pub progress: f64,
    pub errors: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl JobRecord {
    fn new(job_id: String, experiment_id: String) -> Self {
        let now = Utc::now();
        Self {
            job_id,
            experiment_id,
            state: JobState::Queued,
            stage: None,
            progress: 0.0,
            errors: Vec::new(),
            created_at: now,
            updated_at: now,
        }
    }

    /// Record pipeline progress. Ignored once the job is terminal.
    pub fn advance(&mut self, stage: &str, fraction: f64) {
        if self.state.is_terminal() {
            return;
        }
        self.state = JobState::Running;
        self.stage = Some(stage.to_string());
        if fraction.is_finite() {
            self.progress = self.progress.max(fraction.clamp(0.0, 1.0));
        }
        self.updated_at = Utc::now();
    }

    /// Move to a terminal state. Ignored once the job is terminal.
    pub fn finish(&mut self, state: JobState, errors: Vec<String>) {
        if self.state.is_terminal() || !state.is_terminal() {
            return;
        }
        self.state = state;
        if state != JobState::Failed {
            self.progress = 1.0;
        }
        self.errors = errors;
        self.updated_at = Utc::now();
    }
}

struct Job {
    job_id: String,
    manifest: Manifest,
}

type JobTable = Arc<RwLock<BTreeMap<String, JobRecord>>>;

pub struct JobQueue {
    store: Arc<ExperimentStore>,
    jobs: JobTable,
    sender: Mutex<mpsc::Sender<Job>>,
    next_id: AtomicU64,
}

impl JobQueue {
    /// Start the worker thread.
    pub fn start(store: Arc<ExperimentStore>) -> Self {
        let (sender, receiver) = mpsc::channel::<Job>();
        let jobs: JobTable = Arc::default();
        let worker_jobs = Arc::clone(&jobs);
        let worker_store = Arc::clone(&store);
        thread::Builder::new()
            .name("lossatlas-worker".into())
            .spawn(move || {
                while let Ok(job) = receiver.recv() {
                    execute(&worker_store, &worker_jobs, job);
                }
            })
            .expect("spawn worker thread");
        Self {
            store,
            jobs,
            sender: Mutex::new(sender),
            next_id: AtomicU64::new(1),
        }
    }

    /// Queue `manifest`. A manifest that is already stored or in flight
    /// yields a record for the existing experiment instead of a new run.
    pub fn submit(&self, manifest: Manifest) -> Result<JobRecord> {
        let mut jobs = self.jobs.write().expect("job table lock");
        let registration = self.store.register(&manifest)?;
        let experiment_id = match &registration {
            Registration::Started(e) | Registration::Existing(e) => e.experiment_id.clone(),
        };
        if let Registration::Existing(entry) = &registration {
            if entry.status == ExperimentStatus::Running {
                if let Some(active) = jobs
                    .values()
                    .find(|j| j.experiment_id == experiment_id && !j.state.is_terminal())
                {
                    return Ok(active.clone());
                }
            }
        }

        let job_id = format!("job-{:06}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let mut record = JobRecord::new(job_id.clone(), experiment_id);
        match registration {
            Registration::Existing(entry) if entry.status != ExperimentStatus::Running => {
                let state = match entry.status {
                    ExperimentStatus::Partial => JobState::Partial,
                    _ => JobState::Complete,
                };
                record.finish(state, Vec::new());
                jobs.insert(job_id, record.clone());
            }
            _ => {
                jobs.insert(job_id.clone(), record.clone());
                self.sender
                    .lock()
                    .expect("sender lock")
                    .send(Job { job_id, manifest })
                    .expect("worker thread alive");
            }
        }
        Ok(record)
    }

    pub fn get(&self, job_id: &str) -> Option<JobRecord> {
        self.jobs.read().expect("job table lock").get(job_id).cloned()
    }
}

fn update(jobs: &JobTable, job_id: &str, f: impl FnOnce(&mut JobRecord)) {
    if let Some(r) = jobs.write().expect("job table lock").get_mut(job_id) {
        f(r);
    }
}

fn execute(store: &ExperimentStore, jobs: &JobTable, job: Job) {
    let experiment_id = job.manifest.experiment_id();
    tracing::info!(job_id = %job.job_id, %experiment_id, "job started");
    update(jobs, &job.job_id, |r| r.advance("train", 0.0));
    let progress = |p: Progress| update(jobs, &job.job_id, |r| r.advance(p.stage.name(), p.fraction()));
    let options = RunOptions {
        cache_dir: Some(store.cache_dir()),
        progress: Some(&progress),
    };
    let outcome = catch_unwind(AssertUnwindSafe(|| run_experiment(&job.manifest, &options)));
    let result = match outcome {
        Ok(Ok((bundle, _))) => store.save_bundle(&bundle).map(|_| bundle),
        Ok(Err(e)) => Err(e.into()),
        Err(_) => Err(crate::error::StoreError::Core(lossatlas_core::Error::Precondition(
            "pipeline panicked".into(),
        ))),
    };
    match result {
        Ok(bundle) => {
            let errors: Vec<String> = bundle
                .errors
                .iter()
                .map(|e| format!("{} {}: {}", e.stage, e.item, e.message))
                .collect();
            let state = if errors.is_empty() {
                JobState::Complete
            } else {
                JobState::Partial
            };
            tracing::info!(job_id = %job.job_id, %experiment_id, ?state, "job finished");
            update(jobs, &job.job_id, |r| r.finish(state, errors));
        }
        Err(e) => {
            tracing::error!(job_id = %job.job_id, %experiment_id, error = %e, "job failed");
            if let Err(e) = store.abandon(&experiment_id) {
                tracing::error!(%experiment_id, error = %e, "could not drop failed experiment");
            }
            update(jobs, &job.job_id, |r| r.finish(JobState::Failed, vec![e.to_string()]));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn progress_never_decreases_and_terminal_state_is_final() {
        let mut r = JobRecord::new("j".into(), "e".into());
        r.advance("train", 0.4);
        r.advance("local", 0.2);
        assert_eq!(r.progress, 0.4);
        assert_eq!(r.stage.as_deref(), Some("local"));
        r.finish(JobState::Complete, vec![]);
        r.advance("pairs", 0.9);
        r.finish(JobState::Failed, vec!["late".into()]);
        assert_eq!(r.state, JobState::Complete);
        assert_eq!(r.progress, 1.0);
        assert!(r.errors.is_empty());
    }

    #[test]
    fn non_terminal_finish_is_ignored() {
        let mut r = JobRecord::new("j".into(), "e".into());
        r.finish(JobState::Running, vec![]);
        assert_eq!(r.state, JobState::Queued);
    }
}
