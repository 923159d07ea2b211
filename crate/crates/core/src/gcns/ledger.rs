use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ConceptMask;
use crate::container::{ArtifactKind, Container};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Archived outcome of one learned concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: usize,
    pub concept_token: String,
    pub concept_id: usize,
    pub p: f64,
    pub seed: u64,
    pub mask: ConceptMask,
    /// Hash of the full parameter vector after this task.
    pub theta_old_hash: String,
}

/// Historical masks and the parameter snapshot taken after the last task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLedger {
    pub d_ca: usize,
    pub tasks: Vec<TaskRecord>,
    history: ConceptMask,
    pub theta_old: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LedgerRecord {
    Header { d_ca: usize, history: String },
    Task(StoredTask),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredTask {
    task_id: usize,
    concept_token: String,
    concept_id: usize,
    p: f64,
    seed: u64,
    mask: String,
    theta_old_hash: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Artifact("odd-length hex mask".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| Error::Artifact(format!("bad hex mask: {e}"))))
        .collect()
}

impl TaskLedger {
    /// Empty ledger with `θ_old` set to the pretrained weights.
    pub fn new(d_ca: usize, theta: &[f64]) -> Self {
        Self {
            d_ca,
            tasks: Vec::new(),
            history: ConceptMask::zeros(d_ca, 0, None),
            theta_old: theta.to_vec(),
        }
    }

    /// `M_{<t}` for the next task.
    pub fn history_mask(&self) -> &ConceptMask {
        &self.history
    }

    /// OR of the archived task masks, refolded from scratch.
    pub fn refold_history(&self) -> ConceptMask {
        let mut m = ConceptMask::zeros(self.d_ca, 0, None);
        for t in &self.tasks {
            m.or_assign(&t.mask).expect("archived masks share the index space");
        }
        m
    }

    pub fn next_task_id(&self) -> usize {
        self.tasks.len() + 1
    }

    pub fn contains_concept(&self, token: &str) -> bool {
        self.tasks.iter().any(|t| t.concept_token == token)
    }

    /// Archives `record` and moves `θ_old` to `theta`.
    pub fn push(&mut self, record: TaskRecord, theta: &[f64]) -> Result<()> {
        if record.task_id != self.next_task_id() {
            return Err(Error::State(format!(
                "task id {} collides with ledger (next is {})",
                record.task_id,
                self.next_task_id()
            )));
        }
        if self.contains_concept(&record.concept_token) {
            return Err(Error::State(format!(
                "concept `{}` was already learned",
                record.concept_token
            )));
        }
        if record.mask.len != self.d_ca {
            return Err(Error::shape("ledger", "mask index space differs"));
        }
        self.history.or_assign(&record.mask)?;
        self.history.task = record.task_id;
        self.tasks.push(record);
        self.theta_old = theta.to_vec();
        Ok(())
    }

    pub fn theta_old_hash(&self) -> String {
        rng::hash_f64s(&self.theta_old)
    }

    pub fn to_container(&self, seed: u64) -> Result<Container> {
        let mut c = Container::new(ArtifactKind::Ledger, seed);
        c.push_array("theta_old", Tensor::from_vec(self.theta_old.clone()));
        c.push_record(&LedgerRecord::Header {
            d_ca: self.d_ca,
            history: hex(&self.history.to_bytes()),
        })?;
        for t in &self.tasks {
            c.push_record(&LedgerRecord::Task(StoredTask {
                task_id: t.task_id,
                concept_token: t.concept_token.clone(),
                concept_id: t.concept_id,
                p: t.p,
                seed: t.seed,
                mask: hex(&t.mask.to_bytes()),
                theta_old_hash: t.theta_old_hash.clone(),
            }))?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let records: Vec<LedgerRecord> = c.decode_records()?;
        let mut header = None;
        let mut tasks = Vec::new();
        for r in records {
            match r {
                LedgerRecord::Header { d_ca, history } => header = Some((d_ca, history)),
                LedgerRecord::Task(t) => tasks.push(t),
            }
        }
        let (d_ca, history) = header.ok_or_else(|| Error::Artifact("ledger header missing".into()))?;
        let mut ledger = TaskLedger::new(d_ca, c.array("theta_old")?.data());
        let stored_history = ConceptMask::from_bytes(d_ca, 0, None, &unhex(&history)?)?;
        for t in tasks {
            let mask = ConceptMask::from_bytes(d_ca, t.task_id, None, &unhex(&t.mask)?)?;
            let theta = ledger.theta_old.clone();
            ledger.push(
                TaskRecord {
                    task_id: t.task_id,
                    concept_token: t.concept_token,
                    concept_id: t.concept_id,
                    p: t.p,
                    seed: t.seed,
                    mask,
                    theta_old_hash: t.theta_old_hash,
                },
                &theta,
            )?;
        }
        if ledger.history.to_bytes() != stored_history.to_bytes() {
            return Err(Error::Artifact("stored history mask differs from the archived task masks".into()));
        }
        if let Some(last) = ledger.tasks.last() {
            if last.theta_old_hash != ledger.theta_old_hash() {
                return Err(Error::Artifact("theta_old does not match the recorded hash".into()));
            }
        }
        Ok(ledger)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<String> {
        self.to_container(seed)?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, ArtifactKind::Ledger)?)
    }
}

/// Persistent bytes per learned concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStorage {
    pub mask_bytes: usize,
    pub metadata_bytes: usize,
}

/// `ceil(D_CA / 8)` mask bytes per task plus its serialized metadata.
pub fn mask_storage_bytes(ledger: &TaskLedger) -> Vec<MaskStorage> {
    ledger
        .tasks
        .iter()
        .map(|t| {
            let meta = serde_json::json!({
                "task_id": t.task_id,
                "concept_token": t.concept_token,
                "concept_id": t.concept_id,
                "p": t.p,
                "seed": t.seed,
                "theta_old_hash": t.theta_old_hash,
            });
            MaskStorage {
                mask_bytes: t.mask.to_bytes().len(),
                metadata_bytes: meta.to_string().len(),
            }
        })
        .collect()
}
