use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Scoring,
}

/// One access to domain data during a held-out run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub target: String,
    pub trial: usize,
    pub phase: Phase,
    pub domain: String,
    pub what: String,
    pub count: usize,
}

/// Record of every domain read made by the evaluation harness. Reading the
/// held-out domain outside the scoring phase is refused, not just logged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub events: Vec<AuditEvent>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn read(
        &mut self,
        target: &str,
        trial: usize,
        phase: Phase,
        domain: &str,
        what: &str,
        count: usize,
    ) -> Result<()> {
        let event = AuditEvent {
            target: target.to_string(),
            trial,
            phase,
            domain: domain.to_string(),
            what: what.to_string(),
            count,
        };
        if domain == target && phase != Phase::Scoring {
            tracing::error!(?event, "held-out domain read before scoring");
            self.events.push(event);
            return Err(Error::Eval(format!(
                "held-out domain {target} read during {phase:?} ({what})"
            )));
        }
        self.events.push(event);
        Ok(())
    }

    /// Reads of each run's held-out domain made before its scoring phase.
    pub fn target_reads_before_scoring(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.domain == e.target && e.phase != Phase::Scoring)
            .count()
    }

    /// Reads of `target` logged while scoring it.
    pub fn scoring_reads(&self, target: &str) -> usize {
        self.events
            .iter()
            .filter(|e| e.target == target && e.domain == target && e.phase == Phase::Scoring)
            .count()
    }

    /// One JSON object per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        io::write_atomic(path, &out)
    }
}
