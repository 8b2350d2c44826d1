use parking_lot::Mutex;

use crate::domain::WorkerId;
use crate::error::StudyError;

/// The crowd platform's side of qualification management.
pub trait WorkerRegistry: Send + Sync {
    fn grant_qualification(&self, worker: &WorkerId) -> Result<(), StudyError>;
}

/// Records grants in memory.
#[derive(Debug, Default)]
pub struct MockRegistry {
    granted: Mutex<Vec<WorkerId>>,
}

impl MockRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn granted(&self) -> Vec<WorkerId> {
        self.granted.lock().clone()
    }
}

impl WorkerRegistry for MockRegistry {
    fn grant_qualification(&self, worker: &WorkerId) -> Result<(), StudyError> {
        self.granted.lock().push(worker.clone());
        Ok(())
    }
}

/// Placeholder for Amazon Mechanical Turk.
///
/// A real implementation creates the `AVQA_Certified` qualification type once
/// with `CreateQualificationType`, then for every newly qualified worker calls
/// `AssociateQualificationWithWorker` with that type id, the worker id,
/// `IntegerValue = 1` and `SendNotification = false`. Formal-stage HITs list
/// the type in their `QualificationRequirements` with comparator `Exists`,
/// next to the built-in `PercentAssignmentsApproved > 97` and
/// `NumberHITsApproved > 500` requirements.
#[derive(Debug, Clone)]
pub struct AmtRegistryStub {
    pub qualification_type_id: String,
}

impl WorkerRegistry for AmtRegistryStub {
    fn grant_qualification(&self, worker: &WorkerId) -> Result<(), StudyError> {
        Err(StudyError::Registry(format!(
            "AssociateQualificationWithWorker({}, {worker}) requires AMT credentials; this build has no AMT client",
            self.qualification_type_id
        )))
    }
}
