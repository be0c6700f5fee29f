//! JSON-lines demonstration datasets and the replay audit.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::demo::Demonstration;
use crate::simworld::{is_success, reset, Executor, TaskSpec};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_dataset(path: &Path, demos: &[Demonstration]) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(File::create(path)?);
    for d in demos {
        write_line(&mut out, d)?;
    }
    out.flush()?;
    Ok(())
}

/// Appends one demonstration to the file, creating it if needed.
pub fn append_demo(path: &Path, demo: &Demonstration) -> Result<(), DatasetError> {
    let mut out = OpenOptions::new().create(true).append(true).open(path)?;
    write_line(&mut out, demo)?;
    out.flush()?;
    Ok(())
}

fn write_line(out: &mut impl Write, demo: &Demonstration) -> Result<(), DatasetError> {
    serde_json::to_writer(&mut *out, demo).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Reads a dataset; blank lines are skipped. Line numbers are 1-based.
pub fn read_dataset(path: &Path) -> Result<Vec<Demonstration>, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut demos = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let demo: Demonstration = serde_json::from_str(&line)
            .map_err(|e| DatasetError::SchemaViolation { line: i + 1, message: e.to_string() })?;
        demo.validate().map_err(|e| DatasetError::SchemaViolation { line: i + 1, message: e.to_string() })?;
        demos.push(demo);
    }
    Ok(demos)
}

/// Keeps the first `keep` lines of a dataset file. A missing file counts as
/// empty.
pub fn truncate_dataset(path: &Path, keep: usize) -> Result<(), DatasetError> {
    if !path.exists() {
        if keep == 0 {
            return Ok(());
        }
        return Err(DatasetError::SchemaViolation {
            line: 1,
            message: format!("dataset missing, expected {keep} lines"),
        });
    }
    let demos = read_dataset(path)?;
    if demos.len() < keep {
        return Err(DatasetError::SchemaViolation {
            line: demos.len() + 1,
            message: format!("dataset has {} demonstrations, checkpoint expects {keep}", demos.len()),
        });
    }
    write_dataset(path, &demos[..keep])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub id: String,
    pub seed: u64,
    pub success: bool,
    /// Recorded observations reproduced exactly.
    pub trace_matches: bool,
}

/// Resets the recorded scene and re-executes the recorded actions.
pub fn replay_demo(demo: &Demonstration, spec: &TaskSpec) -> ReplayResult {
    let seed = demo.provenance.seed();
    let (state, _) = reset(spec, seed);
    let mut exec = Executor::new(state);
    for a in &demo.actions {
        exec.step(a.clone());
    }
    ReplayResult {
        id: demo.id.clone(),
        seed,
        success: is_success(&exec.state),
        trace_matches: exec.trace == demo.observations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayAudit {
    pub total: usize,
    pub passed: usize,
    pub failures: Vec<ReplayResult>,
}

impl ReplayAudit {
    pub fn all_passed(&self) -> bool {
        self.passed == self.total
    }
}

/// Replays every demonstration with `spec_for` giving the task parameters.
pub fn replay_audit(demos: &[Demonstration], spec_for: impl Fn(&Demonstration) -> TaskSpec) -> ReplayAudit {
    let mut failures = Vec::new();
    for d in demos {
        let r = replay_demo(d, &spec_for(d));
        if !(r.success && r.trace_matches) {
            failures.push(r);
        }
    }
    ReplayAudit { total: demos.len(), passed: demos.len() - failures.len(), failures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::{expert_demo, TaskKind};

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let demos: Vec<_> = (0..3).map(|s| expert_demo(&spec, s).unwrap()).collect();
        write_dataset(&path, &demos).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), demos);

        std::fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());

        let good = serde_json::to_string(&demos[0]).unwrap();
        std::fs::write(&path, format!("{good}\n{}\n", &good[..good.len() / 2])).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::SchemaViolation { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn append_and_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let spec = TaskSpec::new(TaskKind::Stack);
        let demos: Vec<_> = (0..3).map(|s| expert_demo(&spec, s).unwrap()).collect();
        for d in &demos {
            append_demo(&path, d).unwrap();
        }
        truncate_dataset(&path, 2).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), demos[..2]);
        assert!(truncate_dataset(&path, 5).is_err());
    }

    #[test]
    fn expert_demos_pass_the_audit() {
        let spec = TaskSpec::new(TaskKind::DrawerMug);
        let demos: Vec<_> = (0..2).map(|s| expert_demo(&spec, s).unwrap()).collect();
        let audit = replay_audit(&demos, |_| spec.clone());
        assert!(audit.all_passed(), "{audit:?}");
        let mut broken = demos[0].clone();
        broken.provenance = crate::demo::Provenance::HumanScripted { seed: 77 };
        assert!(!replay_audit(&[broken], |_| spec.clone()).all_passed());
    }
}
