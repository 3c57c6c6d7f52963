use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use super::{JobRunner, SegmenterError};

/// Runs `program args… <job-dir>` and captures its output next to the job.
#[derive(Debug, Clone)]
pub struct ExternalCommand {
    program: PathBuf,
    args: Vec<String>,
}

impl ExternalCommand {
    pub fn new(program: PathBuf, args: Vec<String>) -> Self {
        ExternalCommand { program, args }
    }
}

impl JobRunner for ExternalCommand {
    fn run(&self, job_dir: &Path) -> Result<(), SegmenterError> {
        let launch = |reason: String| SegmenterError::LaunchFailure {
            program: self.program.clone(),
            reason,
        };
        let stdout = File::create(job_dir.join("stdout.log")).map_err(|e| launch(e.to_string()))?;
        let stderr = File::create(job_dir.join("stderr.log")).map_err(|e| launch(e.to_string()))?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(job_dir)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .status()
            .map_err(|e| launch(e.to_string()))?;
        if status.success() {
            Ok(())
        } else {
            Err(SegmenterError::TrainerFailure {
                code: status.code(),
                job: job_dir.to_path_buf(),
            })
        }
    }
}
