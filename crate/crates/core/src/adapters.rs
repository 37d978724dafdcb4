//! Shared plumbing for FILE and EXTERNAL adapters: sidecar naming and
//! command-template execution.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `<dir>/<stem>.<suffix>` next to `source`.
pub fn sidecar_path(source: &Path, suffix: &str) -> PathBuf {
    let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    source.with_file_name(format!("{stem}.{suffix}"))
}

/// An external program invoked through `sh -c`. `{name}` placeholders in the
/// template are replaced by shell-quoted argument values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandTemplate {
    pub command: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

impl CommandTemplate {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn with_timeout(mut self, secs: u64) -> Self {
        self.timeout_secs = secs;
        self
    }

    pub fn render(&self, args: &[(&str, &str)]) -> String {
        let mut cmd = self.command.clone();
        for (name, value) in args {
            cmd = cmd.replace(&format!("{{{name}}}"), &shell_quote(value));
        }
        cmd
    }

    /// Runs the rendered command and returns its trimmed standard output.
    /// Failures and timeouts carry the full transcript.
    pub fn run(&self, provider: &str, args: &[(&str, &str)]) -> Result<String> {
        let rendered = self.render(args);
        let fail = |message: String, stdout: &str, stderr: &str| Error::Adapter {
            provider: provider.to_string(),
            message,
            transcript: Some(format!("$ {rendered}\n--- stdout\n{stdout}\n--- stderr\n{stderr}")),
        };
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&rendered)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(format!("spawn failed: {e}"), "", ""))?;

        let mut stdout_pipe = child.stdout.take().expect("piped stdout");
        let mut stderr_pipe = child.stderr.take().expect("piped stderr");
        let out_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout_pipe.read_to_string(&mut s);
            s
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr_pipe.read_to_string(&mut s);
            s
        });

        let deadline = Instant::now() + Duration::from_secs(self.timeout_secs);
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break None;
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(fail(format!("wait failed: {e}"), "", "")),
            }
        };
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        match status {
            None => Err(fail(
                format!("timed out after {}s", self.timeout_secs),
                &stdout,
                &stderr,
            )),
            Some(s) if !s.success() => Err(fail(format!("exited with {s}"), &stdout, &stderr)),
            Some(_) => Ok(stdout.trim().to_string()),
        }
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}
