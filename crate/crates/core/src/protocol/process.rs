//! Supervised executor subprocess.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::{
    CrashKind, ExecError, Executor, ExecutorFactory, Handshake, PairedRequest, PairedResponse, PhaseMarker, Side,
    Status, PROTOCOL_VERSION,
};

#[derive(Debug, Clone)]
pub struct ProcessConfig {
    pub program: String,
    pub args: Vec<String>,
    pub max_restarts: usize,
    pub handshake_timeout: Duration,
}

impl ProcessConfig {
    /// Parses a shell-style command line.
    pub fn from_command_line(cmd: &str) -> Result<Self, ExecError> {
        let mut words =
            shlex::split(cmd).ok_or_else(|| ExecError::Handshake(format!("cannot parse executor command {cmd:?}")))?;
        if words.is_empty() {
            return Err(ExecError::Handshake("empty executor command".into()));
        }
        let program = words.remove(0);
        Ok(Self {
            program,
            args: words,
            max_restarts: 64,
            handshake_timeout: Duration::from_secs(30),
        })
    }

    fn describe(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
    phase: Arc<Mutex<Option<PhaseMarker>>>,
    stderr: Option<JoinHandle<()>>,
}

impl Running {
    fn spawn(config: &ProcessConfig) -> Result<Self, ExecError> {
        let mut child = Command::new(&config.program)
            .args(&config.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| ExecError::Launch {
                command: config.describe(),
                source,
            })?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let stderr = child.stderr.take().expect("stderr is piped");

        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let phase = Arc::new(Mutex::new(None));
        let phase_writer = Arc::clone(&phase);
        let stderr = std::thread::spawn(move || {
            for line in BufReader::new(stderr).lines() {
                let Ok(line) = line else { break };
                match serde_json::from_str::<PhaseMarker>(&line) {
                    Ok(marker) => *phase_writer.lock().unwrap() = Some(marker),
                    Err(_) => log::debug!(target: "executor", "{line}"),
                }
            }
        });

        let mut running = Running {
            child,
            stdin,
            lines,
            phase,
            stderr: Some(stderr),
        };
        match running.lines.recv_timeout(config.handshake_timeout) {
            Ok(line) => {
                let hs: Handshake = serde_json::from_str(&line)
                    .map_err(|e| ExecError::Handshake(format!("bad handshake {line:?}: {e}")))?;
                if !hs.ready || hs.protocol != PROTOCOL_VERSION {
                    return Err(ExecError::Handshake(format!(
                        "executor not ready or speaks protocol {}",
                        hs.protocol
                    )));
                }
            }
            Err(_) => {
                running.kill();
                return Err(ExecError::Handshake(format!(
                    "no handshake from `{}`",
                    config.describe()
                )));
            }
        }
        Ok(running)
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
        if let Some(h) = self.stderr.take() {
            let _ = h.join();
        }
    }

    /// Reaps a dead or hung process and reports the last phase it announced.
    fn reap(mut self) -> Option<PhaseMarker> {
        self.kill();
        let marker = self.phase.lock().unwrap().take();
        marker
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Executor connection backed by a child process, restarted after crashes.
pub struct ProcessExecutor {
    config: ProcessConfig,
    running: Option<Running>,
    restarts: usize,
}

impl ProcessExecutor {
    pub fn start(config: ProcessConfig) -> Result<Self, ExecError> {
        let running = Running::spawn(&config)?;
        Ok(Self {
            config,
            running: Some(running),
            restarts: 0,
        })
    }

    fn restart(&mut self) -> Result<(), ExecError> {
        if self.restarts >= self.config.max_restarts {
            return Err(ExecError::RestartBudget(self.restarts));
        }
        self.restarts += 1;
        log::info!("restarting executor (restart #{})", self.restarts);
        self.running = Some(Running::spawn(&self.config)?);
        Ok(())
    }

    fn send(&mut self, line: &str) -> Result<(), ExecError> {
        let running = self.running.as_mut().expect("executor running");
        running.stdin.write_all(line.as_bytes())?;
        running.stdin.write_all(b"\n")?;
        running.stdin.flush()?;
        Ok(())
    }
}

impl Executor for ProcessExecutor {
    fn call_paired(&mut self, req: &PairedRequest) -> Result<PairedResponse, ExecError> {
        if self.running.is_none() {
            self.restart()?;
        }
        let line = serde_json::to_string(req).map_err(|e| ExecError::Protocol(e.to_string()))?;
        if self.send(&line).is_err() {
            // died while idle; the request never reached it
            if let Some(r) = self.running.take() {
                r.reap();
            }
            self.restart()?;
            self.send(&line)?;
        }

        let timeout = Duration::from_millis(req.timeout_ms.max(1));
        let received = self
            .running
            .as_ref()
            .expect("executor running")
            .lines
            .recv_timeout(timeout);
        let kind = match received {
            Ok(text) => {
                let resp: PairedResponse = serde_json::from_str(&text)
                    .map_err(|e| ExecError::Protocol(format!("bad response line {text:?}: {e}")))?;
                if resp.id != req.id {
                    return Err(ExecError::Protocol(format!(
                        "response id {} does not echo request id {}",
                        resp.id, req.id
                    )));
                }
                resp.validate().map_err(ExecError::Protocol)?;
                return Ok(resp);
            }
            Err(RecvTimeoutError::Timeout) => CrashKind::Timeout,
            Err(RecvTimeoutError::Disconnected) => CrashKind::Died,
        };

        let marker = self.running.take().and_then(Running::reap).filter(|m| m.id == req.id);
        let (side, source) = match marker {
            Some(PhaseMarker {
                phase: Side::Target,
                source_status,
                source_exception,
                ..
            }) => (
                Side::Target,
                Some((source_status.unwrap_or(Status::Success), source_exception)),
            ),
            _ => (Side::Source, None),
        };
        log::warn!(
            "executor {} during {:?} of request {} ({} -> {})",
            if kind == CrashKind::Timeout {
                "timed out"
            } else {
                "died"
            },
            side,
            req.id,
            req.source.api,
            req.target.api()
        );
        self.restart()?;
        Ok(PairedResponse::crashed(req.id, side, kind, source))
    }

    fn restarts(&self) -> usize {
        self.restarts
    }
}

/// Launches one executor process per worker.
#[derive(Debug, Clone)]
pub struct ProcessFactory {
    pub config: ProcessConfig,
}

impl ProcessFactory {
    pub fn new(config: ProcessConfig) -> Self {
        Self { config }
    }
}

impl ExecutorFactory for ProcessFactory {
    fn connect(&self, _worker: usize) -> Result<Box<dyn Executor>, ExecError> {
        Ok(Box::new(ProcessExecutor::start(self.config.clone())?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_command_lines() {
        let c = ProcessConfig::from_command_line("python3 -m pyexec --lib 'mini lib'").unwrap();
        assert_eq!(c.program, "python3");
        assert_eq!(c.args, ["-m", "pyexec", "--lib", "mini lib"]);
        assert!(ProcessConfig::from_command_line("   ").is_err());
        assert!(ProcessConfig::from_command_line("a 'unterminated").is_err());
    }

    #[test]
    fn missing_program_is_launch_error() {
        let c = ProcessConfig::from_command_line("/nonexistent/relfuzz-executor").unwrap();
        assert!(matches!(ProcessExecutor::start(c), Err(ExecError::Launch { .. })));
    }

    #[test]
    fn silent_program_fails_handshake() {
        let mut c = ProcessConfig::from_command_line("sh -c 'echo nope; sleep 5'").unwrap();
        c.handshake_timeout = Duration::from_secs(2);
        assert!(matches!(ProcessExecutor::start(c), Err(ExecError::Handshake(_))));
    }
}
