//! Operator surface: scenario files, commands, and a serialized engine
//! thread that scripts and the REPL both go through.

pub mod command;
pub mod scenario;

use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;

pub use command::{exec_command, parse_command, tokenize, CliError, Command, Session};
pub use scenario::{parse_scenario, ScenarioError, ScenarioSpec, CANONICAL_SCENARIO};

type Job = (String, mpsc::Sender<Result<Option<String>, CliError>>);

/// Owns a `Session` on its own thread; lines are executed one at a time in
/// submission order.
pub struct EngineHandle {
    tx: Option<mpsc::Sender<Job>>,
    worker: Option<thread::JoinHandle<()>>,
}

impl EngineHandle {
    pub fn spawn(base_dir: impl Into<PathBuf>) -> Self {
        let base_dir = base_dir.into();
        let (tx, rx) = mpsc::channel::<Job>();
        let worker = thread::spawn(move || {
            let mut session = Session::new(base_dir);
            for (line, reply) in rx {
                let _ = reply.send(session.exec_line(&line));
            }
        });
        Self {
            tx: Some(tx),
            worker: Some(worker),
        }
    }

    /// Executes one line and waits for its result. Blank and comment lines
    /// yield `Ok(None)`.
    pub fn exec(&self, line: &str) -> Result<Option<String>, CliError> {
        let (reply_tx, reply_rx) = mpsc::channel();
        let tx = self.tx.as_ref().expect("running");
        tx.send((line.to_string(), reply_tx)).expect("engine thread alive");
        reply_rx.recv().expect("engine thread replies")
    }

    /// Runs every line of `script`, collecting outputs; stops at the first
    /// error.
    pub fn run_script(&self, script: &str) -> Result<Vec<String>, CliError> {
        let mut out = Vec::new();
        for line in script.lines() {
            if let Some(text) = self.exec(line)? {
                out.push(text);
            }
        }
        Ok(out)
    }
}

impl Drop for EngineHandle {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
