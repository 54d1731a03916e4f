//! Operator commands against a session's engine.
//!
//! | verb     | arguments                          | output                           |
//! |----------|------------------------------------|----------------------------------|
//! | `up`     | `<scenario file>`                  | `up sites=.. nodes=.. seed=..`   |
//! | `status` |                                    | clock, containers, workflows     |
//! | `ship`   | `<image:tag> <from> <to>`          | `ship s<k> ... arrives=<t>`      |
//! | `run`    | `<host> <image:tag> [-p c:h]...`   | `<id> ip=<addr> token=<t>`       |
//! | `pvget`  | `<client host> <pv>`               | EPICS-lite response line         |
//! | `pvput`  | `<client host> <pv> <value>`       | EPICS-lite response line         |
//! | `pvmon`  | `<client host> <pv>`               | EPICS-lite response line         |
//! | `scan`   | `<instrument> <n_angles>`          | `sinogram <rows>x<cols> ...`     |
//! | `submit` | `<workflow id>`                    | `submitted <id> handle=<h> ...`  |
//! | `fetch`  | `<host> <url> [--token t]`         | `<code> <reason>` then the body  |
//! | `until`  | `<t>`                              | `t=<now> events=<n>`             |
//! | `drain`  |                                    | `t=<now> events=<n>`             |
//! | `log`    |                                    | canonical event log lines        |
//! | `digest` |                                    | 16 hex digits                    |
//!
//! PV commands send from the client host to the IOC of the instrument named
//! by the PV prefix. `pvget`, `pvput`, `pvmon` and `fetch` run the
//! simulation until their reply arrives.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cli::scenario::parse_scenario;
use crate::containers::ImageRef;
use crate::engine::Engine;
use crate::instrument::EPICS_PORT;
use crate::netsim::{Endpoint, Outcome, PortMap};
use crate::orchestrator::WorkflowHandle;
use crate::protocols::{EpicsRequest, EpicsVerb};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} (in `{command}`)")]
pub struct CliError {
    pub command: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Command {
    pub verb: String,
    pub args: Vec<String>,
    /// The line as typed.
    pub text: String,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Splits on whitespace; double quotes group words and may be empty.
pub fn tokenize(line: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_quotes = false;
    let mut has_token = false;
    for ch in line.chars() {
        match ch {
            '"' => {
                in_quotes = !in_quotes;
                has_token = true;
            }
            c if c.is_whitespace() && !in_quotes => {
                if has_token {
                    out.push(std::mem::take(&mut cur));
                    has_token = false;
                }
            }
            c => {
                cur.push(c);
                has_token = true;
            }
        }
    }
    if in_quotes {
        return Err("unterminated quote".into());
    }
    if has_token {
        out.push(cur);
    }
    Ok(out)
}

/// Parses a command line; `None` for blank lines and `#` comments.
pub fn parse_command(line: &str) -> Result<Option<Command>, CliError> {
    let text = line.trim();
    if text.is_empty() || text.starts_with('#') {
        return Ok(None);
    }
    let mut tokens = tokenize(text).map_err(|message| CliError {
        command: text.to_string(),
        message,
    })?;
    if tokens.is_empty() {
        return Ok(None);
    }
    let verb = tokens.remove(0);
    Ok(Some(Command {
        verb,
        args: tokens,
        text: text.to_string(),
    }))
}

/// Engine plus the context commands are resolved against.
#[derive(Debug, Default)]
pub struct Session {
    engine: Option<Engine>,
    base_dir: PathBuf,
    handles: Vec<WorkflowHandle>,
}

impl Session {
    /// Relative scenario paths in `up` resolve against `base_dir`.
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            engine: None,
            base_dir: base_dir.into(),
            handles: Vec::new(),
        }
    }

    pub fn with_engine(engine: Engine) -> Self {
        Self {
            engine: Some(engine),
            ..Self::default()
        }
    }

    pub fn engine(&self) -> Option<&Engine> {
        self.engine.as_ref()
    }

    fn engine_mut(&mut self) -> Result<&mut Engine, String> {
        self.engine.as_mut().ok_or_else(|| "no scenario loaded; use `up <file>`".to_string())
    }

    pub fn exec_line(&mut self, line: &str) -> Result<Option<String>, CliError> {
        match parse_command(line)? {
            Some(cmd) => exec_command(self, &cmd).map(Some),
            None => Ok(None),
        }
    }
}

fn arity(cmd: &Command, min: usize, max: usize) -> Result<(), String> {
    let n = cmd.args.len();
    if n < min || n > max {
        let want = if min == max {
            format!("{min}")
        } else {
            format!("{min}..{max}")
        };
        return Err(format!("`{}` takes {want} argument(s), got {n}", cmd.verb));
    }
    Ok(())
}

fn events_line(engine: &Engine, n: usize) -> String {
    format!("t={:.9} events={n}", engine.now())
}

fn pv_request(engine: &mut Engine, client: &str, req: EpicsRequest) -> Result<String, String> {
    let instrument = req.pv_name.split(':').next().unwrap_or_default().to_string();
    let beamline = engine
        .beamline(&instrument)
        .ok_or_else(|| format!("no instrument serves `{}`", req.pv_name))?;
    let cid = beamline.container.clone().ok_or("instrument has no container")?;
    let addr = engine
        .instance(&cid)
        .and_then(|i| i.bridged.as_ref())
        .map(|i| i.address)
        .ok_or("instrument container is not bridged")?;
    let dst = Endpoint::new(addr, EPICS_PORT).map_err(|e| e.to_string())?;
    let payload = req.render().into_bytes();
    let size = payload.len() as u64;
    let id = engine
        .request_response(client, dst, payload, size)
        .map_err(|e| e.to_string())?;
    match engine.run_until_complete(id).map(|c| c.outcome) {
        Some(Outcome::Response(bytes)) => Ok(String::from_utf8_lossy(&bytes).trim_end().to_string()),
        Some(Outcome::Refused) => Err("connection refused".into()),
        Some(Outcome::Unreachable) | None => Err("unreachable".into()),
    }
}

fn status(engine: &Engine, handles: &[WorkflowHandle]) -> String {
    let mut out = format!("t={:.9} pending={}\n", engine.now(), engine.pending_events());
    for site in engine.topology().sites() {
        out.push_str(&format!("site {} {} gw={}\n", site.name, site.subnet, site.gateway));
    }
    for inst in engine.instances() {
        let ip = inst
            .bridged
            .as_ref()
            .map_or("-".to_string(), |i| i.address.to_string());
        out.push_str(&format!(
            "container {} {} host={} ip={ip} state={:?}\n",
            inst.id, inst.image, inst.host, inst.state
        ));
    }
    for h in handles {
        if let Ok(st) = engine.workflow_status(*h) {
            out.push_str(&st.render());
        }
    }
    out.trim_end().to_string()
}

fn exec_inner(session: &mut Session, cmd: &Command) -> Result<String, String> {
    let a = &cmd.args;
    match cmd.verb.as_str() {
        "up" => {
            arity(cmd, 1, 1)?;
            let path = Path::new(&a[0]);
            let path = if path.is_relative() {
                session.base_dir.join(path)
            } else {
                path.to_path_buf()
            };
            let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let spec = parse_scenario(&text).map_err(|e| e.to_string())?;
            let engine = Engine::from_scenario(&spec).map_err(|e| e.to_string())?;
            let topo = engine.topology();
            let out = format!(
                "up sites={} nodes={} links={} seed={}",
                topo.sites().len(),
                topo.nodes().count(),
                topo.links().len(),
                engine.seed()
            );
            session.engine = Some(engine);
            session.handles.clear();
            Ok(out)
        }
        "status" => {
            arity(cmd, 0, 0)?;
            let handles = session.handles.clone();
            Ok(status(session.engine_mut()?, &handles))
        }
        "ship" => {
            arity(cmd, 3, 3)?;
            let image: ImageRef = a[0].parse().map_err(|e| format!("{e}"))?;
            let engine = session.engine_mut()?;
            let id = engine.ship_image(&image, &a[1], &a[2]).map_err(|e| e.to_string())?;
            let rec = engine.ship(id).expect("just shipped");
            Ok(format!(
                "ship s{} {image} {} -> {} arrives={:.9}",
                id.0, a[1], a[2], rec.arrives_at
            ))
        }
        "run" => {
            if a.len() < 2 {
                return Err("usage: run <host> <image:tag> [-p c:h]...".into());
            }
            let image: ImageRef = a[1].parse().map_err(|e| format!("{e}"))?;
            let mut maps = Vec::new();
            let mut rest = a[2..].iter();
            while let Some(flag) = rest.next() {
                if flag != "-p" {
                    return Err(format!("unexpected argument `{flag}`"));
                }
                let spec = rest.next().ok_or("`-p` needs c:h")?;
                maps.push(spec.parse::<PortMap>().map_err(|e| e.to_string())?);
            }
            let engine = session.engine_mut()?;
            let id = engine.run_container(&a[0], &image, &maps).map_err(|e| e.to_string())?;
            let inst = engine.instance(&id).expect("just started");
            let ip = inst.bridged.as_ref().map(|i| i.address.to_string()).unwrap_or_default();
            Ok(format!("{id} ip={ip} token={}", inst.token))
        }
        "pvget" | "pvmon" => {
            arity(cmd, 2, 2)?;
            let req = if cmd.verb == "pvget" {
                EpicsRequest::get(&a[1])
            } else {
                EpicsRequest::mon(&a[1])
            };
            pv_request(session.engine_mut()?, &a[0], req)
        }
        "pvput" => {
            arity(cmd, 3, 3)?;
            let req = EpicsRequest {
                verb: EpicsVerb::Put,
                pv_name: a[1].clone(),
                value: Some(a[2].clone()),
            };
            pv_request(session.engine_mut()?, &a[0], req)
        }
        "scan" => {
            arity(cmd, 2, 2)?;
            let n: usize = a[1].parse().map_err(|_| format!("bad angle count `{}`", a[1]))?;
            let sino = session.engine_mut()?.scan(&a[0], n).map_err(|e| e.to_string())?;
            let total: f64 = sino.data.iter().sum();
            Ok(format!(
                "sinogram {}x{} sum={}",
                sino.n_angles(),
                sino.n_s(),
                crate::tomo::format_sig6(total * sino.bin_width() / sino.n_angles() as f64)
            ))
        }
        "submit" => {
            arity(cmd, 1, 1)?;
            let engine = session.engine_mut()?;
            let h = engine.submit_declared(&a[0]).map_err(|e| e.to_string())?;
            let n = engine.workflow_status(h).map_err(|e| e.to_string())?.tasks.len();
            session.handles.push(h);
            Ok(format!("submitted {} handle={} tasks={n}", a[0], h.0))
        }
        "fetch" => {
            let token = match a.as_slice() {
                [_, _] => None,
                [_, _, flag, t] if flag == "--token" => Some(t.as_str()),
                _ => return Err("usage: fetch <host> <url> [--token t]".into()),
            };
            let resp = session
                .engine_mut()?
                .fetch_service(&a[0], &a[1], token)
                .map_err(|e| e.to_string())?;
            Ok(format!("{} {}\n{}", resp.status_code, resp.reason, resp.body_text())
                .trim_end()
                .to_string())
        }
        "until" => {
            arity(cmd, 1, 1)?;
            let t: f64 = a[0].parse().map_err(|_| format!("bad time `{}`", a[0]))?;
            let engine = session.engine_mut()?;
            let n = engine.advance_until(t).map_err(|e| e.to_string())?.len();
            Ok(events_line(engine, n))
        }
        "drain" => {
            arity(cmd, 0, 0)?;
            let engine = session.engine_mut()?;
            let n = engine.drain().len();
            Ok(events_line(engine, n))
        }
        "log" => {
            arity(cmd, 0, 0)?;
            Ok(session.engine_mut()?.log_lines().join("\n"))
        }
        "digest" => {
            arity(cmd, 0, 0)?;
            Ok(session.engine_mut()?.event_log_digest())
        }
        other => Err(format!("unknown verb `{other}`")),
    }
}

pub fn exec_command(session: &mut Session, cmd: &Command) -> Result<String, CliError> {
    exec_inner(session, cmd).map_err(|message| CliError {
        command: cmd.text.clone(),
        message,
    })
}
