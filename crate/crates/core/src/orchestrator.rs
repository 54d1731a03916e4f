//! Workflow orchestration: task graphs submitted against the engine, driven
//! forward by its events. Tasks start as soon as their dependencies allow.
//!
//! Each task kind walks a subsequence of
//! `Pending → Staging → Loading → Running → Exposed → Completed`, and any
//! non-terminal phase may move to `Failed`:
//!
//! - ship: Pending, Staging, Loading, Completed
//! - run: Pending, Running, Exposed (when a service is bound), Completed
//! - reconstruct: Pending, Staging (input transfer), Running, Completed
//! - acquire, fetch: Pending, Running, Completed

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::containers::{serve_notebook, ContainerId, ImageRef, ShipId};
use crate::engine::{Action, Engine, TaskRef};
use crate::netsim::{transfer_time, Endpoint, NetError, Outcome, PortMap, Reply, RequestId};
use crate::protocols::{
    parse_http_request, parse_http_response, render_http_response, HttpRequest, HttpResponse, ProtocolError,
};
use crate::tomo::{fbp, format_sig6, rmse, Raster, ReconParams, Sinogram};
use crate::topology::{Ipv4Address, NodeKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkflowError {
    #[error("workflow `{0}` is not declared")]
    UnknownWorkflow(String),
    #[error("no workflow with handle {0}")]
    UnknownHandle(usize),
    #[error("duplicate task name `{0}`")]
    DuplicateTask(String),
    #[error("task `{task}` depends on unknown task `{dep}`")]
    UnknownDependency { task: String, dep: String },
    #[error("dependency cycle through `{0}`")]
    Cycle(String),
    #[error("task `{task}`: unknown host `{host}`")]
    UnknownHost { task: String, host: String },
    #[error("task `{task}`: unknown instrument `{instrument}`")]
    UnknownInstrument { task: String, instrument: String },
    #[error("task `{task}`: image {image} is neither on `{host}` nor shipped there")]
    UnknownImage { task: String, image: ImageRef, host: String },
    #[error("task `{task}`: {reason}")]
    BadTask { task: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FetchError {
    #[error("malformed url `{0}`")]
    BadUrl(String),
    #[error("connection refused")]
    Refused,
    #[error("unreachable")]
    Unreachable,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("bad response: {0}")]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Acquire {
        instrument: String,
        angles: usize,
    },
    Ship {
        image: ImageRef,
        from: String,
        to: String,
    },
    Run {
        image: ImageRef,
        host: String,
        port_maps: Vec<PortMap>,
    },
    /// Runs filtered backprojection inside the container of run task `on`
    /// on the sinogram produced by acquire task `input`.
    Reconstruct {
        on: String,
        input: String,
        delay: f64,
    },
    /// Without a token, the token of the exposed endpoint at the url is used.
    Fetch {
        host: String,
        url: String,
        token: Option<String>,
    },
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Acquire { .. } => "acquire",
            TaskKind::Ship { .. } => "ship",
            TaskKind::Run { .. } => "run",
            TaskKind::Reconstruct { .. } => "reconstruct",
            TaskKind::Fetch { .. } => "fetch",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub depends_on: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WorkflowSpec {
    pub id: String,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Phase {
    Pending,
    Staging,
    Loading,
    Running,
    Exposed,
    Completed,
    Failed(String),
}

impl Phase {
    fn rank(&self) -> Option<u8> {
        match self {
            Phase::Pending => Some(0),
            Phase::Staging => Some(1),
            Phase::Loading => Some(2),
            Phase::Running => Some(3),
            Phase::Exposed => Some(4),
            Phase::Completed => Some(5),
            Phase::Failed(_) => None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Phase::Completed | Phase::Failed(_))
    }

    /// Whether `self → next` is an edge of the transition graph.
    pub fn can_move_to(&self, next: &Phase) -> bool {
        if self.is_terminal() {
            return false;
        }
        match (self.rank(), next.rank()) {
            (_, None) => true,
            (Some(a), Some(b)) => b > a,
            (None, _) => false,
        }
    }

    /// Parses the display form, including `Failed(<reason>)`.
    pub fn parse(text: &str) -> Option<Phase> {
        Some(match text {
            "Pending" => Phase::Pending,
            "Staging" => Phase::Staging,
            "Loading" => Phase::Loading,
            "Running" => Phase::Running,
            "Exposed" => Phase::Exposed,
            "Completed" => Phase::Completed,
            _ => Phase::Failed(text.strip_prefix("Failed(")?.strip_suffix(')')?.to_string()),
        })
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Pending => f.write_str("Pending"),
            Phase::Staging => f.write_str("Staging"),
            Phase::Loading => f.write_str("Loading"),
            Phase::Running => f.write_str("Running"),
            Phase::Exposed => f.write_str("Exposed"),
            Phase::Completed => f.write_str("Completed"),
            Phase::Failed(reason) => write!(f, "Failed({reason})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskState {
    pub name: String,
    pub phase: Phase,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointRecord {
    pub task: String,
    pub endpoint: Endpoint,
    pub token: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WorkflowHandle(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowStatus {
    pub id: String,
    pub tasks: Vec<TaskState>,
    pub endpoints: Vec<EndpointRecord>,
}

impl WorkflowStatus {
    pub fn is_finished(&self) -> bool {
        self.tasks.iter().all(|t| t.phase.is_terminal())
    }

    pub fn task(&self, name: &str) -> Option<&TaskState> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = format!("workflow {}\n", self.id);
        for t in &self.tasks {
            let time = |v: Option<f64>| v.map_or("-".to_string(), |t| format!("{t:.9}"));
            out.push_str(&format!(
                "  {} {} start={} end={}\n",
                t.name,
                t.phase,
                time(t.started_at),
                time(t.finished_at)
            ));
        }
        for e in &self.endpoints {
            out.push_str(&format!("  endpoint {} {} token={}\n", e.task, e.endpoint, e.token));
        }
        out
    }
}

/// Runtime state of one submitted workflow.
#[derive(Debug, Clone)]
pub struct WorkflowRun {
    spec: WorkflowSpec,
    states: Vec<TaskState>,
    endpoints: Vec<EndpointRecord>,
    deps: Vec<Vec<usize>>,
    dependents: Vec<Vec<usize>>,
    scheduled: Vec<bool>,
    sinograms: BTreeMap<usize, Sinogram>,
    containers: BTreeMap<usize, ContainerId>,
    responses: BTreeMap<usize, HttpResponse>,
}

impl WorkflowRun {
    fn status(&self) -> WorkflowStatus {
        WorkflowStatus {
            id: self.spec.id.clone(),
            tasks: self.states.clone(),
            endpoints: self.endpoints.clone(),
        }
    }

    fn satisfied(&self, dep: usize) -> bool {
        match self.states[dep].phase {
            Phase::Completed => true,
            Phase::Exposed => matches!(self.spec.tasks[dep].kind, TaskKind::Run { .. }),
            _ => false,
        }
    }
}

/// Splits `http://<ip>[:<port>]/<path>[?query]` into an endpoint and request.
pub fn parse_url(url: &str) -> Result<(Endpoint, HttpRequest), FetchError> {
    let bad = || FetchError::BadUrl(url.to_string());
    let rest = url.strip_prefix("http://").ok_or_else(bad)?;
    let (authority, target) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, "/"),
    };
    let (host, port) = match authority.split_once(':') {
        Some((h, p)) => (h, p.parse::<u16>().map_err(|_| bad())?),
        None => (authority, 80),
    };
    let address: Ipv4Address = host.parse().map_err(|_| bad())?;
    let endpoint = Endpoint::new(address, port).map_err(|_| bad())?;
    let raw = format!("GET {target} HTTP/1.0\r\n\r\n");
    let request = parse_http_request(raw.as_bytes()).map_err(|_| bad())?;
    Ok((endpoint, request))
}

fn with_token(mut req: HttpRequest, token: Option<&str>) -> HttpRequest {
    if let Some(t) = token {
        if req.query_param("token").is_none() {
            req.query.push(("token".into(), t.to_string()));
        }
    }
    req
}

/// Task indices in dependency order, or the name of a task on a cycle.
fn topo_order(deps: &[Vec<usize>]) -> Result<Vec<usize>, usize> {
    let n = deps.len();
    let mut indegree: Vec<usize> = deps.iter().map(Vec::len).collect();
    let mut dependents = vec![Vec::new(); n];
    for (t, ds) in deps.iter().enumerate() {
        for &d in ds {
            dependents[d].push(t);
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&t| indegree[t] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(t) = queue.pop_front() {
        order.push(t);
        for &u in &dependents[t] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                queue.push_back(u);
            }
        }
    }
    match (0..n).find(|&t| indegree[t] > 0) {
        Some(t) => Err(t),
        None => Ok(order),
    }
}

impl Engine {
    pub fn workflow_count(&self) -> usize {
        self.workflows.len()
    }

    /// Submits a workflow declared in the loaded scenario.
    pub fn submit_declared(&mut self, id: &str) -> Result<WorkflowHandle, WorkflowError> {
        let spec = self
            .workflow_spec(id)
            .cloned()
            .ok_or_else(|| WorkflowError::UnknownWorkflow(id.to_string()))?;
        self.submit_workflow(&spec)
    }

    pub fn submit_workflow(&mut self, spec: &WorkflowSpec) -> Result<WorkflowHandle, WorkflowError> {
        let deps = self.validate_workflow(spec)?;
        let n = spec.tasks.len();
        let mut dependents = vec![Vec::new(); n];
        for (t, ds) in deps.iter().enumerate() {
            for &d in ds {
                dependents[d].push(t);
            }
        }
        let handle = WorkflowHandle(self.workflows.len());
        self.workflows.push(WorkflowRun {
            spec: spec.clone(),
            states: spec
                .tasks
                .iter()
                .map(|t| TaskState {
                    name: t.name.clone(),
                    phase: Phase::Pending,
                    started_at: None,
                    finished_at: None,
                })
                .collect(),
            endpoints: Vec::new(),
            deps,
            dependents,
            scheduled: vec![false; n],
            sinograms: BTreeMap::new(),
            containers: BTreeMap::new(),
            responses: BTreeMap::new(),
        });
        self.emit("workflow", format!("{} submitted tasks={n}", spec.id));
        self.advance_workflow(handle.0);
        Ok(handle)
    }

    /// Checks names, references and acyclicity; returns effective dependency
    /// indices (declared ones plus the inputs of reconstruct tasks).
    fn validate_workflow(&self, spec: &WorkflowSpec) -> Result<Vec<Vec<usize>>, WorkflowError> {
        let mut index = BTreeMap::new();
        for (i, t) in spec.tasks.iter().enumerate() {
            if index.insert(t.name.as_str(), i).is_some() {
                return Err(WorkflowError::DuplicateTask(t.name.clone()));
            }
        }
        let lookup = |task: &str, dep: &str| {
            index.get(dep).copied().ok_or_else(|| WorkflowError::UnknownDependency {
                task: task.to_string(),
                dep: dep.to_string(),
            })
        };
        let host = |task: &str, name: &str| match self.topology.node(name) {
            Some(n) if n.kind == NodeKind::Host => Ok(()),
            _ => Err(WorkflowError::UnknownHost {
                task: task.to_string(),
                host: name.to_string(),
            }),
        };
        let image_at = |task: &str, image: &ImageRef, at: &str| {
            let present = self.registry(at).is_some_and(|r| r.contains(image));
            let shipped = spec.tasks.iter().any(|t| {
                matches!(&t.kind, TaskKind::Ship { image: i, to, .. } if i == image && to == at)
            });
            if present || shipped {
                Ok(())
            } else {
                Err(WorkflowError::UnknownImage {
                    task: task.to_string(),
                    image: image.clone(),
                    host: at.to_string(),
                })
            }
        };

        let mut deps = Vec::with_capacity(spec.tasks.len());
        for t in &spec.tasks {
            let mut ds = BTreeSet::new();
            for d in &t.depends_on {
                ds.insert(lookup(&t.name, d)?);
            }
            let name = t.name.as_str();
            let bad = |reason: &str| WorkflowError::BadTask {
                task: name.to_string(),
                reason: reason.to_string(),
            };
            match &t.kind {
                TaskKind::Acquire { instrument, angles } => {
                    if self.beamline(instrument).is_none() {
                        return Err(WorkflowError::UnknownInstrument {
                            task: t.name.clone(),
                            instrument: instrument.clone(),
                        });
                    }
                    if *angles < 1 {
                        return Err(bad("angles must be at least 1"));
                    }
                }
                TaskKind::Ship { image, from, to } => {
                    host(name, from)?;
                    host(name, to)?;
                    image_at(name, image, from)?;
                }
                TaskKind::Run { image, host: h, .. } => {
                    host(name, h)?;
                    image_at(name, image, h)?;
                }
                TaskKind::Reconstruct { on, input, delay } => {
                    let on_i = lookup(name, on)?;
                    let in_i = lookup(name, input)?;
                    if !matches!(spec.tasks[on_i].kind, TaskKind::Run { .. }) {
                        return Err(bad("`on` must name a run task"));
                    }
                    if !matches!(spec.tasks[in_i].kind, TaskKind::Acquire { .. }) {
                        return Err(bad("`input` must name an acquire task"));
                    }
                    if !(delay.is_finite() && *delay >= 0.0) {
                        return Err(bad("delay must be finite and non-negative"));
                    }
                    ds.insert(on_i);
                    ds.insert(in_i);
                }
                TaskKind::Fetch { host: h, url, .. } => {
                    host(name, h)?;
                    parse_url(url).map_err(|e| bad(&e.to_string()))?;
                }
            }
            deps.push(ds.into_iter().collect::<Vec<_>>());
        }
        topo_order(&deps).map_err(|t| WorkflowError::Cycle(spec.tasks[t].name.clone()))?;
        Ok(deps)
    }

    pub fn workflow_status(&self, handle: WorkflowHandle) -> Result<WorkflowStatus, WorkflowError> {
        self.workflows
            .get(handle.0)
            .map(WorkflowRun::status)
            .ok_or(WorkflowError::UnknownHandle(handle.0))
    }

    /// The sinogram produced by an acquire task, once it has completed.
    pub fn workflow_sinogram(&self, handle: WorkflowHandle, task: &str) -> Option<&Sinogram> {
        let run = self.workflows.get(handle.0)?;
        let i = run.spec.tasks.iter().position(|t| t.name == task)?;
        run.sinograms.get(&i)
    }

    /// The response received by a fetch task.
    pub fn workflow_response(&self, handle: WorkflowHandle, task: &str) -> Option<&HttpResponse> {
        let run = self.workflows.get(handle.0)?;
        let i = run.spec.tasks.iter().position(|t| t.name == task)?;
        run.responses.get(&i)
    }

    fn transition(&mut self, task: TaskRef, next: Phase) {
        let now = self.now();
        let run = &mut self.workflows[task.workflow];
        let state = &mut run.states[task.task];
        debug_assert!(state.phase.can_move_to(&next), "{} -> {next}", state.phase);
        let detail = format!("{} {}->{}", state.name, state.phase, next);
        // Skipped tasks go Pending->Failed without ever starting.
        if state.phase == Phase::Pending && !next.is_terminal() {
            state.started_at = Some(now);
        }
        if next.is_terminal() {
            state.finished_at = Some(now);
        }
        state.phase = next;
        self.emit("task", detail);
    }

    fn fail(&mut self, task: TaskRef, reason: String) {
        self.transition(task, Phase::Failed(reason));
        self.advance_workflow(task.workflow);
    }

    /// Propagates failures, starts ready tasks and completes run tasks whose
    /// dependents have all finished; repeats until nothing changes.
    fn advance_workflow(&mut self, w: usize) {
        loop {
            let run = &self.workflows[w];
            let mut failed = None;
            let mut ready = Vec::new();
            let mut finished_runs = Vec::new();
            for t in 0..run.states.len() {
                let phase = &run.states[t].phase;
                if *phase == Phase::Pending && !run.scheduled[t] {
                    if run.deps[t].iter().any(|&d| matches!(run.states[d].phase, Phase::Failed(_))) {
                        failed = Some(t);
                        break;
                    }
                    if run.deps[t].iter().all(|&d| run.satisfied(d)) {
                        ready.push(t);
                    }
                }
                if *phase == Phase::Exposed
                    && run.dependents[t].iter().all(|&d| run.states[d].phase.is_terminal())
                {
                    finished_runs.push(t);
                }
            }
            if let Some(t) = failed {
                self.transition(TaskRef { workflow: w, task: t }, Phase::Failed("dependency failed".into()));
                continue;
            }
            if ready.is_empty() && finished_runs.is_empty() {
                return;
            }
            for t in ready {
                self.workflows[w].scheduled[t] = true;
                self.schedule(0.0, Action::TaskStart(TaskRef { workflow: w, task: t }))
                    .expect("zero delay is valid");
            }
            for t in finished_runs {
                self.transition(TaskRef { workflow: w, task: t }, Phase::Completed);
            }
        }
    }

    pub(crate) fn on_task_start(&mut self, task: TaskRef) -> (String, String) {
        let spec = self.workflows[task.workflow].spec.clone();
        let kind = spec.tasks[task.task].kind.clone();
        let detail = format!("{} {} kind={}", spec.id, spec.tasks[task.task].name, kind.as_str());
        match kind {
            TaskKind::Acquire { instrument, angles } => {
                self.transition(task, Phase::Running);
                match self.scan(&instrument, angles) {
                    Ok(sino) => {
                        self.workflows[task.workflow].sinograms.insert(task.task, sino);
                        self.transition(task, Phase::Completed);
                        self.advance_workflow(task.workflow);
                    }
                    Err(e) => self.fail(task, e.to_string()),
                }
            }
            TaskKind::Ship { image, from, to } => {
                self.transition(task, Phase::Staging);
                if let Err(e) = self.ship_image_for(&image, &from, &to, Some(task)) {
                    self.fail(task, e.to_string());
                }
            }
            TaskKind::Run {
                image,
                host,
                port_maps,
            } => self.start_run_task(task, &image, &host, &port_maps),
            TaskKind::Reconstruct { on, input, .. } => self.start_reconstruct(task, &on, &input),
            TaskKind::Fetch { host, url, token } => self.start_fetch(task, &host, &url, token),
        }
        ("dispatch".into(), detail)
    }

    fn start_run_task(&mut self, task: TaskRef, image: &ImageRef, host: &str, port_maps: &[PortMap]) {
        let cid = match self.run_container(host, image, port_maps) {
            Ok(cid) => cid,
            Err(e) => return self.fail(task, e.to_string()),
        };
        self.workflows[task.workflow].containers.insert(task.task, cid.clone());
        self.transition(task, Phase::Running);
        let inst = self.instance(&cid).expect("just started").clone();
        let port = self
            .registry(host)
            .and_then(|r| r.get(image))
            .map(|img| img.service_port)
            .expect("image present");
        let bound = inst
            .bridged
            .as_ref()
            .and_then(|iface| Endpoint::new(iface.address, port).ok())
            .filter(|ep| self.binding_at(ep).is_some());
        match bound {
            Some(endpoint) => {
                let name = self.workflows[task.workflow].states[task.task].name.clone();
                self.workflows[task.workflow].endpoints.push(EndpointRecord {
                    task: name,
                    endpoint,
                    token: inst.token.clone(),
                });
                self.transition(task, Phase::Exposed);
            }
            None => self.transition(task, Phase::Completed),
        }
        self.advance_workflow(task.workflow);
    }

    fn start_reconstruct(&mut self, task: TaskRef, on: &str, input: &str) {
        let run = &self.workflows[task.workflow];
        let find = |name: &str| run.spec.tasks.iter().position(|t| t.name == name).expect("validated");
        let (on_i, in_i) = (find(on), find(input));
        let cid = run.containers[&on_i].clone();
        let text_len = run.sinograms[&in_i].to_text().len() as u64;
        let TaskKind::Acquire { instrument, .. } = &run.spec.tasks[in_i].kind else {
            unreachable!("validated")
        };
        let src = self.beamline(instrument).map(|b| b.host.clone()).expect("validated");
        self.transition(task, Phase::Staging);
        let src_addr = self.topology.node(src.as_str()).expect("node").address;
        let dst_addr = self
            .instance(&cid)
            .and_then(|i| i.bridged.as_ref())
            .map(|i| i.address)
            .expect("bridged");
        let delay = self
            .topology
            .route_lookup(src_addr, dst_addr)
            .map_err(|e| e.to_string())
            .and_then(|path| transfer_time(&path, text_len, &self.topology).map_err(|e| e.to_string()));
        match delay {
            Ok(d) => {
                self.schedule(d, Action::ReconInput(task)).expect("finite delay");
            }
            Err(e) => self.fail(task, format!("input transfer: {e}")),
        }
    }

    pub(crate) fn on_recon_input(&mut self, task: TaskRef) -> (String, String) {
        let run = &self.workflows[task.workflow];
        let TaskKind::Reconstruct { on, input, delay } = run.spec.tasks[task.task].kind.clone() else {
            unreachable!("reconstruct task")
        };
        let find = |name: &str| run.spec.tasks.iter().position(|t| t.name == name).expect("validated");
        let (on_i, in_i) = (find(&on), find(&input));
        let cid = run.containers[&on_i].clone();
        let sino = run.sinograms[&in_i].clone();
        let TaskKind::Acquire { instrument, .. } = &run.spec.tasks[in_i].kind else {
            unreachable!("validated")
        };
        let phantom = self.beamline(instrument).expect("validated").model.phantom().clone();
        let detail = format!("{} bytes={} at {cid}", run.states[task.task].name, sino.to_text().len());
        self.transition(task, Phase::Running);

        let n = phantom.side();
        let result = ReconParams::new(n, sino.n_angles(), sino.n_s())
            .and_then(|params| fbp(&sino, &params))
            .and_then(|image| Ok((rmse(&image, &phantom, None)?, image)));
        match result {
            Ok((err, image)) => {
                let text = format!("reconstruction {n}x{n} rmse={}\n{}", format_sig6(err), image.to_text());
                self.instance_mut(&cid).expect("container").result = Some(text);
                self.schedule(delay, Action::ReconDone(task)).expect("validated delay");
            }
            Err(e) => self.fail(task, e.to_string()),
        }
        ("recon-input".into(), detail)
    }

    pub(crate) fn on_recon_done(&mut self, task: TaskRef) -> (String, String) {
        let name = self.workflows[task.workflow].states[task.task].name.clone();
        self.transition(task, Phase::Completed);
        self.advance_workflow(task.workflow);
        ("recon-done".into(), name)
    }

    fn start_fetch(&mut self, task: TaskRef, host: &str, url: &str, token: Option<String>) {
        self.transition(task, Phase::Running);
        let (endpoint, request) = parse_url(url).expect("validated");
        let token = token.or_else(|| self.token_for(&endpoint));
        let payload = with_token(request, token.as_deref()).render();
        let size = payload.len() as u64;
        if let Err(e) = self.send_request(host, endpoint, payload, size, Some(task)) {
            self.fail(task, e.to_string());
        }
    }

    /// Token of the exposed endpoint serving `ep`, through a port map or not.
    fn token_for(&self, ep: &Endpoint) -> Option<String> {
        let records = self.workflows.iter().flat_map(|w| w.endpoints.iter());
        for rec in records {
            if rec.endpoint == *ep {
                return Some(rec.token.clone());
            }
        }
        let owner = self.instances.iter().find(|inst| {
            let via_bridge = inst.bridged.as_ref().is_some_and(|i| i.address == ep.address);
            let via_map = self.topology.node(inst.host.as_str()).is_some_and(|n| n.address == ep.address)
                && inst.port_maps.iter().any(|pm| pm.host_port == ep.port);
            via_bridge || via_map
        })?;
        Some(owner.token.clone())
    }

    pub(crate) fn on_ship_done(&mut self, task: TaskRef, id: ShipId) {
        let loaded = self.ship(id).and_then(|r| r.loaded.clone()).expect("arrived");
        self.transition(task, Phase::Loading);
        match loaded {
            Ok(()) => {
                self.transition(task, Phase::Completed);
                self.advance_workflow(task.workflow);
            }
            Err(e) => self.fail(task, format!("load failed: {e}")),
        }
    }

    pub(crate) fn on_request_done(&mut self, task: TaskRef, id: RequestId) {
        let outcome = self.completion(id).map(|c| c.outcome.clone()).expect("completed");
        let result = match outcome {
            Outcome::Response(bytes) => parse_http_response(&bytes).map_err(|e| e.to_string()),
            Outcome::Refused => Err("connection refused".into()),
            Outcome::Unreachable => Err("unreachable".into()),
        };
        match result {
            Ok(resp) => {
                let code = resp.status_code;
                self.workflows[task.workflow].responses.insert(task.task, resp);
                if code == 200 {
                    self.transition(task, Phase::Completed);
                    self.advance_workflow(task.workflow);
                } else {
                    self.fail(task, format!("http {code}"));
                }
            }
            Err(e) => self.fail(task, e),
        }
    }

    pub(crate) fn handle_notebook(&mut self, cid: &ContainerId, payload: &[u8]) -> Reply {
        let response = match (parse_http_request(payload), self.instance(cid)) {
            (Ok(req), Some(inst)) => serve_notebook(inst, &req),
            (Err(e), _) => HttpResponse::new(400, format!("{e}\n")),
            (Ok(_), None) => HttpResponse::new(404, "no such container\n"),
        };
        Reply {
            payload: render_http_response(&response),
            delay: 0.0,
            pushes: Vec::new(),
        }
    }

    /// Fetches `url` from node `from_host`, running the simulation until the
    /// response (or failure) arrives.
    pub fn fetch_service(
        &mut self,
        from_host: &str,
        url: &str,
        token: Option<&str>,
    ) -> Result<HttpResponse, FetchError> {
        let (endpoint, request) = parse_url(url)?;
        let payload = with_token(request, token).render();
        let size = payload.len() as u64;
        let id = self.request_response(from_host, endpoint, payload, size)?;
        let done = self.run_until_complete(id).expect("every request terminates");
        match done.outcome {
            Outcome::Response(bytes) => Ok(parse_http_response(&bytes)?),
            Outcome::Refused => Err(FetchError::Refused),
            Outcome::Unreachable => Err(FetchError::Unreachable),
        }
    }
}
