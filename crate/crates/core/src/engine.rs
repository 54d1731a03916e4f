//! The single-owner simulation loop. `Engine` owns the topology, registries,
//! containers, instruments and workflows; all mutation after setup happens
//! while processing events in `(time, seq)` order.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cli::scenario::{Decl, ScenarioSpec};
use crate::containers::{
    fnv1a64, hex16, ContainerError, ContainerImage, ContainerInstance, ImageRef, Registry, ServiceKind,
    ShipId, ShipRecord,
};
use crate::instrument::{InstrumentModel, EPICS_PORT};
use crate::netsim::{
    Completion, Delivery, EventId, EventRecord, InFlight, NetError, RequestId, Scheduler, Service,
};
use crate::orchestrator::{WorkflowRun, WorkflowSpec};
use crate::tomo::{make_disk_phantom, TomoError};
use crate::topology::{build_topology, FederationTopology, Ipv4Address, NodeId, TopologyError};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SetupError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tomo(#[from] TomoError),
    #[error("instrument `{0}`: {1}")]
    Instrument(String, String),
}

/// Identifies one task of one submitted workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TaskRef {
    pub workflow: usize,
    pub task: usize,
}

#[derive(Debug, Clone)]
pub enum Action {
    /// Free-form marker; logged as `kind=note`.
    Note(String),
    /// Deferred log line for a state change that already happened.
    Log { kind: String, detail: String },
    Arrive(RequestId),
    Respond(RequestId),
    Refused(RequestId),
    Unreachable(RequestId),
    ShipArrive(ShipId),
    TaskStart(TaskRef),
    ReconInput(TaskRef),
    ReconDone(TaskRef),
}

/// An instrument together with where it is hosted.
#[derive(Debug, Clone)]
pub struct Beamline {
    pub model: InstrumentModel,
    pub host: NodeId,
    pub container: Option<crate::containers::ContainerId>,
}

#[derive(Debug, Clone, Default)]
pub struct Engine {
    pub(crate) topology: FederationTopology,
    pub(crate) seed: u64,
    sched: Scheduler<Action>,
    log: Vec<EventRecord>,
    pub(crate) bindings: BTreeMap<crate::netsim::Endpoint, Service>,
    pub(crate) registries: BTreeMap<String, Registry>,
    pub(crate) instances: Vec<ContainerInstance>,
    pub(crate) beamlines: BTreeMap<String, Beamline>,
    pub(crate) ships: Vec<ShipRecord>,
    pub(crate) transit_faults: std::collections::BTreeSet<ImageRef>,
    pub(crate) in_flight: BTreeMap<RequestId, InFlight>,
    pub(crate) completions: BTreeMap<RequestId, Completion>,
    pub(crate) inboxes: BTreeMap<Ipv4Address, Vec<Delivery>>,
    pub(crate) next_request: u64,
    pub(crate) next_ephemeral: u64,
    pub(crate) workflow_specs: Vec<WorkflowSpec>,
    pub(crate) workflows: Vec<WorkflowRun>,
}

impl Engine {
    pub fn new(topology: FederationTopology, seed: u64) -> Self {
        Self {
            topology,
            seed,
            ..Self::default()
        }
    }

    /// Builds the topology, installs images, and starts one static EPICS
    /// container per instrument.
    pub fn from_scenario(spec: &ScenarioSpec) -> Result<Self, SetupError> {
        let mut engine = Engine::new(build_topology(spec)?, spec.seed);
        for decl in &spec.decls {
            match decl {
                Decl::Image {
                    image,
                    host,
                    size,
                    service,
                    port,
                } => {
                    let img = ContainerImage::new(image.clone(), *size, *service, *port, Vec::new())?;
                    engine.install_image(host, img)?;
                }
                Decl::Instrument {
                    name,
                    host,
                    phantom,
                    bins,
                } => engine.add_instrument(name, host, phantom.n, phantom.radius, phantom.intensity, *bins)?,
                Decl::Workflow(wf) => engine.workflow_specs.push(wf.clone()),
                _ => {}
            }
        }
        Ok(engine)
    }

    fn add_instrument(
        &mut self,
        name: &str,
        host: &str,
        n: usize,
        radius: f64,
        intensity: f64,
        bins: usize,
    ) -> Result<(), SetupError> {
        let host_id = self
            .topology
            .node(host)
            .map(|n| n.id.clone())
            .ok_or_else(|| ContainerError::UnknownHost(host.to_string()))?;
        let phantom = make_disk_phantom(n, radius, intensity)?;
        let model = InstrumentModel::new(name, phantom, bins)
            .map_err(|e| SetupError::Instrument(name.to_string(), e.to_string()))?;
        self.beamlines.insert(
            name.to_string(),
            Beamline {
                model,
                host: host_id,
                container: None,
            },
        );
        let ioc = ImageRef::new(&format!("{}-ioc", name.to_lowercase()), "static")?;
        let image = ContainerImage::new(ioc.clone(), 0, ServiceKind::Epics, EPICS_PORT, Vec::new())?;
        self.install_image(host, image)?;
        let cid = self.start_container(host, &ioc, &[], Some(Service::Epics(name.to_string())))?;
        self.beamlines.get_mut(name).expect("inserted").container = Some(cid);
        Ok(())
    }

    pub fn topology(&self) -> &FederationTopology {
        &self.topology
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> f64 {
        self.sched.now()
    }

    pub fn pending_events(&self) -> usize {
        self.sched.pending()
    }

    pub fn beamline(&self, name: &str) -> Option<&Beamline> {
        self.beamlines.get(name)
    }

    pub fn beamlines(&self) -> impl Iterator<Item = (&String, &Beamline)> {
        self.beamlines.iter()
    }

    pub(crate) fn beamline_mut(&mut self, name: &str) -> Option<&mut Beamline> {
        self.beamlines.get_mut(name)
    }

    pub fn workflow_spec(&self, id: &str) -> Option<&WorkflowSpec> {
        self.workflow_specs.iter().find(|w| w.id == id)
    }

    pub fn schedule(&mut self, delay: f64, action: Action) -> Result<EventId, NetError> {
        self.sched.schedule(delay, action)
    }

    /// Queues a log line at the current time. State changes happen
    /// immediately; their records land in `(time, seq)` order.
    pub(crate) fn emit(&mut self, kind: &str, detail: String) {
        self.sched
            .schedule(
                0.0,
                Action::Log {
                    kind: kind.to_string(),
                    detail,
                },
            )
            .expect("zero delay is valid");
    }

    pub fn log(&self) -> &[EventRecord] {
        &self.log
    }

    pub fn log_lines(&self) -> Vec<String> {
        self.log.iter().map(EventRecord::render).collect()
    }

    /// FNV-1a over the concatenated canonical log lines, as 16 hex digits.
    pub fn event_log_digest(&self) -> String {
        let mut text = String::new();
        for rec in &self.log {
            text.push_str(&rec.render());
            text.push('\n');
        }
        hex16(fnv1a64(text.as_bytes()))
    }

    fn process(&mut self, time: f64, seq: u64, action: Action) -> EventRecord {
        let (kind, detail) = match action {
            Action::Note(text) => ("note".to_string(), text),
            Action::Log { kind, detail } => (kind, detail),
            Action::Arrive(id) => self.on_arrive(id),
            Action::Respond(id) => self.on_respond(id),
            Action::Refused(id) => self.on_refused(id),
            Action::Unreachable(id) => self.on_unreachable(id),
            Action::ShipArrive(id) => self.on_ship_arrive(id),
            Action::TaskStart(task) => self.on_task_start(task),
            Action::ReconInput(task) => self.on_recon_input(task),
            Action::ReconDone(task) => self.on_recon_done(task),
        };
        let rec = EventRecord {
            time,
            seq,
            kind,
            detail,
        };
        self.log.push(rec.clone());
        rec
    }

    /// Processes every event due at or before `t`, then sets the clock to `t`.
    pub fn advance_until(&mut self, t: f64) -> Result<Vec<EventRecord>, NetError> {
        self.sched.check_target(t)?;
        let mut out = Vec::new();
        while let Some(ev) = self.sched.pop_due(t) {
            out.push(self.process(ev.time, ev.seq, ev.action));
        }
        self.sched.finish_at(t);
        Ok(out)
    }

    /// Processes events until none remain; the clock stops at the last one.
    pub fn drain(&mut self) -> Vec<EventRecord> {
        let mut out = Vec::new();
        while let Some(ev) = self.sched.pop_due(f64::INFINITY) {
            out.push(self.process(ev.time, ev.seq, ev.action));
        }
        out
    }

    /// Processes events one at a time until `done` holds or the queue empties.
    pub fn run_until(&mut self, mut done: impl FnMut(&Engine) -> bool) -> bool {
        while !done(self) {
            let Some(ev) = self.sched.pop_due(f64::INFINITY) else {
                return false;
            };
            self.process(ev.time, ev.seq, ev.action);
        }
        true
    }

    pub fn run_until_complete(&mut self, id: RequestId) -> Option<Completion> {
        self.run_until(|e| e.completions.contains_key(&id));
        self.completions.get(&id).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_send<T: Send>() {}

    #[test]
    fn engine_values_cross_threads() {
        assert_send::<Engine>();
        assert_send::<EventRecord>();
        assert_send::<crate::orchestrator::WorkflowStatus>();
    }

    #[test]
    fn fresh_engine_digest_is_offset_basis() {
        assert_eq!(Engine::default().event_log_digest(), "cbf29ce484222325");
    }
}
