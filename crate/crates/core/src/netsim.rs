//! Deterministic virtual-time machinery: event ordering, the canonical event
//! log, store-and-forward transfer timing, service bindings with port maps,
//! and request/response delivery over the topology.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::containers::ContainerId;
use crate::engine::{Action, Engine, TaskRef};
use crate::protocols::format_timestamp;
use crate::topology::{FederationTopology, Ipv4Address, NodeId, TopologyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("negative or non-finite delay {0}")]
    BadDelay(f64),
    #[error("cannot advance to {target}: clock is already at {now}")]
    TimeReversal { now: f64, target: f64 },
    #[error("empty path")]
    EmptyPath,
    #[error("no link between `{0}` and `{1}`")]
    NotLinked(NodeId, NodeId),
    #[error("port must be in 1..=65535")]
    BadPort,
    #[error("bad endpoint `{0}`")]
    BadEndpoint(String),
    #[error("bad port map `{0}`")]
    BadPortMap(String),
    #[error("{0} already bound")]
    AlreadyBound(Endpoint),
    #[error("unknown bind target `{0}`")]
    UnknownTarget(String),
    #[error("container {0} has no bridged interface")]
    NotBridged(ContainerId),
    #[error("payload of {payload} bytes exceeds message size {size}")]
    Oversized { payload: usize, size: u64 },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VirtualClock {
    now: f64,
}

impl VirtualClock {
    pub fn now(&self) -> f64 {
        self.now
    }

    fn set(&mut self, t: f64) {
        debug_assert!(t >= self.now);
        self.now = t;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Clone)]
pub struct Event<A> {
    pub time: f64,
    pub seq: u64,
    pub action: A,
}

impl<A> PartialEq for Event<A> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<A> Eq for Event<A> {}

impl<A> PartialOrd for Event<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Reversed so that `BinaryHeap` pops the earliest (time, seq) first.
impl<A> Ord for Event<A> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// One processed event in canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub seq: u64,
    pub kind: String,
    pub detail: String,
}

impl EventRecord {
    /// `t=<seconds, 9 decimals> seq=<n> kind=<k> detail=<text>`
    pub fn render(&self) -> String {
        format!(
            "t={} seq={} kind={} detail={}",
            format_timestamp(self.time),
            self.seq,
            self.kind,
            self.detail
        )
    }
}

/// Time-ordered event queue with a monotone sequence counter.
#[derive(Debug, Clone)]
pub struct Scheduler<A> {
    clock: VirtualClock,
    next_seq: u64,
    queue: BinaryHeap<Event<A>>,
}

impl<A> Default for Scheduler<A> {
    fn default() -> Self {
        Self {
            clock: VirtualClock::default(),
            next_seq: 0,
            queue: BinaryHeap::new(),
        }
    }
}

impl<A> Scheduler<A> {
    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn schedule(&mut self, delay: f64, action: A) -> Result<EventId, NetError> {
        if !(delay >= 0.0 && delay.is_finite()) {
            return Err(NetError::BadDelay(delay));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Event {
            time: self.clock.now() + delay,
            seq,
            action,
        });
        Ok(EventId(seq))
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn next_time(&self) -> Option<f64> {
        self.queue.peek().map(|e| e.time)
    }

    /// Pops the earliest event if it is due at or before `t`, moving the
    /// clock to its time.
    pub fn pop_due(&mut self, t: f64) -> Option<Event<A>> {
        if self.queue.peek()?.time > t {
            return None;
        }
        let ev = self.queue.pop()?;
        self.clock.set(ev.time);
        Some(ev)
    }

    pub fn check_target(&self, t: f64) -> Result<(), NetError> {
        if t < self.clock.now() || t.is_nan() {
            return Err(NetError::TimeReversal {
                now: self.clock.now(),
                target: t,
            });
        }
        Ok(())
    }

    pub fn finish_at(&mut self, t: f64) {
        self.clock.set(t);
    }
}

/// Store-and-forward time: `Σ (latency + size / bandwidth)` over the hops.
/// A single-node path (container on its own host) costs nothing.
pub fn transfer_time(path: &[NodeId], size: u64, topology: &FederationTopology) -> Result<f64, NetError> {
    if path.is_empty() {
        return Err(NetError::EmptyPath);
    }
    let mut total = 0.0;
    for hop in path.windows(2) {
        let link = topology
            .link_between(&hop[0], &hop[1])
            .ok_or_else(|| NetError::NotLinked(hop[0].clone(), hop[1].clone()))?;
        total += link.latency + size as f64 / link.bandwidth;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub address: Ipv4Address,
    pub port: u16,
}

impl Endpoint {
    pub fn new(address: Ipv4Address, port: u16) -> Result<Self, NetError> {
        if port == 0 {
            return Err(NetError::BadPort);
        }
        Ok(Self { address, port })
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.address, self.port)
    }
}

impl FromStr for Endpoint {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || NetError::BadEndpoint(s.to_string());
        let (addr, port) = s.rsplit_once(':').ok_or_else(bad)?;
        let address = addr.parse().map_err(|_| bad())?;
        let port = port.parse().map_err(|_| bad())?;
        Endpoint::new(address, port).map_err(|_| bad())
    }
}

/// `container:host` port exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortMap {
    pub container_port: u16,
    pub host_port: u16,
}

impl PortMap {
    pub fn new(container_port: u16, host_port: u16) -> Result<Self, NetError> {
        if container_port == 0 || host_port == 0 {
            return Err(NetError::BadPort);
        }
        Ok(Self {
            container_port,
            host_port,
        })
    }
}

impl fmt::Display for PortMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.container_port, self.host_port)
    }
}

impl FromStr for PortMap {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || NetError::BadPortMap(s.to_string());
        let (c, h) = s.split_once(':').ok_or_else(bad)?;
        PortMap::new(c.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?).map_err(|_| bad())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub payload: Vec<u8>,
    /// Bytes used for timing; may exceed the materialized payload.
    pub size: u64,
}

impl Message {
    pub fn new(src: Endpoint, dst: Endpoint, payload: Vec<u8>, size: u64) -> Result<Self, NetError> {
        if payload.len() as u64 > size {
            return Err(NetError::Oversized {
                payload: payload.len(),
                size,
            });
        }
        Ok(Self {
            src,
            dst,
            payload,
            size,
        })
    }
}

/// What answers requests arriving at a bound endpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Service {
    Notebook(ContainerId),
    /// EPICS-lite server of the named instrument.
    Epics(String),
    /// Returns the request payload after `delay` virtual seconds.
    Echo { delay: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BindTarget {
    Node(NodeId),
    Container(ContainerId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub endpoints: Vec<Endpoint>,
    pub service: Service,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Response(Vec<u8>),
    Refused,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub time: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone)]
pub(crate) struct InFlight {
    pub message: Message,
    pub path: Vec<NodeId>,
    pub one_way: bool,
    pub owner: Option<TaskRef>,
}

/// A one-way message that reached its destination.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub time: f64,
    pub src: Endpoint,
    pub payload: Vec<u8>,
}

pub(crate) struct Reply {
    pub payload: Vec<u8>,
    pub delay: f64,
    pub pushes: Vec<(Endpoint, Vec<u8>)>,
}

impl Engine {
    /// Binds `service` on `port` of the target's interface. For containers,
    /// host-side port maps whose container port equals `port` are bound too.
    pub fn bind_service(&mut self, target: BindTarget, port: u16, service: Service) -> Result<Binding, NetError> {
        let mut endpoints = Vec::new();
        match &target {
            BindTarget::Node(id) => {
                let node = self
                    .topology
                    .node(id.as_str())
                    .ok_or_else(|| NetError::UnknownTarget(id.to_string()))?;
                endpoints.push(Endpoint::new(node.address, port)?);
            }
            BindTarget::Container(cid) => {
                let inst = self
                    .instance(cid)
                    .ok_or_else(|| NetError::UnknownTarget(cid.to_string()))?;
                let iface = inst
                    .bridged
                    .as_ref()
                    .ok_or_else(|| NetError::NotBridged(cid.clone()))?;
                endpoints.push(Endpoint::new(iface.address, port)?);
                let host_addr = self
                    .topology
                    .node(inst.host.as_str())
                    .map(|n| n.address)
                    .ok_or_else(|| NetError::UnknownTarget(inst.host.to_string()))?;
                for pm in inst.port_maps.iter().filter(|pm| pm.container_port == port) {
                    endpoints.push(Endpoint::new(host_addr, pm.host_port)?);
                }
            }
        }
        for (i, ep) in endpoints.iter().enumerate() {
            if self.bindings.contains_key(ep) || endpoints[..i].contains(ep) {
                return Err(NetError::AlreadyBound(*ep));
            }
        }
        for ep in &endpoints {
            self.bindings.insert(*ep, service.clone());
        }
        Ok(Binding { endpoints, service })
    }

    pub fn binding_at(&self, ep: &Endpoint) -> Option<&Service> {
        self.bindings.get(ep)
    }

    fn source_endpoint(&mut self, src: &str) -> Result<Endpoint, NetError> {
        let addr = self
            .topology
            .node(src)
            .map(|n| n.address)
            .ok_or_else(|| NetError::UnknownTarget(src.to_string()))?;
        let port = 49152 + (self.next_ephemeral % 16384) as u16;
        self.next_ephemeral += 1;
        Endpoint::new(addr, port)
    }

    /// Sends a request from node `src` to `dst`. The outcome arrives as a
    /// completion event: a response, a refusal, or unreachability.
    pub fn request_response(
        &mut self,
        src: &str,
        dst: Endpoint,
        payload: Vec<u8>,
        size: u64,
    ) -> Result<RequestId, NetError> {
        self.send_request(src, dst, payload, size, None)
    }

    pub(crate) fn send_request(
        &mut self,
        src: &str,
        dst: Endpoint,
        payload: Vec<u8>,
        size: u64,
        owner: Option<TaskRef>,
    ) -> Result<RequestId, NetError> {
        let src_ep = self.source_endpoint(src)?;
        let message = Message::new(src_ep, dst, payload, size)?;
        self.dispatch(message, false, owner)
    }

    /// Sends a message that expects no reply; it terminates as a delivery
    /// into the destination address's inbox.
    pub fn send_datagram(&mut self, src: Endpoint, dst: Endpoint, payload: Vec<u8>) -> Result<RequestId, NetError> {
        let size = payload.len() as u64;
        let message = Message::new(src, dst, payload, size)?;
        self.dispatch(message, true, None)
    }

    fn dispatch(&mut self, message: Message, one_way: bool, owner: Option<TaskRef>) -> Result<RequestId, NetError> {
        let id = RequestId(self.next_request);
        self.next_request += 1;
        let routed = self.topology.route_lookup(message.src.address, message.dst.address);
        let (path, action, delay) = match routed {
            Ok(path) => {
                let delay = transfer_time(&path, message.size, &self.topology)?;
                (path, Action::Arrive(id), delay)
            }
            Err(TopologyError::Unreachable(_)) => (Vec::new(), Action::Unreachable(id), 0.0),
            Err(e) => return Err(e.into()),
        };
        self.in_flight.insert(
            id,
            InFlight {
                message,
                path,
                one_way,
                owner,
            },
        );
        self.schedule(delay, action)?;
        Ok(id)
    }

    pub fn completion(&self, id: RequestId) -> Option<&Completion> {
        self.completions.get(&id)
    }

    pub fn inbox(&self, addr: Ipv4Address) -> &[Delivery] {
        self.inboxes.get(&addr).map_or(&[], Vec::as_slice)
    }

    pub(crate) fn on_arrive(&mut self, id: RequestId) -> (String, String) {
        let flight = self.in_flight[&id].clone();
        let msg = &flight.message;
        let summary = format!("{id} {} -> {} bytes={}", msg.src, msg.dst, msg.size);
        if flight.one_way {
            let time = self.now();
            self.inboxes.entry(msg.dst.address).or_default().push(Delivery {
                time,
                src: msg.src,
                payload: msg.payload.clone(),
            });
            self.finish(id, Outcome::Response(Vec::new()));
            return ("datagram".into(), summary);
        }
        let back: Vec<NodeId> = flight.path.iter().rev().cloned().collect();
        let Some(service) = self.bindings.get(&msg.dst).cloned() else {
            let delay = transfer_time(&back, 0, &self.topology).unwrap_or(0.0);
            self.schedule(delay, Action::Refused(id)).expect("finite delay");
            return ("request".into(), format!("{summary} unbound"));
        };
        let reply = self.handle(&service, msg);
        for (to, line) in reply.pushes {
            let from = msg.dst;
            // An unreachable subscriber still yields its own terminal event.
            let _ = self.send_datagram(from, to, line);
        }
        let size = reply.payload.len() as u64;
        let delay = reply.delay + transfer_time(&back, size, &self.topology).unwrap_or(0.0);
        self.in_flight.get_mut(&id).expect("in flight").message.payload = reply.payload;
        self.schedule(delay, Action::Respond(id)).expect("finite delay");
        ("request".into(), summary)
    }

    pub(crate) fn on_respond(&mut self, id: RequestId) -> (String, String) {
        let flight = &self.in_flight[&id];
        let payload = flight.message.payload.clone();
        let detail = format!("{id} {} -> {} bytes={}", flight.message.dst, flight.message.src, payload.len());
        self.finish(id, Outcome::Response(payload));
        ("response".into(), detail)
    }

    pub(crate) fn on_refused(&mut self, id: RequestId) -> (String, String) {
        let flight = &self.in_flight[&id];
        let detail = format!("{id} {} -> {}", flight.message.src, flight.message.dst);
        self.finish(id, Outcome::Refused);
        ("refused".into(), detail)
    }

    pub(crate) fn on_unreachable(&mut self, id: RequestId) -> (String, String) {
        let flight = &self.in_flight[&id];
        let detail = format!("{id} {} -> {}", flight.message.src, flight.message.dst);
        self.finish(id, Outcome::Unreachable);
        ("unreachable".into(), detail)
    }

    fn finish(&mut self, id: RequestId, outcome: Outcome) {
        let flight = self.in_flight.remove(&id).expect("in flight");
        let time = self.now();
        self.completions.insert(id, Completion { time, outcome });
        if let Some(owner) = flight.owner {
            self.on_request_done(owner, id);
        }
    }

    fn handle(&mut self, service: &Service, msg: &Message) -> Reply {
        match service {
            Service::Echo { delay } => Reply {
                payload: msg.payload.clone(),
                delay: *delay,
                pushes: Vec::new(),
            },
            Service::Notebook(cid) => self.handle_notebook(cid, &msg.payload),
            Service::Epics(name) => self.handle_epics(name, msg),
        }
    }
}
