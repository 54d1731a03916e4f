//! Container image lifecycle: digests, FSA1 archives, per-host registries,
//! shipping between hosts, and running instances with bridged addresses,
//! port maps and access tokens.
//!
//! FSA1 layout:
//!
//! ```text
//! FSA1\n
//! name=<v>\n tag=<v>\n size=<decimal>\n service=<kind>:<port>\n
//! --\n
//! <payload bytes>
//! \n#digest=<16 lowercase hex of fnv1a64 over everything before the footer>\n
//! ```
//!
//! The digest is FNV-1a 64, which detects corruption but is not a
//! cryptographic hash.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::engine::{Action, Engine, TaskRef};
use crate::netsim::{transfer_time, BindTarget, NetError, PortMap, Service};
use crate::protocols::{HttpRequest, HttpResponse};
use crate::topology::{valid_name, Interface, NodeId, NodeKind, Path, TopologyError};

pub const ARCHIVE_MAGIC: &[u8] = b"FSA1\n";
const FOOTER_PREFIX: &[u8] = b"\n#digest=";
const FOOTER_LEN: usize = FOOTER_PREFIX.len() + 16 + 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContainerError {
    #[error("bad magic")]
    BadMagic,
    #[error("digest mismatch: archive says {stored:016x}, content hashes to {computed:016x}")]
    DigestMismatch { stored: u64, computed: u64 },
    #[error("malformed archive: {0}")]
    Malformed(String),
    #[error("bad image reference `{0}`")]
    BadImageRef(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("image {image} not present on `{host}`")]
    ImageAbsent { image: ImageRef, host: String },
    #[error("unknown host `{0}`")]
    UnknownHost(String),
    #[error("port conflict on {0}")]
    PortConflict(String),
    #[error("unknown container `{0}`")]
    UnknownContainer(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hex16(v: u64) -> String {
    format!("{v:016x}")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContainerId(String);

impl ContainerId {
    pub fn from_index(k: u64) -> Self {
        Self(format!("c{k}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub(crate) fn index(&self) -> Option<usize> {
        self.0.strip_prefix('c')?.parse().ok()
    }
}

impl fmt::Display for ContainerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ContainerId {
    type Err = ContainerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let id = Self(s.to_string());
        match id.index() {
            Some(k) if k >= 1 && id == Self::from_index(k as u64) => Ok(id),
            _ => Err(ContainerError::UnknownContainer(s.to_string())),
        }
    }
}

/// `name:tag`
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ImageRef {
    pub name: String,
    pub tag: String,
}

impl ImageRef {
    pub fn new(name: &str, tag: &str) -> Result<Self, ContainerError> {
        if valid_name(name) && valid_name(tag) {
            Ok(Self {
                name: name.to_string(),
                tag: tag.to_string(),
            })
        } else {
            Err(ContainerError::BadImageRef(format!("{name}:{tag}")))
        }
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.tag)
    }
}

impl FromStr for ImageRef {
    type Err = ContainerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, tag) = s
            .split_once(':')
            .ok_or_else(|| ContainerError::BadImageRef(s.to_string()))?;
        Self::new(name, tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceKind {
    Notebook,
    Epics,
    None,
}

impl ServiceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ServiceKind::Notebook => "notebook",
            ServiceKind::Epics => "epics",
            ServiceKind::None => "none",
        }
    }
}

impl FromStr for ServiceKind {
    type Err = ContainerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "notebook" => Ok(ServiceKind::Notebook),
            "epics" => Ok(ServiceKind::Epics),
            "none" => Ok(ServiceKind::None),
            other => Err(ContainerError::InvalidImage(format!("unknown service `{other}`"))),
        }
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerImage {
    pub reference: ImageRef,
    /// Declared bulk size in bytes; drives transfer timing.
    pub size: u64,
    pub service_kind: ServiceKind,
    pub service_port: u16,
    pub payload: Vec<u8>,
}

impl ContainerImage {
    pub fn new(
        reference: ImageRef,
        size: u64,
        service_kind: ServiceKind,
        service_port: u16,
        payload: Vec<u8>,
    ) -> Result<Self, ContainerError> {
        if (payload.len() as u64) > size {
            return Err(ContainerError::InvalidImage(format!(
                "payload of {} bytes exceeds declared size {size}",
                payload.len()
            )));
        }
        if service_kind != ServiceKind::None && service_port == 0 {
            return Err(ContainerError::InvalidImage("service port 0".into()));
        }
        Ok(Self {
            reference,
            size,
            service_kind,
            service_port,
            payload,
        })
    }

    pub fn name(&self) -> &str {
        &self.reference.name
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageArchive {
    pub bytes: Vec<u8>,
    pub digest: u64,
}

/// Serializes an image into a digest-footed FSA1 archive.
pub fn image_save(image: &ContainerImage) -> ImageArchive {
    let mut bytes = Vec::with_capacity(image.payload.len() + 128);
    bytes.extend_from_slice(ARCHIVE_MAGIC);
    bytes.extend_from_slice(
        format!(
            "name={}\ntag={}\nsize={}\nservice={}:{}\n--\n",
            image.reference.name,
            image.reference.tag,
            image.size,
            image.service_kind,
            image.service_port
        )
        .as_bytes(),
    );
    bytes.extend_from_slice(&image.payload);
    let digest = fnv1a64(&bytes);
    bytes.extend_from_slice(FOOTER_PREFIX);
    bytes.extend_from_slice(hex16(digest).as_bytes());
    bytes.push(b'\n');
    ImageArchive { bytes, digest }
}

/// Verifies magic and digest, then reconstructs the image.
pub fn image_load(bytes: &[u8]) -> Result<ContainerImage, ContainerError> {
    let malformed = |m: &str| ContainerError::Malformed(m.to_string());
    if bytes.len() < ARCHIVE_MAGIC.len() + FOOTER_LEN {
        return Err(malformed("archive too short"));
    }
    if !bytes.starts_with(ARCHIVE_MAGIC) {
        return Err(ContainerError::BadMagic);
    }
    let (content, footer) = bytes.split_at(bytes.len() - FOOTER_LEN);
    let hex = footer
        .strip_prefix(FOOTER_PREFIX)
        .and_then(|f| f.strip_suffix(b"\n"))
        .ok_or_else(|| malformed("missing digest footer"))?;
    if !hex.iter().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(b)) {
        return Err(malformed("digest is not lowercase hex"));
    }
    let stored = std::str::from_utf8(hex)
        .ok()
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| malformed("bad digest"))?;
    let computed = fnv1a64(content);
    if stored != computed {
        return Err(ContainerError::DigestMismatch { stored, computed });
    }

    let mut rest = &content[ARCHIVE_MAGIC.len()..];
    let mut field = |key: &str| -> Result<String, ContainerError> {
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed("truncated manifest"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| malformed("manifest not UTF-8"))?;
        rest = &rest[nl + 1..];
        line.strip_prefix(key)
            .and_then(|l| l.strip_prefix('='))
            .map(str::to_string)
            .ok_or_else(|| malformed(&format!("expected `{key}=`")))
    };
    let name = field("name")?;
    let tag = field("tag")?;
    let size_text = field("size")?;
    let service = field("service")?;
    let payload = rest
        .strip_prefix(b"--\n".as_slice())
        .ok_or_else(|| malformed("missing separator"))?
        .to_vec();

    let reference = ImageRef::new(&name, &tag).map_err(|_| malformed("bad name or tag"))?;
    if size_text.is_empty() || !size_text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed("bad size"));
    }
    let size: u64 = size_text.parse().map_err(|_| malformed("bad size"))?;
    let (kind, port) = service
        .split_once(':')
        .ok_or_else(|| malformed("bad service"))?;
    let kind: ServiceKind = kind.parse().map_err(|_| malformed("bad service kind"))?;
    if port.is_empty() || !port.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed("bad service port"));
    }
    let port: u16 = port.parse().map_err(|_| malformed("bad service port"))?;
    let image = ContainerImage::new(reference, size, kind, port, payload)
        .map_err(|e| ContainerError::Malformed(e.to_string()))?;
    // Canonical-form check: non-canonical manifests (e.g. leading zeros) would
    // not round-trip.
    if image_save(&image).bytes != bytes {
        return Err(malformed("non-canonical manifest"));
    }
    Ok(image)
}

/// Images held by one host, keyed by exact `name:tag`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    images: BTreeMap<ImageRef, ContainerImage>,
}

impl Registry {
    pub fn insert(&mut self, image: ContainerImage) {
        self.images.insert(image.reference.clone(), image);
    }

    pub fn get(&self, reference: &ImageRef) -> Option<&ContainerImage> {
        self.images.get(reference)
    }

    pub fn contains(&self, reference: &ImageRef) -> bool {
        self.images.contains_key(reference)
    }

    pub fn images(&self) -> impl Iterator<Item = &ContainerImage> {
        self.images.values()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerState {
    Created,
    Running,
    Stopped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerInstance {
    pub id: ContainerId,
    pub image: ImageRef,
    pub image_digest: u64,
    pub host: NodeId,
    pub state: ContainerState,
    pub port_maps: Vec<PortMap>,
    pub bridged: Option<Interface>,
    pub token: String,
    /// Output of a workload that ran inside the container.
    pub result: Option<String>,
}

/// `hex16(fnv1a64(id ++ seed as 8 big-endian bytes))`
pub fn container_token(id: &ContainerId, seed: u64) -> String {
    let mut bytes = id.as_str().as_bytes().to_vec();
    bytes.extend_from_slice(&seed.to_be_bytes());
    hex16(fnv1a64(&bytes))
}

/// The notebook service: `/` gated by the instance's access token.
pub fn serve_notebook(instance: &ContainerInstance, req: &HttpRequest) -> HttpResponse {
    if req.query_param("token") != Some(instance.token.as_str()) {
        return HttpResponse::new(403, "");
    }
    if req.path != "/" {
        return HttpResponse::new(404, "");
    }
    let mut body = format!("notebook {} container={}\n", instance.image.name, instance.id);
    if let Some(result) = &instance.result {
        body.push_str("\n[result]\n");
        body.push_str(result);
    }
    HttpResponse::new(200, body)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ShipId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct ShipRecord {
    pub image: ImageRef,
    pub from: NodeId,
    pub to: NodeId,
    pub path: Path,
    pub archive: ImageArchive,
    pub started_at: f64,
    pub arrives_at: f64,
    pub loaded: Option<Result<(), String>>,
    pub(crate) owner: Option<TaskRef>,
}

impl Engine {
    pub fn registry(&self, host: &str) -> Option<&Registry> {
        self.registries.get(host)
    }

    fn host_node(&self, host: &str) -> Result<NodeId, ContainerError> {
        match self.topology.node(host) {
            Some(n) if n.kind == NodeKind::Host => Ok(n.id.clone()),
            _ => Err(ContainerError::UnknownHost(host.to_string())),
        }
    }

    /// Registers an image directly into a host registry.
    pub fn install_image(&mut self, host: &str, image: ContainerImage) -> Result<(), ContainerError> {
        self.host_node(host)?;
        self.registries.entry(host.to_string()).or_default().insert(image);
        Ok(())
    }

    /// Verifies an archive and registers the image at `host`.
    pub fn load_image(&mut self, host: &str, archive: &[u8]) -> Result<ImageRef, ContainerError> {
        let image = image_load(archive)?;
        let reference = image.reference.clone();
        self.install_image(host, image)?;
        Ok(reference)
    }

    /// Starts moving a saved copy of `image` from one host's registry to
    /// another's. The load is scheduled at `now + transfer_time(path, size)`.
    pub fn ship_image(&mut self, image: &ImageRef, from: &str, to: &str) -> Result<ShipId, ContainerError> {
        self.ship_image_for(image, from, to, None)
    }

    pub(crate) fn ship_image_for(
        &mut self,
        image: &ImageRef,
        from: &str,
        to: &str,
        owner: Option<TaskRef>,
    ) -> Result<ShipId, ContainerError> {
        let from_id = self.host_node(from)?;
        let to_id = self.host_node(to)?;
        let img = self
            .registries
            .get(from)
            .and_then(|r| r.get(image))
            .ok_or_else(|| ContainerError::ImageAbsent {
                image: image.clone(),
                host: from.to_string(),
            })?;
        let src = self.topology.node(from).map(|n| n.address).expect("host exists");
        let dst = self.topology.node(to).map(|n| n.address).expect("host exists");
        let path = self.topology.route_lookup(src, dst)?;
        let size = img.size;
        let delay = transfer_time(&path, size, &self.topology)?;
        let archive = image_save(img);
        let id = ShipId(self.ships.len() as u64);
        let now = self.now();
        self.ships.push(ShipRecord {
            image: image.clone(),
            from: from_id,
            to: to_id,
            path,
            archive,
            started_at: now,
            arrives_at: now + delay,
            loaded: None,
            owner,
        });
        self.emit("ship", format!("{image} {from} -> {to} bytes={size}"));
        self.schedule(delay, Action::ShipArrive(id))
            .map_err(ContainerError::Net)?;
        Ok(id)
    }

    pub fn ship(&self, id: ShipId) -> Option<&ShipRecord> {
        self.ships.get(id.0 as usize)
    }

    /// Corrupts one byte of the next shipped archive of `image` on arrival.
    pub fn inject_transit_fault(&mut self, image: &ImageRef) {
        self.transit_faults.insert(image.clone());
    }

    pub(crate) fn on_ship_arrive(&mut self, id: ShipId) -> (String, String) {
        let rec = &self.ships[id.0 as usize];
        let (to, image, mut bytes) = (rec.to.to_string(), rec.image.clone(), rec.archive.bytes.clone());
        if self.transit_faults.remove(&image) {
            let mid = bytes.len() / 2;
            bytes[mid] ^= 0x20;
        }
        let digest = rec.archive.digest;
        let outcome = self.load_image(&to, &bytes).map(|_| ()).map_err(|e| e.to_string());
        let detail = match &outcome {
            Ok(()) => format!("{image} at {to} digest={}", hex16(digest)),
            Err(e) => format!("{image} at {to} failed: {e}"),
        };
        let kind = if outcome.is_ok() { "load" } else { "load-failed" };
        let rec = &mut self.ships[id.0 as usize];
        rec.loaded = Some(outcome);
        if let Some(owner) = rec.owner {
            self.on_ship_done(owner, id);
        }
        (kind.to_string(), detail)
    }

    pub fn instances(&self) -> &[ContainerInstance] {
        &self.instances
    }

    pub fn instance(&self, id: &ContainerId) -> Option<&ContainerInstance> {
        let k = id.index()?;
        self.instances.get(k.checked_sub(1)?)
    }

    pub(crate) fn instance_mut(&mut self, id: &ContainerId) -> Option<&mut ContainerInstance> {
        let k = id.index()?;
        self.instances.get_mut(k.checked_sub(1)?)
    }

    /// Starts an image present on `host`, bridges it onto the site network
    /// and binds its service on the bridged address plus any host port maps.
    pub fn run_container(
        &mut self,
        host: &str,
        image: &ImageRef,
        port_maps: &[PortMap],
    ) -> Result<ContainerId, ContainerError> {
        self.start_container(host, image, port_maps, None)
    }

    pub(crate) fn start_container(
        &mut self,
        host: &str,
        image: &ImageRef,
        port_maps: &[PortMap],
        service: Option<Service>,
    ) -> Result<ContainerId, ContainerError> {
        let host_id = self.host_node(host)?;
        let img = self
            .registries
            .get(host)
            .and_then(|r| r.get(image))
            .ok_or_else(|| ContainerError::ImageAbsent {
                image: image.clone(),
                host: host.to_string(),
            })?
            .clone();

        let host_addr = self.topology.node(host).map(|n| n.address).expect("host exists");
        let mut seen = Vec::new();
        for pm in port_maps {
            let ep = crate::netsim::Endpoint::new(host_addr, pm.host_port)?;
            if self.bindings.contains_key(&ep) || seen.contains(&pm.host_port) {
                return Err(ContainerError::PortConflict(ep.to_string()));
            }
            seen.push(pm.host_port);
        }

        let id = ContainerId::from_index(self.instances.len() as u64 + 1);
        let service = service.or(match img.service_kind {
            ServiceKind::Notebook => Some(Service::Notebook(id.clone())),
            ServiceKind::Epics => self
                .beamlines
                .iter()
                .find(|(_, b)| b.host == host_id)
                .map(|(name, _)| Service::Epics(name.clone())),
            ServiceKind::None => None,
        });
        self.topology.register_container(id.clone(), host_id.clone());
        let bridged = self.topology.attach_bridge(&host_id, &id)?;
        self.instances.push(ContainerInstance {
            id: id.clone(),
            image: image.clone(),
            image_digest: image_save(&img).digest,
            host: host_id,
            state: ContainerState::Created,
            port_maps: port_maps.to_vec(),
            bridged: Some(bridged.clone()),
            token: container_token(&id, self.seed),
            result: None,
        });
        if let Some(service) = service {
            self.bind_service(BindTarget::Container(id.clone()), img.service_port, service)?;
        }
        let maps: Vec<String> = port_maps.iter().map(PortMap::to_string).collect();
        self.instance_mut(&id).expect("just created").state = ContainerState::Running;
        self.emit(
            "container",
            format!(
                "{id} {image} running on {host} ip={} ports={}",
                bridged.address,
                if maps.is_empty() { "-".to_string() } else { maps.join(",") }
            ),
        );
        Ok(id)
    }
}
