//! Static model of the federation: sites, hosts, gateway routers, links and
//! addresses, plus hop-count route compilation and path lookup.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::cli::scenario::{Decl, ScenarioSpec};
use crate::containers::ContainerId;

/// First host number handed out to bridged containers.
pub const BRIDGE_FIRST_HOST: u32 = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("bad address `{0}`")]
    BadAddress(String),
    #[error("bad subnet `{0}`")]
    BadSubnet(String),
    #[error("bad node name `{0}`")]
    BadName(String),
    #[error("duplicate address {0}")]
    DuplicateAddress(Ipv4Address),
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("node `{node}` references unknown site `{site}`")]
    UnknownSite { node: String, site: String },
    #[error("address {address} of `{node}` is outside subnet {subnet}")]
    OutsideSubnet {
        node: String,
        address: Ipv4Address,
        subnet: Subnet,
    },
    #[error("link endpoint `{0}` is unknown")]
    UnknownEndpoint(String),
    #[error("self-link on `{0}`")]
    SelfLink(String),
    #[error("duplicate link {0} <-> {1}")]
    DuplicateLink(String, String),
    #[error("wan endpoint `{0}` is not a router")]
    WanNotRouter(String),
    #[error("bad link parameters between `{0}` and `{1}`")]
    BadLinkParams(String, String),
    #[error("site `{0}` has no gateway router at host address .1")]
    SiteWithoutGateway(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("`{0}` is not a host")]
    NotAHost(String),
    #[error("unknown source address {0}")]
    UnknownSource(Ipv4Address),
    #[error("destination {0} unreachable")]
    Unreachable(Ipv4Address),
    #[error("subnet {0} exhausted")]
    SubnetExhausted(Subnet),
    #[error("container {container} is not on host `{host}`")]
    ContainerNotOnHost { container: ContainerId, host: NodeId },
    #[error("container {0} already bridged")]
    AlreadyBridged(ContainerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ipv4Address(Ipv4Addr);

impl Ipv4Address {
    pub const fn new(a: u8, b: u8, c: u8, d: u8) -> Self {
        Self(Ipv4Addr::new(a, b, c, d))
    }

    pub fn octets(&self) -> [u8; 4] {
        self.0.octets()
    }

    pub fn to_u32(self) -> u32 {
        u32::from(self.0)
    }

    pub fn from_u32(v: u32) -> Self {
        Self(Ipv4Addr::from(v))
    }
}

impl fmt::Display for Ipv4Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for Ipv4Address {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<Ipv4Addr>()
            .map(Self)
            .map_err(|_| TopologyError::BadAddress(s.to_string()))
    }
}

/// An IPv4 prefix with all host bits zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Subnet {
    base: Ipv4Address,
    prefix_len: u8,
}

impl Subnet {
    pub fn new(base: Ipv4Address, prefix_len: u8) -> Result<Self, TopologyError> {
        let net = Self { base, prefix_len };
        if prefix_len > 32 || base.to_u32() & !net.mask() != 0 {
            return Err(TopologyError::BadSubnet(format!("{base}/{prefix_len}")));
        }
        Ok(net)
    }

    pub fn base(&self) -> Ipv4Address {
        self.base
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }

    fn mask(&self) -> u32 {
        if self.prefix_len == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(self.prefix_len))
        }
    }

    pub fn contains(&self, addr: Ipv4Address) -> bool {
        addr.to_u32() & self.mask() == self.base.to_u32()
    }

    /// Number of addresses in the prefix, including network and broadcast.
    pub fn size(&self) -> u64 {
        1u64 << (32 - u32::from(self.prefix_len))
    }

    /// The address `base + n`, if it falls inside the prefix.
    pub fn host(&self, n: u32) -> Option<Ipv4Address> {
        (u64::from(n) < self.size()).then(|| Ipv4Address::from_u32(self.base.to_u32() + n))
    }
}

impl fmt::Display for Subnet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.base, self.prefix_len)
    }
}

impl FromStr for Subnet {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TopologyError::BadSubnet(s.to_string());
        let (base, len) = s.split_once('/').ok_or_else(bad)?;
        let base: Ipv4Address = base.parse().map_err(|_| bad())?;
        let len: u8 = len.parse().map_err(|_| bad())?;
        Subnet::new(base, len).map_err(|_| bad())
    }
}

pub(crate) fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

/// Name of a host or router; unique per federation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(name: &str) -> Result<Self, TopologyError> {
        if valid_name(name) {
            Ok(Self(name.to_string()))
        } else {
            Err(TopologyError::BadName(name.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Host,
    Router,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub site: String,
    pub address: Ipv4Address,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub name: String,
    pub subnet: Subnet,
    pub gateway: NodeId,
}

/// Bidirectional link with symmetric parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub a: NodeId,
    pub b: NodeId,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds.
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Owner {
    Node(NodeId),
    Container(ContainerId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interface {
    pub owner: Owner,
    pub address: Ipv4Address,
    pub subnet: Subnet,
}

/// Compiled forwarding decision for one destination subnet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    /// The node sits on the destination subnet.
    Direct,
    Via(NodeId),
    Unreachable,
}

/// Ordered node list from the source's node to the destination's node.
pub type Path = Vec<NodeId>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FederationTopology {
    sites: Vec<Site>,
    nodes: BTreeMap<NodeId, Node>,
    links: Vec<Link>,
    interfaces: Vec<Interface>,
    routing: BTreeMap<NodeId, BTreeMap<Subnet, Route>>,
    placement: BTreeMap<ContainerId, NodeId>,
    by_address: BTreeMap<Ipv4Address, usize>,
    link_index: BTreeMap<(NodeId, NodeId), usize>,
}

/// Builds the federation described by a scenario and compiles its routes.
pub fn build_topology(scenario: &ScenarioSpec) -> Result<FederationTopology, TopologyError> {
    let mut topo = FederationTopology::default();
    let mut subnets: BTreeMap<String, Subnet> = BTreeMap::new();
    let mut site_order = Vec::new();

    for decl in &scenario.decls {
        match decl {
            Decl::Site { name, subnet } => {
                if subnets.insert(name.clone(), *subnet).is_some() {
                    return Err(TopologyError::DuplicateName(name.clone()));
                }
                site_order.push(name.clone());
            }
            Decl::Router { name, site, ip } => {
                topo.add_node(name, NodeKind::Router, site, *ip, &subnets)?
            }
            Decl::Host { name, site, ip } => {
                topo.add_node(name, NodeKind::Host, site, *ip, &subnets)?
            }
            Decl::Link {
                a,
                b,
                bandwidth,
                latency,
            } => topo.add_link(a, b, *bandwidth, *latency, false)?,
            Decl::Wan {
                a,
                b,
                bandwidth,
                latency,
            } => topo.add_link(a, b, *bandwidth, *latency, true)?,
            _ => {}
        }
    }

    for name in site_order {
        let subnet = subnets[&name];
        let gw_addr = subnet.host(1);
        let gateway = topo
            .nodes
            .values()
            .find(|n| n.kind == NodeKind::Router && n.site == name && Some(n.address) == gw_addr)
            .map(|n| n.id.clone())
            .ok_or_else(|| TopologyError::SiteWithoutGateway(name.clone()))?;
        topo.sites.push(Site {
            name,
            subnet,
            gateway,
        });
    }

    topo.compile_routes();
    Ok(topo)
}

impl FederationTopology {
    fn add_node(
        &mut self,
        name: &str,
        kind: NodeKind,
        site: &str,
        address: Ipv4Address,
        subnets: &BTreeMap<String, Subnet>,
    ) -> Result<(), TopologyError> {
        let id = NodeId::new(name)?;
        let subnet = *subnets.get(site).ok_or_else(|| TopologyError::UnknownSite {
            node: name.to_string(),
            site: site.to_string(),
        })?;
        if self.nodes.contains_key(&id) {
            return Err(TopologyError::DuplicateName(name.to_string()));
        }
        if !subnet.contains(address) {
            return Err(TopologyError::OutsideSubnet {
                node: name.to_string(),
                address,
                subnet,
            });
        }
        self.push_interface(Interface {
            owner: Owner::Node(id.clone()),
            address,
            subnet,
        })?;
        self.nodes.insert(
            id.clone(),
            Node {
                id,
                kind,
                site: site.to_string(),
                address,
            },
        );
        Ok(())
    }

    fn push_interface(&mut self, iface: Interface) -> Result<(), TopologyError> {
        if self.by_address.contains_key(&iface.address) {
            return Err(TopologyError::DuplicateAddress(iface.address));
        }
        self.by_address.insert(iface.address, self.interfaces.len());
        self.interfaces.push(iface);
        Ok(())
    }

    fn add_link(
        &mut self,
        a: &str,
        b: &str,
        bandwidth: f64,
        latency: f64,
        wan: bool,
    ) -> Result<(), TopologyError> {
        let lookup = |name: &str| {
            self.nodes
                .get_key_value(&NodeId(name.to_string()))
                .map(|(k, n)| (k.clone(), n.kind))
                .ok_or_else(|| TopologyError::UnknownEndpoint(name.to_string()))
        };
        let (a_id, a_kind) = lookup(a)?;
        let (b_id, b_kind) = lookup(b)?;
        if a_id == b_id {
            return Err(TopologyError::SelfLink(a.to_string()));
        }
        if wan {
            for (id, kind) in [(&a_id, a_kind), (&b_id, b_kind)] {
                if kind != NodeKind::Router {
                    return Err(TopologyError::WanNotRouter(id.to_string()));
                }
            }
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite() && latency >= 0.0 && latency.is_finite()) {
            return Err(TopologyError::BadLinkParams(a.to_string(), b.to_string()));
        }
        if self.link_index.contains_key(&(a_id.clone(), b_id.clone())) {
            return Err(TopologyError::DuplicateLink(a.to_string(), b.to_string()));
        }
        let idx = self.links.len();
        self.link_index.insert((a_id.clone(), b_id.clone()), idx);
        self.link_index.insert((b_id.clone(), a_id.clone()), idx);
        self.links.push(Link {
            a: a_id,
            b: b_id,
            bandwidth,
            latency,
        });
        Ok(())
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, name: &str) -> Option<&Site> {
        self.sites.iter().find(|s| s.name == name)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.get(&NodeId(name.to_string()))
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn interfaces(&self) -> &[Interface] {
        &self.interfaces
    }

    pub fn routing(&self) -> &BTreeMap<NodeId, BTreeMap<Subnet, Route>> {
        &self.routing
    }

    pub fn route(&self, node: &NodeId, subnet: &Subnet) -> Option<&Route> {
        self.routing.get(node)?.get(subnet)
    }

    pub fn link_between(&self, a: &NodeId, b: &NodeId) -> Option<&Link> {
        self.link_index
            .get(&(a.clone(), b.clone()))
            .map(|&i| &self.links[i])
    }

    pub fn interface_at(&self, addr: Ipv4Address) -> Option<&Interface> {
        self.by_address.get(&addr).map(|&i| &self.interfaces[i])
    }

    /// The node that terminates traffic for `addr`; bridged containers
    /// resolve to their host.
    pub fn node_of(&self, addr: Ipv4Address) -> Option<&NodeId> {
        match &self.interface_at(addr)?.owner {
            Owner::Node(id) => Some(id),
            Owner::Container(cid) => self.placement.get(cid),
        }
    }

    pub fn site_subnet_of(&self, addr: Ipv4Address) -> Option<Subnet> {
        self.sites
            .iter()
            .map(|s| s.subnet)
            .find(|s| s.contains(addr))
    }

    pub fn container_interface(&self, cid: &ContainerId) -> Option<&Interface> {
        self.interfaces
            .iter()
            .find(|i| matches!(&i.owner, Owner::Container(c) if c == cid))
    }

    fn neighbors(&self) -> BTreeMap<&NodeId, BTreeSet<&NodeId>> {
        let mut adj: BTreeMap<&NodeId, BTreeSet<&NodeId>> =
            self.nodes.keys().map(|k| (k, BTreeSet::new())).collect();
        for link in &self.links {
            adj.entry(&link.a).or_default().insert(&link.b);
            adj.entry(&link.b).or_default().insert(&link.a);
        }
        adj
    }

    /// Fills per-node next-hop tables for every site subnet: shortest path
    /// by hop count, ties broken by the lexicographically smallest next hop.
    pub fn compile_routes(&mut self) {
        let adj = self.neighbors();
        let mut routing: BTreeMap<NodeId, BTreeMap<Subnet, Route>> = self
            .nodes
            .keys()
            .map(|k| (k.clone(), BTreeMap::new()))
            .collect();

        for site in &self.sites {
            let subnet = site.subnet;
            let mut dist: BTreeMap<&NodeId, usize> = BTreeMap::new();
            let mut queue = VecDeque::new();
            for node in self.nodes.values() {
                if subnet.contains(node.address) {
                    dist.insert(&node.id, 0);
                    queue.push_back(&node.id);
                }
            }
            while let Some(u) = queue.pop_front() {
                let du = dist[u];
                for &v in &adj[u] {
                    if !dist.contains_key(v) {
                        dist.insert(v, du + 1);
                        queue.push_back(v);
                    }
                }
            }
            for (id, table) in routing.iter_mut() {
                let route = match dist.get(id) {
                    None => Route::Unreachable,
                    Some(0) => Route::Direct,
                    Some(&d) => adj[id]
                        .iter()
                        .find(|w| dist.get(**w) == Some(&(d - 1)))
                        .map(|w| Route::Via((*w).clone()))
                        .unwrap_or(Route::Unreachable),
                };
                table.insert(subnet, route);
            }
        }
        self.routing = routing;
    }

    /// Node path from the node owning `src` to the node owning `dst`.
    pub fn route_lookup(&self, src: Ipv4Address, dst: Ipv4Address) -> Result<Path, TopologyError> {
        let src_node = self
            .node_of(src)
            .ok_or(TopologyError::UnknownSource(src))?
            .clone();
        let dst_node = self
            .node_of(dst)
            .ok_or(TopologyError::Unreachable(dst))?
            .clone();
        if src_node == dst_node {
            return Ok(vec![src_node]);
        }
        let subnet = self
            .site_subnet_of(dst)
            .ok_or(TopologyError::Unreachable(dst))?;

        let mut path = vec![src_node.clone()];
        let mut cur = src_node;
        loop {
            match self.route(&cur, &subnet) {
                Some(Route::Direct) => break,
                Some(Route::Via(next)) => {
                    if path.len() > self.nodes.len() {
                        return Err(TopologyError::Unreachable(dst));
                    }
                    path.push(next.clone());
                    cur = next.clone();
                }
                _ => return Err(TopologyError::Unreachable(dst)),
            }
        }
        if cur != dst_node {
            let tail = self
                .on_subnet_path(&cur, &dst_node, subnet)
                .ok_or(TopologyError::Unreachable(dst))?;
            path.extend(tail);
        }
        Ok(path)
    }

    /// BFS restricted to nodes on `subnet`; returns the hops after `from`.
    fn on_subnet_path(&self, from: &NodeId, to: &NodeId, subnet: Subnet) -> Option<Vec<NodeId>> {
        let adj = self.neighbors();
        let on_subnet = |id: &NodeId| self.nodes.get(id).is_some_and(|n| subnet.contains(n.address));
        let mut parent: BTreeMap<&NodeId, &NodeId> = BTreeMap::new();
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            if u == to {
                let mut hops = vec![u.clone()];
                let mut cur = u;
                while let Some(&p) = parent.get(cur) {
                    if p == from {
                        break;
                    }
                    hops.push(p.clone());
                    cur = p;
                }
                hops.reverse();
                return Some(hops);
            }
            for &v in &adj[u] {
                if v != from && on_subnet(v) && !parent.contains_key(v) {
                    parent.insert(v, u);
                    queue.push_back(v);
                }
            }
        }
        None
    }

    pub(crate) fn register_container(&mut self, cid: ContainerId, host: NodeId) {
        self.placement.insert(cid, host);
    }

    /// Gives a container on `host` the lowest free address at or above `.10`
    /// in the host's site subnet, making it addressable as a leaf of the host.
    pub fn attach_bridge(
        &mut self,
        host: &NodeId,
        container: &ContainerId,
    ) -> Result<Interface, TopologyError> {
        let node = self
            .nodes
            .get(host)
            .ok_or_else(|| TopologyError::UnknownNode(host.to_string()))?;
        if node.kind != NodeKind::Host {
            return Err(TopologyError::NotAHost(host.to_string()));
        }
        if self.placement.get(container) != Some(host) {
            return Err(TopologyError::ContainerNotOnHost {
                container: container.clone(),
                host: host.clone(),
            });
        }
        if self.container_interface(container).is_some() {
            return Err(TopologyError::AlreadyBridged(container.clone()));
        }
        let subnet = self
            .site(&node.site)
            .map(|s| s.subnet)
            .ok_or_else(|| TopologyError::UnknownSite {
                node: host.to_string(),
                site: node.site.clone(),
            })?;
        let last = subnet.size().saturating_sub(2);
        let address = (u64::from(BRIDGE_FIRST_HOST)..=last)
            .filter_map(|n| subnet.host(n as u32))
            .find(|a| !self.by_address.contains_key(a))
            .ok_or(TopologyError::SubnetExhausted(subnet))?;
        let iface = Interface {
            owner: Owner::Container(container.clone()),
            address,
            subnet,
        };
        self.push_interface(iface.clone())?;
        Ok(iface)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::scenario::{parse_scenario, CANONICAL_SCENARIO};

    fn canonical() -> FederationTopology {
        build_topology(&parse_scenario(CANONICAL_SCENARIO).unwrap()).unwrap()
    }

    fn ip(s: &str) -> Ipv4Address {
        s.parse().unwrap()
    }

    fn names(path: &[NodeId]) -> Vec<&str> {
        path.iter().map(NodeId::as_str).collect()
    }

    #[test]
    fn address_text_round_trip() {
        let a = ip("172.16.0.10");
        assert_eq!(a.to_string(), "172.16.0.10");
        assert_eq!(a.octets(), [172, 16, 0, 10]);
        assert!("172.16.0.256".parse::<Ipv4Address>().is_err());
    }

    #[test]
    fn subnet_rejects_host_bits() {
        assert!("172.16.0.10/24".parse::<Subnet>().is_err());
        let net: Subnet = "172.16.0.0/24".parse().unwrap();
        assert!(net.contains(ip("172.16.0.10")));
        assert!(!net.contains(ip("172.16.1.3")));
        assert_eq!(net.to_string(), "172.16.0.0/24");
    }

    #[test]
    fn canonical_has_three_sites_and_gateways() {
        let topo = canonical();
        let sites: Vec<_> = topo.sites().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(sites, ["OLCF", "CADES", "SNS"]);
        for site in topo.sites() {
            assert_eq!(topo.node(site.gateway.as_str()).unwrap().kind, NodeKind::Router);
            assert!(site.subnet.contains(topo.node(site.gateway.as_str()).unwrap().address));
        }
        let wan = topo
            .links()
            .iter()
            .filter(|l| l.a.as_str().starts_with("gw-") && l.b.as_str().starts_with("gw-"))
            .count();
        assert_eq!(wan, 3);
    }

    #[test]
    fn empty_scenario_gives_empty_topology() {
        let topo = build_topology(&ScenarioSpec::default()).unwrap();
        assert!(topo.sites().is_empty());
        assert!(topo.routing().is_empty());
    }

    #[test]
    fn duplicate_address_is_rejected() {
        let text = "site CADES subnet=172.16.1.0/24\n\
                    router gw site=CADES ip=172.16.1.1\n\
                    host a site=CADES ip=172.16.1.3\n\
                    host b site=CADES ip=172.16.1.3\n";
        let err = build_topology(&parse_scenario(text).unwrap()).unwrap_err();
        assert_eq!(err, TopologyError::DuplicateAddress(ip("172.16.1.3")));
    }

    #[test]
    fn site_without_gateway_is_rejected() {
        let text = "site A subnet=10.0.0.0/24\nhost h site=A ip=10.0.0.5\n";
        let err = build_topology(&parse_scenario(text).unwrap()).unwrap_err();
        assert_eq!(err, TopologyError::SiteWithoutGateway("A".into()));
    }

    #[test]
    fn unknown_link_endpoint_is_rejected() {
        let mut spec = parse_scenario("site A subnet=10.0.0.0/24\nrouter gw site=A ip=10.0.0.1\n").unwrap();
        spec.decls.push(Decl::Link {
            a: "gw".into(),
            b: "ghost".into(),
            bandwidth: 1.0,
            latency: 0.0,
        });
        assert_eq!(
            build_topology(&spec).unwrap_err(),
            TopologyError::UnknownEndpoint("ghost".into())
        );
    }

    #[test]
    fn compiled_routes_on_canonical() {
        let topo = canonical();
        let olcf = topo.site("OLCF").unwrap().subnet;
        let cades = topo.site("CADES").unwrap().subnet;
        let user = NodeId::new("cades-user").unwrap();
        assert_eq!(
            topo.route(&user, &olcf),
            Some(&Route::Via(NodeId::new("gw-CADES").unwrap()))
        );
        assert_eq!(topo.route(&user, &cades), Some(&Route::Direct));
        let gw = NodeId::new("gw-CADES").unwrap();
        assert_eq!(
            topo.route(&gw, &olcf),
            Some(&Route::Via(NodeId::new("gw-OLCF").unwrap()))
        );
    }

    #[test]
    fn isolated_node_has_no_remote_routes() {
        let text = "site A subnet=10.0.0.0/24\nrouter gwa site=A ip=10.0.0.1\n\
                    site B subnet=10.0.1.0/24\nrouter gwb site=B ip=10.0.1.1\n\
                    host lonely site=B ip=10.0.1.2\n\
                    host h site=A ip=10.0.0.2\nlink h gwa bw=1 lat=0\n";
        let topo = build_topology(&parse_scenario(text).unwrap()).unwrap();
        let lonely = NodeId::new("lonely").unwrap();
        let a = topo.site("A").unwrap().subnet;
        assert_eq!(topo.route(&lonely, &a), Some(&Route::Unreachable));
        assert_eq!(
            topo.route_lookup(ip("10.0.0.2"), ip("10.0.1.2")),
            Err(TopologyError::Unreachable(ip("10.0.1.2")))
        );
    }

    #[test]
    fn route_lookup_examples() {
        let topo = canonical();
        let path = topo.route_lookup(ip("172.16.1.3"), ip("172.16.0.2")).unwrap();
        assert_eq!(names(&path), ["cades-user", "gw-CADES", "gw-OLCF", "olcf-h1"]);
        let path = topo.route_lookup(ip("172.16.1.3"), ip("172.16.1.1")).unwrap();
        assert_eq!(names(&path), ["cades-user", "gw-CADES"]);
        assert!(matches!(
            topo.route_lookup(ip("9.9.9.9"), ip("172.16.1.1")),
            Err(TopologyError::UnknownSource(_))
        ));
    }

    #[test]
    fn bridge_allocation_starts_at_ten() {
        let mut topo = canonical();
        let host = NodeId::new("olcf-h1").unwrap();
        let c1 = ContainerId::from_index(1);
        let c2 = ContainerId::from_index(2);
        topo.register_container(c1.clone(), host.clone());
        topo.register_container(c2.clone(), host.clone());
        assert_eq!(topo.attach_bridge(&host, &c1).unwrap().address, ip("172.16.0.10"));
        assert_eq!(topo.attach_bridge(&host, &c2).unwrap().address, ip("172.16.0.11"));
        let path = topo.route_lookup(ip("172.16.1.3"), ip("172.16.0.10")).unwrap();
        assert_eq!(names(&path), ["cades-user", "gw-CADES", "gw-OLCF", "olcf-h1"]);
    }

    #[test]
    fn bridge_errors() {
        let text = "site A subnet=10.0.0.0/28\nrouter gw site=A ip=10.0.0.1\n\
                    host h site=A ip=10.0.0.2\nhost other site=A ip=10.0.0.3\n";
        let mut topo = build_topology(&parse_scenario(text).unwrap()).unwrap();
        let h = NodeId::new("h").unwrap();
        let other = NodeId::new("other").unwrap();
        let stray = ContainerId::from_index(99);
        topo.register_container(stray.clone(), other);
        assert!(matches!(
            topo.attach_bridge(&h, &stray),
            Err(TopologyError::ContainerNotOnHost { .. })
        ));
        // /28 leaves .10 through .14 for containers.
        for k in 1..=5 {
            let c = ContainerId::from_index(k);
            topo.register_container(c.clone(), h.clone());
            topo.attach_bridge(&h, &c).unwrap();
        }
        let c = ContainerId::from_index(6);
        topo.register_container(c.clone(), h.clone());
        assert!(matches!(
            topo.attach_bridge(&h, &c),
            Err(TopologyError::SubnetExhausted(_))
        ));
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(canonical(), canonical());
    }
}
