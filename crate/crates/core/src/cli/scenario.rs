//! Scenario files: one declaration per line, `#` comments, blank lines
//! ignored.
//!
//! ```text
//! seed=<n>
//! site <name> subnet=<a.b.c.d/len>
//! router <name> site=<site> ip=<addr>
//! host <name> site=<site> ip=<addr>
//! link <a> <b> bw=<bytes/s> lat=<seconds>
//! wan <gwA> <gwB> bw=<bytes/s> lat=<seconds>
//! image <name>:<tag> host=<host> size=<bytes> service=<kind>:<port>
//! instrument <name> host=<host> phantom=disk:<n>:<radius>:<intensity> bins=<n_s>
//! workflow <id>
//!   task <name> kind=<kind> <fields...> [after=<a>,<b>]
//! end
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::containers::{ImageRef, ServiceKind};
use crate::engine::DEFAULT_SEED;
use crate::netsim::PortMap;
use crate::orchestrator::{TaskKind, TaskSpec, WorkflowSpec};
use crate::topology::{valid_name, Ipv4Address, Subnet};

pub const CANONICAL_SCENARIO: &str = include_str!("../../scenarios/canonical.scn");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}: `{text}`")]
pub struct ScenarioError {
    pub line: usize,
    pub text: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskSpec {
    pub n: usize,
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decl {
    Site {
        name: String,
        subnet: Subnet,
    },
    Router {
        name: String,
        site: String,
        ip: Ipv4Address,
    },
    Host {
        name: String,
        site: String,
        ip: Ipv4Address,
    },
    Link {
        a: String,
        b: String,
        bandwidth: f64,
        latency: f64,
    },
    Wan {
        a: String,
        b: String,
        bandwidth: f64,
        latency: f64,
    },
    Image {
        image: ImageRef,
        host: String,
        size: u64,
        service: ServiceKind,
        port: u16,
    },
    Instrument {
        name: String,
        host: String,
        phantom: DiskSpec,
        bins: usize,
    },
    Workflow(WorkflowSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub decls: Vec<Decl>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            decls: Vec::new(),
        }
    }
}

/// Positional words and `key=value` fields of one line.
struct Fields<'a> {
    words: Vec<&'a str>,
    pairs: BTreeMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn split(rest: &[&'a str]) -> Result<Self, String> {
        let mut words = Vec::new();
        let mut pairs = BTreeMap::new();
        for tok in rest {
            match tok.split_once('=') {
                Some((k, v)) => {
                    if pairs.insert(k, v).is_some() {
                        return Err(format!("field `{k}` given twice"));
                    }
                }
                None if pairs.is_empty() => words.push(*tok),
                None => return Err(format!("unexpected word `{tok}`")),
            }
        }
        Ok(Self { words, pairs })
    }

    fn expect(&self, positional: usize, keys: &[&str], optional: &[&str]) -> Result<(), String> {
        if self.words.len() != positional {
            return Err(format!("expected {positional} name(s), got {}", self.words.len()));
        }
        for k in keys {
            if !self.pairs.contains_key(k) {
                return Err(format!("missing field `{k}`"));
            }
        }
        for k in self.pairs.keys() {
            if !keys.contains(k) && !optional.contains(k) {
                return Err(format!("unknown field `{k}`"));
            }
        }
        Ok(())
    }

    fn name(&self, i: usize) -> Result<String, String> {
        let w = self.words[i];
        if valid_name(w) {
            Ok(w.to_string())
        } else {
            Err(format!("bad name `{w}`"))
        }
    }

    fn get(&self, key: &str) -> Option<&'a str> {
        self.pairs.get(key).copied()
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, String> {
        let v = self.pairs[key];
        v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
    }

    fn text(&self, key: &str) -> Result<String, String> {
        let v = self.pairs[key];
        if valid_name(v) {
            Ok(v.to_string())
        } else {
            Err(format!("bad name `{v}` for `{key}`"))
        }
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn parse_disk(v: &str) -> Result<DiskSpec, String> {
    let bad = || format!("bad phantom `{v}`");
    let parts: Vec<&str> = v.split(':').collect();
    let ["disk", n, r, i] = parts.as_slice() else {
        return Err(bad());
    };
    let spec = DiskSpec {
        n: n.parse().map_err(|_| bad())?,
        radius: r.parse().map_err(|_| bad())?,
        intensity: i.parse().map_err(|_| bad())?,
    };
    if spec.n == 0 || !(spec.radius > 0.0 && spec.radius <= 1.0) || !spec.intensity.is_finite() {
        return Err(bad());
    }
    Ok(spec)
}

fn parse_task(rest: &[&str]) -> Result<TaskSpec, String> {
    let f = Fields::split(rest)?;
    let kind = f.get("kind").ok_or("missing field `kind`")?;
    let (required, optional): (&[&str], &[&str]) = match kind {
        "acquire" => (&["instrument", "angles"], &[]),
        "ship" => (&["image", "from", "to"], &[]),
        "run" => (&["image", "host"], &["ports"]),
        "reconstruct" => (&["on", "input"], &["delay"]),
        "fetch" => (&["host", "url"], &["token"]),
        other => return Err(format!("unknown task kind `{other}`")),
    };
    let mut keys = vec!["kind"];
    keys.extend_from_slice(required);
    let mut opt = vec!["after"];
    opt.extend_from_slice(optional);
    f.expect(1, &keys, &opt)?;
    let kind = match kind {
        "acquire" => TaskKind::Acquire {
            instrument: f.text("instrument")?,
            angles: f.parse("angles")?,
        },
        "ship" => TaskKind::Ship {
            image: f.parse("image")?,
            from: f.text("from")?,
            to: f.text("to")?,
        },
        "run" => TaskKind::Run {
            image: f.parse("image")?,
            host: f.text("host")?,
            port_maps: match f.get("ports") {
                Some(v) => parse_list(v)
                    .iter()
                    .map(|p| p.parse::<PortMap>().map_err(|_| format!("bad port map `{p}`")))
                    .collect::<Result<_, _>>()?,
                None => Vec::new(),
            },
        },
        "reconstruct" => TaskKind::Reconstruct {
            on: f.text("on")?,
            input: f.text("input")?,
            delay: match f.get("delay") {
                Some(_) => {
                    let d: f64 = f.parse("delay")?;
                    if !(d.is_finite() && d >= 0.0) {
                        return Err(format!("bad delay `{d}`"));
                    }
                    d
                }
                None => 0.0,
            },
        },
        _ => TaskKind::Fetch {
            host: f.text("host")?,
            url: f.get("url").expect("required").to_string(),
            token: f.get("token").map(str::to_string),
        },
    };
    Ok(TaskSpec {
        name: f.name(0)?,
        kind,
        depends_on: f.get("after").map(parse_list).unwrap_or_default(),
    })
}

fn link_fields(f: &Fields) -> Result<(String, String, f64, f64), String> {
    f.expect(2, &["bw", "lat"], &[])?;
    let bandwidth: f64 = f.parse("bw")?;
    let latency: f64 = f.parse("lat")?;
    Ok((f.name(0)?, f.name(1)?, bandwidth, latency))
}

#[derive(Default)]
struct Names {
    sites: BTreeSet<String>,
    nodes: BTreeSet<String>,
    instruments: BTreeSet<String>,
    workflows: BTreeSet<String>,
}

fn unique(set: &mut BTreeSet<String>, what: &str, name: &str) -> Result<(), String> {
    if set.insert(name.to_string()) {
        Ok(())
    } else {
        Err(format!("duplicate {what} `{name}`"))
    }
}

fn parse_decl(head: &str, rest: &[&str], names: &mut Names) -> Result<Decl, String> {
    let f = Fields::split(rest)?;
    let decl = match head {
        "site" => {
            f.expect(1, &["subnet"], &[])?;
            let name = f.name(0)?;
            unique(&mut names.sites, "site", &name)?;
            Decl::Site {
                name,
                subnet: f.parse("subnet")?,
            }
        }
        "router" | "host" => {
            f.expect(1, &["site", "ip"], &[])?;
            let name = f.name(0)?;
            let site = f.text("site")?;
            if !names.sites.contains(&site) {
                return Err(format!("unknown site `{site}`"));
            }
            unique(&mut names.nodes, "node", &name)?;
            let ip = f.parse("ip")?;
            if head == "router" {
                Decl::Router { name, site, ip }
            } else {
                Decl::Host { name, site, ip }
            }
        }
        "link" => {
            let (a, b, bandwidth, latency) = link_fields(&f)?;
            Decl::Link {
                a,
                b,
                bandwidth,
                latency,
            }
        }
        "wan" => {
            let (a, b, bandwidth, latency) = link_fields(&f)?;
            Decl::Wan {
                a,
                b,
                bandwidth,
                latency,
            }
        }
        "image" => {
            f.expect(1, &["host", "size", "service"], &[])?;
            let image: ImageRef = f.words[0].parse().map_err(|e| format!("{e}"))?;
            let service = f.get("service").expect("required");
            let (kind, port) = match service.split_once(':') {
                Some((k, p)) => (k, p.parse::<u16>().map_err(|_| format!("bad port in `{service}`"))?),
                None => (service, 0),
            };
            let service: ServiceKind = kind.parse().map_err(|e| format!("{e}"))?;
            if service != ServiceKind::None && port == 0 {
                return Err(format!("service `{kind}` needs a port"));
            }
            Decl::Image {
                image,
                host: f.text("host")?,
                size: f.parse("size")?,
                service,
                port,
            }
        }
        "instrument" => {
            f.expect(1, &["host", "phantom", "bins"], &[])?;
            let name = f.name(0)?;
            unique(&mut names.instruments, "instrument", &name)?;
            Decl::Instrument {
                name,
                host: f.text("host")?,
                phantom: parse_disk(f.get("phantom").expect("required"))?,
                bins: f.parse("bins")?,
            }
        }
        other => return Err(format!("unknown stanza `{other}`")),
    };
    Ok(decl)
}

pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    let mut spec = ScenarioSpec::default();
    let mut names = Names::default();
    let mut open: Option<(usize, WorkflowSpec, BTreeSet<String>)> = None;
    let mut seed_seen = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| ScenarioError {
            line,
            text: raw.to_string(),
            message,
        };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();

        if let Some((_, wf, tasks)) = open.as_mut() {
            match tokens[0] {
                "task" => {
                    let task = parse_task(&tokens[1..]).map_err(err)?;
                    unique(tasks, "task", &task.name).map_err(err)?;
                    wf.tasks.push(task);
                }
                "end" if tokens.len() == 1 => {
                    let (_, wf, _) = open.take().expect("open");
                    spec.decls.push(Decl::Workflow(wf));
                }
                _ => return Err(err("expected `task` or `end` inside workflow".into())),
            }
            continue;
        }

        if let Some(v) = content.strip_prefix("seed=") {
            if seed_seen {
                return Err(err("duplicate seed".into()));
            }
            spec.seed = v.trim().parse().map_err(|_| err(format!("bad seed `{v}`")))?;
            seed_seen = true;
            continue;
        }
        match tokens[0] {
            "workflow" => {
                if tokens.len() != 2 || !valid_name(tokens[1]) {
                    return Err(err("expected `workflow <id>`".into()));
                }
                unique(&mut names.workflows, "workflow", tokens[1]).map_err(err)?;
                open = Some((
                    line,
                    WorkflowSpec {
                        id: tokens[1].to_string(),
                        tasks: Vec::new(),
                    },
                    BTreeSet::new(),
                ));
            }
            "task" | "end" => return Err(err(format!("`{}` outside a workflow", tokens[0]))),
            head => spec.decls.push(parse_decl(head, &tokens[1..], &mut names).map_err(err)?),
        }
    }
    if let Some((line, wf, _)) = open {
        return Err(ScenarioError {
            line,
            text: format!("workflow {}", wf.id),
            message: "workflow without `end`".into(),
        });
    }
    Ok(spec)
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task {} kind={}", self.name, self.kind.as_str())?;
        match &self.kind {
            TaskKind::Acquire { instrument, angles } => write!(f, " instrument={instrument} angles={angles}")?,
            TaskKind::Ship { image, from, to } => write!(f, " image={image} from={from} to={to}")?,
            TaskKind::Run {
                image,
                host,
                port_maps,
            } => {
                write!(f, " image={image} host={host}")?;
                if !port_maps.is_empty() {
                    let maps: Vec<String> = port_maps.iter().map(PortMap::to_string).collect();
                    write!(f, " ports={}", maps.join(","))?;
                }
            }
            TaskKind::Reconstruct { on, input, delay } => {
                write!(f, " on={on} input={input}")?;
                if *delay != 0.0 {
                    write!(f, " delay={delay}")?;
                }
            }
            TaskKind::Fetch { host, url, token } => {
                write!(f, " host={host} url={url}")?;
                if let Some(t) = token {
                    write!(f, " token={t}")?;
                }
            }
        }
        if !self.depends_on.is_empty() {
            write!(f, " after={}", self.depends_on.join(","))?;
        }
        Ok(())
    }
}

impl fmt::Display for Decl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decl::Site { name, subnet } => write!(f, "site {name} subnet={subnet}"),
            Decl::Router { name, site, ip } => write!(f, "router {name} site={site} ip={ip}"),
            Decl::Host { name, site, ip } => write!(f, "host {name} site={site} ip={ip}"),
            Decl::Link {
                a,
                b,
                bandwidth,
                latency,
            } => write!(f, "link {a} {b} bw={bandwidth} lat={latency}"),
            Decl::Wan {
                a,
                b,
                bandwidth,
                latency,
            } => write!(f, "wan {a} {b} bw={bandwidth} lat={latency}"),
            Decl::Image {
                image,
                host,
                size,
                service,
                port,
            } => {
                write!(f, "image {image} host={host} size={size} service={service}")?;
                if *service != ServiceKind::None || *port != 0 {
                    write!(f, ":{port}")?;
                }
                Ok(())
            }
            Decl::Instrument {
                name,
                host,
                phantom,
                bins,
            } => write!(
                f,
                "instrument {name} host={host} phantom=disk:{}:{}:{} bins={bins}",
                phantom.n, phantom.radius, phantom.intensity
            ),
            Decl::Workflow(wf) => {
                writeln!(f, "workflow {}", wf.id)?;
                for t in &wf.tasks {
                    writeln!(f, "  {t}")?;
                }
                f.write_str("end")
            }
        }
    }
}

impl ScenarioSpec {
    pub fn render(&self) -> String {
        let mut out = format!("seed={}\n", self.seed);
        for d in &self.decls {
            out.push_str(&d.to_string());
            out.push('\n');
        }
        out
    }

    /// Replaces the latency of the link or wan joining `a` and `b`.
    pub fn set_latency(&mut self, a: &str, b: &str, value: f64) -> bool {
        for d in &mut self.decls {
            if let Decl::Link {
                a: x, b: y, latency, ..
            }
            | Decl::Wan {
                a: x, b: y, latency, ..
            } = d
            {
                if (x == a && y == b) || (x == b && y == a) {
                    *latency = value;
                    return true;
                }
            }
        }
        false
    }
}
