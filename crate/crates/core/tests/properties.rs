mod common;

use std::collections::BTreeSet;

use fedemu::cli::scenario::parse_scenario;
use fedemu::cli::Session;
use fedemu::containers::{image_load, image_save, ContainerError, ContainerImage, ImageRef, ServiceKind};
use fedemu::instrument::InstrumentModel;
use fedemu::netsim::{transfer_time, BindTarget, Endpoint, Outcome, PortMap, Service};
use fedemu::orchestrator::{Phase, TaskKind};
use fedemu::protocols::{
    parse_epics_request, parse_epics_response, parse_http_request, parse_http_response, render_epics_response,
    render_http_response, EpicsRequest, EpicsResponse, EpicsVerb, HttpRequest, HttpResponse, PvValue,
};
use fedemu::tomo::{
    fbp_with, make_disk_phantom, radon, radon_with, ramlak_kernel, scan_angles, Execution, Phantom, Raster,
    ReconParams,
};
use fedemu::topology::{build_topology, Ipv4Address, NodeId};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{canonical_engine, check_paths, random_workflow, task_transitions, tree_scenario};

const PV: &str = "[A-Za-z0-9:._-]{1,24}";
const NAME: &str = "[A-Za-z0-9_.-]{1,12}";

fn pv_value() -> impl Strategy<Value = PvValue> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(PvValue::F64),
        any::<i64>().prop_map(PvValue::I64),
        "[^\r\n]{0,40}".prop_map(PvValue::Str),
        PV.prop_map(PvValue::Enum),
    ]
}

fn timestamp() -> impl Strategy<Value = f64> {
    (0u64..1_000_000_000_000_000).prop_map(|ns| ns as f64 / 1e9)
}

fn epics_request() -> impl Strategy<Value = EpicsRequest> {
    prop_oneof![
        PV.prop_map(|p| EpicsRequest::get(&p)),
        (PV, "[^\r\n]{1,40}").prop_map(|(p, v)| EpicsRequest::put(&p, &v)),
        PV.prop_map(|p| EpicsRequest::mon(&p)),
        PV.prop_map(|p| EpicsRequest::stop(&p)),
    ]
}

fn epics_response() -> impl Strategy<Value = EpicsResponse> {
    prop_oneof![
        (PV, pv_value(), timestamp()).prop_map(|(pv_name, value, timestamp)| EpicsResponse::Ok {
            pv_name,
            value,
            timestamp
        }),
        (PV, pv_value(), timestamp()).prop_map(|(pv_name, value, timestamp)| EpicsResponse::Evt {
            pv_name,
            value,
            timestamp
        }),
        (any::<u16>(), "[^\r\n]{0,30}").prop_map(|(c, m)| EpicsResponse::err(c, m)),
    ]
}

fn http_request() -> impl Strategy<Value = HttpRequest> {
    (
        "/[A-Za-z0-9._~/-]{0,20}",
        prop::collection::btree_map(NAME, "[A-Za-z0-9_.-]{0,16}", 0..4),
        prop::collection::vec((NAME, "[!-~][ -~]{0,20}"), 0..3),
    )
        .prop_map(|(path, query, headers)| {
            let mut req = HttpRequest::get(&path);
            req.query = query.into_iter().collect();
            req.headers = headers;
            req
        })
}

fn image() -> impl Strategy<Value = ContainerImage> {
    (
        NAME,
        "[A-Za-z0-9_.-]{1,6}",
        prop::collection::vec(any::<u8>(), 0..300),
        prop_oneof![Just(ServiceKind::Notebook), Just(ServiceKind::Epics), Just(ServiceKind::None)],
        1u16..,
        0u64..1_000_000_000,
    )
        .prop_map(|(name, tag, payload, kind, port, extra)| {
            let port = if kind == ServiceKind::None { 0 } else { port };
            let size = payload.len() as u64 + extra;
            ContainerImage::new(ImageRef::new(&name, &tag).unwrap(), size, kind, port, payload).unwrap()
        })
}

fn radial_phantom(n: usize, width: f64) -> Phantom {
    let c = |i: usize| -1.0 + (i as f64 + 0.5) * 2.0 / n as f64;
    let values = (0..n * n)
        .map(|k| {
            let (x, y) = (c(k % n), c(k / n));
            (-(x * x + y * y) / (width * width)).exp()
        })
        .collect();
    Phantom::from_values(n, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn address_text_round_trip(v in any::<u32>()) {
        let a = Ipv4Address::from_u32(v);
        prop_assert_eq!(a.to_string().parse::<Ipv4Address>().unwrap(), a);
    }

    #[test]
    fn epics_request_round_trip(req in epics_request()) {
        prop_assert_eq!(parse_epics_request(&req.render()).unwrap(), req);
    }

    #[test]
    fn epics_response_round_trip(resp in epics_response()) {
        prop_assert_eq!(parse_epics_response(&render_epics_response(&resp)).unwrap(), resp);
    }

    #[test]
    fn http_round_trip(req in http_request(), code in 100u16..1000, body in prop::collection::vec(any::<u8>(), 0..200)) {
        prop_assert_eq!(parse_http_request(&req.render()).unwrap(), req);
        let resp = HttpResponse::new(code, body);
        prop_assert_eq!(resp.content_length(), resp.body.len());
        prop_assert_eq!(parse_http_response(&render_http_response(&resp)).unwrap(), resp);
    }

    #[test]
    fn parsers_are_total(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_epics_request(&text);
        let _ = parse_epics_response(&text);
        let _ = parse_http_request(&bytes);
        let _ = parse_http_response(&bytes);
        let _ = image_load(&bytes);
        let _ = parse_scenario(&text);
    }

    #[test]
    fn archive_round_trip(img in image()) {
        prop_assert_eq!(image_load(&image_save(&img).bytes).unwrap(), img);
    }

    #[test]
    fn any_tampered_byte_is_rejected(img in image(), pos in any::<prop::sample::Index>(), flip in 1u8..) {
        let mut bytes = image_save(&img).bytes;
        let len = bytes.len();
        let at = pos.index(len);
        bytes[at] ^= flip;
        let result = image_load(&bytes);
        prop_assert!(result.is_err());
        if (5..len - 26).contains(&at) {
            let is_digest_mismatch = matches!(result, Err(ContainerError::DigestMismatch { .. }));
            prop_assert!(is_digest_mismatch);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tree_topologies_are_sound(seed in any::<u64>()) {
        let text = tree_scenario(&mut ChaCha8Rng::seed_from_u64(seed));
        let spec = parse_scenario(&text).unwrap();
        prop_assert_eq!(parse_scenario(&spec.render()).unwrap(), spec.clone());
        let topo = build_topology(&spec).unwrap();
        prop_assert_eq!(&build_topology(&spec).unwrap(), &topo);

        let addrs: Vec<Ipv4Address> = topo.interfaces().iter().map(|i| i.address).collect();
        prop_assert_eq!(addrs.iter().collect::<BTreeSet<_>>().len(), addrs.len());

        let nodes: Vec<_> = topo.nodes().cloned().collect();
        for a in &nodes {
            for b in &nodes {
                let fwd = topo.route_lookup(a.address, b.address).unwrap();
                for hop in fwd.windows(2) {
                    prop_assert!(topo.link_between(&hop[0], &hop[1]).is_some());
                }
                let mut back = topo.route_lookup(b.address, a.address).unwrap();
                back.reverse();
                prop_assert_eq!(fwd, back);
            }
        }
    }

    #[test]
    fn transfer_time_is_additive(split in 1usize..3, size in 0u64..10_000_000_000) {
        let e = canonical_engine();
        let topo = e.topology();
        let path = topo.route_lookup("172.16.1.3".parse().unwrap(), "172.16.2.2".parse().unwrap()).unwrap();
        let whole = transfer_time(&path, size, topo).unwrap();
        let parts = transfer_time(&path[..=split], size, topo).unwrap() + transfer_time(&path[split..], size, topo).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-12 * whole.max(1.0));
    }

    #[test]
    fn every_message_terminates_once(targets in prop::collection::vec((0usize..6, 0usize..3, 0u64..5_000_000), 1..20)) {
        let mut e = canonical_engine();
        let addrs = ["172.16.0.2", "172.16.1.2", "172.16.1.3", "172.16.2.2", "172.16.0.99", "10.0.0.1"];
        let ports = [7, 8, 9];
        e.bind_service(BindTarget::Node(NodeId::new("olcf-h1").unwrap()), 7, Service::Echo { delay: 0.25 }).unwrap();
        e.bind_service(BindTarget::Node(NodeId::new("sns-epics").unwrap()), 8, Service::Echo { delay: 0.0 }).unwrap();
        let mut ids = Vec::new();
        for (a, p, size) in &targets {
            let dst = Endpoint::new(addrs[*a].parse().unwrap(), ports[*p]).unwrap();
            ids.push(e.request_response("cades-user", dst, b"ping".to_vec(), *size).unwrap());
        }
        e.drain();
        prop_assert_eq!(e.pending_events(), 0);
        for id in &ids {
            prop_assert!(e.completion(*id).is_some());
            let finishes = e.log().iter().filter(|r| r.detail.starts_with(&format!("{id} ")) && ["response", "refused", "unreachable"].contains(&r.kind.as_str())).count();
            prop_assert_eq!(finishes, 1, "{}", id);
        }
        for pair in e.log().windows(2) {
            prop_assert!(pair[0].time <= pair[1].time);
            if pair[0].time == pair[1].time {
                prop_assert!(pair[0].seq < pair[1].seq);
            }
        }
    }

    #[test]
    fn port_map_reaches_same_handler(host_port in 1024u16..60000, good in any::<bool>()) {
        let mut e = canonical_engine();
        let image: ImageRef = "imars3d:1.0".parse().unwrap();
        let id = e.run_container("cades-fedsci", &image, &[PortMap::new(8888, host_port).unwrap()]).unwrap();
        let inst = e.instance(&id).unwrap().clone();
        let token = if good { inst.token.clone() } else { "nope".to_string() };
        let bridged = inst.bridged.unwrap().address;
        let a = e.fetch_service("cades-user", &format!("http://{bridged}:8888/"), Some(&token)).unwrap();
        let b = e.fetch_service("olcf-h1", &format!("http://172.16.1.2:{host_port}/"), Some(&token)).unwrap();
        prop_assert_eq!(a.status_code, if good { 200 } else { 403 });
        prop_assert_eq!(a, b);
    }

    #[test]
    fn monitors_get_one_event_per_accepted_put(
        subscribers in prop::collection::vec((0u8..4, 1u16..5), 0..10),
        stops in prop::collection::vec((0u8..4, 1u16..5), 0..4),
        puts in prop::collection::vec((0usize..4, -720.0f64..720.0), 1..12),
    ) {
        let mut m = InstrumentModel::new("BL", make_disk_phantom(8, 0.5, 1.0).unwrap(), 5).unwrap();
        let ep = |(a, p): (u8, u16)| Endpoint::new(Ipv4Address::from_u32(0x0a00_0000 + a as u32), p).unwrap();
        let angle = m.angle_pv();
        for s in &subscribers {
            m.handle_pv_request(&EpicsRequest::mon(&angle), 0.0, ep(*s));
        }
        for s in &stops {
            m.handle_pv_request(&EpicsRequest::stop(&angle), 0.0, ep(*s));
        }
        let expected: BTreeSet<Endpoint> = subscribers.iter().filter(|s| !stops.contains(s)).map(|s| ep(*s)).collect();
        let mut frames = 0;
        for (i, (which, deg)) in puts.iter().enumerate() {
            let now = i as f64;
            let (pv, value) = match which {
                0 => (angle.clone(), format!("{deg}")),
                1 => (m.acquire_pv(), format!("{}", (*deg as i64).rem_euclid(2))),
                2 => (m.frame_count_pv(), "7".to_string()),
                _ => (angle.clone(), "north".to_string()),
            };
            let before = m.frames().len();
            let reply = m.handle_pv_request(&EpicsRequest::put(&pv, &value), now, ep((9, 9)));
            let accepted = matches!(reply.response, EpicsResponse::Ok { .. });
            if accepted && pv == angle {
                let got: BTreeSet<Endpoint> = reply.events.iter().map(|(to, _)| *to).collect();
                prop_assert_eq!(reply.events.len(), expected.len());
                prop_assert_eq!(got, expected.clone());
                prop_assert!((0.0..360.0).contains(&m.angle()));
            } else {
                prop_assert!(reply.events.is_empty());
            }
            if accepted && pv == m.acquire_pv() && value == "1" {
                frames += 1;
            }
            prop_assert!(m.frames().len() - before <= 1);
            let count = m.handle_pv_request(&EpicsRequest::get(&m.frame_count_pv()), now, ep((9, 9)));
            let EpicsResponse::Ok { value: PvValue::I64(n), .. } = count.response else { panic!("frame count unreadable") };
            prop_assert_eq!(n as usize, m.frames().len());
            prop_assert_eq!(n as usize, frames);
        }
        let tally = m.handle_pv_request(&EpicsRequest { verb: EpicsVerb::Get, pv_name: m.frame_count_pv(), value: None }, 0.0, ep((9, 9)));
        let readable = matches!(tally.response, EpicsResponse::Ok { .. });
        prop_assert!(readable);
    }

    #[test]
    fn scans_are_repeatable(n in 1usize..12) {
        let mut a = InstrumentModel::new("BL", radial_phantom(16, 0.3), 23).unwrap();
        let mut b = a.clone();
        let sa = a.run_scan(n, 1.0).unwrap();
        let sb = b.run_scan(n, 1.0).unwrap();
        prop_assert_eq!(sa.data, sb.data);
    }

    #[test]
    fn frame_mass_matches_phantom(width in 0.15f64..0.35, deg in 0.0f64..360.0) {
        let mut m = InstrumentModel::new("BL", radial_phantom(32, width), 47).unwrap();
        let put = m.handle_pv_request(&EpicsRequest::put(&m.angle_pv(), &format!("{deg}")), 0.0, Endpoint::new(Ipv4Address::from_u32(1), 1).unwrap());
        let accepted = matches!(put.response, EpicsResponse::Ok { .. });
        prop_assert!(accepted);
        let frame = m.acquire_frame(0.0);
        let ds = 2.0 / 47.0;
        let mass = m.phantom().mass();
        let got: f64 = frame.bins.iter().sum::<f64>() * ds;
        prop_assert!((got - mass).abs() <= 1e-2 * mass, "{} vs {}", got, mass);
    }

    #[test]
    fn radial_phantoms_project_the_same_at_every_angle(width in 0.3f64..0.5, n_angles in 2usize..24) {
        let phantom = radial_phantom(32, width);
        let sino = radon(&phantom, &scan_angles(n_angles), 47, 1.0 / 32.0).unwrap();
        let peak = sino.row(0).iter().fold(0.0f64, |m, v| m.max(*v));
        for k in 1..n_angles {
            for (x, y) in sino.row(k).iter().zip(sino.row(0)) {
                prop_assert!((x - y).abs() <= 1e-2 * peak);
            }
        }
    }

    #[test]
    fn execution_modes_agree(seed in any::<u64>(), n_angles in 1usize..10) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phantom = Phantom::from_values(12, (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let angles = scan_angles(n_angles);
        let params = ReconParams::new(12, n_angles, 17).unwrap();
        let seq = radon_with(&phantom, &angles, 17, 1.0 / 12.0, Execution::Sequential).unwrap();
        let dflt = radon_with(&phantom, &angles, 17, 1.0 / 12.0, Execution::default()).unwrap();
        prop_assert_eq!(&seq.data, &dflt.data);
        let r_seq = fbp_with(&seq, &params, Execution::Sequential).unwrap();
        let r_dflt = fbp_with(&seq, &params, Execution::default()).unwrap();
        prop_assert_eq!(r_seq.values(), r_dflt.values());
    }

    #[test]
    fn ramlak_kernel_is_even(half in 0usize..200, ds in 1e-3f64..1.0) {
        let h = ramlak_kernel(half, ds);
        prop_assert_eq!(h.len(), 2 * half + 1);
        for k in 0..=half {
            prop_assert_eq!(h[half + k].to_bits(), h[half - k].to_bits());
        }
    }

    #[test]
    fn workflows_replay_identically(seed in any::<u64>(), fault in any::<bool>()) {
        let spec = random_workflow(&mut ChaCha8Rng::seed_from_u64(seed), 0);
        let run = || {
            let mut e = canonical_engine();
            if fault {
                e.inject_transit_fault(&"imars3d:1.0".parse().unwrap());
            }
            let h = e.submit_workflow(&spec).unwrap();
            e.drain();
            let status = e.workflow_status(h).unwrap();
            (e, status)
        };
        let (e1, s1) = run();
        let (e2, s2) = run();
        prop_assert_eq!(s1.render(), s2.render());
        prop_assert_eq!(e1.event_log_digest(), e2.event_log_digest());
        prop_assert!(check_paths(&task_transitions(&e1)).is_ok());

        for t in &spec.tasks {
            let TaskKind::Run { .. } = t.kind else { continue };
            let st = s1.task(&t.name).unwrap();
            let Some(start) = st.started_at else { continue };
            for d in &t.depends_on {
                let dep = s1.task(d).unwrap();
                if matches!(spec.tasks.iter().find(|x| &x.name == d).unwrap().kind, TaskKind::Ship { .. }) {
                    prop_assert_eq!(&dep.phase, &Phase::Completed);
                    prop_assert!(start >= dep.finished_at.unwrap());
                }
            }
        }
        for rec in &s1.endpoints {
            let inst = e1.instances().iter().find(|i| i.token == rec.token).unwrap();
            prop_assert_eq!(inst.bridged.as_ref().unwrap().address, rec.endpoint.address);
        }
    }

    #[test]
    fn cli_errors_quote_the_command(word in "[a-z]{3,8}", arg in "[A-Za-z0-9:._-]{1,10}") {
        let mut s = Session::with_engine(canonical_engine());
        for line in [format!("{word}x {arg}"), format!("pvget nowhere {arg}"), format!("until -{arg}")] {
            let err = s.exec_line(&line).unwrap_err();
            prop_assert!(err.to_string().contains(&line), "{}", err);
        }
    }
}

#[test]
fn unreachable_fetch_is_reported() {
    let mut e = canonical_engine();
    let out = e.fetch_service("cades-user", "http://10.9.9.9:80/", None);
    assert!(out.is_err());
    let id = e
        .request_response("cades-user", Endpoint::new("10.9.9.9".parse().unwrap(), 80).unwrap(), vec![], 0)
        .unwrap();
    e.drain();
    assert_eq!(e.completion(id).unwrap().outcome, Outcome::Unreachable);
}
