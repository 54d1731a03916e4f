#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use fedemu::cli::scenario::{parse_scenario, CANONICAL_SCENARIO};
use fedemu::containers::ImageRef;
use fedemu::netsim::PortMap;
use fedemu::orchestrator::{Phase, TaskKind, TaskSpec, WorkflowSpec};
use fedemu::Engine;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Values frozen from a numpy implementation of the same geometry
/// (64x64 disk r=0.5, 95 bins, line step 1/64), computed before the build.
pub mod frozen {
    pub const CHORD_S0: f64 = 1.0;
    pub const CHORD_S04: f64 = 0.6062500000000002;
    pub const CHORD_S0_AT_17_DEG: f64 = 0.979937603429432;
    pub const RMSE_INTERIOR_90: f64 = 0.005536661921548704;
    pub const RMSE_INTERIOR_10: f64 = 0.07773645725317;
    pub const RECON_CENTER_90: f64 = 0.9980977249274167;
    /// scikit-image `iradon` (ramp filter) on the analytic disk sinogram.
    pub const SKIMAGE_RMSE_INTERIOR: f64 = 0.00604;
    /// Independent Python FNV-1a 64.
    pub const FNV: [(&[u8], u64); 4] = [
        (b"", 0xcbf29ce484222325),
        (b"imars3d:1.0", 0x3f873c16ca91068d),
        (b"http://172.16.0.10:8888", 0x3aa1f0dde7e2c0bd),
        (b"FSA1\nname=imars3d\n", 0xfc1a5b8f2e34ae35),
    ];
}

pub fn canonical_engine() -> Engine {
    Engine::from_scenario(&parse_scenario(CANONICAL_SCENARIO).unwrap()).unwrap()
}

/// FBP computed through an FFT: each row is zero-padded, multiplied by the
/// transform of the Ram-Lak kernel, and backprojected with linear
/// interpolation. `rows[k]` is the projection at angle `angles[k]`.
pub fn fft_fbp(rows: &[Vec<f64>], angles: &[f64], n: usize) -> Vec<f64> {
    let n_s = rows[0].len();
    let ds = 2.0 / n_s as f64;
    let size = (2 * n_s).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);

    let mut kernel = vec![Complex::new(0.0, 0.0); size];
    for (i, slot) in kernel.iter_mut().enumerate() {
        let k = if i <= size / 2 { i as i64 } else { i as i64 - size as i64 };
        let v = if k == 0 {
            1.0 / (4.0 * ds * ds)
        } else if k % 2 != 0 {
            -1.0 / (PI * PI * (k * k) as f64 * ds * ds)
        } else {
            0.0
        };
        *slot = Complex::new(v, 0.0);
    }
    fwd.process(&mut kernel);

    let px = 2.0 / n as f64;
    let centers: Vec<f64> = (0..n).map(|i| -1.0 + (i as f64 + 0.5) * px).collect();
    let mut image = vec![0.0; n * n];
    for (row, &theta) in rows.iter().zip(angles) {
        let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        fwd.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&kernel) {
            *b *= *k;
        }
        inv.process(&mut buf);
        let filtered: Vec<f64> = buf[..n_s].iter().map(|c| c.re / size as f64 * ds).collect();
        let (c, s) = (theta.cos(), theta.sin());
        for (iy, &y) in centers.iter().enumerate() {
            for (ix, &x) in centers.iter().enumerate() {
                let pos = (x * c + y * s + 1.0) / ds - 0.5;
                let i0 = pos.floor();
                let w = pos - i0;
                let at = |i: f64| {
                    if i >= 0.0 && (i as usize) < n_s {
                        filtered[i as usize]
                    } else {
                        0.0
                    }
                };
                image[iy * n + ix] += (1.0 - w) * at(i0) + w * at(i0 + 1.0);
            }
        }
    }
    let scale = PI / angles.len() as f64;
    image.iter_mut().for_each(|v| *v *= scale);
    image
}

/// Transitions recorded in the event log, per task name, in order.
pub fn task_transitions(engine: &Engine) -> BTreeMap<String, Vec<(Phase, Phase)>> {
    let mut out: BTreeMap<String, Vec<(Phase, Phase)>> = BTreeMap::new();
    for rec in engine.log().iter().filter(|r| r.kind == "task") {
        let (name, edge) = rec.detail.split_once(' ').expect("name and edge");
        let (from, to) = edge.split_once("->").expect("edge");
        let from = Phase::parse(from).expect("known phase");
        let to = Phase::parse(to).expect("known phase");
        out.entry(name.to_string()).or_default().push((from, to));
    }
    out
}

/// Checks that each task's transitions chain from `Pending` along legal edges.
pub fn check_paths(transitions: &BTreeMap<String, Vec<(Phase, Phase)>>) -> Result<(), String> {
    for (task, edges) in transitions {
        let mut at = Phase::Pending;
        for (from, to) in edges {
            if *from != at {
                return Err(format!("{task}: recorded {from} while in {at}"));
            }
            if !from.can_move_to(to) {
                return Err(format!("{task}: illegal {from}->{to}"));
            }
            at = to.clone();
        }
    }
    Ok(())
}

/// Random multi-site tree: a WAN tree over gateways and a star per site, so
/// every shortest path is unique.
pub fn tree_scenario(rng: &mut ChaCha8Rng) -> String {
    let sites = rng.gen_range(2..=6);
    let mut text = String::new();
    for s in 0..sites {
        text.push_str(&format!("site S{s} subnet=10.{s}.0.0/24\n"));
        text.push_str(&format!("router gw{s} site=S{s} ip=10.{s}.0.1\n"));
    }
    for s in 0..sites {
        for h in 0..rng.gen_range(1..=4) {
            text.push_str(&format!("host h{s}x{h} site=S{s} ip=10.{s}.0.{}\n", h + 2));
            let bw = rng.gen_range(1_000_000..1_000_000_000);
            let lat: f64 = rng.gen_range(0.0001..0.01);
            text.push_str(&format!("link h{s}x{h} gw{s} bw={bw} lat={lat}\n"));
        }
        if s > 0 {
            let parent = rng.gen_range(0..s);
            let lat: f64 = rng.gen_range(0.001..0.05);
            text.push_str(&format!("wan gw{parent} gw{s} bw=125000000 lat={lat}\n"));
        }
    }
    text
}

/// Random DAG over the canonical federation. Tasks only depend on earlier
/// tasks, so the graph is acyclic by construction.
pub fn random_workflow(rng: &mut ChaCha8Rng, id: usize) -> WorkflowSpec {
    let image: ImageRef = "imars3d:1.0".parse().unwrap();
    let hosts = ["olcf-h1", "cades-user", "sns-epics"];
    let n = rng.gen_range(1..=8);
    let mut tasks: Vec<TaskSpec> = Vec::new();
    for i in 0..n {
        let runs: Vec<&TaskSpec> = tasks.iter().filter(|t| matches!(t.kind, TaskKind::Run { .. })).collect();
        let acquires: Vec<&TaskSpec> = tasks.iter().filter(|t| matches!(t.kind, TaskKind::Acquire { .. })).collect();
        let mut deps: Vec<String> = tasks.iter().filter(|_| rng.gen_bool(0.3)).map(|t| t.name.clone()).collect();
        let kind = match rng.gen_range(0..5) {
            0 => TaskKind::Acquire { instrument: "BL3".into(), angles: rng.gen_range(1..=8) },
            1 | 2 => TaskKind::Ship { image: image.clone(), from: "cades-fedsci".into(), to: hosts.choose(rng).unwrap().to_string() },
            3 => {
                let ships: Vec<&TaskSpec> = tasks.iter().filter(|t| matches!(t.kind, TaskKind::Ship { .. })).collect();
                let Some(ship) = ships.choose(rng) else {
                    continue;
                };
                let TaskKind::Ship { to, .. } = &ship.kind else { unreachable!() };
                if rng.gen_bool(0.8) {
                    deps.push(ship.name.clone());
                }
                let port = rng.gen_range(8000..8003);
                TaskKind::Run { image: image.clone(), host: to.clone(), port_maps: vec![PortMap::new(8888, port).unwrap()] }
            }
            _ => match (runs.choose(rng), acquires.choose(rng)) {
                (Some(run), Some(acq)) if rng.gen_bool(0.5) => {
                    TaskKind::Reconstruct { on: run.name.clone(), input: acq.name.clone(), delay: rng.gen_range(0.0..0.5) }
                }
                _ => {
                    let url = *["http://172.16.0.10:8888/", "http://172.16.1.10:8888/", "http://172.16.0.2:8001/"].choose(rng).unwrap();
                    let token = rng.gen_bool(0.3).then(|| "bad".to_string());
                    TaskKind::Fetch { host: "cades-user".into(), url: url.into(), token }
                }
            },
        };
        deps.sort();
        deps.dedup();
        tasks.push(TaskSpec { name: format!("t{i}"), kind, depends_on: deps });
    }
    WorkflowSpec { id: format!("w{id}"), tasks }
}
