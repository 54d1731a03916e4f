//! Emulated beamline: an EPICS-lite PV server driving a rotation stage over a
//! phantom and producing one projection frame per acquire trigger.
//!
//! PVs for an instrument named `BL`:
//!
//! | name              | type | access | meaning                          |
//! |-------------------|------|--------|----------------------------------|
//! | `BL:MOT:ROT`      | f64  | rw     | stage angle, degrees in [0, 360) |
//! | `BL:DET:ACQ`      | i64  | rw     | writing `1` acquires a frame     |
//! | `BL:DET:FRAMES`   | i64  | ro     | number of stored frames          |
//! | `BL:DET:FRAME:<k>`| str  | ro     | bins of frame `k`, comma-joined  |

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::engine::Engine;
use crate::netsim::{Endpoint, Message, Reply};
use crate::protocols::{
    parse_epics_request, render_epics_response, EpicsRequest, EpicsResponse, EpicsVerb, PvValue,
};
use crate::tomo::{detector_bins, format_sig6, project, Phantom, Raster, Sinogram, TomoError};

/// Conventional Channel Access server port.
pub const EPICS_PORT: u16 = 5064;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InstrumentError {
    #[error("scan needs at least one angle")]
    NoAngles,
    #[error("unknown instrument `{0}`")]
    UnknownInstrument(String),
    #[error("detector needs an odd bin count of at least 3, got {0}")]
    BadBins(usize),
    #[error(transparent)]
    Tomo(#[from] TomoError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessVariable {
    pub name: String,
    pub value: PvValue,
    pub timestamp: f64,
    pub writable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorFrame {
    /// Degrees.
    pub angle: f64,
    pub bins: Vec<f64>,
    pub acquired_at: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct MonitorSubscription {
    pub pv_name: String,
    pub subscriber: Endpoint,
}

/// Result of one PV request: the direct reply plus EVT lines owed to
/// monitor subscribers.
#[derive(Debug, Clone, PartialEq)]
pub struct PvReply {
    pub response: EpicsResponse,
    pub events: Vec<(Endpoint, EpicsResponse)>,
}

#[derive(Debug, Clone)]
pub struct InstrumentModel {
    prefix: String,
    phantom: Phantom,
    s_values: Vec<f64>,
    sample_step: f64,
    pvs: BTreeMap<String, ProcessVariable>,
    frames: Vec<DetectorFrame>,
    subscriptions: BTreeSet<MonitorSubscription>,
}

impl InstrumentModel {
    pub fn new(prefix: &str, phantom: Phantom, n_s: usize) -> Result<Self, InstrumentError> {
        if n_s < 3 || n_s.is_multiple_of(2) {
            return Err(InstrumentError::BadBins(n_s));
        }
        let sample_step = phantom.pixel_size() / 2.0;
        let mut model = Self {
            prefix: prefix.to_string(),
            phantom,
            s_values: detector_bins(n_s),
            sample_step,
            pvs: BTreeMap::new(),
            frames: Vec::new(),
            subscriptions: BTreeSet::new(),
        };
        for (name, value, writable) in [
            (model.angle_pv(), PvValue::F64(0.0), true),
            (model.acquire_pv(), PvValue::I64(0), true),
            (model.frame_count_pv(), PvValue::I64(0), false),
        ] {
            model.pvs.insert(
                name.clone(),
                ProcessVariable {
                    name,
                    value,
                    timestamp: 0.0,
                    writable,
                },
            );
        }
        Ok(model)
    }

    pub fn angle_pv(&self) -> String {
        format!("{}:MOT:ROT", self.prefix)
    }

    pub fn acquire_pv(&self) -> String {
        format!("{}:DET:ACQ", self.prefix)
    }

    pub fn frame_count_pv(&self) -> String {
        format!("{}:DET:FRAMES", self.prefix)
    }

    pub fn frame_pv(&self, k: usize) -> String {
        format!("{}:DET:FRAME:{k}", self.prefix)
    }

    pub fn phantom(&self) -> &Phantom {
        &self.phantom
    }

    pub fn n_s(&self) -> usize {
        self.s_values.len()
    }

    pub fn frames(&self) -> &[DetectorFrame] {
        &self.frames
    }

    pub fn subscriptions(&self) -> &BTreeSet<MonitorSubscription> {
        &self.subscriptions
    }

    pub fn pv(&self, name: &str) -> Option<&ProcessVariable> {
        self.pvs.get(name)
    }

    /// Current stage angle in degrees.
    pub fn angle(&self) -> f64 {
        match self.pvs[&self.angle_pv()].value {
            PvValue::F64(v) => v,
            _ => unreachable!("angle pv is f64"),
        }
    }

    fn frame_value(&self, name: &str) -> Option<(PvValue, f64)> {
        let k: usize = name
            .strip_prefix(&format!("{}:DET:FRAME:", self.prefix))?
            .parse()
            .ok()?;
        let frame = self.frames.get(k)?;
        let text: Vec<String> = frame.bins.iter().map(|v| format_sig6(*v)).collect();
        Some((PvValue::Str(text.join(",")), frame.acquired_at))
    }

    fn read(&self, name: &str) -> Option<(PvValue, f64)> {
        match self.pvs.get(name) {
            Some(pv) => Some((pv.value.clone(), pv.timestamp)),
            None => self.frame_value(name),
        }
    }

    fn ok(name: &str, (value, timestamp): (PvValue, f64)) -> EpicsResponse {
        EpicsResponse::Ok {
            pv_name: name.to_string(),
            value,
            timestamp,
        }
    }

    fn set_angle(&mut self, degrees: f64, now: f64) {
        let name = self.angle_pv();
        let pv = self.pvs.get_mut(&name).expect("angle pv");
        pv.value = PvValue::F64(degrees.rem_euclid(360.0));
        pv.timestamp = now;
    }

    /// Serves one EPICS-lite request from `client` at virtual time `now`.
    pub fn handle_pv_request(&mut self, req: &EpicsRequest, now: f64, client: Endpoint) -> PvReply {
        let name = req.pv_name.as_str();
        let reply = |response| PvReply {
            response,
            events: Vec::new(),
        };
        let Some(current) = self.read(name) else {
            return reply(EpicsResponse::err(404, "unknown pv"));
        };
        match req.verb {
            EpicsVerb::Get => reply(Self::ok(name, current)),
            EpicsVerb::Mon => {
                self.subscriptions.insert(MonitorSubscription {
                    pv_name: name.to_string(),
                    subscriber: client,
                });
                reply(Self::ok(name, current))
            }
            EpicsVerb::Stop => {
                self.subscriptions.remove(&MonitorSubscription {
                    pv_name: name.to_string(),
                    subscriber: client,
                });
                reply(Self::ok(name, current))
            }
            EpicsVerb::Put => {
                let writable = self.pvs.get(name).is_some_and(|pv| pv.writable);
                if !writable {
                    return reply(EpicsResponse::err(403, "read-only pv"));
                }
                let text = req.value.as_deref().unwrap_or("");
                let tag = current.0.type_tag();
                let Ok(value) = PvValue::parse_as(tag, text) else {
                    return reply(EpicsResponse::err(400, "type mismatch"));
                };
                if name == self.angle_pv() {
                    let PvValue::F64(deg) = value else { unreachable!() };
                    self.set_angle(deg, now);
                } else {
                    let pv = self.pvs.get_mut(name).expect("checked above");
                    pv.value = value.clone();
                    pv.timestamp = now;
                }
                if name == self.acquire_pv() && value == PvValue::I64(1) {
                    self.acquire_frame(now);
                }
                let (value, timestamp) = self.read(name).expect("exists");
                let events = self
                    .subscriptions
                    .iter()
                    .filter(|s| s.pv_name == name)
                    .map(|s| {
                        (
                            s.subscriber,
                            EpicsResponse::Evt {
                                pv_name: name.to_string(),
                                value: value.clone(),
                                timestamp,
                            },
                        )
                    })
                    .collect();
                PvReply {
                    response: Self::ok(name, (value, timestamp)),
                    events,
                }
            }
        }
    }

    /// Projects the phantom at the current stage angle and stores the frame.
    pub fn acquire_frame(&mut self, now: f64) -> DetectorFrame {
        let angle = self.angle();
        let bins = project(&self.phantom, angle.to_radians(), &self.s_values, self.sample_step);
        let frame = DetectorFrame {
            angle,
            bins,
            acquired_at: now,
        };
        self.frames.push(frame.clone());
        let name = self.frame_count_pv();
        let pv = self.pvs.get_mut(&name).expect("frame count pv");
        pv.value = PvValue::I64(self.frames.len() as i64);
        pv.timestamp = now;
        frame
    }

    /// Steps the stage through `180·k/n` degrees, acquiring at each stop.
    pub fn run_scan(&mut self, n_angles: usize, now: f64) -> Result<Sinogram, InstrumentError> {
        if n_angles < 1 {
            return Err(InstrumentError::NoAngles);
        }
        let mut angles = Vec::with_capacity(n_angles);
        let mut rows = Vec::with_capacity(n_angles);
        for k in 0..n_angles {
            self.set_angle(180.0 * k as f64 / n_angles as f64, now);
            let frame = self.acquire_frame(now);
            angles.push(frame.angle.to_radians());
            rows.push(frame.bins);
        }
        Ok(Sinogram::from_rows(angles, rows)?)
    }
}

impl Engine {
    pub(crate) fn handle_epics(&mut self, instrument: &str, msg: &Message) -> Reply {
        let now = self.now();
        let text = std::str::from_utf8(&msg.payload).map_err(|_| ());
        let (response, events) = match (text, self.beamline_mut(instrument)) {
            (_, None) => (EpicsResponse::err(404, "no such instrument"), Vec::new()),
            (Err(()), _) => (EpicsResponse::err(400, "not utf-8"), Vec::new()),
            (Ok(line), Some(beamline)) => match parse_epics_request(line) {
                Ok(req) => {
                    let r = beamline.model.handle_pv_request(&req, now, msg.src);
                    (r.response, r.events)
                }
                Err(e) => (EpicsResponse::err(400, e.to_string()), Vec::new()),
            },
        };
        Reply {
            payload: render_epics_response(&response).into_bytes(),
            delay: 0.0,
            pushes: events
                .into_iter()
                .map(|(to, evt)| (to, render_epics_response(&evt).into_bytes()))
                .collect(),
        }
    }

    /// Runs a scan on a named instrument at the current virtual time.
    pub fn scan(&mut self, instrument: &str, n_angles: usize) -> Result<Sinogram, InstrumentError> {
        let now = self.now();
        let beamline = self
            .beamline_mut(instrument)
            .ok_or_else(|| InstrumentError::UnknownInstrument(instrument.to_string()))?;
        beamline.model.run_scan(n_angles, now)
    }
}
