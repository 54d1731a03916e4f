//! Wire formats carried over the emulated network: a line-oriented
//! instrument-control protocol (EPICS-lite) and a GET-only HTTP/1.0 subset.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("input is not valid UTF-8")]
    NotUtf8,
    #[error("empty input")]
    Empty,
    #[error("unknown verb `{0}`")]
    UnknownVerb(String),
    #[error("bad pv name `{0}`")]
    BadPvName(String),
    #[error("PUT requires a value")]
    MissingValue,
    #[error("{0} takes no value")]
    UnexpectedValue(EpicsVerb),
    #[error("embedded line break")]
    EmbeddedNewline,
    #[error("malformed response line: {0}")]
    MalformedResponse(String),
    #[error("unknown type tag `{0}`")]
    UnknownType(String),
    #[error("bad value `{value}` for type {tag}")]
    BadValue { tag: TypeTag, value: String },
    #[error("malformed request line")]
    MalformedRequestLine,
    #[error("unsupported method `{0}`")]
    UnsupportedMethod(String),
    #[error("unsupported version `{0}`")]
    UnsupportedVersion(String),
    #[error("malformed header line")]
    MalformedHeader,
    #[error("missing terminating blank line")]
    MissingBlankLine,
    #[error("malformed status line")]
    MalformedStatusLine,
    #[error("content length mismatch")]
    LengthMismatch,
}

pub(crate) fn valid_pv_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b':' | b'.' | b'_' | b'-'))
}

/// Renders a virtual timestamp with exactly nine decimals.
pub fn format_timestamp(t: f64) -> String {
    format!("{t:.9}")
}

// ---------------------------------------------------------------------------
// EPICS-lite

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpicsVerb {
    Get,
    Put,
    Mon,
    Stop,
}

impl EpicsVerb {
    pub fn as_str(&self) -> &'static str {
        match self {
            EpicsVerb::Get => "GET",
            EpicsVerb::Put => "PUT",
            EpicsVerb::Mon => "MON",
            EpicsVerb::Stop => "STOP",
        }
    }
}

impl fmt::Display for EpicsVerb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpicsRequest {
    pub verb: EpicsVerb,
    pub pv_name: String,
    pub value: Option<String>,
}

impl EpicsRequest {
    pub fn get(pv: &str) -> Self {
        Self {
            verb: EpicsVerb::Get,
            pv_name: pv.to_string(),
            value: None,
        }
    }

    pub fn put(pv: &str, value: &str) -> Self {
        Self {
            verb: EpicsVerb::Put,
            pv_name: pv.to_string(),
            value: Some(value.to_string()),
        }
    }

    pub fn mon(pv: &str) -> Self {
        Self {
            verb: EpicsVerb::Mon,
            pv_name: pv.to_string(),
            value: None,
        }
    }

    pub fn stop(pv: &str) -> Self {
        Self {
            verb: EpicsVerb::Stop,
            pv_name: pv.to_string(),
            value: None,
        }
    }

    pub fn render(&self) -> String {
        match &self.value {
            Some(v) => format!("{} {} {}\n", self.verb, self.pv_name, v),
            None => format!("{} {}\n", self.verb, self.pv_name),
        }
    }
}

/// Parses `VERB SP PV [SP VALUE]` with an optional trailing `\n`. The value
/// is everything after the second space, verbatim.
pub fn parse_epics_request(line: &str) -> Result<EpicsRequest, ProtocolError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    if line.contains(['\n', '\r']) {
        return Err(ProtocolError::EmbeddedNewline);
    }
    if line.is_empty() {
        return Err(ProtocolError::Empty);
    }
    let (verb, rest) = line.split_once(' ').unwrap_or((line, ""));
    let verb = match verb {
        "GET" => EpicsVerb::Get,
        "PUT" => EpicsVerb::Put,
        "MON" => EpicsVerb::Mon,
        "STOP" => EpicsVerb::Stop,
        other => return Err(ProtocolError::UnknownVerb(other.to_string())),
    };
    let (pv, value) = match rest.split_once(' ') {
        Some((pv, v)) => (pv, Some(v)),
        None => (rest, None),
    };
    if !valid_pv_name(pv) {
        return Err(ProtocolError::BadPvName(pv.to_string()));
    }
    match (verb, value) {
        (EpicsVerb::Put, None) | (EpicsVerb::Put, Some("")) => Err(ProtocolError::MissingValue),
        (EpicsVerb::Put, Some(v)) => Ok(EpicsRequest::put(pv, v)),
        (v, Some(_)) => Err(ProtocolError::UnexpectedValue(v)),
        (verb, None) => Ok(EpicsRequest {
            verb,
            pv_name: pv.to_string(),
            value: None,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeTag {
    F64,
    I64,
    Str,
    Enum,
}

impl TypeTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            TypeTag::F64 => "f64",
            TypeTag::I64 => "i64",
            TypeTag::Str => "str",
            TypeTag::Enum => "enum",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ProtocolError> {
        match s {
            "f64" => Ok(TypeTag::F64),
            "i64" => Ok(TypeTag::I64),
            "str" => Ok(TypeTag::Str),
            "enum" => Ok(TypeTag::Enum),
            other => Err(ProtocolError::UnknownType(other.to_string())),
        }
    }
}

impl fmt::Display for TypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Typed process-variable value. Floats render in shortest round-trip form.
#[derive(Debug, Clone, PartialEq)]
pub enum PvValue {
    F64(f64),
    I64(i64),
    Str(String),
    Enum(String),
}

impl PvValue {
    pub fn type_tag(&self) -> TypeTag {
        match self {
            PvValue::F64(_) => TypeTag::F64,
            PvValue::I64(_) => TypeTag::I64,
            PvValue::Str(_) => TypeTag::Str,
            PvValue::Enum(_) => TypeTag::Enum,
        }
    }

    /// Parses `text` as a value of type `tag`.
    pub fn parse_as(tag: TypeTag, text: &str) -> Result<Self, ProtocolError> {
        let bad = || ProtocolError::BadValue {
            tag,
            value: text.to_string(),
        };
        if text.contains(['\n', '\r']) {
            return Err(bad());
        }
        match tag {
            TypeTag::F64 => text
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(PvValue::F64)
                .ok_or_else(bad),
            TypeTag::I64 => text.parse::<i64>().map(PvValue::I64).map_err(|_| bad()),
            TypeTag::Str => Ok(PvValue::Str(text.to_string())),
            TypeTag::Enum => {
                if valid_pv_name(text) {
                    Ok(PvValue::Enum(text.to_string()))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl fmt::Display for PvValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PvValue::F64(v) => write!(f, "{v:?}"),
            PvValue::I64(v) => write!(f, "{v}"),
            PvValue::Str(s) | PvValue::Enum(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EpicsResponse {
    Ok {
        pv_name: String,
        value: PvValue,
        timestamp: f64,
    },
    Evt {
        pv_name: String,
        value: PvValue,
        timestamp: f64,
    },
    Err {
        code: u16,
        message: String,
    },
}

impl EpicsResponse {
    pub fn err(code: u16, message: impl Into<String>) -> Self {
        EpicsResponse::Err {
            code,
            message: message.into(),
        }
    }
}

/// `OK <pv> <type> <value> <t>\n`, `EVT` in the same shape, or
/// `ERR <code> <msg...>\n`.
pub fn render_epics_response(r: &EpicsResponse) -> String {
    match r {
        EpicsResponse::Ok {
            pv_name,
            value,
            timestamp,
        } => format!(
            "OK {pv_name} {} {value} {}\n",
            value.type_tag(),
            format_timestamp(*timestamp)
        ),
        EpicsResponse::Evt {
            pv_name,
            value,
            timestamp,
        } => format!(
            "EVT {pv_name} {} {value} {}\n",
            value.type_tag(),
            format_timestamp(*timestamp)
        ),
        EpicsResponse::Err { code, message } => format!("ERR {code} {message}\n"),
    }
}

pub fn parse_epics_response(line: &str) -> Result<EpicsResponse, ProtocolError> {
    let malformed = || ProtocolError::MalformedResponse(line.escape_debug().to_string());
    let line = line.strip_suffix('\n').unwrap_or(line);
    if line.contains(['\n', '\r']) {
        return Err(ProtocolError::EmbeddedNewline);
    }
    let (status, rest) = line.split_once(' ').ok_or_else(malformed)?;
    match status {
        "ERR" => {
            let (code, message) = rest.split_once(' ').ok_or_else(malformed)?;
            if code.is_empty() || !code.bytes().all(|b| b.is_ascii_digit()) {
                return Err(malformed());
            }
            let code = code.parse().map_err(|_| malformed())?;
            Ok(EpicsResponse::err(code, message))
        }
        "OK" | "EVT" => {
            let (pv, rest) = rest.split_once(' ').ok_or_else(malformed)?;
            let (tag, rest) = rest.split_once(' ').ok_or_else(malformed)?;
            let (value, t) = rest.rsplit_once(' ').ok_or_else(malformed)?;
            if !valid_pv_name(pv) {
                return Err(ProtocolError::BadPvName(pv.to_string()));
            }
            let value = PvValue::parse_as(TypeTag::parse(tag)?, value)?;
            let timestamp = parse_timestamp(t).ok_or_else(malformed)?;
            let pv_name = pv.to_string();
            Ok(if status == "OK" {
                EpicsResponse::Ok {
                    pv_name,
                    value,
                    timestamp,
                }
            } else {
                EpicsResponse::Evt {
                    pv_name,
                    value,
                    timestamp,
                }
            })
        }
        _ => Err(malformed()),
    }
}

fn parse_timestamp(t: &str) -> Option<f64> {
    let (int, frac) = t.split_once('.')?;
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || frac.len() != 9 || !digits(frac) {
        return None;
    }
    t.parse().ok()
}

// ---------------------------------------------------------------------------
// HTTP-lite

pub const HTTP_VERSION: &str = "HTTP/1.0";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub path: String,
    /// Query pairs in order of first appearance.
    pub query: Vec<(String, String)>,
    pub headers: Vec<(String, String)>,
}

impl HttpRequest {
    pub fn get(path: &str) -> Self {
        Self {
            path: path.to_string(),
            query: Vec::new(),
            headers: Vec::new(),
        }
    }

    pub fn query_param(&self, key: &str) -> Option<&str> {
        self.query
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> Vec<u8> {
        let mut out = format!("GET {}", self.path);
        if !self.query.is_empty() {
            let pairs: Vec<String> = self.query.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push('?');
            out.push_str(&pairs.join("&"));
        }
        out.push_str(" HTTP/1.0\r\n");
        for (name, value) in &self.headers {
            out.push_str(&format!("{name}: {value}\r\n"));
        }
        out.push_str("\r\n");
        out.into_bytes()
    }
}

/// Splits `bytes` into CRLF-terminated head lines and the remaining body.
fn split_head(bytes: &[u8]) -> Result<(Vec<&str>, &[u8]), ProtocolError> {
    let end = bytes
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .ok_or(ProtocolError::MissingBlankLine)?;
    let head = std::str::from_utf8(&bytes[..end]).map_err(|_| ProtocolError::NotUtf8)?;
    Ok((head.split("\r\n").collect(), &bytes[end + 4..]))
}

fn parse_headers(lines: &[&str]) -> Result<Vec<(String, String)>, ProtocolError> {
    lines
        .iter()
        .map(|line| {
            let (name, value) = line.split_once(':').ok_or(ProtocolError::MalformedHeader)?;
            if name.is_empty() || !name.bytes().all(|b| b.is_ascii_graphic()) || line.contains('\n') {
                return Err(ProtocolError::MalformedHeader);
            }
            Ok((name.to_string(), value.trim_start_matches(' ').to_string()))
        })
        .collect()
}

pub fn parse_http_request(bytes: &[u8]) -> Result<HttpRequest, ProtocolError> {
    let (lines, _body) = split_head(bytes)?;
    let mut parts = lines[0].split(' ');
    let (Some(method), Some(target), Some(version), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(ProtocolError::MalformedRequestLine);
    };
    if method.is_empty() || !method.bytes().all(|b| b.is_ascii_uppercase()) {
        return Err(ProtocolError::MalformedRequestLine);
    }
    if method != "GET" {
        return Err(ProtocolError::UnsupportedMethod(method.to_string()));
    }
    if version != HTTP_VERSION {
        return Err(ProtocolError::UnsupportedVersion(version.to_string()));
    }
    if !target.starts_with('/') || target.contains('\n') {
        return Err(ProtocolError::MalformedRequestLine);
    }
    let (path, query_text) = target.split_once('?').unwrap_or((target, ""));
    let mut query: Vec<(String, String)> = Vec::new();
    for pair in query_text.split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
        if !query.iter().any(|(existing, _)| existing == k) {
            query.push((k.to_string(), v.to_string()));
        }
    }
    Ok(HttpRequest {
        path: path.to_string(),
        query,
        headers: parse_headers(&lines[1..])?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status_code: u16,
    pub reason: String,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn new(status_code: u16, body: impl Into<Vec<u8>>) -> Self {
        let reason = match status_code {
            200 => "OK",
            400 => "Bad Request",
            403 => "Forbidden",
            404 => "Not Found",
            _ => "Unknown",
        };
        Self {
            status_code,
            reason: reason.to_string(),
            body: body.into(),
        }
    }

    pub fn content_length(&self) -> usize {
        self.body.len()
    }

    pub fn body_text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

/// `HTTP/1.0 <code> <reason>\r\nContent-Length: <n>\r\n\r\n<body>`
pub fn render_http_response(r: &HttpResponse) -> Vec<u8> {
    let mut out = format!(
        "HTTP/1.0 {} {}\r\nContent-Length: {}\r\n\r\n",
        r.status_code,
        r.reason,
        r.body.len()
    )
    .into_bytes();
    out.extend_from_slice(&r.body);
    out
}

pub fn parse_http_response(bytes: &[u8]) -> Result<HttpResponse, ProtocolError> {
    let (lines, body) = split_head(bytes)?;
    let status = lines[0]
        .strip_prefix("HTTP/1.0 ")
        .ok_or(ProtocolError::MalformedStatusLine)?;
    let (code, reason) = status
        .split_once(' ')
        .ok_or(ProtocolError::MalformedStatusLine)?;
    if code.len() != 3 || !code.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ProtocolError::MalformedStatusLine);
    }
    let status_code = code.parse().map_err(|_| ProtocolError::MalformedStatusLine)?;
    let headers = parse_headers(&lines[1..])?;
    let length = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("Content-Length"))
        .and_then(|(_, v)| v.parse::<usize>().ok())
        .ok_or(ProtocolError::LengthMismatch)?;
    if length != body.len() {
        return Err(ProtocolError::LengthMismatch);
    }
    Ok(HttpResponse {
        status_code,
        reason: reason.to_string(),
        body: body.to_vec(),
    })
}
