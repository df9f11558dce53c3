//! Wire format shared by IOCs, the gateway and clients.
//!
//! Every frame is a fixed 12-byte header followed by an opaque payload:
//!
//! ```text
//! +--------+---------+---------+--------+------------+-----------+
//! | magic  | version | command | cid    | length     | payload   |
//! | 0xCA67 | 0x01    | u8      | u32 BE | u32 BE     | length B  |
//! +--------+---------+---------+--------+------------+-----------+
//! ```
//!
//! [`Frame`] is the raw layer and accepts any command byte. [`Message`] is the
//! typed layer: each [`Command`] has exactly one payload schema, and unknown
//! command codes are rejected there, at dispatch, rather than by the framer.

use std::fmt;

use bytes::{Buf, BytesMut};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: u16 = 0xCA67;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
pub const MAX_STRING_LEN: usize = u16::MAX as usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtoError {
    #[error("payload of {0} bytes exceeds the 32-bit length field")]
    Oversize(usize),
    #[error("bad magic 0x{0:04X}")]
    BadMagic(u16),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown command code 0x{0:02X}")]
    UnknownCommand(u8),
    #[error("bad dtype {0}")]
    BadDtype(u8),
    #[error("bad severity {0}")]
    BadSeverity(u8),
    #[error("bad status {0}")]
    BadStatus(u8),
    #[error("payload truncated")]
    Truncated,
    #[error("{0} trailing payload bytes")]
    Trailing(usize),
    #[error("string field is not valid UTF-8")]
    BadUtf8,
    #[error("string of {0} bytes exceeds 65535")]
    StringTooLong(usize),
}

/// Outcome of [`decode_frame`] when no frame could be produced.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    /// The buffer holds a prefix of a valid frame; at least this many more
    /// bytes are required.
    #[error("need {0} more bytes")]
    NeedMore(usize),
    #[error(transparent)]
    Invalid(#[from] ProtoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Command {
    Search = 0x01,
    SearchOk = 0x02,
    SearchFail = 0x03,
    CreateChan = 0x04,
    ChanOk = 0x05,
    ChanFail = 0x06,
    Read = 0x07,
    ReadReply = 0x08,
    Write = 0x09,
    WriteOk = 0x0A,
    WriteDenied = 0x0B,
    EventAdd = 0x0C,
    Event = 0x0D,
    EventCancel = 0x0E,
    ClearChan = 0x0F,
    Echo = 0x10,
    EchoReply = 0x11,
}

impl Command {
    pub const ALL: [Command; 17] = [
        Command::Search,
        Command::SearchOk,
        Command::SearchFail,
        Command::CreateChan,
        Command::ChanOk,
        Command::ChanFail,
        Command::Read,
        Command::ReadReply,
        Command::Write,
        Command::WriteOk,
        Command::WriteDenied,
        Command::EventAdd,
        Command::Event,
        Command::EventCancel,
        Command::ClearChan,
        Command::Echo,
        Command::EchoReply,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Command {
    type Error = ProtoError;

    fn try_from(code: u8) -> Result<Self, Self::Error> {
        match code {
            0x01..=0x11 => Ok(Command::ALL[(code - 1) as usize]),
            other => Err(ProtoError::UnknownCommand(other)),
        }
    }
}

/// Raw frame. `command` is kept as a byte so that frames with unknown codes
/// still decode; [`Message::from_frame`] is where they get rejected.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub command: u8,
    pub cid: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(command: Command, cid: u32, payload: Vec<u8>) -> Self {
        Frame {
            command: command.code(),
            cid,
            payload,
        }
    }

    pub fn command(&self) -> Result<Command, ProtoError> {
        Command::try_from(self.command)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, ProtoError> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    encode_frame_into(frame, &mut out)?;
    Ok(out)
}

pub fn encode_frame_into(frame: &Frame, out: &mut Vec<u8>) -> Result<(), ProtoError> {
    let len = u32::try_from(frame.payload.len())
        .map_err(|_| ProtoError::Oversize(frame.payload.len()))?;
    out.extend_from_slice(&MAGIC.to_be_bytes());
    out.push(VERSION);
    out.push(frame.command);
    out.extend_from_slice(&frame.cid.to_be_bytes());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(())
}

/// Decodes one frame from the front of `bytes`, returning it with the
/// unconsumed remainder. Magic and version are checked as soon as the bytes
/// carrying them are present, so corruption is reported even on short input.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, &[u8]), DecodeError> {
    if bytes.len() >= 2 {
        let magic = u16::from_be_bytes([bytes[0], bytes[1]]);
        if magic != MAGIC {
            return Err(ProtoError::BadMagic(magic).into());
        }
    }
    if bytes.len() >= 3 && bytes[2] != VERSION {
        return Err(ProtoError::BadVersion(bytes[2]).into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::NeedMore(HEADER_LEN - bytes.len()));
    }
    let command = bytes[3];
    let cid = u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let len = u32::from_be_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Err(DecodeError::NeedMore(total - bytes.len()));
    }
    let frame = Frame {
        command,
        cid,
        payload: bytes[HEADER_LEN..total].to_vec(),
    };
    Ok((frame, &bytes[total..]))
}

/// Incremental decoder for a byte stream arriving in arbitrary chunks.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: BytesMut,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, chunk: &[u8]) {
        self.buf.extend_from_slice(chunk);
    }

    /// Next complete frame, `Ok(None)` if more input is needed. After an
    /// error the stream is unusable and the connection must be dropped.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, ProtoError> {
        match decode_frame(&self.buf) {
            Ok((frame, rest)) => {
                let consumed = self.buf.len() - rest.len();
                self.buf.advance(consumed);
                Ok(Some(frame))
            }
            Err(DecodeError::NeedMore(_)) => Ok(None),
            Err(DecodeError::Invalid(e)) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum DType {
    Double = 0,
    Int32 = 1,
    String = 2,
}

impl TryFrom<u8> for DType {
    type Error = ProtoError;

    fn try_from(b: u8) -> Result<Self, ProtoError> {
        match b {
            0 => Ok(DType::Double),
            1 => Ok(DType::Int32),
            2 => Ok(DType::String),
            other => Err(ProtoError::BadDtype(other)),
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "DOUBLE" => Ok(DType::Double),
            "INT32" => Ok(DType::Int32),
            "STRING" => Ok(DType::String),
            _ => Err(format!("unknown dtype {s:?}")),
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[repr(u8)]
pub enum Severity {
    #[default]
    None = 0,
    Minor = 1,
    Major = 2,
    Invalid = 3,
}

impl TryFrom<u8> for Severity {
    type Error = ProtoError;

    fn try_from(b: u8) -> Result<Self, ProtoError> {
        match b {
            0 => Ok(Severity::None),
            1 => Ok(Severity::Minor),
            2 => Ok(Severity::Major),
            3 => Ok(Severity::Invalid),
            other => Err(ProtoError::BadSeverity(other)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Value {
    Double(f64),
    Int32(i32),
    Str(String),
}

impl Value {
    pub fn dtype(&self) -> DType {
        match self {
            Value::Double(_) => DType::Double,
            Value::Int32(_) => DType::Int32,
            Value::Str(_) => DType::String,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Double(d) => Some(*d),
            Value::Int32(i) => Some(f64::from(*i)),
            Value::Str(s) => s.trim().parse().ok(),
        }
    }

    /// Converts to `dtype`; `None` when the conversion would lose the value
    /// entirely (non-numeric string into a numeric type).
    pub fn coerce(&self, dtype: DType) -> Option<Value> {
        match dtype {
            DType::Double => self.as_f64().map(Value::Double),
            DType::Int32 => match self {
                Value::Int32(i) => Some(Value::Int32(*i)),
                other => other.as_f64().map(|d| Value::Int32(d.round() as i32)),
            },
            DType::String => Some(Value::Str(self.to_string())),
        }
    }
}

// Doubles compare by bit pattern so NaN payloads round-trip observably.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Double(a), Value::Double(b)) => a.to_bits() == b.to_bits(),
            (Value::Int32(a), Value::Int32(b)) => a == b,
            (Value::Str(a), Value::Str(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Double(d) => write!(f, "{d}"),
            Value::Int32(i) => write!(f, "{i}"),
            Value::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelValue {
    pub severity: Severity,
    /// Nanoseconds since the Unix epoch.
    pub timestamp: u64,
    pub value: Value,
}

impl ChannelValue {
    pub fn new(value: Value, severity: Severity, timestamp: u64) -> Self {
        ChannelValue {
            severity,
            timestamp,
            value,
        }
    }

    pub fn dtype(&self) -> DType {
        self.value.dtype()
    }

    pub fn with_severity(&self, severity: Severity) -> Self {
        ChannelValue {
            severity,
            ..self.clone()
        }
    }
}

pub fn encode_value(v: &ChannelValue) -> Result<Vec<u8>, ProtoError> {
    let mut out = Vec::with_capacity(26);
    encode_value_into(v, &mut out)?;
    Ok(out)
}

pub fn encode_value_into(v: &ChannelValue, out: &mut Vec<u8>) -> Result<(), ProtoError> {
    out.push(v.dtype() as u8);
    out.push(v.severity as u8);
    out.extend_from_slice(&v.timestamp.to_be_bytes());
    match &v.value {
        Value::Double(d) => out.extend_from_slice(&d.to_bits().to_be_bytes()),
        Value::Int32(i) => out.extend_from_slice(&i.to_be_bytes()),
        Value::Str(s) => put_str16(out, s)?,
    }
    Ok(())
}

pub fn decode_value(bytes: &[u8]) -> Result<ChannelValue, ProtoError> {
    let mut r = Reader::new(bytes);
    let v = r.value()?;
    r.finish()?;
    Ok(v)
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<(), ProtoError> {
    let len = u16::try_from(s.len()).map_err(|_| ProtoError::StringTooLong(s.len()))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtoError> {
        if self.buf.len() < n {
            return Err(ProtoError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, ProtoError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, ProtoError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }

    fn str16(&mut self) -> Result<String, ProtoError> {
        let b = self.take(2)?;
        let len = u16::from_be_bytes([b[0], b[1]]) as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| ProtoError::BadUtf8)
    }

    fn value(&mut self) -> Result<ChannelValue, ProtoError> {
        let dtype = DType::try_from(self.u8()?)?;
        let severity = Severity::try_from(self.u8()?)?;
        let timestamp = self.u64()?;
        let value = match dtype {
            DType::Double => Value::Double(f64::from_bits(self.u64()?)),
            DType::Int32 => {
                let b = self.take(4)?;
                Value::Int32(i32::from_be_bytes(b.try_into().expect("4 bytes")))
            }
            DType::String => Value::Str(self.str16()?),
        };
        Ok(ChannelValue {
            severity,
            timestamp,
            value,
        })
    }

    fn status(&mut self) -> Result<Status, ProtoError> {
        Status::try_from(self.u8()?)
    }

    fn finish(self) -> Result<(), ProtoError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(ProtoError::Trailing(self.buf.len()))
        }
    }
}

/// Who is asking. Carried in CREATE_CHAN and trusted as presented.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Identity {
    pub user: String,
    pub host: String,
}

impl Identity {
    pub fn new(user: impl Into<String>, host: impl Into<String>) -> Self {
        Identity {
            user: user.into(),
            host: host.into(),
        }
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.user, self.host)
    }
}

impl std::str::FromStr for Identity {
    type Err = String;

    /// `USER@HOST`, or a bare `USER` with an empty host.
    fn from_str(s: &str) -> Result<Self, String> {
        let (user, host) = s.split_once('@').unwrap_or((s, ""));
        if user.is_empty() {
            return Err(format!("identity {s:?} has an empty user"));
        }
        Ok(Identity::new(user, host))
    }
}

/// Result code carried by replies that can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    Denied = 1,
    NotFound = 2,
    UpstreamDown = 3,
    BadType = 4,
}

impl TryFrom<u8> for Status {
    type Error = ProtoError;

    fn try_from(b: u8) -> Result<Self, ProtoError> {
        match b {
            0 => Ok(Status::Ok),
            1 => Ok(Status::Denied),
            2 => Ok(Status::NotFound),
            3 => Ok(Status::UpstreamDown),
            4 => Ok(Status::BadType),
            other => Err(ProtoError::BadStatus(other)),
        }
    }
}

/// Access bits granted on a channel: bit 0 read, bit 1 write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Access {
    pub read: bool,
    pub write: bool,
}

impl Access {
    pub fn bits(self) -> u8 {
        u8::from(self.read) | (u8::from(self.write) << 1)
    }

    pub fn from_bits(b: u8) -> Self {
        Access {
            read: b & 1 != 0,
            write: b & 2 != 0,
        }
    }
}

/// Typed view of a frame. Payload schemas, per command:
///
/// | command      | payload                                   |
/// |--------------|-------------------------------------------|
/// | SEARCH*      | str16 pv name                             |
/// | CREATE_CHAN  | str16 pv, str16 user, str16 host          |
/// | CHAN_OK      | u8 dtype, u8 access bits, str16 asg       |
/// | CHAN_FAIL    | u8 status                                 |
/// | READ         | empty                                     |
/// | READ_REPLY   | u8 status, value when status is OK        |
/// | WRITE        | value                                     |
/// | WRITE_OK     | empty                                     |
/// | WRITE_DENIED | u8 status                                 |
/// | EVENT_ADD    | empty                                     |
/// | EVENT        | value                                     |
/// | EVENT_CANCEL | u8 status                                 |
/// | CLEAR_CHAN   | empty                                     |
/// | ECHO*        | empty                                     |
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Search {
        cid: u32,
        name: String,
    },
    SearchOk {
        cid: u32,
        name: String,
    },
    SearchFail {
        cid: u32,
        name: String,
    },
    CreateChan {
        cid: u32,
        name: String,
        identity: Identity,
    },
    ChanOk {
        cid: u32,
        dtype: DType,
        access: Access,
        asg: String,
    },
    ChanFail {
        cid: u32,
        status: Status,
    },
    Read {
        cid: u32,
    },
    ReadReply {
        cid: u32,
        result: Result<ChannelValue, Status>,
    },
    Write {
        cid: u32,
        value: ChannelValue,
    },
    WriteOk {
        cid: u32,
    },
    WriteDenied {
        cid: u32,
        status: Status,
    },
    EventAdd {
        cid: u32,
    },
    Event {
        cid: u32,
        value: ChannelValue,
    },
    EventCancel {
        cid: u32,
        status: Status,
    },
    ClearChan {
        cid: u32,
    },
    Echo {
        cid: u32,
    },
    EchoReply {
        cid: u32,
    },
}

impl Message {
    pub fn command(&self) -> Command {
        match self {
            Message::Search { .. } => Command::Search,
            Message::SearchOk { .. } => Command::SearchOk,
            Message::SearchFail { .. } => Command::SearchFail,
            Message::CreateChan { .. } => Command::CreateChan,
            Message::ChanOk { .. } => Command::ChanOk,
            Message::ChanFail { .. } => Command::ChanFail,
            Message::Read { .. } => Command::Read,
            Message::ReadReply { .. } => Command::ReadReply,
            Message::Write { .. } => Command::Write,
            Message::WriteOk { .. } => Command::WriteOk,
            Message::WriteDenied { .. } => Command::WriteDenied,
            Message::EventAdd { .. } => Command::EventAdd,
            Message::Event { .. } => Command::Event,
            Message::EventCancel { .. } => Command::EventCancel,
            Message::ClearChan { .. } => Command::ClearChan,
            Message::Echo { .. } => Command::Echo,
            Message::EchoReply { .. } => Command::EchoReply,
        }
    }

    pub fn cid(&self) -> u32 {
        match self {
            Message::Search { cid, .. }
            | Message::SearchOk { cid, .. }
            | Message::SearchFail { cid, .. }
            | Message::CreateChan { cid, .. }
            | Message::ChanOk { cid, .. }
            | Message::ChanFail { cid, .. }
            | Message::Read { cid }
            | Message::ReadReply { cid, .. }
            | Message::Write { cid, .. }
            | Message::WriteOk { cid }
            | Message::WriteDenied { cid, .. }
            | Message::EventAdd { cid }
            | Message::Event { cid, .. }
            | Message::EventCancel { cid, .. }
            | Message::ClearChan { cid }
            | Message::Echo { cid }
            | Message::EchoReply { cid } => *cid,
        }
    }

    pub fn to_frame(&self) -> Result<Frame, ProtoError> {
        let mut p = Vec::new();
        match self {
            Message::Search { name, .. }
            | Message::SearchOk { name, .. }
            | Message::SearchFail { name, .. } => put_str16(&mut p, name)?,
            Message::CreateChan { name, identity, .. } => {
                put_str16(&mut p, name)?;
                put_str16(&mut p, &identity.user)?;
                put_str16(&mut p, &identity.host)?;
            }
            Message::ChanOk {
                dtype, access, asg, ..
            } => {
                p.push(*dtype as u8);
                p.push(access.bits());
                put_str16(&mut p, asg)?;
            }
            Message::ChanFail { status, .. }
            | Message::WriteDenied { status, .. }
            | Message::EventCancel { status, .. } => p.push(*status as u8),
            Message::ReadReply { result, .. } => match result {
                Ok(v) => {
                    p.push(Status::Ok as u8);
                    encode_value_into(v, &mut p)?;
                }
                Err(status) => p.push(*status as u8),
            },
            Message::Write { value, .. } | Message::Event { value, .. } => {
                encode_value_into(value, &mut p)?
            }
            Message::Read { .. }
            | Message::WriteOk { .. }
            | Message::EventAdd { .. }
            | Message::ClearChan { .. }
            | Message::Echo { .. }
            | Message::EchoReply { .. } => {}
        }
        Ok(Frame::new(self.command(), self.cid(), p))
    }

    pub fn from_frame(frame: &Frame) -> Result<Message, ProtoError> {
        let command = frame.command()?;
        let cid = frame.cid;
        let mut r = Reader::new(&frame.payload);
        let msg = match command {
            Command::Search => Message::Search {
                cid,
                name: r.str16()?,
            },
            Command::SearchOk => Message::SearchOk {
                cid,
                name: r.str16()?,
            },
            Command::SearchFail => Message::SearchFail {
                cid,
                name: r.str16()?,
            },
            Command::CreateChan => {
                let name = r.str16()?;
                let user = r.str16()?;
                let host = r.str16()?;
                Message::CreateChan {
                    cid,
                    name,
                    identity: Identity { user, host },
                }
            }
            Command::ChanOk => Message::ChanOk {
                cid,
                dtype: DType::try_from(r.u8()?)?,
                access: Access::from_bits(r.u8()?),
                asg: r.str16()?,
            },
            Command::ChanFail => Message::ChanFail {
                cid,
                status: r.status()?,
            },
            Command::Read => Message::Read { cid },
            Command::ReadReply => {
                let status = r.status()?;
                let result = if status == Status::Ok {
                    Ok(r.value()?)
                } else {
                    Err(status)
                };
                Message::ReadReply { cid, result }
            }
            Command::Write => Message::Write {
                cid,
                value: r.value()?,
            },
            Command::WriteOk => Message::WriteOk { cid },
            Command::WriteDenied => Message::WriteDenied {
                cid,
                status: r.status()?,
            },
            Command::EventAdd => Message::EventAdd { cid },
            Command::Event => Message::Event {
                cid,
                value: r.value()?,
            },
            Command::EventCancel => Message::EventCancel {
                cid,
                status: r.status()?,
            },
            Command::ClearChan => Message::ClearChan { cid },
            Command::Echo => Message::Echo { cid },
            Command::EchoReply => Message::EchoReply { cid },
        };
        r.finish()?;
        Ok(msg)
    }

    /// Encodes to a frame. Only fails for strings over 65535 bytes, which
    /// callers never construct for protocol-internal replies.
    pub fn frame(&self) -> Frame {
        self.to_frame().expect("message fields within wire limits")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_frame_bytes() {
        let f = Frame::new(Command::Echo, 0, vec![]);
        let bytes = encode_frame(&f).unwrap();
        assert_eq!(bytes, [0xCA, 0x67, 0x01, 0x10, 0, 0, 0, 0, 0, 0, 0, 0]);
        let (back, rest) = decode_frame(&bytes).unwrap();
        assert_eq!(back, f);
        assert!(rest.is_empty());
    }

    #[test]
    fn search_frame_bytes() {
        let msg = Message::Search {
            cid: 7,
            name: "a".into(),
        };
        let bytes = encode_frame(&msg.frame()).unwrap();
        assert_eq!(
            bytes,
            [0xCA, 0x67, 0x01, 0x01, 0, 0, 0, 7, 0, 0, 0, 3, 0x00, 0x01, 0x61]
        );
        let (f, _) = decode_frame(&bytes).unwrap();
        assert_eq!(Message::from_frame(&f).unwrap(), msg);
    }

    #[test]
    fn short_input_needs_more() {
        let bytes = encode_frame(&Frame::new(Command::Echo, 3, vec![1, 2])).unwrap();
        assert_eq!(decode_frame(&bytes[..5]), Err(DecodeError::NeedMore(7)));
        assert_eq!(decode_frame(&bytes[..12]), Err(DecodeError::NeedMore(2)));
        assert_eq!(decode_frame(&[]), Err(DecodeError::NeedMore(12)));
    }

    #[test]
    fn bad_magic_and_version() {
        assert_eq!(
            decode_frame(&[0xFF, 0xFF, 0xFF]),
            Err(DecodeError::Invalid(ProtoError::BadMagic(0xFFFF)))
        );
        let mut bytes = encode_frame(&Frame::new(Command::Echo, 0, vec![])).unwrap();
        bytes[2] = 2;
        assert_eq!(
            decode_frame(&bytes),
            Err(DecodeError::Invalid(ProtoError::BadVersion(2)))
        );
    }

    #[test]
    fn unknown_command_decodes_but_fails_dispatch() {
        let f = Frame {
            command: 0x7F,
            cid: 1,
            payload: vec![9, 9],
        };
        let bytes = encode_frame(&f).unwrap();
        let (back, _) = decode_frame(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(
            Message::from_frame(&back),
            Err(ProtoError::UnknownCommand(0x7F))
        );
    }

    #[test]
    fn double_zero_layout() {
        let v = ChannelValue::new(Value::Double(0.0), Severity::None, 0);
        assert_eq!(encode_value(&v).unwrap(), vec![0u8; 18]);
    }

    #[test]
    fn int32_minus_one() {
        let v = ChannelValue::new(Value::Int32(-1), Severity::Major, 5);
        let b = encode_value(&v).unwrap();
        assert_eq!(&b[..2], &[1, 2]);
        assert_eq!(&b[10..], &[0xFF, 0xFF, 0xFF, 0xFF]);
        assert_eq!(decode_value(&b).unwrap(), v);
    }

    #[test]
    fn value_errors() {
        assert_eq!(decode_value(&[9, 0]), Err(ProtoError::BadDtype(9)));
        assert_eq!(decode_value(&[0, 0, 0, 0]), Err(ProtoError::Truncated));
        let mut b = encode_value(&ChannelValue::new(Value::Int32(1), Severity::None, 0)).unwrap();
        b.push(0);
        assert_eq!(decode_value(&b), Err(ProtoError::Trailing(1)));
    }

    #[test]
    fn nan_payload_survives() {
        let nan = f64::from_bits(0x7FF8_0000_DEAD_BEEF);
        let v = ChannelValue::new(Value::Double(nan), Severity::None, 1);
        let back = decode_value(&encode_value(&v).unwrap()).unwrap();
        match back.value {
            Value::Double(d) => assert_eq!(d.to_bits(), nan.to_bits()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn oversize_string_rejected() {
        let s = "x".repeat(MAX_STRING_LEN + 1);
        let v = ChannelValue::new(Value::Str(s), Severity::None, 0);
        assert_eq!(
            encode_value(&v),
            Err(ProtoError::StringTooLong(MAX_STRING_LEN + 1))
        );
    }

    #[test]
    fn identity_parse() {
        let id: Identity = "alice@ws01".parse().unwrap();
        assert_eq!(id, Identity::new("alice", "ws01"));
        assert!("@ws01".parse::<Identity>().is_err());
    }
}
