//! Byte protocol between agents and the central node.
//!
//! Every frame is little-endian: `u32` total frame length, `u16` variant tag,
//! `u64` sequence number, `u32` sender, then the payload. Decoding is strict
//! so that re-encoding a decoded frame gives back the same bytes.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;

use crate::geom::{GnssFix, Pose};
use crate::gnss::AgentRegistration;
use crate::relpose::CoreTransforms;
use crate::vo::FrameId;
use crate::{Error, Result};

pub const HEADER_LEN: usize = 4 + 2 + 8 + 4;
/// Frames longer than this are rejected before any allocation.
pub const MAX_FRAME_LEN: usize = 64 << 20;

/// Poses and features of one frame, as the central node needs them for
/// overlap search and homography estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: FrameId,
    pub timestamp: f64,
    /// Camera pose in the agent's metric local frame.
    pub pose: Pose,
    /// Scale the pose's translation was converted to metres with.
    pub scale: f64,
    /// `(landmark id, normalized u, normalized v)`, sorted by id.
    pub features: Vec<(u64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    RegistrationUpdate(AgentRegistration),
    PoseUpdate {
        agent: u32,
        timestamp: f64,
        pose: Pose,
        scale: f64,
    },
    /// Points in the sending agent's frame.
    TileUpload {
        agent: u32,
        timestamp: f64,
        points: Vec<Vector3<f64>>,
    },
    RelPoseBroadcast {
        version: u64,
        cores: CoreTransforms,
    },
    CandidateRequest {
        agent: u32,
        frames: Vec<FrameId>,
    },
    CandidateResponse {
        agent: u32,
        records: Vec<FrameRecord>,
    },
    AgentDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    RegistrationUpdate = 1,
    PoseUpdate = 2,
    TileUpload = 3,
    RelPoseBroadcast = 4,
    CandidateRequest = 5,
    CandidateResponse = 6,
    AgentDone = 7,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::RegistrationUpdate,
        Variant::PoseUpdate,
        Variant::TileUpload,
        Variant::RelPoseBroadcast,
        Variant::CandidateRequest,
        Variant::CandidateResponse,
        Variant::AgentDone,
    ];

    pub fn from_tag(tag: u16) -> Option<Self> {
        Self::ALL.into_iter().find(|v| *v as u16 == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::RegistrationUpdate => "registration_update",
            Variant::PoseUpdate => "pose_update",
            Variant::TileUpload => "tile_upload",
            Variant::RelPoseBroadcast => "rel_pose_broadcast",
            Variant::CandidateRequest => "candidate_request",
            Variant::CandidateResponse => "candidate_response",
            Variant::AgentDone => "agent_done",
        }
    }
}

impl Message {
    pub fn variant(&self) -> Variant {
        match self {
            Message::RegistrationUpdate(_) => Variant::RegistrationUpdate,
            Message::PoseUpdate { .. } => Variant::PoseUpdate,
            Message::TileUpload { .. } => Variant::TileUpload,
            Message::RelPoseBroadcast { .. } => Variant::RelPoseBroadcast,
            Message::CandidateRequest { .. } => Variant::CandidateRequest,
            Message::CandidateResponse { .. } => Variant::CandidateResponse,
            Message::AgentDone => Variant::AgentDone,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub seq: u64,
    pub sender: u32,
    pub message: Message,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::Contract("sequence longer than u32".into()))?;
        self.u32(n);
        Ok(())
    }
    fn quat(&mut self, q: &UnitQuaternion<f64>) {
        let c = q.quaternion();
        for v in [c.w, c.i, c.j, c.k] {
            self.f64(v);
        }
    }
    fn vec3(&mut self, v: &Vector3<f64>) {
        for c in v.iter() {
            self.f64(*c);
        }
    }
    fn pose(&mut self, p: &Pose) {
        self.quat(&p.rotation);
        self.vec3(&p.translation);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Decode {
            offset: self.at,
            reason: reason.into(),
        })
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return self.fail(alloc::format!("truncated: need {} more bytes", n));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => {
                self.at -= 1;
                self.fail("boolean byte not 0 or 1")
            }
        }
    }
    /// Element count, checked against the bytes left so a garbled count
    /// cannot trigger a huge allocation.
    fn count(&mut self, min_element: usize) -> Result<usize> {
        let at = self.at;
        let n = self.u32()? as usize;
        if n.saturating_mul(min_element) > self.bytes.len() - self.at {
            self.at = at;
            return self.fail(alloc::format!("count {} exceeds remaining payload", n));
        }
        Ok(n)
    }
    fn quat(&mut self) -> Result<UnitQuaternion<f64>> {
        let at = self.at;
        let (w, x, y, z) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        let q = Quaternion::new(w, x, y, z);
        if !((q.norm() - 1.0).abs() <= 1e-9) {
            self.at = at;
            return self.fail("quaternion is not unit length");
        }
        Ok(UnitQuaternion::new_unchecked(q))
    }
    fn vec3(&mut self) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    /// Built field by field: `Pose::new` renormalizes and would change bits.
    fn pose(&mut self) -> Result<Pose> {
        Ok(Pose {
            rotation: self.quat()?,
            translation: self.vec3()?,
        })
    }
}

fn encode_payload(w: &mut Writer, m: &Message) -> Result<()> {
    match m {
        Message::RegistrationUpdate(r) => {
            w.u32(r.agent);
            w.quat(&r.r_lw);
            w.vec3(&r.local_origin);
            let g = &r.gnss_origin;
            for v in [g.timestamp, g.latitude, g.longitude, g.altitude, r.scale] {
                w.f64(v);
            }
            w.u8(r.is_central as u8);
        }
        Message::PoseUpdate {
            agent,
            timestamp,
            pose,
            scale,
        } => {
            w.u32(*agent);
            w.f64(*timestamp);
            w.pose(pose);
            w.f64(*scale);
        }
        Message::TileUpload {
            agent,
            timestamp,
            points,
        } => {
            w.u32(*agent);
            w.f64(*timestamp);
            w.len(points.len())?;
            for p in points {
                w.vec3(p);
            }
        }
        Message::RelPoseBroadcast { version, cores } => {
            w.u64(*version);
            w.u32(cores.central);
            w.len(cores.cores.len())?;
            for (agent, pose) in &cores.cores {
                w.u32(*agent);
                w.pose(pose);
            }
        }
        Message::CandidateRequest { agent, frames } => {
            w.u32(*agent);
            w.len(frames.len())?;
            for f in frames {
                w.u32(*f);
            }
        }
        Message::CandidateResponse { agent, records } => {
            w.u32(*agent);
            w.len(records.len())?;
            for r in records {
                w.u32(r.frame);
                w.f64(r.timestamp);
                w.pose(&r.pose);
                w.f64(r.scale);
                w.len(r.features.len())?;
                for (id, u, v) in &r.features {
                    w.u64(*id);
                    w.f64(*u);
                    w.f64(*v);
                }
            }
        }
        Message::AgentDone => {}
    }
    Ok(())
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::with_capacity(64));
    w.u32(0);
    w.0.extend_from_slice(&(frame.message.variant() as u16).to_le_bytes());
    w.u64(frame.seq);
    w.u32(frame.sender);
    encode_payload(&mut w, &frame.message)?;
    let len = w.0.len();
    if len > MAX_FRAME_LEN {
        return Err(Error::Contract(alloc::format!("frame of {} bytes exceeds limit", len)));
    }
    w.0[..4].copy_from_slice(&(len as u32).to_le_bytes());
    Ok(w.0)
}

/// Encoded length without building the frame.
pub fn frame_len(frame: &Frame) -> Result<usize> {
    encode_frame(frame).map(|b| b.len())
}

fn decode_payload(r: &mut Reader<'_>, variant: Variant) -> Result<Message> {
    Ok(match variant {
        Variant::RegistrationUpdate => {
            let agent = r.u32()?;
            let r_lw = r.quat()?;
            let local_origin = r.vec3()?;
            let (t, lat, lon, alt) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let scale = r.f64()?;
            let is_central = r.bool()?;
            Message::RegistrationUpdate(AgentRegistration {
                agent,
                r_lw,
                local_origin,
                gnss_origin: GnssFix::new(t, lat, lon, alt),
                scale,
                is_central,
            })
        }
        Variant::PoseUpdate => Message::PoseUpdate {
            agent: r.u32()?,
            timestamp: r.f64()?,
            pose: r.pose()?,
            scale: r.f64()?,
        },
        Variant::TileUpload => {
            let agent = r.u32()?;
            let timestamp = r.f64()?;
            let n = r.count(24)?;
            let mut points = Vec::with_capacity(n);
            for _ in 0..n {
                points.push(r.vec3()?);
            }
            Message::TileUpload {
                agent,
                timestamp,
                points,
            }
        }
        Variant::RelPoseBroadcast => {
            let version = r.u64()?;
            let central = r.u32()?;
            let n = r.count(60)?;
            let mut cores = BTreeMap::new();
            let mut last = None;
            for _ in 0..n {
                let at = r.at;
                let agent = r.u32()?;
                // Map order is the only canonical order.
                if last.is_some_and(|l| agent <= l) || agent == central {
                    r.at = at;
                    return r.fail("core transform agents out of order");
                }
                last = Some(agent);
                cores.insert(agent, r.pose()?);
            }
            Message::RelPoseBroadcast {
                version,
                cores: CoreTransforms { central, cores },
            }
        }
        Variant::CandidateRequest => {
            let agent = r.u32()?;
            let n = r.count(4)?;
            let mut frames = Vec::with_capacity(n);
            for _ in 0..n {
                frames.push(r.u32()?);
            }
            Message::CandidateRequest { agent, frames }
        }
        Variant::CandidateResponse => {
            let agent = r.u32()?;
            let n = r.count(80)?;
            let mut records = Vec::with_capacity(n);
            for _ in 0..n {
                let frame = r.u32()?;
                let timestamp = r.f64()?;
                let pose = r.pose()?;
                let scale = r.f64()?;
                let m = r.count(24)?;
                let mut features = Vec::with_capacity(m);
                for _ in 0..m {
                    features.push((r.u64()?, r.f64()?, r.f64()?));
                }
                records.push(FrameRecord {
                    frame,
                    timestamp,
                    pose,
                    scale,
                    features,
                });
            }
            Message::CandidateResponse { agent, records }
        }
        Variant::AgentDone => Message::AgentDone,
    })
}

/// Decodes one frame from the front of `bytes`, returning it with the number
/// of bytes it occupied.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize)> {
    let mut r = Reader { bytes, at: 0 };
    let len = r.u32()? as usize;
    if len < HEADER_LEN || len > MAX_FRAME_LEN {
        return Err(Error::Decode {
            offset: 0,
            reason: alloc::format!("frame length {} out of range", len),
        });
    }
    if len > bytes.len() {
        return Err(Error::Decode {
            offset: bytes.len(),
            reason: alloc::format!("truncated: frame needs {} bytes, have {}", len, bytes.len()),
        });
    }
    let mut r = Reader {
        bytes: &bytes[..len],
        at: 4,
    };
    let tag = r.u16()?;
    let Some(variant) = Variant::from_tag(tag) else {
        return Err(Error::Decode {
            offset: 4,
            reason: alloc::format!("unknown variant tag {}", tag),
        });
    };
    let seq = r.u64()?;
    let sender = r.u32()?;
    let message = decode_payload(&mut r, variant)?;
    if r.at != len {
        return r.fail(alloc::format!("{} trailing payload bytes", len - r.at));
    }
    Ok((Frame { seq, sender, message }, len))
}

/// Stamps outgoing frames with strictly increasing sequence numbers.
#[derive(Debug, Clone, Default)]
pub struct Sequencer {
    next: BTreeMap<u32, u64>,
}

impl Sequencer {
    pub fn stamp(&mut self, sender: u32, message: Message) -> Frame {
        let seq = self.next.entry(sender).or_insert(0);
        *seq += 1;
        Frame {
            seq: *seq,
            sender,
            message,
        }
    }
}

/// Rejects frames whose sequence number does not increase per sender.
#[derive(Debug, Clone, Default)]
pub struct SequenceCheck {
    last: BTreeMap<u32, u64>,
}

impl SequenceCheck {
    pub fn accept(&mut self, frame: &Frame) -> Result<()> {
        let last = self.last.entry(frame.sender).or_insert(0);
        if frame.seq <= *last {
            return Err(Error::Invariant(alloc::format!(
                "sender {} sequence {} after {}",
                frame.sender,
                frame.seq,
                last
            )));
        }
        *last = frame.seq;
        Ok(())
    }
}

/// Byte totals per variant; `total` always equals the sum of the rest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BandwidthLedger {
    pub bytes: BTreeMap<Variant, u64>,
    pub counts: BTreeMap<Variant, u64>,
    pub total: u64,
}

impl BandwidthLedger {
    pub fn record(&mut self, variant: Variant, len: usize) {
        *self.bytes.entry(variant).or_default() += len as u64;
        *self.counts.entry(variant).or_default() += 1;
        self.total += len as u64;
    }

    pub fn conserved(&self) -> bool {
        self.bytes.values().sum::<u64>() == self.total
    }
}

/// Totals over already-encoded frames.
pub fn bandwidth_report<'a>(frames: impl IntoIterator<Item = &'a [u8]>) -> Result<BandwidthLedger> {
    let mut ledger = BandwidthLedger::default();
    for f in frames {
        let (frame, len) = decode_frame(f)?;
        ledger.record(frame.message.variant(), len);
    }
    Ok(ledger)
}
