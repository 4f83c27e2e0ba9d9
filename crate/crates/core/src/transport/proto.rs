//! Message conventions layered on [`WireFrame`].
//!
//! - ENQUEUE carries one feed; the server answers with an ENQUEUE frame
//!   echoing the metadata and no payload once the feed is accepted. A run
//!   of feeds of one batch with consecutive sequence numbers may travel as
//!   a `!members` list starting at the frame's `feed_seq`; the server
//!   enqueues them in order and answers once, with an ERROR for the first
//!   feed that fails (later ones are not enqueued).
//! - DEQ_REQ has no metadata; DEQ_RESP carries the feed, or for aggregates
//!   the aggregate metadata and a leading `!members` entry (member count u32,
//!   then one u32 entry count per member) followed by all member entries.
//! - CREDIT uses the link id as gate id and metadata `[(batch, 1)]`.
//! - ERROR carries `kind` and `message` entries plus error-specific fields.
//! - HELLO carries `protocol_version` (u16) and `device`.
//! - Gate id [`FRONTEND_GATE`] addresses the request front end: ENQUEUE with
//!   a member list submits a request and is answered with `[(batch, n)]`;
//!   DEQ_REQ with `[(batch, 1)]` collects it.

use crate::error::{GateError, MetadataError};
use crate::model::{AggregateFeed, Delivery, Feed, FeedMetadata, MetadataFrame, Payload};

use super::wire::{FrameKind, WireFrame, PROTOCOL_VERSION};

pub const FRONTEND_GATE: u32 = u32::MAX;

const MEMBERS_ENTRY: &str = "!members";

pub fn metadata_frames(md: &FeedMetadata) -> Vec<MetadataFrame> {
    md.frames().collect()
}

pub fn frame_metadata(f: &WireFrame) -> Result<FeedMetadata, String> {
    let (batch, partition) = match f.frames.as_slice() {
        [batch] => (*batch, None),
        [batch, part] => (*batch, Some(*part)),
        _ => return Err(format!("{:?} frame without feed metadata", f.kind)),
    };
    FeedMetadata::from_frames(batch, partition, f.feed_seq).map_err(|e| e.to_string())
}

pub fn hello(device: &str) -> WireFrame {
    WireFrame {
        payload: vec![
            ("protocol_version".into(), PROTOCOL_VERSION.to_le_bytes().to_vec()),
            ("device".into(), device.as_bytes().to_vec()),
        ],
        ..WireFrame::control(FrameKind::Hello, 0)
    }
}

/// Protocol version and device name of a HELLO frame.
pub fn parse_hello(f: &WireFrame) -> Result<(u16, String), String> {
    if f.kind != FrameKind::Hello {
        return Err(format!("expected HELLO, got {:?}", f.kind));
    }
    let p = Payload::from(f.payload.clone());
    let version = p
        .get("protocol_version")
        .and_then(|v| <[u8; 2]>::try_from(v).ok())
        .map(u16::from_le_bytes)
        .ok_or("HELLO without protocol_version")?;
    let device = p
        .get("device")
        .map(|d| String::from_utf8_lossy(d).into_owned())
        .ok_or("HELLO without device")?;
    Ok((version, device))
}

pub fn enqueue(gate: u32, feed: &Feed) -> WireFrame {
    WireFrame {
        kind: FrameKind::Enqueue,
        gate_id: gate,
        frames: metadata_frames(&feed.metadata),
        feed_seq: feed.metadata.feed_seq,
        payload: feed.payload.entries().to_vec(),
    }
}

/// ENQUEUE of a run of feeds; all share `feeds[0]`'s metadata frames and
/// number on from its sequence number.
pub fn enqueue_run(gate: u32, feeds: &[Feed]) -> WireFrame {
    match feeds {
        [single] => enqueue(gate, single),
        _ => members(
            FrameKind::Enqueue,
            gate,
            &feeds[0].metadata,
            feeds.iter().map(|f| f.payload.clone()).collect(),
        ),
    }
}

/// Whether `next` may follow `prev` in one ENQUEUE run.
pub fn continues_run(prev: &Feed, next: &Feed) -> bool {
    prev.metadata.feed_seq.checked_add(1) == Some(next.metadata.feed_seq)
        && prev.metadata.with_seq(0) == next.metadata.with_seq(0)
}

pub fn into_feed(f: WireFrame) -> Result<Feed, String> {
    let md = frame_metadata(&f)?;
    Ok(Feed::new(md, Payload::from(f.payload)))
}

/// Feeds of an ENQUEUE frame, single or a run.
pub fn into_feeds(f: WireFrame) -> Result<Vec<Feed>, String> {
    let md = frame_metadata(&f)?;
    match f.payload.first() {
        Some((name, _)) if name == MEMBERS_ENTRY => {
            let members = split_members(f.payload)?;
            let last = md.feed_seq.checked_add(members.len() as u64);
            if last.is_none() {
                return Err("run of feeds overflows the sequence number".into());
            }
            Ok(members
                .into_iter()
                .enumerate()
                .map(|(i, p)| Feed::new(md.with_seq(md.feed_seq + i as u64), p))
                .collect())
        }
        _ => Ok(vec![Feed::new(md, Payload::from(f.payload))]),
    }
}

/// Acknowledgement of an ENQUEUE: same header, no payload.
pub fn ack(request: &WireFrame) -> WireFrame {
    WireFrame {
        kind: request.kind,
        gate_id: request.gate_id,
        frames: request.frames.clone(),
        feed_seq: request.feed_seq,
        payload: Vec::new(),
    }
}

pub fn dequeue_request(gate: u32) -> WireFrame {
    WireFrame::control(FrameKind::DeqReq, gate)
}

pub fn delivery(gate: u32, d: Delivery) -> WireFrame {
    match d {
        Delivery::Feed(f) => WireFrame {
            kind: FrameKind::DeqResp,
            ..enqueue(gate, &f)
        },
        Delivery::Aggregate(a) => members(FrameKind::DeqResp, gate, &a.metadata, a.members),
    }
}

pub fn into_delivery(f: WireFrame) -> Result<Delivery, String> {
    let md = frame_metadata(&f)?;
    match f.payload.first() {
        Some((name, _)) if name == MEMBERS_ENTRY => Ok(Delivery::Aggregate(AggregateFeed {
            metadata: md,
            members: split_members(f.payload)?,
        })),
        _ => Ok(Delivery::Feed(Feed::new(md, Payload::from(f.payload)))),
    }
}

/// Frame carrying a list of payloads behind a `!members` entry.
pub fn members(kind: FrameKind, gate: u32, md: &FeedMetadata, list: Vec<Payload>) -> WireFrame {
    let mut header = Vec::with_capacity(4 + 4 * list.len());
    header.extend_from_slice(&(list.len() as u32).to_le_bytes());
    for m in &list {
        header.extend_from_slice(&(m.len() as u32).to_le_bytes());
    }
    let mut payload = vec![(MEMBERS_ENTRY.to_owned(), header)];
    payload.extend(list.into_iter().flat_map(Payload::into_entries));
    WireFrame {
        kind,
        gate_id: gate,
        frames: metadata_frames(md),
        feed_seq: md.feed_seq,
        payload,
    }
}

pub fn split_members(entries: Vec<(String, Vec<u8>)>) -> Result<Vec<Payload>, String> {
    let mut it = entries.into_iter();
    let header = match it.next() {
        Some((name, value)) if name == MEMBERS_ENTRY => value,
        _ => return Err("member list without `!members` header".into()),
    };
    let words: Vec<u32> = header
        .chunks(4)
        .map(|c| <[u8; 4]>::try_from(c).map(u32::from_le_bytes))
        .collect::<Result<_, _>>()
        .map_err(|_| "`!members` header is not a list of u32")?;
    let (&count, sizes) = words.split_first().ok_or("empty `!members` header")?;
    if sizes.len() != count as usize {
        return Err(format!("`!members` announces {count} members, lists {}", sizes.len()));
    }
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let entries: Vec<_> = it.by_ref().take(n as usize).collect();
        if entries.len() != n as usize {
            return Err("member list shorter than announced".into());
        }
        out.push(Payload::from(entries));
    }
    if it.next().is_some() {
        return Err("member list longer than announced".into());
    }
    Ok(out)
}

pub fn credit(link: u32, batch: u64) -> WireFrame {
    WireFrame {
        frames: vec![MetadataFrame { id: batch, arity: 1 }],
        ..WireFrame::control(FrameKind::Credit, link)
    }
}

pub fn shutdown(gate: u32) -> WireFrame {
    WireFrame::control(FrameKind::Shutdown, gate)
}

/// ERROR frame with a free-form kind, for failures outside gate semantics.
pub fn error(gate: u32, kind: &str, message: &str) -> WireFrame {
    WireFrame {
        payload: vec![
            ("kind".into(), kind.as_bytes().to_vec()),
            ("message".into(), message.as_bytes().to_vec()),
        ],
        ..WireFrame::control(FrameKind::Error, gate)
    }
}

/// Kind and message of an ERROR frame.
pub fn parse_error(f: &WireFrame) -> (String, String) {
    let text = |name: &str| {
        f.payload
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| String::from_utf8_lossy(v).into_owned())
            .unwrap_or_default()
    };
    (text("kind"), text("message"))
}

fn sep_list(v: &[String]) -> Vec<u8> {
    v.join("\0").into_bytes()
}

pub fn gate_error(gate: u32, e: &GateError) -> WireFrame {
    let u = |v: u64| v.to_le_bytes().to_vec();
    let s = |v: &str| v.as_bytes().to_vec();
    let (kind, fields): (&str, Vec<(&str, Vec<u8>)>) = match e {
        GateError::Metadata(MetadataError::InvalidArity) => ("metadata.arity", vec![]),
        GateError::Metadata(MetadataError::NestingLimit) => ("metadata.nesting", vec![]),
        GateError::Metadata(MetadataError::NoPartitionFrame) => ("metadata.no_partition", vec![]),
        GateError::DuplicateFeed {
            gate,
            batch,
            seq,
            arity,
        } => (
            "duplicate",
            vec![("gate", s(gate)), ("batch", u(*batch)), ("seq", u(*seq)), ("arity", u(*arity))],
        ),
        GateError::SignatureError {
            gate,
            expected,
            got,
        } => (
            "signature",
            vec![("gate", s(gate)), ("expected", sep_list(expected)), ("got", sep_list(got))],
        ),
        GateError::ArityMismatch {
            gate,
            batch,
            expected,
            got,
        } => (
            "arity_mismatch",
            vec![
                ("gate", s(gate)),
                ("batch", u(*batch)),
                ("expected", u(*expected)),
                ("got", u(*got)),
            ],
        ),
        GateError::Closed(gate) => ("closed", vec![("gate", s(gate))]),
        GateError::ModeMismatch { gate, op } => ("mode", vec![("gate", s(gate)), ("op", s(op))]),
        GateError::ConnectionLost(m) => ("connection_lost", vec![("detail", s(m))]),
        GateError::Remote(m) => ("remote", vec![("detail", s(m))]),
    };
    let mut f = error(gate, kind, &e.to_string());
    f.payload
        .extend(fields.into_iter().map(|(n, v)| (n.to_owned(), v)));
    f
}

const MODE_OPS: [&str; 4] = [
    "plain dequeue",
    "aggregate dequeue",
    "partition dequeue",
    "reassembly enqueue",
];

/// Rebuilds the gate error an ERROR frame describes; unknown kinds become
/// [`GateError::Remote`].
pub fn into_gate_error(f: &WireFrame) -> GateError {
    let p = Payload::from(f.payload.clone());
    let text = |n: &str| p.get(n).map(|v| String::from_utf8_lossy(v).into_owned());
    let num = |n: &str| p.get(n).and_then(|v| <[u8; 8]>::try_from(v).ok()).map(u64::from_le_bytes);
    let list = |n: &str| {
        text(n).map(|t| {
            if t.is_empty() {
                Vec::new()
            } else {
                t.split('\0').map(str::to_owned).collect()
            }
        })
    };
    let (kind, message) = parse_error(f);
    let rebuilt = match kind.as_str() {
        "metadata.arity" => Some(MetadataError::InvalidArity.into()),
        "metadata.nesting" => Some(MetadataError::NestingLimit.into()),
        "metadata.no_partition" => Some(MetadataError::NoPartitionFrame.into()),
        "duplicate" => (|| {
            Some(GateError::DuplicateFeed {
                gate: text("gate")?,
                batch: num("batch")?,
                seq: num("seq")?,
                arity: num("arity")?,
            })
        })(),
        "signature" => (|| {
            Some(GateError::SignatureError {
                gate: text("gate")?,
                expected: list("expected")?,
                got: list("got")?,
            })
        })(),
        "arity_mismatch" => (|| {
            Some(GateError::ArityMismatch {
                gate: text("gate")?,
                batch: num("batch")?,
                expected: num("expected")?,
                got: num("got")?,
            })
        })(),
        "closed" => text("gate").map(GateError::Closed),
        "mode" => (|| {
            let op = text("op")?;
            let op = MODE_OPS.into_iter().find(|o| *o == op)?;
            Some(GateError::ModeMismatch {
                gate: text("gate")?,
                op,
            })
        })(),
        "connection_lost" => text("detail").map(GateError::ConnectionLost),
        "remote" => text("detail").map(GateError::Remote),
        _ => None,
    };
    rebuilt.unwrap_or(GateError::Remote(message))
}
