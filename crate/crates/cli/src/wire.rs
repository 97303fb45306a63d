//! Control protocol between the run orchestrator and node shell processes.
//!
//! The orchestrator is the network: node shells never talk to each other.
//! Every exchange is strict request-response over one TCP stream per node,
//! which keeps a distributed run in lockstep with the simulator. Control
//! frames wrap the service's own wire frames:
//!
//! ```text
//! u32 len (tag + body) | u8 tag | body
//! ```
//!
//! `Deliver` and `Outputs` carry service frames verbatim, so the real
//! transport codec is on the path for every message a node handles.

use anyhow::{bail, Context, Result};
use ccsvc_core::codec::{Dec, Enc};
use ccsvc_core::model::{Cen, Csn, Key};
use ccsvc_core::storage::StoredValue;
use ccsvc_core::transport::{decode_frame, encode_frame, Envelope, FrameOutcome};
use std::io::{Read, Write};
use std::net::TcpStream;

pub const TAG_DELIVER: u8 = 0;
pub const TAG_TICK: u8 = 1;
pub const TAG_SHUTDOWN: u8 = 2;
pub const TAG_OUTPUTS: u8 = 3;
pub const TAG_END_REPORT_REQ: u8 = 4;
pub const TAG_END_REPORT: u8 = 5;
pub const TAG_REGISTER: u8 = 6;
pub const TAG_QUERY_EPOCH: u8 = 7;
pub const TAG_EPOCH_INFO: u8 = 8;

pub const ROLE_CC: u8 = 0;
pub const ROLE_STORAGE: u8 = 1;

pub fn write_ctrl(stream: &mut TcpStream, tag: u8, body: &[u8]) -> Result<()> {
    let len = (1 + body.len()) as u32;
    let mut frame = Vec::with_capacity(5 + body.len());
    frame.extend_from_slice(&len.to_le_bytes());
    frame.push(tag);
    frame.extend_from_slice(body);
    stream.write_all(&frame).context("write control frame")?;
    Ok(())
}

pub fn read_ctrl(stream: &mut TcpStream) -> Result<(u8, Vec<u8>)> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf).context("read control length")?;
    let len = u32::from_le_bytes(len_buf) as usize;
    if len == 0 {
        bail!("zero-length control frame");
    }
    let mut rest = vec![0u8; len];
    stream.read_exact(&mut rest).context("read control body")?;
    let tag = rest[0];
    rest.remove(0);
    Ok((tag, rest))
}

/// One request-response round trip.
pub fn rpc(stream: &mut TcpStream, tag: u8, body: &[u8]) -> Result<(u8, Vec<u8>)> {
    write_ctrl(stream, tag, body)?;
    read_ctrl(stream)
}

// ---- body codecs ----

pub fn encode_register(role: u8, id: u32) -> Vec<u8> {
    let mut e = Enc::new();
    e.put_u8(role);
    e.put_u32(id);
    e.into_bytes()
}

pub fn decode_register(body: &[u8]) -> Result<(u8, u32)> {
    let mut d = Dec::new(body);
    let role = d.get_u8()?;
    let id = d.get_u32()?;
    d.finish()?;
    Ok((role, id))
}

pub fn encode_deliver(env: &Envelope) -> Vec<u8> {
    encode_frame(env)
}

pub fn decode_deliver(body: &[u8]) -> Result<Envelope> {
    match decode_frame(body)? {
        FrameOutcome::Frame { env, used } if used == body.len() => Ok(env),
        FrameOutcome::Frame { .. } => bail!("trailing bytes after delivered frame"),
        FrameOutcome::Incomplete(_) => bail!("truncated delivered frame"),
    }
}

/// Everything a node hands back from one `on_message`/`on_tick` call: its
/// outbound envelopes plus, for storage, the writes that became visible.
pub fn encode_outputs(envs: &[Envelope], applied: &[(Cen, Csn)]) -> Vec<u8> {
    let mut e = Enc::new();
    e.put_count(envs.len());
    for env in envs {
        e.put_bytes(&encode_frame(env));
    }
    e.put_count(applied.len());
    for (cen, csn) in applied {
        e.put_u64(cen.0);
        e.put_u64(csn.local_time);
        e.put_u32(csn.node_id);
    }
    e.into_bytes()
}

pub fn decode_outputs(body: &[u8]) -> Result<(Vec<Envelope>, Vec<(Cen, Csn)>)> {
    let mut d = Dec::new(body);
    let n = d.get_count()?;
    let mut envs = Vec::with_capacity(n);
    for _ in 0..n {
        let bytes = d.get_bytes()?;
        envs.push(decode_deliver(&bytes)?);
    }
    let m = d.get_count()?;
    let mut applied = Vec::with_capacity(m);
    for _ in 0..m {
        let cen = Cen(d.get_u64()?);
        let time = d.get_u64()?;
        let node = d.get_u32()?;
        applied.push((cen, Csn::new(time, node)));
    }
    d.finish()?;
    Ok((envs, applied))
}

pub fn encode_epoch_info(open_cen: Cen, active: bool, shard_version: u32) -> Vec<u8> {
    let mut e = Enc::new();
    e.put_u64(open_cen.0);
    e.put_bool(active);
    e.put_u32(shard_version);
    e.into_bytes()
}

pub fn decode_epoch_info(body: &[u8]) -> Result<(Cen, bool, u32)> {
    let mut d = Dec::new(body);
    let open = Cen(d.get_u64()?);
    let active = d.get_bool()?;
    let version = d.get_u32()?;
    d.finish()?;
    Ok((open, active, version))
}

/// Final state of one storage host, pulled once after the run settles.
pub struct EndReport {
    pub digest: u32,
    pub watermark: Cen,
    pub rows: Vec<(Key, StoredValue)>,
}

pub fn encode_end_report(r: &EndReport) -> Vec<u8> {
    let mut e = Enc::new();
    e.put_u32(r.digest);
    e.put_u64(r.watermark.0);
    e.put_count(r.rows.len());
    for (key, v) in &r.rows {
        e.put_bytes(key);
        e.put_bytes(&v.value);
        e.put_u64(v.writer_cen.0);
        e.put_u64(v.writer_csn.local_time);
        e.put_u32(v.writer_csn.node_id);
        e.put_bool(v.deleted);
    }
    e.into_bytes()
}

pub fn decode_end_report(body: &[u8]) -> Result<EndReport> {
    let mut d = Dec::new(body);
    let digest = d.get_u32()?;
    let watermark = Cen(d.get_u64()?);
    let n = d.get_count()?;
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let key = d.get_bytes()?;
        let value = d.get_bytes()?;
        let writer_cen = Cen(d.get_u64()?);
        let time = d.get_u64()?;
        let node = d.get_u32()?;
        let deleted = d.get_bool()?;
        rows.push((
            key,
            StoredValue {
                value,
                writer_csn: Csn::new(time, node),
                writer_cen,
                deleted,
            },
        ));
    }
    d.finish()?;
    Ok(EndReport {
        digest,
        watermark,
        rows,
    })
}
