//! Local epoch-ordered commit log: one logical log per (CC node, engine),
//! stored as segment files, with CRC-checked entries, torn-tail recovery,
//! and gap-filling reads for LogPull.
//!
//! On-disk format (normative):
//!
//! ```text
//! segment file  := header frame*
//! header        := magic "CCLG" (4 bytes) | version u16 | node_id u32
//!                  | engine u16 | first_lsn u64          -- 20 bytes total
//! frame         := len u32 | entry bytes (len of them)
//! entry bytes   := canonical LogEntry encoding, crc field included
//! ```
//!
//! All integers little-endian. A segment holds consecutive LSNs starting at
//! `first_lsn`. Recovery scans frames until the first torn or corrupt one
//! and truncates the file there; an interrupted append therefore loses only
//! the entry that was never acknowledged as durable.
//!
//! Only committed transactions produce entries, in (cen, csn) order. The
//! append path flushes (and fsyncs, under the sync policy) before returning,
//! so a Decision is never released before its writes are locally durable.

use crate::codec::{crc32, CodecError, Dec, Enc, Wire};
use crate::model::{Cen, Csn, EngineTag, NodeId, WriteRecord};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write as IoWrite};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Log sequence number: strictly increasing per (node, engine), starting
/// at 1.
pub type Lsn = u64;

const SEGMENT_MAGIC: &[u8; 4] = b"CCLG";
const SEGMENT_VERSION: u16 = 1;
const HEADER_LEN: usize = 20;

/// Default segment roll-over size.
pub const DEFAULT_SEGMENT_BYTES: u64 = 1 << 20;

/// One committed transaction's writes for one engine, as logged.
///
/// `crc` covers the canonical encoding of every other field and is verified
/// on every read back from disk or the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub lsn: Lsn,
    pub cen: Cen,
    pub csn: Csn,
    pub engine: EngineTag,
    pub writes: Vec<WriteRecord>,
    pub crc: u32,
}

impl LogEntry {
    pub fn new(lsn: Lsn, cen: Cen, csn: Csn, engine: EngineTag, writes: Vec<WriteRecord>) -> Self {
        let mut entry = LogEntry {
            lsn,
            cen,
            csn,
            engine,
            writes,
            crc: 0,
        };
        entry.crc = entry.body_crc();
        entry
    }

    fn body_crc(&self) -> u32 {
        let mut e = Enc::new();
        e.put_u64(self.lsn);
        self.cen.encode(&mut e);
        self.csn.encode(&mut e);
        self.engine.encode(&mut e);
        self.writes.encode(&mut e);
        crc32(e.as_bytes())
    }

    pub fn verify(&self) -> bool {
        self.crc == self.body_crc()
    }
}

/// Layout: lsn u64, cen, csn, engine, writes, crc u32.
impl Wire for LogEntry {
    fn encode(&self, e: &mut Enc) {
        e.put_u64(self.lsn);
        self.cen.encode(e);
        self.csn.encode(e);
        self.engine.encode(e);
        self.writes.encode(e);
        e.put_u32(self.crc);
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(LogEntry {
            lsn: d.get_u64()?,
            cen: Cen::decode(d)?,
            csn: Csn::decode(d)?,
            engine: EngineTag::decode(d)?,
            writes: Vec::decode(d)?,
            crc: d.get_u32()?,
        })
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log segment corrupt beyond recovery: {0}")]
    Corrupt(String),
    #[error("pull from lsn {requested} but log tail is {tail}: requester has diverged")]
    LsnAhead { requested: Lsn, tail: Lsn },
}

/// Fsync policy for the append path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncPolicy {
    /// fsync every epoch append before returning. Live-mode default.
    EveryEpoch,
    /// Flush to the OS only. Used by the in-process simulator, where the
    /// durability boundary is modeled rather than physical.
    Buffered,
}

enum Media {
    Mem,
    Dir { dir: PathBuf, sync: SyncPolicy },
}

struct EngineLog {
    entries: Vec<LogEntry>,
    writer: Option<SegmentWriter>,
}

impl EngineLog {
    fn tail(&self) -> Lsn {
        self.entries.len() as Lsn
    }
}

struct SegmentWriter {
    file: File,
    written: u64,
    index: u32,
}

/// Append-only committed-write log for one CC node, split per engine.
///
/// Keeps a full in-memory mirror of every entry (the log is the recovery
/// and push source, served randomly by LSN) on top of the durable segment
/// files. In-memory mode drops the file layer and models durability, for
/// the simulator.
pub struct LogStore {
    node: NodeId,
    media: Media,
    segment_bytes: u64,
    engines: BTreeMap<EngineTag, EngineLog>,
}

impl LogStore {
    /// Pure in-memory log (simulation).
    pub fn in_memory(node: NodeId) -> Self {
        Self {
            node,
            media: Media::Mem,
            segment_bytes: DEFAULT_SEGMENT_BYTES,
            engines: BTreeMap::new(),
        }
    }

    /// Opens (or creates) the durable log under `dir`, replaying existing
    /// segments and truncating any torn tail.
    pub fn open_dir(dir: impl Into<PathBuf>, node: NodeId, sync: SyncPolicy) -> Result<Self, LogError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut store = Self {
            node,
            media: Media::Dir { dir: dir.clone(), sync },
            segment_bytes: DEFAULT_SEGMENT_BYTES,
            engines: BTreeMap::new(),
        };
        // Segment files are named engine-<tag>-seg-<index>.log; replay each
        // engine's segments in index order.
        let mut found: BTreeMap<EngineTag, Vec<(u32, PathBuf)>> = BTreeMap::new();
        for dirent in std::fs::read_dir(&dir)? {
            let path = dirent?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if let Some((engine, index)) = parse_segment_name(name) {
                found.entry(engine).or_default().push((index, path));
            }
        }
        for (engine, mut segments) in found {
            segments.sort();
            let mut log = EngineLog {
                entries: Vec::new(),
                writer: None,
            };
            for (index, path) in &segments {
                replay_segment(path, store.node, engine, &mut log)?;
                log.writer = Some(open_segment_for_append(path, *index)?);
            }
            store.engines.insert(engine, log);
        }
        Ok(store)
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    /// For tests: lower the roll-over threshold.
    pub fn set_segment_bytes(&mut self, bytes: u64) {
        self.segment_bytes = bytes;
    }

    /// Next LSN this engine's log will assign.
    pub fn next_lsn(&self, engine: EngineTag) -> Lsn {
        self.engines.get(&engine).map_or(1, |l| l.tail() + 1)
    }

    /// Highest assigned LSN (0 when empty).
    pub fn tail(&self, engine: EngineTag) -> Lsn {
        self.engines.get(&engine).map_or(0, |l| l.tail())
    }

    pub fn engines(&self) -> impl Iterator<Item = EngineTag> + '_ {
        self.engines.keys().copied()
    }

    /// Largest `csn.local_time` in the log; the floor for a recovering
    /// node's tagger, so reissued Csns are impossible.
    pub fn max_local_time(&self) -> u64 {
        self.engines
            .values()
            .flat_map(|l| l.entries.iter())
            .filter(|e| e.csn.node_id == self.node)
            .map(|e| e.csn.local_time)
            .max()
            .unwrap_or(0)
    }

    /// Appends one finalized epoch's committed writes, already filtered by
    /// the global abort set. `committed` must be in csn order; entries land
    /// per engine in that order and become durable before return.
    pub fn append_epoch(
        &mut self,
        cen: Cen,
        committed: &[(Csn, EngineTag, Vec<WriteRecord>)],
    ) -> Result<Vec<LogEntry>, LogError> {
        debug_assert!(
            committed.windows(2).all(|w| w[0].0 < w[1].0),
            "epoch append must be csn-ordered"
        );
        let mut appended = Vec::with_capacity(committed.len());
        for (csn, engine, writes) in committed {
            let log = self.engines.entry(*engine).or_insert(EngineLog {
                entries: Vec::new(),
                writer: None,
            });
            let lsn = log.tail() + 1;
            debug_assert!(
                log.entries.last().map_or(true, |prev| prev.cen <= cen),
                "epoch appends must be cen-ordered"
            );
            let entry = LogEntry::new(lsn, cen, *csn, *engine, writes.clone());
            if let Media::Dir { dir, sync } = &self.media {
                let dir = dir.clone();
                let sync = *sync;
                let segment_bytes = self.segment_bytes;
                write_frame(log, &dir, self.node, *engine, segment_bytes, &entry)?;
                if sync == SyncPolicy::EveryEpoch {
                    // One fsync per epoch batch would suffice; per entry keeps
                    // the code path single and epochs stay small here.
                    if let Some(w) = &log.writer {
                        w.file.sync_data()?;
                    }
                }
            }
            log.entries.push(entry.clone());
            appended.push(entry);
        }
        Ok(appended)
    }

    /// Adopts entries built elsewhere (a takeover leader appended them on
    /// this node's behalf while it was down). Entries at or below the tail
    /// are skipped; the rest must continue the sequence exactly.
    pub fn adopt(&mut self, engine: EngineTag, entries: &[LogEntry]) -> Result<(), LogError> {
        for entry in entries {
            if entry.engine != engine {
                return Err(LogError::Corrupt(format!(
                    "adopt: entry engine {} does not match log {}",
                    entry.engine.0, engine.0
                )));
            }
            if !entry.verify() {
                return Err(LogError::Corrupt(format!(
                    "adopt: bad crc at lsn {}",
                    entry.lsn
                )));
            }
            let tail = self.tail(engine);
            if entry.lsn <= tail {
                continue;
            }
            if entry.lsn != tail + 1 {
                return Err(LogError::Corrupt(format!(
                    "adopt: lsn {} leaves a gap after tail {tail}",
                    entry.lsn
                )));
            }
            let log = self.engines.entry(engine).or_insert(EngineLog {
                entries: Vec::new(),
                writer: None,
            });
            if let Media::Dir { dir, sync } = &self.media {
                let dir = dir.clone();
                let sync = *sync;
                let segment_bytes = self.segment_bytes;
                write_frame(log, &dir, self.node, engine, segment_bytes, entry)?;
                if sync == SyncPolicy::EveryEpoch {
                    if let Some(w) = &log.writer {
                        w.file.sync_data()?;
                    }
                }
            }
            log.entries.push(entry.clone());
        }
        Ok(())
    }

    /// Entries strictly after `after_lsn`, up to `limit`. Serves LogPull.
    pub fn pull(
        &self,
        engine: EngineTag,
        after_lsn: Lsn,
        limit: usize,
    ) -> Result<Vec<LogEntry>, LogError> {
        let tail = self.tail(engine);
        if after_lsn > tail {
            return Err(LogError::LsnAhead {
                requested: after_lsn,
                tail,
            });
        }
        let log = match self.engines.get(&engine) {
            None => return Ok(Vec::new()),
            Some(l) => l,
        };
        let start = after_lsn as usize;
        let end = (start + limit).min(log.entries.len());
        Ok(log.entries[start..end].to_vec())
    }

    /// All entries of one engine log, for push replay after recovery.
    pub fn entries(&self, engine: EngineTag) -> &[LogEntry] {
        self.engines.get(&engine).map_or(&[], |l| &l.entries)
    }
}

fn parse_segment_name(name: &str) -> Option<(EngineTag, u32)> {
    let rest = name.strip_prefix("engine-")?;
    let (tag, rest) = rest.split_once("-seg-")?;
    let index = rest.strip_suffix(".log")?;
    Some((EngineTag(tag.parse().ok()?), index.parse().ok()?))
}

fn segment_path(dir: &Path, engine: EngineTag, index: u32) -> PathBuf {
    dir.join(format!("engine-{}-seg-{:08}.log", engine.0, index))
}

fn encode_header(node: NodeId, engine: EngineTag, first_lsn: Lsn) -> Vec<u8> {
    let mut e = Enc::with_capacity(HEADER_LEN);
    e.put_u8(SEGMENT_MAGIC[0]);
    e.put_u8(SEGMENT_MAGIC[1]);
    e.put_u8(SEGMENT_MAGIC[2]);
    e.put_u8(SEGMENT_MAGIC[3]);
    e.put_u16(SEGMENT_VERSION);
    e.put_u32(node);
    e.put_u16(engine.0);
    e.put_u64(first_lsn);
    e.into_bytes()
}

fn write_frame(
    log: &mut EngineLog,
    dir: &Path,
    node: NodeId,
    engine: EngineTag,
    segment_bytes: u64,
    entry: &LogEntry,
) -> Result<(), LogError> {
    let needs_new = match &log.writer {
        None => true,
        Some(w) => w.written >= segment_bytes,
    };
    if needs_new {
        let index = log.writer.as_ref().map_or(1, |w| w.index + 1);
        let path = segment_path(dir, engine, index);
        let mut file = OpenOptions::new()
            .create_new(true)
            .write(true)
            .open(&path)?;
        let header = encode_header(node, engine, entry.lsn);
        file.write_all(&header)?;
        log.writer = Some(SegmentWriter {
            file,
            written: header.len() as u64,
            index,
        });
    }
    let writer = log.writer.as_mut().unwrap();
    let body = entry.to_bytes();
    let mut frame = Enc::with_capacity(4 + body.len());
    frame.put_u32(body.len() as u32);
    let mut bytes = frame.into_bytes();
    bytes.extend_from_slice(&body);
    writer.file.write_all(&bytes)?;
    writer.written += bytes.len() as u64;
    Ok(())
}

fn open_segment_for_append(path: &Path, index: u32) -> Result<SegmentWriter, LogError> {
    let file = OpenOptions::new().append(true).open(path)?;
    let written = file.metadata()?.len();
    Ok(SegmentWriter {
        file,
        written,
        index,
    })
}

/// Replays one segment into the engine log, truncating a torn or corrupt
/// tail in place. Entries must continue the log contiguously.
fn replay_segment(
    path: &Path,
    node: NodeId,
    engine: EngineTag,
    log: &mut EngineLog,
) -> Result<(), LogError> {
    let mut file = File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    if buf.len() < HEADER_LEN {
        return Err(LogError::Corrupt(format!(
            "{}: shorter than segment header",
            path.display()
        )));
    }
    let mut d = Dec::new(&buf[..HEADER_LEN]);
    let magic = [
        d.get_u8().unwrap(),
        d.get_u8().unwrap(),
        d.get_u8().unwrap(),
        d.get_u8().unwrap(),
    ];
    if &magic != SEGMENT_MAGIC {
        return Err(LogError::Corrupt(format!("{}: bad magic", path.display())));
    }
    let version = d.get_u16().unwrap();
    if version != SEGMENT_VERSION {
        return Err(LogError::Corrupt(format!(
            "{}: unsupported segment version {version}",
            path.display()
        )));
    }
    let seg_node = d.get_u32().unwrap();
    let seg_engine = EngineTag(d.get_u16().unwrap());
    let first_lsn = d.get_u64().unwrap();
    if seg_node != node || seg_engine != engine {
        return Err(LogError::Corrupt(format!(
            "{}: segment belongs to node {seg_node} engine {}",
            path.display(),
            seg_engine.0
        )));
    }
    if first_lsn != log.tail() + 1 {
        return Err(LogError::Corrupt(format!(
            "{}: segment starts at lsn {first_lsn}, log tail is {}",
            path.display(),
            log.tail()
        )));
    }

    // Scan frames; stop at the first torn/corrupt one and truncate there.
    let mut pos = HEADER_LEN;
    let mut valid_end = pos;
    while pos < buf.len() {
        let Some(len_bytes) = buf.get(pos..pos + 4) else {
            break;
        };
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        let Some(body) = buf.get(pos + 4..pos + 4 + len) else {
            break;
        };
        let entry = match LogEntry::from_bytes(body) {
            Ok(e) => e,
            Err(_) => break,
        };
        if !entry.verify() || entry.lsn != log.tail() + 1 {
            break;
        }
        log.entries.push(entry);
        pos += 4 + len;
        valid_end = pos;
    }
    if valid_end < buf.len() {
        let file = OpenOptions::new().write(true).open(path)?;
        file.set_len(valid_end as u64)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn writes(n: u8) -> Vec<WriteRecord> {
        vec![WriteRecord::insert(vec![n], vec![n, n])]
    }

    fn epoch_rows(cen_base: u64, count: u64) -> Vec<(Csn, EngineTag, Vec<WriteRecord>)> {
        (0..count)
            .map(|i| (Csn::new(cen_base * 10 + i, 1), EngineTag(0), writes(i as u8)))
            .collect()
    }

    #[test]
    fn empty_epoch_appends_nothing() {
        let mut log = LogStore::in_memory(1);
        let out = log.append_epoch(Cen(1), &[]).unwrap();
        assert!(out.is_empty());
        assert_eq!(log.tail(EngineTag(0)), 0);
    }

    #[test]
    fn entries_get_consecutive_lsns_in_csn_order() {
        let mut log = LogStore::in_memory(1);
        let out = log.append_epoch(Cen(1), &epoch_rows(1, 3)).unwrap();
        assert_eq!(out.iter().map(|e| e.lsn).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(log.tail(EngineTag(0)), 3);
        assert!(out.iter().all(|e| e.verify()));
    }

    #[test]
    fn engines_have_independent_lsn_sequences() {
        let mut log = LogStore::in_memory(1);
        log.append_epoch(
            Cen(1),
            &[
                (Csn::new(1, 1), EngineTag(0), writes(1)),
                (Csn::new(2, 1), EngineTag(1), writes(2)),
                (Csn::new(3, 1), EngineTag(0), writes(3)),
            ],
        )
        .unwrap();
        assert_eq!(log.tail(EngineTag(0)), 2);
        assert_eq!(log.tail(EngineTag(1)), 1);
    }

    #[test]
    fn reopened_log_yields_identical_entries() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = LogStore::open_dir(dir.path(), 1, SyncPolicy::EveryEpoch).unwrap();
        log.append_epoch(Cen(1), &epoch_rows(1, 2)).unwrap();
        log.append_epoch(Cen(2), &epoch_rows(2, 2)).unwrap();
        let before = log.entries(EngineTag(0)).to_vec();
        drop(log);

        let reopened = LogStore::open_dir(dir.path(), 1, SyncPolicy::EveryEpoch).unwrap();
        assert_eq!(reopened.entries(EngineTag(0)), &before[..]);
        assert_eq!(reopened.tail(EngineTag(0)), 4);
        assert_eq!(reopened.max_local_time(), 21);
    }

    #[test]
    fn appending_after_reopen_continues_the_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = LogStore::open_dir(dir.path(), 3, SyncPolicy::EveryEpoch).unwrap();
        log.append_epoch(Cen(1), &epoch_rows(1, 2)).unwrap();
        drop(log);
        let mut log = LogStore::open_dir(dir.path(), 3, SyncPolicy::EveryEpoch).unwrap();
        let out = log.append_epoch(Cen(2), &epoch_rows(2, 1)).unwrap();
        assert_eq!(out[0].lsn, 3);
    }

    #[test]
    fn torn_tail_is_truncated_on_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = LogStore::open_dir(dir.path(), 3, SyncPolicy::EveryEpoch).unwrap();
        log.append_epoch(Cen(1), &epoch_rows(1, 2)).unwrap();
        drop(log);

        // Simulate a crash mid-append: half a frame at the tail.
        let seg = segment_path(dir.path(), EngineTag(0), 1);
        let mut f = OpenOptions::new().append(true).open(&seg).unwrap();
        f.write_all(&[40, 0, 0, 0, 1, 2, 3]).unwrap();
        drop(f);

        let log = LogStore::open_dir(dir.path(), 3, SyncPolicy::EveryEpoch).unwrap();
        assert_eq!(log.tail(EngineTag(0)), 2);
        assert!(log.entries(EngineTag(0)).iter().all(|e| e.verify()));
    }

    #[test]
    fn corrupt_frame_cuts_the_log_there() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = LogStore::open_dir(dir.path(), 3, SyncPolicy::EveryEpoch).unwrap();
        log.append_epoch(Cen(1), &epoch_rows(1, 3)).unwrap();
        drop(log);

        // Flip one byte inside the last frame's body.
        let seg = segment_path(dir.path(), EngineTag(0), 1);
        let mut bytes = std::fs::read(&seg).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xFF;
        std::fs::write(&seg, &bytes).unwrap();

        let log = LogStore::open_dir(dir.path(), 3, SyncPolicy::EveryEpoch).unwrap();
        assert_eq!(log.tail(EngineTag(0)), 2);
    }

    #[test]
    fn segments_roll_over_and_replay_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = LogStore::open_dir(dir.path(), 3, SyncPolicy::Buffered).unwrap();
        log.set_segment_bytes(64);
        for c in 1..=6u64 {
            log.append_epoch(Cen(c), &epoch_rows(c, 2)).unwrap();
        }
        let before = log.entries(EngineTag(0)).to_vec();
        drop(log);

        let files = std::fs::read_dir(dir.path()).unwrap().count();
        assert!(files > 1, "expected multiple segments, got {files}");
        let reopened = LogStore::open_dir(dir.path(), 3, SyncPolicy::Buffered).unwrap();
        assert_eq!(reopened.entries(EngineTag(0)), &before[..]);
    }

    #[test]
    fn pull_from_tail_is_empty() {
        let mut log = LogStore::in_memory(1);
        log.append_epoch(Cen(1), &epoch_rows(1, 2)).unwrap();
        assert!(log.pull(EngineTag(0), 2, 100).unwrap().is_empty());
    }

    #[test]
    fn pull_returns_exactly_the_gap() {
        let mut log = LogStore::in_memory(1);
        log.append_epoch(Cen(1), &epoch_rows(1, 7)).unwrap();
        let got = log.pull(EngineTag(0), 2, 5).unwrap();
        assert_eq!(got.iter().map(|e| e.lsn).collect::<Vec<_>>(), vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn pull_ahead_of_tail_is_divergence() {
        let mut log = LogStore::in_memory(1);
        log.append_epoch(Cen(1), &epoch_rows(1, 2)).unwrap();
        match log.pull(EngineTag(0), 5, 10) {
            Err(LogError::LsnAhead { requested: 5, tail: 2 }) => {}
            other => panic!("expected LsnAhead, got {other:?}"),
        }
    }

    #[test]
    fn log_entry_crc_detects_tampering() {
        let entry = LogEntry::new(1, Cen(1), Csn::new(5, 2), EngineTag(0), writes(9));
        assert!(entry.verify());
        let mut bad = entry.clone();
        bad.writes[0].value[0] ^= 1;
        assert!(!bad.verify());
    }
}
