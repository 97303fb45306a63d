//! In-memory storage engine node.
//!
//! Storage is a passive consumer of the concurrency-control layer's logs:
//! CC nodes push per-epoch log frames (one per origin per epoch, empty
//! frames included), the node stages and acknowledges them, and applies
//! committed writes to its key-value store. It never participates in
//! conflict resolution; serving reads and surviving restarts are its whole
//! job.
//!
//! Application is epoch-gated but row-granular:
//!
//! * An entry may only start applying once its epoch is `watermark + 1`;
//!   entries of later epochs buffer. Within each origin's log, entries
//!   apply in LSN order, and an LSN gap parks everything behind it until a
//!   backfill pull closes it.
//! * The watermark advances to epoch E only once every configured CC
//!   origin's frame for E has arrived and every E entry has applied, so
//!   `watermark` is the epoch through which this node provably holds
//!   everything.
//! * Within the admitted window the applier makes one row visible at a
//!   time (`apply_rows_per_tick` throttles it; 0 drains eagerly). Readers
//!   can therefore observe a partially applied epoch; upstream read
//!   validation, not storage, is what rejects transactions that acted on
//!   such a mix.
//!
//! Rows are stamped with (epoch, csn) and a write applies only if its
//! stamp exceeds the stored one, which makes replay and recovery
//! re-application idempotent.
//!
//! A node restarted empty recovers by asking every CC node for its epoch
//! status and pulling every origin's log (live origins serve their own log;
//! a takeover leader serves reconstructed entries for dead ones), merging
//! by LSN.

use crate::durability::{LogEntry, Lsn};
use crate::model::{Cen, Csn, EngineTag, Key, NodeId, OpType, Value};
use crate::transport::{
    Addr, AdminMsg, Envelope, LogPullRequest, LogPushFrame, Message, PullResult, ReadStamp,
};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// One row as stored: the winning write's value and stamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredValue {
    pub value: Value,
    pub writer_csn: Csn,
    pub writer_cen: Cen,
    pub deleted: bool,
}

#[derive(Debug, Clone)]
pub struct StorageConfig {
    pub host_id: u32,
    pub engine: EngineTag,
    /// All configured CC origins; the epoch gate waits on every one.
    pub cc_nodes: Vec<NodeId>,
    /// Rows the applier makes visible per tick; 0 applies everything as
    /// soon as it is admissible.
    pub apply_rows_per_tick: u32,
    pub pull_retry_ticks: u32,
    pub pull_batch: u32,
}

impl StorageConfig {
    pub fn new(host_id: u32, engine: EngineTag, cc_nodes: Vec<NodeId>) -> Self {
        Self {
            host_id,
            engine,
            cc_nodes,
            apply_rows_per_tick: 0,
            pull_retry_ticks: 4,
            pull_batch: 1024,
        }
    }
}

#[derive(Debug)]
struct RecoveryState {
    /// Highest log tail reported for each origin across pull replies.
    tails: BTreeMap<NodeId, Lsn>,
    /// CC nodes whose epoch status arrived, with their finalized epoch.
    finalized: BTreeMap<NodeId, Cen>,
    next_request_tick: u64,
    req_id: u64,
}

#[derive(Debug)]
struct ApplySlot {
    origin: NodeId,
    entry: LogEntry,
    next_row: usize,
}

pub struct StorageNode {
    cfg: StorageConfig,
    store: BTreeMap<Key, StoredValue>,
    watermark: Cen,
    /// Per origin: highest epoch through which every frame has arrived.
    origin_covered: BTreeMap<NodeId, Cen>,
    /// Epochs declared per origin above `origin_covered`, awaiting the
    /// contiguous prefix to fill in.
    declared_ahead: BTreeMap<NodeId, BTreeSet<Cen>>,
    /// Highest contiguous staged LSN per origin.
    staged_tail: BTreeMap<NodeId, Lsn>,
    /// Entries beyond an LSN gap, held until the backfill closes it.
    parked: BTreeMap<NodeId, BTreeMap<Lsn, LogEntry>>,
    /// Entries beyond the epoch gate, in acceptance order per epoch.
    future: BTreeMap<Cen, Vec<(NodeId, LogEntry)>>,
    /// Admitted entries being applied, row by row.
    queue: VecDeque<ApplySlot>,
    /// Highest LSN fully applied per origin.
    applied_lsn: BTreeMap<NodeId, Lsn>,
    /// (cen, csn) of fully applied entries, in application order; drained
    /// by the harness for ordering checks.
    applied_events: Vec<(Cen, Csn)>,
    recovery: Option<RecoveryState>,
    now: u64,
    counters: BTreeMap<&'static str, u64>,
    outbox: Vec<Envelope>,
}

impl StorageNode {
    /// Fresh node of an initial cluster, preloaded with the genesis rows
    /// already applied through `watermark`.
    pub fn new(cfg: StorageConfig, genesis: &[(Key, StoredValue)], watermark: Cen) -> Self {
        let origin_covered = cfg.cc_nodes.iter().map(|&n| (n, watermark)).collect();
        Self {
            store: genesis.iter().cloned().collect(),
            watermark,
            origin_covered,
            declared_ahead: BTreeMap::new(),
            staged_tail: BTreeMap::new(),
            parked: BTreeMap::new(),
            future: BTreeMap::new(),
            queue: VecDeque::new(),
            applied_lsn: BTreeMap::new(),
            applied_events: Vec::new(),
            recovery: None,
            now: 0,
            counters: BTreeMap::new(),
            outbox: Vec::new(),
            cfg,
        }
    }

    /// Restarted empty: contents rebuild from the CC layer's logs (the
    /// static genesis preload is reinstalled from configuration, since it
    /// predates the logs). Serves whatever it has re-applied while
    /// recovering.
    pub fn recover(cfg: StorageConfig, genesis: &[(Key, StoredValue)], watermark: Cen) -> Self {
        let mut node = Self::new(cfg, genesis, watermark);
        node.recovery = Some(RecoveryState {
            tails: BTreeMap::new(),
            finalized: BTreeMap::new(),
            next_request_tick: 0,
            req_id: 1,
        });
        node
    }

    pub fn host_id(&self) -> u32 {
        self.cfg.host_id
    }

    pub fn engine(&self) -> EngineTag {
        self.cfg.engine
    }

    pub fn watermark(&self) -> Cen {
        self.watermark
    }

    pub fn is_recovering(&self) -> bool {
        self.recovery.is_some()
    }

    /// True when nothing is staged, parked, or queued: every accepted
    /// entry has been applied.
    pub fn is_quiesced(&self) -> bool {
        self.queue.is_empty()
            && self.future.is_empty()
            && self.parked.values().all(|m| m.is_empty())
    }

    pub fn get(&self, key: &[u8]) -> Option<&StoredValue> {
        self.store.get(key)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Key, &StoredValue)> {
        self.store.iter()
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    /// Highest contiguous staged LSN per origin (received, not yet
    /// necessarily applied).
    pub fn received_lsn(&self, origin: NodeId) -> Lsn {
        self.staged_tail.get(&origin).copied().unwrap_or(0)
    }

    pub fn applied_lsn(&self, origin: NodeId) -> Lsn {
        self.applied_lsn.get(&origin).copied().unwrap_or(0)
    }

    pub fn take_applied(&mut self) -> Vec<(Cen, Csn)> {
        std::mem::take(&mut self.applied_events)
    }

    pub fn counter(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }

    /// Checksum over live rows (key, csn, value), tombstones excluded:
    /// replicas of one engine must agree on it once caught up.
    pub fn digest(&self) -> u32 {
        let mut e = crate::codec::Enc::new();
        for (key, v) in &self.store {
            if v.deleted {
                continue;
            }
            e.put_bytes(key);
            use crate::codec::Wire;
            v.writer_csn.encode(&mut e);
            e.put_bytes(&v.value);
        }
        crate::codec::crc32(e.as_bytes())
    }

    fn bump(&mut self, name: &'static str) {
        *self.counters.entry(name).or_insert(0) += 1;
    }

    fn send(&mut self, dst: Addr, msg: Message) {
        self.outbox.push(Envelope {
            src: Addr::Storage(self.cfg.host_id),
            dst,
            msg,
        });
    }

    // ---- driving ----

    pub fn on_tick(&mut self) -> Vec<Envelope> {
        self.now += 1;
        self.drive_recovery();
        let budget = self.cfg.apply_rows_per_tick;
        if budget == 0 {
            self.drain(None);
        } else {
            self.drain(Some(budget as u64));
        }
        std::mem::take(&mut self.outbox)
    }

    pub fn on_message(&mut self, env: Envelope) -> Vec<Envelope> {
        let src = env.src;
        match env.msg {
            Message::LogPushFrame(LogPushFrame::Push {
                pusher,
                origin,
                engine,
                cen,
                first_lsn,
                entries,
            }) => self.handle_push(pusher, origin, engine, cen, first_lsn, entries),
            Message::LogPullReply(reply) => {
                if reply.engine == self.cfg.engine {
                    self.adopt_pulled(src, reply.origin, reply.result);
                }
            }
            Message::AdminFrame(msg) => self.handle_admin(src, msg),
            _ => self.bump("recv.unexpected"),
        }
        if self.cfg.apply_rows_per_tick == 0 {
            self.drain(None);
        }
        std::mem::take(&mut self.outbox)
    }

    // ---- frame intake ----

    #[allow(clippy::too_many_arguments)]
    fn handle_push(
        &mut self,
        pusher: NodeId,
        origin: NodeId,
        engine: EngineTag,
        cen: Cen,
        first_lsn: Lsn,
        entries: Vec<LogEntry>,
    ) {
        if engine != self.cfg.engine {
            self.bump("recv.wrong_engine");
            return;
        }
        self.bump("recv.push");
        if entries.iter().any(|e| !e.verify() || e.engine != engine) {
            // A corrupt frame is not acked; the pusher retries it.
            self.bump("recv.corrupt_frame");
            return;
        }

        // Duplicate epochs (takeover re-pushes, retries) ack idempotently
        // and change nothing: first frame wins.
        let covered = self.origin_covered.get(&origin).copied().unwrap_or(Cen(0));
        let seen = cen <= covered
            || self
                .declared_ahead
                .get(&origin)
                .is_some_and(|s| s.contains(&cen));
        if !seen {
            // A frame jumping past the origin's staged tail means an
            // earlier frame is missing: ask the pusher to backfill.
            let tail = self.received_lsn(origin);
            if first_lsn > tail + 1 {
                self.bump("pull.gap_detected");
                self.send(
                    Addr::Cc(pusher),
                    Message::LogPullRequest(LogPullRequest {
                        origin,
                        engine,
                        after_lsn: tail,
                        limit: self.cfg.pull_batch,
                    }),
                );
            }
            for entry in entries.iter() {
                self.accept_entry(origin, entry.clone());
            }
            self.declared_ahead.entry(origin).or_default().insert(cen);
            self.advance_origin(origin);
        }

        let upto = entries
            .last()
            .map_or(first_lsn.saturating_sub(1), |e| e.lsn);
        self.send(
            Addr::Cc(pusher),
            Message::LogPushFrame(LogPushFrame::Ack {
                origin,
                engine,
                cen,
                upto_lsn: upto,
            }),
        );
    }

    /// Stages one entry: duplicates drop, contiguous LSNs flow onward
    /// (unparking any successors), gapped LSNs park.
    fn accept_entry(&mut self, origin: NodeId, entry: LogEntry) {
        let tail = self.received_lsn(origin);
        if entry.lsn <= tail {
            return;
        }
        if entry.lsn > tail + 1 {
            self.parked
                .entry(origin)
                .or_default()
                .entry(entry.lsn)
                .or_insert(entry);
            return;
        }
        let mut tail = entry.lsn;
        self.route_entry(origin, entry);
        while let Some(next) = self
            .parked
            .get_mut(&origin)
            .and_then(|m| m.remove(&(tail + 1)))
        {
            tail += 1;
            self.route_entry(origin, next);
        }
        self.staged_tail.insert(origin, tail);
    }

    /// Epoch gate: only entries of the epoch right above the watermark may
    /// start applying; later epochs buffer until the gate opens.
    fn route_entry(&mut self, origin: NodeId, entry: LogEntry) {
        if entry.cen <= self.watermark.next() {
            self.queue.push_back(ApplySlot {
                origin,
                entry,
                next_row: 0,
            });
        } else {
            self.future.entry(entry.cen).or_default().push((origin, entry));
        }
    }

    /// Applies up to `budget` rows (None = everything admissible),
    /// advancing the watermark and releasing buffered epochs as the queue
    /// empties.
    fn drain(&mut self, mut budget: Option<u64>) {
        loop {
            // Entry completion costs no budget; only visible rows do.
            while self
                .queue
                .front()
                .is_some_and(|s| s.next_row >= s.entry.writes.len())
            {
                let done = self.queue.pop_front().unwrap();
                let prev = self.applied_lsn.get(&done.origin).copied().unwrap_or(0);
                self.applied_lsn
                    .insert(done.origin, prev.max(done.entry.lsn));
                self.applied_events.push((done.entry.cen, done.entry.csn));
                self.bump("applied.entries");
            }
            if self.queue.is_empty() {
                if !self.try_advance() {
                    return;
                }
                continue;
            }
            if budget == Some(0) {
                return;
            }
            let slot = self.queue.front_mut().unwrap();
            let w = slot.entry.writes[slot.next_row].clone();
            let stamp = (slot.entry.cen, slot.entry.csn);
            slot.next_row += 1;
            let apply = self
                .store
                .get(&w.key)
                .map_or(true, |cur| (cur.writer_cen, cur.writer_csn) < stamp);
            if apply {
                self.store.insert(
                    w.key.clone(),
                    StoredValue {
                        value: w.value,
                        writer_csn: stamp.1,
                        writer_cen: stamp.0,
                        deleted: w.op == OpType::Delete,
                    },
                );
            }
            if let Some(b) = &mut budget {
                *b -= 1;
            }
        }
    }

    /// Advances the watermark while the next epoch is complete (declared
    /// by every origin, nothing parked at or below it, queue drained) and
    /// releases the following epoch's buffered entries. Returns whether
    /// anything changed.
    fn try_advance(&mut self) -> bool {
        debug_assert!(self.queue.is_empty());
        let next = self.watermark.next();
        let complete = self
            .cfg
            .cc_nodes
            .iter()
            .all(|n| self.origin_covered.get(n).copied().unwrap_or(Cen(0)) >= next);
        let parked_blocks = self
            .parked
            .values()
            .any(|m| m.values().any(|e| e.cen <= next));
        if !complete || parked_blocks {
            return false;
        }
        self.watermark = next;
        self.bump("watermark.advances");
        if let Some(batch) = self.future.remove(&self.watermark.next()) {
            for (origin, entry) in batch {
                self.queue.push_back(ApplySlot {
                    origin,
                    entry,
                    next_row: 0,
                });
            }
        }
        true
    }

    fn advance_origin(&mut self, origin: NodeId) {
        let ahead = match self.declared_ahead.get_mut(&origin) {
            Some(s) => s,
            None => return,
        };
        let mut covered = self.origin_covered.get(&origin).copied().unwrap_or(Cen(0));
        while ahead.remove(&covered.next()) {
            covered = covered.next();
        }
        self.origin_covered.insert(origin, covered);
    }

    // ---- recovery ----

    fn drive_recovery(&mut self) {
        let due = match &self.recovery {
            Some(r) => self.now >= r.next_request_tick,
            None => return,
        };
        if !due {
            return;
        }
        if self.try_finish_recovery() {
            return;
        }
        let (req_id, asked_status): (u64, bool) = {
            let r = self.recovery.as_mut().unwrap();
            r.next_request_tick = self.now + self.cfg.pull_retry_ticks as u64;
            r.req_id += 1;
            (r.req_id, !r.finalized.is_empty())
        };
        let ccs = self.cfg.cc_nodes.clone();
        for &cc in &ccs {
            if !asked_status {
                self.send(
                    Addr::Cc(cc),
                    Message::AdminFrame(AdminMsg::EpochStatus { req_id }),
                );
            }
            for &origin in &ccs {
                // Every CC is asked about every origin: the origin serves
                // its own log, a takeover leader serves entries it built
                // for a dead origin, everyone else replies empty.
                self.send(
                    Addr::Cc(cc),
                    Message::LogPullRequest(LogPullRequest {
                        origin,
                        engine: self.cfg.engine,
                        after_lsn: self.received_lsn(origin),
                        limit: self.cfg.pull_batch,
                    }),
                );
            }
        }
        self.bump("recovery.rounds");
    }

    fn adopt_pulled(&mut self, src: Addr, origin: NodeId, result: PullResult) {
        self.bump("recv.pull_reply");
        match result {
            PullResult::Entries { entries, tail } => {
                for entry in entries {
                    if entry.verify() && entry.engine == self.cfg.engine {
                        self.accept_entry(origin, entry);
                    }
                }
                // An origin answering for its own log is authoritative
                // even when empty; anyone else (a takeover leader holding
                // a dead origin's entries) only counts when it actually
                // holds something. A foreign "I have nothing" carries no
                // information.
                if let Some(r) = &mut self.recovery {
                    if src == Addr::Cc(origin) || tail > 0 {
                        let t = r.tails.entry(origin).or_insert(0);
                        *t = (*t).max(tail);
                    }
                }
            }
            PullResult::LsnAhead { .. } => {
                // This node believes it is ahead of the responder's log;
                // for an origin-served log that cannot happen unless the
                // responder lost data. Nothing useful to adopt.
                self.bump("recv.pull_lsn_ahead");
            }
        }
        self.try_finish_recovery();
    }

    fn note_epoch_status(&mut self, node: NodeId, finalized: Cen) {
        if let Some(r) = &mut self.recovery {
            r.finalized.insert(node, finalized);
        }
        self.try_finish_recovery();
    }

    /// Recovery is done when every origin's pulled entries reach the
    /// highest tail any responder reported and every responding CC
    /// answered a status probe. Coverage then jumps: a live origin's log
    /// is complete through its own finalized epoch; a silent (dead) origin
    /// is covered through the lowest live responder's finalized epoch,
    /// because that node is the takeover leader reconstructing on its
    /// behalf.
    fn try_finish_recovery(&mut self) -> bool {
        let r = match &self.recovery {
            Some(r) => r,
            None => return true,
        };
        if r.finalized.is_empty() {
            return false;
        }
        let responders: BTreeSet<NodeId> = r.finalized.keys().copied().collect();
        // Each live responder must have answered a pull for its own log
        // (a missing reply is not an empty log) and its entries must all
        // have arrived.
        if !responders.iter().all(|n| {
            r.tails
                .get(n)
                .is_some_and(|&reported| self.received_lsn(*n) >= reported)
        }) {
            return false;
        }
        let leader_finalized = r
            .finalized
            .iter()
            .next()
            .map(|(_, &f)| f)
            .unwrap_or(Cen(0));
        let finalized = r.finalized.clone();
        self.recovery = None;
        for &origin in &self.cfg.cc_nodes.clone() {
            let covered = finalized
                .get(&origin)
                .copied()
                .unwrap_or(leader_finalized);
            let cur = self.origin_covered.get(&origin).copied().unwrap_or(Cen(0));
            if covered > cur {
                self.origin_covered.insert(origin, covered);
            }
            // Declarations at or below the new coverage are spent.
            if let Some(ahead) = self.declared_ahead.get_mut(&origin) {
                ahead.retain(|&c| c > covered.max(cur));
            }
            self.advance_origin(origin);
        }
        self.bump("recovery.completed");
        true
    }

    // ---- admin ----

    fn handle_admin(&mut self, src: Addr, msg: AdminMsg) {
        match msg {
            AdminMsg::GetData { req_id, key } => {
                let stamp = self.store.get(&key).map(|v| ReadStamp {
                    csn: v.writer_csn,
                    deleted: v.deleted,
                    value: v.value.clone(),
                });
                self.bump("recv.get_data");
                self.send(
                    src,
                    Message::AdminFrame(AdminMsg::GetDataResp { req_id, stamp }),
                );
            }
            AdminMsg::GetMeta { req_id } => {
                let received_lsns: Vec<(NodeId, Lsn)> = self
                    .cfg
                    .cc_nodes
                    .iter()
                    .map(|&n| (n, self.applied_lsn(n)))
                    .collect();
                let resp = AdminMsg::GetMetaResp {
                    req_id,
                    engine: self.cfg.engine,
                    watermark: self.watermark,
                    received_lsns,
                };
                self.send(src, Message::AdminFrame(resp));
            }
            AdminMsg::EpochStatusResp {
                node, finalized_cen, ..
            } => self.note_epoch_status(node, finalized_cen),
            AdminMsg::Hello { .. } => {}
            _ => self.bump("recv.unexpected"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WriteRecord;
    use proptest::prelude::*;

    fn cfg(ccs: &[NodeId]) -> StorageConfig {
        StorageConfig::new(1, EngineTag(1), ccs.to_vec())
    }

    fn entry(lsn: Lsn, cen: u64, time: u64, node: NodeId, key: &str, val: &str) -> LogEntry {
        LogEntry::new(
            lsn,
            Cen(cen),
            Csn::new(time, node),
            EngineTag(1),
            vec![WriteRecord::update(key.as_bytes().to_vec(), val.as_bytes().to_vec())],
        )
    }

    fn delete_entry(lsn: Lsn, cen: u64, time: u64, node: NodeId, key: &str) -> LogEntry {
        LogEntry::new(
            lsn,
            Cen(cen),
            Csn::new(time, node),
            EngineTag(1),
            vec![WriteRecord::delete(key.as_bytes().to_vec())],
        )
    }

    fn push(
        node: &mut StorageNode,
        origin: NodeId,
        cen: u64,
        first_lsn: Lsn,
        entries: Vec<LogEntry>,
    ) -> Vec<Envelope> {
        node.on_message(Envelope {
            src: Addr::Cc(origin),
            dst: Addr::Storage(1),
            msg: Message::LogPushFrame(LogPushFrame::Push {
                pusher: origin,
                origin,
                engine: EngineTag(1),
                cen: Cen(cen),
                first_lsn,
                entries,
            }),
        })
    }

    fn acked(out: &[Envelope]) -> Vec<(Cen, Lsn)> {
        out.iter()
            .filter_map(|e| match &e.msg {
                Message::LogPushFrame(LogPushFrame::Ack { cen, upto_lsn, .. }) => {
                    Some((*cen, *upto_lsn))
                }
                _ => None,
            })
            .collect()
    }

    #[test]
    fn epoch_gate_waits_for_every_origin() {
        let mut node = StorageNode::new(cfg(&[1, 2]), &[], Cen(1));
        let out = push(&mut node, 1, 2, 1, vec![entry(1, 2, 5, 1, "a", "v1")]);
        assert_eq!(acked(&out), vec![(Cen(2), 1)]);
        // Epoch 2 is in the admitted window, so the row is visible, but
        // origin 2's frame is missing and the watermark holds.
        assert_eq!(node.watermark(), Cen(1));
        assert_eq!(node.get(b"a").unwrap().value, b"v1");

        let out = push(&mut node, 2, 2, 1, vec![]);
        assert_eq!(acked(&out), vec![(Cen(2), 0)]);
        assert_eq!(node.watermark(), Cen(2));
    }

    #[test]
    fn future_epoch_buffers_until_gate_opens() {
        let mut node = StorageNode::new(cfg(&[1]), &[], Cen(1));
        // Epoch 3's frame arrives first: beyond watermark+1, so it must
        // not apply yet.
        push(&mut node, 1, 3, 2, vec![entry(2, 3, 9, 1, "k", "new")]);
        assert!(node.get(b"k").is_none());
        assert_eq!(node.watermark(), Cen(1));

        push(&mut node, 1, 2, 1, vec![entry(1, 2, 5, 1, "k", "old")]);
        // Both epochs admitted in order once the gap in epochs closes.
        assert_eq!(node.get(b"k").unwrap().value, b"new");
        assert_eq!(node.watermark(), Cen(3));
    }

    #[test]
    fn duplicate_and_reordered_frames_converge() {
        let e1 = entry(1, 2, 5, 1, "k", "old");
        let e2 = entry(2, 3, 9, 1, "k", "new");
        let mut a = StorageNode::new(cfg(&[1]), &[], Cen(1));
        push(&mut a, 1, 2, 1, vec![e1.clone()]);
        push(&mut a, 1, 3, 2, vec![e2.clone()]);
        push(&mut a, 1, 2, 1, vec![e1.clone()]);

        let mut b = StorageNode::new(cfg(&[1]), &[], Cen(1));
        push(&mut b, 1, 3, 2, vec![e2.clone()]);
        push(&mut b, 1, 2, 1, vec![e1.clone()]);

        assert_eq!(a.get(b"k").unwrap().value, b"new");
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.watermark(), Cen(3));
        assert_eq!(b.watermark(), Cen(3));
    }

    #[test]
    fn later_epoch_beats_larger_csn_of_earlier_epoch() {
        // Node clocks are independent: epoch 2 carries csn time 50, epoch 3
        // carries time 3. Epoch order must win over csn order.
        let frames: Vec<(NodeId, u64, Lsn, Vec<LogEntry>)> = vec![
            (1, 2, 1, vec![entry(1, 2, 50, 1, "k", "older")]),
            (2, 2, 1, vec![]),
            (1, 3, 2, vec![]),
            (2, 3, 1, vec![entry(1, 3, 3, 2, "k", "newer")]),
        ];
        let mut node = StorageNode::new(cfg(&[1, 2]), &[], Cen(1));
        for (origin, cen, first, entries) in &frames {
            push(&mut node, *origin, *cen, *first, entries.clone());
        }
        assert_eq!(node.get(b"k").unwrap().value, b"newer");
        assert_eq!(node.watermark(), Cen(3));

        // Reversed arrival converges identically.
        let mut node2 = StorageNode::new(cfg(&[1, 2]), &[], Cen(1));
        for (origin, cen, first, entries) in frames.iter().rev() {
            push(&mut node2, *origin, *cen, *first, entries.clone());
        }
        assert_eq!(node2.get(b"k").unwrap().value, b"newer");
        assert_eq!(node.digest(), node2.digest());
    }

    #[test]
    fn rows_become_visible_one_per_tick_when_throttled() {
        let mut c = cfg(&[1]);
        c.apply_rows_per_tick = 1;
        let mut node = StorageNode::new(c, &[], Cen(1));
        // One transaction writing two rows in a single entry.
        let e = LogEntry::new(
            1,
            Cen(2),
            Csn::new(5, 1),
            EngineTag(1),
            vec![
                WriteRecord::update(b"x".to_vec(), b"5".to_vec()),
                WriteRecord::update(b"y".to_vec(), b"5".to_vec()),
            ],
        );
        push(&mut node, 1, 2, 1, vec![e]);
        // Nothing applies on receipt in throttled mode.
        assert!(node.get(b"x").is_none());
        node.on_tick();
        // One row visible, the other not: the partially applied epoch a
        // reader can legitimately observe.
        assert_eq!(node.get(b"x").unwrap().value, b"5");
        assert!(node.get(b"y").is_none());
        node.on_tick();
        assert_eq!(node.get(b"y").unwrap().value, b"5");
        assert_eq!(node.watermark(), Cen(2));
    }

    #[test]
    fn delete_leaves_tombstone_with_stamp() {
        let mut node = StorageNode::new(cfg(&[1]), &[], Cen(1));
        push(&mut node, 1, 2, 1, vec![entry(1, 2, 5, 1, "k", "v")]);
        push(&mut node, 1, 3, 2, vec![delete_entry(2, 3, 8, 1, "k")]);
        let row = node.get(b"k").unwrap();
        assert!(row.deleted);
        assert_eq!(row.writer_csn, Csn::new(8, 1));
        // Tombstones are excluded from the live digest.
        let empty = StorageNode::new(cfg(&[1]), &[], Cen(1));
        assert_eq!(node.digest(), empty.digest());
    }

    #[test]
    fn lsn_gap_parks_entries_and_triggers_backfill_pull() {
        let mut node = StorageNode::new(cfg(&[1]), &[], Cen(1));
        push(&mut node, 1, 2, 1, vec![entry(1, 2, 5, 1, "a", "v")]);
        // Frame for epoch 4 jumps to lsn 3: epoch 3's frame (lsn 2) is
        // missing.
        let out = push(&mut node, 1, 4, 3, vec![entry(3, 4, 9, 1, "c", "v")]);
        let pulls: Vec<&LogPullRequest> = out
            .iter()
            .filter_map(|e| match &e.msg {
                Message::LogPullRequest(p) => Some(p),
                _ => None,
            })
            .collect();
        assert_eq!(pulls.len(), 1);
        assert_eq!(pulls[0].after_lsn, 1);
        assert_eq!(pulls[0].origin, 1);
        // The gapped entry is parked, not applied.
        assert!(node.get(b"c").is_none());
        assert_eq!(node.watermark(), Cen(2));

        // Backfill closes the gap; everything behind it flows in order.
        push(&mut node, 1, 3, 2, vec![entry(2, 3, 7, 1, "b", "v")]);
        assert_eq!(node.get(b"b").unwrap().value, b"v");
        assert_eq!(node.get(b"c").unwrap().value, b"v");
        assert_eq!(node.watermark(), Cen(4));
        assert_eq!(node.received_lsn(1), 3);
        assert_eq!(node.applied_lsn(1), 3);
    }

    #[test]
    fn corrupt_frame_is_not_acked() {
        let mut node = StorageNode::new(cfg(&[1]), &[], Cen(1));
        let mut bad = entry(1, 2, 5, 1, "a", "v");
        bad.crc ^= 0xdead;
        let out = push(&mut node, 1, 2, 1, vec![bad]);
        assert!(acked(&out).is_empty());
        assert!(node.get(b"a").is_none());
    }

    #[test]
    fn restart_recovery_pulls_full_history() {
        // Build the authoritative state by frames.
        let frames: Vec<(NodeId, u64, Lsn, Vec<LogEntry>)> = vec![
            (1, 2, 1, vec![entry(1, 2, 1, 1, "a", "1")]),
            (2, 2, 1, vec![entry(1, 2, 1, 2, "b", "2")]),
            (1, 3, 2, vec![entry(2, 3, 2, 1, "a", "3")]),
            (2, 3, 2, vec![]),
        ];
        let mut before = StorageNode::new(cfg(&[1, 2]), &[], Cen(1));
        for (origin, cen, first, entries) in &frames {
            push(&mut before, *origin, *cen, *first, entries.clone());
        }
        assert_eq!(before.watermark(), Cen(3));

        // Restart empty; drive recovery against synthetic replies.
        let mut node = StorageNode::recover(cfg(&[1, 2]), &[], Cen(1));
        let out = node.on_tick();
        let pulls = out
            .iter()
            .filter(|e| matches!(e.msg, Message::LogPullRequest(_)))
            .count();
        let statuses = out
            .iter()
            .filter(|e| {
                matches!(
                    e.msg,
                    Message::AdminFrame(AdminMsg::EpochStatus { .. })
                )
            })
            .count();
        assert_eq!(pulls, 4, "each origin asked of each CC");
        assert_eq!(statuses, 2);
        assert!(node.is_recovering());

        // Status replies say both CCs finalized epoch 3.
        for cc in [1u32, 2] {
            node.on_message(Envelope {
                src: Addr::Cc(cc),
                dst: Addr::Storage(1),
                msg: Message::AdminFrame(AdminMsg::EpochStatusResp {
                    req_id: 2,
                    node: cc,
                    view: 0,
                    open_cen: Cen(4),
                    finalized_cen: Cen(3),
                }),
            });
        }
        // Log replies: each origin serves its own entries.
        use crate::transport::LogPullReply;
        node.on_message(Envelope {
            src: Addr::Cc(1),
            dst: Addr::Storage(1),
            msg: Message::LogPullReply(LogPullReply {
                origin: 1,
                engine: EngineTag(1),
                after_lsn: 0,
                result: PullResult::Entries {
                    entries: vec![entry(1, 2, 1, 1, "a", "1"), entry(2, 3, 2, 1, "a", "3")],
                    tail: 2,
                },
            }),
        });
        node.on_message(Envelope {
            src: Addr::Cc(2),
            dst: Addr::Storage(1),
            msg: Message::LogPullReply(LogPullReply {
                origin: 2,
                engine: EngineTag(1),
                after_lsn: 0,
                result: PullResult::Entries {
                    entries: vec![entry(1, 2, 1, 2, "b", "2")],
                    tail: 1,
                },
            }),
        });

        assert!(!node.is_recovering());
        assert_eq!(node.watermark(), Cen(3));
        assert_eq!(node.digest(), before.digest());
        assert_eq!(node.get(b"a").unwrap().value, b"3");
        assert!(node.is_quiesced());
    }

    #[test]
    fn get_data_serves_stamped_rows() {
        let mut node = StorageNode::new(cfg(&[1]), &[], Cen(1));
        push(&mut node, 1, 2, 1, vec![entry(1, 2, 5, 1, "k", "v")]);
        let out = node.on_message(Envelope {
            src: Addr::Client(9),
            dst: Addr::Storage(1),
            msg: Message::AdminFrame(AdminMsg::GetData {
                req_id: 42,
                key: b"k".to_vec(),
            }),
        });
        assert_eq!(out.len(), 1);
        match &out[0].msg {
            Message::AdminFrame(AdminMsg::GetDataResp { req_id: 42, stamp }) => {
                let stamp = stamp.as_ref().unwrap();
                assert_eq!(stamp.csn, Csn::new(5, 1));
                assert_eq!(stamp.value, b"v");
                assert!(!stamp.deleted);
            }
            other => panic!("unexpected reply {other:?}"),
        }
        let out = node.on_message(Envelope {
            src: Addr::Client(9),
            dst: Addr::Storage(1),
            msg: Message::AdminFrame(AdminMsg::GetData {
                req_id: 43,
                key: b"missing".to_vec(),
            }),
        });
        match &out[0].msg {
            Message::AdminFrame(AdminMsg::GetDataResp { stamp: None, .. }) => {}
            other => panic!("unexpected reply {other:?}"),
        }
    }

    #[test]
    fn applied_events_report_entries_in_application_order() {
        let mut node = StorageNode::new(cfg(&[1]), &[], Cen(1));
        push(&mut node, 1, 2, 1, vec![entry(1, 2, 5, 1, "a", "1")]);
        push(&mut node, 1, 3, 2, vec![entry(2, 3, 7, 1, "b", "2")]);
        assert_eq!(
            node.take_applied(),
            vec![(Cen(2), Csn::new(5, 1)), (Cen(3), Csn::new(7, 1))]
        );
        assert!(node.take_applied().is_empty());
    }

    proptest! {
        /// Any permutation and duplication of a frame sequence converges to
        /// the same store and watermark.
        #[test]
        fn application_is_order_insensitive(seed in 0u64..500) {
            use rand::seq::SliceRandom;
            use rand::{Rng, SeedableRng};
            let mut frames = Vec::new();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut lsn_by_origin: BTreeMap<NodeId, Lsn> = BTreeMap::new();
            for cen in 2..8u64 {
                for origin in [1u32, 2] {
                    let n = rng.gen_range(0..3usize);
                    let mut entries = Vec::new();
                    let first = lsn_by_origin.get(&origin).copied().unwrap_or(0) + 1;
                    for i in 0..n {
                        let lsn = first + i as u64;
                        let keyn = rng.gen_range(0..5u8);
                        entries.push(entry(
                            lsn,
                            cen,
                            cen * 100 + rng.gen_range(0..50u64),
                            origin,
                            &format!("key{keyn}"),
                            &format!("v{cen}-{origin}-{i}"),
                        ));
                    }
                    lsn_by_origin.insert(origin, first + n as u64 - 1);
                    frames.push((origin, cen, first, entries));
                }
            }

            let mut reference = StorageNode::new(cfg(&[1, 2]), &[], Cen(1));
            for (origin, cen, first, entries) in &frames {
                push(&mut reference, *origin, *cen, *first, entries.clone());
            }

            let mut shuffled = frames.clone();
            shuffled.shuffle(&mut rng);
            // Duplicate a random prefix to model retries.
            let dup = rng.gen_range(0..=shuffled.len());
            let extra: Vec<_> = shuffled[..dup].to_vec();
            let mut node = StorageNode::new(cfg(&[1, 2]), &[], Cen(1));
            for (origin, cen, first, entries) in shuffled.iter().chain(extra.iter()) {
                push(&mut node, *origin, *cen, *first, entries.clone());
            }

            prop_assert_eq!(node.digest(), reference.digest());
            prop_assert_eq!(node.watermark(), reference.watermark());
            prop_assert_eq!(node.watermark(), Cen(7));
            prop_assert!(node.is_quiesced());
        }
    }
}
