//! Message contract between nodes: typed payloads for every frame kind, the
//! TCP frame codec, membership views, and leader election.
//!
//! Every cross-node interaction in the system (transaction submission,
//! sub-transaction routing, write-set exchange, abort-set merge, backup,
//! membership, log push/pull, admin) is one of the twelve [`MessageKind`]s
//! here. The deterministic simulator delivers [`Envelope`]s directly; the
//! TCP shells serialize the same envelopes through [`encode_frame`] /
//! [`FrameReader`].
//!
//! TCP frame layout (normative, little-endian):
//!
//! ```text
//! frame   := len u32 | kind u8 | version u8 | src Addr | dst Addr
//!            | body bytes | crc u32
//! len     counts everything after itself (kind through crc).
//! crc     is CRC32 over kind through body.
//! Addr    := tag u8 (0 cc, 1 storage, 2 client) | id u32
//! body    := the kind's payload type in canonical encoding
//! ```

use crate::codec::{crc32, CodecError, Dec, Enc, Wire};
use crate::conflict::{GlobalWriteVersionMap, VersionMapEntry};
use crate::coordinator::ShardMap;
use crate::durability::{LogEntry, Lsn};
use crate::model::{
    AbortReason, Cen, Csn, Decision, EngineTag, Key, NodeId, ReadRecord, TaggedTxn, TxnRequest,
    Value, WriteRecord,
};
use std::collections::BTreeSet;
use thiserror::Error;

pub const FRAME_VERSION: u8 = 1;

/// Network address of a node in any layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Addr {
    Cc(NodeId),
    Storage(u32),
    Client(u32),
}

impl std::fmt::Display for Addr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Addr::Cc(id) => write!(f, "cc:{id}"),
            Addr::Storage(id) => write!(f, "st:{id}"),
            Addr::Client(id) => write!(f, "cl:{id}"),
        }
    }
}

/// Layout: tag u8 (0 cc, 1 storage, 2 client), id u32.
impl Wire for Addr {
    fn encode(&self, e: &mut Enc) {
        match self {
            Addr::Cc(id) => {
                e.put_u8(0);
                e.put_u32(*id);
            }
            Addr::Storage(id) => {
                e.put_u8(1);
                e.put_u32(*id);
            }
            Addr::Client(id) => {
                e.put_u8(2);
                e.put_u32(*id);
            }
        }
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        let tag = d.get_u8()?;
        let id = d.get_u32()?;
        match tag {
            0 => Ok(Addr::Cc(id)),
            1 => Ok(Addr::Storage(id)),
            2 => Ok(Addr::Client(id)),
            value => Err(CodecError::BadDiscriminant {
                type_name: "Addr",
                value,
            }),
        }
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("destination {0} unreachable")]
    Unreachable(Addr),
    #[error("corrupt frame: {0}")]
    FrameCorrupt(String),
    #[error("no majority reachable in backup group ({acked} of {needed} needed)")]
    NoMajority { acked: usize, needed: usize },
}

// ---- frame kinds ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    SubmitTxn,
    DecisionReply,
    SubTxnRoute,
    WriteSetPayload,
    AbortSetPayload,
    TxnBackup,
    MembershipBeat,
    LeaderClaim,
    LogPushFrame,
    LogPullRequest,
    LogPullReply,
    AdminFrame,
}

impl MessageKind {
    pub const ALL: [MessageKind; 12] = [
        MessageKind::SubmitTxn,
        MessageKind::DecisionReply,
        MessageKind::SubTxnRoute,
        MessageKind::WriteSetPayload,
        MessageKind::AbortSetPayload,
        MessageKind::TxnBackup,
        MessageKind::MembershipBeat,
        MessageKind::LeaderClaim,
        MessageKind::LogPushFrame,
        MessageKind::LogPullRequest,
        MessageKind::LogPullReply,
        MessageKind::AdminFrame,
    ];

    pub fn as_u8(self) -> u8 {
        Self::ALL.iter().position(|k| *k == self).unwrap() as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::SubmitTxn => "submit_txn",
            MessageKind::DecisionReply => "decision_reply",
            MessageKind::SubTxnRoute => "sub_txn_route",
            MessageKind::WriteSetPayload => "write_set_payload",
            MessageKind::AbortSetPayload => "abort_set_payload",
            MessageKind::TxnBackup => "txn_backup",
            MessageKind::MembershipBeat => "membership_beat",
            MessageKind::LeaderClaim => "leader_claim",
            MessageKind::LogPushFrame => "log_push_frame",
            MessageKind::LogPullRequest => "log_pull_request",
            MessageKind::LogPullReply => "log_pull_reply",
            MessageKind::AdminFrame => "admin_frame",
        }
    }
}

// ---- payload types ----

/// Client → CC: commit this transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmitTxn {
    pub request: TxnRequest,
}

/// Submission rejected before admission; the transaction was never tagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitReject {
    /// Epoch admission backpressure; retry next epoch.
    Overloaded,
    /// Request violates the model invariants (duplicate keys, empty key).
    MalformedRequest,
    /// Node cannot currently serve (majority lost, or not yet started).
    NotServing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitResult {
    Decided(Decision),
    Rejected(SubmitReject),
}

/// CC → client: the one decision (or rejection) for a submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionReply {
    pub txn_id: u64,
    pub result: SubmitResult,
}

/// Shard-local slice of a transaction: same csn as the parent, records
/// restricted to one shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubTxn {
    pub csn: Csn,
    pub shard: u32,
    pub read_set: Vec<ReadRecord>,
    pub write_set: Vec<WriteRecord>,
}

/// CC → CC: every sub-transaction this origin routes to `dst` for one
/// epoch, in one batch. Exactly one such batch flows per (cen, origin,
/// dst), possibly empty, so receivers can detect collection completeness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubTxnRoute {
    pub cen: Cen,
    pub origin: NodeId,
    pub subtxns: Vec<SubTxn>,
}

/// One epoch writer as exchanged between replicas of a shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardWriter {
    pub csn: Csn,
    pub writes: Vec<WriteRecord>,
}

/// CC → CC: one replica's surviving write intents for (cen, shard).
/// Exactly one flows per (cen, shard, sender) to each peer replica.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteSetPayload {
    pub cen: Cen,
    pub shard: u32,
    pub sender: NodeId,
    pub writers: Vec<ShardWriter>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AbortEntry {
    pub csn: Csn,
    pub reason: AbortReason,
}

/// Cross-model group declaration: all members were admitted to the sender's
/// current epoch; every node converts any member abort into a whole-group
/// abort after the merge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupDecl {
    pub group_id: u64,
    pub members: Vec<Csn>,
}

/// CC → all CC: this node's locally determined aborts (all shards merged)
/// plus its group declarations for the epoch. Exactly one flows per
/// (cen, sender) to every other node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbortSetPayload {
    pub cen: Cen,
    pub sender: NodeId,
    pub aborts: Vec<AbortEntry>,
    pub groups: Vec<GroupDecl>,
}

/// One backed-up admission: the tagged transaction plus the client that
/// submitted it, so a takeover leader can answer that client's decision
/// polls after the origin dies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackupEntry {
    pub client: u32,
    pub txn: TaggedTxn,
}

/// Transaction backup stream: admitted transactions replicate to peers
/// before routing proceeds; peers ack per csn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxnBackup {
    Entries { origin: NodeId, entries: Vec<BackupEntry> },
    Ack { origin: NodeId, csns: Vec<Csn> },
}

/// Periodic liveness beat. `stable_cen` is the sender's highest epoch that
/// is finalized, durably logged, and acknowledged by every storage replica;
/// peers garbage-collect their backups of the sender up to it.
/// `stable_tails` are the sender's log tails as of that epoch: the anchor a
/// takeover leader needs to reconstruct the sender's later log frames with
/// the exact LSNs the sender itself would have assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipBeat {
    pub sender: NodeId,
    pub view: u64,
    pub stable_cen: Cen,
    pub stable_tails: Vec<(EngineTag, Lsn)>,
}

/// View-change announcement from the node that detected the change.
/// Removals take effect immediately (`activation_cen` 0); additions start
/// participating at `activation_cen`, chosen safely past in-flight epochs
/// so the joiner can sync a consistent snapshot first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaderClaim {
    pub claimant: NodeId,
    pub view: u64,
    pub live: Vec<NodeId>,
    pub activation_cen: Cen,
}

/// Log push-down to storage, or the storage-side ack. Frames flow per
/// (origin, cen, engine); an epoch with no committed writes still sends an
/// empty frame so the storage epoch gate can advance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogPushFrame {
    Push {
        /// Node transmitting the frame; differs from `origin` when a
        /// takeover leader pushes on behalf of a dead node.
        pusher: NodeId,
        /// Node whose log this is.
        origin: NodeId,
        engine: EngineTag,
        cen: Cen,
        /// LSN the first entry carries; for an empty frame, the next LSN
        /// the origin's log would assign (keeps contiguity checkable).
        first_lsn: Lsn,
        entries: Vec<LogEntry>,
    },
    Ack {
        origin: NodeId,
        engine: EngineTag,
        cen: Cen,
        upto_lsn: Lsn,
    },
}

/// Storage → CC: entries after `after_lsn` for (origin, engine), please.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogPullRequest {
    pub origin: NodeId,
    pub engine: EngineTag,
    pub after_lsn: Lsn,
    pub limit: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PullResult {
    Entries { entries: Vec<LogEntry>, tail: Lsn },
    /// Requester's LSN exceeds the log tail: it has diverged and must
    /// resync its snapshot.
    LsnAhead { tail: Lsn },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogPullReply {
    pub origin: NodeId,
    pub engine: EngineTag,
    pub after_lsn: Lsn,
    pub result: PullResult,
}

/// Stamped value returned by a storage read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadStamp {
    pub csn: Csn,
    pub deleted: bool,
    pub value: Value,
}

/// Decision lookup outcome for a status poll.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnStatus {
    Decided(Decision),
    Pending,
    Unknown,
}

/// Per-epoch reception report a survivor sends the takeover leader after a
/// view change, so the leader can decide finish-vs-reexecute per epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochReportRow {
    pub cen: Cen,
    /// Reporter has already finalized this epoch locally.
    pub finalized: bool,
    /// Did the reporter receive the dead node's SubTxnRoute batch?
    pub has_route: bool,
    /// ... its WriteSetPayloads for every shard the reporter replicates?
    pub has_writes: bool,
    /// ... its AbortSetPayload?
    pub has_abort: bool,
    /// The dead node's transactions of this epoch held in the reporter's
    /// backup store.
    pub dead_backups: Vec<BackupEntry>,
}

/// Takeover leader's per-epoch verdict after collecting reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecoveryAction {
    /// Everyone has the dead node's materials: survivors finish the epoch
    /// normally; the leader emits the dead node's decisions and pushes its
    /// logs.
    Finish { cen: Cen },
    /// Materials incomplete: discard the epoch's resolution state and
    /// re-execute it with the dead node's backed-up transactions.
    Reexecute { cen: Cen, txns: Vec<BackupEntry> },
}

/// Typed request/response frames for everything outside the data path:
/// storage reads, status, metrics, re-sharding, recovery choreography, and
/// harness epoch ticks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdminMsg {
    GetData {
        req_id: u64,
        key: Key,
    },
    GetDataResp {
        req_id: u64,
        stamp: Option<ReadStamp>,
    },
    GetMeta {
        req_id: u64,
    },
    /// `received_lsns` is the contiguous staged tail per CC origin, which
    /// may run ahead of the applied `watermark` while the epoch gate waits
    /// on slower origins.
    GetMetaResp {
        req_id: u64,
        engine: EngineTag,
        watermark: Cen,
        received_lsns: Vec<(NodeId, Lsn)>,
    },
    EpochStatus {
        req_id: u64,
    },
    EpochStatusResp {
        req_id: u64,
        node: NodeId,
        view: u64,
        open_cen: Cen,
        finalized_cen: Cen,
    },
    TriggerReshard {
        req_id: u64,
        new_map: ShardMap,
        cutover: Cen,
    },
    TriggerReshardResp {
        req_id: u64,
        accepted: bool,
        current_cen: Cen,
    },
    GetMetrics {
        req_id: u64,
    },
    GetMetricsResp {
        req_id: u64,
        counters: Vec<(String, u64)>,
    },
    DecisionStatus {
        req_id: u64,
        origin: NodeId,
        client: u32,
        txn_id: u64,
    },
    DecisionStatusResp {
        req_id: u64,
        status: TxnStatus,
    },
    /// Re-sharding metadata transfer: the slice of `old_shard`'s version
    /// map that belongs to `new_shard` under the map at `map_version`.
    /// Receivers expect exactly one per (old shard, new shard) pair from
    /// the old shard's designated sender, empty slices included.
    SnapshotTransfer {
        map_version: u32,
        old_shard: u32,
        new_shard: u32,
        sender: NodeId,
        entries: Vec<(Key, VersionMapEntry)>,
    },
    /// Broadcast by a restarting node: `shards` it needs snapshots for,
    /// `log_tails` of its surviving on-disk log per engine.
    StateSyncReq {
        joiner: NodeId,
        shards: Vec<u32>,
        log_tails: Vec<(EngineTag, Lsn)>,
    },
    /// Answered at an epoch boundary so the snapshots are consistent.
    /// `time_floor` is the largest csn local time the responder has seen
    /// from the joiner (backups, snapshots, decisions); the joiner's tagger
    /// restarts above it. `log_catchup` holds joiner-origin log entries the
    /// takeover leader appended on its behalf while it was down. `peers`
    /// gossips per-node stable watermarks and log tails so the joiner can
    /// later take over for nodes that died before it returned.
    StateSyncResp {
        view: u64,
        live: Vec<NodeId>,
        open_cen: Cen,
        finalized_cen: Cen,
        time_floor: u64,
        map: ShardMap,
        snapshots: Vec<(u32, GlobalWriteVersionMap)>,
        log_catchup: Vec<LogEntry>,
        decisions: Vec<(u32, u64, Decision)>,
        peers: Vec<(NodeId, Cen, Vec<(EngineTag, Lsn)>)>,
    },
    EpochReport {
        view: u64,
        reporter: NodeId,
        dead: NodeId,
        rows: Vec<EpochReportRow>,
    },
    /// One plan per view covering every dead node's in-flight epochs;
    /// `planner` is the takeover leader that issued it.
    RecoveryPlan {
        view: u64,
        planner: NodeId,
        actions: Vec<RecoveryAction>,
    },
    /// Harness-driven epoch close (epoch-batched driving mode).
    Tick {
        close_cen: Cen,
    },
    /// TCP connection identification; first frame on every connection.
    Hello {
        from: Addr,
    },
}

/// One typed message; the variant IS the frame kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    SubmitTxn(SubmitTxn),
    DecisionReply(DecisionReply),
    SubTxnRoute(SubTxnRoute),
    WriteSetPayload(WriteSetPayload),
    AbortSetPayload(AbortSetPayload),
    TxnBackup(TxnBackup),
    MembershipBeat(MembershipBeat),
    LeaderClaim(LeaderClaim),
    LogPushFrame(LogPushFrame),
    LogPullRequest(LogPullRequest),
    LogPullReply(LogPullReply),
    AdminFrame(AdminMsg),
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::SubmitTxn(_) => MessageKind::SubmitTxn,
            Message::DecisionReply(_) => MessageKind::DecisionReply,
            Message::SubTxnRoute(_) => MessageKind::SubTxnRoute,
            Message::WriteSetPayload(_) => MessageKind::WriteSetPayload,
            Message::AbortSetPayload(_) => MessageKind::AbortSetPayload,
            Message::TxnBackup(_) => MessageKind::TxnBackup,
            Message::MembershipBeat(_) => MessageKind::MembershipBeat,
            Message::LeaderClaim(_) => MessageKind::LeaderClaim,
            Message::LogPushFrame(_) => MessageKind::LogPushFrame,
            Message::LogPullRequest(_) => MessageKind::LogPullRequest,
            Message::LogPullReply(_) => MessageKind::LogPullReply,
            Message::AdminFrame(_) => MessageKind::AdminFrame,
        }
    }
}

/// A message in flight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub src: Addr,
    pub dst: Addr,
    pub msg: Message,
}

// ---- membership ----

/// Agreed cluster membership. Views are totally ordered; every membership
/// change (death detected, node rejoined) increments `view`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipView {
    pub view: u64,
    pub live: BTreeSet<NodeId>,
}

impl MembershipView {
    pub fn initial(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            view: 0,
            live: nodes.into_iter().collect(),
        }
    }

    pub fn is_live(&self, node: NodeId) -> bool {
        self.live.contains(&node)
    }

    /// Leader of a node's transaction-backup group: the node itself while
    /// alive, else the lowest live node (which takes over its duties).
    pub fn txn_leader(&self, origin: NodeId) -> Option<NodeId> {
        if self.is_live(origin) {
            Some(origin)
        } else {
            elect_leader(&self.live)
        }
    }

    /// Leader among a shard's replicas: the lowest live one.
    pub fn shard_leader(&self, replicas: &[NodeId]) -> Option<NodeId> {
        replicas.iter().copied().filter(|n| self.is_live(*n)).min()
    }

    pub fn has_majority(&self, total: usize) -> bool {
        self.live.len() >= majority(total)
    }
}

/// Smallest count that constitutes a majority of `total`.
pub fn majority(total: usize) -> usize {
    total / 2 + 1
}

/// Deterministic election: lowest live id wins.
pub fn elect_leader(live: &BTreeSet<NodeId>) -> Option<NodeId> {
    live.iter().next().copied()
}

// ---- wire encodings ----

impl Wire for SubmitTxn {
    fn encode(&self, e: &mut Enc) {
        self.request.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(SubmitTxn {
            request: TxnRequest::decode(d)?,
        })
    }
}

/// Layout: u8 tag: 0 Decided+decision, 1 Rejected+reason u8.
impl Wire for SubmitResult {
    fn encode(&self, e: &mut Enc) {
        match self {
            SubmitResult::Decided(decision) => {
                e.put_u8(0);
                decision.encode(e);
            }
            SubmitResult::Rejected(reject) => {
                e.put_u8(1);
                e.put_u8(match reject {
                    SubmitReject::Overloaded => 0,
                    SubmitReject::MalformedRequest => 1,
                    SubmitReject::NotServing => 2,
                });
            }
        }
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        match d.get_u8()? {
            0 => Ok(SubmitResult::Decided(Decision::decode(d)?)),
            1 => {
                let reject = match d.get_u8()? {
                    0 => SubmitReject::Overloaded,
                    1 => SubmitReject::MalformedRequest,
                    2 => SubmitReject::NotServing,
                    value => {
                        return Err(CodecError::BadDiscriminant {
                            type_name: "SubmitReject",
                            value,
                        })
                    }
                };
                Ok(SubmitResult::Rejected(reject))
            }
            value => Err(CodecError::BadDiscriminant {
                type_name: "SubmitResult",
                value,
            }),
        }
    }
}

impl Wire for DecisionReply {
    fn encode(&self, e: &mut Enc) {
        e.put_u64(self.txn_id);
        self.result.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(DecisionReply {
            txn_id: d.get_u64()?,
            result: SubmitResult::decode(d)?,
        })
    }
}

impl Wire for SubTxn {
    fn encode(&self, e: &mut Enc) {
        self.csn.encode(e);
        e.put_u32(self.shard);
        self.read_set.encode(e);
        self.write_set.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(SubTxn {
            csn: Csn::decode(d)?,
            shard: d.get_u32()?,
            read_set: Vec::decode(d)?,
            write_set: Vec::decode(d)?,
        })
    }
}

impl Wire for SubTxnRoute {
    fn encode(&self, e: &mut Enc) {
        self.cen.encode(e);
        e.put_u32(self.origin);
        self.subtxns.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(SubTxnRoute {
            cen: Cen::decode(d)?,
            origin: d.get_u32()?,
            subtxns: Vec::decode(d)?,
        })
    }
}

impl Wire for ShardWriter {
    fn encode(&self, e: &mut Enc) {
        self.csn.encode(e);
        self.writes.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(ShardWriter {
            csn: Csn::decode(d)?,
            writes: Vec::decode(d)?,
        })
    }
}

impl Wire for WriteSetPayload {
    fn encode(&self, e: &mut Enc) {
        self.cen.encode(e);
        e.put_u32(self.shard);
        e.put_u32(self.sender);
        self.writers.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(WriteSetPayload {
            cen: Cen::decode(d)?,
            shard: d.get_u32()?,
            sender: d.get_u32()?,
            writers: Vec::decode(d)?,
        })
    }
}

impl Wire for AbortEntry {
    fn encode(&self, e: &mut Enc) {
        self.csn.encode(e);
        self.reason.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(AbortEntry {
            csn: Csn::decode(d)?,
            reason: AbortReason::decode(d)?,
        })
    }
}

impl Wire for GroupDecl {
    fn encode(&self, e: &mut Enc) {
        e.put_u64(self.group_id);
        self.members.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(GroupDecl {
            group_id: d.get_u64()?,
            members: Vec::decode(d)?,
        })
    }
}

impl Wire for AbortSetPayload {
    fn encode(&self, e: &mut Enc) {
        self.cen.encode(e);
        e.put_u32(self.sender);
        self.aborts.encode(e);
        self.groups.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(AbortSetPayload {
            cen: Cen::decode(d)?,
            sender: d.get_u32()?,
            aborts: Vec::decode(d)?,
            groups: Vec::decode(d)?,
        })
    }
}

impl Wire for BackupEntry {
    fn encode(&self, e: &mut Enc) {
        e.put_u32(self.client);
        self.txn.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(BackupEntry {
            client: d.get_u32()?,
            txn: TaggedTxn::decode(d)?,
        })
    }
}

/// Layout: u8 form: 0 Entries, 1 Ack.
impl Wire for TxnBackup {
    fn encode(&self, e: &mut Enc) {
        match self {
            TxnBackup::Entries { origin, entries } => {
                e.put_u8(0);
                e.put_u32(*origin);
                entries.encode(e);
            }
            TxnBackup::Ack { origin, csns } => {
                e.put_u8(1);
                e.put_u32(*origin);
                csns.encode(e);
            }
        }
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        match d.get_u8()? {
            0 => Ok(TxnBackup::Entries {
                origin: d.get_u32()?,
                entries: Vec::decode(d)?,
            }),
            1 => Ok(TxnBackup::Ack {
                origin: d.get_u32()?,
                csns: Vec::decode(d)?,
            }),
            value => Err(CodecError::BadDiscriminant {
                type_name: "TxnBackup",
                value,
            }),
        }
    }
}

impl Wire for MembershipBeat {
    fn encode(&self, e: &mut Enc) {
        e.put_u32(self.sender);
        e.put_u64(self.view);
        self.stable_cen.encode(e);
        e.put_count(self.stable_tails.len());
        for (engine, lsn) in &self.stable_tails {
            engine.encode(e);
            e.put_u64(*lsn);
        }
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        let sender = d.get_u32()?;
        let view = d.get_u64()?;
        let stable_cen = Cen::decode(d)?;
        let n = d.get_count()?;
        let mut stable_tails = Vec::with_capacity(n);
        for _ in 0..n {
            stable_tails.push((EngineTag::decode(d)?, d.get_u64()?));
        }
        Ok(MembershipBeat {
            sender,
            view,
            stable_cen,
            stable_tails,
        })
    }
}

impl Wire for LeaderClaim {
    fn encode(&self, e: &mut Enc) {
        e.put_u32(self.claimant);
        e.put_u64(self.view);
        e.put_count(self.live.len());
        for n in &self.live {
            e.put_u32(*n);
        }
        self.activation_cen.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        let claimant = d.get_u32()?;
        let view = d.get_u64()?;
        let n = d.get_count()?;
        let mut live = Vec::with_capacity(n);
        for _ in 0..n {
            live.push(d.get_u32()?);
        }
        Ok(LeaderClaim {
            claimant,
            view,
            live,
            activation_cen: Cen::decode(d)?,
        })
    }
}

/// Layout: u8 form: 0 Push, 1 Ack.
impl Wire for LogPushFrame {
    fn encode(&self, e: &mut Enc) {
        match self {
            LogPushFrame::Push {
                pusher,
                origin,
                engine,
                cen,
                first_lsn,
                entries,
            } => {
                e.put_u8(0);
                e.put_u32(*pusher);
                e.put_u32(*origin);
                engine.encode(e);
                cen.encode(e);
                e.put_u64(*first_lsn);
                entries.encode(e);
            }
            LogPushFrame::Ack {
                origin,
                engine,
                cen,
                upto_lsn,
            } => {
                e.put_u8(1);
                e.put_u32(*origin);
                engine.encode(e);
                cen.encode(e);
                e.put_u64(*upto_lsn);
            }
        }
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        match d.get_u8()? {
            0 => Ok(LogPushFrame::Push {
                pusher: d.get_u32()?,
                origin: d.get_u32()?,
                engine: EngineTag::decode(d)?,
                cen: Cen::decode(d)?,
                first_lsn: d.get_u64()?,
                entries: Vec::decode(d)?,
            }),
            1 => Ok(LogPushFrame::Ack {
                origin: d.get_u32()?,
                engine: EngineTag::decode(d)?,
                cen: Cen::decode(d)?,
                upto_lsn: d.get_u64()?,
            }),
            value => Err(CodecError::BadDiscriminant {
                type_name: "LogPushFrame",
                value,
            }),
        }
    }
}

impl Wire for LogPullRequest {
    fn encode(&self, e: &mut Enc) {
        e.put_u32(self.origin);
        self.engine.encode(e);
        e.put_u64(self.after_lsn);
        e.put_u32(self.limit);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(LogPullRequest {
            origin: d.get_u32()?,
            engine: EngineTag::decode(d)?,
            after_lsn: d.get_u64()?,
            limit: d.get_u32()?,
        })
    }
}

/// Layout: u8 form: 0 Entries, 1 LsnAhead.
impl Wire for PullResult {
    fn encode(&self, e: &mut Enc) {
        match self {
            PullResult::Entries { entries, tail } => {
                e.put_u8(0);
                entries.encode(e);
                e.put_u64(*tail);
            }
            PullResult::LsnAhead { tail } => {
                e.put_u8(1);
                e.put_u64(*tail);
            }
        }
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        match d.get_u8()? {
            0 => Ok(PullResult::Entries {
                entries: Vec::decode(d)?,
                tail: d.get_u64()?,
            }),
            1 => Ok(PullResult::LsnAhead { tail: d.get_u64()? }),
            value => Err(CodecError::BadDiscriminant {
                type_name: "PullResult",
                value,
            }),
        }
    }
}

impl Wire for LogPullReply {
    fn encode(&self, e: &mut Enc) {
        e.put_u32(self.origin);
        self.engine.encode(e);
        e.put_u64(self.after_lsn);
        self.result.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(LogPullReply {
            origin: d.get_u32()?,
            engine: EngineTag::decode(d)?,
            after_lsn: d.get_u64()?,
            result: PullResult::decode(d)?,
        })
    }
}

impl Wire for ReadStamp {
    fn encode(&self, e: &mut Enc) {
        self.csn.encode(e);
        e.put_bool(self.deleted);
        e.put_bytes(&self.value);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(ReadStamp {
            csn: Csn::decode(d)?,
            deleted: d.get_bool()?,
            value: d.get_bytes()?,
        })
    }
}

/// Layout: u8 tag: 0 Decided+decision, 1 Pending, 2 Unknown.
impl Wire for TxnStatus {
    fn encode(&self, e: &mut Enc) {
        match self {
            TxnStatus::Decided(decision) => {
                e.put_u8(0);
                decision.encode(e);
            }
            TxnStatus::Pending => e.put_u8(1),
            TxnStatus::Unknown => e.put_u8(2),
        }
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        match d.get_u8()? {
            0 => Ok(TxnStatus::Decided(Decision::decode(d)?)),
            1 => Ok(TxnStatus::Pending),
            2 => Ok(TxnStatus::Unknown),
            value => Err(CodecError::BadDiscriminant {
                type_name: "TxnStatus",
                value,
            }),
        }
    }
}

impl Wire for EpochReportRow {
    fn encode(&self, e: &mut Enc) {
        self.cen.encode(e);
        e.put_bool(self.finalized);
        e.put_bool(self.has_route);
        e.put_bool(self.has_writes);
        e.put_bool(self.has_abort);
        self.dead_backups.encode(e);
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(EpochReportRow {
            cen: Cen::decode(d)?,
            finalized: d.get_bool()?,
            has_route: d.get_bool()?,
            has_writes: d.get_bool()?,
            has_abort: d.get_bool()?,
            dead_backups: Vec::decode(d)?,
        })
    }
}

/// Layout: u8 form: 0 Finish, 1 Reexecute.
impl Wire for RecoveryAction {
    fn encode(&self, e: &mut Enc) {
        match self {
            RecoveryAction::Finish { cen } => {
                e.put_u8(0);
                cen.encode(e);
            }
            RecoveryAction::Reexecute { cen, txns } => {
                e.put_u8(1);
                cen.encode(e);
                txns.encode(e);
            }
        }
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        match d.get_u8()? {
            0 => Ok(RecoveryAction::Finish { cen: Cen::decode(d)? }),
            1 => Ok(RecoveryAction::Reexecute {
                cen: Cen::decode(d)?,
                txns: Vec::decode(d)?,
            }),
            value => Err(CodecError::BadDiscriminant {
                type_name: "RecoveryAction",
                value,
            }),
        }
    }
}

impl Wire for AdminMsg {
    fn encode(&self, e: &mut Enc) {
        match self {
            AdminMsg::GetData { req_id, key } => {
                e.put_u8(0);
                e.put_u64(*req_id);
                e.put_bytes(key);
            }
            AdminMsg::GetDataResp { req_id, stamp } => {
                e.put_u8(1);
                e.put_u64(*req_id);
                stamp.encode(e);
            }
            AdminMsg::GetMeta { req_id } => {
                e.put_u8(2);
                e.put_u64(*req_id);
            }
            AdminMsg::GetMetaResp {
                req_id,
                engine,
                watermark,
                received_lsns,
            } => {
                e.put_u8(3);
                e.put_u64(*req_id);
                engine.encode(e);
                watermark.encode(e);
                e.put_count(received_lsns.len());
                for (node, lsn) in received_lsns {
                    e.put_u32(*node);
                    e.put_u64(*lsn);
                }
            }
            AdminMsg::EpochStatus { req_id } => {
                e.put_u8(4);
                e.put_u64(*req_id);
            }
            AdminMsg::EpochStatusResp {
                req_id,
                node,
                view,
                open_cen,
                finalized_cen,
            } => {
                e.put_u8(5);
                e.put_u64(*req_id);
                e.put_u32(*node);
                e.put_u64(*view);
                open_cen.encode(e);
                finalized_cen.encode(e);
            }
            AdminMsg::TriggerReshard {
                req_id,
                new_map,
                cutover,
            } => {
                e.put_u8(6);
                e.put_u64(*req_id);
                new_map.encode(e);
                cutover.encode(e);
            }
            AdminMsg::TriggerReshardResp {
                req_id,
                accepted,
                current_cen,
            } => {
                e.put_u8(7);
                e.put_u64(*req_id);
                e.put_bool(*accepted);
                current_cen.encode(e);
            }
            AdminMsg::GetMetrics { req_id } => {
                e.put_u8(8);
                e.put_u64(*req_id);
            }
            AdminMsg::GetMetricsResp { req_id, counters } => {
                e.put_u8(9);
                e.put_u64(*req_id);
                e.put_count(counters.len());
                for (name, value) in counters {
                    e.put_str(name);
                    e.put_u64(*value);
                }
            }
            AdminMsg::DecisionStatus {
                req_id,
                origin,
                client,
                txn_id,
            } => {
                e.put_u8(10);
                e.put_u64(*req_id);
                e.put_u32(*origin);
                e.put_u32(*client);
                e.put_u64(*txn_id);
            }
            AdminMsg::DecisionStatusResp { req_id, status } => {
                e.put_u8(11);
                e.put_u64(*req_id);
                status.encode(e);
            }
            AdminMsg::SnapshotTransfer {
                map_version,
                old_shard,
                new_shard,
                sender,
                entries,
            } => {
                e.put_u8(12);
                e.put_u32(*map_version);
                e.put_u32(*old_shard);
                e.put_u32(*new_shard);
                e.put_u32(*sender);
                e.put_count(entries.len());
                for (key, entry) in entries {
                    e.put_bytes(key);
                    entry.encode(e);
                }
            }
            AdminMsg::StateSyncReq {
                joiner,
                shards,
                log_tails,
            } => {
                e.put_u8(13);
                e.put_u32(*joiner);
                e.put_count(shards.len());
                for s in shards {
                    e.put_u32(*s);
                }
                e.put_count(log_tails.len());
                for (engine, lsn) in log_tails {
                    engine.encode(e);
                    e.put_u64(*lsn);
                }
            }
            AdminMsg::StateSyncResp {
                view,
                live,
                open_cen,
                finalized_cen,
                time_floor,
                map,
                snapshots,
                log_catchup,
                decisions,
                peers,
            } => {
                e.put_u8(14);
                e.put_u64(*view);
                e.put_count(live.len());
                for n in live {
                    e.put_u32(*n);
                }
                open_cen.encode(e);
                finalized_cen.encode(e);
                e.put_u64(*time_floor);
                map.encode(e);
                e.put_count(snapshots.len());
                for (shard, snap) in snapshots {
                    e.put_u32(*shard);
                    snap.encode(e);
                }
                log_catchup.encode(e);
                e.put_count(decisions.len());
                for (client, txn_id, decision) in decisions {
                    e.put_u32(*client);
                    e.put_u64(*txn_id);
                    decision.encode(e);
                }
                e.put_count(peers.len());
                for (node, stable, tails) in peers {
                    e.put_u32(*node);
                    stable.encode(e);
                    e.put_count(tails.len());
                    for (engine, lsn) in tails {
                        engine.encode(e);
                        e.put_u64(*lsn);
                    }
                }
            }
            AdminMsg::EpochReport {
                view,
                reporter,
                dead,
                rows,
            } => {
                e.put_u8(15);
                e.put_u64(*view);
                e.put_u32(*reporter);
                e.put_u32(*dead);
                rows.encode(e);
            }
            AdminMsg::RecoveryPlan {
                view,
                planner,
                actions,
            } => {
                e.put_u8(16);
                e.put_u64(*view);
                e.put_u32(*planner);
                actions.encode(e);
            }
            AdminMsg::Tick { close_cen } => {
                e.put_u8(17);
                close_cen.encode(e);
            }
            AdminMsg::Hello { from } => {
                e.put_u8(18);
                from.encode(e);
            }
        }
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        let tag = d.get_u8()?;
        Ok(match tag {
            0 => AdminMsg::GetData {
                req_id: d.get_u64()?,
                key: d.get_bytes()?,
            },
            1 => AdminMsg::GetDataResp {
                req_id: d.get_u64()?,
                stamp: Option::decode(d)?,
            },
            2 => AdminMsg::GetMeta { req_id: d.get_u64()? },
            3 => {
                let req_id = d.get_u64()?;
                let engine = EngineTag::decode(d)?;
                let watermark = Cen::decode(d)?;
                let n = d.get_count()?;
                let mut received_lsns = Vec::with_capacity(n);
                for _ in 0..n {
                    received_lsns.push((d.get_u32()?, d.get_u64()?));
                }
                AdminMsg::GetMetaResp {
                    req_id,
                    engine,
                    watermark,
                    received_lsns,
                }
            }
            4 => AdminMsg::EpochStatus { req_id: d.get_u64()? },
            5 => AdminMsg::EpochStatusResp {
                req_id: d.get_u64()?,
                node: d.get_u32()?,
                view: d.get_u64()?,
                open_cen: Cen::decode(d)?,
                finalized_cen: Cen::decode(d)?,
            },
            6 => AdminMsg::TriggerReshard {
                req_id: d.get_u64()?,
                new_map: ShardMap::decode(d)?,
                cutover: Cen::decode(d)?,
            },
            7 => AdminMsg::TriggerReshardResp {
                req_id: d.get_u64()?,
                accepted: d.get_bool()?,
                current_cen: Cen::decode(d)?,
            },
            8 => AdminMsg::GetMetrics { req_id: d.get_u64()? },
            9 => {
                let req_id = d.get_u64()?;
                let n = d.get_count()?;
                let mut counters = Vec::with_capacity(n);
                for _ in 0..n {
                    counters.push((d.get_str()?, d.get_u64()?));
                }
                AdminMsg::GetMetricsResp { req_id, counters }
            }
            10 => AdminMsg::DecisionStatus {
                req_id: d.get_u64()?,
                origin: d.get_u32()?,
                client: d.get_u32()?,
                txn_id: d.get_u64()?,
            },
            11 => AdminMsg::DecisionStatusResp {
                req_id: d.get_u64()?,
                status: TxnStatus::decode(d)?,
            },
            12 => {
                let map_version = d.get_u32()?;
                let old_shard = d.get_u32()?;
                let new_shard = d.get_u32()?;
                let sender = d.get_u32()?;
                let n = d.get_count()?;
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    let key = d.get_bytes()?;
                    entries.push((key, VersionMapEntry::decode(d)?));
                }
                AdminMsg::SnapshotTransfer {
                    map_version,
                    old_shard,
                    new_shard,
                    sender,
                    entries,
                }
            }
            13 => {
                let joiner = d.get_u32()?;
                let n = d.get_count()?;
                let mut shards = Vec::with_capacity(n);
                for _ in 0..n {
                    shards.push(d.get_u32()?);
                }
                let n = d.get_count()?;
                let mut log_tails = Vec::with_capacity(n);
                for _ in 0..n {
                    log_tails.push((EngineTag::decode(d)?, d.get_u64()?));
                }
                AdminMsg::StateSyncReq {
                    joiner,
                    shards,
                    log_tails,
                }
            }
            14 => {
                let view = d.get_u64()?;
                let n = d.get_count()?;
                let mut live = Vec::with_capacity(n);
                for _ in 0..n {
                    live.push(d.get_u32()?);
                }
                let open_cen = Cen::decode(d)?;
                let finalized_cen = Cen::decode(d)?;
                let time_floor = d.get_u64()?;
                let map = ShardMap::decode(d)?;
                let n = d.get_count()?;
                let mut snapshots = Vec::with_capacity(n);
                for _ in 0..n {
                    let shard = d.get_u32()?;
                    snapshots.push((shard, GlobalWriteVersionMap::decode(d)?));
                }
                let log_catchup = Vec::decode(d)?;
                let n = d.get_count()?;
                let mut decisions = Vec::with_capacity(n);
                for _ in 0..n {
                    decisions.push((d.get_u32()?, d.get_u64()?, Decision::decode(d)?));
                }
                let n = d.get_count()?;
                let mut peers = Vec::with_capacity(n);
                for _ in 0..n {
                    let node = d.get_u32()?;
                    let stable = Cen::decode(d)?;
                    let m = d.get_count()?;
                    let mut tails = Vec::with_capacity(m);
                    for _ in 0..m {
                        tails.push((EngineTag::decode(d)?, d.get_u64()?));
                    }
                    peers.push((node, stable, tails));
                }
                AdminMsg::StateSyncResp {
                    view,
                    live,
                    open_cen,
                    finalized_cen,
                    time_floor,
                    map,
                    snapshots,
                    log_catchup,
                    decisions,
                    peers,
                }
            }
            15 => AdminMsg::EpochReport {
                view: d.get_u64()?,
                reporter: d.get_u32()?,
                dead: d.get_u32()?,
                rows: Vec::decode(d)?,
            },
            16 => AdminMsg::RecoveryPlan {
                view: d.get_u64()?,
                planner: d.get_u32()?,
                actions: Vec::decode(d)?,
            },
            17 => AdminMsg::Tick {
                close_cen: Cen::decode(d)?,
            },
            18 => AdminMsg::Hello {
                from: Addr::decode(d)?,
            },
            value => {
                return Err(CodecError::BadDiscriminant {
                    type_name: "AdminMsg",
                    value,
                })
            }
        })
    }
}

impl Message {
    fn encode_body(&self, e: &mut Enc) {
        match self {
            Message::SubmitTxn(m) => m.encode(e),
            Message::DecisionReply(m) => m.encode(e),
            Message::SubTxnRoute(m) => m.encode(e),
            Message::WriteSetPayload(m) => m.encode(e),
            Message::AbortSetPayload(m) => m.encode(e),
            Message::TxnBackup(m) => m.encode(e),
            Message::MembershipBeat(m) => m.encode(e),
            Message::LeaderClaim(m) => m.encode(e),
            Message::LogPushFrame(m) => m.encode(e),
            Message::LogPullRequest(m) => m.encode(e),
            Message::LogPullReply(m) => m.encode(e),
            Message::AdminFrame(m) => m.encode(e),
        }
    }

    fn decode_body(kind: MessageKind, d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(match kind {
            MessageKind::SubmitTxn => Message::SubmitTxn(SubmitTxn::decode(d)?),
            MessageKind::DecisionReply => Message::DecisionReply(DecisionReply::decode(d)?),
            MessageKind::SubTxnRoute => Message::SubTxnRoute(SubTxnRoute::decode(d)?),
            MessageKind::WriteSetPayload => Message::WriteSetPayload(WriteSetPayload::decode(d)?),
            MessageKind::AbortSetPayload => Message::AbortSetPayload(AbortSetPayload::decode(d)?),
            MessageKind::TxnBackup => Message::TxnBackup(TxnBackup::decode(d)?),
            MessageKind::MembershipBeat => Message::MembershipBeat(MembershipBeat::decode(d)?),
            MessageKind::LeaderClaim => Message::LeaderClaim(LeaderClaim::decode(d)?),
            MessageKind::LogPushFrame => Message::LogPushFrame(LogPushFrame::decode(d)?),
            MessageKind::LogPullRequest => Message::LogPullRequest(LogPullRequest::decode(d)?),
            MessageKind::LogPullReply => Message::LogPullReply(LogPullReply::decode(d)?),
            MessageKind::AdminFrame => Message::AdminFrame(AdminMsg::decode(d)?),
        })
    }
}

// ---- TCP framing ----

/// Serializes one envelope as a self-describing TCP frame.
pub fn encode_frame(env: &Envelope) -> Vec<u8> {
    let mut inner = Enc::new();
    inner.put_u8(env.msg.kind().as_u8());
    inner.put_u8(FRAME_VERSION);
    env.src.encode(&mut inner);
    env.dst.encode(&mut inner);
    env.msg.encode_body(&mut inner);
    let crc = crc32(inner.as_bytes());

    let mut out = Enc::with_capacity(inner.len() + 8);
    out.put_u32((inner.len() + 4) as u32);
    let mut bytes = out.into_bytes();
    bytes.extend_from_slice(inner.as_bytes());
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

/// Outcome of attempting to read one frame from a byte stream.
#[derive(Debug)]
pub enum FrameOutcome {
    /// Not enough bytes yet; need at least this many more.
    Incomplete(usize),
    /// A whole frame was consumed (`used` bytes) and decoded.
    Frame { env: Envelope, used: usize },
}

/// Decodes one frame from the front of `buf`.
pub fn decode_frame(buf: &[u8]) -> Result<FrameOutcome, NetError> {
    if buf.len() < 4 {
        return Ok(FrameOutcome::Incomplete(4 - buf.len()));
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
    if len < 4 + 2 {
        return Err(NetError::FrameCorrupt(format!("frame length {len} too small")));
    }
    if buf.len() < 4 + len {
        return Ok(FrameOutcome::Incomplete(4 + len - buf.len()));
    }
    let inner = &buf[4..4 + len - 4];
    let crc_bytes = &buf[4 + len - 4..4 + len];
    let expect = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32(inner) != expect {
        return Err(NetError::FrameCorrupt("crc mismatch".into()));
    }
    let mut d = Dec::new(inner);
    let kind_byte = d.get_u8().map_err(|e| NetError::FrameCorrupt(e.to_string()))?;
    let kind = MessageKind::from_u8(kind_byte)
        .ok_or_else(|| NetError::FrameCorrupt(format!("unknown kind {kind_byte}")))?;
    let version = d.get_u8().map_err(|e| NetError::FrameCorrupt(e.to_string()))?;
    if version != FRAME_VERSION {
        return Err(NetError::FrameCorrupt(format!("unsupported version {version}")));
    }
    let src = Addr::decode(&mut d).map_err(|e| NetError::FrameCorrupt(e.to_string()))?;
    let dst = Addr::decode(&mut d).map_err(|e| NetError::FrameCorrupt(e.to_string()))?;
    let msg = Message::decode_body(kind, &mut d).map_err(|e| NetError::FrameCorrupt(e.to_string()))?;
    d.finish().map_err(|e| NetError::FrameCorrupt(e.to_string()))?;
    Ok(FrameOutcome::Frame {
        env: Envelope { src, dst, msg },
        used: 4 + len,
    })
}

/// Incremental frame reassembler for a TCP stream.
#[derive(Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, if any. Corrupt data poisons the stream (the
    /// connection should be dropped).
    pub fn next_frame(&mut self) -> Result<Option<Envelope>, NetError> {
        match decode_frame(&self.buf)? {
            FrameOutcome::Incomplete(_) => Ok(None),
            FrameOutcome::Frame { env, used } => {
                self.buf.drain(..used);
                Ok(Some(env))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EngineTag, GroupRef, OpType, ReadVersion, Verdict};

    fn sample_request() -> TxnRequest {
        TxnRequest {
            txn_id: 42,
            engine: EngineTag(1),
            begin_epoch: Cen(3),
            read_set: vec![ReadRecord::new(
                b"r".to_vec(),
                ReadVersion::Committed(Csn::new(2, 1)),
            )],
            write_set: vec![WriteRecord {
                key: b"w".to_vec(),
                op: OpType::Update,
                value: b"v".to_vec(),
            }],
            cross_model_group: Some(GroupRef {
                group_id: 9,
                expected_members: 2,
            }),
        }
    }

    fn sample_envelopes() -> Vec<Envelope> {
        let tagged = TaggedTxn {
            csn: Csn::new(7, 2),
            cen: Cen(4),
            origin_node: 2,
            request: sample_request(),
        };
        vec![
            Envelope {
                src: Addr::Client(1),
                dst: Addr::Cc(2),
                msg: Message::SubmitTxn(SubmitTxn {
                    request: sample_request(),
                }),
            },
            Envelope {
                src: Addr::Cc(2),
                dst: Addr::Client(1),
                msg: Message::DecisionReply(DecisionReply {
                    txn_id: 42,
                    result: SubmitResult::Decided(Decision {
                        csn: Csn::new(7, 2),
                        cen: Cen(4),
                        verdict: Verdict::Committed,
                    }),
                }),
            },
            Envelope {
                src: Addr::Cc(2),
                dst: Addr::Cc(3),
                msg: Message::SubTxnRoute(SubTxnRoute {
                    cen: Cen(4),
                    origin: 2,
                    subtxns: vec![SubTxn {
                        csn: Csn::new(7, 2),
                        shard: 1,
                        read_set: sample_request().read_set,
                        write_set: sample_request().write_set,
                    }],
                }),
            },
            Envelope {
                src: Addr::Cc(3),
                dst: Addr::Cc(2),
                msg: Message::WriteSetPayload(WriteSetPayload {
                    cen: Cen(4),
                    shard: 1,
                    sender: 3,
                    writers: vec![ShardWriter {
                        csn: Csn::new(7, 2),
                        writes: sample_request().write_set,
                    }],
                }),
            },
            Envelope {
                src: Addr::Cc(3),
                dst: Addr::Cc(2),
                msg: Message::AbortSetPayload(AbortSetPayload {
                    cen: Cen(4),
                    sender: 3,
                    aborts: vec![AbortEntry {
                        csn: Csn::new(9, 1),
                        reason: AbortReason::LostCompare,
                    }],
                    groups: vec![GroupDecl {
                        group_id: 9,
                        members: vec![Csn::new(7, 2), Csn::new(8, 2)],
                    }],
                }),
            },
            Envelope {
                src: Addr::Cc(2),
                dst: Addr::Cc(3),
                msg: Message::TxnBackup(TxnBackup::Entries {
                    origin: 2,
                    entries: vec![BackupEntry {
                        client: 1,
                        txn: tagged.clone(),
                    }],
                }),
            },
            Envelope {
                src: Addr::Cc(3),
                dst: Addr::Cc(2),
                msg: Message::TxnBackup(TxnBackup::Ack {
                    origin: 2,
                    csns: vec![Csn::new(7, 2)],
                }),
            },
            Envelope {
                src: Addr::Cc(1),
                dst: Addr::Cc(2),
                msg: Message::MembershipBeat(MembershipBeat {
                    sender: 1,
                    view: 3,
                    stable_cen: Cen(9),
                    stable_tails: vec![(EngineTag(1), 12), (EngineTag(2), 3)],
                }),
            },
            Envelope {
                src: Addr::Cc(2),
                dst: Addr::Cc(3),
                msg: Message::LeaderClaim(LeaderClaim {
                    claimant: 2,
                    view: 4,
                    live: vec![2, 3],
                    activation_cen: Cen(0),
                }),
            },
            Envelope {
                src: Addr::Cc(2),
                dst: Addr::Cc(3),
                msg: Message::AdminFrame(AdminMsg::SnapshotTransfer {
                    map_version: 2,
                    old_shard: 1,
                    new_shard: 5,
                    sender: 2,
                    entries: vec![(
                        b"k".to_vec(),
                        VersionMapEntry {
                            committed_csn: Csn::new(2, 1),
                            tombstone: false,
                        },
                    )],
                }),
            },
            Envelope {
                src: Addr::Cc(2),
                dst: Addr::Storage(1),
                msg: Message::LogPushFrame(LogPushFrame::Push {
                    pusher: 2,
                    origin: 2,
                    engine: EngineTag(1),
                    cen: Cen(4),
                    first_lsn: 10,
                    entries: vec![LogEntry::new(
                        10,
                        Cen(4),
                        Csn::new(7, 2),
                        EngineTag(1),
                        sample_request().write_set,
                    )],
                }),
            },
            Envelope {
                src: Addr::Storage(1),
                dst: Addr::Cc(2),
                msg: Message::LogPullRequest(LogPullRequest {
                    origin: 2,
                    engine: EngineTag(1),
                    after_lsn: 4,
                    limit: 100,
                }),
            },
            Envelope {
                src: Addr::Cc(2),
                dst: Addr::Storage(1),
                msg: Message::LogPullReply(LogPullReply {
                    origin: 2,
                    engine: EngineTag(1),
                    after_lsn: 4,
                    result: PullResult::LsnAhead { tail: 3 },
                }),
            },
            Envelope {
                src: Addr::Client(9),
                dst: Addr::Storage(1),
                msg: Message::AdminFrame(AdminMsg::GetData {
                    req_id: 77,
                    key: b"k".to_vec(),
                }),
            },
            Envelope {
                src: Addr::Storage(1),
                dst: Addr::Client(9),
                msg: Message::AdminFrame(AdminMsg::GetDataResp {
                    req_id: 77,
                    stamp: Some(ReadStamp {
                        csn: Csn::new(2, 1),
                        deleted: false,
                        value: b"v".to_vec(),
                    }),
                }),
            },
            Envelope {
                src: Addr::Cc(1),
                dst: Addr::Cc(2),
                msg: Message::AdminFrame(AdminMsg::RecoveryPlan {
                    view: 5,
                    planner: 1,
                    actions: vec![
                        RecoveryAction::Finish { cen: Cen(7) },
                        RecoveryAction::Reexecute {
                            cen: Cen(8),
                            txns: vec![BackupEntry {
                                client: 4,
                                txn: tagged.clone(),
                            }],
                        },
                    ],
                }),
            },
            Envelope {
                src: Addr::Cc(3),
                dst: Addr::Cc(1),
                msg: Message::AdminFrame(AdminMsg::EpochReport {
                    view: 5,
                    reporter: 3,
                    dead: 2,
                    rows: vec![EpochReportRow {
                        cen: Cen(8),
                        finalized: false,
                        has_route: true,
                        has_writes: false,
                        has_abort: false,
                        dead_backups: vec![BackupEntry {
                            client: 4,
                            txn: tagged.clone(),
                        }],
                    }],
                }),
            },
            Envelope {
                src: Addr::Cc(3),
                dst: Addr::Cc(1),
                msg: Message::AdminFrame(AdminMsg::StateSyncReq {
                    joiner: 3,
                    shards: vec![0, 2],
                    log_tails: vec![(EngineTag(1), 14)],
                }),
            },
            Envelope {
                src: Addr::Cc(1),
                dst: Addr::Cc(3),
                msg: Message::AdminFrame(AdminMsg::StateSyncResp {
                    view: 5,
                    live: vec![1, 2],
                    open_cen: Cen(9),
                    finalized_cen: Cen(8),
                    time_floor: 31,
                    map: ShardMap::uniform(1, 4, &[1, 2, 3], 2),
                    snapshots: vec![(0, {
                        let mut m = GlobalWriteVersionMap::new(Cen(8));
                        m.install(
                            b"k".to_vec(),
                            VersionMapEntry {
                                committed_csn: Csn::new(2, 1),
                                tombstone: false,
                            },
                        );
                        m
                    })],
                    log_catchup: vec![LogEntry::new(
                        15,
                        Cen(8),
                        Csn::new(30, 3),
                        EngineTag(1),
                        sample_request().write_set,
                    )],
                    decisions: vec![(
                        4,
                        42,
                        Decision {
                            csn: Csn::new(30, 3),
                            cen: Cen(8),
                            verdict: Verdict::Committed,
                        },
                    )],
                    peers: vec![(2, Cen(7), vec![(EngineTag(1), 9)])],
                }),
            },
        ]
    }

    #[test]
    fn every_message_kind_round_trips_through_a_frame() {
        for env in sample_envelopes() {
            let bytes = encode_frame(&env);
            match decode_frame(&bytes).unwrap() {
                FrameOutcome::Frame { env: decoded, used } => {
                    assert_eq!(used, bytes.len());
                    assert_eq!(decoded, env);
                }
                other => panic!("expected frame, got {other:?}"),
            }
        }
    }

    #[test]
    fn frame_reader_reassembles_split_and_batched_frames() {
        let envs = sample_envelopes();
        let mut stream = Vec::new();
        for env in &envs {
            stream.extend_from_slice(&encode_frame(env));
        }

        let mut reader = FrameReader::new();
        let mut decoded = Vec::new();
        // Feed the stream in awkward 7-byte chunks.
        for chunk in stream.chunks(7) {
            reader.push(chunk);
            while let Some(env) = reader.next_frame().unwrap() {
                decoded.push(env);
            }
        }
        assert_eq!(decoded, envs);
    }

    #[test]
    fn corrupted_frame_is_rejected() {
        let env = &sample_envelopes()[0];
        let mut bytes = encode_frame(env);
        let n = bytes.len();
        bytes[n / 2] ^= 0x40;
        match decode_frame(&bytes) {
            Err(NetError::FrameCorrupt(_)) => {}
            other => panic!("expected FrameCorrupt, got {other:?}"),
        }
    }

    #[test]
    fn truncated_frame_reports_incomplete() {
        let env = &sample_envelopes()[0];
        let bytes = encode_frame(env);
        match decode_frame(&bytes[..bytes.len() - 3]).unwrap() {
            FrameOutcome::Incomplete(need) => assert_eq!(need, 3),
            other => panic!("expected incomplete, got {other:?}"),
        }
    }

    #[test]
    fn lowest_live_id_wins_election() {
        let live: BTreeSet<NodeId> = [2, 3].into();
        assert_eq!(elect_leader(&live), Some(2));
        assert_eq!(elect_leader(&BTreeSet::new()), None);
    }

    #[test]
    fn txn_leader_falls_back_to_lowest_live() {
        let view = MembershipView {
            view: 1,
            live: [2, 3].into(),
        };
        assert_eq!(view.txn_leader(3), Some(3));
        assert_eq!(view.txn_leader(1), Some(2));
    }

    #[test]
    fn majority_thresholds() {
        assert_eq!(majority(1), 1);
        assert_eq!(majority(2), 2);
        assert_eq!(majority(3), 2);
        assert_eq!(majority(4), 3);
        assert_eq!(majority(5), 3);
    }
}
