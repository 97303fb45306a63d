//! Domain types shared by every other module: commit sequence numbers,
//! epochs, read/write records, transaction envelopes, and decisions.
//!
//! All types here are immutable value objects; they are safe to clone and
//! ship across threads or the wire. Each type's canonical byte layout is
//! documented on its `Wire` impl and exercised by round-trip tests.

use crate::codec::{CodecError, Dec, Enc, Wire};
use thiserror::Error;

/// Identifier of a concurrency-control node. Node ids start at 1; id 0 is
/// reserved for the genesis preload writer.
pub type NodeId = u32;

/// Opaque record key as supplied by an execution engine.
pub type Key = Vec<u8>;

/// Opaque record payload.
pub type Value = Vec<u8>;

/// Commit sequence number: the total-order tag a CC node assigns to each
/// transaction it receives.
///
/// `local_time` is microseconds in live mode and a per-node monotonic
/// counter in deterministic mode. Uniqueness holds because each node
/// strictly increases `local_time` and `node_id` breaks ties across nodes.
///
/// The derived `Ord` is the system-wide commit order: `local_time` first,
/// `node_id` second. See [`csn_precedes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Csn {
    pub local_time: u64,
    pub node_id: NodeId,
}

impl Csn {
    pub const fn new(local_time: u64, node_id: NodeId) -> Self {
        Self {
            local_time,
            node_id,
        }
    }
}

impl std::fmt::Display for Csn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.local_time, self.node_id)
    }
}

/// Strict total order over commit sequence numbers: `a` precedes `b` iff
/// `a.local_time < b.local_time`, or the times are equal and
/// `a.node_id < b.node_id`. Irreflexive: `csn_precedes(x, x)` is false.
pub fn csn_precedes(a: Csn, b: Csn) -> bool {
    a < b
}

/// Commit epoch number. Epochs are numbered from 1 and strictly increase;
/// every transaction belongs to exactly one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cen(pub u64);

impl Cen {
    pub const fn next(self) -> Cen {
        Cen(self.0 + 1)
    }

    pub const fn prev(self) -> Cen {
        Cen(self.0 - 1)
    }
}

impl std::fmt::Display for Cen {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Class of execution engine that produced a transaction's writes. Logs are
/// labeled per engine so each storage backend receives only its own entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EngineTag(pub u16);

/// Kind of write a transaction intends against one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpType {
    Insert,
    Update,
    Delete,
}

/// One intended write. `value` is empty for `Delete`; a tombstone is
/// materialized downstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteRecord {
    pub key: Key,
    pub op: OpType,
    pub value: Value,
}

impl WriteRecord {
    pub fn insert(key: impl Into<Key>, value: impl Into<Value>) -> Self {
        Self {
            key: key.into(),
            op: OpType::Insert,
            value: value.into(),
        }
    }

    pub fn update(key: impl Into<Key>, value: impl Into<Value>) -> Self {
        Self {
            key: key.into(),
            op: OpType::Update,
            value: value.into(),
        }
    }

    pub fn delete(key: impl Into<Key>) -> Self {
        Self {
            key: key.into(),
            op: OpType::Delete,
            value: Vec::new(),
        }
    }
}

/// The committed version an executor observed for a read: either the writer's
/// Csn stamped on the value, or `Initial` for a key never written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReadVersion {
    Initial,
    Committed(Csn),
}

/// One observed read, reported for validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadRecord {
    pub key: Key,
    pub read_version: ReadVersion,
}

impl ReadRecord {
    pub fn new(key: impl Into<Key>, read_version: ReadVersion) -> Self {
        Self {
            key: key.into(),
            read_version,
        }
    }
}

/// Cross-model group membership: all member transactions of `group_id`
/// commit or abort together once `expected_members` of them have arrived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupRef {
    pub group_id: u64,
    pub expected_members: u32,
}

/// A transaction as submitted by an execution proxy: the observed read set,
/// the intended write set, and bookkeeping for routing the decision back.
///
/// Invariants enforced at admission: keys are distinct within the write set
/// and within the read set (the proxy deduplicates to last-write-wins before
/// submission); every key is non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnRequest {
    /// Client-scoped id, unique per submitting client.
    pub txn_id: u64,
    /// Which engine class produced this transaction; stamps its log entries.
    pub engine: EngineTag,
    /// Epoch the client observed when the transaction began. Informational:
    /// validation always runs against the snapshot preceding the
    /// transaction's own commit epoch.
    pub begin_epoch: Cen,
    pub read_set: Vec<ReadRecord>,
    pub write_set: Vec<WriteRecord>,
    pub cross_model_group: Option<GroupRef>,
}

impl TxnRequest {
    pub fn is_read_only(&self) -> bool {
        self.write_set.is_empty()
    }
}

/// A transaction after admission: tagged with its commit sequence number and
/// commit epoch by the receiving node. `csn.node_id == origin_node` always.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedTxn {
    pub csn: Csn,
    pub cen: Cen,
    pub origin_node: NodeId,
    pub request: TxnRequest,
}

/// Why a transaction aborted.
///
/// The derived `Ord` is the priority used when independently derived reasons
/// for one transaction are merged across shards: the smallest reason wins,
/// so every replica reports the same one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AbortReason {
    /// A read observed a version no longer (or not yet) in the snapshot.
    ReadValidation,
    /// Insert of a key that already exists in the snapshot.
    WriteExists,
    /// Update/Delete of a key absent from (or tombstoned in) the snapshot.
    RowMissing,
    /// Lost the epoch write-intent comparison to a smaller Csn.
    LostCompare,
    /// Another member of the transaction's cross-model group aborted.
    CrossModelPeerAborted,
    /// The transaction was dropped when its epoch was re-executed after a
    /// node failure and no backup of it survived.
    EpochReexecutionDropped,
    /// A shard the transaction touches had no live replica when its epoch
    /// was routed, so nothing could validate or resolve it.
    ShardUnavailable,
}

/// Final verdict for one transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Committed,
    Aborted(AbortReason),
}

impl Verdict {
    pub fn is_committed(self) -> bool {
        matches!(self, Verdict::Committed)
    }
}

/// The single, final decision for a submitted transaction. Exactly one is
/// produced per transaction per run; `cen` is the epoch that decided it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub csn: Csn,
    pub cen: Cen,
    pub verdict: Verdict,
}

/// Live clock handed a non-increasing reading. The deterministic counter
/// clock cannot produce this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("clock regression: last issued local_time {last}, clock supplied {supplied}")]
pub struct ClockRegression {
    pub last: u64,
    pub supplied: u64,
}

/// Per-node transaction tagger: assigns fresh `(local_time, node_id)` pairs
/// and the node's currently open epoch.
///
/// One tagger exists per CC node and serializes all tagging on that node, so
/// `local_time` strictly increases per node and Csns are globally unique.
#[derive(Debug, Clone)]
pub struct TxnTagger {
    node_id: NodeId,
    last_time: u64,
    open_cen: Cen,
}

impl TxnTagger {
    /// Fresh tagger: counter starts so the first tag gets `local_time` 1,
    /// with epoch 1 open.
    pub fn new(node_id: NodeId) -> Self {
        Self {
            node_id,
            last_time: 0,
            open_cen: Cen(1),
        }
    }

    /// Rebuilds a tagger from recovered state. A recovering node must restore
    /// `last_time` from peers or its log before tagging again, or it would
    /// reissue Csns.
    pub fn restore(node_id: NodeId, last_time: u64, open_cen: Cen) -> Self {
        Self {
            node_id,
            last_time,
            open_cen,
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn last_time(&self) -> u64 {
        self.last_time
    }

    pub fn open_cen(&self) -> Cen {
        self.open_cen
    }

    /// Advances the open epoch. Epochs only move forward.
    pub fn set_open_cen(&mut self, cen: Cen) {
        debug_assert!(cen >= self.open_cen);
        self.open_cen = cen;
    }

    /// Tags with the deterministic counter clock: `local_time` is the
    /// previous value plus one. Infallible by construction.
    pub fn tag(&mut self, request: TxnRequest) -> TaggedTxn {
        self.last_time += 1;
        self.make(request)
    }

    /// Tags with an externally read live clock (microseconds). The reading
    /// must exceed every previously issued `local_time`.
    pub fn tag_live(&mut self, request: TxnRequest, now_us: u64) -> Result<TaggedTxn, ClockRegression> {
        if now_us <= self.last_time {
            return Err(ClockRegression {
                last: self.last_time,
                supplied: now_us,
            });
        }
        self.last_time = now_us;
        Ok(self.make(request))
    }

    fn make(&self, request: TxnRequest) -> TaggedTxn {
        TaggedTxn {
            csn: Csn::new(self.last_time, self.node_id),
            cen: self.open_cen,
            origin_node: self.node_id,
            request,
        }
    }
}

// ---- canonical byte layouts ----

/// Layout: `local_time` u64, `node_id` u32.
impl Wire for Csn {
    fn encode(&self, e: &mut Enc) {
        e.put_u64(self.local_time);
        e.put_u32(self.node_id);
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(Csn {
            local_time: d.get_u64()?,
            node_id: d.get_u32()?,
        })
    }
}

/// Layout: u64.
impl Wire for Cen {
    fn encode(&self, e: &mut Enc) {
        e.put_u64(self.0);
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(Cen(d.get_u64()?))
    }
}

/// Layout: u16.
impl Wire for EngineTag {
    fn encode(&self, e: &mut Enc) {
        e.put_u16(self.0);
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(EngineTag(d.get_u16()?))
    }
}

/// Layout: u8: 0 Insert, 1 Update, 2 Delete.
impl Wire for OpType {
    fn encode(&self, e: &mut Enc) {
        e.put_u8(match self {
            OpType::Insert => 0,
            OpType::Update => 1,
            OpType::Delete => 2,
        });
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        match d.get_u8()? {
            0 => Ok(OpType::Insert),
            1 => Ok(OpType::Update),
            2 => Ok(OpType::Delete),
            value => Err(CodecError::BadDiscriminant {
                type_name: "OpType",
                value,
            }),
        }
    }
}

/// Layout: key bytes, op u8, value bytes.
impl Wire for WriteRecord {
    fn encode(&self, e: &mut Enc) {
        e.put_bytes(&self.key);
        self.op.encode(e);
        e.put_bytes(&self.value);
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(WriteRecord {
            key: d.get_bytes()?,
            op: OpType::decode(d)?,
            value: d.get_bytes()?,
        })
    }
}

/// Layout: u8 tag: 0 Initial, 1 Committed followed by Csn.
impl Wire for ReadVersion {
    fn encode(&self, e: &mut Enc) {
        match self {
            ReadVersion::Initial => e.put_u8(0),
            ReadVersion::Committed(csn) => {
                e.put_u8(1);
                csn.encode(e);
            }
        }
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        match d.get_u8()? {
            0 => Ok(ReadVersion::Initial),
            1 => Ok(ReadVersion::Committed(Csn::decode(d)?)),
            value => Err(CodecError::BadDiscriminant {
                type_name: "ReadVersion",
                value,
            }),
        }
    }
}

/// Layout: key bytes, read_version.
impl Wire for ReadRecord {
    fn encode(&self, e: &mut Enc) {
        e.put_bytes(&self.key);
        self.read_version.encode(e);
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(ReadRecord {
            key: d.get_bytes()?,
            read_version: ReadVersion::decode(d)?,
        })
    }
}

/// Layout: group_id u64, expected_members u32.
impl Wire for GroupRef {
    fn encode(&self, e: &mut Enc) {
        e.put_u64(self.group_id);
        e.put_u32(self.expected_members);
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(GroupRef {
            group_id: d.get_u64()?,
            expected_members: d.get_u32()?,
        })
    }
}

/// Layout: txn_id u64, engine u16, begin_epoch u64, read_set, write_set,
/// cross_model_group option.
impl Wire for TxnRequest {
    fn encode(&self, e: &mut Enc) {
        e.put_u64(self.txn_id);
        self.engine.encode(e);
        self.begin_epoch.encode(e);
        self.read_set.encode(e);
        self.write_set.encode(e);
        self.cross_model_group.encode(e);
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(TxnRequest {
            txn_id: d.get_u64()?,
            engine: EngineTag::decode(d)?,
            begin_epoch: Cen::decode(d)?,
            read_set: Vec::decode(d)?,
            write_set: Vec::decode(d)?,
            cross_model_group: Option::decode(d)?,
        })
    }
}

/// Layout: csn, cen, origin_node u32, request.
impl Wire for TaggedTxn {
    fn encode(&self, e: &mut Enc) {
        self.csn.encode(e);
        self.cen.encode(e);
        e.put_u32(self.origin_node);
        self.request.encode(e);
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(TaggedTxn {
            csn: Csn::decode(d)?,
            cen: Cen::decode(d)?,
            origin_node: d.get_u32()?,
            request: TxnRequest::decode(d)?,
        })
    }
}

/// Layout: u8: variants in declaration order starting at 0.
impl Wire for AbortReason {
    fn encode(&self, e: &mut Enc) {
        e.put_u8(match self {
            AbortReason::ReadValidation => 0,
            AbortReason::WriteExists => 1,
            AbortReason::RowMissing => 2,
            AbortReason::LostCompare => 3,
            AbortReason::CrossModelPeerAborted => 4,
            AbortReason::EpochReexecutionDropped => 5,
            AbortReason::ShardUnavailable => 6,
        });
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(match d.get_u8()? {
            0 => AbortReason::ReadValidation,
            1 => AbortReason::WriteExists,
            2 => AbortReason::RowMissing,
            3 => AbortReason::LostCompare,
            4 => AbortReason::CrossModelPeerAborted,
            5 => AbortReason::EpochReexecutionDropped,
            6 => AbortReason::ShardUnavailable,
            value => {
                return Err(CodecError::BadDiscriminant {
                    type_name: "AbortReason",
                    value,
                })
            }
        })
    }
}

/// Layout: u8 tag: 0 Committed, 1 Aborted followed by reason.
impl Wire for Verdict {
    fn encode(&self, e: &mut Enc) {
        match self {
            Verdict::Committed => e.put_u8(0),
            Verdict::Aborted(reason) => {
                e.put_u8(1);
                reason.encode(e);
            }
        }
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        match d.get_u8()? {
            0 => Ok(Verdict::Committed),
            1 => Ok(Verdict::Aborted(AbortReason::decode(d)?)),
            value => Err(CodecError::BadDiscriminant {
                type_name: "Verdict",
                value,
            }),
        }
    }
}

/// Layout: csn, cen, verdict.
impl Wire for Decision {
    fn encode(&self, e: &mut Enc) {
        self.csn.encode(e);
        self.cen.encode(e);
        self.verdict.encode(e);
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(Decision {
            csn: Csn::decode(d)?,
            cen: Cen::decode(d)?,
            verdict: Verdict::decode(d)?,
        })
    }
}

#[cfg(test)]
pub(crate) mod arb {
    //! Proptest strategies for model types, shared by other modules' tests.

    use super::*;
    use proptest::prelude::*;

    pub fn csn() -> impl Strategy<Value = Csn> {
        (0u64..1000, 0u32..16).prop_map(|(t, n)| Csn::new(t, n))
    }

    pub fn key() -> impl Strategy<Value = Key> {
        proptest::collection::vec(any::<u8>(), 1..12)
    }

    pub fn op_type() -> impl Strategy<Value = OpType> {
        prop_oneof![
            Just(OpType::Insert),
            Just(OpType::Update),
            Just(OpType::Delete)
        ]
    }

    pub fn write_record() -> impl Strategy<Value = WriteRecord> {
        (key(), op_type(), proptest::collection::vec(any::<u8>(), 0..8)).prop_map(
            |(key, op, value)| WriteRecord {
                key,
                value: if op == OpType::Delete { Vec::new() } else { value },
                op,
            },
        )
    }

    pub fn read_version() -> impl Strategy<Value = ReadVersion> {
        prop_oneof![
            Just(ReadVersion::Initial),
            csn().prop_map(ReadVersion::Committed)
        ]
    }

    pub fn read_record() -> impl Strategy<Value = ReadRecord> {
        (key(), read_version()).prop_map(|(key, read_version)| ReadRecord { key, read_version })
    }

    pub fn group_ref() -> impl Strategy<Value = GroupRef> {
        (any::<u64>(), 1u32..5).prop_map(|(group_id, expected_members)| GroupRef {
            group_id,
            expected_members,
        })
    }

    pub fn txn_request() -> impl Strategy<Value = TxnRequest> {
        (
            any::<u64>(),
            0u16..3,
            0u64..100,
            proptest::collection::vec(read_record(), 0..6),
            proptest::collection::vec(write_record(), 0..6),
            proptest::option::of(group_ref()),
        )
            .prop_map(
                |(txn_id, engine, begin, read_set, write_set, cross_model_group)| TxnRequest {
                    txn_id,
                    engine: EngineTag(engine),
                    begin_epoch: Cen(begin),
                    read_set,
                    write_set,
                    cross_model_group,
                },
            )
    }

    pub fn tagged_txn() -> impl Strategy<Value = TaggedTxn> {
        (csn(), 1u64..50, txn_request()).prop_map(|(csn, cen, request)| TaggedTxn {
            csn,
            cen: Cen(cen),
            origin_node: csn.node_id,
            request,
        })
    }

    pub fn verdict() -> impl Strategy<Value = Verdict> {
        prop_oneof![
            Just(Verdict::Committed),
            prop_oneof![
                Just(AbortReason::ReadValidation),
                Just(AbortReason::WriteExists),
                Just(AbortReason::RowMissing),
                Just(AbortReason::LostCompare),
                Just(AbortReason::CrossModelPeerAborted),
                Just(AbortReason::EpochReexecutionDropped),
                Just(AbortReason::ShardUnavailable),
            ]
            .prop_map(Verdict::Aborted)
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn precedes_on_strictly_smaller_time() {
        assert!(csn_precedes(Csn::new(3, 1), Csn::new(5, 2)));
        assert!(!csn_precedes(Csn::new(5, 2), Csn::new(3, 1)));
    }

    #[test]
    fn precedes_breaks_time_ties_by_node_id() {
        assert!(csn_precedes(Csn::new(5, 1), Csn::new(5, 2)));
        assert!(!csn_precedes(Csn::new(5, 2), Csn::new(5, 1)));
    }

    #[test]
    fn precedes_is_irreflexive() {
        assert!(!csn_precedes(Csn::new(7, 4), Csn::new(7, 4)));
    }

    #[test]
    fn first_tag_is_time_one_epoch_one() {
        let mut tagger = TxnTagger::new(2);
        let tagged = tagger.tag(req(10));
        assert_eq!(tagged.csn, Csn::new(1, 2));
        assert_eq!(tagged.cen, Cen(1));
        assert_eq!(tagged.origin_node, 2);
    }

    #[test]
    fn consecutive_tags_increment_local_time() {
        let mut tagger = TxnTagger::new(2);
        assert_eq!(tagger.tag(req(1)).csn, Csn::new(1, 2));
        assert_eq!(tagger.tag(req(2)).csn, Csn::new(2, 2));
    }

    #[test]
    fn equal_counter_values_on_distinct_nodes_order_by_node_id() {
        let mut tagger1 = TxnTagger::new(1);
        let mut tagger2 = TxnTagger::new(2);
        let a = tagger1.tag(req(1)).csn;
        let b = tagger2.tag(req(2)).csn;
        assert_ne!(a, b);
        assert!(csn_precedes(a, b));
        assert!(!csn_precedes(b, a));
    }

    #[test]
    fn live_clock_regression_is_rejected() {
        let mut tagger = TxnTagger::new(3);
        assert!(tagger.tag_live(req(1), 100).is_ok());
        assert_eq!(
            tagger.tag_live(req(2), 100),
            Err(ClockRegression {
                last: 100,
                supplied: 100
            })
        );
        assert_eq!(
            tagger.tag_live(req(3), 99),
            Err(ClockRegression {
                last: 100,
                supplied: 99
            })
        );
        assert!(tagger.tag_live(req(4), 101).is_ok());
    }

    #[test]
    fn tagger_tracks_open_epoch() {
        let mut tagger = TxnTagger::new(1);
        tagger.set_open_cen(Cen(7));
        assert_eq!(tagger.tag(req(1)).cen, Cen(7));
    }

    fn req(txn_id: u64) -> TxnRequest {
        TxnRequest {
            txn_id,
            engine: EngineTag(0),
            begin_epoch: Cen(1),
            read_set: vec![],
            write_set: vec![],
            cross_model_group: None,
        }
    }

    #[test]
    fn csn_wire_layout_is_twelve_bytes() {
        let bytes = Csn::new(0x0102, 7).to_bytes();
        assert_eq!(bytes, vec![0x02, 0x01, 0, 0, 0, 0, 0, 0, 7, 0, 0, 0]);
        assert_eq!(Csn::from_bytes(&bytes).unwrap(), Csn::new(0x0102, 7));
    }

    proptest! {
        #[test]
        fn precedes_is_a_strict_total_order(a in arb::csn(), b in arb::csn(), c in arb::csn()) {
            // Irreflexive.
            prop_assert!(!csn_precedes(a, a));
            // Antisymmetric and total on distinct values.
            if a != b {
                prop_assert!(csn_precedes(a, b) != csn_precedes(b, a));
            }
            // Transitive.
            if csn_precedes(a, b) && csn_precedes(b, c) {
                prop_assert!(csn_precedes(a, c));
            }
        }

        #[test]
        fn tagged_txn_round_trips(txn in arb::tagged_txn()) {
            let bytes = txn.to_bytes();
            prop_assert_eq!(TaggedTxn::from_bytes(&bytes).unwrap(), txn);
        }

        #[test]
        fn decision_round_trips(csn in arb::csn(), cen in 1u64..50, verdict in arb::verdict()) {
            let decision = Decision { csn, cen: Cen(cen), verdict };
            let bytes = decision.to_bytes();
            prop_assert_eq!(Decision::from_bytes(&bytes).unwrap(), decision);
        }

        #[test]
        fn decode_never_panics_on_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = TaggedTxn::from_bytes(&bytes);
            let _ = Decision::from_bytes(&bytes);
            let _ = TxnRequest::from_bytes(&bytes);
        }
    }
}
