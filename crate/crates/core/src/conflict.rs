//! Per-shard deterministic conflict resolution: read-set validation against
//! the committed snapshot, write-set resolution, and the epoch fold.
//!
//! The resolution algorithm is carefully order-insensitive: for a fixed
//! multiset of transactions in one epoch, every processing permutation yields
//! the same abort set and the same post-fold snapshot. Three details make
//! that hold and are load-bearing:
//!
//! * every record of every transaction is processed; no early return on the
//!   first failing record;
//! * a transaction that loses or fails a precondition check still claims the
//!   keys of its other records (a later-processed, even-smaller Csn must see
//!   those claims to dethrone them; a larger one must lose to them);
//! * a provisionally winning claim can be retroactively dethroned by a
//!   smaller Csn, which pushes the prior claimant into the abort set.
//!
//! The committed snapshot is NOT touched during resolution. It is folded
//! once per epoch in [`finalize_epoch`], after the globally consistent abort
//! set is known, so remote-shard losses can still veto local winners.

use crate::codec::{crc32, CodecError, Dec, Enc, Wire};
use crate::model::{AbortReason, Cen, Csn, Key, OpType, TaggedTxn, WriteRecord};
use std::collections::{btree_map, BTreeMap, BTreeSet, HashMap};
use thiserror::Error;

/// Snapshot metadata for one key: who committed it last, and whether that
/// commit was a delete.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VersionMapEntry {
    pub committed_csn: Csn,
    pub tombstone: bool,
}

/// Layout: committed_csn, tombstone u8.
impl Wire for VersionMapEntry {
    fn encode(&self, e: &mut Enc) {
        self.committed_csn.encode(e);
        e.put_bool(self.tombstone);
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        Ok(VersionMapEntry {
            committed_csn: Csn::decode(d)?,
            tombstone: d.get_bool()?,
        })
    }
}

/// Committed snapshot of one shard: key → latest committed version metadata.
///
/// Holds exactly the union of all committed write sets of epochs up to
/// `snapshot_epoch`. Keys never written are absent. Deletes stay as
/// tombstones for the lifetime of a run.
///
/// Backed by a `BTreeMap` so iteration, encoding, and digests are
/// deterministic; replica convergence is checked byte-for-byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalWriteVersionMap {
    snapshot_epoch: Cen,
    entries: BTreeMap<Key, VersionMapEntry>,
}

impl GlobalWriteVersionMap {
    /// Empty snapshot as of `snapshot_epoch` (no epoch folded for `Cen(0)`).
    pub fn new(snapshot_epoch: Cen) -> Self {
        Self {
            snapshot_epoch,
            entries: BTreeMap::new(),
        }
    }

    pub fn snapshot_epoch(&self) -> Cen {
        self.snapshot_epoch
    }

    pub fn get(&self, key: &[u8]) -> Option<&VersionMapEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Key, &VersionMapEntry)> {
        self.entries.iter()
    }

    /// Directly installs an entry. Used by genesis preload and re-sharding
    /// metadata transfer, never by resolution.
    pub fn install(&mut self, key: Key, entry: VersionMapEntry) {
        self.entries.insert(key, entry);
    }

    /// Splits off every entry NOT satisfying `keep`, returning the removed
    /// entries. Used when a reshard reassigns part of this shard's key
    /// space elsewhere.
    pub fn extract<F: FnMut(&Key) -> bool>(&mut self, mut keep: F) -> Vec<(Key, VersionMapEntry)> {
        let moved: Vec<Key> = self
            .entries
            .keys()
            .filter(|k| !keep(k))
            .cloned()
            .collect();
        moved
            .into_iter()
            .map(|k| {
                let e = self.entries.remove(&k).unwrap();
                (k, e)
            })
            .collect()
    }

    /// Checksum over the canonical encoding; equal digests mean equal maps.
    pub fn digest(&self) -> u32 {
        crc32(&self.to_bytes())
    }
}

/// Layout: snapshot_epoch, entry count u32, then (key bytes, entry) pairs in
/// ascending key order.
impl Wire for GlobalWriteVersionMap {
    fn encode(&self, e: &mut Enc) {
        self.snapshot_epoch.encode(e);
        e.put_count(self.entries.len());
        for (key, entry) in &self.entries {
            e.put_bytes(key);
            entry.encode(e);
        }
    }

    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        let snapshot_epoch = Cen::decode(d)?;
        let n = d.get_count()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let key = d.get_bytes()?;
            let entry = VersionMapEntry::decode(d)?;
            entries.insert(key, entry);
        }
        Ok(GlobalWriteVersionMap {
            snapshot_epoch,
            entries,
        })
    }
}

/// Write intents of the epoch in flight on one shard: key → provisional
/// winning Csn. Cleared per epoch. The entry for a key always holds the
/// smallest Csn among the writers of that key processed so far.
#[derive(Debug, Clone, Default)]
pub struct EpochWriteVersionMap {
    claims: HashMap<Key, Csn>,
}

impl EpochWriteVersionMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn claim_of(&self, key: &[u8]) -> Option<Csn> {
        self.claims.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.claims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.claims.is_empty()
    }
}

/// Locally determined aborts for one (shard, epoch), with the reason each
/// Csn aborted. Re-inserting a Csn keeps the smallest reason (by the
/// `AbortReason` priority order), so merged sets are permutation-invariant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EpochAbortSet {
    reasons: BTreeMap<Csn, AbortReason>,
}

impl EpochAbortSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, csn: Csn, reason: AbortReason) {
        match self.reasons.entry(csn) {
            btree_map::Entry::Vacant(v) => {
                v.insert(reason);
            }
            btree_map::Entry::Occupied(mut o) => {
                if reason < *o.get() {
                    o.insert(reason);
                }
            }
        }
    }

    pub fn contains(&self, csn: Csn) -> bool {
        self.reasons.contains_key(&csn)
    }

    pub fn reason_of(&self, csn: Csn) -> Option<AbortReason> {
        self.reasons.get(&csn).copied()
    }

    pub fn merge(&mut self, other: &EpochAbortSet) {
        for (&csn, &reason) in &other.reasons {
            self.insert(csn, reason);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Csn, AbortReason)> + '_ {
        self.reasons.iter().map(|(&c, &r)| (c, r))
    }

    pub fn csns(&self) -> BTreeSet<Csn> {
        self.reasons.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.reasons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reasons.is_empty()
    }
}

/// Outcome of resolving one transaction's write set, as visible at the time
/// of processing. A `Commit` is provisional: a later-processed smaller Csn
/// can still dethrone this transaction, which shows up in the abort set
/// rather than in this return value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Commit,
    Abort(AbortReason),
}

/// Validates a transaction's read set against the committed snapshot of the
/// epoch before its own (`snapshot.snapshot_epoch == txn.cen - 1`).
///
/// A read passes iff the version the executor observed is exactly the
/// version the snapshot holds: absent keys must have been read as
/// `Initial`, present keys at their committed Csn. A tombstoned key fails
/// under any read version: its observed value cannot have come from the
/// current snapshot, and its history is non-empty so `Initial` is wrong too.
pub fn validate_read_set(txn: &TaggedTxn, snapshot: &GlobalWriteVersionMap) -> bool {
    debug_assert_eq!(snapshot.snapshot_epoch().next(), txn.cen);
    validate_reads(&txn.request.read_set, snapshot)
}

/// Record-level read validation used for routed sub-transactions, which
/// carry only the shard's slice of the parent's read set.
pub fn validate_reads(read_set: &[crate::model::ReadRecord], snapshot: &GlobalWriteVersionMap) -> bool {
    read_set.iter().all(|r| {
        match snapshot.get(&r.key) {
            None => r.read_version == crate::model::ReadVersion::Initial,
            Some(entry) if entry.tombstone => false,
            Some(entry) => {
                r.read_version == crate::model::ReadVersion::Committed(entry.committed_csn)
            }
        }
    })
}

/// Resolves one transaction's write set for its epoch on one shard.
///
/// Per record: a precondition check against the committed snapshot (Insert
/// requires the key absent or tombstoned, Update/Delete require it present
/// and live), then a comparison against the epoch's write intents where the
/// smallest Csn wins and every loser, including a previously claimed
/// provisional winner, lands in `aborts`.
///
/// Every failure also records the transaction's own Csn in `aborts`, so the
/// merged abort set alone decides the fold. The snapshot is never mutated
/// here.
pub fn resolve_write_set(
    txn: &TaggedTxn,
    global: &GlobalWriteVersionMap,
    epoch_map: &mut EpochWriteVersionMap,
    aborts: &mut EpochAbortSet,
) -> Resolution {
    resolve_records(txn.csn, &txn.request.write_set, global, epoch_map, aborts)
}

/// Record-level resolution used for both whole transactions and routed
/// sub-transactions (which carry the parent's Csn).
pub fn resolve_records(
    csn: Csn,
    write_set: &[WriteRecord],
    global: &GlobalWriteVersionMap,
    epoch_map: &mut EpochWriteVersionMap,
    aborts: &mut EpochAbortSet,
) -> Resolution {
    let mut own_failure: Option<AbortReason> = None;
    let mut fail = |aborts: &mut EpochAbortSet, reason: AbortReason| {
        aborts.insert(csn, reason);
        if own_failure.map_or(true, |prev| reason < prev) {
            own_failure = Some(reason);
        }
    };

    for record in write_set {
        let live = matches!(global.get(&record.key), Some(e) if !e.tombstone);
        if live && record.op == OpType::Insert {
            fail(aborts, AbortReason::WriteExists);
            continue;
        }
        if !live && record.op != OpType::Insert {
            fail(aborts, AbortReason::RowMissing);
            continue;
        }
        // Intent comparison: smallest Csn claims the key.
        match epoch_map.claims.entry(record.key.clone()) {
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(csn);
            }
            std::collections::hash_map::Entry::Occupied(mut o) => {
                let held = *o.get();
                if csn < held {
                    // Retroactive dethrone: the prior claimant loses.
                    aborts.insert(held, AbortReason::LostCompare);
                    o.insert(csn);
                } else if held < csn {
                    fail(aborts, AbortReason::LostCompare);
                }
                // held == csn: same transaction reprocessed; claims are
                // idempotent.
            }
        }
    }

    match own_failure {
        None => Resolution::Commit,
        Some(reason) => Resolution::Abort(reason),
    }
}

/// One write folded by [`finalize_epoch`], in commit order, for logging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommittedWrite {
    pub csn: Csn,
    pub record: WriteRecord,
}

/// Epoch fold attempted out of order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("epoch order violation: snapshot at {snapshot_epoch}, cannot finalize {attempted}")]
pub struct EpochOrderViolation {
    pub snapshot_epoch: Cen,
    pub attempted: Cen,
}

/// Folds one resolved epoch into the snapshot.
///
/// `writers` is every transaction of the epoch with this shard's portion of
/// its write set; `global_abort_set` is the merged, globally consistent
/// abort set for the epoch. Writes of every transaction NOT in the abort set
/// are folded (Insert/Update stamp the writer's Csn, Delete sets a
/// tombstone); aborted transactions leave zero trace. Returns the committed
/// writes in Csn order.
pub fn finalize_epoch(
    cen: Cen,
    writers: &[(Csn, Vec<WriteRecord>)],
    global_abort_set: &BTreeSet<Csn>,
    global: &mut GlobalWriteVersionMap,
) -> Result<Vec<CommittedWrite>, EpochOrderViolation> {
    if global.snapshot_epoch.next() != cen {
        return Err(EpochOrderViolation {
            snapshot_epoch: global.snapshot_epoch,
            attempted: cen,
        });
    }

    let mut committed: Vec<(Csn, &Vec<WriteRecord>)> = writers
        .iter()
        .filter(|(csn, _)| !global_abort_set.contains(csn))
        .map(|(csn, records)| (*csn, records))
        .collect();
    committed.sort_by_key(|(csn, _)| *csn);

    let mut out = Vec::new();
    for (csn, records) in committed {
        for record in records {
            debug_assert!(
                global.get(&record.key).map_or(true, |e| e.committed_csn != csn),
                "duplicate fold of one key by one writer"
            );
            global.entries.insert(
                record.key.clone(),
                VersionMapEntry {
                    committed_csn: csn,
                    tombstone: record.op == OpType::Delete,
                },
            );
            out.push(CommittedWrite {
                csn,
                record: record.clone(),
            });
        }
    }
    global.snapshot_epoch = cen;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cen, EngineTag, ReadRecord, ReadVersion, TxnRequest};
    use proptest::prelude::*;

    fn txn(csn: Csn, cen: Cen, reads: Vec<ReadRecord>, writes: Vec<WriteRecord>) -> TaggedTxn {
        TaggedTxn {
            csn,
            cen,
            origin_node: csn.node_id,
            request: TxnRequest {
                txn_id: csn.local_time,
                engine: EngineTag(0),
                begin_epoch: cen,
                read_set: reads,
                write_set: writes,
                cross_model_group: None,
            },
        }
    }

    fn snapshot(cen: Cen, entries: &[(&[u8], Csn, bool)]) -> GlobalWriteVersionMap {
        let mut g = GlobalWriteVersionMap::new(cen);
        for (key, committed_csn, tombstone) in entries {
            g.install(
                key.to_vec(),
                VersionMapEntry {
                    committed_csn: *committed_csn,
                    tombstone: *tombstone,
                },
            );
        }
        g
    }

    // ---- read-set validation ----

    #[test]
    fn stale_read_of_one_key_fails_validation() {
        // A writer committed X and Y together; the reader observed the new X
        // but a pre-write Y. Reading all-or-none of a txn's writes is the
        // rule, so this must fail.
        let writer = Csn::new(4, 1);
        let snap = snapshot(Cen(1), &[(b"X", writer, false), (b"Y", writer, false)]);
        let reader = txn(
            Csn::new(9, 2),
            Cen(2),
            vec![
                ReadRecord::new(b"X".to_vec(), ReadVersion::Committed(writer)),
                ReadRecord::new(b"Y".to_vec(), ReadVersion::Initial),
            ],
            vec![],
        );
        assert!(!validate_read_set(&reader, &snap));
    }

    #[test]
    fn consistent_reads_pass_validation() {
        let writer = Csn::new(4, 1);
        let snap = snapshot(Cen(1), &[(b"X", writer, false), (b"Y", writer, false)]);
        let reader = txn(
            Csn::new(9, 2),
            Cen(2),
            vec![
                ReadRecord::new(b"X".to_vec(), ReadVersion::Committed(writer)),
                ReadRecord::new(b"Y".to_vec(), ReadVersion::Committed(writer)),
            ],
            vec![],
        );
        assert!(validate_read_set(&reader, &snap));
    }

    #[test]
    fn empty_read_set_passes() {
        let snap = snapshot(Cen(1), &[(b"X", Csn::new(1, 1), false)]);
        let t = txn(Csn::new(2, 1), Cen(2), vec![], vec![]);
        assert!(validate_read_set(&t, &snap));
    }

    #[test]
    fn initial_reads_pass_on_empty_snapshot() {
        let snap = GlobalWriteVersionMap::new(Cen(3));
        let t = txn(
            Csn::new(5, 1),
            Cen(4),
            vec![
                ReadRecord::new(b"a".to_vec(), ReadVersion::Initial),
                ReadRecord::new(b"b".to_vec(), ReadVersion::Initial),
            ],
            vec![],
        );
        assert!(validate_read_set(&t, &snap));
    }

    #[test]
    fn tombstoned_key_fails_under_any_read_version() {
        let deleter = Csn::new(3, 1);
        let snap = snapshot(Cen(1), &[(b"k", deleter, true)]);
        for version in [
            ReadVersion::Initial,
            ReadVersion::Committed(deleter),
            ReadVersion::Committed(Csn::new(2, 1)),
        ] {
            let t = txn(
                Csn::new(9, 2),
                Cen(2),
                vec![ReadRecord::new(b"k".to_vec(), version)],
                vec![],
            );
            assert!(!validate_read_set(&t, &snap), "version {version:?}");
        }
    }

    // Independent validation oracle: folds committed history sequentially
    // and derives each read's expected verdict from first principles.
    mod replay_oracle {
        use super::*;

        #[derive(Default)]
        pub struct Oracle {
            state: BTreeMap<Key, (Csn, bool)>,
        }

        impl Oracle {
            pub fn apply_commit(&mut self, csn: Csn, writes: &[WriteRecord]) {
                for w in writes {
                    self.state
                        .insert(w.key.clone(), (csn, w.op == OpType::Delete));
                }
            }

            pub fn read_passes(&self, r: &ReadRecord) -> bool {
                match self.state.get(&r.key) {
                    None => r.read_version == ReadVersion::Initial,
                    Some((_, true)) => false,
                    Some((csn, false)) => r.read_version == ReadVersion::Committed(*csn),
                }
            }
        }
    }

    proptest! {
        #[test]
        fn validation_matches_replay_oracle(
            history in proptest::collection::vec(
                (crate::model::arb::csn(), proptest::collection::vec(crate::model::arb::write_record(), 0..4)),
                0..6,
            ),
            reads in proptest::collection::vec(crate::model::arb::read_record(), 0..6),
        ) {
            // Build both the engine snapshot and the oracle from the same
            // committed history, one writer per folded epoch.
            let mut oracle = replay_oracle::Oracle::default();
            let mut snap = GlobalWriteVersionMap::new(Cen(0));
            for (i, (csn, writes)) in history.iter().enumerate() {
                oracle.apply_commit(*csn, writes);
                let cen = Cen(i as u64 + 1);
                finalize_epoch(cen, &[(*csn, writes.clone())], &BTreeSet::new(), &mut snap).unwrap();
            }
            let cen = Cen(history.len() as u64 + 1);
            let t = txn(Csn::new(u64::MAX, 9), cen, reads.clone(), vec![]);
            let expected = reads.iter().all(|r| oracle.read_passes(r));
            prop_assert_eq!(validate_read_set(&t, &snap), expected);
        }
    }

    // ---- write-set resolution ----

    #[test]
    fn insert_on_existing_key_aborts_write_exists() {
        let snap = snapshot(Cen(1), &[(b"k", Csn::new(1, 1), false)]);
        let t = txn(
            Csn::new(5, 1),
            Cen(2),
            vec![],
            vec![WriteRecord::insert(b"k".to_vec(), b"v".to_vec())],
        );
        let mut epoch_map = EpochWriteVersionMap::new();
        let mut aborts = EpochAbortSet::new();
        let r = resolve_write_set(&t, &snap, &mut epoch_map, &mut aborts);
        assert_eq!(r, Resolution::Abort(AbortReason::WriteExists));
        assert_eq!(aborts.reason_of(t.csn), Some(AbortReason::WriteExists));
    }

    #[test]
    fn update_on_absent_key_aborts_row_missing() {
        let snap = GlobalWriteVersionMap::new(Cen(1));
        let t = txn(
            Csn::new(5, 1),
            Cen(2),
            vec![],
            vec![WriteRecord::update(b"k".to_vec(), b"v".to_vec())],
        );
        let mut epoch_map = EpochWriteVersionMap::new();
        let mut aborts = EpochAbortSet::new();
        let r = resolve_write_set(&t, &snap, &mut epoch_map, &mut aborts);
        assert_eq!(r, Resolution::Abort(AbortReason::RowMissing));
    }

    #[test]
    fn update_on_tombstoned_key_aborts_row_missing() {
        let snap = snapshot(Cen(1), &[(b"k", Csn::new(1, 1), true)]);
        let t = txn(
            Csn::new(5, 1),
            Cen(2),
            vec![],
            vec![WriteRecord::delete(b"k".to_vec())],
        );
        let mut epoch_map = EpochWriteVersionMap::new();
        let mut aborts = EpochAbortSet::new();
        let r = resolve_write_set(&t, &snap, &mut epoch_map, &mut aborts);
        assert_eq!(r, Resolution::Abort(AbortReason::RowMissing));
    }

    #[test]
    fn insert_on_tombstoned_key_commits() {
        let snap = snapshot(Cen(1), &[(b"k", Csn::new(1, 1), true)]);
        let t = txn(
            Csn::new(5, 1),
            Cen(2),
            vec![],
            vec![WriteRecord::insert(b"k".to_vec(), b"v".to_vec())],
        );
        let mut epoch_map = EpochWriteVersionMap::new();
        let mut aborts = EpochAbortSet::new();
        let r = resolve_write_set(&t, &snap, &mut epoch_map, &mut aborts);
        assert_eq!(r, Resolution::Commit);
        assert_eq!(epoch_map.claim_of(b"k"), Some(t.csn));
    }

    #[test]
    fn fresh_insert_claims_key_and_commits() {
        let snap = GlobalWriteVersionMap::new(Cen(1));
        let t = txn(
            Csn::new(5, 1),
            Cen(2),
            vec![],
            vec![WriteRecord::insert(b"k".to_vec(), b"v".to_vec())],
        );
        let mut epoch_map = EpochWriteVersionMap::new();
        let mut aborts = EpochAbortSet::new();
        assert_eq!(
            resolve_write_set(&t, &snap, &mut epoch_map, &mut aborts),
            Resolution::Commit
        );
        assert_eq!(epoch_map.claim_of(b"k"), Some(t.csn));
        assert!(aborts.is_empty());
    }

    #[test]
    fn smaller_csn_wins_in_either_processing_order() {
        // A = (5,1) processed first provisionally wins, then B = (3,2)
        // dethrones it. Reversed order: A simply loses on arrival. Outcomes
        // must be identical.
        let snap = snapshot(Cen(1), &[(b"k", Csn::new(1, 1), false)]);
        let a = txn(
            Csn::new(5, 1),
            Cen(2),
            vec![],
            vec![WriteRecord::update(b"k".to_vec(), b"va".to_vec())],
        );
        let b = txn(
            Csn::new(3, 2),
            Cen(2),
            vec![],
            vec![WriteRecord::update(b"k".to_vec(), b"vb".to_vec())],
        );

        for order in [[&a, &b], [&b, &a]] {
            let mut epoch_map = EpochWriteVersionMap::new();
            let mut aborts = EpochAbortSet::new();
            for t in order {
                resolve_write_set(t, &snap, &mut epoch_map, &mut aborts);
            }
            assert_eq!(epoch_map.claim_of(b"k"), Some(b.csn));
            assert!(aborts.contains(a.csn));
            assert!(!aborts.contains(b.csn));
            assert_eq!(aborts.reason_of(a.csn), Some(AbortReason::LostCompare));
        }
    }

    #[test]
    fn loser_still_claims_its_other_keys() {
        // B loses key k1 to A but still claims k2, so C (larger Csn on k2)
        // must lose to B even though B aborts. This is what makes the
        // abort set permutation-invariant.
        let snap = snapshot(
            Cen(1),
            &[
                (b"k1", Csn::new(1, 1), false),
                (b"k2", Csn::new(1, 1), false),
            ],
        );
        let a = txn(
            Csn::new(2, 1),
            Cen(2),
            vec![],
            vec![WriteRecord::update(b"k1".to_vec(), b"a".to_vec())],
        );
        let b = txn(
            Csn::new(3, 1),
            Cen(2),
            vec![],
            vec![
                WriteRecord::update(b"k1".to_vec(), b"b".to_vec()),
                WriteRecord::update(b"k2".to_vec(), b"b".to_vec()),
            ],
        );
        let c = txn(
            Csn::new(4, 1),
            Cen(2),
            vec![],
            vec![WriteRecord::update(b"k2".to_vec(), b"c".to_vec())],
        );

        let mut expected: Option<(Vec<Option<Csn>>, EpochAbortSet)> = None;
        for order in [
            [&a, &b, &c],
            [&a, &c, &b],
            [&b, &a, &c],
            [&b, &c, &a],
            [&c, &a, &b],
            [&c, &b, &a],
        ] {
            let mut epoch_map = EpochWriteVersionMap::new();
            let mut aborts = EpochAbortSet::new();
            for t in order {
                resolve_write_set(t, &snap, &mut epoch_map, &mut aborts);
            }
            let claims = vec![epoch_map.claim_of(b"k1"), epoch_map.claim_of(b"k2")];
            match &expected {
                None => expected = Some((claims, aborts)),
                Some((c0, a0)) => {
                    assert_eq!(&claims, c0);
                    assert_eq!(&aborts, a0);
                }
            }
        }
        let (claims, aborts) = expected.unwrap();
        assert_eq!(claims, vec![Some(a.csn), Some(b.csn)]);
        assert!(aborts.contains(b.csn) && aborts.contains(c.csn));
        assert!(!aborts.contains(a.csn));
    }

    #[test]
    fn own_failure_reason_is_priority_minimal() {
        // Fails WriteExists on one record and loses a compare on another;
        // WriteExists has higher priority and must be the reported reason
        // in any processing order.
        let snap = snapshot(
            Cen(1),
            &[
                (b"e", Csn::new(1, 1), false),
                (b"k", Csn::new(1, 1), false),
            ],
        );
        let winner = txn(
            Csn::new(2, 1),
            Cen(2),
            vec![],
            vec![WriteRecord::update(b"k".to_vec(), b"w".to_vec())],
        );
        let loser = txn(
            Csn::new(3, 1),
            Cen(2),
            vec![],
            vec![
                WriteRecord::update(b"k".to_vec(), b"l".to_vec()),
                WriteRecord::insert(b"e".to_vec(), b"l".to_vec()),
            ],
        );
        for order in [[&winner, &loser], [&loser, &winner]] {
            let mut epoch_map = EpochWriteVersionMap::new();
            let mut aborts = EpochAbortSet::new();
            for t in order {
                resolve_write_set(t, &snap, &mut epoch_map, &mut aborts);
            }
            assert_eq!(aborts.reason_of(loser.csn), Some(AbortReason::WriteExists));
        }
    }

    // ---- finalize ----

    #[test]
    fn empty_epoch_advances_snapshot() {
        let mut snap = GlobalWriteVersionMap::new(Cen(4));
        let out = finalize_epoch(Cen(5), &[], &BTreeSet::new(), &mut snap).unwrap();
        assert!(out.is_empty());
        assert_eq!(snap.snapshot_epoch(), Cen(5));
        assert!(snap.is_empty());
    }

    #[test]
    fn committed_insert_is_folded() {
        let mut snap = GlobalWriteVersionMap::new(Cen(1));
        let csn = Csn::new(7, 2);
        let writes = vec![(csn, vec![WriteRecord::insert(b"k".to_vec(), b"v".to_vec())])];
        let out = finalize_epoch(Cen(2), &writes, &BTreeSet::new(), &mut snap).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(
            snap.get(b"k"),
            Some(&VersionMapEntry {
                committed_csn: csn,
                tombstone: false
            })
        );
    }

    #[test]
    fn delete_folds_to_tombstone() {
        let mut snap = snapshot(Cen(1), &[(b"k", Csn::new(1, 1), false)]);
        let csn = Csn::new(7, 2);
        let writes = vec![(csn, vec![WriteRecord::delete(b"k".to_vec())])];
        finalize_epoch(Cen(2), &writes, &BTreeSet::new(), &mut snap).unwrap();
        assert_eq!(
            snap.get(b"k"),
            Some(&VersionMapEntry {
                committed_csn: csn,
                tombstone: true
            })
        );
    }

    #[test]
    fn remotely_aborted_winner_is_not_folded() {
        // The txn won this shard locally but lost on a remote shard, so the
        // merged abort set contains it; its local writes must not fold.
        let mut snap = GlobalWriteVersionMap::new(Cen(1));
        let csn = Csn::new(7, 2);
        let writes = vec![(csn, vec![WriteRecord::insert(b"k".to_vec(), b"v".to_vec())])];
        let aborts: BTreeSet<Csn> = [csn].into();
        let out = finalize_epoch(Cen(2), &writes, &aborts, &mut snap).unwrap();
        assert!(out.is_empty());
        assert!(snap.get(b"k").is_none());
        assert_eq!(snap.snapshot_epoch(), Cen(2));
    }

    #[test]
    fn out_of_order_fold_is_rejected() {
        let mut snap = GlobalWriteVersionMap::new(Cen(3));
        let err = finalize_epoch(Cen(5), &[], &BTreeSet::new(), &mut snap).unwrap_err();
        assert_eq!(
            err,
            EpochOrderViolation {
                snapshot_epoch: Cen(3),
                attempted: Cen(5)
            }
        );
    }

    #[test]
    fn committed_writes_come_out_in_csn_order() {
        let mut snap = GlobalWriteVersionMap::new(Cen(1));
        let a = Csn::new(9, 1);
        let b = Csn::new(2, 3);
        let writes = vec![
            (a, vec![WriteRecord::insert(b"x".to_vec(), b"1".to_vec())]),
            (b, vec![WriteRecord::insert(b"y".to_vec(), b"2".to_vec())]),
        ];
        let out = finalize_epoch(Cen(2), &writes, &BTreeSet::new(), &mut snap).unwrap();
        let order: Vec<Csn> = out.iter().map(|w| w.csn).collect();
        assert_eq!(order, vec![b, a]);
    }

    // ---- permutation invariance over random epochs ----

    fn small_conflicting_txns(seed: &[(u64, u32, Vec<(u8, OpType)>)], cen: Cen) -> Vec<TaggedTxn> {
        seed.iter()
            .map(|(time, node, records)| {
                let writes = records
                    .iter()
                    .map(|(k, op)| WriteRecord {
                        key: vec![*k % 4],
                        op: *op,
                        value: if *op == OpType::Delete {
                            Vec::new()
                        } else {
                            vec![1]
                        },
                    })
                    .collect::<Vec<_>>();
                // Dedup keys within one txn, keeping the last record.
                let mut seen = BTreeMap::new();
                for w in writes {
                    seen.insert(w.key.clone(), w);
                }
                txn(
                    Csn::new(*time, *node),
                    cen,
                    vec![],
                    seen.into_values().collect(),
                )
            })
            .collect()
    }

    proptest! {
        // Any processing permutation of one epoch's transactions yields the
        // same abort set and the same folded snapshot.
        #[test]
        fn resolution_is_permutation_invariant(
            raw in proptest::collection::vec(
                (1u64..20, 1u32..4, proptest::collection::vec((any::<u8>(), crate::model::arb::op_type()), 1..4)),
                1..6,
            ),
            shuffle in any::<u64>(),
            preload in proptest::collection::btree_set(0u8..4, 0..4),
        ) {
            // Distinct Csns per txn.
            let mut seen = BTreeSet::new();
            let raw: Vec<_> = raw
                .into_iter()
                .filter(|(t, n, _)| seen.insert((*t, *n)))
                .collect();
            let txns = small_conflicting_txns(&raw, Cen(2));

            let base = snapshot(
                Cen(1),
                &preload
                    .iter()
                    .map(|k| -> (&[u8], Csn, bool) {
                        // Keys preloaded as live rows; leak to get 'static slices.
                        (Box::leak(vec![*k].into_boxed_slice()), Csn::new(0, 0), false)
                    })
                    .collect::<Vec<_>>(),
            );

            let run = |order: &[&TaggedTxn]| {
                let mut epoch_map = EpochWriteVersionMap::new();
                let mut aborts = EpochAbortSet::new();
                for t in order {
                    resolve_write_set(t, &base, &mut epoch_map, &mut aborts);
                }
                let writers: Vec<(Csn, Vec<WriteRecord>)> = order
                    .iter()
                    .map(|t| (t.csn, t.request.write_set.clone()))
                    .collect();
                let mut folded = base.clone();
                finalize_epoch(Cen(2), &writers, &aborts.csns(), &mut folded).unwrap();
                (aborts, folded)
            };

            let canonical: Vec<&TaggedTxn> = txns.iter().collect();
            let (aborts0, folded0) = run(&canonical);

            // Deterministic shuffle from the seed.
            let mut order: Vec<&TaggedTxn> = txns.iter().collect();
            let mut state = shuffle | 1;
            for i in (1..order.len()).rev() {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                order.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let (aborts1, folded1) = run(&order);

            prop_assert_eq!(&aborts0, &aborts1);
            prop_assert_eq!(folded0.to_bytes(), folded1.to_bytes());

            // At most one writer per key commits, and aborted txns leave no
            // trace.
            for (key, entry) in folded0.iter() {
                if entry.committed_csn != Csn::new(0, 0) {
                    prop_assert!(!aborts0.contains(entry.committed_csn), "aborted csn in snapshot at {key:?}");
                }
            }
        }
    }

    #[test]
    fn snapshot_encoding_round_trips_and_digest_tracks_content() {
        let snap = snapshot(
            Cen(3),
            &[(b"a", Csn::new(1, 1), false), (b"b", Csn::new(2, 2), true)],
        );
        let decoded = GlobalWriteVersionMap::from_bytes(&snap.to_bytes()).unwrap();
        assert_eq!(decoded, snap);
        assert_eq!(decoded.digest(), snap.digest());

        let mut changed = snap.clone();
        changed.install(
            b"c".to_vec(),
            VersionMapEntry {
                committed_csn: Csn::new(3, 1),
                tombstone: false,
            },
        );
        assert_ne!(changed.digest(), snap.digest());
    }
}
