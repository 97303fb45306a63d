//! The concurrency-control node: a sans-IO state machine that admits
//! transactions into epochs, routes sub-transactions to shard resolvers,
//! exchanges write and abort sets, folds committed writes into per-shard
//! version maps, logs them durably, and pushes the log to storage.
//!
//! Every node runs the same machine; there is no designated master for
//! admission. Determinism is the load-bearing property: given the same
//! admitted transaction multiset, every replica of a shard computes the
//! same abort set and folds the same snapshot, and a re-execution after a
//! crash reproduces byte-identical log frames. That is why resolution runs
//! once per epoch over the full exchanged union (read validation is the
//! only per-resolver step, and its outcome depends only on the prior
//! snapshot, never on which node performed it).
//!
//! Epoch pipeline, per epoch E:
//!
//! 1. admit: tag with (time, node) Csn, stream a backup entry to peers.
//! 2. close: stop admission, require backup acks from a majority before
//!    anything of E leaves this node.
//! 3. route: split each transaction by shard, send one batch per peer
//!    (empty batches included, so receivers can detect completeness).
//! 4. validate: check read sets against the epoch E-1 snapshot.
//! 5. exchange: replicas of a shard swap surviving write intents.
//! 6. resolve: first-writer-wins over the union, identically everywhere.
//! 7. merge: every node broadcasts its abort contribution; the union,
//!    closed over cross-model groups, is the global abort set.
//! 8. finalize: fold survivors into shard snapshots, decide, log, push.

use crate::codec::{CodecError, Dec, Enc, Wire};
use crate::conflict::{
    finalize_epoch, resolve_records, validate_reads, EpochAbortSet, EpochWriteVersionMap,
    GlobalWriteVersionMap, VersionMapEntry,
};
use crate::durability::{LogEntry, LogError, LogStore, Lsn};
use crate::model::{
    AbortReason, Cen, Csn, Decision, EngineTag, Key, NodeId, TaggedTxn, TxnRequest, Verdict,
    WriteRecord,
};
use crate::transport::{
    elect_leader, majority, AbortEntry, AbortSetPayload, AdminMsg, Addr, BackupEntry,
    DecisionReply, Envelope, EpochReportRow, GroupDecl, LeaderClaim, LogPullReply, LogPullRequest,
    LogPushFrame, MembershipBeat, MembershipView, Message, PullResult, RecoveryAction, ShardWriter,
    SubTxn, SubTxnRoute, SubmitReject, SubmitResult, TxnBackup, TxnStatus, WriteSetPayload,
};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

// ---- shard map ----

/// FNV-1a 64, used for shard placement: stable across platforms and
/// processes, unlike the std hasher.
pub fn stable_hash(key: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in key {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Key space partition: `assignment[s]` is the replica set (CC node ids)
/// for shard `s`. Versioned so re-sharding can hand maps over atomically
/// at an epoch cutover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardMap {
    pub version: u32,
    pub num_shards: u32,
    pub assignment: Vec<Vec<NodeId>>,
}

impl ShardMap {
    /// Round-robin placement of `replication` replicas per shard.
    pub fn uniform(version: u32, num_shards: u32, nodes: &[NodeId], replication: usize) -> Self {
        assert!(num_shards > 0 && !nodes.is_empty());
        let replication = replication.clamp(1, nodes.len());
        let assignment = (0..num_shards as usize)
            .map(|s| {
                let mut replicas: Vec<NodeId> = (0..replication)
                    .map(|r| nodes[(s + r) % nodes.len()])
                    .collect();
                replicas.sort_unstable();
                replicas
            })
            .collect();
        Self {
            version,
            num_shards,
            assignment,
        }
    }

    pub fn shard_of(&self, key: &[u8]) -> u32 {
        (stable_hash(key) % self.num_shards as u64) as u32
    }

    pub fn replicas(&self, shard: u32) -> &[NodeId] {
        &self.assignment[shard as usize]
    }

    pub fn shards_owned_by(&self, node: NodeId) -> Vec<u32> {
        (0..self.num_shards)
            .filter(|&s| self.replicas(s).contains(&node))
            .collect()
    }

    pub fn is_well_formed(&self) -> bool {
        self.num_shards as usize == self.assignment.len()
            && self.assignment.iter().all(|r| {
                !r.is_empty() && r.windows(2).all(|w| w[0] < w[1])
            })
    }
}

/// Layout: version u32, num_shards u32, per shard a count and node ids.
impl Wire for ShardMap {
    fn encode(&self, e: &mut Enc) {
        e.put_u32(self.version);
        e.put_u32(self.num_shards);
        e.put_count(self.assignment.len());
        for replicas in &self.assignment {
            e.put_count(replicas.len());
            for n in replicas {
                e.put_u32(*n);
            }
        }
    }
    fn decode(d: &mut Dec<'_>) -> Result<Self, CodecError> {
        let version = d.get_u32()?;
        let num_shards = d.get_u32()?;
        let n = d.get_count()?;
        let mut assignment = Vec::with_capacity(n);
        for _ in 0..n {
            let m = d.get_count()?;
            let mut replicas = Vec::with_capacity(m);
            for _ in 0..m {
                replicas.push(d.get_u32()?);
            }
            assignment.push(replicas);
        }
        Ok(ShardMap {
            version,
            num_shards,
            assignment,
        })
    }
}

/// Splits a transaction's records into per-shard slices. Sub-transactions
/// keep the parent's Csn; a transaction commits or aborts as a whole via
/// the merged abort set.
pub fn split_subtxns(map: &ShardMap, txn: &TaggedTxn) -> Vec<SubTxn> {
    let mut by_shard: BTreeMap<u32, SubTxn> = BTreeMap::new();
    for r in &txn.request.read_set {
        let shard = map.shard_of(&r.key);
        by_shard
            .entry(shard)
            .or_insert_with(|| SubTxn {
                csn: txn.csn,
                shard,
                read_set: Vec::new(),
                write_set: Vec::new(),
            })
            .read_set
            .push(r.clone());
    }
    for w in &txn.request.write_set {
        let shard = map.shard_of(&w.key);
        by_shard
            .entry(shard)
            .or_insert_with(|| SubTxn {
                csn: txn.csn,
                shard,
                read_set: Vec::new(),
                write_set: Vec::new(),
            })
            .write_set
            .push(w.clone());
    }
    by_shard.into_values().collect()
}

// ---- configuration ----

#[derive(Debug, Clone)]
pub struct CcConfig {
    pub node_id: NodeId,
    /// All configured CC nodes, sorted.
    pub nodes: Vec<NodeId>,
    pub shard_map: ShardMap,
    /// First live epoch (the one after the preloaded genesis epoch).
    pub start_cen: Cen,
    /// Close the open epoch every this many ticks; 0 means externally
    /// driven via admin Tick frames.
    pub epoch_ticks: u32,
    pub beat_every_ticks: u32,
    pub beat_timeout_ticks: u32,
    /// Route each sub-transaction to a single resolver and exchange write
    /// sets among replicas, instead of routing to every replica.
    pub local_first: bool,
    /// Hold decision replies until every storage replica acknowledged the
    /// epoch's log frames.
    pub sync_log_push: bool,
    /// Storage node ids hosting each engine's replicas.
    pub engine_hosts: BTreeMap<EngineTag, Vec<u32>>,
    /// Incomplete cross-model groups abort after this many epoch closes.
    pub group_horizon_epochs: u64,
    /// Admission cap per epoch; beyond it submissions bounce as Overloaded.
    pub max_epoch_txns: usize,
    /// Admission also bounces while this many epochs are still in flight.
    pub max_open_epochs: u64,
    /// Minimum epochs between a reshard trigger and its cutover.
    pub reshard_min_lead: u64,
    pub push_retry_ticks: u32,
    /// Re-broadcast interval for a recovering node's state sync request.
    pub sync_retry_ticks: u32,
}

impl CcConfig {
    pub fn single(node_id: NodeId, shard_map: ShardMap) -> Self {
        Self {
            node_id,
            nodes: vec![node_id],
            shard_map,
            start_cen: Cen(2),
            epoch_ticks: 0,
            beat_every_ticks: 1,
            beat_timeout_ticks: 5,
            local_first: true,
            sync_log_push: false,
            engine_hosts: BTreeMap::new(),
            group_horizon_epochs: 2,
            max_epoch_txns: 100_000,
            max_open_epochs: 8,
            reshard_min_lead: 2,
            push_retry_ticks: 8,
            sync_retry_ticks: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("log failure: {0}")]
    Log(#[from] LogError),
    #[error("shard map malformed")]
    BadShardMap,
}

// ---- per-epoch state ----

#[derive(Debug, Clone)]
struct AdmittedTxn {
    client: u32,
    txn: TaggedTxn,
}

#[derive(Debug, Default)]
struct ShardPhase {
    validated: bool,
    /// My validated write intents for this shard (what I broadcast).
    my_writers: Vec<ShardWriter>,
    /// Exchange senders heard from, self included once validated.
    payloads_from: BTreeSet<NodeId>,
    /// Accumulated resolution input: mine plus every peer payload.
    writers: Vec<ShardWriter>,
    resolved: bool,
}

#[derive(Debug)]
struct EpochState {
    opened: bool,
    participants: BTreeSet<NodeId>,
    relaxed: bool,
    reexec_view: Option<u64>,
    closed: bool,
    backup_waived: bool,
    own: Vec<AdmittedTxn>,
    adopted: Vec<AdmittedTxn>,
    group_decls: Vec<GroupDecl>,
    extra_aborts: Vec<(Csn, AbortReason)>,
    routed: bool,
    routes_from: BTreeSet<NodeId>,
    collected: BTreeMap<u32, Vec<SubTxn>>,
    shards_ready: bool,
    shards: BTreeMap<u32, ShardPhase>,
    contribution: EpochAbortSet,
    contribution_sent: bool,
    abort_payloads: BTreeMap<NodeId, AbortSetPayload>,
    merged: Option<EpochAbortSet>,
    finalized: bool,
    released: bool,
    reply_queue: Vec<(u32, DecisionReply)>,
}

impl EpochState {
    fn skeleton() -> Self {
        Self {
            opened: false,
            participants: BTreeSet::new(),
            relaxed: false,
            reexec_view: None,
            closed: false,
            backup_waived: false,
            own: Vec::new(),
            adopted: Vec::new(),
            group_decls: Vec::new(),
            extra_aborts: Vec::new(),
            routed: false,
            routes_from: BTreeSet::new(),
            collected: BTreeMap::new(),
            shards_ready: false,
            shards: BTreeMap::new(),
            contribution: EpochAbortSet::new(),
            contribution_sent: false,
            abort_payloads: BTreeMap::new(),
            merged: None,
            finalized: false,
            released: false,
            reply_queue: Vec::new(),
        }
    }
}

#[derive(Debug)]
struct GroupStage {
    expected: u32,
    members: Vec<(u32, TxnRequest)>,
    opened: Cen,
}

#[derive(Debug)]
struct TakeoverState {
    view: u64,
    deads: BTreeSet<NodeId>,
    expected: BTreeSet<NodeId>,
    received: BTreeMap<(NodeId, NodeId), Vec<EpochReportRow>>,
    planned: bool,
}

#[derive(Debug)]
struct JoinState {
    resps: BTreeMap<NodeId, AdminMsg>,
    next_request_tick: u64,
}

#[derive(Debug, Clone)]
struct PendingFrame {
    origin: NodeId,
    engine: EngineTag,
    cen: Cen,
    first_lsn: Lsn,
    entries: Vec<LogEntry>,
    unacked: BTreeSet<u32>,
    last_sent: u64,
}

// ---- the node ----

pub struct CcNode {
    cfg: CcConfig,
    log: LogStore,
    tagger: crate::model::TxnTagger,
    active: bool,
    halted: bool,
    now: u64,
    view: MembershipView,
    last_claim: (u64, NodeId),
    member_since: BTreeMap<NodeId, Cen>,
    last_heard: BTreeMap<NodeId, u64>,
    last_beat_tick: u64,
    epoch_opened_tick: u64,
    open_cen: Cen,
    finalized_cen: Cen,
    stable_cen: Cen,
    current_map: ShardMap,
    pending_map: Option<(ShardMap, Cen)>,
    maps: BTreeMap<u32, GlobalWriteVersionMap>,
    maps_next: BTreeMap<u32, GlobalWriteVersionMap>,
    transfers_in: BTreeMap<u32, BTreeMap<u32, Vec<(Key, VersionMapEntry)>>>,
    epochs: BTreeMap<Cen, EpochState>,
    backup_acks: BTreeMap<Csn, BTreeSet<NodeId>>,
    backup_store: BTreeMap<NodeId, BTreeMap<Csn, BackupEntry>>,
    peer_stable: BTreeMap<NodeId, Cen>,
    peer_stable_tails: BTreeMap<NodeId, BTreeMap<EngineTag, Lsn>>,
    group_stage: BTreeMap<u64, GroupStage>,
    pending: BTreeMap<(NodeId, u32, u64), Csn>,
    decided: BTreeMap<(NodeId, u32, u64), Decision>,
    frames: BTreeMap<(Cen, NodeId, EngineTag), PendingFrame>,
    origin_next_lsn: BTreeMap<(NodeId, EngineTag), Lsn>,
    takeover_entries: BTreeMap<(NodeId, EngineTag), Vec<LogEntry>>,
    covered_through: BTreeMap<NodeId, Cen>,
    takeover: Option<TakeoverState>,
    join: Option<JoinState>,
    pending_joins: BTreeMap<NodeId, Cen>,
    counters: BTreeMap<&'static str, u64>,
    outbox: Vec<Envelope>,
}

impl CcNode {
    /// Fresh node of an initial cluster. `genesis` is the preloaded key
    /// space, installed as the epoch before `cfg.start_cen` on the shards
    /// this node replicates.
    pub fn new(
        cfg: CcConfig,
        genesis: &[(Key, VersionMapEntry)],
        log: LogStore,
    ) -> Result<Self, CoordinatorError> {
        if !cfg.shard_map.is_well_formed() {
            return Err(CoordinatorError::BadShardMap);
        }
        let start = cfg.start_cen;
        let snapshot_epoch = start.prev();
        let mut maps = BTreeMap::new();
        for shard in cfg.shard_map.shards_owned_by(cfg.node_id) {
            let mut map = GlobalWriteVersionMap::new(snapshot_epoch);
            for (key, entry) in genesis {
                if cfg.shard_map.shard_of(key) == shard {
                    map.install(key.clone(), entry.clone());
                }
            }
            maps.insert(shard, map);
        }
        let tagger =
            crate::model::TxnTagger::restore(cfg.node_id, log.max_local_time(), start);
        let view = MembershipView::initial(cfg.nodes.iter().copied());
        let peer_stable = cfg.nodes.iter().map(|&n| (n, snapshot_epoch)).collect();
        let peer_stable_tails = cfg.nodes.iter().map(|&n| (n, BTreeMap::new())).collect();
        let member_since = cfg.nodes.iter().map(|&n| (n, Cen(0))).collect();
        let current_map = cfg.shard_map.clone();
        let mut node = Self {
            cfg,
            log,
            tagger,
            active: true,
            halted: false,
            now: 0,
            view,
            last_claim: (0, 0),
            member_since,
            last_heard: BTreeMap::new(),
            last_beat_tick: 0,
            epoch_opened_tick: 0,
            open_cen: start,
            finalized_cen: snapshot_epoch,
            stable_cen: snapshot_epoch,
            current_map,
            pending_map: None,
            maps,
            maps_next: BTreeMap::new(),
            transfers_in: BTreeMap::new(),
            epochs: BTreeMap::new(),
            backup_acks: BTreeMap::new(),
            backup_store: BTreeMap::new(),
            peer_stable,
            peer_stable_tails,
            group_stage: BTreeMap::new(),
            pending: BTreeMap::new(),
            decided: BTreeMap::new(),
            frames: BTreeMap::new(),
            origin_next_lsn: BTreeMap::new(),
            takeover_entries: BTreeMap::new(),
            covered_through: BTreeMap::new(),
            takeover: None,
            join: None,
            pending_joins: BTreeMap::new(),
            counters: BTreeMap::new(),
            outbox: Vec::new(),
        };
        node.open_epoch(start);
        Ok(node)
    }

    /// Restarted node: keeps its durable log, rebuilds everything else
    /// from peers via state sync before participating again.
    pub fn recover(cfg: CcConfig, log: LogStore) -> Result<Self, CoordinatorError> {
        let mut node = Self::new(cfg, &[], log)?;
        node.active = false;
        node.epochs.clear();
        node.maps.clear();
        node.view = MembershipView {
            view: 0,
            live: BTreeSet::new(),
        };
        node.join = Some(JoinState {
            resps: BTreeMap::new(),
            next_request_tick: 0,
        });
        Ok(node)
    }

    pub fn node_id(&self) -> NodeId {
        self.cfg.node_id
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn open_cen(&self) -> Cen {
        self.open_cen
    }

    pub fn finalized_cen(&self) -> Cen {
        self.finalized_cen
    }

    pub fn stable_cen(&self) -> Cen {
        self.stable_cen
    }

    pub fn view(&self) -> &MembershipView {
        &self.view
    }

    pub fn log(&self) -> &LogStore {
        &self.log
    }

    pub fn shard_map(&self) -> &ShardMap {
        &self.current_map
    }

    /// Digest of one owned shard's snapshot, for convergence checks.
    pub fn shard_digest(&self, shard: u32) -> Option<u32> {
        self.maps.get(&shard).map(|m| m.digest())
    }

    pub fn owned_snapshot(&self, shard: u32) -> Option<&GlobalWriteVersionMap> {
        self.maps.get(&shard)
    }

    pub fn counter(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }

    fn bump(&mut self, name: &'static str) {
        *self.counters.entry(name).or_insert(0) += 1;
    }

    fn send(&mut self, dst: Addr, msg: Message) {
        self.outbox.push(Envelope {
            src: Addr::Cc(self.cfg.node_id),
            dst,
            msg,
        });
    }

    fn cc_peers(&self) -> Vec<NodeId> {
        self.cfg
            .nodes
            .iter()
            .copied()
            .filter(|&n| n != self.cfg.node_id)
            .collect()
    }

    /// Members of the view that have activated by epoch `cen` (a joiner is
    /// live but does not participate before its activation epoch).
    fn effective_live(&self, cen: Cen) -> BTreeSet<NodeId> {
        self.view
            .live
            .iter()
            .copied()
            .filter(|n| self.member_since.get(n).copied().unwrap_or(Cen(0)) <= cen)
            .collect()
    }

    fn map_for(&self, cen: Cen) -> &ShardMap {
        match &self.pending_map {
            Some((map, cutover)) if cen >= *cutover => map,
            _ => &self.current_map,
        }
    }

    fn uses_next_maps(&self, cen: Cen) -> bool {
        matches!(&self.pending_map, Some((_, cutover)) if cen >= *cutover)
    }

    /// Exchange group for (epoch, shard): participants that replicate it.
    fn exch(&self, participants: &BTreeSet<NodeId>, cen: Cen, shard: u32) -> BTreeSet<NodeId> {
        self.map_for(cen)
            .replicas(shard)
            .iter()
            .copied()
            .filter(|n| participants.contains(n))
            .collect()
    }

    fn owned_shards(&self, cen: Cen) -> Vec<u32> {
        self.map_for(cen).shards_owned_by(self.cfg.node_id)
    }

    // ---- driving ----

    pub fn on_tick(&mut self) -> Vec<Envelope> {
        self.now += 1;
        if !self.active {
            self.join_tick();
            return std::mem::take(&mut self.outbox);
        }
        if self.now.saturating_sub(self.last_beat_tick) >= self.cfg.beat_every_ticks as u64 {
            self.send_beats();
        }
        self.detect_failures();
        if !self.halted
            && self.cfg.epoch_ticks > 0
            && self.now.saturating_sub(self.epoch_opened_tick) >= self.cfg.epoch_ticks as u64
        {
            self.close_epoch();
        }
        self.retry_pushes();
        self.pump();
        std::mem::take(&mut self.outbox)
    }

    pub fn on_message(&mut self, env: Envelope) -> Vec<Envelope> {
        let src = env.src;
        match env.msg {
            Message::SubmitTxn(m) => self.handle_submit(src, m.request),
            Message::SubTxnRoute(m) => {
                self.accept_route(m.cen, m.origin, m.subtxns);
            }
            Message::WriteSetPayload(m) => self.accept_write_payload(m),
            Message::AbortSetPayload(m) => self.accept_abort_payload(m),
            Message::TxnBackup(m) => self.handle_backup(src, m),
            Message::MembershipBeat(m) => self.handle_beat(m),
            Message::LeaderClaim(m) => self.adopt_claim(m),
            Message::LogPushFrame(m) => self.handle_push_ack(src, m),
            Message::LogPullRequest(m) => self.handle_log_pull(src, m),
            Message::AdminFrame(m) => self.handle_admin(src, m),
            Message::DecisionReply(_) | Message::LogPullReply(_) => {
                self.bump("recv.unexpected");
            }
        }
        self.pump();
        std::mem::take(&mut self.outbox)
    }

    // ---- admission ----

    fn handle_submit(&mut self, src: Addr, request: TxnRequest) {
        let client = match src {
            Addr::Client(c) => c,
            _ => {
                self.bump("recv.unexpected");
                return;
            }
        };
        let txn_id = request.txn_id;
        if !self.active || self.halted {
            self.reject(client, txn_id, SubmitReject::NotServing);
            return;
        }
        if !Self::well_formed(&request) {
            self.reject(client, txn_id, SubmitReject::MalformedRequest);
            return;
        }
        let in_flight = self.open_cen.0.saturating_sub(self.finalized_cen.0);
        let admitted = self
            .epochs
            .get(&self.open_cen)
            .map_or(0, |ep| ep.own.len());
        if admitted >= self.cfg.max_epoch_txns || in_flight > self.cfg.max_open_epochs {
            self.reject(client, txn_id, SubmitReject::Overloaded);
            return;
        }
        if let Some(group) = request.cross_model_group.clone() {
            self.stage_group_member(client, request, group.group_id, group.expected_members);
            return;
        }
        self.admit(client, request);
    }

    fn well_formed(request: &TxnRequest) -> bool {
        let mut write_keys = BTreeSet::new();
        for w in &request.write_set {
            if w.key.is_empty() || !write_keys.insert(&w.key) {
                return false;
            }
        }
        let mut read_keys = BTreeSet::new();
        for r in &request.read_set {
            if r.key.is_empty() || !read_keys.insert(&r.key) {
                return false;
            }
        }
        if let Some(g) = &request.cross_model_group {
            if g.expected_members == 0 {
                return false;
            }
        }
        true
    }

    fn reject(&mut self, client: u32, txn_id: u64, reject: SubmitReject) {
        self.bump(match reject {
            SubmitReject::Overloaded => "reject.overloaded",
            SubmitReject::MalformedRequest => "reject.malformed",
            SubmitReject::NotServing => "reject.not_serving",
        });
        self.send(
            Addr::Client(client),
            Message::DecisionReply(DecisionReply {
                txn_id,
                result: SubmitResult::Rejected(reject),
            }),
        );
    }

    fn stage_group_member(&mut self, client: u32, request: TxnRequest, group_id: u64, expected: u32) {
        let open = self.open_cen;
        let stage = self.group_stage.entry(group_id).or_insert_with(|| GroupStage {
            expected,
            members: Vec::new(),
            opened: open,
        });
        if stage.expected != expected || stage.members.len() as u32 >= stage.expected {
            let txn_id = request.txn_id;
            self.reject(client, txn_id, SubmitReject::MalformedRequest);
            return;
        }
        self.pending
            .insert((self.cfg.node_id, client, request.txn_id), Csn::new(0, 0));
        stage.members.push((client, request));
        self.bump("group.staged");
        if let Some(stage) = self.group_stage.get(&group_id) {
            if stage.members.len() as u32 == stage.expected {
                let stage = self.group_stage.remove(&group_id).unwrap();
                let mut members = Vec::new();
                for (client, request) in stage.members {
                    members.push(self.admit(client, request));
                }
                let ep = self.epochs.get_mut(&self.open_cen).expect("open epoch");
                ep.group_decls.push(GroupDecl { group_id, members });
                self.bump("group.admitted");
            }
        }
    }

    /// Expire groups still incomplete after the horizon: members were never
    /// admitted, so they abort without touching resolution.
    fn expire_groups(&mut self) {
        let horizon = self.cfg.group_horizon_epochs;
        let open = self.open_cen;
        let expired: Vec<u64> = self
            .group_stage
            .iter()
            .filter(|(_, s)| open.0.saturating_sub(s.opened.0) >= horizon)
            .map(|(&id, _)| id)
            .collect();
        for group_id in expired {
            let stage = self.group_stage.remove(&group_id).unwrap();
            for (client, request) in stage.members {
                let tagged = self.tagger.tag(request);
                let decision = Decision {
                    csn: tagged.csn,
                    cen: open,
                    verdict: Verdict::Aborted(AbortReason::CrossModelPeerAborted),
                };
                let key = (self.cfg.node_id, client, tagged.request.txn_id);
                self.pending.remove(&key);
                self.decided.insert(key, decision);
                self.send(
                    Addr::Client(client),
                    Message::DecisionReply(DecisionReply {
                        txn_id: tagged.request.txn_id,
                        result: SubmitResult::Decided(decision),
                    }),
                );
                self.bump("group.expired_member");
            }
        }
    }

    fn admit(&mut self, client: u32, request: TxnRequest) -> Csn {
        let tagged = self.tagger.tag(request);
        let csn = tagged.csn;
        debug_assert_eq!(tagged.cen, self.open_cen);
        self.pending
            .insert((self.cfg.node_id, client, tagged.request.txn_id), csn);
        let entry = BackupEntry {
            client,
            txn: tagged.clone(),
        };
        for peer in self.cc_peers() {
            self.send(
                Addr::Cc(peer),
                Message::TxnBackup(TxnBackup::Entries {
                    origin: self.cfg.node_id,
                    entries: vec![entry.clone()],
                }),
            );
        }
        let ep = self.epochs.get_mut(&self.open_cen).expect("open epoch");
        ep.own.push(AdmittedTxn { client, txn: tagged });
        self.bump("admitted");
        csn
    }

    // ---- epoch lifecycle ----

    fn open_epoch(&mut self, cen: Cen) {
        let participants = self.effective_live(cen);
        let ep = self.epochs.entry(cen).or_insert_with(EpochState::skeleton);
        ep.opened = true;
        ep.participants = participants;
        self.epoch_opened_tick = self.now;
    }

    fn close_epoch(&mut self) {
        let closing = self.open_cen;
        if let Some(ep) = self.epochs.get_mut(&closing) {
            ep.closed = true;
        }
        self.open_cen = closing.next();
        self.tagger.set_open_cen(self.open_cen);
        self.open_epoch(self.open_cen);
        self.expire_groups();
        self.bump("epochs.closed");
    }

    // ---- routing and collection ----

    /// Resolver shard assignment for my own routing: keep the sub-txn
    /// local when I replicate the shard, otherwise the lowest live replica.
    fn resolver_of(&self, participants: &BTreeSet<NodeId>, cen: Cen, shard: u32) -> Option<NodeId> {
        let replicas = self.exch(participants, cen, shard);
        if replicas.contains(&self.cfg.node_id) {
            Some(self.cfg.node_id)
        } else {
            replicas.iter().next().copied()
        }
    }

    fn backup_barrier_met(&self, ep: &EpochState) -> bool {
        if ep.backup_waived || self.cfg.nodes.len() == 1 {
            return true;
        }
        let needed = majority(self.cfg.nodes.len());
        ep.own.iter().all(|t| {
            1 + self
                .backup_acks
                .get(&t.txn.csn)
                .map_or(0, |acks| acks.len())
                >= needed
        })
    }

    fn do_route(&mut self, cen: Cen, ep: &mut EpochState) {
        let participants = ep.participants.clone();
        let mut batches: BTreeMap<NodeId, Vec<SubTxn>> = participants
            .iter()
            .map(|&p| (p, Vec::new()))
            .collect();
        let mut all: Vec<&AdmittedTxn> = ep.own.iter().chain(ep.adopted.iter()).collect();
        all.sort_by_key(|t| t.txn.csn);
        let mut unavailable: Vec<Csn> = Vec::new();
        for admitted in all {
            for sub in split_subtxns(self.map_for(cen), &admitted.txn) {
                // A shard whose replicas are all outside the participant set
                // (every copy dead, cluster still at majority) can validate
                // nothing; letting the subtxn vanish would commit its txn
                // unchecked, so the whole transaction aborts instead.
                if self.cfg.local_first {
                    match self.resolver_of(&participants, cen, sub.shard) {
                        Some(resolver) => batches.get_mut(&resolver).unwrap().push(sub),
                        None => unavailable.push(sub.csn),
                    }
                } else {
                    let replicas = self.exch(&participants, cen, sub.shard);
                    if replicas.is_empty() {
                        unavailable.push(sub.csn);
                    }
                    for replica in replicas {
                        batches.get_mut(&replica).unwrap().push(sub.clone());
                    }
                }
            }
        }
        for csn in unavailable {
            ep.extra_aborts.push((csn, AbortReason::ShardUnavailable));
            self.bump("route.shard_unavailable");
        }
        for (peer, subtxns) in batches {
            if peer == self.cfg.node_id {
                ep.routes_from.insert(peer);
                for sub in subtxns {
                    ep.collected.entry(sub.shard).or_default().push(sub);
                }
            } else {
                self.send(
                    Addr::Cc(peer),
                    Message::SubTxnRoute(SubTxnRoute {
                        cen,
                        origin: self.cfg.node_id,
                        subtxns,
                    }),
                );
            }
        }
        // Majority acks held for the routed epoch are no longer needed.
        for t in &ep.own {
            self.backup_acks.remove(&t.txn.csn);
        }
        ep.routed = true;
        self.bump("epochs.routed");
    }

    fn accept_route(&mut self, cen: Cen, origin: NodeId, subtxns: Vec<SubTxn>) {
        self.bump("recv.sub_txn_route");
        let ep = self.epochs.entry(cen).or_insert_with(EpochState::skeleton);
        if ep.routes_from.contains(&origin) {
            return;
        }
        ep.routes_from.insert(origin);
        for sub in subtxns {
            ep.collected.entry(sub.shard).or_default().push(sub);
        }
    }

    fn barrier_met(
        &self,
        expected: &BTreeSet<NodeId>,
        delivered: &BTreeSet<NodeId>,
        relaxed: bool,
    ) -> bool {
        expected.iter().all(|p| {
            *p == self.cfg.node_id
                || delivered.contains(p)
                || (relaxed && !self.view.live.contains(p))
        })
    }

    // ---- validation, exchange, resolution ----

    fn shard_snapshot_ready(&self, cen: Cen, shard: u32) -> bool {
        let maps = if self.uses_next_maps(cen) {
            &self.maps_next
        } else {
            &self.maps
        };
        maps.get(&shard)
            .map_or(false, |m| m.snapshot_epoch().next() == cen)
    }

    fn validate_shard(&mut self, cen: Cen, ep: &mut EpochState, shard: u32) {
        let maps = if self.uses_next_maps(cen) {
            &self.maps_next
        } else {
            &self.maps
        };
        let snapshot = maps.get(&shard).expect("snapshot ready");
        let mut subs = ep.collected.remove(&shard).unwrap_or_default();
        subs.sort_by_key(|s| s.csn);
        let mut writers = Vec::new();
        let mut failed = 0u64;
        for sub in subs {
            if validate_reads(&sub.read_set, snapshot) {
                if !sub.write_set.is_empty() {
                    writers.push(ShardWriter {
                        csn: sub.csn,
                        writes: sub.write_set,
                    });
                }
            } else {
                ep.contribution.insert(sub.csn, AbortReason::ReadValidation);
                failed += 1;
            }
        }
        *self.counters.entry("aborts.read_validation_local").or_insert(0) += failed;
        let phase = ep.shards.entry(shard).or_default();
        phase.validated = true;
        phase.my_writers = writers.clone();
        phase.payloads_from.insert(self.cfg.node_id);
        phase.writers.extend(writers.iter().cloned());
        if self.cfg.local_first {
            let peers: Vec<NodeId> = self
                .exch(&ep.participants, cen, shard)
                .into_iter()
                .filter(|&n| n != self.cfg.node_id)
                .collect();
            for peer in peers {
                self.send(
                    Addr::Cc(peer),
                    Message::WriteSetPayload(WriteSetPayload {
                        cen,
                        shard,
                        sender: self.cfg.node_id,
                        writers: writers.clone(),
                    }),
                );
            }
        }
    }

    fn accept_write_payload(&mut self, payload: WriteSetPayload) {
        self.bump("recv.write_set_payload");
        let ep = self
            .epochs
            .entry(payload.cen)
            .or_insert_with(EpochState::skeleton);
        let phase = ep.shards.entry(payload.shard).or_default();
        if !phase.payloads_from.insert(payload.sender) {
            return;
        }
        phase.writers.extend(payload.writers);
    }

    fn shard_exchange_met(&self, ep: &EpochState, cen: Cen, shard: u32) -> bool {
        if !self.cfg.local_first {
            return true;
        }
        let expected = self.exch(&ep.participants, cen, shard);
        let phase = match ep.shards.get(&shard) {
            Some(p) => p,
            None => return false,
        };
        self.barrier_met(&expected, &phase.payloads_from, ep.relaxed)
    }

    fn resolve_shard(&mut self, cen: Cen, ep: &mut EpochState, shard: u32) {
        let maps = if self.uses_next_maps(cen) {
            &self.maps_next
        } else {
            &self.maps
        };
        let snapshot = maps.get(&shard).expect("snapshot ready");
        let phase = ep.shards.get_mut(&shard).expect("phase exists");
        let mut writers = std::mem::take(&mut phase.writers);
        writers.sort_by_key(|w| w.csn);
        // In full-exchange mode every origin routed to every replica, so a
        // writer can appear once per origin batch; resolution must see it
        // once.
        writers.dedup_by_key(|w| w.csn);
        let mut epoch_map = EpochWriteVersionMap::new();
        for w in &writers {
            let _ = resolve_records(w.csn, &w.writes, snapshot, &mut epoch_map, &mut ep.contribution);
        }
        let phase = ep.shards.get_mut(&shard).expect("phase exists");
        phase.writers = writers;
        phase.resolved = true;
    }

    fn send_contribution(&mut self, cen: Cen, ep: &mut EpochState) {
        for (csn, reason) in ep.extra_aborts.clone() {
            ep.contribution.insert(csn, reason);
        }
        let payload = AbortSetPayload {
            cen,
            sender: self.cfg.node_id,
            aborts: ep
                .contribution
                .iter()
                .map(|(csn, reason)| AbortEntry { csn, reason })
                .collect(),
            groups: ep.group_decls.clone(),
        };
        let peers: Vec<NodeId> = ep
            .participants
            .iter()
            .copied()
            .filter(|&n| n != self.cfg.node_id)
            .collect();
        for peer in peers {
            self.send(
                Addr::Cc(peer),
                Message::AbortSetPayload(payload.clone()),
            );
        }
        ep.abort_payloads.insert(self.cfg.node_id, payload);
        ep.contribution_sent = true;
    }

    fn accept_abort_payload(&mut self, payload: AbortSetPayload) {
        self.bump("recv.abort_set_payload");
        let ep = self
            .epochs
            .entry(payload.cen)
            .or_insert_with(EpochState::skeleton);
        ep.abort_payloads.entry(payload.sender).or_insert(payload);
    }

    /// Union of every participant's contribution, then group closure: any
    /// aborted member drags its whole cross-model group down. Closure runs
    /// before the fold, so group-aborted writes never reach a snapshot.
    fn merge_aborts(&mut self, ep: &mut EpochState) {
        let mut merged = EpochAbortSet::new();
        let mut decls: Vec<GroupDecl> = Vec::new();
        for payload in ep.abort_payloads.values() {
            for a in &payload.aborts {
                merged.insert(a.csn, a.reason);
            }
            decls.extend(payload.groups.iter().cloned());
        }
        for decl in &decls {
            if decl.members.iter().any(|m| merged.contains(*m)) {
                for &m in &decl.members {
                    merged.insert(m, AbortReason::CrossModelPeerAborted);
                }
            }
        }
        ep.merged = Some(merged);
    }

    // ---- finalize ----

    fn finalize(&mut self, cen: Cen, ep: &mut EpochState) -> Result<(), CoordinatorError> {
        let merged = ep.merged.as_ref().expect("merged").clone();
        let abort_csns = merged.csns();

        let owned = self.owned_shards(cen);
        let use_next = self.uses_next_maps(cen);
        for shard in owned {
            let maps = if use_next {
                &mut self.maps_next
            } else {
                &mut self.maps
            };
            let map = maps.get_mut(&shard).expect("owned map");
            if map.snapshot_epoch() >= cen {
                continue;
            }
            let writers: Vec<(Csn, Vec<WriteRecord>)> = ep
                .shards
                .get(&shard)
                .map(|p| {
                    p.writers
                        .iter()
                        .map(|w| (w.csn, w.writes.clone()))
                        .collect()
                })
                .unwrap_or_default();
            finalize_epoch(cen, &writers, &abort_csns, map)
                .expect("fold follows snapshot order");
        }

        // Decide and log this node's own transactions.
        let mut committed_log: Vec<(Csn, EngineTag, Vec<WriteRecord>)> = Vec::new();
        for admitted in &ep.own {
            let csn = admitted.txn.csn;
            let verdict = match merged.reason_of(csn) {
                Some(reason) => Verdict::Aborted(reason),
                None => Verdict::Committed,
            };
            if verdict == Verdict::Committed && !admitted.txn.request.write_set.is_empty() {
                committed_log.push((
                    csn,
                    admitted.txn.request.engine,
                    admitted.txn.request.write_set.clone(),
                ));
            }
            let decision = Decision { csn, cen, verdict };
            ep.reply_queue.push((
                admitted.client,
                DecisionReply {
                    txn_id: admitted.txn.request.txn_id,
                    result: SubmitResult::Decided(decision),
                },
            ));
            match verdict {
                Verdict::Committed => self.bump("txn.committed"),
                Verdict::Aborted(_) => self.bump("txn.aborted"),
            }
        }
        committed_log.sort_by_key(|(csn, _, _)| *csn);
        let appended = self.log.append_epoch(cen, &committed_log)?;
        self.build_own_frames(cen, &appended);

        // Cover log frames and decisions for origins that cannot push their
        // own: dead participants and configured nodes outside this epoch.
        let leader = elect_leader(
            &ep.participants
                .iter()
                .copied()
                .filter(|n| self.view.live.contains(n))
                .collect(),
        );
        if leader == Some(self.cfg.node_id) {
            let covered: Vec<NodeId> = self
                .cfg
                .nodes
                .iter()
                .copied()
                .filter(|&o| {
                    o != self.cfg.node_id
                        && (!ep.participants.contains(&o) || !self.view.live.contains(&o))
                })
                .collect();
            for origin in covered {
                self.cover_origin_epoch(cen, origin, &merged);
            }
        }

        ep.finalized = true;
        self.finalized_cen = cen;
        self.bump("epochs.finalized");

        // Re-sharding: after folding the last old-map epoch, ship each old
        // shard's slices to the new owners.
        if let Some((_, cutover)) = &self.pending_map {
            if cen.next() == *cutover {
                self.send_reshard_transfers();
            }
        }
        self.maybe_swap_maps();

        // Joiners waiting for a consistent boundary snapshot.
        let due: Vec<NodeId> = self
            .pending_joins
            .iter()
            .filter(|(_, &activation)| activation.prev() == cen)
            .map(|(&joiner, _)| joiner)
            .collect();
        for joiner in due {
            self.pending_joins.remove(&joiner);
            self.send_state_sync_resp(joiner);
        }
        Ok(())
    }

    fn build_own_frames(&mut self, cen: Cen, appended: &[LogEntry]) {
        let self_id = self.cfg.node_id;
        let engines: Vec<EngineTag> = self.cfg.engine_hosts.keys().copied().collect();
        for engine in engines {
            let entries: Vec<LogEntry> = appended
                .iter()
                .filter(|e| e.engine == engine)
                .cloned()
                .collect();
            let first_lsn = entries
                .first()
                .map_or_else(|| self.log.next_lsn(engine), |e| e.lsn);
            self.queue_frame(cen, self_id, engine, first_lsn, entries);
        }
    }

    /// Builds and queues one origin's frames for one epoch on its behalf.
    /// Content comes from the backup store filtered by the merged abort
    /// set, so it is byte-identical to what the origin itself would have
    /// logged and pushed.
    fn cover_origin_epoch(&mut self, cen: Cen, origin: NodeId, merged: &EpochAbortSet) {
        if self.covered_through.get(&origin).copied() >= Some(cen) {
            return;
        }
        // The origin's backed-up admissions of this epoch are the authority
        // on what it would have logged: a re-executed epoch adopts exactly
        // this set, and a finished epoch routed exactly this set.
        let all: Vec<BackupEntry> = self
            .backup_store
            .get(&origin)
            .map(|m| m.values().filter(|b| b.txn.cen == cen).cloned().collect())
            .unwrap_or_default();
        let mut committed: Vec<BackupEntry> = all
            .iter()
            .filter(|b| !merged.contains(b.txn.csn))
            .cloned()
            .collect();
        committed.sort_by_key(|b| b.txn.csn);

        // Decisions for the origin's transactions of this epoch, served to
        // its clients when they poll after reconnecting.
        for b in all {
            let verdict = match merged.reason_of(b.txn.csn) {
                Some(reason) => Verdict::Aborted(reason),
                None => Verdict::Committed,
            };
            let decision = Decision {
                csn: b.txn.csn,
                cen,
                verdict,
            };
            let key = (origin, b.client, b.txn.request.txn_id);
            self.pending.remove(&key);
            self.decided.insert(key, decision);
            self.send(
                Addr::Client(b.client),
                Message::DecisionReply(DecisionReply {
                    txn_id: b.txn.request.txn_id,
                    result: SubmitResult::Decided(decision),
                }),
            );
        }

        let engines: Vec<EngineTag> = self.cfg.engine_hosts.keys().copied().collect();
        for engine in engines {
            let next = self
                .origin_next_lsn
                .entry((origin, engine))
                .or_insert_with(|| {
                    self.peer_stable_tails
                        .get(&origin)
                        .and_then(|t| t.get(&engine))
                        .copied()
                        .unwrap_or(0)
                        + 1
                });
            let first_lsn = *next;
            let mut entries = Vec::new();
            for b in committed.iter().filter(|b| b.txn.request.engine == engine) {
                if b.txn.request.write_set.is_empty() {
                    continue;
                }
                let entry = LogEntry::new(
                    *next,
                    cen,
                    b.txn.csn,
                    engine,
                    b.txn.request.write_set.clone(),
                );
                *next += 1;
                entries.push(entry);
            }
            if !entries.is_empty() {
                self.takeover_entries
                    .entry((origin, engine))
                    .or_default()
                    .extend(entries.iter().cloned());
            }
            self.queue_frame(cen, origin, engine, first_lsn, entries);
        }
        self.covered_through.insert(origin, cen);
        self.bump("takeover.covered_epochs");
    }

    fn queue_frame(
        &mut self,
        cen: Cen,
        origin: NodeId,
        engine: EngineTag,
        first_lsn: Lsn,
        entries: Vec<LogEntry>,
    ) {
        let hosts: Vec<u32> = self
            .cfg
            .engine_hosts
            .get(&engine)
            .cloned()
            .unwrap_or_default();
        if hosts.is_empty() {
            return;
        }
        let frame = PendingFrame {
            origin,
            engine,
            cen,
            first_lsn,
            entries,
            unacked: hosts.iter().copied().collect(),
            last_sent: self.now,
        };
        for host in &hosts {
            self.push_frame_to(&frame, *host);
        }
        self.frames.insert((cen, origin, engine), frame);
    }

    fn push_frame_to(&mut self, frame: &PendingFrame, host: u32) {
        self.send(
            Addr::Storage(host),
            Message::LogPushFrame(LogPushFrame::Push {
                pusher: self.cfg.node_id,
                origin: frame.origin,
                engine: frame.engine,
                cen: frame.cen,
                first_lsn: frame.first_lsn,
                entries: frame.entries.clone(),
            }),
        );
    }

    fn retry_pushes(&mut self) {
        let retry = self.cfg.push_retry_ticks as u64;
        if retry == 0 {
            return;
        }
        let due: Vec<(Cen, NodeId, EngineTag)> = self
            .frames
            .iter()
            .filter(|(_, f)| !f.unacked.is_empty() && self.now.saturating_sub(f.last_sent) >= retry)
            .map(|(&k, _)| k)
            .collect();
        for key in due {
            let mut frame = self.frames.remove(&key).unwrap();
            frame.last_sent = self.now;
            for host in frame.unacked.clone() {
                self.push_frame_to(&frame, host);
            }
            self.bump("push.retries");
            self.frames.insert(key, frame);
        }
    }

    fn handle_push_ack(&mut self, src: Addr, frame: LogPushFrame) {
        let host = match src {
            Addr::Storage(h) => h,
            _ => return,
        };
        if let LogPushFrame::Ack {
            origin,
            engine,
            cen,
            ..
        } = frame
        {
            if let Some(f) = self.frames.get_mut(&(cen, origin, engine)) {
                f.unacked.remove(&host);
            }
            self.advance_stable();
            self.try_release_all();
        }
    }

    fn epoch_frames_acked(&self, cen: Cen) -> bool {
        self.frames
            .range((cen, 0, EngineTag(0))..(cen.next(), 0, EngineTag(0)))
            .all(|(_, f)| f.unacked.is_empty())
    }

    fn advance_stable(&mut self) {
        loop {
            let next = self.stable_cen.next();
            let finalized = self
                .epochs
                .get(&next)
                .map_or(false, |ep| ep.finalized);
            if finalized && self.epoch_frames_acked(next) {
                self.stable_cen = next;
                // Frames below the stable watermark no longer need retry
                // state; storage has acknowledged them everywhere.
                let keys: Vec<(Cen, NodeId, EngineTag)> = self
                    .frames
                    .range(..(next.next(), 0, EngineTag(0)))
                    .map(|(&k, _)| k)
                    .collect();
                for k in keys {
                    self.frames.remove(&k);
                }
            } else {
                break;
            }
        }
        self.gc();
    }

    fn try_release_all(&mut self) {
        let candidates: Vec<Cen> = self
            .epochs
            .iter()
            .filter(|(_, ep)| ep.finalized && !ep.released)
            .map(|(&c, _)| c)
            .collect();
        for cen in candidates {
            let ready = !self.cfg.sync_log_push || self.epoch_frames_acked(cen);
            if !ready {
                continue;
            }
            let mut ep = self.epochs.remove(&cen).unwrap();
            for (client, reply) in ep.reply_queue.drain(..) {
                if let SubmitResult::Decided(decision) = reply.result {
                    let key = (self.cfg.node_id, client, reply.txn_id);
                    self.pending.remove(&key);
                    self.decided.insert(key, decision);
                }
                self.send(Addr::Client(client), Message::DecisionReply(reply));
            }
            ep.released = true;
            self.epochs.insert(cen, ep);
            self.advance_stable();
        }
    }

    fn gc(&mut self) {
        let bound = self
            .peer_stable
            .values()
            .copied()
            .chain(std::iter::once(self.stable_cen))
            .min()
            .unwrap_or(self.stable_cen);
        let drop_epochs: Vec<Cen> = self
            .epochs
            .range(..=bound)
            .filter(|(_, ep)| ep.released)
            .map(|(&c, _)| c)
            .collect();
        for cen in drop_epochs {
            self.epochs.remove(&cen);
        }
        for (&origin, store) in self.backup_store.iter_mut() {
            let stable = self.peer_stable.get(&origin).copied().unwrap_or(Cen(0));
            store.retain(|_, b| b.txn.cen > stable);
        }
    }

    // ---- the pump: drives every epoch through its stages ----

    fn pump(&mut self) {
        self.try_release_all();
        loop {
            let mut progressed = false;
            // Finalized epochs are kept only to absorb stale traffic and
            // to gate GC; they cannot progress, so the pump skips them
            // (releases are triggered at finalize and on push acks).
            let cens: Vec<Cen> = self
                .epochs
                .iter()
                .filter(|(_, ep)| ep.opened && !ep.finalized)
                .map(|(&c, _)| c)
                .collect();
            for cen in cens {
                if self.pump_epoch(cen) {
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }

    fn pump_epoch(&mut self, cen: Cen) -> bool {
        let mut ep = match self.epochs.remove(&cen) {
            Some(ep) => ep,
            None => return false,
        };
        if !ep.opened || ep.finalized {
            let refresh = ep.finalized && !ep.released;
            self.epochs.insert(cen, ep);
            if refresh {
                self.try_release_all();
            }
            return false;
        }
        let mut progressed = false;

        if ep.closed && !ep.routed && self.backup_barrier_met(&ep) {
            self.do_route(cen, &mut ep);
            progressed = true;
        }

        if ep.routed && !ep.finalized {
            let collection_ok =
                self.barrier_met(&ep.participants, &ep.routes_from, ep.relaxed);
            let prior_done = self.finalized_cen >= cen.prev();
            if collection_ok && prior_done {
                if !ep.shards_ready {
                    for shard in self.owned_shards(cen) {
                        ep.shards.entry(shard).or_default();
                    }
                    ep.shards_ready = true;
                    progressed = true;
                }
                let shard_ids: Vec<u32> = self.owned_shards(cen);
                for shard in &shard_ids {
                    let ready = self.shard_snapshot_ready(cen, *shard);
                    let validated = ep.shards.get(shard).map_or(false, |p| p.validated);
                    if ready && !validated {
                        self.validate_shard(cen, &mut ep, *shard);
                        progressed = true;
                    }
                }
                for shard in &shard_ids {
                    let validated = ep.shards.get(shard).map_or(false, |p| p.validated);
                    let resolved = ep.shards.get(shard).map_or(false, |p| p.resolved);
                    if validated && !resolved && self.shard_exchange_met(&ep, cen, *shard) {
                        self.resolve_shard(cen, &mut ep, *shard);
                        progressed = true;
                    }
                }
                let all_resolved = shard_ids
                    .iter()
                    .all(|s| ep.shards.get(s).map_or(false, |p| p.resolved));
                if all_resolved && !ep.contribution_sent {
                    self.send_contribution(cen, &mut ep);
                    progressed = true;
                }
                if ep.contribution_sent && ep.merged.is_none() {
                    let senders: BTreeSet<NodeId> =
                        ep.abort_payloads.keys().copied().collect();
                    if self.barrier_met(&ep.participants, &senders, ep.relaxed) {
                        self.merge_aborts(&mut ep);
                        progressed = true;
                    }
                }
                if ep.merged.is_some() && !ep.finalized {
                    self.finalize(cen, &mut ep).expect("finalize");
                    progressed = true;
                }
            }
        }

        self.epochs.insert(cen, ep);
        if progressed {
            self.try_release_all();
            self.advance_stable();
        }
        progressed
    }

    // ---- backups ----

    fn handle_backup(&mut self, src: Addr, backup: TxnBackup) {
        let peer = match src {
            Addr::Cc(p) => p,
            _ => return,
        };
        match backup {
            TxnBackup::Entries { origin, entries } => {
                self.bump("recv.txn_backup");
                let mut csns = Vec::with_capacity(entries.len());
                let store = self.backup_store.entry(origin).or_default();
                for entry in entries {
                    csns.push(entry.txn.csn);
                    store.insert(entry.txn.csn, entry);
                }
                self.send(
                    Addr::Cc(peer),
                    Message::TxnBackup(TxnBackup::Ack {
                        origin: self.cfg.node_id,
                        csns,
                    }),
                );
            }
            TxnBackup::Ack { origin, csns } => {
                for csn in csns {
                    self.backup_acks.entry(csn).or_default().insert(origin);
                }
            }
        }
    }

    // ---- membership ----

    fn send_beats(&mut self) {
        self.last_beat_tick = self.now;
        let tails: Vec<(EngineTag, Lsn)> = self
            .cfg
            .engine_hosts
            .keys()
            .map(|&e| (e, self.stable_tail(e)))
            .collect();
        let beat = MembershipBeat {
            sender: self.cfg.node_id,
            view: self.view.view,
            stable_cen: self.stable_cen,
            stable_tails: tails,
        };
        for peer in self.cc_peers() {
            self.send(Addr::Cc(peer), Message::MembershipBeat(beat.clone()));
        }
    }

    /// Log tail as of the stable epoch: everything this node has appended
    /// is for epochs at or below stable once stability catches up, so the
    /// current tail is the anchor peers need.
    fn stable_tail(&self, engine: EngineTag) -> Lsn {
        let mut tail = self.log.tail(engine);
        for entry in self.log.entries(engine).iter().rev() {
            if entry.cen > self.stable_cen {
                tail = entry.lsn - 1;
            } else {
                break;
            }
        }
        tail
    }

    fn handle_beat(&mut self, beat: MembershipBeat) {
        self.last_heard.insert(beat.sender, self.now);
        let stable = self.peer_stable.entry(beat.sender).or_insert(Cen(0));
        if beat.stable_cen > *stable {
            *stable = beat.stable_cen;
            self.peer_stable_tails
                .insert(beat.sender, beat.stable_tails.iter().copied().collect());
            self.gc();
        }
        // A node beating while outside the view missed its own removal:
        // tell it the current view so it re-syncs.
        if self.active && !self.view.live.contains(&beat.sender) {
            let claim = LeaderClaim {
                claimant: self.last_claim.1,
                view: self.view.view,
                live: self.view.live.iter().copied().collect(),
                activation_cen: Cen(0),
            };
            self.send(Addr::Cc(beat.sender), Message::LeaderClaim(claim));
        }
    }

    fn detect_failures(&mut self) {
        let timeout = self.cfg.beat_timeout_ticks as u64;
        if timeout == 0 || self.now < timeout {
            return;
        }
        let suspects: BTreeSet<NodeId> = self
            .view
            .live
            .iter()
            .copied()
            .filter(|&p| p != self.cfg.node_id)
            .filter(|&p| self.member_since.get(&p).copied().unwrap_or(Cen(0)) <= self.open_cen)
            .filter(|&p| {
                self.now
                    .saturating_sub(self.last_heard.get(&p).copied().unwrap_or(0))
                    > timeout
            })
            .collect();
        if suspects.is_empty() {
            return;
        }
        let live: Vec<NodeId> = self
            .view
            .live
            .iter()
            .copied()
            .filter(|n| !suspects.contains(n))
            .collect();
        let claim = LeaderClaim {
            claimant: self.cfg.node_id,
            view: self.view.view + 1,
            live,
            activation_cen: Cen(0),
        };
        self.bump("membership.suspected");
        for peer in self.cc_peers() {
            self.send(Addr::Cc(peer), Message::LeaderClaim(claim.clone()));
        }
        self.adopt_claim(claim);
    }

    fn adopt_claim(&mut self, claim: LeaderClaim) {
        let newer = claim.view > self.last_claim.0
            || (claim.view == self.last_claim.0 && claim.claimant < self.last_claim.1);
        if !newer {
            return;
        }
        let prev_live = self.view.live.clone();
        self.last_claim = (claim.view, claim.claimant);
        self.view = MembershipView {
            view: claim.view,
            live: claim.live.iter().copied().collect(),
        };
        for &n in &claim.live {
            if !prev_live.contains(&n) {
                self.last_heard.insert(n, self.now);
                self.member_since.insert(
                    n,
                    if claim.activation_cen.0 > 0 {
                        claim.activation_cen
                    } else {
                        Cen(0)
                    },
                );
                if claim.activation_cen.0 > 0 && n != self.cfg.node_id {
                    self.pending_joins.insert(n, claim.activation_cen);
                }
                // A returning node pushes its own frames again from its
                // activation epoch onward.
                self.covered_through.remove(&n);
            }
        }
        self.halted = self.view.live.len() < majority(self.cfg.nodes.len());
        self.bump("membership.view_changes");

        if !self.view.live.contains(&self.cfg.node_id) {
            if self.active {
                self.demote_and_rejoin();
            }
            return;
        }
        if self.join.is_some() {
            // Recovering and now claimed live: beats start, sync continues.
            self.last_beat_tick = 0;
        }
        let newly_dead: BTreeSet<NodeId> = prev_live
            .iter()
            .copied()
            .filter(|n| !self.view.live.contains(n))
            .collect();
        if self.active && !newly_dead.is_empty() {
            self.start_takeover();
        }
    }

    /// Removed from the view (partition loser or false suspicion): drop
    /// volatile epoch state and re-enter through state sync, like a crash
    /// without losing the log.
    fn demote_and_rejoin(&mut self) {
        self.active = false;
        self.halted = false;
        self.epochs.clear();
        self.maps.clear();
        self.maps_next.clear();
        self.pending_map = None;
        self.transfers_in.clear();
        self.group_stage.clear();
        self.frames.clear();
        self.takeover = None;
        self.join = Some(JoinState {
            resps: BTreeMap::new(),
            next_request_tick: self.now,
        });
        self.bump("membership.demoted");
    }

    // ---- takeover: reports, plan, execution ----

    fn start_takeover(&mut self) {
        let deads: BTreeSet<NodeId> = self
            .cfg
            .nodes
            .iter()
            .copied()
            .filter(|n| !self.view.live.contains(n))
            .collect();
        if deads.is_empty() {
            return;
        }
        let leader = match elect_leader(&self.view.live) {
            Some(l) => l,
            None => return,
        };
        if leader == self.cfg.node_id {
            self.takeover = Some(TakeoverState {
                view: self.view.view,
                deads: deads.clone(),
                expected: self.view.live.clone(),
                received: BTreeMap::new(),
                planned: false,
            });
        }
        for dead in deads {
            let rows = self.build_report_rows(dead);
            if leader == self.cfg.node_id {
                self.accept_report(self.view.view, self.cfg.node_id, dead, rows);
            } else {
                self.send(
                    Addr::Cc(leader),
                    Message::AdminFrame(AdminMsg::EpochReport {
                        view: self.view.view,
                        reporter: self.cfg.node_id,
                        dead,
                        rows,
                    }),
                );
            }
        }
    }

    fn build_report_rows(&self, dead: NodeId) -> Vec<EpochReportRow> {
        let stable = self.peer_stable.get(&dead).copied().unwrap_or(Cen(0));
        let mut rows = Vec::new();
        for (&cen, ep) in &self.epochs {
            if cen <= stable || !ep.opened || !ep.participants.contains(&dead) {
                continue;
            }
            let has_writes = if self.cfg.local_first {
                self.owned_shards(cen).iter().all(|&s| {
                    let in_exch = self.exch(&ep.participants, cen, s).contains(&dead);
                    !in_exch
                        || ep
                            .shards
                            .get(&s)
                            .map_or(false, |p| p.payloads_from.contains(&dead))
                })
            } else {
                true
            };
            let dead_backups = self
                .backup_store
                .get(&dead)
                .map(|m| m.values().filter(|b| b.txn.cen == cen).cloned().collect())
                .unwrap_or_default();
            rows.push(EpochReportRow {
                cen,
                finalized: ep.finalized,
                has_route: ep.routes_from.contains(&dead),
                has_writes,
                has_abort: ep.abort_payloads.contains_key(&dead),
                dead_backups,
            });
        }
        rows
    }

    fn accept_report(
        &mut self,
        view: u64,
        reporter: NodeId,
        dead: NodeId,
        rows: Vec<EpochReportRow>,
    ) {
        // Backups travel with the report so the leader holds the union.
        for row in &rows {
            let store = self.backup_store.entry(dead).or_default();
            for b in &row.dead_backups {
                store.insert(b.txn.csn, b.clone());
            }
        }
        let complete = {
            let state = match &mut self.takeover {
                Some(s) if s.view == view => s,
                _ => return,
            };
            state.received.insert((dead, reporter), rows);
            !state.planned
                && state
                    .deads
                    .iter()
                    .all(|&d| state.expected.iter().all(|&r| state.received.contains_key(&(d, r))))
        };
        if complete {
            self.issue_plan();
        }
    }

    fn issue_plan(&mut self) {
        let state = self.takeover.as_mut().expect("takeover in progress");
        state.planned = true;
        let view = state.view;
        // An epoch can finish as planned only if every reporter either
        // finalized it already or holds the dead nodes' full materials.
        let mut epoch_ok: BTreeMap<Cen, bool> = BTreeMap::new();
        for rows in state.received.values() {
            for row in rows {
                let ok = row.finalized || (row.has_route && row.has_writes && row.has_abort);
                epoch_ok
                    .entry(row.cen)
                    .and_modify(|v| *v &= ok)
                    .or_insert(ok);
            }
        }
        let deads = state.deads.clone();
        let mut actions = Vec::new();
        for (&cen, &ok) in &epoch_ok {
            if ok {
                actions.push(RecoveryAction::Finish { cen });
            } else {
                let mut txns: Vec<BackupEntry> = deads
                    .iter()
                    .flat_map(|d| {
                        self.backup_store
                            .get(d)
                            .map(|m| {
                                m.values()
                                    .filter(|b| b.txn.cen == cen)
                                    .cloned()
                                    .collect::<Vec<_>>()
                            })
                            .unwrap_or_default()
                    })
                    .collect();
                txns.sort_by_key(|b| b.txn.csn);
                actions.push(RecoveryAction::Reexecute { cen, txns });
            }
        }
        let plan = AdminMsg::RecoveryPlan {
            view,
            planner: self.cfg.node_id,
            actions: actions.clone(),
        };
        let peers: Vec<NodeId> = self
            .view
            .live
            .iter()
            .copied()
            .filter(|&n| n != self.cfg.node_id)
            .collect();
        for peer in peers {
            self.send(Addr::Cc(peer), Message::AdminFrame(plan.clone()));
        }
        self.bump("takeover.plans");
        self.apply_plan(view, actions);
        self.rebuild_dead_coverage();
    }

    /// Re-push reconstructed frames for every dead node's epochs between
    /// its stable watermark and my finalized epoch. Storage deduplicates
    /// epochs it already holds; determinism makes re-pushed bytes match.
    fn rebuild_dead_coverage(&mut self) {
        let deads: Vec<NodeId> = self
            .cfg
            .nodes
            .iter()
            .copied()
            .filter(|n| !self.view.live.contains(n))
            .collect();
        for dead in deads {
            let stable = self.peer_stable.get(&dead).copied().unwrap_or(Cen(0));
            let from = stable.next();
            let to = self.finalized_cen;
            let mut cen = from;
            while cen <= to {
                let merged = self.epochs.get(&cen).and_then(|ep| ep.merged.clone());
                if let Some(merged) = merged {
                    self.cover_origin_epoch(cen, dead, &merged);
                }
                cen = cen.next();
            }
        }
    }

    fn apply_plan(&mut self, view: u64, actions: Vec<RecoveryAction>) {
        if view < self.view.view {
            return;
        }
        for action in actions {
            match action {
                RecoveryAction::Finish { cen } => {
                    if let Some(ep) = self.epochs.get_mut(&cen) {
                        if !ep.finalized {
                            ep.relaxed = true;
                        }
                    }
                }
                RecoveryAction::Reexecute { cen, txns } => {
                    self.rebuild_for_reexec(view, cen, txns);
                }
            }
        }
    }

    fn rebuild_for_reexec(&mut self, view: u64, cen: Cen, txns: Vec<BackupEntry>) {
        if self.finalized_cen >= cen {
            return;
        }
        // A lagging node may still have this epoch open (or not yet
        // opened): close forward so re-execution acts on a closed epoch.
        while self.open_cen <= cen {
            self.close_epoch();
        }
        let old = match self.epochs.get(&cen) {
            Some(ep) => ep,
            None => return,
        };
        if old.reexec_view == Some(view) || old.finalized {
            return;
        }
        // Keep the backups; a later takeover may need them.
        for b in &txns {
            self.backup_store
                .entry(b.txn.origin_node)
                .or_default()
                .insert(b.txn.csn, b.clone());
        }
        let old = self.epochs.remove(&cen).unwrap();
        let mut ep = EpochState::skeleton();
        ep.opened = true;
        ep.closed = true;
        ep.backup_waived = true;
        ep.reexec_view = Some(view);
        ep.participants = old
            .participants
            .iter()
            .copied()
            .filter(|p| {
                self.view.live.contains(p)
                    && self.member_since.get(p).copied().unwrap_or(Cen(0)) <= cen
            })
            .collect();
        ep.own = old.own;
        ep.group_decls = old.group_decls;
        let leader = elect_leader(&ep.participants);
        if leader == Some(self.cfg.node_id) {
            // Adopt the dead nodes' transactions: route them, declare their
            // complete groups, abort members of groups whose peers were
            // lost before backup.
            let mut group_members: BTreeMap<u64, (u32, Vec<Csn>)> = BTreeMap::new();
            for b in &txns {
                if let Some(g) = &b.txn.request.cross_model_group {
                    let slot = group_members
                        .entry(g.group_id)
                        .or_insert((g.expected_members, Vec::new()));
                    slot.1.push(b.txn.csn);
                }
                ep.adopted.push(AdmittedTxn {
                    client: b.client,
                    txn: b.txn.clone(),
                });
                self.pending.insert(
                    (b.txn.origin_node, b.client, b.txn.request.txn_id),
                    b.txn.csn,
                );
            }
            for (group_id, (expected, members)) in group_members {
                if members.len() as u32 == expected {
                    ep.group_decls.push(GroupDecl { group_id, members });
                } else {
                    for csn in members {
                        ep.extra_aborts
                            .push((csn, AbortReason::CrossModelPeerAborted));
                    }
                }
            }
        }
        self.bump("takeover.reexecuted_epochs");
        self.epochs.insert(cen, ep);
    }

    // ---- state sync (rejoin) ----

    fn join_tick(&mut self) {
        let due = match &self.join {
            Some(j) => self.now >= j.next_request_tick,
            None => return,
        };
        if self.view.live.contains(&self.cfg.node_id)
            && self.now.saturating_sub(self.last_beat_tick)
                >= self.cfg.beat_every_ticks as u64
        {
            self.send_beats();
        }
        if !due {
            return;
        }
        if let Some(j) = &mut self.join {
            j.next_request_tick = self.now + self.cfg.sync_retry_ticks as u64;
        }
        let shards = self.cfg.shard_map.shards_owned_by(self.cfg.node_id);
        let log_tails: Vec<(EngineTag, Lsn)> = self
            .log
            .engines()
            .map(|e| (e, self.log.tail(e)))
            .collect();
        let req = AdminMsg::StateSyncReq {
            joiner: self.cfg.node_id,
            shards,
            log_tails,
        };
        for peer in self.cc_peers() {
            self.send(Addr::Cc(peer), Message::AdminFrame(req.clone()));
        }
        self.bump("join.requests");
    }

    fn handle_state_sync_req(&mut self, joiner: NodeId) {
        if !self.active {
            return;
        }
        if self.pending_joins.contains_key(&joiner) || self.view.live.contains(&joiner) {
            return;
        }
        let leader = elect_leader(&self.view.live);
        if leader != Some(self.cfg.node_id) {
            return;
        }
        // Claim the joiner into the view; everyone (joiner included) will
        // answer with a snapshot at the activation boundary.
        let activation = Cen(self.open_cen.0 + 2);
        let mut live: Vec<NodeId> = self.view.live.iter().copied().collect();
        live.push(joiner);
        live.sort_unstable();
        let claim = LeaderClaim {
            claimant: self.cfg.node_id,
            view: self.view.view + 1,
            live,
            activation_cen: activation,
        };
        for peer in self.cc_peers() {
            self.send(Addr::Cc(peer), Message::LeaderClaim(claim.clone()));
        }
        self.send(Addr::Cc(joiner), Message::LeaderClaim(claim.clone()));
        self.adopt_claim(claim);
        self.bump("join.claimed");
    }

    fn send_state_sync_resp(&mut self, joiner: NodeId) {
        let owned: Vec<u32> = self.current_map.shards_owned_by(joiner);
        let snapshots: Vec<(u32, GlobalWriteVersionMap)> = owned
            .iter()
            .filter_map(|s| self.maps.get(s).map(|m| (*s, m.clone())))
            .collect();
        let mut time_floor = 0u64;
        for store in self.backup_store.get(&joiner).iter() {
            for b in store.values() {
                time_floor = time_floor.max(b.txn.csn.local_time);
            }
        }
        for map in self.maps.values() {
            for (_, entry) in map.iter() {
                if entry.committed_csn.node_id == joiner {
                    time_floor = time_floor.max(entry.committed_csn.local_time);
                }
            }
        }
        for ((origin, _, _), d) in &self.decided {
            if *origin == joiner && d.csn.node_id == joiner {
                time_floor = time_floor.max(d.csn.local_time);
            }
        }
        let log_catchup: Vec<LogEntry> = self
            .takeover_entries
            .range((joiner, EngineTag(0))..=(joiner, EngineTag(u16::MAX)))
            .flat_map(|(_, v)| v.iter().cloned())
            .collect();
        let decisions: Vec<(u32, u64, Decision)> = self
            .decided
            .range((joiner, 0, 0)..=(joiner, u32::MAX, u64::MAX))
            .map(|(&(_, client, txn_id), &d)| (client, txn_id, d))
            .collect();
        let peers: Vec<(NodeId, Cen, Vec<(EngineTag, Lsn)>)> = self
            .peer_stable
            .iter()
            .map(|(&n, &s)| {
                let tails = self
                    .peer_stable_tails
                    .get(&n)
                    .map(|t| t.iter().map(|(&e, &l)| (e, l)).collect())
                    .unwrap_or_default();
                (n, s, tails)
            })
            .collect();
        let resp = AdminMsg::StateSyncResp {
            view: self.view.view,
            live: self.view.live.iter().copied().collect(),
            open_cen: self.open_cen,
            finalized_cen: self.finalized_cen,
            time_floor,
            map: self.current_map.clone(),
            snapshots,
            log_catchup,
            decisions,
            peers,
        };
        self.send(Addr::Cc(joiner), Message::AdminFrame(resp));
        self.bump("join.responses");
    }

    fn handle_state_sync_resp(&mut self, src: Addr, resp: AdminMsg) {
        let responder = match src {
            Addr::Cc(n) => n,
            _ => return,
        };
        if self.join.is_none() {
            return;
        }
        self.join
            .as_mut()
            .unwrap()
            .resps
            .insert(responder, resp);
        self.try_complete_join();
    }

    fn try_complete_join(&mut self) {
        let activation = match self.member_since.get(&self.cfg.node_id) {
            Some(&a) if a.0 > 0 => a,
            _ => return,
        };
        let boundary = activation.prev();
        let join = match &self.join {
            Some(j) => j,
            None => return,
        };
        // Collect consistent snapshots for every shard this node owns
        // under the map the responders agree on.
        let mut map: Option<ShardMap> = None;
        let mut snaps: BTreeMap<u32, GlobalWriteVersionMap> = BTreeMap::new();
        let mut floor = self.log.max_local_time();
        let mut catchup: Vec<LogEntry> = Vec::new();
        let mut decisions: Vec<(u32, u64, Decision)> = Vec::new();
        let mut peer_info: Vec<(NodeId, Cen, Vec<(EngineTag, Lsn)>)> = Vec::new();
        for resp in join.resps.values() {
            if let AdminMsg::StateSyncResp {
                finalized_cen,
                time_floor,
                map: resp_map,
                snapshots,
                log_catchup,
                decisions: resp_decisions,
                peers,
                ..
            } = resp
            {
                if *finalized_cen != boundary {
                    continue;
                }
                map.get_or_insert_with(|| resp_map.clone());
                floor = floor.max(*time_floor);
                for (shard, snap) in snapshots {
                    if snap.snapshot_epoch() == boundary {
                        snaps.entry(*shard).or_insert_with(|| snap.clone());
                    }
                }
                catchup.extend(log_catchup.iter().cloned());
                decisions.extend(resp_decisions.iter().cloned());
                peer_info.extend(peers.iter().cloned());
            }
        }
        let map = match map {
            Some(m) => m,
            None => return,
        };
        let owned = map.shards_owned_by(self.cfg.node_id);
        if !owned.iter().all(|s| snaps.contains_key(s)) {
            return;
        }

        // Install: this node becomes a participant from `activation` on.
        self.current_map = map;
        self.maps = snaps;
        self.finalized_cen = boundary;
        self.stable_cen = boundary;
        self.open_cen = activation;
        catchup.sort_by_key(|e| (e.engine, e.lsn));
        let mut by_engine: BTreeMap<EngineTag, Vec<LogEntry>> = BTreeMap::new();
        for e in catchup {
            by_engine.entry(e.engine).or_default().push(e);
        }
        for (engine, entries) in by_engine {
            let mut uniq = entries;
            uniq.dedup_by_key(|e| e.lsn);
            self.log.adopt(engine, &uniq).expect("log catchup applies");
        }
        for (client, txn_id, d) in decisions {
            self.decided
                .insert((self.cfg.node_id, client, txn_id), d);
        }
        for (node, stable, tails) in peer_info {
            let entry = self.peer_stable.entry(node).or_insert(Cen(0));
            if stable > *entry {
                *entry = stable;
                self.peer_stable_tails
                    .insert(node, tails.into_iter().collect());
            }
        }
        self.tagger = crate::model::TxnTagger::restore(self.cfg.node_id, floor, activation);
        self.join = None;
        self.active = true;
        self.halted = self.view.live.len() < majority(self.cfg.nodes.len());
        self.open_epoch(activation);
        self.bump("join.completed");
    }

    // ---- re-sharding ----

    fn handle_trigger_reshard(&mut self, src: Addr, req_id: u64, new_map: ShardMap, cutover: Cen) {
        let earliest = Cen(self.open_cen.0 + self.cfg.reshard_min_lead);
        let accepted = self.active
            && self.pending_map.is_none()
            && new_map.is_well_formed()
            && new_map.version > self.current_map.version
            && cutover >= earliest;
        if let Addr::Client(c) = src {
            self.send(
                Addr::Client(c),
                Message::AdminFrame(AdminMsg::TriggerReshardResp {
                    req_id,
                    accepted,
                    current_cen: self.open_cen,
                }),
            );
        }
        if !accepted {
            self.bump("reshard.rejected");
            return;
        }
        self.pending_map = Some((new_map.clone(), cutover));
        self.bump("reshard.accepted");
        // Relay so every node installs the same pending map; peers accept
        // idempotently.
        if matches!(src, Addr::Client(_)) {
            for peer in self.cc_peers() {
                self.send(
                    Addr::Cc(peer),
                    Message::AdminFrame(AdminMsg::TriggerReshard {
                        req_id,
                        new_map: new_map.clone(),
                        cutover,
                    }),
                );
            }
        }
    }

    /// After folding cutover-1: each old shard's designated sender (its
    /// lowest live replica) splits the shard's map by the new assignment
    /// and sends one transfer per new shard to each new owner.
    fn send_reshard_transfers(&mut self) {
        let (new_map, _) = self.pending_map.clone().expect("pending reshard");
        let old_map = self.current_map.clone();
        for old_shard in old_map.shards_owned_by(self.cfg.node_id) {
            let designated = old_map
                .replicas(old_shard)
                .iter()
                .copied()
                .filter(|n| self.view.live.contains(n))
                .min();
            if designated != Some(self.cfg.node_id) {
                continue;
            }
            let source = self.maps.get(&old_shard).expect("owned old shard");
            let mut slices: BTreeMap<u32, Vec<(Key, VersionMapEntry)>> = BTreeMap::new();
            for (key, entry) in source.iter() {
                slices
                    .entry(new_map.shard_of(key))
                    .or_default()
                    .push((key.clone(), entry.clone()));
            }
            for new_shard in 0..new_map.num_shards {
                let entries = slices.remove(&new_shard).unwrap_or_default();
                let msg = AdminMsg::SnapshotTransfer {
                    map_version: new_map.version,
                    old_shard,
                    new_shard,
                    sender: self.cfg.node_id,
                    entries: entries.clone(),
                };
                for &owner in new_map.replicas(new_shard) {
                    if owner == self.cfg.node_id {
                        self.accept_snapshot_transfer(
                            new_map.version,
                            old_shard,
                            new_shard,
                            entries.clone(),
                        );
                    } else {
                        self.send(Addr::Cc(owner), Message::AdminFrame(msg.clone()));
                    }
                }
            }
        }
        self.bump("reshard.transferred");
    }

    fn accept_snapshot_transfer(
        &mut self,
        map_version: u32,
        old_shard: u32,
        new_shard: u32,
        entries: Vec<(Key, VersionMapEntry)>,
    ) {
        let expected_version = match &self.pending_map {
            Some((m, _)) => m.version,
            None => return,
        };
        if map_version != expected_version {
            return;
        }
        self.transfers_in
            .entry(new_shard)
            .or_default()
            .insert(old_shard, entries);
        self.try_install_new_shards();
    }

    fn try_install_new_shards(&mut self) {
        let (new_map, cutover) = match &self.pending_map {
            Some(p) => p.clone(),
            None => return,
        };
        let boundary = cutover.prev();
        let old_shards = self.current_map.num_shards;
        for new_shard in new_map.shards_owned_by(self.cfg.node_id) {
            if self.maps_next.contains_key(&new_shard) {
                continue;
            }
            let received = match self.transfers_in.get(&new_shard) {
                Some(r) => r,
                None => continue,
            };
            if received.len() != old_shards as usize {
                continue;
            }
            let mut map = GlobalWriteVersionMap::new(boundary);
            let mut total = 0usize;
            for entries in received.values() {
                for (key, entry) in entries {
                    total += 1;
                    map.install(key.clone(), entry.clone());
                }
            }
            // Slices from distinct old shards are disjoint by construction.
            debug_assert_eq!(map.len(), total);
            self.maps_next.insert(new_shard, map);
            self.transfers_in.remove(&new_shard);
        }
        self.maybe_swap_maps();
    }

    /// Once every epoch under the old map is finalized and the new shards
    /// are installed, the new map becomes current. Checked from both ends
    /// of the race: boundary finalize and transfer arrival.
    fn maybe_swap_maps(&mut self) {
        let (new_map, cutover) = match &self.pending_map {
            Some(p) => p.clone(),
            None => return,
        };
        if self.finalized_cen.next() < cutover {
            return;
        }
        let owned: Vec<u32> = new_map.shards_owned_by(self.cfg.node_id);
        if !owned.iter().all(|s| self.maps_next.contains_key(s)) {
            return;
        }
        self.current_map = new_map;
        self.maps = std::mem::take(&mut self.maps_next);
        self.pending_map = None;
        self.transfers_in.clear();
        self.bump("reshard.cutover");
    }

    // ---- log pulls (storage recovery) ----

    fn handle_log_pull(&mut self, src: Addr, req: LogPullRequest) {
        let limit = (req.limit as usize).clamp(1, 4096);
        let result = if req.origin == self.cfg.node_id {
            match self.log.pull(req.engine, req.after_lsn, limit) {
                Ok(entries) => PullResult::Entries {
                    entries,
                    tail: self.log.tail(req.engine),
                },
                Err(LogError::LsnAhead { tail, .. }) => PullResult::LsnAhead { tail },
                Err(_) => PullResult::Entries {
                    entries: Vec::new(),
                    tail: self.log.tail(req.engine),
                },
            }
        } else {
            let held = self
                .takeover_entries
                .get(&(req.origin, req.engine))
                .map(|v| v.as_slice())
                .unwrap_or(&[]);
            let entries: Vec<LogEntry> = held
                .iter()
                .filter(|e| e.lsn > req.after_lsn)
                .take(limit)
                .cloned()
                .collect();
            let tail = held.last().map_or(0, |e| e.lsn);
            PullResult::Entries { entries, tail }
        };
        self.send(
            src,
            Message::LogPullReply(LogPullReply {
                origin: req.origin,
                engine: req.engine,
                after_lsn: req.after_lsn,
                result,
            }),
        );
    }

    // ---- admin ----

    fn handle_admin(&mut self, src: Addr, msg: AdminMsg) {
        match msg {
            AdminMsg::Tick { close_cen } => {
                if self.active && !self.halted && close_cen == self.open_cen {
                    self.close_epoch();
                }
            }
            AdminMsg::EpochStatus { req_id } => {
                let resp = AdminMsg::EpochStatusResp {
                    req_id,
                    node: self.cfg.node_id,
                    view: self.view.view,
                    open_cen: self.open_cen,
                    finalized_cen: self.finalized_cen,
                };
                self.send(src, Message::AdminFrame(resp));
            }
            AdminMsg::GetMetrics { req_id } => {
                let counters: Vec<(String, u64)> = self
                    .counters
                    .iter()
                    .map(|(&k, &v)| (k.to_string(), v))
                    .collect();
                self.send(
                    src,
                    Message::AdminFrame(AdminMsg::GetMetricsResp { req_id, counters }),
                );
            }
            AdminMsg::DecisionStatus {
                req_id,
                origin,
                client,
                txn_id,
            } => {
                let key = (origin, client, txn_id);
                let status = if let Some(d) = self.decided.get(&key) {
                    TxnStatus::Decided(*d)
                } else if self.pending.contains_key(&key) {
                    TxnStatus::Pending
                } else {
                    TxnStatus::Unknown
                };
                self.send(
                    src,
                    Message::AdminFrame(AdminMsg::DecisionStatusResp { req_id, status }),
                );
            }
            AdminMsg::TriggerReshard {
                req_id,
                new_map,
                cutover,
            } => self.handle_trigger_reshard(src, req_id, new_map, cutover),
            AdminMsg::SnapshotTransfer {
                map_version,
                old_shard,
                new_shard,
                entries,
                ..
            } => self.accept_snapshot_transfer(map_version, old_shard, new_shard, entries),
            AdminMsg::StateSyncReq { joiner, .. } => self.handle_state_sync_req(joiner),
            resp @ AdminMsg::StateSyncResp { .. } => self.handle_state_sync_resp(src, resp),
            AdminMsg::EpochReport {
                view,
                reporter,
                dead,
                rows,
            } => self.accept_report(view, reporter, dead, rows),
            AdminMsg::RecoveryPlan { view, actions, .. } => self.apply_plan(view, actions),
            AdminMsg::Hello { .. } => {}
            _ => self.bump("recv.unexpected"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GroupRef, ReadRecord, ReadVersion};
    use crate::transport::SubmitTxn;
    use std::collections::VecDeque;

    fn key(s: &str) -> Key {
        s.as_bytes().to_vec()
    }

    fn put(k: &str, v: &str) -> WriteRecord {
        WriteRecord::update(key(k), v.as_bytes().to_vec())
    }

    fn ins(k: &str, v: &str) -> WriteRecord {
        WriteRecord::insert(key(k), v.as_bytes().to_vec())
    }

    fn req(txn_id: u64, reads: Vec<ReadRecord>, writes: Vec<WriteRecord>) -> TxnRequest {
        TxnRequest {
            txn_id,
            engine: EngineTag(1),
            begin_epoch: Cen(0),
            read_set: reads,
            write_set: writes,
            cross_model_group: None,
        }
    }

    struct Bus {
        nodes: BTreeMap<NodeId, CcNode>,
        queue: VecDeque<Envelope>,
        to_clients: Vec<Envelope>,
        to_storage: Vec<Envelope>,
        auto_ack_storage: bool,
    }

    impl Bus {
        fn new(nodes: Vec<CcNode>) -> Self {
            Self {
                nodes: nodes.into_iter().map(|n| (n.node_id(), n)).collect(),
                queue: VecDeque::new(),
                to_clients: Vec::new(),
                to_storage: Vec::new(),
                auto_ack_storage: true,
            }
        }

        fn push_all(&mut self, envs: Vec<Envelope>) {
            self.queue.extend(envs);
        }

        fn deliver_all(&mut self) {
            while let Some(env) = self.queue.pop_front() {
                match env.dst {
                    Addr::Cc(id) => {
                        if let Some(node) = self.nodes.get_mut(&id) {
                            let out = node.on_message(env);
                            self.queue.extend(out);
                        }
                    }
                    Addr::Client(_) => self.to_clients.push(env),
                    Addr::Storage(host) => {
                        if self.auto_ack_storage {
                            if let Message::LogPushFrame(LogPushFrame::Push {
                                pusher,
                                origin,
                                engine,
                                cen,
                                first_lsn,
                                ref entries,
                            }) = env.msg
                            {
                                let upto = entries.last().map_or(first_lsn.saturating_sub(1), |e| e.lsn);
                                let ack = Envelope {
                                    src: Addr::Storage(host),
                                    dst: Addr::Cc(pusher),
                                    msg: Message::LogPushFrame(LogPushFrame::Ack {
                                        origin,
                                        engine,
                                        cen,
                                        upto_lsn: upto,
                                    }),
                                };
                                self.queue.push_back(ack);
                            }
                        }
                        self.to_storage.push(env);
                    }
                }
            }
        }

        fn tick(&mut self) {
            let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
            for id in ids {
                let out = self.nodes.get_mut(&id).unwrap().on_tick();
                self.queue.extend(out);
            }
            self.deliver_all();
        }

        fn submit(&mut self, node: NodeId, client: u32, request: TxnRequest) {
            let env = Envelope {
                src: Addr::Client(client),
                dst: Addr::Cc(node),
                msg: Message::SubmitTxn(SubmitTxn { request }),
            };
            let out = self.nodes.get_mut(&node).unwrap().on_message(env);
            self.queue.extend(out);
            self.deliver_all();
        }

        fn close_all(&mut self) {
            let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
            for id in ids {
                let cen = self.nodes[&id].open_cen();
                let env = Envelope {
                    src: Addr::Client(0),
                    dst: Addr::Cc(id),
                    msg: Message::AdminFrame(AdminMsg::Tick { close_cen: cen }),
                };
                let out = self.nodes.get_mut(&id).unwrap().on_message(env);
                self.queue.extend(out);
            }
            self.deliver_all();
            // A few ticks let backup acks and barriers settle.
            for _ in 0..4 {
                self.tick();
            }
        }

        fn decisions(&mut self) -> BTreeMap<u64, SubmitResult> {
            let mut out = BTreeMap::new();
            for env in self.to_clients.drain(..) {
                if let Message::DecisionReply(r) = env.msg {
                    out.insert(r.txn_id, r.result);
                }
            }
            out
        }
    }

    fn cluster(n: usize, shards: u32, replication: usize, local_first: bool) -> Bus {
        let nodes: Vec<NodeId> = (1..=n as u32).collect();
        let map = ShardMap::uniform(1, shards, &nodes, replication);
        let mut built = Vec::new();
        for &id in &nodes {
            let mut cfg = CcConfig::single(id, map.clone());
            cfg.nodes = nodes.clone();
            cfg.local_first = local_first;
            cfg.engine_hosts = BTreeMap::from([(EngineTag(1), vec![1])]);
            built.push(CcNode::new(cfg, &[], LogStore::in_memory(id)).unwrap());
        }
        Bus::new(built)
    }

    fn expect_committed(result: &SubmitResult) -> Decision {
        match result {
            SubmitResult::Decided(d) if d.verdict == Verdict::Committed => *d,
            other => panic!("expected commit, got {other:?}"),
        }
    }

    fn expect_aborted(result: &SubmitResult, reason: AbortReason) {
        match result {
            SubmitResult::Decided(d) => assert_eq!(d.verdict, Verdict::Aborted(reason)),
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn fnv1a_matches_reference_vectors() {
        assert_eq!(stable_hash(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(stable_hash(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(stable_hash(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn uniform_map_covers_every_shard_with_sorted_replicas() {
        let map = ShardMap::uniform(1, 8, &[1, 2, 3], 2);
        assert!(map.is_well_formed());
        for s in 0..8 {
            assert_eq!(map.replicas(s).len(), 2);
        }
        let owned: usize = [1, 2, 3]
            .iter()
            .map(|&n| map.shards_owned_by(n).len())
            .sum();
        assert_eq!(owned, 16);
    }

    #[test]
    fn subtxn_split_groups_records_by_shard() {
        let map = ShardMap::uniform(1, 4, &[1], 1);
        let mut tagger = crate::model::TxnTagger::new(1);
        let writes = vec![put("alpha", "1"), put("beta", "2"), put("gamma", "3")];
        let reads = vec![ReadRecord::new(key("delta"), ReadVersion::Initial)];
        let txn = tagger.tag(req(1, reads.clone(), writes.clone()));
        let subs = split_subtxns(&map, &txn);
        let total_writes: usize = subs.iter().map(|s| s.write_set.len()).sum();
        let total_reads: usize = subs.iter().map(|s| s.read_set.len()).sum();
        assert_eq!(total_writes, 3);
        assert_eq!(total_reads, 1);
        for sub in &subs {
            assert_eq!(sub.csn, txn.csn);
            for w in &sub.write_set {
                assert_eq!(map.shard_of(&w.key), sub.shard);
            }
            for r in &sub.read_set {
                assert_eq!(map.shard_of(&r.key), sub.shard);
            }
        }
    }

    #[test]
    fn single_node_epoch_commits_and_folds() {
        let mut bus = cluster(1, 2, 1, true);
        bus.submit(1, 7, req(1, vec![], vec![ins("a", "1")]));
        bus.submit(1, 7, req(2, vec![], vec![ins("b", "2")]));
        bus.close_all();
        let decisions = bus.decisions();
        let d1 = expect_committed(&decisions[&1]);
        let d2 = expect_committed(&decisions[&2]);
        assert_eq!(d1.cen, Cen(2));
        assert!(crate::model::csn_precedes(d1.csn, d2.csn));
        let node = &bus.nodes[&1];
        assert_eq!(node.finalized_cen(), Cen(2));
        let logged = node.log().entries(EngineTag(1));
        assert_eq!(logged.len(), 2);
        assert_eq!(logged[0].lsn, 1);
        assert_eq!(logged[1].lsn, 2);
    }

    #[test]
    fn intra_epoch_conflict_keeps_smallest_csn() {
        let mut bus = cluster(1, 2, 1, true);
        bus.submit(1, 7, req(1, vec![], vec![ins("k", "first")]));
        bus.submit(1, 7, req(2, vec![], vec![ins("k", "second")]));
        bus.close_all();
        let decisions = bus.decisions();
        expect_committed(&decisions[&1]);
        expect_aborted(&decisions[&2], AbortReason::LostCompare);
    }

    #[test]
    fn read_validation_passes_current_and_rejects_stale() {
        let mut bus = cluster(1, 2, 1, true);
        bus.submit(1, 7, req(1, vec![], vec![ins("x", "v1")]));
        bus.close_all();
        let d1 = expect_committed(&bus.decisions()[&1]);

        // Reader that saw the committed version: passes. Reader that saw
        // Initial: stale, aborts.
        bus.submit(
            1,
            7,
            req(
                2,
                vec![ReadRecord::new(key("x"), ReadVersion::Committed(d1.csn))],
                vec![ins("y", "v2")],
            ),
        );
        bus.submit(
            1,
            7,
            req(
                3,
                vec![ReadRecord::new(key("x"), ReadVersion::Initial)],
                vec![ins("z", "v3")],
            ),
        );
        bus.close_all();
        let decisions = bus.decisions();
        expect_committed(&decisions[&2]);
        expect_aborted(&decisions[&3], AbortReason::ReadValidation);
    }

    #[test]
    fn update_of_missing_row_aborts() {
        let mut bus = cluster(1, 2, 1, true);
        bus.submit(1, 7, req(1, vec![], vec![put("absent", "v")]));
        bus.close_all();
        expect_aborted(&bus.decisions()[&1], AbortReason::RowMissing);
    }

    #[test]
    fn insert_over_live_row_aborts() {
        let mut bus = cluster(1, 2, 1, true);
        bus.submit(1, 7, req(1, vec![], vec![ins("k", "v")]));
        bus.close_all();
        expect_committed(&bus.decisions()[&1]);
        bus.submit(1, 7, req(2, vec![], vec![ins("k", "again")]));
        bus.close_all();
        expect_aborted(&bus.decisions()[&2], AbortReason::WriteExists);
    }

    fn run_conflict_pair(local_first: bool) -> (BTreeMap<u64, SubmitResult>, Vec<Option<u32>>) {
        let mut bus = cluster(3, 4, 2, local_first);
        // Cross-node conflict in one epoch: node 1 and node 3 both insert
        // the same key; the smaller Csn (earlier admission) must win on
        // every replica.
        bus.submit(1, 10, req(1, vec![], vec![ins("contended", "from1")]));
        bus.submit(3, 30, req(2, vec![], vec![ins("contended", "from3")]));
        bus.submit(2, 20, req(3, vec![], vec![ins("quiet", "from2")]));
        bus.close_all();
        for _ in 0..6 {
            bus.tick();
        }
        let decisions = bus.decisions();
        let shard = bus.nodes[&1].shard_map().shard_of(&key("contended"));
        let digests: Vec<Option<u32>> = [1u32, 2, 3]
            .iter()
            .map(|id| bus.nodes[id].shard_digest(shard))
            .collect();
        (decisions, digests)
    }

    #[test]
    fn cross_node_conflict_converges_on_all_replicas() {
        for local_first in [true, false] {
            let (decisions, digests) = run_conflict_pair(local_first);
            expect_committed(&decisions[&1]);
            expect_aborted(&decisions[&2], AbortReason::LostCompare);
            expect_committed(&decisions[&3]);
            let present: Vec<u32> = digests.into_iter().flatten().collect();
            assert!(present.len() >= 2, "shard must have two replicas");
            assert!(
                present.windows(2).all(|w| w[0] == w[1]),
                "replica snapshots diverged (local_first={local_first})"
            );
        }
    }

    #[test]
    fn local_first_and_full_exchange_agree_on_outcomes() {
        let (d_lf, _) = run_conflict_pair(true);
        let (d_fe, _) = run_conflict_pair(false);
        assert_eq!(d_lf, d_fe);
    }

    #[test]
    fn group_members_commit_together() {
        let mut bus = cluster(1, 4, 1, true);
        let mut r1 = req(1, vec![], vec![ins("g-a", "1")]);
        r1.cross_model_group = Some(GroupRef {
            group_id: 5,
            expected_members: 2,
        });
        let mut r2 = req(2, vec![], vec![ins("g-b", "2")]);
        r2.cross_model_group = Some(GroupRef {
            group_id: 5,
            expected_members: 2,
        });
        bus.submit(1, 7, r1);
        bus.submit(1, 7, r2);
        bus.close_all();
        let decisions = bus.decisions();
        expect_committed(&decisions[&1]);
        expect_committed(&decisions[&2]);
    }

    #[test]
    fn group_member_abort_drags_peers_down() {
        let mut bus = cluster(1, 4, 1, true);
        // Solo txn takes the key first (smaller csn wins), group member
        // loses the compare, so its group peer aborts too.
        bus.submit(1, 7, req(1, vec![], vec![ins("hot", "solo")]));
        let mut r2 = req(2, vec![], vec![ins("hot", "grouped")]);
        r2.cross_model_group = Some(GroupRef {
            group_id: 9,
            expected_members: 2,
        });
        let mut r3 = req(3, vec![], vec![ins("cold", "grouped")]);
        r3.cross_model_group = Some(GroupRef {
            group_id: 9,
            expected_members: 2,
        });
        bus.submit(1, 7, r2);
        bus.submit(1, 7, r3);
        bus.close_all();
        let decisions = bus.decisions();
        expect_committed(&decisions[&1]);
        expect_aborted(&decisions[&2], AbortReason::LostCompare);
        expect_aborted(&decisions[&3], AbortReason::CrossModelPeerAborted);
        // The dragged-down member's write must not be visible.
        let node = &bus.nodes[&1];
        let shard = node.shard_map().shard_of(&key("cold"));
        let snap = node.owned_snapshot(shard).unwrap();
        assert!(snap.get(&key("cold")).is_none());
    }

    #[test]
    fn incomplete_group_expires_after_horizon() {
        let mut bus = cluster(1, 4, 1, true);
        let mut r1 = req(1, vec![], vec![ins("alone", "1")]);
        r1.cross_model_group = Some(GroupRef {
            group_id: 77,
            expected_members: 2,
        });
        bus.submit(1, 7, r1);
        bus.close_all();
        assert!(bus.decisions().is_empty());
        bus.close_all();
        let decisions = bus.decisions();
        expect_aborted(&decisions[&1], AbortReason::CrossModelPeerAborted);
    }

    #[test]
    fn malformed_and_overloaded_submissions_bounce() {
        let mut bus = cluster(1, 2, 1, true);
        bus.submit(1, 7, req(1, vec![], vec![put("k", "a"), put("k", "b")]));
        match bus.decisions()[&1] {
            SubmitResult::Rejected(SubmitReject::MalformedRequest) => {}
            other => panic!("expected malformed, got {other:?}"),
        }
        {
            let node = bus.nodes.get_mut(&1).unwrap();
            node.cfg.max_epoch_txns = 1;
        }
        bus.submit(1, 7, req(2, vec![], vec![ins("a", "1")]));
        bus.submit(1, 7, req(3, vec![], vec![ins("b", "2")]));
        let decisions = bus.decisions();
        match decisions[&3] {
            SubmitResult::Rejected(SubmitReject::Overloaded) => {}
            other => panic!("expected overloaded, got {other:?}"),
        }
    }

    #[test]
    fn reshard_moves_keys_and_preserves_entries() {
        let mut bus = cluster(3, 2, 2, true);
        for i in 0..8u64 {
            bus.submit(1, 7, req(i, vec![], vec![ins(&format!("key-{i}"), "v")]));
        }
        bus.close_all();
        assert_eq!(bus.decisions().len(), 8);

        let nodes: Vec<NodeId> = vec![1, 2, 3];
        let new_map = ShardMap::uniform(2, 4, &nodes, 2);
        let cutover = Cen(bus.nodes[&1].open_cen().0 + 2);
        let env = Envelope {
            src: Addr::Client(99),
            dst: Addr::Cc(1),
            msg: Message::AdminFrame(AdminMsg::TriggerReshard {
                req_id: 1,
                new_map: new_map.clone(),
                cutover,
            }),
        };
        let out = bus.nodes.get_mut(&1).unwrap().on_message(env);
        bus.push_all(out);
        bus.deliver_all();

        // Run epochs through the cutover.
        for _ in 0..3 {
            bus.close_all();
        }
        for (_, node) in bus.nodes.iter() {
            assert_eq!(node.shard_map().version, 2, "cutover must land");
        }
        let total: usize = (0..4)
            .map(|s| {
                let owner = new_map.replicas(s)[0];
                bus.nodes[&owner].owned_snapshot(s).map_or(0, |m| m.len())
            })
            .sum();
        assert_eq!(total, 8, "every key must survive the move");

        // Keys are writable under the new map.
        bus.submit(2, 7, req(100, vec![], vec![put("key-3", "v2")]));
        bus.close_all();
        expect_committed(&bus.decisions()[&100]);
    }

    #[test]
    fn same_inputs_produce_identical_runs() {
        let run = || {
            let mut bus = cluster(3, 4, 2, true);
            for i in 0..12u64 {
                let node = 1 + (i % 3) as u32;
                bus.submit(node, 7, req(i, vec![], vec![ins(&format!("k{}", i % 5), "v")]));
            }
            bus.close_all();
            for _ in 0..6 {
                bus.tick();
            }
            let decisions = bus.decisions();
            let digests: Vec<Option<u32>> = (0..4)
                .flat_map(|s| {
                    [1u32, 2, 3]
                        .iter()
                        .map(|id| bus.nodes[id].shard_digest(s))
                        .collect::<Vec<_>>()
                })
                .collect();
            (decisions, digests)
        };
        let (d1, g1) = run();
        let (d2, g2) = run();
        assert_eq!(d1, d2);
        assert_eq!(g1, g2);
    }
}
