//! Deterministic simulation harness: a whole cluster in one process.
//!
//! Every node (CC, storage, proxy) is a plain state machine driven by
//! `on_message`/`on_tick`; the harness owns the clock and the network.
//! Messages take exactly one tick per hop and deliver in send order, so a
//! scenario is a pure function of its seed: same seed, same history, same
//! report, byte for byte. Faults (crashes, restarts, partitions) and a
//! mid-run reshard are scripted by tick number.
//!
//! The harness records everything an auditor needs: every finished
//! transaction with the values its client observed, the tick each decision
//! left its CC node, and the tick each committed write became visible on
//! each storage host. [`si_oracle`] replays that history against a
//! sequential fold and reports violations instead of panicking, so tests
//! choose what to assert.

use crate::conflict::VersionMapEntry;
use crate::coordinator::{CcConfig, CcNode, ShardMap};
use crate::durability::{LogStore, SyncPolicy};
use crate::model::{
    Cen, Csn, EngineTag, GroupRef, Key, NodeId, OpType, ReadVersion, Value, Verdict,
};
use crate::proxy::{FinishedTxn, Op, Outcome, ProxyConfig, ProxyEvent, ProxyNode};
use crate::storage::{StorageConfig, StorageNode, StoredValue};
use crate::transport::{Addr, AdminMsg, Envelope, Message, SubmitResult};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

// ---- scenario description ----

/// Key-value workload shape, YCSB style: fixed-size ops over a preloaded
/// row space, reads and updates only. Row creation and deletion are
/// exercised by dedicated scenarios, not the bulk generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Preloaded rows per engine.
    pub rows: u64,
    pub ops_per_txn: u32,
    /// Probability an op is a read; the rest are updates.
    pub read_fraction: f64,
    /// Zipfian skew over the row space; None means uniform.
    pub zipf_theta: Option<f64>,
    pub txns_per_client: u32,
    pub clients: u32,
    /// Fraction of script slots that become cross-engine group pairs.
    /// Only meaningful with two engines; paired clients run in lockstep.
    pub group_fraction: f64,
}

impl WorkloadSpec {
    /// Update-heavy mix: half reads, half writes.
    pub fn update_heavy(rows: u64, txns_per_client: u32, clients: u32) -> Self {
        Self {
            rows,
            ops_per_txn: 4,
            read_fraction: 0.5,
            zipf_theta: None,
            txns_per_client,
            clients,
            group_fraction: 0.0,
        }
    }

    /// Read-mostly mix: 95% reads.
    pub fn read_mostly(rows: u64, txns_per_client: u32, clients: u32) -> Self {
        Self {
            read_fraction: 0.95,
            ..Self::update_heavy(rows, txns_per_client, clients)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultAction {
    CrashCc(NodeId),
    RecoverCc(NodeId),
    CrashStorage(u32),
    RecoverStorage(u32),
    /// Symmetric CC-to-CC link cut.
    PartitionCc(NodeId, NodeId),
    /// Clears every partition.
    Heal,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FaultEvent {
    pub tick: u64,
    pub action: FaultAction,
}

/// Mid-run shard count change, triggered from outside like an operator
/// would. The cutover epoch is picked relative to the target's open epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReshardPlan {
    pub trigger_tick: u64,
    pub new_shards: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub cc_count: u32,
    pub engines: u16,
    pub storage_per_engine: u32,
    pub shards: u32,
    pub replication: u32,
    /// Harness closes epochs on every CC node each this many ticks.
    pub epoch_ticks: u32,
    pub local_first: bool,
    pub sync_log_push: bool,
    /// Storage applier throttle; 0 drains eagerly.
    pub apply_rows_per_tick: u32,
    pub in_flight_per_client: u32,
    /// Submission window; in-flight work drains afterwards.
    pub max_ticks: u64,
    /// Cap on the post-window drain before the run is declared stuck.
    pub drain_ticks: u64,
    pub workload: WorkloadSpec,
    pub faults: Vec<FaultEvent>,
    pub reshard: Option<ReshardPlan>,
}

impl ScenarioConfig {
    pub fn basic(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            seed,
            cc_count: 1,
            engines: 1,
            storage_per_engine: 1,
            shards: 1,
            replication: 1,
            epoch_ticks: 5,
            local_first: true,
            sync_log_push: false,
            apply_rows_per_tick: 0,
            in_flight_per_client: 1,
            max_ticks: 2_000,
            drain_ticks: 1_000,
            workload: WorkloadSpec::update_heavy(64, 20, 4),
            faults: Vec::new(),
            reshard: None,
        }
    }

    pub fn cc_node_ids(&self) -> Vec<NodeId> {
        (1..=self.cc_count).collect()
    }

    pub fn engine_tags(&self) -> Vec<EngineTag> {
        (1..=self.engines).map(EngineTag).collect()
    }

    /// Storage host ids for one engine: engine 1 gets 101.., engine 2 gets
    /// 201.., so ids stay readable in traces.
    pub fn storage_hosts(&self, engine: EngineTag) -> Vec<u32> {
        (1..=self.storage_per_engine)
            .map(|r| engine.0 as u32 * 100 + r)
            .collect()
    }

    pub fn engine_of_host(&self, host: u32) -> EngineTag {
        EngineTag((host / 100) as u16)
    }

    pub fn engine_of_client(&self, client: u32) -> EngineTag {
        EngineTag(((client - 1) % self.engines as u32) as u16 + 1)
    }
}

// ---- genesis ----

pub fn genesis_key(engine: EngineTag, row: u64) -> Key {
    format!("e{}:{:06}", engine.0, row).into_bytes()
}

pub const GENESIS_CEN: Cen = Cen(1);

pub fn genesis_csn() -> Csn {
    Csn::new(1, 0)
}

/// Rows preloaded on one engine's storage hosts.
pub fn genesis_rows(cfg: &ScenarioConfig, engine: EngineTag) -> Vec<(Key, StoredValue)> {
    (1..=cfg.workload.rows)
        .map(|r| {
            (
                genesis_key(engine, r),
                StoredValue {
                    value: b"init".to_vec(),
                    writer_csn: genesis_csn(),
                    writer_cen: GENESIS_CEN,
                    deleted: false,
                },
            )
        })
        .collect()
}

/// The same rows as version-map entries, across every engine: the CC layer
/// resolves over the union key space.
pub fn genesis_versions(cfg: &ScenarioConfig) -> Vec<(Key, VersionMapEntry)> {
    let mut out = Vec::new();
    for engine in cfg.engine_tags() {
        for r in 1..=cfg.workload.rows {
            out.push((
                genesis_key(engine, r),
                VersionMapEntry {
                    committed_csn: genesis_csn(),
                    tombstone: false,
                },
            ));
        }
    }
    out
}

pub fn build_shard_map(cfg: &ScenarioConfig, version: u32, num_shards: u32) -> ShardMap {
    ShardMap::uniform(
        version,
        num_shards,
        &cfg.cc_node_ids(),
        cfg.replication as usize,
    )
}

pub fn build_cc_cfg(cfg: &ScenarioConfig, node: NodeId) -> CcConfig {
    let mut cc = CcConfig::single(node, build_shard_map(cfg, 1, cfg.shards));
    cc.nodes = cfg.cc_node_ids();
    cc.epoch_ticks = 0;
    cc.local_first = cfg.local_first;
    cc.sync_log_push = cfg.sync_log_push;
    cc.engine_hosts = cfg
        .engine_tags()
        .into_iter()
        .map(|e| (e, cfg.storage_hosts(e)))
        .collect();
    cc
}

// ---- workload scripts ----

#[derive(Debug, Clone)]
pub struct ScriptTxn {
    pub ops: Vec<Op>,
    pub group: Option<GroupRef>,
}

#[derive(Debug)]
pub struct ClientScript {
    pub txns: Vec<ScriptTxn>,
    pub next: usize,
    /// Lockstep partner for cross-engine groups; the lower id drives.
    pub partner: Option<u32>,
}

fn client_seed(seed: u64, client: u32) -> u64 {
    seed ^ (client as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn gen_ops(cfg: &ScenarioConfig, rng: &mut ChaCha20Rng, engine: EngineTag, tag: String) -> Vec<Op> {
    let w = &cfg.workload;
    let zipf = w
        .zipf_theta
        .map(|s| rand_distr::Zipf::new(w.rows, s).expect("zipf parameters"));
    let mut ops = Vec::with_capacity(w.ops_per_txn as usize);
    for i in 0..w.ops_per_txn {
        let row = match &zipf {
            Some(z) => {
                use rand_distr::Distribution;
                z.sample(rng) as u64
            }
            None => rng.gen_range(1..=w.rows),
        };
        let key = genesis_key(engine, row);
        if rng.gen_bool(w.read_fraction) {
            ops.push(Op::Get(key));
        } else {
            ops.push(Op::Put(key, format!("{tag}-{i}").into_bytes()));
        }
    }
    ops
}

pub fn build_scripts(cfg: &ScenarioConfig) -> BTreeMap<u32, ClientScript> {
    let w = &cfg.workload;
    let mut scripts = BTreeMap::new();
    // Group pairing needs exactly two engines; clients alternate engines,
    // so (1,2), (3,4), ... are cross-engine pairs.
    let paired = cfg.engines == 2 && w.group_fraction > 0.0;
    for c in 1..=w.clients {
        let engine = cfg.engine_of_client(c);
        let mut rng = ChaCha20Rng::seed_from_u64(client_seed(cfg.seed, c));
        let txns = (0..w.txns_per_client)
            .map(|t| ScriptTxn {
                ops: gen_ops(cfg, &mut rng, engine, format!("v{c}-{t}")),
                group: None,
            })
            .collect();
        let partner = if paired {
            if c % 2 == 1 && c + 1 <= w.clients {
                Some(c + 1)
            } else if c % 2 == 0 {
                Some(c - 1)
            } else {
                None
            }
        } else {
            None
        };
        scripts.insert(
            c,
            ClientScript {
                txns,
                next: 0,
                partner,
            },
        );
    }
    if paired {
        // Stamp group refs onto matching slots of each pair, decided by a
        // pair-scoped rng so both sides agree.
        let lows: Vec<u32> = scripts
            .iter()
            .filter(|(&c, s)| c % 2 == 1 && s.partner.is_some())
            .map(|(&c, _)| c)
            .collect();
        for lo in lows {
            let hi = lo + 1;
            let n = scripts[&lo].txns.len().min(scripts[&hi].txns.len());
            let mut rng = ChaCha20Rng::seed_from_u64(client_seed(cfg.seed, lo) ^ 0x6772_6f75_70);
            for i in 0..n {
                if rng.gen_bool(w.group_fraction) {
                    let group = GroupRef {
                        group_id: ((lo as u64) << 32) | i as u64,
                        expected_members: 2,
                    };
                    scripts.get_mut(&lo).unwrap().txns[i].group = Some(group);
                    scripts.get_mut(&hi).unwrap().txns[i].group = Some(group);
                }
            }
        }
    }
    scripts
}

/// Picks the transactions each client should submit now: solo clients fill
/// their in-flight window, paired clients advance in lockstep (driven from
/// the lower id) so group members of one pair submit on the same tick.
pub fn pace_scripts(
    scripts: &mut BTreeMap<u32, ClientScript>,
    proxies: &BTreeMap<u32, ProxyNode>,
    in_flight: usize,
) -> Vec<(u32, ScriptTxn)> {
    let mut submissions: Vec<(u32, ScriptTxn)> = Vec::new();
    let clients: Vec<u32> = scripts.keys().copied().collect();
    for c in clients {
        let (partner, next, len) = {
            let s = &scripts[&c];
            (s.partner, s.next, s.txns.len())
        };
        match partner {
            Some(p) if c < p => {
                let p_state = &scripts[&p];
                if next < len
                    && p_state.next < p_state.txns.len()
                    && proxies[&c].open_txns() == 0
                    && proxies[&p].open_txns() == 0
                {
                    let t1 = scripts[&c].txns[next].clone();
                    let idx = scripts[&p].next;
                    let t2 = scripts[&p].txns[idx].clone();
                    scripts.get_mut(&c).unwrap().next += 1;
                    scripts.get_mut(&p).unwrap().next += 1;
                    submissions.push((c, t1));
                    submissions.push((p, t2));
                }
            }
            Some(_) => {}
            None => {
                let mut taken = next;
                while taken < len && proxies[&c].open_txns() + (taken - next) < in_flight {
                    submissions.push((c, scripts[&c].txns[taken].clone()));
                    taken += 1;
                }
                scripts.get_mut(&c).unwrap().next = taken;
            }
        }
    }
    submissions
}

/// Proxies as the scenario configures them, one per scripted client.
pub fn build_proxies(cfg: &ScenarioConfig) -> BTreeMap<u32, ProxyNode> {
    let mut proxies = BTreeMap::new();
    for c in 1..=cfg.workload.clients {
        let engine = cfg.engine_of_client(c);
        let ccs_all = cfg.cc_node_ids();
        let home = ccs_all[(c as usize - 1) % ccs_all.len()];
        let pc = ProxyConfig::new(c, engine, ccs_all, home, cfg.storage_hosts(engine));
        proxies.insert(c, ProxyNode::new(pc));
    }
    proxies
}

// ---- run history ----

#[derive(Debug, Clone)]
pub struct FinishedRecord {
    pub tick: u64,
    pub client: u32,
    pub txn: FinishedTxn,
}

#[derive(Debug, Default)]
pub struct RunHistory {
    pub finished: Vec<FinishedRecord>,
    /// Every decision reply that left a CC node, per (client, txn_id):
    /// (tick, result). Duplicates are legitimate (resubmission after a
    /// retry); contradictions are not.
    pub emissions: BTreeMap<(u32, u64), Vec<(u64, SubmitResult)>>,
    /// First tick each committed csn became fully applied on any storage
    /// host.
    pub first_applied: BTreeMap<Csn, u64>,
    /// (origin, epoch) pairs that took the routed (multi-node) path.
    pub routed: BTreeSet<(NodeId, u64)>,
    /// Envelope counts by message kind, for hop accounting.
    pub msg_counts: BTreeMap<String, u64>,
}

impl RunHistory {
    /// Books an envelope leaving a node at tick `now`: hop accounting plus
    /// the emission and routing traces the oracles read. Every transport
    /// must call this exactly once per scheduled envelope.
    pub fn record_send(&mut self, now: u64, env: &Envelope) {
        *self
            .msg_counts
            .entry(format!("{:?}", env.msg.kind()))
            .or_insert(0) += 1;
        match (&env.msg, env.src, env.dst) {
            (Message::DecisionReply(d), Addr::Cc(_), Addr::Client(c)) => {
                self.emissions
                    .entry((c, d.txn_id))
                    .or_default()
                    .push((now, d.result));
            }
            (Message::SubTxnRoute(r), _, _) => {
                self.routed.insert((r.origin, r.cen.0));
            }
            _ => {}
        }
    }
}

// ---- report ----

/// Everything a scenario run yields, in deterministic, serializable form.
/// Two runs of one seed must produce byte-identical JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub ticks_run: u64,
    pub quiesced: bool,
    pub submitted: u64,
    pub committed: u64,
    pub aborted: BTreeMap<String, u64>,
    pub rejected: u64,
    pub dropped: u64,
    pub commit_rtt_max: f64,
    pub commit_rtt_mean: f64,
    /// Commit-path envelopes per committed txn, halved into round trips.
    pub amortized_commit_hops: f64,
    /// Of committed write txns with a known apply tick: fraction whose
    /// decision left the CC before the first storage apply.
    pub decision_before_apply: Option<f64>,
    /// (engine, host, digest) per live storage host.
    pub storage_digests: Vec<(u16, u32, u32)>,
    /// (host, watermark) per live storage host.
    pub watermarks: Vec<(u32, u64)>,
    pub committed_per_ktick: f64,
    pub oracle_violations: Vec<String>,
}

// ---- the cluster ----

pub struct SimCluster {
    pub cfg: ScenarioConfig,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Envelope>,
    ccs: BTreeMap<NodeId, Option<CcNode>>,
    storages: BTreeMap<u32, Option<StorageNode>>,
    proxies: BTreeMap<u32, ProxyNode>,
    scripts: BTreeMap<u32, ClientScript>,
    partitions: BTreeSet<(NodeId, NodeId)>,
    faults: Vec<FaultEvent>,
    next_fault: usize,
    reshard_done: bool,
    submitted: u64,
    pub history: RunHistory,
    _base: tempfile::TempDir,
    base_path: std::path::PathBuf,
}

impl SimCluster {
    pub fn new(cfg: ScenarioConfig) -> Self {
        let base = tempfile::tempdir().expect("sim tempdir");
        let base_path = base.path().to_path_buf();
        let versions = genesis_versions(&cfg);
        let mut ccs = BTreeMap::new();
        for n in cfg.cc_node_ids() {
            let dir = base_path.join(format!("cc{n}"));
            std::fs::create_dir_all(&dir).expect("cc log dir");
            let log = LogStore::open_dir(&dir, n, SyncPolicy::Buffered).expect("open log");
            let node = CcNode::new(build_cc_cfg(&cfg, n), &versions, log).expect("cc node");
            ccs.insert(n, Some(node));
        }
        let mut storages = BTreeMap::new();
        for e in cfg.engine_tags() {
            let rows = genesis_rows(&cfg, e);
            for h in cfg.storage_hosts(e) {
                let mut sc = StorageConfig::new(h, e, cfg.cc_node_ids());
                sc.apply_rows_per_tick = cfg.apply_rows_per_tick;
                storages.insert(h, Some(StorageNode::new(sc, &rows, GENESIS_CEN)));
            }
        }
        let proxies = build_proxies(&cfg);
        let scripts = build_scripts(&cfg);
        let mut faults = cfg.faults.clone();
        faults.sort_by_key(|f| f.tick);
        Self {
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            ccs,
            storages,
            proxies,
            scripts,
            partitions: BTreeSet::new(),
            faults,
            next_fault: 0,
            reshard_done: false,
            submitted: 0,
            history: RunHistory::default(),
            _base: base,
            base_path,
            cfg,
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn cc(&self, n: NodeId) -> Option<&CcNode> {
        self.ccs.get(&n).and_then(|o| o.as_ref())
    }

    pub fn storage(&self, h: u32) -> Option<&StorageNode> {
        self.storages.get(&h).and_then(|o| o.as_ref())
    }

    pub fn proxy_mut(&mut self, c: u32) -> &mut ProxyNode {
        self.proxies.get_mut(&c).expect("client id")
    }

    pub fn live_cc_ids(&self) -> Vec<NodeId> {
        self.ccs
            .iter()
            .filter(|(_, n)| n.is_some())
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn live_storage_ids(&self) -> Vec<u32> {
        self.storages
            .iter()
            .filter(|(_, n)| n.is_some())
            .map(|(&id, _)| id)
            .collect()
    }

    /// Hand-built envelopes (scripted scenarios) enter the same network.
    pub fn inject(&mut self, envs: Vec<Envelope>) {
        for env in envs {
            self.schedule(env);
        }
    }

    pub fn proxies_idle(&self) -> bool {
        self.proxies.values().all(|p| p.open_txns() == 0)
    }

    pub fn scripts_done(&self) -> bool {
        self.scripts.values().all(|s| s.next >= s.txns.len())
    }

    fn schedule(&mut self, env: Envelope) {
        self.history.record_send(self.now, &env);
        self.queue.insert((self.now + 1, self.seq), env);
        self.seq += 1;
    }

    fn partitioned(&self, src: Addr, dst: Addr) -> bool {
        if let (Addr::Cc(a), Addr::Cc(b)) = (src, dst) {
            self.partitions.contains(&(a.min(b), a.max(b)))
        } else {
            false
        }
    }

    fn deliver(&mut self, env: Envelope) {
        if self.partitioned(env.src, env.dst) {
            return;
        }
        let outs = match env.dst {
            Addr::Cc(n) => match self.ccs.get_mut(&n) {
                Some(Some(node)) => node.on_message(env),
                _ => return,
            },
            Addr::Storage(h) => match self.storages.get_mut(&h) {
                Some(Some(node)) => node.on_message(env),
                _ => return,
            },
            Addr::Client(c) => match self.proxies.get_mut(&c) {
                Some(p) => p.on_message(env),
                None => return,
            },
        };
        for out in outs {
            self.schedule(out);
        }
    }

    fn apply_fault(&mut self, action: FaultAction) {
        match action {
            FaultAction::CrashCc(n) => {
                if let Some(slot) = self.ccs.get_mut(&n) {
                    *slot = None;
                }
            }
            FaultAction::RecoverCc(n) => {
                if let Some(slot) = self.ccs.get_mut(&n) {
                    if slot.is_none() {
                        let dir = self.base_path.join(format!("cc{n}"));
                        let log =
                            LogStore::open_dir(&dir, n, SyncPolicy::Buffered).expect("reopen log");
                        let node =
                            CcNode::recover(build_cc_cfg(&self.cfg, n), log).expect("cc recover");
                        *slot = Some(node);
                    }
                }
            }
            FaultAction::CrashStorage(h) => {
                if let Some(slot) = self.storages.get_mut(&h) {
                    *slot = None;
                }
            }
            FaultAction::RecoverStorage(h) => {
                if let Some(slot) = self.storages.get_mut(&h) {
                    if slot.is_none() {
                        let engine = self.cfg.engine_of_host(h);
                        let rows = genesis_rows(&self.cfg, engine);
                        let mut sc = StorageConfig::new(h, engine, self.cfg.cc_node_ids());
                        sc.apply_rows_per_tick = self.cfg.apply_rows_per_tick;
                        *slot = Some(StorageNode::recover(sc, &rows, GENESIS_CEN));
                    }
                }
            }
            FaultAction::PartitionCc(a, b) => {
                self.partitions.insert((a.min(b), a.max(b)));
            }
            FaultAction::Heal => self.partitions.clear(),
        }
    }

    fn trigger_reshard(&mut self) {
        let plan = match self.cfg.reshard {
            Some(p) => p,
            None => return,
        };
        let target = match self.live_cc_ids().first().copied() {
            Some(t) => t,
            None => return,
        };
        let node = self.ccs.get_mut(&target).unwrap().as_mut().unwrap();
        let cutover = Cen(node.open_cen().0 + 3);
        let version = node.shard_map().version + 1;
        let new_map = ShardMap::uniform(
            version,
            plan.new_shards,
            &self.cfg.cc_node_ids(),
            self.cfg.replication as usize,
        );
        let outs = node.on_message(Envelope {
            src: Addr::Client(0),
            dst: Addr::Cc(target),
            msg: Message::AdminFrame(AdminMsg::TriggerReshard {
                req_id: 1,
                new_map,
                cutover,
            }),
        });
        for out in outs {
            self.schedule(out);
        }
        self.reshard_done = true;
    }

    fn pace(&mut self) {
        if self.now >= self.cfg.max_ticks {
            return;
        }
        let in_flight = self.cfg.in_flight_per_client.max(1) as usize;
        let submissions = pace_scripts(&mut self.scripts, &self.proxies, in_flight);
        for (c, txn) in submissions {
            self.submitted += 1;
            let (_, envs) = self
                .proxies
                .get_mut(&c)
                .unwrap()
                .run_grouped(txn.ops, txn.group);
            for env in envs {
                self.schedule(env);
            }
        }
    }

    /// One simulated tick: faults, deliveries, epoch closes, node ticks,
    /// new submissions, capture. Outputs of everything processed at tick T
    /// deliver at T+1.
    pub fn step(&mut self) {
        while self.next_fault < self.faults.len() && self.faults[self.next_fault].tick <= self.now {
            let action = self.faults[self.next_fault].action;
            self.next_fault += 1;
            self.apply_fault(action);
        }
        if let Some(plan) = self.cfg.reshard {
            if !self.reshard_done && plan.trigger_tick <= self.now {
                self.trigger_reshard();
            }
        }

        let due: Vec<(u64, u64)> = self
            .queue
            .range(..=(self.now, u64::MAX))
            .map(|(&k, _)| k)
            .collect();
        for k in due {
            let env = self.queue.remove(&k).unwrap();
            self.deliver(env);
        }

        if self.cfg.epoch_ticks > 0 && self.now > 0 && self.now % self.cfg.epoch_ticks as u64 == 0 {
            let ids: Vec<NodeId> = self.ccs.keys().copied().collect();
            for n in ids {
                let close = match self.ccs.get(&n).and_then(|o| o.as_ref()) {
                    Some(node) if node.is_active() => node.open_cen(),
                    _ => continue,
                };
                let outs = self.ccs.get_mut(&n).unwrap().as_mut().unwrap().on_message(Envelope {
                    src: Addr::Client(0),
                    dst: Addr::Cc(n),
                    msg: Message::AdminFrame(AdminMsg::Tick { close_cen: close }),
                });
                for out in outs {
                    self.schedule(out);
                }
            }
        }

        let cc_ids: Vec<NodeId> = self.ccs.keys().copied().collect();
        for n in cc_ids {
            if let Some(Some(node)) = self.ccs.get_mut(&n) {
                let outs = node.on_tick();
                for out in outs {
                    self.schedule(out);
                }
            }
        }
        let st_ids: Vec<u32> = self.storages.keys().copied().collect();
        for h in st_ids {
            if let Some(Some(node)) = self.storages.get_mut(&h) {
                let outs = node.on_tick();
                for out in outs {
                    self.schedule(out);
                }
            }
        }
        let px_ids: Vec<u32> = self.proxies.keys().copied().collect();
        for c in px_ids {
            let outs = self.proxies.get_mut(&c).unwrap().on_tick();
            for out in outs {
                self.schedule(out);
            }
        }

        self.pace();

        for c in self.proxies.keys().copied().collect::<Vec<_>>() {
            let events = self.proxies.get_mut(&c).unwrap().take_events();
            for ev in events {
                if let ProxyEvent::Finished(txn) = ev {
                    self.history.finished.push(FinishedRecord {
                        tick: self.now,
                        client: c,
                        txn,
                    });
                }
            }
        }
        for h in self.storages.keys().copied().collect::<Vec<_>>() {
            if let Some(Some(node)) = self.storages.get_mut(&h) {
                for (_cen, csn) in node.take_applied() {
                    self.history.first_applied.entry(csn).or_insert(self.now);
                }
            }
        }

        self.now += 1;
    }

    /// Submission window, then drain until proxies idle (capped), then a
    /// settle window for log push and storage application to flush.
    /// Returns whether the drain quiesced.
    pub fn run_to_completion(&mut self) -> bool {
        while self.now < self.cfg.max_ticks {
            self.step();
        }
        let cap = self.now + self.cfg.drain_ticks;
        while self.now < cap && !self.proxies_idle() {
            self.step();
        }
        let quiesced = self.proxies_idle();
        let settle = 4 * self.cfg.epoch_ticks as u64 + 120;
        for _ in 0..settle {
            self.step();
        }
        quiesced
    }
}

// ---- oracle ----

/// A decided-and-committed transaction in fold order.
struct CommittedTxn<'a> {
    csn: Csn,
    rec: &'a FinishedRecord,
}

/// Independent snapshot-isolation audit of a run history. Folds every
/// committed transaction sequentially by (epoch, csn) from genesis and
/// checks, per committed transaction:
///
/// * its reads match the end state of the epoch before its commit epoch,
///   version and value both;
/// * no two committed transactions wrote one key in one epoch;
/// * inserts hit absent or tombstoned rows, updates and deletes hit live
///   rows;
/// * decisions are exactly-once and internally consistent;
/// * cross-engine groups commit all-or-nothing.
///
/// Returns human-readable violations; empty means the history is clean.
pub fn si_oracle(cfg: &ScenarioConfig, history: &RunHistory) -> Vec<String> {
    let mut violations = Vec::new();

    // Exactly-once: one finish per (client, txn), consistent emissions,
    // unique csns.
    let mut seen: BTreeMap<(u32, u64), &FinishedRecord> = BTreeMap::new();
    for rec in &history.finished {
        if seen.insert((rec.client, rec.txn.txn_id), rec).is_some() {
            violations.push(format!(
                "duplicate finish for client {} txn {}",
                rec.client, rec.txn.txn_id
            ));
        }
    }
    for ((client, txn_id), emits) in &history.emissions {
        let mut decided: Option<crate::model::Decision> = None;
        for (_, result) in emits {
            if let SubmitResult::Decided(d) = result {
                match decided {
                    None => decided = Some(*d),
                    Some(prev) if prev != *d => violations.push(format!(
                        "contradictory decisions for client {client} txn {txn_id}: {prev:?} vs {d:?}"
                    )),
                    _ => {}
                }
            }
        }
    }
    let mut by_csn: BTreeMap<Csn, (u32, u64)> = BTreeMap::new();
    for rec in &history.finished {
        if let Outcome::Decided(d) = &rec.txn.outcome {
            if let Some(prev) = by_csn.insert(d.csn, (rec.client, rec.txn.txn_id)) {
                if prev != (rec.client, rec.txn.txn_id) {
                    violations.push(format!(
                        "csn {:?} assigned to two transactions: {:?} and ({}, {})",
                        d.csn, prev, rec.client, rec.txn.txn_id
                    ));
                }
            }
        }
    }

    // Group atomicity: a group with any committed member must have every
    // finished member committed.
    let mut groups: BTreeMap<u64, Vec<&FinishedRecord>> = BTreeMap::new();
    for rec in &history.finished {
        if let Some(g) = &rec.txn.request.cross_model_group {
            groups.entry(g.group_id).or_default().push(rec);
        }
    }
    for (gid, members) in &groups {
        let committed = members.iter().filter(|r| r.txn.outcome.committed()).count();
        if committed > 0 && committed < members.len() {
            violations.push(format!(
                "group {gid}: {committed} of {} members committed",
                members.len()
            ));
        }
    }

    // Sequential fold by (epoch, csn).
    let mut by_cen: BTreeMap<Cen, Vec<CommittedTxn>> = BTreeMap::new();
    for rec in &history.finished {
        if let Outcome::Decided(d) = &rec.txn.outcome {
            if d.verdict == Verdict::Committed {
                by_cen
                    .entry(d.cen)
                    .or_default()
                    .push(CommittedTxn { csn: d.csn, rec });
            }
        }
    }
    // state: key -> (csn, deleted, value); starts at genesis.
    let mut state: BTreeMap<Key, (Csn, bool, Value)> = BTreeMap::new();
    for engine in cfg.engine_tags() {
        for (k, v) in genesis_rows(cfg, engine) {
            state.insert(k, (v.writer_csn, v.deleted, v.value));
        }
    }
    for (cen, mut txns) in by_cen {
        txns.sort_by_key(|t| t.csn);
        let snapshot = state.clone();
        let mut writers_this_epoch: BTreeMap<&Key, Csn> = BTreeMap::new();
        for t in &txns {
            let req = &t.rec.txn.request;
            let observed: BTreeMap<&Key, &Option<Value>> =
                t.rec.txn.observed.iter().map(|(k, v)| (k, v)).collect();
            for r in &req.read_set {
                match snapshot.get(&r.key) {
                    None => {
                        if r.read_version != ReadVersion::Initial {
                            violations.push(format!(
                                "epoch {} csn {:?}: committed read of {:?} claims {:?} but key was never written",
                                cen.0, t.csn, String::from_utf8_lossy(&r.key), r.read_version
                            ));
                        }
                    }
                    Some((csn, true, _)) => violations.push(format!(
                        "epoch {} csn {:?}: committed read of {:?} over tombstone {:?}",
                        cen.0,
                        t.csn,
                        String::from_utf8_lossy(&r.key),
                        csn
                    )),
                    Some((csn, false, val)) => {
                        if r.read_version != ReadVersion::Committed(*csn) {
                            violations.push(format!(
                                "epoch {} csn {:?}: read of {:?} validated {:?}, snapshot holds {:?}",
                                cen.0,
                                t.csn,
                                String::from_utf8_lossy(&r.key),
                                r.read_version,
                                csn
                            ));
                        } else if let Some(obs) = observed.get(&r.key) {
                            if obs.as_deref() != Some(val.as_slice()) {
                                violations.push(format!(
                                    "epoch {} csn {:?}: observed value of {:?} differs from snapshot",
                                    cen.0,
                                    t.csn,
                                    String::from_utf8_lossy(&r.key)
                                ));
                            }
                        }
                    }
                }
            }
            for w in &req.write_set {
                if let Some(prev) = writers_this_epoch.insert(&w.key, t.csn) {
                    violations.push(format!(
                        "epoch {}: two committed writers of {:?}: {:?} and {:?}",
                        cen.0,
                        String::from_utf8_lossy(&w.key),
                        prev,
                        t.csn
                    ));
                }
                let live = matches!(snapshot.get(&w.key), Some((_, false, _)));
                match w.op {
                    OpType::Insert => {
                        if live {
                            violations.push(format!(
                                "epoch {} csn {:?}: committed insert over live row {:?}",
                                cen.0,
                                t.csn,
                                String::from_utf8_lossy(&w.key)
                            ));
                        }
                    }
                    OpType::Update | OpType::Delete => {
                        if !live {
                            violations.push(format!(
                                "epoch {} csn {:?}: committed {:?} of non-live row {:?}",
                                cen.0,
                                t.csn,
                                w.op,
                                String::from_utf8_lossy(&w.key)
                            ));
                        }
                    }
                }
            }
        }
        for t in &txns {
            for w in &t.rec.txn.request.write_set {
                state.insert(
                    w.key.clone(),
                    (t.csn, w.op == OpType::Delete, w.value.clone()),
                );
            }
        }
    }
    violations
}

/// Sequential-fold end state per engine, as storage should hold it:
/// genesis plus every committed write in (epoch, csn) order.
pub fn expected_storage(
    cfg: &ScenarioConfig,
    history: &RunHistory,
) -> BTreeMap<EngineTag, BTreeMap<Key, StoredValue>> {
    let mut out: BTreeMap<EngineTag, BTreeMap<Key, StoredValue>> = BTreeMap::new();
    for engine in cfg.engine_tags() {
        out.insert(engine, genesis_rows(cfg, engine).into_iter().collect());
    }
    let mut committed: Vec<(Cen, Csn, &FinishedRecord)> = history
        .finished
        .iter()
        .filter_map(|rec| match &rec.txn.outcome {
            Outcome::Decided(d) if d.verdict == Verdict::Committed => Some((d.cen, d.csn, rec)),
            _ => None,
        })
        .collect();
    committed.sort_by_key(|(cen, csn, _)| (*cen, *csn));
    for (cen, csn, rec) in committed {
        let engine = rec.txn.request.engine;
        let map = out.entry(engine).or_default();
        for w in &rec.txn.request.write_set {
            map.insert(
                w.key.clone(),
                StoredValue {
                    value: w.value.clone(),
                    writer_csn: csn,
                    writer_cen: cen,
                    deleted: w.op == OpType::Delete,
                },
            );
        }
    }
    out
}

/// Byte-exact comparison of live storage contents against the fold.
/// `rows_by_host` holds each live host's full row map.
pub fn check_storage_rows(
    cfg: &ScenarioConfig,
    history: &RunHistory,
    rows_by_host: &BTreeMap<u32, BTreeMap<Key, StoredValue>>,
) -> Vec<String> {
    let expected = expected_storage(cfg, history);
    let mut violations = Vec::new();
    for (h, got) in rows_by_host {
        let engine = cfg.engine_of_host(*h);
        let want = &expected[&engine];
        if got != want {
            let mut diffs = 0;
            for (k, v) in want {
                if got.get(k) != Some(v) {
                    diffs += 1;
                }
            }
            for k in got.keys() {
                if !want.contains_key(k) {
                    diffs += 1;
                }
            }
            violations.push(format!(
                "storage host {h} diverges from sequential fold on {diffs} rows"
            ));
        }
    }
    // Replicas of one engine must agree with each other even if all
    // diverged from the fold (that would be a separate violation).
    for engine in cfg.engine_tags() {
        let replicas: Vec<&BTreeMap<Key, StoredValue>> = cfg
            .storage_hosts(engine)
            .into_iter()
            .filter_map(|h| rows_by_host.get(&h))
            .collect();
        if replicas.windows(2).any(|w| w[0] != w[1]) {
            violations.push(format!(
                "engine {} replicas disagree on row contents",
                engine.0
            ));
        }
    }
    violations
}

/// Byte-exact comparison of every live storage host against the fold.
pub fn check_storage_convergence(cluster: &SimCluster, history: &RunHistory) -> Vec<String> {
    let rows_by_host: BTreeMap<u32, BTreeMap<Key, StoredValue>> = cluster
        .live_storage_ids()
        .into_iter()
        .map(|h| {
            let node = cluster.storage(h).unwrap();
            (
                h,
                node.rows().map(|(k, v)| (k.clone(), v.clone())).collect(),
            )
        })
        .collect();
    check_storage_rows(&cluster.cfg, history, &rows_by_host)
}

// ---- running ----

pub struct RunOutcome {
    pub report: RunReport,
    pub cluster: SimCluster,
}

fn commit_rtts(cfg: &ScenarioConfig, history: &RunHistory) -> Vec<f64> {
    history
        .finished
        .iter()
        .filter_map(|rec| match &rec.txn.outcome {
            Outcome::Decided(d) if d.verdict == Verdict::Committed => {
                // Base: submit + decision reply. Routed epochs add the
                // route/collect trip and the exchange legs; local-first
                // adds the write-set broadcast on top of the abort-set
                // exchange.
                let routed = history.routed.contains(&(d.csn.node_id, d.cen.0));
                Some(if !routed {
                    1.0
                } else if cfg.local_first {
                    2.5
                } else {
                    2.0
                })
            }
            _ => None,
        })
        .collect()
}

/// Transport-independent run facts for the report.
#[derive(Debug, Clone, Copy)]
pub struct RunStats {
    pub ticks_run: u64,
    pub quiesced: bool,
    pub submitted: u64,
}

pub fn build_report(
    cfg: &ScenarioConfig,
    history: &RunHistory,
    stats: RunStats,
    storage_digests: Vec<(u16, u32, u32)>,
    watermarks: Vec<(u32, u64)>,
    oracle_violations: Vec<String>,
) -> RunReport {
    let mut committed = 0u64;
    let mut rejected = 0u64;
    let mut dropped = 0u64;
    let mut aborted: BTreeMap<String, u64> = BTreeMap::new();
    for rec in &history.finished {
        match &rec.txn.outcome {
            Outcome::Decided(d) => match d.verdict {
                Verdict::Committed => committed += 1,
                Verdict::Aborted(reason) => {
                    *aborted.entry(format!("{reason:?}")).or_insert(0) += 1
                }
            },
            Outcome::Rejected(_) => rejected += 1,
            Outcome::Dropped => dropped += 1,
            Outcome::RolledBack => {}
        }
    }
    let rtts = commit_rtts(cfg, history);
    let commit_rtt_max = rtts.iter().copied().fold(0.0, f64::max);
    let commit_rtt_mean = if rtts.is_empty() {
        0.0
    } else {
        rtts.iter().sum::<f64>() / rtts.len() as f64
    };
    let commit_path_kinds = [
        "SubmitTxn",
        "TxnBackup",
        "SubTxnRoute",
        "WriteSetPayload",
        "AbortSetPayload",
        "DecisionReply",
    ];
    let commit_path_msgs: u64 = commit_path_kinds
        .iter()
        .filter_map(|k| history.msg_counts.get(*k))
        .sum();
    let amortized_commit_hops = if committed == 0 {
        0.0
    } else {
        commit_path_msgs as f64 / (2.0 * committed as f64)
    };

    let mut before = 0u64;
    let mut with_apply = 0u64;
    for rec in &history.finished {
        if let Outcome::Decided(d) = &rec.txn.outcome {
            if d.verdict == Verdict::Committed && !rec.txn.request.write_set.is_empty() {
                let emit = history
                    .emissions
                    .get(&(rec.client, rec.txn.txn_id))
                    .and_then(|v| v.first().map(|(t, _)| *t));
                let apply = history.first_applied.get(&d.csn).copied();
                if let (Some(e), Some(a)) = (emit, apply) {
                    with_apply += 1;
                    if e < a {
                        before += 1;
                    }
                }
            }
        }
    }
    let decision_before_apply = if with_apply == 0 {
        None
    } else {
        Some(before as f64 / with_apply as f64)
    };

    RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        ticks_run: stats.ticks_run,
        quiesced: stats.quiesced,
        submitted: stats.submitted,
        committed,
        aborted,
        rejected,
        dropped,
        commit_rtt_max,
        commit_rtt_mean,
        amortized_commit_hops,
        decision_before_apply,
        storage_digests,
        watermarks,
        committed_per_ktick: committed as f64 * 1000.0 / cfg.max_ticks.max(1) as f64,
        oracle_violations,
    }
}

impl SimCluster {
    pub fn stats(&self, quiesced: bool) -> RunStats {
        RunStats {
            ticks_run: self.now,
            quiesced,
            submitted: self.submitted,
        }
    }

    pub fn storage_digests(&self) -> Vec<(u16, u32, u32)> {
        self.live_storage_ids()
            .into_iter()
            .map(|h| {
                let node = self.storage(h).unwrap();
                (node.engine().0, h, node.digest())
            })
            .collect()
    }

    pub fn watermarks(&self) -> Vec<(u32, u64)> {
        self.live_storage_ids()
            .into_iter()
            .map(|h| (h, self.storage(h).unwrap().watermark().0))
            .collect()
    }
}

/// Runs a scenario end to end: simulate, drain, audit, report.
pub fn run_scenario(cfg: &ScenarioConfig) -> RunOutcome {
    let mut cluster = SimCluster::new(cfg.clone());
    let quiesced = cluster.run_to_completion();
    let mut violations = si_oracle(cfg, &cluster.history);
    violations.extend(check_storage_convergence(&cluster, &cluster.history));
    if !quiesced {
        violations.push("run did not quiesce within the drain window".to_string());
    }
    let report = build_report(
        cfg,
        &cluster.history,
        cluster.stats(quiesced),
        cluster.storage_digests(),
        cluster.watermarks(),
        violations,
    );
    RunOutcome { report, cluster }
}
