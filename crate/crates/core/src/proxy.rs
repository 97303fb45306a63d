//! KV execution proxy.
//!
//! The proxy is the execution side of the split: it runs key-value
//! transactions by reading whatever storage currently serves, buffering
//! writes locally, and handing the finished read/write sets to a
//! concurrency-control node, which alone decides commit or abort.
//!
//! Execution is optimistic and never blocks on a consistent snapshot:
//! per-key reads may interleave with epochs applying concurrently at
//! storage. Honesty, not freshness, is the proxy's contract with the
//! validator: the first read of each key records exactly the stamped
//! version it observed, and commit-time validation rejects the transaction
//! unless all of those observations coexist in the snapshot preceding its
//! commit epoch. A read that lands on a tombstone is reported at the
//! delete's commit number, which validation always rejects; the app sees
//! `None` and the transaction is doomed to abort and retry. Re-creating a
//! deleted row is done blind, with [`Op::PutNew`], not read-modify-write.
//!
//! Write staging keeps at most one record per key and infers the operation
//! the validator expects:
//!
//! * `Put` after this transaction observed the key absent stages an
//!   insert; unobserved or observed live, an update.
//! * `PutNew` stages an insert claim without reading.
//! * `Delete` of a key this transaction itself inserted cancels the
//!   record; of a key it observed absent, it is dropped as a no-op.
//! * Any write after a staged delete collapses to an update, and reads
//!   always see the transaction's own staged writes first.
//!
//! Fate of a submission is resolved exactly once. If the submitted-to node
//! goes silent, the proxy polls every CC node for the decision: any
//! `Decided` answer settles it, any `Pending` answer proves the
//! transaction is still alive somewhere, and a complete round of `Unknown`
//! from every configured node proves it died with its origin before being
//! backed up, which the app is told as [`Outcome::Dropped`]. A grace
//! deadline covers the case where dead nodes never answer at all.

use crate::coordinator::stable_hash;
use crate::model::{
    Cen, Decision, EngineTag, GroupRef, Key, NodeId, OpType, ReadRecord, ReadVersion, TxnRequest,
    Value, WriteRecord,
};
use crate::transport::{
    Addr, AdminMsg, DecisionReply, Envelope, Message, SubmitReject, SubmitResult, SubmitTxn,
    TxnStatus,
};
use std::collections::{BTreeMap, BTreeSet};

/// One step of a key-value transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Get(Key),
    /// Ordinary write: insert if this transaction observed the key absent,
    /// update otherwise.
    Put(Key, Value),
    /// Blind insert claim, without reading first. The deliberate path for
    /// creating rows and for re-creating deleted ones.
    PutNew(Key, Value),
    Delete(Key),
}

impl Op {
    pub fn key(&self) -> &Key {
        match self {
            Op::Get(k) | Op::Put(k, _) | Op::PutNew(k, _) | Op::Delete(k) => k,
        }
    }
}

/// Terminal fate of a proxy transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Decided(Decision),
    Rejected(SubmitReject),
    /// Every CC node denied knowledge of the submission: it died with its
    /// origin before any backup existed. It provably did not commit.
    Dropped,
    RolledBack,
}

impl Outcome {
    pub fn committed(&self) -> bool {
        matches!(
            self,
            Outcome::Decided(d) if d.verdict == crate::model::Verdict::Committed
        )
    }
}

/// A finished transaction with everything an auditor needs: the request as
/// submitted and the values the application actually saw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinishedTxn {
    pub txn_id: u64,
    pub outcome: Outcome,
    pub request: TxnRequest,
    /// First-read values in observation order, `None` for absent or
    /// deleted rows.
    pub observed: Vec<(Key, Option<Value>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProxyEvent {
    ReadResult {
        txn_id: u64,
        key: Key,
        value: Option<Value>,
    },
    Finished(FinishedTxn),
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub client_id: u32,
    pub engine: EngineTag,
    /// All configured CC nodes; the decision poll asks every one.
    pub cc_nodes: Vec<NodeId>,
    /// Node submissions go to first; rotates away on `NotServing`.
    pub home_cc: NodeId,
    pub storage_hosts: Vec<u32>,
    pub read_retry_ticks: u32,
    pub submit_retry_ticks: u32,
    /// How long a silent submission may stay unresolved before the poll
    /// gives up and reports it dropped. Must comfortably exceed failover
    /// time, or a transaction adopted by a takeover could be misreported.
    pub decision_grace_ticks: u32,
    pub max_submit_attempts: u32,
}

impl ProxyConfig {
    pub fn new(
        client_id: u32,
        engine: EngineTag,
        cc_nodes: Vec<NodeId>,
        home_cc: NodeId,
        storage_hosts: Vec<u32>,
    ) -> Self {
        Self {
            client_id,
            engine,
            cc_nodes,
            home_cc,
            storage_hosts,
            read_retry_ticks: 8,
            submit_retry_ticks: 12,
            decision_grace_ticks: 60,
            max_submit_attempts: 10,
        }
    }
}

#[derive(Debug, Clone)]
struct ReadObs {
    version: ReadVersion,
    value: Option<Value>,
}

#[derive(Debug)]
enum Phase {
    Executing,
    AwaitingRead {
        key: Key,
        req_id: u64,
        since: u64,
        attempt: u32,
    },
    Submitted {
        origin: NodeId,
        since: u64,
        attempts: u32,
        poll: Option<PollState>,
    },
    /// Bounced with `Overloaded`; resubmits when the next epoch has had a
    /// chance to open.
    Backoff { until: u64, attempts: u32 },
}

#[derive(Debug)]
struct PollState {
    started: u64,
    last_round: u64,
}

#[derive(Debug)]
struct TxnContext {
    txn_id: u64,
    ops: Vec<Op>,
    pc: usize,
    committing: bool,
    begin_epoch: Cen,
    group: Option<GroupRef>,
    /// First-read-wins observation cache; repeat reads are served from it
    /// and never produce a second read record.
    read_obs: BTreeMap<Key, ReadObs>,
    read_order: Vec<Key>,
    /// At most one staged write per key.
    writes: BTreeMap<Key, WriteRecord>,
    phase: Phase,
}

impl TxnContext {
    /// `Some(true)` if this transaction observed the key live, `Some(false)`
    /// if absent or tombstoned, `None` if never read.
    fn presumes_extant(&self, key: &[u8]) -> Option<bool> {
        self.read_obs.get(key).map(|o| o.value.is_some())
    }

    fn build_request(&self, engine: EngineTag) -> TxnRequest {
        let read_set = self
            .read_order
            .iter()
            .map(|k| ReadRecord::new(k.clone(), self.read_obs[k].version))
            .collect();
        TxnRequest {
            txn_id: self.txn_id,
            engine,
            begin_epoch: self.begin_epoch,
            read_set,
            write_set: self.writes.values().cloned().collect(),
            cross_model_group: self.group,
        }
    }

    fn observed(&self) -> Vec<(Key, Option<Value>)> {
        self.read_order
            .iter()
            .map(|k| (k.clone(), self.read_obs[k].value.clone()))
            .collect()
    }
}

#[derive(Debug, Clone)]
enum ReqKind {
    Read { txn_id: u64, key: Key },
    Poll { txn_id: u64 },
}

pub struct ProxyNode {
    cfg: ProxyConfig,
    home_idx: usize,
    now: u64,
    next_txn_id: u64,
    next_req_id: u64,
    /// Highest commit epoch seen in any decision; stamps `begin_epoch`.
    observed_cen: Cen,
    txns: BTreeMap<u64, TxnContext>,
    reqs: BTreeMap<u64, ReqKind>,
    /// Unknown-answer tally per poll round (keyed by the round's req_id).
    rounds: BTreeMap<u64, BTreeSet<NodeId>>,
    events: Vec<ProxyEvent>,
    counters: BTreeMap<&'static str, u64>,
    outbox: Vec<Envelope>,
}

impl ProxyNode {
    pub fn new(cfg: ProxyConfig) -> Self {
        let home_idx = cfg
            .cc_nodes
            .iter()
            .position(|&n| n == cfg.home_cc)
            .unwrap_or(0);
        Self {
            home_idx,
            now: 0,
            next_txn_id: 1,
            next_req_id: 1,
            observed_cen: Cen(0),
            txns: BTreeMap::new(),
            reqs: BTreeMap::new(),
            rounds: BTreeMap::new(),
            events: Vec::new(),
            counters: BTreeMap::new(),
            outbox: Vec::new(),
            cfg,
        }
    }

    pub fn client_id(&self) -> u32 {
        self.cfg.client_id
    }

    pub fn open_txns(&self) -> usize {
        self.txns.len()
    }

    pub fn counter(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }

    pub fn take_events(&mut self) -> Vec<ProxyEvent> {
        std::mem::take(&mut self.events)
    }

    fn bump(&mut self, name: &'static str) {
        *self.counters.entry(name).or_insert(0) += 1;
    }

    fn send(&mut self, dst: Addr, msg: Message) {
        self.outbox.push(Envelope {
            src: Addr::Client(self.cfg.client_id),
            dst,
            msg,
        });
    }

    fn fresh_req(&mut self) -> u64 {
        let id = self.next_req_id;
        self.next_req_id += 1;
        id
    }

    // ---- transaction API ----

    /// Opens an interactive transaction; ops arrive via [`Self::push_op`].
    pub fn begin(&mut self) -> u64 {
        self.begin_grouped(None)
    }

    pub fn begin_grouped(&mut self, group: Option<GroupRef>) -> u64 {
        let txn_id = self.next_txn_id;
        self.next_txn_id += 1;
        self.txns.insert(
            txn_id,
            TxnContext {
                txn_id,
                ops: Vec::new(),
                pc: 0,
                committing: false,
                begin_epoch: self.observed_cen,
                group,
                read_obs: BTreeMap::new(),
                read_order: Vec::new(),
                writes: BTreeMap::new(),
                phase: Phase::Executing,
            },
        );
        self.bump("txns.begun");
        txn_id
    }

    pub fn push_op(&mut self, txn_id: u64, op: Op) -> Vec<Envelope> {
        if let Some(ctx) = self.txns.get_mut(&txn_id) {
            if op.key().is_empty() {
                // Admission would bounce it anyway; fail fast locally.
                self.finish(txn_id, Outcome::Rejected(SubmitReject::MalformedRequest));
            } else {
                ctx.ops.push(op);
                self.step(txn_id);
            }
        }
        std::mem::take(&mut self.outbox)
    }

    pub fn commit(&mut self, txn_id: u64) -> Vec<Envelope> {
        if let Some(ctx) = self.txns.get_mut(&txn_id) {
            ctx.committing = true;
            self.step(txn_id);
        }
        std::mem::take(&mut self.outbox)
    }

    pub fn rollback(&mut self, txn_id: u64) -> Vec<Envelope> {
        if self.txns.contains_key(&txn_id) {
            self.finish(txn_id, Outcome::RolledBack);
        }
        std::mem::take(&mut self.outbox)
    }

    /// Scripted transaction: all ops known up front, committed at the end.
    pub fn run(&mut self, ops: Vec<Op>) -> (u64, Vec<Envelope>) {
        self.run_grouped(ops, None)
    }

    pub fn run_grouped(&mut self, ops: Vec<Op>, group: Option<GroupRef>) -> (u64, Vec<Envelope>) {
        let txn_id = self.begin_grouped(group);
        let ctx = self.txns.get_mut(&txn_id).unwrap();
        if let Some(bad) = ops.iter().position(|op| op.key().is_empty()) {
            let _ = bad;
            self.finish(txn_id, Outcome::Rejected(SubmitReject::MalformedRequest));
            return (txn_id, std::mem::take(&mut self.outbox));
        }
        ctx.ops = ops;
        ctx.committing = true;
        self.step(txn_id);
        (txn_id, std::mem::take(&mut self.outbox))
    }

    // ---- execution ----

    fn step(&mut self, txn_id: u64) {
        loop {
            let ctx = match self.txns.get_mut(&txn_id) {
                Some(c) => c,
                None => return,
            };
            if !matches!(ctx.phase, Phase::Executing) {
                return;
            }
            if ctx.pc >= ctx.ops.len() {
                if ctx.committing {
                    self.submit(txn_id);
                }
                return;
            }
            let op = ctx.ops[ctx.pc].clone();
            ctx.pc += 1;
            match op {
                Op::Get(key) => {
                    if self.exec_get(txn_id, key) {
                        return;
                    }
                }
                Op::Put(key, value) => self.stage_put(txn_id, key, value, false),
                Op::PutNew(key, value) => self.stage_put(txn_id, key, value, true),
                Op::Delete(key) => self.stage_delete(txn_id, key),
            }
        }
    }

    /// Returns true when the read went to storage and execution must wait.
    fn exec_get(&mut self, txn_id: u64, key: Key) -> bool {
        let ctx = self.txns.get_mut(&txn_id).unwrap();
        // The transaction's own staged writes win over everything.
        if let Some(w) = ctx.writes.get(&key) {
            let value = match w.op {
                OpType::Delete => None,
                _ => Some(w.value.clone()),
            };
            self.bump("reads.own_write");
            self.events.push(ProxyEvent::ReadResult { txn_id, key, value });
            return false;
        }
        if let Some(obs) = ctx.read_obs.get(&key) {
            let value = obs.value.clone();
            self.bump("reads.cached");
            self.events.push(ProxyEvent::ReadResult { txn_id, key, value });
            return false;
        }
        let req_id = self.fresh_req();
        let host = self.host_for(&key, 0);
        let ctx = self.txns.get_mut(&txn_id).unwrap();
        ctx.phase = Phase::AwaitingRead {
            key: key.clone(),
            req_id,
            since: self.now,
            attempt: 0,
        };
        self.reqs.insert(req_id, ReqKind::Read { txn_id, key: key.clone() });
        self.bump("reads.storage");
        self.send(
            Addr::Storage(host),
            Message::AdminFrame(AdminMsg::GetData { req_id, key }),
        );
        true
    }

    fn host_for(&self, key: &[u8], attempt: u32) -> u32 {
        let hosts = &self.cfg.storage_hosts;
        let idx = (stable_hash(key) as usize + attempt as usize) % hosts.len();
        hosts[idx]
    }

    fn stage_put(&mut self, txn_id: u64, key: Key, value: Value, blind_new: bool) {
        let ctx = self.txns.get_mut(&txn_id).unwrap();
        let op = match ctx.writes.get(&key).map(|w| w.op) {
            Some(OpType::Insert) => OpType::Insert,
            // A write over a staged update or delete presumes the row
            // extant, whatever the app claims.
            Some(OpType::Update) | Some(OpType::Delete) => OpType::Update,
            None if blind_new => OpType::Insert,
            None => match ctx.presumes_extant(&key) {
                Some(false) => OpType::Insert,
                _ => OpType::Update,
            },
        };
        ctx.writes.insert(key.clone(), WriteRecord { key, op, value });
    }

    fn stage_delete(&mut self, txn_id: u64, key: Key) {
        let ctx = self.txns.get_mut(&txn_id).unwrap();
        match ctx.writes.get(&key).map(|w| w.op) {
            // Deleting a row this transaction inserted cancels out.
            Some(OpType::Insert) => {
                ctx.writes.remove(&key);
            }
            Some(_) => {
                ctx.writes.insert(key.clone(), WriteRecord::delete(key));
            }
            // Deleting a row observed absent is a no-op, not a doomed
            // missing-row claim.
            None if ctx.presumes_extant(&key) == Some(false) => {}
            None => {
                ctx.writes.insert(key.clone(), WriteRecord::delete(key));
            }
        }
    }

    fn submit(&mut self, txn_id: u64) {
        let ctx = self.txns.get_mut(&txn_id).unwrap();
        let request = ctx.build_request(self.cfg.engine);
        let origin = self.cfg.cc_nodes[self.home_idx];
        let ctx = self.txns.get_mut(&txn_id).unwrap();
        let attempts = match ctx.phase {
            Phase::Submitted { attempts, .. } => attempts,
            Phase::Backoff { attempts, .. } => attempts,
            _ => 0,
        };
        ctx.phase = Phase::Submitted {
            origin,
            since: self.now,
            attempts: attempts + 1,
            poll: None,
        };
        self.bump("submits");
        self.send(Addr::Cc(origin), Message::SubmitTxn(SubmitTxn { request }));
    }

    fn finish(&mut self, txn_id: u64, outcome: Outcome) {
        let ctx = match self.txns.remove(&txn_id) {
            Some(c) => c,
            None => return,
        };
        if let Outcome::Decided(d) = &outcome {
            self.observed_cen = self.observed_cen.max(d.cen);
        }
        match &outcome {
            Outcome::Decided(d) if d.verdict == crate::model::Verdict::Committed => {
                self.bump("outcomes.committed")
            }
            Outcome::Decided(_) => self.bump("outcomes.aborted"),
            Outcome::Rejected(_) => self.bump("outcomes.rejected"),
            Outcome::Dropped => self.bump("outcomes.dropped"),
            Outcome::RolledBack => self.bump("outcomes.rolled_back"),
        }
        let request = ctx.build_request(self.cfg.engine);
        let observed = ctx.observed();
        self.events.push(ProxyEvent::Finished(FinishedTxn {
            txn_id,
            outcome,
            request,
            observed,
        }));
    }

    // ---- driving ----

    pub fn on_tick(&mut self) -> Vec<Envelope> {
        self.now += 1;
        let ids: Vec<u64> = self.txns.keys().copied().collect();
        for txn_id in ids {
            self.tick_txn(txn_id);
        }
        std::mem::take(&mut self.outbox)
    }

    fn tick_txn(&mut self, txn_id: u64) {
        let ctx = match self.txns.get_mut(&txn_id) {
            Some(c) => c,
            None => return,
        };
        match &mut ctx.phase {
            Phase::Executing => {}
            Phase::AwaitingRead {
                key,
                req_id,
                since,
                attempt,
            } => {
                if self.now - *since >= self.cfg.read_retry_ticks as u64 {
                    let key = key.clone();
                    let old_req = *req_id;
                    let next_attempt = *attempt + 1;
                    let new_req = self.next_req_id;
                    self.next_req_id += 1;
                    let host = self.host_for(&key, next_attempt);
                    let ctx = self.txns.get_mut(&txn_id).unwrap();
                    ctx.phase = Phase::AwaitingRead {
                        key: key.clone(),
                        req_id: new_req,
                        since: self.now,
                        attempt: next_attempt,
                    };
                    self.reqs.remove(&old_req);
                    self.reqs.insert(new_req, ReqKind::Read { txn_id, key: key.clone() });
                    self.bump("reads.retried");
                    self.send(
                        Addr::Storage(host),
                        Message::AdminFrame(AdminMsg::GetData { req_id: new_req, key }),
                    );
                }
            }
            Phase::Submitted { since, poll, .. } => {
                let overdue = self.now - *since >= self.cfg.submit_retry_ticks as u64;
                match poll {
                    None if overdue => {
                        *poll = Some(PollState {
                            started: self.now,
                            last_round: 0,
                        });
                        self.poll_round(txn_id);
                    }
                    Some(p) => {
                        if self.now - p.started >= self.cfg.decision_grace_ticks as u64 {
                            self.bump("polls.grace_expired");
                            self.finish(txn_id, Outcome::Dropped);
                        } else if self.now - p.last_round
                            >= self.cfg.submit_retry_ticks as u64
                        {
                            self.poll_round(txn_id);
                        }
                    }
                    None => {}
                }
            }
            Phase::Backoff { until, .. } => {
                if self.now >= *until {
                    ctx.phase = Phase::Executing;
                    self.submit(txn_id);
                }
            }
        }
    }

    fn poll_round(&mut self, txn_id: u64) {
        let ctx = match self.txns.get_mut(&txn_id) {
            Some(c) => c,
            None => return,
        };
        let origin = match &mut ctx.phase {
            Phase::Submitted { origin, poll, .. } => {
                if let Some(p) = poll {
                    p.last_round = self.now;
                }
                *origin
            }
            _ => return,
        };
        let req_id = self.fresh_req();
        self.reqs.insert(req_id, ReqKind::Poll { txn_id });
        self.rounds.insert(req_id, BTreeSet::new());
        self.bump("polls.rounds");
        for &cc in &self.cfg.cc_nodes.clone() {
            self.send(
                Addr::Cc(cc),
                Message::AdminFrame(AdminMsg::DecisionStatus {
                    req_id,
                    origin,
                    client: self.cfg.client_id,
                    txn_id,
                }),
            );
        }
    }

    pub fn on_message(&mut self, env: Envelope) -> Vec<Envelope> {
        let src = env.src;
        match env.msg {
            Message::DecisionReply(reply) => self.handle_decision(reply),
            Message::AdminFrame(AdminMsg::GetDataResp { req_id, stamp }) => {
                self.handle_read_resp(req_id, stamp)
            }
            Message::AdminFrame(AdminMsg::DecisionStatusResp { req_id, status }) => {
                self.handle_status(src, req_id, status)
            }
            Message::AdminFrame(AdminMsg::Hello { .. }) => {}
            _ => self.bump("recv.unexpected"),
        }
        std::mem::take(&mut self.outbox)
    }

    fn handle_read_resp(&mut self, req_id: u64, stamp: Option<crate::transport::ReadStamp>) {
        let (txn_id, key) = match self.reqs.remove(&req_id) {
            Some(ReqKind::Read { txn_id, key }) => (txn_id, key),
            Some(other) => {
                self.reqs.insert(req_id, other);
                return;
            }
            None => return,
        };
        let ctx = match self.txns.get_mut(&txn_id) {
            Some(c) => c,
            None => return,
        };
        // Only the outstanding request counts; late duplicates are stale.
        match &ctx.phase {
            Phase::AwaitingRead { req_id: want, .. } if *want == req_id => {}
            _ => return,
        }
        let (version, value) = match stamp {
            None => (ReadVersion::Initial, None),
            Some(s) if s.deleted => (ReadVersion::Committed(s.csn), None),
            Some(s) => (ReadVersion::Committed(s.csn), Some(s.value)),
        };
        ctx.read_order.push(key.clone());
        ctx.read_obs.insert(
            key.clone(),
            ReadObs {
                version,
                value: value.clone(),
            },
        );
        ctx.phase = Phase::Executing;
        self.events.push(ProxyEvent::ReadResult { txn_id, key, value });
        self.step(txn_id);
    }

    fn handle_decision(&mut self, reply: DecisionReply) {
        let txn_id = reply.txn_id;
        let ctx = match self.txns.get_mut(&txn_id) {
            Some(c) => c,
            None => {
                // Duplicate delivery (origin plus takeover cover); the
                // first answer already settled it.
                self.bump("recv.duplicate_decision");
                return;
            }
        };
        if !matches!(ctx.phase, Phase::Submitted { .. }) {
            return;
        }
        match reply.result {
            SubmitResult::Decided(d) => self.finish(txn_id, Outcome::Decided(d)),
            SubmitResult::Rejected(SubmitReject::MalformedRequest) => {
                self.finish(txn_id, Outcome::Rejected(SubmitReject::MalformedRequest))
            }
            SubmitResult::Rejected(rej) => {
                let attempts = match ctx.phase {
                    Phase::Submitted { attempts, .. } => attempts,
                    _ => unreachable!(),
                };
                if attempts >= self.cfg.max_submit_attempts {
                    self.finish(txn_id, Outcome::Rejected(rej));
                    return;
                }
                match rej {
                    SubmitReject::NotServing => {
                        // Rotate to the next node and retry straight away.
                        self.home_idx = (self.home_idx + 1) % self.cfg.cc_nodes.len();
                        self.bump("submits.rerouted");
                        let ctx = self.txns.get_mut(&txn_id).unwrap();
                        ctx.phase = Phase::Backoff {
                            until: self.now,
                            attempts,
                        };
                        self.submit(txn_id);
                    }
                    SubmitReject::Overloaded => {
                        ctx.phase = Phase::Backoff {
                            until: self.now + self.cfg.submit_retry_ticks as u64,
                            attempts,
                        };
                        self.bump("submits.backoff");
                    }
                    SubmitReject::MalformedRequest => unreachable!(),
                }
            }
        }
    }

    fn handle_status(&mut self, src: Addr, req_id: u64, status: TxnStatus) {
        let txn_id = match self.reqs.get(&req_id) {
            Some(ReqKind::Poll { txn_id }) => *txn_id,
            _ => return,
        };
        if !self.txns.contains_key(&txn_id) {
            self.reqs.remove(&req_id);
            self.rounds.remove(&req_id);
            return;
        }
        match status {
            TxnStatus::Decided(d) => {
                self.bump("polls.decided");
                self.finish(txn_id, Outcome::Decided(d));
            }
            TxnStatus::Pending => {
                // Alive somewhere: push the give-up deadline out.
                if let Some(ctx) = self.txns.get_mut(&txn_id) {
                    if let Phase::Submitted {
                        poll: Some(p), ..
                    } = &mut ctx.phase
                    {
                        p.started = self.now;
                    }
                }
            }
            TxnStatus::Unknown => {
                let responder = match src {
                    Addr::Cc(n) => n,
                    _ => return,
                };
                let complete = {
                    let unknowns = self.rounds.entry(req_id).or_default();
                    unknowns.insert(responder);
                    self.cfg.cc_nodes.iter().all(|n| unknowns.contains(n))
                };
                if complete {
                    // Every configured authority denies knowledge in one
                    // round: the submission provably evaporated.
                    self.bump("polls.all_unknown");
                    self.finish(txn_id, Outcome::Dropped);
                }
            }
        }
    }
}
