//! Distributed run orchestrator: the simulator's step loop over real
//! processes and real sockets.
//!
//! Every CC and storage node runs in a child process (spawned from this
//! binary's hidden `node` subcommand); client proxies stay in-process
//! because they are the workload driver. The orchestrator owns the clock
//! and the message queue, exactly like [`SimCluster`], and talks to each
//! child in strict request-response, so the cluster advances in lockstep:
//! same scenario, same seed, byte-identical run report. Crashing a node
//! means shutting its process down and dropping queued messages to it;
//! recovery respawns the process against the same log directory.
//!
//! [`SimCluster`]: ccsvc_core::harness::SimCluster

use crate::wire;
use anyhow::{bail, Context, Result};
use ccsvc_core::coordinator::ShardMap;
use ccsvc_core::harness::{
    build_proxies, build_report, build_scripts, check_storage_rows, pace_scripts, si_oracle,
    ClientScript, FaultAction, FaultEvent, FinishedRecord, RunHistory, RunReport, RunStats,
    ScenarioConfig,
};
use ccsvc_core::model::{Cen, Csn, Key, NodeId};
use ccsvc_core::proxy::{ProxyEvent, ProxyNode};
use ccsvc_core::storage::StoredValue;
use ccsvc_core::transport::{Addr, AdminMsg, Envelope, Message};
use std::collections::{BTreeMap, BTreeSet};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

const REGISTER_TIMEOUT: Duration = Duration::from_secs(30);
const RPC_TIMEOUT: Duration = Duration::from_secs(60);

struct NodeHandle {
    child: Child,
    stream: TcpStream,
}

impl NodeHandle {
    /// Clean shutdown: the node drops its state (flushing logs) and exits.
    fn shutdown(mut self) -> Result<()> {
        wire::write_ctrl(&mut self.stream, wire::TAG_SHUTDOWN, &[])?;
        let status = self.child.wait().context("wait for node exit")?;
        if !status.success() {
            bail!("node process exited with {status}");
        }
        Ok(())
    }

    fn rpc(&mut self, tag: u8, body: &[u8]) -> Result<(u8, Vec<u8>)> {
        wire::rpc(&mut self.stream, tag, body)
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        // Orderly paths consume self via shutdown(); reaching here means an
        // error unwound, so just make sure no child outlives the run.
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct TcpCluster {
    pub cfg: ScenarioConfig,
    bin: PathBuf,
    listener: TcpListener,
    connect_addr: String,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Envelope>,
    ccs: BTreeMap<NodeId, Option<NodeHandle>>,
    storages: BTreeMap<u32, Option<NodeHandle>>,
    proxies: BTreeMap<u32, ProxyNode>,
    scripts: BTreeMap<u32, ClientScript>,
    partitions: BTreeSet<(NodeId, NodeId)>,
    faults: Vec<FaultEvent>,
    next_fault: usize,
    reshard_done: bool,
    submitted: u64,
    pub history: RunHistory,
    /// Storage apply events reported during the current tick, booked into
    /// the history at capture time like the simulator does.
    applied_buf: Vec<(Cen, Csn)>,
    _base: tempfile::TempDir,
    base_path: PathBuf,
}

impl TcpCluster {
    pub fn new(cfg: ScenarioConfig, bin: &Path) -> Result<Self> {
        let base = tempfile::tempdir().context("orchestrator tempdir")?;
        let base_path = base.path().to_path_buf();
        let listener = TcpListener::bind("127.0.0.1:0").context("bind orchestrator port")?;
        let connect_addr = listener.local_addr()?.to_string();

        let proxies = build_proxies(&cfg);
        let scripts = build_scripts(&cfg);
        let mut faults = cfg.faults.clone();
        faults.sort_by_key(|f| f.tick);

        let mut cluster = Self {
            bin: bin.to_path_buf(),
            listener,
            connect_addr,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            ccs: cfg.cc_node_ids().iter().map(|&n| (n, None)).collect(),
            storages: cfg
                .engine_tags()
                .iter()
                .flat_map(|&e| cfg.storage_hosts(e))
                .map(|h| (h, None))
                .collect(),
            proxies,
            scripts,
            partitions: BTreeSet::new(),
            faults,
            next_fault: 0,
            reshard_done: false,
            submitted: 0,
            history: RunHistory::default(),
            applied_buf: Vec::new(),
            _base: base,
            base_path,
            cfg,
        };

        for n in cluster.cfg.cc_node_ids() {
            cluster.spawn_node(wire::ROLE_CC, n, false)?;
        }
        for e in cluster.cfg.engine_tags() {
            for h in cluster.cfg.storage_hosts(e) {
                cluster.spawn_node(wire::ROLE_STORAGE, h, false)?;
            }
        }
        Ok(cluster)
    }

    /// Spawns one node process and waits for it to register. Serial spawn
    /// and registration keeps slot assignment unambiguous.
    fn spawn_node(&mut self, role: u8, id: u32, recover: bool) -> Result<()> {
        let scenario_json = serde_json::to_string(&self.cfg).expect("scenario serializes");
        let mut cmd = Command::new(&self.bin);
        cmd.arg("node")
            .arg("--role")
            .arg(if role == wire::ROLE_CC { "cc" } else { "storage" })
            .arg("--node")
            .arg(id.to_string())
            .arg("--connect")
            .arg(&self.connect_addr)
            .arg("--scenario-json")
            .arg(&scenario_json)
            .stdin(Stdio::null())
            .stdout(Stdio::null());
        if role == wire::ROLE_CC {
            cmd.arg("--dir").arg(self.base_path.join(format!("cc{id}")));
        }
        if recover {
            cmd.arg("--recover");
        }
        let mut child = cmd.spawn().with_context(|| format!("spawn node {id}"))?;

        let stream = self.await_connection(&mut child)?;
        let (got_role, got_id, stream) = register_on(stream)?;
        if got_role != role || got_id != id {
            let _ = child.kill();
            bail!("node registered as role {got_role} id {got_id}, expected role {role} id {id}");
        }
        stream.set_read_timeout(Some(RPC_TIMEOUT))?;
        let slot = match role {
            wire::ROLE_CC => self.ccs.get_mut(&id),
            _ => self.storages.get_mut(&id),
        };
        *slot.with_context(|| format!("unknown node id {id}"))? = Some(NodeHandle { child, stream });
        Ok(())
    }

    /// Accepts the next connection, failing fast if the child dies first.
    fn await_connection(&mut self, child: &mut Child) -> Result<TcpStream> {
        self.listener.set_nonblocking(true)?;
        let deadline = Instant::now() + REGISTER_TIMEOUT;
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    self.listener.set_nonblocking(false)?;
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    return Ok(stream);
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if let Some(status) = child.try_wait()? {
                        bail!("node process exited before registering: {status}");
                    }
                    if Instant::now() > deadline {
                        bail!("timed out waiting for node to register");
                    }
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) => return Err(e).context("accept node connection"),
            }
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn submitted(&self) -> u64 {
        self.submitted
    }

    fn live_cc_ids(&self) -> Vec<NodeId> {
        self.ccs
            .iter()
            .filter(|(_, n)| n.is_some())
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn proxies_idle(&self) -> bool {
        self.proxies.values().all(|p| p.open_txns() == 0)
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

    /// Sends one envelope into a node process and schedules whatever it
    /// emitted. Storage apply events ride back on the same response.
    fn rpc_node(&mut self, dst: Addr, tag: u8, body: &[u8]) -> Result<()> {
        let handle = match dst {
            Addr::Cc(n) => self.ccs.get_mut(&n).and_then(|o| o.as_mut()),
            Addr::Storage(h) => self.storages.get_mut(&h).and_then(|o| o.as_mut()),
            Addr::Client(_) => unreachable!("proxies are in-process"),
        };
        let handle = match handle {
            Some(h) => h,
            None => return Ok(()),
        };
        let (resp_tag, resp) = handle
            .rpc(tag, body)
            .with_context(|| format!("rpc to {dst}"))?;
        if resp_tag != wire::TAG_OUTPUTS {
            bail!("node {dst} answered tag {resp_tag}, expected outputs");
        }
        let (outs, applied) = wire::decode_outputs(&resp)?;
        self.applied_buf.extend(applied);
        for out in outs {
            self.schedule(out);
        }
        Ok(())
    }

    fn deliver(&mut self, env: Envelope) -> Result<()> {
        if self.partitioned(env.src, env.dst) {
            return Ok(());
        }
        match env.dst {
            Addr::Cc(_) | Addr::Storage(_) => {
                self.rpc_node(env.dst, wire::TAG_DELIVER, &wire::encode_deliver(&env))
            }
            Addr::Client(c) => {
                let outs = match self.proxies.get_mut(&c) {
                    Some(p) => p.on_message(env),
                    None => return Ok(()),
                };
                for out in outs {
                    self.schedule(out);
                }
                Ok(())
            }
        }
    }

    fn query_epoch(&mut self, n: NodeId) -> Result<Option<(Cen, bool, u32)>> {
        let handle = match self.ccs.get_mut(&n).and_then(|o| o.as_mut()) {
            Some(h) => h,
            None => return Ok(None),
        };
        let (tag, body) = handle.rpc(wire::TAG_QUERY_EPOCH, &[])?;
        if tag != wire::TAG_EPOCH_INFO {
            bail!("cc {n} answered tag {tag} to epoch query");
        }
        Ok(Some(wire::decode_epoch_info(&body)?))
    }

    fn apply_fault(&mut self, action: FaultAction) -> Result<()> {
        match action {
            FaultAction::CrashCc(n) => {
                if let Some(slot) = self.ccs.get_mut(&n) {
                    if let Some(handle) = slot.take() {
                        handle.shutdown()?;
                    }
                }
            }
            FaultAction::RecoverCc(n) => {
                if self.ccs.get(&n).is_some_and(|s| s.is_none()) {
                    self.spawn_node(wire::ROLE_CC, n, true)?;
                }
            }
            FaultAction::CrashStorage(h) => {
                if let Some(slot) = self.storages.get_mut(&h) {
                    if let Some(handle) = slot.take() {
                        handle.shutdown()?;
                    }
                }
            }
            FaultAction::RecoverStorage(h) => {
                if self.storages.get(&h).is_some_and(|s| s.is_none()) {
                    self.spawn_node(wire::ROLE_STORAGE, h, true)?;
                }
            }
            FaultAction::PartitionCc(a, b) => {
                self.partitions.insert((a.min(b), a.max(b)));
            }
            FaultAction::Heal => self.partitions.clear(),
        }
        Ok(())
    }

    fn trigger_reshard(&mut self) -> Result<()> {
        let plan = match self.cfg.reshard {
            Some(p) => p,
            None => return Ok(()),
        };
        let target = match self.live_cc_ids().first().copied() {
            Some(t) => t,
            None => return Ok(()),
        };
        let (open, _, shard_version) = self
            .query_epoch(target)?
            .expect("reshard target vanished mid-query");
        let cutover = Cen(open.0 + 3);
        let new_map = ShardMap::uniform(
            shard_version + 1,
            plan.new_shards,
            &self.cfg.cc_node_ids(),
            self.cfg.replication as usize,
        );
        let env = Envelope {
            src: Addr::Client(0),
            dst: Addr::Cc(target),
            msg: Message::AdminFrame(AdminMsg::TriggerReshard {
                req_id: 1,
                new_map,
                cutover,
            }),
        };
        self.rpc_node(env.dst, wire::TAG_DELIVER, &wire::encode_deliver(&env))?;
        self.reshard_done = true;
        Ok(())
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

    /// One tick, in the simulator's exact order: faults, reshard trigger,
    /// due deliveries, epoch closes, node ticks, submissions, capture.
    pub fn step(&mut self) -> Result<()> {
        while self.next_fault < self.faults.len() && self.faults[self.next_fault].tick <= self.now {
            let action = self.faults[self.next_fault].action;
            self.next_fault += 1;
            self.apply_fault(action)?;
        }
        if let Some(plan) = self.cfg.reshard {
            if !self.reshard_done && plan.trigger_tick <= self.now {
                self.trigger_reshard()?;
            }
        }

        let due: Vec<(u64, u64)> = self
            .queue
            .range(..=(self.now, u64::MAX))
            .map(|(&k, _)| k)
            .collect();
        for k in due {
            let env = self.queue.remove(&k).unwrap();
            self.deliver(env)?;
        }

        if self.cfg.epoch_ticks > 0 && self.now > 0 && self.now % self.cfg.epoch_ticks as u64 == 0 {
            let ids: Vec<NodeId> = self.ccs.keys().copied().collect();
            for n in ids {
                let close = match self.query_epoch(n)? {
                    Some((open, true, _)) => open,
                    _ => continue,
                };
                let env = Envelope {
                    src: Addr::Client(0),
                    dst: Addr::Cc(n),
                    msg: Message::AdminFrame(AdminMsg::Tick { close_cen: close }),
                };
                self.rpc_node(env.dst, wire::TAG_DELIVER, &wire::encode_deliver(&env))?;
            }
        }

        let cc_ids: Vec<NodeId> = self.ccs.keys().copied().collect();
        for n in cc_ids {
            self.rpc_node(Addr::Cc(n), wire::TAG_TICK, &[])?;
        }
        let st_ids: Vec<u32> = self.storages.keys().copied().collect();
        for h in st_ids {
            self.rpc_node(Addr::Storage(h), wire::TAG_TICK, &[])?;
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
        for (_, csn) in self.applied_buf.drain(..) {
            self.history.first_applied.entry(csn).or_insert(self.now);
        }

        self.now += 1;
        Ok(())
    }

    pub fn run_to_completion(&mut self) -> Result<bool> {
        while self.now < self.cfg.max_ticks {
            self.step()?;
        }
        let cap = self.now + self.cfg.drain_ticks;
        while self.now < cap && !self.proxies_idle() {
            self.step()?;
        }
        let quiesced = self.proxies_idle();
        let settle = 4 * self.cfg.epoch_ticks as u64 + 120;
        for _ in 0..settle {
            self.step()?;
        }
        Ok(quiesced)
    }

    /// Pulls final state from every live storage host, ascending by host
    /// id to match the simulator's report ordering.
    #[allow(clippy::type_complexity)]
    fn collect_end_reports(
        &mut self,
    ) -> Result<(
        Vec<(u16, u32, u32)>,
        Vec<(u32, u64)>,
        BTreeMap<u32, BTreeMap<Key, StoredValue>>,
    )> {
        let mut digests = Vec::new();
        let mut watermarks = Vec::new();
        let mut rows_by_host = BTreeMap::new();
        let hosts: Vec<u32> = self.storages.keys().copied().collect();
        for h in hosts {
            let handle = match self.storages.get_mut(&h).and_then(|o| o.as_mut()) {
                Some(x) => x,
                None => continue,
            };
            let (tag, body) = handle.rpc(wire::TAG_END_REPORT_REQ, &[])?;
            if tag != wire::TAG_END_REPORT {
                bail!("storage {h} answered tag {tag} to end report request");
            }
            let report = wire::decode_end_report(&body)?;
            digests.push((self.cfg.engine_of_host(h).0, h, report.digest));
            watermarks.push((h, report.watermark.0));
            rows_by_host.insert(h, report.rows.into_iter().collect());
        }
        Ok((digests, watermarks, rows_by_host))
    }

    fn shutdown_all(&mut self) -> Result<()> {
        for (_, slot) in self.ccs.iter_mut() {
            if let Some(handle) = slot.take() {
                handle.shutdown()?;
            }
        }
        for (_, slot) in self.storages.iter_mut() {
            if let Some(handle) = slot.take() {
                handle.shutdown()?;
            }
        }
        Ok(())
    }
}

/// Reads the registration frame off a fresh connection.
fn register_on(mut stream: TcpStream) -> Result<(u8, u32, TcpStream)> {
    stream.set_read_timeout(Some(REGISTER_TIMEOUT))?;
    let (tag, body) = wire::read_ctrl(&mut stream)?;
    if tag != wire::TAG_REGISTER {
        bail!("first frame from node was tag {tag}, expected register");
    }
    let (role, id) = wire::decode_register(&body)?;
    Ok((role, id, stream))
}

/// Runs a scenario over real processes and sockets; the report is
/// byte-identical to the simulator's for the same scenario.
pub fn run_scenario_tcp(cfg: &ScenarioConfig, bin: &Path) -> Result<RunReport> {
    let mut cluster = TcpCluster::new(cfg.clone(), bin)?;
    let quiesced = cluster.run_to_completion()?;
    let (digests, watermarks, rows_by_host) = cluster.collect_end_reports()?;
    let mut violations = si_oracle(cfg, &cluster.history);
    violations.extend(check_storage_rows(cfg, &cluster.history, &rows_by_host));
    if !quiesced {
        violations.push("run did not quiesce within the drain window".to_string());
    }
    let stats = RunStats {
        ticks_run: cluster.now(),
        quiesced,
        submitted: cluster.submitted(),
    };
    let report = build_report(cfg, &cluster.history, stats, digests, watermarks, violations);
    cluster.shutdown_all()?;
    Ok(report)
}
