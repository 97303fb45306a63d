//! Node shell: one CC or storage node living in its own OS process.
//!
//! The shell connects back to the orchestrator, registers, and then obeys
//! control frames one at a time: deliver a message, advance a tick, answer
//! an epoch query, report final state, or shut down. Shutdown (and EOF,
//! should the orchestrator die) drops the node, which flushes its log
//! files, so a respawn with `--recover` sees everything the node had
//! durably accepted.

use crate::wire::{self, EndReport};
use anyhow::{bail, Context, Result};
use ccsvc_core::coordinator::CcNode;
use ccsvc_core::durability::{LogStore, SyncPolicy};
use ccsvc_core::harness::{
    build_cc_cfg, genesis_rows, genesis_versions, ScenarioConfig, GENESIS_CEN,
};
use ccsvc_core::storage::{StorageConfig, StorageNode};
use std::net::TcpStream;
use std::path::Path;

pub fn run_cc(
    node_id: u32,
    cfg: &ScenarioConfig,
    dir: &Path,
    connect: &str,
    recover: bool,
) -> Result<()> {
    std::fs::create_dir_all(dir).context("create log dir")?;
    let log = LogStore::open_dir(dir, node_id, SyncPolicy::Buffered).context("open log")?;
    let mut node = if recover {
        CcNode::recover(build_cc_cfg(cfg, node_id), log).context("recover cc node")?
    } else {
        CcNode::new(build_cc_cfg(cfg, node_id), &genesis_versions(cfg), log)
            .context("build cc node")?
    };

    let mut stream = TcpStream::connect(connect).context("connect to orchestrator")?;
    stream.set_nodelay(true)?;
    wire::write_ctrl(
        &mut stream,
        wire::TAG_REGISTER,
        &wire::encode_register(wire::ROLE_CC, node_id),
    )?;

    loop {
        let (tag, body) = match wire::read_ctrl(&mut stream) {
            Ok(x) => x,
            Err(_) => break,
        };
        match tag {
            wire::TAG_DELIVER => {
                let env = wire::decode_deliver(&body)?;
                let outs = node.on_message(env);
                wire::write_ctrl(&mut stream, wire::TAG_OUTPUTS, &wire::encode_outputs(&outs, &[]))?;
            }
            wire::TAG_TICK => {
                let outs = node.on_tick();
                wire::write_ctrl(&mut stream, wire::TAG_OUTPUTS, &wire::encode_outputs(&outs, &[]))?;
            }
            wire::TAG_QUERY_EPOCH => {
                let info = wire::encode_epoch_info(
                    node.open_cen(),
                    node.is_active(),
                    node.shard_map().version,
                );
                wire::write_ctrl(&mut stream, wire::TAG_EPOCH_INFO, &info)?;
            }
            wire::TAG_SHUTDOWN => break,
            other => bail!("cc shell: unexpected control tag {other}"),
        }
    }
    Ok(())
}

pub fn run_storage(host_id: u32, cfg: &ScenarioConfig, connect: &str, recover: bool) -> Result<()> {
    let engine = cfg.engine_of_host(host_id);
    let rows = genesis_rows(cfg, engine);
    let mut sc = StorageConfig::new(host_id, engine, cfg.cc_node_ids());
    sc.apply_rows_per_tick = cfg.apply_rows_per_tick;
    let mut node = if recover {
        StorageNode::recover(sc, &rows, GENESIS_CEN)
    } else {
        StorageNode::new(sc, &rows, GENESIS_CEN)
    };

    let mut stream = TcpStream::connect(connect).context("connect to orchestrator")?;
    stream.set_nodelay(true)?;
    wire::write_ctrl(
        &mut stream,
        wire::TAG_REGISTER,
        &wire::encode_register(wire::ROLE_STORAGE, host_id),
    )?;

    loop {
        let (tag, body) = match wire::read_ctrl(&mut stream) {
            Ok(x) => x,
            Err(_) => break,
        };
        match tag {
            wire::TAG_DELIVER => {
                let env = wire::decode_deliver(&body)?;
                let outs = node.on_message(env);
                let applied = node.take_applied();
                wire::write_ctrl(
                    &mut stream,
                    wire::TAG_OUTPUTS,
                    &wire::encode_outputs(&outs, &applied),
                )?;
            }
            wire::TAG_TICK => {
                let outs = node.on_tick();
                let applied = node.take_applied();
                wire::write_ctrl(
                    &mut stream,
                    wire::TAG_OUTPUTS,
                    &wire::encode_outputs(&outs, &applied),
                )?;
            }
            wire::TAG_END_REPORT_REQ => {
                let report = EndReport {
                    digest: node.digest(),
                    watermark: node.watermark(),
                    rows: node.rows().map(|(k, v)| (k.clone(), v.clone())).collect(),
                };
                wire::write_ctrl(
                    &mut stream,
                    wire::TAG_END_REPORT,
                    &wire::encode_end_report(&report),
                )?;
            }
            wire::TAG_SHUTDOWN => break,
            other => bail!("storage shell: unexpected control tag {other}"),
        }
    }
    Ok(())
}
