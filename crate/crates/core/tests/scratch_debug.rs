use ccsvc_core::harness::*;
use ccsvc_core::proxy::Outcome;

#[test]
fn dump_fault_history() {
    let mut cfg = ScenarioConfig::basic("equiv", 11);
    cfg.cc_count = 3;
    cfg.engines = 1;
    cfg.storage_per_engine = 2;
    cfg.shards = 3;
    cfg.replication = 1;
    cfg.workload.clients = 3;
    cfg.workload.txns_per_client = 15;
    cfg.workload.rows = 48;
    cfg.max_ticks = 400;
    cfg.drain_ticks = 400;
    cfg.faults = vec![
        FaultEvent { tick: 80, action: FaultAction::CrashCc(3) },
        FaultEvent { tick: 120, action: FaultAction::CrashStorage(102) },
        FaultEvent { tick: 160, action: FaultAction::RecoverCc(3) },
        FaultEvent { tick: 240, action: FaultAction::RecoverStorage(102) },
    ];
    let outcome = run_scenario(&cfg);
    let hist = &outcome.cluster.history;
    let key = b"e1:000022".to_vec();
    println!("== txns touching {:?} ==", String::from_utf8_lossy(&key));
    for rec in &hist.finished {
        let touches = rec.txn.request.write_set.iter().any(|w| w.key == key);
        if touches {
            println!(
                "client {} txn {} begin_epoch {:?} outcome {:?} finished at tick {}",
                rec.client, rec.txn.txn_id, rec.txn.request.begin_epoch, rec.txn.outcome, rec.tick
            );
        }
    }
    println!("== all decided txns by (cen, csn) ==");
    let mut rows: Vec<_> = hist
        .finished
        .iter()
        .filter_map(|r| match &r.txn.outcome {
            Outcome::Decided(d) => Some((d.cen, d.csn, d.verdict, r.client, r.txn.txn_id, r.tick)),
            _ => None,
        })
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    for (cen, csn, verdict, client, txn_id, tick) in rows {
        println!(
            "cen {} csn ({},{}) {:?} client {} txn {} tick {}",
            cen.0, csn.local_time, csn.node_id, verdict, client, txn_id, tick
        );
    }
    println!("== emissions for suspicious txns ==");
    for ((client, txn_id), emits) in &hist.emissions {
        for (tick, res) in emits {
            println!("client {client} txn {txn_id} tick {tick}: {res:?}");
        }
    }
    println!("violations: {:#?}", outcome.report.oracle_violations);
}
