use super::*;
use crate::rsa::RsaParams;
use crate::topology::SpectrumConfig;
use crate::workload::{build_schedule, partition_stages, ModelProfile, ScheduleKind};

fn toy_profile(p: usize) -> ModelProfile {
    ModelProfile {
        name: "toy".into(),
        n_layers: p,
        fwd_time_per_layer_s: 1.0e-3,
        bwd_time_per_layer_s: 2.0e-3,
        msg_bytes_per_microbatch: 1 << 20,
    }
}

fn schedule(kind: ScheduleKind, placement: &[usize], m: usize) -> Schedule {
    let stages = partition_stages(&toy_profile(placement.len()), placement).unwrap();
    build_schedule(kind, stages, m).unwrap()
}

fn run(
    net: &mut Network,
    s: &Schedule,
    latency: LatencyParams,
    policy: Policy,
    plan: Option<RequestPlan>,
) -> Timeline {
    let mut cache = CandidateCache::new(RsaParams::default(), latency);
    let mut egress = EgressState::new(s.stage_count());
    let params = EngineParams::default();
    let plan = plan.unwrap_or_else(|| RequestPlan::uniform(s.tasks.len()));
    let mut ctx = IterationContext {
        net,
        cache: &mut cache,
        latency: &latency,
        egress: &mut egress,
        params: &params,
        policy,
        plan: &plan,
        iteration: 0,
    };
    simulate_iteration(&mut ctx, s, 8.0 * (1 << 20) as f64).unwrap()
}

fn nsfnet() -> Network {
    let mut net = Network::nsfnet(SpectrumConfig::default()).unwrap();
    net.enable_event_log();
    net
}

#[test]
fn zero_latency_gpipe_matches_closed_form() {
    for p in 1..=5 {
        for m in 1..=6 {
            let placement: Vec<usize> = (0..p).collect();
            let s = schedule(ScheduleKind::Gpipe, &placement, m);
            let t = run(&mut nsfnet(), &s, LatencyParams::zero(), Policy::KspFf, None);
            let expected = ((m + p - 1) as f64) * 3.0e-3;
            assert!((t.makespan - expected).abs() < 1e-12, "p={p} m={m}: {}", t.makespan);
            let bubble = t.bubble_ratio().unwrap();
            let analytic = (p - 1) as f64 / (m + p - 1) as f64;
            assert!((bubble - analytic).abs() < 1e-9, "p={p} m={m}");
        }
    }
}

#[test]
fn zero_latency_1f1b_has_same_makespan_as_gpipe() {
    let placement = [0, 4, 7, 11];
    for m in [1, 3, 8] {
        let g = run(&mut nsfnet(), &schedule(ScheduleKind::Gpipe, &placement, m), LatencyParams::zero(), Policy::Cba, None);
        let f = run(&mut nsfnet(), &schedule(ScheduleKind::OneFOneB, &placement, m), LatencyParams::zero(), Policy::Cba, None);
        assert!((g.makespan - f.makespan).abs() < 1e-12);
    }
}

#[test]
fn tasks_respect_dependencies_and_order() {
    let s = schedule(ScheduleKind::OneFOneB, &[1, 5, 5, 9], 6);
    let t = run(&mut nsfnet(), &s, LatencyParams::default(), Policy::Cba, None);
    let by_consumer = t.transfers_by_consumer();
    for task in &s.tasks {
        let rec = &t.tasks[task.id.0];
        assert!((rec.finish_time - rec.start_time - task.compute_s).abs() < 1e-12);
        if let Some(prev) = task.stage_pred {
            assert!(rec.start_time >= t.tasks[prev.0].finish_time);
        }
        if let Some(pred) = task.message_pred {
            let x = &t.transfers[by_consumer[task.id.0].unwrap()];
            assert_eq!(x.producer, pred);
            assert!(x.issue_time >= t.tasks[pred.0].finish_time);
            assert!(x.complete_time > x.issue_time);
            assert!(rec.start_time >= x.complete_time);
        }
    }
    // Stages 1 and 2 share a DC.
    let intra = t
        .transfers
        .iter()
        .filter(|x| matches!(x.route, TransferRoute::IntraDc))
        .count();
    assert_eq!(intra, 2 * 6);
    assert_eq!(t.cross_dc_requests(), 4 * 6);
    assert_eq!(t.blocking_probability(), 0.0);
}

#[test]
fn single_transfer_time_is_alpha_plus_serialization() {
    let s = schedule(ScheduleKind::Gpipe, &[0, 13], 1);
    let latency = LatencyParams::default();
    let t = run(&mut nsfnet(), &s, latency, Policy::KspFf, None);
    let bits = 8.0 * (1 << 20) as f64;
    for x in &t.transfers {
        let TransferRoute::Optical { links, nodes, block } = &x.route else {
            panic!("expected an optical route");
        };
        assert_eq!(block.width(), 4);
        assert_eq!(x.n_fs, 4);
        let km: f64 = links.iter().map(|&l| Network::nsfnet(SpectrumConfig::default()).unwrap().link(l).length_km).sum();
        let hops = nodes.len() - 1;
        let expected = km * 5.0e-6 + hops as f64 * 1.0e-4 + bits / (4.0 * 7.5e10);
        assert!((x.complete_time - x.issue_time - expected).abs() < 1e-12);
    }
}

#[test]
fn spectrum_is_held_until_completion_and_released() {
    let s = schedule(ScheduleKind::Gpipe, &[0, 6, 13], 3);
    let mut net = nsfnet();
    let t = run(&mut net, &s, LatencyParams::default(), Policy::Cba, None);
    let allocs: Vec<_> = t
        .spectrum_events
        .iter()
        .filter(|e| e.kind == crate::topology::SpectrumEventKind::Allocate)
        .collect();
    assert_eq!(allocs.len(), t.cross_dc_requests());
    for x in &t.transfers {
        let owner = x.owner.unwrap();
        let release = t
            .spectrum_events
            .iter()
            .find(|e| e.owner == owner && e.kind == crate::topology::SpectrumEventKind::Release)
            .unwrap();
        assert!((release.time - (t.start_offset + x.complete_time)).abs() < 1e-12);
    }
    assert_eq!(net.active_owners().count(), 0);
    net.check_invariants().unwrap();
}

#[test]
fn saturated_network_falls_back_after_retries() {
    let s = schedule(ScheduleKind::Gpipe, &[2, 9], 2);
    let mut net = nsfnet();
    for l in 0..net.links().len() {
        let owner = net.next_owner_id();
        net.allocate_spectrum(&[LinkId(l)], SlotBlock::new(0, 79), owner, 1.0e9)
            .unwrap();
    }
    let latency = LatencyParams::default();
    let t = run(&mut net, &s, latency, Policy::SdFf, None);
    assert_eq!(t.blocking_probability(), 1.0);
    assert_eq!(t.blocking_events.len(), t.transfers.len());
    let shortest = crate::rsa::k_shortest_paths(&net, 2, 9, 1).remove(0);
    let bits = 8.0 * (1 << 20) as f64;
    let single = crate::latency::transfer_time(&latency, &shortest, 1, bits, 0.0);
    for (x, b) in t.transfers.iter().zip(&t.blocking_events) {
        assert_eq!(x.route, TransferRoute::Fallback);
        assert_eq!(x.attempts, 6);
        assert_eq!(b.final_outcome, BlockingOutcome::DroppedNever);
        let delay = x.complete_time - x.issue_time;
        // Five 1 ms backoffs, then the penalised single-slot transfer.
        assert!(delay >= 5.0e-3 + 3.0 * single - 1e-12, "{delay}");
    }
}

#[test]
fn retries_shrink_the_request() {
    // Leave exactly two free slots on every link: a 4-slot request blocks
    // twice, then fits with two.
    let s = schedule(ScheduleKind::Gpipe, &[2, 9], 1);
    let mut net = nsfnet();
    for l in 0..net.links().len() {
        let owner = net.next_owner_id();
        net.allocate_spectrum(&[LinkId(l)], SlotBlock::new(2, 79), owner, 1.0e9)
            .unwrap();
    }
    let t = run(&mut net, &s, LatencyParams::default(), Policy::KspFf, None);
    for x in &t.transfers {
        assert!(x.first_attempt_blocked);
        assert_eq!(x.attempts, 3);
        assert_eq!(x.n_fs, 2);
        assert_eq!(x.first_fs, 4);
    }
    assert!(t
        .blocking_events
        .iter()
        .all(|b| b.final_outcome == BlockingOutcome::EventuallySent && b.attempts == 3));
}

#[test]
fn plan_labels_change_requested_width() {
    let s = schedule(ScheduleKind::Gpipe, &[0, 13], 1);
    let mut plan = RequestPlan::uniform(s.tasks.len());
    plan.boost_factor = 2.0;
    let fwd = s.order[1][0];
    let bwd = s.order[0][1];
    plan.labels[fwd.0].cb = true;
    plan.labels[bwd.0].blocked = true;
    let t = run(&mut nsfnet(), &s, LatencyParams::default(), Policy::Cba, Some(plan));
    let by_consumer = t.transfers_by_consumer();
    assert_eq!(t.transfers[by_consumer[fwd.0].unwrap()].n_fs, 8);
    assert_eq!(t.transfers[by_consumer[bwd.0].unwrap()].n_fs, 2);
}

#[test]
fn egress_queue_delays_back_to_back_sends() {
    // Stage 0 sends F0 then F1 one ms apart; a slow slot rate keeps the
    // egress busy so the second transfer waits for the first.
    let latency = LatencyParams {
        fs_rate_bps: 1.0e9,
        ..LatencyParams::default()
    };
    let s = schedule(ScheduleKind::Gpipe, &[0, 13], 2);
    let t = run(&mut nsfnet(), &s, latency, Policy::KspFf, None);
    let fwd: Vec<_> = t.transfers.iter().filter(|x| x.src_stage == 0).collect();
    let serialize = 8.0 * (1 << 20) as f64 / (4.0 * 1.0e9);
    let d0 = fwd[0].complete_time - fwd[0].issue_time;
    let d1 = fwd[1].complete_time - fwd[1].issue_time;
    let wait = fwd[0].issue_time + serialize - fwd[1].issue_time;
    assert!(wait > 0.0);
    assert!((d1 - d0 - wait).abs() < 1e-9, "{d0} {d1} {wait}");
}

#[test]
fn identical_inputs_give_identical_timelines() {
    let s = schedule(ScheduleKind::OneFOneB, &[0, 3, 8, 12], 8);
    let make = || {
        let mut net = nsfnet();
        net.set_background(crate::topology::BackgroundTrafficModel::loaded(7)).unwrap();
        net.advance(5.0);
        net.drain_events();
        run(&mut net, &s, LatencyParams::default(), Policy::Cba, None)
    };
    assert_eq!(make(), make());
}

#[test]
fn plan_size_mismatch_is_rejected() {
    let s = schedule(ScheduleKind::Gpipe, &[0, 1], 2);
    let latency = LatencyParams::default();
    let mut net = nsfnet();
    let mut cache = CandidateCache::new(RsaParams::default(), latency);
    let mut egress = EgressState::new(2);
    let plan = RequestPlan::uniform(3);
    let mut ctx = IterationContext {
        net: &mut net,
        cache: &mut cache,
        latency: &latency,
        egress: &mut egress,
        params: &EngineParams::default(),
        policy: Policy::Cba,
        plan: &plan,
        iteration: 0,
    };
    assert!(matches!(
        simulate_iteration(&mut ctx, &s, 1.0),
        Err(Error::TimelineMismatch(_))
    ));
}
