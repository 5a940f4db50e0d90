//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! A criterion that cannot hold under the calibrated profile is reported as
//! FAIL with a `known:` note and does not change the exit status; any other
//! failure does.

use chunkflow::backend::{
    effective_bandwidth, realize, Assignment, BackendKind, BackendProfile, DeviceProgram,
    KernelMode, SmAlloc,
};
use chunkflow::kernel::{default_tile_order, sm_utilization, TileProgram};
use chunkflow::lowering::{lower_partition_ir, LoweringPath, Mesh, PartitionIR, Placement};
use chunkflow::planner::{plan, IntraPolicy};
use chunkflow::schedule::CommSchedule;
use chunkflow::sim::{
    compare_overlap_modes, reference_execute, run, simulate, tensor_universe, trace_json,
    BufferState, Payload, SimConfig, Verdict,
};
use chunkflow::templates::Template;
use chunkflow::tune::{tune, TuneSpace};
use chunkflow::workload::{ag_gemm, gemm_ar, template_workload, GemmShape, Workload};
use chunkflow::TensorSpec;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
    /// Why the criterion cannot hold as written, when that is the case.
    known: Option<String>,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
            known: None,
        }
    }
}

fn profile() -> BackendProfile {
    BackendProfile::h100()
}

/// Plan and realize `s` under `a`; `None` if the assignment cannot be realized.
fn program(
    s: &CommSchedule,
    k: &TileProgram,
    a: &Assignment,
    mode: KernelMode,
) -> Option<DeviceProgram> {
    let pl = plan(s, k, IntraPolicy::RowMajor).ok()?;
    realize(
        &pl,
        a,
        SmAlloc::for_assignment(132, 16, a),
        &profile(),
        mode,
    )
    .ok()
}

/// Class-level assignments (plain x reduce) the profile can realize for `s`.
fn legal_assignments(s: &CommSchedule) -> Vec<(String, Assignment)> {
    let p = profile();
    let mut out = Vec::new();
    for plain in BackendKind::ALL {
        for reduce in BackendKind::ALL {
            let a = Assignment::by_class(s, plain, reduce);
            if a.illegal_ops(s, &p).is_empty() && !out.iter().any(|(_, b)| *b == a) {
                out.push((format!("{plain}/{reduce}"), a));
            }
        }
    }
    out
}

fn par<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let n = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    let chunk = items.len().div_ceil(n).max(1);
    std::thread::scope(|sc| {
        let hs: Vec<_> = items
            .chunks(chunk)
            .map(|c| sc.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        hs.into_iter()
            .flat_map(|h| h.join().expect("worker"))
            .collect()
    })
}

fn small(t: Template, w: usize) -> Workload {
    template_workload(t, w, GemmShape::new(128, 64, 32).tiles(16, 16, 16), 1).expect("fixture")
}

fn oracle_suite() -> Outcome {
    let t0 = Instant::now();
    let mut cases = Vec::new();
    for t in Template::ALL {
        for w in [1, 2, 4, 8] {
            let wl = small(t, w);
            for (name, a) in legal_assignments(&wl.schedule) {
                cases.push((t, w, name, wl.clone(), a));
            }
        }
    }
    let results = par(&cases, |(t, w, name, wl, a)| {
        let Some(prog) = program(&wl.schedule, &wl.kernel, a, KernelMode::Fused) else {
            return Err(format!("{t} W={w} {name}: realize failed"));
        };
        let specs = tensor_universe(&wl.schedule, &wl.kernel).expect("shapes agree");
        for seed in 0..10 {
            // payload 0 runs unjittered, the rest with timing noise
            let cfg = if seed == 0 {
                SimConfig::default()
            } else {
                SimConfig::default().with_jitter(2e-6, seed)
            };
            let payload = Payload::random(&specs, *w, seed);
            let (res, reference) = run(&prog, &cfg, Some(&payload)).map_err(|e| e.to_string())?;
            if !res.violations.is_empty() || !res.state.same_data(&reference.state) {
                return Err(format!(
                    "{t} W={w} {name} payload {seed}: {} violations",
                    res.violations.len()
                ));
            }
        }
        Ok(())
    });
    let secs = t0.elapsed().as_secs_f64();
    let failures: Vec<String> = results.into_iter().filter_map(Result::err).collect();
    Outcome::new(
        failures.is_empty() && secs < 120.0,
        format!(
            "{} template/W/assignment cases x 10 payloads, {} failed, {secs:.1}s{}",
            cases.len(),
            failures.len(),
            failures
                .first()
                .map(|f| format!("; first: {f}"))
                .unwrap_or_default()
        ),
    )
}

fn mutation_fixtures() -> Vec<(String, DeviceProgram)> {
    use BackendKind::*;
    let fx = |name: &str, wl: Workload, a: fn(&CommSchedule) -> Assignment, mode| {
        let prog =
            program(&wl.schedule, &wl.kernel, &a(&wl.schedule), mode).expect("fixture realizes");
        (name.to_string(), prog)
    };
    let g = GemmShape::new(64, 32, 16).tiles(16, 16, 16);
    vec![
        fx(
            "ring ag-gemm W=4",
            template_workload(Template::RingAllgather, 4, g, 1).unwrap(),
            |s| Assignment::uniform(s, CopyEngine),
            KernelMode::Fused,
        ),
        fx(
            "1d-swizzle ag-gemm W=4 s=2",
            template_workload(Template::Allgather1dSwizzle, 4, g, 2).unwrap(),
            |s| Assignment::uniform(s, TmaSpecialized),
            KernelMode::Fused,
        ),
        fx(
            "2d-swizzle ag-gemm W=4",
            template_workload(Template::Allgather2dSwizzle, 4, g, 1).unwrap(),
            |s| Assignment::uniform(s, LdstColocated),
            KernelMode::Fused,
        ),
        fx(
            "gemm-rs W=4",
            template_workload(Template::ReduceScatter, 4, g, 1).unwrap(),
            |s| Assignment::uniform(s, LdstSpecialized),
            KernelMode::Fused,
        ),
        fx(
            "gemm-ar W=2",
            template_workload(Template::PartitionAllreduce, 2, g, 1).unwrap(),
            |s| Assignment::by_class(s, TmaSpecialized, LdstSpecialized),
            KernelMode::Fused,
        ),
        fx(
            "ring ag-gemm W=2 partitioned",
            template_workload(Template::RingAllgather, 2, g, 2).unwrap(),
            |s| Assignment::uniform(s, CopyEngine),
            KernelMode::Partitioned,
        ),
    ]
}

fn jittered(seed: u64) -> SimConfig {
    SimConfig::default().with_jitter(10e-6, seed)
}

/// Timing noise for one seed: short and whole-run delay bounds, each on
/// everything or on tiles alone. A late tile can hide behind a long chain
/// of jittered launches, and a short bound cannot outlast the fixed
/// launch overheads between kernels.
fn adversarial(seed: u64, makespan_s: f64) -> [SimConfig; 4] {
    let long = (4.0 * makespan_s).max(10e-6);
    let cfg = SimConfig::default();
    [
        cfg.clone().with_jitter(10e-6, seed),
        cfg.clone().with_tile_jitter(10e-6, seed),
        cfg.clone().with_jitter(long, seed),
        cfg.with_tile_jitter(long, seed),
    ]
}

fn mutation_suite() -> Outcome {
    let fixtures = mutation_fixtures();
    let mut waits = 0;
    let mut survivors = Vec::new();
    let mut false_alarms = Vec::new();
    for (name, prog) in &fixtures {
        let reference = reference_execute(&prog.schedule, &prog.kernel, None).expect("oracle");
        let makespan = simulate(prog, &SimConfig::default(), &reference)
            .expect("sim")
            .makespan_us()
            * 1e-6;
        let clean = par(&(0..100).collect::<Vec<u64>>(), |&seed| {
            adversarial(seed, makespan)
                .iter()
                .map(|cfg| {
                    simulate(prog, cfg, &reference)
                        .expect("sim")
                        .violations
                        .len()
                })
                .sum::<usize>()
        });
        if clean.iter().any(|&v| v > 0) {
            false_alarms.push(name.clone());
        }
        let sites = prog.wait_sites();
        waits += sites.len();
        let caught = par(&sites, |&site| {
            let bad = prog.without_wait(site);
            (0..100).any(|seed| {
                adversarial(seed, makespan).iter().any(|cfg| {
                    !simulate(&bad, cfg, &reference)
                        .expect("sim")
                        .violations
                        .is_empty()
                })
            })
        });
        for (site, c) in sites.iter().zip(caught) {
            if !c {
                survivors.push(format!("{name} wait {site:?}"));
            }
        }
    }
    Outcome::new(
        fixtures.len() >= 5 && survivors.is_empty() && false_alarms.is_empty() && waits > 0,
        format!(
            "{} fixtures, {waits} waits, {} killed, {} survived, {} fixtures with violations at full sync{}",
            fixtures.len(),
            waits - survivors.len(),
            survivors.len(),
            false_alarms.len(),
            survivors.first().map(|s| format!("; first survivor: {s}")).unwrap_or_default()
        ),
    )
}

fn wave_staircase() -> Outcome {
    // (M, N) giving 1024, 132 and 64 tiles of 128x128
    let cases = [
        ((4096, 4096), 1024),
        ((1536, 1408), 132),
        ((1024, 1024), 64),
    ];
    let stated = [0.9697, 1.0, 0.4848];
    let mut ok = true;
    let mut got = Vec::new();
    for (((m, n), tiles), s) in cases.into_iter().zip(stated) {
        let p = TileProgram::gemm(m, n, 512, 128, 128, 64);
        let u = sm_utilization(&p, &default_tile_order(&p));
        let waves = (tiles + 131) / 132;
        let closed = tiles as f64 / (waves * 132) as f64;
        ok &= p.tile_count() == tiles && (u - closed).abs() <= 1e-9 && (u - s).abs() <= 5e-5;
        got.push(format!("{tiles} tiles -> {u:.10}"));
    }
    Outcome::new(ok, got.join(", "))
}

fn fused_vs_partitioned() -> Outcome {
    let cfg = SimConfig::default();
    let mut rows = Vec::new();
    for s in [1, 2, 4, 8] {
        let wl = ag_gemm(2, GemmShape::new(2048, 1024, 4096), s).expect("fixture");
        let a = Assignment::uniform(&wl.schedule, BackendKind::CopyEngine);
        let pl = wl.plan(IntraPolicy::RowMajor).expect("plan");
        let per_split = pl.kernel.tile_count().div_ceil(s * 2);
        let rep = compare_overlap_modes(
            &pl,
            &a,
            SmAlloc {
                compute: 132,
                comm: 0,
            },
            &profile(),
            &cfg,
        )
        .expect("sim");
        rows.push((
            s,
            rep.fused_makespan_us,
            rep.partitioned_makespan_us,
            per_split,
        ));
    }
    let fused_wins = rows.iter().filter(|r| r.0 >= 2).all(|r| r.1 < r.2);
    let gaps: Vec<f64> = rows.iter().map(|r| r.2 - r.1).collect();
    let growing = gaps.windows(2).all(|g| g[1] > g[0]);
    let small_splits = rows.iter().all(|r| r.3 < 3 * 132);
    Outcome::new(
        fused_wins && growing && small_splits && cfg.launch_overhead >= 2e-6,
        rows.iter()
            .map(|r| format!("s={} fused {:.1} / partitioned {:.1} us", r.0, r.1, r.2))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

fn interior_split() -> Outcome {
    let wl = gemm_ar(8, GemmShape::new(8192, 8192, 8192), 1).expect("fixture");
    let space = TuneSpace {
        split_factors: (1..=16).collect(),
        backends: vec![(BackendKind::CopyEngine, BackendKind::LdstSpecialized)],
        comm_sms: vec![16],
        ..TuneSpace::default()
    };
    let res = match tune(
        &space,
        &wl.schedule,
        &wl.kernel,
        &profile(),
        &SimConfig::default(),
    ) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let curve: Vec<(usize, f64)> = res
        .rows
        .iter()
        .filter_map(|r| r.makespan_us.map(|m| (r.config.split, m)))
        .collect();
    let best = res.best_config().split;
    let down = curve.windows(2).any(|w| w[1].1 < w[0].1);
    let up = curve.windows(2).any(|w| w[1].1 > w[0].1);
    Outcome::new(
        best != 1 && best != 16 && down && up,
        format!(
            "best split {best}; curve {}",
            curve
                .iter()
                .map(|(s, m)| format!("{s}:{m:.1}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    )
}

fn backend_invariance() -> Outcome {
    // final buffers, with payloads, on a scaled copy of the schedule family
    let wl = ag_gemm(8, GemmShape::new(1024, 256, 512), 1).expect("fixture");
    let specs = tensor_universe(&wl.schedule, &wl.kernel).expect("shapes");
    let payload = Payload::random(&specs, 8, 11);
    let mut states: Vec<(String, BufferState)> = Vec::new();
    for (name, a) in legal_assignments(&wl.schedule) {
        let prog = program(&wl.schedule, &wl.kernel, &a, KernelMode::Fused).expect("realize");
        let (res, _) = run(&prog, &SimConfig::default(), Some(&payload)).expect("sim");
        states.push((name, res.state));
    }
    let same = states.iter().all(|(_, s)| s.same_data(&states[0].1));

    // makespan spread on the communication-heavy fixture
    let big = ag_gemm(8, GemmShape::new(8192, 1024, 4096), 1).expect("fixture");
    let reference = reference_execute(&big.schedule, &big.kernel, None).expect("oracle");
    let mut spans = Vec::new();
    let mut clean = true;
    for b in BackendKind::ALL {
        let a = Assignment::uniform(&big.schedule, b);
        let prog = program(&big.schedule, &big.kernel, &a, KernelMode::Fused).expect("realize");
        let res = simulate(&prog, &SimConfig::default(), &reference).expect("sim");
        clean &= res.violations.is_empty();
        spans.push((b, res.makespan_us()));
    }
    let lo = spans.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let hi = spans.iter().map(|s| s.1).fold(0.0, f64::max);
    let spread = (hi - lo) / lo;
    Outcome::new(
        same && clean && spread >= 0.10,
        format!(
            "{} assignments bit-equal: {same}; spread {:.1}% ({})",
            states.len(),
            spread * 100.0,
            spans
                .iter()
                .map(|(b, m)| format!("{b} {m:.1}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn cost_points() -> Outcome {
    let p = profile();
    let mib = effective_bandwidth(1048576.0, BackendKind::CopyEngine, 0, &p);
    let mb = effective_bandwidth(1e6, BackendKind::CopyEngine, 0, &p);
    let asym = effective_bandwidth(1e15, BackendKind::CopyEngine, 0, &p);
    let tma16 = p.get(BackendKind::TmaSpecialized).stream_bw(16);
    let tma_big = effective_bandwidth(1e15, BackendKind::TmaSpecialized, 16, &p);
    let within = |x: f64, want: f64| ((x - want) / want).abs() <= 1e-3;
    let rest = within(asym, 400.0) && tma16 == 300.0 && within(tma_big, 300.0);
    let mut o = Outcome::new(
        within(mib, 200.0) && rest,
        format!(
            "copy_engine 1 MiB {mib:.3} GB/s (1 MB {mb:.3}), asymptote {asym:.3}, tma_specialized@16 SMs {tma16:.1} (large transfer {tma_big:.3})"
        ),
    );
    if !o.pass && rest && within(mb, 200.0) {
        o.known = Some(
            "200 GB/s is the half-bandwidth point L*bw = 2.5us*400GB/s = 1e6 bytes (1 MB); at 2^20 bytes the same formula gives 204.8".into(),
        );
    }
    o
}

fn determinism() -> Outcome {
    let once = || {
        let mut out = Vec::new();
        for (name, prog) in mutation_fixtures() {
            let specs = tensor_universe(&prog.schedule, &prog.kernel).expect("shapes");
            let payload = Payload::random(&specs, prog.schedule.world_size, 5);
            let (res, reference) = run(&prog, &jittered(7), Some(&payload)).expect("sim");
            out.push(format!(
                "{name}\n{}\n{}",
                trace_json(&res.timeline),
                Verdict::of(&res, &reference).to_json()
            ));
        }
        let wl = gemm_ar(4, GemmShape::new(1024, 1024, 512), 1).expect("fixture");
        let space = TuneSpace {
            split_factors: vec![1, 2, 4],
            ..TuneSpace::default()
        };
        out.push(
            tune(
                &space,
                &wl.schedule,
                &wl.kernel,
                &profile(),
                &SimConfig::default(),
            )
            .expect("tune")
            .to_csv(),
        );
        out
    };
    let runs = [once(), once(), once()];
    let same = runs[1] == runs[0] && runs[2] == runs[0];
    let bytes: usize = runs[0].iter().map(String::len).sum();
    Outcome::new(
        same,
        format!(
            "{} artifacts, {bytes} bytes per run, 3 runs identical: {same}",
            runs[0].len()
        ),
    )
}

fn lowering_equivalence() -> Outcome {
    let sharded = || Placement::Sharded {
        axis: "m".into(),
        mesh_axis: "tp".into(),
    };
    let partial = || Placement::PartialSum {
        mesh_axis: "tp".into(),
    };
    let mut checked = 0;
    let mut bad = Vec::new();
    for w in [2, 4, 8] {
        for (from, to) in [
            (sharded(), Placement::Replicated),
            (partial(), Placement::Replicated),
            (partial(), sharded()),
        ] {
            let ir = PartitionIR {
                mesh: Mesh::line("tp", w),
                tensors: vec![TensorSpec::new("C", vec![64 * w, 32], 4)],
                axis_info: [("C".to_string(), vec!["m".to_string(), "n".to_string()])].into(),
                placement: [("C".to_string(), from.clone())].into(),
                required: [("C".to_string(), to.clone())].into(),
            };
            let states: Vec<BufferState> = [LoweringPath::Direct, LoweringPath::Template]
                .into_iter()
                .map(|path| {
                    let s = lower_partition_ir(&ir, path).expect("lowers");
                    let k = TileProgram::empty();
                    let a = Assignment::uniform(&s, BackendKind::LdstSpecialized);
                    let prog = program(&s, &k, &a, KernelMode::Fused).expect("realize");
                    let payload = Payload::random(&tensor_universe(&s, &k).expect("shapes"), w, 21);
                    let (res, reference) =
                        run(&prog, &SimConfig::default(), Some(&payload)).expect("sim");
                    assert!(res.state.same_data(&reference.state));
                    res.state
                })
                .collect();
            checked += 1;
            if !states[0].same_data(&states[1]) {
                bad.push(format!("W={w} {from} -> {to}"));
            }
        }
    }
    Outcome::new(
        bad.is_empty(),
        format!(
            "{checked} placement changes over W in {{2,4,8}}, {} differ",
            bad.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle equivalence suite", oracle_suite),
        ("synchronization minimality mutations", mutation_suite),
        ("wave quantization staircase", wave_staircase),
        (
            "fused beats partitioned, gap grows with split",
            fused_vs_partitioned,
        ),
        ("interior split-factor optimum", interior_split),
        ("backend semantic invariance and spread", backend_invariance),
        ("cost-model point checks", cost_points),
        ("determinism over 3 runs", determinism),
        ("lowering path equivalence", lowering_equivalence),
    ];
    let mut unexpected = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = f();
        let word = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {}: {word} {name} [{:.1}s] {}",
            i + 1,
            t0.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            match &o.known {
                Some(why) => println!("    known: {why}"),
                None => unexpected += 1,
            }
        }
    }
    if unexpected > 0 {
        println!("{unexpected} criteria failed");
        std::process::exit(1);
    }
}
