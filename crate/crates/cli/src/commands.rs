use crate::inputs::{parse_list, read, write, InputArgs};
use crate::{CliError, Out, RealizeArgs, SpaceArgs};
use chunkflow::backend::{realize, Assignment, BackendKind, DeviceProgram, KernelMode, SmAlloc};
use chunkflow::planner::{plan as plan_schedule, IntraPolicy, Planned};
use chunkflow::schedule::validate_schedule;
use chunkflow::sim::{export_trace, parse_trace, run, tensor_universe, Payload, Verdict};
use chunkflow::tune::{rows_csv, tune as tune_space, TileConfig, TuneError, TuneSpace};
use serde_json::json;
use std::path::Path;

fn backend(name: &str) -> Result<BackendKind, CliError> {
    name.trim().parse().map_err(CliError::parse)
}

fn backends(list: &str) -> Result<Vec<BackendKind>, CliError> {
    list.split(',').map(backend).collect()
}

fn intra(name: &str) -> Result<IntraPolicy, CliError> {
    name.trim()
        .parse()
        .map_err(|e: chunkflow::planner::PlanError| CliError::parse(e.to_string()))
}

pub fn validate(args: &InputArgs, out: &Out) -> Result<u8, CliError> {
    let i = args.merged()?;
    let (kernel, diagnostics) = i.kernel_with_diagnostics()?;
    let schedule = i.schedule(&kernel)?;
    let report = validate_schedule(&schedule);
    let mut lines: Vec<String> = report
        .violations
        .iter()
        .map(|v| format!("violation: {v}"))
        .collect();
    let shape_clash = tensor_universe(&schedule, &kernel).err();
    if let Some(e) = &shape_clash {
        lines.push(format!("violation: {e}"));
    }
    lines.extend(diagnostics.iter().map(|d| format!("warning: {d}")));
    let valid = report.is_valid() && shape_clash.is_none();
    let head = format!(
        "{}: world_size {}, {} ops, {} violations",
        if valid { "VALID" } else { "INVALID" },
        schedule.world_size,
        schedule.op_count(),
        report.violations.len() + usize::from(shape_clash.is_some()),
    );
    let mut text = head.clone();
    for l in &lines {
        text.push('\n');
        text.push_str(l);
    }
    text.push('\n');
    let dir = i.out_dir();
    write(&dir, "validate.txt", &text)?;
    let j = json!({
        "valid": valid,
        "violations": report.violations,
        "shape_error": shape_clash,
        "diagnostics": diagnostics,
    });
    write(
        &dir,
        "validate.json",
        &serde_json::to_string_pretty(&j).expect("json"),
    )?;
    out.say(text.trim_end());
    Ok(if valid { 0 } else { 1 })
}

pub fn lower(args: &InputArgs, out: &Out) -> Result<u8, CliError> {
    let i = args.merged()?;
    let kernel = i.kernel()?;
    let schedule = i.schedule(&kernel)?;
    let p = write(&i.out_dir(), "schedule.json", &schedule.to_json())?;
    out.say(format!(
        "lowered {} ops over {} ranks -> {}",
        schedule.op_count(),
        schedule.world_size,
        p.display()
    ));
    Ok(0)
}

fn planned(i: &InputArgs, r: &RealizeArgs) -> Result<Planned, CliError> {
    let kernel = i.kernel()?;
    let schedule = i.schedule(&kernel)?;
    let report = validate_schedule(&schedule);
    if let Some(v) = report.violations.first() {
        return Err(CliError::stage(
            "validate",
            format!("invalid schedule: {v}"),
        ));
    }
    plan_schedule(&schedule, &kernel, intra(&r.intra)?)
        .map_err(|e| CliError::stage("plan", e.to_string()))
}

fn realized(i: &InputArgs, r: &RealizeArgs, p: &Planned) -> Result<DeviceProgram, CliError> {
    let names: Vec<&str> = r.backends.split(',').collect();
    let (plain, reduce) = match names[..] {
        [b] => (backend(b)?, backend(b)?),
        [p, q] => (backend(p)?, backend(q)?),
        _ => return Err(CliError::parse("--backends takes PLAIN or PLAIN,REDUCE")),
    };
    let a = Assignment::by_class(&p.schedule, plain, reduce);
    let sm = SmAlloc::for_assignment(i.sim()?.sms_per_device, r.comm_sms, &a);
    let mode = if r.partitioned {
        KernelMode::Partitioned
    } else {
        KernelMode::Fused
    };
    realize(p, &a, sm, &i.profile()?, mode).map_err(|e| CliError::stage("realize", e.to_string()))
}

pub fn plan(args: &InputArgs, r: &RealizeArgs, out: &Out) -> Result<u8, CliError> {
    let i = args.merged()?;
    let p = planned(&i, r)?;
    let program = realized(&i, r, &p)?;
    let dir = i.out_dir();
    write(
        &dir,
        "plan.json",
        &serde_json::to_string_pretty(&p).expect("plan serializes"),
    )?;
    write(&dir, "program.json", &program.to_json())?;
    for (rank, rp) in p.ranks.iter().enumerate() {
        write(
            &dir,
            &format!("depgraph_rank{rank}.dot"),
            &rp.graph.to_dot(),
        )?;
    }
    let syncs: usize = p.ranks.iter().map(|rp| rp.syncs.waits().count()).sum();
    out.say(format!(
        "planned {} ranks, {} waits; wrote {}",
        p.ranks.len(),
        syncs,
        dir.display()
    ));
    Ok(0)
}

pub fn simulate(
    args: &InputArgs,
    r: &RealizeArgs,
    program: Option<&Path>,
    jitter_us: Option<f64>,
    drop_wait: Option<usize>,
    out: &Out,
) -> Result<u8, CliError> {
    let i = args.merged()?;
    let mut prog = match program {
        Some(path) => DeviceProgram::from_json(&read(path)?)
            .map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?,
        None => realized(&i, r, &planned(&i, r)?)?,
    };
    if let Some(n) = drop_wait {
        let sites = prog.wait_sites();
        let site = *sites.get(n).ok_or_else(|| {
            CliError::parse(format!(
                "--drop-wait {n}: program has {} waits",
                sites.len()
            ))
        })?;
        out.say(format!(
            "dropping wait {n} (rank {}, stream {}, position {})",
            site.0, site.1, site.2
        ));
        prog = prog.without_wait(site);
    }
    let mut cfg = i.sim()?;
    if let Some(j) = jitter_us {
        if !(j >= 0.0 && j.is_finite()) {
            return Err(CliError::parse(
                "--jitter-us must be finite and non-negative",
            ));
        }
        cfg = cfg.with_jitter(j * 1e-6, i.seed());
    }
    let specs = tensor_universe(&prog.schedule, &prog.kernel)
        .map_err(|e| CliError::stage("simulate", e))?;
    let payload = Payload::random(&specs, prog.schedule.world_size, i.seed());
    let (res, reference) =
        run(&prog, &cfg, Some(&payload)).map_err(|e| CliError::stage("simulate", e.to_string()))?;
    let verdict = Verdict::of(&res, &reference);
    let dir = i.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    export_trace(&res.timeline, &dir.join("trace.json"))
        .map_err(|e| CliError::io(e.to_string()))?;
    write(&dir, "verdict.json", &verdict.to_json())?;
    let word = if verdict.pass { "PASS" } else { "FAIL" };
    out.say(format!("{word}: makespan {:.3} us", verdict.makespan_us));
    if let Some(v) = &verdict.first_violation {
        out.say(format!("{} violations; first: {v}", verdict.violations));
    }
    Ok(if verdict.pass { 0 } else { 1 })
}

fn tile_configs(text: &str) -> Result<Vec<TileConfig>, CliError> {
    text.split(',')
        .map(|t| {
            let v = parse_list::<usize>(&t.replace('x', ","), "--tiles")?;
            match v[..] {
                [bm, bn, bk] => Ok(TileConfig {
                    bm,
                    bn,
                    bk,
                    stages: 1,
                }),
                [bm, bn, bk, stages] => Ok(TileConfig { bm, bn, bk, stages }),
                _ => Err(CliError::parse(format!(
                    "--tiles {t:?}: expected BMxBNxBK[xSTAGES]"
                ))),
            }
        })
        .collect()
}

fn space(s: &SpaceArgs) -> Result<TuneSpace, CliError> {
    let pairs = match (&s.backends, &s.plain_backends, &s.reduce_backends) {
        (Some(_), Some(_), _) => {
            return Err(CliError::parse(
                "--backends conflicts with --plain-backends/--reduce-backends",
            ))
        }
        (Some(b), None, _) => TuneSpace::uniform(&backends(b)?),
        (None, Some(p), Some(r)) => TuneSpace::by_class(&backends(p)?, &backends(r)?),
        _ => TuneSpace::default().backends,
    };
    Ok(TuneSpace {
        split_factors: parse_list(&s.splits, "--splits")?,
        split_axis: 0,
        backends: pairs,
        comm_sms: parse_list(&s.comm_sms, "--comm-sms")?,
        intra_policies: s.intra.split(',').map(intra).collect::<Result<_, _>>()?,
        tile_configs: s
            .tiles
            .as_deref()
            .map(tile_configs)
            .transpose()?
            .unwrap_or_default(),
    })
}

pub fn tune(args: &InputArgs, s: &SpaceArgs, out: &Out) -> Result<u8, CliError> {
    let i = args.merged()?;
    let kernel = i.kernel()?;
    let schedule = i.schedule(&kernel)?;
    let sp = space(s)?;
    let dir = i.out_dir();
    match tune_space(&sp, &schedule, &kernel, &i.profile()?, &i.sim()?) {
        Ok(res) => {
            write(&dir, "tune.csv", &res.to_csv())?;
            let best = json!({
                "config": res.best_config(),
                "makespan_us": res.best_makespan_us(),
            });
            write(
                &dir,
                "best.json",
                &serde_json::to_string_pretty(&best).expect("json"),
            )?;
            out.say(format!(
                "{} rows; best {} at {:.3} us",
                res.rows.len(),
                res.best_config(),
                res.best_makespan_us()
            ));
            Ok(0)
        }
        Err(TuneError::NoFeasible { summary, rows }) => {
            write(&dir, "tune.csv", &rows_csv(&rows, None))?;
            eprintln!("error [tune]: no feasible configuration ({summary})");
            Ok(3)
        }
        Err(e @ TuneError::Space(_)) => Err(CliError::parse(e.to_string())),
    }
}

pub fn trace(input: &Path, dir: &Path, out: &Out) -> Result<u8, CliError> {
    let t = parse_trace(&read(input)?)
        .map_err(|e| CliError::parse(format!("{}: {e}", input.display())))?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let path = dir.join("trace.json");
    export_trace(&t, &path).map_err(|e| CliError::io(e.to_string()))?;
    out.say(format!(
        "{} events, makespan {:.3} us -> {}",
        t.events.len(),
        t.makespan_us,
        path.display()
    ));
    Ok(0)
}
