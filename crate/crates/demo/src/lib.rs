//! Browser demo: three views over the simulator, each returning JSON for
//! the page in `www/` to draw.

use chunkflow::backend::{Assignment, BackendKind, BackendProfile, KernelMode};
use chunkflow::kernel::wave_utilization;
use chunkflow::sim::{run, SimConfig, Verdict};
use chunkflow::templates::Template;
use chunkflow::tune::{tune, TuneSpace};
use chunkflow::workload::{template_workload, GemmShape};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct Problem {
    pub template: Template,
    pub world_size: usize,
    pub shape: GemmShape,
    pub plain: BackendKind,
    pub reduce: BackendKind,
    pub comm_sms: usize,
}

impl Problem {
    #[allow(clippy::too_many_arguments)]
    pub fn parse(
        template: &str,
        world_size: usize,
        m: usize,
        n: usize,
        k: usize,
        plain: &str,
        reduce: &str,
        comm_sms: usize,
    ) -> Result<Self, String> {
        Ok(Problem {
            template: template.parse()?,
            world_size,
            shape: GemmShape::new(m, n, k),
            plain: plain.parse()?,
            reduce: reduce.parse()?,
            comm_sms,
        })
    }
}

#[derive(Debug, Serialize)]
pub struct SplitPoint {
    pub split: usize,
    pub makespan_us: Option<f64>,
    /// Why no makespan: pruned or infeasible.
    pub note: String,
}

/// Makespan for each split factor in `1..=max_split`.
pub fn split_curve(p: &Problem, max_split: usize) -> Result<Vec<SplitPoint>, String> {
    let w = template_workload(p.template, p.world_size, p.shape, 1).map_err(|e| e.to_string())?;
    let space = TuneSpace {
        split_factors: (1..=max_split.max(1)).collect(),
        backends: vec![(p.plain, p.reduce)],
        comm_sms: vec![p.comm_sms],
        ..TuneSpace::default()
    };
    let rows = match tune(
        &space,
        &w.schedule,
        &w.kernel,
        &BackendProfile::h100(),
        &SimConfig::default(),
    ) {
        Ok(r) => r.rows,
        Err(chunkflow::tune::TuneError::NoFeasible { rows, .. }) => rows,
        Err(e) => return Err(e.to_string()),
    };
    Ok(rows
        .into_iter()
        .map(|r| SplitPoint {
            split: r.config.split,
            makespan_us: r.makespan_us,
            note: match r.pruned_reason {
                Some(reason) => format!("{reason}: {}", r.detail),
                None => r.detail,
            },
        })
        .collect())
}

#[derive(Debug, Serialize)]
pub struct WavePoint {
    pub m: usize,
    pub tiles: usize,
    pub utilization: f64,
}

/// SM utilization of a `m x n` GEMM with `bm x bn` tiles as `m` grows.
pub fn wave_curve(n: usize, bm: usize, bn: usize, sms: usize, max_m: usize) -> Vec<WavePoint> {
    let cols = n.div_ceil(bn.max(1));
    (1..=max_m / bm.max(1))
        .map(|rows| {
            let tiles = rows * cols;
            WavePoint {
                m: rows * bm,
                tiles,
                utilization: wave_utilization(tiles, sms),
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct TimelineView {
    pub verdict: Verdict,
    pub events: Vec<chunkflow::sim::TimelineEvent>,
}

/// One simulated run, for drawing a per-resource timeline.
pub fn timeline(
    p: &Problem,
    split: usize,
    partitioned: bool,
    jitter_us: f64,
    seed: u64,
) -> Result<TimelineView, String> {
    let w =
        template_workload(p.template, p.world_size, p.shape, split).map_err(|e| e.to_string())?;
    let a = Assignment::by_class(&w.schedule, p.plain, p.reduce);
    let mode = if partitioned {
        KernelMode::Partitioned
    } else {
        KernelMode::Fused
    };
    let mut cfg = SimConfig::default();
    let prog = w
        .program(
            &a,
            cfg.sms_per_device,
            p.comm_sms,
            &BackendProfile::h100(),
            mode,
        )
        .map_err(|e| e.to_string())?;
    if jitter_us > 0.0 {
        cfg = cfg.with_jitter(jitter_us * 1e-6, seed);
    }
    let (res, reference) = run(&prog, &cfg, None).map_err(|e| e.to_string())?;
    Ok(TimelineView {
        verdict: Verdict::of(&res, &reference),
        events: res.timeline.events,
    })
}

fn to_js<T: Serialize>(v: Result<T, String>) -> Result<String, JsError> {
    let v = v.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = splitCurve)]
#[allow(clippy::too_many_arguments)]
pub fn split_curve_js(
    template: &str,
    world_size: usize,
    m: usize,
    n: usize,
    k: usize,
    plain: &str,
    reduce: &str,
    comm_sms: usize,
    max_split: usize,
) -> Result<String, JsError> {
    to_js(
        Problem::parse(template, world_size, m, n, k, plain, reduce, comm_sms)
            .and_then(|p| split_curve(&p, max_split)),
    )
}

#[wasm_bindgen(js_name = waveCurve)]
pub fn wave_curve_js(
    n: usize,
    bm: usize,
    bn: usize,
    sms: usize,
    max_m: usize,
) -> Result<String, JsError> {
    to_js(Ok(wave_curve(n, bm, bn, sms, max_m)))
}

#[wasm_bindgen(js_name = timeline)]
#[allow(clippy::too_many_arguments)]
pub fn timeline_js(
    template: &str,
    world_size: usize,
    m: usize,
    n: usize,
    k: usize,
    plain: &str,
    reduce: &str,
    comm_sms: usize,
    split: usize,
    partitioned: bool,
    jitter_us: f64,
    seed: u32,
) -> Result<String, JsError> {
    to_js(
        Problem::parse(template, world_size, m, n, k, plain, reduce, comm_sms)
            .and_then(|p| timeline(&p, split, partitioned, jitter_us, seed.into())),
    )
}
