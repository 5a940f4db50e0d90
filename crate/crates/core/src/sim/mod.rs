//! Discrete-event simulation of realized device programs.
//!
//! Every rank runs one in-order compute dispatcher over its SMs plus one
//! FIFO stream per communication backend. Transfers are fluid flows sharing
//! links max-min fairly. Each read is checked against the sequential
//! oracle: a reader must see exactly the cell versions the oracle saw.

pub mod buffers;
mod engine;
pub mod flows;
pub mod oracle;
pub mod overlap;
pub mod trace;

pub use buffers::{tensor_universe, BufferState, Payload, ReadKey};
pub use flows::LinkModel;
pub use oracle::{reference_execute, Reference};
pub use overlap::{compare_overlap_modes, OverlapReport};
pub use trace::{export_trace, parse_trace, summary_csv, trace_json, Timeline, TimelineEvent};

use crate::backend::DeviceProgram;
use serde::{Deserialize, Serialize};

/// Random extra delay added to every tile and, unless `tiles_only`, every
/// transfer launch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Upper bound in seconds; delays are uniform in `[0, max_delay)`.
    pub max_delay: f64,
    pub seed: u64,
    /// Delays on long chains of launches add up and can hide a late tile.
    #[serde(default)]
    pub tiles_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub sms_per_device: usize,
    pub link: LinkModel,
    /// FLOP/s of one SM.
    pub flops_per_sm: f64,
    /// Seconds per kernel launch in partitioned mode.
    pub launch_overhead: f64,
    pub jitter: Option<Jitter>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            sms_per_device: 132,
            link: LinkModel::default(),
            flops_per_sm: 7.5e12,
            launch_overhead: 5e-6,
            jitter: None,
        }
    }
}

impl SimConfig {
    pub fn with_jitter(mut self, max_delay: f64, seed: u64) -> Self {
        self.jitter = Some(Jitter {
            max_delay,
            seed,
            tiles_only: false,
        });
        self
    }

    pub fn with_tile_jitter(mut self, max_delay: f64, seed: u64) -> Self {
        self.jitter = Some(Jitter {
            max_delay,
            seed,
            tiles_only: true,
        });
        self
    }

    pub fn check(&self) -> Result<(), String> {
        if self.sms_per_device == 0 {
            return Err("sms_per_device must be positive".into());
        }
        let rates = [self.link.pair_bw, self.link.aggregate_bw, self.flops_per_sm];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err("link bandwidths and flops_per_sm must be positive".into());
        }
        if self.launch_overhead.is_nan() || self.launch_overhead < 0.0 {
            return Err("launch_overhead must be non-negative".into());
        }
        if let Some(j) = self.jitter {
            if !(j.max_delay >= 0.0 && j.max_delay.is_finite()) {
                return Err("jitter max_delay must be finite and non-negative".into());
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let c: SimConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        c.check()?;
        Ok(c)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("setup: {0}")]
    Setup(String),
    #[error("{0}")]
    Cycle(String),
    #[error("oracle: {0}")]
    InvalidRead(String),
    #[error("bad program: {0}")]
    Program(String),
    #[error("deadlock: {0}")]
    Deadlock(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Read of a cell that holds no valid data yet.
    Invalid,
    /// Read of valid data at a different version than the oracle saw.
    Stale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub time_us: f64,
    pub reader: ReadKey,
    pub fault: Fault,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let what = match self.fault {
            Fault::Invalid => "invalid",
            Fault::Stale => "stale",
        };
        write!(
            f,
            "{} at {:.3}us: {what} read of {}",
            self.reader, self.time_us, self.detail
        )
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub timeline: Timeline,
    pub violations: Vec<Violation>,
    pub state: BufferState,
}

impl SimResult {
    pub fn makespan_us(&self) -> f64 {
        self.timeline.makespan_us
    }
}

/// Simulate `program`, checking every read against `reference`, which must
/// come from the same schedule, kernel and inputs.
pub fn simulate(
    program: &DeviceProgram,
    cfg: &SimConfig,
    reference: &Reference,
) -> Result<SimResult, SimError> {
    cfg.check().map_err(SimError::Setup)?;
    engine::run(program, cfg, reference)
}

/// Oracle plus simulation in one call.
pub fn run(
    program: &DeviceProgram,
    cfg: &SimConfig,
    inputs: Option<&Payload>,
) -> Result<(SimResult, Reference), SimError> {
    let reference = reference_execute(&program.schedule, &program.kernel, inputs)?;
    let result = simulate(program, cfg, &reference)?;
    Ok((result, reference))
}

/// PASS/FAIL summary of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    /// Bitwise equality of final buffers with the oracle (when payloads ran).
    pub oracle_equal: Option<bool>,
    pub violations: usize,
    pub first_violation: Option<String>,
    pub makespan_us: f64,
}

impl Verdict {
    pub fn of(result: &SimResult, reference: &Reference) -> Self {
        let oracle_equal = (result.state.has_data() && reference.state.has_data())
            .then(|| result.state.same_data(&reference.state));
        let first = result
            .violations
            .iter()
            .min_by(|a, b| a.time_us.total_cmp(&b.time_us))
            .map(ToString::to_string);
        Verdict {
            pass: result.violations.is_empty() && oracle_equal != Some(false),
            oracle_equal,
            violations: result.violations.len(),
            first_violation: first,
            makespan_us: result.makespan_us(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("verdict serializes");
        v["verdict"] = serde_json::Value::from(if self.pass { "PASS" } else { "FAIL" });
        serde_json::to_string_pretty(&v).expect("verdict serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{realize, Assignment, BackendKind, BackendProfile, KernelMode, SmAlloc};
    use crate::kernel::TileProgram;
    use crate::planner::{plan, IntraPolicy};
    use crate::region::TensorSpec;
    use crate::schedule::CommSchedule;
    use crate::sim::buffers::tensor_universe;
    use crate::templates::{partition_allreduce, ring_allgather, TemplateParams};

    fn program(
        s: &CommSchedule,
        p: &TileProgram,
        b: BackendKind,
        mode: KernelMode,
    ) -> DeviceProgram {
        let pl = plan(s, p, IntraPolicy::RowMajor).unwrap();
        let a = Assignment::uniform(s, b);
        let sm = SmAlloc::for_assignment(132, 16, &a);
        realize(&pl, &a, sm, &BackendProfile::h100(), mode).unwrap()
    }

    #[test]
    fn single_rank_gemm_is_wave_bound() {
        let p = TileProgram::gemm(4096, 4096, 512, 128, 128, 64);
        let s = CommSchedule::empty(1);
        let prog = program(&s, &p, BackendKind::CopyEngine, KernelMode::Fused);
        let cfg = SimConfig::default();
        let (res, _) = run(&prog, &cfg, None).unwrap();
        let tile_us = 2.0 * 128.0 * 128.0 * 512.0 / cfg.flops_per_sm * 1e6;
        // 1024 tiles on 132 SMs: 8 waves
        assert!((res.makespan_us() - 8.0 * tile_us).abs() < 1e-9 * tile_us);
        let util = res.timeline.sm_utilization(1, 132);
        assert!((util - 1024.0 / (8.0 * 132.0)).abs() < 1e-9);
        assert!(res.violations.is_empty());
    }

    #[test]
    fn ring_allgather_matches_oracle() {
        let w = 4;
        let p = TileProgram::gemm(64, 32, 16, 16, 16, 16);
        let s = ring_allgather(&TemplateParams::new(
            w,
            TensorSpec::new("A", vec![64, 16], 2),
            0,
        ))
        .unwrap();
        let prog = program(&s, &p, BackendKind::CopyEngine, KernelMode::Fused);
        let payload = Payload::random(&tensor_universe(&s, &p).unwrap(), w, 7);
        let (res, reference) = run(&prog, &SimConfig::default(), Some(&payload)).unwrap();
        assert!(res.violations.is_empty(), "{:?}", res.violations);
        assert!(res.state.same_data(&reference.state));
        // every rank ends with the concatenation of the owners' shards
        for r in 0..w {
            let a = res.state.tensor(r, "A").unwrap();
            for q in 0..w {
                let own = &payload.ranks[q]["A"][q * 16 * 16..(q + 1) * 16 * 16];
                assert_eq!(&a[q * 256..(q + 1) * 256], own);
            }
        }
        assert!(res.timeline.overlaps().is_empty());
    }

    #[test]
    fn allreduce_sums_in_rank_order() {
        let w = 4;
        let p = TileProgram::gemm(32, 32, 8, 16, 16, 8).with_names("X", "Y", "C");
        let s = partition_allreduce(&TemplateParams::new(
            w,
            TensorSpec::new("C", vec![32, 32], 2),
            0,
        ))
        .unwrap();
        let pl = plan(&s, &p, IntraPolicy::RowMajor).unwrap();
        let a = Assignment::by_class(&s, BackendKind::CopyEngine, BackendKind::LdstSpecialized);
        let prog = realize(
            &pl,
            &a,
            SmAlloc::for_assignment(132, 16, &a),
            &BackendProfile::h100(),
            KernelMode::Fused,
        )
        .unwrap();
        let payload = Payload::random(&tensor_universe(&s, &p).unwrap(), w, 3);
        let (res, reference) = run(&prog, &SimConfig::default(), Some(&payload)).unwrap();
        assert!(res.violations.is_empty(), "{:?}", res.violations);
        assert!(res.state.same_data(&reference.state));
        let c0 = res.state.tensor(0, "C").unwrap();
        for r in 1..w {
            assert_eq!(res.state.tensor(r, "C").unwrap(), c0);
        }
    }

    #[test]
    fn removed_wait_is_caught_under_jitter() {
        let w = 4;
        let p = TileProgram::gemm(64, 32, 16, 16, 16, 16);
        let s = ring_allgather(&TemplateParams::new(
            w,
            TensorSpec::new("A", vec![64, 16], 2),
            0,
        ))
        .unwrap();
        let prog = program(&s, &p, BackendKind::CopyEngine, KernelMode::Fused);
        let reference = reference_execute(&s, &p, None).unwrap();
        for site in prog.wait_sites() {
            let bad = prog.without_wait(site);
            let caught = (0..100).any(|seed| {
                let cfg = SimConfig::default().with_jitter(10e-6, seed);
                !simulate(&bad, &cfg, &reference)
                    .unwrap()
                    .violations
                    .is_empty()
            });
            assert!(caught, "wait {site:?} removal went unnoticed");
        }
        for seed in 0..20 {
            let cfg = SimConfig::default().with_jitter(10e-6, seed);
            assert!(simulate(&prog, &cfg, &reference)
                .unwrap()
                .violations
                .is_empty());
        }
    }

    #[test]
    fn identical_runs_are_identical() {
        let w = 2;
        let p = TileProgram::gemm(64, 32, 16, 16, 16, 16);
        let s = ring_allgather(&TemplateParams::new(
            w,
            TensorSpec::new("A", vec![64, 16], 2),
            0,
        ))
        .unwrap();
        let prog = program(&s, &p, BackendKind::TmaSpecialized, KernelMode::Fused);
        let cfg = SimConfig::default().with_jitter(1e-6, 11);
        let reference = reference_execute(&s, &p, None).unwrap();
        let a = simulate(&prog, &cfg, &reference).unwrap();
        let b = simulate(&prog, &cfg, &reference).unwrap();
        assert_eq!(trace_json(&a.timeline), trace_json(&b.timeline));
    }

    #[test]
    fn missing_signal_deadlocks_with_report() {
        let w = 2;
        let p = TileProgram::gemm(64, 32, 16, 16, 16, 16);
        let s = ring_allgather(&TemplateParams::new(
            w,
            TensorSpec::new("A", vec![64, 16], 2),
            0,
        ))
        .unwrap();
        let mut prog = program(&s, &p, BackendKind::CopyEngine, KernelMode::Fused);
        // drop every signal raise of rank 0's comm stream
        prog.ranks[0].comm[0]
            .items
            .retain(|i| !matches!(i, crate::backend::Item::Signal { .. }));
        let reference = reference_execute(&s, &p, None).unwrap();
        let err = simulate(&prog, &SimConfig::default(), &reference).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("deadlock"), "{msg}");
        assert!(msg.contains("rank1/compute blocks on signal"), "{msg}");
        assert!(msg.contains("never raises"), "{msg}");
    }
}
