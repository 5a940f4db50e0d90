//! Fused versus kernel-partitioned execution of the same plan.

use super::{reference_execute, simulate, SimConfig, SimError};
use crate::backend::{realize, Assignment, BackendProfile, KernelMode, RealizeError, SmAlloc};
use crate::planner::Planned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub fused_makespan_us: f64,
    pub partitioned_makespan_us: f64,
    /// Mean busy fraction of compute SMs over the makespan.
    pub fused_utilization: f64,
    pub partitioned_utilization: f64,
    pub partitioned_launches: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum OverlapError {
    #[error(transparent)]
    Realize(#[from] RealizeError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Simulate `planned` once as a single swizzled kernel and once as one
/// kernel per tile group, under the same configuration.
pub fn compare_overlap_modes(
    planned: &Planned,
    assignment: &Assignment,
    sm: SmAlloc,
    profile: &BackendProfile,
    cfg: &SimConfig,
) -> Result<OverlapReport, OverlapError> {
    let reference = reference_execute(&planned.schedule, &planned.kernel, None)?;
    let ranks = planned.schedule.world_size;
    let mut out = [(0.0, 0.0, 0); 2];
    for (i, mode) in [KernelMode::Fused, KernelMode::Partitioned]
        .into_iter()
        .enumerate()
    {
        let prog = realize(planned, assignment, sm, profile, mode)?;
        let res = simulate(&prog, cfg, &reference)?;
        let launches = res
            .timeline
            .events
            .iter()
            .filter(|e| e.lane == "launch")
            .count();
        out[i] = (
            res.makespan_us(),
            res.timeline.sm_utilization(ranks, sm.compute),
            launches,
        );
    }
    Ok(OverlapReport {
        fused_makespan_us: out[0].0,
        partitioned_makespan_us: out[1].0,
        fused_utilization: out[0].1,
        partitioned_utilization: out[1].1,
        partitioned_launches: out[1].2,
    })
}
