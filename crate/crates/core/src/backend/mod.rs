//! Physical realizations of a chunk transfer and their cost models.

mod realize;

pub use realize::{
    realize, CommStream, DeviceProgram, Item, KernelMode, RankProgram, RealizeError, SignalDef,
    SmAlloc,
};

use crate::schedule::{CommOp, CommSchedule, OpKind, OpRef};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    CopyEngine,
    TmaSpecialized,
    TmaColocated,
    LdstSpecialized,
    LdstColocated,
}

impl BackendKind {
    pub const ALL: [BackendKind; 5] = [
        BackendKind::CopyEngine,
        BackendKind::TmaSpecialized,
        BackendKind::TmaColocated,
        BackendKind::LdstSpecialized,
        BackendKind::LdstColocated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackendKind::CopyEngine => "copy_engine",
            BackendKind::TmaSpecialized => "tma_specialized",
            BackendKind::TmaColocated => "tma_colocated",
            BackendKind::LdstSpecialized => "ldst_specialized",
            BackendKind::LdstColocated => "ldst_colocated",
        }
    }

    /// Runs on SMs reserved for communication.
    pub fn is_specialized(self) -> bool {
        matches!(
            self,
            BackendKind::TmaSpecialized | BackendKind::LdstSpecialized
        )
    }

    /// Runs on SMs borrowed from the compute stream.
    pub fn is_colocated(self) -> bool {
        matches!(self, BackendKind::TmaColocated | BackendKind::LdstColocated)
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        BackendKind::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown backend {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendCostParams {
    /// GB/s, 1 GB = 1e9 bytes.
    pub peak_bw: f64,
    /// Seconds per issued transfer.
    pub launch_latency: f64,
    /// GB/s contributed by each driving SM; zero for the copy engine.
    #[serde(default)]
    pub per_sm_bw: f64,
    #[serde(default)]
    pub max_useful_sms: usize,
    #[serde(default)]
    pub min_efficient_bytes: usize,
    /// Reductions and collectives can run on this backend.
    pub supports_collective_reduce: bool,
    pub supports_strided: bool,
    pub consumes_sms: bool,
}

impl BackendCostParams {
    /// Bandwidth of one stream driven by `sms` SMs, in GB/s.
    pub fn stream_bw(&self, sms: usize) -> f64 {
        if !self.consumes_sms {
            return self.peak_bw;
        }
        self.peak_bw
            .min(self.per_sm_bw * sms.min(self.max_useful_sms) as f64)
    }
}

/// A calibration profile: per-backend costs plus signalling constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    pub backends: BTreeMap<BackendKind, BackendCostParams>,
    /// Seconds from a signal being raised to a waiter observing it.
    pub signal_latency: f64,
    /// SMs a co-located transfer borrows from the compute stream.
    pub colocated_sms: usize,
}

pub const H100_PROFILE_JSON: &str = include_str!("../../profiles/h100.json");

impl BackendProfile {
    pub fn h100() -> Self {
        serde_json::from_str(H100_PROFILE_JSON).expect("bundled profile parses")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let p: BackendProfile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        for b in BackendKind::ALL {
            let Some(c) = p.backends.get(&b) else {
                return Err(format!("profile {} lacks backend {b}", p.name));
            };
            if c.peak_bw <= 0.0 || c.launch_latency < 0.0 || (c.consumes_sms && c.per_sm_bw <= 0.0)
            {
                return Err(format!("profile {}: bad parameters for {b}", p.name));
            }
        }
        Ok(p)
    }

    pub fn get(&self, b: BackendKind) -> &BackendCostParams {
        &self.backends[&b]
    }
}

impl Default for BackendProfile {
    fn default() -> Self {
        Self::h100()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Infeasibility {
    /// The backend cannot execute the op at all.
    Illegal,
    /// Legal but below the backend's efficient transfer size.
    Inefficient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feasibility {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<Infeasibility>,
    pub reason: String,
}

impl Feasibility {
    fn yes() -> Self {
        Feasibility {
            ok: true,
            class: None,
            reason: String::new(),
        }
    }

    fn no(class: Infeasibility, reason: impl Into<String>) -> Self {
        Feasibility {
            ok: false,
            class: Some(class),
            reason: reason.into(),
        }
    }
}

/// Capability and efficiency check for running `op` on backend `b`.
///
/// `shape` is the logical shape of the tensor the op moves, needed to
/// decide contiguity; `elem_bytes` sizes the chunk.
pub fn feasible(
    op: &CommOp,
    b: BackendKind,
    params: &BackendCostParams,
    shape: &[usize],
    elem_bytes: usize,
) -> Feasibility {
    if let OpKind::Collective(_) = op.kind {
        if !params.supports_collective_reduce {
            return Feasibility::no(
                Infeasibility::Illegal,
                format!("{b}: no collective support"),
            );
        }
    }
    if op.needs_reduce() && !params.supports_collective_reduce {
        return Feasibility::no(Infeasibility::Illegal, format!("{b}: no reduction support"));
    }
    if !params.supports_strided
        && !(op.src_chunk().is_contiguous(shape) && op.dst_chunk().is_contiguous(shape))
    {
        return Feasibility::no(
            Infeasibility::Illegal,
            format!("{b}: chunk is not contiguous"),
        );
    }
    let bytes = op.dst_chunk().region.bytes(elem_bytes);
    if bytes < params.min_efficient_bytes {
        return Feasibility::no(
            Infeasibility::Inefficient,
            format!(
                "{b}: {bytes} bytes is below the {} byte minimum",
                params.min_efficient_bytes
            ),
        );
    }
    Feasibility::yes()
}

/// Feasibility of an op of schedule `s`.
pub fn feasible_in(
    s: &CommSchedule,
    at: OpRef,
    b: BackendKind,
    profile: &BackendProfile,
) -> Feasibility {
    let op = s.op(at);
    let spec = &s.tensors[&op.dst_chunk().region.tensor_id];
    feasible(op, b, profile.get(b), &spec.shape, spec.elem_bytes)
}

/// Achieved bandwidth in GB/s of a single transfer of `bytes`:
/// `bytes / (L + bytes / stream_bw)`.
pub fn effective_bandwidth(
    bytes: f64,
    b: BackendKind,
    sms: usize,
    profile: &BackendProfile,
) -> f64 {
    let params = profile.get(b);
    let bw = params.stream_bw(sms) * 1e9;
    if bytes <= 0.0 || bw <= 0.0 {
        return 0.0;
    }
    bytes / (params.launch_latency + bytes / bw) / 1e9
}

/// Which backend runs each op, indexed like the schedule's plans.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub plans: Vec<Vec<BackendKind>>,
}

impl Assignment {
    pub fn uniform(s: &CommSchedule, b: BackendKind) -> Self {
        Self::by_class(s, b, b)
    }

    /// `plain` for plain transfers, `reduce` for accumulating ops and collectives.
    pub fn by_class(s: &CommSchedule, plain: BackendKind, reduce: BackendKind) -> Self {
        let plans = s
            .plans
            .iter()
            .map(|plan| {
                plan.iter()
                    .map(|op| {
                        if op.needs_reduce() || matches!(op.kind, OpKind::Collective(_)) {
                            reduce
                        } else {
                            plain
                        }
                    })
                    .collect()
            })
            .collect();
        Assignment { plans }
    }

    pub fn get(&self, at: OpRef) -> BackendKind {
        self.plans[at.rank][at.index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (OpRef, BackendKind)> + '_ {
        self.plans.iter().enumerate().flat_map(|(r, plan)| {
            plan.iter()
                .enumerate()
                .map(move |(i, &b)| (OpRef::new(r, i), b))
        })
    }

    pub fn uses_specialized(&self) -> bool {
        self.iter().any(|(_, b)| b.is_specialized())
    }

    /// Ops the backend cannot legally run, with reasons.
    pub fn illegal_ops(&self, s: &CommSchedule, profile: &BackendProfile) -> Vec<(OpRef, String)> {
        s.ops()
            .filter_map(|(at, _)| {
                let f = feasible_in(s, at, self.get(at), profile);
                (f.class == Some(Infeasibility::Illegal)).then_some((at, f.reason))
            })
            .collect()
    }
}
