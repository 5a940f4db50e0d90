//! Exhaustive search over split factor, backends, communication SMs, intra
//! order and tile shape, scored by simulated makespan.

use crate::backend::{
    feasible_in, realize, Assignment, BackendKind, BackendProfile, Infeasibility, KernelMode,
    SmAlloc,
};
use crate::kernel::TileProgram;
use crate::planner::{plan, IntraPolicy, Planned};
use crate::schedule::{split_schedule, CommSchedule};
use crate::sim::{reference_execute, simulate, Reference, SimConfig};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileConfig {
    pub bm: usize,
    pub bn: usize,
    pub bk: usize,
    /// Software pipeline depth; carried through to the output, not modeled.
    pub stages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSpace {
    pub split_factors: Vec<usize>,
    /// Tensor axis the split factor divides.
    #[serde(default)]
    pub split_axis: usize,
    /// `(plain, reduce)` backend pairs: plain transfers use the first,
    /// accumulating ops and collectives the second.
    pub backends: Vec<(BackendKind, BackendKind)>,
    pub comm_sms: Vec<usize>,
    pub intra_policies: Vec<IntraPolicy>,
    /// Empty means the kernel's own blocks.
    #[serde(default)]
    pub tile_configs: Vec<TileConfig>,
}

impl Default for TuneSpace {
    fn default() -> Self {
        TuneSpace {
            split_factors: vec![1, 2, 3, 4, 6, 8, 16],
            split_axis: 0,
            backends: TuneSpace::by_class(&BackendKind::ALL, &BackendKind::ALL),
            comm_sms: vec![16],
            intra_policies: vec![IntraPolicy::RowMajor],
            tile_configs: Vec::new(),
        }
    }
}

impl TuneSpace {
    /// One pair per backend, used for both op classes.
    pub fn uniform(backends: &[BackendKind]) -> Vec<(BackendKind, BackendKind)> {
        backends.iter().map(|&b| (b, b)).collect()
    }

    /// Every plain backend against every reduce backend.
    pub fn by_class(
        plain: &[BackendKind],
        reduce: &[BackendKind],
    ) -> Vec<(BackendKind, BackendKind)> {
        plain
            .iter()
            .flat_map(|&p| reduce.iter().map(move |&r| (p, r)))
            .collect()
    }
}

/// One point of the space. Field order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Config {
    pub split: usize,
    pub plain: BackendKind,
    pub reduce: BackendKind,
    pub comm_sms: usize,
    pub intra: IntraPolicy,
    pub tile: TileConfig,
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "split={} plain={} reduce={} comm_sms={} intra={} tile={}x{}x{}/{}",
            self.split,
            self.plain,
            self.reduce,
            self.comm_sms,
            self.intra,
            self.tile.bm,
            self.tile.bn,
            self.tile.bk,
            self.tile.stages
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReason {
    IllegalSplit,
    SmBudget,
    Illegal,
    Inefficient,
    TileAlignment,
    /// Same program as an earlier candidate (comm SMs unused).
    Redundant,
}

impl fmt::Display for PruneReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneReason::IllegalSplit => "illegal_split",
            PruneReason::SmBudget => "sm_budget",
            PruneReason::Illegal => "illegal",
            PruneReason::Inefficient => "inefficient",
            PruneReason::TileAlignment => "tile_alignment",
            PruneReason::Redundant => "redundant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: Config,
    pub pruned: Option<PruneReason>,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub config: Config,
    pub makespan_us: Option<f64>,
    pub feasible: bool,
    pub pruned_reason: Option<PruneReason>,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub rows: Vec<TuneRow>,
    pub best: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum TuneError {
    #[error("no feasible configuration ({summary})")]
    NoFeasible { summary: String, rows: Vec<TuneRow> },
    #[error("invalid tuning space: {0}")]
    Space(String),
}

impl TuneResult {
    pub fn best_config(&self) -> Config {
        self.rows[self.best].config
    }

    pub fn best_makespan_us(&self) -> f64 {
        self.rows[self.best]
            .makespan_us
            .expect("best row was simulated")
    }

    pub fn to_csv(&self) -> String {
        rows_csv(&self.rows, Some(self.best))
    }
}

/// The result table as CSV; `best` marks one row.
pub fn rows_csv(rows: &[TuneRow], best: Option<usize>) -> String {
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "split",
            "plain_backend",
            "reduce_backend",
            "comm_sms",
            "intra",
            "bm",
            "bn",
            "bk",
            "stages",
            "makespan_us",
            "feasible",
            "pruned_reason",
            "best",
        ])
        .expect("in-memory csv");
        for (i, r) in rows.iter().enumerate() {
            let c = &r.config;
            w.write_record([
                c.split.to_string(),
                c.plain.to_string(),
                c.reduce.to_string(),
                c.comm_sms.to_string(),
                c.intra.to_string(),
                c.tile.bm.to_string(),
                c.tile.bn.to_string(),
                c.tile.bk.to_string(),
                c.tile.stages.to_string(),
                r.makespan_us.map(|m| format!("{m:.6}")).unwrap_or_default(),
                r.feasible.to_string(),
                r.pruned_reason.map(|p| p.to_string()).unwrap_or_default(),
                (Some(i) == best).to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

fn base_tile(p: &TileProgram) -> TileConfig {
    let mut spatial = p.spatial_axes().map(|a| a.block);
    TileConfig {
        bm: spatial.next().unwrap_or(1),
        bn: spatial.next().unwrap_or(1),
        bk: p.axes.iter().find(|a| a.reduction).map_or(1, |a| a.block),
        stages: 1,
    }
}

/// The kernel with `bm`/`bn` on its first two spatial axes and `bk` on its
/// first reduction axis.
pub fn retile(p: &TileProgram, t: TileConfig) -> TileProgram {
    let mut q = p.clone();
    let mut spatial = 0;
    let mut reduction = false;
    for a in &mut q.axes {
        if a.reduction {
            if !reduction {
                a.block = t.bk;
                reduction = true;
            }
        } else {
            match spatial {
                0 => a.block = t.bm,
                1 => a.block = t.bn,
                _ => {}
            }
            spatial += 1;
        }
    }
    q
}

/// First chunk boundary that falls inside a tile, if any.
fn misaligned(s: &CommSchedule, p: &TileProgram) -> Option<String> {
    for (at, op) in s.ops() {
        for chunk in [op.src_chunk(), op.dst_chunk()] {
            let r = &chunk.region;
            for acc in p.reads.iter().chain(&p.writes) {
                if acc.tensor != r.tensor_id || acc.axes.len() != r.rank() {
                    continue;
                }
                for (d, name) in acc.axes.iter().enumerate() {
                    let Some(ax) = p.axis(name) else { continue };
                    if ax.reduction {
                        continue;
                    }
                    let end = r.end(d);
                    if r.offsets[d] % ax.block != 0 || (end % ax.block != 0 && end != ax.extent) {
                        return Some(format!(
                            "op {at} chunk {r} cuts {name} blocks of {}",
                            ax.block
                        ));
                    }
                }
            }
        }
    }
    None
}

fn space_configs(space: &TuneSpace, kernel: &TileProgram) -> Vec<Config> {
    let tiles = if space.tile_configs.is_empty() {
        vec![base_tile(kernel)]
    } else {
        space.tile_configs.clone()
    };
    let mut out = BTreeSet::new();
    for &split in &space.split_factors {
        for &(plain, reduce) in &space.backends {
            for &comm_sms in &space.comm_sms {
                for &intra in &space.intra_policies {
                    for &tile in &tiles {
                        out.insert(Config {
                            split,
                            plain,
                            reduce,
                            comm_sms,
                            intra,
                            tile,
                        });
                    }
                }
            }
        }
    }
    out.into_iter().collect()
}

/// Split schedules keyed by factor; `None` when the split is impossible.
fn split_cache(
    s: &CommSchedule,
    space: &TuneSpace,
) -> BTreeMap<usize, Result<CommSchedule, String>> {
    space
        .split_factors
        .iter()
        .map(|&f| {
            let r = if f == 0 {
                Err("split factor 0".to_string())
            } else {
                split_schedule(s, f, space.split_axis).map_err(|e| e.to_string())
            };
            (f, r)
        })
        .collect()
}

/// The Cartesian product of `space`, each point tagged with the first rule
/// that prunes it, in lexicographic config order.
pub fn enumerate_and_prune(
    space: &TuneSpace,
    schedule: &CommSchedule,
    kernel: &TileProgram,
    profile: &BackendProfile,
    device_sms: usize,
) -> Vec<Candidate> {
    let splits = split_cache(schedule, space);
    prune_with(space, &splits, kernel, profile, device_sms)
}

fn prune_with(
    space: &TuneSpace,
    splits: &BTreeMap<usize, Result<CommSchedule, String>>,
    kernel: &TileProgram,
    profile: &BackendProfile,
    device_sms: usize,
) -> Vec<Candidate> {
    let mut seen = BTreeSet::new();
    let mut align: BTreeMap<(usize, TileConfig), Option<String>> = BTreeMap::new();
    space_configs(space, kernel)
        .into_iter()
        .map(|config| {
            let (pruned, detail) =
                match prune_reason(&config, splits, kernel, profile, device_sms, &mut align) {
                    Some((p, d)) => (Some(p), d),
                    None => {
                        // comm SMs only matter when a specialized backend runs
                        let key = if config.plain.is_specialized() || config.reduce.is_specialized()
                        {
                            config
                        } else {
                            Config {
                                comm_sms: 0,
                                ..config
                            }
                        };
                        if seen.insert(key) {
                            (None, String::new())
                        } else {
                            (
                                Some(PruneReason::Redundant),
                                "comm SMs unused by these backends".into(),
                            )
                        }
                    }
                };
            Candidate {
                config,
                pruned,
                detail,
            }
        })
        .collect()
}

fn prune_reason(
    c: &Config,
    splits: &BTreeMap<usize, Result<CommSchedule, String>>,
    kernel: &TileProgram,
    profile: &BackendProfile,
    device_sms: usize,
    align: &mut BTreeMap<(usize, TileConfig), Option<String>>,
) -> Option<(PruneReason, String)> {
    let s = match &splits[&c.split] {
        Ok(s) => s,
        Err(e) => return Some((PruneReason::IllegalSplit, e.clone())),
    };
    if c.comm_sms + 1 > device_sms {
        return Some((
            PruneReason::SmBudget,
            format!(
                "{} comm SMs leave no compute SM out of {device_sms}",
                c.comm_sms
            ),
        ));
    }
    let a = Assignment::by_class(s, c.plain, c.reduce);
    let mut inefficient = None;
    for (at, b) in a.iter() {
        let f = feasible_in(s, at, b, profile);
        match f.class {
            Some(Infeasibility::Illegal) => {
                return Some((PruneReason::Illegal, format!("op {at}: {}", f.reason)))
            }
            Some(Infeasibility::Inefficient) if inefficient.is_none() => {
                inefficient = Some(format!("op {at}: {}", f.reason))
            }
            _ => {}
        }
    }
    if let Some(d) = inefficient {
        return Some((PruneReason::Inefficient, d));
    }
    let mis = align
        .entry((c.split, c.tile))
        .or_insert_with(|| misaligned(s, &retile(kernel, c.tile)));
    mis.clone().map(|d| (PruneReason::TileAlignment, d))
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, U: Send>(xs: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    xs.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Sync, U: Send>(xs: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    xs.iter().map(f).collect()
}

/// Simulate every surviving candidate and pick the smallest makespan;
/// ties go to the lexicographically smallest config. Candidates whose
/// simulation reports a violation or fails count as infeasible.
pub fn tune(
    space: &TuneSpace,
    schedule: &CommSchedule,
    kernel: &TileProgram,
    profile: &BackendProfile,
    cfg: &SimConfig,
) -> Result<TuneResult, TuneError> {
    if space.split_factors.is_empty()
        || space.backends.is_empty()
        || space.comm_sms.is_empty()
        || space.intra_policies.is_empty()
    {
        return Err(TuneError::Space(
            "every dimension needs at least one value".into(),
        ));
    }
    let device_sms = cfg.sms_per_device;
    let splits = split_cache(schedule, space);
    let cands = prune_with(space, &splits, kernel, profile, device_sms);
    let live: Vec<&Candidate> = cands.iter().filter(|c| c.pruned.is_none()).collect();
    if live.is_empty() {
        return Err(TuneError::NoFeasible {
            summary: prune_summary(&cands),
            rows: cands.iter().map(pruned_row).collect(),
        });
    }

    // the oracle depends on (split, tile); the plan also on the intra order
    let ref_keys: Vec<(usize, TileConfig)> = live
        .iter()
        .map(|c| (c.config.split, c.config.tile))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let refs: BTreeMap<(usize, TileConfig), Result<Reference, String>> = ref_keys
        .iter()
        .copied()
        .zip(par_map(&ref_keys, |&(split, tile)| {
            let s = splits[&split].as_ref().expect("live splits exist");
            reference_execute(s, &retile(kernel, tile), None).map_err(|e| e.to_string())
        }))
        .collect();
    let plan_keys: Vec<(usize, TileConfig, IntraPolicy)> = live
        .iter()
        .map(|c| (c.config.split, c.config.tile, c.config.intra))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let plans: BTreeMap<(usize, TileConfig, IntraPolicy), Result<Planned, String>> = plan_keys
        .iter()
        .copied()
        .zip(par_map(&plan_keys, |&(split, tile, intra)| {
            let s = splits[&split].as_ref().expect("live splits exist");
            plan(s, &retile(kernel, tile), intra).map_err(|e| e.to_string())
        }))
        .collect();

    let evals: Vec<Result<f64, String>> = par_map(&live, |c| {
        let k = c.config;
        let planned = plans[&(k.split, k.tile, k.intra)]
            .as_ref()
            .map_err(Clone::clone)?;
        let reference = refs[&(k.split, k.tile)].as_ref().map_err(Clone::clone)?;
        let a = Assignment::by_class(&planned.schedule, k.plain, k.reduce);
        let sm = SmAlloc::for_assignment(device_sms, k.comm_sms, &a);
        let prog =
            realize(planned, &a, sm, profile, KernelMode::Fused).map_err(|e| e.to_string())?;
        let res = simulate(&prog, cfg, reference).map_err(|e| e.to_string())?;
        match res.violations.first() {
            Some(v) => Err(format!("{} violations, first: {v}", res.violations.len())),
            None => Ok(res.makespan_us()),
        }
    });
    let mut evals = evals.into_iter();
    let rows: Vec<TuneRow> = cands
        .iter()
        .map(|c| match c.pruned {
            Some(_) => pruned_row(c),
            None => match evals.next().expect("one evaluation per live candidate") {
                Ok(m) => TuneRow {
                    config: c.config,
                    makespan_us: Some(m),
                    feasible: true,
                    pruned_reason: None,
                    detail: String::new(),
                },
                Err(e) => TuneRow {
                    config: c.config,
                    makespan_us: None,
                    feasible: false,
                    pruned_reason: None,
                    detail: e,
                },
            },
        })
        .collect();
    // rows are in config order, so the first minimum wins ties
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.feasible)
        .min_by(|(_, a), (_, b)| a.makespan_us.unwrap().total_cmp(&b.makespan_us.unwrap()))
        .map(|(i, _)| i);
    match best {
        Some(best) => Ok(TuneResult { rows, best }),
        None => {
            let failures = rows.iter().filter(|r| r.pruned_reason.is_none()).count();
            Err(TuneError::NoFeasible {
                summary: format!("{}; {failures} failed simulation", prune_summary(&cands)),
                rows,
            })
        }
    }
}

fn pruned_row(c: &Candidate) -> TuneRow {
    TuneRow {
        config: c.config,
        makespan_us: None,
        feasible: false,
        pruned_reason: c.pruned,
        detail: c.detail.clone(),
    }
}

/// `reason: count` pairs over the pruned candidates.
pub fn prune_summary(cands: &[Candidate]) -> String {
    let mut counts: BTreeMap<PruneReason, usize> = BTreeMap::new();
    for c in cands {
        if let Some(p) = c.pruned {
            *counts.entry(p).or_default() += 1;
        }
    }
    let parts: Vec<String> = counts.iter().map(|(p, n)| format!("{p}: {n}")).collect();
    format!(
        "{} candidates, pruned {}",
        cands.len(),
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(", ")
        }
    )
}
