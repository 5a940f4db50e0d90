use super::buffers::{read_set, BufferState, OpData, ReadKey};
use super::flows::{max_min_rates, FlowSpec};
use super::oracle::{op_instances, Reference};
use super::trace::{Timeline, TimelineEvent};
use super::{Fault, SimConfig, SimError, SimResult, Violation};
use crate::backend::{BackendKind, DeviceProgram, Item};
use crate::planner::Guard;
use crate::schedule::{CollectiveKind, OpKind, OpRef};
use ordered_float::OrderedFloat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    TileDone { rank: usize, sm: usize, tile: usize },
    LaunchDone { rank: usize },
    OpLaunched { inst: usize },
    SignalFire { signal: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Holder {
    Stream { rank: usize, k: usize },
    Inline { rank: usize },
}

struct Compute {
    pc: usize,
    free: Vec<bool>,
    tiles: usize,
    inline: usize,
    launching: Option<f64>,
    launched: bool,
}

struct Comm {
    pc: usize,
    busy: bool,
}

#[derive(Default)]
struct Inst {
    arrived: Vec<Option<(f64, Holder, Vec<usize>)>>,
    started: Option<f64>,
    flows_left: usize,
    data: Option<OpData>,
}

struct Flow {
    inst: usize,
    spec: FlowSpec,
    remaining: f64,
    rate: f64,
}

#[derive(Default, Clone)]
struct Sig {
    armed: bool,
    guard_done: bool,
    tiles_left: usize,
    scheduled: bool,
    fired: bool,
}

struct Engine<'a> {
    prog: &'a DeviceProgram,
    cfg: &'a SimConfig,
    reference: &'a Reference,
    state: BufferState,
    now: f64,
    queue: BinaryHeap<Reverse<(OrderedFloat<f64>, u64, Ev)>>,
    seq: u64,
    rng: Option<(ChaCha8Rng, f64, bool)>,
    compute: Vec<Compute>,
    comm: Vec<Vec<Comm>>,
    insts: Vec<Vec<OpRef>>,
    inst_of: BTreeMap<OpRef, usize>,
    inst_state: Vec<Inst>,
    flows: Vec<Flow>,
    rates_dirty: bool,
    sigs: Vec<Sig>,
    op_sigs: BTreeMap<OpRef, Vec<usize>>,
    tile_sigs: BTreeMap<(usize, usize), Vec<usize>>,
    tile_start: BTreeMap<(usize, usize), (f64, Option<Vec<Vec<f64>>>)>,
    tile_time: f64,
    events: Vec<TimelineEvent>,
    violations: Vec<Violation>,
}

pub(super) fn run(
    prog: &DeviceProgram,
    cfg: &SimConfig,
    reference: &Reference,
) -> Result<SimResult, SimError> {
    let mut e = Engine::new(prog, cfg, reference)?;
    e.main_loop()?;
    Ok(SimResult {
        timeline: Timeline::new(e.events),
        violations: e.violations,
        state: e.state,
    })
}

fn us(t: f64) -> f64 {
    t * 1e6
}

impl<'a> Engine<'a> {
    fn new(
        prog: &'a DeviceProgram,
        cfg: &'a SimConfig,
        reference: &'a Reference,
    ) -> Result<Self, SimError> {
        let s = &prog.schedule;
        if prog.ranks.len() != s.world_size {
            return Err(SimError::Program(format!(
                "{} rank programs for world size {}",
                prog.ranks.len(),
                s.world_size
            )));
        }
        for (r, rp) in prog.ranks.iter().enumerate() {
            if rp.compute_sms + rp.comm_sms > cfg.sms_per_device {
                return Err(SimError::Program(format!(
                    "rank {r} uses {} SMs but the device has {}",
                    rp.compute_sms + rp.comm_sms,
                    cfg.sms_per_device
                )));
            }
            if rp.compute_sms == 0 && rp.compute.iter().any(|i| matches!(i, Item::Tile { .. })) {
                return Err(SimError::Program(format!(
                    "rank {r} has tiles but no compute SMs"
                )));
            }
        }
        let (insts, inst_of) = op_instances(s);
        let mut sigs = vec![Sig::default(); prog.signals.len()];
        let mut op_sigs: BTreeMap<OpRef, Vec<usize>> = BTreeMap::new();
        let mut tile_sigs: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, d) in prog.signals.iter().enumerate() {
            if d.id != i {
                return Err(SimError::Program(format!(
                    "signal {i} is labelled {}",
                    d.id
                )));
            }
            match &d.guard {
                Guard::Op { op } => {
                    if !s.contains(*op) {
                        return Err(SimError::Program(format!(
                            "signal {i} guards unknown op {op}"
                        )));
                    }
                    op_sigs.entry(*op).or_default().push(i)
                }
                Guard::Tiles { rank, tiles } => {
                    sigs[i].tiles_left = tiles.len();
                    sigs[i].guard_done = tiles.is_empty();
                    for &t in tiles {
                        tile_sigs.entry((*rank, t)).or_default().push(i);
                    }
                }
            }
        }
        let state = BufferState::new(s, &prog.kernel, reference.inputs.as_ref())
            .map_err(SimError::Setup)?;
        let compute = prog
            .ranks
            .iter()
            .map(|rp| Compute {
                pc: 0,
                free: vec![true; rp.compute_sms],
                tiles: 0,
                inline: 0,
                launching: None,
                launched: false,
            })
            .collect();
        let comm = prog
            .ranks
            .iter()
            .map(|rp| {
                rp.comm
                    .iter()
                    .map(|_| Comm { pc: 0, busy: false })
                    .collect()
            })
            .collect();
        let inst_state = insts
            .iter()
            .map(|m| Inst {
                arrived: vec![None; m.len()],
                ..Inst::default()
            })
            .collect();
        Ok(Engine {
            prog,
            cfg,
            reference,
            state,
            now: 0.0,
            queue: BinaryHeap::new(),
            seq: 0,
            rng: cfg
                .jitter
                .map(|j| (ChaCha8Rng::seed_from_u64(j.seed), j.max_delay, j.tiles_only)),
            compute,
            comm,
            insts,
            inst_of,
            inst_state,
            flows: Vec::new(),
            rates_dirty: false,
            sigs,
            op_sigs,
            tile_sigs,
            tile_start: BTreeMap::new(),
            tile_time: prog.kernel.flops_per_tile() / cfg.flops_per_sm,
            events: Vec::new(),
            violations: Vec::new(),
        })
    }

    fn schedule(&mut self, at: f64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Reverse((OrderedFloat(at), self.seq, ev)));
    }

    fn jitter(&mut self, launch: bool) -> f64 {
        match &mut self.rng {
            Some((rng, max, tiles_only)) if *max > 0.0 && !(launch && *tiles_only) => {
                rng.gen_range(0.0..*max)
            }
            _ => 0.0,
        }
    }

    fn event(&mut self, rank: usize, lane: String, label: String, start: f64) {
        self.events.push(TimelineEvent {
            rank,
            lane,
            label,
            start_us: us(start),
            dur_us: us(self.now) - us(start),
        });
    }

    fn check_read(&mut self, key: ReadKey) {
        let (rank, regions) = read_set(&self.prog.schedule, &self.prog.kernel, key);
        let seen = self.state.observe(rank, &regions);
        let expected = self.reference.reads.get(&key);
        let what = || {
            regions
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        };
        let fault = if seen.iter().any(Option::is_none) {
            Some((Fault::Invalid, format!("{} on rank {rank}", what())))
        } else if expected != Some(&seen) {
            let diff = expected
                .and_then(|exp| exp.iter().zip(&seen).find(|(a, b)| a != b))
                .map(|(a, b)| {
                    format!(
                        " (version {} where the oracle saw {})",
                        b.unwrap_or(0),
                        a.unwrap_or(0)
                    )
                })
                .unwrap_or_default();
            Some((Fault::Stale, format!("{} on rank {rank}{diff}", what())))
        } else {
            None
        };
        if let Some((fault, detail)) = fault {
            self.violations.push(Violation {
                time_us: us(self.now),
                reader: key,
                fault,
                detail,
            });
        }
    }

    // signals

    fn arm(&mut self, sig: usize) {
        if let Some(s) = self.sigs.get_mut(sig) {
            s.armed = true;
        }
        self.maybe_fire(sig);
    }

    fn guard_done(&mut self, sig: usize) {
        self.sigs[sig].guard_done = true;
        self.maybe_fire(sig);
    }

    fn maybe_fire(&mut self, sig: usize) {
        let Some(s) = self.sigs.get_mut(sig) else {
            return;
        };
        if s.armed && s.guard_done && !s.scheduled {
            s.scheduled = true;
            let t = self.now + self.prog.profile.signal_latency;
            self.schedule(t, Ev::SignalFire { signal: sig });
        }
    }

    fn fired(&self, sig: usize) -> bool {
        self.sigs.get(sig).is_some_and(|s| s.fired)
    }

    // dispatch

    fn pump(&mut self) -> Result<(), SimError> {
        loop {
            let mut moved = false;
            for r in 0..self.compute.len() {
                moved |= self.step_compute(r)?;
                for k in 0..self.comm[r].len() {
                    moved |= self.step_comm(r, k)?;
                }
            }
            if !moved {
                return Ok(());
            }
        }
    }

    fn step_compute(&mut self, rank: usize) -> Result<bool, SimError> {
        let prog = self.prog;
        let items = &prog.ranks[rank].compute;
        let mut moved = false;
        while let Some(&item) = items.get(self.compute[rank].pc) {
            let c = &mut self.compute[rank];
            match item {
                Item::Tile { tile } => {
                    let Some(sm) = c.free.iter().position(|&f| f) else {
                        break;
                    };
                    c.free[sm] = false;
                    c.tiles += 1;
                    self.start_tile(rank, sm, tile)?;
                }
                Item::Wait { signal } => {
                    if !self.fired(signal) {
                        break;
                    }
                }
                Item::Signal { signal } => self.arm(signal),
                Item::Op { rank: r, index } => {
                    let need = self.prog.profile.colocated_sms;
                    let sms: Vec<usize> = c
                        .free
                        .iter()
                        .enumerate()
                        .filter(|(_, &f)| f)
                        .map(|(i, _)| i)
                        .take(need)
                        .collect();
                    if sms.len() < need {
                        break;
                    }
                    for &i in &sms {
                        c.free[i] = false;
                    }
                    c.inline += 1;
                    self.arrive(OpRef::new(r, index), Holder::Inline { rank }, sms)?;
                }
                Item::Launch => {
                    if c.launched {
                        c.launched = false;
                    } else {
                        if c.launching.is_none() {
                            c.launching = Some(self.now);
                            let t = self.now + self.cfg.launch_overhead;
                            self.schedule(t, Ev::LaunchDone { rank });
                        }
                        break;
                    }
                }
                Item::Barrier => {
                    if c.tiles > 0 || c.inline > 0 {
                        break;
                    }
                }
            }
            self.compute[rank].pc += 1;
            moved = true;
        }
        Ok(moved)
    }

    fn step_comm(&mut self, rank: usize, k: usize) -> Result<bool, SimError> {
        let prog = self.prog;
        let items = &prog.ranks[rank].comm[k].items;
        let mut moved = false;
        while !self.comm[rank][k].busy {
            let Some(&item) = items.get(self.comm[rank][k].pc) else {
                break;
            };
            match item {
                Item::Wait { signal } => {
                    if !self.fired(signal) {
                        break;
                    }
                }
                Item::Signal { signal } => self.arm(signal),
                Item::Op { rank: r, index } => {
                    self.comm[rank][k].busy = true;
                    moved = true;
                    self.arrive(OpRef::new(r, index), Holder::Stream { rank, k }, Vec::new())?;
                    // the stream advances when the op completes
                    continue;
                }
                Item::Tile { .. } | Item::Launch | Item::Barrier => {
                    return Err(SimError::Program(format!(
                        "{item:?} in communication stream {k} of rank {rank}"
                    )))
                }
            }
            self.comm[rank][k].pc += 1;
            moved = true;
        }
        Ok(moved)
    }

    fn start_tile(&mut self, rank: usize, sm: usize, tile: usize) -> Result<(), SimError> {
        if tile >= self.prog.kernel.tile_count() {
            return Err(SimError::Program(format!(
                "rank {rank} runs unknown tile {tile}"
            )));
        }
        self.check_read(ReadKey::Tile { rank, tile });
        let vals = self.state.tile_values(&self.prog.kernel, rank, tile);
        self.tile_start.insert((rank, tile), (self.now, vals));
        let t = self.now + self.tile_time + self.jitter(false);
        self.schedule(t, Ev::TileDone { rank, sm, tile });
        Ok(())
    }

    fn member_bw(&self, at: OpRef) -> f64 {
        let b = self.prog.assignment.get(at);
        let params = self.prog.profile.get(b);
        let sms = if b.is_colocated() {
            self.prog.profile.colocated_sms
        } else {
            self.prog.ranks[at.rank]
                .comm
                .iter()
                .find(|c| c.backend == b)
                .map_or(0, |c| c.sms)
        };
        params.stream_bw(sms) * 1e9
    }

    fn arrive(&mut self, at: OpRef, holder: Holder, sms: Vec<usize>) -> Result<(), SimError> {
        let Some(&inst) = self.inst_of.get(&at) else {
            return Err(SimError::Program(format!("unknown op {at}")));
        };
        let slot = self.insts[inst].iter().position(|&m| m == at).unwrap();
        let st = &mut self.inst_state[inst];
        if st.arrived[slot].is_some() {
            return Err(SimError::Program(format!("op {at} issued twice")));
        }
        st.arrived[slot] = Some((self.now, holder, sms));
        if st.arrived.iter().all(Option::is_some) {
            st.started = Some(self.now);
            let latency = self.insts[inst]
                .iter()
                .map(|&m| {
                    self.prog
                        .profile
                        .get(self.prog.assignment.get(m))
                        .launch_latency
                })
                .fold(0.0, f64::max);
            let t = self.now + latency + self.jitter(true);
            self.schedule(t, Ev::OpLaunched { inst });
        }
        Ok(())
    }

    fn launched(&mut self, inst: usize) {
        let members = self.insts[inst].clone();
        for &at in &members {
            self.check_read(ReadKey::Op {
                rank: at.rank,
                index: at.index,
            });
        }
        let prog = self.prog;
        let s = &prog.schedule;
        let data = self.state.read_op(s, &members);
        let mut new = Vec::new();
        if let Some(t) = s.transfer(members[0]) {
            let bytes = s.op_bytes(members[0]) as f64;
            if bytes > 0.0 {
                new.push((t.src_rank, t.dst_rank, bytes, self.member_bw(members[0])));
            }
        } else if let OpKind::Collective(c) = &s.op(members[0]).kind {
            let n = members.len();
            let elem = s
                .tensors
                .get(&c.dst_chunk.region.tensor_id)
                .map_or(1, |t| t.elem_bytes);
            for &q in &members {
                for &p in &members {
                    if p == q {
                        continue;
                    }
                    let dst = &s.op(p).dst_chunk().region;
                    let src = &s.op(q).src_chunk().region;
                    let mut bytes = dst.intersection(src).map_or(0, |r| r.bytes(elem)) as f64;
                    if c.collective_type == CollectiveKind::Allreduce {
                        bytes *= 2.0 / n as f64;
                    }
                    if bytes > 0.0 {
                        new.push((q.rank, p.rank, bytes, self.member_bw(q) / (n - 1) as f64));
                    }
                }
            }
        }
        self.inst_state[inst].data = Some(data);
        self.inst_state[inst].flows_left = new.len();
        if new.is_empty() {
            self.complete(inst);
            return;
        }
        for (src, dst, bytes, cap) in new {
            self.flows.push(Flow {
                inst,
                spec: FlowSpec { src, dst, cap },
                remaining: bytes,
                rate: 0.0,
            });
        }
        self.rates_dirty = true;
    }

    fn complete(&mut self, inst: usize) {
        let members = self.insts[inst].clone();
        let data = self.inst_state[inst].data.take().unwrap_or_default();
        self.state.write_op(&self.prog.schedule, &members, &data);
        let started = self.inst_state[inst].started.unwrap_or(self.now);
        let arrived = std::mem::take(&mut self.inst_state[inst].arrived);
        for (&at, a) in members.iter().zip(arrived) {
            let (arr, holder, sms) = a.expect("complete instances have arrived");
            let label = format!("op{}.{}", at.rank, at.index);
            match holder {
                Holder::Stream { rank, k } => {
                    let b: BackendKind = self.prog.ranks[rank].comm[k].backend;
                    self.event(rank, format!("comm:{b}"), label, started);
                    self.comm[rank][k].busy = false;
                    self.comm[rank][k].pc += 1;
                }
                Holder::Inline { rank } => {
                    for sm in sms {
                        self.event(rank, format!("sm{sm}"), label.clone(), arr);
                        self.compute[rank].free[sm] = true;
                    }
                    self.compute[rank].inline -= 1;
                }
            }
            for sig in self.op_sigs.get(&at).cloned().unwrap_or_default() {
                self.guard_done(sig);
            }
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::TileDone { rank, sm, tile } => {
                let (start, vals) = self.tile_start.remove(&(rank, tile)).expect("tile started");
                for (i, r) in self.prog.kernel.write_regions(tile).iter().enumerate() {
                    self.state
                        .write_tile(rank, r, vals.as_ref().map(|v| v[i].as_slice()));
                }
                self.event(rank, format!("sm{sm}"), format!("t{tile}"), start);
                let c = &mut self.compute[rank];
                c.free[sm] = true;
                c.tiles -= 1;
                for sig in self
                    .tile_sigs
                    .get(&(rank, tile))
                    .cloned()
                    .unwrap_or_default()
                {
                    let s = &mut self.sigs[sig];
                    s.tiles_left = s.tiles_left.saturating_sub(1);
                    if s.tiles_left == 0 {
                        self.guard_done(sig);
                    }
                }
            }
            Ev::LaunchDone { rank } => {
                let start = self.compute[rank]
                    .launching
                    .take()
                    .expect("launch in flight");
                self.compute[rank].launched = true;
                self.event(rank, "launch".into(), "launch".into(), start);
            }
            Ev::OpLaunched { inst } => self.launched(inst),
            Ev::SignalFire { signal } => self.sigs[signal].fired = true,
        }
    }

    fn finished(&self) -> bool {
        self.compute
            .iter()
            .enumerate()
            .all(|(r, c)| c.pc >= self.prog.ranks[r].compute.len() && c.tiles == 0 && c.inline == 0)
            && self.comm.iter().enumerate().all(|(r, ks)| {
                ks.iter()
                    .enumerate()
                    .all(|(k, c)| !c.busy && c.pc >= self.prog.ranks[r].comm[k].items.len())
            })
    }

    fn main_loop(&mut self) -> Result<(), SimError> {
        let devices = self.prog.schedule.world_size;
        loop {
            self.pump()?;
            if self.rates_dirty {
                let specs: Vec<FlowSpec> = self.flows.iter().map(|f| f.spec).collect();
                let rates = max_min_rates(&specs, &self.cfg.link, devices);
                for (f, r) in self.flows.iter_mut().zip(rates) {
                    f.rate = r;
                }
                self.rates_dirty = false;
            }
            let next_flow = self
                .flows
                .iter()
                .filter(|f| f.rate > 0.0)
                .map(|f| self.now + f.remaining / f.rate)
                .min_by(f64::total_cmp);
            let next_event = self.queue.peek().map(|Reverse((t, _, _))| t.0);
            let next = match (next_flow, next_event) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => {
                    if self.finished() && self.flows.is_empty() {
                        return Ok(());
                    }
                    return Err(SimError::Deadlock(self.deadlock_report()));
                }
            };
            let dt = next - self.now;
            let mut done_insts = Vec::new();
            let now = self.now;
            self.flows.retain_mut(|f| {
                let finish = if f.rate > 0.0 {
                    now + f.remaining / f.rate
                } else {
                    f64::INFINITY
                };
                if finish <= next {
                    done_insts.push(f.inst);
                    false
                } else {
                    f.remaining -= f.rate * dt;
                    true
                }
            });
            self.now = next;
            if !done_insts.is_empty() {
                self.rates_dirty = true;
            }
            for inst in done_insts {
                let st = &mut self.inst_state[inst];
                st.flows_left -= 1;
                if st.flows_left == 0 {
                    self.complete(inst);
                }
            }
            while let Some(Reverse((t, _, _))) = self.queue.peek() {
                if t.0 > self.now {
                    break;
                }
                let Reverse((_, _, ev)) = self.queue.pop().unwrap();
                self.handle(ev);
            }
        }
    }

    fn stream_name(&self, h: Holder) -> String {
        match h {
            Holder::Stream { rank, k } => {
                format!("rank{rank}/comm:{}", self.prog.ranks[rank].comm[k].backend)
            }
            Holder::Inline { rank } => format!("rank{rank}/compute"),
        }
    }

    /// Which stream issues `at`.
    fn holder_of(&self, at: OpRef) -> Holder {
        let b = self.prog.assignment.get(at);
        if b.is_colocated() {
            return Holder::Inline { rank: at.rank };
        }
        let k = self.prog.ranks[at.rank]
            .comm
            .iter()
            .position(|c| c.backend == b)
            .unwrap_or(0);
        Holder::Stream { rank: at.rank, k }
    }

    fn deadlock_report(&self) -> String {
        // each blocked stream and the stream it waits for
        let mut waits: Vec<(Holder, String, Option<Holder>)> = Vec::new();
        let signal_owner = |sig: usize| -> (String, Option<Holder>) {
            let s = &self.sigs[sig];
            match &self.prog.signals[sig].guard {
                Guard::Op { op } => {
                    let what = if s.guard_done {
                        format!("signal {sig}, which op {op} never raises")
                    } else {
                        format!("signal {sig} of op {op}")
                    };
                    (what, Some(self.holder_of(*op)))
                }
                Guard::Tiles { rank, tiles } => (
                    format!("signal {sig} (tiles {tiles:?} on rank {rank})"),
                    Some(Holder::Inline { rank: *rank }),
                ),
            }
        };
        for (r, c) in self.compute.iter().enumerate() {
            if let Some(Item::Wait { signal }) = self.prog.ranks[r].compute.get(c.pc) {
                let (what, who) = signal_owner(*signal);
                waits.push((Holder::Inline { rank: r }, what, who));
            }
        }
        for (r, ks) in self.comm.iter().enumerate() {
            for (k, c) in ks.iter().enumerate() {
                let me = Holder::Stream { rank: r, k };
                match self.prog.ranks[r].comm[k].items.get(c.pc) {
                    Some(Item::Wait { signal }) => {
                        let (what, who) = signal_owner(*signal);
                        waits.push((me, what, who));
                    }
                    Some(Item::Op { rank, index }) if c.busy => {
                        let at = OpRef::new(*rank, *index);
                        let inst = self.inst_of[&at];
                        let missing = self.insts[inst]
                            .iter()
                            .zip(&self.inst_state[inst].arrived)
                            .find(|(_, a)| a.is_none())
                            .map(|(m, _)| *m);
                        if let Some(m) = missing {
                            waits.push((
                                me,
                                format!("rendezvous of op {at} with {m}"),
                                Some(self.holder_of(m)),
                            ));
                        }
                    }
                    _ => {}
                }
            }
        }
        let mut lines: Vec<String> = waits
            .iter()
            .map(|(h, what, _)| format!("{} blocks on {what}", self.stream_name(*h)))
            .collect();
        // follow the wait-for edges from each stream looking for a cycle
        let next = |h: Holder| waits.iter().find(|w| w.0 == h).and_then(|w| w.2);
        for start in waits.iter().map(|w| w.0) {
            let mut path = vec![start];
            let mut cur = start;
            while let Some(n) = next(cur) {
                if let Some(i) = path.iter().position(|&p| p == n) {
                    let cyc: Vec<String> = path[i..]
                        .iter()
                        .chain([&n])
                        .map(|h| self.stream_name(*h))
                        .collect();
                    lines.insert(0, format!("wait-for cycle: {}", cyc.join(" -> ")));
                    return lines.join("; ");
                }
                path.push(n);
                cur = n;
            }
        }
        if lines.is_empty() {
            lines.push("no runnable work but streams are unfinished".into());
        }
        lines.join("; ")
    }
}
