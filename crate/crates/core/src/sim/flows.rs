//! Max-min fair bandwidth sharing.

use serde::{Deserialize, Serialize};

/// Interconnect limits in GB/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    /// Cap on the traffic from one device to another.
    pub pair_bw: f64,
    /// Cap on all traffic entering plus leaving one device.
    pub aggregate_bw: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            pair_bw: 450.0,
            aggregate_bw: 900.0,
        }
    }
}

/// One active transfer: endpoints and its own rate cap in bytes/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSpec {
    pub src: usize,
    pub dst: usize,
    pub cap: f64,
}

/// Progressive filling: raise every unfrozen rate together until a flow
/// cap, a pair link or a device aggregate saturates, freeze the flows it
/// limits, repeat. Returns rates in bytes/s.
pub fn max_min_rates(flows: &[FlowSpec], link: &LinkModel, devices: usize) -> Vec<f64> {
    let pair_cap = link.pair_bw * 1e9;
    let dev_cap = link.aggregate_bw * 1e9;
    let n = flows.len();
    let mut rate = vec![0.0; n];
    let mut frozen = vec![false; n];
    let remote = |f: &FlowSpec| f.src != f.dst;
    let tol = |cap: f64| cap * 1e-12;
    loop {
        let active: Vec<usize> = (0..n).filter(|&i| !frozen[i]).collect();
        if active.is_empty() {
            break;
        }
        let mut pair_load = vec![0.0; devices * devices];
        let mut pair_free = vec![0usize; devices * devices];
        let mut dev_load = vec![0.0; devices];
        let mut dev_free = vec![0usize; devices];
        for (i, f) in flows.iter().enumerate() {
            if !remote(f) {
                continue;
            }
            let p = f.src * devices + f.dst;
            pair_load[p] += rate[i];
            dev_load[f.src] += rate[i];
            dev_load[f.dst] += rate[i];
            if !frozen[i] {
                pair_free[p] += 1;
                dev_free[f.src] += 1;
                dev_free[f.dst] += 1;
            }
        }
        let mut inc = f64::INFINITY;
        for &i in &active {
            inc = inc.min(flows[i].cap - rate[i]);
        }
        for p in 0..devices * devices {
            if pair_free[p] > 0 {
                inc = inc.min((pair_cap - pair_load[p]) / pair_free[p] as f64);
            }
        }
        for d in 0..devices {
            if dev_free[d] > 0 {
                inc = inc.min((dev_cap - dev_load[d]) / dev_free[d] as f64);
            }
        }
        let inc = inc.max(0.0);
        for &i in &active {
            rate[i] += inc;
            let f = &flows[i];
            if remote(f) {
                let p = f.src * devices + f.dst;
                pair_load[p] += inc;
                dev_load[f.src] += inc;
                dev_load[f.dst] += inc;
            }
        }
        let mut any = false;
        for &i in &active {
            let f = &flows[i];
            let mut sat = f.cap - rate[i] <= tol(f.cap);
            if remote(f) {
                let p = f.src * devices + f.dst;
                sat |= pair_cap - pair_load[p] <= tol(pair_cap);
                sat |= dev_cap - dev_load[f.src] <= tol(dev_cap);
                sat |= dev_cap - dev_load[f.dst] <= tol(dev_cap);
            }
            if sat {
                frozen[i] = true;
                any = true;
            }
        }
        if !any {
            // numerical stall; nothing else can grow
            break;
        }
    }
    rate
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gbs(r: f64) -> f64 {
        r / 1e9
    }

    #[test]
    fn single_flow_takes_its_own_cap() {
        let r = max_min_rates(
            &[FlowSpec {
                src: 0,
                dst: 1,
                cap: 400e9,
            }],
            &LinkModel::default(),
            2,
        );
        assert!((gbs(r[0]) - 400.0).abs() < 1e-9);
    }

    #[test]
    fn pair_link_is_shared() {
        let f = FlowSpec {
            src: 0,
            dst: 1,
            cap: 400e9,
        };
        let r = max_min_rates(&[f, f], &LinkModel::default(), 2);
        assert!((gbs(r[0]) - 225.0).abs() < 1e-9 && (gbs(r[1]) - 225.0).abs() < 1e-9);
    }

    #[test]
    fn aggregate_caps_fan_out() {
        // device 0 sends to 3 peers and receives from 1: 4 flows share 900
        let flows: Vec<FlowSpec> = (1..4)
            .map(|d| FlowSpec {
                src: 0,
                dst: d,
                cap: 400e9,
            })
            .chain([FlowSpec {
                src: 3,
                dst: 0,
                cap: 400e9,
            }])
            .collect();
        let r = max_min_rates(&flows, &LinkModel::default(), 4);
        for x in &r {
            assert!((gbs(*x) - 225.0).abs() < 1e-9, "{r:?}");
        }
    }

    #[test]
    fn unconstrained_flow_gets_the_leftover() {
        // flows 0->1 (cap 100) and 0->2 (cap 1000): the second is bounded by
        // what device 0 has left after the first
        let flows = [
            FlowSpec {
                src: 0,
                dst: 1,
                cap: 100e9,
            },
            FlowSpec {
                src: 0,
                dst: 2,
                cap: 1000e9,
            },
        ];
        let r = max_min_rates(&flows, &LinkModel::default(), 3);
        assert!((gbs(r[0]) - 100.0).abs() < 1e-9);
        assert!((gbs(r[1]) - 450.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn rates_respect_every_cap(
            raw in proptest::collection::vec((0usize..4, 0usize..4, 1.0f64..600.0), 1..12)
        ) {
            let flows: Vec<FlowSpec> = raw.iter().map(|&(s, d, c)| FlowSpec { src: s, dst: d, cap: c * 1e9 }).collect();
            let link = LinkModel::default();
            let r = max_min_rates(&flows, &link, 4);
            let eps = 1e-6;
            let mut dev = [0.0; 4];
            let mut pair = [[0.0; 4]; 4];
            for (f, x) in flows.iter().zip(&r) {
                prop_assert!(*x > 0.0);
                prop_assert!(gbs(*x) <= gbs(f.cap) + eps);
                if f.src != f.dst {
                    dev[f.src] += gbs(*x);
                    dev[f.dst] += gbs(*x);
                    pair[f.src][f.dst] += gbs(*x);
                }
            }
            for d in 0..4 {
                prop_assert!(dev[d] <= 900.0 + eps);
                for e in 0..4 {
                    prop_assert!(pair[d][e] <= 450.0 + eps);
                }
            }
            // max-min: every flow is limited by something saturated
            for (i, f) in flows.iter().enumerate() {
                let own = gbs(f.cap) - gbs(r[i]) <= eps;
                let remote = f.src != f.dst && (
                    pair[f.src][f.dst] >= 450.0 - eps || dev[f.src] >= 900.0 - eps || dev[f.dst] >= 900.0 - eps);
                prop_assert!(own || remote, "flow {i} is not bottlenecked");
            }
        }
    }
}
