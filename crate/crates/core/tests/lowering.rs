use chunkflow::backend::{realize, Assignment, BackendKind, BackendProfile, KernelMode, SmAlloc};
use chunkflow::kernel::TileProgram;
use chunkflow::lowering::{
    lower_loop_ir, lower_partition_ir, transfer_view, CommIntent, IntentKind, LoopIR, LoopNode,
    LoweringPath, Mesh, MeshAxis, PartitionIR, Placement, RegionExpr,
};
use chunkflow::planner::{plan, IntraPolicy};
use chunkflow::region::Region;
use chunkflow::schedule::{validate_schedule, CommSchedule, OpRef};
use chunkflow::sim::{run, tensor_universe, BufferState, Payload, SimConfig};
use chunkflow::templates::{ring_allgather, TemplateParams};
use chunkflow::TensorSpec;
use std::collections::{BTreeMap, BTreeSet};

type Key = (usize, usize, Region);

/// Each transfer keyed by (src, dst, region), with its deps as keys too:
/// the schedule's structure regardless of chunk names or issuing side.
fn transfer_graph(s: &CommSchedule) -> BTreeMap<Key, BTreeSet<Key>> {
    let key = |at: OpRef| {
        let t = s.transfer(at).expect("point-to-point op");
        (t.src_rank, t.dst_rank, t.dst.region.clone())
    };
    s.ops()
        .map(|(at, op)| (key(at), op.deps.iter().map(|&d| key(d)).collect()))
        .collect()
}

fn region(t: &str, off: &str, size: &str, cols: usize) -> RegionExpr {
    RegionExpr {
        tensor: t.into(),
        offsets: vec![off.into(), "0".into()],
        sizes: vec![size.into(), cols.to_string()],
    }
}

fn ring_attention(w: usize) -> LoopIR {
    LoopIR {
        world_size: w,
        params: [("S".to_string(), 64)].into(),
        tensors: vec![TensorSpec::new("KV", vec![64 * w, 32], 2)],
        owners: vec![region("KV", "r * S", "S", 32)],
        body: vec![LoopNode::Loop {
            var: "k".into(),
            lo: "0".into(),
            hi: "W - 1".into(),
            body: vec![LoopNode::Intent(CommIntent {
                kind: IntentKind::Fetch,
                region: region("KV", "((r - k - 1) mod W) * S", "S", 32),
                peer: "(r - 1) mod W".into(),
                carried: Some("k".into()),
            })],
        }],
    }
}

#[test]
fn ring_attention_loop_matches_ring_template() {
    for w in [2, 3, 4, 8] {
        let lowered = lower_loop_ir(&ring_attention(w), LoweringPath::Template).unwrap();
        assert!(validate_schedule(&lowered).is_valid());
        for r in 0..w {
            assert_eq!(lowered.plans[r].len(), w - 1);
            // chained: step k waits only on the upstream rank's step k-1
            for (k, op) in lowered.plans[r].iter().enumerate() {
                let want: Vec<OpRef> = if k == 0 {
                    vec![]
                } else {
                    vec![OpRef::new((r + w - 1) % w, k - 1)]
                };
                assert_eq!(op.deps, want, "W={w} rank {r} step {k}");
            }
        }
        let tpl = ring_allgather(&TemplateParams::new(
            w,
            TensorSpec::new("KV", vec![64 * w, 32], 2),
            0,
        ))
        .unwrap();
        assert_eq!(transfer_graph(&lowered), transfer_graph(&tpl), "W={w}");

        // same movement per destination, plan by plan
        let mut got: Vec<Vec<_>> = vec![Vec::new(); w];
        for plan in transfer_view(&lowered) {
            for t in plan {
                got[t.1].push(t);
            }
        }
        let mut want: Vec<Vec<_>> = vec![Vec::new(); w];
        for plan in transfer_view(&tpl) {
            for t in plan {
                want[t.1].push(t);
            }
        }
        assert_eq!(got, want);
    }
}

#[test]
fn ring_attention_fixture_parses() {
    let text = include_str!("../../../fixtures/ring_attention_loop.json");
    let ir = LoopIR::from_json(text).unwrap();
    assert_eq!(ir.world_size, 4);
    let s = lower_loop_ir(&ir, LoweringPath::Direct).unwrap();
    assert_eq!(s.op_count(), 4 * 3);
}

#[test]
fn doubly_nested_intent_expands_to_product_with_two_chains() {
    // the outer index picks a column half; each half runs its own ring
    let w = 4;
    let ir = LoopIR {
        world_size: w,
        params: [("S".to_string(), 16)].into(),
        tensors: vec![TensorSpec::new("KV", vec![16 * w, 16], 2)],
        owners: vec![region("KV", "r * S", "S", 16)],
        body: vec![LoopNode::Loop {
            var: "i".into(),
            lo: "0".into(),
            hi: "2".into(),
            body: vec![LoopNode::Loop {
                var: "k".into(),
                lo: "0".into(),
                hi: "W - 1".into(),
                body: vec![LoopNode::Intent(CommIntent {
                    kind: IntentKind::Fetch,
                    region: RegionExpr {
                        tensor: "KV".into(),
                        offsets: vec!["((r - k - 1) mod W) * S".into(), "i * 8".into()],
                        sizes: vec!["S".into(), "8".into()],
                    },
                    peer: "(r - 1) mod W".into(),
                    carried: Some("k".into()),
                })],
            }],
        }],
    };
    let s = lower_loop_ir(&ir, LoweringPath::Direct).unwrap();
    assert!(validate_schedule(&s).is_valid());
    for r in 0..w {
        let plan = &s.plans[r];
        assert_eq!(plan.len(), 2 * (w - 1));
        // chain heads are the ops without deps; follow each to its end
        let heads: Vec<usize> = (0..plan.len())
            .filter(|&i| plan[i].deps.is_empty())
            .collect();
        assert_eq!(heads, vec![0, w - 1], "rank {r}");
        let peer = (r + w - 1) % w;
        for (i, &h) in heads.iter().enumerate() {
            for k in 1..w - 1 {
                assert_eq!(
                    plan[h + k].deps,
                    vec![OpRef::new(peer, h + k - 1)],
                    "rank {r} chain {i}"
                );
            }
        }
    }
}

fn partition(w: usize, from: Placement, to: Placement) -> PartitionIR {
    PartitionIR {
        mesh: Mesh {
            axes: vec![MeshAxis {
                name: "tp".into(),
                size: w,
            }],
        },
        tensors: vec![TensorSpec::new("C", vec![32 * w, 16], 4)],
        axis_info: [("C".to_string(), vec!["m".to_string(), "n".to_string()])].into(),
        placement: [("C".to_string(), from)].into(),
        required: [("C".to_string(), to)].into(),
    }
}

fn simulated(s: &CommSchedule, seed: u64) -> BufferState {
    let k = TileProgram::empty();
    let planned = plan(s, &k, IntraPolicy::RowMajor).unwrap();
    let a = Assignment::uniform(s, BackendKind::LdstSpecialized);
    let prog = realize(
        &planned,
        &a,
        SmAlloc::for_assignment(132, 16, &a),
        &BackendProfile::h100(),
        KernelMode::Fused,
    )
    .unwrap();
    let payload = Payload::random(&tensor_universe(s, &k).unwrap(), s.world_size, seed);
    let (res, reference) = run(&prog, &SimConfig::default(), Some(&payload)).unwrap();
    assert!(res.violations.is_empty());
    assert!(res.state.same_data(&reference.state));
    res.state
}

#[test]
fn direct_and_template_paths_agree_after_simulation() {
    let sharded = || Placement::Sharded {
        axis: "m".into(),
        mesh_axis: "tp".into(),
    };
    let partial = || Placement::PartialSum {
        mesh_axis: "tp".into(),
    };
    for w in [2, 4, 8] {
        for (from, to) in [
            (sharded(), Placement::Replicated),
            (partial(), Placement::Replicated),
            (partial(), sharded()),
        ] {
            let ir = partition(w, from.clone(), to.clone());
            let direct = lower_partition_ir(&ir, LoweringPath::Direct).unwrap();
            let template = lower_partition_ir(&ir, LoweringPath::Template).unwrap();
            for seed in 0..3 {
                assert!(
                    simulated(&direct, seed).same_data(&simulated(&template, seed)),
                    "W={w} {from} -> {to} seed {seed}"
                );
            }
        }
    }
}

#[test]
fn partition_fixture_lowers_to_reduce_scatter() {
    let text = include_str!("../../../fixtures/gemm_rs_partition.json");
    let ir = PartitionIR::from_json(text).unwrap();
    let direct = lower_partition_ir(&ir, LoweringPath::Direct).unwrap();
    assert_eq!(direct.op_count(), 4);
    assert!(direct.ops().all(|(_, op)| op.needs_reduce()));
}

#[test]
fn lowering_is_deterministic() {
    let a = lower_loop_ir(&ring_attention(4), LoweringPath::Template)
        .unwrap()
        .to_json();
    let b = lower_loop_ir(&ring_attention(4), LoweringPath::Template)
        .unwrap()
        .to_json();
    assert_eq!(a, b);
    let ir =
        PartitionIR::from_json(include_str!("../../../fixtures/gemm_rs_partition.json")).unwrap();
    assert_eq!(
        lower_partition_ir(&ir, LoweringPath::Template)
            .unwrap()
            .to_json(),
        lower_partition_ir(&ir, LoweringPath::Template)
            .unwrap()
            .to_json()
    );
}
