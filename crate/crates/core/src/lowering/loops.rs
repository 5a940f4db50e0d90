//! Loop-nest IR with affine communication intents.

use super::affine::Expr;
use super::{emit_steps, LoweringError, LoweringPath, Step, StepKind, StepList};
use crate::region::{Region, TensorId, TensorSpec};
use crate::schedule::CommSchedule;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentKind {
    /// Pull the region from the peer.
    Fetch,
    /// Push the region to the peer.
    Flush,
    /// Push the region into the peer, accumulating.
    Reduce,
}

/// A region whose offsets and sizes are index expressions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionExpr {
    pub tensor: TensorId,
    pub offsets: Vec<String>,
    pub sizes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommIntent {
    pub kind: IntentKind,
    pub region: RegionExpr,
    pub peer: String,
    /// Loop variable along which the intent forwards data: iteration `v`
    /// waits for iteration `v-1` on the rank the data comes from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carried: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum LoopNode {
    /// `for var in lo..hi`.
    Loop {
        var: String,
        lo: String,
        hi: String,
        body: Vec<LoopNode>,
    },
    Intent(CommIntent),
}

/// SPMD loop program: every rank runs the same nest with `r` bound to its
/// rank and `W` to the world size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopIR {
    pub world_size: usize,
    #[serde(default)]
    pub params: BTreeMap<String, i64>,
    pub tensors: Vec<TensorSpec>,
    /// Regions valid on rank `r` before any communication.
    pub owners: Vec<RegionExpr>,
    pub body: Vec<LoopNode>,
}

impl LoopIR {
    pub fn from_json(text: &str) -> Result<Self, LoweringError> {
        Ok(serde_json::from_str(text)?)
    }
}

struct Compiled {
    tensor: TensorId,
    offsets: Vec<Expr>,
    sizes: Vec<Expr>,
}

impl Compiled {
    fn new(r: &RegionExpr, indices: &BTreeSet<String>) -> Result<Self, LoweringError> {
        if r.offsets.len() != r.sizes.len() {
            return Err(LoweringError::Ir(format!(
                "region of {} has mismatched offsets and sizes",
                r.tensor
            )));
        }
        let parse = |v: &[String]| -> Result<Vec<Expr>, LoweringError> {
            v.iter()
                .map(|e| Ok(Expr::parse_affine(e, indices)?))
                .collect()
        };
        Ok(Compiled {
            tensor: r.tensor.clone(),
            offsets: parse(&r.offsets)?,
            sizes: parse(&r.sizes)?,
        })
    }

    fn eval(&self, env: &BTreeMap<String, i64>) -> Result<Region, LoweringError> {
        let nat = |e: &Expr| -> Result<usize, LoweringError> {
            let v = e.eval(env)?;
            usize::try_from(v).map_err(|_| {
                LoweringError::Ir(format!("`{e}` evaluates to {v} for {}", self.tensor))
            })
        };
        Ok(Region::new(
            self.tensor.clone(),
            self.offsets.iter().map(nat).collect::<Result<_, _>>()?,
            self.sizes.iter().map(nat).collect::<Result<_, _>>()?,
        ))
    }
}

enum Node {
    Loop {
        var: String,
        lo: Expr,
        hi: Expr,
        body: Vec<Node>,
    },
    Intent {
        id: usize,
        kind: IntentKind,
        region: Compiled,
        peer: Expr,
        carried: Option<String>,
        loop_vars: Vec<String>,
    },
}

fn compile(
    nodes: &[LoopNode],
    scope: &mut Vec<String>,
    next: &mut usize,
) -> Result<Vec<Node>, LoweringError> {
    let mut out = Vec::new();
    for n in nodes {
        let mut indices: BTreeSet<String> = scope.iter().cloned().collect();
        indices.insert("r".into());
        match n {
            LoopNode::Loop { var, lo, hi, body } => {
                if var == "r" || var == "W" || scope.contains(var) {
                    return Err(LoweringError::Ir(format!(
                        "loop variable `{var}` shadows another name"
                    )));
                }
                let bound = |text: &str| -> Result<Expr, LoweringError> {
                    let e = Expr::parse_affine(text, &indices)?;
                    if e.vars().contains("r") {
                        return Err(LoweringError::DynamicBound(text.into()));
                    }
                    Ok(e)
                };
                let (lo, hi) = (bound(lo)?, bound(hi)?);
                scope.push(var.clone());
                let body = compile(body, scope, next)?;
                scope.pop();
                out.push(Node::Loop {
                    var: var.clone(),
                    lo,
                    hi,
                    body,
                });
            }
            LoopNode::Intent(i) => {
                if let Some(c) = &i.carried {
                    if !scope.contains(c) {
                        return Err(LoweringError::Ir(format!(
                            "intent carried along `{c}`, which is not an enclosing loop"
                        )));
                    }
                }
                out.push(Node::Intent {
                    id: *next,
                    kind: i.kind,
                    region: Compiled::new(&i.region, &indices)?,
                    peer: Expr::parse_affine(&i.peer, &indices)?,
                    carried: i.carried.clone(),
                    loop_vars: scope.clone(),
                });
                *next += 1;
            }
        }
    }
    Ok(out)
}

/// One intent instance on one rank.
struct Instance {
    intent: usize,
    iter: Vec<i64>,
    kind: IntentKind,
    region: Region,
    peer: usize,
    carried: Option<usize>,
}

fn walk(
    nodes: &[Node],
    env: &mut BTreeMap<String, i64>,
    w: usize,
    out: &mut Vec<Instance>,
) -> Result<(), LoweringError> {
    for n in nodes {
        match n {
            Node::Loop { var, lo, hi, body } => {
                let (lo, hi) = (lo.eval(env)?, hi.eval(env)?);
                for v in lo..hi {
                    env.insert(var.clone(), v);
                    walk(body, env, w, out)?;
                }
                env.remove(var);
            }
            Node::Intent {
                id,
                kind,
                region,
                peer,
                carried,
                loop_vars,
            } => {
                let p = peer.eval(env)?;
                let p = usize::try_from(p).ok().filter(|&p| p < w).ok_or_else(|| {
                    LoweringError::Ir(format!("peer `{peer}` evaluates to {p}, outside 0..{w}"))
                })?;
                out.push(Instance {
                    intent: *id,
                    iter: loop_vars.iter().map(|v| env[v]).collect(),
                    kind: *kind,
                    region: region.eval(env)?,
                    peer: p,
                    carried: carried
                        .as_ref()
                        .map(|c| loop_vars.iter().position(|v| v == c).expect("checked")),
                });
            }
        }
    }
    Ok(())
}

/// Expand the nest into steps: one per intent instance per rank, ranks in
/// order. A carried intent at iteration `v` depends on iteration `v-1` of
/// the same intent on the rank the data comes from: the peer for a fetch,
/// the rank pushing to this one for a flush or reduce.
pub fn loop_ir_steps(ir: &LoopIR) -> Result<StepList, LoweringError> {
    let w = ir.world_size;
    if w == 0 {
        return Err(LoweringError::Ir("world_size must be positive".into()));
    }
    let mut next = 0;
    let nodes = compile(&ir.body, &mut Vec::new(), &mut next)?;
    let base: BTreeSet<String> = ["r".to_string()].into();
    let owner_exprs = ir
        .owners
        .iter()
        .map(|o| Compiled::new(o, &base))
        .collect::<Result<Vec<_>, _>>()?;
    let mut per_rank = Vec::with_capacity(w);
    let mut owners = vec![BTreeMap::new(); w];
    for (r, owned) in owners.iter_mut().enumerate() {
        let mut env = ir.params.clone();
        env.insert("W".into(), w as i64);
        env.insert("r".into(), r as i64);
        for o in &owner_exprs {
            owned
                .entry(o.tensor.clone())
                .or_insert_with(Vec::new)
                .push(o.eval(&env)?);
        }
        let mut insts = Vec::new();
        walk(&nodes, &mut env, w, &mut insts)?;
        per_rank.push(insts);
    }
    let mut index: BTreeMap<(usize, usize, Vec<i64>), usize> = BTreeMap::new();
    let mut n = 0;
    for (r, insts) in per_rank.iter().enumerate() {
        for i in insts {
            index.insert((r, i.intent, i.iter.clone()), n);
            n += 1;
        }
    }
    let mut steps = Vec::with_capacity(n);
    for (r, insts) in per_rank.iter().enumerate() {
        for i in insts {
            let mut deps = Vec::new();
            if let Some(c) = i.carried {
                let mut prev = i.iter.clone();
                prev[c] -= 1;
                let sources: Vec<usize> = match i.kind {
                    IntentKind::Fetch => vec![i.peer],
                    IntentKind::Flush | IntentKind::Reduce => per_rank
                        .iter()
                        .enumerate()
                        .filter(|(_, other)| {
                            other
                                .iter()
                                .any(|o| o.intent == i.intent && o.iter == prev && o.peer == r)
                        })
                        .map(|(q, _)| q)
                        .collect(),
                };
                for q in sources {
                    if let Some(&d) = index.get(&(q, i.intent, prev.clone())) {
                        deps.push(d);
                    }
                }
            }
            let kind = match i.kind {
                _ if i.peer == r => StepKind::LocalCopy,
                IntentKind::Fetch => StepKind::Pull,
                IntentKind::Flush | IntentKind::Reduce => StepKind::Push,
            };
            steps.push(Step {
                kind,
                region: i.region.clone(),
                rank: Some(r),
                peer: Some(i.peer),
                ranks: Vec::new(),
                axis: 0,
                accumulate: i.kind == IntentKind::Reduce,
                deps,
            });
        }
    }
    Ok(StepList {
        world_size: w,
        tensors: ir.tensors.clone(),
        owners,
        steps,
    })
}

pub fn lower_loop_ir(ir: &LoopIR, path: LoweringPath) -> Result<CommSchedule, LoweringError> {
    emit_steps(&loop_ir_steps(ir)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(tensor: &str, off: &str, size: &str) -> RegionExpr {
        RegionExpr {
            tensor: tensor.into(),
            offsets: vec![off.into(), "0".into()],
            sizes: vec![size.into(), "4".into()],
        }
    }

    fn ring(w: usize, body: Vec<LoopNode>) -> LoopIR {
        LoopIR {
            world_size: w,
            params: [("S".to_string(), 8)].into(),
            tensors: vec![TensorSpec::new("KV", vec![8 * w, 4], 2)],
            owners: vec![region("KV", "r * S", "S")],
            body,
        }
    }

    #[test]
    fn zero_intents_is_empty() {
        let ir = ring(
            4,
            vec![LoopNode::Loop {
                var: "k".into(),
                lo: "0".into(),
                hi: "W".into(),
                body: vec![],
            }],
        );
        assert_eq!(
            lower_loop_ir(&ir, LoweringPath::Direct).unwrap().op_count(),
            0
        );
    }

    #[test]
    fn dynamic_and_non_affine_are_rejected() {
        let bad_bound = ring(
            2,
            vec![LoopNode::Loop {
                var: "k".into(),
                lo: "0".into(),
                hi: "r + 1".into(),
                body: vec![],
            }],
        );
        assert!(matches!(
            loop_ir_steps(&bad_bound),
            Err(LoweringError::DynamicBound(_))
        ));
        let bad_region = ring(
            2,
            vec![LoopNode::Loop {
                var: "k".into(),
                lo: "0".into(),
                hi: "1".into(),
                body: vec![LoopNode::Intent(CommIntent {
                    kind: IntentKind::Fetch,
                    region: region("KV", "k * r", "S"),
                    peer: "(r + 1) mod W".into(),
                    carried: None,
                })],
            }],
        );
        assert!(matches!(
            loop_ir_steps(&bad_region),
            Err(LoweringError::Expr(_))
        ));
    }

    #[test]
    fn self_peer_becomes_dropped_local_copy() {
        let ir = ring(
            2,
            vec![LoopNode::Loop {
                var: "k".into(),
                lo: "0".into(),
                hi: "W".into(),
                body: vec![LoopNode::Intent(CommIntent {
                    kind: IntentKind::Fetch,
                    region: region("KV", "((r + k) mod W) * S", "S"),
                    peer: "(r + k) mod W".into(),
                    carried: None,
                })],
            }],
        );
        let steps = loop_ir_steps(&ir).unwrap();
        assert_eq!(
            steps
                .steps
                .iter()
                .filter(|s| s.kind == StepKind::LocalCopy)
                .count(),
            2
        );
        assert_eq!(
            lower_loop_ir(&ir, LoweringPath::Direct).unwrap().op_count(),
            2
        );
    }
}
