//! The `# @sy.` directive language embedded in kernel source comments.
//!
//! Directive lines look like `# @sy.<kind> <args>`. Lines of the form
//! `NAME = <integer>` bind constants used to resolve extents and block
//! sizes. Everything else is opaque text.

use super::{Access, AxisSpec, KernelError, Scheduler, SchedulerKind, TileKernel, TileProgram};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveKind {
    AxisCount,
    TileId,
    DispatchBegin,
    DispatchEnd,
    PidMap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationDirective {
    pub kind: DirectiveKind,
    pub args: BTreeMap<String, String>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonAxis {
    pub name: String,
    pub block_symbol: String,
    pub reduction: bool,
    pub line: usize,
}

/// What the directives say, before symbols are bound to values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSkeleton {
    pub axes: Vec<SkeletonAxis>,
    pub scheduler: Option<SchedulerKind>,
    /// axis name -> program variable holding its tile coordinate
    pub pid_map: Vec<(String, String)>,
    pub constants: BTreeMap<String, usize>,
    pub directives: Vec<AnnotationDirective>,
}

const PREFIX: &str = "# @sy.";

fn err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        message: message.into(),
    }
}

fn parse_constant(line: &str) -> Option<(String, usize)> {
    let code = line.split('#').next()?.trim();
    let (lhs, rhs) = code.split_once('=')?;
    let name = lhs.split(':').next()?.trim();
    let valid_name = !name.is_empty()
        && name
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    let value: usize = rhs.trim().replace('_', "").parse().ok()?;
    valid_name.then(|| (name.to_string(), value))
}

/// Extract the kernel skeleton from annotated source.
///
/// Unknown directives become diagnostics. A missing `tile_id`, a `pid_map`
/// naming an undeclared axis, or broken dispatch nesting are errors.
pub fn parse_annotations(source: &str) -> Result<(KernelSkeleton, Vec<Diagnostic>), ParseError> {
    let mut sk = KernelSkeleton::default();
    let mut diags = Vec::new();
    let mut dispatch_open: Option<usize> = None;
    let mut pid_map_lines = Vec::new();
    for (i, raw) in source.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = raw.trim();
        let Some(body) = trimmed.strip_prefix(PREFIX) else {
            if let Some((name, value)) = parse_constant(trimmed) {
                sk.constants.insert(name, value);
            }
            continue;
        };
        let mut words = body.split_whitespace();
        let head = words.next().unwrap_or("");
        let rest: Vec<&str> = words.collect();
        let kind = match (head, rest.first().copied()) {
            ("axis_count", _) => DirectiveKind::AxisCount,
            ("tile_id", _) => DirectiveKind::TileId,
            ("dispatch", Some("begin")) | ("dispatch_begin", _) => DirectiveKind::DispatchBegin,
            ("dispatch", Some("end")) | ("dispatch_end", _) => DirectiveKind::DispatchEnd,
            ("pid_map", _) => DirectiveKind::PidMap,
            _ => {
                diags.push(Diagnostic {
                    line: line_no,
                    message: format!("unknown directive @sy.{}", body.trim()),
                });
                continue;
            }
        };
        let mut args = BTreeMap::new();
        for (pos, word) in rest.iter().enumerate() {
            match word.split_once('=') {
                Some((k, v)) => {
                    args.insert(k.to_string(), v.to_string());
                }
                None => {
                    args.insert(format!("_{pos}"), word.to_string());
                }
            }
        }
        match kind {
            DirectiveKind::AxisCount => {
                let name = args
                    .get("_0")
                    .cloned()
                    .ok_or_else(|| err(line_no, "axis_count needs an axis name"))?;
                let block_symbol = args
                    .get("block")
                    .cloned()
                    .ok_or_else(|| err(line_no, format!("axis_count {name} needs block=SYMBOL")))?;
                if sk.axes.iter().any(|a| a.name == name) {
                    return Err(err(line_no, format!("axis {name} declared twice")));
                }
                let reduction = args.values().any(|v| v == "reduction");
                sk.axes.push(SkeletonAxis {
                    name,
                    block_symbol,
                    reduction,
                    line: line_no,
                });
            }
            DirectiveKind::TileId => {
                let kind = match args.get("_0").map(String::as_str) {
                    Some("persistent") => SchedulerKind::Persistent,
                    Some("flat") | None => SchedulerKind::Flat,
                    Some(other) => {
                        return Err(err(line_no, format!("unknown tile scheduler {other:?}")))
                    }
                };
                sk.scheduler = Some(kind);
            }
            DirectiveKind::DispatchBegin => {
                if let Some(open) = dispatch_open {
                    return Err(err(
                        line_no,
                        format!("nested dispatch region (outer opened at line {open})"),
                    ));
                }
                dispatch_open = Some(line_no);
            }
            DirectiveKind::DispatchEnd => {
                if dispatch_open.take().is_none() {
                    return Err(err(line_no, "dispatch end without begin"));
                }
            }
            DirectiveKind::PidMap => {
                if dispatch_open.is_none() {
                    return Err(err(line_no, "pid_map outside a dispatch region"));
                }
                for (k, v) in args.iter().filter(|(k, _)| !k.starts_with('_')) {
                    sk.pid_map.push((k.clone(), v.clone()));
                }
                pid_map_lines.push(line_no);
            }
        }
        sk.directives.push(AnnotationDirective {
            kind,
            args,
            line: line_no,
        });
    }
    if let Some(open) = dispatch_open {
        return Err(err(open, "unclosed dispatch region"));
    }
    if sk.directives.is_empty() {
        diags.push(Diagnostic {
            line: 0,
            message: "no @sy directives found".into(),
        });
        return Ok((sk, diags));
    }
    if sk.scheduler.is_none() {
        return Err(err(0, "missing @sy.tile_id directive"));
    }
    for (axis, _) in &sk.pid_map {
        if !sk.axes.iter().any(|a| &a.name == axis) {
            let line = sk
                .directives
                .iter()
                .find(|d| d.kind == DirectiveKind::PidMap && d.args.contains_key(axis))
                .map_or(0, |d| d.line);
            return Err(err(line, format!("pid_map names undeclared axis {axis}")));
        }
    }
    for axis in sk.axes.iter().filter(|a| !a.reduction) {
        if !sk.pid_map.iter().any(|(a, _)| a == &axis.name) {
            diags.push(Diagnostic {
                line: axis.line,
                message: format!("spatial axis {} has no pid_map entry", axis.name),
            });
        }
    }
    for (axis, _) in &sk.pid_map {
        if sk.axes.iter().any(|a| &a.name == axis && a.reduction) {
            diags.push(Diagnostic {
                line: pid_map_lines.first().copied().unwrap_or(0),
                message: format!("reduction axis {axis} appears in pid_map"),
            });
        }
    }
    Ok((sk, diags))
}

impl KernelSkeleton {
    fn lookup(&self, extra: &BTreeMap<String, usize>, symbol: &str) -> Result<usize, KernelError> {
        if let Ok(v) = symbol.parse() {
            return Ok(v);
        }
        extra
            .get(symbol)
            .or_else(|| self.constants.get(symbol))
            .copied()
            .ok_or_else(|| KernelError::Unbound(symbol.to_string()))
    }

    /// Bind symbols and attach the GEMM access pattern `A[M,K]`, `B[N,K]` -> `C[M,N]`.
    ///
    /// `extra` overrides constants found in the source. Axis extents are
    /// looked up under the axis name; `NUM_SMS`, `ELEM_BYTES` and
    /// `FLOPS_PER_TILE` are optional.
    pub fn complete(&self, extra: &BTreeMap<String, usize>) -> Result<TileProgram, KernelError> {
        let scheduler = self
            .scheduler
            .ok_or_else(|| KernelError::Invalid("no tile scheduler directive".into()))?;
        let mut axes = Vec::new();
        for a in &self.axes {
            axes.push(AxisSpec {
                name: a.name.clone(),
                extent: self.lookup(extra, &a.name)?,
                block: self.lookup(extra, &a.block_symbol)?,
                reduction: a.reduction,
            });
        }
        let has = |n: &str| axes.iter().any(|a: &AxisSpec| a.name == n);
        if !(has("M") && has("N") && has("K")) {
            return Err(KernelError::Invalid(
                "only GEMM-shaped kernels (axes M, N, K) can be completed from annotations".into(),
            ));
        }
        let sm_count = self
            .lookup(extra, "NUM_SMS")
            .unwrap_or(super::DEFAULT_SM_COUNT);
        let elem_bytes = self.lookup(extra, "ELEM_BYTES").unwrap_or(2);
        let flops_per_tile = self.lookup(extra, "FLOPS_PER_TILE").ok().map(|f| f as f64);
        let p = TileProgram {
            axes,
            scheduler: Scheduler {
                kind: scheduler,
                sm_count,
            },
            reads: vec![Access::new("A", &["M", "K"]), Access::new("B", &["N", "K"])],
            writes: vec![Access::new("C", &["M", "N"])],
            elem_bytes,
            flops_per_tile,
            kernel: TileKernel::Gemm,
        };
        p.check()?;
        Ok(p)
    }
}

/// Emit annotated kernel text that parses back to `p`.
///
/// Only GEMM-shaped programs over tensors A, B, C round-trip exactly.
pub fn print_annotated(p: &TileProgram) -> String {
    let mut out = String::new();
    let block_sym = |a: &AxisSpec| format!("BLOCK_SIZE_{}", a.name);
    for a in &p.axes {
        let _ = writeln!(out, "{} = {}", a.name, a.extent);
        let _ = writeln!(out, "{} = {}", block_sym(a), a.block);
    }
    let _ = writeln!(out, "NUM_SMS = {}", p.scheduler.sm_count);
    let _ = writeln!(out, "ELEM_BYTES = {}", p.elem_bytes);
    if let Some(f) = p.flops_per_tile {
        let _ = writeln!(out, "FLOPS_PER_TILE = {}", f as u64);
    }
    out.push_str("\ndef kernel_gemm(a_ptr, b_ptr, c_ptr):\n");
    out.push_str("    start_pid = tl.program_id(axis=0)\n");
    for a in &p.axes {
        let suffix = if a.reduction { " reduction" } else { "" };
        let _ = writeln!(
            out,
            "    {PREFIX}axis_count {} block={}{}",
            a.name,
            block_sym(a),
            suffix
        );
    }
    let sched = match p.scheduler.kind {
        SchedulerKind::Persistent => "persistent",
        SchedulerKind::Flat => "flat",
    };
    let _ = writeln!(out, "    {PREFIX}tile_id {sched}");
    out.push_str("    tile_id = start_pid - NUM_SMS\n");
    out.push_str("    for _ in range(0, tiles_per_SM):\n");
    out.push_str("        tile_id += NUM_SMS\n");
    let _ = writeln!(out, "        {PREFIX}dispatch begin");
    let map: Vec<String> = p
        .spatial_axes()
        .map(|a| format!("{}=pid_{}", a.name, a.name.to_lowercase()))
        .collect();
    let _ = writeln!(out, "        {PREFIX}pid_map {}", map.join(" "));
    out.push_str("        pid = get_pid(tile_id)\n");
    let _ = writeln!(out, "        {PREFIX}dispatch end");
    out
}
