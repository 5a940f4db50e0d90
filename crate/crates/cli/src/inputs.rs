//! Run manifests, flags and the pipeline inputs they resolve to.

use crate::CliError;
use chunkflow::backend::BackendProfile;
use chunkflow::kernel::parse_annotations;
use chunkflow::kernel::TileProgram;
use chunkflow::lowering::{lower_loop_ir, lower_partition_ir, LoopIR, LoweringPath, PartitionIR};
use chunkflow::region::TensorSpec;
use chunkflow::schedule::CommSchedule;
use chunkflow::sim::SimConfig;
use chunkflow::templates::{default_mesh, Template, TemplateParams};
use clap::Args;
use serde::Deserialize;
use std::path::{Path, PathBuf};

/// Flags shared by the pipeline subcommands. Each overrides the same key
/// of `--manifest`.
#[derive(Args, Debug, Clone, Default)]
pub struct InputArgs {
    /// JSON run manifest; relative paths in it resolve against its directory.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Tile program: `.json`, or kernel source with `@sy.` annotations.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Built-in GEMM kernel instead of --kernel.
    #[arg(long, value_name = "M,N,K[,BM,BN,BK]")]
    pub gemm: Option<String>,
    /// Communication schedule (JSON).
    #[arg(long, conflicts_with_all = ["template", "ir"])]
    pub schedule: Option<PathBuf>,
    /// Template name, instantiated over the kernel's operand.
    #[arg(long, conflicts_with = "ir")]
    pub template: Option<String>,
    /// Partition IR or loop IR (JSON).
    #[arg(long)]
    pub ir: Option<PathBuf>,
    /// Lowering path for --ir.
    #[arg(long, value_name = "direct|template|synth")]
    pub path: Option<String>,
    #[arg(long)]
    pub world_size: Option<usize>,
    /// Pipeline stages per template transfer.
    #[arg(long)]
    pub split: Option<usize>,
    /// Tensor shape for a template without a kernel.
    #[arg(long, value_name = "ROWSxCOLS")]
    pub shape: Option<String>,
    /// Backend calibration profile (JSON); the built-in H100 profile otherwise.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Simulator configuration (JSON).
    #[arg(long)]
    pub sim: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunManifest {
    kernel: Option<PathBuf>,
    gemm: Option<String>,
    schedule: Option<PathBuf>,
    template: Option<String>,
    ir: Option<PathBuf>,
    path: Option<String>,
    world_size: Option<usize>,
    split: Option<usize>,
    shape: Option<String>,
    profile: Option<PathBuf>,
    sim: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::io(format!("{}: file not found", path.display()))
        } else {
            CliError::io(format!("{}: {e}", path.display()))
        }
    })
}

pub fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
    Ok(p)
}

impl InputArgs {
    /// Fold the manifest under the flags.
    pub fn merged(&self) -> Result<InputArgs, CliError> {
        let Some(mpath) = &self.manifest else {
            return Ok(self.clone());
        };
        let m: RunManifest = serde_json::from_str(&read(mpath)?)
            .map_err(|e| CliError::parse(format!("{}: {e}", mpath.display())))?;
        let base = mpath.parent().unwrap_or(Path::new("."));
        let rel = |p: Option<PathBuf>| p.map(|p| if p.is_absolute() { p } else { base.join(p) });
        let a = self.clone();
        Ok(InputArgs {
            manifest: a.manifest,
            kernel: a.kernel.or(rel(m.kernel)),
            gemm: a.gemm.or(m.gemm),
            schedule: a.schedule.or(rel(m.schedule)),
            template: a.template.or(m.template),
            ir: a.ir.or(rel(m.ir)),
            path: a.path.or(m.path),
            world_size: a.world_size.or(m.world_size),
            split: a.split.or(m.split),
            shape: a.shape.or(m.shape),
            profile: a.profile.or(rel(m.profile)),
            sim: a.sim.or(rel(m.sim)),
            seed: a.seed.or(m.seed),
            out: a.out.or(rel(m.out)),
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn kernel(&self) -> Result<TileProgram, CliError> {
        Ok(self.kernel_with_diagnostics()?.0)
    }

    /// The kernel plus annotation diagnostics. Files ending in `.json` are
    /// tile programs; anything else is annotated kernel source.
    pub fn kernel_with_diagnostics(&self) -> Result<(TileProgram, Vec<String>), CliError> {
        if let Some(p) = &self.kernel {
            let text = read(p)?;
            let bad = |e: String| CliError::parse(format!("{}: {e}", p.display()));
            if p.extension().is_some_and(|e| e == "json") {
                return Ok((
                    TileProgram::from_json(&text).map_err(|e| bad(e.to_string()))?,
                    Vec::new(),
                ));
            }
            let (sk, diags) = parse_annotations(&text).map_err(|e| bad(e.to_string()))?;
            let prog = sk
                .complete(&Default::default())
                .map_err(|e| bad(e.to_string()))?;
            let diags = diags
                .iter()
                .map(|d| format!("{}:{}: {}", p.display(), d.line, d.message))
                .collect();
            return Ok((prog, diags));
        }
        Ok((self.builtin_kernel()?, Vec::new()))
    }

    fn builtin_kernel(&self) -> Result<TileProgram, CliError> {
        if let Some(g) = &self.gemm {
            let v = parse_list::<usize>(g, "--gemm")?;
            return match v[..] {
                [m, n, k] => Ok(TileProgram::gemm(m, n, k, 128, 128, 64)),
                [m, n, k, bm, bn, bk] => Ok(TileProgram::gemm(m, n, k, bm, bn, bk)),
                _ => Err(CliError::parse("--gemm takes M,N,K or M,N,K,BM,BN,BK")),
            };
        }
        Ok(TileProgram::empty())
    }

    pub fn profile(&self) -> Result<BackendProfile, CliError> {
        match &self.profile {
            Some(p) => BackendProfile::from_json(&read(p)?)
                .map_err(|e| CliError::parse(format!("{}: {e}", p.display()))),
            None => Ok(BackendProfile::h100()),
        }
    }

    pub fn sim(&self) -> Result<SimConfig, CliError> {
        match &self.sim {
            Some(p) => SimConfig::from_json(&read(p)?)
                .map_err(|e| CliError::parse(format!("{}: {e}", p.display()))),
            None => Ok(SimConfig::default()),
        }
    }

    pub fn lowering_path(&self) -> Result<LoweringPath, CliError> {
        self.path
            .as_deref()
            .unwrap_or("template")
            .parse()
            .map_err(|e: chunkflow::lowering::LoweringError| CliError::parse(e.to_string()))
    }

    /// Lower `--ir`, telling partition IR from loop IR by its keys.
    pub fn lower_ir(&self, path: &Path) -> Result<CommSchedule, CliError> {
        let text = read(path)?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?;
        let how = self.lowering_path()?;
        let bad = |e: chunkflow::lowering::LoweringError| {
            CliError::parse(format!("{}: {e}", path.display()))
        };
        let lowered = if v.get("mesh").is_some() {
            lower_partition_ir(&PartitionIR::from_json(&text).map_err(bad)?, how)
        } else {
            lower_loop_ir(&LoopIR::from_json(&text).map_err(bad)?, how)
        };
        lowered.map_err(|e| CliError::stage("lower", e.to_string()))
    }

    pub fn schedule(&self, kernel: &TileProgram) -> Result<CommSchedule, CliError> {
        if let Some(p) = &self.schedule {
            return CommSchedule::from_json(&read(p)?)
                .map_err(|e| CliError::parse(format!("{}: {e}", p.display())));
        }
        if let Some(p) = &self.ir {
            return self.lower_ir(p);
        }
        let Some(name) = &self.template else {
            return Err(CliError::parse(
                "one of --schedule, --template or --ir is required",
            ));
        };
        let t: Template = name.parse().map_err(CliError::parse)?;
        let w = self
            .world_size
            .ok_or_else(|| CliError::parse("--template needs --world-size"))?;
        let tensor = self.template_tensor(t, kernel)?;
        let mut params = TemplateParams::new(w, tensor, 0).with_stages(self.split.unwrap_or(1));
        if t == Template::Allgather2dSwizzle {
            let mesh = default_mesh(w);
            params = params.with_mesh(mesh.intra, mesh.inter);
        }
        t.instantiate(&params)
            .map_err(|e| CliError::stage("template", e.to_string()))
    }

    /// Gather templates move the kernel's first input, reduce templates its
    /// first output; without a kernel, `--shape` names tensor `X`.
    fn template_tensor(&self, t: Template, kernel: &TileProgram) -> Result<TensorSpec, CliError> {
        if let Some(shape) = &self.shape {
            let dims = shape
                .split('x')
                .map(|d| d.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| {
                    CliError::parse(format!("bad --shape {shape:?}, expected ROWSxCOLS"))
                })?;
            return Ok(TensorSpec::new("X", dims, 2));
        }
        let access = if t.is_gather() {
            kernel.reads.first()
        } else {
            kernel.writes.first()
        };
        let id = access
            .map(|a| a.tensor.clone())
            .ok_or_else(|| CliError::parse("--template needs a kernel or --shape"))?;
        kernel
            .tensor_specs()
            .into_iter()
            .find(|s| s.tensor_id == id)
            .ok_or_else(|| CliError::parse(format!("kernel has no shape for {id}")))
    }
}

pub fn parse_list<T: std::str::FromStr>(text: &str, flag: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| CliError::parse(format!("{flag} {s:?}: {e}")))
        })
        .collect()
}
