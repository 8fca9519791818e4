use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fuselab_core::metrics::{precision_recall, EvalReport};
use fuselab_core::softmask::{build_soft_stack, Connectivity, SoftMaskConfig, ThresholdMode};
use fuselab_core::svol::{decode_svol, encode_svol};
use fuselab_core::synth::{generate_phantom, simulate_raters, PhantomSpec, RaterSpec};
use fuselab_core::{
    binarize, fuse, ExpertStack, FusionConfig, FusionResult, MStepMode, Prior, Variant, VolumeGrid,
    VolumeKind,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::args::{
    EvalArgs, FuseArgs, GlobalArgs, MStepName, SimulateArgs, SoftmaskArgs, VariantName,
};
use crate::error::{CliError, CliResult};
use crate::output::{Manifest, Staged, MANIFEST_NAME};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Reads a settings file. A run manifest contributes its `config` object.
fn load_config(path: Option<&Path>) -> CliResult<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| {
        CliError::usage(format!("config {} is not valid JSON: {e}", path.display()))
    })?;
    match value {
        Value::Object(mut map) if map.contains_key("command") && map.contains_key("config") => {
            Ok(map.remove("config"))
        }
        other => Ok(Some(other)),
    }
}

fn settings_from<T: DeserializeOwned + Default>(value: Option<Value>, what: &str) -> CliResult<T> {
    match value {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v)
            .map_err(|e| CliError::usage(format!("invalid {what} config: {e}"))),
    }
}

fn read_grid(path: &Path) -> CliResult<VolumeGrid> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    decode_svol(&bytes).map_err(|e| CliError::from_core(&path.display().to_string(), e))
}

fn expert_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_stack(paths: &[PathBuf]) -> CliResult<ExpertStack> {
    let grids = paths
        .iter()
        .map(|p| read_grid(p))
        .collect::<CliResult<Vec<_>>>()?;
    let ids = paths.iter().map(|p| expert_id(p)).collect();
    ExpertStack::new(grids, ids).map_err(|e| CliError::from_core("expert stack", e))
}

fn encode(grid: &VolumeGrid) -> CliResult<Vec<u8>> {
    encode_svol(grid).map_err(|e| CliError::io(format!("cannot encode grid: {e}")))
}

struct Run<'a> {
    command: &'static str,
    global: &'a GlobalArgs,
    started: Instant,
}

impl Run<'_> {
    fn finish<C: Serialize>(
        self,
        mut staged: Staged,
        config: &C,
        inputs: Vec<PathBuf>,
        dir: &Path,
        seed: Option<u64>,
    ) -> CliResult<Manifest> {
        let outputs = staged
            .names()
            .chain([MANIFEST_NAME])
            .map(|n| dir.join(n))
            .collect();
        let manifest = Manifest {
            command: self.command,
            tool_version: VERSION,
            config: serde_json::to_value(config)
                .map_err(|e| CliError::io(format!("cannot serialize config: {e}")))?,
            inputs: inputs.clone(),
            outputs,
            seed,
            threads: rayon::current_num_threads(),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        staged.add_json(MANIFEST_NAME, &manifest)?;
        staged.commit(dir, &inputs, self.global.force)?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseSettings {
    pub variant: VariantName,
    pub samples: usize,
    pub seed: u64,
    pub mstep_mode: MStepMode,
    pub prior: Prior,
    pub init_sensitivity: f64,
    pub init_specificity: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub enumeration_guard: usize,
    pub binarize: bool,
    /// Used only when `--flair` is given.
    pub softmask: SoftMaskConfig,
}

impl Default for FuseSettings {
    fn default() -> Self {
        let f = FusionConfig::default();
        FuseSettings {
            variant: VariantName::Binary,
            samples: 1000,
            seed: 0,
            mstep_mode: f.mstep_mode,
            prior: f.prior,
            init_sensitivity: f.init_sensitivity,
            init_specificity: f.init_specificity,
            max_iters: f.max_iters,
            tol: f.tol,
            enumeration_guard: f.enumeration_guard,
            binarize: false,
            softmask: SoftMaskConfig::default(),
        }
    }
}

impl FuseSettings {
    fn fusion_config(&self) -> FusionConfig {
        let variant = match self.variant {
            VariantName::Binary => Variant::Binary,
            VariantName::SoftExact => Variant::SoftExact,
            VariantName::SoftMc => Variant::SoftExactMc {
                samples: self.samples,
                seed: self.seed,
            },
            VariantName::Simplified => Variant::Simplified,
        };
        FusionConfig {
            prior: self.prior,
            init_sensitivity: self.init_sensitivity,
            init_specificity: self.init_specificity,
            max_iters: self.max_iters,
            tol: self.tol,
            variant,
            mstep_mode: self.mstep_mode,
            enumeration_guard: self.enumeration_guard,
        }
    }
}

fn parse_prior(s: &str) -> CliResult<Prior> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Prior::AUTO);
    }
    s.parse::<f64>().map(Prior::Fixed).map_err(|_| {
        CliError::usage(format!(
            "--prior expects a probability or \"auto\", got {s:?}"
        ))
    })
}

#[derive(Debug, Serialize)]
struct ParamsReport<'a> {
    variant: VariantName,
    ids: &'a [String],
    sensitivity: &'a [f64],
    specificity: &'a [f64],
    prior: f64,
    ll_trace: &'a [f64],
    iters_run: usize,
    converged: bool,
    objective_approximate: bool,
}

pub fn fuse_cmd(global: &GlobalArgs, args: FuseArgs) -> CliResult<Manifest> {
    let run = Run {
        command: "fuse",
        global,
        started: Instant::now(),
    };
    let mut s: FuseSettings = settings_from(load_config(global.config.as_deref())?, "fuse")?;
    if let Some(v) = args.variant {
        s.variant = v;
    }
    if let Some(n) = args.samples {
        s.samples = n;
    }
    if let Some(seed) = global.seed {
        s.seed = seed;
    }
    if let Some(m) = args.mstep {
        s.mstep_mode = match m {
            MStepName::ExpectedCount => MStepMode::ExpectedCount,
            MStepName::PluginMean => MStepMode::PluginMean,
        };
    }
    if let Some(p) = &args.prior {
        s.prior = parse_prior(p)?;
    }
    if let Some(n) = args.max_iters {
        s.max_iters = n;
    }
    if let Some(t) = args.tol {
        s.tol = t;
    }
    s.binarize |= args.binarize;

    let config = s.fusion_config();
    config
        .validate()
        .map_err(|e| CliError::from_core("fuse", e))?;
    if s.variant == VariantName::SoftExact && args.inputs.len() > s.enumeration_guard {
        return Err(CliError::from_core(
            "fuse",
            fuselab_core::Error::Capacity {
                experts: args.inputs.len(),
                guard: s.enumeration_guard,
            },
        ));
    }
    if args.flair.is_some() {
        s.softmask
            .validate()
            .map_err(|e| CliError::from_core("softmask", e))?;
    }

    let mut inputs = args.inputs.clone();
    let mut stack = read_stack(&args.inputs)?;
    match (s.variant, stack.kind()) {
        (VariantName::Binary, VolumeKind::SoftLabel) => {
            return Err(CliError::usage(
                "soft inputs need a soft variant (soft-exact, soft-mc or simplified)",
            ));
        }
        (VariantName::Binary, _) if args.flair.is_some() => {
            return Err(CliError::usage("--flair only applies to soft variants"));
        }
        (VariantName::Binary, _) => {}
        (_, VolumeKind::BinaryLabel) => {
            stack = match &args.flair {
                Some(path) => {
                    let flair = read_grid(path)?;
                    inputs.push(path.clone());
                    build_soft_stack(&stack, &flair, &s.softmask)
                        .map_err(|e| CliError::from_core("softmask", e))?
                }
                None => stack
                    .into_soft()
                    .map_err(|e| CliError::from_core("expert stack", e))?,
            };
        }
        (_, _) if args.flair.is_some() => {
            return Err(CliError::usage("--flair needs binary inputs"));
        }
        _ => {}
    }

    let result: FusionResult =
        fuse(&stack, &config).map_err(|e| CliError::from_core("fusion", e))?;
    let mut staged = Staged::default();
    staged.add("posterior.svol", encode(&result.posterior)?);
    if s.binarize {
        let cons = binarize(&result.posterior).map_err(|e| CliError::from_core("binarize", e))?;
        staged.add("consensus.svol", encode(&cons)?);
    }
    staged.add_json(
        "params.json",
        &ParamsReport {
            variant: s.variant,
            ids: stack.ids(),
            sensitivity: &result.params.sensitivity,
            specificity: &result.params.specificity,
            prior: result.prior,
            ll_trace: &result.ll_trace,
            iters_run: result.iters_run,
            converged: result.converged,
            objective_approximate: result.objective_approximate,
        },
    )?;
    if !result.converged {
        eprintln!(
            "fuselab: EM stopped after {} iterations without converging",
            result.iters_run
        );
    }
    let seed = (s.variant == VariantName::SoftMc).then_some(s.seed);
    run.finish(staged, &s, inputs, &args.output, seed)
}

fn parse_threshold_mode(s: &str) -> CliResult<ThresholdMode> {
    let bad = || {
        CliError::usage(format!(
            "--threshold-mode expects percentile:<p> or fixed:<value>, got {s:?}"
        ))
    };
    let (kind, value) = s.split_once(':').ok_or_else(bad)?;
    let v: f64 = value.trim().parse().map_err(|_| bad())?;
    match kind.trim() {
        "percentile" => Ok(ThresholdMode::LesionPercentile(v)),
        "fixed" => Ok(ThresholdMode::FixedValue(v)),
        _ => Err(bad()),
    }
}

pub fn softmask_cmd(global: &GlobalArgs, args: SoftmaskArgs) -> CliResult<Manifest> {
    let run = Run {
        command: "softmask",
        global,
        started: Instant::now(),
    };
    let mut cfg: SoftMaskConfig =
        settings_from(load_config(global.config.as_deref())?, "softmask")?;
    if let Some(g) = args.gamma {
        cfg.gamma = g;
    }
    if let Some(r) = args.ratio {
        cfg.target_volume_ratio = r;
    }
    if let Some(t) = &args.threshold_mode {
        cfg.threshold_mode = parse_threshold_mode(t)?;
    }
    if let Some(c) = args.connectivity {
        cfg.connectivity = Connectivity::from_neighbors(c).ok_or_else(|| {
            CliError::usage(format!("--connectivity must be 6, 18 or 26, got {c}"))
        })?;
    }
    if let Some(n) = args.max_dilation_iters {
        cfg.max_dilation_iters = n;
    }
    cfg.validate()
        .map_err(|e| CliError::from_core("softmask", e))?;

    let stack = read_stack(&args.inputs)?;
    let flair = read_grid(&args.flair)?;
    let soft =
        build_soft_stack(&stack, &flair, &cfg).map_err(|e| CliError::from_core("softmask", e))?;

    let mut staged = Staged::default();
    for (path, grid) in args.inputs.iter().zip(soft.experts()) {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        staged.add(name, encode(grid)?);
    }
    let mut inputs = args.inputs.clone();
    inputs.push(args.flair.clone());
    run.finish(staged, &cfg, inputs, &args.output, None)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSettings {
    pub phantom: PhantomSpec,
    pub raters: RaterSpec,
}

pub fn simulate_cmd(global: &GlobalArgs, args: SimulateArgs) -> CliResult<Manifest> {
    let run = Run {
        command: "simulate",
        global,
        started: Instant::now(),
    };
    let path = args
        .spec
        .as_deref()
        .or(global.config.as_deref())
        .ok_or_else(|| CliError::usage("simulate needs a config file (positional or --config)"))?;
    let value = load_config(Some(path))?;
    let mut s: SimulateSettings = match value {
        Some(v) => serde_json::from_value(v)
            .map_err(|e| CliError::usage(format!("invalid simulate config: {e}")))?,
        None => unreachable!(),
    };
    if let Some(seed) = global.seed {
        s.phantom.seed = seed;
        s.raters.seed = seed;
    }
    s.phantom
        .validate()
        .map_err(|e| CliError::from_core("phantom", e))?;
    s.raters.validate().map_err(|e| match e {
        fuselab_core::Error::EmptyStack => {
            CliError::usage("raters: at least one rater is required")
        }
        other => CliError::from_core("raters", other),
    })?;

    let (truth, flair) =
        generate_phantom(&s.phantom).map_err(|e| CliError::from_core("phantom", e))?;
    let stack = simulate_raters(&truth, &s.raters).map_err(|e| CliError::from_core("raters", e))?;

    let mut staged = Staged::default();
    staged.add("truth.svol", encode(&truth)?);
    staged.add("flair.svol", encode(&flair)?);
    for (id, grid) in stack.ids().iter().zip(stack.experts()) {
        staged.add(format!("expert_{id}.svol"), encode(grid)?);
    }
    let seed = Some(s.phantom.seed);
    run.finish(staged, &s, vec![path.to_path_buf()], &args.output, seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub threshold: f64,
    pub binarize_truth: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            threshold: 0.5,
            binarize_truth: false,
        }
    }
}

pub fn eval_cmd(global: &GlobalArgs, args: EvalArgs) -> CliResult<(EvalReport, Option<Manifest>)> {
    let run = Run {
        command: "eval",
        global,
        started: Instant::now(),
    };
    let mut s: EvalSettings = settings_from(load_config(global.config.as_deref())?, "eval")?;
    if let Some(t) = args.threshold {
        s.threshold = t;
    }
    s.binarize_truth |= args.binarize_truth;
    if !(s.threshold > 0.0 && s.threshold < 1.0) {
        return Err(CliError::usage(format!(
            "--threshold must lie in (0, 1), got {}",
            s.threshold
        )));
    }
    let truth = read_grid(&args.truth)?;
    let pred = read_grid(&args.pred)?;
    let report = precision_recall(&truth, &pred, s.threshold, s.binarize_truth)
        .map_err(|e| CliError::from_core("eval", e))?;
    let manifest = match &args.output {
        Some(dir) => {
            let mut staged = Staged::default();
            staged.add_json("report.json", &report)?;
            Some(run.finish(
                staged,
                &s,
                vec![args.truth.clone(), args.pred.clone()],
                dir,
                None,
            )?)
        }
        None => None,
    };
    Ok((report, manifest))
}
