//! Command implementations: protect a directory of images, evaluate the
//! results, sweep distortion robustness, walk an ablation axis.
//!
//! Each command validates its config, fans out over images on a rayon
//! pool, and writes every artifact atomically with the config hash and
//! seed embedded. Reruns with identical inputs produce byte-identical
//! files: nothing nondeterministic (wall time, thread interleaving)
//! reaches an output file, and worker count only changes scheduling.

use crate::blackbox::protect_blackbox;
use crate::diffusion::{LatentImage, NoiseSchedule};
use crate::distortions::{
    apply, auc, codec_version, sweep, DistortionKind, DistortionSpec, RobustnessCurve,
    SweepMetric,
};
use crate::error::{Result, VeilError};
use crate::metrics::{
    build_report, check_aligned, id_similarity, l2_distance, psnr_display, write_report_csv,
    write_report_summary, DefenseTask, EvaluationReport, MetricsConfig, ReportContext,
};
use crate::models::weights::{
    denoiser_from_weights, load_weights, manipulator_from_weights, WeightsFile,
};
use crate::models::{
    make_toy_denoiser, make_toy_identity_encoder, make_toy_manipulator, wrap_black_box, Denoiser,
    DenoiserKind, DifferentiableMap, ForwardModel, ManipulatorKind,
};
use crate::pipeline::config::{
    apply_axis_value, axis_value_label, canonical_toml, config_hash, AblationPlan, DefenseMode,
    ModelSelection, RunConfig,
};
use crate::pipeline::pngio::{
    image_name, list_png_files, read_image_dir, read_png, write_bytes_atomic, write_png_atomic,
    ArtifactMeta,
};
use crate::tensor::{derive_seed, hash_bytes, Tensor};
use crate::whitebox::protect_whitebox;
use rayon::prelude::*;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const CURVES_SCHEMA_VERSION: u32 = 1;
pub const ABLATION_SCHEMA_VERSION: u32 = 1;

/// Runs `f` on a dedicated pool of `workers` threads, or on the global
/// pool when no count is given. Parallelism only affects scheduling, so
/// outputs do not depend on this knob.
pub fn with_pool<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> Result<T> + Send,
) -> Result<T> {
    match workers {
        None => f(),
        Some(0) => Err(VeilError::Parameter("workers must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| VeilError::Parameter(format!("cannot build a {n}-worker pool: {e}")))?
            .install(f),
    }
}

/// Manipulator recipe resolved once per run; instantiated per image so
/// query counters and any internal state never cross images.
enum ManipSource {
    Toy { kind: ManipulatorKind, seed: u64 },
    File(WeightsFile),
}

impl ManipSource {
    fn resolve(sel: &ModelSelection) -> Result<Self> {
        match (&sel.manipulator, &sel.manipulator_weights) {
            (Some(kind), None) => Ok(ManipSource::Toy {
                kind: *kind,
                seed: sel.manipulator_seed,
            }),
            (None, Some(path)) => Ok(ManipSource::File(load_weights(path).map_err(|e| {
                e.with_context(format!("manipulator weights {}", path.display()))
            })?)),
            _ => Err(VeilError::Config(
                "select a manipulator: a toy kind or a weights file".into(),
            )),
        }
    }

    fn build(&self) -> Result<Box<dyn DifferentiableMap>> {
        match self {
            ManipSource::Toy { kind, seed } => make_toy_manipulator(*seed, *kind),
            ManipSource::File(w) => manipulator_from_weights(w),
        }
    }
}

enum DenSource {
    Toy { kind: DenoiserKind, seed: u64 },
    File(WeightsFile),
}

impl DenSource {
    fn resolve(sel: &ModelSelection) -> Result<Self> {
        match (&sel.denoiser, &sel.denoiser_weights) {
            (Some(kind), None) => Ok(DenSource::Toy {
                kind: *kind,
                seed: sel.denoiser_seed,
            }),
            (None, Some(path)) => Ok(DenSource::File(load_weights(path).map_err(|e| {
                e.with_context(format!("denoiser weights {}", path.display()))
            })?)),
            _ => Err(VeilError::Config(
                "select a denoiser: a toy kind or a weights file".into(),
            )),
        }
    }

    fn build(&self) -> Result<Box<dyn Denoiser>> {
        match self {
            DenSource::Toy { kind, seed } => make_toy_denoiser(*seed, *kind),
            DenSource::File(w) => denoiser_from_weights(w),
        }
    }
}

struct RunContext {
    hash: String,
    sched: NoiseSchedule,
    man_src: ManipSource,
    den_src: DenSource,
}

impl RunContext {
    fn prepare(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(RunContext {
            hash: config_hash(cfg)?,
            sched: cfg.schedule.build()?,
            man_src: ManipSource::resolve(&cfg.models)?,
            den_src: DenSource::resolve(&cfg.models)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ProtectOutcome {
    pub protected_dir: PathBuf,
    pub traces_dir: PathBuf,
    pub images: usize,
}

fn protect_one(
    cfg: &RunConfig,
    ctx: &RunContext,
    path: &Path,
    name: &str,
    protected_dir: &Path,
    traces_dir: &Path,
) -> Result<()> {
    let (img, _) = read_png(path)?;
    let result = match cfg.mode {
        DefenseMode::Whitebox => {
            let wb = cfg.whitebox_settings()?;
            let man = ctx.man_src.build()?;
            let den = ctx.den_src.build()?;
            protect_whitebox(&img, man.as_ref(), den.as_ref(), &wb, &ctx.sched)?
        }
        DefenseMode::Blackbox => {
            let mut bb = cfg.blackbox_settings()?;
            // estimator noise differs per image but not per rerun
            bb.nes.seed = derive_seed(cfg.seed, &[hash_bytes(name.as_bytes())]);
            let man = wrap_black_box(ctx.man_src.build()?);
            let den = ctx.den_src.build()?;
            protect_blackbox(&img, &man, den.as_ref(), &bb, &ctx.sched)?
        }
    };

    let meta = ArtifactMeta {
        config_hash: ctx.hash.clone(),
        seed: cfg.seed,
    };
    write_png_atomic(
        &protected_dir.join(format!("{name}.png")),
        &result.adversarial_image.data,
        &meta,
    )?;

    let mut buf = Vec::new();
    writeln!(
        buf,
        "{}",
        serde_json::json!({
            "record": "meta",
            "schema": TRACE_SCHEMA_VERSION,
            "image": name,
            "mode": cfg.mode.to_string(),
            "config_hash": ctx.hash,
            "seed": cfg.seed,
        })
    )?;
    for ev in &result.trace {
        let line = serde_json::to_string(ev)
            .map_err(|e| VeilError::Format(format!("trace record: {e}")))?;
        writeln!(buf, "{line}")?;
    }
    let mut tail = serde_json::json!({
        "record": "summary",
        "image": name,
        "events": result.trace.len(),
    });
    if let Some(q) = result.total_queries {
        tail["total_queries"] = serde_json::Value::from(q);
    }
    writeln!(buf, "{tail}")?;
    write_bytes_atomic(&traces_dir.join(format!("{name}.jsonl")), &buf)?;
    Ok(())
}

/// Protects every PNG in the input directory. All images are attempted;
/// each failure leaves a `<name>.error.txt` sidecar next to the outputs
/// and the first failure (in name order) is returned afterwards.
pub fn cmd_protect(cfg: &RunConfig, workers: Option<usize>) -> Result<ProtectOutcome> {
    with_pool(workers, || run_protect(cfg))
}

fn run_protect(cfg: &RunConfig) -> Result<ProtectOutcome> {
    let ctx = RunContext::prepare(cfg)?;
    let files = list_png_files(&cfg.input_dir)?;
    let protected_dir = cfg.output_dir.join("protected");
    let traces_dir = cfg.output_dir.join("traces");
    std::fs::create_dir_all(&protected_dir)?;
    std::fs::create_dir_all(&traces_dir)?;
    write_bytes_atomic(
        &cfg.output_dir.join("run_config.toml"),
        canonical_toml(cfg)?.as_bytes(),
    )?;

    let total = files.len();
    let results: Vec<(String, Result<()>)> = files
        .par_iter()
        .map(|path| {
            let name = image_name(path);
            let r = protect_one(cfg, &ctx, path, &name, &protected_dir, &traces_dir);
            match &r {
                Ok(()) => eprintln!("protect [{}]: {name} done", cfg.mode),
                Err(e) => eprintln!("protect [{}]: {name} FAILED: {e}", cfg.mode),
            }
            (name, r)
        })
        .collect();

    let mut first_failure: Option<(String, VeilError)> = None;
    let mut ok = 0usize;
    for (name, r) in results {
        match r {
            Ok(()) => ok += 1,
            Err(e) => {
                let sidecar = protected_dir.join(format!("{name}.error.txt"));
                write_bytes_atomic(&sidecar, format!("{e}\n").as_bytes())?;
                if first_failure.is_none() {
                    first_failure = Some((name, e));
                }
            }
        }
    }
    if let Some((name, e)) = first_failure {
        return Err(e.with_context(format!(
            "image {name} ({ok}/{total} images protected, failures have .error.txt sidecars)"
        )));
    }
    eprintln!("protect [{}]: {ok}/{total} images done", cfg.mode);
    Ok(ProtectOutcome {
        protected_dir,
        traces_dir,
        images: ok,
    })
}

fn identity_encoder(models: &ModelSelection) -> Result<Arc<crate::models::IdentityEncoder>> {
    Ok(Arc::new(make_toy_identity_encoder(
        models.encoder_seed,
        models.encoder_dim,
    )?))
}

/// Compares the input directory against `<output>/protected` and writes
/// `report.csv` plus `report_summary.txt` into the output directory.
pub fn cmd_evaluate(cfg: &RunConfig, workers: Option<usize>) -> Result<EvaluationReport> {
    with_pool(workers, || run_evaluate(cfg))
}

fn run_evaluate(cfg: &RunConfig) -> Result<EvaluationReport> {
    let ctx = RunContext::prepare(cfg)?;
    let clean = read_image_dir(&cfg.input_dir).map_err(|e| e.with_context("clean set"))?;
    let adv = read_image_dir(&cfg.output_dir.join("protected"))
        .map_err(|e| e.with_context("adversarial set"))?;
    evaluate_loaded(cfg, &ctx, &clean, &adv)
}

fn evaluate_loaded(
    cfg: &RunConfig,
    ctx: &RunContext,
    clean: &[(String, LatentImage)],
    adv: &[(String, LatentImage)],
) -> Result<EvaluationReport> {
    let man = ctx.man_src.build()?;
    let mcfg = cfg.metrics.to_metrics_config(identity_encoder(&cfg.models)?);
    let rctx = ReportContext {
        config_hash: ctx.hash.clone(),
        seed: cfg.seed,
    };
    let report = build_report(
        clean,
        adv,
        man.as_ref() as &dyn ForwardModel,
        cfg.metrics.task,
        &mcfg,
        &rctx,
    )?;

    let mut csv_buf = Vec::new();
    write_report_csv(&mut csv_buf, &report)?;
    write_bytes_atomic(&cfg.output_dir.join("report.csv"), &csv_buf)?;

    let mut sum_buf = Vec::new();
    write_report_summary(&mut sum_buf, &report)?;
    writeln!(
        sum_buf,
        "note: both sides pass through 8-bit PNG interchange, so the [-1,1] \
         to [0,255] rounding of the adversarial image is part of what is measured"
    )?;
    write_bytes_atomic(&cfg.output_dir.join("report_summary.txt"), &sum_buf)?;
    eprintln!(
        "evaluate [{}]: {} images, dsr {:.4}",
        cfg.metrics.task,
        report.rows.len(),
        report.dsr
    );
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    /// One curve per family, report order (jpeg, gaussian_blur,
    /// average_blur, downscale).
    pub curves: Vec<RobustnessCurve>,
    /// Area under each curve, same order.
    pub aucs: [f64; 4],
    pub avg: f64,
}

/// The batch-level success rate at one distortion grid point: the same
/// per-image criterion the evaluation report applies, on distorted
/// adversarial outputs.
fn dsr_sweep_metric(task: DefenseTask, mcfg: MetricsConfig) -> Box<SweepMetric<'static>> {
    match task {
        DefenseTask::AttributeEditing => Box::new(move |samples| {
            let mut hits = 0usize;
            for s in samples {
                if l2_distance(s.clean_out, &s.distorted_out)? > mcfg.dsr_l2_threshold {
                    hits += 1;
                }
            }
            Ok(hits as f64 / samples.len() as f64)
        }),
        DefenseTask::FaceSwapping => Box::new(move |samples| {
            let mut hits = 0usize;
            for s in samples {
                let sim =
                    id_similarity(&s.clean.data, &s.distorted_out, &mcfg.identity_encoder)?;
                if sim < mcfg.dsr_idsim_threshold {
                    hits += 1;
                }
            }
            Ok(hits as f64 / samples.len() as f64)
        }),
    }
}

/// A one-point grid reads as a constant measurement over the unit axis;
/// its area is the value itself. Larger grids integrate trapezoidally.
fn curve_area(curve: &RobustnessCurve) -> Result<f64> {
    if curve.points.len() == 1 {
        Ok(curve.points[0].value)
    } else {
        auc(curve)
    }
}

/// Sweeps all four distortion families over the configured grids against
/// `<output>/protected`, writing `curves.csv` and `auc_summary.csv`.
pub fn cmd_sweep(cfg: &RunConfig, workers: Option<usize>) -> Result<SweepOutcome> {
    with_pool(workers, || run_sweep(cfg))
}

fn run_sweep(cfg: &RunConfig) -> Result<SweepOutcome> {
    let ctx = RunContext::prepare(cfg)?;
    // the protocol covers every family; demand exactly one grid for each
    let mut specs = Vec::with_capacity(4);
    for kind in DistortionKind::all() {
        let found: Vec<&DistortionSpec> =
            cfg.distortions.iter().filter(|s| s.kind == kind).collect();
        match found.len() {
            1 => specs.push(found[0].clone()),
            0 => {
                return Err(VeilError::Config(format!(
                    "sweep needs a {kind} grid; list every family once or leave \
                     [[distortions]] empty for the defaults"
                )))
            }
            n => {
                return Err(VeilError::Config(format!(
                    "sweep found {n} {kind} grids; list each family exactly once"
                )))
            }
        }
    }

    let clean = read_image_dir(&cfg.input_dir).map_err(|e| e.with_context("clean set"))?;
    let adv = read_image_dir(&cfg.output_dir.join("protected"))
        .map_err(|e| e.with_context("adversarial set"))?;
    check_aligned(&clean, &adv)?;
    // both batches are name-sorted, so equal name sets align positionally
    let clean_imgs: Vec<LatentImage> = clean.iter().map(|(_, img)| img.clone()).collect();
    let adv_imgs: Vec<LatentImage> = adv.iter().map(|(_, img)| img.clone()).collect();

    let man = ctx.man_src.build()?;
    let mcfg = cfg.metrics.to_metrics_config(identity_encoder(&cfg.models)?);
    let metric = dsr_sweep_metric(cfg.metrics.task, mcfg);

    let mut curves = Vec::with_capacity(4);
    let mut aucs = [0.0f64; 4];
    for (i, spec) in specs.iter().enumerate() {
        let mut curve = sweep(
            &adv_imgs,
            &clean_imgs,
            man.as_ref() as &dyn ForwardModel,
            spec,
            &*metric,
        )?;
        curve.metric = "dsr".into();
        aucs[i] = curve_area(&curve)?;
        eprintln!(
            "sweep: {} over {} points, area {:.4}",
            spec.kind,
            curve.points.len(),
            aucs[i]
        );
        curves.push(curve);
    }
    let avg = aucs.iter().sum::<f64>() / aucs.len() as f64;

    let mut curves_buf = Vec::new();
    writeln!(
        curves_buf,
        "# veil-curves schema={CURVES_SCHEMA_VERSION} config_hash={} seed={} codec={}",
        ctx.hash,
        cfg.seed,
        codec_version()
    )?;
    crate::distortions::write_curves_csv(&mut curves_buf, &curves)?;
    write_bytes_atomic(&cfg.output_dir.join("curves.csv"), &curves_buf)?;

    let mut auc_buf = Vec::new();
    writeln!(
        auc_buf,
        "# veil-auc schema={CURVES_SCHEMA_VERSION} config_hash={} seed={} codec={}",
        ctx.hash,
        cfg.seed,
        codec_version()
    )?;
    writeln!(
        auc_buf,
        "label,p1_jpeg,p2_gaussian_blur,p3_average_blur,p4_downscale,avg"
    )?;
    writeln!(
        auc_buf,
        "{},{},{},{},{},{}",
        cfg.mode, aucs[0], aucs[1], aucs[2], aucs[3], avg
    )?;
    write_bytes_atomic(&cfg.output_dir.join("auc_summary.csv"), &auc_buf)?;

    Ok(SweepOutcome { curves, aucs, avg })
}

/// One emitted ablation table row.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub value: f64,
    pub label: String,
    pub dsr: f64,
    pub l2_out: f64,
    pub psnr_input: f64,
    pub ssim_input: f64,
    /// (success rate, mean output L2) per distortion probe, report order.
    pub probes: [(f64, f64); 4],
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub table_path: PathBuf,
}

/// Success rate and mean output L2 after one fixed distortion of the
/// adversarial images; clean outputs arrive precomputed.
fn probe_metrics(
    clean: &[(String, LatentImage)],
    clean_outs: &[Tensor],
    adv: &[(String, LatentImage)],
    man: &dyn ForwardModel,
    task: DefenseTask,
    mcfg: &MetricsConfig,
    spec: &DistortionSpec,
) -> Result<(f64, f64)> {
    let per_image: Vec<(bool, f64)> = (0..clean.len())
        .into_par_iter()
        .map(|i| {
            let distorted = apply(&adv[i].1, spec)?;
            let out = man.forward(&distorted.data)?;
            let l2 = l2_distance(&clean_outs[i], &out)?;
            let hit = match task {
                DefenseTask::AttributeEditing => l2 > mcfg.dsr_l2_threshold,
                DefenseTask::FaceSwapping => {
                    id_similarity(&clean[i].1.data, &out, &mcfg.identity_encoder)?
                        < mcfg.dsr_idsim_threshold
                }
            };
            Ok((hit, l2))
        })
        .collect::<Result<_>>()?;
    let n = per_image.len() as f64;
    let hits = per_image.iter().filter(|(h, _)| *h).count() as f64;
    let mean_l2 = per_image.iter().map(|(_, l2)| l2).sum::<f64>() / n;
    Ok((hits / n, mean_l2))
}

/// Walks one parameter axis: every value gets its own protect + evaluate
/// run in `<base output>/<axis>_<label>/`, then four fixed distortion
/// probes. The collected table lands in `<base output>/ablation.csv`.
pub fn cmd_ablate(plan: &AblationPlan, workers: Option<usize>) -> Result<AblationOutcome> {
    with_pool(workers, || run_ablate(plan))
}

fn run_ablate(plan: &AblationPlan) -> Result<AblationOutcome> {
    plan.validate()?;
    let base_hash = config_hash(&plan.base)?;
    let probes = plan.probes.specs();

    let mut rows = Vec::with_capacity(plan.values.len());
    for &value in &plan.values {
        let label = axis_value_label(plan.axis, value);
        let mut cfg = apply_axis_value(&plan.base, plan.axis, value)?;
        cfg.output_dir = plan
            .base
            .output_dir
            .join(format!("{}_{label}", plan.axis));
        eprintln!("ablate: {} = {label}", plan.axis);

        run_protect(&cfg)?;
        let ctx = RunContext::prepare(&cfg)?;
        let clean = read_image_dir(&cfg.input_dir).map_err(|e| e.with_context("clean set"))?;
        let adv = read_image_dir(&cfg.output_dir.join("protected"))
            .map_err(|e| e.with_context("adversarial set"))?;
        let report = evaluate_loaded(&cfg, &ctx, &clean, &adv)?;

        let man = ctx.man_src.build()?;
        let mcfg = cfg.metrics.to_metrics_config(identity_encoder(&cfg.models)?);
        let clean_outs: Vec<Tensor> = clean
            .par_iter()
            .map(|(_, img)| man.forward(&img.data))
            .collect::<Result<_>>()?;
        let mut probe_cols = [(0.0, 0.0); 4];
        for (i, spec) in probes.iter().enumerate() {
            probe_cols[i] = probe_metrics(
                &clean,
                &clean_outs,
                &adv,
                man.as_ref() as &dyn ForwardModel,
                cfg.metrics.task,
                &mcfg,
                spec,
            )?;
        }

        rows.push(AblationRow {
            value,
            label,
            dsr: report.dsr,
            l2_out: report.means.l2_clean_out_vs_adv_out,
            psnr_input: psnr_display(report.means.psnr_input_vs_adv),
            ssim_input: report.means.ssim_input_vs_adv,
            probes: probe_cols,
        });
    }

    let mut buf = Vec::new();
    writeln!(
        buf,
        "# veil-ablation schema={ABLATION_SCHEMA_VERSION} axis={} config_hash={base_hash} seed={}",
        plan.axis, plan.base.seed
    )?;
    writeln!(
        buf,
        "axis,value,dsr,l2_out,psnr_input,ssim_input,\
         dsr_jpeg,l2_jpeg,dsr_gaussian_blur,l2_gaussian_blur,\
         dsr_average_blur,l2_average_blur,dsr_downscale,l2_downscale"
    )?;
    for row in &rows {
        write!(
            buf,
            "{},{},{},{},{},{}",
            plan.axis, row.label, row.dsr, row.l2_out, row.psnr_input, row.ssim_input
        )?;
        for (d, l2) in row.probes {
            write!(buf, ",{d},{l2}")?;
        }
        writeln!(buf)?;
    }
    let table_path = plan.base.output_dir.join("ablation.csv");
    write_bytes_atomic(&table_path, &buf)?;
    Ok(AblationOutcome { rows, table_path })
}
