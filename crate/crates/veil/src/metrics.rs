//! Evaluation metrics (L1/L2, PSNR, SSIM, identity similarity), the
//! defense success rate for both manipulation tasks, and report assembly.

use crate::diffusion::LatentImage;
use crate::distortions::codec_version;
use crate::error::{Result, VeilError};
use crate::models::{ForwardModel, IdentityEncoder};
use crate::tensor::{check_same_shape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

/// Pluggable perceptual distance; fills the reserved report column when
/// present.
pub type PerceptualFn = Arc<dyn Fn(&Tensor, &Tensor) -> Result<f64> + Send + Sync>;

#[derive(Clone)]
pub struct MetricsConfig {
    /// Attribute-editing success threshold on output L2 (strict >).
    pub dsr_l2_threshold: f64,
    /// Face-swapping success threshold on identity similarity (strict <).
    pub dsr_idsim_threshold: f64,
    /// PSNR dynamic range; 2.0 spans the [-1, 1] representation.
    pub psnr_peak: f64,
    pub ssim_window: usize,
    pub identity_encoder: Arc<IdentityEncoder>,
    pub perceptual: Option<PerceptualFn>,
}

impl fmt::Debug for MetricsConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricsConfig")
            .field("dsr_l2_threshold", &self.dsr_l2_threshold)
            .field("dsr_idsim_threshold", &self.dsr_idsim_threshold)
            .field("psnr_peak", &self.psnr_peak)
            .field("ssim_window", &self.ssim_window)
            .field("identity_encoder_dim", &self.identity_encoder.dim())
            .field("perceptual", &self.perceptual.is_some())
            .finish()
    }
}

impl MetricsConfig {
    pub fn with_encoder(encoder: Arc<IdentityEncoder>) -> Self {
        MetricsConfig {
            dsr_l2_threshold: 0.05,
            dsr_idsim_threshold: 0.4,
            psnr_peak: 2.0,
            ssim_window: 11,
            identity_encoder: encoder,
            perceptual: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dsr_l2_threshold", self.dsr_l2_threshold),
            ("dsr_idsim_threshold", self.dsr_idsim_threshold),
            ("psnr_peak", self.psnr_peak),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(VeilError::Parameter(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        if self.ssim_window % 2 == 0 || self.ssim_window == 0 {
            return Err(VeilError::Parameter(format!(
                "ssim window must be odd, got {}",
                self.ssim_window
            )));
        }
        Ok(())
    }
}

/// Root-mean-square distance; resolution independent.
pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.len() as f64;
    Ok((a
        .iter()
        .zip(b.iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / n)
        .sqrt())
}

/// Mean absolute distance.
pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).sum::<f64>() / n)
}

/// `10 log10(peak^2 / MSE)` in dB; identical inputs give +infinity (stored
/// as such; displays cap it).
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    if !(peak > 0.0) {
        return Err(VeilError::Parameter(format!(
            "psnr peak must be > 0, got {peak}"
        )));
    }
    let n = a.len() as f64;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Cap used when an infinite PSNR has to be shown on a finite scale.
pub const PSNR_DISPLAY_CAP: f64 = 100.0;

/// Finite rendering of a PSNR value for summaries.
pub fn psnr_display(v: f64) -> f64 {
    v.min(PSNR_DISPLAY_CAP)
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_SIGMA: f64 = 1.5;
/// Dynamic range of the [-1, 1] representation.
const SSIM_RANGE: f64 = 2.0;

/// Valid-mode separable weighted filtering of one channel: `out[i][j]`
/// is the kernel-weighted window mean at top-left (i, j).
fn window_means(ch: &ndarray::ArrayView2<'_, f64>, taps: &[f64]) -> ndarray::Array2<f64> {
    let (h, w) = ch.dim();
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    // horizontal pass: full rows, valid columns
    let mut tmp = ndarray::Array2::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for (u, &t) in taps.iter().enumerate() {
                acc += t * ch[[i, j + u]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = ndarray::Array2::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (u, &t) in taps.iter().enumerate() {
                acc += t * tmp[[i + u, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Single-scale SSIM with a Gaussian window (sigma 1.5), the standard
/// stabilizing constants, and the [-1, 1] dynamic range; the map is
/// averaged over channels and valid window positions.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize) -> Result<f64> {
    check_same_shape(a, b)?;
    let (c, h, w) = a.dim();
    if window % 2 == 0 || window == 0 {
        return Err(VeilError::Parameter(format!(
            "ssim window must be odd, got {window}"
        )));
    }
    if window > h || window > w {
        return Err(VeilError::Parameter(format!(
            "ssim window {window} larger than the {h}x{w} image"
        )));
    }
    let taps = crate::filter::gaussian_kernel(window, SSIM_SIGMA);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let av = a.index_axis(ndarray::Axis(0), ch);
        let bv = b.index_axis(ndarray::Axis(0), ch);
        let ma = window_means(&av, &taps);
        let mb = window_means(&bv, &taps);
        let maa = window_means(&av.mapv(|v| v * v).view(), &taps);
        let mbb = window_means(&bv.mapv(|v| v * v).view(), &taps);
        let mab = window_means(&(&av.to_owned() * &bv).view(), &taps);
        for ((i, j), &mu_a) in ma.indexed_iter() {
            let mu_b = mb[[i, j]];
            let va = maa[[i, j]] - mu_a * mu_a;
            let vb = mbb[[i, j]] - mu_b * mu_b;
            let cov = mab[[i, j]] - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Cosine similarity between the identity embeddings of two images.
pub fn id_similarity(a: &Tensor, b: &Tensor, encoder: &IdentityEncoder) -> Result<f64> {
    let ea = encoder.embed(a)?;
    let eb = encoder.embed(b)?;
    let cos: f64 = ea.iter().zip(eb.iter()).map(|(p, q)| p * q).sum();
    Ok(cos.clamp(-1.0, 1.0))
}

/// Which manipulation the defense is evaluated against; selects the
/// success criterion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseTask {
    AttributeEditing,
    FaceSwapping,
}

impl fmt::Display for DefenseTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DefenseTask::AttributeEditing => "attribute_editing",
            DefenseTask::FaceSwapping => "face_swapping",
        })
    }
}

/// Per-image metrics; each column name carries its comparison pair since
/// SSIM reads in both directions (fidelity between inputs, disruption
/// between outputs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub image: String,
    pub l1_input_vs_adv: f64,
    pub l2_input_vs_adv: f64,
    pub psnr_input_vs_adv: f64,
    pub ssim_input_vs_adv: f64,
    pub l2_clean_out_vs_adv_out: f64,
    pub ssim_clean_out_vs_adv_out: f64,
    pub id_sim_input_vs_adv_out: f64,
    pub perceptual_distance: Option<f64>,
    pub success: bool,
}

fn row_success(row: &ImageRow, task: DefenseTask, cfg: &MetricsConfig) -> bool {
    match task {
        DefenseTask::AttributeEditing => row.l2_clean_out_vs_adv_out > cfg.dsr_l2_threshold,
        DefenseTask::FaceSwapping => row.id_sim_input_vs_adv_out < cfg.dsr_idsim_threshold,
    }
}

/// Defense success rate over rows: the fraction whose task criterion holds
/// strictly (boundary equality fails).
pub fn dsr(rows: &[ImageRow], task: DefenseTask, cfg: &MetricsConfig) -> Result<f64> {
    if rows.is_empty() {
        return Err(VeilError::Parameter(
            "success rate over an empty row set is undefined".into(),
        ));
    }
    let hits = rows.iter().filter(|r| row_success(r, task, cfg)).count();
    Ok(hits as f64 / rows.len() as f64)
}

/// Column means over the rows (PSNR mean can be infinite when any row is).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub l1_input_vs_adv: f64,
    pub l2_input_vs_adv: f64,
    pub psnr_input_vs_adv: f64,
    pub ssim_input_vs_adv: f64,
    pub l2_clean_out_vs_adv_out: f64,
    pub ssim_clean_out_vs_adv_out: f64,
    pub id_sim_input_vs_adv_out: f64,
}

/// Run metadata stamped into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub config_hash: String,
    pub seed: u64,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub task: DefenseTask,
    pub rows: Vec<ImageRow>,
    pub dsr: f64,
    pub means: Aggregates,
    pub config_hash: String,
    pub seed: u64,
    pub codec: String,
}

fn mean_of(rows: &[ImageRow], f: impl Fn(&ImageRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

pub(crate) fn check_aligned(
    clean: &[(String, LatentImage)],
    adv: &[(String, LatentImage)],
) -> Result<()> {
    let missing: Vec<String> = clean
        .iter()
        .filter(|(n, _)| !adv.iter().any(|(m, _)| m == n))
        .map(|(n, _)| n.clone())
        .collect();
    let unmatched: Vec<String> = adv
        .iter()
        .filter(|(n, _)| !clean.iter().any(|(m, _)| m == n))
        .map(|(n, _)| n.clone())
        .collect();
    if !missing.is_empty() || !unmatched.is_empty() {
        return Err(VeilError::Alignment { missing, unmatched });
    }
    Ok(())
}

/// Computes every metric for each (clean, adversarial) pair, aggregates,
/// and stamps metadata. Rows come out sorted by image name; regeneration
/// from the same inputs is byte-identical.
pub fn build_report(
    clean_batch: &[(String, LatentImage)],
    adv_batch: &[(String, LatentImage)],
    manipulator: &dyn ForwardModel,
    task: DefenseTask,
    cfg: &MetricsConfig,
    ctx: &ReportContext,
) -> Result<EvaluationReport> {
    cfg.validate()?;
    if clean_batch.is_empty() {
        return Err(VeilError::Parameter("report needs at least one image".into()));
    }
    check_aligned(clean_batch, adv_batch)?;
    let mut pairs: Vec<(&(String, LatentImage), &LatentImage)> = clean_batch
        .iter()
        .map(|entry| {
            let adv = &adv_batch
                .iter()
                .find(|(m, _)| *m == entry.0)
                .expect("alignment was checked")
                .1;
            (entry, adv)
        })
        .collect();
    pairs.sort_by(|a, b| a.0 .0.cmp(&b.0 .0));

    let mut rows = pairs
        .par_iter()
        .map(|((name, clean), adv)| {
            let clean_out = manipulator.forward(&clean.data)?;
            let adv_out = manipulator.forward(&adv.data)?;
            let perceptual_distance = match &cfg.perceptual {
                Some(f) => Some(f(&clean.data, &adv.data)?),
                None => None,
            };
            let mut row = ImageRow {
                image: name.clone(),
                l1_input_vs_adv: l1_distance(&clean.data, &adv.data)?,
                l2_input_vs_adv: l2_distance(&clean.data, &adv.data)?,
                psnr_input_vs_adv: psnr(&clean.data, &adv.data, cfg.psnr_peak)?,
                ssim_input_vs_adv: ssim(&clean.data, &adv.data, cfg.ssim_window)?,
                l2_clean_out_vs_adv_out: l2_distance(&clean_out, &adv_out)?,
                ssim_clean_out_vs_adv_out: ssim(&clean_out, &adv_out, cfg.ssim_window)?,
                id_sim_input_vs_adv_out: id_similarity(
                    &clean.data,
                    &adv_out,
                    &cfg.identity_encoder,
                )?,
                perceptual_distance,
                success: false,
            };
            row.success = row_success(&row, task, cfg);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.image.cmp(&b.image));

    let rate = dsr(&rows, task, cfg)?;
    let means = Aggregates {
        l1_input_vs_adv: mean_of(&rows, |r| r.l1_input_vs_adv),
        l2_input_vs_adv: mean_of(&rows, |r| r.l2_input_vs_adv),
        psnr_input_vs_adv: mean_of(&rows, |r| r.psnr_input_vs_adv),
        ssim_input_vs_adv: mean_of(&rows, |r| r.ssim_input_vs_adv),
        l2_clean_out_vs_adv_out: mean_of(&rows, |r| r.l2_clean_out_vs_adv_out),
        ssim_clean_out_vs_adv_out: mean_of(&rows, |r| r.ssim_clean_out_vs_adv_out),
        id_sim_input_vs_adv_out: mean_of(&rows, |r| r.id_sim_input_vs_adv_out),
    };
    Ok(EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        task,
        rows,
        dsr: rate,
        means,
        config_hash: ctx.config_hash.clone(),
        seed: ctx.seed,
        codec: codec_version().to_string(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Report rows as CSV behind one metadata comment line.
pub fn write_report_csv<W: Write>(mut writer: W, report: &EvaluationReport) -> Result<()> {
    writeln!(
        writer,
        "# veil-report schema={} config_hash={} seed={} codec={} task={}",
        report.schema_version, report.config_hash, report.seed, report.codec, report.task
    )?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "image",
        "l1_input_vs_adv",
        "l2_input_vs_adv",
        "psnr_input_vs_adv",
        "ssim_input_vs_adv",
        "l2_clean_out_vs_adv_out",
        "ssim_clean_out_vs_adv_out",
        "id_sim_input_vs_adv_out",
        "perceptual_distance",
        "success",
    ])
    .map_err(|e| VeilError::Format(format!("report csv write failed: {e}")))?;
    for r in &report.rows {
        w.write_record([
            r.image.clone(),
            format!("{}", r.l1_input_vs_adv),
            format!("{}", r.l2_input_vs_adv),
            format!("{}", r.psnr_input_vs_adv),
            format!("{}", r.ssim_input_vs_adv),
            format!("{}", r.l2_clean_out_vs_adv_out),
            format!("{}", r.ssim_clean_out_vs_adv_out),
            format!("{}", r.id_sim_input_vs_adv_out),
            fmt_opt(r.perceptual_distance),
            r.success.to_string(),
        ])
        .map_err(|e| VeilError::Format(format!("report csv write failed: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Aggregates and metadata as a small key/value text block.
pub fn write_report_summary<W: Write>(mut w: W, report: &EvaluationReport) -> Result<()> {
    writeln!(w, "schema_version: {}", report.schema_version)?;
    writeln!(w, "task: {}", report.task)?;
    writeln!(w, "images: {}", report.rows.len())?;
    writeln!(w, "dsr: {}", report.dsr)?;
    writeln!(w, "mean_l1_input_vs_adv: {}", report.means.l1_input_vs_adv)?;
    writeln!(w, "mean_l2_input_vs_adv: {}", report.means.l2_input_vs_adv)?;
    writeln!(
        w,
        "mean_psnr_input_vs_adv: {}",
        psnr_display(report.means.psnr_input_vs_adv)
    )?;
    writeln!(w, "mean_ssim_input_vs_adv: {}", report.means.ssim_input_vs_adv)?;
    writeln!(
        w,
        "mean_l2_clean_out_vs_adv_out: {}",
        report.means.l2_clean_out_vs_adv_out
    )?;
    writeln!(
        w,
        "mean_ssim_clean_out_vs_adv_out: {}",
        report.means.ssim_clean_out_vs_adv_out
    )?;
    writeln!(
        w,
        "mean_id_sim_input_vs_adv_out: {}",
        report.means.id_sim_input_vs_adv_out
    )?;
    writeln!(w, "config_hash: {}", report.config_hash)?;
    writeln!(w, "seed: {}", report.seed)?;
    writeln!(w, "codec: {}", report.codec)?;
    Ok(())
}
