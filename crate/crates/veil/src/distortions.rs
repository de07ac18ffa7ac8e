//! Post-processing distortions (JPEG, Gaussian blur, average blur,
//! downscaling) plus parameter sweeps and the area-under-curve summary used
//! for robustness evaluation.

use crate::diffusion::LatentImage;
use crate::error::{Result, VeilError};
use crate::filter::{bilinear_resize, box_kernel, conv_separable_reflect, gaussian_kernel, sigma_for_kernel};
use crate::models::ForwardModel;
use crate::tensor::Tensor;
use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Version string of the JPEG codec in use, recorded in reports because
/// bit-exactness across codecs is not promised.
pub fn codec_version() -> &'static str {
    "image-0.25"
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Jpeg,
    GaussianBlur,
    AverageBlur,
    Downscale,
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DistortionKind::Jpeg => "jpeg",
            DistortionKind::GaussianBlur => "gaussian_blur",
            DistortionKind::AverageBlur => "average_blur",
            DistortionKind::Downscale => "downscale",
        };
        f.write_str(s)
    }
}

impl DistortionKind {
    /// All four families in report order.
    pub fn all() -> [DistortionKind; 4] {
        [
            DistortionKind::Jpeg,
            DistortionKind::GaussianBlur,
            DistortionKind::AverageBlur,
            DistortionKind::Downscale,
        ]
    }

    /// The published sweep ranges: QF 10..=100, kernels 1..=19 odd,
    /// factors 0.1..=1.0.
    pub fn default_grid(&self) -> Vec<f64> {
        match self {
            DistortionKind::Jpeg => (1..=10).map(|i| (i * 10) as f64).collect(),
            DistortionKind::GaussianBlur | DistortionKind::AverageBlur => {
                (0..10).map(|i| (2 * i + 1) as f64).collect()
            }
            DistortionKind::Downscale => (1..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }

    pub fn check_parameter(&self, p: f64) -> Result<()> {
        let ok = match self {
            DistortionKind::Jpeg => (10.0..=100.0).contains(&p) && p.fract() == 0.0,
            DistortionKind::GaussianBlur | DistortionKind::AverageBlur => {
                (1.0..=19.0).contains(&p) && p.fract() == 0.0 && (p as usize) % 2 == 1
            }
            DistortionKind::Downscale => p > 0.0 && p <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(VeilError::Parameter(format!(
                "invalid {self} parameter {p} (jpeg: integer QF in [10,100]; blurs: odd kernel in [1,19]; downscale: factor in (0,1])"
            )))
        }
    }

    /// Maps a parameter to [0, 1] so that 0 means no distortion and 1 the
    /// strongest in the family; makes per-family areas comparable.
    pub fn normalized(&self, p: f64) -> f64 {
        match self {
            DistortionKind::Jpeg => (100.0 - p) / 90.0,
            DistortionKind::GaussianBlur | DistortionKind::AverageBlur => (p - 1.0) / 18.0,
            DistortionKind::Downscale => (1.0 - p) / 0.9,
        }
    }
}

/// One distortion family with the parameter to apply now and the ordered
/// grid a sweep walks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub parameter: f64,
    /// Empty means "use the family's default grid" to config loaders.
    #[serde(default)]
    pub parameter_grid: Vec<f64>,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, parameter: f64) -> Self {
        DistortionSpec {
            kind,
            parameter,
            parameter_grid: kind.default_grid(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.check_parameter(self.parameter)?;
        for &p in &self.parameter_grid {
            self.kind.check_parameter(p)?;
        }
        Ok(())
    }
}

/// The four families at their default grids, report order.
pub fn default_sweep_specs() -> Vec<DistortionSpec> {
    DistortionKind::all()
        .into_iter()
        .map(|kind| {
            let grid = kind.default_grid();
            DistortionSpec {
                kind,
                parameter: *grid.last().expect("grids are non-empty"),
                parameter_grid: grid,
            }
        })
        .collect()
}

fn to_rgb8(x: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = x.dim();
    if c != 3 {
        return Err(VeilError::Parameter(format!(
            "jpeg distortion needs a 3-channel image, got {c} channels"
        )));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = img.get_pixel_mut(j as u32, i as u32);
            for ch in 0..3 {
                let v = x[[ch, i, j]].clamp(-1.0, 1.0);
                px.0[ch] = ((v + 1.0) / 2.0 * 255.0).round() as u8;
            }
        }
    }
    Ok(img)
}

fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32).0[c] as f64 / 255.0 * 2.0 - 1.0
    })
}

fn jpeg_round_trip(x: &Tensor, quality: u8) -> Result<Tensor> {
    let rgb = to_rgb8(x)?;
    let mut encoded = Vec::new();
    JpegEncoder::new_with_quality(&mut encoded, quality)
        .encode_image(&rgb)
        .map_err(|e| VeilError::Codec(format!("jpeg encode failed: {e}")))?;
    let decoded = image::load_from_memory_with_format(&encoded, ImageFormat::Jpeg)
        .map_err(|e| VeilError::Codec(format!("jpeg decode failed: {e}")))?
        .to_rgb8();
    if decoded.dimensions() != rgb.dimensions() {
        return Err(VeilError::Codec(
            "jpeg round trip changed the image dimensions".into(),
        ));
    }
    Ok(from_rgb8(&decoded))
}

/// Applies one distortion at `spec.parameter`; output shape always equals
/// the input shape.
pub fn apply(x: &LatentImage, spec: &DistortionSpec) -> Result<LatentImage> {
    spec.kind.check_parameter(spec.parameter)?;
    let (_, h, w) = x.data.dim();
    let data = match spec.kind {
        DistortionKind::Jpeg => jpeg_round_trip(&x.data, spec.parameter as u8)?,
        DistortionKind::GaussianBlur => {
            let k = spec.parameter as usize;
            conv_separable_reflect(&x.data, &gaussian_kernel(k, sigma_for_kernel(k)))?
        }
        DistortionKind::AverageBlur => {
            let k = spec.parameter as usize;
            if k == 1 {
                x.data.clone()
            } else {
                conv_separable_reflect(&x.data, &box_kernel(k))?
            }
        }
        DistortionKind::Downscale => {
            let f = spec.parameter;
            let dh = ((h as f64 * f).round() as usize).max(1);
            let dw = ((w as f64 * f).round() as usize).max(1);
            if (dh, dw) == (h, w) {
                x.data.clone()
            } else {
                bilinear_resize(&bilinear_resize(&x.data, dh, dw), h, w)
            }
        }
    };
    Ok(LatentImage::at(data, x.timestep))
}

/// One (image, grid point) observation handed to a sweep metric: the clean
/// image and its cached manipulator output, and the distorted adversarial
/// image with its output.
pub struct SweepSample<'a> {
    pub clean: &'a LatentImage,
    pub clean_out: &'a Tensor,
    pub distorted_adv: LatentImage,
    pub distorted_out: Tensor,
}

/// A batch-level metric evaluated at each grid point of a sweep.
pub type SweepMetric<'m> = dyn Fn(&[SweepSample<'_>]) -> Result<f64> + Sync + 'm;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub parameter: f64,
    /// Position on the common distortion-strength axis in [0, 1].
    pub normalized: f64,
    pub value: f64,
}

/// Metric-versus-parameter curve for one distortion family, in grid order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub kind: DistortionKind,
    pub metric: String,
    pub points: Vec<CurvePoint>,
}

/// Walks `spec_grid.parameter_grid`: at each point every adversarial image
/// is distorted and pushed through the manipulator, and `metric_fn` reduces
/// the batch to one value. Clean outputs are computed once and shared
/// across grid points.
pub fn sweep(
    x_adv_batch: &[LatentImage],
    x_clean_batch: &[LatentImage],
    manipulator: &dyn ForwardModel,
    spec_grid: &DistortionSpec,
    metric_fn: &SweepMetric<'_>,
) -> Result<RobustnessCurve> {
    spec_grid.validate()?;
    if x_adv_batch.len() != x_clean_batch.len() || x_adv_batch.is_empty() {
        return Err(VeilError::Parameter(format!(
            "sweep needs equally sized non-empty batches, got {} adversarial vs {} clean",
            x_adv_batch.len(),
            x_clean_batch.len()
        )));
    }
    if spec_grid.parameter_grid.is_empty() {
        return Err(VeilError::Parameter("sweep needs a non-empty grid".into()));
    }
    let clean_outs = x_clean_batch
        .par_iter()
        .map(|img| manipulator.forward(&img.data))
        .collect::<Result<Vec<_>>>()?;

    let mut points = Vec::with_capacity(spec_grid.parameter_grid.len());
    for &parameter in &spec_grid.parameter_grid {
        let point_spec = DistortionSpec {
            kind: spec_grid.kind,
            parameter,
            parameter_grid: Vec::new(),
        };
        let samples = x_adv_batch
            .par_iter()
            .zip(x_clean_batch.par_iter().zip(clean_outs.par_iter()))
            .map(|(adv, (clean, clean_out))| {
                let distorted_adv = apply(adv, &point_spec)?;
                let distorted_out = manipulator.forward(&distorted_adv.data)?;
                Ok(SweepSample {
                    clean,
                    clean_out,
                    distorted_adv,
                    distorted_out,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        points.push(CurvePoint {
            parameter,
            normalized: spec_grid.kind.normalized(parameter),
            value: metric_fn(&samples)?,
        });
    }
    Ok(RobustnessCurve {
        kind: spec_grid.kind,
        metric: "metric".into(),
        points,
    })
}

/// Trapezoidal area of a curve over its normalized parameter axis. The
/// points may arrive in any order but must have distinct normalized
/// positions inside [0, 1].
pub fn auc(curve: &RobustnessCurve) -> Result<f64> {
    if curve.points.len() < 2 {
        return Err(VeilError::Parameter(format!(
            "area needs at least 2 curve points, got {}",
            curve.points.len()
        )));
    }
    let mut pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.normalized, p.value))
        .collect();
    for &(x, y) in &pts {
        if !(0.0..=1.0).contains(&x) {
            return Err(VeilError::Parameter(format!(
                "normalized position {x} outside [0,1]"
            )));
        }
        if !y.is_finite() {
            return Err(VeilError::Numerical(format!(
                "curve value at position {x} is not finite"
            )));
        }
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut area = 0.0;
    for pair in pts.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        if x1 == x0 {
            return Err(VeilError::Parameter(format!(
                "duplicate normalized position {x0} makes the curve ambiguous"
            )));
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(area)
}

/// CSV rows `kind,parameter,metric,value`, one per curve point, curves in
/// the given order.
pub fn write_curves_csv<W: std::io::Write>(writer: W, curves: &[RobustnessCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["kind", "parameter", "metric", "value"])
        .map_err(|e| VeilError::Format(format!("curve csv write failed: {e}")))?;
    for curve in curves {
        for p in &curve.points {
            w.write_record([
                curve.kind.to_string(),
                format!("{}", p.parameter),
                curve.metric.clone(),
                format!("{}", p.value),
            ])
            .map_err(|e| VeilError::Format(format!("curve csv write failed: {e}")))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_toy_manipulator, ManipulatorKind};
    use ndarray::Array3;

    fn ramp(c: usize, h: usize, w: usize) -> LatentImage {
        LatentImage::new(Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
            ((ch as f64 + 1.0) * 0.1 * (i as f64) - 0.07 * (j as f64)).sin() * 0.8
        }))
    }

    #[test]
    fn parameter_validation() {
        assert!(DistortionKind::Jpeg.check_parameter(10.0).is_ok());
        assert!(DistortionKind::Jpeg.check_parameter(100.0).is_ok());
        assert!(DistortionKind::Jpeg.check_parameter(9.0).is_err());
        assert!(DistortionKind::Jpeg.check_parameter(70.5).is_err());
        assert!(DistortionKind::GaussianBlur.check_parameter(3.0).is_ok());
        assert!(DistortionKind::GaussianBlur.check_parameter(2.0).is_err());
        assert!(DistortionKind::GaussianBlur.check_parameter(21.0).is_err());
        assert!(DistortionKind::Downscale.check_parameter(1.0).is_ok());
        assert!(DistortionKind::Downscale.check_parameter(0.0).is_err());
        assert!(DistortionKind::Downscale.check_parameter(1.1).is_err());
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(DistortionKind::Jpeg.normalized(100.0), 0.0);
        assert_eq!(DistortionKind::Jpeg.normalized(10.0), 1.0);
        assert_eq!(DistortionKind::GaussianBlur.normalized(1.0), 0.0);
        assert_eq!(DistortionKind::GaussianBlur.normalized(19.0), 1.0);
        assert_eq!(DistortionKind::Downscale.normalized(1.0), 0.0);
        assert!((DistortionKind::Downscale.normalized(0.1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_kernel_1_is_identity() {
        let x = ramp(3, 10, 12);
        for kind in [DistortionKind::GaussianBlur, DistortionKind::AverageBlur] {
            let y = apply(&x, &DistortionSpec::new(kind, 1.0)).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn downscale_factor_1_is_identity() {
        let x = ramp(3, 9, 11);
        let y = apply(&x, &DistortionSpec::new(DistortionKind::Downscale, 1.0)).unwrap();
        for (a, b) in y.data.iter().zip(x.data.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn box_blur_impulse_becomes_plateau() {
        let mut data = Array3::zeros((1, 7, 7));
        data[[0, 3, 3]] = 1.0;
        let x = LatentImage::new(data);
        let y = apply(&x, &DistortionSpec::new(DistortionKind::AverageBlur, 3.0)).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let inside = (2..=4).contains(&i) && (2..=4).contains(&j);
                let expect = if inside { 1.0 / 9.0 } else { 0.0 };
                assert!(
                    (y.data[[0, i, j]] - expect).abs() < 1e-12,
                    "({i},{j}) = {}",
                    y.data[[0, i, j]]
                );
            }
        }
    }

    #[test]
    fn jpeg_qf100_error_is_small_and_shape_kept() {
        let x = ramp(3, 16, 16);
        let y = apply(&x, &DistortionSpec::new(DistortionKind::Jpeg, 100.0)).unwrap();
        assert_eq!(y.data.dim(), x.data.dim());
        let max_err = y
            .data
            .iter()
            .zip(x.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 0.05, "max element error {max_err}");
    }

    #[test]
    fn jpeg_needs_rgb() {
        let x = ramp(1, 8, 8);
        assert!(apply(&x, &DistortionSpec::new(DistortionKind::Jpeg, 90.0)).is_err());
    }

    #[test]
    fn shapes_are_preserved_across_all_kinds() {
        // kernel 19 reflect-pads by 9, so both dims must be at least 10
        let x = ramp(3, 13, 11);
        for spec in default_sweep_specs() {
            for &p in &spec.parameter_grid {
                let one = DistortionSpec {
                    parameter: p,
                    parameter_grid: Vec::new(),
                    ..spec.clone()
                };
                let y = apply(&x, &one).unwrap();
                assert_eq!(y.data.dim(), x.data.dim(), "{} {p}", spec.kind);
            }
        }
    }

    #[test]
    fn sweep_constant_metric_is_flat_and_auc_connects() {
        let clean: Vec<_> = (0..3).map(|_| ramp(3, 12, 12)).collect();
        let adv = clean.clone();
        let m = make_toy_manipulator(9, ManipulatorKind::Linear).unwrap();
        let spec = DistortionSpec {
            kind: DistortionKind::Downscale,
            parameter: 1.0,
            parameter_grid: DistortionKind::Downscale.default_grid(),
        };
        let curve = sweep(&adv, &clean, &*m, &spec, &|_| Ok(1.0)).unwrap();
        assert_eq!(curve.points.len(), 10);
        assert!(curve.points.iter().all(|p| p.value == 1.0));
        assert!((auc(&curve).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_rejects_misaligned_batches() {
        let clean: Vec<_> = (0..2).map(|_| ramp(3, 10, 10)).collect();
        let adv: Vec<_> = (0..3).map(|_| ramp(3, 10, 10)).collect();
        let m = make_toy_manipulator(9, ManipulatorKind::Linear).unwrap();
        let spec = DistortionSpec::new(DistortionKind::AverageBlur, 3.0);
        assert!(sweep(&adv, &clean, &*m, &spec, &|_| Ok(0.0)).is_err());
    }

    #[test]
    fn auc_worked_examples() {
        let mk = |pts: &[(f64, f64)]| RobustnessCurve {
            kind: DistortionKind::Jpeg,
            metric: "metric".into(),
            points: pts
                .iter()
                .map(|&(normalized, value)| CurvePoint {
                    parameter: 0.0,
                    normalized,
                    value,
                })
                .collect(),
        };
        assert_eq!(auc(&mk(&[(0.0, 0.5), (1.0, 0.5)])).unwrap(), 0.5);
        assert_eq!(auc(&mk(&[(0.0, 1.0), (0.5, 0.0), (1.0, 1.0)])).unwrap(), 0.5);
        // order independence
        assert_eq!(auc(&mk(&[(1.0, 1.0), (0.0, 1.0), (0.5, 1.0)])).unwrap(), 1.0);
        assert!(auc(&mk(&[(0.0, 1.0)])).is_err());
        assert!(auc(&mk(&[(0.0, 1.0), (0.0, 0.5)])).is_err());
        assert!(auc(&mk(&[(0.0, 1.0), (1.5, 0.5)])).is_err());
    }

    #[test]
    fn curves_csv_layout() {
        let curve = RobustnessCurve {
            kind: DistortionKind::GaussianBlur,
            metric: "dsr".into(),
            points: vec![CurvePoint {
                parameter: 3.0,
                normalized: 1.0 / 9.0,
                value: 0.25,
            }],
        };
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &[curve]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("kind,parameter,metric,value\n"), "{text}");
        assert!(text.contains("gaussian_blur,3,dsr,0.25"), "{text}");
    }
}
