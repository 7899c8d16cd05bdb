//! Evaluation metrics: pose-error AUC, rotation/translation errors with
//! threshold precisions, average-distance object metrics (ADD, ADD-S), and
//! virtual correspondence reprojection error (VCRE).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    rotation_angle_error, translation_angle_error, CameraIntrinsics, GeometryError, Point3Set,
    Pose,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty error list")]
    EmptyErrors,
    #[error("empty object model")]
    EmptyModel,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("report parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Max of rotation error and translation angular error, in degrees.
/// Degenerate ground-truth translation is an error (the sample is excluded
/// and counted by [`aggregate`]); a degenerate *prediction* against a valid
/// ground truth scores the worst case, 180 degrees.
pub fn pose_error(pred: &Pose, gt: &Pose) -> Result<f64, MetricsError> {
    if gt.t.norm() < 1e-12 {
        return Err(GeometryError::DegenerateTranslation.into());
    }
    let rot = rotation_angle_error(&pred.r, &gt.r);
    let trans = translation_angle_error(&pred.t, &gt.t).unwrap_or(180.0);
    Ok(rot.max(trans))
}

/// Normalized area under the cumulative precision curve up to each
/// threshold, by exact integration of the empirical step function:
/// `AUC@tau = mean_i max(0, 1 - err_i / tau)`.
pub fn auc(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyErrors);
    }
    Ok(thresholds
        .iter()
        .map(|&tau| {
            errors
                .iter()
                .map(|&e| (1.0 - e / tau).max(0.0))
                .sum::<f64>()
                / errors.len() as f64
        })
        .collect())
}

/// Mean distance between model points under the ground-truth and predicted
/// transforms.
pub fn add(
    model_points: &Point3Set,
    pred: &Pose,
    gt: &Pose,
) -> Result<f64, MetricsError> {
    if model_points.is_empty() {
        return Err(MetricsError::EmptyModel);
    }
    let sum: f64 = model_points
        .points
        .iter()
        .map(|x| (gt.transform(x) - pred.transform(x)).norm())
        .sum();
    Ok(sum / model_points.len() as f64)
}

/// Closest-point variant for symmetric objects: each ground-truth-transformed
/// point matches its nearest predicted-transformed point (brute force).
pub fn add_s(
    model_points: &Point3Set,
    pred: &Pose,
    gt: &Pose,
) -> Result<f64, MetricsError> {
    if model_points.is_empty() {
        return Err(MetricsError::EmptyModel);
    }
    let pred_pts: Vec<Vector3<f64>> = model_points
        .points
        .iter()
        .map(|x| pred.transform(x))
        .collect();
    let sum: f64 = model_points
        .points
        .iter()
        .map(|x| {
            let g = gt.transform(x);
            pred_pts
                .iter()
                .map(|p| (g - p).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(sum / model_points.len() as f64)
}

/// The default virtual point cloud for VCRE: a 4x4x4 grid spanning
/// [-0.3, 0.3] m per axis, centered 1.5 m deep in the query camera frame.
pub fn default_virtual_points() -> Point3Set {
    let mut pts = Vec::with_capacity(64);
    let coords = [-0.3, -0.1, 0.1, 0.3];
    for &x in &coords {
        for &y in &coords {
            for &z in &coords {
                pts.push(Vector3::new(x, y, z + 1.5));
            }
        }
    }
    Point3Set::new(pts)
}

/// Virtual correspondence reprojection error in pixels: the mean pixel
/// displacement of virtual camera-frame points under the relative pose error
/// `T_pred * T_gt^-1`.
pub fn vcre(
    pred: &Pose,
    gt: &Pose,
    k: &CameraIntrinsics,
    virtual_points: &Point3Set,
) -> Result<f64, MetricsError> {
    if virtual_points.is_empty() {
        return Err(MetricsError::EmptyModel);
    }
    let err_transform = pred.compose(&gt.inverse());
    let mut sum = 0.0;
    let mut behind = Vec::new();
    for (i, v) in virtual_points.points.iter().enumerate() {
        let moved = err_transform.transform(v);
        if v.z < 1e-12 || moved.z < 1e-12 {
            behind.push(i);
            continue;
        }
        let a = [k.fx * (v.x / v.z) + k.cx, k.fy * (v.y / v.z) + k.cy];
        let b = [
            k.fx * (moved.x / moved.z) + k.cx,
            k.fy * (moved.y / moved.z) + k.cy,
        ];
        sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    }
    if !behind.is_empty() {
        let count = behind.len();
        behind.truncate(8);
        return Err(GeometryError::BehindCamera {
            count,
            first: behind,
        }
        .into());
    }
    Ok(sum / virtual_points.len() as f64)
}

/// Per-sample evaluation row. `None` fields are either inapplicable to the
/// scenario or excluded as degenerate.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SampleEval {
    pub index: usize,
    pub rot_err_deg: f64,
    pub trans_err_m: f64,
    pub trans_angle_deg: Option<f64>,
    pub pose_err_deg: Option<f64>,
    pub add_m: Option<f64>,
    pub add_s_m: Option<f64>,
    pub vcre_px: Option<f64>,
}

/// Reporting thresholds; defaults follow the common benchmark settings
/// (30 deg / 1 m scene, 10 cm object, 90 px VCRE, 0.25 m / 5 deg
/// relocalization, AUC at 5/10/20 deg).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdsConfig {
    pub rot_deg: f64,
    pub trans_m: f64,
    pub trans_object_m: f64,
    pub vcre_px: f64,
    pub reloc_trans_m: f64,
    pub reloc_rot_deg: f64,
    pub auc_deg: Vec<f64>,
}

impl Default for ThresholdsConfig {
    fn default() -> Self {
        ThresholdsConfig {
            rot_deg: 30.0,
            trans_m: 1.0,
            trans_object_m: 0.1,
            vcre_px: 90.0,
            reloc_trans_m: 0.25,
            reloc_rot_deg: 5.0,
            auc_deg: vec![5.0, 10.0, 20.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregates {
    pub count: usize,
    pub excluded_degenerate: usize,
    pub rot_med_deg: f64,
    pub rot_mean_deg: f64,
    pub rot_prec: f64,
    pub trans_med_m: f64,
    pub trans_mean_m: f64,
    pub trans_prec: f64,
    pub trans_angle_med_deg: Option<f64>,
    pub pose_auc: Vec<f64>,
    pub reloc_prec: Option<f64>,
    pub add_med_m: Option<f64>,
    pub add_s_med_m: Option<f64>,
    pub add_prec: Option<f64>,
    pub add_s_prec: Option<f64>,
    pub vcre_med_px: Option<f64>,
    pub vcre_prec: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: ThresholdsConfig,
    pub aggregates: Aggregates,
    #[serde(skip)]
    pub per_sample: Vec<SampleEval>,
}

pub fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn precision(values: &[f64], threshold: f64) -> f64 {
    values.iter().filter(|&&v| v <= threshold).count() as f64 / values.len() as f64
}

/// Reduce per-sample rows into medians, means, threshold precisions, and
/// pose-error AUCs. Samples with degenerate ground-truth translation
/// contribute to rotation/metric aggregates but are excluded from angular
/// ones and counted in `excluded_degenerate`.
pub fn aggregate(
    per_sample: &[SampleEval],
    thresholds: &ThresholdsConfig,
    object_scenario: bool,
) -> Result<EvalReport, MetricsError> {
    if per_sample.is_empty() {
        return Err(MetricsError::EmptyErrors);
    }
    let rots: Vec<f64> = per_sample.iter().map(|s| s.rot_err_deg).collect();
    let transes: Vec<f64> = per_sample.iter().map(|s| s.trans_err_m).collect();
    let pose_errs: Vec<f64> = per_sample.iter().filter_map(|s| s.pose_err_deg).collect();
    let trans_angles: Vec<f64> = per_sample.iter().filter_map(|s| s.trans_angle_deg).collect();
    let adds: Vec<f64> = per_sample.iter().filter_map(|s| s.add_m).collect();
    let add_ss: Vec<f64> = per_sample.iter().filter_map(|s| s.add_s_m).collect();
    let vcres: Vec<f64> = per_sample.iter().filter_map(|s| s.vcre_px).collect();
    let excluded = per_sample.len() - pose_errs.len();

    let trans_threshold = if object_scenario {
        thresholds.trans_object_m
    } else {
        thresholds.trans_m
    };

    let pose_auc = if pose_errs.is_empty() {
        thresholds.auc_deg.iter().map(|_| 0.0).collect()
    } else {
        auc(&pose_errs, &thresholds.auc_deg)?
    };

    let reloc_prec = (!per_sample.is_empty()).then(|| {
        per_sample
            .iter()
            .filter(|s| s.trans_err_m <= thresholds.reloc_trans_m && s.rot_err_deg <= thresholds.reloc_rot_deg)
            .count() as f64
            / per_sample.len() as f64
    });

    let aggregates = Aggregates {
        count: per_sample.len(),
        excluded_degenerate: excluded,
        rot_med_deg: median(&mut rots.clone()).unwrap(),
        rot_mean_deg: mean(&rots),
        rot_prec: precision(&rots, thresholds.rot_deg),
        trans_med_m: median(&mut transes.clone()).unwrap(),
        trans_mean_m: mean(&transes),
        trans_prec: precision(&transes, trans_threshold),
        trans_angle_med_deg: median(&mut trans_angles.clone()),
        pose_auc,
        reloc_prec,
        add_med_m: median(&mut adds.clone()),
        add_s_med_m: median(&mut add_ss.clone()),
        add_prec: (!adds.is_empty()).then(|| precision(&adds, thresholds.trans_object_m)),
        add_s_prec: (!add_ss.is_empty()).then(|| precision(&add_ss, thresholds.trans_object_m)),
        vcre_med_px: median(&mut vcres.clone()),
        vcre_prec: (!vcres.is_empty()).then(|| precision(&vcres, thresholds.vcre_px)),
    };
    Ok(EvalReport {
        thresholds: thresholds.clone(),
        aggregates,
        per_sample: per_sample.to_vec(),
    })
}

const CSV_HEADER: &str =
    "index,rot_err_deg,trans_err_m,trans_angle_deg,pose_err_deg,add_m,add_s_m,vcre_px";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl EvalReport {
    /// Aggregates as JSON, one object.
    pub fn write_json(&self, path: &Path) -> Result<(), MetricsError> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    /// Per-sample rows as CSV with one header line.
    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{CSV_HEADER}")?;
        for s in &self.per_sample {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                s.index,
                s.rot_err_deg,
                s.trans_err_m,
                opt_field(s.trans_angle_deg),
                opt_field(s.pose_err_deg),
                opt_field(s.add_m),
                opt_field(s.add_s_m),
                opt_field(s.vcre_px),
            )?;
        }
        Ok(())
    }

    /// Read back per-sample rows written by [`Self::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Vec<SampleEval>, MetricsError> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut out = Vec::new();
        for (idx, line) in f.lines().enumerate() {
            let line = line?;
            if idx == 0 {
                if line != CSV_HEADER {
                    return Err(MetricsError::ParseError {
                        line: 1,
                        msg: "unexpected header".into(),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(MetricsError::ParseError {
                    line: idx + 1,
                    msg: format!("expected 8 fields, got {}", fields.len()),
                });
            }
            let parse = |s: &str| -> Result<f64, MetricsError> {
                s.parse().map_err(|e| MetricsError::ParseError {
                    line: idx + 1,
                    msg: format!("bad float {s:?}: {e}"),
                })
            };
            let parse_opt = |s: &str| -> Result<Option<f64>, MetricsError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    parse(s).map(Some)
                }
            };
            out.push(SampleEval {
                index: fields[0].parse().map_err(|_| MetricsError::ParseError {
                    line: idx + 1,
                    msg: "bad index".into(),
                })?,
                rot_err_deg: parse(fields[1])?,
                trans_err_m: parse(fields[2])?,
                trans_angle_deg: parse_opt(fields[3])?,
                pose_err_deg: parse_opt(fields[4])?,
                add_m: parse_opt(fields[5])?,
                add_s_m: parse_opt(fields[6])?,
                vcre_px: parse_opt(fields[7])?,
            });
        }
        Ok(out)
    }
}
