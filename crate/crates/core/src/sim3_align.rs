//! Closed-form Sim(3) alignment of camera trajectories (Umeyama), with the
//! centroid / unit-RMS normalization applied to ground-truth centers first.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const ORTHONORMAL_TOL: f64 = 1e-9;
const COLLINEAR_RATIO: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("trajectories differ in length ({gt} vs {pred})")]
    CountMismatch { gt: usize, pred: usize },
    #[error("pose {id}: rotation is not a proper orthonormal matrix")]
    InvalidRotation { id: String },
    #[error("pose file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Frame or view identifier; numbers and strings round-trip as given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoseId {
    Index(u64),
    Name(String),
}

impl std::fmt::Display for PoseId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PoseId::Index(i) => write!(f, "{i}"),
            PoseId::Name(s) => f.write_str(s),
        }
    }
}

/// Camera pose: world-from-camera rotation and camera center.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub id: PoseId,
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl Pose {
    pub fn new(id: PoseId, rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self, AlignError> {
        if !is_rotation(&rotation, ORTHONORMAL_TOL) {
            return Err(AlignError::InvalidRotation { id: id.to_string() });
        }
        Ok(Self { id, rotation, center })
    }
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let gram = r.transpose() * r - Matrix3::identity();
    gram.iter().all(|v| v.abs() <= tol) && (r.determinant() - 1.0).abs() <= tol
}

/// `x -> s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Transform {
    pub s: f64,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self {
            s: 1.0,
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x * self.s + self.t
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &Sim3Transform) -> Sim3Transform {
        Sim3Transform {
            s: self.s * inner.s,
            r: self.r * inner.r,
            t: self.r * inner.t * self.s + self.t,
        }
    }

    pub fn inverse(&self) -> Sim3Transform {
        let r_inv = self.r.transpose();
        Sim3Transform {
            s: 1.0 / self.s,
            r: r_inv,
            t: -(r_inv * self.t) / self.s,
        }
    }

    /// Maps a pose: rotation `R * R_pose`, center through the point map.
    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        Pose {
            id: pose.id.clone(),
            rotation: self.r * pose.rotation,
            center: self.apply(&pose.center),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UmeyamaFit {
    pub transform: Sim3Transform,
    /// Set when the source points are (numerically) collinear and the
    /// rotation about their line is arbitrary.
    pub collinear: bool,
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Least-squares `s, R, t` minimising `sum |s R source_i + t - target_i|^2`.
pub fn umeyama(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    with_scale: bool,
) -> Result<UmeyamaFit, AlignError> {
    let n = source.len();
    if n != target.len() {
        return Err(AlignError::CountMismatch { gt: n, pred: target.len() });
    }
    if n < 3 {
        return Err(AlignError::TooFewPoints { need: 3, got: n });
    }
    let mu_s = centroid(source);
    let mu_t = centroid(target);
    let mut sigma = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        sigma += (t - mu_t) * ds.transpose();
        var_s += ds.norm_squared();
    }
    sigma /= n as f64;
    var_s /= n as f64;
    if var_s <= f64::MIN_POSITIVE || !var_s.is_finite() {
        return Err(AlignError::DegenerateConfiguration("source points coincide"));
    }

    let svd = sigma.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let d = svd.singular_values;

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let smallest = order[2];
    let collinear = d[order[1]] <= COLLINEAR_RATIO * d[order[0]];

    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        signs[smallest] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&signs) * v_t;
    let s = if with_scale {
        d.component_mul(&signs).sum() / var_s
    } else {
        1.0
    };
    let t = mu_t - r * mu_s * s;
    Ok(UmeyamaFit {
        transform: Sim3Transform { s, r, t },
        collinear,
    })
}

/// Centers moved to zero mean and unit RMS distance; rotations untouched.
pub fn normalize_trajectory(poses: &[Pose]) -> Result<(Vec<Pose>, Sim3Transform), AlignError> {
    if poses.len() < 2 {
        return Err(AlignError::TooFewPoints { need: 2, got: poses.len() });
    }
    let centers: Vec<_> = poses.iter().map(|p| p.center).collect();
    let mu = centroid(&centers);
    let ms = centers.iter().map(|c| (c - mu).norm_squared()).sum::<f64>() / centers.len() as f64;
    if ms <= f64::MIN_POSITIVE || !ms.is_finite() {
        return Err(AlignError::DegenerateConfiguration("all camera centers coincide"));
    }
    let s = 1.0 / ms.sqrt();
    let transform = Sim3Transform {
        s,
        r: Matrix3::identity(),
        t: -mu * s,
    };
    let normalized = poses
        .iter()
        .map(|p| Pose {
            id: p.id.clone(),
            rotation: p.rotation,
            center: (p.center - mu) * s,
        })
        .collect();
    Ok((normalized, transform))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    /// Raw GT to predicted frame: `alignment ∘ normalization`.
    pub transform: Sim3Transform,
    pub normalization: Option<Sim3Transform>,
    /// Umeyama result on the (possibly normalized) GT centers.
    pub alignment: Sim3Transform,
    pub rmse: f64,
    pub residuals: Vec<f64>,
    pub collinear: bool,
}

impl AlignmentReport {
    pub fn to_json(&self) -> serde_json::Value {
        let mat = |m: &Matrix3<f64>| -> Vec<f64> { (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect() };
        let sim = |x: &Sim3Transform| {
            serde_json::json!({
                "s": x.s,
                "R": mat(&x.r),
                "t": [x.t.x, x.t.y, x.t.z],
            })
        };
        serde_json::json!({
            "s": self.transform.s,
            "R": mat(&self.transform.r),
            "t": [self.transform.t.x, self.transform.t.y, self.transform.t.z],
            "rmse": self.rmse,
            "residuals": self.residuals,
            "collinear": self.collinear,
            "normalization": self.normalization.as_ref().map(sim),
            "alignment": sim(&self.alignment),
        })
    }
}

/// Aligns GT centers onto predicted centers, paired by list order.
pub fn align_trajectories(gt: &[Pose], pred: &[Pose], normalize_gt: bool) -> Result<AlignmentReport, AlignError> {
    if gt.len() != pred.len() {
        return Err(AlignError::CountMismatch {
            gt: gt.len(),
            pred: pred.len(),
        });
    }
    if gt.len() < 3 {
        return Err(AlignError::TooFewPoints { need: 3, got: gt.len() });
    }
    let (source, normalization) = if normalize_gt {
        let (normalized, n) = normalize_trajectory(gt)?;
        (normalized.iter().map(|p| p.center).collect::<Vec<_>>(), Some(n))
    } else {
        (gt.iter().map(|p| p.center).collect(), None)
    };
    let target: Vec<_> = pred.iter().map(|p| p.center).collect();
    let fit = umeyama(&source, &target, true)?;
    let transform = match &normalization {
        Some(n) => fit.transform.compose(n),
        None => fit.transform,
    };
    let residuals: Vec<f64> = gt
        .iter()
        .zip(&target)
        .map(|(g, c)| (transform.apply(&g.center) - c).norm())
        .collect();
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    Ok(AlignmentReport {
        transform,
        normalization,
        alignment: fit.transform,
        rmse,
        residuals,
        collinear: fit.collinear,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRecord {
    id: PoseId,
    /// Row-major.
    rotation: [f64; 9],
    center: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseFile {
    poses: Vec<PoseRecord>,
}

pub fn poses_from_json(text: &str) -> Result<Vec<Pose>, AlignError> {
    let file: PoseFile = serde_json::from_str(text).map_err(|e| AlignError::Format(e.to_string()))?;
    file.poses
        .into_iter()
        .map(|r| Pose::new(r.id, Matrix3::from_row_slice(&r.rotation), Vector3::from(r.center)))
        .collect()
}

pub fn poses_to_json(poses: &[Pose]) -> serde_json::Value {
    let file = PoseFile {
        poses: poses
            .iter()
            .map(|p| {
                let mut rotation = [0.0; 9];
                for r in 0..3 {
                    for c in 0..3 {
                        rotation[3 * r + c] = p.rotation[(r, c)];
                    }
                }
                PoseRecord {
                    id: p.id.clone(),
                    rotation,
                    center: [p.center.x, p.center.y, p.center.z],
                }
            })
            .collect(),
    };
    serde_json::to_value(file).expect("pose file serializes")
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>, AlignError> {
    poses_from_json(&std::fs::read_to_string(path)?)
}

pub fn write_poses(poses: &[Pose], path: &Path) -> Result<(), AlignError> {
    let text = serde_json::to_string_pretty(&poses_to_json(poses)).expect("json value prints");
    std::fs::write(path, text + "\n")?;
    Ok(())
}
