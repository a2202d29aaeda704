use crate::dual::Scalar;
use crate::types::Camera;

/// Screen-space quantities of one Gaussian, generic so the same code yields
/// values (`f64`) and Jacobians (`Dual`).
#[derive(Debug, Clone, Copy)]
pub(crate) struct ProjectedCore<S> {
    pub u: S,
    pub v: S,
    /// Covariance `J W Σ Wᵀ Jᵀ` as (xx, xy, yy), before regularization.
    pub cov: [S; 3],
    /// Inverse of the regularized covariance as (xx, xy, yy).
    pub conic: [S; 3],
    pub z: S,
    pub plane: S,
    pub normal: [S; 3],
    /// Unit world-space direction from the camera center to the mean.
    pub dir: [S; 3],
    /// Determinant of the regularized covariance.
    pub det: f64,
}

pub(crate) struct ProjectInput<S> {
    pub mean: [S; 3],
    pub quat: [S; 4],
    pub log_scale: [S; 3],
}

/// Projects one Gaussian. Returns `None` when its center is outside `(near, far)`.
pub(crate) fn project_core<S: Scalar>(
    input: &ProjectInput<S>,
    cam: &Camera,
    blur: f64,
) -> Option<ProjectedCore<S>> {
    let c = S::cst;
    let w = cam.rotation.transpose();
    let rel = [
        input.mean[0] - c(cam.center.x),
        input.mean[1] - c(cam.center.y),
        input.mean[2] - c(cam.center.z),
    ];
    let mut p = [c(0.0); 3];
    for (i, pi) in p.iter_mut().enumerate() {
        *pi = c(w[(i, 0)]) * rel[0] + c(w[(i, 1)]) * rel[1] + c(w[(i, 2)]) * rel[2];
    }
    let z = p[2];
    if !(z.re() > cam.near && z.re() < cam.far) {
        return None;
    }

    let [qw, qx, qy, qz] = input.quat;
    let qn = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
    let (qw, qx, qy, qz) = (qw / qn, qx / qn, qy / qn, qz / qn);
    let two = c(2.0);
    let one = c(1.0);
    let rot = [
        [
            one - two * (qy * qy + qz * qz),
            two * (qx * qy - qw * qz),
            two * (qx * qz + qw * qy),
        ],
        [
            two * (qx * qy + qw * qz),
            one - two * (qx * qx + qz * qz),
            two * (qy * qz - qw * qx),
        ],
        [
            two * (qx * qz - qw * qy),
            two * (qy * qz + qw * qx),
            one - two * (qx * qx + qy * qy),
        ],
    ];
    let scale = input.log_scale.map(|s| s.exp());

    // V = W R S, so the camera-frame covariance is V Vᵀ.
    let mut v = [[c(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let wr = c(w[(i, 0)]) * rot[0][j] + c(w[(i, 1)]) * rot[1][j] + c(w[(i, 2)]) * rot[2][j];
            v[i][j] = wr * scale[j];
        }
    }

    let inv_z = one / z;
    let j00 = c(cam.fx) * inv_z;
    let j02 = -(c(cam.fx) * p[0] * inv_z * inv_z);
    let j11 = c(cam.fy) * inv_z;
    let j12 = -(c(cam.fy) * p[1] * inv_z * inv_z);
    let mut t = [[c(0.0); 3]; 2];
    for k in 0..3 {
        t[0][k] = j00 * v[0][k] + j02 * v[2][k];
        t[1][k] = j11 * v[1][k] + j12 * v[2][k];
    }
    let dot3 = |a: &[S; 3], b: &[S; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cov = [dot3(&t[0], &t[0]), dot3(&t[0], &t[1]), dot3(&t[1], &t[1])];
    let a = cov[0] + c(blur);
    let b = cov[1];
    let d = cov[2] + c(blur);
    let det = a * d - b * b;
    let conic = [d / det, -b / det, a / det];

    // Normal: rotation column of the smallest scale, local z on ties.
    let mut axis = 2;
    for k in (0..2).rev() {
        if input.log_scale[k].re() < input.log_scale[axis].re() {
            axis = k;
        }
    }
    let mut normal = [c(0.0); 3];
    for (i, ni) in normal.iter_mut().enumerate() {
        *ni =
            c(w[(i, 0)]) * rot[0][axis] + c(w[(i, 1)]) * rot[1][axis] + c(w[(i, 2)]) * rot[2][axis];
    }
    if dot3(&normal, &p).re() > 0.0 {
        normal = normal.map(|n| -n);
    }
    let plane = -dot3(&normal, &p);

    let dist = dot3(&rel, &rel).sqrt();
    let dir = rel.map(|r| r / dist);

    Some(ProjectedCore {
        u: c(cam.fx) * p[0] * inv_z + c(cam.cx),
        v: c(cam.fy) * p[1] * inv_z + c(cam.cy),
        cov,
        conic,
        z,
        plane,
        normal,
        dir,
        det: det.re(),
    })
}
