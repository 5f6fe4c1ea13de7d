//! Projector-camera calibration model and phase triangulation.
//!
//! Devices follow the world-to-device convention `p_dev = R * p_world + T`
//! with column vectors; a device's composed matrix is `A = K [R | T]`.
//! Pixel centers sit at integer coordinates.

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest entry change allowed when snapping a rotation onto SO(3).
const MAX_ROTATION_CORRECTION: f64 = 1e-3;

/// Triangulations whose row-equilibrated system exceeds this condition number are rejected.
pub const MAX_CONDITION: f64 = 1e8;

/// Perspective projection matrix with its factored intrinsics and extrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    a: Matrix3x4<f64>,
}

/// Result of projecting a world point into a device.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

impl ProjectionMatrix {
    /// Builds a device from full intrinsics, re-orthonormalizing `rotation`.
    pub fn new(k: Matrix3<f64>, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !upper {
            return Err(Error::InvalidIntrinsics("K must be upper-triangular".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0 && k[(2, 2)] > 0.0) {
            return Err(Error::InvalidIntrinsics(
                "K must have a strictly positive diagonal".into(),
            ));
        }
        if !k.iter().chain(rotation.iter()).chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite calibration entry".into()));
        }
        let r = orthonormalize(&rotation)?;
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| Error::InvalidIntrinsics("K is singular".into()))?;
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Ok(Self {
            k,
            k_inv,
            r,
            t: translation,
            a: k * rt,
        })
    }

    /// Pinhole device with square-pixel-free intrinsics `[fx 0 cx; 0 fy cy; 0 0 1]`.
    pub fn pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Self::new(k, rotation, translation)
    }

    /// Device placed at `center` (world mm) looking at `target`, image `v` axis along `down`.
    pub fn look_at(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        center: Vector3<f64>,
        target: Vector3<f64>,
        down: Vector3<f64>,
    ) -> Result<Self> {
        let z = (target - center).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * center);
        Self::pinhole(fx, fy, cx, cy, r, t)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    /// The composed 3x4 matrix `K [R | T]`.
    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.a
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    pub fn to_device(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Projection> {
        let depth = (self.r * p + self.t).z;
        if depth <= 0.0 {
            return Err(Error::BehindCamera(depth));
        }
        let h = self.a * p.push(1.0);
        Ok(Projection {
            u: h.x / h.z,
            v: h.y / h.z,
            depth,
        })
    }

    /// Back-projected ray through pixel `(u, v)` in world coordinates.
    pub fn back_project(&self, u: f64, v: f64) -> Ray {
        let dir = self.r.transpose() * (self.k_inv * Vector3::new(u, v, 1.0));
        Ray {
            origin: self.center(),
            direction: dir.normalize(),
        }
    }

    /// World point on pixel `(u, v)` whose device-frame depth is `depth`.
    pub fn point_at_depth(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let ray = self.k_inv * Vector3::new(u, v, 1.0);
        let p_dev = ray * (depth / ray.z);
        self.r.transpose() * (p_dev - self.t)
    }

    /// The depth direction `R^-1 K^-1 e`, `e = (0, 0, 1)`, normalized, in world coordinates.
    pub fn view_ray_direction(&self) -> Vector3<f64> {
        (self.r.transpose() * self.k_inv.column(2)).normalize()
    }
}

/// Snaps a near-rotation onto SO(3) through its polar factor.
fn orthonormalize(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::NonOrthonormalRotation(f64::INFINITY)),
    };
    let r = u * vt;
    let shift = (r - m).amax();
    if r.determinant() < 0.0 || shift > MAX_ROTATION_CORRECTION {
        return Err(Error::NonOrthonormalRotation(shift.max(MAX_ROTATION_CORRECTION)));
    }
    Ok(r)
}

pub fn rotation_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rotation_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rotation_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `Rz(z) * Ry(y) * Rx(x)`.
pub fn rotation_xyz(x: f64, y: f64, z: f64) -> Matrix3<f64> {
    rotation_z(z) * rotation_y(y) * rotation_x(x)
}

/// A triangulated point and its derivative with respect to the projector column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    /// d(point) / d(u_p). Always parallel to the camera pixel's ray.
    pub d_point_d_up: Vector3<f64>,
}

/// Intersects the camera ray of `(u_c, v_c)` with the projector plane of column `u_p`.
pub fn triangulate(
    camera: &ProjectionMatrix,
    projector: &ProjectionMatrix,
    u_c: f64,
    v_c: f64,
    u_p: f64,
) -> Result<Triangulation> {
    let ac = camera.matrix();
    let ap = projector.matrix();
    let mut m = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (row, (a, coord, i)) in [(ac, u_c, 0usize), (ac, v_c, 1), (ap, u_p, 0)]
        .into_iter()
        .enumerate()
    {
        for j in 0..3 {
            m[(row, j)] = a[(i, j)] - coord * a[(2, j)];
        }
        b[row] = -(a[(i, 3)] - coord * a[(2, 3)]);
    }

    let cond = equilibrated_condition(&m);
    if !(cond < MAX_CONDITION) {
        return Err(Error::DegenerateGeometry(cond));
    }
    let inv = invert_pivoting(&m).ok_or(Error::DegenerateGeometry(f64::INFINITY))?;
    let point = inv * b;
    // Only the projector row depends on u_p: M dx = e3 * (A_p[2] . [x; 1]).
    let scale = ap.row(2).dot(&point.push(1.0).transpose());
    let d_point_d_up = inv.column(2) * scale;
    Ok(Triangulation {
        point,
        d_point_d_up,
    })
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
fn invert_pivoting(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let mut a = *m;
    let mut inv = Matrix3::identity();
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .unwrap_or(col);
        if a[(pivot, col)] == 0.0 {
            return None;
        }
        a.swap_rows(col, pivot);
        inv.swap_rows(col, pivot);
        let p = a[(col, col)];
        for j in 0..3 {
            a[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for row in 0..3 {
            if row != col {
                let f = a[(row, col)];
                if f != 0.0 {
                    for j in 0..3 {
                        a[(row, j)] -= f * a[(col, j)];
                        inv[(row, j)] -= f * inv[(col, j)];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// 1-norm condition number after scaling every row to unit length.
fn equilibrated_condition(m: &Matrix3<f64>) -> f64 {
    let mut s = *m;
    for i in 0..3 {
        let n = s.row(i).norm();
        if n == 0.0 {
            return f64::INFINITY;
        }
        for j in 0..3 {
            s[(i, j)] /= n;
        }
    }
    match invert_pivoting(&s) {
        Some(inv) => one_norm(&s) * one_norm(&inv),
        None => f64::INFINITY,
    }
}

fn one_norm(m: &Matrix3<f64>) -> f64 {
    (0..3)
        .map(|j| (0..3).map(|i| m[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Restricts point gradients to the camera depth direction.
///
/// Each gradient is mapped into the `K R` frame, its two image-plane
/// components are dropped and the remainder is mapped back, leaving a vector
/// parallel to [`ProjectionMatrix::view_ray_direction`].
pub fn constrain_gradient(grads: &[Vector3<f64>], camera: &ProjectionMatrix) -> Vec<Vector3<f64>> {
    let kr = camera.intrinsics() * camera.rotation();
    let depth_row = kr.row(2).transpose();
    // (K R)^-1 e
    let back = camera.rotation().transpose() * camera.k_inv.column(2);
    grads.iter().map(|g| back * depth_row.dot(g)).collect()
}

/// Camera and projector pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub camera: ProjectionMatrix,
    pub projector: ProjectionMatrix,
}

#[derive(Serialize, Deserialize)]
struct DeviceJson {
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    #[serde(rename = "T")]
    t: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct CalibrationJson {
    camera: DeviceJson,
    projector: DeviceJson,
}

fn device_json(d: &ProjectionMatrix) -> DeviceJson {
    let row_major = |m: &Matrix3<f64>| {
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[3 * i + j] = m[(i, j)];
            }
        }
        out
    };
    DeviceJson {
        k: row_major(&d.k),
        r: row_major(&d.r),
        t: [d.t.x, d.t.y, d.t.z],
    }
}

fn device_from_json(d: &DeviceJson) -> Result<ProjectionMatrix> {
    ProjectionMatrix::new(
        Matrix3::from_row_slice(&d.k),
        Matrix3::from_row_slice(&d.r),
        Vector3::from_row_slice(&d.t),
    )
}

impl Calibration {
    /// JSON document `{camera:{K,R,T}, projector:{K,R,T}}`, row-major, millimeters.
    pub fn to_json(&self) -> Result<String> {
        let doc = CalibrationJson {
            camera: device_json(&self.camera),
            projector: device_json(&self.projector),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CalibrationJson = serde_json::from_str(text)?;
        Ok(Self {
            camera: device_from_json(&doc.camera)?,
            projector: device_from_json(&doc.projector)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        rotation_xyz(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        )
    }

    fn random_device(rng: &mut ChaCha8Rng) -> ProjectionMatrix {
        let r = random_rotation(rng);
        let t = Vector3::new(
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-100.0..100.0),
        );
        ProjectionMatrix::pinhole(
            rng.gen_range(100.0..3000.0),
            rng.gen_range(100.0..3000.0),
            rng.gen_range(-50.0..800.0),
            rng.gen_range(-50.0..600.0),
            r,
            t,
        )
        .unwrap()
    }

    fn rig() -> Calibration {
        let camera =
            ProjectionMatrix::pinhole(400.0, 400.0, 31.5, 31.5, Matrix3::identity(), Vector3::zeros())
                .unwrap();
        let projector = ProjectionMatrix::look_at(
            2200.0,
            1100.0,
            255.5,
            95.5,
            Vector3::new(300.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1500.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        Calibration { camera, projector }
    }

    #[test]
    fn identity_pinhole_is_identity_block() {
        let d = ProjectionMatrix::pinhole(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros())
            .unwrap();
        let expected = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        assert_eq!(d.matrix(), &expected);
    }

    #[test]
    fn scaled_pinhole() {
        let d = ProjectionMatrix::pinhole(2.0, 2.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros())
            .unwrap();
        let expected = Matrix3x4::new(2.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        assert_eq!(d.matrix(), &expected);
    }

    #[test]
    fn composed_matrix_matches_explicit_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let d = random_device(&mut rng);
            let (k, r, t) = (d.intrinsics(), d.rotation(), d.translation());
            for i in 0..3 {
                for j in 0..4 {
                    let mut acc = 0.0;
                    for l in 0..3 {
                        let rt = if j < 3 { r[(l, j)] } else { t[l] };
                        acc += k[(i, l)] * rt;
                    }
                    assert!((acc - d.matrix()[(i, j)]).abs() <= 1e-12 * (1.0 + acc.abs()));
                }
            }
            let rrt = r * r.transpose();
            assert!((rrt - Matrix3::identity()).amax() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_rotations_and_intrinsics() {
        let mut bent = Matrix3::identity();
        bent[(0, 1)] = 0.05;
        assert!(matches!(
            ProjectionMatrix::pinhole(1.0, 1.0, 0.0, 0.0, bent, Vector3::zeros()),
            Err(Error::NonOrthonormalRotation(_))
        ));
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(ProjectionMatrix::pinhole(1.0, 1.0, 0.0, 0.0, reflection, Vector3::zeros()).is_err());
        assert!(matches!(
            ProjectionMatrix::pinhole(0.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros()),
            Err(Error::InvalidIntrinsics(_))
        ));
        // Small drift is repaired rather than rejected.
        let mut drift = Matrix3::identity();
        drift[(0, 1)] = 1e-7;
        let d = ProjectionMatrix::pinhole(1.0, 1.0, 0.0, 0.0, drift, Vector3::zeros()).unwrap();
        assert!((d.rotation() * d.rotation().transpose() - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let d = ProjectionMatrix::pinhole(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros())
            .unwrap();
        let p = d.project(&Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (0.0, 0.0, 5.0));
        let p = d.project(&Vector3::new(1.0, 2.0, 2.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (0.5, 1.0, 2.0));
        assert!(matches!(
            d.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn projection_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 200 {
            let d = random_device(&mut rng);
            let p = Vector3::new(
                rng.gen_range(-500.0..500.0),
                rng.gen_range(-500.0..500.0),
                rng.gen_range(-500.0..500.0),
            );
            // Oracle: explicit 3x4 times homogeneous 4-vector, row by row.
            let a = d.matrix();
            let h: Vec<f64> = (0..3)
                .map(|i| a[(i, 0)] * p.x + a[(i, 1)] * p.y + a[(i, 2)] * p.z + a[(i, 3)])
                .collect();
            let depth = (d.rotation() * p + d.translation()).z;
            match d.project(&p) {
                Ok(pr) => {
                    assert!(depth > 0.0);
                    assert!(close(pr.u, h[0] / h[2], 1e-10 * (1.0 + pr.u.abs())));
                    assert!(close(pr.v, h[1] / h[2], 1e-10 * (1.0 + pr.v.abs())));
                    checked += 1;
                }
                Err(_) => assert!(depth <= 0.0),
            }
        }
    }

    #[test]
    fn triangulation_round_trip() {
        let cal = rig();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = Vector3::new(
                rng.gen_range(-100.0..100.0),
                rng.gen_range(-100.0..100.0),
                rng.gen_range(1300.0..1700.0),
            );
            let c = cal.camera.project(&p).unwrap();
            let q = cal.projector.project(&p).unwrap();
            let tri = triangulate(&cal.camera, &cal.projector, c.u, c.v, q.u).unwrap();
            assert!((tri.point - p).norm() < 1e-8, "{:?} vs {:?}", tri.point, p);
        }
    }

    #[test]
    fn column_perturbation_moves_along_camera_ray() {
        let cal = rig();
        let a = triangulate(&cal.camera, &cal.projector, 20.0, 40.0, 250.0).unwrap();
        let b = triangulate(&cal.camera, &cal.projector, 20.0, 40.0, 253.5).unwrap();
        let ray = cal.camera.back_project(20.0, 40.0);
        let d = (b.point - a.point).normalize();
        assert!(d.cross(&ray.direction).norm() < 1e-9);
        assert!(a.d_point_d_up.normalize().cross(&ray.direction).norm() < 1e-12);
        let pa = cal.camera.project(&b.point).unwrap();
        assert!((pa.u - 20.0).abs() < 1e-9 && (pa.v - 40.0).abs() < 1e-9);
    }

    #[test]
    fn triangulation_derivative_matches_central_differences() {
        let cal = rig();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-4;
        for _ in 0..200 {
            let (uc, vc, up) = (
                rng.gen_range(0.0..63.0),
                rng.gen_range(0.0..63.0),
                rng.gen_range(100.0..400.0),
            );
            let t = triangulate(&cal.camera, &cal.projector, uc, vc, up).unwrap();
            let plus = triangulate(&cal.camera, &cal.projector, uc, vc, up + h).unwrap();
            let minus = triangulate(&cal.camera, &cal.projector, uc, vc, up - h).unwrap();
            let fd = (plus.point - minus.point) / (2.0 * h);
            for i in 0..3 {
                let rel = (fd[i] - t.d_point_d_up[i]).abs() / t.d_point_d_up.norm();
                assert!(rel < 1e-5, "component {i}: fd {} analytic {}", fd[i], t.d_point_d_up[i]);
            }
        }
    }

    #[test]
    fn parallel_geometry_is_degenerate() {
        // Projector coincides with the camera: every column plane contains the camera ray.
        let cam =
            ProjectionMatrix::pinhole(400.0, 400.0, 31.5, 31.5, Matrix3::identity(), Vector3::zeros())
                .unwrap();
        let err = triangulate(&cam, &cam, 31.5, 31.5, 31.5).unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry(_)));
    }

    #[test]
    fn view_ray_direction_conventions() {
        let d = ProjectionMatrix::pinhole(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros())
            .unwrap();
        assert_eq!(d.view_ray_direction(), Vector3::new(0.0, 0.0, 1.0));

        // p_cam = Rx(90deg) p_world: the camera z axis is world +y.
        let rx = rotation_x(std::f64::consts::FRAC_PI_2);
        let d = ProjectionMatrix::pinhole(1.0, 1.0, 0.0, 0.0, rx, Vector3::zeros()).unwrap();
        let dir = d.view_ray_direction();
        assert!((dir - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let d = random_device(&mut rng);
            assert!((d.view_ray_direction().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constrain_gradient_projects_onto_depth_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let id = ProjectionMatrix::pinhole(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros())
            .unwrap();
        let d = id.view_ray_direction();
        let grads: Vec<Vector3<f64>> = (0..50)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let out = constrain_gradient(&grads, &id);
        for (g, o) in grads.iter().zip(&out) {
            assert!((o - d * g.dot(&d)).norm() < 1e-10);
        }

        // Rotated device with the principal point at the origin: still an orthogonal projection.
        for _ in 0..50 {
            let cam = ProjectionMatrix::pinhole(
                rng.gen_range(100.0..1000.0),
                rng.gen_range(100.0..1000.0),
                0.0,
                0.0,
                random_rotation(&mut rng),
                Vector3::zeros(),
            )
            .unwrap();
            let d = cam.view_ray_direction();
            let along = d * rng.gen_range(-3.0..3.0);
            let out = constrain_gradient(&[along], &cam);
            assert!((out[0] - along).norm() < 1e-10);
            let ortho = d.cross(&Vector3::new(0.3, -0.2, 0.9)).normalize();
            let out = constrain_gradient(&[ortho], &cam);
            assert!(out[0].norm() < 1e-10);
        }

        // General intrinsics: output always parallel to the view direction and idempotent.
        for _ in 0..50 {
            let cam = random_device(&mut rng);
            let d = cam.view_ray_direction();
            let g = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let once = constrain_gradient(&[g], &cam)[0];
            assert!(once.cross(&d).norm() <= 1e-10 * (1.0 + once.norm()));
            let twice = constrain_gradient(&[once], &cam)[0];
            assert!((twice - once).norm() <= 1e-10 * (1.0 + once.norm()));
        }
    }

    #[test]
    fn depth_only_displacement_keeps_pixel() {
        let cal = rig();
        let dir = cal.camera.view_ray_direction();
        for v in (0..64).step_by(3) {
            for u in (0..64).step_by(3) {
                let p = cal.camera.point_at_depth(u as f64, v as f64, 1500.0);
                for step in [-5.0, -2.5, 2.5, 5.0] {
                    let q = cal.camera.project(&(p + dir * step)).unwrap();
                    assert_eq!((q.u.round() as i64, q.v.round() as i64), (u as i64, v as i64));
                }
            }
        }
    }

    #[test]
    fn calibration_json_round_trip() {
        let cal = rig();
        let text = cal.to_json().unwrap();
        assert!(text.contains("\"camera\"") && text.contains("\"projector\""));
        let back = Calibration::from_json(&text).unwrap();
        assert!((back.camera.matrix() - cal.camera.matrix()).amax() < 1e-9);
        assert!((back.projector.matrix() - cal.projector.matrix()).amax() < 1e-9);
    }
}
