use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RenderError;

/// Half-diagonal of the `[-1, 1]^3` scene cube.
const SCENE_HALF_DIAGONAL: f64 = 1.732_050_807_568_877_2;

/// Pinhole camera. `r` maps camera axes (x right, y down, z forward) to world
/// axes and `t` is the camera centre in world coordinates. The world is y-up.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    k_inv: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

impl Camera {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self, RenderError> {
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| RenderError::Camera("intrinsics are singular".into()))?;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || r.determinant() < 0.0 {
            return Err(RenderError::Camera(format!(
                "rotation is not orthonormal (deviation {ortho:.2e})"
            )));
        }
        if !(near > 0.0 && near < far) {
            return Err(RenderError::Camera(format!(
                "need 0 < near < far, got {near} and {far}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(RenderError::Camera("empty image".into()));
        }
        Ok(Self {
            k,
            r,
            t,
            width,
            height,
            near,
            far,
            k_inv,
        })
    }

    /// Intrinsics for a vertical field of view with the principal point at the
    /// image centre.
    pub fn intrinsics(fov_y_deg: f64, width: usize, height: usize) -> Matrix3<f64> {
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Matrix3::new(
            f,
            0.0,
            0.5 * width as f64,
            0.0,
            f,
            0.5 * height as f64,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn center(&self) -> [f64; 3] {
        [self.t.x, self.t.y, self.t.z]
    }

    /// Ray through continuous pixel coordinate `p` (pixel `(i, j)` spans
    /// `[j, j+1) x [i, i+1)`).
    pub fn pixel_ray(&self, p: [f64; 2]) -> Result<Ray, RenderError> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(p[0] >= 0.0 && p[0] <= w && p[1] >= 0.0 && p[1] <= h) {
            return Err(RenderError::Camera(format!(
                "pixel ({}, {}) outside {}x{} image",
                p[0], p[1], self.width, self.height
            )));
        }
        let d = self.r * (self.k_inv * Vector3::new(p[0], p[1], 1.0));
        let d = d.normalize();
        Ok(Ray {
            origin: self.center(),
            dir: [d.x, d.y, d.z],
        })
    }

    /// Rays through every pixel centre, row-major from the top-left.
    pub fn rays(&self) -> Vec<Ray> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for i in 0..self.height {
            for j in 0..self.width {
                let d = self.r * (self.k_inv * Vector3::new(j as f64 + 0.5, i as f64 + 0.5, 1.0));
                let d = d.normalize();
                out.push(Ray {
                    origin: self.center(),
                    dir: [d.x, d.y, d.z],
                });
            }
        }
        out
    }

    /// World point to camera coordinates (x right, y down, z forward).
    pub fn to_camera(&self, x: [f64; 3]) -> [f64; 3] {
        let c = self.r.transpose() * (Vector3::from(x) - self.t);
        [c.x, c.y, c.z]
    }

    /// Pixel coordinates and eye-space depth of a world point, if it lies in
    /// front of the camera.
    pub fn project(&self, x: [f64; 3]) -> Option<([f64; 2], f64)> {
        let c = self.to_camera(x);
        if c[2] <= 0.0 {
            return None;
        }
        let p = self.k * Vector3::new(c[0] / c[2], c[1] / c[2], 1.0);
        Some(([p.x, p.y], c[2]))
    }

    /// Azimuth (degrees in `[0, 360)`, 0 toward +z, 90 toward +x) and
    /// elevation (degrees, positive toward +y) of the camera centre.
    pub fn azimuth_elevation(&self) -> (f64, f64) {
        let c = self.t;
        let r = c.norm().max(f64::MIN_POSITIVE);
        let el = (c.y / r).clamp(-1.0, 1.0).asin().to_degrees();
        let az = c.x.atan2(c.z).to_degrees().rem_euclid(360.0);
        (az, el)
    }
}

/// Image size and field of view shared by a family of cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lens {
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Lens {
    pub fn square(fov_y_deg: f64, size: usize) -> Self {
        Self {
            fov_y_deg,
            width: size,
            height: size,
        }
    }
}

/// Camera on a sphere of radius `radius` looking at the origin.
pub fn orbit_camera(azimuth_deg: f64, elevation_deg: f64, radius: f64, lens: &Lens) -> Camera {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let pos = Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * radius;
    let forward = (-pos).normalize();
    let mut right = forward.cross(&Vector3::y());
    if right.norm() < 1e-9 {
        // Straight up or down: keep azimuth 0 "up" pointing toward -z on screen.
        right = forward.cross(&Vector3::new(-az.sin(), 0.0, -az.cos()));
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_columns(&[right, down, forward]);
    let near = (radius - SCENE_HALF_DIAGONAL).max(0.1);
    let far = radius + SCENE_HALF_DIAGONAL;
    Camera::new(
        Camera::intrinsics(lens.fov_y_deg, lens.width, lens.height),
        r,
        pos,
        lens.width,
        lens.height,
        near,
        far,
    )
    .expect("orbit cameras are valid by construction")
}

/// Distribution of stage-1 training cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSampling {
    pub radius_min: f64,
    pub radius_max: f64,
    pub fov_y_deg: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for CameraSampling {
    fn default() -> Self {
        Self {
            radius_min: 2.5,
            radius_max: 3.0,
            fov_y_deg: 40.0,
            elevation_min_deg: -90.0,
            elevation_max_deg: 90.0,
        }
    }
}

/// Random camera: azimuth uniform in `[0, 360)`, elevation uniform over the
/// configured range (the full `[-90, 90]` by default), radius uniform.
pub fn sample_training_camera<R: Rng + ?Sized>(
    rng: &mut R,
    sampling: &CameraSampling,
    resolution: usize,
) -> Camera {
    let az = rng.random_range(0.0..360.0);
    let el = rng.random_range(sampling.elevation_min_deg..=sampling.elevation_max_deg);
    let radius = if sampling.radius_max > sampling.radius_min {
        rng.random_range(sampling.radius_min..sampling.radius_max)
    } else {
        sampling.radius_min
    };
    orbit_camera(az, el, radius, &Lens::square(sampling.fov_y_deg, resolution))
}

/// `n` cameras at azimuths `360 i / n`, all at `elevation_deg`.
pub fn turntable_cameras(n: usize, elevation_deg: f64, radius: f64, lens: &Lens) -> Vec<Camera> {
    (0..n)
        .map(|i| orbit_camera(360.0 * i as f64 / n as f64, elevation_deg, radius, lens))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(t: Vector3<f64>) -> Camera {
        Camera::new(
            Camera::intrinsics(60.0, 32, 32),
            Matrix3::identity(),
            t,
            32,
            32,
            0.1,
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn centre_pixel_looks_down_optical_axis() {
        let cam = axis_camera(Vector3::zeros());
        let ray = cam.pixel_ray([16.0, 16.0]).unwrap();
        assert_eq!(ray.dir, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn translation_moves_origin_only() {
        let a = axis_camera(Vector3::zeros()).pixel_ray([3.0, 7.0]).unwrap();
        let b = axis_camera(Vector3::new(1.0, -2.0, 0.5))
            .pixel_ray([3.0, 7.0])
            .unwrap();
        assert_eq!(a.dir, b.dir);
        assert_eq!(b.origin, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn corner_angle_matches_pinhole_geometry() {
        let cam = axis_camera(Vector3::zeros());
        let f = cam.k[(0, 0)];
        let ray = cam.pixel_ray([0.0, 0.0]).unwrap();
        let half = 16.0f64;
        let expected = ((2.0 * half * half).sqrt() / f).atan();
        let angle = ray.dir[2].acos();
        assert!((angle - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_cameras() {
        let k = Matrix3::zeros();
        assert!(Camera::new(k, Matrix3::identity(), Vector3::zeros(), 4, 4, 0.1, 1.0).is_err());
        let k = Camera::intrinsics(40.0, 4, 4);
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(k, skew, Vector3::zeros(), 4, 4, 0.1, 1.0).is_err());
        assert!(Camera::new(k, Matrix3::identity(), Vector3::zeros(), 4, 4, 1.0, 1.0).is_err());
        assert!(axis_camera(Vector3::zeros()).pixel_ray([40.0, 0.0]).is_err());
    }

    #[test]
    fn orbit_cameras_look_at_origin() {
        let lens = Lens::square(40.0, 64);
        for (az, el) in [(0.0, 0.0), (37.0, 20.0), (200.0, -60.0), (10.0, 90.0), (0.0, -90.0)] {
            let cam = orbit_camera(az, el, 2.5, &lens);
            let (p, depth) = cam.project([0.0; 3]).unwrap();
            assert!((p[0] - 32.0).abs() < 1e-9 && (p[1] - 32.0).abs() < 1e-9, "{az} {el}");
            assert!((depth - 2.5).abs() < 1e-12);
            let rtr = cam.r.transpose() * cam.r;
            assert!((rtr - Matrix3::identity()).abs().max() < 1e-12);
            if el.abs() < 89.0 {
                let (a, e) = cam.azimuth_elevation();
                assert!((a - az).abs() < 1e-9 && (e - el).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn world_up_appears_up_on_screen() {
        let cam = orbit_camera(30.0, 10.0, 3.0, &Lens::square(40.0, 64));
        let (top, _) = cam.project([0.0, 0.5, 0.0]).unwrap();
        assert!(top[1] < 32.0);
        let (right, _) = orbit_camera(0.0, 0.0, 3.0, &Lens::square(40.0, 64))
            .project([0.5, 0.0, 0.0])
            .unwrap();
        assert!(right[0] > 32.0);
    }

    #[test]
    fn training_cameras_cover_full_elevation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sampling = CameraSampling::default();
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for _ in 0..10_000 {
            let (_, el) = sample_training_camera(&mut rng, &sampling, 8).azimuth_elevation();
            lo = lo.min(el);
            hi = hi.max(el);
        }
        assert!(lo < -80.0 && hi > 80.0, "{lo} {hi}");
        let a = sample_training_camera(&mut ChaCha8Rng::seed_from_u64(9), &sampling, 8);
        let b = sample_training_camera(&mut ChaCha8Rng::seed_from_u64(9), &sampling, 8);
        assert_eq!(a, b);
    }

    #[test]
    fn turntable_spacing_and_symmetry() {
        let lens = Lens::square(40.0, 16);
        let cams = turntable_cameras(60, 30.0, 2.5, &lens);
        assert_eq!(cams.len(), 60);
        for w in cams.windows(2) {
            let gap = (w[1].azimuth_elevation().0 - w[0].azimuth_elevation().0).rem_euclid(360.0);
            assert!((gap - 6.0).abs() < 1e-9);
            assert!((w[0].azimuth_elevation().1 - 30.0).abs() < 1e-9);
        }
        let flat = turntable_cameras(8, 0.0, 2.5, &lens);
        for i in 0..4 {
            let (a, b) = (flat[i].t, flat[i + 4].t);
            assert!((a + b).norm() < 1e-12);
        }
        let single = turntable_cameras(1, 0.0, 2.5, &lens);
        assert_eq!(single.len(), 1);
        assert!((single[0].azimuth_elevation().0).abs() < 1e-9);
    }
}
