use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    /// Vertical field of view in degrees.
    pub fov: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            eye: [2.2, 1.6, 3.2],
            look_at: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            fov: 45.0,
            width: 256,
            height: 256,
        }
    }
}

/// A primary ray with its `[-1, 1]^3` box entry and exit parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub t_enter: f64,
    pub t_exit: f64,
    pub hit: bool,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + t * self.dir[a])
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    a.map(|v| v / n)
}

/// Slab test against `[-1, 1]^3`. Returns `(t_enter, t_exit)` clipped to
/// `t ≥ 0`, or `None` on a miss.
pub fn intersect_box(origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < -1.0 || origin[a] > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut near, mut far) = ((-1.0 - origin[a]) * inv, (1.0 - origin[a]) * inv);
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        t0 = t0.max(near);
        t1 = t1.min(far);
    }
    (t1 > t0).then_some((t0, t1))
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let all_finite = self.eye.iter().chain(&self.look_at).chain(&self.up).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Camera("non-finite vector".into()));
        }
        let view = sub(self.look_at, self.eye);
        if norm(view) == 0.0 {
            return Err(Error::Camera("eye equals look_at".into()));
        }
        if norm(cross(normalize(view), self.up)) < 1e-9 {
            return Err(Error::Camera("up is parallel to the view direction".into()));
        }
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::Camera(format!("fov {} outside (0, 180)", self.fov)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Camera("image size must be positive".into()));
        }
        Ok(())
    }

    /// Orthonormal `(forward, right, up)` frame.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let f = normalize(sub(self.look_at, self.eye));
        let r = normalize(cross(f, self.up));
        let u = cross(r, f);
        (f, r, u)
    }

    /// Ray through the center of pixel `(x, y)`, `(0, 0)` top-left.
    pub fn ray(&self, x: usize, y: usize) -> Ray {
        let (f, r, u) = self.basis();
        let half = (self.fov.to_radians() / 2.0).tan();
        let aspect = self.width as f64 / self.height as f64;
        let px = ((x as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * half * aspect;
        let py = (1.0 - (y as f64 + 0.5) / self.height as f64 * 2.0) * half;
        let dir = normalize([0, 1, 2].map(|a| f[a] + px * r[a] + py * u[a]));
        let (t_enter, t_exit, hit) = match intersect_box(self.eye, dir) {
            Some((a, b)) => (a, b, true),
            None => (0.0, 0.0, false),
        };
        Ray {
            origin: self.eye,
            dir,
            t_enter,
            t_exit,
            hit,
        }
    }
}

/// One ray per pixel, row-major from the top-left.
pub fn generate_rays(camera: &Camera) -> Result<Vec<Ray>> {
    camera.validate()?;
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            rays.push(camera.ray(x, y));
        }
    }
    Ok(rays)
}
