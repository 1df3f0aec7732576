//! CPU raycaster for the binocular observation and object silhouettes.
//!
//! Geometry is evaluated relative to the camera midpoint, so translating the
//! whole scene and camera together by a representable offset leaves every
//! pixel bit-identical.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

pub type Rgb = [f32; 3];

/// Horizontal forward direction for a yaw angle. Yaw grows clockwise when
/// seen from above: yaw 0 faces +z, yaw π/2 faces +x.
pub fn forward(yaw: f64) -> Vec3 {
    Vec3::new(yaw.sin(), 0.0, yaw.cos())
}

pub fn right(yaw: f64) -> Vec3 {
    Vec3::new(yaw.cos(), 0.0, -yaw.sin())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Pyramid,
    Ball,
    Doll,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Pyramid, ObjectClass::Ball, ObjectClass::Doll];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Pyramid => "pyramid",
            ObjectClass::Ball => "ball",
            ObjectClass::Doll => "doll",
        }
    }
}

/// Sizes of the three prop shapes, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectGeometry {
    pub ball_radius: f64,
    pub pyramid_base: f64,
    pub pyramid_height: f64,
    pub doll_body_radius: f64,
    pub doll_head_radius: f64,
}

impl Default for ObjectGeometry {
    fn default() -> Self {
        ObjectGeometry {
            ball_radius: 0.25,
            pyramid_base: 0.5,
            pyramid_height: 0.6,
            doll_body_radius: 0.22,
            doll_head_radius: 0.14,
        }
    }
}

impl ObjectGeometry {
    /// Height of the object's reference center above the floor.
    pub fn center_height(&self, class: ObjectClass) -> f64 {
        match class {
            ObjectClass::Ball => self.ball_radius,
            ObjectClass::Pyramid => self.pyramid_height / 2.0,
            ObjectClass::Doll => self.doll_body_radius + self.doll_head_radius,
        }
    }

    /// Radius of a sphere around the reference center enclosing the shape.
    pub fn bounding_radius(&self, class: ObjectClass) -> f64 {
        match class {
            ObjectClass::Ball => self.ball_radius,
            ObjectClass::Pyramid => {
                let half = self.pyramid_height / 2.0;
                (half * half + (self.pyramid_base / 2.0).powi(2)).sqrt()
            }
            // union of both spheres around the midpoint of the stack
            ObjectClass::Doll => self.doll_body_radius + self.doll_head_radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropObject {
    pub id: u32,
    pub class: ObjectClass,
    /// Reference center of the shape (see [`ObjectGeometry::center_height`]).
    pub position: Vec3,
    pub yaw: f64,
    pub albedo: Rgb,
}

impl PropObject {
    /// Places an object resting on the floor at `(x, z)`.
    pub fn on_floor(id: u32, class: ObjectClass, x: f64, z: f64, yaw: f64, geometry: &ObjectGeometry) -> Self {
        PropObject {
            id,
            class,
            position: Vec3::new(x, geometry.center_height(class), z),
            yaw,
            albedo: default_albedo(class),
        }
    }
}

pub fn default_albedo(class: ObjectClass) -> Rgb {
    match class {
        ObjectClass::Pyramid => [0.9, 0.15, 0.1],
        ObjectClass::Ball => [0.1, 0.25, 0.95],
        ObjectClass::Doll => [0.95, 0.85, 0.1],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<PropObject>,
    pub floor_color: Rgb,
    pub sky_color: Rgb,
    /// Unit vector pointing toward the light.
    pub light: Vec3,
    pub geometry: ObjectGeometry,
}

impl Scene {
    pub fn empty(style: &SceneStyle) -> Self {
        Scene {
            objects: Vec::new(),
            floor_color: style.floor_color,
            sky_color: style.sky_color,
            light: Vec3::new(style.light[0], style.light[1], style.light[2]).normalized(),
            geometry: style.geometry,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate object id in scene".into()));
        }
        if (self.light.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("scene light must be a unit vector".into()));
        }
        Ok(())
    }

    pub fn object(&self, id: u32) -> Option<&PropObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Shifts every object by `offset`.
    pub fn translated(&self, offset: Vec3) -> Scene {
        let mut s = self.clone();
        for o in &mut s.objects {
            o.position = o.position + offset;
        }
        s
    }
}

/// Appearance and camera settings shared by every rendered frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneStyle {
    pub resolution: usize,
    pub fov_deg: f64,
    pub eye_height: f64,
    pub baseline: f64,
    pub ambient: f32,
    pub floor_color: Rgb,
    pub sky_color: Rgb,
    /// Direction toward the light; normalized when a scene is built.
    pub light: [f64; 3],
    pub geometry: ObjectGeometry,
}

impl Default for SceneStyle {
    fn default() -> Self {
        SceneStyle {
            resolution: 84,
            fov_deg: 90.0,
            eye_height: 0.45,
            baseline: 0.06,
            ambient: 0.15,
            floor_color: [0.45, 0.42, 0.38],
            sky_color: [0.65, 0.8, 0.95],
            light: [0.4, 1.0, -0.3],
            geometry: ObjectGeometry::default(),
        }
    }
}

impl SceneStyle {
    pub fn camera(&self, x: f64, z: f64, yaw: f64) -> StereoCamera {
        StereoCamera {
            position: Vec3::new(x, self.eye_height, z),
            yaw,
            baseline: self.baseline,
            fov_deg: self.fov_deg,
            resolution: self.resolution,
            ambient: self.ambient,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoCamera {
    /// Midpoint between the eyes; `y` is the eye height.
    pub position: Vec3,
    pub yaw: f64,
    pub baseline: f64,
    pub fov_deg: f64,
    /// Width and height in pixels.
    pub resolution: usize,
    pub ambient: f32,
}

impl StereoCamera {
    pub fn focal_px(&self) -> f64 {
        self.resolution as f64 / 2.0 / (self.fov_deg.to_radians() / 2.0).tan()
    }

    /// Eye offset from the midpoint.
    fn eye_offset(&self, eye: Eye) -> Vec3 {
        let half = right(self.yaw) * (self.baseline / 2.0);
        match eye {
            Eye::Left => Vec3::default() - half,
            Eye::Right => half,
        }
    }

    pub fn eye_position(&self, eye: Eye) -> Vec3 {
        self.position + self.eye_offset(eye)
    }

    pub fn translated(&self, offset: Vec3) -> StereoCamera {
        let mut c = self.clone();
        c.position = c.position + offset;
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Eye {
    Left,
    Right,
}

/// Binocular frame: `[6, H, W]`, channels 0–2 left RGB, 3–5 right RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub pixels: Tensor,
}

impl Observation {
    pub fn resolution(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Channel-planar RGB of one eye.
    pub fn eye(&self, eye: Eye) -> &[f32] {
        let plane = self.resolution() * self.resolution();
        let data = self.pixels.data();
        match eye {
            Eye::Left => &data[..3 * plane],
            Eye::Right => &data[3 * plane..],
        }
    }
}

/// Boolean per-pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Mean column of set pixels, in pixel-center coordinates.
    pub fn centroid_col(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, b) in self.bits.iter().enumerate() {
            if *b {
                sum += (i % self.width) as f64 + 0.5;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Normalized axis-aligned box in center-size form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox {
            cx: a[0],
            cy: a[1],
            w: a[2],
            h: a[3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Hit {
    Sky,
    Floor,
    Object { index: usize, normal: Vec3 },
}

/// Object geometry expressed relative to the ray origin.
struct Prim {
    index: usize,
    center: Vec3,
    bound_r2: f64,
    shape: Shape,
}

enum Shape {
    Sphere { r: f64 },
    Spheres { a: Vec3, ra: f64, b: Vec3, rb: f64 },
    Cone { apex: Vec3, height: f64, radius: f64 },
}

const EPS: f64 = 1e-9;

fn ray_sphere(dir: Vec3, center: Vec3, r: f64) -> Option<f64> {
    // origin at 0, |dir| = 1
    let b = dir.dot(center);
    let c = center.dot(center) - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t0 = b - s;
    if t0 > EPS {
        return Some(t0);
    }
    let t1 = b + s;
    (t1 > EPS).then_some(t1)
}

fn ray_cone(dir: Vec3, apex: Vec3, height: f64, radius: f64) -> Option<(f64, Vec3)> {
    // Upright cone: apex on top, axis pointing down (0, -1, 0).
    let cos2 = height * height / (height * height + radius * radius);
    let co = Vec3::default() - apex;
    let dv = -dir.y;
    let cov = -co.y;
    let a = dv * dv - cos2;
    let b = 2.0 * (dv * cov - dir.dot(co) * cos2);
    let c = cov * cov - co.dot(co) * cos2;
    let mut roots = [f64::INFINITY; 2];
    if a.abs() < 1e-12 {
        if b.abs() > 1e-12 {
            roots[0] = -c / b;
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        let (r0, r1) = ((-b - s) / (2.0 * a), (-b + s) / (2.0 * a));
        roots = if r0 < r1 { [r0, r1] } else { [r1, r0] };
    }
    for t in roots {
        if !(t > EPS && t.is_finite()) {
            continue;
        }
        let p = dir * t;
        let depth = apex.y - p.y; // distance below the apex along the axis
        if (0.0..=height).contains(&depth) {
            let radial = Vec3::new(p.x - apex.x, 0.0, p.z - apex.z);
            let rn = radial.norm();
            let n = if rn > 0.0 {
                (radial * (height / rn) + Vec3::new(0.0, radius, 0.0)).normalized()
            } else {
                Vec3::new(0.0, 1.0, 0.0)
            };
            return Some((t, n));
        }
    }
    None
}

fn build_prims(scene: &Scene, origin_rel_mid: Vec3, mid: Vec3) -> Vec<Prim> {
    let g = &scene.geometry;
    scene
        .objects
        .iter()
        .enumerate()
        .map(|(index, o)| {
            // (center − mid) first: exact under joint translation for
            // representable offsets; then move to the eye.
            let center = (o.position - mid) - origin_rel_mid;
            let br = g.bounding_radius(o.class);
            let shape = match o.class {
                ObjectClass::Ball => Shape::Sphere { r: g.ball_radius },
                ObjectClass::Doll => {
                    let base = center.y - g.center_height(ObjectClass::Doll);
                    Shape::Spheres {
                        a: Vec3::new(center.x, base + g.doll_body_radius, center.z),
                        ra: g.doll_body_radius,
                        b: Vec3::new(
                            center.x,
                            base + 2.0 * g.doll_body_radius + g.doll_head_radius,
                            center.z,
                        ),
                        rb: g.doll_head_radius,
                    }
                }
                ObjectClass::Pyramid => Shape::Cone {
                    apex: Vec3::new(center.x, center.y + g.pyramid_height / 2.0, center.z),
                    height: g.pyramid_height,
                    radius: g.pyramid_base / 2.0,
                },
            };
            Prim {
                index,
                center,
                bound_r2: br * br,
                shape,
            }
        })
        .collect()
}

fn trace(prims: &[Prim], dir: Vec3, eye_height: f64) -> Hit {
    let mut best_t = f64::INFINITY;
    let mut hit = Hit::Sky;
    if dir.y < 0.0 {
        best_t = eye_height / -dir.y;
        hit = Hit::Floor;
    }
    for p in prims {
        // bounding-sphere rejection
        let b = dir.dot(p.center);
        let c = p.center.dot(p.center) - p.bound_r2;
        if b * b - c < 0.0 || (b < 0.0 && c > 0.0) {
            continue;
        }
        let candidate = match &p.shape {
            Shape::Sphere { r } => ray_sphere(dir, p.center, *r).map(|t| (t, (dir * t - p.center) * (1.0 / r))),
            Shape::Spheres { a, ra, b, rb } => {
                let ha = ray_sphere(dir, *a, *ra).map(|t| (t, (dir * t - *a) * (1.0 / ra)));
                let hb = ray_sphere(dir, *b, *rb).map(|t| (t, (dir * t - *b) * (1.0 / rb)));
                match (ha, hb) {
                    (Some(x), Some(y)) => Some(if y.0 < x.0 { y } else { x }),
                    (x, y) => x.or(y),
                }
            }
            Shape::Cone { apex, height, radius } => ray_cone(dir, *apex, *height, *radius),
        };
        if let Some((t, n)) = candidate {
            if t < best_t {
                best_t = t;
                hit = Hit::Object {
                    index: p.index,
                    normal: n,
                };
            }
        }
    }
    hit
}

/// Traces every pixel of one eye, calling `f(pixel_index, hit)`.
fn trace_eye(scene: &Scene, camera: &StereoCamera, eye: Eye, mut f: impl FnMut(usize, Hit)) {
    let res = camera.resolution;
    let offset = camera.eye_offset(eye);
    let prims = build_prims(scene, offset, camera.position);
    let eye_height = camera.position.y + offset.y;
    let fwd = forward(camera.yaw);
    let rgt = right(camera.yaw);
    let up = Vec3::new(0.0, 1.0, 0.0);
    let half = (camera.fov_deg.to_radians() / 2.0).tan();
    for row in 0..res {
        let v = (1.0 - (row as f64 + 0.5) * 2.0 / res as f64) * half;
        for col in 0..res {
            let u = ((col as f64 + 0.5) * 2.0 / res as f64 - 1.0) * half;
            let dir = (fwd + rgt * u + up * v).normalized();
            f(row * res + col, trace(&prims, dir, eye_height));
        }
    }
}

/// Renders the binocular observation.
pub fn render(scene: &Scene, camera: &StereoCamera) -> Observation {
    let res = camera.resolution;
    let plane = res * res;
    let mut data = vec![0.0f32; 6 * plane];
    for (e, eye) in [Eye::Left, Eye::Right].into_iter().enumerate() {
        let base = e * 3 * plane;
        trace_eye(scene, camera, eye, |p, hit| {
            let rgb = match hit {
                Hit::Sky => scene.sky_color,
                Hit::Floor => scene.floor_color,
                Hit::Object { index, normal } => {
                    let o = &scene.objects[index];
                    let shade = (scene.light.dot(normal) as f32).max(camera.ambient);
                    [o.albedo[0] * shade, o.albedo[1] * shade, o.albedo[2] * shade]
                }
            };
            for (c, v) in rgb.iter().enumerate() {
                data[base + c * plane + p] = v.clamp(0.0, 1.0);
            }
        });
    }
    Observation {
        pixels: Tensor::new([6, res, res], data).expect("render buffer sized from resolution"),
    }
}

/// Pixels whose nearest hit is object `object_id`.
pub fn silhouette_mask(scene: &Scene, camera: &StereoCamera, object_id: u32, eye: Eye) -> Result<Mask> {
    let target = scene
        .objects
        .iter()
        .position(|o| o.id == object_id)
        .ok_or(Error::UnknownObject(object_id))?;
    let res = camera.resolution;
    let mut bits = vec![false; res * res];
    trace_eye(scene, camera, eye, |p, hit| {
        if let Hit::Object { index, .. } = hit {
            bits[p] = index == target;
        }
    });
    Ok(Mask {
        width: res,
        height: res,
        bits,
    })
}

/// Per-pixel classification into sky / floor / object for one eye.
pub fn background_mask(scene: &Scene, camera: &StereoCamera, eye: Eye) -> Mask {
    let res = camera.resolution;
    let mut bits = vec![false; res * res];
    trace_eye(scene, camera, eye, |p, hit| {
        bits[p] = !matches!(hit, Hit::Object { .. });
    });
    Mask {
        width: res,
        height: res,
        bits,
    }
}

/// Tight normalized box around the set pixels, or `None` for an empty mask.
pub fn mask_to_bbox(mask: &Mask) -> Option<BBox> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return None;
    }
    let (w, h) = (mask.width as f64, mask.height as f64);
    Some(BBox {
        cx: (c0 + c1 + 1) as f64 / 2.0 / w,
        cy: (r0 + r1 + 1) as f64 / 2.0 / h,
        w: (c1 - c0 + 1) as f64 / w,
        h: (r1 - r0 + 1) as f64 / h,
    })
}
