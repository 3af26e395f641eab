//! Scene description: analytic primitives, a line-oriented text format, a
//! procedural indoor-scene generator and ray-primitive intersection.
//!
//! All coordinates are meters; y is up. The camera carries no orientation —
//! rays are generated straight from equirectangular pixel directions.

use crate::error::{Error, Result};
use crate::geometry::Direction;
use crate::rng::SplitMix64;

pub type Point3 = [f64; 3];
pub type Rgb = [f64; 3];

/// Self-intersection guard for meter-scale scenes.
pub const T_MIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Inward-facing axis-aligned box shell; rays hit it from inside.
    Room { min: Point3, max: Point3, albedo: Rgb },
    /// Outward-facing axis-aligned box.
    Box { min: Point3, max: Point3, albedo: Rgb },
    Sphere { center: Point3, radius: f64, albedo: Rgb },
    Triangle { a: Point3, b: Point3, c: Point3, albedo: Rgb },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub camera: Point3,
    pub clear_color: Rgb,
    pub max_depth: f64,
    pub primitives: Vec<Primitive>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Point3,
    pub albedo: Rgb,
    pub primitive: usize,
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn fmt_triple(p: &Point3) -> String {
    format!("{} {} {}", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(p[2]))
}

impl Scene {
    /// Checks every scene invariant; parse and generation both go through
    /// this before returning a scene.
    pub fn validate(&self) -> Result<()> {
        if !(self.max_depth > 0.0) {
            return Err(Error::config(format!(
                "maxdepth must be > 0, got {}",
                self.max_depth
            )));
        }
        for (i, c) in self.clear_color.iter().enumerate() {
            if !(0.0..=1.0).contains(c) {
                return Err(Error::config(format!(
                    "clear color component {i} = {c} outside [0, 1]"
                )));
            }
        }
        for (idx, prim) in self.primitives.iter().enumerate() {
            let albedo = match prim {
                Primitive::Room { albedo, .. }
                | Primitive::Box { albedo, .. }
                | Primitive::Sphere { albedo, .. }
                | Primitive::Triangle { albedo, .. } => albedo,
            };
            if albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::config(format!(
                    "primitive {idx}: albedo outside [0, 1]"
                )));
            }
            match prim {
                Primitive::Room { min, max, .. } | Primitive::Box { min, max, .. } => {
                    for ax in 0..3 {
                        if !(min[ax] < max[ax]) {
                            return Err(Error::config(format!(
                                "primitive {idx}: min must be < max per axis, got {} >= {}",
                                min[ax], max[ax]
                            )));
                        }
                    }
                    if let Primitive::Room { min, max, .. } = prim {
                        for ax in 0..3 {
                            if !(min[ax] < self.camera[ax] && self.camera[ax] < max[ax]) {
                                return Err(Error::config(format!(
                                    "camera must be strictly inside room shell (axis {ax})"
                                )));
                            }
                        }
                    }
                }
                Primitive::Sphere { radius, .. } => {
                    if !(*radius > 0.0) {
                        return Err(Error::config(format!(
                            "primitive {idx}: sphere radius must be > 0, got {radius}"
                        )));
                    }
                }
                Primitive::Triangle { a, b, c, .. } => {
                    let e1 = sub(b, a);
                    let e2 = sub(c, a);
                    let n = cross(&e1, &e2);
                    if norm(&n) < 1e-12 {
                        return Err(Error::config(format!(
                            "primitive {idx}: triangle vertices are collinear"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical text serialization (parseable by [`parse_scene`]).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("camera {}\n", fmt_triple(&self.camera)));
        out.push_str(&format!("clear {}\n", fmt_triple(&self.clear_color)));
        out.push_str(&format!("maxdepth {}\n", fmt_f64(self.max_depth)));
        for prim in &self.primitives {
            match prim {
                Primitive::Room { min, max, albedo } => out.push_str(&format!(
                    "room {} {} albedo {}\n",
                    fmt_triple(min),
                    fmt_triple(max),
                    fmt_triple(albedo)
                )),
                Primitive::Box { min, max, albedo } => out.push_str(&format!(
                    "box {} {} albedo {}\n",
                    fmt_triple(min),
                    fmt_triple(max),
                    fmt_triple(albedo)
                )),
                Primitive::Sphere {
                    center,
                    radius,
                    albedo,
                } => out.push_str(&format!(
                    "sphere {} {} albedo {}\n",
                    fmt_triple(center),
                    fmt_f64(*radius),
                    fmt_triple(albedo)
                )),
                Primitive::Triangle { a, b, c, albedo } => out.push_str(&format!(
                    "tri {} {} {} albedo {}\n",
                    fmt_triple(a),
                    fmt_triple(b),
                    fmt_triple(c),
                    fmt_triple(albedo)
                )),
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

#[inline]
fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn cross(a: &Point3, b: &Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn norm(a: &Point3) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct LineArgs<'a> {
    line: usize,
    tokens: Vec<&'a str>,
    next: usize,
}

impl<'a> LineArgs<'a> {
    fn f64(&mut self) -> Result<f64> {
        let tok = self.tokens.get(self.next).ok_or_else(|| Error::Parse {
            line: self.line,
            msg: "missing numeric argument".to_string(),
        })?;
        self.next += 1;
        tok.parse().map_err(|_| Error::Parse {
            line: self.line,
            msg: format!("invalid number '{tok}'"),
        })
    }

    fn triple(&mut self) -> Result<Point3> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }

    fn keyword(&mut self, word: &str) -> Result<()> {
        match self.tokens.get(self.next) {
            Some(&tok) if tok == word => {
                self.next += 1;
                Ok(())
            }
            other => Err(Error::Parse {
                line: self.line,
                msg: format!("expected keyword '{word}', found '{}'", other.unwrap_or(&"")),
            }),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.next != self.tokens.len() {
            return Err(Error::Parse {
                line: self.line,
                msg: format!("unexpected trailing tokens: {:?}", &self.tokens[self.next..]),
            });
        }
        Ok(())
    }
}

/// Parses the line-oriented scene format. `#` starts a comment; directives:
/// camera, clear, maxdepth, room, box, sphere, tri.
pub fn parse_scene(text: &str) -> Result<Scene> {
    let mut camera = None;
    let mut clear_color = [0.0, 0.0, 0.0];
    let mut max_depth = 1000.0;
    let mut primitives = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let mut args = LineArgs {
            line: line_no,
            tokens: tokens[1..].to_vec(),
            next: 0,
        };
        match tokens[0] {
            "camera" => {
                camera = Some(args.triple()?);
                args.finish()?;
            }
            "clear" => {
                clear_color = args.triple()?;
                args.finish()?;
            }
            "maxdepth" => {
                max_depth = args.f64()?;
                args.finish()?;
            }
            "room" | "box" => {
                let min = args.triple()?;
                let max = args.triple()?;
                args.keyword("albedo")?;
                let albedo = args.triple()?;
                args.finish()?;
                primitives.push(if tokens[0] == "room" {
                    Primitive::Room { min, max, albedo }
                } else {
                    Primitive::Box { min, max, albedo }
                });
            }
            "sphere" => {
                let center = args.triple()?;
                let radius = args.f64()?;
                args.keyword("albedo")?;
                let albedo = args.triple()?;
                args.finish()?;
                primitives.push(Primitive::Sphere {
                    center,
                    radius,
                    albedo,
                });
            }
            "tri" => {
                let a = args.triple()?;
                let b = args.triple()?;
                let c = args.triple()?;
                args.keyword("albedo")?;
                let albedo = args.triple()?;
                args.finish()?;
                primitives.push(Primitive::Triangle { a, b, c, albedo });
            }
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown directive '{other}'"),
                })
            }
        }
    }

    let camera = camera.ok_or_else(|| Error::Parse {
        line: text.lines().count().max(1),
        msg: "missing required 'camera' directive".to_string(),
    })?;
    let scene = Scene {
        camera,
        clear_color,
        max_depth,
        primitives,
    };
    scene.validate()?;
    Ok(scene)
}

// ---------------------------------------------------------------------------
// Procedural generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenParams {
    /// Per-axis room half-extent sample range, meters.
    pub half_extent: (f64, f64),
    /// Inclusive range of furniture objects.
    pub objects: (usize, usize),
    /// Object diameter sample range, meters.
    pub object_size: (f64, f64),
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            half_extent: (1.5, 3.0),
            objects: (3, 8),
            object_size: (0.3, 0.9),
        }
    }
}

/// Clearance kept between the camera and any furniture.
const CAMERA_CLEARANCE: f64 = 0.3;
/// Clearance kept between furniture and the room walls.
const WALL_CLEARANCE: f64 = 0.05;

fn point_box_distance(p: &Point3, min: &Point3, max: &Point3) -> f64 {
    let mut d2 = 0.0;
    for ax in 0..3 {
        let d = (min[ax] - p[ax]).max(0.0).max(p[ax] - max[ax]);
        d2 += d * d;
    }
    d2.sqrt()
}

/// Deterministically generates a furnished room scene. The camera sits at
/// the room center and no object overlaps it, so every ray hits geometry.
pub fn generate_room(seed: u64, params: &GenParams) -> Result<Scene> {
    let (he_lo, he_hi) = params.half_extent;
    let (os_lo, os_hi) = params.object_size;
    if !(he_lo > 0.0 && he_lo <= he_hi) {
        return Err(Error::config(format!(
            "infeasible half_extent range ({he_lo}, {he_hi})"
        )));
    }
    if params.objects.0 > params.objects.1 {
        return Err(Error::config(format!(
            "infeasible object count range {:?}",
            params.objects
        )));
    }
    if !(os_lo > 0.0 && os_lo <= os_hi) {
        return Err(Error::config(format!(
            "infeasible object_size range ({os_lo}, {os_hi})"
        )));
    }
    if os_lo / 2.0 + CAMERA_CLEARANCE + WALL_CLEARANCE >= he_lo {
        return Err(Error::config(
            "infeasible params: smallest object cannot fit between camera and walls".to_string(),
        ));
    }

    let mut rng = SplitMix64::new(seed);
    let half = [
        rng.range(he_lo, he_hi),
        rng.range(he_lo, he_hi),
        rng.range(he_lo, he_hi),
    ];
    let wall_albedo = [
        rng.range(0.5, 0.9),
        rng.range(0.5, 0.9),
        rng.range(0.5, 0.9),
    ];
    let mut primitives = vec![Primitive::Room {
        min: [-half[0], -half[1], -half[2]],
        max: [half[0], half[1], half[2]],
        albedo: wall_albedo,
    }];

    let n_objects = rng.range_usize(params.objects.0, params.objects.1);
    for _ in 0..n_objects {
        for _attempt in 0..64 {
            let is_box = rng.next_u64() % 2 == 0;
            let size = rng.range(os_lo, os_hi);
            let albedo = [
                rng.range(0.15, 0.95),
                rng.range(0.15, 0.95),
                rng.range(0.15, 0.95),
            ];
            if is_box {
                let hd = [
                    size / 2.0 * rng.range(0.5, 1.0),
                    size / 2.0 * rng.range(0.5, 1.0),
                    size / 2.0 * rng.range(0.5, 1.0),
                ];
                let mut center = [0.0; 3];
                let mut fit = true;
                for ax in 0..3 {
                    let room = half[ax] - hd[ax] - WALL_CLEARANCE;
                    if room <= 0.0 {
                        fit = false;
                    }
                    center[ax] = rng.range(-1.0, 1.0) * room.max(0.0);
                }
                if !fit {
                    continue;
                }
                let min = [center[0] - hd[0], center[1] - hd[1], center[2] - hd[2]];
                let max = [center[0] + hd[0], center[1] + hd[1], center[2] + hd[2]];
                if point_box_distance(&[0.0, 0.0, 0.0], &min, &max) <= CAMERA_CLEARANCE {
                    continue;
                }
                primitives.push(Primitive::Box { min, max, albedo });
            } else {
                let radius = size / 2.0;
                let mut center = [0.0; 3];
                let mut fit = true;
                for ax in 0..3 {
                    let room = half[ax] - radius - WALL_CLEARANCE;
                    if room <= 0.0 {
                        fit = false;
                    }
                    center[ax] = rng.range(-1.0, 1.0) * room.max(0.0);
                }
                if !fit || norm(&center) - radius <= CAMERA_CLEARANCE {
                    continue;
                }
                primitives.push(Primitive::Sphere {
                    center,
                    radius,
                    albedo,
                });
            }
            break;
        }
    }

    let scene = Scene {
        camera: [0.0, 0.0, 0.0],
        clear_color: [0.0, 0.0, 0.0],
        max_depth: 100.0,
        primitives,
    };
    scene.validate()?;
    Ok(scene)
}

// ---------------------------------------------------------------------------
// Intersection
// ---------------------------------------------------------------------------

/// Slab intersection; returns (t_enter, t_exit, enter_axis, exit_axis) or
/// None. Axis handling is symmetric so that 90° scene rotations permute the
/// arithmetic bit-exactly.
fn box_slabs(
    origin: &Point3,
    dir: &Direction,
    min: &Point3,
    max: &Point3,
) -> Option<(f64, f64, usize, usize)> {
    let d = [dir.x, dir.y, dir.z];
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut enter_axis = 0;
    let mut exit_axis = 0;
    for ax in 0..3 {
        if d[ax] == 0.0 {
            if origin[ax] < min[ax] || origin[ax] > max[ax] {
                return None;
            }
            continue;
        }
        let t1 = (min[ax] - origin[ax]) / d[ax];
        let t2 = (max[ax] - origin[ax]) / d[ax];
        let (near, far) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        if near > t_enter {
            t_enter = near;
            enter_axis = ax;
        }
        if far < t_exit {
            t_exit = far;
            exit_axis = ax;
        }
    }
    if t_enter > t_exit {
        return None;
    }
    Some((t_enter, t_exit, enter_axis, exit_axis))
}

fn axis_normal(axis: usize, positive: bool) -> Point3 {
    let mut n = [0.0; 3];
    n[axis] = if positive { 1.0 } else { -1.0 };
    n
}

fn hit_primitive(origin: &Point3, dir: &Direction, prim: &Primitive) -> Option<(f64, Point3)> {
    let d = [dir.x, dir.y, dir.z];
    match prim {
        Primitive::Room { min, max, .. } => {
            // Shell seen from inside: take the exit intersection with an
            // inward-facing normal.
            let (_, t_exit, _, exit_axis) = box_slabs(origin, dir, min, max)?;
            if t_exit <= T_MIN {
                return None;
            }
            // Inward normal opposes the travel direction on the exit axis.
            Some((t_exit, axis_normal(exit_axis, d[exit_axis] < 0.0)))
        }
        Primitive::Box { min, max, .. } => {
            let (t_enter, t_exit, enter_axis, exit_axis) = box_slabs(origin, dir, min, max)?;
            if t_enter > T_MIN {
                Some((t_enter, axis_normal(enter_axis, d[enter_axis] < 0.0)))
            } else if t_exit > T_MIN {
                Some((t_exit, axis_normal(exit_axis, d[exit_axis] < 0.0)))
            } else {
                None
            }
        }
        Primitive::Sphere { center, radius, .. } => {
            // Unit direction assumed; the quadratic coefficient is 1.
            let oc = sub(origin, center);
            let b = dot(&oc, &d);
            let c = dot(&oc, &oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let mut t = -b - sq;
            if t <= T_MIN {
                t = -b + sq;
            }
            if t <= T_MIN {
                return None;
            }
            let p = [
                origin[0] + t * d[0],
                origin[1] + t * d[1],
                origin[2] + t * d[2],
            ];
            let n = sub(&p, center);
            let inv = 1.0 / radius;
            Some((t, [n[0] * inv, n[1] * inv, n[2] * inv]))
        }
        Primitive::Triangle { a, b, c, .. } => {
            // Moller-Trumbore.
            let e1 = sub(b, a);
            let e2 = sub(c, a);
            let pvec = cross(&d, &e2);
            let det = dot(&e1, &pvec);
            if det.abs() < 1e-12 {
                return None;
            }
            let inv_det = 1.0 / det;
            let tvec = sub(origin, a);
            let u = dot(&tvec, &pvec) * inv_det;
            if !(0.0..=1.0).contains(&u) {
                return None;
            }
            let qvec = cross(&tvec, &e1);
            let v = dot(&d, &qvec) * inv_det;
            if v < 0.0 || u + v > 1.0 {
                return None;
            }
            let t = dot(&e2, &qvec) * inv_det;
            if t <= T_MIN {
                return None;
            }
            let n = cross(&e1, &e2);
            let inv = 1.0 / norm(&n);
            Some((t, [n[0] * inv, n[1] * inv, n[2] * inv]))
        }
    }
}

/// Nearest hit along the ray in (T_MIN, max_depth], or None. Ties go to the
/// lowest primitive index.
pub fn intersect(origin: &Point3, dir: &Direction, scene: &Scene) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (idx, prim) in scene.primitives.iter().enumerate() {
        if let Some((t, normal)) = hit_primitive(origin, dir, prim) {
            if t > scene.max_depth {
                continue;
            }
            if best.as_ref().map_or(true, |h| t < h.t) {
                let albedo = match prim {
                    Primitive::Room { albedo, .. }
                    | Primitive::Box { albedo, .. }
                    | Primitive::Sphere { albedo, .. }
                    | Primitive::Triangle { albedo, .. } => *albedo,
                };
                best = Some(Hit {
                    t,
                    normal,
                    albedo,
                    primitive: idx,
                });
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Quarter-turn rotation (for yaw augmentation consistency checks)
// ---------------------------------------------------------------------------

/// One +90° yaw about the world y axis: (x, y, z) → (z, y, −x).
/// Exact in floating point (only swaps and negations).
fn rotate_point(p: &Point3) -> Point3 {
    [p[2], p[1], -p[0]]
}

fn rotate_box_corners(min: &Point3, max: &Point3) -> (Point3, Point3) {
    let a = rotate_point(min);
    let b = rotate_point(max);
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for ax in 0..3 {
        lo[ax] = a[ax].min(b[ax]);
        hi[ax] = a[ax].max(b[ax]);
    }
    (lo, hi)
}

/// Rotates the whole scene (camera included) by k yaw quarter-turns.
/// Rendering the rotated scene equals yaw-rotating the render, bit-exactly
/// for axis-aligned primitives.
pub fn rotate_scene_quarter(scene: &Scene, k: u8) -> Scene {
    let mut out = scene.clone();
    for _ in 0..(k % 4) {
        out.camera = rotate_point(&out.camera);
        for prim in &mut out.primitives {
            match prim {
                Primitive::Room { min, max, .. } | Primitive::Box { min, max, .. } => {
                    let (lo, hi) = rotate_box_corners(min, max);
                    *min = lo;
                    *max = hi;
                }
                Primitive::Sphere { center, .. } => *center = rotate_point(center),
                Primitive::Triangle { a, b, c, .. } => {
                    *a = rotate_point(a);
                    *b = rotate_point(b);
                    *c = rotate_point(c);
                }
            }
        }
    }
    out
}
