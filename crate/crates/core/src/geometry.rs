//! Mappings between equirectangular pixels, spherical coordinates and 3D
//! unit directions, plus 90° yaw rotation and cubemap projection.
//!
//! Conventions:
//! * y is up (the latitude axis), longitude φ = 0 looks along +z.
//! * Pixel centers: φ = 2π(u+0.5)/W − π, θ = π/2 − π(v+0.5)/H, so poles are
//!   never sampled exactly.
//! * Directions are d = (cosθ·sinφ, sinθ, cosθ·cosφ).

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::raster::{DepthMap, EquirectImage, ValidityMask};

/// Dimensions of an equirectangular raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SphereDims {
    pub width: usize,
    pub height: usize,
}

impl SphereDims {
    /// Validates width = 2×height and width divisible by 4 (a 90° yaw must
    /// be an exact column shift).
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(Error::config(format!(
                "equirect dims must satisfy width = 2 x height, got {width}x{height}"
            )));
        }
        if width % 4 != 0 {
            return Err(Error::config(format!(
                "equirect width must be divisible by 4, got {width}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Unit direction in 3D.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Direction {
    /// Normalizes the given vector; errors on (near-)zero input.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if n < 1e-12 {
            return Err(Error::config("cannot normalize zero vector".to_string()));
        }
        Ok(Self {
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    /// For components already known to be unit length.
    #[inline]
    pub(crate) fn from_unit(x: f64, y: f64, z: f64) -> Self {
        debug_assert!(((x * x + y * y + z * z).sqrt() - 1.0).abs() < 1e-6);
        Self { x, y, z }
    }

    #[inline]
    pub fn dot(&self, other: &Direction) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Longitude in [−π, π), latitude in [−π/2, π/2].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    pub longitude: f64,
    pub latitude: f64,
}

impl SphericalCoord {
    pub fn from_direction(d: &Direction) -> Self {
        let mut longitude = d.x.atan2(d.z);
        if longitude >= PI {
            longitude = -PI;
        }
        let latitude = d.y.clamp(-1.0, 1.0).asin();
        Self {
            longitude,
            latitude,
        }
    }

    pub fn to_direction(&self) -> Direction {
        let (s_lat, c_lat) = self.latitude.sin_cos();
        let (s_lon, c_lon) = self.longitude.sin_cos();
        Direction::from_unit(c_lat * s_lon, s_lat, c_lat * c_lon)
    }
}

/// (sin φ, cos φ) for φ = 2π(u+0.5)/W − π, evaluated so that stepping u by
/// W/4 applies an exact quarter turn (s, c) → (c, −s). This is what makes
/// rendering commute bit-exactly with 90° yaw shifts.
#[inline]
fn longitude_sincos(u: usize, width: usize) -> (f64, f64) {
    debug_assert!(width % 4 == 0);
    let quarter = width / 4;
    let q = u / quarter;
    let r = u % quarter;
    let alpha = TAU * (r as f64 + 0.5) / width as f64;
    // φ = α − π + q·π/2; start from (sin, cos)(α − π) and rotate q quarters.
    let (s0, c0) = alpha.sin_cos();
    let (mut s, mut c) = (-s0, -c0);
    for _ in 0..q {
        let t = s;
        s = c;
        c = -t;
    }
    (s, c)
}

#[inline]
fn latitude_sincos(v: usize, height: usize) -> (f64, f64) {
    // θ = π/2 − t with t = π(v+0.5)/H, so sinθ = cos t, cosθ = sin t.
    let t = PI * (v as f64 + 0.5) / height as f64;
    let (sin_t, cos_t) = t.sin_cos();
    (cos_t, sin_t)
}

#[inline]
pub(crate) fn direction_for_pixel(u: usize, v: usize, dims: SphereDims) -> Direction {
    let (s_lon, c_lon) = longitude_sincos(u, dims.width);
    let (s_lat, c_lat) = latitude_sincos(v, dims.height);
    Direction::from_unit(c_lat * s_lon, s_lat, c_lat * c_lon)
}

/// Unit view direction through the center of pixel (u, v).
pub fn pixel_to_direction(u: usize, v: usize, dims: SphereDims) -> Result<Direction> {
    if u >= dims.width || v >= dims.height {
        return Err(Error::config(format!(
            "pixel ({u}, {v}) outside {}x{}",
            dims.width, dims.height
        )));
    }
    Ok(direction_for_pixel(u, v, dims))
}

/// Continuous pixel coordinates of a direction; the pixel whose center the
/// direction passes through maps back to integer coordinates.
///
/// The latitude coordinate is returned unclamped (the north pole maps to
/// v = −0.5); callers clamp when indexing.
pub fn direction_to_pixel(d: &Direction, dims: SphereDims) -> Result<(f64, f64)> {
    if d.norm() < 1e-12 {
        return Err(Error::config("zero direction".to_string()));
    }
    let sph = SphericalCoord::from_direction(d);
    let u = (sph.longitude + PI) / TAU * dims.width as f64 - 0.5;
    let v = (PI / 2.0 - sph.latitude) / PI * dims.height as f64 - 0.5;
    Ok((u, v))
}

/// Solid-angle weight cos(θ(v)) of row v, in (0, 1].
pub fn latitude_weight(v: usize, height: usize) -> f64 {
    debug_assert!(v < height);
    (PI * (v as f64 + 0.5) / height as f64).sin()
}

fn shift_columns<T: Copy>(data: &[T], width: usize, height: usize, stride: usize, k: u8) -> Vec<T> {
    let shift = (k as usize % 4) * (width / 4);
    let mut out = vec![data[0]; data.len()];
    let row_len = width * stride;
    for row in 0..height {
        let src = &data[row * row_len..(row + 1) * row_len];
        let dst = &mut out[row * row_len..(row + 1) * row_len];
        for u in 0..width {
            let nu = (u + shift) % width;
            dst[nu * stride..nu * stride + stride]
                .copy_from_slice(&src[u * stride..u * stride + stride]);
        }
    }
    out
}

/// Bit-exact 90°·k yaw rotation realized as a circular column shift.
pub trait YawRotate {
    fn yaw_rotate(&self, k: u8) -> Self;
}

impl YawRotate for EquirectImage {
    fn yaw_rotate(&self, k: u8) -> Self {
        assert!(k < 4, "yaw quarter-turns must be in 0..4");
        EquirectImage {
            dims: self.dims,
            channels: self.channels,
            data: shift_columns(
                &self.data,
                self.dims.width,
                self.dims.height,
                self.channels,
                k,
            ),
        }
    }
}

impl YawRotate for DepthMap {
    fn yaw_rotate(&self, k: u8) -> Self {
        assert!(k < 4, "yaw quarter-turns must be in 0..4");
        DepthMap {
            dims: self.dims,
            data: shift_columns(&self.data, self.dims.width, self.dims.height, 1, k),
        }
    }
}

impl YawRotate for ValidityMask {
    fn yaw_rotate(&self, k: u8) -> Self {
        assert!(k < 4, "yaw quarter-turns must be in 0..4");
        ValidityMask {
            dims: self.dims,
            data: shift_columns(&self.data, self.dims.width, self.dims.height, 1, k),
        }
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Bilinear sample with circular wrap in longitude and clamp in latitude.
pub fn sample_equirect(img: &EquirectImage, u: f64, v: f64, out: &mut [f32]) {
    let w = img.dims.width as isize;
    let h = img.dims.height as isize;
    let fu = u.floor();
    let fv = v.floor();
    let tx = (u - fu) as f32;
    let ty = (v - fv) as f32;
    let c0 = (fu as isize).rem_euclid(w) as usize;
    let c1 = (fu as isize + 1).rem_euclid(w) as usize;
    let r0 = (fv as isize).clamp(0, h - 1) as usize;
    let r1 = (fv as isize + 1).clamp(0, h - 1) as usize;
    let p00 = img.pixel(c0, r0);
    let p10 = img.pixel(c1, r0);
    let p01 = img.pixel(c0, r1);
    let p11 = img.pixel(c1, r1);
    for ch in 0..img.channels {
        out[ch] = lerp(lerp(p00[ch], p10[ch], tx), lerp(p01[ch], p11[ch], tx), ty);
    }
}

/// Six square cube faces in fixed order (+x, −x, +y, −y, +z, −z).
#[derive(Debug, Clone, PartialEq)]
pub struct CubeFaces {
    pub size: usize,
    pub channels: usize,
    pub faces: [Vec<f32>; 6],
}

impl CubeFaces {
    pub fn new(size: usize, channels: usize) -> Self {
        let face = vec![0.0; size * size * channels];
        Self {
            size,
            channels,
            faces: [
                face.clone(),
                face.clone(),
                face.clone(),
                face.clone(),
                face.clone(),
                face,
            ],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        (j * self.size + i) * self.channels
    }
}

/// Outgoing (unnormalized) direction through face pixel center; a is the
/// in-face x axis (right), b the in-face y axis (down).
fn face_direction(face: usize, a: f64, b: f64) -> (f64, f64, f64) {
    match face {
        0 => (1.0, -b, -a),
        1 => (-1.0, -b, a),
        2 => (a, 1.0, b),
        3 => (a, -1.0, -b),
        4 => (a, -b, 1.0),
        5 => (-a, -b, -1.0),
        _ => unreachable!("face index out of range"),
    }
}

/// Inverse of [`face_direction`]: face index and in-face coordinates of a
/// direction (dominant-axis cube projection).
fn direction_to_face(d: &Direction) -> (usize, f64, f64) {
    let (ax, ay, az) = (d.x.abs(), d.y.abs(), d.z.abs());
    if ax >= ay && ax >= az {
        if d.x > 0.0 {
            (0, -d.z / ax, -d.y / ax)
        } else {
            (1, d.z / ax, -d.y / ax)
        }
    } else if ay >= az {
        if d.y > 0.0 {
            (2, d.x / ay, d.z / ay)
        } else {
            (3, d.x / ay, -d.z / ay)
        }
    } else if d.z > 0.0 {
        (4, d.x / az, -d.y / az)
    } else {
        (5, -d.x / az, -d.y / az)
    }
}

/// Projects an equirectangular image to six cube faces by sampling along
/// each face pixel's ray direction.
pub fn equirect_to_cubemap(img: &EquirectImage, face_size: usize) -> Result<CubeFaces> {
    if face_size == 0 {
        return Err(Error::config("face_size must be >= 1".to_string()));
    }
    let mut cube = CubeFaces::new(face_size, img.channels);
    let mut px = vec![0.0f32; img.channels];
    for face in 0..6 {
        for j in 0..face_size {
            let b = 2.0 * (j as f64 + 0.5) / face_size as f64 - 1.0;
            for i in 0..face_size {
                let a = 2.0 * (i as f64 + 0.5) / face_size as f64 - 1.0;
                let (x, y, z) = face_direction(face, a, b);
                let d = Direction::new(x, y, z).expect("face direction is nonzero");
                let (u, v) = direction_to_pixel(&d, img.dims)?;
                sample_equirect(img, u, v, &mut px);
                let o = cube.idx(i, j);
                cube.faces[face][o..o + img.channels].copy_from_slice(&px);
            }
        }
    }
    Ok(cube)
}

fn sample_face(cube: &CubeFaces, face: usize, x: f64, y: f64, out: &mut [f32]) {
    let s = cube.size as isize;
    let fx = x.floor();
    let fy = y.floor();
    let tx = (x - fx) as f32;
    let ty = (y - fy) as f32;
    let c0 = (fx as isize).clamp(0, s - 1) as usize;
    let c1 = (fx as isize + 1).clamp(0, s - 1) as usize;
    let r0 = (fy as isize).clamp(0, s - 1) as usize;
    let r1 = (fy as isize + 1).clamp(0, s - 1) as usize;
    let data = &cube.faces[face];
    let ch = cube.channels;
    let p00 = &data[(r0 * cube.size + c0) * ch..][..ch];
    let p10 = &data[(r0 * cube.size + c1) * ch..][..ch];
    let p01 = &data[(r1 * cube.size + c0) * ch..][..ch];
    let p11 = &data[(r1 * cube.size + c1) * ch..][..ch];
    for k in 0..ch {
        out[k] = lerp(lerp(p00[k], p10[k], tx), lerp(p01[k], p11[k], tx), ty);
    }
}

/// Back-projects six cube faces to an equirectangular image.
pub fn cubemap_to_equirect(cube: &CubeFaces, dims: SphereDims) -> EquirectImage {
    let mut img = EquirectImage::new(dims, cube.channels);
    let mut px = vec![0.0f32; cube.channels];
    for v in 0..dims.height {
        for u in 0..dims.width {
            let d = direction_for_pixel(u, v, dims);
            let (face, a, b) = direction_to_face(&d);
            let x = (a + 1.0) / 2.0 * cube.size as f64 - 0.5;
            let y = (b + 1.0) / 2.0 * cube.size as f64 - 0.5;
            sample_face(cube, face, x, y, &mut px);
            img.pixel_mut(u, v).copy_from_slice(&px);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(w: usize, h: usize) -> SphereDims {
        SphereDims::new(w, h).unwrap()
    }

    #[test]
    fn dims_invariants() {
        assert!(SphereDims::new(128, 64).is_ok());
        assert!(SphereDims::new(130, 65).is_err());
        assert!(SphereDims::new(128, 60).is_err());
        assert!(SphereDims::new(0, 0).is_err());
    }

    #[test]
    fn pixel_to_direction_analytic() {
        let d = pixel_to_direction(2, 1, dims(4, 2)).unwrap();
        assert!((d.x - 0.5).abs() < 1e-12);
        assert!((d.y + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((d.z - 0.5).abs() < 1e-12);

        // Upper hemisphere at v=0.
        let d = pixel_to_direction(0, 0, dims(4, 2)).unwrap();
        assert!((d.y - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn pixel_out_of_range_rejected() {
        assert!(pixel_to_direction(4, 0, dims(4, 2)).is_err());
        assert!(pixel_to_direction(0, 2, dims(4, 2)).is_err());
    }

    #[test]
    fn direction_to_pixel_analytic() {
        let d = Direction::new(0.0, 0.0, 1.0).unwrap();
        let (u, v) = direction_to_pixel(&d, dims(8, 4)).unwrap();
        assert!((u - 3.5).abs() < 1e-9);
        assert!((v - 1.5).abs() < 1e-9);

        // North pole comes back unclamped at v = -0.5.
        let d = Direction::new(0.0, 1.0, 0.0).unwrap();
        let (_, v) = direction_to_pixel(&d, dims(8, 4)).unwrap();
        assert!((v + 0.5).abs() < 1e-9);

        let d = Direction::new(0.5, -std::f64::consts::FRAC_1_SQRT_2, 0.5).unwrap();
        let (u, v) = direction_to_pixel(&d, dims(4, 2)).unwrap();
        assert!((u - 2.0).abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_direction_rejected() {
        assert!(Direction::new(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn round_trip_all_pixels() {
        let dm = dims(64, 32);
        for v in 0..dm.height {
            for u in 0..dm.width {
                let d = pixel_to_direction(u, v, dm).unwrap();
                assert!((d.norm() - 1.0).abs() < 1e-6);
                let (cu, cv) = direction_to_pixel(&d, dm).unwrap();
                assert!(
                    (cu - u as f64).abs() < 1e-6 && (cv - v as f64).abs() < 1e-6,
                    "round trip failed at ({u}, {v}): got ({cu}, {cv})"
                );
            }
        }
    }

    #[test]
    fn quarter_turn_exactness() {
        // Advancing u by W/4 must permute direction components bit-exactly:
        // d(u + W/4) = (d.z, d.y, -d.x).
        let dm = dims(64, 32);
        for v in [0, 13, 31] {
            for u in 0..dm.width {
                let d = direction_for_pixel(u, v, dm);
                let r = direction_for_pixel((u + dm.width / 4) % dm.width, v, dm);
                assert_eq!(r.x.to_bits(), d.z.to_bits());
                assert_eq!(r.y.to_bits(), d.y.to_bits());
                assert_eq!(r.z.to_bits(), (-d.x).to_bits());
            }
        }
    }

    #[test]
    fn yaw_rotate_shift_and_cycle() {
        let dm = dims(8, 4);
        let mut img = EquirectImage::new(dm, 1);
        for v in 0..4 {
            for u in 0..8 {
                img.pixel_mut(u, v)[0] = (v * 8 + u) as f32;
            }
        }
        let r0 = img.yaw_rotate(0);
        assert_eq!(r0, img);

        let r1 = img.yaw_rotate(1);
        for v in 0..4 {
            for u in 0..8 {
                assert_eq!(r1.pixel((u + 2) % 8, v)[0], img.pixel(u, v)[0]);
            }
        }

        let cycled = img
            .yaw_rotate(1)
            .yaw_rotate(1)
            .yaw_rotate(1)
            .yaw_rotate(1);
        assert_eq!(cycled, img);
    }

    #[test]
    fn latitude_weight_analytic() {
        assert!((latitude_weight(1, 4) - (std::f64::consts::PI / 8.0).cos()).abs() < 1e-12);
        assert!((latitude_weight(2, 4) - (std::f64::consts::PI / 8.0).cos()).abs() < 1e-12);
        assert!((latitude_weight(0, 2) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn latitude_weight_integrates_to_two_over_pi() {
        // Midpoint quadrature of cosθ over rows approaches (1/π)∫cosθ dθ = 2/π.
        let h = 512;
        let sum: f64 = (0..h).map(|v| latitude_weight(v, h)).sum();
        let normalized = sum / h as f64;
        assert!((normalized - 2.0 / std::f64::consts::PI).abs() < 1e-3);
    }

    #[test]
    fn cubemap_constant_round_trip_bit_exact() {
        let dm = dims(32, 16);
        let mut img = EquirectImage::new(dm, 3);
        img.data.fill(0.437);
        let cube = equirect_to_cubemap(&img, 16).unwrap();
        for face in &cube.faces {
            assert!(face.iter().all(|&x| x == 0.437));
        }
        let back = cubemap_to_equirect(&cube, dm);
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn cubemap_gradient_round_trip_error_bound() {
        // Brute-force double resampling of a smooth gradient; the mean
        // absolute error must stay below 2 intensity levels on 8-bit scale.
        let dm = dims(64, 32);
        let mut img = EquirectImage::new(dm, 1);
        for v in 0..dm.height {
            for u in 0..dm.width {
                img.pixel_mut(u, v)[0] =
                    0.5 + 0.4 * (u as f32 / 64.0 * std::f32::consts::TAU).sin() * (v as f32 / 31.0);
            }
        }
        let cube = equirect_to_cubemap(&img, dm.height).unwrap();
        let back = cubemap_to_equirect(&cube, dm);
        let mae: f32 = img
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / img.data.len() as f32;
        assert!(mae < 2.0 / 255.0, "round-trip mae {mae} too high");
    }

    #[test]
    fn cubemap_face_order_contract() {
        // A bright strip at the equator around φ=0 must land on the +z face.
        let dm = dims(32, 16);
        let mut img = EquirectImage::new(dm, 1);
        for v in 7..9 {
            for u in 15..17 {
                img.pixel_mut(u, v)[0] = 1.0;
            }
        }
        let cube = equirect_to_cubemap(&img, 8).unwrap();
        let zsum: f32 = cube.faces[4].iter().sum();
        assert!(zsum > 0.0, "+z face missed the φ=0 strip");
        for f in [0, 1, 2, 3, 5] {
            let s: f32 = cube.faces[f].iter().sum();
            assert_eq!(s, 0.0, "face {f} unexpectedly lit");
        }
    }
}
