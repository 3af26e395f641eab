//! Ray-cast (color, depth, mask) equirectangular triplets from scenes, with
//! 90° yaw augmentation and dataset emission.
//!
//! Depth stores the hit radius ‖v − c‖ (not a planar z coordinate). Shading
//! is direct illumination from a point light co-located with the camera:
//! albedo · |n·d| / (1 + t²), so brightness itself is a depth cue. Misses
//! carry the clear color, a max-depth sentinel and mask 0.

use std::path::Path;

use rayon::prelude::*;

use crate::error::Result;
use crate::formats::{self, ManifestRecord};
use crate::geometry::{direction_for_pixel, SphereDims, YawRotate};
use crate::raster::{DepthMap, EquirectImage, ValidityMask};
use crate::scene::{intersect, Scene};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderTriplet {
    pub color: EquirectImage,
    pub depth: DepthMap,
    pub mask: ValidityMask,
}

/// Renders one panorama. Pure per-pixel computation, parallelized over rows;
/// output is identical for any worker count.
pub fn render_panorama(scene: &Scene, dims: SphereDims) -> RenderTriplet {
    let w = dims.width;
    let mut color = EquirectImage::new(dims, 3);
    let mut depth = DepthMap::new(dims);
    let mut mask = ValidityMask::new(dims);

    let rows: Vec<(usize, &mut [f32], &mut [f32], &mut [u8])> = color
        .data
        .chunks_mut(w * 3)
        .zip(depth.data.chunks_mut(w))
        .zip(mask.data.chunks_mut(w))
        .enumerate()
        .map(|(v, ((c, d), m))| (v, c, d, m))
        .collect();

    rows.into_par_iter().for_each(|(v, c_row, d_row, m_row)| {
        for u in 0..w {
            let dir = direction_for_pixel(u, v, dims);
            match intersect(&scene.camera, &dir, scene) {
                Some(hit) => {
                    let n_dot_d = (hit.normal[0] * dir.x
                        + hit.normal[1] * dir.y
                        + hit.normal[2] * dir.z)
                        .abs();
                    let falloff = n_dot_d / (1.0 + hit.t * hit.t);
                    for ch in 0..3 {
                        c_row[u * 3 + ch] = (hit.albedo[ch] * falloff).clamp(0.0, 1.0) as f32;
                    }
                    d_row[u] = hit.t as f32;
                    m_row[u] = 1;
                }
                None => {
                    for ch in 0..3 {
                        c_row[u * 3 + ch] = scene.clear_color[ch] as f32;
                    }
                    d_row[u] = scene.max_depth as f32;
                    m_row[u] = 0;
                }
            }
        }
    });

    RenderTriplet { color, depth, mask }
}

impl RenderTriplet {
    pub fn yaw_rotate(&self, k: u8) -> RenderTriplet {
        RenderTriplet {
            color: self.color.yaw_rotate(k),
            depth: self.depth.yaw_rotate(k),
            mask: self.mask.yaw_rotate(k),
        }
    }
}

/// Renders each pose once and writes 4 yaw-rotated triplets per pose plus
/// a manifest CSV. Rotations are exact column shifts of the k=0 render.
pub fn render_dataset(
    scenes: &[(String, Scene)],
    dims: SphereDims,
    out_dir: &Path,
) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(out_dir).map_err(|e| crate::error::Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(scenes.len() * 4);
    for (scene_id, scene) in scenes {
        let base = render_panorama(scene, dims);
        for k in 0..4u8 {
            let triplet = if k == 0 { base.clone() } else { base.yaw_rotate(k) };
            let color_name = format!("{scene_id}_k{k}_color.ppm");
            let depth_name = format!("{scene_id}_k{k}_depth.pfm");
            let mask_name = format!("{scene_id}_k{k}_mask.pgm");
            formats::write_equirect_ppm(&out_dir.join(&color_name), &triplet.color)?;
            formats::write_depth_pfm(&out_dir.join(&depth_name), &triplet.depth)?;
            formats::write_mask_pgm(&out_dir.join(&mask_name), &triplet.mask)?;
            records.push(ManifestRecord {
                color: color_name,
                depth: depth_name,
                mask: mask_name,
                scene_id: scene_id.clone(),
                yaw_k: k,
            });
        }
    }
    formats::write_manifest(&out_dir.join("manifest.csv"), &records)?;
    Ok(records)
}
