//! Rasterisation of scenes, pose videos, agnostic videos and masks.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayView3};

use super::garment::GarmentSpec;
use super::scene::{inside_quad, quad_uv, JointKind, Quad, SceneSpec};
use crate::error::{Error, Result};
use crate::tensor::VideoTensor;

/// Fill value of the agnostic region.
pub const AGNOSTIC_FILL: f32 = 0.5;
/// Half-width of pose strokes (strokes are 2 px wide).
pub const POSE_STROKE_RADIUS: f32 = 1.0;

/// One dataset item.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: SceneSpec,
    pub source_video: VideoTensor,
    pub pose_video: VideoTensor,
    pub agnostic_video: VideoTensor,
    /// `F×1×H×W`, values in `{0, 1}`.
    pub agnostic_mask: VideoTensor,
    /// `3×H_g×W_g` image of the worn garment.
    pub garment_image: Array3<f32>,
    pub truth_videos: BTreeMap<u32, VideoTensor>,
    pub g_worn: u32,
}

fn seg_dist(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> f32 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn centre(x: usize, y: usize) -> [f32; 2] {
    [x as f32 + 0.5, y as f32 + 0.5]
}

/// Bilinear lookup into a `3×H_g×W_g` garment image at unit coordinates.
fn sample_garment(img: &ArrayView3<'_, f32>, uv: [f32; 2]) -> [f32; 3] {
    let (_, gh, gw) = img.dim();
    let gx = (uv[0] * gw as f32 - 0.5).clamp(0.0, (gw - 1) as f32);
    let gy = (uv[1] * gh as f32 - 0.5).clamp(0.0, (gh - 1) as f32);
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(gw - 1), (y0 + 1).min(gh - 1));
    let (fx, fy) = (gx - x0 as f32, gy - y0 as f32);
    [0, 1, 2].map(|c| {
        let top = img[[c, y0, x0]] * (1.0 - fx) + img[[c, y0, x1]] * fx;
        let bot = img[[c, y1, x0]] * (1.0 - fx) + img[[c, y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Overwrites the pixels inside `quad` with the garment texture warped by bilinear quad mapping.
pub fn texture_torso(frame: &mut Array3<f32>, quad: &Quad, garment: &ArrayView3<'_, f32>) {
    let (_, h, w) = frame.dim();
    for y in 0..h {
        for x in 0..w {
            let p = centre(x, y);
            if inside_quad(quad, p) {
                let rgb = sample_garment(garment, quad_uv(quad, p));
                for c in 0..3 {
                    frame[[c, y, x]] = rgb[c];
                }
            }
        }
    }
}

/// Renders frame `f` of the scene with the person wearing `garment`.
pub fn render_frame(scene: &SceneSpec, f: usize, garment: &ArrayView3<'_, f32>) -> Array3<f32> {
    let (h, w) = (scene.height, scene.width);
    let mut frame = Array3::<f32>::zeros((3, h, w));
    let kp = scene.keypoints(f);
    let sh = kp[JointKind::Shoulder as usize];
    let head = kp[JointKind::Head as usize];
    let hands = [kp[JointKind::LeftHand as usize], kp[JointKind::RightHand as usize]];
    for y in 0..h {
        for x in 0..w {
            let p = centre(x, y);
            let mut rgb = scene.background.color(x, y, h, w);
            let on_limb = hands.iter().any(|&hand| seg_dist(p, sh, hand) <= scene.limb_radius)
                || seg_dist(p, sh, head) <= scene.limb_radius;
            let on_head = seg_dist(p, head, head) <= scene.head_radius;
            if on_limb || on_head {
                rgb = scene.skin;
            }
            for c in 0..3 {
                frame[[c, y, x]] = rgb[c];
            }
        }
    }
    texture_torso(&mut frame, &scene.torso_quads[f], garment);
    frame
}

pub fn render_video(scene: &SceneSpec, garment: &ArrayView3<'_, f32>) -> VideoTensor {
    let mut v = VideoTensor::zeros(scene.num_frames, 3, scene.height, scene.width);
    for f in 0..scene.num_frames {
        v.set_frame(f, render_frame(scene, f, garment).view());
    }
    v
}

/// White 2 px skeleton strokes on black.
pub fn render_pose(scene: &SceneSpec) -> VideoTensor {
    let (h, w) = (scene.height, scene.width);
    let mut v = VideoTensor::zeros(scene.num_frames, 3, h, w);
    let bones = [
        (JointKind::Hip, JointKind::Shoulder),
        (JointKind::Shoulder, JointKind::Head),
        (JointKind::Shoulder, JointKind::LeftHand),
        (JointKind::Shoulder, JointKind::RightHand),
    ];
    let data = v.array_mut();
    for f in 0..scene.num_frames {
        let kp = scene.keypoints(f);
        for y in 0..h {
            for x in 0..w {
                let p = centre(x, y);
                if bones
                    .iter()
                    .any(|&(a, b)| seg_dist(p, kp[a as usize], kp[b as usize]) <= POSE_STROKE_RADIUS)
                {
                    for c in 0..3 {
                        data[[f, c, y, x]] = 1.0;
                    }
                }
            }
        }
    }
    v
}

/// Binary clothing-agnostic mask: the grown upper-body box, always a superset of the torso quad.
pub fn render_mask(scene: &SceneSpec, margin: f32) -> VideoTensor {
    let (h, w) = (scene.height, scene.width);
    let mut m = VideoTensor::zeros(scene.num_frames, 1, h, w);
    let data = m.array_mut();
    for f in 0..scene.num_frames {
        let [x0, y0, x1, y1] = scene.upper_body_box(f, margin);
        let quad = &scene.torso_quads[f];
        for y in 0..h {
            for x in 0..w {
                let p = centre(x, y);
                let in_box = p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1;
                if in_box || inside_quad(quad, p) {
                    data[[f, 0, y, x]] = 1.0;
                }
            }
        }
    }
    m
}

pub fn apply_agnostic(source: &VideoTensor, mask: &VideoTensor) -> VideoTensor {
    let mut out = source.clone();
    let (frames, channels, h, w) = source.dims();
    let m = mask.array();
    let data = out.array_mut();
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                if m[[f, 0, y, x]] > 0.5 {
                    for c in 0..channels {
                        data[[f, c, y, x]] = AGNOSTIC_FILL;
                    }
                }
            }
        }
    }
    out
}

/// Renders the full sample for a scene: source, conditioning videos and every pool garment's ground truth.
pub fn render_sample(scene: &SceneSpec, g_worn: &GarmentSpec, pool: &[GarmentSpec], mask_margin: f32) -> Result<Sample> {
    if !pool.iter().any(|g| g.garment_id == g_worn.garment_id) {
        return Err(Error::Config(format!("worn garment {} is not in the pool", g_worn.garment_id)));
    }
    let truth_videos: BTreeMap<u32, VideoTensor> = pool
        .iter()
        .map(|g| (g.garment_id, render_video(scene, &g.render().view())))
        .collect();
    let source_video = truth_videos[&g_worn.garment_id].clone();
    let agnostic_mask = render_mask(scene, mask_margin);
    let agnostic_video = apply_agnostic(&source_video, &agnostic_mask);
    Ok(Sample {
        scene: scene.clone(),
        pose_video: render_pose(scene),
        agnostic_video,
        agnostic_mask,
        garment_image: g_worn.render(),
        source_video,
        truth_videos,
        g_worn: g_worn.garment_id,
    })
}

#[cfg(test)]
mod tests {
    use super::super::garment::{garment_pool, GarmentSpec, Pattern};
    use super::super::scene::{make_scene, GenerationConfig};
    use super::*;

    fn sample(seed: u64, worn: usize) -> Sample {
        let cfg = GenerationConfig::default();
        let scene = make_scene(&cfg, seed).unwrap();
        let pool = garment_pool(8, 16, 16);
        render_sample(&scene, &pool[worn], &pool, cfg.mask_margin).unwrap()
    }

    #[test]
    fn paired_truth_is_source() {
        let s = sample(3, 2);
        assert_eq!(s.truth_videos[&2], s.source_video);
        assert_eq!(s.truth_videos.len(), 8);
    }

    #[test]
    fn agnostic_matches_source_outside_mask() {
        let s = sample(4, 1);
        let (f, c, h, w) = s.source_video.dims();
        let (src, agn, m) = (s.source_video.array(), s.agnostic_video.array(), s.agnostic_mask.array());
        let mut masked = 0;
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let mv = m[[fi, 0, y, x]];
                    assert!(mv == 0.0 || mv == 1.0);
                    if mv == 0.0 {
                        for ci in 0..c {
                            assert_eq!(agn[[fi, ci, y, x]].to_bits(), src[[fi, ci, y, x]].to_bits());
                        }
                    } else {
                        masked += 1;
                    }
                }
            }
        }
        assert!(masked > 0);
    }

    #[test]
    fn pose_nonzero_only_on_strokes() {
        let s = sample(5, 0);
        let p = s.pose_video.array();
        assert!(p.iter().all(|&v| v == 0.0 || v == 1.0));
        let lit = p.iter().filter(|&&v| v == 1.0).count();
        assert!(lit > 0 && lit < p.len() / 2);
    }

    #[test]
    fn solid_garments_differ_only_inside_torso() {
        let cfg = GenerationConfig::default();
        let scene = make_scene(&cfg, 9).unwrap();
        let mut a = GarmentSpec::from_id(0, 16, 16);
        a.pattern = Pattern::Solid;
        let mut b = GarmentSpec::from_id(1, 16, 16);
        b.pattern = Pattern::Solid;
        b.garment_id = 1;
        let s = render_sample(&scene, &a, &[a.clone(), b.clone()], cfg.mask_margin).unwrap();
        let (va, vb) = (s.truth_videos[&0].array(), s.truth_videos[&1].array());
        let mut inside_diff = 0;
        for f in 0..scene.num_frames {
            let q = &scene.torso_quads[f];
            for y in 0..32 {
                for x in 0..32 {
                    let diff = (0..3).any(|c| va[[f, c, y, x]] != vb[[f, c, y, x]]);
                    if inside_quad(q, [x as f32 + 0.5, y as f32 + 0.5]) {
                        inside_diff += diff as usize;
                    } else {
                        assert!(!diff, "frame {f} pixel ({x},{y}) differs outside torso");
                    }
                }
            }
        }
        assert!(inside_diff > 0);
    }

    #[test]
    fn worn_garment_must_be_in_pool() {
        let cfg = GenerationConfig::default();
        let scene = make_scene(&cfg, 0).unwrap();
        let pool = garment_pool(2, 16, 16);
        let stranger = GarmentSpec::from_id(9, 16, 16);
        assert!(render_sample(&scene, &stranger, &pool, 1.0).is_err());
    }
}
