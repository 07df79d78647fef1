//! Oracle tie points with occlusion-aware tracks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{project, CameraIntrinsics, CameraPose, PixelCoord, WorldPoint};
use crate::ingest::{Observation, TiePoint, TiePointTable};
use crate::rasters::{DepthMap, Extent};

use super::mono::Warp;
use super::render::oracle_depth;
use super::scene::{texture, SceneSpec};
use super::{stream, STREAM_TIE_NOISE, STREAM_TIE_SAMPLE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TiePointOptions {
    pub count: usize,
    /// Gaussian pixel noise, pixels.
    pub pixel_noise: f64,
    /// Maximum gap between the projected depth and the ray-cast depth, meters.
    pub occlusion_tolerance: f64,
    /// When set, an observation is also dropped if the rendered depth map
    /// (or the noise-free mono map, mapped back through its warp), sampled
    /// bilinearly at the projected pixel, misses the projected depth by more
    /// than this many meters. Discards mixed pixels and warp curvature.
    pub interpolation_tolerance: Option<f64>,
    /// Sampling area; the scene extent when absent.
    pub area: Option<Extent>,
}

impl Default for TiePointOptions {
    fn default() -> Self {
        Self {
            count: 2000,
            pixel_noise: 0.0,
            occlusion_tolerance: 0.1,
            interpolation_tolerance: None,
            area: None,
        }
    }
}

/// One camera seen by the tie-point generator.
#[derive(Debug, Clone, Copy)]
pub struct TieView<'a> {
    pub image_id: u32,
    pub pose: &'a CameraPose,
    /// Rendered depth for the interpolation check.
    pub depth: Option<&'a DepthMap>,
    /// Noise-free mono map and its warp for the same check.
    pub mono: Option<(&'a DepthMap, Warp)>,
}

fn observe(
    scene: &SceneSpec,
    view: &TieView<'_>,
    k: &CameraIntrinsics,
    p: WorldPoint,
    opts: &TiePointOptions,
) -> Option<PixelCoord> {
    let c = view.pose.world_to_camera(p);
    let px = project(k, c).ok()?;
    if !k.in_bounds(px) {
        return None;
    }
    let oracle = oracle_depth(scene, view.pose, k, px)?;
    if (oracle - c.z).abs() > opts.occlusion_tolerance {
        return None;
    }
    if let (Some(tol), Some(map)) = (opts.interpolation_tolerance, view.depth) {
        let sampled = map.sample_bilinear(px)?;
        if (sampled - c.z).abs() > tol {
            return None;
        }
    }
    if let (Some(tol), Some((map, warp))) = (opts.interpolation_tolerance, view.mono) {
        let z = warp.invert(map.sample_bilinear(px)?)?;
        if (z - c.z).abs() > tol {
            return None;
        }
    }
    Some(px)
}

pub fn make_tiepoints(
    scene: &SceneSpec,
    views: &[TieView<'_>],
    k: &CameraIntrinsics,
    opts: &TiePointOptions,
    seed: u64,
) -> TiePointTable {
    let area = opts.area.unwrap_or(scene.extent);
    let mut sampler = stream(seed, STREAM_TIE_SAMPLE, 0);
    let mut noise_rng = stream(seed, STREAM_TIE_NOISE, 0);
    let noise = (opts.pixel_noise > 0.0).then(|| Normal::new(0.0, opts.pixel_noise).expect("positive sigma"));

    let mut points = Vec::new();
    for _ in 0..opts.count {
        let x = sampler.gen_range(area.min_x..=area.max_x);
        let y = sampler.gen_range(area.min_y..=area.max_y);
        let Ok(z) = scene.elevation(x, y) else {
            continue;
        };
        let p = WorldPoint::new(x, y, z);
        let mut track = Vec::new();
        for view in views {
            let Some(mut px) = observe(scene, view, k, p, opts) else {
                continue;
            };
            if let Some(n) = &noise {
                px.u += n.sample(&mut noise_rng);
                px.v += n.sample(&mut noise_rng);
                if !k.in_bounds(px) {
                    continue;
                }
            }
            track.push(Observation {
                image_id: view.image_id,
                pixel: px,
            });
        }
        if track.len() >= 2 {
            points.push(TiePoint {
                id: points.len() as u64 + 1,
                position: p,
                color: texture(x, y, z),
                track,
            });
        }
    }
    TiePointTable { points }
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;

    use super::*;
    use crate::geometry::nadir_rotation;
    use crate::synth::scene::Building;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap()
    }

    fn nadir(x: f64, y: f64) -> CameraPose {
        CameraPose::from_center(nadir_rotation(), Vector3::new(x, y, 200.0)).unwrap()
    }

    #[test]
    fn single_camera_gives_empty_table() {
        let scene = SceneSpec::flat(Extent::new(-50.0, -50.0, 50.0, 50.0), 0.0);
        let pose = nadir(0.0, 0.0);
        let views = [TieView { image_id: 1, pose: &pose, depth: None, mono: None }];
        let t = make_tiepoints(&scene, &views, &k(), &TiePointOptions::default(), 1);
        assert!(t.points.is_empty());
    }

    #[test]
    fn overlapping_pair_full_tracks() {
        let scene = SceneSpec::flat(Extent::new(-50.0, -50.0, 50.0, 50.0), 0.0);
        let (a, b) = (nadir(0.0, 0.0), nadir(0.5, 0.0));
        let views = [
            TieView { image_id: 1, pose: &a, depth: None, mono: None },
            TieView { image_id: 2, pose: &b, depth: None, mono: None },
        ];
        // sample inside the common footprint only
        let opts = TiePointOptions {
            count: 200,
            area: Some(Extent::new(-50.0, -40.0, 50.0, 40.0)),
            ..Default::default()
        };
        let t = make_tiepoints(&scene, &views, &k(), &opts, 3);
        assert_eq!(t.points.len(), 200);
        for p in &t.points {
            assert_eq!(p.track.len(), 2);
            for o in &p.track {
                let pose = if o.image_id == 1 { &a } else { &b };
                let px = project(&k(), pose.world_to_camera(p.position)).unwrap();
                assert_eq!(px, o.pixel);
            }
        }
    }

    #[test]
    fn occluded_view_is_dropped() {
        let mut scene = SceneSpec::flat(Extent::new(-200.0, -200.0, 200.0, 200.0), 0.0);
        scene.buildings.push(Building {
            footprint: Extent::new(0.0, -10.0, 10.0, 10.0),
            height: 100.0,
        });
        // ground point just east of the tower; camera B sits far to the west
        let p = WorldPoint::new(14.0, 0.0, 0.0);
        let a = nadir(14.0, 0.0);
        let b = nadir(-40.0, 0.0);
        let kk = CameraIntrinsics::new(50.0, 50.0, 31.5, 23.5, 64, 48).unwrap();
        let opts = TiePointOptions::default();
        let va = TieView { image_id: 1, pose: &a, depth: None, mono: None };
        let vb = TieView { image_id: 2, pose: &b, depth: None, mono: None };
        assert!(observe(&scene, &va, &kk, p, &opts).is_some());
        let c = b.world_to_camera(p);
        assert!(kk.in_bounds(project(&kk, c).unwrap()));
        assert!(observe(&scene, &vb, &kk, p, &opts).is_none());
    }

    #[test]
    fn mono_check_rejects_curved_samples() {
        let mut scene = SceneSpec::flat(Extent::new(-100.0, -100.0, 100.0, 100.0), 0.0);
        scene.bumps.push(crate::synth::scene::Bump {
            center: [0.0, 0.0],
            sigma: 15.0,
            amplitude: 30.0,
        });
        let pose = nadir(0.0, 0.0);
        let kk = k();
        let depth = crate::synth::render::render_depth(&scene, &pose, &kk);
        let warp = Warp::Rational { alpha: 0.0, beta: 1.0, gamma: 1.0, delta: 0.0 };
        let values = depth.values().iter().map(|z| warp.apply(*z)).collect();
        let mono = DepthMap::from_values(64, 48, values, crate::rasters::DepthKind::Disparity).unwrap();
        let opts = TiePointOptions {
            interpolation_tolerance: Some(1e-6),
            ..Default::default()
        };
        let loose = TieView { image_id: 1, pose: &pose, depth: None, mono: None };
        let strict = TieView { image_id: 1, pose: &pose, depth: None, mono: Some((&mono, warp)) };
        // bump flank between pixel centers
        let p = WorldPoint::new(9.3, 4.1, scene.elevation(9.3, 4.1).unwrap());
        assert!(observe(&scene, &loose, &kk, p, &opts).is_some());
        assert!(observe(&scene, &strict, &kk, p, &opts).is_none());
    }

    #[test]
    fn seeded_and_noisy() {
        let scene = SceneSpec::flat(Extent::new(-50.0, -50.0, 50.0, 50.0), 0.0);
        let (a, b) = (nadir(0.0, 0.0), nadir(1.0, 0.0));
        let views = [
            TieView { image_id: 1, pose: &a, depth: None, mono: None },
            TieView { image_id: 2, pose: &b, depth: None, mono: None },
        ];
        let opts = TiePointOptions {
            count: 50,
            pixel_noise: 0.5,
            ..Default::default()
        };
        let t1 = make_tiepoints(&scene, &views, &k(), &opts, 9);
        let t2 = make_tiepoints(&scene, &views, &k(), &opts, 9);
        assert_eq!(t1, t2);
    }
}
