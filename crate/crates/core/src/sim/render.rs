//! Flat-ground pinhole renderer.
//!
//! Each pixel casts a ray from the camera; rays above the horizon paint
//! sky, rays hitting the ground beyond the far clip paint the horizon
//! band, the rest project to a world point that is classified against the
//! track (road surface variant, lane line, off-road texture). Lane-line
//! pixels are also reported in a geometry-only mask so diagnostics can
//! check where a network looks.
//!
//! The camera model is deliberately explicit about focal lengths and the
//! principal point: the target style ships with a wider field of view and
//! a letterboxed (shifted-down) principal point, which is exactly the
//! misalignment the crop search has to undo.

use serde::{Deserialize, Serialize};

use crate::imageio::Image;
use crate::sim::track::Track;
use crate::sim::vehicle::VehicleState;
use crate::util::rng_from;

use rand_chacha::rand_core::Rng;

/// Pinhole intrinsics plus mount height. Derived from [`StyleConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    /// Horizontal focal length, pixels.
    pub fx: f64,
    /// Vertical focal length, pixels.
    pub fy: f64,
    /// Principal point, pixels.
    pub cx: f64,
    pub cy: f64,
    /// Camera height above the road, meters.
    pub mount_height: f64,
    /// Ground beyond this distance renders as horizon band, meters.
    pub far_clip: f64,
}

/// Off-road appearance. Speckle varies with track coordinates
/// (arc length, |lateral|), so it is mirror-symmetric about the road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OffroadTexture {
    Flat { rgb: [u8; 3] },
    Speckle { rgb: [u8; 3], amplitude: u8 },
}

/// Everything that makes a domain look the way it does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleConfig {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, degrees.
    pub hfov_deg: f64,
    /// fy = fx * pixel_aspect.
    pub pixel_aspect: f64,
    /// Principal point shift below image center, pixels (letterbox).
    pub cy_offset_px: f64,
    pub cam_height_m: f64,
    pub far_clip_m: f64,
    /// Road surface palette; index 0 is the default, the track's surface
    /// schedule selects among the rest.
    pub road_rgb: Vec<[u8; 3]>,
    pub line_rgb: [u8; 3],
    pub line_width_m: f64,
    /// Dash (period_m, duty in 0..1]; None paints solid lines. Dashes are
    /// keyed by arc length, identical for both lines of the pair.
    pub line_dash: Option<(f64, f64)>,
    pub offroad: OffroadTexture,
    pub horizon_rgb: [u8; 3],
    pub sky_rgb: [u8; 3],
    /// Distant scenery band just above the horizon: (ray-tangent depth of
    /// the band, base color, speckle amplitude). Structured by azimuth,
    /// so it feeds view-dependent clutter into any crop that reaches
    /// above the horizon. None renders plain sky there.
    pub skyline: Option<(f64, [u8; 3], u8)>,
    /// Additive uniform per-channel noise amplitude, 8-bit counts.
    pub noise_amp: u8,
    /// Paved shoulder beyond the outer lane lines, meters.
    pub shoulder_m: f64,
}

/// Runtime style: config plus derived camera.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStyle {
    pub config: StyleConfig,
    pub camera: CameraSpec,
}

impl StyleConfig {
    pub fn camera(&self) -> CameraSpec {
        let fx = (self.width as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan();
        CameraSpec {
            width: self.width,
            height: self.height,
            fx,
            fy: fx * self.pixel_aspect,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0 + self.cy_offset_px,
            mount_height: self.cam_height_m,
            far_clip: self.far_clip_m,
        }
    }

    pub fn build(self) -> DomainStyle {
        let camera = self.camera();
        DomainStyle {
            config: self,
            camera,
        }
    }
}

#[inline]
fn dash_on(s: f64, dash: Option<(f64, f64)>) -> bool {
    match dash {
        None => true,
        Some((period, duty)) => (s / period).rem_euclid(1.0) < duty,
    }
}

fn speckle_hash(ix: i64, iy: i64) -> u64 {
    let mut z = (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iy as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z ^= z >> 29;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 32;
    z
}

#[inline]
fn add_noise(v: u8, noise: i16) -> u8 {
    (v as i16 + noise).clamp(0, 255) as u8
}

/// Render the world from the driver's seat.
///
/// Deterministic per `(track, state, style, noise_seed)`. Returns the RGB
/// frame and the geometry-only lane-line mask (no noise applied to it).
pub fn render(
    track: &Track,
    state: &VehicleState,
    style: &DomainStyle,
    noise_seed: u64,
) -> (Image, Vec<bool>) {
    let cam = &style.camera;
    let cfg = &style.config;
    let (w, h) = (cam.width, cam.height);
    let mut img = Image::new(w, h);
    let mut mask = vec![false; w * h];

    let (sin_yaw, cos_yaw) = state.yaw.sin_cos();
    let half_lane = track.lane_width / 2.0;
    let line_half = cfg.line_width_m / 2.0;
    // A single lane pair: the driving lane's own boundary lines.
    let line_centers = [-half_lane, half_lane];
    let road_edge = half_lane + cfg.shoulder_m;

    let mut rng = rng_from(noise_seed);
    let noise_amp = cfg.noise_amp as i16;
    let next_noise = |rng: &mut rand_chacha::ChaCha8Rng| -> i16 {
        if noise_amp == 0 {
            0
        } else {
            let span = 2 * noise_amp as u32 + 1;
            (rng.next_u32() % span) as i16 - noise_amp
        }
    };

    let mut hint: Option<usize> = None;
    // Bottom-to-top: near ground first, so the locate hint stays warm.
    for iy in (0..h).rev() {
        let ty = (iy as f64 + 0.5 - cam.cy) / cam.fy;
        for ix in 0..w {
            let idx = (iy * w + ix) * 3;
            let rgb = if ty <= 0.0 {
                match cfg.skyline {
                    Some((depth, base, amp)) if ty > -depth => {
                        // Azimuth-keyed scenery: stable in the world, so
                        // it shifts with heading like real clutter.
                        let azimuth = state.yaw - (ix as f64 + 0.5 - cam.cx) / cam.fx;
                        let cell = (azimuth * 60.0).floor() as i64;
                        let band = ((-ty / depth) * 3.0).floor() as i64;
                        let hsh = speckle_hash(cell, band);
                        let delta = (hsh % (2 * amp as u64 + 1)) as i16 - amp as i16;
                        [
                            add_noise(base[0], delta),
                            add_noise(base[1], delta),
                            add_noise(base[2], delta),
                        ]
                    }
                    _ => cfg.sky_rgb,
                }
            } else {
                let dist = cam.mount_height / ty;
                if dist > cam.far_clip {
                    cfg.horizon_rgb
                } else {
                    // Ground point: forward `dist`, lateral right `lat`.
                    let lat = (ix as f64 + 0.5 - cam.cx) / cam.fx * dist;
                    let gx = state.x + dist * cos_yaw + lat * sin_yaw;
                    let gy = state.y + dist * sin_yaw - lat * cos_yaw;
                    let loc = track.locate(gx, gy, hint);
                    hint = Some(loc.index);
                    let off = loc.offset;
                    if loc.beyond_end || off.abs() > road_edge {
                        match cfg.offroad {
                            OffroadTexture::Flat { rgb } => rgb,
                            OffroadTexture::Speckle { rgb, amplitude } => {
                                let cell_s = (loc.s * 2.0).floor() as i64;
                                let cell_o = (off.abs() * 2.0).floor() as i64;
                                let hsh = speckle_hash(cell_s, cell_o);
                                let delta =
                                    (hsh % (2 * amplitude as u64 + 1)) as i16 - amplitude as i16;
                                [
                                    add_noise(rgb[0], delta),
                                    add_noise(rgb[1], delta),
                                    add_noise(rgb[2], delta),
                                ]
                            }
                        }
                    } else if line_centers.iter().any(|&c| (off - c).abs() <= line_half)
                        && dash_on(loc.s, cfg.line_dash)
                    {
                        mask[iy * w + ix] = true;
                        cfg.line_rgb
                    } else {
                        let variant = track.surface_at(loc.s).min(cfg.road_rgb.len() - 1);
                        cfg.road_rgb[variant]
                    }
                }
            };
            img.data[idx] = add_noise(rgb[0], next_noise(&mut rng));
            img.data[idx + 1] = add_noise(rgb[1], next_noise(&mut rng));
            img.data[idx + 2] = add_noise(rgb[2], next_noise(&mut rng));
        }
    }
    (img, mask)
}

/// Horizontal centroid (pixel x) of the mask, or None when empty.
pub fn mask_centroid_x(mask: &[bool], width: usize) -> Option<f64> {
    let mut n = 0usize;
    let mut sx = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            n += 1;
            sx += (i % width) as f64;
        }
    }
    if n == 0 {
        None
    } else {
        Some(sx / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::track::{Segment, Track};
    use crate::sim::vehicle::VehicleState;

    pub fn test_source_style() -> DomainStyle {
        StyleConfig {
            width: 160,
            height: 80,
            hfov_deg: 60.0,
            pixel_aspect: 1.0,
            cy_offset_px: 0.0,
            cam_height_m: 1.2,
            far_clip_m: 60.0,
            road_rgb: vec![[64, 64, 68]],
            line_rgb: [235, 235, 235],
            line_width_m: 0.15,
            line_dash: None,
            offroad: OffroadTexture::Speckle {
                rgb: [88, 118, 72],
                amplitude: 10,
            },
            horizon_rgb: [150, 160, 170],
            sky_rgb: [170, 200, 230],
            skyline: None,
            noise_amp: 2,
            shoulder_m: 0.25,
        }
        .build()
    }

    fn straight_track() -> Track {
        Track::from_segments(
            vec![Segment {
                length: 400.0,
                kappa0: 0.0,
                kappa1: 0.0,
            }],
            3.5,
            vec![(0.0, 0)],
        )
    }

    #[test]
    fn centered_straight_view_is_left_right_symmetric() {
        let track = straight_track();
        let style = test_source_style();
        let state = VehicleState::at(50.0, 0.0, 0.0, 8.33);
        let (img, mask) = render(&track, &state, &style, 7);
        let (w, h) = (img.width, img.height);
        let amp = style.config.noise_amp as i16;
        for y in 0..h {
            for x in 0..w / 2 {
                let a = img.get(x, y);
                let b = img.get(w - 1 - x, y);
                for c in 0..3 {
                    let diff = (a[c] as i16 - b[c] as i16).abs();
                    assert!(
                        diff <= 2 * amp,
                        "asymmetry {diff} at ({x},{y}) channel {c}"
                    );
                }
                // The mask is noise-free: exactly symmetric.
                assert_eq!(mask[y * w + x], mask[y * w + (w - 1 - x)]);
            }
        }
    }

    #[test]
    fn same_state_same_seed_is_deterministic() {
        let track = straight_track();
        let style = test_source_style();
        let state = VehicleState::at(42.0, 0.3, 0.01, 8.33);
        let (a, ma) = render(&track, &state, &style, 5);
        let (b, mb) = render(&track, &state, &style, 5);
        assert_eq!(a.data, b.data);
        assert_eq!(ma, mb);
        let (c, mc) = render(&track, &state, &style, 6);
        assert_ne!(a.data, c.data);
        assert_eq!(ma, mc, "mask never depends on the noise stream");
    }

    #[test]
    fn styles_differ_but_masks_match_for_equal_cameras() {
        let track = straight_track();
        let style_a = test_source_style();
        let mut cfg_b = style_a.config.clone();
        cfg_b.road_rgb = vec![[40, 42, 44]];
        cfg_b.line_rgb = [210, 200, 80];
        let style_b = cfg_b.build();
        let state = VehicleState::at(60.0, -0.4, 0.02, 8.33);
        let (ia, ma) = render(&track, &state, &style_a, 9);
        let (ib, mb) = render(&track, &state, &style_b, 9);
        assert_ne!(ia.data, ib.data);
        assert_eq!(ma, mb);
    }

    #[test]
    fn mask_centroid_moves_left_as_car_moves_right() {
        let track = straight_track();
        let style = test_source_style();
        let mut prev = f64::INFINITY;
        for &off in &[-1.0f64, -0.5, 0.0, 0.5, 1.0] {
            let state = VehicleState::at(50.0, -off, 0.0, 8.33);
            let (_, mask) = render(&track, &state, &style, 1);
            let c = mask_centroid_x(&mask, style.camera.width).expect("mask nonempty");
            assert!(c < prev, "centroid {c} at offset {off} (prev {prev})");
            prev = c;
        }
    }
}
