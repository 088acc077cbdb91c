//! Pure-pursuit expert that tracks the lane center.

use serde::{Deserialize, Serialize};

use crate::sim::track::Track;
use crate::sim::vehicle::{VehicleParams, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    /// Lookahead distance along the centerline, meters.
    pub lookahead: f64,
}

impl Default for ExpertParams {
    fn default() -> Self {
        ExpertParams { lookahead: 6.0 }
    }
}

/// Steering command in [-1, 1] toward the lookahead point on the lane
/// center. Positive command turns right.
pub fn expert_steer(
    track: &Track,
    state: &VehicleState,
    ep: &ExpertParams,
    vp: &VehicleParams,
    hint: Option<usize>,
) -> (f64, usize) {
    expert_steer_path(track, state, ep, vp, hint, &|_| 0.0)
}

/// Pure pursuit toward a laterally displaced path: the target point sits
/// `offset_at(s)` meters right of the centerline. Drives the pre-defined
/// weave paths used during data collection.
pub fn expert_steer_path(
    track: &Track,
    state: &VehicleState,
    ep: &ExpertParams,
    vp: &VehicleParams,
    hint: Option<usize>,
    offset_at: &dyn Fn(f64) -> f64,
) -> (f64, usize) {
    debug_assert!(ep.lookahead > 0.0);
    let loc = track.locate(state.x, state.y, hint);
    let target_s = (loc.s + ep.lookahead).min(track.length);
    let target_point = track.point_at(target_s);
    let offset = offset_at(target_s);
    let (sin_h, cos_h) = target_point.heading.sin_cos();
    let target = (
        target_point.x + offset * sin_h,
        target_point.y - offset * cos_h,
    );

    // Target in the vehicle frame (x forward, y left).
    let dx = target.0 - state.x;
    let dy = target.1 - state.y;
    let (sin_yaw, cos_yaw) = state.yaw.sin_cos();
    let lx = cos_yaw * dx + sin_yaw * dy;
    let ly = -sin_yaw * dx + cos_yaw * dy;
    let dist = (lx * lx + ly * ly).sqrt().max(1e-6);
    let alpha = ly.atan2(lx);

    // Pure-pursuit curvature (counterclockwise positive), mapped through
    // the wheel-angle limit into the right-positive command convention.
    let kappa = 2.0 * alpha.sin() / dist;
    let delta_ccw = (kappa * vp.wheelbase).atan();
    let command = (-delta_ccw / vp.delta_max()).clamp(-1.0, 1.0);
    (command, loc.index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::track::{generate_track, lateral_offset, CourseProfile, Segment, Track};
    use crate::sim::vehicle::{speed_control, step_vehicle};
    use crate::sim::SimConfig;

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
    fn centered_on_straight_road_commands_zero() {
        let track = straight_track();
        let state = VehicleState::at(50.0, 0.0, 0.0, 8.33);
        let (cmd, _) = expert_steer(&track, &state, &ExpertParams::default(), &VehicleParams::default(), None);
        assert!(cmd.abs() < 1e-6, "cmd = {cmd}");
    }

    #[test]
    fn offset_right_commands_left() {
        let track = straight_track();
        // Right of the centerline (negative world y on an eastbound track).
        let state = VehicleState::at(50.0, -1.0, 0.0, 8.33);
        let (cmd, _) = expert_steer(&track, &state, &ExpertParams::default(), &VehicleParams::default(), None);
        assert!(cmd < -1e-3, "expected leftward (negative) command, got {cmd}");
    }

    #[test]
    fn expert_keeps_every_course_profile_inside_a_tight_corridor() {
        let cfg = SimConfig::default();
        let ep = ExpertParams::default();
        for (profile, seed) in [
            (CourseProfile::StraightStyled, 101u64),
            (CourseProfile::Gentle, 102),
            (CourseProfile::Mixed, 103),
            (CourseProfile::MostlySharp, 104),
        ] {
            let track = generate_track(profile, seed, &cfg).unwrap();
            let (x, y, yaw) = track.pose_at(2.0, 0.0);
            let mut state = VehicleState::at(x, y, yaw, cfg.speed_ms());
            let mut hint = None;
            let mut max_ldl: f64 = 0.0;
            for _ in 0..20_000 {
                let (loc, ldl, _) = lateral_offset(&track, state.x, state.y, hint);
                max_ldl = max_ldl.max(ldl.abs());
                if loc.s >= track.length - 2.0 {
                    break;
                }
                let (cmd, idx) = expert_steer(&track, &state, &ep, &cfg.vehicle, hint);
                hint = Some(idx);
                let accel = speed_control(&state, cfg.speed_ms(), &cfg.vehicle);
                state = step_vehicle(&state, cmd, accel, cfg.dt, &cfg.vehicle);
            }
            assert!(
                max_ldl < 0.3,
                "{profile:?}: expert reached |ldl| {max_ldl:.3}"
            );
        }
    }
}
