//! Deterministic 2D driving world: procedural tracks, kinematic bicycle,
//! flat-ground perspective renderer with per-domain styles, pure-pursuit
//! expert and a proportional speed controller.
//!
//! Conventions (used crate-wide):
//! - World frame: x east, y north, heading `yaw` counterclockwise from +x.
//! - Steering command in [-1, 1], positive turns the car to the RIGHT.
//! - Lateral offset is positive when the car sits RIGHT of the lane
//!   center; LDL = clamp(2 * offset / lane_width, -1, 1).
//! - Recorded yaw rate is positive for rightward turns, i.e.
//!   `yr = speed * tan(command * delta_max) / wheelbase`.

pub mod expert;
pub mod render;
pub mod track;
pub mod vehicle;

pub use expert::{expert_steer, ExpertParams};
pub use render::{render, CameraSpec, DomainStyle, OffroadTexture, StyleConfig};
pub use track::{generate_track, lateral_offset, CourseProfile, CourseSpec, Location, Track};
pub use vehicle::{speed_control, step_vehicle, SpeedController, VehicleParams, VehicleState};

use serde::{Deserialize, Serialize};

/// World-level constants shared by collection and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Simulation step, seconds (10 Hz sampling).
    pub dt: f64,
    /// Lane width, meters.
    pub lane_width: f64,
    /// Track length, meters.
    pub track_length: f64,
    /// Curvature magnitude cap for generated tracks, 1/m.
    pub curvature_max: f64,
    /// |curvature| at or above this counts as "sharp", 1/m.
    pub sharp_curvature: f64,
    /// Target driving speed, km/h.
    pub speed_kmh: f64,
    pub vehicle: VehicleParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.1,
            lane_width: 3.5,
            track_length: 500.0,
            curvature_max: 0.08,
            sharp_curvature: 0.02,
            speed_kmh: 30.0,
            vehicle: VehicleParams::default(),
        }
    }
}

impl SimConfig {
    pub fn speed_ms(&self) -> f64 {
        self.speed_kmh / 3.6
    }
}
