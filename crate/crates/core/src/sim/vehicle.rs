//! Kinematic bicycle model and proportional speed control.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Wheelbase, meters.
    pub wheelbase: f64,
    /// Maximum wheel angle, degrees; command 1.0 maps to this.
    pub delta_max_deg: f64,
    /// Acceleration clamp for the speed controller, m/s^2.
    pub accel_max: f64,
    /// Speed-controller proportional gain, 1/s.
    pub speed_kp: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            wheelbase: 2.5,
            delta_max_deg: 30.0,
            accel_max: 3.0,
            speed_kp: 1.0,
        }
    }
}

impl VehicleParams {
    pub fn delta_max(&self) -> f64 {
        self.delta_max_deg.to_radians()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Heading, counterclockwise from +x, wrapped to (-pi, pi].
    pub yaw: f64,
    /// Speed, m/s, never negative.
    pub speed: f64,
    /// Yaw rate over the last step, positive for rightward turns.
    pub yaw_rate: f64,
}

impl VehicleState {
    pub fn at(x: f64, y: f64, yaw: f64, speed: f64) -> Self {
        VehicleState {
            x,
            y,
            yaw: wrap_angle(yaw),
            speed: speed.max(0.0),
            yaw_rate: 0.0,
        }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    } else if a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// One explicit-Euler step. `command` in [-1, 1] (positive = right),
/// `accel` in m/s^2 applied after the pose integration.
pub fn step_vehicle(
    state: &VehicleState,
    command: f64,
    accel: f64,
    dt: f64,
    vp: &VehicleParams,
) -> VehicleState {
    debug_assert!(dt > 0.0);
    let cmd = command.clamp(-1.0, 1.0);
    let delta = cmd * vp.delta_max();
    // Right-positive yaw rate; the world heading integrates its negative.
    let yaw_rate = state.speed * delta.tan() / vp.wheelbase;
    let x = state.x + state.speed * state.yaw.cos() * dt;
    let y = state.y + state.speed * state.yaw.sin() * dt;
    let yaw = wrap_angle(state.yaw - yaw_rate * dt);
    let speed = (state.speed + accel * dt).max(0.0);
    VehicleState {
        x,
        y,
        yaw,
        speed,
        yaw_rate,
    }
}

/// Proportional speed controller, clamped.
pub fn speed_control(state: &VehicleState, target_speed: f64, vp: &VehicleParams) -> f64 {
    debug_assert!(target_speed > 0.0);
    (vp.speed_kp * (target_speed - state.speed)).clamp(-vp.accel_max, vp.accel_max)
}

/// Convenience wrapper bundling the target speed.
#[derive(Debug, Clone, Copy)]
pub struct SpeedController {
    pub target: f64,
}

impl SpeedController {
    pub fn accel(&self, state: &VehicleState, vp: &VehicleParams) -> f64 {
        speed_control(state, self.target, vp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vp() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn zero_command_goes_straight() {
        let s0 = VehicleState::at(0.0, 0.0, 0.0, 8.0);
        let s1 = step_vehicle(&s0, 0.0, 0.0, 0.1, &vp());
        assert_eq!(s1.y, 0.0);
        assert_eq!(s1.yaw_rate, 0.0);
        assert!((s1.x - 0.8).abs() < 1e-12);
    }

    #[test]
    fn opposite_commands_mirror_yaw_rate() {
        let s0 = VehicleState::at(0.0, 0.0, 0.0, 8.0);
        let r = step_vehicle(&s0, 1.0, 0.0, 0.1, &vp());
        let l = step_vehicle(&s0, -1.0, 0.0, 0.1, &vp());
        assert_eq!(r.yaw_rate, -l.yaw_rate);
        assert!(r.yaw_rate > 0.0, "right turn is positive yaw rate");
    }

    #[test]
    fn constant_command_traces_expected_circle_radius() {
        // radius = wheelbase / tan(command * delta_max)
        let cmd = 0.35;
        let expected_r = vp().wheelbase / (cmd * vp().delta_max()).tan();
        let dt = 0.01;
        let speed = 8.0;
        let mut s = VehicleState::at(0.0, 0.0, 0.0, speed);
        let mut pts = Vec::new();
        for _ in 0..((2.0 * std::f64::consts::PI * expected_r / speed / dt) as usize) {
            pts.push((s.x, s.y));
            s = step_vehicle(&s, cmd, 0.0, dt, &vp());
        }
        // Fit circle center as mean of points (full revolution), then
        // compare mean radius to the closed form.
        let cx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let cy = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let mean_r = pts
            .iter()
            .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
            .sum::<f64>()
            / pts.len() as f64;
        assert!(
            (mean_r - expected_r).abs() / expected_r < 0.01,
            "mean radius {mean_r}, expected {expected_r}"
        );
    }

    #[test]
    fn speed_controller_settles_without_overshoot() {
        let target = 30.0 / 3.6;
        let dt = 0.1;
        let mut s = VehicleState::at(0.0, 0.0, 0.0, 0.0);
        let mut max_speed: f64 = 0.0;
        let mut settle_t = None;
        let mut prev = 0.0;
        for k in 0..600 {
            let a = speed_control(&s, target, &vp());
            s = step_vehicle(&s, 0.0, a, dt, &vp());
            max_speed = max_speed.max(s.speed);
            assert!(s.speed >= prev - 1e-12, "monotone approach from below");
            prev = s.speed;
            if settle_t.is_none() && (s.speed - target).abs() <= 0.02 * target {
                settle_t = Some(k as f64 * dt);
            }
        }
        assert!(max_speed <= target * 1.05, "overshoot beyond 5%");
        let t = settle_t.expect("must settle");
        assert!(t <= 5.0, "settled at {t} s");
        // 30 km/h is 8.333 m/s.
        assert!((s.speed - 8.3333).abs() < 0.02 * 8.3333);
    }

    #[test]
    fn at_target_speed_acceleration_is_zero() {
        let s = VehicleState::at(0.0, 0.0, 0.0, 8.0);
        assert_eq!(speed_control(&s, 8.0, &vp()), 0.0);
    }
}
