//! Intelligent Driver Model car-following acceleration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// IDM parameters of one driver.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Desired time headway (s).
    pub t_headway: f64,
    /// Jam gap (m).
    pub s0: f64,
    /// Maximum acceleration (m/s^2).
    pub a_max: f64,
    /// Comfortable deceleration (m/s^2).
    pub b_comf: f64,
    /// Acceleration exponent.
    pub delta_exp: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self { v0: 8.0, t_headway: 1.5, s0: 2.0, a_max: 3.0, b_comf: 2.0, delta_exp: 4.0 }
    }
}

impl IdmParams {
    /// Hard braking bound used when clamping and in emergencies.
    pub fn b_hard(&self) -> f64 {
        2.0 * self.b_comf
    }

    /// Gap at which the acceleration is exactly zero for a steady leader
    /// (closing speed zero). Diverges as `v` approaches `v0` (free flow).
    pub fn equilibrium_gap(&self, v: f64) -> f64 {
        (self.s0 + v * self.t_headway) / (1.0 - (v / self.v0).powf(self.delta_exp)).sqrt()
    }
}

/// A driver style: base IDM parameters plus a multiplicative jitter scale
/// applied per spawn.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HVProfile {
    pub idm: IdmParams,
    /// Relative half-width of the per-spawn uniform jitter.
    pub style_scale: f64,
}

impl Default for HVProfile {
    fn default() -> Self {
        Self { idm: IdmParams::default(), style_scale: 0.15 }
    }
}

impl HVProfile {
    /// Draw a jittered parameter set for one spawned driver.
    pub fn jittered(&self, rng: &mut ChaCha8Rng) -> IdmParams {
        let s = self.style_scale.clamp(0.0, 0.9);
        let mut jitter = |x: f64| x * rng.gen_range(1.0 - s..=1.0 + s);
        IdmParams {
            v0: jitter(self.idm.v0),
            t_headway: jitter(self.idm.t_headway),
            s0: jitter(self.idm.s0),
            a_max: jitter(self.idm.a_max),
            b_comf: jitter(self.idm.b_comf),
            delta_exp: self.idm.delta_exp,
        }
    }
}

/// IDM output; `emergency` marks a non-positive gap to a present leader.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdmResult {
    pub accel: f64,
    pub emergency: bool,
}

/// IDM acceleration for speed `v`, bumper gap `gap` (may be `+inf` for no
/// leader) and closing speed `closing` (positive when approaching).
pub fn idm_accel(v: f64, gap: f64, closing: f64, p: &IdmParams) -> IdmResult {
    if gap <= 0.0 {
        return IdmResult { accel: -p.b_hard(), emergency: true };
    }
    let free = 1.0 - (v / p.v0).powf(p.delta_exp);
    let accel = if gap.is_finite() {
        let s_star = p.s0 + (v * p.t_headway + v * closing / (2.0 * (p.a_max * p.b_comf).sqrt())).max(0.0);
        p.a_max * (free - (s_star / gap) * (s_star / gap))
    } else {
        p.a_max * free
    };
    IdmResult { accel: accel.clamp(-p.b_hard(), p.a_max), emergency: false }
}
