use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::wrap_angle;

/// Constant-velocity Kalman filter on one scalar output. The process noise is
/// a white acceleration of variance `q`; observations see the value with
/// variance `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarKalman {
    pub value: f64,
    pub rate: f64,
    /// Covariance of `(value, rate)`.
    pub p: [[f64; 2]; 2],
    pub q: f64,
    pub r: f64,
    /// Innovations and the value are wrapped to `(-pi, pi]`.
    pub angular: bool,
    initialized: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanOutput {
    pub value: f64,
    /// False when the observation was not finite and only the prediction ran.
    pub updated: bool,
}

impl ScalarKalman {
    pub fn new(q: f64, r: f64, angular: bool) -> Result<Self> {
        if !(q >= 0.0 && q.is_finite() && r > 0.0) {
            return Err(Error::InvalidArgument(format!("kalman needs q >= 0 and r > 0, got q={q} r={r}")));
        }
        Ok(Self {
            value: 0.0,
            rate: 0.0,
            p: [[r.min(1e6), 0.0], [0.0, 1.0]],
            q,
            r,
            angular,
            initialized: false,
        })
    }

    pub fn variance(&self) -> f64 {
        self.p[0][0]
    }

    fn predict(&mut self, dt: f64) {
        self.value += self.rate * dt;
        if self.angular {
            self.value = wrap_angle(self.value);
        }
        let [[a, b], [c, d]] = self.p;
        // F P F^T with F = [[1, dt], [0, 1]]
        let pa = a + dt * (b + c) + dt * dt * d;
        let pb = b + dt * d;
        let pc = c + dt * d;
        let q = self.q;
        self.p = [
            [pa + q * dt.powi(4) / 4.0, pb + q * dt.powi(3) / 2.0],
            [pc + q * dt.powi(3) / 2.0, d + q * dt * dt],
        ];
    }

    pub fn step(&mut self, obs: f64, dt: f64) -> Result<KalmanOutput> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("kalman step needs dt > 0, got {dt}")));
        }
        if !self.initialized {
            if !obs.is_finite() {
                return Ok(KalmanOutput {
                    value: self.value,
                    updated: false,
                });
            }
            self.value = obs;
            self.initialized = true;
            return Ok(KalmanOutput {
                value: obs,
                updated: true,
            });
        }
        self.predict(dt);
        if !obs.is_finite() {
            return Ok(KalmanOutput {
                value: self.value,
                updated: false,
            });
        }
        let [[a, b], [c, d]] = self.p;
        let s = a + self.r;
        let (k0, k1) = (a / s, c / s);
        let mut innov = obs - self.value;
        if self.angular {
            innov = wrap_angle(innov);
        }
        self.value += k0 * innov;
        self.rate += k1 * innov;
        if self.angular {
            self.value = wrap_angle(self.value);
        }
        self.p = [[(1.0 - k0) * a, (1.0 - k0) * b], [c - k1 * a, d - k1 * b]];
        Ok(KalmanOutput {
            value: self.value,
            updated: true,
        })
    }
}

/// One filter per pose output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    pub q: [f64; 4],
    pub r: [f64; 4],
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            q: [4.0, 4.0, 1.0, 4.0],
            r: [0.02, 0.01, 0.005, 0.05],
        }
    }
}

impl KalmanConfig {
    pub fn filters(&self) -> Result<[ScalarKalman; 4]> {
        Ok([
            ScalarKalman::new(self.q[0], self.r[0], false)?,
            ScalarKalman::new(self.q[1], self.r[1], false)?,
            ScalarKalman::new(self.q[2], self.r[2], false)?,
            ScalarKalman::new(self.q[3], self.r[3], true)?,
        ])
    }
}
