//! Closed-loop person following: pose estimator, per-output Kalman filters,
//! proportional velocity controller and first-order drone kinematics, driven
//! by a scripted subject path.
//!
//! World frame: x, y horizontal, z up. Drone frame: x forward, y left, z up.
//! The relative pose `(x, y, z, phi)` is the subject's head in the drone
//! frame and `phi = wrap(yaw_subject - yaw_drone - pi)`, 0 when the subject
//! faces the drone. The desired drone pose is `delta` metres in front of the
//! subject along its facing direction, at head height, looking at it.

mod kalman;
mod path;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{r2, regression_metrics};
use crate::quant::IntegerGraph;
use crate::tensor::Tensor;
use crate::zoo::{render, Camera, Network, OUTPUTS};

pub use kalman::{KalmanConfig, KalmanOutput, ScalarKalman};
pub use path::{Motion, PathConfig, Phase, SubjectPath, WorldPose, PATH_DURATION};

/// Wraps to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    if a > -PI && a <= PI {
        return a;
    }
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Pose estimate in the drone frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub phi: f64,
    pub timestamp: f64,
}

impl PoseEstimate {
    pub fn new(v: [f64; OUTPUTS], timestamp: f64) -> Self {
        Self {
            x: v[0],
            y: v[1],
            z: v[2],
            phi: wrap_angle(v[3]),
            timestamp,
        }
    }

    pub fn as_array(&self) -> [f64; OUTPUTS] {
        [self.x, self.y, self.z, self.phi]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite()) && self.timestamp.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Target distance to the subject.
    pub delta: f64,
    pub k_xy: f64,
    pub k_z: f64,
    pub k_yaw: f64,
    pub v_max: f64,
    pub vz_max: f64,
    pub yaw_rate_max: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            delta: 1.3,
            k_xy: 2.5,
            k_z: 1.5,
            k_yaw: 2.0,
            v_max: 1.5,
            vz_max: 1.0,
            yaw_rate_max: 2.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::InvalidArgument(format!("target distance must be positive, got {}", self.delta)));
        }
        if [self.k_xy, self.k_z, self.k_yaw].iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::InvalidArgument("controller gains must be finite and non-negative".into()));
        }
        if [self.v_max, self.vz_max, self.yaw_rate_max].iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidArgument("velocity limits must be positive".into()));
        }
        Ok(())
    }
}

/// Velocity setpoint in the drone frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub wz: f64,
}

fn sat(v: f64, lim: f64) -> f64 {
    v.clamp(-lim, lim)
}

pub fn velocity_command(pose: &PoseEstimate, cfg: &ControllerConfig) -> Command {
    let d = cfg.delta;
    let ex = pose.x - d * pose.phi.cos();
    let ey = pose.y - d * pose.phi.sin();
    Command {
        vx: sat(cfg.k_xy * ex, cfg.v_max),
        vy: sat(cfg.k_xy * ey, cfg.v_max),
        vz: sat(cfg.k_z * pose.z, cfg.vz_max),
        wz: sat(cfg.k_yaw * pose.y.atan2(pose.x), cfg.yaw_rate_max),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DroneConfig {
    /// Velocity tracking time constant (s).
    pub tau_v: f64,
    pub tau_yaw: f64,
}

impl Default for DroneConfig {
    fn default() -> Self {
        Self {
            tau_v: 0.15,
            tau_yaw: 0.1,
        }
    }
}

/// Position, yaw and world-frame velocities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DroneState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub wz: f64,
}

/// Velocity and displacement after `dt` of first-order tracking of `target`.
fn first_order(v0: f64, target: f64, tau: f64, dt: f64) -> (f64, f64) {
    if tau <= 0.0 {
        return (target, target * dt);
    }
    let e = (-dt / tau).exp();
    (target + (v0 - target) * e, target * dt + (v0 - target) * tau * (1.0 - e))
}

/// Exact integration of the first-order velocity response, the command held
/// in the world frame at the current yaw.
pub fn drone_step(s: &DroneState, cmd: &Command, cfg: &DroneConfig, dt: f64) -> Result<DroneState> {
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(Error::InvalidArgument(format!("drone step needs dt in (0, 0.1], got {dt}")));
    }
    let (c, sn) = (s.yaw.cos(), s.yaw.sin());
    let tx = c * cmd.vx - sn * cmd.vy;
    let ty = sn * cmd.vx + c * cmd.vy;
    let (vx, dx) = first_order(s.vx, tx, cfg.tau_v, dt);
    let (vy, dy) = first_order(s.vy, ty, cfg.tau_v, dt);
    let (vz, dz) = first_order(s.vz, cmd.vz, cfg.tau_v, dt);
    let (wz, dyaw) = first_order(s.wz, cmd.wz, cfg.tau_yaw, dt);
    Ok(DroneState {
        x: s.x + dx,
        y: s.y + dy,
        z: s.z + dz,
        yaw: wrap_angle(s.yaw + dyaw),
        vx,
        vy,
        vz,
        wz,
    })
}

/// Ground-truth pose of the subject in the drone frame.
pub fn relative_pose(d: &DroneState, s: &WorldPose) -> [f64; OUTPUTS] {
    let (dx, dy) = (s.x - d.x, s.y - d.y);
    let (c, sn) = (d.yaw.cos(), d.yaw.sin());
    [
        c * dx + sn * dy,
        -sn * dx + c * dy,
        s.z - d.z,
        wrap_angle(s.yaw - d.yaw - std::f64::consts::PI),
    ]
}

/// Where the drone should be: `(x, y, z, yaw)`.
pub fn desired_pose(s: &WorldPose, delta: f64) -> [f64; 4] {
    [
        s.x + delta * s.yaw.cos(),
        s.y + delta * s.yaw.sin(),
        s.z,
        wrap_angle(s.yaw + std::f64::consts::PI),
    ]
}

/// Horizontal distance between two poses.
pub fn e_xy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn e_theta(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Half-width of the subject used by the field-of-view rule (m).
const SUBJECT_HALF_WIDTH: f64 = 0.21;

/// True once no part of the subject is inside the horizontal field of view.
pub fn subject_lost(rel: &[f64; OUTPUTS], hfov_deg: f64) -> bool {
    let rho = rel[0].hypot(rel[1]);
    if rel[0] <= 0.05 {
        return true;
    }
    let bearing = rel[1].atan2(rel[0]).abs();
    bearing - (SUBJECT_HALF_WIDTH / rho).atan() > hfov_deg.to_radians() / 2.0
}

pub enum Estimator<'a> {
    /// Ground truth.
    Oracle,
    /// The same output every frame.
    Trivial([f64; OUTPUTS]),
    Float(&'a Network),
    Integer(&'a IntegerGraph),
}

impl Estimator<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Oracle => "oracle",
            Estimator::Trivial(_) => "trivial",
            Estimator::Float(_) => "float",
            Estimator::Integer(_) => "integer",
        }
    }

    fn input_hw(&self) -> Option<[usize; 2]> {
        match self {
            Estimator::Float(n) => Some([n.arch.input[1], n.arch.input[2]]),
            Estimator::Integer(g) => Some([g.input[1], g.input[2]]),
            _ => None,
        }
    }

    fn estimate(&self, truth: &[f64; OUTPUTS], cam: Option<&Camera>, rng: &mut ChaCha8Rng) -> Result<[f64; OUTPUTS]> {
        let mut image = || render(cam.expect("camera for image models"), truth, rng);
        match self {
            Estimator::Oracle => Ok(*truth),
            Estimator::Trivial(c) => Ok(*c),
            Estimator::Float(net) => {
                let [c, h, w] = net.arch.input;
                let y = net.infer(Tensor::new([1, c, h, w], image())?)?;
                let d = y.data();
                Ok([d[0], d[1], d[2], d[3]].map(f64::from))
            }
            Estimator::Integer(g) => {
                let (codes, _) = g.run(&image())?;
                if codes.len() != OUTPUTS {
                    return Err(Error::InvalidArch(format!("graph has {} outputs", codes.len())));
                }
                Ok([0, 1, 2, 3].map(|k| codes[k] as f64 * g.output_eps))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub duration: f64,
    /// Control loop period (s).
    pub dt: f64,
    /// Estimator frame rate; estimates are held between frames.
    pub estimate_hz: f64,
    pub hfov_deg: f64,
    pub controller: ControllerConfig,
    pub kalman: KalmanConfig,
    pub drone: DroneConfig,
    pub path: PathConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: PATH_DURATION,
            dt: 0.01,
            estimate_hz: 50.0,
            hfov_deg: 87.0,
            controller: ControllerConfig::default(),
            kalman: KalmanConfig::default(),
            drone: DroneConfig::default(),
            path: PathConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        if !(self.dt > 0.0 && self.dt <= 0.1) {
            return Err(Error::InvalidArgument(format!("dt must be in (0, 0.1], got {}", self.dt)));
        }
        if !(self.duration > 0.0 && self.duration <= PATH_DURATION) {
            return Err(Error::InvalidArgument(format!("duration must be in (0, {PATH_DURATION}]")));
        }
        if !(self.estimate_hz > 0.0) {
            return Err(Error::InvalidArgument("estimator rate must be positive".into()));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(Error::InvalidArgument("field of view must be in (0, 180) degrees".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub subject: [f64; 4],
    pub drone: [f64; 4],
    pub desired: [f64; 4],
    pub truth: [f64; OUTPUTS],
    pub raw: [f64; OUTPUTS],
    pub filtered: [f64; OUTPUTS],
    pub command: [f64; 4],
    /// A new estimate arrived on this tick.
    pub fresh: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub duration: f64,
    pub flight_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    /// Of the raw estimates against ground truth.
    pub mae: [f64; OUTPUTS],
    pub r2: [f64; OUTPUTS],
    pub e_xy: f64,
    pub e_theta: f64,
    /// Percent of the path flown before losing the subject.
    pub completion: f64,
    pub flight_time: f64,
}

pub fn compute_metrics(trace: &Trace) -> Result<SimMetrics> {
    if trace.rows.is_empty() {
        return Err(Error::Simulation("empty trace".into()));
    }
    let fresh: Vec<&TraceRow> = trace.rows.iter().filter(|r| r.fresh).collect();
    let (mae, r2v) = if fresh.is_empty() {
        ([f64::NAN; OUTPUTS], [f64::NAN; OUTPUTS])
    } else {
        let pred: Vec<_> = fresh.iter().map(|r| r.raw).collect();
        let truth: Vec<_> = fresh.iter().map(|r| r.truth).collect();
        let mut m = regression_metrics(&pred, &truth)?;
        // angular error for phi
        let d: Vec<f64> = fresh.iter().map(|r| wrap_angle(r.raw[3] - r.truth[3]).abs()).collect();
        m.mae[3] = d.iter().sum::<f64>() / d.len() as f64;
        let unwrapped: Vec<f64> = fresh.iter().map(|r| r.truth[3] + wrap_angle(r.raw[3] - r.truth[3])).collect();
        let t3: Vec<f64> = fresh.iter().map(|r| r.truth[3]).collect();
        m.r2[3] = r2(&unwrapped, &t3);
        (m.mae, m.r2)
    };
    let n = trace.rows.len() as f64;
    Ok(SimMetrics {
        mae,
        r2: r2v,
        e_xy: trace.rows.iter().map(|r| e_xy(&r.drone, &r.desired)).sum::<f64>() / n,
        e_theta: trace.rows.iter().map(|r| e_theta(r.drone[3], r.desired[3])).sum::<f64>() / n,
        completion: (100.0 * trace.flight_time / trace.duration).clamp(0.0, 100.0),
        flight_time: trace.flight_time,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub estimator: String,
    pub metrics: SimMetrics,
    pub trace: Trace,
    /// Time the subject left the field of view.
    pub lost_at: Option<f64>,
    /// Estimator error that ended the run early.
    pub aborted: Option<String>,
}

/// Fixed-rate loop: estimate (when a frame is due), filter, control, step
/// the drone. Stops at `cfg.duration` or when the subject leaves the field
/// of view. Image models see renders of the true relative pose drawn with
/// `noise_seed`.
pub fn run_episode(est: &Estimator, cfg: &SimConfig, noise_seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let path = SubjectPath::new(&cfg.path)?;
    let cam = est.input_hw().map(|[h, w]| Camera {
        h,
        w,
        hfov_deg: cfg.hfov_deg,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut filters = cfg.kalman.filters()?;
    let start = path.pose(0.0)?;
    let des = desired_pose(&start, cfg.controller.delta);
    let mut drone = DroneState {
        x: des[0],
        y: des[1],
        z: des[2],
        yaw: des[3],
        ..DroneState::default()
    };
    let steps = (cfg.duration / cfg.dt).round() as usize;
    let period = 1.0 / cfg.estimate_hz;
    let (mut next_est, mut last_est) = (0.0, -period);
    let mut raw = [f64::NAN; OUTPUTS];
    let mut filtered = PoseEstimate::new([cfg.controller.delta, 0.0, 0.0, 0.0], 0.0);
    let mut rows = Vec::with_capacity(steps);
    let (mut lost_at, mut aborted) = (None, None);
    let mut flight_time = cfg.duration;
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let subject = path.pose(t)?;
        let truth = relative_pose(&drone, &subject);
        if subject_lost(&truth, cfg.hfov_deg) {
            lost_at = Some(t);
            flight_time = t;
            break;
        }
        let fresh = t + 1e-9 >= next_est;
        if fresh {
            match est.estimate(&truth, cam.as_ref(), &mut rng) {
                Ok(v) => raw = v,
                Err(e) => {
                    aborted = Some(e.to_string());
                    flight_time = t;
                    break;
                }
            }
            let dt_est = t - last_est;
            let mut f = [0.0; OUTPUTS];
            for (j, kf) in filters.iter_mut().enumerate() {
                f[j] = kf.step(raw[j], dt_est)?.value;
            }
            filtered = PoseEstimate::new(f, t);
            last_est = t;
            next_est += period;
        }
        let cmd = velocity_command(&filtered, &cfg.controller);
        rows.push(TraceRow {
            t,
            subject: [subject.x, subject.y, subject.z, subject.yaw],
            drone: [drone.x, drone.y, drone.z, drone.yaw],
            desired: desired_pose(&subject, cfg.controller.delta),
            truth,
            raw,
            filtered: filtered.as_array(),
            command: [cmd.vx, cmd.vy, cmd.vz, cmd.wz],
            fresh,
        });
        drone = drone_step(&drone, &cmd, &cfg.drone, cfg.dt)?;
    }
    let trace = Trace {
        rows,
        duration: cfg.duration,
        flight_time,
    };
    let metrics = if trace.rows.is_empty() {
        SimMetrics {
            mae: [f64::NAN; OUTPUTS],
            r2: [f64::NAN; OUTPUTS],
            e_xy: f64::NAN,
            e_theta: f64::NAN,
            completion: 0.0,
            flight_time: 0.0,
        }
    } else {
        compute_metrics(&trace)?
    };
    Ok(Episode {
        estimator: est.name().into(),
        metrics,
        trace,
        lost_at,
        aborted,
    })
}

pub const TRACE_HEADER: [&str; 30] = [
    "t", "subject_x", "subject_y", "subject_z", "subject_yaw", "drone_x", "drone_y", "drone_z", "drone_yaw",
    "desired_x", "desired_y", "desired_z", "desired_yaw", "true_x", "true_y", "true_z", "true_phi", "raw_x",
    "raw_y", "raw_z", "raw_phi", "filt_x", "filt_y", "filt_z", "filt_phi", "cmd_vx", "cmd_vy", "cmd_vz",
    "cmd_wz", "fresh",
];

pub fn write_trace_csv<W: Write>(w: W, trace: &Trace) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_HEADER)?;
    for r in &trace.rows {
        let mut rec = vec![format!("{:.3}", r.t)];
        for block in [&r.subject, &r.drone, &r.desired, &r.truth, &r.raw, &r.filtered, &r.command] {
            rec.extend(block.iter().map(|v| format!("{v:.6}")));
        }
        rec.push(u8::from(r.fresh).to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_trace_csv(path: &Path, trace: &Trace) -> Result<()> {
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, trace)?;
    crate::artifact::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(7.0) - (7.0 - 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn desired_pose_gives_zero_command() {
        let cfg = ControllerConfig::default();
        let p = PoseEstimate::new([cfg.delta, 0.0, 0.0, 0.0], 0.0);
        assert_eq!(velocity_command(&p, &cfg), Command::default());
    }

    #[test]
    fn farther_subject_means_forward() {
        let cfg = ControllerConfig::default();
        let c = velocity_command(&PoseEstimate::new([cfg.delta + 0.5, 0.0, 0.0, 0.0], 0.0), &cfg);
        assert!(c.vx > 0.0);
        assert_eq!(c.wz, 0.0);
    }

    #[test]
    fn relative_pose_at_the_desired_point() {
        let s = WorldPose {
            x: 1.0,
            y: 2.0,
            z: 1.7,
            yaw: 0.7,
        };
        let d = desired_pose(&s, 1.3);
        let drone = DroneState {
            x: d[0],
            y: d[1],
            z: d[2],
            yaw: d[3],
            ..DroneState::default()
        };
        let r = relative_pose(&drone, &s);
        assert!((r[0] - 1.3).abs() < 1e-12 && r[1].abs() < 1e-12 && r[2] == 0.0 && r[3].abs() < 1e-12);
    }

    #[test]
    fn zero_command_from_rest() {
        let s = DroneState {
            x: 1.0,
            yaw: 0.3,
            ..DroneState::default()
        };
        let n = drone_step(&s, &Command::default(), &DroneConfig::default(), 0.05).unwrap();
        assert_eq!(n, s);
        assert!(drone_step(&s, &Command::default(), &DroneConfig::default(), 0.2).is_err());
    }

    #[test]
    fn lost_when_behind_or_wide() {
        assert!(subject_lost(&[-0.5, 0.0, 0.0, 0.0], 87.0));
        assert!(!subject_lost(&[1.3, 0.0, 0.0, 0.0], 87.0));
        assert!(subject_lost(&[1.0, 2.0, 0.0, 0.0], 87.0));
        assert!(!subject_lost(&[1.0, 0.9, 0.0, 0.0], 87.0));
    }
}
