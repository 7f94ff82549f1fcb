//! Scripted subject path: 50 s in 8 phases, every phase boundary on a
//! metronome beat and the walking speed constant between beats.

use serde::{Deserialize, Serialize};

use super::wrap_angle;
use crate::error::{Error, Result};

/// World pose of the subject: head position and facing direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "motion", rename_all = "snake_case")]
pub enum Motion {
    Stand,
    /// Straight walk at `heading + direction`, facing `heading`.
    Walk { direction: f64, speed: f64 },
    /// Forward walk while turning.
    Arc { speed: f64, turn_rate: f64 },
    Rotate { rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub start: f64,
    pub end: f64,
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub start: WorldPose,
    /// Metronome period in seconds.
    pub beat: f64,
    pub walk_speed: f64,
    pub turn_rate: f64,
    pub spin_rate: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            start: WorldPose {
                x: 0.0,
                y: 0.0,
                z: 1.7,
                yaw: std::f64::consts::PI,
            },
            beat: 0.5,
            walk_speed: 0.3,
            turn_rate: 0.15,
            spin_rate: 0.35,
        }
    }
}

pub const PATH_DURATION: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectPath {
    pub phases: Vec<Phase>,
    /// Pose at the start of each phase.
    starts: Vec<WorldPose>,
    pub beat: f64,
}

fn advance(p: WorldPose, m: Motion, dt: f64) -> WorldPose {
    match m {
        Motion::Stand => p,
        Motion::Walk { direction, speed } => {
            let a = p.yaw + direction;
            WorldPose {
                x: p.x + speed * dt * a.cos(),
                y: p.y + speed * dt * a.sin(),
                ..p
            }
        }
        Motion::Arc { speed, turn_rate } => {
            let yaw = p.yaw + turn_rate * dt;
            let (dx, dy) = if turn_rate == 0.0 {
                (speed * dt * p.yaw.cos(), speed * dt * p.yaw.sin())
            } else {
                let r = speed / turn_rate;
                (r * (yaw.sin() - p.yaw.sin()), r * (p.yaw.cos() - yaw.cos()))
            };
            WorldPose {
                x: p.x + dx,
                y: p.y + dy,
                yaw: wrap_angle(yaw),
                ..p
            }
        }
        Motion::Rotate { rate } => WorldPose {
            yaw: wrap_angle(p.yaw + rate * dt),
            ..p
        },
    }
}

impl SubjectPath {
    pub fn new(cfg: &PathConfig) -> Result<Self> {
        if !(cfg.beat > 0.0 && cfg.walk_speed >= 0.0) {
            return Err(Error::InvalidArgument("path needs a positive beat and non-negative speed".into()));
        }
        use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
        let v = cfg.walk_speed;
        let plan = [
            ("stand", 4.0, Motion::Stand),
            ("walk_forward", 6.0, Motion::Walk { direction: 0.0, speed: v }),
            ("walk_backward", 6.0, Motion::Walk { direction: PI, speed: v }),
            ("sidestep_left", 6.0, Motion::Walk { direction: FRAC_PI_2, speed: v }),
            ("sidestep_right", 6.0, Motion::Walk { direction: -FRAC_PI_2, speed: v }),
            ("diagonal", 6.0, Motion::Walk { direction: FRAC_PI_4, speed: v }),
            (
                "curve",
                10.0,
                Motion::Arc {
                    speed: v,
                    turn_rate: cfg.turn_rate,
                },
            ),
            ("rotate", 6.0, Motion::Rotate { rate: cfg.spin_rate }),
        ];
        let mut phases = Vec::with_capacity(plan.len());
        let mut starts = Vec::with_capacity(plan.len());
        let (mut t, mut pose) = (0.0, cfg.start);
        for (name, len, motion) in plan {
            let beats = len / cfg.beat;
            if (beats - beats.round()).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("phase `{name}` is not a whole number of beats")));
            }
            phases.push(Phase {
                name: name.into(),
                start: t,
                end: t + len,
                motion,
            });
            starts.push(pose);
            pose = advance(pose, motion, len);
            t += len;
        }
        debug_assert!((t - PATH_DURATION).abs() < 1e-9);
        Ok(Self {
            phases,
            starts,
            beat: cfg.beat,
        })
    }

    pub fn duration(&self) -> f64 {
        self.phases.last().map_or(0.0, |p| p.end)
    }

    pub fn phase_at(&self, t: f64) -> Result<usize> {
        if !(0.0..=self.duration()).contains(&t) {
            return Err(Error::Simulation(format!("time {t} outside the {} s path", self.duration())));
        }
        Ok(self.phases.iter().position(|p| t < p.end).unwrap_or(self.phases.len() - 1))
    }

    pub fn pose(&self, t: f64) -> Result<WorldPose> {
        let i = self.phase_at(t)?;
        let ph = &self.phases[i];
        Ok(advance(self.starts[i], ph.motion, t - ph.start))
    }
}
