//! Lorenz system right-hand side, Jacobians and RK4 integration.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Phase-space state (x, y, z).
pub type State = Vector3<f64>;

/// Parameters of the Lorenz system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams {
    pub s: f64,
    pub r: f64,
    pub b: f64,
}

impl Default for LorenzParams {
    /// Canonical chaotic regime: s = 10, r = 28, b = 8/3.
    fn default() -> Self {
        Self {
            s: 10.0,
            r: 28.0,
            b: 8.0 / 3.0,
        }
    }
}

impl LorenzParams {
    pub fn with_r(r: f64) -> Self {
        Self {
            r,
            ..Self::default()
        }
    }

    /// Nontrivial fixed point (√(b(r−1)), √(b(r−1)), r−1) for r > 1.
    pub fn fixed_point(&self) -> State {
        let c = (self.b * (self.r - 1.0)).sqrt();
        Vector3::new(c, c, self.r - 1.0)
    }
}

/// Which system parameter a sensitivity is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    S,
    R,
    B,
}

impl FromStr for Param {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(Param::S),
            "r" => Ok(Param::R),
            "b" => Ok(Param::B),
            other => Err(Error::UnknownParameter(other.to_string())),
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Param::S => "s",
            Param::R => "r",
            Param::B => "b",
        })
    }
}

/// Time-discretized solution u_0..u_m with uniform step `dt`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub dt: f64,
    pub t0: f64,
}

impl Trajectory {
    pub fn new(states: Vec<State>, dt: f64, t0: f64) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: states.len(),
            });
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { states, dt, t0 })
    }

    /// Number of time steps m (one less than the number of nodes).
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// Span T = m * dt.
    pub fn total_time(&self) -> f64 {
        self.steps() as f64 * self.dt
    }
}

/// Lorenz right-hand side f(u) = (s(y−x), x(r−z)−y, xy−bz).
pub fn rhs(u: &State, p: &LorenzParams) -> State {
    Vector3::new(
        p.s * (u.y - u.x),
        u.x * (p.r - u.z) - u.y,
        u.x * u.y - p.b * u.z,
    )
}

/// Jacobian ∂f/∂u.
pub fn jacobian_u(u: &State, p: &LorenzParams) -> Matrix3<f64> {
    Matrix3::new(
        -p.s, p.s, 0.0, //
        p.r - u.z, -1.0, -u.x, //
        u.y, u.x, -p.b,
    )
}

/// Parameter Jacobian column ∂f/∂ξ for ξ ∈ {s, r, b}.
///
/// None of the three columns depends on the parameter values themselves,
/// so only the state is taken.
pub fn jacobian_xi(u: &State, which: Param) -> State {
    match which {
        Param::S => Vector3::new(u.y - u.x, 0.0, 0.0),
        Param::R => Vector3::new(0.0, u.x, 0.0),
        Param::B => Vector3::new(0.0, 0.0, -u.z),
    }
}

/// One classical 4-stage Runge-Kutta step for an autonomous system.
pub fn rk4_generic<F: Fn(&State) -> State>(f: F, u: &State, dt: f64) -> State {
    let k1 = f(u);
    let k2 = f(&(u + 0.5 * dt * k1));
    let k3 = f(&(u + 0.5 * dt * k2));
    let k4 = f(&(u + dt * k3));
    u + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// One RK4 step of the Lorenz system.
pub fn rk4_step(u: &State, dt: f64, p: &LorenzParams) -> State {
    rk4_generic(|v| rhs(v, p), u, dt)
}

/// Deterministic spin-up initial condition, uniform in [-10, 10]^3.
pub fn spinup_state(seed: u64) -> State {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Vector3::new(
        rng.gen_range(-10.0..10.0),
        rng.gen_range(-10.0..10.0),
        rng.gen_range(-10.0..10.0),
    )
}

/// Integrates `spinup` time units (discarded), then records `steps` RK4 steps.
///
/// Fails fast on the first non-finite state, identifying the step index
/// (spin-up steps count negatively from the recorded range, i.e. the reported
/// index is the recorded step for the recording phase and the spin-up step
/// for the spin-up phase).
pub fn integrate(
    u0: State,
    dt: f64,
    steps: usize,
    spinup: f64,
    p: &LorenzParams,
) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if spinup < 0.0 {
        return Err(Error::Config(format!(
            "spinup must be nonnegative, got {spinup}"
        )));
    }

    let mut u = u0;
    let spinup_steps = (spinup / dt).round() as usize;
    for step in 0..spinup_steps {
        u = rk4_step(&u, dt, p);
        if !u.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
    }

    let mut states = Vec::with_capacity(steps + 1);
    states.push(u);
    for step in 0..steps {
        u = rk4_step(&u, dt, p);
        if !u.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        states.push(u);
    }
    Trajectory::new(states, dt, 0.0)
}

/// Spin-up trajectory from the seeded random initial condition.
pub fn seeded_trajectory(
    seed: u64,
    dt: f64,
    steps: usize,
    spinup: f64,
    p: &LorenzParams,
) -> Result<Trajectory> {
    integrate(spinup_state(seed), dt, steps, spinup, p)
}
