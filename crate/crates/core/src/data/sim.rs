use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Array;

/// Noisy Dubin's car with state `(p_x, p_y, θ)` and controls `(v, κ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DubinsParams {
    pub dt: f64,
    /// Process-noise std per state component.
    pub process_std: [f64; 3],
    pub obs_std: f64,
    pub speed: (f64, f64),
    pub curvature: (f64, f64),
    /// Range of the initial heading.
    pub theta0: (f64, f64),
    /// Observe `θ` as well as the position.
    pub observe_heading: bool,
    /// Mean-reversion rate of the control processes.
    pub control_rate: f64,
    /// Fixed `(v, κ)` instead of random controls.
    pub constant_controls: Option<(f64, f64)>,
}

impl Default for DubinsParams {
    fn default() -> Self {
        Self {
            dt: 0.1,
            process_std: [0.01; 3],
            obs_std: 0.01,
            speed: (0.5, 1.5),
            curvature: (-1.0, 1.0),
            theta0: (-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4),
            observe_heading: false,
            control_rate: 0.5,
            constant_controls: None,
        }
    }
}

impl DubinsParams {
    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("Dubins time step must be positive".into()));
        }
        if self.process_std.iter().any(|s| !(*s >= 0.0)) || !(self.obs_std >= 0.0) {
            return Err(Error::InvalidArgument("noise std must be non-negative".into()));
        }
        if self.speed.0 > self.speed.1 || self.curvature.0 > self.curvature.1 || self.theta0.0 > self.theta0.1 {
            return Err(Error::InvalidArgument("empty control or heading range".into()));
        }
        Ok(())
    }
}

/// Ornstein-Uhlenbeck step towards the middle of `range`, clipped to it.
fn ou_step(rng: &mut Rng, c: f64, range: (f64, f64), rate: f64, dt: f64) -> f64 {
    let mid = 0.5 * (range.0 + range.1);
    let width = range.1 - range.0;
    let next = c + rate * (mid - c) * dt + width * (rate * dt).sqrt() * rng::normal(rng);
    next.clamp(range.0, range.1)
}

fn uniform(rng: &mut Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

/// Euler-discretized Dubin's car trajectories with ground-truth states.
pub fn simulate_dubins(params: &DubinsParams, len: usize, n_traj: usize, seed: u64) -> Result<Vec<Trajectory>> {
    params.validate()?;
    if len < 2 {
        return Err(Error::InvalidArgument("trajectories need at least two steps".into()));
    }
    let mut rng = rng::seeded(seed);
    let dy = if params.observe_heading { 3 } else { 2 };
    (0..n_traj)
        .map(|k| {
            let mut xs = Vec::with_capacity(3 * len);
            let mut us = Vec::with_capacity(2 * len);
            let mut ys = Vec::with_capacity(dy * len);
            let mut state = [0.0, 0.0, uniform(&mut rng, params.theta0)];
            let (mut v, mut kappa) = match params.constant_controls {
                Some(c) => c,
                None => (uniform(&mut rng, params.speed), uniform(&mut rng, params.curvature)),
            };
            for _ in 0..len {
                xs.extend_from_slice(&state);
                us.extend_from_slice(&[v, kappa]);
                for s in &state[..dy] {
                    ys.push(s + params.obs_std * rng::normal(&mut rng));
                }
                let [px, py, th] = state;
                let mut next = [
                    px + params.dt * v * th.cos(),
                    py + params.dt * v * th.sin(),
                    th + params.dt * v * kappa,
                ];
                for (n, s) in next.iter_mut().zip(params.process_std) {
                    *n += s * rng::normal(&mut rng);
                }
                state = next;
                if params.constant_controls.is_none() {
                    v = ou_step(&mut rng, v, params.speed, params.control_rate, params.dt);
                    kappa = ou_step(&mut rng, kappa, params.curvature, params.control_rate, params.dt);
                }
            }
            Trajectory::new(
                Array::matrix(len, 2, us),
                Array::matrix(len, dy, ys),
                Some(Array::matrix(len, 3, xs)),
                format!("dubins-{k}"),
            )
        })
        .collect()
}

/// `x_{t+1} = A x_t + B u_t + w`, `y_t = C x_t + v`, `w ~ N(0, Q)`, `v ~ N(0, R)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let ok = a.ncols() == n
            && b.nrows() == n
            && c.ncols() == n
            && q.shape() == (n, n)
            && r.shape() == (c.nrows(), c.nrows());
        if !ok {
            return Err(Error::Shape(format!(
                "inconsistent system: A {:?}, B {:?}, C {:?}, Q {:?}, R {:?}",
                a.shape(),
                b.shape(),
                c.shape(),
                q.shape(),
                r.shape()
            )));
        }
        Ok(Self { a, b, c, q, r })
    }

    /// Scalar system `x' = a x + b u + w`, `y = x + v`.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64) -> Self {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self {
            a: m(a),
            b: m(b),
            c: m(1.0),
            q: m(q),
            r: m(r),
        }
    }

    pub fn dx(&self) -> usize {
        self.a.nrows()
    }

    pub fn du(&self) -> usize {
        self.b.ncols()
    }

    pub fn dy(&self) -> usize {
        self.c.nrows()
    }
}

/// Simulation settings around a [`LinearSystem`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSim {
    pub system: LinearSystem,
    /// Std of the zero-mean initial state.
    pub x0_std: f64,
    /// Std of the i.i.d. Gaussian controls.
    pub control_std: f64,
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn gaussian_vec(rng: &mut Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng::normal(rng)))
}

pub fn simulate_linear(sim: &LinearSim, len: usize, n_traj: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let s = &sim.system;
    LinearSystem::new(s.a.clone(), s.b.clone(), s.c.clone(), s.q.clone(), s.r.clone())?;
    if len < 2 {
        return Err(Error::InvalidArgument("trajectories need at least two steps".into()));
    }
    let (dx, du, dy) = (s.dx(), s.du(), s.dy());
    let (q_half, r_half) = (psd_sqrt(&s.q), psd_sqrt(&s.r));
    let mut rng = rng::seeded(seed);
    (0..n_traj)
        .map(|k| {
            let mut x = gaussian_vec(&mut rng, dx) * sim.x0_std;
            let (mut xs, mut us, mut ys) = (Vec::new(), Vec::new(), Vec::new());
            for _ in 0..len {
                let u = gaussian_vec(&mut rng, du) * sim.control_std;
                let y = &s.c * &x + &r_half * gaussian_vec(&mut rng, dy);
                xs.extend(x.iter());
                us.extend(u.iter());
                ys.extend(y.iter());
                x = &s.a * &x + &s.b * &u + &q_half * gaussian_vec(&mut rng, dx);
            }
            Trajectory::new(
                Array::matrix(len, du, us),
                Array::matrix(len, dy, ys),
                Some(Array::matrix(len, dx, xs)),
                format!("linear-{k}"),
            )
        })
        .collect()
}

/// Spectral radius and mean-square stability of a linear system matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MssReport {
    pub spectral_radius: f64,
    pub is_mss: bool,
}

/// Spectral radius by power iteration, falling back to a full eigenvalue
/// computation when the iteration does not settle (complex or nearly tied
/// dominant eigenvalues).
pub fn mss_check(a: &DMatrix<f64>) -> Result<MssReport> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape(format!("matrix {:?} is not square", a.shape())));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(MssReport { spectral_radius: 0.0, is_mss: true });
    }
    let radius = power_iteration(a).unwrap_or_else(|| {
        a.complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    });
    Ok(MssReport {
        spectral_radius: radius,
        is_mss: radius < 1.0,
    })
}

fn power_iteration(a: &DMatrix<f64>) -> Option<f64> {
    let n = a.nrows();
    let mut v = DVector::from_iterator(n, (0..n).map(|i| 1.0 + 0.1 * i as f64));
    v /= v.norm();
    for _ in 0..2000 {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Some(0.0);
        }
        let lambda = v.dot(&w);
        let residual = (&w - &v * lambda).norm();
        if residual <= 1e-13 * norm.max(1.0) {
            return Some(lambda.abs());
        }
        v = w / norm;
    }
    None
}
