//! Kinematic bicycle model with slip angle, control saturation and the two
//! uncertainty propagation backends (linearized Gaussian, Monte Carlo).

use nalgebra::{DMatrix, Matrix2, SMatrix, SVector, SymmetricEigen, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::wrap_angle;

pub type Vec5 = SVector<f64, 5>;
pub type Mat5 = SMatrix<f64, 5, 5>;
pub type Mat52 = SMatrix<f64, 5, 2>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BicycleParams {
    /// Rear axle to centre of mass, meters.
    pub l_r: f64,
    /// Seconds per step.
    pub dt: f64,
    /// Acceleration bound, m/s².
    pub a_max: f64,
    /// Slip-angle rate bound, rad/s.
    pub beta_dot_max: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            l_r: 1.5,
            dt: 0.1,
            a_max: 5.0,
            beta_dot_max: 0.6,
        }
    }
}

impl BicycleParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l_r", self.l_r),
            ("dt", self.dt),
            ("a_max", self.a_max),
            ("beta_dot_max", self.beta_dot_max),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("bicycle {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Heading, rad.
    pub psi: f64,
    /// Speed at the centre of mass, m/s.
    pub v: f64,
    /// Slip angle between velocity and heading, rad.
    pub beta: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, psi: f64, v: f64, beta: f64) -> Self {
        Self { x, y, psi, v, beta }
    }

    pub fn to_vector(&self) -> Vec5 {
        Vec5::new(self.x, self.y, self.psi, self.v, self.beta)
    }

    pub fn from_vector(s: &Vec5) -> Self {
        Self::new(s[0], s[1], s[2], s[3], s[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Acceleration, m/s².
    pub a: f64,
    /// Slip-angle rate, rad/s.
    pub beta_dot: f64,
}

impl ControlInput {
    pub fn new(a: f64, beta_dot: f64) -> Self {
        Self { a, beta_dot }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.a, self.beta_dot)
    }
}

/// One explicit-Euler step of the bicycle model. Heading and slip angle of
/// the result are wrapped to (-π, π].
pub fn bicycle_step(s: &VehicleState, u: &ControlInput, p: &BicycleParams) -> Result<VehicleState> {
    if !s.is_finite() || !u.a.is_finite() || !u.beta_dot.is_finite() {
        return Err(Error::NonFinite(format!("bicycle step input {s:?}, {u:?}")));
    }
    let dt = p.dt;
    let course = s.psi + s.beta;
    Ok(VehicleState {
        x: s.x + s.v * course.cos() * dt,
        y: s.y + s.v * course.sin() * dt,
        psi: wrap_angle(s.psi + s.v / p.l_r * s.beta.sin() * dt),
        v: s.v + u.a * dt,
        beta: wrap_angle(s.beta + u.beta_dot * dt),
    })
}

/// Iterate [`bicycle_step`]; returns the states after each control.
pub fn rollout(s0: &VehicleState, controls: &[ControlInput], p: &BicycleParams) -> Result<Vec<VehicleState>> {
    let mut s = *s0;
    controls
        .iter()
        .map(|u| {
            s = bicycle_step(&s, u, p)?;
            Ok(s)
        })
        .collect()
}

/// Smooth saturation `bound·tanh(raw/bound)` of both control channels.
pub fn saturate(raw: &ControlInput, p: &BicycleParams) -> ControlInput {
    ControlInput {
        a: p.a_max * (raw.a / p.a_max).tanh(),
        beta_dot: p.beta_dot_max * (raw.beta_dot / p.beta_dot_max).tanh(),
    }
}

/// Hard projection onto the control bounds.
pub fn clamp_control(u: &ControlInput, p: &BicycleParams) -> ControlInput {
    ControlInput {
        a: u.a.clamp(-p.a_max, p.a_max),
        beta_dot: u.beta_dot.clamp(-p.beta_dot_max, p.beta_dot_max),
    }
}

/// Partial derivatives of [`bicycle_step`] with respect to the state and the
/// control, evaluated at `s`.
pub fn jacobians(s: &VehicleState, p: &BicycleParams) -> (Mat5, Mat52) {
    let dt = p.dt;
    let (sc, cc) = (s.psi + s.beta).sin_cos();
    let (sb, cb) = s.beta.sin_cos();
    let mut fs = Mat5::identity();
    fs[(0, 2)] = -s.v * sc * dt;
    fs[(0, 3)] = cc * dt;
    fs[(0, 4)] = -s.v * sc * dt;
    fs[(1, 2)] = s.v * cc * dt;
    fs[(1, 3)] = sc * dt;
    fs[(1, 4)] = s.v * cc * dt;
    fs[(2, 3)] = sb * dt / p.l_r;
    fs[(2, 4)] = s.v * cb * dt / p.l_r;
    let mut fu = Mat52::zeros();
    fu[(3, 0)] = dt;
    fu[(4, 1)] = dt;
    (fs, fu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: Vec5,
    pub cov: Mat5,
}

impl GaussianBelief {
    pub fn point(s: &VehicleState) -> Self {
        Self {
            mean: s.to_vector(),
            cov: Mat5::zeros(),
        }
    }

    pub fn state(&self) -> VehicleState {
        VehicleState::from_vector(&self.mean)
    }
}

/// Symmetrize and clip negative eigenvalues to zero.
pub fn make_psd<const N: usize>(m: &SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(DMatrix::from_column_slice(N, N, sym.as_slice()));
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    let r = SMatrix::<f64, N, N>::from_column_slice(r.as_slice());
    (r + r.transpose()) * 0.5
}

pub fn min_eigenvalue<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
    SymmetricEigen::new(DMatrix::from_column_slice(N, N, m.as_slice()))
        .eigenvalues
        .min()
}

/// Reject matrices that are asymmetric or have clearly negative eigenvalues.
pub fn check_psd<const N: usize>(m: &SMatrix<f64, N, N>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} has non-finite entries")));
    }
    let scale = m.abs().max().max(1e-300);
    if (m - m.transpose()).abs().max() > 1e-9 * scale {
        return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
    }
    let min = min_eigenvalue(&((m + m.transpose()) * 0.5));
    if min < -1e-9 * scale {
        return Err(Error::InvalidArgument(format!(
            "{what} is not positive semidefinite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

/// Linearized propagation: the mean goes through the nonlinear step with the
/// mean control, the covariance through the Jacobians at the prior mean.
pub fn propagate_gaussian(
    belief: &GaussianBelief,
    mu_u: &ControlInput,
    sigma_uu: &Matrix2<f64>,
    p: &BicycleParams,
) -> Result<GaussianBelief> {
    check_psd(&belief.cov, "state covariance")?;
    check_psd(sigma_uu, "control covariance")?;
    let s = belief.state();
    let (fs, fu) = jacobians(&s, p);
    let mean = bicycle_step(&s, mu_u, p)?.to_vector();
    let cov = fs * belief.cov * fs.transpose() + fu * sigma_uu * fu.transpose();
    Ok(GaussianBelief {
        mean,
        cov: make_psd(&cov),
    })
}

/// Lower Cholesky-like factor of a 2×2 PSD matrix, tolerant of singular
/// inputs.
pub fn sqrt_psd2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let a = m[(0, 0)].max(0.0);
    let l00 = a.sqrt();
    let l10 = if l00 > 0.0 { m[(1, 0)] / l00 } else { 0.0 };
    let l11 = (m[(1, 1)] - l10 * l10).max(0.0).sqrt();
    Matrix2::new(l00, 0.0, l10, l11)
}

/// Push every particle through the nonlinear step with its own control draw
/// `u ~ N(mu_u, sigma_uu)`, projected onto the control bounds. Particle `i`
/// draws from stream `i` of a generator seeded with `seed`, so the result
/// does not depend on thread count.
pub fn propagate_monte_carlo(
    particles: &[VehicleState],
    mu_u: &ControlInput,
    sigma_uu: &Matrix2<f64>,
    seed: u64,
    p: &BicycleParams,
) -> Result<Vec<VehicleState>> {
    check_psd(sigma_uu, "control covariance")?;
    let l = sqrt_psd2(sigma_uu);
    let mean = mu_u.to_vector();
    particles
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let e = Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            let u = mean + l * e;
            let u = clamp_control(&ControlInput::new(u[0], u[1]), p);
            bicycle_step(s, &u, p)
        })
        .collect()
}

/// Sample mean and (n−1)-normalized covariance of particle states.
pub fn particle_moments(particles: &[VehicleState]) -> (Vec5, Mat5) {
    let n = particles.len() as f64;
    let mean = particles.iter().map(VehicleState::to_vector).sum::<Vec5>() / n;
    let mut cov = Mat5::zeros();
    for s in particles {
        let d = s.to_vector() - mean;
        cov += d * d.transpose();
    }
    (mean, cov / (n - 1.0).max(1.0))
}

/// Largest per-step violation of the feasibility bounds along a state
/// sequence: `|Δv| ≤ a_max·dt` and `|Δψ| ≤ (v/l_r)·dt`, where `v` is the
/// speed at the start of the step. Non-positive means feasible.
pub fn feasibility_violation(states: &[VehicleState], p: &BicycleParams) -> f64 {
    states
        .windows(2)
        .map(|w| {
            let dv = (w[1].v - w[0].v).abs() - p.a_max * p.dt;
            let dpsi = wrap_angle(w[1].psi - w[0].psi).abs() - w[0].v.abs() / p.l_r * p.dt;
            dv.max(dpsi)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(dt: f64) -> BicycleParams {
        BicycleParams {
            dt,
            ..Default::default()
        }
    }

    #[test]
    fn straight_line_step() {
        let s = bicycle_step(&VehicleState::new(0., 0., 0., 2., 0.), &ControlInput::default(), &params(0.5)).unwrap();
        assert_eq!(s, VehicleState::new(1.0, 0.0, 0.0, 2.0, 0.0));
    }

    #[test]
    fn zero_speed_acceleration() {
        let s = bicycle_step(&VehicleState::new(3., 4., 0.3, 0., 0.), &ControlInput::new(1.0, 0.0), &params(0.1)).unwrap();
        assert_eq!((s.x, s.y), (3.0, 4.0));
        assert!((s.v - 0.1).abs() < 1e-15);
    }

    #[test]
    fn slip_angle_step_values() {
        let s = bicycle_step(&VehicleState::new(0., 0., 0., 2., 0.1), &ControlInput::default(), &params(0.1)).unwrap();
        assert!((s.x - 0.1990008).abs() < 1e-7, "{}", s.x);
        assert!((s.y - 0.0199667).abs() < 1e-7, "{}", s.y);
        assert!((s.psi - 0.0133111).abs() < 1e-7, "{}", s.psi);
    }

    #[test]
    fn saturation() {
        let p = BicycleParams::default();
        assert_eq!(saturate(&ControlInput::default(), &p), ControlInput::default());
        let big = saturate(&ControlInput::new(1e9, -1e9), &p);
        assert!(big.a <= p.a_max && big.a > 0.999 * p.a_max);
        assert!(big.beta_dot >= -p.beta_dot_max);
        let one = saturate(&ControlInput::new(p.a_max, 0.0), &p);
        assert!((one.a - p.a_max * 1f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn jacobian_structure() {
        let p = params(0.1);
        let (fs, fu) = jacobians(&VehicleState::new(1., 2., 0.4, 0., 0.), &p);
        assert_eq!(fs[(2, 3)], 0.0);
        assert_eq!(fu[(3, 0)], p.dt);
        assert_eq!(fu[(4, 1)], p.dt);
        for r in [0, 1, 2] {
            assert_eq!(fu.row(r).abs().max(), 0.0);
        }
    }

    #[test]
    fn gaussian_zero_noise_stays_zero() {
        let p = params(0.1);
        let b = GaussianBelief::point(&VehicleState::new(0., 0., 0.2, 3., 0.05));
        let out = propagate_gaussian(&b, &ControlInput::new(0.5, 0.1), &Matrix2::zeros(), &p).unwrap();
        assert_eq!(out.cov, Mat5::zeros());
    }

    #[test]
    fn gaussian_control_noise_only_hits_v_and_beta() {
        let p = params(0.1);
        let b = GaussianBelief::point(&VehicleState::new(0., 0., 0.2, 3., 0.05));
        let (sa, sb) = (0.3_f64, 0.2_f64);
        let out = propagate_gaussian(&b, &ControlInput::default(), &Matrix2::new(sa * sa, 0., 0., sb * sb), &p).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let want = match (r, c) {
                    (3, 3) => sa * sa * p.dt * p.dt,
                    (4, 4) => sb * sb * p.dt * p.dt,
                    _ => 0.0,
                };
                assert!((out.cov[(r, c)] - want).abs() < 1e-15, "({r},{c})");
            }
        }
    }

    #[test]
    fn non_psd_rejected() {
        let b = GaussianBelief::point(&VehicleState::default());
        let bad = Matrix2::new(1.0, 0.0, 0.0, -1.0);
        assert!(propagate_gaussian(&b, &ControlInput::default(), &bad, &params(0.1)).is_err());
    }

    #[test]
    fn monte_carlo_without_noise_is_deterministic_rollout() {
        let p = params(0.1);
        let s0 = VehicleState::new(1., -1., 0.3, 4., 0.02);
        let u = ControlInput::new(0.7, -0.1);
        let parts = vec![s0; 16];
        let out = propagate_monte_carlo(&parts, &u, &Matrix2::zeros(), 3, &p).unwrap();
        assert_eq!(out.len(), 16);
        let det = bicycle_step(&s0, &u, &p).unwrap();
        assert!(out.iter().all(|s| *s == det));
    }

    #[test]
    fn make_psd_clips() {
        let m = Matrix2::new(1.0, 2.0, 2.0, 1.0);
        let r = make_psd(&m);
        assert!(min_eigenvalue(&r) >= -1e-12);
    }
}
