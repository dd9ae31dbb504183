//! Discrete dynamical movement primitives, one per joint.
//!
//! Each joint follows the transformation system
//!
//! ```text
//! tau * y'' = alpha * (beta * (g - y) - y') + s * f(s)
//! f(s)      = weight_scale * sum_i w_i psi_i(s) / sum_i psi_i(s)
//! tau * s'  = -alpha_s * s,   s(0) = 1
//! ```
//!
//! integrated with semi-implicit Euler steps of `dt = tau / episode_steps`.
//! A joint is parameterized by 7 basis weights and one end-state weight,
//! all in `[-1, 1]`; the end-state weight maps linearly onto the joint range.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env_sim::{EnvConfig, Trajectory};
use crate::error::{argument, Error, Result};

pub const N_BASIS: usize = 7;
/// Basis weights plus the end-state weight.
pub const PARAMS_PER_JOINT: usize = N_BASIS + 1;

/// Flat motor parameter vector, `n_joints * 8` entries in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DmpParams(Vec<f64>);

impl DmpParams {
    /// Builds parameters, clipping every entry into `[-1, 1]`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || !values.len().is_multiple_of(PARAMS_PER_JOINT) {
            return Err(argument(format!(
                "{} parameters is not a multiple of {PARAMS_PER_JOINT}",
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(argument("NaN motor parameter"));
        }
        Ok(Self(
            values.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        ))
    }

    pub fn n_joints(&self) -> usize {
        self.0.len() / PARAMS_PER_JOINT
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn basis_weights(&self, joint: usize) -> &[f64] {
        &self.0[joint * PARAMS_PER_JOINT..joint * PARAMS_PER_JOINT + N_BASIS]
    }

    pub fn goal_weight(&self, joint: usize) -> f64 {
        self.0[joint * PARAMS_PER_JOINT + N_BASIS]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmpConfig {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_s: f64,
    pub tau: f64,
    pub dt: f64,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    /// Forcing amplitude per unit weight. 200 lets random parameters sweep
    /// most of the reachable workspace.
    pub weight_scale: f64,
}

impl DmpConfig {
    /// Canonical gains for an episode of `steps` ticks.
    ///
    /// Basis peaks are equally spaced in time, hence log-spaced in phase, and
    /// neighbouring Gaussians cross at half activation.
    pub fn standard(steps: usize) -> Self {
        let alpha = 25.0;
        let alpha_s = 3.0;
        let tau = 1.0;
        let centers: Vec<f64> = (0..N_BASIS)
            .map(|i| (-alpha_s * i as f64 / (N_BASIS - 1) as f64).exp())
            .collect();
        let widths: Vec<f64> = (0..N_BASIS)
            .map(|i| {
                let gap = if i + 1 < N_BASIS {
                    centers[i] - centers[i + 1]
                } else {
                    centers[i - 1] - centers[i]
                };
                4.0 * std::f64::consts::LN_2 / (gap * gap)
            })
            .collect();
        Self {
            alpha,
            beta: alpha / 4.0,
            alpha_s,
            tau,
            dt: tau / steps as f64,
            centers,
            widths,
            weight_scale: 200.0,
        }
    }

    pub fn validate(&self, episode_steps: usize) -> Result<()> {
        if self.centers.len() != N_BASIS || self.widths.len() != N_BASIS {
            return Err(argument(format!(
                "DMPs use exactly {N_BASIS} basis functions"
            )));
        }
        if !(self.dt > 0.0) || !(self.tau > 0.0) {
            return Err(argument("dt and tau must be positive"));
        }
        if self.widths.iter().any(|&h| !(h > 0.0)) {
            return Err(argument("basis widths must be positive"));
        }
        let total = episode_steps as f64 * self.dt;
        if (total - self.tau).abs() > 1e-9 * self.tau {
            return Err(argument(format!(
                "episode_steps * dt = {total} but tau = {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Gaussian basis activations at phase `s`.
pub fn basis_activations(s: f64, cfg: &DmpConfig) -> Result<[f64; N_BASIS]> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(argument(format!("phase {s} outside (0, 1]")));
    }
    let mut psi = [0.0; N_BASIS];
    for (i, p) in psi.iter_mut().enumerate() {
        let d = s - cfg.centers[i];
        *p = (-cfg.widths[i] * d * d).exp();
    }
    Ok(psi)
}

/// Maps an end-state weight in `[-1, 1]` onto `[-limit, limit]`.
pub fn goal_angle(g_raw: f64, limit: f64) -> f64 {
    let (lo, hi) = (-limit, limit);
    lo + (g_raw + 1.0) * 0.5 * (hi - lo)
}

/// Integrates every joint's DMP and returns `episode_steps` rows of joint
/// angles; row `k` is the state after `k + 1` integration steps.
pub fn integrate(
    params: &DmpParams,
    y0: &[f64],
    cfg: &DmpConfig,
    env: &EnvConfig,
) -> Result<Trajectory> {
    let n = env.n_joints;
    if params.len() != n * PARAMS_PER_JOINT || y0.len() != n {
        return Err(argument(format!(
            "{} parameters and {} start angles for {n} joints",
            params.len(),
            y0.len()
        )));
    }
    let steps = env.episode_steps;
    let goals: Vec<f64> = (0..n)
        .map(|j| goal_angle(params.goal_weight(j), env.joint_limits[j]))
        .collect();
    let mut y = y0.to_vec();
    let mut yd = vec![0.0; n];
    let mut s = 1.0;
    let mut out = Vec::with_capacity(steps * n);

    for _ in 0..steps {
        let psi = basis_activations(s, cfg)?;
        let norm: f64 = psi.iter().sum();
        for j in 0..n {
            let w = params.basis_weights(j);
            let weighted: f64 = w.iter().zip(&psi).map(|(w, p)| w * p).sum();
            let forcing = cfg.weight_scale * weighted / norm;
            let ydd = (cfg.alpha * (cfg.beta * (goals[j] - y[j]) - yd[j]) + s * forcing) / cfg.tau;
            yd[j] += ydd * cfg.dt;
            y[j] += yd[j] * cfg.dt;
        }
        s += -cfg.alpha_s * s / cfg.tau * cfg.dt;
        if y.iter().chain(&yd).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("DMP state diverged".into()));
        }
        out.extend(
            y.iter()
                .enumerate()
                .map(|(j, &a)| a.clamp(-env.joint_limits[j], env.joint_limits[j])),
        );
    }
    Ok(Trajectory::from_flat(n, out))
}

/// Uniform i.i.d. parameters in `[-1, 1]`.
pub fn random_params<R: Rng + ?Sized>(n_joints: usize, rng: &mut R) -> DmpParams {
    DmpParams(
        (0..n_joints * PARAMS_PER_JOINT)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::Rng;
    use rand::{Rng as _, SeedableRng};

    fn setup() -> (EnvConfig, DmpConfig) {
        let env = EnvConfig::arm_ball();
        let dmp = DmpConfig::standard(env.episode_steps);
        (env, dmp)
    }

    /// Independent reference: the same ODE integrated with classic RK4 at
    /// `dt / 100` and no clipping.
    fn fine_oracle(w: &[f64], g: f64, y0: f64, cfg: &DmpConfig, steps: usize) -> f64 {
        let sub = 100;
        let h = cfg.dt / sub as f64;
        let deriv = |st: [f64; 3]| -> [f64; 3] {
            let [y, yd, s] = st;
            let psi: Vec<f64> = (0..N_BASIS)
                .map(|i| (-cfg.widths[i] * (s - cfg.centers[i]).powi(2)).exp())
                .collect();
            let f = cfg.weight_scale * w.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>()
                / psi.iter().sum::<f64>();
            [
                yd,
                (cfg.alpha * (cfg.beta * (g - y) - yd) + s * f) / cfg.tau,
                -cfg.alpha_s * s / cfg.tau,
            ]
        };
        let mut st = [y0, 0.0, 1.0];
        for _ in 0..steps * sub {
            let k1 = deriv(st);
            let add = |a: [f64; 3], k: [f64; 3], c: f64| {
                [a[0] + c * k[0], a[1] + c * k[1], a[2] + c * k[2]]
            };
            let k2 = deriv(add(st, k1, h / 2.0));
            let k3 = deriv(add(st, k2, h / 2.0));
            let k4 = deriv(add(st, k3, h));
            for i in 0..3 {
                st[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        st[0]
    }

    #[test]
    fn basis_peaks_and_bounds() {
        let (_, cfg) = setup();
        let psi = basis_activations(cfg.centers[0], &cfg).unwrap();
        assert_eq!(psi[0], 1.0);
        for k in 1..=100 {
            let s = k as f64 / 100.0;
            let psi = basis_activations(s, &cfg).unwrap();
            // Narrow late-phase Gaussians underflow to exactly zero far from
            // their centres; at least one activation is always positive.
            assert!(psi.iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert!(psi.iter().any(|&p| p > 0.0));
            let norm: f64 = psi.iter().sum();
            let normalized: f64 = psi.iter().map(|p| p / norm).sum();
            assert!((normalized - 1.0).abs() < 1e-12);
        }
        assert!(basis_activations(0.0, &cfg).is_err());
        assert!(basis_activations(1.5, &cfg).is_err());
    }

    #[test]
    fn adjacent_basis_cross_near_half() {
        let (_, cfg) = setup();
        for i in 0..N_BASIS - 1 {
            let mid = 0.5 * (cfg.centers[i] + cfg.centers[i + 1]);
            let psi = basis_activations(mid, &cfg).unwrap();
            assert!((psi[i] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn equilibrium_is_constant() {
        let (env, cfg) = setup();
        let p = DmpParams::new(vec![0.0; 48]).unwrap();
        let traj = integrate(&p, &[0.0; 6], &cfg, &env).unwrap();
        assert_eq!(traj.steps(), 50);
        assert!(traj.rows().flatten().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn unforced_system_converges_to_goal() {
        let (env, cfg) = setup();
        let mut rng = Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut values = vec![0.0; 48];
            for j in 0..6 {
                values[j * 8 + 7] = rng.random_range(-1.0..=1.0);
            }
            let p = DmpParams::new(values).unwrap();
            let traj = integrate(&p, &[0.0; 6], &cfg, &env).unwrap();
            let last = traj.row(traj.steps() - 1);
            for (j, &y) in last.iter().enumerate() {
                let g = goal_angle(p.goal_weight(j), env.joint_limits[j]);
                let oracle = fine_oracle(&[0.0; N_BASIS], g, 0.0, &cfg, env.episode_steps);
                assert!((y - g).abs() < 1e-3, "joint {j}: {y} vs {g}");
                assert!((oracle - g).abs() < 1e-3);
                assert!((y - oracle).abs() < 1e-3);
            }
            // Late steps settle monotonically once the forcing has vanished.
            for j in 0..6 {
                let deltas: Vec<f64> = (traj.steps() - 11..traj.steps() - 1)
                    .map(|k| (traj.row(k + 1)[j] - traj.row(k)[j]).abs())
                    .collect();
                assert!(
                    deltas.windows(2).all(|d| d[1] <= d[0] + 1e-15),
                    "{deltas:?}"
                );
            }
        }
    }

    #[test]
    fn forced_trajectory_tracks_fine_oracle() {
        // With basis weights the Euler path stays close to the fine RK4 path.
        let (env, cfg) = setup();
        let w = [0.2, -0.1, 0.05, 0.0, -0.05, 0.1, -0.2];
        let mut values = vec![0.0; 48];
        values[..7].copy_from_slice(&w);
        values[7] = 0.1;
        let p = DmpParams::new(values).unwrap();
        let traj = integrate(&p, &[0.0; 6], &cfg, &env).unwrap();
        let g = goal_angle(0.1, env.joint_limits[0]);
        let oracle = fine_oracle(&w, g, 0.0, &cfg, env.episode_steps);
        assert!((traj.row(49)[0] - oracle).abs() < 0.05);
    }

    #[test]
    fn goal_mapping_is_linear() {
        let lim = 1.2;
        assert_eq!(goal_angle(0.0, lim), 0.0);
        assert_eq!(goal_angle(-1.0, lim), -lim);
        assert_eq!(goal_angle(1.0, lim), lim);
        assert!((goal_angle(0.5, lim) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn integration_is_deterministic_and_bounded() {
        let (env, cfg) = setup();
        let mut rng = Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = random_params(6, &mut rng);
            let a = integrate(&p, &[0.0; 6], &cfg, &env).unwrap();
            let b = integrate(&p, &[0.0; 6], &cfg, &env).unwrap();
            assert_eq!(a, b);
            for row in a.rows() {
                for (j, v) in row.iter().enumerate() {
                    assert!(v.abs() <= env.joint_limits[j]);
                }
            }
        }
    }

    #[test]
    fn param_counts() {
        let mut rng = Rng::seed_from_u64(0);
        assert_eq!(random_params(6, &mut rng).len(), 48);
        assert_eq!(random_params(7, &mut rng).len(), 56);
        assert!(DmpParams::new(vec![0.0; 47]).is_err());
        let clipped = DmpParams::new(vec![3.0; 8]).unwrap();
        assert!(clipped.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn random_params_are_centred() {
        let mut rng = Rng::seed_from_u64(9);
        let n = 100_000;
        let mut sums = [0.0; 8];
        for _ in 0..n {
            let p = random_params(1, &mut rng);
            for (s, v) in sums.iter_mut().zip(p.as_slice()) {
                *s += v;
                assert!((-1.0..=1.0).contains(v));
            }
        }
        for s in sums {
            assert!((s / n as f64).abs() < 0.01);
        }
    }

    #[test]
    fn config_validation() {
        let (env, cfg) = setup();
        cfg.validate(env.episode_steps).unwrap();
        assert!(cfg.validate(40).is_err());
        let mut bad = cfg.clone();
        bad.widths[2] = 0.0;
        assert!(bad.validate(50).is_err());
    }
}
