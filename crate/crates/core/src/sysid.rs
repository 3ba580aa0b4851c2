//! Identification and PI synthesis.
//!
//! A maximal-length PRBS excites the valve, an ordinary least-squares fit
//! recovers the ARX coefficients `(a, b1, b2)`, and the PI gains are placed
//! from a damping ratio and rise time. Closing the PI law around the ARX model
//! with `R(q) = 1 - q^-1`, `S(q) = r0 + r1 q^-1` gives the characteristic
//! polynomial
//!
//! ```text
//! 1 + (b1 r0 - a - 1) q^-1 + (a + b1 r1 + b2 r0) q^-2 + (b2 r1) q^-3
//! ```

use alloc::vec::Vec;
use num_complex::Complex64;
use thiserror::Error;

use crate::pi::PiGains;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SysIdError {
    #[error("PRBS levels {lo}..{hi} escape [0, 100]")]
    PrbsOutOfRange { lo: f64, hi: f64 },
    #[error("PRBS length must be at least 1")]
    EmptyPrbs,
    #[error("input and output sequences differ in length ({u} vs {alpha})")]
    Misaligned { u: usize, alpha: usize },
    #[error("need at least 10 samples, got {0}")]
    TooShort(usize),
    #[error("regressor matrix is rank deficient: column {0} is degenerate")]
    RankDeficient(&'static str),
    #[error("b1 = 0: PI gains cannot be placed")]
    ZeroB1,
    #[error("pole placement equations are singular")]
    SingularPlacement,
    #[error("invalid design spec: {0}")]
    InvalidSpec(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrbsConfig {
    pub length: usize,
    pub center: f64,
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for PrbsConfig {
    fn default() -> Self {
        PrbsConfig { length: 1022, center: 16.0, amplitude: 8.0, seed: 1 }
    }
}

/// Two-level sequence `center +/- amplitude` driven by a 10-bit Fibonacci
/// LFSR (`x^10 + x^7 + 1`, period 1023). The seed picks the nonzero start
/// register.
pub fn generate_prbs(cfg: &PrbsConfig) -> Result<Vec<f64>, SysIdError> {
    if cfg.length == 0 {
        return Err(SysIdError::EmptyPrbs);
    }
    let (lo, hi) = (cfg.center - cfg.amplitude, cfg.center + cfg.amplitude);
    if !(lo >= 0.0 && hi <= 100.0) {
        return Err(SysIdError::PrbsOutOfRange { lo, hi });
    }
    let mut reg: u16 = (cfg.seed % 1023) as u16 + 1;
    let mut out = Vec::with_capacity(cfg.length);
    for _ in 0..cfg.length {
        let bit = ((reg >> 9) ^ (reg >> 6)) & 1;
        reg = ((reg << 1) | bit) & 0x3ff;
        out.push(if bit == 1 { hi } else { lo });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArxFit {
    pub a: f64,
    pub b1: f64,
    pub b2: f64,
    pub residual_rms: f64,
}

const COLUMNS: [&str; 3] = ["alpha[t-1]", "u[t-1]", "u[t-2]"];
const COND_LIMIT: f64 = 1e8;

/// Least-squares fit of `alpha_t ~ a alpha_{t-1} + b1 u_{t-1} + b2 u_{t-2}`.
///
/// Solved through the normal equations; falls back to a column-pivoted
/// Householder QR of the regressor when the Gram matrix is ill conditioned.
pub fn fit_arx(u: &[f64], alpha: &[f64]) -> Result<ArxFit, SysIdError> {
    if u.len() != alpha.len() {
        return Err(SysIdError::Misaligned { u: u.len(), alpha: alpha.len() });
    }
    if u.len() < 10 {
        return Err(SysIdError::TooShort(u.len()));
    }
    let rows: Vec<([f64; 3], f64)> = (2..u.len()).map(|t| ([alpha[t - 1], u[t - 1], u[t - 2]], alpha[t])).collect();

    let theta = match solve_normal(&rows) {
        Some(theta) => theta,
        None => solve_qr(&rows)?,
    };
    let sse: f64 = rows
        .iter()
        .map(|(x, y)| {
            let e = y - (theta[0] * x[0] + theta[1] * x[1] + theta[2] * x[2]);
            e * e
        })
        .sum();
    Ok(ArxFit { a: theta[0], b1: theta[1], b2: theta[2], residual_rms: libm::sqrt(sse / rows.len() as f64) })
}

fn solve_normal(rows: &[([f64; 3], f64)]) -> Option<[f64; 3]> {
    let mut g = [[0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for (x, y) in rows {
        for i in 0..3 {
            rhs[i] += x[i] * y;
            for j in 0..3 {
                g[i][j] += x[i] * x[j];
            }
        }
    }
    // Cholesky
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s = g[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = libm::sqrt(s);
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let solve = |b: [f64; 3]| -> [f64; 3] {
        let mut z = [0.0; 3];
        for i in 0..3 {
            z[i] = (b[i] - (0..i).map(|k| l[i][k] * z[k]).sum::<f64>()) / l[i][i];
        }
        let mut x = [0.0; 3];
        for i in (0..3).rev() {
            x[i] = (z[i] - (i + 1..3).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
        }
        x
    };
    // 1-norm condition number from the explicit inverse
    let mut inv = [[0.0; 3]; 3];
    for c in 0..3 {
        let mut e = [0.0; 3];
        e[c] = 1.0;
        let col = solve(e);
        for r in 0..3 {
            inv[r][c] = col[r];
        }
    }
    let norm1 = |m: &[[f64; 3]; 3]| (0..3).map(|c| (0..3).map(|r| m[r][c].abs()).sum::<f64>()).fold(0.0, f64::max);
    let cond = norm1(&g) * norm1(&inv);
    if !cond.is_finite() || cond > COND_LIMIT {
        return None;
    }
    Some(solve(rhs))
}

fn solve_qr(rows: &[([f64; 3], f64)]) -> Result<[f64; 3], SysIdError> {
    let mut a: Vec<[f64; 3]> = rows.iter().map(|r| r.0).collect();
    let mut b: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mut perm = [0usize, 1, 2];
    let col_norm = |a: &[[f64; 3]], j: usize, from: usize| libm::sqrt(a[from..].iter().map(|r| r[j] * r[j]).sum::<f64>());
    let scale = (0..3).map(|j| col_norm(&a, j, 0)).fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(SysIdError::RankDeficient(COLUMNS[0]));
    }
    for k in 0..3 {
        // pivot the remaining column with the largest residual norm to position k
        let p = (k..3).max_by(|&i, &j| col_norm(&a, i, k).total_cmp(&col_norm(&a, j, k))).unwrap();
        if p != k {
            perm.swap(k, p);
            for r in a.iter_mut() {
                r.swap(k, p);
            }
        }
        let norm = col_norm(&a, k, k);
        if norm <= 1e-10 * scale {
            return Err(SysIdError::RankDeficient(COLUMNS[perm[k]]));
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k..].iter().map(|r| r[k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..3 {
            let dot: f64 = v.iter().zip(&a[k..]).map(|(vi, r)| vi * r[j]).sum();
            let f = 2.0 * dot / vnorm2;
            for (vi, r) in v.iter().zip(a[k..].iter_mut()) {
                r[j] -= f * vi;
            }
        }
        let dot: f64 = v.iter().zip(&b[k..]).map(|(vi, bi)| vi * bi).sum();
        let f = 2.0 * dot / vnorm2;
        for (vi, bi) in v.iter().zip(b[k..].iter_mut()) {
            *bi -= f * vi;
        }
    }
    let mut z = [0.0; 3];
    for i in (0..3).rev() {
        z[i] = (b[i] - (i + 1..3).map(|k| a[i][k] * z[k]).sum::<f64>()) / a[i][i];
    }
    let mut theta = [0.0; 3];
    for (k, &p) in perm.iter().enumerate() {
        theta[p] = z[k];
    }
    Ok(theta)
}

/// Transient specification for the PI loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiDesignSpec {
    pub zeta: f64,
    pub t_rise: f64,
    pub ts: f64,
    /// `omega_n = rise_factor / (zeta * t_rise)`; 2.2 is the 10-90 % rule.
    pub rise_factor: f64,
}

impl Default for PiDesignSpec {
    fn default() -> Self {
        PiDesignSpec { zeta: 1.0, t_rise: 0.8, ts: 0.05, rise_factor: 2.2 }
    }
}

impl PiDesignSpec {
    pub fn natural_frequency(&self) -> f64 {
        self.rise_factor / (self.zeta * self.t_rise)
    }

    /// Discrete double pole `exp(-omega_n ts)`.
    pub fn discrete_pole(&self) -> f64 {
        libm::exp(-self.natural_frequency() * self.ts)
    }
}

/// How the three closed-loop coefficients are constrained by two gains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Placement {
    /// Characteristic polynomial `(1 - p q^-1)^2 (1 - p3 q^-1)`, solved
    /// jointly for `(r0, r1, p3)`: the double pole is exact and the third
    /// pole is whatever the structure leaves.
    #[default]
    Factored,
    /// Match only the `q^-1` and `q^-2` coefficients of `(1 - p q^-1)^2`;
    /// the `q^-3` coefficient is left unconstrained.
    TwoCoefficient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiDesign {
    pub r0: f64,
    pub r1: f64,
    pub double_pole: f64,
    /// Residual closed-loop root with the largest distance from the double pole.
    pub third_pole: Complex64,
    pub stable: bool,
}

impl PiDesign {
    pub fn gains(&self, u_min: f64, u_max: f64) -> PiGains {
        PiGains::new(self.r0, self.r1, u_min, u_max)
    }
}

/// Closed-loop characteristic coefficients `[1, c1, c2, c3]` in powers of `q^-1`.
pub fn characteristic_coeffs(a: f64, b1: f64, b2: f64, r0: f64, r1: f64) -> [f64; 4] {
    [1.0, b1 * r0 - a - 1.0, a + b1 * r1 + b2 * r0, b2 * r1]
}

pub fn design_pi_gains(fit: &ArxFit, spec: &PiDesignSpec, placement: Placement) -> Result<PiDesign, SysIdError> {
    if !(spec.zeta > 0.0 && spec.t_rise > 0.0 && spec.ts > 0.0 && spec.rise_factor > 0.0) {
        return Err(SysIdError::InvalidSpec("zeta, t_rise, ts and rise_factor must be positive"));
    }
    if fit.b1 == 0.0 {
        return Err(SysIdError::ZeroB1);
    }
    let (a, b1, b2) = (fit.a, fit.b1, fit.b2);
    let p = spec.discrete_pole();
    let (r0, r1) = match placement {
        Placement::TwoCoefficient => {
            let r0 = (a + 1.0 - 2.0 * p) / b1;
            let r1 = (p * p - a - b2 * r0) / b1;
            (r0, r1)
        }
        Placement::Factored => {
            let m = [[b1, 0.0, 1.0], [b2, b1, -2.0 * p], [0.0, b2, p * p]];
            let rhs = [a + 1.0 - 2.0 * p, p * p - a, 0.0];
            let x = solve3(m, rhs).ok_or(SysIdError::SingularPlacement)?;
            (x[0], x[1])
        }
    };
    let poles = closed_loop_poles(fit, &PiGains::new(r0, r1, 0.0, 100.0));
    let third_pole = *poles.iter().max_by(|x, y| (*x - p).norm().total_cmp(&(*y - p).norm())).unwrap();
    let stable = spectral_radius(&poles) < 1.0;
    Ok(PiDesign { r0, r1, double_pole: p, third_pole, stable })
}

fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for k in 0..3 {
        let p = (k..3).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs()))?;
        if m[p][k].abs() < 1e-14 {
            return None;
        }
        m.swap(k, p);
        b.swap(k, p);
        for i in k + 1..3 {
            let f = m[i][k] / m[k][k];
            for j in k..3 {
                m[i][j] -= f * m[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        x[i] = (b[i] - (i + 1..3).map(|j| m[i][j] * x[j]).sum::<f64>()) / m[i][i];
    }
    Some(x)
}

/// Roots of `z^3 + c1 z^2 + c2 z + c3` for the PI+ARX loop.
pub fn closed_loop_poles(fit: &ArxFit, gains: &PiGains) -> [Complex64; 3] {
    if gains.r0 == 0.0 && gains.r1 == 0.0 {
        // open loop: delay, plant pole and integrator
        return [Complex64::new(0.0, 0.0), Complex64::new(fit.a, 0.0), Complex64::new(1.0, 0.0)];
    }
    let c = characteristic_coeffs(fit.a, fit.b1, fit.b2, gains.r0, gains.r1);
    cubic_roots([c[1], c[2], c[3]])
}

/// Evaluates the monic cubic with coefficients `[c1, c2, c3]` at `z`.
pub fn eval_cubic(c: [f64; 3], z: Complex64) -> Complex64 {
    ((z + c[0]) * z + c[1]) * z + c[2]
}

/// Durand-Kerner iteration followed by Newton polishing.
pub fn cubic_roots(c: [f64; 3]) -> [Complex64; 3] {
    let seed = Complex64::new(0.4, 0.9);
    let mut z = [Complex64::new(1.0, 0.0), seed, seed * seed];
    let bound = 1.0 + c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for zi in z.iter_mut() {
        *zi *= bound;
    }
    for _ in 0..500 {
        let mut delta = 0.0f64;
        for i in 0..3 {
            let mut den = Complex64::new(1.0, 0.0);
            for j in 0..3 {
                if i != j {
                    den *= z[i] - z[j];
                }
            }
            if den.norm() == 0.0 {
                den = Complex64::new(1e-12, 0.0);
            }
            let step = eval_cubic(c, z[i]) / den;
            z[i] -= step;
            delta = delta.max(step.norm());
        }
        if delta < 1e-15 {
            break;
        }
    }
    for zi in z.iter_mut() {
        for _ in 0..3 {
            let d = (Complex64::new(3.0, 0.0) * *zi + 2.0 * c[0]) * *zi + c[1];
            if d.norm() < 1e-300 {
                break;
            }
            let next = *zi - eval_cubic(c, *zi) / d;
            if eval_cubic(c, next).norm() <= eval_cubic(c, *zi).norm() {
                *zi = next;
            }
        }
        if zi.im.abs() < 1e-12 * (1.0 + zi.re.abs()) {
            zi.im = 0.0;
        }
    }
    z
}

pub fn spectral_radius(roots: &[Complex64]) -> f64 {
    roots.iter().map(|z| z.norm()).fold(0.0, f64::max)
}
