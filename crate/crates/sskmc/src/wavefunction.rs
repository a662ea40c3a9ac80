//! Log-amplitudes, gradients, Laplacians, and the local energy of the
//! symmetric-kernel shadow trial function.
//!
//! The sampled weight of a configuration (R, S, S') factorizes as
//!
//! ```text
//! psi_a^2(R) * Theta(R,S) psi_s(S) * Theta(R,S') psi_s(S')
//! ```
//!
//! with
//!
//! * `psi_a(R)   = prod_{i<j} exp(-u(r_ij)/2)`, `u(r) = (b_a/r)^5`,
//! * `Theta(R,S) = prod_j sum_i exp(-C |r_i - s_j|^2)`, the kernel that is
//!   symmetric under atom exchange,
//! * `psi_s(S)   = prod_{i<j} exp(-w(s_ij))` for the active shadow form.
//!
//! All products are evaluated in log space; the kernel columns go through
//! log-sum-exp with a per-column max shift, since at the optimal `C` the raw
//! Gaussians underflow at box-scale distances.

use serde::{Deserialize, Serialize};

use crate::geometry::{SimBox, Vec3};
use crate::physics::{AzizPotential, PseudoPotentials, ShadowForm, UnitSystem};

/// Variational parameter set of a run: atom McMillan length `b_a` (A),
/// kernel exponent `c` (A^-2), and the shadow correlation form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub b_a: f64,
    pub c: f64,
    pub shadow: ShadowForm,
}

impl TrialParams {
    /// Builds from reduced units as quoted in parameter tables:
    /// `b_a` in sigma, `c` in sigma^-2, McMillan `b_s` in sigma.
    /// `beta` (1/K) and `alpha` (dimensionless) pass through unchanged.
    pub fn from_reduced(
        b_a_sigma: f64,
        c_sigma2: f64,
        shadow: ShadowForm,
        units: &UnitSystem,
    ) -> Self {
        let shadow = match shadow {
            ShadowForm::McMillan { b_s } => {
                ShadowForm::McMillan { b_s: units.length_to_angstrom(b_s) }
            }
            other => other,
        };
        TrialParams {
            b_a: units.length_to_angstrom(b_a_sigma),
            c: units.inv_len2_to_inv_a2(c_sigma2),
            shadow,
        }
    }

    pub fn pseudopotentials(&self) -> PseudoPotentials {
        PseudoPotentials { b_a: self.b_a, shadow: self.shadow }
    }
}

/// Cached kernel state for one (R, S) pair: minimum-image displacements,
/// squared distances, per-column log sums, and softmax weights
/// `w_ij = g_ij / sum_k g_kj`. Column-major storage, `n_atoms` rows by
/// `n_shadows` columns.
#[derive(Debug, Clone)]
pub struct KernelState {
    c: f64,
    n_atoms: usize,
    n_shadows: usize,
    disp: Vec<Vec3>,
    d2: Vec<f64>,
    /// log sum_i exp(-c d_ij^2) per shadow column.
    ell: Vec<f64>,
    weights: Vec<f64>,
}

impl KernelState {
    pub fn build(r: &[Vec3], s: &[Vec3], c: f64, bx: &SimBox) -> Self {
        let (na, ns) = (r.len(), s.len());
        let mut state = KernelState {
            c,
            n_atoms: na,
            n_shadows: ns,
            disp: vec![Vec3::zeros(); na * ns],
            d2: vec![0.0; na * ns],
            ell: vec![0.0; ns],
            weights: vec![0.0; na * ns],
        };
        for j in 0..ns {
            state.fill_column(j, r, s[j], bx);
        }
        state
    }

    /// Recomputes column j against shadow position `sj`: the O(N) update
    /// after a single-shadow move.
    pub fn update_shadow(&mut self, j: usize, sj: Vec3, r: &[Vec3], bx: &SimBox) {
        self.fill_column(j, r, sj, bx);
    }

    fn fill_column(&mut self, j: usize, r: &[Vec3], sj: Vec3, bx: &SimBox) {
        let na = self.n_atoms;
        let base = j * na;
        let mut max_log = f64::NEG_INFINITY;
        for (i, ri) in r.iter().enumerate() {
            let d = bx.min_image_disp(*ri, sj);
            let d2 = d.norm_squared();
            self.disp[base + i] = d;
            self.d2[base + i] = d2;
            max_log = max_log.max(-self.c * d2);
        }
        let mut sum = 0.0;
        for i in 0..na {
            let e = (-self.c * self.d2[base + i] - max_log).exp();
            self.weights[base + i] = e;
            sum += e;
        }
        for i in 0..na {
            self.weights[base + i] /= sum;
        }
        self.ell[j] = max_log + sum.ln();
    }

    /// log Theta = sum_j log sum_i exp(-c d_ij^2).
    pub fn log_theta(&self) -> f64 {
        self.ell.iter().sum()
    }

    pub fn column_log_sums(&self) -> &[f64] {
        &self.ell
    }

    /// Gradient of log Theta with respect to each atom:
    /// grad_i = sum_j (-2c) (r_i - s_j) w_ij.
    pub fn grad_atoms(&self) -> Vec<Vec3> {
        let mut grad = vec![Vec3::zeros(); self.n_atoms];
        for j in 0..self.n_shadows {
            let base = j * self.n_atoms;
            for i in 0..self.n_atoms {
                grad[i] += self.disp[base + i] * (-2.0 * self.c * self.weights[base + i]);
            }
        }
        grad
    }

    /// Gradient of log Theta with respect to each shadow:
    /// grad_j = sum_i (+2c) (r_i - s_j) w_ij.
    pub fn grad_shadows(&self) -> Vec<Vec3> {
        let mut grad = vec![Vec3::zeros(); self.n_shadows];
        for j in 0..self.n_shadows {
            let base = j * self.n_atoms;
            let mut acc = Vec3::zeros();
            for i in 0..self.n_atoms {
                acc += self.disp[base + i] * self.weights[base + i];
            }
            grad[j] = acc * (2.0 * self.c);
        }
        grad
    }

    /// Per-atom gradient and Laplacian of log Theta in one pass, for the
    /// local energy.
    pub fn atom_derivatives(&self) -> (Vec<Vec3>, Vec<f64>) {
        let c = self.c;
        let mut grad = vec![Vec3::zeros(); self.n_atoms];
        let mut lap = vec![0.0; self.n_atoms];
        for j in 0..self.n_shadows {
            let base = j * self.n_atoms;
            for i in 0..self.n_atoms {
                let w = self.weights[base + i];
                let d2 = self.d2[base + i];
                grad[i] += self.disp[base + i] * (-2.0 * c * w);
                let c2d2 = 4.0 * c * c * d2;
                lap[i] += (c2d2 - 6.0 * c) * w - c2d2 * w * w;
            }
        }
        (grad, lap)
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_shadows(&self) -> usize {
        self.n_shadows
    }
}

/// log psi_a with per-atom gradient and Laplacian. A coincident pair sets
/// `log` to -inf; the derivative fields are not meaningful then and the
/// caller must reject the configuration.
#[derive(Debug, Clone)]
pub struct JastrowAtoms {
    pub log: f64,
    pub grad: Vec<Vec3>,
    pub lap: Vec<f64>,
}

/// Evaluates log psi_a(R) = -1/2 sum_{i<j} (b_a/r_ij)^5 and its derivatives.
pub fn eval_jastrow_atoms(r: &[Vec3], b_a: f64, bx: &SimBox) -> JastrowAtoms {
    let n = r.len();
    let mut out = JastrowAtoms {
        log: 0.0,
        grad: vec![Vec3::zeros(); n],
        lap: vec![0.0; n],
    };
    if b_a == 0.0 {
        return out;
    }
    let rc = bx.half_min_edge();
    let b5 = b_a.powi(5);
    for i in 0..n {
        for j in (i + 1)..n {
            let disp = bx.min_image_disp(r[i], r[j]);
            let d2 = disp.norm_squared();
            if d2 == 0.0 {
                out.log = f64::NEG_INFINITY;
                return out;
            }
            let d = d2.sqrt();
            if d >= rc {
                continue;
            }
            let inv7 = 1.0 / (d2 * d2 * d2 * d);
            let u = b5 * inv7 * d2; // (b/r)^5
            out.log -= 0.5 * u;
            // grad_i (-u/2) = 2.5 b^5 disp / r^7
            let g = disp * (2.5 * b5 * inv7);
            out.grad[i] += g;
            out.grad[j] -= g;
            // -1/2 (u'' + 2u'/r) = -10 b^5 / r^7
            let l = -10.0 * b5 * inv7;
            out.lap[i] += l;
            out.lap[j] += l;
        }
    }
    out
}

/// Value-only log psi_a, for estimator ratios.
pub fn log_psi_a(r: &[Vec3], b_a: f64, bx: &SimBox) -> f64 {
    if b_a == 0.0 {
        return 0.0;
    }
    let rc = bx.half_min_edge();
    let b5 = b_a.powi(5);
    let mut log = 0.0;
    for i in 0..r.len() {
        for j in (i + 1)..r.len() {
            let d2 = bx.min_image_disp(r[i], r[j]).norm_squared();
            if d2 == 0.0 {
                return f64::NEG_INFINITY;
            }
            let d = d2.sqrt();
            if d >= rc {
                continue;
            }
            log -= 0.5 * b5 / (d2 * d2 * d);
        }
    }
    log
}

/// log psi_s with per-shadow gradient.
#[derive(Debug, Clone)]
pub struct JastrowShadows {
    pub log: f64,
    pub grad: Vec<Vec3>,
}

/// Evaluates log psi_s(S) = -sum_{i<j} w(s_ij) and its gradient for the
/// active shadow correlation form.
pub fn eval_jastrow_shadows(
    s: &[Vec3],
    form: &ShadowForm,
    pot: &AzizPotential,
    bx: &SimBox,
) -> JastrowShadows {
    let n = s.len();
    let mut out = JastrowShadows { log: 0.0, grad: vec![Vec3::zeros(); n] };
    let rc = bx.half_min_edge();
    for i in 0..n {
        for j in (i + 1)..n {
            let disp = bx.min_image_disp(s[i], s[j]);
            let d = disp.norm();
            if d == 0.0 {
                out.log = f64::NEG_INFINITY;
                return out;
            }
            if d >= rc {
                continue;
            }
            let w = form.w(pot, d);
            if !w.is_finite() {
                out.log = f64::NEG_INFINITY;
                return out;
            }
            out.log -= w;
            let g = disp * (-form.dw_ds(pot, d) / d);
            out.grad[i] += g;
            out.grad[j] -= g;
        }
    }
    out
}

/// Value-only log psi_s.
pub fn log_psi_s(s: &[Vec3], form: &ShadowForm, pot: &AzizPotential, bx: &SimBox) -> f64 {
    let rc = bx.half_min_edge();
    let mut log = 0.0;
    for i in 0..s.len() {
        for j in (i + 1)..s.len() {
            let d = bx.min_image_dist(s[i], s[j]);
            if d == 0.0 {
                return f64::NEG_INFINITY;
            }
            if d >= rc {
                continue;
            }
            let w = form.w(pot, d);
            if !w.is_finite() {
                return f64::NEG_INFINITY;
            }
            log -= w;
        }
    }
    log
}

/// The five log-amplitudes of a sampled configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPsiParts {
    pub log_psi_a: f64,
    pub log_theta_s: f64,
    pub log_theta_sp: f64,
    pub log_psi_s: f64,
    pub log_psi_sp: f64,
}

impl LogPsiParts {
    /// log of the sampled weight psi_a^2 Theta Theta' psi_s psi_s'.
    pub fn total(&self) -> f64 {
        2.0 * self.log_psi_a
            + self.log_theta_s
            + self.log_theta_sp
            + self.log_psi_s
            + self.log_psi_sp
    }

    pub fn all_finite(&self) -> bool {
        self.log_psi_a.is_finite()
            && self.log_theta_s.is_finite()
            && self.log_theta_sp.is_finite()
            && self.log_psi_s.is_finite()
            && self.log_psi_sp.is_finite()
    }
}

/// Pseudoforce on the atoms: grad_R log[psi_a^2 Theta(R,S) Theta(R,S')].
pub fn grad_log_product(
    jastrow: &JastrowAtoms,
    kernel_s: &KernelState,
    kernel_sp: &KernelState,
) -> Vec<Vec3> {
    let gs = kernel_s.grad_atoms();
    let gsp = kernel_sp.grad_atoms();
    jastrow
        .grad
        .iter()
        .zip(gs.iter().zip(gsp.iter()))
        .map(|(ga, (g1, g2))| ga * 2.0 + g1 + g2)
        .collect()
}

/// Local energy split into kinetic and potential parts (kelvin, whole
/// configuration).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParts {
    pub kinetic: f64,
    pub potential: f64,
    pub total: f64,
}

/// Local energy of the product psi_a(R) Theta(R,S) at fixed shadows:
///
/// ```text
/// E_L = -D sum_i [ lap_i log(psi_a Theta) + |grad_i log(psi_a Theta)|^2 ]
///       + sum_{i<j} V(r_ij)
/// ```
///
/// The shadow Jastrow psi_s does not enter: the Hamiltonian acts on the
/// atom coordinates only. The pair potential uses minimum image with a
/// cutoff at half the smallest box edge; `tail_per_particle` (K) is added
/// as `n * tail_per_particle` when the standard tail correction is enabled,
/// and must be 0.0 otherwise.
pub fn local_energy(
    r: &[Vec3],
    jastrow: &JastrowAtoms,
    kernel: &KernelState,
    pot: &AzizPotential,
    bx: &SimBox,
    units: &UnitSystem,
    tail_per_particle: f64,
) -> EnergyParts {
    let n = r.len();
    if !jastrow.log.is_finite() {
        return EnergyParts {
            kinetic: f64::INFINITY,
            potential: f64::INFINITY,
            total: f64::INFINITY,
        };
    }
    let (kgrad, klap) = kernel.atom_derivatives();
    let mut sum = 0.0;
    for i in 0..n {
        let g = jastrow.grad[i] + kgrad[i];
        sum += jastrow.lap[i] + klap[i] + g.norm_squared();
    }
    let kinetic = -units.d * sum;

    let rc = bx.half_min_edge();
    let mut potential = n as f64 * tail_per_particle;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = bx.min_image_dist(r[i], r[j]);
            if d < rc {
                potential += pot.v_unchecked(d);
            }
        }
    }
    EnergyParts { kinetic, potential, total: kinetic + potential }
}
