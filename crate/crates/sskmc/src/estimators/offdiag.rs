//! Off-diagonal sampling mode for the one-body density matrix.
//!
//! The walker state is (R, r1', S, S'): the full atom set, a displaced
//! copy of one atom, and the two shadow sets. It samples
//!
//! ```text
//! P_od ~ [1 / (r^2 n_a(r))] psi_a(R) Theta(R,S) psi_s(S)
//!                          psi_a(R') Theta(R',S') psi_s(S')
//! ```
//!
//! where R' equals R with the displaced atom moved to r1' and
//! r = |r1 - r1'|. The guiding factor `1/(r^2 n_a)` flattens the visit
//! distribution over r; each visit is binned with weight `n_a(r)`, which
//! undoes the guiding and leaves an unnormalized rho1(r). The histogram is
//! then anchored at small r, where the direct estimator gives exactly 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    block_sem, condensate_fraction, CondensateResult, GuidingFunction, Histogram, NormMode,
};
use crate::geometry::{Configuration, SimBox, Vec3};
use crate::physics::{AzizPotential, UnitSystem};
use crate::sampler::{log_transition_density, Counter, RngStream};
use crate::wavefunction::{
    eval_jastrow_atoms, eval_jastrow_shadows, JastrowAtoms, JastrowShadows, KernelState,
    TrialParams,
};

/// Time steps and schedule of the off-diagonal walker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdMoveParams {
    pub tau_a: f64,
    pub tau_s: f64,
    /// Time step of the displaced-copy coordinate.
    pub tau_d: f64,
    pub n_atom_attempts: usize,
    pub n_shadow_attempts: usize,
    pub n_disp_attempts: usize,
    /// Probability that a displaced-copy attempt is a symmetric
    /// box-uniform teleport instead of a local drifted move; teleports let
    /// the walk cross between the small-r and plateau regions quickly.
    pub teleport_prob: f64,
    pub drift_clip: Option<f64>,
}

impl Default for OdMoveParams {
    fn default() -> Self {
        OdMoveParams {
            tau_a: 0.01,
            tau_s: 0.01,
            tau_d: 0.05,
            n_atom_attempts: 2,
            n_shadow_attempts: 3,
            n_disp_attempts: 3,
            teleport_prob: 0.25,
            // the guiding drift diverges like 2/r at contact; the cap is
            // applied identically in both transition densities
            drift_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OdStats {
    pub atoms: Counter,
    pub shadows_s: Counter,
    pub shadows_sp: Counter,
    pub disp_local: Counter,
    pub disp_teleport: Counter,
}

/// Off-diagonal configuration walker.
pub struct OdWalker {
    units: UnitSystem,
    bx: SimBox,
    pot: AzizPotential,
    params: TrialParams,
    guiding: GuidingFunction,
    displaced: usize,
    r: Vec<Vec3>,
    r1p: Vec3,
    s: Vec<Vec3>,
    sp: Vec<Vec3>,
    jast_r: JastrowAtoms,
    jast_rp: JastrowAtoms,
    jast_s: JastrowShadows,
    jast_sp: JastrowShadows,
    kernel_s: KernelState,
    kernel_sp: KernelState,
    pub move_params: OdMoveParams,
    rng: RngStream,
    pub stats: OdStats,
}

impl OdWalker {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        bx: SimBox,
        start: &Configuration,
        params: TrialParams,
        pot: AzizPotential,
        units: UnitSystem,
        guiding: GuidingFunction,
        move_params: OdMoveParams,
        mut rng: RngStream,
    ) -> Result<Self> {
        start.validate(&bx)?;
        let n = start.n();
        if n < 2 {
            return Err(Error::Config("off-diagonal mode needs at least 2 atoms".into()));
        }
        // the displaced atom is drawn at random; by exchange symmetry any
        // choice is equivalent in distribution
        let displaced = rng.index(n);
        let r = start.r.clone();
        let r1p = bx.wrap(r[displaced] + Vec3::new(0.53, 0.31, 0.17));
        let mut rp = r.clone();
        rp[displaced] = r1p;

        let jast_r = eval_jastrow_atoms(&r, params.b_a, &bx);
        let jast_rp = eval_jastrow_atoms(&rp, params.b_a, &bx);
        let jast_s = eval_jastrow_shadows(&start.s, &params.shadow, &pot, &bx);
        let jast_sp = eval_jastrow_shadows(&start.sp, &params.shadow, &pot, &bx);
        let kernel_s = KernelState::build(&r, &start.s, params.c, &bx);
        let kernel_sp = KernelState::build(&rp, &start.sp, params.c, &bx);
        let w = OdWalker {
            units,
            bx,
            pot,
            params,
            guiding,
            displaced,
            r,
            r1p,
            s: start.s.clone(),
            sp: start.sp.clone(),
            jast_r,
            jast_rp,
            jast_s,
            jast_sp,
            kernel_s,
            kernel_sp,
            move_params,
            rng,
            stats: OdStats::default(),
        };
        if !w.log_weight().is_finite() {
            return Err(Error::Config(
                "off-diagonal start configuration has zero weight".into(),
            ));
        }
        Ok(w)
    }

    pub fn displaced_index(&self) -> usize {
        self.displaced
    }

    /// |r1 - r1'| under minimum image.
    pub fn separation(&self) -> f64 {
        self.bx.min_image_dist(self.r[self.displaced], self.r1p)
    }

    fn guiding_log(&self, r: f64) -> f64 {
        let r = r.max(1e-12);
        -2.0 * r.ln() - self.guiding.value(r).ln()
    }

    /// log of the full sampled weight including the guiding factor.
    pub fn log_weight(&self) -> f64 {
        self.jast_r.log
            + self.kernel_s.log_theta()
            + self.jast_s.log
            + self.jast_rp.log
            + self.kernel_sp.log_theta()
            + self.jast_sp.log
            + self.guiding_log(self.separation())
    }

    /// Gradient of the guiding log-factor with respect to the real atom;
    /// the displaced copy feels the opposite sign.
    fn guiding_force(&self) -> Vec3 {
        let disp = self.bx.min_image_disp(self.r[self.displaced], self.r1p);
        let r = disp.norm().max(1e-12);
        let coef = -2.0 / r - self.guiding.dlog_dr(r);
        disp * (coef / r)
    }

    fn clip(&self, d: Vec3) -> Vec3 {
        match self.move_params.drift_clip {
            Some(cap) if d.norm() > cap => d * (cap / d.norm()),
            _ => d,
        }
    }

    fn metropolis(&mut self, log_q: f64) -> bool {
        if log_q >= 0.0 {
            return true;
        }
        (1.0 - self.rng.uniform()).ln() < log_q
    }

    fn attempt_atoms(&mut self) {
        self.stats.atoms.attempts += 1;
        let tau = self.move_params.tau_a;
        let d_tau = self.units.d * tau;
        let sigma = (2.0 * d_tau).sqrt();
        let d = self.displaced;

        let ks_grad = self.kernel_s.grad_atoms();
        let ksp_grad = self.kernel_sp.grad_atoms();
        let gf = self.guiding_force();
        let drift_cur: Vec<Vec3> = (0..self.r.len())
            .map(|k| {
                let mut f = self.jast_r.grad[k] + ks_grad[k];
                if k == d {
                    f += gf;
                } else {
                    f += self.jast_rp.grad[k] + ksp_grad[k];
                }
                self.clip(f * d_tau)
            })
            .collect();
        let r_new: Vec<Vec3> = self
            .r
            .iter()
            .zip(drift_cur.iter())
            .map(|(p, dr)| {
                let g = Vec3::new(self.rng.normal(), self.rng.normal(), self.rng.normal());
                self.bx.wrap(p + g * sigma + dr)
            })
            .collect();

        let jast_r = eval_jastrow_atoms(&r_new, self.params.b_a, &self.bx);
        if !jast_r.log.is_finite() {
            return;
        }
        let mut rp_new = r_new.clone();
        rp_new[d] = self.r1p;
        let jast_rp = eval_jastrow_atoms(&rp_new, self.params.b_a, &self.bx);
        if !jast_rp.log.is_finite() {
            return;
        }
        let kernel_s = KernelState::build(&r_new, &self.s, self.params.c, &self.bx);
        let kernel_sp = KernelState::build(&rp_new, &self.sp, self.params.c, &self.bx);
        let sep_new = self.bx.min_image_dist(r_new[d], self.r1p);

        let ks_grad_new = kernel_s.grad_atoms();
        let ksp_grad_new = kernel_sp.grad_atoms();
        let gf_new = {
            let disp = self.bx.min_image_disp(r_new[d], self.r1p);
            let r = disp.norm().max(1e-12);
            let coef = -2.0 / r - self.guiding.dlog_dr(r);
            disp * (coef / r)
        };
        let drift_new: Vec<Vec3> = (0..r_new.len())
            .map(|k| {
                let mut f = jast_r.grad[k] + ks_grad_new[k];
                if k == d {
                    f += gf_new;
                } else {
                    f += jast_rp.grad[k] + ksp_grad_new[k];
                }
                self.clip(f * d_tau)
            })
            .collect();

        let log_t_fwd = log_transition_density(&self.r, &r_new, &drift_cur, d_tau, &self.bx);
        let log_t_rev = log_transition_density(&r_new, &self.r, &drift_new, d_tau, &self.bx);
        let d_log = (jast_r.log - self.jast_r.log)
            + (kernel_s.log_theta() - self.kernel_s.log_theta())
            + (jast_rp.log - self.jast_rp.log)
            + (kernel_sp.log_theta() - self.kernel_sp.log_theta())
            + (self.guiding_log(sep_new) - self.guiding_log(self.separation()));
        let log_q = d_log + log_t_rev - log_t_fwd;
        if self.metropolis(log_q) {
            self.r = r_new;
            self.jast_r = jast_r;
            self.jast_rp = jast_rp;
            self.kernel_s = kernel_s;
            self.kernel_sp = kernel_sp;
            self.stats.atoms.accepts += 1;
        }
    }

    fn attempt_disp(&mut self) {
        let teleport = self.rng.uniform() < self.move_params.teleport_prob;
        if teleport {
            self.stats.disp_teleport.attempts += 1;
            let r1p_new = self.rng.uniform_in_box(&self.bx);
            if let Some((jast_rp, kernel_sp, d_log)) = self.eval_disp(r1p_new) {
                // box-uniform proposals are symmetric
                if self.metropolis(d_log) {
                    self.r1p = r1p_new;
                    self.jast_rp = jast_rp;
                    self.kernel_sp = kernel_sp;
                    self.stats.disp_teleport.accepts += 1;
                }
            }
            return;
        }
        self.stats.disp_local.attempts += 1;
        let tau = self.move_params.tau_d;
        let d_tau = self.units.d * tau;
        let sigma = (2.0 * d_tau).sqrt();
        let force = self.disp_force(self.r1p, &self.jast_rp, &self.kernel_sp);
        let drift_cur = self.clip(force * d_tau);
        let g = Vec3::new(self.rng.normal(), self.rng.normal(), self.rng.normal());
        let r1p_new = self.bx.wrap(self.r1p + g * sigma + drift_cur);
        if let Some((jast_rp, kernel_sp, d_log)) = self.eval_disp(r1p_new) {
            let force_new = self.disp_force(r1p_new, &jast_rp, &kernel_sp);
            let drift_new = self.clip(force_new * d_tau);
            let log_t_fwd =
                log_transition_density(&[self.r1p], &[r1p_new], &[drift_cur], d_tau, &self.bx);
            let log_t_rev =
                log_transition_density(&[r1p_new], &[self.r1p], &[drift_new], d_tau, &self.bx);
            let log_q = d_log + log_t_rev - log_t_fwd;
            if self.metropolis(log_q) {
                self.r1p = r1p_new;
                self.jast_rp = jast_rp;
                self.kernel_sp = kernel_sp;
                self.stats.disp_local.accepts += 1;
            }
        }
    }

    /// Pseudoforce on the displaced copy at position `at`, given caches for
    /// the corresponding primed state.
    fn disp_force(&self, at: Vec3, jast_rp: &JastrowAtoms, kernel_sp: &KernelState) -> Vec3 {
        let d = self.displaced;
        let disp = self.bx.min_image_disp(at, self.r[d]);
        let r = disp.norm().max(1e-12);
        let coef = -2.0 / r - self.guiding.dlog_dr(r);
        jast_rp.grad[d] + kernel_sp.grad_atoms()[d] + disp * (coef / r)
    }

    /// Weight pieces for a displaced-copy position; None when the primed
    /// Jastrow hits the overlap sentinel.
    fn eval_disp(&self, r1p_new: Vec3) -> Option<(JastrowAtoms, KernelState, f64)> {
        let d = self.displaced;
        let mut rp_new = self.r.clone();
        rp_new[d] = r1p_new;
        let jast_rp = eval_jastrow_atoms(&rp_new, self.params.b_a, &self.bx);
        if !jast_rp.log.is_finite() {
            return None;
        }
        let kernel_sp = KernelState::build(&rp_new, &self.sp, self.params.c, &self.bx);
        let sep_new = self.bx.min_image_dist(self.r[d], r1p_new);
        let d_log = (jast_rp.log - self.jast_rp.log)
            + (kernel_sp.log_theta() - self.kernel_sp.log_theta())
            + (self.guiding_log(sep_new) - self.guiding_log(self.separation()));
        Some((jast_rp, kernel_sp, d_log))
    }

    fn attempt_shadows(&mut self, primed: bool) {
        let counter = if primed {
            self.stats.shadows_sp.attempts += 1;
            true
        } else {
            self.stats.shadows_s.attempts += 1;
            false
        };
        let tau = self.move_params.tau_s;
        let d_tau = self.units.d * tau;
        let sigma = (2.0 * d_tau).sqrt();

        let (cur, cur_log, atoms): (Vec<Vec3>, f64, Vec<Vec3>) = if primed {
            let mut rp = self.r.clone();
            rp[self.displaced] = self.r1p;
            (
                self.sp.clone(),
                self.kernel_sp.log_theta() + self.jast_sp.log,
                rp,
            )
        } else {
            (
                self.s.clone(),
                self.kernel_s.log_theta() + self.jast_s.log,
                self.r.clone(),
            )
        };
        let (kernel, jast) = if primed {
            (&self.kernel_sp, &self.jast_sp)
        } else {
            (&self.kernel_s, &self.jast_s)
        };
        let f_cur: Vec<Vec3> = kernel
            .grad_shadows()
            .iter()
            .zip(jast.grad.iter())
            .map(|(a, b)| a + b)
            .collect();
        let drift_cur: Vec<Vec3> = f_cur.iter().map(|f| self.clip(f * d_tau)).collect();
        let s_new: Vec<Vec3> = cur
            .iter()
            .zip(drift_cur.iter())
            .map(|(p, dr)| {
                let g = Vec3::new(self.rng.normal(), self.rng.normal(), self.rng.normal());
                self.bx.wrap(p + g * sigma + dr)
            })
            .collect();

        let jast_new = eval_jastrow_shadows(&s_new, &self.params.shadow, &self.pot, &self.bx);
        if !jast_new.log.is_finite() {
            return;
        }
        let kernel_new = KernelState::build(&atoms, &s_new, self.params.c, &self.bx);
        let f_new: Vec<Vec3> = kernel_new
            .grad_shadows()
            .iter()
            .zip(jast_new.grad.iter())
            .map(|(a, b)| a + b)
            .collect();
        let drift_new: Vec<Vec3> = f_new.iter().map(|f| self.clip(f * d_tau)).collect();
        let log_t_fwd = log_transition_density(&cur, &s_new, &drift_cur, d_tau, &self.bx);
        let log_t_rev = log_transition_density(&s_new, &cur, &drift_new, d_tau, &self.bx);
        let log_q =
            kernel_new.log_theta() + jast_new.log - cur_log + log_t_rev - log_t_fwd;
        if self.metropolis(log_q) {
            if counter {
                self.sp = s_new;
                self.jast_sp = jast_new;
                self.kernel_sp = kernel_new;
                self.stats.shadows_sp.accepts += 1;
            } else {
                self.s = s_new;
                self.jast_s = jast_new;
                self.kernel_s = kernel_new;
                self.stats.shadows_s.accepts += 1;
            }
        }
    }

    /// One off-diagonal Monte Carlo step.
    pub fn step(&mut self) {
        for _ in 0..self.move_params.n_atom_attempts {
            self.attempt_atoms();
        }
        for _ in 0..self.move_params.n_shadow_attempts {
            self.attempt_shadows(false);
        }
        for _ in 0..self.move_params.n_shadow_attempts {
            self.attempt_shadows(true);
        }
        for _ in 0..self.move_params.n_disp_attempts {
            self.attempt_disp();
        }
    }

    /// Bins the current separation with the guiding weight.
    pub fn measure(&self, hist: &mut Histogram) {
        let r = self.separation();
        hist.record_weighted(r, self.guiding.value(r));
        hist.end_sample();
    }

    /// Equilibration with optional ~50% acceptance tuning.
    pub fn equilibrate(&mut self, steps: usize, tune: bool) {
        const WINDOW: usize = 100;
        const TARGET: f64 = 0.5;
        let mut mark = self.stats;
        for step in 0..steps {
            self.step();
            if tune && (step + 1) % WINDOW == 0 {
                let rate = |now: Counter, then: Counter| {
                    let att = now.attempts - then.attempts;
                    if att == 0 {
                        TARGET
                    } else {
                        (now.accepts - then.accepts) as f64 / att as f64
                    }
                };
                let adjust =
                    |tau: f64, r: f64| (tau * (r / TARGET).clamp(0.5, 2.0)).clamp(1e-8, 10.0);
                self.move_params.tau_a =
                    adjust(self.move_params.tau_a, rate(self.stats.atoms, mark.atoms));
                let s_rate = 0.5
                    * (rate(self.stats.shadows_s, mark.shadows_s)
                        + rate(self.stats.shadows_sp, mark.shadows_sp));
                self.move_params.tau_s = adjust(self.move_params.tau_s, s_rate);
                self.move_params.tau_d = adjust(
                    self.move_params.tau_d,
                    rate(self.stats.disp_local, mark.disp_local),
                );
                mark = self.stats;
            }
        }
        self.stats = OdStats::default();
    }
}

/// Settings of an off-diagonal run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffdiagRunConfig {
    pub dr: f64,
    pub equil_steps: usize,
    pub steps: usize,
    /// Number of small-r bins averaged for the normalization anchor.
    pub norm_bins: usize,
    /// Anchor value; 1.0 is the exact r -> 0 limit of the direct
    /// estimator. A measured direct-run small-r level may be used instead.
    pub norm_anchor: f64,
    /// Plateau window in angstrom; None = [0.35 r_max, r_max].
    pub plateau_window: Option<(f64, f64)>,
    pub n_blocks: usize,
}

impl Default for OffdiagRunConfig {
    fn default() -> Self {
        OffdiagRunConfig {
            dr: 0.1,
            equil_steps: 8000,
            steps: 200_000,
            norm_bins: 3,
            norm_anchor: 1.0,
            plateau_window: None,
            n_blocks: 64,
        }
    }
}

/// Result bundle of an off-diagonal run.
#[derive(Debug, Clone)]
pub struct OffdiagResult {
    /// Normalized rho1(r) curve.
    pub curve: Vec<(f64, f64)>,
    pub n0: CondensateResult,
    pub norm_const: f64,
    pub displaced: usize,
    pub stats: OdStats,
    pub tuned: OdMoveParams,
    pub hist: Histogram,
}

/// Runs the dedicated off-diagonal simulation and extracts the normalized
/// rho1 curve and its plateau.
#[allow(clippy::too_many_arguments)]
pub fn run_rho1_offdiagonal(
    bx: SimBox,
    start: &Configuration,
    params: TrialParams,
    pot: AzizPotential,
    units: UnitSystem,
    guiding: GuidingFunction,
    move_params: OdMoveParams,
    cfg: &OffdiagRunConfig,
    rng: RngStream,
) -> Result<OffdiagResult> {
    let r_max = bx.half_min_edge();
    let block_len = (cfg.steps as u64 / cfg.n_blocks.max(1) as u64).max(1);
    let mut hist = Histogram::new(NormMode::OffDiagWeighted, cfg.dr, r_max, block_len)?;
    let mut walker = OdWalker::new(bx, start, params, pot, units, guiding, move_params, rng)?;
    walker.equilibrate(cfg.equil_steps, true);
    for _ in 0..cfg.steps {
        walker.step();
        walker.measure(&mut hist);
    }
    let norm = hist.offdiag_normalization(cfg.norm_bins, cfg.norm_anchor)?;
    let curve = hist.offdiag_curve(norm);
    let window = cfg
        .plateau_window
        .unwrap_or((0.35 * r_max, r_max));
    let mut n0 = condensate_fraction(&curve, window)?;
    n0.error = block_sem(&hist.window_block_values(window, Some(norm)));
    Ok(OffdiagResult {
        curve,
        n0,
        norm_const: norm,
        displaced: walker.displaced_index(),
        stats: walker.stats,
        tuned: walker.move_params,
        hist,
    })
}
