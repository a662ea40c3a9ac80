//! Smart (drifted-Gaussian) Metropolis sampling of the probability density
//! `P(R,S,S') ~ psi_a^2(R) Theta(R,S) psi_s(S) Theta(R,S') psi_s(S')`.
//!
//! Moves displace all particles of one set at once. Atoms drift along
//! `F_a = grad_R log[psi_a^2 Theta Theta']`; each shadow set drifts along
//! `F_s = grad_S log[Theta(R,S) psi_s(S)]`. Acceptance uses the exact
//! transition-density ratio, so detailed balance holds for any time step.
//! One Monte Carlo step is the paper schedule: `n_atom_attempts` all-atom
//! attempts, then `n_shadow_attempts` attempts for S and for S'.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Configuration, SimBox, Vec3};
use crate::physics::{AzizPotential, UnitSystem};
use crate::wavefunction::{
    eval_jastrow_atoms, eval_jastrow_shadows, grad_log_product, local_energy, EnergyParts,
    JastrowAtoms, JastrowShadows, KernelState, LogPsiParts, TrialParams,
};

/// Time steps and per-step schedule of the move mix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveParams {
    /// Atom time step; D * tau_a has units of A^2.
    pub tau_a: f64,
    /// Shadow time step.
    pub tau_s: f64,
    /// All-atom attempts per Monte Carlo step.
    pub n_atom_attempts: usize,
    /// Attempts per shadow set per Monte Carlo step.
    pub n_shadow_attempts: usize,
    /// Optional per-particle drift magnitude cap (A). Applied identically
    /// in the proposal and in both transition densities, so detailed
    /// balance is preserved.
    pub drift_clip: Option<f64>,
}

impl Default for MoveParams {
    fn default() -> Self {
        MoveParams {
            tau_a: 0.01,
            tau_s: 0.01,
            n_atom_attempts: 2,
            n_shadow_attempts: 3,
            drift_clip: None,
        }
    }
}

impl MoveParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau_a <= 0.0 || self.tau_s <= 0.0 {
            return Err(Error::Config("time steps must be positive".into()));
        }
        if self.n_atom_attempts == 0 || self.n_shadow_attempts == 0 {
            return Err(Error::Config("schedule counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Serializable RNG position for checkpointing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

/// Counter-based generator (ChaCha12) wrapped with the seed/stream pair so
/// a walker's trajectory is reproducible and sub-streams never collide.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha12";

    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut s = Self::new(state.seed, state.stream);
        s.rng.set_word_pos(state.word_pos);
        s
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn uniform_in_box(&mut self, bx: &SimBox) -> Vec3 {
        Vec3::new(
            self.uniform() * bx.lx,
            self.uniform() * bx.ly,
            self.uniform() * bx.lz,
        )
    }
}

/// Log of the drifted-Gaussian transition density
/// `T(from -> to) = (4 pi D tau)^(-3N/2) exp(-|to - from - drift|^2 / (4 D tau))`,
/// with the displacement taken under the nearest-image convention. The
/// normalization cancels in acceptance ratios at equal tau but is kept so
/// the density itself is auditable.
pub fn log_transition_density(
    from: &[Vec3],
    to: &[Vec3],
    drift: &[Vec3],
    d_tau: f64,
    bx: &SimBox,
) -> f64 {
    let mut ssq = 0.0;
    for i in 0..from.len() {
        let d = bx.min_image_disp(to[i], from[i]) - drift[i];
        ssq += d.norm_squared();
    }
    let norm = -(1.5 * from.len() as f64) * (4.0 * std::f64::consts::PI * d_tau).ln();
    norm - ssq / (4.0 * d_tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShadowSet {
    S,
    Sp,
}

/// A proposed all-atom move with everything needed to accept it.
pub struct AtomProposal {
    pub r_new: Vec<Vec3>,
    /// log q_a; -inf when the proposal hits the overlap sentinel.
    pub log_q: f64,
    pub log_t_fwd: f64,
    pub log_t_rev: f64,
    pub valid: bool,
    jast: Option<JastrowAtoms>,
    kernel_s: Option<KernelState>,
    kernel_sp: Option<KernelState>,
}

/// A proposed all-shadow move of one set.
pub struct ShadowProposal {
    pub set: ShadowSet,
    pub s_new: Vec<Vec3>,
    pub log_q: f64,
    pub log_t_fwd: f64,
    pub log_t_rev: f64,
    pub valid: bool,
    jast: Option<JastrowShadows>,
    kernel: Option<KernelState>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counter {
    pub attempts: u64,
    pub accepts: u64,
}

impl Counter {
    pub fn rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepts as f64 / self.attempts as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveStats {
    pub atoms: Counter,
    pub shadows_s: Counter,
    pub shadows_sp: Counter,
}

/// One walker: a sequential Markov chain over (R, S, S') with cached
/// log-amplitudes, owned RNG stream, and move statistics.
pub struct Walker {
    units: UnitSystem,
    bx: SimBox,
    pot: AzizPotential,
    params: TrialParams,
    tail_pp: f64,
    pub move_params: MoveParams,
    r: Vec<Vec3>,
    s: Vec<Vec3>,
    sp: Vec<Vec3>,
    jast_r: JastrowAtoms,
    jast_s: JastrowShadows,
    jast_sp: JastrowShadows,
    kernel_s: KernelState,
    kernel_sp: KernelState,
    pub rng: RngStream,
    pub stats: MoveStats,
}

impl Walker {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        bx: SimBox,
        cfg: Configuration,
        params: TrialParams,
        pot: AzizPotential,
        units: UnitSystem,
        move_params: MoveParams,
        tail_correction: bool,
        rng: RngStream,
    ) -> Result<Self> {
        move_params.validate()?;
        params.pseudopotentials().validate_atoms_only()?;
        cfg.validate(&bx)?;
        let tail_pp = if tail_correction {
            pot.tail_per_particle(units.density_to_inv_a3(bx.rho_sigma3), bx.half_min_edge())
        } else {
            0.0
        };
        let jast_r = eval_jastrow_atoms(&cfg.r, params.b_a, &bx);
        let jast_s = eval_jastrow_shadows(&cfg.s, &params.shadow, &pot, &bx);
        let jast_sp = eval_jastrow_shadows(&cfg.sp, &params.shadow, &pot, &bx);
        let kernel_s = KernelState::build(&cfg.r, &cfg.s, params.c, &bx);
        let kernel_sp = KernelState::build(&cfg.r, &cfg.sp, params.c, &bx);
        let walker = Walker {
            units,
            bx,
            pot,
            params,
            tail_pp,
            move_params,
            r: cfg.r,
            s: cfg.s,
            sp: cfg.sp,
            jast_r,
            jast_s,
            jast_sp,
            kernel_s,
            kernel_sp,
            rng,
            stats: MoveStats::default(),
        };
        if !walker.log_psi_parts().all_finite() {
            return Err(Error::Config(
                "initial configuration has zero weight (overlapping particles)".into(),
            ));
        }
        Ok(walker)
    }

    pub fn bx(&self) -> &SimBox {
        &self.bx
    }

    pub fn units(&self) -> &UnitSystem {
        &self.units
    }

    pub fn params(&self) -> &TrialParams {
        &self.params
    }

    pub fn potential(&self) -> &AzizPotential {
        &self.pot
    }

    pub fn tail_per_particle(&self) -> f64 {
        self.tail_pp
    }

    pub fn positions(&self) -> (&[Vec3], &[Vec3], &[Vec3]) {
        (&self.r, &self.s, &self.sp)
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    pub fn configuration(&self) -> Configuration {
        Configuration { r: self.r.clone(), s: self.s.clone(), sp: self.sp.clone() }
    }

    /// Debug dump of the five log-amplitudes.
    pub fn log_psi_parts(&self) -> LogPsiParts {
        LogPsiParts {
            log_psi_a: self.jast_r.log,
            log_theta_s: self.kernel_s.log_theta(),
            log_theta_sp: self.kernel_sp.log_theta(),
            log_psi_s: self.jast_s.log,
            log_psi_sp: self.jast_sp.log,
        }
    }

    /// Atom pseudoforce F_a at the current state.
    pub fn pseudoforce_atoms(&self) -> Vec<Vec3> {
        grad_log_product(&self.jast_r, &self.kernel_s, &self.kernel_sp)
    }

    /// Shadow pseudoforce F_s (or F_s') at the current state.
    pub fn pseudoforce_shadows(&self, set: ShadowSet) -> Vec<Vec3> {
        let (kernel, jast) = match set {
            ShadowSet::S => (&self.kernel_s, &self.jast_s),
            ShadowSet::Sp => (&self.kernel_sp, &self.jast_sp),
        };
        kernel
            .grad_shadows()
            .iter()
            .zip(jast.grad.iter())
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Turns a pseudoforce into the drift D tau F, applying the optional
    /// per-particle cap.
    fn drift(&self, force: &[Vec3], tau: f64) -> Vec<Vec3> {
        let scale = self.units.d * tau;
        force
            .iter()
            .map(|f| {
                let d = f * scale;
                match self.move_params.drift_clip {
                    Some(cap) if d.norm() > cap => d * (cap / d.norm()),
                    _ => d,
                }
            })
            .collect()
    }

    fn displace(&mut self, from: &[Vec3], drift: &[Vec3], tau: f64) -> Vec<Vec3> {
        let sigma = (2.0 * self.units.d * tau).sqrt();
        from.iter()
            .zip(drift.iter())
            .map(|(p, d)| {
                let g = Vec3::new(self.rng.normal(), self.rng.normal(), self.rng.normal());
                self.bx.wrap(p + g * sigma + d)
            })
            .collect()
    }

    /// Proposes an all-atom move: R_p = R + sqrt(2 D tau_a) g + D tau_a F_a.
    pub fn propose_atoms(&mut self) -> AtomProposal {
        let tau = self.move_params.tau_a;
        let f_cur = self.pseudoforce_atoms();
        let drift_cur = self.drift(&f_cur, tau);
        let r_new = self.displace(&self.r.clone(), &drift_cur, tau);
        let d_tau = self.units.d * tau;

        let jast = eval_jastrow_atoms(&r_new, self.params.b_a, &self.bx);
        if !jast.log.is_finite() {
            return AtomProposal {
                r_new,
                log_q: f64::NEG_INFINITY,
                log_t_fwd: 0.0,
                log_t_rev: 0.0,
                valid: false,
                jast: None,
                kernel_s: None,
                kernel_sp: None,
            };
        }
        let kernel_s = KernelState::build(&r_new, &self.s, self.params.c, &self.bx);
        let kernel_sp = KernelState::build(&r_new, &self.sp, self.params.c, &self.bx);
        let f_new = grad_log_product(&jast, &kernel_s, &kernel_sp);
        let drift_new = self.drift(&f_new, tau);

        let log_t_fwd = log_transition_density(&self.r, &r_new, &drift_cur, d_tau, &self.bx);
        let log_t_rev = log_transition_density(&r_new, &self.r, &drift_new, d_tau, &self.bx);
        let d_amp = 2.0 * (jast.log - self.jast_r.log)
            + (kernel_s.log_theta() - self.kernel_s.log_theta())
            + (kernel_sp.log_theta() - self.kernel_sp.log_theta());
        AtomProposal {
            r_new,
            log_q: d_amp + log_t_rev - log_t_fwd,
            log_t_fwd,
            log_t_rev,
            valid: true,
            jast: Some(jast),
            kernel_s: Some(kernel_s),
            kernel_sp: Some(kernel_sp),
        }
    }

    /// Metropolis test for a proposed atom move; adopts the state when
    /// accepted.
    pub fn accept_atoms(&mut self, prop: AtomProposal) -> bool {
        self.stats.atoms.attempts += 1;
        if !prop.valid || !self.metropolis(prop.log_q) {
            return false;
        }
        self.r = prop.r_new;
        self.jast_r = prop.jast.expect("valid proposal carries caches");
        self.kernel_s = prop.kernel_s.expect("valid proposal carries caches");
        self.kernel_sp = prop.kernel_sp.expect("valid proposal carries caches");
        self.stats.atoms.accepts += 1;
        true
    }

    /// Proposes an all-shadow move for one set; the other set does not
    /// enter.
    pub fn propose_shadows(&mut self, set: ShadowSet) -> ShadowProposal {
        let tau = self.move_params.tau_s;
        let d_tau = self.units.d * tau;
        let f_cur = self.pseudoforce_shadows(set);
        let drift_cur = self.drift(&f_cur, tau);
        let (cur, cur_log) = match set {
            ShadowSet::S => (self.s.clone(), self.kernel_s.log_theta() + self.jast_s.log),
            ShadowSet::Sp => (self.sp.clone(), self.kernel_sp.log_theta() + self.jast_sp.log),
        };
        let s_new = self.displace(&cur, &drift_cur, tau);

        let jast = eval_jastrow_shadows(&s_new, &self.params.shadow, &self.pot, &self.bx);
        if !jast.log.is_finite() {
            return ShadowProposal {
                set,
                s_new,
                log_q: f64::NEG_INFINITY,
                log_t_fwd: 0.0,
                log_t_rev: 0.0,
                valid: false,
                jast: None,
                kernel: None,
            };
        }
        let kernel = KernelState::build(&self.r, &s_new, self.params.c, &self.bx);
        let f_new: Vec<Vec3> = kernel
            .grad_shadows()
            .iter()
            .zip(jast.grad.iter())
            .map(|(a, b)| a + b)
            .collect();
        let drift_new = self.drift(&f_new, tau);
        let log_t_fwd = log_transition_density(&cur, &s_new, &drift_cur, d_tau, &self.bx);
        let log_t_rev = log_transition_density(&s_new, &cur, &drift_new, d_tau, &self.bx);
        let d_amp = kernel.log_theta() + jast.log - cur_log;
        ShadowProposal {
            set,
            s_new,
            log_q: d_amp + log_t_rev - log_t_fwd,
            log_t_fwd,
            log_t_rev,
            valid: true,
            jast: Some(jast),
            kernel: Some(kernel),
        }
    }

    /// Metropolis test for a proposed shadow move; adopts on acceptance.
    pub fn accept_shadows(&mut self, prop: ShadowProposal) -> bool {
        let counter = match prop.set {
            ShadowSet::S => &mut self.stats.shadows_s,
            ShadowSet::Sp => &mut self.stats.shadows_sp,
        };
        counter.attempts += 1;
        if !prop.valid || !self.metropolis(prop.log_q) {
            return false;
        }
        let jast = prop.jast.expect("valid proposal carries caches");
        let kernel = prop.kernel.expect("valid proposal carries caches");
        match prop.set {
            ShadowSet::S => {
                self.s = prop.s_new;
                self.jast_s = jast;
                self.kernel_s = kernel;
                self.stats.shadows_s.accepts += 1;
            }
            ShadowSet::Sp => {
                self.sp = prop.s_new;
                self.jast_sp = jast;
                self.kernel_sp = kernel;
                self.stats.shadows_sp.accepts += 1;
            }
        }
        true
    }

    fn metropolis(&mut self, log_q: f64) -> bool {
        if log_q >= 0.0 {
            return true;
        }
        // 1 - u lies in (0, 1], so the log never traps on exactly zero
        (1.0 - self.rng.uniform()).ln() < log_q
    }

    /// One Monte Carlo step: the (atoms, S, S') attempt schedule.
    pub fn mc_step(&mut self) {
        for _ in 0..self.move_params.n_atom_attempts {
            let prop = self.propose_atoms();
            self.accept_atoms(prop);
        }
        for _ in 0..self.move_params.n_shadow_attempts {
            let prop = self.propose_shadows(ShadowSet::S);
            self.accept_shadows(prop);
        }
        for _ in 0..self.move_params.n_shadow_attempts {
            let prop = self.propose_shadows(ShadowSet::Sp);
            self.accept_shadows(prop);
        }
    }

    /// Local energy against one shadow set.
    pub fn local_energy(&self, set: ShadowSet) -> EnergyParts {
        let kernel = match set {
            ShadowSet::S => &self.kernel_s,
            ShadowSet::Sp => &self.kernel_sp,
        };
        local_energy(&self.r, &self.jast_r, kernel, &self.pot, &self.bx, &self.units, self.tail_pp)
    }

    /// Exchanges the two shadow sets. All estimator distributions are
    /// invariant under this swap.
    pub fn swap_shadow_sets(&mut self) {
        std::mem::swap(&mut self.s, &mut self.sp);
        std::mem::swap(&mut self.jast_s, &mut self.jast_sp);
        std::mem::swap(&mut self.kernel_s, &mut self.kernel_sp);
    }

    /// Runs `steps` Monte Carlo steps, optionally retuning the time steps
    /// every 100 steps toward ~50% acceptance. Tuning is for equilibration
    /// only; measurement phases must run with frozen time steps.
    pub fn equilibrate(&mut self, steps: usize, tune: bool) {
        const WINDOW: usize = 100;
        const TARGET: f64 = 0.5;
        let mut mark = self.stats;
        for step in 0..steps {
            self.mc_step();
            if tune && (step + 1) % WINDOW == 0 {
                let window_rate = |now: Counter, then: Counter| {
                    let att = now.attempts - then.attempts;
                    if att == 0 {
                        TARGET
                    } else {
                        (now.accepts - then.accepts) as f64 / att as f64
                    }
                };
                let atom_rate = window_rate(self.stats.atoms, mark.atoms);
                let s_rate = 0.5
                    * (window_rate(self.stats.shadows_s, mark.shadows_s)
                        + window_rate(self.stats.shadows_sp, mark.shadows_sp));
                let adjust = |tau: f64, rate: f64| {
                    (tau * (rate / TARGET).clamp(0.5, 2.0)).clamp(1e-8, 10.0)
                };
                self.move_params.tau_a = adjust(self.move_params.tau_a, atom_rate);
                self.move_params.tau_s = adjust(self.move_params.tau_s, s_rate);
                mark = self.stats;
            }
        }
        self.stats = MoveStats::default();
    }
}

impl crate::physics::PseudoPotentials {
    /// The shadow form is allowed to be inactive (beta = 0) in toy runs,
    /// so walkers validate b_a only.
    fn validate_atoms_only(&self) -> Result<()> {
        if self.b_a < 0.0 {
            return Err(Error::Config(format!("b_a must be >= 0 (got {})", self.b_a)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_fcc;
    use crate::physics::{ShadowForm, SIGMA};
    use approx::assert_relative_eq;

    fn liquid_params() -> TrialParams {
        TrialParams::from_reduced(
            1.12,
            6.0,
            ShadowForm::RescaledAziz { beta: 0.060, alpha: 0.883 },
            &UnitSystem::default(),
        )
    }

    fn free_params() -> TrialParams {
        TrialParams {
            b_a: 0.0,
            c: 0.0,
            shadow: ShadowForm::RescaledAziz { beta: 0.0, alpha: 1.0 },
        }
    }

    fn small_walker(params: TrialParams, seed: u64) -> Walker {
        let units = UnitSystem::default();
        let (bx, cfg) = build_fcc((2, 2, 2), 0.365, &units).unwrap();
        Walker::new(
            bx,
            cfg,
            params,
            AzizPotential::builtin(),
            units,
            MoveParams::default(),
            false,
            RngStream::new(seed, 0),
        )
        .unwrap()
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let mut a = RngStream::new(9, 0);
        let mut b = RngStream::new(9, 0);
        let mut c = RngStream::new(9, 1);
        let xa: Vec<f64> = (0..16).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..16).map(|_| b.uniform()).collect();
        let xc: Vec<f64> = (0..16).map(|_| c.uniform()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        // resume from a saved position
        let state = a.state();
        let tail: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let mut resumed = RngStream::from_state(&state);
        let tail2: Vec<f64> = (0..8).map(|_| resumed.uniform()).collect();
        assert_eq!(tail, tail2);
    }

    #[test]
    fn tiny_time_step_is_degenerate() {
        let mut w = small_walker(liquid_params(), 1);
        w.move_params.tau_a = 1e-30;
        let r_before = w.positions().0.to_vec();
        let prop = w.propose_atoms();
        for (a, b) in prop.r_new.iter().zip(r_before.iter()) {
            assert!(w.bx().min_image_dist(*a, *b) < 1e-12);
        }
        assert!(prop.log_q.is_finite());
    }

    #[test]
    fn transition_density_properties() {
        let w = small_walker(liquid_params(), 2);
        let bx = *w.bx();
        let mut rng = RngStream::new(5, 3);
        let n = 6;
        let from: Vec<Vec3> = (0..n).map(|_| rng.uniform_in_box(&bx)).collect();
        let drift: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal()) * 0.05)
            .collect();
        let d_tau = 0.06;
        // maximal density exactly at to = from + drift
        let peak: Vec<Vec3> = from
            .iter()
            .zip(drift.iter())
            .map(|(p, d)| bx.wrap(p + d))
            .collect();
        let log_peak = log_transition_density(&from, &peak, &drift, d_tau, &bx);
        assert_relative_eq!(
            log_peak,
            -(1.5 * n as f64) * (4.0 * std::f64::consts::PI * d_tau).ln(),
            max_relative = 1e-10
        );
        let to: Vec<Vec3> = (0..n).map(|_| rng.uniform_in_box(&bx)).collect();
        assert!(log_transition_density(&from, &to, &drift, d_tau, &bx) < log_peak);
        // symmetric with no drift
        let zero = vec![Vec3::zeros(); n];
        assert_relative_eq!(
            log_transition_density(&from, &to, &zero, d_tau, &bx),
            log_transition_density(&to, &from, &zero, d_tau, &bx),
            max_relative = 1e-12
        );
        // independent scalar recomputation over flattened coordinates
        let mut ssq = 0.0;
        for i in 0..n {
            let d = bx.min_image_disp(to[i], from[i]) - drift[i];
            for axis in 0..3 {
                ssq += d[axis] * d[axis];
            }
        }
        let expect = -(3.0 * n as f64 / 2.0) * (4.0 * std::f64::consts::PI * d_tau).ln()
            - ssq / (4.0 * d_tau);
        assert_relative_eq!(
            log_transition_density(&from, &to, &drift, d_tau, &bx),
            expect,
            max_relative = 1e-10
        );
    }

    #[test]
    fn pure_gaussian_displacement_when_force_vanishes() {
        // free amplitudes: F_a = 0, displacements are N(0, 2 D tau) per
        // coordinate; chi-square test against the binned normal law
        let mut w = small_walker(free_params(), 4);
        w.move_params.tau_a = 0.02;
        let sigma = (2.0 * w.units().d * w.move_params.tau_a).sqrt();
        let r0 = w.positions().0.to_vec();
        let mut samples = Vec::new();
        while samples.len() < 100_000 {
            let prop = w.propose_atoms();
            for (p, q) in prop.r_new.iter().zip(r0.iter()) {
                let d = w.bx().min_image_disp(*p, *q);
                samples.push(d.x / sigma);
                samples.push(d.y / sigma);
                samples.push(d.z / sigma);
            }
            // never accept: keep the reference point fixed
        }
        let edges: Vec<f64> = (-4..=4).map(|k| k as f64 * 0.5).collect();
        let mut counts = vec![0usize; edges.len() + 1];
        for &z in &samples {
            let mut bin = 0;
            while bin < edges.len() && z > edges[bin] {
                bin += 1;
            }
            counts[bin] += 1;
        }
        let phi = |x: f64| 0.5 * (1.0 + erf(x / 2.0f64.sqrt()));
        let mut chi2 = 0.0;
        for (b, &obs) in counts.iter().enumerate() {
            let lo = if b == 0 { 0.0 } else { phi(edges[b - 1]) };
            let hi = if b == edges.len() { 1.0 } else { phi(edges[b]) };
            let expect = samples.len() as f64 * (hi - lo);
            chi2 += (obs as f64 - expect).powi(2) / expect;
        }
        // 10 bins, dof = 9; chi2 > 27.9 has p < 0.001
        assert!(chi2 < 30.0, "chi2 = {chi2}");
    }

    fn erf(x: f64) -> f64 {
        // Abramowitz & Stegun 7.1.26, enough for binning tests
        let sign = x.signum();
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
                + 0.254829592)
                * t
                * (-x * x).exp();
        sign * y
    }

    #[test]
    fn mean_displacement_follows_the_drift() {
        let mut w = small_walker(liquid_params(), 6);
        w.equilibrate(50, true);
        w.move_params.tau_a = 0.004;
        let f = w.pseudoforce_atoms();
        let drift: Vec<Vec3> = f.iter().map(|v| v * w.units().d * w.move_params.tau_a).collect();
        let r0 = w.positions().0.to_vec();
        let n = w.n();
        let trials = 40_000;
        let mut mean = vec![Vec3::zeros(); n];
        for _ in 0..trials {
            let prop = w.propose_atoms();
            for i in 0..n {
                mean[i] += w.bx().min_image_disp(prop.r_new[i], r0[i]);
            }
        }
        let sigma = (2.0 * w.units().d * w.move_params.tau_a).sqrt();
        let se = sigma / (trials as f64).sqrt();
        for i in 0..n {
            let m = mean[i] / trials as f64;
            for axis in 0..3 {
                let dev = (m[axis] - drift[i][axis]).abs();
                assert!(dev < 5.0 * se, "axis {axis} of atom {i}: dev = {dev}, se = {se}");
            }
        }
    }

    #[test]
    fn identity_proposal_is_always_accepted() {
        // log q at R_p = R is exactly zero
        let mut w = small_walker(liquid_params(), 7);
        let f = w.pseudoforce_atoms();
        let drift = w.drift(&f, w.move_params.tau_a);
        let d_tau = w.units().d * w.move_params.tau_a;
        let r = w.positions().0.to_vec();
        let t_fwd = log_transition_density(&r, &r, &drift, d_tau, w.bx());
        let t_rev = t_fwd;
        let log_q = 0.0 + t_rev - t_fwd;
        assert_eq!(log_q, 0.0);
        assert!(w.metropolis(log_q));
    }

    #[test]
    fn detailed_balance_identity_for_atoms_and_shadows() {
        let mut w = small_walker(liquid_params(), 8);
        w.equilibrate(20, true);
        for _ in 0..25 {
            let parts = w.log_psi_parts();
            let log_p_cur = parts.total();
            let prop = w.propose_atoms();
            if !prop.valid {
                continue;
            }
            // independent recomputation of the proposed state's weight
            let (_, s, sp) = w.positions();
            let jast_log = crate::wavefunction::log_psi_a(&prop.r_new, w.params().b_a, w.bx());
            let th_s = KernelState::build(&prop.r_new, s, w.params().c, w.bx()).log_theta();
            let th_sp = KernelState::build(&prop.r_new, sp, w.params().c, w.bx()).log_theta();
            let log_p_new = 2.0 * jast_log + th_s + th_sp + parts.log_psi_s + parts.log_psi_sp;

            let lhs = log_p_cur + prop.log_t_fwd + prop.log_q.min(0.0);
            let rhs = log_p_new + prop.log_t_rev + (-prop.log_q).min(0.0);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10, epsilon = 1e-10);
            // and the ratio itself decomposes as it should
            assert_relative_eq!(
                prop.log_q,
                log_p_new - log_p_cur + prop.log_t_rev - prop.log_t_fwd,
                max_relative = 1e-10,
                epsilon = 1e-10
            );
            w.mc_step();
        }
        // same identity for a shadow set
        for _ in 0..25 {
            let parts = w.log_psi_parts();
            let log_p_cur = parts.log_theta_s + parts.log_psi_s;
            let prop = w.propose_shadows(ShadowSet::S);
            if !prop.valid {
                continue;
            }
            let (r, _, _) = w.positions();
            let th = KernelState::build(r, &prop.s_new, w.params().c, w.bx()).log_theta();
            let js = crate::wavefunction::log_psi_s(
                &prop.s_new,
                &w.params().shadow,
                w.potential(),
                w.bx(),
            );
            let log_p_new = th + js;
            let lhs = log_p_cur + prop.log_t_fwd + prop.log_q.min(0.0);
            let rhs = log_p_new + prop.log_t_rev + (-prop.log_q).min(0.0);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10, epsilon = 1e-10);
            w.mc_step();
        }
    }

    #[test]
    fn schedule_executes_the_paper_mix() {
        let mut w = small_walker(liquid_params(), 10);
        w.mc_step();
        assert_eq!(w.stats.atoms.attempts, 2);
        assert_eq!(w.stats.shadows_s.attempts, 3);
        assert_eq!(w.stats.shadows_sp.attempts, 3);
        let total = w.stats.atoms.attempts + w.stats.shadows_s.attempts + w.stats.shadows_sp.attempts;
        assert_eq!(total, 8);
    }

    #[test]
    fn free_diffusion_accepts_everything_with_msd_2dtau() {
        let mut w = small_walker(free_params(), 11);
        w.move_params.tau_a = 0.01;
        w.move_params.tau_s = 0.01;
        let mut msd_sum = 0.0;
        let mut samples = 0u64;
        let mut prev = w.positions().0.to_vec();
        for _ in 0..400 {
            w.mc_step();
            let now = w.positions().0;
            for (p, q) in now.iter().zip(prev.iter()) {
                let d = w.bx().min_image_disp(*p, *q);
                msd_sum += d.norm_squared();
                samples += 3;
            }
            prev = now.to_vec();
        }
        assert_eq!(w.stats.atoms.rate(), 1.0);
        assert_eq!(w.stats.shadows_s.rate(), 1.0);
        assert_eq!(w.stats.shadows_sp.rate(), 1.0);
        // each step makes 2 atom attempts: per-coordinate MSD = 2 * 2 D tau
        let per_coord = msd_sum / samples as f64;
        let expect = 2.0 * 2.0 * w.units().d * w.move_params.tau_a;
        assert_relative_eq!(per_coord, expect, max_relative = 0.05);
    }

    #[test]
    fn shadow_marginal_is_the_kernel_gaussian() {
        // one atom, one shadow per set, no shadow correlation: the shadow
        // marginal is exp(-C s^2) around the atom
        let units = UnitSystem::default();
        let bx = SimBox { lx: 12.0, ly: 12.0, lz: 12.0, n: 1, rho_sigma3: 1.0 / 1728.0 * SIGMA.powi(3) };
        let center = Vec3::new(6.0, 6.0, 6.0);
        let cfg = Configuration { r: vec![center], s: vec![center], sp: vec![center] };
        let c = 0.918;
        let params = TrialParams {
            b_a: 0.0,
            c,
            shadow: ShadowForm::RescaledAziz { beta: 0.0, alpha: 1.0 },
        };
        let mut mp = MoveParams::default();
        mp.n_atom_attempts = 1;
        let mut w = Walker::new(
            bx,
            cfg,
            params,
            AzizPotential::builtin(),
            units,
            mp,
            false,
            RngStream::new(12, 0),
        )
        .unwrap();
        // keep the atom still by never accepting its move: set tau_a tiny so
        // the atom random-walks negligibly
        w.move_params.tau_a = 1e-12;
        w.equilibrate(500, true);
        w.move_params.tau_a = 1e-12;
        let mut sum_d2 = 0.0;
        let mut count = 0u64;
        let steps = 40_000;
        for _ in 0..steps {
            w.mc_step();
            let (r, s, sp) = w.positions();
            for set in [s, sp] {
                let d2 = w.bx().min_image_disp(set[0], r[0]).norm_squared();
                sum_d2 += d2;
                count += 1;
            }
        }
        let mean_d2 = sum_d2 / count as f64;
        let expect = 1.5 / c;
        assert_relative_eq!(mean_d2, expect, max_relative = 0.05);
        let rate = w.stats.shadows_s.rate();
        assert!(rate > 0.2 && rate < 0.9, "shadow acceptance = {rate}");
    }

    #[test]
    fn trajectory_reproducibility_same_seed_same_configs() {
        let run = |seed: u64| {
            let mut w = small_walker(liquid_params(), seed);
            w.equilibrate(100, true);
            for _ in 0..300 {
                w.mc_step();
            }
            w.configuration()
        };
        let a = run(99);
        let b = run(99);
        assert_eq!(a, b);
        for (p, q) in a.r.iter().zip(b.r.iter()) {
            assert_eq!(p.x.to_bits(), q.x.to_bits());
        }
    }

    #[test]
    fn table_parameters_never_overflow_log_space() {
        let units = UnitSystem::default();
        let rows: Vec<(f64, TrialParams)> = vec![
            (0.340, TrialParams::from_reduced(1.12, 6.0, ShadowForm::RescaledAziz { beta: 0.058, alpha: 0.883 }, &units)),
            (0.365, TrialParams::from_reduced(1.12, 6.0, ShadowForm::RescaledAziz { beta: 0.060, alpha: 0.883 }, &units)),
            (0.431, TrialParams::from_reduced(1.10, 6.8, ShadowForm::RescaledAziz { beta: 0.068, alpha: 0.893 }, &units)),
            (0.589, TrialParams::from_reduced(1.11, 6.7, ShadowForm::RescaledAziz { beta: 0.060, alpha: 0.890 }, &units)),
            (0.365, TrialParams::from_reduced(1.13, 5.1, ShadowForm::McMillan { b_s: 1.29 }, &units)),
        ];
        for (rho, params) in rows {
            let (bx, cfg) = build_fcc((2, 2, 2), rho, &units).unwrap();
            let mut w = Walker::new(
                bx,
                cfg,
                params,
                AzizPotential::builtin(),
                units,
                MoveParams::default(),
                false,
                RngStream::new(13, 0),
            )
            .unwrap();
            w.equilibrate(50, true);
            for _ in 0..50 {
                w.mc_step();
                let parts = w.log_psi_parts();
                assert!(parts.all_finite(), "rho = {rho}: {parts:?}");
                let e = w.local_energy(ShadowSet::S);
                assert!(e.total.is_finite());
            }
        }
    }

    #[test]
    fn swapping_shadow_sets_preserves_the_energy_pair() {
        let mut w = small_walker(liquid_params(), 14);
        w.equilibrate(100, true);
        let e_s = w.local_energy(ShadowSet::S).total;
        let e_sp = w.local_energy(ShadowSet::Sp).total;
        w.swap_shadow_sets();
        assert_relative_eq!(w.local_energy(ShadowSet::S).total, e_sp, max_relative = 1e-12);
        assert_relative_eq!(w.local_energy(ShadowSet::Sp).total, e_s, max_relative = 1e-12);
    }
}
