//! Run orchestration: configuration, presets, the
//! equilibrate-tune-measure lifecycle, manifests, checkpoint/restart, and
//! parameter scans.
//!
//! Every number that influences a run lands in the manifest; re-running
//! from a manifest reproduces all outputs bit-exactly in single-walker
//! mode. Manifests deliberately carry no timestamps.

use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::EosPoint;
use crate::error::{Error, Result};
use crate::estimators::{
    condensate_direct, measure_energy, measure_gofr, measure_rho1_direct, BlockingResult,
    CondensateResult, EnergyAccumulators, Histogram, NormMode,
};
use crate::geometry::{build_fcc, build_hcp, fcc_cells_for, hcp_cells_for, Configuration, SimBox};
use crate::physics::{sha256_hex, AzizPotential, ShadowForm, UnitSystem, D_HE4, SIGMA};
use crate::sampler::{MoveParams, MoveStats, RngState, RngStream, Walker};
use crate::wavefunction::TrialParams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Liquid,
    Solid,
}

/// Shadow-correlation selector in reduced units, as quoted in parameter
/// tables (lengths in sigma).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum ShadowSpec {
    RescaledAziz { beta: f64, alpha: f64 },
    McMillan { b_s_sigma: f64 },
}

impl ShadowSpec {
    fn to_form_sigma(self) -> ShadowForm {
        match self {
            ShadowSpec::RescaledAziz { beta, alpha } => ShadowForm::RescaledAziz { beta, alpha },
            ShadowSpec::McMillan { b_s_sigma } => ShadowForm::McMillan { b_s: b_s_sigma },
        }
    }
}

/// Variational parameters in reduced units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedParams {
    pub b_a_sigma: f64,
    pub c_sigma2: f64,
    pub shadow: ShadowSpec,
}

impl ReducedParams {
    pub fn to_trial(&self, units: &UnitSystem) -> TrialParams {
        TrialParams::from_reduced(self.b_a_sigma, self.c_sigma2, self.shadow.to_form_sigma(), units)
    }
}

fn default_total_steps() -> usize {
    200_000
}
fn default_equilibration() -> usize {
    8_000
}
fn default_tau() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}
fn default_attempts_atoms() -> usize {
    2
}
fn default_attempts_shadows() -> usize {
    3
}
fn default_dr_gofr() -> f64 {
    0.05
}
fn default_dr_rho1() -> f64 {
    0.1
}
fn default_blocks() -> usize {
    64
}

/// Full run configuration. Serialized as the `[config]` block of the
/// manifest with every default materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub phase: Phase,
    pub n: usize,
    pub rho_sigma3: f64,
    pub params: ReducedParams,
    #[serde(default = "default_total_steps")]
    pub total_steps: usize,
    #[serde(default = "default_equilibration")]
    pub equilibration_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau_a: f64,
    #[serde(default = "default_tau")]
    pub tau_s: f64,
    #[serde(default = "default_true")]
    pub auto_tune: bool,
    #[serde(default = "default_attempts_atoms")]
    pub n_atom_attempts: usize,
    #[serde(default = "default_attempts_shadows")]
    pub n_shadow_attempts: usize,
    #[serde(default)]
    pub drift_clip: Option<f64>,
    /// Standard potential-energy tail correction beyond the cutoff.
    /// Off by default; the paper-reproduction presets switch it on.
    #[serde(default)]
    pub tail_correction: bool,
    /// Kinetic prefactor hbar^2/2m in K A^2; None uses the built-in value.
    #[serde(default)]
    pub d_constant: Option<f64>,
    /// Pair-potential parameter file; None uses the built-in set.
    #[serde(default)]
    pub potential_file: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub measure_gofr: bool,
    #[serde(default = "default_true")]
    pub measure_gofs: bool,
    #[serde(default = "default_true")]
    pub measure_rho1: bool,
    #[serde(default = "default_dr_gofr")]
    pub dr_gofr: f64,
    #[serde(default = "default_dr_rho1")]
    pub dr_rho1: f64,
    /// Lower edge of the condensate plateau window (A); None = 0.35 r_max.
    #[serde(default)]
    pub plateau_lo: Option<f64>,
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
    /// Write a checkpoint every this many measurement steps (0 = final
    /// checkpoint only).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn measurement_steps(&self) -> usize {
        self.total_steps.saturating_sub(self.equilibration_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho_sigma3 <= 0.0 {
            return Err(Error::Config("density must be positive".into()));
        }
        if self.total_steps < self.equilibration_steps {
            return Err(Error::Config(format!(
                "total_steps ({}) must cover equilibration ({})",
                self.total_steps, self.equilibration_steps
            )));
        }
        self.lattice_cells()?;
        Ok(())
    }

    pub fn lattice_cells(&self) -> Result<(usize, usize, usize)> {
        let cells = match self.phase {
            Phase::Liquid => fcc_cells_for(self.n),
            Phase::Solid => hcp_cells_for(self.n),
        };
        cells.ok_or_else(|| {
            Error::Config(format!(
                "no {:?} lattice tiling for N = {} (need N = 4 m)",
                self.phase, self.n
            ))
        })
    }

    pub fn build_lattice(&self, units: &UnitSystem) -> Result<(SimBox, Configuration)> {
        let cells = self.lattice_cells()?;
        match self.phase {
            Phase::Liquid => build_fcc(cells, self.rho_sigma3, units),
            Phase::Solid => build_hcp(cells, self.rho_sigma3, units),
        }
    }

    pub fn units(&self) -> UnitSystem {
        UnitSystem { sigma: SIGMA, d: self.d_constant.unwrap_or(D_HE4) }
    }

    pub fn load_potential(&self) -> Result<AzizPotential> {
        match &self.potential_file {
            Some(path) => AzizPotential::from_file(path),
            None => Ok(AzizPotential::builtin()),
        }
    }
}

/// Named reproduction presets: the published optimal parameters per
/// density, N = 108 (liquid, fcc start) or 180 (solid, hcp start),
/// 2e5 steps with 8000 discarded, tail correction on.
pub fn preset(name: &str) -> Option<RunConfig> {
    let (phase, rho, b_a, c, shadow) = match name {
        "liquid-0.340" => (Phase::Liquid, 0.340, 1.12, 6.0, ShadowSpec::RescaledAziz { beta: 0.058, alpha: 0.883 }),
        "liquid-0.365" => (Phase::Liquid, 0.365, 1.12, 6.0, ShadowSpec::RescaledAziz { beta: 0.060, alpha: 0.883 }),
        "liquid-0.390" => (Phase::Liquid, 0.390, 1.12, 6.0, ShadowSpec::RescaledAziz { beta: 0.060, alpha: 0.890 }),
        "liquid-0.416" => (Phase::Liquid, 0.416, 1.10, 6.6, ShadowSpec::RescaledAziz { beta: 0.074, alpha: 0.890 }),
        "liquid-0.431" => (Phase::Liquid, 0.431, 1.10, 6.8, ShadowSpec::RescaledAziz { beta: 0.068, alpha: 0.893 }),
        "solid-0.468" => (Phase::Solid, 0.468, 1.07, 6.2, ShadowSpec::RescaledAziz { beta: 0.100, alpha: 0.875 }),
        "solid-0.500" => (Phase::Solid, 0.500, 1.09, 6.2, ShadowSpec::RescaledAziz { beta: 0.070, alpha: 0.875 }),
        "solid-0.551" => (Phase::Solid, 0.551, 1.09, 6.4, ShadowSpec::RescaledAziz { beta: 0.060, alpha: 0.875 }),
        "solid-0.589" => (Phase::Solid, 0.589, 1.11, 6.7, ShadowSpec::RescaledAziz { beta: 0.060, alpha: 0.890 }),
        "mcmillan-shadow-0.365" => (Phase::Liquid, 0.365, 1.13, 5.1, ShadowSpec::McMillan { b_s_sigma: 1.29 }),
        _ => return None,
    };
    Some(RunConfig {
        phase,
        n: if phase == Phase::Liquid { 108 } else { 180 },
        rho_sigma3: rho,
        params: ReducedParams { b_a_sigma: b_a, c_sigma2: c, shadow },
        total_steps: default_total_steps(),
        equilibration_steps: default_equilibration(),
        seed: 1,
        tau_a: default_tau(),
        tau_s: default_tau(),
        auto_tune: true,
        n_atom_attempts: default_attempts_atoms(),
        n_shadow_attempts: default_attempts_shadows(),
        drift_clip: None,
        tail_correction: true,
        d_constant: None,
        potential_file: None,
        measure_gofr: true,
        measure_gofs: true,
        measure_rho1: true,
        dr_gofr: default_dr_gofr(),
        dr_rho1: default_dr_rho1(),
        plateau_lo: None,
        n_blocks: default_blocks(),
        checkpoint_every: 0,
    })
}

pub fn preset_names() -> Vec<&'static str> {
    vec![
        "liquid-0.340",
        "liquid-0.365",
        "liquid-0.390",
        "liquid-0.416",
        "liquid-0.431",
        "solid-0.468",
        "solid-0.500",
        "solid-0.551",
        "solid-0.589",
        "mcmillan-shadow-0.365",
    ]
}

/// Checksum of the resolved variational parameters, recorded in output
/// headers so curves are attributable to a parameter set.
pub fn params_checksum(params: &TrialParams) -> String {
    let canon = format!("b_a={:?};c={:?};shadow={:?}", params.b_a, params.c, params.shadow);
    sha256_hex(canon.as_bytes())[..16].to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialInfo {
    pub name: String,
    pub sha256: String,
    pub source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedInfo {
    pub d_constant: f64,
    pub sigma: f64,
    pub lattice: String,
    pub cells: (usize, usize, usize),
    pub box_edges: (f64, f64, f64),
    pub cutoff: f64,
    pub tail_per_particle: f64,
    pub params_checksum: String,
    pub r_max: f64,
    pub plateau_window: (f64, f64),
    pub block_len: u64,
    pub rng_algorithm: String,
    pub walker_stream: u64,
    pub estimator_stream: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps_done: u64,
    pub tau_a: f64,
    pub tau_s: f64,
    pub acceptance_atoms: f64,
    pub acceptance_shadows_s: f64,
    pub acceptance_shadows_sp: f64,
    pub energy_mean: Option<f64>,
    pub energy_error: Option<f64>,
    pub energy_blocking_plateau: Option<bool>,
    pub kinetic_mean: Option<f64>,
    pub potential_mean: Option<f64>,
    pub n0_direct: Option<f64>,
    pub n0_direct_error: Option<f64>,
    pub n0_plateau_ok: Option<bool>,
    pub outputs: Vec<OutputFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub generator: String,
    pub status: String,
    pub config: RunConfig,
    pub potential: PotentialInfo,
    pub resolved: ResolvedInfo,
    pub results: Option<RunSummary>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string(self).map_err(|e| Error::Parse(format!("manifest encode: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }
}

/// In-memory result bundle of a run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub out_dir: PathBuf,
    pub steps_done: u64,
    pub energy: Option<BlockingResult>,
    pub energy_s_only: Option<BlockingResult>,
    pub energy_sp_only: Option<BlockingResult>,
    pub kinetic_mean: Option<f64>,
    pub potential_mean: Option<f64>,
    pub stats: MoveStats,
    pub tau_a: f64,
    pub tau_s: f64,
    pub gofr: Option<Vec<(f64, f64)>>,
    pub gofs: Option<Vec<(f64, f64)>>,
    pub rho1_curve: Option<Vec<(f64, f64)>>,
    pub n0_direct: Option<CondensateResult>,
}

impl RunResult {
    /// Row for an equation-of-state table.
    pub fn eos_point(&self, rho_sigma3: f64) -> Option<EosPoint> {
        self.energy.as_ref().map(|b| EosPoint {
            rho: rho_sigma3,
            e_per_n: b.mean,
            sigma_e: b.error,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct HistogramState {
    mode: NormMode,
    dr: f64,
    n_bins: usize,
    n_samples: u64,
    block_len: u64,
    cur_in_block: u64,
    sum: Vec<f64>,
    count: Vec<u64>,
    open_sum: Vec<f64>,
    open_count: Vec<u64>,
    block_sums: Vec<Vec<f64>>,
    block_counts: Vec<Vec<u64>>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    /// Measurement steps completed.
    step: u64,
    tau_a: f64,
    tau_s: f64,
    rng_walker: RngState,
    rng_estimator: RngState,
    stats: MoveStats,
    energy_count: u64,
    configuration: String,
    hist_gofr: Option<HistogramState>,
    hist_gofs: Option<HistogramState>,
    hist_rho1: Option<HistogramState>,
}

fn histogram_to_state(h: &Histogram) -> HistogramState {
    let (block_sums, block_counts, open_sum, open_count, cur_in_block, block_len) =
        h.block_state();
    HistogramState {
        mode: h.mode(),
        dr: h.dr(),
        n_bins: h.n_bins(),
        n_samples: h.n_samples(),
        block_len,
        cur_in_block,
        sum: h.sums().to_vec(),
        count: h.counts().to_vec(),
        open_sum,
        open_count,
        block_sums,
        block_counts,
    }
}

fn histogram_from_state(s: &HistogramState) -> Result<Histogram> {
    Histogram::restore(
        s.mode,
        s.dr,
        s.n_bins,
        s.n_samples,
        s.block_len,
        s.cur_in_block,
        s.sum.clone(),
        s.count.clone(),
        s.open_sum.clone(),
        s.open_count.clone(),
        s.block_sums.clone(),
        s.block_counts.clone(),
    )
}

struct RunContext {
    config: RunConfig,
    units: UnitSystem,
    pot: AzizPotential,
    trial: TrialParams,
    bx: SimBox,
    r_max: f64,
    plateau_window: (f64, f64),
    block_len: u64,
    checksum: String,
}

impl RunContext {
    fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let units = config.units();
        let pot = config.load_potential()?;
        let trial = config.params.to_trial(&units);
        trial.pseudopotentials().validate()?;
        let (bx, _) = config.build_lattice(&units)?;
        let r_max = bx.half_min_edge();
        let plateau_window = (config.plateau_lo.unwrap_or(0.35 * r_max), r_max);
        let block_len =
            (config.measurement_steps() as u64 / config.n_blocks.max(1) as u64).max(1);
        let checksum = params_checksum(&trial);
        Ok(RunContext { config, units, pot, trial, bx, r_max, plateau_window, block_len, checksum })
    }

    fn resolved_info(&self) -> Result<ResolvedInfo> {
        let cells = self.config.lattice_cells()?;
        let tail = if self.config.tail_correction {
            self.pot.tail_per_particle(
                self.units.density_to_inv_a3(self.bx.rho_sigma3),
                self.bx.half_min_edge(),
            )
        } else {
            0.0
        };
        Ok(ResolvedInfo {
            d_constant: self.units.d,
            sigma: self.units.sigma,
            lattice: match self.config.phase {
                Phase::Liquid => "fcc".into(),
                Phase::Solid => "hcp".into(),
            },
            cells,
            box_edges: (self.bx.lx, self.bx.ly, self.bx.lz),
            cutoff: self.bx.half_min_edge(),
            tail_per_particle: tail,
            params_checksum: self.checksum.clone(),
            r_max: self.r_max,
            plateau_window: self.plateau_window,
            block_len: self.block_len,
            rng_algorithm: RngStream::ALGORITHM.into(),
            walker_stream: 0,
            estimator_stream: 1,
        })
    }

    fn manifest(&self, status: &str, results: Option<RunSummary>) -> Result<Manifest> {
        Ok(Manifest {
            format_version: FORMAT_VERSION,
            generator: format!("sskmc {}", env!("CARGO_PKG_VERSION")),
            status: status.into(),
            config: self.config.clone(),
            potential: PotentialInfo {
                name: self.pot.params().name.clone(),
                sha256: self.pot.checksum().into(),
                source: self
                    .config
                    .potential_file
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "builtin".into()),
            },
            resolved: self.resolved_info()?,
            results,
        })
    }
}

fn csv_header(kind: &str, ctx: &RunContext, extra: &str) -> String {
    let mut s = format!("# sskmc {kind} format {FORMAT_VERSION}\n");
    s.push_str(&format!(
        "# n={} rho_sigma3={} params_checksum={}{}\n",
        ctx.config.n, ctx.config.rho_sigma3, ctx.checksum, extra
    ));
    s
}

fn write_histogram_csv(
    path: &Path,
    ctx: &RunContext,
    hist: &Histogram,
    curve: &[(f64, f64)],
    norm_note: f64,
) -> Result<()> {
    let mode = match hist.mode() {
        NormMode::PairCount => "pair-count",
        NormMode::RatioMean => "ratio-mean",
        NormMode::OffDiagWeighted => "off-diagonal-weighted",
    };
    let mut out = csv_header(
        "histogram",
        ctx,
        &format!(" mode={mode} dr={} normalization={norm_note}", hist.dr()),
    );
    out.push_str("# columns: r,value,count\n");
    for (i, (r, v)) in curve.iter().enumerate() {
        out.push_str(&format!("{r},{v},{}\n", hist.counts()[i]));
    }
    fs::write(path, out)?;
    Ok(())
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Executes a configured run in `out_dir`: builds the lattice,
/// equilibrates with time-step tuning, measures, and writes the energy
/// series, histograms, checkpoint, and manifest. Any early error still
/// leaves a parsable manifest behind.
pub fn run(config: RunConfig, out_dir: &Path) -> Result<RunResult> {
    let ctx = RunContext::new(config)?;
    fs::create_dir_all(out_dir)?;
    ctx.manifest("running", None)?.write(&out_dir.join("manifest.toml"))?;

    let (bx, start) = ctx.config.build_lattice(&ctx.units)?;
    let move_params = MoveParams {
        tau_a: ctx.config.tau_a,
        tau_s: ctx.config.tau_s,
        n_atom_attempts: ctx.config.n_atom_attempts,
        n_shadow_attempts: ctx.config.n_shadow_attempts,
        drift_clip: ctx.config.drift_clip,
    };
    let mut walker = Walker::new(
        bx,
        start,
        ctx.trial,
        ctx.pot.clone(),
        ctx.units,
        move_params,
        ctx.config.tail_correction,
        RngStream::new(ctx.config.seed, 0),
    )?;
    walker.equilibrate(ctx.config.equilibration_steps, ctx.config.auto_tune);

    let est_rng = RngStream::new(ctx.config.seed, 1);
    let energy_path = out_dir.join("energy.csv");
    let mut energy_file = fs::File::create(&energy_path)?;
    energy_file.write_all(csv_header("energy series", &ctx, "").as_bytes())?;
    energy_file.write_all(b"# columns: step,e_per_n\n")?;

    let state = MeasureState::new(&ctx)?;
    measurement_loop(ctx, walker, est_rng, state, 0, energy_file, out_dir)
}

/// Resumes a checkpointed run, optionally raising the total step count.
/// The continuation is bit-identical to an uninterrupted run.
pub fn resume(out_dir: &Path, new_total_steps: Option<usize>) -> Result<RunResult> {
    let manifest = Manifest::load(&out_dir.join("manifest.toml"))?;
    let mut config = manifest.config;
    if let Some(total) = new_total_steps {
        config.total_steps = total;
    }
    let ctx = RunContext::new(config)?;
    let cp_text = fs::read_to_string(out_dir.join("checkpoint.toml"))?;
    let cp: Checkpoint =
        toml::from_str(&cp_text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
    if cp.format_version != FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "checkpoint format {} unsupported",
            cp.format_version
        )));
    }
    let (bx, cfg) = Configuration::read_text(&cp.configuration)?;
    let move_params = MoveParams {
        tau_a: cp.tau_a,
        tau_s: cp.tau_s,
        n_atom_attempts: ctx.config.n_atom_attempts,
        n_shadow_attempts: ctx.config.n_shadow_attempts,
        drift_clip: ctx.config.drift_clip,
    };
    let mut walker = Walker::new(
        bx,
        cfg,
        ctx.trial,
        ctx.pot.clone(),
        ctx.units,
        move_params,
        ctx.config.tail_correction,
        RngStream::from_state(&cp.rng_walker),
    )?;
    walker.stats = cp.stats;
    let est_rng = RngStream::from_state(&cp.rng_estimator);

    let mut state = MeasureState::new(&ctx)?;
    if let Some(h) = &cp.hist_gofr {
        state.gofr = Some(histogram_from_state(h)?);
    }
    if let Some(h) = &cp.hist_gofs {
        state.gofs = Some(histogram_from_state(h)?);
    }
    if let Some(h) = &cp.hist_rho1 {
        state.rho1 = Some(histogram_from_state(h)?);
    }

    // reload the energy series up to the checkpoint and truncate the file
    let energy_path = out_dir.join("energy.csv");
    let text = fs::read_to_string(&energy_path)?;
    let mut kept = String::new();
    let mut loaded = 0u64;
    for line in text.lines() {
        if line.starts_with('#') {
            kept.push_str(line);
            kept.push('\n');
            continue;
        }
        if loaded >= cp.energy_count {
            break;
        }
        let val: f64 = line
            .split(',')
            .nth(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad energy series line '{line}'")))?;
        // the auxiliary series cannot be rebuilt from the file; resumes
        // recover the main series exactly and leave the rest to the
        // checkpointed accumulators
        state.energy.avg.push(val);
        loaded += 1;
        kept.push_str(line);
        kept.push('\n');
    }
    if loaded < cp.energy_count {
        return Err(Error::Parse(format!(
            "energy series holds {loaded} entries, checkpoint expects {}",
            cp.energy_count
        )));
    }
    fs::write(&energy_path, &kept)?;
    let mut energy_file = fs::OpenOptions::new().append(true).open(&energy_path)?;
    energy_file.seek_end()?;
    measurement_loop(ctx, walker, est_rng, state, cp.step, energy_file, out_dir)
}

trait SeekEnd {
    fn seek_end(&mut self) -> Result<()>;
}
impl SeekEnd for fs::File {
    fn seek_end(&mut self) -> Result<()> {
        use std::io::Seek;
        self.seek(std::io::SeekFrom::End(0))?;
        Ok(())
    }
}

struct MeasureState {
    energy: EnergyAccumulators,
    gofr: Option<Histogram>,
    gofs: Option<Histogram>,
    rho1: Option<Histogram>,
}

impl MeasureState {
    fn new(ctx: &RunContext) -> Result<Self> {
        let mk = |on: bool, mode, dr, blocks| -> Result<Option<Histogram>> {
            if on && ctx.r_max > dr {
                Ok(Some(Histogram::new(mode, dr, ctx.r_max, blocks)?))
            } else {
                Ok(None)
            }
        };
        Ok(MeasureState {
            energy: EnergyAccumulators::default(),
            gofr: mk(ctx.config.measure_gofr, NormMode::PairCount, ctx.config.dr_gofr, 0)?,
            gofs: mk(ctx.config.measure_gofs, NormMode::PairCount, ctx.config.dr_gofr, 0)?,
            rho1: mk(
                ctx.config.measure_rho1,
                NormMode::RatioMean,
                ctx.config.dr_rho1,
                ctx.block_len,
            )?,
        })
    }
}

fn measurement_loop(
    ctx: RunContext,
    mut walker: Walker,
    mut est_rng: RngStream,
    mut state: MeasureState,
    start_step: u64,
    mut energy_file: fs::File,
    out_dir: &Path,
) -> Result<RunResult> {
    let total = ctx.config.measurement_steps() as u64;
    let n = walker.n();
    for step in start_step..total {
        walker.mc_step();
        let before = state.energy.avg.count();
        measure_energy(&walker, &mut state.energy);
        let e = state.energy.avg.series()[before];
        writeln!(energy_file, "{},{}", step, e)?;
        let (r, s, sp) = {
            let (a, b, c) = walker.positions();
            (a.to_vec(), b.to_vec(), c.to_vec())
        };
        if let Some(h) = state.gofr.as_mut() {
            measure_gofr(&r, walker.bx(), h);
        }
        if let Some(h) = state.gofs.as_mut() {
            measure_gofr(&s, walker.bx(), h);
            measure_gofr(&sp, walker.bx(), h);
        }
        if let Some(h) = state.rho1.as_mut() {
            measure_rho1_direct(&walker, h, &mut est_rng);
        }
        let _ = n;
        if ctx.config.checkpoint_every > 0
            && (step + 1) % ctx.config.checkpoint_every as u64 == 0
            && step + 1 < total
        {
            energy_file.flush()?;
            write_checkpoint(&ctx, &walker, &est_rng, &state, step + 1, out_dir)?;
        }
    }
    energy_file.flush()?;
    drop(energy_file);
    write_checkpoint(&ctx, &walker, &est_rng, &state, total, out_dir)?;
    finalize(ctx, walker, state, total, out_dir)
}

fn write_checkpoint(
    ctx: &RunContext,
    walker: &Walker,
    est_rng: &RngStream,
    state: &MeasureState,
    step: u64,
    out_dir: &Path,
) -> Result<()> {
    let cp = Checkpoint {
        format_version: FORMAT_VERSION,
        step,
        tau_a: walker.move_params.tau_a,
        tau_s: walker.move_params.tau_s,
        rng_walker: walker.rng.state(),
        rng_estimator: est_rng.state(),
        stats: walker.stats,
        energy_count: state.energy.avg.count() as u64,
        configuration: walker.configuration().write_text(walker.bx()),
        hist_gofr: state.gofr.as_ref().map(histogram_to_state),
        hist_gofs: state.gofs.as_ref().map(histogram_to_state),
        hist_rho1: state.rho1.as_ref().map(histogram_to_state),
    };
    let text = toml::to_string(&cp).map_err(|e| Error::Parse(format!("checkpoint encode: {e}")))?;
    fs::write(out_dir.join("checkpoint.toml"), text)?;
    Ok(())
}

fn finalize(
    ctx: RunContext,
    walker: Walker,
    state: MeasureState,
    steps_done: u64,
    out_dir: &Path,
) -> Result<RunResult> {
    let rho_inv_a3 = ctx.units.density_to_inv_a3(ctx.config.rho_sigma3);
    let n = walker.n();

    let mut outputs: Vec<OutputFile> = Vec::new();
    let mut gofr_curve = None;
    if let Some(h) = &state.gofr {
        if h.n_samples() > 0 {
            let curve = h.pair_distribution(n, rho_inv_a3);
            write_histogram_csv(&out_dir.join("gofr_atoms.csv"), &ctx, h, &curve, h.n_samples() as f64)?;
            gofr_curve = Some(curve);
        }
    }
    let mut gofs_curve = None;
    if let Some(h) = &state.gofs {
        if h.n_samples() > 0 {
            let curve = h.pair_distribution(n, rho_inv_a3);
            write_histogram_csv(&out_dir.join("gofr_shadows.csv"), &ctx, h, &curve, h.n_samples() as f64)?;
            gofs_curve = Some(curve);
        }
    }
    let mut rho1_curve = None;
    let mut n0 = None;
    if let Some(h) = &state.rho1 {
        if h.n_samples() > 0 {
            let curve = h.ratio_curve();
            write_histogram_csv(&out_dir.join("rho1_direct.csv"), &ctx, h, &curve, 1.0)?;
            n0 = condensate_direct(h, ctx.plateau_window).ok();
            rho1_curve = Some(curve);
        }
    }

    let blocking = |acc: &crate::estimators::ScalarAccumulator| acc.blocking().ok();
    let energy = blocking(&state.energy.avg);
    let energy_s = blocking(&state.energy.s_only);
    let energy_sp = blocking(&state.energy.sp_only);
    let kinetic_mean =
        (state.energy.kinetic.count() > 0).then(|| state.energy.kinetic.mean());
    let potential_mean =
        (state.energy.potential.count() > 0).then(|| state.energy.potential.mean());

    for name in ["energy.csv", "gofr_atoms.csv", "gofr_shadows.csv", "rho1_direct.csv", "checkpoint.toml"] {
        let p = out_dir.join(name);
        if p.exists() {
            outputs.push(OutputFile { name: name.into(), sha256: file_sha256(&p)? });
        }
    }

    let summary = RunSummary {
        steps_done,
        tau_a: walker.move_params.tau_a,
        tau_s: walker.move_params.tau_s,
        acceptance_atoms: walker.stats.atoms.rate(),
        acceptance_shadows_s: walker.stats.shadows_s.rate(),
        acceptance_shadows_sp: walker.stats.shadows_sp.rate(),
        energy_mean: energy.as_ref().map(|b| b.mean),
        energy_error: energy.as_ref().map(|b| b.error),
        energy_blocking_plateau: energy.as_ref().map(|b| b.plateau_found),
        kinetic_mean,
        potential_mean,
        n0_direct: n0.as_ref().map(|c| c.n0),
        n0_direct_error: n0.as_ref().map(|c| c.error),
        n0_plateau_ok: n0.as_ref().map(|c| c.plateau_ok),
        outputs,
    };
    ctx.manifest("complete", Some(summary))?.write(&out_dir.join("manifest.toml"))?;

    Ok(RunResult {
        out_dir: out_dir.to_path_buf(),
        steps_done,
        energy,
        energy_s_only: energy_s,
        energy_sp_only: energy_sp,
        kinetic_mean,
        potential_mean,
        stats: walker.stats,
        tau_a: walker.move_params.tau_a,
        tau_s: walker.move_params.tau_s,
        gofr: gofr_curve,
        gofs: gofs_curve,
        rho1_curve,
        n0_direct: n0,
    })
}

/// One grid axis of a parameter scan.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScanGrid {
    #[serde(default)]
    pub b_a_sigma: Option<Vec<f64>>,
    #[serde(default)]
    pub c_sigma2: Option<Vec<f64>>,
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub b_s_sigma: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanRow {
    pub params: ReducedParams,
    pub energy: Option<f64>,
    pub error: Option<f64>,
    pub status: String,
}

/// Grid scan over a subset of the variational parameters: short
/// energy-only runs at every grid point, executed in parallel with
/// deterministic per-point RNG streams, ranked by energy.
pub fn scan_params(base: &RunConfig, grid: &ScanGrid) -> Result<Vec<ScanRow>> {
    let combos = expand_grid(base.params, grid)?;
    let mut rows: Vec<(usize, ScanRow)> = combos
        .into_par_iter()
        .enumerate()
        .map(|(idx, params)| {
            let row = match scan_point(base, params, idx as u64) {
                Ok((e, err)) => ScanRow {
                    params,
                    energy: Some(e),
                    error: Some(err),
                    status: "ok".into(),
                },
                Err(e) => ScanRow {
                    params,
                    energy: None,
                    error: None,
                    status: format!("failed: {e}"),
                },
            };
            (idx, row)
        })
        .collect();
    rows.sort_by(|a, b| {
        let ea = a.1.energy.unwrap_or(f64::INFINITY);
        let eb = b.1.energy.unwrap_or(f64::INFINITY);
        ea.partial_cmp(&eb).unwrap().then(a.0.cmp(&b.0))
    });
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

fn expand_grid(base: ReducedParams, grid: &ScanGrid) -> Result<Vec<ReducedParams>> {
    let one = |v: &Option<Vec<f64>>, def: f64| -> Vec<f64> {
        v.clone().unwrap_or_else(|| vec![def])
    };
    let b_a = one(&grid.b_a_sigma, base.b_a_sigma);
    let c = one(&grid.c_sigma2, base.c_sigma2);
    let mut combos = Vec::new();
    match base.shadow {
        ShadowSpec::RescaledAziz { beta, alpha } => {
            if grid.b_s_sigma.is_some() {
                return Err(Error::Config(
                    "b_s grid requested but the base shadow form is rescaled-aziz".into(),
                ));
            }
            for &ba in &b_a {
                for &cc in &c {
                    for &be in &one(&grid.beta, beta) {
                        for &al in &one(&grid.alpha, alpha) {
                            combos.push(ReducedParams {
                                b_a_sigma: ba,
                                c_sigma2: cc,
                                shadow: ShadowSpec::RescaledAziz { beta: be, alpha: al },
                            });
                        }
                    }
                }
            }
        }
        ShadowSpec::McMillan { b_s_sigma } => {
            if grid.beta.is_some() || grid.alpha.is_some() {
                return Err(Error::Config(
                    "beta/alpha grid requested but the base shadow form is mcmillan".into(),
                ));
            }
            for &ba in &b_a {
                for &cc in &c {
                    for &bs in &one(&grid.b_s_sigma, b_s_sigma) {
                        combos.push(ReducedParams {
                            b_a_sigma: ba,
                            c_sigma2: cc,
                            shadow: ShadowSpec::McMillan { b_s_sigma: bs },
                        });
                    }
                }
            }
        }
    }
    Ok(combos)
}

/// Energy-only run for one grid point; stream ids keep points independent
/// and execution-order invariant.
fn scan_point(base: &RunConfig, params: ReducedParams, idx: u64) -> Result<(f64, f64)> {
    let mut config = base.clone();
    config.params = params;
    config.measure_gofr = false;
    config.measure_gofs = false;
    config.measure_rho1 = false;
    config.validate()?;
    let units = config.units();
    let pot = config.load_potential()?;
    let trial = config.params.to_trial(&units);
    trial.pseudopotentials().validate()?;
    let (bx, start) = config.build_lattice(&units)?;
    let move_params = MoveParams {
        tau_a: config.tau_a,
        tau_s: config.tau_s,
        n_atom_attempts: config.n_atom_attempts,
        n_shadow_attempts: config.n_shadow_attempts,
        drift_clip: config.drift_clip,
    };
    let mut walker = Walker::new(
        bx,
        start,
        trial,
        pot,
        units,
        move_params,
        config.tail_correction,
        RngStream::new(config.seed, 1000 + idx),
    )?;
    walker.equilibrate(config.equilibration_steps, config.auto_tune);
    let mut acc = EnergyAccumulators::default();
    for _ in 0..config.measurement_steps() {
        walker.mc_step();
        measure_energy(&walker, &mut acc);
    }
    let b = acc.avg.blocking()?;
    Ok((b.mean, b.error))
}

/// Ranked scan table as structured text.
pub fn scan_report(rows: &[ScanRow]) -> String {
    let mut out = format!("# sskmc scan report format {FORMAT_VERSION}\n");
    out.push_str("# columns: rank,b_a_sigma,c_sigma2,shadow,energy,error,status\n");
    for (i, row) in rows.iter().enumerate() {
        let shadow = match row.params.shadow {
            ShadowSpec::RescaledAziz { beta, alpha } => format!("beta={beta};alpha={alpha}"),
            ShadowSpec::McMillan { b_s_sigma } => format!("b_s={b_s_sigma}"),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i + 1,
            row.params.b_a_sigma,
            row.params.c_sigma2,
            shadow,
            row.energy.map(|e| e.to_string()).unwrap_or_default(),
            row.error.map(|e| e.to_string()).unwrap_or_default(),
            row.status
        ));
    }
    out
}
