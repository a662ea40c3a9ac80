//! Units, physical constants, the He-He pair potential, and the
//! pseudopotential forms entering the trial function.
//!
//! Everything downstream works in kelvin and angstrom. Densities and
//! variational parameters quoted in reduced units (powers of sigma) are
//! converted at the configuration boundary, never inside the kernels.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};

/// Length unit of the reduced-density convention, in angstrom.
pub const SIGMA: f64 = 2.556;

/// Default hbar^2 / (2 m) for a helium-4 atom, in K * A^2.
///
/// Derived from CODATA 2018: hbar = 1.054571817e-34 J s,
/// m = 4.002602 u, u = 1.66053906660e-27 kg, k_B = 1.380649e-23 J/K.
pub const D_HE4: f64 = 6.0596499629;

/// Unit system shared by every module: the reduced length `sigma` and the
/// kinetic prefactor `d` = hbar^2/2m. `d` is configurable so that a run
/// manifest pins the exact value used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitSystem {
    /// Reduced length unit in angstrom.
    pub sigma: f64,
    /// hbar^2 / (2 m) in K * A^2.
    pub d: f64,
}

impl Default for UnitSystem {
    fn default() -> Self {
        UnitSystem { sigma: SIGMA, d: D_HE4 }
    }
}

impl UnitSystem {
    /// Converts a density in sigma^-3 to A^-3.
    pub fn density_to_inv_a3(&self, rho_sigma3: f64) -> f64 {
        rho_sigma3 / self.sigma.powi(3)
    }

    /// Converts a length in sigma to angstrom.
    pub fn length_to_angstrom(&self, x_sigma: f64) -> f64 {
        x_sigma * self.sigma
    }

    /// Converts an inverse squared length in sigma^-2 to A^-2.
    pub fn inv_len2_to_inv_a2(&self, c_sigma2: f64) -> f64 {
        c_sigma2 / (self.sigma * self.sigma)
    }
}

/// Parameter set of the HFD-B potential form, as read from the data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AzizParams {
    pub name: String,
    /// Well depth / k_B in kelvin.
    pub epsilon_over_k: f64,
    /// Position of the minimum in angstrom.
    pub r_m: f64,
    pub a_star: f64,
    pub alpha_star: f64,
    pub beta_star: f64,
    pub c6: f64,
    pub c8: f64,
    pub c10: f64,
    pub d_star: f64,
}

/// SHA-256 of the parameter file shipped with the crate.
pub const BUILTIN_POTENTIAL_SHA256: &str =
    "941abf3457faf829248b2b924ee9f6a9ee9ba6def08c5163f62ac9ab2cdaf508";

const BUILTIN_POTENTIAL_TEXT: &str = include_str!("../data/hfd-b3-fi1.toml");

/// The He-He pair potential in HFD-B form, loaded from a parameter file.
///
/// Values are returned in kelvin for distances in angstrom.
#[derive(Debug, Clone, PartialEq)]
pub struct AzizPotential {
    params: AzizParams,
    /// SHA-256 of the source text, recorded in run manifests.
    checksum: String,
}

impl AzizPotential {
    /// Parses a parameter file body.
    pub fn from_str(text: &str) -> Result<Self> {
        let params: AzizParams =
            toml::from_str(text).map_err(|e| Error::Parse(format!("potential file: {e}")))?;
        if params.epsilon_over_k <= 0.0 || params.r_m <= 0.0 || params.d_star <= 0.0 {
            return Err(Error::Config(
                "potential parameters must satisfy epsilon, r_m, d_star > 0".into(),
            ));
        }
        let checksum = hex_sha256(text.as_bytes());
        Ok(AzizPotential { params, checksum })
    }

    /// Loads a named parameter file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read potential file {}: {e}", path.display()))
        })?;
        Self::from_str(&text)
    }

    /// The parameter set shipped with the crate (HFD-B3-FI1), validated
    /// against its recorded checksum.
    pub fn builtin() -> Self {
        let pot = Self::from_str(BUILTIN_POTENTIAL_TEXT)
            .expect("builtin potential file must parse");
        assert_eq!(
            pot.checksum, BUILTIN_POTENTIAL_SHA256,
            "builtin potential file does not match its recorded checksum"
        );
        pot
    }

    pub fn params(&self) -> &AzizParams {
        &self.params
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Serializes the parameter set back to file text.
    pub fn to_file_text(&self) -> String {
        toml::to_string(&self.params).expect("potential params serialize")
    }

    /// Pair potential V(r) in kelvin, r in angstrom. Errors for r <= 0.
    pub fn v(&self, r: f64) -> Result<f64> {
        if r <= 0.0 {
            return Err(Error::Domain(format!("aziz_v requires r > 0, got {r}")));
        }
        Ok(self.v_unchecked(r))
    }

    /// Hot-path evaluation. Returns +inf at r = 0 so that an overlapping
    /// pair is rejected upstream rather than producing NaN.
    #[inline]
    pub(crate) fn v_unchecked(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return f64::INFINITY;
        }
        let p = &self.params;
        let x = r / p.r_m;
        let rep = p.a_star * (-p.alpha_star * x + p.beta_star * x * x).exp();
        let x2 = x * x;
        let inv_x6 = 1.0 / (x2 * x2 * x2);
        let disp = inv_x6 * (p.c6 + (p.c8 + p.c10 / x2) / x2);
        let f = if x < p.d_star {
            let t = p.d_star / x - 1.0;
            (-t * t).exp()
        } else {
            1.0
        };
        p.epsilon_over_k * (rep - f * disp)
    }

    /// Analytic dV/dr in K/A, used for the shadow pseudoforce when the
    /// shadow correlation is the rescaled potential.
    #[inline]
    pub fn dv_dr(&self, r: f64) -> f64 {
        let p = &self.params;
        let x = r / p.r_m;
        let rep = p.a_star * (-p.alpha_star * x + p.beta_star * x * x).exp();
        let drep = rep * (-p.alpha_star + 2.0 * p.beta_star * x);
        let x2 = x * x;
        let inv_x6 = 1.0 / (x2 * x2 * x2);
        let disp = inv_x6 * (p.c6 + (p.c8 + p.c10 / x2) / x2);
        let ddisp = -inv_x6 / x * (6.0 * p.c6 + (8.0 * p.c8 + 10.0 * p.c10 / x2) / x2);
        let (f, df) = if x < p.d_star {
            let t = p.d_star / x - 1.0;
            let f = (-t * t).exp();
            (f, f * 2.0 * t * p.d_star / x2)
        } else {
            (1.0, 0.0)
        };
        p.epsilon_over_k / p.r_m * (drep - df * disp - f * ddisp)
    }

    /// Integral of r^2 V(r) from `rc` to infinity (K * A^3), for the standard
    /// tail correction. Composite Simpson out to where the potential is pure
    /// dispersion, then the analytic dispersion tail.
    pub fn tail_integral(&self, rc: f64) -> f64 {
        let p = &self.params;
        let far = (rc * 4.0).max(12.0 * p.r_m);
        let n = 40_000; // even
        let h = (far - rc) / n as f64;
        let mut sum = rc * rc * self.v_unchecked(rc) + far * far * self.v_unchecked(far);
        for i in 1..n {
            let r = rc + i as f64 * h;
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            sum += w * r * r * self.v_unchecked(r);
        }
        let near = sum * h / 3.0;
        // beyond `far` the damping is saturated and the repulsion negligible
        let rm2 = p.r_m * p.r_m;
        let c6 = p.epsilon_over_k * p.c6 * rm2 * rm2 * rm2;
        let c8 = c6 / p.c6 * p.c8 * rm2;
        let c10 = c6 / p.c6 * p.c10 * rm2 * rm2;
        let far3 = far.powi(3);
        let tail =
            -(c6 / (3.0 * far3) + c8 / (5.0 * far3 * far * far) + c10 / (7.0 * far3 * far3 * far));
        near + tail
    }

    /// Standard tail correction to the potential energy per particle:
    /// 2 pi rho * integral of r^2 V(r) beyond the cutoff. `rho` in A^-3.
    pub fn tail_per_particle(&self, rho_inv_a3: f64, rc: f64) -> f64 {
        2.0 * std::f64::consts::PI * rho_inv_a3 * self.tail_integral(rc)
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of arbitrary bytes (manifest bookkeeping).
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_sha256(bytes)
}

/// McMillan pseudopotential u(r) = (b/r)^exponent.
///
/// Exponent 5 is the atom correlation; exponent 9 is the McMillan variant
/// of the shadow correlation.
pub fn mcmillan_u(r: f64, b: f64, exponent: i32) -> Result<f64> {
    if r <= 0.0 {
        return Err(Error::Domain(format!("mcmillan_u requires r > 0, got {r}")));
    }
    if b < 0.0 {
        return Err(Error::Domain(format!("mcmillan_u requires b >= 0, got {b}")));
    }
    if exponent != 5 && exponent != 9 {
        return Err(Error::Domain(format!(
            "mcmillan_u exponent must be 5 or 9, got {exponent}"
        )));
    }
    Ok((b / r).powi(exponent))
}

/// Shadow correlation pseudopotential w(s) = beta V(alpha s).
pub fn shadow_w(pot: &AzizPotential, s: f64, beta: f64, alpha: f64) -> Result<f64> {
    if s <= 0.0 {
        return Err(Error::Domain(format!("shadow_w requires s > 0, got {s}")));
    }
    if beta == 0.0 {
        return Ok(0.0);
    }
    Ok(beta * pot.v(alpha * s)?)
}

/// Which two-body form correlates the shadow variables. Exactly one form is
/// active per run. Lengths in angstrom, beta in 1/K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum ShadowForm {
    /// w(s) = beta V(alpha s), the pair potential rescaled in amplitude
    /// and distance.
    RescaledAziz { beta: f64, alpha: f64 },
    /// w(s) = (b_s / s)^9.
    McMillan { b_s: f64 },
}

impl ShadowForm {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ShadowForm::RescaledAziz { beta, alpha } => {
                if beta <= 0.0 || alpha <= 0.0 {
                    return Err(Error::Config(format!(
                        "rescaled-aziz shadow form requires beta, alpha > 0 (got beta={beta}, alpha={alpha})"
                    )));
                }
            }
            ShadowForm::McMillan { b_s } => {
                if b_s <= 0.0 {
                    return Err(Error::Config(format!(
                        "mcmillan shadow form requires b_s > 0 (got {b_s})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// w(s) for the active form. +inf at contact where the form diverges.
    #[inline]
    pub fn w(&self, pot: &AzizPotential, s: f64) -> f64 {
        match *self {
            ShadowForm::RescaledAziz { beta, alpha } => beta * pot.v_unchecked(alpha * s),
            ShadowForm::McMillan { b_s } => {
                if s <= 0.0 {
                    f64::INFINITY
                } else {
                    (b_s / s).powi(9)
                }
            }
        }
    }

    /// dw/ds for the active form.
    #[inline]
    pub fn dw_ds(&self, pot: &AzizPotential, s: f64) -> f64 {
        match *self {
            ShadowForm::RescaledAziz { beta, alpha } => beta * alpha * pot.dv_dr(alpha * s),
            ShadowForm::McMillan { b_s } => -9.0 * (b_s / s).powi(9) / s,
        }
    }
}

/// The pair of pseudopotentials of a run: the atom McMillan length and the
/// active shadow correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoPotentials {
    /// Atom McMillan length b_a in angstrom.
    pub b_a: f64,
    pub shadow: ShadowForm,
}

impl PseudoPotentials {
    pub fn validate(&self) -> Result<()> {
        if self.b_a <= 0.0 {
            return Err(Error::Config(format!("b_a must be > 0 (got {})", self.b_a)));
        }
        self.shadow.validate()
    }
}
