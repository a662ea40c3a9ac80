//! Periodic simulation box, minimum-image metric, and lattice starting
//! configurations.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::physics::UnitSystem;

pub type Vec3 = Vector3<f64>;

/// Orthorhombic periodic box. Edge lengths in angstrom; the density is
/// carried in reduced units for bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimBox {
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
    /// Number of atoms the box was sized for.
    pub n: usize,
    /// Number density in sigma^-3.
    pub rho_sigma3: f64,
}

impl SimBox {
    /// Cubic box holding `n` particles at reduced density `rho_sigma3`.
    pub fn cubic_from_density(n: usize, rho_sigma3: f64, units: &UnitSystem) -> Result<Self> {
        if n == 0 || rho_sigma3 <= 0.0 {
            return Err(Error::Config(format!(
                "box requires n > 0 and rho > 0 (got n={n}, rho={rho_sigma3})"
            )));
        }
        let vol = n as f64 / units.density_to_inv_a3(rho_sigma3);
        let l = vol.cbrt();
        Ok(SimBox { lx: l, ly: l, lz: l, n, rho_sigma3 })
    }

    /// Orthorhombic box with prescribed edges; checks that the edges are
    /// consistent with the density.
    pub fn orthorhombic(
        lx: f64,
        ly: f64,
        lz: f64,
        n: usize,
        rho_sigma3: f64,
        units: &UnitSystem,
    ) -> Result<Self> {
        if lx <= 0.0 || ly <= 0.0 || lz <= 0.0 {
            return Err(Error::Config("box edges must be positive".into()));
        }
        let rho = units.density_to_inv_a3(rho_sigma3);
        let got = n as f64 / (lx * ly * lz);
        if (got / rho - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "box volume inconsistent with density: n/V = {got}, rho = {rho}"
            )));
        }
        Ok(SimBox { lx, ly, lz, n, rho_sigma3 })
    }

    pub fn volume(&self) -> f64 {
        self.lx * self.ly * self.lz
    }

    /// Half the smallest edge: the radius inside which the minimum-image
    /// metric is unambiguous.
    pub fn half_min_edge(&self) -> f64 {
        0.5 * self.lx.min(self.ly).min(self.lz)
    }

    /// Wraps a point into the primary cell [0, L) per axis.
    #[inline]
    pub fn wrap(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            p.x - self.lx * (p.x / self.lx).floor(),
            p.y - self.ly * (p.y / self.ly).floor(),
            p.z - self.lz * (p.z / self.lz).floor(),
        )
    }

    /// Nearest-image displacement a - b, componentwise in [-L/2, L/2).
    #[inline]
    pub fn min_image_disp(&self, a: Vec3, b: Vec3) -> Vec3 {
        let mut d = a - b;
        d.x -= self.lx * (d.x / self.lx).round();
        d.y -= self.ly * (d.y / self.ly).round();
        d.z -= self.lz * (d.z / self.lz).round();
        d
    }

    /// Nearest-image distance.
    #[inline]
    pub fn min_image_dist(&self, a: Vec3, b: Vec3) -> f64 {
        self.min_image_disp(a, b).norm()
    }
}

/// Positions of the N atoms and the two shadow sets, inside the box.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    /// Atom positions.
    pub r: Vec<Vec3>,
    /// First shadow set.
    pub s: Vec<Vec3>,
    /// Second shadow set.
    pub sp: Vec<Vec3>,
}

impl Configuration {
    pub fn n(&self) -> usize {
        self.r.len()
    }

    pub fn validate(&self, bx: &SimBox) -> Result<()> {
        if self.r.len() != self.s.len() || self.r.len() != self.sp.len() {
            return Err(Error::Config(format!(
                "particle sets must have equal size (atoms {}, shadows {}, {})",
                self.r.len(),
                self.s.len(),
                self.sp.len()
            )));
        }
        let inside = |p: &Vec3| {
            p.x >= 0.0 && p.x < bx.lx && p.y >= 0.0 && p.y < bx.ly && p.z >= 0.0 && p.z < bx.lz
        };
        for set in [&self.r, &self.s, &self.sp] {
            if !set.iter().all(inside) {
                return Err(Error::Config("coordinates must be wrapped to the cell".into()));
            }
        }
        Ok(())
    }

    /// Smallest atom pair distance; lattice sanity checks.
    pub fn min_pair_distance(&self, bx: &SimBox) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.r.len() {
            for j in (i + 1)..self.r.len() {
                best = best.min(bx.min_image_dist(self.r[i], self.r[j]));
            }
        }
        best
    }

    /// Plain-text serialization with a header; `f64` values print in
    /// shortest round-trip form, so read-back is bit-exact.
    pub fn write_text(&self, bx: &SimBox) -> String {
        let mut out = String::new();
        out.push_str("# sskmc configuration format 1\n");
        out.push_str(&format!("n = {}\n", self.n()));
        out.push_str(&format!("box = {} {} {}\n", bx.lx, bx.ly, bx.lz));
        out.push_str(&format!("rho_sigma3 = {}\n", bx.rho_sigma3));
        out.push_str("units = angstrom\n");
        for (tag, set) in [("atoms", &self.r), ("shadows_s", &self.s), ("shadows_sp", &self.sp)] {
            out.push_str(&format!("[{tag}]\n"));
            for p in set.iter() {
                out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
            }
        }
        out
    }

    pub fn read_text(text: &str) -> Result<(SimBox, Configuration)> {
        let mut n: Option<usize> = None;
        let mut edges: Option<[f64; 3]> = None;
        let mut rho: Option<f64> = None;
        let mut sets: [Vec<Vec3>; 3] = [vec![], vec![], vec![]];
        let mut current: Option<usize> = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[atoms]" => current = Some(0),
                "[shadows_s]" => current = Some(1),
                "[shadows_sp]" => current = Some(2),
                _ if line.contains('=') => {
                    let (key, val) = line.split_once('=').unwrap();
                    let (key, val) = (key.trim(), val.trim());
                    match key {
                        "n" => n = Some(parse_num(val)?),
                        "rho_sigma3" => rho = Some(parse_num(val)?),
                        "box" => {
                            let v = parse_triple(val)?;
                            edges = Some([v.x, v.y, v.z]);
                        }
                        "units" => {
                            if val != "angstrom" {
                                return Err(Error::Parse(format!("unknown units '{val}'")));
                            }
                        }
                        _ => return Err(Error::Parse(format!("unknown key '{key}'"))),
                    }
                }
                _ => {
                    let idx = current
                        .ok_or_else(|| Error::Parse("coordinates before a section header".into()))?;
                    sets[idx].push(parse_triple(line)?);
                }
            }
        }
        let n = n.ok_or_else(|| Error::Parse("missing n".into()))?;
        let [lx, ly, lz] = edges.ok_or_else(|| Error::Parse("missing box".into()))?;
        let rho = rho.ok_or_else(|| Error::Parse("missing rho_sigma3".into()))?;
        let [r, s, sp] = sets;
        let cfg = Configuration { r, s, sp };
        if cfg.n() != n {
            return Err(Error::Parse(format!("expected {n} atoms, found {}", cfg.n())));
        }
        Ok((SimBox { lx, ly, lz, n, rho_sigma3: rho }, cfg))
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse::<T>().map_err(|_| Error::Parse(format!("cannot parse number '{s}'")))
}

fn parse_triple(s: &str) -> Result<Vec3> {
    let mut it = s.split_whitespace();
    let mut next = || -> Result<f64> {
        parse_num(it.next().ok_or_else(|| Error::Parse(format!("expected triple, got '{s}'")))?)
    };
    let (x, y, z) = (next()?, next()?, next()?);
    Ok(Vec3::new(x, y, z))
}

/// fcc lattice of 4 * nx * ny * nz sites scaled to the requested density.
/// Shadows start on the atom sites.
pub fn build_fcc(
    cells: (usize, usize, usize),
    rho_sigma3: f64,
    units: &UnitSystem,
) -> Result<(SimBox, Configuration)> {
    let (nx, ny, nz) = cells;
    let n = 4 * nx * ny * nz;
    if n == 0 {
        return Err(Error::Config("fcc tiling must be non-empty".into()));
    }
    let rho = units.density_to_inv_a3(rho_sigma3);
    let a = (4.0 / rho).cbrt(); // conventional cell edge
    let bx = SimBox {
        lx: nx as f64 * a,
        ly: ny as f64 * a,
        lz: nz as f64 * a,
        n,
        rho_sigma3,
    };
    let basis = [
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(0.5, 0.5, 0.0),
        Vec3::new(0.5, 0.0, 0.5),
        Vec3::new(0.0, 0.5, 0.5),
    ];
    let mut r = Vec::with_capacity(n);
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let origin = Vec3::new(ix as f64, iy as f64, iz as f64);
                for b in &basis {
                    r.push(bx.wrap((origin + b) * a));
                }
            }
        }
    }
    let cfg = Configuration { s: r.clone(), sp: r.clone(), r };
    Ok((bx, cfg))
}

/// hcp lattice from an orthorhombic 4-site cell (a, a*sqrt(3), a*sqrt(8/3))
/// at the ideal c/a ratio, scaled to the requested density.
pub fn build_hcp(
    cells: (usize, usize, usize),
    rho_sigma3: f64,
    units: &UnitSystem,
) -> Result<(SimBox, Configuration)> {
    let (nx, ny, nz) = cells;
    let n = 4 * nx * ny * nz;
    if n == 0 {
        return Err(Error::Config("hcp tiling must be non-empty".into()));
    }
    let rho = units.density_to_inv_a3(rho_sigma3);
    let a = (2.0f64.sqrt() / rho).cbrt(); // volume per site = a^3 / sqrt(2)
    let (ca, cb, cc) = (a, a * 3.0f64.sqrt(), a * (8.0f64 / 3.0).sqrt());
    let bx = SimBox {
        lx: nx as f64 * ca,
        ly: ny as f64 * cb,
        lz: nz as f64 * cc,
        n,
        rho_sigma3,
    };
    // fractional coordinates of the 4 sites of the orthorhombic hcp cell
    let basis = [
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(0.5, 0.5, 0.0),
        Vec3::new(0.5, 1.0 / 6.0, 0.5),
        Vec3::new(0.0, 2.0 / 3.0, 0.5),
    ];
    let mut r = Vec::with_capacity(n);
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                for b in &basis {
                    let p = Vec3::new(
                        (ix as f64 + b.x) * ca,
                        (iy as f64 + b.y) * cb,
                        (iz as f64 + b.z) * cc,
                    );
                    r.push(bx.wrap(p));
                }
            }
        }
    }
    let cfg = Configuration { s: r.clone(), sp: r.clone(), r };
    Ok((bx, cfg))
}

/// Near-cubic fcc tiling for a particle count, if one exists (N = 4 m).
pub fn fcc_cells_for(n: usize) -> Option<(usize, usize, usize)> {
    best_tiling(n, 1.0, 1.0, 1.0)
}

/// Near-cubic hcp tiling for a particle count, weighted by the cell aspect.
pub fn hcp_cells_for(n: usize) -> Option<(usize, usize, usize)> {
    best_tiling(n, 1.0, 3.0f64.sqrt(), (8.0f64 / 3.0).sqrt())
}

fn best_tiling(n: usize, wx: f64, wy: f64, wz: f64) -> Option<(usize, usize, usize)> {
    if n == 0 || n % 4 != 0 {
        return None;
    }
    let m = n / 4;
    let mut best: Option<((usize, usize, usize), f64)> = None;
    for nx in 1..=m {
        if m % nx != 0 {
            continue;
        }
        let rest = m / nx;
        for ny in 1..=rest {
            if rest % ny != 0 {
                continue;
            }
            let nz = rest / ny;
            let e = [nx as f64 * wx, ny as f64 * wy, nz as f64 * wz];
            let aspect = e.iter().cloned().fold(f64::MIN, f64::max)
                / e.iter().cloned().fold(f64::MAX, f64::min);
            if best.map_or(true, |(_, b)| aspect < b) {
                best = Some(((nx, ny, nz), aspect));
            }
        }
    }
    best.map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn test_box() -> SimBox {
        SimBox { lx: 10.0, ly: 12.0, lz: 8.0, n: 2, rho_sigma3: 0.1 }
    }

    /// Brute force over all 27 neighbor images.
    fn dist_27(bx: &SimBox, a: Vec3, b: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for ix in -1..=1 {
            for iy in -1..=1 {
                for iz in -1..=1 {
                    let img = b + Vec3::new(
                        ix as f64 * bx.lx,
                        iy as f64 * bx.ly,
                        iz as f64 * bx.lz,
                    );
                    best = best.min((a - img).norm());
                }
            }
        }
        best
    }

    #[test]
    fn min_image_against_27_image_oracle() {
        let bx = test_box();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for _ in 0..500 {
            let a = bx.wrap(Vec3::new(
                rng.random::<f64>() * 30.0 - 10.0,
                rng.random::<f64>() * 30.0 - 10.0,
                rng.random::<f64>() * 30.0 - 10.0,
            ));
            let b = bx.wrap(Vec3::new(
                rng.random::<f64>() * 30.0 - 10.0,
                rng.random::<f64>() * 30.0 - 10.0,
                rng.random::<f64>() * 30.0 - 10.0,
            ));
            assert_relative_eq!(
                bx.min_image_dist(a, b),
                dist_27(&bx, a, b),
                max_relative = 1e-12,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn min_image_basics() {
        let bx = test_box();
        let a = Vec3::new(0.0, 0.0, 0.0);
        assert_eq!(bx.min_image_dist(a, a), 0.0);
        let eps = 1e-3;
        let b = Vec3::new(bx.lx - eps, 0.0, 0.0);
        assert_relative_eq!(bx.min_image_dist(a, b), eps, max_relative = 1e-9);
    }

    #[test]
    fn fcc_unit_cell_sites() {
        let units = UnitSystem::default();
        let (bx, cfg) = build_fcc((1, 1, 1), 0.4, &units).unwrap();
        assert_eq!(cfg.n(), 4);
        let a = bx.lx;
        let expected = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.5 * a, 0.5 * a, 0.0),
            Vec3::new(0.5 * a, 0.0, 0.5 * a),
            Vec3::new(0.0, 0.5 * a, 0.5 * a),
        ];
        for (got, want) in cfg.r.iter().zip(expected.iter()) {
            assert_relative_eq!((got - want).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fcc_108_and_neighbor_distance() {
        let units = UnitSystem::default();
        let (bx, cfg) = build_fcc((3, 3, 3), 0.365, &units).unwrap();
        assert_eq!(cfg.n(), 108);
        assert_eq!(bx.n, 108);
        // density invariant
        let rho = units.density_to_inv_a3(0.365);
        assert_relative_eq!(cfg.n() as f64 / bx.volume(), rho, max_relative = 1e-12);
        // nearest neighbor at a / sqrt(2)
        let a = bx.lx / 3.0;
        assert_relative_eq!(cfg.min_pair_distance(&bx), a / 2.0f64.sqrt(), max_relative = 1e-9);
        // shadows start on the atom sites
        assert_eq!(cfg.r, cfg.s);
        assert_eq!(cfg.r, cfg.sp);
    }

    #[test]
    fn hcp_180_sites_with_12_equal_neighbors() {
        let units = UnitSystem::default();
        let cells = hcp_cells_for(180).unwrap();
        assert_eq!(4 * cells.0 * cells.1 * cells.2, 180);
        let (bx, cfg) = build_hcp(cells, 0.589, &units).unwrap();
        assert_eq!(cfg.n(), 180);
        let rho = units.density_to_inv_a3(0.589);
        assert_relative_eq!(cfg.n() as f64 / bx.volume(), rho, max_relative = 1e-12);
        // ideal hcp: every site has 12 nearest neighbors at the same distance
        let nn = cfg.min_pair_distance(&bx);
        for i in 0..cfg.n() {
            let mut count = 0;
            for j in 0..cfg.n() {
                if i != j && (bx.min_image_dist(cfg.r[i], cfg.r[j]) - nn).abs() < 1e-6 * nn {
                    count += 1;
                }
            }
            assert_eq!(count, 12, "site {i} has {count} nearest neighbors");
        }
        // near-cubic supercell
        let edges = [bx.lx, bx.ly, bx.lz];
        let aspect = edges.iter().cloned().fold(f64::MIN, f64::max)
            / edges.iter().cloned().fold(f64::MAX, f64::min);
        assert!(aspect < 1.10, "aspect = {aspect}");
    }

    #[test]
    fn lattices_have_no_overlap_at_studied_densities() {
        let units = UnitSystem::default();
        for &rho in &[0.340, 0.365, 0.390, 0.416, 0.431] {
            let (bx, cfg) = build_fcc((3, 3, 3), rho, &units).unwrap();
            assert!(cfg.min_pair_distance(&bx) > 0.5 * units.sigma);
        }
        for &rho in &[0.468, 0.500, 0.551, 0.589] {
            let (bx, cfg) = build_hcp((5, 3, 3), rho, &units).unwrap();
            assert!(cfg.min_pair_distance(&bx) > 0.5 * units.sigma);
        }
    }

    #[test]
    fn incompatible_counts_are_rejected() {
        assert!(fcc_cells_for(109).is_none());
        assert!(hcp_cells_for(181).is_none());
        assert_eq!(fcc_cells_for(108), Some((3, 3, 3)));
        assert_eq!(fcc_cells_for(32), Some((2, 2, 2)));
        let c = fcc_cells_for(64).unwrap();
        assert_eq!(4 * c.0 * c.1 * c.2, 64);
        assert_eq!(hcp_cells_for(180), Some((5, 3, 3)));
    }

    #[test]
    fn configuration_round_trip_is_bit_exact() {
        let units = UnitSystem::default();
        let (bx, mut cfg) = build_fcc((2, 2, 2), 0.365, &units).unwrap();
        // perturb so coordinates are not round numbers
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for p in cfg.r.iter_mut().chain(cfg.s.iter_mut()).chain(cfg.sp.iter_mut()) {
            *p = bx.wrap(*p + Vec3::new(rng.random(), rng.random(), rng.random()));
        }
        let text = cfg.write_text(&bx);
        let (bx2, cfg2) = Configuration::read_text(&text).unwrap();
        assert_eq!(bx, bx2);
        assert_eq!(cfg, cfg2);
        for (a, b) in cfg.r.iter().zip(cfg2.r.iter()) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
            assert_eq!(a.z.to_bits(), b.z.to_bits());
        }
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent(x in -50.0f64..50.0, y in -50.0f64..50.0, z in -50.0f64..50.0) {
            let bx = test_box();
            let w = bx.wrap(Vec3::new(x, y, z));
            let w2 = bx.wrap(w);
            prop_assert_eq!(w, w2);
            prop_assert!(w.x >= 0.0 && w.x < bx.lx);
            prop_assert!(w.y >= 0.0 && w.y < bx.ly);
            prop_assert!(w.z >= 0.0 && w.z < bx.lz);
        }

        #[test]
        fn min_image_symmetric_and_triangle(
            ax in 0.0f64..10.0, ay in 0.0f64..12.0, az in 0.0f64..8.0,
            bx_ in 0.0f64..10.0, by in 0.0f64..12.0, bz in 0.0f64..8.0,
            cx in 0.0f64..10.0, cy in 0.0f64..12.0, cz in 0.0f64..8.0,
        ) {
            let bx = test_box();
            let (a, b, c) = (
                Vec3::new(ax, ay, az),
                Vec3::new(bx_, by, bz),
                Vec3::new(cx, cy, cz),
            );
            prop_assert!((bx.min_image_dist(a, b) - bx.min_image_dist(b, a)).abs() < 1e-12);
            // triangle inequality holds when every pair is < L/4 apart
            let quarter = 0.5 * bx.half_min_edge();
            let (dab, dbc, dac) = (
                bx.min_image_dist(a, b),
                bx.min_image_dist(b, c),
                bx.min_image_dist(a, c),
            );
            if dab < quarter && dbc < quarter && dac < quarter {
                prop_assert!(dac <= dab + dbc + 1e-12);
            }
        }
    }
}
