//! Gaussian point-spread simulation of density maps from atomic models.
//!
//! Each heavy atom contributes `theta * Z * exp(-k * |x - r|^2)`, truncated at
//! `cutoff_radius`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map_io::{DensityMap, GridGeometry};
use crate::structure_io::{ProteinStructure, Residue};

/// Coarsest resolution accepted; beyond this the Gaussian is wider than any
/// useful desk-scale grid.
pub const MAX_RESOLUTION: f64 = 100.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("resolution must be in (0, {MAX_RESOLUTION}] Å, got {0}")]
    BadResolution(f64),
    #[error("grid interval must be positive, got {0}")]
    BadGridInterval(f64),
    #[error("structure has no heavy atoms")]
    EmptyStructure,
    #[error("atom at {0:?} lies outside the target grid")]
    GridTooSmall([f64; 3]),
    #[error("residue {chain}:{seq} not found")]
    UnknownResidue { chain: char, seq: i32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Å.
    pub resolution: f64,
    /// Å per voxel of generated grids.
    pub grid_interval: f64,
    /// Gaussian decay constant, Å⁻².
    pub k: f64,
    pub theta: f64,
    /// Å.
    pub cutoff_radius: f64,
}

impl SimParams {
    pub fn with_grid_interval(mut self, grid_interval: f64) -> Result<Self, SimError> {
        if !(grid_interval > 0.0 && grid_interval.is_finite()) {
            return Err(SimError::BadGridInterval(grid_interval));
        }
        self.grid_interval = grid_interval;
        Ok(self)
    }

    /// Margin added around the structure when no grid is supplied.
    pub fn margin(&self) -> f64 {
        self.cutoff_radius
    }
}

impl Default for SimParams {
    fn default() -> Self {
        derive_params(2.0).expect("default resolution is valid")
    }
}

/// FWHM convention: `k = 4 ln 2 / res²`; `theta = (k/π)^{3/2}` so each atom
/// integrates to its atomic number.
pub fn derive_params(resolution: f64) -> Result<SimParams, SimError> {
    if !(resolution > 0.0 && resolution <= MAX_RESOLUTION) {
        return Err(SimError::BadResolution(resolution));
    }
    let k = 4.0 * std::f64::consts::LN_2 / (resolution * resolution);
    let theta = (k / std::f64::consts::PI).powf(1.5);
    Ok(SimParams {
        resolution,
        grid_interval: 1.0,
        k,
        theta,
        cutoff_radius: 4.0 / k.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedMap {
    pub map: DensityMap,
    pub params: SimParams,
    /// (min, max) corners in Å of the atom bounds expanded by the margin.
    pub bbox: ([f64; 3], [f64; 3]),
}

/// Grid covering the structure plus margin, origin on a multiple of the
/// grid interval.
pub fn auto_grid(s: &ProteinStructure, p: &SimParams) -> Result<GridGeometry, SimError> {
    let (lo, hi) = s.bounds().ok_or(SimError::EmptyStructure)?;
    let g = p.grid_interval;
    let m = p.margin();
    let mut origin = [0.0; 3];
    let mut dims = [0usize; 3];
    for a in 0..3 {
        origin[a] = ((lo[a] - m) / g).floor() * g;
        dims[a] = ((hi[a] + m - origin[a]) / g).ceil() as usize + 1;
    }
    Ok(GridGeometry {
        dims,
        voxel_size: [g; 3],
        origin,
    })
}

/// Adds one atom's truncated Gaussian into `acc` (indexed like the grid).
fn splat_atom(acc: &mut [f64], geom: &GridGeometry, p: &SimParams, z: u32, r: [f64; 3]) {
    let amp = p.theta * z as f64;
    let rc2 = p.cutoff_radius * p.cutoff_radius;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let u0 = ((r[a] - p.cutoff_radius - geom.origin[a]) / geom.voxel_size[a]).ceil();
        let u1 = ((r[a] + p.cutoff_radius - geom.origin[a]) / geom.voxel_size[a]).floor();
        if u1 < 0.0 || u0 > (geom.dims[a] - 1) as f64 {
            return;
        }
        lo[a] = u0.max(0.0) as usize;
        hi[a] = (u1 as i64).min(geom.dims[a] as i64 - 1) as usize;
    }
    let [nx, ny, _] = geom.dims;
    for z_i in lo[2]..=hi[2] {
        let dz = geom.origin[2] + z_i as f64 * geom.voxel_size[2] - r[2];
        for y_i in lo[1]..=hi[1] {
            let dy = geom.origin[1] + y_i as f64 * geom.voxel_size[1] - r[1];
            let dyz = dy * dy + dz * dz;
            if dyz > rc2 {
                continue;
            }
            let row = nx * (y_i + ny * z_i);
            for x_i in lo[0]..=hi[0] {
                let dx = geom.origin[0] + x_i as f64 * geom.voxel_size[0] - r[0];
                let d2 = dx * dx + dyz;
                if d2 <= rc2 {
                    acc[row + x_i] += amp * (-p.k * d2).exp();
                }
            }
        }
    }
}

fn render(
    atoms: impl Iterator<Item = (u32, [f64; 3])>,
    geom: &GridGeometry,
    p: &SimParams,
) -> DensityMap {
    let mut acc = vec![0.0f64; geom.len()];
    for (z, r) in atoms {
        splat_atom(&mut acc, geom, p, z, r);
    }
    let mut map = DensityMap::zeros(*geom);
    for (d, a) in map.data.iter_mut().zip(&acc) {
        *d = *a as f32;
    }
    map
}

/// Simulates the density of every heavy atom in `s`. With `grid = None` a grid
/// is generated from the structure bounds.
pub fn simulate_map(
    s: &ProteinStructure,
    p: &SimParams,
    grid: Option<&GridGeometry>,
) -> Result<SimulatedMap, SimError> {
    if s.atom_count() == 0 {
        return Err(SimError::EmptyStructure);
    }
    let geom = match grid {
        Some(g) => {
            if let Some(a) = s.atoms().find(|a| !g.contains(a.position)) {
                return Err(SimError::GridTooSmall(a.position));
            }
            *g
        }
        None => auto_grid(s, p)?,
    };
    let map = render(s.atoms().map(|a| (a.element_number, a.position)), &geom, p);
    let (lo, hi) = s.bounds().expect("non-empty");
    let m = p.margin();
    Ok(SimulatedMap {
        map,
        params: *p,
        bbox: (
            [lo[0] - m, lo[1] - m, lo[2] - m],
            [hi[0] + m, hi[1] + m, hi[2] + m],
        ),
    })
}

fn find_residue(s: &ProteinStructure, chain: char, seq: i32) -> Result<&Residue, SimError> {
    s.residue(chain, seq)
        .ok_or(SimError::UnknownResidue { chain, seq })
}

/// Density of one residue's heavy atoms on `grid`.
pub fn residue_density(
    s: &ProteinStructure,
    chain: char,
    seq: i32,
    p: &SimParams,
    grid: &GridGeometry,
) -> Result<DensityMap, SimError> {
    let res = find_residue(s, chain, seq)?;
    let map = render(res.atoms.iter().map(|a| (a.element_number, a.position)), grid, p);
    if map.data.iter().all(|&v| v == 0.0) {
        log::warn!("residue {chain}:{seq} does not overlap the grid");
    }
    Ok(map)
}

/// Sparse residue density: `(voxel index, value)` pairs for voxels touched by
/// the residue, in ascending index order.
pub(crate) fn residue_density_sparse(
    res: &Residue,
    p: &SimParams,
    grid: &GridGeometry,
) -> Vec<(usize, f64)> {
    // Render into the residue's own bounding window, then map back.
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for a in &res.atoms {
        for ax in 0..3 {
            let u0 = ((a.position[ax] - p.cutoff_radius - grid.origin[ax]) / grid.voxel_size[ax])
                .ceil()
                .max(0.0) as usize;
            let u1 = ((a.position[ax] + p.cutoff_radius - grid.origin[ax]) / grid.voxel_size[ax])
                .floor();
            let u1 = if u1 < 0.0 { 0 } else { (u1 as usize).min(grid.dims[ax] - 1) };
            lo[ax] = lo[ax].min(u0);
            hi[ax] = hi[ax].max(u1);
        }
    }
    if (0..3).any(|ax| lo[ax] > hi[ax] || lo[ax] >= grid.dims[ax]) {
        return Vec::new();
    }
    let sub = GridGeometry {
        dims: [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1],
        voxel_size: grid.voxel_size,
        origin: grid.position(lo[0], lo[1], lo[2]),
    };
    let mut acc = vec![0.0f64; sub.len()];
    for a in &res.atoms {
        splat_atom(&mut acc, &sub, p, a.element_number, a.position);
    }
    let mut out = Vec::new();
    for z in 0..sub.dims[2] {
        for y in 0..sub.dims[1] {
            for x in 0..sub.dims[0] {
                let v = acc[x + sub.dims[0] * (y + sub.dims[1] * z)];
                if v != 0.0 {
                    let gi = (lo[0] + x) + grid.dims[0] * ((lo[1] + y) + grid.dims[1] * (lo[2] + z));
                    out.push((gi, v));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure_io::{parse_pdb, format_atom_record};

    fn structure(atoms: &[(&str, &str, i32, [f64; 3], &str)]) -> ProteinStructure {
        let text: Vec<String> = atoms
            .iter()
            .enumerate()
            .map(|(i, (n, r, s, p, e))| format_atom_record(i + 1, n, r, 'A', *s, *p, e))
            .collect();
        parse_pdb(&text.join("\n"), "t").unwrap()
    }

    fn grid(n: usize, origin: f64) -> GridGeometry {
        GridGeometry {
            dims: [n; 3],
            voxel_size: [1.0; 3],
            origin: [origin; 3],
        }
    }

    #[test]
    fn params_at_two_angstrom() {
        let p = derive_params(2.0).unwrap();
        let ln2 = 2f64.ln();
        assert!((p.k - ln2).abs() < 1e-12);
        let theta = (ln2 / std::f64::consts::PI).powf(1.5);
        assert!((p.theta - theta).abs() < 1e-12);
        assert!((p.theta - 0.10368).abs() < 5e-5);
        assert!((p.cutoff_radius - 4.0 / ln2.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bad_resolutions() {
        assert!(derive_params(0.0).is_err());
        assert!(derive_params(-1.0).is_err());
        assert!(derive_params(150.0).is_err());
        assert!(derive_params(f64::NAN).is_err());
    }

    #[test]
    fn truncated_mass_is_small() {
        // Radial mass of a 3D Gaussian exp(-k r^2) beyond rc, by quadrature.
        let p = derive_params(2.0).unwrap();
        let f = |r: f64| 4.0 * std::f64::consts::PI * r * r * p.theta * (-p.k * r * r).exp();
        let (mut inside, mut total) = (0.0, 0.0);
        let h = 1e-4;
        let mut r = h / 2.0;
        while r < 30.0 {
            total += f(r) * h;
            if r <= p.cutoff_radius {
                inside += f(r) * h;
            }
            r += h;
        }
        assert!((total - 1.0).abs() < 1e-6);
        assert!(1.0 - inside / total < 1e-4);
    }

    #[test]
    fn single_carbon_center_and_decay() {
        let p = derive_params(2.0).unwrap();
        let s = structure(&[("CA", "ALA", 1, [0.0, 0.0, 0.0], "C")]);
        let g = grid(21, -10.0);
        let m = simulate_map(&s, &p, Some(&g)).unwrap().map;
        let center = m.get(10, 10, 10) as f64;
        assert!((center - 6.0 * p.theta).abs() < 1e-6);
        assert!((center - 0.62208).abs() < 5e-4);
        let one = m.get(11, 10, 10) as f64;
        assert!((one - 6.0 * p.theta * (-p.k).exp()).abs() < 1e-6);
        let mut prev = f64::INFINITY;
        for x in 10..21 {
            let v = m.get(x, 10, 10) as f64;
            assert!(v <= prev);
            prev = v;
        }
        let integral: f64 = m.data.iter().map(|&v| v as f64).sum::<f64>() * g.voxel_volume();
        assert!((integral - 6.0).abs() / 6.0 < 0.02);
    }

    #[test]
    fn duplicate_atoms_double() {
        let p = derive_params(3.0).unwrap();
        let one = structure(&[("CA", "ALA", 1, [0.3, -0.2, 0.1], "C")]);
        let two = structure(&[
            ("CA", "ALA", 1, [0.3, -0.2, 0.1], "C"),
            ("CB", "ALA", 1, [0.3, -0.2, 0.1], "C"),
        ]);
        let g = grid(15, -7.0);
        let a = simulate_map(&one, &p, Some(&g)).unwrap().map;
        let b = simulate_map(&two, &p, Some(&g)).unwrap().map;
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((2.0 * x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn auto_grid_aligned_and_covering() {
        let p = derive_params(2.0).unwrap().with_grid_interval(1.0).unwrap();
        let s = structure(&[
            ("N", "GLY", 1, [1.3, 2.7, -3.1], "N"),
            ("CA", "GLY", 1, [2.4, 3.1, -2.2], "C"),
        ]);
        let sim = simulate_map(&s, &p, None).unwrap();
        let g = sim.map.geometry();
        for a in 0..3 {
            assert_eq!(g.origin[a], g.origin[a].round());
        }
        let margin = 3.0 / p.k.sqrt();
        for atom in s.atoms() {
            for a in 0..3 {
                assert!(atom.position[a] - g.origin[a] >= margin);
                let far = g.origin[a] + (g.dims[a] - 1) as f64 * g.voxel_size[a];
                assert!(far - atom.position[a] >= margin);
            }
        }
    }

    #[test]
    fn grid_must_cover_atoms() {
        let p = derive_params(2.0).unwrap();
        let s = structure(&[("CA", "ALA", 1, [50.0, 0.0, 0.0], "C")]);
        assert!(matches!(
            simulate_map(&s, &p, Some(&grid(10, 0.0))),
            Err(SimError::GridTooSmall(_))
        ));
    }

    fn glycine() -> ProteinStructure {
        structure(&[
            ("N", "GLY", 1, [0.0, 0.0, 0.0], "N"),
            ("CA", "GLY", 1, [1.46, 0.0, 0.0], "C"),
            ("C", "GLY", 1, [2.0, 1.4, 0.0], "C"),
            ("O", "GLY", 1, [1.3, 2.4, 0.1], "O"),
            ("N", "ALA", 2, [3.3, 1.5, 0.0], "N"),
            ("CA", "ALA", 2, [4.0, 2.8, 0.2], "C"),
            ("C", "ALA", 2, [5.5, 2.6, 0.0], "C"),
            ("O", "ALA", 2, [6.1, 1.6, -0.4], "O"),
            ("CB", "ALA", 2, [3.7, 3.5, 1.5], "C"),
        ])
    }

    #[test]
    fn residue_integral_matches_atomic_numbers() {
        let p = derive_params(2.0).unwrap();
        let s = glycine();
        let g = grid(30, -12.0);
        let m = residue_density(&s, 'A', 1, &p, &g).unwrap();
        let integral: f64 = m.data.iter().map(|&v| v as f64).sum();
        assert!((integral - 27.0).abs() / 27.0 < 0.02, "{integral}");
    }

    #[test]
    fn residues_sum_to_full_map() {
        let p = derive_params(2.0).unwrap();
        let s = glycine();
        let g = grid(30, -12.0);
        let full = simulate_map(&s, &p, Some(&g)).unwrap().map;
        let a = residue_density(&s, 'A', 1, &p, &g).unwrap();
        let b = residue_density(&s, 'A', 2, &p, &g).unwrap();
        for i in 0..full.len() {
            assert!((a.data[i] + b.data[i] - full.data[i]).abs() <= 1e-5);
        }
        assert!(matches!(
            residue_density(&s, 'A', 9, &p, &g),
            Err(SimError::UnknownResidue { .. })
        ));
    }

    #[test]
    fn residue_outside_grid_is_zero() {
        let p = derive_params(2.0).unwrap();
        let s = glycine().translated([500.0, 0.0, 0.0]);
        let m = residue_density(&s, 'A', 1, &p, &grid(10, 0.0)).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sparse_matches_dense() {
        let p = derive_params(2.0).unwrap();
        let s = glycine();
        let g = grid(24, -9.0);
        let dense = residue_density(&s, 'A', 2, &p, &g).unwrap();
        let sparse = residue_density_sparse(s.residue('A', 2).unwrap(), &p, &g);
        let mut rebuilt = vec![0.0f32; g.len()];
        for (i, v) in sparse {
            rebuilt[i] = v as f32;
        }
        assert_eq!(rebuilt, dense.data);
    }

    #[test]
    fn translation_by_grid_steps() {
        let p = derive_params(2.0).unwrap();
        let s = glycine();
        let g = grid(26, -10.0);
        let shifted = s.translated([3.0, -2.0, 5.0]);
        let g2 = GridGeometry {
            origin: [-7.0, -12.0, -5.0],
            ..g
        };
        let a = simulate_map(&s, &p, Some(&g)).unwrap().map;
        let b = simulate_map(&shifted, &p, Some(&g2)).unwrap().map;
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}
