//! Map quality metrics: real-space correlations, Fourier shell correlation
//! and per-residue real-space correlation.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map_io::{DensityMap, GridGeometry};
use crate::map_sim::{self, SimError, SimParams};
use crate::structure_io::ProteinStructure;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("too few points for correlation ({0})")]
    TooFewPoints(usize),
    #[error("no atoms inside the map grid")]
    NoAtoms,
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Tunable constants of the correlation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CcOptions {
    /// Volume attributed to each atom, in Å³.
    pub atom_volume: f64,
    /// Candidate points for the atom-centred metric lie within this radius.
    pub cutoff_radius: f64,
    /// Fraction of voxels taken from each map by the peak metric.
    pub peak_fraction: f64,
}

impl Default for CcOptions {
    fn default() -> Self {
        CcOptions { atom_volume: 16.0, cutoff_radius: 3.0, peak_fraction: 0.1 }
    }
}

/// Two-pass Pearson correlation in `f64`.
pub fn pearson(a: &[f32], b: &[f32]) -> Result<f64, MetricError> {
    assert_eq!(a.len(), b.len(), "pearson length mismatch");
    let n = a.len();
    if n < 2 {
        return Err(MetricError::TooFewPoints(n));
    }
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 {
        return Err(MetricError::ZeroVariance("first map"));
    }
    if sbb == 0.0 {
        return Err(MetricError::ZeroVariance("second map"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn pearson_at(a: &[f32], b: &[f32], idx: &[usize]) -> Result<f64, MetricError> {
    let xa: Vec<f32> = idx.iter().map(|&i| a[i]).collect();
    let xb: Vec<f32> = idx.iter().map(|&i| b[i]).collect();
    pearson(&xa, &xb)
}

pub fn check_same_grid(a: &GridGeometry, b: &GridGeometry) -> Result<(), MetricError> {
    if a.dims != b.dims {
        return Err(MetricError::GridMismatch(format!("dims {:?} vs {:?}", a.dims, b.dims)));
    }
    for ax in 0..3 {
        if (a.voxel_size[ax] - b.voxel_size[ax]).abs() > 1e-6 * a.voxel_size[ax].abs().max(1.0) {
            return Err(MetricError::GridMismatch(format!(
                "voxel size {:?} vs {:?}",
                a.voxel_size, b.voxel_size
            )));
        }
        if (a.origin[ax] - b.origin[ax]).abs() > 1e-3 {
            return Err(MetricError::GridMismatch(format!("origin {:?} vs {:?}", a.origin, b.origin)));
        }
    }
    Ok(())
}

/// Correlation over every voxel.
pub fn cc_box(a: &DensityMap, b: &DensityMap) -> Result<f64, MetricError> {
    check_same_grid(&a.geometry(), &b.geometry())?;
    pearson(&a.data, &b.data)
}

/// Indices of the `n` largest values; ties go to the lower index.
fn top_indices(v: &[f32], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let n = n.min(v.len());
    if n < v.len() {
        idx.select_nth_unstable_by(n, |&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
        idx.truncate(n);
    }
    idx
}

/// Correlation over the union of both maps' top `fraction` voxels.
/// Returns the coefficient and the number of points used.
pub fn cc_peaks(a: &DensityMap, b: &DensityMap, fraction: f64) -> Result<(f64, usize), MetricError> {
    check_same_grid(&a.geometry(), &b.geometry())?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MetricError::Invalid(format!("peak fraction {fraction} outside (0, 1]")));
    }
    let n = (fraction * a.len() as f64).ceil() as usize;
    let mut keep = vec![false; a.len()];
    for i in top_indices(&a.data, n).into_iter().chain(top_indices(&b.data, n)) {
        keep[i] = true;
    }
    let idx: Vec<usize> = (0..a.len()).filter(|&i| keep[i]).collect();
    if idx.len() < 2 {
        return Err(MetricError::TooFewPoints(idx.len()));
    }
    Ok((pearson_at(&a.data, &b.data, &idx)?, idx.len()))
}

/// Voxels within `radius` of any atom, in ascending index order.
pub fn atom_neighbourhood(s: &ProteinStructure, grid: &GridGeometry, radius: f64) -> Vec<usize> {
    let mut mask = vec![false; grid.len()];
    let r2 = radius * radius;
    for a in s.atoms() {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut inside = true;
        for ax in 0..3 {
            let u0 = ((a.position[ax] - radius - grid.origin[ax]) / grid.voxel_size[ax]).ceil();
            let u1 = ((a.position[ax] + radius - grid.origin[ax]) / grid.voxel_size[ax]).floor();
            if u1 < 0.0 || u0 > (grid.dims[ax] - 1) as f64 || u0 > u1 {
                inside = false;
                break;
            }
            lo[ax] = u0.max(0.0) as usize;
            hi[ax] = (u1 as usize).min(grid.dims[ax] - 1);
        }
        if !inside {
            continue;
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = grid.position(x, y, z);
                    let d2: f64 = (0..3).map(|ax| (p[ax] - a.position[ax]).powi(2)).sum();
                    if d2 <= r2 {
                        mask[x + grid.dims[0] * (y + grid.dims[1] * z)] = true;
                    }
                }
            }
        }
    }
    (0..mask.len()).filter(|&i| mask[i]).collect()
}

/// Atom-centred correlation: the `round(n_atoms·v_atom / voxel_volume)`
/// highest model-density points near atoms. Returns the coefficient and N.
pub fn cc_volume(
    exp: &DensityMap,
    model: &DensityMap,
    structure: &ProteinStructure,
    voxel_volume: f64,
    opts: &CcOptions,
) -> Result<(f64, usize), MetricError> {
    let grid = exp.geometry();
    check_same_grid(&grid, &model.geometry())?;
    if voxel_volume <= 0.0 {
        return Err(MetricError::Invalid(format!("voxel volume {voxel_volume}")));
    }
    let n_atoms = structure.atoms().filter(|a| grid.contains(a.position)).count();
    if n_atoms == 0 {
        return Err(MetricError::NoAtoms);
    }
    let candidates = atom_neighbourhood(structure, &grid, opts.cutoff_radius);
    let n = ((n_atoms as f64 * opts.atom_volume / voxel_volume).round() as usize).min(candidates.len());
    if n < 2 {
        return Err(MetricError::TooFewPoints(n));
    }
    let vals: Vec<f32> = candidates.iter().map(|&i| model.data[i]).collect();
    let mut idx: Vec<usize> = top_indices(&vals, n).into_iter().map(|k| candidates[k]).collect();
    idx.sort_unstable();
    Ok((pearson_at(&exp.data, &model.data, &idx)?, idx.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcReport {
    pub cc_box: f64,
    pub cc_volume: Option<f64>,
    pub cc_peaks: f64,
    pub n_box: usize,
    pub n_volume: Option<usize>,
    pub n_peaks: usize,
}

/// All real-space correlations of `map` against `reference`. The
/// atom-centred term needs a structure.
pub fn cc_report(
    map: &DensityMap,
    reference: &DensityMap,
    structure: Option<&ProteinStructure>,
    opts: &CcOptions,
) -> Result<CcReport, MetricError> {
    let cc_b = cc_box(map, reference)?;
    let (cc_p, n_p) = cc_peaks(map, reference, opts.peak_fraction)?;
    let (cc_v, n_v) = match structure {
        Some(s) => {
            let (c, n) = cc_volume(map, reference, s, map.geometry().voxel_volume(), opts)?;
            (Some(c), Some(n))
        }
        None => (None, None),
    };
    Ok(CcReport { cc_box: cc_b, cc_volume: cc_v, cc_peaks: cc_p, n_box: map.len(), n_volume: n_v, n_peaks: n_p })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FscCurve {
    /// Spatial frequency of each shell in 1/Å, starting at the DC shell.
    pub shell_centers: Vec<f64>,
    pub fsc: Vec<f64>,
    /// Resolution in Å where the curve first falls below 0.5.
    pub fsc05: f64,
    /// Set when the curve never falls below 0.5 and `fsc05` is Nyquist.
    pub at_nyquist: bool,
}

/// Forward 3D DFT of a real cube of edge `n` stored x-fastest.
fn fft3(data: &[f32], n: usize) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut line = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for stride in [1, n, n * n] {
        for a in 0..n {
            for b in 0..n {
                let base = match stride {
                    1 => n * (a + n * b),
                    s if s == n => a + n * n * b,
                    _ => a + n * b,
                };
                for (i, l) in line.iter_mut().enumerate() {
                    *l = buf[base + i * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (i, l) in line.iter().enumerate() {
                    buf[base + i * stride] = *l;
                }
            }
        }
    }
    buf
}

/// Copies a map into the corner of a zero cube of edge `max(dims)`.
fn pad_to_cube(m: &DensityMap, n: usize) -> Vec<f32> {
    let [nx, ny, nz] = m.dims;
    let mut out = vec![0.0f32; n * n * n];
    for z in 0..nz {
        for y in 0..ny {
            let src = &m.data[nx * (y + ny * z)..][..nx];
            out[n * (y + n * z)..][..nx].copy_from_slice(src);
        }
    }
    out
}

/// Unmasked Fourier shell correlation with unit-width shells.
pub fn fsc(a: &DensityMap, b: &DensityMap) -> Result<FscCurve, MetricError> {
    check_same_grid(&a.geometry(), &b.geometry())?;
    let vs = a.voxel_size;
    if (vs[0] - vs[1]).abs() > 1e-6 || (vs[0] - vs[2]).abs() > 1e-6 {
        return Err(MetricError::GridMismatch(format!("anisotropic voxel size {vs:?}")));
    }
    let n = *a.dims.iter().max().unwrap();
    if n < 2 {
        return Err(MetricError::TooFewPoints(n));
    }
    let fa = fft3(&pad_to_cube(a, n), n);
    let fb = fft3(&pad_to_cube(b, n), n);
    let nshell = n / 2 + 1;
    let mut num = vec![0.0f64; nshell];
    let mut da = vec![0.0f64; nshell];
    let mut db = vec![0.0f64; nshell];
    let freq = |i: usize| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let r = (freq(i).powi(2) + freq(j).powi(2) + freq(k).powi(2)).sqrt();
                let s = r.round() as usize;
                if s >= nshell {
                    continue;
                }
                let idx = i + n * (j + n * k);
                let (x, y) = (fa[idx], fb[idx]);
                num[s] += (x * y.conj()).re;
                da[s] += x.norm_sqr();
                db[s] += y.norm_sqr();
            }
        }
    }
    let curve: Vec<f64> = (0..nshell)
        .map(|s| {
            let d = (da[s] * db[s]).sqrt();
            if d > 0.0 {
                (num[s] / d).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let step = 1.0 / (n as f64 * vs[0]);
    let centers: Vec<f64> = (0..nshell).map(|s| s as f64 * step).collect();
    let nyquist = 2.0 * vs[0];
    let (fsc05, at_nyquist) = fsc05_from(&curve, &centers).map_or((nyquist, true), |f| (f, false));
    Ok(FscCurve { shell_centers: centers, fsc: curve, fsc05, at_nyquist })
}

/// First downward 0.5 crossing after the DC shell, linearly interpolated.
fn fsc05_from(curve: &[f64], centers: &[f64]) -> Option<f64> {
    if curve.len() < 2 {
        return None;
    }
    if curve[1] < 0.5 {
        return Some(1.0 / centers[1]);
    }
    for s in 2..curve.len() {
        if curve[s] < 0.5 && curve[s - 1] >= 0.5 {
            let t = (curve[s - 1] - 0.5) / (curve[s - 1] - curve[s]);
            let f = centers[s - 1] + t * (centers[s] - centers[s - 1]);
            return Some(1.0 / f);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidueScore {
    pub chain: char,
    pub seq: i32,
    pub name: String,
    /// `None` when the residue's support is too small.
    pub rscc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RsccReport {
    pub residues: Vec<ResidueScore>,
    pub chain_means: BTreeMap<char, f64>,
}

/// Voxels within this fraction of a residue's peak density form its support.
pub const RSCC_SUPPORT_FRACTION: f64 = 0.01;
pub const RSCC_MIN_SUPPORT: usize = 8;

impl RsccReport {
    /// Fraction of residues scored in both reports whose RSCC is strictly
    /// higher here than in `baseline`.
    pub fn improved_fraction(&self, baseline: &RsccReport) -> f64 {
        let base: BTreeMap<(char, i32), f64> = baseline
            .residues
            .iter()
            .filter_map(|r| r.rscc.map(|v| ((r.chain, r.seq), v)))
            .collect();
        let mut total = 0usize;
        let mut better = 0usize;
        for r in &self.residues {
            if let (Some(v), Some(b)) = (r.rscc, base.get(&(r.chain, r.seq))) {
                total += 1;
                if v > *b {
                    better += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            better as f64 / total as f64
        }
    }
}

/// Per-residue correlation between `exp` and the full-model simulation,
/// over the voxels where that residue's own density exceeds 1% of its peak.
pub fn rscc(exp: &DensityMap, structure: &ProteinStructure, params: &SimParams) -> Result<RsccReport, MetricError> {
    let grid = exp.geometry();
    let model = map_sim::simulate_map(structure, params, Some(&grid))?.map;
    let mut residues = Vec::new();
    let mut sums: BTreeMap<char, (f64, usize)> = BTreeMap::new();
    for chain in &structure.chains {
        for res in &chain.residues {
            let sparse = map_sim::residue_density_sparse(res, params, &grid);
            let peak = sparse.iter().map(|&(_, v)| v).fold(0.0f64, f64::max);
            let support: Vec<usize> = sparse
                .iter()
                .filter(|&&(_, v)| v > RSCC_SUPPORT_FRACTION * peak)
                .map(|&(i, _)| i)
                .collect();
            let score = if support.len() < RSCC_MIN_SUPPORT {
                None
            } else {
                pearson_at(&exp.data, &model.data, &support).ok()
            };
            if let Some(v) = score {
                let e = sums.entry(chain.id).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
            residues.push(ResidueScore { chain: chain.id, seq: res.seq_id, name: res.name.clone(), rscc: score });
        }
    }
    let chain_means = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    Ok(RsccReport { residues, chain_means })
}
