//! Map preparation for the network: resampling, percentile normalization,
//! cube tiling with central-crop stitching, and training augmentations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map_io::{DensityMap, GridGeometry};

pub const CUBE_SIZE: usize = 64;
pub const CORE_SIZE: usize = 50;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("degenerate map: {0}")]
    Degenerate(String),
    #[error("normalization scale {0} is not positive")]
    NonPositiveScale(f64),
    #[error("plan does not match map: {0}")]
    PlanMismatch(String),
    #[error("missing cubes: have {have}, plan needs {need}")]
    MissingCubes { have: usize, need: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Samples `src` by trilinear interpolation at the points of `target`.
/// Samples whose neighbours fall outside `src` read those neighbours as 0.
pub fn resample_onto(src: &DensityMap, target: &GridGeometry) -> DensityMap {
    let mut out = DensityMap::zeros(*target);
    let [sx, sy, sz] = src.dims;
    let fetch = |x: i64, y: i64, z: i64| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= sx as i64 || y >= sy as i64 || z >= sz as i64 {
            0.0
        } else {
            src.get(x as usize, y as usize, z as usize) as f64
        }
    };
    let coord = |axis: usize, i: usize| -> f64 {
        (target.origin[axis] + i as f64 * target.voxel_size[axis] - src.origin[axis])
            / src.voxel_size[axis]
    };
    let [nx, ny, nz] = target.dims;
    for k in 0..nz {
        let w = coord(2, k);
        let (z0, fz) = split(w);
        for j in 0..ny {
            let v = coord(1, j);
            let (y0, fy) = split(v);
            for i in 0..nx {
                let u = coord(0, i);
                let (x0, fx) = split(u);
                let mut acc = 0.0;
                for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                    if wz == 0.0 {
                        continue;
                    }
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        if wy == 0.0 {
                            continue;
                        }
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            if wx == 0.0 {
                                continue;
                            }
                            acc += wz * wy * wx * fetch(x0 + dx, y0 + dy, z0 + dz);
                        }
                    }
                }
                out.data[i + nx * (j + ny * k)] = acc as f32;
            }
        }
    }
    out
}

#[inline]
fn split(u: f64) -> (i64, f64) {
    // Snap values within rounding noise of a grid point so identity
    // resampling is exact.
    let r = u.round();
    if (u - r).abs() < 1e-9 {
        return (r as i64, 0.0);
    }
    let f = u.floor();
    (f as i64, u - f)
}

/// Resamples to an isotropic `target` Å/voxel grid sharing the source origin.
pub fn resample(map: &DensityMap, target: f64) -> Result<DensityMap, PrepError> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(PrepError::Config(format!("target voxel size {target}")));
    }
    if map.voxel_size.iter().any(|v| !(*v > 0.0)) || map.dims.contains(&0) {
        return Err(PrepError::Degenerate(format!(
            "dims {:?}, voxel size {:?}",
            map.dims, map.voxel_size
        )));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        // Round away float noise before the ceiling (e.g. 3 * 0.1 / 0.3).
        let ext = map.dims[a] as f64 * map.voxel_size[a] / target;
        let r = ext.round();
        dims[a] = if (ext - r).abs() < 1e-9 { r as usize } else { ext.ceil() as usize }.max(1);
    }
    let geom = GridGeometry {
        dims,
        voxel_size: [target; 3],
        origin: map.origin,
    };
    Ok(resample_onto(map, &geom))
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f32], p: f64) -> f64 {
    let mut v: Vec<f32> = values.to_vec();
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    let (_, lo_v, rest) = v.select_nth_unstable_by(lo, f32::total_cmp);
    let lo_v = *lo_v as f64;
    let hi_v = if hi == lo {
        lo_v
    } else {
        rest.iter().copied().fold(f32::INFINITY, f32::min) as f64
    };
    lo_v + frac * (hi_v - lo_v)
}

pub const NORMALIZE_PERCENTILE: f64 = 99.9;

/// Divides by the 99.9th percentile of all voxels (zeros included) and clamps
/// to [0, 1]. Returns the map and the scale.
pub fn normalize(map: &DensityMap) -> Result<(DensityMap, f64), PrepError> {
    let scale = percentile(&map.data, NORMALIZE_PERCENTILE);
    if !(scale > 0.0) {
        return Err(PrepError::NonPositiveScale(scale));
    }
    let mut out = map.clone();
    for v in &mut out.data {
        *v = ((*v as f64 / scale).clamp(0.0, 1.0)) as f32;
    }
    Ok((out, scale))
}

/// Mapping between a volume and the fixed-size cubes fed to the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub original_dims: [usize; 3],
    pub padded_dims: [usize; 3],
    pub cube_size: usize,
    pub core_size: usize,
    pub stride: usize,
    /// Zero padding added on each side.
    pub pad: usize,
    /// Cube corners in padded-volume voxels, z-major then y then x.
    pub cube_origins: Vec<[usize; 3]>,
}

impl TilePlan {
    pub fn rim(&self) -> usize {
        (self.cube_size - self.core_size) / 2
    }

    pub fn len(&self) -> usize {
        self.cube_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cube_origins.is_empty()
    }

    /// Start of cube `i`'s core in original-volume coordinates.
    pub fn core_start(&self, i: usize) -> [usize; 3] {
        let o = self.cube_origins[i];
        let shift = self.pad - self.rim();
        [o[0] - shift, o[1] - shift, o[2] - shift]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub cube_size: usize,
    pub core_size: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            cube_size: CUBE_SIZE,
            core_size: CORE_SIZE,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<(), PrepError> {
        if self.core_size == 0
            || self.core_size > self.cube_size
            || !(self.cube_size - self.core_size).is_multiple_of(2)
        {
            return Err(PrepError::Config(format!(
                "cube {} / core {}: core must be ≥ 1, ≤ cube, and leave an even rim",
                self.cube_size, self.core_size
            )));
        }
        Ok(())
    }
}

/// Core starts along one axis: multiples of the core size, with the last one
/// pulled inward so it ends exactly at the volume edge.
fn axis_core_starts(dim: usize, core: usize) -> Vec<usize> {
    let n = dim.div_ceil(core);
    let last = dim.max(core) - core;
    (0..n).map(|i| (i * core).min(last)).collect()
}

pub fn make_plan(dims: [usize; 3]) -> TilePlan {
    make_plan_with(dims, &TileConfig::default()).expect("default tiling is valid")
}

pub fn make_plan_with(dims: [usize; 3], cfg: &TileConfig) -> Result<TilePlan, PrepError> {
    cfg.validate()?;
    if dims.contains(&0) {
        return Err(PrepError::Degenerate(format!("dims {dims:?}")));
    }
    let pad = cfg.cube_size;
    let rim = (cfg.cube_size - cfg.core_size) / 2;
    let shift = pad - rim;
    let starts: Vec<Vec<usize>> = dims.iter().map(|&d| axis_core_starts(d, cfg.core_size)).collect();
    let mut cube_origins = Vec::new();
    for &z in &starts[2] {
        for &y in &starts[1] {
            for &x in &starts[0] {
                cube_origins.push([x + shift, y + shift, z + shift]);
            }
        }
    }
    Ok(TilePlan {
        original_dims: dims,
        padded_dims: [dims[0] + 2 * pad, dims[1] + 2 * pad, dims[2] + 2 * pad],
        cube_size: cfg.cube_size,
        core_size: cfg.core_size,
        stride: cfg.core_size,
        pad,
        cube_origins,
    })
}

/// Cubes cut from one volume, in plan order.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeBatch {
    pub cubes: Vec<Vec<f32>>,
    pub cube_size: usize,
    /// Plan index of each cube.
    pub indices: Vec<usize>,
}

impl CubeBatch {
    pub fn is_complete(&self, plan: &TilePlan) -> bool {
        self.cubes.len() == plan.len()
    }
}

/// Copies each cube out of the zero-padded volume.
pub fn partition(map: &DensityMap, plan: &TilePlan) -> Result<CubeBatch, PrepError> {
    if map.dims != plan.original_dims {
        return Err(PrepError::PlanMismatch(format!(
            "map dims {:?}, plan dims {:?}",
            map.dims, plan.original_dims
        )));
    }
    let c = plan.cube_size;
    let pad = plan.pad as i64;
    let [nx, ny, nz] = map.dims;
    let mut cubes = Vec::with_capacity(plan.len());
    for o in &plan.cube_origins {
        let mut cube = vec![0.0f32; c * c * c];
        for k in 0..c {
            let z = o[2] as i64 + k as i64 - pad;
            if z < 0 || z >= nz as i64 {
                continue;
            }
            for j in 0..c {
                let y = o[1] as i64 + j as i64 - pad;
                if y < 0 || y >= ny as i64 {
                    continue;
                }
                // Contiguous x run inside the original volume.
                let x_lo = (pad - o[0] as i64).max(0) as usize;
                let x_hi = ((nx as i64 + pad - o[0] as i64).min(c as i64)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                let src_x = (o[0] as i64 + x_lo as i64 - pad) as usize;
                let src = src_x + nx * (y as usize + ny * z as usize);
                let dst = x_lo + c * (j + c * k);
                cube[dst..dst + (x_hi - x_lo)].copy_from_slice(&map.data[src..src + (x_hi - x_lo)]);
            }
        }
        cubes.push(cube);
    }
    Ok(CubeBatch {
        cubes,
        cube_size: c,
        indices: (0..plan.len()).collect(),
    })
}

/// Reassembles a volume from the central cores of each cube. Where clamped
/// tail cores overlap, later cubes in plan order overwrite earlier ones.
pub fn stitch(batch: &CubeBatch, plan: &TilePlan, template: &GridGeometry) -> Result<DensityMap, PrepError> {
    if !batch.is_complete(plan) {
        return Err(PrepError::MissingCubes {
            have: batch.cubes.len(),
            need: plan.len(),
        });
    }
    if template.dims != plan.original_dims {
        return Err(PrepError::PlanMismatch(format!(
            "template dims {:?}, plan dims {:?}",
            template.dims, plan.original_dims
        )));
    }
    let c = plan.cube_size;
    if batch.cube_size != c || batch.cubes.iter().any(|v| v.len() != c * c * c) {
        return Err(PrepError::PlanMismatch("cube size differs from plan".into()));
    }
    let mut order: Vec<(usize, &Vec<f32>)> = batch.indices.iter().copied().zip(&batch.cubes).collect();
    order.sort_by_key(|(i, _)| *i);
    if order.iter().enumerate().any(|(k, (i, _))| k != *i) {
        return Err(PrepError::PlanMismatch("cube indices do not cover the plan".into()));
    }
    let mut out = DensityMap::zeros(*template);
    let [nx, ny, nz] = plan.original_dims;
    let rim = plan.rim();
    let core = plan.core_size;
    for (i, cube) in order {
        let s = plan.core_start(i);
        let ex = core.min(nx - s[0]);
        for k in 0..core.min(nz - s[2]) {
            for j in 0..core.min(ny - s[1]) {
                let src = rim + c * ((rim + j) + c * (rim + k));
                let dst = s[0] + nx * ((s[1] + j) + ny * (s[2] + k));
                out.data[dst..dst + ex].copy_from_slice(&cube[src..src + ex]);
            }
        }
    }
    Ok(out)
}

/// Ranges for the three training augmentations. A zero-width range at the
/// neutral value disables a transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: (f64, f64),
    /// Gaussian blur sigma, voxels.
    pub blur_sigma: (f64, f64),
    /// Downsampling factor applied to one random axis (1 = none).
    pub anisotropy: (f64, f64),
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            noise_std: (0.0, 0.0),
            blur_sigma: (0.0, 0.0),
            anisotropy: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<(), PrepError> {
        let ok = |(lo, hi): (f64, f64), min: f64| lo.is_finite() && hi.is_finite() && lo >= min && hi >= lo;
        if !ok(self.noise_std, 0.0) || !ok(self.blur_sigma, 0.0) || !ok(self.anisotropy, 1.0) {
            return Err(PrepError::Config(format!("augmentation ranges {self:?}")));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_std: (0.0, 0.05),
            blur_sigma: (0.0, 1.0),
            anisotropy: (1.0, 2.0),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Index into `[0, n)` for position `i` under half-sample symmetric
/// reflection (`... b a | a b c | c b ...`), repeated as needed.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with reflective borders over a volume of `dims`.
pub fn gaussian_blur(data: &[f32], dims: [usize; 3], sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut cur: Vec<f64> = data.iter().map(|&v| v as f64).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let mut next = vec![0.0f64; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = (idx / stride) % n;
            let base = idx - pos * stride;
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let src = reflect(pos as i64 + t as i64 - radius, n);
                acc += w * cur[base + src * stride];
            }
            *out = acc;
        }
        cur = next;
    }
    cur.into_iter().map(|v| v as f32).collect()
}

fn lerp_axis(line: &[f64], pos: f64) -> f64 {
    let n = line.len();
    if n == 1 {
        return line[0];
    }
    let p = pos.clamp(0.0, (n - 1) as f64);
    let i = (p.floor() as usize).min(n - 2);
    let f = p - i as f64;
    line[i] * (1.0 - f) + line[i + 1] * f
}

/// Downsamples one axis by `factor` and interpolates back to full length.
pub fn anisotropic_resample(data: &[f32], dims: [usize; 3], axis: usize, factor: f64) -> Vec<f32> {
    if factor <= 1.0 {
        return data.to_vec();
    }
    let n = dims[axis];
    let m = ((n as f64 / factor).ceil() as usize).max(1);
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut out = data.to_vec();
    let mut line = vec![0.0f64; n];
    let mut low = vec![0.0f64; m];
    for idx in 0..data.len() {
        if !(idx / stride).is_multiple_of(n) {
            continue;
        }
        for (i, v) in line.iter_mut().enumerate() {
            *v = data[idx + i * stride] as f64;
        }
        for (j, v) in low.iter_mut().enumerate() {
            *v = lerp_axis(&line, j as f64 * factor);
        }
        for i in 0..n {
            out[idx + i * stride] = lerp_axis(&low, i as f64 / factor) as f32;
        }
    }
    out
}

/// Seeded anisotropy, blur, then additive noise on a cubic volume.
pub fn augment(cube: &[f32], size: usize, seed: u64, cfg: &AugmentConfig) -> Result<Vec<f32>, PrepError> {
    cfg.validate()?;
    if cube.len() != size * size * size {
        return Err(PrepError::PlanMismatch(format!(
            "cube has {} voxels, expected {size}³",
            cube.len()
        )));
    }
    let dims = [size; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor = draw(&mut rng, cfg.anisotropy);
    let axis = rng.random_range(0..3usize);
    let sigma = draw(&mut rng, cfg.blur_sigma);
    let std = draw(&mut rng, cfg.noise_std);

    let mut out = anisotropic_resample(cube, dims, axis, factor);
    out = gaussian_blur(&out, dims, sigma);
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| PrepError::Config(e.to_string()))?;
        for v in &mut out {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_from_fn(dims: [usize; 3], vs: f64, f: impl Fn(usize, usize, usize) -> f32) -> DensityMap {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        DensityMap::new(data, dims, [vs; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn resample_identity_at_one_angstrom() {
        let m = map_from_fn([5, 4, 3], 1.0, |x, y, z| (x * 7 + y * 3 + z) as f32 * 0.1);
        let r = resample(&m, 1.0).unwrap();
        assert_eq!(r.dims, m.dims);
        for (a, b) in r.data.iter().zip(&m.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_constant_halves_dims() {
        let m = map_from_fn([8, 6, 4], 0.5, |_, _, _| 2.5);
        let r = resample(&m, 1.0).unwrap();
        assert_eq!(r.dims, [4, 3, 2]);
        assert!(r.data.iter().all(|&v| (v - 2.5).abs() < 1e-6));
        assert_eq!(r.voxel_size, [1.0; 3]);
    }

    #[test]
    fn resample_ramp_matches_trilinear() {
        // Ramp v = 0.3 * x_Å + 1 sampled at 2 Å/voxel.
        let m = map_from_fn([6, 3, 3], 2.0, |x, _, _| (0.3 * 2.0 * x as f64 + 1.0) as f32);
        let r = resample(&m, 1.0).unwrap();
        assert_eq!(r.dims, [12, 6, 6]);
        // Last source samples sit at x = 10 Å and y = z = 4 Å.
        for z in 0..r.dims[2] {
            for y in 0..r.dims[1] {
                for x in 0..r.dims[0] {
                    let pos = [x as f64, y as f64, z as f64];
                    if pos[0] <= 10.0 && pos[1] <= 4.0 && pos[2] <= 4.0 {
                        let expect = 0.3 * pos[0] + 1.0;
                        assert!((r.get(x, y, z) as f64 - expect).abs() < 1e-5);
                    }
                }
            }
        }
        // Past the last source sample the missing neighbour reads as zero.
        let tail = r.get(11, 0, 0) as f64;
        assert!((tail - 0.5 * (0.3 * 10.0 + 1.0)).abs() < 1e-5);
    }

    #[test]
    fn resample_rejects_bad_target() {
        let m = map_from_fn([2, 2, 2], 1.0, |_, _, _| 1.0);
        assert!(resample(&m, 0.0).is_err());
    }

    #[test]
    fn percentile_order_statistics() {
        let v: Vec<f32> = (1..=1000).map(|i| i as f32).collect();
        // pos = 0.999 * 999 = 998.001 → 999 + 0.001
        assert!((percentile(&v, 99.9) - 999.001).abs() < 1e-6);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 1000.0);
        assert_eq!(percentile(&[4.0], 50.0), 4.0);
    }

    #[test]
    fn normalize_ramp() {
        let m = DensityMap::new((1..=1000).map(|i| i as f32).collect(), [10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let (n, scale) = normalize(&m).unwrap();
        assert!((scale - 999.0).abs() < 0.01);
        let max = n.data.iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(max, 1.0);
        assert!(n.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn normalize_ones_and_outlier() {
        let ones = DensityMap::new(vec![1.0; 27], [3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        let (n, s) = normalize(&ones).unwrap();
        assert_eq!(s, 1.0);
        assert!(n.data.iter().all(|&v| v == 1.0));

        let mut data = vec![1.0f32; 100_000];
        data[12345] = 1e6;
        let m = DensityMap::new(data, [100, 100, 10], [1.0; 3], [0.0; 3]).unwrap();
        let (n, s) = normalize(&m).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(n.data[12345], 1.0);

        let neg = DensityMap::new(vec![-1.0; 8], [2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        assert!(matches!(normalize(&neg), Err(PrepError::NonPositiveScale(_))));
    }

    #[test]
    fn normalize_idempotent() {
        let m = map_from_fn([10, 10, 10], 1.0, |x, y, z| ((x * y + z) % 13) as f32);
        let (a, _) = normalize(&m).unwrap();
        let (b, s) = normalize(&a).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn plan_counts() {
        assert_eq!(make_plan([50, 50, 50]).len(), 1);
        assert_eq!(make_plan([100, 100, 100]).len(), 8);
        assert_eq!(make_plan([101, 60, 50]).len(), 6);
        let p = make_plan([10, 20, 30]);
        assert_eq!(p.padded_dims, [138, 148, 158]);
        assert_eq!(p.cube_origins, vec![[57, 57, 57]]);
    }

    #[test]
    fn plan_tail_is_clamped() {
        let p = make_plan([101, 50, 50]);
        let starts: Vec<usize> = (0..p.len()).map(|i| p.core_start(i)[0]).collect();
        assert_eq!(starts, vec![0, 50, 51]);
        for o in &p.cube_origins {
            for a in 0..3 {
                assert!(o[a] + p.cube_size <= p.padded_dims[a]);
            }
        }
    }

    #[test]
    fn core_coverage_counts_every_voxel_once() {
        for dims in [[1, 1, 1], [49, 50, 51], [101, 60, 50], [150, 7, 99]] {
            let p = make_plan(dims);
            let mut owner = vec![usize::MAX; dims.iter().product()];
            for i in 0..p.len() {
                let s = p.core_start(i);
                for z in s[2]..(s[2] + 50).min(dims[2]) {
                    for y in s[1]..(s[1] + 50).min(dims[1]) {
                        for x in s[0]..(s[0] + 50).min(dims[0]) {
                            owner[x + dims[0] * (y + dims[1] * z)] = i;
                        }
                    }
                }
            }
            assert!(owner.iter().all(|&o| o != usize::MAX));
        }
    }

    #[test]
    fn single_cube_core_equals_map() {
        let m = map_from_fn([50, 50, 50], 1.0, |x, y, z| (x + 2 * y + 3 * z) as f32);
        let p = make_plan(m.dims);
        let b = partition(&m, &p).unwrap();
        assert_eq!(b.cubes.len(), 1);
        let c = &b.cubes[0];
        for z in 0..50 {
            for y in 0..50 {
                for x in 0..50 {
                    assert_eq!(c[(x + 7) + 64 * ((y + 7) + 64 * (z + 7))], m.get(x, y, z));
                }
            }
        }
        // Rim lies in the zero padding.
        assert_eq!(c[0], 0.0);
        assert_eq!(c[6 + 64 * (30 + 64 * 30)], 0.0);
    }

    #[test]
    fn partition_interior_matches_source() {
        let m = map_from_fn([120, 70, 55], 1.0, |x, y, z| ((x * 31 + y * 17 + z * 7) % 101) as f32);
        let p = make_plan(m.dims);
        let b = partition(&m, &p).unwrap();
        for (i, cube) in b.cubes.iter().enumerate() {
            let o = p.cube_origins[i];
            for k in 0..64 {
                for j in 0..64 {
                    for x in 0..64 {
                        let src = [o[0] + x, o[1] + j, o[2] + k];
                        let inside = (0..3).all(|a| src[a] >= 64 && src[a] < 64 + m.dims[a]);
                        let expect = if inside { m.get(src[0] - 64, src[1] - 64, src[2] - 64) } else { 0.0 };
                        assert_eq!(cube[x + 64 * (j + 64 * k)], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn stitch_errors() {
        let m = map_from_fn([60, 10, 10], 1.0, |_, _, _| 1.0);
        let p = make_plan(m.dims);
        let mut b = partition(&m, &p).unwrap();
        b.cubes.pop();
        b.indices.pop();
        assert!(matches!(stitch(&b, &p, &m.geometry()), Err(PrepError::MissingCubes { .. })));
        let other = map_from_fn([61, 10, 10], 1.0, |_, _, _| 1.0);
        assert!(partition(&other, &p).is_err());
    }

    #[test]
    fn stitch_constant_cubes() {
        let m = map_from_fn([77, 30, 52], 1.0, |_, _, _| 0.0);
        let p = make_plan(m.dims);
        let b = CubeBatch {
            cubes: vec![vec![3.0; 64 * 64 * 64]; p.len()],
            cube_size: 64,
            indices: (0..p.len()).collect(),
        };
        let out = stitch(&b, &p, &m.geometry()).unwrap();
        assert!(out.data.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn small_tile_config() {
        let cfg = TileConfig { cube_size: 16, core_size: 10 };
        let m = map_from_fn([23, 9, 31], 1.0, |x, y, z| (x + 100 * y + 10000 * z) as f32);
        let p = make_plan_with(m.dims, &cfg).unwrap();
        assert_eq!(p.rim(), 3);
        let out = stitch(&partition(&m, &p).unwrap(), &p, &m.geometry()).unwrap();
        assert_eq!(out.data, m.data);
        assert!(make_plan_with([4, 4, 4], &TileConfig { cube_size: 16, core_size: 11 }).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn stitch_partition_identity(dx in 1usize..130, dy in 1usize..130, dz in 1usize..60, seed in any::<u32>()) {
            let m = map_from_fn([dx, dy, dz], 1.0, |x, y, z| {
                let h = (x as u32).wrapping_mul(73856093) ^ (y as u32).wrapping_mul(19349663) ^ (z as u32).wrapping_mul(83492791) ^ seed;
                (h % 10007) as f32 / 7.0
            });
            let p = make_plan(m.dims);
            let out = stitch(&partition(&m, &p).unwrap(), &p, &m.geometry()).unwrap();
            prop_assert!(out.data.iter().zip(&m.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    fn random_cube(size: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..size * size * size).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn augment_identity_and_determinism() {
        let c = random_cube(12, 1);
        assert_eq!(augment(&c, 12, 5, &AugmentConfig::identity()).unwrap(), c);
        let cfg = AugmentConfig::default();
        let a = augment(&c, 12, 42, &cfg).unwrap();
        let b = augment(&c, 12, 42, &cfg).unwrap();
        assert_eq!(a, b);
        let other = augment(&c, 12, 43, &cfg).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn augment_rejects_bad_ranges() {
        let c = random_cube(4, 1);
        let bad = AugmentConfig { noise_std: (0.2, 0.1), ..AugmentConfig::identity() };
        assert!(augment(&c, 4, 0, &bad).is_err());
        let bad = AugmentConfig { anisotropy: (0.5, 1.0), ..AugmentConfig::identity() };
        assert!(augment(&c, 4, 0, &bad).is_err());
    }

    #[test]
    fn blur_preserves_mean() {
        let c = random_cube(16, 7);
        let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        for sigma in [0.5, 1.0, 2.5, 7.0] {
            let b = gaussian_blur(&c, [16; 3], sigma);
            assert!((mean(&b) - mean(&c)).abs() < 1e-4, "sigma {sigma}");
        }
        // Blurring a constant volume leaves it constant.
        let ones = vec![1.0f32; 5 * 6 * 7];
        assert!(gaussian_blur(&ones, [5, 6, 7], 1.3).iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 3)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 2, 1, 0, 0]);
    }

    #[test]
    fn anisotropy_keeps_linear_profiles() {
        let dims = [9, 4, 4];
        let data: Vec<f32> = (0..144).map(|i| (i % 9) as f32).collect();
        let out = anisotropic_resample(&data, dims, 0, 2.0);
        for (a, b) in out.iter().zip(&data) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(anisotropic_resample(&data, dims, 1, 1.0), data);
    }
}
