//! MRC-2014 density map reading and writing.
//!
//! Only little-endian files are supported. On read, the file's axis
//! assignment (`mapc`/`mapr`/`maps`) is normalized so the in-memory volume is
//! always stored with X fastest, then Y, then Z.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

pub const HEADER_SIZE: usize = 1024;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("truncated header: file has {0} bytes, need at least 1024")]
    TruncatedHeader(usize),
    #[error("truncated data: expected {expected} bytes after header, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("unsupported MRC mode {0} (supported: 0, 1, 2, 6)")]
    UnsupportedMode(i32),
    #[error("axis codes ({0}, {1}, {2}) are not a permutation of (1, 2, 3)")]
    BadAxisOrder(i32, i32, i32),
    #[error("non-finite density value at byte offset {0}")]
    NonFinite(usize),
    #[error("big-endian MRC files are not supported")]
    BigEndian,
    #[error("invalid dimensions ({0}, {1}, {2})")]
    BadDims(i64, i64, i64),
    #[error("invalid map: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Grid placement without the density values.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridGeometry {
    /// Voxel counts along X, Y, Z.
    pub dims: [usize; 3],
    /// Å per voxel along X, Y, Z.
    pub voxel_size: [f64; 3],
    /// Position of voxel (0,0,0) in Å.
    pub origin: [f64; 3],
}

impl GridGeometry {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian position (Å) of voxel `(x, y, z)`.
    pub fn position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.voxel_size[0],
            self.origin[1] + y as f64 * self.voxel_size[1],
            self.origin[2] + z as f64 * self.voxel_size[2],
        ]
    }

    /// Whether a Cartesian point lies inside the sampled extent.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| {
            let u = (p[a] - self.origin[a]) / self.voxel_size[a];
            u >= -1e-9 && u <= (self.dims[a] - 1) as f64 + 1e-9
        })
    }

    pub fn voxel_volume(&self) -> f64 {
        self.voxel_size.iter().product()
    }
}

/// A 3D density volume with physical metadata.
///
/// `data` is indexed `x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub data: Vec<f32>,
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub origin: [f64; 3],
    /// Axis codes of the source file (mapc, mapr, maps). `[1, 2, 3]` for
    /// canonical files and for every map this crate writes.
    pub axis_order: [u8; 3],
}

impl DensityMap {
    pub fn new(
        data: Vec<f32>,
        dims: [usize; 3],
        voxel_size: [f64; 3],
        origin: [f64; 3],
    ) -> Result<Self, MapError> {
        let map = DensityMap {
            data,
            dims,
            voxel_size,
            origin,
            axis_order: [1, 2, 3],
        };
        map.validate()?;
        Ok(map)
    }

    pub fn zeros(geom: GridGeometry) -> Self {
        DensityMap {
            data: vec![0.0; geom.len()],
            dims: geom.dims,
            voxel_size: geom.voxel_size,
            origin: geom.origin,
            axis_order: [1, 2, 3],
        }
    }

    pub fn from_geometry(geom: GridGeometry, data: Vec<f32>) -> Result<Self, MapError> {
        Self::new(data, geom.dims, geom.voxel_size, geom.origin)
    }

    pub fn validate(&self) -> Result<(), MapError> {
        if self.dims.contains(&0) {
            return Err(MapError::BadDims(
                self.dims[0] as i64,
                self.dims[1] as i64,
                self.dims[2] as i64,
            ));
        }
        if self.dims.iter().product::<usize>() != self.data.len() {
            return Err(MapError::Invalid(format!(
                "dims {:?} imply {} voxels but data has {}",
                self.dims,
                self.dims.iter().product::<usize>(),
                self.data.len()
            )));
        }
        if self.voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(MapError::Invalid(format!(
                "voxel size {:?} must be positive and finite",
                self.voxel_size
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(MapError::Invalid(format!("non-finite density at voxel {i}")));
        }
        Ok(())
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            dims: self.dims,
            voxel_size: self.voxel_size,
            origin: self.origin,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (min, max, mean, rms) where rms is the standard deviation from the mean,
    /// as stored in the MRC header.
    pub fn stats(&self) -> (f32, f32, f32, f32) {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        let mut sum = 0.0f64;
        for &v in &self.data {
            min = min.min(v);
            max = max.max(v);
            sum += v as f64;
        }
        let n = self.data.len().max(1) as f64;
        let mean = sum / n;
        let var = self
            .data
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        (min, max, mean as f32, var.sqrt() as f32)
    }
}

/// The header fields this crate reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct MrcHeader {
    /// Columns, rows, sections.
    pub nx: i32,
    pub ny: i32,
    pub nz: i32,
    pub mode: i32,
    pub nxstart: i32,
    pub nystart: i32,
    pub nzstart: i32,
    /// Sampling along X, Y, Z.
    pub mx: i32,
    pub my: i32,
    pub mz: i32,
    /// Cell edge lengths in Å along X, Y, Z.
    pub cell: [f32; 3],
    pub cell_angles: [f32; 3],
    pub mapc: i32,
    pub mapr: i32,
    pub maps: i32,
    pub dmin: f32,
    pub dmax: f32,
    pub dmean: f32,
    pub ispg: i32,
    pub nsymbt: i32,
    pub origin: [f32; 3],
    pub machst: [u8; 4],
    pub rms: f32,
}

impl MrcHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self, MapError> {
        if bytes.len() < HEADER_SIZE {
            return Err(MapError::TruncatedHeader(bytes.len()));
        }
        let word = |i: usize| -> [u8; 4] {
            let o = (i - 1) * 4;
            [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]
        };
        let machst = word(54);
        // 0x11 in the first stamp byte marks big-endian; fall back to a mode
        // sanity check for files with a blank stamp.
        let mode_le = i32::from_le_bytes(word(4));
        let mode_be = i32::from_be_bytes(word(4));
        if machst[0] == 0x11 || (!(0..=16).contains(&mode_le) && (0..=16).contains(&mode_be)) {
            return Err(MapError::BigEndian);
        }
        let f =|i: usize| f32::from_le_bytes(word(i));
        let i = |w: usize| i32::from_le_bytes(word(w));
        Ok(MrcHeader {
            nx: i(1),
            ny: i(2),
            nz: i(3),
            mode: i(4),
            nxstart: i(5),
            nystart: i(6),
            nzstart: i(7),
            mx: i(8),
            my: i(9),
            mz: i(10),
            cell: [f(11), f(12), f(13)],
            cell_angles: [f(14), f(15), f(16)],
            mapc: i(17),
            mapr: i(18),
            maps: i(19),
            dmin: f(20),
            dmax: f(21),
            dmean: f(22),
            ispg: i(23),
            nsymbt: i(24),
            origin: [f(50), f(51), f(52)],
            machst,
            rms: f(55),
        })
    }

    /// Serializes to exactly 1024 bytes. Fields not modelled here are zero.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_SIZE);
        let ints = [
            self.nx,
            self.ny,
            self.nz,
            self.mode,
            self.nxstart,
            self.nystart,
            self.nzstart,
            self.mx,
            self.my,
            self.mz,
        ];
        for v in ints {
            out.write_i32::<LittleEndian>(v).unwrap();
        }
        for v in self.cell.iter().chain(self.cell_angles.iter()) {
            out.write_f32::<LittleEndian>(*v).unwrap();
        }
        for v in [self.mapc, self.mapr, self.maps] {
            out.write_i32::<LittleEndian>(v).unwrap();
        }
        for v in [self.dmin, self.dmax, self.dmean] {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out.write_i32::<LittleEndian>(self.ispg).unwrap();
        out.write_i32::<LittleEndian>(self.nsymbt).unwrap();
        out.resize(49 * 4, 0);
        for v in self.origin {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out.extend_from_slice(b"MAP ");
        out.extend_from_slice(&self.machst);
        out.write_f32::<LittleEndian>(self.rms).unwrap();
        out.resize(HEADER_SIZE, 0);
        out
    }

    fn axis_codes(&self) -> Result<[usize; 3], MapError> {
        let codes = [self.mapc, self.mapr, self.maps];
        let mut seen = [false; 3];
        for &c in &codes {
            if !(1..=3).contains(&c) || seen[(c - 1) as usize] {
                return Err(MapError::BadAxisOrder(self.mapc, self.mapr, self.maps));
            }
            seen[(c - 1) as usize] = true;
        }
        Ok([
            (codes[0] - 1) as usize,
            (codes[1] - 1) as usize,
            (codes[2] - 1) as usize,
        ])
    }
}

fn bytes_per_voxel(mode: i32) -> Result<usize, MapError> {
    match mode {
        0 => Ok(1),
        1 | 6 => Ok(2),
        2 => Ok(4),
        m => Err(MapError::UnsupportedMode(m)),
    }
}

/// Decodes an MRC file held in memory.
pub fn parse_mrc(bytes: &[u8]) -> Result<DensityMap, MapError> {
    let h = MrcHeader::parse(bytes)?;
    let bpv = bytes_per_voxel(h.mode)?;
    let axes = h.axis_codes()?;
    if h.nx < 1 || h.ny < 1 || h.nz < 1 {
        return Err(MapError::BadDims(h.nx as i64, h.ny as i64, h.nz as i64));
    }
    if h.nsymbt < 0 {
        return Err(MapError::Invalid(format!("negative extended header size {}", h.nsymbt)));
    }
    let file_dims = [h.nx as usize, h.ny as usize, h.nz as usize];
    let n: usize = file_dims.iter().product();
    let data_start = HEADER_SIZE + h.nsymbt as usize;
    let expected = n * bpv;
    let available = bytes.len().saturating_sub(data_start);
    if available < expected {
        return Err(MapError::TruncatedData {
            expected,
            found: available,
        });
    }

    // Logical dims: file axis `f` (columns/rows/sections) holds logical axis axes[f].
    let mut dims = [0usize; 3];
    for f in 0..3 {
        dims[axes[f]] = file_dims[f];
    }
    let mut data = vec![0.0f32; n];
    let raw = &bytes[data_start..data_start + expected];
    let mut r = Cursor::new(raw);
    let mut logical = [0usize; 3];
    for s in 0..file_dims[2] {
        for row in 0..file_dims[1] {
            for col in 0..file_dims[0] {
                let offset = data_start + r.position() as usize;
                let v = match h.mode {
                    0 => r.read_i8().unwrap() as f32,
                    1 => r.read_i16::<LittleEndian>().unwrap() as f32,
                    6 => r.read_u16::<LittleEndian>().unwrap() as f32,
                    _ => r.read_f32::<LittleEndian>().unwrap(),
                };
                if !v.is_finite() {
                    return Err(MapError::NonFinite(offset));
                }
                logical[axes[0]] = col;
                logical[axes[1]] = row;
                logical[axes[2]] = s;
                data[logical[0] + dims[0] * (logical[1] + dims[1] * logical[2])] = v;
            }
        }
    }

    let sampling = [h.mx, h.my, h.mz];
    let mut voxel_size = [1.0f64; 3];
    for a in 0..3 {
        let m = if sampling[a] > 0 { sampling[a] as usize } else { dims[a] };
        let cell = h.cell[a] as f64;
        voxel_size[a] = if cell > 0.0 { cell / m as f64 } else { 1.0 };
    }

    let file_start = [h.nxstart, h.nystart, h.nzstart];
    let mut start = [0i32; 3];
    for f in 0..3 {
        start[axes[f]] = file_start[f];
    }
    let header_origin = [h.origin[0] as f64, h.origin[1] as f64, h.origin[2] as f64];
    let start_origin = [
        start[0] as f64 * voxel_size[0],
        start[1] as f64 * voxel_size[1],
        start[2] as f64 * voxel_size[2],
    ];
    let origin_set = header_origin.iter().any(|&o| o != 0.0);
    let start_set = start.iter().any(|&s| s != 0);
    let origin = if origin_set {
        if start_set
            && (0..3).any(|a| (header_origin[a] - start_origin[a]).abs() > 1e-3)
        {
            log::warn!(
                "MRC header sets both origin {:?} and start indices {:?}; using origin",
                header_origin,
                start
            );
        }
        header_origin
    } else {
        start_origin
    };

    Ok(DensityMap {
        data,
        dims,
        voxel_size,
        origin,
        axis_order: [h.mapc as u8, h.mapr as u8, h.maps as u8],
    })
}

pub fn read_mrc(path: impl AsRef<Path>) -> Result<DensityMap, MapError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| MapError::Io {
            path: path.display().to_string(),
            source,
        })?;
    parse_mrc(&buf)
}

/// Header for writing `map` as a canonical mode-2 file.
pub fn header_for(map: &DensityMap) -> MrcHeader {
    let (dmin, dmax, dmean, rms) = map.stats();
    let d = map.dims;
    MrcHeader {
        nx: d[0] as i32,
        ny: d[1] as i32,
        nz: d[2] as i32,
        mode: 2,
        nxstart: 0,
        nystart: 0,
        nzstart: 0,
        mx: d[0] as i32,
        my: d[1] as i32,
        mz: d[2] as i32,
        cell: [
            (map.voxel_size[0] * d[0] as f64) as f32,
            (map.voxel_size[1] * d[1] as f64) as f32,
            (map.voxel_size[2] * d[2] as f64) as f32,
        ],
        cell_angles: [90.0; 3],
        mapc: 1,
        mapr: 2,
        maps: 3,
        dmin,
        dmax,
        dmean,
        ispg: 1,
        nsymbt: 0,
        origin: [map.origin[0] as f32, map.origin[1] as f32, map.origin[2] as f32],
        machst: [0x44, 0x44, 0x00, 0x00],
        rms,
    }
}

pub fn encode_mrc(map: &DensityMap) -> Result<Vec<u8>, MapError> {
    map.validate()?;
    let mut out = header_for(map).to_bytes();
    out.reserve(map.data.len() * 4);
    for &v in &map.data {
        out.write_f32::<LittleEndian>(v).unwrap();
    }
    Ok(out)
}

pub fn write_mrc(map: &DensityMap, path: impl AsRef<Path>) -> Result<(), MapError> {
    let path = path.as_ref();
    let bytes = encode_mrc(map)?;
    fs::write(path, bytes).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })
}
