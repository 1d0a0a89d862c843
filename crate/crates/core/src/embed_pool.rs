//! Attention-weighted pooling of per-chain residue embeddings into a fixed
//! `L × d` representation.
//!
//! Pipeline: chain means → chain similarity softmax → chain weights →
//! weighted sum over chains → residue similarity softmax → residue weights →
//! min-max normalization → top-L selection or weight-ordered tiling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_EMBED_LEN: usize = 800;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite embedding value at flat index {0}")]
    NonFinite(usize),
    #[error("bad embedding file: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `C × R × d` embeddings, zero-padded along R.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub data: Vec<f64>,
    pub chains: usize,
    pub residues: usize,
    pub d: usize,
    /// True (unpadded) residue count per chain.
    pub chain_lengths: Vec<usize>,
    pub chain_ids: Vec<String>,
}

impl EmbeddingSet {
    /// Builds a padded set from per-chain `len × d` matrices.
    pub fn from_chains(chains: Vec<(String, Matrix)>) -> Result<Self, PoolError> {
        if chains.is_empty() {
            return Err(PoolError::Dimension("at least one chain required".into()));
        }
        let d = chains[0].1.cols;
        if d == 0 {
            return Err(PoolError::Dimension("embedding dimension must be ≥ 1".into()));
        }
        if let Some((id, m)) = chains.iter().find(|(_, m)| m.cols != d) {
            return Err(PoolError::Dimension(format!(
                "chain {id} has dimension {} but expected {d}",
                m.cols
            )));
        }
        let r = chains.iter().map(|(_, m)| m.rows).max().unwrap_or(0).max(1);
        let mut data = vec![0.0; chains.len() * r * d];
        for (ci, (_, m)) in chains.iter().enumerate() {
            data[ci * r * d..ci * r * d + m.rows * d].copy_from_slice(&m.data);
        }
        let set = EmbeddingSet {
            data,
            chains: chains.len(),
            residues: r,
            d,
            chain_lengths: chains.iter().map(|(_, m)| m.rows).collect(),
            chain_ids: chains.into_iter().map(|(id, _)| id).collect(),
        };
        set.check_finite()?;
        Ok(set)
    }

    /// Interprets a dense `C × R × d` tensor; every row counts as a residue.
    pub fn from_dense(data: Vec<f64>, chains: usize, residues: usize, d: usize) -> Result<Self, PoolError> {
        if chains == 0 || residues == 0 || d == 0 {
            return Err(PoolError::Dimension(format!(
                "shape ({chains}, {residues}, {d}) has an empty axis"
            )));
        }
        if data.len() != chains * residues * d {
            return Err(PoolError::Dimension(format!(
                "{} values for shape ({chains}, {residues}, {d})",
                data.len()
            )));
        }
        let set = EmbeddingSet {
            data,
            chains,
            residues,
            d,
            chain_lengths: vec![residues; chains],
            chain_ids: (0..chains).map(|i| i.to_string()).collect(),
        };
        set.check_finite()?;
        Ok(set)
    }

    fn check_finite(&self) -> Result<(), PoolError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(PoolError::NonFinite(i)),
            None => Ok(()),
        }
    }

    #[inline]
    pub fn at(&self, c: usize, r: usize, k: usize) -> f64 {
        self.data[(c * self.residues + r) * self.d + k]
    }

    pub fn chain_slice(&self, c: usize) -> &[f64] {
        let n = self.residues * self.d;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Divisor used when averaging residues into chain vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMeanMode {
    /// Divide by the padded residue count R.
    #[default]
    Padded,
    /// Divide by each chain's true length.
    TrueLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinMaxMode {
    /// One min and max over the whole matrix.
    #[default]
    Global,
    /// Separate min and max per embedding dimension.
    PerFeature,
}

/// Which index the similarity softmax normalizes over.
///
/// With `Row`, every row of the attention matrix sums to one, so the row-mean
/// weights are exactly uniform. `Column` normalizes over the first index; the
/// row means then measure how much attention each unit receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    #[default]
    Row,
    Column,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolOptions {
    pub target_len: usize,
    pub chain_mean: ChainMeanMode,
    pub min_max: MinMaxMode,
    pub softmax_axis: SoftmaxAxis,
}

impl Default for PoolOptions {
    fn default() -> Self {
        PoolOptions {
            target_len: DEFAULT_EMBED_LEN,
            chain_mean: ChainMeanMode::Padded,
            min_max: MinMaxMode::Global,
            softmax_axis: SoftmaxAxis::Row,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainWeights {
    pub similarity: Matrix,
    pub attention: Matrix,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    /// `R × d`, before normalization.
    pub pooled: Matrix,
    pub residue_weights: Vec<f64>,
    /// `L × d`, values in [0, 1].
    pub final_embedding: Matrix,
    /// Row of `pooled` that each row of `final_embedding` came from.
    pub selection_map: Vec<usize>,
}

pub fn chain_mean(e: &EmbeddingSet) -> Matrix {
    chain_mean_with(e, ChainMeanMode::Padded)
}

pub fn chain_mean_with(e: &EmbeddingSet, mode: ChainMeanMode) -> Matrix {
    let mut out = Matrix::zeros(e.chains, e.d);
    for c in 0..e.chains {
        let denom = match mode {
            ChainMeanMode::Padded => e.residues,
            ChainMeanMode::TrueLength => e.chain_lengths[c].max(1),
        } as f64;
        let row = &mut out.data[c * e.d..(c + 1) * e.d];
        for r in 0..e.residues {
            for (k, v) in row.iter_mut().enumerate() {
                *v += e.at(c, r, k);
            }
        }
        row.iter_mut().for_each(|v| *v /= denom);
    }
    out
}

/// Gram matrix, softmax, then row means of the softmax matrix.
fn similarity_weights(m: &Matrix, axis: SoftmaxAxis) -> ChainWeights {
    let n = m.rows;
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            s.data[i * n + j] = dot;
            s.data[j * n + i] = dot;
        }
    }
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        let row = s.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..n {
            w.data[i * n + j] = exps[j] / z;
        }
    }
    if axis == SoftmaxAxis::Column {
        // S is symmetric, so the column softmax is the transposed row softmax.
        let t = w.clone();
        for i in 0..n {
            for j in 0..n {
                w.data[i * n + j] = t.data[j * n + i];
            }
        }
    }
    let weights = (0..n)
        .map(|i| w.row(i).iter().sum::<f64>() / n as f64)
        .collect();
    ChainWeights {
        similarity: s,
        attention: w,
        weights,
    }
}

pub fn chain_weights(chain_emb: &Matrix) -> Result<ChainWeights, PoolError> {
    chain_weights_with(chain_emb, SoftmaxAxis::Row)
}

pub fn chain_weights_with(chain_emb: &Matrix, axis: SoftmaxAxis) -> Result<ChainWeights, PoolError> {
    if chain_emb.rows == 0 {
        return Err(PoolError::Dimension("no chains".into()));
    }
    if let Some(i) = chain_emb.data.iter().position(|v| !v.is_finite()) {
        return Err(PoolError::NonFinite(i));
    }
    Ok(similarity_weights(chain_emb, axis))
}

pub fn pool_chains(e: &EmbeddingSet, w: &[f64]) -> Result<Matrix, PoolError> {
    if w.len() != e.chains {
        return Err(PoolError::Dimension(format!(
            "{} weights for {} chains",
            w.len(),
            e.chains
        )));
    }
    let mut out = Matrix::zeros(e.residues, e.d);
    for (c, &wc) in w.iter().enumerate() {
        for (o, v) in out.data.iter_mut().zip(e.chain_slice(c)) {
            *o += wc * v;
        }
    }
    Ok(out)
}

/// Per-residue weights, computed the same way as chain weights with
/// residues as the units.
pub fn residue_weights(pooled: &Matrix) -> Vec<f64> {
    residue_weights_with(pooled, SoftmaxAxis::Row)
}

pub fn residue_weights_with(pooled: &Matrix, axis: SoftmaxAxis) -> Vec<f64> {
    if pooled.rows == 0 {
        return Vec::new();
    }
    similarity_weights(pooled, axis).weights
}

fn min_max(m: &Matrix, mode: MinMaxMode) -> Matrix {
    let mut out = m.clone();
    let scale = |vals: &mut dyn Iterator<Item = &mut f64>, lo: f64, hi: f64| {
        let span = hi - lo;
        for v in vals {
            *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        }
    };
    match mode {
        MinMaxMode::Global => {
            let lo = m.data.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = m.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            scale(&mut out.data.iter_mut(), lo, hi);
        }
        MinMaxMode::PerFeature => {
            for k in 0..m.cols {
                let col = (0..m.rows).map(|r| m.at(r, k));
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                scale(&mut out.data.iter_mut().skip(k).step_by(m.cols), lo, hi);
            }
        }
    }
    out
}

/// Indices sorted by descending weight, ties broken by lower index.
///
/// Weights are compared after rounding to 12 decimal places, so values that
/// differ only by summation rounding count as ties.
fn rank_desc(alpha: &[f64]) -> Vec<usize> {
    let key: Vec<i64> = alpha.iter().map(|a| (a * 1e12).round() as i64).collect();
    let mut idx: Vec<usize> = (0..alpha.len()).collect();
    idx.sort_by(|&a, &b| key[b].cmp(&key[a]).then(a.cmp(&b)));
    idx
}

/// Source rows for each of the `target_len` output rows.
pub fn selection_indices(alpha: &[f64], target_len: usize) -> Vec<usize> {
    let r = alpha.len();
    if r == target_len {
        return (0..r).collect();
    }
    let ranked = rank_desc(alpha);
    if r > target_len {
        let mut kept = ranked[..target_len].to_vec();
        kept.sort_unstable();
        kept
    } else {
        let reps = target_len.div_ceil(r);
        let mut out: Vec<usize> = ranked.iter().copied().cycle().take(r * reps).collect();
        out.truncate(target_len);
        out
    }
}

pub fn finalize(pooled: &Matrix, alpha: &[f64], target_len: usize) -> Result<PooledEmbedding, PoolError> {
    finalize_with(pooled, alpha, target_len, MinMaxMode::Global)
}

pub fn finalize_with(
    pooled: &Matrix,
    alpha: &[f64],
    target_len: usize,
    mode: MinMaxMode,
) -> Result<PooledEmbedding, PoolError> {
    if pooled.rows == 0 || target_len == 0 {
        return Err(PoolError::Dimension("R and L must be ≥ 1".into()));
    }
    if alpha.len() != pooled.rows {
        return Err(PoolError::Dimension(format!(
            "{} residue weights for {} residues",
            alpha.len(),
            pooled.rows
        )));
    }
    let norm = min_max(pooled, mode);
    let selection = selection_indices(alpha, target_len);
    let d = pooled.cols;
    let mut fin = Matrix::zeros(target_len, d);
    for (row, &src) in selection.iter().enumerate() {
        fin.data[row * d..(row + 1) * d].copy_from_slice(norm.row(src));
    }
    Ok(PooledEmbedding {
        pooled: pooled.clone(),
        residue_weights: alpha.to_vec(),
        final_embedding: fin,
        selection_map: selection,
    })
}

/// Runs the whole pooling pipeline.
pub fn pool(e: &EmbeddingSet, opts: &PoolOptions) -> Result<(ChainWeights, PooledEmbedding), PoolError> {
    let means = chain_mean_with(e, opts.chain_mean);
    let cw = chain_weights_with(&means, opts.softmax_axis)?;
    let pooled = pool_chains(e, &cw.weights)?;
    let alpha = residue_weights_with(&pooled, opts.softmax_axis);
    let fin = finalize_with(&pooled, &alpha, opts.target_len, opts.min_max)?;
    Ok((cw, fin))
}

/// Sidecar description of a raw float32 embedding blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub d: usize,
    pub chains: Vec<ChainEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainEntry {
    pub id: String,
    /// Residue rows in this chain.
    pub length: usize,
    /// Start of this chain in the blob, counted in float32 elements.
    pub offset: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PoolError + '_ {
    move |source| PoolError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn decode_f32_le(bytes: &[u8]) -> Result<Vec<f32>, PoolError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(PoolError::Format(format!(
            "blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn encode_f32_le(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn embeddings_from_blob(blob: &[f32], manifest: &EmbeddingManifest) -> Result<EmbeddingSet, PoolError> {
    let d = manifest.d;
    let mut chains = Vec::with_capacity(manifest.chains.len());
    for c in &manifest.chains {
        let end = c.offset + c.length * d;
        if end > blob.len() {
            return Err(PoolError::Format(format!(
                "chain {} spans elements {}..{} but blob has {}",
                c.id,
                c.offset,
                end,
                blob.len()
            )));
        }
        let rows = blob[c.offset..end].iter().map(|&v| v as f64).collect();
        chains.push((
            c.id.clone(),
            Matrix {
                rows: c.length,
                cols: d,
                data: rows,
            },
        ));
    }
    EmbeddingSet::from_chains(chains)
}

pub fn read_embedding_blob(blob: &Path, manifest: &Path) -> Result<EmbeddingSet, PoolError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let m: EmbeddingManifest =
        serde_json::from_str(&text).map_err(|e| PoolError::Format(format!("manifest: {e}")))?;
    let bytes = fs::read(blob).map_err(io_err(blob))?;
    embeddings_from_blob(&decode_f32_le(&bytes)?, &m)
}

/// Reads a `C × R × d` float32 or float64 NPY array.
pub fn read_embedding_npy(path: &Path) -> Result<EmbeddingSet, PoolError> {
    use ndarray::ArrayD;
    use ndarray_npy::ReadNpyExt;

    let bytes = fs::read(path).map_err(io_err(path))?;
    let arr: ArrayD<f64> = match ArrayD::<f32>::read_npy(&bytes[..]) {
        Ok(a) => a.mapv(|v| v as f64),
        Err(_) => ArrayD::<f64>::read_npy(&bytes[..])
            .map_err(|e| PoolError::Format(format!("npy: {e}")))?,
    };
    let shape = arr.shape().to_vec();
    let (c, r, d) = match shape.as_slice() {
        [c, r, d] => (*c, *r, *d),
        [r, d] => (1, *r, *d),
        _ => {
            return Err(PoolError::Format(format!(
                "expected a C×R×d array, got shape {shape:?}"
            )))
        }
    };
    let data: Vec<f64> = arr.as_standard_layout().iter().copied().collect();
    EmbeddingSet::from_dense(data, c, r, d)
}
