//! End-to-end flows built from the individual modules: map enhancement and
//! the synthetic overfit run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map_io::{DensityMap, GridGeometry, MapError};
use crate::map_sim::{self, SimError};
use crate::nn::{self, AdamW, ModelConfig, ModelWeights, NnError, Tensor, TrainBatch, Unet};
use crate::structure_io::{format_atom_record, parse_pdb, PdbError, ProteinStructure};
use crate::volume_prep::{self, AugmentConfig, PrepError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pdb(#[from] PdbError),
}

/// Working voxel size of the network, Å.
pub const WORKING_VOXEL: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct Enhanced {
    /// Network output on the input map's grid.
    pub map: DensityMap,
    /// Percentile scale used for normalization.
    pub scale: f64,
    pub cubes: usize,
}

fn is_working_grid(m: &DensityMap) -> bool {
    m.voxel_size.iter().all(|&v| (v - WORKING_VOXEL).abs() < 1e-9)
}

/// Resample, normalize, tile, run the network in eval mode, stitch, and
/// bring the result back onto the input grid.
pub fn enhance(map: &DensityMap, net: &Unet, weights: &ModelWeights) -> Result<Enhanced, PipelineError> {
    let working = if is_working_grid(map) {
        map.clone()
    } else {
        volume_prep::resample(map, WORKING_VOXEL)?
    };
    let (norm, scale) = volume_prep::normalize(&working)?;
    let plan = volume_prep::make_plan(norm.dims);
    let mut batch = volume_prep::partition(&norm, &plan)?;
    let s = batch.cube_size;
    for (n, cube) in batch.cubes.iter_mut().enumerate() {
        log::debug!("enhancing cube {}/{}", n + 1, plan.len());
        let x = Tensor::new(vec![1, 1, s, s, s], std::mem::take(cube));
        *cube = net.predict(weights, &x)?.data;
    }
    let stitched = volume_prep::stitch(&batch, &plan, &norm.geometry())?;
    let out = if is_working_grid(map) {
        stitched
    } else {
        volume_prep::resample_onto(&stitched, &map.geometry())
    };
    Ok(Enhanced { map: out, scale, cubes: plan.len() })
}

/// A short extended ALA-GLY-SER peptide that fits a 16 Å box.
pub fn toy_structure() -> ProteinStructure {
    let residues: [(&str, &[(&str, [f64; 3])]); 3] = [
        ("ALA", &[("N", [0.0, 0.0, 0.0]), ("CA", [1.46, 0.0, 0.0]), ("C", [2.0, 1.42, 0.0]), ("O", [1.25, 2.39, 0.0]), ("CB", [1.95, -0.77, 1.2])]),
        ("GLY", &[("N", [0.0, 0.0, 0.0]), ("CA", [1.46, 0.0, 0.0]), ("C", [2.0, 1.42, 0.0]), ("O", [1.25, 2.39, 0.0])]),
        ("SER", &[("N", [0.0, 0.0, 0.0]), ("CA", [1.46, 0.0, 0.0]), ("C", [2.0, 1.42, 0.0]), ("O", [1.25, 2.39, 0.0]), ("CB", [1.95, -0.77, 1.2]), ("OG", [3.3, -0.6, 1.5])]),
    ];
    let mut text = String::new();
    let mut serial = 1;
    for (i, (name, atoms)) in residues.iter().enumerate() {
        let base = [3.0 + 3.3 * i as f64, 6.0 - 0.8 * i as f64, 7.0];
        for (atom, off) in atoms.iter() {
            let pos = [base[0] + off[0], base[1] + off[1], base[2] + off[2]];
            text.push_str(&format_atom_record(serial, atom, name, 'A', i as i32 + 1, pos, &atom[..1]));
            text.push('\n');
            serial += 1;
        }
    }
    parse_pdb(&text, "toy").expect("toy peptide parses")
}

/// One synthetic training pair with a fixed random embedding.
pub struct ToyPair {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub emb: Tensor,
}

/// Target: normalized simulation of the toy peptide on an `S³` grid.
/// Input: the target blurred and noised. Embedding: seeded uniform noise.
pub fn toy_pair(cfg: &ModelConfig, seed: u64) -> Result<ToyPair, PipelineError> {
    let s = cfg.cube_size;
    let structure = toy_structure();
    let params = map_sim::derive_params(2.0)?;
    let grid = GridGeometry { dims: [s; 3], voxel_size: [1.0; 3], origin: [0.0; 3] };
    let sim = map_sim::simulate_map(&structure, &params, Some(&grid))?.map;
    let (target, _) = volume_prep::normalize(&sim)?;
    let aug = AugmentConfig { noise_std: (0.05, 0.05), blur_sigma: (1.5, 1.5), anisotropy: (1.0, 1.0) };
    let input = volume_prep::augment(&target.data, s, seed, &aug)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let emb = (0..cfg.embed_len * cfg.embed_dim).map(|_| rng.random::<f32>()).collect();
    Ok(ToyPair {
        inputs: Tensor::new(vec![1, 1, s, s, s], input),
        targets: Tensor::new(vec![1, 1, s, s, s], target.data),
        emb: Tensor::new(vec![1, cfg.embed_len, cfg.embed_dim], emb),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub steps: u64,
    pub base_lr: f32,
    pub min_lr: f32,
    pub clip: f64,
    pub weight_decay: f32,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig { steps: 200, base_lr: 2e-3, min_lr: 1e-5, clip: 0.5, weight_decay: 0.01 }
    }
}

pub struct ToyRun {
    pub losses: Vec<f32>,
    pub weights: ModelWeights,
}

/// Overfits the toy U-Net to a single synthetic pair.
pub fn train_toy(cfg: &ModelConfig, tc: &ToyTrainConfig, seed: u64) -> Result<ToyRun, PipelineError> {
    let net = Unet::new(cfg.clone())?;
    let mut weights = net.init_weights(seed);
    let pair = toy_pair(cfg, seed)?;
    let mut opt = AdamW::new(tc.weight_decay);
    let batch = TrainBatch { inputs: &pair.inputs, targets: &pair.targets, emb: Some(&pair.emb) };
    let mut losses = Vec::with_capacity(tc.steps as usize);
    for step in 0..tc.steps {
        let lr = nn::cosine_lr(tc.base_lr, tc.min_lr, step, tc.steps);
        let r = nn::train_step(&net, &mut weights, &mut opt, &batch, lr, tc.clip, seed.wrapping_add(step))?;
        log::debug!("step {step} loss {:.6} grad_norm {:.4} lr {lr:.2e}", r.loss, r.grad_norm);
        losses.push(r.loss);
    }
    Ok(ToyRun { losses, weights })
}

/// Loss of `weights` on the training pair with dropout off.
pub fn toy_eval_loss(cfg: &ModelConfig, weights: &ModelWeights, seed: u64) -> Result<f64, PipelineError> {
    let net = Unet::new(cfg.clone())?;
    let pair = toy_pair(cfg, seed)?;
    let out = net.predict(weights, &pair.inputs)?;
    Ok(nn::smooth_l1(&out.data, &pair.targets.data))
}
