//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cryomap::embed_pool::{self, EmbeddingSet, PoolOptions};
use cryomap::map_io::{self, DensityMap, GridGeometry};
use cryomap::map_sim;
use cryomap::metrics;
use cryomap::nn::{self, ForwardMode, Graph, ModelConfig, Tensor, Unet};
use cryomap::pipeline;
use cryomap::structure_io::{format_atom_record, parse_pdb, ProteinStructure};
use cryomap::volume_prep;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_map(rng: &mut ChaCha8Rng, dims: [usize; 3], vs: [f64; 3]) -> DensityMap {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-5.0f32..5.0)).collect();
    DensityMap::new(data, dims, vs, [rng.random_range(-20.0..20.0), 0.5, -3.0]).unwrap()
}

fn single_atom(element: &str, pos: [f64; 3]) -> ProteinStructure {
    parse_pdb(&format_atom_record(1, "CA", "GLY", 'A', 1, pos, element), "one").unwrap()
}

/// Two chains of poly-alanine-like residues laid along a helix-ish path.
fn peptide(n_res: usize) -> ProteinStructure {
    let names = ["ALA", "SER", "GLY", "LEU", "VAL", "THR"];
    let mut text = String::new();
    let mut serial = 1;
    for (c, chain) in ['A', 'B'].iter().enumerate() {
        for i in 0..n_res {
            let t = i as f64 * 1.7;
            let base = [8.0 * t.cos() + 14.0 * c as f64, 8.0 * t.sin(), 1.5 * i as f64];
            let atoms: &[(&str, [f64; 3], &str)] = &[
                ("N", [0.0, 0.0, 0.0], "N"),
                ("CA", [1.46, 0.0, 0.0], "C"),
                ("C", [2.0, 1.42, 0.0], "C"),
                ("O", [1.25, 2.39, 0.0], "O"),
                ("CB", [1.95, -0.77, 1.2], "C"),
            ];
            for (name, off, el) in atoms {
                let p = [base[0] + off[0], base[1] + off[1], base[2] + off[2]];
                text.push_str(&format_atom_record(serial, name, names[i % names.len()], *chain, i as i32 + 1, p, el));
                text.push('\n');
                serial += 1;
            }
        }
    }
    parse_pdb(&text, "peptide").unwrap()
}

fn eq1_oracle() -> Outcome {
    let t0 = Instant::now();
    let p = map_sim::derive_params(2.0).map_err(|e| e.to_string())?;
    let k = 4.0 * std::f64::consts::LN_2 / 4.0;
    let theta = (k / std::f64::consts::PI).powf(1.5);
    ensure!((p.k - k).abs() < 1e-12 && (p.theta - theta).abs() < 1e-12, "params {p:?}");
    let s = single_atom("C", [12.0, 12.0, 12.0]);
    let g = GridGeometry { dims: [25; 3], voxel_size: [1.0; 3], origin: [0.0; 3] };
    let m = map_sim::simulate_map(&s, &p, Some(&g)).map_err(|e| e.to_string())?.map;
    let centre = m.get(12, 12, 12) as f64;
    let expect = theta * 6.0;
    ensure!((centre - expect).abs() < 1e-6, "centre {centre} vs {expect}");
    // Radial decay at r = 1 and r = √3.
    let r1 = m.get(13, 12, 12) as f64;
    let r3 = m.get(13, 13, 13) as f64;
    ensure!((r1 - expect * (-k).exp()).abs() < 1e-6, "r=1 {r1}");
    ensure!((r3 - expect * (-3.0 * k).exp()).abs() < 1e-6, "r=√3 {r3}");
    let integral: f64 = m.data.iter().map(|&v| v as f64).sum::<f64>() * g.voxel_volume();
    ensure!((integral - 6.0).abs() / 6.0 < 0.02, "integral {integral}");
    let el = t0.elapsed().as_secs_f64();
    ensure!(el < 1.0, "runtime {el:.3}s");
    Ok(format!("centre {centre:.8} (θ·6 {expect:.8}), integral {integral:.5}, {:.1} ms", el * 1e3))
}

fn pooling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_row = 0.0f64;
    let mut worst_uniform = 0.0f64;
    for case in 0..1000 {
        let chains = rng.random_range(1..5usize);
        let residues = rng.random_range(1..40usize);
        let d = rng.random_range(1..9usize);
        let scale = [0.1, 1.0, 30.0][case % 3];
        let data: Vec<f64> = (0..chains * residues * d).map(|_| rng.random_range(-scale..scale)).collect();
        let set = EmbeddingSet::from_dense(data, chains, residues, d).map_err(|e| e.to_string())?;
        let cm = embed_pool::chain_mean(&set);
        let cw = embed_pool::chain_weights(&cm).map_err(|e| e.to_string())?;
        for r in 0..cw.attention.rows {
            let s: f64 = cw.attention.row(r).iter().sum();
            worst_row = worst_row.max((s - 1.0).abs());
        }
        let (_, pooled) = embed_pool::pool(&set, &PoolOptions::default()).map_err(|e| e.to_string())?;
        let f = &pooled.final_embedding;
        ensure!(f.rows == 800 && f.cols == d, "case {case}: {}×{}", f.rows, f.cols);
        ensure!(f.data.iter().all(|v| (0.0..=1.0).contains(v)), "case {case}: value outside [0,1]");

        // Identical chains.
        let one: Vec<f64> = (0..residues * d).map(|_| rng.random_range(-scale..scale)).collect();
        let same: Vec<f64> = (0..chains).flat_map(|_| one.iter().copied()).collect();
        let set = EmbeddingSet::from_dense(same, chains, residues, d).map_err(|e| e.to_string())?;
        let w = embed_pool::chain_weights(&embed_pool::chain_mean(&set)).map_err(|e| e.to_string())?.weights;
        for x in &w {
            worst_uniform = worst_uniform.max((x - 1.0 / chains as f64).abs());
        }
    }
    ensure!(worst_row < 1e-9, "softmax row sum error {worst_row:e}");
    ensure!(worst_uniform < 1e-9, "identical-chain weight error {worst_uniform:e}");
    let t6 = embed_pool::selection_indices(&[0.5, 0.3, 0.2], 6);
    ensure!(t6 == vec![0, 1, 2, 0, 1, 2], "R=3→L=6 gave {t6:?}");
    // Residues 4, 1, 3 carry the largest weights.
    let t3 = embed_pool::selection_indices(&[0.05, 0.3, 0.1, 0.2, 0.35], 3);
    ensure!(t3 == vec![1, 3, 4], "R=5→L=3 gave {t3:?}");
    Ok(format!("1000 cases, row-sum err {worst_row:.1e}, uniform err {worst_uniform:.1e}, traces ok"))
}

fn tiling() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut cubes = 0;
    for i in 0..200 {
        // A few volumes pinned to the extremes of the range.
        let dims: [usize; 3] = match i {
            0 => [1, 1, 1],
            1 => [160, 160, 160],
            2 => [1, 160, 51],
            _ => std::array::from_fn(|_| rng.random_range(1..=160)),
        };
        let m = random_map(&mut rng, dims, [1.0; 3]);
        let plan = volume_prep::make_plan(m.dims);
        let batch = volume_prep::partition(&m, &plan).map_err(|e| e.to_string())?;
        cubes += batch.cubes.len();
        let back = volume_prep::stitch(&batch, &plan, &m.geometry()).map_err(|e| e.to_string())?;
        ensure!(back.dims == m.dims, "dims {:?}", dims);
        ensure!(
            back.data.iter().zip(&m.data).all(|(a, b)| a.to_bits() == b.to_bits()),
            "volume {i} {dims:?} differs"
        );
    }
    let el = t0.elapsed().as_secs_f64();
    ensure!(el < 30.0, "runtime {el:.1}s");
    Ok(format!("200 volumes, {cubes} cubes, {el:.1} s"))
}

fn toy_input(cfg: &ModelConfig, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.cube_size;
    let x = Tensor::new(vec![1, 1, s, s, s], (0..s * s * s).map(|_| rng.random::<f32>()).collect());
    let e = Tensor::new(
        vec![1, cfg.embed_len, cfg.embed_dim],
        (0..cfg.embed_len * cfg.embed_dim).map(|_| rng.random::<f32>()).collect(),
    );
    (x, e)
}

fn forward_values(net: &Unet, w: &nn::ModelWeights, x: &Tensor, e: &Tensor, mode: ForwardMode) -> Result<Vec<f32>, String> {
    let mut g = Graph::new();
    let p = net.bind(&mut g, w, false).map_err(|e| e.to_string())?;
    let xv = g.input(x);
    let ev = g.input(e);
    let out = net.forward(&mut g, &p, xv, Some(ev), mode).map_err(|e| e.to_string())?;
    Ok(g.value(out).to_vec())
}

fn network_contracts() -> Outcome {
    let cfg = ModelConfig::toy();
    ensure!(cfg.base_channels == 8 && cfg.cube_size == 16, "toy config {cfg:?}");
    let net = Unet::new(cfg.clone()).map_err(|e| e.to_string())?;
    let w = net.init_weights(5);
    let (x, e) = toy_input(&cfg, 6);

    let y = net.predict(&w, &x).map_err(|e| e.to_string())?;
    ensure!(y.shape == x.shape, "shape {:?}", y.shape);
    let y2 = net.predict(&w, &x).map_err(|e| e.to_string())?;
    ensure!(y.data.iter().zip(&y2.data).all(|(a, b)| a.to_bits() == b.to_bits()), "eval not deterministic");

    let with_cross = forward_values(&net, &w, &x, &e, ForwardMode::eval().with_bypass(false))?;
    let bypass = forward_values(&net, &w, &x, &e, ForwardMode::eval())?;
    ensure!(
        with_cross.iter().zip(&bypass).all(|(a, b)| a.to_bits() == b.to_bits()),
        "bypass differs at zero-initialized output projection"
    );

    let (checked, worst) = fd_check(&cfg)?;
    Ok(format!("shape {:?}, deterministic, bypass bit-exact, FD {checked} params max rel err {worst:.2e}", y.shape))
}

/// Composed gradient check through the whole network against central
/// differences of an f64 objective.
fn fd_check(base: &ModelConfig) -> Result<(usize, f64), String> {
    let cfg = ModelConfig { dropout_p: 0.0, ..base.clone() };
    let net = Unet::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut w = net.init_weights(21);
    // Give the zero-initialized cross-attention projection some weight so
    // its inputs receive gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for name in ["mid.cross.to_out.weight", "mid.cross.to_out.bias"] {
        let t = w.get_mut(name).ok_or(format!("no {name}"))?;
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
    }
    let (x, e) = toy_input(&cfg, 23);
    let mode = ForwardMode::train(0);
    let base_out = forward_values(&net, &w, &x, &e, mode)?;
    // Targets 3 away from the output keep every residual on the linear
    // branch, so the objective is smooth in a neighbourhood.
    let target: Vec<f32> = base_out.iter().map(|&o| o + if rng.random::<bool>() { 3.0 } else { -3.0 }).collect();
    let tt = Tensor::new(x.shape.clone(), target.clone());

    let mut g = Graph::new();
    let p = net.bind(&mut g, &w, true).map_err(|e| e.to_string())?;
    let xv = g.input(&x);
    let ev = g.input(&e);
    let yv = g.input(&tt);
    let out = net.forward(&mut g, &p, xv, Some(ev), mode).map_err(|e| e.to_string())?;
    let loss = g.smooth_l1(out, yv).map_err(|e| e.to_string())?;
    let grads = g.backward(loss).map_err(|e| e.to_string())?;
    let analytic: BTreeMap<String, Vec<f32>> = p
        .iter()
        .map(|(n, v)| (n.to_string(), grads.get(v).map(|s| s.to_vec()).unwrap_or_default()))
        .collect();

    let gmax = analytic.values().flatten().fold(0.0f32, |m, v| m.max(v.abs()));
    let mut picks: Vec<(String, usize, f32)> = analytic
        .iter()
        .filter_map(|(n, gv)| {
            let (i, v) = gv.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))?;
            (v.abs() > 1e-2 * gmax).then(|| (n.clone(), i, *v))
        })
        .collect();
    // Spread the sample over the network.
    let stride = (picks.len() / 32).max(1);
    picks = picks.into_iter().step_by(stride).collect();
    if picks.len() < 20 {
        return Err(format!("only {} parameters with usable gradient", picks.len()));
    }

    let objective = |w: &nn::ModelWeights| -> Result<f64, String> {
        let o = forward_values(&net, w, &x, &e, mode)?;
        Ok(nn::smooth_l1(&o, &target))
    };
    // The forward pass runs in f32; smaller steps drown in rounding.
    let h = 1e-2f32;
    let mut worst = 0.0f64;
    for (name, i, ga) in &picks {
        let orig = w.get(name).unwrap().data[*i];
        w.get_mut(name).unwrap().data[*i] = orig + h;
        let lp = objective(&w)?;
        w.get_mut(name).unwrap().data[*i] = orig - h;
        let lm = objective(&w)?;
        w.get_mut(name).unwrap().data[*i] = orig;
        let step = ((orig + h) as f64) - ((orig - h) as f64);
        let fd = (lp - lm) / step;
        let rel = (fd - *ga as f64).abs() / fd.abs().max(ga.abs() as f64);
        if rel >= 1e-2 {
            return Err(format!("{name}[{i}]: analytic {ga:e} fd {fd:e} rel {rel:.2e}"));
        }
        worst = worst.max(rel);
    }
    Ok((picks.len(), worst))
}

fn smooth_l1() -> Outcome {
    ensure!(nn::smooth_l1(&[1.5, -2.0], &[1.5, -2.0]) == 0.0, "zero at X=Y");
    // |d| = 1 approached from the quadratic and the linear side.
    let inner = nn::smooth_l1(&[1.0 - 1e-7], &[0.0]);
    let outer = nn::smooth_l1(&[1.0 + 1e-7], &[0.0]);
    let at = nn::smooth_l1(&[1.0], &[0.0]);
    ensure!((at - 0.5).abs() < 1e-12 && (inner - 0.5).abs() < 1e-6 && (outer - 0.5).abs() < 1e-6, "knee {inner} {at} {outer}");
    ensure!((nn::smooth_l1(&[-2.0], &[0.0]) - 1.5).abs() < 1e-12, "|d|=2");
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // Exactly representable values and step so both branches difference exactly.
    let h = 1.0f32 / 1024.0;
    let n = 64;
    let mut pred: Vec<f32> = Vec::new();
    while pred.len() < n {
        let v = (rng.random_range(-3000i32..3000) as f32) / 1024.0;
        if (v.abs() - 1.0).abs() > 0.05 {
            pred.push(v);
        }
    }
    let target = vec![0.0f32; n];
    let g = nn::smooth_l1_grad(&pred, &target, 1.0);
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut p = pred.clone();
        p[i] += h;
        let lp = nn::smooth_l1(&p, &target);
        p[i] -= 2.0 * h;
        let lm = nn::smooth_l1(&p, &target);
        let fd = (lp - lm) / (2.0 * h as f64);
        let rel = (fd - g[i] as f64).abs() / fd.abs().max(1e-30);
        worst = worst.max(rel);
    }
    ensure!(worst < 1e-4, "gradient rel err {worst:e}");
    Ok(format!("0 / 0.5 / 1.5 exact, gradient rel err {worst:.1e} over {n} points"))
}

fn toy_overfit() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig::toy();
    let tc = pipeline::ToyTrainConfig::default();
    ensure!(tc.steps == 200, "steps {}", tc.steps);
    let run = pipeline::train_toy(&cfg, &tc, 0).map_err(|e| e.to_string())?;
    let first = run.losses[0] as f64;
    let last = *run.losses.last().unwrap() as f64;
    let ratio = last / first;
    let el = t0.elapsed().as_secs_f64();
    ensure!(ratio <= 0.10, "loss {first:.5} → {last:.5} ({:.1}%)", ratio * 100.0);
    ensure!(el < 600.0, "runtime {el:.0}s");
    Ok(format!("loss {first:.5} → {last:.6} ({:.2}% of initial), {el:.0} s", ratio * 100.0))
}

/// A pair sharing Fourier content up to shell `k` and sharing none above it.
fn band_limited_pair(n: usize, k: usize, rng: &mut ChaCha8Rng) -> (DensityMap, DensityMap) {
    let half = n as i32 / 2;
    let mut by_shell: Vec<Vec<[i32; 3]>> = vec![Vec::new(); half as usize + 1];
    for a in 0..=half {
        for b in -half + 1..=half {
            for c in -half + 1..=half {
                let r = ((a * a + b * b + c * c) as f64).sqrt().round() as usize;
                if r >= 1 && r <= half as usize && (a > 0 || b > 0 || (b == 0 && c > 0)) {
                    by_shell[r].push([a, b, c]);
                }
            }
        }
    }
    let mut wa = Vec::new();
    let mut wb = Vec::new();
    for (s, vs) in by_shell.iter().enumerate().skip(1) {
        let pick = |rng: &mut ChaCha8Rng| vs[rng.random_range(0..vs.len())];
        if s <= k {
            for _ in 0..3 {
                let w = (pick(rng), rng.random_range(0.5..1.5), rng.random_range(0.0..std::f64::consts::TAU));
                wa.push(w);
                wb.push(w);
            }
        } else {
            for _ in 0..3 {
                let ka = pick(rng);
                let mut kb = pick(rng);
                while kb == ka || wa.iter().any(|w: &([i32; 3], f64, f64)| w.0 == kb) {
                    kb = pick(rng);
                }
                wa.push((ka, rng.random_range(0.5..1.5), rng.random_range(0.0..std::f64::consts::TAU)));
                wb.push((kb, rng.random_range(0.5..1.5), rng.random_range(0.0..std::f64::consts::TAU)));
            }
        }
    }
    let render = |waves: &[([i32; 3], f64, f64)]| {
        let mut data = vec![0.0f32; n * n * n];
        let tau = 2.0 * std::f64::consts::PI / n as f64;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let v: f64 = waves
                        .iter()
                        .map(|(kv, amp, ph)| amp * (tau * (kv[0] * x as i32 + kv[1] * y as i32 + kv[2] * z as i32) as f64 + ph).cos())
                        .sum();
                    data[x + n * (y + n * z)] = v as f32;
                }
            }
        }
        DensityMap::new(data, [n; 3], [1.0; 3], [0.0; 3]).unwrap()
    };
    (render(&wa), render(&wb))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst_peaks = 0.0f64;
    for i in 0..100 {
        let dims = std::array::from_fn(|_| rng.random_range(2..14));
        let a = random_map(&mut rng, dims, [1.0; 3]);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v = 0.3 * *v + rng.random_range(-5.0f32..5.0));
        let cb = metrics::cc_box(&a, &b).map_err(|e| e.to_string())?;
        let (cp, _) = metrics::cc_peaks(&a, &b, 1.0).map_err(|e| e.to_string())?;
        worst_peaks = worst_peaks.max((cb - cp).abs());
        if i == 0 {
            let mut neg = a.clone();
            neg.data.iter_mut().for_each(|v| *v = -*v);
            let s = metrics::cc_box(&a, &a).map_err(|e| e.to_string())?;
            let n = metrics::cc_box(&a, &neg).map_err(|e| e.to_string())?;
            ensure!((s - 1.0).abs() < 1e-9 && (n + 1.0).abs() < 1e-9, "cc_box self {s} neg {n}");
        }
    }
    ensure!(worst_peaks < 1e-9, "cc_peaks(1) vs cc_box {worst_peaks:e}");

    let m = random_map(&mut rng, [24, 20, 18], [1.2; 3]);
    let self_fsc = metrics::fsc(&m, &m).map_err(|e| e.to_string())?;
    let worst_self = self_fsc.fsc.iter().fold(0.0f64, |w, v| w.max((v - 1.0).abs()));
    ensure!(worst_self < 1e-9, "self FSC deviates {worst_self:e}");

    let (n, k) = (32, 9);
    let (a, b) = band_limited_pair(n, k, &mut rng);
    let c = metrics::fsc(&a, &b).map_err(|e| e.to_string())?;
    let shell = n as f64 * 1.0 / c.fsc05;
    ensure!((shell - k as f64).abs() <= 1.0, "fsc05 {:.3} Å ↔ shell {shell:.2}, cutoff {k}", c.fsc05);

    let s = peptide(6);
    let p = map_sim::derive_params(2.0).map_err(|e| e.to_string())?;
    let sim = map_sim::simulate_map(&s, &p, None).map_err(|e| e.to_string())?.map;
    let r = metrics::rscc(&sim, &s, &p).map_err(|e| e.to_string())?;
    let mut worst_rscc = 0.0f64;
    for res in &r.residues {
        let v = res.rscc.ok_or(format!("no score for {}{}", res.chain, res.seq))?;
        worst_rscc = worst_rscc.max((v - 1.0).abs());
    }
    ensure!(worst_rscc < 1e-6, "rscc self deviation {worst_rscc:e}");
    Ok(format!(
        "cc_peaks=cc_box err {worst_peaks:.1e}, self FSC err {worst_self:.1e}, fsc05 shell {shell:.2} (cutoff {k}), rscc err {worst_rscc:.1e} over {} residues",
        r.residues.len()
    ))
}

/// Re-encodes a canonical file with columns along Y and rows along X.
fn permuted_file(m: &DensityMap) -> Vec<u8> {
    let mut h = map_io::header_for(m);
    let [nx, ny, nz] = m.dims;
    h.nx = ny as i32;
    h.ny = nx as i32;
    h.mapc = 2;
    h.mapr = 1;
    h.maps = 3;
    let mut out = h.to_bytes();
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                out.extend_from_slice(&m.get(x, y, z).to_le_bytes());
            }
        }
    }
    out
}

fn format_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for i in 0..100 {
        let dims = std::array::from_fn(|_| rng.random_range(1..24));
        let vs = [rng.random_range(0.4..3.0), rng.random_range(0.4..3.0), rng.random_range(0.4..3.0)];
        let m = random_map(&mut rng, dims, vs);
        let p = dir.path().join(format!("v{i}.mrc"));
        map_io::write_mrc(&m, &p).map_err(|e| e.to_string())?;
        let back = map_io::read_mrc(&p).map_err(|e| e.to_string())?;
        ensure!(back.dims == m.dims, "volume {i} dims");
        ensure!(back.data.iter().zip(&m.data).all(|(a, b)| a.to_bits() == b.to_bits()), "volume {i} data differs");
    }
    let m = random_map(&mut rng, [5, 7, 3], [1.1, 0.9, 2.0]);
    let canonical = map_io::parse_mrc(&map_io::encode_mrc(&m).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let permuted = map_io::parse_mrc(&permuted_file(&m)).map_err(|e| e.to_string())?;
    ensure!(permuted.dims == canonical.dims, "permuted dims {:?}", permuted.dims);
    ensure!(permuted.data == canonical.data, "permuted volume differs");

    let net = Unet::new(ModelConfig::toy()).map_err(|e| e.to_string())?;
    let w = net.init_weights(9);
    let wd = dir.path().join("weights");
    nn::save_weights(&w, &wd).map_err(|e| e.to_string())?;
    let back = nn::load_weights(&wd).map_err(|e| e.to_string())?;
    ensure!(back.config == w.config, "config differs");
    ensure!(back.params.len() == w.params.len(), "parameter count");
    for (name, t) in &w.params {
        let b = back.get(name).ok_or(format!("missing {name}"))?;
        ensure!(b.shape == t.shape, "{name} shape");
        ensure!(b.data.iter().zip(&t.data).all(|(a, c)| a.to_bits() == c.to_bits()), "{name} data");
    }
    Ok(format!("100 MRC volumes bit-exact, 2,1,3 axis order ok, {} weight tensors bit-exact", w.params.len()))
}

fn write_pdb(path: &Path, s: &ProteinStructure) {
    let mut text = String::new();
    let mut serial = 1;
    for c in &s.chains {
        for r in &c.residues {
            for a in &r.atoms {
                let el = match a.element_number {
                    6 => "C",
                    7 => "N",
                    8 => "O",
                    16 => "S",
                    _ => "C",
                };
                text.push_str(&format_atom_record(serial, &a.name, &r.name, c.id, r.seq_id, a.position, el));
                text.push('\n');
                serial += 1;
            }
        }
    }
    text.push_str("END\n");
    std::fs::write(path, text).unwrap();
}

fn run_cli(args: &[&str]) -> Result<serde_json::Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cryomap"))
        .args(args)
        .args(["--log-level", "warn"])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{} exited {:?}: {}", args[0], out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| format!("{}: bad JSON: {e}", args[0]))
}

fn end_to_end() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |n: &str| dir.path().join(n).display().to_string();
    write_pdb(Path::new(&d("model.pdb")), &peptide(10));
    run_cli(&["simulate", "--pdb", &d("model.pdb"), "--dims", "96,96,96", "--grid", "1.0", "--resolution", "2.0", "--noise", "0.1", "--seed", "1", "--out", &d("noisy.mrc")])?;
    run_cli(&["simulate", "--pdb", &d("model.pdb"), "--like", &d("noisy.mrc"), "--out", &d("clean.mrc")])?;
    run_cli(&["init-weights", "--seed", "2", "--out", &d("weights")])?;
    let enh = run_cli(&["enhance", "--in", &d("noisy.mrc"), "--weights", &d("weights"), "--out", &d("enhanced.mrc")])?;
    let cc = run_cli(&["eval-cc", "--map", &d("enhanced.mrc"), "--ref", &d("clean.mrc"), "--pdb", &d("model.pdb")])?;
    let fsc = run_cli(&["eval-fsc", "--a", &d("enhanced.mrc"), "--b", &d("clean.mrc")])?;
    let input = map_io::read_mrc(d("noisy.mrc")).map_err(|e| e.to_string())?;
    let output = map_io::read_mrc(d("enhanced.mrc")).map_err(|e| e.to_string())?;
    ensure!(input.dims == [96; 3], "input dims {:?}", input.dims);
    ensure!(output.dims == input.dims, "output dims {:?}", output.dims);
    ensure!(output.voxel_size == input.voxel_size, "voxel size {:?} vs {:?}", output.voxel_size, input.voxel_size);
    ensure!(cc["report"]["cc_box"].is_number() && fsc["fsc05"].is_number(), "metric reports incomplete");
    let el = t0.elapsed().as_secs_f64();
    ensure!(el < 120.0, "runtime {el:.0}s");
    Ok(format!(
        "96³ in {el:.0} s, {} cubes, cc_box {:.3}, fsc05 {:.2} Å",
        enh["cubes"],
        cc["report"]["cc_box"].as_f64().unwrap_or(f64::NAN),
        fsc["fsc05"].as_f64().unwrap_or(f64::NAN)
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("density oracle", eq1_oracle),
        ("embedding pooling", pooling),
        ("tiling round-trip", tiling),
        ("network contracts", network_contracts),
        ("smooth L1", smooth_l1),
        ("toy overfit", toy_overfit),
        ("metric oracles", metric_oracles),
        ("format fidelity", format_fidelity),
        ("end-to-end smoke", end_to_end),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match r {
            Ok(detail) => println!("PASS  {name:<20} {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<20} {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
