//! Structure-aware 3D U-Net: residual blocks, linear self-attention,
//! embedding cross-attention at the bottleneck.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, NnError, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub attn_heads: usize,
    pub dropout_p: f32,
    pub groupnorm_groups: usize,
    pub embed_dim: usize,
    pub embed_len: usize,
    pub cube_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4, 8],
            attn_heads: 4,
            dropout_p: 0.2,
            groupnorm_groups: 8,
            embed_dim: 512,
            embed_len: 800,
            cube_size: 64,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for desk-scale training and tests.
    pub fn toy() -> Self {
        ModelConfig { base_channels: 8, cube_size: 16, ..Default::default() }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    /// Spatial sizes must be divisible by this factor.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.levels() == 0 || self.base_channels == 0 {
            return bad("at least one level with nonzero channels is required".into());
        }
        if self.attn_heads == 0 || self.groupnorm_groups == 0 {
            return bad("attn_heads and groupnorm_groups must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        for c in self.channels() {
            if c == 0 || c % self.groupnorm_groups != 0 {
                return bad(format!("{c} channels not divisible by {} groups", self.groupnorm_groups));
            }
            if c % self.attn_heads != 0 {
                return bad(format!("{c} channels not divisible by {} heads", self.attn_heads));
            }
        }
        if !self.cube_size.is_multiple_of(self.size_multiple()) {
            return bad(format!(
                "cube_size {} not divisible by {}",
                self.cube_size,
                self.size_multiple()
            ));
        }
        Ok(())
    }
}

/// Dropout and cross-attention behaviour for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub training: bool,
    pub seed: u64,
    pub bypass_cross: bool,
}

impl ForwardMode {
    /// Deterministic inference: no dropout, cross-attention skipped.
    pub fn eval() -> Self {
        ForwardMode { training: false, seed: 0, bypass_cross: true }
    }

    pub fn train(seed: u64) -> Self {
        ForwardMode { training: true, seed, bypass_cross: false }
    }

    pub fn with_bypass(mut self, bypass: bool) -> Self {
        self.bypass_cross = bypass;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform(f32),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

/// Named parameters plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }
}

/// Graph handles for every parameter of a model.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone)]
pub struct Unet {
    cfg: ModelConfig,
    specs: Vec<ParamSpec>,
}

struct Ctx {
    mode: ForwardMode,
    dropout: f32,
    rng: ChaCha8Rng,
}

fn conv_specs(specs: &mut Vec<ParamSpec>, name: &str, cout: usize, cin: usize, k: usize, bias: bool) {
    let bound = 1.0 / ((cin * k * k * k) as f32).sqrt();
    specs.push(ParamSpec { name: format!("{name}.weight"), shape: vec![cout, cin, k, k, k], init: Init::Uniform(bound) });
    if bias {
        specs.push(ParamSpec { name: format!("{name}.bias"), shape: vec![cout], init: Init::Uniform(bound) });
    }
}

fn zero_conv_specs(specs: &mut Vec<ParamSpec>, name: &str, cout: usize, cin: usize) {
    specs.push(ParamSpec { name: format!("{name}.weight"), shape: vec![cout, cin, 1, 1, 1], init: Init::Zeros });
    specs.push(ParamSpec { name: format!("{name}.bias"), shape: vec![cout], init: Init::Zeros });
}

fn linear_specs(specs: &mut Vec<ParamSpec>, name: &str, fout: usize, fin: usize) {
    let bound = 1.0 / (fin as f32).sqrt();
    specs.push(ParamSpec { name: format!("{name}.weight"), shape: vec![fout, fin], init: Init::Uniform(bound) });
    specs.push(ParamSpec { name: format!("{name}.bias"), shape: vec![fout], init: Init::Uniform(bound) });
}

fn norm_specs(specs: &mut Vec<ParamSpec>, name: &str, c: usize) {
    specs.push(ParamSpec { name: format!("{name}.weight"), shape: vec![c], init: Init::Ones });
    specs.push(ParamSpec { name: format!("{name}.bias"), shape: vec![c], init: Init::Zeros });
}

fn res_specs(specs: &mut Vec<ParamSpec>, p: &str, cin: usize, cout: usize) {
    norm_specs(specs, &format!("{p}.norm1"), cin);
    conv_specs(specs, &format!("{p}.conv1"), cout, cin, 3, true);
    norm_specs(specs, &format!("{p}.norm2"), cout);
    conv_specs(specs, &format!("{p}.conv2"), cout, cout, 3, true);
    if cin != cout {
        conv_specs(specs, &format!("{p}.skip"), cout, cin, 1, true);
    }
}

fn attn_specs(specs: &mut Vec<ParamSpec>, p: &str, c: usize) {
    for proj in ["to_q", "to_k", "to_v"] {
        conv_specs(specs, &format!("{p}.{proj}"), c, c, 1, false);
    }
    conv_specs(specs, &format!("{p}.to_out"), c, c, 1, true);
}

fn cross_specs(specs: &mut Vec<ParamSpec>, p: &str, c: usize, d: usize) {
    conv_specs(specs, &format!("{p}.to_q"), c, c, 1, false);
    linear_specs(specs, &format!("{p}.to_k"), c, d);
    linear_specs(specs, &format!("{p}.to_v"), c, d);
    zero_conv_specs(specs, &format!("{p}.to_out"), c, c);
}

impl Unet {
    pub fn new(cfg: ModelConfig) -> Result<Self, NnError> {
        cfg.validate()?;
        let ch = cfg.channels();
        let n = ch.len();
        let mut specs = Vec::new();
        conv_specs(&mut specs, "input.conv", ch[0], 1, 3, true);
        for i in 0..n {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            res_specs(&mut specs, &format!("enc.{i}.res.0"), cin, ch[i]);
            res_specs(&mut specs, &format!("enc.{i}.res.1"), ch[i], ch[i]);
            if i + 1 < n {
                attn_specs(&mut specs, &format!("enc.{i}.attn"), ch[i]);
                conv_specs(&mut specs, &format!("enc.{i}.down"), ch[i], ch[i], 3, true);
            }
        }
        let cm = ch[n - 1];
        res_specs(&mut specs, "mid.res.0", cm, cm);
        attn_specs(&mut specs, "mid.attn", cm);
        cross_specs(&mut specs, "mid.cross", cm, cfg.embed_dim);
        res_specs(&mut specs, "mid.res.1", cm, cm);
        for i in (0..n).rev() {
            if i + 1 < n {
                conv_specs(&mut specs, &format!("dec.{i}.up"), ch[i], ch[i + 1], 3, true);
            }
            res_specs(&mut specs, &format!("dec.{i}.res.0"), 2 * ch[i], ch[i]);
            res_specs(&mut specs, &format!("dec.{i}.res.1"), ch[i], ch[i]);
            if i + 1 < n {
                attn_specs(&mut specs, &format!("dec.{i}.attn"), ch[i]);
            }
        }
        norm_specs(&mut specs, "head.norm", ch[0]);
        conv_specs(&mut specs, "head.conv", 1, ch[0], 3, true);
        Ok(Unet { cfg, specs })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Parameter names and shapes in construction order.
    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Seeded fan-in uniform initialization.
    pub fn init_weights(&self, seed: u64) -> ModelWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = self
            .specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                (s.name.clone(), Tensor::new(s.shape.clone(), data))
            })
            .collect();
        ModelWeights { config: self.cfg.clone(), params }
    }

    /// Checks that `w` has exactly this model's parameters, reporting the
    /// first offending name in sorted order.
    pub fn check_weights(&self, w: &ModelWeights) -> Result<(), NnError> {
        let mut expected: Vec<&ParamSpec> = self.specs.iter().collect();
        expected.sort_by(|a, b| a.name.cmp(&b.name));
        let mut names = expected.iter().map(|s| s.name.as_str()).peekable();
        let mut have = w.params.keys().map(String::as_str).peekable();
        // Merge-walk two sorted name lists to find the first difference.
        loop {
            match (names.peek(), have.peek()) {
                (None, None) => break,
                (Some(e), Some(h)) if e == h => {
                    names.next();
                    have.next();
                }
                (Some(e), h) if h.is_none() || e < h.unwrap() => {
                    return Err(NnError::ParamMismatch { name: e.to_string(), msg: "missing".into() });
                }
                (_, Some(h)) => {
                    return Err(NnError::ParamMismatch { name: h.to_string(), msg: "unexpected parameter".into() });
                }
                (Some(_), None) => unreachable!(),
            }
        }
        for s in expected {
            let t = &w.params[&s.name];
            if t.shape != s.shape {
                return Err(NnError::ParamMismatch {
                    name: s.name.clone(),
                    msg: format!("shape {:?}, expected {:?}", t.shape, s.shape),
                });
            }
        }
        Ok(())
    }

    /// Places all parameters on the graph.
    pub fn bind(&self, g: &mut Graph, w: &ModelWeights, trainable: bool) -> Result<BoundParams, NnError> {
        self.check_weights(w)?;
        let vars = w.params.iter().map(|(k, t)| (k.clone(), g.leaf(t, trainable))).collect();
        Ok(BoundParams { vars })
    }

    /// Full forward pass. `x` is `[B,1,S,S,S]`; `emb`, when given, is `[B,L,d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        emb: Option<Var>,
        mode: ForwardMode,
    ) -> Result<Var, NnError> {
        let shape = g.shape(x).to_vec();
        let m = self.cfg.size_multiple();
        if shape.len() != 5 || shape[1] != 1 || shape[2..].iter().any(|&s| s == 0 || s % m != 0) {
            return Err(NnError::Shape(format!(
                "input must be [B,1,S,S,S] with S divisible by {m}, got {shape:?}"
            )));
        }
        if !mode.bypass_cross {
            let e = emb.ok_or(NnError::MissingEmbedding)?;
            let es = g.shape(e);
            if es.len() != 3 || es[0] != shape[0] || es[2] != self.cfg.embed_dim || es[1] == 0 {
                return Err(NnError::Shape(format!(
                    "embedding must be [{}, L, {}], got {es:?}",
                    shape[0], self.cfg.embed_dim
                )));
            }
        }
        let mut ctx = Ctx {
            mode,
            dropout: if mode.training { self.cfg.dropout_p } else { 0.0 },
            rng: ChaCha8Rng::seed_from_u64(mode.seed),
        };
        let ch = self.cfg.channels();
        let n = ch.len();
        let mut h = conv(g, p, "input.conv", x, 1, 1)?;
        let mut skips = Vec::with_capacity(n);
        for i in 0..n {
            h = self.res_block(g, p, &mut ctx, h, &format!("enc.{i}.res.0"))?;
            h = self.res_block(g, p, &mut ctx, h, &format!("enc.{i}.res.1"))?;
            if i + 1 < n {
                h = self.linear_attention(g, p, h, &format!("enc.{i}.attn"))?;
            }
            skips.push(h);
            if i + 1 < n {
                h = conv(g, p, &format!("enc.{i}.down"), h, 2, 1)?;
            }
        }
        h = self.res_block(g, p, &mut ctx, h, "mid.res.0")?;
        h = self.linear_attention(g, p, h, "mid.attn")?;
        h = self.cross_attention(g, p, h, emb, "mid.cross", ctx.mode.bypass_cross)?;
        h = self.res_block(g, p, &mut ctx, h, "mid.res.1")?;
        for i in (0..n).rev() {
            if i + 1 < n {
                let u = g.upsample2(h)?;
                h = conv(g, p, &format!("dec.{i}.up"), u, 1, 1)?;
            }
            h = g.concat(h, skips[i])?;
            h = self.res_block(g, p, &mut ctx, h, &format!("dec.{i}.res.0"))?;
            h = self.res_block(g, p, &mut ctx, h, &format!("dec.{i}.res.1"))?;
            if i + 1 < n {
                h = self.linear_attention(g, p, h, &format!("dec.{i}.attn"))?;
            }
        }
        h = g.group_norm(h, p.get("head.norm.weight"), p.get("head.norm.bias"), self.groups())?;
        h = g.silu(h);
        conv(g, p, "head.conv", h, 1, 1)
    }

    /// Eval-mode prediction without gradient tracking.
    pub fn predict(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor, NnError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, w, false)?;
        let xv = g.input(x);
        let out = self.forward(&mut g, &p, xv, None, ForwardMode::eval())?;
        Ok(g.tensor(out))
    }

    fn groups(&self) -> usize {
        self.cfg.groupnorm_groups
    }

    fn dropout(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Result<Var, NnError> {
        if ctx.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - ctx.dropout;
        let scale = 1.0 / keep;
        let mask = (0..g.value(x).len())
            .map(|_| if ctx.rng.random::<f32>() < keep { scale } else { 0.0 })
            .collect();
        g.mask(x, mask)
    }

    fn res_block(&self, g: &mut Graph, p: &BoundParams, ctx: &mut Ctx, x: Var, pre: &str) -> Result<Var, NnError> {
        let mut h = x;
        for (norm, cv) in [("norm1", "conv1"), ("norm2", "conv2")] {
            h = g.group_norm(h, p.get(&format!("{pre}.{norm}.weight")), p.get(&format!("{pre}.{norm}.bias")), self.groups())?;
            h = g.silu(h);
            h = self.dropout(g, ctx, h)?;
            h = conv(g, p, &format!("{pre}.{cv}"), h, 1, 1)?;
        }
        let skip = if p.vars.contains_key(&format!("{pre}.skip.weight")) {
            conv(g, p, &format!("{pre}.skip"), x, 1, 0)?
        } else {
            x
        };
        g.add(h, skip)
    }

    /// Softmax-feature-map linear attention with a residual connection.
    pub fn linear_attention(&self, g: &mut Graph, p: &BoundParams, x: Var, pre: &str) -> Result<Var, NnError> {
        let s = g.shape(x).to_vec();
        let (b, c) = (s[0], s[1]);
        let nvox: usize = s[2..].iter().product();
        let heads = self.cfg.attn_heads;
        let dh = c / heads;
        let q = g.conv3d(x, p.get(&format!("{pre}.to_q.weight")), None, 1, 0)?;
        let k = g.conv3d(x, p.get(&format!("{pre}.to_k.weight")), None, 1, 0)?;
        let v = g.conv3d(x, p.get(&format!("{pre}.to_v.weight")), None, 1, 0)?;
        let q = g.reshape(q, &[b * heads, dh, nvox])?;
        let q = g.permute(q, &[0, 2, 1])?;
        let q = g.softmax(q);
        let k = g.reshape(k, &[b * heads, dh, nvox])?;
        let k = g.softmax(k);
        let v = g.reshape(v, &[b * heads, dh, nvox])?;
        let v = g.permute(v, &[0, 2, 1])?;
        let context = g.bmm(k, v)?;
        let out = g.bmm(q, context)?;
        let out = g.permute(out, &[0, 2, 1])?;
        let out = g.reshape(out, &s)?;
        let out = conv(g, p, &format!("{pre}.to_out"), out, 1, 0)?;
        g.add(out, x)
    }

    /// Voxel-query, embedding-key/value attention added residually.
    pub fn cross_attention(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        emb: Option<Var>,
        pre: &str,
        bypass: bool,
    ) -> Result<Var, NnError> {
        if bypass {
            return Ok(x);
        }
        let emb = emb.ok_or(NnError::MissingEmbedding)?;
        let s = g.shape(x).to_vec();
        let (b, c) = (s[0], s[1]);
        let nvox: usize = s[2..].iter().product();
        let heads = self.cfg.attn_heads;
        let dh = c / heads;
        let l = g.shape(emb)[1];
        let q = g.conv3d(x, p.get(&format!("{pre}.to_q.weight")), None, 1, 0)?;
        let q = g.reshape(q, &[b, heads, dh, nvox])?;
        let q = g.permute(q, &[0, 1, 3, 2])?;
        let q = g.reshape(q, &[b * heads, nvox, dh])?;
        let k = g.linear(emb, p.get(&format!("{pre}.to_k.weight")), Some(p.get(&format!("{pre}.to_k.bias"))))?;
        let k = g.reshape(k, &[b, l, heads, dh])?;
        let k = g.permute(k, &[0, 2, 3, 1])?;
        let k = g.reshape(k, &[b * heads, dh, l])?;
        let v = g.linear(emb, p.get(&format!("{pre}.to_v.weight")), Some(p.get(&format!("{pre}.to_v.bias"))))?;
        let v = g.reshape(v, &[b, l, heads, dh])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let v = g.reshape(v, &[b * heads, l, dh])?;
        let scores = g.bmm(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
        let attn = g.softmax(scores);
        let out = g.bmm(attn, v)?;
        let out = g.reshape(out, &[b, heads, nvox, dh])?;
        let out = g.permute(out, &[0, 1, 3, 2])?;
        let out = g.reshape(out, &s)?;
        let out = conv(g, p, &format!("{pre}.to_out"), out, 1, 0)?;
        g.add(x, out)
    }
}

fn conv(g: &mut Graph, p: &BoundParams, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
    let w = p.get(&format!("{name}.weight"));
    let b = p.vars.get(&format!("{name}.bias")).copied();
    g.conv3d(x, w, b, stride, pad)
}
