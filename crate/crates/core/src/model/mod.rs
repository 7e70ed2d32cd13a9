//! Tiny decoder-only language model with a visual-token prefix and two
//! stackable LoRA adapters.
//!
//! Effective weights are `W + Σ_active (alpha/r)·B·A`. The base weights are
//! frozen; only adapter matrices ever receive gradients.

mod checkpoint;
pub mod forward;
pub mod vocab;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checkpoint::{load_adapter, load_checkpoint, save_checkpoint};
pub use forward::{
    forward, greedy_decode, merged_forward, seq_logprob_grad, target_logprob, Decoded,
    ForwardOutput,
};
pub use vocab::{Example, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyLmConfig {
    pub text_vocab_size: usize,
    pub visual_vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub seed: u64,
    /// Per-head linear recency bias on attention scores, with geometric
    /// slopes `2^(−8(h+1)/n_heads)`. Off means plain dot-product attention.
    pub recency_bias: bool,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        TinyLmConfig {
            text_vocab_size: 512,
            visual_vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_context: 256,
            seed: 0,
            recency_bias: true,
        }
    }
}

impl TinyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        for (name, v) in [
            ("text_vocab_size", self.text_vocab_size),
            ("visual_vocab_size", self.visual_vocab_size),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn head_slopes(&self) -> Vec<f64> {
        (0..self.n_heads)
            .map(|h| {
                if self.recency_bias {
                    2f64.powf(-8.0 * (h + 1) as f64 / self.n_heads as f64)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Weight matrices an adapter can wrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
        Projection::Up,
        Projection::Down,
    ];

    /// (out, in) dimensions for a model.
    pub fn shape(self, cfg: &TinyLmConfig) -> (usize, usize) {
        match self {
            Projection::Up => (cfg.d_ff, cfg.d_model),
            Projection::Down => (cfg.d_model, cfg.d_ff),
            _ => (cfg.d_model, cfg.d_model),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.short_name() == s)
            .ok_or_else(|| Error::Config(format!("unknown projection `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_up: Array2<f64>,
    pub b_up: Array1<f64>,
    pub w_down: Array2<f64>,
    pub b_down: Array1<f64>,
}

impl LayerWeights {
    pub fn weight(&self, p: Projection) -> &Array2<f64> {
        match p {
            Projection::Query => &self.wq,
            Projection::Key => &self.wk,
            Projection::Value => &self.wv,
            Projection::Output => &self.wo,
            Projection::Up => &self.w_up,
            Projection::Down => &self.w_down,
        }
    }

    fn weight_mut(&mut self, p: Projection) -> &mut Array2<f64> {
        match p {
            Projection::Query => &mut self.wq,
            Projection::Key => &mut self.wk,
            Projection::Value => &mut self.wv,
            Projection::Output => &mut self.wo,
            Projection::Up => &mut self.w_up,
            Projection::Down => &mut self.w_down,
        }
    }
}

/// Frozen base parameters θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseWeights {
    pub tok_emb: Array2<f64>,
    pub vis_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub lm_head: Array2<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl BaseWeights {
    pub fn init(cfg: &TinyLmConfig) -> Result<BaseWeights> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        let inv_d = 1.0 / (d as f64).sqrt();
        let tok_emb = normal_matrix(&mut rng, cfg.text_vocab_size, d, 1.0);
        let vis_emb = normal_matrix(&mut rng, cfg.visual_vocab_size, d, 1.0);
        let pos_emb = normal_matrix(&mut rng, cfg.max_context, d, 0.3);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: normal_matrix(&mut rng, d, d, inv_d),
                wk: normal_matrix(&mut rng, d, d, inv_d),
                wv: normal_matrix(&mut rng, d, d, inv_d),
                wo: normal_matrix(&mut rng, d, d, inv_d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_up: normal_matrix(&mut rng, ff, d, inv_d),
                b_up: Array1::zeros(ff),
                w_down: normal_matrix(&mut rng, d, ff, 1.0 / (ff as f64).sqrt()),
                b_down: Array1::zeros(d),
            })
            .collect();
        let lm_head = normal_matrix(&mut rng, cfg.text_vocab_size, d, inv_d);
        Ok(BaseWeights {
            tok_emb,
            vis_emb,
            pos_emb,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            lm_head,
        })
    }

    /// Named tensors in a fixed order, as flat row-major slices with shapes.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        fn m(name: String, a: &Array2<f64>) -> (String, Vec<usize>, &[f64]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        fn v(name: String, a: &Array1<f64>) -> (String, Vec<usize>, &[f64]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        out.push(m("tok_emb".into(), &self.tok_emb));
        out.push(m("vis_emb".into(), &self.vis_emb));
        out.push(m("pos_emb".into(), &self.pos_emb));
        for (i, l) in self.layers.iter().enumerate() {
            out.push(v(format!("layers.{i}.ln1_g"), &l.ln1_g));
            out.push(v(format!("layers.{i}.ln1_b"), &l.ln1_b));
            out.push(m(format!("layers.{i}.wq"), &l.wq));
            out.push(m(format!("layers.{i}.wk"), &l.wk));
            out.push(m(format!("layers.{i}.wv"), &l.wv));
            out.push(m(format!("layers.{i}.wo"), &l.wo));
            out.push(v(format!("layers.{i}.ln2_g"), &l.ln2_g));
            out.push(v(format!("layers.{i}.ln2_b"), &l.ln2_b));
            out.push(m(format!("layers.{i}.w_up"), &l.w_up));
            out.push(v(format!("layers.{i}.b_up"), &l.b_up));
            out.push(m(format!("layers.{i}.w_down"), &l.w_down));
            out.push(v(format!("layers.{i}.b_down"), &l.b_down));
        }
        out.push(v("lnf_g".into(), &self.lnf_g));
        out.push(v("lnf_b".into(), &self.lnf_b));
        out.push(m("lm_head".into(), &self.lm_head));
        out
    }

    /// Mutable flat views in the same order as [`Self::named_tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.tok_emb.as_slice_mut().expect("standard layout"),
            self.vis_emb.as_slice_mut().expect("standard layout"),
            self.pos_emb.as_slice_mut().expect("standard layout"),
        ];
        for l in &mut self.layers {
            out.push(l.ln1_g.as_slice_mut().expect("standard layout"));
            out.push(l.ln1_b.as_slice_mut().expect("standard layout"));
            out.push(l.wq.as_slice_mut().expect("standard layout"));
            out.push(l.wk.as_slice_mut().expect("standard layout"));
            out.push(l.wv.as_slice_mut().expect("standard layout"));
            out.push(l.wo.as_slice_mut().expect("standard layout"));
            out.push(l.ln2_g.as_slice_mut().expect("standard layout"));
            out.push(l.ln2_b.as_slice_mut().expect("standard layout"));
            out.push(l.w_up.as_slice_mut().expect("standard layout"));
            out.push(l.b_up.as_slice_mut().expect("standard layout"));
            out.push(l.w_down.as_slice_mut().expect("standard layout"));
            out.push(l.b_down.as_slice_mut().expect("standard layout"));
        }
        out.push(self.lnf_g.as_slice_mut().expect("standard layout"));
        out.push(self.lnf_b.as_slice_mut().expect("standard layout"));
        out.push(self.lm_head.as_slice_mut().expect("standard layout"));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
    /// Standard deviation of the initial A entries, as a multiple of
    /// 1/sqrt(fan_in).
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    1.0
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 128,
            alpha: 256.0,
            targets: vec![Projection::Query, Projection::Value],
            init_scale: 1.0,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Low-rank factors for one wrapped matrix: ΔW = scaling·B·A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraModule {
    pub layer: usize,
    pub projection: Projection,
    /// rank × in
    pub a: Array2<f64>,
    /// out × rank
    pub b: Array2<f64>,
}

impl LoraModule {
    pub fn delta(&self, scaling: f64) -> Array2<f64> {
        self.b.dot(&self.a) * scaling
    }
}

/// One adapter φ: a LoRA module per (layer, target projection).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub modules: Vec<LoraModule>,
}

impl LoraAdapter {
    /// A random, B zero: the adapter starts as an exact no-op.
    pub fn init(model: &TinyLmConfig, config: &LoraConfig, seed: u64) -> Result<LoraAdapter> {
        if config.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if config.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target projection".into()));
        }
        let mut targets = config.targets.clone();
        targets.sort();
        targets.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modules = Vec::new();
        for layer in 0..model.n_layers {
            for &p in &targets {
                let (out, inp) = p.shape(model);
                let std = config.init_scale / (inp as f64).sqrt();
                modules.push(LoraModule {
                    layer,
                    projection: p,
                    a: normal_matrix(&mut rng, config.rank, inp, std),
                    b: Array2::zeros((out, config.rank)),
                });
            }
        }
        Ok(LoraAdapter {
            config: LoraConfig {
                targets,
                ..config.clone()
            },
            modules,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.config.scaling()
    }

    pub fn module(&self, layer: usize, p: Projection) -> Option<&LoraModule> {
        self.modules
            .iter()
            .find(|m| m.layer == layer && m.projection == p)
    }

    pub fn n_params(&self) -> usize {
        self.modules.iter().map(|m| m.a.len() + m.b.len()).sum()
    }

    /// Tensor names in flattening order.
    pub fn tensor_names(&self) -> Vec<String> {
        self.modules
            .iter()
            .flat_map(|m| {
                let base = format!("layers.{}.{}", m.layer, m.projection);
                [format!("{base}.lora_a"), format!("{base}.lora_b")]
            })
            .collect()
    }

    /// All parameters as one vector: per module, A then B, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for m in &self.modules {
            v.extend(m.a.iter());
            v.extend(m.b.iter());
        }
        v
    }

    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let mut off = 0;
        for m in &mut self.modules {
            for x in m.a.iter_mut().chain(m.b.iter_mut()) {
                *x = flat[off];
                off += 1;
            }
        }
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for m in &mut self.modules {
            let n = m.a.len() + m.b.len();
            if index < n {
                let na = m.a.len();
                return if index < na {
                    &mut m.a.as_slice_mut().expect("standard layout")[index]
                } else {
                    &mut m.b.as_slice_mut().expect("standard layout")[index - na]
                };
            }
            index -= n;
        }
        panic!("adapter parameter index out of range");
    }

    fn check_shapes(&self, model: &TinyLmConfig) -> Result<()> {
        for m in &self.modules {
            let (out, inp) = m.projection.shape(model);
            let name = format!("layers.{}.{}", m.layer, m.projection);
            if m.layer >= model.n_layers {
                return Err(Error::Checkpoint(format!("{name}: layer out of range")));
            }
            if m.a.dim() != (self.config.rank, inp) {
                return Err(Error::Shape {
                    name: format!("{name}.lora_a"),
                    expected: vec![self.config.rank, inp],
                    found: m.a.shape().to_vec(),
                });
            }
            if m.b.dim() != (out, self.config.rank) {
                return Err(Error::Shape {
                    name: format!("{name}.lora_b"),
                    expected: vec![out, self.config.rank],
                    found: m.b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    Stage1,
    Stage2,
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Slot::Stage1 => "stage1",
            Slot::Stage2 => "stage2",
        })
    }
}

/// Frozen base θ with optional Stage-1 (φ) and Stage-2 (φ′) adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack {
    pub config: TinyLmConfig,
    pub base: BaseWeights,
    pub stage1: Option<LoraAdapter>,
    pub stage2: Option<LoraAdapter>,
    pub stage1_active: bool,
    pub stage2_active: bool,
}

impl AdapterStack {
    pub fn new(config: TinyLmConfig) -> Result<AdapterStack> {
        let base = BaseWeights::init(&config)?;
        Ok(AdapterStack {
            config,
            base,
            stage1: None,
            stage2: None,
            stage1_active: false,
            stage2_active: false,
        })
    }

    pub fn adapter(&self, slot: Slot) -> Option<&LoraAdapter> {
        match slot {
            Slot::Stage1 => self.stage1.as_ref(),
            Slot::Stage2 => self.stage2.as_ref(),
        }
    }

    pub fn adapter_mut(&mut self, slot: Slot) -> Option<&mut LoraAdapter> {
        match slot {
            Slot::Stage1 => self.stage1.as_mut(),
            Slot::Stage2 => self.stage2.as_mut(),
        }
    }

    pub fn is_active(&self, slot: Slot) -> bool {
        match slot {
            Slot::Stage1 => self.stage1_active && self.stage1.is_some(),
            Slot::Stage2 => self.stage2_active && self.stage2.is_some(),
        }
    }

    pub fn set_active(&mut self, slot: Slot, on: bool) {
        match slot {
            Slot::Stage1 => self.stage1_active = on,
            Slot::Stage2 => self.stage2_active = on,
        }
    }

    /// Installs and activates an adapter after checking its shapes.
    pub fn attach(&mut self, slot: Slot, adapter: LoraAdapter) -> Result<()> {
        adapter.check_shapes(&self.config)?;
        match slot {
            Slot::Stage1 => self.stage1 = Some(adapter),
            Slot::Stage2 => self.stage2 = Some(adapter),
        }
        self.set_active(slot, true);
        Ok(())
    }

    /// Attaches a freshly initialised (zero-delta) adapter.
    pub fn attach_fresh(&mut self, slot: Slot, config: &LoraConfig, seed: u64) -> Result<()> {
        let adapter = LoraAdapter::init(&self.config, config, seed)?;
        self.attach(slot, adapter)
    }

    /// Active adapters with their scaling, Stage 1 first.
    pub fn active_adapters(&self) -> impl Iterator<Item = (Slot, &LoraAdapter)> {
        [Slot::Stage1, Slot::Stage2]
            .into_iter()
            .filter(|s| self.is_active(*s))
            .filter_map(|s| self.adapter(s).map(|a| (s, a)))
    }

    /// The π_ref view: same weights with the Stage-2 adapter switched off.
    pub fn reference(&self) -> AdapterStack {
        let mut r = self.clone();
        r.stage2_active = false;
        r
    }

    /// A base-only stack whose weights already include every active delta.
    pub fn merged(&self) -> AdapterStack {
        let mut base = self.base.clone();
        for (_, adapter) in self.active_adapters() {
            let s = adapter.scaling();
            for m in &adapter.modules {
                let w = base.layers[m.layer].weight_mut(m.projection);
                *w += &m.delta(s);
            }
        }
        AdapterStack {
            config: self.config.clone(),
            base,
            stage1: None,
            stage2: None,
            stage1_active: false,
            stage2_active: false,
        }
    }

    /// SHA-256 over the base parameters' little-endian bytes.
    pub fn base_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape, data) in self.base.named_tensors() {
            h.update(name.as_bytes());
            for s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        hex_digest(h)
    }

    /// SHA-256 over an adapter's parameters, or `None` if the slot is empty.
    pub fn adapter_hash(&self, slot: Slot) -> Option<String> {
        let a = self.adapter(slot)?;
        let mut h = Sha256::new();
        for x in a.flatten() {
            h.update(x.to_le_bytes());
        }
        Some(hex_digest(h))
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
