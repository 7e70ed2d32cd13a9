//! Forward pass, exact reverse-mode gradients for adapter parameters, and
//! KV-cached greedy decoding.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::vocab::EOS;
use super::{AdapterStack, Projection, Slot};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Logits for every text position (rows) over the text vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Array2<f64>,
}

impl ForwardOutput {
    pub fn probs(&self) -> Array2<f64> {
        let mut p = self.logits.clone();
        for mut row in p.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|z| (z - m).exp());
            let z = row.sum();
            row /= z;
        }
        p
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let out = &xhat * g + b;
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Array2<f64>, g: &Array1<f64>, cache: &LnCache) -> Array2<f64> {
    let n = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_d = row.sum() / n;
        let mean_dx = row.dot(&xh) / n;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|d, &x| *d = r * (*d - mean_d - x * mean_dx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// `x·Wᵀ + Σ_active scaling·(x·Aᵀ)·Bᵀ`, adapters applied on the fly.
fn project(stack: &AdapterStack, layer: usize, p: Projection, x: &Array2<f64>) -> Array2<f64> {
    let w = stack.base.layers[layer].weight(p);
    let mut y = x.dot(&w.t());
    for (_, adapter) in stack.active_adapters() {
        if let Some(m) = adapter.module(layer, p) {
            let xa = x.dot(&m.a.t());
            y.scaled_add(adapter.scaling(), &xa.dot(&m.b.t()));
        }
    }
    y
}

/// Gradient buffers for one adapter, aligned with its modules (A, B).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub slot: Slot,
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
}

impl AdapterGrads {
    pub fn zeros_like(stack: &AdapterStack, slot: Slot) -> Result<AdapterGrads> {
        let adapter = stack
            .adapter(slot)
            .ok_or_else(|| Error::Argument(format!("no {slot} adapter attached")))?;
        let tensors = adapter
            .modules
            .iter()
            .flat_map(|m| [Array2::zeros(m.a.raw_dim()), Array2::zeros(m.b.raw_dim())])
            .collect();
        Ok(AdapterGrads {
            slot,
            names: adapter.tensor_names(),
            tensors,
        })
    }

    /// `self += c·other`.
    pub fn add_scaled(&mut self, c: f64, other: &AdapterGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(c, b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            *t *= c;
        }
    }

    /// Flattened in the adapter's parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Backprop through a projection. Returns dL/dx and accumulates adapter
/// gradients for the trainable slot.
fn project_backward(
    stack: &AdapterStack,
    layer: usize,
    p: Projection,
    x: &Array2<f64>,
    dy: &Array2<f64>,
    grads: &mut AdapterGrads,
) -> Array2<f64> {
    let w = stack.base.layers[layer].weight(p);
    let mut dx = dy.dot(w);
    for (slot, adapter) in stack.active_adapters() {
        let Some(idx) = adapter
            .modules
            .iter()
            .position(|m| m.layer == layer && m.projection == p)
        else {
            continue;
        };
        let m = &adapter.modules[idx];
        let s = adapter.scaling();
        let dyb = dy.dot(&m.b);
        dx.scaled_add(s, &dyb.dot(&m.a));
        if slot == grads.slot {
            // dA = s·(dy·B)ᵀ·x ; dB = s·dyᵀ·(x·Aᵀ)
            let da = dyb.t().dot(x);
            let db = dy.t().dot(&x.dot(&m.a.t()));
            grads.tensors[2 * idx].scaled_add(s, &da);
            grads.tensors[2 * idx + 1].scaled_add(s, &db);
        }
    }
    dx
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn_cat: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
    prefix: usize,
}

fn softmax_row_inplace(mut row: ndarray::ArrayViewMut1<f64>) {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    row.mapv_inplace(|z| (z - m).exp());
    let z = row.sum();
    row /= z;
}

fn causal_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    slopes: &[f64],
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let n_heads = slopes.len();
    let (t, d) = q.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut sc = qh.dot(&kh.t()) * scale;
        for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
            add_recency(row.slice_mut(s![..=i]), slopes[h]);
            row.slice_mut(s![i + 1..]).fill(f64::NEG_INFINITY);
            softmax_row_inplace(row);
        }
        out.slice_mut(cols).assign(&sc.dot(&vh));
        probs.push(sc);
    }
    (out, probs)
}

/// Adds `−slope·(i − j)` to the scores of query `i` over keys `0..=i`.
fn add_recency(mut row: ndarray::ArrayViewMut1<f64>, slope: f64) {
    if slope == 0.0 {
        return;
    }
    let last = row.len() - 1;
    for (j, x) in row.iter_mut().enumerate() {
        *x -= slope * (last - j) as f64;
    }
}

fn attention_backward(
    c: &LayerCache,
    dout: &Array2<f64>,
    n_heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, d) = c.q.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((t, d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &c.probs[h];
        let doh = dout.slice(cols);
        let mut ds = doh.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let inner = drow.dot(&prow);
            Zip::from(&mut drow)
                .and(&prow)
                .for_each(|d, &pp| *d = pp * (*d - inner));
        }
        dq.slice_mut(cols).assign(&(ds.dot(&c.k.slice(cols)) * scale));
        dk.slice_mut(cols).assign(&(ds.t().dot(&c.q.slice(cols)) * scale));
    }
    (dq, dk, dv)
}

fn check_input(stack: &AdapterStack, image: &[u32], text: &[u32]) -> Result<()> {
    let cfg = &stack.config;
    if text.is_empty() {
        return Err(Error::Argument("text sequence is empty".into()));
    }
    let len = image.len() + text.len();
    if len > cfg.max_context {
        return Err(Error::ContextOverflow {
            len,
            max: cfg.max_context,
        });
    }
    if let Some(&bad) = image.iter().find(|&&t| t as usize >= cfg.visual_vocab_size) {
        return Err(Error::Argument(format!("visual token {bad} out of range")));
    }
    if let Some(&bad) = text.iter().find(|&&t| t as usize >= cfg.text_vocab_size) {
        return Err(Error::Argument(format!("text token {bad} out of range")));
    }
    Ok(())
}

fn embed(stack: &AdapterStack, image: &[u32], text: &[u32]) -> Array2<f64> {
    let b = &stack.base;
    let d = stack.config.d_model;
    let mut x = Array2::zeros((image.len() + text.len(), d));
    for (t, mut row) in x.rows_mut().into_iter().enumerate() {
        let emb = if t < image.len() {
            b.vis_emb.row(image[t] as usize)
        } else {
            b.tok_emb.row(text[t - image.len()] as usize)
        };
        row.assign(&(&emb + &b.pos_emb.row(t)));
    }
    x
}

fn run(stack: &AdapterStack, image: &[u32], text: &[u32]) -> Result<Cache> {
    check_input(stack, image, text)?;
    let slopes = stack.config.head_slopes();
    let mut x = embed(stack, image, text);
    let mut layers = Vec::with_capacity(stack.config.n_layers);
    for (li, lw) in stack.base.layers.iter().enumerate() {
        let (h1, ln1) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
        let q = project(stack, li, Projection::Query, &h1);
        let k = project(stack, li, Projection::Key, &h1);
        let v = project(stack, li, Projection::Value, &h1);
        let (attn_cat, probs) = causal_attention(&q, &k, &v, &slopes);
        x += &project(stack, li, Projection::Output, &attn_cat);
        let (h2, ln2) = layer_norm(&x, &lw.ln2_g, &lw.ln2_b);
        let u = project(stack, li, Projection::Up, &h2) + &lw.b_up;
        let g = u.mapv(gelu);
        x += &(project(stack, li, Projection::Down, &g) + &lw.b_down);
        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            attn_cat,
            ln2,
            h2,
            u,
            g,
        });
    }
    let (hf, lnf) = layer_norm(&x, &stack.base.lnf_g, &stack.base.lnf_b);
    Ok(Cache {
        layers,
        lnf,
        hf,
        prefix: image.len(),
    })
}

/// Logits for every text position, given the visual prefix.
pub fn forward(stack: &AdapterStack, image: &[u32], text: &[u32]) -> Result<ForwardOutput> {
    let cache = run(stack, image, text)?;
    let hf = cache.hf.slice(s![cache.prefix.., ..]);
    Ok(ForwardOutput {
        logits: hf.dot(&stack.base.lm_head.t()),
    })
}

/// Forward through explicitly merged weights `W + ΔW`.
pub fn merged_forward(stack: &AdapterStack, image: &[u32], text: &[u32]) -> Result<ForwardOutput> {
    forward(&stack.merged(), image, text)
}

fn target_rows(prefix: usize, ex: &super::Example) -> Result<Vec<usize>> {
    if ex.target_start == 0 || ex.n_targets() == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok((ex.target_start..ex.text.len())
        .map(|i| prefix + i - 1)
        .collect())
}

fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|z| z - lse);
    }
    out
}

/// Σ_t log P(y_t | y_<t, x) over the example's target positions.
pub fn target_logprob(stack: &AdapterStack, ex: &super::Example) -> Result<f64> {
    let cache = run(stack, &ex.image, &ex.text)?;
    let rows = target_rows(cache.prefix, ex)?;
    let h = cache.hf.select(Axis(0), &rows);
    let logp = log_softmax_rows(h.dot(&stack.base.lm_head.t()).view());
    Ok(ex.text[ex.target_start..]
        .iter()
        .enumerate()
        .map(|(i, &y)| logp[[i, y as usize]])
        .sum())
}

/// Target log-probability and its exact gradient with respect to the
/// adapter in `slot`. Base weights get no gradient buffers at all.
pub fn seq_logprob_grad(
    stack: &AdapterStack,
    ex: &super::Example,
    slot: Slot,
) -> Result<(f64, AdapterGrads)> {
    if !stack.is_active(slot) {
        return Err(Error::Argument(format!("trainable {slot} adapter is not active")));
    }
    let mut grads = AdapterGrads::zeros_like(stack, slot)?;
    let cache = run(stack, &ex.image, &ex.text)?;
    let rows = target_rows(cache.prefix, ex)?;
    let lm = &stack.base.lm_head;
    let h = cache.hf.select(Axis(0), &rows);
    let logp = log_softmax_rows(h.dot(&lm.t()).view());

    // d(Σ log p_y)/dz = onehot(y) − softmax(z)
    let mut dlogits = logp.mapv(|l| -l.exp());
    let mut value = 0.0;
    for (i, &y) in ex.text[ex.target_start..].iter().enumerate() {
        value += logp[[i, y as usize]];
        dlogits[[i, y as usize]] += 1.0;
    }
    let dh_rows = dlogits.dot(lm);
    let mut dhf = Array2::zeros(cache.hf.raw_dim());
    for (i, &r) in rows.iter().enumerate() {
        dhf.row_mut(r).assign(&dh_rows.row(i));
    }
    let mut dx = layer_norm_backward(&dhf, &stack.base.lnf_g, &cache.lnf);

    let heads = stack.config.n_heads;
    for (li, c) in cache.layers.iter().enumerate().rev() {
        let lw = &stack.base.layers[li];
        let dg = project_backward(stack, li, Projection::Down, &c.g, &dx, &mut grads);
        let du = dg * &c.u.mapv(gelu_grad);
        let dh2 = project_backward(stack, li, Projection::Up, &c.h2, &du, &mut grads);
        dx += &layer_norm_backward(&dh2, &lw.ln2_g, &c.ln2);

        let dcat = project_backward(stack, li, Projection::Output, &c.attn_cat, &dx, &mut grads);
        let (dq, dk, dv) = attention_backward(c, &dcat, heads);
        let mut dh1 = project_backward(stack, li, Projection::Query, &c.h1, &dq, &mut grads);
        dh1 += &project_backward(stack, li, Projection::Key, &c.h1, &dk, &mut grads);
        dh1 += &project_backward(stack, li, Projection::Value, &c.h1, &dv, &mut grads);
        dx += &layer_norm_backward(&dh1, &lw.ln1_g, &c.ln1);
    }
    Ok((value, grads))
}

/// Output of [`greedy_decode`]. `truncated` is set when generation hit the
/// context limit before `<eos>` or `max_new`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub truncated: bool,
}

fn argmax(row: ndarray::ArrayView1<f64>) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Appends argmax tokens until `<eos>` (not returned) or `max_new`.
pub fn greedy_decode(
    stack: &AdapterStack,
    image: &[u32],
    prompt: &[u32],
    max_new: usize,
) -> Result<Decoded> {
    let cache = run(stack, image, prompt)?;
    let cfg = &stack.config;
    let lm = &stack.base.lm_head;
    let mut keys: Vec<Array2<f64>> = cache.layers.iter().map(|c| c.k.clone()).collect();
    let mut values: Vec<Array2<f64>> = cache.layers.iter().map(|c| c.v.clone()).collect();
    let slopes = cfg.head_slopes();
    let mut pos = image.len() + prompt.len();
    let mut next = argmax(lm.dot(&cache.hf.row(pos - 1)).view());

    let mut tokens = Vec::new();
    let mut truncated = false;
    while tokens.len() < max_new {
        if next == EOS {
            break;
        }
        tokens.push(next);
        if tokens.len() == max_new {
            break;
        }
        if pos >= cfg.max_context {
            truncated = true;
            break;
        }
        let b = &stack.base;
        let mut x = (&b.tok_emb.row(next as usize) + &b.pos_emb.row(pos))
            .insert_axis(Axis(0));
        for (li, lw) in b.layers.iter().enumerate() {
            let (h1, _) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
            let q = project(stack, li, Projection::Query, &h1);
            keys[li].push_row(project(stack, li, Projection::Key, &h1).row(0)).expect("width");
            values[li].push_row(project(stack, li, Projection::Value, &h1).row(0)).expect("width");
            let dh = cfg.head_dim();
            let scale = 1.0 / (dh as f64).sqrt();
            let mut cat = Array2::zeros((1, cfg.d_model));
            for h in 0..cfg.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut sc = q.slice(cols).dot(&keys[li].slice(cols).t()) * scale;
                add_recency(sc.row_mut(0), slopes[h]);
                softmax_row_inplace(sc.row_mut(0));
                cat.slice_mut(cols).assign(&sc.dot(&values[li].slice(cols)));
            }
            x += &project(stack, li, Projection::Output, &cat);
            let (h2, _) = layer_norm(&x, &lw.ln2_g, &lw.ln2_b);
            let g = (project(stack, li, Projection::Up, &h2) + &lw.b_up).mapv(gelu);
            x += &(project(stack, li, Projection::Down, &g) + &lw.b_down);
        }
        let (hf, _) = layer_norm(&x, &b.lnf_g, &b.lnf_b);
        next = argmax(lm.dot(&hf.row(0)).view());
        pos += 1;
    }
    Ok(Decoded { tokens, truncated })
}
