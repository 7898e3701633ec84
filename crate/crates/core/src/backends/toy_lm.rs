//! A small frozen causal transformer with seeded weights.
//!
//! Weights are Gaussian noise around a planted in-context copy circuit, which
//! gives the frozen model the one skill a speech prefix needs from a
//! pretrained LM: reproduce the content of the prefix after an instruction.
//!
//! Residual stream layout (F rotary frequency pairs, c content dims):
//!
//! | dims              | role                                             |
//! |-------------------|--------------------------------------------------|
//! | `[0, 2F)`         | absolute position (cos/sin per frequency)        |
//! | `[2F, 4F)`        | position of the anchor token, written by layer 0 |
//! | `4F`              | anchor marker                                    |
//! | `[4F+1, 4F+1+c)`  | token content code                               |
//! | next `c`          | copied content, read by the unembedding          |
//!
//! Layer 0, head 0 attends to the anchor (the last prompt token) and copies its
//! position. The last layer's head 0 uses rotary attention to look back exactly
//! `anchor_position` steps, so the k-th position after the anchor reads the
//! k-th input position, and copies that position's content code to the output.
//! Attention uses partial rotary embeddings on the first `2F` dims of each head
//! and grouped key/value heads. There is no normalization layer.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::{AttentionGeometry, DifferentiableLm, LanguageModel, ProjectionShape, TokenId};
use crate::datamodel::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rng::{checksum_f64, SeededRng};
use crate::training::{
    lora_backward, lora_forward, Dropout, LoraActivation, LoraAdapters, LoraTarget,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub mlp_hidden: usize,
    pub max_positions: usize,
    pub rope_pairs: usize,
    /// Token whose position anchors the copy circuit.
    pub anchor_id: TokenId,
    pub eos_id: TokenId,
    pub pad_id: TokenId,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            vocab_size: 32,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            mlp_hidden: 128,
            max_positions: 256,
            rope_pairs: 6,
            anchor_id: 3,
            eos_id: 1,
            pad_id: 0,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

/// Creates the default-shaped toy LM.
pub fn toy_lm(d_llm: usize, vocab_size: usize, n_layers: usize, seed: u64) -> Result<ToyLm> {
    ToyLm::new(ToyLmConfig {
        d_model: d_llm,
        vocab_size,
        n_layers,
        seed,
        ..Default::default()
    })
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    pairs: usize,
    anchor_pos: usize,
    mark: usize,
    content: usize,
    copied: usize,
    width: usize,
    head_dim: usize,
}

impl Layout {
    fn new(cfg: &ToyLmConfig) -> Result<Self> {
        let f = cfg.rope_pairs;
        let fixed = 4 * f + 1;
        let width = cfg.d_model.saturating_sub(fixed) / 2;
        if f == 0 || width < 4 {
            return Err(Error::InvalidInput(format!(
                "toy LM needs d_model >= {} for {f} rotary pairs, got {}",
                fixed + 8,
                cfg.d_model
            )));
        }
        Ok(Self {
            pairs: f,
            anchor_pos: 2 * f,
            mark: 4 * f,
            content: 4 * f + 1,
            copied: 4 * f + 1 + width,
            width,
            head_dim: width.max(2 * f + 1),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    wq: Array2<f64>,
    bq: Array1<f64>,
    wk: Array2<f64>,
    bk: Array1<f64>,
    wv: Array2<f64>,
    bv: Array1<f64>,
    wo: Array2<f64>,
    bo: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl Layer {
    fn tensors(&self) -> [&[f64]; 12] {
        [
            self.wq.as_slice().unwrap(),
            self.bq.as_slice().unwrap(),
            self.wk.as_slice().unwrap(),
            self.bk.as_slice().unwrap(),
            self.wv.as_slice().unwrap(),
            self.bv.as_slice().unwrap(),
            self.wo.as_slice().unwrap(),
            self.bo.as_slice().unwrap(),
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ToyLm {
    cfg: ToyLmConfig,
    layout: Layout,
    token_embed: Array2<f64>,
    pos_embed: Array2<f64>,
    layers: Vec<Layer>,
    unembed: Array2<f64>,
    rope_cos: Array2<f64>,
    rope_sin: Array2<f64>,
    attn_scale: f64,
    checksum: String,
}

struct LayerCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    z: Array2<f64>,
    lora_q: Option<LoraActivation>,
    lora_v: Option<LoraActivation>,
}

pub struct ToyLmCache {
    layers: Vec<LayerCache>,
}

/// Rotary frequencies, geometric from 1 rad/step down to `pi / (2 * max_positions)`.
fn rope_frequencies(pairs: usize, max_positions: usize) -> Vec<f64> {
    let lo = std::f64::consts::PI / (2.0 * max_positions as f64);
    if pairs == 1 {
        return vec![lo];
    }
    (0..pairs)
        .map(|m| (lo.ln() * m as f64 / (pairs - 1) as f64).exp())
        .collect()
}

/// Smallest drop from the zero-offset peak of `sum_m cos(theta_m * delta)`.
fn offset_margin(freqs: &[f64], max_positions: usize) -> f64 {
    let peak = freqs.len() as f64;
    let runner_up = (1..max_positions)
        .map(|d| freqs.iter().map(|w| (w * d as f64).cos()).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max);
    peak - runner_up
}

impl ToyLm {
    pub fn new(cfg: ToyLmConfig) -> Result<Self> {
        if cfg.d_model == 0 || cfg.vocab_size == 0 || cfg.n_layers == 0 {
            return Err(Error::InvalidInput("toy LM sizes must be positive".into()));
        }
        if cfg.n_kv_heads == 0 || !cfg.n_heads.is_multiple_of(cfg.n_kv_heads) {
            return Err(Error::InvalidInput(format!(
                "{} query heads cannot share {} kv heads",
                cfg.n_heads, cfg.n_kv_heads
            )));
        }
        for id in [cfg.anchor_id, cfg.eos_id, cfg.pad_id] {
            if id as usize >= cfg.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "special token {id} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
        }
        let lay = Layout::new(&cfg)?;
        let d = cfg.d_model;
        let hd = lay.head_dim;
        let (nq, nkv) = (cfg.n_heads, cfg.n_kv_heads);
        let mut rng = SeededRng::derive(cfg.seed, "toy_lm/weights");
        let sigma = cfg.noise_std;
        let mut noise =
            |shape: (usize, usize)| Array2::from_shape_simple_fn(shape, || rng.normal() * sigma);

        let freqs = rope_frequencies(lay.pairs, cfg.max_positions);
        let mut rope_cos = Array2::zeros((cfg.max_positions, lay.pairs));
        let mut rope_sin = Array2::zeros((cfg.max_positions, lay.pairs));
        let mut pos_embed = Array2::zeros((cfg.max_positions, d));
        for t in 0..cfg.max_positions {
            for (m, w) in freqs.iter().enumerate() {
                let (sn, cs) = (w * t as f64).sin_cos();
                rope_cos[[t, m]] = cs;
                rope_sin[[t, m]] = sn;
                pos_embed[[t, 2 * m]] = cs;
                pos_embed[[t, 2 * m + 1]] = sn;
            }
        }

        let mut code_rng = SeededRng::derive(cfg.seed, "toy_lm/codes");
        let mut codes =
            Array2::from_shape_simple_fn((cfg.vocab_size, lay.width), || code_rng.normal());
        for mut row in codes.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }

        let mut token_embed = noise((cfg.vocab_size, d));
        token_embed
            .slice_mut(s![.., lay.content..lay.content + lay.width])
            .zip_mut_with(&codes, |e, c| *e += c);
        token_embed[[cfg.anchor_id as usize, lay.mark]] += 1.0;

        let copy_gain = 8.0;
        let mut unembed = noise((cfg.vocab_size, d));
        unembed
            .slice_mut(s![.., lay.copied..lay.copied + lay.width])
            .zip_mut_with(&codes, |u, c| *u += copy_gain * c);

        let attn_scale = 1.0 / (hd as f64).sqrt();
        // Anchor gets a logit of 24 over unmarked positions.
        let locate = (24.0 / attn_scale).sqrt();
        // Scores drop by at least 16 one step away from the target offset.
        let lookback = (16.0 / offset_margin(&freqs, cfg.max_positions) / attn_scale).sqrt();

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for li in 0..cfg.n_layers {
            let mut layer = Layer {
                wq: noise((nq * hd, d)),
                bq: noise((1, nq * hd)).into_shape_with_order(nq * hd).unwrap(),
                wk: noise((nkv * hd, d)),
                bk: noise((1, nkv * hd))
                    .into_shape_with_order(nkv * hd)
                    .unwrap(),
                wv: noise((nkv * hd, d)),
                bv: noise((1, nkv * hd))
                    .into_shape_with_order(nkv * hd)
                    .unwrap(),
                wo: noise((d, nq * hd)),
                bo: noise((1, d)).into_shape_with_order(d).unwrap(),
                w1: noise((cfg.mlp_hidden, d)),
                b1: noise((1, cfg.mlp_hidden))
                    .into_shape_with_order(cfg.mlp_hidden)
                    .unwrap(),
                w2: noise((d, cfg.mlp_hidden)),
                b2: noise((1, d)).into_shape_with_order(d).unwrap(),
            };
            if li == 0 {
                let u = 2 * lay.pairs;
                layer.bq[u] += locate;
                layer.wk[[u, lay.mark]] += locate;
                for j in 0..2 * lay.pairs {
                    layer.wv[[j, j]] += 1.0;
                    layer.wo[[lay.anchor_pos + j, j]] += 1.0;
                }
            }
            if li == cfg.n_layers - 1 && cfg.n_layers > 1 {
                for m in 0..lay.pairs {
                    layer.wq[[2 * m, lay.anchor_pos + 2 * m]] += lookback;
                    layer.wq[[2 * m + 1, lay.anchor_pos + 2 * m + 1]] -= lookback;
                    layer.bk[2 * m] += lookback;
                }
                for j in 0..lay.width {
                    layer.wv[[j, lay.content + j]] += 1.0;
                    layer.wo[[lay.copied + j, j]] += 1.0;
                }
            }
            layers.push(layer);
        }

        let mut lm = Self {
            cfg,
            layout: lay,
            token_embed,
            pos_embed,
            layers,
            unembed,
            rope_cos,
            rope_sin,
            attn_scale,
            checksum: String::new(),
        };
        lm.checksum = lm.compute_checksum();
        Ok(lm)
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.cfg
    }

    pub fn head_dim(&self) -> usize {
        self.layout.head_dim
    }

    /// The input embedding an ideal prefix position would need for the copy
    /// circuit to emit `token`.
    pub fn content_embedding(&self, token: TokenId) -> Array1<f64> {
        let lay = &self.layout;
        let mut e = Array1::zeros(self.cfg.d_model);
        e.slice_mut(s![lay.content..lay.content + lay.width])
            .assign(
                &self
                    .token_embed
                    .slice(s![token as usize, lay.content..lay.content + lay.width]),
            );
        e
    }

    fn compute_checksum(&self) -> String {
        let mut parts: Vec<&[f64]> = vec![
            self.token_embed.as_slice().unwrap(),
            self.pos_embed.as_slice().unwrap(),
            self.unembed.as_slice().unwrap(),
        ];
        for l in &self.layers {
            parts.extend(l.tensors());
        }
        checksum_f64(parts)
    }

    fn rotate(&self, m: &mut Array2<f64>, blocks: usize, inverse: bool) {
        let hd = self.layout.head_dim;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (t, mut row) in m.rows_mut().into_iter().enumerate() {
            for b in 0..blocks {
                for p in 0..self.layout.pairs {
                    let (c, sn) = (self.rope_cos[[t, p]], sign * self.rope_sin[[t, p]]);
                    let i = b * hd + 2 * p;
                    let (x0, x1) = (row[i], row[i + 1]);
                    row[i] = x0 * c - x1 * sn;
                    row[i + 1] = x0 * sn + x1 * c;
                }
            }
        }
    }

    fn forward_impl(
        &self,
        x: ArrayView2<f64>,
        adapters: Option<&LoraAdapters>,
        mut dropout: Option<&mut Dropout>,
    ) -> (Array2<f64>, ToyLmCache) {
        let t = x.nrows();
        assert!(
            t <= self.cfg.max_positions,
            "sequence of {t} exceeds context {}",
            self.cfg.max_positions
        );
        assert_eq!(x.ncols(), self.cfg.d_model, "embedding width");
        let hd = self.layout.head_dim;
        let (nq, nkv) = (self.cfg.n_heads, self.cfg.n_kv_heads);
        let group = nq / nkv;
        let scale = adapters.map(|a| a.scaling()).unwrap_or(0.0);

        let mut h = &x + &self.pos_embed.slice(s![..t, ..]);
        let mut caches = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let mut q = h.dot(&layer.wq.t()) + &layer.bq;
            let lora_q = adapters
                .and_then(|a| a.get(li, LoraTarget::Query))
                .map(|ad| lora_forward(ad, scale, h.view(), &mut q, dropout.as_deref_mut()));
            let mut k = h.dot(&layer.wk.t()) + &layer.bk;
            let mut v = h.dot(&layer.wv.t()) + &layer.bv;
            let lora_v = adapters
                .and_then(|a| a.get(li, LoraTarget::Value))
                .map(|ad| lora_forward(ad, scale, h.view(), &mut v, dropout.as_deref_mut()));
            self.rotate(&mut q, nq, false);
            self.rotate(&mut k, nkv, false);

            let mut ctx = Array2::zeros((t, nq * hd));
            let mut probs = Vec::with_capacity(nq);
            for a in 0..nq {
                let g = a / group;
                let qa = q.slice(s![.., a * hd..(a + 1) * hd]);
                let kg = k.slice(s![.., g * hd..(g + 1) * hd]);
                let vg = v.slice(s![.., g * hd..(g + 1) * hd]);
                let mut p = qa.dot(&kg.t()) * self.attn_scale;
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let max = row
                        .slice(s![..=i])
                        .fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                    let mut sum = 0.0;
                    for (j, v) in row.iter_mut().enumerate() {
                        if j <= i {
                            *v = (*v - max).exp();
                            sum += *v;
                        } else {
                            *v = 0.0;
                        }
                    }
                    row /= sum;
                }
                ctx.slice_mut(s![.., a * hd..(a + 1) * hd])
                    .assign(&p.dot(&vg));
                probs.push(p);
            }
            let h_mid = &h + &(ctx.dot(&layer.wo.t()) + &layer.bo);
            let z = h_mid.dot(&layer.w1.t()) + &layer.b1;
            let r = z.mapv(|v| v.max(0.0));
            h = &h_mid + &(r.dot(&layer.w2.t()) + &layer.b2);
            caches.push(LayerCache {
                q,
                k,
                v,
                probs,
                z,
                lora_q,
                lora_v,
            });
        }
        (h.dot(&self.unembed.t()), ToyLmCache { layers: caches })
    }

    fn backward_impl(
        &self,
        cache: &ToyLmCache,
        dlogits: ArrayView2<f64>,
        adapters: Option<&LoraAdapters>,
        mut grads: Option<&mut LoraAdapters>,
    ) -> Array2<f64> {
        let hd = self.layout.head_dim;
        let (nq, nkv) = (self.cfg.n_heads, self.cfg.n_kv_heads);
        let group = nq / nkv;
        let t = dlogits.nrows();
        let scale = adapters.map(|a| a.scaling()).unwrap_or(0.0);

        let mut dh = dlogits.dot(&self.unembed);
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let c = &cache.layers[li];
            let mut dz = dh.dot(&layer.w2);
            Zip::from(&mut dz).and(&c.z).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
            let dh_mid = &dh + &dz.dot(&layer.w1);
            let dctx = dh_mid.dot(&layer.wo);

            let mut dq = Array2::zeros((t, nq * hd));
            let mut dk = Array2::zeros((t, nkv * hd));
            let mut dv = Array2::zeros((t, nkv * hd));
            for a in 0..nq {
                let g = a / group;
                let p = &c.probs[a];
                let dctx_a = dctx.slice(s![.., a * hd..(a + 1) * hd]);
                let vg = c.v.slice(s![.., g * hd..(g + 1) * hd]);
                let dp = dctx_a.dot(&vg.t());
                dv.slice_mut(s![.., g * hd..(g + 1) * hd])
                    .scaled_add(1.0, &p.t().dot(&dctx_a));
                let inner = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = p * &(&dp - &inner) * self.attn_scale;
                let qa = c.q.slice(s![.., a * hd..(a + 1) * hd]);
                let kg = c.k.slice(s![.., g * hd..(g + 1) * hd]);
                dq.slice_mut(s![.., a * hd..(a + 1) * hd])
                    .scaled_add(1.0, &ds.dot(&kg));
                dk.slice_mut(s![.., g * hd..(g + 1) * hd])
                    .scaled_add(1.0, &ds.t().dot(&qa));
            }
            self.rotate(&mut dq, nq, true);
            self.rotate(&mut dk, nkv, true);

            let mut dh_in = dh_mid;
            dh_in += &dq.dot(&layer.wq);
            dh_in += &dk.dot(&layer.wk);
            dh_in += &dv.dot(&layer.wv);
            for (act, target, dout) in [
                (&c.lora_q, LoraTarget::Query, &dq),
                (&c.lora_v, LoraTarget::Value, &dv),
            ] {
                if let (Some(act), Some(ad)) = (act, adapters.and_then(|a| a.get(li, target))) {
                    let slot = grads.as_deref_mut().and_then(|g| g.get_mut(li, target));
                    dh_in += &lora_backward(ad, scale, act, dout.view(), slot);
                }
            }
            dh = dh_in;
        }
        dh
    }
}

impl LanguageModel for ToyLm {
    fn id(&self) -> String {
        format!(
            "toy-lm/d{}-v{}-l{}-s{}-{}",
            self.cfg.d_model,
            self.cfg.vocab_size,
            self.cfg.n_layers,
            self.cfg.seed,
            &self.checksum[..12]
        )
    }

    fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn eos_id(&self) -> TokenId {
        self.cfg.eos_id
    }

    fn pad_id(&self) -> TokenId {
        self.cfg.pad_id
    }

    fn max_positions(&self) -> usize {
        self.cfg.max_positions
    }

    fn attention_geometry(&self) -> Option<AttentionGeometry> {
        let hd = self.layout.head_dim;
        Some(AttentionGeometry::uniform(
            self.cfg.n_layers,
            ProjectionShape {
                in_dim: self.cfg.d_model,
                out_dim: self.cfg.n_heads * hd,
            },
            ProjectionShape {
                in_dim: self.cfg.d_model,
                out_dim: self.cfg.n_kv_heads * hd,
            },
        ))
    }

    fn embed(&self, ids: &[TokenId]) -> EmbeddingMatrix {
        let mut out = Array2::zeros((ids.len(), self.cfg.d_model));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            row.assign(&self.token_embed.row(id as usize));
        }
        out
    }

    fn logits(&self, embeddings: ArrayView2<f64>) -> Array2<f64> {
        self.forward_impl(embeddings, None, None).0
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }
}

impl DifferentiableLm for ToyLm {
    type Cache = ToyLmCache;

    fn forward_with(
        &self,
        embeddings: ArrayView2<f64>,
        adapters: Option<&LoraAdapters>,
        dropout: Option<&mut Dropout>,
    ) -> (Array2<f64>, ToyLmCache) {
        self.forward_impl(embeddings, adapters, dropout)
    }

    fn backward(
        &self,
        cache: &ToyLmCache,
        dlogits: ArrayView2<f64>,
        adapters: Option<&LoraAdapters>,
        adapter_grads: Option<&mut LoraAdapters>,
    ) -> Array2<f64> {
        self.backward_impl(cache, dlogits, adapters, adapter_grads)
    }
}
