//! Low-rank adapters on attention query/value projections.
//!
//! A wrapped projection computes `W x + (alpha / r) * B A dropout(x)` with
//! `A` (r x in) seeded Gaussian and `B` (out x r) zero, so a freshly wrapped
//! model reproduces the base model exactly.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::backends::{
    AttentionGeometry, DifferentiableLm, LanguageModel, ProjectionShape, TokenId,
};
use crate::datamodel::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 8,
            alpha: 32.0,
            dropout: 0.05,
            targets: vec![LoraTarget::Query, LoraTarget::Value],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::InvalidInput("LoRA rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput(format!(
                "LoRA dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }
}

/// Shapes of every map LoRA would wrap, in (layer, target) order.
pub fn lora_targets(
    geometry: &AttentionGeometry,
    targets: &[LoraTarget],
) -> Vec<(usize, LoraTarget, ProjectionShape)> {
    let mut out = Vec::new();
    for (layer, shapes) in geometry.layers.iter().enumerate() {
        for t in [LoraTarget::Query, LoraTarget::Value] {
            if targets.contains(&t) {
                let shape = match t {
                    LoraTarget::Query => shapes.query,
                    LoraTarget::Value => shapes.value,
                };
                out.push((layer, t, shape));
            }
        }
    }
    out
}

/// Trainable parameters added by LoRA: `sum r * (in + out)` over wrapped maps.
pub fn lora_param_count_for(shapes: &[ProjectionShape], r: usize) -> usize {
    shapes.iter().map(|s| r * (s.in_dim + s.out_dim)).sum()
}

pub fn lora_param_count(geometry: &AttentionGeometry, cfg: &LoraConfig) -> usize {
    let shapes: Vec<ProjectionShape> = lora_targets(geometry, &cfg.targets)
        .into_iter()
        .map(|(_, _, s)| s)
        .collect();
    lora_param_count_for(&shapes, cfg.r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layer: usize,
    pub target: LoraTarget,
    /// r x in
    pub a: Array2<f64>,
    /// out x r
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters {
    pub r: usize,
    pub alpha: f64,
    pub adapters: Vec<LoraAdapter>,
}

impl LoraAdapters {
    pub fn init(geometry: &AttentionGeometry, cfg: &LoraConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::derive(seed, "lora/init");
        let std = 1.0 / cfg.r as f64;
        let adapters = lora_targets(geometry, &cfg.targets)
            .into_iter()
            .map(|(layer, target, shape)| LoraAdapter {
                layer,
                target,
                a: Array2::from_shape_simple_fn((cfg.r, shape.in_dim), || rng.normal() * std),
                b: Array2::zeros((shape.out_dim, cfg.r)),
            })
            .collect();
        Ok(Self {
            r: cfg.r,
            alpha: cfg.alpha,
            adapters,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn get(&self, layer: usize, target: LoraTarget) -> Option<&LoraAdapter> {
        self.adapters
            .iter()
            .find(|a| a.layer == layer && a.target == target)
    }

    pub fn get_mut(&mut self, layer: usize, target: LoraTarget) -> Option<&mut LoraAdapter> {
        self.adapters
            .iter_mut()
            .find(|a| a.layer == layer && a.target == target)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            r: self.r,
            alpha: self.alpha,
            adapters: self
                .adapters
                .iter()
                .map(|a| LoraAdapter {
                    layer: a.layer,
                    target: a.target,
                    a: Array2::zeros(a.a.raw_dim()),
                    b: Array2::zeros(a.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(|a| a.a.len() + a.b.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.adapters
            .iter()
            .flat_map(|a| [a.a.as_slice().unwrap(), a.b.as_slice().unwrap()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.adapters
            .iter_mut()
            .flat_map(|a| [a.a.as_slice_mut().unwrap(), a.b.as_slice_mut().unwrap()])
            .collect()
    }

    pub fn add_assign(&mut self, other: &LoraAdapters) {
        for (x, y) in self.adapters.iter_mut().zip(&other.adapters) {
            x.a += &y.a;
            x.b += &y.b;
        }
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Train-time dropout on the adapter input path.
pub struct Dropout<'r> {
    p: f64,
    rng: &'r mut SeededRng,
}

impl<'r> Dropout<'r> {
    pub fn new(p: f64, rng: &'r mut SeededRng) -> Self {
        Self { p, rng }
    }

    /// Inverted-dropout mask: entries are 0 or `1 / (1 - p)`.
    pub fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        if self.p <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.p);
        let p = self.p;
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if self.rng.uniform() < p {
                0.0
            } else {
                keep
            }
        }))
    }
}

/// Forward intermediates of one adapter application.
#[derive(Debug, Clone)]
pub struct LoraActivation {
    input: Array2<f64>,
    mask: Option<Array2<f64>>,
    low: Array2<f64>,
}

/// Adds `scale * B A mask(x)` to `out` and returns what backward needs.
pub fn lora_forward(
    adapter: &LoraAdapter,
    scale: f64,
    x: ArrayView2<f64>,
    out: &mut Array2<f64>,
    dropout: Option<&mut Dropout>,
) -> LoraActivation {
    let mask = dropout.and_then(|d| d.mask(x.nrows(), x.ncols()));
    let input = match &mask {
        Some(m) => &x * m,
        None => x.to_owned(),
    };
    let low = input.dot(&adapter.a.t());
    out.scaled_add(scale, &low.dot(&adapter.b.t()));
    LoraActivation { input, mask, low }
}

/// Accumulates `dA`, `dB` and returns the contribution to `dx`.
pub fn lora_backward(
    adapter: &LoraAdapter,
    scale: f64,
    act: &LoraActivation,
    dout: ArrayView2<f64>,
    grad: Option<&mut LoraAdapter>,
) -> Array2<f64> {
    let dlow = dout.dot(&adapter.b) * scale;
    if let Some(g) = grad {
        g.b.scaled_add(scale, &dout.t().dot(&act.low));
        g.a += &dlow.t().dot(&act.input);
    }
    let mut dx = dlow.dot(&adapter.a);
    if let Some(m) = &act.mask {
        Zip::from(&mut dx).and(m).for_each(|d, &k| *d *= k);
    }
    dx
}

/// A frozen LM viewed through a set of adapters.
pub struct LoraLm<'a, L> {
    base: &'a L,
    pub adapters: LoraAdapters,
}

impl<'a, L: DifferentiableLm> LoraLm<'a, L> {
    pub fn new(base: &'a L, adapters: LoraAdapters) -> Self {
        Self { base, adapters }
    }

    pub fn base(&self) -> &'a L {
        self.base
    }

    /// Drops the adapters, returning the untouched base model.
    pub fn remove(self) -> &'a L {
        self.base
    }
}

pub fn apply_lora<'a, L: DifferentiableLm>(
    lm: &'a L,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<LoraLm<'a, L>> {
    let geometry = lm.attention_geometry().ok_or_else(|| {
        Error::InvalidInput(format!("LM {} exposes no attention geometry", lm.id()))
    })?;
    Ok(LoraLm::new(lm, LoraAdapters::init(&geometry, cfg, seed)?))
}

impl<L: DifferentiableLm> LanguageModel for LoraLm<'_, L> {
    fn id(&self) -> String {
        format!("{}+lora(r={})", self.base.id(), self.adapters.r)
    }
    fn d_model(&self) -> usize {
        self.base.d_model()
    }
    fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }
    fn eos_id(&self) -> TokenId {
        self.base.eos_id()
    }
    fn pad_id(&self) -> TokenId {
        self.base.pad_id()
    }
    fn max_positions(&self) -> usize {
        self.base.max_positions()
    }
    fn attention_geometry(&self) -> Option<AttentionGeometry> {
        self.base.attention_geometry()
    }
    fn embed(&self, ids: &[TokenId]) -> EmbeddingMatrix {
        self.base.embed(ids)
    }
    fn logits(&self, embeddings: ArrayView2<f64>) -> Array2<f64> {
        self.base
            .forward_with(embeddings, Some(&self.adapters), None)
            .0
    }
    fn checksum(&self) -> String {
        self.base.checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::LayerAttentionShape;

    fn grouped_geometry() -> AttentionGeometry {
        AttentionGeometry::uniform(
            26,
            ProjectionShape {
                in_dim: 2048,
                out_dim: 2048,
            },
            ProjectionShape {
                in_dim: 2048,
                out_dim: 512,
            },
        )
    }

    #[test]
    fn param_count_examples() {
        let cfg = LoraConfig::default();
        assert_eq!(lora_param_count(&grouped_geometry(), &cfg), 1_384_448);
        let sym = AttentionGeometry::uniform(
            24,
            ProjectionShape {
                in_dim: 2048,
                out_dim: 2048,
            },
            ProjectionShape {
                in_dim: 2048,
                out_dim: 2048,
            },
        );
        assert_eq!(lora_param_count(&sym, &cfg), 1_572_864);
        let one = [ProjectionShape {
            in_dim: 4,
            out_dim: 4,
        }];
        assert_eq!(lora_param_count_for(&one, 2), 16);
        assert_eq!(lora_param_count_for(&[], 8), 0);
        let empty = AttentionGeometry { layers: vec![] };
        assert_eq!(lora_param_count(&empty, &cfg), 0);
    }

    #[test]
    fn init_matches_count_and_zero_b() {
        let g = AttentionGeometry {
            layers: vec![LayerAttentionShape {
                query: ProjectionShape {
                    in_dim: 6,
                    out_dim: 6,
                },
                value: ProjectionShape {
                    in_dim: 6,
                    out_dim: 3,
                },
            }],
        };
        let cfg = LoraConfig {
            r: 2,
            ..Default::default()
        };
        let a = LoraAdapters::init(&g, &cfg, 1).unwrap();
        assert_eq!(a.param_count(), lora_param_count(&g, &cfg));
        assert!(a.adapters.iter().all(|x| x.b.iter().all(|v| *v == 0.0)));
        assert!(a.adapters.iter().any(|x| x.a.iter().any(|v| *v != 0.0)));
        assert_eq!(cfg.scaling(), 16.0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(LoraConfig {
            r: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LoraConfig {
            dropout: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
