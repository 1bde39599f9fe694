//! Policy parameters as one flat vector partitioned into a shared encoder
//! segment plus one header/decoder segment per COP family. Every gradient
//! aligns with this layout so influence computations can slice it.

mod policy;

pub use policy::{
    forward_policy, policy_gradient_loss, rollout, sample_episodes, surrogate_loss_grad,
    DecodeMode, Episode,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::rng;
use crate::task::{CopKind, TaskRegistry};

/// Extra decoder-context scalars beside the two embeddings.
pub const STATE_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: usize,
    pub depth: usize,
    pub init_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { hidden: 16, depth: 2, init_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopSegment {
    pub cop: CopKind,
    pub range: Range<usize>,
    pub header_w: Range<usize>,
    pub header_b: Range<usize>,
    pub dec_u: Range<usize>,
    pub dec_bu: Range<usize>,
    pub dec_b: Range<usize>,
}

/// Index map from (segment, offset) to flat position. Segments are disjoint
/// and cover the vector exactly: shared first, then one per family in
/// registry order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub hidden: usize,
    pub depth: usize,
    shared: Range<usize>,
    segments: Vec<CopSegment>,
    total: usize,
}

impl Layout {
    pub fn new(spec: &ModelSpec, registry: &TaskRegistry) -> Result<Layout> {
        if spec.hidden == 0 || spec.depth == 0 {
            return Err(Error::Config("model hidden width and depth must be positive".into()));
        }
        let h = spec.hidden;
        let shared_len = spec.depth * (h * h + h);
        let mut offset = shared_len;
        let mut segments = Vec::new();
        for &cop in registry.cops() {
            let start = offset;
            let d = cop.input_dim();
            let header_w = start..start + h * d;
            let header_b = header_w.end..header_w.end + h;
            let ctx = 2 * h + STATE_DIM;
            let dec_u = header_b.end..header_b.end + h * ctx;
            let dec_bu = dec_u.end..dec_u.end + h;
            let dec_b = dec_bu.end..dec_bu.end + h * h;
            offset = dec_b.end;
            segments.push(CopSegment {
                cop,
                range: start..offset,
                header_w,
                header_b,
                dec_u,
                dec_bu,
                dec_b,
            });
        }
        Ok(Layout { hidden: h, depth: spec.depth, shared: 0..shared_len, segments, total: offset })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn shared(&self) -> Range<usize> {
        self.shared.clone()
    }

    pub fn segments(&self) -> &[CopSegment] {
        &self.segments
    }

    pub fn segment(&self, cop_index: usize) -> &CopSegment {
        &self.segments[cop_index]
    }

    pub fn cop_index(&self, cop: CopKind) -> Result<usize> {
        self.segments
            .iter()
            .position(|s| s.cop == cop)
            .ok_or_else(|| Error::Config(format!("model has no segment for family '{cop}'")))
    }

    /// Encoder layer `l` weight and bias ranges within the shared segment.
    pub fn enc_layer(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let h = self.hidden;
        let base = l * (h * h + h);
        (base..base + h * h, base + h * h..base + h * h + h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    /// Supported on the shared segment plus one family segment.
    FullForCop(usize),
    SharedOnly,
}

/// A real vector aligned with a [`Layout`], tagged with the segments it may
/// be non-zero on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub scope: Scope,
}

impl GradientVector {
    pub fn zeros(len: usize, scope: Scope) -> GradientVector {
        GradientVector { values: vec![0.0; len], scope }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += coeff * other`.
    pub fn add_scaled(&mut self, other: &GradientVector, coeff: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += coeff * b;
        }
    }

    pub fn scale(&mut self, coeff: f64) {
        for a in &mut self.values {
            *a *= coeff;
        }
    }

    /// Zeroes every coordinate outside `shared`.
    pub fn project_shared(&self, shared: Range<usize>) -> GradientVector {
        let mut values = vec![0.0; self.values.len()];
        values[shared.clone()].copy_from_slice(&self.values[shared]);
        GradientVector { values, scope: Scope::SharedOnly }
    }
}

/// Cosine similarity with a zero floor: either operand shorter than `floor`
/// yields 0 (no information, neutral influence).
pub fn cosine(a: &GradientVector, b: &GradientVector, floor: f64) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na < floor || nb < floor {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub values: Vec<f64>,
    layout: Layout,
}

impl ParamStore {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn slice(&self, r: Range<usize>) -> &[f64] {
        &self.values[r]
    }

    /// Same layout, different point in parameter space.
    pub fn with_values(&self, values: Vec<f64>) -> ParamStore {
        debug_assert_eq!(values.len(), self.layout.total());
        ParamStore { values, layout: self.layout.clone() }
    }
}

/// Uniform init in `[-s, s]` with `s = init_scale / sqrt(fan_in)` per weight
/// block; biases start at zero. Deterministic for a fixed seed.
pub fn init_params(spec: &ModelSpec, registry: &TaskRegistry, seed: u64) -> Result<ParamStore> {
    let layout = Layout::new(spec, registry)?;
    let mut values = vec![0.0; layout.total()];
    let mut rng = rng::stream(seed, "init");
    let h = layout.hidden;
    let mut fill = |values: &mut Vec<f64>, r: Range<usize>, fan_in: usize| {
        let s = spec.init_scale / (fan_in as f64).sqrt();
        for v in &mut values[r] {
            *v = (rng.random::<f64>() * 2.0 - 1.0) * s;
        }
    };
    for l in 0..layout.depth {
        let (w, _b) = layout.enc_layer(l);
        fill(&mut values, w, h);
    }
    for i in 0..layout.segments().len() {
        let seg = layout.segment(i).clone();
        fill(&mut values, seg.header_w, seg.cop.input_dim());
        fill(&mut values, seg.dec_u, 2 * h + STATE_DIM);
        fill(&mut values, seg.dec_b, h);
    }
    Ok(ParamStore { values, layout })
}

/// Restriction of a full gradient to the shared segment (the cross-family
/// influence channel).
pub fn project_shared(grad: &GradientVector, layout: &Layout) -> GradientVector {
    grad.project_shared(layout.shared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskRegistry;

    fn registry() -> TaskRegistry {
        TaskRegistry::new(&[(CopKind::Tsp, vec![5]), (CopKind::Kp, vec![10])]).unwrap()
    }

    #[test]
    fn layout_segments_are_disjoint_and_cover() {
        let layout = Layout::new(&ModelSpec::default(), &registry()).unwrap();
        let mut touched = vec![0u8; layout.total()];
        for i in layout.shared() {
            touched[i] += 1;
        }
        for seg in layout.segments() {
            for i in seg.range.clone() {
                touched[i] += 1;
            }
            // Sub-blocks tile the segment exactly.
            let sub = seg.header_w.len()
                + seg.header_b.len()
                + seg.dec_u.len()
                + seg.dec_bu.len()
                + seg.dec_b.len();
            assert_eq!(sub, seg.range.len());
        }
        assert!(touched.iter().all(|c| *c == 1));
    }

    #[test]
    fn init_is_deterministic_and_validates() {
        let spec = ModelSpec::default();
        let a = init_params(&spec, &registry(), 7).unwrap();
        let b = init_params(&spec, &registry(), 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&spec, &registry(), 8).unwrap();
        assert_ne!(a.values, c.values);
        assert_eq!(a.layout().segments().len(), 2);

        let bad = ModelSpec { hidden: 0, ..spec };
        assert!(init_params(&bad, &registry(), 7).is_err());
    }

    #[test]
    fn shared_projection_is_orthogonal_decomposition() {
        let layout = Layout::new(&ModelSpec::default(), &registry()).unwrap();
        let mut g = GradientVector::zeros(layout.total(), Scope::FullForCop(0));
        let mut x = 0.37_f64;
        for v in &mut g.values {
            x = (x * 997.0).fract();
            *v = x - 0.5;
        }
        let p = project_shared(&g, &layout);
        let mut rest = g.clone();
        rest.add_scaled(&p, -1.0);
        let lhs = p.norm().powi(2) + rest.norm().powi(2);
        assert!((lhs - g.norm().powi(2)).abs() < 1e-12 * g.norm().powi(2).max(1.0));

        let zero = GradientVector::zeros(layout.total(), Scope::FullForCop(0));
        assert_eq!(project_shared(&zero, &layout).norm(), 0.0);

        // Support only on a task segment projects to zero.
        let mut task_only = GradientVector::zeros(layout.total(), Scope::FullForCop(1));
        for i in layout.segment(1).range.clone() {
            task_only.values[i] = 1.0;
        }
        assert_eq!(project_shared(&task_only, &layout).norm(), 0.0);
        assert!(project_shared(&g, &layout).norm() <= g.norm());
    }
}
