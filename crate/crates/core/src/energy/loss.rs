use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::hyper::{Ablations, GuidanceHyperparams};
use super::kernel::{square_side, GaussianKernel};
use super::EnergyFunction;
use crate::attention::AggregatedAttention;
use crate::error::{Error, Result};
use crate::prompt_graph::ObjectGraph;

/// Per-object loss terms and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_object_binding: BTreeMap<usize, f64>,
    pub per_object_intensity: BTreeMap<usize, f64>,
    pub total: f64,
    pub lambda: f64,
    /// Set when the graph has no objects; the total is then 0.
    #[serde(default)]
    pub degraded: bool,
}

impl LossBreakdown {
    pub fn degraded(lambda: f64) -> Self {
        Self {
            per_object_binding: BTreeMap::new(),
            per_object_intensity: BTreeMap::new(),
            total: 0.0,
            lambda,
            degraded: true,
        }
    }

    pub fn binding_sum(&self) -> f64 {
        self.per_object_binding.values().sum()
    }

    /// `Σ_s L_b + λ L_n` recomputed from the stored terms.
    pub fn recompute_total(&self) -> f64 {
        self.per_object_binding
            .iter()
            .map(|(s, b)| b + self.lambda * self.per_object_intensity.get(s).copied().unwrap_or(0.0))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Tokens that act as negatives for object `s`: everything that is neither
/// `s` nor one of its modifiers (other objects, their modifiers, function
/// words and external tokens included).
pub fn negatives(graph: &ObjectGraph, s: usize, token_count: usize) -> Vec<usize> {
    let mods = graph.modifiers_of(s);
    (0..token_count)
        .filter(|&l| l != s && !mods.contains(&l))
        .collect()
}

/// Binding loss of object `s` evaluated directly from a table of pairwise
/// energies `energies[l] = f(A_s, A_l)` (the entry at `s` is ignored).
pub fn binding_loss_from_energies(
    energies: &[f64],
    graph: &ObjectGraph,
    s: usize,
    ablations: Ablations,
) -> f64 {
    if ablations.no_binding {
        return 0.0;
    }
    let mods = graph.modifiers_of(s);
    let negs = negatives(graph, s, energies.len());
    let attraction = if mods.is_empty() {
        None
    } else {
        Some(mods.iter().map(|&m| energies[m]).sum::<f64>() / mods.len() as f64)
    };
    let mut loss = attraction.map_or(0.0, |a| -a);
    if !ablations.no_repulsion && !negs.is_empty() {
        let repulsion: f64 = negs
            .iter()
            .map(|&l| match (ablations.no_object_conditioning, attraction) {
                (true, Some(a)) => 0.5 * (energies[l] + a),
                _ => energies[l],
            })
            .sum::<f64>()
            / negs.len() as f64;
        loss += repulsion;
    }
    loss
}

/// Partial derivatives of the binding loss of `s` with respect to each
/// pairwise energy `f(A_s, A_l)`; the loss is linear in these energies.
pub fn binding_coefficients(
    graph: &ObjectGraph,
    s: usize,
    token_count: usize,
    ablations: Ablations,
) -> Vec<(usize, f64)> {
    if ablations.no_binding {
        return Vec::new();
    }
    let mods = graph.modifiers_of(s);
    let negs = negatives(graph, s, token_count);
    let repel = !ablations.no_repulsion && !negs.is_empty();
    let mut out = Vec::with_capacity(mods.len() + negs.len());
    let pull = if !mods.is_empty() {
        -1.0 / mods.len() as f64
    } else {
        0.0
    };
    let mixed = repel && ablations.no_object_conditioning && !mods.is_empty();
    for &m in mods {
        out.push((m, if mixed { 0.5 * pull } else { pull }));
    }
    if repel {
        let push = 1.0 / negs.len() as f64;
        for &l in &negs {
            out.push((l, if mixed { 0.5 * push } else { push }));
        }
    }
    out.sort_by_key(|&(l, _)| l);
    out
}

/// Object-centric attention loss: binding term per object plus the weighted
/// intensity regularizer.
#[derive(Clone)]
pub struct ObjectCentricLoss {
    energy: Arc<dyn EnergyFunction>,
    lambda: f64,
    ablations: Ablations,
    kernel: GaussianKernel,
}

/// Loss value with gradients on the aggregated features and scores.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub breakdown: LossBreakdown,
    pub grad_features: Array2<f64>,
    pub grad_scores: Array2<f64>,
}

impl std::fmt::Debug for ObjectCentricLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ObjectCentricLoss")
            .field("energy", &self.energy.name())
            .field("lambda", &self.lambda)
            .field("ablations", &self.ablations)
            .finish()
    }
}

impl ObjectCentricLoss {
    pub fn new(energy: Arc<dyn EnergyFunction>, lambda: f64, ablations: Ablations) -> Self {
        Self {
            energy,
            lambda,
            ablations,
            kernel: GaussianKernel::default(),
        }
    }

    pub fn from_hyper(hyper: &GuidanceHyperparams) -> Result<Self> {
        Ok(Self::new(hyper.energy_fn()?, hyper.lambda, hyper.ablations))
    }

    pub fn energy(&self) -> &dyn EnergyFunction {
        self.energy.as_ref()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn ablations(&self) -> Ablations {
        self.ablations
    }

    pub fn kernel(&self) -> &GaussianKernel {
        &self.kernel
    }

    fn check(&self, features: &Array2<f64>, graph: &ObjectGraph) -> Result<()> {
        if graph.token_count != features.nrows() {
            return Err(Error::input(format!(
                "graph covers {} tokens but attention has {}",
                graph.token_count,
                features.nrows()
            )));
        }
        graph.check()
    }

    /// Table of `f(A_s, A_l)` for every token `l` (`NaN` at `l = s`).
    pub fn pair_energies(&self, features: &Array2<f64>, s: usize) -> Result<Vec<f64>> {
        (0..features.nrows())
            .map(|l| {
                if l == s {
                    Ok(f64::NAN)
                } else {
                    self.energy.energy(features.row(s), features.row(l))
                }
            })
            .collect()
    }

    pub fn binding_loss(&self, features: &Array2<f64>, graph: &ObjectGraph, s: usize) -> Result<f64> {
        self.check(features, graph)?;
        if !graph.is_object(s) {
            return Err(Error::input(format!("token {} is not an object", s)));
        }
        let energies = self.pair_energies(features, s)?;
        Ok(binding_loss_from_energies(&energies, graph, s, self.ablations))
    }

    pub fn intensity_loss(&self, scores: ArrayView1<'_, f64>) -> Result<f64> {
        intensity_loss_with(&self.kernel, scores)
    }

    pub fn total_loss(&self, attention: &AggregatedAttention, graph: &ObjectGraph) -> Result<LossBreakdown> {
        Ok(self.evaluate(attention, graph, false)?.breakdown)
    }

    pub fn total_loss_with_grad(&self, attention: &AggregatedAttention, graph: &ObjectGraph) -> Result<LossGradients> {
        self.evaluate(attention, graph, true)
    }

    fn evaluate(&self, attention: &AggregatedAttention, graph: &ObjectGraph, with_grad: bool) -> Result<LossGradients> {
        let features = &attention.features;
        let scores = &attention.scores;
        let mut grad_features = Array2::zeros(features.dim());
        let mut grad_scores = Array2::zeros(scores.dim());
        if graph.is_empty() {
            return Ok(LossGradients {
                breakdown: LossBreakdown::degraded(self.lambda),
                grad_features,
                grad_scores,
            });
        }
        self.check(features, graph)?;
        let n = features.nrows();
        let side = square_side(scores.ncols())?;
        let mut binding = BTreeMap::new();
        let mut intensity = BTreeMap::new();
        let mut total = 0.0;
        for &s in &graph.objects {
            let energies = self.pair_energies(features, s)?;
            let lb = binding_loss_from_energies(&energies, graph, s, self.ablations);
            let (ln, argmax) = intensity_with_argmax(&self.kernel, scores.row(s))?;
            binding.insert(s, lb);
            intensity.insert(s, ln);
            total += lb + self.lambda * ln;
            if with_grad {
                for (l, coef) in binding_coefficients(graph, s, n, self.ablations) {
                    let g = self.energy.energy_with_grad(features.row(s), features.row(l))?;
                    let mut row_s = grad_features.row_mut(s);
                    row_s.scaled_add(coef, &g.d_a);
                    let mut row_l = grad_features.row_mut(l);
                    row_l.scaled_add(coef, &g.d_b);
                }
                if self.lambda != 0.0 {
                    let mut g = Array1::zeros(scores.ncols());
                    self.kernel.accumulate_position_grad(side, argmax, -self.lambda, &mut g);
                    let mut row = grad_scores.row_mut(s);
                    row += &g;
                }
            }
        }
        Ok(LossGradients {
            breakdown: LossBreakdown {
                per_object_binding: binding,
                per_object_intensity: intensity,
                total,
                lambda: self.lambda,
                degraded: false,
            },
            grad_features,
            grad_scores,
        })
    }
}

fn intensity_with_argmax(kernel: &GaussianKernel, scores: ArrayView1<'_, f64>) -> Result<(f64, usize)> {
    if let Some(v) = scores.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::input(format!(
            "attention scores must be nonnegative, found {}",
            v
        )));
    }
    let smoothed = kernel.smooth(scores)?;
    let (argmax, max) = smoothed
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    Ok((-max, argmax))
}

/// `−‖K(Ã_s)‖_∞` with the given kernel.
pub fn intensity_loss_with(kernel: &GaussianKernel, scores: ArrayView1<'_, f64>) -> Result<f64> {
    Ok(intensity_with_argmax(kernel, scores)?.0)
}

/// Intensity loss with the default σ=1 kernel.
pub fn intensity_loss(scores: ArrayView1<'_, f64>) -> Result<f64> {
    intensity_loss_with(&GaussianKernel::default(), scores)
}

/// Intensity level `‖K(Ã_s)‖_∞` of one score map.
pub fn intensity_level(scores: ArrayView1<'_, f64>) -> Result<f64> {
    Ok(-intensity_loss(scores)?)
}

/// Binding loss of object `s` for an arbitrary energy function.
pub fn binding_loss(
    features: &Array2<f64>,
    graph: &ObjectGraph,
    s: usize,
    energy: Arc<dyn EnergyFunction>,
    ablations: Ablations,
) -> Result<f64> {
    ObjectCentricLoss::new(energy, 0.0, ablations).binding_loss(features, graph, s)
}

/// Total loss under the given hyperparameters.
pub fn total_loss(
    attention: &AggregatedAttention,
    graph: &ObjectGraph,
    hyper: &GuidanceHyperparams,
) -> Result<LossBreakdown> {
    ObjectCentricLoss::from_hyper(hyper)?.total_loss(attention, graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{Cosine, NegAvgKl};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn graph(n: usize, parts: &[(usize, &[usize])]) -> ObjectGraph {
        ObjectGraph::from_parts(n, parts.iter().map(|(s, m)| (*s, m.to_vec()))).unwrap()
    }

    #[test]
    fn plug_in_example_with_one_modifier() {
        // N=4, s=0, M(s)={1}; f(s,1)=0.9, f(s,2)=0.1, f(s,3)=0.3
        let g = graph(4, &[(0, &[1])]);
        let e = [f64::NAN, 0.9, 0.1, 0.3];
        let v = binding_loss_from_energies(&e, &g, 0, Ablations::default());
        assert_abs_diff_eq!(v, -0.7, epsilon = 1e-15);
    }

    #[test]
    fn identical_maps_cancel() {
        let feats = Array2::from_shape_fn((4, 16), |(_, p)| (p as f64).sin() + 2.0);
        let g = graph(4, &[(0, &[1])]);
        let v = binding_loss(&feats, &g, 0, Arc::new(Cosine), Ablations::default()).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_modifier_set_uses_repulsion_only() {
        let g = graph(3, &[(0, &[])]);
        let e = [f64::NAN, 0.2, 0.4];
        assert_abs_diff_eq!(binding_loss_from_energies(&e, &g, 0, Ablations::default()), 0.3, epsilon = 1e-15);
        let no_rep = Ablations {
            no_repulsion: true,
            ..Default::default()
        };
        assert_eq!(binding_loss_from_energies(&e, &g, 0, no_rep), 0.0);
    }

    #[test]
    fn no_negatives_means_zero_repulsion() {
        // N=2: object and its only modifier
        let g = graph(2, &[(0, &[1])]);
        assert_eq!(binding_loss_from_energies(&[f64::NAN, 0.6], &g, 0, Ablations::default()), -0.6);
        assert_eq!(binding_coefficients(&g, 0, 2, Ablations::default()), vec![(1, -1.0)]);
    }

    #[test]
    fn object_conditioning_ablation_averages_with_modifier_energy() {
        let g = graph(4, &[(0, &[1])]);
        let e = [f64::NAN, 0.9, 0.1, 0.3];
        let ab = Ablations {
            no_object_conditioning: true,
            ..Default::default()
        };
        // -0.9 + ((0.1+0.9)/2 + (0.3+0.9)/2)/2 = -0.9 + 0.55
        assert_abs_diff_eq!(binding_loss_from_energies(&e, &g, 0, ab), -0.35, epsilon = 1e-15);
    }

    #[test]
    fn intensity_examples() {
        let c = Array1::from_elem(256, 0.3);
        assert_abs_diff_eq!(intensity_loss(c.view()).unwrap(), -0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(intensity_loss(Array1::from_elem(256, 1.0).view()).unwrap(), -1.0, epsilon = 1e-15);
        let mut spike = Array1::zeros(256);
        spike[5 * 16 + 7] = 1.0;
        let w = 1.0 / (1.0 + 4.0 * (-0.5f64).exp() + 4.0 * (-1.0f64).exp());
        assert_abs_diff_eq!(intensity_loss(spike.view()).unwrap(), -w, epsilon = 1e-15);
    }

    #[test]
    fn negative_scores_rejected() {
        let mut m = Array1::from_elem(16, 0.1);
        m[3] = -0.01;
        assert!(matches!(intensity_loss(m.view()), Err(Error::Input(_))));
    }

    #[test]
    fn total_is_linear_combination() {
        let g = graph(4, &[(0, &[1])]);
        let mut b = LossBreakdown::degraded(0.5);
        b.degraded = false;
        b.per_object_binding.insert(0, -0.7);
        b.per_object_intensity.insert(0, -0.8);
        assert_abs_diff_eq!(b.recompute_total(), -1.1, epsilon = 1e-15);
        let _ = g;
    }

    #[test]
    fn empty_graph_degrades_to_zero() {
        let agg = AggregatedAttention {
            features: Array2::ones((2, 16)),
            scores: Array2::from_elem((2, 16), 0.5),
            resolution: 4,
        };
        let b = total_loss(&agg, &ObjectGraph::empty(2), &GuidanceHyperparams::default()).unwrap();
        assert!(b.degraded);
        assert_eq!(b.total, 0.0);
    }

    fn random_attention(rng: &mut impl Rng, n: usize, side: usize) -> AggregatedAttention {
        let features = Array2::from_shape_fn((n, side * side), |_| rng.random_range(-2.0..2.0));
        let mut scores = features.mapv(f64::exp);
        for mut col in scores.columns_mut() {
            let s = col.sum();
            col /= s;
        }
        AggregatedAttention {
            features,
            scores,
            resolution: side,
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let g = graph(5, &[(1, &[0]), (4, &[2, 3])]);
        for energy in [Arc::new(Cosine) as Arc<dyn EnergyFunction>, Arc::new(NegAvgKl)] {
            for ab in [
                Ablations::default(),
                Ablations { no_object_conditioning: true, ..Default::default() },
                Ablations { no_repulsion: true, ..Default::default() },
            ] {
                let loss = ObjectCentricLoss::new(energy.clone(), 0.7, ab);
                let agg = random_attention(&mut rng, 5, 4);
                let out = loss.total_loss_with_grad(&agg, &g).unwrap();
                assert_abs_diff_eq!(out.breakdown.total, out.breakdown.recompute_total(), epsilon = 1e-12);
                let h = 1e-6;
                for &(r, c) in &[(0, 0), (1, 5), (2, 9), (4, 15), (3, 3)] {
                    let mut plus = agg.clone();
                    plus.features[[r, c]] += h;
                    let mut minus = agg.clone();
                    minus.features[[r, c]] -= h;
                    let fd = (loss.total_loss(&plus, &g).unwrap().total - loss.total_loss(&minus, &g).unwrap().total) / (2.0 * h);
                    assert_abs_diff_eq!(out.grad_features[[r, c]], fd, epsilon = 1e-5);
                    let mut plus = agg.clone();
                    plus.scores[[r, c]] += h;
                    let mut minus = agg.clone();
                    minus.scores[[r, c]] -= h;
                    let fd = (loss.total_loss(&plus, &g).unwrap().total - loss.total_loss(&minus, &g).unwrap().total) / (2.0 * h);
                    assert_abs_diff_eq!(out.grad_scores[[r, c]], fd, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn kl_energy_changes_binding_loss() {
        let feats = array![[1.0, 2.0, 0.5, 0.1], [0.9, 1.5, 0.7, 0.0], [0.0, 0.3, 2.0, 1.0]];
        let g = graph(3, &[(0, &[1])]);
        let cos = binding_loss(&feats, &g, 0, Arc::new(Cosine), Ablations::default()).unwrap();
        let kl = binding_loss(&feats, &g, 0, Arc::new(NegAvgKl), Ablations::default()).unwrap();
        assert!((cos - kl).abs() > 1e-3);
    }

    proptest! {
        #[test]
        fn total_is_affine_in_lambda(seed in 0u64..1000, lambda in 0.0f64..3.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let agg = random_attention(&mut rng, 4, 4);
            let g = graph(4, &[(0, &[1]), (3, &[])]);
            let at = |l: f64| ObjectCentricLoss::new(Arc::new(Cosine), l, Ablations::default()).total_loss(&agg, &g).unwrap();
            let zero = at(0.0);
            let b = at(lambda);
            let slope: f64 = zero.per_object_intensity.values().sum();
            prop_assert!((b.total - (zero.total + lambda * slope)).abs() < 1e-12);
        }

        #[test]
        fn smoothing_never_exceeds_raw_max(vals in proptest::collection::vec(0.0f64..1.0, 256)) {
            let m = Array1::from(vals);
            let raw = m.iter().cloned().fold(0.0, f64::max);
            let level = -intensity_loss(m.view()).unwrap();
            prop_assert!(level <= raw + 1e-15);
        }
    }
}
