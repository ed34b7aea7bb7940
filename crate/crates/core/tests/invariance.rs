//! Scale-invariance properties of the normalization operators, the ASAM
//! ascent direction and the adaptive sharpness estimate under
//! loss-preserving node-wise re-scalings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sharpness_core::models::{
    apply_node_scaling, build_model, BatchObjective, ModelSpec, ParameterLayout, ParameterVector,
};
use sharpness_core::normops::{elementwise_t, filterwise_t, PNorm, PerturbationConfig, Scheme};
use sharpness_core::optim::{asam_ascent, sam_ascent, Objective};
use sharpness_core::sharpness::estimate_sharpness;
use sharpness_core::tensor::Tensor;
use sharpness_core::Result;
use std::sync::Arc;

fn random_mlp(rng: &mut ChaCha8Rng) -> (ModelSpec, ParameterVector<f64>) {
    let input = rng.random_range(2..6usize);
    let classes = rng.random_range(2..5usize);
    let depth = rng.random_range(1..3usize);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..9usize)).collect();
    let spec = ModelSpec::mlp(input, &hidden, classes);
    let w = build_model(&spec, rng.random()).unwrap();
    (spec, w)
}

fn random_batch(rng: &mut ChaCha8Rng, spec: &ModelSpec, n: usize) -> (Tensor<f64>, Vec<usize>) {
    let d = match spec.input {
        sharpness_core::models::InputShape::Dim(d) => d,
        _ => unreachable!(),
    };
    let feats = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random::<f64>()).collect()).unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..spec.n_classes())).collect();
    (feats, labels)
}

/// Applies a random positive scaling to every hidden node and returns the
/// scaled vector together with the diagonal of the equivalent operator A.
fn random_node_scaling(
    rng: &mut ChaCha8Rng,
    w: &ParameterVector<f64>,
) -> (ParameterVector<f64>, Vec<f64>) {
    let mut scaled = w.clone();
    let mut diag = vec![1.0f64; w.k()];
    let n_nodes = w.layout().node_map.len();
    for node in 0..n_nodes {
        let c = 0.1 * 100f64.powf(rng.random::<f64>()); // log-uniform in [0.1, 10]
        let group = w.layout().node_map[node].clone();
        scaled = apply_node_scaling(&scaled, node, c).unwrap();
        for &i in &group.incoming {
            diag[i] *= c;
        }
        diag[group.bias] *= c;
        for &i in &group.outgoing {
            diag[i] /= c;
        }
    }
    (scaled, diag)
}

#[test]
fn elementwise_operator_satisfies_the_defining_identity() {
    // scales(Aw) = |A|·scales(w) coordinate-wise, hence T_{Aw}⁻¹·A = T_w⁻¹,
    // for eta = 0 with biases normalized.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (_spec, w) = random_mlp(&mut rng);
        let (scaled, diag) = random_node_scaling(&mut rng, &w);
        let op_w = elementwise_t(&w, 0.0, true);
        let op_aw = elementwise_t(&scaled, 0.0, true);
        for i in 0..w.k() {
            let expect = diag[i].abs() * op_w.scales()[i];
            let got = op_aw.scales()[i];
            assert!(
                (got - expect).abs() <= 1e-12 * expect.abs().max(1.0),
                "scale {i}: {got} vs {expect}"
            );
        }
        // T_{Aw}⁻¹(A v) == T_w⁻¹(v) wherever the scales are nonzero.
        let v: Vec<f64> = (0..w.k()).map(|_| rng.random::<f64>() - 0.5).collect();
        let av: Vec<f64> = v.iter().zip(&diag).map(|(x, d)| x * d).collect();
        if op_w.scales().iter().all(|&s| s > 0.0) && op_aw.scales().iter().all(|&s| s > 0.0) {
            let lhs = op_aw.apply_inverse(&av).unwrap();
            let rhs = op_w.apply_inverse(&v).unwrap();
            for (a, b) in lhs.iter().zip(&rhs) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}

#[test]
fn filterwise_operator_identity_under_channel_scaling() {
    use sharpness_core::models::{InputShape, LayerSpec};
    let spec = ModelSpec {
        input: InputShape::Image { c: 1, h: 6, w: 6 },
        layers: vec![LayerSpec::Conv { out_channels: 3, kernel: 3 }, LayerSpec::Dense { out: 2 }],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let w: ParameterVector<f64> = build_model(&spec, rng.random()).unwrap();
        let (scaled, diag) = random_node_scaling(&mut rng, &w);
        let op_w = filterwise_t(&w, 0.0, true);
        let op_aw = filterwise_t(&scaled, 0.0, true);
        for i in 0..w.k() {
            let expect = diag[i].abs() * op_w.scales()[i];
            let got = op_aw.scales()[i];
            assert!(
                (got - expect).abs() <= 1e-10 * expect.abs().max(1.0),
                "scale {i}: {got} vs {expect}"
            );
        }
    }
}

#[test]
fn eta_floor_makes_the_identity_approximate() {
    // With eta > 0 the identity only holds approximately; record the
    // deviation so the trade-off stays visible.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (_, w) = random_mlp(&mut rng);
    let (scaled, diag) = random_node_scaling(&mut rng, &w);
    let op_w = elementwise_t(&w, 0.01, true);
    let op_aw = elementwise_t(&scaled, 0.01, true);
    let mut worst = 0.0f64;
    for i in 0..w.k() {
        let expect = diag[i].abs() * op_w.scales()[i];
        let got = op_aw.scales()[i];
        worst = worst.max((got - expect).abs());
    }
    println!("eta=0.01 worst scale deviation under node scaling: {worst:.3e}");
    assert!(worst.is_finite() && worst > 0.0);
}

#[test]
fn asam_ascent_is_scale_equivariant_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..15 {
        let (spec, w) = random_mlp(&mut rng);
        let (feats, labels) = random_batch(&mut rng, &spec, 6);
        let obj = BatchObjective::new(&spec, feats, labels).unwrap();
        let (scaled, diag) = random_node_scaling(&mut rng, &w);
        let (_, g_w) = obj.loss_and_grad(&w).unwrap();
        let (_, g_aw) = obj.loss_and_grad(&scaled).unwrap();
        for p in [PNorm::Two, PNorm::Inf] {
            let cfg = PerturbationConfig::new(0.1, p, Scheme::Elementwise, 0.0, true).unwrap();
            let eps_w = asam_ascent(&w, &g_w, &cfg).unwrap();
            let eps_aw = asam_ascent(&scaled, &g_aw, &cfg).unwrap();
            for i in 0..w.k() {
                let expect = diag[i] * eps_w[i];
                assert!(
                    (eps_aw[i] - expect).abs() < 1e-10,
                    "trial {trial} p={p:?} coord {i}: {} vs {expect}",
                    eps_aw[i]
                );
            }
            let loss_w = obj.loss(&w.perturbed(&eps_w).unwrap()).unwrap();
            let loss_aw = obj.loss(&scaled.perturbed(&eps_aw).unwrap()).unwrap();
            assert!(
                (loss_w - loss_aw).abs() < 1e-9,
                "trial {trial} p={p:?}: perturbed losses {loss_w} vs {loss_aw}"
            );
        }
    }
}

fn bare(values: Vec<f64>) -> ParameterVector<f64> {
    let k = values.len();
    let layout = Arc::new(ParameterLayout {
        k,
        filter_groups: vec![],
        bias_mask: vec![false; k],
        node_map: vec![],
    });
    ParameterVector::new(values, layout).unwrap()
}

/// Toy loss |w1·relu(w2) − 0.04| with its subgradient (sign(0) = 0).
struct Toy;
impl Objective<f64> for Toy {
    fn loss(&self, w: &ParameterVector<f64>) -> Result<f64> {
        let (w1, w2) = (w.values()[0], w.values()[1]);
        Ok((w1 * w2.max(0.0) - 0.04).abs())
    }
    fn loss_and_grad(&self, w: &ParameterVector<f64>) -> Result<(f64, Vec<f64>)> {
        let (w1, w2) = (w.values()[0], w.values()[1]);
        let r = w2.max(0.0);
        let inner = w1 * r - 0.04;
        let s = if inner > 0.0 {
            1.0
        } else if inner < 0.0 {
            -1.0
        } else {
            0.0
        };
        let dr = if w2 > 0.0 { 1.0 } else { 0.0 };
        Ok((inner.abs(), vec![s * r, s * w1 * dr]))
    }
}

#[test]
fn sam_perturbed_loss_changes_under_rescaling() {
    // A = diag(3, 1/3) leaves the toy loss unchanged at A·w, but the SAM
    // perturbed losses at w = (1, 1) and A·w differ measurably.
    let w = bare(vec![1.0, 1.0]);
    let aw = bare(vec![3.0, 1.0 / 3.0]);
    let (_, g_w) = Toy.loss_and_grad(&w).unwrap();
    let (_, g_aw) = Toy.loss_and_grad(&aw).unwrap();
    let rho = 0.05;
    let loss_w = Toy.loss(&w.perturbed(&sam_ascent(&g_w, rho)).unwrap()).unwrap();
    let loss_aw = Toy.loss(&aw.perturbed(&sam_ascent(&g_aw, rho)).unwrap()).unwrap();
    assert!((loss_w - loss_aw).abs() > 1e-4, "{loss_w} vs {loss_aw}");
}

#[test]
fn one_step_adaptive_sharpness_is_scale_invariant_on_random_nets() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..10 {
        let (spec, w) = random_mlp(&mut rng);
        let (feats, labels) = random_batch(&mut rng, &spec, 8);
        let obj = BatchObjective::new(&spec, feats, labels).unwrap();
        let (scaled, _) = random_node_scaling(&mut rng, &w);
        for p in [PNorm::Two, PNorm::Inf] {
            let cfg = PerturbationConfig::new(0.1, p, Scheme::Elementwise, 0.0, true).unwrap();
            let s_w = estimate_sharpness(&w, &obj, &cfg, 1).unwrap().sharpness;
            let s_aw = estimate_sharpness(&scaled, &obj, &cfg, 1).unwrap().sharpness;
            assert!(
                (s_w - s_aw).abs() < 1e-8,
                "trial {trial} p={p:?}: {s_w} vs {s_aw}"
            );
        }
    }
}

mod proptests {
    use super::*;
    use proptest::prelude::*;
    use sharpness_core::analysis::{kendall_tau, MeasureGapPair};
    use sharpness_core::normops::NormalizationOperator;
    use sharpness_core::vecops::max_abs_diff;

    fn operator_from(scales: &[f64]) -> NormalizationOperator<f64> {
        // elementwise_t over a bias-free vector reproduces |values| + 0.
        let w = bare(scales.to_vec());
        elementwise_t(&w, 0.0, true)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn apply_inverse_round_trips(
            v in proptest::collection::vec(-1e3f64..1e3, 1..20),
            raw in proptest::collection::vec(0.01f64..100.0, 20)
        ) {
            let scales: Vec<f64> = raw[..v.len()].to_vec();
            let op = operator_from(&scales);
            let round = op.apply_inverse(&op.apply(&v).unwrap()).unwrap();
            prop_assert!(max_abs_diff(&round, &v) < 1e-12 * 1e3);
        }

        #[test]
        fn kendall_tau_is_bounded_and_rank_invariant(
            raw in proptest::collection::vec((-50i32..50, -50i32..50), 2..30)
        ) {
            let pairs: Vec<_> = raw
                .iter()
                .map(|&(m, g)| MeasureGapPair::new(m as f64, g as f64).unwrap())
                .collect();
            let tau: f64 = kendall_tau(&pairs).unwrap();
            prop_assert!((-1.0..=1.0).contains(&tau));
            // Strictly increasing transform of the measure preserves tau.
            let mapped: Vec<_> = pairs
                .iter()
                .map(|p| MeasureGapPair::new((p.measure * 0.1).tanh() + p.measure * 2.0, p.gap).unwrap())
                .collect();
            prop_assert_eq!(kendall_tau(&mapped).unwrap(), tau);
            // Negating the gaps negates tau.
            let neg: Vec<_> = pairs
                .iter()
                .map(|p| MeasureGapPair::new(p.measure, -p.gap).unwrap())
                .collect();
            prop_assert_eq!(kendall_tau(&neg).unwrap(), -tau);
        }
    }
}
