mod common;

use common::{assert_close, random_sequence};
use rseg::autodiff::BatchNormMode;
use rseg::data::{generate_phantom, PhantomSpec};
use rseg::loss::{combined_loss, LossWeights, DICE_SMOOTH};
use rseg::model::{build_model, Backbone, ModelConfig, ParamStore, Session};
use rseg::recurrent::{
    prepare_sequence, probabilities_to_mask, step_on_tape, unroll_forward, unroll_on_tape, BpttMode, SliceSequence,
    Unroll,
};
use rseg::tensor::Tensor;
use rseg::train::{sequence_gradients, TrainConfig};

const H: f64 = 1e-5;

fn tc(bptt: BpttMode) -> TrainConfig {
    TrainConfig {
        bptt,
        ..TrainConfig::default()
    }
}

/// Train-mode predictions of every step, used as the frozen recurrent inputs
/// of the detached objective.
fn frozen_inputs(store: &ParamStore<f64>, cfg: &ModelConfig, seq: &SliceSequence<f64>) -> Vec<Tensor<f64>> {
    let mut sess = Session::new(store, cfg, BatchNormMode::Train, false);
    let ys = unroll_on_tape(&mut sess, cfg, seq, None, Unroll::default()).unwrap();
    let mut prevs = vec![Tensor::zeros(seq.slices()[0].shape().to_vec())];
    prevs.extend(ys[..ys.len() - 1].iter().map(|&y| sess.tape.value(y).clone()));
    prevs
}

/// Sum of per-step losses with each step's previous prediction held fixed.
fn detached_objective(
    store: &ParamStore<f64>,
    cfg: &ModelConfig,
    seq: &SliceSequence<f64>,
    prevs: &[Tensor<f64>],
) -> f64 {
    let labels = seq.labels().unwrap();
    let mut total = 0.0;
    for (t, x) in seq.slices().iter().enumerate() {
        let mut sess = Session::new(store, cfg, BatchNormMode::Train, false);
        let xv = sess.tape.constant(x.clone());
        let pv = sess.tape.constant(prevs[t].clone());
        let y = step_on_tape(&mut sess, cfg, xv, pv).unwrap();
        let target = sess.tape.constant(labels[t].clone());
        let l = combined_loss(&mut sess.tape, y, target, LossWeights::default(), DICE_SMOOTH).unwrap();
        total += sess.tape.value(l).item();
    }
    total
}

fn probes(store: &ParamStore<f64>) -> Vec<(String, usize)> {
    store
        .iter()
        .flat_map(|(name, t)| [(name.to_string(), 0), (name.to_string(), t.len() / 2)])
        .collect()
}

fn perturbed(store: &ParamStore<f64>, name: &str, i: usize, delta: f64) -> ParamStore<f64> {
    let mut s = store.clone();
    s.get_mut(name).unwrap().data_mut()[i] += delta;
    s
}

#[test]
fn full_bptt_matches_finite_differences_of_the_unrolled_loss() {
    for backbone in Backbone::ALL {
        let cfg = ModelConfig::tiny(backbone, true);
        let store = build_model::<f64>(&cfg, 3).unwrap();
        let seq = random_sequence::<f64>(11, 3, 8);
        let (_, grads) = sequence_gradients(&mut store.clone(), &cfg, &tc(BpttMode::Full), &seq).unwrap();
        for (name, i) in probes(&store) {
            let f = |d: f64| {
                sequence_gradients(&mut perturbed(&store, &name, i, d), &cfg, &tc(BpttMode::Full), &seq)
                    .unwrap()
                    .0
            };
            let numeric = (f(H) - f(-H)) / (2.0 * H);
            assert_close(
                grads[&name].data()[i],
                numeric,
                1e-4,
                &format!("{backbone} {name}[{i}]"),
            );
        }
    }
}

#[test]
fn detached_bptt_matches_finite_differences_with_frozen_inputs() {
    for backbone in Backbone::ALL {
        let cfg = ModelConfig::tiny(backbone, true);
        let store = build_model::<f64>(&cfg, 5).unwrap();
        let seq = random_sequence::<f64>(12, 3, 8);
        let prevs = frozen_inputs(&store, &cfg, &seq);
        let (loss, grads) = sequence_gradients(&mut store.clone(), &cfg, &tc(BpttMode::Detach), &seq).unwrap();
        assert!((loss - detached_objective(&store, &cfg, &seq, &prevs)).abs() < 1e-10);
        for (name, i) in probes(&store) {
            let f = |d: f64| detached_objective(&perturbed(&store, &name, i, d), &cfg, &seq, &prevs);
            let numeric = (f(H) - f(-H)) / (2.0 * H);
            assert_close(
                grads[&name].data()[i],
                numeric,
                1e-4,
                &format!("{backbone} {name}[{i}]"),
            );
        }
    }
}

#[test]
fn bptt_modes_differ_only_for_recurrent_models() {
    let seq = random_sequence::<f64>(4, 3, 8);
    for recurrent in [false, true] {
        let cfg = ModelConfig::tiny(Backbone::Unet, recurrent);
        let store = build_model::<f64>(&cfg, 1).unwrap();
        let (lf, gf) = sequence_gradients(&mut store.clone(), &cfg, &tc(BpttMode::Full), &seq).unwrap();
        let (ld, gd) = sequence_gradients(&mut store.clone(), &cfg, &tc(BpttMode::Detach), &seq).unwrap();
        assert_eq!(lf, ld);
        let diff = gf
            .iter()
            .map(|(k, g)| {
                g.data()
                    .iter()
                    .zip(gd[k].data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if recurrent {
            assert!(diff > 1e-9, "full and detached gradients coincide");
        } else {
            assert_eq!(diff, 0.0);
        }
    }
}

#[test]
fn zero_head_predicts_one_half_everywhere() {
    for backbone in Backbone::ALL {
        let cfg = ModelConfig::tiny(backbone, true);
        let mut store = build_model::<f32>(&cfg, 2).unwrap();
        for name in ["head.weight", "head.bias"] {
            store.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let seq = random_sequence::<f32>(3, 4, 8);
        for p in unroll_forward(&store, &cfg, &seq, None).unwrap() {
            assert!(p.data().iter().all(|&v| v == 0.5), "{backbone}");
        }
    }
}

#[test]
fn raising_the_threshold_shrinks_the_mask() {
    let cfg = ModelConfig::tiny(Backbone::AttUnet, true);
    let store = build_model::<f32>(&cfg, 8).unwrap();
    let (vol, gt) = generate_phantom(&PhantomSpec {
        dims: [8, 32, 32],
        ..PhantomSpec::default()
    })
    .unwrap();
    let seq = prepare_sequence(&cfg, &vol, Some(&gt)).unwrap();
    let probs = unroll_forward(&store, &cfg, &seq, None).unwrap();
    let mut prev: Option<Vec<u8>> = None;
    for thr in [0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95] {
        let m = probabilities_to_mask(&seq, &probs, thr).unwrap();
        assert_eq!(m.dims(), vol.dims());
        if let Some(p) = &prev {
            assert!(
                m.voxels().iter().zip(p).all(|(&now, &before)| now <= before),
                "threshold {thr}"
            );
        }
        prev = Some(m.voxels().to_vec());
    }
    assert!(probabilities_to_mask(&seq, &probs, 1.0).is_err());
    assert!(probabilities_to_mask(&seq, &probs, 0.0).is_err());
}
