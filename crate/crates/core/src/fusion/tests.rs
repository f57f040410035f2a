use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::autodiff::gradcheck::{check_gradients, GradCheckConfig};
use crate::autodiff::{Graph, ParameterStore, Tensor};
use crate::channel::CsiMatrix;
use crate::config::ExperimentConfig;
use crate::dataset::{generate_dataset, Dataset, SampleRecord};
use crate::error::Error;

fn mini_config(variant: ModelVariant) -> ModelConfig {
    ModelConfig::new(variant, 16, 8, 16, 16)
}

fn mini_dataset(samples: usize) -> Dataset {
    let text = format!("samples = {samples}\ncamera.width = 16\ncamera.height = 16\ncamera.focal_px = 7\n");
    generate_dataset(&ExperimentConfig::parse(&text).unwrap()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    t.data().chunks(*t.shape().last().unwrap()).collect()
}

fn eval_scalar(build: impl FnOnce(&mut Graph) -> crate::Result<crate::autodiff::Var>) -> f64 {
    let mut g = Graph::new();
    let v = build(&mut g).unwrap();
    g.value(v).item()
}

#[test]
fn variant_tags_round_trip() {
    for v in ModelVariant::ALL {
        assert_eq!(v.tag().parse::<ModelVariant>().unwrap(), v);
    }
    assert!(matches!("fusion2".parse::<ModelVariant>(), Err(Error::Config(_))));
    assert_eq!(ModelVariant::Fusion.contrastive_weight(), 1.0);
    assert_eq!(ModelVariant::FusionNoAlign.contrastive_weight(), 0.0);
}

#[test]
fn default_csi_encoder_flattens_to_256() {
    let net = Network::build(&ModelConfig::new(ModelVariant::Fusion, 16, 8, 64, 64)).unwrap();
    let shapes = net.csi.unwrap().parameter_shapes();
    let fc = shapes.iter().find(|(n, _)| n == "csi.fc.weight").unwrap();
    assert_eq!(fc.1, vec![256, 64]);
    let vis = net.vision.unwrap().parameter_shapes();
    assert_eq!(vis.iter().find(|(n, _)| n == "vision.fc.weight").unwrap().1, vec![4096, 64]);
}

#[test]
fn zero_inputs_encode_to_zero() {
    let model = FusionModel::new(ModelConfig::new(ModelVariant::Fusion, 16, 8, 64, 64), 3).unwrap();
    let z = model.encode_csi(&CsiMatrix(nalgebra::DMatrix::zeros(16, 8))).unwrap();
    assert_eq!(z.len(), 64);
    assert!(z.iter().all(|&v| v == 0.0));
    let z = model.encode_vision(&vec![0.0; 64 * 64]).unwrap();
    assert_eq!(z.len(), 64);
    assert!(z.iter().all(|&v| v == 0.0));
}

#[test]
fn csi_features_ignore_global_phase() {
    let ds = mini_dataset(2);
    let model = FusionModel::new(mini_config(ModelVariant::Fusion), 1).unwrap();
    let h = &ds.records[0].csi;
    let rotated = CsiMatrix(h.0.map(|z| z * Complex64::from_polar(1.0, 0.913)));
    let a = model.encode_csi(h).unwrap();
    let b = model.encode_csi(&rotated).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn encoders_are_deterministic() {
    let ds = mini_dataset(1);
    let a = FusionModel::new(mini_config(ModelVariant::Fusion), 9).unwrap();
    let b = FusionModel::new(mini_config(ModelVariant::Fusion), 9).unwrap();
    assert_eq!(a.params, b.params);
    let r = &ds.records[0];
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(a.encode_csi(&r.csi).unwrap()), bits(b.encode_csi(&r.csi).unwrap()));
    assert_eq!(bits(a.encode_vision(&r.image).unwrap()), bits(a.encode_vision(&r.image).unwrap()));
}

#[test]
fn vision_features_see_a_spurious_blob() {
    let ds = mini_dataset(1);
    let model = FusionModel::new(mini_config(ModelVariant::Fusion), 2).unwrap();
    let clean = ds.records[0].image.clone();
    let mut blob = clean.clone();
    for y in 1..4 {
        for x in 11..14 {
            blob[y * 16 + x] = blob[y * 16 + x].max(0.5);
        }
    }
    assert_ne!(model.encode_vision(&clean).unwrap(), model.encode_vision(&blob).unwrap());
}

#[test]
fn embeddings_have_unit_rows() {
    let ds = mini_dataset(6);
    let model = FusionModel::new(mini_config(ModelVariant::Fusion), 4).unwrap();
    let refs: Vec<&SampleRecord> = ds.records.iter().collect();
    let e = model.embed(&refs).unwrap();
    for t in [&e.csi, &e.vision] {
        assert_eq!(t.shape(), &[6, 16]);
        for row in rows(t) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
    let csi_only = FusionModel::new(mini_config(ModelVariant::CsiOnly), 4).unwrap();
    assert!(matches!(csi_only.embed(&refs), Err(Error::Precondition(_))));
}

#[test]
fn projection_normalization_cancels_scale_and_rejects_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = random_tensor(&mut rng, vec![64, 16], -1.0, 1.0);
    let z = random_tensor(&mut rng, vec![1, 64], -1.0, 1.0);
    let project = |z: Tensor| {
        let mut g = Graph::new();
        let (zv, wv) = (g.constant(z), g.constant(w.clone()));
        let x = g.matmul(zv, wv)?;
        let y = g.l2_normalize_rows(x)?;
        Ok::<_, Error>(g.value(y).clone())
    };
    let a = project(z.clone()).unwrap();
    let b = project(Tensor::new(vec![1, 64], z.data().iter().map(|v| 5.0 * v).collect()).unwrap()).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-15);
    }
    assert!(matches!(project(Tensor::zeros(vec![1, 64])), Err(Error::Numeric(_))));
}

#[test]
fn similarity_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.constant(random_tensor(&mut rng, vec![5, 16], -1.0, 1.0));
    let x = g.l2_normalize_rows(x).unwrap();
    let s = similarity_matrix(&mut g, x, x, 1.0).unwrap();
    for (i, row) in rows(g.value(s)).iter().enumerate() {
        assert!((row[i] - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v <= 1.0 + 1e-12));
    }
    let s = similarity_matrix(&mut g, x, x, 0.07).unwrap();
    assert!((g.value(s).data()[0] - 14.285714285714286).abs() < 1e-9);

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap());
    let a2 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
    let s = similarity_matrix(&mut g, a2, b, 0.07).unwrap();
    assert_eq!(g.value(s).data()[0], 0.0);
    let s = similarity_matrix(&mut g, a, a, 0.5).unwrap();
    assert_eq!(g.value(s).data(), &[2.0, 0.0, 0.0, 2.0]);
    assert!(matches!(similarity_matrix(&mut g, a, b, 0.0), Err(Error::Precondition(_))));
}

#[test]
fn contrastive_examples() {
    let uniform = eval_scalar(|g| {
        let s = g.constant(Tensor::new(vec![32, 32], vec![0.25; 1024]).unwrap());
        contrastive_loss(g, s)
    });
    assert!((uniform - 3.4657359027997265).abs() < 1e-9);

    let mut last = f64::INFINITY;
    for c in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0] {
        let l = eval_scalar(|g| {
            let mut d = vec![0.0; 16];
            (0..4).for_each(|i| d[i * 5] = c);
            let s = g.constant(Tensor::new(vec![4, 4], d).unwrap());
            contrastive_loss(g, s)
        });
        assert!(l >= 0.0 && l < last, "c = {c}: {l}");
        last = l;
    }
    assert!(last < 1e-7);

    for v in [-3.0, 0.0, 40.0] {
        let l = eval_scalar(|g| {
            let s = g.constant(Tensor::new(vec![1, 1], vec![v]).unwrap());
            contrastive_loss(g, s)
        });
        assert_eq!(l, 0.0);
    }
    let mut g = Graph::new();
    let s = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(contrastive_loss(&mut g, s).is_err());
}

#[test]
fn localization_examples() {
    let l = |p: Vec<Vec<f64>>, t: Vec<Vec<f64>>| {
        eval_scalar(|g| {
            let (p, t) = (g.constant(Tensor::from_rows(&p).unwrap()), g.constant(Tensor::from_rows(&t).unwrap()));
            localization_loss(g, p, t)
        })
    };
    assert_eq!(l(vec![vec![1.0, 2.0, 3.0]], vec![vec![1.0, 2.0, 3.0]]), 0.0);
    assert_eq!(l(vec![vec![1.0, 2.0, 2.0]], vec![vec![0.0; 3]]), 9.0);
    assert_eq!(l(vec![vec![3.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]], vec![vec![0.0; 3]; 2]), 5.0);
    let mut g = Graph::new();
    let (p, t) = (g.constant(Tensor::zeros(vec![2, 3])), g.constant(Tensor::zeros(vec![3, 3])));
    assert!(localization_loss(&mut g, p, t).is_err());
}

fn total_with_grads(l_c: f64, l_l: f64, s_c: f64, s_l: f64, w: f64) -> (f64, f64, f64) {
    let mut g = Graph::new();
    let (lc, ll) = (g.constant(Tensor::scalar(l_c)), g.constant(Tensor::scalar(l_l)));
    let (sc, sl) = (g.param(Tensor::scalar(s_c)), g.param(Tensor::scalar(s_l)));
    let t = total_loss(&mut g, lc, ll, sc, sl, w).unwrap();
    g.backward(t).unwrap();
    (g.value(t).item(), g.grad(sc).unwrap()[0], g.grad(sl).unwrap()[0])
}

#[test]
fn total_loss_examples() {
    let (t, _, _) = total_with_grads(3.1, 7.7, 0.0, 0.0, 1.0);
    assert_eq!(t, (3.1 + 7.7) / 2.0);
    assert_eq!(total_with_grads(0.0, 0.0, 2.0, 2.0, 1.0).0, 2.0);
    for (lc, ll) in [(3.4657, 120.0), (0.01, 0.5), (2.0, 2.0)] {
        let (t, gc, gl) = total_with_grads(lc, ll, f64::ln(lc), f64::ln(ll), 1.0);
        assert!(gc.abs() < 1e-8 && gl.abs() < 1e-8, "{gc} {gl}");
        assert!((t - LossBundle::combine(lc, ll, lc.ln(), ll.ln(), 1.0)).abs() < 1e-12);
    }
    // Without alignment only the log penalty reaches s_C.
    assert_eq!(total_with_grads(5.0, 1.0, 0.3, 0.0, 0.0).1, 0.5);
}

#[test]
fn zero_predictor_weights_output_the_final_bias() {
    let ds = mini_dataset(3);
    let mut model = FusionModel::new(mini_config(ModelVariant::Fusion), 5).unwrap();
    for name in ["predict.fc1.weight", "predict.fc2.weight", "predict.fc3.weight"] {
        model.params.get_mut(name).unwrap().value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    model.params.get_mut("predict.fc3.bias").unwrap().value.data_mut().copy_from_slice(&[1.5, -2.0, 3.25]);
    let refs: Vec<&SampleRecord> = ds.records.iter().collect();
    for p in model.predict(&refs).unwrap() {
        assert_eq!(p, [1.5, -2.0, 3.25]);
    }
}

#[test]
fn concatenation_order_matters() {
    let model = FusionModel::new(mini_config(ModelVariant::Fusion), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (a, b) = (random_tensor(&mut rng, vec![1, 16], -1.0, 1.0), random_tensor(&mut rng, vec![1, 16], -1.0, 1.0));
    let run = |first: &Tensor, second: &Tensor| {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let (x, y) = (g.constant(first.clone()), g.constant(second.clone()));
        let joint = g.concat(&[x, y]).unwrap();
        assert_eq!(g.shape(joint), &[1, 32]);
        let out = model.network.predictor.forward(&mut g, &p, joint).unwrap();
        g.value(out).data().to_vec()
    };
    assert_ne!(run(&a, &b), run(&b, &a));
}

/// Full training objective of `variant` against finite differences, on
/// random inputs with random biases (keeps ReLUs off their kinks).
fn gradcheck_model(variant: ModelVariant, seed: u64) -> f64 {
    let cfg = mini_config(variant);
    let mut model = FusionModel::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let p = model.params.get_mut(&name).unwrap();
        if name.ends_with(".bias") || name.starts_with("uncertainty") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    model.target_scale = [1.5, 0.5, 2.0];
    model.target_mean = [0.1, -0.2, 0.3];
    let b = 4;
    let csi_shape = [vec![b], cfg.csi_input_shape()].concat();
    let inputs = ModelInputs {
        batch: b,
        csi: variant.uses_csi().then(|| random_tensor(&mut rng, csi_shape, 0.0, 1.0)),
        image: variant.uses_vision().then(|| random_tensor(&mut rng, vec![b, 1, 16, 16], 0.0, 1.0)),
    };
    let truth = random_tensor(&mut rng, vec![b, 3], -1.0, 1.0);
    let store: &ParameterStore = &model.params;
    let report = check_gradients(&store.values(), GradCheckConfig { max_entries: Some(8), ..Default::default() }, |g, vars| {
        let p = store.bind_vars(vars.to_vec())?;
        Ok(model.loss(g, &p, &inputs, &truth)?.total)
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn fusion_loss_passes_finite_differences() {
    for seed in 0..5 {
        let err = gradcheck_model(ModelVariant::Fusion, seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn baseline_losses_pass_finite_differences() {
    for v in [ModelVariant::FusionNoAlign, ModelVariant::CsiOnly, ModelVariant::VisionOnly] {
        let err = gradcheck_model(v, 11);
        assert!(err < 1e-4, "{v}: {err}");
    }
}

#[test]
fn no_align_log_variance_sees_only_the_penalty() {
    let ds = mini_dataset(4);
    let model = FusionModel::new(mini_config(ModelVariant::FusionNoAlign), 1).unwrap();
    let refs: Vec<&SampleRecord> = ds.records.iter().collect();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let loss = model.loss(&mut g, &p, &model.inputs(&refs).unwrap(), &FusionModel::targets(&refs).unwrap()).unwrap();
    g.backward(loss.total).unwrap();
    assert_eq!(g.grad(p.get(S_CONTRASTIVE).unwrap()).unwrap(), &[0.5]);
}

#[test]
fn overfits_a_single_repeated_sample() {
    // Normalization comes from the whole region, not the single sample, so
    // the untrained prediction starts far from the target.
    let ds = mini_dataset(200);
    let mut model = FusionModel::new(mini_config(ModelVariant::Fusion), 3).unwrap();
    model.fit_target_normalization(&ds.records.iter().map(|r| r.ue).collect::<Vec<_>>());
    let records = vec![&ds.records[0]; 1024];
    let cfg = TrainConfig { epochs: 50, seed: 3, ..Default::default() };
    let out = train_model(model, &records, &cfg).unwrap();
    let l: Vec<f64> = out.history.iter().map(|b| b.localization).collect();
    assert!(l[0] > 1.0, "{l:?}");
    assert!(l[49] < 0.1, "{l:?}");
    // Adam keeps jittering once the sample is memorized, so the tail is
    // bounded rather than strictly decreasing.
    assert!(l[10..].iter().all(|&v| v < 0.1), "{l:?}");
    assert!(l[10..].iter().cloned().fold(f64::INFINITY, f64::min) < 0.01, "{l:?}");
}

#[test]
fn training_is_deterministic_and_logged() {
    let ds = mini_dataset(40);
    let idx: Vec<usize> = (0..40).collect();
    let cfg = TrainConfig { epochs: 2, batch_size: 16, seed: 7, ..Default::default() };
    let a = train(mini_config(ModelVariant::Fusion), &ds, &idx, &cfg).unwrap();
    let b = train(mini_config(ModelVariant::Fusion), &ds, &idx, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    for h in &a.history {
        assert!(h.localization >= 0.0 && h.contrastive >= 0.0);
        assert_eq!(h.total, LossBundle::combine(h.contrastive, h.localization, h.s_c, h.s_l, 1.0));
    }
    let csv = history_csv(&a.history);
    assert!(csv.starts_with(HISTORY_HEADER));
    assert_eq!(csv.lines().count(), 3);
    assert!(matches!(train(mini_config(ModelVariant::Fusion), &ds, &[], &cfg), Err(Error::Data(_))));
}

#[test]
fn checkpoint_round_trip_restores_predictions() {
    let ds = mini_dataset(5);
    let idx: Vec<usize> = (0..5).collect();
    let cfg = TrainConfig { epochs: 1, seed: 2, ..Default::default() };
    for v in ModelVariant::ALL {
        let model = train(mini_config(v), &ds, &idx, &cfg).unwrap().model;
        let bytes = encode_checkpoint(&model.params, &model.metadata());
        let (store, meta) = decode_checkpoint(&bytes).unwrap();
        let back = FusionModel::from_checkpoint(store, &meta).unwrap();
        assert_eq!(evaluate(&back, &ds, &idx).unwrap(), evaluate(&model, &ds, &idx).unwrap());
    }
    let fusion = FusionModel::new(mini_config(ModelVariant::Fusion), 0).unwrap();
    let mut meta = fusion.metadata();
    meta.insert("variant".into(), "csi-only".into());
    assert!(matches!(FusionModel::from_checkpoint(fusion.params.clone(), &meta), Err(Error::Data(_))));
}

#[test]
fn parameter_counts_follow_the_layer_specs() {
    let full = |v| FusionModel::new(ModelConfig::new(v, 16, 8, 64, 64), 0).unwrap();
    let fusion = full(ModelVariant::Fusion);
    let csi = full(ModelVariant::CsiOnly);
    let spec_count = |m: &FusionModel| m.network.parameter_shapes(m.config.variant).iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>();
    assert_eq!(fusion.parameter_count(), spec_count(&fusion));
    assert_eq!(csi.parameter_count(), spec_count(&csi));
    assert!(csi.parameter_count() < fusion.parameter_count());
    assert!(fusion.macs().unwrap() > 0 && csi.macs().unwrap() > 0);
}

