mod common;

use common::*;
use dmlseg::checkpoint::{model_container, model_from_container, Container};
use dmlseg::gt::prepare_targets;
use dmlseg::model::predict_labels;
use dmlseg::synth::{generate_samples, image_tensor, SceneSpec};
use dmlseg::{Graph, Model, ModelConfig, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn images(config: &ModelConfig, n: usize, seed: u64) -> Tensor<f64> {
    let (h, w) = config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = rand_tensor(Shape::new(n, 3, h, w).unwrap(), &mut rng);
    for v in x.data_mut() {
        *v = 0.5 * (*v + 1.0);
    }
    x
}

#[test]
fn default_shapes() {
    let config = ModelConfig::default();
    let model = Model::<f32>::new(config.clone(), 1).unwrap();
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, &images(&config, 2, 0).cast())
        .unwrap();
    assert_eq!(g.shape(out.s), Shape::new(2, 8, 24, 24).unwrap());
    assert_eq!(g.shape(out.p), Shape::new(2, 8, 24, 24).unwrap());
    assert_eq!(out.m.len(), 3);
    for (&m, &up) in out.m.iter().zip(&out.m_up) {
        assert_eq!(g.shape(m), Shape::new(2, 8, 12, 12).unwrap());
        assert_eq!(g.shape(up), Shape::new(2, 8, 24, 24).unwrap());
    }
}

#[test]
fn baseline_prediction_is_segmentation_score() {
    let config = ModelConfig::grad_check().with_levels(0).unwrap();
    let model = Model::<f64>::new(config.clone(), 4).unwrap();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &images(&config, 2, 1)).unwrap();
    assert!(out.m.is_empty());
    assert_eq!(g.value(out.p), g.value(out.s));
}

#[test]
fn fused_score_is_exact_sum() {
    for levels in 0..=3 {
        let config = ModelConfig::grad_check().with_levels(levels).unwrap();
        let model = Model::<f32>::new(config.clone(), 9).unwrap();
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &images(&config, 2, 2).cast())
            .unwrap();
        let mut want = g.value(out.s).clone();
        for &u in &out.m_up {
            for (w, &v) in want.data_mut().iter_mut().zip(g.value(u).data()) {
                *w += v;
            }
        }
        assert_eq!(g.value(out.p).max_abs_diff(&want).unwrap(), 0.0);
    }
}

#[test]
fn pooled_scores_match_window_max_oracle() {
    let config = ModelConfig::grad_check();
    let model = Model::<f64>::new(config.clone(), 3).unwrap();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &images(&config, 2, 3)).unwrap();
    for ((&sc, &pl), &w) in out.scores.iter().zip(&out.pooled).zip(&config.window_sizes) {
        assert_eq!(g.value(pl), &maxpool_oracle(g.value(sc), w, 1, w / 2));
    }
}

#[test]
fn zero_weights_give_uniform_losses() {
    let config = ModelConfig::grad_check();
    let mut model = Model::<f64>::new(config.clone(), 1).unwrap();
    for p in model.params.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let spec = SceneSpec::for_model(&config, 1).unwrap();
    let (samples, _) = generate_samples(&spec, 2, 0).unwrap();
    let targets: Vec<_> = samples
        .iter()
        .map(|s| prepare_targets(&s.mask, &config).unwrap())
        .collect();
    let refs: Vec<_> = targets.iter().collect();
    let x = image_tensor::<f64>(&samples.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &x).unwrap();
    assert!(g.value(out.p).data().iter().all(|&v| v == 0.0));
    let obj = model.objective(&mut g, &out, &refs).unwrap();
    let k = config.num_classes as f64;
    assert!((g.value(obj.l_seg).item().unwrap() - k.ln()).abs() < 1e-12);
    for &l in &obj.l_mul {
        assert!((g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);
    }
    let total = g.value(obj.total).item().unwrap();
    assert!((total - (k.ln() + 3.0 * 2f64.ln())).abs() < 1e-12);
}

#[test]
fn dml_blocks_are_isolated() {
    let config = ModelConfig::grad_check();
    let x = images(&config, 1, 4);
    let model = Model::<f64>::new(config.clone(), 5).unwrap();
    let mut changed = model.clone();
    for p in changed
        .params
        .iter_mut()
        .filter(|p| p.name.starts_with("dml2."))
    {
        for v in p.value.data_mut() {
            *v += 0.3;
        }
    }
    let mut g1 = Graph::new();
    let a = model.forward(&mut g1, &x).unwrap();
    let mut g2 = Graph::new();
    let b = changed.forward(&mut g2, &x).unwrap();
    assert_eq!(g1.value(a.s), g2.value(b.s));
    assert_eq!(g1.value(a.m[0]), g2.value(b.m[0]));
    assert_eq!(g1.value(a.m[2]), g2.value(b.m[2]));
    assert_ne!(g1.value(a.m[1]), g2.value(b.m[1]));
    assert_ne!(g1.value(a.p), g2.value(b.p));
}

#[test]
fn fewer_levels_share_initial_parameters() {
    let full = Model::<f32>::new(ModelConfig::default(), 7).unwrap();
    for levels in 0..3 {
        let small =
            Model::<f32>::new(ModelConfig::default().with_levels(levels).unwrap(), 7).unwrap();
        assert!(small.params.len() < full.params.len());
        for p in small.params.iter() {
            assert_eq!(
                full.params.get(&p.name).unwrap().value,
                p.value,
                "{}",
                p.name
            );
        }
    }
}

#[test]
fn initialisation_is_seeded() {
    let a = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
    let b = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
    let c = Model::<f32>::new(ModelConfig::default(), 4).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    assert!(a
        .params
        .iter()
        .filter(|p| p.name.ends_with(".bias"))
        .all(|p| p.value.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn wrong_input_size_is_config_error() {
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let x = Tensor::<f32>::zeros(Shape::new(1, 3, 64, 96).unwrap());
    assert!(matches!(model.infer(&x), Err(dmlseg::Error::Config(_))));
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    c.window_sizes = vec![5, 11, 3];
    assert!(Model::<f32>::new(c, 1).is_err());
    let mut c = ModelConfig::default();
    c.input_size = (90, 96);
    assert!(Model::<f32>::new(c, 1).is_err());
    let mut c = ModelConfig::default();
    c.window_sizes = vec![11, 6, 3];
    assert!(Model::<f32>::new(c, 1).is_err());
    assert!(ModelConfig::default().with_levels(4).is_err());
    ModelConfig::full_scale().validate().unwrap();
    assert_eq!(ModelConfig::full_scale().dml_grid(), (16, 16));
    assert_eq!(ModelConfig::full_scale().input_extent(17), 544);
}

#[test]
fn checkpoint_round_trip_preserves_forward() {
    let config = ModelConfig::default();
    let model = Model::<f32>::new(config.clone(), 12).unwrap();
    let x: Tensor<f32> = images(&config, 2, 5).cast();
    let bytes = model_container(&model, &[]).encode().unwrap();
    let back: Model<f32> =
        model_from_container(&Container::decode(&bytes).unwrap(), Some(&config)).unwrap();
    assert_eq!(back.params, model.params);
    let a = model.infer(&x).unwrap();
    let b = back.infer(&x).unwrap();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn predicted_labels_upsample_argmax() {
    // two classes on a 1×2 grid, class 1 wins on the right; tie on the left
    let p = Tensor::from_vec(Shape::new(1, 2, 1, 2).unwrap(), vec![0.5, 0.1, 0.5, 0.9]).unwrap();
    let m = predict_labels(&p, (2, 4)).unwrap();
    assert_eq!(m[0].data(), &[0, 0, 1, 1, 0, 0, 1, 1]);
}

#[test]
fn architecture_listing() {
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    assert_eq!(
        model.architecture(),
        include_str!("data/architecture_default.txt")
    );
}
