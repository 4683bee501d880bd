use haat_core::model::upsample_factors;
use haat_core::verification;
use haat_core::{build_model, Ctx, Graph, ModelConfig, Tensor, Var};
use proptest::prelude::*;

fn lr(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[1, 3, h, w], |i| ((i as f32) * 0.377).sin() * 0.5 + 0.5)
}

#[test]
fn toy_output_shapes() {
    let (model, store) = build_model(&ModelConfig::toy(), 0).unwrap();
    assert_eq!(model.upscale(&store, &lr(17, 13)).unwrap().shape(), &[1, 3, 34, 26]);
    assert_eq!(model.upscale(&store, &lr(1, 1)).unwrap().shape(), &[1, 3, 2, 2]);
    for scale in [3, 4] {
        let cfg = ModelConfig { scale, ..ModelConfig::toy() };
        let (model, store) = build_model(&cfg, 0).unwrap();
        assert_eq!(model.upscale(&store, &lr(5, 6)).unwrap().shape(), &[1, 3, 5 * scale, 6 * scale]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn output_is_scale_times_input(h in 1usize..12, w in 1usize..12) {
        let cfg = verification::gradcheck_model_config();
        let (model, store) = build_model(&cfg, 1).unwrap();
        let y = model.upscale(&store, &lr(h, w)).unwrap();
        prop_assert_eq!(y.shape(), &[1, 3, 2 * h, 2 * w][..]);
        prop_assert!(y.all_finite());
    }
}

#[test]
fn forward_is_deterministic_per_seed() {
    let x = lr(8, 8);
    let run = |seed| {
        let (model, store) = build_model(&ModelConfig::toy(), seed).unwrap();
        model.upscale(&store, &x).unwrap()
    };
    assert_eq!(run(3).data(), run(3).data());
    assert_ne!(run(3).data(), run(4).data());
}

/// With every group's fusion conv zeroed the body passes the shallow
/// features through, so the output only depends on shallow, the post-body
/// conv and the head.
#[test]
fn zeroed_groups_leave_the_global_residual() {
    let (model, mut store) = build_model(&ModelConfig::toy(), 5).unwrap();
    for rdg in &model.rdgs {
        store.get_mut(rdg.conv.weight).data_mut().fill(0.0);
        store.get_mut(rdg.conv.bias).data_mut().fill(0.0);
    }
    let x = lr(8, 8);
    let y = model.upscale(&store, &x).unwrap();
    let g = Graph::<f32>::inference();
    let cx = Ctx::new(&g, &store);
    let shallow = model.shallow.forward(&cx, &Var::constant(x)).unwrap();
    let feats = g.add(&model.conv_after_body.forward(&cx, &shallow).unwrap(), &shallow).unwrap();
    let want = model.head.forward(&cx, &feats).unwrap();
    assert_eq!(y.data(), want.value().data());
}

#[test]
fn every_parameter_receives_a_gradient() {
    let cfg = ModelConfig::toy();
    let (model, store) = build_model(&cfg, 2).unwrap();
    let mut store = store.cast::<f64>();
    verification::randomize(&mut store, 0.05, 9);
    let g = Graph::<f64>::new();
    let cx = Ctx::new(&g, &store);
    let y = model.forward(&cx, &Var::constant(lr(8, 8).cast())).unwrap();
    let target = Tensor::from_fn(y.shape(), |i| (i % 5) as f64 / 4.0);
    let grads = g.backward(&g.l1_loss(&y, &target).unwrap()).unwrap();
    assert_eq!(cx.vars().len(), store.len());
    for (v, name) in cx.vars().iter().zip(store.names()) {
        let gr = grads.get(v).unwrap_or_else(|| panic!("{name}: no gradient"));
        assert!(gr.all_finite(), "{name}");
    }
}

#[test]
fn registry_names_are_unique_and_ordered() {
    let (_, a) = build_model(&ModelConfig::toy(), 0).unwrap();
    let (_, b) = build_model(&ModelConfig::toy(), 1).unwrap();
    let names: Vec<&str> = a.names().collect();
    assert_eq!(names, b.names().collect::<Vec<_>>());
    let unique: std::collections::HashSet<_> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
    assert_eq!(names[0], "shallow.weight");
    assert_eq!(*names.last().unwrap(), "head.last.bias");
}

#[test]
fn presets_match_published_values() {
    let toy = ModelConfig::toy();
    assert_eq!(
        (toy.channels, toy.num_rdg, toy.sdrcbs_per_rdg, toy.window_size, toy.grid_size, toy.head_dim),
        (16, 2, 2, 4, 4, 4)
    );
    assert_eq!((toy.mal_heads.grid, toy.mal_heads.window, toy.mal_heads.shifted), (2, 1, 1));
    assert_eq!((toy.squeeze_factor, toy.mlp_ratio, toy.scale), (8, 2, 2));
    let full = ModelConfig::full();
    assert_eq!(
        (full.channels, full.window_size, full.squeeze_factor, full.num_rdg, full.sdrcbs_per_rdg),
        (180, 16, 16, 6, 6)
    );
    assert_eq!(full.alpha, 0.2);
    full.validate().unwrap();
}

#[test]
fn toy_parameter_count_is_closed_form() {
    let cfg = ModelConfig::toy();
    let (_, store) = build_model(&cfg, 0).unwrap();
    assert_eq!(store.num_elements(), cfg.param_count().unwrap());
}

#[test]
fn invalid_configs_name_the_field() {
    let cases: [(ModelConfig, &str); 5] = [
        (ModelConfig { channels: 18, ..ModelConfig::toy() }, "channels"),
        (ModelConfig { window_size: 3, ..ModelConfig::toy() }, "window_size"),
        (ModelConfig { scale: 5, ..ModelConfig::toy() }, "scale"),
        (ModelConfig { head_dim: 5, ..ModelConfig::toy() }, "head_dim"),
        (ModelConfig { squeeze_factor: 32, ..ModelConfig::toy() }, "squeeze_factor"),
    ];
    for (cfg, field) in cases {
        let err = build_model(&cfg, 0).unwrap_err();
        assert!(err.to_string().contains(field), "{err}");
    }
}

#[test]
fn upsampling_stages() {
    assert_eq!(upsample_factors(2).unwrap(), [2]);
    assert_eq!(upsample_factors(3).unwrap(), [3]);
    assert_eq!(upsample_factors(4).unwrap(), [2, 2]);
    assert!(upsample_factors(5).is_err());
}

#[test]
fn ragged_inputs_match_explicitly_padded_ones() {
    let cfg = verification::gradcheck_model_config();
    let (model, store) = build_model(&cfg, 0).unwrap();
    let x = lr(5, 7);
    let (padded, _) = haat_core::layout::pad_to_multiple(&x, cfg.pad_multiple()).unwrap();
    assert_eq!(padded.shape(), &[1, 3, 8, 8]);
    let big = model.upscale(&store, &padded).unwrap();
    let y = model.upscale(&store, &x).unwrap();
    let cropped = haat_core::imaging::crop(&big, 0, 0, 10, 14).unwrap();
    assert_eq!(y.data(), cropped.data());
}
