use super::*;
use crate::ops::affine_raw;

fn tiny(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::new(8, 4, 3).with_width(8);
    c.e_layers = 1;
    c.d_state = 4;
    c.proj_len = 8;
    c.variant = variant;
    c
}

fn input<T: Scalar>(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor<T> {
    Initializer::new(seed).uniform(&[b, cfg.lookback, cfg.n_vars], 1.0)
}

#[test]
fn output_shape_for_every_variant() {
    for variant in Variant::ALL {
        let cfg = tiny(variant);
        let (model, store) = DcMamber::new::<f32>(cfg.clone(), 0).unwrap();
        assert_eq!(cfg.param_count(), store.numel() as u128, "{variant}");
        let y = model.predict(&store, &input(2, &cfg, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3], "{variant}");
        assert!(y.is_finite());
    }
}

#[test]
fn param_count_matches_store() {
    let mut cfg = ModelConfig::new(12, 6, 5).with_width(16);
    cfg.share_heads = true;
    cfg.tie_directions = true;
    cfg.e_layers = 2;
    let (_, store) = DcMamber::new::<f32>(cfg.clone(), 0).unwrap();
    assert_eq!(cfg.param_count(), store.numel() as u128);
}

#[test]
fn rejects_wrong_input() {
    let cfg = tiny(Variant::Full);
    let (model, store) = DcMamber::new::<f32>(cfg, 0).unwrap();
    assert!(model.predict(&store, &Tensor::zeros(&[1, 8, 4])).is_err());
    assert!(model.predict(&store, &Tensor::zeros(&[1, 7, 3])).is_err());
}

#[test]
fn eval_is_deterministic() {
    let mut cfg = tiny(Variant::Full);
    cfg.dropout = 0.3;
    let (model, store) = DcMamber::new::<f32>(cfg.clone(), 0).unwrap();
    let x = input(3, &cfg, 2);
    assert_eq!(model.predict(&store, &x).unwrap(), model.predict(&store, &x).unwrap());
}

#[test]
fn concurrent_inference_matches_serial() {
    let cfg = tiny(Variant::Full);
    let (model, store) = DcMamber::new::<f32>(cfg.clone(), 0).unwrap();
    let inputs: Vec<Tensor<f32>> = (0..4).map(|s| input(2, &cfg, s)).collect();
    let serial: Vec<_> = inputs.iter().map(|x| model.predict(&store, x).unwrap()).collect();
    let threaded: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = inputs.iter().map(|x| s.spawn(|| model.predict(&store, x).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(serial, threaded);
}

fn layer_values(cfg: &ModelConfig, store: &ParamStore<f64>, model: &DcMamber, x: &Tensor<f64>) -> [Vec<Tensor<f64>>; 2] {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Eval, RngState::new(0));
    let tr = model.trace(&ctx, x).unwrap();
    let _ = cfg;
    tr.channels.map(|c| c.unwrap().layers.iter().map(|&v| (*tape.value(v)).clone()).collect())
}

#[test]
fn channels_are_decoupled_before_fusion() {
    let mut cfg = tiny(Variant::Full);
    cfg.e_layers = 2;
    let (model, store) = DcMamber::new::<f64>(cfg.clone(), 3).unwrap();
    let x = input(2, &cfg, 4);
    let base = layer_values(&cfg, &store, &model, &x);
    for (slot, prefix) in [(0, "mamba."), (1, "attention.")] {
        let mut zeroed = store.clone();
        for id in store.ids() {
            if store.name(id).starts_with(prefix) {
                zeroed.get_mut(id).data_mut().fill(0.0);
            }
        }
        let after = layer_values(&cfg, &zeroed, &model, &x);
        assert_eq!(after[slot], base[slot], "zeroing {prefix} changed the other channel");
        assert_ne!(after[1 - slot], base[1 - slot]);
    }
}

#[test]
fn fusion_matches_hand_evaluation() {
    // B=1, V=1, D=2
    let mut store = ParamStore::<f64>::new();
    let mut init = Initializer::new(0);
    let fusion = Fusion::init(&mut store, 2, &mut init);
    for id in [fusion.first.bias.unwrap(), fusion.second.bias.unwrap()] {
        *store.get_mut(id) = init.uniform(&[2], 0.5);
    }
    let tm = Tensor::from_f64(&[1, 1, 2], &[0.3, -1.2]).unwrap();
    let vm = Tensor::from_f64(&[1, 1, 2], &[0.8, 0.1]).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, RngState::new(0));
    let y = fusion.forward(&ctx, tape.constant(tm), tape.constant(vm)).unwrap();
    let y = tape.value(y);
    let x = [0.3, -1.2, 0.8, 0.1];
    let (w1, b1) = (store.get(fusion.first.weight), store.get(fusion.first.bias.unwrap()));
    let (w2, b2) = (store.get(fusion.second.weight), store.get(fusion.second.bias.unwrap()));
    let h: Vec<f64> = (0..2)
        .map(|o| ((0..4).map(|i| x[i] * w1.get(&[i, o])).sum::<f64>() + b1.data()[o]).max(0.0))
        .collect();
    let z: Vec<f64> = (0..2).map(|o| h[0] * w2.get(&[0, o]) + h[1] * w2.get(&[1, o]) + b2.data()[o]).collect();
    let m = (z[0] + z[1]) / 2.0;
    let var = ((z[0] - m).powi(2) + (z[1] - m).powi(2)) / 2.0;
    for o in 0..2 {
        let expected = (z[o] - m) / (var + 1e-5).sqrt();
        assert!((y.data()[o] - expected).abs() < 1e-12);
    }
}

#[test]
fn fusion_sees_only_temporal_block() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Initializer::new(1);
    let fusion = Fusion::init(&mut store, 3, &mut init);
    // W1 = [I; 0]
    let w1 = store.get_mut(fusion.first.weight);
    w1.data_mut().fill(0.0);
    for i in 0..3 {
        w1.set(&[i, i], 1.0);
    }
    let tm = init.uniform::<f64>(&[2, 4, 3], 1.0);
    let vm = init.uniform::<f64>(&[2, 4, 3], 1.0);
    let run = |v: &Tensor<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval, RngState::new(0));
        let y = fusion.forward(&ctx, tape.constant(tm.clone()), tape.constant(v.clone())).unwrap();
        (*tape.value(y)).clone()
    };
    assert_eq!(run(&vm), run(&Tensor::zeros(&[2, 4, 3])));
}

#[test]
fn temporal_embedding_of_zero_input_is_positional_path() {
    let cfg = tiny(Variant::Full);
    let (model, store) = DcMamber::new::<f64>(cfg.clone(), 5).unwrap();
    let emb = &model.channels[0].as_ref().unwrap().embedding;
    let x = Tensor::<f64>::zeros(&[1, 8, 3]);
    let y = crate::params::run_on_tape(&store, &x, Mode::Eval, RngState::new(0), |c, v| emb.forward(c, v)).unwrap();
    let pe = positional_table::<f64>(8, 3).unwrap();
    let h = affine_raw(&pe, store.get(emb.first.weight), None).unwrap().map(|v| v.max(0.0));
    let expected = affine_raw(&h, store.get(emb.second.weight), None).unwrap();
    assert!(y.reshape(&[8, 8]).unwrap().max_abs_diff(&expected) < 1e-12);
}

#[test]
fn odd_width_positional_table_truncates_even_table() {
    let odd = positional_table::<f64>(5, 3).unwrap();
    let even = positional_encoding::<f64>(5, 4).unwrap();
    for t in 0..5 {
        for j in 0..3 {
            assert_eq!(odd.get(&[t, j]), even.get(&[t, j]));
        }
    }
}

#[test]
fn variable_embedding_selector() {
    let cfg = tiny(Variant::Full);
    let (model, mut store) = DcMamber::new::<f64>(cfg.clone(), 5).unwrap();
    let emb = model.channels[1].as_ref().unwrap().embedding.clone();
    // W1 picks time step 2 into feature 0; W2 = I
    let w1 = store.get_mut(emb.first.weight);
    w1.data_mut().fill(0.0);
    w1.set(&[2, 0], 1.0);
    let w2 = store.get_mut(emb.second.weight);
    w2.data_mut().fill(0.0);
    for i in 0..8 {
        w2.set(&[i, i], 1.0);
    }
    let x = input::<f64>(1, &cfg, 6);
    let y = crate::params::run_on_tape(&store, &x, Mode::Eval, RngState::new(0), |c, v| emb.forward(c, v)).unwrap();
    assert_eq!(y.shape(), &[1, 3, 8]);
    for j in 0..3 {
        assert_eq!(y.get(&[0, j, 0]), x.get(&[0, 2, j]).max(0.0));
        assert_eq!(y.get(&[0, j, 1]), 0.0);
    }
}

#[test]
fn align_identity_round_trips() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Initializer::new(0);
    let align = Linear::init(&mut store, "align", 4, 4, true, &mut init);
    let w = store.get_mut(align.weight);
    w.data_mut().fill(0.0);
    for i in 0..4 {
        w.set(&[i, i], 1.0);
    }
    let x = init.uniform::<f64>(&[2, 4, 6], 1.0);
    let y = crate::params::run_on_tape(&store, &x, Mode::Eval, RngState::new(0), |c, v| align_tokens(c, &align, v)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn instance_norm_is_shift_equivariant() {
    let mut cfg = tiny(Variant::Full);
    cfg.norm = NormMode::Instance;
    let (model, store) = DcMamber::new::<f64>(cfg.clone(), 2).unwrap();
    let x = input::<f64>(2, &cfg, 3);
    let y = model.predict(&store, &x).unwrap();
    let y_shift = model.predict(&store, &x.map(|v| v + 5.0)).unwrap();
    assert!(y.map(|v| v + 5.0).max_abs_diff(&y_shift) < 1e-9);
}

#[test]
fn from_store_checks_names_and_shapes() {
    let cfg = tiny(Variant::Full);
    let (_, store) = DcMamber::new::<f32>(cfg.clone(), 0).unwrap();
    assert!(DcMamber::from_store(cfg.clone(), &store).is_ok());
    assert!(DcMamber::from_store(tiny(Variant::Swapped), &store).is_err());
}

#[test]
fn non_finite_value_names_sub_op() {
    let cfg = tiny(Variant::Full);
    let (model, mut store) = DcMamber::new::<f32>(cfg.clone(), 0).unwrap();
    let id = store.find("mamba.layer0.bimamba.fwd.out_proj").unwrap();
    store.get_mut(id).data_mut()[0] = f32::INFINITY;
    let err = model.predict(&store, &input(1, &cfg, 0)).unwrap_err().to_string();
    assert!(err.contains("mamba.layer0.mixer.forward"), "{err}");
}
