use timemoe_autodiff::nn::GruCell;
use timemoe_autodiff::{
    read_checkpoint, write_checkpoint, Adam, Error, Init, Mode, Optimizer, ParamStore, Sgd, Tape, Tensor,
};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::new(Mode::Eval, 0);
    let x = t.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let y = t.softmax(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn relu_clamps_negatives() {
    let mut t = Tape::new(Mode::Eval, 0);
    let x = t.constant(Tensor::from_vec(vec![-1.0, 2.0]));
    let y = t.relu(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut t = Tape::new(Mode::Train, 0);
    let x = t.input(Tensor::new(vec![2, 3], vec![0.3; 6]).unwrap());
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0; 6]);
}

#[test]
fn dot_gradient_is_twice_input() {
    let mut t = Tape::new(Mode::Train, 0);
    let x = t.input(Tensor::from_vec(vec![1.0, 2.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn reuse_accumulates_gradients() {
    let mut t = Tape::new(Mode::Train, 0);
    let x = t.input(Tensor::from_vec(vec![1.5, -0.5]));
    let a = t.scale(x, 3.0).unwrap();
    let b = t.exp(x).unwrap();
    let c = t.add(a, b).unwrap();
    let s = t.sum(c).unwrap();
    let g = t.backward(s).unwrap();
    let want: Vec<f64> = [1.5f64, -0.5].iter().map(|v| 3.0 + v.exp()).collect();
    assert!(close(g.wrt(x).unwrap(), &want, 1e-12));
}

#[test]
fn gru_with_zero_weights_halves_the_state() {
    let mut store = ParamStore::new(0);
    let gru = GruCell::new(&mut store, "g", 2, 2).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut t = Tape::new(Mode::Eval, 0);
    let x = t.constant(Tensor::new(vec![1, 2], vec![3.0, -7.0]).unwrap());
    let h0 = t.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let h1 = gru.step(&mut t, &store, x, h0).unwrap();
    assert_eq!(t.value(h1).data(), &[0.0, 0.0]);
    // r = z = sigmoid(0) = 1/2, candidate = tanh(0) = 0, so h' = h / 2
    let h = t.constant(Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
    let h2 = gru.step(&mut t, &store, x, h).unwrap();
    assert!(close(t.value(h2).data(), &[0.5, -1.0], 1e-15));
}

#[test]
fn gru_step_matches_hand_evaluation() {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut store = ParamStore::new(3);
    let gru = GruCell::new(&mut store, "g", 1, 1).unwrap();
    // ih.w: [1,3] = (r, z, n); hh.w: [1,3]; biases [3]
    let set = |s: &mut ParamStore, name: &str, v: &[f64]| {
        let id = s.get(name).unwrap();
        s.value_mut(id).data_mut().copy_from_slice(v);
    };
    set(&mut store, "g.ih.w", &[0.5, -0.3, 0.8]);
    set(&mut store, "g.ih.b", &[0.1, 0.2, -0.1]);
    set(&mut store, "g.hh.w", &[0.4, 0.7, -0.6]);
    set(&mut store, "g.hh.b", &[0.0, -0.2, 0.3]);
    let (x, h) = (0.9, -0.4);
    let r = sig(0.5 * x + 0.1 + 0.4 * h);
    let z = sig(-0.3 * x + 0.2 + 0.7 * h - 0.2);
    let n = (0.8 * x - 0.1 + r * (-0.6 * h + 0.3)).tanh();
    let expected = (1.0 - z) * n + z * h;

    let mut t = Tape::new(Mode::Eval, 0);
    let xv = t.constant(Tensor::new(vec![1, 1], vec![x]).unwrap());
    let hv = t.constant(Tensor::new(vec![1, 1], vec![h]).unwrap());
    let out = gru.step(&mut t, &store, xv, hv).unwrap();
    assert!((t.value(out).item() - expected).abs() < 1e-14);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut t = Tape::new(Mode::Eval, 0);
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 5]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new(Mode::Train, 0);
    let a = t.input(Tensor::zeros(&[2]));
    let b = t.scale(a, 2.0).unwrap();
    assert!(matches!(t.backward(b), Err(Error::Contract { .. })));
}

#[test]
fn log_of_zero_is_reported() {
    let mut t = Tape::new(Mode::Train, 0);
    let a = t.input(Tensor::from_vec(vec![0.0, 1.0]));
    assert!(matches!(t.log(a), Err(Error::NonFinite { .. })));
}

#[test]
fn dropout_is_identity_in_eval_and_seeded_in_train() {
    let x = Tensor::new(vec![4, 8], (0..32).map(|v| v as f64 + 1.0).collect()).unwrap();
    let mut t = Tape::new(Mode::Eval, 1);
    let v = t.constant(x.clone());
    let y = t.dropout(v, 0.5).unwrap();
    assert_eq!(t.value(y), &x);

    let run = |seed| {
        let mut t = Tape::new(Mode::Train, seed);
        let v = t.constant(x.clone());
        let y = t.dropout(v, 0.5).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(9), run(9));
    let kept = run(9);
    for (a, b) in kept.data().iter().zip(x.data()) {
        assert!(*a == 0.0 || (*a - 2.0 * b).abs() < 1e-12);
    }
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let mut store = ParamStore::new(42);
        let w = store.add("w", &[3, 2], Init::Xavier).unwrap();
        let mut t = Tape::new(Mode::Train, 42);
        let x = t.constant(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.1, 0.5, 0.9]).unwrap());
        let wv = t.param(&store, w);
        let y = t.matmul(x, wv).unwrap();
        let d = t.dropout(y, 0.2).unwrap();
        let loss = t.cross_entropy(d, &[0, 1]).unwrap();
        let g = t.backward(loss).unwrap();
        t.accumulate(&g, &mut store);
        (t.value(loss).item().to_bits(), store.grad(w).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn optimizers_descend_a_quadratic() {
    for mut opt in [Box::new(Sgd::new(0.1, 0.9)) as Box<dyn Optimizer>, Box::new(Adam::new(0.1))] {
        let mut store = ParamStore::new(0);
        let w = store.add("w", &[2], Init::Ones).unwrap();
        for _ in 0..300 {
            store.zero_grad();
            let mut t = Tape::new(Mode::Train, 0);
            let v = t.param(&store, w);
            let target = t.constant(Tensor::from_vec(vec![3.0, -1.0]));
            let d = t.sub(v, target).unwrap();
            let sq = t.mul(d, d).unwrap();
            let loss = t.sum(sq).unwrap();
            let g = t.backward(loss).unwrap();
            t.accumulate(&g, &mut store);
            opt.step(&mut store);
        }
        assert!(close(store.value(w).data(), &[3.0, -1.0], 1e-3), "{:?}", store.value(w));
    }
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut store = ParamStore::new(0);
    let w = store.add("enc.w", &[2], Init::Ones).unwrap();
    store.set_trainable_prefix("enc.", false);
    let mut t = Tape::new(Mode::Train, 0);
    let v = t.param(&store, w);
    let s = t.sum(v).unwrap();
    assert!(t.backward(s).unwrap().wrt(v).is_none());
}

#[test]
fn checkpoint_round_trip() {
    let dir = std::env::temp_dir().join(format!("timemoe-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    let mut store = ParamStore::new(7);
    store.add("a.w", &[3, 2], Init::Xavier).unwrap();
    store.add("a.b", &[2], Init::Uniform(1.0)).unwrap();
    write_checkpoint(&path, serde_json::json!({"kind": "test"}), &store).unwrap();
    let (header, entries) = read_checkpoint(&path).unwrap();
    assert_eq!(header.meta["kind"], "test");
    assert_eq!(header.params[1].offset, 6 * 8);
    let mut fresh = ParamStore::new(99);
    fresh.add("a.w", &[3, 2], Init::Zeros).unwrap();
    fresh.add("a.b", &[2], Init::Zeros).unwrap();
    fresh.load(&entries).unwrap();
    for ((_, a), (_, b)) in store.entries().zip(fresh.entries()) {
        assert_eq!(a, b);
    }
    std::fs::remove_dir_all(&dir).ok();
}
