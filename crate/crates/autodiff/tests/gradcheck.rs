//! Central finite-difference checks for every primitive and composite layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timemoe_autodiff::nn::{self, BatchNorm, Conv1d, GruCell, LayerNorm, Linear, MultiHeadAttention};
use timemoe_autodiff::{Mode, ParamStore, Result, Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-7;
const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    // keep values away from relu's kink
    let data = (0..n)
        .map(|_| {
            let mut v: f64 = rng.gen_range(lo..hi);
            if v.abs() < 1e-2 {
                v += 0.05;
            }
            v
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn compare(analytic: &[f64], numeric: &[f64], what: &str) {
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if a.abs() < 1e-8 {
            assert!((a - n).abs() < ABS_TOL, "{what}[{i}]: analytic {a} numeric {n}");
        } else {
            let rel = (a - n).abs() / a.abs().max(n.abs());
            assert!(rel < REL_TOL, "{what}[{i}]: analytic {a} numeric {n} rel {rel}");
        }
    }
}

/// Reduces any output to a scalar with fixed random weights.
fn weighted_loss(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.reshaped(tape.shape(out).to_vec())?);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn check_inputs<F>(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, lo, hi)).collect();
        let eval = |inputs: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor, Option<Vec<Vec<f64>>>) {
            let mut tape = Tape::new(Mode::Train, 7);
            let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
            let out = build(&mut tape, &vars).unwrap();
            let out_val = tape.value(out).clone();
            let Some(w) = weights else { return (0.0, out_val, None) };
            let loss = weighted_loss(&mut tape, out, w).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g = vars
                .iter()
                .map(|&v| grads.wrt(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
                .collect();
            (tape.value(loss).item(), out_val, Some(g))
        };
        let (_, out, _) = eval(&inputs, None);
        let weights = rand_tensor(&mut rng, &[out.len()], -1.0, 1.0);
        let (_, _, analytic) = eval(&inputs, Some(&weights));
        let analytic = analytic.unwrap();
        for (i, input) in inputs.iter().enumerate() {
            let mut numeric = vec![0.0; input.len()];
            for j in 0..input.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += STEP;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= STEP;
                let fp = eval(&plus, Some(&weights)).0;
                let fm = eval(&minus, Some(&weights)).0;
                numeric[j] = (fp - fm) / (2.0 * STEP);
            }
            assert!(analytic[i].iter().any(|g| g.abs() > 1e-12), "{name}: all-zero gradient");
            compare(&analytic[i], &numeric, &format!("{name} seed {seed} input {i}"));
        }
    }
}

/// Checks gradients of every trainable parameter in a store.
fn check_params<F>(name: &str, store: &ParamStore, input: &Tensor, build: F)
where
    F: Fn(&mut Tape, &ParamStore, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let loss_of = |store: &ParamStore, weights: &Tensor| -> f64 {
        let mut tape = Tape::new(Mode::Train, 3);
        let x = tape.constant(input.clone());
        let out = build(&mut tape, store, x).unwrap();
        let loss = weighted_loss(&mut tape, out, weights).unwrap();
        tape.value(loss).item()
    };
    let mut tape = Tape::new(Mode::Train, 3);
    let x = tape.constant(input.clone());
    let out = build(&mut tape, store, x).unwrap();
    let weights = rand_tensor(&mut rng, &[tape.value(out).len()], -1.0, 1.0);
    let loss = weighted_loss(&mut tape, out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    tape.accumulate(&grads, &mut with_grads);
    assert!(with_grads.grad_norm() > 0.0, "{name}: zero parameter gradients");
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let mut numeric = vec![0.0; store.value(id).len()];
        for j in 0..numeric.len() {
            let mut p = store.clone();
            p.value_mut(id).data_mut()[j] += STEP;
            let mut m = store.clone();
            m.value_mut(id).data_mut()[j] -= STEP;
            numeric[j] = (loss_of(&p, &weights) - loss_of(&m, &weights)) / (2.0 * STEP);
        }
        compare(with_grads.grad(id), &numeric, &format!("{name} param {}", store.name(id)));
    }
}

#[test]
fn elementwise_binary() {
    check_inputs("add", &[&[3, 4], &[3, 4]], -2.0, 2.0, |t, v| t.add(v[0], v[1]));
    check_inputs("sub", &[&[3, 4], &[3, 4]], -2.0, 2.0, |t, v| t.sub(v[0], v[1]));
    check_inputs("mul", &[&[3, 4], &[3, 4]], -2.0, 2.0, |t, v| t.mul(v[0], v[1]));
    check_inputs("div", &[&[3, 4], &[3, 4]], 0.5, 2.0, |t, v| t.div(v[0], v[1]));
}

#[test]
fn broadcasting() {
    check_inputs("add_row", &[&[2, 3, 4], &[4]], -2.0, 2.0, |t, v| t.add_row(v[0], v[1]));
    check_inputs("mul_row", &[&[2, 3, 4], &[4]], -2.0, 2.0, |t, v| t.mul_row(v[0], v[1]));
    check_inputs("scale_rows", &[&[6, 4], &[6]], -2.0, 2.0, |t, v| t.scale_rows(v[0], v[1]));
    check_inputs("scale", &[&[5]], -2.0, 2.0, |t, v| t.scale(v[0], -1.7));
    check_inputs("add_scalar", &[&[5]], -2.0, 2.0, |t, v| t.add_scalar(v[0], 0.3));
}

#[test]
fn matmul_variants() {
    check_inputs("matmul2d", &[&[3, 4], &[4, 5]], -1.0, 1.0, |t, v| t.matmul(v[0], v[1]));
    check_inputs("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], -1.0, 1.0, |t, v| t.matmul(v[0], v[1]));
    check_inputs("matmul_shared", &[&[2, 3, 4], &[4, 2]], -1.0, 1.0, |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn shape_ops() {
    check_inputs("transpose", &[&[2, 3, 4]], -1.0, 1.0, |t, v| t.transpose(v[0]));
    check_inputs("reshape", &[&[2, 6]], -1.0, 1.0, |t, v| t.reshape(v[0], &[3, 4]));
    check_inputs("concat0", &[&[2, 3], &[1, 3]], -1.0, 1.0, |t, v| t.concat(&[v[0], v[1]], 0));
    check_inputs("concat_last", &[&[2, 2, 3], &[2, 2, 1]], -1.0, 1.0, |t, v| t.concat(&[v[0], v[1]], 2));
    check_inputs("slice", &[&[3, 5]], -1.0, 1.0, |t, v| t.slice(v[0], 1, 1, 3));
    check_inputs("index_select", &[&[4, 3]], -1.0, 1.0, |t, v| t.index_select(v[0], &[2, 0, 2, 3]));
    check_inputs("take", &[&[3, 3]], -1.0, 1.0, |t, v| t.take(v[0], vec![8, 0, 4, 4], &[2, 2]));
}

#[test]
fn activations() {
    check_inputs("softmax", &[&[3, 5]], -2.0, 2.0, |t, v| t.softmax(v[0]));
    check_inputs("log_softmax", &[&[3, 5]], -2.0, 2.0, |t, v| t.log_softmax(v[0]));
    check_inputs("relu", &[&[10]], -2.0, 2.0, |t, v| t.relu(v[0]));
    check_inputs("sigmoid", &[&[10]], -3.0, 3.0, |t, v| t.sigmoid(v[0]));
    check_inputs("tanh", &[&[10]], -3.0, 3.0, |t, v| t.tanh(v[0]));
    check_inputs("exp", &[&[10]], -2.0, 2.0, |t, v| t.exp(v[0]));
    check_inputs("log", &[&[10]], 0.2, 3.0, |t, v| t.log(v[0]));
}

#[test]
fn normalization() {
    check_inputs("normalize", &[&[3, 6]], -2.0, 2.0, |t, v| t.normalize(v[0], 1e-5));
    check_inputs("layer_norm", &[&[3, 6], &[6], &[6]], -2.0, 2.0, |t, v| {
        nn::layer_norm(t, v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn conv_and_losses() {
    check_inputs("conv1d", &[&[2, 5, 3], &[4, 3, 3]], -1.0, 1.0, |t, v| t.conv1d(v[0], v[1]));
    check_inputs("cross_entropy", &[&[4, 3]], -2.0, 2.0, |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]));
    check_inputs("sum", &[&[2, 3]], -1.0, 1.0, |t, v| t.sum(v[0]));
    check_inputs("mean", &[&[2, 3]], -1.0, 1.0, |t, v| t.mean(v[0]));
    check_inputs("sum_axis0", &[&[2, 3, 4]], -1.0, 1.0, |t, v| t.sum_axis(v[0], 0));
    check_inputs("sum_axis1", &[&[2, 3, 4]], -1.0, 1.0, |t, v| t.sum_axis(v[0], 1));
    check_inputs("mean_axis2", &[&[2, 3, 4]], -1.0, 1.0, |t, v| t.mean_axis(v[0], 2));
    check_inputs("dropout", &[&[4, 5]], -1.0, 1.0, |t, v| t.dropout(v[0], 0.3));
}

#[test]
fn composite_attention_inputs() {
    check_inputs("sdpa", &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]], -1.0, 1.0, |t, v| {
        nn::scaled_dot_product_attention(t, v[0], v[1], v[2])
    });
}

#[test]
fn layer_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut store = ParamStore::new(1);
    let lin = Linear::new(&mut store, "lin", 4, 3, true).unwrap();
    check_params("linear", &store, &rand_tensor(&mut rng, &[5, 4], -1.0, 1.0), |t, s, x| lin.forward(t, s, x));

    let mut store = ParamStore::new(2);
    let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
    check_params("layer_norm", &store, &rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), |t, s, x| ln.forward(t, s, x));

    let mut store = ParamStore::new(3);
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2).unwrap();
    let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    check_params("mha", &store, &x, |t, s, x| mha.forward(t, s, x, x));

    let mut store = ParamStore::new(4);
    let gru = GruCell::new(&mut store, "gru", 3, 4).unwrap();
    let h0 = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
    check_params("gru", &store, &rand_tensor(&mut rng, &[2, 3], -1.0, 1.0), |t, s, x| {
        let h = t.constant(h0.clone());
        gru.step(t, s, x, h)
    });

    let mut store = ParamStore::new(5);
    let conv = Conv1d::new(&mut store, "conv", 3, 2, 3).unwrap();
    check_params("conv", &store, &rand_tensor(&mut rng, &[1, 6, 3], -1.0, 1.0), |t, s, x| conv.forward(t, s, x));

    let mut store = ParamStore::new(6);
    let bn = BatchNorm::new(&mut store, "bn", 3).unwrap();
    check_params("batch_norm", &store, &rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0), |t, s, x| bn.forward(t, s, x));
}

#[test]
fn gru_and_attention_inputs() {
    let mut store = ParamStore::new(9);
    let gru = GruCell::new(&mut store, "gru", 3, 2).unwrap();
    check_inputs("gru_inputs", &[&[2, 3], &[2, 2]], -1.0, 1.0, |t, v| gru.step(t, &store, v[0], v[1]));
    let mut store = ParamStore::new(10);
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2).unwrap();
    check_inputs("mha_inputs", &[&[1, 2, 4], &[1, 3, 4]], -1.0, 1.0, |t, v| mha.forward(t, &store, v[0], v[1]));
}
