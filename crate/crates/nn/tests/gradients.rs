use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tamperlab_nn::{
    grad_check, Activation, ForwardCtx, GradCheckOptions, GradCheckReport, Graph, LayerSpec,
    Network, ParamStore, Tensor,
};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `specs`, then reduces the output to a BCE loss through a fixed
/// random readout so every output element influences the scalar.
fn check_stack(specs: &[LayerSpec], input: &[usize], batch: usize, seed: u64, train: bool) -> GradCheckReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::build(specs, input, &mut store, &mut rng, "n").unwrap();
    let out: usize = net.output_shape().iter().product();
    let mut shape = vec![batch];
    shape.extend_from_slice(input);
    let x = rand_tensor(&shape, seed + 1);
    let readout = rand_tensor(&[out, 1], seed + 2);
    let labels: Vec<f64> = (0..batch).map(|i| (i % 2) as f64).collect();
    grad_check(&mut store, &GradCheckOptions::default(), |store, g| {
        let xv = g.input(x.clone())?;
        let mut ctx = if train { ForwardCtx::train(seed + 3) } else { ForwardCtx::eval() };
        let y = net.forward(store, g, xv, &mut ctx)?;
        let flat = g.reshape(y, &[batch, out])?;
        let r = g.input(readout.clone())?;
        let logit = g.linear(flat, r, None)?;
        let p = g.sigmoid(logit)?;
        g.bce_loss(p, &labels)
    })
    .unwrap()
}

fn assert_below(r: &GradCheckReport, tol: f64) {
    assert!(r.checked > 0);
    assert!(r.max_rel_error < tol, "max rel error {} at {}", r.max_rel_error, r.worst);
}

#[test]
fn single_dense_with_bce() {
    let r = check_stack(&[LayerSpec::dense(1, Activation::Sigmoid)], &[6], 4, 1, true);
    assert_below(&r, 1e-5);
}

#[test]
fn conv_pool_dense_stack() {
    let specs = [
        LayerSpec::conv(4, 3, Activation::Relu),
        LayerSpec::pool(),
        LayerSpec::Flatten,
        LayerSpec::dense(3, Activation::Relu),
    ];
    assert_below(&check_stack(&specs, &[12, 2], 2, 2, true), 1e-4);
}

#[test]
fn attention_block() {
    let specs = [LayerSpec::MultiHeadAttention { heads: 2, head_dim: 3, model_dim: 4 }];
    assert_below(&check_stack(&specs, &[5, 4], 2, 3, true), 1e-4);
}

#[test]
fn batch_norm_training_mode() {
    let specs = [LayerSpec::conv_no_bias(3, 3), LayerSpec::batch_norm()];
    assert_below(&check_stack(&specs, &[6, 2], 2, 4, true), 1e-4);
}

#[test]
fn batch_norm_inference_mode() {
    assert_below(&check_stack(&[LayerSpec::batch_norm()], &[6, 3], 2, 5, false), 1e-4);
}

#[test]
fn layer_norm_gelu_ffn() {
    let specs = [
        LayerSpec::layer_norm(),
        LayerSpec::dense(8, Activation::Gelu),
        LayerSpec::dropout(0.1),
        LayerSpec::dense(4, Activation::Linear),
    ];
    assert_below(&check_stack(&specs, &[5, 4], 2, 6, true), 1e-4);
}

#[test]
fn pre_norm_encoder_block_with_encoding_and_pooling() {
    let specs = [
        LayerSpec::PositionalEncoding,
        LayerSpec::Residual {
            body: vec![
                LayerSpec::layer_norm(),
                LayerSpec::MultiHeadAttention { heads: 2, head_dim: 2, model_dim: 4 },
                LayerSpec::dropout(0.1),
            ],
            shortcut: vec![],
        },
        LayerSpec::GlobalAvgPool,
        LayerSpec::dense(2, Activation::Relu),
    ];
    assert_below(&check_stack(&specs, &[6, 4], 2, 7, true), 1e-4);
}

#[test]
fn projected_residual() {
    let specs = [LayerSpec::Residual {
        body: vec![LayerSpec::conv(4, 3, Activation::Relu), LayerSpec::conv(4, 3, Activation::Linear)],
        shortcut: vec![LayerSpec::conv(4, 1, Activation::Linear)],
    }];
    assert_below(&check_stack(&specs, &[7, 2], 2, 8, true), 1e-4);
}

#[test]
fn siamese_distance_and_contrastive_loss() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = Network::build(&[LayerSpec::dense(3, Activation::Linear)], &[5], &mut store, &mut rng, "e").unwrap();
    let x = rand_tensor(&[4, 5], 10);
    let labels = [1.0, 0.0];
    let r = grad_check(&mut store, &GradCheckOptions::default(), |store, g| {
        let xv = g.input(x.clone())?;
        let e = net.forward(store, g, xv, &mut ForwardCtx::eval())?;
        let a = g.slice_batch(e, 0, 2)?;
        let b = g.slice_batch(e, 2, 2)?;
        let d = g.pair_distance(a, b)?;
        g.contrastive_loss(d, &labels, 5.0)
    })
    .unwrap();
    assert_below(&r, 1e-4);
}

#[test]
fn corrupted_gradient_is_detected() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Network::build(&[LayerSpec::dense(1, Activation::Sigmoid)], &[3], &mut store, &mut rng, "d").unwrap();
    let x = rand_tensor(&[2, 3], 2);
    let opts = GradCheckOptions { corrupt_gradient: true, ..Default::default() };
    let r = grad_check(&mut store, &opts, |store, g| {
        let xv = g.input(x.clone())?;
        let p = net.forward(store, g, xv, &mut ForwardCtx::eval())?;
        g.bce_loss(p, &[1.0, 0.0])
    })
    .unwrap();
    assert!(r.max_rel_error > 1e-2);
}

#[test]
fn refuses_oversized_models() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Network::build(&[LayerSpec::dense(100, Activation::Linear)], &[60], &mut store, &mut rng, "d").unwrap();
    let r = grad_check(&mut store, &GradCheckOptions::default(), |store, g| {
        let xv = g.input(Tensor::zeros(&[1, 60]))?;
        let y = net.forward(store, g, xv, &mut ForwardCtx::eval())?;
        let p = g.sigmoid(y)?;
        g.bce_loss(p, &[0.0; 100])
    });
    assert!(r.is_err());
}

#[test]
fn weight_sharing_accumulates_both_branches() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Network::build(&[LayerSpec::dense(2, Activation::Linear)], &[3], &mut store, &mut rng, "s").unwrap();
    let a = rand_tensor(&[1, 3], 4);
    let b = rand_tensor(&[1, 3], 5);
    let grad_for = |inputs: &[&Tensor]| {
        let mut g = Graph::new();
        let mut outs = Vec::new();
        for t in inputs {
            let v = g.input((*t).clone()).unwrap();
            outs.push(net.forward(&store, &mut g, v, &mut ForwardCtx::eval()).unwrap());
        }
        let mut total = outs[0];
        for o in &outs[1..] {
            total = g.add(total, *o).unwrap();
        }
        let flat = g.reshape(total, &[1, 2]).unwrap();
        let ones = g.input(Tensor::full(&[2, 1], 1.0)).unwrap();
        let s = g.linear(flat, ones, None).unwrap();
        let p = g.sigmoid(s).unwrap();
        let l = g.bce_loss(p, &[1.0]).unwrap();
        g.backward(l).unwrap()
    };
    // two branches on separate inputs use one parameter leaf
    let shared = grad_for(&[&a, &b]);
    assert_eq!(shared.len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv_gradients_match_finite_differences(
        seed in 0u64..1000,
        kernel in prop::sample::select(vec![1usize, 3, 5, 7]),
        cin in 1usize..3,
        cout in 1usize..4,
        time in 7usize..12,
    ) {
        let r = check_stack(&[LayerSpec::conv(cout, kernel, Activation::Linear)], &[time, cin], 2, seed, true);
        prop_assert!(r.max_rel_error < 1e-4, "{} at {}", r.max_rel_error, r.worst);
    }

    #[test]
    fn attention_gradients_match_finite_differences(
        seed in 0u64..1000,
        heads in 1usize..3,
        head_dim in 1usize..4,
        time in 1usize..6,
    ) {
        let specs = [LayerSpec::MultiHeadAttention { heads, head_dim, model_dim: 4 }];
        let r = check_stack(&specs, &[time, 4], 2, seed, true);
        prop_assert!(r.max_rel_error < 1e-4, "{} at {}", r.max_rel_error, r.worst);
    }

    #[test]
    fn norm_gradients_match_finite_differences(seed in 0u64..1000, ch in 3usize..6, time in 2usize..6, layer in any::<bool>()) {
        let norm = if layer { LayerSpec::layer_norm() } else { LayerSpec::batch_norm() };
        let specs = [LayerSpec::conv(ch, 1, Activation::Linear), norm, LayerSpec::dense(2, Activation::Gelu)];
        let r = check_stack(&specs, &[time, 3], 2, seed, true);
        prop_assert!(r.max_rel_error < 1e-4, "{} at {}", r.max_rel_error, r.worst);
    }
}
