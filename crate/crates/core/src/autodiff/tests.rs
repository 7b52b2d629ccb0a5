use super::gradcheck::{check_gradients, project};
use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn identity_sum_has_unit_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0));
    let loss = tape.sum(x).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0]);
}

#[test]
fn independent_leaf_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.param(Tensor::scalar(5.0));
    let loss = tape.sum(x).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(y).is_none());
    assert_eq!(g.wrt(y).data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_vars() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(vec![2]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    assert!(matches!(tape.backward(Var(99)), Err(Error::UnknownVar(99))));
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
    let d = tape.detach(x);
    assert_eq!(tape.value(d), tape.value(x));
    let loss = tape.sum(d).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn bridge_of_detached_values_is_gradient_free() {
    let mut tape = Tape::<f64>::new();
    let h = tape.param(t(&[3], &[1.0, 1.0, 0.0]));
    let p = tape.param(t(&[3], &[0.5, 0.3, 0.2]));
    let (hd, pd) = (tape.detach(h), tape.detach(p));
    let m = tape.sub(hd, pd).unwrap();
    let loss = project(&mut tape, m, 7).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(h).data().iter().all(|&v| v == 0.0));
    assert!(g.wrt(p).data().iter().all(|&v| v == 0.0));
}

#[test]
fn depthwise_same_padding_shape() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![4, 16, 8]));
    let w = tape.constant(Tensor::zeros(vec![4, 1, 3, 3]));
    let y = tape.depthwise3x3(x, w).unwrap();
    assert_eq!(tape.shape(y), &[4, 16, 8]);
}

#[test]
fn relu_of_negatives_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[4], &[-1.0, -0.1, -3.0, -1e-9]));
    let y = tape.relu(x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn unit_channel_weights_add() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64));
    let b = tape.constant(Tensor::from_fn(vec![2, 3, 2, 2], |i| (i * i) as f64 * 0.5));
    let ones = tape.constant(Tensor::ones(vec![2, 3]));
    let y = tape.channel_weighted_sum(a, ones, b, ones).unwrap();
    let direct = tape.add(a, b).unwrap();
    assert_eq!(tape.value(y), tape.value(direct));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![3, 2]));
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn batch_norm_train_normalizes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(vec![4, 3, 2, 2], |i| ((i * 7919) % 23) as f64 * 0.3 - 2.0));
    let g = tape.constant(Tensor::ones(vec![3]));
    let b = tape.constant(Tensor::zeros(vec![3]));
    let y = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    let yv = tape.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..4).map(move |j| (n * 3 + c) * 4 + j)).map(|i| yv[i]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn cross_entropy_uniform_is_log_c() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(vec![3, 5]));
    let l = tape.cross_entropy(z, &[0, 2, 4]).unwrap();
    assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
    assert!(tape.cross_entropy(z, &[0, 5, 1]).is_err());
}

#[test]
fn triplet_identical_embeddings_give_margin() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(vec![4, 3]));
    let l = tape.triplet_batch_hard(x, &[0, 0, 1, 1], 0.3).unwrap();
    assert!((tape.value(l).item() - 0.3).abs() < 1e-12);
    assert!(tape.triplet_batch_hard(x, &[0, 0, 0, 0], 0.3).is_err());
}

#[test]
fn fault_injection_breaks_gradcheck() {
    let x = Tensor::new(vec![2, 3], vec![0.5, -0.7, 1.2, -0.3, 0.9, 0.2]).unwrap();
    let f = |tape: &mut Tape<f64>, v: &[Var]| {
        let y = tape.relu(v[0])?;
        project(tape, y, 3)
    };
    let ok = check_gradients(&[x.clone()], 1e-5, None, f).unwrap();
    assert!(ok.max_error() < 1e-8);
    let bad = check_gradients(&[x], 1e-5, Some(OpKind::Relu), f).unwrap();
    assert!(bad.max_error() > 1.0);
}

#[test]
fn same_tape_twice_is_bitwise_identical() {
    let run = || {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(vec![2, 3, 6, 5], |i| (i as f64 * 0.37).sin()));
        let w = tape.param(Tensor::from_fn(vec![4, 3, 3, 3], |i| (i as f64 * 0.11).cos()));
        let y = tape.conv2d(x, w, 1, 1, 1).unwrap();
        let loss = project(&mut tape, y, 1).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.value(y).clone(), g.wrt(w))
    };
    assert_eq!(run(), run());
}

#[test]
fn op_names_round_trip() {
    for k in OpKind::ALL {
        assert_eq!(OpKind::from_name(&k.name()), Some(k));
    }
    assert_eq!(OpKind::BatchNormTrain.name(), "batch_norm_train");
    assert_eq!(OpKind::from_name("Conv2d"), Some(OpKind::Conv2d));
    assert_eq!(OpKind::from_name("nosuchop"), None);
}
