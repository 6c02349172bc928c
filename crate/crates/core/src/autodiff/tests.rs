use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<_>>())
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Central differences on every input element, compared with the tape.
/// Returns `None` when the configuration sits too close to a kink.
fn fd_max_rel_error(inputs: &[Tensor], build: &Build) -> Option<f64> {
    let h = 1e-5;
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let root = build(&mut tape, &vars);
    if tape.kink_distance() < 1e-3 {
        return None;
    }
    tape.backward(root).unwrap();
    let mut num = Vec::new();
    let mut ana = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            num.push((eval(&plus) - eval(&minus)) / (2.0 * h));
            ana.push(tape.grad(vars[i]).unwrap().data()[j]);
        }
    }
    let scale = num.iter().chain(&ana).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-8);
    Some(num.iter().zip(&ana).map(|(n, a)| (n - a).abs()).fold(0.0, f64::max) / scale)
}

fn check_random(shapes: &[&[usize]], build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < 20 {
        attempts += 1;
        assert!(attempts < 500, "could not find kink-free configurations");
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        if let Some(err) = fd_max_rel_error(&inputs, build) {
            assert!(err <= 1e-4, "relative error {err}");
            accepted += 1;
        }
    }
}

#[test]
fn relu_values_and_subgradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.5, 3.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.5, 3.0]);
}

#[test]
fn tanh_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 30.0, 1.0]));
    let y = tape.tanh(x);
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!(v[1] > 1.0 - 1e-6 && v[1] <= 1.0);
    assert_eq!(v[2], 1.0f64.tanh());
    assert!((v[2] - 0.761_594_155_955_764_9).abs() < 1e-15);
}

#[test]
fn batch_norm_hand_value_and_zero_scale() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 1], &[0.0, 2.0]));
    let g = tape.constant(Tensor::vector(vec![1.0]));
    let b = tape.constant(Tensor::vector(vec![0.0]));
    let (y, stats) = tape.batch_norm(x, g, b, NormStats::Batch, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![1.0]);
    assert_eq!(stats.var, vec![1.0]);

    let mut tape = Tape::new();
    let x = tape.constant(t(&[3, 2], &[1.0, 5.0, -2.0, 0.5, 3.0, 3.0]));
    let g = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let b = tape.constant(Tensor::vector(vec![0.25, -1.0]));
    let (y, _) = tape.batch_norm(x, g, b, NormStats::Batch, 1e-5).unwrap();
    for r in 0..3 {
        assert_eq!(tape.value(y).row(r), &[0.25, -1.0]);
    }
}

#[test]
fn batch_norm_already_normalized_input_is_nearly_unchanged() {
    let mut tape = Tape::new();
    let data = [-1.0, 1.0, 1.0, -1.0];
    let x = tape.constant(t(&[4, 1], &data));
    let g = tape.constant(Tensor::vector(vec![1.0]));
    let b = tape.constant(Tensor::vector(vec![0.0]));
    let (y, _) = tape.batch_norm(x, g, b, NormStats::Batch, 1e-5).unwrap();
    for (o, i) in tape.value(y).data().iter().zip(&data) {
        assert!((o - i).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_rejects_single_row_batch() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let g = tape.constant(Tensor::vector(vec![1.0, 1.0]));
    let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let err = tape.batch_norm(x, g, b, NormStats::Batch, 1e-5).unwrap_err();
    assert!(matches!(err, DcaError::DegenerateBatch(1)));
}

#[test]
fn batch_norm_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = 1e-5;
    let xv = random(&mut rng, &[16, 5]);
    let mut tape = Tape::new();
    let x = tape.constant(xv);
    let g = tape.constant(Tensor::ones(&[5]));
    let b = tape.constant(Tensor::zeros(&[5]));
    let (y, stats) = tape.batch_norm(x, g, b, NormStats::Batch, eps).unwrap();
    let stats = stats.unwrap();
    let out = tape.value(y);
    for j in 0..5 {
        let col: Vec<f64> = (0..16).map(|r| out.get(r, j)).collect();
        let mean = col.iter().sum::<f64>() / 16.0;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-10);
        let expected = stats.var[j] / (stats.var[j] + eps);
        assert!((var - expected).abs() <= 1e-6);
    }
}

#[test]
fn distance_values() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let d = tape.euclidean_distance(a, b).unwrap();
    assert_eq!(tape.value(d).item(), 5.0);
    assert!(tape.value(d).shape().is_empty());

    let a2 = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let b2 = tape.constant(Tensor::vector(vec![7.5, 10.0]));
    let d2 = tape.euclidean_distance(a2, b2).unwrap();
    assert_eq!(tape.value(d2).item(), 2.5 * 5.0);

    let c = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(tape.euclidean_distance(a, c).is_err());
}

#[test]
fn distance_gradient_at_coincident_points_is_zero() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::vector(vec![1.0, -2.0]));
    let b = tape.param(Tensor::vector(vec![1.0, -2.0]));
    let d = tape.euclidean_distance(a, b).unwrap();
    assert_eq!(tape.value(d).item(), 0.0);
    tape.backward(d).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backward_of_sum_is_ones_and_root_grad_is_one() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2, 3]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 3]));
    assert_eq!(tape.grad(s).unwrap().item(), 1.0);
}

#[test]
fn backward_squared_norm() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn unreachable_leaf_gets_exact_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.param(Tensor::vector(vec![3.0]));
    let s = tape.sum(y);
    let _late = tape.tanh(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn constants_have_no_grad_slot() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0]));
    let x = tape.param(Tensor::vector(vec![2.0]));
    let p = tape.mul(c, x).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(DcaError::Contract(_))));
}

#[test]
fn gradcheck_relu_matmul() {
    check_random(&[&[3, 4], &[4, 5], &[5]], &|tape, v| {
        let h = tape.matmul(v[0], v[1]).unwrap();
        let h = tape.add_row(h, v[2]).unwrap();
        let h = tape.relu(h);
        tape.sum(h)
    });
}

#[test]
fn gradcheck_tanh_sigmoid_log_clamp() {
    check_random(&[&[4, 3]], &|tape, v| {
        let a = tape.tanh(v[0]);
        let s = tape.sigmoid(a);
        let c = tape.clamp(s, 0.3, 0.7);
        let l = tape.log(c);
        tape.mean(l)
    });
}

#[test]
fn gradcheck_batch_norm_train_and_eval() {
    check_random(&[&[6, 3], &[3], &[3], &[6, 3]], &|tape, v| {
        let (y, _) = tape.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5).unwrap();
        let w = tape.mul(y, v[3]).unwrap();
        tape.sum(w)
    });
    check_random(&[&[6, 3], &[3], &[3], &[6, 3]], &|tape, v| {
        let mean = [0.1, -0.2, 0.3];
        let var = [0.5, 1.5, 2.0];
        let stats = NormStats::Running { mean: &mean, var: &var };
        let (y, _) = tape.batch_norm(v[0], v[1], v[2], stats, 1e-5).unwrap();
        let w = tape.mul(y, v[3]).unwrap();
        tape.sum(w)
    });
}

#[test]
fn gradcheck_gather_distance_group_means() {
    check_random(&[&[5, 4], &[4, 4]], &|tape, v| {
        let g = tape.gather_rows(v[0], &[4, 0, 2, 2]).unwrap();
        let d = tape.row_distance(g, v[1]).unwrap();
        let m = tape.group_means(v[0], &[vec![0, 1], vec![2, 3, 4]]).unwrap();
        let m2 = tape.group_means(v[1], &[vec![0, 3], vec![1, 2]]).unwrap();
        let e = tape.row_distance(m, m2).unwrap();
        let a = tape.sum(d);
        let b = tape.sum(e);
        let s = tape.sub(a, b).unwrap();
        let s = tape.scale(s, 0.7);
        tape.add_scalar(s, 3.0)
    });
}

#[test]
fn gradcheck_vector_distance() {
    check_random(&[&[6], &[6]], &|tape, v| tape.euclidean_distance(v[0], v[1]).unwrap());
}
