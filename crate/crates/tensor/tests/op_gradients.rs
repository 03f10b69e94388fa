//! Every tape op checked against central finite differences in 64-bit.

use derain_tensor::gradcheck::{numerical_grad, relative_error};
use derain_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contract the op output against a fixed random tensor so every output
/// element contributes a distinct weight to the scalar.
fn contract(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let shape = g.shape(out).to_vec();
    let rows = match shape.len() {
        3 => {
            let idx: Vec<usize> = (0..shape[1] * shape[2]).collect();
            g.gather_locations(out, &idx).unwrap()
        }
        _ => out,
    };
    let w = g.constant(weights.clone().reshape(g.shape(rows)).unwrap());
    let prod = g.row_dot(rows, w).unwrap();
    g.sum(prod)
}

/// Checks d(loss)/d(inputs) for `build` at several random points.
fn check(
    name: &str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..3 {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let weights = random(&mut rng, &[g.value(out).numel()]);
        let loss = if g.value(out).numel() == 1 {
            out
        } else {
            contract(&mut g, out, &weights)
        };
        g.backward(loss).unwrap();
        for (k, input) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[k]).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; input.numel()]);
            let numeric = numerical_grad(input, EPS, |probe| {
                let mut g2 = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g2.leaf(if j == k { probe.clone() } else { t.clone() }, true))
                    .collect();
                let o = build(&mut g2, &vs);
                let l = if g2.value(o).numel() == 1 { o } else { contract(&mut g2, o, &weights) };
                g2.value(l).item()
            });
            let err = relative_error(&analytic, &numeric, 1e-8);
            assert!(err < TOL, "{name} trial {trial} input {k}: rel err {err:e}");
        }
    }
}

#[test]
fn conv2d_strided_and_padded() {
    check("conv2d", &[&[2, 7, 6], &[3, 2, 3, 3], &[3]], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap()
    });
    check("conv2d_k4", &[&[2, 8, 8], &[2, 2, 4, 4]], |g, v| g.conv2d(v[0], v[1], None, 1, 1).unwrap());
}

#[test]
fn conv_transpose2d_doubles_extent() {
    check("convT", &[&[3, 4, 5], &[3, 2, 3, 3], &[2]], |g, v| {
        let out = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1).unwrap();
        assert_eq!(g.shape(out), &[2, 8, 10]);
        out
    });
}

#[test]
fn reflect_pad_and_instance_norm() {
    check("reflect", &[&[2, 5, 4]], |g, v| g.reflect_pad(v[0], 2).unwrap());
    check("inorm", &[&[3, 4, 5]], |g, v| g.instance_norm(v[0], 1e-5).unwrap());
}

#[test]
fn pointwise_ops() {
    check("tanh", &[&[2, 3, 3]], |g, v| g.tanh(v[0]));
    check("lrelu", &[&[2, 3, 3]], |g, v| g.leaky_relu(v[0], 0.2));
    check("relu", &[&[2, 3, 3]], |g, v| g.relu(v[0]));
    check("abs", &[&[2, 3, 3]], |g, v| g.abs(v[0]));
    check("sub_add", &[&[2, 3, 3], &[2, 3, 3]], |g, v| {
        let d = g.sub(v[0], v[1]).unwrap();
        let s = g.add(d, v[0]).unwrap();
        g.scale(s, 0.5)
    });
    check("mean", &[&[4, 5]], |g, v| g.mean(v[0]));
}

#[test]
fn matrix_ops() {
    check("linear", &[&[4, 5], &[3, 5], &[3]], |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap());
    check("matmul_nt", &[&[4, 6], &[5, 6]], |g, v| g.matmul_nt(v[0], v[1]).unwrap());
    check("row_dot", &[&[4, 6], &[4, 6]], |g, v| g.row_dot(v[0], v[1]).unwrap());
    check("row_norm", &[&[4, 6]], |g, v| g.row_normalize(v[0], 1e-9).unwrap());
    check("concat", &[&[3, 2], &[3, 4], &[2, 6]], |g, v| {
        let c = g.concat_cols(v[0], v[1]).unwrap();
        g.concat_rows(&[c, v[2]]).unwrap()
    });
    check("gather", &[&[3, 4, 4]], |g, v| g.gather_locations(v[0], &[0, 5, 15, 5]).unwrap());
}

#[test]
fn loss_kernels() {
    check("ce", &[&[4, 7]], |g, v| g.cross_entropy(v[0], &[0, 3, 6, 2]).unwrap());
    check("logsig_pos", &[&[1, 3, 3]], |g, v| g.log_sigmoid_mean(v[0], 1.0));
    check("logsig_neg", &[&[1, 3, 3]], |g, v| g.log_sigmoid_mean(v[0], -1.0));
    check("lsq", &[&[1, 3, 3]], |g, v| g.squared_error_mean(v[0], 1.0));
    check("spectral_one", &[&[2, 4, 6]], |g, v| g.spectral_energy(v[0], true).unwrap());
    check("spectral_one_odd", &[&[1, 5, 5]], |g, v| g.spectral_energy(v[0], true).unwrap());
    check("spectral_two", &[&[2, 4, 6]], |g, v| g.spectral_energy(v[0], false).unwrap());
}

#[test]
fn shared_parameter_accumulates_once() {
    let mut g = Graph::<f64>::new();
    let id = derain_tensor::ParamId { group: 0, index: 0 };
    let w = Tensor::new(&[2], vec![1.5, -2.0]).unwrap();
    let a = g.param(id, &w);
    let b = g.param(id, &w);
    assert_eq!(a, b);
    let s = g.add(a, b).unwrap();
    let l = g.sum(s);
    g.backward(l).unwrap();
    assert_eq!(g.param_grad(id).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    assert!(g.conv2d(x, w, None, 1, 0).is_err());
    let small = g.constant(Tensor::zeros(&[3, 2, 2]));
    assert!(g.reflect_pad(small, 3).is_err());
    let v = g.constant(Tensor::zeros(&[3, 4]));
    assert!(g.backward(v).is_err());
}
