//! Convolutions split into row blocks agree with the single-block path.

use derain_tensor::conv::set_patch_budget;
use derain_tensor::{Graph, Tensor};
use proptest::prelude::*;

struct Outcome {
    value: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

fn run(transposed: bool, x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, budget: usize) -> Outcome {
    set_patch_budget(budget);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let wv = g.leaf(w.clone(), true);
    let out = if transposed {
        g.conv_transpose2d(xv, wv, None, stride, 1, stride - 1).unwrap()
    } else {
        g.conv2d(xv, wv, None, stride, 1).unwrap()
    };
    let sq = g.abs(out);
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    Outcome {
        value: g.value(out).data().to_vec(),
        grads: vec![g.grad(xv).unwrap().data().to_vec(), g.grad(wv).unwrap().data().to_vec()],
    }
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn row_blocks_match_whole_matrix(
        cin in 1usize..4,
        cout in 1usize..4,
        h in 3usize..9,
        w in 3usize..9,
        stride in 1usize..3,
        transposed in any::<bool>(),
        budget in 1usize..64,
        seed in any::<u64>(),
    ) {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let x = Tensor::from_fn(&[cin, h, w], |_| next());
        let wshape = if transposed { [cin, cout, 3, 3] } else { [cout, cin, 3, 3] };
        let wt = Tensor::from_fn(&wshape, |_| next());
        let whole = run(transposed, &x, &wt, stride, usize::MAX);
        let split = run(transposed, &x, &wt, stride, budget);
        set_patch_budget(1 << 22);
        prop_assert!(close(&whole.value, &split.value));
        for (a, b) in whole.grads.iter().zip(&split.grads) {
            prop_assert!(close(a, b));
        }
    }
}
