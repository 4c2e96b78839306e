//! Tape gradients against central finite differences (h = 1e-5).

mod common;

use common::{check, check_coords, project, uniform};
use ctts_core::model::{CttsConfig, CttsModel};
use ctts_core::nn::{Builder, ForwardMode, MultiHeadAttention, ParamStore};
use ctts_core::tensor::{Tape, Tensor, TensorError, UnaryKind, Var};

const FLOOR: f64 = 1e-8;
const TOL: f64 = 1e-4;
/// Composed graphs: one ulp of an O(1) loss over 2h is ~1e-11, so
/// coordinates with smaller true gradients are compared against this floor.
const MODEL_FLOOR: f64 = 1e-6;

fn assert_close(name: &str, worst: common::Worst, tol: f64) {
    println!("{name}: max rel err {:.3e}", worst.rel);
    assert!(worst.rel < tol, "{name}: {worst:?}");
}

#[test]
fn matmul_matches_finite_differences() {
    let w = check(
        &[uniform(&[3, 4], 1), uniform(&[4, 2], 2)],
        |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, 3)
        },
        FLOOR,
    );
    assert_close("matmul", w, 1e-6);
}

#[test]
fn matmul_identity_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let i = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let b = t.constant(Tensor::from_rows(&[vec![5.0], vec![7.0]]));
    let ai = t.matmul(a, i).unwrap();
    assert_eq!(t.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
    let ib = t.matmul(i, b).unwrap();
    assert_eq!(t.value(ib).data(), &[5.0, 7.0]);
    let bad = t.matmul(b, a);
    assert!(matches!(bad, Err(TensorError::Shape { .. })));
}

#[test]
fn conv1d_matches_finite_differences() {
    let w = check(
        &[uniform(&[2, 80], 4), uniform(&[8, 16], 5), uniform(&[8], 6)],
        |t, v| {
            let y = t.conv1d(v[0], v[1], v[2], 8).unwrap();
            project(t, y, 7)
        },
        FLOOR,
    );
    assert_close("conv1d", w, 1e-5);
}

#[test]
fn conv1d_token_count_and_value() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(&[1, 80]));
    let k = t.constant(Tensor::ones(&[1, 16]));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv1d(x, k, b, 8).unwrap();
    assert_eq!(t.shape(y), &[1, 9, 1]);
    assert!(t.value(y).data().iter().all(|&v| v == 16.0));
    let short = t.constant(Tensor::ones(&[1, 15]));
    assert!(t.conv1d(short, k, b, 8).is_err());
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let x = uniform(&[5], 8);
    for row in 0..5 {
        let w = check(
            std::slice::from_ref(&x),
            |t, v| {
                let s = t.softmax(v[0]).unwrap();
                t.slice(s, 0, row, 1).map(|r| t.sum(r)).unwrap()
            },
            FLOOR,
        );
        assert_close("softmax row", w, 1e-6);
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros(&[3]));
    let s = t.softmax(z).unwrap();
    for &p in t.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = t.constant(Tensor::new(vec![3], vec![1000.0, 0.0, 0.0]).unwrap());
    let s = t.softmax(big).unwrap();
    let p = t.value(s).data();
    assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300 && p.iter().all(|v| v.is_finite()));
}

fn unary_case(kind: UnaryKind, shift: f64, seed: u64) {
    let w = check(
        &[uniform(&[3, 5], seed)],
        |t, v| {
            let x = t.add_scalar(v[0], shift);
            let y = t.unary(kind, x);
            project(t, y, seed + 1)
        },
        FLOOR,
    );
    assert_close(&format!("{kind:?}"), w, TOL);
}

#[test]
fn elementwise_unary_ops() {
    unary_case(UnaryKind::Gelu, 0.0, 10);
    unary_case(UnaryKind::Tanh, 0.0, 11);
    unary_case(UnaryKind::Sigmoid, 0.0, 12);
    unary_case(UnaryKind::Softplus, 0.0, 13);
    unary_case(UnaryKind::Exp, 0.0, 14);
    unary_case(UnaryKind::Log, 2.0, 15);
    unary_case(UnaryKind::Square, 0.0, 16);
    unary_case(UnaryKind::Relu, 0.0, 17);
}

#[test]
fn binary_ops_with_broadcasting() {
    type Op = fn(&mut Tape, Var, Var) -> Var;
    let ops: [(&str, Op); 4] = [
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("sub", |t, a, b| t.sub(a, b).unwrap()),
        ("mul", |t, a, b| t.mul(a, b).unwrap()),
        ("div", |t, a, b| {
            let d = t.add_scalar(b, 2.5);
            t.div(a, d).unwrap()
        }),
    ];
    for (k, (name, op)) in ops.iter().enumerate() {
        for rhs in [vec![2, 3, 4], vec![3, 4], vec![4]] {
            let w = check(
                &[uniform(&[2, 3, 4], 20 + k as u64), uniform(&rhs, 30 + k as u64)],
                |t, v| {
                    let y = op(t, v[0], v[1]);
                    project(t, y, 40)
                },
                FLOOR,
            );
            assert_close(name, w, TOL);
        }
    }
}

#[test]
fn scaling_and_reductions() {
    let w = check(
        &[uniform(&[2, 3, 4], 50)],
        |t, v| {
            let a = t.scale(v[0], -1.7);
            let a = t.add_scalar(a, 0.3);
            let m = t.mean_axis(a, 1).unwrap();
            let s = project(t, m, 51);
            let mean = t.mean(a);
            t.add(s, mean).unwrap()
        },
        FLOOR,
    );
    assert_close("scale/mean_axis/mean", w, TOL);
}

#[test]
fn batch_matmul_both_layouts() {
    for transpose_b in [false, true] {
        let b_shape = if transpose_b { [3, 5, 4] } else { [3, 4, 5] };
        let w = check(
            &[uniform(&[3, 2, 4], 60), uniform(&b_shape, 61)],
            |t, v| {
                let y = t.batch_matmul(v[0], v[1], transpose_b).unwrap();
                project(t, y, 62)
            },
            FLOOR,
        );
        assert_close("batch_matmul", w, TOL);
    }
}

#[test]
fn layer_norm_gradients() {
    let w = check(
        &[uniform(&[2, 3, 6], 70), uniform(&[6], 71), uniform(&[6], 72)],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            project(t, y, 73)
        },
        FLOOR,
    );
    assert_close("layer_norm", w, TOL);
}

#[test]
fn shape_ops_gradients() {
    let w = check(
        &[uniform(&[2, 3, 4], 80), uniform(&[2, 2, 4], 81), uniform(&[5, 4], 82)],
        |t, v| {
            let c = t.concat(&[v[0], v[1]], 1).unwrap();
            let p = t.permute(c, &[2, 0, 1]).unwrap();
            let tr = t.transpose(p).unwrap();
            let r = t.reshape(tr, &[4, 10]).unwrap();
            let s = t.slice(r, 1, 2, 5).unwrap();
            let rows = t.gather_rows(v[2], &[0, 3, 3, 1]).unwrap();
            let b = t.broadcast_leading(rows, &[2]);
            let c0 = t.concat(&[v[2], v[2]], 0).unwrap();
            let a = project(t, s, 83);
            let bsum = project(t, b, 84);
            let csum = project(t, c0, 85);
            let ab = t.add(a, bsum).unwrap();
            t.add(ab, csum).unwrap()
        },
        FLOOR,
    );
    assert_close("concat/permute/transpose/reshape/slice/gather/broadcast", w, TOL);
}

#[test]
fn dropout_mask_gradient() {
    let mask: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
    let w = check(
        &[uniform(&[3, 4], 90)],
        |t, v| {
            let y = t.dropout_with_mask(v[0], mask.clone()).unwrap();
            project(t, y, 91)
        },
        FLOOR,
    );
    assert_close("dropout", w, TOL);
}

#[test]
fn cross_entropy_gradient() {
    let w = check(
        &[uniform(&[4, 3], 100)],
        |t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]).unwrap(),
        FLOOR,
    );
    assert_close("softmax_cross_entropy", w, TOL);
}

#[test]
fn trivial_backward_cases() {
    let mut t = Tape::new();
    let x = t.leaf(uniform(&[2, 3], 110).with_requires_grad(true));
    let y = t.constant(uniform(&[2, 3], 111));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    let xy = t.mul(x, y).unwrap();
    let s = t.sum(xy);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), t.value(y).data());
    assert!(g.get(y).is_none());
    assert!(matches!(t.backward(xy), Err(TensorError::Contract(_))));
}

#[test]
fn attention_query_projection_gradient() {
    let mut store = ParamStore::new();
    let attn = {
        let mut b = Builder::new(&mut store, 5);
        MultiHeadAttention::new(&mut b, "attn", 128, 4).unwrap()
    };
    // Larger weights than the 0.02 init so the attention pattern is non-trivial.
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v *= 10.0;
        }
    }
    let x = uniform(&[1, 9, 128], 120);
    let loss = |store: &ParamStore| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = attn.forward(&mut tape, &p, xv).unwrap().output;
        let l = project(&mut tape, y, 121);
        let g = tape.backward(l).unwrap();
        let gq = g.get(p.var(attn.q.weight)).map(|g| g.to_vec());
        (tape.value(l).data()[0], gq)
    };
    let (_, analytic) = loss(&store);
    let analytic = vec![analytic.unwrap()];
    let values = vec![store.get(attn.q.weight).data().to_vec()];
    let coords: Vec<(usize, usize)> = (0..128 * 128).map(|j| (0, j)).collect();
    let w = check_coords(
        &values,
        &analytic,
        &coords,
        |_, j, v| {
            let old = store.get(attn.q.weight).data()[j];
            store.get_mut(attn.q.weight).data_mut()[j] = v;
            let l = loss(&store).0;
            store.get_mut(attn.q.weight).data_mut()[j] = old;
            l
        },
        FLOOR,
    );
    assert_close("attention q-projection", w, TOL);
}

fn ctts_gradient_check(cfg: CttsConfig, per_tensor: Option<usize>) -> common::Worst {
    let mut model = CttsModel::new(cfg, 3).unwrap();
    // Move off the tiny-init regime so every block contributes visibly.
    for t in model.params_mut().tensors_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i as f64) * 0.731).sin();
        }
    }
    let batch = uniform(&[2, 80], 130);
    let labels = [0usize, 2];
    model.loss_and_grads(&batch, &labels, ForwardMode::eval()).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| t.grad().unwrap().to_vec()).collect();
    let values: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| t.data().to_vec()).collect();
    let coords: Vec<(usize, usize)> = values
        .iter()
        .enumerate()
        .flat_map(|(i, v)| {
            let n = v.len();
            let take = per_tensor.map_or(n, |k| k.min(n));
            (0..take).map(move |k| (i, if take == n { k } else { (k * 7919) % n }))
        })
        .collect();
    check_coords(
        &values,
        &analytic,
        &coords,
        |i, j, v| {
            let old = model.params().tensors()[i].data()[j];
            model.params_mut().tensors_mut()[i].data_mut()[j] = v;
            let (l, _) = model.loss_and_grads(&batch, &labels, ForwardMode::eval()).unwrap();
            model.params_mut().tensors_mut()[i].data_mut()[j] = old;
            l
        },
        MODEL_FLOOR,
    )
}

#[test]
fn full_model_gradient_every_parameter_small_config() {
    let cfg = CttsConfig {
        embed_dim: 16,
        depth: 2,
        heads: 4,
        drop_rate: 0.0,
        ..CttsConfig::default()
    };
    assert_close("ctts (d=16, depth 2), all coordinates", ctts_gradient_check(cfg, None), TOL);
}

#[test]
fn full_model_gradient_default_config_sampled() {
    let cfg = CttsConfig {
        drop_rate: 0.0,
        ..CttsConfig::default()
    };
    assert_close("ctts default config, 4 coords per tensor", ctts_gradient_check(cfg, Some(4)), TOL);
}
