//! Finite-difference checks of every tape operation at 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ul2prune::tensor::{AttentionSpec, Tape, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).unwrap().with_grad(true)
}

fn max_rel_error(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |ins: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let l = build(&mut tape, &vars);
        tape.value(l).data()[0]
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (which, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[which]).unwrap();
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Fixed random projection so each op is checked through a non-trivial
/// upstream gradient.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.leaf(&random(&shape, &mut rng).with_grad(false));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

#[test]
fn matmul_gradient_matches_closed_form_and_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[5, 7], &mut rng);
    let b = random(&[7, 3], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let out = tape.matmul(va, vb).unwrap();
    let s = tape.sum(out);
    let g = tape.backward(s).unwrap();
    // ones(5,3) · bᵀ: every row equals the row sums of b.
    let ga = g.get(va).unwrap();
    for i in 0..5 {
        for k in 0..7 {
            let expect: f64 = (0..3).map(|j| b.data()[k * 3 + j]).sum();
            assert!((ga[i * 7 + k] - expect).abs() < 1e-12);
        }
    }
    let err = max_rel_error(&[a, b], &|t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        t.sum(m)
    });
    assert!(err < 1e-6, "matmul rel err {err}");
}

#[test]
fn matmul_nt_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&[4, 6], &mut rng), random(&[5, 6], &mut rng)];
    let err = max_rel_error(&inputs, &|t, v| {
        let m = t.matmul_nt(v[0], v[1]).unwrap();
        project(t, m, 3)
    });
    assert!(err < 1e-6, "matmul_nt rel err {err}");
}

#[test]
fn rmsnorm_gradient_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random(&[3, 8], &mut rng), random(&[8], &mut rng)];
    let err = max_rel_error(&inputs, &|t, v| {
        let y = t.rmsnorm(v[0], v[1]).unwrap();
        project(t, y, 5)
    });
    assert!(err < 1e-6, "rmsnorm rel err {err}");
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[3, 4], &mut rng);
    let y = random(&[3, 4], &mut rng);
    let row = random(&[4], &mut rng);
    let err = max_rel_error(&[x.clone(), y.clone(), row], &|t, v| {
        let a = t.silu(v[0]);
        let b = t.mul(a, v[1]).unwrap();
        let c = t.add(b, v[2]).unwrap();
        let d = t.exp(c);
        let e = t.scale(d, 0.5);
        let f = t.softmax(e, 1).unwrap();
        let g = t.softmax(f, 0).unwrap();
        let h = t.log(g);
        project(t, h, 7)
    });
    assert!(err < 1e-4, "elementwise rel err {err}");
}

#[test]
fn rotary_attention_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (batch, tq, tk, heads, hd) = (2, 3, 4, 2, 4);
    let w = heads * hd;
    let q = random(&[batch * tq, w], &mut rng);
    let k = random(&[batch * tk, w], &mut rng);
    let v = random(&[batch * tk, w], &mut rng);
    let out_proj = random(&[w, 5], &mut rng);
    let table = random(&[5, w], &mut rng);
    let key_mask: Vec<bool> = (0..batch * tk).map(|i| i % tk != 3 || i < tk).collect();
    let cross = AttentionSpec { batch, q_len: tq, k_len: tk, n_heads: heads, head_dim: hd, causal: false, key_mask: Some(key_mask) };
    let ids = [0usize, 3, 1, 4, 4, 2];
    let targets = [1usize, 0, 4, 2, 3, 3];
    let mask = [true, false, true, true, true, false];
    let err = max_rel_error(&[q, k, v, out_proj, table], &|t, vars| {
        let pos_q: Vec<usize> = (0..batch * tq).map(|r| r % tq).collect();
        let pos_k: Vec<usize> = (0..batch * tk).map(|r| r % tk).collect();
        let e = t.embedding(vars[4], &ids).unwrap();
        let q = t.add(vars[0], e).unwrap();
        let q = t.rotary(q, &pos_q, heads, hd).unwrap();
        let k = t.rotary(vars[1], &pos_k, heads, hd).unwrap();
        let a = t.attention(q, k, vars[2], cross.clone()).unwrap();
        let self_spec = AttentionSpec { batch, q_len: tq, k_len: tq, n_heads: heads, head_dim: hd, causal: true, key_mask: None };
        let s = t.attention(a, a, a, self_spec).unwrap();
        let logits = t.matmul(s, vars[3]).unwrap();
        t.cross_entropy(logits, &targets, &mask).unwrap()
    });
    assert!(err < 1e-4, "attention rel err {err}");
}
