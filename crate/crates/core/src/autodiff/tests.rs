use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Projects the op output onto a fixed random direction so every output
/// element contributes to the checked scalar.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = random(g.shape(out), &mut rng, -1.0, 1.0);
    let d = g.constant(dir);
    let p = g.mul(out, d);
    g.sum(p)
}

/// Compares reverse-mode gradients with central differences on every input element.
fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let root = project(&mut g, out, 99);
        (g, vars, root)
    };
    let (g, vars, root) = eval(&inputs);
    let grads = g.backward(root);
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            let fp = {
                let (g, _, r) = eval(&plus);
                g.scalar(r)
            };
            let fm = {
                let (g, _, r) = eval(&minus);
                g.scalar(r)
            };
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.data()[j];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-5, "input {k} elem {j}: fd {fd} vs analytic {an}");
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3, 3], &mut rng, -1.0, 1.0);
    let b = random(&[2, 3, 3], &mut rng, 0.5, 1.5);
    check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let q = g.div(m, v[1]);
        let q = g.scale(q, 1.7);
        let q = g.add_scalar(q, 0.3);
        let r = g.sigmoid(q);
        g.mul(r, v[0])
    });
    check(vec![a.clone()], |g, v| {
        let r = g.relu(v[0]);
        let ab = g.abs(v[0]);
        let c = g.clamp(v[0], -0.5, 0.5);
        let t = g.add(r, ab);
        g.add(t, c)
    });
    check(vec![a], |g, v| {
        let s = g.sum(v[0]);
        let m = g.mean(v[0]);
        g.mul(s, m)
    });
}

#[test]
fn conv2d_plain_and_dilated() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (k, dil) in [(1, 1), (3, 1), (3, 2), (5, 1)] {
        let x = random(&[2, 6, 5], &mut rng, -1.0, 1.0);
        let w = random(&[3, 2, k, k], &mut rng, -0.5, 0.5);
        let b = random(&[3], &mut rng, -0.5, 0.5);
        check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), dil));
    }
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (cin, cout, h, w, k, dil) = (2, 3, 7, 6, 3, 2);
    let x = random(&[cin, h, w], &mut rng, -1.0, 1.0);
    let wt = random(&[cout, cin, k, k], &mut rng, -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(wt.clone());
    let out = g.conv2d(xv, wv, None, dil);
    let r = (k / 2) as isize;
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + (ky as isize - r) * dil as isize;
                            let sx = xx as isize + (kx as isize - r) * dil as isize;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += wt.data()[((o * cin + c) * k + ky) * k + kx]
                                * x.data()[(c * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                let got = g.value(out).data()[(o * h + y) * w + xx];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn instance_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 4, 5], &mut rng, -1.0, 1.0);
    let gamma = random(&[3], &mut rng, 0.5, 1.5);
    let beta = random(&[3], &mut rng, -0.5, 0.5);
    check(vec![x, gamma, beta], |g, v| g.instance_norm(v[0], v[1], v[2]));
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 3, 4], &mut rng, -1.0, 1.0);
    let b = random(&[1, 3, 4], &mut rng, -1.0, 1.0);
    let gate = random(&[3], &mut rng, -1.0, 1.0);
    check(vec![a.clone(), b.clone(), gate], |g, v| {
        let c = g.concat(&[v[0], v[1]]);
        let pooled = g.global_avg_pool(c);
        let s = g.spatial_scale(c, v[1]);
        let cs = g.channel_scale(s, pooled);
        let r = g.reshape(v[2], &[3, 1, 1]);
        let rr = g.concat(&[r, r]);
        let rr = g.reshape(rr, &[6]);
        let p = g.pick(rr, &[0, 4, 2]);
        let p2 = g.pick(p, &[0, 1, 2]);
        let p2 = g.reshape(p2, &[3]);
        let q = g.channel_scale(cs, p2);
        g.add(q, cs)
    });
}

#[test]
fn softmax_entropy_transpose_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random(&[2, 4], &mut rng, -2.0, 2.0);
    let t1 = random(&[4], &mut rng, -1.0, 1.0);
    let t2 = random(&[4], &mut rng, -1.0, 1.0);
    check(vec![logits.clone()], |g, v| {
        let s = g.softmax_rows(v[0]);
        let t = g.transpose(s);
        g.reshape(t, &[8])
    });
    check(vec![logits, t1, t2], |g, v| {
        let s = g.softmax_rows(v[0]);
        let w = g.pick(s, &[0, 1, 2, 3]);
        let ws = g.weighted_sum(&[v[1], v[2], v[1], v[2]], w);
        let h = g.entropy_rows(v[0]);
        let hv = g.pick(h, &[0, 0, 0, 0]);
        g.mul(ws, hv)
    });
}

#[test]
fn filter_and_warp() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 5, 6], &mut rng, -1.0, 1.0);
    let kernel: Vec<f64> = (0..9).map(|i| i as f64 * 0.1 - 0.3).collect();
    for pad in [Padding::Reflect, Padding::Valid] {
        let kc = kernel.clone();
        check(vec![x.clone()], move |g, v| g.filter(v[0], &kc, 3, pad));
    }
    let big: Vec<f64> = (0..49).map(|i| (i as f64).cos()).collect();
    check(vec![x.clone()], move |g, v| g.filter(v[0], &big, 7, Padding::Reflect));
    let flow = random(&[2, 5, 6], &mut rng, -1.7, 1.7);
    check(vec![x], move |g, v| g.warp(v[0], &flow));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[3], 2.0));
    let l = g.leaf(Tensor::full(&[3], 1.0));
    let m = g.mul(c, l);
    let s = g.sum(m);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(l).unwrap().data(), &[2.0, 2.0, 2.0]);
}
