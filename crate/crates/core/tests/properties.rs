//! Randomized invariants across modules.

use derain::alignment::{align_mixed, align_ofm, align_tgm, group_offsets, warp, FlowField, PyramidalFlow};
use derain::data::{
    augment, procedural_sequence, synthesize_dataset, synthesize_rainy, window_indices, Flips, Frame, FrameWindow,
    StreakConfig, Transform,
};
use derain::eval::{infer_sequence, score};
use derain::losses::{entropy_reg, psnr, ssim, ssim_luminance, task_loss, LossConfig};
use derain::networks::{aas_weights, fuse, Fusion};
use derain::params::{Initializer, ParamStore, Session, Trainable};
use derain::rainmodel::{compose_rainy, generate_aux_rain, line_kernel, make_kernel_bank, BankConfig, KernelBank};
use derain::searchspace::{apply_candidate, mixed_layer, OpKind, NUM_OPS};
use derain::trainer::{Checkpoint, Config, Stage};
use derain::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn rand_frame(h: usize, w: usize, seed: u64) -> Frame {
    Frame::new(rand_tensor(&[3, h, w], seed, 0.0, 1.0)).unwrap()
}

fn random_bank(seed: u64) -> KernelBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..5);
    let kernels = (0..n)
        .map(|_| {
            let size = [3, 5, 7][rng.random_range(0..3)];
            line_kernel(size, rng.random_range(60.0..120.0), rng.random_range(1.0..size as f64), rng.random_range(0.3..1.5))
                .unwrap()
        })
        .collect();
    let weights = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let groups = (0..n).map(|i| (i % 2) as u8).collect();
    KernelBank::new(kernels, weights, groups).unwrap()
}

fn brute_conv(x: &Tensor, k: &Tensor) -> Vec<f64> {
    let (c, h, w) = x.chw();
    let ks = k.shape()[0];
    let r = (ks / 2) as isize;
    let refl = |i: isize, n: usize| -> usize {
        let n = n as isize;
        (if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i }) as usize
    };
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for i in 0..ks {
                    for j in 0..ks {
                        let sy = refl(y as isize + r - i as isize, h);
                        let sx = refl(xx as isize + r - j as isize, w);
                        acc += k.data()[i * ks + j] * x.data()[ch * h * w + sy * w + sx];
                    }
                }
                out[ch * h * w + y * w + xx] = acc;
            }
        }
    }
    out
}

#[test]
fn window_indices_stay_in_range() {
    for w in [3, 5, 7] {
        for len in 3..=12 {
            for t in 0..len {
                let idx = window_indices(len, t, w).unwrap();
                assert_eq!(idx.len(), w);
                assert_eq!(idx[w / 2], t);
                assert!(idx.iter().all(|&i| i < len));
            }
        }
    }
}

#[test]
fn groups_partition_every_window() {
    for w in [3, 5, 7] {
        let (g1, g2) = group_offsets(w).unwrap();
        let r = (w / 2) as isize;
        let mut union: Vec<isize> = g1.iter().chain(&g2).copied().collect();
        union.sort();
        union.dedup();
        assert_eq!(union, (-r..=r).collect::<Vec<_>>());
        let common: Vec<isize> = g1.iter().filter(|o| g2.contains(o)).copied().collect();
        assert_eq!(common, vec![0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn window_indices_for_any_length(len in 1usize..40, w in prop::sample::select(vec![3usize, 5, 7]), frac in 0.0f64..1.0) {
        let t = ((len as f64 * frac) as usize).min(len - 1);
        let idx = window_indices(len, t, w).unwrap();
        prop_assert!(idx.iter().all(|&i| i < len));
        prop_assert_eq!(idx[w / 2], t);
    }

    #[test]
    fn rain_synthesis_is_seeded_and_nonnegative(seed in any::<u64>()) {
        let clean = procedural_sequence("c", 16, 16, 2, seed).unwrap();
        let (a, ra) = synthesize_rainy(&clean, &StreakConfig::default(), seed).unwrap();
        let (b, rb) = synthesize_rainy(&clean, &StreakConfig::default(), seed).unwrap();
        prop_assert_eq!(a.frames(), b.frames());
        prop_assert_eq!(ra.frames(), rb.frames());
        prop_assert!(ra.frames().iter().all(|f| f.tensor().data().iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn augmentation_shares_one_transform(seed in any::<u64>(), crop in 8usize..16) {
        let frames: Vec<Frame> = (0..5).map(|i| rand_frame(16, 20, seed ^ i)).collect();
        let gt = rand_frame(16, 20, seed.wrapping_add(99));
        let win = FrameWindow::new(frames, Some(gt)).unwrap();
        let flips = Flips { horizontal: true, vertical: true };
        let out = augment(&win, crop, flips, seed).unwrap();
        let t = Transform::sample(16, 20, crop, flips, seed).unwrap();
        for (a, f) in out.frames.iter().zip(&win.frames) {
            prop_assert_eq!(a, &t.apply(f));
        }
        prop_assert_eq!(out.ground_truth.as_ref().unwrap(), &t.apply(win.ground_truth.as_ref().unwrap()));
    }

    #[test]
    fn unit_mixing_ignores_the_bank(seed in any::<u64>()) {
        let b = rand_frame(12, 12, seed);
        let r = Frame::new(rand_tensor(&[3, 12, 12], seed ^ 1, 0.0, 0.4)).unwrap();
        let ones = Tensor::full(&[12, 12], 1.0);
        let x = compose_rainy(&b, &r, &ones, &random_bank(seed)).unwrap();
        let y = compose_rainy(&b, &r, &ones, &random_bank(seed ^ 7)).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn aux_rain_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let bank = random_bank(seed);
        let x = rand_tensor(&[3, 10, 10], seed ^ 3, -1.0, 1.0);
        let y = rand_tensor(&[3, 10, 10], seed ^ 5, -1.0, 1.0);
        let mix = x.zip_map(&y, |p, q| a * p + b * q);
        let lhs = generate_aux_rain(&mix, &bank);
        let rhs = generate_aux_rain(&x, &bank).zip_map(&generate_aux_rain(&y, &bank), |p, q| a * p + b * q);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
    }

    #[test]
    fn bank_convolution_matches_direct_loops(seed in any::<u64>(), h in 8usize..33, w in 8usize..33) {
        let bank = random_bank(seed);
        let x = rand_tensor(&[3, h, w], seed ^ 11, 0.0, 1.0);
        let got = generate_aux_rain(&x, &bank);
        let mut want = x.data().to_vec();
        for (k, &wk) in bank.kernels().iter().zip(bank.weights()) {
            for (o, v) in want.iter_mut().zip(brute_conv(&x, k)) {
                *o += wk * v;
            }
        }
        let dev = got.data().iter().zip(&want).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(dev <= 1e-6, "deviation {}", dev);
    }

    #[test]
    fn zero_flow_warp_is_identity(seed in any::<u64>(), h in 8usize..24, w in 8usize..24) {
        let f = rand_frame(h, w, seed);
        let g = warp(&f, &FlowField::zeros(h, w)).unwrap();
        prop_assert!(g.tensor().max_abs_diff(f.tensor()) <= 1e-7);
    }

    #[test]
    fn ops_preserve_shape(op in 0usize..NUM_OPS, f in 8usize..13, h in 8usize..14, w in 8usize..14, seed in any::<u64>()) {
        let op = OpKind::from_index(op).unwrap();
        let mut store = ParamStore::new();
        op.init(&mut Initializer::new(seed), &mut store, "n", f);
        let mut s = Session::new(&store, Trainable::None);
        let x = s.constant(rand_tensor(&[f, h, w], seed, -1.0, 1.0));
        let y = apply_candidate(&mut s, op, x, "n").unwrap();
        prop_assert_eq!(s.g.shape(y), &[f, h, w][..]);
    }

    #[test]
    fn entropy_ignores_op_order(seed in any::<u64>()) {
        let a = rand_tensor(&[4, NUM_OPS], seed, -3.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = a.clone();
        for row in b.data_mut().chunks_mut(NUM_OPS) {
            for i in (1..NUM_OPS).rev() {
                row.swap(i, rng.random_range(0..=i));
            }
        }
        prop_assert!((entropy_reg(&a).unwrap() - entropy_reg(&b).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn ssim_peaks_only_at_equality(seed in any::<u64>(), eps in 1e-3f64..0.2) {
        let cfg = LossConfig::default();
        let x = rand_frame(16, 16, seed);
        let noise = rand_tensor(&[3, 16, 16], seed ^ 9, -1.0, 1.0);
        let y = Frame::from_tensor_clipped(&x.tensor().zip_map(&noise, |p, n| p + eps * n)).unwrap();
        let s_xy = ssim(&x, &y, &cfg).unwrap();
        prop_assert!(s_xy < 1.0);
        prop_assert!((ssim(&x, &x, &cfg).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert!(ssim_luminance(&x, &y, &cfg).unwrap() <= 1.0);
    }

    #[test]
    fn task_loss_falls_toward_the_target(seed in any::<u64>()) {
        let cfg = LossConfig::default();
        let x = rand_tensor(&[3, 16, 16], seed, 0.0, 1.0);
        let y = rand_tensor(&[3, 16, 16], seed ^ 13, 0.0, 1.0);
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let z = x.zip_map(&y, |p, q| (1.0 - t) * p + t * q);
            let l = task_loss(&[z], &[y.clone()], &cfg).unwrap();
            prop_assert!(l < prev, "step {}: {} !< {}", k, l, prev);
            prev = l;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn mixed_alignment_is_convex(seed in any::<u64>(), b0 in -3.0f64..3.0, b1 in -3.0f64..3.0) {
        let model = Config::toy().relaxed_model().unwrap();
        let mut store = model.init_params(seed).unwrap();
        store.insert("arch.beta", Tensor::from_vec(&[2], vec![b0, b1]).unwrap());
        let frames: Vec<Frame> = (0..3).map(|i| rand_frame(12, 12, seed ^ i)).collect();
        let win = FrameWindow::new(frames, None).unwrap();
        let flows = model.flows(&win, &PyramidalFlow::default()).unwrap();
        let mut s = Session::new(&store, Trainable::None);
        let o = align_ofm(&mut s, &win, &flows).unwrap();
        let t = align_tgm(&mut s, &win).unwrap();
        let m = align_mixed(&mut s, &win, &flows).unwrap();
        let (o, t, m) = (s.g.value(o), s.g.value(t), s.g.value(m));
        for i in 0..m.len() {
            let (lo, hi) = (o.data()[i].min(t.data()[i]), o.data()[i].max(t.data()[i]));
            prop_assert!(m.data()[i] >= lo - 1e-12 && m.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn equal_branches_fuse_to_their_average(seed in any::<u64>()) {
        let store = Config::toy().derived_model().unwrap().init_params(seed).unwrap();
        let b = rand_tensor(&[3, 10, 10], seed, 0.0, 1.0);
        let mut s = Session::new(&store, Trainable::None);
        let (d, c) = (s.constant(b.clone()), s.constant(b.clone()));
        let lam = aas_weights(&mut s, d, c).unwrap();
        prop_assert!(s.g.value(lam.0).data().iter().all(|&v| v == 0.5));
        let f = fuse(&mut s, d, c, lam);
        let half = b.map(|v| 0.5 * v + 0.5 * v);
        prop_assert!(s.g.value(f).max_abs_diff(&half) <= 1e-15);
    }

    #[test]
    fn mixed_layer_logit_gradients_match_differences(seed in any::<u64>()) {
        let f = 8;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        for op in OpKind::ALL {
            op.init(&mut init, &mut store, "n", f);
        }
        let x = rand_tensor(&[f, 8, 8], seed, -1.0, 1.0);
        let proj = rand_tensor(&[f, 8, 8], seed ^ 1, -1.0, 1.0);
        let logits = rand_tensor(&[1, NUM_OPS], seed ^ 2, -1.0, 1.0);
        let eval = |l: &Tensor, grad: bool| {
            let mut s = Session::new(&store, Trainable::None);
            let lv = if grad { s.g.leaf(l.clone()) } else { s.constant(l.clone()) };
            let w = s.g.softmax_rows(lv);
            let w = s.g.reshape(w, &[NUM_OPS]);
            let xv = s.constant(x.clone());
            let y = mixed_layer(&mut s, xv, w, "n").unwrap();
            let p = s.constant(proj.clone());
            let yp = s.g.mul(y, p);
            let out = s.g.sum(yp);
            let g = grad.then(|| s.g.backward(out).get(lv).unwrap().clone());
            (s.g.scalar(out), g)
        };
        let (_, g) = eval(&logits, true);
        let g = g.unwrap();
        for i in 0..NUM_OPS {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p.data_mut()[i] += 1e-6;
            m.data_mut()[i] -= 1e-6;
            let fd = (eval(&p, false).0 - eval(&m, false).0) / 2e-6;
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "op {}: rel {}", i, rel);
        }
    }

    #[test]
    fn inference_keeps_sequence_length(len in 1usize..7, w in prop::sample::select(vec![3usize, 5, 7])) {
        let mut config = Config::toy();
        config.data.frames = w;
        let model = config.derived_model().unwrap();
        let ckpt = Checkpoint {
            params: model.identity_params(0).unwrap(),
            arch: model.arch.clone(),
            config,
            stage: Stage::Train,
            step: 0,
            epoch: 0,
            optimizers: Default::default(),
        };
        let seq = procedural_sequence("s", 8, 8, len, len as u64).unwrap();
        let out = infer_sequence(&ckpt, &seq, w, &PyramidalFlow::default()).unwrap();
        prop_assert_eq!(out.len(), len);
        prop_assert_eq!(out.names(), seq.names());
    }

    #[test]
    fn report_means_are_frame_weighted(seed in any::<u64>()) {
        let (data, _, _) = synthesize_dataset(3, 2 + (seed % 4) as usize, 16, &StreakConfig::default(), seed).unwrap();
        let cfg = LossConfig::default();
        let noisy: Vec<_> = data
            .clean
            .iter()
            .map(|c| {
                let frames = c
                    .frames()
                    .iter()
                    .enumerate()
                    .map(|(i, f)| {
                        let n = rand_tensor(&[3, 16, 16], seed ^ i as u64, -0.05, 0.05);
                        Frame::from_tensor_clipped(&f.tensor().zip_map(&n, |a, b| a + b)).unwrap()
                    })
                    .collect();
                derain::data::VideoSequence::with_names(c.identifier.clone(), frames, c.names().to_vec()).unwrap()
            })
            .collect();
        let r = score(&noisy, &data, &cfg, "x").unwrap();
        let (mut ps, mut ss, mut n) = (0.0, 0.0, 0.0);
        for (x, c) in noisy.iter().zip(&data.clean) {
            for (a, b) in x.frames().iter().zip(c.frames()) {
                ps += psnr(a, b).unwrap();
                ss += ssim_luminance(a, b, &cfg).unwrap();
                n += 1.0;
            }
        }
        prop_assert_eq!(r.restored.frames, n as usize);
        prop_assert!((r.restored.psnr - ps / n).abs() <= 1e-9);
        prop_assert!((r.restored.ssim - ss / n).abs() <= 1e-12);
    }
}

#[test]
fn every_parameter_group_receives_gradient() {
    let model = Config::toy().relaxed_model().unwrap();
    let mut store = model.init_params(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Zero-initialized output convs block everything upstream; any other state will do.
    for name in ["dna.head.w", "cna.head.w", "aas.head.w", "align.ofm.fuse1.w", "align.tgm.proj.w"] {
        let shape = store.get(name).unwrap().shape().to_vec();
        store.insert(name, rand_tensor(&shape, rng.random(), -0.1, 0.1));
    }
    let frames: Vec<Frame> = (0..3).map(|_| rand_frame(16, 16, rng.random())).collect();
    let win = FrameWindow::new(frames, Some(rand_frame(16, 16, 77))).unwrap();
    let flows = model.flows(&win, &PyramidalFlow::default()).unwrap();
    let mut s = Session::new(&store, Trainable::All);
    let o = model.full_forward(&mut s, &win, &flows, Fusion::Learned).unwrap();
    let y = s.constant(win.ground_truth.as_ref().unwrap().tensor().clone());
    let cfg = LossConfig::default();
    let ld = derain::losses::task_loss_var(&mut s.g, o.dominant, y, &cfg);
    let lc = derain::losses::task_loss_var(&mut s.g, o.companion, y, &cfg);
    let lf = derain::losses::task_loss_var(&mut s.g, o.fused, y, &cfg);
    let a = s.g.add(ld, lc);
    let total = s.g.add(a, lf);
    let grads = s.gradients(total);
    for group in ["dna.", "cna.", "aas.", "align.ofm.", "align.tgm.", "gars.bank.", "gars.coarse.", "arch.alpha", "arch.beta"] {
        let nonzero = grads
            .iter()
            .filter(|(n, _)| n.starts_with(group))
            .any(|(_, g)| g.data().iter().any(|&v| v != 0.0));
        assert!(nonzero, "no gradient reaches {group}");
    }
}

#[test]
fn kernel_bank_defaults_are_valid() {
    let bank = make_kernel_bank(&BankConfig::default()).unwrap();
    assert_eq!(bank.len(), 6);
    assert_eq!(bank.group_ids().iter().filter(|&&g| g == 0).count(), 3);
}
