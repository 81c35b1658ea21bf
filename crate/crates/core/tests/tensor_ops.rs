use apn_core::tensor::{
    bilinear_upsample, nearest_upsample, resize_region, upsample_to_input, Graph, Tensor,
};
use apn_core::PixelBox;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Direct seven-loop convolution.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x.at(&[b, ic, y as usize, xx as usize])
                                        * w.at(&[oc, ic, u, v]);
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(size, stride, pad) in &[(7, 1, 0), (8, 2, 1), (9, 2, 1), (5, 1, 1), (6, 3, 2)] {
        let x = random(&[2, 3, size, size + 1], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        let want = conv_oracle(&x, &w, stride, pad);
        assert_eq!(g.value(y).shape(), want.shape());
        for (a, b) in g.value(y).data().iter().zip(want.data()) {
            assert!(
                (a - b).abs() < 1e-12,
                "size {size} stride {stride}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn conv_is_translation_equivariant() {
    // A single bright pixel moves the response by the same offset.
    let mut g = Graph::new();
    let mut img = Tensor::<f64>::zeros(&[1, 1, 8, 8]).unwrap();
    img.data_mut()[2 * 8 + 5] = 1.0;
    let w = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
    let (xv, wv) = (g.constant(img), g.constant(w));
    let y = g.conv2d(xv, wv, 1, 1).unwrap();
    let out = g.value(y);
    for i in 0..8 {
        for j in 0..8 {
            let near = (i as isize - 2).abs() <= 1 && (j as isize - 5).abs() <= 1;
            assert_eq!(
                out.at(&[0, 0, i, j]),
                if near { 1.0 } else { 0.0 },
                "({i},{j})"
            );
        }
    }
}

#[test]
fn matmul_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[5, 7], &mut rng);
    let b = random(&[7, 3], &mut rng);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let want: f64 = (0..7).map(|k| a.at(&[i, k]) * b.at(&[k, j])).sum();
            assert!((g.value(c).at(&[i, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_ce_of_equal_logits_is_ln2() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(vec![1, 2], vec![0.3f64, 0.3]).unwrap());
    let ce = g.softmax_ce(l, &[1]).unwrap();
    assert!((g.value(ce).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn softmax_ce_is_shift_invariant_and_stable() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![1, 3], vec![1.0f64, 2.0, 3.0]).unwrap());
    let b = g.constant(Tensor::new(vec![1, 3], vec![1001.0, 1002.0, 1003.0]).unwrap());
    let ca = g.softmax_ce(a, &[0]).unwrap();
    let cb = g.softmax_ce(b, &[0]).unwrap();
    assert!((g.value(ca).data()[0] - g.value(cb).data()[0]).abs() < 1e-9);
}

#[test]
fn max_spatial_breaks_ties_row_major() {
    let mut g = Graph::new();
    let m = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 1.0, 0.0, 1.0]).unwrap());
    let (v, arg) = g.max_spatial(m).unwrap();
    assert_eq!(g.value(v).data(), &[1.0]);
    assert_eq!(arg, vec![0]);
}

#[test]
fn bilinear_upsample_preserves_constants_and_corners() {
    let c = Tensor::full(&[3, 3], 0.25f64).unwrap();
    let up = bilinear_upsample(&c, 12, 12).unwrap();
    assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));

    let m = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let up = bilinear_upsample(&m, 8, 8).unwrap();
    let lo = up.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = up.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo >= 0.0 && hi <= 3.0);
    assert!(up.at(&[0, 0]) < up.at(&[0, 7]) && up.at(&[0, 7]) < up.at(&[7, 7]));
}

#[test]
fn nearest_upsample_replicates_blocks() {
    let m = Tensor::new(vec![2, 2], vec![0.0f64, 1.0, 1.0, 0.0]).unwrap();
    let up = nearest_upsample(&m, 4, 4).unwrap();
    assert_eq!(
        up.data(),
        &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]
    );
}

#[test]
fn resize_of_full_region_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random(&[3, 9, 9], &mut rng);
    let out = resize_region(&img, PixelBox::new(0, 0, 8, 8), 9, 9).unwrap();
    for (a, b) in out.data().iter().zip(img.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn seeded(seed: u64, shape: &[usize]) -> Tensor<f64> {
    random(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn conv_matches_loops_on_small_shapes(
        seed in any::<u64>(),
        n in 1usize..=2,
        c in 1usize..=4,
        h in 3usize..=8,
        w in 3usize..=8,
        o in 1usize..=3,
        stride in 1usize..=2,
        pad in 0usize..=1,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, c, h, w], &mut rng);
        let k = random(&[o, c, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        let want = conv_oracle(&x, &k, stride, pad);
        prop_assert_eq!(g.value(y).shape(), want.shape());
        for (a, b) in g.value(y).data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_spatial_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = seeded(seed, &[2, 3, 4, 5]);
        let y = seeded(seed ^ 1, &[2, 3, 4, 5]);
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x), g.constant(y));
        let (ax, by) = (g.scale(xv, a), g.scale(yv, b));
        let sum = g.add(ax, by).unwrap();
        let lhs = g.mean_spatial(sum).unwrap();
        let mx = g.mean_spatial(xv).unwrap();
        let my = g.mean_spatial(yv).unwrap();
        let (lhs, mx, my) = (g.value(lhs).clone(), g.value(mx).clone(), g.value(my).clone());
        for i in 0..lhs.numel() {
            prop_assert!((lhs.data()[i] - (a * mx.data()[i] + b * my.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn max_spatial_follows_permutations(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let x = seeded(seed, &[1, 2, 3, 4]);
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        // Output position p takes input position perm[p].
        let mut y = x.clone();
        for ch in 0..2 {
            for p in 0..12 {
                y.data_mut()[ch * 12 + p] = x.data()[ch * 12 + perm[p]];
            }
        }
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x), g.constant(y));
        let (vx, ax) = g.max_spatial(xv).unwrap();
        let (vy, ay) = g.max_spatial(yv).unwrap();
        prop_assert_eq!(g.value(vx).data(), g.value(vy).data());
        for ch in 0..2 {
            prop_assert_eq!(perm[ay[ch]], ax[ch]);
        }
    }

    #[test]
    fn bilinear_stays_in_range(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, oh in 1usize..20, ow in 1usize..20) {
        let m = seeded(seed, &[h, w]);
        let lo = m.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for up in [bilinear_upsample(&m, oh, ow).unwrap(), upsample_to_input(&m, oh, ow).unwrap()] {
            prop_assert_eq!(up.shape(), &[oh, ow]);
            prop_assert!(up.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
        let same = bilinear_upsample(&m, h, w).unwrap();
        for (a, b) in same.data().iter().zip(m.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsampled_peak_stays_near_source_peak(seed in any::<u64>()) {
        let m = seeded(seed, &[8, 8]);
        let up = upsample_to_input(&m, 64, 64).unwrap();
        let argmax = |d: &[f64]| d.iter().enumerate().fold(0, |b, (i, &v)| if v > d[b] { i } else { b });
        let (src, dst) = (argmax(m.data()), argmax(up.data()));
        let (si, sj) = (src / 8, src % 8);
        let (ui, uj) = (dst / 64 / 8, dst % 64 / 8);
        prop_assert!(si.abs_diff(ui) <= 1 && sj.abs_diff(uj) <= 1, "source ({si},{sj}) vs upsampled cell ({ui},{uj})");
    }
}

/// Per-pixel align-corners interpolation written from the closed form.
fn bilinear_oracle(m: &Tensor<f64>, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let coord = |o: usize, n_in: usize, n_out: usize| {
        if n_out == 1 {
            0.0
        } else {
            o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let (y, x) = (coord(i, h, oh), coord(j, w, ow));
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (dy, dx) = (y - y0 as f64, x - x0 as f64);
            let top = m.at(&[y0, x0]) * (1.0 - dx) + m.at(&[y0, x1]) * dx;
            let bottom = m.at(&[y1, x0]) * (1.0 - dx) + m.at(&[y1, x1]) * dx;
            out.push(top * (1.0 - dy) + bottom * dy);
        }
    }
    out
}

#[test]
fn bilinear_matches_per_pixel_oracle() {
    let m = seeded(9, &[4, 4]);
    let up = bilinear_upsample(&m, 9, 9).unwrap();
    for (a, b) in up.data().iter().zip(bilinear_oracle(&m, 9, 9)) {
        assert!((a - b).abs() < 1e-12);
    }
    let m = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let up = bilinear_upsample(&m, 2, 3).unwrap();
    assert_eq!((up.at(&[0, 1]), up.at(&[1, 1])), (0.5, 0.5));
}

#[test]
fn conv_spec_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0f64).unwrap());
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0f64).unwrap());
    let y = g.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[9.0]);

    let img = seeded(3, &[1, 2, 5, 5]);
    let mut id = Tensor::<f64>::zeros(&[2, 2, 3, 3]).unwrap();
    id.data_mut()[4] = 1.0;
    id.data_mut()[(2 + 1) * 9 + 4] = 1.0;
    let (xv, wv) = (g.constant(img.clone()), g.constant(id));
    let y = g.conv2d(xv, wv, 1, 1).unwrap();
    assert_eq!(g.value(y), &img);
}
