mod common;

use frpt::autodiff::{Tape, Var};
use frpt::backbone::{Backbone, BackboneArch};
use frpt::cah;
use frpt::dpp::{self, ProjectionMap, WarpGrid};
use frpt::model::{Ablation, FrptParams};
use frpt::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn run(build: impl FnOnce(&mut Tape<f64>) -> Var) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = build(&mut tape);
    tape.value(v).to_vec()
}

#[test]
fn conv2d_matches_direct_summation() {
    let mut r = rng(1);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = Tensor::<f64>::randn(&[2, 5, 5], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let got = run(|t| {
            let (a, b) = (t.constant(&x), t.constant(&k));
            t.conv2d(a, b, None, stride, pad).unwrap()
        });
        let (want, _, _) = common::conv2d(x.data(), 2, 5, 5, k.data(), 3, 3, stride, pad);
        assert_close(&got, &want, 1e-6);
    }
}

#[test]
fn conv2d_trivial_cases() {
    let ones = Tensor::<f64>::full(&[1, 3, 3], 1.0);
    let two = Tensor::full(&[1, 1, 1, 1], 2.0);
    let got = run(|t| {
        let (a, b) = (t.constant(&ones), t.constant(&two));
        t.conv2d(a, b, None, 1, 0).unwrap()
    });
    assert_eq!(got, vec![2.0; 9]);
    let x = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut rng(2));
    let mut delta = Tensor::zeros(&[2, 2, 3, 3]);
    delta.set(&[0, 0, 1, 1], 1.0);
    delta.set(&[1, 1, 1, 1], 1.0);
    let got = run(|t| {
        let (a, b) = (t.constant(&x), t.constant(&delta));
        t.conv2d(a, b, None, 1, 1).unwrap()
    });
    assert_eq!(got, x.data());
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(&x);
    let bad = tape.constant(&Tensor::zeros(&[1, 3, 3, 3]));
    assert!(tape.conv2d(a, bad, None, 1, 1).is_err());
}

#[test]
fn softmax_matches_exp_over_sum() {
    let x = Tensor::<f64>::randn(&[8, 8], 2.0, &mut rng(3));
    let got = run(|t| {
        let a = t.constant(&x);
        t.softmax(a).unwrap()
    });
    assert_close(&got, &common::softmax(x.data()), 1e-9);
}

#[test]
fn softmax_trivial_cases() {
    let got = run(|t| {
        let a = t.constant(&Tensor::zeros(&[4, 4]));
        t.softmax(a).unwrap()
    });
    assert!(got.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    let mut peaked = Tensor::zeros(&[4, 4]);
    peaked.set(&[2, 1], 50.0);
    let got = run(|t| {
        let a = t.constant(&peaked);
        t.softmax(a).unwrap()
    });
    assert!(got[9] > 1.0 - 1e-6);
    let mut tape = Tape::<f64>::new();
    let nan = tape.constant(&Tensor::full(&[2, 2], f64::NAN));
    assert!(tape.softmax(nan).is_err());
}

#[test]
fn instance_norm_matches_direct_statistics() {
    let x = Tensor::<f64>::randn(&[4, 6, 6], 3.0, &mut rng(4));
    let got = run(|t| {
        let a = t.constant(&x);
        t.instance_norm(a, 1e-5).unwrap()
    });
    assert_close(&got, &common::instance_norm(x.data(), 4, 1e-5), 1e-6);
}

#[test]
fn instance_norm_trivial_cases() {
    let got = run(|t| {
        let a = t.constant(&Tensor::full(&[1, 3, 3], 7.0));
        t.instance_norm(a, 1e-5).unwrap()
    });
    assert!(got.iter().all(|&v| v == 0.0));
    let got = run(|t| {
        let a = t.constant(&Tensor::new(&[1, 1, 2], vec![-1.0, 1.0]).unwrap());
        t.instance_norm(a, 1e-5).unwrap()
    });
    assert_close(&got, &[-1.0, 1.0], 1e-5);
}

#[test]
fn fc_matches_matvec() {
    let mut r = rng(5);
    let x = Tensor::<f64>::randn(&[4], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[3], 1.0, &mut r);
    let got = run(|t| {
        let (xv, wv, bv) = (t.constant(&x), t.constant(&w), t.constant(&b));
        t.fc(xv, wv, Some(bv)).unwrap()
    });
    let want: Vec<f64> = common::matvec(w.data(), x.data(), 3).iter().zip(b.data()).map(|(a, c)| a + c).collect();
    assert_close(&got, &want, 1e-9);

    let mut eye = Tensor::zeros(&[4, 4]);
    (0..4).for_each(|i| eye.set(&[i, i], 1.0));
    let got = run(|t| {
        let (xv, wv) = (t.constant(&x), t.constant(&eye));
        t.fc(xv, wv, None).unwrap()
    });
    assert_eq!(got, x.data());
    let got = run(|t| {
        let (xv, wv, bv) = (t.constant(&x), t.constant(&Tensor::zeros(&[3, 4])), t.constant(&b));
        t.fc(xv, wv, Some(bv)).unwrap()
    });
    assert_eq!(got, b.data());
    let mut tape = Tape::<f64>::new();
    let (xv, wv) = (tape.constant(&x), tape.constant(&Tensor::zeros(&[3, 5])));
    assert!(tape.fc(xv, wv, None).is_err());
}

#[test]
fn activations_and_pooling() {
    let got = run(|t| {
        let a = t.constant(&Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        t.relu(a)
    });
    assert_eq!(got, vec![0.0, 2.0]);
    let got = run(|t| {
        let a = t.constant(&Tensor::scalar(0.0));
        t.sigmoid(a)
    });
    assert_eq!(got, vec![0.5]);
    let block = Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let got = run(|t| {
        let a = t.constant(&block);
        t.gap(a).unwrap()
    });
    assert_eq!(got, vec![2.5, 0.0]);
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let logits = Tensor::<f64>::randn(&[5], 2.0, &mut rng(6));
    let got = run(|t| {
        let a = t.constant(&logits);
        t.cross_entropy(a, 3).unwrap()
    });
    let lse = logits.data().iter().map(|v| v.exp()).sum::<f64>().ln();
    assert!((got[0] - (lse - logits.data()[3])).abs() < 1e-9);

    let got = run(|t| {
        let a = t.constant(&Tensor::zeros(&[8]));
        t.cross_entropy(a, 0).unwrap()
    });
    assert!((got[0] - 8f64.ln()).abs() < 1e-12);
    let mut confident = Tensor::zeros(&[4]);
    confident.set(&[1], 30.0);
    let got = run(|t| {
        let a = t.constant(&confident);
        t.cross_entropy(a, 1).unwrap()
    });
    assert!(got[0] < 1e-9);
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(&logits);
    assert!(tape.cross_entropy(a, 5).is_err());
}

#[test]
fn content_parse_matches_summation() {
    let mut r = rng(7);
    for (c, h, w, sigma) in [(4, 8, 8, 7), (3, 6, 8, 5), (2, 5, 5, 9)] {
        let ms = Tensor::<f64>::randn(&[c, h, w], 1.0, &mut r);
        let wk = Tensor::<f64>::randn(&[sigma, sigma, c], 1.0, &mut r);
        let got = run(|t| {
            let (a, b) = (t.constant(&ms), t.constant(&wk));
            dpp::content_parse(t, a, b).unwrap()
        });
        assert_close(&got, &common::content_parse(ms.data(), c, h, w, wk.data(), sigma), 1e-6);
    }
}

fn random_map(h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let raw = Tensor::<f64>::randn(&[h, w], 1.5, r);
    Tensor::new(&[h, w], common::softmax(raw.data())).unwrap()
}

#[test]
fn mapping_matches_double_summation() {
    let mut r = rng(8);
    for _ in 0..20 {
        let (mh, mw) = (r.gen_range(2..10), r.gen_range(2..10));
        let (oh, ow) = (r.gen_range(4..33), r.gen_range(4..33));
        let std = r.gen_range(0.1..0.5);
        let a = random_map(mh, mw, &mut r);
        let got = run(|t| {
            let v = t.constant(&a);
            dpp::compute_mapping(t, ProjectionMap(v), oh, ow, std).unwrap().0
        });
        let (mx, my) = common::mapping(a.data(), mh, mw, oh, ow, std);
        let plane = oh * ow;
        assert_close(&got[..plane], &mx, 1e-6);
        assert_close(&got[plane..], &my, 1e-6);
    }
}

#[test]
fn warp_matches_bilinear_oracle() {
    let mut r = rng(9);
    for _ in 0..20 {
        let (h, w) = (r.gen_range(4..20), r.gen_range(4..20));
        let img = Tensor::<f64>::uniform(&[3, h, w], 0.0, 1.0, &mut r);
        let grid = Tensor::<f64>::uniform(&[2, h, w], 0.0, 1.0, &mut r);
        let got = run(|t| {
            let (i, g) = (t.constant(&img), t.constant(&grid));
            dpp::warp(t, i, WarpGrid(g)).unwrap()
        });
        let plane = h * w;
        let want = common::bilinear(img.data(), 3, h, w, &grid.data()[..plane], &grid.data()[plane..]);
        assert_close(&got, &want, 1e-6);
    }
}

#[test]
fn channel_attention_matches_composition() {
    let mut r = rng(10);
    let mp = Tensor::<f64>::randn(&[16, 3, 3], 1.0, &mut r);
    let wf = Tensor::<f64>::randn(&[2, 16], 1.0, &mut r);
    let wl = Tensor::<f64>::randn(&[16, 2], 1.0, &mut r);
    let got = run(|t| {
        let (a, b, c) = (t.constant(&mp), t.constant(&wf), t.constant(&wl));
        cah::channel_attention(t, a, b, c).unwrap()
    });
    let pooled = common::gap(mp.data(), 16);
    let hidden: Vec<f64> = common::matvec(wf.data(), &pooled, 2).into_iter().map(|v| v.max(0.0)).collect();
    let want: Vec<f64> = common::matvec(wl.data(), &hidden, 16).into_iter().map(common::sigmoid).collect();
    assert_close(&got, &want, 1e-6);
}

#[test]
fn cah_blend_matches_convex_combination() {
    let mut r = rng(11);
    let mp = Tensor::<f64>::randn(&[4, 5, 5], 2.0, &mut r);
    let wc = Tensor::<f64>::uniform(&[4], 0.0, 1.0, &mut r);
    let got = run(|t| {
        let (a, b) = (t.constant(&mp), t.constant(&wc));
        cah::cah_forward(t, a, b, 1e-5, true).unwrap()
    });
    let norm = common::instance_norm(mp.data(), 4, 1e-5);
    let want: Vec<f64> = (0..mp.len())
        .map(|i| {
            let g = wc.data()[i / 25];
            g * mp.data()[i] + (1.0 - g) * norm[i]
        })
        .collect();
    assert_close(&got, &want, 1e-6);
}

fn replay_stages(backbone: &Backbone<f64>, image: &[f64], stages: usize) -> (Vec<f64>, usize, usize) {
    let (mut x, mut h, mut w) = (image.to_vec(), 16, 16);
    for s in backbone.stages.iter().take(stages) {
        let (ci, co) = (s.in_channels(), s.out_channels());
        let (out, oh, ow) = common::conv2d(&x, ci, h, w, s.weight.data(), co, 3, s.stride, 1);
        x = out.iter().enumerate().map(|(i, v)| (v + s.bias.data()[i / (oh * ow)]).max(0.0)).collect();
        (h, w) = (oh, ow);
    }
    (x, h, w)
}

#[test]
fn backbone_matches_layer_replay() {
    let mut r = rng(12);
    let mut b = Backbone::<f64>::init(&BackboneArch::desk(), &mut r).unwrap();
    for s in &mut b.stages {
        s.bias = Tensor::randn(s.bias.shape(), 0.1, &mut r);
    }
    let img = Tensor::<f64>::uniform(&[3, 16, 16], 0.0, 1.0, &mut r);
    let (want, h, w) = replay_stages(&b, img.data(), 2);
    let got = b.block1_forward(&img).unwrap();
    assert_eq!(got.shape(), [16, h, w]);
    assert_close(got.data(), &want, 1e-6);
    let (want, h, w) = replay_stages(&b, img.data(), 4);
    let got = b.full_forward(&img).unwrap();
    assert_eq!(got.shape(), [64, h, w]);
    assert_close(got.data(), &want, 1e-6);
}

#[test]
fn embedding_matches_module_replay() {
    let mut r = rng(13);
    let b = Backbone::<f64>::init(&BackboneArch::desk(), &mut r).unwrap();
    let mut p = FrptParams::init(&b, 16, 3, &Ablation::default(), 0.25, 8, 1e-5, &mut r).unwrap();
    for (_, t, _) in p.named_mut() {
        let s = t.shape().to_vec();
        *t = Tensor::randn(&s, 0.2, &mut r).learnable();
    }
    let img = Tensor::<f64>::uniform(&[3, 16, 16], 0.0, 1.0, &mut r);
    let got = p.embed(&b, &img).unwrap();

    let d = p.dpp.as_ref().unwrap();
    let (ms, hs, ws) = replay_stages(&b, img.data(), 2);
    let raw = common::content_parse(&ms, 16, hs, ws, d.w_k.data(), d.sigma);
    let a = common::softmax(&raw);
    let (mx, my) = common::mapping(&a, hs, ws, 16, 16, 0.25);
    let warped = common::bilinear(img.data(), 3, 16, 16, &mx, &my);
    let (mp, _, _) = replay_stages(&b, &warped, 4);
    let c = p.cah.as_ref().unwrap();
    let pooled = common::gap(&mp, 64);
    let hidden: Vec<f64> = common::matvec(c.w_f.data(), &pooled, 8).into_iter().map(|v| v.max(0.0)).collect();
    let gate: Vec<f64> = common::matvec(c.w_l.data(), &hidden, 64).into_iter().map(common::sigmoid).collect();
    let norm = common::instance_norm(&mp, 64, 1e-5);
    let n = mp.len() / 64;
    let mr: Vec<f64> = (0..mp.len()).map(|i| gate[i / n] * mp[i] + (1.0 - gate[i / n]) * norm[i]).collect();
    assert_close(&got, &common::gap(&mr, 64), 1e-6);
}
