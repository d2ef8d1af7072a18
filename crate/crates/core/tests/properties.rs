use arclab::accounting::{count_arc_config, count_finetune, MethodSpec};
use arclab::arc::{arc_forward, arc_hidden, AdapterBank, ArcConfig, BankGrad, Form, Mode, Sharing, Site, Variant};
use arclab::autodiff::Tape;
use arclab::kernel::{layernorm, matmul, softmax_rows, svd, Matrix};
use arclab::reparam::fuse;
use arclab::vit::{self, BackboneConfig, BackboneWeights, Image, TapeModel};
use arclab::Rng;
use proptest::prelude::*;

fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.max_abs_diff(b).unwrap() / a.max_abs().max(b.max_abs()).max(1e-300)
}

fn any_site() -> impl Strategy<Value = Site> {
    prop::sample::select(Site::ALL.to_vec())
}

fn any_sharing() -> impl Strategy<Value = Sharing> {
    prop::sample::select(Sharing::ALL.to_vec())
}

fn randomize(bank: &mut AdapterBank, rng: &mut Rng) {
    let names: Vec<String> = bank.tensors().keys().cloned().collect();
    for n in names {
        let t = bank.tensor_mut(&n).unwrap();
        *t = rng.normal_matrix(t.rows(), t.cols(), 0.5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..12, n in 1usize..12, p in 1usize..12, q in 1usize..12) {
        let mut rng = Rng::new(seed);
        let (a, b, c) = (rng.normal_matrix(m, n, 1.0), rng.normal_matrix(n, p, 1.0), rng.normal_matrix(p, q, 1.0));
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(rel_diff(&left, &right) <= 1e-9);
    }

    #[test]
    fn svd_bounds(seed in any::<u64>(), m in 1usize..=32, n in 1usize..=32, scale in 1e-3f64..1e3) {
        let a = Rng::new(seed).normal_matrix(m, n, scale);
        let d = svd(&a).unwrap();
        let k = m.min(n);
        prop_assert!(d.reconstruct().max_abs_diff(&a).unwrap() <= 1e-8 * a.max_abs());
        let eye = Matrix::identity(k);
        prop_assert!(matmul(&d.u.transpose(), &d.u).unwrap().max_abs_diff(&eye).unwrap() <= 1e-10);
        prop_assert!(matmul(&d.v.transpose(), &d.v).unwrap().max_abs_diff(&eye).unwrap() <= 1e-10);
        prop_assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(d.s.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), r in 1usize..8, c in 1usize..40) {
        let a = Rng::new(seed).uniform_matrix(r, c, -1e3, 1e3);
        let s = softmax_rows(&a);
        for i in 0..r {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn rng_streams_repeat() {
    let (mut a, mut b) = (Rng::new(99), Rng::new(99));
    for _ in 0..10_000 {
        assert_eq!(a.next_u64(), b.next_u64());
    }
}

#[test]
fn shared_gradient_is_sum_over_uses() {
    // f(W) = sum(X W W^T Y): the tied registration must equal the sum of
    // the gradients of two independently registered copies
    let mut rng = Rng::new(5);
    let (x, w, y) = (rng.normal_matrix(3, 5, 1.0), rng.normal_matrix(5, 2, 1.0), rng.normal_matrix(5, 4, 1.0));
    let mut t = Tape::new();
    let (out, _) = t
        .record(|t| {
            let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
            let wv = t.param("w", &w, true)?;
            let wt = t.transpose(wv);
            let h = t.matmul(xv, wv)?;
            let h = t.matmul(h, wt)?;
            let h = t.matmul(h, yv)?;
            Ok(t.sum(h))
        })
        .unwrap();
    let tied = t.backward(out).unwrap()["w"].clone();

    let mut t = Tape::new();
    let (out, _) = t
        .record(|t| {
            let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
            let w1 = t.param("w1", &w, true)?;
            let w2 = t.param("w2", &w, true)?;
            let wt = t.transpose(w2);
            let h = t.matmul(xv, w1)?;
            let h = t.matmul(h, wt)?;
            let h = t.matmul(h, yv)?;
            Ok(t.sum(h))
        })
        .unwrap();
    let g = t.backward(out).unwrap();
    let split = g["w1"].add(&g["w2"]).unwrap();
    assert!(tied.max_abs_diff(&split).unwrap() <= 1e-12);
}

fn toy_model(seed: u64) -> (BackboneConfig, BackboneWeights) {
    let cfg = BackboneConfig::toy();
    let w = BackboneWeights::random(&cfg, &mut Rng::new(seed)).unwrap();
    (cfg, w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tape_forward_and_gradients_are_reproducible(seed in any::<u64>(), sharing in any_sharing(), site in any_site()) {
        let (cfg, w) = toy_model(seed);
        let arc = ArcConfig::default().with_bottleneck(4).with_sharing(sharing).with_positions(&[site]);
        let mut bank = AdapterBank::init(&arc, &cfg, &mut Rng::new(seed ^ 1)).unwrap();
        randomize(&mut bank, &mut Rng::new(seed ^ 2));
        let img = Image::random(&cfg, &mut Rng::new(seed ^ 3));
        let plain = vit::forward(&img, &w, Some(&bank), Mode::Eval).unwrap();
        let run = || {
            let model = TapeModel {
                backbone: &w,
                head: &w.head,
                head_trainable: true,
                bank: Some(&bank),
                bank_grad: BankGrad::Trainable,
            };
            let mut t = Tape::new();
            let mut logits = None;
            let (out, _) = t.record(|t| {
                let z = vit::logits_tape(t, &model, &img, Mode::Eval)?;
                logits = Some(z);
                t.cross_entropy(z, &[1])
            }).unwrap();
            (t.value(logits.unwrap()).clone(), t.backward(out).unwrap())
        };
        let (z1, g1) = run();
        let (z2, g2) = run();
        prop_assert_eq!(&z1, &plain);
        prop_assert_eq!(z1, z2);
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn zero_blocks_preserve_residual_stream(seed in any::<u64>()) {
        let (cfg, mut w) = toy_model(seed);
        for lw in &mut w.layers {
            for m in [&mut lw.wq, &mut lw.bq, &mut lw.wk, &mut lw.bk, &mut lw.wv, &mut lw.bv,
                      &mut lw.wo, &mut lw.bo, &mut lw.w1, &mut lw.b1, &mut lw.w2, &mut lw.b2] {
                *m = Matrix::zeros(m.rows(), m.cols());
            }
        }
        let img = Image::random(&cfg, &mut Rng::new(seed ^ 7));
        let emb = vit::patch_embed(&img, &w).unwrap();
        let cls = layernorm(&emb.slice_rows(0, 1).unwrap(), w.final_gamma.data(), w.final_beta.data(), cfg.ln_eps).unwrap();
        let expected = matmul(&cls, &w.head.w).unwrap().add_row(&w.head.b).unwrap();
        prop_assert_eq!(vit::forward(&img, &w, None, Mode::Eval).unwrap(), expected);
    }

    #[test]
    fn permuting_patches_with_positions_keeps_logits(seed in any::<u64>(), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let (cfg, w) = toy_model(seed);
        let img = Image::random(&cfg, &mut Rng::new(seed ^ 9));
        let p = cfg.patch_size;
        let side = cfg.image_size / p;
        // patch perm[k] of the new image is patch k of the old one
        let mut moved = img.clone();
        let mut w2 = w.clone();
        for k in 0..side * side {
            let (sr, sc) = (k / side, k % side);
            let (dr, dc) = (perm[k] / side, perm[k] % side);
            for r in 0..p {
                for c in 0..p {
                    for ch in 0..cfg.channels {
                        moved.set(dr * p + r, dc * p + c, ch, img.get(sr * p + r, sc * p + c, ch));
                    }
                }
            }
            w2.pos.row_mut(1 + perm[k]).copy_from_slice(w.pos.row(1 + k));
        }
        let a = vit::forward(&img, &w, None, Mode::Eval).unwrap();
        let b = vit::forward(&moved, &w2, None, Mode::Eval).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn arc_is_affine(seed in any::<u64>(), site in any_site(), sharing in any_sharing(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let cfg = BackboneConfig::toy();
        let arc = ArcConfig::default().with_bottleneck(4).with_sharing(sharing).with_positions(&[site]);
        let mut bank = AdapterBank::init(&arc, &cfg, &mut Rng::new(seed)).unwrap();
        randomize(&mut bank, &mut Rng::new(seed ^ 4));
        let mut rng = Rng::new(seed ^ 5);
        let (x, y) = (rng.normal_matrix(5, 16, 1.0), rng.normal_matrix(5, 16, 1.0));
        let f = |m: &Matrix| arc_forward(m, &bank, 2, site, Mode::Eval).unwrap();
        let combo = x.scale(alpha).add(&y.scale(beta)).unwrap();
        let ones_b = Matrix::zeros(5, 16).add_row(bank.bias(2, site).unwrap()).unwrap();
        let rhs = f(&x).scale(alpha).add(&f(&y).scale(beta)).unwrap()
            .sub(&ones_b.scale(alpha + beta - 1.0)).unwrap();
        prop_assert!(f(&combo).max_abs_diff(&rhs).unwrap() <= 1e-10);
    }

    #[test]
    fn census_matches_formula(
        d_heads in 1usize..6, layers in 1usize..6, dp_frac in 0.05f64..1.0, mask in 1u8..16,
        sharing in any_sharing(), parallel in any::<bool>(), full_rank in any::<bool>(), layer_mask in 1u8..32,
    ) {
        let cfg = BackboneConfig { embed_dim: 4 * d_heads, heads: 2, layers, ..BackboneConfig::toy() };
        let dp = ((dp_frac * cfg.embed_dim as f64).ceil() as usize).max(1);
        let positions: Vec<Site> = Site::ALL.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, s)| *s).collect();
        let inserted: Vec<usize> = (1..=layers).filter(|l| layer_mask & (1 << (l - 1)) != 0).collect();
        prop_assume!(!inserted.is_empty());
        let arc = ArcConfig::default()
            .with_bottleneck(dp)
            .with_positions(&positions)
            .with_sharing(sharing)
            .with_layers(inserted)
            .with_form(if parallel { Form::Parallel } else { Form::Sequential })
            .with_variant(if full_rank { Variant::FullRank } else { Variant::Bottleneck });
        match AdapterBank::init(&arc, &cfg, &mut Rng::new(0)) {
            Ok(bank) => prop_assert_eq!(bank.parameter_count(), count_arc_config(&arc, &cfg).unwrap()),
            Err(_) => prop_assert!(count_arc_config(&arc, &cfg).is_err()),
        }
    }

    #[test]
    fn default_arc_census_is_closed_form(d_heads in 1usize..12, layers in 1usize..8, dp in 1u64..4) {
        let cfg = BackboneConfig { embed_dim: 4 * d_heads, heads: 2, layers, ..BackboneConfig::toy() };
        let bank = AdapterBank::init(&ArcConfig::default().with_bottleneck(dp as usize), &cfg, &mut Rng::new(0)).unwrap();
        let spec = MethodSpec::Arc { bottleneck: dp };
        prop_assert_eq!(bank.parameter_count(), count_finetune(&spec, cfg.embed_dim as u64, layers as u64).unwrap());
    }

    #[test]
    fn fuse_preserves_shapes(seed in any::<u64>(), sharing in any_sharing(), mask in 1u8..16) {
        let (cfg, w) = toy_model(seed);
        let positions: Vec<Site> = Site::ALL.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, s)| *s).collect();
        let arc = ArcConfig::default().with_bottleneck(4).with_sharing(sharing).with_positions(&positions);
        let mut bank = AdapterBank::init(&arc, &cfg, &mut Rng::new(seed)).unwrap();
        randomize(&mut bank, &mut Rng::new(seed ^ 6));
        let fused = fuse(&w, &bank, "prop").unwrap();
        let shapes = |b: &BackboneWeights| b.named_tensors().into_iter().map(|(n, m)| (n, m.shape())).collect::<Vec<_>>();
        prop_assert_eq!(shapes(&w), shapes(&fused.weights));
    }
}

#[test]
fn dropout_hidden_mean_matches_eval() {
    let cfg = BackboneConfig::toy();
    let arc = ArcConfig::default().with_bottleneck(4).with_dropout(0.3);
    let mut bank = AdapterBank::init(&arc, &cfg, &mut Rng::new(1)).unwrap();
    randomize(&mut bank, &mut Rng::new(2));
    let x = Rng::new(3).normal_matrix(5, 16, 1.0);
    let eval = arc_hidden(&x, &bank, 1, Site::BeforeMha, Mode::Eval).unwrap();
    let n = 10_000;
    let mut rng = Rng::new(4);
    let mut sum = Matrix::zeros(eval.rows(), eval.cols());
    for _ in 0..n {
        sum.add_assign(&arc_hidden(&x, &bank, 1, Site::BeforeMha, Mode::Train(&mut rng)).unwrap()).unwrap();
    }
    let mean = sum.scale(1.0 / n as f64);
    // each entry is h * B / (1 - p) with B ~ Bernoulli(1 - p)
    let p = 0.3f64;
    let rel_sd = (p / (1.0 - p)).sqrt();
    for (m, h) in mean.data().iter().zip(eval.data()) {
        let se = h.abs() * rel_sd / (n as f64).sqrt();
        assert!((m - h).abs() <= 3.0 * se + 1e-15, "mean {m} vs eval {h} (se {se})");
    }
}
