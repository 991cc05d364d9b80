use super::*;
use crate::numerics::AdamConfig;
use crate::vocab::{Vocab, EOS};

fn tiny() -> (Config, Backbones<f64>, BridgeParams<f64>) {
    let cfg = Config::tiny();
    let bb = Backbones::<f64>::build(&cfg).unwrap();
    let bridge = BridgeParams::<f64>::init(&cfg).unwrap();
    (cfg, bb, bridge)
}

fn zeros(cfg: &Config) -> (Backbones<f64>, BridgeParams<f64>) {
    (Backbones::layout(cfg).unwrap(), BridgeParams::layout(cfg).unwrap())
}

fn recipe(vocab: &Vocab, text: &str) -> TokenSequence {
    vocab.encode(text).unwrap()
}

fn image(cfg: &Config, phase: f64) -> Tensor<f64> {
    Tensor::from_fn(&cfg.dims.image_shape(), |i| 0.5 + 0.4 * (i as f64 * 0.37 + phase).sin())
}

/// −log softmax(row)[target], computed directly.
fn nll(row: &[f64], target: usize) -> f64 {
    let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + row.iter().map(|x| (x - top).exp()).sum::<f64>().ln();
    lse - row[target]
}

#[test]
fn zero_w_recipe_gives_zero_prefix() {
    let cfg = Config::tiny();
    let (bb, bridge) = zeros(&cfg);
    let p = Model::new(&bb, &bridge).image_prefix(&Tensor::ones(&[4])).unwrap();
    assert_eq!(p.shape(), &[2, 8]);
    assert!(p.data().iter().all(|&x| x == 0.0));
}

#[test]
fn prefix_selects_rows_of_w() {
    let mut cfg = Config::tiny();
    cfg.dims.d = 2;
    cfg.dims.k = 1;
    cfg.dims.e = 2;
    cfg.backbone.lm_heads = 1;
    let (bb, mut bridge) = zeros(&cfg);
    *bridge.store.get_mut(bridge.w_recipe) = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = Model::new(&bb, &bridge)
        .image_prefix(&Tensor::new(vec![2], vec![1.0, 0.0]).unwrap())
        .unwrap();
    assert_eq!(p, Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
}

#[test]
fn prefix_matches_loop_oracle() {
    let (_, bb, bridge) = tiny();
    let v = Tensor::from_fn(&[4], |i| (i as f64 * 1.3).cos());
    let p = Model::new(&bb, &bridge).image_prefix(&v).unwrap();
    let w = bridge.store.get(bridge.w_recipe);
    let (k, e) = (2, 8);
    for r in 0..k {
        for c in 0..e {
            let expect: f64 = (0..4).map(|i| v.data()[i] * w.data()[i * k * e + r * e + c]).sum();
            assert!((p.data()[r * e + c] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn prefix_rejects_wrong_dimension() {
    let (_, bb, bridge) = tiny();
    let err = Model::new(&bb, &bridge).image_prefix(&Tensor::ones(&[5])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("d=4") && msg.contains("k=2") && msg.contains("e=8"), "{msg}");
}

#[test]
fn uniform_logits_give_log_vocab_losses() {
    let cfg = Config::tiny();
    let (bb, bridge) = zeros(&cfg);
    let model = Model::new(&bb, &bridge);
    let y = recipe(&bb.vocab, "tomato salad heat the pan");
    let n = (y.len() - 1) as f64;
    let ln_v = (bb.vocab.len() as f64).ln();
    let lr = model.recipe_loss(&image(&cfg, 0.0), &y).unwrap();
    assert!((lr - n * ln_v).abs() < 1e-9, "{lr}");
    let lp = model.img_token_loss(&y).unwrap();
    assert!((lp - ln_v).abs() < 1e-9, "{lp}");
}

#[test]
fn recipe_loss_matches_positionwise_oracle() {
    let (cfg, bb, bridge) = tiny();
    let model = Model::new(&bb, &bridge);
    let img = image(&cfg, 0.3);
    let y = recipe(&bb.vocab, "onion soup onion two cup heat the pan cook and serve");
    let total = model.recipe_loss(&img, &y).unwrap();
    let prefix = model.image_prefix(&bb.visual_encode(&img).unwrap()).unwrap();
    let ids = y.ids();
    let mut oracle = 0.0;
    for n in 1..ids.len() {
        let mut s = model.session(false);
        let pre = s.constant(prefix.clone()).unwrap();
        let e_img = s.p(bridge.e_img).unwrap();
        let out = bb
            .lm
            .forward(&mut s, &[Piece::Embeds(pre), Piece::Tokens(ids[..n].to_vec())], Some(e_img))
            .unwrap();
        let logits = s.value(out.logits);
        oracle += nll(logits.row(logits.rows() - 1), ids[n] as usize);
    }
    assert!((total - oracle).abs() < 1e-6, "{total} vs {oracle}");
}

#[test]
fn single_target_loss_is_minus_log_p() {
    let (cfg, bb, bridge) = tiny();
    let model = Model::new(&bb, &bridge);
    let img = image(&cfg, 1.0);
    let y = TokenSequence::from_ids(vec![BOS, EOS]);
    let lr = model.recipe_loss(&img, &y).unwrap();
    let mut s = model.session(false);
    let pre = model.image_prefix_var(&mut s, &bb.visual_encode(&img).unwrap()).unwrap();
    let e_img = s.p(bridge.e_img).unwrap();
    let out = bb.lm.forward(&mut s, &[Piece::Embeds(pre), Piece::Tokens(vec![BOS])], Some(e_img)).unwrap();
    let probs = s.value(out.logits).softmax().unwrap();
    let p = probs.row(2)[EOS as usize];
    assert!((lr + p.ln()).abs() < 1e-9);
    assert!(matches!(
        model.recipe_loss(&img, &TokenSequence::from_ids(vec![])),
        Err(Error::EmptySequence)
    ));
}

#[test]
fn zero_w_recipe_equals_zero_prefix_text_model() {
    let (cfg, bb, mut bridge) = tiny();
    *bridge.store.get_mut(bridge.w_recipe) = Tensor::zeros(&[4, 16]);
    let model = Model::new(&bb, &bridge);
    let y = recipe(&bb.vocab, "rice stew rice one cup");
    let lr = model.recipe_loss(&image(&cfg, 2.0), &y).unwrap();
    let mut s = model.session(false);
    let pre = s.constant(Tensor::zeros(&[2, 8])).unwrap();
    let e_img = s.p(bridge.e_img).unwrap();
    let ids = y.ids();
    let out = bb
        .lm
        .forward(&mut s, &[Piece::Embeds(pre), Piece::Tokens(ids[..ids.len() - 1].to_vec())], Some(e_img))
        .unwrap();
    let logits = s.value(out.logits);
    let text_only: f64 = (1..ids.len()).map(|n| nll(logits.row(1 + n), ids[n] as usize)).sum();
    assert!((lr - text_only).abs() < 1e-6);
}

#[test]
fn img_token_loss_matches_direct_formula() {
    let (_, bb, bridge) = tiny();
    let model = Model::new(&bb, &bridge);
    let y = recipe(&bb.vocab, "beef casserole beef two pinch");
    let lp = model.img_token_loss(&y).unwrap();
    let mut ids = vec![BOS];
    ids.extend_from_slice(y.words());
    let (_, hidden) = bb.lm_forward(&[Piece::Tokens(ids)]).unwrap();
    let h = hidden.row(hidden.rows() - 1);
    let tok = bb.store.get(bb.lm.token_embedding);
    let e_img = bridge.store.get(bridge.e_img);
    let row: Vec<f64> = (0..tok.rows())
        .map(|i| tok.row(i))
        .chain((0..e_img.rows()).map(|i| e_img.row(i)))
        .map(|emb| emb.iter().zip(h).map(|(a, b)| a * b).sum())
        .collect();
    let oracle = nll(&row, bb.vocab.img(1) as usize);
    assert!((lp - oracle).abs() < 1e-9, "{lp} vs {oracle}");
}

#[test]
fn img_token_loss_falls_as_img1_aligns_with_the_hidden_state() {
    let (_, bb, mut bridge) = tiny();
    let y = recipe(&bb.vocab, "leek soup");
    let mut ids = vec![BOS];
    ids.extend_from_slice(y.words());
    let (_, hidden) = bb.lm_forward(&[Piece::Tokens(ids)]).unwrap();
    let h = hidden.row(hidden.rows() - 1).to_vec();
    let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut last = f64::INFINITY;
    for scale in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let e = bridge.store.get_mut(bridge.e_img);
        for (j, x) in e.data_mut()[..8].iter_mut().enumerate() {
            *x = scale * h[j] / norm;
        }
        let lp = Model::new(&bb, &bridge).img_token_loss(&y).unwrap();
        assert!(lp < last, "scale {scale}: {lp} !< {last}");
        last = lp;
    }
}

#[test]
fn img_token_loss_rejects_img_tokens_in_text() {
    let (_, bb, bridge) = tiny();
    let mut ids = recipe(&bb.vocab, "pea soup").ids().to_vec();
    ids.insert(2, bb.vocab.img(1));
    let err = Model::new(&bb, &bridge)
        .img_token_loss(&TokenSequence::from_ids(ids))
        .unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)));
}

#[test]
fn qformer_shape_purity_and_errors() {
    let (_, bb, bridge) = tiny();
    let model = Model::new(&bb, &bridge);
    let h = Tensor::from_fn(&[2, 8], |i| (i as f64).sin());
    let a = model.qformer_forward(&h).unwrap();
    assert_eq!(a.shape(), &[2, 4]);
    assert_eq!(a, model.qformer_forward(&h).unwrap());
    assert!(matches!(
        model.qformer_forward(&Tensor::zeros(&[3, 8])),
        Err(Error::Dimension { op: "qformer_forward", .. })
    ));
}

#[test]
fn qformer_jacobian_vector_product_matches_finite_differences() {
    let (_, bb, bridge) = tiny();
    let model = Model::new(&bb, &bridge);
    let h = Tensor::from_fn(&[2, 8], |i| (i as f64 * 0.7).sin());
    // d/dh of <u, f(h)> by reverse mode, compared entry by entry.
    let u = Tensor::from_fn(&[2, 4], |i| 1.0 + i as f64 * 0.1);
    let mut s = model.session(false);
    let x = s.graph.param(h.clone()).unwrap();
    let out = bridge.qformer.forward(&mut s, x).unwrap();
    let uc = s.constant(u.clone()).unwrap();
    let prod = s.graph.mul(out, uc).unwrap();
    let loss = s.graph.sum(prod).unwrap();
    let grad = s.graph.backward(loss).unwrap().take(x).unwrap();
    let eps = 1e-5;
    for i in 0..h.numel() {
        let f = |delta: f64| {
            let mut p = h.clone();
            p.data_mut()[i] += delta;
            model.qformer_forward(&p).unwrap().dot(&u).unwrap()
        };
        let fd = (f(eps) - f(-eps)) / (2.0 * eps);
        let an = grad.data()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        assert!(rel < 1e-4, "entry {i}: {an} vs {fd}");
    }
}

#[test]
fn generation_loss_matches_direct_mean_square() {
    let (_, bb, bridge) = tiny();
    let model = Model::new(&bb, &bridge);
    let y = recipe(&bb.vocab, "garlic basil salad heat the pan");
    let lg = model.generation_loss(&y).unwrap();
    let out = model.qformer_forward(&model.img_hidden(&y).unwrap()).unwrap();
    let target = bb.text_encode_target(&y).unwrap();
    let oracle: f64 = out
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / 8.0;
    assert!((lg - oracle).abs() < 1e-6);
    assert!(lg > 0.0);
}

#[test]
fn generation_loss_is_zero_when_output_equals_target() {
    let mut cfg = Config::tiny();
    cfg.dims.l = 1;
    let bb = Backbones::<f64>::build(&cfg).unwrap();
    let mut bridge = BridgeParams::<f64>::init(&cfg).unwrap();
    let y = recipe(&bb.vocab, "corn pea soup");
    let target = bb.text_encode_target(&y).unwrap();
    let out = &bridge.qformer.output;
    let (w, b) = (out.w, out.b);
    *bridge.store.get_mut(w) = Tensor::zeros(&[4, 4]);
    *bridge.store.get_mut(b) = target.reshape(&[4]).unwrap();
    assert_eq!(Model::new(&bb, &bridge).generation_loss(&y).unwrap(), 0.0);
}

#[test]
fn shared_pass_matches_separate_losses() {
    let (_, bb, bridge) = tiny();
    let model = Model::new(&bb, &bridge);
    let y = recipe(&bb.vocab, "egg lemon salad");
    let mut s = model.session(false);
    let (lp, lg) = model.image_losses_var(&mut s, &y).unwrap();
    assert_eq!(s.value(lp).item(), model.img_token_loss(&y).unwrap());
    assert_eq!(s.value(lg).item(), model.generation_loss(&y).unwrap());
}

#[test]
fn gradients_cover_exactly_the_bridge() {
    let (cfg, bb, bridge) = tiny();
    let model = Model::new(&bb, &bridge);
    let img = image(&cfg, 0.0);
    let y = recipe(&bb.vocab, "tomato onion salad");
    let (grads, report) = model.batch_gradients(&[(&img, &y)]).unwrap();
    let names: Vec<&str> = grads.names().collect();
    let expected: Vec<&str> = bridge.store.iter().map(|(n, _)| n).collect();
    let mut sorted = expected.clone();
    sorted.sort_unstable();
    let mut got = names.clone();
    got.sort_unstable();
    assert_eq!(got, sorted);
    assert!(names.iter().all(|n| n.starts_with("bridge/")));
    for name in ["bridge/w_recipe", "bridge/e_img", "bridge/queries", "bridge/qformer.input.w"] {
        assert!(grads.by_name(name).unwrap().norm() > 0.0, "{name}");
    }
    assert!(report.l_r >= 0.0 && report.l_p >= 0.0 && report.l_g >= 0.0);
    assert!((report.total - (report.l_r + report.l_p + report.l_g)).abs() < 1e-12);
}

/// Central differences on a few coordinates of every bridge tensor, for
/// each loss on its own.
#[test]
fn spot_finite_differences() {
    let (cfg, bb, bridge) = tiny();
    let img = image(&cfg, 0.8);
    let y = recipe(&bb.vocab, "chicken rice stew chicken three spoon");
    type LossFn = fn(&Model<f64>, &mut Session<f64>, &Tensor<f64>, &TokenSequence) -> Var;
    let losses: [(&str, LossFn); 3] = [
        ("l_r", |m, s, x, y| m.recipe_loss_var(s, x, y).unwrap()),
        ("l_p", |m, s, _, y| m.img_token_loss_var(s, y).unwrap()),
        ("l_g", |m, s, _, y| m.generation_loss_var(s, y).unwrap()),
    ];
    for (label, f) in losses {
        let model = Model::new(&bb, &bridge);
        let mut s = model.session(true);
        let l = f(&model, &mut s, &img, &y);
        let grads = s.gradients(l).unwrap();
        for id in bridge.store.ids() {
            let n = bridge.store.get(id).numel();
            for idx in [0, n / 2, n - 1] {
                let eval = |delta: f64| {
                    let mut b = bridge.clone();
                    b.store.get_mut(id).data_mut()[idx] += delta;
                    let m = Model::new(&bb, &b);
                    let mut s = m.session(false);
                    let v = f(&m, &mut s, &img, &y);
                    s.value(v).item()
                };
                let h = 1e-5;
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads.get(id).unwrap().data()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4, "{label} {}[{idx}]: {an} vs {fd}", bridge.store.name(id));
            }
        }
    }
}

#[test]
fn recipe_loss_reaches_only_the_prefix_and_img_rows() {
    let (cfg, bb, bridge) = tiny();
    let model = Model::new(&bb, &bridge);
    let mut s = model.session(true);
    let l = model
        .recipe_loss_var(&mut s, &image(&cfg, 0.0), &recipe(&bb.vocab, "bean soup"))
        .unwrap();
    let g = s.gradients(l).unwrap();
    assert!(g.get(bridge.e_img).unwrap().norm() > 0.0);
    assert_eq!(g.get(bridge.qformer.queries).unwrap().norm(), 0.0);
    assert_eq!(g.get(bridge.qformer.input.w).unwrap().norm(), 0.0);
    assert!(g.get(bridge.w_recipe).unwrap().norm() > 0.0);
}

#[test]
fn zero_learning_rate_keeps_params() {
    let (cfg, bb, mut bridge) = tiny();
    let before = bridge.store.sha256();
    let mut trainer = Trainer::new(
        &bridge,
        AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
    );
    let img = image(&cfg, 0.0);
    let y = recipe(&bb.vocab, "tomato salad");
    let report = trainer.train_step(&bb, &mut bridge, &[(&img, &y)]).unwrap();
    assert!(report.total > 0.0);
    assert_eq!(bridge.store.sha256(), before);
    assert_eq!(trainer.step, 1);
}

#[test]
fn small_step_decreases_loss_on_its_pair() {
    let (cfg, bb, mut bridge) = tiny();
    let mut trainer = Trainer::new(
        &bridge,
        AdamConfig {
            lr: 1e-4,
            ..AdamConfig::default()
        },
    );
    let img = image(&cfg, 0.4);
    let y = recipe(&bb.vocab, "potato carrot salad heat the pan");
    let before = trainer.train_step(&bb, &mut bridge, &[(&img, &y)]).unwrap().total;
    let (_, after) = Model::new(&bb, &bridge).batch_gradients(&[(&img, &y)]).unwrap();
    assert!(after.total <= before, "{} > {before}", after.total);
}

#[test]
fn training_is_deterministic() {
    let (cfg, bb, bridge0) = tiny();
    let img = image(&cfg, 0.4);
    let y = recipe(&bb.vocab, "potato carrot salad");
    let run = || {
        let mut bridge = bridge0.clone();
        let mut t = Trainer::new(&bridge, AdamConfig::default());
        for _ in 0..3 {
            t.train_step(&bb, &mut bridge, &[(&img, &y)]).unwrap();
        }
        bridge.store.sha256()
    };
    assert_eq!(run(), run());
}

#[test]
fn text_to_image_is_a_valid_image() {
    let (_, bb, bridge) = tiny();
    let img = Model::new(&bb, &bridge)
        .text_to_image(&recipe(&bb.vocab, "ginger soup"))
        .unwrap();
    assert_eq!(img.shape(), &[4, 4, 3]);
    assert!(img.data().iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn greedy_decode_matches_stepwise_reimplementation() {
    let cfg = Config::tiny();
    let bb = Backbones::<f32>::build(&cfg).unwrap();
    let bridge = BridgeParams::<f32>::init(&cfg).unwrap();
    let model = Model::new(&bb, &bridge);
    let prompt = [Segment::Text("tomato".into())];
    let g = generate_interleaved(&model, &prompt, 12, Decoding::Greedy).unwrap();

    let vocab = &bb.vocab;
    let m = vocab.img_tokens();
    let mut ids = vec![BOS, vocab.id("tomato").unwrap()];
    let mut expect = Vec::new();
    let mut free = 0;
    while free < 12 {
        let mut s = model.session(false);
        let e_img = s.p(bridge.e_img).unwrap();
        let out = bb.lm.forward(&mut s, &[Piece::Tokens(ids.clone())], Some(e_img)).unwrap();
        let logits = s.value(out.logits);
        let row = logits.row(logits.rows() - 1);
        let mut best = None;
        for (i, &x) in row.iter().enumerate() {
            let t = i as TokenId;
            let banned = t == crate::vocab::PAD || t == BOS || (vocab.is_img(t) && t != vocab.img(1));
            if !banned && best.is_none_or(|(_, b)| x > b) {
                best = Some((t, x));
            }
        }
        let t = best.unwrap().0;
        free += 1;
        if t == EOS {
            break;
        }
        if t == vocab.img(1) {
            let run: Vec<TokenId> = (1..=m).map(|j| vocab.img(j)).collect();
            ids.extend(&run);
            expect.extend(run);
        } else {
            ids.push(t);
            expect.push(t);
        }
    }
    assert_eq!(g.tokens, expect);
}
