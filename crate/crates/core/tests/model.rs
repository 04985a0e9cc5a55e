mod common;

use common::*;
use rand::Rng;
use turboconn::model::{
    read_checkpoint, write_checkpoint, ConnectionSpec, Feedback, Forward, GenerateOptions, Model, Target,
};
use turboconn::numcore::Tensor;
use turboconn::Error;

fn connected(seed: u64, g: usize, alpha: f32) -> Model {
    let mut r = rng(seed);
    let cfg = config(3, 8, 2, 13, 24);
    let pairs = random_pairs(&mut r, 3);
    let mut m = Model::new(cfg, spec(&pairs, alpha, g, 3), seed).unwrap();
    randomize(&mut m, &mut r, 0.3);
    m
}

#[test]
fn grouped_forward_matches_token_by_token_reference() {
    for g in [1, 2, 3, 4, 7] {
        for seed in 0..3 {
            let m = connected(seed, g, 1.5);
            let toks = random_tokens(&mut rng(seed + 100), 11, 13);
            let got = m.forward_grouped(&toks).unwrap();
            let want = reference_logits(&m, &toks, None);
            let err = max_diff(got.data(), &want);
            assert!(err <= 1e-5, "g={g} seed={seed}: {err}");
        }
    }
}

#[test]
fn lora_forward_matches_reference() {
    let mut m = connected(4, 2, 1.0);
    m.attach_lora(2, &Target::ALL).unwrap();
    randomize(&mut m, &mut rng(9), 0.3);
    let toks = random_tokens(&mut rng(1), 9, 13);
    let err = max_diff(
        m.forward_grouped(&toks).unwrap().data(),
        &reference_logits(&m, &toks, None),
    );
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn group_iterations_are_ceil_k_over_g() {
    for g in 1..=6 {
        let m = connected(1, g, 1.0);
        for k in 1..=13 {
            let toks = vec![2; k];
            let mut fw = Forward::new(&m, 1, false).unwrap();
            fw.run(&toks, k).unwrap();
            assert_eq!(fw.steps(), k.div_ceil(g), "k={k} g={g}");
        }
    }
}

#[test]
fn chunks_wider_than_the_group_are_rejected() {
    let m = connected(1, 2, 1.0);
    let mut fw = Forward::new(&m, 1, false).unwrap();
    assert!(matches!(fw.step(&[1, 2, 3]), Err(Error::Parameter(_))));
}

#[test]
fn zero_init_connections_leave_logits_unchanged() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let cfg = config(4, 16, 4, 17, 32);
        let g = r.random_range(1..5);
        let alpha = [1.0, 100.0][seed as usize % 2];
        let turbo = Model::new(cfg.clone(), spec(&random_pairs(&mut r, 4), alpha, g, 4), seed).unwrap();
        let base = Model::new(cfg, ConnectionSpec::none(), seed).unwrap();
        let toks = random_tokens(&mut r, 20, 17);
        let a = turbo.forward_grouped(&toks).unwrap();
        let b = base.forward_grouped(&toks).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
        let c = turbo.without_connections().unwrap().forward_grouped(&toks).unwrap();
        assert_eq!(b.data(), c.data());
    }
}

#[test]
fn earlier_logits_ignore_later_tokens() {
    let m = connected(3, 3, 2.0);
    let toks = random_tokens(&mut rng(5), 12, 13);
    let base = m.forward_grouped(&toks).unwrap();
    for j in 0..toks.len() {
        let mut changed = toks.clone();
        changed[j] = (changed[j] + 1) % 13;
        let out = m.forward_grouped(&changed).unwrap();
        let v = 13;
        let diff = base.data()[..j * v]
            .iter()
            .zip(&out.data()[..j * v])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff <= 1e-6, "position {j}: {diff}");
    }
}

#[test]
fn batched_rows_match_single_rows() {
    let m = connected(2, 2, 1.0);
    let rows: Vec<Vec<usize>> = (0..3).map(|i| random_tokens(&mut rng(i), 7, 13)).collect();
    let flat: Vec<usize> = rows.concat();
    let batch = m.forward_batch(&flat, 7).unwrap();
    for (i, r) in rows.iter().enumerate() {
        let one = m.forward_grouped(r).unwrap();
        let part = &batch.data()[i * 7 * 13..(i + 1) * 7 * 13];
        let diff = one
            .data()
            .iter()
            .zip(part)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff <= 1e-6);
    }
}

#[test]
fn empty_and_overlong_inputs_are_rejected() {
    let m = connected(0, 1, 1.0);
    assert!(matches!(m.forward_grouped(&[]), Err(Error::Parameter(_))));
    assert!(matches!(m.forward_grouped(&[1; 25]), Err(Error::Parameter(_))));
    let opts = GenerateOptions {
        max_new: 3,
        temperature: 1.0,
        eos: None,
    };
    assert!(matches!(
        m.generate(&[1; 25], &opts, &mut rng(0)),
        Err(Error::Parameter(_))
    ));
    assert!(matches!(m.generate(&[], &opts, &mut rng(0)), Err(Error::Parameter(_))));
}

#[test]
fn soft_token_matches_reference_and_degenerates_at_zero() {
    let m = connected(6, 1, 1.0);
    let toks = random_tokens(&mut rng(2), 9, 13);
    for lambda in [0.1, 0.5, 1.0] {
        let got = m.forward_soft_token(&toks, lambda).unwrap();
        let err = max_diff(got.data(), &reference_logits(&m, &toks, Some(f64::from(lambda))));
        assert!(err <= 1e-5, "lambda={lambda}: {err}");
    }
    let zero = m.forward_soft_token(&toks, 0.0).unwrap();
    let base = m.forward_grouped(&toks).unwrap();
    assert!(zero.max_abs_diff(&base).unwrap() <= 1e-6);
    for bad in [-0.1, 1.5, f32::NAN] {
        assert!(matches!(m.forward_soft_token(&toks, bad), Err(Error::Parameter(_))));
    }
}

#[test]
fn soft_token_first_position_is_the_plain_embedding() {
    let m = connected(6, 1, 1.0);
    let toks = [3, 4, 5];
    let soft = m.forward_soft_token(&toks, 1.0).unwrap();
    let base = m.forward_grouped(&toks).unwrap();
    assert_eq!(&soft.data()[..13], &base.data()[..13]);
}

#[test]
fn soft_token_blend_closed_forms() {
    let m = Model::new(config(2, 8, 2, 10, 8), ConnectionSpec::none(), 3).unwrap();
    let emb = m.params().by_name("tok_emb").unwrap().clone();
    let e: Vec<f32> = (0..8).map(|i| i as f32 * 0.1 - 0.3).collect();
    let d = 8;

    // Previous distribution one-hot on token 6.
    let mut onehot = vec![0.0; 10];
    onehot[6] = 200.0;
    // Previous distribution uniform.
    let uniform = vec![0.5; 10];
    let mean: Vec<f64> = (0..d)
        .map(|c| (0..10).map(|j| f64::from(emb.data()[j * d + c])).sum::<f64>() / 10.0)
        .collect();

    for (logits, mix) in [
        (
            onehot,
            (0..d).map(|c| f64::from(emb.data()[6 * d + c])).collect::<Vec<_>>(),
        ),
        (uniform, mean),
    ] {
        let mut fw = Forward::new(&m, 1, false).unwrap();
        let tape = fw.tape_mut();
        let ev = tape.constant(Tensor::new([1, 1, d], e.clone()).unwrap());
        let pv = tape.constant(Tensor::new([1, 1, 10], logits).unwrap());
        let h0 = fw.soft_token_input(ev, pv, 0.1).unwrap();
        for (c, &got) in fw.tape().value(h0).data().iter().enumerate() {
            let want = 0.9 * f64::from(e[c]) + 0.1 * mix[c];
            assert!((f64::from(got) - want).abs() <= 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn generation_is_deterministic_and_matches_zero_init_baseline() {
    let cfg = config(3, 16, 2, 12, 40);
    let turbo = Model::new(cfg.clone(), spec(&[(2, 0), (2, 1)], 100.0, 3, 4), 8).unwrap();
    let base = Model::new(cfg, ConnectionSpec::none(), 8).unwrap();
    let opts = GenerateOptions {
        max_new: 20,
        temperature: 1.0,
        eos: None,
    };
    let prompt = [1, 2, 3, 4, 5];
    let a = turbo.generate(&prompt, &opts, &mut rng(3)).unwrap();
    let b = turbo.generate(&prompt, &opts, &mut rng(3)).unwrap();
    let c = base.generate(&prompt, &opts, &mut rng(3)).unwrap();
    assert_eq!(a.len(), 20);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn generation_stops_at_eos_and_context_end() {
    let cfg = config(2, 8, 2, 4, 10);
    let mut m = Model::new(cfg, ConnectionSpec::none(), 1).unwrap();
    // Blocks reduce to the residual path and every hidden state points along
    // the first axis, which the head maps onto token 3.
    for p in m.params_mut().iter_mut() {
        let t = p.tensor.data_mut();
        match p.name.as_str() {
            "tok_emb" | "pos_emb" => t.chunks_exact_mut(8).for_each(|row| {
                row.fill(0.0);
                row[0] = 1.0;
            }),
            "lm_head" => {
                t.fill(0.0);
                t[..4].copy_from_slice(&[-100.0, -100.0, -100.0, 100.0]);
            }
            n if n.ends_with("norm") => {}
            _ => t.fill(0.0),
        }
    }
    let opts = GenerateOptions {
        max_new: 50,
        temperature: 1.0,
        eos: None,
    };
    let toks = [0, 1];
    assert_eq!(m.generate(&toks, &opts, &mut rng(0)).unwrap(), vec![3; 8]);
    let short = GenerateOptions { max_new: 3, ..opts };
    assert_eq!(m.generate(&toks, &short, &mut rng(0)).unwrap(), vec![3; 3]);
    let stop = GenerateOptions { eos: Some(3), ..opts };
    assert!(m.generate(&toks, &stop, &mut rng(0)).unwrap().is_empty());
}

#[test]
fn uniform_model_samples_uniformly() {
    let cfg = config(2, 8, 2, 10, 8);
    let mut m = Model::new(cfg, ConnectionSpec::none(), 1).unwrap();
    m.params_mut().by_name_mut("lm_head").unwrap().data_mut().fill(0.0);
    let opts = GenerateOptions {
        max_new: 1,
        temperature: 1.0,
        eos: None,
    };
    let n = 10_000;
    let mut counts = [0usize; 10];
    let mut r = rng(77);
    for _ in 0..n {
        counts[m.generate(&[1, 2], &opts, &mut r).unwrap()[0]] += 1;
    }
    let (p, nf) = (0.1, n as f64);
    let sigma = (nf * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - nf * p).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn fresh_lora_is_identity_and_freezes_base() {
    let mut m = connected(2, 2, 1.0);
    let toks = random_tokens(&mut rng(1), 8, 13);
    let before = m.forward_grouped(&toks).unwrap();
    let total = m.params().total_count();
    let conn: usize = m
        .params()
        .iter()
        .filter(|(_, p)| p.name.starts_with("conn."))
        .map(|(_, p)| p.tensor.numel())
        .sum();
    let handles = m.attach_lora_named(2, &["q", "v_proj", "down"]).unwrap();
    assert_eq!(handles.len(), 9);
    let after = m.forward_grouped(&toks).unwrap();
    assert_eq!(before.data(), after.data());
    let d = 8;
    let inter = m.config().d_inter;
    let per_layer = 2 * (d + d) + 2 * (d + d) + 2 * (inter + d);
    assert_eq!(m.trainable_params(), 3 * per_layer + conn);
    assert_eq!(m.params().total_count(), total + 3 * per_layer);
    assert!(matches!(m.attach_lora(2, &[Target::Q]), Err(Error::State(_))));
    assert!(matches!(
        connected(2, 2, 1.0).attach_lora_named(2, &["qkv"]),
        Err(Error::Parameter(_))
    ));
    assert!(matches!(
        connected(2, 2, 1.0).attach_lora(0, &[Target::Q]),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for g in [1, 2, 4] {
        for alpha in [1.0f32, 100.0] {
            let mut r = rng(g as u64 * 10 + alpha as u64);
            let cfg = config(3, 16, 2, 11, 12);
            let mut m = Model::new(cfg, spec(&[(2, 0), (2, 1), (1, 0)], alpha, g, 4), 1).unwrap();
            m.attach_lora(2, &Target::ALL).unwrap();
            randomize(&mut m, &mut r, 0.5);
            damp_connections(&mut m, 1.0 / alpha);
            let toks = random_tokens(&mut r, 9, 11);
            for (name, rel) in model_gradcheck(&m, &toks, &mut r, 20, 1e-4) {
                assert!(rel <= 1e-3, "g={g} alpha={alpha} {name}: {rel}");
            }
        }
    }
}

#[test]
fn base_gradients_match_finite_differences() {
    let mut r = rng(5);
    let mut m = Model::new(config(3, 16, 2, 11, 12), spec(&[(2, 0)], 1.0, 2, 4), 2).unwrap();
    randomize(&mut m, &mut r, 0.5);
    let toks = random_tokens(&mut r, 9, 11);
    for (name, rel) in model_gradcheck(&m, &toks, &mut r, 20, 1e-4) {
        assert!(rel <= 1e-3, "{name}: {rel}");
    }
}

#[test]
fn checkpoint_round_trip_keeps_logits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let mut m = connected(3, 2, 1.0);
    m.set_feedback(Feedback::SoftToken { lambda: 0.2 }).unwrap();
    write_checkpoint(&path, &m, None, &[]).unwrap();
    let back = read_checkpoint(&path).unwrap().model;
    let toks = random_tokens(&mut rng(0), 6, 13);
    assert_eq!(back.feedback(), m.feedback());
    assert_eq!(
        back.forward_grouped(&toks).unwrap().data(),
        m.forward_grouped(&toks).unwrap().data()
    );
}
