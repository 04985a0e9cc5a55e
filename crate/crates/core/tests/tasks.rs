mod common;

use std::collections::HashSet;

use common::{arith_expr, evaluate, xor_fold};
use turboconn::tasks::{gen_arith, gen_parity, generate_excluding, prompts_of, write_jsonl, Sample, Task, Vocab};

#[test]
fn evaluator_reproduces_worked_example() {
    assert_eq!(evaluate("(-(3 + -(1)) * 4 * (8 + 2 + 9))"), -152);
    assert_eq!(evaluate("(-(3 + -(1)) * 4 * (8 + 2 + 9))").rem_euclid(10), 8);
    assert_eq!(evaluate("(5)"), 5);
}

#[test]
fn parity_labels_match_xor_fold_and_are_balanced() {
    let v = Vocab::standard();
    let samples = gen_parity(11, 10_000, 1, 70, &v).unwrap();
    let mut ones = 0;
    for s in &samples {
        let want = xor_fold(&s.prompt);
        assert_eq!(s.completion, want.to_string());
        ones += usize::from(want);
    }
    let n = samples.len() as f64;
    assert!((ones as f64 - n / 2.0).abs() <= 3.0 * (n * 0.25).sqrt(), "{ones}");
}

#[test]
fn arith_labels_match_independent_evaluator() {
    let v = Vocab::standard();
    for s in gen_arith(12, 10_000, 1, 30, &v).unwrap() {
        let want = evaluate(arith_expr(&s.prompt)).rem_euclid(10);
        assert_eq!(s.completion, want.to_string(), "{}", s.prompt);
        assert!((1..=30).contains(&s.length()));
    }
}

#[test]
fn full_prompt_round_trips_byte_for_byte() {
    let v = Vocab::standard();
    let text = "Question: Output the parity of this sequence.\nInput: 1 0 0 1 0 1\nAnswer:";
    let ids = v.encode(text).unwrap();
    assert_eq!(v.decode(&ids).unwrap().as_bytes(), text.as_bytes());
    for s in gen_arith(1, 200, 1, 30, &v).unwrap() {
        assert_eq!(v.decode(&s.ids()).unwrap(), format!("{}{}", s.prompt, s.completion));
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let v = Vocab::standard();
    let write = |name: &str, seed| {
        let p = dir.path().join(name);
        write_jsonl(&p, &gen_arith(seed, 500, 1, 30, &v).unwrap()).unwrap();
        std::fs::read(p).unwrap()
    };
    assert_eq!(write("a", 4), write("b", 4));
    assert_ne!(write("a", 4), write("c", 5));
}

#[test]
fn splits_share_no_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let v = Vocab::standard();
    let train = generate_excluding(Task::Parity, 1, 20_000, 1, 20, &v, &HashSet::new()).unwrap();
    let train_path = dir.path().join("train.jsonl");
    write_jsonl(&train_path, &train).unwrap();
    let seen = prompts_of(&[&train_path], &v).unwrap();
    let val = generate_excluding(Task::Parity, 2, 1_000, 1, 20, &v, &seen).unwrap();
    assert_eq!(val.len(), 1_000);
    assert!(val.iter().all(|s: &Sample| !seen.contains(&s.prompt)));
    let plain = gen_parity(1, 500, 1, 20, &v).unwrap();
    assert_eq!(
        generate_excluding(Task::Parity, 1, 500, 1, 20, &v, &HashSet::new()).unwrap(),
        plain
    );
}
