use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reasonrec::ndkernel::gradcheck::gradient_check;
use reasonrec::ndkernel::{AdamConfig, Tape, Tensor};
use reasonrec::reward_model::{self, RewardModel, RewardModelConfig, TextFeatures, TrainConfig, UserExample};

/// `-ln(e^10 / (e^10 + 2))`, evaluated with 40 significant digits.
const NLL_TARGET_10: f64 = 9.079573746724444627521709619970336640955e-5;

fn model(dim: usize, use_match: bool, n_items: usize, seed: u64) -> RewardModel {
    let cfg = RewardModelConfig { dim, layers: 1, heads: 2, match_heads: 2, max_seq_len: 8, use_match, init_seed: seed, ..Default::default() };
    RewardModel::new(cfg, n_items).unwrap()
}

fn param(m: &RewardModel, name: &str) -> Tensor {
    m.params().get(m.params().id(name).unwrap()).clone()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|c| x.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Multi-head attention of one query over the reason rows, written out loop by loop.
fn match_oracle(m: &RewardModel, pattern: &[f64], reasons: &[Vec<f64>]) -> Vec<f64> {
    let (wq, wk, wv, wo) = (param(m, "match.wq"), param(m, "match.wk"), param(m, "match.wv"), param(m, "match.wo"));
    let d = pattern.len();
    let heads = m.config().match_heads;
    let dh = d / heads;
    let q = vec_mat(pattern, &wq);
    let ks: Vec<Vec<f64>> = reasons.iter().map(|r| vec_mat(r, &wk)).collect();
    let vs: Vec<Vec<f64>> = reasons.iter().map(|r| vec_mat(r, &wv)).collect();
    let mut cat = vec![0.0; d];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let logits: Vec<f64> =
            ks.iter().map(|k| cols.clone().map(|c| q[c] * k[c]).sum::<f64>() / (dh as f64).sqrt()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (k, l) in logits.iter().enumerate() {
            let w = (l - max).exp() / z;
            for c in cols.clone() {
                cat[c] += w * vs[k][c];
            }
        }
    }
    vec_mat(&cat, &wo)
}

fn din_oracle(m: &RewardModel, e_u: &[f64], e_i: &[f64], s: Option<&[f64]>) -> f64 {
    let mut x: Vec<f64> = e_u.iter().chain(e_i).copied().collect();
    if let Some(s) = s {
        x.extend_from_slice(s);
    }
    let layer = |x: &[f64], w: &str, b: &str| -> Vec<f64> {
        let b = param(m, b);
        vec_mat(x, &param(m, w)).iter().zip(b.data()).map(|(v, b)| v + b).collect()
    };
    let h: Vec<f64> = layer(&x, "din.w1", "din.b1").into_iter().map(gelu).collect();
    let h: Vec<f64> = layer(&h, "din.w2", "din.b2").into_iter().map(gelu).collect();
    layer(&h, "din.w3", "din.b3")[0]
}

#[test]
fn matcher_matches_straight_line_oracle() {
    for seed in 0..10 {
        let m = model(8, true, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let p = rand_vec(&mut rng, 8);
        let n = rng.gen_range(1..7);
        let reasons: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, 8)).collect();
        let got = m.match_reasons(&p, &reasons).unwrap().s_ui;
        for (a, b) in got.iter().zip(match_oracle(&m, &p, &reasons)) {
            assert!((a - b).abs() < 1e-10, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn single_reason_yields_its_projected_value() {
    let m = model(8, true, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = rand_vec(&mut rng, 8);
    let want = vec_mat(&vec_mat(&r, &param(&m, "match.wv")), &param(&m, "match.wo"));
    for _ in 0..3 {
        let p = rand_vec(&mut rng, 8);
        let got = m.match_reasons(&p, &[r.clone()]).unwrap();
        assert!(got.s_ui.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(got.attention_weights.iter().all(|w| w == &[1.0]));
    }
}

#[test]
fn duplicated_reasons_get_equal_weights() {
    let m = model(8, true, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
    let out = m.match_reasons(&rand_vec(&mut rng, 8), &[a.clone(), b, a]).unwrap();
    for w in &out.attention_weights {
        assert_eq!(w[0].to_bits(), w[2].to_bits());
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn din_matches_straight_line_oracle() {
    for (seed, use_match) in [(0, true), (1, true), (2, false), (3, false)] {
        let m = model(8, use_match, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (u, i, s) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
        let s = use_match.then_some(s.as_slice());
        let got = m.din_score(&u, &i, s).unwrap();
        let want = din_oracle(&m, &u, &i, s);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn zero_din_weights_return_the_bias() {
    let mut m = model(8, true, 4, 5);
    for name in ["din.w1", "din.b1", "din.w2", "din.b2", "din.w3"] {
        let id = m.params().id(name).unwrap();
        m.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let id = m.params().id("din.b3").unwrap();
    m.params_mut().get_mut(id).data_mut()[0] = 0.625;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let y = m.din_score(&rand_vec(&mut rng, 8), &rand_vec(&mut rng, 8), Some(&rand_vec(&mut rng, 8))).unwrap();
        assert_eq!(y, 0.625);
    }
}

#[test]
fn swapping_user_and_item_changes_the_score() {
    let m = model(8, false, 4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (u, i) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
    assert_ne!(m.din_score(&u, &i, None).unwrap(), m.din_score(&i, &u, None).unwrap());
}

#[test]
fn single_item_history_depends_only_on_that_item_and_first_position() {
    let mut m = model(8, false, 5, 9);
    let base = m.encode_user_sequence(&[2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let item = m.item_table_id();
    for r in [0, 1, 3, 4] {
        m.params_mut().get_mut(item).data_mut()[r * 8..(r + 1) * 8].copy_from_slice(&rand_vec(&mut rng, 8));
    }
    let pos = m.params().id("pos_emb").unwrap();
    m.params_mut().get_mut(pos).data_mut()[8..].iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    assert_eq!(m.encode_user_sequence(&[2]).unwrap(), base);
    m.params_mut().get_mut(item).data_mut()[16] += 0.5;
    assert_ne!(m.encode_user_sequence(&[2]).unwrap(), base);
}

#[test]
fn appending_an_item_changes_the_user_vector() {
    let m = model(8, false, 5, 11);
    assert_ne!(m.encode_user_sequence(&[1, 3]).unwrap(), m.encode_user_sequence(&[1, 3, 4]).unwrap());
}

#[test]
fn user_vector_norm_gradient_matches_finite_differences() {
    let m = model(8, false, 6, 12);
    let table = m.params().get(m.item_table_id()).clone();
    let others: Vec<Tensor> = m.params().ids().filter(|&id| id != m.item_table_id()).map(|id| m.params().get(id).clone()).collect();
    let r = gradient_check(&[table], 1e-5, |tape, v| {
        let mut vars = Vec::new();
        let mut k = 0;
        for id in m.params().ids() {
            if id == m.item_table_id() {
                vars.push(v[0]);
            } else {
                vars.push(tape.constant(others[k].clone()));
                k += 1;
            }
        }
        let h = m.sequence_states(tape, &vars, &[0, 3, 5, 1]).map_err(kernel)?;
        let e = m.user_row(tape, h).map_err(kernel)?;
        let sq = tape.mul(e, e)?;
        tape.sum(sq)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
}

fn kernel(e: reasonrec::Error) -> reasonrec::ndkernel::KernelError {
    match e {
        reasonrec::Error::Kernel(k) => k,
        e => panic!("{e}"),
    }
}

#[test]
fn nll_reference_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
    let l = tape.nll_rows(x, Arc::new(vec![1]), None, 0.0).unwrap();
    assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-15);
    let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 10.0, 0.0]).unwrap());
    let l = tape.nll_rows(x, Arc::new(vec![1]), None, 0.0).unwrap();
    let got = tape.value(l).item();
    assert!(((got - NLL_TARGET_10) / NLL_TARGET_10).abs() < 1e-9, "{got}");
}

#[test]
fn nll_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let x = Tensor::new(vec![3, 5], rand_vec(&mut rng, 15)).unwrap();
        let targets = Arc::new((0..3).map(|_| rng.gen_range(0..5)).collect::<Vec<_>>());
        let r = gradient_check(&[x], 1e-5, |tape, v| tape.nll_rows(v[0], Arc::clone(&targets), None, 0.0)).unwrap();
        assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
    }
}

fn two_item_setup() -> (RewardModel, Vec<UserExample>, TextFeatures) {
    let m = model(8, false, 2, 14);
    let ex = vec![UserExample { user: 0, inputs: vec![0, 1, 0, 1], targets: vec![1, 0, 1, 0] }];
    let features = TextFeatures { patterns: vec![vec![0.0; 8]], reasons: vec![vec![], vec![]], missing_patterns: 1 };
    (m, ex, features)
}

#[test]
fn separable_two_item_sequence_is_learned() {
    let (mut m, ex, f) = two_item_setup();
    let cfg = TrainConfig { epochs: 200, batch_users: 1, adam: AdamConfig { lr: 1e-2, ..Default::default() }, ..Default::default() };
    let report = reward_model::train(&mut m, &ex, &f, &cfg).unwrap();
    assert_eq!(report.step_losses.len(), 200);
    let last = *report.step_losses.last().unwrap();
    assert!(last < 0.01, "loss after 200 steps: {last}");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (mut m, ex, f) = two_item_setup();
    let before = m.params().clone();
    let cfg = TrainConfig { epochs: 25, batch_users: 1, adam: AdamConfig { lr: 0.0, ..Default::default() }, ..Default::default() };
    reward_model::train(&mut m, &ex, &f, &cfg).unwrap();
    for id in before.ids() {
        let a: Vec<u64> = before.get(id).data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = m.params().get(id).data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b, "{}", before.name(id));
    }
}

#[test]
fn seeded_training_repeats_exactly() {
    let run = || {
        let mut m = model(8, true, 6, 15);
        let ex: Vec<UserExample> = (0..4)
            .map(|u| UserExample { user: u, inputs: vec![u, (u + 1) % 6, (u + 2) % 6], targets: vec![(u + 1) % 6, (u + 2) % 6, (u + 3) % 6] })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let f = TextFeatures {
            patterns: (0..4).map(|_| rand_vec(&mut rng, 8)).collect(),
            reasons: (0..6).map(|k| (0..k % 3).map(|_| rand_vec(&mut rng, 8)).collect()).collect(),
            missing_patterns: 0,
        };
        let cfg = TrainConfig { epochs: 5, batch_users: 2, sampled_negatives: Some(2), ..Default::default() };
        reward_model::train(&mut m, &ex, &f, &cfg).unwrap().step_losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

/// Two genres; every user's pattern names one of them and every next item
/// carries that genre, while histories are drawn from both. The genre can
/// only reach the head through the pattern's attention over mixed reasons.
#[test]
fn planted_match_prefers_the_matching_candidate() {
    use reasonrec::reward_model::{HashingEncoder, TextEncoder};
    use reasonrec::textgen::surrogate::reason_sentence;

    let genres = ["War", "Comedy"];
    let (n_items, users, dim) = (24, 60, 16);
    let enc = HashingEncoder::new(dim);
    let genre_of = |i: usize| i % 2;
    let sentence = |g: usize| enc.encode(&reason_sentence(genres[g])).unwrap();
    // Three reasons naming the item's genre and one naming the other genre.
    let reasons: Vec<Vec<Vec<f64>>> = (0..n_items)
        .map(|i| {
            let g = genre_of(i);
            vec![sentence(g), sentence(g), sentence(1 - g), sentence(g)]
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut patterns = Vec::new();
    let mut examples = Vec::new();
    for u in 0..users {
        let g = u % 2;
        patterns.push(enc.encode(&format!("Core interest: {}.", genres[g])).unwrap());
        let targets: Vec<usize> = (0..8).map(|_| 2 * rng.gen_range(0..n_items / 2) + g).collect();
        let inputs: Vec<usize> = (0..8).map(|_| rng.gen_range(0..n_items)).collect();
        examples.push(UserExample { user: u, inputs, targets });
    }
    let features = TextFeatures { patterns: patterns.clone(), reasons: reasons.clone(), missing_patterns: 0 };
    let cfg = RewardModelConfig { dim, layers: 1, heads: 2, match_heads: 2, max_seq_len: 8, init_seed: 32, ..Default::default() };
    let mut m = RewardModel::new(cfg, n_items).unwrap();
    let tc = TrainConfig { epochs: 200, batch_users: 10, adam: AdamConfig { lr: 1e-2, ..Default::default() }, ..Default::default() };
    reward_model::train(&mut m, &examples, &features, &tc).unwrap();

    let mut wins = 0;
    let mut total = 0;
    for ex in examples.iter().take(20) {
        let g = ex.user % 2;
        for item in (0..n_items).filter(|&i| genre_of(i) == g).take(4) {
            let cands = [Some(sentence(g)), Some(sentence(1 - g))];
            let s = m.score_candidates(&ex.inputs, item, &patterns[ex.user], &reasons[item], &cands).unwrap();
            wins += usize::from(s[0] > s[1]);
            total += 1;
        }
    }
    assert_eq!(wins, total, "matching candidate won {wins} of {total}");
}
