use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reasonrec::grpo::{self, CategoricalPolicy, GroupSample, GrpoConfig, KlMode, ReferencePolicy};
use reasonrec::ndkernel::gradcheck::gradient_check;
use reasonrec::ndkernel::{ParamStore, Tape};
use reasonrec::textgen::{PromptContext, SurrogatePolicy, Template};

const REWARDS_32: [f64; 32] = [
    -1.612891, -0.931916, -0.484358, 2.501068, 0.481262, 1.601203, -1.498823, 0.544635, 2.215365, 0.613997, 2.723504,
    2.409001, -0.145197, -1.99627, 1.776336, -1.367954, -1.952946, 1.653421, 2.21421, 2.182888, 2.76718, -0.991649,
    -1.592496, -1.39625, 2.888728, -1.440373, -1.202288, -1.899502, -1.753339, -1.808667, -0.234838, -1.183658,
];

/// Standardised `REWARDS_32` (population std), evaluated at 40 digits.
const ADVANTAGES_32: [f64; 32] = [
    -0.99112349433210523763, -0.59622457394015736941, -0.33668469213424760179, 1.3945704997744881909,
    0.22328049823085053032, 0.87273678047715691085, -0.92497520687475554133, 0.26003064218914402458,
    1.2288906932430579889, 0.30025382059690684705, 1.523561631983898692, 1.3411806412573246175,
    -0.1400044722450395825, -1.2134458309831490818, 0.97429679754827259939, -0.84908398206800958801,
    -1.1883221468140375146, 0.90301811507097714475, 1.2282209061685652399, 1.2100572085518882824,
    1.5488894417376175732, -0.63086387378489795755, -0.97929638837168998483, -0.86549289553973844278,
    1.6193753978678726919, -0.89107992158981945279, -0.75301389939881844951, -1.15732985208746567,
    -1.0725696025904235227, -1.1046544331164276956, -0.19198748795465388384, -0.74221032087258475696,
];

fn policy(logits: Vec<f64>) -> SurrogatePolicy {
    let vocab = (0..logits.len()).map(|k| Template::Mention(format!("t{k}"))).collect();
    SurrogatePolicy::new(vocab, 1.0).unwrap().with_logits(logits).unwrap()
}

fn group_for(p: &SurrogatePolicy, reference: &ReferencePolicy, actions: Vec<usize>, rewards: Vec<f64>) -> GroupSample {
    let f = p.features(&PromptContext::default());
    let lp = p.log_probs(&f);
    let rl = p.log_probs_with(reference.params(), &f);
    GroupSample {
        old_logprobs: actions.iter().map(|&a| lp[a]).collect(),
        ref_logprobs: actions.iter().map(|&a| rl[a]).collect(),
        outputs: vec![String::new(); actions.len()],
        advantages: grpo::compute_advantages(&rewards, 1e-8),
        actions,
        rewards,
    }
}

#[test]
fn advantages_match_extended_precision() {
    for (a, b) in grpo::compute_advantages(&REWARDS_32, 1e-8).iter().zip(ADVANTAGES_32) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn ratio_one_objective_is_mean_advantage_minus_kl() {
    let p = policy(vec![0.3, -0.2, 0.5, 0.0]);
    let reference = ReferencePolicy::from_params(policy(vec![0.0, 0.1, -0.4, 0.2]).params().clone());
    let g = group_for(&p, &reference, vec![0, 2, 2, 3, 1], vec![1.0, 0.5, 0.25, 0.0, 2.0]);
    let f = p.features(&PromptContext::default());
    for eps in [0.2, 0.9] {
        let cfg = GrpoConfig { beta: 0.04, epsilon: eps, kl: KlMode::Exact, ..Default::default() };
        let mut tape = Tape::new();
        let vars = p.params().bind_all(&mut tape, true);
        let obj = grpo::surrogate_objective(&mut tape, &p, &vars, &f, &g, &reference, &cfg).unwrap();
        let mean_adv = g.advantages.iter().sum::<f64>() / 5.0;
        let want = mean_adv - cfg.beta * obj.kl;
        assert!((tape.value(obj.value).item() - want).abs() < 1e-14);
    }
    // With beta = 0 the gradient of J w.r.t. the chosen log-probabilities is A_n / G.
    let cfg = GrpoConfig { beta: 0.0, ..Default::default() };
    let (grads, ..) = grpo::objective_gradient(&p, &f, &g, &reference, &cfg).unwrap();
    let lp = p.log_probs(&f);
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let logits_grad = grads.get(p.params().id(reasonrec::textgen::surrogate::LOGITS).unwrap()).unwrap();
    for k in 0..4 {
        let want: f64 = g
            .actions
            .iter()
            .zip(&g.advantages)
            .map(|(&a, &adv)| adv / 5.0 * (f64::from(u8::from(a == k)) - probs[k]))
            .sum();
        assert!((logits_grad[k] - want).abs() < 1e-14, "{k}: {} vs {want}", logits_grad[k]);
    }
}

#[test]
fn positive_advantage_above_the_clip_is_capped() {
    let p = policy(vec![0.0, 0.0]);
    let reference = ReferencePolicy::snapshot(&p);
    let eps: f64 = 0.2;
    let mut g = group_for(&p, &reference, vec![0, 1], vec![1.0, 0.0]);
    // delta_0 = 1 + 2 eps for the first sample.
    g.old_logprobs[0] -= (1.0 + 2.0 * eps).ln();
    let cfg = GrpoConfig { beta: 0.0, epsilon: eps, ..Default::default() };
    let f = p.features(&PromptContext::default());
    let mut tape = Tape::new();
    let vars = p.params().bind_all(&mut tape, true);
    let obj = grpo::surrogate_objective(&mut tape, &p, &vars, &f, &g, &reference, &cfg).unwrap();
    let want = ((1.0 + eps) * g.advantages[0] + g.advantages[1]) / 2.0;
    assert!((tape.value(obj.value).item() - want).abs() < 1e-14);
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let p = policy(vec![0.4, -0.7, 0.1]).with_weights([0.3, -0.2, 0.5]).unwrap();
    let reference = ReferencePolicy::from_params(policy(vec![0.1, 0.2, -0.3]).params().clone());
    let mut g = group_for(&p, &reference, vec![0, 1, 2, 0], vec![0.5, 1.5, -1.0, 2.0]);
    for (k, o) in g.old_logprobs.iter_mut().enumerate() {
        *o += 0.03 * k as f64;
    }
    for kl in [KlMode::Exact, KlMode::Estimator] {
        let cfg = GrpoConfig { beta: 0.1, epsilon: 0.2, kl, ..Default::default() };
        let f = p.features(&PromptContext::default());
        let inputs: Vec<_> = p.params().ids().map(|id| p.params().get(id).clone()).collect();
        let r = gradient_check(&inputs, 1e-5, |tape, vars| {
            grpo::surrogate_objective(tape, &p, vars, &f, &g, &reference, &cfg).map(|o| o.value).map_err(|e| match e {
                reasonrec::Error::Kernel(k) => k,
                e => panic!("{e}"),
            })
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{kl:?}: {}", r.max_rel_err);
    }
}

#[test]
fn zero_advantages_without_kl_leave_parameters() {
    let mut p = policy(vec![0.2, -0.1, 0.0]);
    let reference = ReferencePolicy::from_params(policy(vec![1.0, 0.0, 0.0]).params().clone());
    let before = p.params().clone();
    let g = group_for(&p, &reference, vec![0, 1, 2], vec![0.5, 0.5, 0.5]);
    let cfg = GrpoConfig { beta: 0.0, ..Default::default() };
    let f = p.features(&PromptContext::default());
    let stats = grpo::step(&mut p, &f, &g, &reference, &cfg).unwrap();
    assert!(stats.skipped);
    assert_eq!(p.params(), &before);
}

#[test]
fn rewarded_template_gains_logit() {
    let mut p = policy(vec![0.0; 4]);
    let reference = ReferencePolicy::snapshot(&p);
    let g = group_for(&p, &reference, vec![0, 1, 2, 3], vec![0.0, 0.0, 1.0, 0.0]);
    let f = p.features(&PromptContext::default());
    grpo::step(&mut p, &f, &g, &reference, &GrpoConfig::default()).unwrap();
    let l = p.logits_param();
    assert!(l[2] > 0.0 && l.iter().enumerate().all(|(k, &x)| k == 2 || x < l[2]), "{l:?}");
}

#[test]
fn one_template_vocabulary_is_degenerate() {
    let p = policy(vec![0.7]);
    let f = p.features(&PromptContext::default());
    let lp = p.log_probs(&f);
    assert_eq!(lp, vec![0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!((0..50).all(|_| p.sample_action(&lp, &mut rng) == 0));
}

#[test]
fn even_logits_split_draws_evenly() {
    let p = policy(vec![0.0, 0.0]);
    let lp = p.log_probs(&p.features(&PromptContext::default()));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000;
    let zeros = (0..n).filter(|_| p.sample_action(&lp, &mut rng) == 0).count() as f64;
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((zeros - n as f64 / 2.0).abs() < 3.0 * sigma, "{zeros}");
}

#[test]
fn low_temperature_concentrates_on_argmax() {
    let mut p = policy(vec![1.0, 0.0]);
    let mut last = 0.0;
    for t in [1.0, 0.3, 0.1, 0.03, 0.01] {
        p.set_temperature(t);
        // Log-probability of the losing template: -ln(1 + e^{1/t}).
        let lp = p.log_probs(&p.features(&PromptContext::default()))[1];
        assert!(lp < last, "{t}: {lp}");
        last = lp;
    }
    assert!(last < -99.0);
    let lp = p.log_probs(&p.features(&PromptContext::default()));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!((0..1000).all(|_| p.sample_action(&lp, &mut rng) == 0));
}

fn surrogate_params(p: &SurrogatePolicy) -> &ParamStore {
    CategoricalPolicy::params(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn advantages_are_standardised(rewards in prop::collection::vec(-5.0f64..5.0, 2..24)) {
        let a = grpo::compute_advantages(&rewards, 1e-8);
        if a.iter().any(|&x| x != 0.0) {
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn estimator_kl_is_nonnegative(lp in -30.0f64..0.0, rl in -30.0f64..0.0) {
        prop_assert!(grpo::kl_estimator(lp, rl) >= 0.0);
    }

    #[test]
    fn exact_kl_is_zero_only_against_itself(l in prop::collection::vec(-3.0f64..3.0, 2..8)) {
        let p = policy(l);
        let f = p.features(&PromptContext::default());
        let lp = p.log_probs(&f);
        prop_assert_eq!(grpo::kl_categorical(&lp, &lp).unwrap(), 0.0);
        let uniform = p.log_probs_with(surrogate_params(&policy(vec![0.0; lp.len()])), &f);
        prop_assert!(grpo::kl_categorical(&lp, &uniform).unwrap() >= -1e-15);
    }
}
