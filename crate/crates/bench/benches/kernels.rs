use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reasonrec::grpo::{self, GrpoConfig, ReferencePolicy};
use reasonrec::ndkernel::Tape;
use reasonrec::textgen::{PromptContext, SurrogatePolicy};
use reasonrec_bench::workload;

fn score_all(c: &mut Criterion) {
    let w = workload(64, 3000, 4, 50, 8);
    let history = &w.examples[0].inputs;
    let pattern = &w.features.patterns[0];
    c.bench_function("score_all d64 3000 items", |b| {
        b.iter(|| w.model.score_all(black_box(history), pattern, Some(&w.bank)).unwrap())
    });
}

fn sequence_loss(c: &mut Criterion) {
    let w = workload(64, 3000, 4, 50, 8);
    let ex = &w.examples[0];
    let negatives: Vec<usize> = (0..3000).filter(|i| !ex.targets.contains(i)).take(100).collect();
    c.bench_function("sequence_loss+backward d64 L50 100 negatives", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let vars = w.model.params().bind_all(&mut tape, true);
            let loss = w
                .model
                .sequence_loss(&mut tape, &vars, ex, &w.features.patterns[0], Some(&w.bank), Some(&negatives))
                .unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.value(loss).item())
        })
    });
}

fn grpo_step(c: &mut Criterion) {
    let tags: Vec<String> = (0..18).map(|k| format!("g{k:02}")).collect();
    let policy = SurrogatePolicy::from_tags(tags, 1.0).unwrap();
    let reference = ReferencePolicy::snapshot(&policy);
    let f = policy.features(&PromptContext::default());
    let cfg = GrpoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let group = grpo::sample_group(&policy, &f, &reference, &cfg, &mut rng, |a| {
        Ok(a.iter().map(|&k| (String::new(), (k % 3) as f64)).collect())
    })
    .unwrap();
    c.bench_function("grpo step G8 19 templates", |b| {
        b.iter_batched(
            || policy.clone(),
            |mut p| grpo::step(&mut p, &f, &group, &reference, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, score_all, sequence_loss, grpo_step);
criterion_main!(benches);
