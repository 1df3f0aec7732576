use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use tsim_bench::{agent, frames, playpen};
use tsim_core::agent::encode_batch;
use tsim_core::autodiff::nn::Module;
use tsim_core::render::BBox;
use tsim_core::sac::{Sac, SacConfig};
use tsim_core::transfer::iou;
use tsim_core::Graph;

fn render(c: &mut Criterion) {
    let p = playpen();
    let state = p.reset_state(3);
    c.bench_function("render_stereo_84", |b| b.iter(|| black_box(p.observe(&state))));
}

fn encoder(c: &mut Criterion) {
    let net = agent(0);
    let one = frames(1);
    let batch = frames(32);
    c.bench_function("encoder_forward_b1", |b| {
        b.iter_batched(|| one.clone(), |x| encode_batch(&net.encoder, x).unwrap(), BatchSize::SmallInput)
    });
    let mut g = c.benchmark_group("encoder_b32");
    g.sample_size(10);
    g.bench_function("forward", |b| {
        b.iter_batched(|| batch.clone(), |x| encode_batch(&net.encoder, x).unwrap(), BatchSize::LargeInput)
    });
    g.bench_function("forward_backward", |b| {
        b.iter_batched(
            || batch.clone(),
            |x| {
                let mut gr = Graph::new();
                let mut binds = Vec::new();
                let xv = gr.input(x);
                let f = net.encoder.forward(&mut gr, xv, &mut binds).unwrap();
                let loss = gr.mean(f);
                let grads = gr.backward(loss).unwrap();
                black_box((grads, binds.len(), net.encoder.num_params()))
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn action_probs(c: &mut Criterion) {
    let net = agent(0);
    let obs = frames(1).row(0);
    c.bench_function("policy_step_b1", |b| b.iter(|| net.action_probs(&obs, 1).unwrap()));
}

fn sac_update(c: &mut Criterion) {
    use tsim_core::env::PlaypenEnv;
    use tsim_core::sac::Transition;
    use tsim_core::sac::{Batch, Environment};
    let mut env = PlaypenEnv::new(playpen());
    let mut items = Vec::new();
    let (mut key, intention) = env.reset(1).unwrap();
    for i in 0..32 {
        let s = env.step(i % 6).unwrap();
        items.push(Transition {
            obs: key.clone(),
            intention,
            action: i % 6,
            reward: s.reward as f32,
            next_obs: s.next.clone(),
            done: s.terminal,
        });
        key = s.next;
    }
    let refs: Vec<_> = items.iter().collect();
    let batch = Batch::from_transitions(&env, &refs).unwrap();
    let mut sac = Sac::new(agent(0), SacConfig::default()).unwrap();
    let mut g = c.benchmark_group("sac");
    g.sample_size(10);
    g.bench_function("update_b32", |b| b.iter(|| sac.update(&batch).unwrap()));
    g.bench_function("batch_from_replay_b32", |b| {
        b.iter(|| Batch::from_transitions(&env, &refs).unwrap())
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let a = BBox { cx: 0.4, cy: 0.5, w: 0.3, h: 0.2 };
    let b2 = BBox { cx: 0.5, cy: 0.45, w: 0.2, h: 0.3 };
    c.bench_function("iou", |b| b.iter(|| iou(black_box(a), black_box(b2)).unwrap()));
}

criterion_group!(benches, render, encoder, action_probs, sac_update, metrics);
criterion_main!(benches);
