use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use loopcheck::backends::SimulatorBackend;
use loopcheck::eval::{evaluate_pope, EvalRecord, Label, Setting};
use loopcheck::pipeline::{Pipeline, PipelineConfig, RuleHelper, RunInput};
use loopcheck::score::{loop_rate, LoopOutcome};
use loopcheck::simulator::{generate_fixtures, FixtureConfig, HallucinationProfile};

fn bench_loop_rate(c: &mut Criterion) {
    let outcomes: Vec<LoopOutcome> = (0..50).map(|i| LoopOutcome::from_closed(i % 3 != 0)).collect();
    c.bench_function("loop_rate/50", |b| b.iter(|| loop_rate(black_box(&outcomes)).unwrap()));
}

fn bench_pope(c: &mut Criterion) {
    let records: Vec<EvalRecord> = (0..3000)
        .map(|i| EvalRecord {
            image_id: format!("img{}", i / 6),
            question: format!("q{i}"),
            label: if i % 2 == 0 { Label::Yes } else { Label::No },
            setting: Setting::Random,
        })
        .collect();
    let preds: Vec<Label> = (0..3000).map(|i| if i % 5 == 0 { Label::No } else { Label::Yes }).collect();
    c.bench_function("evaluate_pope/3000", |b| b.iter(|| evaluate_pope(black_box(&preds), &records).unwrap()));
}

fn bench_pipeline(c: &mut Criterion) {
    let fx = generate_fixtures(&FixtureConfig::standard(4, 5, 6, 11)).unwrap();
    let cfg = PipelineConfig { helper_mode: loopcheck::pipeline::HelperMode::RuleBased, ..PipelineConfig::default() };
    let scene = fx.scenes[0].clone();
    let record = fx.records.iter().find(|r| r.image_id == scene.image_id && r.label == Label::No).unwrap().clone();
    let mut group = c.benchmark_group("pipeline");
    for (name, instruction) in [("open_ended", "Describe the image in detail."), ("binary", record.question.as_str())] {
        group.bench_function(name, |b| {
            b.iter_batched(
                || {
                    let lvlm = Arc::new(SimulatorBackend::new(scene.clone(), HallucinationProfile::default()));
                    Pipeline::new(cfg.clone(), lvlm, Arc::new(RuleHelper::standard())).unwrap()
                },
                |p| p.run(&RunInput::new(instruction).with_image_id(&scene.image_id)).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bench_loop_rate, bench_pope, bench_pipeline);
criterion_main!(benches);
