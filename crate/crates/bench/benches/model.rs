use criterion::{criterion_group, criterion_main, Criterion};
use milood::{EmbedderConfig, MilModel, ModelConfig, Tape, Var};
use milood_bench::bag;

fn model(c: &mut Criterion) {
    let m = MilModel::<f32>::init(ModelConfig::new(EmbedderConfig::conv28(), 128), 0).unwrap();
    let instances = bag(10);
    c.bench_function("conv28 bag of 10 forward", |b| b.iter(|| m.forward(&instances).unwrap()));
    c.bench_function("conv28 bag of 10 training step", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let params = m.register_params(&mut t, |_| true);
            let inputs: Vec<Var> = instances.iter().map(|x| t.constant(x.clone())).collect();
            let f = m.forward_vars(&mut t, &params, &inputs).unwrap();
            let loss = MilModel::cross_entropy(&mut t, f.logits, 1).unwrap();
            t.backward(loss).unwrap();
        })
    });
}

criterion_group!(benches, model);
criterion_main!(benches);
