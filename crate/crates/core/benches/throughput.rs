use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use counsel_arena::backends::{Backend, BackendConfig};
use counsel_arena::battle::JudgeOptions;
use counsel_arena::domain::{ClientProfile, SimulationScript};
use counsel_arena::par::Parallelism;
use counsel_arena::rating::{fit_all_dimensions, FitConfig};
use counsel_arena::simulate::{run_campaign, CampaignConfig};
use counsel_arena::synthcheck::{generate_pool, synthetic_clients};
use counsel_arena::tournament::{round_robin_schedule, run_battles, JudgeContext, TranscriptStore};

const MODES: [(&str, usize); 2] = [("sequential", 1), ("parallel", 0)];

type Clients = Vec<(ClientProfile, SimulationScript)>;

fn fixture() -> (Vec<(String, BackendConfig)>, Clients) {
    let models = generate_pool(6, 25.0, 1).unwrap().into_iter().map(|m| (m.model_id, m.config)).collect();
    (models, synthetic_clients(10, 1))
}

fn campaign_config(workers: usize) -> CampaignConfig {
    CampaignConfig {
        campaign_seed: 1,
        client_backend: BackendConfig::script_replay(1),
        templates: Default::default(),
        options: Default::default(),
        workers,
    }
}

fn bench_campaign(c: &mut Criterion) {
    let (models, clients) = fixture();
    let mut group = c.benchmark_group("campaign");
    group.sample_size(10);
    for (name, workers) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_campaign(&models, &clients, &campaign_config(workers)).unwrap())
        });
    }
    group.finish();
}

fn bench_battles_and_fit(c: &mut Criterion) {
    let (models, clients) = fixture();
    let out = run_campaign(&models, &clients, &campaign_config(0)).unwrap();
    let opts = JudgeOptions::default();
    let store = TranscriptStore::new(out.transcripts, &opts, Parallelism::new(0)).unwrap();
    let judge = Backend::from_config(&BackendConfig::synthetic_judge(0.1, 1)).unwrap();
    let names: Vec<String> = models.iter().map(|(m, _)| m.clone()).collect();
    let cases: Vec<String> = clients.iter().map(|(p, _)| p.id.clone()).collect();
    let battles = round_robin_schedule(&names, &cases).unwrap();
    let mut group = c.benchmark_group("battles");
    group.sample_size(10);
    for (name, workers) in MODES {
        let ctx = JudgeContext {
            judge: &judge,
            judge_id: "bench".into(),
            templates: Default::default(),
            options: opts.clone(),
            seed: 1,
            parallelism: Parallelism::new(workers),
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_battles(&battles, &store, &ctx).unwrap())
        });
    }
    group.finish();

    let ctx = JudgeContext {
        judge: &judge,
        judge_id: "bench".into(),
        templates: Default::default(),
        options: opts,
        seed: 1,
        parallelism: Parallelism::new(0),
    };
    let (records, _) = run_battles(&battles, &store, &ctx).unwrap();
    let mut group = c.benchmark_group("fit_all_dimensions");
    for (name, workers) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fit_all_dimensions(&records, &FitConfig::default(), Parallelism::new(workers)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_campaign, bench_battles_and_fit);
criterion_main!(benches);
