use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hyql_core::casebase::{EpisodeStats, Provenance};
use hyql_core::context::{CalendarState, CognitiveClass, DayClass, PartOfDay};
use hyql_core::experiment::Scenario;
use hyql_core::qlearning::{q_update, train_on_mdp, TabularMdp};
use hyql_core::sim::SimEnv;
use hyql_core::{
    ActionCatalog, ActionId, Agent, AgentConfig, AlphaSchedule, CaseBase, CaseBaseConfig,
    CaseProblem, GroupId, LearningParams, QTable, TimeBucket, TransactionStore, UserId, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn qlearning(c: &mut Criterion) {
    let catalog = ActionCatalog::with_size(20).unwrap();
    let params = LearningParams::constant(0.3, 0.9, 0.9).unwrap();
    c.bench_function("q_update/20 actions", |b| {
        let mut table: QTable<u32> = QTable::new(0.0);
        let mut i = 0u32;
        b.iter(|| {
            i = i.wrapping_add(1);
            let a = ActionId(i % 20);
            q_update(&mut table, &(i % 64), a, 1.0, &((i + 1) % 64), &catalog, &params).unwrap()
        })
    });

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mdp = TabularMdp::random(5, 3, &mut rng);
    let params = LearningParams {
        alpha: AlphaSchedule::InverseVisits,
        gamma: 0.5,
        p: 0.8,
    };
    c.bench_function("train_on_mdp/5x3, 50k steps", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            train_on_mdp(&mdp, &params, 50_000, &mut rng).unwrap()
        })
    });
}

fn collab(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = TransactionStore::new(20);
    for _ in 0..5_000 {
        let user = UserId(rng.gen_range(0..50));
        let item = ActionId(rng.gen_range(0..20));
        store.record_implicit(user, item, rng.gen_bool(0.4)).unwrap();
    }
    c.bench_function("top_n/50 users x 20 items", |b| {
        b.iter(|| store.top_n(black_box(UserId(7)), 5, true))
    });
}

fn problem(rng: &mut ChaCha8Rng) -> CaseProblem {
    let parts = [PartOfDay::Morning, PartOfDay::Afternoon, PartOfDay::Evening, PartOfDay::Night];
    let places = [["Home", "Paris"], ["Office", "Paris"], ["ClientSite", "Lyon"]];
    CaseProblem {
        time: TimeBucket::new(parts[rng.gen_range(0..4)], DayClass::Weekday, CalendarState::Free),
        place_path: places[rng.gen_range(0..3)].iter().map(|s| s.to_string()).collect(),
        group: GroupId(rng.gen_range(0..500)),
        cognitive: CognitiveClass::Navigate,
    }
}

fn casebase(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let config = CaseBaseConfig {
        retain_min_visits: 1,
        ..CaseBaseConfig::default()
    };
    let mut base = CaseBase::new(config).unwrap();
    while base.len() < 1_000 {
        let stats = EpisodeStats {
            visits: 5,
            mean_reward: rng.gen(),
        };
        let provenance = Provenance {
            user: UserId(0),
            step: base.len() as u64,
        };
        base.retain(problem(&mut rng), vec![0.5; 20], stats, provenance).unwrap();
    }
    let query = problem(&mut rng);
    c.bench_function("retrieve/1000 cases", |b| b.iter(|| base.retrieve(black_box(&query)).unwrap()));
}

fn agent(c: &mut Criterion) {
    let scn = Scenario::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/canonical.toml")).unwrap();
    let world = scn.world(1).unwrap();
    let user = UserId(scn.scenario.focal_user);
    let mut group = c.benchmark_group("agent");
    group.sample_size(20);
    for variant in [Variant::EpsilonGreedyQ, Variant::HyQL] {
        group.bench_function(format!("{variant}/1000 steps"), |b| {
            b.iter_batched(
                || {
                    let params = LearningParams::constant(0.3, 0.1, 0.9).unwrap();
                    let agent = Agent::new(
                        AgentConfig::new(variant, params, 9),
                        user,
                        world.profile(user).unwrap().context(),
                        scn.context.clone(),
                        world.catalog().clone(),
                    )
                    .unwrap();
                    (agent, SimEnv::new(world.clone(), 1))
                },
                |(mut agent, mut env)| agent.run(&mut env, 1_000).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, qlearning, collab, casebase, agent);
criterion_main!(benches);
