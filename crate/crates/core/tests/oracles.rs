//! Independent recomputations of the learning targets and of contextual
//! advice.

use std::collections::BTreeMap;
use std::sync::Arc;

use hyql_core::collab::AdviceSource;
use hyql_core::context::{CalendarState, CognitiveClass, DayClass, PartOfDay};
use hyql_core::qlearning::{value_iteration_oracle, TabularMdp};
use hyql_core::{
    ActionId, CfScope, ContextModel, Gazetteer, GroupId, SituationKey, TimeBucket,
    TransactionStore, UserId,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GAZ: &str = include_str!("../../../scenarios/gazetteer.csv");

/// Q* by solving the linear system of every deterministic stationary policy
/// and taking the componentwise maximum of the values.
fn policy_enumeration(mdp: &TabularMdp, gamma: f64) -> Vec<Vec<f64>> {
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let mut best = vec![f64::NEG_INFINITY; n_s];
    let total = n_a.pow(n_s as u32);
    for code in 0..total {
        let policy: Vec<usize> = (0..n_s).map(|s| (code / n_a.pow(s as u32)) % n_a).collect();
        let p = DMatrix::from_fn(n_s, n_s, |s, t| mdp.transitions[s][policy[s]][t]);
        let r = DVector::from_fn(n_s, |s, _| mdp.rewards[s][policy[s]]);
        let a = DMatrix::identity(n_s, n_s) - p * gamma;
        let v = a.lu().solve(&r).expect("I - gamma P is invertible");
        for s in 0..n_s {
            best[s] = best[s].max(v[s]);
        }
    }
    (0..n_s)
        .map(|s| {
            (0..n_a)
                .map(|a| {
                    let ev: f64 = mdp.transitions[s][a].iter().zip(&best).map(|(p, v)| p * v).sum();
                    mdp.rewards[s][a] + gamma * ev
                })
                .collect()
        })
        .collect()
}

#[test]
fn value_iteration_matches_policy_enumeration() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(5, 3, &mut rng);
        for gamma in [0.0, 0.5, 0.9] {
            let vi = value_iteration_oracle(&mdp, gamma, 1e-13).unwrap();
            let exact = policy_enumeration(&mdp, gamma);
            for s in 0..5 {
                for a in 0..3 {
                    assert!(
                        (vi[s][a] - exact[s][a]).abs() < 1e-9,
                        "seed {seed} gamma {gamma} ({s},{a}): {} vs {}",
                        vi[s][a],
                        exact[s][a]
                    );
                }
            }
        }
    }
}

#[test]
fn hand_built_two_state_mdp() {
    // state 0: action 0 stays for 1, action 1 moves to the absorbing state 1
    // for 2; state 1 pays 0 forever
    let mdp = TabularMdp::new(
        vec![
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ],
        vec![vec![1.0, 2.0], vec![0.0, 0.0]],
    )
    .unwrap();
    let q = value_iteration_oracle(&mdp, 0.9, 1e-12).unwrap();
    // staying forever is worth 1 / (1 - 0.9) = 10
    assert!((q[0][0] - 10.0).abs() < 1e-9);
    assert!((q[0][1] - 2.0).abs() < 1e-9);
    assert_eq!(q[1], vec![0.0, 0.0]);
}

// ---------------------------------------------------------------------------
// contextual advice

fn context() -> Arc<ContextModel> {
    Arc::new(ContextModel::new(Gazetteer::parse(GAZ).unwrap(), 2).unwrap())
}

fn key(place: &str, group: u32) -> SituationKey {
    SituationKey {
        time: TimeBucket::new(PartOfDay::Morning, DayClass::Weekday, CalendarState::Free),
        place: place.into(),
        group: GroupId(group),
        cognitive: CognitiveClass::Navigate,
        granularity: 0,
    }
}

#[test]
fn advice_falls_back_to_a_coarser_view() {
    let ctx = context();
    let mut store = TransactionStore::situated(4, ctx, CfScope::Group);
    // the team only ever worked from the office; the newcomer is at home,
    // which shares the city level with it
    for u in 1..6 {
        store.record_situated(UserId(u), ActionId(2), true, &key("Office", 0), 0).unwrap();
        store.record_situated(UserId(u), ActionId(0), false, &key("Office", 0), 0).unwrap();
    }
    let advice = store.advise_action(UserId(0), &key("Home", 0)).unwrap();
    assert_eq!(advice.item, ActionId(2));
    assert_eq!(advice.level, 1);
    assert_eq!(advice.source, AdviceSource::GroupPrior);
    // at the client site only the root is shared
    let far = store.advise_action(UserId(0), &key("ClientSite", 0)).unwrap();
    assert_eq!((far.item, far.level), (ActionId(2), 2));
}

type Ratings = BTreeMap<u32, Vec<Option<f64>>>;

/// Latest rating per (user, item) among transactions whose situation
/// generalizes to `view` at the view's level.
fn view_ratings(
    ctx: &ContextModel,
    txs: &[(u32, SituationKey, u32, bool)],
    view: &SituationKey,
    n_items: usize,
) -> Ratings {
    let mut out = Ratings::new();
    for (u, s, item, pos) in txs {
        if ctx.generalize(s).iter().any(|k| k == view) {
            out.entry(*u).or_insert_with(|| vec![None; n_items])[*item as usize] =
                Some(if *pos { 1.0 } else { 0.0 });
        }
    }
    out
}

fn dense(r: &[Option<f64>]) -> Vec<f64> {
    r.iter().map(|x| x.unwrap_or(0.0)).collect()
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv).sqrt()
    }
}

/// Best item among `scores` that the target has not rated and that scores
/// above 0; ties go to the lower index.
fn best_unrated(scores: &[Option<f64>], target: Option<&Vec<Option<f64>>>) -> Option<(u32, f64)> {
    let mut best: Option<(u32, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        let rated = target.is_some_and(|t| t[i].is_some());
        if let Some(s) = s {
            if *s > 0.0 && !rated && best.is_none_or(|(_, b)| *s > b) {
                best = Some((i as u32, *s));
            }
        }
    }
    best
}

fn brute_force_advice(
    ctx: &ContextModel,
    txs: &[(u32, SituationKey, u32, bool)],
    target: u32,
    s: &SituationKey,
    n_items: usize,
    k: usize,
) -> Option<(u32, u8, AdviceSource)> {
    let views: Vec<(SituationKey, Ratings)> = ctx
        .generalize(s)
        .into_iter()
        .map(|v| {
            let r = view_ratings(ctx, txs, &v, n_items);
            (v, r)
        })
        .filter(|(_, r)| !r.is_empty())
        .collect();
    for (v, r) in &views {
        let Some(t) = r.get(&target) else { continue };
        let mut nb: Vec<(u32, f64)> = r
            .iter()
            .filter(|(u, _)| **u != target)
            .map(|(u, x)| (*u, cosine(&dense(t), &dense(x))))
            .filter(|(_, sim)| *sim > 0.0)
            .collect();
        nb.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        nb.truncate(k);
        if nb.is_empty() {
            continue;
        }
        let den: f64 = nb.iter().map(|(_, s)| s).sum();
        let scores: Vec<Option<f64>> = (0..n_items)
            .map(|i| {
                let num: f64 = nb.iter().map(|(u, s)| s * r[u][i].unwrap_or(0.0)).sum();
                Some(num / den)
            })
            .collect();
        if let Some((item, _)) = best_unrated(&scores, Some(t)) {
            return Some((item, v.granularity, AdviceSource::Neighbors));
        }
    }
    for (v, r) in &views {
        let others: Vec<&Vec<Option<f64>>> =
            r.iter().filter(|(u, _)| **u != target).map(|(_, x)| x).collect();
        if others.is_empty() {
            continue;
        }
        let scores: Vec<Option<f64>> = (0..n_items)
            .map(|i| {
                let sum: f64 = others.iter().map(|x| x[i].unwrap_or(0.0)).sum();
                Some(sum / others.len() as f64)
            })
            .collect();
        if let Some((item, _)) = best_unrated(&scores, r.get(&target)) {
            return Some((item, v.granularity, AdviceSource::GroupPrior));
        }
    }
    None
}

const PLACES: [&str; 4] = ["Home", "Office", "Cafe", "ClientSite"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn advice_walk_matches_per_level_brute_force(
        raw in prop::collection::vec((0u32..5, 0usize..4, 0u32..5, any::<bool>()), 0..30),
        target in 0u32..5,
        at in 0usize..4,
        k in 1usize..5,
    ) {
        let ctx = context();
        let n_items = 5;
        let mut store = TransactionStore::situated(n_items, ctx.clone(), CfScope::Group).with_neighbors(k);
        let mut txs = Vec::new();
        for (step, (u, place, item, pos)) in raw.into_iter().enumerate() {
            let s = key(PLACES[place], 0);
            store.record_situated(UserId(u), ActionId(item), pos, &s, step as u64).unwrap();
            txs.push((u, s, item, pos));
        }
        let q = key(PLACES[at], 0);
        let got = store
            .advise_action(UserId(target), &q)
            .map(|a| (a.item.0, a.level, a.source));
        let want = brute_force_advice(&ctx, &txs, target, &q, n_items, k);
        prop_assert_eq!(got, want);
    }
}
