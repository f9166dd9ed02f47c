//! Memory-based collaborative filtering over implicit 0/1 ratings.
//!
//! Every transaction may carry the situation it happened in. The store keeps
//! one rating view for the whole transaction set plus one view per situation
//! key (at every granularity level), which is what contextual advice reads.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextModel, SituationKey};
use crate::ids::{ActionId, GroupId, UserId};

/// Neighborhood size used when none is configured.
pub const DEFAULT_NEIGHBORS: usize = 10;

#[derive(Debug, Error)]
pub enum CfError {
    #[error("item {item} is not in the catalog of {n_items} items")]
    UnknownItem { item: ActionId, n_items: usize },
    #[error("rating {0} outside [0, 1]")]
    Rating(f64),
    #[error("transaction log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub user: UserId,
    pub situation: Option<SituationKey>,
    pub item: ActionId,
    pub rating: f64,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub item: ActionId,
    pub score: f64,
    pub support: usize,
}

/// Sparse rating vector; absent items read as 0.
pub type RatingVector = BTreeMap<ActionId, f64>;

/// Cosine similarity of two dense vectors; 0 when either norm is 0.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum();
    let nv: f64 = v.iter().map(|b| b * b).sum();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    dot / (nu * nv).sqrt()
}

/// Same arithmetic as [`cosine_similarity`] on the dense expansion: terms are
/// accumulated in item order and absent items contribute exact zeros.
fn sparse_cosine(u: &RatingVector, v: &RatingVector) -> f64 {
    let mut dot = 0.0;
    for (item, a) in u {
        if let Some(b) = v.get(item) {
            dot += a * b;
        }
    }
    let nu: f64 = u.values().map(|a| a * a).sum();
    let nv: f64 = v.values().map(|b| b * b).sum();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    dot / (nu * nv).sqrt()
}

/// Latest rating per (user, item) over some subset of transactions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingView {
    users: BTreeMap<UserId, RatingVector>,
}

impl RatingView {
    fn set(&mut self, user: UserId, item: ActionId, rating: f64) {
        self.users.entry(user).or_default().insert(item, rating);
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.users.keys().copied()
    }

    pub fn vector(&self, user: UserId) -> Option<&RatingVector> {
        self.users.get(&user)
    }

    /// Implicit rating: the latest recorded value, 0 if never recorded.
    pub fn rating(&self, user: UserId, item: ActionId) -> f64 {
        self.explicit_rating(user, item).unwrap_or(0.0)
    }

    pub fn explicit_rating(&self, user: UserId, item: ActionId) -> Option<f64> {
        self.users.get(&user).and_then(|v| v.get(&item)).copied()
    }

    /// The `k` other users with positive similarity to `target`, most
    /// similar first, ties by ascending user id.
    pub fn neighbors(&self, target: UserId, k: usize) -> Vec<(UserId, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let Some(tv) = self.users.get(&target) else {
            return Vec::new();
        };
        let mut out: Vec<(UserId, f64)> = self
            .users
            .iter()
            .filter(|(u, _)| **u != target)
            .map(|(u, v)| (*u, sparse_cosine(tv, v)))
            .filter(|(_, sim)| *sim > 0.0)
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out.truncate(k);
        out
    }

    fn weighted_mean(&self, neighbors: &[(UserId, f64)], item: ActionId) -> Option<Prediction> {
        if neighbors.is_empty() {
            return None;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (n, sim) in neighbors {
            num += sim * self.rating(*n, item);
            den += sim;
        }
        Some(Prediction {
            item,
            score: num / den,
            support: neighbors.len(),
        })
    }

    /// Similarity-weighted mean of the neighbors' ratings for `item`.
    pub fn predict_rating(&self, target: UserId, item: ActionId, k: usize) -> Option<Prediction> {
        self.weighted_mean(&self.neighbors(target, k), item)
    }

    /// Predictions for every item of an `n_items` catalog, best first, ties by
    /// item index, truncated to `n`.
    pub fn top_n(
        &self,
        target: UserId,
        n: usize,
        exclude_rated: bool,
        n_items: usize,
        k: usize,
    ) -> Vec<Prediction> {
        if n == 0 {
            return Vec::new();
        }
        let neighbors = self.neighbors(target, k);
        let mut preds: Vec<Prediction> = (0..n_items as u32)
            .map(ActionId)
            .filter(|&item| !(exclude_rated && self.rating(target, item) > 0.0))
            .filter_map(|item| self.weighted_mean(&neighbors, item))
            .collect();
        sort_predictions(&mut preds);
        preds.truncate(n);
        preds
    }

    /// Unweighted mean rating among all users other than `target`; the group
    /// prior used when the target has no neighbors yet.
    pub fn group_prior(&self, target: UserId, n_items: usize) -> Vec<Prediction> {
        let others: Vec<(UserId, f64)> = self
            .users
            .keys()
            .filter(|u| **u != target)
            .map(|u| (*u, 1.0))
            .collect();
        let mut preds: Vec<Prediction> = (0..n_items as u32)
            .map(ActionId)
            .filter_map(|item| self.weighted_mean(&others, item))
            .collect();
        sort_predictions(&mut preds);
        preds
    }
}

fn sort_predictions(preds: &mut [Prediction]) {
    preds.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
}

/// Which users' transactions are eligible for contextual advice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CfScope {
    /// Users of the target's social group only.
    #[default]
    Group,
    /// Every user.
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdviceSource {
    Neighbors,
    GroupPrior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advice {
    pub item: ActionId,
    pub score: f64,
    /// Granularity of the view the advice came from.
    pub level: u8,
    pub source: AdviceSource,
}

/// Append-only transaction set with materialized latest-rating views.
#[derive(Debug, Clone)]
pub struct TransactionStore {
    n_items: usize,
    k: usize,
    scope: CfScope,
    context: Option<Arc<ContextModel>>,
    transactions: Vec<Transaction>,
    global: RatingView,
    scoped: HashMap<SituationKey, RatingView>,
}

impl TransactionStore {
    pub fn new(n_items: usize) -> Self {
        Self {
            n_items,
            k: DEFAULT_NEIGHBORS,
            scope: CfScope::Group,
            context: None,
            transactions: Vec::new(),
            global: RatingView::default(),
            scoped: HashMap::new(),
        }
    }

    /// A store that also indexes situated transactions at every granularity
    /// level of `context`.
    pub fn situated(n_items: usize, context: Arc<ContextModel>, scope: CfScope) -> Self {
        Self {
            scope,
            context: Some(context),
            ..Self::new(n_items)
        }
    }

    pub fn with_neighbors(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn neighborhood_size(&self) -> usize {
        self.k
    }

    pub fn transactions(&self) -> &[Transaction] {
        &self.transactions
    }

    pub fn is_empty(&self) -> bool {
        self.transactions.is_empty()
    }

    pub fn global_view(&self) -> &RatingView {
        &self.global
    }

    fn scope_key(&self, key: &SituationKey) -> SituationKey {
        match self.scope {
            CfScope::Group => key.clone(),
            CfScope::Population => key.with_group(GroupId::ANY),
        }
    }

    fn scope_chain(&self, key: &SituationKey) -> Vec<SituationKey> {
        let chain = match &self.context {
            Some(ctx) => ctx.generalize(key),
            None => vec![key.clone()],
        };
        chain.iter().map(|k| self.scope_key(k)).collect()
    }

    /// The view of transactions recorded in situation `key` (or any finer
    /// situation that generalizes to it).
    pub fn scope_view(&self, key: &SituationKey) -> Option<&RatingView> {
        self.scoped.get(&self.scope_key(key))
    }

    pub fn record(&mut self, tx: Transaction) -> Result<(), CfError> {
        if tx.item.index() >= self.n_items {
            return Err(CfError::UnknownItem {
                item: tx.item,
                n_items: self.n_items,
            });
        }
        if !(0.0..=1.0).contains(&tx.rating) {
            return Err(CfError::Rating(tx.rating));
        }
        self.global.set(tx.user, tx.item, tx.rating);
        if let Some(s) = &tx.situation {
            for key in self.scope_chain(s) {
                self.scoped
                    .entry(key)
                    .or_default()
                    .set(tx.user, tx.item, tx.rating);
            }
        }
        self.transactions.push(tx);
        Ok(())
    }

    /// Records an implicit rating: 1 for a positive interaction, 0 otherwise.
    pub fn record_implicit(
        &mut self,
        user: UserId,
        item: ActionId,
        positive: bool,
    ) -> Result<(), CfError> {
        let step = self.transactions.len() as u64;
        self.record(Transaction {
            user,
            situation: None,
            item,
            rating: if positive { 1.0 } else { 0.0 },
            step,
        })
    }

    pub fn record_situated(
        &mut self,
        user: UserId,
        item: ActionId,
        positive: bool,
        situation: &SituationKey,
        step: u64,
    ) -> Result<(), CfError> {
        self.record(Transaction {
            user,
            situation: Some(situation.clone()),
            item,
            rating: if positive { 1.0 } else { 0.0 },
            step,
        })
    }

    pub fn neighbors(&self, target: UserId, k: usize) -> Vec<(UserId, f64)> {
        self.global.neighbors(target, k)
    }

    pub fn predict_rating(&self, target: UserId, item: ActionId, k: usize) -> Option<Prediction> {
        self.global.predict_rating(target, item, k)
    }

    pub fn top_n(&self, target: UserId, n: usize, exclude_rated: bool) -> Vec<Prediction> {
        self.global
            .top_n(target, n, exclude_rated, self.n_items, self.k)
    }

    /// Contextual advice for `target` in situation `s`.
    ///
    /// Walks the views of `s` from most specific to most general and takes
    /// the top neighbor-based prediction; if the target has no neighbors in
    /// any view, walks again using the unweighted group prior. Items scoring
    /// 0 and items the target already rated in that view are skipped.
    pub fn advise_action(&self, target: UserId, s: &SituationKey) -> Option<Advice> {
        let chain = self.scope_chain(s);
        let views: Vec<(u8, &RatingView)> = chain
            .iter()
            .filter_map(|k| self.scoped.get(k).map(|v| (k.granularity, v)))
            .collect();
        let pick = |view: &RatingView, preds: Vec<Prediction>| {
            preds
                .into_iter()
                .find(|p| p.score > 0.0 && view.explicit_rating(target, p.item).is_none())
        };
        for (level, view) in &views {
            let preds = view.top_n(target, self.n_items, true, self.n_items, self.k);
            if let Some(p) = pick(view, preds) {
                return Some(Advice {
                    item: p.item,
                    score: p.score,
                    level: *level,
                    source: AdviceSource::Neighbors,
                });
            }
        }
        for (level, view) in &views {
            if let Some(p) = pick(view, view.group_prior(target, self.n_items)) {
                return Some(Advice {
                    item: p.item,
                    score: p.score,
                    level: *level,
                    source: AdviceSource::GroupPrior,
                });
            }
        }
        None
    }

    /// Writes `user_id,situation_key,item,rating,step` lines; `-` marks a
    /// transaction without situation.
    pub fn write_log<W: Write>(&self, mut out: W) -> Result<(), CfError> {
        for tx in &self.transactions {
            let situation = tx
                .situation
                .as_ref()
                .map_or_else(|| "-".to_string(), |s| s.to_string());
            writeln!(
                out,
                "{},{},{},{},{}",
                tx.user, situation, tx.item, tx.rating, tx.step
            )?;
        }
        Ok(())
    }

    /// Replays a transaction log into `self`. Nothing is recorded unless the
    /// whole log parses.
    pub fn read_log<R: BufRead>(&mut self, input: R) -> Result<(), CfError> {
        let mut parsed = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let err = |message: String| CfError::Parse {
                line: i + 1,
                message,
            };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", f.len())));
            }
            let situation = match f[1] {
                "-" => None,
                s => Some(s.parse::<SituationKey>().map_err(|e| err(e.to_string()))?),
            };
            let tx = Transaction {
                user: f[0].parse().map_err(|e| err(format!("user: {e}")))?,
                situation,
                item: ActionId(f[2].parse().map_err(|e| err(format!("item: {e}")))?),
                rating: f[3].parse().map_err(|e| err(format!("rating: {e}")))?,
                step: f[4].parse().map_err(|e| err(format!("step: {e}")))?,
            };
            if tx.item.index() >= self.n_items {
                return Err(err(format!("item {} outside catalog", tx.item)));
            }
            if !(0.0..=1.0).contains(&tx.rating) {
                return Err(err(format!("rating {} outside [0, 1]", tx.rating)));
            }
            parsed.push(tx);
        }
        for tx in parsed {
            self.record(tx)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{CognitiveClass, TimeBucket};

    fn key(place: &str) -> SituationKey {
        SituationKey {
            time: "Morning-Weekday-Free".parse::<TimeBucket>().unwrap(),
            place: place.into(),
            group: GroupId(0),
            cognitive: CognitiveClass::Navigate,
            granularity: 0,
        }
    }

    #[test]
    fn implicit_ratings() {
        let mut store = TransactionStore::new(3);
        let u = UserId(1);
        store.record_implicit(u, ActionId(0), true).unwrap();
        assert_eq!(store.global_view().rating(u, ActionId(0)), 1.0);
        assert_eq!(store.global_view().rating(u, ActionId(1)), 0.0);
        store.record_implicit(u, ActionId(0), false).unwrap();
        assert_eq!(store.global_view().rating(u, ActionId(0)), 0.0);
        assert_eq!(store.transactions().len(), 2);
        assert!(matches!(
            store.record_implicit(u, ActionId(3), true),
            Err(CfError::UnknownItem { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.5, 0.0], &[1.0, 0.5, 0.0]), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 1.0, 0.0], &[0.0, 0.0, 1.0]), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0, 0.0], &[1.0, 0.0, 1.0]) - 0.5).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn neighbors_of_user_without_transactions() {
        let mut store = TransactionStore::new(2);
        store.record_implicit(UserId(1), ActionId(0), true).unwrap();
        assert!(store.neighbors(UserId(9), 5).is_empty());
        store.record_implicit(UserId(2), ActionId(0), true).unwrap();
        assert!(store.neighbors(UserId(1), 0).is_empty());
        assert_eq!(store.neighbors(UserId(1), 5), vec![(UserId(2), 1.0)]);
    }

    #[test]
    fn prediction_examples() {
        let mut store = TransactionStore::new(3);
        let t = UserId(0);
        store.record_implicit(t, ActionId(0), true).unwrap();
        store.record_implicit(UserId(1), ActionId(0), true).unwrap();
        store.record_implicit(UserId(1), ActionId(2), true).unwrap();
        let p = store.predict_rating(t, ActionId(2), 10).unwrap();
        // single neighbor, similarity 1/sqrt(2)
        assert_eq!(p.score, 1.0);
        assert_eq!(p.support, 1);
        assert!(store.predict_rating(UserId(7), ActionId(2), 10).is_none());
    }

    #[test]
    fn weighted_mean_hand_value() {
        // neighbors with similarity 0.5 (rating 1) and 1.0 (rating 0)
        let mut store = TransactionStore::new(4);
        let t = UserId(0);
        store.record_implicit(t, ActionId(0), true).unwrap();
        store.record_implicit(t, ActionId(1), true).unwrap();
        // u1 = (1,0,1,0)-ish: cos with (1,1,0,0) = 1/2 via items 0 and 2
        store.record_implicit(UserId(1), ActionId(0), true).unwrap();
        store.record_implicit(UserId(1), ActionId(2), true).unwrap();
        store.record_implicit(UserId(1), ActionId(3), true).unwrap();
        store.record_implicit(UserId(1), ActionId(3), false).unwrap();
        // u2 = (1,1,0,0): similarity 1, rating for item 2 is 0
        store.record_implicit(UserId(2), ActionId(0), true).unwrap();
        store.record_implicit(UserId(2), ActionId(1), true).unwrap();
        let n = store.neighbors(t, 10);
        assert_eq!(n[0].0, UserId(2));
        assert!((n[0].1 - 1.0).abs() < 1e-15);
        assert!((n[1].1 - 0.5).abs() < 1e-15);
        let p = store.predict_rating(t, ActionId(2), 10).unwrap();
        assert!((p.score - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn top_n_edges() {
        let mut store = TransactionStore::new(2);
        let t = UserId(0);
        for u in 0..3 {
            store.record_implicit(UserId(u), ActionId(0), true).unwrap();
            store.record_implicit(UserId(u), ActionId(1), true).unwrap();
        }
        assert!(store.top_n(t, 0, false).is_empty());
        assert!(store.top_n(t, 5, true).is_empty());
        let all = store.top_n(t, 5, false);
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].item, ActionId(0));
    }

    #[test]
    fn advice_follows_the_group_in_situation() {
        let mut store = TransactionStore::new(5);
        let s = key("Home");
        for u in 1..5 {
            store.record_situated(UserId(u), ActionId(3), true, &s, 0).unwrap();
            store.record_situated(UserId(u), ActionId(1), false, &s, 0).unwrap();
        }
        let advice = store.advise_action(UserId(42), &s).unwrap();
        assert_eq!(advice.item, ActionId(3));
        assert_eq!(advice.source, AdviceSource::GroupPrior);
        assert!(TransactionStore::new(5).advise_action(UserId(1), &s).is_none());
        // another situation has no data
        assert!(store.advise_action(UserId(42), &key("Office")).is_none());
    }

    #[test]
    fn advice_skips_items_the_target_rejected() {
        let mut store = TransactionStore::new(3);
        let s = key("Home");
        for u in 1..4 {
            store.record_situated(UserId(u), ActionId(0), true, &s, 0).unwrap();
        }
        store.record_situated(UserId(1), ActionId(2), true, &s, 0).unwrap();
        store.record_situated(UserId(0), ActionId(0), false, &s, 1).unwrap();
        let advice = store.advise_action(UserId(0), &s).unwrap();
        assert_eq!(advice.item, ActionId(2));
    }

    #[test]
    fn population_scope_ignores_groups() {
        let ctx = Arc::new(crate::context::tests_support::model());
        let mut grouped = TransactionStore::situated(3, ctx.clone(), CfScope::Group);
        let mut everyone = TransactionStore::situated(3, ctx, CfScope::Population);
        let other_group = key("Home").with_group(GroupId(1));
        for store in [&mut grouped, &mut everyone] {
            store.record_situated(UserId(1), ActionId(2), true, &other_group, 0).unwrap();
        }
        assert!(grouped.advise_action(UserId(0), &key("Home")).is_none());
        assert_eq!(everyone.advise_action(UserId(0), &key("Home")).unwrap().item, ActionId(2));
    }

    #[test]
    fn log_round_trip() {
        let mut store = TransactionStore::new(4);
        store.record_situated(UserId(3), ActionId(1), true, &key("Home"), 7).unwrap();
        store.record_implicit(UserId(2), ActionId(0), false).unwrap();
        let mut buf = Vec::new();
        store.write_log(&mut buf).unwrap();
        let mut back = TransactionStore::new(4);
        back.read_log(buf.as_slice()).unwrap();
        assert_eq!(back.transactions(), store.transactions());
        let mut partial = TransactionStore::new(4);
        let bad = "3,-,1,1,0\n3,-,9,1,0\n";
        assert!(matches!(
            partial.read_log(bad.as_bytes()),
            Err(CfError::Parse { line: 2, .. })
        ));
        assert!(partial.is_empty());
    }
}
